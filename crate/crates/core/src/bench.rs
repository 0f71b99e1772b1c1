//! Wall-clock throughput of the unrolled flow iteration.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{per_channel, rep_flow_forward, FlowParams};
use crate::synth::{shift_circular, texture};
use crate::tensor::{FeatureMap, Real};

/// Fewest timed runs a measurement may use.
pub const MIN_RUNS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Width {
    #[default]
    F32,
    F64,
}

impl Width {
    pub fn name(&self) -> &'static str {
        match self {
            Width::F32 => "f32",
            Width::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub iterations: Vec<usize>,
    /// square image sides
    pub sizes: Vec<usize>,
    pub channels: Vec<usize>,
    pub warmup: usize,
    pub runs: usize,
    pub width: Width,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iterations: vec![10, 100],
            sizes: vec![64],
            channels: vec![1],
            warmup: 2,
            runs: MIN_RUNS,
            width: Width::F32,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < MIN_RUNS {
            return Err(Error::invalid(format!(
                "need at least {MIN_RUNS} timed runs, got {}",
                self.runs
            )));
        }
        if self.iterations.is_empty() || self.sizes.is_empty() || self.channels.is_empty() {
            return Err(Error::invalid(
                "iterations, sizes and channels must be non-empty",
            ));
        }
        if self.iterations.contains(&0)
            || self.channels.contains(&0)
            || self.sizes.iter().any(|&s| s < 2)
        {
            return Err(Error::invalid(
                "iterations and channels must be >= 1, sizes >= 2",
            ));
        }
        Ok(())
    }
}

/// One CSV row. Times are per frame pair, i.e. per `channels` flow solves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub iterations: usize,
    pub size: usize,
    pub channels: usize,
    pub width: Width,
    pub runs: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// median absolute deviation from the median
    pub mad_ms: f64,
    pub pairs_per_sec: f64,
}

/// Median of a non-empty slice; even lengths average the middle pair.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `f` `runs` times after `warmup` untimed calls; returns milliseconds.
pub fn time_runs(
    warmup: usize,
    runs: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<Vec<f64>> {
    if runs == 0 {
        return Err(Error::invalid("need at least one timed run"));
    }
    for _ in 0..warmup {
        f()?;
    }
    (0..runs)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

fn summarize(
    iterations: usize,
    size: usize,
    channels: usize,
    width: Width,
    times: &[f64],
) -> BenchRow {
    let med = median(times);
    let dev: Vec<f64> = times.iter().map(|t| (t - med).abs()).collect();
    BenchRow {
        iterations,
        size,
        channels,
        width,
        runs: times.len(),
        median_ms: med,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mad_ms: median(&dev),
        pairs_per_sec: if med > 0.0 { 1e3 / med } else { f64::INFINITY },
    }
}

fn pair<T: Real>(
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes: Vec<FeatureMap<T>> = (0..channels)
        .map(|_| texture(size, size, &mut rng))
        .collect();
    let f1 = FeatureMap::stack(&planes)?;
    let f2 = FeatureMap::stack(
        &planes
            .iter()
            .map(|p| shift_circular(p, 1, 0))
            .collect::<Vec<_>>(),
    )?;
    Ok((f1, f2))
}

fn measure<T: Real>(
    cfg: &BenchConfig,
    iterations: usize,
    size: usize,
    channels: usize,
) -> Result<BenchRow> {
    let (f1, f2) = pair::<T>(size, channels, cfg.seed)?;
    let params = FlowParams::<T>::default();
    let times = time_runs(cfg.warmup, cfg.runs, || {
        per_channel(channels, |c| {
            rep_flow_forward(&f1.plane(c), &f2.plane(c), &params, iterations).map(|_| ())
        })?;
        Ok(())
    })?;
    Ok(summarize(iterations, size, channels, cfg.width, &times))
}

/// One row per (size, channels, iterations) combination, in that nesting order.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        for &channels in &cfg.channels {
            for &it in &cfg.iterations {
                rows.push(match cfg.width {
                    Width::F32 => measure::<f32>(cfg, it, size, channels)?,
                    Width::F64 => measure::<f64>(cfg, it, size, channels)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<Vec<u8>> {
    crate::io::csv_bytes(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn zero_runs_rejected() {
        assert!(time_runs(0, 0, || Ok(())).is_err());
        assert!(run_bench(&BenchConfig {
            runs: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn warmup_is_not_timed() {
        let mut calls = 0;
        let t = time_runs(3, 10, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((calls, t.len()), (13, 10));
    }

    #[test]
    fn rows_and_csv() {
        let cfg = BenchConfig {
            iterations: vec![1, 2],
            sizes: vec![8],
            warmup: 0,
            ..Default::default()
        };
        let rows = run_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows
            .iter()
            .all(|r| r.median_ms >= 0.0 && r.min_ms <= r.max_ms));
        let s = String::from_utf8(bench_csv(&rows).unwrap()).unwrap();
        assert!(s.starts_with(
            "iterations,size,channels,width,runs,median_ms,min_ms,max_ms,mad_ms,pairs_per_sec\n"
        ));
    }
}
