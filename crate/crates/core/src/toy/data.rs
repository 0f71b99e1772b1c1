//! Synthetic motion-classification videos. Every sample is a random texture
//! translating circularly in its class's direction, so a single frame says
//! nothing about the label.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{shift_circular, texture};
use crate::tensor::FeatureMap;

/// `(name, dx, dy)` per class; image rows grow downward.
pub const DIRECTIONS: [(&str, i64, i64); 8] = [
    ("up", 0, -1),
    ("down", 0, 1),
    ("left", -1, 0),
    ("right", 1, 0),
    ("up-left", -1, -1),
    ("up-right", 1, -1),
    ("down-left", -1, 1),
    ("down-right", 1, 1),
];

/// Weight of the static distractor texture when enabled.
pub const DISTRACTOR_MIX: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub size: usize,
    pub channels: usize,
    /// inclusive speed range in pixels per frame
    pub min_speed: u32,
    pub max_speed: u32,
    /// blend a static class-independent texture over every frame
    pub distractor: bool,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            num_classes: 4,
            train_per_class: 32,
            test_per_class: 32,
            frames: 8,
            size: 32,
            channels: 1,
            min_speed: 1,
            max_speed: 2,
            distractor: false,
        }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=DIRECTIONS.len()).contains(&self.num_classes) {
            return Err(Error::invalid(format!(
                "num_classes must be in 2..={}, got {}",
                DIRECTIONS.len(),
                self.num_classes
            )));
        }
        if self.size < 8 {
            return Err(Error::invalid(format!(
                "spatial size must be >= 8, got {}",
                self.size
            )));
        }
        if self.frames < 2 {
            return Err(Error::invalid("need at least 2 frames"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels must be >= 1"));
        }
        if self.min_speed == 0 || self.min_speed > self.max_speed {
            return Err(Error::invalid(format!(
                "speed range {}..={} must be positive and ordered",
                self.min_speed, self.max_speed
            )));
        }
        Ok(())
    }
}

/// Frames scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<FeatureMap<f64>>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

/// Frames of `base` moving `speed` pixels per frame in `class`'s direction,
/// optionally blended with a static `distractor`.
pub fn moving_sample(
    base: &FeatureMap<f64>,
    class: usize,
    speed: u32,
    frames: usize,
    distractor: Option<&FeatureMap<f64>>,
) -> Result<VideoSample> {
    let &(_, dx, dy) = DIRECTIONS
        .get(class)
        .ok_or_else(|| Error::invalid(format!("class {class} out of range")))?;
    let s = speed as i64;
    let frames = (0..frames as i64)
        .map(|k| {
            let moved = shift_circular(base, dx * s * k, dy * s * k);
            match distractor {
                Some(d) => moved
                    .scale(1.0 - DISTRACTOR_MIX)
                    .add(&d.scale(DISTRACTOR_MIX)),
                None => Ok(moved),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoSample {
        frames,
        label: class,
    })
}

fn random_image(cfg: &ToyDatasetConfig, rng: &mut ChaCha8Rng) -> Result<FeatureMap<f64>> {
    let planes: Vec<FeatureMap<f64>> = (0..cfg.channels)
        .map(|_| texture::<f64>(cfg.size, cfg.size, rng).scale(1.0 / 255.0))
        .collect();
    FeatureMap::stack(&planes)
}

fn split(
    cfg: &ToyDatasetConfig,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<VideoSample>> {
    let mut out = Vec::with_capacity(per_class * cfg.num_classes);
    for _ in 0..per_class {
        for class in 0..cfg.num_classes {
            let base = random_image(cfg, rng)?;
            let speed = rng.gen_range(cfg.min_speed..=cfg.max_speed);
            let distractor = if cfg.distractor {
                Some(random_image(cfg, rng)?)
            } else {
                None
            };
            out.push(moving_sample(
                &base,
                class,
                speed,
                cfg.frames,
                distractor.as_ref(),
            )?);
        }
    }
    Ok(out)
}

/// Train and test splits drawn from disjoint ChaCha streams of `seed`.
/// Labels are exactly balanced and interleaved by class.
pub fn gen_motion_dataset(cfg: &ToyDatasetConfig, seed: u64) -> Result<ToyDataset> {
    cfg.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(2);
    Ok(ToyDataset {
        train: split(cfg, cfg.train_per_class, &mut train_rng)?,
        test: split(cfg, cfg.test_per_class, &mut test_rng)?,
    })
}

/// Copy of `samples` with each sample's frames randomly permuted, destroying
/// temporal order.
pub fn shuffle_frames(samples: &[VideoSample], seed: u64) -> Vec<VideoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let mut frames = s.frames.clone();
            frames.shuffle(&mut rng);
            VideoSample {
                frames,
                label: s.label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyDatasetConfig {
        ToyDatasetConfig {
            train_per_class: 2,
            test_per_class: 1,
            frames: 3,
            size: 12,
            ..Default::default()
        }
    }

    #[test]
    fn balanced_labels() {
        let ds = gen_motion_dataset(&small(), 1).unwrap();
        assert_eq!(ds.train.len(), 8);
        for k in 0..4 {
            assert_eq!(ds.train.iter().filter(|s| s.label == k).count(), 2);
        }
    }

    #[test]
    fn same_seed_same_bits_and_disjoint_splits() {
        let a = gen_motion_dataset(&small(), 9).unwrap();
        let b = gen_motion_dataset(&small(), 9).unwrap();
        assert_eq!(a, b);
        for t in &a.test {
            assert!(a.train.iter().all(|s| s.frames[0] != t.frames[0]));
        }
    }

    #[test]
    fn right_motion_is_a_one_pixel_shift() {
        let base: FeatureMap<f64> = texture(10, 10, &mut ChaCha8Rng::seed_from_u64(2));
        let s = moving_sample(&base, 3, 1, 2, None).unwrap();
        assert_eq!(s.frames[1], shift_circular(&s.frames[0], 1, 0));
    }

    #[test]
    fn rejects_degenerate_configs() {
        let bad = [
            ToyDatasetConfig {
                size: 7,
                ..Default::default()
            },
            ToyDatasetConfig {
                num_classes: 1,
                ..Default::default()
            },
            ToyDatasetConfig {
                min_speed: 0,
                ..Default::default()
            },
            ToyDatasetConfig {
                frames: 1,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(gen_motion_dataset(&cfg, 0).is_err());
        }
    }

    #[test]
    fn shuffled_frames_keep_labels() {
        let ds = gen_motion_dataset(&small(), 4).unwrap();
        let sh = shuffle_frames(&ds.train, 1);
        for (a, b) in ds.train.iter().zip(&sh) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.frames.len(), b.frames.len());
        }
    }
}
