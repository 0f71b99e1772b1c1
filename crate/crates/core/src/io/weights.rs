//! Named-tensor mapping for layer parameters. Every tensor of a component
//! lives under `prefix.`; padding is architectural and not stored.

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layer::{FlowParams, LayerWeights, LearnFlags};
use crate::tensor::{ConvLayer, Kernel2D, PaddingSpec};

fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `prefix.weight` as `[out, in, rows, cols]` and `prefix.bias` as `[out]`.
pub fn store_conv(ck: &mut Checkpoint, prefix: &str, layer: &ConvLayer<f64>) -> Result<()> {
    let dims = [
        layer.out_channels,
        layer.in_channels,
        layer.kernel_rows,
        layer.kernel_cols,
    ];
    ck.insert(key(prefix, "weight"), &dims, layer.weights.clone())?;
    ck.insert(
        key(prefix, "bias"),
        &[layer.out_channels],
        layer.bias.clone(),
    )
}

pub fn load_conv(ck: &Checkpoint, prefix: &str, padding: PaddingSpec) -> Result<ConvLayer<f64>> {
    let wk = key(prefix, "weight");
    let dims = ck.dims(&wk)?.to_vec();
    let [o, i, r, c] = dims[..] else {
        return Err(Error::shape(format!(
            "`{wk}` must have rank 4, got {dims:?}"
        )));
    };
    Ok(ConvLayer {
        out_channels: o,
        in_channels: i,
        kernel_rows: r,
        kernel_cols: c,
        padding,
        weights: ck.expect(&wk, &dims)?.to_vec(),
        bias: ck.expect(&key(prefix, "bias"), &[o])?.to_vec(),
    })
}

pub fn store_flow_params(ck: &mut Checkpoint, prefix: &str, p: &FlowParams<f64>) -> Result<()> {
    ck.insert_scalar(key(prefix, "tau"), p.tau)?;
    ck.insert_scalar(key(prefix, "lambda"), p.lambda)?;
    ck.insert_scalar(key(prefix, "theta"), p.theta)?;
    let kernels = [
        ("w_x", &p.w_x),
        ("w_y", &p.w_y),
        ("sobel_x", &p.sobel_x),
        ("sobel_y", &p.sobel_y),
    ];
    for (name, k) in kernels {
        ck.insert(
            key(prefix, name),
            &[k.rows(), k.cols()],
            k.weights().to_vec(),
        )?;
    }
    let flags =
        [p.learn.sobel, p.learn.divergence, p.learn.scalars].map(|b| f64::from(u8::from(b)));
    ck.insert(key(prefix, "learn"), &[3], flags.to_vec())
}

/// Reads flow parameters; a missing `learn` tensor means nothing is learnable.
pub fn load_flow_params(ck: &Checkpoint, prefix: &str) -> Result<FlowParams<f64>> {
    let kernel = |name: &str, r: usize, c: usize| -> Result<Kernel2D<f64>> {
        Kernel2D::new(r, c, ck.expect(&key(prefix, name), &[r, c])?.to_vec())
    };
    let learn = match ck.get(&key(prefix, "learn")) {
        None => LearnFlags::NONE,
        Some(_) => {
            let f = ck.expect(&key(prefix, "learn"), &[3])?;
            LearnFlags {
                sobel: f[0] != 0.0,
                divergence: f[1] != 0.0,
                scalars: f[2] != 0.0,
            }
        }
    };
    let p = FlowParams {
        tau: ck.scalar(&key(prefix, "tau"))?,
        lambda: ck.scalar(&key(prefix, "lambda"))?,
        theta: ck.scalar(&key(prefix, "theta"))?,
        w_x: kernel("w_x", 1, 2)?,
        w_y: kernel("w_y", 2, 1)?,
        sobel_x: kernel("sobel_x", 3, 3)?,
        sobel_y: kernel("sobel_y", 3, 3)?,
        learn,
    };
    p.validate()?;
    Ok(p)
}

pub fn store_layer(ck: &mut Checkpoint, prefix: &str, w: &LayerWeights<f64>) -> Result<()> {
    store_conv(ck, &key(prefix, "reduce"), &w.reduce)?;
    store_conv(ck, &key(prefix, "expand"), &w.expand)?;
    store_flow_params(ck, &key(prefix, "flow"), &w.flow)?;
    ck.insert_scalar(key(prefix, "iterations"), w.iterations as f64)
}

pub fn load_layer(ck: &Checkpoint, prefix: &str) -> Result<LayerWeights<f64>> {
    LayerWeights::new(
        load_conv(ck, &key(prefix, "reduce"), PaddingSpec::NONE)?,
        load_conv(ck, &key(prefix, "expand"), PaddingSpec::replicate(1))?,
        load_flow_params(ck, &key(prefix, "flow"))?,
        load_count(ck, &key(prefix, "iterations"))?,
    )
}

/// A scalar tensor holding a non-negative integer.
pub fn load_count(ck: &Checkpoint, name: &str) -> Result<usize> {
    let v = ck.scalar(name)?;
    if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
        return Err(Error::malformed(
            "checkpoint",
            format!("`{name}` = {v} is not a count"),
        ));
    }
    Ok(v as usize)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn layer_round_trip() {
        let mut w = LayerWeights::random(3, 2, 7, &mut ChaCha8Rng::seed_from_u64(1));
        w.flow.learn = LearnFlags::ALL;
        w.flow.theta = 0.41;
        let mut ck = Checkpoint::new();
        store_layer(&mut ck, "flow", &w).unwrap();
        let back = load_layer(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), "flow").unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn rejects_invalid_params() {
        let p = FlowParams::<f64> {
            theta: -1.0,
            ..Default::default()
        };
        let mut ck = Checkpoint::new();
        store_flow_params(&mut ck, "", &p).unwrap();
        assert!(load_flow_params(&ck, "").is_err());
        let mut ck = Checkpoint::new();
        ck.insert_scalar("n", 2.5).unwrap();
        assert!(load_count(&ck, "n").is_err());
    }
}
