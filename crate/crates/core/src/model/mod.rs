//! Small fully convolutional pixel classifier.
//!
//! A network is a flat list of layers: 3x3 same-padded convolutions, relu,
//! 2x2 max pooling, nearest-neighbor upsampling, and a single final sigmoid
//! over one output channel. Pool/upsample pairs nest like parentheses, and
//! upsampling restores the exact pre-pool dimensions, so output geometry
//! always equals input geometry.
//!
//! Parameters live in one flat f64 vector in layer order (per conv: weights
//! `[out][in][ky][kx]`, then biases). The on-disk format rounds to f32.

mod infer;
mod net;

pub use infer::{
    compound_predict, materialize_compound_view, predict_slide, InferOpts, ProbMap,
    COMPOUND_CHANNEL_LEVELS,
};
pub use net::{
    fd_gradient_max_rel_error, loss_and_grad, loss_only, tensor_from_patch, forward, ForwardTrace,
    Sgd, Tensor, P_CLAMP_LO, P_CLAMP_HI,
};

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Conv { in_ch: usize, out_ch: usize },
    Relu,
    MaxPool2,
    Upsample2,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcnConfig {
    pub input_channels: usize,
    pub layers: Vec<Layer>,
}

impl FcnConfig {
    /// 3-channel model: conv(3,8) relu conv(8,8) relu conv(8,1) sigmoid.
    pub fn base_reference() -> Self {
        FcnConfig {
            input_channels: 3,
            layers: vec![
                Layer::Conv { in_ch: 3, out_ch: 8 },
                Layer::Relu,
                Layer::Conv { in_ch: 8, out_ch: 8 },
                Layer::Relu,
                Layer::Conv { in_ch: 8, out_ch: 1 },
                Layer::Sigmoid,
            ],
        }
    }

    /// 4-channel head: the base layout with a maxpool2/upsample2 pair
    /// around the middle convolution.
    pub fn head_reference() -> Self {
        FcnConfig {
            input_channels: 4,
            layers: vec![
                Layer::Conv { in_ch: 4, out_ch: 8 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv { in_ch: 8, out_ch: 8 },
                Layer::Relu,
                Layer::Upsample2,
                Layer::Conv { in_ch: 8, out_ch: 1 },
                Layer::Sigmoid,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::InvalidConfig("input_channels must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("no layers".into()));
        }
        let mut ch = self.input_channels;
        let mut pool_depth = 0usize;
        let mut saw_conv = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(self.layers[..i].last(), Some(Layer::Sigmoid)) {
                return Err(Error::InvalidConfig("sigmoid must be the final layer".into()));
            }
            match *layer {
                Layer::Conv { in_ch, out_ch } => {
                    saw_conv = true;
                    if in_ch != ch {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: conv expects {in_ch} channels, stream has {ch}"
                        )));
                    }
                    if out_ch == 0 {
                        return Err(Error::InvalidConfig(format!("layer {i}: out_ch 0")));
                    }
                    ch = out_ch;
                }
                Layer::Relu => {}
                Layer::MaxPool2 => pool_depth += 1,
                Layer::Upsample2 => {
                    if pool_depth == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: upsample2 without a matching maxpool2"
                        )));
                    }
                    pool_depth -= 1;
                }
                Layer::Sigmoid => {
                    if ch != 1 {
                        return Err(Error::InvalidConfig(format!(
                            "sigmoid requires a single channel, stream has {ch}"
                        )));
                    }
                }
            }
        }
        if !saw_conv {
            return Err(Error::InvalidConfig("network needs at least one conv".into()));
        }
        if !matches!(self.layers.last(), Some(Layer::Sigmoid)) {
            return Err(Error::InvalidConfig("final layer must be sigmoid".into()));
        }
        if pool_depth != 0 {
            return Err(Error::InvalidConfig(
                "maxpool2/upsample2 counts do not balance".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                Layer::Conv { in_ch, out_ch } => out_ch * in_ch * 9 + out_ch,
                _ => 0,
            })
            .sum()
    }

    /// Number of input pixels (Chebyshev radius) one output pixel can see.
    /// Tracked as an affine interval through the layer list, so pooled
    /// stages widen it by their stride.
    pub fn receptive_radius(&self) -> usize {
        let mut stride = 1usize;
        let mut left = 0usize;
        let mut right = 0usize;
        for layer in &self.layers {
            match layer {
                Layer::Conv { .. } => {
                    left += stride;
                    right += stride;
                }
                Layer::MaxPool2 => {
                    right += stride;
                    stride *= 2;
                }
                Layer::Upsample2 => {
                    stride /= 2;
                    left += stride;
                }
                Layer::Relu | Layer::Sigmoid => {}
            }
        }
        left.max(right)
    }

    /// Tile origins must be multiples of this for pooled stages to see the
    /// same grid as a whole-image pass.
    pub fn pool_alignment(&self) -> usize {
        let mut stride = 1usize;
        let mut max = 1usize;
        for layer in &self.layers {
            match layer {
                Layer::MaxPool2 => {
                    stride *= 2;
                    max = max.max(stride);
                }
                Layer::Upsample2 => stride /= 2,
                _ => {}
            }
        }
        max
    }

    fn canonical(&self) -> String {
        let mut s = format!("in={};", self.input_channels);
        for l in &self.layers {
            match *l {
                Layer::Conv { in_ch, out_ch } => s.push_str(&format!("conv({in_ch},{out_ch});")),
                Layer::Relu => s.push_str("relu;"),
                Layer::MaxPool2 => s.push_str("maxpool2;"),
                Layer::Upsample2 => s.push_str("upsample2;"),
                Layer::Sigmoid => s.push_str("sigmoid;"),
            }
        }
        s
    }

    /// FNV-1a over the canonical layer description.
    pub fn config_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct Params {
    pub config: FcnConfig,
    pub values: Vec<f64>,
}

/// Xavier-uniform weights (bound sqrt(6 / (fan_in + fan_out)) with
/// fan = channels x 9 taps), zero biases. Values are generated at f32
/// precision so a save/load cycle is lossless.
pub fn init_params(config: &FcnConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(config.param_count());
    for layer in &config.layers {
        if let Layer::Conv { in_ch, out_ch } = *layer {
            let fan_in = in_ch * 9;
            let fan_out = out_ch * 9;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..out_ch * in_ch * 9 {
                let v: f64 = rng.random_range(-bound..bound);
                values.push(v as f32 as f64);
            }
            values.extend(std::iter::repeat_n(0.0, out_ch));
        }
    }
    Ok(Params {
        config: config.clone(),
        values,
    })
}

const PARAMS_MAGIC: &[u8; 8] = b"WOBPARAM";

pub fn save_params(params: &Params, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + params.values.len() * 4);
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&params.config.config_hash().to_le_bytes());
    buf.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a parameter file, checking the stored hash against `config`.
pub fn load_params(config: &FcnConfig, path: &Path) -> Result<Params> {
    config.validate()?;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() < 24 || &buf[..8] != PARAMS_MAGIC {
        return Err(Error::invalid(format!(
            "{} is not a parameter file",
            path.display()
        )));
    }
    let hash = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    if hash != config.config_hash() {
        return Err(Error::ParamsHashMismatch);
    }
    let count = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    if count != config.param_count() || buf.len() != 24 + count * 4 {
        return Err(Error::invalid(format!(
            "parameter file {} has wrong length",
            path.display()
        )));
    }
    let values = buf[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Params {
        config: config.clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use rand::Rng;

    #[test]
    fn reference_configs_validate_and_count() {
        let base = FcnConfig::base_reference();
        base.validate().unwrap();
        // 3*8*9+8 + 8*8*9+8 + 8*1*9+1
        assert_eq!(base.param_count(), 224 + 584 + 73);
        assert_eq!(base.param_count(), 881);
        let head = FcnConfig::head_reference();
        head.validate().unwrap();
        assert_eq!(head.param_count(), 4 * 8 * 9 + 8 + 584 + 73);
    }

    #[test]
    fn receptive_field_and_alignment() {
        assert_eq!(FcnConfig::base_reference().receptive_radius(), 3);
        assert_eq!(FcnConfig::base_reference().pool_alignment(), 1);
        assert_eq!(FcnConfig::head_reference().receptive_radius(), 5);
        assert_eq!(FcnConfig::head_reference().pool_alignment(), 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        // Channel chain mismatch.
        let bad = FcnConfig {
            input_channels: 3,
            layers: vec![
                Layer::Conv { in_ch: 4, out_ch: 8 },
                Layer::Sigmoid,
            ],
        };
        assert!(bad.validate().is_err());
        // Unbalanced pool.
        let bad = FcnConfig {
            input_channels: 3,
            layers: vec![
                Layer::Conv { in_ch: 3, out_ch: 1 },
                Layer::MaxPool2,
                Layer::Sigmoid,
            ],
        };
        assert!(bad.validate().is_err());
        // Upsample before any pool.
        let bad = FcnConfig {
            input_channels: 3,
            layers: vec![
                Layer::Upsample2,
                Layer::Conv { in_ch: 3, out_ch: 1 },
                Layer::Sigmoid,
            ],
        };
        assert!(bad.validate().is_err());
        // Missing sigmoid.
        let bad = FcnConfig {
            input_channels: 3,
            layers: vec![Layer::Conv { in_ch: 3, out_ch: 1 }],
        };
        assert!(bad.validate().is_err());
        // Sigmoid over multiple channels.
        let bad = FcnConfig {
            input_channels: 3,
            layers: vec![Layer::Conv { in_ch: 3, out_ch: 2 }, Layer::Sigmoid],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = FcnConfig::base_reference();
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        assert_eq!(a.values, b.values);
        let c = init_params(&cfg, 10).unwrap();
        assert_ne!(a.values, c.values);
        // Biases sit at the tail of each conv block and start at zero.
        assert_eq!(&a.values[216..224], &[0.0; 8]);
        assert_eq!(&a.values[224 + 576..224 + 584], &[0.0; 8]);
        assert_eq!(a.values[880], 0.0);
        // Weight bound for the first conv: sqrt(6 / (27 + 72)).
        let bound = (6.0f64 / 99.0).sqrt();
        assert!(a.values[..216].iter().all(|v| v.abs() < bound));
        assert!(a.values[..216].iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn params_round_trip_and_hash_check() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = FcnConfig::base_reference();
        let mut p = init_params(&cfg, 3).unwrap();
        // Trained values are not f32-exact; the file format rounds them.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for v in &mut p.values {
            *v += rng.random::<f64>() * 1e-3;
        }
        let path = tmp.path().join("m.params");
        save_params(&p, &path).unwrap();
        let q = load_params(&cfg, &path).unwrap();
        for (a, b) in p.values.iter().zip(&q.values) {
            assert_eq!(*a as f32, *b as f32);
        }
        // Re-saving the loaded params reproduces identical bytes.
        let path2 = tmp.path().join("m2.params");
        save_params(&q, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        // Mismatched config is refused.
        match load_params(&FcnConfig::head_reference(), &path) {
            Err(Error::ParamsHashMismatch) => {}
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn zero_params_predict_half_and_ln2_loss() {
        let cfg = FcnConfig::base_reference();
        let params = Params {
            config: cfg.clone(),
            values: vec![0.0; cfg.param_count()],
        };
        let patch = Raster::from_bytes(6, 5, 3, (0..90).map(|i| i as u8).collect::<Vec<_>>())
            .unwrap();
        let input = tensor_from_patch(&patch).unwrap();
        let out = forward(&params, &input, false).unwrap().output;
        assert!(out.data.iter().all(|&p| p == 0.5));
        let mask = Raster::from_bytes(6, 5, 1, vec![1; 30]).unwrap();
        let (loss, _) = loss_and_grad(&params, &[(&patch, &mask)]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
