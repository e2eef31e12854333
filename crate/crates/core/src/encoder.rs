//! Five-level convolutional pyramid applied to the moving and fixed images.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::ConvBlock;
use crate::params::{Ctx, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{Dims, Volume};

pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub enc_channels: [usize; LEVELS],
    pub leaky_slope: f64,
    pub shared_weights: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            enc_channels: [8, 16, 32, 64, 128],
            leaky_slope: 0.2,
            shared_weights: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.iter().any(|&c| c == 0) {
            return Err(Error::Invalid("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Input grids must halve cleanly four times.
pub fn check_divisible(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(Error::Shape(format!("input dimensions must be divisible by 16, got {dims:?}")));
    }
    Ok(())
}

/// Spatial extent of pyramid level `level` (1-based) for an input grid.
pub fn level_dims(input: Dims, level: usize) -> Dims {
    input.map(|d| d >> (level - 1))
}

/// Feature grids `F¹…F⁵` of one image, level 1 at input resolution.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    /// One stack per stream; a single stack when weights are shared.
    streams: Vec<Vec<[ConvBlock; 2]>>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, seed: u64) -> Self {
        let n_streams = if cfg.shared_weights { 1 } else { 2 };
        let slope = cfg.leaky_slope;
        let streams = (0..n_streams)
            .map(|s| {
                (0..LEVELS)
                    .map(|lvl| {
                        let cin = if lvl == 0 { 1 } else { cfg.enc_channels[lvl - 1] };
                        let cout = cfg.enc_channels[lvl];
                        let stride = if lvl == 0 { 1 } else { 2 };
                        let name = |j: usize| format!("encoder.s{s}.l{}.conv{j}", lvl + 1);
                        [
                            ConvBlock::new(store, &name(1), ParamGroup::Encoder, cin, cout, stride, slope, seed),
                            ConvBlock::new(store, &name(2), ParamGroup::Encoder, cout, cout, 1, slope, seed),
                        ]
                    })
                    .collect()
            })
            .collect();
        Encoder { cfg: cfg.clone(), streams }
    }

    fn stream<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, input: Var, which: usize) -> FeaturePyramid {
        let stack = &self.streams[which.min(self.streams.len() - 1)];
        let mut x = input;
        let mut levels = Vec::with_capacity(LEVELS);
        for [a, b] in stack {
            x = a.forward(ctx, x);
            x = b.forward(ctx, x);
            levels.push(x);
        }
        FeaturePyramid { levels }
    }

    /// Encodes `(1, D, H, W)` moving and fixed inputs.
    pub fn encode_pair<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, moving: Var, fixed: Var) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let (ms, fs) = (ctx.g.shape(moving).to_vec(), ctx.g.shape(fixed).to_vec());
        if ms != fs || ms.len() != 4 || ms[0] != 1 {
            return Err(Error::Shape(format!("encoder inputs must share a (1, D, H, W) shape: {ms:?} vs {fs:?}")));
        }
        check_divisible([ms[1], ms[2], ms[3]])?;
        Ok((self.stream(ctx, moving, 0), self.stream(ctx, fixed, 1)))
    }

    /// Value-level convenience: both pyramids as tensors.
    pub fn encode_volumes<T: Scalar>(&self, store: &ParamStore<T>, moving: &Volume<T>, fixed: &Volume<T>) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let mut ctx = Ctx::new(store, false);
        let m = ctx.g.constant(moving.as_channels());
        let f = ctx.g.constant(fixed.as_channels());
        let (pm, pf) = self.encode_pair(&mut ctx, m, f)?;
        let take = |p: &FeaturePyramid| p.levels.iter().map(|v| ctx.g.value(*v).clone()).collect::<Vec<_>>();
        Ok((take(&pm), take(&pf)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            enc_channels: [2, 2, 3, 3, 4],
            ..Default::default()
        }
    }

    fn vol(dims: Dims, phase: f64) -> Volume<f64> {
        Volume::from_fn(dims, [1.0; 3], |z, y, x| ((z * 7 + y * 3 + x) as f64 * 0.1 + phase).sin()).unwrap()
    }

    #[test]
    fn pyramid_levels_halve() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &tiny(), 1);
        let (pm, _) = enc.encode_volumes(&store, &vol([32, 16, 48], 0.0), &vol([32, 16, 48], 1.0)).unwrap();
        for (i, t) in pm.iter().enumerate() {
            let want = level_dims([32, 16, 48], i + 1);
            assert_eq!(&t.shape()[1..], &want);
            assert_eq!(t.shape()[0], tiny().enc_channels[i]);
            assert!(t.all_finite());
        }
    }

    #[test]
    fn default_grids_at_level_five() {
        assert_eq!(level_dims([96, 80, 96], 5), [6, 5, 6]);
        assert_eq!(level_dims([192, 208, 176], 5), [12, 13, 11]);
        assert!(check_divisible([96, 80, 96]).is_ok());
        assert!(check_divisible([96, 80, 90]).is_err());
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &tiny(), 3);
        let z = Volume::from_fn([16, 16, 16], [1.0; 3], |_, _, _| 0.0).unwrap();
        let (pm, pf) = enc.encode_volumes(&store, &z, &z).unwrap();
        assert!(pm.iter().chain(&pf).all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn swapping_inputs_swaps_pyramids() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &tiny(), 5);
        let (a, b) = (vol([16, 16, 32], 0.3), vol([16, 16, 32], 2.0));
        let (pa, pb) = enc.encode_volumes(&store, &a, &b).unwrap();
        let (qa, qb) = enc.encode_volumes(&store, &b, &a).unwrap();
        assert_eq!(pa, qb);
        assert_eq!(pb, qa);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &tiny(), 5);
        let v = vol([16, 16, 24], 0.0);
        assert!(enc.encode_volumes(&store, &v, &v).is_err());
    }
}
