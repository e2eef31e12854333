//! Stage adapters, token-to-volume restoration, fusion blocks and flow heads.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{Adapter, Conv, ConvBlock};
use crate::leb::Tokens;
use crate::params::{Ctx, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::Dims;

/// Stages in decoding order, coarse to fine.
pub const STAGES: [usize; 4] = [4, 3, 2, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub c4: usize,
    pub fused_channels: usize,
    /// Intermediate width of the stage adapters; `None` means the LEB width.
    pub adapter_hidden: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            c4: 256,
            fused_channels: 32,
            adapter_hidden: None,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c4 == 0 || self.c4 % 64 != 0 {
            return Err(Error::Invalid(format!(
                "c4 must be a positive multiple of 64 so every stage detokenizes exactly, got {}",
                self.c4
            )));
        }
        if self.fused_channels == 0 || self.adapter_hidden == Some(0) {
            return Err(Error::Invalid("decoder widths must be positive".into()));
        }
        Ok(())
    }

    /// `C_j = 4^{4-j}·C₄`.
    pub fn channels(&self, stage: usize) -> usize {
        self.c4 << (2 * (4 - stage))
    }

    /// Channels per voxel after detokenizing stage `j`.
    pub fn detok_channels(&self, stage: usize) -> usize {
        self.channels(stage) / shuffle_factor(stage).pow(3)
    }
}

/// `2^{5-j}`: stage `j` sits at `2^{5-j}` times the level-5 grid.
pub fn shuffle_factor(stage: usize) -> usize {
    1 << (5 - stage)
}

fn detok_index(l_grid: Dims, c: usize, s: usize) -> (Vec<usize>, [usize; 4]) {
    let [d, h, w] = l_grid;
    let co = c / (s * s * s);
    let (od, oh, ow) = (d * s, h * s, w * s);
    let mut idx = Vec::with_capacity(c * d * h * w);
    for ch in 0..co {
        for zz in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let t = ((zz / s) * h + yy / s) * w + xx / s;
                    let sub = ((zz % s) * s + yy % s) * s + xx % s;
                    idx.push(t * c + ch * s * s * s + sub);
                }
            }
        }
    }
    (idx, [co, od, oh, ow])
}

fn check_detok(l: usize, c: usize, grid: Dims, s: usize) -> Result<()> {
    if s == 0 || c % (s * s * s) != 0 {
        return Err(Error::Shape(format!("{c} channels are not divisible by {s}³")));
    }
    if l != grid.iter().product::<usize>() {
        return Err(Error::Shape(format!("{l} tokens do not fill grid {grid:?}")));
    }
    Ok(())
}

/// 3-D pixel shuffle: tokens `(L, C)` over `grid` become channel-first
/// features `(C/s³, s·d, s·h, s·w)`. Token channel `c·s³ + (iz·s + iy)·s + ix`
/// lands at sub-voxel `(iz, iy, ix)` of output channel `c`.
pub fn detokenize<T: Scalar>(ctx: &mut Ctx<'_, T>, t: Tokens, s: usize) -> Result<Var> {
    let sh = ctx.g.shape(t.var).to_vec();
    check_detok(sh[0], sh[1], t.grid, s)?;
    let (idx, shape) = detok_index(t.grid, sh[1], s);
    Ok(ctx.g.gather(t.var, Arc::new(idx), &shape))
}

pub fn detokenize_tensor<T: Scalar>(tokens: &Tensor<T>, grid: Dims, s: usize) -> Result<Tensor<T>> {
    let sh = tokens.shape();
    check_detok(sh[0], sh[1], grid, s)?;
    let (idx, shape) = detok_index(grid, sh[1], s);
    let d = tokens.data();
    Tensor::from_vec(&shape, idx.into_iter().map(|i| d[i]).collect())
}

/// Inverse of [`detokenize_tensor`].
pub fn retokenize_tensor<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 || sh[1..].iter().any(|&n| n % s != 0) {
        return Err(Error::Shape(format!("{sh:?} is not a multiple of {s}")));
    }
    let grid = [sh[1] / s, sh[2] / s, sh[3] / s];
    let c = sh[0] * s * s * s;
    let l: usize = grid.iter().product();
    let (idx, _) = detok_index(grid, c, s);
    let mut out = vec![T::zero(); l * c];
    for (&i, &v) in idx.iter().zip(x.data()) {
        out[i] = v;
    }
    Tensor::from_vec(&[l, c], out)
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: StageConfig,
    /// Adapter₄…Adapter₁; absent when the LEBs are ablated.
    pub stage_adapters: Option<Vec<Adapter>>,
    pub fuse4: ConvBlock,
    /// Fusion blocks for stages 3, 2, 1.
    pub fuse: Vec<ConvBlock>,
    /// Flow heads for stages 3, 2, 1.
    pub heads: Vec<Conv>,
}

impl Decoder {
    /// `enc` are the encoder widths; `llm_hidden` is `None` without LEBs.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &StageConfig, enc: &[usize; 5], llm_hidden: Option<usize>, slope: f64, seed: u64) -> Self {
        let f = cfg.fused_channels;
        let stage_adapters = llm_hidden.map(|hid| {
            let mid = cfg.adapter_hidden.unwrap_or(hid);
            STAGES
                .iter()
                .map(|&j| Adapter::new(store, &format!("stage{j}.adapter"), ParamGroup::StageAdapters, hid, mid, cfg.channels(j), slope, seed))
                .collect()
        });
        let detok = |j: usize| if llm_hidden.is_some() { cfg.detok_channels(j) } else { 0 };
        let fuse4 = ConvBlock::new(store, "stage4.fuse", ParamGroup::Fuse, detok(4) + 2 * enc[3], f, 1, slope, seed);
        let mut fuse = Vec::new();
        let mut heads = Vec::new();
        for j in [3usize, 2, 1] {
            let field = if j == 3 { 0 } else { 3 };
            let cin = f + detok(j) + 2 * enc[j - 1] + field;
            fuse.push(ConvBlock::new(store, &format!("stage{j}.fuse"), ParamGroup::Fuse, cin, f, 1, slope, seed));
            heads.push(Conv::zeroed(store, &format!("stage{j}.flow"), ParamGroup::FlowHeads, f, 3));
        }
        Decoder {
            cfg: cfg.clone(),
            stage_adapters,
            fuse4,
            fuse,
            heads,
        }
    }

    /// Detokenized features `F₄…F₁` from the last LEB's output.
    pub fn stage_features<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, t: Tokens) -> Result<Vec<Var>> {
        let adapters = self.stage_adapters.as_ref().ok_or_else(|| Error::Invalid("decoder has no stage adapters".into()))?;
        STAGES
            .iter()
            .zip(adapters)
            .map(|(&j, a)| {
                let h = a.forward(ctx, t.var);
                detokenize(ctx, Tokens { var: h, grid: t.grid }, shuffle_factor(j))
            })
            .collect()
    }

    /// `F'₄` from `[F₄], F⁴_m, F⁴_f`.
    pub fn fuse_s4<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f4: Option<Var>, fm4: Var, ff4: Var) -> Result<Var> {
        let parts: Vec<Var> = f4.into_iter().chain([fm4, ff4]).collect();
        let x = concat_checked(ctx, &parts)?;
        Ok(self.fuse4.forward(ctx, x))
    }

    /// `F'_j` for `j ∈ {3, 2, 1}` from the upsampled previous fused features,
    /// `[F_j]`, warped moving and fixed features, and the incoming field.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse_stage<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, stage: usize, up_prev: Var, fj: Option<Var>, fm: Var, ff: Var, phi: Option<Var>) -> Result<Var> {
        if !(1..=3).contains(&stage) {
            return Err(Error::Invalid(format!("fusion stage must be 1, 2 or 3, got {stage}")));
        }
        let block = &self.fuse[3 - stage];
        let parts: Vec<Var> = [up_prev].into_iter().chain(fj).chain([fm, ff]).chain(phi).collect();
        let x = concat_checked(ctx, &parts)?;
        if ctx.g.shape(x)[0] != block.conv_in() {
            return Err(Error::Shape(format!("stage {stage} fusion expects {} channels, got {}", block.conv_in(), ctx.g.shape(x)[0])));
        }
        Ok(block.forward(ctx, x))
    }

    pub fn flow_head<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, stage: usize, fused: Var) -> Var {
        self.heads[3 - stage].forward(ctx, fused)
    }
}

fn concat_checked<T: Scalar>(ctx: &mut Ctx<'_, T>, parts: &[Var]) -> Result<Var> {
    let base = ctx.g.shape(parts[0])[1..].to_vec();
    for p in parts {
        let s = ctx.g.shape(*p);
        if s.len() != 4 || s[1..] != base[..] {
            return Err(Error::Shape(format!("fusion inputs disagree: {s:?} vs spatial {base:?}")));
        }
    }
    Ok(ctx.g.concat(parts, 0))
}
