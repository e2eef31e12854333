//! Optimization loop, finite-difference gradient checks and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveWriter, TensorArchive, TensorDtype};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, DEFAULT_LAMBDA};
use crate::metrics::{dice, evaluate, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::params::{init_normal, param_rng, Ctx, ParamGroup, ParamId};
use crate::scalar::Scalar;
use crate::synthdata::SynthPair;
use crate::tensor::Tensor;
use crate::volume::{downsample_half, DisplacementField, LabelMap, Volume};
use crate::warp::{upsample_field_x2, warp_labels_nearest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Run the network on 2× downsampled inputs and upsample the field.
    pub half_resolution: bool,
    pub lora_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 1,
            epochs: 1,
            lambda: DEFAULT_LAMBDA,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            half_resolution: false,
            lora_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Label channels used by the loss: background plus every foreground label
/// present in either map.
pub fn loss_labels(a: &LabelMap, b: &LabelMap) -> Vec<u32> {
    let mut l = vec![0];
    l.extend(a.foreground_labels());
    l.extend(b.foreground_labels());
    l.sort_unstable();
    l.dedup();
    l
}

/// A pair converted to the model's precision with one-hot label stacks.
pub struct PreparedPair<T: Scalar> {
    pub moving: Volume<T>,
    pub fixed: Volume<T>,
    pub moving_onehot: Tensor<T>,
    pub fixed_onehot: Tensor<T>,
}

impl<T: Scalar> PreparedPair<T> {
    pub fn new(p: &SynthPair, half_resolution: bool) -> Result<Self> {
        let labels = loss_labels(&p.moving_labels, &p.fixed_labels);
        let (mut moving, mut fixed) = (p.moving.cast::<T>(), p.fixed.cast::<T>());
        if half_resolution {
            moving = downsample_half(&moving)?;
            fixed = downsample_half(&fixed)?;
        }
        Ok(PreparedPair {
            moving,
            fixed,
            moving_onehot: p.moving_labels.one_hot(&labels),
            fixed_onehot: p.fixed_labels.one_hot(&labels),
        })
    }
}

/// Builds the loss graph for one pair; returns the loss node.
pub fn loss_graph<T: Scalar>(model: &Model<T>, ctx: &mut Ctx<'_, T>, pair: &PreparedPair<T>, lambda: f64, half_resolution: bool) -> Result<(Var, LossBreakdown)> {
    let m = ctx.g.constant(pair.moving.as_channels());
    let f = ctx.g.constant(pair.fixed.as_channels());
    let out = model.forward(ctx, m, f)?;
    let phi = if half_resolution { ctx.g.upsample_field_x2(out.phi) } else { out.phi };
    let labels = ctx.g.constant(pair.moving_onehot.clone());
    let target = ctx.g.constant(pair.fixed_onehot.clone());
    if ctx.g.shape(phi)[1..] != pair.fixed_onehot.shape()[1..] {
        return Err(Error::Shape(format!(
            "field {:?} does not cover labels {:?}",
            ctx.g.shape(phi),
            pair.fixed_onehot.shape()
        )));
    }
    let warped = ctx.g.warp(labels, phi);
    ctx.g.total_loss(warped, target, phi, lambda)
}

/// Loss and gradients for the parameters in `ids`.
pub fn loss_and_grads<T: Scalar>(model: &Model<T>, pair: &PreparedPair<T>, lambda: f64, half_resolution: bool, ids: &[ParamId]) -> Result<(LossBreakdown, Vec<Option<Tensor<T>>>)> {
    let mut ctx = Ctx::new(&model.store, true);
    let (loss, parts) = loss_graph(model, &mut ctx, pair, lambda, half_resolution)?;
    let vars: Vec<Option<Var>> = ids.iter().map(|&id| ctx.bound(id)).collect();
    let mut grads = ctx.g.backward(loss);
    Ok((parts, vars.into_iter().map(|v| v.and_then(|v| grads.take(v))).collect()))
}

pub fn loss_only<T: Scalar>(model: &Model<T>, pair: &PreparedPair<T>, lambda: f64, half_resolution: bool) -> Result<LossBreakdown> {
    let mut ctx = Ctx::new(&model.store, false);
    Ok(loss_graph(model, &mut ctx, pair, lambda, half_resolution)?.1)
}

/// Adam with bias correction over a fixed parameter list.
pub struct Adam<T> {
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &Model<T>, ids: Vec<ParamId>, cfg: &TrainConfig) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(model.store.value(*id).shape());
        Adam {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            t: 0,
            lr: cfg.lr,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Option<Tensor<T>>]) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.b1), T::lit(self.b2));
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        let step = T::lit(self.lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        for (k, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = model.store.value_mut(self.ids[k]);
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean total loss per epoch.
    pub history: Vec<f64>,
    /// Every step's loss breakdown (batch mean).
    pub steps: Vec<LossBreakdown>,
    pub seconds: f64,
}

/// Parameter ids the optimizer updates.
pub fn optimizer_ids<T: Scalar>(model: &Model<T>, lora_enabled: bool) -> Vec<ParamId> {
    let groups = model.trainable_groups(lora_enabled);
    model.store.iter().filter(|(_, p)| groups.contains(&p.group)).map(|(id, _)| id).collect()
}

/// Trains on `pairs`; `on_step` sees (epoch, step, breakdown) after each update.
pub fn train<T: Scalar>(model: &mut Model<T>, pairs: &[SynthPair], cfg: &TrainConfig, mut on_step: impl FnMut(usize, usize, &LossBreakdown)) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let start = std::time::Instant::now();
    let prepared: Vec<PreparedPair<T>> = pairs.iter().map(|p| PreparedPair::new(p, cfg.half_resolution)).collect::<Result<_>>()?;
    let ids = optimizer_ids(model, cfg.lora_enabled);
    let mut adam = Adam::new(model, ids.clone(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<Tensor<T>>> = vec![None; ids.len()];
            let mut parts = LossBreakdown { sim: 0.0, reg: 0.0, total: 0.0, lambda: cfg.lambda };
            let inv = T::lit(1.0 / batch.len() as f64);
            for &i in batch {
                let (b, grads) = loss_and_grads(model, &prepared[i], cfg.lambda, cfg.half_resolution, &ids)?;
                if !b.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, step {step} (sim {}, reg {})",
                        b.sim, b.reg
                    )));
                }
                parts.sim += b.sim / batch.len() as f64;
                parts.reg += b.reg / batch.len() as f64;
                parts.total += b.total / batch.len() as f64;
                for (a, g) in acc.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    let g = g.scale(inv);
                    match a {
                        Some(a) => a.add_assign(&g),
                        None => *a = Some(g),
                    }
                }
            }
            if let Some((k, _)) = acc.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite())) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {} at epoch {epoch}, step {step}",
                    model.store.get(ids[k]).name
                )));
            }
            adam.step(model, &acc);
            epoch_sum += parts.total * batch.len() as f64;
            on_step(epoch, step, &parts);
            report.steps.push(parts);
            step += 1;
        }
        report.history.push(epoch_sum / prepared.len() as f64);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Full-resolution field for a pair, honouring half-resolution models.
pub fn predict_field<T: Scalar>(model: &Model<T>, moving: &Volume<f32>, fixed: &Volume<f32>, half_resolution: bool) -> Result<DisplacementField<T>> {
    let (mut m, mut f) = (moving.cast::<T>(), fixed.cast::<T>());
    if half_resolution {
        m = downsample_half(&m)?;
        f = downsample_half(&f)?;
    }
    let phi = model.predict(&m, &f)?;
    let phi = if half_resolution { upsample_field_x2(&phi) } else { phi };
    DisplacementField::new(phi.into_tensor(), fixed.spacing())
}

/// Metrics of the moving labels warped onto the fixed grid.
pub fn evaluate_pair<T: Scalar>(model: &Model<T>, pair: &SynthPair, half_resolution: bool) -> Result<MetricReport> {
    let phi = predict_field(model, &pair.moving, &pair.fixed, half_resolution)?;
    let warped = warp_labels_nearest(&pair.moving_labels, &phi)?;
    evaluate(&warped, &pair.fixed_labels, Some(&phi), None)
}

/// Mean foreground Dice of the unregistered pair.
pub fn initial_dice(pair: &SynthPair) -> Result<f64> {
    let labels = pair.fixed_labels.foreground_labels();
    let d = dice(&pair.moving_labels, &pair.fixed_labels, &labels)?;
    Ok(d.values().sum::<f64>() / d.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// gradient check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub samples: Vec<GradSample>,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub n_params: usize,
    pub step: f64,
    pub seed: u64,
    pub lambda: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Scales analytic gradients by 1.1; a negative control for the harness.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            n_params: 24,
            step: 1e-5,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            floor: 1e-8,
            inject_fault: false,
        }
    }
}

/// Replaces all-zero trainable tensors (flow heads, LoRA `B`, biases) by small
/// random values so the check runs away from the identity start.
pub fn randomize_zero_params<T: Scalar>(model: &mut Model<T>, seed: u64, std: f64) {
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable() && p.value.data().iter().all(|&v| v == T::zero()))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        let shape = model.store.value(id).shape().to_vec();
        let t = init_normal(&mut param_rng(seed, &format!("perturb.{name}")), &shape, std);
        model.store.set(id, t).unwrap();
    }
}

/// Compares analytic gradients of the total loss with central differences
/// at randomly sampled scalars, at least one per trainable group.
pub fn grad_check(model: &Model<f64>, pair: &SynthPair, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let prepared = PreparedPair::<f64>::new(pair, false)?;
    let groups = model.trainable_groups(true);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let per_group = (opts.n_params / groups.len().max(1)).max(1);
    let mut picks: Vec<(ParamGroup, ParamId, usize)> = Vec::new();
    for &g in &groups {
        let members: Vec<(ParamId, usize)> = model.store.iter().filter(|(_, p)| p.group == g).map(|(id, p)| (id, p.value.len())).collect();
        let total: usize = members.iter().map(|m| m.1).sum();
        for _ in 0..per_group {
            let mut k = rng.gen_range(0..total);
            for &(id, n) in &members {
                if k < n {
                    picks.push((g, id, k));
                    break;
                }
                k -= n;
            }
        }
    }
    let mut ids: Vec<ParamId> = picks.iter().map(|p| p.1).collect();
    ids.sort_unstable();
    ids.dedup();
    let (_, grads) = loss_and_grads(model, &prepared, opts.lambda, false, &ids)?;
    let grads: BTreeMap<ParamId, Tensor<f64>> = ids.into_iter().zip(grads).filter_map(|(id, g)| Some((id, g?))).collect();

    let mut by_group: BTreeMap<ParamGroup, Vec<GradSample>> = BTreeMap::new();
    let mut probe = model.clone();
    for (g, id, idx) in picks {
        let mut analytic = grads.get(&id).map_or(0.0, |t| t.data()[idx]);
        if opts.inject_fault {
            analytic *= 1.1;
        }
        let orig = probe.store.value(id).data()[idx];
        let mut eval = |x: f64| -> Result<f64> {
            probe.store.value_mut(id).data_mut()[idx] = x;
            Ok(loss_only(&probe, &prepared, opts.lambda, false)?.total)
        };
        let numeric = (eval(orig + opts.step)? - eval(orig - opts.step)?) / (2.0 * opts.step);
        eval(orig)?;
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        by_group.entry(g).or_default().push(GradSample {
            param: model.store.get(id).name.clone(),
            index: idx,
            analytic,
            numeric,
            rel_err,
        });
    }
    let groups: Vec<GroupCheck> = by_group
        .into_iter()
        .map(|(group, samples)| GroupCheck {
            group,
            max_rel_err: samples.iter().map(|s| s.rel_err).fold(0.0, f64::max),
            samples,
        })
        .collect();
    Ok(GradCheckReport {
        max_rel_err: groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max),
        groups,
        step: opts.step,
    })
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_CONFIG: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub history: Vec<f64>,
    /// Precision the tensors were saved in.
    pub dtype: String,
}

/// Writes trainable tensors and `config.json`; frozen layers are referenced
/// through `model.frozen` only.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, train: &TrainConfig, epoch: usize, history: &[f64], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let dtype = if T::DTYPE == "f64" { TensorDtype::F64 } else { TensorDtype::F32 };
    let mut w = ArchiveWriter::create(dir)?;
    for (_, p) in model.store.iter().filter(|(_, p)| p.trainable()) {
        w.add(&p.name, &p.value, dtype)?;
    }
    w.finish()?;
    let meta = CheckpointMeta {
        model: model.cfg.clone(),
        train: train.clone(),
        epoch,
        history: history.to_vec(),
        dtype: T::DTYPE.to_string(),
    };
    let path = dir.join(CHECKPOINT_CONFIG);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("checkpoint config", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_checkpoint_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = dir.as_ref().join(CHECKPOINT_CONFIG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Overwrites every trainable tensor of `model` from a checkpoint archive.
pub fn restore_params<T: Scalar>(model: &mut Model<T>, dir: impl AsRef<Path>) -> Result<()> {
    let archive = TensorArchive::open(dir)?;
    let ids: Vec<ParamId> = model.store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
    for &id in &ids {
        let p = model.store.get(id);
        let t = archive.load_shaped(&p.name, p.value.shape())?;
        model.store.set(id, t)?;
    }
    if let Some(extra) = archive.names().find(|n| model.store.id(n).is_none_or(|id| !model.store.get(id).trainable())) {
        return Err(Error::Invalid(format!("checkpoint tensor `{extra}` has no place in this model")));
    }
    Ok(())
}

/// Rebuilds the model from `config.json` (reloading frozen layers from
/// their source) and restores the trained tensors.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Model<T>, CheckpointMeta)> {
    let meta = read_checkpoint_meta(&dir)?;
    let mut model = Model::build(&meta.model)?;
    restore_params(&mut model, &dir)?;
    Ok((model, meta))
}
