//! Full registration network: dual encoder, LEBs, stage adapters and the
//! coarse-to-fine decoder.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::autograd::Var;
use crate::decoder::{Decoder, StageConfig};
use crate::encoder::{check_divisible, level_dims, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::Adapter;
use crate::leb::{load_llm_layer, random_layer_weights, LayerSpec, Leb, LebBlock, LebConfig, LebCore, LlmLayer, LlmLayerWeights, NameMap, VitLayer};
use crate::params::{Ctx, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{DisplacementField, Dims, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No LEBs and no stage adapters; encoder features feed fusion directly.
    NoLeb,
    /// A trainable standard transformer replaces each frozen layer.
    VitReplace,
    OneLeb,
    /// LoRA pairs are not created.
    NoLora,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLeb => "no_leb",
            Variant::VitReplace => "vit_replace",
            Variant::OneLeb => "one_leb",
            Variant::NoLora => "no_lora",
        }
    }
}

/// Where the pretrained layer weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrozenSource {
    /// LLaMA-shaped random layers of width `llm_hidden`.
    Random { seed: u64, head_dim: usize, kv_groups: usize },
    Archive { path: PathBuf, profile: String },
}

impl Default for FrozenSource {
    fn default() -> Self {
        FrozenSource::Random {
            seed: 0,
            head_dim: 128,
            kv_groups: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Grid seen by the network (after any half-resolution downsampling).
    pub input_dims: Dims,
    pub encoder: EncoderConfig,
    pub leb: LebConfig,
    pub stage: StageConfig,
    pub variant: Variant,
    /// Pretrained layer indices, one per LEB.
    pub layers: Vec<usize>,
    pub frozen: FrozenSource,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dims: [96, 80, 96],
            encoder: EncoderConfig::default(),
            leb: LebConfig::default(),
            stage: StageConfig::default(),
            variant: Variant::Full,
            layers: vec![15, 16],
            frozen: FrozenSource::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and CPU experiments.
    pub fn tiny(input_dims: Dims) -> Self {
        ModelConfig {
            input_dims,
            encoder: EncoderConfig {
                enc_channels: [4, 8, 8, 8, 8],
                ..Default::default()
            },
            leb: LebConfig {
                llm_hidden: 32,
                lora_rank: 4,
                ..Default::default()
            },
            stage: StageConfig {
                c4: 64,
                fused_channels: 8,
                adapter_hidden: None,
            },
            layers: vec![0, 1],
            frozen: FrozenSource::Random {
                seed: 0,
                head_dim: 8,
                kv_groups: 2,
            },
            ..Default::default()
        }
    }

    pub fn num_lebs(&self) -> usize {
        match self.variant {
            Variant::NoLeb => 0,
            Variant::OneLeb => 1,
            _ => self.leb.num_lebs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_divisible(self.input_dims)?;
        self.encoder.validate()?;
        self.leb.validate()?;
        self.stage.validate()?;
        if self.layers.len() < self.num_lebs() {
            return Err(Error::Invalid(format!(
                "{} LEBs need {} layer indices, got {:?}",
                self.num_lebs(),
                self.num_lebs(),
                self.layers
            )));
        }
        Ok(())
    }

    pub fn token_grid(&self) -> Dims {
        level_dims(self.input_dims, 5)
    }
}

/// Field outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct RegistrationOutput {
    /// Full-resolution displacement `(3, D, H, W)`.
    pub phi: Var,
    /// Raw flow-head outputs φ₃, φ₂, φ₁.
    pub stage_fields: Vec<Var>,
    /// Composed fields at stages 3, 2, 1 (the last is `phi`).
    pub composed: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    /// Resolved configuration; `leb.llm_hidden` follows the loaded weights.
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub leb: Option<Leb>,
    pub decoder: Decoder,
}

fn frozen_weights<T: Scalar>(cfg: &ModelConfig, count: usize) -> Result<Vec<LlmLayerWeights<T>>> {
    let layers = &cfg.layers[..count];
    match &cfg.frozen {
        FrozenSource::Random { seed, head_dim, kv_groups } => {
            let hidden = cfg.leb.llm_hidden;
            if *head_dim == 0 || hidden % head_dim != 0 || (hidden / head_dim) % kv_groups.max(&1) != 0 {
                return Err(Error::Invalid(format!(
                    "random layers: hidden {hidden} is incompatible with head_dim {head_dim} and kv_groups {kv_groups}"
                )));
            }
            let spec = LayerSpec {
                hidden,
                heads: hidden / head_dim,
                kv_heads: hidden / head_dim / kv_groups,
                head_dim: *head_dim,
                intermediate: hidden * 2,
                rope_theta: 10000.0,
                rms_eps: 1e-5,
                qkv_bias: false,
            };
            spec.validate()?;
            Ok(layers.iter().map(|&i| random_layer_weights(&spec, *seed, i)).collect())
        }
        FrozenSource::Archive { path, profile } => {
            let archive = TensorArchive::open(path)?;
            let map = NameMap::resolve(profile)?;
            let available = map.layer_count(&archive);
            layers
                .iter()
                .map(|&i| {
                    if i >= available {
                        return Err(Error::Invalid(format!(
                            "layer {i} requested but {} holds {available} layers",
                            path.display()
                        )));
                    }
                    load_llm_layer(&archive, i, &map)
                })
                .collect()
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        let seed = cfg.seed;
        let slope = cfg.encoder.leaky_slope;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg.encoder, seed);

        let n_lebs = cfg.num_lebs();
        let weights = match cfg.variant {
            Variant::NoLeb | Variant::VitReplace => Vec::new(),
            _ => frozen_weights::<T>(&cfg, n_lebs)?,
        };
        if let Some(w) = weights.first() {
            if weights.iter().any(|x| x.spec.hidden != w.spec.hidden) {
                return Err(Error::Invalid("selected layers disagree on hidden size".into()));
            }
            if w.spec.hidden != cfg.leb.llm_hidden {
                log::info!("LEB width follows the loaded layers: {} -> {}", cfg.leb.llm_hidden, w.spec.hidden);
                cfg.leb.llm_hidden = w.spec.hidden;
            }
        }
        let hidden = cfg.leb.llm_hidden;
        let tokens: usize = cfg.token_grid().iter().product();

        let leb = (n_lebs > 0).then(|| -> Result<Leb> {
            let mut weights = weights.into_iter();
            let mut blocks = Vec::new();
            for b in 0..n_lebs {
                let din = if b == 0 { 2 * cfg.encoder.enc_channels[4] } else { hidden };
                let prefix = format!("leb{}", b + 1);
                let adapter0 = Adapter::new(&mut store, &format!("{prefix}.adapter0"), ParamGroup::Adapter0, din, cfg.leb.adapter0_width(), hidden, slope, seed);
                let core = match cfg.variant {
                    Variant::VitReplace => LebCore::Vit(VitLayer::new(&mut store, &format!("{prefix}.vit"), hidden, tokens, seed)),
                    _ => {
                        let layer = LlmLayer::register(&mut store, &format!("{prefix}.llm"), weights.next().unwrap());
                        let lora = match cfg.variant {
                            Variant::NoLora => None,
                            _ => Some(layer.lora(&mut store, &format!("{prefix}.lora"), cfg.leb.lora_rank, seed)?),
                        };
                        LebCore::Frozen { layer, lora }
                    }
                };
                blocks.push(LebBlock { adapter0, core });
            }
            Ok(Leb {
                cfg: cfg.leb.clone(),
                blocks,
            })
        });
        let leb = leb.transpose()?;
        let decoder = Decoder::new(&mut store, &cfg.stage, &cfg.encoder.enc_channels, leb.as_ref().map(|_| hidden), slope, seed);
        Ok(Model {
            cfg,
            store,
            encoder,
            leb,
            decoder,
        })
    }

    /// Parameters the optimizer may update; LoRA can be excluded.
    pub fn trainable_groups(&self, lora_enabled: bool) -> Vec<ParamGroup> {
        ParamGroup::TRAINABLE
            .into_iter()
            .filter(|&g| lora_enabled || g != ParamGroup::Lora)
            .filter(|&g| self.store.iter().any(|(_, p)| p.group == g))
            .collect()
    }

    /// The full coarse-to-fine pass on `(1, D, H, W)` inputs.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, moving: Var, fixed: Var) -> Result<RegistrationOutput> {
        let dims = &ctx.g.shape(moving)[1..];
        if dims != self.cfg.input_dims {
            return Err(Error::Shape(format!("model expects {:?} inputs, got {dims:?}", self.cfg.input_dims)));
        }
        let (pm, pf) = self.encoder.encode_pair(ctx, moving, fixed)?;
        let (m, f) = (&pm.levels, &pf.levels);
        let detok: Vec<Option<Var>> = match &self.leb {
            Some(leb) => {
                let t = leb.encode(ctx, m[4], f[4])?;
                self.decoder.stage_features(ctx, t)?.into_iter().map(Some).collect()
            }
            None => vec![None; 4],
        };

        let fused4 = self.decoder.fuse_s4(ctx, detok[0], m[3], f[3])?;
        let up = ctx.g.upsample2(fused4);
        let mut fused = self.decoder.fuse_stage(ctx, 3, up, detok[1], m[2], f[2], None)?;
        let phi3 = self.decoder.flow_head(ctx, 3, fused);
        let mut stage_fields = vec![phi3];
        let mut composed = vec![phi3];
        let mut current = phi3;
        for (stage, lvl) in [(2usize, 1usize), (1, 0)] {
            let phi_up = ctx.g.upsample_field_x2(current);
            let up = ctx.g.upsample2(fused);
            let fm = ctx.g.warp(m[lvl], phi_up);
            fused = self.decoder.fuse_stage(ctx, stage, up, detok[4 - stage], fm, f[lvl], Some(phi_up))?;
            let phi = self.decoder.flow_head(ctx, stage, fused);
            current = ctx.g.compose_fields(phi_up, phi);
            stage_fields.push(phi);
            composed.push(current);
        }
        Ok(RegistrationOutput {
            phi: current,
            stage_fields,
            composed,
        })
    }

    /// Inference: the full-resolution field for a volume pair.
    pub fn predict(&self, moving: &Volume<T>, fixed: &Volume<T>) -> Result<DisplacementField<T>> {
        let mut ctx = Ctx::new(&self.store, false);
        let m = ctx.g.constant(moving.as_channels());
        let f = ctx.g.constant(fixed.as_channels());
        let out = self.forward(&mut ctx, m, f)?;
        let phi: Tensor<T> = ctx.g.value(out.phi).clone();
        DisplacementField::new(phi, fixed.spacing())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: Dims, phase: f64) -> Volume<f64> {
        Volume::from_fn(dims, [1.0; 3], |z, y, x| ((z * 5 + y * 3 + x) as f64 * 0.21 + phase).sin()).unwrap()
    }

    #[test]
    fn zero_heads_give_identity() {
        let model = Model::<f64>::build(&ModelConfig::tiny([32, 16, 16])).unwrap();
        let phi = model.predict(&vol([32, 16, 16], 0.0), &vol([32, 16, 16], 1.0)).unwrap();
        assert_eq!(phi.dims(), [32, 16, 16]);
        assert!(phi.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variants_build_and_run() {
        for v in [Variant::Full, Variant::NoLeb, Variant::VitReplace, Variant::OneLeb, Variant::NoLora] {
            let cfg = ModelConfig { variant: v, ..ModelConfig::tiny([16, 16, 32]) };
            let model = Model::<f64>::build(&cfg).unwrap();
            let phi = model.predict(&vol([16, 16, 32], 0.0), &vol([16, 16, 32], 0.5)).unwrap();
            assert_eq!(phi.dims(), [16, 16, 32], "{v:?}");
        }
    }

    #[test]
    fn lora_delta_is_closed_form() {
        let full = Model::<f32>::build(&ModelConfig::tiny([16, 16, 16])).unwrap();
        let nolora = Model::<f32>::build(&ModelConfig { variant: Variant::NoLora, ..ModelConfig::tiny([16, 16, 16]) }).unwrap();
        // hidden 32, head_dim 8, kv_groups 2: q is 32 wide, k and v 16.
        let r = 4;
        let per_leb = (32 * r + r * 32) + 2 * (16 * r + r * 32);
        assert_eq!(full.store.trainable_count() - nolora.store.trainable_count(), 2 * per_leb);
        let noleb = Model::<f32>::build(&ModelConfig { variant: Variant::NoLeb, ..ModelConfig::tiny([16, 16, 16]) }).unwrap();
        assert!(noleb.store.trainable_count() < full.store.trainable_count());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = Model::<f64>::build(&ModelConfig::tiny([16, 16, 16])).unwrap();
        assert!(model.predict(&vol([32, 16, 16], 0.0), &vol([32, 16, 16], 0.0)).is_err());
        let bad = ModelConfig { input_dims: [16, 16, 24], ..ModelConfig::tiny([16, 16, 16]) };
        assert!(Model::<f64>::build(&bad).is_err());
    }
}
