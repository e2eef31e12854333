//! LLM encoding blocks: tokenization of the deepest features, Adapter₀, and a
//! frozen pretrained decoder layer with low-rank updates on Q/K/V.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveWriter, TensorArchive, TensorDtype};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{Adapter, Linear};
use crate::params::{init_normal, param_rng, Ctx, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::Dims;

pub const LAYER_CONFIG: &str = "layer_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LebConfig {
    pub llm_hidden: usize,
    pub num_lebs: usize,
    pub lora_rank: usize,
    pub causal_mask: bool,
    /// Intermediate width of Adapter₀; `None` means `llm_hidden`.
    pub adapter0_hidden: Option<usize>,
    pub use_rotary: bool,
}

impl Default for LebConfig {
    fn default() -> Self {
        LebConfig {
            llm_hidden: 4096,
            num_lebs: 2,
            lora_rank: 64,
            causal_mask: false,
            adapter0_hidden: None,
            use_rotary: true,
        }
    }
}

impl LebConfig {
    pub fn validate(&self) -> Result<()> {
        if self.llm_hidden == 0 || self.adapter0_hidden == Some(0) {
            return Err(Error::Invalid("LEB widths must be positive".into()));
        }
        if !(1..=2).contains(&self.num_lebs) {
            return Err(Error::Invalid(format!("num_lebs must be 1 or 2, got {}", self.num_lebs)));
        }
        if self.lora_rank == 0 {
            return Err(Error::Invalid("lora_rank must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adapter0_width(&self) -> usize {
        self.adapter0_hidden.unwrap_or(self.llm_hidden)
    }
}

/// A token batch `(L, C)` and the spatial grid it was flattened from.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub var: Var,
    pub grid: Dims,
}

fn tokenize_index(c: usize, l: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * l);
    for t in 0..l {
        for ch in 0..c {
            idx.push(ch * l + t);
        }
    }
    idx
}

/// Flattens channel-first features `(C, d, h, w)` into `L = d·h·w` tokens of
/// width `C`, spatial positions in row-major order.
pub fn tokenize<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var) -> Tokens {
    let s = ctx.g.shape(x).to_vec();
    assert_eq!(s.len(), 4, "tokenize expects (C, d, h, w)");
    let (c, grid) = (s[0], [s[1], s[2], s[3]]);
    let l = grid.iter().product();
    let var = ctx.g.gather(x, Arc::new(tokenize_index(c, l)), &[l, c]);
    Tokens { var, grid }
}

/// Value-level [`tokenize`].
pub fn tokenize_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (c, l) = (s[0], s[1] * s[2] * s[3]);
    let d = x.data();
    let data = tokenize_index(c, l).into_iter().map(|i| d[i]).collect();
    Tensor::from_vec(&[l, c], data).unwrap()
}

/// `W_r = B·A` with `A (r, k)` and `B (d_out, r)`.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub dims: (usize, usize),
}

impl LoraPair {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, k: usize, d_out: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 || rank >= k.min(d_out) {
            return Err(Error::Invalid(format!(
                "{name}: LoRA rank {rank} must satisfy 1 <= r < min({d_out}, {k})"
            )));
        }
        let a = init_normal(&mut param_rng(seed, &format!("{name}.a")), &[rank, k], 0.02);
        Ok(LoraPair {
            a: store.add(format!("{name}.a"), ParamGroup::Lora, a),
            b: store.add(format!("{name}.b"), ParamGroup::Lora, Tensor::zeros(&[d_out, rank])),
            rank,
            dims: (d_out, k),
        })
    }

    pub fn param_count(&self) -> usize {
        let (d_out, k) = self.dims;
        d_out * self.rank + self.rank * k
    }
}

/// `h = W x (+ bias) + B(A x)`; `W` is whatever leaf the caller passes.
pub fn lora_apply<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, w: Var, bias: Option<Var>, lora: Option<&LoraPair>) -> Var {
    let base = ctx.g.linear(x, w, bias);
    match lora {
        None => base,
        Some(lp) => {
            let (a, b) = (ctx.p(lp.a), ctx.p(lp.b));
            let ax = ctx.g.linear(x, a, None);
            let bax = ctx.g.linear(ax, b, None);
            ctx.g.add(base, bax)
        }
    }
}

/// Naming profile mapping logical layer tensors onto archive keys. Fused
/// projections (`qkv`, `gate_up`) are split by rows on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NameMap {
    pub name: String,
    /// Prefix with a `{layer}` placeholder.
    pub layer_prefix: String,
    pub attn_norm: String,
    pub mlp_norm: String,
    #[serde(default)]
    pub q: Option<String>,
    #[serde(default)]
    pub k: Option<String>,
    #[serde(default)]
    pub v: Option<String>,
    #[serde(default)]
    pub qkv: Option<String>,
    #[serde(default)]
    pub q_bias: Option<String>,
    #[serde(default)]
    pub k_bias: Option<String>,
    #[serde(default)]
    pub v_bias: Option<String>,
    pub o: String,
    #[serde(default)]
    pub gate: Option<String>,
    #[serde(default)]
    pub up: Option<String>,
    #[serde(default)]
    pub gate_up: Option<String>,
    pub down: String,
    pub head_dim: usize,
    pub rope_theta: f64,
    pub rms_eps: f64,
}

const BUILTIN_PROFILES: [(&str, &str); 3] = [
    ("llama", include_str!("../profiles/llama.json")),
    ("phi", include_str!("../profiles/phi.json")),
    ("qwen", include_str!("../profiles/qwen.json")),
];

impl NameMap {
    /// A built-in profile name or a path to a JSON profile.
    pub fn resolve(spec: &str) -> Result<Self> {
        let text = match BUILTIN_PROFILES.iter().find(|(n, _)| *n == spec) {
            Some((_, t)) => t.to_string(),
            None => fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?,
        };
        let map: NameMap = serde_json::from_str(&text).map_err(|e| Error::json(format!("name map {spec}"), e))?;
        map.check()?;
        Ok(map)
    }

    fn check(&self) -> Result<()> {
        let split = self.q.is_some() && self.k.is_some() && self.v.is_some();
        if split == self.qkv.is_some() {
            return Err(Error::Invalid(format!("profile {}: give either q/k/v or qkv", self.name)));
        }
        let split = self.gate.is_some() && self.up.is_some();
        if split == self.gate_up.is_some() {
            return Err(Error::Invalid(format!("profile {}: give either gate/up or gate_up", self.name)));
        }
        Ok(())
    }

    pub fn key(&self, layer: usize, suffix: &str) -> String {
        format!("{}{suffix}", self.layer_prefix.replace("{layer}", &layer.to_string()))
    }

    /// Number of consecutive layers present in the archive.
    pub fn layer_count(&self, archive: &TensorArchive) -> usize {
        (0..).take_while(|&i| archive.contains(&self.key(i, &self.attn_norm))).count()
    }
}

/// Per-archive overrides written next to the manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerOverrides {
    pub head_dim: Option<usize>,
    pub rope_theta: Option<f64>,
    pub rms_eps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub intermediate: usize,
    pub rope_theta: f64,
    pub rms_eps: f64,
    pub qkv_bias: bool,
}

impl LayerSpec {
    /// A LLaMA-shaped layer scaled to `hidden`.
    pub fn tiny(hidden: usize, head_dim: usize, kv_groups: usize) -> Self {
        let heads = hidden / head_dim;
        LayerSpec {
            hidden,
            heads,
            kv_heads: heads / kv_groups,
            head_dim,
            intermediate: hidden * 2,
            rope_theta: 10000.0,
            rms_eps: 1e-5,
            qkv_bias: false,
        }
    }

    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.heads > 0
            && self.kv_heads > 0
            && self.heads % self.kv_heads == 0
            && self.head_dim % 2 == 0
            && self.intermediate > 0;
        if !ok {
            return Err(Error::Invalid(format!("inconsistent layer geometry {self:?}")));
        }
        Ok(())
    }
}

/// Tensors of one pretrained decoder layer. Linear weights are `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LlmLayerWeights<T> {
    pub spec: LayerSpec,
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bias: Option<[Tensor<T>; 3]>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub gate: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

fn split_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Vec<Tensor<T>> {
    let cols = t.shape()[1];
    let mut start = 0;
    rows.iter()
        .map(|&r| {
            let part = t.data()[start * cols..(start + r) * cols].to_vec();
            start += r;
            Tensor::from_vec(&[r, cols], part).unwrap()
        })
        .collect()
}

fn shape_err(name: &str, got: &[usize], want: Vec<usize>) -> Error {
    Error::TensorShape {
        name: name.to_string(),
        got: got.to_vec(),
        want,
    }
}

/// Reads `layer_config.json` if the archive carries one.
pub fn read_overrides(archive: &TensorArchive) -> Result<LayerOverrides> {
    let path = archive.root().join(LAYER_CONFIG);
    if !path.exists() {
        return Ok(LayerOverrides::default());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Loads layer `layer` of an archive; geometry is inferred from tensor
/// shapes and the profile's head size.
pub fn load_llm_layer<T: Scalar>(archive: &TensorArchive, layer: usize, map: &NameMap) -> Result<LlmLayerWeights<T>> {
    let ov = read_overrides(archive)?;
    let head_dim = ov.head_dim.unwrap_or(map.head_dim);
    let key = |s: &str| map.key(layer, s);

    let attn_norm_key = key(&map.attn_norm);
    let attn_norm: Tensor<T> = archive.load(&attn_norm_key)?;
    if attn_norm.ndim() != 1 {
        return Err(shape_err(&attn_norm_key, attn_norm.shape(), vec![attn_norm.len()]));
    }
    let hidden = attn_norm.len();
    let matrix = |name: &str, cols: usize| -> Result<Tensor<T>> {
        let t: Tensor<T> = archive.load(name)?;
        if t.ndim() != 2 || t.shape()[1] != cols {
            let rows = t.shape().first().copied().unwrap_or(0);
            return Err(shape_err(name, t.shape(), vec![rows, cols]));
        }
        Ok(t)
    };

    let (wq, wk, wv) = match &map.qkv {
        Some(fused) => {
            let name = key(fused);
            let t = matrix(&name, hidden)?;
            let rest = t.shape()[0].checked_sub(hidden).filter(|r| *r > 0 && r % 2 == 0);
            let Some(rest) = rest else {
                return Err(shape_err(&name, t.shape(), vec![3 * hidden, hidden]));
            };
            let mut parts = split_rows(&t, &[hidden, rest / 2, rest / 2]).into_iter();
            (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap())
        }
        None => (
            matrix(&key(map.q.as_deref().unwrap()), hidden)?,
            matrix(&key(map.k.as_deref().unwrap()), hidden)?,
            matrix(&key(map.v.as_deref().unwrap()), hidden)?,
        ),
    };
    let (qw, kvw) = (wq.shape()[0], wk.shape()[0]);
    let qname = key(map.q.as_deref().or(map.qkv.as_deref()).unwrap());
    if qw % head_dim != 0 || kvw % head_dim != 0 || wv.shape()[0] != kvw {
        return Err(shape_err(&qname, wq.shape(), vec![qw / head_dim * head_dim, hidden]));
    }
    let (heads, kv_heads) = (qw / head_dim, kvw / head_dim);

    let bias = match (&map.q_bias, &map.k_bias, &map.v_bias) {
        (Some(q), Some(k), Some(v)) => Some([
            archive.load_shaped(&key(q), &[qw])?,
            archive.load_shaped(&key(k), &[kvw])?,
            archive.load_shaped(&key(v), &[kvw])?,
        ]),
        _ => None,
    };
    let wo = archive.load_shaped(&key(&map.o), &[hidden, qw])?;
    let mlp_norm = archive.load_shaped(&key(&map.mlp_norm), &[hidden])?;
    let (gate, up) = match &map.gate_up {
        Some(fused) => {
            let name = key(fused);
            let t = matrix(&name, hidden)?;
            if t.shape()[0] % 2 != 0 {
                return Err(shape_err(&name, t.shape(), vec![t.shape()[0] + 1, hidden]));
            }
            let half = t.shape()[0] / 2;
            let mut parts = split_rows(&t, &[half, half]).into_iter();
            (parts.next().unwrap(), parts.next().unwrap())
        }
        None => {
            let gate = matrix(&key(map.gate.as_deref().unwrap()), hidden)?;
            let up = archive.load_shaped(&key(map.up.as_deref().unwrap()), gate.shape())?;
            (gate, up)
        }
    };
    let intermediate = gate.shape()[0];
    let down = archive.load_shaped(&key(&map.down), &[hidden, intermediate])?;

    let spec = LayerSpec {
        hidden,
        heads,
        kv_heads,
        head_dim,
        intermediate,
        rope_theta: ov.rope_theta.unwrap_or(map.rope_theta),
        rms_eps: ov.rms_eps.unwrap_or(map.rms_eps),
        qkv_bias: bias.is_some(),
    };
    spec.validate().map_err(|e| Error::Invalid(format!("{qname}: {e}")))?;
    Ok(LlmLayerWeights {
        spec,
        attn_norm,
        wq,
        wk,
        wv,
        bias,
        wo,
        mlp_norm,
        gate,
        up,
        down,
    })
}

/// Random stand-in for a pretrained layer, drawn like a fresh LLaMA init.
pub fn random_layer_weights<T: Scalar>(spec: &LayerSpec, seed: u64, layer: usize) -> LlmLayerWeights<T> {
    let (h, q, kv, m) = (spec.hidden, spec.q_width(), spec.kv_width(), spec.intermediate);
    let mut rng = param_rng(seed, &format!("random_llm.layer{layer}"));
    let mut n = |shape: &[usize]| init_normal::<T>(&mut rng, shape, 0.02);
    let wq = n(&[q, h]);
    let wk = n(&[kv, h]);
    let wv = n(&[kv, h]);
    let bias = spec.qkv_bias.then(|| [n(&[q]), n(&[kv]), n(&[kv])]);
    LlmLayerWeights {
        spec: spec.clone(),
        attn_norm: Tensor::full(&[h], T::one()),
        wq,
        wk,
        wv,
        bias,
        wo: n(&[h, q]),
        mlp_norm: Tensor::full(&[h], T::one()),
        gate: n(&[m, h]),
        up: n(&[m, h]),
        down: n(&[h, m]),
    }
}

fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let cols = parts[0].shape()[1];
    let rows = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

/// Writes `n_layers` random layers named by `map`, plus a `layer_config.json`
/// carrying the geometry the profile cannot infer from shapes.
pub fn write_random_archive(dir: impl AsRef<Path>, map: &NameMap, spec: &LayerSpec, n_layers: usize, seed: u64, dtype: TensorDtype) -> Result<TensorArchive> {
    spec.validate()?;
    if map.qkv.is_some() && spec.q_width() != spec.hidden {
        return Err(Error::Invalid("fused qkv profiles need heads·head_dim == hidden".into()));
    }
    let mut w = ArchiveWriter::create(&dir)?;
    for layer in 0..n_layers {
        let t = random_layer_weights::<f64>(spec, seed, layer);
        let k = |s: &str| map.key(layer, s);
        w.add(&k(&map.attn_norm), &t.attn_norm, dtype)?;
        w.add(&k(&map.mlp_norm), &t.mlp_norm, dtype)?;
        match &map.qkv {
            Some(f) => w.add(&k(f), &concat_rows(&[&t.wq, &t.wk, &t.wv]), dtype)?,
            None => {
                w.add(&k(map.q.as_deref().unwrap()), &t.wq, dtype)?;
                w.add(&k(map.k.as_deref().unwrap()), &t.wk, dtype)?;
                w.add(&k(map.v.as_deref().unwrap()), &t.wv, dtype)?;
            }
        }
        if let (Some(b), Some(q), Some(kk), Some(v)) = (&t.bias, &map.q_bias, &map.k_bias, &map.v_bias) {
            w.add(&k(q), &b[0], dtype)?;
            w.add(&k(kk), &b[1], dtype)?;
            w.add(&k(v), &b[2], dtype)?;
        }
        w.add(&k(&map.o), &t.wo, dtype)?;
        match &map.gate_up {
            Some(f) => w.add(&k(f), &concat_rows(&[&t.gate, &t.up]), dtype)?,
            None => {
                w.add(&k(map.gate.as_deref().unwrap()), &t.gate, dtype)?;
                w.add(&k(map.up.as_deref().unwrap()), &t.up, dtype)?;
            }
        }
        w.add(&k(&map.down), &t.down, dtype)?;
    }
    let archive = w.finish()?;
    let ov = LayerOverrides {
        head_dim: Some(spec.head_dim),
        rope_theta: Some(spec.rope_theta),
        rms_eps: Some(spec.rms_eps),
    };
    let path = archive.root().join(LAYER_CONFIG);
    let text = serde_json::to_string_pretty(&ov).map_err(|e| Error::json("layer config", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(archive)
}

/// A pretrained layer registered as frozen parameters.
#[derive(Clone, Debug)]
pub struct LlmLayer {
    pub spec: LayerSpec,
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bias: Option<[ParamId; 3]>,
    wo: ParamId,
    mlp_norm: ParamId,
    gate: ParamId,
    up: ParamId,
    down: ParamId,
}

impl LlmLayer {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, w: LlmLayerWeights<T>) -> Self {
        let mut add = |n: &str, t: Tensor<T>| store.add(format!("{prefix}.{n}"), ParamGroup::Frozen, t);
        let attn_norm = add("attn_norm", w.attn_norm);
        let wq = add("q", w.wq);
        let wk = add("k", w.wk);
        let wv = add("v", w.wv);
        let bias = w.bias.map(|[q, k, v]| [add("q_bias", q), add("k_bias", k), add("v_bias", v)]);
        LlmLayer {
            spec: w.spec,
            attn_norm,
            wq,
            wk,
            wv,
            bias,
            wo: add("o", w.wo),
            mlp_norm: add("mlp_norm", w.mlp_norm),
            gate: add("gate", w.gate),
            up: add("up", w.up),
            down: add("down", w.down),
        }
    }

    /// LoRA pairs for the Q, K and V projections.
    pub fn lora<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rank: usize, seed: u64) -> Result<[LoraPair; 3]> {
        let s = &self.spec;
        Ok([
            LoraPair::new(store, &format!("{prefix}.q"), s.hidden, s.q_width(), rank, seed)?,
            LoraPair::new(store, &format!("{prefix}.k"), s.hidden, s.kv_width(), rank, seed)?,
            LoraPair::new(store, &format!("{prefix}.v"), s.hidden, s.kv_width(), rank, seed)?,
        ])
    }
}

/// One pre-norm decoder layer: RMSNorm → GQA attention (LoRA on Q/K/V,
/// optional rotary over the token index) → residual → RMSNorm → SiLU-gated
/// MLP → residual.
pub fn llm_layer_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, layer: &LlmLayer, lora: Option<&[LoraPair; 3]>, causal: bool, rotary: bool) -> Result<Var> {
    let s = &layer.spec;
    let xs = ctx.g.shape(x);
    if xs.len() != 2 || xs[1] != s.hidden {
        return Err(Error::Shape(format!("tokens {xs:?} do not match layer width {}", s.hidden)));
    }
    let norm = ctx.p(layer.attn_norm);
    let h = ctx.g.rms_norm(x, norm, s.rms_eps);
    let mut proj = [layer.wq, layer.wk, layer.wv].into_iter().enumerate().map(|(i, w)| {
        let w = ctx.p(w);
        let b = layer.bias.map(|b| ctx.p(b[i]));
        lora_apply(ctx, h, w, b, lora.map(|l| &l[i]))
    }).collect::<Vec<_>>();
    let v = proj.pop().unwrap();
    let mut k = proj.pop().unwrap();
    let mut q = proj.pop().unwrap();
    if rotary {
        q = ctx.g.rope(q, s.heads, s.rope_theta);
        k = ctx.g.rope(k, s.kv_heads, s.rope_theta);
    }
    let att = ctx.g.attention(q, k, v, s.heads, s.kv_heads, causal);
    let wo = ctx.p(layer.wo);
    let o = ctx.g.linear(att, wo, None);
    let x = ctx.g.add(x, o);

    let norm = ctx.p(layer.mlp_norm);
    let h = ctx.g.rms_norm(x, norm, s.rms_eps);
    let (gw, uw, dw) = (ctx.p(layer.gate), ctx.p(layer.up), ctx.p(layer.down));
    let gate = ctx.g.linear(h, gw, None);
    let gate = ctx.g.silu(gate);
    let up = ctx.g.linear(h, uw, None);
    let m = ctx.g.mul(gate, up);
    let m = ctx.g.linear(m, dw, None);
    Ok(ctx.g.add(x, m))
}

/// Trainable pre-norm transformer layer with a learned positional table,
/// used in place of the frozen layer for the ViT ablation.
#[derive(Clone, Debug)]
pub struct VitLayer {
    pos: ParamId,
    ln1: [ParamId; 2],
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: [ParamId; 2],
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl VitLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, hidden: usize, tokens: usize, seed: u64) -> Self {
        let g = ParamGroup::Vit;
        let heads = if hidden >= 64 && hidden % 64 == 0 { hidden / 64 } else { 1 };
        let pos = init_normal(&mut param_rng(seed, &format!("{prefix}.pos")), &[tokens, hidden], 0.02);
        let mut ln = |n: &str| {
            [
                store.add(format!("{prefix}.{n}.gamma"), g, Tensor::full(&[hidden], T::one())),
                store.add(format!("{prefix}.{n}.beta"), g, Tensor::zeros(&[hidden])),
            ]
        };
        let (ln1, ln2) = (ln("ln1"), ln("ln2"));
        let mut lin = |n: &str, i: usize, o: usize| Linear::new(store, &format!("{prefix}.{n}"), g, i, o, true, seed);
        VitLayer {
            ln1,
            ln2,
            q: lin("q", hidden, hidden),
            k: lin("k", hidden, hidden),
            v: lin("v", hidden, hidden),
            o: lin("o", hidden, hidden),
            fc1: lin("fc1", hidden, 4 * hidden),
            fc2: lin("fc2", 4 * hidden, hidden),
            pos: store.add(format!("{prefix}.pos"), g, pos),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let pos = ctx.p(self.pos);
        if ctx.g.shape(pos) != ctx.g.shape(x) {
            return Err(Error::Shape(format!(
                "ViT positional table {:?} does not match tokens {:?}",
                ctx.g.shape(pos),
                ctx.g.shape(x)
            )));
        }
        let x = ctx.g.add(x, pos);
        let (g1, b1) = (ctx.p(self.ln1[0]), ctx.p(self.ln1[1]));
        let h = ctx.g.layer_norm(x, g1, b1, 1e-5);
        let q = self.q.forward(ctx, h);
        let k = self.k.forward(ctx, h);
        let v = self.v.forward(ctx, h);
        let a = ctx.g.attention(q, k, v, self.heads, self.heads, false);
        let a = self.o.forward(ctx, a);
        let x = ctx.g.add(x, a);
        let (g2, b2) = (ctx.p(self.ln2[0]), ctx.p(self.ln2[1]));
        let h = ctx.g.layer_norm(x, g2, b2, 1e-5);
        let h = self.fc1.forward(ctx, h);
        let h = ctx.g.gelu(h);
        let h = self.fc2.forward(ctx, h);
        Ok(ctx.g.add(x, h))
    }
}

#[derive(Clone, Debug)]
pub enum LebCore {
    Frozen { layer: LlmLayer, lora: Option<[LoraPair; 3]> },
    Vit(VitLayer),
}

/// Adapter₀ followed by the transformer layer.
#[derive(Clone, Debug)]
pub struct LebBlock {
    pub adapter0: Adapter,
    pub core: LebCore,
}

#[derive(Clone, Debug)]
pub struct Leb {
    pub cfg: LebConfig,
    pub blocks: Vec<LebBlock>,
}

impl Leb {
    /// Channel-concatenates the level-5 grids, tokenizes, and runs every block.
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, fm5: Var, ff5: Var) -> Result<Tokens> {
        let (ms, fs) = (ctx.g.shape(fm5), ctx.g.shape(ff5));
        if ms.len() != 4 || ms[1..] != fs[1..] {
            return Err(Error::Shape(format!("level-5 grids differ: {ms:?} vs {fs:?}")));
        }
        let cat = ctx.g.concat(&[fm5, ff5], 0);
        let mut t = tokenize(ctx, cat);
        for block in &self.blocks {
            let width = ctx.g.shape(t.var)[1];
            if width != block.adapter0.dims.0 {
                return Err(Error::Shape(format!("adapter expects {} channels, got {width}", block.adapter0.dims.0)));
            }
            let h = block.adapter0.forward(ctx, t.var);
            t.var = match &block.core {
                LebCore::Frozen { layer, lora } => llm_layer_forward(ctx, h, layer, lora.as_ref(), self.cfg.causal_mask, self.cfg.use_rotary)?,
                LebCore::Vit(vit) => vit.forward(ctx, h)?,
            };
        }
        Ok(t)
    }
}
