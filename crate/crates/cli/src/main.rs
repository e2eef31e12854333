use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use morphkit::ablation::{report, run_sweep, SweepSpec};
use morphkit::metrics::{evaluate, MetricReport};
use morphkit::model::{FrozenSource, ModelConfig};
use morphkit::synthdata::{gen_dataset, gen_pair, Dataset, GenConfig, SynthPair};
use morphkit::trainer::{
    grad_check, load_checkpoint, predict_field, randomize_zero_params, read_checkpoint_meta, save_checkpoint, train, GradCheckOptions, TrainConfig,
};
use morphkit::volume::{load_field, load_labels, load_volume, save_field, save_labels, save_volume, DisplacementField, Dims};
use morphkit::warp::{warp_labels_nearest, warp_trilinear};
use morphkit::{Error, Model, Scalar};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "morphkit", version, about = "Multimodal deformable registration with frozen transformer layers")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Register a moving volume to a fixed one with a trained checkpoint.
    Register(RegisterArgs),
    /// Score predicted labels against target labels.
    Eval(EvalArgs),
    /// Run an ablation or sweep spec.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Volume shape D,H,W; each must be divisible by 16.
    #[arg(long, value_parser = parse_dims)]
    shape: Dims,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    labels: usize,
    /// Largest displacement magnitude in voxels.
    #[arg(long, default_value_t = 4.0)]
    max_disp: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// Full-width settings (enc 8..128, hidden 4096, r 64, C4 256).
    #[default]
    Full,
    /// Narrow widths for CPU experiments and tests.
    Tiny,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON with optional `preset`, `dtype`, `model` and `train` objects.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tensor archive with pretrained layers; random layers when omitted.
    #[arg(long)]
    llm_archive: Option<PathBuf>,
    /// Name map for the archive: llama, phi, qwen or a JSON path.
    #[arg(long)]
    profile: Option<String>,
    /// Layer indices, one per LEB, e.g. 15,16.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_enum)]
    dtype: Option<Dtype>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    half_resolution: Option<bool>,
    #[arg(long)]
    lora_enabled: Option<bool>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving_labels: Option<PathBuf>,
    #[arg(long)]
    fixed_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_labels: PathBuf,
    #[arg(long)]
    target_labels: PathBuf,
    #[arg(long)]
    field: Option<PathBuf>,
    /// Labels to score, e.g. 1,2,3; defaults to every foreground label.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<u32>>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Widths::Tiny)]
    widths: Widths,
    #[arg(long, value_parser = parse_dims, default_value = "16,16,16")]
    shape: Dims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scalars sampled in total, spread evenly over parameter groups.
    #[arg(long, default_value_t = 24)]
    n_params: usize,
    #[arg(long, default_value_t = GradCheckOptions::default().step)]
    step: f64,
    /// Report JSON destination.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Widths {
    Tiny,
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    let dims: Dims = parts.try_into().map_err(|_| "expected three comma-separated sizes".to_string())?;
    if dims.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(format!("every dimension must be a positive multiple of 16, got {dims:?}"));
    }
    Ok(dims)
}

fn install_thread_cap() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MORPHKIT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("MORPHKIT_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Effective training settings after defaults, file and flags are merged.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    preset: Preset,
    dtype: Dtype,
    model: ModelConfig,
    train: TrainConfig,
}

fn preset_model(p: Preset) -> ModelConfig {
    match p {
        Preset::Full => ModelConfig::default(),
        Preset::Tiny => ModelConfig::tiny([96, 80, 96]),
    }
}

fn resolve_run_config(a: &TrainArgs, data_dims: Dims) -> anyhow::Result<RunConfig> {
    let file: Value = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                context: p.display().to_string(),
                source: e,
            })?
        }
        None => Value::Object(Default::default()),
    };
    let preset = match (a.preset, file.get("preset")) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone()).context("config field `preset`")?,
        (None, None) => Preset::default(),
    };
    let mut merged = serde_json::to_value(RunConfig {
        preset,
        dtype: Dtype::default(),
        model: preset_model(preset),
        train: TrainConfig::default(),
    })?;
    merge(&mut merged, file);
    let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Json {
        context: "merged config".into(),
        source: e,
    })?;
    cfg.preset = preset;
    if let Some(d) = a.dtype {
        cfg.dtype = d;
    }
    let t = &mut cfg.train;
    macro_rules! flag {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { t.$f = v; } )* };
    }
    flag!(epochs, lr, lambda, batch_size, seed, half_resolution, lora_enabled);
    if let Some(l) = &a.layers {
        cfg.model.layers = l.clone();
    }
    if let Some(path) = &a.llm_archive {
        let profile = a.profile.clone().unwrap_or_else(|| match &cfg.model.frozen {
            FrozenSource::Archive { profile, .. } => profile.clone(),
            _ => "llama".into(),
        });
        cfg.model.frozen = FrozenSource::Archive { path: path.clone(), profile };
    }
    cfg.model.input_dims = if cfg.train.half_resolution { data_dims.map(|d| d / 2) } else { data_dims };
    Ok(cfg)
}

fn cmd_gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let gen = GenConfig {
        n_labels: a.labels,
        max_disp: a.max_disp,
    };
    gen_dataset(a.pairs, a.shape, a.seed, &gen, &a.out)?;
    println!("{}", a.out.join(morphkit::synthdata::DATASET_MANIFEST).display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let data = Dataset::open(&a.data)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("{} lists no pairs", a.data.display())).into());
    }
    let pairs: Vec<SynthPair> = (0..data.len()).map(|i| data.load(i)).collect::<Result<_, _>>()?;
    let cfg = resolve_run_config(&a, pairs[0].fixed.dims())?;
    if matches!(cfg.model.frozen, FrozenSource::Random { .. }) {
        eprintln!("warning: no --llm-archive given, frozen layers are randomly initialized");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("config.lock.json"), &cfg)?;
    match cfg.dtype {
        Dtype::F32 => train_with::<f32>(&cfg, &pairs, &a.out),
        Dtype::F64 => train_with::<f64>(&cfg, &pairs, &a.out),
    }
}

fn train_with<T: Scalar>(cfg: &RunConfig, pairs: &[SynthPair], out: &Path) -> anyhow::Result<()> {
    let mut model = Model::<T>::build(&cfg.model)?;
    let steps_per_epoch = pairs.len().div_ceil(cfg.train.batch_size);
    let r = train(&mut model, pairs, &cfg.train, |epoch, step, b| {
        if (step + 1) % steps_per_epoch == 0 {
            log::info!("epoch {epoch} step {step}: sim {:.5} reg {:.5} total {:.5}", b.sim, b.reg, b.total);
        }
    })?;
    let mut w = csv::Writer::from_path(out.join("loss_history.csv"))?;
    w.write_record(["epoch", "loss"])?;
    for (e, l) in r.history.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&model, &cfg.train, cfg.train.epochs, &r.history, &ckpt)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn cmd_register(a: RegisterArgs) -> anyhow::Result<()> {
    let meta = read_checkpoint_meta(&a.checkpoint)?;
    match meta.dtype.as_str() {
        "f64" => register_with::<f64>(&a),
        _ => register_with::<f32>(&a),
    }
}

fn register_with<T: Scalar>(a: &RegisterArgs) -> anyhow::Result<()> {
    let (model, meta) = load_checkpoint::<T>(&a.checkpoint)?;
    let moving = load_volume(&a.moving)?;
    let fixed = load_volume(&a.fixed)?;
    if moving.dims() != fixed.dims() {
        return Err(Error::Shape(format!("moving {:?} vs fixed {:?}", moving.dims(), fixed.dims())).into());
    }
    let phi: DisplacementField<f32> = predict_field(&model, &moving, &fixed, meta.train.half_resolution)?.cast();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_volume(&warp_trilinear(&moving, &phi)?, a.out.join("warped.json"))?;
    save_field(&phi, a.out.join("phi.json"))?;
    let warped_labels = match &a.moving_labels {
        Some(p) => {
            let w = warp_labels_nearest(&load_labels(p)?, &phi)?;
            save_labels(&w, a.out.join("warped_labels.json"))?;
            Some(w)
        }
        None => None,
    };
    let mut w = csv::Writer::from_path(a.out.join("metrics.csv"))?;
    w.write_record(MetricReport::CSV_HEADER)?;
    match (warped_labels, &a.fixed_labels) {
        (Some(pred), Some(t)) => {
            let r = evaluate(&pred, &load_labels(t)?, Some(&phi), None)?;
            r.write_csv(&mut w, "pair")?;
            println!("mean dice {:.4}, hd95 {:.4} mm, folding {:.4}%", r.mean_dice, r.mean_hd95, r.folding_pct);
        }
        _ => {
            let fold = morphkit::metrics::folding_pct(&phi)?;
            w.write_record(["pair", "summary", "", "", &fold.to_string()])?;
            println!("folding {fold:.4}%");
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let pred = load_labels(&a.pred_labels)?;
    let target = load_labels(&a.target_labels)?;
    let field = a.field.as_ref().map(load_field).transpose()?;
    let r = evaluate(&pred, &target, field.as_ref(), a.labels.as_deref())?;
    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(MetricReport::CSV_HEADER)?;
    r.write_csv(&mut w, "pair")?;
    w.flush()?;
    for (l, s) in &r.per_label {
        if s.hd95.is_none() {
            eprintln!("warning: label {l} is missing from one map; its distance is reported as an error marker");
        }
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let mut spec = SweepSpec::from_json(&a.spec)?;
    let base = a.spec.parent().unwrap_or(Path::new("."));
    spec.resolve_paths(base);
    let data = Dataset::open(&spec.data)?;
    let rows = run_sweep::<f32>(&spec, &data)?;
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    let (results, per_label) = report(&rows, &spec.out)?;
    println!("{}", results.display());
    println!("{}", per_label.display());
    if failed > 0 {
        eprintln!("warning: {failed} of {} jobs failed; see the error rows", rows.len());
    }
    Ok(())
}

/// Settings of the gradient-check model.
fn gradcheck_model(shape: Dims, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(shape);
    cfg.leb.llm_hidden = 64;
    cfg.seed = seed;
    cfg.frozen = FrozenSource::Random {
        seed,
        head_dim: 16,
        kv_groups: 2,
    };
    cfg
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<bool> {
    let Widths::Tiny = a.widths;
    let mut model = Model::<f64>::build(&gradcheck_model(a.shape, a.seed))?;
    randomize_zero_params(&mut model, a.seed, 0.02);
    let pair = gen_pair(a.shape, 3, 2.0, a.seed)?;
    let opts = GradCheckOptions {
        n_params: a.n_params,
        step: a.step,
        seed: a.seed,
        inject_fault: a.inject_fault,
        ..Default::default()
    };
    let r = grad_check(&model, &pair, &opts)?;
    for g in &r.groups {
        println!("{:<14} samples {:>3}  max_rel_err {:.3e}", g.group.as_str(), g.samples.len(), g.max_rel_err);
    }
    let ok = r.max_rel_err < GRADCHECK_TOL;
    if ok {
        println!("max_rel_err < 1e-3 ({:.3e})", r.max_rel_err);
    } else {
        println!("max_rel_err >= 1e-3 ({:.3e})", r.max_rel_err);
    }
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    Ok(ok)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(e) = e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        return match e {
            Error::Invalid(_) => USAGE,
            Error::Numeric(_) | Error::NonFinite(_) => NUMERIC,
            _ => DATA,
        };
    }
    if e.chain().any(|c| c.is::<std::io::Error>() || c.is::<csv::Error>() || c.is::<serde_json::Error>()) {
        return DATA;
    }
    USAGE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = install_thread_cap().and_then(|()| match cli.cmd {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Register(a) => cmd_register(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Numeric(format!("gradient check exceeded tolerance {GRADCHECK_TOL:e}")).into()),
            Err(e) => Err(e),
        },
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
