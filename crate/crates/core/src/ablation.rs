//! Ablation and sweep harnesses: each job trains a model variant on the same
//! data with the same seeds and scores it on held-out pairs.

use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::leb::NameMap;
use crate::model::{FrozenSource, Model, ModelConfig, Variant};
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, SynthPair};
use crate::trainer::{evaluate_pair, train, TrainConfig};

pub const RESULTS_CSV: &str = "results.csv";
pub const PER_LABEL_CSV: &str = "per_label.csv";
pub const RESULTS_HEADER: [&str; 7] = ["variant", "layer_pair", "archive", "dice_mean", "hd95_mean", "folding_pct", "train_seconds"];
pub const PER_LABEL_HEADER: [&str; 4] = ["variant", "pair_id", "label", "dice"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// The unablated model, useful as a baseline row.
    Full,
    NoLeb,
    VitReplace,
    OneLeb,
    NoLora,
    /// One full model per entry of `layer_pairs`.
    LayerSweep,
    /// One full model per entry of `archives`.
    LlmSweep,
}

/// A pretrained archive plus the name map used to read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveRef {
    pub path: PathBuf,
    #[serde(default = "default_profile")]
    pub profile: String,
}

fn default_profile() -> String {
    "llama".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Dataset directory or manifest.
    pub data: PathBuf,
    /// Directory receiving the result CSVs.
    pub out: PathBuf,
    /// A single kind or a list of kinds.
    #[serde(alias = "variant", deserialize_with = "one_or_many")]
    pub variants: Vec<SweepKind>,
    pub layer_pairs: Vec<[usize; 2]>,
    /// Empty means the random layers described by `model.frozen`.
    pub archives: Vec<ArchiveRef>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Pairs at the end of the dataset kept for evaluation.
    pub eval_pairs: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            data: PathBuf::new(),
            out: PathBuf::from("sweep"),
            variants: Vec::new(),
            layer_pairs: Vec::new(),
            archives: Vec::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_pairs: 1,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<SweepKind>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(SweepKind),
        Many(Vec<SweepKind>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(k) => vec![k],
        OneOrMany::Many(v) => v,
    })
}

impl SweepSpec {
    pub fn from_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Makes relative data, output and archive paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data, &mut self.out].into_iter().chain(self.archives.iter_mut().map(|a| &mut a.path)) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let FrozenSource::Archive { path, .. } = &mut self.model.frozen {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    /// Expands the spec into concrete training jobs.
    pub fn jobs(&self) -> Result<Vec<SweepJob>> {
        if self.variants.is_empty() {
            return Err(Error::Invalid("sweep lists no variants".into()));
        }
        let sources: Vec<FrozenSource> = if self.archives.is_empty() {
            vec![self.model.frozen.clone()]
        } else {
            self.archives
                .iter()
                .map(|a| FrozenSource::Archive {
                    path: a.path.clone(),
                    profile: a.profile.clone(),
                })
                .collect()
        };
        let job = |variant: Variant, layers: Vec<usize>, frozen: FrozenSource| {
            let mut model = self.model.clone();
            model.variant = variant;
            model.layers = layers;
            model.frozen = frozen;
            SweepJob { label: variant.as_str().to_string(), model }
        };
        let mut jobs = Vec::new();
        for &kind in &self.variants {
            let base = || job(Variant::Full, self.model.layers.clone(), sources[0].clone());
            match kind {
                SweepKind::Full => jobs.push(base()),
                SweepKind::NoLeb | SweepKind::VitReplace | SweepKind::OneLeb | SweepKind::NoLora => {
                    let v = match kind {
                        SweepKind::NoLeb => Variant::NoLeb,
                        SweepKind::VitReplace => Variant::VitReplace,
                        SweepKind::OneLeb => Variant::OneLeb,
                        _ => Variant::NoLora,
                    };
                    let mut j = job(v, self.model.layers.clone(), sources[0].clone());
                    if v == Variant::OneLeb {
                        j.model.layers.truncate(1);
                    }
                    jobs.push(j);
                }
                SweepKind::LayerSweep => {
                    if self.layer_pairs.is_empty() {
                        return Err(Error::Invalid("layer_sweep needs layer_pairs".into()));
                    }
                    for p in &self.layer_pairs {
                        let mut j = job(Variant::Full, p.to_vec(), sources[0].clone());
                        j.label = "layer_sweep".into();
                        jobs.push(j);
                    }
                }
                SweepKind::LlmSweep => {
                    if self.archives.is_empty() {
                        return Err(Error::Invalid("llm_sweep needs archives".into()));
                    }
                    for s in &sources {
                        let mut j = job(Variant::Full, self.model.layers.clone(), s.clone());
                        j.label = "llm_sweep".into();
                        jobs.push(j);
                    }
                }
            }
        }
        Ok(jobs)
    }

    /// Checks that every archive opens and every referenced layer exists.
    pub fn check_archives(&self) -> Result<()> {
        for a in &self.archives {
            let archive = TensorArchive::open(&a.path)?;
            let n = NameMap::resolve(&a.profile)?.layer_count(&archive);
            let mut wanted: Vec<usize> = self.model.layers.clone();
            wanted.extend(self.layer_pairs.iter().flatten());
            if let Some(&bad) = wanted.iter().find(|&&i| i >= n) {
                return Err(Error::Invalid(format!("layer {bad} is out of range for {} ({n} layers)", a.path.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepJob {
    /// Value of the `variant` column.
    pub label: String,
    pub model: ModelConfig,
}

impl SweepJob {
    pub fn layer_pair(&self) -> String {
        self.model.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
    }

    pub fn archive(&self) -> String {
        match &self.model.frozen {
            FrozenSource::Random { seed, .. } => format!("random:{seed}"),
            FrozenSource::Archive { path, profile } => format!("{}:{profile}", path.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelDice {
    pub pair_id: String,
    pub label: u32,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub layer_pair: String,
    pub archive: String,
    /// Metrics, or the reason the job failed.
    pub outcome: std::result::Result<SweepScores, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepScores {
    pub dice_mean: f64,
    pub hd95_mean: f64,
    pub folding_pct: f64,
    pub train_seconds: f64,
    pub per_label: Vec<LabelDice>,
}

fn run_job<T: Scalar>(job: &SweepJob, train_set: &[SynthPair], eval_set: &[(String, SynthPair)], cfg: &TrainConfig) -> Result<SweepScores> {
    let mut model = Model::<T>::build(&job.model)?;
    let start = Instant::now();
    train(&mut model, train_set, cfg, |_, _, _| {})?;
    let train_seconds = start.elapsed().as_secs_f64();
    let mut per_label = Vec::new();
    let (mut dice, mut hd, mut fold) = (0.0, 0.0, 0.0);
    for (id, pair) in eval_set {
        let r = evaluate_pair(&model, pair, cfg.half_resolution)?;
        dice += r.mean_dice;
        hd += r.mean_hd95;
        fold += r.folding_pct;
        per_label.extend(r.per_label.iter().map(|(&label, s)| LabelDice {
            pair_id: id.clone(),
            label,
            dice: s.dice,
        }));
    }
    let n = eval_set.len() as f64;
    Ok(SweepScores {
        dice_mean: dice / n,
        hd95_mean: hd / n,
        folding_pct: fold / n,
        train_seconds,
        per_label,
    })
}

/// Trains and scores every job of `spec` on `data`. The last `eval_pairs`
/// pairs are held out. A failing job yields an error row and the sweep
/// moves on.
pub fn run_sweep<T: Scalar>(spec: &SweepSpec, data: &Dataset) -> Result<Vec<SweepRow>> {
    if spec.eval_pairs == 0 || data.len() <= spec.eval_pairs {
        return Err(Error::Invalid(format!("need more than {} pairs to hold out {}, dataset has {}", spec.eval_pairs, spec.eval_pairs, data.len())));
    }
    spec.train.validate()?;
    spec.check_archives()?;
    let jobs = spec.jobs()?;
    let split = data.len() - spec.eval_pairs;
    let train_set: Vec<SynthPair> = (0..split).map(|i| data.load(i)).collect::<Result<_>>()?;
    let eval_set: Vec<(String, SynthPair)> = (split..data.len()).map(|i| Ok((format!("pair_{i:03}"), data.load(i)?))).collect::<Result<_>>()?;
    let dims = train_set[0].fixed.dims();
    let input_dims = if spec.train.half_resolution { dims.map(|d| d / 2) } else { dims };

    let mut rows = Vec::with_capacity(jobs.len());
    for mut job in jobs {
        job.model.input_dims = input_dims;
        log::info!("sweep job {} layers {} archive {}", job.label, job.layer_pair(), job.archive());
        let outcome = run_job::<T>(&job, &train_set, &eval_set, &spec.train).map_err(|e| {
            log::warn!("job {} failed: {e}", job.label);
            e.to_string()
        });
        rows.push(SweepRow {
            variant: job.label.clone(),
            layer_pair: job.layer_pair(),
            archive: job.archive(),
            outcome,
        });
    }
    Ok(rows)
}

/// Appends under an exclusive lock, writing the header into an empty file.
fn append_locked(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut file: File = OpenOptions::new().create(true).append(true).read(true).open(path).map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    let empty = file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))? == 0;
    let mut buf = csv::Writer::from_writer(Vec::new());
    if empty {
        buf.write_record(header)?;
    }
    for r in rows {
        buf.write_record(r)?;
    }
    let bytes = buf.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.unlock().map_err(|e| Error::io(path, e))
}

/// Appends the table to `results.csv` and `per_label.csv` under `out_dir`.
/// Failed jobs carry `error:<reason>` in the metric columns.
pub fn report(rows: &[SweepRow], out_dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    if rows.is_empty() {
        return Err(Error::Invalid("result table is empty".into()));
    }
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut summary = Vec::new();
    let mut long = Vec::new();
    for r in rows {
        let mut rec = vec![r.variant.clone(), r.layer_pair.clone(), r.archive.clone()];
        match &r.outcome {
            Ok(s) => {
                rec.extend([s.dice_mean, s.hd95_mean, s.folding_pct, s.train_seconds].map(|v| v.to_string()));
                long.extend(s.per_label.iter().map(|l| vec![r.variant.clone(), l.pair_id.clone(), l.label.to_string(), l.dice.to_string()]));
            }
            Err(e) => {
                rec.push(format!("error:{}", e.replace(['\n', '\r'], " ")));
                rec.extend(std::iter::repeat_n(String::new(), 3));
            }
        }
        summary.push(rec);
    }
    let (a, b) = (out.join(RESULTS_CSV), out.join(PER_LABEL_CSV));
    append_locked(&a, &RESULTS_HEADER, &summary)?;
    append_locked(&b, &PER_LABEL_HEADER, &long)?;
    Ok((a, b))
}
