//! Synthetic multimodal pairs with known, fold-free deformations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::check_divisible;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{load_field, load_labels, load_volume, save_field, save_labels, save_volume, DisplacementField, Dims, LabelMap, Volume};
use crate::warp::{warp_labels_nearest, warp_tensor};

/// Largest row-sum norm allowed for the displacement gradient; below 1 the
/// Jacobian `I + ∇g` cannot lose rank.
pub const GRADIENT_BOUND: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub fixed: Volume<f32>,
    pub moving: Volume<f32>,
    pub fixed_labels: LabelMap,
    pub moving_labels: LabelMap,
    /// `g` with `moving_labels(x) = fixed_labels(x + g(x))`.
    pub gt_field: DisplacementField<f32>,
    pub seed: u64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection into `0..n`.
fn mirror(p: i64, n: i64) -> usize {
    let q = p.rem_euclid(2 * n);
    (if q < n { q } else { 2 * n - 1 - q }) as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_smooth(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let [d, h, w] = dims;
    let strides = [h * w, w, 1];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let st = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let pos = [z, y, x][axis] as i64;
                    let base = i - pos as usize * st;
                    let mut acc = 0.0;
                    for (j, &kv) in k.iter().enumerate() {
                        let p = mirror(pos + j as i64 - r, n);
                        acc += kv * cur[base + p * st];
                    }
                    next[i] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Smooth noise rescaled to a max magnitude of 1.
fn smooth_noise(rng: &mut ChaCha8Rng, dims: Dims, sigma: f64) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let white: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let s = gaussian_smooth(&white, dims, sigma);
    let m = s.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-12);
    s.into_iter().map(|v| v / m).collect()
}

/// Smoothed-threshold blobs: each label owns the voxels where its own
/// smoothed noise is in its top `FG_FRACTION` quantile, ties going to the
/// larger excess.
fn blob_labels(rng: &mut ChaCha8Rng, dims: Dims, n_labels: usize) -> Result<LabelMap> {
    const FG_FRACTION: f64 = 0.09;
    let sigma = (dims.iter().copied().min().unwrap() as f64 / 16.0).max(1.0);
    for _ in 0..32 {
        let fields: Vec<(Vec<f64>, f64)> = (0..n_labels)
            .map(|_| {
                let f = smooth_noise(rng, dims, sigma);
                let mut sorted = f.clone();
                sorted.sort_unstable_by(f64::total_cmp);
                let cut = sorted[((1.0 - FG_FRACTION) * (sorted.len() - 1) as f64) as usize];
                (f, cut)
            })
            .collect();
        let [_, h, w] = dims;
        let labels = LabelMap::from_fn(dims, [1.0; 3], |z, y, x| {
            let i = (z * h + y) * w + x;
            let mut best = (0u32, 0.0);
            for (l, (f, cut)) in fields.iter().enumerate() {
                let excess = f[i] - cut;
                if excess > best.1 {
                    best = (l as u32 + 1, excess);
                }
            }
            best.0
        })?;
        if labels.foreground_labels().len() == n_labels {
            return Ok(labels);
        }
    }
    Err(Error::Invalid(format!("could not place {n_labels} labels in {dims:?}")))
}

/// Per-label lookup, multiplicative bias field and additive noise.
fn render(rng: &mut ChaCha8Rng, labels: &LabelMap, table: &[f64], noise_std: f64) -> Result<Volume<f32>> {
    let dims = labels.dims();
    let sigma = dims.iter().copied().min().unwrap() as f64 / 4.0;
    let bias = smooth_noise(rng, dims, sigma);
    let normal = Normal::new(0.0, noise_std).unwrap();
    let data: Vec<f32> = labels
        .data()
        .iter()
        .zip(&bias)
        .map(|(&l, &b)| (table[l as usize] * (1.0 + 0.15 * b) + normal.sample(rng)) as f32)
        .collect();
    Volume::new(Tensor::from_vec(&dims, data)?, labels.spacing())
}

/// Intensity tables for both modalities: A rises with the label draw, B is
/// its inverse on the foreground, with a dark background in both.
fn modality_tables(rng: &mut ChaCha8Rng, n_labels: usize) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = std::iter::once(0.0).chain((0..n_labels).map(|_| rng.gen_range(0.3..1.0))).collect();
    let b: Vec<f64> = a
        .iter()
        .enumerate()
        .map(|(l, &v)| if l == 0 { 0.0 } else { (1.0 - v + 0.2 * rng.gen_range(-0.5..0.5)).clamp(0.05, 1.0) })
        .collect();
    (a, b)
}

/// Max over voxels of the row-sum norm of the finite-difference gradient,
/// using the same stencil as the Jacobian determinant.
fn gradient_norm(comp: &[Vec<f64>; 3], dims: Dims) -> f64 {
    let [d, h, w] = dims;
    let diff = |c: &[f64], z: usize, y: usize, x: usize, axis: usize| -> f64 {
        let p = [z, y, x];
        let n = dims[axis];
        if n < 2 {
            return 0.0;
        }
        let at = |q: usize| {
            let mut r = p;
            r[axis] = q;
            c[(r[0] * h + r[1]) * w + r[2]]
        };
        let i = p[axis];
        if i == 0 {
            at(1) - at(0)
        } else if i == n - 1 {
            at(n - 1) - at(n - 2)
        } else {
            (at(i + 1) - at(i - 1)) / 2.0
        }
    };
    let mut worst: f64 = 0.0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                for c in comp {
                    let row: f64 = (0..3).map(|a| diff(c, z, y, x, a).abs()).sum();
                    worst = worst.max(row);
                }
            }
        }
    }
    worst
}

fn smooth_field(rng: &mut ChaCha8Rng, dims: Dims, max_disp: f64) -> Result<DisplacementField<f32>> {
    let sigma = dims.iter().copied().min().unwrap() as f64 / 4.0;
    let mut comp = [0, 1, 2].map(|_| smooth_noise(rng, dims, sigma));
    let n = comp[0].len();
    let peak = (0..n).map(|i| comp.iter().map(|c| c[i] * c[i]).sum::<f64>()).fold(0.0, f64::max).sqrt().max(1e-12);
    for c in comp.iter_mut() {
        c.iter_mut().for_each(|v| *v *= max_disp / peak);
    }
    let g = gradient_norm(&comp, dims);
    if g > GRADIENT_BOUND {
        let s = GRADIENT_BOUND / g;
        for c in comp.iter_mut() {
            c.iter_mut().for_each(|v| *v *= s);
        }
    }
    let data: Vec<f32> = comp.iter().flatten().map(|&v| v as f32).collect();
    DisplacementField::new(Tensor::from_vec(&[3, dims[0], dims[1], dims[2]], data)?, [1.0; 3])
}

pub fn gen_pair(shape: Dims, n_labels: usize, max_disp: f64, seed: u64) -> Result<SynthPair> {
    check_divisible(shape)?;
    if n_labels < 2 {
        return Err(Error::Invalid(format!("need at least 2 labels, got {n_labels}")));
    }
    if !(max_disp >= 0.0 && max_disp.is_finite()) {
        return Err(Error::Invalid(format!("max_disp must be >= 0, got {max_disp}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixed_labels = blob_labels(&mut rng, shape, n_labels)?;
    let (ta, tb) = modality_tables(&mut rng, n_labels);
    let fixed = render(&mut rng, &fixed_labels, &ta, 0.02)?;
    let gt_field = if max_disp == 0.0 {
        DisplacementField::zeros(shape, [1.0; 3])
    } else {
        smooth_field(&mut rng, shape, max_disp)?
    };
    let moving_labels = warp_labels_nearest(&fixed_labels, &gt_field)?;
    let moving = render(&mut rng, &moving_labels, &tb, 0.02)?;
    Ok(SynthPair {
        fixed,
        moving,
        fixed_labels,
        moving_labels,
        gt_field,
        seed,
    })
}

/// Fixed-point inverse: `ψ(x) = −g(x + ψ(x))`.
pub fn approx_inverse(g: &DisplacementField<f32>, iterations: usize) -> Result<DisplacementField<f32>> {
    let gt = g.tensor().cast::<f64>();
    let neg = gt.map(|v| -v);
    let mut psi = neg.clone();
    for _ in 0..iterations {
        psi = warp_tensor(&neg, &psi)?;
    }
    DisplacementField::new(psi.cast(), g.spacing())
}

/// Relative residual of the best affine fit `b ≈ α·a + β`, in units of the
/// standard deviation of `b`.
pub fn linear_fit_residual(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if sbb == 0.0 {
        return 0.0;
    }
    let r2 = if saa == 0.0 { 0.0 } else { sab * sab / (saa * sbb) };
    (1.0 - r2).max(0.0).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub fixed_labels: PathBuf,
    pub moving_labels: PathBuf,
    pub gt_field: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub pairs: Vec<PairEntry>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

/// Generation settings not carried by the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_labels: usize,
    pub max_disp: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { n_labels: 4, max_disp: 4.0 }
    }
}

fn pair_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

pub fn gen_dataset(n_pairs: usize, shape: Dims, seed: u64, gen: &GenConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    check_divisible(shape)?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let entries: Vec<Result<PairEntry>> = pair_seeds(seed, n_pairs)
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| {
            let p = gen_pair(shape, gen.n_labels, gen.max_disp, s)?;
            let rel = PathBuf::from(format!("pair_{i:03}"));
            let dir = out.join(&rel);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let e = PairEntry {
                fixed: rel.join("fixed.json"),
                moving: rel.join("moving.json"),
                fixed_labels: rel.join("fixed_labels.json"),
                moving_labels: rel.join("moving_labels.json"),
                gt_field: rel.join("gt_field.json"),
                seed: s,
            };
            save_volume(&p.fixed, out.join(&e.fixed))?;
            save_volume(&p.moving, out.join(&e.moving))?;
            save_labels(&p.fixed_labels, out.join(&e.fixed_labels))?;
            save_labels(&p.moving_labels, out.join(&e.moving_labels))?;
            save_field(&p.gt_field, out.join(&e.gt_field))?;
            Ok(e)
        })
        .collect();
    let manifest = DatasetManifest {
        pairs: entries.into_iter().collect::<Result<_>>()?,
    };
    let path = out.join(DATASET_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("dataset manifest", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset on disk: the manifest and the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Accepts the manifest file or the directory holding it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(DATASET_MANIFEST) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(file.display().to_string(), e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { root, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.pairs.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<SynthPair> {
        let e = self
            .manifest
            .pairs
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("pair {i} out of range ({} pairs)", self.len())))?;
        let r = |p: &Path| self.root.join(p);
        Ok(SynthPair {
            fixed: load_volume(r(&e.fixed))?,
            moving: load_volume(r(&e.moving))?,
            fixed_labels: load_labels(r(&e.fixed_labels))?,
            moving_labels: load_labels(r(&e.moving_labels))?,
            gt_field: load_field(r(&e.gt_field))?,
            seed: e.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{dice, folding_pct};

    #[test]
    fn zero_displacement_keeps_labels() {
        let p = gen_pair([16, 16, 16], 3, 0.0, 5).unwrap();
        assert_eq!(p.moving_labels, p.fixed_labels);
        assert!(p.gt_field.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(p.fixed_labels.foreground_labels(), vec![1, 2, 3]);
    }

    #[test]
    fn fields_are_fold_free_and_bounded() {
        for seed in 0..4 {
            let p = gen_pair([32, 32, 32], 3, 6.0, seed).unwrap();
            assert_eq!(folding_pct(&p.gt_field).unwrap(), 0.0);
            assert!(p.gt_field.tensor().max_abs() <= 6.0 + 1e-5);
            assert!(p.gt_field.tensor().max_abs() > 0.1);
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let s = gaussian_smooth(&[2.0; 64], [4, 4, 4], 1.5);
        assert!(s.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn modalities_are_not_linearly_related() {
        let p = gen_pair([32, 32, 32], 4, 0.0, 9).unwrap();
        assert!(linear_fit_residual(p.fixed.data(), p.moving.data()) > 0.3);
        assert!(linear_fit_residual(p.fixed.data(), p.fixed.data()) < 1e-3);
    }

    #[test]
    fn inverse_recovers_fixed_labels() {
        let p = gen_pair([32, 32, 32], 3, 3.0, 2).unwrap();
        let inv = approx_inverse(&p.gt_field, 10).unwrap();
        let back = warp_labels_nearest(&p.moving_labels, &inv).unwrap();
        let d = dice(&back, &p.fixed_labels, &[1, 2, 3]).unwrap();
        assert!(d.values().all(|&v| v >= 0.9), "{d:?}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_pair([16, 16, 20], 3, 1.0, 0).is_err());
        assert!(gen_pair([16, 16, 16], 1, 1.0, 0).is_err());
        assert!(gen_pair([16, 16, 16], 2, -1.0, 0).is_err());
    }
}
