//! Overlap, boundary-distance and folding metrics.
//!
//! Surfaces use 6-connectivity: a mask voxel is on the surface when any
//! face neighbour is outside the mask or outside the grid. HD95 pools the
//! two directed surface-distance sets before taking the percentile.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{DisplacementField, Dims, LabelMap, Spacing};
use crate::warp::jacobian_determinant;

fn same_grid(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("label maps {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-label Dice `2|A∩B| / (|A|+|B|)`; 1 when both are empty.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: &[u32]) -> Result<BTreeMap<u32, f64>> {
    same_grid(a, b)?;
    let mut out = BTreeMap::new();
    for &l in labels {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (ia, ib) = (x == l, y == l);
            na += ia as usize;
            nb += ib as usize;
            both += (ia && ib) as usize;
        }
        let d = if na + nb == 0 {
            1.0
        } else {
            2.0 * both as f64 / (na + nb) as f64
        };
        out.insert(l, d);
    }
    Ok(out)
}

/// Flat indices of the 6-connected surface of `mask`.
pub fn surface_voxels(mask: &[bool], dims: Dims) -> Vec<usize> {
    let [d, h, w] = dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z == d - 1 || y == h - 1 || x == w - 1;
                if border
                    || !mask[i - 1]
                    || !mask[i + 1]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas)
/// on samples spaced `s` apart. `f` holds squared distances or +inf.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = q as f64 * s;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let xp = p as f64 * s;
                    let inter = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if inter <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(inter);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = q as f64 * s;
        while k + 1 < v.len() && z[k + 1] < xq {
            k += 1;
        }
        let dx = xq - v[k] as f64 * s;
        *o = dx * dx + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest seed.
fn squared_edt(seeds: &[usize], dims: Dims, spacing: Spacing) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g = vec![f64::INFINITY; d * h * w];
    for &i in seeds {
        g[i] = 0.0;
    }
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        for start in 0..d * h * w {
            // visit each line once, from its first element
            let coord = (start / stride) % n;
            if coord != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = g[start + k * stride];
            }
            edt_1d(&line, spacing[axis], &mut res);
            for (k, r) in res.iter().enumerate() {
                g[start + k * stride] = *r;
            }
        }
    }
    g
}

/// Linear-interpolated percentile of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95th percentile of pooled symmetric surface distances in mm.
pub fn hd95(a: &LabelMap, b: &LabelMap, label: u32, spacing: Spacing) -> Result<f64> {
    same_grid(a, b)?;
    let dims = a.dims();
    let ma: Vec<bool> = a.data().iter().map(|&v| v == label).collect();
    let mb: Vec<bool> = b.data().iter().map(|&v| v == label).collect();
    if !ma.iter().any(|&v| v) || !mb.iter().any(|&v| v) {
        return Err(Error::MissingLabel(label));
    }
    let sa = surface_voxels(&ma, dims);
    let sb = surface_voxels(&mb, dims);
    let da = squared_edt(&sa, dims, spacing);
    let db = squared_edt(&sb, dims, spacing);
    let mut pooled: Vec<f64> = sa.iter().map(|&i| db[i].sqrt()).chain(sb.iter().map(|&i| da[i].sqrt())).collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(percentile_sorted(&pooled, 95.0))
}

/// Percentage of voxels whose Jacobian determinant is ≤ 0.
pub fn folding_pct<T: Scalar>(u: &DisplacementField<T>) -> Result<f64> {
    let j = jacobian_determinant(u)?;
    Ok(100.0 * j.non_positive() as f64 / j.data().len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelScore {
    pub dice: f64,
    /// `None` when the label is absent from one of the maps.
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_label: BTreeMap<u32, LabelScore>,
    pub mean_dice: f64,
    pub mean_hd95: f64,
    pub folding_pct: f64,
}

impl MetricReport {
    pub fn per_label_dice(&self) -> BTreeMap<u32, f64> {
        self.per_label.iter().map(|(&l, s)| (l, s.dice)).collect()
    }

    /// Writes `pair_id,label,dice,hd95_mm,folding_pct` rows: one per label,
    /// then a `summary` row carrying the means and the folding percentage.
    /// Undefined distances are written as `error:missing_label`.
    pub fn write_csv<W: Write>(&self, w: &mut csv::Writer<W>, pair_id: &str) -> Result<()> {
        for (l, s) in &self.per_label {
            let hd = s.hd95.map_or_else(|| "error:missing_label".to_string(), |v| format!("{v}"));
            w.write_record([pair_id, &l.to_string(), &format!("{}", s.dice), &hd, ""])?;
        }
        w.write_record([
            pair_id,
            "summary",
            &format!("{}", self.mean_dice),
            &format!("{}", self.mean_hd95),
            &format!("{}", self.folding_pct),
        ])?;
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 5] = ["pair_id", "label", "dice", "hd95_mm", "folding_pct"];
}

/// Scores `pred` against `target` over `labels` (default: foreground labels
/// of either map). Folding is 0 when no field is given.
pub fn evaluate<T: Scalar>(
    pred: &LabelMap,
    target: &LabelMap,
    field: Option<&DisplacementField<T>>,
    labels: Option<&[u32]>,
) -> Result<MetricReport> {
    same_grid(pred, target)?;
    let labels: Vec<u32> = match labels {
        Some(l) => l.to_vec(),
        None => {
            let mut l = pred.foreground_labels();
            l.extend(target.foreground_labels());
            l.sort_unstable();
            l.dedup();
            l
        }
    };
    let dices = dice(pred, target, &labels)?;
    let mut per_label = BTreeMap::new();
    for &l in &labels {
        let hd = match hd95(pred, target, l, target.spacing()) {
            Ok(v) => Some(v),
            Err(Error::MissingLabel(_)) => None,
            Err(e) => return Err(e),
        };
        per_label.insert(l, LabelScore { dice: dices[&l], hd95: hd });
    }
    let n = per_label.len().max(1) as f64;
    let mean_dice = per_label.values().map(|s| s.dice).sum::<f64>() / n;
    let hds: Vec<f64> = per_label.values().filter_map(|s| s.hd95).collect();
    let mean_hd95 = if hds.is_empty() { 0.0 } else { hds.iter().sum::<f64>() / hds.len() as f64 };
    let folding_pct = match field {
        Some(u) => folding_pct(u)?,
        None => 0.0,
    };
    Ok(MetricReport {
        per_label,
        mean_dice,
        mean_hd95,
        folding_pct,
    })
}
