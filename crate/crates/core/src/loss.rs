//! Soft Dice on warped one-hot segmentations plus a λ-weighted smoothness
//! penalty on the displacement field.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

fn check_onehot(w: &[usize], t: &[usize]) -> Result<()> {
    if w != t || w.len() != 4 {
        return Err(Error::Shape(format!("one-hot stacks must share a (K, D, H, W) shape: {w:?} vs {t:?}")));
    }
    Ok(())
}

fn check_field(s: &[usize]) -> Result<()> {
    if s.len() != 4 || s[0] != 3 || s[1..].iter().any(|&n| n < 2) {
        return Err(Error::Shape(format!("smoothness needs a (3, D, H, W) field with every dim >= 2, got {s:?}")));
    }
    Ok(())
}

/// Per-channel `(Σ w·t, Σ w + Σ t)`.
fn dice_sums<T: Scalar>(w: &Tensor<T>, t: &Tensor<T>) -> Vec<(f64, f64)> {
    let k = w.shape()[0];
    let n = w.len() / k;
    (0..k)
        .map(|c| {
            let (ws, ts) = (&w.data()[c * n..(c + 1) * n], &t.data()[c * n..(c + 1) * n]);
            let mut inter = 0.0;
            let mut total = 0.0;
            for (&a, &b) in ws.iter().zip(ts) {
                let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
                inter += a * b;
                total += a + b;
            }
            (inter, total)
        })
        .collect()
}

fn dice_from_sums(sums: &[(f64, f64)]) -> f64 {
    let mean: f64 = sums.iter().map(|&(i, s)| (2.0 * i + DICE_EPS) / (s + DICE_EPS)).sum::<f64>() / sums.len() as f64;
    1.0 - mean
}

/// `1 − mean_k (2Σ w_k t_k + ε) / (Σ w_k + Σ t_k + ε)` over all K channels.
pub fn soft_dice_loss<T: Scalar>(warped: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_onehot(warped.shape(), target.shape())?;
    Ok(dice_from_sums(&dice_sums(warped, target)))
}

/// Mean over axes, components and voxels of squared forward differences.
pub fn grad_l2<T: Scalar>(u: &Tensor<T>) -> Result<f64> {
    check_field(u.shape())?;
    let s = u.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let data = u.data();
    let mut acc = 0.0;
    for (axis, stride) in [(0usize, h * w), (1, w), (2, 1)] {
        let ext = [d, h, w];
        let count = 3 * ext.iter().enumerate().map(|(a, &e)| if a == axis { e - 1 } else { e }).product::<usize>();
        let mut sum = 0.0;
        for_each_pair(3, [d, h, w], axis, |i| {
            let diff = (data[i + stride] - data[i]).to_f64_lossy();
            sum += diff * diff;
        });
        acc += sum / count as f64;
    }
    Ok(acc / 3.0)
}

/// Visits every flat index `i` whose successor along `axis` is in bounds.
fn for_each_pair(channels: usize, dims: [usize; 3], axis: usize, mut f: impl FnMut(usize)) {
    let [d, h, w] = dims;
    for c in 0..channels {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let edge = match axis {
                        0 => z + 1 == d,
                        1 => y + 1 == h,
                        _ => x + 1 == w,
                    };
                    if !edge {
                        f(((c * d + z) * h + y) * w + x);
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn soft_dice_loss(&mut self, warped: Var, target: Var) -> Result<Var> {
        check_onehot(self.shape(warped), self.shape(target))?;
        let (wv, tv) = (self.value_arc(warped), self.value_arc(target));
        let sums = dice_sums(&wv, &tv);
        let value = T::lit(dice_from_sums(&sums));
        Ok(self.custom(Tensor::scalar(value), &[warped, target], move |g, need| {
            let k = sums.len();
            let n = wv.len() / k;
            let gs = g.item().to_f64_lossy() / k as f64;
            let grad = |other: &Tensor<T>| {
                let mut out = Vec::with_capacity(other.len());
                for (c, &(inter, total)) in sums.iter().enumerate() {
                    let den = total + DICE_EPS;
                    let num = 2.0 * inter + DICE_EPS;
                    for &o in &other.data()[c * n..(c + 1) * n] {
                        let dd = (2.0 * o.to_f64_lossy() * den - num) / (den * den);
                        out.push(T::lit(-gs * dd));
                    }
                }
                Tensor::from_vec(wv.shape(), out).unwrap()
            };
            vec![need[0].then(|| grad(&tv)), need[1].then(|| grad(&wv))]
        }))
    }

    pub fn grad_l2(&mut self, u: Var) -> Result<Var> {
        let uv = self.value_arc(u);
        let value = T::lit(grad_l2(&uv)?);
        Ok(self.custom(Tensor::scalar(value), &[u], move |g, _| {
            let s = uv.shape();
            let (d, h, w) = (s[1], s[2], s[3]);
            let data = uv.data();
            let gs = g.item().to_f64_lossy();
            let mut out = vec![T::zero(); uv.len()];
            for (axis, stride) in [(0usize, h * w), (1, w), (2, 1)] {
                let ext = [d, h, w];
                let count = 3 * ext.iter().enumerate().map(|(a, &e)| if a == axis { e - 1 } else { e }).product::<usize>();
                let coef = gs * 2.0 / (3.0 * count as f64);
                for_each_pair(3, ext, axis, |i| {
                    let diff = T::lit(coef) * (data[i + stride] - data[i]);
                    out[i + stride] += diff;
                    out[i] -= diff;
                });
            }
            vec![Some(Tensor::from_vec(s, out).unwrap())]
        }))
    }

    /// `sim + λ·reg`; returns the scalar node and its parts.
    pub fn total_loss(&mut self, warped: Var, target: Var, phi: Var, lambda: f64) -> Result<(Var, LossBreakdown)> {
        let sim = self.soft_dice_loss(warped, target)?;
        let reg = self.grad_l2(phi)?;
        let weighted = self.scale(reg, T::lit(lambda));
        let total = self.add(sim, weighted);
        let part = |g: &Self, v: Var| g.value(v).item().to_f64_lossy();
        let b = LossBreakdown {
            sim: part(self, sim),
            reg: part(self, reg),
            total: part(self, total),
            lambda,
        };
        Ok((total, b))
    }
}

/// Value-level [`Graph::total_loss`].
pub fn total_loss<T: Scalar>(warped: &Tensor<T>, target: &Tensor<T>, phi: &Tensor<T>, lambda: f64) -> Result<LossBreakdown> {
    let sim = soft_dice_loss(warped, target)?;
    let reg = grad_l2(phi)?;
    Ok(LossBreakdown {
        sim,
        reg,
        total: sim + lambda * reg,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::check_grads;
    use crate::volume::LabelMap;

    fn cubes(offset: usize) -> Tensor<f64> {
        let lm = LabelMap::from_fn([8, 8, 8], [1.0; 3], |z, y, x| {
            u32::from((2..6).contains(&z) && (2..6).contains(&y) && (2 + offset..6 + offset).contains(&x))
        })
        .unwrap();
        lm.one_hot(&[1])
    }

    #[test]
    fn dice_loss_cases() {
        let a = cubes(0);
        assert!(soft_dice_loss(&a, &a).unwrap().abs() < 1e-12);
        let far = LabelMap::from_fn([8, 8, 8], [1.0; 3], |z, _, _| u32::from(z == 7)).unwrap().one_hot::<f64>(&[1]);
        assert!((soft_dice_loss(&a, &far).unwrap() - 1.0).abs() < 1e-6);
        // 4×4×4 cubes shifted by two voxels share half their volume.
        assert!((soft_dice_loss(&a, &cubes(2)).unwrap() - 0.5).abs() < 1e-6);
        let ab = soft_dice_loss(&a, &cubes(1)).unwrap();
        assert_eq!(ab, soft_dice_loss(&cubes(1), &a).unwrap());
        assert!(soft_dice_loss(&a, &Tensor::zeros(&[2, 8, 8, 8])).is_err());
    }

    #[test]
    fn smoothness_closed_forms() {
        let zero = Tensor::<f64>::zeros(&[3, 4, 5, 6]);
        assert_eq!(grad_l2(&zero).unwrap(), 0.0);
        let c = Tensor::<f64>::full(&[3, 4, 5, 6], 2.5);
        assert_eq!(grad_l2(&c).unwrap(), 0.0);
        let n = 4 * 5 * 6;
        let ramp = Tensor::<f64>::from_fn(&[3, 4, 5, 6], |i| if i >= 2 * n { (i % 6) as f64 } else { 0.0 });
        assert!((grad_l2(&ramp).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        let shifted = ramp.map(|v| v + 7.0);
        assert!((grad_l2(&shifted).unwrap() - 1.0 / 9.0).abs() < 1e-12);
        assert!(grad_l2(&Tensor::<f64>::zeros(&[3, 1, 5, 6])).is_err());
    }

    #[test]
    fn total_is_sim_plus_weighted_reg() {
        let a = cubes(0);
        let phi = Tensor::<f64>::from_fn(&[3, 8, 8, 8], |i| (i as f64 * 0.01).sin());
        let b = total_loss(&a, &cubes(1), &phi, DEFAULT_LAMBDA).unwrap();
        assert!((b.total - (b.sim + 0.1 * b.reg)).abs() < 1e-12);
        let z = total_loss(&a, &a, &Tensor::zeros(&[3, 8, 8, 8]), 0.1).unwrap();
        assert!(z.total.abs() < 1e-12);
        let s = total_loss(&a, &cubes(1), &phi, 0.0).unwrap();
        assert_eq!(s.total, s.sim);
    }

    #[test]
    fn graph_losses_match_values_and_gradients() {
        let w = Tensor::from_fn(&[2, 3, 3, 4], |i| 0.5 + 0.4 * (i as f64 * 0.9).sin());
        let t = Tensor::from_fn(&[2, 3, 3, 4], |i| 0.5 + 0.4 * (i as f64 * 0.4).cos());
        let u = Tensor::from_fn(&[3, 3, 3, 4], |i| (i as f64 * 0.3).sin());
        let mut g = Graph::new();
        let (wv, tv, uv) = (g.constant(w.clone()), g.constant(t.clone()), g.constant(u.clone()));
        let (_, b) = g.total_loss(wv, tv, uv, 0.3).unwrap();
        let want = total_loss(&w, &t, &u, 0.3).unwrap();
        assert_eq!(b, want);
        let err = check_grads(&[w, t, u], |g, v| g.total_loss(v[0], v[1], v[2], 0.3).unwrap().0);
        assert!(err < 1e-6, "{err}");
    }
}
