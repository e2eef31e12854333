//! Elementwise, reduction, layout, linear and normalization ops.

use std::sync::Arc;

use super::{Graph, Var};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Which axis a per-channel normalization reduces over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxes {
    /// `(C, ...)` grids: each channel normalized over its spatial extent.
    ChannelsFirst,
    /// `(L, C)` token matrices: each channel normalized over the tokens.
    Tokens,
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(v, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(v, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        let v = va.zip_map(&vb, |x, y| x * y);
        self.custom(v, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&vb, |x, y| x * y)),
                need[1].then(|| g.zip_map(&va, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.custom(v, &[a], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let v = Tensor::scalar(self.value(a).sum());
        self.custom(v, &[a], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum of `a * w` for a constant weight tensor `w`.
    pub fn dot_const(&mut self, a: Var, w: &Tensor<T>) -> Var {
        assert_eq!(self.shape(a), w.shape(), "dot_const shape mismatch");
        let s: T = self.value(a).data().iter().zip(w.data()).map(|(&x, &y)| x * y).sum();
        let w = w.clone();
        self.custom(Tensor::scalar(s), &[a], move |g, _| vec![Some(w.scale(g.item()))])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.shape(a).to_vec();
        let v = (*self.value(a))
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        self.custom(v, &[a], move |g, _| {
            vec![Some(g.clone().reshape(&old).expect("reshape back"))]
        })
    }

    /// `out[i] = a[index[i]]`; the backward pass scatter-adds.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let src = self.value(a);
        let in_shape = src.shape().to_vec();
        let data: Vec<T> = index.iter().map(|&i| src.data()[i]).collect();
        let v = Tensor::from_vec(shape, data).expect("gather shape");
        self.custom(v, &[a], move |g, _| {
            let mut ga = Tensor::zeros(&in_shape);
            let d = ga.data_mut();
            for (&i, &gv) in index.iter().zip(g.data()) {
                d[i] += gv;
            }
            vec![Some(ga)]
        })
    }

    /// Concatenation along `axis`. All other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let base = self.shape(parts[0]).to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            assert_eq!(s.len(), base.len(), "concat rank mismatch");
            for (d, (x, y)) in s.iter().zip(&base).enumerate() {
                assert!(d == axis || x == y, "concat extent mismatch {s:?} vs {base:?}");
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                let src = self.value(*p).data();
                out.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let v = Tensor::from_vec(&shape, out).unwrap();
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.shape(*p).to_vec()).collect();
        self.custom(v, parts, move |g, need| {
            let gd = g.data();
            let mut res = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for (k, &w) in widths.iter().enumerate() {
                if need[k] {
                    let mut buf = Vec::with_capacity(outer * w * inner);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        buf.extend_from_slice(&gd[start..start + w * inner]);
                    }
                    res.push(Some(Tensor::from_vec(&part_shapes[k], buf).unwrap()));
                } else {
                    res.push(None);
                }
                offset += w;
            }
            res
        })
    }

    /// `x (L, in) · Wᵀ + b` with `W (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value_arc(x), self.value_arc(w));
        assert_eq!(xv.ndim(), 2, "linear expects (L, in) input");
        let (l, k) = (xv.shape()[0], xv.shape()[1]);
        let (n, k2) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(k, k2, "linear: input width {k} vs weight {:?}", wv.shape());
        let mut out = vec![T::zero(); l * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), n, "linear bias width");
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(false, true, l, n, k, T::one(), xv.data(), wv.data(), T::one(), &mut out);
        let v = Tensor::from_vec(&[l, n], out).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.custom(v, &parents, move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut d = vec![T::zero(); l * k];
                gemm(false, false, l, k, n, T::one(), gd, wv.data(), T::zero(), &mut d);
                Tensor::from_vec(&[l, k], d).unwrap()
            });
            let gw = need[1].then(|| {
                let mut d = vec![T::zero(); n * k];
                gemm(true, false, n, k, l, T::one(), gd, xv.data(), T::zero(), &mut d);
                Tensor::from_vec(&[n, k], d).unwrap()
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(need[2].then(|| {
                    let mut d = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(&[n], d).unwrap()
                }));
            }
            res
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let va = self.value_arc(a);
        let v = va.map(|x| if x > T::zero() { x } else { x * slope });
        self.custom(v, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |gv, x| if x > T::zero() { gv } else { gv * slope }))]
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let v = va.map(|x| x / (T::one() + (-x).exp()));
        self.custom(v, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |gv, x| {
                let s = T::one() / (T::one() + (-x).exp());
                gv * s * (T::one() + x * (T::one() - s))
            }))]
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        let v = va.map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.custom(v, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |gv, x| {
                let t = (c * (x + k * x * x * x)).tanh();
                let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                gv * half * (T::one() + t + x * dt)
            }))]
        })
    }

    /// Affine-free instance normalization (biased variance, eps 1e-5).
    pub fn instance_norm(&mut self, a: Var, axes: NormAxes) -> Var {
        let va = self.value_arc(a);
        let shape = va.shape().to_vec();
        let (groups, n, gstride, estride) = match axes {
            NormAxes::ChannelsFirst => {
                let n: usize = shape[1..].iter().product();
                (shape[0], n, n, 1)
            }
            NormAxes::Tokens => {
                assert_eq!(shape.len(), 2, "token norm expects (L, C)");
                (shape[1], shape[0], 1, shape[1])
            }
        };
        let eps = T::lit(NORM_EPS);
        let nt = T::from_usize(n).unwrap();
        let src = va.data();
        let mut y = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); groups];
        for c in 0..groups {
            let idx = |i: usize| c * gstride + i * estride;
            let mean = (0..n).map(|i| src[idx(i)]).sum::<T>() / nt;
            let var = (0..n).map(|i| (src[idx(i)] - mean).powi(2)).sum::<T>() / nt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[c] = inv;
            for i in 0..n {
                y[idx(i)] = (src[idx(i)] - mean) * inv;
            }
        }
        let yt = Arc::new(Tensor::from_vec(&shape, y).unwrap());
        let y_saved = Arc::clone(&yt);
        self.custom((*yt).clone(), &[a], move |g, _| {
            let (gd, yd) = (g.data(), y_saved.data());
            let mut dx = vec![T::zero(); gd.len()];
            for c in 0..groups {
                let idx = |i: usize| c * gstride + i * estride;
                let sg = (0..n).map(|i| gd[idx(i)]).sum::<T>();
                let sgy = (0..n).map(|i| gd[idx(i)] * yd[idx(i)]).sum::<T>();
                let inv = inv_std[c];
                for i in 0..n {
                    let j = idx(i);
                    dx[j] = inv / nt * (nt * gd[j] - sg - yd[j] * sgy);
                }
            }
            vec![Some(Tensor::from_vec(&shape, dx).unwrap())]
        })
    }

    /// Root-mean-square normalization of each row of `(L, H)` with a learned scale.
    pub fn rms_norm(&mut self, a: Var, weight: Var, eps: f64) -> Var {
        let (va, vw) = (self.value_arc(a), self.value_arc(weight));
        let (l, h) = (va.shape()[0], va.shape()[1]);
        assert_eq!(vw.len(), h, "rms_norm weight width");
        let eps = T::lit(eps);
        let ht = T::from_usize(h).unwrap();
        let mut y = vec![T::zero(); l * h];
        let mut xhat = vec![T::zero(); l * h];
        let mut rinv = vec![T::zero(); l];
        for t in 0..l {
            let row = &va.data()[t * h..(t + 1) * h];
            let ms = row.iter().map(|&x| x * x).sum::<T>() / ht;
            let r = T::one() / (ms + eps).sqrt();
            rinv[t] = r;
            for i in 0..h {
                xhat[t * h + i] = row[i] * r;
                y[t * h + i] = row[i] * r * vw.data()[i];
            }
        }
        let v = Tensor::from_vec(&[l, h], y).unwrap();
        self.custom(v, &[a, weight], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut dx = vec![T::zero(); l * h];
                for t in 0..l {
                    let mut dot = T::zero();
                    for i in 0..h {
                        dot += gd[t * h + i] * vw.data()[i] * xhat[t * h + i];
                    }
                    let m = dot / ht;
                    for i in 0..h {
                        let j = t * h + i;
                        dx[j] = rinv[t] * (gd[j] * vw.data()[i] - xhat[j] * m);
                    }
                }
                Tensor::from_vec(&[l, h], dx).unwrap()
            });
            let gw = need[1].then(|| {
                let mut dw = vec![T::zero(); h];
                for t in 0..l {
                    for i in 0..h {
                        dw[i] += gd[t * h + i] * xhat[t * h + i];
                    }
                }
                Tensor::from_vec(vw.shape(), dw).unwrap()
            });
            vec![gx, gw]
        })
    }

    /// Row-wise layer normalization with affine scale and shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (va, vg) = (self.value_arc(a), self.value_arc(gamma));
        let (l, h) = (va.shape()[0], va.shape()[1]);
        let eps = T::lit(eps);
        let ht = T::from_usize(h).unwrap();
        let vb = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); l * h];
        let mut inv = vec![T::zero(); l];
        let mut y = vec![T::zero(); l * h];
        for t in 0..l {
            let row = &va.data()[t * h..(t + 1) * h];
            let mean = row.iter().copied().sum::<T>() / ht;
            let var = row.iter().map(|&x| (x - mean).powi(2)).sum::<T>() / ht;
            let r = T::one() / (var + eps).sqrt();
            inv[t] = r;
            for i in 0..h {
                let xh = (row[i] - mean) * r;
                xhat[t * h + i] = xh;
                y[t * h + i] = xh * vg.data()[i] + vb[i];
            }
        }
        let v = Tensor::from_vec(&[l, h], y).unwrap();
        self.custom(v, &[a, gamma, beta], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut dx = vec![T::zero(); l * h];
                for t in 0..l {
                    let mut s = T::zero();
                    let mut sx = T::zero();
                    for i in 0..h {
                        let d = gd[t * h + i] * vg.data()[i];
                        s += d;
                        sx += d * xhat[t * h + i];
                    }
                    for i in 0..h {
                        let j = t * h + i;
                        let d = gd[j] * vg.data()[i];
                        dx[j] = inv[t] / ht * (ht * d - s - xhat[j] * sx);
                    }
                }
                Tensor::from_vec(&[l, h], dx).unwrap()
            });
            let mut dgam = vec![T::zero(); h];
            let mut dbet = vec![T::zero(); h];
            for t in 0..l {
                for i in 0..h {
                    dgam[i] += gd[t * h + i] * xhat[t * h + i];
                    dbet[i] += gd[t * h + i];
                }
            }
            vec![
                gx,
                need[1].then(|| Tensor::from_vec(&[h], dgam).unwrap()),
                need[2].then(|| Tensor::from_vec(&[h], dbet).unwrap()),
            ]
        })
    }

    /// Rotary position embedding over the row index of `(L, heads·head_dim)`,
    /// rotating dimension `i` with `i + head_dim/2` inside every head.
    pub fn rope(&mut self, a: Var, heads: usize, theta: f64) -> Var {
        let va = self.value(a);
        let (l, width) = (va.shape()[0], va.shape()[1]);
        assert_eq!(width % heads, 0, "rope: width not divisible by heads");
        let hd = width / heads;
        assert_eq!(hd % 2, 0, "rope: odd head dim");
        let half = hd / 2;
        let mut cos = vec![T::zero(); l * half];
        let mut sin = vec![T::zero(); l * half];
        for p in 0..l {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / hd as f64);
                let ang = p as f64 * freq;
                cos[p * half + i] = T::lit(ang.cos());
                sin[p * half + i] = T::lit(ang.sin());
            }
        }
        let rotate = move |src: &[T], inverse: bool| {
            let mut out = vec![T::zero(); src.len()];
            for p in 0..l {
                for h in 0..heads {
                    let base = p * width + h * hd;
                    for i in 0..half {
                        let (c, s) = (cos[p * half + i], sin[p * half + i]);
                        let s = if inverse { -s } else { s };
                        let (x1, x2) = (src[base + i], src[base + i + half]);
                        out[base + i] = x1 * c - x2 * s;
                        out[base + i + half] = x2 * c + x1 * s;
                    }
                }
            }
            out
        };
        let v = Tensor::from_vec(&[l, width], rotate(va.data(), false)).unwrap();
        self.custom(v, &[a], move |g, _| {
            vec![Some(Tensor::from_vec(&[l, width], rotate(g.data(), true)).unwrap())]
        })
    }
}
