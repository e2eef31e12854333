//! Scaled dot-product attention with grouped key/value heads.

use super::{Graph, Var};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

fn head_slice<T: Scalar>(src: &[T], l: usize, width: usize, off: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(l * hd);
    for t in 0..l {
        out.extend_from_slice(&src[t * width + off..t * width + off + hd]);
    }
    out
}

fn head_add<T: Scalar>(dst: &mut [T], l: usize, width: usize, off: usize, hd: usize, src: &[T]) {
    for t in 0..l {
        for i in 0..hd {
            dst[t * width + off + i] += src[t * hd + i];
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// `q (L, heads·hd)`, `k`/`v (L, kv_heads·hd)`; query head `h` reads
    /// key/value group `h / (heads / kv_heads)`. Output `(L, heads·hd)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, kv_heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value_arc(q), self.value_arc(k), self.value_arc(v));
        let l = qv.shape()[0];
        let qw = qv.shape()[1];
        let kw = kv.shape()[1];
        assert_eq!(qw % heads, 0, "attention: query width vs heads");
        let hd = qw / heads;
        assert_eq!(kw, kv_heads * hd, "attention: key width vs kv heads");
        assert_eq!(vv.shape(), kv.shape(), "attention: key/value shape");
        assert_eq!(heads % kv_heads, 0, "attention: heads not a multiple of kv heads");
        let group = heads / kv_heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();

        let mut out = vec![T::zero(); l * qw];
        let mut probs: Vec<Vec<T>> = Vec::with_capacity(heads);
        for h in 0..heads {
            let kvh = h / group;
            let qh = head_slice(qv.data(), l, qw, h * hd, hd);
            let kh = head_slice(kv.data(), l, kw, kvh * hd, hd);
            let vh = head_slice(vv.data(), l, kw, kvh * hd, hd);
            let mut s = vec![T::zero(); l * l];
            gemm(false, true, l, l, hd, scale, &qh, &kh, T::zero(), &mut s);
            for i in 0..l {
                let row = &mut s[i * l..(i + 1) * l];
                let lim = if causal { i + 1 } else { l };
                let m = row[..lim].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut z = T::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if j < lim { (*x - m).exp() } else { T::zero() };
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            let mut oh = vec![T::zero(); l * hd];
            gemm(false, false, l, hd, l, T::one(), &s, &vh, T::zero(), &mut oh);
            head_add(&mut out, l, qw, h * hd, hd, &oh);
            probs.push(s);
        }
        let value = Tensor::from_vec(&[l, qw], out).unwrap();
        self.custom(value, &[q, k, v], move |g, _need| {
            let mut dq = vec![T::zero(); l * qw];
            let mut dk = vec![T::zero(); l * kw];
            let mut dv = vec![T::zero(); l * kw];
            for (h, p) in probs.iter().enumerate() {
                let kvh = h / group;
                let qh = head_slice(qv.data(), l, qw, h * hd, hd);
                let kh = head_slice(kv.data(), l, kw, kvh * hd, hd);
                let vh = head_slice(vv.data(), l, kw, kvh * hd, hd);
                let go = head_slice(g.data(), l, qw, h * hd, hd);
                // dV = Pᵀ dO
                let mut dvh = vec![T::zero(); l * hd];
                gemm(true, false, l, hd, l, T::one(), p, &go, T::zero(), &mut dvh);
                head_add(&mut dv, l, kw, kvh * hd, hd, &dvh);
                // dP = dO Vᵀ, dS = P ⊙ (dP − rowsum(dP ⊙ P))
                let mut ds = vec![T::zero(); l * l];
                gemm(false, true, l, l, hd, T::one(), &go, &vh, T::zero(), &mut ds);
                for i in 0..l {
                    let row = &mut ds[i * l..(i + 1) * l];
                    let prow = &p[i * l..(i + 1) * l];
                    let dot: T = row.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in row.iter_mut().zip(prow) {
                        *x = pv * (*x - dot);
                    }
                }
                let mut dqh = vec![T::zero(); l * hd];
                gemm(false, false, l, hd, l, scale, &ds, &kh, T::zero(), &mut dqh);
                head_add(&mut dq, l, qw, h * hd, hd, &dqh);
                let mut dkh = vec![T::zero(); l * hd];
                gemm(true, false, l, hd, l, scale, &ds, &qh, T::zero(), &mut dkh);
                head_add(&mut dk, l, kw, kvh * hd, hd, &dkh);
            }
            vec![
                Some(Tensor::from_vec(&[l, qw], dq).unwrap()),
                Some(Tensor::from_vec(&[l, kw], dk).unwrap()),
                Some(Tensor::from_vec(&[l, kw], dv).unwrap()),
            ]
        })
    }
}
