//! Separable trilinear ×2 upsampling with half-pixel centers.

use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps `(i0, i1, w1)` for output index `o` when doubling an axis of length `n`.
fn taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

/// Doubles `axis` (1, 2 or 3) of a `(C, D, H, W)` buffer.
fn up_axis<T: Scalar>(src: &[T], shape: [usize; 4], axis: usize) -> (Vec<T>, [usize; 4]) {
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut oshape = shape;
    oshape[axis] = 2 * n;
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        for i in 0..2 * n {
            let (i0, i1, w1) = taps(i, n);
            let (w1, w0) = (T::lit(w1), T::lit(1.0 - w1));
            let a = &src[(o * n + i0) * inner..(o * n + i0 + 1) * inner];
            let b = &src[(o * n + i1) * inner..(o * n + i1 + 1) * inner];
            let dst = &mut out[(o * 2 * n + i) * inner..(o * 2 * n + i + 1) * inner];
            for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *d = x * w0 + y * w1;
            }
        }
    }
    (out, oshape)
}

/// Transpose of [`up_axis`]: folds a doubled axis back onto `shape`.
fn up_axis_t<T: Scalar>(g: &[T], shape: [usize; 4], axis: usize) -> Vec<T> {
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        for i in 0..2 * n {
            let (i0, i1, w1) = taps(i, n);
            let (w1, w0) = (T::lit(w1), T::lit(1.0 - w1));
            let src = &g[(o * 2 * n + i) * inner..(o * 2 * n + i + 1) * inner];
            for (j, &gv) in src.iter().enumerate() {
                out[(o * n + i0) * inner + j] += gv * w0;
                out[(o * n + i1) * inner + j] += gv * w1;
            }
        }
    }
    out
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "upsample expects (C, D, H, W), got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut shape = dims4(x.shape());
    let mut data = x.data().to_vec();
    for axis in 1..4 {
        let (d, s) = up_axis(&data, shape, axis);
        data = d;
        shape = s;
    }
    Tensor::from_vec(&shape, data).unwrap()
}

impl<T: Scalar> Graph<T> {
    /// Trilinear ×2 upsampling of every channel of `(C, D, H, W)`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let in_shape = dims4(self.shape(x));
        let out = upsample2_forward(self.value(x));
        self.custom(out, &[x], move |g, _| {
            let mut shapes = [in_shape; 3];
            for axis in 1..3 {
                shapes[axis] = shapes[axis - 1];
                shapes[axis][axis] *= 2;
            }
            let mut data = g.data().to_vec();
            for axis in (1..4).rev() {
                data = up_axis_t(&data, shapes[axis - 1], axis);
            }
            vec![Some(Tensor::from_vec(&in_shape, data).unwrap())]
        })
    }
}
