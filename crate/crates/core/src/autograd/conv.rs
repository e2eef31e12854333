//! 3×3×3 convolution with zero padding 1 and stride 1 or 2, via per-slice im2col + GEMM.

use std::sync::Arc;

use rayon::prelude::*;

use super::{Graph, Var};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

const KSIZE: usize = 3;
const TAPS: usize = KSIZE * KSIZE * KSIZE;
// Fixed slice grouping keeps reductions identical regardless of thread count.
const SLICES_PER_TASK: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dShape {
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub stride: usize,
}

impl Conv3dShape {
    pub fn out_dims(&self) -> [usize; 3] {
        self.dims.map(|n| (n + 2 - KSIZE) / self.stride + 1)
    }

    fn k(&self) -> usize {
        self.cin * TAPS
    }

    fn plane(&self) -> usize {
        let [_, ho, wo] = self.out_dims();
        ho * wo
    }

    /// Fills `col` (K × Ho·Wo) with the receptive fields of output slice `oz`.
    fn im2col<T: Scalar>(&self, x: &[T], oz: usize, col: &mut [T]) {
        let [d, h, w] = self.dims;
        let [_, ho, wo] = self.out_dims();
        let s = self.stride;
        let plane = ho * wo;
        for ci in 0..self.cin {
            for kz in 0..KSIZE {
                let iz = (oz * s + kz) as isize - 1;
                for ky in 0..KSIZE {
                    for kx in 0..KSIZE {
                        let row = ((ci * KSIZE + kz) * KSIZE + ky) * KSIZE + kx;
                        let dst = &mut col[row * plane..(row + 1) * plane];
                        if iz < 0 || iz >= d as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let zbase = (ci * d + iz as usize) * h * w;
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - 1;
                            let drow = &mut dst[oy * wo..(oy + 1) * wo];
                            if iy < 0 || iy >= h as isize {
                                drow.fill(T::zero());
                                continue;
                            }
                            let ybase = zbase + iy as usize * w;
                            for (ox, o) in drow.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - 1;
                                *o = if ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    x[ybase + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the input-shaped buffer `dx`.
    fn col2im_add<T: Scalar>(&self, col: &[T], oz: usize, dx: &mut [T]) {
        let [d, h, w] = self.dims;
        let [_, ho, wo] = self.out_dims();
        let s = self.stride;
        let plane = ho * wo;
        for ci in 0..self.cin {
            for kz in 0..KSIZE {
                let iz = (oz * s + kz) as isize - 1;
                if iz < 0 || iz >= d as isize {
                    continue;
                }
                let zbase = (ci * d + iz as usize) * h * w;
                for ky in 0..KSIZE {
                    for kx in 0..KSIZE {
                        let row = ((ci * KSIZE + kz) * KSIZE + ky) * KSIZE + kx;
                        let src = &col[row * plane..(row + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let ybase = zbase + iy as usize * w;
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - 1;
                                if ix >= 0 && ix < w as isize {
                                    dx[ybase + ix as usize] += src[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Plain forward convolution. `x (Cin, D, H, W)`, `w (Cout, Cin, 3, 3, 3)`.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize) -> Tensor<T> {
    let cs = shape_of(x, w, stride);
    let [dout, ho, wo] = cs.out_dims();
    let plane = cs.plane();
    let k = cs.k();
    let slices: Vec<Vec<T>> = (0..dout)
        .into_par_iter()
        .map_init(
            || vec![T::zero(); k * plane],
            |col, oz| {
                cs.im2col(x.data(), oz, col);
                let mut out = vec![T::zero(); cs.cout * plane];
                if let Some(b) = b {
                    for (co, row) in out.chunks_mut(plane).enumerate() {
                        row.fill(b.data()[co]);
                    }
                }
                gemm(false, false, cs.cout, plane, k, T::one(), w.data(), col, T::one(), &mut out);
                out
            },
        )
        .collect();
    let mut out = vec![T::zero(); cs.cout * dout * plane];
    for (oz, s) in slices.iter().enumerate() {
        for co in 0..cs.cout {
            let dst = (co * dout + oz) * plane;
            out[dst..dst + plane].copy_from_slice(&s[co * plane..(co + 1) * plane]);
        }
    }
    Tensor::from_vec(&[cs.cout, dout, ho, wo], out).unwrap()
}

fn shape_of<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Conv3dShape {
    assert_eq!(x.ndim(), 4, "conv3d input must be (C, D, H, W), got {:?}", x.shape());
    let ws = w.shape();
    assert_eq!(ws.len(), 5, "conv3d weight must be (Cout, Cin, 3, 3, 3)");
    assert_eq!(&ws[2..], &[KSIZE; 3], "conv3d kernel must be 3×3×3");
    assert_eq!(ws[1], x.shape()[0], "conv3d channel mismatch: weight {ws:?} input {:?}", x.shape());
    assert!(stride == 1 || stride == 2, "conv3d stride must be 1 or 2");
    Conv3dShape {
        cin: ws[1],
        cout: ws[0],
        dims: [x.shape()[1], x.shape()[2], x.shape()[3]],
        stride,
    }
}

impl<T: Scalar> Graph<T> {
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let (xv, wv) = (self.value_arc(x), self.value_arc(w));
        let bv = b.map(|b| self.value_arc(b));
        let out = conv3d_forward(&xv, &wv, bv.as_deref(), stride);
        let cs = shape_of(&xv, &wv, stride);
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.custom(out, &parents, move |g, need| {
            let (gx, gw) = conv3d_backward(&cs, &xv, &wv, g, need[0], need[1]);
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(need[2].then(|| {
                    let n = g.len() / cs.cout;
                    Tensor::from_fn(&[cs.cout], |co| g.data()[co * n..(co + 1) * n].iter().copied().sum())
                }));
            }
            res
        })
    }
}

fn conv3d_backward<T: Scalar>(
    cs: &Conv3dShape,
    x: &Arc<Tensor<T>>,
    w: &Arc<Tensor<T>>,
    g: &Tensor<T>,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    if !want_x && !want_w {
        return (None, None);
    }
    let [dout, _, _] = cs.out_dims();
    let plane = cs.plane();
    let k = cs.k();
    let cout = cs.cout;
    let gd = g.data();
    let mut dw = want_w.then(|| vec![T::zero(); cout * k]);
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);

    let tasks: Vec<(usize, usize)> = (0..dout)
        .step_by(SLICES_PER_TASK)
        .map(|s| (s, (s + SLICES_PER_TASK).min(dout)))
        .collect();
    let wave = (rayon::current_num_threads() * 2).max(1);
    for wave_tasks in tasks.chunks(wave) {
        let results: Vec<(Option<Vec<T>>, Vec<Vec<T>>)> = wave_tasks
            .par_iter()
            .map(|&(z0, z1)| {
                let mut col = vec![T::zero(); k * plane];
                let mut gs = vec![T::zero(); cout * plane];
                let mut local_dw = want_w.then(|| vec![T::zero(); cout * k]);
                let mut dcols = Vec::new();
                for oz in z0..z1 {
                    for co in 0..cout {
                        let src = (co * dout + oz) * plane;
                        gs[co * plane..(co + 1) * plane].copy_from_slice(&gd[src..src + plane]);
                    }
                    if let Some(ldw) = local_dw.as_mut() {
                        cs.im2col(x.data(), oz, &mut col);
                        gemm(false, true, cout, k, plane, T::one(), &gs, &col, T::one(), ldw);
                    }
                    if want_x {
                        let mut dcol = vec![T::zero(); k * plane];
                        gemm(true, false, k, plane, cout, T::one(), w.data(), &gs, T::zero(), &mut dcol);
                        dcols.push(dcol);
                    }
                }
                (local_dw, dcols)
            })
            .collect();
        for (&(z0, _), (ldw, dcols)) in wave_tasks.iter().zip(results) {
            if let (Some(acc), Some(l)) = (dw.as_mut(), ldw) {
                for (a, v) in acc.iter_mut().zip(l) {
                    *a += v;
                }
            }
            if let Some(dxb) = dx.as_mut() {
                for (i, dcol) in dcols.iter().enumerate() {
                    cs.col2im_add(dcol, z0 + i, dxb);
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d).unwrap()),
        dw.map(|d| Tensor::from_vec(w.shape(), d).unwrap()),
    )
}
