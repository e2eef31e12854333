//! Spatial-transformer sampling and displacement-field algebra.
//!
//! Every sampler clamps coordinates to the grid, so the identity warp is
//! exact and no mask channel is needed. Composition is "coarse first, fine
//! refines": `u(x) = u_fine(x) + u_coarse(x + u_fine(x))`.

use crate::autograd::{upsample2_forward, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{DisplacementField, Dims, LabelMap, Volume};

/// Clamped linear-interpolation taps along one axis.
#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    f: T,
    /// Coordinate fell outside the grid; the derivative is zero.
    clamped: bool,
}

#[inline]
fn tap<T: Scalar>(c: T, n: usize) -> Tap<T> {
    let hi = T::from_usize(n - 1).unwrap();
    let clamped = c < T::zero() || c > hi;
    let cc = c.max(T::zero()).min(hi);
    let i0 = cc.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    Tap {
        i0,
        i1,
        f: cc - T::from_usize(i0).unwrap(),
        clamped,
    }
}

fn spatial_dims(shape: &[usize]) -> Dims {
    let k = shape.len();
    [shape[k - 3], shape[k - 2], shape[k - 1]]
}

fn check_field_match(img_dims: Dims, field: &Tensor<impl Scalar>) -> Result<()> {
    let fs = field.shape();
    if fs.len() != 4 || fs[0] != 3 {
        return Err(Error::Shape(format!("field must be (3, D, H, W), got {fs:?}")));
    }
    let fd = spatial_dims(fs);
    if fd != img_dims {
        return Err(Error::Shape(format!("image grid {img_dims:?} vs field grid {fd:?}")));
    }
    Ok(())
}

/// Trilinear taps at every voxel for a `(3, D, H, W)` field.
fn field_taps<T: Scalar>(field: &Tensor<T>) -> Vec<[Tap<T>; 3]> {
    let [d, h, w] = spatial_dims(field.shape());
    let n = d * h * w;
    let fd = field.data();
    let mut out = Vec::with_capacity(n);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let cz = T::from_usize(z).unwrap() + fd[i];
                let cy = T::from_usize(y).unwrap() + fd[n + i];
                let cx = T::from_usize(x).unwrap() + fd[2 * n + i];
                out.push([tap(cz, d), tap(cy, h), tap(cx, w)]);
            }
        }
    }
    out
}

/// Samples every channel of `img (C, D, H, W)` at `x + field(x)`.
pub fn warp_tensor<T: Scalar>(img: &Tensor<T>, field: &Tensor<T>) -> Result<Tensor<T>> {
    if img.ndim() != 4 {
        return Err(Error::Shape(format!("image must be (C, D, H, W), got {:?}", img.shape())));
    }
    let dims = spatial_dims(img.shape());
    check_field_match(dims, field)?;
    let taps = field_taps(field);
    Ok(sample_all(img, dims, &taps))
}

fn sample_all<T: Scalar>(img: &Tensor<T>, dims: Dims, taps: &[[Tap<T>; 3]]) -> Tensor<T> {
    let [_, h, w] = dims;
    let n = taps.len();
    let c = img.shape()[0];
    let src = img.data();
    let mut out = vec![T::zero(); c * n];
    for (i, [tz, ty, tx]) in taps.iter().enumerate() {
        let (gz, gy, gx) = (T::one() - tz.f, T::one() - ty.f, T::one() - tx.f);
        let corners = [
            ((tz.i0 * h + ty.i0) * w + tx.i0, gz * gy * gx),
            ((tz.i0 * h + ty.i0) * w + tx.i1, gz * gy * tx.f),
            ((tz.i0 * h + ty.i1) * w + tx.i0, gz * ty.f * gx),
            ((tz.i0 * h + ty.i1) * w + tx.i1, gz * ty.f * tx.f),
            ((tz.i1 * h + ty.i0) * w + tx.i0, tz.f * gy * gx),
            ((tz.i1 * h + ty.i0) * w + tx.i1, tz.f * gy * tx.f),
            ((tz.i1 * h + ty.i1) * w + tx.i0, tz.f * ty.f * gx),
            ((tz.i1 * h + ty.i1) * w + tx.i1, tz.f * ty.f * tx.f),
        ];
        for ch in 0..c {
            let base = ch * n;
            let mut s = T::zero();
            for &(j, wt) in &corners {
                s += src[base + j] * wt;
            }
            out[base + i] = s;
        }
    }
    Tensor::from_vec(img.shape(), out).unwrap()
}

impl<T: Scalar> Graph<T> {
    /// Differentiable trilinear warp of `img (C, D, H, W)` by `field (3, D, H, W)`.
    pub fn warp(&mut self, img: Var, field: Var) -> Var {
        let (iv, fv) = (self.value_arc(img), self.value_arc(field));
        let dims = spatial_dims(iv.shape());
        check_field_match(dims, &fv).expect("warp operands");
        let taps = field_taps(&fv);
        let out = sample_all(&iv, dims, &taps);
        self.custom(out, &[img, field], move |g, need| {
            let [_, h, w] = dims;
            let n = taps.len();
            let c = iv.shape()[0];
            let (gd, src) = (g.data(), iv.data());
            let mut gimg = need[0].then(|| vec![T::zero(); iv.len()]);
            let mut gfield = need[1].then(|| vec![T::zero(); 3 * n]);
            for (i, [tz, ty, tx]) in taps.iter().enumerate() {
                let (gz, gy, gx) = (T::one() - tz.f, T::one() - ty.f, T::one() - tx.f);
                let idx = |a: usize, b: usize, cc: usize| (a * h + b) * w + cc;
                let corner = [
                    (idx(tz.i0, ty.i0, tx.i0), gz, gy, gx, -1, -1, -1),
                    (idx(tz.i0, ty.i0, tx.i1), gz, gy, tx.f, -1, -1, 1),
                    (idx(tz.i0, ty.i1, tx.i0), gz, ty.f, gx, -1, 1, -1),
                    (idx(tz.i0, ty.i1, tx.i1), gz, ty.f, tx.f, -1, 1, 1),
                    (idx(tz.i1, ty.i0, tx.i0), tz.f, gy, gx, 1, -1, -1),
                    (idx(tz.i1, ty.i0, tx.i1), tz.f, gy, tx.f, 1, -1, 1),
                    (idx(tz.i1, ty.i1, tx.i0), tz.f, ty.f, gx, 1, 1, -1),
                    (idx(tz.i1, ty.i1, tx.i1), tz.f, ty.f, tx.f, 1, 1, 1),
                ];
                let sgn = |s: i32| if s > 0 { T::one() } else { -T::one() };
                for ch in 0..c {
                    let base = ch * n;
                    let go = gd[base + i];
                    if go == T::zero() {
                        continue;
                    }
                    if let Some(gi) = gimg.as_mut() {
                        for &(j, a, b, cc, ..) in &corner {
                            gi[base + j] += go * a * b * cc;
                        }
                    }
                    if let Some(gf) = gfield.as_mut() {
                        let (mut dz, mut dy, mut dx) = (T::zero(), T::zero(), T::zero());
                        for &(j, a, b, cc, sz, sy, sx) in &corner {
                            let v = src[base + j];
                            dz += v * sgn(sz) * b * cc;
                            dy += v * a * sgn(sy) * cc;
                            dx += v * a * b * sgn(sx);
                        }
                        if !tz.clamped {
                            gf[i] += go * dz;
                        }
                        if !ty.clamped {
                            gf[n + i] += go * dy;
                        }
                        if !tx.clamped {
                            gf[2 * n + i] += go * dx;
                        }
                    }
                }
            }
            vec![
                gimg.map(|d| Tensor::from_vec(iv.shape(), d).unwrap()),
                gfield.map(|d| Tensor::from_vec(fv.shape(), d).unwrap()),
            ]
        })
    }

    /// `fine + coarse ∘ (id + fine)`.
    pub fn compose_fields(&mut self, coarse: Var, fine: Var) -> Var {
        let sampled = self.warp(coarse, fine);
        self.add(fine, sampled)
    }

    /// Trilinear ×2 upsampling followed by doubling the voxel-unit values.
    pub fn upsample_field_x2(&mut self, field: Var) -> Var {
        let up = self.upsample2(field);
        self.scale(up, T::lit(2.0))
    }
}

pub fn warp_trilinear<T: Scalar>(v: &Volume<T>, u: &DisplacementField<T>) -> Result<Volume<T>> {
    let out = warp_tensor(&v.as_channels(), u.tensor())?;
    Volume::new(out.reshape(&v.dims())?, v.spacing())
}

/// Nearest-neighbour label transfer along the same sampling map.
pub fn warp_labels_nearest<T: Scalar>(s: &LabelMap, u: &DisplacementField<T>) -> Result<LabelMap> {
    let dims = s.dims();
    if u.dims() != dims {
        return Err(Error::Shape(format!("labels {dims:?} vs field {:?}", u.dims())));
    }
    let [d, h, w] = dims;
    let near = |c: T, n: usize| -> usize {
        let hi = T::from_usize(n - 1).unwrap();
        c.max(T::zero()).min(hi).round().to_usize().unwrap_or(0).min(n - 1)
    };
    LabelMap::from_fn(dims, s.spacing(), |z, y, x| {
        let [dz, dy, dx] = u.at(z, y, x);
        let zz = near(T::from_usize(z).unwrap() + dz, d);
        let yy = near(T::from_usize(y).unwrap() + dy, h);
        let xx = near(T::from_usize(x).unwrap() + dx, w);
        s.at(zz, yy, xx)
    })
}

/// Warps a `(K, D, H, W)` one-hot stack channel by channel.
pub fn warp_onehot<T: Scalar>(s: &Tensor<T>, u: &DisplacementField<T>) -> Result<Tensor<T>> {
    warp_tensor(s, u.tensor())
}

pub fn compose<T: Scalar>(coarse: &DisplacementField<T>, fine: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    if coarse.dims() != fine.dims() {
        return Err(Error::Shape(format!("compose: {:?} vs {:?}", coarse.dims(), fine.dims())));
    }
    let sampled = warp_tensor(coarse.tensor(), fine.tensor())?;
    let out = fine.tensor().zip_map(&sampled, |a, b| a + b);
    DisplacementField::new(out, fine.spacing())
}

pub fn upsample_field_x2<T: Scalar>(u: &DisplacementField<T>) -> DisplacementField<T> {
    let up = upsample2_forward(u.tensor()).scale(T::lit(2.0));
    DisplacementField::new(up, u.spacing().map(|s| s / 2.0)).expect("upsampled field stays finite")
}

/// Per-voxel determinant of the Jacobian of `x ↦ x + u(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap<T> {
    data: Tensor<T>,
}

impl<T: Scalar> JacobianMap<T> {
    pub fn data(&self) -> &[T] {
        self.data.data()
    }

    pub fn dims(&self) -> Dims {
        spatial_dims(self.data.shape())
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> T {
        let [_, h, w] = self.dims();
        self.data.data()[(z * h + y) * w + x]
    }

    /// Voxels with determinant ≤ 0.
    pub fn non_positive(&self) -> usize {
        self.data.data().iter().filter(|&&v| v <= T::zero()).count()
    }
}

/// Central differences in the interior, one-sided differences on the border.
pub fn jacobian_determinant<T: Scalar>(u: &DisplacementField<T>) -> Result<JacobianMap<T>> {
    let dims = u.dims();
    if dims.iter().any(|&n| n < 3) {
        return Err(Error::Shape(format!("jacobian needs every dimension >= 3, got {dims:?}")));
    }
    let [d, h, w] = dims;
    let half = T::lit(0.5);
    let comps = [u.component(0), u.component(1), u.component(2)];
    let strides = [h * w, w, 1];
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pos = [z, y, x];
                let i = (z * h + y) * w + x;
                let mut j = [[T::zero(); 3]; 3];
                for (axis, &stride) in strides.iter().enumerate() {
                    let n = dims[axis];
                    let p = pos[axis];
                    for (c, comp) in comps.iter().enumerate() {
                        let deriv = if p == 0 {
                            comp[i + stride] - comp[i]
                        } else if p == n - 1 {
                            comp[i] - comp[i - stride]
                        } else {
                            (comp[i + stride] - comp[i - stride]) * half
                        };
                        j[c][axis] = deriv + if c == axis { T::one() } else { T::zero() };
                    }
                }
                out.push(
                    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]),
                );
            }
        }
    }
    Ok(JacobianMap {
        data: Tensor::from_vec(&dims, out)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    const SP: [f64; 3] = [1.0; 3];

    fn smooth(dims: Dims) -> Volume<f64> {
        Volume::from_fn(dims, SP, |z, y, x| {
            let (z, y, x) = (z as f64, y as f64, x as f64);
            (0.3 * z).sin() + (0.2 * y + 0.1 * x).cos() + 0.05 * x
        })
        .unwrap()
    }

    fn const_field(dims: Dims, v: [f64; 3]) -> DisplacementField<f64> {
        DisplacementField::from_fn(dims, SP, |_, _, _| v).unwrap()
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let v = smooth([5, 6, 7]);
        let out = warp_trilinear(&v, &DisplacementField::zeros([5, 6, 7], SP)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn ramp_shift_and_midpoint() {
        let dims = [3, 4, 6];
        let ramp = Volume::from_fn(dims, SP, |_, _, x| x as f64).unwrap();
        let out = warp_trilinear(&ramp, &const_field(dims, [0.0, 0.0, 1.0])).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..6 {
                    let want = (x + 1).min(5) as f64;
                    assert_eq!(out.at(z, y, x), want);
                }
            }
        }
        let step = Volume::from_fn(dims, SP, |_, _, x| if x % 2 == 1 { 1.0 } else { 0.0 }).unwrap();
        let out = warp_trilinear(&step, &const_field(dims, [0.0, 0.0, 0.5])).unwrap();
        assert_eq!(out.at(1, 1, 2), 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let v = smooth([4, 4, 4]);
        assert!(warp_trilinear(&v, &DisplacementField::zeros([4, 4, 5], SP)).is_err());
    }

    #[test]
    fn nearest_label_warps() {
        let dims = [8, 8, 10];
        let cube = LabelMap::from_fn(dims, SP, |z, y, x| u32::from((2..5).contains(&z) && (2..5).contains(&y) && (3..6).contains(&x)) * 3).unwrap();
        assert_eq!(warp_labels_nearest(&cube, &DisplacementField::<f64>::zeros(dims, SP)).unwrap(), cube);
        let shifted = warp_labels_nearest(&cube, &const_field(dims, [0.0, 0.0, 2.0])).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..10 {
                    assert_eq!(shifted.at(z, y, x), cube.at(z, y, (x + 2).min(9)));
                }
            }
        }
        let small = DisplacementField::from_fn(dims, SP, |z, y, x| {
            let s = ((z * 31 + y * 7 + x) as f64).sin() * 0.49;
            [s, -s, 0.3 * s]
        })
        .unwrap();
        assert_eq!(warp_labels_nearest(&cube, &small).unwrap(), cube);
        assert!(shifted.label_set().iter().all(|l| cube.label_set().contains(l)));
    }

    #[test]
    fn one_hot_partition_of_unity() {
        let dims = [6, 5, 7];
        let u = DisplacementField::from_fn(dims, SP, |z, y, x| {
            let t = (z + 2 * y + 3 * x) as f64;
            [1.7 * t.sin(), -2.3 * t.cos(), 3.1 * (0.5 * t).sin()]
        })
        .unwrap();
        let ones = Tensor::<f64>::full(&[1, 6, 5, 7], 1.0);
        assert!(warp_onehot(&ones, &u).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let labels = LabelMap::from_fn(dims, SP, |z, y, x| u32::from(z + y > x)).unwrap();
        let oh = labels.one_hot::<f64>(&[0, 1]);
        assert_eq!(warp_onehot(&oh, &DisplacementField::zeros(dims, SP)).unwrap(), oh);
        let w = warp_onehot(&oh, &u).unwrap();
        let n = 6 * 5 * 7;
        for i in 0..n {
            assert!((w.data()[i] + w.data()[n + i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_examples() {
        let dims = [6, 6, 6];
        let u = DisplacementField::from_fn(dims, SP, |z, y, x| [0.1 * x as f64, -0.2 * z as f64, 0.3 * (y as f64).sin()]).unwrap();
        let zero = DisplacementField::zeros(dims, SP);
        assert_eq!(compose(&zero, &u).unwrap(), u);
        assert_eq!(compose(&u, &zero).unwrap(), u);
        let a = [0.5, -0.25, 0.75];
        let b = [0.25, 0.5, -0.5];
        let c = compose(&const_field(dims, a), &const_field(dims, b)).unwrap();
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    let v = c.at(z, y, x);
                    for k in 0..3 {
                        assert!((v[k] - (a[k] + b[k])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_field_examples() {
        let z = upsample_field_x2(&DisplacementField::<f64>::zeros([6, 5, 6], SP));
        assert_eq!(z.tensor().shape(), &[3, 12, 10, 12]);
        assert!(z.tensor().data().iter().all(|&v| v == 0.0));
        let c = upsample_field_x2(&const_field([2, 3, 2], [0.5, -1.0, 2.0]));
        assert_eq!(c.dims(), [4, 6, 4]);
        for zz in 0..4 {
            assert_eq!(c.at(zz, 1, 1), [1.0, -2.0, 4.0]);
        }
    }

    #[test]
    fn jacobian_closed_forms() {
        let dims = [5, 6, 7];
        let id = jacobian_determinant(&DisplacementField::<f64>::zeros(dims, SP)).unwrap();
        assert!(id.data().iter().all(|&v| v == 1.0));
        assert_eq!(id.non_positive(), 0);
        let dil = DisplacementField::from_fn(dims, SP, |z, y, x| [0.1 * z as f64, 0.1 * y as f64, 0.1 * x as f64]).unwrap();
        let j = jacobian_determinant(&dil).unwrap();
        assert!((j.at(2, 3, 3) - 1.331).abs() < 1e-6);
        let refl = DisplacementField::from_fn(dims, SP, |_, _, x| [0.0, 0.0, -2.0 * x as f64]).unwrap();
        let j = jacobian_determinant(&refl).unwrap();
        assert!((j.at(2, 2, 3) + 1.0).abs() < 1e-12);
        let tr = const_field(dims, [0.3, -1.2, 4.0]);
        assert!(jacobian_determinant(&tr).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(jacobian_determinant(&DisplacementField::<f64>::zeros([2, 5, 5], SP)).is_err());
    }

    fn check_warp_grads(img: &Tensor<f64>, field: &Tensor<f64>) -> f64 {
        crate::autograd::testutil::check_grads(&[img.clone(), field.clone()], |g: &mut Graph<f64>, v| {
            let o = g.warp(v[0], v[1]);
            let p = crate::autograd::testutil::probe(g.value(o).len()).reshape(g.shape(o)).unwrap();
            g.dot_const(o, &p)
        })
    }

    #[test]
    fn warp_gradients_match_finite_differences_in_interior() {
        let img = Tensor::from_fn(&[2, 5, 5, 6], |i| ((i as f64) * 0.37).sin());
        let n = 5 * 5 * 6;
        // offsets kept in (0.1, 0.9) fractional range and well inside the grid
        let field = Tensor::from_fn(&[3, 5, 5, 6], |i| {
            let local = i % n;
            let (z, y, x) = (local / 30, (local / 6) % 5, local % 6);
            let interior = z > 0 && z < 4 && y > 0 && y < 4 && x > 0 && x < 5;
            if interior {
                0.2 + 0.5 * ((i as f64) * 0.71).sin().abs()
            } else {
                0.3
            }
        });
        let err = check_warp_grads(&img, &field);
        assert!(err < 1e-6, "{err}");
    }
}
