use morphkit::warp::{compose, jacobian_determinant, upsample_field_x2, warp_labels_nearest, warp_trilinear};
use morphkit::{DisplacementField, LabelMap, Volume};
use proptest::prelude::*;

fn volume(dims: [usize; 3], seed: u64) -> Volume<f64> {
    Volume::from_fn(dims, [1.0; 3], |z, y, x| ((z * 31 + y * 17 + x * 7) as f64 + seed as f64).sin() * 10.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn integer_shift_translates(d in 3usize..10, h in 3usize..10, w in 3usize..10, t in -2i64..=2, axis in 0usize..3, seed in 0u64..100) {
        let v = volume([d, h, w], seed);
        let mut shift = [0.0; 3];
        shift[axis] = t as f64;
        let u = DisplacementField::from_fn([d, h, w], [1.0; 3], |_, _, _| shift).unwrap();
        let out = warp_trilinear(&v, &u).unwrap();
        let dims = [d, h, w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut p = [z as i64, y as i64, x as i64];
                    p[axis] += t;
                    if (0..3).all(|i| p[i] >= 0 && p[i] < dims[i] as i64) {
                        prop_assert_eq!(out.at(z, y, x), v.at(p[0] as usize, p[1] as usize, p[2] as usize));
                    }
                }
            }
        }
    }

    #[test]
    fn compose_with_zero_is_identity(n in 4usize..9, a in -1.5f64..1.5, b in -1.5f64..1.5) {
        let u = DisplacementField::from_fn([n; 3], [1.0; 3], |z, y, x| [a * (x as f64 * 0.4).sin(), b * (z as f64 * 0.3).cos(), 0.2 * y as f64]).unwrap();
        let zero = DisplacementField::zeros([n; 3], [1.0; 3]);
        prop_assert_eq!(compose(&zero, &u).unwrap(), u.clone());
        prop_assert_eq!(compose(&u, &zero).unwrap(), u);
    }
}

#[test]
fn nearest_label_warp_keeps_label_set() {
    let s = LabelMap::from_fn([10; 3], [1.0; 3], |z, y, x| ((z / 3 + y / 4 + x / 5) % 3) as u32).unwrap();
    let zero = DisplacementField::<f32>::zeros([10; 3], [1.0; 3]);
    assert_eq!(warp_labels_nearest(&s, &zero).unwrap(), s);
    let u = DisplacementField::<f32>::from_fn([10; 3], [1.0; 3], |z, _, _| [0.0, 0.3 * z as f32 - 1.0, 0.6]).unwrap();
    let out = warp_labels_nearest(&s, &u).unwrap();
    assert!(out.data().iter().all(|l| s.label_set().contains(l)));
}

#[test]
fn shear_has_unit_determinant() {
    let u = DisplacementField::<f64>::from_fn([8; 3], [1.0; 3], |z, _, _| [0.0, 0.0, 0.5 * z as f64]).unwrap();
    let j = jacobian_determinant(&u).unwrap();
    assert!(j.data().iter().all(|&d| (d - 1.0).abs() < 1e-12));
    assert_eq!(j.non_positive(), 0);
}

#[test]
fn upsampling_doubles_displacements() {
    let u = DisplacementField::<f64>::from_fn([4; 3], [2.0; 3], |_, _, _| [1.0, -0.5, 0.25]).unwrap();
    let up = upsample_field_x2(&u);
    assert_eq!(up.dims(), [8; 3]);
    assert_eq!(up.spacing(), [1.0; 3]);
    assert_eq!(up.at(5, 2, 7), [2.0, -1.0, 0.5]);
}
