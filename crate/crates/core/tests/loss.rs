use approx::assert_relative_eq;
use morphkit::loss::{grad_l2, soft_dice_loss, total_loss};
use morphkit::{LabelMap, Tensor};

fn onehot(f: impl FnMut(usize, usize, usize) -> u32) -> Tensor<f64> {
    LabelMap::from_fn([6, 5, 4], [1.0; 3], f).unwrap().one_hot(&[0, 1, 2])
}

#[test]
fn identical_maps_have_zero_dice_loss() {
    let t = onehot(|z, y, x| ((z + y + x) % 3) as u32);
    assert_relative_eq!(soft_dice_loss(&t, &t).unwrap(), 0.0, epsilon = 1e-12);
}

#[test]
fn disjoint_maps_have_unit_dice_loss() {
    let a = onehot(|_, _, x| u32::from(x >= 2) * 2);
    let b = onehot(|_, _, x| u32::from(x < 2));
    assert_relative_eq!(soft_dice_loss(&a, &b).unwrap(), 1.0, epsilon = 1e-6);
}

#[test]
fn unit_ramp_smoothness() {
    let (d, h, w) = (5, 4, 6);
    let mut u = Tensor::<f64>::zeros(&[3, d, h, w]);
    for (i, v) in u.data_mut()[..d * h * w].iter_mut().enumerate() {
        *v = (i / (h * w)) as f64;
    }
    assert_relative_eq!(grad_l2(&u).unwrap(), 1.0 / 9.0, epsilon = 1e-12);
    assert_eq!(grad_l2(&Tensor::<f64>::from_fn(&[3, d, h, w], |_| 2.5)).unwrap(), 0.0);
}

#[test]
fn total_weights_the_regularizer() {
    let t = onehot(|z, _, _| (z % 3) as u32);
    let w = onehot(|_, y, _| (y % 3) as u32);
    let phi = Tensor::<f64>::from_fn(&[3, 6, 5, 4], |i| (i as f64 * 0.1).sin());
    let b = total_loss(&w, &t, &phi, 0.1).unwrap();
    assert_relative_eq!(b.total, b.sim + 0.1 * b.reg, epsilon = 1e-15);
    assert_relative_eq!(b.sim, soft_dice_loss(&w, &t).unwrap());
    assert_relative_eq!(b.reg, grad_l2(&phi).unwrap());
}
