//! Parameterized building blocks shared by the encoder, LEBs and decoder.

use crate::autograd::{NormAxes, Var};
use crate::params::{init_uniform, param_rng, Ctx, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bare 3×3×3 convolution (padding 1).
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub cin: usize,
}

impl Conv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, cin: usize, cout: usize, stride: usize, seed: u64) -> Self {
        let bound = 1.0 / ((cin * 27) as f64).sqrt();
        let w = init_uniform(&mut param_rng(seed, &format!("{name}.weight")), &[cout, cin, 3, 3, 3], bound);
        Conv {
            weight: store.add(format!("{name}.weight"), group, w),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout])),
            stride,
            cin,
        }
    }

    /// Weights and bias start at zero, so the initial output is zero.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, cin: usize, cout: usize) -> Self {
        Conv {
            weight: store.add(format!("{name}.weight"), group, Tensor::zeros(&[cout, cin, 3, 3, 3])),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout])),
            stride: 1,
            cin,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.g.conv3d(x, w, Some(b), self.stride)
    }
}

/// Convolution → instance norm → LeakyReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub slope: f64,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, cin: usize, cout: usize, stride: usize, slope: f64, seed: u64) -> Self {
        ConvBlock {
            conv: Conv::new(store, name, group, cin, cout, stride, seed),
            slope,
        }
    }

    pub fn conv_in(&self) -> usize {
        self.conv.cin
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = ctx.g.instance_norm(y, NormAxes::ChannelsFirst);
        ctx.g.leaky_relu(y, T::lit(self.slope))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, din: usize, dout: usize, bias: bool, seed: u64) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let w = init_uniform(&mut param_rng(seed, &format!("{name}.weight")), &[dout, din], bound);
        Linear {
            weight: store.add(format!("{name}.weight"), group, w),
            bias: bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[dout]))),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.g.linear(x, w, b)
    }
}

/// Two token-wise projections, each followed by instance normalization over
/// the token axis and LeakyReLU: `(L, in) → (L, hidden) → (L, out)`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub first: Linear,
    pub second: Linear,
    pub slope: f64,
    pub dims: (usize, usize, usize),
}

impl Adapter {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, din: usize, hidden: usize, dout: usize, slope: f64, seed: u64) -> Self {
        Adapter {
            first: Linear::new(store, &format!("{name}.proj1"), group, din, hidden, true, seed),
            second: Linear::new(store, &format!("{name}.proj2"), group, hidden, dout, true, seed),
            slope,
            dims: (din, hidden, dout),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let slope = T::lit(self.slope);
        let mut h = x;
        for lin in [&self.first, &self.second] {
            h = lin.forward(ctx, h);
            h = ctx.g.instance_norm(h, NormAxes::Tokens);
            h = ctx.g.leaky_relu(h, slope);
        }
        h
    }
}
