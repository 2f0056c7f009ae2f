//! Parameterized primitive layers.

use crate::autograd::Var;
use crate::ops;
use crate::params::{Ctx, Mode, ParamId, ParamKind, ParamLayout};
use crate::tensor::Real;

pub const BN_EPS: f64 = 1e-5;

/// Square-kernel convolution with "same" padding (`k / 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        l: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        l.scoped(name, |l| {
            let fan_in = cin * kernel * kernel;
            let weight = l.add("weight", [cout, cin, kernel, kernel], ParamKind::Weight, fan_in);
            let bias = bias.then(|| l.add("bias", [cout, 1, 1, 1], ParamKind::Bias, fan_in));
            Self {
                weight,
                bias,
                cin,
                cout,
                kernel,
                stride,
            }
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Var<T> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        ops::conv2d(x, &w, b.as_ref(), self.stride, self.kernel / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(l: &mut ParamLayout, name: &str, channels: usize) -> Self {
        l.scoped(name, |l| {
            let shape = [channels, 1, 1, 1];
            Self {
                scale: l.add("scale", shape, ParamKind::NormScale, 1),
                shift: l.add("shift", shape, ParamKind::NormShift, 1),
                running_mean: l.add("running_mean", shape, ParamKind::RunningMean, 1),
                running_var: l.add("running_var", shape, ParamKind::RunningVar, 1),
            }
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Var<T> {
        let gamma = ctx.param(self.scale);
        let beta = ctx.param(self.shift);
        let eps = T::lit(BN_EPS);
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = ops::batch_norm_train(x, &gamma, &beta, eps);
                ctx.record_stats(self.running_mean, self.running_var, stats);
                y
            }
            Mode::Eval => {
                let store = ctx.store();
                ops::batch_norm_eval(
                    x,
                    &gamma,
                    &beta,
                    store.get(self.running_mean).data(),
                    store.get(self.running_var).data(),
                    eps,
                )
            }
        }
    }
}

/// Convolution (no bias) → batch normalization → optional rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        l: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        l.scoped(name, |l| Self {
            conv: Conv::new(l, "conv", cin, cout, kernel, stride, false),
            bn: BatchNorm::new(l, "bn", cout),
            relu,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Var<T> {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, &y);
        if self.relu {
            ops::relu(&y)
        } else {
            y
        }
    }
}
