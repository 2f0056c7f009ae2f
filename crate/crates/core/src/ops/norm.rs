//! Batch normalization over `(batch, height, width)` per channel.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::tensor::{Real, Tensor};

/// Per-channel statistics measured on the current batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<T>,
    /// Number of values each statistic was measured over.
    pub count: usize,
}

fn channel_sums<T: Real>(x: &Tensor<T>, mut f: impl FnMut(usize, T)) {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let d = x.data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for &v in &d[base..base + plane] {
                f(ch, v);
            }
        }
    }
}

/// Normalizes with batch statistics; returns the statistics so the caller
/// can fold them into running averages.
pub fn batch_norm_train<T: Real>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: T,
) -> (Var<T>, BatchStats<T>) {
    let [n, c, _, _] = x.shape();
    let plane = x.value().plane();
    let count = n * plane;
    let m = T::from_usize(count).expect("count");

    let mut mean = vec![T::zero(); c];
    channel_sums(x.value(), |ch, v| mean[ch] += v);
    for v in &mut mean {
        *v /= m;
    }
    let mut var = vec![T::zero(); c];
    channel_sums(x.value(), |ch, v| {
        let d = v - mean[ch];
        var[ch] += d * d;
    });
    for v in &mut var {
        *v /= m;
    }
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let g = gamma.value().data();
    let bt = beta.value().data();
    let mut out = x.value().clone();
    {
        let od = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, s, gg, bb) = (mean[ch], inv[ch], g[ch], bt[ch]);
                for v in &mut od[base..base + plane] {
                    *v = (*v - mu) * s * gg + bb;
                }
            }
        }
    }

    let stats = BatchStats {
        mean: mean.clone(),
        var,
        count,
    };
    let y = Var::from_fn(out, vec![x.clone(), gamma.clone(), beta.clone()], move |inputs, _, grad| {
        let xv = inputs[0].value();
        let gamma = inputs[1].value().data();
        let gd = grad.data();
        let xd = xv.data();
        // Per-channel Σg and Σg·x̂.
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, s) = (mean[ch], inv[ch]);
                for i in base..base + plane {
                    sum_g[ch] += gd[i];
                    sum_gx[ch] += gd[i] * (xd[i] - mu) * s;
                }
            }
        }
        let gx = inputs[0].requires_grad().then(|| {
            let mut gx = Tensor::zeros(xv.shape());
            let gxd = gx.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let (mu, s) = (mean[ch], inv[ch]);
                    let k = gamma[ch] * s / m;
                    for i in base..base + plane {
                        let xhat = (xd[i] - mu) * s;
                        gxd[i] = k * (m * gd[i] - sum_g[ch] - xhat * sum_gx[ch]);
                    }
                }
            }
            gx
        });
        let ggamma = inputs[1]
            .requires_grad()
            .then(|| Tensor::from_vec(inputs[1].shape(), sum_gx.clone()).expect("gamma shape"));
        let gbeta = inputs[2]
            .requires_grad()
            .then(|| Tensor::from_vec(inputs[2].shape(), sum_g.clone()).expect("beta shape"));
        vec![gx, ggamma, gbeta]
    });
    (y, stats)
}

/// Normalizes with fixed (running) statistics.
pub fn batch_norm_eval<T: Real>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Var<T> {
    let [n, c, _, _] = x.shape();
    let plane = x.value().plane();
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = mean.to_vec();
    let g = gamma.value().data();
    let bt = beta.value().data();
    let mut out = x.value().clone();
    {
        let od = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, s, gg, bb) = (mean[ch], inv[ch], g[ch], bt[ch]);
                for v in &mut od[base..base + plane] {
                    *v = (*v - mu) * s * gg + bb;
                }
            }
        }
    }
    Var::from_fn(out, vec![x.clone(), gamma.clone(), beta.clone()], move |inputs, _, grad| {
        let xd = inputs[0].value().data();
        let gamma = inputs[1].value().data();
        let gd = grad.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        let mut gx = inputs[0].requires_grad().then(|| Tensor::zeros(inputs[0].shape()));
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, s) = (mean[ch], inv[ch]);
                for i in base..base + plane {
                    sum_g[ch] += gd[i];
                    sum_gx[ch] += gd[i] * (xd[i] - mu) * s;
                }
                if let Some(gx) = gx.as_mut() {
                    let k = gamma[ch] * s;
                    for i in base..base + plane {
                        gx.data_mut()[i] = gd[i] * k;
                    }
                }
            }
        }
        vec![
            gx,
            inputs[1]
                .requires_grad()
                .then(|| Tensor::from_vec(inputs[1].shape(), sum_gx).expect("gamma shape")),
            inputs[2]
                .requires_grad()
                .then(|| Tensor::from_vec(inputs[2].shape(), sum_g).expect("beta shape")),
        ]
    })
}
