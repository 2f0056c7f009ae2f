//! Finite-difference verification of reverse-mode gradients (f64).
//!
//! [`check`] differentiates `Σ w ⊙ f(inputs)` for a fixed pseudo-random
//! `w` with respect to the inputs and every trainable parameter, and
//! compares against central differences.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autograd::Var;
use crate::ops;
use crate::params::{Ctx, ParamKind, ParamLayout, ParamStore};
use crate::rng::rng_for;
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Magnitudes below this are compared absolutely.
pub const FLOOR: f64 = 1e-4;

pub type Forward<'a> = dyn Fn(&mut Ctx<f64>, &[Var<f64>]) -> Var<f64> + 'a;

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub step: f64,
    /// Coordinates probed per tensor, spread evenly.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            step: STEP,
            per_tensor: 64,
            seed: 11,
        }
    }
}

/// Uniform `[-1, 1)` tensor.
pub fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut r = rng_for(&[seed, 7]);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Initialized parameters with norm scales, shifts and biases moved off
/// their neutral values.
pub fn perturbed_store(layout: &ParamLayout, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::init(layout, seed);
    let mut r = rng_for(&[seed, 3]);
    let ids: Vec<_> = s.ids().collect();
    for id in ids {
        let kind = s.spec(id).kind;
        let t = s.get_mut(id);
        match kind {
            ParamKind::NormScale => t.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..1.5)),
            ParamKind::NormShift | ParamKind::Bias => {
                t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3))
            }
            _ => {}
        }
    }
    s
}

fn coords(len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        (0..len).collect()
    } else {
        (0..n).map(|k| k * len / n).collect()
    }
}

fn eval<'s>(
    f: &Forward<'_>,
    params: &'s ParamStore<f64>,
    xs: &[Tensor<f64>],
) -> (Var<f64>, Vec<Var<f64>>, Ctx<'s, f64>) {
    let leaves: Vec<_> = xs.iter().cloned().map(Var::leaf).collect();
    let mut ctx = Ctx::train(params);
    let out = f(&mut ctx, &leaves);
    let w = random(out.shape(), 1234);
    (ops::sum_all(&ops::mul_const(&out, &w)), leaves, ctx)
}

/// Number of coordinates compared, or a description of the first mismatch.
pub fn check(layout: &ParamLayout, inputs: &[Tensor<f64>], opts: Options, f: &Forward<'_>) -> Result<usize, String> {
    let mut params = perturbed_store(layout, opts.seed);
    let loss = |p: &ParamStore<f64>, xs: &[Tensor<f64>]| eval(f, p, xs).0.value().data()[0];
    let h = opts.step;

    let (l, leaves, ctx) = eval(f, &params, inputs);
    let mut grads = l.backward();
    let pgrads = ctx.param_grads(&mut grads);
    let input_grads: Vec<Tensor<f64>> = leaves
        .iter()
        .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    drop(ctx);

    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (k, g) in input_grads.iter().enumerate() {
        for i in coords(g.len(), opts.per_tensor) {
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + h;
            let hi = loss(&params, &xs);
            xs[k].data_mut()[i] = x0 - h;
            let lo = loss(&params, &xs);
            xs[k].data_mut()[i] = x0;
            let num = (hi - lo) / (2.0 * h);
            if !close(g.data()[i], num) {
                return Err(format!("input {k}[{i}]: analytic {} vs numeric {num}", g.data()[i]));
            }
            checked += 1;
        }
    }

    let ids: Vec<_> = params.ids().filter(|&id| params.spec(id).kind.trainable()).collect();
    for id in ids {
        let g = pgrads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
        for i in coords(g.len(), opts.per_tensor) {
            let p0 = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = p0 + h;
            let hi = loss(&params, inputs);
            params.get_mut(id).data_mut()[i] = p0 - h;
            let lo = loss(&params, inputs);
            params.get_mut(id).data_mut()[i] = p0;
            let num = (hi - lo) / (2.0 * h);
            if !close(g.data()[i], num) {
                return Err(format!(
                    "{}[{i}]: analytic {} vs numeric {num}",
                    params.spec(id).name,
                    g.data()[i]
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Every building block at a small size: `(name, coordinates checked or
/// the first mismatch)`.
pub fn block_suite() -> Vec<(&'static str, Result<usize, String>)> {
    use crate::blocks::{CatFuse, Dfm, FeatureMap, FeaturePyramid, NlBlock, NlFpn, SeResNetStage};
    use crate::network::Head;

    let opts = Options::default();
    let fm = |v: &Var<f64>, s| FeatureMap::new(v.clone(), s);
    let mut out = Vec::new();

    for (name, downsample, cin) in [
        ("se_resnet_down", true, 2),
        ("se_resnet", false, 2),
        ("se_resnet_widen", false, 1),
    ] {
        let mut l = ParamLayout::new();
        let r = SeResNetStage::new(&mut l, "s", cin, 2, downsample, 16)
            .map_err(|e| format!("{e}"))
            .and_then(|b| {
                check(&l, &[random([2, cin, 4, 4], 1)], opts, &|ctx, v| {
                    b.forward(ctx, &fm(&v[0], 1)).expect("stage forward").data
                })
            });
        out.push((name, r));
    }

    let mut l = ParamLayout::new();
    let r = Dfm::new(&mut l, "dfm", 2, 2, 2).map_err(|e| format!("{e}")).and_then(|d| {
        check(&l, &[random([2, 2, 4, 4], 2), random([2, 2, 4, 4], 3)], opts, &|ctx, v| {
            d.forward(ctx, &fm(&v[0], 2), &fm(&v[1], 2)).expect("dfm forward").data
        })
    });
    out.push(("dfm", r));

    let mut l = ParamLayout::new();
    let cf = CatFuse::new(&mut l, "cf", 1, 2, 2, true);
    out.push((
        "cat_fuse",
        check(&l, &[random([2, 1, 2, 2], 4), random([2, 2, 4, 4], 5)], opts, &|ctx, v| {
            cf.forward(ctx, &fm(&v[0], 4), &fm(&v[1], 2)).expect("fuse forward").data
        }),
    ));

    let mut l = ParamLayout::new();
    let nl = NlBlock::new(&mut l, "nl", 2, 64);
    out.push((
        "nl_block",
        check(&l, &[random([2, 2, 3, 4], 6)], opts, &|ctx, v| {
            nl.forward(ctx, &fm(&v[0], 8)).expect("nl forward").data
        }),
    ));

    let mut l = ParamLayout::new();
    let r = NlFpn::new(&mut l, "fpn", [1, 2, 2, 2], &[8, 16], 4096)
        .map_err(|e| format!("{e}"))
        .and_then(|fpn| {
            let shapes: [Shape; 4] = [[2, 1, 8, 8], [2, 2, 4, 4], [2, 2, 2, 2], [2, 2, 1, 1]];
            let inputs: Vec<_> = shapes.iter().zip(10..).map(|(&s, seed)| random(s, seed)).collect();
            check(&l, &inputs, opts, &|ctx, v| {
                let levels = v.iter().zip([2, 4, 8, 16]).map(|(x, s)| fm(x, s)).collect();
                let pyr = fpn
                    .forward(ctx, &FeaturePyramid::new(levels).expect("pyramid"))
                    .expect("fpn forward");
                let parts: Vec<_> = pyr
                    .levels()
                    .iter()
                    .zip(77..)
                    .map(|(m, seed)| ops::sum_all(&ops::mul_const(&m.data, &random(m.data.shape(), seed))))
                    .collect();
                ops::add_n(&parts)
            })
        });
    out.push(("nl_fpn", r));

    for (name, classes) in [("head_binary", 1), ("head_multiclass", 3)] {
        let mut l = ParamLayout::new();
        let head = Head::new(&mut l, "head", 2, classes);
        out.push((
            name,
            check(&l, &[random([2, 2, 3, 3], 20)], opts, &|ctx, v| head.forward(ctx, &fm(&v[0], 2))),
        ));
    }
    out
}
