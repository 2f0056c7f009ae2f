use alloc::vec::Vec;

use super::*;
use crate::ops;
use crate::params::{Ctx, ParamKind, ParamLayout, ParamStore};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use rand::Rng as _;

fn random(shape: crate::tensor::Shape, seed: u64) -> Tensor<f64> {
    let mut r = rng_for(&[seed, 99]);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn fmap(shape: crate::tensor::Shape, stride: usize, seed: u64) -> FeatureMap<f64> {
    FeatureMap::new(Var::constant(random(shape, seed)), stride)
}

fn zero_weights(store: &mut ParamStore<f64>, prefix: &str) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, s, _)| {
            s.name.starts_with(prefix) && matches!(s.kind, ParamKind::Weight | ParamKind::Bias)
        })
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn se_gate_is_one_half_with_zero_weights() {
    let mut l = ParamLayout::new();
    let se = SeBlock::new(&mut l, "se", 16, 16).unwrap();
    let mut p = ParamStore::<f64>::init(&l, 0);
    zero_weights(&mut p, "se");
    let x = fmap([1, 16, 8, 8], 2, 1);
    let y = se.forward(&mut Ctx::eval(&p), &x).unwrap();
    assert_eq!(y.data.shape(), x.data.shape());
    for (a, b) in y.data.value().data().iter().zip(x.data.value().data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn se_matches_a_scalar_reference() {
    let mut l = ParamLayout::new();
    let se = SeBlock::new(&mut l, "se", 8, 2).unwrap();
    let p = ParamStore::<f64>::init(&l, 3);
    let x = random([2, 8, 5, 3], 4);
    let y = se.forward(&mut Ctx::eval(&p), &FeatureMap::new(Var::constant(x.clone()), 1)).unwrap();
    let w1 = p.get(se.fc1.weight);
    let b1 = p.get(se.fc1.bias.unwrap());
    let w2 = p.get(se.fc2.weight);
    let b2 = p.get(se.fc2.bias.unwrap());
    let hidden = se.fc1.cout;
    for n in 0..2 {
        let pooled: Vec<f64> = (0..8)
            .map(|c| {
                let mut s = 0.0;
                for yy in 0..5 {
                    for xx in 0..3 {
                        s += x.at(n, c, yy, xx);
                    }
                }
                s / 15.0
            })
            .collect();
        let h: Vec<f64> = (0..hidden)
            .map(|j| {
                let z: f64 = (0..8).map(|c| w1.at(j, c, 0, 0) * pooled[c]).sum::<f64>() + b1.data()[j];
                z.max(0.0)
            })
            .collect();
        for c in 0..8 {
            let z: f64 = (0..hidden).map(|j| w2.at(c, j, 0, 0) * h[j]).sum::<f64>() + b2.data()[c];
            let g = 1.0 / (1.0 + (-z).exp());
            for yy in 0..5 {
                for xx in 0..3 {
                    let want = g * x.at(n, c, yy, xx);
                    assert!((y.data.value().at(n, c, yy, xx) - want).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn se_gate_of_constant_maps_depends_only_on_the_constants() {
    let mut l = ParamLayout::new();
    let se = SeBlock::new(&mut l, "se", 8, 2).unwrap();
    let p = ParamStore::<f64>::init(&l, 3);
    let consts = [0.3, -1.0, 2.0, 0.0, 0.5, 1.5, -0.25, 0.75];
    let x = |h: usize, w: usize| {
        Var::constant(Tensor::from_fn([1, 8, h, w], |i| consts[i / (h * w)]))
    };
    let g1 = se.gate(&mut Ctx::eval(&p), &x(4, 4));
    let g2 = se.gate(&mut Ctx::eval(&p), &x(7, 2));
    assert!(g1.value().max_abs_diff(g2.value()) < 1e-12);
}

#[test]
fn se_rejects_indivisible_reduction() {
    assert!(se_bottleneck(70, 16).is_err());
    assert_eq!(se_bottleneck(24, 16).unwrap(), 4);
    assert_eq!(se_bottleneck(256, 16).unwrap(), 16);
    assert_eq!(se_bottleneck(16, 16).unwrap(), 4);
}

#[test]
fn se_resnet_shapes_and_zero_residual() {
    let mut l = ParamLayout::new();
    let down = SeResNetStage::new(&mut l, "down", 16, 24, true, 4).unwrap();
    let keep = SeResNetStage::new(&mut l, "keep", 8, 8, false, 4).unwrap();
    let mut p = ParamStore::<f64>::init(&l, 0);
    let y = down.forward(&mut Ctx::train(&p), &fmap([1, 16, 32, 32], 2, 1)).unwrap();
    assert_eq!((y.data.shape(), y.stride), ([1, 24, 16, 16], 4));
    assert!(down.forward(&mut Ctx::train(&p), &fmap([1, 16, 7, 8], 2, 1)).is_err());

    // Zero the residual branch: the stage becomes relu(identity).
    for name in ["keep.conv1", "keep.conv2"] {
        zero_weights(&mut p, name);
    }
    let x = fmap([1, 8, 6, 6], 4, 2);
    let y = keep.forward(&mut Ctx::train(&p), &x).unwrap();
    let want = x.data.value().map(|v| v.max(0.0));
    assert_eq!(y.data.value(), &want);
}

#[test]
fn chained_stages_give_the_pyramid_strides() {
    let mut l = ParamLayout::new();
    let widths = [4, 8, 8, 16];
    let mut cin = 3;
    let stages: Vec<_> = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let s = SeResNetStage::new(&mut l, &alloc::format!("s{i}"), cin, w, true, 16).unwrap();
            cin = w;
            s
        })
        .collect();
    let p = ParamStore::<f64>::init(&l, 0);
    let mut x = fmap([1, 3, 64, 64], 1, 0);
    let mut levels = Vec::new();
    for s in &stages {
        x = s.forward(&mut Ctx::train(&p), &x).unwrap();
        levels.push(x.clone());
    }
    let strides: Vec<_> = levels.iter().map(|f| f.stride).collect();
    assert_eq!(strides, PYRAMID_STRIDES);
    assert!(FeaturePyramid::new(levels).is_ok());
}

#[test]
fn cat_fuse_shapes_zero_weights_and_sharing() {
    let mut l = ParamLayout::new();
    let f = CatFuse::new(&mut l, "f", 8, 8, 6, true);
    let mut p = ParamStore::<f64>::init(&l, 0);
    let a = fmap([1, 8, 16, 16], 4, 1);
    let b = fmap([1, 8, 32, 32], 2, 2);
    let y = f.forward(&mut Ctx::train(&p), &a, &b).unwrap();
    assert_eq!((y.data.shape(), y.stride), ([1, 6, 32, 32], 2));
    assert!(f.forward(&mut Ctx::train(&p), &b, &b).is_err());

    // Two aliases of one parameter set.
    let alias = f.clone();
    let y2 = alias.forward(&mut Ctx::train(&p), &a, &b).unwrap();
    assert_eq!(y.data.value(), y2.data.value());

    zero_weights(&mut p, "f");
    let z = f.forward(&mut Ctx::train(&p), &a, &b).unwrap();
    assert!(z.data.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn similarity_rows_are_stochastic() {
    for seed in 0..5 {
        let x = random([2, 6, 5, 7], seed).map(|v| 4.0 * v);
        for item in 0..2 {
            let s = ops::similarity_matrix(&x, item, 1.0 / 6f64.sqrt());
            for row in s.data().chunks(35) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
            }
        }
        let xf: Tensor<f32> = x.cast();
        let s = ops::similarity_matrix(&xf, 1, 0.4);
        for row in s.data().chunks(35) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
        }
    }
}

/// With unit-norm feature vectors and scale 1, the dot-product similarity
/// is a Gaussian kernel of the distance: `S[p,q] / S[p,p] = exp(pᵀq − 1)
/// = exp(−½‖p − q‖²)`.
#[test]
fn dot_product_similarity_is_a_distance_kernel_for_unit_vectors() {
    let [c, h, w] = [4, 3, 3];
    let mut x = random([1, c, h, w], 7);
    let p = h * w;
    for pos in 0..p {
        let norm: f64 = (0..c).map(|ch| x.data()[ch * p + pos].powi(2)).sum::<f64>().sqrt();
        for ch in 0..c {
            x.data_mut()[ch * p + pos] /= norm;
        }
    }
    let col = |pos: usize| -> Vec<f64> { (0..c).map(|ch| x.data()[ch * p + pos]).collect() };
    // Both sides of the identity, evaluated directly.
    let (u, v) = (col(0), col(0));
    let same: f64 = 1.0 - u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    assert!(same.abs() < 1e-12);
    let e1 = [1.0, 0.0, 0.0, 0.0];
    let e2 = [0.0, 1.0, 0.0, 0.0];
    let half_dist: f64 = 0.5 * e1.iter().zip(&e2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    assert_eq!(1.0 - 0.0, half_dist);

    let s = ops::similarity_matrix(&x, 0, 1.0);
    for i in 0..p {
        for j in 0..p {
            let (a, b) = (col(i), col(j));
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let half_sq: f64 = 0.5 * a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            assert!(((1.0 - dot) - half_sq).abs() <= 1e-6);
            let ratio = s.data()[i * p + j] / s.data()[i * p + i];
            assert!((ratio - (-half_sq).exp()).abs() <= 1e-6);
        }
    }
}

#[test]
fn nl_block_keeps_shape_and_caps_positions() {
    let mut l = ParamLayout::new();
    let nl = NlBlock::new(&mut l, "nl", 4, 64);
    let p = ParamStore::<f64>::init(&l, 0);
    let y = nl.forward(&mut Ctx::train(&p), &fmap([2, 4, 8, 8], 8, 1)).unwrap();
    assert_eq!(y.data.shape(), [2, 4, 8, 8]);
    let err = nl.forward(&mut Ctx::train(&p), &fmap([1, 4, 8, 9], 8, 1)).unwrap_err();
    assert!(matches!(err, crate::Error::AttentionTooLarge { positions: 72, cap: 64 }));
}

fn pyramid(widths: [usize; 4], size: usize, seed: u64) -> FeaturePyramid<f64> {
    FeaturePyramid::new(
        (0..4)
            .map(|i| {
                let s = PYRAMID_STRIDES[i];
                fmap([1, widths[i], size / s, size / s], s, seed + i as u64)
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn nl_fpn_preserves_shapes_and_zero_weights_are_identity() {
    let widths = [16, 32, 64, 128];
    let mut l = ParamLayout::new();
    let fpn = NlFpn::new(&mut l, "fpn", widths, &[8, 16], 4096).unwrap();
    assert_eq!(fpn.up.len() + fpn.merge.len(), 6);
    let mut p = ParamStore::<f64>::init(&l, 0);
    let x = pyramid(widths, 64, 3);
    let y = fpn.forward(&mut Ctx::train(&p), &x).unwrap();
    for (a, b) in x.levels().iter().zip(y.levels()) {
        assert_eq!(a.data.shape(), b.data.shape());
        assert_eq!(a.stride, b.stride);
    }
    zero_weights(&mut p, "fpn");
    let y = fpn.forward(&mut Ctx::train(&p), &x).unwrap();
    for (a, b) in x.levels().iter().zip(y.levels()) {
        assert_eq!(a.data.value(), b.data.value());
    }
    assert!(NlFpn::new(&mut ParamLayout::new(), "f", widths, &[32], 64).is_err());
}

#[test]
fn pyramids_need_four_consistent_levels() {
    let three: Vec<_> = (0..3).map(|i| fmap([1, 4, 8 >> i, 8 >> i], 2 << i, 0)).collect();
    assert!(FeaturePyramid::new(three).is_err());
    let mut bad: Vec<_> = (0..4).map(|i| fmap([1, 4, 8 >> i, 8 >> i], 2 << i, 0)).collect();
    bad[2] = fmap([1, 4, 3, 3], 8, 0);
    assert!(FeaturePyramid::new(bad).is_err());
}

#[test]
fn dfm_is_symmetric_and_difference_vanishes_on_equal_inputs() {
    let mut l = ParamLayout::new();
    let d = Dfm::new(&mut l, "dfm", 32, 32, 3).unwrap();
    let p = ParamStore::<f64>::init(&l, 5);
    let a = fmap([1, 32, 16, 16], 8, 1);
    let b = fmap([1, 32, 16, 16], 8, 2);
    let ab = d.forward(&mut Ctx::train(&p), &a, &b).unwrap();
    let ba = d.forward(&mut Ctx::train(&p), &b, &a).unwrap();
    assert_eq!(ab.data.shape(), [1, 32, 16, 16]);
    assert_eq!(ab.data.value(), ba.data.value());
    let eval_ab = d.forward(&mut Ctx::eval(&p), &a, &b).unwrap();
    let eval_ba = d.forward(&mut Ctx::eval(&p), &b, &a).unwrap();
    assert_eq!(eval_ab.data.value(), eval_ba.data.value());

    let br = d.branches(&mut Ctx::train(&p), &a, &a).unwrap();
    assert!(br.diff.value().data().iter().all(|&v| v == 0.0));
    // Both temporal inputs of a branch use one parameter set.
    assert_eq!(d.stream(true, 0), d.stream(true, 1));
    assert_eq!(d.stream(false, 0), d.stream(false, 1));
    assert!(d.forward(&mut Ctx::train(&p), &a, &fmap([1, 32, 8, 8], 16, 0)).is_err());
}

#[test]
fn outputs_stay_finite() {
    let widths = [4, 8, 8, 16];
    let mut l = ParamLayout::new();
    let fpn = NlFpn::new(&mut l, "fpn", widths, &[2, 4, 8, 16], 4096).unwrap();
    let p = ParamStore::<f64>::init(&l, 0);
    let x = pyramid(widths, 32, 0);
    for lvl in fpn.forward(&mut Ctx::train(&p), &x).unwrap().levels() {
        assert!(lvl.data.value().all_finite());
    }
}
