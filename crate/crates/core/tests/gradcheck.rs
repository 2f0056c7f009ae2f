//! Finite-difference checks of reverse-mode gradients in f64: central
//! differences with step 1e-5, relative tolerance 1e-3.

use fccdn_core::gradcheck::{self, random, Forward, Options};
use fccdn_core::losses::{self, LossWeights, Targets};
use fccdn_core::ops;
use fccdn_core::params::ParamLayout;
use fccdn_core::rng::rng_for;
use fccdn_core::{ClassMap, Network, NetworkConfig, Shape, Tensor, Var};
use rand::Rng as _;

fn check(layout: &ParamLayout, inputs: &[Tensor<f64>], per_tensor: usize, f: &Forward<'_>) {
    check_with_step(layout, inputs, per_tensor, gradcheck::STEP, f)
}

fn check_with_step(layout: &ParamLayout, inputs: &[Tensor<f64>], per_tensor: usize, step: f64, f: &Forward<'_>) {
    let opts = Options {
        step,
        per_tensor,
        ..Options::default()
    };
    let n = gradcheck::check(layout, inputs, opts, f).unwrap_or_else(|e| panic!("{e}"));
    assert!(n > 0);
}

#[test]
fn every_block() {
    let suite = gradcheck::block_suite();
    assert_eq!(suite.len(), 9);
    for (name, r) in suite {
        match r {
            Ok(n) => assert!(n > 0, "{name}: nothing checked"),
            Err(e) => panic!("{name}: {e}"),
        }
    }
}

#[test]
fn pointwise_and_spatial_ops() {
    let l = ParamLayout::new();
    let x = random([1, 2, 3, 4], 30);
    let y = random([1, 2, 3, 4], 31);
    let ops_list: Vec<Box<Forward<'_>>> = vec![
        Box::new(|_, v| ops::sigmoid(&v[0])),
        Box::new(|_, v| ops::abs(&ops::sub(&v[0], &v[1]))),
        Box::new(|_, v| ops::div(&v[0], &ops::add_scalar(&ops::square(&v[1]), 1.0))),
        Box::new(|_, v| ops::softmax_channels(&v[0])),
        Box::new(|_, v| ops::upsample_bilinear2x(&v[0])),
        Box::new(|_, v| ops::upsample_nearest2x(&v[1])),
        Box::new(|_, v| ops::global_avg_pool(&v[0])),
        Box::new(|_, v| ops::mul_channel(&v[0], &ops::global_avg_pool(&v[1]))),
        Box::new(|_, v| ops::concat_channels(&[v[0].clone(), v[1].clone()])),
        Box::new(|_, v| ops::attention_context(&v[0], &v[1], 0.5)),
    ];
    for f in &ops_list {
        check(&l, &[x.clone(), y.clone()], 64, f.as_ref());
    }
}

fn probs(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut r = rng_for(&[seed, 5]);
    Tensor::from_fn(shape, |_| r.random_range(0.05..0.95))
}

fn binary(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut r = rng_for(&[seed, 6]);
    Tensor::from_fn(shape, |_| if r.random_bool(0.4) { 1.0 } else { 0.0 })
}

#[test]
fn binary_losses() {
    let l = ParamLayout::new();
    let shape = [2, 1, 4, 4];
    let target = binary(shape, 1);
    let region = binary(shape, 2);
    let p = probs(shape, 3);
    let q = probs(shape, 4);
    check(&l, std::slice::from_ref(&p), 64, &|_, v| losses::bce_loss(&v[0], &target, Some(&region)).unwrap());
    check(&l, std::slice::from_ref(&p), 64, &|_, v| losses::dice_loss(&v[0], &target, None).unwrap());
    check(&l, std::slice::from_ref(&p), 64, &|_, v| losses::bce_dice(&v[0], &target, Some(&region)).unwrap());
    check(&l, &[p.clone(), q.clone()], 64, &|_, v| {
        losses::mse_loss(&v[0], &v[1], Some(&region)).unwrap()
    });
    check(&l, &[p.clone(), q.clone()], 64, &|_, v| {
        losses::contrastive_aux_loss(&v[0], &v[1], &target).unwrap()
    });
    check(&l, &[p, q], 64, &|_, v| {
        let outputs = fccdn_core::ModelOutputs {
            change_score: target.clone(),
            seg1_score: Some(v[0].value().clone()),
            seg2_score: Some(v[1].value().clone()),
        };
        let pl = losses::make_pseudolabels(&outputs, &target).unwrap();
        let (a, b) = losses::ssl_aux_loss(&v[0], &v[1], &pl).unwrap();
        ops::add(&a, &ops::scale(&b, 0.3))
    });
}

#[test]
fn multiclass_losses() {
    let l = ParamLayout::new();
    let mut r = rng_for(&[9]);
    let labels = ClassMap {
        shape: [2, 4, 4],
        data: (0..32)
            .map(|i| if i % 7 == 0 { ClassMap::IGNORE } else { r.random_range(0..3) })
            .collect(),
    };
    let region = binary([2, 1, 4, 4], 8);
    // probabilities on the simplex come from a softmax of free logits
    check(&l, &[random([2, 3, 4, 4], 9)], 64, &|_, v| {
        let p = ops::softmax_channels(&v[0]);
        losses::ce_dice(&p, &labels, Some(&region)).unwrap()
    });
}

#[test]
fn pseudolabels_carry_no_gradient() {
    let shape = [1, 1, 4, 4];
    let target = binary(shape, 1);
    let s1 = Var::leaf(probs(shape, 2));
    let s2 = Var::leaf(probs(shape, 3));
    let outputs = fccdn_core::ModelOutputs {
        change_score: target.clone(),
        seg1_score: Some(s1.value().clone()),
        seg2_score: Some(s2.value().clone()),
    };
    let pl = losses::make_pseudolabels(&outputs, &target).unwrap();
    let (l1, l2) = losses::ssl_aux_loss(&s1, &s2, &pl).unwrap();
    let g = l1.backward();
    assert!(g.get(&s1).is_some());
    assert!(g.get(&s2).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    let g = l2.backward();
    assert!(g.get(&s1).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(g.get(&s2).is_some());
}

#[test]
fn whole_network_objectives() {
    let variants = [
        (NetworkConfig::fccdn(0.125), losses::LossVariant::BinarySsl),
        (NetworkConfig::fccdn(0.125), losses::LossVariant::Contrastive),
        (NetworkConfig::fcs(0.125), losses::LossVariant::None),
    ];
    for (cfg, variant) in variants {
        let net = Network::new(&cfg).unwrap();
        let change = binary([2, 1, 16, 16], 40);
        let inputs = [random([2, 3, 16, 16], 41), random([2, 3, 16, 16], 42)];
        let weights = LossWeights::default();
        // Thousands of ReLU/abs kinks: a 1e-5 step crosses some of them and
        // the difference quotient stops being a derivative, so the whole
        // network is differenced more finely.
        check_with_step(&net.layout, &inputs, 2, 1e-6, &|ctx, v| {
            let out = net.forward(ctx, &v[0], &v[1]).unwrap();
            let targets = Targets {
                change: &change,
                classes: None,
            };
            losses::compute_loss(variant, &out, &targets, &weights, true).unwrap().total
        });
    }
}
