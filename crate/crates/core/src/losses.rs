//! Losses: binary cross-entropy, dice, their sum, the self-supervised
//! pseudolabel constraint between the two segmentation branches, the
//! contrastive variant, and the multiclass variant.
//!
//! Region restrictions take a `[n, 1, h, w]` 0/1 mask; a loss over an empty
//! region is 0. Pseudolabels are plain tensors, so no gradient can flow
//! through them.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::network::{ForwardOutput, ModelOutputs};
use crate::ops;
use crate::tensor::{ClassMap, Real, Shape, Tensor};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;
/// Added to numerator and denominator of the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Pseudolabel threshold; scores at exactly this value count as positive.
pub const THRESHOLD: f64 = 0.5;

fn check_shape(what: &'static str, left: Shape, right: Shape) -> Result<()> {
    if left != right {
        return Err(Error::ShapeMismatch { what, left, right });
    }
    Ok(())
}

/// Per-pixel region weights broadcast over channels: `mask[n, 0, y, x]`.
fn region_weights<T: Real>(shape: Shape, region: Option<&Tensor<T>>) -> Result<Vec<T>> {
    let [n, c, h, w] = shape;
    let plane = h * w;
    match region {
        None => Ok(vec![T::one(); n * c * plane]),
        Some(m) => {
            check_shape("loss region", m.shape(), [n, 1, h, w])?;
            let md = m.data();
            let mut out = Vec::with_capacity(n * c * plane);
            for b in 0..n {
                for _ in 0..c {
                    out.extend_from_slice(&md[b * plane..(b + 1) * plane]);
                }
            }
            Ok(out)
        }
    }
}

/// Mean binary cross-entropy (a positive loss) over the region.
pub fn bce_loss<T: Real>(
    pred: &Var<T>,
    target: &Tensor<T>,
    region: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    check_shape("bce", pred.shape(), target.shape())?;
    let m = region_weights(pred.shape(), region)?;
    let count: T = m.iter().copied().sum();
    if count == T::zero() {
        return Ok(ops::scalar(T::zero()));
    }
    let (lo, hi) = (T::lit(BCE_CLAMP), T::one() - T::lit(BCE_CLAMP));
    let p = pred.value().data();
    let t = target.data();
    let mut total = T::zero();
    for i in 0..p.len() {
        if m[i] != T::zero() {
            let pc = p[i].max(lo).min(hi);
            total -= m[i] * (t[i] * pc.ln() + (T::one() - t[i]) * (T::one() - pc).ln());
        }
    }
    let out = Tensor::scalar(total / count);
    let target = target.clone();
    Ok(Var::from_fn(out, vec![pred.clone()], move |inputs, _, g| {
        let scale = g.data()[0] / count;
        let p = inputs[0].value();
        let t = target.data();
        let mut gp = Tensor::zeros(p.shape());
        for (i, (d, &pv)) in gp.data_mut().iter_mut().zip(p.data()).enumerate() {
            if m[i] != T::zero() && pv >= lo && pv <= hi {
                *d = -scale * m[i] * (t[i] / pv - (T::one() - t[i]) / (T::one() - pv));
            }
        }
        vec![Some(gp)]
    }))
}

/// Soft dice loss `1 - (2·Σpt + eps) / (Σp + Σt + eps)` over the region,
/// pooled over the whole batch.
pub fn dice_loss_smoothed<T: Real>(
    pred: &Var<T>,
    target: &Tensor<T>,
    region: Option<&Tensor<T>>,
    eps: T,
) -> Result<Var<T>> {
    check_shape("dice", pred.shape(), target.shape())?;
    let m = region_weights(pred.shape(), region)?;
    if m.iter().all(|&v| v == T::zero()) {
        return Ok(ops::scalar(T::zero()));
    }
    let p = pred.value().data();
    let t = target.data();
    let (mut inter, mut sp, mut st) = (T::zero(), T::zero(), T::zero());
    for i in 0..p.len() {
        inter += m[i] * p[i] * t[i];
        sp += m[i] * p[i];
        st += m[i] * t[i];
    }
    let num = T::lit(2.0) * inter + eps;
    let den = sp + st + eps;
    if den == T::zero() {
        return Ok(ops::scalar(T::zero()));
    }
    let out = Tensor::scalar(T::one() - num / den);
    let target = target.clone();
    Ok(Var::from_fn(out, vec![pred.clone()], move |inputs, _, g| {
        let gv = g.data()[0];
        let t = target.data();
        let mut gp = Tensor::zeros(inputs[0].shape());
        for (i, d) in gp.data_mut().iter_mut().enumerate() {
            *d = -gv * m[i] * (T::lit(2.0) * t[i] * den - num) / (den * den);
        }
        vec![Some(gp)]
    }))
}

pub fn dice_loss<T: Real>(
    pred: &Var<T>,
    target: &Tensor<T>,
    region: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    dice_loss_smoothed(pred, target, region, T::lit(DICE_SMOOTH))
}

/// Binary cross-entropy plus dice.
pub fn bce_dice<T: Real>(
    pred: &Var<T>,
    target: &Tensor<T>,
    region: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    Ok(ops::add(
        &bce_loss(pred, target, region)?,
        &dice_loss(pred, target, region)?,
    ))
}

/// Mean squared difference of two score maps over the region.
pub fn mse_loss<T: Real>(a: &Var<T>, b: &Var<T>, region: Option<&Tensor<T>>) -> Result<Var<T>> {
    check_shape("mse", a.shape(), b.shape())?;
    let m = region_weights(a.shape(), region)?;
    let count: T = m.iter().copied().sum();
    if count == T::zero() {
        return Ok(ops::scalar(T::zero()));
    }
    let (ad, bd) = (a.value().data(), b.value().data());
    let mut total = T::zero();
    for i in 0..ad.len() {
        let d = ad[i] - bd[i];
        total += m[i] * d * d;
    }
    let out = Tensor::scalar(total / count);
    Ok(Var::from_fn(out, vec![a.clone(), b.clone()], move |inputs, _, g| {
        let scale = T::lit(2.0) * g.data()[0] / count;
        let (ad, bd) = (inputs[0].value().data(), inputs[1].value().data());
        let ga = Tensor::from_fn(inputs[0].shape(), |i| scale * m[i] * (ad[i] - bd[i]));
        let gb = inputs[1].requires_grad().then(|| ga.map(|v| -v));
        vec![inputs[0].requires_grad().then_some(ga), gb]
    }))
}

/// Pixels that count for a multiclass loss: inside the region and labelled.
fn class_weights<T: Real>(
    shape: Shape,
    labels: &ClassMap,
    region: Option<&Tensor<T>>,
) -> Result<Vec<T>> {
    let [n, k, h, w] = shape;
    if !labels.matches(shape) {
        return Err(Error::InvalidInput(alloc::format!(
            "class map of shape {:?} does not label predictions of shape {shape:?}",
            labels.shape
        )));
    }
    let region = region_weights([n, 1, h, w], region)?;
    let mut out = Vec::with_capacity(region.len());
    for (&r, &c) in region.iter().zip(&labels.data) {
        if c == ClassMap::IGNORE {
            out.push(T::zero());
        } else if (c as usize) < k {
            out.push(r);
        } else {
            return Err(Error::InvalidInput(alloc::format!(
                "class index {c} out of range for {k} classes"
            )));
        }
    }
    Ok(out)
}

/// Mean cross-entropy of per-pixel class probabilities.
pub fn ce_loss<T: Real>(
    probs: &Var<T>,
    labels: &ClassMap,
    region: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    let shape = probs.shape();
    let m = class_weights(shape, labels, region)?;
    let count: T = m.iter().copied().sum();
    if count == T::zero() {
        return Ok(ops::scalar(T::zero()));
    }
    let [_, k, h, w] = shape;
    let plane = h * w;
    let index = |pix: usize| {
        let (b, r) = (pix / plane, pix % plane);
        (b * k + labels.data[pix] as usize) * plane + r
    };
    let (lo, hi) = (T::lit(BCE_CLAMP), T::one() - T::lit(BCE_CLAMP));
    let p = probs.value().data();
    let mut total = T::zero();
    for (pix, &mw) in m.iter().enumerate() {
        if mw != T::zero() {
            total -= mw * p[index(pix)].max(lo).min(hi).ln();
        }
    }
    let idx: Vec<usize> = (0..m.len()).map(|pix| if m[pix] != T::zero() { index(pix) } else { 0 }).collect();
    let out = Tensor::scalar(total / count);
    Ok(Var::from_fn(out, vec![probs.clone()], move |inputs, _, g| {
        let scale = g.data()[0] / count;
        let p = inputs[0].value().data();
        let mut gp = Tensor::zeros(inputs[0].shape());
        let d = gp.data_mut();
        for (pix, &mw) in m.iter().enumerate() {
            let i = idx[pix];
            if mw != T::zero() && p[i] >= lo && p[i] <= hi {
                d[i] -= scale * mw / p[i];
            }
        }
        vec![Some(gp)]
    }))
}

/// Dice loss averaged over classes (one-vs-rest per class).
pub fn dice_loss_multiclass<T: Real>(
    probs: &Var<T>,
    labels: &ClassMap,
    region: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    let shape = probs.shape();
    let m = class_weights(shape, labels, region)?;
    if m.iter().all(|&v| v == T::zero()) {
        return Ok(ops::scalar(T::zero()));
    }
    let [n, k, h, w] = shape;
    let plane = h * w;
    let mut onehot = Tensor::zeros(shape);
    let mut weights = Tensor::zeros(shape);
    {
        let (od, wd) = (onehot.data_mut(), weights.data_mut());
        for b in 0..n {
            for r in 0..plane {
                let pix = b * plane + r;
                for c in 0..k {
                    let i = (b * k + c) * plane + r;
                    wd[i] = m[pix];
                    if m[pix] != T::zero() && labels.data[pix] as usize == c {
                        od[i] = T::one();
                    }
                }
            }
        }
    }
    let eps = T::lit(DICE_SMOOTH);
    let p = probs.value().data();
    let (od, wd) = (onehot.data(), weights.data());
    let mut nums = vec![T::zero(); k];
    let mut dens = vec![T::zero(); k];
    for b in 0..n {
        for c in 0..k {
            let base = (b * k + c) * plane;
            for i in base..base + plane {
                nums[c] += T::lit(2.0) * wd[i] * p[i] * od[i];
                dens[c] += wd[i] * (p[i] + od[i]);
            }
        }
    }
    for c in 0..k {
        nums[c] += eps;
        dens[c] += eps;
    }
    let kk = T::from_usize(k).unwrap();
    let loss = (0..k).map(|c| T::one() - nums[c] / dens[c]).sum::<T>() / kk;
    Ok(Var::from_fn(Tensor::scalar(loss), vec![probs.clone()], move |inputs, _, g| {
        let gv = g.data()[0] / kk;
        let (od, wd) = (onehot.data(), weights.data());
        let mut gp = Tensor::zeros(inputs[0].shape());
        let d = gp.data_mut();
        for b in 0..n {
            for c in 0..k {
                let base = (b * k + c) * plane;
                let den2 = dens[c] * dens[c];
                for i in base..base + plane {
                    d[i] = -gv * wd[i] * (T::lit(2.0) * od[i] * dens[c] - nums[c]) / den2;
                }
            }
        }
        vec![Some(gp)]
    }))
}

/// Cross-entropy plus class-averaged dice.
pub fn ce_dice<T: Real>(
    probs: &Var<T>,
    labels: &ClassMap,
    region: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    Ok(ops::add(
        &ce_loss(probs, labels, region)?,
        &dice_loss_multiclass(probs, labels, region)?,
    ))
}

/// Binary mask `score >= 0.5`.
pub fn threshold<T: Real>(scores: &Tensor<T>) -> Tensor<T> {
    let t = T::lit(THRESHOLD);
    scores.map(|v| if v >= t { T::one() } else { T::zero() })
}

/// Per-pixel argmax over channels; ties go to the lowest class.
pub fn argmax_classes<T: Real>(scores: &Tensor<T>) -> ClassMap {
    let [n, k, h, w] = scores.shape();
    let plane = h * w;
    let d = scores.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for r in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * plane + r] > d[(b * k + best) * plane + r] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    ClassMap::new([n, h, w], out).expect("argmax shape")
}

/// Changed (`C`) and unchanged (`U`) region masks from a 0/1 change label.
pub fn regions<T: Real>(change_label: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if change_label.shape()[1] != 1 {
        return Err(Error::InvalidInput("change labels have one channel".into()));
    }
    if change_label
        .data()
        .iter()
        .any(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::InvalidInput(
            "change label must be 0/1 so that changed and unchanged areas partition the image"
                .into(),
        ));
    }
    Ok((change_label.clone(), change_label.map(|v| T::one() - v)))
}

/// Thresholded, gradient-free segmentation maps of both branches plus the
/// changed-area mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelPair<T> {
    pub p1: Tensor<T>,
    pub p2: Tensor<T>,
    pub changed_mask: Tensor<T>,
}

pub fn make_pseudolabels<T: Real>(
    outputs: &ModelOutputs<T>,
    change_label: &Tensor<T>,
) -> Result<PseudoLabelPair<T>> {
    let (Some(s1), Some(s2)) = (&outputs.seg1_score, &outputs.seg2_score) else {
        return Err(Error::MissingSegHeads);
    };
    check_shape("change label", change_label.shape(), outputs.change_score.shape())?;
    regions(change_label)?;
    Ok(PseudoLabelPair {
        p1: threshold(s1),
        p2: threshold(s2),
        changed_mask: change_label.clone(),
    })
}

/// Cross-branch pseudolabel losses `(l_seg1, l_seg2)`: each branch should
/// agree with the other branch's pseudolabel on unchanged pixels and
/// disagree on changed pixels.
pub fn ssl_aux_loss<T: Real>(
    s1: &Var<T>,
    s2: &Var<T>,
    pl: &PseudoLabelPair<T>,
) -> Result<(Var<T>, Var<T>)> {
    if s1.shape()[1] != 1 || s2.shape()[1] != 1 {
        return Err(Error::InvalidInput(
            "binary pseudolabel loss needs single-channel segmentation scores".into(),
        ));
    }
    let (c, u) = regions(&pl.changed_mask)?;
    let branch = |s: &Var<T>, other: &Tensor<T>| -> Result<Var<T>> {
        let inverse = other.map(|v| T::one() - v);
        Ok(ops::add(
            &bce_dice(s, other, Some(&u))?,
            &bce_dice(s, &inverse, Some(&c))?,
        ))
    };
    Ok((branch(s1, &pl.p2)?, branch(s2, &pl.p1)?))
}

/// `MSE(S1, S2 | U) - MSE(S1, S2 | C)`; lies in `[-1, 1]` for scores in
/// `[0, 1]`.
pub fn contrastive_aux_loss<T: Real>(
    s1: &Var<T>,
    s2: &Var<T>,
    change_label: &Tensor<T>,
) -> Result<Var<T>> {
    let (c, u) = regions(change_label)?;
    Ok(ops::sub(
        &mse_loss(s1, s2, Some(&u))?,
        &mse_loss(s1, s2, Some(&c))?,
    ))
}

/// Which auxiliary objective accompanies the change loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Change loss plus the binary pseudolabel constraint.
    BinarySsl,
    /// Change loss plus the contrastive term.
    Contrastive,
    /// Supervised classes on changed pixels, pseudolabels on unchanged ones.
    MulticlassSsl,
    /// Change loss only.
    None,
}

impl LossVariant {
    pub fn needs_seg_heads(self) -> bool {
        !matches!(self, LossVariant::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg1: f64,
    pub seg2: f64,
    pub aux: f64,
    /// Multiclass objective: change, changed-area and unchanged-area terms.
    pub mc_change: f64,
    pub mc_changed: f64,
    pub mc_unchanged: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg1: 0.2,
            seg2: 0.2,
            aux: 0.2,
            mc_change: 0.5,
            mc_changed: 0.5,
            mc_unchanged: 0.2,
        }
    }
}

/// Loss components as plain numbers. Components a variant does not use are
/// zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub change: f64,
    pub seg1: f64,
    pub seg2: f64,
    pub aux: f64,
    pub changed_area: f64,
    pub unchanged_area: f64,
}

/// The differentiable total together with its report.
#[derive(Debug, Clone)]
pub struct Loss<T: Real> {
    pub total: Var<T>,
    pub report: LossReport,
}

fn val<T: Real>(v: &Var<T>) -> f64 {
    v.value().data()[0].as_f64()
}

fn seg_pair<T: Real>(out: &ForwardOutput<T>) -> Result<(&Var<T>, &Var<T>)> {
    match (&out.seg1, &out.seg2) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::MissingSegHeads),
    }
}

/// `l_change + w1·l_seg1 + w2·l_seg2`; without segmentation heads the total
/// is the change loss alone. `aux_active` switches the pseudolabel terms
/// off during a warm-up.
pub fn total_loss_binary<T: Real>(
    out: &ForwardOutput<T>,
    change_label: &Tensor<T>,
    weights: &LossWeights,
    aux_active: bool,
) -> Result<Loss<T>> {
    let change = bce_dice(&out.change, change_label, None)?;
    let mut report = LossReport {
        change: val(&change),
        ..LossReport::default()
    };
    let total = match (&out.seg1, &out.seg2) {
        (Some(s1), Some(s2)) if aux_active => {
            let outputs = ModelOutputs {
                change_score: out.change.value().clone(),
                seg1_score: Some(s1.value().clone()),
                seg2_score: Some(s2.value().clone()),
            };
            let pl = make_pseudolabels(&outputs, change_label)?;
            let (l1, l2) = ssl_aux_loss(s1, s2, &pl)?;
            report.seg1 = val(&l1);
            report.seg2 = val(&l2);
            ops::add_n(&[
                change,
                ops::scale(&l1, T::lit(weights.seg1)),
                ops::scale(&l2, T::lit(weights.seg2)),
            ])
        }
        _ => change,
    };
    report.total = val(&total);
    Ok(Loss { total, report })
}

/// `l_change + w·l_aux` with the contrastive auxiliary term.
pub fn total_loss_contrastive<T: Real>(
    out: &ForwardOutput<T>,
    change_label: &Tensor<T>,
    weights: &LossWeights,
    aux_active: bool,
) -> Result<Loss<T>> {
    let change = bce_dice(&out.change, change_label, None)?;
    let mut report = LossReport {
        change: val(&change),
        ..LossReport::default()
    };
    let total = if aux_active {
        let (s1, s2) = seg_pair(out)?;
        let aux = contrastive_aux_loss(s1, s2, change_label)?;
        report.aux = val(&aux);
        ops::add(&change, &ops::scale(&aux, T::lit(weights.aux)))
    } else {
        change
    };
    report.total = val(&total);
    Ok(Loss { total, report })
}

/// Multiclass objective: supervised class loss on changed pixels, argmax
/// pseudolabels exchanged between branches on unchanged pixels, and the
/// binary change loss. Both pseudolabel terms are taken over the unchanged
/// area.
pub fn multiclass_ssl_loss<T: Real>(
    out: &ForwardOutput<T>,
    change_label: &Tensor<T>,
    classes1: &ClassMap,
    classes2: &ClassMap,
    weights: &LossWeights,
    aux_active: bool,
) -> Result<Loss<T>> {
    let (s1, s2) = seg_pair(out)?;
    let (c, u) = regions(change_label)?;
    let mut masked = [classes1.clone(), classes2.clone()];
    let mut stray = 0usize;
    for m in &mut masked {
        for (v, &changed) in m.data.iter_mut().zip(change_label.data()) {
            if changed == T::zero() && *v != ClassMap::IGNORE {
                *v = ClassMap::IGNORE;
                stray += 1;
            }
        }
    }
    if stray > 0 {
        log::warn!("{stray} class labels on unchanged pixels were masked out");
    }
    let change = bce_dice(&out.change, change_label, None)?;
    let l_c = ops::add(
        &ce_dice(s1, &masked[0], Some(&c))?,
        &ce_dice(s2, &masked[1], Some(&c))?,
    );
    let mut report = LossReport {
        change: val(&change),
        changed_area: val(&l_c),
        ..LossReport::default()
    };
    let mut terms = vec![
        ops::scale(&change, T::lit(weights.mc_change)),
        ops::scale(&l_c, T::lit(weights.mc_changed)),
    ];
    if aux_active {
        let p1 = argmax_classes(s1.value());
        let p2 = argmax_classes(s2.value());
        let l_u = ops::add(&ce_dice(s1, &p2, Some(&u))?, &ce_dice(s2, &p1, Some(&u))?);
        report.unchanged_area = val(&l_u);
        terms.push(ops::scale(&l_u, T::lit(weights.mc_unchanged)));
    }
    let total = ops::add_n(&terms);
    report.total = val(&total);
    Ok(Loss { total, report })
}

/// Labels a training step can be scored against.
#[derive(Debug, Clone)]
pub struct Targets<'a, T> {
    pub change: &'a Tensor<T>,
    pub classes: Option<(&'a ClassMap, &'a ClassMap)>,
}

pub fn compute_loss<T: Real>(
    variant: LossVariant,
    out: &ForwardOutput<T>,
    targets: &Targets<'_, T>,
    weights: &LossWeights,
    aux_active: bool,
) -> Result<Loss<T>> {
    match variant {
        LossVariant::BinarySsl => total_loss_binary(out, targets.change, weights, aux_active),
        LossVariant::None => total_loss_binary(out, targets.change, weights, false),
        LossVariant::Contrastive => total_loss_contrastive(out, targets.change, weights, aux_active),
        LossVariant::MulticlassSsl => {
            let (a, b) = targets.classes.ok_or_else(|| {
                Error::InvalidInput("the multiclass objective needs per-temporal class maps".into())
            })?;
            multiclass_ssl_loss(out, targets.change, a, b, weights, aux_active)
        }
    }
}
