//! Prediction on whole images or overlapping tiles, mask export and error
//! visualisation.

use alloc::vec::Vec;

use crate::data::{normalize_image, tile_origins, ChannelStats, Image8, ImagePair, Mask8};
use crate::error::{Error, Result};
use crate::losses::{argmax_classes, threshold};
use crate::metrics::ConfusionCounts;
use crate::network::{ModelOutputs, Network};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::training::{make_batch, PairSource};

/// Thresholded masks of one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub scores: ModelOutputs<T>,
    /// 0/1 change mask.
    pub change: Mask8,
    /// Per-temporal class masks (0/1 for a single-class head).
    pub seg1: Option<Mask8>,
    pub seg2: Option<Mask8>,
}

/// 0/1 mask of `score ≥ 0.5` from a `[1, 1, h, w]` score map.
pub fn change_mask<T: Real>(score: &Tensor<T>) -> Result<Mask8> {
    let [n, c, h, w] = score.shape();
    if n != 1 || c != 1 {
        return Err(Error::InvalidInput(alloc::format!(
            "expected a single score map, got {:?}",
            score.shape()
        )));
    }
    let data = threshold(score).data().iter().map(|&v| (v == T::one()) as u8).collect();
    Image8::mask(w, h, data)
}

/// Class mask from a `[1, k, h, w]` score map: thresholded for one class,
/// argmax otherwise.
pub fn seg_mask<T: Real>(score: &Tensor<T>) -> Result<Mask8> {
    let [n, k, h, w] = score.shape();
    if n != 1 {
        return Err(Error::InvalidInput("expected a single sample".into()));
    }
    if k == 1 {
        change_mask(score)
    } else {
        Image8::mask(w, h, argmax_classes(score).data)
    }
}

fn to_prediction<T: Real>(scores: ModelOutputs<T>) -> Result<Prediction<T>> {
    let change = change_mask(&scores.change_score)?;
    let seg1 = scores.seg1_score.as_ref().map(seg_mask).transpose()?;
    let seg2 = scores.seg2_score.as_ref().map(seg_mask).transpose()?;
    Ok(Prediction {
        scores,
        change,
        seg1,
        seg2,
    })
}

fn inputs<T: Real>(t1: &Image8, t2: &Image8, stats: &ChannelStats) -> Result<(Tensor<T>, Tensor<T>)> {
    if (t1.width, t1.height, t1.channels) != (t2.width, t2.height, t2.channels) {
        return Err(Error::InvalidInput("temporal images differ in size".into()));
    }
    Ok((normalize_image(t1, stats)?, normalize_image(t2, stats)?))
}

/// Whole-image prediction.
pub fn predict<T: Real>(
    net: &Network,
    params: &ParamStore<T>,
    t1: &Image8,
    t2: &Image8,
    stats: &ChannelStats,
) -> Result<Prediction<T>> {
    let (a, b) = inputs(t1, t2, stats)?;
    to_prediction(net.predict(params, &a, &b)?)
}

/// Prediction over `tile × tile` windows overlapping by `overlap` pixels;
/// scores are averaged where windows overlap. Falls back to whole-image
/// prediction when the tile exceeds either image extent.
pub fn predict_tiled<T: Real>(
    net: &Network,
    params: &ParamStore<T>,
    t1: &Image8,
    t2: &Image8,
    stats: &ChannelStats,
    tile: usize,
    overlap: usize,
) -> Result<Prediction<T>> {
    let (a, b) = inputs(t1, t2, stats)?;
    to_prediction(tiled_scores(net, params, &a, &b, tile, overlap)?)
}

/// Tiled forward on normalized `[1, c, h, w]` tensors.
pub fn tiled_scores<T: Real>(
    net: &Network,
    params: &ParamStore<T>,
    t1: &Tensor<T>,
    t2: &Tensor<T>,
    tile: usize,
    overlap: usize,
) -> Result<ModelOutputs<T>> {
    let [n, _, h, w] = t1.shape();
    if n != 1 {
        return Err(Error::InvalidInput("tiled prediction takes one sample".into()));
    }
    if tile == 0 || !tile.is_multiple_of(16) {
        return Err(Error::InvalidInput(alloc::format!(
            "tile size {tile} is not a positive multiple of 16"
        )));
    }
    if tile > h || tile > w {
        return net.predict(params, t1, t2);
    }
    let ys = tile_origins(h, tile, overlap)?;
    let xs = tile_origins(w, tile, overlap)?;

    let mut acc: Option<ModelOutputs<T>> = None;
    let mut hits = alloc::vec![0u32; h * w];
    for &y in &ys {
        for &x in &xs {
            let out = net.predict(params, &t1.crop(y, x, tile, tile), &t2.crop(y, x, tile, tile))?;
            let acc = acc.get_or_insert_with(|| ModelOutputs {
                change_score: Tensor::zeros([1, out.change_score.shape()[1], h, w]),
                seg1_score: out.seg1_score.as_ref().map(|s| Tensor::zeros([1, s.shape()[1], h, w])),
                seg2_score: out.seg2_score.as_ref().map(|s| Tensor::zeros([1, s.shape()[1], h, w])),
            });
            paste_add(&mut acc.change_score, &out.change_score, y, x);
            if let (Some(dst), Some(src)) = (acc.seg1_score.as_mut(), out.seg1_score.as_ref()) {
                paste_add(dst, src, y, x);
            }
            if let (Some(dst), Some(src)) = (acc.seg2_score.as_mut(), out.seg2_score.as_ref()) {
                paste_add(dst, src, y, x);
            }
            for yy in y..y + tile {
                for v in &mut hits[yy * w + x..yy * w + x + tile] {
                    *v += 1;
                }
            }
        }
    }
    let mut out = acc.expect("at least one tile");
    let average = |t: &mut Tensor<T>| {
        let plane = h * w;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v /= T::lit(hits[i % plane] as f64);
        }
    };
    average(&mut out.change_score);
    out.seg1_score.as_mut().map(average);
    out.seg2_score.as_mut().map(average);
    Ok(out)
}

fn paste_add<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>, y0: usize, x0: usize) {
    let [_, c, th, tw] = src.shape();
    let [_, _, h, w] = dst.shape();
    let d = dst.data_mut();
    for ch in 0..c {
        for y in 0..th {
            let s = &src.data()[(ch * th + y) * tw..(ch * th + y + 1) * tw];
            let row = (ch * h + y0 + y) * w + x0;
            for (o, &v) in d[row..row + tw].iter_mut().zip(s) {
                *o += v;
            }
        }
    }
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

/// RGB error map of a predicted against a reference change mask: true
/// positives white, true negatives black, false positives red, false
/// negatives blue.
pub fn render_error_mask(pred: &Mask8, target: &Mask8) -> Result<(Image8, ConfusionCounts)> {
    if (pred.width, pred.height, pred.channels) != (target.width, target.height, target.channels)
        || pred.channels != 1
    {
        return Err(Error::InvalidInput("masks differ in size".into()));
    }
    let mut counts = ConfusionCounts::default();
    let mut data = Vec::with_capacity(pred.data.len() * 3);
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        if p > 1 || t > 1 {
            return Err(Error::InvalidInput("masks must be 0/1".into()));
        }
        let (p, t) = (p == 1, t == 1);
        counts.record(p, t);
        data.extend_from_slice(match (p, t) {
            (true, true) => &TP_COLOR,
            (false, false) => &TN_COLOR,
            (true, false) => &FP_COLOR,
            (false, true) => &FN_COLOR,
        });
    }
    Ok((Image8::new(pred.width, pred.height, 3, data)?, counts))
}

/// Building-mask confusion of the single-class segmentation heads against
/// per-temporal labels, pooled over both dates. The heads are never told
/// which side of the threshold is "building", so the second count scores
/// the inverted prediction.
pub fn segmentation_confusion<T: Real, S: PairSource + ?Sized>(
    net: &Network,
    params: &ParamStore<T>,
    pairs: &S,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<[ConfusionCounts; 2]> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let mut direct = ConfusionCounts::default();
    let mut flipped = ConfusionCounts::default();
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let ps: Vec<ImagePair> = chunk.iter().map(|&i| pairs.get(i)).collect::<Result<_>>()?;
        let batch = make_batch::<T>(&ps, stats, false)?;
        let out = net.predict(params, &batch.t1, &batch.t2)?;
        let (s1, s2) = match (&out.seg1_score, &out.seg2_score) {
            (Some(a), Some(b)) if a.shape()[1] == 1 => (a, b),
            _ => return Err(Error::MissingSegHeads),
        };
        for (scores, second) in [(s1, false), (s2, true)] {
            let plane = scores.plane();
            for (k, p) in ps.iter().enumerate() {
                let label = if second { &p.seg2 } else { &p.seg1 };
                let label = label
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("segmentation labels missing".into()))?;
                let s = &scores.data()[k * plane..(k + 1) * plane];
                for (&v, &t) in s.iter().zip(&label.data) {
                    let p = v >= T::lit(0.5);
                    direct.record(p, t == 1);
                    flipped.record(!p, t == 1);
                }
            }
        }
    }
    Ok([direct, flipped])
}
