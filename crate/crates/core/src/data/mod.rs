//! Images, labels and dataset-level transforms: normalization, tiling,
//! splitting, augmentation and the synthetic generator.

mod augment;
mod synth;

pub use augment::{
    augment, AugmentPlan, AugmentationConfig, Geometry, Photometric, Resample,
};
pub use synth::{gen_synthetic, SynthConfig};

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ClassMap, Real, Tensor};

/// 8-bit image with interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::InvalidInput(alloc::format!(
                "{} bytes cannot fill a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: alloc::vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of range");
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        Self {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }
}

/// Single-channel label map: 0/1 for change labels, class indices for
/// segmentation maps.
pub type Mask8 = Image8;

impl Image8 {
    pub fn mask(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }
}

/// A co-registered bitemporal sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePair {
    pub id: String,
    pub t1: Image8,
    pub t2: Image8,
    pub change: Option<Mask8>,
    /// Per-temporal segmentation maps.
    pub seg1: Option<Mask8>,
    pub seg2: Option<Mask8>,
}

impl ImagePair {
    pub fn width(&self) -> usize {
        self.t1.width
    }

    pub fn height(&self) -> usize {
        self.t1.height
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        let same = |m: &Image8| m.width == w && m.height == h;
        if !same(&self.t2) || self.t1.channels != self.t2.channels {
            return Err(Error::InvalidInput(alloc::format!(
                "{}: temporal images differ in size",
                self.id
            )));
        }
        for m in [&self.change, &self.seg1, &self.seg2].into_iter().flatten() {
            if !same(m) || m.channels != 1 {
                return Err(Error::InvalidInput(alloc::format!(
                    "{}: label size does not match the images",
                    self.id
                )));
            }
        }
        if let Some(c) = &self.change {
            if c.data.iter().any(|&v| v > 1) {
                return Err(Error::InvalidInput(alloc::format!(
                    "{}: change label must be 0/1",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Window `[x0, x0 + size) × [y0, y0 + size)` of every image and label;
    /// the id records the origin.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Self {
        let c = |m: &Image8| m.crop(x0, y0, size, size);
        Self {
            id: alloc::format!("{}_y{y0}_x{x0}", self.id),
            t1: c(&self.t1),
            t2: c(&self.t2),
            change: self.change.as_ref().map(c),
            seg1: self.seg1.as_ref().map(c),
            seg2: self.seg2.as_ref().map(c),
        }
    }

    /// Exchanges the temporal order; the change label stays.
    pub fn swapped(&self) -> Self {
        Self {
            id: self.id.clone(),
            t1: self.t2.clone(),
            t2: self.t1.clone(),
            change: self.change.clone(),
            seg1: self.seg2.clone(),
            seg2: self.seg1.clone(),
        }
    }
}

/// Per-channel mean and standard deviation in 8-bit units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Running per-channel sums for [`ChannelStats`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StatsAccumulator {
    sum: Vec<f64>,
    sq: Vec<f64>,
    count: u64,
}

impl StatsAccumulator {
    pub fn add_image(&mut self, img: &Image8) -> Result<()> {
        if self.sum.is_empty() {
            self.sum = alloc::vec![0.0; img.channels];
            self.sq = alloc::vec![0.0; img.channels];
        }
        if img.channels != self.sum.len() {
            return Err(Error::InvalidInput("images differ in channel count".into()));
        }
        for px in img.data.chunks(img.channels) {
            for (c, &v) in px.iter().enumerate() {
                self.sum[c] += v as f64;
                self.sq[c] += (v as f64) * (v as f64);
            }
        }
        self.count += (img.width * img.height) as u64;
        Ok(())
    }

    /// Adds both temporal images.
    pub fn add_pair(&mut self, p: &ImagePair) -> Result<()> {
        self.add_image(&p.t1)?;
        self.add_image(&p.t2)
    }

    pub fn finish(&self) -> Result<ChannelStats> {
        if self.count == 0 {
            return Err(Error::EmptySplit("train".into()));
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| num_traits::Float::sqrt((q / n - m * m).max(0.0)))
            .collect();
        Ok(ChannelStats { mean, std })
    }
}

impl ChannelStats {
    /// Statistics over both temporal images of every pair.
    pub fn compute<'a>(pairs: impl IntoIterator<Item = &'a ImagePair>) -> Result<Self> {
        let mut acc = StatsAccumulator::default();
        for p in pairs {
            acc.add_pair(p)?;
        }
        acc.finish()
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: alloc::vec![0.0; channels],
            std: alloc::vec![1.0; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::InvalidInput(alloc::format!(
                "statistics cover {} channels, images have {channels}",
                self.mean.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(
                "standard deviation must be positive in every channel".into(),
            ));
        }
        Ok(())
    }
}

/// `(img - mean) / std` per channel, as a `[1, c, h, w]` tensor.
pub fn normalize_image<T: Real>(img: &Image8, stats: &ChannelStats) -> Result<Tensor<T>> {
    stats.validate(img.channels)?;
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut out = Tensor::zeros([1, c, h, w]);
    let d = out.data_mut();
    let plane = w * h;
    for ch in 0..c {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        for i in 0..plane {
            d[ch * plane + i] = T::lit((img.data[i * c + ch] as f64 - m) / s);
        }
    }
    Ok(out)
}

/// 0/1 label map as a `[1, 1, h, w]` tensor.
pub fn mask_tensor<T: Real>(m: &Mask8) -> Tensor<T> {
    Tensor::from_fn([1, 1, m.height, m.width], |i| T::lit(m.data[i] as f64))
}

/// Class label map as a `[1, h, w]` class map.
pub fn class_map(m: &Mask8) -> ClassMap {
    ClassMap {
        shape: [1, m.height, m.width],
        data: m.data.clone(),
    }
}

/// A pair ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPair<T> {
    pub id: String,
    pub t1: Tensor<T>,
    pub t2: Tensor<T>,
    pub change: Option<Tensor<T>>,
    pub seg1: Option<ClassMap>,
    pub seg2: Option<ClassMap>,
}

pub fn normalize<T: Real>(pair: &ImagePair, stats: &ChannelStats) -> Result<NormalizedPair<T>> {
    pair.validate()?;
    Ok(NormalizedPair {
        id: pair.id.clone(),
        t1: normalize_image(&pair.t1, stats)?,
        t2: normalize_image(&pair.t2, stats)?,
        change: pair.change.as_ref().map(mask_tensor),
        seg1: pair.seg1.as_ref().map(class_map),
        seg2: pair.seg2.as_ref().map(class_map),
    })
}

/// Window origins along one axis: stride `size - overlap`, with a final
/// window anchored to the far edge when the stride does not land on it.
pub fn tile_origins(len: usize, size: usize, overlap: usize) -> Result<Vec<usize>> {
    if size == 0 || overlap >= size {
        return Err(Error::InvalidInput(alloc::format!(
            "overlap {overlap} must be smaller than tile size {size}"
        )));
    }
    if size > len {
        return Err(Error::InvalidInput(alloc::format!(
            "tile size {size} exceeds image extent {len}"
        )));
    }
    let stride = size - overlap;
    let mut out: Vec<usize> = (0..=(len - size) / stride).map(|i| i * stride).collect();
    if *out.last().expect("at least one origin") + size < len {
        out.push(len - size);
    }
    Ok(out)
}

/// Cuts every pair into overlapping square tiles.
pub fn crop_dataset(pairs: &[ImagePair], size: usize, overlap: usize) -> Result<Vec<ImagePair>> {
    let mut out = Vec::new();
    for p in pairs {
        p.validate()?;
        let ys = tile_origins(p.height(), size, overlap)?;
        let xs = tile_origins(p.width(), size, overlap)?;
        for &y in &ys {
            for &x in &xs {
                out.push(p.crop(x, y, size));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Deterministically shuffles `n` items and assigns them to splits in
/// proportion to `ratios` (train, validation, test).
pub fn split_assignments(n: usize, ratios: [u32; 3], seed: u64) -> Result<Vec<Split>> {
    let total: u32 = ratios.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("split ratios must not all be zero".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_for(&[seed, rng::stream::SPLIT]));
    let n_train = n * ratios[0] as usize / total as usize;
    let n_val = n * ratios[1] as usize / total as usize;
    let mut out = alloc::vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(w: usize, h: usize) -> ImagePair {
        let img = |k: usize| Image8::new(w, h, 3, (0..w * h * 3).map(|i| ((i * k) % 251) as u8).collect()).unwrap();
        ImagePair {
            id: "p".into(),
            t1: img(3),
            t2: img(7),
            change: Some(Image8::mask(w, h, (0..w * h).map(|i| (i % 5 == 0) as u8).collect()).unwrap()),
            seg1: None,
            seg2: None,
        }
    }

    #[test]
    fn normalizing_the_mean_gives_zeros_and_unit_stats_are_identity() {
        let img = Image8::filled(4, 3, 3, 90);
        let stats = ChannelStats {
            mean: alloc::vec![90.0; 3],
            std: alloc::vec![2.0; 3],
        };
        assert!(normalize_image::<f64>(&img, &stats).unwrap().data().iter().all(|&v| v == 0.0));
        let p = pair(5, 4);
        let t: Tensor<f64> = normalize_image(&p.t1, &ChannelStats::identity(3)).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..3 {
                    assert_eq!(t.at(0, c, y, x), p.t1.get(x, y, c) as f64);
                }
            }
        }
    }

    #[test]
    fn stats_of_a_split_match_a_direct_computation() {
        let ps = [pair(4, 4), pair(4, 4)];
        let s = ChannelStats::compute(&ps).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = ps
                .iter()
                .flat_map(|p| [&p.t1, &p.t2])
                .flat_map(|img| img.data.iter().skip(c).step_by(3).map(|&v| v as f64))
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!((s.mean[c] - mean).abs() < 1e-9);
            assert!((s.std[c] - num_traits::Float::sqrt(var)).abs() < 1e-9);
        }
        assert!(ChannelStats::compute(&[]).is_err());
    }

    #[test]
    fn tile_counts() {
        assert_eq!(tile_origins(1024, 512, 256).unwrap(), [0, 256, 512]);
        assert_eq!(crop_dataset(&[pair(1024, 1024)], 512, 256).unwrap().len(), 9);
        assert_eq!(crop_dataset(&[pair(1024, 1024)], 256, 128).unwrap().len(), 49);
        let p = pair(256, 256);
        let one = crop_dataset(core::slice::from_ref(&p), 256, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((&one[0].t1, &one[0].t2, &one[0].change), (&p.t1, &p.t2, &p.change));
        // The last window is anchored to the far edge.
        assert_eq!(tile_origins(100, 32, 0).unwrap(), [0, 32, 64, 68]);
        assert!(tile_origins(16, 32, 0).is_err());
        assert!(tile_origins(64, 32, 32).is_err());
    }

    #[test]
    fn crops_record_their_origin() {
        let c = pair(8, 8).crop(4, 2, 4);
        assert_eq!(c.id, "p_y2_x4");
        assert_eq!(c.t1.get(0, 0, 1), pair(8, 8).t1.get(4, 2, 1));
    }

    #[test]
    fn splits_follow_the_ratio_and_the_seed() {
        let a = split_assignments(100, [7, 1, 2], 3).unwrap();
        let count = |s| a.iter().filter(|&&x| x == s).count();
        assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (70, 10, 20));
        assert_eq!(a, split_assignments(100, [7, 1, 2], 3).unwrap());
        assert_ne!(a, split_assignments(100, [7, 1, 2], 4).unwrap());
        assert!(split_assignments(5, [0, 0, 0], 0).is_err());
        assert_eq!(Split::parse("val"), Some(Split::Validation));
    }

    #[test]
    fn invalid_pairs_are_rejected() {
        let mut p = pair(4, 4);
        p.change.as_mut().unwrap().data[0] = 255;
        assert!(p.validate().is_err());
        let mut q = pair(4, 4);
        q.t2 = Image8::filled(4, 5, 3, 0);
        assert!(q.validate().is_err());
    }
}
