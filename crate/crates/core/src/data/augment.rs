//! Training-time augmentation.
//!
//! A random [`AugmentPlan`] is drawn first and then applied, so the same
//! geometric transform can be replayed on any image or label of the pair.
//! Geometry is shared by both temporal images and all labels; photometric
//! changes are drawn independently per temporal image.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float;

use super::{Image8, ImagePair};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub flip_p: f64,
    pub transpose_p: f64,
    pub rotate_p: f64,
    /// Largest rotation in degrees, either direction.
    pub rotate_max_deg: f64,
    pub zoom_p: f64,
    /// Scale factors are drawn from `[1 - zoom_max, 1 + zoom_max]`.
    pub zoom_max: f64,
    pub hsv_p: f64,
    /// Largest hue shift, in 8-bit hue units (0..180).
    pub hue_shift: f64,
    pub sat_shift: f64,
    pub val_shift: f64,
    pub noise_p: f64,
    /// Noise variance range in squared 8-bit intensity units.
    pub noise_var_min: f64,
    pub noise_var_max: f64,
    pub swap_p: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            transpose_p: 0.5,
            rotate_p: 0.3,
            rotate_max_deg: 45.0,
            zoom_p: 0.3,
            zoom_max: 0.1,
            hsv_p: 0.3,
            hue_shift: 10.0,
            sat_shift: 5.0,
            val_shift: 10.0,
            noise_p: 0.3,
            noise_var_min: 10.0,
            noise_var_max: 50.0,
            swap_p: 0.5,
        }
    }
}

impl AugmentationConfig {
    /// Every transform switched off.
    pub fn none() -> Self {
        Self {
            flip_p: 0.0,
            transpose_p: 0.0,
            rotate_p: 0.0,
            zoom_p: 0.0,
            hsv_p: 0.0,
            noise_p: 0.0,
            swap_p: 0.0,
            ..Self::default()
        }
    }

    /// Probabilities clamped to `[0, 1]`, ranges made non-negative and
    /// ordered.
    pub fn sanitized(&self) -> Self {
        let p = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let nn = |v: f64| if v.is_finite() { v.abs() } else { 0.0 };
        let (lo, hi) = (nn(self.noise_var_min), nn(self.noise_var_max));
        Self {
            flip_p: p(self.flip_p),
            transpose_p: p(self.transpose_p),
            rotate_p: p(self.rotate_p),
            rotate_max_deg: nn(self.rotate_max_deg),
            zoom_p: p(self.zoom_p),
            zoom_max: nn(self.zoom_max).min(0.9),
            hsv_p: p(self.hsv_p),
            hue_shift: nn(self.hue_shift),
            sat_shift: nn(self.sat_shift),
            val_shift: nn(self.val_shift),
            noise_p: p(self.noise_p),
            noise_var_min: lo.min(hi),
            noise_var_max: lo.max(hi),
            swap_p: p(self.swap_p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Images.
    Bilinear,
    /// Labels.
    Nearest,
}

/// Geometric transform shared by every plane of a pair. The default is the
/// identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub flip_h: bool,
    pub flip_v: bool,
    pub transpose: bool,
    /// Rotation in degrees, counter-clockwise about the image centre.
    pub rotate_deg: f64,
    pub zoom: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            transpose: false,
            rotate_deg: 0.0,
            zoom: 1.0,
        }
    }
}

/// Photometric change for one temporal image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Photometric {
    pub hsv: Option<[f64; 3]>,
    /// Noise standard deviation and the seed of its stream.
    pub noise: Option<(f64, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentPlan {
    pub geometry: Geometry,
    pub photometric: [Photometric; 2],
    pub swap: bool,
}

fn coin(rng: &mut Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

fn sym(rng: &mut Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

impl AugmentPlan {
    pub fn sample(cfg: &AugmentationConfig, square: bool, rng: &mut Rng) -> Self {
        let cfg = cfg.sanitized();
        let mut g = Geometry::default();
        if coin(rng, cfg.flip_p) {
            // One of horizontal, vertical or both.
            match rng.random_range(0..3u8) {
                0 => g.flip_h = true,
                1 => g.flip_v = true,
                _ => {
                    g.flip_h = true;
                    g.flip_v = true;
                }
            }
        }
        // Transposing a non-square image would change its size.
        g.transpose = coin(rng, cfg.transpose_p) && square;
        if coin(rng, cfg.rotate_p) {
            g.rotate_deg = sym(rng, cfg.rotate_max_deg);
        }
        if coin(rng, cfg.zoom_p) {
            g.zoom = 1.0 + sym(rng, cfg.zoom_max);
        }
        let mut photometric = [Photometric::default(); 2];
        for ph in &mut photometric {
            if coin(rng, cfg.hsv_p) {
                ph.hsv = Some([
                    sym(rng, cfg.hue_shift).round(),
                    sym(rng, cfg.sat_shift).round(),
                    sym(rng, cfg.val_shift).round(),
                ]);
            }
            if coin(rng, cfg.noise_p) {
                let var = if cfg.noise_var_max > cfg.noise_var_min {
                    rng.random_range(cfg.noise_var_min..=cfg.noise_var_max)
                } else {
                    cfg.noise_var_min
                };
                ph.noise = Some((num_traits::Float::sqrt(var), rng.random::<u64>()));
            }
        }
        let swap = coin(rng, cfg.swap_p);
        Self {
            geometry: g,
            photometric,
            swap,
        }
    }

    pub fn apply(&self, pair: &ImagePair) -> ImagePair {
        let g = &self.geometry;
        let t1 = self.photometric[0].apply(&g.apply(&pair.t1, Resample::Bilinear));
        let t2 = self.photometric[1].apply(&g.apply(&pair.t2, Resample::Bilinear));
        let lab = |m: &Option<Image8>| m.as_ref().map(|m| g.apply(m, Resample::Nearest));
        let out = ImagePair {
            id: pair.id.clone(),
            t1,
            t2,
            change: lab(&pair.change),
            seg1: lab(&pair.seg1),
            seg2: lab(&pair.seg2),
        };
        if self.swap {
            out.swapped()
        } else {
            out
        }
    }
}

/// Draws a plan from `rng` and applies it.
pub fn augment(pair: &ImagePair, cfg: &AugmentationConfig, rng: &mut Rng) -> ImagePair {
    AugmentPlan::sample(cfg, pair.width() == pair.height(), rng).apply(pair)
}

/// Reflects a coordinate into `[0, len - 1]` (mirror without repeating the
/// edge sample).
fn reflect(mut v: f64, len: usize) -> f64 {
    if len == 1 {
        return 0.0;
    }
    let max = (len - 1) as f64;
    let period = 2.0 * max;
    v = rem_euclid(v, period);
    if v > max {
        period - v
    } else {
        v
    }
}

impl Geometry {
    pub fn is_identity(&self) -> bool {
        !self.flip_h && !self.flip_v && !self.transpose && self.rotate_deg == 0.0 && self.zoom == 1.0
    }

    fn permute(&self, img: &Image8) -> Image8 {
        let (w, h, c) = (img.width, img.height, img.channels);
        let (ow, oh) = if self.transpose { (h, w) } else { (w, h) };
        let mut out = Image8::filled(ow, oh, c, 0);
        for y in 0..oh {
            for x in 0..ow {
                // Output (x, y) reads the flipped, then transposed, source.
                let (mut sx, mut sy) = if self.transpose { (y, x) } else { (x, y) };
                if self.flip_h {
                    sx = w - 1 - sx;
                }
                if self.flip_v {
                    sy = h - 1 - sy;
                }
                for ch in 0..c {
                    out.set(x, y, ch, img.get(sx, sy, ch));
                }
            }
        }
        out
    }

    fn warp(&self, img: &Image8, mode: Resample) -> Image8 {
        let (w, h, c) = (img.width, img.height, img.channels);
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let theta = self.rotate_deg.to_radians();
        let (s, co) = (num_traits::Float::sin(theta), num_traits::Float::cos(theta));
        let inv = 1.0 / self.zoom;
        let mut out = Image8::filled(w, h, c, 0);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                // Inverse map: undo zoom, then undo rotation.
                let sx = cx + inv * (co * dx - s * dy);
                let sy = cy + inv * (s * dx + co * dy);
                let (sx, sy) = (reflect(sx, w), reflect(sy, h));
                match mode {
                    Resample::Nearest => {
                        let (ix, iy) = (
                            (sx.round() as usize).min(w - 1),
                            (sy.round() as usize).min(h - 1),
                        );
                        for ch in 0..c {
                            out.set(x, y, ch, img.get(ix, iy, ch));
                        }
                    }
                    Resample::Bilinear => {
                        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                        for ch in 0..c {
                            let v = (1.0 - fy)
                                * ((1.0 - fx) * img.get(x0, y0, ch) as f64
                                    + fx * img.get(x1, y0, ch) as f64)
                                + fy * ((1.0 - fx) * img.get(x0, y1, ch) as f64
                                    + fx * img.get(x1, y1, ch) as f64);
                            out.set(x, y, ch, v.round().clamp(0.0, 255.0) as u8);
                        }
                    }
                }
            }
        }
        out
    }

    /// Applies the transform to one image or label.
    pub fn apply(&self, img: &Image8, mode: Resample) -> Image8 {
        let mut out = if self.flip_h || self.flip_v || self.transpose {
            self.permute(img)
        } else {
            img.clone()
        };
        if self.rotate_deg != 0.0 || self.zoom != 1.0 {
            out = self.warp(&out, mode);
        }
        out
    }
}

/// RGB → HSV on the 8-bit scale (`h` in `[0, 180)`, `s`, `v` in
/// `[0, 255]`).
pub(crate) fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let v = max;
    let s = if max > 0.0 { 255.0 * d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d)
    } else if max == g {
        60.0 * ((b - r) / d) + 120.0
    } else {
        60.0 * ((r - g) / d) + 240.0
    };
    (rem_euclid(h, 360.0) / 2.0, s, v)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = rem_euclid(h * 2.0, 360.0) / 60.0;
    let s = s / 255.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

impl Photometric {
    pub fn apply(&self, img: &Image8) -> Image8 {
        let mut out = img.clone();
        if let (Some([dh, ds, dv]), 3) = (self.hsv, img.channels) {
            for px in out.data.chunks_mut(3) {
                let (h, s, v) = rgb_to_hsv(px[0] as f64, px[1] as f64, px[2] as f64);
                let h = rem_euclid(h + dh, 180.0);
                let s = (s + ds).clamp(0.0, 255.0);
                let v = (v + dv).clamp(0.0, 255.0);
                let (r, g, b) = hsv_to_rgb(h, s, v);
                px[0] = r.round().clamp(0.0, 255.0) as u8;
                px[1] = g.round().clamp(0.0, 255.0) as u8;
                px[2] = b.round().clamp(0.0, 255.0) as u8;
            }
        }
        if let Some((std, seed)) = self.noise {
            if std > 0.0 {
                let dist = Normal::new(0.0, std).expect("finite std");
                let mut r = crate::rng::rng_for(&[seed, crate::rng::stream::AUGMENT]);
                for v in &mut out.data {
                    *v = (*v as f64 + dist.sample(&mut r)).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        out
    }
}

fn rem_euclid(v: f64, p: f64) -> f64 {
    let r = v - p * (v / p).floor();
    if r >= p {
        0.0
    } else {
        r
    }
}
