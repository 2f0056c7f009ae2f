//! Channel/spatial rearrangements: concatenation, resampling, pooling and
//! channelwise gating.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::tensor::{Real, Tensor};

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(xs: &[Var<T>]) -> Var<T> {
    assert!(!xs.is_empty(), "concat of nothing");
    let [n, _, h, w] = xs[0].shape();
    for x in xs {
        let [xn, _, xh, xw] = x.shape();
        assert!(xn == n && xh == h && xw == w, "concat: batch/spatial mismatch");
    }
    let widths: Vec<usize> = xs.iter().map(|x| x.shape()[1]).collect();
    let c: usize = widths.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c * plane);
    for b in 0..n {
        for (x, &cx) in xs.iter().zip(&widths) {
            data.extend_from_slice(&x.value().data()[b * cx * plane..(b + 1) * cx * plane]);
        }
    }
    let out = Tensor::from_vec([n, c, h, w], data).expect("concat shape");
    Var::from_fn(out, xs.to_vec(), move |inputs, _, g| {
        let gd = g.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (x, &cx) in inputs.iter().zip(&widths) {
            if x.requires_grad() {
                let mut gx = Vec::with_capacity(n * cx * plane);
                for b in 0..n {
                    let start = (b * c + offset) * plane;
                    gx.extend_from_slice(&gd[start..start + cx * plane]);
                }
                grads.push(Some(Tensor::from_vec(x.shape(), gx).expect("concat grad")));
            } else {
                grads.push(None);
            }
            offset += cx;
        }
        grads
    })
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nearest2x<T: Real>(x: &Var<T>) -> Var<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.value().data();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    {
        let od = out.data_mut();
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut od[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                let srow = &s[(y / 2) * w..(y / 2 + 1) * w];
                for (xx, v) in d[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *v = srow[xx / 2];
                }
            }
        }
    }
    Var::from_fn(out, vec![x.clone()], move |_, _, g| {
        let gd = g.data();
        let mut gx = Tensor::zeros([n, c, h, w]);
        let gxd = gx.data_mut();
        for p in 0..n * c {
            let s = &gd[p * oh * ow..(p + 1) * oh * ow];
            let d = &mut gxd[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    d[(y / 2) * w + xx / 2] += s[y * ow + xx];
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Source taps for 2× bilinear upsampling with half-pixel centres
/// (`align_corners = false`): `(lower index, upper index, upper weight)`.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (num_traits::Float::floor(src) as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear 2× upsampling with half-pixel centres.
pub fn upsample_bilinear2x<T: Real>(x: &Var<T>) -> Var<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let ty: Vec<(usize, usize, T)> = bilinear_taps(h)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::lit(f)))
        .collect();
    let tx: Vec<(usize, usize, T)> = bilinear_taps(w)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::lit(f)))
        .collect();
    let src = x.value().data();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    {
        let od = out.data_mut();
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut od[p * oh * ow..(p + 1) * oh * ow];
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = s[y0 * w + x0] * (T::one() - fx) + s[y0 * w + x1] * fx;
                    let bot = s[y1 * w + x0] * (T::one() - fx) + s[y1 * w + x1] * fx;
                    d[y * ow + xx] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    Var::from_fn(out, vec![x.clone()], move |_, _, g| {
        let gd = g.data();
        let mut gx = Tensor::zeros([n, c, h, w]);
        let gxd = gx.data_mut();
        for p in 0..n * c {
            let s = &gd[p * oh * ow..(p + 1) * oh * ow];
            let d = &mut gxd[p * h * w..(p + 1) * h * w];
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = s[y * ow + xx];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    d[y0 * w + x0] += top * (T::one() - fx);
                    d[y0 * w + x1] += top * fx;
                    d[y1 * w + x0] += bot * (T::one() - fx);
                    d[y1 * w + x1] += bot * fx;
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Global average pooling to `[n, c, 1, 1]`.
pub fn global_avg_pool<T: Real>(x: &Var<T>) -> Var<T> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let inv = T::one() / T::from_usize(plane).expect("plane");
    let src = x.value().data();
    let out = Tensor::from_fn([n, c, 1, 1], |p| {
        src[p * plane..(p + 1) * plane].iter().copied().sum::<T>() * inv
    });
    Var::from_fn(out, vec![x.clone()], move |_, _, g| {
        let gd = g.data();
        let gx = Tensor::from_fn([n, c, h, w], |i| gd[i / plane] * inv);
        vec![Some(gx)]
    })
}

/// Multiplies every plane of `x: [n, c, h, w]` by `gate: [n, c, 1, 1]`.
pub fn mul_channel<T: Real>(x: &Var<T>, gate: &Var<T>) -> Var<T> {
    let [n, c, h, w] = x.shape();
    assert_eq!(gate.shape(), [n, c, 1, 1], "mul_channel: gate shape");
    let plane = h * w;
    let gv = gate.value().data();
    let xv = x.value().data();
    let out = Tensor::from_fn([n, c, h, w], |i| xv[i] * gv[i / plane]);
    Var::from_fn(out, vec![x.clone(), gate.clone()], move |inputs, _, g| {
        let gd = g.data();
        let xv = inputs[0].value().data();
        let gv = inputs[1].value().data();
        let gx = inputs[0]
            .requires_grad()
            .then(|| Tensor::from_fn([n, c, h, w], |i| gd[i] * gv[i / plane]));
        let ggate = inputs[1].requires_grad().then(|| {
            Tensor::from_fn([n, c, 1, 1], |p| {
                (p * plane..(p + 1) * plane).map(|i| gd[i] * xv[i]).sum::<T>()
            })
        });
        vec![gx, ggate]
    })
}

/// Softmax across channels at every pixel.
pub fn softmax_channels<T: Real>(x: &Var<T>) -> Var<T> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let src = x.value().data();
    let mut out = Tensor::zeros([n, c, h, w]);
    {
        let od = out.data_mut();
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(src[base + ch * plane + p]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[base + ch * plane + p] - mx).exp();
                    od[base + ch * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    od[base + ch * plane + p] /= z;
                }
            }
        }
    }
    Var::from_fn(out, vec![x.clone()], move |_, out, g| {
        let (od, gd) = (out.data(), g.data());
        let mut gx = Tensor::zeros([n, c, h, w]);
        let gxd = gx.data_mut();
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let dot: T = (0..c)
                    .map(|ch| od[base + ch * plane + p] * gd[base + ch * plane + p])
                    .sum();
                for ch in 0..c {
                    let i = base + ch * plane + p;
                    gxd[i] = od[i] * (gd[i] - dot);
                }
            }
        }
        vec![Some(gx)]
    })
}
