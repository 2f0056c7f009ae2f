//! 2-D convolution via im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// A 1×1, stride-1, unpadded convolution reads its input directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution of `x: [n, cin, h, w]` with `weight: [cout, cin, k, k]`,
/// optional `bias: [cout, 1, 1, 1]`, zero padding `pad` and the given stride.
pub fn conv2d<T: Real>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    pad: usize,
) -> Var<T> {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, k, k2] = weight.shape();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
    assert_eq!(k, k2, "conv2d: non-square kernel");
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d: input smaller than kernel");
    let geo = ConvGeometry {
        cin,
        h,
        w,
        k,
        stride,
        pad,
    };
    let (oh, ow) = geo.out_hw();
    let ohw = oh * ow;
    let rows = geo.rows();

    let xin = x.value().data();
    let wdata = weight.value().data();
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    {
        let od = out.data_mut();
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ohw] };
        for b in 0..n {
            let xb = &xin[b * cin * h * w..(b + 1) * cin * h * w];
            let src: &[T] = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo, &mut cols);
                &cols
            };
            let ob = &mut od[b * cout * ohw..(b + 1) * cout * ohw];
            T::gemm(cout, rows, ohw, wdata, false, src, false, ob, T::zero());
            if let Some(bias) = bias {
                for (co, &bv) in bias.value().data().iter().enumerate() {
                    for v in &mut ob[co * ohw..(co + 1) * ohw] {
                        *v += bv;
                    }
                }
            }
        }
    }

    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Var::from_fn(out, inputs, move |inputs, _, g| {
        let x = inputs[0].value();
        let wt = inputs[1].value();
        let gd = g.data();
        let need_x = inputs[0].requires_grad();
        let need_w = inputs[1].requires_grad();
        let need_b = inputs.len() > 2 && inputs[2].requires_grad();

        let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
        let mut gw = need_w.then(|| Tensor::zeros(wt.shape()));
        let mut gb = need_b.then(|| Tensor::zeros(inputs[2].shape()));
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ohw] };
        let mut gcols = if need_x && !geo.is_pointwise() {
            vec![T::zero(); rows * ohw]
        } else {
            Vec::new()
        };
        for b in 0..n {
            let gb_out = &gd[b * cout * ohw..(b + 1) * cout * ohw];
            if let Some(gw) = gw.as_mut() {
                let xb = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
                let src: &[T] = if geo.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geo, &mut cols);
                    &cols
                };
                T::gemm(cout, ohw, rows, gb_out, false, src, true, gw.data_mut(), T::one());
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx.data_mut()[b * cin * h * w..(b + 1) * cin * h * w];
                if geo.is_pointwise() {
                    T::gemm(rows, cout, ohw, wt.data(), true, gb_out, false, gxb, T::one());
                } else {
                    T::gemm(rows, cout, ohw, wt.data(), true, gb_out, false, &mut gcols, T::zero());
                    col2im(&gcols, &geo, gxb);
                }
            }
            if let Some(gbias) = gb.as_mut() {
                for (co, acc) in gbias.data_mut().iter_mut().enumerate() {
                    *acc += gb_out[co * ohw..(co + 1) * ohw].iter().copied().sum::<T>();
                }
            }
        }
        let mut grads = vec![gx, gw];
        if inputs.len() > 2 {
            grads.push(gb);
        }
        grads
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(b, ci, iy as usize, ix as usize)
                                            * w.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        let i = out.index(b, co, oy, ox);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let x = Tensor::from_fn([2, 3, 6, 6], |i| ((i * 37 % 11) as f64) - 5.0);
            let w = Tensor::from_fn([4, 3, k, k], |i| ((i * 13 % 7) as f64) * 0.25 - 0.5);
            let y = conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, stride, pad);
            let e = naive(&x, &w, stride, pad);
            assert_eq!(y.shape(), e.shape());
            assert!(y.value().max_abs_diff(&e) < 1e-12, "k={k} s={stride}");
        }
    }
}
