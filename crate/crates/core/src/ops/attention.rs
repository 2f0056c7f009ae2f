//! Self-similarity attention over spatial positions.
//!
//! Queries and keys are the input itself: the similarity between positions
//! `p` and `q` is the scaled dot product of their feature vectors, turned
//! into a row-stochastic matrix by a softmax over `q`.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::tensor::{Real, Tensor};

/// Rows processed at once when no gradient is needed.
const INFERENCE_ROW_CHUNK: usize = 256;

fn softmax_rows<T: Real>(a: &mut [T], cols: usize) {
    for row in a.chunks_mut(cols) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Row-softmaxed similarity `softmax(scale · Xᵀ X)` for one batch item,
/// returned as `[1, 1, hw, hw]`.
pub fn similarity_matrix<T: Real>(x: &Tensor<T>, item: usize, scale: T) -> Tensor<T> {
    let [_, c, h, w] = x.shape();
    let p = h * w;
    let xb = &x.data()[item * c * p..(item + 1) * c * p];
    let mut s = vec![T::zero(); p * p];
    T::gemm(p, c, p, xb, true, xb, false, &mut s, T::zero());
    for v in &mut s {
        *v *= scale;
    }
    softmax_rows(&mut s, p);
    Tensor::from_vec([1, 1, p, p], s).expect("similarity shape")
}

/// Context aggregation: for every position `p`,
/// `out[:, p] = Σ_q S[p, q] · value[:, q]` with `S` the similarity matrix of
/// `x`. `x` and `value` share batch and spatial size.
pub fn attention_context<T: Real>(x: &Var<T>, value: &Var<T>, scale: T) -> Var<T> {
    let [n, c, h, w] = x.shape();
    let [vn, cv, vh, vw] = value.shape();
    assert!(vn == n && vh == h && vw == w, "attention: value shape mismatch");
    let p = h * w;
    let xd = x.value().data();
    let vd = value.value().data();
    let mut out = Tensor::zeros([n, cv, h, w]);
    let track = x.requires_grad() || value.requires_grad();

    let mut saved: Vec<Vec<T>> = Vec::new();
    {
        let od = out.data_mut();
        for b in 0..n {
            let xb = &xd[b * c * p..(b + 1) * c * p];
            let vb = &vd[b * cv * p..(b + 1) * cv * p];
            let ob = &mut od[b * cv * p..(b + 1) * cv * p];
            if track {
                let mut s = vec![T::zero(); p * p];
                T::gemm(p, c, p, xb, true, xb, false, &mut s, T::zero());
                for v in &mut s {
                    *v *= scale;
                }
                softmax_rows(&mut s, p);
                T::gemm(cv, p, p, vb, false, &s, true, ob, T::zero());
                saved.push(s);
            } else {
                let mut row0 = 0;
                let mut s = Vec::new();
                let mut part = Vec::new();
                while row0 < p {
                    let rows = INFERENCE_ROW_CHUNK.min(p - row0);
                    // Queries for this chunk are columns row0..row0+rows of X.
                    let mut q = vec![T::zero(); c * rows];
                    for ch in 0..c {
                        q[ch * rows..(ch + 1) * rows]
                            .copy_from_slice(&xb[ch * p + row0..ch * p + row0 + rows]);
                    }
                    s.resize(rows * p, T::zero());
                    T::gemm(rows, c, p, &q, true, xb, false, &mut s, T::zero());
                    for v in &mut s {
                        *v *= scale;
                    }
                    softmax_rows(&mut s, p);
                    part.resize(cv * rows, T::zero());
                    T::gemm(cv, p, rows, vb, false, &s, true, &mut part, T::zero());
                    for ch in 0..cv {
                        ob[ch * p + row0..ch * p + row0 + rows]
                            .copy_from_slice(&part[ch * rows..(ch + 1) * rows]);
                    }
                    row0 += rows;
                }
            }
        }
    }

    Var::from_fn(out, vec![x.clone(), value.clone()], move |inputs, _, g| {
        let xd = inputs[0].value().data();
        let vd = inputs[1].value().data();
        let gd = g.data();
        let mut gx = inputs[0].requires_grad().then(|| Tensor::zeros([n, c, h, w]));
        let mut gv = inputs[1].requires_grad().then(|| Tensor::zeros([n, cv, h, w]));
        let mut ds = vec![T::zero(); p * p];
        for b in 0..n {
            let s = &saved[b];
            let gb = &gd[b * cv * p..(b + 1) * cv * p];
            let vb = &vd[b * cv * p..(b + 1) * cv * p];
            if let Some(gv) = gv.as_mut() {
                let dst = &mut gv.data_mut()[b * cv * p..(b + 1) * cv * p];
                T::gemm(cv, p, p, gb, false, s, false, dst, T::zero());
            }
            if let Some(gx) = gx.as_mut() {
                T::gemm(p, cv, p, gb, true, vb, false, &mut ds, T::zero());
                // Softmax backward, row by row.
                for r in 0..p {
                    let srow = &s[r * p..(r + 1) * p];
                    let drow = &mut ds[r * p..(r + 1) * p];
                    let dot: T = srow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &sv) in drow.iter_mut().zip(srow) {
                        *d = sv * (*d - dot) * scale;
                    }
                }
                // Symmetrize: d(XᵀX) contributes through both factors.
                for r in 0..p {
                    for q in r + 1..p {
                        let sym = ds[r * p + q] + ds[q * p + r];
                        ds[r * p + q] = sym;
                        ds[q * p + r] = sym;
                    }
                    ds[r * p + r] = ds[r * p + r] + ds[r * p + r];
                }
                let xb = &xd[b * c * p..(b + 1) * c * p];
                let dst = &mut gx.data_mut()[b * c * p..(b + 1) * c * p];
                T::gemm(c, p, p, xb, false, &ds, false, dst, T::zero());
            }
        }
        vec![gx, gv]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_inference_matches_tracked_forward() {
        let x = Tensor::<f64>::from_fn([2, 3, 20, 20], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let v = Tensor::<f64>::from_fn([2, 4, 20, 20], |i| ((i * 104729) % 97) as f64 / 40.0 - 1.2);
        let tracked = attention_context(&Var::leaf(x.clone()), &Var::constant(v.clone()), 0.5);
        let chunked = attention_context(&Var::constant(x), &Var::constant(v), 0.5);
        assert!(tracked.value().max_abs_diff(chunked.value()) < 1e-12);
    }
}
