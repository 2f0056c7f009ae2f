//! Elementwise operations and full reductions.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::tensor::{Real, Tensor, SCALAR};

fn need(inputs: &[Var<impl Real>], i: usize) -> bool {
    inputs[i].requires_grad()
}

pub fn relu<T: Real>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
    Var::from_fn(out, vec![x.clone()], |_, out, g| {
        vec![Some(out.zip_map(g, |o, g| if o > T::zero() { g } else { T::zero() }))]
    })
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(sigmoid_scalar);
    Var::from_fn(out, vec![x.clone()], |_, out, g| {
        vec![Some(out.zip_map(g, |s, g| g * s * (T::one() - s)))]
    })
}

pub fn abs<T: Real>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(T::abs);
    Var::from_fn(out, vec![x.clone()], |inputs, _, g| {
        let sign = |v: T| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        };
        vec![Some(inputs[0].value().zip_map(g, |v, g| g * sign(v)))]
    })
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let out = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_fn(out, vec![a.clone(), b.clone()], |inputs, _, g| {
        vec![
            need(inputs, 0).then(|| g.clone()),
            need(inputs, 1).then(|| g.clone()),
        ]
    })
}

/// Sum of any number of same-shaped tensors, accumulated left to right.
pub fn add_n<T: Real>(xs: &[Var<T>]) -> Var<T> {
    assert!(!xs.is_empty(), "add_n of nothing");
    let mut out = xs[0].value().clone();
    for x in &xs[1..] {
        out.add_assign(x.value());
    }
    Var::from_fn(out, xs.to_vec(), |inputs, _, g| {
        inputs
            .iter()
            .map(|v| v.requires_grad().then(|| g.clone()))
            .collect()
    })
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
    let out = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_fn(out, vec![a.clone(), b.clone()], |inputs, _, g| {
        vec![
            need(inputs, 0).then(|| g.clone()),
            need(inputs, 1).then(|| g.map(|v| -v)),
        ]
    })
}

pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
    let out = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_fn(out, vec![a.clone(), b.clone()], |inputs, _, g| {
        vec![
            need(inputs, 0).then(|| g.zip_map(inputs[1].value(), |g, y| g * y)),
            need(inputs, 1).then(|| g.zip_map(inputs[0].value(), |g, x| g * x)),
        ]
    })
}

pub fn div<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "div: shape mismatch");
    let out = a.value().zip_map(b.value(), |x, y| x / y);
    Var::from_fn(out, vec![a.clone(), b.clone()], |inputs, out, g| {
        let b = inputs[1].value();
        vec![
            need(inputs, 0).then(|| g.zip_map(b, |g, y| g / y)),
            need(inputs, 1).then(|| {
                let q = g.zip_map(out, |g, o| g * o);
                q.zip_map(b, |q, y| -q / y)
            }),
        ]
    })
}

/// Multiplication by a constant (gradient-free) tensor such as a mask.
pub fn mul_const<T: Real>(x: &Var<T>, c: &Tensor<T>) -> Var<T> {
    assert_eq!(x.shape(), c.shape(), "mul_const: shape mismatch");
    let out = x.value().zip_map(c, |x, c| x * c);
    let c = c.clone();
    Var::from_fn(out, vec![x.clone()], move |_, _, g| {
        vec![Some(g.zip_map(&c, |g, c| g * c))]
    })
}

pub fn scale<T: Real>(x: &Var<T>, s: T) -> Var<T> {
    let out = x.value().map(|v| v * s);
    Var::from_fn(out, vec![x.clone()], move |_, _, g| vec![Some(g.map(|g| g * s))])
}

pub fn add_scalar<T: Real>(x: &Var<T>, s: T) -> Var<T> {
    let out = x.value().map(|v| v + s);
    Var::from_fn(out, vec![x.clone()], |_, _, g| vec![Some(g.clone())])
}

/// `1 - x`.
pub fn one_minus<T: Real>(x: &Var<T>) -> Var<T> {
    add_scalar(&scale(x, -T::one()), T::one())
}

pub fn ln<T: Real>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(T::ln);
    Var::from_fn(out, vec![x.clone()], |inputs, _, g| {
        vec![Some(g.zip_map(inputs[0].value(), |g, x| g / x))]
    })
}

pub fn square<T: Real>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(|v| v * v);
    Var::from_fn(out, vec![x.clone()], |inputs, _, g| {
        let two = T::lit(2.0);
        vec![Some(g.zip_map(inputs[0].value(), |g, x| two * g * x))]
    })
}

/// Clamps into `[lo, hi]`; the gradient passes only inside the interval.
pub fn clamp<T: Real>(x: &Var<T>, lo: T, hi: T) -> Var<T> {
    let out = x.value().map(|v| v.max(lo).min(hi));
    Var::from_fn(out, vec![x.clone()], move |inputs, _, g| {
        vec![Some(g.zip_map(inputs[0].value(), |g, x| {
            if x >= lo && x <= hi {
                g
            } else {
                T::zero()
            }
        }))]
    })
}

pub fn sum_all<T: Real>(x: &Var<T>) -> Var<T> {
    let out = Tensor::scalar(x.value().sum());
    Var::from_fn(out, vec![x.clone()], |inputs, _, g| {
        vec![Some(Tensor::full(inputs[0].shape(), g.data()[0]))]
    })
}

/// Wraps a plain number as a gradient-free scalar node.
pub fn scalar<T: Real>(v: T) -> Var<T> {
    Var::constant(Tensor::scalar(v))
}

/// Selects elements of the flattened input by index (gather). Used to pick
/// per-pixel class probabilities.
pub fn gather_flat<T: Real>(x: &Var<T>, idx: Vec<usize>, shape: crate::tensor::Shape) -> Var<T> {
    let src = x.value().data();
    let data: Vec<T> = idx.iter().map(|&i| src[i]).collect();
    let out = Tensor::from_vec(shape, data).expect("gather shape");
    Var::from_fn(out, vec![x.clone()], move |inputs, _, g| {
        let mut gx = Tensor::zeros(inputs[0].shape());
        let d = gx.data_mut();
        for (&i, &gv) in idx.iter().zip(g.data()) {
            d[i] += gv;
        }
        vec![Some(gx)]
    })
}

pub fn is_scalar<T: Real>(x: &Var<T>) -> bool {
    x.shape() == SCALAR
}
