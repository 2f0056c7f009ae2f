use alloc::vec::Vec;

use crate::autograd::Var;
use crate::blocks::{FeatureMap, FeaturePyramid, PYRAMID_STRIDES};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvBn};
use crate::ops;
use crate::params::{Ctx, ParamLayout};
use crate::tensor::Real;

/// Non-local block without query/key projections.
///
/// The similarity between positions is the softmax (over rows) of the
/// feature map's dot product with its own transpose, scaled by
/// `1/sqrt(channels)`. A 1×1 convolution produces the values that are
/// aggregated with that similarity; a second 1×1 conv-norm-rectifier turns
/// the aggregate into a weight map, which multiplies the input elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct NlBlock {
    pub value: Conv,
    pub weight: ConvBn,
    pub channels: usize,
    pub max_positions: usize,
}

impl NlBlock {
    pub fn new(l: &mut ParamLayout, name: &str, channels: usize, max_positions: usize) -> Self {
        l.scoped(name, |l| Self {
            value: Conv::new(l, "value", channels, channels, 1, 1, true),
            weight: ConvBn::new(l, "weight", channels, channels, 1, 1, true),
            channels,
            max_positions,
        })
    }

    pub fn scale<T: Real>(&self) -> T {
        T::one() / T::from_usize(self.channels).unwrap().sqrt()
    }

    /// The `[n, c, h, w]` weight map for `x`.
    pub fn weight_map<T: Real>(&self, ctx: &mut Ctx<T>, x: &FeatureMap<T>) -> Result<Var<T>> {
        let positions = x.height() * x.width();
        if positions > self.max_positions {
            return Err(Error::AttentionTooLarge {
                positions,
                cap: self.max_positions,
            });
        }
        if x.channels() != self.channels {
            return Err(Error::InvalidInput(alloc::format!(
                "non-local block built for {} channels got {}",
                self.channels,
                x.channels()
            )));
        }
        let v = self.value.forward(ctx, &x.data);
        let context = ops::attention_context(&x.data, &v, self.scale());
        Ok(self.weight.forward(ctx, &context))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let w = self.weight_map(ctx, x)?;
        Ok(FeatureMap::new(ops::mul(&x.data, &w), x.stride))
    }
}


/// Feature pyramid whose top-down path carries non-local blocks.
///
/// Six 3×3 conv-norm-rectifier layers make up the upsampling stage: at
/// each of the three finer levels one reduces the coarser result after
/// nearest 2× upsampling to that level's width, and one merges it with the
/// lateral input. Non-local blocks act on the merge input of the levels
/// chosen at construction. Every output level is `input + enhancement`, so
/// with all convolution weights at zero the pyramid passes through
/// unchanged; the coarsest level's enhancement is its non-local product
/// (zero when that level has no non-local block).
#[derive(Debug, Clone, PartialEq)]
pub struct NlFpn {
    /// Indexed by finer level 0..3: reduces level `i + 1` to level `i`.
    pub up: Vec<ConvBn>,
    pub merge: Vec<ConvBn>,
    /// One optional block per level.
    pub nl: Vec<Option<NlBlock>>,
    pub widths: [usize; 4],
}

impl NlFpn {
    /// `nl_strides` lists the pyramid strides that get a non-local block.
    pub fn new(
        l: &mut ParamLayout,
        name: &str,
        widths: [usize; 4],
        nl_strides: &[usize],
        max_positions: usize,
    ) -> Result<Self> {
        for s in nl_strides {
            if !PYRAMID_STRIDES.contains(s) {
                return Err(Error::Config(alloc::format!(
                    "non-local stride {s} is not a pyramid stride"
                )));
            }
        }
        Ok(l.scoped(name, |l| {
            let up = (0..3)
                .map(|i| ConvBn::new(l, &alloc::format!("up{i}"), widths[i + 1], widths[i], 3, 1, true))
                .collect();
            let merge = (0..3)
                .map(|i| ConvBn::new(l, &alloc::format!("merge{i}"), widths[i], widths[i], 3, 1, true))
                .collect();
            let nl = (0..4)
                .map(|i| {
                    nl_strides.contains(&PYRAMID_STRIDES[i]).then(|| {
                        NlBlock::new(l, &alloc::format!("nl{i}"), widths[i], max_positions)
                    })
                })
                .collect();
            Self {
                up,
                merge,
                nl,
                widths,
            }
        }))
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        pyramid: &FeaturePyramid<T>,
    ) -> Result<FeaturePyramid<T>> {
        let levels = pyramid.levels();
        for (i, level) in levels.iter().enumerate() {
            if level.channels() != self.widths[i] {
                return Err(Error::InvalidInput(alloc::format!(
                    "pyramid level {i} has {} channels, NL-FPN expects {}",
                    level.channels(),
                    self.widths[i]
                )));
            }
        }

        let mut out: Vec<Option<FeatureMap<T>>> = alloc::vec![None, None, None, None];
        let top = &levels[3];
        // `carry` feeds the next finer level.
        let (mut carry, top_out) = match &self.nl[3] {
            Some(nl) => {
                let enhanced = nl.forward(ctx, top)?;
                let o = ops::add(&top.data, &enhanced.data);
                (enhanced.data, o)
            }
            None => (top.data.clone(), top.data.clone()),
        };
        out[3] = Some(FeatureMap::new(top_out, top.stride));

        for i in (0..3).rev() {
            let lateral = &levels[i];
            let up = self.up[i].forward(ctx, &ops::upsample_nearest2x(&carry));
            let mut m = FeatureMap::new(ops::add(&lateral.data, &up), lateral.stride);
            if let Some(nl) = &self.nl[i] {
                m = nl.forward(ctx, &m)?;
            }
            let e = self.merge[i].forward(ctx, &m.data);
            out[i] = Some(FeatureMap::new(ops::add(&lateral.data, &e), lateral.stride));
            carry = e;
        }
        FeaturePyramid::new(out.into_iter().map(|o| o.expect("every level set")).collect())
    }
}
