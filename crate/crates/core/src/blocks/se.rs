use crate::autograd::Var;
use crate::blocks::FeatureMap;
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::ops;
use crate::params::{Ctx, ParamLayout};
use crate::tensor::Real;

/// Smallest bottleneck the reduction ratio is clamped to.
pub const MIN_SE_BOTTLENECK: usize = 4;

/// Bottleneck width for `channels` at the requested reduction ratio. The
/// ratio is lowered when needed so the bottleneck keeps at least
/// [`MIN_SE_BOTTLENECK`] units; the (clamped) ratio must divide `channels`.
pub fn se_bottleneck(channels: usize, reduction: usize) -> Result<usize> {
    if channels == 0 || reduction == 0 {
        return Err(Error::Config("SE channels and reduction must be positive".into()));
    }
    let ratio = reduction.min((channels / MIN_SE_BOTTLENECK).max(1));
    if !channels.is_multiple_of(ratio) {
        return Err(Error::Config(alloc::format!(
            "{channels} channels are not divisible by the SE reduction ratio {ratio}"
        )));
    }
    Ok(channels / ratio)
}

/// Squeeze-and-excitation: global average pooling, two fully connected
/// layers (as 1×1 convolutions) with a rectifier between them, and a
/// sigmoid gate that rescales every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub fc1: Conv,
    pub fc2: Conv,
    pub channels: usize,
}

impl SeBlock {
    pub fn new(l: &mut ParamLayout, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = se_bottleneck(channels, reduction)?;
        Ok(l.scoped(name, |l| Self {
            fc1: Conv::new(l, "fc1", channels, hidden, 1, 1, true),
            fc2: Conv::new(l, "fc2", hidden, channels, 1, 1, true),
            channels,
        }))
    }

    /// Per-channel gate in `(0, 1)`, shape `[n, c, 1, 1]`.
    pub fn gate<T: Real>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Var<T> {
        let pooled = ops::global_avg_pool(x);
        let hidden = ops::relu(&self.fc1.forward(ctx, &pooled));
        ops::sigmoid(&self.fc2.forward(ctx, &hidden))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if x.channels() != self.channels {
            return Err(Error::InvalidInput(alloc::format!(
                "SE block built for {} channels got {}",
                self.channels,
                x.channels()
            )));
        }
        let gate = self.gate(ctx, &x.data);
        Ok(FeatureMap::new(ops::mul_channel(&x.data, &gate), x.stride))
    }
}
