use crate::blocks::{FeatureMap, SeBlock};
use crate::error::{Error, Result};
use crate::layers::ConvBn;
use crate::ops;
use crate::params::{Ctx, ParamLayout};
use crate::tensor::Real;

/// Residual stage: two 3×3 conv-norm layers, a squeeze-and-excitation gate
/// on the residual branch, and an identity path that is projected by a 1×1
/// conv-norm whenever the shape changes. Downsampling uses stride 2 in the
/// first convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SeResNetStage {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub se: SeBlock,
    pub shortcut: Option<ConvBn>,
    pub downsample: bool,
    pub cin: usize,
    pub cout: usize,
}

impl SeResNetStage {
    pub fn new(
        l: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        downsample: bool,
        se_reduction: usize,
    ) -> Result<Self> {
        l.scoped(name, |l| {
            let stride = if downsample { 2 } else { 1 };
            Ok(Self {
                conv1: ConvBn::new(l, "conv1", cin, cout, 3, stride, true),
                conv2: ConvBn::new(l, "conv2", cout, cout, 3, 1, false),
                se: SeBlock::new(l, "se", cout, se_reduction)?,
                shortcut: (downsample || cin != cout)
                    .then(|| ConvBn::new(l, "shortcut", cin, cout, 1, stride, false)),
                downsample,
                cin,
                cout,
            })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if x.channels() != self.cin {
            return Err(Error::InvalidInput(alloc::format!(
                "SE-ResNet stage expects {} channels, got {}",
                self.cin,
                x.channels()
            )));
        }
        if self.downsample && (!x.height().is_multiple_of(2) || !x.width().is_multiple_of(2)) {
            return Err(Error::InvalidInput(alloc::format!(
                "cannot halve odd spatial size {}x{}",
                x.height(),
                x.width()
            )));
        }
        let r = self.conv1.forward(ctx, &x.data);
        let r = self.conv2.forward(ctx, &r);
        let gate = self.se.gate(ctx, &r);
        let r = ops::mul_channel(&r, &gate);
        let identity = match &self.shortcut {
            Some(s) => s.forward(ctx, &x.data),
            None => x.data.clone(),
        };
        let stride = if self.downsample { x.stride * 2 } else { x.stride };
        Ok(FeatureMap::new(ops::relu(&ops::add(&r, &identity)), stride))
    }
}
