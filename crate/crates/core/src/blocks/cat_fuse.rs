use crate::blocks::FeatureMap;
use crate::error::{Error, Result};
use crate::layers::ConvBn;
use crate::ops;
use crate::params::{Ctx, ParamLayout};
use crate::tensor::Real;

/// Optional 2× (nearest) upsampling of `a`, channel concatenation with `b`,
/// then a 3×3 conv-norm-rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CatFuse {
    pub conv: ConvBn,
    pub upsample_a: bool,
}

impl CatFuse {
    pub fn new(
        l: &mut ParamLayout,
        name: &str,
        ca: usize,
        cb: usize,
        cout: usize,
        upsample_a: bool,
    ) -> Self {
        l.scoped(name, |l| Self {
            conv: ConvBn::new(l, "conv", ca + cb, cout, 3, 1, true),
            upsample_a,
        })
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        a: &FeatureMap<T>,
        b: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        let a = if self.upsample_a {
            FeatureMap::new(ops::upsample_nearest2x(&a.data), a.stride / 2)
        } else {
            a.clone()
        };
        let [n, _, h, w] = a.data.shape();
        let [bn, _, bh, bw] = b.data.shape();
        if n != bn || [h, w] != [bh, bw] {
            return Err(Error::ShapeMismatch {
                what: "concatenation fusion",
                left: a.data.shape(),
                right: b.data.shape(),
            });
        }
        let x = ops::concat_channels(&[a.data, b.data.clone()]);
        Ok(FeatureMap::new(self.conv.forward(ctx, &x), b.stride))
    }
}
