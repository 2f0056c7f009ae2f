use alloc::vec::Vec;

use crate::autograd::Var;
use crate::blocks::{check_same_shape, FeatureMap};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvBn};
use crate::ops;
use crate::params::{Ctx, ParamLayout};
use crate::tensor::Real;

/// Densely connected stream of 3×3 convolutions with rectifiers and no
/// normalization: every convolution after the first sees the sum of all
/// earlier outputs, and the stream returns the sum of all outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStream {
    pub convs: Vec<Conv>,
}

impl DenseStream {
    pub fn new(l: &mut ParamLayout, name: &str, cin: usize, width: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("dense stream depth must be at least 1".into()));
        }
        Ok(l.scoped(name, |l| Self {
            convs: (0..depth)
                .map(|i| {
                    let c = if i == 0 { cin } else { width };
                    Conv::new(l, &alloc::format!("conv{i}"), c, width, 3, 1, true)
                })
                .collect(),
        }))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Var<T> {
        let mut outs: Vec<Var<T>> = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            let input = if i == 0 { x.clone() } else { ops::add_n(&outs) };
            outs.push(ops::relu(&conv.forward(ctx, &input)));
        }
        ops::add_n(&outs)
    }
}

/// Pre-fusion outputs of the two branches.
#[derive(Debug, Clone)]
pub struct DfmBranches<T: Real> {
    pub sum: Var<T>,
    pub diff: Var<T>,
}

/// Dense fusion module. The sum branch adds the two temporal stream
/// outputs, the difference branch takes their absolute difference; within a
/// branch both temporal streams share one set of weights. A final
/// conv-norm-rectifier fuses the concatenated branch outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dfm {
    pub sum_stream: DenseStream,
    pub diff_stream: DenseStream,
    pub fuse: ConvBn,
    pub channels: usize,
}

impl Dfm {
    pub fn new(
        l: &mut ParamLayout,
        name: &str,
        channels: usize,
        cout: usize,
        depth: usize,
    ) -> Result<Self> {
        let width = (channels / 2).max(1);
        l.scoped(name, |l| {
            Ok(Self {
                sum_stream: DenseStream::new(l, "sum", channels, width, depth)?,
                diff_stream: DenseStream::new(l, "diff", channels, width, depth)?,
                fuse: ConvBn::new(l, "fuse", 2 * width, cout, 3, 1, true),
                channels,
            })
        })
    }

    /// The stream applied to temporal input `t` (0 or 1) of a branch. Both
    /// temporal inputs get the same stream.
    pub fn stream(&self, difference: bool, _t: usize) -> &DenseStream {
        if difference {
            &self.diff_stream
        } else {
            &self.sum_stream
        }
    }

    pub fn branches<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        f1: &FeatureMap<T>,
        f2: &FeatureMap<T>,
    ) -> Result<DfmBranches<T>> {
        check_same_shape("dense fusion inputs", f1, f2)?;
        if f1.channels() != self.channels {
            return Err(Error::InvalidInput(alloc::format!(
                "dense fusion built for {} channels got {}",
                self.channels,
                f1.channels()
            )));
        }
        let s1 = self.stream(false, 0).forward(ctx, &f1.data);
        let s2 = self.stream(false, 1).forward(ctx, &f2.data);
        let d1 = self.stream(true, 0).forward(ctx, &f1.data);
        let d2 = self.stream(true, 1).forward(ctx, &f2.data);
        Ok(DfmBranches {
            sum: ops::add(&s1, &s2),
            diff: ops::abs(&ops::sub(&d1, &d2)),
        })
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        f1: &FeatureMap<T>,
        f2: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        let b = self.branches(ctx, f1, f2)?;
        let x = ops::concat_channels(&[b.sum, b.diff]);
        Ok(FeatureMap::new(self.fuse.forward(ctx, &x), f1.stride))
    }
}
