//! Network building blocks: squeeze-and-excitation, SE-ResNet stages,
//! concatenation fusion, non-local attention, the non-local feature pyramid
//! and the dense fusion module.

mod cat_fuse;
mod dfm;
mod nl;
mod se;
mod se_resnet;

pub use cat_fuse::CatFuse;
pub use dfm::{DenseStream, Dfm, DfmBranches};
pub use nl::{NlBlock, NlFpn};
pub use se::{se_bottleneck, SeBlock, MIN_SE_BOTTLENECK};
pub use se_resnet::SeResNetStage;

use alloc::vec::Vec;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Pyramid strides relative to the network input.
pub const PYRAMID_STRIDES: [usize; 4] = [2, 4, 8, 16];

/// A feature tensor together with its stride relative to the network input.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Real> {
    pub data: Var<T>,
    pub stride: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Var<T>, stride: usize) -> Self {
        Self { data, stride }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Input resolution implied by size and stride.
    pub fn input_size(&self) -> (usize, usize) {
        (self.height() * self.stride, self.width() * self.stride)
    }
}

/// Four feature maps at strides 2, 4, 8 and 16.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Real> {
    levels: Vec<FeatureMap<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(levels: Vec<FeatureMap<T>>) -> Result<Self> {
        if levels.len() != PYRAMID_STRIDES.len() {
            return Err(Error::InvalidInput(alloc::format!(
                "a feature pyramid needs {} levels, got {}",
                PYRAMID_STRIDES.len(),
                levels.len()
            )));
        }
        let input = levels[0].input_size();
        let batch = levels[0].data.shape()[0];
        for (i, (level, &stride)) in levels.iter().zip(&PYRAMID_STRIDES).enumerate() {
            if level.stride != stride {
                return Err(Error::InvalidInput(alloc::format!(
                    "pyramid level {i} has stride {}, expected {stride}",
                    level.stride
                )));
            }
            if level.input_size() != input || level.data.shape()[0] != batch {
                return Err(Error::InvalidInput(alloc::format!(
                    "pyramid level {i} of shape {:?} is inconsistent with input size {:?}",
                    level.data.shape(),
                    input
                )));
            }
            if i > 0 && level.channels() < levels[i - 1].channels() {
                return Err(Error::InvalidInput(
                    "pyramid channel widths must not decrease with stride".into(),
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap<T>] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &FeatureMap<T> {
        &self.levels[i]
    }

    pub fn into_levels(self) -> Vec<FeatureMap<T>> {
        self.levels
    }
}

pub(crate) fn check_same_shape<T: Real>(
    what: &'static str,
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
) -> Result<()> {
    if a.data.shape() != b.data.shape() || a.stride != b.stride {
        return Err(Error::ShapeMismatch {
            what,
            left: a.data.shape(),
            right: b.data.shape(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
