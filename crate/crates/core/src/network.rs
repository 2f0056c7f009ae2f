//! Assembly of the fully convolutional Siamese baseline (FCS), the dual
//! encoder-decoder (DED) backbone and full FCCDN.
//!
//! Both temporal images run through one weight-shared encoder. With the DED
//! backbone a weight-shared decoder rebuilds a pyramid per temporal image,
//! and bitemporal fusion happens on those decoder features; FCS fuses the
//! encoder features directly. The optional NL-FPN sits between encoder and
//! decoder (or fusion), enhancing each temporal pyramid with the same
//! weights, and its four output levels feed the decoder at matching
//! strides. A change decoder merges the fused levels coarse-to-fine into a
//! binary change map; optional segmentation heads read the finest decoder
//! level of each temporal stream through one shared head.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::blocks::{CatFuse, Dfm, FeatureMap, FeaturePyramid, NlFpn, SeResNetStage};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvBn};
use crate::ops;
use crate::params::{Ctx, ParamLayout, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Fcs,
    Ded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    pub width_multiplier: f64,
    pub use_nl_fpn: bool,
    pub use_dfm: bool,
    pub use_ssl_heads: bool,
    /// 1 for binary segmentation heads, otherwise the class count.
    pub num_seg_classes: usize,
    pub input_channels: usize,
    /// Encoder widths before the multiplier, finest level first.
    pub base_widths: [usize; 4],
    /// Residual blocks per encoder stage; the first one downsamples.
    pub blocks_per_stage: usize,
    pub se_reduction: usize,
    pub dense_stream_depth: usize,
    /// Pyramid strides that get a non-local block inside the NL-FPN.
    pub nl_strides: Vec<usize>,
    /// Largest `height · width` a non-local block accepts.
    pub max_attention_positions: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::fccdn(1.0)
    }
}

impl NetworkConfig {
    /// Full FCCDN: DED backbone, NL-FPN, dense fusion and SSL heads.
    pub fn fccdn(width_multiplier: f64) -> Self {
        Self {
            backbone: Backbone::Ded,
            width_multiplier,
            use_nl_fpn: true,
            use_dfm: true,
            use_ssl_heads: true,
            num_seg_classes: 1,
            input_channels: 3,
            base_widths: [32, 64, 128, 256],
            blocks_per_stage: 1,
            se_reduction: 16,
            dense_stream_depth: 3,
            nl_strides: alloc::vec![8, 16],
            max_attention_positions: 64 * 64,
        }
    }

    /// DED backbone without NL-FPN, dense fusion or SSL heads.
    pub fn ded(width_multiplier: f64) -> Self {
        Self {
            use_nl_fpn: false,
            use_dfm: false,
            use_ssl_heads: false,
            ..Self::fccdn(width_multiplier)
        }
    }

    /// FCS baseline with concatenation fusion.
    pub fn fcs(width_multiplier: f64) -> Self {
        Self {
            backbone: Backbone::Fcs,
            ..Self::ded(width_multiplier)
        }
    }

    /// Channel width of every pyramid level.
    pub fn widths(&self) -> Result<[usize; 4]> {
        let m = self.width_multiplier;
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::Config(alloc::format!(
                "width multiplier must be positive, got {m}"
            )));
        }
        let mut out = [0; 4];
        for (o, &b) in out.iter_mut().zip(&self.base_widths) {
            let w = b as f64 * m;
            let r = libm_round(w);
            if (w - r).abs() > 1e-9 || r < 1.0 {
                return Err(Error::Config(alloc::format!(
                    "width multiplier {m} gives non-integer width {w} for base width {b}"
                )));
            }
            *o = r as usize;
        }
        Ok(out)
    }

    pub fn is_fccdn(&self) -> bool {
        self.backbone == Backbone::Ded && self.use_nl_fpn && self.use_dfm && self.use_ssl_heads
    }

    pub fn validate(&self) -> Result<()> {
        self.widths()?;
        if self.input_channels == 0 || self.num_seg_classes == 0 {
            return Err(Error::Config(
                "input channels and segmentation classes must be positive".into(),
            ));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("each encoder stage needs at least one block".into()));
        }
        if self.use_ssl_heads && self.backbone == Backbone::Fcs {
            return Err(Error::Config(
                "segmentation heads read decoder features and need the DED backbone".into(),
            ));
        }
        Ok(())
    }
}

fn libm_round(v: f64) -> f64 {
    num_traits::Float::round(v)
}

/// Head: 1×1 convolution, bilinear 2× upsampling to input size, then a
/// sigmoid (one channel) or per-pixel softmax (several classes).
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub conv: Conv,
    pub classes: usize,
}

impl Head {
    pub fn new(l: &mut ParamLayout, name: &str, cin: usize, classes: usize) -> Self {
        l.scoped(name, |l| Self {
            conv: Conv::new(l, "conv", cin, classes, 1, 1, true),
            classes,
        })
    }

    /// Upsampled logits before the final normalization.
    pub fn logits<T: Real>(&self, ctx: &mut Ctx<T>, x: &FeatureMap<T>) -> Var<T> {
        ops::upsample_bilinear2x(&self.conv.forward(ctx, &x.data))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: &FeatureMap<T>) -> Var<T> {
        let z = self.logits(ctx, x);
        if self.classes == 1 {
            ops::sigmoid(&z)
        } else {
            ops::softmax_channels(&z)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stages: Vec<Vec<SeResNetStage>>,
}

impl Encoder {
    fn new(l: &mut ParamLayout, cfg: &NetworkConfig, widths: [usize; 4]) -> Result<Self> {
        l.scoped("encoder", |l| {
            let mut stages = Vec::new();
            let mut cin = cfg.input_channels;
            for (s, &w) in widths.iter().enumerate() {
                let blocks = (0..cfg.blocks_per_stage)
                    .map(|b| {
                        let c = if b == 0 { cin } else { w };
                        let name = alloc::format!("stage{s}.block{b}");
                        SeResNetStage::new(l, &name, c, w, b == 0, cfg.se_reduction)
                    })
                    .collect::<Result<Vec<_>>>()?;
                stages.push(blocks);
                cin = w;
            }
            Ok(Self { stages })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Result<FeaturePyramid<T>> {
        let mut f = FeatureMap::new(x.clone(), 1);
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                f = block.forward(ctx, &f)?;
            }
            levels.push(f.clone());
        }
        FeaturePyramid::new(levels)
    }
}

/// Top-down decoder rebuilding a pyramid from encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub top: ConvBn,
    /// `fuse[i]` produces level `i` from level `i + 1` and the lateral input.
    pub fuse: Vec<CatFuse>,
}

impl Decoder {
    fn new(l: &mut ParamLayout, name: &str, widths: [usize; 4]) -> Self {
        l.scoped(name, |l| Self {
            top: ConvBn::new(l, "top", widths[3], widths[3], 3, 1, true),
            fuse: (0..3)
                .map(|i| {
                    CatFuse::new(l, &alloc::format!("fuse{i}"), widths[i + 1], widths[i], widths[i], true)
                })
                .collect(),
        })
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        p: &FeaturePyramid<T>,
    ) -> Result<FeaturePyramid<T>> {
        let top = p.level(3);
        let mut out: Vec<FeatureMap<T>> =
            alloc::vec![FeatureMap::new(self.top.forward(ctx, &top.data), top.stride)];
        for i in (0..3).rev() {
            let coarser = out.last().expect("nonempty");
            let f = self.fuse[i].forward(ctx, coarser, p.level(i))?;
            out.push(f);
        }
        out.reverse();
        FeaturePyramid::new(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    Cat(CatFuse),
    Dense(Dfm),
}

impl Fusion {
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        a: &FeatureMap<T>,
        b: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        match self {
            Fusion::Cat(c) => c.forward(ctx, a, b),
            Fusion::Dense(d) => d.forward(ctx, a, b),
        }
    }
}

/// Forward-pass results as graph nodes.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Real> {
    /// `[n, 1, h, w]` change probabilities.
    pub change: Var<T>,
    /// `[n, k, h, w]` segmentation scores of each temporal image.
    pub seg1: Option<Var<T>>,
    pub seg2: Option<Var<T>>,
}

impl<T: Real> ForwardOutput<T> {
    pub fn values(&self) -> ModelOutputs<T> {
        ModelOutputs {
            change_score: self.change.value().clone(),
            seg1_score: self.seg1.as_ref().map(|v| v.value().clone()),
            seg2_score: self.seg2.as_ref().map(|v| v.value().clone()),
        }
    }
}

/// Score maps at input resolution, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs<T> {
    pub change_score: Tensor<T>,
    pub seg1_score: Option<Tensor<T>>,
    pub seg2_score: Option<Tensor<T>>,
}

/// Intermediate features of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T: Real> {
    pub encoder: [FeaturePyramid<T>; 2],
    /// The per-temporal features that enter bitemporal fusion.
    pub fusion_inputs: [FeaturePyramid<T>; 2],
    pub fused: Vec<FeatureMap<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub widths: [usize; 4],
    pub layout: ParamLayout,
    pub encoder: Encoder,
    pub nl_fpn: Option<NlFpn>,
    pub decoder: Option<Decoder>,
    pub fusion: Vec<Fusion>,
    /// `change_fuse[i]` produces change level `i` from level `i + 1`.
    pub change_top: ConvBn,
    pub change_fuse: Vec<CatFuse>,
    pub change_head: Head,
    pub seg_head: Option<Head>,
}

impl Network {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths()?;
        let mut l = ParamLayout::new();
        let encoder = Encoder::new(&mut l, cfg, widths)?;
        let nl_fpn = if cfg.use_nl_fpn {
            Some(NlFpn::new(&mut l, "nl_fpn", widths, &cfg.nl_strides, cfg.max_attention_positions)?)
        } else {
            None
        };
        let decoder = (cfg.backbone == Backbone::Ded).then(|| Decoder::new(&mut l, "decoder", widths));
        let fusion = l.scoped("fusion", |l| {
            (0..4)
                .map(|i| {
                    let name = alloc::format!("level{i}");
                    Ok(if cfg.use_dfm {
                        Fusion::Dense(Dfm::new(l, &name, widths[i], widths[i], cfg.dense_stream_depth)?)
                    } else {
                        Fusion::Cat(CatFuse::new(l, &name, widths[i], widths[i], widths[i], false))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let (change_top, change_fuse) = l.scoped("change", |l| {
            (
                ConvBn::new(l, "top", widths[3], widths[3], 3, 1, true),
                (0..3)
                    .map(|i| {
                        CatFuse::new(l, &alloc::format!("fuse{i}"), widths[i + 1], widths[i], widths[i], true)
                    })
                    .collect(),
            )
        });
        let change_head = Head::new(&mut l, "change_head", widths[0], 1);
        let seg_head = cfg
            .use_ssl_heads
            .then(|| Head::new(&mut l, "seg_head", widths[0], cfg.num_seg_classes));
        Ok(Self {
            cfg: cfg.clone(),
            widths,
            layout: l,
            encoder,
            nl_fpn,
            decoder,
            fusion,
            change_top,
            change_fuse,
            change_head,
            seg_head,
        })
    }

    /// Fresh parameters for this architecture.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        ParamStore::init(&self.layout, seed)
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.layout.trainable_count()
    }

    pub fn check_input<T: Real>(&self, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<()> {
        if t1.shape() != t2.shape() {
            return Err(Error::ShapeMismatch {
                what: "bitemporal inputs",
                left: t1.shape(),
                right: t2.shape(),
            });
        }
        let [n, c, h, w] = t1.shape();
        if n == 0 || c != self.cfg.input_channels {
            return Err(Error::InvalidInput(alloc::format!(
                "expected a nonempty batch with {} channels, got shape {:?}",
                self.cfg.input_channels,
                t1.shape()
            )));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::InvalidInput(alloc::format!(
                "input size {h}x{w} is not a positive multiple of 16"
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        t1: &Var<T>,
        t2: &Var<T>,
    ) -> Result<ForwardOutput<T>> {
        self.forward_traced(ctx, t1, t2).map(|(o, _)| o)
    }

    pub fn forward_traced<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        t1: &Var<T>,
        t2: &Var<T>,
    ) -> Result<(ForwardOutput<T>, Trace<T>)> {
        self.check_input(t1.value(), t2.value())?;
        let e1 = self.encoder.forward(ctx, t1)?;
        let e2 = self.encoder.forward(ctx, t2)?;
        let (c1, c2) = match &self.nl_fpn {
            Some(fpn) => (fpn.forward(ctx, &e1)?, fpn.forward(ctx, &e2)?),
            None => (e1.clone(), e2.clone()),
        };
        let (f1, f2) = match &self.decoder {
            Some(dec) => (dec.forward(ctx, &c1)?, dec.forward(ctx, &c2)?),
            None => (c1, c2),
        };

        let fused = (0..4)
            .map(|i| self.fusion[i].forward(ctx, f1.level(i), f2.level(i)))
            .collect::<Result<Vec<_>>>()?;

        let top = &fused[3];
        let mut c = FeatureMap::new(self.change_top.forward(ctx, &top.data), top.stride);
        for i in (0..3).rev() {
            c = self.change_fuse[i].forward(ctx, &c, &fused[i])?;
        }
        let change = self.change_head.forward(ctx, &c);
        let (seg1, seg2) = match &self.seg_head {
            Some(h) => (
                Some(h.forward(ctx, f1.level(0))),
                Some(h.forward(ctx, f2.level(0))),
            ),
            None => (None, None),
        };
        Ok((
            ForwardOutput { change, seg1, seg2 },
            Trace {
                encoder: [e1, e2],
                fusion_inputs: [f1, f2],
                fused,
            },
        ))
    }

    /// Inference-mode forward on plain tensors.
    pub fn predict<T: Real>(
        &self,
        params: &ParamStore<T>,
        t1: &Tensor<T>,
        t2: &Tensor<T>,
    ) -> Result<ModelOutputs<T>> {
        let mut ctx = Ctx::eval(params);
        let out = self.forward(
            &mut ctx,
            &Var::constant(t1.clone()),
            &Var::constant(t2.clone()),
        )?;
        Ok(out.values())
    }
}

fn require(cfg: &NetworkConfig, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!("configuration {cfg:?} is not {what}")))
    }
}

/// FCS forward: change score only.
pub fn fcs_forward<T: Real>(
    net: &Network,
    params: &ParamStore<T>,
    t1: &Tensor<T>,
    t2: &Tensor<T>,
) -> Result<ModelOutputs<T>> {
    require(&net.cfg, net.cfg.backbone == Backbone::Fcs, "an FCS network")?;
    net.predict(params, t1, t2)
}

pub fn ded_forward<T: Real>(
    net: &Network,
    params: &ParamStore<T>,
    t1: &Tensor<T>,
    t2: &Tensor<T>,
) -> Result<ModelOutputs<T>> {
    require(&net.cfg, net.cfg.backbone == Backbone::Ded, "a DED network")?;
    net.predict(params, t1, t2)
}

pub fn fccdn_forward<T: Real>(
    net: &Network,
    params: &ParamStore<T>,
    t1: &Tensor<T>,
    t2: &Tensor<T>,
) -> Result<ModelOutputs<T>> {
    require(&net.cfg, net.cfg.is_fccdn(), "a full FCCDN")?;
    net.predict(params, t1, t2)
}
