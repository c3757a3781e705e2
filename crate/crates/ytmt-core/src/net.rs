//! Dual-stream architectures: the U-shaped and plain backbones, the input
//! feature augmenter, and the two-stage cascade wiring.
//!
//! Both backbones share a front end (augmenter → trainable 1×1 stem to
//! `base_channels`) whose output seeds both streams, a chain of dual-stream
//! blocks, and two 3×3 heads producing the transmission and reflection
//! estimates. The U-shaped variant halves resolution between encoder
//! levels (max pool) and restores it with bilinear upsampling; each decoder
//! level fuses `concat(upsampled, same-stream skip, cross-stream skip)`
//! through a 1×1 convolution before its block. Networks built with
//! `NoInteraction` omit the cross-stream skips entirely and factor into two
//! independent single-stream networks.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::ytmt::{ExchangeMode, FusionMode, YtmtBlock};

/// Input feature augmentation preceding the stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AugmenterSpec {
    /// Pass the raw input channels through unchanged.
    RawIdentity,
    /// Concatenate the input with frozen random multi-scale convolutional
    /// features: level k downsamples the input k times, applies a frozen
    /// random 3×3 convolution producing `features_per_level` channels, and
    /// upsamples back. A self-contained stand-in for a pretrained
    /// hypercolumn.
    FixedRandomPyramid { levels: usize, features_per_level: usize },
}

impl AugmenterSpec {
    /// Channel count entering the stem for `in_channels` input planes.
    pub fn output_channels(&self, in_channels: usize) -> usize {
        match self {
            AugmenterSpec::RawIdentity => in_channels,
            AugmenterSpec::FixedRandomPyramid { levels, features_per_level } => {
                in_channels + levels * features_per_level
            }
        }
    }
}

/// Configuration shared by both backbones (`depth` applies to the U-shaped
/// build, `plain_blocks` to the plain build).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of encoder/decoder levels in the U-shaped build.
    pub depth: usize,
    /// Chain length of the plain build.
    pub plain_blocks: usize,
    /// Stem output width; channel counts double per encoder level.
    pub base_channels: usize,
    pub fusion: FusionMode,
    pub exchange: ExchangeMode,
    pub augmenter: AugmenterSpec,
    /// Input planes: 3 for a first stage, 6 for a cascade second stage
    /// consuming concat(T̂₁, R̂₁), 9 when the mixture is appended too.
    pub in_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            plain_blocks: 6,
            base_channels: 32,
            fusion: FusionMode::Concat,
            exchange: ExchangeMode::Ytmt,
            augmenter: AugmenterSpec::RawIdentity,
            in_channels: 3,
        }
    }
}

impl UNetConfig {
    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("network depth must be ≥ 1".into()));
        }
        if self.plain_blocks == 0 {
            return Err(Error::Config("plain chain needs ≥ 1 block".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if let AugmenterSpec::FixedRandomPyramid { levels, features_per_level } = &self.augmenter {
            if *levels == 0 || *features_per_level == 0 {
                return Err(Error::Config("pyramid augmenter needs ≥ 1 level and ≥ 1 feature".into()));
            }
        }
        Ok(())
    }

    /// Encoder output width at level `i` (0-based).
    fn level_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

/// Two-stage cascade plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stages: u8,
    /// Whether stage 2 sees concat(T̂₁, R̂₁, I) instead of concat(T̂₁, R̂₁).
    pub stage2_includes_input: bool,
}

impl StagePlan {
    pub fn single() -> Self {
        StagePlan { stages: 1, stage2_includes_input: false }
    }

    pub fn stage2_in_channels(&self) -> usize {
        if self.stage2_includes_input {
            9
        } else {
            6
        }
    }
}

enum Body {
    UShaped {
        enc: Vec<YtmtBlock>,
        bottleneck: YtmtBlock,
        /// Per decoder level: 1×1 fusion of (upsampled, skips) per stream.
        skip_fuse: Vec<[Conv2d; 2]>,
        dec: Vec<YtmtBlock>,
    },
    Plain { chain: Vec<YtmtBlock> },
}

pub struct DualStreamNet {
    pub cfg: UNetConfig,
    pyramid: Vec<Conv2d>,
    stem: Conv2d,
    body: Body,
    heads: [Conv2d; 2],
}

/// U-shaped backbone (Fig. 2 (a) layout): encoder blocks with max pooling
/// between levels, a bottleneck block, decoder blocks behind bilinear
/// upsampling and skip fusion.
pub fn build_ushaped(store: &mut ParamStore, prefix: &str, cfg: &UNetConfig) -> Result<DualStreamNet> {
    cfg.validate()?;
    let (pyramid, stem) = build_front(store, prefix, cfg)?;
    let d = cfg.depth;
    let cross = cfg.exchange != ExchangeMode::NoInteraction;

    let mut enc = Vec::with_capacity(d);
    for i in 0..d {
        let in_c = if i == 0 { cfg.base_channels } else { cfg.level_channels(i - 1) };
        enc.push(register_block(store, &format!("{prefix}.enc{i}"), in_c, cfg.level_channels(i), cfg)?);
    }
    let bottleneck = register_block(
        store,
        &format!("{prefix}.bottleneck"),
        cfg.level_channels(d - 1),
        cfg.base_channels << d,
        cfg,
    )?;
    let mut skip_fuse = Vec::with_capacity(d);
    let mut dec = Vec::with_capacity(d);
    for i in 0..d {
        let up_c = if i == d - 1 { cfg.base_channels << d } else { cfg.level_channels(i + 1) };
        let c = cfg.level_channels(i);
        let fuse_in = up_c + c + if cross { c } else { 0 };
        skip_fuse.push([
            Conv2d::register(store, &format!("{prefix}.dec{i}.s1.skipfuse"), fuse_in, c, 1, 1)?,
            Conv2d::register(store, &format!("{prefix}.dec{i}.s2.skipfuse"), fuse_in, c, 1, 1)?,
        ]);
        dec.push(register_block(store, &format!("{prefix}.dec{i}"), c, c, cfg)?);
    }
    let heads = build_heads(store, prefix, cfg.base_channels)?;
    Ok(DualStreamNet {
        cfg: cfg.clone(),
        pyramid,
        stem,
        body: Body::UShaped { enc, bottleneck, skip_fuse, dec },
        heads,
    })
}

/// Plain fixed-resolution backbone (Fig. 2 (b) layout).
pub fn build_plain(store: &mut ParamStore, prefix: &str, cfg: &UNetConfig) -> Result<DualStreamNet> {
    cfg.validate()?;
    let (pyramid, stem) = build_front(store, prefix, cfg)?;
    let b = cfg.base_channels;
    let chain = (0..cfg.plain_blocks)
        .map(|i| register_block(store, &format!("{prefix}.blk{i}"), b, b, cfg))
        .collect::<Result<Vec<_>>>()?;
    let heads = build_heads(store, prefix, b)?;
    Ok(DualStreamNet { cfg: cfg.clone(), pyramid, stem, body: Body::Plain { chain }, heads })
}

fn register_block(
    store: &mut ParamStore,
    name: &str,
    in_c: usize,
    out_c: usize,
    cfg: &UNetConfig,
) -> Result<YtmtBlock> {
    YtmtBlock::register(store, name, in_c, out_c, cfg.exchange, cfg.fusion)
}

fn build_front(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &UNetConfig,
) -> Result<(Vec<Conv2d>, Conv2d)> {
    let mut pyramid = Vec::new();
    if let AugmenterSpec::FixedRandomPyramid { levels, features_per_level } = &cfg.augmenter {
        for k in 0..*levels {
            let conv = Conv2d::register(
                store,
                &format!("{prefix}.aug.pyr{k}"),
                cfg.in_channels,
                *features_per_level,
                3,
                1,
            )?;
            pyramid.push(conv);
        }
        // the pyramid is a frozen feature extractor, never trained
        store.set_trainable_by_prefix(&format!("{prefix}.aug.pyr"), false);
    }
    let stem = Conv2d::register(
        store,
        &format!("{prefix}.stem"),
        cfg.augmenter.output_channels(cfg.in_channels),
        cfg.base_channels,
        1,
        1,
    )?;
    Ok((pyramid, stem))
}

fn build_heads(store: &mut ParamStore, prefix: &str, c: usize) -> Result<[Conv2d; 2]> {
    Ok([
        Conv2d::register(store, &format!("{prefix}.s1.head"), c, 3, 3, 1)?,
        Conv2d::register(store, &format!("{prefix}.s2.head"), c, 3, 3, 1)?,
    ])
}

/// Pad (right/bottom edge replication) to even spatial extents; returns the
/// padded tensor and the original extents for later cropping.
fn pad_to_even<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
    let (_, _, h, w) = x.shape().as_nchw("pad_to_even")?;
    let t = if h % 2 == 1 || w % 2 == 1 { x.pad_edge(w % 2, h % 2)? } else { x.clone() };
    Ok((t, h, w))
}

fn crop_to<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (_, _, xh, xw) = x.shape().as_nchw("crop_to")?;
    let mut t = x.clone();
    if xh != h {
        t = t.narrow(2, 0, h)?;
    }
    if xw != w {
        t = t.narrow(3, 0, w)?;
    }
    Ok(t)
}

impl DualStreamNet {
    /// Augmenter + stem: the shared front end seeding both streams.
    fn front<T: Element>(&self, bound: &Bound<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut aug = input.clone();
        for (k, conv) in self.pyramid.iter().enumerate() {
            let (_, _, h, w) = input.shape().as_nchw("augment")?;
            let mut level = input.clone();
            for _ in 0..=k {
                let (p, _, _) = pad_to_even(&level)?;
                level = p.avgpool2()?;
            }
            let mut feat = conv.forward(bound, &level)?;
            for _ in 0..=k {
                feat = feat.bilinear_up2()?;
            }
            aug = aug.concat(&crop_to(&feat, h, w)?, 1)?;
        }
        self.stem.forward(bound, &aug)
    }

    /// Run the dual-stream network; returns (T̂, R̂), each shaped like the
    /// input with 3 channels. No range clamp is applied.
    pub fn forward<T: Element>(
        &self,
        bound: &Bound<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let x = self.front(bound, input)?;
        let (mut x1, mut x2) = (x.clone(), x);
        match &self.body {
            Body::Plain { chain } => {
                for blk in chain {
                    let (y1, y2) = blk.forward(bound, &x1, &x2)?;
                    x1 = y1;
                    x2 = y2;
                }
            }
            Body::UShaped { enc, bottleneck, skip_fuse, dec } => {
                let cross = self.cfg.exchange != ExchangeMode::NoInteraction;
                let mut skips: Vec<(Tensor<T>, Tensor<T>, usize, usize)> = Vec::new();
                for blk in enc {
                    let (y1, y2) = blk.forward(bound, &x1, &x2)?;
                    let (p1, h, w) = pad_to_even(&y1)?;
                    let (p2, _, _) = pad_to_even(&y2)?;
                    skips.push((y1, y2, h, w));
                    x1 = p1.maxpool2()?;
                    x2 = p2.maxpool2()?;
                }
                let (y1, y2) = bottleneck.forward(bound, &x1, &x2)?;
                x1 = y1;
                x2 = y2;
                for i in (0..enc.len()).rev() {
                    let (s1, s2, h, w) = &skips[i];
                    let u1 = crop_to(&x1.bilinear_up2()?, *h, *w)?;
                    let u2 = crop_to(&x2.bilinear_up2()?, *h, *w)?;
                    // fusion input order: upsampled, own skip, donated skip
                    let mut f1 = u1.concat(s1, 1)?;
                    let mut f2 = u2.concat(s2, 1)?;
                    if cross {
                        f1 = f1.concat(s2, 1)?;
                        f2 = f2.concat(s1, 1)?;
                    }
                    let g1 = skip_fuse[i][0].forward(bound, &f1)?;
                    let g2 = skip_fuse[i][1].forward(bound, &f2)?;
                    let (y1, y2) = dec[i].forward(bound, &g1, &g2)?;
                    x1 = y1;
                    x2 = y2;
                }
            }
        }
        Ok((self.heads[0].forward(bound, &x1)?, self.heads[1].forward(bound, &x2)?))
    }

    /// Run one stream in isolation. Only meaningful for `NoInteraction`
    /// builds, whose streams share no data; used to verify that the w/o-FI
    /// ablation factors into two independent single-stream networks.
    pub fn forward_single<T: Element>(
        &self,
        bound: &Bound<T>,
        input: &Tensor<T>,
        stream: usize,
    ) -> Result<Tensor<T>> {
        if self.cfg.exchange != ExchangeMode::NoInteraction {
            return Err(Error::Contract(
                "forward_single: streams interact in this build; run forward instead".into(),
            ));
        }
        if stream > 1 {
            return Err(Error::Contract(format!("forward_single: no stream {stream}")));
        }
        let mut x = self.front(bound, input)?;
        match &self.body {
            Body::Plain { chain } => {
                for blk in chain {
                    x = blk.forward_single(bound, &x, stream)?;
                }
            }
            Body::UShaped { enc, bottleneck, skip_fuse, dec } => {
                let mut skips: Vec<(Tensor<T>, usize, usize)> = Vec::new();
                for blk in enc {
                    let y = blk.forward_single(bound, &x, stream)?;
                    let (p, h, w) = pad_to_even(&y)?;
                    skips.push((y, h, w));
                    x = p.maxpool2()?;
                }
                x = bottleneck.forward_single(bound, &x, stream)?;
                for i in (0..enc.len()).rev() {
                    let (s, h, w) = &skips[i];
                    let u = crop_to(&x.bilinear_up2()?, *h, *w)?;
                    let f = skip_fuse[i][stream].forward(bound, &u.concat(s, 1)?)?;
                    x = dec[i].forward_single(bound, &f, stream)?;
                }
            }
        }
        self.heads[stream].forward(bound, &x)
    }
}

/// Feed the frozen first stage, then the second stage on the concatenated
/// stage-1 outputs (plus the original input when the plan says so).
pub fn cascade_forward<T: Element>(
    stage1: &DualStreamNet,
    bound1: &Bound<T>,
    stage2: &DualStreamNet,
    bound2: &Bound<T>,
    input: &Tensor<T>,
    plan: &StagePlan,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (t1, r1) = stage1.forward(bound1, input)?;
    let mut x = t1.concat(&r1, 1)?;
    if plan.stage2_includes_input {
        x = x.concat(input, 1)?;
    }
    stage2.forward(bound2, &x)
}
