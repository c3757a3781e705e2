//! The interactive dual-stream mechanism: the ReLU / negative-ReLU
//! rectifier pair, the cross-stream exchange, and the block built from two
//! exchanged convolutions plus per-stream attention.
//!
//! The defining property is conservation: `relu(x) + negative_relu(x)`
//! reproduces `x` bit-exactly, so whatever one stream's rectifier discards
//! is handed to the other stream instead of being lost. Add fusion merges
//! the handed-over features by addition; Concat fusion stacks them on the
//! channel axis (own rectified features first, received ones second) and
//! lets a 1×1 convolution mix them back down.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{AttentionUnit, Conv2d};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// How exchanged activations are merged back into each stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Channel concatenation followed by a 1×1 convolution (halves the
    /// doubled channel count, so block output channels match input).
    Concat,
    /// Plain elementwise addition.
    Add,
}

/// Which rectifier pair the exchange uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExchangeMode {
    /// ReLU keeps a stream's positive part; the complementary negative part
    /// is donated to the other stream.
    Ytmt,
    /// Ablation: both paths use plain ReLU (cross-stream flow remains, but
    /// carries redundant instead of complementary information).
    ReluOnly,
    /// Ablation ("w/o FI"): streams stay fully independent; no fusion
    /// convolutions are created and nothing crosses over.
    NoInteraction,
}

/// `min(x, 0)`: the complement of ReLU under addition (Eq. of the rectifier
/// pair — one branch returns the element, the other a zero of matching
/// sign, so the sum restores the input without rounding).
pub fn negative_relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.neg_relu()
}

/// Cross-stream exchange of rectified activations. Returns the pre-fusion
/// pair: in `Concat` mode outputs have doubled channel extent (own
/// rectified features first, received features second) and the caller's
/// 1×1 convolution completes the merge; in `Add` mode the merge is the
/// addition itself. `NoInteraction` ignores `fusion` and returns the two
/// streams rectified independently.
pub fn ytmt_exchange<T: Element>(
    x1t: &Tensor<T>,
    x2t: &Tensor<T>,
    mode: ExchangeMode,
    fusion: FusionMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if x1t.shape() != x2t.shape() {
        return Err(Error::dim(
            "ytmt_exchange",
            format!("stream shapes differ: {} vs {}", x1t.shape(), x2t.shape()),
        ));
    }
    let (keep1, keep2) = (x1t.relu(), x2t.relu());
    let (give1, give2) = match mode {
        ExchangeMode::Ytmt => (x1t.neg_relu(), x2t.neg_relu()),
        ExchangeMode::ReluOnly => (x1t.relu(), x2t.relu()),
        ExchangeMode::NoInteraction => return Ok((keep1, keep2)),
    };
    match fusion {
        FusionMode::Add => Ok((keep1.add(&give2)?, keep2.add(&give1)?)),
        FusionMode::Concat => Ok((keep1.concat(&give2, 1)?, keep2.concat(&give1, 1)?)),
    }
}

/// One dual-stream block: two convolution layers per stream, each followed
/// by the rectifier exchange (and, in `Concat` mode, its 1×1 fusion
/// convolution), with a channel/pixel attention unit per stream at the
/// exit. Spatial extents are preserved; channels go `in_channels →
/// out_channels` at the first convolution.
#[derive(Clone, Debug)]
pub struct YtmtBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub exchange: ExchangeMode,
    pub fusion: FusionMode,
    conv1: [Conv2d; 2],
    conv2: [Conv2d; 2],
    fuse1: Option<[Conv2d; 2]>,
    fuse2: Option<[Conv2d; 2]>,
    att: [AttentionUnit; 2],
}

impl YtmtBlock {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        exchange: ExchangeMode,
        fusion: FusionMode,
    ) -> Result<Self> {
        let c = out_channels;
        let conv =
            |store: &mut ParamStore, stream: &str, idx: usize, in_c: usize| -> Result<Conv2d> {
                Conv2d::register(store, &format!("{name}.{stream}.conv{idx}"), in_c, c, 3, 1)
            };
        let conv1 = [conv(store, "s1", 0, in_channels)?, conv(store, "s2", 0, in_channels)?];
        let conv2 = [conv(store, "s1", 1, c)?, conv(store, "s2", 1, c)?];
        let needs_fusion_convs =
            fusion == FusionMode::Concat && exchange != ExchangeMode::NoInteraction;
        let fuse = |store: &mut ParamStore, idx: usize| -> Result<Option<[Conv2d; 2]>> {
            if needs_fusion_convs {
                Ok(Some([
                    Conv2d::register(store, &format!("{name}.s1.fuse{idx}"), 2 * c, c, 1, 1)?,
                    Conv2d::register(store, &format!("{name}.s2.fuse{idx}"), 2 * c, c, 1, 1)?,
                ]))
            } else {
                Ok(None)
            }
        };
        let fuse1 = fuse(store, 0)?;
        let fuse2 = fuse(store, 1)?;
        let att = [
            AttentionUnit::register(store, &format!("{name}.s1.att"), c, AttentionUnit::DEFAULT_REDUCTION)?,
            AttentionUnit::register(store, &format!("{name}.s2.att"), c, AttentionUnit::DEFAULT_REDUCTION)?,
        ];
        Ok(YtmtBlock { in_channels, out_channels, exchange, fusion, conv1, conv2, fuse1, fuse2, att })
    }

    fn exchange_and_fuse<T: Element>(
        &self,
        bound: &Bound<T>,
        a1: &Tensor<T>,
        a2: &Tensor<T>,
        fuse: &Option<[Conv2d; 2]>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (e1, e2) = ytmt_exchange(a1, a2, self.exchange, self.fusion)?;
        match fuse {
            Some([f1, f2]) => Ok((f1.forward(bound, &e1)?, f2.forward(bound, &e2)?)),
            None => Ok((e1, e2)),
        }
    }

    pub fn forward<T: Element>(
        &self,
        bound: &Bound<T>,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if x1.shape() != x2.shape() {
            return Err(Error::dim(
                "ytmt_block_forward",
                format!("stream shapes differ: {} vs {}", x1.shape(), x2.shape()),
            ));
        }
        let a1 = self.conv1[0].forward(bound, x1)?;
        let a2 = self.conv1[1].forward(bound, x2)?;
        let (f1, f2) = self.exchange_and_fuse(bound, &a1, &a2, &self.fuse1)?;
        let b1 = self.conv2[0].forward(bound, &f1)?;
        let b2 = self.conv2[1].forward(bound, &f2)?;
        let (g1, g2) = self.exchange_and_fuse(bound, &b1, &b2, &self.fuse2)?;
        Ok((self.att[0].forward(bound, &g1)?, self.att[1].forward(bound, &g2)?))
    }

    /// Run one stream of a `NoInteraction` block in isolation (conv → relu
    /// → conv → relu → attention); contract error when streams interact.
    pub fn forward_single<T: Element>(
        &self,
        bound: &Bound<T>,
        x: &Tensor<T>,
        stream: usize,
    ) -> Result<Tensor<T>> {
        if self.exchange != ExchangeMode::NoInteraction {
            return Err(Error::Contract(
                "forward_single: block streams interact; run forward instead".into(),
            ));
        }
        if stream > 1 {
            return Err(Error::Contract(format!("forward_single: no stream {stream}")));
        }
        let a = self.conv1[stream].forward(bound, x)?.relu();
        let b = self.conv2[stream].forward(bound, &a)?.relu();
        self.att[stream].forward(bound, &b)
    }
}
