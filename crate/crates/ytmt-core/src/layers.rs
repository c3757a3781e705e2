//! Differentiable building blocks: same-padding convolution layers and the
//! channel/pixel attention unit used at the tail of every dual-stream block.
//!
//! Layers are lightweight descriptions holding [`ParamId`]s into a
//! [`ParamStore`]; the actual tensors come from a per-step [`Bound`] view,
//! so one layer definition serves every forward pass and precision.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::shape::Shape;
use crate::tensor::Tensor;

/// 2-D convolution with odd kernel extent and same-size padding at stride 1.
/// Weight layout is `(out, in, k, k)`; bias is per-output-channel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Register weights under `<name>.weight` / `<name>.bias` with Kaiming
    /// fan-in initialization and zero bias. Padding is `kernel / 2`, which
    /// preserves spatial extents at stride 1.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::register_with_bias(store, name, in_channels, out_channels, kernel, stride, 0.0)
    }

    /// `register` with a constant initial bias other than zero (used by
    /// gate sub-nets that should start slightly inside their active region).
    pub fn register_with_bias(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias_init: f32,
    ) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::Contract(format!("{name}: kernel extent {kernel} must be odd")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Contract(format!("{name}: zero channel extent")));
        }
        let weight = store.register(
            &format!("{name}.weight"),
            Shape::nchw(out_channels, in_channels, kernel, kernel),
            Init::KaimingNormal { fan_in: in_channels * kernel * kernel },
            true,
        )?;
        let bias = store.register(
            &format!("{name}.bias"),
            Shape::nchw(1, out_channels, 1, 1),
            Init::Constant(bias_init),
            true,
        )?;
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Element>(&self, bound: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.shape().as_nchw("conv2d_forward")?;
        if c != self.in_channels {
            return Err(Error::dim(
                "conv2d_forward",
                format!("input has {c} channels, layer expects {}", self.in_channels),
            ));
        }
        x.conv2d(bound.get(self.weight), bound.get(self.bias), self.stride, self.padding)
    }
}

/// Channel attention followed by pixel attention.
///
/// Channel branch: global average pool → 1×1 conv (c → c/r) → relu →
/// 1×1 conv (c/r → c) → sigmoid, multiplied onto the input per channel.
/// Pixel branch (applied to the channel-gated map): 1×1 conv (c → c/r) →
/// relu → 1×1 conv (c/r → 1) → sigmoid, multiplied per pixel across all
/// channels. Both gates lie strictly inside (0, 1), so attention never
/// amplifies magnitudes.
#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub channels: usize,
    ca_squeeze: Conv2d,
    ca_expand: Conv2d,
    pa_squeeze: Conv2d,
    pa_map: Conv2d,
}

impl AttentionUnit {
    pub const DEFAULT_REDUCTION: usize = 8;

    pub fn register(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Contract(format!("{name}: zero reduction ratio")));
        }
        let mid = (channels / reduction).max(1);
        // squeeze layers start with a small positive bias so the (often
        // 1–4 unit) hidden layer begins inside its active region; a zero
        // start leaves the squeeze's relu input exactly at its kink
        // wherever every incoming feature is zero
        let squeeze_bias = 0.05;
        Ok(AttentionUnit {
            channels,
            ca_squeeze: Conv2d::register_with_bias(
                store, &format!("{name}.ca0"), channels, mid, 1, 1, squeeze_bias,
            )?,
            ca_expand: Conv2d::register(store, &format!("{name}.ca1"), mid, channels, 1, 1)?,
            pa_squeeze: Conv2d::register_with_bias(
                store, &format!("{name}.pa0"), channels, mid, 1, 1, squeeze_bias,
            )?,
            pa_map: Conv2d::register(store, &format!("{name}.pa1"), mid, 1, 1, 1)?,
        })
    }

    pub fn forward<T: Element>(&self, bound: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.shape().as_nchw("attention_forward")?;
        if c != self.channels {
            return Err(Error::dim(
                "attention_forward",
                format!("input has {c} channels, unit expects {}", self.channels),
            ));
        }
        let pooled = x.spatial_mean()?;
        let ca = self
            .ca_expand
            .forward(bound, &self.ca_squeeze.forward(bound, &pooled)?.relu())?
            .sigmoid();
        let gated = x.mul(&ca)?;
        let pa = self
            .pa_map
            .forward(bound, &self.pa_squeeze.forward(bound, &gated)?.relu())?
            .sigmoid();
        gated.mul(&pa)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradCheckConfig};
    use crate::rng;
    use crate::tensor::Tape;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
        let mut r = rng::stream(seed, "layers-test", 0);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_one_by_one_conv_passes_input_through() {
        let mut store = ParamStore::new(0);
        let conv = Conv2d::register(&mut store, "id", 3, 3, 1, 1).unwrap();
        let mut eye = vec![0.0f32; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        store.set_data(conv.weight, eye).unwrap();

        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape).unwrap();
        let data = rand_vec(2 * 3 * 4 * 5, 1);
        let x = tape.leaf(Shape::nchw(2, 3, 4, 5), data.clone(), false).unwrap();
        let y = conv.forward(&bound, &x).unwrap();
        assert_eq!(y.value(), data, "identity kernel with zero bias must reproduce the input");
    }

    #[test]
    fn conv_layer_rejects_channel_mismatch() {
        let mut store = ParamStore::new(0);
        let conv = Conv2d::register(&mut store, "c", 4, 2, 3, 1).unwrap();
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape.zeros(Shape::nchw(1, 3, 4, 4), false);
        let err = conv.forward(&bound, &x).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn saturated_gates_open_the_attention_unit() {
        let mut store = ParamStore::new(3);
        let att = AttentionUnit::register(&mut store, "att", 4, 8).unwrap();
        // zero both gate-producing convs and saturate their biases: the
        // sigmoid inputs become +30 so every gate is 1 - O(1e-13)
        for conv in [&att.ca_expand, &att.pa_map] {
            let n = store.entry(conv.weight).shape.numel();
            store.set_data(conv.weight, vec![0.0; n]).unwrap();
            let nb = store.entry(conv.bias).shape.numel();
            store.set_data(conv.bias, vec![30.0; nb]).unwrap();
        }
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape).unwrap();
        let data = rand_vec(1 * 4 * 3 * 3, 5);
        let x = tape.leaf(Shape::nchw(1, 4, 3, 3), data.clone(), false).unwrap();
        let y = att.forward(&bound, &x).unwrap();
        for (a, b) in y.value().iter().zip(&data) {
            assert!((a - b).abs() < 1e-6, "open gates must pass input through: {a} vs {b}");
        }
    }

    #[test]
    fn attention_never_amplifies_magnitudes() {
        let mut store = ParamStore::new(4);
        let att = AttentionUnit::register(&mut store, "att", 8, 8).unwrap();
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape).unwrap();
        let data = rand_vec(2 * 8 * 4 * 4, 6);
        let x = tape.leaf(Shape::nchw(2, 8, 4, 4), data.clone(), false).unwrap();
        let y = att.forward(&bound, &x).unwrap();
        for (a, b) in y.value().iter().zip(&data) {
            assert!(a.abs() <= b.abs() + 1e-12, "gates in (0,1) cannot amplify: |{a}| > |{b}|");
        }
    }

    #[test]
    fn attention_output_shape_matches_input() {
        let mut store = ParamStore::new(5);
        let att = AttentionUnit::register(&mut store, "att", 5, 8).unwrap();
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape.zeros(Shape::nchw(3, 5, 6, 7), false);
        let y = att.forward(&bound, &x).unwrap();
        assert_eq!(y.shape(), &Shape::nchw(3, 5, 6, 7));
    }

    #[test]
    fn attention_gradcheck_end_to_end() {
        let mut store = ParamStore::new(6);
        let att = AttentionUnit::register(&mut store, "att", 4, 8).unwrap();
        let inp = {
            let mut d: Vec<f64> = rand_vec(1 * 4 * 4 * 4, 7).iter().map(|&v| v as f64).collect();
            crate::gradcheck::nudge_from_kinks(&mut d, &[0.0], 2.5e-3);
            (Shape::nchw(1, 4, 4, 4), d)
        };
        let report = gradcheck(
            "attention",
            &[inp],
            move |tape, xs| {
                let bound = store.bind(tape)?;
                att.forward(&bound, &xs[0])
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "attention gradcheck: {:.3e}", report.max_rel_err);
    }
}
