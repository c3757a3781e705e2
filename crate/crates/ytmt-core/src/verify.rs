//! The standard gradient-verification suite: every differentiable tensor
//! op, the layers, each block variant, both backbones, the cascade, and
//! every loss term, finite-difference checked in double precision at
//! inputs a safe margin (≥ 1e-3) from nondifferentiable points.
//!
//! The suite is deterministic (fixed per-check seeds) and is consumed both
//! by the `gradcheck` CLI subcommand and by the acceptance test.

use crate::error::Result;
use crate::gradcheck::{find_kink_safe_inputs, gradcheck, CheckReport, GradCheckConfig};
use crate::loss::{
    adversarial_losses, exclusion_loss, perceptual_loss, reconstruction_loss, total_loss,
    Discriminator, FeatureExtractor, LossInputs, LossWeights,
};
use crate::net::{build_plain, build_ushaped, cascade_forward, AugmenterSpec, StagePlan, UNetConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::shape::Shape;
use crate::tensor::{Tape, Tensor};
use crate::ytmt::{ExchangeMode, FusionMode, YtmtBlock};

/// Aggregate outcome of the whole suite.
#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckReport> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// One line per check: status, name, worst relative error, tolerance.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<24} max_rel_err {:.3e} (tol {:.0e}, {} evals)\n",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_err,
                c.tol,
                c.evals
            ));
        }
        out.push_str(&format!(
            "{}/{} checks passed\n",
            self.checks.iter().filter(|c| c.passed()).count(),
            self.checks.len()
        ));
        out
    }
}

/// Margin from nondifferentiable points used when sampling inputs. The
/// contract requires ≥ 1e-3; the extra headroom keeps central differences
/// (half-step 1e-3) from stepping across a kink.
pub const KINK_MARGIN: f64 = 2.5e-3;

struct Suite {
    checks: Vec<CheckReport>,
}

impl Suite {
    fn run<F>(
        &mut self,
        name: &str,
        shapes: &[Shape],
        scale: f64,
        margin: f64,
        seed0: u64,
        tries: u64,
        step: Option<f64>,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let inputs = find_kink_safe_inputs(name, shapes, scale, margin, seed0, tries, &f)?;
        let cfg = GradCheckConfig {
            step: step.unwrap_or(GradCheckConfig::default().step),
            ..GradCheckConfig::default()
        };
        self.checks.push(gradcheck(name, &inputs, &f, &cfg)?);
        Ok(())
    }
}

fn rand_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng::stream(seed, "verify:aux", 0);
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn lift_biases(store: &mut ParamStore, delta: f32) -> Result<()> {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.name.ends_with(".bias"))
        .map(|(id, e)| (id, e.data.iter().map(|v| v + delta).collect::<Vec<f32>>()))
        .collect();
    for (id, data) in ids {
        store.set_data(id, data)?;
    }
    Ok(())
}

/// Run the complete verification suite.
pub fn standard_suite() -> Result<SuiteReport> {
    let mut s = Suite { checks: Vec::new() };
    let sh = Shape::nchw(2, 3, 6, 6);
    let m = KINK_MARGIN;

    // -- elementwise binary (including a broadcast case per op family) -----
    s.run("op:add", &[sh.clone(), sh.clone()], 1.0, m, 1, 8, None, |_, xs| xs[0].add(&xs[1]))?;
    s.run(
        "op:add-broadcast",
        &[sh.clone(), Shape::nchw(1, 3, 1, 1)],
        1.0,
        m,
        2,
        8,
        None,
        |_, xs| xs[0].add(&xs[1]),
    )?;
    s.run("op:sub", &[sh.clone(), sh.clone()], 1.0, m, 3, 8, None, |_, xs| xs[0].sub(&xs[1]))?;
    s.run("op:mul", &[sh.clone(), sh.clone()], 1.0, m, 4, 8, None, |_, xs| xs[0].mul(&xs[1]))?;
    s.run(
        "op:mul-broadcast",
        &[sh.clone(), Shape::nchw(2, 3, 1, 1)],
        1.0,
        m,
        5,
        8,
        None,
        |_, xs| xs[0].mul(&xs[1]),
    )?;
    // denominator lifted away from zero: |den| ∈ (2, 4)
    s.run("op:div", &[sh.clone(), sh.clone()], 1.0, m, 6, 8, None, |_, xs| {
        xs[0].div(&xs[1].add_scalar(3.0))
    })?;

    // -- elementwise unary --------------------------------------------------
    s.run("op:add_scalar", &[sh.clone()], 1.0, m, 7, 8, None, |_, xs| Ok(xs[0].add_scalar(0.7)))?;
    s.run("op:mul_scalar", &[sh.clone()], 1.0, m, 8, 8, None, |_, xs| {
        Ok(xs[0].mul_scalar(-1.3))
    })?;
    s.run("op:neg", &[sh.clone()], 1.0, m, 9, 8, None, |_, xs| Ok(xs[0].neg()))?;
    s.run("op:relu", &[sh.clone()], 1.0, m, 10, 64, None, |_, xs| Ok(xs[0].relu()))?;
    s.run("op:neg_relu", &[sh.clone()], 1.0, m, 11, 64, None, |_, xs| Ok(xs[0].neg_relu()))?;
    s.run("op:sigmoid", &[sh.clone()], 2.0, m, 12, 8, None, |_, xs| Ok(xs[0].sigmoid()))?;
    s.run("op:tanh", &[sh.clone()], 2.0, m, 13, 8, None, |_, xs| Ok(xs[0].tanh()))?;
    s.run("op:abs", &[sh.clone()], 1.0, m, 14, 64, None, |_, xs| Ok(xs[0].abs()))?;
    // arguments lifted into the strictly-positive domain
    s.run("op:ln", &[sh.clone()], 1.0, m, 15, 8, None, |_, xs| Ok(xs[0].add_scalar(2.0).ln()))?;
    s.run("op:sqrt", &[sh.clone()], 1.0, m, 16, 8, None, |_, xs| {
        Ok(xs[0].add_scalar(2.0).sqrt())
    })?;
    s.run("op:clamp", &[sh.clone()], 1.0, m, 17, 64, None, |_, xs| Ok(xs[0].clamp(-0.5, 0.5)))?;

    // -- reductions and shape ops -------------------------------------------
    s.run("op:sum", &[sh.clone()], 1.0, m, 18, 8, None, |_, xs| Ok(xs[0].sum()))?;
    s.run("op:mean", &[sh.clone()], 1.0, m, 19, 8, None, |_, xs| Ok(xs[0].mean()))?;
    s.run("op:spatial_mean", &[sh.clone()], 1.0, m, 20, 8, None, |_, xs| xs[0].spatial_mean())?;
    s.run("op:narrow", &[sh.clone()], 1.0, m, 21, 8, None, |_, xs| xs[0].narrow(2, 1, 3))?;
    s.run("op:concat", &[sh.clone(), sh.clone()], 1.0, m, 22, 8, None, |_, xs| {
        xs[0].concat(&xs[1], 1)
    })?;
    s.run("op:pad_edge", &[sh.clone()], 1.0, m, 23, 8, None, |_, xs| xs[0].pad_edge(1, 1))?;
    // `detach` is deliberately absent: its defined gradient (zero) differs
    // from its value function by contract, which is exactly what a finite
    // difference cannot match; its grad-stopping behavior is asserted
    // directly in the tensor and loss tests instead.

    // -- convolution / resampling --------------------------------------------
    let xsh = Shape::nchw(2, 3, 6, 6);
    let wsh = Shape::nchw(4, 3, 3, 3);
    let bsh = Shape::nchw(1, 4, 1, 1);
    s.run(
        "op:conv2d",
        &[xsh.clone(), wsh.clone(), bsh.clone()],
        1.0,
        m,
        25,
        8,
        None,
        |_, xs| xs[0].conv2d(&xs[1], &xs[2], 1, 1),
    )?;
    s.run("op:conv2d-stride2", &[xsh.clone(), wsh, bsh], 1.0, m, 26, 8, None, |_, xs| {
        xs[0].conv2d(&xs[1], &xs[2], 2, 1)
    })?;
    s.run(
        "op:conv2d-1x1",
        &[xsh.clone(), Shape::nchw(2, 3, 1, 1), Shape::nchw(1, 2, 1, 1)],
        1.0,
        m,
        27,
        8,
        None,
        |_, xs| xs[0].conv2d(&xs[1], &xs[2], 1, 0),
    )?;
    s.run("op:maxpool2", &[Shape::nchw(2, 3, 8, 8)], 1.0, m, 28, 256, None, |_, xs| {
        xs[0].maxpool2()
    })?;
    s.run("op:avgpool2", &[Shape::nchw(2, 3, 8, 8)], 1.0, m, 29, 8, None, |_, xs| {
        xs[0].avgpool2()
    })?;
    s.run("op:bilinear_up2", &[Shape::nchw(2, 3, 5, 5)], 1.0, m, 30, 8, None, |_, xs| {
        xs[0].bilinear_up2()
    })?;

    // -- layers ---------------------------------------------------------------
    {
        let mut store = ParamStore::new(101);
        let conv = crate::layers::Conv2d::register(&mut store, "l.conv", 3, 4, 3, 1)?;
        s.run("layer:conv2d", &[Shape::nchw(1, 3, 6, 6)], 1.0, m, 31, 8, None, move |tape, xs| {
            let b = store.bind(tape)?;
            conv.forward(&b, &xs[0])
        })?;
    }
    {
        let mut store = ParamStore::new(102);
        let att = crate::layers::AttentionUnit::register(
            &mut store,
            "l.att",
            4,
            crate::layers::AttentionUnit::DEFAULT_REDUCTION,
        )?;
        s.run(
            "layer:pixel-attention",
            &[Shape::nchw(1, 4, 6, 6)],
            1.0,
            m,
            32,
            256,
            None,
            move |tape, xs| {
                let b = store.bind(tape)?;
                att.forward(&b, &xs[0])
            },
        )?;
    }

    // -- YTMT block variants ----------------------------------------------------
    for (name, exchange, fusion, seed) in [
        ("block:ytmt-concat", ExchangeMode::Ytmt, FusionMode::Concat, 201u64),
        ("block:ytmt-add", ExchangeMode::Ytmt, FusionMode::Add, 202),
        ("block:relu-only", ExchangeMode::ReluOnly, FusionMode::Concat, 203),
        ("block:no-interaction", ExchangeMode::NoInteraction, FusionMode::Concat, 204),
    ] {
        let mut store = ParamStore::new(seed);
        let block = YtmtBlock::register(&mut store, "blk", 4, 4, exchange, fusion)?;
        let bsh = Shape::nchw(1, 4, 6, 6);
        s.run(name, &[bsh.clone(), bsh], 1.0, m, seed, 256, None, move |tape, xs| {
            let b = store.bind(tape)?;
            let (y1, y2) = block.forward(&b, &xs[0], &xs[1])?;
            y1.concat(&y2, 1)
        })?;
    }

    // -- backbones and the cascade -----------------------------------------------
    let tiny = |in_channels: usize| UNetConfig {
        depth: 1,
        plain_blocks: 2,
        base_channels: 2,
        fusion: FusionMode::Concat,
        exchange: ExchangeMode::Ytmt,
        augmenter: AugmenterSpec::RawIdentity,
        in_channels,
    };
    {
        let mut store = ParamStore::new(301);
        let net = build_plain(&mut store, "net", &tiny(2))?;
        s.run(
            "net:plain",
            &[Shape::nchw(1, 2, 4, 4)],
            1.0,
            2e-3,
            301,
            4096,
            None,
            move |tape, xs| {
                let b = store.bind(tape)?;
                let (t, r) = net.forward(&b, &xs[0])?;
                t.concat(&r, 1)
            },
        )?;
    }
    {
        let mut store = ParamStore::new(302);
        let net = build_ushaped(&mut store, "net", &tiny(2))?;
        // the U-shaped body records the most rectifier inputs of any check,
        // so it runs at the contract-minimum margin with a half-step small
        // enough (5e-4) never to cross a kink from 1e-3 away
        s.run(
            "net:ushaped",
            &[Shape::nchw(1, 2, 6, 6)],
            2.0,
            1e-3,
            302,
            16384,
            Some(5e-4),
            move |tape, xs| {
                let b = store.bind(tape)?;
                let (t, r) = net.forward(&b, &xs[0])?;
                t.concat(&r, 1)
            },
        )?;
    }
    {
        // two stacked nets record twice the rectifier inputs, so the
        // cascade check uses one block per stage and lifts every bias a
        // quarter-unit: pre-activations spread away from the relu kinks
        // without changing which adjoints the check exercises
        let one_block = |in_channels: usize| UNetConfig { plain_blocks: 1, ..tiny(in_channels) };
        let mut s1 = ParamStore::new(303);
        let n1 = build_plain(&mut s1, "net", &one_block(3))?;
        lift_biases(&mut s1, 0.25)?;
        s1.set_trainable_by_prefix("", false);
        let mut s2 = ParamStore::new(304);
        let n2 = build_plain(&mut s2, "net", &one_block(6))?;
        lift_biases(&mut s2, 0.25)?;
        let plan = StagePlan { stages: 2, stage2_includes_input: false };
        s.run(
            "net:cascade",
            &[Shape::nchw(1, 3, 4, 4)],
            2.0,
            1e-3,
            305,
            16384,
            Some(5e-4),
            move |tape, xs| {
                let b1 = s1.bind(tape)?;
                let b2 = s2.bind(tape)?;
                let (t, r) = cascade_forward(&n1, &b1, &n2, &b2, &xs[0], &plan)?;
                t.concat(&r, 1)
            },
        )?;
    }

    // -- losses ----------------------------------------------------------------
    let lsh = Shape::nchw(1, 3, 9, 9);
    let w = LossWeights::default();
    {
        let w = w.clone();
        s.run(
            "loss:reconstruction",
            &[lsh.clone(), lsh.clone(), lsh.clone(), lsh.clone()],
            1.0,
            m,
            401,
            256,
            None,
            move |tape, xs| {
                let i = tape.leaf(xs[0].shape().clone(), rand_vec(xs[0].numel(), 401, 0.0, 2.0), false)?;
                reconstruction_loss(&xs[0], &xs[1], &xs[2], &xs[3], &i, &w)
            },
        )?;
    }
    {
        let mut store = ParamStore::new(402);
        let fx = FeatureExtractor::register(&mut store, "fx", 3)?;
        let w = w.clone();
        s.run(
            "loss:perceptual",
            &[lsh.clone(), lsh.clone(), lsh.clone(), lsh.clone()],
            1.0,
            m,
            402,
            256,
            None,
            move |tape, xs| {
                let b = store.bind(tape)?;
                perceptual_loss(&xs[0], &xs[1], &xs[2], &xs[3], &fx, &b, &w)
            },
        )?;
    }
    {
        // smaller half-step: the tanh(λ·|∇|) composition carries enough
        // third-order curvature that h = 1e-3 leaves visible truncation error
        let w = w.clone();
        s.run(
            "loss:exclusion",
            &[lsh.clone(), lsh.clone()],
            1.0,
            m,
            403,
            256,
            Some(1e-4),
            move |_, xs| exclusion_loss(&xs[0], &xs[1], &w),
        )?;
    }
    {
        let mut store = ParamStore::new(404);
        let disc = Discriminator::register(&mut store, "disc")?;
        s.run(
            "loss:adversarial-gen",
            &[lsh.clone(), lsh.clone()],
            1.0,
            m,
            404,
            256,
            None,
            move |tape, xs| {
                let b = store.bind(tape)?;
                let (gen, _) = adversarial_losses(&xs[0], &xs[1], &disc, &b)?;
                Ok(gen)
            },
        )?;
    }
    {
        // the D loss detaches the prediction by contract, so the check
        // differences only through the live input (the real image); the
        // prediction enters as a fixed interior leaf
        let mut store = ParamStore::new(405);
        let disc = Discriminator::register(&mut store, "disc")?;
        s.run("loss:adversarial-disc", &[lsh.clone()], 1.0, m, 405, 256, None, move |tape, xs| {
            let that = tape.leaf(
                xs[0].shape().clone(),
                rand_vec(xs[0].numel(), 405, -1.0, 1.0),
                false,
            )?;
            let b = store.bind(tape)?;
            let (_, d) = adversarial_losses(&xs[0], &that, &disc, &b)?;
            Ok(d)
        })?;
    }
    {
        let mut store = ParamStore::new(406);
        let fx = FeatureExtractor::register(&mut store, "fx", 3)?;
        let w = w.clone();
        // the summed objective stacks every L1 kink of its parts, so the
        // margin hunt needs more room (half-step 1e-4 still clears 1.2e-3)
        s.run(
            "loss:total",
            &[lsh.clone(), lsh.clone(), lsh.clone(), lsh.clone(), lsh.clone()],
            1.0,
            1.2e-3,
            406,
            4096,
            Some(1e-4),
            move |tape, xs| {
                let b = store.bind(tape)?;
                let ins =
                    LossInputs { that: &xs[0], rhat: &xs[1], t: &xs[2], r: &xs[3], i: &xs[4] };
                Ok(total_loss(&ins, &fx, &b, None, &w)?.total)
            },
        )?;
    }

    Ok(SuiteReport { checks: s.checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_suite_passes_and_covers_every_op_family() {
        let report = standard_suite().unwrap();
        let rendered = report.render();
        assert!(report.all_passed(), "suite failures:\n{rendered}");
        // spot-check coverage: one entry per op family and per loss
        for needle in [
            "op:add",
            "op:div",
            "op:relu",
            "op:neg_relu",
            "op:conv2d",
            "op:maxpool2",
            "op:bilinear_up2",
            "layer:pixel-attention",
            "block:ytmt-concat",
            "net:ushaped",
            "net:cascade",
            "loss:reconstruction",
            "loss:perceptual",
            "loss:exclusion",
            "loss:adversarial-gen",
            "loss:total",
        ] {
            assert!(
                report.checks.iter().any(|c| c.name == needle),
                "missing check {needle}:\n{rendered}"
            );
        }
        assert!(report.checks.len() >= 35, "expected a broad suite, got:\n{rendered}");
    }
}
