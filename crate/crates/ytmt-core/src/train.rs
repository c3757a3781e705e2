//! Training: Adam with a halving milestone schedule, the single-stage loop
//! with curve logging / checkpointing / resume, the two-stage cascade
//! protocol with freeze auditing, and the ablation suite runner.
//!
//! Everything is deterministic under a fixed seed: parameter init, batch
//! order, and loss curves come from stateless per-purpose RNG streams, and
//! all iteration follows parameter-registration order (no hash-map order
//! anywhere on the numeric path).

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use rand::Rng;

use crate::checkpoint::{self, AdamSnapshot, Checkpoint};
use crate::data::{Dataset, DatasetSpec, Image, MixtureSample, Source};
use crate::error::{Error, Result};
use crate::loss::{
    adversarial_losses, total_loss, Discriminator, FeatureExtractor, LossInputs, LossReport,
    LossWeights,
};
use crate::metrics::{psnr, ssim, ImageMetrics, MetricsReport};
use crate::net::{
    build_plain, build_ushaped, AugmenterSpec, DualStreamNet, StagePlan, UNetConfig,
};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::ytmt::{ExchangeMode, FusionMode};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second moment accumulators aligned index-for-index with a store's
/// parameters (frozen entries keep zero moments and are never touched).
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let (m, v) = store
            .iter()
            .map(|(_, e)| (vec![0.0f32; e.shape.numel()], vec![0.0f32; e.shape.numel()]))
            .unzip();
        AdamState { step: 0, m, v }
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot { step: self.step, m: self.m.clone(), v: self.v.clone() }
    }

    pub fn from_snapshot(snap: &AdamSnapshot, store: &ParamStore) -> Result<AdamState> {
        let lens: Vec<usize> = store.iter().map(|(_, e)| e.shape.numel()).collect();
        if snap.m.len() != lens.len() || snap.v.len() != lens.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer snapshot covers {} parameters, store has {}",
                snap.m.len(),
                lens.len()
            )));
        }
        for (k, n) in lens.iter().enumerate() {
            if snap.m[k].len() != *n || snap.v[k].len() != *n {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment {k} has wrong length ({} vs {n})",
                    snap.m[k].len()
                )));
            }
        }
        Ok(AdamState { step: snap.step, m: snap.m.clone(), v: snap.v.clone() })
    }
}

/// Gradients for every store entry after a backward pass, in registration
/// order; `None` where the parameter is frozen or off the loss's graph.
pub fn collect_grads<T: crate::element::Element>(
    store: &ParamStore,
    bound: &Bound<T>,
) -> Vec<Option<Vec<f32>>> {
    store.iter().map(|(id, _)| bound.grad_f32(id)).collect()
}

/// Scale all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grads(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update over every trainable parameter.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    grads: &[Option<Vec<f32>>],
    lr: f64,
) -> Result<()> {
    let meta: Vec<(crate::params::ParamId, bool, String)> =
        store.iter().map(|(id, e)| (id, e.trainable, e.name.clone())).collect();
    if grads.len() != meta.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            meta.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, (id, trainable, name)) in meta.iter().enumerate() {
        if !trainable {
            continue;
        }
        let g = grads[k]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("adam_step: missing gradient for {name:?}")))?;
        let mut data = store.entry(*id).data.clone();
        if g.len() != data.len() {
            return Err(Error::Contract(format!(
                "adam_step: gradient length {} for {name:?} with {} elements",
                g.len(),
                data.len()
            )));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for e in 0..data.len() {
            let ge = g[e] as f64;
            let me = ADAM_BETA1 * m[e] as f64 + (1.0 - ADAM_BETA1) * ge;
            let ve = ADAM_BETA2 * v[e] as f64 + (1.0 - ADAM_BETA2) * ge * ge;
            m[e] = me as f32;
            v[e] = ve as f32;
            let mhat = me / bc1;
            let vhat = ve / bc2;
            data[e] = (data[e] as f64 - lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
        }
        store.set_data(*id, data)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

/// Initial learning rate halved at each milestone fraction of the total
/// iteration budget (the paper's epoch schedule rescaled to fractions).
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<f64>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 1e-4, milestones: vec![0.5, 0.67, 0.83] }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&f| step as f64 >= f * total as f64)
            .count() as i32;
        self.initial * 0.5f64.powi(passed)
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Model variant: {U-shaped, plain} × {concat, add} × {single, two-stage},
/// plus the two ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Ucs,
    Uct,
    Uas,
    Uat,
    PlainCs,
    PlainAs,
    /// "w/o FI": no feature interaction anywhere (two independent streams).
    WoFi,
    /// Plain-ReLU exchange in the UCS topology.
    ReluOnly,
}

impl Variant {
    pub fn code(self) -> &'static str {
        match self {
            Variant::Ucs => "UCS",
            Variant::Uct => "UCT",
            Variant::Uas => "UAS",
            Variant::Uat => "UAT",
            Variant::PlainCs => "plain-CS",
            Variant::PlainAs => "plain-AS",
            Variant::WoFi => "w/o-FI",
            Variant::ReluOnly => "ReLU-only",
        }
    }

    /// Directory-safe lowercase code.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Ucs => "ucs",
            Variant::Uct => "uct",
            Variant::Uas => "uas",
            Variant::Uat => "uat",
            Variant::PlainCs => "plain-cs",
            Variant::PlainAs => "plain-as",
            Variant::WoFi => "wofi",
            Variant::ReluOnly => "relu-only",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        let all = [
            Variant::Ucs,
            Variant::Uct,
            Variant::Uas,
            Variant::Uat,
            Variant::PlainCs,
            Variant::PlainAs,
            Variant::WoFi,
            Variant::ReluOnly,
        ];
        all.iter()
            .find(|v| v.code().eq_ignore_ascii_case(s) || v.slug().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of UCS, UCT, UAS, UAT, plain-CS, plain-AS, w/o-FI, ReLU-only"
                ))
            })
    }

    pub fn exchange(self) -> ExchangeMode {
        match self {
            Variant::WoFi => ExchangeMode::NoInteraction,
            Variant::ReluOnly => ExchangeMode::ReluOnly,
            _ => ExchangeMode::Ytmt,
        }
    }

    pub fn fusion(self) -> FusionMode {
        match self {
            Variant::Uas | Variant::Uat | Variant::PlainAs => FusionMode::Add,
            _ => FusionMode::Concat,
        }
    }

    pub fn ushaped(self) -> bool {
        !matches!(self, Variant::PlainCs | Variant::PlainAs)
    }

    pub fn two_stage(self) -> bool {
        matches!(self, Variant::Uct | Variant::Uat)
    }
}

/// Everything one training run needs.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub variant: Variant,
    pub data: DatasetSpec,
    pub test_data: DatasetSpec,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub adversarial: bool,
    pub out_dir: PathBuf,
    pub depth: usize,
    pub base_channels: usize,
    pub plain_blocks: usize,
    pub augmenter: AugmenterSpec,
    pub lr: LrSchedule,
    /// Write an intermediate checkpoint every N steps (0 = final only).
    pub checkpoint_every: u64,
    /// Global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
    pub weights: LossWeights,
    pub stage2_includes_input: bool,
}

impl RunConfig {
    /// Desk-scale defaults: 32×32 Exact synthetic task, 2000 train / 200
    /// test samples, batch 8, 2000 iterations, adversarial off.
    pub fn desk_default(variant: Variant, seed: u64, out_dir: PathBuf) -> RunConfig {
        let data = DatasetSpec::procedural_default(seed);
        let test_data = DatasetSpec { count: 200, seed: seed ^ 0x7E57_7E57, ..data.clone() };
        RunConfig {
            variant,
            data,
            test_data,
            batch_size: 8,
            iterations: 2000,
            seed,
            adversarial: false,
            out_dir,
            depth: 3,
            base_channels: 32,
            plain_blocks: 6,
            augmenter: AugmenterSpec::RawIdentity,
            lr: LrSchedule::default(),
            checkpoint_every: 0,
            grad_clip: None,
            weights: LossWeights::default(),
            stage2_includes_input: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.test_data.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !self.lr.initial.is_finite() || self.lr.initial <= 0.0 {
            return Err(Error::Config("initial learning rate must be finite and > 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config("grad_clip must be finite and > 0".into()));
            }
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be ≥ 1".into()));
        }
        if self.variant.ushaped() && self.depth == 0 {
            return Err(Error::Config("depth must be ≥ 1".into()));
        }
        if !self.variant.ushaped() && self.plain_blocks == 0 {
            return Err(Error::Config("plain_blocks must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn stage_plan(&self) -> StagePlan {
        StagePlan {
            stages: if self.variant.two_stage() { 2 } else { 1 },
            stage2_includes_input: self.stage2_includes_input,
        }
    }

    /// Network config for the given cascade stage (1 or 2).
    pub fn unet_config(&self, stage: u8) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            plain_blocks: self.plain_blocks,
            base_channels: self.base_channels,
            fusion: self.variant.fusion(),
            exchange: self.variant.exchange(),
            augmenter: self.augmenter.clone(),
            in_channels: if stage == 2 { self.stage_plan().stage2_in_channels() } else { 3 },
        }
    }

    /// Deterministic textual echo of every reproducibility-relevant field;
    /// embedded in checkpoints and compared on resume.
    pub fn echo(&self, stage: u8) -> String {
        let ds = |d: &DatasetSpec| {
            let src = match &d.source {
                Source::Procedural => "procedural".to_string(),
                Source::Directory(p) => format!("dir:{}", p.display()),
            };
            format!(
                "source={src} crop={} count={} seed={} mode={:?} alpha={:?} sigma={:?}",
                d.crop, d.count, d.seed, d.mode, d.alpha, d.sigma
            )
        };
        let aug = match &self.augmenter {
            AugmenterSpec::RawIdentity => "raw".to_string(),
            AugmenterSpec::FixedRandomPyramid { levels, features_per_level } => {
                format!("pyramid({levels},{features_per_level})")
            }
        };
        let w = &self.weights;
        [
            format!("stage={stage}"),
            format!("variant={}", self.variant.code()),
            format!("seed={}", self.seed),
            format!("iterations={}", self.iterations),
            format!("batch_size={}", self.batch_size),
            format!("adversarial={}", self.adversarial),
            format!("depth={}", self.depth),
            format!("base_channels={}", self.base_channels),
            format!("plain_blocks={}", self.plain_blocks),
            format!("augmenter={aug}"),
            format!("lr={} milestones={:?}", self.lr.initial, self.lr.milestones),
            format!("checkpoint_every={}", self.checkpoint_every),
            format!("grad_clip={:?}", self.grad_clip),
            format!(
                "weights a={} b={} c={} d={} l_per={} l_exc={} l_adv={} omega={:?} levels={}",
                w.a,
                w.b,
                w.c,
                w.d,
                w.lambda_per,
                w.lambda_exc,
                w.lambda_adv,
                w.omega,
                w.exclusion_levels
            ),
            format!("stage2_includes_input={}", self.stage2_includes_input),
            format!("train {}", ds(&self.data)),
            format!("test {}", ds(&self.test_data)),
        ]
        .join("\n")
    }
}

// ---------------------------------------------------------------------------
// Stage training
// ---------------------------------------------------------------------------

/// Result of one trained stage, with the live parameters for reuse.
impl std::fmt::Debug for TrainedStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedStage")
            .field("params", &self.store.scalar_count())
            .field("steps", &self.curve.len())
            .field("out_dir", &self.out_dir)
            .finish()
    }
}

pub struct TrainedStage {
    pub store: ParamStore,
    pub net: DualStreamNet,
    pub curve: Vec<(u64, LossReport)>,
    pub eval: MetricsReport,
    pub out_dir: PathBuf,
    pub final_ckpt: PathBuf,
    pub plateaued: bool,
}

/// Mean of the trailing `window` totals of a curve.
pub fn trailing_mean_total(curve: &[(u64, LossReport)], window: usize) -> f64 {
    if curve.is_empty() {
        return f64::NAN;
    }
    let k = window.min(curve.len()).max(1);
    curve[curve.len() - k..].iter().map(|(_, r)| r.total).sum::<f64>() / k as f64
}

/// Convergence heuristic: relative improvement of the trailing-20% window
/// (first tenth vs. last tenth of the curve) below `rel_threshold`.
pub fn plateaued(curve: &[(u64, LossReport)], rel_threshold: f64) -> bool {
    let n = curve.len();
    let w = n / 5;
    if w < 4 {
        return false;
    }
    let half = w / 2;
    let first: f64 =
        curve[n - w..n - w + half].iter().map(|(_, r)| r.total).sum::<f64>() / half as f64;
    let last: f64 = curve[n - half..].iter().map(|(_, r)| r.total).sum::<f64>() / half as f64;
    (first - last) / first.abs().max(1e-12) < rel_threshold
}

fn curve_csv(curve: &[(u64, LossReport)]) -> String {
    let mut out = String::from("step,rec,per,exc,adv_g,adv_d,total\n");
    for (step, r) in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            step, r.rec, r.per, r.exc, r.adv_g, r.adv_d, r.total
        ));
    }
    out
}

fn parse_curve_csv(text: &str) -> Result<Vec<(u64, LossReport)>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != "step,rec,per,exc,adv_g,adv_d,total" {
                return Err(Error::data("<curve>", format!("unexpected header {line:?}")));
            }
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 7 {
            return Err(Error::data("<curve>", format!("bad row {line:?}")));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::data("<curve>", format!("bad number {s:?}")))
        };
        rows.push((
            p[0].parse::<u64>().map_err(|_| Error::data("<curve>", "bad step"))?,
            LossReport {
                rec: f(p[1])?,
                per: f(p[2])?,
                exc: f(p[3])?,
                adv_g: f(p[4])?,
                adv_d: f(p[5])?,
                total: f(p[6])?,
            },
        ));
    }
    Ok(rows)
}

fn batch_leaves(
    tape: &Tape<f32>,
    samples: &[MixtureSample],
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (samples[0].t.h, samples[0].t.w);
    let n = samples.len();
    let mut iv = Vec::with_capacity(n * 3 * h * w);
    let mut tv = Vec::with_capacity(n * 3 * h * w);
    let mut rv = Vec::with_capacity(n * 3 * h * w);
    for s in samples {
        if s.t.h != h || s.t.w != w {
            return Err(Error::Contract("batch members disagree on shape".into()));
        }
        iv.extend_from_slice(&s.i.data);
        tv.extend_from_slice(&s.t.data);
        rv.extend_from_slice(&s.r.data);
    }
    let shape = crate::shape::Shape::nchw(n, 3, h, w);
    Ok((
        tape.leaf(shape.clone(), iv, false)?,
        tape.leaf(shape.clone(), tv, false)?,
        tape.leaf(shape, rv, false)?,
    ))
}

fn draw_batch(ds: &Dataset, cfg: &RunConfig, step: u64) -> Result<Vec<MixtureSample>> {
    let mut r = rng::stream(cfg.seed, "train:batch", step);
    (0..cfg.batch_size).map(|_| ds.get(r.gen_range(0..ds.len()))).collect()
}

/// Extract batch member `b` of a (N,3,H,W) tensor as an image, clamped to
/// [0,1] (network outputs are unclamped; metrics read displayable values).
fn tensor_to_image(t: &Tensor<f32>, b: usize) -> Result<Image> {
    let (_, c, h, w) = t.shape().as_nchw("tensor_to_image")?;
    if c != 3 {
        return Err(Error::dim("tensor_to_image", format!("expected 3 channels, got {c}")));
    }
    let v = t.value();
    let plane = 3 * h * w;
    let data = v[b * plane..(b + 1) * plane].iter().map(|x| x.clamp(0.0, 1.0)).collect();
    Ok(Image { h, w, data })
}

/// Evaluate PSNR/SSIM of predictions against ground truth over a dataset.
pub fn evaluate<F>(test: &Dataset, forward: F) -> Result<MetricsReport>
where
    F: Fn(&Tape<f32>, &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)>,
{
    let mut report = MetricsReport::default();
    for idx in 0..test.len() {
        let s = test.get(idx)?;
        let tape = Tape::<f32>::new();
        let input =
            tape.leaf(crate::shape::Shape::nchw(1, 3, s.i.h, s.i.w), s.i.data.clone(), false)?;
        let (that, rhat) = forward(&tape, &input)?;
        let t_img = tensor_to_image(&that, 0)?;
        let r_img = tensor_to_image(&rhat, 0)?;
        report.push(ImageMetrics {
            id: idx,
            psnr_t: psnr(&t_img, &s.t, 1.0)?,
            ssim_t: ssim(&t_img, &s.t)?,
            psnr_r: psnr(&r_img, &s.r, 1.0)?,
            ssim_r: ssim(&r_img, &s.r)?,
        });
    }
    Ok(report)
}

struct LossStack {
    fx_store: ParamStore,
    fx: FeatureExtractor,
    disc_store: Option<ParamStore>,
    disc: Option<Discriminator>,
}

impl LossStack {
    fn build(cfg: &RunConfig) -> Result<LossStack> {
        let mut fx_store = ParamStore::new(cfg.seed ^ 0xFEA7_FEA7);
        let fx = FeatureExtractor::register(&mut fx_store, "fx", 3)?;
        let (disc_store, disc) = if cfg.adversarial {
            let mut ds = ParamStore::new(cfg.seed ^ 0x0D15_C0D1);
            let d = Discriminator::register(&mut ds, "disc")?;
            (Some(ds), Some(d))
        } else {
            (None, None)
        };
        Ok(LossStack { fx_store, fx, disc_store, disc })
    }
}

fn build_net(store: &mut ParamStore, cfg: &RunConfig, stage: u8) -> Result<DualStreamNet> {
    let ucfg = cfg.unet_config(stage);
    if cfg.variant.ushaped() {
        build_ushaped(store, "net", &ucfg)
    } else {
        build_plain(store, "net", &ucfg)
    }
}

/// Train a fresh single-stage network.
pub fn train_stage(cfg: &RunConfig) -> Result<TrainedStage> {
    let mut store = ParamStore::new(cfg.seed);
    let net = build_net(&mut store, cfg, 1)?;
    train_loop(cfg, 1, store, net, None, None)
}

/// Resume a single-stage run from an intermediate checkpoint.
pub fn train_stage_resume(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<TrainedStage> {
    let mut store = ParamStore::new(cfg.seed);
    let net = build_net(&mut store, cfg, 1)?;
    train_loop(cfg, 1, store, net, None, Some(ckpt))
}

/// Train stage 2 of a cascade on top of a frozen stage 1. Errors unless
/// every stage-1 parameter is frozen.
pub fn train_cascade_stage(
    stage1_store: &ParamStore,
    stage1_net: &DualStreamNet,
    cfg: &RunConfig,
) -> Result<TrainedStage> {
    if let Some((_, e)) = stage1_store.iter().find(|(_, e)| e.trainable) {
        return Err(Error::Contract(format!(
            "stage-1 parameters must be frozen during stage-2 training; {:?} is trainable",
            e.name
        )));
    }
    let mut store = ParamStore::new(cfg.seed);
    let net = build_net(&mut store, cfg, 2)?;
    let adopted = store.adopt_matching(stage1_store);
    if adopted.is_empty() {
        return Err(Error::Contract(
            "stage-2 adopted no stage-1 parameters; prefixes disagree".into(),
        ));
    }
    train_loop(cfg, 2, store, net, Some((stage1_store, stage1_net)), None)
}

fn train_loop(
    cfg: &RunConfig,
    stage: u8,
    mut store: ParamStore,
    net: DualStreamNet,
    cascade: Option<(&ParamStore, &DualStreamNet)>,
    resume: Option<&Checkpoint>,
) -> Result<TrainedStage> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let LossStack { fx_store, fx, mut disc_store, disc } = LossStack::build(cfg)?;
    let mut adam = AdamState::new(&store);
    let mut disc_adam = disc_store.as_ref().map(AdamState::new);
    let echo = cfg.echo(stage);
    let plan = cfg.stage_plan();

    let mut curve: Vec<(u64, LossReport)> = Vec::new();
    let mut start: u64 = 0;
    if let Some(ck) = resume {
        if ck.config_echo != echo {
            let diff: Vec<String> = ck
                .config_echo
                .lines()
                .zip(echo.lines())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("checkpoint: {a} | run: {b}"))
                .collect();
            return Err(Error::Checkpoint(format!(
                "config mismatch on resume:\n{}",
                diff.join("\n")
            )));
        }
        ck.restore_into(&mut store)?;
        if let Some(snap) = &ck.adam {
            adam = AdamState::from_snapshot(snap, &store)?;
        }
        start = ck.iteration;
        // keep the already-logged prefix of the curve
        let curve_path = cfg.out_dir.join("curve.csv");
        if curve_path.is_file() {
            curve = parse_curve_csv(&fs::read_to_string(&curve_path)?)?;
            curve.retain(|(s, _)| *s < start);
        }
    }

    let train_ds = Dataset::open(cfg.data.clone())?;
    if train_ds.is_empty() && cfg.iterations > start {
        return Err(Error::Config("training dataset is empty".into()));
    }

    // stage-1 byte snapshot for the end-of-run freeze audit
    let frozen_before: Option<Vec<Vec<f32>>> =
        cascade.map(|(s1, _)| s1.iter().map(|(_, e)| e.data.clone()).collect());

    for step in start..cfg.iterations {
        let samples = draw_batch(&train_ds, cfg, step)?;
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape)?;
        let fx_bound = fx_store.bind(&tape)?;
        let (i_t, t_t, r_t) = batch_leaves(&tape, &samples)?;

        let (that, rhat) = match cascade {
            None => net.forward(&bound, &i_t)?,
            Some((s1_store, s1_net)) => {
                let b1 = s1_store.bind(&tape)?;
                let out = crate::net::cascade_forward(s1_net, &b1, &net, &bound, &i_t, &plan)?;
                // freeze audit: frozen leaves must stay off the grad path
                for (id, e) in s1_store.iter() {
                    if b1.grad_f32(id).is_some() {
                        return Err(Error::Contract(format!(
                            "frozen stage-1 parameter {:?} appeared on the gradient path",
                            e.name
                        )));
                    }
                }
                out
            }
        };

        let ins = LossInputs { that: &that, rhat: &rhat, t: &t_t, r: &r_t, i: &i_t };
        let adv_pair = match (&disc, &disc_store) {
            (Some(d), Some(ds)) => Some((d, ds.bind(&tape)?)),
            _ => None,
        };
        let out = match &adv_pair {
            Some((d, db)) => total_loss(&ins, &fx, &fx_bound, Some((d, db)), &cfg.weights)?,
            None => total_loss(&ins, &fx, &fx_bound, None, &cfg.weights)?,
        };
        if !out.report.total.is_finite() {
            return Err(Error::numeric(
                "train_stage",
                format!(
                    "non-finite loss {} at step {step}; batch stream seed={} purpose=\"train:batch\" index={step}",
                    out.report.total, cfg.seed
                ),
            ));
        }
        tape.backward(&out.total)?;
        let mut grads = collect_grads(&store, &bound);
        if let Some(c) = cfg.grad_clip {
            clip_grads(&mut grads, c);
        }
        adam_step(&mut store, &mut adam, &grads, cfg.lr.lr_at(step, cfg.iterations))?;

        // Discriminator update on a fresh graph where the prediction is
        // plain data: backpropagating the D loss through the generator's
        // tape would accumulate a second set of gradients into it.
        if let (Some(d), Some(ds), Some(da)) = (&disc, &mut disc_store, &mut disc_adam) {
            let tape2 = Tape::<f32>::new();
            let db2 = ds.bind(&tape2)?;
            let shape = that.shape().clone();
            let t2 = tape2.leaf(shape.clone(), t_t.value(), false)?;
            let that2 = tape2.leaf(shape, that.value(), false)?;
            let (_, d_loss) = adversarial_losses(&t2, &that2, d, &db2)?;
            tape2.backward(&d_loss)?;
            let d_grads = collect_grads(ds, &db2);
            adam_step(ds, da, &d_grads, cfg.lr.lr_at(step, cfg.iterations))?;
        }

        curve.push((step, out.report));

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let ck = Checkpoint::from_store(&store, &echo, step + 1, Some(adam.snapshot()))?;
            checkpoint::write_checkpoint(
                &cfg.out_dir.join(format!("checkpoint-{:06}.ckpt", step + 1)),
                &ck,
            )?;
        }
    }

    // end-of-run freeze audit: stage-1 bytes unchanged
    if let (Some((s1, _)), Some(before)) = (cascade, &frozen_before) {
        for ((_, e), b) in s1.iter().zip(before) {
            if e.data.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Err(Error::Contract(format!(
                    "frozen stage-1 parameter {:?} changed during stage-2 training",
                    e.name
                )));
            }
        }
    }

    fs::write(cfg.out_dir.join("curve.csv"), curve_csv(&curve))?;
    let final_ckpt = cfg.out_dir.join("final.ckpt");
    let ck = Checkpoint::from_store(&store, &echo, cfg.iterations, Some(adam.snapshot()))?;
    checkpoint::write_checkpoint(&final_ckpt, &ck)?;

    let test_ds = Dataset::open(cfg.test_data.clone())?;
    let eval = match cascade {
        None => evaluate(&test_ds, |tape, input| {
            let b = store.bind(tape)?;
            net.forward(&b, input)
        })?,
        Some((s1_store, s1_net)) => evaluate(&test_ds, |tape, input| {
            let b1 = s1_store.bind(tape)?;
            let b2 = store.bind(tape)?;
            crate::net::cascade_forward(s1_net, &b1, &net, &b2, input, &plan)
        })?,
    };
    fs::write(cfg.out_dir.join("eval.csv"), eval.to_csv())?;

    let plateau = plateaued(&curve, 0.01);
    Ok(TrainedStage {
        store,
        net,
        curve,
        eval,
        out_dir: cfg.out_dir.clone(),
        final_ckpt,
        plateaued: plateau,
    })
}

/// Stage-1 training to budget, then stage-2 on the frozen result.
pub struct TwoStage {
    pub stage1: TrainedStage,
    pub stage2: TrainedStage,
}

pub fn train_two_stage(cfg: &RunConfig) -> Result<TwoStage> {
    let mut c1 = cfg.clone();
    c1.out_dir = cfg.out_dir.join("stage1");
    let stage1 = train_stage(&c1)?;

    let mut frozen = stage1.store.clone();
    frozen.set_trainable_by_prefix("", false);
    let mut c2 = cfg.clone();
    c2.out_dir = cfg.out_dir.join("stage2");
    let stage2 = train_cascade_stage(&frozen, &stage1.net, &c2)?;
    Ok(TwoStage { stage1, stage2 })
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

/// The Table-5 analog comparison set.
pub const ABLATION_VARIANTS: [Variant; 6] = [
    Variant::WoFi,
    Variant::ReluOnly,
    Variant::Ucs,
    Variant::Uct,
    Variant::Uas,
    Variant::Uat,
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub psnr_t: f64,
    pub ssim_t: f64,
    pub psnr_r: f64,
    pub ssim_r: f64,
    /// Trailing-50-step mean of the training total.
    pub final_loss: f64,
    pub eval_csv: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("variant,seed,psnr_T,ssim_T,psnr_R,ssim_R,final_train_loss\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant.code(),
                r.seed,
                r.psnr_t,
                r.ssim_t,
                r.psnr_r,
                r.ssim_r,
                r.final_loss
            ));
        }
        out
    }

    /// Per-variant means over seeds: (psnr_t, ssim_t, final_loss).
    pub fn variant_means(&self) -> BTreeMap<&'static str, (f64, f64, f64)> {
        let mut acc: BTreeMap<&'static str, (f64, f64, f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.variant.code()).or_insert((0.0, 0.0, 0.0, 0));
            e.0 += r.psnr_t;
            e.1 += r.ssim_t;
            e.2 += r.final_loss;
            e.3 += 1;
        }
        acc.into_iter()
            .map(|(k, (p, s, l, n))| (k, (p / n as f64, s / n as f64, l / n as f64)))
            .collect()
    }

    /// Audit: every row's metric means re-derive exactly from its
    /// per-image eval CSV.
    pub fn audit_resums(&self) -> Result<()> {
        for r in &self.rows {
            let rep = MetricsReport::from_csv(&fs::read_to_string(&r.eval_csv)?)?;
            let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
            if !(same(rep.mean_psnr_t(), r.psnr_t)
                && same(rep.mean_ssim_t(), r.ssim_t)
                && same(rep.mean_psnr_r(), r.psnr_r)
                && same(rep.mean_ssim_r(), r.ssim_r))
            {
                return Err(Error::Contract(format!(
                    "table row {} seed {} does not re-sum from {}",
                    r.variant.code(),
                    r.seed,
                    r.eval_csv.display()
                )));
            }
        }
        Ok(())
    }
}

fn stage_row(variant: Variant, seed: u64, stage: &TrainedStage) -> AblationRow {
    AblationRow {
        variant,
        seed,
        psnr_t: stage.eval.mean_psnr_t(),
        ssim_t: stage.eval.mean_ssim_t(),
        psnr_r: stage.eval.mean_psnr_r(),
        ssim_r: stage.eval.mean_ssim_r(),
        final_loss: trailing_mean_total(&stage.curve, 50),
        eval_csv: stage.out_dir.join("eval.csv"),
    }
}

/// Run the six-variant comparison over the given seeds, sharing the
/// single-stage runs with their two-stage extensions (UCT extends UCS,
/// UAT extends UAS), and write `ablation.csv` under the base out_dir.
pub fn run_ablation_suite(base: &RunConfig, seeds: &[u64]) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &seed in seeds {
        let cfg_for = |variant: Variant| -> RunConfig {
            let mut c = base.clone();
            c.variant = variant;
            c.seed = seed;
            c.data.seed = seed;
            c.test_data.seed = seed ^ 0x7E57_7E57;
            c.out_dir = base.out_dir.join(variant.slug()).join(format!("seed-{seed}"));
            c
        };
        let mut singles: BTreeMap<&'static str, TrainedStage> = BTreeMap::new();
        for variant in [Variant::WoFi, Variant::ReluOnly, Variant::Ucs, Variant::Uas] {
            let stage = train_stage(&cfg_for(variant))?;
            table.rows.push(stage_row(variant, seed, &stage));
            singles.insert(variant.code(), stage);
        }
        for (two, one) in [(Variant::Uct, Variant::Ucs), (Variant::Uat, Variant::Uas)] {
            let parent = &singles[one.code()];
            let mut frozen = parent.store.clone();
            frozen.set_trainable_by_prefix("", false);
            let stage2 = train_cascade_stage(&frozen, &parent.net, &cfg_for(two))?;
            table.rows.push(stage_row(two, seed, &stage2));
        }
    }
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("ablation.csv"), table.to_csv())?;
    Ok(table)
}
