//! TOML configuration mirroring the library's run/dataset/loss structs.
//!
//! Every key is optional and has a documented default; unknown keys are
//! rejected. Loading resolves the few cross-field defaults (dataset seeds
//! follow the run seed), so parse → serialize → parse is idempotent: the
//! serialized form is already fully resolved.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use ytmt_core::data::{DatasetSpec, MixMode, Source};
use ytmt_core::error::{Error, Result};
use ytmt_core::loss::LossWeights;
use ytmt_core::net::AugmenterSpec;
use ytmt_core::train::{LrSchedule, RunConfig, Variant};

/// Derivation constant for a test-split seed left unset: `data.seed ^ this`.
pub const TEST_SEED_SALT: u64 = 0x7E57_7E57;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub test_data: TestDataSection,
    pub weights: WeightsSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Model variant: UCS, UCT, UAS, UAT, plain-CS, plain-AS, w/o-FI,
    /// ReLU-only. Default: UCS.
    pub variant: String,
    /// Master seed for parameter init and batch order. Default: 0.
    pub seed: u64,
    /// Training iterations. Default: 2000.
    pub iterations: u64,
    /// Samples per training batch. Default: 8.
    pub batch_size: usize,
    /// Train the relativistic discriminator alongside. Default: false.
    pub adversarial: bool,
    /// Output directory for curves/checkpoints/evals. Default: "out".
    /// Relative paths resolve under $YTMT_OUT_ROOT when that is set.
    pub out_dir: PathBuf,
    /// Encoder/decoder levels of the U-shaped backbone. Default: 3.
    pub depth: usize,
    /// Stem width; channel counts double per encoder level. Default: 32.
    pub base_channels: usize,
    /// Block count of the plain backbone. Default: 6.
    pub plain_blocks: usize,
    /// Initial learning rate. Default: 1e-4.
    pub lr: f64,
    /// Fractions of the budget at which the rate halves.
    /// Default: [0.5, 0.67, 0.83].
    pub lr_milestones: Vec<f64>,
    /// Write an intermediate checkpoint every N steps; 0 = final only.
    /// Default: 0.
    pub checkpoint_every: u64,
    /// Global-norm gradient clip; absent = off. Default: absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Input augmenter: "raw" or "pyramid". Default: "raw".
    pub augmenter: String,
    /// Pyramid levels (augmenter = "pyramid"). Default: 3.
    pub augmenter_levels: usize,
    /// Pyramid features per level (augmenter = "pyramid"). Default: 4.
    pub augmenter_features: usize,
    /// Whether cascade stage 2 sees the mixture alongside (T̂₁, R̂₁).
    /// Default: false.
    pub stage2_includes_input: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            variant: "UCS".into(),
            seed: 0,
            iterations: 2000,
            batch_size: 8,
            adversarial: false,
            out_dir: PathBuf::from("out"),
            depth: 3,
            base_channels: 32,
            plain_blocks: 6,
            lr: 1e-4,
            lr_milestones: vec![0.5, 0.67, 0.83],
            checkpoint_every: 0,
            grad_clip: None,
            augmenter: "raw".into(),
            augmenter_levels: 3,
            augmenter_features: 4,
            stage2_includes_input: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "procedural" or a directory path holding `T/`, `R/`[, `I/`].
    /// Default: "procedural".
    pub source: String,
    /// Square crop edge. Default: 32.
    pub crop: usize,
    /// Sample count (procedural sources). Default: 2000.
    pub count: usize,
    /// Mixture seed; 0 here means "follow run.seed". Default: follow.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Mixture mode: "exact" or "realistic". Default: "exact".
    pub mode: String,
    /// Reflection weight α range [lo, hi], 0 ≤ lo ≤ hi < 1.
    /// Default: [0.35, 0.65].
    pub alpha: [f64; 2],
    /// Reflection blur σ range [lo, hi]. Default: [0.5, 2.0].
    pub sigma: [f64; 2],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "procedural".into(),
            crop: 32,
            count: 2000,
            seed: None,
            mode: "exact".into(),
            alpha: [0.35, 0.65],
            sigma: [0.5, 2.0],
        }
    }
}

/// Same shape as [`DataSection`] with test-split defaults (count 200,
/// seed derived from the train seed).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TestDataSection {
    /// Default: follow data.source.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Default: follow data.crop.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<usize>,
    /// Default: 200.
    pub count: usize,
    /// Default: data.seed ^ 0x7E57_7E57.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Default: follow data.mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Default: follow data.alpha.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<[f64; 2]>,
    /// Default: follow data.sigma.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<[f64; 2]>,
}

impl Default for TestDataSection {
    fn default() -> Self {
        TestDataSection {
            source: None,
            crop: None,
            count: 200,
            seed: None,
            mode: None,
            alpha: None,
            sigma: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    /// T̂ pixel-term weight. Default: 0.3.
    pub a: f64,
    /// R̂ pixel-term weight. Default: 0.9.
    pub b: f64,
    /// T̂ gradient-term weight. Default: 0.6.
    pub c: f64,
    /// Additivity residual weight. Default: 0.2.
    pub d: f64,
    /// Perceptual-loss coefficient λ₁. Default: 0.1.
    pub lambda_per: f64,
    /// Exclusion-loss coefficient λ₂. Default: 1.0.
    pub lambda_exc: f64,
    /// Adversarial-loss coefficient λ₃. Default: 0.01.
    pub lambda_adv: f64,
    /// Per-tap perceptual weights. Default: [0.38, 0.21, 0.27, 0.18, 6.67].
    pub omega: [f64; 5],
    /// Exclusion pyramid depth N. Default: 3.
    pub exclusion_levels: usize,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = LossWeights::default();
        WeightsSection {
            a: w.a,
            b: w.b,
            c: w.c,
            d: w.d,
            lambda_per: w.lambda_per,
            lambda_exc: w.lambda_exc,
            lambda_adv: w.lambda_adv,
            omega: w.omega,
            exclusion_levels: w.exclusion_levels,
        }
    }
}

fn parse_source(s: &str) -> Source {
    if s.eq_ignore_ascii_case("procedural") {
        Source::Procedural
    } else {
        Source::Directory(PathBuf::from(s))
    }
}

fn parse_mode(s: &str) -> Result<MixMode> {
    match s.to_ascii_lowercase().as_str() {
        "exact" => Ok(MixMode::Exact),
        "realistic" => Ok(MixMode::Realistic),
        other => Err(Error::Config(format!(
            "unknown mixture mode {other:?}; expected \"exact\" or \"realistic\""
        ))),
    }
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<FileConfig> {
        let cfg: FileConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Serialize with every cross-field default resolved.
    pub fn to_toml(&self) -> String {
        let mut resolved = self.clone();
        resolved.resolve();
        toml::to_string(&resolved).expect("config serialization cannot fail")
    }

    /// Fill the follow-the-run-seed defaults in place.
    pub fn resolve(&mut self) {
        if self.data.seed.is_none() {
            self.data.seed = Some(self.run.seed);
        }
        let data_seed = self.data.seed.unwrap();
        if self.test_data.seed.is_none() {
            self.test_data.seed = Some(data_seed ^ TEST_SEED_SALT);
        }
        if self.test_data.source.is_none() {
            self.test_data.source = Some(self.data.source.clone());
        }
        if self.test_data.crop.is_none() {
            self.test_data.crop = Some(self.data.crop);
        }
        if self.test_data.mode.is_none() {
            self.test_data.mode = Some(self.data.mode.clone());
        }
        if self.test_data.alpha.is_none() {
            self.test_data.alpha = Some(self.data.alpha);
        }
        if self.test_data.sigma.is_none() {
            self.test_data.sigma = Some(self.data.sigma);
        }
    }

    fn augmenter_spec(&self) -> Result<AugmenterSpec> {
        match self.run.augmenter.to_ascii_lowercase().as_str() {
            "raw" => Ok(AugmenterSpec::RawIdentity),
            "pyramid" => Ok(AugmenterSpec::FixedRandomPyramid {
                levels: self.run.augmenter_levels,
                features_per_level: self.run.augmenter_features,
            }),
            other => Err(Error::Config(format!(
                "unknown augmenter {other:?}; expected \"raw\" or \"pyramid\""
            ))),
        }
    }

    /// Resolve into the library's run configuration, applying the output
    /// root override when `out_root` is set.
    pub fn to_run_config(&self, out_root: Option<&std::path::Path>) -> Result<RunConfig> {
        let mut resolved = self.clone();
        resolved.resolve();
        let variant = Variant::parse(&resolved.run.variant)?;
        let d = &resolved.data;
        let data = DatasetSpec {
            source: parse_source(&d.source),
            crop: d.crop,
            count: d.count,
            seed: d.seed.unwrap(),
            mode: parse_mode(&d.mode)?,
            alpha: (d.alpha[0] as f32, d.alpha[1] as f32),
            sigma: (d.sigma[0] as f32, d.sigma[1] as f32),
        };
        let t = &resolved.test_data;
        let test_data = DatasetSpec {
            source: parse_source(t.source.as_ref().unwrap()),
            crop: t.crop.unwrap(),
            count: t.count,
            seed: t.seed.unwrap(),
            mode: parse_mode(t.mode.as_ref().unwrap())?,
            alpha: (t.alpha.unwrap()[0] as f32, t.alpha.unwrap()[1] as f32),
            sigma: (t.sigma.unwrap()[0] as f32, t.sigma.unwrap()[1] as f32),
        };
        let w = &resolved.weights;
        let weights = LossWeights {
            a: w.a,
            b: w.b,
            c: w.c,
            d: w.d,
            lambda_per: w.lambda_per,
            lambda_exc: w.lambda_exc,
            lambda_adv: w.lambda_adv,
            omega: w.omega,
            exclusion_levels: w.exclusion_levels,
        };
        let out_dir = apply_out_root(&resolved.run.out_dir, out_root);
        let cfg = RunConfig {
            variant,
            data,
            test_data,
            batch_size: resolved.run.batch_size,
            iterations: resolved.run.iterations,
            seed: resolved.run.seed,
            adversarial: resolved.run.adversarial,
            out_dir,
            depth: resolved.run.depth,
            base_channels: resolved.run.base_channels,
            plain_blocks: resolved.run.plain_blocks,
            augmenter: resolved.augmenter_spec()?,
            lr: LrSchedule {
                initial: resolved.run.lr,
                milestones: resolved.run.lr_milestones.clone(),
            },
            checkpoint_every: resolved.run.checkpoint_every,
            grad_clip: resolved.run.grad_clip,
            weights,
            stage2_includes_input: resolved.run.stage2_includes_input,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolve a possibly-relative path under the output root (absolute paths
/// stay put; no root means no change).
pub fn apply_out_root(path: &std::path::Path, out_root: Option<&std::path::Path>) -> PathBuf {
    match out_root {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_a_valid_run_config() {
        let cfg = FileConfig::default().to_run_config(None).unwrap();
        assert_eq!(cfg.iterations, 2000);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.data.count, 2000);
        assert_eq!(cfg.test_data.count, 200);
        assert_eq!(cfg.test_data.seed, cfg.data.seed ^ TEST_SEED_SALT);
        assert_eq!(cfg.lr.initial, 1e-4);
    }

    #[test]
    fn parse_serialize_parse_is_idempotent() {
        let first = FileConfig::parse("[run]\nseed = 7\nvariant = \"UAS\"\n").unwrap();
        let text1 = first.to_toml();
        let second = FileConfig::parse(&text1).unwrap();
        let text2 = second.to_toml();
        assert_eq!(text1, text2);
        assert_eq!(
            first.to_run_config(None).unwrap().echo(1),
            second.to_run_config(None).unwrap().echo(1)
        );
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_named() {
        let err = FileConfig::parse("[run]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = FileConfig::parse("[optimizer]\nbeta = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("optimizer"), "{err}");
    }

    #[test]
    fn bad_enumerations_are_usage_errors() {
        let cfg = FileConfig::parse("[run]\nvariant = \"resnet\"\n").unwrap();
        assert!(matches!(cfg.to_run_config(None), Err(Error::Config(_))));
        let cfg = FileConfig::parse("[data]\nmode = \"additive\"\n").unwrap();
        assert!(matches!(cfg.to_run_config(None), Err(Error::Config(_))));
        let cfg = FileConfig::parse("[run]\naugmenter = \"vgg\"\n").unwrap();
        assert!(matches!(cfg.to_run_config(None), Err(Error::Config(_))));
    }

    #[test]
    fn test_split_follows_data_section_unless_overridden() {
        let cfg = FileConfig::parse(
            "[data]\nmode = \"realistic\"\ncrop = 24\n[test_data]\ncount = 11\n",
        )
        .unwrap();
        let rc = cfg.to_run_config(None).unwrap();
        assert_eq!(rc.test_data.mode, MixMode::Realistic);
        assert_eq!(rc.test_data.crop, 24);
        assert_eq!(rc.test_data.count, 11);
    }

    #[test]
    fn out_root_applies_to_relative_paths_only() {
        let root = std::path::Path::new("/tmp/ytmt-root");
        assert_eq!(
            apply_out_root(std::path::Path::new("runs/a"), Some(root)),
            PathBuf::from("/tmp/ytmt-root/runs/a")
        );
        assert_eq!(
            apply_out_root(std::path::Path::new("/abs/b"), Some(root)),
            PathBuf::from("/abs/b")
        );
        assert_eq!(apply_out_root(std::path::Path::new("runs/a"), None), PathBuf::from("runs/a"));
    }

    #[test]
    fn directory_source_round_trips() {
        let cfg = FileConfig::parse("[data]\nsource = \"/data/pairs\"\n").unwrap();
        let rc = cfg.to_run_config(None).unwrap();
        assert_eq!(rc.data.source, Source::Directory(PathBuf::from("/data/pairs")));
        // and the serialized form preserves it
        let again = FileConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again.data.source, "/data/pairs");
    }
}
