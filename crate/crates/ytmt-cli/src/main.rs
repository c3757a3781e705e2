//! `ytmt` — interactive dual-stream decomposition of additive mixtures.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numeric failure. Relative output paths resolve under `$YTMT_OUT_ROOT`
//! when that variable is set.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ytmt_core::error::{Error, Result};

use config::{apply_out_root, FileConfig};

#[derive(Parser, Debug)]
#[command(
    name = "ytmt",
    about = "Dual-stream additive image decomposition: synthesis, training, separation, evaluation",
    version
)]
struct Cli {
    /// TOML configuration file; omitted keys take documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

/// Configuration overrides; any flag given here wins over the config file.
#[derive(Args, Debug, Default, Clone)]
struct Overrides {
    /// Master seed (parameter init and batch order).
    #[arg(long)]
    seed: Option<u64>,
    /// Training iterations.
    #[arg(long)]
    iterations: Option<u64>,
    /// Samples per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Model variant: UCS, UCT, UAS, UAT, plain-CS, plain-AS, w/o-FI, ReLU-only.
    #[arg(long)]
    variant: Option<String>,
    /// Run output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Stem width of the backbone.
    #[arg(long)]
    base_channels: Option<usize>,
    /// Encoder/decoder depth of the U-shaped backbone.
    #[arg(long)]
    depth: Option<usize>,
    /// Block count of the plain backbone.
    #[arg(long)]
    plain_blocks: Option<usize>,
    /// Train the adversarial discriminator (true/false).
    #[arg(long)]
    adversarial: Option<bool>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Intermediate checkpoint cadence in steps (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Global-norm gradient clip.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Training data source: "procedural" or a directory.
    #[arg(long)]
    data_source: Option<String>,
    /// Training sample count.
    #[arg(long)]
    data_count: Option<usize>,
    /// Square crop edge.
    #[arg(long)]
    data_crop: Option<usize>,
    /// Mixture mode: "exact" or "realistic".
    #[arg(long)]
    data_mode: Option<String>,
    /// Held-out sample count.
    #[arg(long)]
    test_count: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut FileConfig) {
        let r = &mut cfg.run;
        if let Some(v) = self.seed {
            r.seed = v;
        }
        if let Some(v) = self.iterations {
            r.iterations = v;
        }
        if let Some(v) = self.batch_size {
            r.batch_size = v;
        }
        if let Some(v) = &self.variant {
            r.variant = v.clone();
        }
        if let Some(v) = &self.out_dir {
            r.out_dir = v.clone();
        }
        if let Some(v) = self.base_channels {
            r.base_channels = v;
        }
        if let Some(v) = self.depth {
            r.depth = v;
        }
        if let Some(v) = self.plain_blocks {
            r.plain_blocks = v;
        }
        if let Some(v) = self.adversarial {
            r.adversarial = v;
        }
        if let Some(v) = self.lr {
            r.lr = v;
        }
        if let Some(v) = self.checkpoint_every {
            r.checkpoint_every = v;
        }
        if let Some(v) = self.grad_clip {
            r.grad_clip = Some(v);
        }
        if let Some(v) = &self.data_source {
            cfg.data.source = v.clone();
        }
        if let Some(v) = self.data_count {
            cfg.data.count = v;
        }
        if let Some(v) = self.data_crop {
            cfg.data.crop = v;
        }
        if let Some(v) = &self.data_mode {
            cfg.data.mode = v.clone();
        }
        if let Some(v) = self.test_count {
            cfg.test_data.count = v;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a paired mixture dataset to root/{T,R[,I]}/NNNN.ppm.
    GenData {
        #[command(flatten)]
        overrides: Overrides,
        /// Dataset root directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a variant; writes curve.csv, checkpoints, and eval.csv.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Build the model, print its parameter count, and exit.
        #[arg(long)]
        dry_run: bool,
        /// Resume from an intermediate checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Apply a trained checkpoint to a mixture image (or directory of them).
    Separate {
        #[command(flatten)]
        overrides: Overrides,
        /// Trained checkpoint (stage 1, or stage 2 with --stage1).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stage-1 checkpoint when --checkpoint holds a cascade stage 2.
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Input .ppm file or directory of .ppm files.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for {name}.T/.R/.residual.ppm triples.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split; writes per-image CSV.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Trained checkpoint (stage 1, or stage 2 with --stage1).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stage-1 checkpoint when --checkpoint holds a cascade stage 2.
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Destination CSV (default: <out_dir>/eval.csv).
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Run the finite-difference verification suite over every op and loss.
    Gradcheck {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the multi-variant comparison suite and emit the results table.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated seeds for the suite.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<FileConfig> {
    let mut cfg = match path {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.resolve();
    Ok(cfg)
}

fn out_root() -> Option<PathBuf> {
    std::env::var_os("YTMT_OUT_ROOT").map(PathBuf::from)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| Error::Config(format!("bad seed {s:?} in --seeds"))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let root = out_root();
    let root = root.as_deref();
    match &cli.command {
        Command::GenData { overrides, out } => {
            let cfg = load_config(cli.config.as_deref(), overrides)?;
            let rc = cfg.to_run_config(root)?;
            commands::cmd_gen_data(&cfg, &rc, &apply_out_root(out, root))
        }
        Command::Train { overrides, dry_run, resume } => {
            let cfg = load_config(cli.config.as_deref(), overrides)?;
            let rc = cfg.to_run_config(root)?;
            commands::cmd_train(&cfg, &rc, *dry_run, resume.as_deref())
        }
        Command::Separate { overrides, checkpoint, stage1, input, out } => {
            let cfg = load_config(cli.config.as_deref(), overrides)?;
            let rc = cfg.to_run_config(root)?;
            commands::cmd_separate(
                &cfg,
                &rc,
                checkpoint,
                stage1.as_deref(),
                input,
                &apply_out_root(out, root),
            )
        }
        Command::Eval { overrides, checkpoint, stage1, out_csv } => {
            let cfg = load_config(cli.config.as_deref(), overrides)?;
            let rc = cfg.to_run_config(root)?;
            let csv = match out_csv {
                Some(p) => apply_out_root(p, root),
                None => rc.out_dir.join("eval.csv"),
            };
            commands::cmd_eval(&cfg, &rc, checkpoint, stage1.as_deref(), &csv)
        }
        Command::Gradcheck { overrides } => {
            let cfg = load_config(cli.config.as_deref(), overrides)?;
            commands::cmd_gradcheck(&cfg)
        }
        Command::Ablate { overrides, seeds } => {
            let cfg = load_config(cli.config.as_deref(), overrides)?;
            let rc = cfg.to_run_config(root)?;
            commands::cmd_ablate(&cfg, &rc, &parse_seeds(seeds)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 for usage by default; the contract reserves 2
            // for data errors and uses 1 for usage
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code(&err) as u8)
        }
    }
}
