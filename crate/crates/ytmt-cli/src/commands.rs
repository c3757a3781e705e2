//! Subcommand implementations. Each returns a typed library error; the
//! binary maps those onto the exit-code contract (0 success, 1 usage,
//! 2 data, 3 numeric).

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use ytmt_core::checkpoint::{read_checkpoint, Checkpoint};
use ytmt_core::data::{read_ppm, write_ppm, write_sample, Dataset, Image};
use ytmt_core::error::{Error, Result};
use ytmt_core::net::{build_plain, build_ushaped, cascade_forward, DualStreamNet};
use ytmt_core::params::ParamStore;
use ytmt_core::shape::Shape;
use ytmt_core::tensor::{Tape, Tensor};
use ytmt_core::train::{
    self, evaluate, run_ablation_suite, trailing_mean_total, train_stage, train_stage_resume,
    train_two_stage, RunConfig,
};
use ytmt_core::verify;

use crate::config::FileConfig;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract(_) => 1,
        Error::Dimension { .. } | Error::Data { .. } | Error::Checkpoint(_) | Error::Io(_) => 2,
        Error::Numeric { .. } => 3,
    }
}

/// Print the fully resolved configuration (the reproducibility record every
/// command leads with).
pub fn print_effective_config(cfg: &FileConfig) {
    println!("# effective configuration");
    for line in cfg.to_toml().lines() {
        println!("# {line}");
    }
}

fn build_net_for(store: &mut ParamStore, cfg: &RunConfig, stage: u8) -> Result<DualStreamNet> {
    let ucfg = cfg.unet_config(stage);
    if cfg.variant.ushaped() {
        build_ushaped(store, "net", &ucfg)
    } else {
        build_plain(store, "net", &ucfg)
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(file_cfg: &FileConfig, run_cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    print_effective_config(file_cfg);
    let ds = Dataset::open(run_cfg.data.clone())?;
    let write_i = run_cfg.data.mode == ytmt_core::data::MixMode::Exact;
    fs::create_dir_all(out_dir.join("T"))?;
    fs::create_dir_all(out_dir.join("R"))?;
    if write_i {
        fs::create_dir_all(out_dir.join("I"))?;
    }
    let mut first_hash: Option<String> = None;
    for idx in 0..ds.len() {
        let sample = ds.get(idx)?;
        write_sample(out_dir, idx, &sample, write_i)?;
        if idx == 0 {
            let mut h = Sha256::new();
            h.update(fs::read(out_dir.join("T").join("0000.ppm"))?);
            h.update(fs::read(out_dir.join("R").join("0000.ppm"))?);
            if write_i {
                h.update(fs::read(out_dir.join("I").join("0000.ppm"))?);
            }
            first_hash = Some(hex::encode(h.finalize()));
        }
    }
    println!("samples: {}", ds.len());
    if let Some(hash) = first_hash {
        println!("first-sample sha256: {hash}");
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(
    file_cfg: &FileConfig,
    run_cfg: &RunConfig,
    dry_run: bool,
    resume: Option<&Path>,
) -> Result<()> {
    print_effective_config(file_cfg);
    if dry_run {
        let mut store = ParamStore::new(run_cfg.seed);
        build_net_for(&mut store, run_cfg, 1)?;
        let stage1 = store.scalar_count();
        println!("stage-1 parameters: {stage1}");
        if run_cfg.variant.two_stage() {
            let mut s2 = ParamStore::new(run_cfg.seed);
            build_net_for(&mut s2, run_cfg, 2)?;
            println!("stage-2 parameters: {}", s2.scalar_count());
        }
        println!("dry run: no training performed");
        return Ok(());
    }

    if run_cfg.variant.two_stage() {
        if resume.is_some() {
            return Err(Error::Config(
                "resume targets a single training loop; train the stages separately to resume a cascade".into(),
            ));
        }
        let two = train_two_stage(run_cfg)?;
        print_stage_summary("stage 1", &two.stage1);
        print_stage_summary("stage 2", &two.stage2);
    } else {
        let stage = match resume {
            Some(path) => {
                let ck = read_checkpoint(path)?;
                println!("resuming from {} at iteration {}", path.display(), ck.iteration);
                train_stage_resume(run_cfg, &ck)?
            }
            None => train_stage(run_cfg)?,
        };
        print_stage_summary("training", &stage);
    }
    Ok(())
}

fn print_stage_summary(label: &str, stage: &train::TrainedStage) {
    println!(
        "{label}: {} steps, trailing-50 loss {:.6}, eval PSNR(T) {:.3} dB / SSIM(T) {:.4}",
        stage.curve.len(),
        trailing_mean_total(&stage.curve, 50),
        stage.eval.mean_psnr_t(),
        stage.eval.mean_ssim_t(),
    );
    println!("{label}: artifacts in {}", stage.out_dir.display());
}

// ---------------------------------------------------------------------------
// separate
// ---------------------------------------------------------------------------

/// Echo keys that determine whether a checkpoint can drive this config's
/// network (training-schedule and dataset keys are free to differ).
const ARCH_KEYS: [&str; 7] = [
    "stage=",
    "variant=",
    "depth=",
    "base_channels=",
    "plain_blocks=",
    "augmenter=",
    "stage2_includes_input=",
];

fn arch_lines(echo: &str) -> Vec<&str> {
    echo.lines().filter(|l| ARCH_KEYS.iter().any(|k| l.starts_with(k))).collect()
}

fn checkpoint_stage(ck: &Checkpoint) -> u8 {
    ck.config_echo
        .lines()
        .find_map(|l| l.strip_prefix("stage=").and_then(|v| v.parse().ok()))
        .unwrap_or(1)
}

/// Verify the checkpoint's architecture echo against the config and load it
/// into a freshly built network.
fn load_net(
    run_cfg: &RunConfig,
    path: &Path,
    expect_stage: u8,
) -> Result<(ParamStore, DualStreamNet)> {
    let ck = read_checkpoint(path)?;
    let stage = checkpoint_stage(&ck);
    if stage != expect_stage {
        return Err(Error::Checkpoint(format!(
            "{} holds a stage-{stage} network where stage {expect_stage} is needed",
            path.display()
        )));
    }
    let want = run_cfg.echo(stage);
    let theirs = arch_lines(&ck.config_echo);
    let ours = arch_lines(&want);
    if theirs != ours {
        let mut diff = String::new();
        for (a, b) in theirs.iter().zip(ours.iter()) {
            if a != b {
                diff.push_str(&format!("  checkpoint: {a}\n  config:     {b}\n"));
            }
        }
        return Err(Error::Checkpoint(format!(
            "architecture mismatch between {} and the configuration:\n{diff}",
            path.display()
        )));
    }
    let mut store = ParamStore::new(run_cfg.seed);
    let net = build_net_for(&mut store, run_cfg, stage)?;
    ck.restore_into(&mut store)?;
    Ok((store, net))
}

fn image_to_leaf(tape: &Tape<f32>, img: &Image) -> Result<Tensor<f32>> {
    tape.leaf(Shape::nchw(1, 3, img.h, img.w), img.data.clone(), false)
}

fn tensor_to_image_clamped(t: &Tensor<f32>) -> Result<Image> {
    let (n, c, h, w) = t.shape().as_nchw("separate output")?;
    if n != 1 || c != 3 {
        return Err(Error::dim("separate output", format!("expected (1,3,H,W), got {:?}", t.shape())));
    }
    Ok(Image { h, w, data: t.value().iter().map(|v| v.clamp(0.0, 1.0)).collect() })
}

pub fn cmd_separate(
    file_cfg: &FileConfig,
    run_cfg: &RunConfig,
    checkpoint: &Path,
    stage1_checkpoint: Option<&Path>,
    input: &Path,
    out_dir: &Path,
) -> Result<()> {
    print_effective_config(file_cfg);
    let ck = read_checkpoint(checkpoint)?;
    let stage = checkpoint_stage(&ck);

    // Build the forward stack: a stage-2 checkpoint needs its stage-1
    // companion to form the cascade.
    let (stores, nets): (Vec<ParamStore>, Vec<DualStreamNet>) = if stage == 2 {
        let s1_path = stage1_checkpoint.ok_or_else(|| {
            Error::Config(format!(
                "{} holds a cascade stage 2; pass --stage1 with the stage-1 checkpoint",
                checkpoint.display()
            ))
        })?;
        let (st1, n1) = load_net(run_cfg, s1_path, 1)?;
        let (st2, n2) = load_net(run_cfg, checkpoint, 2)?;
        (vec![st1, st2], vec![n1, n2])
    } else {
        let (st, n) = load_net(run_cfg, checkpoint, 1)?;
        (vec![st], vec![n])
    };
    let plan = run_cfg.stage_plan();

    let inputs: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map_or(false, |x| x == "ppm"))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::data(input.display().to_string(), "no .ppm files found"));
        }
        v
    } else {
        vec![input.to_path_buf()]
    };

    fs::create_dir_all(out_dir)?;
    let mut residual_sum = 0.0f64;
    let mut residual_n = 0usize;
    for path in &inputs {
        let img = read_ppm(path)?;
        let tape = Tape::<f32>::new();
        let leaf = image_to_leaf(&tape, &img)?;
        let (that, rhat) = if stage == 2 {
            let b1 = stores[0].bind(&tape)?;
            let b2 = stores[1].bind(&tape)?;
            cascade_forward(&nets[0], &b1, &nets[1], &b2, &leaf, &plan)?
        } else {
            let b = stores[0].bind(&tape)?;
            nets[0].forward(&b, &leaf)?
        };
        let t_img = tensor_to_image_clamped(&that)?;
        let r_img = tensor_to_image_clamped(&rhat)?;
        let mut residual = Image::zeros(img.h, img.w);
        for k in 0..img.data.len() {
            residual.data[k] = (img.data[k] - t_img.data[k] - r_img.data[k]).abs();
            residual_sum += residual.data[k] as f64;
        }
        residual_n += img.data.len();
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data(path.display().to_string(), "unreadable file name"))?;
        write_ppm(&out_dir.join(format!("{stem}.T.ppm")), &t_img)?;
        write_ppm(&out_dir.join(format!("{stem}.R.ppm")), &r_img)?;
        write_ppm(&out_dir.join(format!("{stem}.residual.ppm")), &residual)?;
    }
    let mean_residual = residual_sum / residual_n as f64;
    println!("separated {} image(s) into {}", inputs.len(), out_dir.display());
    println!("mean additivity residual |I - T - R|: {mean_residual:.6}");
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(
    file_cfg: &FileConfig,
    run_cfg: &RunConfig,
    checkpoint: &Path,
    stage1_checkpoint: Option<&Path>,
    out_csv: &Path,
) -> Result<()> {
    print_effective_config(file_cfg);
    let ck = read_checkpoint(checkpoint)?;
    let stage = checkpoint_stage(&ck);
    let test = Dataset::open(run_cfg.test_data.clone())?;
    let plan = run_cfg.stage_plan();
    let report = if stage == 2 {
        let s1_path = stage1_checkpoint.ok_or_else(|| {
            Error::Config(format!(
                "{} holds a cascade stage 2; pass --stage1 with the stage-1 checkpoint",
                checkpoint.display()
            ))
        })?;
        let (st1, n1) = load_net(run_cfg, s1_path, 1)?;
        let (st2, n2) = load_net(run_cfg, checkpoint, 2)?;
        evaluate(&test, |tape, input| {
            let b1 = st1.bind(tape)?;
            let b2 = st2.bind(tape)?;
            cascade_forward(&n1, &b1, &n2, &b2, input, &plan)
        })?
    } else {
        let (st, n) = load_net(run_cfg, checkpoint, 1)?;
        evaluate(&test, |tape, input| {
            let b = st.bind(tape)?;
            n.forward(&b, input)
        })?
    };
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out_csv, report.to_csv())?;
    println!(
        "eval over {} image(s): PSNR(T) {:.3} dB, SSIM(T) {:.4}, PSNR(R) {:.3} dB, SSIM(R) {:.4}",
        report.rows.len(),
        report.mean_psnr_t(),
        report.mean_ssim_t(),
        report.mean_psnr_r(),
        report.mean_ssim_r()
    );
    println!("wrote {}", out_csv.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck / ablate
// ---------------------------------------------------------------------------

pub fn cmd_gradcheck(file_cfg: &FileConfig) -> Result<()> {
    print_effective_config(file_cfg);
    let report = verify::standard_suite()?;
    print!("{}", report.render());
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<String> = report.failures().map(|c| c.name.clone()).collect();
        Err(Error::numeric("gradcheck", format!("checks failed: {}", failed.join(", "))))
    }
}

pub fn cmd_ablate(file_cfg: &FileConfig, run_cfg: &RunConfig, seeds: &[u64]) -> Result<()> {
    print_effective_config(file_cfg);
    if seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    let table = run_ablation_suite(run_cfg, seeds)?;
    print!("{}", table.to_csv());
    println!();
    println!("variant means over {} seed(s):", seeds.len());
    for (variant, (psnr_t, ssim_t, final_loss)) in table.variant_means() {
        println!(
            "  {variant:<10} PSNR(T) {psnr_t:.3} dB  SSIM(T) {ssim_t:.4}  final loss {final_loss:.6}"
        );
    }
    println!("wrote {}", run_cfg.out_dir.join("ablation.csv").display());
    Ok(())
}
