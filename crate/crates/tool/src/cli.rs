//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sr_distill_core::degradation::TrainingPair;
use sr_distill_core::image::ImageBuffer;
use sr_distill_core::metrics::{evaluate, evaluate_bilinear, student_outputs, MetricsReport};
use sr_distill_core::nets::{module_checksum, AutoEncoder, Student};
use sr_distill_core::trainer::{
    distill, train_autoencoder, train_teacher, TrainConfig, TrainState,
};

use crate::checkpoint::{self, CheckpointKind};
use crate::config::{load_recipe, load_train_config};
use crate::dataset::{self, load_dataset, Dataset};
use crate::error::{Result, ToolError};
use crate::files::{create_dir, write_json};
use crate::gradcheck::{run_all, Precision};
use crate::logs::{CsvLog, PhaseRow};
use crate::manifest::{InputRef, RunInfo};
use crate::pngio::{hstack, write_png8};
use crate::report::{paired_deltas, write_report};

#[derive(Debug, Parser)]
#[command(
    name = "sr-distill",
    version,
    about = "Toy one-step super-resolution distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic HQ/LQ dataset.
    MakeData(MakeDataArgs),
    /// Train one phase.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Score a student (or bilinear upsampling) on a dataset split.
    Eval(EvalArgs),
    /// Run the numerical oracles.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training pairs.
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    /// Validation pairs, generated after the training pairs.
    #[arg(long, default_value_t = 64)]
    pub val: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// TOML file with degradation recipe fields.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Autoencoder.
    Vae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Class-conditional velocity teacher on frozen latents.
    Teacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// One-step student against the frozen teacher.
    Distill(DistillArgs),
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub teacher: PathBuf,
    /// Weight of the score-distillation term; 0 trains on reconstruction only.
    #[arg(long)]
    pub gamma2: Option<f64>,
    /// Classifier-free guidance weight for teacher and replica.
    #[arg(long)]
    pub cfg_weight: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Trajectory nodes; 0 disables trajectory sampling.
    #[arg(long)]
    pub dasm_nodes: Option<usize>,
    #[arg(long)]
    pub dasm_stride: Option<usize>,
    #[arg(long)]
    pub lr_student: Option<f64>,
    #[arg(long)]
    pub lr_lora: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Student checkpoint directory; omit to score bilinear upsampling.
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Second student for paired deltas.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Feature autoencoder; defaults to the one the student was trained with.
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Number of preview grids to write.
    #[arg(long, default_value_t = 8)]
    pub grids: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run only the named oracle (repeatable).
    #[arg(long)]
    pub only: Vec<String>,
    /// Run in single precision with a 1e-2 tolerance.
    #[arg(long)]
    pub float32: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData(a) => make_data(&a),
        Command::Train(TrainCommand::Vae { common, lr }) => train_vae(&common, lr),
        Command::Train(TrainCommand::Teacher { common, vae, lr }) => {
            train_velocity(&common, &vae, lr)
        }
        Command::Train(TrainCommand::Distill(a)) => train_distill(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn make_data(a: &MakeDataArgs) -> Result<()> {
    let recipe = load_recipe(a.recipe.as_deref())?;
    let run = RunInfo::new("make-data", a.seed).with_config(
        &json!({ "n": a.n, "val": a.val, "size": a.size, "seed": a.seed, "recipe": recipe }),
    );
    let m = dataset::write_dataset(&a.out, a.n, a.val, a.size, a.seed, &recipe, run)?;
    println!("wrote {} pairs to {}", m.items.len(), a.out.display());
    Ok(())
}

fn base_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = load_train_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn validated(cfg: TrainConfig) -> Result<TrainConfig> {
    cfg.validate().map_err(|e| ToolError::Args(e.to_string()))?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(ToolError::Args(format!(
            "{} needs both train and val pairs",
            path.display()
        )));
    }
    Ok(ds)
}

fn every(step: usize, total: usize) -> bool {
    step.is_multiple_of((total / 10).max(1)) || step + 1 == total
}

fn train_vae(c: &Common, lr: Option<f64>) -> Result<()> {
    let mut cfg = base_config(c)?;
    let p = &mut cfg.autoencoder;
    p.steps = c.steps.unwrap_or(p.steps);
    p.batch = c.batch.unwrap_or(p.batch);
    p.lr = lr.unwrap_or(p.lr);
    let cfg = validated(cfg)?;
    let ds = load_data(&c.data)?;
    let train: Vec<ImageBuffer> = ds.train.iter().map(|(_, p)| p.hq.clone()).collect();
    let val: Vec<ImageBuffer> = ds.val.iter().map(|(_, p)| p.hq.clone()).collect();
    create_dir(&c.out)?;
    let mut log = CsvLog::create(&c.out.join("log.csv"))?;
    let mut log_err = None;
    let total = cfg.autoencoder.steps;
    let (ae, report) = train_autoencoder::<f32>(&cfg, &train, &val, &mut |step, loss| {
        if every(step, total) {
            eprintln!("vae step {step}/{total} mse {loss:.5}");
        }
        if let Err(e) = log.push(&PhaseRow { step, loss }) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.finish()?;
    let run = RunInfo::new("train vae", cfg.seed)
        .with_config(&cfg)
        .with_input("data", InputRef::of_dir(&c.data, dataset::MANIFEST)?);
    checkpoint::save(
        &c.out,
        &ae,
        CheckpointKind::Autoencoder,
        checkpoint::ae_arch(&ae),
        total,
        Some(report.decoder_checksum.clone()),
        json!(report),
        run,
    )?;
    println!(
        "held-out round-trip PSNR {:.2} dB (floor {:.0} dB), MSE {:.5}",
        report.val_psnr, report.psnr_floor, report.val_mse
    );
    if !report.converged {
        eprintln!(
            "warning: held-out MSE {:.5} above target {:.5}",
            report.val_mse, cfg.autoencoder.target_mse
        );
    }
    Ok(())
}

fn train_velocity(c: &Common, vae: &Path, lr: Option<f64>) -> Result<()> {
    let mut cfg = base_config(c)?;
    let p = &mut cfg.teacher;
    p.steps = c.steps.unwrap_or(p.steps);
    p.batch = c.batch.unwrap_or(p.batch);
    p.lr = lr.unwrap_or(p.lr);
    let cfg = validated(cfg)?;
    let (ae, _) = checkpoint::load_autoencoder(vae)?;
    let ds = load_data(&c.data)?;
    create_dir(&c.out)?;
    let mut log = CsvLog::create(&c.out.join("log.csv"))?;
    let mut log_err = None;
    let total = cfg.teacher.steps;
    let (net, report) = train_teacher(
        &cfg,
        &Dataset::hq(&ds.train),
        &Dataset::hq(&ds.val),
        &ae,
        &mut |step, loss| {
            if every(step, total) {
                eprintln!("teacher step {step}/{total} loss {loss:.4}");
            }
            if let Err(e) = log.push(&PhaseRow { step, loss }) {
                log_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.finish()?;
    let run = RunInfo::new("train teacher", cfg.seed)
        .with_config(&cfg)
        .with_input("data", InputRef::of_dir(&c.data, dataset::MANIFEST)?)
        .with_input("vae", InputRef::of_dir(vae, checkpoint::MANIFEST)?);
    checkpoint::save(
        &c.out,
        &net,
        CheckpointKind::Teacher,
        checkpoint::velocity_arch(&net),
        total,
        None,
        json!(report),
        run,
    )?;
    println!(
        "validation velocity loss {:.4}, sample FFD {:?}",
        report.val_loss, report.sample_ffd
    );
    Ok(())
}

fn distill_config(a: &DistillArgs) -> Result<TrainConfig> {
    let mut cfg = base_config(&a.common)?;
    let d = &mut cfg.distill;
    d.steps = a.common.steps.unwrap_or(d.steps);
    d.batch = a.common.batch.unwrap_or(d.batch);
    d.weights.gamma2 = a.gamma2.unwrap_or(d.weights.gamma2);
    d.weights.w_cfg = a.cfg_weight.unwrap_or(d.weights.w_cfg);
    d.weights.lambda = a.lambda.unwrap_or(d.weights.lambda);
    d.dasm.nodes = a.dasm_nodes.unwrap_or(d.dasm.nodes);
    d.dasm.stride = a.dasm_stride.unwrap_or(d.dasm.stride);
    d.lr_student = a.lr_student.unwrap_or(d.lr_student);
    d.lr_lora = a.lr_lora.unwrap_or(d.lr_lora);
    d.checkpoint_every = a.checkpoint_every.unwrap_or(d.checkpoint_every);
    validated(cfg)
}

/// Writes `<dir>/student` and `<dir>/lora`.
pub fn save_distilled(
    dir: &Path,
    state: &TrainState<f32>,
    cfg: &TrainConfig,
    run: &RunInfo,
) -> Result<()> {
    let notes = json!({ "running_mean": state.running_mean() });
    checkpoint::save(
        &dir.join("student"),
        &state.student,
        CheckpointKind::Student,
        checkpoint::student_arch(&state.student, cfg.distill.encoder_rank),
        state.step,
        Some(state.student.ae.decoder_checksum()),
        notes.clone(),
        run.clone(),
    )?;
    checkpoint::save(
        &dir.join("lora"),
        &state.lora,
        CheckpointKind::Replica,
        checkpoint::replica_arch(&state.lora, cfg.distill.lora_scale),
        state.step,
        None,
        notes,
        run.clone(),
    )?;
    Ok(())
}

fn train_distill(a: &DistillArgs) -> Result<()> {
    let cfg = distill_config(a)?;
    let c = &a.common;
    let (ae, _) = checkpoint::load_autoencoder(&a.vae)?;
    let (teacher, _) = checkpoint::load_teacher(&a.teacher)?;
    let ds = load_data(&c.data)?;
    let run = RunInfo::new("train distill", cfg.seed)
        .with_config(&cfg)
        .with_input("data", InputRef::of_dir(&c.data, dataset::MANIFEST)?)
        .with_input("vae", InputRef::of_dir(&a.vae, checkpoint::MANIFEST)?)
        .with_input(
            "teacher",
            InputRef::of_dir(&a.teacher, checkpoint::MANIFEST)?,
        );
    let teacher_before = module_checksum(&teacher);
    let decoder_before = ae.decoder_checksum();
    create_dir(&c.out)?;
    let mut log = CsvLog::create(&c.out.join("log.csv"))?;
    let total = cfg.distill.steps;
    let every_ckpt = cfg.distill.checkpoint_every;
    let state = distill(&cfg, &ds.train_pairs(), &teacher, &ae, &mut |b, state| {
        log.push(b)?;
        if every(b.step, total) {
            eprintln!(
                "distill step {}/{total} t {} perceptual {:.5} latent {:.5} tsd {:.4} replica {:.4}",
                b.step, b.t, b.recon_perceptual, b.recon_latent_mse, b.tsd, b.lora_diffusion
            );
        }
        if every_ckpt > 0 && state.step % every_ckpt == 0 && state.step < total {
            save_distilled(
                &c.out.join(format!("step-{:06}", state.step)),
                state,
                &cfg,
                &run,
            )?;
        }
        Ok::<(), ToolError>(())
    });
    let state = match state {
        Ok(s) => s,
        Err(e) => {
            log.finish()?;
            return Err(e);
        }
    };
    log.finish()?;
    let teacher_after = module_checksum(&teacher);
    let decoder_after = state.student.ae.decoder_checksum();
    if teacher_after != teacher_before || decoder_after != decoder_before {
        return Err(ToolError::Validation(
            "frozen teacher or decoder weights changed".into(),
        ));
    }
    save_distilled(&c.out, &state, &cfg, &run)?;
    let val = ds.val_pairs();
    let report = evaluate(&state.student, &val, &ae)?;
    write_report(
        &c.out.join("val_metrics.csv"),
        &relabel(report.clone(), &ds.val),
    )?;
    let summary = json!({
        "run": run,
        "teacher_checksum": teacher_before,
        "decoder_checksum": decoder_before,
        "final_step": state.step,
        "running_mean": state.running_mean(),
        "val": { "psnr_y": report.psnr_y, "ssim_y": report.ssim_y, "perceptual": report.perceptual, "ffd": report.ffd },
    });
    write_json(&c.out.join("manifest.json"), &summary)?;
    println!(
        "validation PSNR-Y {:.2} dB, SSIM-Y {:.4}, perceptual {:.5}",
        report.psnr_y.mean, report.ssim_y.mean, report.perceptual.mean
    );
    Ok(())
}

/// Replaces positional row ids with dataset ids.
fn relabel(mut report: MetricsReport, pairs: &[(String, TrainingPair)]) -> MetricsReport {
    for (row, (id, _)) in report.rows.iter_mut().zip(pairs) {
        row.id = id.clone();
    }
    report
}

fn feature_ae(a: &EvalArgs) -> Result<AutoEncoder<f32>> {
    if let Some(v) = &a.vae {
        return Ok(checkpoint::load_autoencoder(v)?.0);
    }
    let student = a
        .student
        .as_ref()
        .ok_or_else(|| ToolError::Args("--vae is required without --student".into()))?;
    let m = checkpoint::read_manifest(student)?;
    let vae = m.run.inputs.get("vae").ok_or_else(|| {
        ToolError::MissingPrerequisite(format!(
            "{} records no autoencoder; pass --vae",
            student.display()
        ))
    })?;
    Ok(checkpoint::load_autoencoder(Path::new(&vae.path))?.0)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ae = feature_ae(a)?;
    let ds = load_dataset(&a.data)?;
    let pairs = match a.split.as_str() {
        "val" => &ds.val,
        "train" => &ds.train,
        other => return Err(ToolError::Args(format!("unknown split `{other}`"))),
    };
    let plain: Vec<TrainingPair> = pairs.iter().map(|(_, p)| p.clone()).collect();
    create_dir(&a.out)?;
    let mut run =
        RunInfo::new("eval", 0).with_input("data", InputRef::of_dir(&a.data, dataset::MANIFEST)?);
    let students: Vec<(Student<f32>, PathBuf)> = a
        .student
        .iter()
        .chain(&a.compare)
        .map(|p| Ok((checkpoint::load_student(p)?.0, p.clone())))
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    if students.is_empty() {
        reports.push(relabel(evaluate_bilinear(&plain, &ae)?, pairs));
        outputs.push(
            plain
                .iter()
                .map(|p| p.lq.resize_bilinear(p.hq.height(), p.hq.width()))
                .collect::<Vec<_>>(),
        );
    }
    for (i, (s, path)) in students.iter().enumerate() {
        run = run.with_input(
            if i == 0 { "student" } else { "compare" },
            InputRef::of_dir(path, checkpoint::MANIFEST)?,
        );
        s.reset_evals();
        let report = relabel(evaluate(s, &plain, &ae)?, pairs);
        if report.rows.iter().any(|r| r.denoiser_evals != 1) {
            return Err(ToolError::Validation(
                "an image took more than one denoiser evaluation".into(),
            ));
        }
        reports.push(report);
        outputs.push(student_outputs(s, &plain)?.0);
    }
    write_report(&a.out.join("metrics.csv"), &reports[0])?;
    if let Some(b) = reports.get(1) {
        write_report(&a.out.join("metrics_compare.csv"), b)?;
        let deltas = paired_deltas(&reports[0], b)?;
        let path = a.out.join("deltas.csv");
        std::fs::write(&path, &deltas).map_err(|e| ToolError::io(&path, e))?;
    }
    let grid_dir = a.out.join("grids");
    create_dir(&grid_dir)?;
    for (k, (id, p)) in pairs.iter().enumerate().take(a.grids) {
        let mut row: Vec<&ImageBuffer> = vec![&p.lq];
        row.extend(outputs.iter().map(|o| &o[k]));
        row.push(&p.hq);
        write_png8(&grid_dir.join(format!("{id}.png")), &hstack(&row))?;
    }
    write_json(&a.out.join("manifest.json"), &run)?;
    for (name, r) in ["a", "b"].iter().zip(&reports) {
        println!(
            "{name}: PSNR-Y {:.3} dB  SSIM-Y {:.4}  perceptual {:.5}  FFD {}",
            r.psnr_y.mean,
            r.ssim_y.mean,
            r.perceptual.mean,
            r.ffd.map_or("n/a".into(), |v| format!("{v:.5}"))
        );
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let precision = if a.float32 {
        Precision::F32
    } else {
        Precision::F64
    };
    let reports = run_all(&a.only, precision, a.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<14} max_err {:.3e}  tol {:.0e}  cases {:>3}  {:.2}s  {}",
            r.name,
            r.max_err,
            r.tolerance,
            r.cases,
            r.seconds,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(ToolError::Validation(format!(
            "oracles failed: {}",
            failed.join(", ")
        )))
    }
}
