//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Criteria 1-5 run on micro networks in double precision. The rest share one
//! desk-scale pipeline driven through the command line: a 64x64 synthetic set,
//! an autoencoder, a teacher and several distillation runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use sr_distill::checkpoint::{load_student, load_teacher, read_manifest};
use sr_distill::cli::{run, Cli};
use sr_distill::files::file_digest;
use sr_distill::gradcheck::{run_oracle, Precision};
use sr_distill::report::read_rows;
use sr_distill_core::metrics::MetricRow;
use sr_distill_core::nets::module_checksum;

const FD_ORACLES: [&str; 5] = ["fd-vsd", "fd-tsm", "fd-tsd", "fd-recon", "fd-lora"];
const SEED: &str = "7";

/// Knobs for the desk-scale runs, layered over the built-in defaults.
const DESK_CONFIG: &str = r#"
[autoencoder]
steps = 1500

[teacher]
steps = 1000

[distill]
steps = 1500
batch = 4
lr_student = 3e-4
lr_lora = 6e-5

# Keep the score residual subordinate to the perceptual term: its low-noise
# part pushes away from the target once the Jacobian is dropped.
[distill.weights]
w_of_t = "sigma_sq"
w_scale = 0.02
"#;

const REPRO_STEPS: &str = "100";

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn cli(args: &[&str]) -> Result<(), String> {
    let argv = std::iter::once("sr-distill").chain(args.iter().copied());
    let parsed = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
    run(parsed).map_err(|e| format!("{} failed: {e}", args.join(" ")))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn oracles(names: &[&str]) -> (bool, f64, String) {
    let mut pass = true;
    let mut seconds = 0.0;
    let mut parts = Vec::new();
    for name in names {
        match run_oracle(name, Precision::F64, 0) {
            Ok(r) => {
                pass &= r.passed();
                seconds += r.seconds;
                parts.push(format!(
                    "{name} max_err {:.2e} (tol {:.0e}, {} cases)",
                    r.max_err, r.tolerance, r.cases
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    (pass, seconds, parts.join("; "))
}

fn timed(id: usize, names: &[&str], budget: Option<f64>) -> Line {
    let (pass, seconds, detail) = oracles(names);
    let in_time = budget.is_none_or(|b| seconds < b);
    let budget_note = budget.map_or(String::new(), |b| format!(", {seconds:.2}s of {b:.0}s"));
    Line {
        id,
        pass: pass && in_time,
        detail: format!("{detail}{budget_note}"),
    }
}

fn mean(rows: &[MetricRow], f: impl Fn(&MetricRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
}

struct Desk {
    root: PathBuf,
    data: PathBuf,
    vae: PathBuf,
    teacher: PathBuf,
    config: PathBuf,
}

impl Desk {
    fn prepare(root: &Path) -> Result<Self, String> {
        let d = Self {
            root: root.to_path_buf(),
            data: root.join("data"),
            vae: root.join("vae"),
            teacher: root.join("teacher"),
            config: root.join("desk.toml"),
        };
        fs::write(&d.config, DESK_CONFIG).map_err(|e| e.to_string())?;
        cli(&[
            "make-data",
            "--out",
            p(&d.data),
            "--n",
            "256",
            "--val",
            "64",
            "--size",
            "64",
            "--seed",
            "1",
        ])?;
        let common = [
            "--data",
            p(&d.data),
            "--config",
            p(&d.config),
            "--seed",
            SEED,
        ];
        cli(&[&["train", "vae", "--out", p(&d.vae)][..], &common].concat())?;
        cli(&[
            &[
                "train",
                "teacher",
                "--out",
                p(&d.teacher),
                "--vae",
                p(&d.vae),
            ][..],
            &common,
        ]
        .concat())?;
        Ok(d)
    }

    fn distill(&self, name: &str, extra: &[&str]) -> Result<PathBuf, String> {
        let out = self.root.join(name);
        let base = [
            "train",
            "distill",
            "--data",
            p(&self.data),
            "--out",
            p(&out),
            "--config",
            p(&self.config),
            "--seed",
            SEED,
            "--vae",
            p(&self.vae),
            "--teacher",
            p(&self.teacher),
        ];
        cli(&[&base[..], extra].concat())?;
        Ok(out)
    }

    /// Validation rows for a student, or for bilinear upsampling.
    fn eval(
        &self,
        name: &str,
        student: Option<&Path>,
    ) -> Result<(PathBuf, Vec<MetricRow>), String> {
        let out = self.root.join(format!("eval-{name}"));
        let mut args = vec![
            "eval",
            "--data",
            p(&self.data),
            "--out",
            p(&out),
            "--vae",
            p(&self.vae),
            "--grids",
            "2",
        ];
        if let Some(s) = student {
            args.extend(["--student", p(s)]);
        }
        cli(&args)?;
        let metrics = out.join("metrics.csv");
        let rows = read_rows(&metrics).map_err(|e| e.to_string())?;
        Ok((metrics, rows))
    }
}

fn reproducibility(desk: &Desk) -> Result<Line, String> {
    let steps = ["--steps", REPRO_STEPS];
    let a = desk.distill("repro-a", &steps)?;
    let b = desk.distill("repro-b", &steps)?;
    let log_a = fs::read(a.join("log.csv")).map_err(|e| e.to_string())?;
    let log_b = fs::read(b.join("log.csv")).map_err(|e| e.to_string())?;
    let rows = log_a
        .iter()
        .filter(|&&c| c == b'\n')
        .count()
        .saturating_sub(1);
    let (ma, _) = desk.eval("repro-a", Some(&a.join("student")))?;
    let (mb, _) = desk.eval("repro-b", Some(&b.join("student")))?;
    let ra = fs::read(ma).map_err(|e| e.to_string())?;
    let rb = fs::read(mb).map_err(|e| e.to_string())?;
    let pass = log_a == log_b && ra == rb && rows == 100;
    Ok(Line {
        id: 8,
        pass,
        detail: format!(
            "{rows} logged steps, logs identical: {}, reports identical: {}",
            log_a == log_b,
            ra == rb
        ),
    })
}

fn desk_criteria(desk: &Desk, teacher_before: &str) -> Result<Vec<Line>, String> {
    let mut lines = Vec::new();
    lines.push(reproducibility(desk)?);

    let start = Instant::now();
    let full = desk.distill("full", &[])?;
    let no_reg = desk.distill("no-tsd", &["--gamma2", "0"])?;
    let no_dasm = desk.distill("no-dasm", &["--dasm-nodes", "0"])?;
    let train_secs = start.elapsed().as_secs_f64();

    let (_, bil) = desk.eval("bilinear", None)?;
    let (_, rf) = desk.eval("full", Some(&full.join("student")))?;
    let (_, rn) = desk.eval("no-tsd", Some(&no_reg.join("student")))?;
    let (_, rd) = desk.eval("no-dasm", Some(&no_dasm.join("student")))?;
    let perc = |r: &[MetricRow]| mean(r, |x| x.perceptual);
    let psnr = |r: &[MetricRow]| mean(r, |x| x.psnr_y);
    let gain = psnr(&rf) - psnr(&bil);
    let beats_no_reg = perc(&rf) < perc(&rn);
    let beats_no_dasm = perc(&rf) < perc(&rd);
    lines.push(Line {
        id: 6,
        pass: beats_no_reg && beats_no_dasm && gain >= 1.5 && train_secs < 4.0 * 3600.0,
        detail: format!(
            "perceptual full {:.7} / no-tsd {:.7} / no-dasm {:.7}; PSNR-Y full {:.3} dB vs bilinear {:.3} dB ({gain:+.3} dB, need +1.5); \
             no-tsd {:.3} dB, no-dasm {:.3} dB; distillation {:.0}s",
            perc(&rf),
            perc(&rn),
            perc(&rd),
            psnr(&rf),
            psnr(&bil),
            psnr(&rn),
            psnr(&rd),
            train_secs
        ),
    });

    let student = load_student(&full.join("student"))
        .map_err(|e| e.to_string())?
        .0;
    let data = sr_distill::dataset::load_dataset(&desk.data).map_err(|e| e.to_string())?;
    let val = data.val_pairs();
    student.reset_evals();
    for pair in &val {
        student
            .student_forward(&pair.lq)
            .map_err(|e| e.to_string())?;
    }
    let counted = student.evals();
    let per_row = [&rf, &rn, &rd]
        .iter()
        .all(|rows| rows.iter().all(|r| r.denoiser_evals == 1));
    lines.push(Line {
        id: 7,
        pass: counted == val.len() as u64 && per_row,
        detail: format!(
            "{counted} evaluations for {} images; every report row records 1: {per_row}",
            val.len()
        ),
    });

    let teacher_after = module_checksum(&load_teacher(&desk.teacher).map_err(|e| e.to_string())?.0);
    let vae_manifest = read_manifest(&desk.vae).map_err(|e| e.to_string())?;
    let decoder = vae_manifest.decoder_checksum.clone().unwrap_or_default();
    let mut decoders_ok = true;
    for run_dir in [&full, &no_reg, &no_dasm] {
        let (s, m) = load_student(&run_dir.join("student")).map_err(|e| e.to_string())?;
        decoders_ok &= s.ae.decoder_checksum() == decoder
            && m.decoder_checksum.as_deref() == Some(decoder.as_str());
        let summary: serde_json::Value = serde_json::from_slice(
            &fs::read(run_dir.join("manifest.json")).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        decoders_ok &= summary["teacher_checksum"] == teacher_before
            && summary["decoder_checksum"] == decoder.as_str();
    }
    lines.push(Line {
        id: 9,
        pass: teacher_after == teacher_before && decoders_ok && !decoder.is_empty(),
        detail: format!(
            "teacher {} {} after five runs, decoder checksums match: {decoders_ok}",
            &teacher_before[..12],
            if teacher_after == teacher_before {
                "unchanged"
            } else {
                "changed"
            },
        ),
    });
    Ok(lines)
}

fn main() -> ExitCode {
    let mut lines = vec![
        timed(1, &["tsd-identity"], Some(10.0)),
        timed(2, &FD_ORACLES, Some(60.0)),
        timed(3, &["sentinels"], None),
        timed(4, &["scheduler"], None),
        timed(5, &["dasm"], None),
    ];

    let tmp = tempfile::tempdir().expect("temp dir");
    let desk = Desk::prepare(tmp.path()).and_then(|d| {
        let teacher_before =
            module_checksum(&load_teacher(&d.teacher).map_err(|e| e.to_string())?.0);
        let digest = file_digest(&d.teacher.join("base.f32")).map_err(|e| e.to_string())?;
        let lines = desk_criteria(&d, &teacher_before)?;
        let digest_after = file_digest(&d.teacher.join("base.f32")).map_err(|e| e.to_string())?;
        Ok(lines.into_iter().map(move |mut l| {
            if l.id == 9 && digest != digest_after {
                l.pass = false;
                l.detail.push_str("; teacher file changed on disk");
            }
            l
        }))
    });
    match desk {
        Ok(more) => lines.extend(more),
        Err(e) => lines.extend([6, 7, 8, 9].map(|id| Line {
            id,
            pass: false,
            detail: format!("desk pipeline: {e}"),
        })),
    }

    lines.sort_by_key(|l| l.id);
    for l in &lines {
        println!(
            "criterion {}: {} {}",
            l.id,
            if l.pass { "PASS" } else { "FAIL" },
            l.detail
        );
    }
    if lines.iter().all(|l| l.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
