use std::fs;
use std::path::Path;

use clap::Parser;
use sr_distill::cli::{run, Cli};
use sr_distill::dataset::load_dataset;
use sr_distill::error::ToolError;
use sr_distill::report::read_rows;

const TINY: &str = r#"
[autoencoder]
steps = 4
batch = 2

[teacher]
steps = 4
batch = 2

[distill]
steps = 3
batch = 2
"#;

fn cli(args: &[&str]) -> Result<(), ToolError> {
    let argv = std::iter::once("sr-distill").chain(args.iter().copied());
    run(Cli::try_parse_from(argv).expect("arguments parse"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_data(dir: &Path, seed: &str) {
    cli(&[
        "make-data",
        "--out",
        p(dir),
        "--n",
        "4",
        "--val",
        "2",
        "--size",
        "16",
        "--seed",
        seed,
    ])
    .unwrap();
}

#[test]
fn make_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    make_data(&a, "3");
    make_data(&b, "3");
    let ds = load_dataset(&a).unwrap();
    assert_eq!((ds.train.len(), ds.val.len()), (4, 2));
    assert_eq!(ds.train[0].1.hq.width(), 16);
    assert_eq!(ds.train[0].1.lq.width(), 4);
    for item in &ds.manifest.items {
        assert_eq!(
            fs::read(a.join(&item.hq)).unwrap(),
            fs::read(b.join(&item.hq)).unwrap()
        );
        assert_eq!(
            fs::read(a.join(&item.lq)).unwrap(),
            fs::read(b.join(&item.lq)).unwrap()
        );
    }
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, vae, teacher, run_dir) = (
        root.join("data"),
        root.join("vae"),
        root.join("teacher"),
        root.join("run"),
    );
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    make_data(&data, "1");
    let common = ["--data", p(&data), "--config", p(&config), "--seed", "2"];
    cli(&[&["train", "vae", "--out", p(&vae)][..], &common].concat()).unwrap();
    cli(&[
        &["train", "teacher", "--out", p(&teacher), "--vae", p(&vae)][..],
        &common,
    ]
    .concat())
    .unwrap();
    let distill = [
        "train",
        "distill",
        "--out",
        p(&run_dir),
        "--vae",
        p(&vae),
        "--teacher",
        p(&teacher),
    ];
    cli(&[&distill[..], &common].concat()).unwrap();

    let log = fs::read_to_string(run_dir.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let eval_dir = root.join("eval");
    let student = run_dir.join("student");
    cli(&[
        "eval",
        "--data",
        p(&data),
        "--out",
        p(&eval_dir),
        "--student",
        p(&student),
        "--grids",
        "1",
    ])
    .unwrap();
    let rows = read_rows(&eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows
        .iter()
        .all(|r| r.denoiser_evals == 1 && r.psnr_y.is_finite()));

    let bil = root.join("bilinear");
    cli(&[
        "eval",
        "--data",
        p(&data),
        "--out",
        p(&bil),
        "--vae",
        p(&vae),
        "--grids",
        "1",
    ])
    .unwrap();
    assert_eq!(read_rows(&bil.join("metrics.csv")).unwrap().len(), 2);
}

#[test]
fn bad_config_is_a_caller_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_data(&data, "1");
    let e = cli(&[
        "train",
        "distill",
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("out")),
        "--vae",
        "nowhere",
        "--teacher",
        "nowhere",
        "--lambda",
        "2",
    ])
    .unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}

#[test]
fn missing_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_data(&data, "1");
    let out = tmp.path().join("t");
    let missing = tmp.path().join("missing");
    assert!(cli(&[
        "train",
        "teacher",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--vae",
        p(&missing)
    ])
    .is_err());
    assert!(!out.exists());
}

#[test]
fn unknown_oracle_is_rejected() {
    assert!(cli(&["gradcheck", "--only", "no-such-oracle"]).is_err());
    cli(&["gradcheck", "--only", "sentinels"]).unwrap();
}
