//! The `manga-colorize` binary end to end.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use manga_colorize::cli::CHECKPOINT_ENV;
use manga_colorize::colorspace::{to_grayscale, ImageStack};
use manga_colorize::data::{save_hints, synthetic_page, write_synthetic_dataset, Hint, HintSet};
use manga_colorize::pipeline::{EvalMetrics, TRAIN_LOG};
use manga_colorize::raster;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_manga-colorize"));
    c.env_remove(CHECKPOINT_ENV).env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_page(path: &Path, h: usize, w: usize) {
    raster::save_plane(&to_grayscale(&synthetic_page(h, w, 2)).unwrap(), path).unwrap();
}

#[test]
fn blend_at_zero_reproduces_the_generator_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (y_hat, x_col, out) = (tmp.path().join("y_hat.png"), tmp.path().join("x_col.png"), tmp.path().join("y.png"));
    raster::save_stack(&synthetic_page(32, 40, 1), &y_hat).unwrap();
    raster::save_stack(&ImageStack::solid(32, 40, [0.1, 0.7, 0.2]).unwrap(), &x_col).unwrap();

    let o = run(bin().args(["blend"]).arg(&y_hat).arg(&x_col).args(["--lambda-ab", "0"]).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let got = raster::load_stack(&out).unwrap();
    let want = raster::load_stack(&y_hat).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() <= 1.0 / 255.0 + 1e-9);

    let o = run(bin().args(["blend"]).arg(&y_hat).arg(&x_col).args(["--lambda-ab", "1"]).arg("--out").arg(&out));
    assert!(o.status.success());
    assert!(raster::load_stack(&out).unwrap().max_abs_diff(&want).unwrap() > 0.05);
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let page = tmp.path().join("page.png");
    write_page(&page, 64, 64);

    let o = run(bin().args(["colorize"]).arg(&page).arg("--out").arg(tmp.path().join("y.png")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(CHECKPOINT_ENV), "{}", stderr(&o));

    let o = run(bin().args(["colorize"]).arg(&page).arg("--out").arg("y.png").env(CHECKPOINT_ENV, tmp.path().join("missing")));
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(run(bin().arg("frobnicate")).status.code(), Some(2));
    let o = run(bin().args(["blend", "a.png", "b.png", "--out", "c.png", "--lambda-ab", "1.5"]));
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(bin().args(["ingest"]).arg(tmp.path().join("nowhere"))).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_at_default_tolerance() {
    let o = run(bin().arg("gradcheck"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"), "{}", stdout(&o));
    // An impossible tolerance is a runtime failure, not a usage error.
    let o = run(bin().args(["gradcheck", "--tolerance", "0"]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ingest_train_eval_colorize() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("pages");
    write_synthetic_dataset(&root, 6, 64, 64, 3).unwrap();
    std::fs::write(root.join("broken.png"), b"definitely not a png").unwrap();

    let o = run(bin().arg("ingest").arg(&root).args(["--eval-every", "0"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("6 images"), "{}", stdout(&o));
    assert!(stdout(&o).contains("1 rejected"), "{}", stdout(&o));
    let manifest = root.join("manifest.json");

    let cfg_path = tmp.path().join("toy.toml");
    let mut cfg = common::toy_config(4, 3);
    cfg.checkpoint_interval = 2;
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let out = tmp.path().join("run");
    let o = run(bin().arg("train").arg(&cfg_path).arg("--manifest").arg(&manifest).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("ckpt-000002.safetensors").exists());
    assert!(out.join("ckpt-000004.safetensors").exists());
    let log = std::fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 4);

    let o = run(bin().arg("eval").arg(&manifest).args(["--split", "train"]).env(CHECKPOINT_ENV, &out));
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: EvalMetrics = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(metrics.images, 6);
    assert!(metrics.mean_l1.is_finite());

    let page = tmp.path().join("page.png");
    write_page(&page, 64, 96);
    let hints = tmp.path().join("hints.json");
    let set = HintSet::new(
        96,
        64,
        vec![Hint {
            x: 40,
            y: 20,
            color: [0.8, 0.1, 0.1],
            radius: 5,
        }],
    )
    .unwrap();
    std::fs::write(&hints, save_hints(&set)).unwrap();
    let stages = tmp.path().join("stages");
    let colorize = |out_png: &Path| {
        run(bin()
            .arg("colorize")
            .arg(&page)
            .arg("--hints")
            .arg(&hints)
            .arg("--deterministic")
            .arg("--stages-dir")
            .arg(&stages)
            .arg("--out")
            .arg(out_png)
            .env(CHECKPOINT_ENV, &out))
    };
    let (a, b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    let o = colorize(&a);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(colorize(&b).status.success());
    assert_eq!(raster::load_stack(&a).unwrap().dims(), (64, 96));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    for stage in ["x_g.png", "x_col.png", "y_hat.png"] {
        assert!(stages.join(stage).exists(), "{stage}");
    }

    let o = run(bin().arg("train").arg(&cfg_path).arg("--manifest").arg(&manifest).arg("--out").arg(&out).arg("--resume").arg(out.join("ckpt-000002.safetensors")));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("step 4"));
}
