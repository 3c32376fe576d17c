//! Overfits the tiny generator on eight procedural 64x64 pages and reports
//! the reconstruction error before and after.
//!
//! ```text
//! cargo run --release --example train_toy -- [steps] [out_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use manga_colorize::data::{ingest_with, write_synthetic_dataset, Split};
use manga_colorize::pipeline::{evaluate, train, EvalConfig, TrainConfig, TrainOptions, TrainState};

fn main() -> manga_colorize::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(2000);
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| tmp.path().join("run"));

    let data_dir = tmp.path().join("pages");
    write_synthetic_dataset(&data_dir, 8, 64, 64, 0)?;
    let manifest = ingest_with(&data_dir, 0)?;

    let config = TrainConfig {
        max_steps: steps,
        ..TrainConfig::toy()
    };
    let eval = EvalConfig {
        split: Split::Train,
        degradation: config.degradation.clone(),
        prepare: config.prepare.clone(),
        seed: 0,
    };
    let before = evaluate(&TrainState::new(config.clone())?.generator, &manifest, &eval)?;

    let t = Instant::now();
    let state = train(
        config,
        &manifest,
        &TrainOptions {
            out_dir: Some(out.clone()),
            resume: None,
        },
    )?;
    let after = evaluate(&state.generator, &manifest, &eval)?;
    println!("trained {} steps in {:.1}s", state.step, t.elapsed().as_secs_f64());
    println!("mean L1 before {:.4}, after {:.4}", before.mean_l1, after.mean_l1);
    println!("checkpoints and log in {}", out.display());
    Ok(())
}
