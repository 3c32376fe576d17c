//! Checkpoint and resume: a 12-step run against one interrupted at step 6
//! and continued from its checkpoint. The final weights match bit for bit.

use manga_colorize::checkpoint::{checkpoint_path, read_manifest};
use manga_colorize::data::{ingest_with, write_synthetic_dataset};
use manga_colorize::pipeline::{train, TrainConfig, TrainOptions};

fn main() -> manga_colorize::Result<()> {
    let tmp = tempfile::tempdir().expect("tempdir");
    let pages = tmp.path().join("pages");
    write_synthetic_dataset(&pages, 4, 64, 64, 2)?;
    let manifest = ingest_with(&pages, 0)?;

    let mut config = TrainConfig::toy();
    config.max_steps = 12;
    config.checkpoint_interval = 6;
    config.loss.lambda_psi_start = 4;

    let a = tmp.path().join("a");
    let straight = train(
        config.clone(),
        &manifest,
        &TrainOptions {
            out_dir: Some(a.clone()),
            resume: None,
        },
    )?;
    let header = read_manifest(&checkpoint_path(&a, 6))?;
    println!(
        "checkpoint at step {}: {} generator / {} discriminator updates, {} tensors",
        header.step,
        header.generator_updates,
        header.discriminator_updates,
        header.tensors.len()
    );

    let resumed = train(
        config,
        &manifest,
        &TrainOptions {
            out_dir: Some(tmp.path().join("b")),
            resume: Some(checkpoint_path(&a, 6)),
        },
    )?;
    let (x, y) = (
        straight.generator.params().full_digest()?,
        resumed.generator.params().full_digest()?,
    );
    println!("straight {}\nresumed  {}", &x[..16], &y[..16]);
    println!("identical: {}", x == y);
    Ok(())
}
