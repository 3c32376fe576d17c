#![allow(dead_code)]

use std::path::Path;

use manga_colorize::data::{ingest_with, write_synthetic_dataset, DatasetManifest, Split};
use manga_colorize::pipeline::TrainConfig;

/// Eight procedural 64x64 pages, all in the train split.
pub fn fixture_manifest(dir: &Path) -> DatasetManifest {
    fixture_manifest_sized(dir, 8, 64, 64)
}

pub fn fixture_manifest_sized(dir: &Path, n: usize, h: usize, w: usize) -> DatasetManifest {
    let pages = dir.join("pages");
    write_synthetic_dataset(&pages, n, h, w, 0).unwrap();
    ingest_with(&pages, 0).unwrap().with_all(Split::Train)
}

/// Toy config with the gate opening at `gate_start`.
pub fn toy_config(max_steps: u64, gate_start: u64) -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.max_steps = max_steps;
    cfg.loss.lambda_psi_start = gate_start;
    cfg
}
