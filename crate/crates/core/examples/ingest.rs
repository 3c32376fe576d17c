//! Scans a folder of color pages into a dataset manifest with a
//! hash-assigned eval split. Without an argument a small procedural dataset
//! is generated first.
//!
//! ```text
//! cargo run --example ingest -- [root]
//! ```

use std::path::PathBuf;

use manga_colorize::data::{ingest, write_synthetic_dataset, DatasetManifest, Split, MANIFEST_FILE};

fn main() -> manga_colorize::Result<()> {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = tmp.path().join("pages");
            write_synthetic_dataset(&dir, 40, 96, 64, 1)?;
            dir
        }
    };
    let manifest = ingest(&root)?;
    let path = root.join(MANIFEST_FILE);
    manifest.save(&path)?;

    let reloaded = DatasetManifest::load(&path)?;
    println!(
        "{} train, {} eval, {} rejected",
        reloaded.split(Split::Train).count(),
        reloaded.split(Split::Eval).count(),
        reloaded.rejected.len()
    );
    for e in reloaded.split(Split::Eval).take(5) {
        println!("  eval {} {}x{} {}", e.path, e.width, e.height, &e.sha256[..12]);
    }
    Ok(())
}
