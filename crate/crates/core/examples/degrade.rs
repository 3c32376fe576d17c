//! Synthesizes one training pair from a color page: the grayscale shading
//! input and a palette-quantized, chroma-blurred, patch-perturbed rough
//! colorization.
//!
//! ```text
//! cargo run --example degrade -- [page.png] [out_dir]
//! ```

use std::path::PathBuf;

use manga_colorize::data::{synthesize_pair_with, synthetic_page, PrepareConfig};
use manga_colorize::priors::DegradationConfig;
use manga_colorize::raster;

fn main() -> manga_colorize::Result<()> {
    let mut args = std::env::args().skip(1);
    let page = match args.next() {
        Some(p) => raster::load_stack(&PathBuf::from(p))?,
        None => synthetic_page(384, 256, 5),
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("degrade-out"));
    std::fs::create_dir_all(&out).map_err(|e| manga_colorize::Error::io(&out, e))?;

    let deg = DegradationConfig {
        seed: 11,
        ..DegradationConfig::default()
    };
    let pair = synthesize_pair_with(&page, &deg, 3, &PrepareConfig::default(), "page")?;
    raster::save_stack(&pair.y_true, &out.join("y_true.png"))?;
    raster::save_plane(&pair.x_g, &out.join("x_g.png"))?;
    raster::save_stack(&pair.x_col, &out.join("x_col.png"))?;
    println!(
        "{:?} crop, palette {} colors, chroma downsample x{}, {} perturbed patches -> {}",
        pair.y_true.dims(),
        deg.palette_size,
        deg.chroma_downsample,
        deg.patch_perturb_count,
        out.display()
    );
    println!("mean abs difference y_true vs x_col: {:.4}", mean_abs(&pair.y_true.data(), pair.x_col.data()));
    Ok(())
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}
