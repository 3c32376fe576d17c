//! Full inference on one page: shading prior, hint-driven rough colorization,
//! generator forward and chroma blend. Uses a checkpoint when given one,
//! otherwise a freshly initialized tiny generator (which reproduces the rough
//! colorization's layout but not a trained model's quality).
//!
//! ```text
//! cargo run --release --example colorize_page -- [checkpoint] [out_dir]
//! ```

use std::path::PathBuf;

use candle_core::{DType, Device};
use manga_colorize::checkpoint::load_generator;
use manga_colorize::colorspace::{to_grayscale, BlendWeight};
use manga_colorize::data::{synthetic_page, Hint, HintSet};
use manga_colorize::generator::{Generator, GeneratorConfig};
use manga_colorize::pipeline::{colorize, finish, InferenceRequest, Priors};
use manga_colorize::raster;

fn main() -> manga_colorize::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(ckpt) if ckpt != "-" => load_generator(&PathBuf::from(ckpt), DType::F32)?,
        _ => Generator::new(GeneratorConfig::tiny(), &Device::Cpu, DType::F32, 0)?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("colorize-out"));
    std::fs::create_dir_all(&out).map_err(|e| manga_colorize::Error::io(&out, e))?;

    let page = to_grayscale(&synthetic_page(192, 128, 3))?;
    let hints = HintSet::new(
        128,
        192,
        vec![
            Hint {
                x: 40,
                y: 50,
                color: [0.95, 0.45, 0.35],
                radius: 14,
            },
            Hint {
                x: 90,
                y: 140,
                color: [0.25, 0.55, 0.9],
                radius: 18,
            },
        ],
    )?;
    let mut req = InferenceRequest::new(page.clone());
    req.hints = Some(hints);
    req.lambda_ab = BlendWeight::new(0.8)?;

    let result = colorize(&req, &Priors::default(), &model)?;
    raster::save_plane(&page, &out.join("page.png"))?;
    raster::save_plane(&result.x_g, &out.join("x_g.png"))?;
    raster::save_stack(&result.x_col, &out.join("x_col.png"))?;
    raster::save_stack(&result.y_hat, &out.join("y_hat.png"))?;
    raster::save_stack(&result.y, &out.join("y.png"))?;
    println!("Y {:?}, {} pixels gamut-clipped", result.y.dims(), result.clipped);

    // Re-blending reuses the cached stages; no further forward pass.
    for lambda in [0.0, 1.0] {
        let y = finish(&result.y_hat, &result.x_col, BlendWeight::new(lambda)?)?;
        raster::save_stack(&y.image, &out.join(format!("y-{lambda:.1}.png")))?;
    }
    println!("stages written to {}", out.display());
    Ok(())
}
