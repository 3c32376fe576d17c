//! Chroma blending on its own: a generator-like output and a rough
//! colorization, mixed in CIELAB at a sweep of `lambda_ab` values.
//!
//! ```text
//! cargo run --example blend -- [out_dir]
//! ```

use std::path::PathBuf;

use manga_colorize::colorspace::{blend_chroma, lab_to_rgb, rgb_to_lab, BlendWeight, ImageStack};
use manga_colorize::data::synthetic_page;
use manga_colorize::raster;

fn main() -> manga_colorize::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("blend-out"));
    std::fs::create_dir_all(&out).map_err(|e| manga_colorize::Error::io(&out, e))?;

    let y_hat = synthetic_page(128, 128, 1);
    let x_col = ImageStack::from_fn(128, 128, |y, x| [x as f64 / 127.0, 0.4, y as f64 / 127.0])?;
    let (y_lab, c_lab) = (rgb_to_lab(&y_hat)?, rgb_to_lab(&x_col)?);

    for lambda in [0.0, 0.25, 0.5, 0.8, 1.0] {
        let mixed = blend_chroma(&y_lab, &c_lab, BlendWeight::new(lambda)?)?;
        let mean_chroma = mixed
            .pixels()
            .map(|p| (p[1] * p[1] + p[2] * p[2]).sqrt())
            .sum::<f64>()
            / (128.0 * 128.0);
        let rgb = lab_to_rgb(&mixed)?;
        let path = out.join(format!("blend-{lambda:.2}.png"));
        raster::save_stack(&rgb.image, &path)?;
        println!(
            "lambda_ab {lambda:.2}: mean chroma {mean_chroma:6.2}, {} pixels clipped -> {}",
            rgb.clipped,
            path.display()
        );
    }
    Ok(())
}
