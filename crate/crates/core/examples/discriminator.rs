//! Patch critic geometry: logit grid size, receptive field, and the hinge
//! loss on a real page against a blurred copy.

use candle_core::{DType, Device};
use manga_colorize::data::synthetic_page;
use manga_colorize::discriminator::{gen_adv_score, hinge_disc_loss, DiscriminatorConfig, PatchDiscriminator};
use manga_colorize::losses::scalar;
use manga_colorize::raster;

fn main() -> manga_colorize::Result<()> {
    let disc = PatchDiscriminator::new(&DiscriminatorConfig::default(), &Device::Cpu, DType::F32, 0)?;
    println!("receptive field {} px", disc.receptive_field());
    for side in [64, 128, 256, 512] {
        println!("{side}x{side} input -> {:?} logit grid", disc.output_size(side));
    }

    let real = synthetic_page(256, 256, 2);
    let fake = raster::resize_stack(&raster::resize_stack(&real, 64, 64)?, 256, 256)?;
    let r = disc.score(&raster::stack_to_tensor(&real, &Device::Cpu, DType::F32)?)?;
    let f = disc.score(&raster::stack_to_tensor(&fake, &Device::Cpu, DType::F32)?)?;
    println!("logits {:?}", r.tensor().dims());
    println!("hinge loss at init {:.4}", scalar(&hinge_disc_loss(&r, &f)?)?);
    println!("generator adversarial score {:.4}", scalar(&gen_adv_score(&f)?)?);
    Ok(())
}
