//! Patch critic and its hinge objective.
//!
//! Three stride-2 convolutions and a stride-1 head give every output score a
//! 64x64 receptive field:
//!
//! | layer | kernel | stride | pad |
//! |-------|--------|--------|-----|
//! | conv1 | 6      | 2      | 2   |
//! | conv2 | 4      | 2      | 1   |
//! | conv3 | 4      | 2      | 1   |
//! | head  | 6      | 1      | 0   |
//!
//! No normalization layers: batch or instance statistics would couple scores
//! to pixels outside their field.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, seeded_rng, Conv2d, ParamStore};

pub const PATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64 }
    }
}

/// Per-patch critic scores, `(N, 1, h, w)`.
#[derive(Debug, Clone)]
pub struct PatchLogits(pub Tensor);

impl PatchLogits {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    params: ParamStore,
    layers: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn new(cfg: &DiscriminatorConfig, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        if cfg.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be >= 1".into()));
        }
        let mut params = ParamStore::new(device.clone(), dtype);
        let mut rng = seeded_rng(seed);
        let mut root = params.builder(&mut rng);
        let mut b = root.pp("discriminator");
        let c = cfg.base_channels;
        let layers = vec![
            Conv2d::new(&mut b.pp("conv1"), 3, c, 6, 2, 2)?,
            Conv2d::new(&mut b.pp("conv2"), c, 2 * c, 4, 2, 1)?,
            Conv2d::new(&mut b.pp("conv3"), 2 * c, 4 * c, 4, 2, 1)?,
            Conv2d::new(&mut b.pp("head"), 4 * c, 1, 6, 1, 0)?,
        ];
        Ok(Self { params, layers })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Receptive field side length of one score, in input pixels.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.layers {
            rf += (l.kernel() - 1) * jump;
            jump *= l.stride;
        }
        rf
    }

    /// Inclusive input-pixel span `[start, end]` (possibly extending into the
    /// padding) that feeds score index `i` along one axis.
    pub fn receptive_window(&self, i: usize) -> (isize, isize) {
        let mut jump = 1isize;
        let mut offset = 0isize;
        for l in &self.layers {
            offset += l.padding as isize * jump;
            jump *= l.stride as isize;
        }
        let start = i as isize * jump - offset;
        (start, start + self.receptive_field() as isize - 1)
    }

    /// Spatial size of the logit grid for an input side length.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let mut n = input as isize;
        for l in &self.layers {
            n = (n + 2 * l.padding as isize - l.kernel() as isize) / l.stride as isize + 1;
            if n < 1 {
                return None;
            }
        }
        Some(n as usize)
    }

    /// `img`: `(N, 3, H, W)` in the model's signed range.
    pub fn score(&self, img: &Tensor) -> Result<PatchLogits> {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("discriminator expects 3 channels, got {c}")));
        }
        if self.output_size(h).is_none() || self.output_size(w).is_none() {
            return Err(Error::shape(format!("input {h}x{w} too small for the patch critic")));
        }
        let mut x = img.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i < last {
                x = leaky_relu(&x, 0.2)?;
            }
        }
        Ok(PatchLogits(x))
    }
}

fn check_same(real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.dims() != fake.dims() {
        return Err(Error::shape(format!(
            "real logits {:?} vs fake logits {:?}",
            real.dims(),
            fake.dims()
        )));
    }
    Ok(())
}

/// `0.5 * mean(relu(1 - real)) + 0.5 * mean(relu(1 + fake))`, before gating.
pub fn hinge_disc_loss(real: &PatchLogits, fake: &PatchLogits) -> Result<Tensor> {
    check_same(&real.0, &fake.0)?;
    let r = (1.0 - &real.0)?.relu()?.mean_all()?;
    let f = (&fake.0 + 1.0)?.relu()?.mean_all()?;
    Ok(((r + f)? * 0.5)?)
}

/// Unweighted generator adversarial score, `-mean(fake)`.
pub fn gen_adv_score(fake: &PatchLogits) -> Result<Tensor> {
    Ok(fake.0.mean_all()?.neg()?)
}
