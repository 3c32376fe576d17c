//! Multi-encoder VAE generator.
//!
//! * main encoder: kl-f8 style encoder over the rough colorization, producing
//!   a diagonal Gaussian posterior. Its parameters are frozen.
//! * auxiliary encoder: the same down path over the shaded grayscale, without
//!   the middle blocks or output head. Each level's features go through a
//!   zero-initialized 1x1 projection.
//! * decoder: kl-f8 style decoder; the projected auxiliary features of level
//!   `i` are added to the output of the decoder's level-`i` block, at the
//!   level's own resolution (before that level's upsample).
//!
//! Parameter names follow the `encoder.* / decoder.*` layout of the kl-f8
//! checkpoints so matching tensors can be imported directly.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::colorspace::{ImagePlane, ImageStack};
use crate::error::{Error, Result};
use crate::nn::{
    seeded_rng, AttnBlock, Conv2d, Downsample, GroupNorm, Init, ParamBuilder, ParamStore,
    ResnetBlock, Upsample,
};
use crate::raster;

pub const LAST_LAYER: &str = "decoder.conv_out.weight";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub latent_channels: usize,
    pub downsample_factor: usize,
    pub input_resolution: usize,
    pub res_blocks_per_level: usize,
    pub norm_groups: usize,
    pub mid_attention: bool,
    /// Initial bias of the log-variance half of the posterior projection.
    /// A strongly negative value gives a freshly built (non-pretrained) frozen
    /// encoder the sharp posterior of a trained one.
    pub posterior_logvar_init: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// kl-f8 topology at reduced width.
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 4],
            latent_channels: 4,
            downsample_factor: 8,
            input_resolution: 256,
            res_blocks_per_level: 1,
            norm_groups: 8,
            mid_attention: true,
            posterior_logvar_init: -8.0,
        }
    }

    /// The full kl-f8 widths.
    pub fn full() -> Self {
        Self {
            base_channels: 128,
            res_blocks_per_level: 2,
            norm_groups: 32,
            ..Self::desk()
        }
    }

    /// Smallest config with the f8 geometry; used by tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            channel_multipliers: vec![1, 1, 2, 2],
            input_resolution: 64,
            norm_groups: 4,
            ..Self::desk()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 {
            return Err(Error::Config("channel_multipliers must not be empty".into()));
        }
        if self.downsample_factor != 1usize << (levels - 1) {
            return Err(Error::Config(format!(
                "downsample_factor {} must equal 2^(levels-1) = {}",
                self.downsample_factor,
                1usize << (levels - 1)
            )));
        }
        if self.latent_channels == 0 || self.base_channels == 0 || self.res_blocks_per_level == 0 {
            return Err(Error::Config("channel and block counts must be >= 1".into()));
        }
        if self.input_resolution % self.downsample_factor != 0 {
            return Err(Error::Config(format!(
                "input_resolution {} not divisible by {}",
                self.input_resolution, self.downsample_factor
            )));
        }
        for l in 0..levels {
            if self.level_channels(l) % self.norm_groups.max(1) != 0 || self.norm_groups == 0 {
                return Err(Error::Config(format!(
                    "level {l} channels {} not divisible by norm_groups {}",
                    self.level_channels(l),
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let f = self.downsample_factor;
        if height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            return Err(Error::shape(format!(
                "input {height}x{width} not divisible by downsample factor {f}"
            )));
        }
        Ok(())
    }
}

/// Posterior `q(z | x_col)` at 1/f resolution, `(N, latent, H/f, W/f)`.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

/// Where the sampling noise of the reparameterization comes from.
#[derive(Debug, Clone)]
pub enum LatentNoise {
    /// Use the posterior mean.
    Deterministic,
    Seed(u64),
    Given(Tensor),
}

/// Projected auxiliary features, one grid per decoder level (index 0 is the
/// full-resolution level).
#[derive(Debug, Clone)]
pub struct SkipStack {
    pub grids: Vec<Tensor>,
}

impl SkipStack {
    pub fn max_abs(&self) -> Result<f64> {
        let mut m = 0f64;
        for g in &self.grids {
            let v: f64 = g.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar()?;
            m = m.max(v);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Deterministic,
}

#[derive(Debug, Clone)]
struct DownLevel {
    blocks: Vec<ResnetBlock>,
    down: Option<Downsample>,
}

fn build_down_path(
    b: &mut ParamBuilder,
    cfg: &GeneratorConfig,
    in_channels: usize,
) -> Result<(Conv2d, Vec<DownLevel>)> {
    let conv_in = Conv2d::new(&mut b.pp("conv_in"), in_channels, cfg.base_channels, 3, 1, 1)?;
    let mut levels = Vec::new();
    let mut c = cfg.base_channels;
    for l in 0..cfg.levels() {
        let c_out = cfg.level_channels(l);
        let mut lb = b.pp(format!("down.{l}"));
        let mut blocks = Vec::new();
        for i in 0..cfg.res_blocks_per_level {
            blocks.push(ResnetBlock::new(
                &mut lb.pp(format!("block.{i}")),
                cfg.norm_groups,
                c,
                c_out,
            )?);
            c = c_out;
        }
        let down = if l + 1 < cfg.levels() {
            Some(Downsample::new(&mut lb.pp("downsample"), c)?)
        } else {
            None
        };
        levels.push(DownLevel { blocks, down });
    }
    Ok((conv_in, levels))
}

#[derive(Debug, Clone)]
struct MidBlock {
    block_1: ResnetBlock,
    attn_1: Option<AttnBlock>,
    block_2: ResnetBlock,
}

impl MidBlock {
    fn new(b: &mut ParamBuilder, cfg: &GeneratorConfig, c: usize) -> Result<Self> {
        Ok(Self {
            block_1: ResnetBlock::new(&mut b.pp("block_1"), cfg.norm_groups, c, c)?,
            attn_1: if cfg.mid_attention {
                Some(AttnBlock::new(&mut b.pp("attn_1"), cfg.norm_groups, c)?)
            } else {
                None
            },
            block_2: ResnetBlock::new(&mut b.pp("block_2"), cfg.norm_groups, c, c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.block_1.forward(x)?;
        if let Some(a) = &self.attn_1 {
            h = a.forward(&h)?;
        }
        self.block_2.forward(&h)
    }
}

#[derive(Debug, Clone)]
struct MainEncoder {
    conv_in: Conv2d,
    levels: Vec<DownLevel>,
    mid: MidBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    quant_conv: Conv2d,
}

#[derive(Debug, Clone)]
struct AuxEncoder {
    conv_in: Conv2d,
    levels: Vec<DownLevel>,
    proj: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    blocks: Vec<ResnetBlock>,
    up: Option<Upsample>,
}

#[derive(Debug, Clone)]
struct Decoder {
    post_quant_conv: Conv2d,
    conv_in: Conv2d,
    mid: MidBlock,
    /// Indexed by level; run from the deepest level upward.
    levels: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamStore,
    encoder: MainEncoder,
    aux: AuxEncoder,
    decoder: Decoder,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(device.clone(), dtype);
        let mut rng = seeded_rng(seed);
        let mut root = params.builder(&mut rng);
        let levels = cfg.levels();
        let top = cfg.level_channels(levels - 1);
        let z = cfg.latent_channels;

        let encoder = {
            let mut b = root.pp("encoder").frozen(true);
            let (conv_in, down) = build_down_path(&mut b, &cfg, 3)?;
            let mid = MidBlock::new(&mut b.pp("mid"), &cfg, top)?;
            let norm_out = GroupNorm::new(&mut b.pp("norm_out"), cfg.norm_groups, top)?;
            let conv_out = Conv2d::new(&mut b.pp("conv_out"), top, 2 * z, 3, 1, 1)?;
            let mut qb = root.pp("quant_conv").frozen(true);
            let weight = qb.param("weight", &[2 * z, 2 * z, 1, 1], Init::Uniform { fan_in: 2 * z })?;
            let bias_vals: Vec<f64> = (0..2 * z)
                .map(|i| if i < z { 0.0 } else { cfg.posterior_logvar_init })
                .collect();
            let bias = qb.param_values("bias", &[2 * z], bias_vals)?;
            MainEncoder {
                conv_in,
                levels: down,
                mid,
                norm_out,
                conv_out,
                quant_conv: Conv2d {
                    weight,
                    bias: Some(bias),
                    stride: 1,
                    padding: 0,
                },
            }
        };

        let aux = {
            let mut b = root.pp("aux_encoder");
            let (conv_in, down) = build_down_path(&mut b, &cfg, 1)?;
            let proj = (0..levels)
                .map(|l| {
                    let c = cfg.level_channels(l);
                    Conv2d::zero_1x1(&mut b.pp(format!("proj.{l}")), c, c)
                })
                .collect::<Result<Vec<_>>>()?;
            AuxEncoder {
                conv_in,
                levels: down,
                proj,
            }
        };

        let decoder = {
            let post_quant_conv = Conv2d::new(&mut root.pp("post_quant_conv"), z, z, 1, 1, 0)?;
            let mut b = root.pp("decoder");
            let conv_in = Conv2d::new(&mut b.pp("conv_in"), z, top, 3, 1, 1)?;
            let mid = MidBlock::new(&mut b.pp("mid"), &cfg, top)?;
            let mut ups: Vec<Option<UpLevel>> = vec![None; levels];
            let mut c = top;
            for l in (0..levels).rev() {
                let c_out = cfg.level_channels(l);
                let mut lb = b.pp(format!("up.{l}"));
                let mut blocks = Vec::new();
                for i in 0..=cfg.res_blocks_per_level {
                    blocks.push(ResnetBlock::new(
                        &mut lb.pp(format!("block.{i}")),
                        cfg.norm_groups,
                        c,
                        c_out,
                    )?);
                    c = c_out;
                }
                let up = if l > 0 {
                    Some(Upsample::new(&mut lb.pp("upsample"), c)?)
                } else {
                    None
                };
                ups[l] = Some(UpLevel { blocks, up });
            }
            let c0 = cfg.level_channels(0);
            let norm_out = GroupNorm::new(&mut b.pp("norm_out"), cfg.norm_groups, c0)?;
            let conv_out = Conv2d::new(&mut b.pp("conv_out"), c0, 3, 3, 1, 1)?;
            Decoder {
                post_quant_conv,
                conv_in,
                mid,
                levels: ups.into_iter().map(|u| u.expect("every level built")).collect(),
                norm_out,
                conv_out,
            }
        };

        Ok(Self {
            cfg,
            params,
            encoder,
            aux,
            decoder,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Weight of the decoder's output convolution.
    pub fn last_layer(&self) -> &Var {
        &self.params.get(LAST_LAYER).expect("decoder.conv_out exists").var
    }

    /// Digest of the frozen main-encoder parameters.
    pub fn encoder_digest(&self) -> Result<String> {
        self.params.frozen_digest()
    }

    /// `x_col`: `(N, 3, H, W)` signed.
    pub fn encode(&self, x_col: &Tensor) -> Result<LatentDistribution> {
        let (_, c, h, w) = x_col.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("encoder expects 3 channels, got {c}")));
        }
        self.cfg.check_dims(h, w)?;
        let e = &self.encoder;
        let mut x = e.conv_in.forward(&x_col.detach())?;
        for level in &e.levels {
            for b in &level.blocks {
                x = b.forward(&x)?;
            }
            if let Some(d) = &level.down {
                x = d.forward(&x)?;
            }
        }
        x = e.mid.forward(&x)?;
        x = e.conv_out.forward(&e.norm_out.forward(&x)?.silu()?)?;
        let moments = e.quant_conv.forward(&x)?;
        let z = self.cfg.latent_channels;
        let mean = moments.narrow(1, 0, z)?.contiguous()?;
        let log_variance = moments.narrow(1, z, z)?.clamp(-30.0, 20.0)?.contiguous()?;
        Ok(LatentDistribution { mean, log_variance })
    }

    /// `x_g`: `(N, 1, H, W)` signed.
    pub fn encode_aux(&self, x_g: &Tensor) -> Result<SkipStack> {
        let (_, c, h, w) = x_g.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("auxiliary encoder expects 1 channel, got {c}")));
        }
        self.cfg.check_dims(h, w)?;
        let a = &self.aux;
        let mut x = a.conv_in.forward(x_g)?;
        let mut grids = Vec::with_capacity(a.levels.len());
        for (level, proj) in a.levels.iter().zip(&a.proj) {
            for b in &level.blocks {
                x = b.forward(&x)?;
            }
            grids.push(proj.forward(&x)?);
            if let Some(d) = &level.down {
                x = d.forward(&x)?;
            }
        }
        Ok(SkipStack { grids })
    }

    pub fn decode(&self, z: &Tensor, skips: &SkipStack) -> Result<Tensor> {
        let h = self.decode_features(z, skips)?;
        self.decoder.conv_out.forward(&h)
    }

    /// Decoder activations entering the output convolution.
    pub fn decode_features(&self, z: &Tensor, skips: &SkipStack) -> Result<Tensor> {
        let (n, zc, zh, zw) = z.dims4()?;
        if zc != self.cfg.latent_channels {
            return Err(Error::shape(format!(
                "latent has {zc} channels, expected {}",
                self.cfg.latent_channels
            )));
        }
        let levels = self.cfg.levels();
        if skips.grids.len() != levels {
            return Err(Error::shape(format!(
                "skip stack has {} grids, decoder has {levels} levels",
                skips.grids.len()
            )));
        }
        for (l, g) in skips.grids.iter().enumerate() {
            let scale = 1usize << (levels - 1 - l);
            let want = (n, self.cfg.level_channels(l), zh * scale, zw * scale);
            if g.dims4()? != want {
                return Err(Error::shape(format!(
                    "skip grid {l} is {:?}, expected {want:?}",
                    g.dims()
                )));
            }
        }
        let d = &self.decoder;
        let mut x = d.conv_in.forward(&d.post_quant_conv.forward(z)?)?;
        x = d.mid.forward(&x)?;
        for l in (0..levels).rev() {
            let level = &d.levels[l];
            for b in &level.blocks {
                x = b.forward(&x)?;
            }
            x = (x + &skips.grids[l])?;
            if let Some(u) = &level.up {
                x = u.forward(&x)?;
            }
        }
        Ok(d.norm_out.forward(&x)?.silu()?)
    }

    /// Applies only the output convolution to `features` (typically detached
    /// [`Generator::decode_features`] output), so a backward pass from the
    /// result reaches the last-layer weight and nothing upstream.
    pub fn last_layer_forward(&self, features: &Tensor) -> Result<Tensor> {
        self.decoder.conv_out.forward(features)
    }

    pub fn forward(&self, x_col: &Tensor, x_g: &Tensor, noise: LatentNoise) -> Result<Tensor> {
        let dist = self.encode(x_col)?;
        let z = sample_latent(&dist, noise)?;
        let skips = self.encode_aux(x_g)?;
        self.decode(&z, &skips)
    }

    /// Raster-level forward: returns the generator output as a signed sRGB
    /// stack with the input's dimensions.
    pub fn forward_images(
        &self,
        x_col: &ImageStack,
        x_g: &ImagePlane,
        mode: ForwardMode,
        seed: u64,
    ) -> Result<ImageStack> {
        if x_col.dims() != x_g.dims() {
            return Err(Error::shape(format!(
                "x_col {:?} vs x_g {:?}",
                x_col.dims(),
                x_g.dims()
            )));
        }
        let xc = raster::stack_to_tensor(x_col, self.device(), self.dtype())?;
        let xg = raster::plane_to_tensor(x_g, self.device(), self.dtype())?;
        let noise = match mode {
            ForwardMode::Train => LatentNoise::Seed(seed),
            ForwardMode::Deterministic => LatentNoise::Deterministic,
        };
        let y = self.forward(&xc, &xg, noise)?;
        Ok(raster::tensor_to_stacks(&y)?.remove(0))
    }

    /// Copies tensors with matching names and shapes from a safetensors
    /// archive (e.g. kl-f8 first-stage weights). Returns how many were loaded.
    pub fn import_weights(&self, path: &Path) -> Result<usize> {
        let loaded = candle_core::safetensors::load(path, self.device())?;
        let mut n = 0;
        for (name, p) in self.params.iter() {
            let key = [name.to_string(), format!("first_stage_model.{name}")]
                .into_iter()
                .find(|k| loaded.contains_key(k));
            if let Some(t) = key.and_then(|k| loaded.get(&k)) {
                if t.dims() == p.var.dims() {
                    p.var.set(&t.to_dtype(self.dtype())?)?;
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    pub fn load_values(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        self.params.assign(values)
    }
}

/// Reparameterized sample `mean + exp(0.5 * log_variance) * eps`.
pub fn sample_latent(dist: &LatentDistribution, noise: LatentNoise) -> Result<Tensor> {
    if dist.mean.dims() != dist.log_variance.dims() {
        return Err(Error::shape("posterior mean and log-variance differ in shape"));
    }
    let eps = match noise {
        LatentNoise::Deterministic => return Ok(dist.mean.clone()),
        LatentNoise::Seed(seed) => standard_normal(dist.mean.dims(), seed, dist.mean.device())?
            .to_dtype(dist.mean.dtype())?,
        LatentNoise::Given(t) => {
            if t.dims() != dist.mean.dims() {
                return Err(Error::shape(format!(
                    "noise {:?} vs posterior {:?}",
                    t.dims(),
                    dist.mean.dims()
                )));
            }
            t.to_dtype(dist.mean.dtype())?
        }
    };
    let std = (&dist.log_variance * 0.5)?.exp()?;
    Ok((&dist.mean + std.mul(&eps)?)?)
}

/// Seeded `N(0, 1)` tensor, independent of candle's global RNG.
pub fn standard_normal(shape: &[usize], seed: u64, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?)
}
