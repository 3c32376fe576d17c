//! Training loop, inference procedure, evaluation and gradient checking.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::colorspace::{
    blend_chroma, lab_to_rgb, rgb_to_lab, BlendWeight, GamutMapped, ImagePlane, ImageStack,
    ValueRange,
};
use crate::data::{
    epoch_order, synthesize_pair_with, DatasetManifest, HintSet, PrepareConfig, SamplePair, Split,
};
use crate::discriminator::{gen_adv_score, DiscriminatorConfig, PatchDiscriminator};
use crate::error::{Error, Result};
use crate::generator::{sample_latent, ForwardMode, Generator, GeneratorConfig, LatentNoise};
use crate::losses::{
    discriminator_objective, gate, generator_objective, l1_loss, perceptual_loss, scalar,
    AdaptiveTarget, GradNorms, LossBreakdown, LossConfig, PerceptualBackbone,
    RandomFeatureBackbone,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::priors::{
    run_rough_color, run_shading, DegradationConfig, HintTintPrior, IdentityShading,
    RoughColorPrior, ShadingPrior,
};
use crate::raster;

pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    /// bf16 autocast. Not available on the CPU backend.
    pub mixed_precision: bool,
    pub loss: LossConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub degradation: DegradationConfig,
    pub prepare: PrepareConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4.5e-6,
            beta1: 0.9,
            beta2: 0.5,
            weight_decay: 1e-2,
            batch_size: 4,
            max_steps: 290_000,
            seed: 0,
            checkpoint_interval: 5000,
            mixed_precision: false,
            loss: LossConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            degradation: DegradationConfig::default(),
            prepare: PrepareConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Tiny model on 64x64 crops with the adversarial terms switched off;
    /// small enough to overfit a handful of images in minutes on a CPU.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-3,
            beta2: 0.99,
            batch_size: 2,
            max_steps: 2000,
            checkpoint_interval: 500,
            loss: LossConfig {
                lambda_psi_start: i64::MAX as u64,
                ..LossConfig::default()
            },
            generator: GeneratorConfig::tiny(),
            discriminator: DiscriminatorConfig { base_channels: 16 },
            prepare: PrepareConfig {
                short_side: 64,
                crop_size: 64,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixed_precision {
            return Err(Error::Unsupported(
                "mixed precision: bf16 matmul is not implemented on the CPU backend".into(),
            ));
        }
        let rates = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("beta1 and beta2 must be < 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be >= 1".into()));
        }
        self.loss.validate()?;
        self.generator.validate()?;
        self.degradation.validate()?;
        self.generator
            .check_dims(self.prepare.crop_size, self.prepare.crop_size)
            .map_err(|e| Error::Config(format!("crop_size: {e}")))?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// SplitMix64 over the parts; used to derive independent per-step streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x = 0x853C_49E6_748F_EA9Bu64;
    for &p in parts {
        x ^= p;
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

const NOISE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const DISC_STREAM: u64 = 3;

pub fn default_backbone(device: &Device, dtype: DType) -> Result<Arc<dyn PerceptualBackbone>> {
    Ok(Arc::new(RandomFeatureBackbone::new(0, device, dtype)?))
}

/// Everything a training run mutates. Randomness is derived from
/// `(config.seed, step)`, so no generator state needs saving.
pub struct TrainState {
    pub step: u64,
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: PatchDiscriminator,
    pub(crate) gen_opt: AdamW,
    pub(crate) disc_opt: AdamW,
    backbone: Arc<dyn PerceptualBackbone>,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("step", &self.step)
            .field("backbone", &self.backbone.id())
            .finish_non_exhaustive()
    }
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let backbone = default_backbone(&Device::Cpu, DType::F32)?;
        Self::with_backbone(config, backbone)
    }

    pub fn with_backbone(config: TrainConfig, backbone: Arc<dyn PerceptualBackbone>) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let generator = Generator::new(config.generator.clone(), &device, DType::F32, config.seed)?;
        let discriminator = PatchDiscriminator::new(
            &config.discriminator,
            &device,
            DType::F32,
            derive_seed(&[config.seed, DISC_STREAM]),
        )?;
        let gen_opt = AdamW::new(generator.params().trainable(), config.optimizer())?;
        let disc_opt = AdamW::new(discriminator.params().trainable(), config.optimizer())?;
        Ok(Self {
            step: 0,
            config,
            generator,
            discriminator,
            gen_opt,
            disc_opt,
            backbone,
        })
    }

    pub fn backbone(&self) -> &dyn PerceptualBackbone {
        self.backbone.as_ref()
    }

    pub fn generator_optimizer(&self) -> &AdamW {
        &self.gen_opt
    }

    pub fn discriminator_optimizer(&self) -> &AdamW {
        &self.disc_opt
    }
}

/// Gradients of the reconstruction loss (`L1 + L_p`) and of the unweighted
/// adversarial score at the comparison point selected by
/// `cfg.adaptive_target`.
///
/// `y_hat` must be `generator.last_layer_forward(features)`.
pub fn adaptive_gradients(
    generator: &Generator,
    discriminator: &PatchDiscriminator,
    backbone: &dyn PerceptualBackbone,
    y: &Tensor,
    y_hat: &Tensor,
    features: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, Tensor)> {
    let leaf = Var::from_tensor(&y_hat.detach())?;
    let out = leaf.as_tensor();
    let missing = || Error::contract("loss does not depend on the generator output");
    let rec = (l1_loss(&y.detach(), out)? + perceptual_loss(&y.detach(), out, backbone, cfg)?)?;
    let g_rec = rec.backward()?.get(out).cloned().ok_or_else(missing)?;
    let adv = gen_adv_score(&discriminator.score(out)?)?;
    let g_adv = adv.backward()?.get(out).cloned().ok_or_else(missing)?;
    match cfg.adaptive_target {
        AdaptiveTarget::LastLayerOutput => Ok((g_rec, g_adv)),
        AdaptiveTarget::LastLayerWeights => {
            let y_lin = generator.last_layer_forward(&features.detach())?;
            let w = generator.last_layer().as_tensor();
            let vjp = |g: &Tensor| -> Result<Tensor> {
                let s = (&y_lin * g)?.sum_all()?;
                s.backward()?.get(w).cloned().ok_or_else(missing)
            };
            Ok((vjp(&g_rec)?, vjp(&g_adv)?))
        }
    }
}

fn l2_norm(t: &Tensor) -> Result<f64> {
    scalar(&t.sqr()?.sum_all()?.sqrt()?)
}

pub fn adaptive_grad_norms(
    generator: &Generator,
    discriminator: &PatchDiscriminator,
    backbone: &dyn PerceptualBackbone,
    y: &Tensor,
    y_hat: &Tensor,
    features: &Tensor,
    cfg: &LossConfig,
) -> Result<GradNorms> {
    let (r, a) = adaptive_gradients(generator, discriminator, backbone, y, y_hat, features, cfg)?;
    Ok(GradNorms {
        reconstruction: l2_norm(&r)?,
        adversarial: l2_norm(&a)?,
    })
}

/// One optimization step: generator update, then (when the gate is open) a
/// separate discriminator update on the detached output.
///
/// On a non-finite loss nothing is updated and the step counter is left as is.
pub fn train_step(state: &mut TrainState, batch: &[SamplePair]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let step = state.step + 1;
    let cfg = &state.config;
    let gen = &state.generator;
    let disc = &state.discriminator;
    let backbone = state.backbone.as_ref();
    let (device, dtype) = (gen.device().clone(), gen.dtype());

    let y = raster::stacks_to_tensor(&batch.iter().map(|p| &p.y_true).collect::<Vec<_>>(), &device, dtype)?;
    let x_col = raster::stacks_to_tensor(&batch.iter().map(|p| &p.x_col).collect::<Vec<_>>(), &device, dtype)?;
    let x_g = raster::planes_to_tensor(&batch.iter().map(|p| &p.x_g).collect::<Vec<_>>(), &device, dtype)?;

    let dist = gen.encode(&x_col)?;
    let z = sample_latent(&dist, LatentNoise::Seed(derive_seed(&[cfg.seed, NOISE_STREAM, step])))?;
    let skips = gen.encode_aux(&x_g)?;
    let features = gen.decode_features(&z, &skips)?;
    let y_hat = gen.last_layer_forward(&features)?;

    let (objective, disc_loss) = if gate(step, &cfg.loss) == 0 {
        let o = generator_objective(&y, &y_hat, None, step, backbone, None, &cfg.loss)?;
        (o, None)
    } else {
        let norms = adaptive_grad_norms(gen, disc, backbone, &y, &y_hat, &features, &cfg.loss)?;
        let fake = disc.score(&y_hat)?;
        let o = generator_objective(&y, &y_hat, Some(&fake), step, backbone, Some(norms), &cfg.loss)?;
        let real = disc.score(&y)?;
        let fake_detached = disc.score(&y_hat.detach())?;
        let d = discriminator_objective(&real, &fake_detached, step, &cfg.loss)?;
        (o, Some(d))
    };
    let mut breakdown = objective.breakdown;
    if let Some(d) = &disc_loss {
        breakdown.adv_disc = scalar(d)?;
    }
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss { step, breakdown });
    }

    let grads = objective.total.backward()?;
    state.gen_opt.step(&grads)?;
    if let Some(d) = disc_loss {
        state.disc_opt.step(&d.backward()?)?;
    }
    state.step = step;
    Ok(breakdown)
}

/// The training pairs of `step` (1-based): consecutive positions of the
/// per-epoch shuffled order. A pure function of the inputs.
pub fn batch_for_step(images: &[(String, ImageStack)], cfg: &TrainConfig, step: u64) -> Result<Vec<SamplePair>> {
    let n = images.len();
    if n == 0 {
        return Err(Error::Dataset("no training images".into()));
    }
    let b = cfg.batch_size as u64;
    (0..b)
        .map(|j| {
            let pos = (step - 1) * b + j;
            let epoch = pos / n as u64;
            let idx = epoch_order(n, cfg.seed, epoch)[(pos % n as u64) as usize];
            let seed = derive_seed(&[cfg.seed, SAMPLE_STREAM, epoch, idx as u64]);
            let deg = DegradationConfig {
                seed: derive_seed(&[cfg.degradation.seed, seed]),
                ..cfg.degradation.clone()
            };
            let (id, img) = &images[idx];
            synthesize_pair_with(img, &deg, seed, &cfg.prepare, id)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints and the training log go here; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

fn at_step(step: u64) -> impl Fn(Error) -> Error {
    move |e| Error::AtStep {
        step,
        source: Box::new(e),
    }
}

fn load_train_images(manifest: &DatasetManifest) -> Result<Vec<(String, ImageStack)>> {
    let images: Vec<_> = manifest.load_split(Split::Train)?.into_iter().collect();
    if images.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    Ok(images)
}

/// Runs [`train_step`] up to `config.max_steps`, checkpointing every
/// `checkpoint_interval` steps and at the end. Steps with a non-finite loss
/// are logged and skipped.
pub fn train(config: TrainConfig, manifest: &DatasetManifest, opts: &TrainOptions) -> Result<TrainState> {
    let mut state = match &opts.resume {
        Some(path) => {
            let mut s = checkpoint::load_checkpoint(path)?;
            if s.config.hash() != config.hash() {
                let max_only = TrainConfig {
                    max_steps: s.config.max_steps,
                    ..config.clone()
                };
                if max_only.hash() != s.config.hash() {
                    return Err(Error::Config(format!(
                        "config differs from the one stored in {}",
                        path.display()
                    )));
                }
                s.config.max_steps = config.max_steps;
            }
            s
        }
        None => TrainState::new(config)?,
    };
    let images = load_train_images(manifest)?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            let p = dir.join(TRAIN_LOG);
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?,
            )
        }
        None => None,
    };
    while state.step < state.config.max_steps {
        let step = state.step + 1;
        let batch = batch_for_step(&images, &state.config, step).map_err(at_step(step))?;
        let record = match train_step(&mut state, &batch) {
            Ok(b) => b,
            Err(Error::NonFiniteLoss { step, breakdown }) => {
                warn!("skipping step {step}: non-finite loss {breakdown:?}");
                state.step = step;
                breakdown
            }
            Err(e) => return Err(at_step(step)(e)),
        };
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| at_step(step)(Error::io(TRAIN_LOG, e)))?;
        }
        if step % 100 == 0 || step == 1 {
            info!(
                "step {step}: l1 {:.4} perceptual {:.4} adv {:.4} disc {:.4}",
                record.l1, record.perceptual, record.adv_gen, record.adv_disc
            );
        }
        let due = step % state.config.checkpoint_interval == 0 || step == state.config.max_steps;
        if let (true, Some(dir)) = (due, &opts.out_dir) {
            checkpoint::save_checkpoint(&state, &checkpoint::checkpoint_path(dir, step))
                .map_err(at_step(step))?;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub page: ImagePlane,
    pub hints: Option<HintSet>,
    pub reference: Option<ImageStack>,
    pub lambda_ab: BlendWeight,
    pub deterministic: bool,
    pub seed: u64,
}

impl InferenceRequest {
    pub fn new(page: ImagePlane) -> Self {
        Self {
            page,
            hints: None,
            reference: None,
            lambda_ab: BlendWeight::default(),
            deterministic: true,
            seed: 0,
        }
    }
}

/// The two prior stages used at inference time.
#[derive(Clone)]
pub struct Priors {
    pub shading: Arc<dyn ShadingPrior>,
    pub rough_color: Arc<dyn RoughColorPrior>,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            shading: Arc::new(IdentityShading),
            rough_color: Arc::new(HintTintPrior),
        }
    }
}

/// Result of the inference procedure with its intermediate stages.
#[derive(Debug, Clone)]
pub struct Colorized {
    /// Final sRGB output in `[0, 1]`.
    pub y: ImageStack,
    pub x_g: ImagePlane,
    pub x_col: ImageStack,
    /// Raw generator output, sRGB in `[0, 1]`.
    pub y_hat: ImageStack,
    /// Pixels clipped back into the sRGB gamut.
    pub clipped: usize,
}

/// Chroma blend of the generator output with the rough colorization, back in
/// sRGB. Luminance comes from `y_hat`.
pub fn finish(y_hat: &ImageStack, x_col: &ImageStack, lambda_ab: BlendWeight) -> Result<GamutMapped> {
    let y_lab = rgb_to_lab(&y_hat.to_range(ValueRange::Unit)?)?;
    let c_lab = rgb_to_lab(&x_col.to_range(ValueRange::Unit)?)?;
    lab_to_rgb(&blend_chroma(&y_lab, &c_lab, lambda_ab)?)
}

pub fn colorize(req: &InferenceRequest, priors: &Priors, model: &Generator) -> Result<Colorized> {
    let (h, w) = req.page.dims();
    model.config().check_dims(h, w)?;
    if let Some(hints) = &req.hints {
        if (hints.height() as usize, hints.width() as usize) != (h, w) {
            return Err(Error::shape(format!(
                "hints are for a {}x{} page, image is {h}x{w}",
                hints.height(),
                hints.width()
            )));
        }
    }
    let page = req.page.to_range(ValueRange::Unit)?;
    let x_g = run_shading(priors.shading.as_ref(), &page)?;
    let x_col = run_rough_color(priors.rough_color.as_ref(), &page, req.hints.as_ref(), req.reference.as_ref())?;
    let mode = if req.deterministic {
        ForwardMode::Deterministic
    } else {
        ForwardMode::Train
    };
    let y_hat = model
        .forward_images(&x_col.to_range(ValueRange::Unit)?, &x_g.to_range(ValueRange::Unit)?, mode, req.seed)?
        .to_range(ValueRange::Unit)?;
    let GamutMapped { image, clipped } = finish(&y_hat, &x_col, req.lambda_ab)?;
    Ok(Colorized {
        y: image,
        x_g,
        x_col,
        y_hat,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: Split,
    pub degradation: DegradationConfig,
    pub prepare: PrepareConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Eval,
            degradation: DegradationConfig::default(),
            prepare: PrepareConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub images: usize,
    /// Mean absolute error in the signed model range.
    pub mean_l1: f64,
    pub mean_perceptual: f64,
}

/// Mean L1 and perceptual distance between the `lambda_ab = 0` output and the
/// ground truth, with the training-time stand-ins providing `x_g`, `x_col`.
pub fn evaluate(model: &Generator, manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<EvalMetrics> {
    let entries: Vec<_> = manifest.split(cfg.split).collect();
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{:?} split is empty", cfg.split)));
    }
    let backbone = default_backbone(model.device(), model.dtype())?;
    let (mut l1_sum, mut lp_sum) = (0.0, 0.0);
    for (i, entry) in entries.iter().enumerate() {
        let img = manifest.load_image(entry)?;
        let seed = derive_seed(&[cfg.seed, i as u64]);
        let deg = DegradationConfig {
            seed: derive_seed(&[cfg.degradation.seed, seed]),
            ..cfg.degradation.clone()
        };
        let pair = synthesize_pair_with(&img, &deg, seed, &cfg.prepare, &entry.path)?;
        let y_hat = model.forward_images(&pair.x_col, &pair.x_g, ForwardMode::Deterministic, 0)?;
        let y = finish(&y_hat, &pair.x_col, BlendWeight::new(0.0)?)?.image;
        let t_y = raster::stack_to_tensor(&y, model.device(), model.dtype())?;
        let t_true = raster::stack_to_tensor(&pair.y_true, model.device(), model.dtype())?;
        l1_sum += scalar(&l1_loss(&t_true, &t_y)?)?;
        lp_sum += scalar(&backbone.distance(&t_true, &t_y)?)?;
    }
    let n = entries.len() as f64;
    Ok(EvalMetrics {
        images: entries.len(),
        mean_l1: l1_sum / n,
        mean_perceptual: lp_sum / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    /// Side length of the square probe input.
    pub size: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::tiny(),
            discriminator: DiscriminatorConfig { base_channels: 8 },
            loss: LossConfig::default(),
            size: 48,
            step_size: 1e-5,
            seed: 0,
        }
    }
}

impl From<&TrainConfig> for GradcheckConfig {
    fn from(t: &TrainConfig) -> Self {
        Self {
            generator: t.generator.clone(),
            discriminator: t.discriminator.clone(),
            loss: t.loss.clone(),
            seed: t.seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    /// Number of last-layer weights probed.
    pub entries: usize,
    pub reconstruction_norm: f64,
    pub adversarial_norm: f64,
    pub reconstruction_norm_fd: f64,
    pub adversarial_norm_fd: f64,
    /// `|g_auto - g_fd| / max(|g_auto|, |g_fd|)` per loss term.
    pub reconstruction_rel_error: f64,
    pub adversarial_rel_error: f64,
    pub adaptive_weight: f64,
    pub adaptive_weight_fd: f64,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.reconstruction_rel_error.max(self.adversarial_rel_error)
    }
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares the autodiff last-layer gradients used by the adaptive weight
/// with central finite differences of the full forward pass, in f64.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let device = Device::Cpu;
    let gen = Generator::new(cfg.generator.clone(), &device, DType::F64, cfg.seed)?;
    let disc = PatchDiscriminator::new(&cfg.discriminator, &device, DType::F64, derive_seed(&[cfg.seed, DISC_STREAM]))?;
    let backbone = RandomFeatureBackbone::new(0, &device, DType::F64)?;
    let loss = LossConfig {
        adaptive_target: AdaptiveTarget::LastLayerWeights,
        ..cfg.loss.clone()
    };
    let s = cfg.size;
    let probe = |c: usize, seed: u64| -> Result<Tensor> {
        Ok(crate::generator::standard_normal(&[1, c, s, s], derive_seed(&[cfg.seed, seed]), &device)?.tanh()?)
    };
    let (x_col, x_g, y) = (probe(3, 10)?, probe(1, 11)?, probe(3, 12)?);

    let features = |g: &Generator| -> Result<Tensor> {
        let z = g.encode(&x_col)?.mean;
        g.decode_features(&z, &g.encode_aux(&x_g)?)
    };
    let h = features(&gen)?;
    let y_hat = gen.last_layer_forward(&h)?;
    let (g_rec, g_adv) = adaptive_gradients(&gen, &disc, &backbone, &y, &y_hat, &h, &loss)?;
    let g_rec: Vec<f64> = g_rec.flatten_all()?.to_vec1()?;
    let g_adv: Vec<f64> = g_adv.flatten_all()?.to_vec1()?;

    let losses = |g: &Generator| -> Result<(f64, f64)> {
        let out = g.last_layer_forward(&features(g)?)?;
        let rec = scalar(&l1_loss(&y, &out)?)? + scalar(&perceptual_loss(&y, &out, &backbone, &loss)?)?;
        let adv = scalar(&gen_adv_score(&disc.score(&out)?)?)?;
        Ok((rec, adv))
    };
    let w = gen.last_layer();
    let original = w.as_tensor().copy()?;
    let shape = original.dims().to_vec();
    let base: Vec<f64> = original.flatten_all()?.to_vec1()?;
    let eps = cfg.step_size;
    let mut fd_rec = vec![0.0; base.len()];
    let mut fd_adv = vec![0.0; base.len()];
    for i in 0..base.len() {
        let eval = |delta: f64| -> Result<(f64, f64)> {
            let mut v = base.clone();
            v[i] += delta;
            w.set(&Tensor::from_vec(v, shape.as_slice(), &device)?)?;
            losses(&gen)
        };
        let (rp, ap) = eval(eps)?;
        let (rm, am) = eval(-eps)?;
        fd_rec[i] = (rp - rm) / (2.0 * eps);
        fd_adv[i] = (ap - am) / (2.0 * eps);
    }
    w.set(&original)?;

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let report = GradcheckReport {
        entries: base.len(),
        reconstruction_norm: norm(&g_rec),
        adversarial_norm: norm(&g_adv),
        reconstruction_norm_fd: norm(&fd_rec),
        adversarial_norm_fd: norm(&fd_adv),
        reconstruction_rel_error: rel_error(&g_rec, &fd_rec),
        adversarial_rel_error: rel_error(&g_adv, &fd_adv),
        adaptive_weight: crate::losses::adaptive_weight(norm(&g_rec), norm(&g_adv), &loss)?,
        adaptive_weight_fd: crate::losses::adaptive_weight(norm(&fd_rec), norm(&fd_adv), &loss)?,
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_page;

    fn images(n: usize) -> Vec<(String, ImageStack)> {
        (0..n)
            .map(|i| (format!("p{i}"), synthetic_page(64, 64, i as u64)))
            .collect()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 4.5e-6);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.beta2, 0.5);
        assert_eq!(c.weight_decay, 1e-2);
        assert_eq!(c.batch_size, 4);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mp = TrainConfig {
            mixed_precision: true,
            ..TrainConfig::default()
        };
        assert!(matches!(mp.validate(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::toy();
        let text = TrainConfig {
            loss: LossConfig {
                lambda_psi_start: 11,
                ..c.loss.clone()
            },
            ..c
        }
        .to_toml()
        .unwrap();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(back.loss.lambda_psi_start, 11);
        assert_eq!(back.to_toml().unwrap(), text);
        let partial = TrainConfig::from_toml("learning_rate = 1e-4\n[loss]\nlambda_psi_start = 5\n").unwrap();
        assert_eq!(partial.learning_rate, 1e-4);
        assert_eq!(partial.loss.lambda_psi_start, 5);
        assert_eq!(partial.loss.lambda_psi, 0.5);
    }

    #[test]
    fn batches_are_pure_and_cover_epochs() {
        let imgs = images(3);
        let cfg = small_config();
        let a = batch_for_step(&imgs, &cfg, 1).unwrap();
        let b = batch_for_step(&imgs, &cfg, 1).unwrap();
        assert_eq!(a, b);
        let mut seen: Vec<String> = (1..=3)
            .flat_map(|s| batch_for_step(&imgs, &TrainConfig { batch_size: 1, ..cfg.clone() }, s).unwrap())
            .map(|p| p.source_id)
            .collect();
        seen.sort();
        assert_eq!(seen, vec!["p0", "p1", "p2"]);
    }

    #[test]
    fn step_is_reproducible_and_respects_freezing() {
        let imgs = images(2);
        let cfg = small_config();
        let batch = batch_for_step(&imgs, &cfg, 1).unwrap();
        let mut s1 = TrainState::new(cfg.clone()).unwrap();
        let mut s2 = TrainState::new(cfg).unwrap();
        let enc = s1.generator.encoder_digest().unwrap();
        let disc = s1.discriminator.params().full_digest().unwrap();
        let gen = s1.generator.params().full_digest().unwrap();
        let b1 = train_step(&mut s1, &batch).unwrap();
        let b2 = train_step(&mut s2, &batch).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(s1.step, 1);
        assert_eq!(b1.gate, 0);
        assert_eq!(b1.total_gen, b1.l1 + b1.perceptual);
        assert_eq!(s1.generator.encoder_digest().unwrap(), enc);
        assert_eq!(s1.discriminator.params().full_digest().unwrap(), disc);
        assert_ne!(s1.generator.params().full_digest().unwrap(), gen);
    }

    #[test]
    fn gated_step_updates_both_networks_separately() {
        let imgs = images(2);
        let mut cfg = small_config();
        cfg.loss.lambda_psi_start = 1;
        let batch = batch_for_step(&imgs, &cfg, 1).unwrap();
        let mut s = TrainState::new(cfg).unwrap();
        let enc = s.generator.encoder_digest().unwrap();
        let disc = s.discriminator.params().full_digest().unwrap();
        let b = train_step(&mut s, &batch).unwrap();
        assert_eq!(b.gate, 1);
        assert!(b.adaptive_weight > 0.0);
        assert!(b.adv_disc > 0.0);
        assert_eq!(s.generator.encoder_digest().unwrap(), enc);
        assert_ne!(s.discriminator.params().full_digest().unwrap(), disc);
        assert_eq!(s.generator_optimizer().steps(), 1);
        assert_eq!(s.discriminator_optimizer().steps(), 1);
    }

    #[test]
    fn output_target_norms_are_positive() {
        let imgs = images(1);
        let mut cfg = small_config();
        cfg.batch_size = 1;
        cfg.loss.lambda_psi_start = 1;
        cfg.loss.adaptive_target = AdaptiveTarget::LastLayerOutput;
        let mut s = TrainState::new(cfg.clone()).unwrap();
        let b = train_step(&mut s, &batch_for_step(&imgs, &cfg, 1).unwrap()).unwrap();
        assert!(b.adaptive_weight > 0.0 && b.adaptive_weight.is_finite());
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(&[0, 1]), derive_seed(&[1, 0]));
        assert_eq!(derive_seed(&[4, 5, 6]), derive_seed(&[4, 5, 6]));
    }

    #[test]
    fn finish_at_zero_keeps_generator_chroma() {
        let a = synthetic_page(16, 16, 1);
        let b = synthetic_page(16, 16, 2);
        let y = finish(&a, &b, BlendWeight::new(0.0).unwrap()).unwrap();
        assert!(y.image.max_abs_diff(&a).unwrap() < 1e-6);
        let y = finish(&a, &b, BlendWeight::new(1.0).unwrap()).unwrap();
        let lab_y = rgb_to_lab(&y.image).unwrap();
        let lab_a = rgb_to_lab(&a).unwrap();
        for (p, q) in lab_y.pixels().zip(lab_a.pixels()) {
            assert!((p[0] - q[0]).abs() < 1e-3 || y.clipped > 0);
        }
    }
}
