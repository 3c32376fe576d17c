//! Training objective: L1, perceptual distance, the gated hinge adversarial
//! terms and the adaptive adversarial weight.
//!
//! Every term reduces with a mean over pixels or patches.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminator::{gen_adv_score, hinge_disc_loss, PatchLogits};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Conv2d, ParamStore};

/// Which gradient the adaptive weight compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveTarget {
    /// Gradients w.r.t. the decoder's output-convolution weight.
    #[default]
    LastLayerWeights,
    /// Gradients w.r.t. the decoder output itself.
    LastLayerOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_p: f64,
    pub lambda_psi: f64,
    pub delta: f64,
    pub lambda_psi_start: u64,
    pub adaptive_clip: f64,
    pub adaptive_target: AdaptiveTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_psi: 0.5,
            delta: 1e-4,
            lambda_psi_start: 10001,
            adaptive_clip: 1e4,
            adaptive_target: AdaptiveTarget::LastLayerWeights,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("lambda_p", self.lambda_p),
            ("lambda_psi", self.lambda_psi),
            ("delta", self.delta),
            ("adaptive_clip", self.adaptive_clip),
        ];
        for (name, v) in vals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One step's loss terms as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub l1: f64,
    pub perceptual: f64,
    pub adv_gen: f64,
    pub adv_disc: f64,
    pub gate: u8,
    pub adaptive_weight: f64,
    pub total_gen: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l1,
            self.perceptual,
            self.adv_gen,
            self.adv_disc,
            self.adaptive_weight,
            self.total_gen,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Norms of the reconstruction and adversarial gradients at the last decoder
/// layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradNorms {
    pub reconstruction: f64,
    pub adversarial: f64,
}

/// Differentiable distance between two image batches, `(N, 3, H, W)` signed.
pub trait PerceptualBackbone: Send + Sync {
    /// Mean distance over the batch, as a scalar tensor.
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
    fn id(&self) -> &str;
}

/// LPIPS-shaped distance over a fixed, randomly initialized conv stack:
/// per-layer channel-normalized features, squared differences summed over
/// channels and averaged over positions, summed over layers.
pub struct RandomFeatureBackbone {
    layers: Vec<Conv2d>,
    id: String,
    _params: ParamStore,
}

impl RandomFeatureBackbone {
    pub fn new(seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        let mut params = ParamStore::new(device.clone(), dtype);
        let mut rng = seeded_rng(seed);
        let mut root = params.builder(&mut rng);
        let mut b = root.pp("perceptual").frozen(true);
        let layers = vec![
            Conv2d::new(&mut b.pp("conv1"), 3, 8, 3, 1, 1)?,
            Conv2d::new(&mut b.pp("conv2"), 8, 16, 3, 2, 1)?,
            Conv2d::new(&mut b.pp("conv3"), 16, 32, 3, 2, 1)?,
        ];
        Ok(Self {
            layers,
            id: format!("random-features-3x3-seed{seed}"),
            _params: params,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?.relu()?;
            let norm = (h.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
            out.push(h.broadcast_div(&norm)?);
        }
        Ok(out)
    }
}

impl PerceptualBackbone for RandomFeatureBackbone {
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = (x - y)?.sqr()?.sum_keepdim(1)?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok(total.expect("backbone has layers"))
    }

    fn id(&self) -> &str {
        &self.id
    }
}

pub fn l1_loss(y: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    if y.dims() != y_hat.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", y.dims(), y_hat.dims())));
    }
    Ok((y - y_hat)?.abs()?.mean_all()?)
}

pub fn perceptual_loss(
    y: &Tensor,
    y_hat: &Tensor,
    backbone: &dyn PerceptualBackbone,
    cfg: &LossConfig,
) -> Result<Tensor> {
    Ok((backbone.distance(y, y_hat)? * cfg.lambda_p)?)
}

/// Adversarial switch: 1 once `step >= lambda_psi_start`.
pub fn gate(step: u64, cfg: &LossConfig) -> u8 {
    u8::from(step >= cfg.lambda_psi_start)
}

/// `min(lambda_psi * rec / (adv + delta), adaptive_clip)`.
pub fn adaptive_weight(grad_rec_norm: f64, grad_adv_norm: f64, cfg: &LossConfig) -> Result<f64> {
    if !(grad_rec_norm >= 0.0) || !(grad_adv_norm >= 0.0) {
        return Err(Error::contract(format!(
            "gradient norms must be >= 0, got {grad_rec_norm} and {grad_adv_norm}"
        )));
    }
    let w = cfg.lambda_psi * grad_rec_norm / (grad_adv_norm + cfg.delta);
    Ok(w.min(cfg.adaptive_clip))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Generator-side objective with its differentiable total.
#[derive(Debug, Clone)]
pub struct GeneratorObjective {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// `L1 + L_p - w * gate * mean(D(y_hat))`.
///
/// `fake_logits` and `grad_norms` are only consulted when the gate is open.
pub fn generator_objective(
    y: &Tensor,
    y_hat: &Tensor,
    fake_logits: Option<&PatchLogits>,
    step: u64,
    backbone: &dyn PerceptualBackbone,
    grad_norms: Option<GradNorms>,
    cfg: &LossConfig,
) -> Result<GeneratorObjective> {
    let l1 = l1_loss(y, y_hat)?;
    let lp = perceptual_loss(y, y_hat, backbone, cfg)?;
    let rec = (&l1 + &lp)?;
    let g = gate(step, cfg);
    let (total, adv_gen, weight) = if g == 1 {
        let fake = fake_logits
            .ok_or_else(|| Error::contract("gate is open but no fake logits were given"))?;
        let norms = grad_norms
            .ok_or_else(|| Error::contract("gate is open but no gradient norms were given"))?;
        let w = adaptive_weight(norms.reconstruction, norms.adversarial, cfg)?;
        let adv = (gen_adv_score(fake)? * w)?;
        let adv_val = scalar(&adv)?;
        ((rec + adv)?, adv_val, w)
    } else {
        (rec, 0.0, 0.0)
    };
    let l1v = scalar(&l1)?;
    let lpv = scalar(&lp)?;
    let breakdown = LossBreakdown {
        step,
        l1: l1v,
        perceptual: lpv,
        adv_gen,
        adv_disc: 0.0,
        gate: g,
        adaptive_weight: weight,
        total_gen: l1v + lpv + adv_gen,
    };
    Ok(GeneratorObjective { total, breakdown })
}

/// `gate(step) * hinge(real, fake)`.
pub fn discriminator_objective(
    real: &PatchLogits,
    fake: &PatchLogits,
    step: u64,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let hinge = hinge_disc_loss(real, fake)?;
    if gate(step, cfg) == 1 {
        Ok(hinge)
    } else {
        Ok(hinge.zeros_like()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::standard_normal;

    fn img(seed: u64) -> Tensor {
        standard_normal(&[1, 3, 16, 16], seed, &Device::Cpu).unwrap().tanh().unwrap()
    }

    fn backbone() -> RandomFeatureBackbone {
        RandomFeatureBackbone::new(0, &Device::Cpu, DType::F64).unwrap()
    }

    fn logits(v: f64) -> PatchLogits {
        PatchLogits(Tensor::full(v, (1, 1, 2, 2), &Device::Cpu).unwrap())
    }

    #[test]
    fn default_loss_weights() {
        let c = LossConfig::default();
        assert_eq!(c.lambda_p, 1.0);
        assert_eq!(c.lambda_psi, 0.5);
        assert_eq!(c.delta, 1e-4);
        assert_eq!(c.lambda_psi_start, 10001);
    }

    #[test]
    fn l1_examples() {
        let a = img(1);
        assert_eq!(scalar(&l1_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let half = Tensor::full(0.5f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let quarter = Tensor::full(0.25f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(scalar(&l1_loss(&half, &quarter).unwrap()).unwrap(), 0.25);
        assert!(l1_loss(&half, &img(0)).is_err());
    }

    #[test]
    fn l1_matches_direct_summation() {
        let (a, b) = (img(2), img(3));
        let av: Vec<f64> = a.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f64> = b.flatten_all().unwrap().to_vec1().unwrap();
        let mut sum = 0.0;
        for (x, y) in av.iter().zip(&bv) {
            sum += (x - y).abs();
        }
        let oracle = sum / av.len() as f64;
        assert!((scalar(&l1_loss(&a, &b).unwrap()).unwrap() - oracle).abs() < 1e-7);
    }

    #[test]
    fn perceptual_examples() {
        let bb = backbone();
        let (a, b) = (img(4), img(5));
        let cfg = LossConfig::default();
        assert_eq!(scalar(&perceptual_loss(&a, &a, &bb, &cfg).unwrap()).unwrap(), 0.0);
        let zero = LossConfig {
            lambda_p: 0.0,
            ..cfg.clone()
        };
        assert_eq!(scalar(&perceptual_loss(&a, &b, &bb, &zero).unwrap()).unwrap(), 0.0);
        let d_ab = scalar(&bb.distance(&a, &b).unwrap()).unwrap();
        let d_ba = scalar(&bb.distance(&b, &a).unwrap()).unwrap();
        assert!(d_ab > 0.0);
        assert!((d_ab - d_ba).abs() < 1e-12);
    }

    #[test]
    fn perceptual_golden_value() {
        // Frozen from one run of the seed-0 backbone on the seed-4/seed-5 pair.
        let d = scalar(&backbone().distance(&img(4), &img(5)).unwrap()).unwrap();
        assert!((d - PERCEPTUAL_GOLDEN).abs() < 1e-9, "{d}");
    }

    const PERCEPTUAL_GOLDEN: f64 = 2.291154319066447;

    #[test]
    fn gate_schedule() {
        let cfg = LossConfig::default();
        assert_eq!(gate(0, &cfg), 0);
        assert_eq!(gate(10000, &cfg), 0);
        assert_eq!(gate(10001, &cfg), 1);
    }

    #[test]
    fn adaptive_weight_arithmetic() {
        let cfg = LossConfig::default();
        let w = adaptive_weight(1.0, 1.0, &cfg).unwrap();
        assert!((w - 0.5 / 1.0001).abs() < 1e-12);
        assert!((w - 0.49995).abs() < 1e-5);
        let w = adaptive_weight(2.0, 1.0, &cfg).unwrap();
        assert!((w - 1.0).abs() < 1e-3);
        assert_eq!(adaptive_weight(1.0, 0.0, &cfg).unwrap(), 5000.0);
        assert_eq!(adaptive_weight(10.0, 0.0, &cfg).unwrap(), cfg.adaptive_clip);
        assert!(matches!(adaptive_weight(-1.0, 1.0, &cfg), Err(Error::Contract(_))));
        assert!(adaptive_weight(1.0, f64::NAN, &cfg).is_err());
    }

    #[test]
    fn objective_without_gate_is_reconstruction_only() {
        let cfg = LossConfig::default();
        let bb = backbone();
        let (y, yh) = (img(6), img(7));
        let o = generator_objective(&y, &yh, None, 5, &bb, None, &cfg).unwrap();
        let l1 = scalar(&l1_loss(&y, &yh).unwrap()).unwrap();
        let lp = scalar(&perceptual_loss(&y, &yh, &bb, &cfg).unwrap()).unwrap();
        assert_eq!(o.breakdown.total_gen, l1 + lp);
        assert_eq!(scalar(&o.total).unwrap(), l1 + lp);
        assert_eq!(o.breakdown.gate, 0);
        assert_eq!(o.breakdown.adv_gen, 0.0);
        let same = generator_objective(&y, &y, Some(&logits(3.0)), 0, &bb, None, &cfg).unwrap();
        assert_eq!(same.breakdown.total_gen, 0.0);
    }

    #[test]
    fn objective_with_gate_composes_terms() {
        let cfg = LossConfig {
            lambda_psi_start: 0,
            ..LossConfig::default()
        };
        let bb = backbone();
        let (y, yh) = (img(6), img(7));
        let norms = GradNorms {
            reconstruction: 2.0,
            adversarial: 1.0,
        };
        let o = generator_objective(&y, &yh, Some(&logits(0.5)), 3, &bb, Some(norms), &cfg).unwrap();
        let l1 = scalar(&l1_loss(&y, &yh).unwrap()).unwrap();
        let lp = scalar(&perceptual_loss(&y, &yh, &bb, &cfg).unwrap()).unwrap();
        let w = 0.5 * 2.0 / (1.0 + 1e-4);
        let expect = l1 + lp - w * 0.5;
        assert!((o.breakdown.total_gen - expect).abs() < 1e-12);
        assert!((scalar(&o.total).unwrap() - expect).abs() < 1e-12);
        assert_eq!(o.breakdown.gate, 1);
        assert!(generator_objective(&y, &yh, None, 3, &bb, Some(norms), &cfg).is_err());
    }

    #[test]
    fn discriminator_objective_gating() {
        let cfg = LossConfig {
            lambda_psi_start: 11,
            ..LossConfig::default()
        };
        let v = |r, f, s| scalar(&discriminator_objective(&logits(r), &logits(f), s, &cfg).unwrap()).unwrap();
        assert_eq!(v(-3.0, 3.0, 10), 0.0);
        assert_eq!(v(0.0, 0.0, 11), 1.0);
        assert_eq!(v(1.5, -1.0, 12), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn adaptive_weight_is_scale_invariant(a in 1.0..100.0f64, b in 1.0..100.0f64, s in 0.5..50.0f64) {
                let cfg = LossConfig { adaptive_clip: f64::INFINITY, ..LossConfig::default() };
                let w1 = adaptive_weight(a, b, &cfg).unwrap();
                let w2 = adaptive_weight(s * a, s * b, &cfg).unwrap();
                prop_assert!(((w1 - w2) / w1).abs() < 1e-3);
                prop_assert!(w1 >= 0.0);
            }

            #[test]
            fn losses_finite_and_nonnegative(seed_a in 0u64..1000, seed_b in 0u64..1000) {
                let bb = backbone();
                let o = generator_objective(&img(seed_a), &img(seed_b), None, 0, &bb, None, &LossConfig::default()).unwrap();
                prop_assert!(o.breakdown.is_finite());
                prop_assert!(o.breakdown.total_gen >= 0.0);
            }
        }
    }
}
