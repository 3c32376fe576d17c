//! AdamW over a named parameter set, with serializable moment state.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4.5e-6,
            beta1: 0.9,
            beta2: 0.5,
            weight_decay: 1e-2,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| Ok(p.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            cfg,
            params,
            m,
            v,
            steps: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one decoupled-weight-decay Adam update. Parameters without a
    /// gradient keep their values but still decay.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let AdamWConfig {
            learning_rate: lr,
            beta1,
            beta2,
            weight_decay,
            eps,
        } = self.cfg;
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * weight_decay))?;
            let Some(g) = grads.get(theta) else {
                var.set(&decayed)?;
                continue;
            };
            // Gradients can carry graph history; keeping it in the moments
            // would chain every step's graph together.
            let g = g.detach();
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>`, plus the update count.
    pub fn state(&self) -> (BTreeMap<String, Tensor>, u64) {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].clone());
            out.insert(format!("v.{name}"), self.v[i].clone());
        }
        (out, self.steps)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (key, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let t = state
                    .get(&format!("{key}.{name}"))
                    .ok_or_else(|| Error::shape(format!("optimizer state missing {key}.{name}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::shape(format!("optimizer state {key}.{name} has shape {:?}", t.dims())));
                }
                *slot = t.to_dtype(var.dtype())?.to_device(var.device())?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        };
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], cfg).unwrap();
        for _ in 0..300 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With bias correction the first Adam step is lr * sign(g).
        let x = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], cfg).unwrap();
        let loss = (x.as_tensor() * 5.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got = x.as_tensor().to_vec1::<f64>().unwrap()[0];
        let want = 1.0 * (1.0 - 0.01 * 0.1) - 0.01 * 5.0 / (5.0 + 1e-8);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn state_round_trip() {
        let x = Var::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        let mut a = AdamW::new(vec![("x".into(), x.clone())], AdamWConfig::default()).unwrap();
        let loss = (x.as_tensor() + 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
        a.step(&loss.backward().unwrap()).unwrap();
        let (st, n) = a.state();
        let mut b = AdamW::new(vec![("x".into(), x.clone())], AdamWConfig::default()).unwrap();
        b.load_state(&st, n).unwrap();
        assert_eq!(b.steps(), 1);
        let (st2, _) = b.state();
        for (k, t) in &st {
            let d = (t - &st2[k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert_eq!(d, 0.0);
        }
        assert!(b.load_state(&BTreeMap::new(), 0).is_err());
    }
}
