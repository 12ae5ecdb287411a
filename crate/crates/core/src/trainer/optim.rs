//! Adam with inspectable moment buffers, so that optimizer state can be
//! checkpointed and a resumed run continues exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("invalid Adam hyper-parameters"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    params: Vec<Param>,
    /// First and second moments by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
    pub steps: u64,
}

impl Adam {
    pub fn new(params: Vec<Param>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let mut moments = BTreeMap::new();
        for p in &params {
            let z = p.var.as_tensor().zeros_like()?;
            moments.insert(p.name.clone(), (z.clone(), z));
        }
        Ok(Adam {
            cfg,
            params,
            moments,
            steps: 0,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// One update. Parameters without a gradient keep their value but still
    /// see their moments decay.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let c = self.cfg;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in &self.params {
            let (m, v) = self.moments.get_mut(&p.name).expect("moment per param");
            let theta = &p.var.as_tensor().detach();
            let g = match grads.get(p.var.as_tensor()) {
                Some(g) => g.detach(),
                None => theta.zeros_like()?,
            };
            let g = if c.weight_decay > 0.0 {
                (g + (theta * c.weight_decay)?)?
            } else {
                g
            };
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            p.var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use candle_core::{Device, Var};

    #[test]
    fn first_step_moves_by_lr() -> Result<()> {
        let var = Var::new(&[1.0f64, -2.0], &Device::Cpu)?;
        let p = Param {
            name: "w".into(),
            group: Group::Heads,
            var: var.clone(),
        };
        let mut opt = Adam::new(vec![p], AdamConfig::default())?;
        let loss = var.as_tensor().sqr()?.sum_all()?;
        opt.step(&loss.backward()?, 0.1)?;
        let v = var.as_tensor().to_vec1::<f64>()?;
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn minimizes_quadratic() -> Result<()> {
        let var = Var::new(&[3.0f64], &Device::Cpu)?;
        let p = Param {
            name: "w".into(),
            group: Group::Heads,
            var: var.clone(),
        };
        let mut opt = Adam::new(vec![p], AdamConfig::default())?;
        for _ in 0..500 {
            let loss = (var.as_tensor() - 1.0)?.sqr()?.sum_all()?;
            opt.step(&loss.backward()?, 0.05)?;
        }
        assert!((var.as_tensor().to_vec1::<f64>()?[0] - 1.0).abs() < 1e-2);
        Ok(())
    }
}
