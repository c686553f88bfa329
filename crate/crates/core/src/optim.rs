//! Adam and the cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moments are kept in f64 regardless of the
/// parameter precision.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `(name, m, v)` for every parameter with moments.
    pub fn export(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.moments
            .iter()
            .map(|(k, mo)| (k.clone(), mo.m.clone(), mo.v.clone()))
            .collect()
    }

    pub fn import(t: u64, moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>) -> Self {
        Adam {
            cfg: AdamConfig::default(),
            t,
            moments: moments.into_iter().map(|(k, (m, v))| (k, Moments { m, v })).collect(),
        }
    }

    /// Apply one update. Frozen parameters and names without a gradient are
    /// left untouched.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            if params.param(name).is_none_or(|p| p.frozen) {
                continue;
            }
            let w = params.get_mut(name)?;
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, (p, &gi)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.as_f64();
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
                let update = lr * (mom.m[i] / c1) / ((mom.v[i] / c2).sqrt() + eps);
                *p = T::lit(p.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `start` at iteration 0 to `end` at `total - 1`.
pub fn cosine_lr(iteration: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return start;
    }
    let frac = iteration.min(total - 1) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (PI * frac).cos())
}
