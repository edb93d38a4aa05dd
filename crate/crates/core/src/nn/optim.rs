//! SGD-with-momentum and Adam, plus the learning-rate schedules used by the
//! training loops. Optimizer state is keyed by parameter name so composed
//! modules can share one optimizer.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// Learning-rate schedule, evaluated per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    None,
    /// Multiply by `gamma` at each listed epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// Cosine annealing from the base rate to zero over `total_epochs`.
    Cosine { total_epochs: usize },
    /// Polynomial decay (1 - e/total)^power.
    Poly { total_epochs: usize, power: f64 },
}

impl LrSchedule {
    pub fn scale_at(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::None => 1.0,
            LrSchedule::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count() as i32;
                gamma.powi(passed)
            }
            LrSchedule::Cosine { total_epochs } => {
                let t = (epoch as f64 / (*total_epochs).max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Poly { total_epochs, power } => {
                let t = (epoch as f64 / (*total_epochs).max(1) as f64).min(1.0);
                (1.0 - t).max(0.0).powf(*power)
            }
        }
    }
}

#[derive(Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, module: &mut dyn Parameterized, lr: f64) {
        module.visit_params("", &mut |name, mut w, g| {
            let vel = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut w.view_mut())
                .and(vel)
                .and(&g)
                .for_each(|wi, vi, &gi| {
                    let grad = gi + self.weight_decay * *wi;
                    *vi = self.momentum * *vi + grad;
                    *wi -= lr * *vi;
                });
        });
    }
}

#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Parameterized, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        module.visit_params("", &mut |name, mut w, g| {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut w.view_mut())
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|wi, mi, vi, &gi| {
                    let grad = gi + self.weight_decay * *wi;
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * grad;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * grad * grad;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *wi -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        });
    }
}

/// Either optimizer behind one interface.
#[derive(Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, module: &mut dyn Parameterized, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(module, lr),
            Optimizer::Adam(o) => o.step(module, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedules_scale_sensibly() {
        let s = LrSchedule::Step { milestones: vec![10, 15], gamma: 0.1 };
        assert_abs_diff_eq!(s.scale_at(0), 1.0);
        assert_abs_diff_eq!(s.scale_at(10), 0.1);
        assert_abs_diff_eq!(s.scale_at(20), 0.01, epsilon = 1e-12);
        let c = LrSchedule::Cosine { total_epochs: 10 };
        assert_abs_diff_eq!(c.scale_at(0), 1.0);
        assert!(c.scale_at(5) < 0.6 && c.scale_at(5) > 0.4);
        assert_abs_diff_eq!(c.scale_at(10), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(LrSchedule::None.scale_at(3), 1.0);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        use crate::nn::layers::Dense;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut dense = Dense::init(1, 1, &mut rng);
        let mut opt = Sgd::new(0.0, 0.0);
        // Minimize (w - 3)^2 by feeding its gradient directly.
        for _ in 0..200 {
            dense.dw[[0, 0]] = 2.0 * (dense.w[[0, 0]] - 3.0);
            dense.db[0] = 0.0;
            opt.step(&mut dense, 0.1);
        }
        assert_abs_diff_eq!(dense.w[[0, 0]], 3.0, epsilon = 1e-6);
    }
}
