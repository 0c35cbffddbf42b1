//! First-order optimizers over flat `f64` slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::gradcore::Matrix;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    /// Adam with the usual defaults (`lr = 1e-3`, betas `0.9 / 0.999`,
    /// `eps = 1e-8`).
    pub fn adam() -> Self {
        Self::adam_with_lr(1e-3)
    }

    pub fn adam_with_lr(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::adam()
        }
    }
}

/// Optimizer with per-slot moment accumulators, allocated on first use.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step: `param -= update(grad)` for every slot.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "optimizer slots changed");
        self.step += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.iter_mut().zip(g.iter()) {
                        *x -= c.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - math::powi(c.beta1, t);
                let bc2 = 1.0 - math::powi(c.beta2, t);
                for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                    assert_eq!(m.len(), p.len());
                    for j in 0..p.len() {
                        let gj = g[j];
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p[j] -= c.lr * mh / (math::sqrt(vh) + c.eps);
                    }
                }
            }
        }
    }

    /// Step over matrix tensors, e.g. [`crate::policy::PolicyParams::tensors_mut`].
    pub fn step_tensors<'a>(&mut self, params: impl Iterator<Item = &'a mut Matrix>, grads: &[Matrix]) {
        let mut slots: Vec<&mut [f64]> = params.map(|m| m.as_mut_slice()).collect();
        let g: Vec<&[f64]> = grads.iter().map(|m| m.as_slice()).collect();
        self.step(&mut slots, &g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1));
        let mut p = [5.0, -3.0];
        opt.step(&mut [&mut p], &[&[10.0, -6.0]]);
        assert!((p[0] - 4.0).abs() < 1e-15 && (p[1] + 2.4).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = OptimizerState::new(OptimizerConfig::adam_with_lr(0.01));
        let mut p = [1.0, 1.0];
        opt.step(&mut [&mut p], &[&[3.0, -0.2]]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimizerConfig::sgd(0.5), OptimizerConfig::adam()] {
            let mut opt = OptimizerState::new(cfg);
            let mut p = [2.0, 3.0];
            for _ in 0..5 {
                opt.step(&mut [&mut p], &[&[0.0, 0.0]]);
            }
            assert_eq!(p, [2.0, 3.0]);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = OptimizerState::new(OptimizerConfig::adam_with_lr(0.05));
        let mut p = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut [&mut p], &[&g]);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }
}
