//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Cosine decay from `peak` at step 0 to `0.1 · peak` at `budget`, flat afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub budget: usize,
}

impl CosineSchedule {
    pub const FLOOR: f64 = 0.1;

    pub fn new(peak: f64, budget: usize) -> Self {
        Self { peak, budget }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.budget == 0 {
            return self.peak;
        }
        let frac = step.min(self.budget) as f64 / self.budget as f64;
        let floor = Self::FLOOR * self.peak;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()).expect("parameter shapes are valid"))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores state saved by a checkpoint; moment shapes must match the parameters.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
            && v.iter().zip(&self.v).all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(Error::Config("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(id);
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let g = grad.map_or(0.0, |t| t.data()[k]);
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, SeededRng};

    fn store() -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::randn(&[3, 2], &mut SeededRng::new(1)).unwrap())
            .unwrap();
        ps
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut ps = store();
        let before = ps.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &ps,
        );
        let grads = ParamGrads::zeros_like(&ps);
        opt.step(&mut ps, &grads, 1e-3);
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut ps = store();
        let before = ps.clone();
        let id = ps.id("w").unwrap();
        let mut g = Graph::new();
        let w = g.param(&ps, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap().param_grads(&g, &ps);
        let lr = 1e-3;
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &ps,
        );
        opt.step(&mut ps, &grads, lr);
        for ((a, b), gr) in ps.get(id).data().iter().zip(before.get(id).data()).zip(grads.get(id).unwrap().data()) {
            let delta = a - b;
            assert!((delta.abs() - lr).abs() < 1e-8 * lr.max(1.0), "{delta}");
            assert_eq!(delta.signum(), -gr.signum());
        }
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(2e-3, 100);
        assert_eq!(s.lr(0), 2e-3);
        assert!((s.lr(100) - 2e-4).abs() < 1e-18);
        assert!((s.lr(50) - 1.1e-3).abs() < 1e-15);
        assert_eq!(s.lr(500), s.lr(100));
    }

    #[test]
    fn restore_rejects_wrong_shapes() {
        let ps = store();
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        assert!(opt.restore(1, vec![], vec![]).is_err());
    }
}
