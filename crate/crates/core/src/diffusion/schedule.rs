//! Linear β schedule and the forward process in v-parameterization.
//!
//! Timesteps run `1..=T`; `ᾱ(0) = 1` stands for clean data, so the first
//! noisy step has `ᾱ(1) = 1 − β₁`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if timesteps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(contract(format!(
            "need T >= 2 and 0 < beta_start < beta_end < 1, got T={timesteps}, {beta_start}, {beta_end}"
        )));
    }
    let step = (beta_end - beta_start) / (timesteps - 1) as f64;
    let mut betas: Vec<f64> = (0..timesteps).map(|i| beta_start + step * i as f64).collect();
    // pin the endpoint against accumulated rounding
    betas[timesteps - 1] = beta_end;
    let mut alphas_bar = Vec::with_capacity(timesteps + 1);
    alphas_bar.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_bar.push(acc);
    }
    Ok(DiffusionSchedule { betas, alphas_bar })
}

impl DiffusionSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    /// `ᾱ` at a real time `s ∈ [0, T]`, interpolating `ln ᾱ` linearly.
    pub fn alpha_bar_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.timesteps() as f64);
        let lo = s.floor() as usize;
        if lo == self.timesteps() {
            return self.alphas_bar[lo];
        }
        let frac = s - lo as f64;
        let (a, b) = (self.alphas_bar[lo].ln(), self.alphas_bar[lo + 1].ln());
        (a + frac * (b - a)).exp()
    }

    /// `−d ln ᾱ / ds` at real time `s`, i.e. `−ln(1 − β_⌈s⌉)`.
    pub fn beta_at(&self, s: f64) -> f64 {
        let t = (s.ceil() as usize).clamp(1, self.timesteps());
        -(1.0 - self.beta(t)).ln()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(contract(format!("timestep {t} outside [1, {}]", self.timesteps())));
        }
        Ok(())
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        mix(z0, eps, self.alpha_bar(t))
    }

    /// `√ᾱ_t·ε − √(1−ᾱ_t)·z0`
    pub fn v_target(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        v_from(z0, eps, self.alpha_bar(t))
    }

    pub fn z0_from_v(&self, z_t: &Tensor, v: &Tensor, t: usize) -> Result<Tensor> {
        z0_from_v(z_t, v, self.alpha_bar(t))
    }

    pub fn eps_from_v(&self, z_t: &Tensor, v: &Tensor, t: usize) -> Result<Tensor> {
        eps_from_v(z_t, v, self.alpha_bar(t))
    }
}

/// `√a·z0 + √(1−a)·ε` for a given `ᾱ = a`.
pub fn mix(z0: &Tensor, eps: &Tensor, a: f64) -> Result<Tensor> {
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    z0.zip_map(eps, |x, e| s * x + n * e)
}

pub fn v_from(z0: &Tensor, eps: &Tensor, a: f64) -> Result<Tensor> {
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    eps.zip_map(z0, |e, x| s * e - n * x)
}

/// `z0 = √a·z_t − √(1−a)·v`
pub fn z0_from_v(z_t: &Tensor, v: &Tensor, a: f64) -> Result<Tensor> {
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    z_t.zip_map(v, |z, v| s * z - n * v)
}

/// `ε = √(1−a)·z_t + √a·v`
pub fn eps_from_v(z_t: &Tensor, v: &Tensor, a: f64) -> Result<Tensor> {
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    z_t.zip_map(v, |z, v| n * z + s * v)
}

/// `v` from `(z_t, ε)`: `(ε − √(1−a)·z_t) / √a`. Undefined at `a = 0`.
pub fn v_from_eps(z_t: &Tensor, eps: &Tensor, a: f64) -> Result<Tensor> {
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    eps.zip_map(z_t, |e, z| (e - n * z) / s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn linear() -> DiffusionSchedule {
        make_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = linear();
        assert_eq!(s.timesteps(), 1000);
        assert_eq!(s.beta(1000), 0.02);
        assert_eq!(s.beta(1), 1e-4);
        assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
        assert!((1..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        // independent product oracle: ᾱ_T = Π (1 − β_i)
        let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-15);
        assert!((s.alpha_bar(1000) / 4.0e-5 - 1.0).abs() < 0.1, "{}", s.alpha_bar(1000));
    }

    #[test]
    fn bad_schedules_rejected() {
        assert!(make_schedule(1000, 0.02, 1e-4).is_err());
        assert!(make_schedule(1000, 0.0, 0.02).is_err());
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
    }

    #[test]
    fn q_sample_contract() {
        let s = linear();
        let mut rng = SeededRng::new(3);
        let z0 = Tensor::randn(&[4, 3], &mut rng).unwrap();
        let zero = Tensor::zeros(&[4, 3]).unwrap();
        assert!(s.q_sample(&z0, 0, &zero).is_err());
        assert!(s.q_sample(&z0, 1001, &zero).is_err());
        let zt = s.q_sample(&z0, 400, &zero).unwrap();
        assert_eq!(zt, z0.scale(s.alpha_bar(400).sqrt()));
        assert_eq!(mix(&z0, &Tensor::randn(&[4, 3], &mut rng).unwrap(), 1.0).unwrap(), z0);
    }

    #[test]
    fn conversions_roundtrip() {
        let s = linear();
        let mut rng = SeededRng::new(9);
        for &t in &[1, 17, 500, 999, 1000] {
            let z0 = Tensor::randn(&[3, 5], &mut rng).unwrap();
            let eps = Tensor::randn(&[3, 5], &mut rng).unwrap();
            let zt = s.q_sample(&z0, t, &eps).unwrap();
            let v = s.v_target(&z0, &eps, t).unwrap();
            assert!(s.z0_from_v(&zt, &v, t).unwrap().max_abs_diff(&z0).unwrap() < 1e-12);
            assert!(s.eps_from_v(&zt, &v, t).unwrap().max_abs_diff(&eps).unwrap() < 1e-12);
            let a = s.alpha_bar(t);
            assert!(v_from_eps(&zt, &eps, a).unwrap().max_abs_diff(&v).unwrap() < 1e-9);
        }
        let z0 = Tensor::zeros(&[2]).unwrap();
        let eps = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        assert_eq!(s.v_target(&z0, &eps, 10).unwrap(), eps.scale(s.alpha_bar(10).sqrt()));
    }

    #[test]
    fn continuous_schedule_agrees_at_integers() {
        let s = linear();
        for t in [0usize, 1, 250, 1000] {
            assert!((s.alpha_bar_at(t as f64) / s.alpha_bar(t) - 1.0).abs() < 1e-12);
        }
        let mid = s.alpha_bar_at(10.5);
        assert!(mid < s.alpha_bar(10) && mid > s.alpha_bar(11));
        assert!((s.beta_at(10.5) + (1.0 - s.beta(11)).ln()).abs() < 1e-15);
    }
}
