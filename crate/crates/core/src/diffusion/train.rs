//! Memory rollout and the v-prediction training loop.
//!
//! For each example we draw the number of context segments `n ~ P(n)`, roll
//! the memory forward over `z¹ … zⁿ` with fresh Gaussian perturbations of
//! every clean segment, and regress the denoiser's v-prediction for `zⁿ⁺¹`.
//! Only the final encode step is differentiated; everything it consumes from
//! earlier steps is cut off.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::noise::{sample_correlated_noise, sample_segment_index};
use crate::diffusion::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::diffusion::schedule::{DiffusionSchedule, ScheduleConfig};
use crate::error::{contract, invalid_shape, Error, Result};
use crate::model::{MaltModel, MemoryState};
use crate::numerics::{Graph, ParamGrads, SeededRng, Tensor, Var};

/// How past segments reach the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// Fixed-size recurrent memory.
    Recurrent,
    /// Memory encodes only the latest segment, from an empty memory.
    LastOnly,
    /// Uncompressed per-layer states of every past segment, concatenated in time.
    KvCache { cap: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `N`, the largest number of segments per training example.
    pub segments: usize,
    /// `σ_mem`
    pub sigma_mem: f64,
    /// `α_corr`
    pub alpha_corr: f64,
    pub p_uncond: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub memory: MemoryMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            segments: 4,
            sigma_mem: 0.1,
            alpha_corr: 1.0,
            p_uncond: 0.1,
            batch_size: 16,
            steps: 5000,
            seed: 0,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            schedule: ScheduleConfig::default(),
            memory: MemoryMode::Recurrent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.batch_size == 0 {
            return Err(Error::Config("segments and batch_size must be positive".into()));
        }
        if !(self.sigma_mem >= 0.0) || !(self.alpha_corr >= 0.0) {
            return Err(contract("sigma_mem and alpha_corr must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(contract("p_uncond must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A run of clean latent segments and an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub segments: Vec<Tensor>,
    pub cond: Option<usize>,
}

/// Which encode steps of a rollout live on the caller's tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradPath {
    /// Earlier steps run off-tape; only the final step is recorded.
    Truncated,
    /// Every step is recorded, step `k` (1-based) under parameter scope `k`.
    /// With `stop_grad`, each step's incoming memory is detached.
    Tape { stop_grad: bool },
}

fn perturb(z: &Tensor, sigma: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let xi = Tensor::randn(z.shape(), rng)?;
    z.axpy(sigma, &xi)
}

fn concat_layers(g: &mut Graph, a: &[Var], b: &[Var]) -> Result<Vec<Var>> {
    a.iter().zip(b).map(|(&x, &y)| g.concat(&[x, y], 1)).collect()
}

/// Memory after absorbing `segments` (which may be empty), each perturbed by
/// fresh `N(0, σ²)` noise before encoding. Returns per-layer handles on `g`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_memory_var(
    g: &mut Graph,
    model: &MaltModel,
    segments: &[Tensor],
    sigma_mem: f64,
    cond: Option<usize>,
    mode: MemoryMode,
    path: GradPath,
    rng: &mut SeededRng,
) -> Result<Vec<Var>> {
    if !(sigma_mem >= 0.0) {
        return Err(contract(format!("sigma_mem must be >= 0, got {sigma_mem}")));
    }
    let n = segments.len();
    if let MemoryMode::KvCache { cap } = mode {
        if n > cap {
            return Err(Error::MemoryBudget { segments: n, cap });
        }
    }
    let init = model.init_memory().bind(g);
    if n == 0 {
        return Ok(init);
    }
    let first = if mode == MemoryMode::LastOnly { n - 1 } else { 0 };
    let outer_scope = g.param_scope();
    // `state` is the recurrent memory, or the kv cache (None until the first segment)
    let mut state: Option<Vec<Var>> = None;
    for (k, z) in segments.iter().enumerate().skip(first) {
        let noisy = perturb(z, sigma_mem, rng)?;
        let prev = match (&state, mode) {
            (Some(s), MemoryMode::Recurrent | MemoryMode::KvCache { .. }) => s.clone(),
            _ => init.clone(),
        };
        let on_tape = matches!(path, GradPath::Tape { .. }) || k + 1 == n;
        let hidden = if on_tape {
            let stop_grad = match path {
                GradPath::Truncated => true,
                GradPath::Tape { stop_grad } => {
                    g.set_param_scope(k + 1);
                    stop_grad
                }
            };
            let zv = g.constant(noisy);
            let h = model.encode_memory_var(g, zv, &prev, cond, stop_grad);
            g.set_param_scope(outer_scope);
            let h = h?;
            if let (MemoryMode::KvCache { .. }, Some(cache)) = (mode, &state) {
                let cache = if stop_grad {
                    cache.iter().map(|&v| g.detach(v)).collect()
                } else {
                    cache.clone()
                };
                concat_layers(g, &cache, &h)?
            } else {
                h
            }
        } else {
            let prev_mem = MemoryState::from_vars(g, &prev);
            let h = model.encode_memory(&noisy, &prev_mem, cond)?;
            let h = match (mode, &state) {
                (MemoryMode::KvCache { .. }, Some(cache)) => MemoryState::from_vars(g, cache).concat_time(&h)?,
                _ => h,
            };
            h.bind(g)
        };
        state = Some(hidden);
    }
    Ok(state.expect("at least one segment absorbed"))
}

/// Value-level rollout, used at inference and evaluation.
pub fn rollout_memory(
    model: &MaltModel,
    segments: &[Tensor],
    sigma_mem: f64,
    cond: Option<usize>,
    mode: MemoryMode,
    rng: &mut SeededRng,
) -> Result<MemoryState> {
    let mut g = Graph::no_grad();
    let vars = rollout_memory_var(&mut g, model, segments, sigma_mem, cond, mode, GradPath::Truncated, rng)?;
    Ok(MemoryState::from_vars(&g, &vars))
}

/// What one example contributed to a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleDraw {
    pub n: usize,
    pub t: usize,
    pub conditioned: bool,
}

/// Builds one example's v-loss on `g`: per-element mean of `(v̂ − v)²`.
pub fn example_loss(
    g: &mut Graph,
    model: &MaltModel,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    example: &Example,
    rng: &mut SeededRng,
) -> Result<(Var, ExampleDraw)> {
    let shape = model.config().latent;
    if example.segments.is_empty() || example.segments.iter().any(|s| s.shape() != shape) {
        return Err(invalid_shape(format!(
            "training example needs segments of shape {shape:?}"
        )));
    }
    let n_max = cfg.segments.min(example.segments.len());
    let n = sample_segment_index(n_max, rng);
    let conditioned = example.cond.is_some() && !rng.bernoulli(cfg.p_uncond);
    let cond = if conditioned { example.cond } else { None };
    let t = 1 + rng.below(schedule.timesteps());
    let eps = sample_correlated_noise(&shape, cfg.alpha_corr, rng)?;
    let memory = rollout_memory_var(
        g,
        model,
        &example.segments[..n],
        cfg.sigma_mem,
        cond,
        cfg.memory,
        GradPath::Truncated,
        rng,
    )?;
    let z0 = &example.segments[n];
    let zt = g.constant(schedule.q_sample(z0, t, &eps)?);
    let target = g.constant(schedule.v_target(z0, &eps, t)?);
    let out = model.forward_var(g, zt, t, &memory, cond, false)?;
    let loss = g.mse(out.v.expect("full pass"), target)?;
    Ok((loss, ExampleDraw { n, t, conditioned }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Count of batch examples per context length `n`, `|`-separated.
    pub n_hist: String,
}

/// One optimizer step over a batch drawn from `data` with `rng`.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    model: &mut MaltModel,
    opt: &mut AdamW,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    data: &[Example],
    step: usize,
    lr: f64,
    rng: &mut SeededRng,
) -> Result<StepMetrics> {
    if data.is_empty() {
        return Err(contract("training needs a non-empty dataset"));
    }
    let mut grads = ParamGrads::zeros_like(model.params());
    let mut loss_sum = 0.0;
    let mut hist = vec![0usize; cfg.segments];
    for _ in 0..cfg.batch_size {
        let example = &data[rng.below(data.len())];
        let mut g = Graph::new();
        let (loss, draw) = example_loss(&mut g, model, schedule, cfg, example, rng)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, seed: cfg.seed });
        }
        loss_sum += value;
        hist[draw.n] += 1;
        grads.merge(&g.backward(loss)?.param_grads(&g, model.params()));
    }
    let b = cfg.batch_size as f64;
    grads.scale(1.0 / b);
    opt.step(model.params_mut(), &grads, lr);
    Ok(StepMetrics {
        step,
        loss: loss_sum / b,
        lr,
        n_hist: hist.iter().map(usize::to_string).collect::<Vec<_>>().join("|"),
    })
}

/// Owns the training state of one run. The batch at step `k` is drawn from a
/// generator derived from `(seed, k)`, so a run resumed from a checkpoint at
/// step `k` continues exactly as the uninterrupted run would.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: MaltModel,
    pub opt: AdamW,
    pub schedule: DiffusionSchedule,
    pub config: TrainConfig,
    pub step: usize,
    pub log: Vec<StepMetrics>,
}

impl Trainer {
    pub fn new(model: MaltModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = DiffusionSchedule::from_config(&config.schedule)?;
        if model.config().timesteps != schedule.timesteps() {
            return Err(Error::Config(format!(
                "model accepts timesteps up to {}, schedule has {}",
                model.config().timesteps,
                schedule.timesteps()
            )));
        }
        let opt = AdamW::new(config.optimizer.clone(), model.params());
        Ok(Self {
            model,
            opt,
            schedule,
            config,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn lr_schedule(&self) -> CosineSchedule {
        CosineSchedule::new(self.config.optimizer.lr, self.config.steps)
    }

    pub fn step_rng(&self, step: usize) -> SeededRng {
        SeededRng::new(self.config.seed).fork(step as u64)
    }

    pub fn train_step(&mut self, data: &[Example]) -> Result<StepMetrics> {
        let step = self.step;
        let lr = self.lr_schedule().lr(step);
        let mut rng = self.step_rng(step);
        let m = training_step(
            &mut self.model,
            &mut self.opt,
            &self.schedule,
            &self.config,
            data,
            step,
            lr,
            &mut rng,
        )?;
        self.step += 1;
        self.log.push(m.clone());
        Ok(m)
    }

    /// Trains until `config.steps` updates have been applied.
    pub fn run(&mut self, data: &[Example]) -> Result<()> {
        while self.step < self.config.steps {
            self.train_step(data)?;
        }
        Ok(())
    }

    /// Mean v-loss on `data` with a fixed evaluation generator; no update.
    pub fn eval_loss(&self, data: &[Example], draws: usize, seed: u64) -> Result<f64> {
        let mut rng = SeededRng::new(seed);
        let mut total = 0.0;
        for i in 0..draws {
            let mut g = Graph::no_grad();
            let (loss, _) = example_loss(&mut g, &self.model, &self.schedule, &self.config, &data[i % data.len()], &mut rng)?;
            total += g.value(loss).data()[0];
        }
        Ok(total / draws.max(1) as f64)
    }
}

/// Writes step metrics as CSV with header `step,loss,lr,n_hist`.
pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
