//! Blockwise autoregressive inference: denoise a segment from noise given the
//! current memory, absorb the finished segment into memory, repeat.
//!
//! Two solvers share one interface. DDIM takes deterministic steps through a
//! uniform subset of the training timesteps. The Euler solver integrates the
//! probability-flow ODE of the variance-preserving process in schedule time,
//! `dz/ds = −½ β(s) (z − ε̂ / √(1 − ᾱ(s)))`.

use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::diffusion::noise::sample_correlated_noise;
use crate::diffusion::schedule::{eps_from_v, mix, z0_from_v, DiffusionSchedule};
use crate::diffusion::train::MemoryMode;
use crate::error::{contract, invalid_shape, Error, Result};
use crate::model::{MaltModel, MemoryState};
use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Ddim,
    Euler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// `M`
    pub steps: usize,
    /// `w`; 1 disables guidance.
    pub guidance: f64,
    pub solver: Solver,
    /// Correlation weight of the initial noise, shared with training.
    pub alpha_corr: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 1.0,
            solver: Solver::Ddim,
            alpha_corr: 1.0,
        }
    }
}

/// Deterministic DDIM update from `t` to `t_next ≤ t`.
pub fn ddim_step(z_t: &Tensor, v_pred: &Tensor, t: usize, t_next: usize, schedule: &DiffusionSchedule) -> Result<Tensor> {
    if t > schedule.timesteps() || t_next > t {
        return Err(contract(format!(
            "ddim step needs T >= t >= t_next >= 0, got t={t}, t_next={t_next}"
        )));
    }
    if t == t_next {
        return Ok(z_t.clone());
    }
    let a = schedule.alpha_bar(t);
    let z0 = z0_from_v(z_t, v_pred, a)?;
    let eps = eps_from_v(z_t, v_pred, a)?;
    mix(&z0, &eps, schedule.alpha_bar(t_next))
}

/// `z + (t_next − t)·increment`
pub fn euler_step(z: &Tensor, increment: &Tensor, t: f64, t_next: f64) -> Result<Tensor> {
    z.axpy(t_next - t, increment)
}

/// Probability-flow derivative at schedule time `s` given a noise estimate.
pub fn pf_ode_derivative(z: &Tensor, eps_hat: &Tensor, s: f64, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let beta = schedule.beta_at(s);
    let sigma = (1.0 - schedule.alpha_bar_at(s)).sqrt();
    z.zip_map(eps_hat, |z, e| -0.5 * beta * (z - e / sigma))
}

/// `T, T − T/M, …, 0` as real times; integral whenever `M` divides `T`.
pub fn time_grid(timesteps: usize, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(contract("solver needs at least one step"));
    }
    Ok((0..=steps)
        .map(|i| timesteps as f64 * (steps - i) as f64 / steps as f64)
        .collect())
}

/// DDIM timesteps: the real grid rounded to integers, duplicates removed.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    let mut ts: Vec<usize> = time_grid(timesteps, steps)?.iter().map(|s| s.round() as usize).collect();
    ts.dedup();
    Ok(ts)
}

/// Runs `solver` from `z_T` to time 0. `denoise(z, s)` returns the
/// v-prediction at real time `s`; DDIM only queries integral times.
pub fn solve(
    z_init: &Tensor,
    schedule: &DiffusionSchedule,
    solver: Solver,
    steps: usize,
    mut denoise: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    let t_max = schedule.timesteps();
    let mut z = z_init.clone();
    match solver {
        Solver::Ddim => {
            let ts = ddim_timesteps(t_max, steps)?;
            for w in ts.windows(2) {
                let v = denoise(&z, w[0] as f64)?;
                z = ddim_step(&z, &v, w[0], w[1], schedule)?;
            }
        }
        Solver::Euler => {
            let grid = time_grid(t_max, steps)?;
            for w in grid.windows(2) {
                let v = denoise(&z, w[0])?;
                let eps = eps_from_v(&z, &v, schedule.alpha_bar_at(w[0]))?;
                let d = pf_ode_derivative(&z, &eps, w[0], schedule)?;
                z = euler_step(&z, &d, w[0], w[1])?;
            }
        }
    }
    Ok(z)
}

/// Model v-prediction with optional classifier-free guidance.
pub fn guided_v(
    model: &MaltModel,
    z: &Tensor,
    t: usize,
    memory: &MemoryState,
    cond: Option<usize>,
    guidance: f64,
) -> Result<Tensor> {
    let (v_c, _) = model.forward(z, t, memory, cond)?;
    if cond.is_none() || guidance == 1.0 {
        return Ok(v_c);
    }
    let (v_u, _) = model.forward(z, t, memory, None)?;
    v_u.zip_map(&v_c, |u, c| u + guidance * (c - u))
}

/// Generates one latent segment conditioned on `memory`.
pub fn sample_segment(
    model: &MaltModel,
    schedule: &DiffusionSchedule,
    memory: &MemoryState,
    cond: Option<usize>,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(contract("sampling needs M >= 1 steps"));
    }
    let z_t = sample_correlated_noise(&model.config().latent, cfg.alpha_corr, rng)?;
    solve(&z_t, schedule, cfg.solver, cfg.steps, |z, s| {
        guided_v(model, z, s.round() as usize, memory, cond, cfg.guidance)
    })
}

/// Absorbs a finished segment into memory; no augmentation at inference.
pub fn update_memory(model: &MaltModel, z: &Tensor, memory: &MemoryState, cond: Option<usize>) -> Result<MemoryState> {
    model.encode_memory(z, memory, cond)
}

/// Memory bookkeeping for each conditioning mode during a rollout.
#[derive(Clone, Debug)]
pub struct MemoryTracker {
    mode: MemoryMode,
    state: MemoryState,
    absorbed: usize,
}

impl MemoryTracker {
    pub fn new(model: &MaltModel, mode: MemoryMode) -> Self {
        Self {
            mode,
            state: model.init_memory(),
            absorbed: 0,
        }
    }

    pub fn memory(&self) -> &MemoryState {
        &self.state
    }

    pub fn absorbed(&self) -> usize {
        self.absorbed
    }

    pub fn absorb(&mut self, model: &MaltModel, z: &Tensor, cond: Option<usize>) -> Result<()> {
        self.state = match self.mode {
            MemoryMode::Recurrent => update_memory(model, z, &self.state, cond)?,
            MemoryMode::LastOnly => update_memory(model, z, &model.init_memory(), cond)?,
            MemoryMode::KvCache { cap } => {
                if self.absorbed + 1 > cap {
                    return Err(Error::MemoryBudget {
                        segments: self.absorbed + 1,
                        cap,
                    });
                }
                let h = update_memory(model, z, &self.state, cond)?;
                if self.absorbed == 0 {
                    h
                } else {
                    self.state.concat_time(&h)?
                }
            }
        };
        self.absorbed += 1;
        Ok(())
    }
}

/// Samples `count` segments, absorbing each into `tracker` once finished.
pub fn generate_segments(
    model: &MaltModel,
    schedule: &DiffusionSchedule,
    tracker: &mut MemoryTracker,
    count: usize,
    cond: Option<usize>,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut seg_rng = rng.fork(i as u64);
        let z = sample_segment(model, schedule, tracker.memory(), cond, cfg, &mut seg_rng)?;
        tracker.absorb(model, &z, cond)?;
        out.push(z);
    }
    Ok(out)
}

fn check_pair(model: &MaltModel, codec: &LatentCodec) -> Result<()> {
    let want = codec.config().segment_latent_shape();
    if want != model.config().latent {
        return Err(Error::Config(format!(
            "codec produces segments {want:?} but the model expects {:?}",
            model.config().latent
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GeneratedVideo {
    pub latents: Vec<Tensor>,
    /// `(N·L, H, W, C)`
    pub frames: Tensor,
    pub memory: MemoryState,
}

/// Generates `n_segments` segments from an empty memory and decodes them.
#[allow(clippy::too_many_arguments)]
pub fn generate_long_video(
    model: &MaltModel,
    codec: &LatentCodec,
    schedule: &DiffusionSchedule,
    n_segments: usize,
    cond: Option<usize>,
    cfg: &SamplerConfig,
    mode: MemoryMode,
    rng: &mut SeededRng,
) -> Result<GeneratedVideo> {
    check_pair(model, codec)?;
    if n_segments == 0 || n_segments % codec.config().segments_per_chunk != 0 {
        return Err(Error::Config(format!(
            "cannot decode {n_segments} segments in chunks of {}",
            codec.config().segments_per_chunk
        )));
    }
    let mut tracker = MemoryTracker::new(model, mode);
    let latents = generate_segments(model, schedule, &mut tracker, n_segments, cond, cfg, rng)?;
    let frames = codec.decode_segments(&latents)?;
    Ok(GeneratedVideo {
        latents,
        frames,
        memory: tracker.state,
    })
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub prefix_latents: Vec<Tensor>,
    pub latents: Vec<Tensor>,
    /// Decoded future frames; `None` when no future segment was requested.
    pub frames: Option<Tensor>,
    /// Memory after the prefix and all predicted segments.
    pub memory: MemoryState,
}

/// Encodes a ground-truth prefix into memory, then samples `n_future` segments.
#[allow(clippy::too_many_arguments)]
pub fn video_prediction_mode(
    model: &MaltModel,
    codec: &LatentCodec,
    schedule: &DiffusionSchedule,
    prefix: &Tensor,
    n_future: usize,
    cond: Option<usize>,
    cfg: &SamplerConfig,
    mode: MemoryMode,
    rng: &mut SeededRng,
) -> Result<Prediction> {
    check_pair(model, codec)?;
    let ccfg = codec.config();
    let seg_frames = ccfg.segment_frames;
    if prefix.rank() != 4 || prefix.shape()[0] % seg_frames != 0 {
        return Err(invalid_shape(format!(
            "prefix {:?} is not a whole number of {seg_frames}-frame segments",
            prefix.shape()
        )));
    }
    if n_future % ccfg.segments_per_chunk != 0 {
        return Err(Error::Config(format!(
            "cannot decode {n_future} segments in chunks of {}",
            ccfg.segments_per_chunk
        )));
    }
    let prefix_latents = codec.encode_long_video(prefix)?;
    let mut tracker = MemoryTracker::new(model, mode);
    for z in &prefix_latents {
        tracker.absorb(model, z, cond)?;
    }
    let latents = generate_segments(model, schedule, &mut tracker, n_future, cond, cfg, rng)?;
    let frames = if latents.is_empty() {
        None
    } else {
        Some(codec.decode_segments(&latents)?)
    };
    Ok(Prediction {
        prefix_latents,
        latents,
        frames,
        memory: tracker.state,
    })
}
