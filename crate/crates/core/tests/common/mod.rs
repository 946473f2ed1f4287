//! Helpers shared by the integration tests.
#![allow(dead_code)]

use malt::diffusion::{rollout_memory_var, DiffusionSchedule, Example, GradPath, MemoryMode};
use malt::harness::{AblationMode, ProbeKind, RunConfig};
use malt::model::{MaltModel, ModelConfig, WindowLayout};
use malt::numerics::{Graph, SeededRng, Tensor, Var};
use malt::Result;

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        hidden: 8,
        heads: 2,
        patch_t: 1,
        patch_s: 2,
        latent: [2, 4, 4, 2],
        num_classes: 3,
        timesteps: 1000,
        layout: WindowLayout::Alternating,
        lora_rank: 4,
        mlp_ratio: 2,
    }
}

/// Adds `N(0, std²)` to every parameter so zero-initialised projections do
/// not hide gradient paths.
pub fn jitter(model: &mut MaltModel, std: f64, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += std * rng.normal();
        }
    }
}

pub fn tiny_jittered_model(seed: u64) -> MaltModel {
    let mut m = MaltModel::new(tiny_model_config(), &mut SeededRng::new(seed)).unwrap();
    jitter(&mut m, 0.2, seed + 100);
    m
}

pub fn random_example(shape: [usize; 4], segments: usize, cond: Option<usize>, seed: u64) -> Example {
    let mut rng = SeededRng::new(seed);
    Example {
        segments: (0..segments).map(|_| Tensor::randn(&shape, &mut rng).unwrap()).collect(),
        cond,
    }
}

/// Relative error with a floor on the scale so exactly-zero gradients do not
/// divide by zero: `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// One fixed draw of the v-loss: `n` context segments, timestep `t`, and the
/// seed for ε and the memory perturbations.
#[derive(Clone, Copy, Debug)]
pub struct LossDraw {
    pub n: usize,
    pub t: usize,
    pub cond: Option<usize>,
    pub sigma_mem: f64,
    pub seed: u64,
}

/// The v-loss for `draw` with every memory encode on the tape and no
/// stop-grad, so the tape gradient is the true derivative of the value.
pub fn full_v_loss(g: &mut Graph, model: &MaltModel, example: &Example, draw: LossDraw) -> Result<Var> {
    let schedule = DiffusionSchedule::from_config(&Default::default())?;
    let mut rng = SeededRng::new(draw.seed);
    let eps = Tensor::randn(&model.config().latent, &mut rng)?;
    let memory = rollout_memory_var(
        g,
        model,
        &example.segments[..draw.n],
        draw.sigma_mem,
        draw.cond,
        MemoryMode::Recurrent,
        GradPath::Tape { stop_grad: false },
        &mut rng,
    )?;
    let z0 = &example.segments[draw.n];
    let zt = g.constant(schedule.q_sample(z0, draw.t, &eps)?);
    let target = g.constant(schedule.v_target(z0, &eps, draw.t)?);
    let out = model.forward_var(g, zt, draw.t, &memory, draw.cond, false)?;
    g.mse(out.v.expect("full pass"), target)
}

/// Largest error, under the `|autodiff| + 1e-8` relative metric, between the
/// tape gradient of [`full_v_loss`] and central differences at step `h`,
/// probing up to `per_param` coordinates of every parameter tensor.
pub fn model_loss_gradcheck(model: &MaltModel, example: &Example, draw: LossDraw, per_param: usize, h: f64) -> Result<f64> {
    let loss_at = |m: &MaltModel| -> Result<f64> {
        let mut g = Graph::no_grad();
        let l = full_v_loss(&mut g, m, example, draw)?;
        Ok(g.value(l).data()[0])
    };
    let mut g = Graph::new();
    let loss = full_v_loss(&mut g, model, example, draw)?;
    let grads = g.backward(loss)?.param_grads(&g, model.params());
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let len = model.params().get(id).len();
        let stride = (len / per_param).max(1);
        for i in (0..len).step_by(stride).take(per_param) {
            let mut plus = model.clone();
            plus.params_mut().get_mut(id).data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(id).data_mut()[i] -= h;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
            worst = worst.max((numeric - analytic).abs() / (analytic.abs() + 1e-8));
        }
    }
    Ok(worst)
}

/// A random composition of differentiable ops on a `(r, c)` leaf, reduced to
/// a scalar by a random weighting.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub shape: [usize; 2],
    pub ops: Vec<usize>,
    consts: Vec<Tensor>,
    square: Tensor,
    weights: Tensor,
    scalars: Vec<f64>,
    pub input: Tensor,
}

pub const RANDOM_GRAPH_OPS: usize = 13;

impl RandomGraph {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let shape = [2 + rng.below(3), 3 + rng.below(3)];
        let n_ops = 2 + rng.below(6);
        let ops = (0..n_ops).map(|_| rng.below(RANDOM_GRAPH_OPS)).collect();
        let consts = (0..n_ops).map(|_| Tensor::randn(&shape, &mut rng).unwrap()).collect();
        let square = Tensor::randn(&[shape[1], shape[1]], &mut rng).unwrap().scale(0.5);
        let weights = Tensor::randn(&shape, &mut rng).unwrap();
        let scalars = (0..n_ops).map(|_| 0.5 + rng.uniform()).collect();
        let input = Tensor::randn(&shape, &mut rng).unwrap();
        Self {
            shape,
            ops,
            consts,
            square,
            weights,
            scalars,
            input,
        }
    }

    pub fn build(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [r, c] = self.shape;
        let mut x = x;
        for (k, &op) in self.ops.iter().enumerate() {
            let k_const = g.constant(self.consts[k].clone());
            x = match op {
                0 => g.tanh(x),
                1 => g.silu(x),
                2 => g.gelu(x),
                3 => g.softmax(x, 1)?,
                4 => g.layer_norm(x, None, None)?,
                5 => g.mul(x, k_const)?,
                6 => g.add(x, k_const)?,
                7 => {
                    let t = g.tanh(x);
                    g.mul(x, t)?
                }
                8 => {
                    let w = g.constant(self.square.clone());
                    g.matmul(x, w)?
                }
                9 => g.scale(x, self.scalars[k]),
                10 => {
                    let both = g.concat(&[k_const, x], 1)?;
                    let mixed = g.narrow(both, 1, 1, c)?;
                    g.add(mixed, x)?
                }
                11 => {
                    let t = g.permute(x, &[1, 0])?;
                    let t = g.reshape(t, &[c * r])?;
                    let t = g.tanh(t);
                    let t = g.reshape(t, &[c, r])?;
                    g.permute(t, &[1, 0])?
                }
                _ => {
                    let s = g.sub(k_const, x)?;
                    g.add_scalar(s, self.scalars[k])
                }
            };
        }
        let w = g.constant(self.weights.clone());
        let y = g.mul(x, w)?;
        Ok(g.sum(y))
    }
}

/// Closed-form posterior-mean denoiser for data `N(μ, s²)` per coordinate,
/// returned as a v-prediction at cumulative signal level `a = ᾱ`.
pub fn gaussian_oracle_v(z: &Tensor, a: f64, mu: f64, s: f64) -> Tensor {
    let denom = a * s * s + 1.0 - a;
    z.map(|z| {
        let z0 = mu + s * s * a.sqrt() * (z - a.sqrt() * mu) / denom;
        let eps = (z - a.sqrt() * z0) / (1.0 - a).sqrt();
        a.sqrt() * eps - (1.0 - a).sqrt() * z0
    })
}

/// Exact probability-flow endpoint at time 0 for data `N(μ, s²)` starting
/// from `z_T` with signal level `a_T`.
pub fn gaussian_flow_endpoint(z_t: &Tensor, a_t: f64, mu: f64, s: f64) -> Tensor {
    let scale = s / (a_t * s * s + 1.0 - a_t).sqrt();
    z_t.map(|z| mu + scale * (z - a_t.sqrt() * mu))
}

/// A drift-probe run small enough for end-to-end plumbing tests.
pub fn quick_config() -> RunConfig {
    let mut cfg = RunConfig::drift_probe();
    cfg.name = "quick".into();
    cfg.dataset.train_examples = 8;
    cfg.dataset.eval_examples = 2;
    cfg.codec.hidden = 8;
    cfg.codec_train.steps = 5;
    cfg.codec_train.batch_size = 2;
    cfg.model.depth = 2;
    cfg.model.hidden = 8;
    cfg.train.steps = 4;
    cfg.train.batch_size = 2;
    cfg.sampler.steps = 3;
    cfg.eval.rollout_segments = 2;
    cfg.ablation = AblationMode::default();
    if let ProbeKind::Drift(d) = &mut cfg.dataset.probe {
        d.segments = 3;
    }
    cfg
}
