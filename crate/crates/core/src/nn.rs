//! Small parameterized building blocks shared by the codec and the denoiser.

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
}

impl Init {
    pub fn tensor(self, shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Result<Tensor> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Ok(Tensor::randn(shape, rng)?.scale(std)),
            Init::FanIn(gain) => Ok(Tensor::randn(shape, rng)?.scale(gain / (fan_in as f64).sqrt())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (fan_in, fan_out): (usize, usize),
        init: Init,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init.tensor(&[fan_in, fan_out], fan_in, rng)?,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])?)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }
}

/// Pre-norm residual MLP: `x + W2·gelu(W1·LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct ResidualMlp {
    pub up: Linear,
    pub down: Linear,
}

impl ResidualMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), (width, hidden), Init::FanIn(1.0), true, rng)?,
            down: Linear::new(
                store,
                &format!("{name}.down"),
                (hidden, width),
                Init::FanIn(0.5),
                true,
                rng,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = g.layer_norm(x, None, None)?;
        let h = self.up.forward(g, ps, h)?;
        let h = g.gelu(h);
        let h = self.down.forward(g, ps, h)?;
        g.add(x, h)
    }
}
