//! The denoiser: a diffusion transformer over patchified latent segments with a
//! memory cross-attention sublayer at the start of every block.
//!
//! Tokens are laid out time-major, so a `(n_tok, c′)` stream reshapes to
//! `(n_t, n_s, c′)`. Each block
//!
//! 1. normalizes its input and records it, reshaped to `(n_s, n_t, c′)`, as the
//!    block's hidden state;
//! 2. lets every spatial location attend over `[memory, hidden]` along time,
//!    with a learned bias indexed by temporal offset (no modulation here);
//! 3. runs AdaLN-modulated self-attention, spatial-only on even blocks and
//!    over all tokens on odd blocks under the default layout;
//! 4. runs an AdaLN-modulated MLP.
//!
//! Modulation comes from `silu(t-embedding + class embedding)` through a
//! rank-`r` two-layer map whose output layer starts at zero, so every residual
//! branch is switched off at initialization.

pub mod attention;
pub mod cost;
pub mod patch;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid_shape, Error, Result};
use crate::nn::{Init, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};
use attention::{attend, relative_indices, relative_table_len, AttnProj};
pub use patch::PatchGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLayout {
    /// Spatial-only on even blocks, full spatiotemporal on odd blocks.
    Alternating,
    SpatialOnly,
    Spatiotemporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Spatial,
    Spatiotemporal,
}

impl WindowLayout {
    pub fn kind(self, block: usize) -> AttentionKind {
        match self {
            WindowLayout::Alternating if block % 2 == 0 => AttentionKind::Spatial,
            WindowLayout::Alternating => AttentionKind::Spatiotemporal,
            WindowLayout::SpatialOnly => AttentionKind::Spatial,
            WindowLayout::Spatiotemporal => AttentionKind::Spatiotemporal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `d`
    pub depth: usize,
    /// `c′`
    pub hidden: usize,
    pub heads: usize,
    pub patch_t: usize,
    pub patch_s: usize,
    /// `(l, h, w, c)`
    pub latent: [usize; 4],
    /// Class vocabulary size; index `num_classes` is the null condition.
    pub num_classes: usize,
    /// Largest accepted timestep `T`.
    pub timesteps: usize,
    pub layout: WindowLayout,
    pub lora_rank: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden: 128,
            heads: 4,
            patch_t: 1,
            patch_s: 2,
            latent: [4, 8, 8, 8],
            num_classes: 0,
            timesteps: 1000,
            layout: WindowLayout::Alternating,
            lora_rank: 8,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.lora_rank == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, heads, lora_rank and mlp_ratio must be positive".into()));
        }
        if self.hidden == 0 || self.hidden % self.heads != 0 || self.hidden % 2 != 0 {
            return Err(invalid_shape(format!(
                "hidden width {} must be even and divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.latent.contains(&0) {
            return Err(invalid_shape(format!("latent {:?} has a zero extent", self.latent)));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.latent, self.patch_t, self.patch_s)
    }

    /// Shape of one layer's memory for `n_t` temporal tokens:
    /// `(h·w/p_s², l/p_l, c′)`.
    pub fn memory_shape(&self) -> Result<[usize; 3]> {
        let g = self.grid()?;
        Ok([g.spatial_tokens(), g.temporal_tokens(), self.hidden])
    }
}

/// Per-layer recurrent context. Every layer holds `(n_s, m_t, c′)`; `m_t`
/// equals the segment's temporal token count except in the growing kv-cache
/// ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub layers: Vec<Tensor>,
}

impl MemoryState {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Temporal length `m_t` of the stored states.
    pub fn temporal_len(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[1])
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(Tensor::len).sum()
    }

    pub fn byte_size(&self) -> usize {
        self.num_scalars() * std::mem::size_of::<f64>()
    }

    /// Appends `other` along the temporal axis of every layer.
    pub fn concat_time(&self, other: &MemoryState) -> Result<MemoryState> {
        if self.depth() != other.depth() {
            return Err(invalid_shape("memory depth mismatch"));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Tensor::concat(&[a, b], 1))
            .collect::<Result<_>>()?;
        Ok(MemoryState { layers })
    }

    /// Binds every layer as a constant, which is the stop-gradient boundary.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.layers.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn from_vars(g: &Graph, vars: &[Var]) -> MemoryState {
        MemoryState {
            layers: vars.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    kind: AttentionKind,
    mem: AttnProj,
    rel_bias: ParamId,
    attn: AttnProj,
    mlp_up: Linear,
    mlp_down: Linear,
    ada_down: Linear,
    ada_up: Linear,
}

#[derive(Clone, Debug)]
struct Layers {
    embed: Linear,
    pos: ParamId,
    t_mlp: [Linear; 2],
    class_table: ParamId,
    blocks: Vec<Block>,
    final_ada_down: Linear,
    final_ada_up: Linear,
    final_out: Linear,
}

/// Tape handles produced by one forward pass.
pub struct ModelOutput {
    /// `(l, h, w, c)`; absent when only hidden states were requested.
    pub v: Option<Var>,
    /// One `(n_s, n_t, c′)` state per block.
    pub hidden: Vec<Var>,
    /// Memory-attention weights per block, `(n_s, heads, n_t, m_t + n_t)`.
    pub memory_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MaltModel {
    config: ModelConfig,
    grid: PatchGrid,
    params: ParamStore,
    layers: Layers,
}

impl MaltModel {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let c = config.hidden;
        let r = config.lora_rank;
        let mut ps = ParamStore::new();
        let embed = Linear::new(&mut ps, "embed", (grid.patch_dim(), c), Init::FanIn(1.0), true, rng)?;
        let pos = ps.add("pos", Init::Normal(0.02).tensor(&[grid.num_tokens(), c], c, rng)?)?;
        let t_mlp = [
            Linear::new(&mut ps, "t_mlp.0", (c, c), Init::FanIn(1.0), true, rng)?,
            Linear::new(&mut ps, "t_mlp.1", (c, c), Init::FanIn(1.0), true, rng)?,
        ];
        let class_table = ps.add(
            "class_table",
            Init::Normal(0.02).tensor(&[config.num_classes + 1, c], c, rng)?,
        )?;
        let table = relative_table_len(grid.temporal_tokens());
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let n = format!("blocks.{i}");
            blocks.push(Block {
                kind: config.layout.kind(i),
                mem: AttnProj::new(&mut ps, &format!("{n}.mem"), c, Init::Zeros, rng)?,
                rel_bias: ps.add(format!("{n}.mem.rel_bias"), Tensor::zeros(&[table])?)?,
                attn: AttnProj::new(&mut ps, &format!("{n}.attn"), c, Init::FanIn(1.0), rng)?,
                mlp_up: Linear::new(
                    &mut ps,
                    &format!("{n}.mlp.up"),
                    (c, config.mlp_ratio * c),
                    Init::FanIn(1.0),
                    true,
                    rng,
                )?,
                mlp_down: Linear::new(
                    &mut ps,
                    &format!("{n}.mlp.down"),
                    (config.mlp_ratio * c, c),
                    Init::FanIn(1.0),
                    true,
                    rng,
                )?,
                ada_down: Linear::new(&mut ps, &format!("{n}.ada.down"), (c, r), Init::FanIn(1.0), true, rng)?,
                ada_up: Linear::new(&mut ps, &format!("{n}.ada.up"), (r, 6 * c), Init::Zeros, true, rng)?,
            });
        }
        let layers = Layers {
            embed,
            pos,
            t_mlp,
            class_table,
            blocks,
            final_ada_down: Linear::new(&mut ps, "final.ada.down", (c, r), Init::FanIn(1.0), true, rng)?,
            final_ada_up: Linear::new(&mut ps, "final.ada.up", (r, 2 * c), Init::Zeros, true, rng)?,
            final_out: Linear::new(&mut ps, "final.out", (c, grid.patch_dim()), Init::FanIn(0.5), true, rng)?,
        };
        Ok(Self {
            config,
            grid,
            params: ps,
            layers,
        })
    }

    /// Rebuilds a model around previously trained parameters.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, &mut SeededRng::new(0))?;
        model.params.adopt(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `h⁰`: all-zero states, one per block.
    pub fn init_memory(&self) -> MemoryState {
        let [ns, nt, c] = [self.grid.spatial_tokens(), self.grid.temporal_tokens(), self.config.hidden];
        MemoryState {
            layers: (0..self.config.depth)
                .map(|_| Tensor::zeros(&[ns, nt, c]).expect("validated extents"))
                .collect(),
        }
    }

    fn check_memory(&self, g: &Graph, memory: &[Var]) -> Result<()> {
        if memory.len() != self.config.depth {
            return Err(invalid_shape(format!(
                "memory has {} layers, model depth is {}",
                memory.len(),
                self.config.depth
            )));
        }
        let (ns, c) = (self.grid.spatial_tokens(), self.config.hidden);
        let mt = g.shape(memory[0])[1];
        for &m in memory {
            let s = g.shape(m);
            if s.len() != 3 || s[0] != ns || s[1] != mt || s[2] != c || mt == 0 {
                return Err(invalid_shape(format!(
                    "memory layer {s:?} incompatible with state ({ns}, _, {c})"
                )));
            }
        }
        Ok(())
    }

    fn check_cond(&self, cond: Option<usize>) -> Result<usize> {
        match cond {
            None => Ok(self.config.num_classes),
            Some(k) if k < self.config.num_classes => Ok(k),
            Some(k) => Err(contract(format!(
                "class {k} outside vocabulary of {}",
                self.config.num_classes
            ))),
        }
    }

    /// Sinusoidal embedding of `t` with `c′` channels.
    pub fn timestep_embedding(&self, t: f64) -> Tensor {
        let half = self.config.hidden / 2;
        let mut data = vec![0.0; 2 * half];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data[i] = (t * freq).sin();
            data[half + i] = (t * freq).cos();
        }
        Tensor::new(&[2 * half], data).expect("non-empty")
    }

    fn condition(&self, g: &mut Graph, t: usize, class: usize) -> Result<Var> {
        let ps = &self.params;
        let temb = g.constant(self.timestep_embedding(t as f64).reshape(&[1, self.config.hidden])?);
        let h = self.layers.t_mlp[0].forward(g, ps, temb)?;
        let h = g.silu(h);
        let temb = self.layers.t_mlp[1].forward(g, ps, h)?;
        let c = self.config.hidden;
        let table = g.param(ps, self.layers.class_table);
        let idx: Rc<[usize]> = (class * c..(class + 1) * c).collect();
        let cemb = g.gather(table, idx, &[1, c])?;
        let cvec = g.add(temb, cemb)?;
        Ok(g.silu(cvec))
    }

    fn modulation(&self, g: &mut Graph, down: &Linear, up: &Linear, cvec: Var, groups: usize) -> Result<Vec<Var>> {
        let ps = &self.params;
        let h = down.forward(g, ps, cvec)?;
        let h = g.silu(h);
        let m = up.forward(g, ps, h)?;
        g.split(m, 1, &vec![self.config.hidden; groups])
    }

    fn modulate(&self, g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let h = g.layer_norm(x, None, None)?;
        let s = g.add_scalar(scale, 1.0);
        let h = g.mul(h, s)?;
        g.add(h, shift)
    }

    /// Memory-attention sublayer of block `layer` applied to a recorded state
    /// `(n_s, n_t, c′)` and a memory `(n_s, m_t, c′)`. Returns the sublayer
    /// output (before the residual add) and the attention weights.
    pub fn memory_attention_var(&self, g: &mut Graph, layer: usize, state: Var, memory: Var) -> Result<(Var, Var)> {
        let block = self
            .layers
            .blocks
            .get(layer)
            .ok_or_else(|| contract(format!("layer {layer} outside depth {}", self.config.depth)))?;
        let (ss, ms) = (g.shape(state).to_vec(), g.shape(memory).to_vec());
        if ss.len() != 3 || ms.len() != 3 || ss[0] != ms[0] || ss[2] != ms[2] {
            return Err(invalid_shape(format!("memory {ms:?} incompatible with state {ss:?}")));
        }
        let (nt, mt) = (ss[1], ms[1]);
        if nt != self.grid.temporal_tokens() {
            return Err(invalid_shape(format!(
                "state has {nt} temporal tokens, model expects {}",
                self.grid.temporal_tokens()
            )));
        }
        let kv = g.concat(&[memory, state], 1)?;
        let table = g.param(&self.params, block.rel_bias);
        let bias = g.gather(table, relative_indices(nt, mt), &[nt, mt + nt])?;
        let a = attend(g, &self.params, &block.mem, self.config.heads, state, kv, Some(bias))?;
        Ok((a.out, a.weights))
    }

    /// Value-level wrapper of [`Self::memory_attention_var`].
    pub fn memory_attention(&self, layer: usize, state: &Tensor, memory: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::no_grad();
        let s = g.constant(state.clone());
        let m = g.constant(memory.clone());
        let (o, w) = self.memory_attention_var(&mut g, layer, s, m)?;
        Ok((g.value(o).clone(), g.value(w).clone()))
    }

    /// Full denoiser pass on a tape. With `hidden_only`, evaluation stops once
    /// the last block's hidden state has been recorded.
    pub fn forward_var(
        &self,
        g: &mut Graph,
        z: Var,
        t: usize,
        memory: &[Var],
        cond: Option<usize>,
        hidden_only: bool,
    ) -> Result<ModelOutput> {
        if t > self.config.timesteps {
            return Err(contract(format!("timestep {t} outside [0, {}]", self.config.timesteps)));
        }
        self.check_memory(g, memory)?;
        let class = self.check_cond(cond)?;
        let ps = &self.params;
        let (nt, ns, c) = (self.grid.temporal_tokens(), self.grid.spatial_tokens(), self.config.hidden);
        let n_tok = nt * ns;

        let tokens = self.grid.patchify_var(g, z)?;
        let x = self.layers.embed.forward(g, ps, tokens)?;
        let pos = g.param(ps, self.layers.pos);
        let mut x = g.add(x, pos)?;
        let cvec = self.condition(g, t, class)?;

        let mut hidden = Vec::with_capacity(self.config.depth);
        let mut memory_weights = Vec::with_capacity(self.config.depth);
        for (i, block) in self.layers.blocks.iter().enumerate() {
            // hidden state: normalized block input, one sequence per spatial location
            let hs = g.layer_norm(x, None, None)?;
            let hs = g.reshape(hs, &[nt, ns, c])?;
            let hs = g.permute(hs, &[1, 0, 2])?;
            hidden.push(hs);
            if hidden_only && i + 1 == self.config.depth {
                return Ok(ModelOutput {
                    v: None,
                    hidden,
                    memory_weights,
                });
            }
            let (m_out, m_w) = self.memory_attention_var(g, i, hs, memory[i])?;
            memory_weights.push(m_w);
            let m_out = g.permute(m_out, &[1, 0, 2])?;
            let m_out = g.reshape(m_out, &[n_tok, c])?;
            x = g.add(x, m_out)?;

            let m = self.modulation(g, &block.ada_down, &block.ada_up, cvec, 6)?;
            let h = self.modulate(g, x, m[0], m[1])?;
            let seq = match block.kind {
                AttentionKind::Spatial => g.reshape(h, &[nt, ns, c])?,
                AttentionKind::Spatiotemporal => g.reshape(h, &[1, n_tok, c])?,
            };
            let a = attend(g, ps, &block.attn, self.config.heads, seq, seq, None)?;
            let a = g.reshape(a.out, &[n_tok, c])?;
            let a = g.mul(a, m[2])?;
            x = g.add(x, a)?;

            let h = self.modulate(g, x, m[3], m[4])?;
            let h = block.mlp_up.forward(g, ps, h)?;
            let h = g.gelu(h);
            let h = block.mlp_down.forward(g, ps, h)?;
            let h = g.mul(h, m[5])?;
            x = g.add(x, h)?;
        }
        let m = self.modulation(g, &self.layers.final_ada_down, &self.layers.final_ada_up, cvec, 2)?;
        let h = self.modulate(g, x, m[0], m[1])?;
        let out = self.layers.final_out.forward(g, ps, h)?;
        let v = self.grid.unpatchify_var(g, out)?;
        Ok(ModelOutput {
            v: Some(v),
            hidden,
            memory_weights,
        })
    }

    /// `(v̂, new hidden states)` for a noisy segment at timestep `t`.
    pub fn forward(
        &self,
        z_t: &Tensor,
        t: usize,
        memory: &MemoryState,
        cond: Option<usize>,
    ) -> Result<(Tensor, MemoryState)> {
        let mut g = Graph::no_grad();
        let z = g.constant(z_t.clone());
        let mem = memory.bind(&mut g);
        let out = self.forward_var(&mut g, z, t, &mem, cond, false)?;
        let v = g.value(out.v.expect("full pass")).clone();
        Ok((v, MemoryState::from_vars(&g, &out.hidden)))
    }

    /// Hidden states of a clean segment at `t = 0` on a tape. With `stop_grad`
    /// the previous memory is cut off from the gradient.
    pub fn encode_memory_var(
        &self,
        g: &mut Graph,
        z: Var,
        prev: &[Var],
        cond: Option<usize>,
        stop_grad: bool,
    ) -> Result<Vec<Var>> {
        let prev: Vec<Var> = if stop_grad {
            prev.iter().map(|&m| g.detach(m)).collect()
        } else {
            prev.to_vec()
        };
        Ok(self.forward_var(g, z, 0, &prev, cond, true)?.hidden)
    }

    /// Absorbs a clean segment into memory.
    pub fn encode_memory(&self, z: &Tensor, prev: &MemoryState, cond: Option<usize>) -> Result<MemoryState> {
        let mut g = Graph::no_grad();
        let zv = g.constant(z.clone());
        let mem = prev.bind(&mut g);
        let hidden = self.encode_memory_var(&mut g, zv, &mem, cond, true)?;
        Ok(MemoryState::from_vars(&g, &hidden))
    }
}
