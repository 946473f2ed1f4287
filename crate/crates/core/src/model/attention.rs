//! Multi-head attention on the tape, plus the temporal relative-bias indexing
//! used by memory attention.

use std::rc::Rc;

use crate::error::{invalid_shape, Result};
use crate::nn::{Init, Linear};
use crate::numerics::{Graph, ParamStore, SeededRng, Var};

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttnProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnProj {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        out_init: Init,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut lin = |part: &str, init: Init, bias: bool, rng: &mut SeededRng| {
            Linear::new(store, &format!("{name}.{part}"), (width, width), init, bias, rng)
        };
        // a key bias only shifts every score of a query equally, which softmax ignores
        Ok(Self {
            q: lin("q", Init::FanIn(1.0), true, rng)?,
            k: lin("k", Init::FanIn(1.0), false, rng)?,
            v: lin("v", Init::FanIn(1.0), true, rng)?,
            o: lin("o", out_init, true, rng)?,
        })
    }
}

pub struct Attended {
    /// `(B, S_q, C)`
    pub out: Var,
    /// `(B, heads, S_q, S_k)`, rows sum to one.
    pub weights: Var,
}

fn split_heads(g: &mut Graph, x: Var, heads: usize, axes: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, n, heads, c / heads])?;
    g.permute(r, axes)
}

/// `softmax(q kᵀ / √d_h + bias) v` per head, with `q` from `q_in (B, S_q, C)`
/// and keys/values from `kv_in (B, S_k, C)`. `bias` has shape `(S_q, S_k)`
/// and is shared across batch entries and heads.
pub fn attend(
    g: &mut Graph,
    ps: &ParamStore,
    proj: &AttnProj,
    heads: usize,
    q_in: Var,
    kv_in: Var,
    bias: Option<Var>,
) -> Result<Attended> {
    let qs = g.shape(q_in).to_vec();
    let ks = g.shape(kv_in).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || qs[2] % heads != 0 {
        return Err(invalid_shape(format!(
            "attention inputs {qs:?} / {ks:?} with {heads} heads"
        )));
    }
    let (b, sq, c) = (qs[0], qs[1], qs[2]);
    let q = proj.q.forward(g, ps, q_in)?;
    let k = proj.k.forward(g, ps, kv_in)?;
    let v = proj.v.forward(g, ps, kv_in)?;
    let q = split_heads(g, q, heads, &[0, 2, 1, 3])?;
    let kt = split_heads(g, k, heads, &[0, 2, 3, 1])?;
    let v = split_heads(g, v, heads, &[0, 2, 1, 3])?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / ((c / heads) as f64).sqrt());
    if let Some(bias) = bias {
        scores = g.add(scores, bias)?;
    }
    let weights = g.softmax(scores, 3)?;
    let o = g.matmul(weights, v)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, sq, c])?;
    let out = proj.o.forward(g, ps, o)?;
    Ok(Attended { out, weights })
}

/// Offsets between `n_q` current temporal tokens at positions `0..n_q` and a key
/// sequence of `n_mem` memory tokens at `-n_mem..0` followed by the current tokens,
/// clamped to `±2·n_q` and shifted into `0..=4·n_q` for table lookup.
pub fn relative_indices(n_q: usize, n_mem: usize) -> Rc<[usize]> {
    let span = 2 * n_q as i64;
    let mut idx = Vec::with_capacity(n_q * (n_mem + n_q));
    for i in 0..n_q as i64 {
        for j in 0..(n_mem + n_q) as i64 {
            let key_pos = j - n_mem as i64;
            let delta = (i - key_pos).clamp(-span, span);
            idx.push((delta + span) as usize);
        }
    }
    idx.into()
}

/// Table size for `n_q` temporal tokens.
pub fn relative_table_len(n_q: usize) -> usize {
    4 * n_q + 1
}
