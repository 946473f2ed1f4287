//! Attention cost accounting and a wall-clock probe.

use std::time::Instant;

use crate::error::{contract, Result};
use crate::numerics::{Graph, SeededRng, Tensor};

/// Multiply-adds of the attention core (scores plus weighted sum) for memory
/// attention: every one of the `h·w` spatial locations attends from `l` query
/// tokens to `2l` keys, so the count is `Θ(l²·h·w)`.
pub fn memory_attention_flops(l: usize, h: usize, w: usize, width: usize) -> u64 {
    let (l, hw, c) = (l as u64, (h * w) as u64, width as u64);
    2 * hw * l * (2 * l) * c
}

/// The same core over all `l·h·w` tokens at once: `Θ((l·h·w)²)`.
pub fn full_attention_flops(l: usize, h: usize, w: usize, width: usize) -> u64 {
    let (n, c) = ((l * h * w) as u64, width as u64);
    2 * n * n * c
}

/// Median wall-clock seconds of the memory-attention core at the given token
/// extents, over `reps` repetitions.
pub fn measure_memory_attention(l: usize, hw: usize, width: usize, reps: usize) -> Result<f64> {
    if l == 0 || hw == 0 || width == 0 || reps == 0 {
        return Err(contract("cost probe extents must be positive"));
    }
    let mut rng = SeededRng::new(0);
    let q = Tensor::randn(&[hw, l, width], &mut rng)?;
    let kt = Tensor::randn(&[hw, width, 2 * l], &mut rng)?;
    let v = Tensor::randn(&[hw, 2 * l, width], &mut rng)?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let mut g = Graph::no_grad();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(kt.clone()), g.constant(v.clone()));
        let s = g.matmul(qv, kv)?;
        let a = g.softmax(s, 2)?;
        let o = g.matmul(a, vv)?;
        std::hint::black_box(g.value(o));
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[reps / 2])
}
