//! Correlated noise prior and the segment-index prior `P(n)`.

use crate::error::{contract, invalid_shape, Result};
use crate::numerics::{SeededRng, Tensor};

/// Noise whose temporal frames share a base component:
/// `ε_i = (α·ε_base + ε_ind,i) / √(1 + α²)`. Every frame stays `N(0, I)`
/// and matching coordinates of two frames correlate with `α² / (1 + α²)`.
/// The leading axis of `shape` is the frame axis.
pub fn sample_correlated_noise(shape: &[usize], alpha: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(contract(format!("correlation weight must be finite and >= 0, got {alpha}")));
    }
    if shape.len() < 2 {
        return Err(invalid_shape(format!("noise shape {shape:?} needs a frame axis")));
    }
    let frames = shape[0];
    let per_frame: usize = shape[1..].iter().product();
    let base = Tensor::randn(&shape[1..], rng)?;
    let mut out = Tensor::randn(shape, rng)?;
    if alpha == 0.0 {
        return Ok(out);
    }
    let norm = (1.0 + alpha * alpha).sqrt();
    for f in 0..frames {
        let frame = &mut out.data_mut()[f * per_frame..(f + 1) * per_frame];
        for (x, b) in frame.iter_mut().zip(base.data()) {
            *x = (alpha * b + *x) / norm;
        }
    }
    Ok(out)
}

/// `P(n)` over `0..N`: one half on `n = 0`, the rest spread evenly.
pub fn segment_index_probs(n_max: usize) -> Vec<f64> {
    match n_max {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => {
            let rest = 1.0 / (2.0 * (n_max - 1) as f64);
            std::iter::once(0.5).chain(std::iter::repeat(rest).take(n_max - 1)).collect()
        }
    }
}

/// Draws the number of context segments `n ∈ 0..N` from `P(n)`.
pub fn sample_segment_index(n_max: usize, rng: &mut SeededRng) -> usize {
    assert!(n_max >= 1, "need at least one segment");
    if n_max == 1 || rng.bernoulli(0.5) {
        0
    } else {
        1 + rng.below(n_max - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_alpha_is_plain_normal() {
        let a = sample_correlated_noise(&[3, 4], 0.0, &mut SeededRng::new(1)).unwrap();
        let mut rng = SeededRng::new(1);
        let _base = Tensor::randn(&[4], &mut rng).unwrap();
        let b = Tensor::randn(&[3, 4], &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_alpha_shares_frames() {
        let n = sample_correlated_noise(&[3, 50], 1e8, &mut SeededRng::new(2)).unwrap();
        let d = n.data();
        for i in 0..50 {
            assert!((d[i] - d[50 + i]).abs() < 1e-6);
            assert!((d[i] - d[100 + i]).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_alpha_rejected() {
        assert!(sample_correlated_noise(&[2, 2], -0.1, &mut SeededRng::new(0)).is_err());
        assert!(sample_correlated_noise(&[2, 2], f64::NAN, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn index_prior() {
        assert_eq!(segment_index_probs(5), vec![0.5, 0.125, 0.125, 0.125, 0.125]);
        for n in 1..20 {
            assert!((segment_index_probs(n).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut rng = SeededRng::new(3);
        assert!((0..100).all(|_| sample_segment_index(1, &mut rng) == 0));
        assert!((0..1000).all(|_| sample_segment_index(4, &mut rng) < 4));
    }
}
