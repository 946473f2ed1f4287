//! Schedule and parameterization identities, the stop-grad boundary, and the
//! statistics of the two priors used in training.

mod common;

use common::*;
use malt::diffusion::schedule::{eps_from_v, mix, v_from, v_from_eps, z0_from_v};
use malt::diffusion::{
    make_schedule, rollout_memory_var, sample_correlated_noise, sample_segment_index, segment_index_probs,
    DiffusionSchedule, GradPath, MemoryMode,
};
use malt::model::{MaltModel, ModelConfig};
use malt::numerics::{Graph, SeededRng, Tensor};
use proptest::prelude::*;

fn linear_schedule() -> DiffusionSchedule {
    make_schedule(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn terminal_signal_level() {
    let s = linear_schedule();
    // direct product of (1 - β_t) for the linear schedule
    let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
    assert!((s.alpha_bar(1000) - direct).abs() < 1e-15);
    assert!((s.alpha_bar(1000) / 4.0e-5 - 1.0).abs() < 0.1, "{}", s.alpha_bar(1000));
    assert_eq!(s.alpha_bar(0), 1.0);
}

#[test]
fn v_loss_is_a_reweighted_z0_loss() {
    // ẑ0 − z0 = −√(1−ᾱ)(v̂ − v), so ‖v̂ − v‖² = ‖ẑ0 − z0‖² / (1 − ᾱ) at every t
    let s = linear_schedule();
    let mut rng = SeededRng::new(1);
    for t in [1, 10, 250, 500, 999, 1000] {
        let a = s.alpha_bar(t);
        let z0 = Tensor::randn(&[16], &mut rng).unwrap();
        let eps = Tensor::randn(&[16], &mut rng).unwrap();
        let v_hat = Tensor::randn(&[16], &mut rng).unwrap();
        let zt = mix(&z0, &eps, a).unwrap();
        let v = v_from(&z0, &eps, a).unwrap();
        let z0_hat = z0_from_v(&zt, &v_hat, a).unwrap();
        let v_loss: f64 = v_hat.sub(&v).unwrap().data().iter().map(|d| d * d).sum();
        let z_loss: f64 = z0_hat.sub(&z0).unwrap().data().iter().map(|d| d * d).sum();
        let ratio = v_loss / (z_loss / (1.0 - a));
        assert!((ratio - 1.0).abs() < 1e-9, "t {t}: {ratio}");
    }
}

proptest! {
    #[test]
    fn parameterizations_roundtrip(seed in any::<u64>(), t in 1usize..=1000) {
        let s = linear_schedule();
        let a = s.alpha_bar(t);
        let mut rng = SeededRng::new(seed);
        let z0 = Tensor::randn(&[6], &mut rng).unwrap();
        let eps = Tensor::randn(&[6], &mut rng).unwrap();
        let zt = s.q_sample(&z0, t, &eps).unwrap();
        let v = s.v_target(&z0, &eps, t).unwrap();
        prop_assert!(s.z0_from_v(&zt, &v, t).unwrap().max_abs_diff(&z0).unwrap() < 1e-12);
        prop_assert!(eps_from_v(&zt, &v, a).unwrap().max_abs_diff(&eps).unwrap() < 1e-12);
        prop_assert!(v_from_eps(&zt, &eps, a).unwrap().max_abs_diff(&v).unwrap() < 1e-12);
    }

    #[test]
    fn segment_index_is_in_range(n_max in 1usize..9, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        for _ in 0..50 {
            prop_assert!(sample_segment_index(n_max, &mut rng) < n_max);
        }
        let p = segment_index_probs(n_max);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn ks_normal(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let cdf = |x: f64| {
        // Abramowitz–Stegun 7.1.26
        let z = x.abs() / std::f64::consts::SQRT_2;
        let t = 1.0 / (1.0 + 0.3275911 * z);
        let erf = 1.0 - t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429)))) * (-z * z).exp();
        0.5 * (1.0 + erf.copysign(x))
    };
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (cdf(x) - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf(x)).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn correlated_marginals_are_standard_normal() {
    // 1% critical value of the one-sample KS statistic at 10⁴ samples
    let critical = 1.628 / 100.0;
    for (i, alpha) in [0.0, 0.25, 0.5, 1.0, 1.7, 3.0].into_iter().enumerate() {
        let mut rng = SeededRng::new(100 + i as u64);
        for frame in 0..3 {
            let t = sample_correlated_noise(&[3, 10_000], alpha, &mut rng).unwrap();
            let mut xs = t.narrow(0, frame, 1).unwrap().into_data();
            let ks = ks_normal(&mut xs);
            assert!(ks < critical, "α {alpha} frame {frame}: KS {ks}");
        }
    }
}

#[test]
fn frame_correlation_follows_alpha() {
    for alpha in [0.5, 1.0, 2.0] {
        let t = sample_correlated_noise(&[2, 100_000], alpha, &mut SeededRng::new(2)).unwrap();
        let (a, b) = t.data().split_at(100_000);
        let r = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / 100_000.0;
        let expect = alpha * alpha / (1.0 + alpha * alpha);
        assert!((r - expect).abs() < 0.02, "α {alpha}: {r} vs {expect}");
    }
}

#[test]
fn segment_prior_matches_within_three_sigma() {
    for n_max in [1, 2, 4, 8] {
        let draws = 100_000;
        let mut rng = SeededRng::new(n_max as u64);
        let mut counts = vec![0usize; n_max];
        for _ in 0..draws {
            counts[sample_segment_index(n_max, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(segment_index_probs(n_max)) {
            let sd = (draws as f64 * p * (1.0 - p)).sqrt().max(1e-9);
            assert!((*c as f64 - draws as f64 * p).abs() <= 3.0 * sd, "N {n_max}: {counts:?}");
        }
    }
}

/// Sum of |∂L/∂θ| over the parameter leaves bound while encoding segment `k`.
fn scope_grads(stop_grad: bool, segments: usize) -> Vec<f64> {
    // block i's memory only reaches later blocks, so a segment k steps back
    // needs depth > k to influence the loss at all
    let cfg = ModelConfig {
        depth: segments,
        ..tiny_model_config()
    };
    let mut model = MaltModel::new(cfg, &mut SeededRng::new(40)).unwrap();
    jitter(&mut model, 0.2, 140);
    let ex = random_example(model.config().latent, segments + 1, None, 41);
    let mut g = Graph::new();
    let mut rng = SeededRng::new(42);
    let mem = rollout_memory_var(
        &mut g,
        &model,
        &ex.segments[..segments],
        0.1,
        None,
        MemoryMode::Recurrent,
        GradPath::Tape { stop_grad },
        &mut rng,
    )
    .unwrap();
    let z = g.constant(ex.segments[segments].clone());
    let out = model.forward_var(&mut g, z, 300, &mem, None, false).unwrap();
    let target = g.constant(Tensor::zeros(&model.config().latent).unwrap());
    let loss = g.mse(out.v.unwrap(), target).unwrap();
    let grads = g.backward(loss).unwrap();
    (1..=segments)
        .map(|k| {
            model
                .params()
                .ids()
                .filter_map(|id| g.param_var(id, k))
                .filter_map(|v| grads.wrt(v))
                .map(|t| t.data().iter().map(|x| x.abs()).sum::<f64>())
                .sum()
        })
        .collect()
}

#[test]
fn gradients_stop_one_recurrence_step_back() {
    let blocked = scope_grads(true, 3);
    assert_eq!(blocked[0], 0.0);
    assert_eq!(blocked[1], 0.0);
    assert!(blocked[2] > 0.0);
    let open = scope_grads(false, 3);
    assert!(open.iter().all(|&v| v > 0.0), "{open:?}");
}

#[test]
fn truncated_rollout_gives_the_stop_grad_gradient() {
    let model = tiny_jittered_model(43);
    let ex = random_example(model.config().latent, 3, None, 44);
    let grads = |path: GradPath| {
        let mut g = Graph::new();
        let mem = rollout_memory_var(&mut g, &model, &ex.segments[..2], 0.1, None, MemoryMode::Recurrent, path, &mut SeededRng::new(45))
            .unwrap();
        let z = g.constant(ex.segments[2].clone());
        let out = model.forward_var(&mut g, z, 300, &mem, None, false).unwrap();
        let target = g.constant(Tensor::zeros(&model.config().latent).unwrap());
        let loss = g.mse(out.v.unwrap(), target).unwrap();
        g.backward(loss).unwrap().param_grads(&g, model.params())
    };
    let tape = grads(GradPath::Tape { stop_grad: true });
    let trunc = grads(GradPath::Truncated);
    for id in model.params().ids() {
        let zero = Tensor::zeros(model.params().get(id).shape()).unwrap();
        let a = tape.get(id).unwrap_or(&zero);
        let b = trunc.get(id).unwrap_or(&zero);
        assert!(a.max_abs_diff(b).unwrap() < 1e-12, "{}", model.params().name(id));
    }
}
