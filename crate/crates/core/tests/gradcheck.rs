//! Tape gradients against central differences, plus the tensor-level
//! invariants the autodiff relies on.

mod common;

use common::*;
use malt::codec::{CodecConfig, LatentCodec};
use malt::numerics::{finite_diff_check, Graph, SeededRng, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    // Scored with a 1e-6 floor on the scale: a handful of random graphs have
    // coordinates whose true gradient sits below what a central difference
    // can resolve, and the bare `|a| + 1e-8` ratio would report rounding.
    #[test]
    fn random_graphs_match_central_differences(seed in any::<u64>()) {
        let rg = RandomGraph::from_seed(seed);
        let mut g = Graph::new();
        let leaf = g.leaf(rg.input.clone(), true);
        let out = rg.build(&mut g, leaf).unwrap();
        let analytic = g.backward(out).unwrap().wrt_or_zeros(&g, leaf).unwrap();
        let h = 1e-5;
        for i in 0..rg.input.len() {
            let eval = |d: f64| {
                let mut x = rg.input.clone();
                x.data_mut()[i] += d;
                let mut g = Graph::no_grad();
                let leaf = g.constant(x);
                let out = rg.build(&mut g, leaf).unwrap();
                g.value(out).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = rel_err(analytic.data()[i], numeric);
            prop_assert!(err < 1e-4, "ops {:?} coord {i}: {err:e}", rg.ops);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = Tensor::randn(&[rows, cols], &mut SeededRng::new(seed)).unwrap().scale(scale);
        let s = x.softmax(1).unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_inverse_is_identity(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, which in 0usize..6, seed in any::<u64>()) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let p = perms[which];
        let mut inv = [0; 3];
        for (i, &a) in p.iter().enumerate() {
            inv[a] = i;
        }
        let x = Tensor::randn(&[d0, d1, d2], &mut SeededRng::new(seed)).unwrap();
        let back = x.permute(&p).unwrap().permute(&inv).unwrap();
        prop_assert_eq!(back, x);
    }
}

#[test]
fn three_layer_mlp_gradcheck_is_tight() {
    let mut rng = SeededRng::new(31);
    let w: Vec<Tensor> = [(4, 6), (6, 5), (5, 1)]
        .iter()
        .map(|&(a, b)| Tensor::randn(&[a, b], &mut rng).unwrap().scale(0.5))
        .collect();
    let x = Tensor::randn(&[3, 4], &mut rng).unwrap();
    let err = finite_diff_check(
        |g, x| {
            let mut h = x;
            for (i, wi) in w.iter().enumerate() {
                let wv = g.constant(wi.clone());
                h = g.matmul(h, wv)?;
                if i < 2 {
                    h = g.tanh(h);
                }
            }
            Ok(g.sum(h))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "err {err:e}");
}

#[test]
fn stop_grad_keeps_only_the_live_argument() {
    // g(x, sg(x)) = x² · tanh(sg(x)): ∂g/∂x must be 2x·tanh x with no x²·tanh′ x term
    let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let frozen = g.detach(leaf);
    let sq = g.mul(leaf, leaf).unwrap();
    let s = g.tanh(frozen);
    let prod = g.mul(sq, s).unwrap();
    let loss = g.sum(prod);
    let grad = g.backward(loss).unwrap().wrt_or_zeros(&g, leaf).unwrap();
    for (gv, xv) in grad.data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv * xv.tanh());
    }
}

#[test]
fn codec_reconstruction_gradients_match() {
    let cfg = CodecConfig {
        spatial_factor: 4,
        temporal_factor: 4,
        latent_channels: 2,
        segments_per_chunk: 1,
        segment_frames: 4,
        height: 8,
        width: 8,
        in_channels: 3,
        hidden: 6,
    };
    let codec = LatentCodec::new(cfg.clone(), &mut SeededRng::new(3)).unwrap();
    let chunk = Tensor::randn(&cfg.chunk_shape(), &mut SeededRng::new(4)).unwrap().map(|v| 0.5 + 0.2 * v);
    let loss_at = |c: &LatentCodec| {
        let mut g = Graph::no_grad();
        let l = c.reconstruction_loss(&mut g, &chunk).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let loss = codec.reconstruction_loss(&mut g, &chunk).unwrap();
    let grads = g.backward(loss).unwrap().param_grads(&g, codec.params());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in codec.params().ids().collect::<Vec<_>>() {
        let len = codec.params().get(id).len();
        for i in (0..len).step_by((len / 5).max(1)) {
            let mut plus = codec.clone();
            plus.params_mut().get_mut(id).data_mut()[i] += h;
            let mut minus = codec.clone();
            minus.params_mut().get_mut(id).data_mut()[i] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
            worst = worst.max((numeric - analytic).abs() / (analytic.abs() + 1e-8));
        }
    }
    assert!(worst < 1e-4, "worst {worst:e}");
}

#[test]
fn model_gradient_on_sampled_parameter_subset() {
    let model = tiny_jittered_model(8);
    let example = random_example(model.config().latent, 3, None, 9);
    let draw = LossDraw {
        n: 1,
        t: 250,
        cond: None,
        sigma_mem: 0.1,
        seed: 10,
    };
    // 100 coordinates spread over every parameter tensor
    let per_param = 100 / model.params().len() + 1;
    let err = model_loss_gradcheck(&model, &example, draw, per_param, 1e-5).unwrap();
    assert!(err < 1e-4, "err {err:e}");
}

#[test]
fn identical_seeds_give_identical_tapes() {
    let run = || {
        let rg = RandomGraph::from_seed(77);
        let mut g = Graph::new();
        let leaf = g.leaf(rg.input.clone(), true);
        let out = rg.build(&mut g, leaf).unwrap();
        let v = g.value(out).clone();
        (v, g.backward(out).unwrap().wrt_or_zeros(&g, leaf).unwrap())
    };
    assert_eq!(run(), run());
}
