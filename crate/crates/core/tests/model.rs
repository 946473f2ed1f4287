//! Denoiser and codec structure: memory attention against a dense oracle,
//! fixed-size memory, spatial locality, and codec shape and chunk algebra.

mod common;

use common::*;
use malt::codec::{CodecConfig, LatentCodec};
use malt::diffusion::MemoryMode;
use malt::harness::experiment::memory_bytes_by_context;
use malt::model::{MaltModel, ModelConfig, WindowLayout};
use malt::numerics::{SeededRng, Tensor};
use malt::sampling::MemoryTracker;
use proptest::prelude::*;

fn single_head_model() -> MaltModel {
    let cfg = ModelConfig {
        depth: 1,
        hidden: 4,
        heads: 1,
        patch_t: 1,
        patch_s: 2,
        latent: [2, 4, 4, 2],
        num_classes: 2,
        timesteps: 1000,
        layout: WindowLayout::Alternating,
        lora_rank: 2,
        mlp_ratio: 2,
    };
    let mut m = MaltModel::new(cfg, &mut SeededRng::new(1)).unwrap();
    jitter(&mut m, 0.3, 2);
    m
}

fn row_times(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (fi, fo) = (w.shape()[0], w.shape()[1]);
    (0..fo)
        .map(|j| (0..fi).map(|i| x[i] * w.data()[i * fo + j]).sum::<f64>() + b.map_or(0.0, |b| b.data()[j]))
        .collect()
}

#[test]
fn memory_attention_matches_dense_oracle() {
    let model = single_head_model();
    let ps = model.params();
    let p = |n: &str| ps.get(ps.id(&format!("blocks.0.mem.{n}")).unwrap_or_else(|| panic!("{n}")));
    let [ns, nt, c] = model.config().memory_shape().unwrap();
    let mt = 2 * nt;
    let mut rng = SeededRng::new(3);
    let state = Tensor::randn(&[ns, nt, c], &mut rng).unwrap();
    let memory = Tensor::randn(&[ns, mt, c], &mut rng).unwrap();
    let (out, _) = model.memory_attention(0, &state, &memory).unwrap();

    let span = 2 * nt as i64;
    let table = p("rel_bias");
    let mut worst = 0.0f64;
    for s in 0..ns {
        let tok = |t: &Tensor, len: usize, i: usize| t.data()[(s * len + i) * c..(s * len + i + 1) * c].to_vec();
        let keys: Vec<Vec<f64>> = (0..mt).map(|i| tok(&memory, mt, i)).chain((0..nt).map(|i| tok(&state, nt, i))).collect();
        for qi in 0..nt {
            let q = row_times(&tok(&state, nt, qi), p("q.weight"), Some(p("q.bias")));
            let scores: Vec<f64> = keys
                .iter()
                .enumerate()
                .map(|(j, kx)| {
                    let k = row_times(kx, p("k.weight"), None);
                    let delta = (qi as i64 - (j as i64 - mt as i64)).clamp(-span, span);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt()
                        + table.data()[(delta + span) as usize]
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut mixed = vec![0.0; c];
            for (kx, w) in keys.iter().zip(&e) {
                let v = row_times(kx, p("v.weight"), Some(p("v.bias")));
                for (m, vv) in mixed.iter_mut().zip(v) {
                    *m += w / z * vv;
                }
            }
            let expect = row_times(&mixed, p("o.weight"), Some(p("o.bias")));
            let got = tok(&out, nt, qi);
            for (a, b) in got.iter().zip(&expect) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-10, "worst {worst:e}");
}

#[test]
fn zero_initialised_memory_attention_is_inert() {
    let model = MaltModel::new(tiny_model_config(), &mut SeededRng::new(4)).unwrap();
    let [ns, nt, c] = model.config().memory_shape().unwrap();
    let mut rng = SeededRng::new(5);
    let state = Tensor::randn(&[ns, nt, c], &mut rng).unwrap();
    let memory = Tensor::randn(&[ns, nt, c], &mut rng).unwrap();
    let (out, _) = model.memory_attention(0, &state, &memory).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn memory_locality_under_perturbation() {
    let model = tiny_jittered_model(6);
    let [ns, nt, c] = model.config().memory_shape().unwrap();
    let mut rng = SeededRng::new(7);
    let state = Tensor::randn(&[ns, nt, c], &mut rng).unwrap();
    let memory = Tensor::randn(&[ns, nt, c], &mut rng).unwrap();
    let (base, _) = model.memory_attention(1, &state, &memory).unwrap();
    let j = ns / 2;
    let mut bumped = memory.clone();
    bumped.data_mut()[j * nt * c] += 1.0;
    let (moved, _) = model.memory_attention(1, &state, &bumped).unwrap();
    for i in 0..ns {
        let d = base.narrow(0, i, 1).unwrap().max_abs_diff(&moved.narrow(0, i, 1).unwrap()).unwrap();
        assert_eq!(d > 0.0, i == j, "location {i}");
    }
}

#[test]
fn time_conditioning_changes_the_output() {
    let model = tiny_jittered_model(12);
    let z = Tensor::randn(&model.config().latent, &mut SeededRng::new(13)).unwrap();
    let mem = model.init_memory();
    let (a, _) = model.forward(&z, 0, &mem, None).unwrap();
    let (b, _) = model.forward(&z, 1000, &mem, None).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 0.0);
}

#[test]
fn kv_cache_overflow_is_a_budget_error() {
    let model = tiny_jittered_model(14);
    let mut tracker = MemoryTracker::new(&model, MemoryMode::KvCache { cap: 2 });
    let z = Tensor::randn(&model.config().latent, &mut SeededRng::new(15)).unwrap();
    tracker.absorb(&model, &z, None).unwrap();
    tracker.absorb(&model, &z, None).unwrap();
    let err = tracker.absorb(&model, &z, None).unwrap_err();
    assert!(matches!(err, malt::Error::MemoryBudget { segments: 3, cap: 2 }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn recurrent_memory_size_is_constant(n in 1usize..7, seed in any::<u64>()) {
        let model = tiny_jittered_model(seed % 1000);
        let ex = random_example(model.config().latent, n, None, seed);
        let bytes = memory_bytes_by_context(&model, MemoryMode::Recurrent, &ex).unwrap();
        let init = model.init_memory().byte_size();
        prop_assert!(bytes.iter().all(|&b| b == init));
    }

    #[test]
    fn codec_shape_algebra(ds in prop::sample::select(vec![1usize, 2, 4]), dl in prop::sample::select(vec![1usize, 2, 4]),
                           hk in 1usize..3, lk in 1usize..3, c in 1usize..4, m in 1usize..3) {
        let cfg = CodecConfig {
            spatial_factor: ds,
            temporal_factor: dl,
            latent_channels: c,
            segments_per_chunk: m,
            segment_frames: dl * lk,
            height: ds * hk * 2,
            width: ds * hk,
            in_channels: 3,
            hidden: 4,
        };
        let codec = LatentCodec::new(cfg.clone(), &mut SeededRng::new(0)).unwrap();
        let chunk = Tensor::zeros(&cfg.chunk_shape()).unwrap();
        let latent = codec.encode(&chunk).unwrap();
        prop_assert_eq!(latent.shape(), &[m * lk, 2 * hk, hk, c][..]);
        prop_assert_eq!(cfg.segment_latent_shape(), [lk, 2 * hk, hk, c]);
        let back = codec.decode(&latent).unwrap();
        prop_assert_eq!(back.shape(), &cfg.chunk_shape()[..]);
    }
}

#[test]
fn chunks_encode_independently() {
    let cfg = CodecConfig {
        spatial_factor: 2,
        temporal_factor: 2,
        latent_channels: 2,
        segments_per_chunk: 1,
        segment_frames: 4,
        height: 4,
        width: 4,
        in_channels: 3,
        hidden: 6,
    };
    let codec = LatentCodec::new(cfg, &mut SeededRng::new(16)).unwrap();
    let video = Tensor::randn(&[12, 4, 4, 3], &mut SeededRng::new(17)).unwrap();
    let before = codec.encode_long_video(&video).unwrap();
    assert_eq!(before.len(), 3);
    let mut edited = video.clone();
    // every pixel of the middle chunk (frames 4..8)
    for v in &mut edited.data_mut()[4 * 48..8 * 48] {
        *v += 0.7;
    }
    let after = codec.encode_long_video(&edited).unwrap();
    assert_eq!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
    assert_eq!(before[2], after[2]);
}
