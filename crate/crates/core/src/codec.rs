//! Chunked video autoencoder.
//!
//! The encoder embeds non-overlapping `d_l × d_s × d_s` space-time patches with a
//! strided linear map, mixes them with two residual MLP blocks and projects to
//! `c` latent channels; the decoder mirrors it. Patches never see each other,
//! so chunks are independent by construction.

use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid_shape, Result};
use crate::numerics::{Graph, ParamGrads, ParamStore, SeededRng, Tensor, Var};
use crate::nn::{Init, Linear, ResidualMlp};
use crate::diffusion::optim::{AdamW, AdamWConfig, CosineSchedule};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// `d_s`
    pub spatial_factor: usize,
    /// `d_l`
    pub temporal_factor: usize,
    /// `c`
    pub latent_channels: usize,
    /// `m`
    pub segments_per_chunk: usize,
    /// `L`
    pub segment_frames: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Width of the residual mixing blocks.
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            spatial_factor: 4,
            temporal_factor: 4,
            latent_channels: 8,
            segments_per_chunk: 1,
            segment_frames: 16,
            height: 32,
            width: 32,
            in_channels: 3,
            hidden: 64,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.spatial_factor,
            self.temporal_factor,
            self.latent_channels,
            self.segments_per_chunk,
            self.segment_frames,
            self.height,
            self.width,
            self.in_channels,
            self.hidden,
        ];
        if positive.contains(&0) {
            return Err(invalid_shape(format!("codec config has a zero field: {self:?}")));
        }
        if self.height % self.spatial_factor != 0
            || self.width % self.spatial_factor != 0
            || self.segment_frames % self.temporal_factor != 0
        {
            return Err(invalid_shape(format!(
                "frames {}x{}x{} not divisible by d_l={} / d_s={}",
                self.segment_frames, self.height, self.width, self.temporal_factor, self.spatial_factor
            )));
        }
        Ok(())
    }

    /// `l = L / d_l`
    pub fn latent_frames(&self) -> usize {
        self.segment_frames / self.temporal_factor
    }

    pub fn latent_height(&self) -> usize {
        self.height / self.spatial_factor
    }

    pub fn latent_width(&self) -> usize {
        self.width / self.spatial_factor
    }

    /// `(l, h, w, c)`
    pub fn segment_latent_shape(&self) -> [usize; 4] {
        [
            self.latent_frames(),
            self.latent_height(),
            self.latent_width(),
            self.latent_channels,
        ]
    }

    /// `(m·L, H, W, C_in)`
    pub fn chunk_shape(&self) -> [usize; 4] {
        [
            self.segments_per_chunk * self.segment_frames,
            self.height,
            self.width,
            self.in_channels,
        ]
    }

    /// `(m·l, h, w, c)`
    pub fn chunk_latent_shape(&self) -> [usize; 4] {
        let [l, h, w, c] = self.segment_latent_shape();
        [self.segments_per_chunk * l, h, w, c]
    }

    fn patch_dim(&self) -> usize {
        self.temporal_factor * self.spatial_factor * self.spatial_factor * self.in_channels
    }

    fn patches_per_chunk(&self) -> usize {
        let [ml, h, w, _] = self.chunk_latent_shape();
        ml * h * w
    }

    fn split_shape(&self) -> [usize; 7] {
        let [ml, h, w, _] = self.chunk_latent_shape();
        [
            ml,
            self.temporal_factor,
            h,
            self.spatial_factor,
            w,
            self.spatial_factor,
            self.in_channels,
        ]
    }
}

#[derive(Clone, Debug)]
struct CodecLayers {
    embed: Linear,
    enc_mix: [ResidualMlp; 2],
    to_latent: Linear,
    from_latent: Linear,
    dec_mix: [ResidualMlp; 2],
    to_pixels: Linear,
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    config: CodecConfig,
    params: ParamStore,
    layers: CodecLayers,
    norm: LatentNorm,
}

/// Per-channel affine map applied to latents leaving [`LatentCodec::encode`]
/// (and undone in [`LatentCodec::decode`]) so the diffusion model sees
/// roughly unit-scale inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNorm {
    pub mean: Tensor,
    pub std: Tensor,
}

impl LatentNorm {
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(Self {
            mean: Tensor::zeros(&[channels])?,
            std: Tensor::ones(&[channels])?,
        })
    }
}

impl LatentCodec {
    pub fn new(config: CodecConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let (p, hid, c) = (config.patch_dim(), config.hidden, config.latent_channels);
        let layers = CodecLayers {
            embed: Linear::new(&mut ps, "codec.enc.embed", (p, hid), Init::FanIn(1.0), true, rng)?,
            enc_mix: [
                ResidualMlp::new(&mut ps, "codec.enc.mix0", hid, 2 * hid, rng)?,
                ResidualMlp::new(&mut ps, "codec.enc.mix1", hid, 2 * hid, rng)?,
            ],
            to_latent: Linear::new(&mut ps, "codec.enc.out", (hid, c), Init::FanIn(1.0), true, rng)?,
            from_latent: Linear::new(&mut ps, "codec.dec.embed", (c, hid), Init::FanIn(1.0), true, rng)?,
            dec_mix: [
                ResidualMlp::new(&mut ps, "codec.dec.mix0", hid, 2 * hid, rng)?,
                ResidualMlp::new(&mut ps, "codec.dec.mix1", hid, 2 * hid, rng)?,
            ],
            to_pixels: Linear::new(&mut ps, "codec.dec.out", (hid, p), Init::FanIn(0.5), true, rng)?,
        };
        let norm = LatentNorm::identity(config.latent_channels)?;
        Ok(Self {
            config,
            params: ps,
            layers,
            norm,
        })
    }

    /// Rebuilds a codec around previously trained parameters.
    pub fn from_params(config: CodecConfig, params: ParamStore) -> Result<Self> {
        let mut codec = Self::new(config, &mut SeededRng::new(0))?;
        codec.params.adopt(params)?;
        Ok(codec)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check(&self, shape: &[usize], want: [usize; 4], what: &str) -> Result<()> {
        if shape != want {
            return Err(invalid_shape(format!("{what}: expected {want:?}, got {shape:?}")));
        }
        Ok(())
    }

    /// `(m·L, H, W, C_in) -> (m·l, h, w, c)` on a tape.
    pub fn encode_var(&self, g: &mut Graph, chunk: Var) -> Result<Var> {
        let cfg = &self.config;
        self.check(g.shape(chunk), cfg.chunk_shape(), "codec input")?;
        let ps = &self.params;
        let split = g.reshape(chunk, &cfg.split_shape())?;
        let p = g.permute(split, &[0, 2, 4, 1, 3, 5, 6])?;
        let tokens = g.reshape(p, &[cfg.patches_per_chunk(), cfg.patch_dim()])?;
        let mut x = self.layers.embed.forward(g, ps, tokens)?;
        for mix in &self.layers.enc_mix {
            x = mix.forward(g, ps, x)?;
        }
        let z = self.layers.to_latent.forward(g, ps, x)?;
        g.reshape(z, &cfg.chunk_latent_shape())
    }

    /// Inverse map on a tape; values are not clamped here.
    pub fn decode_var(&self, g: &mut Graph, latent: Var) -> Result<Var> {
        let cfg = &self.config;
        self.check(g.shape(latent), cfg.chunk_latent_shape(), "codec latent")?;
        let ps = &self.params;
        let tokens = g.reshape(latent, &[cfg.patches_per_chunk(), cfg.latent_channels])?;
        let mut x = self.layers.from_latent.forward(g, ps, tokens)?;
        for mix in &self.layers.dec_mix {
            x = mix.forward(g, ps, x)?;
        }
        let pix = self.layers.to_pixels.forward(g, ps, x)?;
        let pix = g.add_scalar(pix, 0.5);
        let [ml, dl, h, ds, w, ds2, cin] = cfg.split_shape();
        let split = g.reshape(pix, &[ml, h, w, dl, ds, ds2, cin])?;
        let p = g.permute(split, &[0, 3, 1, 4, 2, 5, 6])?;
        g.reshape(p, &cfg.chunk_shape())
    }

    pub fn norm(&self) -> &LatentNorm {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: LatentNorm) -> Result<()> {
        let c = [self.config.latent_channels];
        if norm.mean.shape() != c || norm.std.shape() != c || norm.std.data().iter().any(|&s| !(s > 0.0)) {
            return Err(crate::Error::Config("latent normalization must have c positive scales".into()));
        }
        self.norm = norm;
        Ok(())
    }

    /// Sets the normalization to the per-channel mean and standard deviation
    /// of the raw latents of `chunks`.
    pub fn fit_norm(&mut self, chunks: &[Tensor]) -> Result<()> {
        if chunks.is_empty() {
            return Err(contract("fitting the latent normalization needs data"));
        }
        let c = self.config.latent_channels;
        let (mut sum, mut sq, mut count) = (vec![0.0; c], vec![0.0; c], 0usize);
        for chunk in chunks {
            let z = self.encode_raw(chunk)?;
            for row in z.data().chunks(c) {
                for (k, v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                count += 1;
            }
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        self.set_norm(LatentNorm {
            mean: Tensor::new(&[c], mean)?,
            std: Tensor::new(&[c], std)?,
        })
    }

    fn encode_raw(&self, chunk: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(chunk.clone());
        let z = self.encode_var(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    /// Normalized latents of one chunk.
    pub fn encode(&self, chunk: &Tensor) -> Result<Tensor> {
        let z = self.encode_raw(chunk)?;
        z.sub(&self.norm.mean)?.mul(&self.norm.std.map(|s| 1.0 / s))
    }

    /// Decoded frames from normalized latents, clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.check(latent.shape(), self.config.chunk_latent_shape(), "codec latent")?;
        let raw = latent.mul(&self.norm.std)?.add(&self.norm.mean)?;
        let mut g = Graph::no_grad();
        let z = g.constant(raw);
        let x = self.decode_var(&mut g, z)?;
        Ok(g.value(x).map(|v| v.clamp(0.0, 1.0)))
    }

    /// Splits a `(N·L, H, W, C)` video into `N/m` chunks, encodes each and
    /// returns the `N` per-segment latents.
    pub fn encode_long_video(&self, video: &Tensor) -> Result<Vec<Tensor>> {
        let cfg = &self.config;
        let [chunk_frames, h, w, c] = cfg.chunk_shape();
        let shape = video.shape();
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(invalid_shape(format!(
                "video {shape:?} does not match frame size ({h},{w},{c})"
            )));
        }
        if shape[0] % chunk_frames != 0 {
            return Err(invalid_shape(format!(
                "{} frames is not a whole number of {}-frame chunks (N·L with N divisible by m)",
                shape[0], chunk_frames
            )));
        }
        let l = cfg.latent_frames();
        let mut segments = Vec::with_capacity(shape[0] / cfg.segment_frames);
        for i in 0..shape[0] / chunk_frames {
            let chunk = video.narrow(0, i * chunk_frames, chunk_frames)?;
            let latent = self.encode(&chunk)?;
            for s in 0..cfg.segments_per_chunk {
                segments.push(latent.narrow(0, s * l, l)?);
            }
        }
        Ok(segments)
    }

    /// Decodes per-segment latents back to a `(N·L, H, W, C)` video, `m` segments at a time.
    pub fn decode_segments(&self, segments: &[Tensor]) -> Result<Tensor> {
        let m = self.config.segments_per_chunk;
        if segments.is_empty() || segments.len() % m != 0 {
            return Err(invalid_shape(format!(
                "{} segments cannot be decoded in chunks of {m}",
                segments.len()
            )));
        }
        let mut frames = Vec::with_capacity(segments.len() / m);
        for chunk in segments.chunks(m) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            frames.push(self.decode(&Tensor::concat(&refs, 0)?)?);
        }
        let refs: Vec<&Tensor> = frames.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Mean squared reconstruction error of one chunk on a tape.
    pub fn reconstruction_loss(&self, g: &mut Graph, chunk: &Tensor) -> Result<Var> {
        let x = g.constant(chunk.clone());
        let z = self.encode_var(g, x)?;
        let y = self.decode_var(g, z)?;
        g.mse(y, x)
    }

    pub fn eval_mse(&self, chunks: &[Tensor]) -> Result<f64> {
        let mut total = 0.0;
        for c in chunks {
            let mut g = Graph::no_grad();
            let l = self.reconstruction_loss(&mut g, c)?;
            total += g.value(l).data()[0];
        }
        Ok(total / chunks.len().max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }
}

/// Trains the codec with MSE reconstruction loss; returns the per-step loss history.
pub fn train_codec(
    codec: &mut LatentCodec,
    dataset: &[Tensor],
    settings: &CodecTrainConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(contract("codec training needs a non-empty dataset"));
    }
    if settings.batch_size == 0 {
        return Err(contract("codec batch size must be positive"));
    }
    let schedule = CosineSchedule::new(settings.optimizer.lr, settings.steps);
    let mut opt = AdamW::new(settings.optimizer.clone(), codec.params());
    let mut history = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut grads = ParamGrads::zeros_like(codec.params());
        let mut loss_sum = 0.0;
        for _ in 0..settings.batch_size {
            let chunk = &dataset[rng.below(dataset.len())];
            let mut g = Graph::new();
            let loss = codec.reconstruction_loss(&mut g, chunk)?;
            loss_sum += g.value(loss).data()[0];
            let back = g.backward(loss)?;
            grads.merge(&back.param_grads(&g, codec.params()));
        }
        grads.scale(1.0 / settings.batch_size as f64);
        let loss = loss_sum / settings.batch_size as f64;
        if !loss.is_finite() {
            return Err(crate::Error::NonFiniteLoss {
                step,
                seed: rng.seed(),
            });
        }
        history.push(loss);
        opt.step(codec.params_mut(), &grads, schedule.lr(step));
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CodecConfig {
        CodecConfig {
            segment_frames: 4,
            height: 8,
            width: 8,
            hidden: 8,
            latent_channels: 4,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn desk_shapes() {
        let cfg = CodecConfig::default();
        assert_eq!(cfg.segment_latent_shape()[..3], [4, 8, 8]);
        let codec = LatentCodec::new(cfg.clone(), &mut SeededRng::new(0)).unwrap();
        let x = Tensor::zeros(&cfg.chunk_shape()).unwrap();
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[4, 8, 8, 8]);
        assert_eq!(codec.decode(&z).unwrap().shape(), x.shape());
    }

    #[test]
    fn full_size_factors_give_expected_latent_grid() {
        // 16 frames of 128x128 with d_s=8, d_l=4 -> 4x16x16 (a causal codec's
        // extra leading frame is not modelled)
        let cfg = CodecConfig {
            spatial_factor: 8,
            height: 128,
            width: 128,
            ..CodecConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.segment_latent_shape()[..3], [4, 16, 16]);
    }

    #[test]
    fn rejects_indivisible() {
        let cfg = CodecConfig {
            height: 30,
            ..CodecConfig::default()
        };
        assert!(cfg.validate().is_err());
        let codec = LatentCodec::new(small(), &mut SeededRng::new(0)).unwrap();
        assert!(codec.encode(&Tensor::zeros(&[4, 8, 6, 3]).unwrap()).is_err());
        assert!(codec.decode(&Tensor::zeros(&[1, 2, 2, 3]).unwrap()).is_err());
    }

    #[test]
    fn zero_latent_decodes_in_range() {
        let codec = LatentCodec::new(small(), &mut SeededRng::new(2)).unwrap();
        let x = codec.decode(&Tensor::zeros(&[1, 2, 2, 4]).unwrap()).unwrap();
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // every patch decodes identically; pixel (0, 0, 4) opens the second patch
        assert_eq!(x.data()[0], x.data()[4 * 3]);
    }

    #[test]
    fn fitted_norm_standardizes_channels() {
        let mut codec = LatentCodec::new(small(), &mut SeededRng::new(1)).unwrap();
        let mut rng = SeededRng::new(2);
        let data: Vec<Tensor> = (0..4)
            .map(|_| Tensor::randn(&[4, 8, 8, 3], &mut rng).unwrap())
            .collect();
        codec.fit_norm(&data).unwrap();
        let all: Vec<Tensor> = data.iter().map(|d| codec.encode(d).unwrap()).collect();
        let refs: Vec<&Tensor> = all.iter().collect();
        let z = Tensor::concat(&refs, 0).unwrap();
        for k in 0..4 {
            let col: Vec<f64> = z.data().iter().skip(k).step_by(4).copied().collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9, "{m} {v}");
        }
        // decode undoes the normalization
        let raw = codec.decode_raw_for_test(&data[0]);
        assert!(codec.decode(&all[0]).unwrap().max_abs_diff(&raw).unwrap() < 1e-9);
    }

    impl LatentCodec {
        fn decode_raw_for_test(&self, chunk: &Tensor) -> Tensor {
            let mut g = Graph::no_grad();
            let x = g.constant(chunk.clone());
            let z = self.encode_var(&mut g, x).unwrap();
            let y = self.decode_var(&mut g, z).unwrap();
            g.value(y).map(|v| v.clamp(0.0, 1.0))
        }
    }

    #[test]
    fn identical_chunks_identical_latents() {
        let codec = LatentCodec::new(small(), &mut SeededRng::new(1)).unwrap();
        let mut rng = SeededRng::new(5);
        let x = Tensor::randn(&[4, 8, 8, 3], &mut rng).unwrap();
        assert_eq!(codec.encode(&x).unwrap(), codec.encode(&x.clone()).unwrap());
    }

    #[test]
    fn long_video_chunking() {
        let cfg = CodecConfig {
            segments_per_chunk: 2,
            ..small()
        };
        let codec = LatentCodec::new(cfg, &mut SeededRng::new(3)).unwrap();
        let mut rng = SeededRng::new(8);
        let video = Tensor::randn(&[16, 8, 8, 3], &mut rng).unwrap();
        let segs = codec.encode_long_video(&video).unwrap();
        assert_eq!(segs.len(), 4);
        let second_chunk = codec.encode(&video.narrow(0, 8, 8).unwrap()).unwrap();
        let joined = Tensor::concat(&[&segs[2], &segs[3]], 0).unwrap();
        assert_eq!(joined, second_chunk);
        assert!(codec.encode_long_video(&Tensor::zeros(&[12, 8, 8, 3]).unwrap()).is_err());
        let decoded = codec.decode_segments(&segs).unwrap();
        assert_eq!(decoded.shape(), video.shape());
    }

    #[test]
    fn single_chunk_path_matches_encode() {
        let codec = LatentCodec::new(small(), &mut SeededRng::new(3)).unwrap();
        let x = Tensor::randn(&[4, 8, 8, 3], &mut SeededRng::new(1)).unwrap();
        let segs = codec.encode_long_video(&x).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0], codec.encode(&x).unwrap());
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut codec = LatentCodec::new(small(), &mut SeededRng::new(0)).unwrap();
        let err = train_codec(&mut codec, &[], &CodecTrainConfig::default(), &mut SeededRng::new(0));
        assert!(matches!(err, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut codec = LatentCodec::new(small(), &mut SeededRng::new(0)).unwrap();
        let before = codec.params().clone();
        let data = vec![Tensor::randn(&[4, 8, 8, 3], &mut SeededRng::new(1)).unwrap()];
        let settings = CodecTrainConfig {
            steps: 1,
            batch_size: 1,
            optimizer: AdamWConfig {
                lr: 0.0,
                ..AdamWConfig::default()
            },
        };
        train_codec(&mut codec, &data, &settings, &mut SeededRng::new(0)).unwrap();
        assert_eq!(codec.params(), &before);
    }
}
