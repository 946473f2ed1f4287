//! Dataset preparation, training runs, probe evaluation and the ablation runner.

use std::path::Path;
use std::time::Instant;

use crate::codec::{train_codec, LatentCodec};
use crate::diffusion::{DiffusionSchedule, Example, MemoryMode, Trainer};
use crate::error::{contract, Error, Result};
use crate::harness::config::{AblationMode, RunConfig};
use crate::harness::data::{ProbeKind, RecallClip, RecallProbeSpec, Sprite};
use crate::harness::metrics::{mse, psnr_from_mse, write_records, MetricsRecord};
use crate::model::MaltModel;
use crate::numerics::{SeededRng, Tensor};
use crate::sampling::{video_prediction_mode, MemoryTracker};

// Generator streams under the dataset seed and the run seed.
const STREAM_TRAIN_CLIPS: u64 = 0;
const STREAM_EVAL_CLIPS: u64 = 1;
const STREAM_CODEC_INIT: u64 = 2;
const STREAM_CODEC_TRAIN: u64 = 3;
const STREAM_MODEL_INIT: u64 = u64::MAX;
const STREAM_SAMPLING: u64 = u64::MAX - 1;

/// What an evaluation clip's ground truth is generated from.
#[derive(Clone, Debug, PartialEq)]
pub enum ClipTruth {
    Recall(RecallClip),
    Drift(Sprite),
}

#[derive(Clone, Debug)]
pub struct EvalClip {
    /// Frames of the training-length clip.
    pub video: Tensor,
    pub truth: ClipTruth,
}

/// Codec and encoded data shared by every model trained on one dataset spec.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub codec: LatentCodec,
    pub codec_history: Vec<f64>,
    /// Codec reconstruction MSE on the evaluation clips.
    pub codec_eval_mse: f64,
    pub train: Vec<Example>,
    pub eval: Vec<EvalClip>,
}

fn split_chunks(video: &Tensor, chunk_frames: usize) -> Result<Vec<Tensor>> {
    (0..video.shape()[0] / chunk_frames)
        .map(|i| video.narrow(0, i * chunk_frames, chunk_frames))
        .collect()
}

/// Training videos and evaluation clips of a dataset spec.
#[derive(Clone, Debug)]
pub struct Clips {
    pub train: Vec<Tensor>,
    pub eval: Vec<EvalClip>,
}

/// Generates both clip sets from the dataset seed.
pub fn generate_clips(cfg: &RunConfig) -> Result<Clips> {
    let root = SeededRng::new(cfg.dataset.seed);
    let (n_train, n_eval) = (cfg.dataset.train_examples, cfg.dataset.eval_examples);
    Ok(match &cfg.dataset.probe {
        ProbeKind::Recall(spec) => Clips {
            train: spec
                .generate(n_train, &mut root.fork(STREAM_TRAIN_CLIPS))?
                .into_iter()
                .map(|(_, v)| v)
                .collect(),
            eval: spec
                .generate(n_eval, &mut root.fork(STREAM_EVAL_CLIPS))?
                .into_iter()
                .map(|(c, video)| EvalClip {
                    video,
                    truth: ClipTruth::Recall(c),
                })
                .collect(),
        },
        ProbeKind::Drift(spec) => Clips {
            train: spec
                .generate(n_train, &mut root.fork(STREAM_TRAIN_CLIPS))?
                .into_iter()
                .map(|(_, v)| v)
                .collect(),
            eval: spec
                .generate(n_eval, &mut root.fork(STREAM_EVAL_CLIPS))?
                .into_iter()
                .map(|(s, video)| EvalClip {
                    video,
                    truth: ClipTruth::Drift(s),
                })
                .collect(),
        },
    })
}

fn chunks_of(videos: impl IntoIterator<Item = Tensor>, chunk_frames: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(split_chunks(&v, chunk_frames)?);
    }
    Ok(out)
}

/// Trains a codec on the training clips and fits its latent normalization.
/// Returns the codec and its loss history.
pub fn fit_codec(cfg: &RunConfig, clips: &Clips) -> Result<(LatentCodec, Vec<f64>)> {
    let root = SeededRng::new(cfg.dataset.seed);
    let chunks = chunks_of(clips.train.iter().cloned(), cfg.codec.chunk_shape()[0])?;
    let mut codec = LatentCodec::new(cfg.codec.clone(), &mut root.fork(STREAM_CODEC_INIT))?;
    let history = train_codec(&mut codec, &chunks, &cfg.codec_train, &mut root.fork(STREAM_CODEC_TRAIN))?;
    codec.fit_norm(&chunks)?;
    Ok((codec, history))
}

/// Generates the clips, trains the codec (unless one is supplied) and
/// encodes every training clip.
pub fn prepare_data_with(cfg: &RunConfig, codec: Option<LatentCodec>) -> Result<PreparedData> {
    cfg.validate()?;
    let clips = generate_clips(cfg)?;
    let (codec, codec_history) = match codec {
        Some(c) => {
            if c.config() != &cfg.codec {
                return Err(Error::Config("supplied codec does not match the run's codec config".into()));
            }
            (c, Vec::new())
        }
        None => fit_codec(cfg, &clips)?,
    };
    let eval_chunks = chunks_of(clips.eval.iter().map(|c| c.video.clone()), cfg.codec.chunk_shape()[0])?;
    let codec_eval_mse = if eval_chunks.is_empty() { 0.0 } else { codec.eval_mse(&eval_chunks)? };
    let train = clips
        .train
        .iter()
        .map(|v| {
            Ok(Example {
                segments: codec.encode_long_video(v)?,
                cond: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        codec,
        codec_history,
        codec_eval_mse,
        train,
        eval: clips.eval,
    })
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    prepare_data_with(cfg, None)
}

/// Builds a fresh model for `cfg.seed` and a trainer with the effective
/// (ablation-adjusted) training settings.
pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer> {
    let eff = cfg.effective();
    let model = MaltModel::new(eff.model.clone(), &mut SeededRng::new(cfg.seed).fork(STREAM_MODEL_INIT))?;
    Trainer::new(model, eff.train)
}

pub fn train_model(cfg: &RunConfig, data: &PreparedData) -> Result<Trainer> {
    let mut trainer = new_trainer(cfg)?;
    trainer.run(&data.train)?;
    Ok(trainer)
}

/// Generator used for sampling evaluation clip `clip` of a run.
pub fn sampling_rng(seed: u64, clip: usize) -> SeededRng {
    SeededRng::new(seed).fork(STREAM_SAMPLING).fork(clip as u64)
}

/// Accuracy of a predictor that sees only the segments in `visible` and
/// reports the cue color it finds there, guessing color 0 when no cue is
/// visible.
pub fn recall_oracle_accuracy(
    spec: &RecallProbeSpec,
    clips: &[(RecallClip, Tensor)],
    visible: std::ops::Range<usize>,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(contract("oracle needs at least one clip"));
    }
    let l = spec.segment_frames;
    let mut correct = 0usize;
    for (clip, video) in clips {
        let mut guess = None;
        for s in visible.clone() {
            if let Some(c) = spec.classify(spec.cue_color(&video.narrow(0, s * l, l)?)) {
                guess = Some(c);
            }
        }
        if guess.unwrap_or(0) == clip.color {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallOutcome {
    /// Fraction of clips whose predicted last segment shows the right cue color.
    pub accuracy: f64,
    /// Mean MSE of the predicted last segment against ground truth.
    pub mse: f64,
}

/// Gives the model the first `N − 1` ground-truth segments and predicts
/// segment `N`, then reads the cue color off the decoded frames.
pub fn evaluate_recall(
    cfg: &RunConfig,
    model: &MaltModel,
    codec: &LatentCodec,
    clips: &[EvalClip],
) -> Result<RecallOutcome> {
    let ProbeKind::Recall(spec) = &cfg.dataset.probe else {
        return Err(Error::Config("recall evaluation needs the recall probe".into()));
    };
    if clips.is_empty() {
        return Err(contract("recall evaluation needs at least one clip"));
    }
    let eff = cfg.effective();
    let schedule = DiffusionSchedule::from_config(&eff.train.schedule)?;
    let l = spec.segment_frames;
    let n = spec.segments;
    let mut correct = 0usize;
    let mut err = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let ClipTruth::Recall(truth) = &clip.truth else {
            return Err(contract("recall evaluation got a drift clip"));
        };
        let prefix = clip.video.narrow(0, 0, (n - 1) * l)?;
        let pred = video_prediction_mode(
            model,
            codec,
            &schedule,
            &prefix,
            1,
            None,
            &eff.sampler,
            eff.train.memory,
            &mut sampling_rng(cfg.seed, i),
        )?;
        let frames = pred.frames.expect("one segment requested");
        if spec.classify(spec.cue_color(&frames)) == Some(truth.color) {
            correct += 1;
        }
        err += mse(&frames, &clip.video.narrow(0, (n - 1) * l, l)?)?;
    }
    Ok(RecallOutcome {
        accuracy: correct as f64 / clips.len() as f64,
        mse: err / clips.len() as f64,
    })
}

/// Per-segment-index quality of a set of rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCurve {
    pub mse: Vec<f64>,
    pub psnr: Vec<f64>,
}

impl ErrorCurve {
    /// PSNR of the first predicted segment minus that of the last.
    pub fn gap(&self) -> f64 {
        match (self.psnr.first(), self.psnr.last()) {
            (Some(a), Some(b)) => a - b,
            _ => 0.0,
        }
    }

    pub fn records(&self, run: &str, memory_bytes: usize, wall_clock_s: f64, param_count: usize) -> Vec<MetricsRecord> {
        self.mse
            .iter()
            .zip(&self.psnr)
            .enumerate()
            .map(|(i, (&m, &p))| MetricsRecord {
                run: run.to_string(),
                segment: i + 1,
                psnr: p,
                mse: m,
                recall_accuracy: None,
                memory_bytes,
                wall_clock_s,
                param_count,
            })
            .collect()
    }
}

/// Mean MSE per segment index over paired `(predicted, truth)` videos of
/// `segment_frames`-frame segments, and the PSNR of each mean.
pub fn error_propagation_curve(predicted: &[Tensor], truth: &[Tensor], segment_frames: usize) -> Result<ErrorCurve> {
    if predicted.len() != truth.len() || predicted.is_empty() || segment_frames == 0 {
        return Err(contract("error curve needs equally many predicted and true videos"));
    }
    let frames = truth[0].shape()[0];
    if frames % segment_frames != 0 {
        return Err(contract("videos must hold whole segments"));
    }
    let segs = frames / segment_frames;
    let mut acc = vec![0.0; segs];
    for (p, t) in predicted.iter().zip(truth) {
        if p.shape() != t.shape() || t.shape()[0] != frames {
            return Err(Error::ShapeMismatch {
                op: "error_propagation_curve",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        for (s, a) in acc.iter_mut().enumerate() {
            let o = s * segment_frames;
            *a += mse(&p.narrow(0, o, segment_frames)?, &t.narrow(0, o, segment_frames)?)?;
        }
    }
    let mse: Vec<f64> = acc.iter().map(|a| a / predicted.len() as f64).collect();
    let psnr = mse.iter().map(|&m| psnr_from_mse(m)).collect();
    Ok(ErrorCurve { mse, psnr })
}

/// Drift-probe rollout: ground-truth prefix, then `rollout_segments`
/// predicted segments compared with the exact continuation.
pub fn evaluate_drift(cfg: &RunConfig, model: &MaltModel, codec: &LatentCodec, clips: &[EvalClip]) -> Result<ErrorCurve> {
    let ProbeKind::Drift(spec) = &cfg.dataset.probe else {
        return Err(Error::Config("drift evaluation needs the drift probe".into()));
    };
    let eff = cfg.effective();
    let schedule = DiffusionSchedule::from_config(&eff.train.schedule)?;
    let l = spec.segment_frames;
    let (prefix_n, future_n) = (cfg.eval.prefix_segments, cfg.eval.rollout_segments);
    let mut preds = Vec::with_capacity(clips.len());
    let mut truths = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let ClipTruth::Drift(sprite) = &clip.truth else {
            return Err(contract("drift evaluation got a recall clip"));
        };
        let prefix = spec.render(sprite, 0, prefix_n * l)?;
        let pred = video_prediction_mode(
            model,
            codec,
            &schedule,
            &prefix,
            future_n,
            None,
            &eff.sampler,
            eff.train.memory,
            &mut sampling_rng(cfg.seed, i),
        )?;
        preds.push(pred.frames.ok_or_else(|| contract("drift rollout needs at least one segment"))?);
        truths.push(spec.render(sprite, prefix_n * l, future_n * l)?);
    }
    error_propagation_curve(&preds, &truths, l)
}

/// Memory size after absorbing `1..=n` segments of `example` in `mode`.
pub fn memory_bytes_by_context(model: &MaltModel, mode: MemoryMode, example: &Example) -> Result<Vec<usize>> {
    let mut tracker = MemoryTracker::new(model, mode);
    example
        .segments
        .iter()
        .map(|z| {
            tracker.absorb(model, z, example.cond)?;
            Ok(tracker.memory().byte_size())
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub label: String,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub recall: Option<RecallOutcome>,
    pub curve: Option<ErrorCurve>,
    pub memory_bytes: Vec<usize>,
    pub final_loss: f64,
    pub train_seconds: f64,
}

/// Trains and evaluates one (mode, seed) run on prepared data.
pub fn run_ablation(base: &RunConfig, mode: &AblationMode, data: &PreparedData) -> Result<AblationReport> {
    let mut cfg = base.clone();
    cfg.ablation = mode.clone();
    let label = format!("{}_seed{}", mode.label(), cfg.seed);
    let start = Instant::now();
    let trainer = train_model(&cfg, data)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let final_loss = trainer.log.last().map_or(f64::NAN, |m| m.loss);
    let model = &trainer.model;
    let params = model.params().num_scalars();
    let memory_bytes = match data.train.first() {
        Some(ex) => memory_bytes_by_context(model, cfg.effective().train.memory, ex)?,
        None => Vec::new(),
    };
    let resident = memory_bytes.last().copied().unwrap_or(0);
    let (recall, curve, records) = match &cfg.dataset.probe {
        ProbeKind::Recall(spec) => {
            let out = evaluate_recall(&cfg, model, &data.codec, &data.eval)?;
            let wall = start.elapsed().as_secs_f64();
            let rec = MetricsRecord {
                run: label.clone(),
                segment: spec.segments,
                psnr: psnr_from_mse(out.mse),
                mse: out.mse,
                recall_accuracy: Some(out.accuracy),
                memory_bytes: resident,
                wall_clock_s: wall,
                param_count: params,
            };
            (Some(out), None, vec![rec])
        }
        ProbeKind::Drift(_) => {
            let curve = evaluate_drift(&cfg, model, &data.codec, &data.eval)?;
            let wall = start.elapsed().as_secs_f64();
            let recs = curve.records(&label, resident, wall, params);
            (None, Some(curve), recs)
        }
    };
    Ok(AblationReport {
        label,
        seed: cfg.seed,
        records,
        recall,
        curve,
        memory_bytes,
        final_loss,
        train_seconds,
    })
}

pub fn write_report(dir: &Path, report: &AblationReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_records(&dir.join(format!("{}.csv", report.label)), &report.records)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}
