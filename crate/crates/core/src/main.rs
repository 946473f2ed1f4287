//! `malt` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use malt::diffusion::{write_metrics_csv, DiffusionSchedule};
use malt::harness::checkpoint::{
    codec_checkpoint, model_checkpoint, restore_codec, restore_model, samples_checkpoint,
};
use malt::harness::experiment::{
    evaluate_drift, evaluate_recall, fit_codec, generate_clips, mean, prepare_data_with, run_ablation,
    sampling_rng, train_model, write_report, ClipTruth,
};
use malt::harness::metrics::{psnr_from_mse, write_records, MetricsRecord};
use malt::harness::ppm::write_frame_grid;
use malt::harness::{AblationMode, Checkpoint, MemoryKind, ProbeKind, RunConfig};
use malt::numerics::{SeededRng, Tensor};
use malt::sampling::{generate_long_video, video_prediction_mode};
use malt::Error;

const CSV_SCHEMAS: &str = "\
Output files:
  <run>.csv, curve.csv, predict.csv, sample.csv
      run,segment,psnr,mse,recall_accuracy,memory_bytes,wall_clock_s,param_count
      one row per (run, segment index); recall_accuracy is empty where undefined
  train_metrics.csv      step,loss,lr,n_hist   (n_hist: counts of n = 1|2|...)
  codec_loss.csv         step,loss
  *.ppm                  binary P6 frame grid, one row of frames per segment
  *.ckpt                 binary checkpoint (see `inspect`)

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.";

#[derive(Parser)]
#[command(name = "malt", version, about = "Memory-augmented latent diffusion on synthetic probes", after_help = CSV_SCHEMAS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Defaults to the `--preset`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given: desk, recall, drift.
    #[arg(long, default_value = "recall")]
    preset: String,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Trains the latent codec and writes codec.ckpt.
    TrainCodec(Common),
    /// Trains the denoiser (and a codec unless --codec is given); writes model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Codec checkpoint to reuse instead of training one.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Overrides the number of training steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generates segments from an empty memory.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of segments; defaults to the training segment count.
        #[arg(long)]
        segments: Option<usize>,
    },
    /// Continues ground-truth evaluation clips and scores the predictions.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Trains and evaluates one model per memory mode.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of last_only, kv_cache, recurrent.
        #[arg(long, default_value = "last_only,kv_cache,recurrent")]
        modes: String,
        /// Turns off memory noise and the correlated prior.
        #[arg(long)]
        non_robust: bool,
    },
    /// Per-segment error curve of a drift-probe rollout.
    Curve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Prints a checkpoint's header and records, or the effective run config.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            let cfg: RunConfig =
                serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
            cfg
        }
        None => RunConfig::preset(&c.preset).map_err(|e| usage(e.to_string()))?,
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Config stored in a checkpoint, with a seed override.
fn checkpoint_config(ck: &Checkpoint, c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(_) => load_config(c)?,
        None => ck.meta.config.clone(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path, Failure> {
    std::fs::create_dir_all(&c.out).map_err(|e| Failure::from(Error::from(e)))?;
    Ok(&c.out)
}

fn write_codec_loss(path: &Path, history: &[f64]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in history.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::TrainCodec(common) => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common)?;
            let clips = generate_clips(&cfg)?;
            let (codec, history) = fit_codec(&cfg, &clips)?;
            codec_checkpoint(&cfg, &codec, history.len() as u64).save(&out.join("codec.ckpt"))?;
            write_codec_loss(&out.join("codec_loss.csv"), &history)?;
            println!(
                "codec trained: loss {:.5} -> {:.5}",
                history.first().copied().unwrap_or(f64::NAN),
                history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train { common, codec, steps } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let out = out_dir(&common)?;
            let codec = match codec {
                Some(p) => {
                    let ck = Checkpoint::load(&p)?;
                    Some(restore_codec(&ck)?)
                }
                None => None,
            };
            let data = prepare_data_with(&cfg, codec)?;
            let trainer = train_model(&cfg, &data)?;
            model_checkpoint(&cfg, &trainer, &data.codec).save(&out.join("model.ckpt"))?;
            write_metrics_csv(&out.join("train_metrics.csv"), &trainer.log)?;
            let first = trainer.log.first().map_or(f64::NAN, |m| m.loss);
            let last = trainer.log.last().map_or(f64::NAN, |m| m.loss);
            println!("trained {} steps: loss {first:.4} -> {last:.4}", trainer.step);
        }
        Command::Sample {
            common,
            checkpoint,
            segments,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = checkpoint_config(&ck, &common)?;
            let out = out_dir(&common)?;
            let eff = cfg.effective();
            let model = restore_model(&ck, &cfg.model)?;
            let codec = restore_codec(&ck)?;
            let schedule = DiffusionSchedule::from_config(&eff.train.schedule)?;
            let n = segments.unwrap_or(cfg.dataset.segments());
            let video = generate_long_video(
                &model,
                &codec,
                &schedule,
                n,
                None,
                &eff.sampler,
                eff.train.memory,
                &mut SeededRng::new(cfg.seed),
            )?;
            samples_checkpoint(&cfg, &video.latents).save(&out.join("samples.ckpt"))?;
            write_frame_grid(&out.join("samples.ppm"), &video.frames, cfg.codec.segment_frames)?;
            println!("sampled {n} segments ({} frames)", video.frames.shape()[0]);
        }
        Command::Predict { common, checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = checkpoint_config(&ck, &common)?;
            let out = out_dir(&common)?;
            let model = restore_model(&ck, &cfg.model)?;
            let codec = restore_codec(&ck)?;
            let clips = generate_clips(&cfg)?;
            let params = model.params().num_scalars();
            let records = match &cfg.dataset.probe {
                ProbeKind::Recall(spec) => {
                    let r = evaluate_recall(&cfg, &model, &codec, &clips.eval)?;
                    println!("recall accuracy {:.3} over {} clips", r.accuracy, clips.eval.len());
                    vec![MetricsRecord {
                        run: cfg.name.clone(),
                        segment: spec.segments,
                        psnr: psnr_from_mse(r.mse),
                        mse: r.mse,
                        recall_accuracy: Some(r.accuracy),
                        memory_bytes: model.init_memory().byte_size(),
                        wall_clock_s: 0.0,
                        param_count: params,
                    }]
                }
                ProbeKind::Drift(_) => {
                    let c = evaluate_drift(&cfg, &model, &codec, &clips.eval)?;
                    println!("first-to-last PSNR gap {:.3} dB", c.gap());
                    c.records(&cfg.name, model.init_memory().byte_size(), 0.0, params)
                }
            };
            write_records(&out.join("predict.csv"), &records)?;
            if let Some(first) = clips.eval.first() {
                let eff = cfg.effective();
                let schedule = DiffusionSchedule::from_config(&eff.train.schedule)?;
                let l = cfg.codec.segment_frames;
                let (prefix_n, future) = match &first.truth {
                    ClipTruth::Recall(_) => (cfg.dataset.segments() - 1, 1),
                    ClipTruth::Drift(_) => (cfg.eval.prefix_segments, cfg.eval.rollout_segments),
                };
                let prefix = first.video.narrow(0, 0, prefix_n * l)?;
                let pred = video_prediction_mode(
                    &model,
                    &codec,
                    &schedule,
                    &prefix,
                    future,
                    None,
                    &eff.sampler,
                    eff.train.memory,
                    &mut sampling_rng(cfg.seed, 0),
                )?;
                if let Some(frames) = pred.frames {
                    let all = Tensor::concat(&[&prefix, &frames], 0)?;
                    write_frame_grid(&out.join("predict.ppm"), &all, l)?;
                }
            }
        }
        Command::Ablate {
            common,
            modes,
            non_robust,
        } => {
            let cfg = load_config(&common)?;
            let kinds = modes
                .split(',')
                .map(MemoryKind::parse)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| usage(e.to_string()))?;
            let out = out_dir(&common)?;
            let data = prepare_data_with(&cfg, None)?;
            for kind in kinds {
                let mode = AblationMode {
                    memory: kind,
                    robust: !non_robust,
                    ..cfg.ablation.clone()
                };
                let report = run_ablation(&cfg, &mode, &data)?;
                write_report(out, &report)?;
                match (&report.recall, &report.curve) {
                    (Some(r), _) => println!("{}: recall accuracy {:.3}", report.label, r.accuracy),
                    (_, Some(c)) => println!("{}: PSNR gap {:.3} dB, mean PSNR {:.2}", report.label, c.gap(), mean(&c.psnr)),
                    _ => {}
                }
            }
        }
        Command::Curve { common, checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = checkpoint_config(&ck, &common)?;
            if !matches!(cfg.dataset.probe, ProbeKind::Drift(_)) {
                return Err(usage("curve needs a drift-probe configuration"));
            }
            let out = out_dir(&common)?;
            let model = restore_model(&ck, &cfg.model)?;
            let codec = restore_codec(&ck)?;
            let clips = generate_clips(&cfg)?;
            let c = evaluate_drift(&cfg, &model, &codec, &clips.eval)?;
            let recs = c.records(&cfg.name, model.init_memory().byte_size(), 0.0, model.params().num_scalars());
            write_records(&out.join("curve.csv"), &recs)?;
            for r in &recs {
                println!("segment {:>2}  psnr {:>7.3}  mse {:.6}", r.segment, r.psnr, r.mse);
            }
            println!("gap {:.3} dB", c.gap());
        }
        Command::Inspect { common, checkpoint } => match checkpoint {
            Some(p) => {
                let ck = Checkpoint::load(&p)?;
                println!("kind {:?}, step {}, optimizer step {}", ck.meta.kind, ck.meta.step, ck.meta.opt_step);
                println!("run {} (seed {})", ck.meta.config.name, ck.meta.config.seed);
                let total: usize = ck.tensors.iter().map(|(_, t)| t.len()).sum();
                println!("{} records, {} scalars", ck.tensors.len(), total);
                for (name, t) in &ck.tensors {
                    println!("  {name} {:?}", t.shape());
                }
            }
            None => {
                let cfg = load_config(&common)?;
                println!("{}", serde_json::to_string_pretty(&cfg.effective()).map_err(Error::from)?);
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
