use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::diffusion::{AdamWConfig, MemoryMode, TrainConfig};
use crate::error::{Error, Result};
use crate::harness::data::{DatasetSpec, DriftProbeSpec, ProbeKind, RecallProbeSpec};
use crate::model::{ModelConfig, WindowLayout};
use crate::sampling::SamplerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    LastOnly,
    KvCache,
    Recurrent,
}

impl MemoryKind {
    pub fn name(self) -> &'static str {
        match self {
            MemoryKind::LastOnly => "last_only",
            MemoryKind::KvCache => "kv_cache",
            MemoryKind::Recurrent => "recurrent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "last_only" => Ok(MemoryKind::LastOnly),
            "kv_cache" => Ok(MemoryKind::KvCache),
            "recurrent" => Ok(MemoryKind::Recurrent),
            other => Err(Error::Config(format!(
                "unknown memory mode `{other}` (expected last_only, kv_cache or recurrent)"
            ))),
        }
    }
}

/// One conditioning design plus whether robust training is on. Robust
/// training switches memory noise and the correlated prior together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMode {
    pub memory: MemoryKind,
    pub robust: bool,
    /// Largest number of segments the kv cache may hold.
    pub kv_cap: usize,
    /// `σ_mem` used when robust.
    pub sigma_mem: f64,
    /// `α_corr` used when robust.
    pub alpha_corr: f64,
}

impl Default for AblationMode {
    fn default() -> Self {
        Self {
            memory: MemoryKind::Recurrent,
            robust: true,
            kv_cap: 16,
            sigma_mem: 0.1,
            alpha_corr: 1.0,
        }
    }
}

impl AblationMode {
    pub fn memory_mode(&self) -> MemoryMode {
        match self.memory {
            MemoryKind::LastOnly => MemoryMode::LastOnly,
            MemoryKind::KvCache => MemoryMode::KvCache { cap: self.kv_cap },
            MemoryKind::Recurrent => MemoryMode::Recurrent,
        }
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.memory.name(), if self.robust { "" } else { "_nonrobust" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Ground-truth segments given before prediction starts.
    pub prefix_segments: usize,
    /// Segments predicted after the prefix.
    pub rollout_segments: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prefix_segments: 1,
            rollout_segments: 12,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    /// Seeds model initialization, training batches and sampling.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub ablation: AblationMode,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl RunConfig {
    /// Drift probe at the default desk codec size (32×32, 16-frame segments).
    pub fn desk_default() -> Self {
        let codec = CodecConfig::default();
        let model = ModelConfig {
            latent: codec.segment_latent_shape(),
            ..ModelConfig::default()
        };
        Self {
            name: "desk".into(),
            seed: 0,
            dataset: DatasetSpec {
                probe: ProbeKind::Drift(DriftProbeSpec {
                    height: 32,
                    width: 32,
                    segment_frames: 16,
                    segments: 4,
                    sprite: 6,
                    colors: 8,
                }),
                train_examples: 256,
                eval_examples: 16,
                seed: 1,
            },
            codec,
            codec_train: CodecTrainConfig::default(),
            model,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            ablation: AblationMode::default(),
            eval: EvalConfig::default(),
        }
    }

    fn probe_sized(probe: ProbeKind, name: &str) -> Self {
        let codec = CodecConfig {
            segment_frames: 4,
            height: 16,
            width: 16,
            hidden: 48,
            ..CodecConfig::default()
        };
        let model = ModelConfig {
            depth: 4,
            hidden: 32,
            heads: 2,
            patch_t: 1,
            patch_s: 1,
            latent: codec.segment_latent_shape(),
            num_classes: 0,
            timesteps: 1000,
            layout: WindowLayout::Alternating,
            lora_rank: 8,
            mlp_ratio: 2,
        };
        Self {
            name: name.into(),
            seed: 0,
            dataset: DatasetSpec {
                probe,
                train_examples: 256,
                eval_examples: 32,
                seed: 1,
            },
            codec,
            codec_train: CodecTrainConfig {
                steps: 400,
                batch_size: 8,
                optimizer: AdamWConfig {
                    lr: 3e-3,
                    weight_decay: 0.0,
                    ..AdamWConfig::default()
                },
            },
            model,
            train: TrainConfig {
                segments: 4,
                batch_size: 8,
                steps: 2000,
                optimizer: AdamWConfig {
                    lr: 2e-3,
                    weight_decay: 0.0,
                    ..AdamWConfig::default()
                },
                ..TrainConfig::default()
            },
            sampler: SamplerConfig {
                steps: 20,
                ..SamplerConfig::default()
            },
            ablation: AblationMode::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Recall probe with `N = 4` at 16×16.
    pub fn recall_probe() -> Self {
        let mut cfg = Self::probe_sized(ProbeKind::Recall(RecallProbeSpec::default()), "recall");
        cfg.dataset.eval_examples = 64;
        cfg.eval = EvalConfig {
            prefix_segments: 3,
            rollout_segments: 1,
        };
        cfg
    }

    /// Drift probe at 16×16, trained on 4 segments, rolled out to 12.
    pub fn drift_probe() -> Self {
        let mut cfg = Self::probe_sized(ProbeKind::Drift(DriftProbeSpec::default()), "drift");
        cfg.dataset.eval_examples = 16;
        // eight sprite colors take longer to reconstruct than four flat cues
        cfg.codec_train.steps = 2000;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk_default()),
            "recall" => Ok(Self::recall_probe()),
            "drift" => Ok(Self::drift_probe()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Applies the ablation mode and the run seed to the training and
    /// sampling sections.
    pub fn effective(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.train.memory = cfg.ablation.memory_mode();
        let (sigma, alpha) = if cfg.ablation.robust {
            (cfg.ablation.sigma_mem, cfg.ablation.alpha_corr)
        } else {
            (0.0, 0.0)
        };
        cfg.train.sigma_mem = sigma;
        cfg.train.alpha_corr = alpha;
        cfg.sampler.alpha_corr = alpha;
        cfg.train.seed = cfg.seed;
        cfg.train.segments = cfg.dataset.segments();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let (h, w, l) = self.dataset.frame_shape();
        if (h, w, l) != (self.codec.height, self.codec.width, self.codec.segment_frames) {
            return Err(Error::Config(format!(
                "dataset frames {h}x{w} with {l}-frame segments do not match the codec"
            )));
        }
        if self.codec.segment_latent_shape() != self.model.latent {
            return Err(Error::Config(format!(
                "codec latent {:?} does not match model latent {:?}",
                self.codec.segment_latent_shape(),
                self.model.latent
            )));
        }
        if self.model.timesteps != self.train.schedule.timesteps {
            return Err(Error::Config("model and schedule disagree on T".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "recall", "drift"] {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn json_roundtrip() {
        let cfg = RunConfig::recall_probe();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn robust_flag_toggles_both_knobs() {
        let mut cfg = RunConfig::drift_probe();
        cfg.ablation.robust = false;
        let e = cfg.effective();
        assert_eq!((e.train.sigma_mem, e.train.alpha_corr, e.sampler.alpha_corr), (0.0, 0.0, 0.0));
        cfg.ablation.robust = true;
        let e = cfg.effective();
        assert_eq!((e.train.sigma_mem, e.train.alpha_corr, e.sampler.alpha_corr), (0.1, 1.0, 1.0));
    }

    #[test]
    fn mode_names() {
        for k in [MemoryKind::LastOnly, MemoryKind::KvCache, MemoryKind::Recurrent] {
            assert_eq!(MemoryKind::parse(k.name()).unwrap(), k);
        }
        assert!(MemoryKind::parse("full").is_err());
    }
}
