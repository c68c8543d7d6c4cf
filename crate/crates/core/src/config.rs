//! Flat `key = value` experiment configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every key
//! except `seed` has a default. Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::Direction;
use crate::harmonizer::{GammaSchedule, Granularity, HarmonizerConfig, Mode};
use crate::model::{LossConfig, ModelDims};
use crate::seed::derive_seed;
use crate::synth::SynthConfig;
use crate::trainer::{LrSchedule, Optimizer, TrainConfig};

/// Settings for `diagnose`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Optimization steps taken from the checkpoint before probing.
    pub steps: usize,
    /// Held-out triplets whose per-sample conflict is measured.
    pub size: usize,
    pub batch_size: usize,
    pub hist_step_bins: usize,
    pub hist_cos_bins: usize,
    /// Share of the probe set listed as most/least aligned.
    pub extreme_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    /// Share of the dataset set aside for evaluation before cleaning.
    pub eval_fraction: f64,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub eval_ks: Vec<usize>,
    pub eval_direction: Direction,
    pub dump_embeddings: bool,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    pub fn probe_seed(&self) -> u64 {
        derive_seed(self.seed, "probe")
    }

    pub fn split_fractions(&self) -> (f64, f64) {
        (1.0 - self.eval_fraction, self.eval_fraction)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse a document; `origin` names it in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut doc = Document::parse(text, origin)?;
        let seed: u64 = doc.required("seed")?;

        let synth_default = SynthConfig::default();
        let synth = SynthConfig {
            n_samples: doc.get("n_samples", synth_default.n_samples)?,
            latent_dim: doc.get("latent_dim", synth_default.latent_dim)?,
            video_dim: doc.get("video_dim", synth_default.video_dim)?,
            audio_dim: doc.get("audio_dim", synth_default.audio_dim)?,
            text_dim: doc.get("text_dim", synth_default.text_dim)?,
            p_mis_text: doc.get("p_mis_text", synth_default.p_mis_text)?,
            p_mis_audio: doc.get("p_mis_audio", synth_default.p_mis_audio)?,
            noise_std: doc.get("noise_std", synth_default.noise_std)?,
            k_neighbors: doc.get("k_neighbors", synth_default.k_neighbors)?,
            neighbor_std: doc.get("neighbor_std", synth_default.neighbor_std)?,
            seed: derive_seed(seed, "synth"),
        };
        let eval_fraction = doc.get("eval_fraction", 0.2)?;

        let dims_default = ModelDims::default();
        let dims = ModelDims {
            video_in: synth.video_dim,
            audio_in: synth.audio_dim,
            text_in: synth.text_dim,
            backbone_dim: doc.get("backbone_dim", dims_default.backbone_dim)?,
            backbone_layers: doc.get("backbone_layers", dims_default.backbone_layers)?,
            va_dim: doc.get("va_dim", dims_default.va_dim)?,
            vt_dim: doc.get("vt_dim", dims_default.vt_dim)?,
        };

        let t = TrainConfig::default();
        let steps: usize = doc.get("steps", t.steps)?;
        let use_adam = doc.get_with("optimizer", true, |v| match v.as_str() {
            "adam" => Ok(true),
            "sgd" => Ok(false),
            other => Err(format!("unknown optimizer `{other}` (expected sgd|adam)")),
        })?;
        let optimizer = match Optimizer::adam_default() {
            Optimizer::Adam { beta1, beta2, eps } if use_adam => Optimizer::Adam {
                beta1: doc.get("adam_beta1", beta1)?,
                beta2: doc.get("adam_beta2", beta2)?,
                eps: doc.get("adam_eps", eps)?,
            },
            _ => Optimizer::Sgd,
        };
        let lr_schedule = doc.get_with("lr_schedule", t.lr_schedule, |v| match v.as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(format!("unknown schedule `{other}` (expected constant|cosine)")),
        })?;
        let h = HarmonizerConfig::default();
        let schedule = GammaSchedule {
            gamma_start: doc.get("gamma_start", h.schedule.gamma_start)?,
            gamma_end: doc.get("gamma_end", h.schedule.gamma_end)?,
            total_steps: doc.get("gamma_steps", steps.max(1))?,
        };
        let harmonizer = HarmonizerConfig {
            mode: doc.get::<Mode>("mode", h.mode)?,
            w_va: doc.get("w_va", h.w_va)?,
            w_vt: doc.get("w_vt", h.w_vt)?,
            schedule,
            granularity: doc.get::<Granularity>("granularity", h.granularity)?,
        };
        let loss_default = LossConfig::default();
        let train = TrainConfig {
            steps,
            batch_size: doc.get("batch_size", t.batch_size)?,
            learning_rate: doc.get("learning_rate", t.learning_rate)?,
            warmup_steps: doc.get("warmup_steps", t.warmup_steps.min(steps))?,
            lr_schedule,
            lr_final_fraction: doc.get("lr_final_fraction", t.lr_final_fraction)?,
            optimizer,
            harmonizer,
            loss: LossConfig {
                tau: doc.get("tau", loss_default.tau)?,
                symmetric: doc.get("symmetric_loss", loss_default.symmetric)?,
            },
            seed: derive_seed(seed, "train"),
            log_every: doc.get("log_every", t.log_every)?,
        };
        let checkpoint_every = doc.get("checkpoint_every", 0usize)?;

        let eval_ks = doc.get_with("eval_ks", vec![1, 5, 10], |v| {
            v.split(',')
                .map(|k| k.trim().parse::<usize>().map_err(|e| format!("bad K `{k}`: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()
        })?;
        let eval_direction = doc.get_with("eval_direction", Direction::VideoToText, |v| match v.as_str() {
            "video_to_text" => Ok(Direction::VideoToText),
            "text_to_video" => Ok(Direction::TextToVideo),
            other => Err(format!("unknown direction `{other}` (expected video_to_text|text_to_video)")),
        })?;
        let dump_embeddings = doc.get("dump_embeddings", false)?;

        let probe = ProbeConfig {
            steps: doc.get("probe_steps", 200usize)?,
            size: doc.get("probe_size", 200usize)?,
            batch_size: doc.get("probe_batch_size", train.batch_size)?,
            hist_step_bins: doc.get("hist_step_bins", 10usize)?,
            hist_cos_bins: doc.get("hist_cos_bins", 20usize)?,
            extreme_fraction: doc.get("extreme_fraction", 0.05)?,
        };

        doc.finish()?;

        let cfg = ExperimentConfig {
            seed,
            synth,
            eval_fraction,
            dims,
            train,
            checkpoint_every,
            eval_ks,
            eval_direction,
            dump_embeddings,
            probe,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.dims.validate()?;
        self.train.validate()?;
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval_fraction must lie in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval_ks must be a nonempty list of positive integers".into()));
        }
        let p = &self.probe;
        if p.size < 2 || p.batch_size < 2 {
            return Err(Error::Config("probe_size and probe_batch_size must be at least 2".into()));
        }
        if p.hist_step_bins == 0 || p.hist_cos_bins == 0 {
            return Err(Error::Config("histogram bin counts must be positive".into()));
        }
        if !(p.extreme_fraction > 0.0 && p.extreme_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "extreme_fraction must lie in (0, 0.5], got {}",
                p.extreme_fraction
            )));
        }
        Ok(())
    }
}

struct Entry {
    line: usize,
    value: String,
}

/// Raw key/value pairs; keys are removed as they are consumed so leftovers
/// can be reported as unknown.
struct Document {
    origin: String,
    entries: BTreeMap<String, Entry>,
}

impl Document {
    fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line,
                msg,
            };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(err(format!("invalid key `{key}`")));
            }
            if let Some(prev) = entries.get(key) {
                return Err(err(format!("duplicate key `{key}` (first set on line {})", prev.line)));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    line,
                    value: value.trim().to_string(),
                },
            );
        }
        Ok(Self {
            origin: origin.to_string(),
            entries,
        })
    }

    fn get_with<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl FnOnce(String) -> std::result::Result<T, String>,
    ) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(e) => parse(e.value.clone()).map_err(|msg| Error::Parse {
                path: self.origin.clone(),
                line: e.line,
                msg: format!("{key} = {}: {msg}", e.value),
            }),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get_with(key, default, |v| v.parse::<T>().map_err(|e| e.to_string()))
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if !self.entries.contains_key(key) {
            return Err(Error::Config(format!("{}: missing required key `{key}`", self.origin)));
        }
        self.get_with(key, None, |v| v.parse::<T>().map(Some).map_err(|e| e.to_string()))
            .map(|v| v.expect("key present"))
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, e)| e.line) {
            None => Ok(()),
            Some((key, e)) => Err(Error::Parse {
                path: self.origin,
                line: e.line,
                msg: format!("unknown key `{key}`"),
            }),
        }
    }
}
