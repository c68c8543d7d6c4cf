//! Pre-training loop: sample a batch, evaluate both pairwise losses, let the
//! harmonizer decide the update, apply the optimizer, log a record.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonizer::{self, gamma_at, Action, Granularity, HarmonizerConfig, UpdateDecision};
use crate::linalg::{cosine_similarity, FlatGradient};
use crate::model::{self, LossConfig, ModelParams};
use crate::seed;
use crate::synth::Triplet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the peak rate down to `lr_final_fraction × peak`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn adam_default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub lr_schedule: LrSchedule,
    pub lr_final_fraction: f64,
    pub optimizer: Optimizer,
    pub harmonizer: HarmonizerConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            warmup_steps: 100,
            lr_schedule: LrSchedule::Cosine,
            lr_final_fraction: 0.5,
            optimizer: Optimizer::adam_default(),
            harmonizer: HarmonizerConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::Config("lr_final_fraction must be in [0, 1]".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(self.loss.tau.is_finite() && self.loss.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::Config("adam betas must be in [0,1), eps > 0".into()));
            }
        }
        self.harmonizer.validate()
    }

    /// Learning rate used at `step`: linear warmup, then the schedule.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => peak,
            LrSchedule::Cosine => {
                let span = (self.steps - self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let floor = peak * self.lr_final_fraction;
                floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One optimizer update with the learning rate for `step`.
pub fn optimizer_step(
    params: &ModelParams,
    grad: &FlatGradient,
    state: &OptimizerState,
    step: usize,
    config: &TrainConfig,
) -> Result<(ModelParams, OptimizerState)> {
    let n = params.param_count();
    if grad.len() != n {
        return Err(Error::Manifest(format!(
            "gradient length {} does not match {n} parameters",
            grad.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Divergence {
            step,
            what: "non-finite gradient entry".into(),
        });
    }
    let lr = config.lr_at(step);
    let mut theta = params.to_flat().into_values();
    let mut next = state.clone();
    next.t += 1;
    match config.optimizer {
        Optimizer::Sgd => {
            for (w, g) in theta.iter_mut().zip(grad.iter()) {
                *w -= lr * g;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let t = next.t as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for i in 0..n {
                let g = grad[i];
                next.m[i] = beta1 * next.m[i] + (1.0 - beta1) * g;
                next.v[i] = beta2 * next.v[i] + (1.0 - beta2) * g * g;
                let m_hat = next.m[i] / bc1;
                let v_hat = next.v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    if theta.iter().any(|w| !w.is_finite()) {
        return Err(Error::Divergence {
            step,
            what: "parameters became non-finite".into(),
        });
    }
    let mut out = params.clone();
    out.set_flat(&theta)?;
    Ok((out, next))
}

/// Per-step log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_va: f64,
    pub loss_vt: f64,
    pub cos_sim: f64,
    pub action: Action,
    pub grad_norm_va: f64,
    pub grad_norm_vt: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Triplets whose contribution survived the harmonizer (whole batch or
    /// nothing at microbatch granularity).
    pub n_kept: usize,
}

/// Everything computed in one step, for inspection.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub batch_ids: Vec<u64>,
    pub g_va: FlatGradient,
    pub g_vt: FlatGradient,
    pub decision: UpdateDecision,
}

pub struct Trainer<'a> {
    params: ModelParams,
    state: OptimizerState,
    config: TrainConfig,
    data: &'a [Triplet],
    rng: ChaCha8Rng,
    step: usize,
    updates: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(params: ModelParams, data: &'a [Triplet], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if config.batch_size > data.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {}",
                config.batch_size,
                data.len()
            )));
        }
        let state = OptimizerState::new(params.param_count());
        let rng = seed::rng_for(config.seed, "batch-sampler");
        Ok(Self {
            params,
            state,
            config,
            data,
            rng,
            step: 0,
            updates: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Parameter updates applied so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    fn sample_batch(&mut self) -> Vec<&'a Triplet> {
        let data = self.data;
        (0..self.config.batch_size)
            .map(|_| &data[self.rng.gen_range(0..data.len())])
            .collect()
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let step = self.step;
        let batch = self.sample_batch();
        let loss_cfg = self.config.loss;
        let (loss_va, g_va) = model::loss_and_grad_va(&self.params, &batch, loss_cfg)?;
        let (loss_vt, g_vt) = model::loss_and_grad_vt(&self.params, &batch, loss_cfg)?;
        if !(loss_va.is_finite() && loss_vt.is_finite()) {
            return Err(Error::Divergence {
                step,
                what: format!("non-finite loss (va={loss_va}, vt={loss_vt})"),
            });
        }
        let hcfg = &self.config.harmonizer;
        let (decision, n_kept) = match hcfg.granularity {
            Granularity::Microbatch => {
                let d = harmonizer::combine(&g_va, &g_vt, hcfg, step)?;
                let kept = if d.action == Action::Drop { 0 } else { batch.len() };
                (d, kept)
            }
            Granularity::PerSample => {
                let pairs = model::per_sample_grads(&self.params, &batch, loss_cfg)?;
                per_sample_decision(&pairs, hcfg, step)?
            }
        };

        if let Some(g) = &decision.combined_grad {
            let (p, s) = optimizer_step(&self.params, g, &self.state, step, &self.config)?;
            self.params = p;
            self.state = s;
            self.updates += 1;
        }

        let record = StepRecord {
            step,
            loss_va,
            loss_vt,
            cos_sim: decision.cos_sim,
            action: decision.action,
            grad_norm_va: g_va.norm(),
            grad_norm_vt: g_vt.norm(),
            gamma: gamma_at(&hcfg.schedule, step),
            lr: self.config.lr_at(step),
            n_kept,
        };
        if (step + 1) % self.config.log_every == 0 {
            log::info!(
                "step {} loss_va {:.4} loss_vt {:.4} cos {:+.3} {:?}",
                step + 1,
                loss_va,
                loss_vt,
                record.cos_sim,
                record.action
            );
        }
        self.step += 1;
        Ok(StepOutcome {
            record,
            batch_ids: batch.iter().map(|t| t.id).collect(),
            g_va,
            g_vt,
            decision,
        })
    }
}

/// Decide triplet by triplet, then average the kept combined gradients.
/// The logged cosine is the mean per-triplet cosine.
fn per_sample_decision(
    pairs: &[(FlatGradient, FlatGradient)],
    hcfg: &HarmonizerConfig,
    step: usize,
) -> Result<(UpdateDecision, usize)> {
    let mut acc: Option<Vec<f64>> = None;
    let mut kept = 0usize;
    let mut projected = false;
    let mut cos_sum = 0.0;
    for (va, vt) in pairs {
        let d = harmonizer::combine(va, vt, hcfg, step)?;
        cos_sum += d.cos_sim;
        if let Some(g) = d.combined_grad {
            kept += 1;
            projected |= d.action == Action::Project;
            match &mut acc {
                None => acc = Some(g.into_values()),
                Some(a) => a.iter_mut().zip(g.iter()).for_each(|(x, y)| *x += y),
            }
        }
    }
    let cos_sim = (cos_sum / pairs.len() as f64).clamp(-1.0, 1.0);
    let template = &pairs[0].0;
    let decision = match acc {
        None => UpdateDecision {
            action: Action::Drop,
            combined_grad: None,
            cos_sim,
        },
        Some(mut a) => {
            a.iter_mut().for_each(|x| *x /= kept as f64);
            UpdateDecision {
                action: if projected { Action::Project } else { Action::Plain },
                combined_grad: Some(template.with_values(a)?),
                cos_sim,
            }
        }
    };
    Ok((decision, kept))
}

pub fn train(
    params: ModelParams,
    data: &[Triplet],
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(params, data, config.clone())?;
    let mut records = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        records.push(trainer.step()?.record);
    }
    Ok((trainer.into_params(), records))
}

/// One probed triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictSample {
    pub id: u64,
    pub cos: f64,
    pub text_aligned: bool,
    pub audio_aligned: bool,
}

/// Chunk the probe set into batches of `batch_size`, folding a trailing
/// singleton into the previous chunk so every chunk has negatives.
fn probe_chunks(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + batch_size).min(n);
        if n - end == 1 {
            end = n;
        }
        out.push(start..end);
        start = end;
    }
    out
}

/// Per-triplet `cos(g_va, g_vt)` over `probe` under the current parameters.
pub fn probe_conflicts(
    params: &ModelParams,
    probe: &[Triplet],
    batch_size: usize,
    loss: LossConfig,
) -> Result<Vec<ConflictSample>> {
    if probe.len() < 2 {
        return Err(Error::InsufficientNegatives(probe.len()));
    }
    let mut out = Vec::with_capacity(probe.len());
    for range in probe_chunks(probe.len(), batch_size.max(2)) {
        let chunk: Vec<&Triplet> = probe[range].iter().collect();
        let pairs = model::per_sample_grads(params, &chunk, loss)?;
        for (t, (va, vt)) in chunk.iter().zip(&pairs) {
            out.push(ConflictSample {
                id: t.id,
                cos: cosine_similarity(va, vt)?.value,
                text_aligned: t.text_aligned,
                audio_aligned: t.audio_aligned,
            });
        }
    }
    Ok(out)
}

/// Result of [`conflict_trace`].
#[derive(Debug, Clone)]
pub struct ConflictTrace {
    /// Parameters after the probe optimization.
    pub params: ModelParams,
    /// Step log of the probe optimization.
    pub records: Vec<StepRecord>,
    pub samples: Vec<ConflictSample>,
}

/// Optimize for `n_probe_steps` on `train_data` with `config`, then probe
/// per-triplet gradient conflicts on the held-out `probe` set.
pub fn conflict_trace(
    params: ModelParams,
    train_data: &[Triplet],
    probe: &[Triplet],
    config: &TrainConfig,
    n_probe_steps: usize,
) -> Result<ConflictTrace> {
    let warm_cfg = TrainConfig {
        steps: n_probe_steps,
        warmup_steps: config.warmup_steps.min(n_probe_steps),
        ..config.clone()
    };
    let (params, records) = if n_probe_steps == 0 {
        (params, Vec::new())
    } else {
        train(params, train_data, &warm_cfg)?
    };
    let samples = probe_conflicts(&params, probe, config.batch_size, config.loss)?;
    Ok(ConflictTrace {
        params,
        records,
        samples,
    })
}
