//! Combining the video-audio and video-text gradients into one update.
//!
//! Three tools, usable alone or together:
//! - realignment: when the two gradients conflict (negative inner product),
//!   project each onto the normal plane of the other before summing;
//! - curriculum: skip the update when `cos(g_va, g_vt)` is at or below a
//!   threshold γ that rises linearly over training;
//! - re-weighting: a fixed-scale baseline, `w_va·g_va + w_vt·g_vt`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, dot, FlatGradient};

/// Linear ramp of the curriculum threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub total_steps: usize,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        Self {
            gamma_start: -0.3,
            gamma_end: 0.0,
            total_steps: 2000,
        }
    }
}

impl GammaSchedule {
    pub fn new(gamma_start: f64, gamma_end: f64, total_steps: usize) -> Result<Self> {
        let s = Self {
            gamma_start,
            gamma_end,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |g: f64| (-1.0..=1.0).contains(&g);
        if !in_range(self.gamma_start) || !in_range(self.gamma_end) {
            return Err(Error::Config(format!(
                "gamma endpoints must lie in [-1, 1], got ({}, {})",
                self.gamma_start, self.gamma_end
            )));
        }
        if self.gamma_start > self.gamma_end {
            return Err(Error::Config(format!(
                "gamma schedule must be nondecreasing, got ({}, {})",
                self.gamma_start, self.gamma_end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("gamma total_steps must be positive".into()));
        }
        Ok(())
    }
}

pub fn gamma_at(schedule: &GammaSchedule, step: usize) -> f64 {
    if step >= schedule.total_steps {
        return schedule.gamma_end;
    }
    let frac = step as f64 / schedule.total_steps as f64;
    (schedule.gamma_start + frac * (schedule.gamma_end - schedule.gamma_start))
        .clamp(schedule.gamma_start, schedule.gamma_end)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain sum of the two gradients.
    Baseline,
    /// Fixed per-pair weights.
    Reweight,
    /// Projection on conflict, then sum.
    Realign,
    /// Drop when `cos ≤ γ`, else sum.
    Curriculum,
    /// Drop when `cos ≤ γ`, project when `γ < cos < 0`, sum otherwise.
    Both,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Mode::Baseline,
            "reweight" => Mode::Reweight,
            "realign" => Mode::Realign,
            "curriculum" => Mode::Curriculum,
            "both" => Mode::Both,
            other => {
                return Err(Error::Config(format!(
                    "unknown mode `{other}` (expected baseline|reweight|realign|curriculum|both)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Decide on the gradients aggregated over the whole microbatch.
    Microbatch,
    /// Decide per triplet, then aggregate the kept ones.
    PerSample,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "microbatch" => Ok(Granularity::Microbatch),
            "per_sample" => Ok(Granularity::PerSample),
            other => Err(Error::Config(format!(
                "unknown granularity `{other}` (expected microbatch|per_sample)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonizerConfig {
    pub mode: Mode,
    pub w_va: f64,
    pub w_vt: f64,
    pub schedule: GammaSchedule,
    pub granularity: Granularity,
}

impl Default for HarmonizerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            w_va: 1.0,
            w_vt: 1.0,
            schedule: GammaSchedule::default(),
            granularity: Granularity::Microbatch,
        }
    }
}

impl HarmonizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_va", self.w_va), ("w_vt", self.w_vt)] {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and positive, got {w}")));
            }
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Drop,
    Project,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keep {
    Keep,
    Drop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDecision {
    pub action: Action,
    /// Present unless `action == Drop`.
    pub combined_grad: Option<FlatGradient>,
    pub cos_sim: f64,
}

/// Project conflicting gradients onto each other's normal plane. Both
/// projections use the original counterpart. Identity when `g_va·g_vt ≥ 0`.
pub fn realign(g_va: &FlatGradient, g_vt: &FlatGradient) -> Result<(FlatGradient, FlatGradient)> {
    let d = dot(g_va, g_vt)?;
    if !d.is_finite() {
        return Err(Error::Dimension("non-finite gradient inner product".into()));
    }
    if d >= 0.0 {
        return Ok((g_va.clone(), g_vt.clone()));
    }
    // d < 0 implies both norms are nonzero.
    Ok((project_out(g_va, g_vt, d)?, project_out(g_vt, g_va, d)?))
}

/// `g - (d / |h|²) h` with `d = g·h`. When most of `g` cancels, the first
/// pass leaves a rounding residual along `h` that is large relative to the
/// result, so project once more; if that also cancels, `g` is numerically
/// parallel to `h` and the projection is zero (Kahan-Parlett "twice is
/// enough").
fn project_out(g: &FlatGradient, h: &FlatGradient, d: f64) -> Result<FlatGradient> {
    let hh = dot(h, h)?;
    let once = g.linear_combination(1.0, h, -d / hh)?;
    let once_sq = dot(&once, &once)?;
    if 2.0 * once_sq >= dot(g, g)? {
        return Ok(once);
    }
    let residual = dot(&once, h)?;
    if residual == 0.0 {
        return Ok(once);
    }
    let twice = once.linear_combination(1.0, h, -residual / hh)?;
    if 2.0 * dot(&twice, &twice)? >= once_sq {
        Ok(twice)
    } else {
        Ok(once.with_values(vec![0.0; once.len()])?)
    }
}

/// Keep iff `cos_sim > gamma`.
pub fn curriculum_decision(cos_sim: f64, gamma: f64) -> Keep {
    if cos_sim > gamma {
        Keep::Keep
    } else {
        Keep::Drop
    }
}

fn sum(a: &FlatGradient, b: &FlatGradient) -> Result<FlatGradient> {
    a.linear_combination(1.0, b, 1.0)
}

fn project_then_sum(g_va: &FlatGradient, g_vt: &FlatGradient) -> Result<FlatGradient> {
    let (a, b) = realign(g_va, g_vt)?;
    sum(&a, &b)
}

pub fn combine(
    g_va: &FlatGradient,
    g_vt: &FlatGradient,
    config: &HarmonizerConfig,
    step: usize,
) -> Result<UpdateDecision> {
    let cos = cosine_similarity(g_va, g_vt)?.value;
    let gamma = gamma_at(&config.schedule, step);
    let plain = |g| UpdateDecision {
        action: Action::Plain,
        combined_grad: Some(g),
        cos_sim: cos,
    };
    let project = |g| UpdateDecision {
        action: Action::Project,
        combined_grad: Some(g),
        cos_sim: cos,
    };
    let drop = UpdateDecision {
        action: Action::Drop,
        combined_grad: None,
        cos_sim: cos,
    };
    Ok(match config.mode {
        Mode::Baseline => plain(sum(g_va, g_vt)?),
        Mode::Reweight => plain(g_va.linear_combination(config.w_va, g_vt, config.w_vt)?),
        Mode::Realign => {
            if dot(g_va, g_vt)? < 0.0 {
                project(project_then_sum(g_va, g_vt)?)
            } else {
                plain(sum(g_va, g_vt)?)
            }
        }
        Mode::Curriculum => match curriculum_decision(cos, gamma) {
            Keep::Drop => drop,
            Keep::Keep => plain(sum(g_va, g_vt)?),
        },
        Mode::Both => {
            if curriculum_decision(cos, gamma) == Keep::Drop {
                drop
            } else if cos < 0.0 {
                project(project_then_sum(g_va, g_vt)?)
            } else {
                plain(sum(g_va, g_vt)?)
            }
        }
    })
}
