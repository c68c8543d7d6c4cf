//! Reference implementations shared by the integration tests: a naive
//! forward pass and loss written directly from the definitions, and a
//! central finite-difference gradient.

#![allow(dead_code)]

use gradharm::linalg::{reshape, TensorMap};
use gradharm::model::{init_params, LossConfig, ModelDims, ModelParams, Pair};
use gradharm::synth::{generate, SynthConfig, Triplet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Outer step for [`richardson_difference`].
pub const RICHARDSON_STEP: f64 = 1e-4;
/// Denominator floor for relative errors. Central differences carry an
/// absolute roundoff of about ε·|L|/h, a few 1e-11 for the losses seen
/// here, so entries below the floor are held to an absolute 1e-10 instead.
pub const REL_FLOOR: f64 = 1e-4;

fn affine(t: &TensorMap, name: &str, x: &[f64]) -> Vec<f64> {
    let w = &t[&format!("{name}.weight")];
    let b = &t[&format!("{name}.bias")];
    let (rows, cols) = (w.dims[0], w.dims[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| b.values[r] + (0..cols).map(|c| w.values[r * cols + c] * x[c]).sum::<f64>())
        .collect()
}

fn embed(t: &TensorMap, layers: usize, tokenizer: &str, head: &str, x: &[f64]) -> Vec<f64> {
    let mut h = affine(t, tokenizer, x);
    for l in 0..layers {
        h = affine(t, &format!("backbone.{l}"), &h).iter().map(|v| v.tanh()).collect();
    }
    let y = affine(t, head, &h);
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    y.iter().map(|v| v / n).collect()
}

fn sim(a: &[f64], b: &[f64], tau: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau
}

fn pair_embeddings(
    params: &ModelParams,
    flat: &[f64],
    batch: &[Triplet],
    pair: Pair,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let t = reshape(flat, params.manifest()).unwrap();
    let layers = params.dims().backbone_layers;
    match pair {
        Pair::VideoAudio => batch
            .iter()
            .map(|s| {
                (
                    embed(&t, layers, "tokenizer_v", "head_v_va", &s.video_raw),
                    vec![embed(&t, layers, "tokenizer_a", "head_a", &s.audio_raw)],
                )
            })
            .unzip(),
        Pair::VideoText => batch
            .iter()
            .map(|s| {
                (
                    embed(&t, layers, "tokenizer_v", "head_v_vt", &s.video_raw),
                    s.neighbor_texts
                        .iter()
                        .map(|x| embed(&t, layers, "tokenizer_t", "head_t", x))
                        .collect(),
                )
            })
            .unzip(),
    }
}

/// `-ln(Σ_pos e^s / Σ_all e^s)` for anchor `i` against every bag.
fn row_term(anchors: &[Vec<f64>], bags: &[Vec<Vec<f64>>], i: usize, tau: f64) -> f64 {
    let pos: f64 = bags[i].iter().map(|c| sim(&anchors[i], c, tau).exp()).sum();
    let all: f64 = bags.iter().flatten().map(|c| sim(&anchors[i], c, tau).exp()).sum();
    -(pos / all).ln()
}

/// Same for bag `i` against every anchor.
fn col_term(anchors: &[Vec<f64>], bags: &[Vec<Vec<f64>>], i: usize, tau: f64) -> f64 {
    let pos: f64 = bags[i].iter().map(|c| sim(&anchors[i], c, tau).exp()).sum();
    let all: f64 = anchors
        .iter()
        .flat_map(|a| bags[i].iter().map(move |c| sim(a, c, tau).exp()))
        .sum();
    -(pos / all).ln()
}

fn sample_term(anchors: &[Vec<f64>], bags: &[Vec<Vec<f64>>], i: usize, cfg: LossConfig) -> f64 {
    if cfg.symmetric {
        0.5 * (row_term(anchors, bags, i, cfg.tau) + col_term(anchors, bags, i, cfg.tau))
    } else {
        row_term(anchors, bags, i, cfg.tau)
    }
}

/// Mean contrastive loss evaluated straight from the definition, with the
/// parameters given as a flat manifest-ordered vector.
pub fn naive_loss(
    params: &ModelParams,
    flat: &[f64],
    batch: &[Triplet],
    pair: Pair,
    cfg: LossConfig,
) -> f64 {
    let (anchors, bags) = pair_embeddings(params, flat, batch, pair);
    let n = batch.len();
    (0..n).map(|i| sample_term(&anchors, &bags, i, cfg)).sum::<f64>() / n as f64
}

/// Loss of sample `i` where every other sample's embeddings are frozen at
/// `base` and only sample `i` is evaluated at `flat`.
pub fn naive_sample_loss(
    params: &ModelParams,
    base: &[f64],
    flat: &[f64],
    batch: &[Triplet],
    i: usize,
    pair: Pair,
    cfg: LossConfig,
) -> f64 {
    let (mut anchors, mut bags) = pair_embeddings(params, base, batch, pair);
    let (a, b) = pair_embeddings(params, flat, &batch[i..=i], pair);
    anchors[i] = a.into_iter().next().unwrap();
    bags[i] = b.into_iter().next().unwrap();
    sample_term(&anchors, &bags, i, cfg)
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `(4 D(h/2) - D(h)) / 3` over central differences `D`: cancels the h²
/// truncation term, which at τ = 0.07 is already ~1e-6 relative for h = 1e-5.
pub fn richardson_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let coarse = central_difference(&f, x, h);
    let fine = central_difference(&f, x, h / 2.0);
    fine.iter().zip(&coarse).map(|(a, b)| (4.0 * a - b) / 3.0).collect()
}

/// Largest entrywise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub struct GradInstance {
    pub params: ModelParams,
    pub batch: Vec<Triplet>,
    pub cfg: LossConfig,
}

/// Small random model and batch: backbone dim ≤ 8, batch ≤ 4, k ≤ 3.
/// Biases are randomized so their gradients are exercised too.
pub fn grad_instance(seed: u64, tau: f64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        video_in: rng.gen_range(3..=6),
        audio_in: rng.gen_range(3..=6),
        text_in: rng.gen_range(3..=6),
        backbone_dim: rng.gen_range(2..=8),
        backbone_layers: rng.gen_range(1..=2),
        va_dim: rng.gen_range(2..=4),
        vt_dim: rng.gen_range(2..=4),
    };
    let mut params = init_params(seed, &dims).unwrap();
    let mut flat = params.to_flat().into_values();
    for v in &mut flat {
        *v += rng.gen_range(-0.1..0.1);
    }
    params.set_flat(&flat).unwrap();
    let batch = generate(&SynthConfig {
        n_samples: rng.gen_range(2..=4),
        latent_dim: 3,
        video_dim: dims.video_in,
        audio_dim: dims.audio_in,
        text_dim: dims.text_in,
        p_mis_text: 0.5,
        p_mis_audio: 0.3,
        noise_std: 0.3,
        k_neighbors: rng.gen_range(1..=3),
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    GradInstance {
        params,
        batch,
        cfg: LossConfig {
            tau,
            symmetric: rng.gen_bool(0.3),
        },
    }
}

/// Worst relative error of the analytic batch gradient (both pairs) against
/// Richardson-extrapolated central differences of [`naive_loss`].
pub fn batch_gradient_error(inst: &GradInstance) -> f64 {
    use gradharm::model::{loss_and_grad, NegativeGrad};
    let refs: Vec<&Triplet> = inst.batch.iter().collect();
    let x = inst.params.to_flat().into_values();
    [Pair::VideoAudio, Pair::VideoText]
        .into_iter()
        .map(|pair| {
            let (_, g) = loss_and_grad(&inst.params, &refs, pair, inst.cfg, NegativeGrad::Flow).unwrap();
            let fd = richardson_difference(
                |p| naive_loss(&inst.params, p, &inst.batch, pair, inst.cfg),
                &x,
                RICHARDSON_STEP,
            );
            max_relative_error(&g, &fd, REL_FLOOR)
        })
        .fold(0.0, f64::max)
}
