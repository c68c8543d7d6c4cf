//! Shared-backbone tri-modal encoder.
//!
//! Every modality goes through its own input projection ("tokenizer"), then
//! the single shared MLP backbone (tanh after every layer), then a linear
//! pair head, and is L2-normalized. Video has two heads, one per comparison
//! space. Gradients are derived by hand; see the finite-difference tests.

mod checkpoint;
mod loss;

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use loss::{mil_nce_from_logits, LossConfig, NegativeGrad};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector, FlatGradient, ShapeManifest};
use crate::seed;
use crate::synth::Triplet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub video_in: usize,
    pub audio_in: usize,
    pub text_in: usize,
    pub backbone_dim: usize,
    pub backbone_layers: usize,
    pub va_dim: usize,
    pub vt_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            video_in: 24,
            audio_in: 20,
            text_in: 28,
            backbone_dim: 32,
            backbone_layers: 2,
            va_dim: 16,
            vt_dim: 16,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("video_in", self.video_in),
            ("audio_in", self.audio_in),
            ("text_in", self.text_in),
            ("backbone_dim", self.backbone_dim),
            ("backbone_layers", self.backbone_layers),
            ("va_dim", self.va_dim),
            ("vt_dim", self.vt_dim),
        ];
        for (name, v) in all {
            if v == 0 {
                return Err(Error::Config(format!("model dim `{name}` must be positive")));
            }
        }
        Ok(())
    }
}

/// Affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
}

impl Linear {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(out, inp),
            bias: DenseVector::zeros(out),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        for (yi, b) in y.iter_mut().zip(self.bias.iter()) {
            *yi += b;
        }
        y
    }

    /// Accumulate `dW += dy xᵀ`, `db += dy`; return `Wᵀ dy`.
    fn backward(&self, grad: &mut Linear, x: &[f64], dy: &[f64]) -> Vec<f64> {
        grad.weight.add_outer(dy, x);
        for (g, d) in grad.bias.as_mut_slice().iter_mut().zip(dy) {
            *g += d;
        }
        self.weight.matvec_t(dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tokenizer {
    Video,
    Audio,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    VideoVa,
    Audio,
    VideoVt,
    Text,
}

#[derive(Debug, Clone, Copy)]
struct Route(Tokenizer, Head);

const VIDEO_VA: Route = Route(Tokenizer::Video, Head::VideoVa);
const AUDIO_VA: Route = Route(Tokenizer::Audio, Head::Audio);
const VIDEO_VT: Route = Route(Tokenizer::Video, Head::VideoVt);
const TEXT_VT: Route = Route(Tokenizer::Text, Head::Text);

/// All trainable parameters. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tokenizer_v: Linear,
    pub tokenizer_a: Linear,
    pub tokenizer_t: Linear,
    pub backbone: Vec<Linear>,
    pub head_v_va: Linear,
    pub head_a: Linear,
    pub head_v_vt: Linear,
    pub head_t: Linear,
    manifest: Arc<ShapeManifest>,
}

fn build_manifest(dims: &ModelDims) -> Result<ShapeManifest> {
    let d = dims.backbone_dim;
    let mut entries = Vec::new();
    let mut push = |name: &str, out: usize, inp: usize| {
        entries.push((format!("{name}.weight"), vec![out, inp]));
        entries.push((format!("{name}.bias"), vec![out]));
    };
    push("tokenizer_v", d, dims.video_in);
    push("tokenizer_a", d, dims.audio_in);
    push("tokenizer_t", d, dims.text_in);
    for l in 0..dims.backbone_layers {
        push(&format!("backbone.{l}"), d, d);
    }
    push("head_v_va", dims.va_dim, d);
    push("head_a", dims.va_dim, d);
    push("head_v_vt", dims.vt_dim, d);
    push("head_t", dims.vt_dim, d);
    ShapeManifest::new(entries)
}

impl ModelParams {
    pub fn zeros(dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.backbone_dim;
        Ok(Self {
            tokenizer_v: Linear::zeros(d, dims.video_in),
            tokenizer_a: Linear::zeros(d, dims.audio_in),
            tokenizer_t: Linear::zeros(d, dims.text_in),
            backbone: (0..dims.backbone_layers).map(|_| Linear::zeros(d, d)).collect(),
            head_v_va: Linear::zeros(dims.va_dim, d),
            head_a: Linear::zeros(dims.va_dim, d),
            head_v_vt: Linear::zeros(dims.vt_dim, d),
            head_t: Linear::zeros(dims.vt_dim, d),
            manifest: Arc::new(build_manifest(dims)?),
        })
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims()).expect("dims of a live model are valid")
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            video_in: self.tokenizer_v.weight.cols(),
            audio_in: self.tokenizer_a.weight.cols(),
            text_in: self.tokenizer_t.weight.cols(),
            backbone_dim: self.tokenizer_v.weight.rows(),
            backbone_layers: self.backbone.len(),
            va_dim: self.head_v_va.weight.rows(),
            vt_dim: self.head_v_vt.weight.rows(),
        }
    }

    pub fn manifest(&self) -> &Arc<ShapeManifest> {
        &self.manifest
    }

    pub fn param_count(&self) -> usize {
        self.manifest.total_len()
    }

    fn linears(&self) -> Vec<&Linear> {
        let mut v = vec![&self.tokenizer_v, &self.tokenizer_a, &self.tokenizer_t];
        v.extend(self.backbone.iter());
        v.extend([&self.head_v_va, &self.head_a, &self.head_v_vt, &self.head_t]);
        v
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v = vec![
            &mut self.tokenizer_v,
            &mut self.tokenizer_a,
            &mut self.tokenizer_t,
        ];
        v.extend(self.backbone.iter_mut());
        v.extend([
            &mut self.head_v_va,
            &mut self.head_a,
            &mut self.head_v_vt,
            &mut self.head_t,
        ]);
        v
    }

    /// All parameters in manifest order.
    pub fn to_flat(&self) -> FlatGradient {
        let mut values = Vec::with_capacity(self.param_count());
        for l in self.linears() {
            values.extend_from_slice(l.weight.values());
            values.extend_from_slice(&l.bias);
        }
        FlatGradient::new(values, Arc::clone(&self.manifest)).expect("layout matches manifest")
    }

    /// Overwrite all parameters from a manifest-ordered slice.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Manifest(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("non-finite parameter at index {i}")));
        }
        let mut off = 0;
        for l in self.linears_mut() {
            let w = l.weight.values_mut();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let b = l.bias.as_mut_slice();
            b.copy_from_slice(&flat[off..off + b.len()]);
            off += b.len();
        }
        Ok(())
    }

    fn tokenizer(&self, t: Tokenizer) -> &Linear {
        match t {
            Tokenizer::Video => &self.tokenizer_v,
            Tokenizer::Audio => &self.tokenizer_a,
            Tokenizer::Text => &self.tokenizer_t,
        }
    }

    fn tokenizer_mut(&mut self, t: Tokenizer) -> &mut Linear {
        match t {
            Tokenizer::Video => &mut self.tokenizer_v,
            Tokenizer::Audio => &mut self.tokenizer_a,
            Tokenizer::Text => &mut self.tokenizer_t,
        }
    }

    fn head(&self, h: Head) -> &Linear {
        match h {
            Head::VideoVa => &self.head_v_va,
            Head::Audio => &self.head_a,
            Head::VideoVt => &self.head_v_vt,
            Head::Text => &self.head_t,
        }
    }

    fn head_mut(&mut self, h: Head) -> &mut Linear {
        match h {
            Head::VideoVa => &mut self.head_v_va,
            Head::Audio => &mut self.head_a,
            Head::VideoVt => &mut self.head_v_vt,
            Head::Text => &mut self.head_t,
        }
    }

    fn encode(&self, route: Route, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.backbone.len() + 1);
        acts.push(self.tokenizer(route.0).apply(x));
        for layer in &self.backbone {
            let mut h = layer.apply(acts.last().unwrap());
            h.iter_mut().for_each(|v| *v = v.tanh());
            acts.push(h);
        }
        let y = self.head(route.1).apply(acts.last().unwrap());
        let y_norm = crate::linalg::norm(&y).max(NORMALIZE_EPS);
        let z = y.iter().map(|v| v / y_norm).collect();
        Trace {
            route,
            input: x.to_vec(),
            acts,
            y_norm,
            z,
        }
    }

    /// Accumulate the gradient of a scalar whose derivative w.r.t. `trace.z`
    /// is `dz` into `grads`.
    fn backprop(&self, trace: &Trace, dz: &[f64], grads: &mut ModelParams) {
        let z = &trace.z;
        let zd = crate::linalg::dot_unchecked(z, dz);
        let dy: Vec<f64> = dz
            .iter()
            .zip(z)
            .map(|(d, zi)| (d - zi * zd) / trace.y_norm)
            .collect();
        let top = trace.acts.last().unwrap();
        let mut du = self
            .head(trace.route.1)
            .backward(grads.head_mut(trace.route.1), top, &dy);
        for l in (0..self.backbone.len()).rev() {
            let out = &trace.acts[l + 1];
            let da: Vec<f64> = du.iter().zip(out).map(|(g, u)| g * (1.0 - u * u)).collect();
            du = self.backbone[l].backward(&mut grads.backbone[l], &trace.acts[l], &da);
        }
        let tok = trace.route.0;
        self.tokenizer(tok)
            .backward(grads.tokenizer_mut(tok), &trace.input, &du);
    }
}

const NORMALIZE_EPS: f64 = 1e-12;

struct Trace {
    route: Route,
    input: Vec<f64>,
    /// Tokenizer output followed by each backbone layer's activation.
    acts: Vec<Vec<f64>>,
    y_norm: f64,
    z: Vec<f64>,
}

/// Fresh parameters: weights `N(0, 1/fan_in)`, biases zero.
pub fn init_params(seed_value: u64, dims: &ModelDims) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(dims)?;
    let mut rng = seed::rng_for(seed_value, "init");
    for l in params.linears_mut() {
        let scale = 1.0 / (l.weight.cols() as f64).sqrt();
        for w in l.weight.values_mut() {
            *w = rng.sample::<f64, _>(StandardNormal) * scale;
        }
    }
    Ok(params)
}

/// Normalized embeddings for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub z_v_va: Vec<DenseVector>,
    pub z_a: Vec<DenseVector>,
    pub z_v_vt: Vec<DenseVector>,
    pub z_t_neighbors: Vec<Vec<DenseVector>>,
    pub batch_size: usize,
}

fn check_inputs(params: &ModelParams, batch: &[&Triplet]) -> Result<usize> {
    let d = params.dims();
    let k = batch.first().map_or(0, |t| t.neighbor_texts.len());
    for t in batch {
        let bad = t.video_raw.len() != d.video_in
            || t.audio_raw.len() != d.audio_in
            || t.text_raw.len() != d.text_in
            || t.neighbor_texts.iter().any(|n| n.len() != d.text_in);
        if bad {
            return Err(Error::Dimension(format!(
                "triplet {} raw dims ({}, {}, {}) do not match model inputs ({}, {}, {})",
                t.id,
                t.video_raw.len(),
                t.audio_raw.len(),
                t.text_raw.len(),
                d.video_in,
                d.audio_in,
                d.text_in
            )));
        }
        if t.neighbor_texts.len() != k {
            return Err(Error::Config(format!(
                "triplet {} has {} neighbor texts, batch expects {k}",
                t.id,
                t.neighbor_texts.len()
            )));
        }
    }
    Ok(k)
}

pub fn forward(params: &ModelParams, batch: &[&Triplet]) -> Result<EmbeddingBatch> {
    check_inputs(params, batch)?;
    let emb = |route, x: &DenseVector| DenseVector::from_raw(params.encode(route, x).z);
    Ok(EmbeddingBatch {
        z_v_va: batch.iter().map(|t| emb(VIDEO_VA, &t.video_raw)).collect(),
        z_a: batch.iter().map(|t| emb(AUDIO_VA, &t.audio_raw)).collect(),
        z_v_vt: batch.iter().map(|t| emb(VIDEO_VT, &t.video_raw)).collect(),
        z_t_neighbors: batch
            .iter()
            .map(|t| t.neighbor_texts.iter().map(|n| emb(TEXT_VT, n)).collect())
            .collect(),
        batch_size: batch.len(),
    })
}

/// Embeddings of each video and its primary text in the video-text space;
/// the inputs to zero-shot retrieval.
pub fn embed_retrieval(
    params: &ModelParams,
    set: &[Triplet],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let refs: Vec<&Triplet> = set.iter().collect();
    check_inputs(params, &refs)?;
    let videos = set
        .par_iter()
        .map(|t| params.encode(VIDEO_VT, &t.video_raw).z)
        .collect();
    let texts = set
        .par_iter()
        .map(|t| params.encode(TEXT_VT, &t.text_raw).z)
        .collect();
    Ok((videos, texts))
}

/// Which pairwise objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pair {
    VideoAudio,
    VideoText,
}

/// Forward traces for one pairwise objective: anchors plus candidate bags.
struct PairTraces {
    anchors: Vec<Trace>,
    cands: Vec<Vec<Trace>>,
}

impl PairTraces {
    fn build(params: &ModelParams, batch: &[&Triplet], pair: Pair) -> Result<Self> {
        if batch.len() < 2 {
            return Err(Error::InsufficientNegatives(batch.len()));
        }
        let k = check_inputs(params, batch)?;
        Ok(match pair {
            Pair::VideoAudio => Self {
                anchors: batch
                    .par_iter()
                    .map(|t| params.encode(VIDEO_VA, &t.video_raw))
                    .collect(),
                cands: batch
                    .par_iter()
                    .map(|t| vec![params.encode(AUDIO_VA, &t.audio_raw)])
                    .collect(),
            },
            Pair::VideoText => {
                if k == 0 {
                    return Err(Error::Config(
                        "video-text loss needs at least one neighbor text per sample".into(),
                    ));
                }
                Self {
                    anchors: batch
                        .par_iter()
                        .map(|t| params.encode(VIDEO_VT, &t.video_raw))
                        .collect(),
                    cands: batch
                        .par_iter()
                        .map(|t| {
                            t.neighbor_texts
                                .iter()
                                .map(|n| params.encode(TEXT_VT, n))
                                .collect()
                        })
                        .collect(),
                }
            }
        })
    }

    fn anchor_z(&self) -> Vec<Vec<f64>> {
        self.anchors.iter().map(|t| t.z.clone()).collect()
    }

    fn cand_z(&self) -> Vec<Vec<Vec<f64>>> {
        self.cands
            .iter()
            .map(|bag| bag.iter().map(|t| t.z.clone()).collect())
            .collect()
    }
}

/// Batch loss and exact gradient for one pairwise objective.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[&Triplet],
    pair: Pair,
    cfg: LossConfig,
    neg: NegativeGrad,
) -> Result<(f64, FlatGradient)> {
    let traces = PairTraces::build(params, batch, pair)?;
    let out = loss::batch_contrastive(&traces.anchor_z(), &traces.cand_z(), cfg, neg);
    let mut grads = params.zeros_like();
    for (t, dz) in traces.anchors.iter().zip(&out.d_anchor) {
        params.backprop(t, dz, &mut grads);
    }
    for (bag, dbag) in traces.cands.iter().zip(&out.d_cand) {
        for (t, dz) in bag.iter().zip(dbag) {
            params.backprop(t, dz, &mut grads);
        }
    }
    Ok((out.loss, grads.to_flat()))
}

/// Video-audio NCE (video anchored, in-batch negatives).
pub fn loss_and_grad_va(
    params: &ModelParams,
    batch: &[&Triplet],
    cfg: LossConfig,
) -> Result<(f64, FlatGradient)> {
    loss_and_grad(params, batch, Pair::VideoAudio, cfg, NegativeGrad::Flow)
}

/// Video-text MIL-NCE over each sample's neighbor narrations.
pub fn loss_and_grad_vt(
    params: &ModelParams,
    batch: &[&Triplet],
    cfg: LossConfig,
) -> Result<(f64, FlatGradient)> {
    loss_and_grad(params, batch, Pair::VideoText, cfg, NegativeGrad::Flow)
}

/// Loss value only.
pub fn loss_value(params: &ModelParams, batch: &[&Triplet], pair: Pair, cfg: LossConfig) -> Result<f64> {
    let traces = PairTraces::build(params, batch, pair)?;
    let anchors = traces.anchor_z();
    let cands = traces.cand_z();
    let n = anchors.len();
    let mut total = 0.0;
    for i in 0..n {
        let (l, _, _) = loss::sample_contrastive(&anchors, &cands, i, cfg);
        total += l;
    }
    Ok(total / n as f64)
}

fn per_sample_pair(
    params: &ModelParams,
    traces: &PairTraces,
    anchors: &[Vec<f64>],
    cands: &[Vec<Vec<f64>>],
    i: usize,
    cfg: LossConfig,
) -> FlatGradient {
    let (_, d_a, d_bag) = loss::sample_contrastive(anchors, cands, i, cfg);
    let mut grads = params.zeros_like();
    params.backprop(&traces.anchors[i], &d_a, &mut grads);
    for (t, dz) in traces.cands[i].iter().zip(&d_bag) {
        params.backprop(t, dz, &mut grads);
    }
    grads.to_flat()
}

/// One `(g_va, g_vt)` pair per triplet, each the gradient of that triplet's
/// own loss term with the rest of the batch held fixed as negatives.
pub fn per_sample_grads(
    params: &ModelParams,
    batch: &[&Triplet],
    cfg: LossConfig,
) -> Result<Vec<(FlatGradient, FlatGradient)>> {
    let va = PairTraces::build(params, batch, Pair::VideoAudio)?;
    let vt = PairTraces::build(params, batch, Pair::VideoText)?;
    let (va_a, va_c) = (va.anchor_z(), va.cand_z());
    let (vt_a, vt_c) = (vt.anchor_z(), vt.cand_z());
    Ok((0..batch.len())
        .into_par_iter()
        .map(|i| {
            (
                per_sample_pair(params, &va, &va_a, &va_c, i, cfg),
                per_sample_pair(params, &vt, &vt_a, &vt_c, i, cfg),
            )
        })
        .collect())
}
