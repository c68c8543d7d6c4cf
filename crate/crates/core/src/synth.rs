//! Synthetic tri-modal data with known alignment ground truth.
//!
//! Each sample draws a latent `c`. Aligned modalities are fixed random linear
//! maps of `c` plus Gaussian noise; a misaligned modality is generated the same
//! way from an independent decoy latent. Neighbor texts are perturbations of
//! the text latent (so a misaligned narration is misaligned in all of its
//! neighbors too).

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub id: u64,
    pub video_raw: DenseVector,
    pub audio_raw: DenseVector,
    pub text_raw: DenseVector,
    pub neighbor_texts: Vec<DenseVector>,
    pub text_aligned: bool,
    pub audio_aligned: bool,
}

impl Triplet {
    pub fn fully_aligned(&self) -> bool {
        self.text_aligned && self.audio_aligned
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub latent_dim: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub p_mis_text: f64,
    pub p_mis_audio: f64,
    pub noise_std: f64,
    pub k_neighbors: usize,
    /// Std of the latent perturbation that produces each neighbor text.
    pub neighbor_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            latent_dim: 16,
            video_dim: 24,
            audio_dim: 20,
            text_dim: 28,
            p_mis_text: 0.0,
            p_mis_audio: 0.0,
            noise_std: 0.1,
            k_neighbors: 4,
            neighbor_std: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_mis_text", self.p_mis_text), ("p_mis_audio", self.p_mis_audio)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        for (name, d) in [
            ("n_samples", self.n_samples),
            ("latent_dim", self.latent_dim),
            ("video_dim", self.video_dim),
            ("audio_dim", self.audio_dim),
            ("text_dim", self.text_dim),
            ("k_neighbors", self.k_neighbors),
        ] {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, s) in [("noise_std", self.noise_std), ("neighbor_std", self.neighbor_std)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative real, got {s}")));
            }
        }
        Ok(())
    }
}

struct Maps {
    video: DenseMatrix,
    audio: DenseMatrix,
    text: DenseMatrix,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let values = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    DenseMatrix::new(rows, cols, values).expect("positive dims")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

/// Latents behind one sample, exposed for tests of the generative model.
#[derive(Debug, Clone)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct SampleLatents {
    pub video: Vec<f64>,
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
}

fn emit(map: &DenseMatrix, latent: &[f64], rng: &mut ChaCha8Rng, noise_std: f64) -> DenseVector {
    let mut x = map.matvec(latent);
    for v in &mut x {
        *v += rng.sample::<f64, _>(StandardNormal) * noise_std;
    }
    DenseVector::from_raw(x)
}

fn generate_sample(config: &SynthConfig, maps: &Maps, index: usize) -> (Triplet, SampleLatents) {
    let mut rng = seed::rng_indexed(config.seed, "synth-sample", index as u64);
    let c = gaussian_vec(&mut rng, config.latent_dim, 1.0);
    // Always consume the same draws so the stream layout is independent of p_mis.
    let u_text: f64 = rng.gen();
    let u_audio: f64 = rng.gen();
    let decoy_text = gaussian_vec(&mut rng, config.latent_dim, 1.0);
    let decoy_audio = gaussian_vec(&mut rng, config.latent_dim, 1.0);
    let text_aligned = u_text >= config.p_mis_text;
    let audio_aligned = u_audio >= config.p_mis_audio;
    let c_text = if text_aligned { c.clone() } else { decoy_text };
    let c_audio = if audio_aligned { c.clone() } else { decoy_audio };

    let video_raw = emit(&maps.video, &c, &mut rng, config.noise_std);
    let audio_raw = emit(&maps.audio, &c_audio, &mut rng, config.noise_std);
    let text_raw = emit(&maps.text, &c_text, &mut rng, config.noise_std);
    let neighbor_texts = (0..config.k_neighbors)
        .map(|_| {
            let shifted: Vec<f64> = c_text
                .iter()
                .map(|v| v + rng.sample::<f64, _>(StandardNormal) * config.neighbor_std)
                .collect();
            emit(&maps.text, &shifted, &mut rng, config.noise_std)
        })
        .collect();

    (
        Triplet {
            id: index as u64,
            video_raw,
            audio_raw,
            text_raw,
            neighbor_texts,
            text_aligned,
            audio_aligned,
        },
        SampleLatents {
            video: c,
            audio: c_audio,
            text: c_text,
        },
    )
}

fn build_maps(config: &SynthConfig) -> Maps {
    let mut rng = seed::rng_for(config.seed, "synth-maps");
    let scale = 1.0 / (config.latent_dim as f64).sqrt();
    Maps {
        video: gaussian_matrix(&mut rng, config.video_dim, config.latent_dim, scale),
        audio: gaussian_matrix(&mut rng, config.audio_dim, config.latent_dim, scale),
        text: gaussian_matrix(&mut rng, config.text_dim, config.latent_dim, scale),
    }
}

pub(crate) fn generate_with_latents(config: &SynthConfig) -> Result<Vec<(Triplet, SampleLatents)>> {
    config.validate()?;
    let maps = build_maps(config);
    Ok((0..config.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(config, &maps, i))
        .collect())
}

pub fn generate(config: &SynthConfig) -> Result<Vec<Triplet>> {
    Ok(generate_with_latents(config)?
        .into_iter()
        .map(|(t, _)| t)
        .collect())
}

/// Split into `(train, eval_clean)`. The eval share is drawn from a seeded
/// shuffle; eval candidates that are not fully aligned go back to train, so
/// the two parts always cover the dataset.
pub fn split(
    dataset: &[Triplet],
    fractions: (f64, f64),
    seed_value: u64,
) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    let (train_frac, eval_frac) = fractions;
    if !(train_frac >= 0.0 && eval_frac >= 0.0) || ((train_frac + eval_frac) - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "fractions must be nonnegative and sum to 1, got {train_frac} + {eval_frac}"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng_for(seed_value, "split"));
    let n_eval = (dataset.len() as f64 * eval_frac).round() as usize;
    let mut train = Vec::with_capacity(dataset.len());
    let mut eval = Vec::with_capacity(n_eval);
    for (pos, &i) in order.iter().enumerate() {
        let t = &dataset[i];
        if pos < n_eval && t.fully_aligned() {
            eval.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    if eval.is_empty() {
        return Err(Error::Split(
            "no fully aligned triplets landed in the eval share".into(),
        ));
    }
    train.sort_by_key(|t| t.id);
    eval.sort_by_key(|t| t.id);
    Ok((train, eval))
}

pub const DATASET_MAGIC: &[u8; 4] = b"GHDS";
pub const DATASET_VERSION: u32 = 1;

/// Header fields of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_samples: u64,
    pub video_dim: u32,
    pub audio_dim: u32,
    pub text_dim: u32,
    pub k_neighbors: u32,
}

impl DatasetHeader {
    pub fn of(dataset: &[Triplet]) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::Format("cannot describe an empty dataset".into()))?;
        let header = Self {
            n_samples: dataset.len() as u64,
            video_dim: first.video_raw.len() as u32,
            audio_dim: first.audio_raw.len() as u32,
            text_dim: first.text_raw.len() as u32,
            k_neighbors: first.neighbor_texts.len() as u32,
        };
        for t in dataset {
            let ok = t.video_raw.len() == header.video_dim as usize
                && t.audio_raw.len() == header.audio_dim as usize
                && t.text_raw.len() == header.text_dim as usize
                && t.neighbor_texts.len() == header.k_neighbors as usize
                && t.neighbor_texts.iter().all(|n| n.len() == header.text_dim as usize);
            if !ok {
                return Err(Error::Dimension(format!(
                    "triplet {} does not match dataset-wide dims",
                    t.id
                )));
            }
        }
        Ok(header)
    }
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_dataset(dataset: &[Triplet]) -> Result<Vec<u8>> {
    let h = DatasetHeader::of(dataset)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&h.n_samples.to_le_bytes());
    for d in [h.video_dim, h.audio_dim, h.text_dim, h.k_neighbors] {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for t in dataset {
        buf.extend_from_slice(&t.id.to_le_bytes());
        put_f64s(&mut buf, &t.video_raw);
        put_f64s(&mut buf, &t.audio_raw);
        put_f64s(&mut buf, &t.text_raw);
        for n in &t.neighbor_texts {
            put_f64s(&mut buf, n);
        }
        buf.push(u8::from(t.text_aligned));
        buf.push(u8::from(t.audio_aligned));
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated dataset: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn vector(&mut self, n: usize) -> Result<DenseVector> {
        let raw = self.take(8 * n)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DenseVector::new(values).map_err(|e| Error::Format(e.to_string()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("invalid flag byte {b}"))),
        }
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<DatasetHeader> {
    let mut cur = Cursor { bytes, pos: 0 };
    read_header(&mut cur)
}

fn read_header(cur: &mut Cursor<'_>) -> Result<DatasetHeader> {
    if cur.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    Ok(DatasetHeader {
        n_samples: cur.u64()?,
        video_dim: cur.u32()?,
        audio_dim: cur.u32()?,
        text_dim: cur.u32()?,
        k_neighbors: cur.u32()?,
    })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Triplet>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let h = read_header(&mut cur)?;
    let (vd, ad, td) = (h.video_dim as usize, h.audio_dim as usize, h.text_dim as usize);
    let mut out = Vec::with_capacity(h.n_samples as usize);
    for _ in 0..h.n_samples {
        let id = cur.u64()?;
        let video_raw = cur.vector(vd)?;
        let audio_raw = cur.vector(ad)?;
        let text_raw = cur.vector(td)?;
        let neighbor_texts = (0..h.k_neighbors)
            .map(|_| cur.vector(td))
            .collect::<Result<Vec<_>>>()?;
        let text_aligned = cur.flag()?;
        let audio_aligned = cur.flag()?;
        out.push(Triplet {
            id,
            video_raw,
            audio_raw,
            text_raw,
            neighbor_texts,
            text_aligned,
            audio_aligned,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after dataset records",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, dataset: &[Triplet]) -> Result<()> {
    let bytes = encode_dataset(dataset)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Triplet>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// One row per triplet: id, flags, then every raw feature.
pub fn dataset_csv(dataset: &[Triplet]) -> Result<String> {
    let h = DatasetHeader::of(dataset)?;
    let mut cols = vec!["id".to_string(), "text_aligned".into(), "audio_aligned".into()];
    cols.extend((0..h.video_dim).map(|i| format!("v{i}")));
    cols.extend((0..h.audio_dim).map(|i| format!("a{i}")));
    cols.extend((0..h.text_dim).map(|i| format!("t{i}")));
    for p in 0..h.k_neighbors {
        cols.extend((0..h.text_dim).map(|i| format!("n{p}_t{i}")));
    }
    let mut out = cols.join(",");
    out.push('\n');
    for t in dataset {
        let mut row = vec![
            t.id.to_string(),
            u8::from(t.text_aligned).to_string(),
            u8::from(t.audio_aligned).to_string(),
        ];
        let feats = t
            .video_raw
            .iter()
            .chain(t.audio_raw.iter())
            .chain(t.text_raw.iter())
            .chain(t.neighbor_texts.iter().flat_map(|n| n.iter()));
        row.extend(feats.map(|x| format!("{x:e}")));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
