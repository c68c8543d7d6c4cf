//! Subcommand implementations behind the CLI. Each writes its outputs plus
//! `config.txt` (byte copy of the config used) and `manifest.json` into an
//! output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{self, RetrievalReport, SeparationReport};
use crate::harmonizer::{Action, Mode};
use crate::model::{self, init_params, ModelParams};
use crate::seed::rng_for;
use crate::synth::{self, Triplet};
use crate::trainer::{conflict_trace, StepRecord, TrainConfig, Trainer};

pub const DATASET_FILE: &str = "dataset.bin";
pub const DATASET_CSV_FILE: &str = "dataset.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STEP_LOG_FILE: &str = "steps.jsonl";
pub const CONFIG_COPY_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RETRIEVAL_FILE: &str = "retrieval.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const SEPARATION_FILE: &str = "separation.json";
pub const CONFLICTS_FILE: &str = "conflicts.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const PROBE_LOG_FILE: &str = "probe_steps.jsonl";

/// SHA-256 over `blob <len>\0<bytes>`, the object framing git uses.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize)]
struct FileEntry {
    role: String,
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: &'static str,
    version: &'static str,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

/// Output directory that remembers what was written to it.
struct OutDir {
    root: PathBuf,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileEntry {
            role: role.into(),
            path: path.display().to_string(),
            bytes: bytes.len(),
            sha256: content_hash(bytes),
        });
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(FileEntry {
            role: "output".into(),
            path: name.into(),
            bytes: bytes.len(),
            sha256: content_hash(bytes),
        });
        Ok(path)
    }

    fn finish(mut self, command: &'static str) -> Result<()> {
        let manifest = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load and parse the config, record it as an input and copy it verbatim.
fn open_config(path: &Path, out: &mut OutDir) -> Result<ExperimentConfig> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: "config is not valid UTF-8".into(),
    })?;
    let config = ExperimentConfig::parse(&text, &path.display().to_string())?;
    out.input("config", path, &bytes);
    out.write(CONFIG_COPY_FILE, &bytes)?;
    Ok(config)
}

fn open_dataset(path: &Path, config: &ExperimentConfig, out: &mut OutDir) -> Result<Vec<Triplet>> {
    let bytes = read(path)?;
    let data = synth::decode_dataset(&bytes)?;
    let header = synth::DatasetHeader::of(&data)?;
    let d = &config.dims;
    let found = [header.video_dim, header.audio_dim, header.text_dim].map(|x| x as usize);
    if found != [d.video_in, d.audio_in, d.text_in] {
        return Err(Error::Dimension(format!(
            "dataset feature dims {}/{}/{} do not match configured {}/{}/{}",
            header.video_dim, header.audio_dim, header.text_dim, d.video_in, d.audio_in, d.text_in
        )));
    }
    out.input("data", path, &bytes);
    Ok(data)
}

fn open_checkpoint(path: &Path, config: &ExperimentConfig, out: &mut OutDir) -> Result<ModelParams> {
    let bytes = read(path)?;
    let params = model::decode_checkpoint(&bytes)?;
    if params.dims() != config.dims {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match configured {:?}",
            params.dims(),
            config.dims
        )));
    }
    out.input("checkpoint", path, &bytes);
    Ok(params)
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("record serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub n_samples: usize,
    pub text_misaligned: f64,
    pub audio_misaligned: f64,
    pub path: PathBuf,
}

pub fn cmd_gen_data(config_path: &Path, out_dir: &Path, csv: bool) -> Result<GenSummary> {
    let mut out = OutDir::create(out_dir)?;
    let config = open_config(config_path, &mut out)?;
    let data = synth::generate(&config.synth)?;
    let path = out.write(DATASET_FILE, &synth::encode_dataset(&data)?)?;
    if csv {
        out.write(DATASET_CSV_FILE, synth::dataset_csv(&data)?.as_bytes())?;
    }
    out.finish("gen-data")?;
    let n = data.len() as f64;
    Ok(GenSummary {
        n_samples: data.len(),
        text_misaligned: data.iter().filter(|t| !t.text_aligned).count() as f64 / n,
        audio_misaligned: data.iter().filter(|t| !t.audio_aligned).count() as f64 / n,
        path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub updates: usize,
    pub drops: usize,
    pub final_loss_va: f64,
    pub final_loss_vt: f64,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(config_path: &Path, data_path: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let mut out = OutDir::create(out_dir)?;
    let config = open_config(config_path, &mut out)?;
    let data = open_dataset(data_path, &config, &mut out)?;
    let (train_set, _) = synth::split(&data, config.split_fractions(), config.split_seed())?;
    let params = init_params(config.init_seed(), &config.dims)?;
    let mut trainer = Trainer::new(params, &train_set, config.train.clone())?;

    let log_path = out_dir.join(STEP_LOG_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut log_bytes = Vec::new();
    let mut drops = 0;
    let mut last: Option<StepRecord> = None;
    for _ in 0..config.train.steps {
        let outcome = match trainer.step() {
            Ok(o) => o,
            Err(e) => {
                // Keep the records leading up to the failure.
                let _ = log.flush();
                return Err(e);
            }
        };
        let rec = outcome.record;
        if rec.action == Action::Drop {
            drops += 1;
        }
        let line = json_line(&rec);
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        log_bytes.extend_from_slice(line.as_bytes());
        let done = rec.step + 1;
        if done % config.train.log_every == 0 {
            log::info!(
                "step {done}: loss_va {:.4} loss_vt {:.4} cos {:.3} {:?}",
                rec.loss_va,
                rec.loss_vt,
                rec.cos_sim,
                rec.action
            );
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.train.steps {
            out.write(
                &format!("checkpoints/step_{done:06}.bin"),
                &model::encode_checkpoint(trainer.params()),
            )?;
        }
        last = Some(rec);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(log);
    out.outputs.push(FileEntry {
        role: "output".into(),
        path: STEP_LOG_FILE.into(),
        bytes: log_bytes.len(),
        sha256: content_hash(&log_bytes),
    });

    let updates = trainer.updates();
    let params = trainer.into_params();
    let checkpoint = out.write(CHECKPOINT_FILE, &model::encode_checkpoint(&params))?;
    out.finish("train")?;
    Ok(TrainSummary {
        steps: config.train.steps,
        updates,
        drops,
        final_loss_va: last.as_ref().map_or(f64::NAN, |r| r.loss_va),
        final_loss_vt: last.as_ref().map_or(f64::NAN, |r| r.loss_vt),
        checkpoint,
    })
}

pub fn cmd_eval(
    config_path: &Path,
    checkpoint: &Path,
    data_path: &Path,
    out_dir: &Path,
) -> Result<RetrievalReport> {
    let mut out = OutDir::create(out_dir)?;
    let config = open_config(config_path, &mut out)?;
    let params = open_checkpoint(checkpoint, &config, &mut out)?;
    let data = open_dataset(data_path, &config, &mut out)?;
    let (_, eval_set) = synth::split(&data, config.split_fractions(), config.split_seed())?;
    let report = eval::retrieval_eval(&params, &eval_set, &config.eval_ks, config.eval_direction)?;
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    out.write(RETRIEVAL_FILE, &json)?;
    if config.dump_embeddings {
        out.write(EMBEDDINGS_FILE, eval::embedding_csv(&params, &eval_set)?.as_bytes())?;
    }
    out.finish("eval")?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub separation: SeparationReport,
    pub probe_steps: usize,
    pub probe_size: usize,
    /// Fraction of probed triplets with negative cosine.
    pub negative_fraction: f64,
    pub extreme_fraction: f64,
    /// Highest-cosine ids first.
    pub top_ids: Vec<u64>,
    /// Lowest-cosine ids first.
    pub bottom_ids: Vec<u64>,
}

pub fn cmd_diagnose(
    config_path: &Path,
    checkpoint: &Path,
    data_path: &Path,
    out_dir: &Path,
) -> Result<DiagnoseReport> {
    let mut out = OutDir::create(out_dir)?;
    let config = open_config(config_path, &mut out)?;
    let params = open_checkpoint(checkpoint, &config, &mut out)?;
    let data = open_dataset(data_path, &config, &mut out)?;
    let (mut pool, _) = synth::split(&data, config.split_fractions(), config.split_seed())?;
    let p = &config.probe;
    if pool.len() < p.size + config.probe.batch_size {
        return Err(Error::Config(format!(
            "training split has {} triplets; probe_size {} plus a batch of {} needed",
            pool.len(),
            p.size,
            p.batch_size
        )));
    }
    pool.shuffle(&mut rng_for(config.probe_seed(), "probe-split"));
    let mut probe: Vec<Triplet> = pool.split_off(pool.len() - p.size);
    probe.sort_by_key(|t| t.id);

    // The probe optimization is plain joint training, whatever mode the
    // config selects for the main run.
    let mut probe_train = TrainConfig {
        batch_size: p.batch_size,
        ..config.train.clone()
    };
    probe_train.harmonizer.mode = Mode::Baseline;
    let trace = conflict_trace(params, &pool, &probe, &probe_train, p.steps)?;

    let flags: Vec<(f64, bool)> = trace
        .samples
        .iter()
        .map(|s| (s.cos, s.text_aligned && s.audio_aligned))
        .collect();
    let separation = eval::separation(&flags)?;
    let hist = if trace.records.is_empty() {
        let obs: Vec<(usize, f64)> = trace.samples.iter().map(|s| (0, s.cos)).collect();
        eval::histogram_observations(&obs, p.hist_step_bins, p.hist_cos_bins)?
    } else {
        eval::histogram(&trace.records, p.hist_step_bins, p.hist_cos_bins)?
    };
    let (top_ids, bottom_ids) = eval::extremes(&trace.samples, p.extreme_fraction);
    let report = DiagnoseReport {
        separation,
        probe_steps: p.steps,
        probe_size: trace.samples.len(),
        negative_fraction: trace.samples.iter().filter(|s| s.cos < 0.0).count() as f64
            / trace.samples.len() as f64,
        extreme_fraction: p.extreme_fraction,
        top_ids,
        bottom_ids,
    };

    out.write(CONFLICTS_FILE, eval::conflict_csv(&trace.samples).as_bytes())?;
    out.write(HISTOGRAM_FILE, hist.to_csv().as_bytes())?;
    let log: String = trace.records.iter().map(json_line).collect();
    out.write(PROBE_LOG_FILE, log.as_bytes())?;
    out.write(
        SEPARATION_FILE,
        &serde_json::to_vec_pretty(&report).expect("report serializes"),
    )?;
    out.finish("diagnose")?;
    Ok(report)
}
