//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use gradharm::eval::{rank_metrics, retrieval_eval, separation, Direction};
use gradharm::harmonizer::{
    combine, gamma_at, realign, Action, GammaSchedule, Granularity, HarmonizerConfig, Mode,
};
use gradharm::linalg::{cosine_similarity, dot, norm, FlatGradient};
use gradharm::model::{init_params, LossConfig, ModelDims};
use gradharm::synth::{generate, split, SynthConfig, Triplet};
use gradharm::trainer::{conflict_trace, train, StepRecord, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Training profile for the directional experiments (4-6). The default
// noise level and temperature make the synthetic task too easy: retrieval
// saturates within a few hundred steps and leaves nothing to compare.
const NOISE_STD: f64 = 1.0;
const TAU: f64 = 0.2;
const LR: f64 = 3e-3;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn loss() -> LossConfig {
    LossConfig {
        tau: TAU,
        symmetric: false,
    }
}

fn noisy_data(n: usize, p_mis_text: f64, seed: u64) -> Vec<Triplet> {
    generate(&SynthConfig {
        n_samples: n,
        p_mis_text,
        noise_std: NOISE_STD,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn gradient_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut n = 0;
    for tau in [0.07, 1.0] {
        for seed in 0..20 {
            let inst = common::grad_instance(1000 + seed, tau);
            worst = worst.max(common::batch_gradient_error(&inst));
            n += 1;
        }
    }
    outcome(worst < 1e-6, format!("{n} instances, max rel err {worst:.2e} (< 1e-6)"))
}

/// Gaussian vector with a random overall scale in [1e-3, 1e3).
fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn fg(v: Vec<f64>) -> FlatGradient {
    FlatGradient::unstructured(v).unwrap()
}

fn projection_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut conflicting, mut identity, mut failures) = (0, 0, Vec::new());
    for i in 0..1000 {
        let dim = 10f64.powf(rng.gen_range(0.0..=4.0)).round() as usize;
        let a = gaussian(&mut rng, dim);
        let mut b = gaussian(&mut rng, dim);
        match i % 4 {
            0 if dot(&a, &b).unwrap() >= 0.0 => b.iter_mut().for_each(|x| *x = -*x),
            1 if dot(&a, &b).unwrap() < 0.0 => b.iter_mut().for_each(|x| *x = -*x),
            3 => {
                // Nearly anti-parallel: the projections almost vanish.
                let s = -rng.gen_range(0.1..10.0);
                b = a.iter().map(|x| s * x * (1.0 + 1e-3 * rng.gen_range(-1.0..1.0))).collect();
            }
            _ => {}
        }
        let d = dot(&a, &b).unwrap();
        let (ha, hb) = realign(&fg(a.clone()), &fg(b.clone())).unwrap();
        let (na, nb) = (norm(&a), norm(&b));
        if ha.norm() > na || hb.norm() > nb {
            failures.push(format!("pair {i}: norm increased"));
        }
        if d < 0.0 {
            conflicting += 1;
            let ea = dot(&ha, &b).unwrap().abs();
            let eb = dot(&hb, &a).unwrap().abs();
            if ea > 1e-9 * ha.norm() * nb || eb > 1e-9 * hb.norm() * na {
                failures.push(format!("pair {i}: dim {dim} residual {ea:.2e}/{eb:.2e} norms {:.2e}/{:.2e} in {na:.2e}/{nb:.2e}", ha.norm(), hb.norm()));
            }
        } else {
            identity += 1;
            if ha.values() != &a[..] || hb.values() != &b[..] {
                failures.push(format!("pair {i}: not identity at dot {d:.3e}"));
            }
        }
    }
    let mut antiparallel = 0;
    for _ in 0..100 {
        let dim = 10f64.powf(rng.gen_range(0.0..=4.0)).round() as usize;
        let a = gaussian(&mut rng, dim);
        let b: Vec<f64> = a.iter().map(|x| -x).collect();
        let (ha, hb) = realign(&fg(a), &fg(b)).unwrap();
        if ha.iter().chain(hb.iter()).all(|&x| x == 0.0) {
            antiparallel += 1;
        } else {
            failures.push("anti-parallel pair not mapped to zero".into());
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "1000 pairs ({conflicting} conflicting, {identity} identity), {antiparallel}/100 anti-parallel exact zeros{}",
            first_failures(&failures)
        ),
    )
}

fn first_failures(f: &[String]) -> String {
    if f.is_empty() {
        String::new()
    } else {
        format!("; {} failures: {}", f.len(), f.join(" | "))
    }
}

/// Two unit-ish vectors whose computed cosine is exactly `target`.
fn pair_with_exact_cos(target: f64) -> (FlatGradient, FlatGradient) {
    let a = vec![1.0, 0.0];
    let s = (1.0 - target * target).sqrt();
    let mut x = target;
    for k in 0..2000 {
        // Walk outward from `target` one ulp at a time, alternating sides.
        let b = vec![x, s];
        if cosine_similarity(&a, &b).unwrap().value == target {
            return (fg(a), fg(b));
        }
        let steps = (k / 2 + 1) as i64 * if k % 2 == 0 { 1 } else { -1 };
        x = f64::from_bits((target.to_bits() as i64 + steps) as u64);
    }
    panic!("no pair found with cosine {target}");
}

fn dispatch() -> Outcome {
    let schedule = HarmonizerConfig::default().schedule;
    let total = schedule.total_steps;
    let endpoints = (gamma_at(&schedule, 0), gamma_at(&schedule, total));
    let midpoint = gamma_at(&schedule, total / 2);
    let mut failures = Vec::new();
    if endpoints != (-0.3, 0.0) {
        failures.push(format!("endpoints {endpoints:?}"));
    }
    if midpoint != -0.15 {
        failures.push(format!("midpoint {midpoint}"));
    }
    let config = HarmonizerConfig {
        mode: Mode::Both,
        schedule,
        ..HarmonizerConfig::default()
    };
    let eps = 1e-6;
    let mut cases = 0;
    for step in [0, total / 2, total] {
        let gamma = gamma_at(&schedule, step);
        for cos in [gamma - eps, gamma, gamma + eps, -eps, 0.0, eps] {
            let (a, b) = pair_with_exact_cos(cos);
            let d = combine(&a, &b, &config, step).unwrap();
            let expected = if cos <= gamma {
                Action::Drop
            } else if cos < 0.0 {
                Action::Project
            } else {
                Action::Plain
            };
            let grad_ok = match expected {
                Action::Drop => d.combined_grad.is_none(),
                Action::Project => {
                    let (ha, hb) = realign(&a, &b).unwrap();
                    let want = ha.linear_combination(1.0, &hb, 1.0).unwrap();
                    d.combined_grad.as_ref() == Some(&want)
                }
                Action::Plain => {
                    d.combined_grad.as_ref() == Some(&a.linear_combination(1.0, &b, 1.0).unwrap())
                }
            };
            if d.action != expected || d.cos_sim != cos || !grad_ok {
                failures.push(format!("γ={gamma} cos={cos}: got {:?}", d.action));
            }
            cases += 1;
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{cases} cases; γ endpoints {endpoints:?}, midpoint {midpoint}{}",
            first_failures(&failures)
        ),
    )
}

fn separation_experiment() -> Outcome {
    let mut all = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let data = noisy_data(2000, 0.5, seed);
        let (train_part, probe) = data.split_at(1600);
        let params = init_params(seed, &ModelDims::default()).unwrap();
        let cfg = TrainConfig {
            steps: 300,
            warmup_steps: 30,
            learning_rate: LR,
            loss: loss(),
            seed,
            ..TrainConfig::default()
        };
        let trace = conflict_trace(params, train_part, probe, &cfg, 300).unwrap();
        let obs: Vec<(f64, bool)> = trace.samples.iter().map(|c| (c.cos, c.text_aligned)).collect();
        let s = separation(&obs).unwrap();
        all &= s.auc > 0.6 && s.mean_cos_aligned > s.mean_cos_misaligned;
        parts.push(format!(
            "seed {seed} auc {:.3} mean cos {:.4} vs {:.4}",
            s.auc, s.mean_cos_aligned, s.mean_cos_misaligned
        ));
    }
    outcome(all, parts.join("; "))
}

fn negative_fraction(records: &[StepRecord]) -> f64 {
    records.iter().filter(|r| r.cos_sim < 0.0).count() as f64 / records.len() as f64
}

/// Fraction of the first 100 microbatch steps with `cos(g_va, g_vt) < 0`.
fn early_negative_fraction(p_mis_text: f64, seed: u64) -> f64 {
    let data = noisy_data(2000, p_mis_text, seed);
    let params = init_params(seed, &ModelDims::default()).unwrap();
    let cfg = TrainConfig {
        steps: 100,
        warmup_steps: 30,
        learning_rate: LR,
        loss: loss(),
        seed,
        ..TrainConfig::default()
    };
    let (_, records) = train(params, &data, &cfg).unwrap();
    negative_fraction(&records)
}

fn prevalence() -> Outcome {
    let mut all = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let noisy = early_negative_fraction(0.5, seed);
        let clean = early_negative_fraction(0.05, seed);
        all &= (0.3..=0.7).contains(&noisy) && noisy > clean;
        parts.push(format!("seed {seed} {noisy:.2} vs {clean:.2}"));
    }
    outcome(all, format!("negative fraction p_mis 0.5 vs 0.05: {}", parts.join(", ")))
}

struct RunSummary {
    median_rank: f64,
    recall_10: f64,
}

fn end_to_end() -> Outcome {
    const STEPS: usize = 1000;
    let variants: [(&str, Mode, f64); 4] = [
        ("baseline", Mode::Baseline, -0.3),
        ("both", Mode::Both, -0.3),
        ("curriculum(-0.3,0)", Mode::Curriculum, -0.3),
        ("curriculum(0,0)", Mode::Curriculum, 0.0),
    ];
    let mut mean: BTreeMap<&str, RunSummary> = BTreeMap::new();
    let mut min_pool = usize::MAX;
    for seed in SEEDS {
        let data = noisy_data(20_000, 0.5, seed);
        let (train_part, eval_part) = split(&data, (0.95, 0.05), seed).unwrap();
        min_pool = min_pool.min(eval_part.len());
        let params = init_params(seed, &ModelDims::default()).unwrap();
        for (name, mode, gamma_start) in variants {
            let cfg = TrainConfig {
                steps: STEPS,
                warmup_steps: 100,
                learning_rate: LR,
                loss: loss(),
                seed,
                harmonizer: HarmonizerConfig {
                    mode,
                    schedule: GammaSchedule::new(gamma_start, 0.0, STEPS).unwrap(),
                    granularity: Granularity::PerSample,
                    ..HarmonizerConfig::default()
                },
                ..TrainConfig::default()
            };
            let (trained, _) = train(params.clone(), &train_part, &cfg).unwrap();
            let r = retrieval_eval(&trained, &eval_part, &[10], Direction::VideoToText).unwrap();
            let m = mean.entry(name).or_insert(RunSummary {
                median_rank: 0.0,
                recall_10: 0.0,
            });
            m.median_rank += r.median_rank / SEEDS.len() as f64;
            m.recall_10 += r.recall_at_k[&10] / SEEDS.len() as f64;
        }
    }
    let (base, both) = (&mean["baseline"], &mean["both"]);
    let (cl_best, cl_worst) = (&mean["curriculum(-0.3,0)"], &mean["curriculum(0,0)"]);
    let pass = min_pool >= 200
        && both.median_rank <= base.median_rank
        && both.recall_10 >= base.recall_10
        && cl_best.median_rank < cl_worst.median_rank;
    let table: Vec<String> = variants
        .iter()
        .map(|(name, ..)| format!("{name} mr {:.2} R@10 {:.3}", mean[name].median_rank, mean[name].recall_10))
        .collect();
    outcome(pass, format!("eval pool ≥ {min_pool}; {}", table.join(", ")))
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_gradharm"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "gradharm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Names of files that differ between two output directories, or that
/// exist in only one of them.
fn differing(a: &Path, b: &Path) -> (usize, Vec<String>) {
    let (fa, fb) = (files_under(a), files_under(b));
    let mut diff: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    diff.dedup();
    (fa.len(), diff)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = root.join("exp.cfg");
    std::fs::write(
        &config,
        "seed = 11\nn_samples = 400\nnoise_std = 0.5\np_mis_text = 0.5\nsteps = 40\nbatch_size = 16\n\
         mode = both\ngranularity = per_sample\ncheckpoint_every = 15\ndump_embeddings = true\n\
         probe_steps = 10\nprobe_size = 80\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let dir = |name: &str| root.join(name).to_str().unwrap().to_string();
    let mut compared = 0;
    let mut diffs = Vec::new();
    for run in ["a", "b"] {
        run_cli(&["gen-data", "--config", cfg, "--out", &dir(&format!("data_{run}")), "--csv"]);
    }
    let data = root.join("data_a").join("dataset.bin");
    let data = data.to_str().unwrap();
    for run in ["a", "b"] {
        run_cli(&["train", "--config", cfg, "--data", data, "--out", &dir(&format!("train_{run}"))]);
    }
    let ckpt = root.join("train_a").join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();
    for cmd in ["eval", "diagnose"] {
        for run in ["a", "b"] {
            let out = dir(&format!("{cmd}_{run}"));
            run_cli(&[cmd, "--config", cfg, "--checkpoint", ckpt, "--data", data, "--out", &out]);
        }
    }
    for stage in ["data", "train", "eval", "diagnose"] {
        let (n, d) = differing(&root.join(format!("{stage}_a")), &root.join(format!("{stage}_b")));
        compared += n;
        diffs.extend(d.into_iter().map(|f| format!("{stage}/{f}")));
    }
    outcome(
        diffs.is_empty() && compared > 0,
        format!(
            "gen-data/train/eval/diagnose rerun, {compared} files compared{}",
            first_failures(&diffs)
        ),
    )
}

/// Stable full sort of each row; the true match's position is its rank.
fn brute_ranks(sim: &[Vec<f64>]) -> Vec<usize> {
    sim.iter()
        .enumerate()
        .map(|(q, row)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap());
            1 + order.iter().position(|&c| c == q).unwrap()
        })
        .collect()
}

fn brute_auc(obs: &[(f64, bool)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for &(a, _) in obs.iter().filter(|o| o.1) {
        for &(m, _) in obs.iter().filter(|o| !o.1) {
            pairs += 1.0;
            if a > m {
                wins += 1.0;
            } else if a == m {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ks = [1, 5, 10, 50];
    let mut failures = Vec::new();
    let mut instances = 0;
    for &n in &[1usize, 2, 3, 10, 57, 200, 1000] {
        for coarse in [false, true] {
            // Coarse scores produce many ties.
            let score = |rng: &mut ChaCha8Rng| {
                let x: f64 = rng.gen_range(-1.0..1.0);
                if coarse {
                    (x * 4.0).round() / 4.0
                } else {
                    x
                }
            };
            let sim: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| score(&mut rng)).collect()).collect();
            let report = rank_metrics(&sim, &ks, Direction::VideoToText).unwrap();
            let mut ranks = brute_ranks(&sim);
            ranks.sort();
            let med = if n % 2 == 1 {
                ranks[n / 2] as f64
            } else {
                (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
            };
            if report.median_rank != med {
                failures.push(format!("n={n}: median {} vs {med}", report.median_rank));
            }
            for k in ks {
                let r = ranks.iter().filter(|&&x| x <= k).count() as f64 / n as f64;
                if report.recall_at_k[&k] != r {
                    failures.push(format!("n={n}: R@{k}"));
                }
            }
            if n >= 2 {
                let mut obs: Vec<(f64, bool)> = (0..n).map(|_| (score(&mut rng), rng.gen_bool(0.4))).collect();
                obs[0].1 = true;
                obs[1].1 = false;
                let auc = separation(&obs).unwrap().auc;
                let want = brute_auc(&obs);
                if auc != want {
                    failures.push(format!("n={n}: auc {auc} vs {want}"));
                }
            }
            instances += 1;
        }
    }
    outcome(
        failures.is_empty(),
        format!("{instances} instances up to 1000 points, exact agreement{}", first_failures(&failures)),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let checks: [(&str, Check, Option<Duration>); 8] = [
        ("gradient oracle", gradient_oracle, Some(Duration::from_secs(60))),
        ("projection invariants", projection_invariants, None),
        ("dispatch", dispatch, None),
        ("indicator separation", separation_experiment, Some(Duration::from_secs(300))),
        ("conflict prevalence", prevalence, None),
        ("end-to-end ordering", end_to_end, Some(Duration::from_secs(900))),
        ("determinism", determinism, None),
        ("metric oracles", metric_oracles, None),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check, limit)) in checks.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.iter().any(|o| o == &id.to_string() || name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let in_time = limit.map_or(true, |l| elapsed < l);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = limit.map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
        println!(
            "{} {id} {name}: {} [{:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
