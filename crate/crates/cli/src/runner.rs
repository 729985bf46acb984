//! Runs every repeat of an experiment and writes its output tree:
//!
//! ```text
//! <out>/config.toml
//! <out>/aggregate.json
//! <out>/seed-<s>/{metrics.csv, summary.json, checkpoint.json}
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use fedapt_core::evaluation::{accuracy, evaluate};
use fedapt_core::io::FORMAT_VERSION;
use fedapt_core::federation::Federation;
use fedapt_core::scenario::Scenario;
use fedapt_core::{Checkpoint, EvalOptions, EvalReport, Method, QPolicy};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Tool name and version, as written in every output header.
pub fn tool_version() -> String {
    format!("fedapt-cli {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub config_hash: String,
}

impl Header {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            tool: tool_version(),
            config_hash: cfg.plan_hash(),
        }
    }

    /// `# <tool> config=<hash>`
    pub fn comment_line(&self) -> String {
        format!("# {} config={}", self.tool, self.config_hash)
    }
}

pub const METRICS_COLUMNS: &str = "round,seed,mode,domain,accuracy,adaptive_net_acc,mean_local_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub build_seconds: f64,
    pub train_seconds: f64,
    /// Wall microseconds to score the whole test set along each inference
    /// path; the fast figure includes building the precomputed head.
    pub naive_us: Option<f64>,
    pub fast_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub header: Header,
    pub seed: u64,
    pub mode: Method,
    pub supervision: String,
    pub rounds_completed: usize,
    pub world_fingerprint: String,
    pub encoder_fingerprint: String,
    pub per_domain: Vec<f64>,
    pub average: f64,
    /// `(K + 1) x D`: meta-only row, then one row per forced key.
    pub per_key: Option<Vec<Vec<f64>>>,
    pub adaptive_accuracy: Option<f64>,
    pub unseen_domain_accuracy: f64,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub header: Header,
    pub mode: Method,
    pub supervision: String,
    pub world_fingerprint: String,
    pub seeds: Vec<u64>,
    pub per_domain: Vec<Stat>,
    pub average: Stat,
    pub unseen_domain_accuracy: Stat,
    pub per_key_mean: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub header: Header,
    pub format_version: u32,
    pub checkpoint: Checkpoint,
}

/// Everything one `run` produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub summaries: Vec<Summary>,
    pub aggregate: Aggregate,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn push_rows(csv: &mut String, round: usize, seed: u64, mode: Method, eval: &EvalReport, loss: Option<f64>) {
    let domains = eval.per_domain.iter().enumerate().map(|(d, &a)| (d.to_string(), a));
    for (domain, acc) in domains.chain(std::iter::once(("average".to_string(), eval.average))) {
        writeln!(
            csv,
            "{round},{seed},{mode},{domain},{acc},{},{}",
            opt(eval.adaptive_accuracy),
            opt(loss)
        )
        .expect("writing to a string");
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Runs one seed against an already built scenario and writes its directory.
fn run_seed(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64, build_seconds: f64) -> Result<Summary> {
    let header = Header::new(cfg);
    let mut fed_cfg = cfg.fed.clone();
    fed_cfg.seed = seed;
    let pair = &scenario.pair;
    let mut fed = Federation::new(
        pair,
        &scenario.clients,
        &scenario.test,
        scenario.num_domains(),
        &fed_cfg,
        &cfg.training,
    )
    .with_context(|| format!("seed {seed}: setting up the federation"))?;

    let mut csv = format!("{}\n{METRICS_COLUMNS}\n", header.comment_line());
    let initial = evaluate(fed.state(), pair, &scenario.test, &EvalOptions::default())
        .with_context(|| format!("seed {seed}: round 0 evaluation"))?;
    push_rows(&mut csv, 0, seed, fed_cfg.mode, &initial, None);

    let started = Instant::now();
    while !fed.is_done() {
        let round = fed.state().round + 1;
        let rec = fed.step_round().with_context(|| format!("seed {seed}, round {round}"))?;
        info!(
            "seed {seed} round {} loss {:.4} avg acc {:.4}",
            rec.round, rec.mean_local_loss, rec.eval.average
        );
        push_rows(&mut csv, rec.round, seed, fed_cfg.mode, &rec.eval, Some(rec.mean_local_loss));
    }
    let train_seconds = started.elapsed().as_secs_f64();
    let state = fed.into_state();

    let final_opts = EvalOptions {
        per_key: true,
        timing: true,
        q_policy: QPolicy::Soft,
    };
    let report = evaluate(&state, pair, &scenario.test, &final_opts).with_context(|| format!("seed {seed}: final evaluation"))?;
    let unseen = accuracy(&state, pair, &scenario.world.unseen_domain(0), QPolicy::Soft)
        .with_context(|| format!("seed {seed}: unseen-domain evaluation"))?;

    let summary = Summary {
        header: header.clone(),
        seed,
        mode: fed_cfg.mode,
        supervision: fed_cfg.supervision.name().to_string(),
        rounds_completed: state.round,
        world_fingerprint: scenario.world.fingerprint(),
        encoder_fingerprint: pair.fingerprint(),
        per_domain: report.per_domain.clone(),
        average: report.average,
        per_key: report.per_key.clone(),
        adaptive_accuracy: report.adaptive_accuracy,
        unseen_domain_accuracy: unseen,
        timings: Timings {
            build_seconds,
            train_seconds,
            naive_us: report.naive_us,
            fast_us: report.fast_us,
        },
    };

    let dir = seed_dir(&cfg.output_dir, seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("metrics.csv"), csv).with_context(|| format!("writing {}", dir.join("metrics.csv").display()))?;
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(
        &dir.join("checkpoint.json"),
        &CheckpointFile {
            header,
            format_version: FORMAT_VERSION,
            checkpoint: Checkpoint::from_state(&state, pair.fingerprint()),
        },
    )?;
    Ok(summary)
}

fn mean_matrix(mats: &[&Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = mats.len() as f64;
    let mut acc = vec![vec![0.0; mats[0][0].len()]; mats[0].len()];
    for m in mats {
        for (row, src) in acc.iter_mut().zip(m.iter()) {
            for (a, v) in row.iter_mut().zip(src) {
                *a += v / n;
            }
        }
    }
    acc
}

/// Mean and spread of the per-seed summaries.
pub fn aggregate(cfg: &ExperimentConfig, summaries: &[Summary]) -> Aggregate {
    let domains = summaries[0].per_domain.len();
    let per_domain = (0..domains)
        .map(|d| Stat::of(&summaries.iter().map(|s| s.per_domain[d]).collect::<Vec<_>>()))
        .collect();
    let per_key: Option<Vec<&Vec<Vec<f64>>>> = summaries.iter().map(|s| s.per_key.as_ref()).collect();
    Aggregate {
        header: Header::new(cfg),
        mode: cfg.fed.mode,
        supervision: cfg.fed.supervision.name().to_string(),
        world_fingerprint: summaries[0].world_fingerprint.clone(),
        seeds: summaries.iter().map(|s| s.seed).collect(),
        per_domain,
        average: Stat::of(&summaries.iter().map(|s| s.average).collect::<Vec<_>>()),
        unseen_domain_accuracy: Stat::of(&summaries.iter().map(|s| s.unseen_domain_accuracy).collect::<Vec<_>>()),
        per_key_mean: per_key.map(|m| mean_matrix(&m)),
    }
}

/// Runs all repeats of `cfg`.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let header = Header::new(cfg);
    let echo = format!("{}\n{}", header.comment_line(), cfg.to_toml());
    fs::write(out.join("config.toml"), &echo).with_context(|| format!("writing {}", out.join("config.toml").display()))?;
    info!("effective config:\n{echo}");

    let started = Instant::now();
    let scenario = Scenario::build(&cfg.world, &cfg.partition, &cfg.encoder).context("building the world and encoders")?;
    let build_seconds = started.elapsed().as_secs_f64();
    info!(
        "world {} with {} clients, {} test samples",
        &scenario.world.fingerprint()[..12],
        scenario.clients.len(),
        scenario.test.len()
    );

    let summaries = (0..cfg.repeats)
        .map(|r| run_seed(cfg, &scenario, cfg.seed_of(r), build_seconds))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(cfg, &summaries);
    write_json(&out.join("aggregate.json"), &aggregate)?;
    Ok(RunOutcome {
        output_dir: out.clone(),
        summaries,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Stat::of(&[0.4]).std, 0.0);
    }

    #[test]
    fn header_line_shape() {
        let h = Header::new(&ExperimentConfig::default());
        let line = h.comment_line();
        assert!(line.starts_with("# fedapt-cli "));
        assert!(line.ends_with(&format!("config={}", h.config_hash)));
        assert_eq!(h.config_hash.len(), 64);
    }

    #[test]
    fn matrix_mean() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert_eq!(mean_matrix(&[&a, &b]), vec![vec![0.5, 0.0], vec![0.5, 1.0]]);
    }
}
