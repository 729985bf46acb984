//! Side-by-side per-domain accuracy of finished runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::runner::{tool_version, Aggregate};

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub labels: Vec<String>,
    /// One row per domain, then the domain average: `(name, mean accuracy per run)`.
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Runs whose worlds differ cannot be compared.
#[derive(Debug, thiserror::Error)]
#[error("runs were made on different worlds: {first} has {first_fp}, {other} has {other_fp}")]
pub struct WorldMismatch {
    pub first: String,
    pub first_fp: String,
    pub other: String,
    pub other_fp: String,
}

pub fn load_aggregate(dir: &Path) -> Result<Aggregate> {
    let path = dir.join("aggregate.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn labels_for(dirs: &[PathBuf]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::with_capacity(dirs.len());
    for d in dirs {
        let base = d
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| d.display().to_string());
        let mut label = base.clone();
        let mut i = 2;
        while labels.contains(&label) {
            label = format!("{base}#{i}");
            i += 1;
        }
        labels.push(label);
    }
    labels
}

impl Comparison {
    pub fn from_aggregates(labels: Vec<String>, runs: &[Aggregate]) -> Result<Self> {
        if runs.len() < 2 {
            bail!("compare needs at least two runs, got {}", runs.len());
        }
        for (label, run) in labels.iter().zip(runs).skip(1) {
            if run.world_fingerprint != runs[0].world_fingerprint {
                return Err(WorldMismatch {
                    first: labels[0].clone(),
                    first_fp: runs[0].world_fingerprint.clone(),
                    other: label.clone(),
                    other_fp: run.world_fingerprint.clone(),
                }
                .into());
            }
        }
        let domains = runs[0].per_domain.len();
        let mut rows: Vec<(String, Vec<f64>)> = (0..domains)
            .map(|d| (d.to_string(), runs.iter().map(|r| r.per_domain[d].mean).collect()))
            .collect();
        rows.push(("average".into(), runs.iter().map(|r| r.average.mean).collect()));
        Ok(Self { labels, rows })
    }

    pub fn load(dirs: &[PathBuf]) -> Result<Self> {
        let runs = dirs.iter().map(|d| load_aggregate(d)).collect::<Result<Vec<_>>>()?;
        Self::from_aggregates(labels_for(dirs), &runs)
    }

    /// Accuracy of run `i` minus that of the first run, per row.
    pub fn deltas(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|(_, v)| v[i] - v[0]).collect()
    }

    fn delta_labels(&self) -> Vec<String> {
        self.labels[1..].iter().map(|l| format!("{l}-{}", self.labels[0])).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\ndomain", tool_version());
        for l in &self.labels {
            write!(out, ",{l}").unwrap();
        }
        for l in self.delta_labels() {
            write!(out, ",delta:{l}").unwrap();
        }
        out.push('\n');
        for (r, (name, vals)) in self.rows.iter().enumerate() {
            out.push_str(name);
            for v in vals {
                write!(out, ",{v}").unwrap();
            }
            for i in 1..self.labels.len() {
                write!(out, ",{}", self.deltas(i)[r]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["domain".to_string()];
        header.extend(self.labels.iter().cloned());
        header.extend(self.delta_labels().into_iter().map(|l| format!("Δ {l}")));
        let mut table = vec![header];
        for (r, (name, vals)) in self.rows.iter().enumerate() {
            let mut line = vec![name.clone()];
            line.extend(vals.iter().map(|v| format!("{:.2}", 100.0 * v)));
            line.extend((1..self.labels.len()).map(|i| format!("{:+.2}", 100.0 * self.deltas(i)[r])));
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// Writes `compare.csv` and `compare.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("compare.csv"), self.to_csv())?;
        fs::write(dir.join("compare.txt"), format!("# {}\n{}", tool_version(), self.to_text()))?;
        Ok(())
    }
}
