//! Synthetic multi-domain labeled data.
//!
//! Every class owns a frozen prototype and every domain a frozen affine
//! "style" `x -> A_k x + b_k`; a sample is the styled prototype plus gaussian
//! noise. Domains therefore differ the way image styles do: the class
//! structure is shared, the appearance is not.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{matvec, Rng, Stream, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_domain: usize,
    pub domain_shift_strength: f64,
    /// Fraction of training labels replaced by a uniformly drawn other class.
    pub label_noise: f64,
    /// Standard deviation of the per-sample gaussian noise around a prototype.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_domains: 3,
            num_classes: 10,
            input_dim: 32,
            samples_per_domain: 500,
            domain_shift_strength: 1.5,
            label_noise: 0.0,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 1 {
            return Err(invalid("world needs at least one domain"));
        }
        if self.num_classes < 2 {
            return Err(invalid("world needs at least two classes"));
        }
        if self.input_dim < 1 {
            return Err(invalid("input_dim must be positive"));
        }
        if self.samples_per_domain < self.num_classes {
            return Err(invalid(format!(
                "samples_per_domain {} < num_classes {}: cannot stratify",
                self.samples_per_domain, self.num_classes
            )));
        }
        if !(self.domain_shift_strength >= 0.0) {
            return Err(invalid("domain_shift_strength must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(invalid("label_noise must lie in [0, 1)"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(invalid("noise_std must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Tensor,
    pub label: usize,
    pub domain: usize,
}

/// Per-domain affine style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Row-major `d_in x d_in`.
    pub matrix: Tensor,
    pub offset: Tensor,
}

impl DomainStyle {
    fn draw(cfg: &WorldConfig, domain: usize) -> Self {
        let d = cfg.input_dim;
        let mut rng = Rng::new(cfg.seed, Stream::DomainStyle(domain as u64));
        let shift = cfg.domain_shift_strength;
        let mix = shift / (d as f64).sqrt();
        let mut a = rng.normal_vec(d * d, 1.0);
        for (i, v) in a.iter_mut().enumerate() {
            *v *= mix;
            if i / d == i % d {
                *v += 1.0;
            }
        }
        let b: Vec<f64> = rng.normal_vec(d, 1.0).into_iter().map(|v| v * shift).collect();
        Self {
            matrix: Tensor::new(vec![d, d], a).expect("finite style"),
            offset: Tensor::from_vec(b),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.offset.len();
        let mut y = matvec(self.matrix.data(), d, d, v);
        for (yi, bi) in y.iter_mut().zip(self.offset.data()) {
            *yi += bi;
        }
        y
    }
}

/// A generated world: the frozen generative parameters plus the 80/20 split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    /// `C x d_in` class prototypes.
    pub prototypes: Tensor,
    pub styles: Vec<DomainStyle>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl World {
    pub fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Training samples grouped by domain index.
    pub fn train_by_domain(&self) -> Vec<Vec<Sample>> {
        group_by_domain(&self.train, self.num_domains())
    }

    /// Test samples of a domain that no training domain shares, drawn with a
    /// fresh style (domain index `num_domains + offset`).
    pub fn unseen_domain(&self, offset: usize) -> Vec<Sample> {
        let domain = self.num_domains() + offset;
        let (_, test) = domain_samples(&self.config, &self.prototypes, domain);
        test
    }

    /// SHA-256 over the config and every generated tensor.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.prototypes.to_bytes());
        for s in self.train.iter().chain(&self.test) {
            h.update(s.x.to_bytes());
            h.update((s.label as u64).to_le_bytes());
            h.update((s.domain as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn group_by_domain(samples: &[Sample], num_domains: usize) -> Vec<Vec<Sample>> {
    let mut out = vec![Vec::new(); num_domains];
    for s in samples {
        if s.domain < num_domains {
            out[s.domain].push(s.clone());
        }
    }
    out
}

/// Number of test samples taken from a `(domain, class)` group of size `n`.
fn test_count(n: usize) -> usize {
    ((n as f64 * 0.2).round() as usize).clamp(1, n)
}

fn domain_samples(cfg: &WorldConfig, prototypes: &Tensor, domain: usize) -> (Vec<Sample>, Vec<Sample>) {
    let c = cfg.num_classes;
    let style = DomainStyle::draw(cfg, domain);
    let mut rng = Rng::new(cfg.seed, Stream::DomainSamples(domain as u64));
    let mut per_class_seen = vec![0usize; c];
    let per_class_total: Vec<usize> = (0..c)
        .map(|k| cfg.samples_per_domain / c + usize::from(k < cfg.samples_per_domain % c))
        .collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for j in 0..cfg.samples_per_domain {
        let label = j % c;
        let proto = prototypes.block(label);
        let clean: Vec<f64> = proto
            .iter()
            .map(|p| p + cfg.noise_std * rng.normal())
            .collect();
        let x = Tensor::from_vec(style.apply(&clean));
        let slot = per_class_seen[label];
        per_class_seen[label] += 1;
        // Label noise draws happen for every sample so the stream layout does
        // not depend on the split.
        let flip = rng.bernoulli(cfg.label_noise);
        let other = (label + 1 + rng.index(c - 1)) % c;
        if slot < test_count(per_class_total[label]) {
            test.push(Sample { x, label, domain });
        } else {
            let label = if flip { other } else { label };
            train.push(Sample { x, label, domain });
        }
    }
    (train, test)
}

/// Generates the world. Deterministic in `cfg.seed`.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed, Stream::World);
    let prototypes = Tensor::new(
        vec![cfg.num_classes, cfg.input_dim],
        rng.normal_vec(cfg.num_classes * cfg.input_dim, 1.0),
    )?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut styles = Vec::with_capacity(cfg.num_domains);
    for k in 0..cfg.num_domains {
        styles.push(DomainStyle::draw(cfg, k));
        let (tr, te) = domain_samples(cfg, &prototypes, k);
        train.extend(tr);
        test.extend(te);
    }
    Ok(World {
        config: cfg.clone(),
        prototypes,
        styles,
        train,
        test,
    })
}

/// Dirichlet concentration, or an equal split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Beta {
    Dirichlet(f64),
    Iid(IidMarker),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IidMarker {
    Iid,
}

impl Beta {
    pub const IID: Beta = Beta::Iid(IidMarker::Iid);
}

impl std::str::FromStr for Beta {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("iid") {
            return Ok(Beta::IID);
        }
        s.parse::<f64>()
            .map(Beta::Dirichlet)
            .map_err(|_| format!("beta must be a positive number or \"iid\", got {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients_per_domain: usize,
    pub beta: Beta,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients_per_domain: 1,
            beta: Beta::IID,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_domain < 1 {
            return Err(invalid("clients_per_domain must be at least 1"));
        }
        if let Beta::Dirichlet(b) = self.beta {
            if !(b > 0.0) || !b.is_finite() {
                return Err(invalid(format!("beta {b} must be positive")));
            }
        }
        Ok(())
    }
}

/// Splits `total` by `proportions` with largest-remainder rounding; ties go
/// to the lower index.
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits each domain's samples across `clients_per_domain` clients. Client
/// `k * N + i` is the `i`-th client of domain `k`.
pub fn dirichlet_partition(per_domain: &[Vec<Sample>], cfg: &PartitionConfig) -> Result<Vec<Vec<Sample>>> {
    cfg.validate()?;
    let n = cfg.clients_per_domain;
    let mut rng = Rng::new(cfg.seed, Stream::Partition);
    let mut clients = Vec::with_capacity(per_domain.len() * n);
    for (k, samples) in per_domain.iter().enumerate() {
        if samples.is_empty() {
            return Err(invalid(format!("domain {k} has no samples")));
        }
        let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
        let mut local = vec![Vec::new(); n];
        for c in 0..num_classes {
            let mut members: Vec<&Sample> = samples.iter().filter(|s| s.label == c).collect();
            if members.is_empty() {
                continue;
            }
            rng.shuffle(&mut members);
            let proportions = match cfg.beta {
                Beta::Iid(_) => vec![1.0 / n as f64; n],
                Beta::Dirichlet(beta) => rng.dirichlet(beta, n),
            };
            let counts = largest_remainder(members.len(), &proportions);
            let mut it = members.into_iter();
            for (client, &count) in local.iter_mut().zip(&counts) {
                client.extend(it.by_ref().take(count).cloned());
            }
        }
        clients.extend(local);
    }
    Ok(clients)
}

/// Feature-space augmentation `s * x + eps`, `s ~ U(1 - a, 1 + a)`,
/// `eps ~ N(0, a^2 I)`.
pub fn augment(x: &Tensor, rng: &mut Rng, strength: f64) -> Tensor {
    if strength == 0.0 {
        return x.clone();
    }
    let s = rng.uniform_range(1.0 - strength, 1.0 + strength);
    let data = x.data().iter().map(|&v| s * v + strength * rng.normal()).collect();
    Tensor::new(x.shape().to_vec(), data).expect("augmented tensor keeps its shape")
}
