//! Adaptive prompt tuning: the meta prompt, the frozen domain keys, the
//! adaptive (domain-query) network, and the two composition rules.
//!
//! At test time the prompt is `p_g + p_g * sum_k q_k e'_k`, with `q` the
//! adaptive network's soft domain membership of the image. During local
//! training a client of domain `k` uses `p_n + p_n * e'_k` directly. `e'_k`
//! is `e_k` repeated over classes; for class-shared prompts the repeat is a
//! no-op.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{dot, matvec_t, softmax, Rng, Stream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// One prompt row per class, `C x s x d`.
    ClassSpecific,
    /// One row shared by all classes, `s x d`.
    ClassShared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    mode: PromptMode,
    values: Tensor,
}

impl Prompt {
    pub fn new(mode: PromptMode, values: Tensor) -> Result<Self> {
        let ok = match mode {
            PromptMode::ClassSpecific => values.rank() == 3,
            PromptMode::ClassShared => values.rank() == 2,
        };
        if !ok {
            return Err(invalid(format!(
                "{mode:?} prompt cannot have shape {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(invalid("prompt has non-finite entries"));
        }
        Ok(Self { mode, values })
    }

    pub fn zeros(mode: PromptMode, num_classes: usize, prompt_len: usize, embed_dim: usize) -> Self {
        let shape: Vec<usize> = match mode {
            PromptMode::ClassSpecific => vec![num_classes, prompt_len, embed_dim],
            PromptMode::ClassShared => vec![prompt_len, embed_dim],
        };
        Self {
            mode,
            values: Tensor::zeros(&shape),
        }
    }

    /// Gaussian initialization `N(0, std^2)`.
    pub fn random(
        mode: PromptMode,
        num_classes: usize,
        prompt_len: usize,
        embed_dim: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut p = Self::zeros(mode, num_classes, prompt_len, embed_dim);
        for v in p.values.data_mut() {
            *v = std * rng.normal();
        }
        p
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    /// Number of distinct rows: `C` for class-specific, 1 for class-shared.
    pub fn num_rows(&self) -> usize {
        match self.mode {
            PromptMode::ClassSpecific => self.values.shape()[0],
            PromptMode::ClassShared => 1,
        }
    }

    /// `s * d`.
    pub fn row_len(&self) -> usize {
        let shape = self.values.shape();
        shape[shape.len() - 2] * shape[shape.len() - 1]
    }

    /// `(s, d)`.
    pub fn row_shape(&self) -> (usize, usize) {
        let shape = self.values.shape();
        (shape[shape.len() - 2], shape[shape.len() - 1])
    }

    /// The prompt row fed to the text encoder for `class`.
    pub fn row_for_class(&self, class: usize) -> &[f64] {
        match self.mode {
            PromptMode::ClassSpecific => self.values.block(class),
            PromptMode::ClassShared => self.values.data(),
        }
    }

    fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.data().chunks_exact(self.row_len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyScheme {
    /// `U(0, 1)` entries.
    #[serde(rename = "rand_U")]
    RandU,
    /// `N(0, 1)` entries.
    #[serde(rename = "rand_N")]
    RandN,
    /// Bernoulli(0.5) entries in `{0, 1}`.
    #[serde(rename = "rand_01")]
    Rand01,
    /// Pairwise-orthogonal flattened keys.
    #[serde(rename = "rand_O")]
    RandO,
    /// All-zero keys; reduces the model to a plain shared prompt.
    #[serde(rename = "zeros")]
    Zeros,
}

impl KeyScheme {
    pub const ALL_RANDOM: [KeyScheme; 4] = [KeyScheme::RandU, KeyScheme::RandN, KeyScheme::Rand01, KeyScheme::RandO];

    pub fn name(self) -> &'static str {
        match self {
            KeyScheme::RandU => "rand_U",
            KeyScheme::RandN => "rand_N",
            KeyScheme::Rand01 => "rand_01",
            KeyScheme::RandO => "rand_O",
            KeyScheme::Zeros => "zeros",
        }
    }
}

impl std::str::FromStr for KeyScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            KeyScheme::RandU,
            KeyScheme::RandN,
            KeyScheme::Rand01,
            KeyScheme::RandO,
            KeyScheme::Zeros,
        ]
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown key scheme {s:?}"))
    }
}

/// The frozen domain keys `e_1..e_K`, each `s x d`. May be empty (no keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySet {
    keys: Vec<Tensor>,
    scheme: KeyScheme,
    seed: u64,
    prompt_len: usize,
    embed_dim: usize,
}

impl KeySet {
    /// A key set with `K = 0`.
    pub fn empty(prompt_len: usize, embed_dim: usize) -> Self {
        Self {
            keys: Vec::new(),
            scheme: KeyScheme::Zeros,
            seed: 0,
            prompt_len,
            embed_dim,
        }
    }

    /// Same dimensions and provenance, different keys.
    pub fn with_keys(&self, keys: Vec<Tensor>) -> Result<Self> {
        let shape = [self.prompt_len, self.embed_dim];
        if let Some(k) = keys.iter().find(|k| k.shape() != shape) {
            return Err(invalid(format!("key shape {:?}, expected {shape:?}", k.shape())));
        }
        Ok(Self { keys, ..self.clone() })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, k: usize) -> &Tensor {
        &self.keys[k]
    }

    pub fn keys(&self) -> &[Tensor] {
        &self.keys
    }

    pub fn scheme(&self) -> KeyScheme {
        self.scheme
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row_len(&self) -> usize {
        self.prompt_len * self.embed_dim
    }

    /// SHA-256 over every key entry.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.scheme.name().as_bytes());
        h.update((self.keys.len() as u64).to_le_bytes());
        for k in &self.keys {
            h.update(k.to_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Draws `K` frozen keys of shape `s x d` under `scheme`.
pub fn init_keys(num_keys: usize, prompt_len: usize, embed_dim: usize, scheme: KeyScheme, seed: u64) -> Result<KeySet> {
    if num_keys < 1 || prompt_len < 1 || embed_dim < 1 {
        return Err(invalid("init_keys needs K, s, d >= 1"));
    }
    let n = prompt_len * embed_dim;
    let mut rng = Rng::new(seed, Stream::Keys);
    let flat: Vec<Vec<f64>> = match scheme {
        KeyScheme::RandU => (0..num_keys).map(|_| (0..n).map(|_| rng.uniform()).collect()).collect(),
        KeyScheme::RandN => (0..num_keys).map(|_| rng.normal_vec(n, 1.0)).collect(),
        KeyScheme::Rand01 => (0..num_keys)
            .map(|_| (0..n).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect())
            .collect(),
        KeyScheme::RandO => {
            if num_keys > n {
                return Err(invalid(format!(
                    "rand_O needs K <= s*d, got K = {num_keys}, s*d = {n}"
                )));
            }
            orthogonal_rows(num_keys, n, &mut rng)?
        }
        KeyScheme::Zeros => vec![vec![0.0; n]; num_keys],
    };
    let keys = flat
        .into_iter()
        .map(|v| Tensor::new(vec![prompt_len, embed_dim], v))
        .collect::<Result<Vec<_>>>()?;
    Ok(KeySet {
        keys,
        scheme,
        seed,
        prompt_len,
        embed_dim,
    })
}

/// Gram-Schmidt (applied twice) on gaussian draws. Rows are scaled to norm
/// `sqrt(n)` so their entries have unit mean square like the `N(0, 1)` keys.
fn orthogonal_rows(k: usize, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = rng.normal_vec(n, 1.0);
        for _ in 0..2 {
            for r in &rows {
                let proj = dot(&v, r);
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi -= proj * ri;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        rows.push(v);
    }
    let scale = (n as f64).sqrt();
    Ok(rows
        .into_iter()
        .map(|r| r.into_iter().map(|x| x * scale).collect())
        .collect())
}

/// Repeats `key` (`s x d`) `C` times into `C x s x d`.
pub fn broadcast_key(key: &Tensor, num_classes: usize) -> Tensor {
    let mut data = Vec::with_capacity(key.len() * num_classes);
    for _ in 0..num_classes {
        data.extend_from_slice(key.data());
    }
    let mut shape = vec![num_classes];
    shape.extend_from_slice(key.shape());
    Tensor::new(shape, data).expect("broadcast of a valid key")
}

/// Linear domain-query network `q = softmax(phi^T feat / tau_q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveNet {
    /// `d_img x K`.
    weights: Tensor,
    temperature: f64,
}

impl AdaptiveNet {
    pub fn new(weights: Tensor, temperature: f64) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(invalid("adaptive net weights must be d_img x K"));
        }
        if !(temperature > 0.0) {
            return Err(invalid(format!("adaptive temperature {temperature} must be positive")));
        }
        Ok(Self {
            weights,
            temperature,
        })
    }

    pub fn zeros(feature_dim: usize, num_keys: usize, temperature: f64) -> Result<Self> {
        Self::new(Tensor::zeros(&[feature_dim, num_keys]), temperature)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        if !(temperature > 0.0) {
            return Err(invalid(format!("adaptive temperature {temperature} must be positive")));
        }
        self.temperature = temperature;
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_keys(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Raw `phi^T feat`.
    pub fn logits(&self, feat: &[f64]) -> Result<Vec<f64>> {
        if feat.len() != self.feature_dim() {
            return Err(invalid(format!(
                "adaptive net expects {}-dim features, got {}",
                self.feature_dim(),
                feat.len()
            )));
        }
        Ok(matvec_t(self.weights.data(), self.feature_dim(), self.num_keys(), feat))
    }
}

/// Soft domain membership of an image feature.
pub fn query_weights(net: &AdaptiveNet, image_feat: &[f64]) -> Result<Vec<f64>> {
    softmax(&net.logits(image_feat)?, net.temperature)
}

fn check_key_dims(prompt: &Prompt, key_len: usize) -> Result<()> {
    if prompt.row_len() != key_len {
        return Err(invalid(format!(
            "prompt rows have {} entries, keys have {key_len}",
            prompt.row_len()
        )));
    }
    Ok(())
}

fn modulate(prompt: &Prompt, key: &[f64]) -> Prompt {
    let mut data = Vec::with_capacity(prompt.values.len());
    for row in prompt.rows() {
        data.extend(row.iter().zip(key).map(|(&p, &e)| p + p * e));
    }
    Prompt {
        mode: prompt.mode,
        values: Tensor::new(prompt.values.shape().to_vec(), data).expect("composed prompt is finite"),
    }
}

/// `p_g + p_g * sum_k q_k e'_k`.
pub fn compose_global(meta: &Prompt, keys: &KeySet, q: &[f64]) -> Result<Prompt> {
    if q.len() != keys.len() {
        return Err(invalid(format!("{} query weights for {} keys", q.len(), keys.len())));
    }
    if keys.is_empty() {
        return Ok(meta.clone());
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("query weights sum to {total}, not 1")));
    }
    check_key_dims(meta, keys.row_len())?;
    let mut mix = vec![0.0; keys.row_len()];
    for (key, &w) in keys.keys.iter().zip(q) {
        for (m, &e) in mix.iter_mut().zip(key.data()) {
            *m += w * e;
        }
    }
    Ok(modulate(meta, &mix))
}

/// `p_n + p_n * e'_k`.
pub fn compose_local(prompt: &Prompt, key: &Tensor) -> Result<Prompt> {
    check_key_dims(prompt, key.len())?;
    Ok(modulate(prompt, key.data()))
}

/// Pulls a gradient with respect to the composed prompt back to `p_n`:
/// `(1 + e'_k) * upstream`.
pub fn compose_local_backward(key: &Tensor, upstream: &Tensor) -> Tensor {
    let n = key.len();
    let mut out = upstream.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (g, &e) in row.iter_mut().zip(key.data()) {
            *g *= 1.0 + e;
        }
    }
    out
}
