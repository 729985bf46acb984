//! Local objectives and their analytic gradients.
//!
//! Every prompt-side loss reduces to a gradient with respect to the class
//! logits `cos(text_c, image) / tau`. [`TextGrad`] accumulates those into
//! per-class text-feature gradients, which are then pulled back through the
//! text encoder and the key modulation in one pass per class.

use crate::apt::{compose_local_backward, AdaptiveNet, Prompt, PromptMode};
use crate::encoders::{EncoderPair, TextTrace};
use crate::error::{invalid, Result};
use crate::numerics::{dot, log_softmax, softmax, Tensor};

use super::banks::Banks;
use super::{EncodedSample, LocalLearner, UnsupConfig};

/// Text features of every class under one composed prompt, with the traces
/// needed for the backward pass.
pub(crate) struct TextHead {
    traces: Vec<TextTrace>,
    temperature: f64,
}

impl TextHead {
    pub(crate) fn new(pair: &EncoderPair, composed: &Prompt) -> Result<Self> {
        let traces = (0..pair.num_classes())
            .map(|c| pair.text_forward(composed.row_for_class(c), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            traces,
            temperature: pair.temperature(),
        })
    }

    /// The learner's training-time head: `p_n + p_n * e'_k`, or `p_n` alone.
    pub(crate) fn for_learner(pair: &EncoderPair, learner: &LocalLearner) -> Result<Self> {
        Self::new(pair, &learner.composed_prompt()?)
    }

    pub(crate) fn logits(&self, feat: &[f64]) -> Vec<f64> {
        self.traces
            .iter()
            .map(|t| dot(t.feature(), feat) / self.temperature)
            .collect()
    }

    pub(crate) fn probs(&self, feat: &[f64]) -> Vec<f64> {
        softmax(&self.logits(feat), 1.0).expect("finite logits")
    }

    pub(crate) fn log_probs(&self, feat: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(feat), 1.0).expect("finite logits")
    }

    /// Gradient with respect to the composed prompt.
    fn backward(&self, pair: &EncoderPair, grad: &TextGrad, like: &Prompt) -> Tensor {
        let mut out = Tensor::zeros(like.values().shape());
        for (c, trace) in self.traces.iter().enumerate() {
            if grad.per_class[c].iter().all(|&g| g == 0.0) {
                continue;
            }
            let row = pair.text_backward(trace, &grad.per_class[c]);
            let dst = match like.mode() {
                PromptMode::ClassSpecific => out.block_mut(c),
                PromptMode::ClassShared => out.data_mut(),
            };
            for (d, r) in dst.iter_mut().zip(&row) {
                *d += r;
            }
        }
        out
    }
}

/// Accumulated `dL/d text_c`.
pub(crate) struct TextGrad {
    per_class: Vec<Vec<f64>>,
    temperature: f64,
}

impl TextGrad {
    pub(crate) fn new(num_classes: usize, feature_dim: usize, temperature: f64) -> Self {
        Self {
            per_class: vec![vec![0.0; feature_dim]; num_classes],
            temperature,
        }
    }

    /// Adds the contribution of `dL/dlogits` for one image feature.
    pub(crate) fn add(&mut self, grad_logits: &[f64], feat: &[f64], weight: f64) {
        for (acc, &g) in self.per_class.iter_mut().zip(grad_logits) {
            let s = weight * g / self.temperature;
            if s != 0.0 {
                for (a, &f) in acc.iter_mut().zip(feat) {
                    *a += s * f;
                }
            }
        }
    }
}

/// Pulls accumulated text gradients back to the learner's own prompt `p_n`.
pub(crate) fn prompt_gradient(pair: &EncoderPair, learner: &LocalLearner, head: &TextHead, grad: &TextGrad) -> Tensor {
    let composed = head.backward(pair, grad, &learner.prompt);
    match &learner.key {
        Some(key) => compose_local_backward(key, &composed),
        None => composed,
    }
}

/// `dL/dlogits` given `dL/dz` for `z = softmax(logits)`.
pub fn softmax_backward(z: &[f64], grad_z: &[f64]) -> Vec<f64> {
    let inner = dot(z, grad_z);
    z.iter().zip(grad_z).map(|(zi, gi)| zi * (gi - inner)).collect()
}

/// Mean cross-entropy of `labels` under the learner's composed prompt, and its
/// gradient with respect to `p_n`. Covers both labeled classification and
/// self-training on pseudo-labels.
pub fn prompt_cross_entropy(
    learner: &LocalLearner,
    pair: &EncoderPair,
    feats: &[&[f64]],
    labels: &[usize],
) -> Result<(f64, Tensor)> {
    if feats.is_empty() {
        return Err(invalid("empty batch"));
    }
    let c = pair.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(invalid(format!("label {bad} out of range 0..{c}")));
    }
    let head = TextHead::for_learner(pair, learner)?;
    let mut grad = TextGrad::new(c, pair.feature_dim(), pair.temperature());
    let weight = 1.0 / feats.len() as f64;
    let mut loss = 0.0;
    for (feat, &y) in feats.iter().zip(labels) {
        let logp = head.log_probs(feat);
        loss -= logp[y];
        let mut g: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        g[y] -= 1.0;
        grad.add(&g, feat, weight);
    }
    Ok((loss * weight, prompt_gradient(pair, learner, &head, &grad)))
}

/// Domain cross-entropy of the adaptive network, `-log softmax(phi^T z)_k`,
/// averaged over the batch, with its gradient with respect to `phi`.
pub fn adaptive_loss(net: &AdaptiveNet, feats: &[&[f64]], domain: usize) -> Result<(f64, Tensor)> {
    if feats.is_empty() {
        return Err(invalid("empty batch"));
    }
    let k = net.num_keys();
    if domain >= k {
        return Err(invalid(format!("domain {domain} out of range 0..{k}")));
    }
    let d = net.feature_dim();
    let mut grad = Tensor::zeros(&[d, k]);
    let weight = 1.0 / feats.len() as f64;
    let mut loss = 0.0;
    for feat in feats {
        let logp = log_softmax(&net.logits(feat)?, 1.0)?;
        loss -= logp[domain];
        let g = grad.data_mut();
        for (i, &fi) in feat.iter().enumerate() {
            for (j, lp) in logp.iter().enumerate() {
                let dj = lp.exp() - if j == domain { 1.0 } else { 0.0 };
                g[i * k + j] += weight * fi * dj;
            }
        }
    }
    Ok((loss * weight, grad))
}

/// Loss values and gradients of one supervised batch.
#[derive(Debug, Clone)]
pub struct SupervisedLoss {
    pub total: f64,
    pub class_loss: f64,
    pub domain_loss: f64,
    pub grad_prompt: Tensor,
    pub grad_adaptive: Option<Tensor>,
}

/// `L_c + L_q` on a labeled batch. The two terms share no parameters.
pub fn supervised_loss(learner: &LocalLearner, pair: &EncoderPair, batch: &[&EncodedSample]) -> Result<SupervisedLoss> {
    if learner.prompt.mode() != PromptMode::ClassSpecific {
        return Err(invalid("supervised training uses class-specific prompts"));
    }
    let feats: Vec<&[f64]> = batch.iter().map(|s| s.feature.as_slice()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.sample.label).collect();
    let (class_loss, grad_prompt) = prompt_cross_entropy(learner, pair, &feats, &labels)?;
    let (domain_loss, grad_adaptive) = match &learner.adaptive {
        Some(net) => {
            let (l, g) = adaptive_loss(net, &feats, learner.domain)?;
            (l, Some(g))
        }
        None => (0.0, None),
    };
    Ok(SupervisedLoss {
        total: class_loss + domain_loss,
        class_loss,
        domain_loss,
        grad_prompt,
        grad_adaptive,
    })
}

/// Attraction to the `num_neighbors` nearest bank entries and `lambda`-scaled
/// repulsion from all the others:
/// `-sum_{j in C_i} z_i^T z_j + lambda sum_{m in B_i} z_i^T z_m`.
/// Bank scores are constants, so the gradient is
/// `-sum_j z_j + lambda sum_m z_m`.
pub fn inter_sample_loss(banks: &Banks, idx: usize, z: &[f64], cfg: &UnsupConfig) -> Result<(f64, Vec<f64>)> {
    let m = banks.len();
    if idx >= m {
        return Err(invalid(format!("bank index {idx} out of range 0..{m}")));
    }
    if cfg.num_neighbors >= m {
        return Err(invalid(format!(
            "num_neighbors {} must be smaller than the bank size {m}",
            cfg.num_neighbors
        )));
    }
    if z.len() != banks.num_classes() {
        return Err(invalid("score vector length does not match the bank"));
    }
    let neighbors = banks.neighbors(idx, cfg.num_neighbors);
    let mut attract = vec![0.0; z.len()];
    for &j in &neighbors {
        for (a, s) in attract.iter_mut().zip(banks.score(j)) {
            *a += s;
        }
    }
    // Background sum = everything - self - neighbors.
    let mut background = vec![0.0; z.len()];
    for i in 0..m {
        for (b, s) in background.iter_mut().zip(banks.score(i)) {
            *b += s;
        }
    }
    for (b, (s, a)) in background.iter_mut().zip(banks.score(idx).iter().zip(&attract)) {
        *b -= s + a;
    }
    let grad: Vec<f64> = attract
        .iter()
        .zip(&background)
        .map(|(a, b)| -a + cfg.lambda * b)
        .collect();
    Ok((dot(z, &grad), grad))
}

/// `KL(z_hat || z)` with `0 log 0 = 0` and `z` floored at `1e-12`; `z` is a
/// constant read from the score bank.
pub fn intra_sample_loss(z_hat: &[f64], z_bank: &[f64]) -> Result<(f64, Vec<f64>)> {
    if z_hat.len() != z_bank.len() {
        return Err(invalid("distributions differ in length"));
    }
    if z_hat.iter().chain(z_bank).any(|&v| v < 0.0) {
        return Err(invalid("distributions must be nonnegative"));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z_hat.len());
    for (&p, &q) in z_hat.iter().zip(z_bank) {
        let lq = q.max(1e-12).ln();
        if p > 0.0 {
            loss += p * (p.ln() - lq);
        }
        grad.push(p.max(1e-300).ln() - lq + 1.0);
    }
    Ok((loss, grad))
}

/// Loss values and prompt gradient of one second-stage unsupervised batch.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub inter: f64,
    pub intra: f64,
    pub domain_loss: f64,
    pub grad_prompt: Tensor,
    pub grad_adaptive: Option<Tensor>,
}

impl ContrastiveLoss {
    pub fn total(&self) -> f64 {
        self.inter + self.intra + self.domain_loss
    }
}

/// `L_inter + L_intra (+ L_q)` for `batch` (indices into `data`), with
/// `augmented[b]` the image feature of the augmented view of `batch[b]`. The
/// banks must already hold the batch's fresh scores.
pub fn contrastive_loss(
    learner: &LocalLearner,
    pair: &EncoderPair,
    banks: &Banks,
    data: &[EncodedSample],
    batch: &[usize],
    augmented: &[Vec<f64>],
    cfg: &UnsupConfig,
) -> Result<ContrastiveLoss> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let head = TextHead::for_learner(pair, learner)?;
    let c = pair.num_classes();
    let mut grad = TextGrad::new(c, pair.feature_dim(), pair.temperature());
    let weight = 1.0 / batch.len() as f64;
    let (mut inter, mut intra) = (0.0, 0.0);
    for (&i, aug) in batch.iter().zip(augmented) {
        let feat = &data[i].feature;
        let z = head.probs(feat);
        let (l, gz) = inter_sample_loss(banks, i, &z, cfg)?;
        inter += l;
        grad.add(&softmax_backward(&z, &gz), feat, weight);

        let z_hat = head.probs(aug);
        let (l, gz) = intra_sample_loss(&z_hat, banks.score(i))?;
        intra += l;
        grad.add(&softmax_backward(&z_hat, &gz), aug, weight);
    }
    let grad_prompt = prompt_gradient(pair, learner, &head, &grad);
    let feats: Vec<&[f64]> = batch.iter().map(|&i| data[i].feature.as_slice()).collect();
    let (domain_loss, grad_adaptive) = match &learner.adaptive {
        Some(net) => {
            let (l, g) = adaptive_loss(net, &feats, learner.domain)?;
            (l, Some(g))
        }
        None => (0.0, None),
    };
    Ok(ContrastiveLoss {
        inter: inter * weight,
        intra: intra * weight,
        domain_loss,
        grad_prompt,
        grad_adaptive,
    })
}

/// Logits `W^T z` of the linear-probe baseline (`W` is `d_img x C`).
pub fn linear_head_logits(head: &Tensor, feat: &[f64]) -> Vec<f64> {
    let (d, c) = (head.shape()[0], head.shape()[1]);
    crate::numerics::matvec_t(head.data(), d, c, feat)
}

/// Mean cross-entropy of the linear probe and its gradient.
pub fn linear_head_loss(head: &Tensor, feats: &[&[f64]], labels: &[usize]) -> Result<(f64, Tensor)> {
    if feats.is_empty() {
        return Err(invalid("empty batch"));
    }
    let (d, c) = (head.shape()[0], head.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(invalid(format!("label {bad} out of range 0..{c}")));
    }
    let weight = 1.0 / feats.len() as f64;
    let mut grad = Tensor::zeros(&[d, c]);
    let mut loss = 0.0;
    for (feat, &y) in feats.iter().zip(labels) {
        let logp = log_softmax(&linear_head_logits(head, feat), 1.0)?;
        loss -= logp[y];
        let g = grad.data_mut();
        for (i, &fi) in feat.iter().enumerate() {
            for (j, lp) in logp.iter().enumerate() {
                let dj = lp.exp() - if j == y { 1.0 } else { 0.0 };
                g[i * c + j] += weight * fi * dj;
            }
        }
    }
    Ok((loss * weight, grad))
}
