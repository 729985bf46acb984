//! Local client training: supervised prompt tuning, the two-stage
//! unsupervised pipeline, and the linear-probe baseline.

pub mod banks;
pub mod losses;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::apt::{compose_local, AdaptiveNet, Prompt, PromptMode};
use crate::encoders::{EncoderPair, FixedHead};
use crate::error::{invalid, Error, Result};
use crate::numerics::Rng;
use crate::numerics::{argmax, Tensor};
use crate::world::{augment, Sample};

pub use banks::Banks;
pub use losses::{
    adaptive_loss, contrastive_loss, inter_sample_loss, intra_sample_loss, linear_head_logits, linear_head_loss,
    prompt_cross_entropy, softmax_backward, supervised_loss, ContrastiveLoss, SupervisedLoss,
};

use losses::TextHead;

/// Optimizer settings shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 256,
            local_epochs: 1,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning_rate must be a positive number"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnsupConfig {
    pub confidence_threshold: f64,
    pub num_neighbors: usize,
    pub lambda: f64,
    /// Number of initial global rounds spent on pseudo-label self-training.
    pub stage1_rounds: usize,
    pub augment_strength: f64,
}

impl Default for UnsupConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.8,
            num_neighbors: 3,
            lambda: 1.0,
            stage1_rounds: 5,
            augment_strength: 0.1,
        }
    }
}

impl UnsupConfig {
    /// The threshold may exceed 1 to switch the first stage off entirely.
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.0) {
            return Err(invalid("confidence_threshold must be positive"));
        }
        if self.num_neighbors == 0 {
            return Err(invalid("num_neighbors must be positive"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid("lambda must be a nonnegative number"));
        }
        if !(self.augment_strength >= 0.0) || !self.augment_strength.is_finite() {
            return Err(invalid("augment_strength must be a nonnegative number"));
        }
        Ok(())
    }
}

/// A sample together with its frozen image feature.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub sample: Sample,
    pub feature: Vec<f64>,
}

pub fn encode_dataset(pair: &EncoderPair, samples: &[Sample]) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(EncodedSample {
                feature: pair.encode_image(s.x.data())?,
                sample: s.clone(),
            })
        })
        .collect()
}

/// Client-side trainable state. The key is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLearner {
    pub prompt: Prompt,
    pub adaptive: Option<AdaptiveNet>,
    key: Option<Tensor>,
    pub domain: usize,
    config: LearnerConfig,
}

impl LocalLearner {
    pub fn new(
        prompt: Prompt,
        adaptive: Option<AdaptiveNet>,
        key: Option<Tensor>,
        domain: usize,
        config: LearnerConfig,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(k) = &key {
            compose_local(&prompt, k)?;
        }
        if let Some(net) = &adaptive {
            if domain >= net.num_keys() {
                return Err(invalid(format!("domain {domain} has no slot in the adaptive net")));
            }
        }
        Ok(Self {
            prompt,
            adaptive,
            key,
            domain,
            config,
        })
    }

    pub fn key(&self) -> Option<&Tensor> {
        self.key.as_ref()
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    /// The prompt the client actually classifies with: `p_n + p_n * e'_k`,
    /// or `p_n` when no key is assigned.
    pub fn composed_prompt(&self) -> Result<Prompt> {
        match &self.key {
            Some(k) => compose_local(&self.prompt, k),
            None => Ok(self.prompt.clone()),
        }
    }

    fn sgd_step(&mut self, grad_prompt: &Tensor, grad_adaptive: Option<&Tensor>) -> Result<()> {
        let lr = self.config.learning_rate;
        self.prompt.values_mut().axpy(-lr, grad_prompt)?;
        if let (Some(net), Some(g)) = (self.adaptive.as_mut(), grad_adaptive) {
            net.weights_mut().axpy(-lr, g)?;
        }
        if !self.prompt.values().is_finite() {
            return Err(Error::NonFinite("prompt diverged".into()));
        }
        Ok(())
    }
}

/// What a client does with its data this round.
#[derive(Debug, Clone, Copy)]
pub enum LocalTask<'a> {
    Supervised,
    /// Self-training on confident pseudo-labels from the frozen initial model.
    PseudoLabel { zero_shot: &'a FixedHead, cfg: &'a UnsupConfig },
    /// Neighbor consistency against the feature and score banks.
    Contrastive { cfg: &'a UnsupConfig },
}

/// Loss trace of one call to a local training routine.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Set when no sample qualified and no update was made.
    pub skipped: bool,
}

impl LocalReport {
    /// Mean over epochs, or 0 when nothing was trained.
    pub fn mean_loss(&self) -> f64 {
        if self.epoch_losses.is_empty() {
            0.0
        } else {
            self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64
        }
    }
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Runs the learner's configured number of epochs of `task` over `data`.
pub fn local_train(
    learner: &mut LocalLearner,
    pair: &EncoderPair,
    data: &[EncodedSample],
    task: LocalTask<'_>,
    rng: &mut Rng,
) -> Result<LocalReport> {
    if data.is_empty() {
        return Err(Error::DegenerateInput("client has no training samples".into()));
    }
    let epochs = learner.config.local_epochs;
    if epochs == 0 {
        return Ok(LocalReport::default());
    }
    match task {
        LocalTask::Supervised => supervised_epochs(learner, pair, data, epochs, rng),
        LocalTask::PseudoLabel { zero_shot, cfg } => pseudo_label_stage(learner, pair, data, zero_shot, cfg, epochs, rng),
        LocalTask::Contrastive { cfg } => contrastive_epochs(learner, pair, data, cfg, epochs, rng),
    }
}

fn supervised_epochs(
    learner: &mut LocalLearner,
    pair: &EncoderPair,
    data: &[EncodedSample],
    epochs: usize,
    rng: &mut Rng,
) -> Result<LocalReport> {
    let mut report = LocalReport::default();
    for _ in 0..epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(data.len(), learner.config.batch_size, rng);
        for idx in &batches {
            let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &data[i]).collect();
            let loss = supervised_loss(learner, pair, &batch)?;
            learner.sgd_step(&loss.grad_prompt, loss.grad_adaptive.as_ref())?;
            total += loss.total;
            report.steps += 1;
        }
        report.epoch_losses.push(total / batches.len() as f64);
    }
    Ok(report)
}

/// Confident pseudo-labels `(index, label)` under the frozen model.
pub fn pseudo_labels(zero_shot: &FixedHead, data: &[EncodedSample], threshold: f64) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let p = zero_shot.probs(&s.feature)?;
        let y = argmax(&p);
        if p[y] >= threshold {
            out.push((i, y));
        }
    }
    Ok(out)
}

fn augmented_feature(pair: &EncoderPair, s: &Sample, rng: &mut Rng, strength: f64) -> Result<Vec<f64>> {
    pair.encode_image(augment(&s.x, rng, strength).data())
}

/// First unsupervised stage: `epochs` epochs of cross-entropy on augmented
/// views against labels the frozen model assigns with confidence at least
/// the configured threshold. The adaptive net trains on the original features.
pub fn pseudo_label_stage(
    learner: &mut LocalLearner,
    pair: &EncoderPair,
    data: &[EncodedSample],
    zero_shot: &FixedHead,
    cfg: &UnsupConfig,
    epochs: usize,
    rng: &mut Rng,
) -> Result<LocalReport> {
    if learner.prompt.mode() != PromptMode::ClassShared {
        return Err(invalid("unsupervised training uses a class-shared prompt"));
    }
    let labeled = pseudo_labels(zero_shot, data, cfg.confidence_threshold)?;
    if labeled.is_empty() {
        warn!(
            "no sample reaches confidence {}; skipping pseudo-label stage",
            cfg.confidence_threshold
        );
        return Ok(LocalReport {
            skipped: true,
            ..LocalReport::default()
        });
    }
    let mut report = LocalReport::default();
    for _ in 0..epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(labeled.len(), learner.config.batch_size, rng);
        for idx in &batches {
            let mut feats = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for &b in idx {
                let (i, y) = labeled[b];
                feats.push(augmented_feature(pair, &data[i].sample, rng, cfg.augment_strength)?);
                labels.push(y);
            }
            let views: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            let (mut loss, grad_prompt) = prompt_cross_entropy(learner, pair, &views, &labels)?;
            let grad_adaptive = match &learner.adaptive {
                Some(net) => {
                    let originals: Vec<&[f64]> = idx.iter().map(|&b| data[labeled[b].0].feature.as_slice()).collect();
                    let (l, g) = adaptive_loss(net, &originals, learner.domain)?;
                    loss += l;
                    Some(g)
                }
                None => None,
            };
            learner.sgd_step(&grad_prompt, grad_adaptive.as_ref())?;
            total += loss;
            report.steps += 1;
        }
        report.epoch_losses.push(total / batches.len() as f64);
    }
    Ok(report)
}

/// One second-stage step on `batch` (indices into `data`). The batch's fresh
/// features and scores are written into the banks first, so each touched row
/// holds the encoding the losses were computed against.
pub fn unsupervised_stage2_step(
    learner: &mut LocalLearner,
    pair: &EncoderPair,
    banks: &mut Banks,
    data: &[EncodedSample],
    batch: &[usize],
    cfg: &UnsupConfig,
    rng: &mut Rng,
) -> Result<ContrastiveLoss> {
    if learner.prompt.mode() != PromptMode::ClassShared {
        return Err(invalid("unsupervised training uses a class-shared prompt"));
    }
    if banks.len() != data.len() {
        return Err(invalid("banks do not cover the dataset"));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(invalid(format!("batch index {bad} out of range")));
    }
    let head = TextHead::for_learner(pair, learner)?;
    for &i in batch {
        let z = head.probs(&data[i].feature);
        banks.update(i, &data[i].feature, &z);
    }
    let augmented = batch
        .iter()
        .map(|&i| augmented_feature(pair, &data[i].sample, rng, cfg.augment_strength))
        .collect::<Result<Vec<_>>>()?;
    let loss = contrastive_loss(learner, pair, banks, data, batch, &augmented, cfg)?;
    learner.sgd_step(&loss.grad_prompt, loss.grad_adaptive.as_ref())?;
    Ok(loss)
}

fn contrastive_epochs(
    learner: &mut LocalLearner,
    pair: &EncoderPair,
    data: &[EncodedSample],
    cfg: &UnsupConfig,
    epochs: usize,
    rng: &mut Rng,
) -> Result<LocalReport> {
    if cfg.num_neighbors >= data.len() {
        return Err(invalid(format!(
            "num_neighbors {} needs more than {} client samples",
            cfg.num_neighbors,
            data.len()
        )));
    }
    let mut banks = Banks::build(learner, pair, data)?;
    let mut report = LocalReport::default();
    for _ in 0..epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(data.len(), learner.config.batch_size, rng);
        for idx in &batches {
            total += unsupervised_stage2_step(learner, pair, &mut banks, data, idx, cfg, rng)?.total();
            report.steps += 1;
        }
        report.epoch_losses.push(total / batches.len() as f64);
    }
    Ok(report)
}

/// Linear probe `d_img x C` on frozen image features.
pub fn train_linear_head(
    head: &mut Tensor,
    data: &[EncodedSample],
    cfg: &LearnerConfig,
    rng: &mut Rng,
) -> Result<LocalReport> {
    if data.is_empty() {
        return Err(Error::DegenerateInput("client has no training samples".into()));
    }
    let mut report = LocalReport::default();
    for _ in 0..cfg.local_epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(data.len(), cfg.batch_size, rng);
        for idx in &batches {
            let feats: Vec<&[f64]> = idx.iter().map(|&i| data[i].feature.as_slice()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].sample.label).collect();
            let (loss, grad) = linear_head_loss(head, &feats, &labels)?;
            head.axpy(-cfg.learning_rate, &grad)?;
            total += loss;
            report.steps += 1;
        }
        report.epoch_losses.push(total / batches.len() as f64);
    }
    Ok(report)
}


#[cfg(test)]
mod tests;
