use crate::error::{invalid, Result};
use crate::numerics::{dot, Tensor};

use super::losses::TextHead;
use super::{EncodedSample, LocalLearner};
use crate::encoders::EncoderPair;

/// Per-sample caches of the latest image feature and prediction scores.
/// Slot `i` belongs to sample `i` of the client's dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    features: Tensor,
    scores: Tensor,
}

impl Banks {
    /// Full forward pass over `data` with the learner's training-time head.
    pub fn build(learner: &LocalLearner, pair: &EncoderPair, data: &[EncodedSample]) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("cannot build banks over an empty dataset"));
        }
        let head = TextHead::for_learner(pair, learner)?;
        let (d, c) = (pair.feature_dim(), pair.num_classes());
        let mut features = Vec::with_capacity(data.len() * d);
        let mut scores = Vec::with_capacity(data.len() * c);
        for s in data {
            features.extend_from_slice(&s.feature);
            scores.extend(head.probs(&s.feature));
        }
        Ok(Self {
            features: Tensor::new(vec![data.len(), d], features)?,
            scores: Tensor::new(vec![data.len(), c], scores)?,
        })
    }

    /// Banks over explicit rows (`m x d_img` features, `m x C` scores).
    pub fn from_parts(features: Tensor, scores: Tensor) -> Result<Self> {
        if features.rank() != 2 || scores.rank() != 2 || features.shape()[0] != scores.shape()[0] {
            return Err(invalid("bank tensors must be m x d and m x C"));
        }
        Ok(Self { features, scores })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.block(i)
    }

    pub fn score(&self, i: usize) -> &[f64] {
        self.scores.block(i)
    }

    pub fn update(&mut self, i: usize, feature: &[f64], score: &[f64]) {
        self.features.block_mut(i).copy_from_slice(feature);
        self.scores.block_mut(i).copy_from_slice(score);
    }

    /// The `k` entries most cosine-similar to entry `idx`, excluding `idx`;
    /// ties go to the lower index.
    pub fn neighbors(&self, idx: usize, k: usize) -> Vec<usize> {
        let query = self.feature(idx);
        let mut sims: Vec<(f64, usize)> = (0..self.len())
            .filter(|&j| j != idx)
            .map(|j| (dot(query, self.feature(j)), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        sims.truncate(k);
        sims.into_iter().map(|(_, j)| j).collect()
    }
}
