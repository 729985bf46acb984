//! Global-model inference and accuracy reports.
//!
//! The naive path composes a prompt per sample and runs the text encoder for
//! every class. The fast path precomputes text features once per key and
//! routes each sample to the key its adaptive weights favor.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apt::{compose_global, compose_local, query_weights, KeySet, Prompt};
use crate::encoders::{clip_probs, EncoderPair};
use crate::error::{invalid, Error, Result};
use crate::federation::FedState;
use crate::numerics::{argmax, softmax};
use crate::training::{linear_head_logits, EncodedSample};
use crate::world::Sample;

/// How the adaptive weights are used at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QPolicy {
    /// Mix keys by `softmax(phi^T z / tau_q)`.
    #[default]
    Soft,
    /// One-hot at the argmax key.
    Hard,
}

/// Text features of every class under `prompt`.
pub fn prompt_text_features(pair: &EncoderPair, prompt: &Prompt) -> Result<Vec<Vec<f64>>> {
    (0..pair.num_classes())
        .map(|c| pair.encode_text(prompt.row_for_class(c), c))
        .collect()
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut q = vec![0.0; n];
    q[k] = 1.0;
    q
}

fn probs_from_feature(state: &FedState, pair: &EncoderPair, feat: &[f64], policy: QPolicy) -> Result<Vec<f64>> {
    if let Some(head) = &state.linear_head {
        return softmax(&linear_head_logits(head, feat), 1.0);
    }
    let composed = match &state.adaptive {
        Some(net) if !state.keys.is_empty() => {
            let mut q = query_weights(net, feat)?;
            if policy == QPolicy::Hard {
                q = one_hot(argmax(&q), q.len());
            }
            compose_global(&state.meta, &state.keys, &q)?
        }
        _ => state.meta.clone(),
    };
    clip_probs(&prompt_text_features(pair, &composed)?, feat, pair.temperature())
}

/// Reference inference: encode, weigh the keys, compose, and run the text
/// encoder for every class.
pub fn predict_naive(state: &FedState, pair: &EncoderPair, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    predict_naive_with(state, pair, x, QPolicy::Soft)
}

pub fn predict_naive_with(state: &FedState, pair: &EncoderPair, x: &[f64], policy: QPolicy) -> Result<(usize, Vec<f64>)> {
    let p = probs_from_feature(state, pair, &pair.encode_image(x)?, policy)?;
    Ok((argmax(&p), p))
}

/// SHA-256 over the meta prompt and the key set.
pub fn source_fingerprint(meta: &Prompt, keys: &KeySet) -> String {
    let mut h = Sha256::new();
    h.update(meta.values().to_bytes());
    h.update(keys.fingerprint().as_bytes());
    hex::encode(h.finalize())
}

/// Text features precomputed for the meta prompt and for each key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedHead {
    per_key: Vec<Vec<Vec<f64>>>,
    base: Vec<Vec<f64>>,
    fingerprint: String,
    encoder_calls: usize,
}

impl PrecomputedHead {
    pub fn per_key(&self) -> &[Vec<Vec<f64>>] {
        &self.per_key
    }

    pub fn base(&self) -> &[Vec<f64>] {
        &self.base
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Text-encoder invocations spent building the head.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls
    }

    /// Features for row `r` of the per-key decomposition: 0 is meta-only,
    /// `k + 1` is key `k`.
    pub fn row(&self, r: usize) -> &[Vec<f64>] {
        if r == 0 {
            &self.base
        } else {
            &self.per_key[r - 1]
        }
    }

    fn check(&self, state: &FedState) -> Result<()> {
        let current = source_fingerprint(&state.meta, &state.keys);
        if current != self.fingerprint {
            return Err(Error::StaleHead {
                built: self.fingerprint.clone(),
                current,
            });
        }
        Ok(())
    }
}

pub fn build_precomputed(state: &FedState, pair: &EncoderPair) -> Result<PrecomputedHead> {
    let base = prompt_text_features(pair, &state.meta)?;
    let mut calls = base.len();
    let mut per_key = Vec::with_capacity(state.keys.len());
    for key in state.keys.keys() {
        let feats = prompt_text_features(pair, &compose_local(&state.meta, key)?)?;
        calls += feats.len();
        per_key.push(feats);
    }
    Ok(PrecomputedHead {
        per_key,
        base,
        fingerprint: source_fingerprint(&state.meta, &state.keys),
        encoder_calls: calls,
    })
}

fn fast_from_feature(head: &PrecomputedHead, state: &FedState, pair: &EncoderPair, feat: &[f64]) -> Result<Vec<f64>> {
    if let Some(lin) = &state.linear_head {
        return softmax(&linear_head_logits(lin, feat), 1.0);
    }
    let texts = match &state.adaptive {
        Some(net) if !state.keys.is_empty() => &head.per_key[argmax(&query_weights(net, feat)?)],
        _ => &head.base,
    };
    clip_probs(texts, feat, pair.temperature())
}

/// Inference through the precomputed head with hardened weights. Equals
/// [`predict_naive_with`] under [`QPolicy::Hard`].
pub fn predict_fast(head: &PrecomputedHead, state: &FedState, pair: &EncoderPair, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    head.check(state)?;
    let p = fast_from_feature(head, state, pair, &pair.encode_image(x)?)?;
    Ok((argmax(&p), p))
}

/// Batched [`predict_fast`]; the fingerprint is checked once.
pub fn predict_fast_batch(
    head: &PrecomputedHead,
    state: &FedState,
    pair: &EncoderPair,
    xs: &[&[f64]],
) -> Result<Vec<(usize, Vec<f64>)>> {
    head.check(state)?;
    xs.iter()
        .map(|x| {
            let p = fast_from_feature(head, state, pair, &pair.encode_image(x)?)?;
            Ok((argmax(&p), p))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Fill the per-key decomposition matrix.
    pub per_key: bool,
    /// Time the naive and fast paths over the test set.
    pub timing: bool,
    pub q_policy: QPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy of every domain, indexed by domain.
    pub per_domain: Vec<f64>,
    /// Unweighted mean of `per_domain`.
    pub average: f64,
    /// `(K + 1) x D`: meta-only row, then one row per forced key.
    pub per_key: Option<Vec<Vec<f64>>>,
    /// Fraction of samples whose argmax weight names their own domain.
    pub adaptive_accuracy: Option<f64>,
    pub naive_us: Option<f64>,
    pub fast_us: Option<f64>,
    pub q_policy: QPolicy,
}

fn domain_accuracy(correct: &[usize], totals: &[usize]) -> Vec<f64> {
    correct
        .iter()
        .zip(totals)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Accuracy report over a labeled, domain-tagged test set.
pub fn evaluate(state: &FedState, pair: &EncoderPair, test: &[EncodedSample], opts: &EvalOptions) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(invalid("empty test set"));
    }
    let num_domains = test.iter().map(|s| s.sample.domain).max().unwrap_or(0) + 1;
    let mut totals = vec![0usize; num_domains];
    for s in test {
        totals[s.sample.domain] += 1;
    }

    let head = build_precomputed(state, pair)?;
    let soft_mixing = state.linear_head.is_none() && state.adaptive.is_some() && !state.keys.is_empty();
    let mut correct = vec![0usize; num_domains];
    for s in test {
        let p = if soft_mixing && opts.q_policy == QPolicy::Soft {
            probs_from_feature(state, pair, &s.feature, QPolicy::Soft)?
        } else {
            fast_from_feature(&head, state, pair, &s.feature)?
        };
        if argmax(&p) == s.sample.label {
            correct[s.sample.domain] += 1;
        }
    }
    let per_domain = domain_accuracy(&correct, &totals);
    let average = mean(&per_domain);

    let per_key = if opts.per_key && state.linear_head.is_none() {
        let mut rows = Vec::with_capacity(head.per_key.len() + 1);
        for r in 0..=head.per_key.len() {
            let texts = head.row(r);
            let mut hits = vec![0usize; num_domains];
            for s in test {
                if argmax(&clip_probs(texts, &s.feature, pair.temperature())?) == s.sample.label {
                    hits[s.sample.domain] += 1;
                }
            }
            rows.push(domain_accuracy(&hits, &totals));
        }
        Some(rows)
    } else {
        None
    };

    let adaptive_accuracy = match &state.adaptive {
        Some(net) => {
            let mut hits = 0usize;
            for s in test {
                if argmax(&net.logits(&s.feature)?) == s.sample.domain {
                    hits += 1;
                }
            }
            Some(hits as f64 / test.len() as f64)
        }
        None => None,
    };

    let (naive_us, fast_us) = if opts.timing {
        let xs: Vec<&[f64]> = test.iter().map(|s| s.sample.x.data()).collect();
        let (naive, fast) = time_paths(state, pair, &xs)?;
        (Some(naive), Some(fast))
    } else {
        (None, None)
    };

    Ok(EvalReport {
        per_domain,
        average,
        per_key,
        adaptive_accuracy,
        naive_us,
        fast_us,
        q_policy: opts.q_policy,
    })
}

/// Wall time in microseconds of the naive (hardened) and fast paths over
/// `xs`. The fast figure includes building the head.
pub fn time_paths(state: &FedState, pair: &EncoderPair, xs: &[&[f64]]) -> Result<(f64, f64)> {
    let t0 = Instant::now();
    for x in xs {
        std::hint::black_box(predict_naive_with(state, pair, x, QPolicy::Hard)?);
    }
    let naive = t0.elapsed().as_secs_f64() * 1e6;
    let t1 = Instant::now();
    let head = build_precomputed(state, pair)?;
    std::hint::black_box(predict_fast_batch(&head, state, pair, xs)?);
    let fast = t1.elapsed().as_secs_f64() * 1e6;
    Ok((naive, fast))
}

/// Plain accuracy on samples from any domain, such as a held-out one.
pub fn accuracy(state: &FedState, pair: &EncoderPair, samples: &[Sample], policy: QPolicy) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples to score"));
    }
    let mut hits = 0usize;
    for s in samples {
        if predict_naive_with(state, pair, s.x.data(), policy)?.0 == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Average accuracy for each inference temperature of the adaptive net.
pub fn tau_sweep(state: &FedState, pair: &EncoderPair, test: &[EncodedSample], taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut probe = state.clone();
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        if let Some(net) = probe.adaptive.as_mut() {
            net.set_temperature(tau)?;
        }
        let report = evaluate(&probe, pair, test, &EvalOptions::default())?;
        out.push((tau, report.average));
    }
    Ok(out)
}
