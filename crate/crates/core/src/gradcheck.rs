//! Randomized comparison of every analytic gradient against central finite
//! differences.

use serde::{Deserialize, Serialize};

use crate::apt::{init_keys, AdaptiveNet, KeyScheme, Prompt, PromptMode};
use crate::encoders::{EncoderConfig, EncoderPair, FixedHead};
use crate::error::Result;
use crate::numerics::{finite_diff_grad, max_rel_err, softmax, Rng, Stream, Tensor, FD_STEP};
use crate::training::{
    adaptive_loss, contrastive_loss, encode_dataset, inter_sample_loss, intra_sample_loss, linear_head_loss,
    prompt_cross_entropy, Banks, EncodedSample, LearnerConfig, LocalLearner, UnsupConfig,
};
use crate::world::{augment, Sample};

/// Dimensions of one randomized instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckDims {
    pub embed_dim: usize,
    pub prompt_len: usize,
    pub num_classes: usize,
    pub num_keys: usize,
    pub batch: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            prompt_len: 2,
            num_classes: 3,
            num_keys: 2,
            batch: 4,
        }
    }
}

/// Worst relative error seen for one objective and parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub objective: String,
    pub parameter: String,
    pub trials: usize,
    pub max_rel_err: f64,
}

struct Instance {
    pair: EncoderPair,
    data: Vec<EncodedSample>,
    augmented: Vec<Vec<f64>>,
    specific: LocalLearner,
    shared: LocalLearner,
    net: AdaptiveNet,
    rng: Rng,
}

const INPUT_DIM: usize = 6;
const FEATURE_DIM: usize = 8;

fn instance(dims: &GradCheckDims, trial: u64) -> Result<Instance> {
    let cfg = EncoderConfig {
        embed_dim: dims.embed_dim,
        prompt_len: dims.prompt_len,
        feature_dim: FEATURE_DIM,
        num_classes: dims.num_classes,
        input_dim: INPUT_DIM,
        hidden_dim: 12,
        seed: trial,
        alignment: 0.0,
        ..EncoderConfig::default()
    };
    let pair = EncoderPair::random(&cfg)?;
    let mut rng = Rng::new(trial, Stream::Aux(77));
    let n = dims.batch.max(dims.num_classes + 2);
    let samples: Vec<Sample> = (0..n)
        .map(|i| Sample {
            x: Tensor::from_vec(rng.normal_vec(INPUT_DIM, 1.0)),
            label: i % dims.num_classes,
            domain: i % dims.num_keys,
        })
        .collect();
    let data = encode_dataset(&pair, &samples)?;
    let augmented = samples
        .iter()
        .map(|s| pair.encode_image(augment(&s.x, &mut rng, 0.3).data()))
        .collect::<Result<Vec<_>>>()?;
    let keys = init_keys(dims.num_keys, dims.prompt_len, dims.embed_dim, KeyScheme::RandN, trial)?;
    let key = keys.key(trial as usize % dims.num_keys).clone();
    let domain = trial as usize % dims.num_keys;
    let net = AdaptiveNet::new(
        Tensor::new(vec![FEATURE_DIM, dims.num_keys], rng.normal_vec(FEATURE_DIM * dims.num_keys, 1.0))?,
        1.0,
    )?;
    let (c, s, d) = (dims.num_classes, dims.prompt_len, dims.embed_dim);
    let specific = LocalLearner::new(
        Prompt::random(PromptMode::ClassSpecific, c, s, d, 0.5, &mut rng),
        Some(net.clone()),
        Some(key.clone()),
        domain,
        LearnerConfig::default(),
    )?;
    let shared = LocalLearner::new(
        Prompt::random(PromptMode::ClassShared, c, s, d, 0.5, &mut rng),
        Some(net.clone()),
        Some(key),
        domain,
        LearnerConfig::default(),
    )?;
    Ok(Instance {
        pair,
        data,
        augmented,
        specific,
        shared,
        net,
        rng,
    })
}

fn with_prompt(learner: &LocalLearner, values: &Tensor) -> LocalLearner {
    let mut l = learner.clone();
    *l.prompt.values_mut() = values.clone();
    l
}

fn random_distribution(rng: &mut Rng, n: usize) -> Vec<f64> {
    softmax(&rng.normal_vec(n, 1.0), 1.0).expect("finite draw")
}

/// Runs `trials` randomized instances of every check.
pub fn run_suite(dims: &GradCheckDims, trials: usize) -> Result<Vec<GradCheck>> {
    let names = [
        ("supervised cross-entropy", "prompt"),
        ("pseudo-label cross-entropy", "prompt"),
        ("neighbor consistency", "scores"),
        ("augmentation consistency", "scores"),
        ("neighbor + augmentation consistency", "prompt"),
        ("domain cross-entropy", "adaptive net"),
        ("linear probe cross-entropy", "head"),
    ];
    let mut worst = [0.0f64; 7];
    for trial in 0..trials as u64 {
        let mut inst = instance(dims, trial)?;
        let errs = check_instance(dims, &mut inst)?;
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&(objective, parameter), max_rel_err)| GradCheck {
            objective: objective.to_string(),
            parameter: parameter.to_string(),
            trials,
            max_rel_err,
        })
        .collect())
}

fn check_instance(dims: &GradCheckDims, inst: &mut Instance) -> Result<[f64; 7]> {
    let pair = &inst.pair;
    let batch = &inst.data[..dims.batch];
    let feats: Vec<&[f64]> = batch.iter().map(|s| s.feature.as_slice()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.sample.label).collect();

    let (_, g) = prompt_cross_entropy(&inst.specific, pair, &feats, &labels)?;
    let fd = finite_diff_grad(
        |p| Ok(prompt_cross_entropy(&with_prompt(&inst.specific, p), pair, &feats, &labels)?.0),
        inst.specific.prompt.values(),
        FD_STEP,
    )?;
    let e_sup = max_rel_err(g.data(), fd.data());

    let zero_shot = FixedHead::zero_shot(pair)?;
    let pseudo: Vec<usize> = batch
        .iter()
        .map(|s| zero_shot.predict(&s.feature))
        .collect::<Result<_>>()?;
    let views: Vec<&[f64]> = inst.augmented[..dims.batch].iter().map(Vec::as_slice).collect();
    let (_, g) = prompt_cross_entropy(&inst.shared, pair, &views, &pseudo)?;
    let fd = finite_diff_grad(
        |p| Ok(prompt_cross_entropy(&with_prompt(&inst.shared, p), pair, &views, &pseudo)?.0),
        inst.shared.prompt.values(),
        FD_STEP,
    )?;
    let e_pseudo = max_rel_err(g.data(), fd.data());

    let cfg = UnsupConfig {
        num_neighbors: 2,
        lambda: 0.7,
        ..UnsupConfig::default()
    };
    let mut banks = Banks::build(&inst.shared, pair, &inst.data)?;
    // Perturb the model so bank scores differ from the fresh ones.
    let moved = inst.shared.prompt.values().map(|v| v * 1.3 + 0.05);
    let learner = with_prompt(&inst.shared, &moved);
    let c = dims.num_classes;
    let z = random_distribution(&mut inst.rng, c);
    let (_, g) = inter_sample_loss(&banks, 1, &z, &cfg)?;
    let fd = finite_diff_grad(
        |t| Ok(inter_sample_loss(&banks, 1, t.data(), &cfg)?.0),
        &Tensor::from_vec(z),
        FD_STEP,
    )?;
    let e_inter = max_rel_err(&g, fd.data());

    let z_hat = random_distribution(&mut inst.rng, c);
    let z_bank = random_distribution(&mut inst.rng, c);
    let (_, g) = intra_sample_loss(&z_hat, &z_bank)?;
    let fd = finite_diff_grad(
        |t| Ok(intra_sample_loss(t.data(), &z_bank)?.0),
        &Tensor::from_vec(z_hat),
        FD_STEP,
    )?;
    let e_intra = max_rel_err(&g, fd.data());

    let idx: Vec<usize> = (0..dims.batch).collect();
    let aug = &inst.augmented[..dims.batch];
    for &i in &idx {
        let row: Vec<f64> = inst.data[i].feature.clone();
        let score = random_distribution(&mut inst.rng, c);
        banks.update(i, &row, &score);
    }
    let loss_of = |l: &LocalLearner| -> Result<f64> {
        let r = contrastive_loss(l, pair, &banks, &inst.data, &idx, aug, &cfg)?;
        Ok(r.inter + r.intra)
    };
    let g = contrastive_loss(&learner, pair, &banks, &inst.data, &idx, aug, &cfg)?.grad_prompt;
    let fd = finite_diff_grad(|p| loss_of(&with_prompt(&learner, p)), learner.prompt.values(), FD_STEP)?;
    let e_contrastive = max_rel_err(g.data(), fd.data());

    let domain = inst.specific.domain;
    let (_, g) = adaptive_loss(&inst.net, &feats, domain)?;
    let fd = finite_diff_grad(
        |w| Ok(adaptive_loss(&AdaptiveNet::new(w.clone(), 1.0)?, &feats, domain)?.0),
        inst.net.weights(),
        FD_STEP,
    )?;
    let e_domain = max_rel_err(g.data(), fd.data());

    let head = Tensor::new(vec![FEATURE_DIM, c], inst.rng.normal_vec(FEATURE_DIM * c, 2.0))?;
    let (_, g) = linear_head_loss(&head, &feats, &labels)?;
    let fd = finite_diff_grad(|w| Ok(linear_head_loss(w, &feats, &labels)?.0), &head, FD_STEP)?;
    let e_linear = max_rel_err(g.data(), fd.data());

    Ok([e_sup, e_pseudo, e_inter, e_intra, e_contrastive, e_domain, e_linear])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_trials_agree() {
        for check in run_suite(&GradCheckDims::default(), 3).unwrap() {
            assert!(check.max_rel_err < 1e-4, "{check:?}");
        }
    }
}
