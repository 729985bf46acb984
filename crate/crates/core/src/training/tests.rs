use super::*;
use crate::apt::{init_keys, KeyScheme};
use crate::encoders::EncoderConfig;
use crate::numerics::Stream;
use crate::world::{generate_world, WorldConfig};

fn tiny_encoders() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        prompt_len: 2,
        feature_dim: 8,
        num_classes: 3,
        input_dim: 6,
        hidden_dim: 12,
        seed: 4,
        ..EncoderConfig::default()
    }
}

fn tiny() -> (EncoderPair, Vec<EncodedSample>) {
    let world = generate_world(&WorldConfig {
        num_domains: 2,
        num_classes: 3,
        input_dim: 6,
        samples_per_domain: 30,
        domain_shift_strength: 0.5,
        seed: 2,
        ..WorldConfig::default()
    })
    .unwrap();
    let pair = EncoderPair::pretrained(&tiny_encoders(), &world.prototypes).unwrap();
    let data = encode_dataset(&pair, &world.train).unwrap();
    (pair, data)
}

fn learner(mode: PromptMode, with_key: bool, lr: f64) -> LocalLearner {
    let mut rng = Rng::new(1, Stream::Init);
    let prompt = Prompt::random(mode, 3, 2, 8, 0.1, &mut rng);
    let key = with_key.then(|| init_keys(2, 2, 8, KeyScheme::RandN, 5).unwrap().key(1).clone());
    LocalLearner::new(
        prompt,
        Some(AdaptiveNet::zeros(8, 2, 1.0).unwrap()),
        key,
        1,
        LearnerConfig {
            learning_rate: lr,
            batch_size: 8,
            local_epochs: 1,
        },
    )
    .unwrap()
}

fn rng() -> Rng {
    Rng::new(0, Stream::Train { round: 1, client: 0 })
}

#[test]
fn zero_adaptive_net_gives_log_k() {
    let (pair, data) = tiny();
    let l = learner(PromptMode::ClassSpecific, true, 0.01);
    let batch: Vec<&EncodedSample> = data.iter().take(5).collect();
    let loss = supervised_loss(&l, &pair, &batch).unwrap();
    // Exact up to the rounding of the batch mean.
    assert!((loss.domain_loss - 2f64.ln()).abs() <= 4.0 * f64::EPSILON);
}

#[test]
fn supervised_total_is_sum_of_parts() {
    let (pair, data) = tiny();
    let mut l = learner(PromptMode::ClassSpecific, true, 0.01);
    l.adaptive.as_mut().unwrap().weights_mut().data_mut()[3] = 0.7;
    let batch: Vec<&EncodedSample> = data.iter().skip(3).take(6).collect();
    let loss = supervised_loss(&l, &pair, &batch).unwrap();
    let feats: Vec<&[f64]> = batch.iter().map(|s| s.feature.as_slice()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.sample.label).collect();
    let (lc, _) = prompt_cross_entropy(&l, &pair, &feats, &labels).unwrap();
    let (lq, _) = adaptive_loss(l.adaptive.as_ref().unwrap(), &feats, 1).unwrap();
    assert!((loss.total - (lc + lq)).abs() < 1e-12);
}

#[test]
fn supervised_rejects_bad_labels_and_shared_prompts() {
    let (pair, data) = tiny();
    let mut bad = data[0].clone();
    bad.sample.label = 3;
    let l = learner(PromptMode::ClassSpecific, false, 0.01);
    assert!(matches!(supervised_loss(&l, &pair, &[&bad]), Err(Error::InvalidArgument(_))));
    let shared = learner(PromptMode::ClassShared, false, 0.01);
    assert!(supervised_loss(&shared, &pair, &[&data[0]]).is_err());
}

#[test]
fn inter_loss_hand_example() {
    let banks = Banks::from_parts(
        Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
        Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
    )
    .unwrap();
    let cfg = UnsupConfig {
        num_neighbors: 1,
        lambda: 1.0,
        ..UnsupConfig::default()
    };
    let (loss, grad) = inter_sample_loss(&banks, 0, &[1.0, 0.0], &cfg).unwrap();
    assert_eq!(loss, -1.0);
    assert_eq!(grad, vec![-1.0, 1.0]);
}

#[test]
fn inter_loss_pure_attraction() {
    let z = [0.6, 0.3, 0.1];
    let a: f64 = z.iter().map(|v| v * v).sum();
    let feats = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.9, 0.1, 0.8, 0.2, 0.7, 0.3]).unwrap();
    let scores = Tensor::new(vec![4, 3], z.repeat(4)).unwrap();
    let banks = Banks::from_parts(feats, scores).unwrap();
    let cfg = UnsupConfig {
        num_neighbors: 3,
        lambda: 0.0,
        ..UnsupConfig::default()
    };
    let (loss, _) = inter_sample_loss(&banks, 0, &z, &cfg).unwrap();
    assert!((loss + 3.0 * a).abs() < 1e-12);
}

#[test]
fn inter_loss_rejects_oversized_neighborhood() {
    let banks = Banks::from_parts(Tensor::zeros(&[2, 2]), Tensor::filled(&[2, 2], 0.5)).unwrap();
    let cfg = UnsupConfig {
        num_neighbors: 2,
        ..UnsupConfig::default()
    };
    assert!(inter_sample_loss(&banks, 0, &[0.5, 0.5], &cfg).is_err());
}

#[test]
fn neighbors_exclude_self_and_break_ties_low() {
    let feats = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let banks = Banks::from_parts(feats, Tensor::filled(&[4, 2], 0.5)).unwrap();
    assert_eq!(banks.neighbors(0, 1), vec![3]);
    assert_eq!(banks.neighbors(3, 2), vec![0, 1]);
}

#[test]
fn intra_loss_examples() {
    assert_eq!(intra_sample_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap().0, 0.0);
    let (kl, _) = intra_sample_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    assert!((kl - 2f64.ln()).abs() < 1e-6);
    assert!(matches!(
        intra_sample_loss(&[1.2, -0.2], &[0.5, 0.5]),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn impossible_threshold_skips_stage_one() {
    let (pair, data) = tiny();
    let mut l = learner(PromptMode::ClassShared, true, 0.05);
    let before = l.clone();
    let cfg = UnsupConfig {
        confidence_threshold: 1.0 + 1e-9,
        ..UnsupConfig::default()
    };
    let zs = FixedHead::zero_shot(&pair).unwrap();
    let task = LocalTask::PseudoLabel { zero_shot: &zs, cfg: &cfg };
    let report = local_train(&mut l, &pair, &data, task, &mut rng()).unwrap();
    assert!(report.skipped);
    assert_eq!(report.steps, 0);
    assert_eq!(l, before);
}

#[test]
fn pseudo_labels_come_from_the_frozen_model() {
    let (pair, data) = tiny();
    let zs = FixedHead::zero_shot(&pair).unwrap();
    let labeled = pseudo_labels(&zs, &data, 0.0).unwrap();
    assert_eq!(labeled.len(), data.len());
    for (i, y) in labeled {
        assert_eq!(y, zs.predict(&data[i].feature).unwrap());
    }
}

#[test]
fn stage_two_refreshes_touched_rows() {
    let (pair, data) = tiny();
    let mut l = learner(PromptMode::ClassShared, true, 0.05);
    let cfg = UnsupConfig {
        augment_strength: 0.0,
        ..UnsupConfig::default()
    };
    let mut banks = Banks::build(&l, &pair, &data).unwrap();
    let mut r = rng();
    for step in 0..5 {
        let batch: Vec<usize> = (step * 4..step * 4 + 4).collect();
        let head = TextHead::for_learner(&pair, &l).unwrap();
        let fresh: Vec<Vec<f64>> = batch.iter().map(|&i| head.probs(&data[i].feature)).collect();
        let loss = unsupervised_stage2_step(&mut l, &pair, &mut banks, &data, &batch, &cfg, &mut r).unwrap();
        assert_eq!(loss.intra, 0.0);
        for (&i, z) in batch.iter().zip(&fresh) {
            assert_eq!(banks.score(i), z.as_slice());
            assert_eq!(banks.feature(i), data[i].feature.as_slice());
        }
        for i in 0..banks.len() {
            assert!((banks.score(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((crate::numerics::norm(banks.feature(i)) - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn pure_attraction_decreases_loss() {
    let (pair, data) = tiny();
    let data: Vec<EncodedSample> = data.into_iter().take(12).collect();
    let mut l = learner(PromptMode::ClassShared, false, 0.05);
    let cfg = UnsupConfig {
        lambda: 0.0,
        num_neighbors: data.len() - 1,
        augment_strength: 0.0,
        ..UnsupConfig::default()
    };
    let mut banks = Banks::build(&l, &pair, &data).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut r = rng();
    let first = unsupervised_stage2_step(&mut l, &pair, &mut banks, &data, &all, &cfg, &mut r).unwrap();
    let mut last = first.clone();
    for _ in 0..9 {
        last = unsupervised_stage2_step(&mut l, &pair, &mut banks, &data, &all, &cfg, &mut r).unwrap();
    }
    assert!(last.inter < first.inter, "{} !< {}", last.inter, first.inter);
}

#[test]
fn zero_epochs_leave_learner_unchanged() {
    let (pair, data) = tiny();
    let mut l = learner(PromptMode::ClassSpecific, true, 0.05);
    l.config.local_epochs = 0;
    let before = l.clone();
    local_train(&mut l, &pair, &data, LocalTask::Supervised, &mut rng()).unwrap();
    assert_eq!(l, before);
}

#[test]
fn local_training_is_deterministic_and_keeps_the_key() {
    let (pair, data) = tiny();
    let start = learner(PromptMode::ClassSpecific, true, 0.05);
    let key_bytes = start.key().unwrap().to_bytes();
    let mut a = start.clone();
    let mut b = start.clone();
    local_train(&mut a, &pair, &data, LocalTask::Supervised, &mut rng()).unwrap();
    local_train(&mut b, &pair, &data, LocalTask::Supervised, &mut rng()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.prompt, start.prompt);
    assert_eq!(a.key().unwrap().to_bytes(), key_bytes);
}

#[test]
fn one_epoch_lowers_supervised_loss() {
    let (pair, data) = tiny();
    let mut l = learner(PromptMode::ClassSpecific, true, 0.05);
    let all: Vec<&EncodedSample> = data.iter().collect();
    let before = supervised_loss(&l, &pair, &all).unwrap().total;
    local_train(&mut l, &pair, &data, LocalTask::Supervised, &mut rng()).unwrap();
    let after = supervised_loss(&l, &pair, &all).unwrap().total;
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn empty_dataset_is_an_explicit_error() {
    let (pair, _) = tiny();
    let mut l = learner(PromptMode::ClassSpecific, false, 0.05);
    let err = local_train(&mut l, &pair, &[], LocalTask::Supervised, &mut rng()).unwrap_err();
    assert!(matches!(err, Error::DegenerateInput(_)));
}

#[test]
fn linear_head_training_lowers_loss() {
    let (_, data) = tiny();
    let mut head = Tensor::zeros(&[8, 3]);
    let feats: Vec<&[f64]> = data.iter().map(|s| s.feature.as_slice()).collect();
    let labels: Vec<usize> = data.iter().map(|s| s.sample.label).collect();
    let (before, _) = linear_head_loss(&head, &feats, &labels).unwrap();
    assert!((before - 3f64.ln()).abs() < 1e-12);
    let cfg = LearnerConfig {
        learning_rate: 0.5,
        batch_size: 8,
        local_epochs: 3,
    };
    train_linear_head(&mut head, &data, &cfg, &mut rng()).unwrap();
    let (after, _) = linear_head_loss(&head, &feats, &labels).unwrap();
    assert!(after < before);
}

#[test]
fn learner_rejects_bad_config() {
    let prompt = Prompt::zeros(PromptMode::ClassSpecific, 3, 2, 8);
    let bad = |lr: f64, bs: usize| LearnerConfig {
        learning_rate: lr,
        batch_size: bs,
        local_epochs: 1,
    };
    assert!(LocalLearner::new(prompt.clone(), None, None, 0, bad(0.0, 4)).is_err());
    assert!(LocalLearner::new(prompt.clone(), None, None, 0, bad(0.1, 0)).is_err());
    let wrong_key = Tensor::zeros(&[3, 8]);
    assert!(LocalLearner::new(prompt, None, Some(wrong_key), 0, bad(0.1, 4)).is_err());
}
