use fedapt_core::apt::{query_weights, KeyScheme};
use fedapt_core::encoders::{EncoderConfig, FixedHead};
use fedapt_core::evaluation::{build_precomputed, evaluate, predict_fast, predict_naive, EvalOptions};
use fedapt_core::federation::{assign_keys, run_federation, sample_clients, Federation};
use fedapt_core::scenario::Scenario;
use fedapt_core::training::{local_train, LearnerConfig, LocalLearner, LocalTask, UnsupConfig};
use fedapt_core::world::{PartitionConfig, WorldConfig};
use fedapt_core::{FedConfig, Method, Prompt, PromptMode, Rng, Sampling, Stream, Supervision, TrainingConfig};

fn scenario(clients_per_domain: usize, world: WorldConfig) -> Scenario {
    Scenario::build(
        &world,
        &PartitionConfig {
            clients_per_domain,
            ..PartitionConfig::default()
        },
        &EncoderConfig::default(),
    )
    .unwrap()
}

fn standard() -> Scenario {
    scenario(
        2,
        WorldConfig {
            samples_per_domain: 200,
            ..WorldConfig::default()
        },
    )
}

fn fed(mode: Method, rounds: usize) -> FedConfig {
    FedConfig {
        mode,
        rounds,
        seed: 7,
        ..FedConfig::default()
    }
}

#[test]
fn zero_keys_reduce_fedapt_to_promptfl() {
    let sc = standard();
    let training = TrainingConfig::default();
    let apt = FedConfig {
        key_scheme: KeyScheme::Zeros,
        ..fed(Method::FedApt, 4)
    };
    let a = run_federation(&sc.pair, &sc.clients, &sc.test, 3, &apt, &training).unwrap();
    let b = run_federation(&sc.pair, &sc.clients, &sc.test, 3, &fed(Method::PromptFl, 4), &training).unwrap();
    assert_eq!(a.meta.values().to_bytes(), b.meta.values().to_bytes());
}

#[test]
fn encoders_and_keys_never_change() {
    let sc = standard();
    let encoders_before = serde_json::to_vec(&sc.pair).unwrap();
    let training = TrainingConfig::default();
    let mut engine = Federation::new(&sc.pair, &sc.clients, &sc.test, 3, &fed(Method::FedApt, 3), &training).unwrap();
    let key_hash = engine.state().keys.fingerprint();
    let map_before = assign_keys(&engine.state().keys, &sc.clients).unwrap();
    while !engine.is_done() {
        let snapshot = engine.state().clone();
        engine.step_round().unwrap();
        assert_eq!(engine.state().keys.fingerprint(), key_hash);
        assert_eq!(assign_keys(&engine.state().keys, &sc.clients).unwrap(), map_before);
        // A round is a pure function of the broadcast state.
        let mut replay = Federation::new(&sc.pair, &sc.clients, &sc.test, 3, &fed(Method::FedApt, 3), &training).unwrap();
        for _ in 0..snapshot.round {
            replay.step_round().unwrap();
        }
        assert_eq!(replay.state(), &snapshot);
    }
    assert_eq!(serde_json::to_vec(&sc.pair).unwrap(), encoders_before);
}

#[test]
fn local_training_leaves_the_server_copy_alone() {
    let sc = standard();
    let cfg = fed(Method::FedApt, 1);
    let server = fedapt_core::FedState::initial(&sc.pair, 3, &cfg).unwrap();
    let before = serde_json::to_vec(&server).unwrap();
    let client = &sc.clients[0];
    let mut learner = LocalLearner::new(
        server.meta.clone(),
        server.adaptive.clone(),
        Some(server.keys.key(client.domain).clone()),
        client.domain,
        LearnerConfig::default(),
    )
    .unwrap();
    let key_before = learner.key().unwrap().to_bytes();
    let mut rng = Rng::new(7, Stream::Train { round: 1, client: 0 });
    local_train(&mut learner, &sc.pair, &client.data, LocalTask::Supervised, &mut rng).unwrap();
    assert_ne!(learner.prompt, server.meta);
    assert_eq!(learner.key().unwrap().to_bytes(), key_before);
    assert_eq!(serde_json::to_vec(&server).unwrap(), before);
}

#[test]
fn cohorts_are_shared_across_methods() {
    let sc = scenario(
        5,
        WorldConfig {
            samples_per_domain: 200,
            ..WorldConfig::default()
        },
    );
    let training = TrainingConfig::default();
    let cfg = |mode| FedConfig {
        sampling: Sampling::ByRandom(6),
        ..fed(mode, 3)
    };
    let a = run_federation(&sc.pair, &sc.clients, &sc.test, 3, &cfg(Method::FedApt), &training).unwrap();
    let b = run_federation(&sc.pair, &sc.clients, &sc.test, 3, &cfg(Method::PromptFl), &training).unwrap();
    for (ra, rb) in a.history.iter().zip(&b.history) {
        assert_eq!(ra.clients, rb.clients);
        assert_eq!(ra.clients.len(), 6);
    }
    assert_eq!(a.history[2].clients, sample_clients(Sampling::ByRandom(6), &sc.clients, 7, 3).unwrap());
}

#[test]
fn same_seed_gives_the_same_history() {
    let sc = standard();
    let training = TrainingConfig::default();
    let a = run_federation(&sc.pair, &sc.clients, &sc.test, 3, &fed(Method::FedApt, 3), &training).unwrap();
    let b = run_federation(&sc.pair, &sc.clients, &sc.test, 3, &fed(Method::FedApt, 3), &training).unwrap();
    assert_eq!(serde_json::to_string(&a.history).unwrap(), serde_json::to_string(&b.history).unwrap());
}

#[test]
fn low_tau_soft_inference_matches_the_fast_path() {
    let sc = standard();
    // Small batches give the adaptive net enough steps to saturate some q.
    let training = TrainingConfig {
        learner: LearnerConfig {
            batch_size: 32,
            ..LearnerConfig::default()
        },
        ..TrainingConfig::default()
    };
    let cfg = FedConfig {
        tau_q: 0.01,
        ..fed(Method::FedApt, 30)
    };
    let state = run_federation(&sc.pair, &sc.clients, &sc.test, 3, &cfg, &training).unwrap();
    let head = build_precomputed(&state, &sc.pair).unwrap();
    let net = state.adaptive.as_ref().unwrap();
    let mut worst: f64 = 0.0;
    let mut confident = 0;
    let mut same_class = 0;
    for s in &sc.world.test {
        let (ca, a) = predict_fast(&head, &state, &sc.pair, s.x.data()).unwrap();
        let (cb, b) = predict_naive(&state, &sc.pair, s.x.data()).unwrap();
        same_class += usize::from(ca == cb);
        let q = query_weights(net, &sc.pair.encode_image(s.x.data()).unwrap()).unwrap();
        if q.iter().cloned().fold(0.0, f64::max) >= 1.0 - 1e-6 {
            confident += 1;
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    println!("confident {confident}/{} same class {same_class}", sc.world.test.len());
    assert!(worst < 1e-6, "{worst}");
    assert!(confident > 0);
    assert!(same_class * 100 >= sc.world.test.len() * 98, "{same_class}");
}

#[test]
fn pseudo_label_stage_does_not_lose_to_zero_shot() {
    let sc = scenario(
        1,
        WorldConfig {
            domain_shift_strength: 0.0,
            ..WorldConfig::default()
        },
    );
    let zero_shot = FixedHead::zero_shot(&sc.pair).unwrap();
    let base = zero_shot_accuracy(&zero_shot, &sc);
    let unsup = UnsupConfig::default();
    let mut rng = Rng::new(1, Stream::Init);
    let prompt = Prompt::random(PromptMode::ClassShared, 10, 4, 16, 0.02, &mut rng);
    let cfg = LearnerConfig {
        local_epochs: 5,
        ..LearnerConfig::default()
    };
    let data: Vec<_> = sc.clients.iter().flat_map(|c| c.data.clone()).collect();
    let mut learner = LocalLearner::new(prompt, None, None, 0, cfg).unwrap();
    let task = LocalTask::PseudoLabel {
        zero_shot: &zero_shot,
        cfg: &unsup,
    };
    let mut rng = Rng::new(1, Stream::Train { round: 1, client: 0 });
    local_train(&mut learner, &sc.pair, &data, task, &mut rng).unwrap();
    let head = FixedHead::new(
        fedapt_core::evaluation::prompt_text_features(&sc.pair, &learner.prompt).unwrap(),
        sc.pair.temperature(),
    )
    .unwrap();
    let tuned = zero_shot_accuracy(&head, &sc);
    assert!(tuned >= base, "{tuned} < {base}");
}

fn zero_shot_accuracy(head: &FixedHead, sc: &Scenario) -> f64 {
    let hits = sc.test.iter().filter(|s| head.predict(&s.feature).unwrap() == s.sample.label).count();
    hits as f64 / sc.test.len() as f64
}

#[test]
fn matching_keys_lead_their_domains_on_a_clean_world() {
    let sc = scenario(
        1,
        WorldConfig {
            noise_std: 0.0,
            ..WorldConfig::default()
        },
    );
    let training = TrainingConfig {
        learner: LearnerConfig {
            local_epochs: 2,
            ..LearnerConfig::default()
        },
        ..TrainingConfig::default()
    };
    let state = run_federation(&sc.pair, &sc.clients, &sc.test, 3, &fed(Method::FedApt, 30), &training).unwrap();
    let opts = EvalOptions {
        per_key: true,
        ..EvalOptions::default()
    };
    let pk = evaluate(&state, &sc.pair, &sc.test, &opts).unwrap().per_key.unwrap();
    let leads = (0..3)
        .filter(|&k| (0..4).all(|r| pk[k + 1][k] >= pk[r][k]))
        .count();
    assert!(leads >= 2, "{pk:?}");
}

#[test]
fn unsupervised_run_uses_shared_prompts() {
    let sc = standard();
    let cfg = FedConfig {
        supervision: Supervision::Unsupervised,
        ..fed(Method::FedApt, 3)
    };
    let training = TrainingConfig {
        unsup: UnsupConfig {
            stage1_rounds: 1,
            ..UnsupConfig::default()
        },
        ..TrainingConfig::default()
    };
    let state = run_federation(&sc.pair, &sc.clients, &sc.test, 3, &cfg, &training).unwrap();
    assert_eq!(state.meta.mode(), PromptMode::ClassShared);
    assert_eq!(state.history.len(), 3);
}
