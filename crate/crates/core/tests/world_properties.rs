use std::path::PathBuf;

use fedapt_core::encoders::{EncoderConfig, EncoderPair, FixedHead};
use fedapt_core::io::{from_json, to_json};
use fedapt_core::numerics::solve_spd;
use fedapt_core::training::encode_dataset;
use fedapt_core::world::{dirichlet_partition, generate_world, Beta, PartitionConfig, Sample, World, WorldConfig};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `actual` with the frozen file, or rewrites it when
/// `FEDAPT_BLESS=1`.
fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var("FEDAPT_BLESS").as_deref() == Ok("1") {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "output differs from {}", path.display());
}

fn class_table(clients: &[Vec<Sample>], num_classes: usize) -> Vec<Vec<usize>> {
    clients
        .iter()
        .map(|c| {
            let mut row = vec![0; num_classes];
            for s in c {
                row[s.label] += 1;
            }
            row
        })
        .collect()
}

fn skewed_world() -> World {
    generate_world(&WorldConfig {
        seed: 7,
        ..WorldConfig::default()
    })
    .unwrap()
}

#[test]
fn skewed_partition_matches_frozen_table() {
    let world = skewed_world();
    let cfg = PartitionConfig {
        clients_per_domain: 5,
        beta: Beta::Dirichlet(0.01),
        seed: 7,
    };
    let clients = dirichlet_partition(&world.train_by_domain(), &cfg).unwrap();
    let table = class_table(&clients, 10);
    let mut text = String::new();
    for row in &table {
        text += &row.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        text += "\n";
    }
    check_golden("partition_beta0.01_seed7.csv", &text);

    // At least 60% of (domain, class) groups are dominated by one client.
    let mut dominated = 0;
    let mut groups = 0;
    #[allow(clippy::needless_range_loop)]
    for k in 0..3 {
        for c in 0..10 {
            let counts: Vec<usize> = (0..5).map(|i| table[k * 5 + i][c]).collect();
            let total: usize = counts.iter().sum();
            groups += 1;
            if *counts.iter().max().unwrap() as f64 > 0.9 * total as f64 {
                dominated += 1;
            }
        }
    }
    assert!(dominated as f64 >= 0.6 * groups as f64, "{dominated}/{groups}");
}

#[test]
fn partition_conserves_every_sample() {
    let world = skewed_world();
    for beta in [Beta::IID, Beta::Dirichlet(0.01), Beta::Dirichlet(0.5), Beta::Dirichlet(5.0)] {
        let per_domain = world.train_by_domain();
        let cfg = PartitionConfig {
            clients_per_domain: 4,
            beta,
            seed: 3,
        };
        let clients = dirichlet_partition(&per_domain, &cfg).unwrap();
        assert_eq!(clients.len(), 12);
        for (k, domain) in per_domain.iter().enumerate() {
            let mut got: Vec<Vec<u8>> = clients[k * 4..(k + 1) * 4]
                .iter()
                .flatten()
                .map(|s| {
                    assert_eq!(s.domain, k);
                    serde_json::to_vec(s).unwrap()
                })
                .collect();
            let mut want: Vec<Vec<u8>> = domain.iter().map(|s| serde_json::to_vec(s).unwrap()).collect();
            got.sort();
            want.sort();
            assert_eq!(got, want);
        }
    }
}

fn mean_max_share(beta: f64, seeds: u64) -> f64 {
    let world = generate_world(&WorldConfig {
        num_domains: 1,
        samples_per_domain: 500,
        ..WorldConfig::default()
    })
    .unwrap();
    let per_domain = world.train_by_domain();
    let mut total = 0.0;
    let mut n = 0.0;
    for seed in 0..seeds {
        let cfg = PartitionConfig {
            clients_per_domain: 5,
            beta: Beta::Dirichlet(beta),
            seed,
        };
        let table = class_table(&dirichlet_partition(&per_domain, &cfg).unwrap(), 10);
        for c in 0..10 {
            let col: Vec<usize> = table.iter().map(|r| r[c]).collect();
            total += *col.iter().max().unwrap() as f64 / col.iter().sum::<usize>() as f64;
            n += 1.0;
        }
    }
    total / n
}

#[test]
fn smaller_beta_concentrates_classes() {
    let skewed = mean_max_share(0.01, 50);
    let balanced = mean_max_share(5.0, 50);
    assert!(skewed > balanced, "{skewed} <= {balanced}");
}

/// One-vs-rest least squares on `[feature, 1]`, scored on its own fit set.
fn least_squares_domain_accuracy(feats: &[Vec<f64>], domains: &[usize], k: usize) -> f64 {
    let d = feats[0].len() + 1;
    let rows: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().copied().chain([1.0]).collect()).collect();
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * k];
    for (r, &dom) in rows.iter().zip(domains) {
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += r[i] * r[j];
            }
            rhs[i * k + dom] += r[i];
        }
    }
    for i in 0..d {
        gram[i * d + i] += 1e-8;
    }
    let w = solve_spd(&gram, d, &rhs, k).unwrap();
    let hits = rows
        .iter()
        .zip(domains)
        .filter(|(r, &dom)| {
            let scores: Vec<f64> = (0..k).map(|j| (0..d).map(|i| r[i] * w[i * k + j]).sum()).collect();
            fedapt_core::numerics::argmax(&scores) == dom
        })
        .count();
    hits as f64 / rows.len() as f64
}

#[test]
fn domains_are_linearly_separable_in_feature_space() {
    for shift in [1.0, 1.5] {
        let world = generate_world(&WorldConfig {
            domain_shift_strength: shift,
            ..WorldConfig::default()
        })
        .unwrap();
        let pair = EncoderPair::pretrained(&EncoderConfig::default(), &world.prototypes).unwrap();
        let mut feats = Vec::new();
        let mut domains = Vec::new();
        for (k, samples) in world.train_by_domain().iter().enumerate() {
            for s in samples.iter().take(100) {
                feats.push(pair.encode_image(s.x.data()).unwrap());
                domains.push(k);
            }
        }
        let acc = least_squares_domain_accuracy(&feats, &domains, 3);
        assert!(acc >= 0.95, "shift {shift}: {acc}");
    }
}

#[test]
fn zero_shot_is_perfect_on_the_separable_world() {
    // Noise 0 and shift 0 put every sample exactly on its class prototype,
    // which the aligned text tower maps onto by construction.
    for seed in 0..3 {
        let world = generate_world(&WorldConfig {
            noise_std: 0.0,
            domain_shift_strength: 0.0,
            seed,
            ..WorldConfig::default()
        })
        .unwrap();
        let pair = EncoderPair::pretrained(&EncoderConfig::default(), &world.prototypes).unwrap();
        let head = FixedHead::zero_shot(&pair).unwrap();
        let test = encode_dataset(&pair, &world.test).unwrap();
        let hits = test.iter().filter(|s| head.predict(&s.feature).unwrap() == s.sample.label).count();
        assert_eq!(hits, test.len());
    }
}

#[test]
fn noiseless_samples_share_features() {
    let world = generate_world(&WorldConfig {
        noise_std: 0.0,
        ..WorldConfig::default()
    })
    .unwrap();
    let pair = EncoderPair::random(&EncoderConfig::default()).unwrap();
    let same: Vec<&Sample> = world.train.iter().filter(|s| s.domain == 1 && s.label == 4).collect();
    let a = pair.encode_image(same[0].x.data()).unwrap();
    let b = pair.encode_image(same[1].x.data()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn world_and_encoders_round_trip_through_json() {
    let world = skewed_world();
    let text = to_json("world", &world).unwrap();
    let back: World = from_json("world", &text).unwrap();
    assert_eq!(back, world);
    assert_eq!(back.fingerprint(), world.fingerprint());
    let pair = EncoderPair::pretrained(&EncoderConfig::default(), &world.prototypes).unwrap();
    let back: EncoderPair = from_json("encoders", &to_json("encoders", &pair).unwrap()).unwrap();
    assert_eq!(back.fingerprint(), pair.fingerprint());
}
