//! Shared fixtures for the benchmarks.

use fedapt_core::federation::run_federation;
use fedapt_core::scenario::Scenario;
use fedapt_core::{EncoderConfig, FedConfig, FedState, Method, PartitionConfig, TrainingConfig, WorldConfig};

/// Default three-domain, ten-class world with `clients_per_domain` clients per domain.
pub fn scenario(clients_per_domain: usize) -> Scenario {
    let world = WorldConfig::default();
    let encoder = EncoderConfig {
        num_classes: world.num_classes,
        input_dim: world.input_dim,
        ..EncoderConfig::default()
    };
    let partition = PartitionConfig {
        clients_per_domain,
        ..PartitionConfig::default()
    };
    Scenario::build(&world, &partition, &encoder).expect("default scenario builds")
}

/// A fedapt state after `rounds` rounds on `s`.
pub fn trained(s: &Scenario, rounds: usize) -> FedState {
    let cfg = FedConfig {
        rounds,
        mode: Method::FedApt,
        ..FedConfig::default()
    };
    run_federation(&s.pair, &s.clients, &s.test, s.num_domains(), &cfg, &TrainingConfig::default())
        .expect("fedapt trains")
}

/// Raw inputs of the first `n` test samples, cycling if the test set is smaller.
pub fn inputs(s: &Scenario, n: usize) -> Vec<&[f64]> {
    s.test.iter().cycle().take(n).map(|e| e.sample.x.data()).collect()
}
