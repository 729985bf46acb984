//! One-call construction of the world, frozen encoders, and client population.

use crate::encoders::{EncoderConfig, EncoderPair};
use crate::error::{invalid, Result};
use crate::federation::{build_clients, Client};
use crate::training::{encode_dataset, EncodedSample};
use crate::world::{dirichlet_partition, generate_world, PartitionConfig, World, WorldConfig};

pub struct Scenario {
    pub world: World,
    pub pair: EncoderPair,
    pub clients: Vec<Client>,
    pub test: Vec<EncodedSample>,
}

impl Scenario {
    pub fn build(world: &WorldConfig, partition: &PartitionConfig, encoder: &EncoderConfig) -> Result<Self> {
        if encoder.num_classes != world.num_classes {
            return Err(invalid(format!(
                "encoder.num_classes = {} but world.num_classes = {}",
                encoder.num_classes, world.num_classes
            )));
        }
        if encoder.input_dim != world.input_dim {
            return Err(invalid(format!(
                "encoder.input_dim = {} but world.input_dim = {}",
                encoder.input_dim, world.input_dim
            )));
        }
        partition.validate()?;
        let world = generate_world(world)?;
        let pair = EncoderPair::pretrained(encoder, &world.prototypes)?;
        let parts = dirichlet_partition(&world.train_by_domain(), partition)?;
        let clients = build_clients(&pair, parts, partition.clients_per_domain)?;
        let test = encode_dataset(&pair, &world.test)?;
        Ok(Self {
            world,
            pair,
            clients,
            test,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.world.num_domains()
    }
}
