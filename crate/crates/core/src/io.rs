//! Self-describing JSON files for worlds, encoders, and checkpoints.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::apt::{AdaptiveNet, KeySet, Prompt};
use crate::error::{Error, Result};
use crate::federation::{FedState, Method};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    body: T,
}

/// Pretty JSON wrapped with its kind and format version.
pub fn to_json<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let env = Envelope {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        body,
    };
    serde_json::to_string_pretty(&env).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
    if env.kind != kind {
        return Err(Error::Serialization(format!("expected a {kind} file, found {}", env.kind)));
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::Serialization(format!(
            "unsupported format version {} (this build reads {FORMAT_VERSION})",
            env.version
        )));
    }
    Ok(env.body)
}

/// Trained global parameters plus the fingerprint of the encoders they pair with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub method: Method,
    pub round: usize,
    pub meta: Prompt,
    pub adaptive: Option<AdaptiveNet>,
    pub keys: KeySet,
    pub linear_head: Option<Tensor>,
    pub encoder_fingerprint: String,
}

impl Checkpoint {
    pub fn from_state(state: &FedState, encoder_fingerprint: String) -> Self {
        Self {
            method: state.method,
            round: state.round,
            meta: state.meta.clone(),
            adaptive: state.adaptive.clone(),
            keys: state.keys.clone(),
            linear_head: state.linear_head.clone(),
            encoder_fingerprint,
        }
    }

    /// State with an empty history.
    pub fn into_state(self) -> FedState {
        FedState {
            method: self.method,
            meta: self.meta,
            adaptive: self.adaptive,
            keys: self.keys,
            round: self.round,
            history: Vec::new(),
            linear_head: self.linear_head,
        }
    }
}
