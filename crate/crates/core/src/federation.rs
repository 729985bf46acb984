//! Round engine: key assignment, client sampling, local training, and
//! parameter averaging.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apt::{init_keys, AdaptiveNet, KeyScheme, KeySet, Prompt, PromptMode};
use crate::encoders::{EncoderPair, FixedHead};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{evaluate, EvalOptions, EvalReport};
use crate::numerics::{Rng, Stream, Tensor};
use crate::training::{local_train, train_linear_head, EncodedSample, LearnerConfig, LocalLearner, LocalTask, UnsupConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedApt,
    PromptFl,
    ClipFc,
    ZeroShot,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FedApt, Method::PromptFl, Method::ClipFc, Method::ZeroShot];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedApt => "fedapt",
            Method::PromptFl => "promptfl",
            Method::ClipFc => "clipfc",
            Method::ZeroShot => "zeroshot",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode {s:?} (expected fedapt, promptfl, clipfc or zeroshot)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Supervised,
    Unsupervised,
}

impl Supervision {
    pub fn name(self) -> &'static str {
        match self {
            Supervision::Supervised => "supervised",
            Supervision::Unsupervised => "unsupervised",
        }
    }

    pub fn prompt_mode(self) -> PromptMode {
        match self {
            Supervision::Supervised => PromptMode::ClassSpecific,
            Supervision::Unsupervised => PromptMode::ClassShared,
        }
    }
}

impl FromStr for Supervision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "supervised" => Ok(Supervision::Supervised),
            "unsupervised" => Ok(Supervision::Unsupervised),
            _ => Err(format!("unknown supervision {s:?} (expected supervised or unsupervised)")),
        }
    }
}

/// Which clients join a round. Written as `all`, `by_domain`, or
/// `by_random:<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Sampling {
    All,
    ByDomain,
    ByRandom(usize),
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampling::All => f.write_str("all"),
            Sampling::ByDomain => f.write_str("by_domain"),
            Sampling::ByRandom(n) => write!(f, "by_random:{n}"),
        }
    }
}

impl FromStr for Sampling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Sampling::All),
            "by_domain" => Ok(Sampling::ByDomain),
            _ => s
                .strip_prefix("by_random:")
                .and_then(|n| n.parse().ok())
                .map(Sampling::ByRandom)
                .ok_or_else(|| format!("unknown sampling {s:?} (expected all, by_domain or by_random:<n>)")),
        }
    }
}

impl TryFrom<String> for Sampling {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Sampling> for String {
    fn from(s: Sampling) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub sampling: Sampling,
    pub mode: Method,
    pub supervision: Supervision,
    /// Seeds keys, prompt initialization, client selection, and local training.
    pub seed: u64,
    pub key_scheme: KeyScheme,
    /// Inference temperature of the adaptive net.
    pub tau_q: f64,
    pub prompt_init_std: f64,
    /// Weight clients by dataset size when averaging (off by default).
    pub weighted_average: bool,
    /// Train the selected clients of a round on the rayon pool.
    pub parallel: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            sampling: Sampling::All,
            mode: Method::FedApt,
            supervision: Supervision::Supervised,
            seed: 0,
            key_scheme: KeyScheme::RandU,
            tau_q: 1.0,
            prompt_init_std: 0.02,
            weighted_average: false,
            parallel: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_q > 0.0) || !self.tau_q.is_finite() {
            return Err(invalid("tau_q must be a positive number"));
        }
        if !(self.prompt_init_std >= 0.0) || !self.prompt_init_std.is_finite() {
            return Err(invalid("prompt_init_std must be a nonnegative number"));
        }
        if self.mode == Method::ClipFc && self.supervision == Supervision::Unsupervised {
            return Err(invalid("clipfc needs labels; use supervision = \"supervised\""));
        }
        if self.sampling == Sampling::ByRandom(0) {
            return Err(invalid("by_random needs at least one client"));
        }
        Ok(())
    }
}

/// Local hyperparameters of every client.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learner: LearnerConfig,
    pub unsup: UnsupConfig,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        self.unsup.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Client {
    pub id: usize,
    pub domain: usize,
    pub data: Vec<EncodedSample>,
}

/// One round's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<usize>,
    pub mean_local_loss: f64,
    pub eval: EvalReport,
}

/// Server-held global state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedState {
    pub method: Method,
    pub meta: Prompt,
    pub adaptive: Option<AdaptiveNet>,
    pub keys: KeySet,
    pub round: usize,
    pub history: Vec<RoundRecord>,
    pub linear_head: Option<Tensor>,
}

impl FedState {
    /// Round-0 state for `cfg` over `num_domains` domains.
    pub fn initial(pair: &EncoderPair, num_domains: usize, cfg: &FedConfig) -> Result<Self> {
        cfg.validate()?;
        if num_domains == 0 {
            return Err(invalid("at least one domain is required"));
        }
        let enc = pair.config();
        let (s, d, c) = (enc.prompt_len, enc.embed_dim, enc.num_classes);
        let trained_prompt = || {
            let mut rng = Rng::new(cfg.seed, Stream::Init);
            Prompt::random(cfg.supervision.prompt_mode(), c, s, d, cfg.prompt_init_std, &mut rng)
        };
        let empty = KeySet::empty(s, d);
        let state = match cfg.mode {
            Method::FedApt => Self {
                method: cfg.mode,
                meta: trained_prompt(),
                adaptive: Some(AdaptiveNet::zeros(pair.feature_dim(), num_domains, cfg.tau_q)?),
                keys: init_keys(num_domains, s, d, cfg.key_scheme, cfg.seed)?,
                round: 0,
                history: Vec::new(),
                linear_head: None,
            },
            Method::PromptFl => Self {
                method: cfg.mode,
                meta: trained_prompt(),
                adaptive: None,
                keys: empty,
                round: 0,
                history: Vec::new(),
                linear_head: None,
            },
            Method::ClipFc => Self {
                method: cfg.mode,
                meta: Prompt::zeros(PromptMode::ClassShared, c, s, d),
                adaptive: None,
                keys: empty,
                round: 0,
                history: Vec::new(),
                linear_head: Some(zero_shot_linear_head(pair)?),
            },
            Method::ZeroShot => Self {
                method: cfg.mode,
                meta: Prompt::zeros(PromptMode::ClassShared, c, s, d),
                adaptive: None,
                keys: empty,
                round: 0,
                history: Vec::new(),
                linear_head: None,
            },
        };
        Ok(state)
    }
}

/// `d_img x C` head whose logits reproduce the zero-shot classifier.
pub fn zero_shot_linear_head(pair: &EncoderPair) -> Result<Tensor> {
    let zs = FixedHead::zero_shot(pair)?;
    let (d, c) = (pair.feature_dim(), pair.num_classes());
    let mut w = vec![0.0; d * c];
    for (j, t) in zs.text_features().iter().enumerate() {
        for (i, &v) in t.iter().enumerate() {
            w[i * c + j] = v / pair.temperature();
        }
    }
    Tensor::new(vec![d, c], w)
}

/// Every client of domain `k` holds `e_k`.
pub fn assign_keys(keys: &KeySet, clients: &[Client]) -> Result<BTreeMap<usize, Tensor>> {
    let mut out = BTreeMap::new();
    for c in clients {
        if c.domain >= keys.len() {
            return Err(invalid(format!(
                "client {} has domain {} but only {} keys exist",
                c.id,
                c.domain,
                keys.len()
            )));
        }
        out.insert(c.id, keys.key(c.domain).clone());
    }
    Ok(out)
}

/// Client ids joining `round`, in increasing order. Draws only from the
/// round's sampling stream, so every method sees the same cohort.
pub fn sample_clients(sampling: Sampling, clients: &[Client], seed: u64, round: usize) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    let mut rng = Rng::new(seed, Stream::Sampling { round: round as u64 });
    let mut picked = match sampling {
        Sampling::All => ids,
        Sampling::ByDomain => {
            let mut by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for c in clients {
                by_domain.entry(c.domain).or_default().push(c.id);
            }
            by_domain
                .into_values()
                .map(|mut members| {
                    members.sort_unstable();
                    members[rng.index(members.len())]
                })
                .collect()
        }
        Sampling::ByRandom(n) => {
            if n > ids.len() {
                return Err(invalid(format!("by_random:{n} exceeds the {} clients", ids.len())));
            }
            rng.sample_without_replacement(ids.len(), n)
                .into_iter()
                .map(|i| ids[i])
                .collect()
        }
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Running mean of `updates` in the given order; `weights` switches to a
/// weighted mean. Identical updates average to themselves exactly.
pub fn aggregate(updates: &[&Tensor], weights: Option<&[f64]>) -> Result<Tensor> {
    let first = updates.first().ok_or_else(|| invalid("nothing to aggregate"))?;
    if let Some(w) = weights {
        if w.len() != updates.len() || w.iter().any(|&x| !(x > 0.0)) {
            return Err(invalid("aggregation weights must be positive, one per update"));
        }
    }
    let mut mean = (*first).clone();
    let mut seen = weights.map_or(1.0, |w| w[0]);
    for (i, u) in updates.iter().enumerate().skip(1) {
        if u.shape() != first.shape() {
            return Err(invalid(format!(
                "update {i} has shape {:?}, expected {:?}",
                u.shape(),
                first.shape()
            )));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        seen += w;
        let frac = w / seen;
        for (m, &x) in mean.data_mut().iter_mut().zip(u.data()) {
            *m += (x - *m) * frac;
        }
    }
    Ok(mean)
}

struct ClientUpdate {
    id: usize,
    size: usize,
    prompt: Option<Tensor>,
    adaptive: Option<Tensor>,
    linear: Option<Tensor>,
    loss: f64,
}

/// Drives rounds over a fixed client population.
pub struct Federation<'a> {
    pair: &'a EncoderPair,
    clients: &'a [Client],
    test: &'a [EncodedSample],
    cfg: FedConfig,
    training: TrainingConfig,
    zero_shot: FixedHead,
    eval: EvalOptions,
    state: FedState,
}

impl<'a> Federation<'a> {
    pub fn new(
        pair: &'a EncoderPair,
        clients: &'a [Client],
        test: &'a [EncodedSample],
        num_domains: usize,
        cfg: &FedConfig,
        training: &TrainingConfig,
    ) -> Result<Self> {
        training.validate()?;
        let state = FedState::initial(pair, num_domains, cfg)?;
        if clients.is_empty() && cfg.mode != Method::ZeroShot {
            return Err(invalid("no clients"));
        }
        if let Some(c) = clients.iter().find(|c| c.domain >= num_domains) {
            return Err(invalid(format!("client {} has unknown domain {}", c.id, c.domain)));
        }
        Ok(Self {
            pair,
            clients,
            test,
            cfg: cfg.clone(),
            training: training.clone(),
            zero_shot: FixedHead::zero_shot(pair)?,
            eval: EvalOptions::default(),
            state,
        })
    }

    /// Options used for the per-round evaluation.
    pub fn with_eval_options(mut self, eval: EvalOptions) -> Self {
        self.eval = eval;
        self
    }

    pub fn state(&self) -> &FedState {
        &self.state
    }

    pub fn into_state(self) -> FedState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.cfg.mode == Method::ZeroShot || self.state.round >= self.cfg.rounds
    }

    fn client_task(&self, round: usize) -> LocalTask<'_> {
        match self.cfg.supervision {
            Supervision::Supervised => LocalTask::Supervised,
            Supervision::Unsupervised if round <= self.training.unsup.stage1_rounds => LocalTask::PseudoLabel {
                zero_shot: &self.zero_shot,
                cfg: &self.training.unsup,
            },
            Supervision::Unsupervised => LocalTask::Contrastive {
                cfg: &self.training.unsup,
            },
        }
    }

    fn train_client(&self, client: &Client, round: usize) -> Result<ClientUpdate> {
        let mut rng = Rng::new(
            self.cfg.seed,
            Stream::Train {
                round: round as u64,
                client: client.id as u64,
            },
        );
        let fail = |e: Error| Error::ClientFailed {
            round,
            client: client.id,
            reason: e.to_string(),
        };
        if client.data.is_empty() {
            return Err(fail(Error::DegenerateInput("client has no training samples".into())));
        }
        if let Some(head) = &self.state.linear_head {
            let mut head = head.clone();
            let report = train_linear_head(&mut head, &client.data, &self.training.learner, &mut rng).map_err(fail)?;
            return Ok(ClientUpdate {
                id: client.id,
                size: client.data.len(),
                prompt: None,
                adaptive: None,
                linear: Some(head),
                loss: report.mean_loss(),
            });
        }
        let key = match self.cfg.mode {
            Method::FedApt => Some(self.state.keys.key(client.domain).clone()),
            _ => None,
        };
        let mut learner = LocalLearner::new(
            self.state.meta.clone(),
            self.state.adaptive.clone(),
            key,
            client.domain,
            self.training.learner.clone(),
        )
        .map_err(fail)?;
        let report = local_train(&mut learner, self.pair, &client.data, self.client_task(round), &mut rng).map_err(fail)?;
        debug!("round {round} client {} loss {:.6}", client.id, report.mean_loss());
        Ok(ClientUpdate {
            id: client.id,
            size: client.data.len(),
            prompt: Some(learner.prompt.values().clone()),
            adaptive: learner.adaptive.map(|n| n.weights().clone()),
            linear: None,
            loss: report.mean_loss(),
        })
    }

    /// One round: sample, broadcast, train locally, average, evaluate.
    /// A failing client aborts the round and leaves the state untouched.
    pub fn step_round(&mut self) -> Result<&RoundRecord> {
        if self.is_done() {
            return Err(invalid("federation already finished"));
        }
        let round = self.state.round + 1;
        let ids = sample_clients(self.cfg.sampling, self.clients, self.cfg.seed, round)?;
        let selected: Vec<&Client> = ids
            .iter()
            .map(|id| self.clients.iter().find(|c| c.id == *id).expect("sampled id exists"))
            .collect();
        let results: Vec<Result<ClientUpdate>> = if self.cfg.parallel {
            selected.par_iter().map(|c| self.train_client(c, round)).collect()
        } else {
            selected.iter().map(|c| self.train_client(c, round)).collect()
        };
        let updates = results.into_iter().collect::<Result<Vec<_>>>()?;

        let sizes: Vec<f64> = updates.iter().map(|u| u.size as f64).collect();
        let weights = self.cfg.weighted_average.then_some(sizes.as_slice());
        let collect = |f: fn(&ClientUpdate) -> Option<&Tensor>| -> Option<Vec<&Tensor>> {
            updates.iter().map(f).collect()
        };
        let mut next = self.state.clone();
        if let Some(p) = collect(|u| u.prompt.as_ref()) {
            *next.meta.values_mut() = aggregate(&p, weights)?;
        }
        if let (Some(net), Some(a)) = (next.adaptive.as_mut(), collect(|u| u.adaptive.as_ref())) {
            *net.weights_mut() = aggregate(&a, weights)?;
        }
        if let Some(l) = collect(|u| u.linear.as_ref()) {
            next.linear_head = Some(aggregate(&l, weights)?);
        }
        next.round = round;
        let mean_local_loss = updates.iter().map(|u| u.loss).sum::<f64>() / updates.len() as f64;
        let eval = evaluate(&next, self.pair, self.test, &self.eval)?;
        info!(
            "round {round}: mean local loss {mean_local_loss:.6}, average accuracy {:.4}",
            eval.average
        );
        next.history.push(RoundRecord {
            round,
            clients: updates.iter().map(|u| u.id).collect(),
            mean_local_loss,
            eval,
        });
        self.state = next;
        Ok(self.state.history.last().expect("just pushed"))
    }

    pub fn run(mut self) -> Result<FedState> {
        while !self.is_done() {
            self.step_round()?;
        }
        Ok(self.state)
    }
}

/// Builds the engine and runs every round.
pub fn run_federation(
    pair: &EncoderPair,
    clients: &[Client],
    test: &[EncodedSample],
    num_domains: usize,
    cfg: &FedConfig,
    training: &TrainingConfig,
) -> Result<FedState> {
    Federation::new(pair, clients, test, num_domains, cfg, training)?.run()
}

/// Wraps partitioned client datasets; client `k * n + i` is the `i`-th
/// client of domain `k`.
pub fn build_clients(pair: &EncoderPair, partitions: Vec<Vec<crate::world::Sample>>, clients_per_domain: usize) -> Result<Vec<Client>> {
    partitions
        .into_iter()
        .enumerate()
        .map(|(id, samples)| {
            Ok(Client {
                id,
                domain: id / clients_per_domain,
                data: crate::training::encode_dataset(pair, &samples)?,
            })
        })
        .collect()
}
