//! Frozen surrogate image/text encoders and the contrastive classification
//! head.
//!
//! The image encoder is an affine map followed by L2 normalization. The text
//! encoder takes the flattened prompt row concatenated with a class word
//! embedding through a frozen two-layer tanh network, then normalizes. Only
//! the text encoder needs a backward pass, and only with respect to its
//! prompt input.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{self, argmax, cosine, dot, matvec, matvec_t, softmax, Rng, Stream, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Word-embedding dimension `d`.
    pub embed_dim: usize,
    /// Prompt length `s`.
    pub prompt_len: usize,
    /// Image/text feature dimension `d_img`.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub clip_temperature: f64,
    /// How strongly the frozen text tower is aligned, before freezing, to the
    /// canonical (unstyled) class prototypes: 0 leaves it random, 1 makes the
    /// zero-prompt text feature of class `c` match the image feature of
    /// prototype `c` exactly.
    pub alignment: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            prompt_len: 4,
            feature_dim: 32,
            num_classes: 10,
            input_dim: 32,
            hidden_dim: 64,
            seed: 0,
            clip_temperature: 0.07,
            alignment: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("prompt_len", self.prompt_len),
            ("feature_dim", self.feature_dim),
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in dims {
            if v < 1 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.clip_temperature > 0.0) {
            return Err(invalid("clip_temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alignment) {
            return Err(invalid("alignment must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Length of one flattened prompt row, `s * d`.
    pub fn prompt_row_len(&self) -> usize {
        self.prompt_len * self.embed_dim
    }

    fn text_input_len(&self) -> usize {
        self.prompt_row_len() + self.embed_dim
    }
}

/// The frozen encoder pair. Weights never change after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    config: EncoderConfig,
    /// `d_in x d_img`.
    image_weights: Tensor,
    image_bias: Tensor,
    /// `hidden x (s*d + d)`.
    text_w1: Tensor,
    text_b1: Tensor,
    /// `d_img x hidden`.
    text_w2: Tensor,
    text_b2: Tensor,
    /// `C x d`.
    class_embeddings: Tensor,
}

/// Saved forward pass of one text encoding, enough to backpropagate into the
/// prompt row.
#[derive(Debug, Clone)]
pub struct TextTrace {
    hidden: Vec<f64>,
    out_norm: f64,
    feature: Vec<f64>,
}

impl TextTrace {
    pub fn feature(&self) -> &[f64] {
        &self.feature
    }
}

impl EncoderPair {
    /// Random frozen weights drawn from `cfg.seed`.
    pub fn random(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed, Stream::Encoders);
        let (d_in, d_img, h) = (cfg.input_dim, cfg.feature_dim, cfg.hidden_dim);
        let t_in = cfg.text_input_len();
        let image_weights = Tensor::new(vec![d_in, d_img], rng.normal_vec(d_in * d_img, (1.0 / d_in as f64).sqrt()))?;
        let image_bias = Tensor::from_vec(rng.normal_vec(d_img, 0.1));
        let text_w1 = Tensor::new(vec![h, t_in], rng.normal_vec(h * t_in, (1.0 / t_in as f64).sqrt()))?;
        let text_b1 = Tensor::from_vec(rng.normal_vec(h, 0.1));
        let text_w2 = Tensor::new(vec![d_img, h], rng.normal_vec(d_img * h, (1.0 / h as f64).sqrt()))?;
        let text_b2 = Tensor::from_vec(rng.normal_vec(d_img, 0.1));
        let class_embeddings = Tensor::new(
            vec![cfg.num_classes, cfg.embed_dim],
            rng.normal_vec(cfg.num_classes * cfg.embed_dim, 1.0),
        )?;
        Ok(Self {
            config: cfg.clone(),
            image_weights,
            image_bias,
            text_w1,
            text_b1,
            text_w2,
            text_b2,
            class_embeddings,
        })
    }

    /// Random weights whose text tower is then aligned to `anchors` (`C x d_in`
    /// canonical class inputs) with strength `cfg.alignment`, standing in for
    /// contrastive pretraining. Only the output layer moves, by the
    /// minimum-norm correction that maps each class's zero-prompt hidden state
    /// onto the blended target direction.
    pub fn pretrained(cfg: &EncoderConfig, anchors: &Tensor) -> Result<Self> {
        let mut pair = Self::random(cfg)?;
        let c = cfg.num_classes;
        if anchors.shape() != [c, cfg.input_dim] {
            return Err(invalid(format!(
                "anchors have shape {:?}, expected [{c}, {}]",
                anchors.shape(),
                cfg.input_dim
            )));
        }
        if cfg.alignment == 0.0 {
            return Ok(pair);
        }
        let (d_img, h) = (cfg.feature_dim, cfg.hidden_dim);
        let zero_row = vec![0.0; cfg.prompt_row_len()];
        let mut hidden = Vec::with_capacity(c * h); // C x h
        let mut residual = Vec::with_capacity(c * d_img); // C x d_img
        for class in 0..c {
            let trace = pair.text_forward(&zero_row, class)?;
            let current = matvec(pair.text_w2.data(), d_img, h, &trace.hidden);
            let scale = numerics::norm(&current).max(1e-6);
            let target_dir = pair.encode_image(anchors.block(class))?;
            let blended: Vec<f64> = target_dir
                .iter()
                .zip(&trace.feature)
                .map(|(t, f)| cfg.alignment * t + (1.0 - cfg.alignment) * f)
                .collect();
            let blended = numerics::normalize(&blended)?;
            for j in 0..d_img {
                let out = current[j] + pair.text_b2.data()[j];
                residual.push(scale * blended[j] - out);
            }
            hidden.extend_from_slice(&trace.hidden);
        }
        // Gram = H^T H (C x C) with H = hidden states as columns.
        let mut gram = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                gram[a * c + b] = dot(&hidden[a * h..(a + 1) * h], &hidden[b * h..(b + 1) * h]);
            }
            gram[a * c + a] += 1e-9;
        }
        // X = Gram^{-1} R (C x d_img); W2 += X^T H^T.
        let x = numerics::solve_spd(&gram, c, &residual, d_img)?;
        let w2 = pair.text_w2.data_mut();
        for i in 0..d_img {
            for j in 0..h {
                let mut delta = 0.0;
                for class in 0..c {
                    delta += x[class * d_img + i] * hidden[class * h + j];
                }
                w2[i * h + j] += delta;
            }
        }
        Ok(pair)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn temperature(&self) -> f64 {
        self.config.clip_temperature
    }

    /// Unit-norm image feature.
    pub fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (d_in, d_img) = (self.config.input_dim, self.config.feature_dim);
        if x.len() != d_in {
            return Err(invalid(format!("image input has length {}, expected {d_in}", x.len())));
        }
        let mut y = matvec_t(self.image_weights.data(), d_in, d_img, x);
        for (yi, bi) in y.iter_mut().zip(self.image_bias.data()) {
            *yi += bi;
        }
        numerics::normalize(&y)
    }

    /// Unit-norm text feature of `(prompt_row; t_class)`.
    pub fn encode_text(&self, prompt_row: &[f64], class: usize) -> Result<Vec<f64>> {
        Ok(self.text_forward(prompt_row, class)?.feature)
    }

    /// Forward pass that keeps what [`EncoderPair::text_backward`] needs.
    pub fn text_forward(&self, prompt_row: &[f64], class: usize) -> Result<TextTrace> {
        let cfg = &self.config;
        if prompt_row.len() != cfg.prompt_row_len() {
            return Err(invalid(format!(
                "prompt row has length {}, expected {}",
                prompt_row.len(),
                cfg.prompt_row_len()
            )));
        }
        if class >= cfg.num_classes {
            return Err(invalid(format!("class {class} out of range 0..{}", cfg.num_classes)));
        }
        let mut input = Vec::with_capacity(cfg.text_input_len());
        input.extend_from_slice(prompt_row);
        input.extend_from_slice(self.class_embeddings.block(class));
        let (h, t_in, d_img) = (cfg.hidden_dim, cfg.text_input_len(), cfg.feature_dim);
        let mut hidden = matvec(self.text_w1.data(), h, t_in, &input);
        for (a, b) in hidden.iter_mut().zip(self.text_b1.data()) {
            *a = (*a + b).tanh();
        }
        let mut out = matvec(self.text_w2.data(), d_img, h, &hidden);
        for (o, b) in out.iter_mut().zip(self.text_b2.data()) {
            *o += b;
        }
        let out_norm = numerics::norm(&out);
        let feature = numerics::normalize(&out)?;
        Ok(TextTrace {
            hidden,
            out_norm,
            feature,
        })
    }

    /// Gradient with respect to the prompt row, given the gradient with
    /// respect to the normalized text feature.
    pub fn text_backward(&self, trace: &TextTrace, grad_feature: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let (h, t_in, d_img) = (cfg.hidden_dim, cfg.text_input_len(), cfg.feature_dim);
        let f = &trace.feature;
        let radial = dot(f, grad_feature);
        let grad_out: Vec<f64> = grad_feature
            .iter()
            .zip(f)
            .map(|(g, fi)| (g - fi * radial) / trace.out_norm)
            .collect();
        let mut grad_pre = matvec_t(self.text_w2.data(), d_img, h, &grad_out);
        for (g, a) in grad_pre.iter_mut().zip(&trace.hidden) {
            *g *= 1.0 - a * a;
        }
        let rows = cfg.prompt_row_len();
        let mut grad_row = vec![0.0; rows];
        for (w_row, &g) in self.text_w1.data().chunks_exact(t_in).zip(&grad_pre) {
            for (acc, &w) in grad_row.iter_mut().zip(&w_row[..rows]) {
                *acc += w * g;
            }
        }
        grad_row
    }

    /// SHA-256 over every frozen weight.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in [
            &self.image_weights,
            &self.image_bias,
            &self.text_w1,
            &self.text_b1,
            &self.text_w2,
            &self.text_b2,
            &self.class_embeddings,
        ] {
            h.update(t.to_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `p(c | x) = softmax_c(cos(text_c, image) / tau)`.
pub fn clip_probs(text_feats: &[Vec<f64>], image_feat: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature {tau} must be positive")));
    }
    let scores = text_feats
        .iter()
        .map(|t| cosine(t, image_feat))
        .collect::<Result<Vec<f64>>>()?;
    softmax(&scores, tau)
}

/// Text features of every class under one shared prompt row.
pub fn shared_prompt_features(pair: &EncoderPair, prompt_row: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..pair.num_classes())
        .map(|c| pair.encode_text(prompt_row, c))
        .collect()
}

/// Classifier over text features that were computed once and frozen, such
/// as the zero-shot model or one key's precomputed head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedHead {
    text_features: Vec<Vec<f64>>,
    temperature: f64,
}

impl FixedHead {
    pub fn new(text_features: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        if text_features.is_empty() {
            return Err(invalid("fixed head needs at least one class"));
        }
        if !(temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        Ok(Self {
            text_features,
            temperature,
        })
    }

    /// The untrained model: an all-zero shared prompt row.
    pub fn zero_shot(pair: &EncoderPair) -> Result<Self> {
        let zero = vec![0.0; pair.config().prompt_row_len()];
        Self::new(shared_prompt_features(pair, &zero)?, pair.temperature())
    }

    pub fn text_features(&self) -> &[Vec<f64>] {
        &self.text_features
    }

    pub fn probs(&self, image_feat: &[f64]) -> Result<Vec<f64>> {
        clip_probs(&self.text_features, image_feat, self.temperature)
    }

    pub fn predict(&self, image_feat: &[f64]) -> Result<usize> {
        Ok(argmax(&self.probs(image_feat)?))
    }
}

/// Zero-shot label of `x` under a fixed, untrained prompt row (lowest index
/// wins ties).
pub fn zero_shot_predict(pair: &EncoderPair, fixed_prompt: &Tensor, x: &[f64]) -> Result<usize> {
    let texts = shared_prompt_features(pair, fixed_prompt.data())?;
    let feat = pair.encode_image(x)?;
    Ok(argmax(&clip_probs(&texts, &feat, pair.temperature())?))
}
