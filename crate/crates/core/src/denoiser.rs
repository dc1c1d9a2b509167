//! Observation encoder, timestep/action embeddings and the Transformer trunk
//! that feeds the expert bank.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::ACTION_DIM;
use crate::moe::{ExpertBank, MoeError, RoutingDecision};
use crate::numerics::{init, NumericsError, Tensor};
use crate::scalar::Scalar;

/// Width of the driving observation vector.
pub const OBS_DIM: usize = 259;
pub const DEFAULT_HORIZON: usize = 8;
pub const DEFAULT_EXPERTS: usize = 8;
pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_DROPOUT: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Moe(#[from] MoeError),
}

pub type Result<T, E = DenoiserError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Micro,
    Small,
    Medium,
    Large,
    Giant,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Micro, Preset::Small, Preset::Medium, Preset::Large, Preset::Giant];

    /// `(n_emb, n_head, n_layer)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Preset::Micro => (32, 2, 1),
            Preset::Small => (128, 2, 4),
            Preset::Medium => (256, 4, 8),
            Preset::Large => (256, 4, 12),
            Preset::Giant => (512, 4, 12),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Micro => "micro",
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Large => "large",
            Preset::Giant => "giant",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = DenoiserError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| DenoiserError::Config(format!("unknown model preset {s:?}")))
    }
}

/// Denoiser backbone family. Only the Transformer is implemented; the
/// convolutional variant is accepted by the config schema and rejected at
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Transformer,
    Unet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_emb: usize,
    pub n_head: usize,
    pub n_layer: usize,
    pub p_drop: f64,
    pub horizon: usize,
    pub obs_dim: usize,
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub backbone: Backbone,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let (n_emb, n_head, n_layer) = preset.dims();
        ModelConfig {
            n_emb,
            n_head,
            n_layer,
            p_drop: DEFAULT_DROPOUT,
            horizon: DEFAULT_HORIZON,
            obs_dim: OBS_DIM,
            n_experts: DEFAULT_EXPERTS,
            top_k: DEFAULT_TOP_K,
            backbone: Backbone::Transformer,
        }
    }

    /// Dense-routing variant: every expert runs on every input.
    pub fn dense(mut self) -> Self {
        self.top_k = self.n_experts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DenoiserError::Config(m));
        if self.n_emb == 0 || self.n_head == 0 || !self.n_emb.is_multiple_of(self.n_head) {
            return bad(format!(
                "n_emb {} must be a positive multiple of n_head {}",
                self.n_emb, self.n_head
            ));
        }
        if !self.n_emb.is_multiple_of(2) {
            return bad(format!("n_emb {} must be even for the timestep encoding", self.n_emb));
        }
        if self.horizon == 0 || self.obs_dim == 0 {
            return bad("horizon and obs_dim must be positive".into());
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!("top_k {} must lie in 1..={}", self.top_k, self.n_experts));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop {} must lie in [0, 1)", self.p_drop));
        }
        if self.backbone != Backbone::Transformer {
            return bad("only the transformer backbone is implemented".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n_emb / self.n_head
    }
}

/// Exact trainable scalar count of the model built from `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d = cfg.n_emb;
    let linear = |i: usize, o: usize| i * o + o;
    let encoder = linear(cfg.obs_dim, d) + linear(d, d);
    let time = 2 * linear(d, d);
    let action = linear(ACTION_DIM, d) + cfg.horizon * d;
    let block = 2 * (2 * d) + 4 * linear(d, d) + linear(d, 4 * d) + linear(4 * d, d);
    let expert = linear(d, 2 * d) + linear(2 * d, ACTION_DIM);
    encoder + time + action + cfg.n_layer * block + d * cfg.n_experts + cfg.n_experts * expert
}

/// Interleaved `[sin(w_0 t), cos(w_0 t), sin(w_1 t), ...]` with
/// `w_k = 10000^(-2k/width)`.
pub fn sinusoidal_encoding<S: Scalar>(t: usize, width: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(width);
    for k in 0..width / 2 {
        let w = 10000f64.powf(-2.0 * k as f64 / width as f64);
        let a = t as f64 * w;
        out.push(S::lit(a.sin()));
        out.push(S::lit(a.cos()));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Linear<S: Scalar = f64> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            w: Tensor::param(&[input, output], init::normal(input * output, std, rng))?,
            b: Tensor::param(&[output], vec![S::zero(); output])?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(x.matmul(&self.w)?.add_suffix(&self.b)?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<S: Scalar = f64> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Tensor::param(&[width], vec![S::one(); width])?,
            beta: Tensor::param(&[width], vec![S::zero(); width])?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(x.layer_norm()?.mul_suffix(&self.gamma)?.add_suffix(&self.beta)?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Pre-norm block: self-attention then a 4x feed-forward, each residual.
#[derive(Debug, Clone)]
pub struct Block<S: Scalar = f64> {
    pub ln1: LayerNorm<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

/// Dropout source for a train-mode forward pass.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply<S: Scalar>(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(x.dropout(self.p, &mut *self.rng)?)
    }
}

impl<S: Scalar> Block<S> {
    fn new<R: Rng + ?Sized>(d: usize, n_layer: usize, rng: &mut R) -> Result<Self> {
        let std = (1.0 / d as f64).sqrt();
        let out_std = std / (2.0 * n_layer as f64).sqrt();
        Ok(Block {
            ln1: LayerNorm::new(d)?,
            wq: Linear::new(d, d, std, rng)?,
            wk: Linear::new(d, d, std, rng)?,
            wv: Linear::new(d, d, std, rng)?,
            wo: Linear::new(d, d, out_std, rng)?,
            ln2: LayerNorm::new(d)?,
            fc1: Linear::new(d, 4 * d, std, rng)?,
            fc2: Linear::new(4 * d, d, out_std / 2.0, rng)?,
        })
    }

    /// `x: [B, L, D]`. Appends each head's attention map `[B, L, L]`.
    fn forward(&self, x: &Tensor<S>, n_head: usize, dropout: &mut Option<Dropout<'_>>, maps: &mut Vec<Tensor<S>>) -> Result<Tensor<S>> {
        let d = x.shape()[2];
        let dh = d / n_head;
        let h = self.ln1.forward(x)?;
        let q = self.wq.forward(&h)?;
        let k = self.wk.forward(&h)?;
        let v = self.wv.forward(&h)?;
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let mut heads = Vec::with_capacity(n_head);
        for i in 0..n_head {
            let qh = q.narrow(2, i * dh, dh)?;
            let kh = k.narrow(2, i * dh, dh)?;
            let vh = v.narrow(2, i * dh, dh)?;
            let att = qh.bmm(&kh.transpose_last2()?)?.scale(scale)?.softmax()?;
            maps.push(att.clone());
            let att = match dropout {
                Some(dr) => dr.apply(&att)?,
                None => att,
            };
            heads.push(att.bmm(&vh)?);
        }
        let merged = if n_head == 1 {
            heads.pop().unwrap()
        } else {
            Tensor::concat(&heads, 2)?
        };
        let mut attn = self.wo.forward(&merged)?;
        if let Some(dr) = dropout {
            attn = dr.apply(&attn)?;
        }
        let x = x.add(&attn)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok(x.add(&m)?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.ln1.push_params(&format!("{prefix}.ln1"), out);
        self.wq.push_params(&format!("{prefix}.attn.q"), out);
        self.wk.push_params(&format!("{prefix}.attn.k"), out);
        self.wv.push_params(&format!("{prefix}.attn.v"), out);
        self.wo.push_params(&format!("{prefix}.attn.o"), out);
        self.ln2.push_params(&format!("{prefix}.ln2"), out);
        self.fc1.push_params(&format!("{prefix}.mlp.fc1"), out);
        self.fc2.push_params(&format!("{prefix}.mlp.fc2"), out);
    }
}

/// Per-token trunk features for a batch.
#[derive(Debug, Clone)]
pub struct TrunkOutput<S: Scalar = f64> {
    /// `[B, H, D]`, context token removed.
    pub tokens: Tensor<S>,
    /// `[B, D]`, mean over tokens.
    pub pooled: Tensor<S>,
    /// Attention maps `[B, H+1, H+1]`, layer-major then head.
    pub attention: Vec<Tensor<S>>,
}

/// Noise estimate plus the routing that produced it.
#[derive(Debug, Clone)]
pub struct NoisePrediction<S: Scalar = f64> {
    /// `[B, H, 2]`.
    pub estimate: Tensor<S>,
    /// `[B, N]` full gate.
    pub gate: Tensor<S>,
    pub decisions: Vec<RoutingDecision<S>>,
}

/// The full conditional noise predictor.
#[derive(Debug, Clone)]
pub struct KdpModel<S: Scalar = f64> {
    pub cfg: ModelConfig,
    pub enc1: Linear<S>,
    pub enc2: Linear<S>,
    pub time1: Linear<S>,
    pub time2: Linear<S>,
    pub action: Linear<S>,
    /// `[H, D]` learned position embedding.
    pub position: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub bank: ExpertBank<S>,
}

impl<S: Scalar> KdpModel<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.n_emb;
        let std_d = (1.0 / d as f64).sqrt();
        Ok(KdpModel {
            cfg: cfg.clone(),
            enc1: Linear::new(cfg.obs_dim, d, (1.0 / cfg.obs_dim as f64).sqrt(), rng)?,
            enc2: Linear::new(d, d, std_d, rng)?,
            time1: Linear::new(d, d, std_d, rng)?,
            time2: Linear::new(d, d, std_d, rng)?,
            action: Linear::new(ACTION_DIM, d, 1.0 / (ACTION_DIM as f64).sqrt(), rng)?,
            position: Tensor::param(&[cfg.horizon, d], init::normal(cfg.horizon * d, 0.02, rng))?,
            blocks: (0..cfg.n_layer).map(|_| Block::new(d, cfg.n_layer, rng)).collect::<Result<_>>()?,
            bank: ExpertBank::for_actions(d, cfg.n_experts, rng)?,
        })
    }

    /// `obs: [B, obs_dim] -> [B, D]`.
    pub fn encode_observation(&self, obs: &Tensor<S>) -> Result<Tensor<S>> {
        if obs.rank() != 2 || obs.shape()[1] != self.cfg.obs_dim {
            return Err(NumericsError::Shape {
                op: "encode_observation",
                detail: format!("expected [B, {}], got {:?}", self.cfg.obs_dim, obs.shape()),
            }
            .into());
        }
        self.enc2.forward(&self.enc1.forward(obs)?.gelu()?)
    }

    /// Raw sinusoidal encodings, `[B, D]`.
    pub fn timestep_encoding(&self, ts: &[usize]) -> Result<Tensor<S>> {
        let d = self.cfg.n_emb;
        let data = ts.iter().flat_map(|t| sinusoidal_encoding::<S>(*t, d)).collect();
        Ok(Tensor::from_vec(&[ts.len(), d], data)?)
    }

    /// Projected timestep embeddings, `[B, D]`.
    pub fn embed_timestep(&self, ts: &[usize]) -> Result<Tensor<S>> {
        let enc = self.timestep_encoding(ts)?;
        self.time2.forward(&self.time1.forward(&enc)?.gelu()?)
    }

    /// Input token embeddings `[B, H, D]` before the context token is
    /// prepended.
    pub fn embed_actions(&self, a_t: &Tensor<S>, ctx: &Tensor<S>, t_emb: &Tensor<S>) -> Result<Tensor<S>> {
        let (b, h, d) = (ctx.shape()[0], self.cfg.horizon, self.cfg.n_emb);
        if a_t.shape() != [b, h, ACTION_DIM] || ctx.shape() != [b, d] || t_emb.shape() != [b, d] {
            return Err(NumericsError::Shape {
                op: "trunk_forward",
                detail: format!(
                    "actions {:?}, context {:?}, timestep {:?} for horizon {h}, width {d}",
                    a_t.shape(),
                    ctx.shape(),
                    t_emb.shape()
                ),
            }
            .into());
        }
        let cond = ctx.add(t_emb)?.expand(1, h)?;
        Ok(self.action.forward(a_t)?.add_suffix(&self.position)?.add(&cond)?)
    }

    /// Runs the trunk. Dropout is applied only when `dropout` is given.
    pub fn trunk_forward(
        &self,
        a_t: &Tensor<S>,
        ctx: &Tensor<S>,
        t_emb: &Tensor<S>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<TrunkOutput<S>> {
        let tokens = self.embed_actions(a_t, ctx, t_emb)?;
        let (b, h, d) = (ctx.shape()[0], self.cfg.horizon, self.cfg.n_emb);
        let mut x = Tensor::concat(&[ctx.reshape(&[b, 1, d])?, tokens], 1)?;
        let mut attention = Vec::with_capacity(self.cfg.n_layer * self.cfg.n_head);
        for block in &self.blocks {
            x = block.forward(&x, self.cfg.n_head, &mut dropout, &mut attention)?;
        }
        let tokens = x.narrow(1, 1, h)?;
        let pooled = tokens.mean_pool()?;
        Ok(TrunkOutput { tokens, pooled, attention })
    }

    /// Noise prediction from a precomputed context `[B, D]`.
    pub fn predict_noise(
        &self,
        a_t: &Tensor<S>,
        ctx: &Tensor<S>,
        ts: &[usize],
        dropout: Option<Dropout<'_>>,
    ) -> Result<NoisePrediction<S>> {
        let t_emb = self.embed_timestep(ts)?;
        self.predict_with_embedding(a_t, ctx, &t_emb, dropout)
    }

    /// Like [`Self::predict_noise`] with a precomputed timestep embedding.
    pub fn predict_with_embedding(
        &self,
        a_t: &Tensor<S>,
        ctx: &Tensor<S>,
        t_emb: &Tensor<S>,
        dropout: Option<Dropout<'_>>,
    ) -> Result<NoisePrediction<S>> {
        let trunk = self.trunk_forward(a_t, ctx, t_emb, dropout)?;
        let out = self.bank.predict(&trunk.tokens, &trunk.pooled, self.cfg.top_k)?;
        Ok(NoisePrediction {
            estimate: out.estimate,
            gate: out.gate,
            decisions: out.decisions,
        })
    }

    /// Observation to noise estimate in one call.
    pub fn forward(&self, obs: &Tensor<S>, a_t: &Tensor<S>, ts: &[usize], dropout: Option<Dropout<'_>>) -> Result<NoisePrediction<S>> {
        let ctx = self.encode_observation(obs)?;
        self.predict_noise(a_t, &ctx, ts, dropout)
    }

    /// Every trainable tensor with a stable dotted name.
    pub fn parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.enc1.push_params("encoder.fc1", &mut out);
        self.enc2.push_params("encoder.fc2", &mut out);
        self.time1.push_params("time.fc1", &mut out);
        self.time2.push_params("time.fc2", &mut out);
        self.action.push_params("action.embed", &mut out);
        out.push(("action.position".into(), self.position.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            block.push_params(&format!("blocks.{i}"), &mut out);
        }
        out.extend(self.bank.parameters());
        out
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> ModelConfig {
        ModelConfig {
            n_emb: 8,
            n_head: 2,
            n_layer: 1,
            p_drop: 0.3,
            horizon: 4,
            obs_dim: 6,
            n_experts: 4,
            top_k: 2,
            backbone: Backbone::Transformer,
        }
    }

    #[test]
    fn preset_table() {
        assert_eq!(Preset::Giant.dims(), (512, 4, 12));
        assert_eq!(Preset::Large.dims(), (256, 4, 12));
        assert_eq!(Preset::Medium.dims(), (256, 4, 8));
        assert_eq!(Preset::Small.dims(), (128, 2, 4));
        assert_eq!("Small".parse::<Preset>().unwrap(), Preset::Small);
        assert!("tiny".parse::<Preset>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = micro();
        c.n_head = 3;
        assert!(c.validate().is_err());
        let mut c = micro();
        c.top_k = 5;
        assert!(c.validate().is_err());
        let mut c = micro();
        c.backbone = Backbone::Unet;
        assert!(matches!(
            KdpModel::<f64>::new(&c, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(DenoiserError::Config(_))
        ));
    }

    #[test]
    fn count_matches_built_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in [micro(), ModelConfig::preset(Preset::Micro), ModelConfig::preset(Preset::Small)] {
            let model = KdpModel::<f64>::new(&cfg, &mut rng).unwrap();
            assert_eq!(model.num_params(), count_params(&cfg));
        }
    }

    #[test]
    fn names_are_unique() {
        let model = KdpModel::<f64>::new(&micro(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let names: std::collections::HashSet<_> = model.parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), model.parameters().len());
    }

    #[test]
    fn forward_shapes() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = KdpModel::<f64>::new(&cfg, &mut rng).unwrap();
        let obs = Tensor::from_vec(&[3, 6], init::normal(18, 1.0, &mut rng)).unwrap();
        let a = Tensor::from_vec(&[3, 4, 2], init::normal(24, 1.0, &mut rng)).unwrap();
        let out = model.forward(&obs, &a, &[1, 50, 100], None).unwrap();
        assert_eq!(out.estimate.shape(), &[3, 4, 2]);
        assert_eq!(out.gate.shape(), &[3, 4]);
        assert_eq!(out.decisions.len(), 3);
        assert!(model.forward(&obs, &a, &[1, 2], None).is_err());
    }
}
