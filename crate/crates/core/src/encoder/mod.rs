//! Small from-scratch transformer encoder f(.), projection head g(.) and
//! the 14 classification heads, with exact reverse-mode gradients.

pub mod checkpoint;
mod forward;
pub mod optim;
mod params;
mod projection;
pub mod vocab;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forward::{backward, encode, encode_with_cache, head_backward, head_logits, DropoutSeed, SeqCache};
pub use params::{head_offsets, LayerParams, ModelParams, ParamGroup, ProjectionParams, Tensor, N_HEAD_LOGITS};
pub use projection::{project, project_backward, ProjCache};
pub use vocab::{Truncation, Vocabulary, CLS_ID, DEID_ID, PAD_ID, UNK_ID};

use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("batch statistics need at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: u64 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjNorm {
    #[default]
    Batch,
    Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub proj_dim: usize,
    pub dropout_p: f64,
    pub proj_norm: ProjNorm,
    /// Standard deviation of the token and position embedding init.
    pub emb_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            max_seq_len: 128,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            proj_dim: 64,
            dropout_p: 0.0,
            proj_norm: ProjNorm::Batch,
            emb_std: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(self.emb_std > 0.0) {
            return bad("emb_std must be positive".into());
        }
        Ok(())
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Parameters plus the non-trainable projection-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: EncoderConfig,
    pub params: ModelParams<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    /// Set once pre-training ends; the projection head is kept on disk but
    /// not used downstream.
    pub projection_discarded: bool,
}

impl<F: Real> Model<F> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let params = ModelParams::init(&config, &mut rng);
        let p = config.proj_dim;
        Ok(Self {
            config,
            params,
            running_mean: vec![F::zero(); p],
            running_var: vec![F::one(); p],
            projection_discarded: false,
        })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        let c = |v: &[F]| v.iter().map(|x| G::c(x.to_f64().unwrap_or(f64::NAN))).collect();
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            projection_discarded: self.projection_discarded,
        }
    }

    pub fn encode(&self, ids: &[u32]) -> Vec<F> {
        encode(&self.params, &self.config, ids)
    }

    /// CLS vectors for many sequences, row-major (n x d_model).
    pub fn encode_batch(&self, seqs: &[Vec<u32>]) -> Vec<F> {
        let rows: Vec<Vec<F>> = seqs.par_iter().map(|s| self.encode(s)).collect();
        rows.concat()
    }

    /// Momentum update of the running statistics from one train-mode batch.
    pub fn update_running_stats(&mut self, batch_mean: &[F], batch_var: &[F], n: usize) {
        let m = F::c(BN_MOMENTUM);
        let unbias = if n > 1 { F::c(n as f64 / (n as f64 - 1.0)) } else { F::one() };
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (F::one() - m) * self.running_mean[j] + m * batch_mean[j];
            self.running_var[j] = (F::one() - m) * self.running_var[j] + m * batch_var[j] * unbias;
        }
    }
}

/// Loss on top of the CLS vectors of a batch.
pub trait Objective<F: Real>: Sync {
    /// `cls` is row-major (n x d_model). Returns the loss and dLoss/dCLS;
    /// gradients of parameters applied after the encoder go into `grads`.
    fn loss_and_grad(&self, model: &Model<F>, cls: &[F], n: usize, grads: &mut ModelParams<F>)
        -> Result<ObjectiveOutput<F>, EncoderError>;
}

pub struct ObjectiveOutput<F> {
    pub loss: F,
    pub dcls: Vec<F>,
    /// Batch mean and variance of the projection norm, when it ran in train mode.
    pub batch_stats: Option<(Vec<F>, Vec<F>)>,
}

pub struct StepOutput<F> {
    pub loss: F,
    pub grads: ModelParams<F>,
    pub batch_stats: Option<(Vec<F>, Vec<F>)>,
}

/// Sequences per gradient-accumulation chunk. Chunks are reduced in a fixed
/// order, so results do not depend on the thread count.
const CHUNK: usize = 8;

/// Forward, objective, and exact backward over a batch of id sequences.
pub fn forward_backward<F: Real, O: Objective<F>>(
    model: &Model<F>,
    seqs: &[Vec<u32>],
    objective: &O,
    batch_id: u64,
    dropout_seed: Option<u64>,
) -> Result<StepOutput<F>, EncoderError> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let encoded: Vec<(Vec<F>, SeqCache<F>)> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let drop = dropout_seed.map(|seed| DropoutSeed { seed, stream: i as u64 });
            encode_with_cache(&model.params, cfg, s, drop)
        })
        .collect();
    let mut cls = Vec::with_capacity(seqs.len() * d);
    for (c, _) in &encoded {
        cls.extend_from_slice(c);
    }
    let mut grads = model.params.zeros_like();
    let out = objective.loss_and_grad(model, &cls, seqs.len(), &mut grads)?;
    if !out.loss.is_finite() {
        return Err(EncoderError::NonFiniteLoss { batch: batch_id });
    }
    let partials: Vec<ModelParams<F>> = encoded
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut g = model.params.zeros_like();
            for (j, (_, cache)) in chunk.iter().enumerate() {
                let row = ci * CHUNK + j;
                backward(&model.params, cfg, cache, &out.dcls[row * d..(row + 1) * d], &mut g);
            }
            g
        })
        .collect();
    for p in &partials {
        grads.add_assign(p);
    }
    Ok(StepOutput {
        loss: out.loss,
        grads,
        batch_stats: out.batch_stats,
    })
}
