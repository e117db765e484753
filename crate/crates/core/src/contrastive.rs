//! NT-Xent loss over explicit negatives and the contrastive pre-training loop.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AnnotatedCorpus, AugmentError, AugmentationPolicy, CandidatePlan, ContrastiveBatch, DocumentScope, PairSampler, SamplerConfig, SentenceScope};
use crate::encoder::optim::{Optimizer, OptimizerKind};
use crate::encoder::{
    forward_backward, project, project_backward, EncoderError, Model, ModelParams, Objective, ObjectiveOutput, ParamGroup, Truncation,
    Vocabulary,
};
use crate::rng;
use crate::tensor::{log_sum_exp, Real};

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("zero-length vector")]
    ZeroVector,
    #[error("non-finite input or loss")]
    NonFinite,
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Denominator of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossForm {
    /// Positive plus negatives; non-negative, zero when k = 0.
    #[default]
    Standard,
    /// Negatives only. Can go below zero and is undefined for k = 0.
    Printed,
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, ContrastiveError> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !na.is_finite() || !nb.is_finite() {
        return Err(ContrastiveError::NonFinite);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(ContrastiveError::ZeroVector);
    }
    let s = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(s.clamp(-1.0, 1.0))
}

/// Loss of one row from its similarities, and d loss / d sim for the
/// positive followed by each negative.
pub fn nt_xent_from_sims<F: Real>(s_pos: F, s_negs: &[F], tau: F, form: LossForm) -> (F, Vec<F>) {
    let mut logits = Vec::with_capacity(s_negs.len() + 1);
    logits.push(s_pos / tau);
    logits.extend(s_negs.iter().map(|s| *s / tau));
    let mut grad = vec![F::zero(); logits.len()];
    match form {
        LossForm::Standard => {
            if s_negs.is_empty() {
                return (F::zero(), grad);
            }
            let lse = log_sum_exp(&logits);
            for (g, l) in grad.iter_mut().zip(&logits) {
                *g = (*l - lse).exp() / tau;
            }
            grad[0] -= F::one() / tau;
            // Clamp guards against -0 rounding when the positive dominates.
            ((lse - logits[0]).max(F::zero()), grad)
        }
        LossForm::Printed => {
            let lse = log_sum_exp(&logits[1..]);
            grad[0] = -F::one() / tau;
            for (g, l) in grad[1..].iter_mut().zip(&logits[1..]) {
                *g = (*l - lse).exp() / tau;
            }
            (lse - logits[0], grad)
        }
    }
}

pub fn nt_xent(z_q: &[f64], z_pos: &[f64], z_negs: &[Vec<f64>], tau: f64, form: LossForm) -> Result<f64, ContrastiveError> {
    if !(tau > 0.0) {
        return Err(ContrastiveError::InvalidConfig("tau must be positive".into()));
    }
    let s_pos = cosine_sim(z_q, z_pos)?;
    let s_negs = z_negs.iter().map(|n| cosine_sim(z_q, n)).collect::<Result<Vec<_>, _>>()?;
    if form == LossForm::Printed && s_negs.is_empty() {
        return Err(ContrastiveError::NonFinite);
    }
    let (loss, _) = nt_xent_from_sims(s_pos, &s_negs, tau, form);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(ContrastiveError::NonFinite)
    }
}

/// One training row of projected vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedRow {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Sum of per-row losses.
pub fn batch_contrastive_loss(rows: &[EmbeddedRow], tau: f64, form: LossForm) -> Result<f64, ContrastiveError> {
    rows.iter().map(|r| nt_xent(&r.query, &r.positive, &r.negatives, tau, form)).sum()
}

/// Summed loss and its gradient for unit vectors laid out as queries
/// (b rows), positives (b rows), then the k negatives of each query in turn.
pub fn batch_loss_grad<F: Real>(z: &[F], b: usize, k: usize, p: usize, tau: F, form: LossForm) -> (F, Vec<F>) {
    let mut dz = vec![F::zero(); z.len()];
    let mut total = F::zero();
    let row = |i: usize| &z[i * p..(i + 1) * p];
    for i in 0..b {
        let q = row(i);
        let pos = b + i;
        let negs: Vec<usize> = (0..k).map(|j| 2 * b + i * k + j).collect();
        let dot = |o: usize| q.iter().zip(row(o)).fold(F::zero(), |s, (x, y)| s + *x * *y);
        let s_pos = dot(pos);
        let s_negs: Vec<F> = negs.iter().map(|&o| dot(o)).collect();
        let (loss, g) = nt_xent_from_sims(s_pos, &s_negs, tau, form);
        total += loss;
        for (gi, other) in g.into_iter().zip(std::iter::once(pos).chain(negs)) {
            for j in 0..p {
                let qj = z[i * p + j];
                let oj = z[other * p + j];
                dz[i * p + j] += gi * oj;
                dz[other * p + j] += gi * qj;
            }
        }
    }
    (total, dz)
}

/// Contrastive objective through the projection head.
pub struct ContrastiveObjective {
    pub batch: usize,
    pub k: usize,
    pub tau: f64,
    pub form: LossForm,
}

impl<F: Real> Objective<F> for ContrastiveObjective {
    fn loss_and_grad(&self, model: &Model<F>, cls: &[F], n: usize, grads: &mut ModelParams<F>) -> Result<ObjectiveOutput<F>, EncoderError> {
        debug_assert_eq!(n, self.batch * (2 + self.k));
        let (z, cache) = project(model, cls, n, true)?;
        let (loss, dz) = batch_loss_grad(&z, self.batch, self.k, model.config.proj_dim, F::c(self.tau), self.form);
        let dcls = project_backward(model, &cache, &dz, grads);
        let stats = (!cache.batch_mean.is_empty()).then(|| (cache.batch_mean.clone(), cache.batch_var.clone()));
        Ok(ObjectiveOutput { loss, dcls, batch_stats: stats })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub algorithm: PairSampler,
    pub tau: f64,
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub loss_form: LossForm,
    /// Batches per epoch; by default enough to visit every anchor once.
    pub steps_per_epoch: Option<usize>,
    pub sentence_scope: SentenceScope,
    pub document_scope: DocumentScope,
    pub hard_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            algorithm: PairSampler::DiseaseFactuality,
            tau: 0.4,
            k: 8,
            batch_size: 32,
            epochs: 20,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.0,
            loss_form: LossForm::Standard,
            steps_per_epoch: None,
            sentence_scope: SentenceScope::default(),
            document_scope: DocumentScope::default(),
            hard_fraction: 0.5,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        let bad = |m: &str| Err(ContrastiveError::InvalidConfig(m.into()));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau must be positive");
        }
        if self.k == 0 {
            return bad("k must be at least 1 for training");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be non-negative and momentum in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad("hard_fraction must lie in [0, 1]");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1");
        }
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.batch_size,
            k: self.k,
            sentence_scope: self.sentence_scope,
            document_scope: self.document_scope,
            hard_fraction: self.hard_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

/// Id sequences of a batch in the objective's row layout.
pub fn batch_ids(batch: &ContrastiveBatch, vocab: &Vocabulary, max_len: usize) -> Vec<Vec<u32>> {
    let enc = |v: &crate::augment::TextView| vocab.encode(&v.lemmas().collect::<Vec<_>>(), max_len, Truncation::Head);
    let mut out: Vec<Vec<u32>> = batch.queries.iter().map(enc).collect();
    out.extend(batch.positives.iter().map(enc));
    for negs in &batch.negatives {
        out.extend(negs.iter().map(enc));
    }
    out
}

/// Trains f and g in place. Writes `epoch,step,loss` rows to `telemetry`.
pub fn pretrain(
    model: &mut Model<f32>,
    corpus: &AnnotatedCorpus,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    policy: &AugmentationPolicy,
    mut telemetry: Option<&mut dyn Write>,
) -> Result<Vec<EpochStats>, ContrastiveError> {
    cfg.validate()?;
    policy.validate()?;
    let scfg = cfg.sampler_config();
    let plan = CandidatePlan::build(cfg.algorithm, corpus, &scfg)?;
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| plan.anchors.len().div_ceil(cfg.batch_size).max(1));
    let objective = ContrastiveObjective { batch: cfg.batch_size, k: cfg.k, tau: cfg.tau, form: cfg.loss_form };
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::sgd(cfg.lr, cfg.momentum),
        OptimizerKind::Adam => Optimizer::adam(cfg.lr, &model.params),
    };
    let mut sample_rng = rng::stream(cfg.seed, 1);
    let dropout_base = cfg.seed.wrapping_add(0x5eed);
    if let Some(w) = telemetry.as_deref_mut() {
        writeln!(w, "epoch,step,loss")?;
    }
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut global = 0u64;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let batch = plan.sample(corpus, &scfg, policy, &mut sample_rng);
            let ids = batch_ids(&batch, vocab, model.config.max_seq_len);
            let out = forward_backward(model, &ids, &objective, global, Some(dropout_base.wrapping_add(global)))?;
            if !out.grads.all_finite() {
                return Err(EncoderError::NonFiniteLoss { batch: global }.into());
            }
            opt.step(&mut model.params, &out.grads, &[ParamGroup::Encoder, ParamGroup::Projection]);
            if let Some((m, v)) = &out.batch_stats {
                model.update_running_stats(m, v, ids.len());
            }
            let loss = out.loss as f64;
            total += loss;
            if let Some(w) = telemetry.as_deref_mut() {
                writeln!(w, "{},{},{}", epoch + 1, step + 1, loss)?;
            }
            global += 1;
        }
        stats.push(EpochStats { epoch: epoch + 1, mean_loss: total / steps as f64, batches: steps });
    }
    if cfg.epochs > 0 {
        model.projection_discarded = true;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of the closed form, no stabilization.
    fn naive(q: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let num = (cos(q, p) / tau).exp();
        let den = num + negs.iter().map(|n| (cos(q, n) / tau).exp()).sum::<f64>();
        -(num / den).ln()
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, -0.5];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(ContrastiveError::ZeroVector)));
    }

    #[test]
    fn closed_forms() {
        let q = vec![1.0, 0.0];
        let l = nt_xent(&q, &q, &[vec![0.0, 1.0]], 1.0, LossForm::Standard).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        let l = nt_xent(&q, &q, &[vec![-1.0, 0.0]], 0.4, LossForm::Standard).unwrap();
        assert!((l - (1.0 + (-5.0f64).exp()).ln()).abs() < 1e-12);
        assert_eq!(nt_xent(&q, &[0.3, 0.2], &[], 0.4, LossForm::Standard).unwrap(), 0.0);
    }

    #[test]
    fn printed_form_can_be_negative() {
        let q = vec![1.0, 0.0];
        let l = nt_xent(&q, &q, &[vec![-1.0, 0.0]], 0.4, LossForm::Printed).unwrap();
        assert!((l + 5.0).abs() < 1e-12);
        assert!(nt_xent(&q, &q, &[], 0.4, LossForm::Printed).is_err());
    }

    #[test]
    fn tiny_temperature_stays_finite() {
        let q = vec![1.0, 0.0];
        let l = nt_xent(&q, &[-1.0, 0.0], &[q.clone(), q.clone()], 1e-3, LossForm::Standard).unwrap();
        assert!(l.is_finite() && (l - (2000.0 + 2f64.ln())).abs() < 1e-6);
    }

    #[test]
    fn uniform_limit_at_large_tau() {
        let q = vec![1.0, 0.2, -0.3];
        let negs = vec![vec![0.1, 1.0, 0.0], vec![-1.0, 0.0, 0.5], vec![0.3, 0.3, 0.3]];
        let l = nt_xent(&q, &[0.5, -0.5, 1.0], &negs, 1e6, LossForm::Standard).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn batch_sum_properties() {
        let r1 = EmbeddedRow { query: vec![1.0, 0.5], positive: vec![0.7, 0.1], negatives: vec![vec![-0.2, 1.0]] };
        let r2 = EmbeddedRow { query: vec![0.1, -0.5], positive: vec![0.3, 0.1], negatives: vec![vec![1.2, 1.0]] };
        let one = batch_contrastive_loss(std::slice::from_ref(&r1), 0.4, LossForm::Standard).unwrap();
        assert_eq!(one, nt_xent(&r1.query, &r1.positive, &r1.negatives, 0.4, LossForm::Standard).unwrap());
        assert_eq!(batch_contrastive_loss(&[r1.clone(), r1.clone()], 0.4, LossForm::Standard).unwrap(), 2.0 * one);
        let ab = batch_contrastive_loss(&[r1.clone(), r2.clone()], 0.4, LossForm::Standard).unwrap();
        let ba = batch_contrastive_loss(&[r2, r1], 0.4, LossForm::Standard).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let (b, k, p) = (3, 2, 4);
        let mut r = rng::seeded(4);
        use rand::Rng;
        let z: Vec<f64> = (0..b * (2 + k)).flat_map(|_| unit((0..p).map(|_| r.gen_range(-1.0..1.0)).collect())).collect();
        for form in [LossForm::Standard, LossForm::Printed] {
            let (_, dz) = batch_loss_grad(&z, b, k, p, 0.4, form);
            for i in 0..z.len() {
                let h = 1e-6;
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let num = (batch_loss_grad(&zp, b, k, p, 0.4, form).0 - batch_loss_grad(&zm, b, k, p, 0.4, form).0) / (2.0 * h);
                let scale = num.abs().max(dz[i].abs()).max(1e-8);
                assert!((num - dz[i]).abs() / scale < 1e-4, "{i}: {num} vs {}", dz[i]);
            }
        }
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, dim).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn matches_naive_oracle(
            (q, p, negs) in (1usize..=4).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d), prop::collection::vec(vec_strategy(d), 0..=4))),
            tau in 0.05f64..5.0,
        ) {
            let l = nt_xent(&q, &p, &negs, tau, LossForm::Standard).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - naive(&q, &p, &negs, tau)).abs() < 1e-10);
        }

        #[test]
        fn monotone_in_similarities(s_pos in -0.9f64..0.9, s_negs in prop::collection::vec(-0.9f64..0.9, 1..5), which in 0usize..5, tau in 0.1f64..2.0) {
            let (base, _) = nt_xent_from_sims(s_pos, &s_negs, tau, LossForm::Standard);
            let (up, _) = nt_xent_from_sims(s_pos + 0.05, &s_negs, tau, LossForm::Standard);
            prop_assert!(up < base);
            let mut n2 = s_negs.clone();
            let j = which % n2.len();
            n2[j] += 0.05;
            let (worse, _) = nt_xent_from_sims(s_pos, &n2, tau, LossForm::Standard);
            prop_assert!(worse > base);
        }
    }

    fn small_setup(n_patients: usize, reports: std::ops::RangeInclusive<usize>) -> (AnnotatedCorpus, Vocabulary, Model<f32>) {
        use crate::corpus::Corpus;
        use crate::encoder::EncoderConfig;
        use crate::info::InfoPreservation;
        use crate::labels::Observation;
        use crate::synthetic::{generate, GeneratorSpec};
        let spec = GeneratorSpec {
            n_patients,
            reports_per_patient: reports,
            diseases: vec![Observation::Edema, Observation::PleuralEffusion, Observation::Cardiomegaly],
            seed: 9,
            ..Default::default()
        };
        let records: Vec<_> = generate(&spec).unwrap().into_iter().map(|r| r.record).collect();
        let corpus = Corpus::from_records(&records).unwrap();
        let vocab = Vocabulary::build(corpus.reports.iter().flat_map(|r| r.sentences.iter().flat_map(|s| s.lemmas())), 1, None);
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            max_seq_len: 32,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            proj_dim: 16,
            ..Default::default()
        };
        let model = Model::new(cfg, 1).unwrap();
        (AnnotatedCorpus::new(corpus.reports, &InfoPreservation::bundled()), vocab, model)
    }

    fn small_pretrain(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            k: 4,
            batch_size: 16,
            epochs,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            steps_per_epoch: Some(15),
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn pretraining_lowers_loss() {
        let (corpus, vocab, mut model) = small_setup(40, 1..=2);
        let cfg = PretrainConfig { algorithm: PairSampler::Disease, seed: 1, steps_per_epoch: Some(5), ..small_pretrain(20) };
        let mut log = Vec::new();
        let stats = pretrain(&mut model, &corpus, &vocab, &cfg, &AugmentationPolicy::default(), Some(&mut log)).unwrap();
        assert_eq!(stats.len(), 20);
        assert!(stats[19].mean_loss < stats[0].mean_loss, "{stats:?}");
        assert!(model.projection_discarded);
        let log = String::from_utf8(log).unwrap();
        assert_eq!(log.lines().next(), Some("epoch,step,loss"));
        assert_eq!(log.lines().count(), 1 + 20 * 5);
    }

    #[test]
    fn training_is_reproducible() {
        let (corpus, vocab, model) = small_setup(30, 1..=2);
        let cfg = small_pretrain(2);
        let run = || {
            let mut m = model.clone();
            pretrain(&mut m, &corpus, &vocab, &cfg, &AugmentationPolicy::default(), None).unwrap();
            m
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.running_var, b.running_var);
        let ids = |t: &str| vocab.encode(&t.split(' ').collect::<Vec<_>>(), 32, crate::encoder::Truncation::Head);
        assert_ne!(a.encode(&ids("there is edema")), a.encode(&ids("no pleural effusion")));
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (corpus, vocab, mut model) = small_setup(20, 1..=2);
        let before = model.clone();
        let stats = pretrain(&mut model, &corpus, &vocab, &small_pretrain(0), &AugmentationPolicy::default(), None).unwrap();
        assert!(stats.is_empty());
        assert_eq!(model.params, before.params);
        assert!(!model.projection_discarded);
    }

    #[test]
    fn patient_sampler_needs_repeat_patients() {
        let (corpus, vocab, mut model) = small_setup(20, 1..=1);
        let cfg = PretrainConfig { algorithm: PairSampler::Patient, ..small_pretrain(1) };
        let err = pretrain(&mut model, &corpus, &vocab, &cfg, &AugmentationPolicy::default(), None).unwrap_err();
        assert!(matches!(err, ContrastiveError::Augment(AugmentError::InsufficientData(_))), "{err:?}");
    }
}
