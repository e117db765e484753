//! Fourteen per-observation heads on the CLS vector: prediction, loss and
//! fine-tuning.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Report;
use crate::encoder::optim::Optimizer;
use crate::encoder::{
    forward_backward, head_backward, head_logits, head_offsets, EncoderError, Model, ModelParams, Objective, ObjectiveOutput, ParamGroup,
    Truncation, Vocabulary, N_HEAD_LOGITS,
};
use crate::info::SentenceAnnotation;
use crate::labels::{Label, LabelError, LabelVector, Observation, N_OBSERVATIONS};
use crate::rng;
use crate::tensor::{log_sum_exp, Real};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid fine-tuning config: {0}")]
    InvalidConfig(String),
}

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Report-level weak labels from sentence annotations of the body.
pub fn weak_labels(report: &Report, annotations: &[SentenceAnnotation]) -> LabelVector {
    let body: Vec<usize> = report.body_sentences().iter().map(|s| s.index).collect();
    LabelVector::aggregate(
        annotations
            .iter()
            .filter(|a| body.contains(&a.sentence_index))
            .flat_map(|a| a.findings()),
    )
}

/// CLS-prefixed ids of the report body; long reports keep their tail.
pub fn report_ids(report: &Report, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let lemmas: Vec<&str> = report.body_sentences().iter().flat_map(|s| s.lemmas()).collect();
    vocab.encode(&lemmas, max_len, Truncation::Tail)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: LabelVector,
    /// Class probabilities per observation, in `Observation::classes` order.
    pub probs: Vec<Vec<f64>>,
}

/// Softmax per head and argmax; ties go to the earlier class.
pub fn predict_from_logits(logits: &[f64]) -> Prediction {
    let mut slots = [Label::Blank; N_OBSERVATIONS];
    let mut probs = Vec::with_capacity(N_OBSERVATIONS);
    for (obs, (off, k)) in Observation::ALL.iter().zip(head_offsets()) {
        let row = &logits[off..off + k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        slots[obs.index()] = obs.classes()[best];
        let lse = log_sum_exp(row);
        probs.push(row.iter().map(|x| (x - lse).exp()).collect());
    }
    Prediction { labels: LabelVector::new(slots).expect("argmax stays in each head's classes"), probs }
}

pub fn classify<F: Real>(model: &Model<F>, ids: &[u32]) -> Prediction {
    classify_batch(model, std::slice::from_ref(&ids.to_vec())).remove(0)
}

pub fn classify_batch<F: Real>(model: &Model<F>, seqs: &[Vec<u32>]) -> Vec<Prediction> {
    let cls = model.encode_batch(seqs);
    let logits = head_logits(&model.params, &cls, seqs.len());
    logits
        .par_chunks(N_HEAD_LOGITS)
        .map(|row| predict_from_logits(&row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>()))
        .collect()
}

/// Summed negative log-likelihood of the gold class over the 14 heads.
pub fn classification_loss(probs: &[Vec<f64>], gold: &LabelVector) -> f64 {
    Observation::ALL
        .iter()
        .zip(probs)
        .map(|(obs, p)| {
            let j = obs.classes().iter().position(|c| *c == gold.get(*obs)).expect("label in domain");
            -p[j].max(LOG_FLOOR).ln()
        })
        .sum()
}

fn gold_index(gold: &LabelVector, head: usize) -> usize {
    let obs = Observation::ALL[head];
    obs.classes().iter().position(|c| *c == gold.get(obs)).expect("label in domain")
}

/// Loss and d loss / d logits for rows of head logits.
pub fn heads_loss_grad<F: Real>(logits: &[F], golds: &[LabelVector]) -> (F, Vec<F>) {
    let mut dl = vec![F::zero(); logits.len()];
    let mut loss = F::zero();
    let floor = F::c(LOG_FLOOR);
    for (r, gold) in golds.iter().enumerate() {
        for (h, (off, k)) in head_offsets().into_iter().enumerate() {
            let base = r * N_HEAD_LOGITS + off;
            let row = &logits[base..base + k];
            let lse = log_sum_exp(row);
            let t = gold_index(gold, h);
            loss += -((row[t] - lse).exp().max(floor)).ln();
            for j in 0..k {
                dl[base + j] = (row[j] - lse).exp() - if j == t { F::one() } else { F::zero() };
            }
        }
    }
    (loss, dl)
}

pub struct HeadsObjective<'a> {
    pub golds: &'a [LabelVector],
}

impl<F: Real> Objective<F> for HeadsObjective<'_> {
    fn loss_and_grad(&self, model: &Model<F>, cls: &[F], n: usize, grads: &mut ModelParams<F>) -> Result<ObjectiveOutput<F>, EncoderError> {
        let logits = head_logits(&model.params, cls, n);
        let (loss, dl) = heads_loss_grad(&logits, self.golds);
        let dcls = head_backward(&model.params, cls, &dl, n, grads);
        Ok(ObjectiveOutput { loss, dcls, batch_stats: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Encoder frozen, heads trained.
    #[default]
    Linear,
    /// Encoder and heads trained end to end.
    Full,
}

impl std::str::FromStr for FinetuneMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "full" => Ok(Self::Full),
            _ => Err(format!("unknown fine-tuning mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Adam learning rate of the heads.
    pub lr: f64,
    /// Adam learning rate of the encoder in full mode; `lr` when unset.
    pub encoder_lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { mode: FinetuneMode::Linear, lr: 2e-5, encoder_lr: None, epochs: 10, batch_size: 32, seed: 0 }
    }
}

/// Fine-tunes in place and returns the mean per-example loss of each epoch.
pub fn finetune(model: &mut Model<f32>, seqs: &[Vec<u32>], golds: &[LabelVector], cfg: &FinetuneConfig) -> Result<Vec<f64>, ClassifierError> {
    if seqs.len() != golds.len() {
        return Err(ClassifierError::InvalidConfig("one label vector per sequence required".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) || cfg.encoder_lr.is_some_and(|l| !(l >= 0.0)) {
        return Err(ClassifierError::InvalidConfig("batch_size >= 1 and non-negative learning rates required".into()));
    }
    if seqs.is_empty() || cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, 2);
    let mut heads_opt = Optimizer::adam(cfg.lr, &model.params);
    let mut enc_opt = Optimizer::adam(cfg.encoder_lr.unwrap_or(cfg.lr), &model.params);
    // Frozen encoder: features are computed once.
    let features = (cfg.mode == FinetuneMode::Linear).then(|| model.encode_batch(seqs));
    let d = model.config.d_model;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_golds: Vec<LabelVector> = chunk.iter().map(|&i| golds[i]).collect();
            let (loss, grads) = match &features {
                Some(f) => {
                    let mut cls = Vec::with_capacity(chunk.len() * d);
                    for &i in chunk {
                        cls.extend_from_slice(&f[i * d..(i + 1) * d]);
                    }
                    let mut grads = model.params.zeros_like();
                    let out = HeadsObjective { golds: &batch_golds }.loss_and_grad(model, &cls, chunk.len(), &mut grads)?;
                    (out.loss, grads)
                }
                None => {
                    let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
                    let out = forward_backward(model, &batch, &HeadsObjective { golds: &batch_golds }, step, None)?;
                    (out.loss, out.grads)
                }
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(EncoderError::NonFiniteLoss { batch: step }.into());
            }
            heads_opt.step(&mut model.params, &grads, &[ParamGroup::Heads]);
            if cfg.mode == FinetuneMode::Full {
                enc_opt.step(&mut model.params, &grads, &[ParamGroup::Encoder]);
            }
            total += loss as f64;
            step += 1;
        }
        history.push(total / seqs.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use proptest::prelude::*;

    fn tiny() -> Model<f32> {
        let cfg = EncoderConfig { vocab_size: 20, max_seq_len: 16, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, proj_dim: 4, ..Default::default() };
        Model::new(cfg, 1).unwrap()
    }

    fn label_vec(pairs: &[(Observation, Label)]) -> LabelVector {
        let mut v = LabelVector::default();
        for (o, l) in pairs {
            v.set(*o, *l).unwrap();
        }
        v
    }

    #[test]
    fn zero_heads_give_uniform_probs_and_blank() {
        let m = tiny();
        let p = classify(&m, &[1, 5, 6]);
        for (obs, probs) in Observation::ALL.iter().zip(&p.probs) {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(probs.len(), obs.classes().len());
        }
        assert_eq!(p.labels, LabelVector::default());
        assert_eq!(p, classify(&m, &[1, 5, 6]));
    }

    #[test]
    fn uniform_loss_closed_form() {
        let probs: Vec<Vec<f64>> = Observation::ALL.iter().map(|o| vec![1.0 / o.classes().len() as f64; o.classes().len()]).collect();
        let gold = label_vec(&[(Observation::Edema, Label::Negative)]);
        let want = 13.0 * 4f64.ln() + 2f64.ln();
        assert!((classification_loss(&probs, &gold) - want).abs() < 1e-12);
        let (l, _) = heads_loss_grad(&vec![0.0f64; 2 * N_HEAD_LOGITS], &[gold, gold]);
        assert!((l - 2.0 * want).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let gold = label_vec(&[(Observation::Cardiomegaly, Label::Positive)]);
        let probs: Vec<Vec<f64>> = Observation::ALL
            .iter()
            .map(|o| o.classes().iter().map(|c| if *c == gold.get(*o) { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(classification_loss(&probs, &gold), 0.0);
    }

    #[test]
    fn ties_go_to_earlier_class() {
        let mut logits = vec![0.0; N_HEAD_LOGITS];
        logits[1] = 2.0;
        logits[3] = 2.0;
        let p = predict_from_logits(&logits);
        assert_eq!(p.labels.get(Observation::EnlargedCardiomediastinum), Label::Positive);
    }

    #[test]
    fn linear_mode_freezes_encoder() {
        let mut m = tiny();
        let before = m.clone();
        let seqs = vec![vec![1, 4, 5], vec![1, 6, 7, 8], vec![1, 9]];
        let golds = vec![
            label_vec(&[(Observation::Edema, Label::Positive)]),
            label_vec(&[(Observation::Edema, Label::Negative)]),
            LabelVector::default(),
        ];
        let cfg = FinetuneConfig { lr: 1e-2, epochs: 3, batch_size: 2, ..Default::default() };
        finetune(&mut m, &seqs, &golds, &cfg).unwrap();
        for ((_, g, a), (_, _, b)) in m.params.tensors().into_iter().zip(before.params.tensors()) {
            if g != ParamGroup::Heads {
                assert_eq!(a, b);
            }
        }
        assert_ne!(m.params.head_w, before.params.head_w);
    }

    #[test]
    fn zero_epochs_leave_heads_unchanged() {
        let mut m = tiny();
        let before = m.clone();
        let cfg = FinetuneConfig { epochs: 0, ..Default::default() };
        finetune(&mut m, &[vec![1, 4]], &[LabelVector::default()], &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn full_mode_loss_decreases() {
        let mut m = tiny();
        let seqs = vec![vec![1, 4, 5], vec![1, 6, 7, 8], vec![1, 9, 4], vec![1, 10, 11]];
        let golds = vec![
            label_vec(&[(Observation::Edema, Label::Positive)]),
            label_vec(&[(Observation::Edema, Label::Negative)]),
            label_vec(&[(Observation::Edema, Label::Positive)]),
            label_vec(&[(Observation::Pneumonia, Label::Uncertain)]),
        ];
        let cfg = FinetuneConfig { mode: FinetuneMode::Full, lr: 1e-2, epochs: 30, batch_size: 4, ..Default::default() };
        let h = finetune(&mut m, &seqs, &golds, &cfg).unwrap();
        assert!(h.last().unwrap() < &h[0]);
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_positive_scaling(logits in prop::collection::vec(-5.0f64..5.0, N_HEAD_LOGITS), head in 0usize..14, c in 0.1f64..10.0) {
            let (off, k) = head_offsets()[head];
            let mut scaled = logits.clone();
            scaled[off..off + k].iter_mut().for_each(|x| *x *= c);
            prop_assert_eq!(predict_from_logits(&logits).labels, predict_from_logits(&scaled).labels);
        }

        #[test]
        fn no_finding_stays_two_class(logits in prop::collection::vec(-5.0f64..5.0, N_HEAD_LOGITS)) {
            let l = predict_from_logits(&logits).labels.get(Observation::NoFinding);
            prop_assert!(matches!(l, Label::Blank | Label::Positive));
        }
    }
}
