//! Per-task F1, weighted-F1 and the embedding similarity probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_jsonl, tokenize};
use crate::encoder::{Model, Truncation, Vocabulary};
use crate::labels::{Label, LabelVector, Observation};
use crate::tensor::Real;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("predictions and gold differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("schema error: {0}")]
    Schema(String),
}

/// Tasks entering weighted-F1; Blank is reported but never weighted.
pub const TASKS: [Label; 3] = [Label::Positive, Label::Negative, Label::Uncertain];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn count(preds: &[Label], golds: &[Label], class: Label) -> Result<Self, EvalError> {
        if preds.len() != golds.len() {
            return Err(EvalError::LengthMismatch(preds.len(), golds.len()));
        }
        let mut c = Self::default();
        for (p, g) in preds.iter().zip(golds) {
            match (*p == class, *g == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    /// F1 from counts; 0 when precision + recall is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if self.tp == 0 || denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

/// One-vs-rest F1 of `class` over one observation's labels.
pub fn per_task_f1(preds: &[Label], golds: &[Label], class: Label) -> Result<f64, EvalError> {
    Ok(Confusion::count(preds, golds, class)?.f1())
}

/// Gold-support-weighted mean F1 over positive, negative and uncertain
/// extraction; `None` when none of them has gold support.
pub fn weighted_f1(preds: &[Label], golds: &[Label]) -> Result<Option<f64>, EvalError> {
    let mut num = 0.0;
    let mut den = 0usize;
    for t in TASKS {
        let c = Confusion::count(preds, golds, t)?;
        num += c.support() as f64 * c.f1();
        den += c.support();
    }
    Ok((den > 0).then(|| num / den as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryScores {
    pub category: Observation,
    pub positive_f1: f64,
    pub negation_f1: f64,
    pub uncertain_f1: f64,
    pub blank_f1: f64,
    pub weighted_f1: Option<f64>,
    /// Gold support of blank, positive, negative, uncertain.
    pub support: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryScores>,
    /// Unweighted mean of the defined per-category weighted-F1 scores.
    pub average_weighted_f1: Option<f64>,
    pub n_reports: usize,
}

impl EvalReport {
    pub fn compute(preds: &[LabelVector], golds: &[LabelVector]) -> Result<Self, EvalError> {
        if preds.len() != golds.len() {
            return Err(EvalError::LengthMismatch(preds.len(), golds.len()));
        }
        let mut categories = Vec::with_capacity(Observation::ALL.len());
        for obs in Observation::ALL {
            let p: Vec<Label> = preds.iter().map(|v| v.get(obs)).collect();
            let g: Vec<Label> = golds.iter().map(|v| v.get(obs)).collect();
            let f = |c| per_task_f1(&p, &g, c);
            let mut support = [0usize; 4];
            for l in &g {
                support[l.index()] += 1;
            }
            categories.push(CategoryScores {
                category: obs,
                positive_f1: f(Label::Positive)?,
                negation_f1: f(Label::Negative)?,
                uncertain_f1: f(Label::Uncertain)?,
                blank_f1: f(Label::Blank)?,
                weighted_f1: weighted_f1(&p, &g)?,
                support,
            });
        }
        let defined: Vec<f64> = categories.iter().filter_map(|c| c.weighted_f1).collect();
        let average_weighted_f1 = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(Self { categories, average_weighted_f1, n_reports: preds.len() })
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = String::from("category,positive_f1,negation_f1,uncertain_f1,blank_f1,weighted_f1,support_blank,support_positive,support_negative,support_uncertain\n");
        for c in &self.categories {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
                c.category.name(),
                c.positive_f1,
                c.negation_f1,
                c.uncertain_f1,
                c.blank_f1,
                opt(c.weighted_f1),
                c.support[0],
                c.support[1],
                c.support[2],
                c.support[3]
            );
        }
        let _ = writeln!(s, "Average,,,,,{},,,,", opt(self.average_weighted_f1));
        s
    }

    pub fn to_table(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let mut s = format!("{:<28}{:>12}{:>12}{:>13}{:>10}{:>13}\n", "Category", "Positive F1", "Negation F1", "Uncertain F1", "Blank F1", "Weighted F1");
        for c in &self.categories {
            let _ = writeln!(
                s,
                "{:<28}{:>12.3}{:>12.3}{:>13.3}{:>10.3}{:>13}",
                c.category.name(),
                c.positive_f1,
                c.negation_f1,
                c.uncertain_f1,
                c.blank_f1,
                opt(c.weighted_f1)
            );
        }
        let _ = writeln!(s, "{:<28}{:>60}", "Average", opt(self.average_weighted_f1));
        s
    }
}

#[derive(Debug, Deserialize)]
struct LabeledRow {
    report_id: String,
    labels: Option<Vec<String>>,
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, LabelVector>, EvalError> {
    let file = std::fs::File::open(path).map_err(|e| EvalError::Schema(format!("{}: {e}", path.display())))?;
    let rows: Vec<LabeledRow> =
        read_jsonl(std::io::BufReader::new(file)).map_err(|e| EvalError::Schema(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(EvalError::Schema(format!("{}: no rows", path.display())));
    }
    let mut out = BTreeMap::new();
    for r in rows {
        let labels = r.labels.ok_or_else(|| EvalError::Schema(format!("{}: row {} has no labels", path.display(), r.report_id)))?;
        let v = LabelVector::from_strings(&labels).map_err(|e| EvalError::Schema(format!("{}: {}: {e}", path.display(), r.report_id)))?;
        if out.insert(r.report_id.clone(), v).is_some() {
            return Err(EvalError::Schema(format!("{}: duplicate report {}", path.display(), r.report_id)));
        }
    }
    Ok(out)
}

/// Scores a prediction JSONL against a gold JSONL, matched by report id.
pub fn evaluate(pred_file: &Path, gold_file: &Path) -> Result<EvalReport, EvalError> {
    let preds = read_labels(pred_file)?;
    let golds = read_labels(gold_file)?;
    if preds.len() != golds.len() || preds.keys().ne(golds.keys()) {
        return Err(EvalError::Schema("prediction and gold report ids differ".into()));
    }
    let p: Vec<LabelVector> = preds.into_values().collect();
    let g: Vec<LabelVector> = golds.into_values().collect();
    EvalReport::compute(&p, &g)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub sentence_a: String,
    pub sentence_b: String,
    pub cosine: f64,
}

/// Lemma ids of a free-text sentence.
pub fn sentence_ids(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let lemmas: Vec<String> = tokenize(&crate::corpus::normalize_text(text)).into_iter().map(|t| t.lemma).collect();
    vocab.encode(&lemmas, max_len, Truncation::Head)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Cosine similarity of the normalized CLS vectors of each pair.
pub fn similarity_probe<F: Real>(model: &Model<F>, vocab: &Vocabulary, pairs: &[(String, String)]) -> Vec<ProbeRow> {
    let max_len = model.config.max_seq_len;
    let seqs: Vec<Vec<u32>> = pairs.iter().flat_map(|(a, b)| [sentence_ids(a, vocab, max_len), sentence_ids(b, vocab, max_len)]).collect();
    let d = model.config.d_model;
    let cls = model.encode_batch(&seqs);
    let rows: Vec<Vec<f64>> = cls.chunks(d).map(|r| unit(r.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())).collect();
    pairs
        .iter()
        .enumerate()
        .map(|(i, (a, b))| ProbeRow {
            sentence_a: a.clone(),
            sentence_b: b.clone(),
            cosine: rows[2 * i].iter().zip(&rows[2 * i + 1]).map(|(x, y)| x * y).sum(),
        })
        .collect()
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
    let mut s = String::from("sentence_a,sentence_b,cosine\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6}", quote(&r.sentence_a), quote(&r.sentence_b), r.cosine);
    }
    s
}

/// `sentA<TAB>sentB` rows.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| EvalError::Schema(format!("pairs line {}: expected sentA<TAB>sentB", i + 1)))
        })
        .collect()
}
