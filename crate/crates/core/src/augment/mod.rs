//! Fact-preserving text views and the three pair-sampling procedures.

mod sampling;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sampling::{
    AnnotatedCorpus, AnchorPlan, BatchMeta, CandidatePlan, ContrastiveBatch, DocumentScope, Granularity,
    PairSampler, SamplerConfig, SentenceRef, SentenceScope, Unit, unit_id,
};

use crate::corpus::{Report, Sentence};
use crate::info::SentenceAnnotation;

pub const BUNDLED_SYNONYMS: &str = include_str!("../../data/synonyms.tsv");

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("synonym table line {line}: {msg}")]
    SynonymTable { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub p_word_delete: f64,
    pub p_span_delete: f64,
    pub p_reorder: f64,
    pub p_synonym: f64,
    pub max_span_len: usize,
    #[serde(skip)]
    pub synonym_table: BTreeMap<String, Vec<String>>,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            p_word_delete: 0.2,
            p_span_delete: 0.2,
            p_reorder: 0.2,
            p_synonym: 0.2,
            max_span_len: 3,
            synonym_table: bundled_synonyms(),
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            p_word_delete: 0.0,
            p_span_delete: 0.0,
            p_reorder: 0.0,
            p_synonym: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, p) in [
            ("p_word_delete", self.p_word_delete),
            ("p_span_delete", self.p_span_delete),
            ("p_reorder", self.p_reorder),
            ("p_synonym", self.p_synonym),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::InvalidPolicy(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.max_span_len == 0 {
            return Err(AugmentError::InvalidPolicy("max_span_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parses `lemma<TAB>replacement` lines; each line is one direction.
pub fn parse_synonyms(text: &str) -> Result<BTreeMap<String, Vec<String>>, AugmentError> {
    let mut table: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| AugmentError::SynonymTable { line: i + 1, msg: msg.into() };
        let (from, to) = line.split_once('\t').ok_or_else(|| bad("expected lemma<TAB>replacement"))?;
        let (from, to) = (from.trim(), to.trim());
        if from.is_empty() || to.is_empty() || from.contains(' ') || to.contains(' ') {
            return Err(bad("entries must be single tokens"));
        }
        let list = table.entry(from.to_string()).or_default();
        if !list.iter().any(|t| t == to) {
            list.push(to.to_string());
        }
    }
    Ok(table)
}

pub fn bundled_synonyms() -> BTreeMap<String, Vec<String>> {
    parse_synonyms(BUNDLED_SYNONYMS).expect("bundled synonym table is valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewToken {
    pub surface: String,
    pub lemma: String,
    /// (sentence position within the source, token index within the sentence).
    pub origin: (usize, usize),
}

/// An augmented rendering of a sentence or document.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TextView {
    pub tokens: Vec<ViewToken>,
}

impl TextView {
    pub fn from_sentence(sentence: &Sentence, position: usize) -> Self {
        Self {
            tokens: sentence
                .tokens
                .iter()
                .enumerate()
                .map(|(i, t)| ViewToken {
                    surface: t.surface.clone(),
                    lemma: t.lemma.clone(),
                    origin: (position, i),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.lemma.as_str())
    }

    /// Space-joined surfaces with closing punctuation attached to the
    /// preceding token.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let attach = matches!(t.surface.as_str(), "." | "," | ";" | ":" | "?" | "!" | ")");
            if !out.is_empty() && !attach && !out.ends_with('(') {
                out.push(' ');
            }
            out.push_str(&t.surface);
        }
        out
    }
}

/// Deletes non-protected tokens of one sentence: independent word deletion,
/// then at most one span over the survivors. Falls back to the full sentence
/// if nothing would remain.
fn delete_tokens<R: Rng + ?Sized>(
    n: usize,
    protected: impl Fn(usize) -> bool,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..n)
        .filter(|&i| protected(i) || !rng.gen_bool(policy.p_word_delete))
        .collect();
    if rng.gen_bool(policy.p_span_delete) {
        let deletable: Vec<usize> = (0..keep.len()).filter(|&j| !protected(keep[j])).collect();
        if let Some(&start) = deletable.choose(rng) {
            let len = rng.gen_range(1..=policy.max_span_len);
            let mut end = start;
            while end < keep.len() && end - start < len && !protected(keep[end]) {
                end += 1;
            }
            keep.drain(start..end);
        }
    }
    if keep.is_empty() {
        (0..n).collect()
    } else {
        keep
    }
}

pub fn augment_sentence<R: Rng + ?Sized>(
    sentence: &Sentence,
    annotation: &SentenceAnnotation,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> TextView {
    let full = TextView::from_sentence(sentence, 0);
    let keep = delete_tokens(
        sentence.tokens.len(),
        |i| annotation.protected_token_indices.contains(&i),
        policy,
        rng,
    );
    TextView {
        tokens: keep.into_iter().map(|i| full.tokens[i].clone()).collect(),
    }
}

/// Document view over `sentences` (indices into the report) with word/span
/// deletion per sentence, synonym substitution on unprotected tokens and
/// whole-sentence reordering.
pub fn augment_document<R: Rng + ?Sized>(
    report: &Report,
    annotations: &[SentenceAnnotation],
    sentences: &[usize],
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> TextView {
    let mut blocks: Vec<Vec<ViewToken>> = Vec::with_capacity(sentences.len());
    for (pos, &si) in sentences.iter().enumerate() {
        let sentence = &report.sentences[si];
        let ann = &annotations[si];
        let full = TextView::from_sentence(sentence, pos);
        let keep = delete_tokens(
            sentence.tokens.len(),
            |i| ann.protected_token_indices.contains(&i),
            policy,
            rng,
        );
        let mut block = Vec::with_capacity(keep.len());
        for i in keep {
            let mut tok = full.tokens[i].clone();
            if !ann.protected_token_indices.contains(&i) {
                if let Some(alts) = policy.synonym_table.get(&tok.lemma) {
                    if rng.gen_bool(policy.p_synonym) {
                        let alt = alts.choose(rng).expect("synonym lists are non-empty");
                        tok.surface = alt.clone();
                        tok.lemma = alt.clone();
                    }
                }
            }
            block.push(tok);
        }
        blocks.push(block);
    }
    if rng.gen_bool(policy.p_reorder) {
        blocks.shuffle(rng);
    }
    TextView {
        tokens: blocks.into_iter().flatten().collect(),
    }
}

/// True when every protected token of the source survives in the view, in
/// source order. `protected` lists (sentence position, token index) pairs.
pub fn preserves_facts(view: &TextView, protected: &[(usize, usize)]) -> bool {
    let mut last: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &view.tokens {
        if let Some(prev) = last.insert(t.origin.0, t.origin.1) {
            if prev >= t.origin.1 {
                return false;
            }
        }
    }
    let present: std::collections::BTreeSet<(usize, usize)> = view.tokens.iter().map(|t| t.origin).collect();
    protected.iter().all(|p| present.contains(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_report, tokenize};
    use crate::info::InfoPreservation;
    use crate::rng;
    use proptest::prelude::*;

    fn sentence(text: &str) -> Sentence {
        Sentence {
            report_id: "r".into(),
            index: 0,
            section: "FINDINGS".into(),
            text: text.into(),
            tokens: tokenize(text),
        }
    }

    fn protected_of(ann: &SentenceAnnotation, pos: usize) -> Vec<(usize, usize)> {
        ann.protected_token_indices.iter().map(|&i| (pos, i)).collect()
    }

    #[test]
    fn focal_consolidation_survives() {
        let s = sentence("definite focal consolidation is seen in left side of lungs");
        let ann = InfoPreservation::bundled().annotate_sentence(&s);
        let policy = AugmentationPolicy {
            p_word_delete: 0.9,
            p_span_delete: 1.0,
            ..AugmentationPolicy::default()
        };
        for seed in 0..200 {
            let v = augment_sentence(&s, &ann, &policy, &mut rng::seeded(seed));
            assert!(v.text().contains("focal consolidation"), "{}", v.text());
        }
    }

    #[test]
    fn zero_policy_is_identity() {
        let s = sentence("heart size is normal.");
        let ann = InfoPreservation::bundled().annotate_sentence(&s);
        let v = augment_sentence(&s, &ann, &AugmentationPolicy::identity(), &mut rng::seeded(1));
        assert_eq!(v, TextView::from_sentence(&s, 0));
        assert_eq!(v.text(), "heart size is normal.");
    }

    #[test]
    fn fully_protected_is_identity() {
        let s = sentence("pleural effusion");
        let ann = InfoPreservation::bundled().annotate_sentence(&s);
        assert_eq!(ann.protected_token_indices.len(), 2);
        let policy = AugmentationPolicy {
            p_word_delete: 1.0,
            p_span_delete: 1.0,
            ..AugmentationPolicy::default()
        };
        let v = augment_sentence(&s, &ann, &policy, &mut rng::seeded(3));
        assert_eq!(v.text(), "pleural effusion");
    }

    #[test]
    fn nothing_protected_everything_deleted_falls_back() {
        let s = sentence("heart size normal");
        let ann = InfoPreservation::bundled().annotate_sentence(&s);
        let ann = SentenceAnnotation {
            protected_token_indices: Default::default(),
            ..ann
        };
        let policy = AugmentationPolicy {
            p_word_delete: 1.0,
            ..AugmentationPolicy::identity()
        };
        let v = augment_sentence(&s, &ann, &policy, &mut rng::seeded(3));
        assert_eq!(v.len(), 3);
    }

    fn sample() -> (Report, Vec<SentenceAnnotation>) {
        let report = parse_report(crate::corpus::tests::SAMPLE_REPORT, "r1", "p1").unwrap();
        let anns = InfoPreservation::bundled().annotate_report(&report);
        (report, anns)
    }

    #[test]
    fn reorder_preserves_sentence_multiset() {
        let (report, anns) = sample();
        let idx: Vec<usize> = (0..report.sentences.len()).collect();
        let policy = AugmentationPolicy {
            p_reorder: 1.0,
            ..AugmentationPolicy::identity()
        };
        let mut seen_permutation = false;
        for seed in 0..20 {
            let v = augment_document(&report, &anns, &idx, &policy, &mut rng::seeded(seed));
            let mut blocks: BTreeMap<usize, Vec<String>> = BTreeMap::new();
            for t in &v.tokens {
                blocks.entry(t.origin.0).or_default().push(t.surface.clone());
            }
            for (pos, toks) in &blocks {
                let orig: Vec<String> = report.sentences[*pos].tokens.iter().map(|t| t.surface.clone()).collect();
                assert_eq!(toks, &orig);
            }
            assert_eq!(blocks.len(), idx.len());
            let order: Vec<usize> = v.tokens.iter().map(|t| t.origin.0).collect();
            seen_permutation |= order.windows(2).any(|w| w[0] > w[1]);
        }
        assert!(seen_permutation);
    }

    #[test]
    fn document_zero_policy_is_identity() {
        let (report, anns) = sample();
        let idx: Vec<usize> = (0..report.sentences.len()).collect();
        let v = augment_document(&report, &anns, &idx, &AugmentationPolicy::identity(), &mut rng::seeded(9));
        let expected: Vec<&str> = report.sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str())).collect();
        let got: Vec<&str> = v.tokens.iter().map(|t| t.surface.as_str()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn sample_seed7_keeps_impression_facts() {
        let (report, anns) = sample();
        let idx: Vec<usize> = (0..report.sentences.len()).collect();
        let v = augment_document(&report, &anns, &idx, &AugmentationPolicy::default(), &mut rng::seeded(7));
        let imp = report.sentences.iter().position(|s| s.section == "IMPRESSION").unwrap();
        let imp_tokens: Vec<&str> = v
            .tokens
            .iter()
            .filter(|t| t.origin.0 == imp)
            .map(|t| t.surface.as_str())
            .collect();
        assert!(imp_tokens.contains(&"No"), "{imp_tokens:?}");
        assert!(imp_tokens.contains(&"pneumonia"), "{imp_tokens:?}");
        let protected: Vec<(usize, usize)> = anns.iter().enumerate().flat_map(|(p, a)| protected_of(a, p)).collect();
        assert!(preserves_facts(&v, &protected));
        assert_eq!(v.text(), SAMPLE_SEED7_GOLDEN);
    }

    // Recorded from the first run; guards against silent changes to the draw order.
    const SAMPLE_SEED7_GOLDEN: &str = "chest CT performed in __deid__ demonstrated no evidence of a right hilum mass, the observed probably owing to a combination a mild mild scoliosis and a conspicuous pulmonary vascularity. The right hilum is enlarged compared to the left hilum but a similar and configuration contrast to a baseline __deid__ __deid__. Lungs are hyperexpanded but grossly clear of pleural effusions. history: 80 years of age, male. No radiographic of pneumonia of the chest. Heart size and mediastinal contours are unremarkable CHEST, __deid__";

    #[test]
    fn synonym_table_loads() {
        let t = bundled_synonyms();
        assert!(t.len() >= 40);
        assert!(t["see"].contains(&"observe".to_string()));
        assert!(parse_synonyms("a b\tc\n").is_err());
    }

    #[test]
    fn invalid_policy_rejected() {
        let p = AugmentationPolicy { p_reorder: 1.5, ..Default::default() };
        assert!(p.validate().is_err());
        let p = AugmentationPolicy { max_span_len: 0, ..Default::default() };
        assert!(p.validate().is_err());
    }

    const WORDS: [&str; 14] = [
        "no", "evidence", "of", "pneumonia", "the", "lung", "is", "clear", "could", "be", "edema", "seen",
        "small", ".",
    ];

    proptest! {
        #[test]
        fn views_preserve_facts(
            idx in proptest::collection::vec(0usize..WORDS.len(), 1..25),
            seed in any::<u64>(),
            pw in 0.0f64..=1.0,
            ps in 0.0f64..=1.0,
            span in 1usize..5,
        ) {
            let text = idx.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
            let s = sentence(&text);
            let ann = InfoPreservation::bundled().annotate_sentence(&s);
            let policy = AugmentationPolicy { p_word_delete: pw, p_span_delete: ps, max_span_len: span, ..Default::default() };
            let v = augment_sentence(&s, &ann, &policy, &mut rng::seeded(seed));
            prop_assert!(!v.is_empty());
            prop_assert!(v.len() <= s.tokens.len());
            prop_assert!(preserves_facts(&v, &protected_of(&ann, 0)));
            prop_assert_eq!(&v, &augment_sentence(&s, &ann, &policy, &mut rng::seeded(seed)));
        }

        #[test]
        fn document_views_preserve_facts(seed in any::<u64>(), p in 0.0f64..=1.0) {
            let (report, anns) = sample();
            let idx: Vec<usize> = (0..report.sentences.len()).collect();
            let policy = AugmentationPolicy { p_word_delete: p, p_span_delete: p, p_reorder: p, p_synonym: p, ..Default::default() };
            let v = augment_document(&report, &anns, &idx, &policy, &mut rng::seeded(seed));
            let protected: Vec<(usize, usize)> = anns.iter().enumerate().flat_map(|(p, a)| protected_of(a, p)).collect();
            prop_assert!(preserves_facts(&v, &protected));
            let total: usize = report.sentences.iter().map(|s| s.tokens.len()).sum();
            prop_assert!(v.len() <= total);
        }
    }
}
