//! Disease concepts, negation and uncertainty: dictionary matching plus
//! pattern rules. The resulting protected token sets are what augmentation
//! must never delete.

mod lexicon;
mod rules;
mod trie;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lexicon::{
    lemma_phrase, Concept, ConceptLexicon, ConceptMention, FactualityLexicon, FactualitySpan, Polarity,
    BUNDLED_CONCEPTS, BUNDLED_FACTUALITY, MAX_CUE_TOKENS,
};
pub use rules::{Element, PatternRule, RuleMatch, RuleSet, BUNDLED_RULES, MAX_WILDCARD};
pub use trie::PhraseTrie;

use crate::corpus::{Report, Sentence};
use crate::labels::{Label, Observation};

#[derive(Debug, Error)]
pub enum InfoError {
    #[error("lexicon line {line}: {msg}")]
    Lexicon { line: usize, msg: String },
    #[error("malformed rule at line {line}: {msg}")]
    MalformedRule { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factuality {
    Affirmed,
    Negated,
    Uncertain,
}

impl Factuality {
    /// Collapses negated and uncertain into one "not affirmed" bucket.
    pub fn is_affirmed(self) -> bool {
        self == Factuality::Affirmed
    }

    pub fn as_label(self) -> Label {
        match self {
            Factuality::Affirmed => Label::Positive,
            Factuality::Negated => Label::Negative,
            Factuality::Uncertain => Label::Uncertain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceAnnotation {
    pub report_id: String,
    pub sentence_index: usize,
    pub section: String,
    pub concept_mentions: Vec<ConceptMention>,
    pub factuality: Factuality,
    pub matched_rule_ids: Vec<String>,
    pub factuality_spans: Vec<FactualitySpan>,
    pub protected_token_indices: BTreeSet<usize>,
}

impl SentenceAnnotation {
    /// Sorted, de-duplicated ids of disease concepts in the sentence.
    pub fn disease_concepts(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self
            .concept_mentions
            .iter()
            .filter(|m| m.is_disease())
            .map(|m| m.concept_id.as_str())
            .collect();
        set.into_iter().collect()
    }

    pub fn has_disease(&self) -> bool {
        self.concept_mentions.iter().any(ConceptMention::is_disease)
    }

    /// Sentences without a disease mention are skipped by sentence-level
    /// sampling.
    pub fn eligible_for_sampling(&self) -> bool {
        self.has_disease()
    }

    /// (observation, label) findings contributed by this sentence.
    pub fn findings(&self) -> impl Iterator<Item = (Observation, Label)> + '_ {
        let label = self.factuality.as_label();
        self.concept_mentions.iter().filter_map(move |m| m.observation.map(|o| (o, label)))
    }
}

/// Bundled or user-supplied lexicons and rules.
#[derive(Debug, Clone)]
pub struct InfoPreservation {
    pub concepts: ConceptLexicon,
    pub factuality: FactualityLexicon,
    pub rules: RuleSet,
}

impl Default for InfoPreservation {
    fn default() -> Self {
        Self::bundled()
    }
}

impl InfoPreservation {
    pub fn bundled() -> Self {
        Self {
            concepts: ConceptLexicon::bundled(),
            factuality: FactualityLexicon::bundled(),
            rules: RuleSet::bundled(),
        }
    }

    /// Loads any of the three resources from disk, falling back to the
    /// bundled copy for those not given.
    pub fn load(concepts: Option<&Path>, factuality: Option<&Path>, rules: Option<&Path>) -> Result<Self, InfoError> {
        let mut out = Self::bundled();
        if let Some(p) = concepts {
            let source = p.file_stem().and_then(|s| s.to_str()).unwrap_or("user");
            out.concepts = ConceptLexicon::from_tsv(&std::fs::read_to_string(p)?, source)?;
        }
        if let Some(p) = factuality {
            out.factuality = FactualityLexicon::from_tsv(&std::fs::read_to_string(p)?)?;
        }
        if let Some(p) = rules {
            out.rules = RuleSet::parse(&std::fs::read_to_string(p)?)?;
        }
        Ok(out)
    }

    pub fn match_concepts(&self, sentence: &Sentence) -> Vec<ConceptMention> {
        let lemmas: Vec<&str> = sentence.lemmas().collect();
        self.concepts.match_lemmas(&lemmas)
    }

    pub fn match_factuality_terms(&self, sentence: &Sentence) -> Vec<FactualitySpan> {
        let lemmas: Vec<&str> = sentence.lemmas().collect();
        self.factuality.match_lemmas(&lemmas)
    }

    pub fn apply_rules(&self, sentence: &Sentence, mentions: &[ConceptMention]) -> Vec<RuleMatch> {
        let lemmas: Vec<&str> = sentence.lemmas().collect();
        self.rules.apply(&lemmas, mentions)
    }

    pub fn annotate_sentence(&self, sentence: &Sentence) -> SentenceAnnotation {
        let lemmas: Vec<&str> = sentence.lemmas().collect();
        self.annotate_lemmas(&lemmas, &sentence.report_id, sentence.index, &sentence.section)
    }

    pub fn annotate_lemmas<S: AsRef<str>>(
        &self,
        lemmas: &[S],
        report_id: &str,
        sentence_index: usize,
        section: &str,
    ) -> SentenceAnnotation {
        let concept_mentions = self.concepts.match_lemmas(lemmas);
        let factuality_spans = self.factuality.match_lemmas(lemmas);
        let rule_matches = self.rules.apply(lemmas, &concept_mentions);

        let fired = |p: Polarity| {
            rule_matches.iter().any(|m| m.polarity == p) || factuality_spans.iter().any(|s| s.polarity == p)
        };
        let factuality = if fired(Polarity::Negation) {
            Factuality::Negated
        } else if fired(Polarity::Uncertainty) {
            Factuality::Uncertain
        } else {
            Factuality::Affirmed
        };

        let mut protected = BTreeSet::new();
        for m in &concept_mentions {
            protected.extend(m.start..m.end);
        }
        for s in &factuality_spans {
            protected.extend(s.start..s.end);
        }
        let mut matched_rule_ids = Vec::new();
        for m in &rule_matches {
            protected.extend(m.trigger_tokens.iter().copied());
            if !matched_rule_ids.contains(&m.rule_id) {
                matched_rule_ids.push(m.rule_id.clone());
            }
        }

        SentenceAnnotation {
            report_id: report_id.to_string(),
            sentence_index,
            section: section.to_string(),
            concept_mentions,
            factuality,
            matched_rule_ids,
            factuality_spans,
            protected_token_indices: protected,
        }
    }

    pub fn annotate_report(&self, report: &Report) -> Vec<SentenceAnnotation> {
        report.sentences.iter().map(|s| self.annotate_sentence(s)).collect()
    }

    pub fn annotate_corpus(&self, reports: &[Report]) -> BTreeMap<String, Vec<SentenceAnnotation>> {
        reports
            .par_iter()
            .map(|r| (r.report_id.clone(), self.annotate_report(r)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }
}
