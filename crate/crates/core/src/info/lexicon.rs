use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::trie::PhraseTrie;
use super::InfoError;
use crate::corpus::tokenize;
use crate::labels::Observation;

pub const BUNDLED_CONCEPTS: &str = include_str!("../../data/concepts.tsv");
pub const BUNDLED_FACTUALITY: &str = include_str!("../../data/factuality.tsv");

/// Tokenizes and lemmatizes a phrase the same way sentences are processed.
pub fn lemma_phrase(phrase: &str) -> Vec<String> {
    tokenize(phrase).into_iter().map(|t| t.lemma).collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            None
        } else {
            Some((i + 1, line.split('\t').collect()))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub id: String,
    /// Observation slot this concept feeds; `None` for anatomy and other
    /// protected-only terms.
    pub observation: Option<Observation>,
    pub phrases: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMention {
    pub concept_id: String,
    pub observation: Option<Observation>,
    /// Lemma phrase that matched.
    pub phrase: String,
    /// Token range `[start, end)`.
    pub start: usize,
    pub end: usize,
}

impl ConceptMention {
    pub fn is_disease(&self) -> bool {
        self.observation.is_some()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConceptLexicon {
    pub source: String,
    concepts: Vec<Concept>,
    index: BTreeMap<String, usize>,
    trie: PhraseTrie<usize>,
}

impl ConceptLexicon {
    pub fn new(source: &str) -> Self {
        Self {
            source: source.to_string(),
            ..Default::default()
        }
    }

    pub fn bundled() -> Self {
        Self::from_tsv(BUNDLED_CONCEPTS, "radlex-subset").expect("bundled concept lexicon is valid")
    }

    /// Parses `concept_id<TAB>phrase[<TAB>observation]` lines.
    pub fn from_tsv(text: &str, source: &str) -> Result<Self, InfoError> {
        let mut lex = Self::new(source);
        for (line, cols) in data_lines(text) {
            let bad = |msg: String| InfoError::Lexicon { line, msg };
            if cols.len() < 2 {
                return Err(bad("expected concept_id<TAB>phrase".into()));
            }
            let observation = match cols.get(2).map(|s| s.trim()) {
                None | Some("") | Some("-") => None,
                Some(name) => Some(name.parse::<Observation>().map_err(|e| bad(e.to_string()))?),
            };
            lex.add_phrase(cols[0].trim(), cols[1].trim(), observation)
                .map_err(|e| bad(e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn add_phrase(
        &mut self,
        concept_id: &str,
        phrase: &str,
        observation: Option<Observation>,
    ) -> Result<(), InfoError> {
        if concept_id.is_empty() {
            return Err(InfoError::Invalid("empty concept id".into()));
        }
        let lemmas = lemma_phrase(phrase);
        if lemmas.is_empty() {
            return Err(InfoError::Invalid(format!("zero-length phrase for {concept_id}")));
        }
        let idx = match self.index.get(concept_id) {
            Some(&i) => {
                let existing = self.concepts[i].observation;
                if observation.is_some() && existing.is_some() && existing != observation {
                    return Err(InfoError::Invalid(format!(
                        "concept {concept_id} mapped to two observations"
                    )));
                }
                if existing.is_none() {
                    self.concepts[i].observation = observation;
                }
                i
            }
            None => {
                self.concepts.push(Concept {
                    id: concept_id.to_string(),
                    observation,
                    phrases: Vec::new(),
                });
                self.index.insert(concept_id.to_string(), self.concepts.len() - 1);
                self.concepts.len() - 1
            }
        };
        if let Some(prev) = self.trie.insert(&lemmas, idx) {
            if prev != idx {
                return Err(InfoError::Invalid(format!(
                    "phrase {phrase:?} assigned to both {} and {concept_id}",
                    self.concepts[prev].id
                )));
            }
        } else {
            self.concepts[idx].phrases.push(lemmas);
        }
        Ok(())
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn concept(&self, id: &str) -> Option<&Concept> {
        self.index.get(id).map(|&i| &self.concepts[i])
    }

    pub fn phrase_count(&self) -> usize {
        self.trie.len()
    }

    /// Greedy longest-match over a lemma sequence.
    pub fn match_lemmas<S: AsRef<str>>(&self, lemmas: &[S]) -> Vec<ConceptMention> {
        self.trie
            .scan(lemmas)
            .into_iter()
            .map(|(start, end, &idx)| {
                let c = &self.concepts[idx];
                ConceptMention {
                    concept_id: c.id.clone(),
                    observation: c.observation,
                    phrase: lemmas[start..end]
                        .iter()
                        .map(|s| s.as_ref())
                        .collect::<Vec<_>>()
                        .join(" "),
                    start,
                    end,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negation,
    Uncertainty,
}

impl std::str::FromStr for Polarity {
    type Err = InfoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "negation" | "neg" => Ok(Polarity::Negation),
            "uncertainty" | "unc" => Ok(Polarity::Uncertainty),
            other => Err(InfoError::Invalid(format!("unknown polarity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactualitySpan {
    pub polarity: Polarity,
    pub phrase: String,
    pub start: usize,
    pub end: usize,
}

pub const MAX_CUE_TOKENS: usize = 4;

#[derive(Debug, Clone, Default)]
pub struct FactualityLexicon {
    pub negation_terms: BTreeSet<Vec<String>>,
    pub uncertainty_terms: BTreeSet<Vec<String>>,
    /// Source tag per phrase (e.g. "core", "extension").
    pub tags: BTreeMap<Vec<String>, String>,
    trie: PhraseTrie<Polarity>,
}

impl FactualityLexicon {
    pub fn bundled() -> Self {
        Self::from_tsv(BUNDLED_FACTUALITY).expect("bundled factuality lexicon is valid")
    }

    /// Parses `polarity<TAB>phrase[<TAB>tag]` lines.
    pub fn from_tsv(text: &str) -> Result<Self, InfoError> {
        let mut lex = Self::default();
        for (line, cols) in data_lines(text) {
            let bad = |msg: String| InfoError::Lexicon { line, msg };
            if cols.len() < 2 {
                return Err(bad("expected polarity<TAB>phrase".into()));
            }
            let polarity: Polarity = cols[0].parse().map_err(|e: InfoError| bad(e.to_string()))?;
            let tag = cols.get(2).map(|s| s.trim()).unwrap_or("");
            lex.add(polarity, cols[1].trim(), tag).map_err(|e| bad(e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn add(&mut self, polarity: Polarity, phrase: &str, tag: &str) -> Result<(), InfoError> {
        let lemmas = lemma_phrase(phrase);
        if lemmas.is_empty() || lemmas.len() > MAX_CUE_TOKENS {
            return Err(InfoError::Invalid(format!(
                "cue {phrase:?} must be 1-{MAX_CUE_TOKENS} tokens"
            )));
        }
        let (own, other) = match polarity {
            Polarity::Negation => (&mut self.negation_terms, &self.uncertainty_terms),
            Polarity::Uncertainty => (&mut self.uncertainty_terms, &self.negation_terms),
        };
        if other.contains(&lemmas) {
            return Err(InfoError::Invalid(format!(
                "cue {phrase:?} is both a negation and an uncertainty term"
            )));
        }
        own.insert(lemmas.clone());
        if !tag.is_empty() {
            self.tags.insert(lemmas.clone(), tag.to_string());
        }
        self.trie.insert(&lemmas, polarity);
        Ok(())
    }

    pub fn match_lemmas<S: AsRef<str>>(&self, lemmas: &[S]) -> Vec<FactualitySpan> {
        self.trie
            .scan(lemmas)
            .into_iter()
            .map(|(start, end, &polarity)| FactualitySpan {
                polarity,
                phrase: lemmas[start..end]
                    .iter()
                    .map(|s| s.as_ref())
                    .collect::<Vec<_>>()
                    .join(" "),
                start,
                end,
            })
            .collect()
    }
}
