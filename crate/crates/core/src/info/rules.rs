use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::lexicon::{lemma_phrase, ConceptMention, Polarity};
use super::InfoError;

pub const BUNDLED_RULES: &str = include_str!("../../data/rules.txt");

/// Maximum tokens an interior wildcard may absorb. A leading wildcard is
/// unbounded since it only fixes where the rule starts.
pub const MAX_WILDCARD: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Element {
    Wildcard,
    TermClass(Vec<Vec<String>>),
    Prep(BTreeSet<String>),
    Concept,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternRule {
    pub id: String,
    pub polarity: Polarity,
    pub elements: Vec<Element>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub rule_id: String,
    pub polarity: Polarity,
    /// Index into the sentence's concept mentions.
    pub mention: usize,
    /// Tokens consumed by TERM_CLASS and PREP elements.
    pub trigger_tokens: Vec<usize>,
}

fn parse_element(raw: &str) -> Result<Element, String> {
    let raw = raw.trim();
    if raw == "*" {
        Ok(Element::Wildcard)
    } else if raw == "CONCEPT" {
        Ok(Element::Concept)
    } else if let Some(inner) = raw.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
        let phrases: Vec<Vec<String>> = inner.split(',').map(lemma_phrase).collect();
        if phrases.iter().any(|p| p.is_empty()) {
            return Err(format!("empty phrase in {raw}"));
        }
        Ok(Element::TermClass(phrases))
    } else if let Some(inner) = raw.strip_prefix('<').and_then(|r| r.strip_suffix('>')) {
        let words: BTreeSet<String> = inner.split('|').map(|w| w.trim().to_lowercase()).collect();
        if words.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(format!("bad preposition set {raw}"));
        }
        Ok(Element::Prep(words))
    } else {
        Err(format!("unrecognized element {raw:?}"))
    }
}

impl PatternRule {
    /// Parses `<rule_id> <NEG|UNC> := elem + elem + ...`.
    pub fn parse(line: &str) -> Result<Self, String> {
        let (head, body) = line.split_once(":=").ok_or("missing ':='")?;
        let head: Vec<&str> = head.split_whitespace().collect();
        let (id, pol) = match head.as_slice() {
            [id, pol] => (id.to_string(), *pol),
            [pol] => (String::new(), *pol),
            _ => return Err("expected '<rule_id> <NEG|UNC>' before ':='".into()),
        };
        let polarity = match pol {
            "NEG" => Polarity::Negation,
            "UNC" => Polarity::Uncertainty,
            other => return Err(format!("unknown polarity {other:?}")),
        };
        let elements = body.split(" + ").map(parse_element).collect::<Result<Vec<_>, _>>()?;
        let concepts = elements.iter().filter(|e| **e == Element::Concept).count();
        if concepts != 1 {
            return Err(format!("expected exactly one CONCEPT, found {concepts}"));
        }
        if !elements.iter().any(|e| matches!(e, Element::TermClass(_))) {
            return Err("rule needs at least one term class".into());
        }
        Ok(Self { id, polarity, elements })
    }

    /// Tries to align the rule with CONCEPT bound to `mentions[target]`.
    /// Rules without a leading wildcard are anchored at the sentence start.
    fn align(&self, lemmas: &[&str], mentions: &[ConceptMention], target: usize) -> Option<Vec<usize>> {
        let leading_wild = matches!(self.elements.first(), Some(Element::Wildcard));
        let starts = if leading_wild { 0..=lemmas.len() } else { 0..=0 };
        for start in starts {
            let mut triggers = Vec::new();
            if self.step(usize::from(leading_wild), start, lemmas, &mentions[target], &mut triggers) {
                return Some(triggers);
            }
        }
        None
    }

    fn step(
        &self,
        elem: usize,
        pos: usize,
        lemmas: &[&str],
        target: &ConceptMention,
        triggers: &mut Vec<usize>,
    ) -> bool {
        let Some(element) = self.elements.get(elem) else {
            return true;
        };
        match element {
            Element::Wildcard => {
                let trailing = elem + 1 == self.elements.len();
                if trailing {
                    return true;
                }
                let max = (pos + MAX_WILDCARD).min(lemmas.len());
                (pos..=max).any(|p| self.step(elem + 1, p, lemmas, target, triggers))
            }
            Element::TermClass(phrases) => phrases.iter().any(|phrase| {
                let end = pos + phrase.len();
                if end > lemmas.len() || lemmas[pos..end].iter().zip(phrase).any(|(a, b)| a != b) {
                    return false;
                }
                let mark = triggers.len();
                triggers.extend(pos..end);
                if self.step(elem + 1, end, lemmas, target, triggers) {
                    true
                } else {
                    triggers.truncate(mark);
                    false
                }
            }),
            Element::Prep(words) => {
                if pos < lemmas.len() && words.contains(lemmas[pos]) {
                    triggers.push(pos);
                    if self.step(elem + 1, pos + 1, lemmas, target, triggers) {
                        return true;
                    }
                    triggers.pop();
                }
                false
            }
            Element::Concept => target.start == pos && self.step(elem + 1, target.end, lemmas, target, triggers),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    pub rules: Vec<PatternRule>,
}

impl RuleSet {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_RULES).expect("bundled rules are valid")
    }

    pub fn parse(text: &str) -> Result<Self, InfoError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut rule =
                PatternRule::parse(line).map_err(|msg| InfoError::MalformedRule { line: i + 1, msg })?;
            if rule.id.is_empty() {
                rule.id = format!("rule_{}", i + 1);
            }
            rules.push(rule);
        }
        Ok(Self { rules })
    }

    /// Every (rule, disease mention) pair that aligns. Only mentions with an
    /// observation bind CONCEPT.
    pub fn apply<S: AsRef<str>>(&self, lemmas: &[S], mentions: &[ConceptMention]) -> Vec<RuleMatch> {
        let lemmas: Vec<&str> = lemmas.iter().map(|s| s.as_ref()).collect();
        let mut out = Vec::new();
        for rule in &self.rules {
            for (i, m) in mentions.iter().enumerate() {
                if !m.is_disease() {
                    continue;
                }
                if let Some(trigger_tokens) = rule.align(&lemmas, mentions, i) {
                    out.push(RuleMatch {
                        rule_id: rule.id.clone(),
                        polarity: rule.polarity,
                        mention: i,
                        trigger_tokens,
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_rules_rejected() {
        for bad in [
            "r NEG := * + {clear} + <of> + *",
            "r NEG := * + CONCEPT + CONCEPT + {clear}",
            "r NEG := * + <of> + CONCEPT",
            "r XYZ := {clear} + CONCEPT",
            "r NEG := {clear} + [of] + CONCEPT",
            "r NEG {clear} + CONCEPT",
        ] {
            match RuleSet::parse(bad) {
                Err(InfoError::MalformedRule { line: 1, .. }) => {}
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn bundled_rules_parse() {
        let r = RuleSet::bundled();
        assert_eq!(r.rules.len(), 6);
        assert!(r.rules.iter().all(|r| !r.id.is_empty()));
    }

    #[test]
    fn interior_wildcard_is_bounded() {
        let rules = RuleSet::parse("r NEG := * + {clear} + <of> + * + CONCEPT").unwrap();
        let mention = |start| ConceptMention {
            concept_id: "edema".into(),
            observation: Some(crate::labels::Observation::Edema),
            phrase: "edema".into(),
            start,
            end: start + 1,
        };
        let mut toks = vec!["clear", "of"];
        toks.extend(std::iter::repeat_n("x", MAX_WILDCARD));
        toks.push("edema");
        assert_eq!(rules.apply(&toks, &[mention(toks.len() - 1)]).len(), 1);
        toks.insert(2, "x");
        assert!(rules.apply(&toks, &[mention(toks.len() - 1)]).is_empty());
    }
}
