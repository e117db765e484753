//! Lemma vocabulary with reserved ids, and id-sequence construction.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::corpus::DEID_TOKEN;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const DEID_ID: u32 = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[UNK]", DEID_TOKEN];

/// Which end of an over-long sequence is kept. CLS is always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    #[default]
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    lemmas: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let lemmas: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = lemmas.iter().enumerate().map(|(i, l)| (l.clone(), i as u32)).collect();
        Self { lemmas, index }
    }
}

impl Vocabulary {
    /// Lemmas seen at least `min_count` times, most frequent first, ties
    /// broken alphabetically.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(lemmas: I, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in lemmas {
            *counts.entry(l).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(l, c)| *c >= min_count.max(1) && !RESERVED.contains(l))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut v = Self::default();
        for (l, _) in ranked {
            if max_size.is_some_and(|m| v.len() >= m) {
                break;
            }
            v.push(l);
        }
        v
    }

    fn push(&mut self, lemma: &str) {
        self.index.insert(lemma.to_string(), self.lemmas.len() as u32);
        self.lemmas.push(lemma.to_string());
    }

    pub fn len(&self) -> usize {
        self.lemmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lemmas.is_empty()
    }

    pub fn id(&self, lemma: &str) -> u32 {
        self.index.get(lemma).copied().unwrap_or(UNK_ID)
    }

    pub fn lemma(&self, id: u32) -> Option<&str> {
        self.lemmas.get(id as usize).map(String::as_str)
    }

    /// `[CLS] + ids`, cut to `max_len` from the chosen end.
    pub fn encode<S: AsRef<str>>(&self, lemmas: &[S], max_len: usize, trunc: Truncation) -> Vec<u32> {
        let body = max_len.saturating_sub(1);
        let ids: Vec<u32> = lemmas.iter().map(|l| self.id(l.as_ref())).collect();
        let kept = if ids.len() <= body {
            &ids[..]
        } else {
            match trunc {
                Truncation::Head => &ids[..body],
                Truncation::Tail => &ids[ids.len() - body..],
            }
        };
        let mut out = Vec::with_capacity(kept.len() + 1);
        out.push(CLS_ID);
        out.extend_from_slice(kept);
        out
    }

    pub fn to_tsv(&self) -> String {
        self.lemmas.iter().enumerate().map(|(i, l)| format!("{l}\t{i}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self, EncoderError> {
        let mut lemmas = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| EncoderError::Vocab(format!("line {}: {m}", n + 1));
            let (l, id) = line.rsplit_once('\t').ok_or_else(|| bad("expected lemma<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != lemmas.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            lemmas.push(l.to_string());
        }
        if lemmas.len() < RESERVED.len() || lemmas[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(EncoderError::Vocab("reserved ids missing".into()));
        }
        let index = lemmas.iter().enumerate().map(|(i, l)| (l.clone(), i as u32)).collect();
        Ok(Self { lemmas, index })
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids() {
        let v = Vocabulary::build(["effusion", "effusion", "no", DEID_TOKEN], 1, None);
        assert_eq!(v.id("[PAD]"), PAD_ID);
        assert_eq!(v.id(DEID_TOKEN), DEID_ID);
        assert_eq!(v.id("effusion"), 4);
        assert_eq!(v.id("no"), 5);
        assert_eq!(v.id("zebra"), UNK_ID);
    }

    #[test]
    fn truncation_keeps_cls() {
        let v = Vocabulary::build(["a", "b", "c", "d"], 1, None);
        let l = ["a", "b", "c", "d"];
        let head = v.encode(&l, 3, Truncation::Head);
        let tail = v.encode(&l, 3, Truncation::Tail);
        assert_eq!(head, vec![CLS_ID, v.id("a"), v.id("b")]);
        assert_eq!(tail, vec![CLS_ID, v.id("c"), v.id("d")]);
        assert_eq!(v.encode(&l, 10, Truncation::Tail).len(), 5);
    }

    #[test]
    fn tsv_round_trip() {
        let v = Vocabulary::build(["x", "y", "y", "z\tq"], 1, Some(6));
        assert_eq!(v.len(), 6);
        assert_eq!(Vocabulary::from_tsv(&v.to_tsv()).unwrap(), v);
        assert!(Vocabulary::from_tsv("a\t0\n").is_err());
    }
}
