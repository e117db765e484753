//! Report ingestion: section detection, whitespace and placeholder
//! normalization, sentence splitting, tokenization and lemmatization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved token replacing de-identification placeholder runs.
pub const DEID_TOKEN: &str = "__deid__";

/// Section used for text that precedes any recognized header.
pub const BODY_SECTION: &str = "BODY";

pub const KNOWN_SECTIONS: &[&str] = &[
    "BACKGROUND",
    "FINDINGS",
    "IMPRESSION",
    "INDICATION",
    "HISTORY",
    "CLINICAL HISTORY",
    "COMPARISON",
    "TECHNIQUE",
    "EXAMINATION",
    "REASON FOR EXAMINATION",
    "CONCLUSION",
    "RECOMMENDATION",
    "RECOMMENDATIONS",
    "NOTIFICATION",
    "WET READ",
    "FINAL REPORT",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("report {0} contains no alphabetic characters")]
    EmptyReport(String),
    #[error("patient id is empty for report {0}")]
    EmptyPatient(String),
    #[error("duplicate report id {0}")]
    DuplicateReport(String),
    #[error("line {line}: {msg}")]
    Jsonl { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// Original casing.
    pub surface: String,
    /// Lowercased surface.
    pub lower: String,
    pub lemma: String,
    /// Byte offsets into the sentence text.
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub report_id: String,
    pub index: usize,
    pub section: String,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.lemma.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub patient_id: String,
    /// Section name to normalized text, in document order.
    pub sections: Vec<(String, String)>,
    pub sentences: Vec<Sentence>,
}

impl Report {
    pub fn section(&self, name: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_str())
    }

    /// Re-renders the normalized report as header-delimited text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, text) in &self.sections {
            if name == BODY_SECTION {
                out.push_str(text);
            } else if KNOWN_SECTIONS.contains(&name.as_str()) {
                out.push_str(name);
                out.push_str(": ");
                out.push_str(text);
            } else {
                // unknown headers are only recognized on a line of their own
                out.push_str(name);
                out.push_str(":\n");
                out.push_str(text);
            }
            out.push('\n');
        }
        out
    }

    /// Sentences that make up the classification body: FINDINGS and
    /// IMPRESSION when present, otherwise everything except BACKGROUND.
    pub fn body_sentences(&self) -> Vec<&Sentence> {
        let has_main = self
            .sections
            .iter()
            .any(|(n, _)| n == "FINDINGS" || n == "IMPRESSION");
        self.sentences
            .iter()
            .filter(|s| {
                if has_main {
                    s.section == "FINDINGS" || s.section == "IMPRESSION"
                } else {
                    s.section != "BACKGROUND"
                }
            })
            .collect()
    }
}

fn deid_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"__deid__|_{2,}").expect("static regex"))
}

/// Collapses whitespace runs and folds placeholder underscores into
/// [`DEID_TOKEN`]. Idempotent.
pub fn normalize_text(text: &str) -> String {
    let replaced = deid_regex().replace_all(text, DEID_TOKEN);
    replaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Returns the canonical section name and the remainder of the line when
/// `line` opens a section.
fn detect_header(line: &str) -> Option<(String, &str)> {
    let trimmed = line.trim_start();
    let colon = trimmed.find(':')?;
    let name = trimmed[..colon].trim();
    if name.is_empty() {
        return None;
    }
    let upper = name.to_uppercase();
    let rest = &trimmed[colon + 1..];
    if KNOWN_SECTIONS.contains(&upper.as_str()) {
        return Some((upper, rest));
    }
    // Unrecognized headers only count when the line is nothing but the header.
    let header_like = name.split_whitespace().count() <= 4
        && name.chars().all(|c| c.is_alphabetic() || c == ' ');
    if header_like && rest.trim().is_empty() {
        return Some((name.split_whitespace().collect::<Vec<_>>().join(" "), rest));
    }
    None
}

/// Parses raw report text into normalized sections and sentences.
pub fn parse_report(raw: &str, report_id: &str, patient_id: &str) -> Result<Report, CorpusError> {
    parse_report_with(raw, report_id, patient_id, &SplitterConfig::default())
}

pub fn parse_report_with(
    raw: &str,
    report_id: &str,
    patient_id: &str,
    splitter: &SplitterConfig,
) -> Result<Report, CorpusError> {
    if !raw.chars().any(char::is_alphabetic) {
        return Err(CorpusError::EmptyReport(report_id.to_string()));
    }
    if patient_id.trim().is_empty() {
        return Err(CorpusError::EmptyPatient(report_id.to_string()));
    }
    let mut raw_sections: Vec<(String, String)> = Vec::new();
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        let (idx, text) = match detect_header(line) {
            Some((name, rest)) => {
                let idx = match raw_sections.iter().position(|(n, _)| *n == name) {
                    Some(i) => i,
                    None => {
                        raw_sections.push((name, String::new()));
                        raw_sections.len() - 1
                    }
                };
                (idx, rest)
            }
            None => {
                let idx = match current {
                    Some(i) => i,
                    None => {
                        if line.trim().is_empty() {
                            continue;
                        }
                        raw_sections.push((BODY_SECTION.to_string(), String::new()));
                        raw_sections.len() - 1
                    }
                };
                (idx, line)
            }
        };
        current = Some(idx);
        let body = &mut raw_sections[idx].1;
        body.push(' ');
        body.push_str(text);
    }
    let sections: Vec<(String, String)> = raw_sections
        .into_iter()
        .map(|(n, t)| (n, normalize_text(&t)))
        .filter(|(_, t)| !t.is_empty())
        .collect();
    let mut report = Report {
        report_id: report_id.to_string(),
        patient_id: patient_id.to_string(),
        sections,
        sentences: Vec::new(),
    };
    report.sentences = split_sentences_with(&report, splitter);
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SplitterConfig {
    /// Lowercased abbreviations whose trailing period never ends a sentence.
    pub abbreviations: HashSet<String>,
    /// Abbreviations that only block a split when a digit follows.
    pub numeric_abbreviations: HashSet<String>,
    pub min_tokens: usize,
}

impl Default for SplitterConfig {
    fn default() -> Self {
        Self {
            abbreviations: ["dr", "mr", "a.m", "p.m", "e.g", "i.e"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            numeric_abbreviations: ["no"].iter().map(|s| s.to_string()).collect(),
            min_tokens: 2,
        }
    }
}

impl SplitterConfig {
    fn blocks_split(&self, text: &str, period_at: usize) -> bool {
        if text.as_bytes()[period_at] != b'.' {
            return false;
        }
        let word_start = text[..period_at]
            .rfind(char::is_whitespace)
            .map(|i| i + 1)
            .unwrap_or(0);
        let word = text[word_start..period_at].to_lowercase();
        let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
        if self.abbreviations.contains(word) {
            return true;
        }
        if self.numeric_abbreviations.contains(word) {
            let next = text[period_at + 1..].trim_start().chars().next();
            return next.is_some_and(|c| c.is_ascii_digit());
        }
        false
    }

    /// Splits one normalized section body into trimmed sentence strings.
    pub fn split_text<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut start = 0;
        for (i, &b) in bytes.iter().enumerate() {
            if !matches!(b, b'.' | b'!' | b'?') {
                continue;
            }
            let at_boundary = i + 1 == bytes.len() || bytes[i + 1].is_ascii_whitespace();
            if !at_boundary || self.blocks_split(text, i) {
                continue;
            }
            let piece = text[start..=i].trim();
            if !piece.is_empty() {
                out.push(piece);
            }
            start = i + 1;
        }
        let tail = text[start..].trim();
        if !tail.is_empty() {
            out.push(tail);
        }
        out
    }
}

/// Splits every section of `report` into sentences with the default splitter.
pub fn split_sentences(report: &Report) -> Vec<Sentence> {
    split_sentences_with(report, &SplitterConfig::default())
}

pub fn split_sentences_with(report: &Report, cfg: &SplitterConfig) -> Vec<Sentence> {
    let mut out = Vec::new();
    for (section, text) in &report.sections {
        for piece in cfg.split_text(text) {
            let tokens = tokenize(piece);
            if tokens.len() < cfg.min_tokens {
                continue;
            }
            out.push(Sentence {
                report_id: report.report_id.clone(),
                index: out.len(),
                section: section.clone(),
                text: piece.to_string(),
                tokens,
            });
        }
    }
    out
}

/// Splits on whitespace and punctuation; each punctuation character is its
/// own token. [`DEID_TOKEN`] is kept whole.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let push = |tokens: &mut Vec<Token>, s: usize, e: usize| {
        let surface = &text[s..e];
        tokens.push(Token {
            surface: surface.to_string(),
            lower: surface.to_lowercase(),
            lemma: lemmatize(surface),
            char_span: (s, e),
        });
    };
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if word_start.is_none() && text[i..].starts_with(DEID_TOKEN) {
            push(&mut tokens, i, i + DEID_TOKEN.len());
            while iter.peek().is_some_and(|&(j, _)| j < i + DEID_TOKEN.len()) {
                iter.next();
            }
            continue;
        }
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            push(&mut tokens, s, i);
        }
        if !c.is_whitespace() {
            push(&mut tokens, i, i + c.len_utf8());
        }
    }
    if let Some(s) = word_start {
        push(&mut tokens, s, text.len());
    }
    tokens
}

/// Configurable rule-based lemmatizer.
#[derive(Debug, Clone)]
pub struct Lemmatizer {
    pub exceptions: HashMap<String, String>,
    /// Verb stems whose `-ing` / `-ed` forms are reduced.
    pub verbs: HashSet<String>,
}

const EXCEPTIONS: &[(&str, &str)] = &[
    ("seen", "see"),
    ("was", "be"),
    ("were", "be"),
    ("is", "be"),
    ("are", "be"),
    ("been", "be"),
    ("has", "have"),
    ("had", "have"),
    ("does", "do"),
    ("this", "this"),
    ("thus", "thus"),
    ("perhaps", "perhaps"),
    ("always", "always"),
    ("whereas", "whereas"),
    ("pancreas", "pancreas"),
    ("atlas", "atlas"),
    ("gas", "gas"),
    ("yes", "yes"),
    ("its", "its"),
    ("bases", "base"),
    ("cases", "case"),
    ("causes", "cause"),
    ("diseases", "disease"),
    ("doses", "dose"),
    ("increases", "increase"),
    ("decreases", "decrease"),
    ("masses", "mass"),
    ("processes", "process"),
    ("phases", "phase"),
    ("courses", "course"),
    ("responses", "response"),
    ("lenses", "lens"),
    ("vertebrae", "vertebra"),
    ("pleurae", "pleura"),
    ("evidences", "evidence"),
    ("cannot", "cannot"),
    ("sinuses", "sinus"),
    ("releases", "release"),
    ("purposes", "purpose"),
    ("noses", "nose"),
];

const VERBS: &[&str] = &[
    "suggest", "suspect", "represent", "rule", "resolve", "observe", "demonstrate",
    "identify", "note", "remove", "concern", "miss", "clear", "improve", "worsen",
    "visualize", "widen", "blunt", "silhouette", "enlarge", "increase", "decrease",
    "exclude", "compare", "perform", "develop", "manifest", "relate", "persist",
    "associate", "evaluate", "indicate", "expand", "hyperexpand", "project", "obscure",
];

impl Default for Lemmatizer {
    fn default() -> Self {
        Self {
            exceptions: EXCEPTIONS
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            verbs: VERBS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Lemmatizer {
    pub fn lemma(&self, surface: &str) -> String {
        let w = surface.to_lowercase();
        if let Some(e) = self.exceptions.get(&w) {
            return e.clone();
        }
        let n = w.chars().count();
        if n > 4 && w.ends_with("ies") {
            return format!("{}y", &w[..w.len() - 3]);
        }
        // Greek-style plurals: atelectases, diagnoses, prostheses, analyses.
        if n >= 6 && w.ends_with("ses") {
            let before = w[..w.len() - 3].chars().last();
            if matches!(before, Some('a' | 'e' | 'o' | 'y')) {
                return format!("{}sis", &w[..w.len() - 3]);
            }
        }
        let mut w = w;
        // -is / -us words (diagnosis, status) would otherwise lose their s and
        // break idempotence.
        if n > 3
            && w.ends_with('s')
            && !w.ends_with("ss")
            && !w.ends_with("is")
            && !w.ends_with("us")
        {
            w.pop();
            if let Some(e) = self.exceptions.get(&w) {
                return e.clone();
            }
        }
        for suffix in ["ing", "ed"] {
            if let Some(stem) = w.strip_suffix(suffix) {
                if self.verbs.contains(stem) {
                    return stem.to_string();
                }
                // Stems ending in a silent e ("enlarged" -> "enlarge").
                let with_e = format!("{stem}e");
                if self.verbs.contains(&with_e) {
                    return with_e;
                }
            }
        }
        w
    }
}

fn default_lemmatizer() -> &'static Lemmatizer {
    static L: OnceLock<Lemmatizer> = OnceLock::new();
    L.get_or_init(Lemmatizer::default)
}

/// Lemmatizes with the default exception table and verb list.
pub fn lemmatize(surface: &str) -> String {
    if surface == DEID_TOKEN {
        return DEID_TOKEN.to_string();
    }
    default_lemmatizer().lemma(surface)
}

/// One line of the corpus JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub report_id: String,
    pub patient_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentences: Option<Vec<SentenceRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub index: usize,
    pub section: String,
    pub text: String,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Jsonl {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> Result<(), CorpusError> {
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| CorpusError::Io(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| CorpusError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Parsed corpus with report-id uniqueness enforced.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub reports: Vec<Report>,
    /// Raw label strings by report id, when the input carried them.
    pub labels: BTreeMap<String, Vec<String>>,
}

impl Corpus {
    pub fn from_records(records: &[CorpusRecord]) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        let mut corpus = Corpus::default();
        for rec in records {
            if !seen.insert(rec.report_id.clone()) {
                return Err(CorpusError::DuplicateReport(rec.report_id.clone()));
            }
            corpus
                .reports
                .push(parse_report(&rec.text, &rec.report_id, &rec.patient_id)?);
            if let Some(l) = &rec.labels {
                corpus.labels.insert(rec.report_id.clone(), l.clone());
            }
        }
        Ok(corpus)
    }

    pub fn patients(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.reports.iter().enumerate() {
            map.entry(r.patient_id.as_str()).or_default().push(i);
        }
        map
    }
}

/// Adds the `sentences` array to each record.
pub fn ingest(records: &[CorpusRecord]) -> Result<Vec<CorpusRecord>, CorpusError> {
    let corpus = Corpus::from_records(records)?;
    Ok(records
        .iter()
        .zip(&corpus.reports)
        .map(|(rec, report)| {
            let mut rec = rec.clone();
            rec.sentences = Some(
                report
                    .sentences
                    .iter()
                    .map(|s| SentenceRecord {
                        index: s.index,
                        section: s.section.clone(),
                        text: s.text.clone(),
                    })
                    .collect(),
            );
            rec
        })
        .collect())
}
