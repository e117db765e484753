//! Template-based synthetic report generator with planted findings.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::CorpusRecord;
use crate::info::Factuality;
use crate::kv;
use crate::labels::{LabelVector, Observation};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum GeneratorError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Kv(#[from] kv::KvError),
}

const AFFIRMED: &[&str] = &[
    "there is {d} in the {loc}.",
    "{d} is seen in the {loc}.",
    "{d} is present.",
    "new {d} is noted.",
    "findings are consistent with {d}.",
    "{d} is again demonstrated.",
    "interval increase in {d}.",
];

const NEGATED: &[&str] = &[
    "no evidence of {d}.",
    "there is no {d}.",
    "the {loc} is clear of {d}.",
    "no {d} is seen.",
    "{d} has resolved.",
    "negative for {d}.",
    "the lungs are free of {d}.",
];

const UNCERTAIN: &[&str] = &[
    "{d} could be present.",
    "findings may represent {d}.",
    "possible {d} in the {loc}.",
    "{d} cannot be excluded.",
    "suspicious for {d}.",
    "likely {d} in the {loc}.",
    "this might be {d}.",
];

const FILLERS: &[&str] = &[
    "the heart size is normal.",
    "the mediastinal contour is unremarkable.",
    "the osseous structures are intact.",
    "the trachea is midline.",
    "lung volumes are low.",
    "comparison is made to the prior study.",
    "the patient is rotated.",
    "the hila are within normal limits.",
    "pulmonary vasculature is normal.",
    "the diaphragm is well visualized.",
    "degenerative changes of the thoracic spine.",
    "the aortic knob is calcified.",
];

const LOCATIONS: &[&str] = &[
    "right lower lobe",
    "left lower lobe",
    "right upper lobe",
    "left upper lobe",
    "right base",
    "left base",
    "lung base",
    "left apex",
];

/// Phrases planted for each observation; each is tagged with that
/// observation by the bundled lexicon.
pub fn disease_phrases(obs: Observation) -> &'static [&'static str] {
    use Observation::*;
    match obs {
        EnlargedCardiomediastinum => &["enlarged cardiomediastinum", "widened mediastinum", "mediastinal widening"],
        Cardiomegaly => &["cardiomegaly", "enlarged heart", "cardiac enlargement"],
        LungOpacity => &["opacity", "airspace opacity", "patchy opacity"],
        LungLesion => &["nodule", "pulmonary nodule", "lung mass"],
        Edema => &["edema", "pulmonary edema", "interstitial edema"],
        Consolidation => &["consolidation", "focal consolidation", "lobar consolidation"],
        Pneumonia => &["pneumonia", "bronchopneumonia", "aspiration pneumonia"],
        Atelectasis => &["atelectasis", "bibasilar atelectasis", "subsegmental atelectasis"],
        Pneumothorax => &["pneumothorax", "apical pneumothorax", "hydropneumothorax"],
        PleuralEffusion => &["pleural effusion", "effusion", "pleural fluid"],
        PleuralOther => &["pleural thickening", "pleural plaque", "pleural scarring"],
        Fracture => &["fracture", "rib fracture", "compression fracture"],
        SupportDevices => &["endotracheal tube", "picc line", "pacemaker"],
        NoFinding => &[],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorSpec {
    pub n_patients: usize,
    pub reports_per_patient: RangeInclusive<usize>,
    pub sentences_per_report: RangeInclusive<usize>,
    pub diseases: Vec<Observation>,
    /// Affirmed, negated, uncertain.
    pub polarity: [f64; 3],
    /// Chance that a sentence slot plants a finding rather than a filler.
    pub p_disease: f64,
    pub affirmed_templates: Vec<String>,
    pub negated_templates: Vec<String>,
    pub uncertain_templates: Vec<String>,
    pub fillers: Vec<String>,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            n_patients: 100,
            reports_per_patient: 1..=3,
            sentences_per_report: 3..=8,
            diseases: Observation::DISEASES.to_vec(),
            polarity: [0.5, 0.3, 0.2],
            p_disease: 0.5,
            affirmed_templates: own(AFFIRMED),
            negated_templates: own(NEGATED),
            uncertain_templates: own(UNCERTAIN),
            fillers: own(FILLERS),
            seed: 0,
        }
    }
}

fn parse_range(v: &str) -> Option<RangeInclusive<usize>> {
    match v.split_once("..") {
        Some((a, b)) => Some(a.trim().parse().ok()?..=b.trim().trim_start_matches('=').parse().ok()?),
        None => {
            let n = v.trim().parse().ok()?;
            Some(n..=n)
        }
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split('|').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl GeneratorSpec {
    /// Overrides defaults from `key = value` text. List values are
    /// `|`-separated; ranges are `a..b` (inclusive).
    pub fn from_kv(text: &str) -> Result<Self, GeneratorError> {
        let mut spec = Self::default();
        for (k, v) in kv::parse(text)? {
            spec.set(&k, &v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), GeneratorError> {
        let bad = || GeneratorError::InvalidSpec(format!("bad value for {key}: {v:?}"));
        match key {
            "n_patients" => self.n_patients = v.parse().map_err(|_| bad())?,
            "reports_per_patient" => self.reports_per_patient = parse_range(v).ok_or_else(bad)?,
            "sentences_per_report" => self.sentences_per_report = parse_range(v).ok_or_else(bad)?,
            "diseases" => {
                self.diseases = v.split(',').map(|s| s.trim().parse::<Observation>()).collect::<Result<_, _>>().map_err(|_| bad())?
            }
            "polarity" => {
                let p: Vec<f64> = v.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                self.polarity = p.try_into().map_err(|_| bad())?;
            }
            "p_disease" => self.p_disease = v.parse().map_err(|_| bad())?,
            "templates.affirmed" => self.affirmed_templates = split_list(v),
            "templates.negated" => self.negated_templates = split_list(v),
            "templates.uncertain" => self.uncertain_templates = split_list(v),
            "fillers" => self.fillers = split_list(v),
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            _ => return Err(GeneratorError::InvalidSpec(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: &str| Err(GeneratorError::InvalidSpec(m.into()));
        if self.polarity.iter().any(|p| !(*p >= 0.0)) || (self.polarity.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("polarity must be non-negative and sum to 1");
        }
        if self.affirmed_templates.is_empty() || self.negated_templates.is_empty() || self.uncertain_templates.is_empty() {
            return bad("every polarity needs at least one template");
        }
        if self.reports_per_patient.is_empty() || *self.reports_per_patient.start() == 0 {
            return bad("reports_per_patient must be a non-empty range starting at 1 or more");
        }
        if self.sentences_per_report.is_empty() || *self.sentences_per_report.start() == 0 {
            return bad("sentences_per_report must be a non-empty range starting at 1 or more");
        }
        if self.diseases.is_empty() || self.diseases.contains(&Observation::NoFinding) {
            return bad("diseases must be non-empty and exclude No Finding");
        }
        if !(0.0..=1.0).contains(&self.p_disease) {
            return bad("p_disease must lie in [0, 1]");
        }
        if self.fillers.is_empty() && self.p_disease < 1.0 {
            return bad("fillers required when p_disease < 1");
        }
        let all = self.affirmed_templates.iter().chain(&self.negated_templates).chain(&self.uncertain_templates);
        if all.clone().any(|t| !t.contains("{d}")) {
            return bad("every template needs a {d} slot");
        }
        Ok(())
    }
}

/// A generated sentence and the finding planted in it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantedSentence {
    pub text: String,
    pub section: String,
    pub fact: Option<(Observation, Factuality)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticReport {
    pub record: CorpusRecord,
    pub gold: LabelVector,
    pub sentences: Vec<PlantedSentence>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn polarity<R: Rng>(p: &[f64; 3], rng: &mut R) -> Factuality {
    let u: f64 = rng.gen();
    if u < p[0] {
        Factuality::Affirmed
    } else if u < p[0] + p[1] {
        Factuality::Negated
    } else {
        Factuality::Uncertain
    }
}

fn report<R: Rng>(spec: &GeneratorSpec, patient: &str, idx: usize, rng: &mut R) -> SyntheticReport {
    let n = rng.gen_range(spec.sentences_per_report.clone());
    let mut pool = spec.diseases.clone();
    pool.shuffle(rng);
    let mut sentences = Vec::with_capacity(n);
    for i in 0..n {
        let section = if i + 1 == n && n > 1 { "IMPRESSION" } else { "FINDINGS" };
        let planted = rng.gen_bool(spec.p_disease) || spec.fillers.is_empty();
        let (text, fact) = match pool.pop().filter(|_| planted) {
            Some(obs) => {
                let f = polarity(&spec.polarity, rng);
                let templates = match f {
                    Factuality::Affirmed => &spec.affirmed_templates,
                    Factuality::Negated => &spec.negated_templates,
                    Factuality::Uncertain => &spec.uncertain_templates,
                };
                let t = templates.choose(rng).expect("validated");
                let d = disease_phrases(obs).choose(rng).expect("disease phrases");
                let loc = LOCATIONS.choose(rng).expect("locations");
                (t.replace("{d}", d).replace("{loc}", loc), Some((obs, f)))
            }
            None => (spec.fillers.choose(rng).expect("validated").clone(), None),
        };
        sentences.push(PlantedSentence { text: capitalize(&text), section: section.to_string(), fact });
    }
    let findings: Vec<&str> = sentences.iter().filter(|s| s.section == "FINDINGS").map(|s| s.text.as_str()).collect();
    let impression: Vec<&str> = sentences.iter().filter(|s| s.section == "IMPRESSION").map(|s| s.text.as_str()).collect();
    let mut text = String::new();
    if rng.gen_bool(0.3) {
        text.push_str("COMPARISON: ___\n\n");
    }
    text.push_str(&format!("FINDINGS: {}\n", findings.join(" ")));
    if !impression.is_empty() {
        text.push_str(&format!("\nIMPRESSION: {}\n", impression.join(" ")));
    }
    let gold = LabelVector::aggregate(sentences.iter().filter_map(|s| s.fact.map(|(o, f)| (o, f.as_label()))));
    SyntheticReport {
        record: CorpusRecord {
            report_id: format!("{patient}_r{idx}"),
            patient_id: patient.to_string(),
            text,
            labels: Some(gold.to_strings()),
            sentences: None,
        },
        gold,
        sentences,
    }
}

/// Generates the corpus. Each patient draws from its own stream, so the
/// output does not depend on scheduling.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<SyntheticReport>, GeneratorError> {
    spec.validate()?;
    let per_patient: Vec<Vec<SyntheticReport>> = (0..spec.n_patients)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng::stream(spec.seed, p as u64);
            let patient = format!("p{p:05}");
            let n = rng.gen_range(spec.reports_per_patient.clone());
            (0..n).map(|i| report(spec, &patient, i, &mut rng)).collect()
        })
        .collect();
    Ok(per_patient.into_iter().flatten().collect())
}

/// Splits reports by patient into `(train, test)` with about `test_fraction`
/// of patients held out.
pub fn split_by_patient<T: Clone>(items: &[T], patient_of: impl Fn(&T) -> &str, test_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(patient_of(it)).or_default().push(i);
    }
    let mut ids: Vec<&str> = groups.keys().copied().collect();
    ids.shuffle(&mut rng::seeded(seed));
    let n_test = ((ids.len() as f64) * test_fraction).round() as usize;
    let test: std::collections::BTreeSet<&str> = ids[..n_test].iter().copied().collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for it in items {
        if test.contains(patient_of(it)) {
            held.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    (train, held)
}
