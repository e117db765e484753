use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{augment_document, augment_sentence, AugmentError, AugmentationPolicy, TextView};
use crate::corpus::Report;
use crate::info::{InfoPreservation, SentenceAnnotation};

/// Reports paired with per-sentence annotations.
#[derive(Debug, Clone, Default)]
pub struct AnnotatedCorpus {
    pub reports: Vec<Report>,
    /// Parallel to `reports`; inner vectors parallel to `Report::sentences`.
    pub annotations: Vec<Vec<SentenceAnnotation>>,
}

impl AnnotatedCorpus {
    pub fn new(reports: Vec<Report>, info: &InfoPreservation) -> Self {
        use rayon::prelude::*;
        let annotations = reports.par_iter().map(|r| info.annotate_report(r)).collect();
        Self { reports, annotations }
    }

    pub fn patients(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.reports.iter().enumerate() {
            map.entry(r.patient_id.as_str()).or_default().push(i);
        }
        map
    }

    /// Sentence indices that make up a document-level view.
    pub fn document_sentences(&self, report: usize, scope: DocumentScope) -> Vec<usize> {
        let r = &self.reports[report];
        match scope {
            DocumentScope::Full => (0..r.sentences.len()).collect(),
            DocumentScope::Body => r.body_sentences().iter().map(|s| s.index).collect(),
        }
    }

    /// Sentences that may enter sentence-level sampling: in scope and with at
    /// least one disease mention.
    pub fn sampling_sentences(&self, scope: SentenceScope) -> Vec<SentenceRef> {
        let mut out = Vec::new();
        for (ri, r) in self.reports.iter().enumerate() {
            let body: BTreeSet<usize> = match scope {
                SentenceScope::Body => r.body_sentences().iter().map(|s| s.index).collect(),
                SentenceScope::All => (0..r.sentences.len()).collect(),
            };
            for si in body {
                if self.annotations[ri][si].eligible_for_sampling() {
                    out.push(SentenceRef { report: ri, sentence: si });
                }
            }
        }
        out
    }

    fn annotation(&self, s: SentenceRef) -> &SentenceAnnotation {
        &self.annotations[s.report][s.sentence]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceRef {
    pub report: usize,
    pub sentence: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Unit {
    Report(usize),
    Sentence(SentenceRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceScope {
    /// FINDINGS and IMPRESSION (everything but BACKGROUND when absent).
    #[default]
    Body,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocumentScope {
    #[default]
    Full,
    Body,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Sentence,
    Document,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampler {
    /// Same-patient report pairs.
    Patient,
    /// Affirmed sentences sharing a disease concept.
    Disease,
    /// Sentences sharing disease concept and binary factuality.
    DiseaseFactuality,
}

impl std::str::FromStr for PairSampler {
    type Err = AugmentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('-', "_").as_str() {
            "patient" => Ok(Self::Patient),
            "disease" => Ok(Self::Disease),
            "disease_factuality" => Ok(Self::DiseaseFactuality),
            other => Err(AugmentError::InvalidPolicy(format!("unknown sampler {other:?}"))),
        }
    }
}

impl PairSampler {
    pub fn granularity(self) -> Granularity {
        match self {
            PairSampler::Patient => Granularity::Document,
            _ => Granularity::Sentence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub k: usize,
    pub sentence_scope: SentenceScope,
    pub document_scope: DocumentScope,
    /// Share of the k negatives drawn from same-concept, flipped-factuality
    /// sentences (disease + factuality sampler). The rest lack the concept.
    pub hard_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            k: 8,
            sentence_scope: SentenceScope::Body,
            document_scope: DocumentScope::Full,
            hard_fraction: 0.5,
        }
    }
}

/// Keys of one anchor into the plan's shared candidate pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPlan {
    pub anchor: Unit,
    pub concept: Option<String>,
    /// Binary factuality of the anchor: true when affirmed.
    pub affirmed: Option<bool>,
    pub patient: String,
    /// Pool holding the anchor and its positives.
    positive_pool: usize,
    hard_pool: Option<usize>,
    /// For patients this is every report, filtered at draw time.
    negative_pool: usize,
}

/// Candidate sets for a sampler over a corpus. Anchors are grouped so that
/// the first draw is uniform over groups (patients for the patient sampler, single
/// entries otherwise).
#[derive(Debug, Clone)]
pub struct CandidatePlan {
    pub sampler: PairSampler,
    pub k: usize,
    pub hard_fraction: f64,
    pub anchors: Vec<AnchorPlan>,
    pub groups: Vec<Vec<usize>>,
    pools: Vec<Vec<Unit>>,
    /// Patient of each report, by report index.
    report_patient: Vec<String>,
}

fn insufficient(msg: impl Into<String>) -> AugmentError {
    AugmentError::InsufficientData(msg.into())
}

impl CandidatePlan {
    pub fn build(sampler: PairSampler, corpus: &AnnotatedCorpus, cfg: &SamplerConfig) -> Result<Self, AugmentError> {
        if !(0.0..=1.0).contains(&cfg.hard_fraction) {
            return Err(AugmentError::InvalidPolicy("hard_fraction must lie in [0, 1]".into()));
        }
        let k = cfg.k;
        let mut plan = Self {
            sampler,
            k,
            hard_fraction: cfg.hard_fraction,
            anchors: Vec::new(),
            groups: Vec::new(),
            pools: Vec::new(),
            report_patient: corpus.reports.iter().map(|r| r.patient_id.clone()).collect(),
        };
        match sampler {
            PairSampler::Patient => {
                if corpus.reports.len() < k + 2 {
                    return Err(insufficient(format!(
                        "{} reports, need at least k + 2 = {}",
                        corpus.reports.len(),
                        k + 2
                    )));
                }
                plan.pools.push((0..corpus.reports.len()).map(Unit::Report).collect());
                for (patient, reports) in corpus.patients() {
                    if reports.len() < 2 || corpus.reports.len() - reports.len() < k {
                        continue;
                    }
                    let pool = plan.pools.len();
                    plan.pools.push(reports.iter().map(|&r| Unit::Report(r)).collect());
                    let mut group = Vec::new();
                    for &r in &reports {
                        group.push(plan.anchors.len());
                        plan.anchors.push(AnchorPlan {
                            anchor: Unit::Report(r),
                            concept: None,
                            affirmed: None,
                            patient: patient.to_string(),
                            positive_pool: pool,
                            hard_pool: None,
                            negative_pool: 0,
                        });
                    }
                    plan.groups.push(group);
                }
                if plan.groups.is_empty() {
                    return Err(insufficient("no patient has two reports and enough other-patient reports"));
                }
            }
            PairSampler::Disease | PairSampler::DiseaseFactuality => {
                let pool = corpus.sampling_sentences(cfg.sentence_scope);
                let pool: Vec<SentenceRef> = if sampler == PairSampler::Disease {
                    pool.into_iter()
                        .filter(|&s| corpus.annotation(s).factuality.is_affirmed())
                        .collect()
                } else {
                    pool
                };
                let factual = sampler == PairSampler::DiseaseFactuality;
                // (concept, binary factuality or None) -> members; concept -> non-members.
                let mut keyed: BTreeMap<(String, Option<bool>), Vec<Unit>> = BTreeMap::new();
                let mut concept_sets: Vec<BTreeSet<String>> = Vec::with_capacity(pool.len());
                for &s in &pool {
                    let ann = corpus.annotation(s);
                    let cs: BTreeSet<String> = ann.disease_concepts().into_iter().map(String::from).collect();
                    let key_f = factual.then(|| ann.factuality.is_affirmed());
                    for c in &cs {
                        keyed.entry((c.clone(), key_f)).or_default().push(Unit::Sentence(s));
                    }
                    concept_sets.push(cs);
                }
                let concepts: BTreeSet<&String> = keyed.keys().map(|(c, _)| c).collect();
                let mut lacking: BTreeMap<&String, usize> = BTreeMap::new();
                for c in concepts {
                    lacking.insert(c, plan.pools.len());
                    plan.pools.push(
                        pool.iter()
                            .zip(&concept_sets)
                            .filter(|(_, cs)| !cs.contains(c))
                            .map(|(&s, _)| Unit::Sentence(s))
                            .collect(),
                    );
                }
                let mut key_pool: BTreeMap<&(String, Option<bool>), usize> = BTreeMap::new();
                for (key, members) in &keyed {
                    key_pool.insert(key, plan.pools.len());
                    plan.pools.push(members.clone());
                }
                for (&s, cs) in pool.iter().zip(&concept_sets) {
                    let affirmed = corpus.annotation(s).factuality.is_affirmed();
                    let key_f = factual.then_some(affirmed);
                    for c in cs {
                        let positive_pool = key_pool[&(c.clone(), key_f)];
                        let hard_pool = factual.then(|| key_pool.get(&(c.clone(), Some(!affirmed))).copied()).flatten();
                        let negative_pool = lacking[c];
                        let n_neg = plan.pools[negative_pool].len() + hard_pool.map_or(0, |h| plan.pools[h].len());
                        if plan.pools[positive_pool].len() < 2 || n_neg < k {
                            continue;
                        }
                        plan.groups.push(vec![plan.anchors.len()]);
                        plan.anchors.push(AnchorPlan {
                            anchor: Unit::Sentence(s),
                            concept: Some(c.clone()),
                            affirmed: key_f,
                            patient: corpus.reports[s.report].patient_id.clone(),
                            positive_pool,
                            hard_pool,
                            negative_pool,
                        });
                    }
                }
                if plan.anchors.is_empty() {
                    return Err(insufficient(format!(
                        "no sentence has a same-key partner and {k} eligible negatives"
                    )));
                }
            }
        }
        Ok(plan)
    }

    /// Every positive candidate of anchor `i`.
    pub fn positives(&self, i: usize) -> Vec<Unit> {
        let a = &self.anchors[i];
        self.pools[a.positive_pool].iter().copied().filter(|&u| u != a.anchor).collect()
    }

    /// Same-concept, flipped-factuality candidates of anchor `i`.
    pub fn hard_negatives(&self, i: usize) -> Vec<Unit> {
        self.anchors[i].hard_pool.map(|h| self.pools[h].clone()).unwrap_or_default()
    }

    /// Remaining negative candidates of anchor `i`.
    pub fn negatives(&self, i: usize) -> Vec<Unit> {
        let a = &self.anchors[i];
        self.pools[a.negative_pool].iter().copied().filter(|&u| self.is_negative(a, u)).collect()
    }

    fn is_negative(&self, a: &AnchorPlan, u: Unit) -> bool {
        match u {
            Unit::Report(r) => self.report_patient[r] != a.patient,
            Unit::Sentence(_) => true,
        }
    }

    /// Draws one batch; every view is augmented with `policy`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        corpus: &AnnotatedCorpus,
        cfg: &SamplerConfig,
        policy: &AugmentationPolicy,
        rng: &mut R,
    ) -> ContrastiveBatch {
        let mut batch = ContrastiveBatch {
            granularity: self.sampler.granularity(),
            k: self.k,
            queries: Vec::with_capacity(cfg.batch_size),
            positives: Vec::with_capacity(cfg.batch_size),
            negatives: Vec::with_capacity(cfg.batch_size),
            meta: Vec::with_capacity(cfg.batch_size),
        };
        for _ in 0..cfg.batch_size {
            let group = self.groups.choose(rng).expect("plan has at least one group");
            let plan = &self.anchors[*group.choose(rng).expect("groups are non-empty")];
            let positive = self.draw_positive(plan, rng);
            let (negs, hard) = self.draw_negatives(plan, rng);

            let view = |u: Unit, rng: &mut R| match u {
                Unit::Report(r) => {
                    let idx = corpus.document_sentences(r, cfg.document_scope);
                    augment_document(&corpus.reports[r], &corpus.annotations[r], &idx, policy, rng)
                }
                Unit::Sentence(s) => augment_sentence(
                    &corpus.reports[s.report].sentences[s.sentence],
                    corpus.annotation(s),
                    policy,
                    rng,
                ),
            };
            batch.queries.push(view(plan.anchor, rng));
            batch.positives.push(view(positive, rng));
            batch.negatives.push(negs.iter().map(|&n| view(n, rng)).collect());
            batch.meta.push(BatchMeta {
                concept: plan.concept.clone(),
                affirmed: plan.affirmed,
                patient: plan.patient.clone(),
                query_id: unit_id(corpus, plan.anchor),
                positive_id: unit_id(corpus, positive),
                negative_ids: negs.iter().map(|&n| unit_id(corpus, n)).collect(),
                hard,
            });
        }
        batch
    }

    /// Uniform over the anchor's pool minus the anchor itself.
    fn draw_positive<R: Rng + ?Sized>(&self, a: &AnchorPlan, rng: &mut R) -> Unit {
        let pool = &self.pools[a.positive_pool];
        let at = pool.iter().position(|&u| u == a.anchor).expect("anchor sits in its own pool");
        let i = rng.gen_range(0..pool.len() - 1);
        pool[if i >= at { i + 1 } else { i }]
    }

    /// k distinct negatives: `round(k * hard_fraction)` hard ones when
    /// available, the rest lacking the anchor's key. Either side tops up
    /// the other when short.
    fn draw_negatives<R: Rng + ?Sized>(&self, a: &AnchorPlan, rng: &mut R) -> (Vec<Unit>, Vec<bool>) {
        let k = self.k;
        let hard_pool: &[Unit] = a.hard_pool.map_or(&[], |h| &self.pools[h]);
        let other = &self.pools[a.negative_pool];
        let other_len = match a.anchor {
            // Patient pools hold every report; the anchor's own are skipped.
            Unit::Report(_) => other.iter().filter(|&&u| self.is_negative(a, u)).count(),
            Unit::Sentence(_) => other.len(),
        };
        let target = ((k as f64) * self.hard_fraction).round() as usize;
        let mut n_hard = target.min(hard_pool.len());
        if k - n_hard > other_len {
            n_hard = k - other_len;
        }
        let mut out: Vec<Unit> = index::sample(rng, hard_pool.len(), n_hard).into_iter().map(|i| hard_pool[i]).collect();
        let rest = k - n_hard;
        match a.anchor {
            Unit::Sentence(_) => out.extend(index::sample(rng, other.len(), rest).into_iter().map(|i| other[i])),
            Unit::Report(_) => {
                // Rejection keeps the draw uniform without a per-patient list.
                let mut seen = BTreeSet::new();
                while seen.len() < rest {
                    let u = other[rng.gen_range(0..other.len())];
                    if self.is_negative(a, u) && seen.insert(u) {
                        out.push(u);
                    }
                }
            }
        }
        let hard = (0..k).map(|i| i < n_hard).collect();
        (out, hard)
    }
}

pub fn unit_id(corpus: &AnnotatedCorpus, u: Unit) -> String {
    match u {
        Unit::Report(r) => corpus.reports[r].report_id.clone(),
        Unit::Sentence(s) => format!("{}#{}", corpus.reports[s.report].report_id, s.sentence),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub concept: Option<String>,
    pub affirmed: Option<bool>,
    pub patient: String,
    pub query_id: String,
    pub positive_id: String,
    pub negative_ids: Vec<String>,
    /// Parallel to `negative_ids`: drawn from the hard-negative pool.
    pub hard: Vec<bool>,
}

/// Query, positive key and k negative keys per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    pub granularity: Granularity,
    pub k: usize,
    pub queries: Vec<TextView>,
    pub positives: Vec<TextView>,
    pub negatives: Vec<Vec<TextView>>,
    pub meta: Vec<BatchMeta>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.queries.len();
        if self.positives.len() != n || self.negatives.len() != n || self.meta.len() != n {
            return Err("queries, positives, negatives and meta must be parallel".into());
        }
        for (i, (row, meta)) in self.negatives.iter().zip(&self.meta).enumerate() {
            if row.len() != self.k || meta.negative_ids.len() != self.k {
                return Err(format!("row {i} has {} negatives, expected {}", row.len(), self.k));
            }
            if meta.negative_ids.contains(&meta.positive_id) {
                return Err(format!("row {i} reuses its positive as a negative"));
            }
        }
        Ok(())
    }

    /// One JSON object per row for inspection.
    pub fn jsonl_rows(&self) -> Vec<serde_json::Value> {
        (0..self.len())
            .map(|i| {
                let m = &self.meta[i];
                json!({
                    "query": self.queries[i].text(),
                    "positive": self.positives[i].text(),
                    "negatives": self.negatives[i].iter().map(TextView::text).collect::<Vec<_>>(),
                    "meta": {
                        "concept": m.concept,
                        "factuality": m.affirmed.map(|a| if a { "affirmed" } else { "negated_or_uncertain" }),
                        "patient": m.patient,
                        "query_id": m.query_id,
                        "positive_id": m.positive_id,
                        "negative_ids": m.negative_ids,
                        "hard": m.hard,
                    }
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_report;
    use crate::rng;

    fn corpus(reports: &[(&str, &str, &str)]) -> AnnotatedCorpus {
        let reports = reports
            .iter()
            .map(|(id, patient, text)| parse_report(text, id, patient).unwrap())
            .collect();
        AnnotatedCorpus::new(reports, &InfoPreservation::bundled())
    }

    fn cfg(batch_size: usize, k: usize) -> SamplerConfig {
        SamplerConfig {
            batch_size,
            k,
            ..Default::default()
        }
    }

    fn patient_corpus() -> AnnotatedCorpus {
        corpus(&[
            ("r1", "A", "FINDINGS: Heart size is normal."),
            ("r2", "A", "FINDINGS: Small left pleural effusion."),
            ("r3", "B", "FINDINGS: No pneumothorax is seen."),
            ("r4", "C", "FINDINGS: Mild pulmonary edema."),
        ])
    }

    #[test]
    fn patient_pairs_forced_by_counts() {
        let c = patient_corpus();
        let plan = CandidatePlan::build(PairSampler::Patient, &c, &cfg(16, 2)).unwrap();
        let batch = plan.sample(&c, &cfg(16, 2), &AugmentationPolicy::default(), &mut rng::seeded(5));
        batch.validate().unwrap();
        for m in &batch.meta {
            assert_eq!(m.patient, "A");
            assert!(["r1", "r2"].contains(&m.query_id.as_str()));
            assert!(["r1", "r2"].contains(&m.positive_id.as_str()));
            assert_ne!(m.query_id, m.positive_id);
            let mut negs = m.negative_ids.clone();
            negs.sort();
            assert_eq!(negs, ["r3", "r4"]);
        }
    }

    #[test]
    fn patient_pairs_k0_and_single_patient() {
        let c = patient_corpus();
        let plan = CandidatePlan::build(PairSampler::Patient, &c, &cfg(4, 0)).unwrap();
        let batch = plan.sample(&c, &cfg(4, 0), &AugmentationPolicy::default(), &mut rng::seeded(5));
        batch.validate().unwrap();
        assert!(batch.negatives.iter().all(Vec::is_empty));

        let single = corpus(&[
            ("r1", "A", "FINDINGS: Heart size is normal."),
            ("r2", "A", "FINDINGS: Small left pleural effusion."),
        ]);
        assert!(matches!(
            CandidatePlan::build(PairSampler::Patient, &single, &cfg(4, 1)),
            Err(AugmentError::InsufficientData(_))
        ));
    }

    fn disease_corpus() -> AnnotatedCorpus {
        corpus(&[
            (
                "r1",
                "A",
                "FINDINGS: Definite focal consolidation is seen in left side of lungs. Low lung volumes and mild bibasilar atelectasis.",
            ),
            (
                "r2",
                "B",
                "FINDINGS: There is a focal consolidation at the left lung base. The lungs are clear of any focal consolidation.",
            ),
            ("r3", "C", "FINDINGS: Moderate pleural effusion on the right. Small pleural effusion is seen."),
            ("r4", "D", "FINDINGS: No pleural effusion is present. Bibasilar atelectasis is present."),
        ])
    }

    #[test]
    fn disease_plan_is_exhaustively_sound() {
        let c = disease_corpus();
        let plan = CandidatePlan::build(PairSampler::Disease, &c, &cfg(1, 1)).unwrap();
        for (i, a) in plan.anchors.iter().enumerate() {
            let Unit::Sentence(s) = a.anchor else { panic!() };
            assert!(c.annotation(s).factuality.is_affirmed());
            let concept = a.concept.as_deref().unwrap();
            assert!(!plan.positives(i).is_empty());
            assert!(plan.hard_negatives(i).is_empty());
            for p in plan.positives(i) {
                let Unit::Sentence(p) = p else { panic!() };
                assert!(c.annotation(p).disease_concepts().contains(&concept));
                assert!(c.annotation(p).factuality.is_affirmed());
            }
            for n in plan.negatives(i) {
                let Unit::Sentence(n) = n else { panic!() };
                assert!(!c.annotation(n).disease_concepts().contains(&concept));
            }
        }
        // the negated consolidation sentence never enters the pool
        let negated = SentenceRef { report: 1, sentence: 1 };
        assert!((0..plan.anchors.len()).all(|i| plan.anchors[i].anchor != Unit::Sentence(negated)
            && !plan.negatives(i).contains(&Unit::Sentence(negated))
            && !plan.positives(i).contains(&Unit::Sentence(negated))));
    }

    #[test]
    fn disease_batch_property() {
        let c = disease_corpus();
        let plan = CandidatePlan::build(PairSampler::Disease, &c, &cfg(64, 1)).unwrap();
        let batch = plan.sample(&c, &cfg(64, 1), &AugmentationPolicy::default(), &mut rng::seeded(11));
        batch.validate().unwrap();
        let lookup = |id: &str| {
            let (r, s) = id.split_once('#').unwrap();
            let ri = c.reports.iter().position(|x| x.report_id == r).unwrap();
            c.annotations[ri][s.parse::<usize>().unwrap()].disease_concepts().into_iter().map(String::from).collect::<Vec<_>>()
        };
        for m in &batch.meta {
            let concept = m.concept.clone().unwrap();
            assert!(lookup(&m.query_id).contains(&concept));
            assert!(lookup(&m.positive_id).contains(&concept));
            for n in &m.negative_ids {
                assert!(!lookup(n).contains(&concept));
            }
        }
    }

    #[test]
    fn one_sentence_per_disease_is_insufficient() {
        let c = corpus(&[
            ("r1", "A", "FINDINGS: Mild pulmonary edema."),
            ("r2", "B", "FINDINGS: Small pleural effusion."),
            ("r3", "C", "FINDINGS: Bibasilar atelectasis."),
        ]);
        for s in [PairSampler::Disease, PairSampler::DiseaseFactuality] {
            assert!(matches!(
                CandidatePlan::build(s, &c, &cfg(1, 1)),
                Err(AugmentError::InsufficientData(_))
            ));
        }
    }

    #[test]
    fn factuality_plan_prefers_hard_negatives() {
        let c = disease_corpus();
        let all_hard = SamplerConfig { hard_fraction: 1.0, ..cfg(1, 1) };
        let plan = CandidatePlan::build(PairSampler::DiseaseFactuality, &c, &all_hard).unwrap();
        let i = plan
            .anchors
            .iter()
            .position(|a| a.anchor == Unit::Sentence(SentenceRef { report: 0, sentence: 0 }))
            .unwrap();
        assert_eq!(plan.anchors[i].concept.as_deref(), Some("consolidation"));
        assert_eq!(plan.positives(i), [Unit::Sentence(SentenceRef { report: 1, sentence: 0 })]);
        assert_eq!(plan.hard_negatives(i), [Unit::Sentence(SentenceRef { report: 1, sentence: 1 })]);

        // With k = 1 and a hard negative available, every draw for every
        // anchor that has one is of opposite polarity.
        for (i, a) in plan.anchors.iter().enumerate() {
            for seed in 0..50 {
                let (negs, hard) = plan.draw_negatives(a, &mut rng::seeded(seed));
                if !plan.hard_negatives(i).is_empty() {
                    assert!(hard[0]);
                    let Unit::Sentence(n) = negs[0] else { panic!() };
                    assert_ne!(c.annotation(n).factuality.is_affirmed(), a.affirmed.unwrap());
                }
            }
        }
    }

    #[test]
    fn factuality_negatives_mix_hard_and_other() {
        let c = disease_corpus();
        for (hf, want_hard) in [(0.0, 0), (0.5, 1), (1.0, 1)] {
            let config = SamplerConfig { hard_fraction: hf, ..cfg(1, 2) };
            let plan = CandidatePlan::build(PairSampler::DiseaseFactuality, &c, &config).unwrap();
            for (i, a) in plan.anchors.iter().enumerate() {
                let concept = a.concept.as_deref().unwrap();
                let n_hard = plan.hard_negatives(i).len();
                for seed in 0..20 {
                    let (negs, hard) = plan.draw_negatives(a, &mut rng::seeded(seed));
                    assert_eq!(negs.len(), 2);
                    let mut uniq = negs.clone();
                    uniq.sort();
                    uniq.dedup();
                    assert_eq!(uniq.len(), 2);
                    let got_hard = hard.iter().filter(|&&h| h).count();
                    let others = plan.negatives(i).len();
                    let expect = want_hard.min(n_hard).max(2usize.saturating_sub(others));
                    assert_eq!(got_hard, expect, "hf {hf} anchor {i}");
                    for (&n, &h) in negs.iter().zip(&hard) {
                        let Unit::Sentence(n) = n else { panic!() };
                        let has = c.annotation(n).disease_concepts().contains(&concept);
                        assert_eq!(has, h);
                        if h {
                            assert_ne!(c.annotation(n).factuality.is_affirmed(), a.affirmed.unwrap());
                        }
                    }
                }
            }
        }
        let bad = SamplerConfig { hard_fraction: 1.5, ..cfg(1, 1) };
        assert!(CandidatePlan::build(PairSampler::DiseaseFactuality, &c, &bad).is_err());
    }

    #[test]
    fn batches_are_deterministic() {
        let c = disease_corpus();
        let plan = CandidatePlan::build(PairSampler::DiseaseFactuality, &c, &cfg(8, 2)).unwrap();
        let policy = AugmentationPolicy::default();
        let a = plan.sample(&c, &cfg(8, 2), &policy, &mut rng::stream(3, 7));
        let b = plan.sample(&c, &cfg(8, 2), &policy, &mut rng::stream(3, 7));
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.jsonl_rows().len(), 8);
    }
}
