//! Fine-tuning on a planted synthetic corpus recovers negated findings.

use radcl::classifier::{classify, finetune, report_ids, FinetuneConfig, FinetuneMode};
use radcl::corpus::{parse_report, Corpus};
use radcl::encoder::{EncoderConfig, Model, Vocabulary};
use radcl::labels::{Label, LabelVector, Observation};
use radcl::synthetic::{generate, GeneratorSpec};

fn consolidation_label(seed: u64) -> Label {
    let reports = generate(&GeneratorSpec { n_patients: 300, seed: 50 + seed, ..Default::default() }).unwrap();
    let records: Vec<_> = reports.iter().map(|r| r.record.clone()).collect();
    let corpus = Corpus::from_records(&records).unwrap();
    let vocab = Vocabulary::build(corpus.reports.iter().flat_map(|r| r.sentences.iter().flat_map(|s| s.lemmas())), 1, None);
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_layers: 1,
        n_heads: 4,
        d_ff: 64,
        proj_dim: 16,
        ..Default::default()
    };
    let mut model = Model::<f32>::new(cfg, seed).unwrap();
    let seqs: Vec<Vec<u32>> = corpus.reports.iter().map(|r| report_ids(r, &vocab, 128)).collect();
    let golds: Vec<LabelVector> = reports.iter().map(|r| r.gold).collect();
    let ft = FinetuneConfig { mode: FinetuneMode::Full, lr: 1e-2, encoder_lr: Some(1e-3), epochs: 30, batch_size: 32, seed };
    finetune(&mut model, &seqs, &golds, &ft).unwrap();
    let probe = parse_report("FINDINGS: No focal consolidation.", "q", "q").unwrap();
    classify(&model, &report_ids(&probe, &vocab, 128)).labels.get(Observation::Consolidation)
}

#[test]
fn negated_consolidation_is_predicted_negative() {
    let labels: Vec<Label> = (0..5).map(consolidation_label).collect();
    let negative = labels.iter().filter(|&&l| l == Label::Negative).count();
    assert!(negative >= 3, "{labels:?}");
}
