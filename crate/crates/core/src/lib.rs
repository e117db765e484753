//! Fact-preserving contrastive pre-training and classification of chest
//! radiology reports.

pub mod corpus;
pub mod info;
pub mod labels;
pub mod augment;
pub mod rng;
pub mod tensor;
pub mod encoder;
pub mod contrastive;
pub mod kv;
pub mod classifier;
pub mod evaluation;
pub mod synthetic;
pub mod cli;
