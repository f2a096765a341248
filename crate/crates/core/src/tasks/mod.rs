//! Clinical-style tasks: records, derivation rules, synthetic data and splits.

pub mod dataset;
pub mod derive;
pub mod records;
pub mod synthetic;

pub use dataset::{split_70_10_20, ClassStats, Example, SplitName, Splits, TaskDataset};
pub use derive::{derive_icd9_topk, derive_los, derive_mortality, derive_triage, Derived, LosBins, MortalityFilters};
pub use records::{load_records, save_records, ClinicalRecord, TriageMapping, TRIAGE_TEAMS};
pub use synthetic::{
    default_verbalizer_words, generate_synthetic, pretraining_corpus, synthetic_dataset, SyntheticProfile, TaskKind,
};
