//! Datasets and the PLM an experiment runs on.

use std::path::Path;

use promptlab::plm::{pretrain_mlm, MaskedLm};
use promptlab::tasks::{
    derive_icd9_topk, derive_los, derive_mortality, derive_triage, load_records, pretraining_corpus, synthetic_dataset,
    ClinicalRecord, Derived, MortalityFilters, SyntheticProfile, TaskDataset, TaskKind, TriageMapping,
};
use promptlab::Scalar;

use crate::config::{DataSpec, ExperimentConfig, PretrainSpec};
use crate::error::{CliError, CliResult};

pub fn load_mapping(path: Option<&Path>) -> CliResult<TriageMapping> {
    let Some(path) = path else {
        return Ok(TriageMapping::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let m: TriageMapping = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    m.validate()?;
    Ok(m)
}

pub fn load_filters(path: Option<&Path>) -> CliResult<MortalityFilters> {
    let Some(path) = path else {
        return Ok(MortalityFilters::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let f: MortalityFilters = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    f.compile()?;
    Ok(f)
}

/// Apply the derivation rule of `task` to `records`.
pub fn derive_task(task: TaskKind, records: &[ClinicalRecord], spec: &DataSpec) -> CliResult<Derived> {
    let derived = match task {
        TaskKind::Icd9 => derive_icd9_topk(records, spec.top_k)?,
        TaskKind::Triage => derive_triage(records, &load_mapping(spec.mapping.as_deref())?)?,
        TaskKind::Mortality => derive_mortality(records, &load_filters(spec.filters.as_deref())?)?,
        TaskKind::Los => derive_los(records, &spec.los_bins.clone().unwrap_or_default())?,
    };
    Ok(derived)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> CliResult<TaskDataset> {
    let spec = &cfg.data;
    let split_seed = spec.split_seed.unwrap_or(0);
    let ds = if let Some(s) = &spec.synthetic {
        let ds = synthetic_dataset(cfg.task, s.n, s.seed, &s.profile)?;
        match spec.split_seed {
            Some(seed) => ds.with_splits(seed)?,
            None => ds,
        }
    } else if let Some(path) = &spec.dataset {
        TaskDataset::load_jsonl(path)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?
            .with_splits(split_seed)?
    } else if let Some(path) = &spec.records {
        let records = load_records(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        let d = derive_task(cfg.task, &records, spec)?;
        if d.dropped > 0 {
            log::info!("{} of {} records left out by the {} rule", d.dropped, records.len(), cfg.task);
        }
        d.dataset.with_splits(split_seed)?
    } else {
        return Err(CliError::config("data: no source given"));
    };
    if ds.n_classes() < 2 {
        return Err(CliError::runtime(format!("dataset {} has fewer than two classes", ds.name)));
    }
    Ok(ds)
}

/// The corpus named by `spec`: a text file, or synthetic notes with outcome sentences.
pub fn pretraining_lines(spec: &PretrainSpec, task: TaskKind) -> CliResult<Vec<String>> {
    if let Some(path) = &spec.corpus {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        return Ok(text.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect());
    }
    let tasks = spec.tasks.clone().unwrap_or_else(|| vec![task]);
    if tasks.is_empty() {
        return Err(CliError::config("plm.pretrain.tasks must not be empty"));
    }
    Ok(pretraining_corpus(
        &tasks,
        spec.corpus_lines,
        spec.corpus_seed,
        &SyntheticProfile::with_signal(spec.signal_rate),
    )?)
}

pub fn pretrain<T: Scalar>(spec: &PretrainSpec, task: TaskKind) -> CliResult<MaskedLm<T>> {
    let corpus = pretraining_lines(spec, task)?;
    log::info!("pretraining on {} lines for {} epochs", corpus.len(), spec.mlm.epochs);
    let (lm, report) = pretrain_mlm::<T, _>(&corpus, &spec.mlm)?;
    log::info!(
        "holdout MLM loss {:.4} -> {:.4} over {} steps",
        report.initial_holdout_loss,
        report.final_holdout_loss,
        report.steps
    );
    Ok(lm)
}

/// Load the checkpoint if it exists; otherwise pretrain and, when a
/// checkpoint path is set, save it there for the next run.
pub fn obtain_plm<T: Scalar>(cfg: &ExperimentConfig) -> CliResult<MaskedLm<T>> {
    if let Some(path) = cfg.plm.checkpoint.as_deref().filter(|p| p.exists()) {
        log::info!("loading PLM checkpoint {}", path.display());
        return MaskedLm::load(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())));
    }
    let Some(spec) = &cfg.plm.pretrain else {
        let path = cfg.plm.checkpoint.as_deref().unwrap_or(Path::new("?"));
        return Err(CliError::config(format!(
            "plm checkpoint {} not found and no [plm.pretrain] given",
            path.display()
        )));
    };
    let lm = pretrain::<T>(spec, cfg.task)?;
    if let Some(path) = &cfg.plm.checkpoint {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        lm.save(path)?;
        log::info!("saved PLM checkpoint {}", path.display());
    }
    Ok(lm)
}

