//! Scheduling and bookkeeping of training runs.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use promptlab::head::MlpHeadConfig;
use promptlab::hpsearch::{run_search, SearchOutcome};
use promptlab::plm::MaskedLm;
use promptlab::tasks::{default_verbalizer_words, Example, SplitName, TaskDataset, TaskKind};
use promptlab::template::Template;
use promptlab::training::{evaluate, few_shot_sample, train, EpochRecord, MetricsReport, TrainConfig};
use promptlab::verbalizer::VerbalizerSpec;
use promptlab::{Classifier, Paradigm, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{Arm, ExperimentConfig, Precision, SampleSize};
use crate::data::{load_dataset, obtain_plm};
use crate::error::{CliError, CliResult};

/// What produced a run; the report sorts runs into tables by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Run,
    Sweep,
    Compare,
}

impl Purpose {
    fn dir(self) -> &'static str {
        match self {
            Purpose::Run => "runs",
            Purpose::Sweep => "sweep_runs",
            Purpose::Compare => "compare_runs",
        }
    }
}

/// One (setup, sample size, seed) cell to train and test.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub purpose: Purpose,
    /// Position of the setup in its list, kept for output order.
    pub order: usize,
    pub arm: Arm,
    pub sample_size: SampleSize,
    pub seed: u64,
}

impl Job {
    pub fn file_name(&self) -> String {
        let label: String = self
            .arm
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{:02}_{label}__s{}__seed{}.json", self.order, self.sample_size, self.seed)
    }
}

/// Everything needed to trace and re-run one result. No timings, so a rerun
/// writes the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub purpose: Purpose,
    pub order: usize,
    pub label: String,
    pub task: TaskKind,
    pub dataset: String,
    pub class_names: Vec<String>,
    pub paradigm: Paradigm,
    pub template: Option<String>,
    pub template_kind: Option<String>,
    pub verbalizer_kind: Option<String>,
    pub verbalizer: Option<VerbalizerSpec>,
    pub head: Option<MlpHeadConfig>,
    pub plm_frozen: bool,
    pub sample_size: SampleSize,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_trainable_params: usize,
    pub trainable_by_group: BTreeMap<String, usize>,
    pub train_config: TrainConfig,
    pub best_epoch: usize,
    pub val: Option<MetricsReport>,
    pub test: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub config: ExperimentConfig,
}

/// The loaded data and PLM shared by every run of an experiment.
pub struct Context<T> {
    pub cfg: ExperimentConfig,
    pub dataset: TaskDataset,
    pub plm: MaskedLm<T>,
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
}

impl<T: Scalar> Context<T> {
    pub fn new(cfg: ExperimentConfig) -> CliResult<Self> {
        let dataset = load_dataset(&cfg)?;
        let plm = obtain_plm::<T>(&cfg)?;
        Ok(Self::with_parts(cfg, dataset, plm))
    }

    pub fn with_parts(cfg: ExperimentConfig, dataset: TaskDataset, plm: MaskedLm<T>) -> Self {
        let (train, val, test) = (
            dataset.split(SplitName::Train),
            dataset.split(SplitName::Val),
            dataset.split(SplitName::Test),
        );
        Self {
            cfg,
            dataset,
            plm,
            train,
            val,
            test,
        }
    }

    /// Task default words stand in for an empty manual word list.
    pub fn resolve_verbalizer(&self, spec: &VerbalizerSpec) -> VerbalizerSpec {
        let mut spec = spec.clone();
        if !spec.soft && spec.words.is_empty() {
            spec.words = default_verbalizer_words(self.cfg.task)
                .into_iter()
                .filter(|(c, _)| self.dataset.class_names.contains(c))
                .collect();
        }
        spec
    }

    pub fn build_model(&self, arm: &Arm, seed: u64) -> CliResult<Classifier<T>> {
        let lm = self.plm.clone();
        let classes = self.dataset.class_names.clone();
        let model = match arm.paradigm {
            Paradigm::Prompt => {
                let text = arm.template.as_deref().ok_or_else(|| CliError::config("prompt setup without template"))?;
                let template =
                    Template::parse(text).map_err(|e| CliError::config(format!("{}: template {text:?}: {e}", arm.label)))?;
                let spec = self.resolve_verbalizer(
                    arm.verbalizer.as_ref().ok_or_else(|| CliError::config("prompt setup without verbalizer"))?,
                );
                Classifier::prompt(lm, template, &spec, classes, seed)
                    .map_err(|e| CliError::from(e).with_context(&arm.label))?
            }
            Paradigm::Classic => {
                let head = arm.head.clone().ok_or_else(|| CliError::config("classic setup without head"))?;
                Classifier::classic(lm, head, classes, seed).map_err(|e| CliError::from(e).with_context(&arm.label))?
            }
        };
        Ok(model)
    }

    /// Training examples of a run: `s` per class drawn with the run seed, or the whole train split.
    pub fn training_subset(&self, size: SampleSize, seed: u64) -> CliResult<Vec<Example>> {
        match size {
            SampleSize::Full => Ok(self.train.clone()),
            SampleSize::PerClass(s) => {
                let labels: Vec<usize> = self.train.iter().map(|e| e.label).collect();
                let idx = few_shot_sample(&labels, s, seed)?;
                Ok(idx.into_iter().map(|i| self.train[i].clone()).collect())
            }
        }
    }

    pub fn train_config(&self, arm: &Arm, size: SampleSize, seed: u64) -> TrainConfig {
        let mut cfg = self.cfg.train.clone();
        cfg.seed = seed;
        cfg.plm_frozen = arm.plm_frozen;
        if let (SampleSize::Full, Some(e)) = (size, self.cfg.full_epochs) {
            cfg.epochs = e;
        }
        cfg
    }

    pub fn run_job(&self, job: &Job) -> CliResult<RunRecord> {
        let arm = &job.arm;
        let mut model = self.build_model(arm, job.seed)?;
        let train_data = self.training_subset(job.sample_size, job.seed)?;
        let tc = self.train_config(arm, job.sample_size, job.seed);
        let outcome = train(&mut model, &train_data, &self.val, &tc)?;
        let test = evaluate(&model, &self.test)?;
        let template_kind = match &model.head {
            promptlab::model::Head::Prompt(p) => Some(p.template.kind().as_str().to_string()),
            promptlab::model::Head::Classic(_) => None,
        };
        let verbalizer_kind = match &model.head {
            promptlab::model::Head::Prompt(p) => Some(p.verbalizer.kind_str().to_string()),
            promptlab::model::Head::Classic(_) => None,
        };
        log::info!(
            "{} s={} seed={}: test balanced accuracy {:.4} ({} trainable)",
            arm.label,
            job.sample_size,
            job.seed,
            test.balanced_accuracy,
            outcome.n_trainable_params
        );
        Ok(RunRecord {
            experiment: self.cfg.name.clone(),
            purpose: job.purpose,
            order: job.order,
            label: arm.label.clone(),
            task: self.cfg.task,
            dataset: self.dataset.name.clone(),
            class_names: self.dataset.class_names.clone(),
            paradigm: arm.paradigm,
            template: arm.template.clone(),
            template_kind,
            verbalizer_kind,
            verbalizer: arm.verbalizer.as_ref().map(|v| self.resolve_verbalizer(v)),
            head: arm.head.clone(),
            plm_frozen: arm.plm_frozen,
            sample_size: job.sample_size,
            seed: job.seed,
            n_train: train_data.len(),
            n_val: self.val.len(),
            n_test: self.test.len(),
            n_trainable_params: outcome.n_trainable_params,
            trainable_by_group: model
                .trainable_by_group()
                .into_iter()
                .map(|(g, n)| (g.to_string(), n))
                .collect(),
            train_config: tc,
            best_epoch: outcome.best_epoch,
            val: outcome.best_val,
            test,
            history: outcome.history,
            config: self.cfg.clone(),
        })
    }
}

impl CliError {
    fn with_context(self, label: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{label}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{label}: {m}")),
        }
    }
}

/// Apply `f` to every job over `workers` threads; results come back in job order.
pub fn run_pool<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(i) else { break };
        let r = f(job);
        *slots[i].lock().unwrap() = Some(r);
    };
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every job ran")).collect()
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Run `jobs`, each worker writing its own run file under `dir`. Failed jobs
/// are collected, not fatal, so the remaining runs still land on disk.
pub fn execute<T: Scalar>(ctx: &Context<T>, jobs: &[Job], dir: &Path, workers: usize) -> CliResult<(Vec<RunRecord>, Vec<String>)> {
    std::fs::create_dir_all(dir)?;
    let results = run_pool(jobs, workers, |job| {
        let r = catch_unwind(AssertUnwindSafe(|| ctx.run_job(job)))
            .unwrap_or_else(|_| Err(CliError::runtime(format!("{} panicked", job.file_name()))))?;
        write_json(&dir.join(job.file_name()), &r)?;
        Ok::<_, CliError>(r)
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(CliError::Config(m)) => return Err(CliError::Config(m)),
            Err(e) => failures.push(format!("{}: {e}", job.file_name())),
        }
    }
    Ok((records, failures))
}

fn finish(failures: Vec<String>) -> CliResult<()> {
    if failures.is_empty() {
        Ok(())
    } else {
        for f in &failures {
            log::error!("{f}");
        }
        Err(CliError::runtime(format!("{} run(s) failed; first: {}", failures.len(), failures[0])))
    }
}

/// Mean and sample standard deviation (blank below two values).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub sd: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, sd }
    }

    pub fn mean_str(&self) -> String {
        fmt_num(self.mean)
    }

    pub fn sd_str(&self) -> String {
        self.sd.map(fmt_num).unwrap_or_default()
    }
}

pub fn fmt_num(x: f64) -> String {
    format!("{x:.6}")
}

/// The runs of one (setup, sample size) cell, ordered by seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell<'a> {
    pub runs: Vec<&'a RunRecord>,
}

impl<'a> Cell<'a> {
    pub fn first(&self) -> &'a RunRecord {
        self.runs[0]
    }

    pub fn seeds(&self) -> String {
        self.runs.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(";")
    }

    pub fn stat(&self, f: impl Fn(&MetricsReport) -> f64) -> Stat {
        Stat::of(&self.runs.iter().map(|r| f(&r.test)).collect::<Vec<_>>())
    }
}

type CellKey = (Purpose, TaskKind, String, usize, String, SampleSize, bool);

/// Group by (purpose, order, label, sample size); groups come out sorted by
/// that key and runs within a group by seed, so the input order never matters.
pub fn cells(records: &[RunRecord]) -> Vec<Cell<'_>> {
    let mut groups: BTreeMap<CellKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.purpose, r.task, r.experiment.clone(), r.order, r.label.clone(), r.sample_size, r.plm_frozen))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|mut runs| {
            runs.sort_by_key(|r| r.seed);
            Cell { runs }
        })
        .collect()
}

pub const AGGREGATE_HEADER: [&str; 17] = [
    "task",
    "label",
    "paradigm",
    "template_kind",
    "verbalizer_kind",
    "plm_frozen",
    "sample_size",
    "n_seeds",
    "seeds",
    "n_trainable_params",
    "n_train",
    "balanced_accuracy_mean",
    "balanced_accuracy_sd",
    "f1_weighted_mean",
    "f1_weighted_sd",
    "auc_mean",
    "auc_sd",
];

pub fn write_aggregate(path: &Path, records: &[RunRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGGREGATE_HEADER)?;
    for c in cells(records) {
        let r = c.first();
        let (ba, f1, auc) = (
            c.stat(|m| m.balanced_accuracy),
            c.stat(|m| m.f1_weighted),
            c.stat(|m| m.auc_macro_ovr),
        );
        w.write_record([
            r.task.to_string(),
            r.label.clone(),
            r.paradigm.as_str().to_string(),
            r.template_kind.clone().unwrap_or_default(),
            r.verbalizer_kind.clone().unwrap_or_default(),
            r.plm_frozen.to_string(),
            r.sample_size.to_string(),
            c.runs.len().to_string(),
            c.seeds(),
            r.n_trainable_params.to_string(),
            r.n_train.to_string(),
            ba.mean_str(),
            ba.sd_str(),
            f1.mean_str(),
            f1.sd_str(),
            auc.mean_str(),
            auc.sd_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn plan_runs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for (order, arm) in cfg.arms().into_iter().enumerate() {
        for &sample_size in &cfg.sample_sizes {
            for &seed in &cfg.seeds {
                jobs.push(Job {
                    purpose: Purpose::Run,
                    order,
                    arm: arm.clone(),
                    sample_size,
                    seed,
                });
            }
        }
    }
    jobs
}

/// Setups of the parameter-count sweep: prompt over soft-token counts and
/// verbalizer kinds, classic over head widths. All run with a frozen PLM.
pub fn plan_sweep(cfg: &ExperimentConfig) -> CliResult<Vec<Job>> {
    if !cfg.train.plm_frozen {
        return Err(CliError::config("sweep needs a frozen PLM (set train.plm_frozen = true or pass --frozen true)"));
    }
    let sw = &cfg.sweep;
    let mut arms = Vec::new();
    for &k in &sw.soft_token_counts {
        for &soft in &sw.soft_verbalizer {
            let verbalizer = VerbalizerSpec {
                soft,
                ..cfg.verbalizer.clone().unwrap_or_default()
            };
            arms.push(Arm {
                label: format!("prompt-k{k}-{}", if soft { "soft" } else { "manual" }),
                paradigm: Paradigm::Prompt,
                template: Some(sw.template(k)),
                verbalizer: Some(verbalizer),
                head: None,
                plm_frozen: true,
            });
        }
    }
    for dims in &sw.hidden_dims {
        let label = if dims.is_empty() {
            "classic-linear".to_string()
        } else {
            format!("classic-h{}", dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
        };
        arms.push(Arm {
            label,
            paradigm: Paradigm::Classic,
            template: None,
            verbalizer: None,
            head: Some(MlpHeadConfig {
                hidden_dims: dims.clone(),
                ..cfg.head.clone().unwrap_or_default()
            }),
            plm_frozen: true,
        });
    }
    Ok(expand(Purpose::Sweep, arms, &[SampleSize::PerClass(sw.samples_per_class)], &cfg.seeds))
}

pub fn plan_compare(cfg: &ExperimentConfig) -> CliResult<Vec<Job>> {
    let verbalizer = cfg
        .verbalizer
        .clone()
        .ok_or_else(|| CliError::config("compare-templates requires `[verbalizer]`"))?;
    let arms: Vec<Arm> = cfg
        .compare
        .templates
        .iter()
        .map(|t| Arm {
            label: t.label.clone(),
            paradigm: Paradigm::Prompt,
            template: Some(t.template.clone()),
            verbalizer: Some(verbalizer.clone()),
            head: None,
            plm_frozen: cfg.train.plm_frozen,
        })
        .collect();
    for a in &arms {
        a.validate()?;
    }
    Ok(expand(Purpose::Compare, arms, &[cfg.compare.sample_size], &cfg.seeds))
}

fn expand(purpose: Purpose, arms: Vec<Arm>, sizes: &[SampleSize], seeds: &[u64]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for (order, arm) in arms.into_iter().enumerate() {
        for &sample_size in sizes {
            for &seed in seeds {
                jobs.push(Job {
                    purpose,
                    order,
                    arm: arm.clone(),
                    sample_size,
                    seed,
                });
            }
        }
    }
    jobs
}

/// Files written by one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Written {
    pub records: Vec<RunRecord>,
    pub run_files: Vec<PathBuf>,
    pub table: PathBuf,
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Train and test every (setup, sample size, seed); write one JSON per run
/// and `aggregate.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<Written> {
    with_precision!(cfg, run_experiment_t(cfg, out, workers))
}

fn run_experiment_t<T: Scalar>(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<Written> {
    let jobs = plan_runs(cfg);
    let ctx = Context::<T>::new(cfg.clone())?;
    run_jobs(&ctx, &jobs, out, workers, Purpose::Run, "aggregate.csv", write_aggregate)
}

fn run_jobs<T: Scalar>(
    ctx: &Context<T>,
    jobs: &[Job],
    out: &Path,
    workers: usize,
    purpose: Purpose,
    table: &str,
    write: fn(&Path, &[RunRecord]) -> CliResult<()>,
) -> CliResult<Written> {
    let dir = out.join(purpose.dir());
    let (records, failures) = execute(ctx, jobs, &dir, workers)?;
    let table = out.join(table);
    write(&table, &records)?;
    finish(failures)?;
    Ok(Written {
        run_files: jobs.iter().map(|j| dir.join(j.file_name())).collect(),
        records,
        table,
    })
}

pub const SWEEP_HEADER: [&str; 7] = [
    "paradigm",
    "label",
    "n_params",
    "n_seeds",
    "seeds",
    "balanced_accuracy_mean",
    "balanced_accuracy_sd",
];

/// One row per setup, ascending in trainable parameters.
pub fn write_sweep(path: &Path, records: &[RunRecord]) -> CliResult<()> {
    let mut rows: Vec<Cell> = cells(records);
    rows.sort_by(|a, b| {
        let (x, y) = (a.first(), b.first());
        (x.n_trainable_params, x.paradigm, &x.label).cmp(&(y.n_trainable_params, y.paradigm, &y.label))
    });
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for c in rows {
        let r = c.first();
        let ba = c.stat(|m| m.balanced_accuracy);
        w.write_record([
            r.paradigm.as_str().to_string(),
            r.label.clone(),
            r.n_trainable_params.to_string(),
            c.runs.len().to_string(),
            c.seeds(),
            ba.mean_str(),
            ba.sd_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep_param_counts(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<Written> {
    let jobs = plan_sweep(cfg)?;
    with_precision!(cfg, sweep_t(cfg, &jobs, out, workers))
}

fn sweep_t<T: Scalar>(cfg: &ExperimentConfig, jobs: &[Job], out: &Path, workers: usize) -> CliResult<Written> {
    let ctx = Context::<T>::new(cfg.clone())?;
    run_jobs(&ctx, jobs, out, workers, Purpose::Sweep, "sweep.csv", write_sweep)
}

pub const COMPARE_HEADER: [&str; 10] = [
    "order",
    "label",
    "template",
    "n_seeds",
    "seeds",
    "n_trainable_params",
    "balanced_accuracy_mean",
    "balanced_accuracy_sd",
    "f1_weighted_mean",
    "auc_mean",
];

/// One row per template, in the listed order.
pub fn write_compare(path: &Path, records: &[RunRecord]) -> CliResult<()> {
    let mut rows: Vec<Cell> = cells(records);
    rows.sort_by_key(|c| c.first().order);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COMPARE_HEADER)?;
    for c in rows {
        let r = c.first();
        let ba = c.stat(|m| m.balanced_accuracy);
        w.write_record([
            r.order.to_string(),
            r.label.clone(),
            r.template.clone().unwrap_or_default(),
            c.runs.len().to_string(),
            c.seeds(),
            r.n_trainable_params.to_string(),
            ba.mean_str(),
            ba.sd_str(),
            c.stat(|m| m.f1_weighted).mean_str(),
            c.stat(|m| m.auc_macro_ovr).mean_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn compare_templates(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<Written> {
    let jobs = plan_compare(cfg)?;
    with_precision!(cfg, compare_t(cfg, &jobs, out, workers))
}

fn compare_t<T: Scalar>(cfg: &ExperimentConfig, jobs: &[Job], out: &Path, workers: usize) -> CliResult<Written> {
    let ctx = Context::<T>::new(cfg.clone())?;
    run_jobs(&ctx, jobs, out, workers, Purpose::Compare, "compare.csv", write_compare)
}

/// Random search for the top-level setup on a few-shot subset drawn once
/// with the master seed. Writes `search.json` and `search.csv`.
pub fn search(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<SearchOutcome> {
    with_precision!(cfg, search_t(cfg, out, workers))
}

fn search_t<T: Scalar>(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<SearchOutcome> {
    let ctx = Context::<T>::new(cfg.clone())?;
    let outcome = search_with(&ctx, workers)?;
    std::fs::create_dir_all(out)?;
    outcome.write_json(out.join("search.json"))?;
    outcome.write_csv(out.join("search.csv"))?;
    Ok(outcome)
}

pub fn search_with<T: Scalar>(ctx: &Context<T>, workers: usize) -> CliResult<SearchOutcome> {
    let cfg = &ctx.cfg;
    let s = &cfg.search;
    let arm = cfg.base_arm(cfg.paradigm.as_str().to_string());
    let subset = ctx.training_subset(SampleSize::PerClass(s.samples_per_class), s.master_seed)?;
    let mut base = cfg.train.clone();
    base.plm_frozen = arm.plm_frozen;
    let outcome = run_search(&s.space, arm.paradigm, s.n_trials, s.master_seed, &base, workers, |spec, tc| {
        let mut model = ctx.build_model(&arm, spec.seed).map_err(|e| promptlab::Error::Config(e.to_string()))?;
        let o = train(&mut model, &subset, &ctx.val, tc)?;
        o.best_val.ok_or(promptlab::Error::Empty("validation split"))
    })?;
    if let Some(best) = outcome.best_trial() {
        log::info!(
            "best trial {} (seed {}): validation balanced accuracy {:.4}",
            best.spec.trial,
            best.spec.seed,
            best.metrics.as_ref().map_or(f64::NAN, |m| m.balanced_accuracy)
        );
    }
    Ok(outcome)
}
