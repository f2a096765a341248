//! Random hyperparameter search with selection on validation balanced accuracy.

use std::fs::File;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Paradigm;
use crate::training::{MetricsReport, OptimizerKind, TrainConfig};

pub const DEFAULT_TRIALS: usize = 20;
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    /// Log-uniform bounds.
    pub classifier_lr: (f64, f64),
    pub prompt_lr: (f64, f64),
    pub verbalizer_lr: (f64, f64),
    pub batch_size: Vec<usize>,
    /// Inclusive integer range.
    pub grad_accum: (usize, usize),
    pub dropout: (f64, f64),
    pub optimizer: Vec<OptimizerKind>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            classifier_lr: (1e-5, 3e-1),
            prompt_lr: (1e-5, 3e-1),
            verbalizer_lr: (1e-5, 1e-1),
            batch_size: vec![4],
            grad_accum: (2, 10),
            dropout: (0.1, 0.5),
            optimizer: vec![OptimizerKind::Adamw, OptimizerKind::Adafactor],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("classifier_lr", self.classifier_lr),
            ("prompt_lr", self.prompt_lr),
            ("verbalizer_lr", self.verbalizer_lr),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} bounds must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
            }
        }
        let (lo, hi) = self.dropout;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("dropout bounds [{lo}, {hi}] outside [0, 1)")));
        }
        if self.grad_accum.0 == 0 || self.grad_accum.0 > self.grad_accum.1 {
            return Err(Error::Config("grad_accum range must be 1 <= lo <= hi".into()));
        }
        if self.batch_size.is_empty() || self.batch_size.contains(&0) {
            return Err(Error::Config("batch_size choices must be non-empty and positive".into()));
        }
        if self.optimizer.is_empty() {
            return Err(Error::Config("optimizer choices must be non-empty".into()));
        }
        Ok(())
    }
}

/// One draw from the space. Prompt and verbalizer rates are `None` for the
/// classic paradigm, which has neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledConfig {
    pub classifier_lr: f64,
    pub prompt_lr: Option<f64>,
    pub verbalizer_lr: Option<f64>,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let x = if lo == hi { lo } else { rng.random_range(lo.ln()..hi.ln()).exp() };
    // exp(ln(x)) can round just past a bound
    x.clamp(lo, hi)
}

fn choose<R: Rng, V: Copy>(rng: &mut R, xs: &[V]) -> V {
    xs[rng.random_range(0..xs.len())]
}

pub fn sample<R: Rng>(space: &SearchSpace, paradigm: Paradigm, rng: &mut R) -> SampledConfig {
    let classifier_lr = log_uniform(rng, space.classifier_lr);
    let (prompt_lr, verbalizer_lr) = match paradigm {
        Paradigm::Prompt => (
            Some(log_uniform(rng, space.prompt_lr)),
            Some(log_uniform(rng, space.verbalizer_lr)),
        ),
        Paradigm::Classic => (None, None),
    };
    SampledConfig {
        classifier_lr,
        prompt_lr,
        verbalizer_lr,
        batch_size: choose(rng, &space.batch_size),
        grad_accum: rng.random_range(space.grad_accum.0..=space.grad_accum.1),
        dropout: if space.dropout.0 == space.dropout.1 {
            space.dropout.0
        } else {
            rng.random_range(space.dropout.0..space.dropout.1)
        },
        optimizer: choose(rng, &space.optimizer),
    }
}

impl SampledConfig {
    /// Overlay onto `base`. The classifier rate drives the encoder and the
    /// classic head; the optimizer choice applies to the head (classic) or
    /// the soft template (prompt).
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.lr.plm = self.classifier_lr;
        cfg.lr.head = self.classifier_lr;
        if let Some(lr) = self.prompt_lr {
            cfg.lr.template = lr;
            cfg.optimizer.template = self.optimizer;
        } else {
            cfg.optimizer.head = self.optimizer;
        }
        if let Some(lr) = self.verbalizer_lr {
            cfg.lr.verbalizer = lr;
        }
        cfg.batch_size = self.batch_size;
        cfg.grad_accum_steps = self.grad_accum;
        cfg.dropout = self.dropout;
        cfg
    }
}

/// Draw a training configuration from `space` on top of `base`.
pub fn sample_config<R: Rng>(space: &SearchSpace, paradigm: Paradigm, base: &TrainConfig, rng: &mut R) -> TrainConfig {
    sample(space, paradigm, rng).apply(base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub trial: usize,
    pub seed: u64,
    pub sampled: SampledConfig,
}

impl TrialSpec {
    /// The spec of trial `trial` drawn with `seed`; re-deriving it gives the same draw.
    pub fn draw(space: &SearchSpace, paradigm: Paradigm, trial: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            trial,
            seed,
            sampled: sample(space, paradigm, &mut rng),
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = self.sampled.apply(base);
        cfg.seed = self.seed;
        cfg
    }
}

/// Trial seeds come from `master_seed`; each trial's draw depends only on its own seed.
pub fn plan_trials(space: &SearchSpace, paradigm: Paradigm, n_trials: usize, master_seed: u64) -> Result<Vec<TrialSpec>> {
    space.validate()?;
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    Ok((0..n_trials).map(|t| TrialSpec::draw(space, paradigm, t, rng.random())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub spec: TrialSpec,
    pub config: TrainConfig,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub paradigm: Paradigm,
    pub trials: Vec<TrialResult>,
    /// Index into `trials`; `None` if every trial failed.
    pub best: Option<usize>,
}

/// Highest validation balanced accuracy; the earliest trial wins ties.
pub fn select_best(trials: &[TrialResult]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trials.iter().enumerate() {
        if let Some(m) = &t.metrics {
            if best.is_none_or(|(_, b)| m.balanced_accuracy > b) {
                best = Some((i, m.balanced_accuracy));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "trial panicked".into())
}

/// Run `objective` on every trial over `workers` threads. A failing or
/// panicking trial is recorded and the search goes on.
pub fn run_trials<F>(paradigm: Paradigm, specs: Vec<TrialSpec>, base: &TrainConfig, workers: usize, objective: F) -> SearchOutcome
where
    F: Fn(&TrialSpec, &TrainConfig) -> Result<MetricsReport> + Sync,
{
    let slots: Vec<Mutex<Option<TrialResult>>> = specs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(spec) = specs.get(i) else { break };
        let config = spec.train_config(base);
        let start = Instant::now();
        let (metrics, error) = match catch_unwind(AssertUnwindSafe(|| objective(spec, &config))) {
            Ok(Ok(m)) => (Some(m), None),
            Ok(Err(e)) => (None, Some(e.to_string())),
            Err(p) => (None, Some(panic_message(p))),
        };
        if let Some(e) = &error {
            log::warn!("trial {} failed: {e}", spec.trial);
        }
        *slots[i].lock().unwrap() = Some(TrialResult {
            spec: spec.clone(),
            config,
            metrics,
            error,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    };
    let workers = workers.clamp(1, specs.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    let trials: Vec<TrialResult> = slots.into_iter().map(|m| m.into_inner().unwrap().expect("every trial ran")).collect();
    SearchOutcome {
        paradigm,
        best: select_best(&trials),
        trials,
    }
}

pub fn run_search<F>(
    space: &SearchSpace,
    paradigm: Paradigm,
    n_trials: usize,
    master_seed: u64,
    base: &TrainConfig,
    workers: usize,
    objective: F,
) -> Result<SearchOutcome>
where
    F: Fn(&TrialSpec, &TrainConfig) -> Result<MetricsReport> + Sync,
{
    let specs = plan_trials(space, paradigm, n_trials, master_seed)?;
    Ok(run_trials(paradigm, specs, base, workers, objective))
}

impl SearchOutcome {
    pub fn best_trial(&self) -> Option<&TrialResult> {
        self.best.map(|i| &self.trials[i])
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "trial",
            "seed",
            "classifier_lr",
            "prompt_lr",
            "verbalizer_lr",
            "batch_size",
            "grad_accum",
            "dropout",
            "optimizer",
            "val_balanced_accuracy",
            "val_f1_weighted",
            "val_auc",
            "wall_time_s",
            "error",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:e}"));
        for t in &self.trials {
            let s = &t.spec.sampled;
            let m = t.metrics.as_ref();
            w.write_record([
                t.spec.trial.to_string(),
                t.spec.seed.to_string(),
                format!("{:e}", s.classifier_lr),
                opt(s.prompt_lr),
                opt(s.verbalizer_lr),
                s.batch_size.to_string(),
                s.grad_accum.to_string(),
                format!("{:.4}", s.dropout),
                s.optimizer.as_str().to_string(),
                m.map_or(String::new(), |m| format!("{:.6}", m.balanced_accuracy)),
                m.map_or(String::new(), |m| format!("{:.6}", m.f1_weighted)),
                m.map_or(String::new(), |m| format!("{:.6}", m.auc_macro_ovr)),
                format!("{:.3}", t.wall_time_s),
                t.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}
