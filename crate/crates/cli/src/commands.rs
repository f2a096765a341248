//! Command-line front end. Exit codes: 0 success, 1 configuration error,
//! 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use promptlab::tasks::{generate_synthetic, load_records, save_records, SyntheticProfile, TaskKind};
use promptlab::Paradigm;

use crate::config::{DataSpec, ExperimentConfig, Precision};
use crate::data::{derive_task, pretrain};
use crate::error::{CliError, CliResult};
use crate::report::emit_report;
use crate::runner::{compare_templates, plan_compare, plan_runs, plan_sweep, run_experiment, search, sweep_param_counts};
use crate::{default_output_root, OUT_ENV};

#[derive(Debug, Parser)]
#[command(name = "promptlab", version, about = "Prompt learning vs classic fine-tuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's out_dir, then $PROMPTLAB_OUT/<name>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Runs trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Replace the seed list (and the search master seed) with this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Force the PLM frozen or fine-tuned for every setup.
    #[arg(long)]
    pub frozen: Option<bool>,
}

impl Common {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(f) = self.frozen {
            cfg.override_frozen(f);
        }
        if let Some(s) = self.seed {
            cfg.override_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        cfg.output_dir(self.out.as_deref())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the PLM described by [plm.pretrain] and save a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; defaults to plm.checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pretraining seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Derive a task dataset (JSON-lines) from clinical records or synthetic notes.
    Derive(DeriveArgs),
    /// Train every setup at every sample size and seed.
    Run(Common),
    /// Trainable-parameter sweep with a frozen PLM.
    Sweep(Common),
    /// Compare templates with a shared verbalizer and seed set.
    CompareTemplates(Common),
    /// Random hyperparameter search on a few-shot subset.
    Search(Common),
    /// Collate run files into tables under <dir>/report.
    Report {
        /// Results directory; defaults to --out, then $PROMPTLAB_OUT.
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and print the planned runs.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frozen: Option<bool>,
    },
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    #[arg(long)]
    pub task: TaskKind,
    /// Clinical records, JSON-lines.
    #[arg(long, conflicts_with = "synthetic")]
    pub records: Option<PathBuf>,
    /// Generate this many synthetic records instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Signal rate of synthetic notes.
    #[arg(long, default_value_t = 0.5)]
    pub signal: f64,
    /// Triage mapping file (TOML).
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Mortality filter file (TOML, `patterns = [...]`).
    #[arg(long)]
    pub filters: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub top_k: usize,
    /// Dataset output, JSON-lines `{text, label}`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the generated records here.
    #[arg(long)]
    pub save_records: Option<PathBuf>,
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Pretrain { config, out, seed } => cmd_pretrain(&config, out, seed),
        Command::Derive(a) => cmd_derive(&a),
        Command::Run(c) => {
            let cfg = c.load()?;
            let w = run_experiment(&cfg, &c.out_dir(&cfg), c.workers)?;
            println!("{} runs written; aggregate: {}", w.run_files.len(), w.table.display());
            Ok(())
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let w = sweep_param_counts(&cfg, &c.out_dir(&cfg), c.workers)?;
            println!("{} runs written; curve: {}", w.run_files.len(), w.table.display());
            Ok(())
        }
        Command::CompareTemplates(c) => {
            let cfg = c.load()?;
            let w = compare_templates(&cfg, &c.out_dir(&cfg), c.workers)?;
            println!("{} runs written; table: {}", w.run_files.len(), w.table.display());
            Ok(())
        }
        Command::Search(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            let outcome = search(&cfg, &out, c.workers)?;
            let failed = outcome.trials.iter().filter(|t| t.error.is_some()).count();
            match outcome.best_trial() {
                Some(b) => println!(
                    "best trial {} of {} (seed {}), validation balanced accuracy {:.4}; {failed} failed; results in {}",
                    b.spec.trial,
                    outcome.trials.len(),
                    b.spec.seed,
                    b.metrics.as_ref().map_or(f64::NAN, |m| m.balanced_accuracy),
                    out.display()
                ),
                None => return Err(CliError::runtime("every search trial failed")),
            }
            Ok(())
        }
        Command::Report { dir, out } => {
            let dir = dir.or(out).unwrap_or_else(default_output_root);
            let r = emit_report(&dir)?;
            println!("{} run files collated into {}", r.n_runs, r.dir.display());
            Ok(())
        }
        Command::Validate { config, seed, frozen } => {
            let c = Common {
                config,
                out: None,
                workers: 1,
                seed,
                frozen,
            };
            let cfg = c.load()?;
            println!("{}: ok", cfg.name);
            println!("  task {}, {} setup(s), {} run(s)", cfg.task, cfg.arms().len(), plan_runs(&cfg).len());
            match plan_sweep(&cfg) {
                Ok(j) => println!("  sweep: {} run(s)", j.len()),
                Err(e) => println!("  sweep: unavailable ({e})"),
            }
            match plan_compare(&cfg) {
                Ok(j) => println!("  compare-templates: {} run(s)", j.len()),
                Err(e) => println!("  compare-templates: unavailable ({e})"),
            }
            if cfg.paradigm == Paradigm::Prompt || cfg.head.is_some() {
                println!("  search: {} trial(s), {} per class", cfg.search.n_trials, cfg.search.samples_per_class);
            }
            println!("  output: {} (override with --out or ${OUT_ENV})", cfg.output_dir(None).display());
            Ok(())
        }
    }
}

fn cmd_pretrain(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    let path = out
        .or_else(|| cfg.plm.checkpoint.clone())
        .ok_or_else(|| CliError::config("pretrain needs --out or plm.checkpoint"))?;
    let spec = cfg
        .plm
        .pretrain
        .as_mut()
        .ok_or_else(|| CliError::config("pretrain needs a [plm.pretrain] section"))?;
    if let Some(s) = seed {
        spec.mlm.seed = s;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    match cfg.precision {
        Precision::F32 => pretrain::<f32>(spec, cfg.task)?.save(&path)?,
        Precision::F64 => pretrain::<f64>(spec, cfg.task)?.save(&path)?,
    }
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn cmd_derive(a: &DeriveArgs) -> CliResult<()> {
    let records = match (&a.records, a.synthetic) {
        (Some(p), _) => load_records(p).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?,
        (None, Some(n)) => {
            let profile = SyntheticProfile::with_signal(a.signal);
            profile.validate()?;
            generate_synthetic(a.task, n, a.seed, &profile)?
        }
        (None, None) => return Err(CliError::config("derive needs --records or --synthetic")),
    };
    if let Some(p) = &a.save_records {
        save_records(&records, p)?;
    }
    let spec = DataSpec {
        mapping: a.mapping.clone(),
        filters: a.filters.clone(),
        top_k: a.top_k,
        ..DataSpec::default()
    };
    let d = derive_task(a.task, &records, &spec)?;
    d.dataset.save_jsonl(&a.out)?;
    println!(
        "{}: {} examples, {} classes, {} records left out",
        d.dataset.name,
        d.dataset.len(),
        d.dataset.n_classes(),
        d.dropped
    );
    print!("{}", d.dataset.stats().to_table());
    Ok(())
}
