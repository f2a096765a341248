//! Experiment configuration, read from TOML.
//!
//! ```toml
//! name = "triage-frozen"
//! task = "triage"
//! paradigm = "prompt"
//! template = '{text} {soft:"This"} patient {soft:"should go to"} {mask} .'
//! sample_sizes = [16, 32, "full"]
//! seeds = [0, 1, 2]
//!
//! [verbalizer]
//! soft = true
//!
//! [data.synthetic]
//! n = 2800
//! seed = 1
//!
//! [plm]
//! checkpoint = "plm.ckpt"
//! [plm.pretrain]
//! corpus_lines = 4000
//!
//! [train]
//! plm_frozen = true
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use promptlab::head::MlpHeadConfig;
use promptlab::hpsearch::{SearchSpace, DEFAULT_SAMPLES_PER_CLASS, DEFAULT_TRIALS};
use promptlab::plm::PretrainConfig;
use promptlab::tasks::{LosBins, SyntheticProfile, TaskKind};
use promptlab::template::Template;
use promptlab::training::TrainConfig;
use promptlab::verbalizer::VerbalizerSpec;
use promptlab::Paradigm;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CliError, CliResult};

/// Training-set size of one run: `s` examples per class, or the whole train split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleSize {
    PerClass(usize),
    Full,
}

impl fmt::Display for SampleSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSize::PerClass(s) => write!(f, "{s}"),
            SampleSize::Full => f.write_str("full"),
        }
    }
}

impl FromStr for SampleSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(SampleSize::Full);
        }
        s.parse()
            .map(SampleSize::PerClass)
            .map_err(|_| format!("sample size must be a positive integer or \"full\", got {s:?}"))
    }
}

impl Serialize for SampleSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SampleSize::PerClass(n) => s.serialize_u64(*n as u64),
            SampleSize::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for SampleSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(SampleSize::PerClass(n as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub profile: SyntheticProfile,
}

/// Exactly one of `synthetic`, `dataset` (JSON-lines `{text, label}`) or
/// `records` (JSON-lines clinical records, derived with the task's rule).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub records: Option<PathBuf>,
    /// Triage mapping file; the built-in mapping when absent.
    #[serde(default)]
    pub mapping: Option<PathBuf>,
    /// Mortality filter file (`patterns = [...]`); the built-in list when absent.
    #[serde(default)]
    pub filters: Option<PathBuf>,
    #[serde(default)]
    pub los_bins: Option<LosBins>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Re-split with this seed; synthetic data is otherwise split with its own seed.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

fn default_top_k() -> usize {
    50
}

/// How to build the PLM when no checkpoint exists yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    /// Plain-text corpus, one sequence per line. The synthetic corpus is used when absent.
    pub corpus: Option<PathBuf>,
    pub corpus_lines: usize,
    /// Tasks feeding the synthetic corpus; the experiment's task when absent.
    pub tasks: Option<Vec<TaskKind>>,
    pub signal_rate: f64,
    pub corpus_seed: u64,
    pub mlm: PretrainConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            corpus: None,
            corpus_lines: 4000,
            tasks: None,
            signal_rate: 0.8,
            corpus_seed: 0,
            mlm: PretrainConfig::default(),
        }
    }
}

/// A checkpoint path, a pretraining recipe, or both (pretrain once, then reuse).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlmSpec {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub pretrain: Option<PretrainSpec>,
}

/// One model setup inside an experiment. Unset fields fall back to the
/// top-level values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default)]
    pub paradigm: Option<Paradigm>,
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub verbalizer: Option<VerbalizerSpec>,
    #[serde(default)]
    pub head: Option<MlpHeadConfig>,
    #[serde(default)]
    pub plm_frozen: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub n_trials: usize,
    pub samples_per_class: usize,
    pub master_seed: u64,
    pub space: SearchSpace,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            n_trials: DEFAULT_TRIALS,
            samples_per_class: DEFAULT_SAMPLES_PER_CLASS,
            master_seed: 0,
            space: SearchSpace::default(),
        }
    }
}

pub const SWEEP_INIT_PHRASE: &str = "this patient should go to this medical team based on symptoms of their illness";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub soft_token_counts: Vec<usize>,
    pub soft_verbalizer: Vec<bool>,
    /// Hidden layer widths of each classic head; `[]` is a single linear layer.
    pub hidden_dims: Vec<Vec<usize>>,
    pub samples_per_class: usize,
    /// Soft tokens are initialized from these words in turn.
    pub init_phrase: String,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            soft_token_counts: vec![1, 2, 4, 8],
            soft_verbalizer: vec![false, true],
            hidden_dims: vec![vec![], vec![16], vec![64], vec![256], vec![64, 64]],
            samples_per_class: DEFAULT_SAMPLES_PER_CLASS,
            init_phrase: SWEEP_INIT_PHRASE.into(),
        }
    }
}

impl SweepSection {
    /// `{text}` followed by `k` soft tokens and the mask.
    pub fn template(&self, k: usize) -> String {
        let words: Vec<&str> = self.init_phrase.split_whitespace().collect();
        let mut t = String::from("{text}");
        for i in 0..k {
            match words.get(i % words.len().max(1)) {
                Some(w) => t.push_str(&format!(" {{soft:\"{w}\"}}")),
                None => t.push_str(" {soft}"),
            }
        }
        t.push_str(" {mask} .");
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledTemplate {
    pub label: String,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub templates: Vec<LabeledTemplate>,
    pub sample_size: SampleSize,
}

/// The five mixed templates compared on the triage task, the last being the
/// random-word control.
pub fn default_compare_templates() -> Vec<LabeledTemplate> {
    [
        ("single-soft", r#"{text} {soft:"This"} {mask}"#),
        ("soft-should-go-to", r#"{text} {soft:"This"} patient {soft:"should go to"} {mask}."#),
        ("soft-go-to", r#"{text} {soft:"This"} patient should {soft:"go to"} {mask}."#),
        (
            "soft-long",
            r#"{text} {soft:"This"} patient should {soft:"go to this medical team based on symptoms of their illness"} {mask}."#,
        ),
        ("random-control", r#"{text} random words here {soft:"random"} {mask}."#),
    ]
    .into_iter()
    .map(|(label, template)| LabeledTemplate {
        label: label.into(),
        template: template.into(),
    })
    .collect()
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            templates: default_compare_templates(),
            sample_size: SampleSize::PerClass(DEFAULT_SAMPLES_PER_CLASS),
        }
    }
}

fn default_paradigm() -> Paradigm {
    Paradigm::Prompt
}

fn default_sample_sizes() -> Vec<SampleSize> {
    vec![
        SampleSize::PerClass(16),
        SampleSize::PerClass(32),
        SampleSize::PerClass(64),
        SampleSize::PerClass(128),
        SampleSize::Full,
    ]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskKind,
    #[serde(default = "default_paradigm")]
    pub paradigm: Paradigm,
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub verbalizer: Option<VerbalizerSpec>,
    #[serde(default)]
    pub head: Option<MlpHeadConfig>,
    pub data: DataSpec,
    pub plm: PlmSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_sample_sizes")]
    pub sample_sizes: Vec<SampleSize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Epoch count for "full" runs, which see far more data per epoch.
    #[serde(default)]
    pub full_epochs: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub compare: CompareSection,
}

/// A fully resolved model setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub paradigm: Paradigm,
    pub template: Option<String>,
    pub verbalizer: Option<VerbalizerSpec>,
    pub head: Option<MlpHeadConfig>,
    pub plm_frozen: bool,
}

impl Arm {
    pub fn validate(&self) -> CliResult<()> {
        let who = &self.label;
        match self.paradigm {
            Paradigm::Prompt => {
                let t = self
                    .template
                    .as_ref()
                    .ok_or_else(|| CliError::config(format!("{who}: prompt paradigm requires `template`")))?;
                Template::parse(t).map_err(|e| CliError::config(format!("{who}: template {t:?}: {e}")))?;
                if self.verbalizer.is_none() {
                    return Err(CliError::config(format!("{who}: prompt paradigm requires `[verbalizer]`")));
                }
            }
            Paradigm::Classic => {
                let h = self
                    .head
                    .as_ref()
                    .ok_or_else(|| CliError::config(format!("{who}: classic paradigm requires `[head]`")))?;
                h.validate().map_err(|e| CliError::config(format!("{who}: head: {e}")))?;
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parse and validate `path`. Relative input paths are taken relative to
    /// the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.data.dataset);
        fix(&mut self.data.records);
        fix(&mut self.data.mapping);
        fix(&mut self.data.filters);
        fix(&mut self.plm.checkpoint);
        if let Some(p) = &mut self.plm.pretrain {
            fix(&mut p.corpus);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.sample_sizes.is_empty() {
            return bad("sample_sizes must not be empty".into());
        }
        if self.sample_sizes.contains(&SampleSize::PerClass(0)) {
            return bad("sample_sizes: per-class size must be at least 1".into());
        }
        if self.full_epochs == Some(0) {
            return bad("full_epochs must be at least 1".into());
        }
        let d = &self.data;
        let sources = [d.synthetic.is_some(), d.dataset.is_some(), d.records.is_some()];
        if sources.iter().filter(|&&b| b).count() != 1 {
            return bad("data: set exactly one of `synthetic`, `dataset`, `records`".into());
        }
        if let Some(s) = &d.synthetic {
            if s.n < 10 {
                return bad(format!("data.synthetic.n: need at least 10 notes, got {}", s.n));
            }
            s.profile.validate().map_err(|e| CliError::config(format!("data.synthetic.profile: {e}")))?;
        }
        if let Some(b) = &d.los_bins {
            b.validate().map_err(|e| CliError::config(format!("data.los_bins: {e}")))?;
        }
        if d.top_k == 0 {
            return bad("data.top_k must be at least 1".into());
        }
        if self.plm.checkpoint.is_none() && self.plm.pretrain.is_none() {
            return bad("plm: set `checkpoint`, `[plm.pretrain]`, or both".into());
        }
        if let Some(p) = &self.plm.pretrain {
            if !(0.0..=1.0).contains(&p.signal_rate) {
                return bad(format!("plm.pretrain.signal_rate {} outside [0, 1]", p.signal_rate));
            }
            if p.corpus.is_none() && p.corpus_lines < 10 {
                return bad("plm.pretrain.corpus_lines must be at least 10".into());
            }
            p.mlm.encoder.validate().map_err(|e| CliError::config(format!("plm.pretrain.mlm.encoder: {e}")))?;
        }
        self.train.validate().map_err(|e| CliError::config(format!("train: {e}")))?;
        let mut labels = BTreeSet::new();
        for v in &self.variants {
            if v.label.trim().is_empty() {
                return bad("variants: label must not be empty".into());
            }
            if !labels.insert(v.label.as_str()) {
                return bad(format!("variants: duplicate label {:?}", v.label));
            }
        }
        for arm in self.arms() {
            arm.validate()?;
        }
        let s = &self.search;
        if s.n_trials == 0 || s.samples_per_class == 0 {
            return bad("search: n_trials and samples_per_class must be at least 1".into());
        }
        s.space.validate().map_err(|e| CliError::config(format!("search.space: {e}")))?;
        let w = &self.sweep;
        if w.soft_token_counts.contains(&0) || w.samples_per_class == 0 {
            return bad("sweep: soft token counts and samples_per_class must be at least 1".into());
        }
        if w.hidden_dims.iter().flatten().any(|&h| h == 0) {
            return bad("sweep.hidden_dims: widths must be positive".into());
        }
        for t in &self.compare.templates {
            Template::parse(&t.template)
                .map_err(|e| CliError::config(format!("compare template {:?} ({}): {e}", t.label, t.template)))?;
        }
        if self.compare.sample_size == SampleSize::PerClass(0) {
            return bad("compare.sample_size must be at least 1".into());
        }
        Ok(())
    }

    /// The setups of a `run`: one per variant, or the top-level setup alone.
    pub fn arms(&self) -> Vec<Arm> {
        if self.variants.is_empty() {
            return vec![self.base_arm(self.paradigm.as_str().to_string())];
        }
        self.variants
            .iter()
            .map(|v| {
                let paradigm = v.paradigm.unwrap_or(self.paradigm);
                let prompt = paradigm == Paradigm::Prompt;
                Arm {
                    label: v.label.clone(),
                    paradigm,
                    template: v.template.clone().or_else(|| self.template.clone()).filter(|_| prompt),
                    verbalizer: v.verbalizer.clone().or_else(|| self.verbalizer.clone()).filter(|_| prompt),
                    head: v.head.clone().or_else(|| self.head.clone()).filter(|_| !prompt),
                    plm_frozen: v.plm_frozen.unwrap_or(self.train.plm_frozen),
                }
            })
            .collect()
    }

    pub fn base_arm(&self, label: String) -> Arm {
        let prompt = self.paradigm == Paradigm::Prompt;
        Arm {
            label,
            paradigm: self.paradigm,
            template: self.template.clone().filter(|_| prompt),
            verbalizer: self.verbalizer.clone().filter(|_| prompt),
            head: self.head.clone().filter(|_| !prompt),
            plm_frozen: self.train.plm_frozen,
        }
    }

    /// `--frozen` wins over every variant.
    pub fn override_frozen(&mut self, frozen: bool) {
        self.train.plm_frozen = frozen;
        for v in &mut self.variants {
            v.plm_frozen = Some(frozen);
        }
    }

    /// `--seed` replaces the seed list and the search master seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
        self.search.master_seed = seed;
    }

    /// `--out`, then `out_dir`, then `$PROMPTLAB_OUT/<name>` (default root `results`).
    pub fn output_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        if let Some(p) = &self.out_dir {
            return p.clone();
        }
        crate::default_output_root().join(&self.name)
    }
}
