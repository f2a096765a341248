//! Templated pseudo-notes for exercising the pipeline without restricted
//! data. Words are drawn from small class-indicative lexicons mixed with
//! shared ward boilerplate; nothing here is clinically meaningful.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::TaskDataset;
use super::derive::{derive_icd9_topk, derive_los, derive_mortality, derive_triage, LosBins, MortalityFilters};
use super::records::{ClinicalRecord, TriageMapping, TRIAGE_TEAMS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Icd9,
    Triage,
    Mortality,
    Los,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Icd9, TaskKind::Triage, TaskKind::Mortality, TaskKind::Los];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Icd9 => "icd9",
            TaskKind::Triage => "triage",
            TaskKind::Mortality => "mortality",
            TaskKind::Los => "los",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (expected icd9, triage, mortality or los)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticProfile {
    /// Chance that a content slot holds a class-indicative word.
    pub signal_rate: f64,
    /// Content slots per note.
    pub slots: usize,
    /// Share of pre-death notes of dying patients that still mention death.
    pub death_mention_rate: f64,
    /// Share of triage records whose primary code has no team.
    pub unmapped_rate: f64,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            signal_rate: 0.5,
            slots: 8,
            death_mention_rate: 0.1,
            unmapped_rate: 0.05,
        }
    }
}

impl SyntheticProfile {
    pub fn with_signal(signal_rate: f64) -> Self {
        Self {
            signal_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("signal_rate", self.signal_rate),
            ("death_mention_rate", self.death_mention_rate),
            ("unmapped_rate", self.unmapped_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.slots == 0 {
            return Err(Error::Config("slots must be at least 1".into()));
        }
        Ok(())
    }
}

pub const TEAM_WORDS: [&[&str]; 7] = [
    &["palpitations", "angina", "troponin", "murmur", "arrhythmia", "bradycardia", "tachycardia", "infarct", "stent", "catheterization"],
    &["pregnant", "gestation", "fetal", "contractions", "postpartum", "preeclampsia", "placenta", "labour", "cesarean", "uterine"],
    &["dyspnea", "wheeze", "cough", "sputum", "hypoxia", "intubated", "pneumonia", "copd", "bronchospasm", "crackles"],
    &["headache", "seizure", "aphasia", "hemiparesis", "hemorrhage", "stroke", "ataxia", "dysarthria", "ptosis", "neglect"],
    &["hematemesis", "melena", "jaundice", "ascites", "cirrhosis", "pancreatitis", "varices", "abdominal", "vomiting", "endoscopy"],
    &["sepsis", "fever", "hypotension", "creatinine", "oliguria", "lactate", "infection", "rigors", "dehydration", "bacteremia"],
    &["tumor", "mass", "metastatic", "chemotherapy", "lymphadenopathy", "biopsy", "malignancy", "radiotherapy", "neutropenia", "carcinoma"],
];

/// One-token name per team, used in handover sentences and as the default
/// manual verbalizer.
pub const TEAM_LABEL_WORDS: [&str; 7] = [
    "cardiology",
    "obstetrics",
    "respiratory",
    "neurology",
    "gastroenterology",
    "medicine",
    "oncology",
];

const EXTRA_DIAGNOSIS_WORDS: [&str; 30] = [
    "hypertension", "diabetes", "hyperlipidemia", "hypothyroid", "reflux", "anemia", "thrombocytopenia", "fibrillation",
    "hyponatremia", "acidosis", "uti", "depression", "alcohol", "fracture", "overdose", "benzodiazepine", "encephalopathy",
    "epilepsy", "embolism", "aneurysm", "hernia", "obstruction", "diverticulitis", "cholecystitis", "trauma", "laceration",
    "contusion", "thrombosis", "renal", "dialysis",
];

const MORTALITY_WORDS: [&[&str]; 2] = [
    &["recovering", "extubated", "weaning", "rehabilitation", "tolerating", "independent", "improving", "mobilising", "physiotherapy", "discharge"],
    &["pressors", "deteriorating", "multiorgan", "coagulopathy", "unresponsive", "palliative", "refractory", "worsening", "anuric", "arrest"],
];

pub const MORTALITY_LABEL_WORDS: [&str; 2] = ["recovery", "death"];

const LOS_WORDS: [&[&str]; 4] = [
    &["elective", "uncomplicated", "observation", "routine", "minor", "brief", "daycase", "planned", "simple", "straightforward"],
    &["antibiotics", "drain", "titration", "transfusion", "monitoring", "infusion", "repeat", "imaging", "wound", "course"],
    &["complication", "reoperation", "abscess", "delirium", "leak", "collection", "readmitted", "culture", "escalation", "nutrition"],
    &["placement", "guardianship", "decubitus", "contracture", "deconditioning", "awaiting", "tracheostomy", "ventilator", "longterm", "dependent"],
];

pub const LOS_LABEL_WORDS: [&str; 4] = ["short", "moderate", "long", "prolonged"];

const SHARED_WORDS: [&str; 40] = [
    "stable", "comfortable", "alert", "oriented", "nausea", "fatigue", "monitored", "reviewed", "tolerated", "diet",
    "family", "updated", "overnight", "vitals", "labs", "medications", "continued", "plan", "discussed", "unchanged",
    "resting", "nursing", "morning", "evening", "mild", "sleeping", "appetite", "fluids", "analgesia", "pain", "bloods",
    "observations", "chart", "bedside", "saturations", "temperature", "weight", "urine", "skin", "mobility",
];

const OPENERS: [&str; 4] = ["patient seen on ward round .", "admission note .", "nursing progress note .", "icu review ."];
const CLOSERS: [&str; 4] = [
    "plan discussed with family .",
    "continue current management .",
    "review again in the morning .",
    "random glucose checked .",
];
const PAIR_FRAMES: [(&str, &str, &str); 5] = [
    ("noted", "and", "."),
    ("reports", "with", "."),
    ("exam shows", ",", "."),
    ("history of", "and", "."),
    ("review of", "and", "."),
];
const DEATH_MENTIONS: [&str; 5] = [
    "patient expired at 0300 .",
    "time of death 0412 .",
    "pronounced dead by the night team .",
    "patient deceased , family informed .",
    "patient passed away peacefully .",
];

/// Sixty ICD-9 codes; the first twenty are the default triage codes.
pub const ICD9_CODES: [&str; 60] = [
    "414.01", "410.71", "428.0", "424.1", "650", "644.21", "518.81", "486", "491.21", "430", "431", "434.91", "578.9",
    "577.0", "571.2", "038.9", "584.9", "996.81", "162.8", "191.9", "401.9", "427.31", "276.2", "599.0", "285.9",
    "250.00", "272.4", "244.9", "530.81", "496", "311", "403.90", "585.9", "305.1", "v58.61", "287.5", "995.92",
    "785.52", "507.0", "427.5", "998.59", "996.74", "453.8", "441.4", "553.21", "560.9", "562.12", "574.00", "577.1",
    "852.20", "860.0", "805.4", "965.00", "969.4", "293.0", "348.1", "345.90", "780.39", "415.19", "433.10",
];

/// Codes that no default team claims, used for unmapped triage records.
const UNMAPPED_CODES: [&str; 4] = ["v30.00", "e849.7", "v45.81", "e878.8"];

fn diagnosis_lexicon() -> Vec<&'static str> {
    TEAM_WORDS.iter().flat_map(|w| w.iter().copied()).chain(EXTRA_DIAGNOSIS_WORDS).collect()
}

/// Indicative words of the `i`-th ICD-9 code. The first word differs for every code.
pub fn icd9_words(i: usize) -> [&'static str; 3] {
    let lex = diagnosis_lexicon();
    let n = lex.len();
    [lex[(i * 37) % n], lex[(i * 37 + 11) % n], lex[(i * 37 + 23) % n]]
}

/// Class-indicative words of a task, in class order of the derived dataset
/// (ICD-9 classes follow [`ICD9_CODES`]).
pub fn indicative_words(kind: TaskKind) -> Vec<Vec<&'static str>> {
    match kind {
        TaskKind::Icd9 => (0..ICD9_CODES.len()).map(|i| icd9_words(i).to_vec()).collect(),
        TaskKind::Triage => TEAM_WORDS.iter().map(|w| w.to_vec()).collect(),
        TaskKind::Mortality => MORTALITY_WORDS.iter().map(|w| w.to_vec()).collect(),
        TaskKind::Los => LOS_WORDS.iter().map(|w| w.to_vec()).collect(),
    }
}

/// Default single-token manual verbalizer words keyed by class name.
pub fn default_verbalizer_words(kind: TaskKind) -> BTreeMap<String, Vec<String>> {
    let pairs: Vec<(String, String)> = match kind {
        TaskKind::Icd9 => ICD9_CODES.iter().map(|c| (c.to_string(), c.to_string())).collect(),
        TaskKind::Triage => TRIAGE_TEAMS.iter().zip(TEAM_LABEL_WORDS).map(|(t, w)| (t.to_string(), w.to_string())).collect(),
        TaskKind::Mortality => super::derive::MORTALITY_CLASSES
            .iter()
            .zip(MORTALITY_LABEL_WORDS)
            .map(|(c, w)| (c.to_string(), w.to_string()))
            .collect(),
        TaskKind::Los => LosBins::default().names().into_iter().zip(LOS_LABEL_WORDS).map(|(c, w)| (c, w.to_string())).collect(),
    };
    pairs.into_iter().map(|(c, w)| (c, vec![w])).collect()
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// Opener, content slots framed in short phrases, closer.
fn compose<R: Rng>(rng: &mut R, class_words: &[&str], profile: &SyntheticProfile) -> String {
    let slots: Vec<&str> = (0..profile.slots)
        .map(|_| {
            if rng.random_bool(profile.signal_rate) {
                pick(rng, class_words)
            } else {
                pick(rng, &SHARED_WORDS)
            }
        })
        .collect();
    let mut parts = vec![pick(rng, &OPENERS).to_string()];
    for pair in slots.chunks(2) {
        match pair {
            [a, b] => {
                let (pre, mid, end) = PAIR_FRAMES[rng.random_range(0..PAIR_FRAMES.len())];
                parts.push(format!("{pre} {a} {mid} {b} {end}"));
            }
            [a] => parts.push(format!("also {a} .")),
            _ => unreachable!(),
        }
    }
    parts.push(pick(rng, &CLOSERS).to_string());
    parts.join(" ")
}

fn base_time() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2150, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

fn after(t: NaiveDateTime, days: f64) -> NaiveDateTime {
    t + Duration::seconds((days * 86_400.0).round() as i64)
}

fn zipf_pick<R: Rng>(rng: &mut R, n: usize, exponent: f64) -> usize {
    let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    n - 1
}

/// `n` synthetic records whose text depends on a latent class of `kind`.
/// Identical arguments give identical records.
pub fn generate_synthetic(kind: TaskKind, n: usize, seed: u64, profile: &SyntheticProfile) -> Result<Vec<ClinicalRecord>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000 ^ kind as u64);
    let lexicons = indicative_words(kind);
    let mapping = TriageMapping::default();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let admit = after(base_time(), rng.random_range(0.0..3650.0));
        let mut death_time = None;
        let (text, codes, stay);
        let mut note_frac = rng.random_range(0.05..0.95);
        match kind {
            TaskKind::Icd9 => {
                let c = zipf_pick(&mut rng, ICD9_CODES.len(), 0.8);
                text = compose(&mut rng, &lexicons[c], profile);
                codes = vec![ICD9_CODES[c].to_string(), pick(&mut rng, &ICD9_CODES).to_string()];
                stay = rng.random_range(1.0..15.0);
            }
            TaskKind::Triage => {
                let team = rng.random_range(0..TRIAGE_TEAMS.len());
                text = compose(&mut rng, &lexicons[team], profile);
                let primary = if rng.random_bool(profile.unmapped_rate) {
                    pick(&mut rng, &UNMAPPED_CODES)
                } else {
                    pick(&mut rng, &mapping.codes_for(TRIAGE_TEAMS[team]))
                };
                codes = vec![primary.to_string(), pick(&mut rng, &ICD9_CODES[20..]).to_string()];
                stay = rng.random_range(1.0..15.0);
            }
            TaskKind::Mortality => {
                let died = rng.random_bool(0.12);
                stay = rng.random_range(2.0..20.0);
                codes = vec![pick(&mut rng, &ICD9_CODES).to_string()];
                let mut t = compose(&mut rng, &lexicons[usize::from(died)], profile);
                if died {
                    let death_frac = rng.random_range(0.5..0.95);
                    death_time = Some(after(admit, stay * death_frac));
                    if rng.random_bool(0.15) {
                        // written after death: between death and discharge
                        note_frac = death_frac + (1.0 - death_frac) * rng.random_range(0.1..0.9);
                        t = format!("{t} {}", pick(&mut rng, &DEATH_MENTIONS));
                    } else {
                        note_frac = death_frac * rng.random_range(0.05..0.9);
                        if rng.random_bool(profile.death_mention_rate) {
                            t = format!("{t} {}", pick(&mut rng, &DEATH_MENTIONS));
                        }
                    }
                }
                text = t;
            }
            TaskKind::Los => {
                let prior = [0.35, 0.35, 0.2, 0.1];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let bin = prior.iter().position(|p| {
                    acc += p;
                    u < acc
                });
                let bin = bin.unwrap_or(3);
                let ranges = [(0.2, 3.0), (3.0, 7.0), (7.0, 14.0), (14.0, 40.0)];
                stay = rng.random_range(ranges[bin].0..ranges[bin].1);
                codes = vec![pick(&mut rng, &ICD9_CODES).to_string()];
                text = compose(&mut rng, &lexicons[bin], profile);
            }
        }
        let discharge = after(admit, stay);
        out.push(ClinicalRecord {
            note_text: text,
            icd9_codes: codes,
            admit_time: admit,
            discharge_time: discharge,
            death_time,
            note_time: after(admit, stay * note_frac).min(discharge),
        });
    }
    Ok(out)
}

/// Generate records and derive the task with default rules; splits are seeded by `seed`.
pub fn synthetic_dataset(kind: TaskKind, n: usize, seed: u64, profile: &SyntheticProfile) -> Result<TaskDataset> {
    let records = generate_synthetic(kind, n, seed, profile)?;
    let derived = match kind {
        TaskKind::Icd9 => derive_icd9_topk(&records, 50)?,
        TaskKind::Triage => derive_triage(&records, &TriageMapping::default())?,
        TaskKind::Mortality => derive_mortality(&records, &MortalityFilters::default())?,
        TaskKind::Los => derive_los(&records, &LosBins::default())?,
    };
    derived.dataset.with_splits(seed)
}

/// Sentences covering template scaffolds, so that soft tokens can be
/// initialized from real embeddings.
const SCAFFOLD_SENTENCES: [&str; 4] = [
    "this patient should go to this medical team based on symptoms of their illness .",
    "the team based the plan on symptoms of their illness .",
    "random words here from the family .",
    "this medical team should go over the plan .",
];

/// The sentence appended to a pretraining note of `kind`, naming its outcome.
fn outcome_sentence(kind: TaskKind, r: &ClinicalRecord, mapping: &TriageMapping) -> Result<String> {
    Ok(match kind {
        TaskKind::Icd9 => format!("primary diagnosis {} .", r.icd9_codes[0]),
        TaskKind::Triage => match r.primary_code().and_then(|c| mapping.team_index(c)) {
            Some(t) => format!("this patient should go to {} .", TEAM_LABEL_WORDS[t]),
            None => String::new(),
        },
        TaskKind::Mortality => format!("expected outcome : {} .", MORTALITY_LABEL_WORDS[usize::from(r.died_in_hospital())]),
        TaskKind::Los => format!("expected stay : {} .", LOS_LABEL_WORDS[LosBins::default().bin(r.stay_days())?]),
    })
}

/// `n` lines of masked-LM pretraining text: notes of the given tasks in
/// equal shares, each followed by one fixed sentence naming its outcome
/// (code, team, survival or stay), plus a few scaffold sentences.
pub fn pretraining_corpus(kinds: &[TaskKind], n: usize, seed: u64, profile: &SyntheticProfile) -> Result<Vec<String>> {
    if kinds.is_empty() {
        return Err(Error::Config("pretraining corpus needs at least one task".into()));
    }
    let mapping = TriageMapping::default();
    let per = n.saturating_sub(SCAFFOLD_SENTENCES.len()).div_ceil(kinds.len()).max(1);
    let mut corpus: Vec<String> = SCAFFOLD_SENTENCES.iter().map(|s| s.to_string()).collect();
    for (k, &kind) in kinds.iter().enumerate() {
        for r in generate_synthetic(kind, per, seed.wrapping_add(1000 + k as u64), profile)? {
            let tail = outcome_sentence(kind, &r, &mapping)?;
            corpus.push(format!("{} {tail}", r.note_text).trim_end().to_string());
        }
    }
    corpus.truncate(n.max(SCAFFOLD_SENTENCES.len()));
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn lexicons_do_not_overlap_within_a_task() {
        for kind in TaskKind::ALL {
            if kind == TaskKind::Icd9 {
                continue;
            }
            let mut seen = BTreeSet::new();
            for w in indicative_words(kind).into_iter().flatten() {
                assert!(seen.insert(w), "{kind}: {w} repeated");
                assert!(!SHARED_WORDS.contains(&w), "{w} is also shared");
            }
        }
        let lex = diagnosis_lexicon();
        assert_eq!(lex.iter().collect::<BTreeSet<_>>().len(), lex.len());
        let firsts: BTreeSet<_> = (0..ICD9_CODES.len()).map(|i| icd9_words(i)[0]).collect();
        assert_eq!(firsts.len(), ICD9_CODES.len());
    }

    #[test]
    fn same_seed_same_corpus() {
        for kind in TaskKind::ALL {
            let p = SyntheticProfile::default();
            assert_eq!(generate_synthetic(kind, 50, 9, &p).unwrap(), generate_synthetic(kind, 50, 9, &p).unwrap());
            assert_ne!(generate_synthetic(kind, 50, 9, &p).unwrap(), generate_synthetic(kind, 50, 10, &p).unwrap());
        }
    }

    #[test]
    fn records_are_valid() {
        for kind in TaskKind::ALL {
            for r in generate_synthetic(kind, 300, 1, &SyntheticProfile::default()).unwrap() {
                r.validate().unwrap();
            }
        }
    }

    #[test]
    fn every_task_derives() {
        let p = SyntheticProfile::default();
        let icd = synthetic_dataset(TaskKind::Icd9, 3000, 0, &p).unwrap();
        assert_eq!(icd.n_classes(), 50);
        let tri = synthetic_dataset(TaskKind::Triage, 700, 0, &p).unwrap();
        assert_eq!(tri.n_classes(), 7);
        assert!(tri.len() < 700);
        let mort = synthetic_dataset(TaskKind::Mortality, 1000, 0, &p).unwrap();
        let died = mort.labels().iter().filter(|&&l| l == 1).count();
        assert!(died > 20 && died < 200, "{died}");
        let los = synthetic_dataset(TaskKind::Los, 400, 0, &p).unwrap();
        assert_eq!(los.n_classes(), 4);
    }

    #[test]
    fn mortality_generator_produces_filterable_mentions() {
        let rs = generate_synthetic(TaskKind::Mortality, 2000, 3, &SyntheticProfile::default()).unwrap();
        let set = MortalityFilters::default().compile().unwrap();
        let mentions = rs.iter().filter(|r| set.is_match(&r.note_text)).count();
        let late = rs.iter().filter(|r| r.death_time.is_some_and(|d| r.note_time >= d)).count();
        assert!(mentions > 0 && late > 0);
        let d = derive_mortality(&rs, &MortalityFilters::default()).unwrap();
        assert!(d.dropped >= late);
    }

    #[test]
    fn verbalizer_defaults_name_every_class() {
        let p = SyntheticProfile::default();
        for kind in [TaskKind::Triage, TaskKind::Mortality, TaskKind::Los] {
            let ds = synthetic_dataset(kind, 400, 0, &p).unwrap();
            let words = default_verbalizer_words(kind);
            for c in &ds.class_names {
                assert_eq!(words[c].len(), 1, "{c}");
            }
        }
    }

    #[test]
    fn pretraining_corpus_mentions_label_words() {
        let corpus = pretraining_corpus(&TaskKind::ALL, 400, 0, &SyntheticProfile::default()).unwrap();
        assert_eq!(corpus.len(), 400);
        let text = corpus.join(" ");
        for w in TEAM_LABEL_WORDS.iter().chain(&MORTALITY_LABEL_WORDS).chain(&LOS_LABEL_WORDS) {
            assert!(text.contains(w), "{w}");
        }
    }
}
