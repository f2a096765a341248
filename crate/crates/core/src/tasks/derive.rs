//! Task derivation rules over clinical records. Each rule is a pure function
//! of its inputs; splits are added afterwards with `TaskDataset::with_splits`.

use std::collections::BTreeMap;

use regex::{RegexSet, RegexSetBuilder};
use serde::{Deserialize, Serialize};

use super::dataset::{Example, TaskDataset};
use super::records::{ClinicalRecord, TriageMapping, TRIAGE_TEAMS};
use crate::error::{Error, Result};

/// A derived dataset and the number of records left out of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Derived {
    pub dataset: TaskDataset,
    pub dropped: usize,
}

/// Keep records whose primary code is among the `k` most frequent primary
/// codes. A frequency tie at rank `k` goes to the lexicographically smaller
/// code. Classes are ordered by rank.
pub fn derive_icd9_topk(records: &[ClinicalRecord], k: usize) -> Result<Derived> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if let Some(c) = r.primary_code() {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    if counts.len() < k {
        return Err(Error::Data(format!("only {} distinct primary codes, need {k}", counts.len())));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // stable sort over lexicographic order keeps the smaller code first on ties
    ranked.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
    ranked.truncate(k);
    let index: BTreeMap<&str, usize> = ranked.iter().enumerate().map(|(i, (c, _))| (*c, i)).collect();
    let mut examples = Vec::new();
    let mut dropped = 0;
    for r in records {
        match r.primary_code().and_then(|c| index.get(c)) {
            Some(&label) => examples.push(Example::new(r.note_text.clone(), label)),
            None => dropped += 1,
        }
    }
    let class_names = ranked.iter().map(|(c, _)| c.to_string()).collect();
    Ok(Derived {
        dataset: TaskDataset::new(format!("icd9_top{k}"), examples, class_names)?,
        dropped,
    })
}

/// Map each record's primary code to one of the seven discharge teams.
/// Records with an unmapped primary code are dropped and counted.
pub fn derive_triage(records: &[ClinicalRecord], mapping: &TriageMapping) -> Result<Derived> {
    mapping.validate()?;
    let mut examples = Vec::new();
    let mut dropped = 0;
    for r in records {
        match r.primary_code().and_then(|c| mapping.team_index(c)) {
            Some(label) => examples.push(Example::new(r.note_text.clone(), label)),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::info!("triage: dropped {dropped} records with unmapped primary codes");
    }
    let class_names = TRIAGE_TEAMS.iter().map(|t| t.to_string()).collect();
    Ok(Derived {
        dataset: TaskDataset::new("triage", examples, class_names)?,
        dropped,
    })
}

/// Case-insensitive patterns marking notes that mention the patient's death.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MortalityFilters {
    pub patterns: Vec<String>,
}

impl Default for MortalityFilters {
    fn default() -> Self {
        Self {
            patterns: ["expired", "time of death", "pronounced dead", "deceased", "passed away"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl MortalityFilters {
    pub fn compile(&self) -> Result<RegexSet> {
        RegexSetBuilder::new(&self.patterns)
            .case_insensitive(true)
            .build()
            .map_err(|e| Error::Config(format!("bad death-mention pattern: {e}")))
    }
}

pub const MORTALITY_CLASSES: [&str; 2] = ["survived", "died"];

/// In-hospital mortality. Notes written at or after the time of death and
/// notes matching a death-mention pattern are excluded.
pub fn derive_mortality(records: &[ClinicalRecord], filters: &MortalityFilters) -> Result<Derived> {
    let set = filters.compile()?;
    let mut examples = Vec::new();
    let mut dropped = 0;
    for r in records {
        let died = r.died_in_hospital();
        let before_death = r.death_time.is_none_or(|d| r.note_time < d);
        if !before_death || set.is_match(&r.note_text) {
            dropped += 1;
            continue;
        }
        examples.push(Example::new(r.note_text.clone(), usize::from(died)));
    }
    if let Some(bad) = examples.iter().find(|e| set.is_match(&e.text)) {
        return Err(Error::Data(format!("death mention survived filtering: {:?}", bad.text)));
    }
    let class_names = MORTALITY_CLASSES.iter().map(|c| c.to_string()).collect();
    Ok(Derived {
        dataset: TaskDataset::new("mortality", examples, class_names)?,
        dropped,
    })
}

/// Length-of-stay bins in days: `[e0, e1), [e1, e2), ..., [e_last, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LosBins {
    pub edges: Vec<f64>,
    #[serde(default)]
    pub names: Option<Vec<String>>,
}

impl Default for LosBins {
    fn default() -> Self {
        Self {
            edges: vec![0.0, 3.0, 7.0, 14.0],
            names: Some(
                ["under 3 days", "3 to 7 days", "1 to 2 weeks", "more than 2 weeks"]
                    .map(String::from)
                    .to_vec(),
            ),
        }
    }
}

impl LosBins {
    pub fn validate(&self) -> Result<()> {
        if self.edges.first() != Some(&0.0) {
            return Err(Error::Config("length-of-stay bins must start at 0".into()));
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1] || w[0].is_nan()) || self.edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("bin edges must be finite and strictly increasing".into()));
        }
        if self.edges.len() < 2 {
            return Err(Error::Config("need at least two bins".into()));
        }
        if let Some(n) = &self.names {
            if n.len() != self.edges.len() {
                return Err(Error::Config(format!("{} bin names for {} bins", n.len(), self.edges.len())));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        if let Some(n) = &self.names {
            return n.clone();
        }
        let mut out: Vec<String> = self.edges.windows(2).map(|w| format!("[{}, {}) days", w[0], w[1])).collect();
        out.push(format!(">= {} days", self.edges[self.edges.len() - 1]));
        out
    }

    /// Bin of a stay; lower edges are inclusive.
    pub fn bin(&self, days: f64) -> Result<usize> {
        if days.is_nan() || days < 0.0 {
            return Err(Error::Data(format!("negative length of stay: {days} days")));
        }
        Ok(self.edges.partition_point(|&e| e <= days) - 1)
    }
}

pub fn derive_los(records: &[ClinicalRecord], bins: &LosBins) -> Result<Derived> {
    bins.validate()?;
    let examples = records
        .iter()
        .map(|r| Ok(Example::new(r.note_text.clone(), bins.bin(r.stay_days())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Derived {
        dataset: TaskDataset::new("los", examples, bins.names())?,
        dropped: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, NaiveDate, NaiveDateTime};

    fn t0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2150, 3, 1).unwrap().and_hms_opt(8, 0, 0).unwrap()
    }

    fn rec(text: &str, codes: &[&str], stay_h: i64) -> ClinicalRecord {
        ClinicalRecord {
            note_text: text.into(),
            icd9_codes: codes.iter().map(|c| c.to_string()).collect(),
            admit_time: t0(),
            discharge_time: t0() + Duration::hours(stay_h),
            death_time: None,
            note_time: t0() + Duration::hours(1),
        }
    }

    #[test]
    fn topk_ranks_by_frequency_then_code() {
        let rs = vec![
            rec("a", &["428.0"], 10),
            rec("b", &["428.0"], 10),
            rec("c", &["486"], 10),
            rec("d", &["038.9"], 10),
            rec("e", &["999"], 10),
        ];
        let d = derive_icd9_topk(&rs, 2).unwrap();
        // 038.9, 486 and 999 tie at one note; 038.9 wins lexicographically
        assert_eq!(d.dataset.class_names, vec!["428.0", "038.9"]);
        assert_eq!(d.dataset.len(), 3);
        assert_eq!(d.dropped, 2);
        assert!(derive_icd9_topk(&rs, 5).is_err());
    }

    #[test]
    fn triage_maps_codes_to_teams() {
        let rs = vec![rec("x", &["414.01"], 5), rec("y", &["650", "486"], 5), rec("z", &["v30.00"], 5)];
        let d = derive_triage(&rs, &TriageMapping::default()).unwrap();
        assert_eq!(d.dataset.class_names, TRIAGE_TEAMS.map(String::from).to_vec());
        assert_eq!(d.dataset.labels(), vec![0, 1]);
        assert_eq!(d.dropped, 1);

        let mut bad = TriageMapping::default();
        bad.codes.insert("1".into(), "Dermatology".into());
        assert!(derive_triage(&rs, &bad).is_err());
    }

    #[test]
    fn default_mapping_covers_twenty_codes_and_all_teams() {
        let m = TriageMapping::default();
        assert_eq!(m.codes.len(), 20);
        for t in TRIAGE_TEAMS {
            assert!(!m.codes_for(t).is_empty(), "{t}");
        }
        let s = toml::to_string(&m).unwrap();
        assert_eq!(toml::from_str::<TriageMapping>(&s).unwrap(), m);
    }

    #[test]
    fn mortality_filters_and_timing() {
        let mut died = rec("worsening hypotension on pressors", &["038.9"], 48);
        died.death_time = Some(t0() + Duration::hours(40));
        let mut after = died.clone();
        after.note_time = t0() + Duration::hours(41);
        after.note_text = "family at bedside".into();
        let mut mention = died.clone();
        mention.note_text = "Patient EXPIRED overnight".into();
        let alive = rec("ambulating, tolerating diet", &["486"], 48);
        let d = derive_mortality(&[died, after, mention, alive], &MortalityFilters::default()).unwrap();
        assert_eq!(d.dataset.labels(), vec![1, 0]);
        assert_eq!(d.dropped, 2);
    }

    #[test]
    fn death_outside_episode_is_survival() {
        let mut r = rec("routine", &["486"], 24);
        r.death_time = Some(t0() + Duration::days(300));
        let d = derive_mortality(&[r], &MortalityFilters::default()).unwrap();
        assert_eq!(d.dataset.labels(), vec![0]);
    }

    #[test]
    fn los_bins_are_lower_inclusive() {
        let b = LosBins::default();
        let names = b.names();
        assert_eq!(names[b.bin(5.0).unwrap()], "3 to 7 days");
        assert_eq!(b.bin(3.0).unwrap(), 1);
        assert_eq!(b.bin(2.999).unwrap(), 0);
        assert_eq!(names[b.bin(20.0).unwrap()], "more than 2 weeks");
        assert_eq!(b.bin(0.0).unwrap(), 0);
        assert!(b.bin(-0.5).is_err());
        let rs = vec![rec("a", &["1"], 24 * 5), rec("b", &["1"], 24 * 3)];
        assert_eq!(derive_los(&rs, &b).unwrap().dataset.labels(), vec![1, 1]);
    }

    #[test]
    fn custom_bins_validate_and_name_themselves() {
        let b = LosBins {
            edges: vec![0.0, 2.0],
            names: None,
        };
        assert_eq!(b.names(), vec!["[0, 2) days", ">= 2 days"]);
        assert!(LosBins {
            edges: vec![0.0, 3.0, 3.0],
            names: None
        }
        .validate()
        .is_err());
        assert!(LosBins {
            edges: vec![1.0, 3.0],
            names: None
        }
        .validate()
        .is_err());
    }

    proptest::proptest! {
        #[test]
        fn los_bins_partition_the_half_line(days in 0.0f64..100.0, extra in proptest::collection::vec(0.1f64..10.0, 1..6)) {
            let mut edges = vec![0.0];
            for e in extra {
                let last = *edges.last().unwrap();
                edges.push(last + e);
            }
            let b = LosBins { edges: edges.clone(), names: None };
            let i = b.bin(days).unwrap();
            proptest::prop_assert!(edges[i] <= days);
            if i + 1 < edges.len() {
                proptest::prop_assert!(days < edges[i + 1]);
            }
        }
    }
}
