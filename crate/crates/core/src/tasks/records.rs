use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One clinical note with its admission episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalRecord {
    pub note_text: String,
    /// Primary diagnosis first.
    pub icd9_codes: Vec<String>,
    pub admit_time: NaiveDateTime,
    pub discharge_time: NaiveDateTime,
    #[serde(default)]
    pub death_time: Option<NaiveDateTime>,
    pub note_time: NaiveDateTime,
}

impl ClinicalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.discharge_time < self.admit_time {
            return Err(Error::Data("discharge precedes admission".into()));
        }
        if self.note_time < self.admit_time || self.note_time > self.discharge_time {
            return Err(Error::Data("note written outside its episode".into()));
        }
        Ok(())
    }

    pub fn primary_code(&self) -> Option<&str> {
        self.icd9_codes.first().map(String::as_str)
    }

    /// Length of stay in days.
    pub fn stay_days(&self) -> f64 {
        (self.discharge_time - self.admit_time).num_seconds() as f64 / 86_400.0
    }

    /// Death during the admission episode.
    pub fn died_in_hospital(&self) -> bool {
        self.death_time
            .is_some_and(|d| d >= self.admit_time && d <= self.discharge_time)
    }
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<ClinicalRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ClinicalRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        r.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

pub fn save_records(records: &[ClinicalRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub const TRIAGE_TEAMS: [&str; 7] = [
    "Cardiology",
    "Obstetrics",
    "Respiratory Medicine",
    "Neurology",
    "Gastroenterology",
    "Acute or Internal Medicine",
    "Oncology",
];

/// Many-to-one ICD-9 code → discharge team mapping.
///
/// ```toml
/// [codes]
/// "414.01" = "Cardiology"
/// "650" = "Obstetrics"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageMapping {
    pub codes: BTreeMap<String, String>,
}

impl Default for TriageMapping {
    /// An illustrative mapping of twenty common codes; not clinical guidance.
    fn default() -> Self {
        let table: [(&str, &[&str]); 7] = [
            ("Cardiology", &["414.01", "410.71", "428.0", "424.1"]),
            ("Obstetrics", &["650", "644.21"]),
            ("Respiratory Medicine", &["518.81", "486", "491.21"]),
            ("Neurology", &["430", "431", "434.91"]),
            ("Gastroenterology", &["578.9", "577.0", "571.2"]),
            ("Acute or Internal Medicine", &["038.9", "584.9", "996.81"]),
            ("Oncology", &["162.8", "191.9"]),
        ];
        let codes = table
            .iter()
            .flat_map(|(team, cs)| cs.iter().map(move |c| (c.to_string(), team.to_string())))
            .collect();
        Self { codes }
    }
}

impl TriageMapping {
    pub fn validate(&self) -> Result<()> {
        for (code, team) in &self.codes {
            if !TRIAGE_TEAMS.contains(&team.as_str()) {
                return Err(Error::Config(format!("code {code} maps to unknown team {team:?}")));
            }
        }
        Ok(())
    }

    pub fn team_index(&self, code: &str) -> Option<usize> {
        let team = self.codes.get(code)?;
        TRIAGE_TEAMS.iter().position(|t| t == team)
    }

    pub fn codes_for(&self, team: &str) -> Vec<&str> {
        self.codes
            .iter()
            .filter(|(_, t)| t.as_str() == team)
            .map(|(c, _)| c.as_str())
            .collect()
    }
}
