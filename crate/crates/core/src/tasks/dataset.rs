use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

impl Example {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self {
            text: text.into(),
            label,
        }
    }
}

/// Index lists into [`TaskDataset::examples`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub examples: Vec<Example>,
    pub class_names: Vec<String>,
    pub splits: Splits,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    text: String,
    label: LabelValue,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelValue {
    Name(String),
    Number(i64),
}

#[derive(Serialize)]
struct LineOut<'a> {
    text: &'a str,
    label: &'a str,
}

impl TaskDataset {
    /// A dataset whose examples all sit in the train split.
    pub fn new(name: impl Into<String>, examples: Vec<Example>, class_names: Vec<String>) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.label >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {} outside {} classes",
                e.label,
                class_names.len()
            )));
        }
        let train = (0..examples.len()).collect();
        Ok(Self {
            name: name.into(),
            examples,
            class_names,
            splits: Splits {
                train,
                ..Splits::default()
            },
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn split(&self, which: SplitName) -> Vec<Example> {
        self.select(self.split_indices(which))
    }

    pub fn split_indices(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.splits.train,
            SplitName::Val => &self.splits.val,
            SplitName::Test => &self.splits.test,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Vec<Example> {
        idx.iter().map(|&i| self.examples[i].clone()).collect()
    }

    pub fn with_splits(mut self, seed: u64) -> Result<Self> {
        self.splits = split_70_10_20(&self.labels(), self.n_classes(), seed)?;
        Ok(self)
    }

    /// One `{"text": .., "label": ..}` object per line, labels by class name.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut class_names = Vec::new();
        let mut examples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let name = match parsed.label {
                LabelValue::Name(s) => s,
                LabelValue::Number(n) => n.to_string(),
            };
            let label = *index.entry(name.clone()).or_insert_with(|| {
                class_names.push(name);
                class_names.len() - 1
            });
            examples.push(Example::new(parsed.text, label));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(name, examples, class_names)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.examples {
            let line = LineOut {
                text: &e.text,
                label: &self.class_names[e.label],
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn stats(&self) -> ClassStats {
        let mut counts = vec![0; self.n_classes()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        let imbalance_ratio = match (present.iter().max(), present.iter().min()) {
            (Some(&hi), Some(&lo)) => hi as f64 / lo as f64,
            _ => 1.0,
        };
        ClassStats {
            class_names: self.class_names.clone(),
            counts,
            imbalance_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    /// Largest over smallest count among classes that occur.
    pub imbalance_ratio: f64,
}

impl ClassStats {
    pub fn to_table(&self) -> String {
        let total: usize = self.counts.iter().sum();
        let width = self.class_names.iter().map(|c| c.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>7}  {:>6}\n", "class", "count", "share");
        for (name, &n) in self.class_names.iter().zip(&self.counts) {
            let share = if total > 0 { n as f64 / total as f64 } else { 0.0 };
            out.push_str(&format!("{name:<width$}  {n:>7}  {share:>6.3}\n"));
        }
        out.push_str(&format!("imbalance ratio {:.3}\n", self.imbalance_ratio));
        out
    }
}

/// Give each class `floor(frac * n_c)` and hand out the rest of `target` by
/// largest remainder, never exceeding `room`. Ties go to classes not in
/// `bumped`, then to the lower class id.
fn allocate(counts: &[usize], room: &[usize], num: usize, den: usize, target: usize, bumped: &[bool]) -> Vec<usize> {
    let mut alloc: Vec<usize> = counts.iter().zip(room).map(|(&n, &r)| (n * num / den).min(r)).collect();
    let mut short = target.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(counts[c] * num % den), bumped[c], c));
    while short > 0 {
        let mut gave = false;
        for &c in &order {
            if short > 0 && alloc[c] < room[c] {
                alloc[c] += 1;
                short -= 1;
                gave = true;
            }
        }
        if !gave {
            break;
        }
    }
    alloc
}

/// Stratified 70/10/20 split. Validation and test receive `floor(0.1 N)` and
/// `floor(0.2 N)` examples; every remainder goes to train.
pub fn split_70_10_20(labels: &[usize], n_classes: usize, seed: u64) -> Result<Splits> {
    if labels.len() < 10 {
        return Err(Error::Data(format!(
            "a 70/10/20 split needs at least 10 examples, got {}",
            labels.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        let slot = by_class.get_mut(y).ok_or(Error::OutOfRange {
            op: "split",
            index: y,
            len: n_classes,
        })?;
        slot.push(i);
    }
    for (c, idx) in by_class.iter().enumerate() {
        if !idx.is_empty() && idx.len() < 3 {
            log::warn!("class {c} has {} examples; its split allocation is best effort", idx.len());
        }
    }
    let n = labels.len();
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let val = allocate(&counts, &counts, 1, 10, n / 10, &vec![false; n_classes]);
    let bumped: Vec<bool> = counts.iter().zip(&val).map(|(&c, &v)| v > c / 10).collect();
    let room: Vec<usize> = counts.iter().zip(&val).map(|(c, v)| c - v).collect();
    let test = allocate(&counts, &room, 2, 10, n * 2 / 10, &bumped);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let (v, rest) = idx.split_at(val[c]);
        let (t, tr) = rest.split_at(test[c]);
        splits.val.extend_from_slice(v);
        splits.test.extend_from_slice(t);
        splits.train.extend_from_slice(tr);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}
