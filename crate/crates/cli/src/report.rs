//! Collate run files into summary tables.
//!
//! Every number in `report/` is a mean over the run JSON files found under
//! the results directory. When several setups could fill a cell, the one with
//! the largest sample size wins, then the one with more seeds, then the first
//! by experiment name and label.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use promptlab::tasks::TaskKind;
use promptlab::Paradigm;

use crate::config::SampleSize;
use crate::error::{CliError, CliResult};
use crate::runner::{cells, Cell, Purpose, RunRecord};

/// The prompt combinations of the template/verbalizer comparison:
/// six with a fine-tuned PLM, five with a frozen one.
pub const COMBO_ROWS: [(bool, &str, &str); 11] = [
    (false, "manual", "manual"),
    (false, "manual", "soft"),
    (false, "mixed", "manual"),
    (false, "mixed", "soft"),
    (false, "soft", "manual"),
    (false, "soft", "soft"),
    (true, "manual", "soft"),
    (true, "mixed", "manual"),
    (true, "mixed", "soft"),
    (true, "soft", "manual"),
    (true, "soft", "soft"),
];

pub const COMBO_HEADER: [&str; 10] = [
    "plm",
    "template",
    "verbalizer",
    "task",
    "sample_size",
    "label",
    "n_seeds",
    "seeds",
    "balanced_accuracy_mean",
    "balanced_accuracy_sd",
];

pub const SIZE_CURVE_HEADER: [&str; 8] = [
    "task",
    "sample_size",
    "paradigm",
    "plm",
    "label",
    "n_seeds",
    "balanced_accuracy_mean",
    "balanced_accuracy_sd",
];

pub const PARADIGM_HEADER: [&str; 11] = [
    "paradigm",
    "task",
    "sample_size",
    "label",
    "n_seeds",
    "balanced_accuracy_mean",
    "balanced_accuracy_sd",
    "f1_weighted_mean",
    "f1_weighted_sd",
    "auc_mean",
    "auc_sd",
];

pub const PARAM_CURVE_HEADER: [&str; 6] = [
    "paradigm",
    "label",
    "n_params",
    "n_seeds",
    "balanced_accuracy_mean",
    "balanced_accuracy_sd",
];

pub const TEMPLATE_HEADER: [&str; 6] = [
    "order",
    "label",
    "template",
    "n_seeds",
    "balanced_accuracy_mean",
    "balanced_accuracy_sd",
];

fn plm_name(frozen: bool) -> &'static str {
    if frozen {
        "frozen"
    } else {
        "fine-tuned"
    }
}

/// Every run file under `dir`, skipping `report/` and files that are not runs.
pub fn collect_runs(dir: &Path) -> CliResult<Vec<RunRecord>> {
    if !dir.is_dir() {
        return Err(CliError::runtime(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_entry(|e| !(e.file_type().is_dir() && e.file_name() == "report" && e.depth() > 0))
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut runs = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p)?;
        match serde_json::from_str::<RunRecord>(&text) {
            Ok(r) => runs.push(r),
            Err(e) => log::debug!("skipping {}: {e}", p.display()),
        }
    }
    if runs.is_empty() {
        return Err(CliError::runtime(format!("no run results under {}", dir.display())));
    }
    Ok(runs)
}

fn pick<'a, 'b>(candidates: impl IntoIterator<Item = &'b Cell<'a>>) -> Option<&'b Cell<'a>> {
    candidates.into_iter().min_by(|a, b| {
        let (x, y) = (a.first(), b.first());
        y.sample_size
            .cmp(&x.sample_size)
            .then(b.runs.len().cmp(&a.runs.len()))
            .then((&x.experiment, &x.label).cmp(&(&y.experiment, &y.label)))
    })
}

fn kinds_match(r: &RunRecord, template: &str, verbalizer: &str) -> bool {
    r.template_kind.as_deref() == Some(template) && r.verbalizer_kind.as_deref() == Some(verbalizer)
}

/// Cells of a table together with the rows left blank.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub rows: Vec<Vec<String>>,
    pub blanks: Vec<String>,
}

fn ba_cols(c: &Cell) -> [String; 2] {
    let s = c.stat(|m| m.balanced_accuracy);
    [s.mean_str(), s.sd_str()]
}

/// The task the template comparison and optimized-model tables are about:
/// triage when it was run, else the first task present.
pub fn headline_task(runs: &[RunRecord]) -> Option<TaskKind> {
    let tasks: Vec<TaskKind> = runs.iter().filter(|r| r.purpose == Purpose::Run).map(|r| r.task).collect();
    if tasks.contains(&TaskKind::Triage) {
        return Some(TaskKind::Triage);
    }
    TaskKind::ALL.into_iter().find(|t| tasks.contains(t))
}

pub fn combos(all: &[Cell], task: Option<TaskKind>) -> Table {
    let mut t = Table::default();
    for (frozen, tk, vk) in COMBO_ROWS {
        let found = pick(all.iter().filter(|c| {
            let r = c.first();
            r.purpose == Purpose::Run
                && Some(r.task) == task
                && r.paradigm == Paradigm::Prompt
                && r.plm_frozen == frozen
                && kinds_match(r, tk, vk)
        }));
        let mut row = vec![plm_name(frozen).to_string(), tk.to_string(), vk.to_string()];
        match found {
            Some(c) => {
                let r = c.first();
                row.extend([
                    r.task.to_string(),
                    r.sample_size.to_string(),
                    r.label.clone(),
                    c.runs.len().to_string(),
                    c.seeds(),
                ]);
                row.extend(ba_cols(c));
            }
            None => {
                row.extend(std::iter::repeat_n(String::new(), 7));
                t.blanks.push(format!("{} ({tk}, {vk})", plm_name(frozen)));
            }
        }
        t.rows.push(row);
    }
    t
}

/// Tasks x sample sizes x paradigms x PLM regime. The prompt cell prefers the
/// mixed template with a soft verbalizer.
pub fn size_curve(all: &[Cell]) -> Table {
    let runs: Vec<&Cell> = all.iter().filter(|c| c.first().purpose == Purpose::Run).collect();
    let mut tasks: Vec<TaskKind> = runs.iter().map(|c| c.first().task).collect();
    tasks.sort_by_key(|t| TaskKind::ALL.iter().position(|k| k == t));
    tasks.dedup();
    let mut sizes: Vec<SampleSize> = runs.iter().map(|c| c.first().sample_size).collect();
    sizes.sort();
    sizes.dedup();
    let mut t = Table::default();
    for &task in &tasks {
        for &size in &sizes {
            for paradigm in [Paradigm::Prompt, Paradigm::Classic] {
                for frozen in [false, true] {
                    let matching: Vec<&Cell> = runs
                        .iter()
                        .copied()
                        .filter(|c| {
                            let r = c.first();
                            r.task == task && r.sample_size == size && r.paradigm == paradigm && r.plm_frozen == frozen
                        })
                        .collect();
                    let preferred = pick(matching.iter().copied().filter(|c| kinds_match(c.first(), "mixed", "soft")));
                    let found = preferred.or_else(|| pick(matching.iter().copied()));
                    let mut row = vec![
                        task.to_string(),
                        size.to_string(),
                        paradigm.as_str().to_string(),
                        plm_name(frozen).to_string(),
                    ];
                    match found {
                        Some(c) => {
                            row.extend([c.first().label.clone(), c.runs.len().to_string()]);
                            row.extend(ba_cols(c));
                        }
                        None => {
                            row.extend(std::iter::repeat_n(String::new(), 4));
                            t.blanks.push(format!("{task} s={size} {} {}", paradigm.as_str(), plm_name(frozen)));
                        }
                    }
                    t.rows.push(row);
                }
            }
        }
    }
    t
}

/// Classic and prompt with a frozen PLM on the headline task.
pub fn paradigms(all: &[Cell], task: Option<TaskKind>) -> Table {
    let mut t = Table::default();
    for paradigm in [Paradigm::Classic, Paradigm::Prompt] {
        let matching: Vec<&Cell> = all
            .iter()
            .filter(|c| {
                let r = c.first();
                r.purpose == Purpose::Run && Some(r.task) == task && r.paradigm == paradigm && r.plm_frozen
            })
            .collect();
        let preferred = pick(matching.iter().copied().filter(|c| kinds_match(c.first(), "mixed", "soft")));
        let found = preferred.or_else(|| pick(matching.iter().copied()));
        let mut row = vec![paradigm.as_str().to_string()];
        match found {
            Some(c) => {
                let r = c.first();
                let (ba, f1, auc) = (
                    c.stat(|m| m.balanced_accuracy),
                    c.stat(|m| m.f1_weighted),
                    c.stat(|m| m.auc_macro_ovr),
                );
                row.extend([
                    r.task.to_string(),
                    r.sample_size.to_string(),
                    r.label.clone(),
                    c.runs.len().to_string(),
                    ba.mean_str(),
                    ba.sd_str(),
                    f1.mean_str(),
                    f1.sd_str(),
                    auc.mean_str(),
                    auc.sd_str(),
                ]);
            }
            None => {
                row.extend(std::iter::repeat_n(String::new(), 10));
                t.blanks.push(format!("{} frozen", paradigm.as_str()));
            }
        }
        t.rows.push(row);
    }
    t
}

/// (n_params, balanced accuracy) per sweep setup, ascending in n_params.
pub fn param_curve(all: &[Cell]) -> Table {
    let mut sweep: Vec<&Cell> = all.iter().filter(|c| c.first().purpose == Purpose::Sweep).collect();
    sweep.sort_by(|a, b| {
        let (x, y) = (a.first(), b.first());
        (x.n_trainable_params, x.paradigm, &x.label).cmp(&(y.n_trainable_params, y.paradigm, &y.label))
    });
    let rows = sweep
        .into_iter()
        .map(|c| {
            let r = c.first();
            let mut row = vec![
                r.paradigm.as_str().to_string(),
                r.label.clone(),
                r.n_trainable_params.to_string(),
                c.runs.len().to_string(),
            ];
            row.extend(ba_cols(c));
            row
        })
        .collect();
    Table { rows, blanks: Vec::new() }
}

/// One row per compared template in listed order.
pub fn templates(all: &[Cell]) -> Table {
    let mut cmp: Vec<&Cell> = all.iter().filter(|c| c.first().purpose == Purpose::Compare).collect();
    cmp.sort_by(|a, b| (&a.first().experiment, a.first().order).cmp(&(&b.first().experiment, b.first().order)));
    let rows = cmp
        .into_iter()
        .map(|c| {
            let r = c.first();
            let mut row = vec![
                r.order.to_string(),
                r.label.clone(),
                r.template.clone().unwrap_or_default(),
                c.runs.len().to_string(),
            ];
            row.extend(ba_cols(c));
            row
        })
        .collect();
    Table { rows, blanks: Vec::new() }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// What `emit_report` wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub dir: PathBuf,
    pub n_runs: usize,
    pub combos: Table,
    pub size_curve: Table,
    pub paradigms: Table,
    pub param_curve: Table,
    pub templates: Table,
}

pub fn emit_report(results: &Path) -> CliResult<Report> {
    let runs = collect_runs(results)?;
    let all = cells(&runs);
    let task = headline_task(&runs);
    let report = Report {
        dir: results.join("report"),
        n_runs: runs.len(),
        combos: combos(&all, task),
        size_curve: size_curve(&all),
        paradigms: paradigms(&all, task),
        param_curve: param_curve(&all),
        templates: templates(&all),
    };
    std::fs::create_dir_all(&report.dir)?;
    let d = &report.dir;
    write_csv(&d.join("prompt_combinations.csv"), &COMBO_HEADER, &report.combos.rows)?;
    write_csv(&d.join("sample_size_curve.csv"), &SIZE_CURVE_HEADER, &report.size_curve.rows)?;
    write_csv(&d.join("paradigm_summary.csv"), &PARADIGM_HEADER, &report.paradigms.rows)?;
    write_csv(&d.join("param_curve.csv"), &PARAM_CURVE_HEADER, &report.param_curve.rows)?;
    write_csv(&d.join("template_comparison.csv"), &TEMPLATE_HEADER, &report.templates.rows)?;
    std::fs::write(d.join("summary.txt"), summary(&runs, task, &report))?;
    Ok(report)
}

fn summary(runs: &[RunRecord], task: Option<TaskKind>, r: &Report) -> String {
    let count = |p: Purpose| runs.iter().filter(|x| x.purpose == p).count();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} run files: {} run, {} sweep, {} compare",
        runs.len(),
        count(Purpose::Run),
        count(Purpose::Sweep),
        count(Purpose::Compare)
    );
    let task = task.map_or("none".to_string(), |t| t.to_string());
    let _ = writeln!(s, "headline task: {task}");
    let _ = writeln!(s);
    for (name, t) in [
        ("prompt_combinations.csv", &r.combos),
        ("sample_size_curve.csv", &r.size_curve),
        ("paradigm_summary.csv", &r.paradigms),
        ("param_curve.csv", &r.param_curve),
        ("template_comparison.csv", &r.templates),
    ] {
        let _ = writeln!(s, "{name}: {} rows, {} blank", t.rows.len(), t.blanks.len());
        for b in &t.blanks {
            let _ = writeln!(s, "  blank: {b}");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "prompt combinations ({task}, balanced accuracy):");
    for row in &r.combos.rows {
        let value = if row[8].is_empty() { "-".to_string() } else { format!("{} ± {}", row[8], row[9]) };
        let _ = writeln!(s, "  {:<10} ({}, {}) {value}", row[0], row[1], row[2]);
    }
    if !r.templates.rows.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "templates (balanced accuracy):");
        for row in &r.templates.rows {
            let _ = writeln!(s, "  {} ± {}  {}", row[4], row[5], row[2]);
        }
    }
    if !r.param_curve.rows.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "trainable parameters vs balanced accuracy:");
        for row in &r.param_curve.rows {
            let _ = writeln!(s, "  {:<8} {:>12}  {}  {}", row[0], row[2], row[4], row[1]);
        }
    }
    s
}
