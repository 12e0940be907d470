//! `report`: aggregates whatever result files exist in the input directory
//! into `table.csv` and `report.md`. Reads only; the inputs are never touched.

use std::fmt::Write as _;
use std::path::Path;

use bodyschema::baseline::mean_std;

use super::eval_horizon::{RANDOM_FILE, TASK_FILE};
use super::mpc::{summarize, PLACING_FILE};
use super::regress::{GT_RESULTS_FILE, REGRASP_RESULTS_FILE};
use super::train_dyn::RESULTS_FILE as TRAINING_FILE;
use super::Outcome;
use crate::error::{CliError, CliResult};
use crate::experiment::Experiment;
use crate::output::{write_atomic, CsvTable, Metadata, ResultsTable};

pub const TABLE_FILE: &str = "table.csv";
pub const REPORT_FILE: &str = "report.md";

pub const INPUT_FILES: [&str; 6] = [
    PLACING_FILE,
    GT_RESULTS_FILE,
    REGRASP_RESULTS_FILE,
    TRAINING_FILE,
    TASK_FILE,
    RANDOM_FILE,
];

struct Inputs {
    found: Vec<(&'static str, Metadata, CsvTable)>,
}

impl Inputs {
    fn read(dir: &Path) -> CliResult<Self> {
        let mut found = Vec::new();
        for name in INPUT_FILES {
            let path = dir.join(name);
            if path.is_file() {
                let (meta, table) = CsvTable::read(&path)?;
                found.push((name, meta, table));
            }
        }
        Ok(Self { found })
    }

    fn get(&self, name: &str) -> Option<&CsvTable> {
        self.found.iter().find(|(n, _, _)| *n == name).map(|(_, _, t)| t)
    }

    fn results(&self, name: &str) -> CliResult<Option<ResultsTable>> {
        self.get(name).map(|t| ResultsTable::from_table(name, t)).transpose()
    }

    /// Distinct values of `key` across the input headers, comma-joined.
    fn header_value(&self, key: &str) -> String {
        let mut values: Vec<&str> = Vec::new();
        for (_, m, _) in &self.found {
            if let Some(v) = m.get(key) {
                if !values.contains(&v) {
                    values.push(v);
                }
            }
        }
        if values.is_empty() {
            "unknown".into()
        } else {
            values.join(",")
        }
    }
}

fn mean_std_cell(v: &[f64]) -> String {
    let (m, s) = mean_std(v);
    format!("{m:.2}({s:.2})")
}

fn markdown_table(t: &CsvTable) -> String {
    let mut s = format!("| {} |\n|{}\n", t.header.join(" | "), "---|".repeat(t.header.len()));
    for r in &t.rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

/// One row per model, one `mean(std)` column per task.
fn placing_table(placing: &ResultsTable) -> CsvTable {
    let summary = summarize(placing);
    let mut tasks: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for s in &summary {
        if !tasks.contains(&s.task.as_str()) {
            tasks.push(&s.task);
        }
        if !models.contains(&s.model.as_str()) {
            models.push(&s.model);
        }
    }
    let mut header = vec!["method"];
    header.extend(&tasks);
    let mut t = CsvTable::new(&header);
    for model in models {
        let mut row = vec![model.to_string()];
        for task in &tasks {
            let experiment = format!("placing/{model}/{task}");
            let v = placing.values("rmse_px", |r| r.experiment == experiment);
            row.push(if v.is_empty() { "-".into() } else { mean_std_cell(&v) });
        }
        t.push(row);
    }
    t
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn horizon_section(md: &mut String, title: &str, t: &CsvTable) -> CliResult<()> {
    let (step, model, mean) = (t.column("step")?, t.column("model_id")?, t.column("mean_err_px")?);
    let last = t
        .rows
        .iter()
        .filter_map(|r| r[step].parse::<usize>().ok())
        .max()
        .unwrap_or(0);
    let _ = writeln!(md, "## {title}\n\nMean pixel error per model at steps 1 and {last}.\n");
    let mut out = CsvTable::new(&["model", "step 1", &format!("step {last}")]);
    let mut models: Vec<&str> = Vec::new();
    for r in &t.rows {
        if !models.contains(&r[model].as_str()) {
            models.push(&r[model]);
        }
    }
    let at = |m: &str, s: usize| -> String {
        t.rows
            .iter()
            .find(|r| r[model] == m && r[step] == s.to_string())
            .and_then(|r| r[mean].parse::<f64>().ok())
            .map_or("-".into(), |v| format!("{v:.2}"))
    };
    for m in models {
        out.push(vec![m.into(), at(m, 1), at(m, last)]);
    }
    md.push_str(&markdown_table(&out));
    md.push('\n');
    Ok(())
}

pub fn run(exp: &Experiment, input: Option<&Path>, dry_run: bool) -> CliResult<Outcome> {
    let input = input.unwrap_or(exp.out_dir());
    let inputs = Inputs::read(input)?;
    if inputs.found.is_empty() {
        return Err(CliError::usage(format!(
            "no result files in {} (expected any of {})",
            input.display(),
            INPUT_FILES.join(", ")
        )));
    }
    if dry_run {
        let names: Vec<&str> = inputs.found.iter().map(|(n, _, _)| *n).collect();
        return Ok(Outcome::dry_run(format!(
            "report: would aggregate {}",
            names.join(", ")
        )));
    }
    let meta = Metadata::new("report")
        .with("master_seed", inputs.header_value("master_seed"))
        .with("config_hash", inputs.header_value("config_hash"));
    let mut md = String::from("# Results\n\n");
    let mut files = Vec::new();
    let out = exp.out_dir();

    if let Some(placing) = inputs.results(PLACING_FILE)? {
        let t = placing_table(&placing);
        let path = out.join(TABLE_FILE);
        t.write(&path, &meta)?;
        files.push(path);
        md.push_str("## Placing\n\nFinal pixel RMSE of the true keypoints, mean(std) over runs.\n\n");
        md.push_str(&markdown_table(&t));
        md.push('\n');
    }
    if let Some(gt) = inputs.results(GT_RESULTS_FILE)? {
        let steps = gt.values("steps_to_threshold", |_| true);
        let errs = gt.values("final_sq_err_m2", |_| true);
        let mono = gt.values("non_increasing", |_| true);
        let reached = steps.iter().filter(|s| s.is_finite()).count();
        let _ = writeln!(
            md,
            "## Offset recovery\n\n- runs: {}\n- below 1e-6 m^2: {reached} of {}\n- worst steps to reach it: {}\n- largest final squared error: {:.3e} m^2\n- non-increasing loss: {} of {}\n",
            steps.len(),
            steps.len(),
            if reached == steps.len() { format!("{}", max(&steps)) } else { "-".into() },
            max(&errs),
            mono.iter().filter(|&&m| m == 1.0).count(),
            mono.len()
        );
    }
    if let Some(rg) = inputs.results(REGRASP_RESULTS_FILE)? {
        let cold = rg.values("cold_steps", |_| true);
        let warm = rg.values("warm_steps", |_| true);
        let wins = cold.iter().zip(&warm).filter(|(c, w)| w < c).count();
        let _ = writeln!(
            md,
            "## Re-grasp\n\n- steps, cold start: {}\n- steps, warm start: {}\n- warm start faster: {wins} of {}\n- largest joint error, cold / warm: {:.3e} / {:.3e} m\n",
            mean_std_cell(&cold),
            mean_std_cell(&warm),
            cold.len(),
            max(&rg.values("cold_max_err_m", |_| true)),
            max(&rg.values("warm_max_err_m", |_| true))
        );
    }
    if let Some(tr) = inputs.results(TRAINING_FILE)? {
        md.push_str("## Dynamics baselines\n\n");
        let mut t = CsvTable::new(&["model", "epochs", "train NMSE", "test NMSE"]);
        for r in tr.rows().iter().filter(|r| r.metric == "test_nmse") {
            let one = |metric: &str| {
                tr.values(metric, |x| x.experiment == r.experiment)
                    .first()
                    .copied()
                    .unwrap_or(f64::NAN)
            };
            let model = r.experiment.trim_start_matches("train-dyn/");
            t.push(vec![
                model.into(),
                format!("{}", one("epochs_run")),
                format!("{:.4}", one("train_nmse")),
                format!("{:.4}", r.value),
            ]);
        }
        md.push_str(&markdown_table(&t));
        md.push('\n');
    }
    if let Some(t) = inputs.get(TASK_FILE) {
        horizon_section(&mut md, "Prediction error along planned sequences", t)?;
    }
    if let Some(t) = inputs.get(RANDOM_FILE) {
        horizon_section(&mut md, "Prediction error along random sequences", t)?;
    }

    let path = out.join(REPORT_FILE);
    let header: String = meta
        .entries
        .iter()
        .map(|(k, v)| format!("<!-- {k}: {v} -->\n"))
        .collect();
    write_atomic(&path, (header + "\n" + &md).as_bytes())?;
    files.push(path);
    Ok(Outcome {
        summary: vec![format!("aggregated {} result files", inputs.found.len())],
        files,
    })
}
