//! `regress`: virtual joint regression on a dataset file, or one of the
//! recovery presets on freshly generated noiseless observations.

use std::path::Path;
use std::time::Instant;

use bodyschema::keypoint::ObservationDataset;
use bodyschema::regression::{regrasp_adapt, regress, RegressionReport, RegressionResult};
use bodyschema::VirtualJointSet;
use rayon::prelude::*;

use super::Outcome;
use crate::error::{CliError, CliResult, Context};
use crate::experiment::Experiment;
use crate::output::{cell, sha256_hex, write_atomic, CsvTable, ResultsTable, Timings};

pub const REPORT_FILE: &str = "regression.toml";
pub const LOSS_FILE: &str = "regression_loss.csv";
pub const GT_RESULTS_FILE: &str = "gt_recovery.csv";
pub const GT_CURVE_FILE: &str = "gt_recovery_curve.csv";
pub const REGRASP_RESULTS_FILE: &str = "regrasp.csv";
pub const REGRASP_CURVE_FILE: &str = "regrasp_curve.csv";
/// Squared-error threshold reported as `steps_to_threshold`, in m^2.
pub const RECOVERY_THRESHOLD_M2: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RegressPreset {
    /// Every object preset and seed, from zero, on noiseless data.
    GtRecovery,
    /// Cold and warm re-regression after each re-grasp of the configured object.
    Regrasp,
}

pub fn run(exp: &Experiment, dataset: Option<&Path>, preset: RegressPreset, dry_run: bool) -> CliResult<Outcome> {
    match dataset {
        Some(path) => run_dataset(exp, path, dry_run),
        None => match preset {
            RegressPreset::GtRecovery => run_gt_recovery(exp, dry_run),
            RegressPreset::Regrasp => run_regrasp(exp, dry_run),
        },
    }
}

/// `(step, loss)` with step 0 the initial loss.
fn loss_curve(r: &RegressionResult) -> impl Iterator<Item = (usize, f64)> + '_ {
    std::iter::once(r.initial_loss)
        .chain(r.loss_history.iter().copied())
        .enumerate()
}

fn non_increasing(r: &RegressionResult) -> bool {
    let losses: Vec<f64> = loss_curve(r).map(|(_, l)| l).collect();
    losses.windows(2).all(|w| w[1] <= w[0])
}

/// Largest per-joint Euclidean distance in meters.
pub fn max_joint_error(a: &VirtualJointSet, b: &VirtualJointSet) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
}

fn run_dataset(exp: &Experiment, path: &Path, dry_run: bool) -> CliResult<Outcome> {
    if !path.is_file() {
        return Err(CliError::usage(format!("dataset file not found: {}", path.display())));
    }
    let bytes = std::fs::read(path).context(format!("cannot read {}", path.display()))?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::usage(format!("{}: not UTF-8 text", path.display())))?;
    let data = ObservationDataset::from_csv(&path.display().to_string(), &text)?;
    if dry_run {
        return Ok(Outcome::dry_run(format!(
            "regress: {} records with {} keypoints from {}",
            data.len(),
            data.keypoint_count(),
            path.display()
        )));
    }
    let out = exp.out_dir();
    let meta = exp
        .metadata("regress")
        .with(
            "dataset",
            path.file_name()
                .map_or(String::new(), |n| n.to_string_lossy().into_owned()),
        )
        .with("dataset_sha256", sha256_hex(text.as_bytes()))
        .with("dataset_seed", data.metadata.seed);
    let mut timings = Timings::default();
    let t = Instant::now();
    let cfg = exp.regression_config(data.metadata.pixel_noise_sigma);
    let result = regress(&data, &exp.camera, &exp.chain, &cfg).context(path.display())?;
    timings.record("regression", t.elapsed());

    let report = RegressionReport::from_result(&result);
    let report_path = out.join(REPORT_FILE);
    write_atomic(&report_path, (meta.header() + &report.to_toml()).as_bytes())?;
    let mut curve = CsvTable::new(&["step", "loss"]);
    for (step, loss) in loss_curve(&result) {
        curve.push(vec![step.to_string(), cell(loss)]);
    }
    let loss_path = out.join(LOSS_FILE);
    curve.write(&loss_path, &meta)?;
    timings.write(out, "regress", &meta)?;
    Ok(Outcome {
        files: vec![report_path, loss_path],
        summary: vec![format!(
            "{} steps, stop: {:?}, loss {:.3e} -> {:.3e}",
            result.steps_taken,
            result.stop_reason,
            result.initial_loss,
            result.final_loss()
        )],
    })
}

fn run_gt_recovery(exp: &Experiment, dry_run: bool) -> CliResult<Outcome> {
    let jobs: Vec<(usize, u64)> = (0..exp.scene.objects.len())
        .flat_map(|o| exp.config.seeds.iter().map(move |&s| (o, s)))
        .collect();
    if dry_run {
        return Ok(Outcome::dry_run(format!("regress gt-recovery: {} runs", jobs.len())));
    }
    let out = exp.out_dir();
    let meta = exp.metadata("regress").with("preset", "gt-recovery");
    let t = Instant::now();
    let results: Vec<RegressionResult> = jobs
        .par_iter()
        .map(|&(o, s)| {
            let obj = &exp.scene.objects[o];
            exp.regress_from_observations(
                &obj.phi(),
                0.0,
                0.0,
                &format!("regress/gt-recovery/{}/seed{s}", obj.name),
            )
        })
        .collect::<CliResult<_>>()?;
    let mut timings = Timings::default();
    timings.record("regressions", t.elapsed());

    let mut table = ResultsTable::default();
    let mut curve = CsvTable::new(&["object", "seed", "step", "loss", "sq_err_m2"]);
    let mut worst_steps = 0usize;
    for (&(o, s), r) in jobs.iter().zip(&results) {
        let obj = &exp.scene.objects[o];
        let truth = obj.phi();
        let errors = r.squared_error_curve(&truth);
        for ((step, loss), err) in loss_curve(r).zip(&errors) {
            curve.push(vec![
                obj.name.clone(),
                s.to_string(),
                step.to_string(),
                cell(loss),
                cell(*err),
            ]);
        }
        let reached = errors.iter().position(|&e| e < RECOVERY_THRESHOLD_M2);
        worst_steps = worst_steps.max(reached.unwrap_or(usize::MAX));
        let name = obj.name.as_str();
        table.push("gt-recovery", name, 0, s, "steps_taken", r.steps_taken as f64);
        table.push(
            "gt-recovery",
            name,
            0,
            s,
            "steps_to_threshold",
            reached.map_or(f64::NAN, |v| v as f64),
        );
        table.push("gt-recovery", name, 0, s, "final_sq_err_m2", *errors.last().unwrap());
        table.push(
            "gt-recovery",
            name,
            0,
            s,
            "non_increasing",
            f64::from(u8::from(non_increasing(r))),
        );
    }
    let results_path = out.join(GT_RESULTS_FILE);
    let curve_path = out.join(GT_CURVE_FILE);
    table.to_table().write(&results_path, &meta)?;
    curve.write(&curve_path, &meta)?;
    timings.write(out, "regress-gt-recovery", &meta)?;
    let worst = if worst_steps == usize::MAX {
        "not reached in every run".to_string()
    } else {
        format!("reached within {worst_steps} steps in every run")
    };
    Ok(Outcome {
        files: vec![results_path, curve_path],
        summary: vec![format!(
            "{} runs; ||phi - truth||^2 < {RECOVERY_THRESHOLD_M2:e} {worst}",
            jobs.len()
        )],
    })
}

struct RegraspRun {
    cold: RegressionResult,
    warm: RegressionResult,
    truth: VirtualJointSet,
}

fn run_regrasp(exp: &Experiment, dry_run: bool) -> CliResult<Outcome> {
    let grasps = exp.scene.grasps.len();
    let jobs: Vec<(usize, u64)> = (1..grasps)
        .flat_map(|g| exp.config.seeds.iter().map(move |&s| (g, s)))
        .collect();
    if dry_run {
        return Ok(Outcome::dry_run(format!(
            "regress regrasp: {} re-grasps x {} seeds",
            grasps - 1,
            exp.config.seeds.len()
        )));
    }
    let out = exp.out_dir();
    let obj = exp.config.object.as_str();
    let meta = exp.metadata("regress").with("preset", "regrasp").with("object", obj);
    let t = Instant::now();
    let runs: Vec<RegraspRun> = jobs
        .par_iter()
        .map(|&(g, s)| {
            let nominal =
                exp.regress_from_observations(&exp.truth, 0.0, 0.0, &format!("regress/regrasp/{obj}/grasp0/seed{s}"))?;
            let truth = exp.grasp_truth(g);
            let id = format!("regress/regrasp/{obj}/grasp{g}/seed{s}");
            let data = exp.observe(&truth, 0.0, 0.0, &id)?;
            let cfg = exp.regression_config(0.0);
            let cold = regress(&data, &exp.camera, &exp.chain, &cfg).context(&id)?;
            let warm = regrasp_adapt(&nominal, &data, &exp.camera, &exp.chain, &cfg).context(&id)?;
            Ok(RegraspRun { cold, warm, truth })
        })
        .collect::<CliResult<_>>()?;
    let mut timings = Timings::default();
    timings.record("regressions", t.elapsed());

    let mut table = ResultsTable::default();
    let mut curve = CsvTable::new(&["object", "grasp", "seed", "start", "step", "loss", "sq_err_m2"]);
    let mut warm_wins = 0;
    for (&(g, s), run) in jobs.iter().zip(&runs) {
        for (start, r) in [("cold", &run.cold), ("warm", &run.warm)] {
            let errors = r.squared_error_curve(&run.truth);
            for ((step, loss), err) in loss_curve(r).zip(&errors) {
                curve.push(vec![
                    obj.into(),
                    g.to_string(),
                    s.to_string(),
                    start.into(),
                    step.to_string(),
                    cell(loss),
                    cell(*err),
                ]);
            }
            table.push("regrasp", obj, g, s, &format!("{start}_steps"), r.steps_taken as f64);
            table.push(
                "regrasp",
                obj,
                g,
                s,
                &format!("{start}_max_err_m"),
                max_joint_error(&r.phi, &run.truth),
            );
        }
        warm_wins += usize::from(run.warm.steps_taken < run.cold.steps_taken);
    }
    let results_path = out.join(REGRASP_RESULTS_FILE);
    let curve_path = out.join(REGRASP_CURVE_FILE);
    table.to_table().write(&results_path, &meta)?;
    curve.write(&curve_path, &meta)?;
    timings.write(out, "regress-regrasp", &meta)?;
    Ok(Outcome {
        files: vec![results_path, curve_path],
        summary: vec![format!(
            "warm start needed fewer steps in {warm_wins} of {} runs",
            jobs.len()
        )],
    })
}
