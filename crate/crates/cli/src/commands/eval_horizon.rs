//! `eval-horizon`: per-step open-loop prediction error of the kinematic model
//! and the trained baselines, along planned task sequences and random ones.

use std::time::Instant;

use bodyschema::baseline::{compare_long_horizon, random_action_sequences, HorizonErrorRow, TestSequence};
use bodyschema::mpc::run_task;
use bodyschema::seed::rng;
use bodyschema::VirtualJointSet;
use rayon::prelude::*;

use super::mpc::{scenario, PlacingJob};
use super::{load_baselines, Outcome};
use crate::error::{CliResult, Context};
use crate::experiment::{Experiment, PhiSource};
use crate::output::{cell, CsvTable, Timings};

pub const TASK_FILE: &str = "horizon_task.csv";
pub const RANDOM_FILE: &str = "horizon_random.csv";

/// Offsets the kinematic model predicts with.
pub fn model_phi(exp: &Experiment) -> CliResult<VirtualJointSet> {
    Ok(match exp.config.mpc.phi {
        PhiSource::GroundTruth => exp.truth.clone(),
        PhiSource::Regressed => {
            let n = &exp.config.noise;
            exp.regress_from_observations(&exp.truth, n.pixel_sigma, n.depth_sigma, "eval-horizon/phi")?
                .phi
        }
    })
}

/// Action sequences the kinematic planner produces for every task and seed.
pub fn task_sequences(exp: &Experiment, phi: &VirtualJointSet) -> CliResult<Vec<TestSequence>> {
    let jobs: Vec<PlacingJob> = (0..exp.scene.tasks.len())
        .flat_map(|task| {
            exp.config
                .seeds
                .iter()
                .map(move |&seed| PlacingJob { task, grasp: 0, seed })
        })
        .collect();
    jobs.par_iter()
        .map(|job| {
            let sc = scenario(exp, job, phi.clone())?;
            let report = run_task(&sc).context(job.id(exp))?;
            Ok(TestSequence {
                theta0: sc.theta0.clone(),
                actions: report.actions,
            })
        })
        .collect()
}

/// Random sequences from in-view starts.
pub fn random_sequences(exp: &Experiment) -> CliResult<Vec<TestSequence>> {
    let id = "eval-horizon/random";
    let mut r = rng(exp.seed_for(id));
    let h = &exp.config.horizon;
    let starts = exp
        .sampler()?
        .sample_in_view(&mut r, &exp.camera, &exp.chain, &exp.truth, h.random_sequences)
        .context(id)?;
    random_action_sequences(
        &exp.chain,
        &exp.camera,
        &exp.truth,
        &starts,
        exp.config.mpc.horizon,
        h.max_delta,
        &mut r,
    )
    .context(id)
}

fn table(rows: &[HorizonErrorRow]) -> CsvTable {
    let mut t = CsvTable::new(&["step", "model_id", "mean_err_px", "std_err_px"]);
    for r in rows {
        t.push(vec![
            r.step.to_string(),
            r.model_id.clone(),
            cell(r.mean_err_px),
            cell(r.std_err_px),
        ]);
    }
    t
}

fn last_step_line(kind: &str, rows: &[HorizonErrorRow]) -> String {
    let last = rows.iter().map(|r| r.step).max().unwrap_or(0);
    let parts: Vec<String> = rows
        .iter()
        .filter(|r| r.step == last)
        .map(|r| format!("{} {:.2}", r.model_id, r.mean_err_px))
        .collect();
    format!("{kind} sequences, mean px error at step {last}: {}", parts.join(", "))
}

pub fn run(exp: &Experiment, dry_run: bool) -> CliResult<Outcome> {
    let out = exp.out_dir();
    let models = load_baselines(out)?;
    if dry_run {
        return Ok(Outcome::dry_run(format!(
            "eval-horizon: {} task sequences and {} random sequences of {} steps, {} baselines",
            exp.scene.tasks.len() * exp.config.seeds.len(),
            exp.config.horizon.random_sequences,
            exp.config.mpc.horizon,
            models.len()
        )));
    }
    let meta = exp
        .metadata("eval-horizon")
        .with("phi_source", format!("{:?}", exp.config.mpc.phi));
    let baselines: Vec<_> = models.iter().collect();
    let mut timings = Timings::default();

    let t = Instant::now();
    let phi = model_phi(exp)?;
    let tasks = task_sequences(exp, &phi)?;
    let task_rows = compare_long_horizon(&exp.chain, &exp.camera, &exp.truth, &phi, &baselines, &tasks)?;
    timings.record("task", t.elapsed());

    let t = Instant::now();
    let random = random_sequences(exp)?;
    let random_rows = compare_long_horizon(&exp.chain, &exp.camera, &exp.truth, &phi, &baselines, &random)?;
    timings.record("random", t.elapsed());

    let task_path = out.join(TASK_FILE);
    let random_path = out.join(RANDOM_FILE);
    table(&task_rows).write(&task_path, &meta)?;
    table(&random_rows).write(&random_path, &meta)?;
    timings.write(out, "eval-horizon", &meta)?;
    Ok(Outcome {
        files: vec![task_path, random_path],
        summary: vec![
            last_step_line("task", &task_rows),
            last_step_line("random", &random_rows),
        ],
    })
}
