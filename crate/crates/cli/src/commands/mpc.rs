//! `mpc`: placing tasks over every task, grasp and seed, scored by the final
//! pixel RMSE of the true keypoints.

use std::time::Instant;

use bodyschema::baseline::{mean_std, run_baseline_task, TrainedBaseline, KINEMATIC_MODEL_ID};
use bodyschema::mpc::{run_task, GoalSource, Scenario, TaskReport};
use bodyschema::VirtualJointSet;
use rayon::prelude::*;

use super::{load_baselines, Outcome};
use crate::error::{CliResult, Context};
use crate::experiment::{Experiment, PhiSource};
use crate::output::{cell, CsvTable, ResultsTable, Timings};

pub const PLACING_FILE: &str = "placing.csv";
pub const SUMMARY_FILE: &str = "placing_summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacingJob {
    pub task: usize,
    pub grasp: usize,
    pub seed: u64,
}

impl PlacingJob {
    pub fn id(&self, exp: &Experiment) -> String {
        format!(
            "mpc/{}/grasp{}/seed{}",
            exp.scene.tasks[self.task].name, self.grasp, self.seed
        )
    }
}

/// Tasks, then grasps, then seeds.
pub fn placing_jobs(exp: &Experiment) -> Vec<PlacingJob> {
    let mut jobs = Vec::new();
    for task in 0..exp.scene.tasks.len() {
        for grasp in 0..exp.scene.grasps.len() {
            for &seed in &exp.config.seeds {
                jobs.push(PlacingJob { task, grasp, seed });
            }
        }
    }
    jobs
}

pub fn scenario(exp: &Experiment, job: &PlacingJob, phi: VirtualJointSet) -> CliResult<Scenario> {
    let task = &exp.scene.tasks[job.task];
    let m = &exp.config.mpc;
    let s = Scenario::new(
        task.name.clone(),
        exp.chain.clone(),
        exp.camera.clone(),
        exp.grasp_truth(job.grasp),
        phi,
        task.theta0.clone(),
        GoalSource::Theta(task.goal_theta.clone()),
        m.horizon,
        m.epochs,
        m.eta,
        [1.0; 3],
        exp.seed_for(&job.id(exp)),
    )
    .context(job.id(exp))?;
    Ok(s.with_max_step(Some(exp.max_step()))?)
}

/// Offsets the kinematic planner uses for `job`.
pub fn planner_phi(exp: &Experiment, job: &PlacingJob) -> CliResult<VirtualJointSet> {
    let truth = exp.grasp_truth(job.grasp);
    Ok(match exp.config.mpc.phi {
        PhiSource::GroundTruth => truth,
        PhiSource::Regressed => {
            let n = &exp.config.noise;
            exp.regress_from_observations(&truth, n.pixel_sigma, n.depth_sigma, &job.id(exp))?
                .phi
        }
    })
}

/// Plans and executes one placing job with the kinematic model.
pub fn run_kinematic(exp: &Experiment, job: &PlacingJob) -> CliResult<TaskReport> {
    let sc = scenario(exp, job, planner_phi(exp, job)?)?;
    run_task(&sc).context(job.id(exp))
}

fn push_report(table: &mut ResultsTable, exp: &Experiment, model: &str, job: &PlacingJob, r: &TaskReport) {
    let experiment = format!("placing/{model}/{}", exp.scene.tasks[job.task].name);
    let obj = exp.config.object.as_str();
    table.push(&experiment, obj, job.grasp, job.seed, "rmse_px", r.rmse_px);
    table.push(&experiment, obj, job.grasp, job.seed, "epochs_run", r.epochs_run as f64);
    table.push(
        &experiment,
        obj,
        job.grasp,
        job.seed,
        "final_cost",
        *r.cost_history.last().unwrap(),
    );
}

/// One aggregate line of the placing table.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacingSummary {
    pub model: String,
    pub task: String,
    pub runs: usize,
    pub mean_rmse_px: f64,
    pub std_rmse_px: f64,
}

/// Mean and sample std of `rmse_px` per model and task, in order of first appearance.
pub fn summarize(table: &ResultsTable) -> Vec<PlacingSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in table.rows() {
        let mut parts = r.experiment.splitn(3, '/');
        if let (Some("placing"), Some(model), Some(task)) = (parts.next(), parts.next(), parts.next()) {
            let key = (model.to_string(), task.to_string());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    keys.into_iter()
        .map(|(model, task)| {
            let experiment = format!("placing/{model}/{task}");
            let v = table.values("rmse_px", |r| r.experiment == experiment);
            let (mean, std) = mean_std(&v);
            PlacingSummary {
                model,
                task,
                runs: v.len(),
                mean_rmse_px: mean,
                std_rmse_px: std,
            }
        })
        .collect()
}

pub fn run(exp: &Experiment, with_baselines: bool, dry_run: bool) -> CliResult<Outcome> {
    let jobs = placing_jobs(exp);
    let out = exp.out_dir();
    if dry_run {
        for job in &jobs {
            scenario(exp, job, exp.grasp_truth(job.grasp))?;
        }
        if with_baselines {
            load_baselines(out)?;
        }
        return Ok(Outcome::dry_run(format!(
            "mpc: {} placing runs ({} tasks x {} grasps x {} seeds) are valid",
            jobs.len(),
            exp.scene.tasks.len(),
            exp.scene.grasps.len(),
            exp.config.seeds.len()
        )));
    }
    let meta = exp
        .metadata("mpc")
        .with("object", &exp.config.object)
        .with("phi_source", format!("{:?}", exp.config.mpc.phi));
    let mut timings = Timings::default();
    let t = Instant::now();
    let reports: Vec<TaskReport> = jobs
        .par_iter()
        .map(|job| run_kinematic(exp, job))
        .collect::<CliResult<_>>()?;
    timings.record("kinematic", t.elapsed());
    let mut table = ResultsTable::default();
    for (job, r) in jobs.iter().zip(&reports) {
        push_report(&mut table, exp, KINEMATIC_MODEL_ID, job, r);
    }

    if with_baselines {
        // Baseline plans are deterministic, so one run per task and grasp.
        let models = load_baselines(out)?;
        let base_jobs: Vec<(usize, PlacingJob)> = (0..models.len())
            .flat_map(|m| {
                jobs.iter()
                    .filter(|j| j.seed == exp.config.seeds[0])
                    .map(move |j| (m, PlacingJob { seed: 0, ..*j }))
            })
            .collect();
        let t = Instant::now();
        let reports: Vec<TaskReport> = base_jobs
            .par_iter()
            .map(|(m, job)| run_baseline(exp, job, &models[*m]))
            .collect::<CliResult<_>>()?;
        timings.record("baselines", t.elapsed());
        for ((m, job), r) in base_jobs.iter().zip(&reports) {
            push_report(&mut table, exp, &models[*m].id, job, r);
        }
    }

    let mut summary = CsvTable::new(&["model", "task", "runs", "mean_rmse_px", "std_rmse_px"]);
    let mut lines = Vec::new();
    for s in summarize(&table) {
        lines.push(format!(
            "{} {}: {:.3} ({:.3}) px over {} runs",
            s.model, s.task, s.mean_rmse_px, s.std_rmse_px, s.runs
        ));
        summary.push(vec![
            s.model,
            s.task,
            s.runs.to_string(),
            cell(s.mean_rmse_px),
            cell(s.std_rmse_px),
        ]);
    }
    let placing_path = out.join(PLACING_FILE);
    let summary_path = out.join(SUMMARY_FILE);
    table.to_table().write(&placing_path, &meta)?;
    summary.write(&summary_path, &meta)?;
    timings.write(out, "mpc", &meta)?;
    Ok(Outcome {
        files: vec![placing_path, summary_path],
        summary: lines,
    })
}

fn run_baseline(exp: &Experiment, job: &PlacingJob, model: &TrainedBaseline) -> CliResult<TaskReport> {
    let sc = scenario(exp, job, exp.grasp_truth(job.grasp))?;
    run_baseline_task(&sc, model).context(format!("{} {}", model.id, job.id(exp)))
}
