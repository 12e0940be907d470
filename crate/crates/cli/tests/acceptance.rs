//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false`. A FAIL is reported, not hidden; set
//! `ACCEPTANCE_STRICT=1` to also make the process exit non-zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use bodyschema::baseline::{
    compare_long_horizon, BaselineVariant, HorizonErrorRow, TrainedBaseline, KINEMATIC_MODEL_ID,
};
use bodyschema::camera::project_ee;
use bodyschema::grad::{
    finite_difference_check, flatten_points, jacobian_check, projection_jacobian_wrt_phi,
    projection_jacobian_wrt_theta, FD_STEP,
};
use bodyschema::keypoint::{
    kinematic_consistency_grad, kinematic_consistency_loss, kinematic_heatmap, KinematicLossConfig, OracleDetector,
};
use bodyschema::mpc::{cost_and_grad, ActionSequence, CostWeights, GoalSpec, KinematicPredictor};
use bodyschema::regression::{loss_trans, regrasp_adapt, regress};
use bodyschema::seed::rng;
use bodyschema::{project_chain, ImagePoint, VirtualJointSet};
use bodyschema_cli::commands::eval_horizon::{model_phi, task_sequences};
use bodyschema_cli::commands::mpc::{placing_jobs, run_kinematic};
use bodyschema_cli::commands::regress::max_joint_error;
use bodyschema_cli::commands::train_dyn::train_variant;
use bodyschema_cli::experiment::{Experiment, ExperimentConfig, PhiSource};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

// 1: gradients
const GRAD_SAMPLES: usize = 100;
const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_SECONDS: f64 = 30.0;
const COST_HORIZON: usize = 10;
/// Relative gradient corruption the check must flag.
const GRAD_PROBE_SCALE: f64 = 1.0 + 2e-5;
// 2: recovery
const RECOVERY_M2: f64 = 1e-6;
const RECOVERY_MAX_STEPS: usize = 500;
const RECOVERY_SECONDS: f64 = 60.0;
// 3: held-out poses
const HELD_OUT: usize = 10;
const HELD_OUT_PX: f64 = 0.5;
const HELD_OUT_DEPTH_M: f64 = 1e-3;
// 4: re-grasp
const REGRASP_TOL_M: f64 = 1e-3;
const WARM_WINS: usize = 4;
const SHIFT_RANGE_M: (f64, f64) = (0.01, 0.05);
// 5: placing
const PLACING_NOISY_PX: f64 = 5.0;
const PLACING_EXACT_PX: f64 = 0.1;
const PLACING_SECONDS: f64 = 300.0;
// 6: baseline gap
const NMSE_GATE: f64 = 0.1;
const GAP_FACTOR: f64 = 10.0;
const BASELINE_EPOCH_CAP: usize = 300;
// 7: unit cases
const HEATMAP_SIGMA: f64 = 5.0;

type Check = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Check);

fn experiment(configure: impl FnOnce(&mut ExperimentConfig)) -> Experiment {
    let mut cfg = ExperimentConfig::default();
    configure(&mut cfg);
    Experiment::resolve(cfg, Path::new(".")).expect("built-in experiment resolves")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn worst(acc: &mut f64, v: f64) {
    *acc = acc.max(v);
}

fn gradients() -> Check {
    let t = Instant::now();
    let exp = experiment(|_| {});
    let (cam, chain) = (&exp.camera, &exp.chain);
    let mut r = rng(exp.seed_for("acceptance/gradients"));
    let thetas = exp
        .sampler()
        .map_err(err)?
        .sample_in_view(&mut r, cam, chain, &exp.truth, 2 * GRAD_SAMPLES)
        .map_err(err)?;
    let mut max_err: BTreeMap<&str, f64> = BTreeMap::new();
    // The rounding discount must not hide a corrupted gradient.
    let mut sensitive = true;
    for i in 0..GRAD_SAMPLES {
        let theta = &thetas[2 * i];
        let phi_flat: Vec<f64> = exp
            .truth
            .to_flat()
            .iter()
            .map(|v| v + r.random_range(-0.02..0.02))
            .collect();
        let phi = VirtualJointSet::from_flat(&phi_flat).map_err(err)?;
        let project = |th: &[f64], p: &VirtualJointSet| project_chain(cam, chain, th, p).map(|z| flatten_points(&z));

        let j_phi = projection_jacobian_wrt_phi(cam, chain, theta, &phi).map_err(err)?;
        let e = jacobian_check(
            |x| project(theta, &VirtualJointSet::from_flat(x)?),
            &j_phi,
            &phi_flat,
            FD_STEP,
        )
        .map_err(err)?;
        worst(max_err.entry("projection/phi").or_default(), e);

        let j_theta = projection_jacobian_wrt_theta(cam, chain, theta, &phi).map_err(err)?;
        let e = jacobian_check(|x| project(x, &phi), &j_theta, theta, FD_STEP).map_err(err)?;
        worst(max_err.entry("projection/theta").or_default(), e);
        let probe =
            jacobian_check(|x| project(x, &phi), &(&j_theta * GRAD_PROBE_SCALE), theta, FD_STEP).map_err(err)?;
        sensitive &= probe > GRAD_REL_TOL;

        let z_obs: Vec<ImagePoint> = project_chain(cam, chain, theta, &exp.truth)
            .map_err(err)?
            .iter()
            .map(|z| {
                ImagePoint::new(
                    z.x + r.random_range(-3.0..3.0),
                    z.y + r.random_range(-3.0..3.0),
                    z.depth,
                )
            })
            .collect();
        let e = finite_difference_check(
            |x| {
                let rec = loss_trans(cam, chain, theta, &VirtualJointSet::from_flat(x)?, &z_obs)?;
                Ok((rec.value, rec.grads["phi"].as_slice().to_vec()))
            },
            &phi_flat,
            FD_STEP,
        )
        .map_err(err)?;
        worst(max_err.entry("L_trans/phi").or_default(), e);

        let kin_cfg = KinematicLossConfig::default();
        let e = finite_difference_check(
            |x| {
                let rec = kinematic_consistency_grad(cam, chain, x, &z_obs, &kin_cfg)?;
                Ok((rec.value, rec.grads["theta"].as_slice().to_vec()))
            },
            theta,
            FD_STEP,
        )
        .map_err(err)?;
        worst(max_err.entry("L_kin/theta").or_default(), e);
        let kp_flat = flatten_points(&z_obs);
        let e = finite_difference_check(
            |x| {
                let kps: Vec<ImagePoint> = x.chunks(3).map(|c| ImagePoint::new(c[0], c[1], c[2])).collect();
                let rec = kinematic_consistency_grad(cam, chain, theta, &kps, &kin_cfg)?;
                Ok((rec.value, rec.grads["keypoints"].as_slice().to_vec()))
            },
            &kp_flat,
            FD_STEP,
        )
        .map_err(err)?;
        worst(max_err.entry("L_kin/keypoints").or_default(), e);

        let goal = GoalSpec::new(project_chain(cam, chain, &thetas[2 * i + 1], &phi).map_err(err)?);
        let model = KinematicPredictor { chain, cam, phi: &phi };
        let dof = chain.dof();
        let u0: Vec<f64> = (0..COST_HORIZON * dof).map(|_| r.random_range(-0.01..0.01)).collect();
        let cost = |x: &[f64], scale: f64| {
            let u = ActionSequence(DMatrix::from_row_slice(COST_HORIZON, dof, x));
            let (c, g, _) = cost_and_grad(&model, theta, &u, &goal, &CostWeights::default())?;
            Ok((
                c,
                (0..COST_HORIZON)
                    .flat_map(|t| g.row(t).iter().map(|v| v * scale).collect::<Vec<_>>())
                    .collect(),
            ))
        };
        let e = finite_difference_check(|x| cost(x, 1.0), &u0, FD_STEP).map_err(err)?;
        worst(max_err.entry("cost/u").or_default(), e);
        let probe = finite_difference_check(|x| cost(x, GRAD_PROBE_SCALE), &u0, FD_STEP).map_err(err)?;
        sensitive &= probe > GRAD_REL_TOL;
    }
    let secs = t.elapsed().as_secs_f64();
    let overall = max_err.values().copied().fold(0.0, f64::max);
    let parts: Vec<String> = max_err.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok((
        overall < GRAD_REL_TOL && sensitive && secs < GRAD_SECONDS,
        format!(
            "{GRAD_SAMPLES} samples, max rel err {}; {:.0e} corruption flagged: {sensitive} ({secs:.1} s)",
            parts.join(", "),
            GRAD_PROBE_SCALE - 1.0
        ),
    ))
}

fn recovery() -> Check {
    let t = Instant::now();
    let exp = experiment(|_| {});
    let mut worst_steps = 0;
    let mut all_reached = true;
    let mut monotone = true;
    let mut runs = 0;
    for obj in &exp.scene.objects {
        for &s in &exp.config.seeds {
            let truth = obj.phi();
            let r = exp
                .regress_from_observations(&truth, 0.0, 0.0, &format!("regress/gt-recovery/{}/seed{s}", obj.name))
                .map_err(err)?;
            match r.squared_error_curve(&truth).iter().position(|&e| e < RECOVERY_M2) {
                Some(step) => worst_steps = worst_steps.max(step),
                None => all_reached = false,
            }
            let losses: Vec<f64> = std::iter::once(r.initial_loss)
                .chain(r.loss_history.iter().copied())
                .collect();
            monotone &= losses.windows(2).all(|w| w[1] <= w[0]);
            runs += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((
        all_reached && worst_steps <= RECOVERY_MAX_STEPS && monotone && secs < RECOVERY_SECONDS,
        format!(
            "{runs} runs, below {RECOVERY_M2:e} m^2 in all: {all_reached}, worst {worst_steps} steps, non-increasing: {monotone} ({secs:.1} s)"
        ),
    ))
}

fn held_out_poses() -> Check {
    let exp = experiment(|_| {});
    let (cam, chain) = (&exp.camera, &exp.chain);
    let (mut px, mut depth) = (0.0f64, 0.0f64);
    for obj in &exp.scene.objects {
        for &s in &exp.config.seeds {
            let truth = obj.phi();
            let r = exp
                .regress_from_observations(&truth, 0.0, 0.0, &format!("regress/gt-recovery/{}/seed{s}", obj.name))
                .map_err(err)?;
            let mut g = rng(exp.seed_for(&format!("acceptance/held-out/{}/seed{s}", obj.name)));
            let poses = exp
                .sampler()
                .map_err(err)?
                .sample_in_view(&mut g, cam, chain, &truth, HELD_OUT)
                .map_err(err)?;
            let mut oracle = OracleDetector::noiseless(truth);
            for theta in &poses {
                let z = oracle.observe(cam, chain, theta).map_err(err)?;
                let pred = project_chain(cam, chain, theta, &r.phi).map_err(err)?;
                for (p, q) in pred.iter().zip(&z) {
                    px = px.max(p.pixel_distance(q));
                    depth = depth.max((p.depth - q.depth).abs());
                }
            }
        }
    }
    Ok((
        px < HELD_OUT_PX && depth < HELD_OUT_DEPTH_M,
        format!("{HELD_OUT} poses per run, max {px:.2e} px and {depth:.2e} m"),
    ))
}

fn regrasp() -> Check {
    let exp = experiment(|_| {});
    let obj = exp.config.object.clone();
    let cfg = exp.regression_config(0.0);
    let mut pass = true;
    let mut lines = Vec::new();
    for g in 1..exp.scene.grasps.len() {
        let shift = nalgebra::Vector3::from(exp.scene.grasps[g]).norm();
        pass &= (SHIFT_RANGE_M.0..=SHIFT_RANGE_M.1).contains(&shift);
        let truth = exp.grasp_truth(g);
        let (mut wins, mut max_err) = (0, 0.0f64);
        for &s in &exp.config.seeds {
            let nominal = exp
                .regress_from_observations(&exp.truth, 0.0, 0.0, &format!("regress/regrasp/{obj}/grasp0/seed{s}"))
                .map_err(err)?;
            let data = exp
                .observe(&truth, 0.0, 0.0, &format!("regress/regrasp/{obj}/grasp{g}/seed{s}"))
                .map_err(err)?;
            let cold = regress(&data, &exp.camera, &exp.chain, &cfg).map_err(err)?;
            let warm = regrasp_adapt(&nominal, &data, &exp.camera, &exp.chain, &cfg).map_err(err)?;
            max_err = max_err
                .max(max_joint_error(&cold.phi, &truth))
                .max(max_joint_error(&warm.phi, &truth));
            wins += usize::from(warm.steps_taken < cold.steps_taken);
        }
        pass &= max_err < REGRASP_TOL_M && wins >= WARM_WINS;
        lines.push(format!(
            "grasp {g} (shift {:.0} mm): err {max_err:.1e} m, warm faster {wins}/{}",
            shift * 1e3,
            exp.config.seeds.len()
        ));
    }
    Ok((pass, lines.join("; ")))
}

fn placing() -> Check {
    let t = Instant::now();
    let noisy = experiment(|c| c.mpc.phi = PhiSource::Regressed);
    let exact = experiment(|c| c.mpc.phi = PhiSource::GroundTruth);
    let jobs = placing_jobs(&noisy);
    let noisy_rmse: Vec<f64> = jobs
        .par_iter()
        .map(|j| run_kinematic(&noisy, j).map(|r| r.rmse_px))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let exact_rmse: Vec<f64> = jobs
        .par_iter()
        .map(|j| run_kinematic(&exact, j).map(|r| r.rmse_px))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (ti, task) in noisy.scene.tasks.iter().enumerate() {
        let v: Vec<f64> = jobs
            .iter()
            .zip(&noisy_rmse)
            .filter(|(j, _)| j.task == ti)
            .map(|(_, r)| *r)
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        pass &= mean <= PLACING_NOISY_PX;
        parts.push(format!("{} {mean:.3} px", task.name));
    }
    let exact_max = exact_rmse.iter().copied().fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    pass &= exact_max < PLACING_EXACT_PX && secs < PLACING_SECONDS;
    Ok((
        pass,
        format!(
            "{} runs, noisy mean {}; exact max {exact_max:.2e} px ({secs:.1} s)",
            jobs.len(),
            parts.join(", ")
        ),
    ))
}

fn at_step<'a>(rows: &'a [HorizonErrorRow], model: &str) -> Vec<&'a HorizonErrorRow> {
    rows.iter().filter(|r| r.model_id == model).collect()
}

fn baseline_gap() -> Check {
    let exp = experiment(|c| c.baseline.epochs = c.baseline.epochs.min(BASELINE_EPOCH_CAP));
    let outcomes = BaselineVariant::ALL
        .par_iter()
        .map(|&v| train_variant(&exp, v))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let models: Vec<&TrainedBaseline> = outcomes.iter().map(|o| &o.baseline).collect();
    let phi = model_phi(&exp).map_err(err)?;
    let sequences = task_sequences(&exp, &phi).map_err(err)?;
    let rows = compare_long_horizon(&exp.chain, &exp.camera, &exp.truth, &phi, &models, &sequences).map_err(err)?;
    let exact = compare_long_horizon(&exp.chain, &exp.camera, &exp.truth, &exp.truth, &[], &sequences).map_err(err)?;
    let kin_zero = exact.iter().all(|r| r.mean_err_px == 0.0 && r.std_err_px == 0.0);
    let kin_final = at_step(&rows, KINEMATIC_MODEL_ID)
        .last()
        .map_or(f64::NAN, |r| r.mean_err_px);
    let mut pass = kin_zero;
    let mut parts = Vec::new();
    for o in &outcomes {
        let curve: Vec<f64> = at_step(&rows, &o.baseline.id).iter().map(|r| r.mean_err_px).collect();
        let nmse = o.final_test_nmse();
        let gap = curve.last().copied().unwrap_or(f64::NAN) / kin_final;
        let monotone = curve.windows(2).all(|w| w[1] >= w[0]);
        pass &= nmse < NMSE_GATE && gap >= GAP_FACTOR && monotone;
        parts.push(format!(
            "{} nmse {nmse:.3} gap {gap:.0}x monotone {monotone}",
            o.baseline.id
        ));
    }
    Ok((
        pass,
        format!(
            "{} sequences, kinematic {kin_final:.2} px at step {}, exact-offset error zero: {kin_zero}; {}",
            sequences.len(),
            exp.config.mpc.horizon,
            parts.join("; ")
        ),
    ))
}

fn unit_cases() -> Check {
    let ee = ImagePoint::new(100.0, 50.0, 1.5);
    let off = ImagePoint::new(103.0, 54.0, 1.5);
    let mut pass = kinematic_consistency_loss(&[ee, ee, ee], &ee) == 0.0
        && kinematic_consistency_loss(&[off], &ee) == 25.0
        && kinematic_consistency_loss(&[ee, off], &ee) > 0.0;
    let exp = experiment(|_| {});
    let theta = &exp.scene.tasks[0].theta0;
    let center = project_ee(&exp.camera, &exp.chain, theta).map_err(err)?;
    let pixel = ImagePoint::new(center.x.round(), center.y.round(), center.depth);
    let (w, h) = exp.camera.image_size();
    let map = kinematic_heatmap(&pixel, HEATMAP_SIGMA, (w as usize, h as usize)).map_err(err)?;
    let (u, v) = (pixel.x as usize, pixel.y as usize);
    let ring = map.grid.get(u + HEATMAP_SIGMA as usize, v);
    pass &= map.grid.get(u, v) == 1.0 && map.grid.argmax() == (u, v) && (ring - (-0.5f64).exp()).abs() < 1e-15;
    Ok((
        pass,
        format!("L_kin 0 and 25.0 cases; heatmap peak 1.0 at ({u}, {v}), {ring:.6} at radius sigma"),
    ))
}

const PIPELINE_CONFIG: &str = r#"schema_version = 1
master_seed = 11
seeds = [0, 1]

[data]
sine_samples = 300

[mpc]
epochs = 200

[baseline]
epochs = 10

[horizon]
random_sequences = 4
"#;

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let config = dir.join("experiment.toml");
    fs::write(&config, PIPELINE_CONFIG).map_err(err)?;
    let out = dir.join("results");
    let dataset = out.join("observations.csv");
    let steps: [&[&str]; 8] = [
        &["gen-data"],
        &["regress", "--dataset", dataset.to_str().unwrap()],
        &["regress", "--preset", "gt-recovery"],
        &["regress", "--preset", "regrasp"],
        &["train-dyn"],
        &["mpc", "--baselines"],
        &["eval-horizon"],
        &["report"],
    ];
    for args in steps {
        let o = Command::new(env!("CARGO_BIN_EXE_bodyschema"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(err)?;
        if !o.status.success() {
            return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    Ok(())
}

/// Every result file below `dir`, relative, except wall-clock timings.
fn result_files(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                if p.file_name().is_some_and(|n| n != "timings") {
                    stack.push(p);
                }
            } else {
                files.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (ra, rb) = (a.path().join("results"), b.path().join("results"));
    let files = result_files(&ra);
    let same_set = files == result_files(&rb);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| fs::read(ra.join(f)).ok() != fs::read(rb.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let csvs = files
        .iter()
        .filter(|f| f.extension().is_some_and(|e| e == "csv"))
        .count();
    Ok((
        same_set && differing.is_empty() && csvs > 0,
        format!(
            "{} files ({csvs} CSV) compared across two runs, differing: {differing:?}",
            files.len()
        ),
    ))
}

fn main() -> ExitCode {
    let checks: [Criterion; 8] = [
        ("gradient correctness", gradients),
        ("ground-truth offset recovery", recovery),
        ("held-out pose generalization", held_out_poses),
        ("re-grasp adaptation", regrasp),
        ("placing tasks", placing),
        ("baseline gap", baseline_gap),
        ("L_kin and heatmap units", unit_cases),
        ("pipeline determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        failures += usize::from(!pass);
        println!(
            "criterion {} {}  {name}: {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "acceptance: {} of {} criteria pass",
        checks.len() - failures,
        checks.len()
    );
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
