//! `train-dyn`: the four MLP dynamics baselines on sine-motion data.

use std::time::Instant;

use bodyschema::baseline::{gen_sine_data, train_dynamics, BaselineVariant, TrainOutcome};
use rayon::prelude::*;

use super::{model_path, models_dir, Outcome};
use crate::error::{CliResult, Context};
use crate::experiment::Experiment;
use crate::output::{cell, write_atomic, CsvTable, ResultsTable, Timings};

pub const CURVES_FILE: &str = "train_curves.csv";
pub const RESULTS_FILE: &str = "training.csv";

/// Generates the variant's sine data and trains it.
pub fn train_variant(exp: &Experiment, variant: BaselineVariant) -> CliResult<TrainOutcome> {
    let id = format!("train-dyn/{}", variant.id());
    let b = &exp.config.baseline;
    let mut det = variant.detector(
        exp.truth.clone(),
        b.pixel_sigma,
        0.0,
        exp.seed_for(&format!("{id}/data")),
    )?;
    let data = gen_sine_data(
        &exp.chain,
        &exp.camera,
        &mut det,
        exp.config.data.sine_samples,
        &exp.scene.sine_motion(),
    )
    .context(&id)?;
    train_dynamics(&data, variant, &b.train_config(), exp.seed_for(&format!("{id}/init"))).context(&id)
}

pub fn run(exp: &Experiment, dry_run: bool) -> CliResult<Outcome> {
    let b = &exp.config.baseline;
    if dry_run {
        b.train_config().validate()?;
        return Ok(Outcome::dry_run(format!(
            "train-dyn: {} variants, {} transitions each, up to {} epochs",
            BaselineVariant::ALL.len(),
            exp.config.data.sine_samples,
            b.epochs
        )));
    }
    let out = exp.out_dir();
    let meta = exp.metadata("train-dyn");
    let t = Instant::now();
    let outcomes: Vec<TrainOutcome> = BaselineVariant::ALL
        .par_iter()
        .map(|&v| train_variant(exp, v))
        .collect::<CliResult<_>>()?;
    let mut timings = Timings::default();
    timings.record("training", t.elapsed());

    let mut files = Vec::new();
    let mut curves = CsvTable::new(&["model_id", "epoch", "train_nmse", "test_nmse"]);
    let mut table = ResultsTable::default();
    let mut lines = Vec::new();
    std::fs::create_dir_all(models_dir(out)).context(format!("cannot create {}", models_dir(out).display()))?;
    for (&v, o) in BaselineVariant::ALL.iter().zip(&outcomes) {
        let model_meta = meta
            .clone()
            .with("seed", exp.seed_for(&format!("train-dyn/{}/init", v.id())));
        let path = model_path(out, v);
        write_atomic(
            &path,
            o.baseline.to_checkpoint_json_with(&model_meta.entries).as_bytes(),
        )?;
        files.push(path);
        for (e, (tr, te)) in o.train_nmse.iter().zip(&o.test_nmse).enumerate() {
            curves.push(vec![v.id().into(), (e + 1).to_string(), cell(*tr), cell(*te)]);
        }
        let obj = exp.config.object.as_str();
        table.push(
            &format!("train-dyn/{}", v.id()),
            obj,
            0,
            0,
            "epochs_run",
            o.epochs_run as f64,
        );
        table.push(
            &format!("train-dyn/{}", v.id()),
            obj,
            0,
            0,
            "train_nmse",
            *o.train_nmse.last().unwrap(),
        );
        table.push(
            &format!("train-dyn/{}", v.id()),
            obj,
            0,
            0,
            "test_nmse",
            o.final_test_nmse(),
        );
        lines.push(format!(
            "{}: test NMSE {:.4} after {} epochs",
            v.id(),
            o.final_test_nmse(),
            o.epochs_run
        ));
    }
    let curves_path = out.join(CURVES_FILE);
    let results_path = out.join(RESULTS_FILE);
    curves.write(&curves_path, &meta)?;
    table.to_table().write(&results_path, &meta)?;
    timings.write(out, "train-dyn", &meta)?;
    files.push(curves_path);
    files.push(results_path);
    Ok(Outcome { files, summary: lines })
}
