//! `gen-data`: regression observations and sine-motion dynamics data.

use std::time::Instant;

use bodyschema::baseline::gen_sine_data;
use bodyschema::keypoint::gen_sequence_dataset;
use serde::Serialize;

use super::Outcome;
use crate::error::{CliResult, Context};
use crate::experiment::{Experiment, Protocol};
use crate::output::{sha256_hex, write_atomic, Timings};

pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const DYNAMICS_FILE: &str = "dynamics.csv";
pub const SIDECAR_FILE: &str = "gen-data.meta.toml";

#[derive(Serialize)]
struct FileEntry {
    name: String,
    /// Decimal string; derived seeds exceed the TOML integer range.
    seed: String,
    rows: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Sidecar {
    tool: String,
    master_seed: u64,
    config_hash: String,
    protocol: String,
    pixel_noise_sigma: f64,
    depth_noise_sigma: f64,
    files: Vec<FileEntry>,
}

pub fn run(exp: &Experiment, protocol: Option<Protocol>, dry_run: bool) -> CliResult<Outcome> {
    let protocol = protocol.unwrap_or(exp.config.data.protocol);
    let collection = protocol.collection();
    let noise = &exp.config.noise;
    if dry_run {
        return Ok(Outcome::dry_run(format!(
            "gen-data: {} protocol, {} frames and {} sine transitions",
            protocol.name(),
            collection.total_frames(),
            exp.config.data.sine_samples
        )));
    }
    let out = exp.out_dir();
    let meta = exp.metadata("gen-data").with("protocol", protocol.name());
    let mut timings = Timings::default();

    let t = Instant::now();
    let obs_id = "gen-data/observations";
    let mut det = exp.detector(exp.truth.clone(), noise.pixel_sigma, noise.depth_sigma, obs_id)?;
    let mut observations =
        gen_sequence_dataset(&mut det, &exp.camera, &exp.chain, &collection, &exp.sampler()?).context(obs_id)?;
    observations.metadata.chain_id = exp.config.chain.clone();
    observations.metadata.camera_id = exp.config.camera.clone();
    let obs_text = observations.to_csv(&meta.entries)?;
    timings.record("observations", t.elapsed());

    let t = Instant::now();
    let dyn_id = "gen-data/dynamics";
    let mut det = exp.detector(exp.truth.clone(), noise.pixel_sigma, noise.depth_sigma, dyn_id)?;
    let dynamics = gen_sine_data(
        &exp.chain,
        &exp.camera,
        &mut det,
        exp.config.data.sine_samples,
        &exp.scene.sine_motion(),
    )
    .context(dyn_id)?;
    let dyn_text = meta.clone().with("seed", exp.seed_for(dyn_id)).header() + &dynamics.to_csv();
    timings.record("dynamics", t.elapsed());

    let obs_path = out.join(OBSERVATIONS_FILE);
    let dyn_path = out.join(DYNAMICS_FILE);
    write_atomic(&obs_path, obs_text.as_bytes())?;
    write_atomic(&dyn_path, dyn_text.as_bytes())?;
    let sidecar = Sidecar {
        tool: crate::output::TOOL.into(),
        master_seed: exp.config.master_seed,
        config_hash: exp.config_hash.clone(),
        protocol: protocol.name().into(),
        pixel_noise_sigma: noise.pixel_sigma,
        depth_noise_sigma: noise.depth_sigma,
        files: vec![
            FileEntry {
                name: OBSERVATIONS_FILE.into(),
                seed: exp.seed_for(obs_id).to_string(),
                rows: observations.len(),
                sha256: sha256_hex(obs_text.as_bytes()),
            },
            FileEntry {
                name: DYNAMICS_FILE.into(),
                seed: exp.seed_for(dyn_id).to_string(),
                rows: dynamics.len(),
                sha256: sha256_hex(dyn_text.as_bytes()),
            },
        ],
    };
    let side_path = out.join(SIDECAR_FILE);
    let side_text = meta.header() + &toml::to_string(&sidecar).expect("sidecar serializes");
    write_atomic(&side_path, side_text.as_bytes())?;
    timings.write(out, "gen-data", &meta)?;
    Ok(Outcome {
        files: vec![obs_path, dyn_path, side_path],
        summary: vec![format!(
            "{} observations ({} protocol), {} dynamics transitions",
            observations.len(),
            protocol.name(),
            dynamics.len()
        )],
    })
}
