//! Run a configured experiment and write its artifacts plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::coupling::{build_coupled_run, convergence_sweep, exponential_moment_report, qv_cap_report, CoupledRun};
use crate::enkbf::{empirical_accuracy, run_enkbf, Ensemble};
use crate::error::{Error, Result};
use crate::fpf1d::compare_filters;
use crate::linear_gauss::{kalman_bucy_table, posterior_total_variance_check, run_kalman_bucy, LinearGaussSpec};
use crate::noise::{derive_stream, StreamKey, StreamRole, REFERENCE_PARTICLE};
use crate::observation::{generate_observation_path, ObservationPath};
use crate::signal::{simulate_signal_path, SignalPath};
use crate::spectral::SpectralField;
use crate::table::NumericTable;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    /// Decimal string so that seeds above 2^53 survive JSON readers.
    pub seed: String,
    pub version: String,
    pub artifacts: Vec<ArtifactEntry>,
    /// SHA-256 over the artifact names and digests; equal for bit-identical reruns.
    pub artifacts_hash: String,
    pub wall_time_seconds: f64,
}

/// Serialised artifacts of a run, in write order.
#[derive(Debug, Default)]
struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn table(&mut self, name: impl Into<String>, table: &NumericTable) -> Result<()> {
        self.files.push((name.into(), table.to_bytes()?));
        Ok(())
    }

    /// Pretty JSON with the config hash inserted as the first field.
    fn report<T: Serialize>(&mut self, name: &str, config_hash: &str, report: &T) -> Result<()> {
        let mut object = serde_json::Map::new();
        object.insert("config_hash".into(), Value::String(config_hash.into()));
        match serde_json::to_value(report)? {
            Value::Object(fields) => object.extend(fields),
            other => {
                object.insert("report".into(), other);
            }
        }
        let mut bytes = serde_json::to_vec_pretty(&Value::Object(object))?;
        bytes.push(b'\n');
        self.files.push((name.into(), bytes));
        Ok(())
    }
}

/// Output directory: the explicit override, else the config's `output`, else `out/<kind>`.
pub fn output_dir(config: &ExperimentConfig, overridden: Option<&Path>) -> PathBuf {
    match (overridden, &config.output) {
        (Some(dir), _) => dir.to_path_buf(),
        (None, Some(dir)) => PathBuf::from(dir),
        (None, None) => PathBuf::from("out").join(config.kind.name()),
    }
}

pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let start = Instant::now();
    let hash = config.config_hash();
    let mut artifacts = Artifacts::default();
    artifacts.files.push(("config.toml".into(), config.to_canonical_toml().into_bytes()));
    match config.kind {
        ExperimentKind::Signal => signal_artifacts(config, &mut artifacts)?,
        ExperimentKind::Enkbf => enkbf_artifacts(config, &hash, &mut artifacts)?,
        ExperimentKind::KalmanBucy => kalman_bucy_artifacts(config, &mut artifacts)?,
        ExperimentKind::Coupling => coupling_artifacts(config, &hash, &mut artifacts)?,
        ExperimentKind::Sweep => {
            let ens = config.ensemble_config()?;
            let report = convergence_sweep(&ens.sizes, ens.replicates, &config.coupling_spec()?, ens.moment_power)?;
            artifacts.report("convergence.json", &hash, &report)?;
        }
        ExperimentKind::ExpMoment => {
            let ens = config.ensemble_config()?;
            let spec = config.coupling_spec()?;
            let report = exponential_moment_report(ens.exp_order, ens.sizes[0], ens.replicates, &spec)?;
            artifacts.report("expmoment.json", &hash, &report)?;
            let qv = qv_cap_report(ens.sizes[0], ens.replicates, &spec)?;
            artifacts.report("qv_cap.json", &hash, &qv)?;
        }
        ExperimentKind::Fpf => {
            let fpf = config.fpf.as_ref().ok_or_else(|| Error::Config(vec!["missing section `[fpf]`".into()]))?;
            let cmp = compare_filters(&fpf.model, &config.integrator()?, fpf.particles, fpf.bootstrap_particles, config.seed, 0)?;
            artifacts.table("fpf.csv", &cmp.to_table())?;
            let summary = json!({
                "fpf_particles": fpf.particles,
                "bootstrap_particles": fpf.bootstrap_particles,
                "resample_count": cmp.bpf.resample_count,
                "max_mean_deviation": cmp.report.max_mean_deviation,
                "max_variance_deviation": cmp.report.max_variance_deviation,
            });
            artifacts.report("fpf.json", &hash, &summary)?;
        }
    }

    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(artifacts.files.len());
    let mut combined = Sha256::new();
    for (name, bytes) in &artifacts.files {
        fs::write(out_dir.join(name), bytes)?;
        let digest = hex::encode(Sha256::digest(bytes));
        combined.update(name.as_bytes());
        combined.update([0]);
        combined.update(digest.as_bytes());
        combined.update(b"\n");
        entries.push(ArtifactEntry { name: name.clone(), sha256: digest, bytes: bytes.len() });
    }
    let manifest = Manifest {
        kind: config.kind.name().into(),
        config_hash: hash,
        seed: config.seed.to_string(),
        version: env!("CARGO_PKG_VERSION").into(),
        artifacts: entries,
        artifacts_hash: hex::encode(combined.finalize()),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(out_dir.join(MANIFEST_NAME), bytes)?;
    Ok(manifest)
}

/// Truth signal for a replicate; a positive initial variance draws the start from the prior.
fn truth(config: &ExperimentConfig, replicate: u64) -> Result<(SignalPath, Option<ObservationPath>)> {
    let model = config.model_spec()?;
    let mut u0 = config.initial_state()?;
    if config.initial.variance > 0.0 {
        let key = StreamKey::new(config.seed, replicate, REFERENCE_PARTICLE, StreamRole::Init);
        u0 = perturbed(&u0, config.initial.variance, key);
    }
    let key = StreamKey::new(config.seed, replicate, REFERENCE_PARTICLE, StreamRole::SignalNoise);
    let signal = simulate_signal_path(&u0, &model, &config.integrator()?, key)?;
    let path = match config.observation {
        Some(_) => Some(generate_observation_path(&signal, &config.observation_model()?, key.with_role(StreamRole::ObsNoise))?),
        None => None,
    };
    Ok((signal, path))
}

fn perturbed(mean: &SpectralField, variance: f64, key: StreamKey) -> SpectralField {
    let z = derive_stream(key).normals(0, mean.dimension());
    let sd = variance.sqrt();
    SpectralField::from_vec(mean.as_slice().iter().zip(z).map(|(m, z)| m + sd * z).collect())
}

fn initial_ensemble(config: &ExperimentConfig, n: usize, replicate: u64) -> Result<Ensemble> {
    let mean = config.initial_state()?;
    if config.initial.variance == 0.0 {
        return Ensemble::deterministic(&mean, n, replicate);
    }
    let ids: Vec<u64> = (1..=n as u64).collect();
    let members = ids
        .iter()
        .map(|&id| perturbed(&mean, config.initial.variance, StreamKey::new(config.seed, replicate, id, StreamRole::Init)))
        .collect();
    Ensemble::with_ids(ids, members, replicate)
}

fn signal_artifacts(config: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<()> {
    let (signal, path) = truth(config, 0)?;
    artifacts.table("signal.csv", &signal.to_table())?;
    if let Some(path) = path {
        artifacts.table("observations.csv", &path.to_table())?;
    }
    Ok(())
}

fn enkbf_artifacts(config: &ExperimentConfig, hash: &str, artifacts: &mut Artifacts) -> Result<()> {
    let ens = config.ensemble_config()?;
    let model = config.model_spec()?;
    let obs = config.observation_model()?;
    let integrator = config.integrator()?;
    let n = ens.sizes[0];
    let runs: Vec<_> = (0..ens.replicates as u64)
        .into_par_iter()
        .map(|r| -> Result<_> {
            let (signal, path) = truth(config, r)?;
            let path = path.expect("enkbf configs carry an observation block");
            let initial = initial_ensemble(config, n, r)?;
            let run = run_enkbf(&initial, &model, &obs, &path, &integrator, ens.gain, config.seed)?;
            let accuracy = empirical_accuracy(&run.ensemble, signal.states.last().expect("non-empty path"), &obs)?;
            Ok((path, run, accuracy))
        })
        .collect::<Result<_>>()?;
    let mut summary = Vec::with_capacity(runs.len());
    for (r, (path, run, accuracy)) in runs.iter().enumerate() {
        artifacts.table(format!("observations_{r}.csv"), &path.to_table())?;
        artifacts.table(format!("enkbf_{r}.csv"), &run.series.to_table())?;
        summary.push(json!({ "replicate": r, "sup_sigma": run.series.sup_sigma(), "final_accuracy": accuracy }));
    }
    artifacts.report("enkbf.json", hash, &json!({ "N": n, "replicates": summary }))
}

fn kalman_bucy_artifacts(config: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<()> {
    let model = config.model_spec()?;
    let m = model.dimension();
    let spec = LinearGaussSpec::from_models(
        &model,
        &config.observation_model()?,
        config.initial_state()?.into_vector(),
        DMatrix::identity(m, m) * config.initial.variance,
    )?;
    let integrator = config.integrator()?;
    let (_, path) = truth(config, 0)?;
    let path = path.expect("kalman-bucy configs carry an observation block");
    let kb = run_kalman_bucy(&spec, &integrator, &path)?;
    let report = posterior_total_variance_check(&spec, &integrator, model.lambda())?;
    artifacts.table("observations.csv", &path.to_table())?;
    artifacts.table("kalman_bucy.csv", &kalman_bucy_table(&kb, &report)?)
}

fn coupling_artifacts(config: &ExperimentConfig, hash: &str, artifacts: &mut Artifacts) -> Result<()> {
    let ens = config.ensemble_config()?;
    let spec = config.coupling_spec()?;
    let n = ens.sizes[0];
    let runs: Vec<CoupledRun> =
        (0..ens.replicates as u64).into_par_iter().map(|r| build_coupled_run(n, &spec, r)).collect::<Result<_>>()?;
    let reps = runs.len() as f64;
    let times = &runs[0].times;
    let mut table = NumericTable::new(
        ["time", "coupling_error", "lln_error", "sigma_N"].iter().map(|s| s.to_string()).collect(),
    );
    let lln_paths: Vec<Vec<f64>> = runs
        .iter()
        .map(|run| {
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(run.lln_integrand.len());
            for value in &run.lln_integrand {
                out.push(acc);
                acc += value * spec.config.dt;
            }
            out
        })
        .collect();
    for (k, t) in times.iter().enumerate() {
        let mean = |f: &dyn Fn(usize) -> f64| (0..runs.len()).map(f).sum::<f64>() / reps;
        table.push(vec![
            *t,
            mean(&|r| runs[r].coupling_errors[k]),
            mean(&|r| lln_paths[r][k]),
            mean(&|r| runs[r].sigma[k]),
        ]);
    }
    artifacts.table("coupling.csv", &table)?;
    let sups: Vec<f64> = runs.iter().map(CoupledRun::sup_coupling_error).collect();
    artifacts.report(
        "coupling.json",
        hash,
        &json!({ "N": n, "replicates": runs.len(), "sup_coupling_error": sups, "model_hash": spec.model_hash() }),
    )
}
