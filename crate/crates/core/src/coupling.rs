//! Synchronous coupling of the EnKBF with its mean-field limit.
//!
//! Particle `i` and mean-field copy `i` start at the same state and consume the same
//! Wiener increments. The copies are nudged with frozen moments of the mean-field law,
//! taken either from the Kalman-Bucy filter (linear-Gaussian models) or from a large
//! oracle ensemble driven by independent noise and the same observations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::enkbf::{
    check_path_grid, compute_stats, enkbf_step_with_noise, frozen_moment_step, gain_matrix, run_enkbf, EmpiricalStats,
    Ensemble, GainPolicy, ParticleStreams,
};
use crate::error::{invalid, Error, Result};
use crate::linear_gauss::{run_kalman_bucy, LinearGaussSpec};
use crate::noise::{derive_stream, StreamKey, StreamRole, ORACLE_PARTICLE_BASE, REFERENCE_PARTICLE};
use crate::observation::{generate_observation_path, ObservationModel, ObservationPath};
use crate::signal::{simulate_signal_path, IntegratorConfig, SignalPath, Stepper};
use crate::spectral::{ModelSpec, SpectralField};

pub const DEFAULT_ORACLE_SIZE: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanFieldReference {
    /// Kalman-Bucy moments; needs a linear drift and a linear observation.
    Exact,
    /// Moments of an auxiliary ensemble of this size.
    Oracle { size: usize },
}

/// Everything a coupled experiment needs besides the ensemble size and replicate.
#[derive(Debug, Clone)]
pub struct CouplingSpec {
    pub model: ModelSpec,
    pub obs: ObservationModel,
    pub config: IntegratorConfig,
    /// Deterministic initial state shared by particles, copies and the reference signal.
    pub initial: SpectralField,
    pub policy: GainPolicy,
    pub reference: MeanFieldReference,
    pub seed: u64,
}

impl CouplingSpec {
    /// Hex SHA-256 of everything except the seed.
    pub fn model_hash(&self) -> String {
        let description = format!(
            "{:?}|{:?}|{:?}|{:?}|{:?}|{:?}",
            self.model, self.obs, self.config, self.initial, self.policy, self.reference
        );
        hex::encode(Sha256::digest(description.as_bytes()))
    }

    fn check_oracle(&self, n: usize) -> Result<()> {
        if let MeanFieldReference::Oracle { size } = self.reference {
            if size <= 4 * n {
                return invalid(format!("oracle size {size} must exceed 4N = {}", 4 * n));
            }
        }
        Ok(())
    }
}

/// Mean-field moments frozen for one grid time: `Cov[ū, H(ū)]` and `E[H(ū)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMoments {
    pub cross_cov: DMatrix<f64>,
    pub obs_mean: DVector<f64>,
}

/// Reference signal, its observations and the mean-field moments on the grid,
/// shared by every ensemble size run on the same replicate.
#[derive(Debug, Clone)]
pub struct ReplicateReference {
    pub replicate: u64,
    pub signal: SignalPath,
    pub path: ObservationPath,
    pub moments: Vec<FrozenMoments>,
}

pub fn reference_observations(spec: &CouplingSpec, replicate: u64) -> Result<(SignalPath, ObservationPath)> {
    let key = StreamKey::new(spec.seed, replicate, REFERENCE_PARTICLE, StreamRole::SignalNoise);
    let signal = simulate_signal_path(&spec.initial, &spec.model, &spec.config, key)?;
    let path = generate_observation_path(&signal, &spec.obs, key.with_role(StreamRole::ObsNoise))?;
    Ok((signal, path))
}

pub fn prepare_reference(spec: &CouplingSpec, replicate: u64) -> Result<ReplicateReference> {
    let (signal, path) = reference_observations(spec, replicate)?;
    let moments = match spec.reference {
        MeanFieldReference::Exact => exact_moments(spec, &path)?,
        MeanFieldReference::Oracle { size } => oracle_moments(spec, &path, replicate, size)?,
    };
    Ok(ReplicateReference { replicate, signal, path, moments })
}

fn exact_moments(spec: &CouplingSpec, path: &ObservationPath) -> Result<Vec<FrozenMoments>> {
    let m = spec.model.dimension();
    let lg = LinearGaussSpec::from_models(&spec.model, &spec.obs, spec.initial.coeffs().clone(), DMatrix::zeros(m, m))?;
    let kb = run_kalman_bucy(&lg, &spec.config, path)?;
    let h = lg.obs_matrix();
    Ok(kb
        .states
        .iter()
        .map(|s| FrozenMoments { cross_cov: &s.cov * h.transpose(), obs_mean: h * &s.mean })
        .collect())
}

fn oracle_moments(spec: &CouplingSpec, path: &ObservationPath, replicate: u64, size: usize) -> Result<Vec<FrozenMoments>> {
    let steps = check_path_grid(path, &spec.config)?;
    let ids = (1..=size as u64).map(|j| ORACLE_PARTICLE_BASE + j).collect();
    let mut oracle = Ensemble::with_ids(ids, vec![spec.initial.clone(); size], replicate)?;
    let streams = ParticleStreams::for_ensemble(&oracle, spec.seed);
    let stepper = Stepper::new(&spec.model, spec.config.dt, spec.config.taming)?;
    let mut moments = Vec::with_capacity(steps + 1);
    for n in 0..steps {
        let increments = streams.increments(n as u64, spec.config.dt, &spec.model);
        let (next, rec) = enkbf_step_with_noise(&oracle, &stepper, &spec.obs, &path.increments[n], path.times[n], &increments, spec.policy)?;
        moments.push(FrozenMoments { cross_cov: rec.stats.cross_cov, obs_mean: rec.stats.obs_mean });
        oracle = next;
    }
    let last = compute_stats(&oracle, &spec.obs)?;
    moments.push(FrozenMoments { cross_cov: last.cross_cov, obs_mean: last.obs_mean });
    Ok(moments)
}

/// `‖C^N_H - Cov[ū, H(ū)]‖² + |E^N_H - E[H(ū)]|²`.
pub fn lln_integrand(stats: &EmpiricalStats, reference: &FrozenMoments) -> f64 {
    (&stats.cross_cov - &reference.cross_cov).norm_squared() + (&stats.obs_mean - &reference.obs_mean).norm_squared()
}

/// `(1/N) Σ ‖aⁱ - bⁱ‖²`, pairing members by position and summing in id order of `a`.
pub fn ensemble_distance(a: &Ensemble, b: &Ensemble) -> Result<f64> {
    if a.size() != b.size() || a.dimension() != b.dimension() {
        return invalid("ensembles differ in size or dimension");
    }
    let mut order: Vec<usize> = (0..a.size()).collect();
    order.sort_unstable_by_key(|&i| a.ids()[i]);
    let total = order.iter().fold(0.0, |acc, &i| {
        acc + (a.members()[i].coeffs() - b.members()[i].coeffs()).norm_squared()
    });
    Ok(total / a.size() as f64)
}

#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub replicate: u64,
    pub times: Vec<f64>,
    pub particles: Ensemble,
    pub copies: Ensemble,
    /// `(1/N) Σ ‖uⁱ - ūⁱ‖²` on the grid.
    pub coupling_errors: Vec<f64>,
    /// LLN integrand of the copies on the grid.
    pub lln_integrand: Vec<f64>,
    /// `σ^N` of the particles on the grid.
    pub sigma: Vec<f64>,
    dt: f64,
}

impl CoupledRun {
    fn grid_index(&self, t: f64) -> Result<usize> {
        let n = (t / self.dt).round();
        if n < 0.0 || n as usize >= self.times.len() || (n * self.dt - t).abs() > 1e-9 * self.dt.max(1.0) {
            return invalid(format!("time {t} is not on the grid"));
        }
        Ok(n as usize)
    }

    pub fn coupling_error(&self, t: f64) -> Result<f64> {
        Ok(self.coupling_errors[self.grid_index(t)?])
    }

    /// Left Riemann sum of the LLN integrand up to `t`.
    pub fn lln_error(&self, t: f64) -> Result<f64> {
        let n = self.grid_index(t)?;
        Ok(self.lln_integrand[..n].iter().sum::<f64>() * self.dt)
    }

    /// Grid supremum of the coupling error.
    pub fn sup_coupling_error(&self) -> f64 {
        self.coupling_errors.iter().fold(0.0, |a, &b| a.max(b))
    }
}

pub fn build_coupled_run(n: usize, spec: &CouplingSpec, replicate: u64) -> Result<CoupledRun> {
    spec.check_oracle(n)?;
    let reference = prepare_reference(spec, replicate)?;
    run_coupled(n, spec, &reference)
}

/// Couple `n` particles with `n` copies on a prepared replicate.
pub fn run_coupled(n: usize, spec: &CouplingSpec, reference: &ReplicateReference) -> Result<CoupledRun> {
    if n == 0 {
        return invalid("an ensemble needs at least one member");
    }
    let steps = check_path_grid(&reference.path, &spec.config)?;
    if reference.moments.len() != steps + 1 {
        return invalid("reference moments do not cover the grid");
    }
    let dt = spec.config.dt;
    let stepper = Stepper::new(&spec.model, dt, spec.config.taming)?;
    let mut particles = Ensemble::deterministic(&spec.initial, n, reference.replicate)?;
    let mut copies = particles.clone();
    let streams = ParticleStreams::for_ensemble(&particles, spec.seed);
    let mut coupling_errors = Vec::with_capacity(steps + 1);
    let mut lln = Vec::with_capacity(steps + 1);
    let mut sigma = Vec::with_capacity(steps + 1);
    let mut record = |particles: &Ensemble, copies: &Ensemble, moments: &FrozenMoments| -> Result<()> {
        coupling_errors.push(ensemble_distance(particles, copies)?);
        lln.push(lln_integrand(&compute_stats(copies, &spec.obs)?, moments));
        Ok(())
    };
    for k in 0..steps {
        let t = reference.path.times[k];
        let dy = &reference.path.increments[k];
        let moments = &reference.moments[k];
        record(&particles, &copies, moments)?;
        let increments = streams.increments(k as u64, dt, &spec.model);
        let (next, rec) = enkbf_step_with_noise(&particles, &stepper, &spec.obs, dy, t, &increments, spec.policy)?;
        sigma.push(rec.stats.sigma);
        let (gain, _) = gain_matrix(&moments.cross_cov, &spec.obs.noise_at(t).r_inv, spec.policy);
        let moved: Vec<SpectralField> = copies
            .members()
            .par_iter()
            .zip(increments.par_iter())
            .map(|(u, dw)| frozen_moment_step(u, &stepper, &spec.obs, gain.as_ref(), &moments.obs_mean, dy, dw))
            .collect();
        if moved.iter().any(|u| !u.is_finite()) {
            return Err(Error::Divergence(format!("mean-field copies left the finite range at t = {t}")));
        }
        copies = copies.replace_members(moved);
        particles = next;
    }
    record(&particles, &copies, &reference.moments[steps])?;
    sigma.push(compute_stats(&particles, &spec.obs)?.sigma);
    Ok(CoupledRun {
        replicate: reference.replicate,
        times: reference.path.times.clone(),
        particles,
        copies,
        coupling_errors,
        lln_integrand: lln,
        sigma,
        dt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerFit {
    pub p: f64,
    /// `E[(sup error)^p]` per ensemble size.
    pub means: Vec<f64>,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    #[serde(rename = "N")]
    pub n_values: Vec<usize>,
    pub replicates: usize,
    pub p: f64,
    /// Replicate values of the grid supremum of the coupling error, one list per N.
    pub errors: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub slope: f64,
    pub slope_ci: [f64; 2],
    pub dt: f64,
    pub model_hash: String,
    /// Set when some mean error is exactly zero and no slope can be fitted.
    pub degenerate: bool,
    pub lower_powers: Vec<PowerFit>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 200;
const LOWER_POWERS: [f64; 2] = [0.25, 0.5];

/// Ordinary least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn moment_means(errors: &[Vec<f64>], rows: &[usize], p: f64) -> Vec<f64> {
    errors
        .iter()
        .map(|e| rows.iter().map(|&r| e[r].powf(p)).sum::<f64>() / rows.len() as f64)
        .collect()
}

fn log_slope(n_values: &[usize], means: &[f64]) -> Option<f64> {
    if means.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
        return None;
    }
    let x: Vec<f64> = n_values.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    Some(ols_slope(&x, &y))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Sweep ensemble sizes, fit the log-log slope of `E[(sup error)^p]` against N and
/// bootstrap a 95% interval over replicates.
pub fn convergence_sweep(n_values: &[usize], replicates: usize, spec: &CouplingSpec, p: f64) -> Result<ConvergenceReport> {
    let mut distinct = n_values.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InsufficientDesign(format!("a slope fit needs at least 3 distinct ensemble sizes, got {}", distinct.len())));
    }
    if replicates < 2 {
        return Err(Error::InsufficientDesign("a sweep needs at least 2 replicates".into()));
    }
    if distinct[0] == 0 {
        return invalid("ensemble sizes must be positive");
    }
    if !(p > 0.0) || !p.is_finite() {
        return invalid(format!("moment power must be positive, got {p}"));
    }
    spec.check_oracle(*distinct.last().unwrap())?;

    let by_replicate: Vec<Vec<f64>> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let reference = prepare_reference(spec, r)?;
            n_values
                .iter()
                .map(|&n| run_coupled(n, spec, &reference).map(|run| run.sup_coupling_error()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<Vec<f64>> = (0..n_values.len()).map(|j| by_replicate.iter().map(|row| row[j]).collect()).collect();

    let all: Vec<usize> = (0..replicates).collect();
    let means = moment_means(&errors, &all, p);
    let fitted = log_slope(n_values, &means);
    let degenerate = fitted.is_none();

    let stream = derive_stream(StreamKey::new(spec.seed, 0, 0, StreamRole::Auxiliary));
    let mut boot: Vec<f64> = (0..BOOTSTRAP_RESAMPLES as u64)
        .filter_map(|b| {
            let mut rng = stream.rng_at(b);
            let rows: Vec<usize> = (0..replicates).map(|_| rng.gen_range(0..replicates)).collect();
            log_slope(n_values, &moment_means(&errors, &rows, p))
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let slope = fitted.unwrap_or(0.0);
    let slope_ci = if boot.is_empty() { [slope, slope] } else { [percentile(&boot, 0.025), percentile(&boot, 0.975)] };

    let lower_powers = LOWER_POWERS
        .iter()
        .filter(|&&q| q < p)
        .map(|&q| {
            let means = moment_means(&errors, &all, q);
            PowerFit { p: q, slope: log_slope(n_values, &means).unwrap_or(0.0), means }
        })
        .collect();

    Ok(ConvergenceReport {
        n_values: n_values.to_vec(),
        replicates,
        p,
        errors,
        means,
        slope,
        slope_ci,
        dt: spec.config.dt,
        model_hash: spec.model_hash(),
        degenerate,
        lower_powers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpMomentReport {
    pub q: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub replicates: usize,
    /// Monte Carlo estimate of `E[sup_t exp(q σ^N_t)]`.
    pub estimate: f64,
    pub std_error: f64,
    pub bound: f64,
    /// Ensemble sizes above this admit the bound.
    pub threshold: f64,
    pub admissible: bool,
    pub model_hash: String,
}

/// `(π+1) exp(q (e^{(2λ+1)T} - 1) / (2(2λ+1)))`, valid for deterministic initial ensembles.
pub fn exponential_moment_bound(q: f64, lambda: f64, horizon: f64) -> f64 {
    let rate = 2.0 * lambda + 1.0;
    (std::f64::consts::PI + 1.0) * (q * ((rate * horizon).exp() - 1.0) / (2.0 * rate)).exp()
}

/// Smallest admissible ensemble size is anything above `2 β q e^{(2λ+1)T}`.
pub fn exponential_moment_threshold(q: f64, beta: f64, lambda: f64, horizon: f64) -> f64 {
    2.0 * beta * q * ((2.0 * lambda + 1.0) * horizon).exp()
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Plain EnKBF runs over independent replicates, one per reference path.
fn replicate_runs<T: Send>(
    n: usize,
    replicates: usize,
    spec: &CouplingSpec,
    summarise: impl Fn(&crate::enkbf::EnkbfRun) -> T + Sync,
) -> Result<Vec<T>> {
    if n == 0 || replicates == 0 {
        return invalid("ensemble size and replicate count must be positive");
    }
    (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let (_, path) = reference_observations(spec, r)?;
            let init = Ensemble::deterministic(&spec.initial, n, r)?;
            let run = run_enkbf(&init, &spec.model, &spec.obs, &path, &spec.config, spec.policy, spec.seed)?;
            Ok(summarise(&run))
        })
        .collect()
}

pub fn exponential_moment_report(q: f64, n: usize, replicates: usize, spec: &CouplingSpec) -> Result<ExpMomentReport> {
    if !(q >= 0.0) || !q.is_finite() {
        return invalid(format!("exponential moment order must be non-negative, got {q}"));
    }
    let values = replicate_runs(n, replicates, spec, |run| (q * run.series.sup_sigma()).exp())?;
    let (estimate, std_error) = mean_and_se(&values);
    let lambda = spec.model.lambda();
    let horizon = spec.config.horizon;
    let threshold = exponential_moment_threshold(q, spec.model.beta(), lambda, horizon);
    Ok(ExpMomentReport {
        q,
        n,
        replicates,
        estimate,
        std_error,
        bound: exponential_moment_bound(q, lambda, horizon),
        threshold,
        admissible: n as f64 > threshold,
        model_hash: spec.model_hash(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QvCapReport {
    #[serde(rename = "N")]
    pub n: usize,
    /// Time-integrated realised quadratic variation per replicate.
    pub realized: Vec<f64>,
    /// Time-integrated cap `(2β/N) ∫ σ^N dt` per replicate.
    pub caps: Vec<f64>,
    /// Monte Carlo standard error of `realized - cap`.
    pub std_error: f64,
    /// Share of replicates with `realized ≤ cap + 3 SE`.
    pub fraction_within: f64,
    pub mean_ratio: f64,
}

pub fn qv_cap_report(n: usize, replicates: usize, spec: &CouplingSpec) -> Result<QvCapReport> {
    let pairs = replicate_runs(n, replicates, spec, |run| {
        let last = run.series.rows.last().expect("a run has at least one row");
        (last.qv_realized, last.qv_cap)
    })?;
    let (realized, caps): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let diffs: Vec<f64> = realized.iter().zip(&caps).map(|(r, c)| r - c).collect();
    let (_, std_error) = mean_and_se(&diffs);
    let within = diffs.iter().filter(|d| **d <= 3.0 * std_error).count();
    let cap_total: f64 = caps.iter().sum();
    Ok(QvCapReport {
        n,
        mean_ratio: if cap_total > 0.0 { realized.iter().sum::<f64>() / cap_total } else { 0.0 },
        fraction_within: within as f64 / replicates as f64,
        realized,
        caps,
        std_error,
    })
}
