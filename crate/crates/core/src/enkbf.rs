//! The deterministic-transport ensemble Kalman-Bucy filter and its empirical statistics.
//!
//! Each particle follows the signal dynamics with its own Wiener path and is nudged by
//!
//! ```text
//! 𝟙̃(‖C‖²) C R⁻¹ (dY - (H(uⁱ) + E_H)/2 dt)
//! ```
//!
//! where `C` is the 1/N-normalised cross-covariance between the particles and their
//! predicted observations. All moments are taken from the pre-step ensemble, and every
//! reduction runs in ascending particle-id order so results do not depend on the
//! thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::noise::{derive_stream, NoiseStream, StreamKey, StreamRole};
use crate::observation::{ObservationModel, ObservationPath};
use crate::signal::{IntegratorConfig, Stepper};
use crate::spectral::{ModelSpec, SpectralField};
use crate::table::NumericTable;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    ids: Vec<u64>,
    members: Vec<SpectralField>,
    replicate_id: u64,
}

impl Ensemble {
    /// Members get particle ids `1..=N` in the given order.
    pub fn new(members: Vec<SpectralField>, replicate_id: u64) -> Result<Self> {
        let ids = (1..=members.len() as u64).collect();
        Self::with_ids(ids, members, replicate_id)
    }

    pub fn with_ids(ids: Vec<u64>, members: Vec<SpectralField>, replicate_id: u64) -> Result<Self> {
        if members.is_empty() {
            return invalid("an ensemble needs at least one member");
        }
        if ids.len() != members.len() {
            return invalid("one particle id per member is required");
        }
        let m = members[0].dimension();
        if members.iter().any(|u| u.dimension() != m) {
            return invalid("ensemble members have differing dimensions");
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return invalid("particle ids must be distinct");
        }
        Ok(Self { ids, members, replicate_id })
    }

    /// `n` copies of the same state (deterministic initialisation).
    pub fn deterministic(u0: &SpectralField, n: usize, replicate_id: u64) -> Result<Self> {
        Self::new(vec![u0.clone(); n], replicate_id)
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn dimension(&self) -> usize {
        self.members[0].dimension()
    }

    pub fn members(&self) -> &[SpectralField] {
        &self.members
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn replicate_id(&self) -> u64 {
        self.replicate_id
    }

    /// Reorder members (and their ids): entry `i` of the result is entry `perm[i]` of self.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            ids: perm.iter().map(|&p| self.ids[p]).collect(),
            members: perm.iter().map(|&p| self.members[p].clone()).collect(),
            replicate_id: self.replicate_id,
        }
    }

    /// Member indices in ascending particle-id order.
    fn id_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_unstable_by_key(|&i| self.ids[i]);
        order
    }

    pub(crate) fn replace_members(&self, members: Vec<SpectralField>) -> Self {
        Self { ids: self.ids.clone(), members, replicate_id: self.replicate_id }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStats {
    /// Ensemble mean `E^N`.
    pub mean: SpectralField,
    /// Mean predicted observation `E^N_H`.
    pub obs_mean: DVector<f64>,
    /// Cross-covariance `C^N_H`, M × d_y.
    pub cross_cov: DMatrix<f64>,
    /// `σ^N = (1/N) Σ ‖uⁱ - E^N‖²`.
    pub sigma: f64,
    /// `σ^{N,H} = (1/N) Σ |H(uⁱ) - E^N_H|²`.
    pub sigma_obs: f64,
    /// `H(uⁱ)` in member order.
    pub observations: Vec<DVector<f64>>,
}

/// Mean of vectors listed in `order`, shifted by the first so equal inputs give an exact result.
fn shifted_mean(values: &[&DVector<f64>], order: &[usize]) -> DVector<f64> {
    let reference = values[order[0]];
    let mut acc = DVector::zeros(reference.len());
    for &i in order {
        acc += values[i] - reference;
    }
    reference + acc / order.len() as f64
}

pub fn compute_stats(ensemble: &Ensemble, model: &ObservationModel) -> Result<EmpiricalStats> {
    if ensemble.dimension() != model.state_dimension() {
        return invalid("ensemble and observation model dimensions differ");
    }
    let observations: Vec<DVector<f64>> = ensemble.members.iter().map(|u| model.observe_unchecked(u)).collect();
    Ok(stats_from_observations(ensemble, observations))
}

pub(crate) fn stats_from_observations(ensemble: &Ensemble, observations: Vec<DVector<f64>>) -> EmpiricalStats {
    let n = ensemble.size() as f64;
    let order = ensemble.id_order();
    let states: Vec<&DVector<f64>> = ensemble.members.iter().map(SpectralField::coeffs).collect();
    let mean = shifted_mean(&states, &order);
    let obs_refs: Vec<&DVector<f64>> = observations.iter().collect();
    let obs_mean = shifted_mean(&obs_refs, &order);
    let m = ensemble.dimension();
    let dy = obs_mean.len();
    let mut cross_cov = DMatrix::zeros(m, dy);
    let mut sigma = 0.0;
    let mut sigma_obs = 0.0;
    for &i in &order {
        let du = states[i] - &mean;
        let dh = &observations[i] - &obs_mean;
        cross_cov.ger(1.0, &du, &dh, 1.0);
        sigma += du.norm_squared();
        sigma_obs += dh.norm_squared();
    }
    EmpiricalStats {
        mean: SpectralField::from_vector(mean),
        obs_mean,
        cross_cov: cross_cov / n,
        sigma: sigma / n,
        sigma_obs: sigma_obs / n,
        observations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainPolicy {
    Untamed,
    /// Smoothly switch the gain off once `‖C‖²` exceeds the threshold.
    Clipped(f64),
    /// No observation feedback at all; particles follow the signal dynamics.
    Disabled,
}

/// C¹ cubic ramp: 1 on `[0, k]`, 0 on `[k+1, ∞)`.
pub fn smoothed_indicator(k: f64, x: f64) -> f64 {
    if x <= k {
        1.0
    } else if x >= k + 1.0 {
        0.0
    } else {
        let s = x - k;
        1.0 - s * s * (3.0 - 2.0 * s)
    }
}

impl GainPolicy {
    /// Weight applied to the gain for a given squared cross-covariance norm.
    pub fn weight(&self, cov_norm_sq: f64) -> f64 {
        match *self {
            GainPolicy::Untamed => 1.0,
            GainPolicy::Clipped(k) => smoothed_indicator(k, cov_norm_sq),
            GainPolicy::Disabled => 0.0,
        }
    }
}

/// Per-particle signal-noise streams, aligned with the ensemble's member order.
#[derive(Debug, Clone)]
pub struct ParticleStreams {
    streams: Vec<NoiseStream>,
}

impl ParticleStreams {
    pub fn for_ensemble(ensemble: &Ensemble, experiment_seed: u64) -> Self {
        Self::for_ids(ensemble.ids(), experiment_seed, ensemble.replicate_id())
    }

    pub fn for_ids(ids: &[u64], experiment_seed: u64, replicate_id: u64) -> Self {
        let streams = ids
            .iter()
            .map(|&id| derive_stream(StreamKey::new(experiment_seed, replicate_id, id, StreamRole::SignalNoise)))
            .collect();
        Self { streams }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    /// Wiener increments of every particle for one step.
    pub fn increments(&self, step: u64, dt: f64, model: &ModelSpec) -> Vec<SpectralField> {
        let q = model.diffusion.q();
        self.streams.par_iter().map(|s| s.wiener_increment(step, dt, q)).collect()
    }
}

/// What one step produced besides the new ensemble.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Statistics of the pre-step ensemble.
    pub stats: EmpiricalStats,
    /// Taming weight `𝟙̃` actually applied.
    pub gain_weight: f64,
    /// Frobenius norm of the applied gain `𝟙̃ C R⁻¹`.
    pub gain_norm: f64,
    pub qv_increment: f64,
    pub qv_cap: f64,
}

/// Gain matrix `𝟙̃ C R⁻¹` and its weight, `None` when it vanishes identically.
pub(crate) fn gain_matrix(cross_cov: &DMatrix<f64>, r_inv: &DMatrix<f64>, policy: GainPolicy) -> (Option<DMatrix<f64>>, f64) {
    let weight = policy.weight(cross_cov.norm_squared());
    if weight == 0.0 || cross_cov.iter().all(|c| *c == 0.0) {
        return (None, weight);
    }
    (Some(cross_cov * r_inv * weight), weight)
}

/// Add `K (dY - (h + h̄)/2 dt)` to a freshly stepped state.
pub(crate) fn nudge(state: &mut SpectralField, gain: &DMatrix<f64>, dy: &DVector<f64>, h: &DVector<f64>, h_mean: &DVector<f64>, dt: f64) {
    let innovation = dy - (h + h_mean) * (0.5 * dt);
    state.coeffs_mut().gemv(1.0, gain, &innovation, 1.0);
}

/// Mean-field step with frozen moments: the gain and the mean predicted observation are
/// supplied from outside (exact law or an oracle ensemble) instead of the ensemble itself.
pub fn frozen_moment_step(
    state: &SpectralField,
    stepper: &Stepper<'_>,
    obs: &ObservationModel,
    gain: Option<&DMatrix<f64>>,
    obs_mean: &DVector<f64>,
    dy: &DVector<f64>,
    dw: &SpectralField,
) -> SpectralField {
    let mut next = stepper.step(state, Some(dw));
    if let Some(k) = gain {
        let h = obs.observe_unchecked(state);
        nudge(&mut next, k, dy, &h, obs_mean, stepper.dt());
    }
    next
}

/// Advance every member with the supplied Wiener increments.
#[allow(clippy::too_many_arguments)]
pub fn enkbf_step_with_noise(
    ensemble: &Ensemble,
    stepper: &Stepper<'_>,
    obs: &ObservationModel,
    dy: &DVector<f64>,
    t: f64,
    increments: &[SpectralField],
    policy: GainPolicy,
) -> Result<(Ensemble, StepRecord)> {
    let model = stepper.model();
    let dt = stepper.dt();
    if ensemble.dimension() != model.dimension() {
        return invalid("ensemble dimension does not match the model");
    }
    if increments.len() != ensemble.size() {
        return invalid("one Wiener increment per particle is required");
    }
    if dy.len() != obs.dy() {
        return invalid(format!("observation increment has {} components, expected {}", dy.len(), obs.dy()));
    }
    let stats = compute_stats(ensemble, obs)?;
    let n = ensemble.size();
    let (gain, weight) = if n < 2 { (None, 0.0) } else { gain_matrix(&stats.cross_cov, &obs.noise_at(t).r_inv, policy) };
    let gain_norm = gain.as_ref().map_or(0.0, |g| g.norm());

    let advanced: Vec<(SpectralField, f64)> = ensemble
        .members
        .par_iter()
        .zip(increments.par_iter())
        .zip(stats.observations.par_iter())
        .map(|((u, dw), h)| {
            let mut next = stepper.step(u, Some(dw));
            if let Some(k) = &gain {
                nudge(&mut next, k, dy, h, &stats.obs_mean, dt);
            }
            let centred = u.coeffs() - stats.mean.coeffs();
            let bdw = model.diffusion.apply(dw);
            (next, centred.dot(bdw.coeffs()))
        })
        .collect();

    let order = ensemble.id_order();
    let martingale = order.iter().fold(0.0, |acc, &i| acc + advanced[i].1) * 2.0 / n as f64;
    let qv_cap = 2.0 * model.beta() / n as f64 * stats.sigma * dt;
    let members: Vec<SpectralField> = advanced.into_iter().map(|(u, _)| u).collect();
    if members.iter().any(|u| !u.is_finite()) {
        return Err(Error::Divergence(format!("ensemble left the finite range at t = {t}")));
    }
    let record = StepRecord { stats, gain_weight: weight, gain_norm, qv_increment: martingale * martingale, qv_cap };
    Ok((ensemble.replace_members(members), record))
}

/// One EnKBF step drawing each particle's noise from its keyed stream.
#[allow(clippy::too_many_arguments)]
pub fn enkbf_step(
    ensemble: &Ensemble,
    model: &ModelSpec,
    obs: &ObservationModel,
    dy: &DVector<f64>,
    t: f64,
    dt: f64,
    step_index: u64,
    streams: &ParticleStreams,
    policy: GainPolicy,
) -> Result<(Ensemble, StepRecord)> {
    if streams.len() != ensemble.size() {
        return invalid("one noise stream per particle is required");
    }
    let stepper = Stepper::new(model, dt, false)?;
    let increments = if dt > 0.0 {
        streams.increments(step_index, dt, model)
    } else {
        vec![SpectralField::zeros(model.dimension()); ensemble.size()]
    };
    enkbf_step_with_noise(ensemble, &stepper, obs, dy, t, &increments, policy)
}

/// Realised quadratic-variation increment of `m^N = (2/N) Σ ⟨uⁱ - E^N, B dWⁱ⟩` together
/// with the cap `(2β/N) σ^N dt`.
pub fn martingale_qv_accumulate(
    ensemble: &Ensemble,
    increments: &[SpectralField],
    dt: f64,
    model: &ModelSpec,
) -> Result<(f64, f64)> {
    if increments.len() != ensemble.size() {
        return invalid("one Wiener increment per particle is required");
    }
    let n = ensemble.size() as f64;
    let order = ensemble.id_order();
    let states: Vec<&DVector<f64>> = ensemble.members.iter().map(SpectralField::coeffs).collect();
    let mean = shifted_mean(&states, &order);
    let mut m = 0.0;
    let mut sigma = 0.0;
    for &i in &order {
        let d = states[i] - &mean;
        m += d.dot(model.diffusion.apply(&increments[i]).coeffs());
        sigma += d.norm_squared();
    }
    let m = 2.0 * m / n;
    Ok((m * m, 2.0 * model.beta() / n * (sigma / n) * dt))
}

/// `(1/N) Σ |H(u_ref) - (H(uⁱ) + E^N_H)/2|²`.
pub fn empirical_accuracy(ensemble: &Ensemble, u_ref: &SpectralField, obs: &ObservationModel) -> Result<f64> {
    let stats = compute_stats(ensemble, obs)?;
    let target = obs.observe(u_ref)?;
    let order = ensemble.id_order();
    let total = order.iter().fold(0.0, |acc, &i| {
        let predicted = (&stats.observations[i] + &stats.obs_mean) * 0.5;
        acc + (&target - predicted).norm_squared()
    });
    Ok(total / ensemble.size() as f64)
}

/// One row per grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub time: f64,
    pub sigma: f64,
    pub sigma_obs: f64,
    pub gain_norm: f64,
    pub mean: Vec<f64>,
    /// Cumulative realised QV of the variance martingale up to this time.
    pub qv_realized: f64,
    /// Cumulative `∫ (2β/N) σ^N dt` up to this time.
    pub qv_cap: f64,
    /// `sup_{s ≤ t} σ^N_s` on the grid.
    pub sup_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticSeries {
    pub rows: Vec<DiagnosticRow>,
}

/// Number of mean coefficients written to diagnostics.
pub const DIAGNOSTIC_MODES: usize = 8;

impl DiagnosticSeries {
    pub fn sup_sigma(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.sup_sigma)
    }

    pub fn to_table(&self) -> NumericTable {
        let k = self.rows.first().map_or(0, |r| r.mean.len());
        let mut header: Vec<String> = ["time", "sigma_N", "sigma_NH", "gain_norm"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=k).map(|i| format!("mean_coeff_{i}")));
        header.push("qv_realized".into());
        header.push("qv_cap".into());
        let mut table = NumericTable::new(header);
        for r in &self.rows {
            let mut row = vec![r.time, r.sigma, r.sigma_obs, r.gain_norm];
            row.extend_from_slice(&r.mean);
            row.push(r.qv_realized);
            row.push(r.qv_cap);
            table.push(row);
        }
        table
    }
}

#[derive(Debug, Clone)]
pub struct EnkbfRun {
    pub series: DiagnosticSeries,
    pub ensemble: Ensemble,
}

pub(crate) fn check_path_grid(path: &ObservationPath, config: &IntegratorConfig) -> Result<usize> {
    let steps = config.steps()?;
    if path.increments.len() != steps || path.times.len() != steps + 1 {
        return invalid(format!(
            "observation path has {} increments, the integrator grid has {steps} steps",
            path.increments.len()
        ));
    }
    for (n, t) in path.times.iter().enumerate() {
        if (t - n as f64 * config.dt).abs() > 1e-9 * config.dt.max(1.0) {
            return invalid(format!("observation time {t} is off the integrator grid"));
        }
    }
    Ok(steps)
}

/// Run the filter over a whole observation path.
pub fn run_enkbf(
    initial: &Ensemble,
    model: &ModelSpec,
    obs: &ObservationModel,
    path: &ObservationPath,
    config: &IntegratorConfig,
    policy: GainPolicy,
    experiment_seed: u64,
) -> Result<EnkbfRun> {
    let steps = check_path_grid(path, config)?;
    let stepper = Stepper::new(model, config.dt, config.taming)?;
    let streams = ParticleStreams::for_ensemble(initial, experiment_seed);
    let mut ensemble = initial.clone();
    let mut rows = Vec::with_capacity(steps + 1);
    let (mut qv, mut cap, mut sup) = (0.0, 0.0, 0.0f64);
    let modes = model.dimension().min(DIAGNOSTIC_MODES);
    for n in 0..steps {
        let t = path.times[n];
        let increments = streams.increments(n as u64, config.dt, model);
        let (next, rec) = enkbf_step_with_noise(&ensemble, &stepper, obs, &path.increments[n], t, &increments, policy)?;
        sup = sup.max(rec.stats.sigma);
        rows.push(DiagnosticRow {
            time: t,
            sigma: rec.stats.sigma,
            sigma_obs: rec.stats.sigma_obs,
            gain_norm: rec.gain_norm,
            mean: rec.stats.mean.as_slice()[..modes].to_vec(),
            qv_realized: qv,
            qv_cap: cap,
            sup_sigma: sup,
        });
        qv += rec.qv_increment;
        cap += rec.qv_cap;
        ensemble = next;
    }
    let stats = compute_stats(&ensemble, obs)?;
    let t_end = path.times[steps];
    let (gain, _) = if ensemble.size() < 2 {
        (None, 0.0)
    } else {
        gain_matrix(&stats.cross_cov, &obs.noise_at(t_end).r_inv, policy)
    };
    sup = sup.max(stats.sigma);
    rows.push(DiagnosticRow {
        time: t_end,
        sigma: stats.sigma,
        sigma_obs: stats.sigma_obs,
        gain_norm: gain.map_or(0.0, |g| g.norm()),
        mean: stats.mean.as_slice()[..modes].to_vec(),
        qv_realized: qv,
        qv_cap: cap,
        sup_sigma: sup,
    });
    Ok(EnkbfRun { series: DiagnosticSeries { rows }, ensemble })
}
