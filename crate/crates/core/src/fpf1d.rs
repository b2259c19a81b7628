//! Scalar feedback particle filter and a bootstrap particle filter oracle.
//!
//! In one dimension the gain equation has the explicit solution
//!
//! ```text
//! K(x) = R⁻¹ / ρ(x) · ∫_{-∞}^x (η[H] - H(y)) ρ(y) dy
//! ```
//!
//! which is evaluated with a cumulative sum over the sorted particles for the integral and a
//! binned Gaussian kernel density estimate for `ρ`.

use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linear_gauss::{run_kalman_bucy, LinearGaussSpec};
use crate::noise::{derive_stream, NoiseStream, StreamKey, StreamRole, REFERENCE_PARTICLE};
use crate::observation::ObservationPath;
use crate::signal::IntegratorConfig;
use crate::table::NumericTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarDrift {
    /// `f(x) = a x`.
    Linear(f64),
    /// `f(x) = x - x³`.
    DoubleWell,
}

impl ScalarDrift {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ScalarDrift::Linear(a) => a * x,
            ScalarDrift::DoubleWell => x - x * x * x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarObservation {
    /// `H(x) = h x`.
    Linear(f64),
    /// `H(x) = tanh x`.
    Tanh,
    /// `H(x) = c`, carrying no information.
    Constant(f64),
}

impl ScalarObservation {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ScalarObservation::Linear(h) => h * x,
            ScalarObservation::Tanh => x.tanh(),
            ScalarObservation::Constant(c) => c,
        }
    }
}

/// `dX = f(X) dt + b dW`, `dY = H(X) dt + γ dV`, `X_0 ~ N(m_0, s_0²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarModel {
    pub drift: ScalarDrift,
    pub diffusion: f64,
    pub obs: ScalarObservation,
    pub gamma: f64,
    pub init_mean: f64,
    pub init_std: f64,
}

impl ScalarModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return invalid(format!("observation noise scale must be positive, got {}", self.gamma));
        }
        if !(self.diffusion >= 0.0) || !(self.init_std >= 0.0) || !self.init_mean.is_finite() {
            return invalid("diffusion and initial spread must be non-negative and finite");
        }
        if !self.diffusion.is_finite() || !self.init_std.is_finite() {
            return invalid("diffusion and initial spread must be finite");
        }
        let coefficient = match (self.drift, self.obs) {
            (ScalarDrift::Linear(a), _) if !a.is_finite() => Some(a),
            (_, ScalarObservation::Linear(h)) if !h.is_finite() => Some(h),
            (_, ScalarObservation::Constant(c)) if !c.is_finite() => Some(c),
            _ => None,
        };
        if let Some(x) = coefficient {
            return invalid(format!("model coefficients must be finite, got {x}"));
        }
        Ok(())
    }

    pub fn r(&self) -> f64 {
        self.gamma * self.gamma
    }

    /// Kalman-Bucy view when both drift and observation are linear.
    pub fn linear_gauss(&self) -> Option<LinearGaussSpec> {
        let a = match self.drift {
            ScalarDrift::Linear(a) => a,
            ScalarDrift::DoubleWell => return None,
        };
        let h = match self.obs {
            ScalarObservation::Linear(h) => h,
            ScalarObservation::Constant(0.0) => 0.0,
            _ => return None,
        };
        LinearGaussSpec::scalar(a, self.diffusion, h, self.gamma, self.init_mean, self.init_std * self.init_std).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCloud {
    pub particles: Vec<f64>,
    /// Normalised weights; `None` means uniform.
    pub weights: Option<Vec<f64>>,
}

impl ScalarCloud {
    pub fn uniform(particles: Vec<f64>) -> Self {
        Self { particles, weights: None }
    }

    pub fn weighted(particles: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != particles.len() {
            return invalid("one weight per particle is required");
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return invalid("weights must be non-negative");
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Divergence("particle weights have no mass".into()));
        }
        Ok(Self { particles, weights: Some(weights.iter().map(|w| w / total).collect()) })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Weighted mean and (biased) variance.
    pub fn moments(&self) -> (f64, f64) {
        let p = self.particles.len() as f64;
        let weight = |i: usize| self.weights.as_ref().map_or(1.0 / p, |w| w[i]);
        let mean = self.particles.iter().enumerate().fold(0.0, |acc, (i, x)| acc + weight(i) * x);
        let var = self.particles.iter().enumerate().fold(0.0, |acc, (i, x)| acc + weight(i) * (x - mean).powi(2));
        (mean, var)
    }

    /// Effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        match &self.weights {
            None => self.particles.len() as f64,
            Some(w) => 1.0 / w.iter().map(|x| x * x).sum::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainField {
    /// `K(x_i)` in particle order.
    pub gain: Vec<f64>,
    /// Correction drift `ξ(x_i) = K R K'`.
    pub correction: Vec<f64>,
    /// Kernel density estimate at each particle.
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl GainField {
    fn zero(p: usize, bandwidth: f64, density: Vec<f64>) -> Self {
        Self { gain: vec![0.0; p], correction: vec![0.0; p], density, bandwidth }
    }
}

/// Mean of `values` shifted by the first entry, exact for constant input.
fn shifted_mean(values: &[f64]) -> f64 {
    let base = values[0];
    base + values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64
}

/// `R⁻¹ ∫_{-∞}^{x_(i)} (η̂[H] - H) dη̂` at sorted particles, with the particle's own atom
/// counted half.
pub fn cumulative_flux(sorted_obs: &[f64], r: f64) -> Vec<f64> {
    let p = sorted_obs.len() as f64;
    let mean = shifted_mean(sorted_obs);
    let mut acc = 0.0;
    sorted_obs
        .iter()
        .map(|h| {
            let own = (mean - h) / p;
            let value = (acc + 0.5 * own) / r;
            acc += own;
            value
        })
        .collect()
}

/// Silverman's rule of thumb `0.9 min(σ̂, IQR/1.34) P^{-1/5}` on sorted data.
pub fn silverman_bandwidth(sorted: &[f64]) -> Result<f64> {
    let p = sorted.len();
    if p < 2 || sorted[0] == sorted[p - 1] {
        return Err(Error::ZeroSpread);
    }
    let mean = sorted.iter().sum::<f64>() / p as f64;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (p - 1) as f64).sqrt();
    let quantile = |q: f64| {
        let pos = q * (p - 1) as f64;
        let lo = pos.floor() as usize;
        sorted[lo] + (sorted[(lo + 1).min(p - 1)] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let scale = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * scale * (p as f64).powf(-0.2))
}

const MAX_GRID: usize = 1 << 20;

/// Gaussian kernel density estimate at sorted points, computed on a linearly binned grid.
pub fn binned_kde(sorted: &[f64], bandwidth: f64) -> Vec<f64> {
    let p = sorted.len();
    let lo = sorted[0] - 4.0 * bandwidth;
    let hi = sorted[p - 1] + 4.0 * bandwidth;
    let cells = (((hi - lo) / (bandwidth / 10.0)).ceil() as usize).clamp(64, MAX_GRID);
    let delta = (hi - lo) / cells as f64;
    let mut counts = vec![0.0; cells + 1];
    for x in sorted {
        let pos = (x - lo) / delta;
        let i = (pos.floor() as usize).min(cells - 1);
        let frac = pos - i as f64;
        counts[i] += 1.0 - frac;
        counts[i + 1] += frac;
    }
    let reach = ((5.0 * bandwidth / delta).ceil() as usize).min(cells);
    let norm = 1.0 / (p as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let kernel: Vec<f64> = (0..=reach)
        .map(|k| {
            let z = k as f64 * delta / bandwidth;
            (-0.5 * z * z).exp() * norm
        })
        .collect();
    let grid: Vec<f64> = (0..=cells)
        .map(|g| {
            let from = g.saturating_sub(reach);
            let to = (g + reach).min(cells);
            (from..=to).fold(0.0, |acc, j| acc + counts[j] * kernel[g.abs_diff(j)])
        })
        .collect();
    sorted
        .iter()
        .map(|x| {
            let pos = (x - lo) / delta;
            let i = (pos.floor() as usize).min(cells - 1);
            let frac = pos - i as f64;
            grid[i] * (1.0 - frac) + grid[i + 1] * frac
        })
        .collect()
}

/// Solve the gain equation on a uniformly weighted cloud.
pub fn fpf_gain_solve(cloud: &ScalarCloud, obs: ScalarObservation, r: f64) -> Result<GainField> {
    let p = cloud.len();
    if p < 10 {
        return invalid(format!("the gain solver needs at least 10 particles, got {p}"));
    }
    if !(r > 0.0) {
        return invalid("observation noise variance must be positive");
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| cloud.particles[a].total_cmp(&cloud.particles[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| cloud.particles[i]).collect();
    let bandwidth = silverman_bandwidth(&sorted)?;
    let density_sorted = binned_kde(&sorted, bandwidth);
    let mut density = vec![0.0; p];
    for (k, &i) in order.iter().enumerate() {
        density[i] = density_sorted[k];
    }
    let h_sorted: Vec<f64> = sorted.iter().map(|x| obs.eval(*x)).collect();
    let flux = cumulative_flux(&h_sorted, r);
    if flux.iter().all(|f| *f == 0.0) {
        return Ok(GainField::zero(p, bandwidth, density));
    }
    let k_sorted: Vec<f64> = flux.iter().zip(&density_sorted).map(|(f, d)| f / d).collect();

    let w = ((p as f64).sqrt() / 2.0).round().max(1.0) as usize;
    let mut gain = vec![0.0; p];
    let mut correction = vec![0.0; p];
    for (k, &i) in order.iter().enumerate() {
        let a = k.saturating_sub(w);
        let b = (k + w).min(p - 1);
        let dx = sorted[b] - sorted[a];
        let slope = if dx > 0.0 { (k_sorted[b] - k_sorted[a]) / dx } else { 0.0 };
        gain[i] = k_sorted[k];
        correction[i] = k_sorted[k] * r * slope;
    }
    if gain.iter().chain(&correction).any(|v| !v.is_finite()) {
        return Err(Error::Divergence("gain solve produced non-finite values".into()));
    }
    Ok(GainField { gain, correction, density, bandwidth })
}

/// One FPF step; noise draw `k` of the stream at this step drives particle `k`.
#[allow(clippy::too_many_arguments)]
pub fn fpf_step(
    cloud: &ScalarCloud,
    model: &ScalarModel,
    dy: f64,
    dt: f64,
    step: u64,
    stream: &NoiseStream,
) -> Result<(ScalarCloud, GainField)> {
    let gain = fpf_gain_solve(cloud, model.obs, model.r())?;
    if dt == 0.0 {
        return Ok((cloud.clone(), gain));
    }
    let h: Vec<f64> = cloud.particles.iter().map(|x| model.obs.eval(*x)).collect();
    let h_mean = shifted_mean(&h);
    let noise = stream.normals(step, cloud.len());
    let scale = model.diffusion * dt.sqrt();
    let particles = cloud
        .particles
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let innovation = dy - 0.5 * (h[i] + h_mean) * dt;
            x + model.drift.eval(*x) * dt + scale * noise[i] + gain.gain[i] * innovation + 0.5 * gain.correction[i] * dt
        })
        .collect::<Vec<f64>>();
    if particles.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence("FPF particles left the finite range".into()));
    }
    Ok((ScalarCloud::uniform(particles), gain))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantGainCheck {
    pub mean_gain: f64,
    /// `Ĉov(x, H(x)) R⁻¹`.
    pub cov_gain: f64,
    pub discrepancy: f64,
}

fn empirical_cov(xs: &[f64], hs: &[f64]) -> f64 {
    let mx = shifted_mean(xs);
    let mh = shifted_mean(hs);
    xs.iter().zip(hs).map(|(x, h)| (x - mx) * (h - mh)).sum::<f64>() / xs.len() as f64
}

pub fn constant_gain_check(cloud: &ScalarCloud, gain: &GainField, obs: ScalarObservation, r: f64) -> ConstantGainCheck {
    let hs: Vec<f64> = cloud.particles.iter().map(|x| obs.eval(*x)).collect();
    let cov_gain = empirical_cov(&cloud.particles, &hs) / r;
    let mean_gain = gain.gain.iter().sum::<f64>() / gain.gain.len() as f64;
    ConstantGainCheck { mean_gain, cov_gain, discrepancy: (mean_gain - cov_gain).abs() }
}

/// Bootstrap standard error of `Ĉov(x, H(x)) R⁻¹` over particle resamples.
pub fn covariance_bootstrap_se(cloud: &ScalarCloud, obs: ScalarObservation, r: f64, resamples: usize, stream: &NoiseStream) -> f64 {
    let p = cloud.len();
    let hs: Vec<f64> = cloud.particles.iter().map(|x| obs.eval(*x)).collect();
    let values: Vec<f64> = (0..resamples as u64)
        .map(|b| {
            let mut rng = stream.rng_at(b);
            let idx: Vec<usize> = (0..p).map(|_| rng.gen_range(0..p)).collect();
            let xs: Vec<f64> = idx.iter().map(|&i| cloud.particles[i]).collect();
            let h: Vec<f64> = idx.iter().map(|&i| hs[i]).collect();
            empirical_cov(&xs, &h) / r
        })
        .collect();
    let mean = values.iter().sum::<f64>() / resamples as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt()
}

/// Posterior mean and variance on the grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentSeries {
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl MomentSeries {
    fn push(&mut self, t: f64, (mean, var): (f64, f64)) {
        self.times.push(t);
        self.means.push(mean);
        self.variances.push(var);
    }
}

/// Scalar truth simulated by Euler-Maruyama and its observation increments.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarTruth {
    pub states: Vec<f64>,
    pub path: ObservationPath,
}

fn scalar_key(seed: u64, replicate: u64, particle: u64, role: StreamRole) -> NoiseStream {
    derive_stream(StreamKey::new(seed, replicate, particle, role))
}

const FPF_CLOUD: u64 = 1;
const BPF_CLOUD: u64 = 2;

pub fn simulate_scalar_truth(model: &ScalarModel, config: &IntegratorConfig, seed: u64, replicate: u64) -> Result<ScalarTruth> {
    model.validate()?;
    let steps = config.steps()?;
    let dt = config.dt;
    let x0 = model.init_mean + model.init_std * scalar_key(seed, replicate, REFERENCE_PARTICLE, StreamRole::Init).normal(0);
    let signal = scalar_key(seed, replicate, REFERENCE_PARTICLE, StreamRole::SignalNoise);
    let obs_noise = scalar_key(seed, replicate, REFERENCE_PARTICLE, StreamRole::ObsNoise);
    let mut states = vec![x0];
    let mut increments = Vec::with_capacity(steps);
    for n in 0..steps {
        let x = states[n];
        let dy = model.obs.eval(x) * dt + model.gamma * dt.sqrt() * obs_noise.normal(n as u64);
        increments.push(DVector::from_element(1, dy));
        let next = x + model.drift.eval(x) * dt + model.diffusion * dt.sqrt() * signal.normal(n as u64);
        if !next.is_finite() {
            return Err(Error::Divergence("scalar signal left the finite range".into()));
        }
        states.push(next);
    }
    Ok(ScalarTruth { states, path: ObservationPath { times: config.times()?, increments } })
}

fn initial_cloud(model: &ScalarModel, p: usize, stream: &NoiseStream) -> ScalarCloud {
    ScalarCloud::uniform(stream.normals(0, p).into_iter().map(|z| model.init_mean + model.init_std * z).collect())
}

fn check_scalar_path(path: &ObservationPath, config: &IntegratorConfig) -> Result<usize> {
    if path.dy() != 1 {
        return invalid("scalar filters need a one-dimensional observation");
    }
    crate::enkbf::check_path_grid(path, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpfRun {
    pub moments: MomentSeries,
    /// Particle average of the gain at each grid time.
    pub gain_means: Vec<f64>,
    /// `Ĉov(x, H) R⁻¹` at each grid time.
    pub cov_gains: Vec<f64>,
    pub cloud: ScalarCloud,
}

pub fn run_fpf(model: &ScalarModel, config: &IntegratorConfig, path: &ObservationPath, p: usize, seed: u64, replicate: u64) -> Result<FpfRun> {
    model.validate()?;
    let steps = check_scalar_path(path, config)?;
    let mut cloud = initial_cloud(model, p, &scalar_key(seed, replicate, FPF_CLOUD, StreamRole::Init));
    let noise = scalar_key(seed, replicate, FPF_CLOUD, StreamRole::SignalNoise);
    let mut moments = MomentSeries::default();
    let mut gain_means = Vec::with_capacity(steps + 1);
    let mut cov_gains = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        moments.push(path.times[n], cloud.moments());
        let (next, gain) = if n < steps {
            fpf_step(&cloud, model, path.increments[n][0], config.dt, n as u64, &noise)?
        } else {
            (cloud.clone(), fpf_gain_solve(&cloud, model.obs, model.r())?)
        };
        let check = constant_gain_check(&cloud, &gain, model.obs, model.r());
        gain_means.push(check.mean_gain);
        cov_gains.push(check.cov_gain);
        cloud = next;
    }
    Ok(FpfRun { moments, gain_means, cov_gains, cloud })
}

/// Systematic resampling driven by one uniform `u ∈ [0, 1)`.
pub fn systematic_resample(cloud: &ScalarCloud, u: f64) -> ScalarCloud {
    let p = cloud.len();
    let Some(weights) = &cloud.weights else {
        return cloud.clone();
    };
    let mut out = Vec::with_capacity(p);
    let mut cumulative = weights[0];
    let mut j = 0;
    for k in 0..p {
        let target = (k as f64 + u) / p as f64;
        while cumulative < target && j + 1 < p {
            j += 1;
            cumulative += weights[j];
        }
        out.push(cloud.particles[j]);
    }
    ScalarCloud::uniform(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpfRun {
    pub moments: MomentSeries,
    pub ess: Vec<f64>,
    pub resample_count: usize,
}

/// Propagate, weight with `exp(H R⁻¹ dY - ½ H² R⁻¹ dt)` at the pre-step state, and
/// resample systematically once the effective sample size drops below `P/2`.
pub fn bootstrap_pf(model: &ScalarModel, config: &IntegratorConfig, path: &ObservationPath, p: usize, seed: u64, replicate: u64) -> Result<BpfRun> {
    model.validate()?;
    if p == 0 {
        return invalid("the particle filter needs at least one particle");
    }
    let steps = check_scalar_path(path, config)?;
    let dt = config.dt;
    let r_inv = 1.0 / model.r();
    let noise = scalar_key(seed, replicate, BPF_CLOUD, StreamRole::SignalNoise);
    let resampling = scalar_key(seed, replicate, BPF_CLOUD, StreamRole::Auxiliary);
    let mut cloud = initial_cloud(model, p, &scalar_key(seed, replicate, BPF_CLOUD, StreamRole::Init));
    let mut log_w = vec![0.0; p];
    let mut moments = MomentSeries::default();
    let mut ess = Vec::with_capacity(steps + 1);
    moments.push(path.times[0], cloud.moments());
    ess.push(cloud.ess());
    let mut resample_count = 0;
    let scale = model.diffusion * dt.sqrt();
    for n in 0..steps {
        let dy = path.increments[n][0];
        let draws = noise.normals(n as u64, p);
        let mut particles = Vec::with_capacity(p);
        for (i, x) in cloud.particles.iter().enumerate() {
            let h = model.obs.eval(*x);
            log_w[i] += h * r_inv * dy - 0.5 * h * h * r_inv * dt;
            particles.push(x + model.drift.eval(*x) * dt + scale * draws[i]);
        }
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() || particles.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!("bootstrap filter degenerated at t = {}", path.times[n])));
        }
        let weights: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        cloud = ScalarCloud::weighted(particles, weights)?;
        if cloud.ess() < p as f64 / 2.0 {
            let u: f64 = resampling.rng_at(n as u64).gen();
            cloud = systematic_resample(&cloud, u);
            log_w.iter_mut().for_each(|l| *l = 0.0);
            resample_count += 1;
        }
        moments.push(path.times[n + 1], cloud.moments());
        ess.push(cloud.ess());
    }
    Ok(BpfRun { moments, ess, resample_count })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KseReport {
    pub max_mean_deviation: f64,
    pub max_variance_deviation: f64,
}

/// Largest deviation of first and second posterior moments between two filters.
pub fn kse_moment_check(a: &MomentSeries, b: &MomentSeries) -> Result<KseReport> {
    if a.times.len() != b.times.len() {
        return invalid("moment series have different grids");
    }
    let max_dev = |x: &[f64], y: &[f64]| x.iter().zip(y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    Ok(KseReport {
        max_mean_deviation: max_dev(&a.means, &b.means),
        max_variance_deviation: max_dev(&a.variances, &b.variances),
    })
}

/// Combined FPF, bootstrap and (for linear models) Kalman-Bucy output.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterComparison {
    pub fpf: FpfRun,
    pub bpf: BpfRun,
    pub kalman: Option<MomentSeries>,
    pub report: KseReport,
}

pub fn compare_filters(
    model: &ScalarModel,
    config: &IntegratorConfig,
    fpf_particles: usize,
    bpf_particles: usize,
    seed: u64,
    replicate: u64,
) -> Result<FilterComparison> {
    let truth = simulate_scalar_truth(model, config, seed, replicate)?;
    let fpf = run_fpf(model, config, &truth.path, fpf_particles, seed, replicate)?;
    let bpf = bootstrap_pf(model, config, &truth.path, bpf_particles, seed, replicate)?;
    let kalman = match model.linear_gauss() {
        Some(spec) => {
            let kb = run_kalman_bucy(&spec, config, &truth.path)?;
            Some(MomentSeries {
                times: kb.times.clone(),
                means: kb.states.iter().map(|s| s.mean[0]).collect(),
                variances: kb.states.iter().map(|s| s.cov[(0, 0)]).collect(),
            })
        }
        None => None,
    };
    let report = kse_moment_check(&fpf.moments, &bpf.moments)?;
    Ok(FilterComparison { fpf, bpf, kalman, report })
}

impl FilterComparison {
    /// CSV with columns `time, fpf_mean, fpf_var, bpf_mean, bpf_var, [kb_mean, kb_var,] gain_mean, covR`.
    pub fn to_table(&self) -> NumericTable {
        let mut header: Vec<String> = ["time", "fpf_mean", "fpf_var", "bpf_mean", "bpf_var"].iter().map(|s| s.to_string()).collect();
        if self.kalman.is_some() {
            header.push("kb_mean".into());
            header.push("kb_var".into());
        }
        header.push("gain_mean".into());
        header.push("covR".into());
        let mut table = NumericTable::new(header);
        let f = &self.fpf.moments;
        let b = &self.bpf.moments;
        for n in 0..f.times.len() {
            let mut row = vec![f.times[n], f.means[n], f.variances[n], b.means[n], b.variances[n]];
            if let Some(k) = &self.kalman {
                row.push(k.means[n]);
                row.push(k.variances[n]);
            }
            row.push(self.fpf.gain_means[n]);
            row.push(self.fpf.cov_gains[n]);
            table.push(row);
        }
        table
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
        let z = (x - mu) / sd;
        (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn normal_cloud(p: usize, seed: u64) -> ScalarCloud {
        ScalarCloud::uniform(scalar_key(seed, 0, 0, StreamRole::Init).normals(0, p))
    }

    fn mixture_cloud(p: usize, seed: u64, centre: f64, sd: f64) -> ScalarCloud {
        let s = scalar_key(seed, 0, 0, StreamRole::Init);
        let z = s.normals(0, p);
        let u = s.normals(1, p);
        ScalarCloud::uniform(z.iter().zip(&u).map(|(z, u)| centre * u.signum() + sd * z).collect())
    }

    fn bimodal_cloud(p: usize, seed: u64) -> ScalarCloud {
        mixture_cloud(p, seed, 2.0, 0.5)
    }

    fn interior(cloud: &ScalarCloud) -> Vec<usize> {
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.sort_by(|&a, &b| cloud.particles[a].total_cmp(&cloud.particles[b]));
        let p = cloud.len();
        order[p / 20..p - p / 20].to_vec()
    }

    #[test]
    fn constant_observation_has_zero_gain() {
        let cloud = normal_cloud(500, 1);
        let gain = fpf_gain_solve(&cloud, ScalarObservation::Constant(0.1), 1.0).unwrap();
        assert!(gain.gain.iter().all(|k| *k == 0.0));
        assert!(gain.correction.iter().all(|k| *k == 0.0));
        let check = constant_gain_check(&cloud, &gain, ScalarObservation::Constant(0.1), 1.0);
        assert_eq!(check.mean_gain, 0.0);
        assert_eq!(check.cov_gain, 0.0);
    }

    #[test]
    fn degenerate_cloud_is_rejected() {
        let cloud = ScalarCloud::uniform(vec![0.3; 20]);
        assert!(matches!(fpf_gain_solve(&cloud, ScalarObservation::Tanh, 1.0), Err(Error::ZeroSpread)));
        assert!(fpf_gain_solve(&normal_cloud(5, 1), ScalarObservation::Tanh, 1.0).is_err());
    }

    #[test]
    fn two_point_flux() {
        // empirical measure ½(δ_a + δ_b): the integral jumps from 0 to (H_b - H_a)/4 at a and back at b
        let (ha, hb) = (0.2, 1.4);
        let r = 0.5;
        let flux = cumulative_flux(&[ha, hb], r);
        let expected = (hb - ha) / 8.0 / r;
        assert!((flux[0] - expected).abs() < 1e-15);
        assert!((flux[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn kde_integrates_to_one_and_matches_normal() {
        let cloud = normal_cloud(20_000, 3);
        let mut sorted = cloud.particles.clone();
        sorted.sort_by(f64::total_cmp);
        let h = silverman_bandwidth(&sorted).unwrap();
        let dens = binned_kde(&sorted, h);
        let smoothed_sd = (1.0 + h * h).sqrt();
        let mid = sorted.len() / 2;
        assert!((dens[mid] - normal_pdf(sorted[mid], 0.0, smoothed_sd)).abs() < 0.02);
        // trapezoid over the sorted support
        let mass: f64 = sorted.windows(2).zip(dens.windows(2)).map(|(x, d)| (x[1] - x[0]) * (d[0] + d[1]) / 2.0).sum();
        assert!((mass - 1.0).abs() < 0.01, "{mass}");
    }

    #[test]
    fn standard_normal_gain_is_one() {
        let cloud = normal_cloud(100_000, 4);
        let gain = fpf_gain_solve(&cloud, ScalarObservation::Linear(1.0), 1.0).unwrap();
        let mean_abs = gain.gain.iter().map(|k| (k - 1.0).abs()).sum::<f64>() / cloud.len() as f64;
        assert!(mean_abs <= 0.05, "{mean_abs}");
        let check = constant_gain_check(&cloud, &gain, ScalarObservation::Linear(1.0), 1.0);
        assert!((check.mean_gain - 1.0).abs() <= 0.05);
        assert!((check.cov_gain - 1.0).abs() <= 0.05);
        assert!(check.discrepancy <= 0.05);
    }

    #[test]
    fn bimodal_gain_matches_quadrature() {
        let cloud = bimodal_cloud(100_000, 5);
        let gain = fpf_gain_solve(&cloud, ScalarObservation::Linear(1.0), 1.0).unwrap();
        // dense trapezoid quadrature of the same formula for the true mixture density
        let density = |x: f64| 0.5 * normal_pdf(x, -2.0, 0.5) + 0.5 * normal_pdf(x, 2.0, 0.5);
        let (lo, step) = (-8.0, 1e-4);
        let grid: Vec<f64> = (0..=160_000).map(|i| lo + i as f64 * step).collect();
        let mut integral = vec![0.0; grid.len()];
        for i in 1..grid.len() {
            let f = |x: f64| -x * density(x);
            integral[i] = integral[i - 1] + 0.5 * step * (f(grid[i - 1]) + f(grid[i]));
        }
        let exact = |x: f64| {
            let pos = (x - lo) / step;
            let i = pos.floor() as usize;
            let v = integral[i] + (integral[i + 1] - integral[i]) * (pos - i as f64);
            v / density(x)
        };
        let idx = interior(&cloud);
        let rms = (idx
            .iter()
            .map(|&i| {
                let k = exact(cloud.particles[i]);
                ((gain.gain[i] - k) / k).powi(2)
            })
            .sum::<f64>()
            / idx.len() as f64)
            .sqrt();
        assert!(rms <= 0.1, "{rms}");
    }

    #[test]
    fn bimodal_tanh_constant_gain_identity() {
        // modes at ±1 with sd 0.7 are still bimodal and keep enough mass between them for the KDE
        let cloud = mixture_cloud(50_000, 6, 1.0, 0.7);
        let gain = fpf_gain_solve(&cloud, ScalarObservation::Tanh, 1.0).unwrap();
        let check = constant_gain_check(&cloud, &gain, ScalarObservation::Tanh, 1.0);
        let se = covariance_bootstrap_se(&cloud, ScalarObservation::Tanh, 1.0, 200, &scalar_key(6, 0, 0, StreamRole::Auxiliary));
        assert!(check.discrepancy <= 3.0 * se, "{check:?} vs {se}");
    }

    #[test]
    fn gain_is_shift_equivariant() {
        let cloud = normal_cloud(2000, 7);
        let c = 3.25;
        let shifted = ScalarCloud::uniform(cloud.particles.iter().map(|x| x + c).collect());
        let a = fpf_gain_solve(&cloud, ScalarObservation::Tanh, 1.0).unwrap();
        // H(x - c) on the shifted cloud equals tanh at the original particles
        let h_shift: Vec<f64> = cloud.particles.iter().map(|x| x.tanh()).collect();
        let mut order: Vec<usize> = (0..shifted.len()).collect();
        order.sort_by(|&i, &j| shifted.particles[i].total_cmp(&shifted.particles[j]));
        let sorted: Vec<f64> = order.iter().map(|&i| shifted.particles[i]).collect();
        let h = silverman_bandwidth(&sorted).unwrap();
        let dens = binned_kde(&sorted, h);
        let flux = cumulative_flux(&order.iter().map(|&i| h_shift[i]).collect::<Vec<_>>(), 1.0);
        for (k, &i) in order.iter().enumerate() {
            let b = flux[k] / dens[k];
            assert!((a.gain[i] - b).abs() <= 1e-6 * a.gain[i].abs().max(1.0));
        }
    }

    #[test]
    fn linear_gain_flattens_with_more_particles() {
        let spread = |p| {
            let cloud = normal_cloud(p, 8);
            let gain = fpf_gain_solve(&cloud, ScalarObservation::Linear(1.0), 1.0).unwrap();
            let idx = interior(&cloud);
            let mean = idx.iter().map(|&i| gain.gain[i]).sum::<f64>() / idx.len() as f64;
            (idx.iter().map(|&i| (gain.gain[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64).sqrt()
        };
        let (a, b, c) = (spread(1000), spread(10_000), spread(100_000));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn zero_gain_step_is_the_sde_step() {
        let model = ScalarModel {
            drift: ScalarDrift::DoubleWell,
            diffusion: 0.7,
            obs: ScalarObservation::Constant(0.0),
            gamma: 1.0,
            init_mean: 0.0,
            init_std: 1.0,
        };
        let cloud = normal_cloud(100, 9);
        let stream = scalar_key(9, 0, 1, StreamRole::SignalNoise);
        let (next, _) = fpf_step(&cloud, &model, 0.3, 0.01, 2, &stream).unwrap();
        let z = stream.normals(2, 100);
        for ((&x, &y), z) in cloud.particles.iter().zip(&next.particles).zip(&z) {
            assert_eq!(y, x + (x - x * x * x) * 0.01 + 0.7 * 0.1 * z);
        }
        let (same, _) = fpf_step(&cloud, &ScalarModel { obs: ScalarObservation::Tanh, ..model }, 0.0, 0.0, 0, &stream).unwrap();
        assert_eq!(same, cloud);
    }

    #[test]
    fn systematic_resampling_is_unbiased() {
        let cloud = normal_cloud(500, 10);
        let weights: Vec<f64> = cloud.particles.iter().map(|x| (2.0 * x).exp()).collect();
        let weighted = ScalarCloud::weighted(cloud.particles.clone(), weights).unwrap();
        let (target, _) = weighted.moments();
        let stream = scalar_key(10, 0, 0, StreamRole::Auxiliary);
        let diffs: Vec<f64> = (0..200u64)
            .map(|k| systematic_resample(&weighted, stream.rng_at(k).gen()).moments().0 - target)
            .collect();
        let mean = diffs.iter().sum::<f64>() / 200.0;
        let se = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 199.0 / 200.0).sqrt();
        assert!(mean.abs() <= 3.0 * se, "{mean} vs {se}");
        assert!(weighted.ess() >= 1.0 && weighted.ess() <= 500.0);
    }

    fn linear_model() -> ScalarModel {
        ScalarModel {
            drift: ScalarDrift::Linear(-1.0),
            diffusion: 1.0,
            obs: ScalarObservation::Linear(1.0),
            gamma: 1.0,
            init_mean: 0.5,
            init_std: 1.0,
        }
    }

    #[test]
    fn filters_track_kalman_bucy() {
        let model = linear_model();
        let cfg = IntegratorConfig::new(1e-3, 1.0).unwrap();
        let cmp = compare_filters(&model, &cfg, 10_000, 100_000, 12, 0).unwrap();
        let kb = cmp.kalman.as_ref().unwrap();
        let (m, p) = (*kb.means.last().unwrap(), *kb.variances.last().unwrap());
        let fpf_mean = *cmp.fpf.moments.means.last().unwrap();
        let fpf_var = *cmp.fpf.moments.variances.last().unwrap();
        assert!((fpf_mean - m).abs() <= 3.0 * (p / 1e4).sqrt(), "{fpf_mean} vs {m}");
        assert!((fpf_var - p).abs() <= 3.0 * p * (2.0 / 1e4f64).sqrt(), "{fpf_var} vs {p}");
        let ess = *cmp.bpf.ess.last().unwrap();
        let bpf_mean = *cmp.bpf.moments.means.last().unwrap();
        let bpf_var = *cmp.bpf.moments.variances.last().unwrap();
        assert!((bpf_mean - m).abs() <= 3.0 * (p / ess).sqrt(), "{bpf_mean} vs {m}");
        assert!((bpf_var - p).abs() <= 3.0 * p * (2.0 / ess).sqrt(), "{bpf_var} vs {p}");
        assert!(cmp.bpf.ess.iter().all(|e| *e >= 1.0 && *e <= 100_000.0 + 1e-6));
    }

    #[test]
    fn uninformative_observation_leaves_the_prior() {
        let model = ScalarModel { obs: ScalarObservation::Constant(0.0), ..linear_model() };
        let cfg = IntegratorConfig::new(1e-2, 1.0).unwrap();
        let cmp = compare_filters(&model, &cfg, 20_000, 20_000, 13, 0).unwrap();
        assert_eq!(cmp.bpf.resample_count, 0);
        assert!(cmp.bpf.ess.iter().all(|e| (*e - 20_000.0).abs() < 1e-6));
        let kb = cmp.kalman.as_ref().unwrap();
        let (m, p) = (*kb.means.last().unwrap(), *kb.variances.last().unwrap());
        for series in [&cmp.fpf.moments, &cmp.bpf.moments] {
            assert!((series.means.last().unwrap() - m).abs() <= 3.0 * (p / 2e4).sqrt());
        }
        assert!(cmp.fpf.gain_means.iter().all(|k| *k == 0.0));
    }

    #[test]
    fn double_well_fpf_agrees_with_bootstrap() {
        let model = ScalarModel {
            drift: ScalarDrift::DoubleWell,
            diffusion: 0.5,
            obs: ScalarObservation::Tanh,
            gamma: 0.5,
            init_mean: 0.0,
            init_std: 1.0,
        };
        let cfg = IntegratorConfig::new(1e-3, 1.0).unwrap();
        let cmp = compare_filters(&model, &cfg, 10_000, 100_000, 21, 0).unwrap();
        assert!(cmp.kalman.is_none());
        assert!(cmp.report.max_mean_deviation <= 0.1, "{:?}", cmp.report);
        assert!(cmp.report.max_variance_deviation <= 0.1, "{:?}", cmp.report);
    }

    #[test]
    fn comparison_csv_layout() {
        let cfg = IntegratorConfig::new(0.1, 0.2).unwrap();
        let cmp = compare_filters(&linear_model(), &cfg, 50, 50, 1, 0).unwrap();
        let table = cmp.to_table();
        assert_eq!(
            table.header,
            vec!["time", "fpf_mean", "fpf_var", "bpf_mean", "bpf_var", "kb_mean", "kb_var", "gain_mean", "covR"]
        );
        let dw = ScalarModel { drift: ScalarDrift::DoubleWell, obs: ScalarObservation::Tanh, ..linear_model() };
        let table = compare_filters(&dw, &cfg, 50, 50, 1, 0).unwrap().to_table();
        assert_eq!(table.header.len(), 7);
    }
}
