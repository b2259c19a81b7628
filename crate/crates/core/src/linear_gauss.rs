//! Linear-Gaussian reference: Kalman-Bucy mean and Riccati covariance, the exact
//! mean-field EnKBF driven by them, and the law-of-total-variance check.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::enkbf::nudge;
use crate::error::{invalid, Error, Result};
use crate::observation::{NoiseSegment, ObservationModel, ObservationPath};
use crate::signal::{symmetrize, IntegratorConfig, Stepper};
use crate::spectral::{ModelSpec, SpectralField};
use crate::table::NumericTable;

/// `du = A u dt + B dW`, `dY = H u dt + Γ dV`, `u_0 ~ N(m_0, P_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussSpec {
    drift: DMatrix<f64>,
    obs: DMatrix<f64>,
    forcing: DMatrix<f64>,
    schedule: Vec<NoiseSegment>,
    m0: DVector<f64>,
    p0: DMatrix<f64>,
}

fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return invalid(format!("{what} must be {n}×{n}, got {}×{}", m.nrows(), m.ncols()));
    }
    Ok(())
}

impl LinearGaussSpec {
    /// `forcing` is `BQBᵀ`; `gamma` is the observation noise factor with `R = ΓΓᵀ`.
    pub fn new(
        drift: DMatrix<f64>,
        obs: DMatrix<f64>,
        forcing: DMatrix<f64>,
        gamma: DMatrix<f64>,
        m0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        let segment = NoiseSegment::new(0.0, gamma)?;
        Self::with_schedule(drift, obs, forcing, vec![segment], m0, p0)
    }

    pub fn with_schedule(
        drift: DMatrix<f64>,
        obs: DMatrix<f64>,
        forcing: DMatrix<f64>,
        schedule: Vec<NoiseSegment>,
        m0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        let m = drift.nrows();
        check_square(&drift, m, "drift matrix")?;
        check_square(&forcing, m, "BQBᵀ")?;
        check_square(&p0, m, "initial covariance")?;
        if obs.ncols() != m || obs.nrows() == 0 {
            return invalid(format!("observation matrix must be d_y×{m}, got {}×{}", obs.nrows(), obs.ncols()));
        }
        if m0.len() != m {
            return invalid("initial mean does not match the state dimension");
        }
        if schedule.is_empty() || schedule.iter().any(|s| s.r.nrows() != obs.nrows()) {
            return invalid("observation noise does not match the observation dimension");
        }
        Ok(Self { drift, obs, forcing, schedule, m0, p0: symmetrize(p0) })
    }

    /// Scalar model `du = a u dt + b dW`, `dY = h u dt + γ dV`.
    pub fn scalar(a: f64, b: f64, h: f64, gamma: f64, m0: f64, p0: f64) -> Result<Self> {
        let one = |x: f64| DMatrix::from_element(1, 1, x);
        Self::new(one(a), one(h), one(b * b), one(gamma), DVector::from_element(1, m0), one(p0))
    }

    /// Linear-Gaussian view of a linear signal observed through linear functionals.
    pub fn from_models(model: &ModelSpec, obs: &ObservationModel, m0: DVector<f64>, p0: DMatrix<f64>) -> Result<Self> {
        let drift = model
            .drift
            .linear_matrix(&model.basis)
            .ok_or_else(|| Error::UnsupportedModel("Kalman-Bucy needs a linear drift".into()))?;
        if !obs.is_linear() {
            return Err(Error::UnsupportedModel("Kalman-Bucy needs a linear observation".into()));
        }
        if obs.state_dimension() != model.dimension() {
            return invalid("observation and model dimensions differ");
        }
        Self::with_schedule(drift, obs.matrix().clone(), model.diffusion.covariance_rate(), obs.schedule().to_vec(), m0, p0)
    }

    pub fn with_initial(mut self, m0: DVector<f64>, p0: DMatrix<f64>) -> Result<Self> {
        let m = self.dimension();
        if m0.len() != m {
            return invalid("initial mean does not match the state dimension");
        }
        check_square(&p0, m, "initial covariance")?;
        self.m0 = m0;
        self.p0 = symmetrize(p0);
        Ok(self)
    }

    /// The same signal with every observation functional set to zero.
    pub fn unobserved(&self) -> Self {
        Self { obs: DMatrix::zeros(self.obs.nrows(), self.obs.ncols()), ..self.clone() }
    }

    pub fn dimension(&self) -> usize {
        self.drift.nrows()
    }

    pub fn drift(&self) -> &DMatrix<f64> {
        &self.drift
    }

    pub fn obs_matrix(&self) -> &DMatrix<f64> {
        &self.obs
    }

    pub fn forcing(&self) -> &DMatrix<f64> {
        &self.forcing
    }

    /// `β = tr BQBᵀ`.
    pub fn beta(&self) -> f64 {
        self.forcing.trace()
    }

    pub fn initial(&self) -> RiccatiState {
        RiccatiState { mean: self.m0.clone(), cov: self.p0.clone() }
    }

    pub fn noise_at(&self, t: f64) -> &NoiseSegment {
        self.schedule.iter().rev().find(|s| s.start <= t).unwrap_or(&self.schedule[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl RiccatiState {
    /// Kalman gain `P Hᵀ R⁻¹`.
    pub fn gain(&self, spec: &LinearGaussSpec, t: f64) -> DMatrix<f64> {
        &self.cov * spec.obs.transpose() * &spec.noise_at(t).r_inv
    }
}

/// Project a symmetric matrix onto the PSD cone if it has left it.
fn floor_eigenvalues(p: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(p.clone());
    if eig.eigenvalues.min() >= 0.0 {
        return p;
    }
    let clipped = eig.eigenvalues.map(|x| x.max(0.0));
    symmetrize(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}

/// Kalman-Bucy integrator for a fixed step size:
/// `m⁺ = S m + P Hᵀ R⁻¹ (dY - H m dt)`, `P⁺ = S (P + dt (BQBᵀ - P Hᵀ R⁻¹ H P)) Sᵀ`,
/// `S = (I - dt A)⁻¹`, followed by symmetrisation and an eigenvalue floor at zero.
#[derive(Debug, Clone)]
pub struct KalmanBucy<'a> {
    spec: &'a LinearGaussSpec,
    dt: f64,
    resolvent: DMatrix<f64>,
    forcing_step: DMatrix<f64>,
}

impl<'a> KalmanBucy<'a> {
    pub fn new(spec: &'a LinearGaussSpec, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return invalid(format!("time step must be positive, got {dt}"));
        }
        let m = spec.dimension();
        let resolvent = (DMatrix::identity(m, m) - &spec.drift * dt)
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("I - dt A is singular".into()))?;
        Ok(Self { spec, dt, resolvent, forcing_step: &spec.forcing * dt })
    }

    pub fn covariance_step(&self, p: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let ph = p * self.spec.obs.transpose();
        let information = &ph * &self.spec.noise_at(t).r_inv * ph.transpose() * self.dt;
        let inner = p + &self.forcing_step - information;
        floor_eigenvalues(symmetrize(&self.resolvent * inner * self.resolvent.transpose()))
    }

    pub fn step(&self, state: &RiccatiState, dy: &DVector<f64>, t: f64) -> Result<RiccatiState> {
        if dy.len() != self.spec.obs.nrows() {
            return invalid(format!("observation increment has {} components, expected {}", dy.len(), self.spec.obs.nrows()));
        }
        if state.mean.len() != self.spec.dimension() {
            return invalid("state does not match the model dimension");
        }
        let innovation = dy - &self.spec.obs * &state.mean * self.dt;
        let mean = &self.resolvent * &state.mean + state.gain(self.spec, t) * innovation;
        Ok(RiccatiState { mean, cov: self.covariance_step(&state.cov, t) })
    }
}

pub fn kalman_bucy_step(state: &RiccatiState, spec: &LinearGaussSpec, dy: &DVector<f64>, t: f64, dt: f64) -> Result<RiccatiState> {
    KalmanBucy::new(spec, dt)?.step(state, dy, t)
}

/// Filter moments on the observation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanBucyPath {
    pub times: Vec<f64>,
    pub states: Vec<RiccatiState>,
}

pub fn run_kalman_bucy(spec: &LinearGaussSpec, config: &IntegratorConfig, path: &ObservationPath) -> Result<KalmanBucyPath> {
    let steps = crate::enkbf::check_path_grid(path, config)?;
    let kb = KalmanBucy::new(spec, config.dt)?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(spec.initial());
    for n in 0..steps {
        let next = kb.step(&states[n], &path.increments[n], path.times[n])?;
        states.push(next);
    }
    Ok(KalmanBucyPath { times: path.times.clone(), states })
}

/// Riccati covariances alone (they do not depend on the observations).
pub fn riccati_path(spec: &LinearGaussSpec, config: &IntegratorConfig) -> Result<Vec<DMatrix<f64>>> {
    let steps = config.steps()?;
    let kb = KalmanBucy::new(spec, config.dt)?;
    let mut covs = Vec::with_capacity(steps + 1);
    covs.push(spec.p0.clone());
    for n in 0..steps {
        let next = kb.covariance_step(&covs[n], n as f64 * config.dt);
        covs.push(next);
    }
    Ok(covs)
}

/// One step of the exact linear mean-field EnKBF: the copy is nudged with the Kalman gain
/// `P Hᵀ R⁻¹` and the filter's predicted observation `H m`.
#[allow(clippy::too_many_arguments)]
pub fn linear_meanfield_enkbf_step(
    state: &SpectralField,
    filter: &RiccatiState,
    spec: &LinearGaussSpec,
    stepper: &Stepper<'_>,
    dy: &DVector<f64>,
    dw: &SpectralField,
    t: f64,
) -> Result<SpectralField> {
    let m = spec.dimension();
    if state.dimension() != m || stepper.model().dimension() != m || filter.mean.len() != m {
        return invalid("mean-field step dimensions do not match");
    }
    if dy.len() != spec.obs.nrows() {
        return invalid("observation increment does not match the observation dimension");
    }
    let mut next = stepper.step(state, Some(dw));
    let gain = filter.gain(spec, t);
    if gain.iter().any(|g| *g != 0.0) {
        let h = &spec.obs * state.coeffs();
        let h_mean = &spec.obs * &filter.mean;
        nudge(&mut next, &gain, dy, &h, &h_mean, stepper.dt());
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalVarianceReport {
    pub times: Vec<f64>,
    pub posterior_traces: Vec<f64>,
    pub signal_traces: Vec<f64>,
    pub bounds: Vec<f64>,
    /// `max_t (tr P_t - tr Cov[u_t])⁺`.
    pub posterior_excess: f64,
    /// `max_t (tr Cov[u_t] - β e^{λt})⁺`.
    pub signal_excess: f64,
}

impl TotalVarianceReport {
    pub fn max_violation(&self) -> f64 {
        self.posterior_excess.max(self.signal_excess)
    }
}

/// Compare the posterior covariance trace with the unconditional signal covariance
/// trace and with the growth bound `β e^{λt}` on every grid point.
pub fn posterior_total_variance_check(spec: &LinearGaussSpec, config: &IntegratorConfig, lambda: f64) -> Result<TotalVarianceReport> {
    let times = config.times()?;
    let posterior = riccati_path(spec, config)?;
    let signal = riccati_path(&spec.unobserved(), config)?;
    let beta = spec.beta();
    let posterior_traces: Vec<f64> = posterior.iter().map(DMatrix::trace).collect();
    let signal_traces: Vec<f64> = signal.iter().map(DMatrix::trace).collect();
    let bounds = times
        .iter()
        .map(|t| crate::signal::signal_variance_bound(beta, lambda, *t))
        .collect::<Result<Vec<f64>>>()?;
    let excess = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max(x - y));
    Ok(TotalVarianceReport {
        posterior_excess: excess(&posterior_traces, &signal_traces),
        signal_excess: excess(&signal_traces, &bounds),
        times,
        posterior_traces,
        signal_traces,
        bounds,
    })
}

/// Number of filter-mean coefficients written to CSV.
pub const REPORTED_MODES: usize = 8;

/// CSV with columns `time, m_1.., trP, trSignalCov, bound`.
pub fn kalman_bucy_table(path: &KalmanBucyPath, report: &TotalVarianceReport) -> Result<NumericTable> {
    if path.states.len() != report.times.len() {
        return invalid("filter path and variance report have different grids");
    }
    let k = path.states.first().map_or(0, |s| s.mean.len().min(REPORTED_MODES));
    let mut header = vec!["time".to_string()];
    header.extend((1..=k).map(|i| format!("m_{i}")));
    header.extend(["trP", "trSignalCov", "bound"].iter().map(|s| s.to_string()));
    let mut table = NumericTable::new(header);
    for (n, state) in path.states.iter().enumerate() {
        let mut row = vec![path.times[n]];
        row.extend(state.mean.iter().take(k));
        row.push(state.cov.trace());
        row.push(report.signal_traces[n]);
        row.push(report.bounds[n]);
        table.push(row);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{derive_stream, QSpectrum, StreamKey, StreamRole, REFERENCE_PARTICLE};
    use crate::observation::{generate_observation_path, ObservationKind};
    use crate::signal::{evolve_signal_covariance, simulate_signal_path};
    use crate::spectral::{make_basis, DiffusionModel, DriftModel};

    fn diagonal_model(m: usize) -> ModelSpec {
        let a = DMatrix::from_fn(m, m, |i, j| if i == j { -0.5 * (i + 1) as f64 } else { 0.0 });
        let q = QSpectrum::power_law(m, 1.0, 1.0).unwrap();
        ModelSpec::new(make_basis(m).unwrap(), DriftModel::linear(a).unwrap(), DiffusionModel::identity(q)).unwrap()
    }

    fn two_functionals(m: usize) -> ObservationModel {
        ObservationModel::new(
            ObservationKind::Linear,
            vec![SpectralField::basis_vector(m, 1), SpectralField::basis_vector(m, 2)],
            0.5,
        )
        .unwrap()
    }

    fn min_eig(p: &DMatrix<f64>) -> f64 {
        SymmetricEigen::new(p.clone()).eigenvalues.min()
    }

    #[test]
    fn riccati_matches_tanh() {
        let spec = LinearGaussSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let cfg = IntegratorConfig::new(1e-4, 1.0).unwrap();
        let p = riccati_path(&spec, &cfg).unwrap();
        assert!((p.last().unwrap()[(0, 0)] - 1f64.tanh()).abs() <= 1e-4);
    }

    #[test]
    fn riccati_steady_state() {
        let spec = LinearGaussSpec::scalar(-1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let cfg = IntegratorConfig::new(1e-4, 10.0).unwrap();
        let p = riccati_path(&spec, &cfg).unwrap();
        assert!((p.last().unwrap()[(0, 0)] - (2f64.sqrt() - 1.0)).abs() <= 1e-4);
    }

    #[test]
    fn unobserved_riccati_is_signal_covariance() {
        let m = 4;
        let model = diagonal_model(m);
        let obs = ObservationModel::new(ObservationKind::Linear, vec![SpectralField::zeros(m)], 1.0).unwrap();
        let p0 = DMatrix::identity(m, m) * 0.3;
        let spec = LinearGaussSpec::from_models(&model, &obs, DVector::zeros(m), p0.clone()).unwrap();
        let cfg = IntegratorConfig::new(1e-2, 1.0).unwrap();
        let kb = riccati_path(&spec, &cfg).unwrap();
        let signal = evolve_signal_covariance(&model, &cfg, &DVector::zeros(m), &p0).unwrap();
        for (a, b) in kb.iter().zip(&signal.covariances) {
            assert!((a - b).abs().max() <= 1e-12);
        }
    }

    #[test]
    fn observations_only_reduce_covariance() {
        let m = 4;
        let model = diagonal_model(m);
        let spec = LinearGaussSpec::from_models(&model, &two_functionals(m), DVector::zeros(m), DMatrix::identity(m, m)).unwrap();
        let cfg = IntegratorConfig::new(1e-2, 2.0).unwrap();
        let observed = riccati_path(&spec, &cfg).unwrap();
        let free = riccati_path(&spec.unobserved(), &cfg).unwrap();
        for (p, f) in observed.iter().zip(&free) {
            assert!((p - p.transpose()).abs().max() <= 1e-12);
            assert!(min_eig(p) >= -1e-10);
            assert!(min_eig(&(f - p)) >= -1e-8);
        }
    }

    #[test]
    fn eigenvalue_floor_restores_psd() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        let f = floor_eigenvalues(p);
        assert!(min_eig(&f) >= 0.0);
        assert!((f[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn total_variance_checks() {
        // zero information: the traces coincide
        let m = 3;
        let model = diagonal_model(m);
        let silent = ObservationModel::new(ObservationKind::Linear, vec![SpectralField::zeros(m)], 1.0).unwrap();
        let spec = LinearGaussSpec::from_models(&model, &silent, DVector::zeros(m), DMatrix::zeros(m, m)).unwrap();
        let cfg = IntegratorConfig::new(1e-2, 1.0).unwrap();
        let report = posterior_total_variance_check(&spec, &cfg, model.lambda()).unwrap();
        assert_eq!(report.posterior_excess, 0.0);
        assert_eq!(report.posterior_traces, report.signal_traces);
        assert_eq!(report.max_violation(), 0.0);

        // scalar a = 0: tanh t ≤ t
        let spec = LinearGaussSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let report = posterior_total_variance_check(&spec, &IntegratorConfig::new(1e-3, 1.0).unwrap(), 0.0).unwrap();
        for ((t, p), s) in report.times.iter().zip(&report.posterior_traces).zip(&report.signal_traces) {
            assert!(p <= s);
            assert!((s - t).abs() < 1e-9);
            assert!((p - t.tanh()).abs() < 1e-3);
        }
        assert!(report.max_violation() <= 1e-8);
    }

    #[test]
    fn noiseless_ungained_copy_is_linear_flow() {
        let m = 3;
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, 0.0, -2.0, 0.1, 0.0, 0.0, -0.3]);
        let q = QSpectrum::power_law(m, 1.0, 1.0).unwrap();
        let model = ModelSpec::new(
            make_basis(m).unwrap(),
            DriftModel::linear(a.clone()).unwrap(),
            DiffusionModel::with_operator(DMatrix::zeros(m, m), q).unwrap(),
        )
        .unwrap();
        let spec = LinearGaussSpec::from_models(&model, &two_functionals(m), DVector::zeros(m), DMatrix::zeros(m, m)).unwrap();
        let dt = 1e-3;
        let stepper = Stepper::new(&model, dt, false).unwrap();
        let filter = RiccatiState { mean: DVector::zeros(m), cov: DMatrix::zeros(m, m) };
        let mut u = SpectralField::from_vec(vec![1.0, -1.0, 0.5]);
        let dw = SpectralField::from_vec(vec![0.3, 0.1, -0.2]);
        let dy = DVector::from_vec(vec![0.4, -0.2]);
        for _ in 0..1000 {
            u = linear_meanfield_enkbf_step(&u, &filter, &spec, &stepper, &dy, &dw, 0.0).unwrap();
        }
        let exact = (a * 1.0).exp() * DVector::from_vec(vec![1.0, -1.0, 0.5]);
        assert!((u.coeffs() - exact).abs().max() < 2e-3);
    }

    #[test]
    fn meanfield_copies_have_the_posterior_law() {
        // scalar OU observed directly
        let q = QSpectrum::power_law(1, 1.0, 1.0).unwrap();
        let model = ModelSpec::new(
            make_basis(1).unwrap(),
            DriftModel::linear(DMatrix::from_element(1, 1, -1.0)).unwrap(),
            DiffusionModel::identity(q),
        )
        .unwrap();
        let obs = ObservationModel::new(ObservationKind::Linear, vec![SpectralField::basis_vector(1, 1)], 1.0).unwrap();
        let cfg = IntegratorConfig::new(1e-3, 1.0).unwrap();
        let u0 = SpectralField::from_vec(vec![0.5]);
        let spec = LinearGaussSpec::from_models(&model, &obs, u0.coeffs().clone(), DMatrix::zeros(1, 1)).unwrap();
        let signal = simulate_signal_path(&u0, &model, &cfg, StreamKey::new(3, 0, REFERENCE_PARTICLE, StreamRole::SignalNoise)).unwrap();
        let path = generate_observation_path(&signal, &obs, StreamKey::new(3, 0, REFERENCE_PARTICLE, StreamRole::ObsNoise)).unwrap();
        let kb = run_kalman_bucy(&spec, &cfg, &path).unwrap();
        let stepper = Stepper::new(&model, cfg.dt, false).unwrap();
        let copies = 10_000;
        let streams: Vec<_> = (0..copies)
            .map(|i| derive_stream(StreamKey::new(3, 0, i as u64, StreamRole::SignalNoise)))
            .collect();
        let mut us = vec![u0.clone(); copies];
        for n in 0..path.increments.len() {
            for (u, s) in us.iter_mut().zip(&streams) {
                let dw = s.wiener_increment(n as u64, cfg.dt, model.diffusion.q());
                *u = linear_meanfield_enkbf_step(u, &kb.states[n], &spec, &stepper, &path.increments[n], &dw, path.times[n]).unwrap();
            }
        }
        let xs: Vec<f64> = us.iter().map(|u| u[0]).collect();
        let mean = xs.iter().sum::<f64>() / copies as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / copies as f64;
        let last = kb.states.last().unwrap();
        let (m, p) = (last.mean[0], last.cov[(0, 0)]);
        let se_mean = (p / copies as f64).sqrt();
        let se_var = p * (2.0 / copies as f64).sqrt();
        assert!((mean - m).abs() <= 3.0 * se_mean, "{mean} vs {m}");
        assert!((var - p).abs() <= 3.0 * se_var, "{var} vs {p}");
    }

    #[test]
    fn csv_layout() {
        let spec = LinearGaussSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let cfg = IntegratorConfig::new(0.5, 1.0).unwrap();
        let path = ObservationPath { times: cfg.times().unwrap(), increments: vec![DVector::zeros(1); 2] };
        let kb = run_kalman_bucy(&spec, &cfg, &path).unwrap();
        let report = posterior_total_variance_check(&spec, &cfg, 0.0).unwrap();
        let table = kalman_bucy_table(&kb, &report).unwrap();
        assert_eq!(table.header, vec!["time", "m_1", "trP", "trSignalCov", "bound"]);
        assert_eq!(table.rows.len(), 3);
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(LinearGaussSpec::new(DMatrix::zeros(2, 2), one.clone(), one.clone(), one.clone(), DVector::zeros(2), one.clone()).is_err());
        let spec = LinearGaussSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(kalman_bucy_step(&spec.initial(), &spec, &DVector::zeros(2), 0.0, 0.1).is_err());
        assert!(kalman_bucy_step(&spec.initial(), &spec, &DVector::zeros(1), 0.0, 0.0).is_err());
    }
}
