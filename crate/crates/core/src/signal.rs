//! Semi-implicit Euler-Maruyama integration of the Galerkin signal and of the
//! moment equations of linear signals.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::noise::{derive_stream, StreamKey};
use crate::spectral::{DriftFamily, ModelSpec, SpectralField};
use crate::table::NumericTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Replace the explicit drift `F` by `F / (1 + dt ‖F‖)`.
    pub taming: bool,
}

impl IntegratorConfig {
    pub fn new(dt: f64, horizon: f64) -> Result<Self> {
        let cfg = Self { dt, horizon, taming: false };
        cfg.steps()?;
        Ok(cfg)
    }

    pub fn with_taming(mut self, taming: bool) -> Self {
        self.taming = taming;
        self
    }

    /// Number of steps; `dt` must divide the horizon.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return invalid(format!("time step must be positive, got {}", self.dt));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return invalid(format!("horizon must be non-negative, got {}", self.horizon));
        }
        let n = (self.horizon / self.dt).round();
        if (n * self.dt - self.horizon).abs() > 1e-12 * self.horizon.max(f64::MIN_POSITIVE) && self.horizon > 0.0 {
            return invalid(format!("time step {} does not divide horizon {}", self.dt, self.horizon));
        }
        Ok(n as usize)
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        Ok((0..=self.steps()?).map(|n| n as f64 * self.dt).collect())
    }
}

#[derive(Debug, Clone)]
enum ImplicitSolve {
    /// Multipliers `1 / (1 + dt μ_k)`.
    Diagonal(Vec<f64>),
    /// `(I - dt A)^{-1}`.
    Dense(DMatrix<f64>),
}

/// Precomputed semi-implicit step for a fixed model and step size.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    model: &'a ModelSpec,
    dt: f64,
    taming: bool,
    solve: ImplicitSolve,
}

impl<'a> Stepper<'a> {
    /// `dt = 0` is allowed and gives the identity map (without noise).
    pub fn new(model: &'a ModelSpec, dt: f64, taming: bool) -> Result<Self> {
        if !(dt >= 0.0) || !dt.is_finite() {
            return invalid(format!("time step must be non-negative, got {dt}"));
        }
        let solve = match model.drift.family() {
            DriftFamily::LinearOperator(a) => {
                let m = a.nrows();
                let system = DMatrix::identity(m, m) - a * dt;
                let inverse = system
                    .try_inverse()
                    .ok_or_else(|| Error::InvalidArgument(format!("I - dt A is singular for dt = {dt}")))?;
                ImplicitSolve::Dense(inverse)
            }
            _ => ImplicitSolve::Diagonal(model.basis.laplacian_eigs().iter().map(|mu| 1.0 / (1.0 + dt * mu)).collect()),
        };
        Ok(Self { model, dt, taming, solve })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn model(&self) -> &ModelSpec {
        self.model
    }

    /// Apply `(I - dt L)^{-1}` in place.
    pub fn solve_in_place(&self, rhs: &mut DVector<f64>) {
        match &self.solve {
            ImplicitSolve::Diagonal(f) => {
                for (x, s) in rhs.iter_mut().zip(f) {
                    *x *= s;
                }
            }
            ImplicitSolve::Dense(inv) => *rhs = inv * &*rhs,
        }
    }

    /// The resolvent `(I - dt L)^{-1}` as a matrix.
    pub fn resolvent(&self) -> DMatrix<f64> {
        match &self.solve {
            ImplicitSolve::Diagonal(f) => DMatrix::from_diagonal(&DVector::from_column_slice(f)),
            ImplicitSolve::Dense(inv) => inv.clone(),
        }
    }

    /// One step `(I - dt L) u⁺ = u + dt F(u) + B dW`.
    pub fn step(&self, state: &SpectralField, dw: Option<&SpectralField>) -> SpectralField {
        let mut rhs = state.coeffs().clone();
        if let Some(f) = self.model.drift.explicit_part(&self.model.basis, state) {
            let scale = if self.taming { self.dt / (1.0 + self.dt * f.h_norm()) } else { self.dt };
            rhs.axpy(scale, f.coeffs(), 1.0);
        }
        if let Some(dw) = dw {
            match self.model.diffusion.operator() {
                None => rhs += dw.coeffs(),
                Some(b) => rhs += b * dw.coeffs(),
            }
        }
        self.solve_in_place(&mut rhs);
        SpectralField::from_vector(rhs)
    }
}

pub fn step_signal(state: &SpectralField, model: &ModelSpec, dt: f64, dw: &SpectralField) -> Result<SpectralField> {
    if !(dt > 0.0) {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    state.check_dimension(model.dimension(), "state")?;
    dw.check_dimension(model.dimension(), "noise increment")?;
    Ok(Stepper::new(model, dt, false)?.step(state, Some(dw)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalPath {
    pub times: Vec<f64>,
    pub states: Vec<SpectralField>,
}

impl SignalPath {
    pub fn to_table(&self) -> NumericTable {
        let m = self.states.first().map_or(0, SpectralField::dimension);
        let mut header = vec!["time".to_string()];
        header.extend((1..=m).map(|k| format!("coeff_{k}")));
        let mut table = NumericTable::new(header);
        for (t, u) in self.times.iter().zip(&self.states) {
            let mut row = vec![*t];
            row.extend_from_slice(u.as_slice());
            table.push(row);
        }
        table
    }

    pub fn from_table(table: &NumericTable) -> Result<Self> {
        let m = table.expect_indexed_header("time", "coeff_")?;
        if m == 0 {
            return Err(Error::Parse("signal table needs at least one coefficient column".into()));
        }
        let mut times = Vec::with_capacity(table.rows.len());
        let mut states = Vec::with_capacity(table.rows.len());
        for row in &table.rows {
            if let Some(&last) = times.last() {
                if !(row[0] > last) {
                    return Err(Error::Parse("signal times must be strictly increasing".into()));
                }
            }
            times.push(row[0]);
            states.push(SpectralField::from_vec(row[1..].to_vec()));
        }
        if times.is_empty() {
            return Err(Error::Parse("signal table has no rows".into()));
        }
        Ok(Self { times, states })
    }

    pub fn read_csv<R: std::io::Read>(source: R) -> Result<Self> {
        Self::from_table(&NumericTable::read(source)?)
    }
}

pub fn simulate_signal_path(
    u0: &SpectralField,
    model: &ModelSpec,
    config: &IntegratorConfig,
    key: StreamKey,
) -> Result<SignalPath> {
    u0.check_dimension(model.dimension(), "initial state")?;
    let steps = config.steps()?;
    let stepper = Stepper::new(model, config.dt, config.taming)?;
    let stream = derive_stream(key);
    let q = model.diffusion.q();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(u0.clone());
    for n in 0..steps {
        let dw = stream.wiener_increment(n as u64, config.dt, q);
        let next = stepper.step(&states[n], Some(&dw));
        if !next.is_finite() {
            return Err(Error::Divergence(format!("signal left the finite range at step {}", n + 1)));
        }
        states.push(next);
    }
    Ok(SignalPath { times: config.times()?, states })
}

/// Mean and covariance of a linear signal on the time grid.
#[derive(Debug, Clone)]
pub struct MomentPath {
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

/// Integrate `dm = A m dt`, `dP = (AP + PAᵀ + BQBᵀ) dt` with the semi-implicit scheme:
/// `m⁺ = S m`, `P⁺ = S (P + dt BQBᵀ) Sᵀ` with `S = (I - dt A)^{-1}`.
pub fn evolve_signal_covariance(
    model: &ModelSpec,
    config: &IntegratorConfig,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<MomentPath> {
    if !model.drift.is_linear() {
        return Err(Error::UnsupportedModel("covariance evolution needs a linear drift".into()));
    }
    let m = model.dimension();
    if m0.len() != m || p0.nrows() != m || p0.ncols() != m {
        return invalid("initial moments do not match the model dimension");
    }
    let steps = config.steps()?;
    let a = model.drift.linear_matrix(&model.basis).expect("linear drift has a matrix");
    let resolvent = (DMatrix::identity(m, m) - a * config.dt)
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("I - dt A is singular".into()))?;
    let forcing = model.diffusion.covariance_rate() * config.dt;
    let mut means = vec![m0.clone()];
    let mut covariances = vec![symmetrize(p0.clone())];
    for n in 0..steps {
        means.push(&resolvent * &means[n]);
        let p = &resolvent * (&covariances[n] + &forcing) * resolvent.transpose();
        covariances.push(symmetrize(p));
    }
    Ok(MomentPath { times: config.times()?, means, covariances })
}

pub(crate) fn symmetrize(p: DMatrix<f64>) -> DMatrix<f64> {
    (&p + p.transpose()) * 0.5
}

/// Growth bound `β e^{λt}` on the trace of the signal covariance.
pub fn signal_variance_bound(beta: f64, lambda: f64, t: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return invalid(format!("β must be non-negative, got {beta}"));
    }
    Ok(if beta == 0.0 { 0.0 } else { beta * (lambda * t).exp() })
}
