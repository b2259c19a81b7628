//! Finite-dimensional observations `dY = H(u) dt + Γ dV` of the signal.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::noise::{derive_stream, StreamKey};
use crate::signal::SignalPath;
use crate::spectral::SpectralField;
use crate::table::NumericTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObservationKind {
    /// `H(v)_j = ⟨h_j, v⟩`.
    Linear,
    /// `H(v)_j = s tanh(⟨h_j, v⟩ / s)`, bounded by the saturation `s`.
    BoundedTanh { saturation: f64 },
}

/// Observation noise shape active from `start` until the next segment begins.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSegment {
    pub start: f64,
    pub gamma: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
}

impl NoiseSegment {
    pub fn new(start: f64, gamma: DMatrix<f64>) -> Result<Self> {
        let r = &gamma * gamma.transpose();
        let r_inv = r
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::InvalidArgument("R = ΓΓᵀ is not positive definite".into()))?;
        Ok(Self { start, gamma, r, r_inv })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    kind: ObservationKind,
    functionals: Vec<SpectralField>,
    // rows are the functionals h_j
    matrix: DMatrix<f64>,
    schedule: Vec<NoiseSegment>,
}

impl ObservationModel {
    /// Observation with isotropic noise `Γ = γ I`.
    pub fn new(kind: ObservationKind, functionals: Vec<SpectralField>, gamma: f64) -> Result<Self> {
        let dy = functionals.len();
        if dy == 0 {
            return invalid("at least one observation functional is required");
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return invalid(format!("observation noise scale must be positive, got {gamma}"));
        }
        Self::with_schedule(kind, functionals, vec![NoiseSegment::new(0.0, DMatrix::identity(dy, dy) * gamma)?])
    }

    pub fn with_schedule(
        kind: ObservationKind,
        functionals: Vec<SpectralField>,
        schedule: Vec<NoiseSegment>,
    ) -> Result<Self> {
        let dy = functionals.len();
        if dy == 0 {
            return invalid("at least one observation functional is required");
        }
        let m = functionals[0].dimension();
        if functionals.iter().any(|h| h.dimension() != m) {
            return invalid("observation functionals have differing dimensions");
        }
        if let ObservationKind::BoundedTanh { saturation } = kind {
            if !(saturation > 0.0) || !saturation.is_finite() {
                return invalid(format!("saturation must be positive, got {saturation}"));
            }
        }
        if schedule.is_empty() || schedule[0].start != 0.0 {
            return invalid("noise schedule must start at t = 0");
        }
        if schedule.windows(2).any(|w| !(w[1].start > w[0].start)) {
            return invalid("noise schedule start times must increase");
        }
        if schedule.iter().any(|s| s.gamma.nrows() != dy) {
            return invalid("Γ must have one row per observation component");
        }
        let matrix = DMatrix::from_fn(dy, m, |j, k| functionals[j][k]);
        Ok(Self { kind, functionals, matrix, schedule })
    }

    pub fn kind(&self) -> ObservationKind {
        self.kind
    }

    pub fn functionals(&self) -> &[SpectralField] {
        &self.functionals
    }

    /// The d_y × M matrix whose rows are the functionals.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dy(&self) -> usize {
        self.functionals.len()
    }

    pub fn state_dimension(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, ObservationKind::Linear)
    }

    /// True when H does not depend on the state.
    pub fn is_constant(&self) -> bool {
        self.matrix.iter().all(|x| *x == 0.0)
    }

    /// `max_j ‖h_j‖_H`, a Lipschitz constant for both kinds.
    pub fn lipschitz_bound(&self) -> f64 {
        self.functionals.iter().map(SpectralField::h_norm).fold(0.0, f64::max)
    }

    pub fn schedule(&self) -> &[NoiseSegment] {
        &self.schedule
    }

    pub fn noise_at(&self, t: f64) -> &NoiseSegment {
        let idx = self.schedule.partition_point(|s| s.start <= t);
        &self.schedule[idx.saturating_sub(1)]
    }

    pub fn observe(&self, v: &SpectralField) -> Result<DVector<f64>> {
        v.check_dimension(self.state_dimension(), "observed state")?;
        Ok(self.observe_unchecked(v))
    }

    pub(crate) fn observe_unchecked(&self, v: &SpectralField) -> DVector<f64> {
        let mut y = &self.matrix * v.coeffs();
        if let ObservationKind::BoundedTanh { saturation } = self.kind {
            y.apply(|x| *x = saturation * (*x / saturation).tanh());
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub times: Vec<f64>,
    pub increments: Vec<DVector<f64>>,
}

impl ObservationPath {
    pub fn dy(&self) -> usize {
        self.increments.first().map_or(0, |d| d.len())
    }

    /// One row per grid time; the row at `t_n` holds the increment over
    /// `[t_{n-1}, t_n]`, and the first row is the zero origin `Y_0 = 0`.
    pub fn to_table(&self) -> NumericTable {
        let dy = self.dy();
        let mut header = vec!["time".to_string()];
        header.extend((1..=dy).map(|j| format!("dY_{j}")));
        let mut table = NumericTable::new(header);
        let mut first = vec![self.times[0]];
        first.extend(std::iter::repeat_n(0.0, dy));
        table.push(first);
        for (t, d) in self.times[1..].iter().zip(&self.increments) {
            let mut row = vec![*t];
            row.extend(d.iter());
            table.push(row);
        }
        table
    }

    pub fn from_table(table: &NumericTable) -> Result<Self> {
        let dy = table.expect_indexed_header("time", "dY_")?;
        if dy == 0 {
            return Err(Error::Parse("observation table needs at least one dY column".into()));
        }
        let first = table.rows.first().ok_or_else(|| Error::Parse("observation table has no rows".into()))?;
        if first[1..].iter().any(|x| *x != 0.0) {
            return Err(Error::Parse("first observation row must carry zero increments".into()));
        }
        let mut times = vec![first[0]];
        let mut increments = Vec::with_capacity(table.rows.len() - 1);
        for row in &table.rows[1..] {
            if !(row[0] > *times.last().unwrap()) {
                return Err(Error::Parse("observation times must be strictly increasing".into()));
            }
            times.push(row[0]);
            increments.push(DVector::from_column_slice(&row[1..]));
        }
        Ok(Self { times, increments })
    }

    pub fn read_csv<R: std::io::Read>(source: R) -> Result<Self> {
        Self::from_table(&NumericTable::read(source)?)
    }
}

/// `dY_n = H(u_{t_n}) Δt + Γ_{t_n} sqrt(Δt) ξ_n`.
pub fn generate_observation_path(
    signal: &SignalPath,
    model: &ObservationModel,
    key: StreamKey,
) -> Result<ObservationPath> {
    let stream = derive_stream(key);
    let mut increments = Vec::with_capacity(signal.times.len().saturating_sub(1));
    for n in 0..signal.times.len().saturating_sub(1) {
        let dt = signal.times[n + 1] - signal.times[n];
        let mut dy = model.observe(&signal.states[n])? * dt;
        let seg = model.noise_at(signal.times[n]);
        let xi = DVector::from_vec(stream.normals(n as u64, seg.gamma.ncols()));
        dy += &seg.gamma * xi * dt.sqrt();
        increments.push(dy);
    }
    Ok(ObservationPath { times: signal.times.clone(), increments })
}
