//! Galerkin truncation on the unit interval with Dirichlet boundary conditions.
//!
//! States are coefficient vectors in the H-orthonormal sine basis
//! `e_k(x) = sqrt(2) sin(kπx)`, in which the Dirichlet Laplacian is diagonal with
//! eigenvalues `-(kπ)²`. Nonlinear drift terms are evaluated by collocation on the
//! `2M+1` interior nodes `x_j = j/(2M+2)`. On that grid the discrete sine transform
//! of a band-`3M` polynomial is alias-free on modes `1..=M`, so the cubic term is
//! projected exactly up to rounding.

use std::f64::consts::{PI, SQRT_2};
use std::ops::{Index, IndexMut};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::noise::QSpectrum;

/// Coefficients of a function in the sine basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    coeffs: DVector<f64>,
}

impl SpectralField {
    pub fn zeros(dimension: usize) -> Self {
        Self { coeffs: DVector::zeros(dimension) }
    }

    /// The basis function `e_k`, 1-based.
    pub fn basis_vector(dimension: usize, k: usize) -> Self {
        assert!(k >= 1 && k <= dimension, "mode {k} outside 1..={dimension}");
        let mut f = Self::zeros(dimension);
        f.coeffs[k - 1] = 1.0;
        f
    }

    pub fn from_vec(coeffs: Vec<f64>) -> Self {
        Self { coeffs: DVector::from_vec(coeffs) }
    }

    pub fn from_vector(coeffs: DVector<f64>) -> Self {
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut DVector<f64> {
        &mut self.coeffs
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.coeffs
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coeffs.as_slice()
    }

    pub fn dimension(&self) -> usize {
        self.coeffs.len()
    }

    /// Squared H-norm, summed in ascending mode order.
    pub fn h_norm_sq(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, c| acc + c * c)
    }

    pub fn h_norm(&self) -> f64 {
        self.h_norm_sq().sqrt()
    }

    /// Squared H¹₀ norm `Σ μ_k u_k²`.
    pub fn v_norm_sq(&self, basis: &BasisSpec) -> f64 {
        self.coeffs
            .iter()
            .zip(basis.laplacian_eigs())
            .fold(0.0, |acc, (c, mu)| acc + mu * c * c)
    }

    pub fn dot(&self, other: &SpectralField) -> f64 {
        self.coeffs.iter().zip(other.coeffs.iter()).fold(0.0, |acc, (a, b)| acc + a * b)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub(crate) fn check_dimension(&self, expected: usize, what: &str) -> Result<()> {
        if self.dimension() != expected {
            return invalid(format!(
                "{what} has dimension {} but the basis has {expected} modes",
                self.dimension()
            ));
        }
        Ok(())
    }
}

impl Index<usize> for SpectralField {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.coeffs[i]
    }
}

impl IndexMut<usize> for SpectralField {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.coeffs[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    dimension: usize,
    laplacian_eigs: Vec<f64>,
    nodes: Vec<f64>,
    // row j, column k: e_{k+1}(x_j)
    synthesis: DMatrix<f64>,
}

pub fn make_basis(dimension: usize) -> Result<BasisSpec> {
    if dimension == 0 {
        return invalid("basis dimension must be at least 1");
    }
    BasisSpec::with_grid(dimension, 2 * dimension + 1)
}

impl BasisSpec {
    /// Basis with an explicit number of interior collocation nodes.
    pub fn with_grid(dimension: usize, grid_size: usize) -> Result<Self> {
        if dimension == 0 {
            return invalid("basis dimension must be at least 1");
        }
        if grid_size < 2 * dimension + 1 {
            return invalid(format!(
                "collocation grid of {grid_size} nodes is too coarse for {dimension} modes"
            ));
        }
        let laplacian_eigs = (1..=dimension).map(|k| (k as f64 * PI).powi(2)).collect();
        let spacing = 1.0 / (grid_size + 1) as f64;
        let nodes: Vec<f64> = (1..=grid_size).map(|j| j as f64 * spacing).collect();
        let synthesis = DMatrix::from_fn(grid_size, dimension, |j, k| {
            SQRT_2 * ((k + 1) as f64 * PI * nodes[j]).sin()
        });
        Ok(Self { dimension, laplacian_eigs, nodes, synthesis })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// `μ_k = (kπ)²`, k = 1..=M.
    pub fn laplacian_eigs(&self) -> &[f64] {
        &self.laplacian_eigs
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    fn quadrature_weight(&self) -> f64 {
        1.0 / (self.nodes.len() + 1) as f64
    }

    pub fn to_physical(&self, field: &SpectralField) -> Vec<f64> {
        (&self.synthesis * field.coeffs()).data.into()
    }

    pub fn to_coeffs(&self, values: &[f64]) -> SpectralField {
        assert_eq!(values.len(), self.nodes.len());
        let v = DVector::from_column_slice(values);
        SpectralField::from_vector(self.synthesis.tr_mul(&v) * self.quadrature_weight())
    }

    /// Discrete Gram matrix of the basis on the collocation grid.
    pub fn gram(&self) -> DMatrix<f64> {
        self.synthesis.tr_mul(&self.synthesis) * self.quadrature_weight()
    }

    /// Exact L² projection of the constant function `c`.
    pub fn project_constant(&self, c: f64) -> SpectralField {
        let coeffs = (1..=self.dimension)
            .map(|k| if k % 2 == 1 { c * 2.0 * SQRT_2 / (k as f64 * PI) } else { 0.0 })
            .collect();
        SpectralField::from_vec(coeffs)
    }
}

/// Point evaluation of a truncated field.
pub fn evaluate_at(field: &SpectralField, x: f64) -> f64 {
    field
        .as_slice()
        .iter()
        .enumerate()
        .fold(0.0, |acc, (k, c)| acc + c * SQRT_2 * ((k + 1) as f64 * PI * x).sin())
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftFamily {
    /// `A(v) = Δv`.
    Heat,
    /// `A(v) = Δv - a v³ + b v + c`.
    AllenCahn { a: f64, b: f64, c: f64 },
    /// `A(v) = A v` for an M×M matrix.
    LinearOperator(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftModel {
    family: DriftFamily,
    declared_lambda: f64,
}

impl DriftModel {
    pub fn heat() -> Self {
        Self { family: DriftFamily::Heat, declared_lambda: 0.0 }
    }

    pub fn allen_cahn(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a >= 0.0) || !a.is_finite() || !b.is_finite() || !c.is_finite() {
            return invalid(format!("Allen-Cahn needs a >= 0 and finite b, c (got {a}, {b}, {c})"));
        }
        Ok(Self { family: DriftFamily::AllenCahn { a, b, c }, declared_lambda: (2.0 * b).max(0.0) })
    }

    pub fn linear(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return invalid("linear drift operator must be square");
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return invalid("linear drift operator has non-finite entries");
        }
        let symmetric = &matrix + matrix.transpose();
        let lambda = SymmetricEigen::new(symmetric).eigenvalues.max().max(0.0);
        Ok(Self { family: DriftFamily::LinearOperator(matrix), declared_lambda: lambda })
    }

    /// Replace the default one-sided Lipschitz constant.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.declared_lambda = lambda;
        self
    }

    pub fn family(&self) -> &DriftFamily {
        &self.family
    }

    pub fn declared_lambda(&self) -> f64 {
        self.declared_lambda
    }

    pub fn is_linear(&self) -> bool {
        match self.family {
            DriftFamily::Heat | DriftFamily::LinearOperator(_) => true,
            DriftFamily::AllenCahn { a, c, .. } => a == 0.0 && c == 0.0,
        }
    }

    /// Matrix of the drift when it is linear.
    pub fn linear_matrix(&self, basis: &BasisSpec) -> Option<DMatrix<f64>> {
        let m = basis.dimension();
        match &self.family {
            DriftFamily::Heat => Some(DMatrix::from_diagonal(&DVector::from_iterator(
                m,
                basis.laplacian_eigs().iter().map(|mu| -mu),
            ))),
            DriftFamily::AllenCahn { a, b, c } if *a == 0.0 && *c == 0.0 => {
                Some(DMatrix::from_diagonal(&DVector::from_iterator(
                    m,
                    basis.laplacian_eigs().iter().map(|mu| b - mu),
                )))
            }
            DriftFamily::LinearOperator(a) => Some(a.clone()),
            _ => None,
        }
    }

    /// Non-stiff remainder `F` of the split `A = L + F`, where `L` is `-diag(μ)` for
    /// Heat and Allen-Cahn. Linear operators carry no remainder.
    pub(crate) fn explicit_part(&self, basis: &BasisSpec, state: &SpectralField) -> Option<SpectralField> {
        match &self.family {
            DriftFamily::Heat | DriftFamily::LinearOperator(_) => None,
            DriftFamily::AllenCahn { a, b, c } => {
                let mut out = state.clone();
                out.coeffs *= *b;
                if *a != 0.0 {
                    let cubed: Vec<f64> = basis.to_physical(state).into_iter().map(|v| -a * v * v * v).collect();
                    out.coeffs += basis.to_coeffs(&cubed).coeffs;
                }
                if *c != 0.0 {
                    out.coeffs += basis.project_constant(*c).coeffs;
                }
                Some(out)
            }
        }
    }
}

/// Evaluate the drift `A(u)` as V′ coefficients.
pub fn apply_drift(drift: &DriftModel, basis: &BasisSpec, state: &SpectralField) -> Result<SpectralField> {
    state.check_dimension(basis.dimension(), "state")?;
    match &drift.family {
        DriftFamily::LinearOperator(a) => {
            if a.nrows() != basis.dimension() {
                return invalid("linear drift operator does not match the basis dimension");
            }
            Ok(SpectralField::from_vector(a * state.coeffs()))
        }
        _ => {
            let mut out = state.clone();
            for (c, mu) in out.coeffs.iter_mut().zip(basis.laplacian_eigs()) {
                *c *= -mu;
            }
            if let Some(f) = drift.explicit_part(basis, state) {
                out.coeffs += f.coeffs;
            }
            Ok(out)
        }
    }
}

/// Additive noise `B dW` with a constant operator B.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    // None is the identity.
    operator: Option<DMatrix<f64>>,
    q: QSpectrum,
    beta: f64,
}

impl DiffusionModel {
    pub fn identity(q: QSpectrum) -> Self {
        let beta = q.eigenvalues().iter().sum();
        Self { operator: None, q, beta }
    }

    pub fn with_operator(operator: DMatrix<f64>, q: QSpectrum) -> Result<Self> {
        if operator.ncols() != q.len() || operator.nrows() != q.len() {
            return invalid("diffusion operator must be M×M with M the number of noise modes");
        }
        // β = tr(B Q Bᵀ) = Σ_k q_k ‖B e_k‖²
        let beta = operator
            .column_iter()
            .zip(q.eigenvalues())
            .map(|(col, qk)| qk * col.norm_squared())
            .sum();
        Ok(Self { operator: Some(operator), q, beta })
    }

    pub fn q(&self) -> &QSpectrum {
        &self.q
    }

    pub fn operator(&self) -> Option<&DMatrix<f64>> {
        self.operator.as_ref()
    }

    /// `tr(B Q Bᵀ)`.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_zero(&self) -> bool {
        self.beta == 0.0
    }

    pub fn apply(&self, dw: &SpectralField) -> SpectralField {
        match &self.operator {
            None => dw.clone(),
            Some(b) => SpectralField::from_vector(b * dw.coeffs()),
        }
    }

    /// `B Q Bᵀ` as a dense matrix.
    pub fn covariance_rate(&self) -> DMatrix<f64> {
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(self.q.eigenvalues()));
        match &self.operator {
            None => q,
            Some(b) => b * q * b.transpose(),
        }
    }
}

/// Everything that defines the signal SPDE at Galerkin resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub basis: BasisSpec,
    pub drift: DriftModel,
    pub diffusion: DiffusionModel,
}

impl ModelSpec {
    pub fn new(basis: BasisSpec, drift: DriftModel, diffusion: DiffusionModel) -> Result<Self> {
        let m = basis.dimension();
        if diffusion.q().len() != m {
            return invalid(format!("noise spectrum has {} modes, basis has {m}", diffusion.q().len()));
        }
        if let DriftFamily::LinearOperator(a) = drift.family() {
            if a.nrows() != m {
                return invalid(format!("linear drift is {}×{}, basis has {m} modes", a.nrows(), a.ncols()));
            }
        }
        Ok(Self { basis, drift, diffusion })
    }

    pub fn dimension(&self) -> usize {
        self.basis.dimension()
    }

    pub fn lambda(&self) -> f64 {
        self.drift.declared_lambda()
    }

    pub fn beta(&self) -> f64 {
        self.diffusion.beta()
    }
}

/// Largest observed ratio `2⟨A(u)-A(v), u-v⟩ / ‖u-v‖²` over the sample pairs.
///
/// Diffusion is additive, so its Hilbert-Schmidt contribution vanishes.
pub fn one_sided_lipschitz_check(
    drift: &DriftModel,
    diffusion: &DiffusionModel,
    basis: &BasisSpec,
    sample_pairs: &[(SpectralField, SpectralField)],
) -> Result<f64> {
    let _ = diffusion;
    let mut best: Option<f64> = None;
    for (u, v) in sample_pairs {
        let mut diff = u.clone();
        diff.coeffs -= v.coeffs();
        let norm_sq = diff.h_norm_sq();
        if norm_sq == 0.0 {
            continue;
        }
        let mut da = apply_drift(drift, basis, u)?;
        da.coeffs -= apply_drift(drift, basis, v)?.coeffs;
        let ratio = 2.0 * da.dot(&diff) / norm_sq;
        best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
    }
    best.ok_or_else(|| Error::InvalidArgument("no pair of distinct states to test".into()))
}
