//! Oblique manifold geometry.
//!
//! `Ob(m, p)` is the set of `m × p` matrices with unit-norm rows, i.e. a
//! product of `m` unit spheres in `ℝ^p`. An [`AnalysisOperator`] is a point on
//! a product of such manifolds, one per Kronecker factor.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{dot, kron_compose, mode_product_raw, DenseMatrix};

/// Row norm tolerance for points on the manifold.
pub const ROW_NORM_TOL: f64 = 1e-10;

/// Directions with smaller row norm are treated as zero by [`geodesic_step`].
pub const ZERO_DIRECTION_TOL: f64 = 1e-14;

const MAX_DRAW_ATTEMPTS: usize = 100;

/// A matrix with unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ObliquePoint(DenseMatrix);

impl ObliquePoint {
    /// Wraps `matrix`, checking the unit row norm invariant.
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        for i in 0..matrix.rows() {
            let norm = dot(matrix.row(i), matrix.row(i)).sqrt();
            if (norm - 1.0).abs() > ROW_NORM_TOL {
                return Err(Error::NotOblique { row: i, norm });
            }
        }
        Ok(Self(matrix))
    }

    /// Scales each row of `matrix` to unit norm. Fails on a zero row.
    pub fn normalized(mut matrix: DenseMatrix) -> Result<Self> {
        for i in 0..matrix.rows() {
            let row = matrix.row_mut(i);
            let norm = dot(row, row).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Degenerate(format!("row {i} has norm {norm}")));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Self(matrix))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    /// Largest deviation of a row norm from one.
    pub fn max_row_norm_deviation(&self) -> f64 {
        max_row_norm_deviation(&self.0)
    }
}

pub(crate) fn max_row_norm_deviation(m: &DenseMatrix) -> f64 {
    (0..m.rows())
        .map(|i| (dot(m.row(i), m.row(i)).sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Draws a point with i.i.d. standard normal entries and normalized rows.
pub fn random_oblique<R: Rng + ?Sized>(m: usize, p: usize, rng: &mut R) -> Result<ObliquePoint> {
    if m == 0 || p == 0 {
        return Err(Error::InvalidParameter(format!(
            "oblique manifold dimensions must be positive, got {m}x{p}"
        )));
    }
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let data: Vec<f64> = (0..m * p).map(|_| rng.sample(StandardNormal)).collect();
        let matrix = DenseMatrix::new(m, p, data)?;
        if let Ok(point) = ObliquePoint::normalized(matrix) {
            return Ok(point);
        }
    }
    Err(Error::Degenerate(format!(
        "zero row in {MAX_DRAW_ATTEMPTS} consecutive draws of a {m}x{p} matrix"
    )))
}

/// Orthogonal projection of `g` onto the tangent space at `omega`:
/// each row loses its component along the corresponding row of `omega`.
pub fn project_to_tangent(omega: &ObliquePoint, g: &DenseMatrix) -> Result<DenseMatrix> {
    let w = omega.matrix();
    if w.rows() != g.rows() || w.cols() != g.cols() {
        return Err(Error::dims(
            "project_to_tangent",
            format!("{}x{}", w.rows(), w.cols()),
            format!("{}x{}", g.rows(), g.cols()),
        ));
    }
    let mut out = g.clone();
    for j in 0..w.rows() {
        let wr = w.row(j);
        let coef = dot(out.row(j), wr);
        for (o, &x) in out.row_mut(j).iter_mut().zip(wr) {
            *o -= coef * x;
        }
    }
    Ok(out)
}

/// Follows the great circle through each row of `omega` in the direction of the
/// matching row of `h` for arc length `t · ‖h_j‖`.
pub fn geodesic_step(omega: &ObliquePoint, h: &DenseMatrix, t: f64) -> ObliquePoint {
    let w = omega.matrix();
    debug_assert_eq!((w.rows(), w.cols()), (h.rows(), h.cols()));
    let mut out = w.clone();
    for j in 0..w.rows() {
        let hr = h.row(j);
        let hn = dot(hr, hr).sqrt();
        if hn < ZERO_DIRECTION_TOL {
            continue;
        }
        let (s, c) = (t * hn).sin_cos();
        let row = out.row_mut(j);
        for (o, &x) in row.iter_mut().zip(hr) {
            *o = *o * c + (x / hn) * s;
        }
        // cos²+sin² drifts by a few ulps; pull back onto the sphere
        let n = dot(row, row).sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    ObliquePoint(out)
}

/// Ordered Kronecker factors, each on its own oblique manifold.
///
/// A single factor is the unstructured (non-separable) case.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisOperator {
    factors: Vec<ObliquePoint>,
}

impl AnalysisOperator {
    pub fn new(factors: Vec<ObliquePoint>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::EmptyFactorList);
        }
        Ok(Self { factors })
    }

    /// Random operator with factor sizes `dims = [(m_1, p_1), …]`.
    pub fn random<R: Rng + ?Sized>(dims: &[(usize, usize)], rng: &mut R) -> Result<Self> {
        let factors = dims
            .iter()
            .map(|&(m, p)| random_oblique(m, p, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(factors)
    }

    pub fn factors(&self) -> &[ObliquePoint] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn is_separable(&self) -> bool {
        self.factors.len() > 1
    }

    /// `(m_i, p_i)` for each factor.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.factors.iter().map(|f| (f.rows(), f.cols())).collect()
    }

    /// Signal mode sizes `(p_1, …, p_T)`.
    pub fn input_modes(&self) -> Vec<usize> {
        self.factors.iter().map(ObliquePoint::cols).collect()
    }

    /// Analyzed-signal mode sizes `(m_1, …, m_T)`.
    pub fn output_modes(&self) -> Vec<usize> {
        self.factors.iter().map(ObliquePoint::rows).collect()
    }

    /// Number of composed filters `m = ∏ m_i`.
    pub fn rows(&self) -> usize {
        self.factors.iter().map(ObliquePoint::rows).product()
    }

    /// Signal length `p = ∏ p_i`.
    pub fn cols(&self) -> usize {
        self.factors.iter().map(ObliquePoint::cols).product()
    }

    /// The composed operator `Ω^(1) ⊗ … ⊗ Ω^(T)`.
    pub fn composed(&self) -> DenseMatrix {
        let mats: Vec<DenseMatrix> = self.factors.iter().map(|f| f.matrix().clone()).collect();
        kron_compose(&mats).expect("operator has at least one factor")
    }

    /// Applies the operator to one vectorized signal via mode products.
    pub fn analyze(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.len() != self.cols() {
            return Err(Error::dims("analyze", self.cols(), signal.len()));
        }
        let mut scratch = ModeScratch::default();
        Ok(self.analyze_with(signal, &mut scratch).to_vec())
    }

    /// Allocation-free variant of [`analyze`](Self::analyze).
    pub(crate) fn analyze_with<'s>(&self, signal: &[f64], scratch: &'s mut ModeScratch) -> &'s [f64] {
        let mut shape = self.input_modes();
        scratch.a.clear();
        scratch.a.extend_from_slice(signal);
        for (k, f) in self.factors.iter().enumerate() {
            shape_product_step(&mut scratch.a, &mut scratch.b, &mut shape, f.matrix(), k);
        }
        &scratch.a
    }

    /// Steps every factor along its geodesic.
    pub fn geodesic_step(&self, direction: &TangentDirection, t: f64) -> AnalysisOperator {
        let factors = self
            .factors
            .iter()
            .zip(&direction.parts)
            .map(|(f, h)| geodesic_step(f, h, t))
            .collect();
        AnalysisOperator { factors }
    }

    /// Projects per-factor Euclidean gradients onto the tangent spaces.
    pub fn project(&self, grads: &[DenseMatrix]) -> Result<TangentDirection> {
        if grads.len() != self.factors.len() {
            return Err(Error::dims("project", self.factors.len(), grads.len()));
        }
        let parts = self
            .factors
            .iter()
            .zip(grads)
            .map(|(f, g)| project_to_tangent(f, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(TangentDirection { parts })
    }
}

/// Reusable buffers for chained mode products.
#[derive(Default, Debug)]
pub(crate) struct ModeScratch {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// `a ← a ×_k m`, updating `shape`; `b` is scratch.
pub(crate) fn shape_product_step(
    a: &mut Vec<f64>,
    b: &mut Vec<f64>,
    shape: &mut [usize],
    m: &DenseMatrix,
    k: usize,
) {
    let len = a.len() / shape[k] * m.rows();
    b.resize(len, 0.0);
    mode_product_raw(a, shape, m, k, b);
    shape[k] = m.rows();
    std::mem::swap(a, b);
}

/// Tangent vector on the product manifold, one part per factor.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentDirection {
    pub parts: Vec<DenseMatrix>,
}

impl TangentDirection {
    /// Squared norm under the product metric (sum of per-factor Frobenius norms).
    pub fn norm_sq(&self) -> f64 {
        self.parts.iter().map(DenseMatrix::norm_sq).sum()
    }

    pub fn negated(&self) -> TangentDirection {
        let parts = self
            .parts
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.scale(-1.0);
                q
            })
            .collect();
        TangentDirection { parts }
    }

    /// Largest `|⟨h_j, ω_j⟩|` over all rows of all factors.
    pub fn max_radial_component(&self, op: &AnalysisOperator) -> f64 {
        self.parts
            .iter()
            .zip(op.factors())
            .flat_map(|(h, f)| (0..h.rows()).map(move |j| dot(h.row(j), f.matrix().row(j)).abs()))
            .fold(0.0, f64::max)
    }
}
