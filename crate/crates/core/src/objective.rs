//! Learning cost and its Euclidean gradients.
//!
//! Per sample the cost is
//!
//! ```text
//! f(Ω, s) = g(ι(Ω) s) + κ h(ι(Ω)) + μ r(ι(Ω))
//! g(α)    = Σ_k log(1 + ν α_k²)
//! h(K)    = −1/(p ln p) · ln det(KᵀK / m)
//! r(K)    = −Σ_{k<l} ln(1 − (ω_kᵀ ω_l)²)
//! ```
//!
//! where `ι` is the Kronecker composition of the factors. The data term is
//! always evaluated through mode products; the penalties are evaluated on
//! the composed matrix and pulled back to the factors with
//! [`kron_factor_contract`]. Batch sums run in ascending sample order.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::oblique::{shape_product_step, AnalysisOperator, ModeScratch, ObliquePoint};
use crate::tensor::{dot, DenseMatrix};

/// Upper clamp for squared row correlations inside the incoherence log.
pub const RHO_SQ_MAX: f64 = 1.0 - 1e-10;

/// Relative eigenvalue floor for the rank penalty.
pub const RANK_EIG_RTOL: f64 = 1e-12;

/// Weights of the learning cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveParams {
    /// Slope of the log-sparsity measure.
    pub nu: f64,
    /// Full-rank penalty weight.
    pub kappa: f64,
    /// Incoherence penalty weight.
    pub mu: f64,
}

impl ObjectiveParams {
    pub const PAPER_NU: f64 = 500.0;
    pub const PAPER_KAPPA: f64 = 6500.0;
    pub const PAPER_MU: f64 = 1e-4;

    pub fn new(nu: f64, kappa: f64, mu: f64) -> Result<Self> {
        let p = Self { nu, kappa, mu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidParameter(format!("nu must be > 0, got {}", self.nu)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            nu: Self::PAPER_NU,
            kappa: Self::PAPER_KAPPA,
            mu: Self::PAPER_MU,
        }
    }
}

/// `N` vectorized training samples sharing one tensor shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSet {
    mode_sizes: Vec<usize>,
    dim: usize,
    data: Vec<f64>,
}

impl SignalSet {
    /// `data` holds the samples back to back.
    pub fn new(mode_sizes: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if mode_sizes.is_empty() || mode_sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "mode sizes must be nonempty and positive, got {mode_sizes:?}"
            )));
        }
        let dim: usize = mode_sizes.iter().product();
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} values do not form a nonempty set of samples of length {dim}",
                data.len()
            )));
        }
        Ok(Self {
            mode_sizes,
            dim,
            data,
        })
    }

    pub fn from_samples(mode_sizes: Vec<usize>, samples: &[Vec<f64>]) -> Result<Self> {
        let dim: usize = mode_sizes.iter().product();
        if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
            return Err(Error::LengthMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        Self::new(mode_sizes, samples.concat())
    }

    pub fn mode_sizes(&self) -> &[usize] {
        &self.mode_sizes
    }

    /// Sample length `p`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn batch(&self, indices: &[usize]) -> Vec<&[f64]> {
        indices.iter().map(|&i| self.sample(i)).collect()
    }
}

/// `Σ_k log(1 + ν α_k²)`.
pub fn sparsity_value(alpha: &[f64], nu: f64) -> f64 {
    alpha.iter().map(|&a| (nu * a * a).ln_1p()).sum()
}

/// Elementwise derivative `2να / (1 + να²)`.
pub fn sparsity_grad(alpha: &[f64], nu: f64) -> Vec<f64> {
    alpha.iter().map(|&a| sparsity_slope(a, nu)).collect()
}

#[inline]
fn sparsity_slope(a: f64, nu: f64) -> f64 {
    2.0 * nu * a / (1.0 + nu * a * a)
}

/// Largest slope of `α ↦ log(1 + ν α²)`, attained at `α = 1/√ν`.
pub fn sparsity_max_slope(nu: f64) -> f64 {
    nu.sqrt()
}

fn to_nalgebra(k: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(k.rows(), k.cols(), k.data())
}

struct RankEval {
    value: f64,
    grad: Option<DenseMatrix>,
}

fn rank_penalty_eval(k: &DenseMatrix, want_grad: bool) -> Result<RankEval> {
    let (m, p) = (k.rows(), k.cols());
    if m < p {
        return Err(Error::dims("rank_penalty", format!("rows >= {p}"), m));
    }
    if p == 1 {
        // p ln p vanishes; det(KᵀK/m) carries no rank information for one column.
        return Ok(RankEval {
            value: 0.0,
            grad: want_grad.then(|| DenseMatrix::zeros(m, p)),
        });
    }
    let kn = to_nalgebra(k);
    let gram = kn.transpose() * &kn / m as f64;
    let eig = SymmetricEigen::new(gram);
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    if !(min_eig > RANK_EIG_RTOL * max_eig && max_eig > 0.0) {
        return Err(Error::RankDeficient { min_eig, max_eig });
    }
    let scale = 1.0 / (p as f64 * (p as f64).ln());
    let logdet: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    let grad = want_grad.then(|| {
        // (KᵀK)⁻¹ = V diag(1 / (m λ)) Vᵀ
        let inv_diag = eig.eigenvalues.map(|l| 1.0 / (m as f64 * l));
        let v = &eig.eigenvectors;
        let inv = v * DMatrix::from_diagonal(&inv_diag) * v.transpose();
        let g = kn * inv * (-2.0 * scale);
        let mut out = DenseMatrix::zeros(m, p);
        for i in 0..m {
            for j in 0..p {
                out[(i, j)] = g[(i, j)];
            }
        }
        out
    });
    Ok(RankEval {
        value: -scale * logdet,
        grad,
    })
}

/// Full-rank penalty `−1/(p ln p) · ln det(KᵀK / m)` (natural logs).
///
/// Defined as zero for a single column. Fails with
/// [`Error::RankDeficient`] when `KᵀK` is numerically singular.
pub fn rank_penalty(k: &DenseMatrix) -> Result<f64> {
    rank_penalty_eval(k, false).map(|r| r.value)
}

/// `−2/(p ln p) · K (KᵀK)⁻¹`.
pub fn rank_penalty_grad(k: &DenseMatrix) -> Result<DenseMatrix> {
    rank_penalty_eval(k, true).map(|r| r.grad.expect("requested"))
}

/// Value of the incoherence penalty and the number of clamped row pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Incoherence {
    pub value: f64,
    pub clamped: usize,
}

/// `−Σ_{k<l} ln(1 − ρ_kl²)` with `ρ_kl² ≤ 1 − 1e−10`.
pub fn incoherence_penalty(k: &DenseMatrix) -> Incoherence {
    let mut value = 0.0;
    let mut clamped = 0;
    for a in 0..k.rows() {
        for b in a + 1..k.rows() {
            let rho = dot(k.row(a), k.row(b));
            let mut rho_sq = rho * rho;
            if rho_sq > RHO_SQ_MAX {
                rho_sq = RHO_SQ_MAX;
                clamped += 1;
            }
            value -= (-rho_sq).ln_1p();
        }
    }
    Incoherence { value, clamped }
}

/// Gradient of [`incoherence_penalty`]: row `k` is
/// `Σ_{l≠k} 2ρ_kl / (1 − ρ_kl²) · ω_l`. Also returns the clamp count.
pub fn incoherence_penalty_grad(k: &DenseMatrix) -> (DenseMatrix, usize) {
    let m = k.rows();
    let mut g = DenseMatrix::zeros(m, k.cols());
    let mut clamped = 0;
    for a in 0..m {
        for b in a + 1..m {
            let rho = dot(k.row(a), k.row(b));
            let mut rho_sq = rho * rho;
            if rho_sq > RHO_SQ_MAX {
                rho_sq = RHO_SQ_MAX;
                clamped += 1;
            }
            let w = 2.0 * rho / (1.0 - rho_sq);
            for c in 0..k.cols() {
                let (ka, kb) = (k[(a, c)], k[(b, c)]);
                g[(a, c)] += w * kb;
                g[(b, c)] += w * ka;
            }
        }
    }
    (g, clamped)
}

impl AsRef<DenseMatrix> for ObliquePoint {
    fn as_ref(&self) -> &DenseMatrix {
        self.matrix()
    }
}

impl AsRef<DenseMatrix> for DenseMatrix {
    fn as_ref(&self) -> &DenseMatrix {
        self
    }
}

/// Mixed-radix digits (last digit fastest) of `0..radices.product()`.
fn digits(radices: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = radices.iter().product();
    (0..total)
        .map(|mut n| {
            let mut d = vec![0; radices.len()];
            for (slot, &r) in d.iter_mut().zip(radices).rev() {
                *slot = n % r;
                n /= r;
            }
            d
        })
        .collect()
}

/// Chain rule through the Kronecker composition: given the gradient `g_k` of
/// some function with respect to `ι(factors)`, returns its gradient with
/// respect to factor `i`.
pub fn kron_factor_contract<M: AsRef<DenseMatrix>>(
    g_k: &DenseMatrix,
    factors: &[M],
    i: usize,
) -> Result<DenseMatrix> {
    if factors.is_empty() {
        return Err(Error::EmptyFactorList);
    }
    if i >= factors.len() {
        return Err(Error::ModeOutOfRange {
            mode: i,
            order: factors.len(),
        });
    }
    let mats: Vec<&DenseMatrix> = factors.iter().map(AsRef::as_ref).collect();
    let row_radix: Vec<usize> = mats.iter().map(|f| f.rows()).collect();
    let col_radix: Vec<usize> = mats.iter().map(|f| f.cols()).collect();
    let (m, p): (usize, usize) = (row_radix.iter().product(), col_radix.iter().product());
    if g_k.rows() != m || g_k.cols() != p {
        return Err(Error::dims(
            "kron_factor_contract",
            format!("{m}x{p}"),
            format!("{}x{}", g_k.rows(), g_k.cols()),
        ));
    }
    if mats.len() == 1 {
        return Ok(g_k.clone());
    }
    let rows = digits(&row_radix);
    let cols = digits(&col_radix);
    let mut out = DenseMatrix::zeros(row_radix[i], col_radix[i]);
    for (r, rd) in rows.iter().enumerate() {
        let grow = g_k.row(r);
        for (c, cd) in cols.iter().enumerate() {
            let mut w = grow[c];
            if w == 0.0 {
                continue;
            }
            for (j, f) in mats.iter().enumerate() {
                if j != i {
                    w *= f[(rd[j], cd[j])];
                }
            }
            out[(rd[i], cd[i])] += w;
        }
    }
    Ok(out)
}

fn check_batch(op: &AnalysisOperator, batch: &[&[f64]]) -> Result<()> {
    let p = op.cols();
    if let Some(bad) = batch.iter().find(|s| s.len() != p) {
        return Err(Error::dims("batch sample length", p, bad.len()));
    }
    Ok(())
}

/// Mean data term over the batch.
fn data_cost(op: &AnalysisOperator, batch: &[&[f64]], nu: f64, scratch: &mut ModeScratch) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for s in batch {
        total += sparsity_value(op.analyze_with(s, scratch), nu);
    }
    total / batch.len() as f64
}

struct PenaltyEval {
    value: f64,
    grad: Option<DenseMatrix>,
    clamped: usize,
}

fn penalties(k: &DenseMatrix, params: &ObjectiveParams, want_grad: bool) -> Result<PenaltyEval> {
    let mut value = 0.0;
    let mut grad = want_grad.then(|| DenseMatrix::zeros(k.rows(), k.cols()));
    let mut clamped = 0;
    if params.kappa > 0.0 {
        let h = rank_penalty_eval(k, want_grad)?;
        value += params.kappa * h.value;
        if let (Some(g), Some(hg)) = (grad.as_mut(), h.grad.as_ref()) {
            g.add_scaled(params.kappa, hg);
        }
    }
    if params.mu > 0.0 {
        if let Some(g) = grad.as_mut() {
            let (rg, _) = incoherence_penalty_grad(k);
            g.add_scaled(params.mu, &rg);
        }
        let r = incoherence_penalty(k);
        value += params.mu * r.value;
        clamped = r.clamped;
    }
    Ok(PenaltyEval {
        value,
        grad,
        clamped,
    })
}

/// Batch cost together with its diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEval {
    pub cost: f64,
    /// Row pairs whose correlation hit the incoherence clamp.
    pub clamped: usize,
}

/// Mean cost over the batch.
pub fn sample_cost(op: &AnalysisOperator, batch: &[&[f64]], params: &ObjectiveParams) -> Result<f64> {
    Ok(batch_cost(op, batch, params)?.cost)
}

pub fn batch_cost(
    op: &AnalysisOperator,
    batch: &[&[f64]],
    params: &ObjectiveParams,
) -> Result<CostEval> {
    check_batch(op, batch)?;
    let mut scratch = ModeScratch::default();
    let data = data_cost(op, batch, params.nu, &mut scratch);
    let pen = penalties(&op.composed(), params, false)?;
    Ok(CostEval {
        cost: data + pen.value,
        clamped: pen.clamped,
    })
}

/// Cost, per-factor Euclidean gradients, and clamp count.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub cost: f64,
    pub grads: Vec<DenseMatrix>,
    pub clamped: usize,
}

/// Per-factor Euclidean gradients of the mean batch cost.
pub fn euclidean_gradient(
    op: &AnalysisOperator,
    batch: &[&[f64]],
    params: &ObjectiveParams,
) -> Result<Vec<DenseMatrix>> {
    Ok(cost_and_gradient(op, batch, params)?.grads)
}

pub fn cost_and_gradient(
    op: &AnalysisOperator,
    batch: &[&[f64]],
    params: &ObjectiveParams,
) -> Result<Evaluation> {
    check_batch(op, batch)?;
    let t = op.num_factors();
    let factors = op.factors();
    let in_modes = op.input_modes();
    let out_modes = op.output_modes();
    let mut grads: Vec<DenseMatrix> = factors
        .iter()
        .map(|f| DenseMatrix::zeros(f.rows(), f.cols()))
        .collect();

    let mut scratch = ModeScratch::default();
    let mut partial = ModeScratch::default();
    let mut slope = Vec::new();
    let mut data = 0.0;
    for s in batch {
        let alpha = op.analyze_with(s, &mut scratch);
        data += sparsity_value(alpha, params.nu);
        slope.clear();
        slope.extend(alpha.iter().map(|&a| sparsity_slope(a, params.nu)));
        for i in 0..t {
            // P = S ×_{l≠i} Ω^(l), shape equal to the analyzed tensor except mode i
            let mut shape = in_modes.clone();
            partial.a.clear();
            partial.a.extend_from_slice(s);
            for (l, f) in factors.iter().enumerate() {
                if l != i {
                    shape_product_step(&mut partial.a, &mut partial.b, &mut shape, f.matrix(), l);
                }
            }
            accumulate_unfolded_product(&slope, &partial.a, &out_modes, in_modes[i], i, &mut grads[i]);
        }
    }
    if !batch.is_empty() {
        let inv = 1.0 / batch.len() as f64;
        data *= inv;
        grads.iter_mut().for_each(|g| g.scale(inv));
    }

    let composed = op.composed();
    let pen = penalties(&composed, params, true)?;
    if let Some(gk) = pen.grad.as_ref() {
        if params.kappa > 0.0 || params.mu > 0.0 {
            for (i, g) in grads.iter_mut().enumerate() {
                g.add_scaled(1.0, &kron_factor_contract(gk, factors, i)?);
            }
        }
    }
    Ok(Evaluation {
        cost: data + pen.value,
        grads,
        clamped: pen.clamped,
    })
}

/// `out += B_(i) · P_(i)ᵀ` where `B` has shape `b_shape` and `P` equals it
/// except mode `i` has size `p_i`.
fn accumulate_unfolded_product(
    b: &[f64],
    p: &[f64],
    b_shape: &[usize],
    p_i: usize,
    i: usize,
    out: &mut DenseMatrix,
) {
    let outer: usize = b_shape[..i].iter().product();
    let inner: usize = b_shape[i + 1..].iter().product();
    let m_i = b_shape[i];
    for o in 0..outer {
        for a in 0..m_i {
            let brow = &b[(o * m_i + a) * inner..(o * m_i + a + 1) * inner];
            let orow = out.row_mut(a);
            for (c, slot) in orow.iter_mut().enumerate().take(p_i) {
                let prow = &p[(o * p_i + c) * inner..(o * p_i + c + 1) * inner];
                *slot += dot(brow, prow);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tests::random_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_matrix<F: Fn(&DenseMatrix) -> f64>(f: F, at: &DenseMatrix, h: f64) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(at.rows(), at.cols());
        for idx in 0..at.data().len() {
            let mut plus = at.clone();
            let mut minus = at.clone();
            plus.data_mut()[idx] += h;
            minus.data_mut()[idx] -= h;
            g.data_mut()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        let mut d = a.clone();
        d.add_scaled(-1.0, b);
        d.norm_sq().sqrt() / b.norm_sq().sqrt().max(1e-12)
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_value(&[0.0, 0.0], 3.0), 0.0);
        assert!((sparsity_value(&[1.0, 0.0], 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sparsity_grad(&[0.0; 3], 500.0), vec![0.0; 3]);
        let nu: f64 = 500.0;
        let g = sparsity_grad(&[1.0 / nu.sqrt()], nu)[0];
        assert!((g - nu.sqrt()).abs() < 1e-12);
        assert_eq!(sparsity_max_slope(nu), nu.sqrt());
    }

    #[test]
    fn sparsity_is_sign_and_permutation_invariant() {
        let a = [0.3, -0.1, 0.7];
        let b = [-0.7, 0.3, 0.1];
        assert!((sparsity_value(&a, 5.0) - sparsity_value(&b, 5.0)).abs() < 1e-15);
    }

    #[test]
    fn rank_penalty_examples() {
        let id = DenseMatrix::identity(2);
        assert!((rank_penalty(&id).unwrap() - 1.0).abs() < 1e-14);

        // KᵀK = m I: scaled orthonormal columns
        let k = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, -1.0]]);
        assert!(rank_penalty(&k).unwrap().abs() < 1e-14);
        let g = rank_penalty_grad(&k).unwrap();
        // (KᵀK)⁻¹ = I/2
        let mut expect = k.clone();
        expect.scale(-2.0 / (2.0 * 2f64.ln()) * 0.5);
        assert!(g.max_abs_diff(&expect) < 1e-14);

        let q = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let g = rank_penalty_grad(&q).unwrap();
        let mut expect = q.clone();
        expect.scale(-2.0 / (2.0 * 2f64.ln()));
        assert!(g.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn rank_penalty_grows_towards_collinearity() {
        let mut last = f64::NEG_INFINITY;
        for step in 0..10 {
            let theta = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 10.0);
            let k = DenseMatrix::from_rows(&[[1.0, theta.cos()], [0.0, theta.sin()], [0.0, 0.0]]);
            let v = rank_penalty(&k).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn rank_penalty_rejects_singular() {
        let k = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]);
        assert!(matches!(rank_penalty(&k), Err(Error::RankDeficient { .. })));
        assert!(rank_penalty(&DenseMatrix::zeros(2, 3)).is_err());
    }

    fn tangential_norm_sq(g: &DenseMatrix, k: &DenseMatrix) -> f64 {
        let mut t = g.clone();
        t.add_scaled(-g.inner(k) / k.norm_sq(), k);
        t.norm_sq()
    }

    #[test]
    fn rank_penalty_gradient_flow_balances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut k = random_matrix(&mut rng, 6, 4);
        k.scale(6f64.sqrt() / k.norm_sq().sqrt());
        let start = tangential_norm_sq(&rank_penalty_grad(&k).unwrap(), &k);
        let mut value = rank_penalty(&k).unwrap();
        for _ in 0..300 {
            let mut g = rank_penalty_grad(&k).unwrap();
            g.add_scaled(-g.inner(&k) / k.norm_sq(), &k.clone());
            k.add_scaled(-0.05, &g);
            // fixed trace of KᵀK, so the flow cannot just inflate K
            let n = k.norm_sq().sqrt();
            k.scale(6f64.sqrt() / n);
            let v = rank_penalty(&k).unwrap();
            assert!(v <= value + 1e-15);
            value = v;
        }
        // with balanced singular values the gradient is a multiple of K
        let end = tangential_norm_sq(&rank_penalty_grad(&k).unwrap(), &k);
        assert!(end < 1e-3 * start, "{start} -> {end}");
    }

    #[test]
    fn incoherence_examples() {
        let id = DenseMatrix::identity(3);
        let r = incoherence_penalty(&id);
        assert_eq!((r.value, r.clamped), (0.0, 0));
        assert_eq!(incoherence_penalty_grad(&id).0, DenseMatrix::zeros(3, 3));

        let a = std::f64::consts::FRAC_PI_3;
        let k = DenseMatrix::from_rows(&[[1.0, 0.0], [a.cos(), a.sin()]]);
        let r = incoherence_penalty(&k);
        assert!((r.value - (-(0.75f64).ln())).abs() < 1e-14);
        assert!((r.value - 0.287682).abs() < 1e-6);

        let dup = DenseMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let r = incoherence_penalty(&dup);
        assert_eq!(r.clamped, 1);
        assert!(r.value.is_finite());
        assert_eq!(incoherence_penalty_grad(&dup).1, 1);
    }

    #[test]
    fn incoherence_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = crate::oblique::random_oblique(5, 4, &mut rng).unwrap().into_matrix();
        let fd = fd_matrix(|x| incoherence_penalty(x).value, &k, 1e-6);
        assert!(rel_err(&incoherence_penalty_grad(&k).0, &fd) < 1e-6);
    }

    #[test]
    fn contraction_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_matrix(&mut rng, 3, 2);
        assert_eq!(kron_factor_contract(&g, &[random_matrix(&mut rng, 3, 2)], 0).unwrap(), g);

        let a = DenseMatrix::from_rows(&[[2.0]]);
        let b = DenseMatrix::from_rows(&[[3.0]]);
        let gk = DenseMatrix::from_rows(&[[5.0]]);
        assert_eq!(kron_factor_contract(&gk, &[a.clone(), b.clone()], 0).unwrap().data(), &[15.0]);
        assert_eq!(kron_factor_contract(&gk, &[a, b], 1).unwrap().data(), &[10.0]);
    }

    #[test]
    fn contraction_matches_fd_of_rank_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 2, 2);
        let gk = rank_penalty_grad(&crate::tensor::kron_compose(&[a.clone(), b.clone()]).unwrap())
            .unwrap();
        let ga = kron_factor_contract(&gk, &[a.clone(), b.clone()], 0).unwrap();
        let fd = fd_matrix(
            |x| rank_penalty(&crate::tensor::kron_compose(&[x.clone(), b.clone()]).unwrap()).unwrap(),
            &a,
            1e-6,
        );
        assert!(rel_err(&ga, &fd) < 1e-5);
    }

    #[test]
    fn zero_batch_without_penalties_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = AnalysisOperator::random(&[(3, 2), (2, 2)], &mut rng).unwrap();
        let params = ObjectiveParams::new(10.0, 0.0, 0.0).unwrap();
        let zero = vec![0.0; 4];
        let batch = [zero.as_slice()];
        assert_eq!(sample_cost(&op, &batch, &params).unwrap(), 0.0);
        for g in euclidean_gradient(&op, &batch, &params).unwrap() {
            assert_eq!(g.norm_sq(), 0.0);
        }
    }

    #[test]
    fn dense_gradient_is_outer_product_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = AnalysisOperator::random(&[(6, 4)], &mut rng).unwrap();
        let params = ObjectiveParams::new(50.0, 1.0, 0.1).unwrap();
        let samples: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
        let k = op.composed();
        let mut expect = DenseMatrix::zeros(6, 4);
        for s in &samples {
            let gs = sparsity_grad(&k.matvec(s).unwrap(), params.nu);
            for i in 0..6 {
                for j in 0..4 {
                    expect[(i, j)] += gs[i] * s[j] / 3.0;
                }
            }
        }
        expect.add_scaled(params.kappa, &rank_penalty_grad(&k).unwrap());
        expect.add_scaled(params.mu, &incoherence_penalty_grad(&k).0);
        let got = euclidean_gradient(&op, &batch, &params).unwrap();
        assert!(got[0].max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn separable_cost_equals_composed_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let op = AnalysisOperator::random(&[(3, 3), (2, 2)], &mut rng).unwrap();
        let dense = AnalysisOperator::new(vec![ObliquePoint::new(op.composed()).unwrap()]).unwrap();
        let samples: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
        let params = ObjectiveParams::default();
        let a = sample_cost(&op, &batch, &params).unwrap();
        let b = sample_cost(&dense, &batch, &params).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn batch_length_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = AnalysisOperator::random(&[(4, 3)], &mut rng).unwrap();
        let s = [0.0; 2];
        assert!(sample_cost(&op, &[&s], &ObjectiveParams::default()).is_err());
        assert!(ObjectiveParams::new(0.0, 1.0, 1.0).is_err());
        assert!(ObjectiveParams::new(1.0, -1.0, 1.0).is_err());
    }
}
