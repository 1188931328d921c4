//! Operator recovery scoring and the sample-complexity bound.

use crate::error::{Error, Result};
use crate::oblique::AnalysisOperator;
use crate::tensor::{dot, DenseMatrix};

/// `c_ij = 1 − |ω̃_iᵀ ω_j|` between learned rows `i` and ground-truth rows `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix(pub DenseMatrix);

impl ConfusionMatrix {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }
}

pub fn confusion_matrix(learned: &AnalysisOperator, gt: &AnalysisOperator) -> Result<ConfusionMatrix> {
    confusion_from_rows(&learned.composed(), &gt.composed())
}

/// Confusion matrix of two row-normalized matrices.
pub fn confusion_from_rows(learned: &DenseMatrix, gt: &DenseMatrix) -> Result<ConfusionMatrix> {
    if learned.rows() != gt.rows() || learned.cols() != gt.cols() {
        return Err(Error::dims(
            "confusion_matrix",
            format!("{}x{}", gt.rows(), gt.cols()),
            format!("{}x{}", learned.rows(), learned.cols()),
        ));
    }
    let n = gt.rows();
    let mut c = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // clamp rounding so entries stay inside [0, 1]
            c[(i, j)] = (1.0 - dot(learned.row(i), gt.row(j)).abs()).clamp(0.0, 1.0);
        }
    }
    Ok(ConfusionMatrix(c))
}

/// Minimum-cost perfect matching of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `permutation[i]` is the column assigned to row `i`.
    pub permutation: Vec<usize>,
    /// `Σ_i C[i, permutation[i]]`, summed in row order.
    pub cost: f64,
}

/// Solves the linear assignment problem with the O(n³) shortest augmenting
/// path method. Among optimal assignments the lexicographically smallest
/// permutation is returned.
pub fn hungarian_min_assignment(c: &DenseMatrix) -> Result<Assignment> {
    let n = c.rows();
    if c.cols() != n {
        return Err(Error::dims("hungarian_min_assignment", "square matrix", format!("{}x{}", n, c.cols())));
    }
    if n == 0 {
        return Ok(Assignment {
            permutation: vec![],
            cost: 0.0,
        });
    }
    if c.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("assignment costs must be finite".into()));
    }

    // 1-based potentials; p[j] is the row matched to column j, 0 = none.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of = vec![0usize; n];
    let mut row_of = vec![Some(0usize); n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
        row_of[j - 1] = Some(p[j] - 1);
    }

    // Every optimal assignment uses only edges with zero reduced cost under
    // the optimal potentials; pick the lexicographically first one.
    let scale = c.data().iter().fold(1.0f64, |a, &x| a.max(x.abs()));
    let eps = 1e-9 * scale;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| c[(i, j)] - u[i + 1] - v[j + 1] <= eps).collect())
        .collect();
    lexicographic_matching(&tight, &mut col_of, &mut row_of);

    let cost = (0..n).map(|i| c[(i, col_of[i])]).sum();
    Ok(Assignment {
        permutation: col_of,
        cost,
    })
}

/// Rewrites a perfect matching of the bipartite graph `tight` into the
/// lexicographically smallest perfect matching.
fn lexicographic_matching(tight: &[Vec<bool>], col_of: &mut [usize], row_of: &mut [Option<usize>]) {
    let n = tight.len();
    let mut col_fixed = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if col_fixed[j] || !tight[i][j] {
                continue;
            }
            if col_of[i] == j {
                break;
            }
            let old = col_of[i];
            let r = row_of[j].expect("perfect matching");
            col_of[i] = j;
            row_of[j] = Some(i);
            row_of[old] = None;
            col_fixed[j] = true;
            let mut visited = vec![false; n];
            if augment(r, i, tight, &col_fixed, &mut visited, col_of, row_of) {
                col_fixed[j] = false;
                break;
            }
            col_fixed[j] = false;
            col_of[i] = old;
            row_of[old] = Some(i);
            row_of[j] = Some(r);
            col_of[r] = j;
        }
        col_fixed[col_of[i]] = true;
    }
}

/// Kuhn-style augmenting path from the unmatched row `r`, using rows after
/// `pivot` and unfixed columns only.
fn augment(
    r: usize,
    pivot: usize,
    tight: &[Vec<bool>],
    col_fixed: &[bool],
    visited: &mut [bool],
    col_of: &mut [usize],
    row_of: &mut [Option<usize>],
) -> bool {
    for c in 0..tight.len() {
        if !tight[r][c] || col_fixed[c] || visited[c] {
            continue;
        }
        visited[c] = true;
        let free = match row_of[c] {
            None => true,
            Some(next) => next > pivot && augment(next, pivot, tight, col_fixed, visited, col_of, row_of),
        };
        if free {
            row_of[c] = Some(r);
            col_of[r] = c;
            return true;
        }
    }
    false
}

/// `H(C)`: the minimal assignment cost of the confusion matrix.
pub fn recovery_error(learned: &AnalysisOperator, gt: &AnalysisOperator) -> Result<f64> {
    let c = confusion_matrix(learned, gt)?;
    Ok(hungarian_min_assignment(c.matrix())?.cost)
}

/// Inputs of the generalization bound.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs {
    /// `(m_i, p_i)` per factor.
    pub factor_dims: Vec<(usize, usize)>,
    /// Lipschitz constant `λ` of the sparsity measure.
    pub lipschitz: f64,
    pub samples: u64,
    /// Failure probability `δ`.
    pub delta: f64,
    pub separable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bound {
    /// Constraint-set constant `C`.
    pub constant: f64,
    /// Bound `η` on `E[f] − Ê_S[f]`.
    pub eta: f64,
}

impl Bound {
    /// Bound on the estimation error `E[f*_S] − E[f*]`, i.e. twice `η`
    /// (the one-sided bound applied to `F ∪ −F`).
    pub fn estimation_error(&self) -> f64 {
        2.0 * self.eta
    }
}

/// One-sided uniform deviation bound, holding with probability `1 − δ`:
///
/// ```text
/// η = √(2π) λ C / √N + 3 √(2 λ² m ln(2/δ) / N)
/// ```
///
/// with `C = m √p` for unstructured operators and `C = Σ_i m_i √p_i` for
/// separable ones. The same `η` bounds `|E[f] − Ê_S[f]|` when the function
/// class is closed under negation.
pub fn complexity_bound(b: &BoundInputs) -> Result<Bound> {
    if b.factor_dims.is_empty() || b.factor_dims.iter().any(|&(m, p)| m == 0 || p == 0) {
        return Err(Error::InvalidParameter(format!(
            "factor dimensions must be nonempty and positive, got {:?}",
            b.factor_dims
        )));
    }
    if !(b.lipschitz >= 0.0 && b.lipschitz.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {}", b.lipschitz)));
    }
    if b.samples == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    if !(b.delta > 0.0 && b.delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0,1), got {}", b.delta)));
    }
    let m: f64 = b.factor_dims.iter().map(|&(m, _)| m as f64).product();
    let p: f64 = b.factor_dims.iter().map(|&(_, p)| p as f64).product();
    let constant = if b.separable {
        b.factor_dims.iter().map(|&(mi, pi)| mi as f64 * (pi as f64).sqrt()).sum()
    } else {
        m * p.sqrt()
    };
    let n = b.samples as f64;
    let lambda = b.lipschitz;
    let eta = (2.0 * std::f64::consts::PI).sqrt() * lambda * constant / n.sqrt()
        + 3.0 * (2.0 * lambda * lambda * m * (2.0 / b.delta).ln() / n).sqrt();
    Ok(Bound { constant, eta })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::oblique::ObliquePoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all permutations, first-found wins on ties
    /// (permutations are enumerated in lexicographic order).
    pub(crate) fn brute_force(c: &DenseMatrix) -> (Vec<usize>, f64) {
        fn rec(c: &DenseMatrix, perm: &mut Vec<usize>, used: &mut [bool], best: &mut (Vec<usize>, f64)) {
            let n = c.rows();
            if perm.len() == n {
                let cost: f64 = perm.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
                if cost < best.1 {
                    *best = (perm.clone(), cost);
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    perm.push(j);
                    rec(c, perm, used, best);
                    perm.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (vec![], f64::INFINITY);
        rec(c, &mut vec![], &mut vec![false; c.rows()], &mut best);
        best
    }

    #[test]
    fn zero_matrix_gives_identity() {
        let a = hungarian_min_assignment(&DenseMatrix::zeros(5, 5)).unwrap();
        assert_eq!(a.permutation, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn two_by_two() {
        let c = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 1.0]]);
        let a = hungarian_min_assignment(&c).unwrap();
        assert_eq!(a.permutation, vec![0, 1]);
        assert_eq!(a.cost, 2.0);
        assert!(hungarian_min_assignment(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn integer_ties_follow_lexicographic_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..300 {
            let n = rng.gen_range(1..=6);
            let data = (0..n * n).map(|_| f64::from(rng.gen_range(0..3))).collect();
            let c = DenseMatrix::new(n, n, data).unwrap();
            let a = hungarian_min_assignment(&c).unwrap();
            let (perm, cost) = brute_force(&c);
            assert_eq!(a.cost, cost);
            assert_eq!(a.permutation, perm, "{c:?}");
        }
    }

    #[test]
    fn confusion_examples() {
        let id = AnalysisOperator::new(vec![ObliquePoint::new(DenseMatrix::identity(3)).unwrap()]).unwrap();
        let c = confusion_matrix(&id, &id).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(c.matrix()[(i, j)], if i == j { 0.0 } else { 1.0 });
            }
        }
        let flipped = DenseMatrix::from_rows(&[[-1.0, 0.0], [0.0, 1.0]]);
        let c = confusion_from_rows(&flipped, &DenseMatrix::identity(2)).unwrap();
        assert_eq!(c.matrix()[(0, 0)], 0.0);

        let t = std::f64::consts::FRAC_PI_3;
        let a = DenseMatrix::from_rows(&[[1.0, 0.0]]);
        let b = DenseMatrix::from_rows(&[[t.cos(), t.sin()]]);
        let c = confusion_from_rows(&a, &b).unwrap();
        assert!((c.matrix()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(confusion_from_rows(&a, &DenseMatrix::identity(2)).is_err());
    }

    #[test]
    fn permuted_signed_copy_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let gt = AnalysisOperator::random(&[(4, 3), (4, 3)], &mut rng).unwrap();
        let k = gt.composed();
        let mut order: Vec<usize> = (0..k.rows()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut shuffled = DenseMatrix::zeros(k.rows(), k.cols());
        for (dst, &src) in order.iter().enumerate() {
            let sign = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
            for (o, &x) in shuffled.row_mut(dst).iter_mut().zip(k.row(src)) {
                *o = sign * x;
            }
        }
        let learned = AnalysisOperator::new(vec![ObliquePoint::new(shuffled).unwrap()]).unwrap();
        assert!(recovery_error(&learned, &gt).unwrap() < 1e-10);
    }

    #[test]
    fn small_rotation_costs_half_angle_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = AnalysisOperator::random(&[(6, 4)], &mut rng).unwrap();
        let eps = 1e-3;
        let w = gt.factors()[0].clone();
        let mut h = DenseMatrix::zeros(6, 4);
        let dir = crate::oblique::project_to_tangent(&w, &crate::tensor::tests::random_matrix(&mut rng, 6, 4)).unwrap();
        let n = crate::tensor::dot(dir.row(2), dir.row(2)).sqrt();
        for (o, x) in h.row_mut(2).iter_mut().zip(dir.row(2)) {
            *o = x / n;
        }
        let moved = crate::oblique::geodesic_step(&w, &h, eps);
        let learned = AnalysisOperator::new(vec![moved]).unwrap();
        let err = recovery_error(&learned, &gt).unwrap();
        assert!((err - eps * eps / 2.0).abs() < 1e-3 * eps * eps, "{err}");
    }

    #[test]
    fn bound_constants() {
        let dense = complexity_bound(&BoundInputs {
            factor_dims: vec![(64, 49)],
            lipschitz: 1.0,
            samples: 500_000,
            delta: 0.05,
            separable: false,
        })
        .unwrap();
        assert_eq!(dense.constant, 448.0);
        let sep = complexity_bound(&BoundInputs {
            factor_dims: vec![(8, 7), (8, 7)],
            lipschitz: 1.0,
            samples: 500_000,
            delta: 0.05,
            separable: true,
        })
        .unwrap();
        assert!((sep.constant - 16.0 * 7f64.sqrt()).abs() < 1e-12);
        assert!((sep.constant - 42.332).abs() < 1e-3);
        assert!(sep.eta < dense.eta);
        assert_eq!(sep.estimation_error(), 2.0 * sep.eta);

        let zero = complexity_bound(&BoundInputs {
            lipschitz: 0.0,
            factor_dims: vec![(8, 7), (8, 7)],
            samples: 10,
            delta: 0.5,
            separable: true,
        })
        .unwrap();
        assert_eq!(zero.eta, 0.0);
    }

    #[test]
    fn bound_hand_evaluation() {
        let b = complexity_bound(&BoundInputs {
            factor_dims: vec![(4, 9)],
            lipschitz: 2.0,
            samples: 100,
            delta: 0.1,
            separable: false,
        })
        .unwrap();
        // C = 4·3 = 12; η = √(2π)·2·12/10 + 3·√(2·4·4·ln 20 / 100)
        let expect = (2.0 * std::f64::consts::PI).sqrt() * 2.4 + 3.0 * (0.32 * 20f64.ln()).sqrt();
        assert!((b.eta - expect).abs() < 1e-12);
    }

    #[test]
    fn bound_rejects_bad_inputs() {
        let ok = BoundInputs {
            factor_dims: vec![(2, 2)],
            lipschitz: 1.0,
            samples: 1,
            delta: 0.5,
            separable: false,
        };
        assert!(complexity_bound(&ok).is_ok());
        assert!(complexity_bound(&BoundInputs { delta: 1.0, ..ok.clone() }).is_err());
        assert!(complexity_bound(&BoundInputs { samples: 0, ..ok.clone() }).is_err());
        assert!(complexity_bound(&BoundInputs { factor_dims: vec![], ..ok }).is_err());
    }
}
