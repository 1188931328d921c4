//! Synthetic co-sparse signals drawn from the null spaces of random row
//! subsets of a ground-truth operator.

use nalgebra::{DMatrix, SVD};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::objective::SignalSet;
use crate::oblique::AnalysisOperator;
use crate::tensor::DenseMatrix;

const MAX_SUBSET_RETRIES: usize = 100;

/// Relative singular value cutoff for the null-space basis.
pub const NULL_SPACE_RTOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosparseSpec {
    /// Number `ℓ` of vanishing filter responses per sample.
    pub cosparsity: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    pub count: usize,
    pub seed: u64,
}

/// Generated samples plus the number of row subsets that had to be redrawn.
#[derive(Clone, Debug)]
pub struct Generated {
    pub signals: SignalSet,
    pub resampled_subsets: usize,
}

/// Generates `spec.count` unit-norm samples `s` with `(ι(op) s)_Λ = 0` for a
/// uniformly drawn `|Λ| = ℓ`, then adds i.i.d. Gaussian noise.
pub fn generate_cosparse(op_gt: &AnalysisOperator, spec: &CosparseSpec) -> Result<SignalSet> {
    generate_cosparse_with_stats(op_gt, spec).map(|g| g.signals)
}

pub fn generate_cosparse_with_stats(op_gt: &AnalysisOperator, spec: &CosparseSpec) -> Result<Generated> {
    let (m, p) = (op_gt.rows(), op_gt.cols());
    let l = spec.cosparsity;
    if l == 0 || l >= p || l > m {
        return Err(Error::InvalidParameter(format!(
            "cosparsity must satisfy 1 <= l < p = {p} and l <= m = {m}, got {l}"
        )));
    }
    if spec.count == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidParameter(format!("noise sigma {}: {e}", spec.noise_sigma)))?;
    let k = op_gt.composed();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.count * p);
    let mut resampled = 0;
    for n in 0..spec.count {
        let basis = (0..MAX_SUBSET_RETRIES)
            .find_map(|_| {
                let rows = index::sample(&mut rng, m, l).into_vec();
                let b = null_space_basis(&k, &rows);
                if b.is_none() {
                    resampled += 1;
                    log::debug!("sample {n}: row subset {rows:?} is rank deficient, redrawing");
                }
                b
            })
            .ok_or_else(|| {
                Error::Degenerate(format!(
                    "no full-rank {l}-row subset found in {MAX_SUBSET_RETRIES} draws"
                ))
            })?;
        let s = loop {
            let mut s = vec![0.0; p];
            for b in 0..basis.rows() {
                let z: f64 = rng.sample(StandardNormal);
                for (x, &q) in s.iter_mut().zip(basis.row(b)) {
                    *x += z * q;
                }
            }
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                s.iter_mut().for_each(|x| *x /= norm);
                break s;
            }
        };
        data.extend(s.iter().map(|&x| {
            if spec.noise_sigma > 0.0 {
                x + noise.sample(&mut rng)
            } else {
                x
            }
        }));
    }
    Ok(Generated {
        signals: SignalSet::new(op_gt.input_modes(), data)?,
        resampled_subsets: resampled,
    })
}

/// Orthonormal basis (as rows) of the null space of the selected rows of
/// `k`, or `None` when those rows are not linearly independent.
pub fn null_space_basis(k: &DenseMatrix, rows: &[usize]) -> Option<DenseMatrix> {
    let p = k.cols();
    let l = rows.len();
    // pad to p×p so the SVD returns a full right basis
    let mut sub = DMatrix::<f64>::zeros(p.max(l), p);
    for (r, &i) in rows.iter().enumerate() {
        for c in 0..p {
            sub[(r, c)] = k[(i, c)];
        }
    }
    let svd = SVD::new(sub, false, true);
    let v_t = svd.v_t.as_ref()?;
    let sigma = &svd.singular_values;
    let tol = NULL_SPACE_RTOL * sigma.max();
    let rank = sigma.iter().filter(|&&s| s > tol).count();
    if rank < l {
        return None;
    }
    let null: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] <= tol).collect();
    let mut basis = DenseMatrix::zeros(null.len(), p);
    for (b, &i) in null.iter().enumerate() {
        for c in 0..p {
            basis[(b, c)] = v_t[(i, c)];
        }
    }
    Some(basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oblique::ObliquePoint;

    fn identity_op(n: usize) -> AnalysisOperator {
        AnalysisOperator::new(vec![ObliquePoint::new(DenseMatrix::identity(n)).unwrap()]).unwrap()
    }

    #[test]
    fn identity_operator_zeroes_one_coordinate() {
        let spec = CosparseSpec {
            cosparsity: 1,
            noise_sigma: 0.0,
            count: 50,
            seed: 1,
        };
        let set = generate_cosparse(&identity_op(5), &spec).unwrap();
        for s in set.samples() {
            let zeros = s.iter().filter(|x| x.abs() < 1e-12).count();
            assert!(zeros >= 1);
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_ground_truth_cosparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = AnalysisOperator::random(&[(4, 3), (4, 3)], &mut rng).unwrap();
        let spec = CosparseSpec {
            cosparsity: 4,
            noise_sigma: 0.0,
            count: 200,
            seed: 9,
        };
        let set = generate_cosparse(&op, &spec).unwrap();
        assert_eq!(set.mode_sizes(), &[3, 3]);
        for s in set.samples() {
            let a = op.analyze(s).unwrap();
            assert!(a.iter().filter(|x| x.abs() < 1e-10).count() >= 4);
        }
    }

    #[test]
    fn deterministic_and_noisy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = AnalysisOperator::random(&[(6, 4)], &mut rng).unwrap();
        let spec = CosparseSpec {
            cosparsity: 2,
            noise_sigma: 0.05,
            count: 20,
            seed: 4,
        };
        let a = generate_cosparse(&op, &spec).unwrap();
        let b = generate_cosparse(&op, &spec).unwrap();
        assert_eq!(a, b);
        // noise pushes samples off the unit sphere
        assert!(a
            .samples()
            .any(|s| (s.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() > 1e-6));
    }

    #[test]
    fn invalid_cosparsity_is_rejected() {
        let op = identity_op(3);
        let mut spec = CosparseSpec {
            cosparsity: 3,
            noise_sigma: 0.0,
            count: 1,
            seed: 0,
        };
        assert!(generate_cosparse(&op, &spec).is_err());
        spec.cosparsity = 0;
        assert!(generate_cosparse(&op, &spec).is_err());
    }

    #[test]
    fn dependent_rows_have_no_basis() {
        let k = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(null_space_basis(&k, &[0, 1]).is_none());
        let b = null_space_basis(&k, &[0, 2]).unwrap();
        assert_eq!(b.rows(), 1);
        assert!((b[(0, 2)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn persistent_rank_failure_is_reported() {
        // every pair of rows is identical, so no 2-row subset has full rank
        let row = [0.6, 0.8, 0.0];
        let k = DenseMatrix::from_rows(&[row, row, row]);
        let op = AnalysisOperator::new(vec![ObliquePoint::new(k).unwrap()]).unwrap();
        let spec = CosparseSpec {
            cosparsity: 2,
            noise_sigma: 0.0,
            count: 1,
            seed: 0,
        };
        assert!(matches!(generate_cosparse(&op, &spec), Err(Error::Degenerate(_))));
    }
}
