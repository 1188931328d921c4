use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::evaluation::hungarian_min_assignment;
use crate::io::{operator_from_json, operator_to_json};
use crate::oblique::{project_to_tangent, random_oblique, AnalysisOperator};
use crate::tensor::{mode_fold, mode_unfold, unvec, vec, DenseMatrix, DenseTensor};

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vec_unvec_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let t = DenseTensor::new(shape.clone(), gaussian(&mut rng, n)).unwrap();
        prop_assert_eq!(unvec(&vec(&t), &shape).unwrap(), t);
    }

    #[test]
    fn unfold_fold_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let t = DenseTensor::new(shape.clone(), gaussian(&mut rng, n)).unwrap();
        for mode in 0..shape.len() {
            let m = mode_unfold(&t, mode).unwrap();
            prop_assert_eq!(mode_fold(&m, &shape, mode).unwrap(), t.clone());
        }
    }

    #[test]
    fn tangent_projection_is_idempotent(m in 1usize..7, p in 1usize..7, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_oblique(m, p, &mut rng).unwrap();
        let g = DenseMatrix::new(m, p, gaussian(&mut rng, m * p)).unwrap();
        let once = project_to_tangent(&x, &g).unwrap();
        let twice = project_to_tangent(&x, &once).unwrap();
        prop_assert!(once.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn hungarian_cost_never_exceeds_identity(n in 1usize..9, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DenseMatrix::new(n, n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let a = hungarian_min_assignment(&c).unwrap();
        let diag: f64 = (0..n).map(|i| c[(i, i)]).sum();
        prop_assert!(a.cost <= diag + 1e-12);
        let mut seen = a.permutation.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn operator_json_round_trip_is_exact(m in 1usize..5, p in 1usize..5, two in any::<bool>(), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = if two { vec![(m, p), (p, m)] } else { vec![(m, p)] };
        let op = AnalysisOperator::random(&dims, &mut rng).unwrap();
        let (back, _) = operator_from_json(&operator_to_json(&op, None).unwrap(), std::path::Path::new("x")).unwrap();
        prop_assert_eq!(back.composed(), op.composed());
    }
}
