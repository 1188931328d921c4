//! Desk-scale operator recovery: separable vs. unstructured learning.
//!
//! `cargo run --release --example recovery -- [seed]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saol::evaluation::recovery_error;
use saol::oblique::AnalysisOperator;
use saol::synthetic::{generate_cosparse, CosparseSpec};
use saol::trainer::{train, TrainerConfig};

fn main() -> saol::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = AnalysisOperator::random(&[(4, 3), (4, 3)], &mut rng)?;
    let signals = generate_cosparse(
        &gt,
        &CosparseSpec {
            cosparsity: 4,
            noise_sigma: 0.05,
            count: 20_000,
            seed: seed + 1000,
        },
    )?;
    for dims in [vec![(4, 3), (4, 3)], vec![(16, 9)]] {
        let init = AnalysisOperator::random(&dims, &mut ChaCha8Rng::seed_from_u64(seed + 2000))?;
        let config = TrainerConfig {
            batch_size: 100,
            max_iters: 30_000,
            seed: seed + 3000,
            ..TrainerConfig::default()
        };
        let start = Instant::now();
        let report = train(&signals, init, &config)?;
        println!(
            "{dims:?}: H(C) = {:.4}, iterations = {}, {:?}, accepted = {}, failed = {}, {:.1}s",
            recovery_error(&report.operator, &gt)?,
            report.iterations,
            report.termination,
            report.counters.accepted_steps,
            report.counters.failed_searches,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
