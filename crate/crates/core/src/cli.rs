//! Command-line surface.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use chrono::{SecondsFormat, TimeZone, Utc};
use clap::{ArgGroup, Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{complexity_bound, confusion_matrix, hungarian_min_assignment, BoundInputs};
use crate::imaging::{self, DenoiseConfig};
use crate::io::{self as fio, OperatorMetadata};
use crate::objective::ObjectiveParams;
use crate::oblique::AnalysisOperator;
use crate::synthetic::{generate_cosparse, CosparseSpec};
use crate::trainer::{self, ArmijoConfig, TrainerConfig};

#[derive(Debug, Parser)]
#[command(name = "saol", version, about = "Separable analysis operator learning")]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw co-sparse signals from a ground-truth operator.
    Generate(GenerateArgs),
    /// Sample normalized training patches from PGM images.
    ExtractPatches(ExtractArgs),
    /// Learn an operator with geometric SGD.
    Train(TrainArgs),
    /// Score a learned operator against the ground truth.
    RecoverEval(RecoverArgs),
    /// Evaluate the sample-complexity bound.
    Bound(BoundArgs),
    /// Denoise a PGM image with a learned operator.
    Denoise(DenoiseArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub cosparsity: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub patch: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `8x7,8x7` into factor dimensions.
pub fn parse_dims(s: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    s.split(',')
        .map(|f| {
            let (m, p) = f
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| format!("expected MxP, got {f:?}"))?;
            let m: usize = m.parse().map_err(|_| format!("bad row count in {f:?}"))?;
            let p: usize = p.parse().map_err(|_| format!("bad column count in {f:?}"))?;
            if m == 0 || p == 0 {
                return Err(format!("zero dimension in {f:?}"));
            }
            Ok((m, p))
        })
        .collect()
}

/// Comma-separated factor sizes as one argument value.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorDims(pub Vec<(usize, usize)>);

fn parse_factor_dims(s: &str) -> std::result::Result<FactorDims, String> {
    parse_dims(s).map(FactorDims)
}

fn parse_single_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    match parse_dims(s)?.as_slice() {
        [d] => Ok(*d),
        _ => Err(format!("expected a single MxP, got {s:?}")),
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("shape").required(true).args(["factors", "dense"])))]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Separable factor sizes, e.g. 8x7,8x7.
    #[arg(long, value_parser = parse_factor_dims)]
    pub factors: Option<FactorDims>,
    /// Unstructured operator size, e.g. 64x49.
    #[arg(long, value_parser = parse_single_dims)]
    pub dense: Option<(usize, usize)>,
    #[arg(long, default_value_t = ObjectiveParams::PAPER_NU)]
    pub nu: f64,
    #[arg(long, default_value_t = ObjectiveParams::PAPER_KAPPA)]
    pub kappa: f64,
    #[arg(long, default_value_t = ObjectiveParams::PAPER_MU)]
    pub mu: f64,
    #[arg(long, default_value_t = TrainerConfig::PAPER_BATCH)]
    pub batch: usize,
    #[arg(long, default_value_t = ArmijoConfig::DEFAULT_INITIAL_STEP)]
    pub a0: f64,
    #[arg(long = "armijo-b", default_value_t = ArmijoConfig::PAPER_SHRINK)]
    pub armijo_b: f64,
    #[arg(long = "armijo-c", default_value_t = ArmijoConfig::PAPER_SLOPE)]
    pub armijo_c: f64,
    #[arg(long, default_value_t = ArmijoConfig::PAPER_MAX_TRIALS)]
    pub kmax: usize,
    #[arg(long, default_value_t = TrainerConfig::PAPER_AVG_WINDOW)]
    pub window: usize,
    #[arg(long = "stop-window", default_value_t = TrainerConfig::PAPER_STOP_WINDOW)]
    pub stop_window: usize,
    #[arg(long = "stop-tol", default_value_t = TrainerConfig::PAPER_STOP_TOL)]
    pub stop_tol: f64,
    #[arg(long = "max-iters", default_value_t = TrainerConfig::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

impl TrainArgs {
    pub fn dims(&self) -> Vec<(usize, usize)> {
        match (&self.factors, self.dense) {
            (Some(f), _) => f.0.clone(),
            (None, Some(d)) => vec![d],
            (None, None) => unreachable!("clap enforces one of --factors/--dense"),
        }
    }

    pub fn config(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.batch,
            objective: ObjectiveParams {
                nu: self.nu,
                kappa: self.kappa,
                mu: self.mu,
            },
            armijo: ArmijoConfig {
                initial_step: self.a0,
                shrink: self.armijo_b,
                slope: self.armijo_c,
                max_trials: self.kmax,
            },
            avg_window: self.window,
            stop_window: self.stop_window,
            stop_tol: self.stop_tol,
            max_iters: self.max_iters,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[arg(long)]
    pub learned: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("shape").required(true).multiple(true).args(["factors", "dense"])))]
pub struct BoundArgs {
    #[arg(long, value_parser = parse_factor_dims)]
    pub factors: Option<FactorDims>,
    #[arg(long, value_parser = parse_single_dims)]
    pub dense: Option<(usize, usize)>,
    /// Lipschitz constant of the sparsity measure.
    #[arg(long)]
    pub lambda: f64,
    #[arg(long)]
    pub samples: u64,
    #[arg(long)]
    pub delta: f64,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub op: PathBuf,
    #[arg(long, default_value_t = 0.40)]
    pub tau: f64,
    #[arg(long = "huber-mu", default_value_t = 0.01)]
    pub huber_mu: f64,
    #[arg(long = "max-iters", default_value_t = 300)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Clean reference image; prints PSNR before and after.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

/// Process exit status for a failed command: 1 for bad arguments, 3 for
/// numerical failures, 2 for everything data- or file-related.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        _ if err.is_numerical() => 3,
        Error::InvalidParameter(_) => 1,
        _ => 2,
    }
}

/// Creation stamp for output files; honors `SOURCE_DATE_EPOCH`.
pub fn timestamp() -> String {
    let now = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<i64>().ok())
        .and_then(|secs| Utc.timestamp_opt(secs, 0).single())
        .unwrap_or_else(Utc::now);
    now.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn run<W: Write>(cli: Cli, out: &mut W) -> Result<()> {
    let wr = |e: std::io::Error| Error::io("<stdout>", e);
    match cli.command {
        Command::Generate(a) => {
            let (gt, _) = fio::load_operator(&a.gt)?;
            let spec = CosparseSpec {
                cosparsity: a.cosparsity,
                noise_sigma: a.sigma,
                count: a.count,
                seed: a.seed,
            };
            let set = generate_cosparse(&gt, &spec)?;
            fio::save_dataset(&a.out, &set)?;
            writeln!(out, "wrote {} samples of shape {:?} to {}", set.len(), set.mode_sizes(), a.out.display())
                .map_err(wr)?;
        }
        Command::ExtractPatches(a) => {
            let images = a
                .images
                .iter()
                .map(|p| imaging::read_pgm(p))
                .collect::<Result<Vec<_>>>()?;
            let set = imaging::extract_patches(&images, a.patch, a.count, a.seed)?;
            fio::save_dataset(&a.out, &set)?;
            writeln!(out, "wrote {} patches of size {}x{} to {}", set.len(), a.patch, a.patch, a.out.display())
                .map_err(wr)?;
        }
        Command::Train(a) => train(&a, out)?,
        Command::RecoverEval(a) => {
            let (learned, _) = fio::load_operator(&a.learned)?;
            let (gt, _) = fio::load_operator(&a.gt)?;
            let c = confusion_matrix(&learned, &gt)?;
            let assignment = hungarian_min_assignment(c.matrix())?;
            writeln!(out, "H(C) = {:.6}", assignment.cost).map_err(wr)?;
            let pairs: Vec<String> = assignment
                .permutation
                .iter()
                .enumerate()
                .map(|(i, j)| format!("{i}->{j}"))
                .collect();
            writeln!(out, "permutation (learned->gt): {}", pairs.join(" ")).map_err(wr)?;
        }
        Command::Bound(a) => {
            let mut cases = Vec::new();
            if let Some(f) = &a.factors {
                cases.push(("separable", f.0.clone(), f.0.len() > 1));
            }
            if let Some(d) = a.dense {
                cases.push(("dense", vec![d], false));
            }
            for (name, dims, separable) in cases {
                let b = complexity_bound(&BoundInputs {
                    factor_dims: dims,
                    lipschitz: a.lambda,
                    samples: a.samples,
                    delta: a.delta,
                    separable,
                })?;
                writeln!(
                    out,
                    "{name}: C = {:.3}  eta = {:.6e}  estimation error <= {:.6e}",
                    b.constant,
                    b.eta,
                    b.estimation_error()
                )
                .map_err(wr)?;
            }
        }
        Command::Denoise(a) => {
            let noisy = imaging::read_pgm(&a.image)?;
            let (op, _) = fio::load_operator(&a.op)?;
            let cfg = DenoiseConfig {
                tau: a.tau,
                huber_mu: a.huber_mu,
                max_iters: a.max_iters,
                tol: a.tol,
            };
            let report = imaging::denoise(&noisy, &op, &cfg)?;
            imaging::write_pgm(&a.out, &report.image)?;
            writeln!(out, "iterations: {}", report.iterations).map_err(wr)?;
            if let Some(r) = &a.reference {
                let clean = imaging::read_pgm(r)?;
                let before = imaging::psnr(&noisy, &clean)?;
                let after = imaging::psnr(&report.image, &clean)?;
                writeln!(out, "PSNR input: {before:.2} dB  output: {after:.2} dB").map_err(wr)?;
            }
        }
    }
    Ok(())
}

fn train<W: Write>(a: &TrainArgs, out: &mut W) -> Result<()> {
    let signals = fio::load_dataset(&a.data)?;
    let config = a.config();
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    // keep the initialization independent of the batch stream
    rng.set_stream(1);
    let init = AnalysisOperator::random(&a.dims(), &mut rng)?;
    let mut log = match &a.log {
        Some(p) => Some((BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?), p)),
        None => None,
    };
    let mut log_err = None;
    let report = trainer::train_with_observer(&signals, init, &config, |rec, _| {
        if let Some((w, p)) = log.as_mut() {
            if log_err.is_none() {
                let line = serde_json::to_string(rec).expect("log records serialize");
                if let Err(e) = writeln!(w, "{line}") {
                    log_err = Some(Error::io(p.as_path(), e));
                }
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let meta = OperatorMetadata {
        nu: a.nu,
        kappa: a.kappa,
        mu: a.mu,
        seed: a.seed,
        iterations: report.iterations,
        created: timestamp(),
    };
    fio::save_operator(&a.out, &report.operator, Some(&meta))?;
    writeln!(
        out,
        "iterations: {}  termination: {:?}  accepted: {}  failed searches: {}",
        report.iterations, report.termination, report.counters.accepted_steps, report.counters.failed_searches
    )
    .map_err(|e| Error::io("<stdout>", e))?;
    if let Some(last) = report.log.last() {
        writeln!(out, "final averaged cost: {:.6}", last.fbar).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}
