//! Geometric stochastic gradient descent with an averaging Armijo line search.
//!
//! Each iteration draws a batch, projects the Euclidean gradient onto the
//! tangent space of the product of oblique manifolds, and backtracks along
//! the geodesic `Γ(Ω, −G, a)` until the sliding-window average of accepted
//! batch costs satisfies
//!
//! ```text
//! f̄(Γ(Ω_i, −G, a), s_k(i)) ≤ f̄(Ω_i, s_k(i−1)) − a · c · ‖G‖²_F
//! ```
//!
//! Training stops once the running mean of all batch costs `φ_i` stops
//! moving relative to its own recent average.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{batch_cost, cost_and_gradient, ObjectiveParams, SignalSet};
use crate::oblique::{AnalysisOperator, TangentDirection};

/// Backtracking parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmijoConfig {
    /// Initial (and maximal) step length `a⁰`.
    pub initial_step: f64,
    /// Shrink factor `b ∈ (0, 1)`.
    pub shrink: f64,
    /// Sufficient-decrease slope `c ∈ (0, 1)`.
    pub slope: f64,
    /// Maximum number of trial steps `k_max`.
    pub max_trials: usize,
}

impl ArmijoConfig {
    pub const PAPER_SHRINK: f64 = 0.9;
    pub const PAPER_SLOPE: f64 = 1e-4;
    pub const PAPER_MAX_TRIALS: usize = 40;
    pub const DEFAULT_INITIAL_STEP: f64 = 0.1;
}

impl Default for ArmijoConfig {
    fn default() -> Self {
        Self {
            initial_step: Self::DEFAULT_INITIAL_STEP,
            shrink: Self::PAPER_SHRINK,
            slope: Self::PAPER_SLOPE,
            max_trials: Self::PAPER_MAX_TRIALS,
        }
    }
}

/// All hyperparameters of the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub objective: ObjectiveParams,
    pub armijo: ArmijoConfig,
    /// Sliding window length `w` for the averaged cost.
    pub avg_window: usize,
    /// Number `l` of running means averaged by the stopping rule.
    pub stop_window: usize,
    /// Stopping threshold `δ` on the relative variation.
    pub stop_tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl TrainerConfig {
    pub const PAPER_BATCH: usize = 500;
    pub const PAPER_AVG_WINDOW: usize = 2000;
    pub const PAPER_STOP_WINDOW: usize = 200;
    pub const PAPER_STOP_TOL: f64 = 5e-5;
    pub const DEFAULT_MAX_ITERS: usize = 100_000;

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        let a = &self.armijo;
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(a.initial_step > 0.0 && a.initial_step.is_finite()) {
            return bad(format!("initial step must be > 0, got {}", a.initial_step));
        }
        if !(a.shrink > 0.0 && a.shrink < 1.0) {
            return bad(format!("armijo shrink must lie in (0,1), got {}", a.shrink));
        }
        if !(a.slope > 0.0 && a.slope < 1.0) {
            return bad(format!("armijo slope must lie in (0,1), got {}", a.slope));
        }
        if a.max_trials == 0 || self.avg_window == 0 || self.stop_window == 0 || self.batch_size == 0
        {
            return bad("batch size, k_max, and window lengths must be at least 1".into());
        }
        if !(self.stop_tol >= 0.0) {
            return bad(format!("stop tolerance must be >= 0, got {}", self.stop_tol));
        }
        Ok(())
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: Self::PAPER_BATCH,
            objective: ObjectiveParams::default(),
            armijo: ArmijoConfig::default(),
            avg_window: Self::PAPER_AVG_WINDOW,
            stop_window: Self::PAPER_STOP_WINDOW,
            stop_tol: Self::PAPER_STOP_TOL,
            max_iters: Self::DEFAULT_MAX_ITERS,
            seed: 0,
        }
    }
}

/// Draws `size` indices from `0..n` uniformly with replacement.
pub fn sample_batch<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<usize> {
    assert!(n >= 1, "cannot sample from an empty signal set");
    (0..size).map(|_| rng.gen_range(0..n)).collect()
}

/// Projected (Riemannian) gradient of the mean batch cost.
pub fn riemannian_gradient(
    op: &AnalysisOperator,
    batch: &[&[f64]],
    params: &ObjectiveParams,
) -> Result<TangentDirection> {
    let eval = cost_and_gradient(op, batch, params)?;
    op.project(&eval.grads)
}

/// Fixed-length window of recent batch costs.
#[derive(Clone, Debug)]
pub struct SlidingWindow {
    buf: VecDeque<f64>,
    cap: usize,
}

impl SlidingWindow {
    pub fn new(cap: usize) -> Self {
        assert!(cap >= 1);
        Self {
            buf: VecDeque::with_capacity(cap),
            cap,
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    /// Mean of the current contents (NaN when empty).
    pub fn mean(&self) -> f64 {
        self.buf.iter().sum::<f64>() / self.buf.len() as f64
    }

    /// Mean the window would have after pushing `candidate`.
    pub fn mean_with(&self, candidate: f64) -> f64 {
        let skip = usize::from(self.buf.len() == self.cap);
        let n = self.buf.len() - skip + 1;
        let sum: f64 = self.buf.iter().skip(skip).chain(std::iter::once(&candidate)).sum();
        sum / n as f64
    }

    /// Pushes `cost`, evicting the oldest entry when full, and returns the new mean.
    pub fn push(&mut self, cost: f64) -> f64 {
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back(cost);
        self.mean()
    }
}

/// Pushes a cost into the window and returns the updated average `f̄`.
pub fn sliding_average_update(window: &mut SlidingWindow, cost: f64) -> f64 {
    window.push(cost)
}

/// Tracks the running mean `φ_i` of all recorded batch costs and its last
/// `l` values.
#[derive(Clone, Debug)]
pub struct StoppingMonitor {
    total: f64,
    count: usize,
    phis: VecDeque<f64>,
    window: usize,
    tol: f64,
}

/// Outcome of one stopping test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopCheck {
    /// Relative variation `v`, absent until `l` values of `φ` exist.
    pub variation: Option<f64>,
    pub stop: bool,
}

impl StoppingMonitor {
    pub fn new(window: usize, tol: f64) -> Self {
        assert!(window >= 1);
        Self {
            total: 0.0,
            count: 0,
            phis: VecDeque::with_capacity(window),
            window,
            tol,
        }
    }

    /// Records one batch cost and returns the new `φ_i`.
    pub fn record(&mut self, cost: f64) -> f64 {
        self.total += cost;
        self.count += 1;
        let phi = self.total / self.count as f64;
        if self.phis.len() == self.window {
            self.phis.pop_front();
        }
        self.phis.push_back(phi);
        phi
    }

    pub fn phi(&self) -> Option<f64> {
        self.phis.back().copied()
    }

    pub fn check(&self) -> StopCheck {
        stopping_check(self)
    }
}

/// `v = |φ_i − φ̄_i| / φ̄_i` over the last `l` running means; stops when
/// `v < δ` or when `φ̄_i` is zero.
pub fn stopping_check(monitor: &StoppingMonitor) -> StopCheck {
    if monitor.phis.len() < monitor.window {
        return StopCheck {
            variation: None,
            stop: false,
        };
    }
    let phi = *monitor.phis.back().expect("window is nonempty");
    let mean = monitor.phis.iter().sum::<f64>() / monitor.phis.len() as f64;
    if mean == 0.0 {
        return StopCheck {
            variation: Some(0.0),
            stop: true,
        };
    }
    let v = (phi - mean).abs() / mean.abs();
    StopCheck {
        variation: Some(v),
        stop: v < monitor.tol,
    }
}

/// Result of one backtracking search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearch {
    pub accepted: bool,
    /// Last tried step length.
    pub step: f64,
    /// Number of cost evaluations.
    pub trials: usize,
    /// Batch cost at the accepted point (last trial on failure).
    pub cost: f64,
    /// Window average including `cost`.
    pub fbar: f64,
}

/// Averaging Armijo backtracking.
///
/// `trial_cost(a)` returns the batch cost of the point reached with step `a`.
/// Starting from `initial_step`, the step is multiplied by `shrink` until
/// `window.mean_with(cost) ≤ window.mean() − a·c·grad_norm_sq` or
/// `max_trials` evaluations have been spent. The window is not modified.
pub fn armijo_search<F>(
    window: &SlidingWindow,
    initial_step: f64,
    grad_norm_sq: f64,
    cfg: &ArmijoConfig,
    mut trial_cost: F,
) -> Result<LineSearch>
where
    F: FnMut(f64) -> Result<f64>,
{
    let reference = window.mean();
    let mut a = initial_step;
    let mut trials = 0;
    loop {
        let cost = trial_cost(a)?;
        trials += 1;
        let fbar = window.mean_with(cost);
        let accepted = fbar <= reference - a * cfg.slope * grad_norm_sq;
        if accepted || trials >= cfg.max_trials {
            return Ok(LineSearch {
                accepted,
                step: a,
                trials,
                cost,
                fbar,
            });
        }
        a *= cfg.shrink;
    }
}

/// Per-iteration log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Batch cost recorded for this iteration (new operator on success,
    /// unchanged operator on a failed search).
    pub batch_cost: f64,
    /// Window average before the step.
    pub fbar_before: f64,
    /// Window average after recording `batch_cost`.
    pub fbar: f64,
    /// Accepted step length, zero when the search failed.
    pub step: f64,
    pub trials: usize,
    pub accepted: bool,
    /// `‖G‖²_F` of the search direction.
    pub grad_norm_sq: f64,
    pub phi: f64,
    /// Stopping statistic `v`, absent during the first `l − 1` iterations.
    pub v: Option<f64>,
}

impl IterationRecord {
    /// Re-evaluates the sufficient-decrease test from the logged numbers.
    pub fn satisfies_armijo(&self, slope: f64) -> bool {
        self.fbar <= self.fbar_before - self.step * slope * self.grad_norm_sq
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainCounters {
    pub accepted_steps: usize,
    pub failed_searches: usize,
    /// Row pairs clamped in the incoherence penalty, summed over accepted points.
    pub clamped_pairs: usize,
}

/// Mutable state of the SGD loop.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub op: AnalysisOperator,
    pub iter: usize,
    /// Initial step `a_i⁰` for the next search.
    pub next_step: f64,
    pub window: SlidingWindow,
    pub monitor: StoppingMonitor,
    pub counters: TrainCounters,
}

impl TrainState {
    pub fn new(op: AnalysisOperator, config: &TrainerConfig) -> Self {
        Self {
            op,
            iter: 0,
            next_step: config.armijo.initial_step,
            window: SlidingWindow::new(config.avg_window),
            monitor: StoppingMonitor::new(config.stop_window, config.stop_tol),
            counters: TrainCounters::default(),
        }
    }

    /// Seeds the cost window so the first sufficient-decrease test has a reference.
    pub fn warm_up(&mut self, batch: &[&[f64]], params: &ObjectiveParams) -> Result<()> {
        let c = batch_cost(&self.op, batch, params)?;
        self.window.push(c.cost);
        Ok(())
    }

    /// Runs the line search along `−direction` on `batch`, updating the
    /// operator, window, and step seed. The operator is untouched on failure.
    pub fn line_search(
        &mut self,
        direction: &TangentDirection,
        batch: &[&[f64]],
        params: &ObjectiveParams,
        cfg: &ArmijoConfig,
    ) -> Result<LineSearch> {
        let descent = direction.negated();
        let mut last: Option<(AnalysisOperator, usize)> = None;
        let op = &self.op;
        let ls = armijo_search(
            &self.window,
            self.next_step,
            direction.norm_sq(),
            cfg,
            |a| {
                let candidate = op.geodesic_step(&descent, a);
                let c = batch_cost(&candidate, batch, params)?;
                last = Some((candidate, c.clamped));
                Ok(c.cost)
            },
        )?;
        if ls.accepted {
            let (candidate, clamped) = last.expect("at least one trial ran");
            self.op = candidate;
            self.window.push(ls.cost);
            self.next_step = (ls.step / cfg.shrink).min(cfg.initial_step);
            self.counters.accepted_steps += 1;
            self.counters.clamped_pairs += clamped;
        } else {
            self.next_step = cfg.initial_step;
            self.counters.failed_searches += 1;
        }
        Ok(ls)
    }

    /// One full SGD iteration on `batch`.
    pub fn iterate(&mut self, batch: &[&[f64]], config: &TrainerConfig) -> Result<(IterationRecord, bool)> {
        let params = &config.objective;
        let eval = cost_and_gradient(&self.op, batch, params)?;
        let direction = self.op.project(&eval.grads)?;
        let grad_norm_sq = direction.norm_sq();
        let fbar_before = self.window.mean();

        let (batch_cost, step, trials, accepted, fbar) = if grad_norm_sq > 0.0 {
            let ls = self.line_search(&direction, batch, params, &config.armijo)?;
            if ls.accepted {
                (ls.cost, ls.step, ls.trials, true, ls.fbar)
            } else {
                let fbar = self.window.push(eval.cost);
                (eval.cost, 0.0, ls.trials, false, fbar)
            }
        } else {
            // stationary point: nothing to search along
            let fbar = self.window.push(eval.cost);
            (eval.cost, 0.0, 0, false, fbar)
        };

        let phi = self.monitor.record(batch_cost);
        let check = self.monitor.check();
        let record = IterationRecord {
            iter: self.iter,
            batch_cost,
            fbar_before,
            fbar,
            step,
            trials,
            accepted,
            grad_norm_sq,
            phi,
            v: check.variation,
        };
        self.iter += 1;
        Ok((record, check.stop))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub operator: AnalysisOperator,
    pub iterations: usize,
    pub termination: Termination,
    pub log: Vec<IterationRecord>,
    pub counters: TrainCounters,
}

/// Trains `init` on `signals`.
pub fn train(signals: &SignalSet, init: AnalysisOperator, config: &TrainerConfig) -> Result<TrainReport> {
    train_with_observer(signals, init, config, |_, _| {})
}

/// Like [`train`], calling `observer` after every iteration with the log
/// entry and the current operator.
pub fn train_with_observer<F>(
    signals: &SignalSet,
    init: AnalysisOperator,
    config: &TrainerConfig,
    mut observer: F,
) -> Result<TrainReport>
where
    F: FnMut(&IterationRecord, &AnalysisOperator),
{
    config.validate()?;
    if signals.dim() != init.cols() {
        return Err(Error::dims("train: signal length", init.cols(), signals.dim()));
    }
    let mut state = TrainState::new(init, config);
    let mut log = Vec::new();
    let mut termination = Termination::MaxIters;
    if config.max_iters > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = signals.len();
        let mut indices = sample_batch(n, config.batch_size, &mut rng);
        state
            .warm_up(&signals.batch(&indices), &config.objective)
            .map_err(|e| Error::Training {
                iteration: 0,
                source: Box::new(e),
            })?;
        for i in 0..config.max_iters {
            if i > 0 {
                indices = sample_batch(n, config.batch_size, &mut rng);
            }
            let batch = signals.batch(&indices);
            let (record, stop) = state.iterate(&batch, config).map_err(|e| Error::Training {
                iteration: i,
                source: Box::new(e),
            })?;
            observer(&record, &state.op);
            log.push(record);
            if stop {
                termination = Termination::Converged;
                break;
            }
        }
    }
    Ok(TrainReport {
        iterations: log.len(),
        operator: state.op,
        termination,
        log,
        counters: state.counters,
    })
}
