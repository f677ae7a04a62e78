//! Euler-Maruyama simulation of the N-particle controlled McKean-Vlasov
//! system, empirical-measure statistics, and the strong-error rate
//! experiment.
//!
//! The discrete dynamics are
//!
//! ```text
//! X^i_{n+1} = X^i_n + b(t_n, X^i_n, mu_n, alpha^i_n) dt
//!                   + vol(t_n, X^i_n, mu_n) dW^i_n
//! ```
//!
//! with `mu_n` recomputed from the current ensemble at every step (states at
//! `t_n`, before the update). The sampled objective accumulates
//! `dt * mean_i f(t_n, ...)` per step plus `mean_i g(X_T, mu_T)` at the end.
//!
//! With two-point-jump common noise one scenario is drawn per rollout, so
//! conditional expectations given the common noise are realized as the
//! rollout's population statistics. With correlated-Brownian common noise the
//! increment driving particle i is `rho dW0 + sqrt(1 - rho^2) dW^i`.
//!
//! Rollouts are fully determined by (model, control parameters, seed, grid,
//! N). Taped rollouts are single-threaded per tape; independent rollouts may
//! run concurrently.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Scalar;
use crate::model::{CnState, CommonNoiseSpec, MeasureStats, Model};
use crate::util::fmt_f64;

/// States above this magnitude abort the rollout instead of letting
/// infinities propagate into the tape.
pub const DIVERGENCE_GUARD: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    BadGrid(String),
    SizeMismatch { expected: usize, got: usize },
    /// First non-finite or out-of-range state, with its location.
    Divergence { step: usize, particle: usize, value: f64 },
    CommonNoiseMismatch(String),
    BadRefinement { factor: usize },
    Io(String),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::BadGrid(msg) => write!(f, "bad time grid: {msg}"),
            SimError::SizeMismatch { expected, got } => {
                write!(f, "size mismatch: expected {expected}, got {got}")
            }
            SimError::Divergence {
                step,
                particle,
                value,
            } => write!(
                f,
                "state diverged at step {step}, particle {particle} (value {value:e})"
            ),
            SimError::CommonNoiseMismatch(msg) => write!(f, "common-noise mismatch: {msg}"),
            SimError::BadRefinement { factor } => {
                write!(f, "refinement factor must be >= 2, got {factor}")
            }
            SimError::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

/// Uniform grid `t_n = n dt` on `[0, T]` with `dt = T / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, SimError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SimError::BadGrid(format!("horizon must be > 0, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(SimError::BadGrid("need at least one step".into()));
        }
        let g = TimeGrid { horizon, n_steps };
        debug_assert!((g.dt() * n_steps as f64 - horizon).abs() <= 1e-12 * horizon);
        Ok(g)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }
}

/// N particle states at one time index, flattened `n x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub states: Vec<f64>,
    pub n: usize,
    pub dim: usize,
}

impl Ensemble {
    pub fn new(states: Vec<f64>, n: usize, dim: usize) -> Result<Self, SimError> {
        if states.len() != n * dim || n == 0 {
            return Err(SimError::SizeMismatch {
                expected: n * dim,
                got: states.len(),
            });
        }
        Ok(Ensemble { states, n, dim })
    }

    /// Draws `n` i.i.d. initial states from the model's mu_0.
    pub fn sample_x0<M: Model>(model: &M, n: usize, seed: u64) -> Self {
        let dim = model.dim_x();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut states = vec![0.0; n * dim];
        for i in 0..n {
            model.sample_x0(&mut rng, &mut states[i * dim..(i + 1) * dim]);
        }
        Ensemble { states, n, dim }
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }
}

/// Realized common-noise path for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub enum CommonPath {
    None,
    /// The scenario value (+-magnitude) revealed at `jump_time`.
    Jump { jump_time: f64, value: f64 },
    /// Brownian increments of W0, one per step.
    Brownian { increments: Vec<f64>, rho: f64 },
}

/// Idiosyncratic Gaussian increments (variance dt) plus the realized common
/// path; reproducible from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    /// `n_steps x n x dim_w`, step-major.
    pub increments: Vec<f64>,
    pub common: CommonPath,
    pub n_steps: usize,
    pub n: usize,
    pub dim_w: usize,
    pub seed: u64,
}

/// Draws the noise for one rollout. Increments are `N(0, dt)` (standard
/// deviation `sqrt(dt)`, i.e. Brownian increments). For two-point-jump
/// common noise, one scenario in `{-magnitude, +magnitude}` is drawn with
/// probability 1/2 each.
pub fn sample_noise(
    grid: &TimeGrid,
    n: usize,
    dim_w: usize,
    common_spec: &CommonNoiseSpec,
    seed: u64,
) -> Result<NoiseBundle, SimError> {
    if n == 0 {
        return Err(SimError::SizeMismatch { expected: 1, got: 0 });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sqrt_dt = grid.dt().sqrt();
    let mut increments = Vec::with_capacity(grid.n_steps() * n * dim_w);
    for _ in 0..grid.n_steps() * n * dim_w {
        let z: f64 = rng.sample(StandardNormal);
        increments.push(z * sqrt_dt);
    }
    let common = match common_spec {
        CommonNoiseSpec::None => CommonPath::None,
        CommonNoiseSpec::TwoPointJump {
            jump_time,
            magnitude,
        } => {
            if !(*jump_time > 0.0 && *jump_time < grid.horizon()) {
                return Err(SimError::CommonNoiseMismatch(format!(
                    "jump time {jump_time} outside (0, {})",
                    grid.horizon()
                )));
            }
            let up: bool = rng.random();
            CommonPath::Jump {
                jump_time: *jump_time,
                value: if up { *magnitude } else { -*magnitude },
            }
        }
        CommonNoiseSpec::CorrelatedBrownian { rho } => {
            if dim_w != 1 {
                return Err(SimError::CommonNoiseMismatch(
                    "correlated-Brownian common noise supports dim_w = 1".into(),
                ));
            }
            let incs = (0..grid.n_steps())
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * sqrt_dt
                })
                .collect();
            CommonPath::Brownian {
                increments: incs,
                rho: *rho,
            }
        }
    };
    Ok(NoiseBundle {
        increments,
        common,
        n_steps: grid.n_steps(),
        n,
        dim_w,
        seed,
    })
}

impl NoiseBundle {
    #[inline]
    pub fn increment(&self, step: usize, particle: usize, coord: usize) -> f64 {
        self.increments[(step * self.n + particle) * self.dim_w + coord]
    }

    /// Aggregates this bundle onto a grid coarser by `factor`: each coarse
    /// increment is the sum of `factor` consecutive fine increments, so both
    /// grids are driven by the same underlying Brownian paths.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseBundle, SimError> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(SimError::BadRefinement { factor });
        }
        let coarse_steps = self.n_steps / factor;
        let blk = self.n * self.dim_w;
        let mut increments = vec![0.0; coarse_steps * blk];
        for cs in 0..coarse_steps {
            for fs in cs * factor..(cs + 1) * factor {
                for k in 0..blk {
                    increments[cs * blk + k] += self.increments[fs * blk + k];
                }
            }
        }
        let common = match &self.common {
            CommonPath::None => CommonPath::None,
            CommonPath::Jump { jump_time, value } => CommonPath::Jump {
                jump_time: *jump_time,
                value: *value,
            },
            CommonPath::Brownian { increments, rho } => {
                let mut coarse = vec![0.0; coarse_steps];
                for cs in 0..coarse_steps {
                    for fs in cs * factor..(cs + 1) * factor {
                        coarse[cs] += increments[fs];
                    }
                }
                CommonPath::Brownian {
                    increments: coarse,
                    rho: *rho,
                }
            }
        };
        Ok(NoiseBundle {
            increments,
            common,
            n_steps: coarse_steps,
            n: self.n,
            dim_w: self.dim_w,
            seed: self.seed,
        })
    }
}

/// Trajectories, controls and sampled objective of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `(n_steps + 1) x n x dim_x`.
    pub trajectories: Vec<f64>,
    /// `n_steps x n x dim_alpha`.
    pub controls: Vec<f64>,
    pub running_cost_sum: f64,
    pub terminal_cost: f64,
    pub total_cost: f64,
    pub n: usize,
    pub dim_x: usize,
    pub dim_alpha: usize,
    pub n_steps: usize,
}

impl RolloutResult {
    #[inline]
    pub fn state(&self, step: usize, particle: usize, coord: usize) -> f64 {
        self.trajectories[(step * self.n + particle) * self.dim_x + coord]
    }

    #[inline]
    pub fn control(&self, step: usize, particle: usize, coord: usize) -> f64 {
        self.controls[(step * self.n + particle) * self.dim_alpha + coord]
    }

    /// Terminal-slice ensemble.
    pub fn terminal_ensemble(&self) -> Ensemble {
        let start = self.n_steps * self.n * self.dim_x;
        Ensemble {
            states: self.trajectories[start..].to_vec(),
            n: self.n,
            dim: self.dim_x,
        }
    }
}

/// Rollout output in the scalar domain `S`; `total_cost_s` stays on the tape
/// for backpropagation when `S = Var`.
pub struct Rollout<S: Scalar> {
    pub result: RolloutResult,
    pub total_cost_s: S,
}

/// Runs the explicit Euler scheme for every particle under the given
/// feedback control closure. The control receives
/// `(t_n, x^i_n, mu_n, cn_n)` and writes `dim_alpha` values into its output
/// slice. When `S = Var` the whole rollout (including the measure coupling)
/// is recorded on the tape and the returned cost is differentiable with
/// respect to any parameters lifted by the caller.
pub fn rollout<S, M, C>(
    ctx: S::Ctx,
    model: &M,
    control: &mut C,
    ens0: &Ensemble,
    noise: &NoiseBundle,
    grid: &TimeGrid,
) -> Result<Rollout<S>, SimError>
where
    S: Scalar,
    M: Model,
    C: FnMut(f64, &[S], &MeasureStats<S>, &CnState, &mut [S]),
{
    let (n, dim_x, dim_a, dim_w) = (ens0.n, model.dim_x(), model.dim_alpha(), model.dim_w());
    if ens0.dim != dim_x {
        return Err(SimError::SizeMismatch {
            expected: dim_x,
            got: ens0.dim,
        });
    }
    if noise.n != n || noise.n_steps != grid.n_steps() || noise.dim_w != dim_w {
        return Err(SimError::SizeMismatch {
            expected: n * grid.n_steps() * dim_w,
            got: noise.increments.len(),
        });
    }
    check_common_noise(model, noise)?;

    let n_steps = grid.n_steps();
    let dt = grid.dt();

    let mut states: Vec<S> = ens0
        .states
        .iter()
        .map(|v| S::constant(ctx, *v))
        .collect();
    let mut next_states: Vec<S> = states.clone();

    let mut trajectories = Vec::with_capacity((n_steps + 1) * n * dim_x);
    trajectories.extend(ens0.states.iter().copied());
    let mut controls_rec = Vec::with_capacity(n_steps * n * dim_a);

    let mut scratch: Vec<S> = Vec::with_capacity(n);
    let mut alpha: Vec<S> = vec![S::constant(ctx, 0.0); dim_a];
    let mut drift: Vec<S> = vec![S::constant(ctx, 0.0); dim_x];
    let mut vol: Vec<S> = vec![S::constant(ctx, 0.0); dim_x * dim_w];
    let mut step_costs: Vec<S> = Vec::with_capacity(n);

    let mut running = S::constant(ctx, 0.0);

    for step in 0..n_steps {
        let t = grid.time(step);
        let cn = cn_state_at(&noise.common, t);
        let mu = MeasureStats::from_points(&states, n, dim_x, &mut scratch);
        step_costs.clear();
        for i in 0..n {
            let x = &states[i * dim_x..(i + 1) * dim_x];
            control(t, x, &mu, &cn, &mut alpha);
            for a in &alpha {
                controls_rec.push(a.val());
            }
            step_costs.push(model.running_cost(t, x, &mu, &alpha, &cn));
            model.drift(t, x, &mu, &alpha, &cn, &mut drift);
            model.vol(t, x, &mu, &cn, &mut vol);
            for k in 0..dim_x {
                let mut inc = x[k] + drift[k].mul_c(dt);
                for w in 0..dim_w {
                    let dw = mixed_increment(noise, step, i, w);
                    inc = inc + vol[k * dim_w + w].mul_c(dw);
                }
                let v = inc.val();
                if !v.is_finite() || v.abs() > DIVERGENCE_GUARD {
                    return Err(SimError::Divergence {
                        step: step + 1,
                        particle: i,
                        value: v,
                    });
                }
                next_states[i * dim_x + k] = inc;
            }
        }
        let mean_cost = S::mean(&step_costs);
        running = running + mean_cost.mul_c(dt);
        std::mem::swap(&mut states, &mut next_states);
        trajectories.extend(states.iter().map(|s| s.val()));
    }

    let mu_t = MeasureStats::from_points(&states, n, dim_x, &mut scratch);
    let cn_t = cn_state_at(&noise.common, grid.horizon());
    let mut terminal_costs: Vec<S> = Vec::with_capacity(n);
    for i in 0..n {
        let x = &states[i * dim_x..(i + 1) * dim_x];
        terminal_costs.push(model.terminal_cost(x, &mu_t, &cn_t));
    }
    let terminal = S::mean(&terminal_costs);
    let total = running + terminal;

    Ok(Rollout {
        result: RolloutResult {
            trajectories,
            controls: controls_rec,
            running_cost_sum: running.val(),
            terminal_cost: terminal.val(),
            total_cost: total.val(),
            n,
            dim_x,
            dim_alpha: dim_a,
            n_steps,
        },
        total_cost_s: total,
    })
}

fn check_common_noise<M: Model>(model: &M, noise: &NoiseBundle) -> Result<(), SimError> {
    let ok = matches!(
        (model.common_noise(), &noise.common),
        (CommonNoiseSpec::None, CommonPath::None)
            | (CommonNoiseSpec::TwoPointJump { .. }, CommonPath::Jump { .. })
            | (CommonNoiseSpec::CorrelatedBrownian { .. }, CommonPath::Brownian { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(SimError::CommonNoiseMismatch(
            "noise bundle was sampled for a different common-noise spec".into(),
        ))
    }
}

pub(crate) fn cn_state_at(common: &CommonPath, t: f64) -> CnState {
    match common {
        CommonPath::None | CommonPath::Brownian { .. } => CnState::default(),
        CommonPath::Jump { jump_time, value } => CnState {
            eps0: if t >= *jump_time - 1e-12 { *value } else { 0.0 },
        },
    }
}

/// Effective increment driving particle `i` at `step`: the idiosyncratic
/// increment, or the rho-mixture when the bundle carries a common Brownian
/// path.
#[inline]
pub(crate) fn mixed_increment(noise: &NoiseBundle, step: usize, i: usize, coord: usize) -> f64 {
    let dw = noise.increment(step, i, coord);
    match &noise.common {
        CommonPath::Brownian { increments, rho } => {
            rho * increments[step] + (1.0 - rho * rho).sqrt() * dw
        }
        _ => dw,
    }
}

/// Mean and second moment of an ensemble. With common noise all particles of
/// a rollout share one scenario, so this population mean is the conditional
/// mean given that scenario.
pub fn empirical_stats(ens: &Ensemble) -> (Vec<f64>, f64) {
    let mut scratch = Vec::new();
    let stats = MeasureStats::from_points(&ens.states, ens.n, ens.dim, &mut scratch);
    (stats.mean, stats.second_moment)
}

/// Coupled-index upper bound for the 2-Wasserstein distance between the
/// empirical measures of two index-aligned ensembles:
/// `sqrt((1/N) sum_i |x_i - y_i|^2)`.
pub fn w2_upper_bound(a: &Ensemble, b: &Ensemble) -> Result<f64, SimError> {
    if a.n != b.n || a.dim != b.dim {
        return Err(SimError::SizeMismatch {
            expected: a.states.len(),
            got: b.states.len(),
        });
    }
    let mut acc = 0.0;
    for (x, y) in a.states.iter().zip(&b.states) {
        acc += (x - y) * (x - y);
    }
    Ok((acc / a.n as f64).sqrt())
}

/// Result of the Euler strong-error rate experiment.
#[derive(Debug, Clone)]
pub struct StrongErrorResult {
    pub dts: Vec<f64>,
    /// Mean-square terminal gap `(1/N) sum_i |X_i(dt) - X_i(ref)|^2` per dt.
    pub mses: Vec<f64>,
    /// Log-log regression slope of the mean-square gap against dt.
    pub mse_slope: f64,
    /// Slope of the strong (root-mean-square) error, i.e. `mse_slope / 2`.
    pub strong_slope: f64,
}

/// Runs the same control on a ladder of grids driven by shared Brownian
/// increments (coarse increments are sums of fine ones) and measures the
/// terminal mean-square gap to the finest grid, which serves as the
/// reference path. `ref_refine >= 8` keeps the reference error negligible.
#[allow(clippy::too_many_arguments)]
pub fn strong_error_experiment<M, C>(
    model: &M,
    control: &mut C,
    grid_coarse: &TimeGrid,
    refinement_factor: usize,
    n_levels: usize,
    ref_refine: usize,
    n: usize,
    seed: u64,
) -> Result<StrongErrorResult, SimError>
where
    M: Model,
    C: FnMut(f64, &[f64], &MeasureStats<f64>, &CnState, &mut [f64]),
{
    if refinement_factor < 2 {
        return Err(SimError::BadRefinement {
            factor: refinement_factor,
        });
    }
    if n_levels == 0 {
        return Err(SimError::BadGrid("need at least one level".into()));
    }
    let finest_steps =
        grid_coarse.n_steps() * refinement_factor.pow(n_levels as u32 - 1) * ref_refine;
    let ref_grid = TimeGrid::new(grid_coarse.horizon(), finest_steps)?;
    let fine_noise = sample_noise(&ref_grid, n, model.dim_w(), &model.common_noise(), seed)?;
    let ens0 = Ensemble::sample_x0(model, n, seed ^ 0x9e37_79b9_7f4a_7c15);

    let reference = rollout::<f64, _, _>((), model, control, &ens0, &fine_noise, &ref_grid)?;
    let ref_terminal = reference.result.terminal_ensemble();

    let mut dts = Vec::with_capacity(n_levels);
    let mut mses = Vec::with_capacity(n_levels);
    for level in 0..n_levels {
        let steps = grid_coarse.n_steps() * refinement_factor.pow(level as u32);
        let grid = TimeGrid::new(grid_coarse.horizon(), steps)?;
        let noise = fine_noise.coarsen(finest_steps / steps)?;
        let run = rollout::<f64, _, _>((), model, control, &ens0, &noise, &grid)?;
        let gap = w2_upper_bound(&run.result.terminal_ensemble(), &ref_terminal)?;
        dts.push(grid.dt());
        mses.push(gap * gap);
    }

    let mse_slope = log_log_slope(&dts, &mses);
    Ok(StrongErrorResult {
        dts,
        mses,
        mse_slope,
        strong_slope: mse_slope / 2.0,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in lx.iter().zip(&ly) {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    num / den
}

/// Writes trajectories as CSV rows `(step, time, particle, coordinate, value)`.
pub fn dump_trajectories_csv<W: Write>(
    w: &mut W,
    grid: &TimeGrid,
    result: &RolloutResult,
) -> Result<(), SimError> {
    writeln!(w, "step,time,particle,coordinate,value")?;
    for step in 0..=result.n_steps {
        let t = grid.time(step);
        for i in 0..result.n {
            for k in 0..result.dim_x {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    step,
                    fmt_f64(t),
                    i,
                    k,
                    fmt_f64(result.state(step, i, k))
                )?;
            }
        }
    }
    Ok(())
}

/// Equal-width histogram of `values` over `[lo, hi]`; returns bin edges
/// (length `n_bins + 1`) and counts.
pub fn histogram(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<usize>) {
    assert!(n_bins >= 1 && hi > lo);
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0usize; n_bins];
    for v in values {
        if *v < lo || *v > hi {
            continue;
        }
        let mut idx = ((v - lo) / width) as usize;
        if idx >= n_bins {
            idx = n_bins - 1;
        }
        counts[idx] += 1;
    }
    (edges, counts)
}

/// Writes histogram rows `(scenario, bin_left, bin_right, count)`.
pub fn dump_histogram_csv<W: Write>(
    w: &mut W,
    scenarios: &[(String, Vec<f64>, Vec<usize>)],
) -> Result<(), SimError> {
    writeln!(w, "scenario,bin_left,bin_right,count")?;
    for (label, edges, counts) in scenarios {
        for (i, c) in counts.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{}",
                label,
                fmt_f64(edges[i]),
                fmt_f64(edges[i + 1]),
                c
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_lq, CommonNoiseSpec};
    use proptest::prelude::*;

    /// Zero-everything model with configurable drift/vol constants; terminal
    /// cost g(x) = x. Used to pin the Euler recursion itself.
    struct Toy {
        drift: f64,
        vol: f64,
    }

    impl Model for Toy {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_alpha(&self) -> usize {
            1
        }
        fn drift<S: Scalar>(
            &self,
            _t: f64,
            x: &[S],
            _mu: &MeasureStats<S>,
            _alpha: &[S],
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = x[0].constant_like(self.drift);
        }
        fn vol<S: Scalar>(
            &self,
            _t: f64,
            x: &[S],
            _mu: &MeasureStats<S>,
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = x[0].constant_like(self.vol);
        }
        fn running_cost<S: Scalar>(
            &self,
            _t: f64,
            x: &[S],
            _mu: &MeasureStats<S>,
            _alpha: &[S],
            _cn: &CnState,
        ) -> S {
            x[0].constant_like(0.0)
        }
        fn terminal_cost<S: Scalar>(&self, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState) -> S {
            x[0]
        }
        fn sample_x0(&self, _rng: &mut ChaCha12Rng, out: &mut [f64]) {
            out[0] = 2.0;
        }
    }

    fn zero_control(
        _t: f64,
        _x: &[f64],
        _mu: &MeasureStats<f64>,
        _cn: &CnState,
        out: &mut [f64],
    ) {
        out[0] = 0.0;
    }

    #[test]
    fn grid_invariants() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        assert!((g.dt() * 20.0 - 1.0).abs() < 1e-12);
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 5).is_err());
    }

    #[test]
    fn constant_state_rollout() {
        // zero drift, zero vol, f = 0, g(x) = x, single particle at 2
        let m = Toy { drift: 0.0, vol: 0.0 };
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let ens0 = Ensemble::new(vec![2.0], 1, 1).unwrap();
        let noise = sample_noise(&grid, 1, 1, &CommonNoiseSpec::None, 3).unwrap();
        let out = rollout::<f64, _, _>((), &m, &mut zero_control, &ens0, &noise, &grid).unwrap();
        assert_eq!(out.result.total_cost, 2.0);
        for step in 0..=4 {
            assert_eq!(out.result.state(step, 0, 0), 2.0);
        }
    }

    #[test]
    fn constant_drift_is_exact() {
        let m = Toy { drift: 1.0, vol: 0.0 };
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens0 = Ensemble::new(vec![2.0], 1, 1).unwrap();
        let noise = sample_noise(&grid, 1, 1, &CommonNoiseSpec::None, 3).unwrap();
        let out = rollout::<f64, _, _>((), &m, &mut zero_control, &ens0, &noise, &grid).unwrap();
        assert!((out.result.state(16, 0, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lq_zero_control_matches_scalar_recurrence() {
        // sigma = 0, deterministic x0: cost equals the Riemann sum of the
        // quadratic state flow computed by an independent recurrence.
        let m = make_lq(0.5, 0.25, 1.0, 0.3, 0.2, 1.0, 1.0, 0.7, 0.0, 0.0, 0.0, 1.5, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let n = 4;
        let ens0 = Ensemble::new(vec![1.5; n], n, 1).unwrap();
        let noise = sample_noise(&grid, n, 1, &CommonNoiseSpec::None, 9).unwrap();
        let out = rollout::<f64, _, _>((), &m, &mut zero_control, &ens0, &noise, &grid).unwrap();

        // independent scalar recurrence: all particles identical
        let dt = grid.dt();
        let mut x = 1.5f64;
        let mut cost = 0.0;
        for _ in 0..32 {
            // f = q x^2 + qbar (x - s x)^2, v = 0; here s = 1 so tracking term is 0
            cost += dt * (0.3 * x * x + 0.2 * (x - x) * (x - x));
            x += (0.5 * x + 0.25 * x) * dt;
        }
        cost += 0.7 * x * x;
        assert!(
            (out.result.total_cost - cost).abs() < 1e-10,
            "{} vs {cost}",
            out.result.total_cost
        );
    }

    #[test]
    fn objective_decomposition_holds() {
        let m = make_lq(0.5, 0.25, 1.0, 0.3, 0.2, 1.0, 1.0, 0.7, 0.3, 1.0, 0.3, 0.5, 0.3).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let n = 16;
        let ens0 = Ensemble::sample_x0(&m, n, 5);
        let noise = sample_noise(&grid, n, 1, &CommonNoiseSpec::None, 6).unwrap();
        let mut ctl = |_t: f64, x: &[f64], _mu: &MeasureStats<f64>, _cn: &CnState, out: &mut [f64]| {
            out[0] = -0.5 * x[0];
        };
        let out = rollout::<f64, _, _>((), &m, &mut ctl, &ens0, &noise, &grid).unwrap();
        let r = &out.result;
        assert!((r.total_cost - (r.running_cost_sum + r.terminal_cost)).abs() < 1e-10);
        assert!(r.total_cost.is_finite());
    }

    #[test]
    fn sample_noise_is_deterministic_and_has_right_variance() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let a = sample_noise(&grid, 100_000, 1, &CommonNoiseSpec::None, 11).unwrap();
        let b = sample_noise(&grid, 100_000, 1, &CommonNoiseSpec::None, 11).unwrap();
        assert_eq!(a, b);
        let dt = grid.dt();
        let mean: f64 = a.increments.iter().sum::<f64>() / a.increments.len() as f64;
        let var: f64 = a
            .increments
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / a.increments.len() as f64;
        assert!(var > 0.9 * dt && var < 1.1 * dt, "sample variance {var}");
        assert_eq!(a.common, CommonPath::None);
    }

    #[test]
    fn two_point_jump_scenarios_are_symmetric() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let spec = CommonNoiseSpec::TwoPointJump {
            jump_time: 0.5,
            magnitude: 1.5,
        };
        let mut ups = 0;
        for seed in 0..200 {
            let noise = sample_noise(&grid, 2, 1, &spec, seed).unwrap();
            match noise.common {
                CommonPath::Jump { value, .. } => {
                    assert!(value == 1.5 || value == -1.5);
                    if value > 0.0 {
                        ups += 1;
                    }
                }
                _ => panic!(),
            }
        }
        assert!(ups > 60 && ups < 140, "ups = {ups}");
        // before the jump the state value is zero
        let noise = sample_noise(&grid, 2, 1, &spec, 0).unwrap();
        assert_eq!(cn_state_at(&noise.common, 0.25).eps0, 0.0);
        assert_ne!(cn_state_at(&noise.common, 0.75).eps0, 0.0);
    }

    #[test]
    fn empirical_stats_basics() {
        let ens = Ensemble::new(vec![1.0, 3.0], 2, 1).unwrap();
        let (mean, m2) = empirical_stats(&ens);
        assert_eq!(mean, vec![2.0]);
        assert_eq!(m2, 5.0);

        let single = Ensemble::new(vec![7.0], 1, 1).unwrap();
        let (mean, _) = empirical_stats(&single);
        assert_eq!(mean, vec![7.0]);
    }

    #[test]
    fn empirical_mean_clt_bound() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let n = 10_000;
        let states: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ens = Ensemble::new(states, n, 1).unwrap();
        let (mean, _) = empirical_stats(&ens);
        assert!(mean[0].abs() < 0.05, "mean {}", mean[0]);
    }

    #[test]
    fn w2_bound_cases() {
        let a = Ensemble::new(vec![0.0], 1, 1).unwrap();
        let b = Ensemble::new(vec![3.0], 1, 1).unwrap();
        assert_eq!(w2_upper_bound(&a, &a).unwrap(), 0.0);
        assert_eq!(w2_upper_bound(&a, &b).unwrap(), 3.0);

        // permuted ensembles: bound 1, exact W2 (sorted matching) 0
        let p = Ensemble::new(vec![0.0, 1.0], 2, 1).unwrap();
        let q = Ensemble::new(vec![1.0, 0.0], 2, 1).unwrap();
        assert_eq!(w2_upper_bound(&p, &q).unwrap(), 1.0);

        let c = Ensemble::new(vec![0.0, 1.0], 2, 1).unwrap();
        let d = Ensemble::new(vec![1.0], 1, 1).unwrap();
        assert!(w2_upper_bound(&c, &d).is_err());
    }

    /// Exact 1-d W2 between empirical measures: RMS gap of sorted samples.
    fn exact_w2_1d(a: &[f64], b: &[f64]) -> f64 {
        let mut x = a.to_vec();
        let mut y = b.to_vec();
        x.sort_by(|p, q| p.partial_cmp(q).unwrap());
        y.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let acc: f64 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
        (acc / a.len() as f64).sqrt()
    }

    proptest! {
        #[test]
        fn w2_bound_dominates_exact_1d(
            xs in proptest::collection::vec(-10.0f64..10.0, 1..30),
            shifts in proptest::collection::vec(-10.0f64..10.0, 1..30),
        ) {
            let n = xs.len().min(shifts.len());
            let a: Vec<f64> = xs[..n].to_vec();
            let b: Vec<f64> = a.iter().zip(&shifts[..n]).map(|(x, s)| x + s).collect();
            let ea = Ensemble::new(a.clone(), n, 1).unwrap();
            let eb = Ensemble::new(b.clone(), n, 1).unwrap();
            let bound = w2_upper_bound(&ea, &eb).unwrap();
            let exact = exact_w2_1d(&a, &b);
            prop_assert!(bound >= exact - 1e-12);
        }
    }

    #[test]
    fn divergence_is_caught_with_location() {
        struct Exploder;
        impl Model for Exploder {
            fn dim_x(&self) -> usize {
                1
            }
            fn dim_alpha(&self) -> usize {
                1
            }
            fn drift<S: Scalar>(
                &self,
                _t: f64,
                x: &[S],
                _mu: &MeasureStats<S>,
                _alpha: &[S],
                _cn: &CnState,
                out: &mut [S],
            ) {
                out[0] = x[0].mul_c(1e9);
            }
            fn vol<S: Scalar>(
                &self,
                _t: f64,
                x: &[S],
                _mu: &MeasureStats<S>,
                _cn: &CnState,
                out: &mut [S],
            ) {
                out[0] = x[0].constant_like(0.0);
            }
            fn running_cost<S: Scalar>(
                &self,
                _t: f64,
                x: &[S],
                _mu: &MeasureStats<S>,
                _alpha: &[S],
                _cn: &CnState,
            ) -> S {
                x[0].constant_like(0.0)
            }
            fn terminal_cost<S: Scalar>(
                &self,
                x: &[S],
                _mu: &MeasureStats<S>,
                _cn: &CnState,
            ) -> S {
                x[0]
            }
            fn sample_x0(&self, _rng: &mut ChaCha12Rng, out: &mut [f64]) {
                out[0] = 1.0;
            }
        }
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let ens0 = Ensemble::new(vec![1.0, 1.0], 2, 1).unwrap();
        let noise = sample_noise(&grid, 2, 1, &CommonNoiseSpec::None, 3).unwrap();
        match rollout::<f64, _, _>((), &Exploder, &mut zero_control, &ens0, &noise, &grid) {
            Err(SimError::Divergence { step, particle, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(particle, 0);
            }
            Err(other) => panic!("expected divergence, got {other}"),
            Ok(_) => panic!("expected divergence, rollout succeeded"),
        }
    }

    #[test]
    fn decoupled_particles_match_single_particle_runs_bitwise() {
        // vol = 0 and drift independent of mu: an N-particle rollout equals
        // N single-particle rollouts bit for bit.
        let m = make_lq(0.4, 0.0, 1.0, 0.2, 0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let n = 3;
        let x0 = [0.3, -1.2, 0.9];
        let ens0 = Ensemble::new(x0.to_vec(), n, 1).unwrap();
        let noise = sample_noise(&grid, n, 1, &CommonNoiseSpec::None, 4).unwrap();
        let mut ctl = |t: f64, x: &[f64], _mu: &MeasureStats<f64>, _cn: &CnState, out: &mut [f64]| {
            out[0] = -0.7 * x[0] + 0.1 * t;
        };
        let joint = rollout::<f64, _, _>((), &m, &mut ctl, &ens0, &noise, &grid).unwrap();

        for i in 0..n {
            let e1 = Ensemble::new(vec![x0[i]], 1, 1).unwrap();
            // single-particle bundle with particle i's increments
            let incs: Vec<f64> = (0..grid.n_steps()).map(|s| noise.increment(s, i, 0)).collect();
            let n1 = NoiseBundle {
                increments: incs,
                common: CommonPath::None,
                n_steps: grid.n_steps(),
                n: 1,
                dim_w: 1,
                seed: noise.seed,
            };
            let solo = rollout::<f64, _, _>((), &m, &mut ctl, &e1, &n1, &grid).unwrap();
            for step in 0..=grid.n_steps() {
                assert_eq!(
                    joint.result.state(step, i, 0).to_bits(),
                    solo.result.state(step, 0, 0).to_bits()
                );
            }
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let m = make_lq(0.5, 0.25, 1.0, 0.3, 0.2, 1.0, 1.0, 0.7, 0.3, 1.0, 0.3, 0.5, 0.3).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let run = |seed| {
            let ens0 = Ensemble::sample_x0(&m, 8, seed);
            let noise = sample_noise(&grid, 8, 1, &CommonNoiseSpec::None, seed).unwrap();
            let mut ctl =
                |_t: f64, x: &[f64], _mu: &MeasureStats<f64>, _cn: &CnState, out: &mut [f64]| {
                    out[0] = -x[0];
                };
            rollout::<f64, _, _>((), &m, &mut ctl, &ens0, &noise, &grid)
                .unwrap()
                .result
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn coarsen_preserves_brownian_sums() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let noise = sample_noise(&grid, 3, 1, &CommonNoiseSpec::None, 2).unwrap();
        let coarse = noise.coarsen(4).unwrap();
        assert_eq!(coarse.n_steps, 2);
        let total_fine: f64 = (0..8).map(|s| noise.increment(s, 1, 0)).sum();
        let total_coarse: f64 = (0..2).map(|s| coarse.increment(s, 1, 0)).sum();
        assert!((total_fine - total_coarse).abs() < 1e-14);
        assert!(noise.coarsen(3).is_err());
    }

    #[test]
    fn strong_error_slopes() {
        // deterministic Euler on a linear drift: value error O(dt), so the
        // mean-square slope should be at least ~2
        let m = make_lq(0.8, 0.2, 1.0, 0.1, 0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.2).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let mut ctl = |_t: f64, x: &[f64], _mu: &MeasureStats<f64>, _cn: &CnState, out: &mut [f64]| {
            out[0] = -0.4 * x[0];
        };
        let zero_vol =
            make_lq(0.8, 0.2, 1.0, 0.1, 0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.2).unwrap();
        let res =
            strong_error_experiment(&zero_vol, &mut ctl, &grid, 2, 3, 8, 64, 31).unwrap();
        assert!(res.mse_slope >= 1.0, "slope {}", res.mse_slope);

        // refinement factor 1 is rejected
        assert!(strong_error_experiment(&m, &mut ctl, &grid, 1, 3, 8, 8, 1).is_err());
    }

    #[test]
    fn histogram_counts_everything_inside() {
        let vals = [0.1, 0.2, 0.35, 0.9];
        let (edges, counts) = histogram(&vals, 2, 0.0, 1.0);
        assert_eq!(edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(counts, vec![3, 1]);
    }
}
