//! Direct cost minimization over neural feedback controls: stochastic
//! gradient descent on the sampled N-particle objective.
//!
//! Each iteration draws a fresh sample (initial states and Brownian
//! increments), runs one differentiable rollout with the control
//! `alpha = phi_theta(t_n, X^i_n [, eps0_n])`, and takes one descent step on
//! the exact gradient of that sample's cost. One population sample per
//! iteration, no minibatching across populations.
//!
//! The printed update rule of the source algorithm is a typographical slip;
//! the implemented update is plain descent `theta <- theta - eta grad`,
//! with Adam offered as a config choice. Evaluation losses along the trace
//! use one held-out seed so values are comparable across iterations.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::model::{CnState, CommonNoiseSpec, MeasureStats, Model};
use crate::nn::{self, Activation, Architecture, ClampBox, InitScheme, NetParams};
use crate::simulate::{rollout, sample_noise, Ensemble, RolloutResult, SimError, TimeGrid};
use crate::util::substream;

const MOVING_AVG_WINDOW: usize = 100;

#[derive(Debug, Clone)]
pub enum TrainError {
    BadConfig(String),
    /// Rollout divergence or non-finite gradient; the partial trace up to
    /// the failing iteration is preserved.
    Diverged {
        iteration: usize,
        message: String,
        trace: TrainTrace,
    },
    Sim(SimError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(msg) => write!(f, "bad training config: {msg}"),
            TrainError::Diverged {
                iteration, message, ..
            } => write!(f, "training diverged at iteration {iteration}: {message}"),
            TrainError::Sim(e) => write!(f, "simulation error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<SimError> for TrainError {
    fn from(e: SimError) -> Self {
        TrainError::Sim(e)
    }
}

/// Learning-rate schedule / optimizer choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant {
        eta: f64,
    },
    StepDecay {
        eta0: f64,
        factor: f64,
        every: usize,
    },
    Adam {
        eta: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl LrSchedule {
    fn base_eta(&self) -> f64 {
        match self {
            LrSchedule::Constant { eta } | LrSchedule::Adam { eta, .. } => *eta,
            LrSchedule::StepDecay { eta0, .. } => *eta0,
        }
    }
}

/// Optimizer state: step counter plus Adam moment estimates when needed.
#[derive(Debug, Clone)]
pub struct LrState {
    schedule: LrSchedule,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl LrState {
    pub fn new(schedule: LrSchedule, n_params: usize) -> Result<Self, TrainError> {
        if !(schedule.base_eta() > 0.0) {
            return Err(TrainError::BadConfig("learning rate must be > 0".into()));
        }
        let needs_moments = matches!(schedule, LrSchedule::Adam { .. });
        Ok(LrState {
            schedule,
            step: 0,
            m: if needs_moments {
                vec![0.0; n_params]
            } else {
                Vec::new()
            },
            v: if needs_moments {
                vec![0.0; n_params]
            } else {
                Vec::new()
            },
        })
    }
}

/// One descent step `theta <- theta - eta_m * direction`, deterministic.
/// Rejects non-finite gradients with diagnostics.
pub fn sgd_step(theta: &mut [f64], grad: &[f64], state: &mut LrState) -> Result<(), TrainError> {
    if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::BadConfig(format!(
            "non-finite gradient component at parameter {idx}: {}",
            grad[idx]
        )));
    }
    state.step += 1;
    match &state.schedule {
        LrSchedule::Constant { eta } => {
            for (t, g) in theta.iter_mut().zip(grad) {
                *t -= eta * g;
            }
        }
        LrSchedule::StepDecay {
            eta0,
            factor,
            every,
        } => {
            let k = (state.step - 1) / (*every).max(1);
            let eta = eta0 * factor.powi(k as i32);
            for (t, g) in theta.iter_mut().zip(grad) {
                *t -= eta * g;
            }
        }
        LrSchedule::Adam {
            eta,
            beta1,
            beta2,
            eps,
        } => {
            let t_step = state.step as i32;
            let bc1 = 1.0 - beta1.powi(t_step);
            let bc2 = 1.0 - beta2.powi(t_step);
            for i in 0..theta.len() {
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                theta[i] -= eta * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Training configuration for one solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// SGD iterations M.
    pub iterations: usize,
    /// Particles per sampled population N.
    pub batch: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Trace/evaluation interval.
    pub eval_every: usize,
    /// Particles used for held-out evaluation rollouts (defaults to `batch`).
    #[serde(default)]
    pub eval_batch: Option<usize>,
    /// Hidden layer widths of the control network.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub clamp: Option<ClampBox>,
    /// Optional early stop when |grad| falls below this threshold
    /// (disabled by default: sampled gradients are noisy).
    #[serde(default)]
    pub grad_tol: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::BadConfig("iterations must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::BadConfig("batch must be >= 1".into()));
        }
        if !(self.lr.base_eta() > 0.0) {
            return Err(TrainError::BadConfig("learning rate must be > 0".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::BadConfig("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid, TrainError> {
        Ok(TimeGrid::new(self.horizon, self.n_steps)?)
    }

    /// Control-network architecture for `model`: inputs are time, state and
    /// (with jump common noise) the current jump value.
    pub fn architecture<M: Model>(&self, model: &M) -> Result<Architecture, TrainError> {
        let mut dims = vec![model.feedback_dim()];
        dims.extend(&self.hidden);
        dims.push(model.dim_alpha());
        Architecture::new(dims, self.activation).map_err(|e| TrainError::BadConfig(e.to_string()))
    }
}

/// One trace record, written at `eval_every` boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Loss of the most recent training sample.
    pub sampled_loss: f64,
    /// Moving average of training-sample losses.
    pub loss_avg: f64,
    /// Held-out evaluation loss (same seed at every record).
    pub eval_loss: f64,
    /// L2 distance to the oracle control, when an oracle was supplied.
    pub l2_error: Option<f64>,
    /// Seconds since training started. Informational; never written to CSV.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn at_iteration(&self, iteration: usize) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.iteration == iteration)
    }
}

pub struct TrainOutcome {
    pub params: NetParams,
    pub trace: TrainTrace,
}

/// Oracle feedback control used for L2-error reporting.
pub type OracleControl<'a> = dyn Fn(f64, &[f64]) -> Vec<f64> + 'a;

/// Builds the feedback closure for `rollout`: assemble `(t, x [, eps0])`,
/// apply the network, clamp the output. Generic over the scalar domain so
/// the same closure shape serves taped and untaped rollouts.
pub fn net_control<'c, S: Scalar>(
    ctx: S::Ctx,
    arch: &'c Architecture,
    theta: &'c [S],
    clamp: Option<&'c ClampBox>,
    with_cn_input: bool,
) -> impl FnMut(f64, &[S], &MeasureStats<S>, &CnState, &mut [S]) + 'c
where
    S::Ctx: 'c,
{
    let mut input: Vec<S> = Vec::with_capacity(arch.input_dim());
    move |t, x, _mu, cn, out| {
        input.clear();
        input.push(S::constant(ctx, t));
        input.extend_from_slice(x);
        if with_cn_input {
            input.push(S::constant(ctx, cn.eps0));
        }
        let mut y = nn::forward(arch, theta, &input);
        if let Some(b) = clamp {
            nn::clamp_output::<S>(ctx, &mut y, b);
        }
        out.copy_from_slice(&y);
    }
}

fn with_cn_input<M: Model>(model: &M) -> bool {
    matches!(model.common_noise(), CommonNoiseSpec::TwoPointJump { .. })
}

/// Sampled loss and its exact gradient for one fresh population draw.
///
/// The tape is cleared and reused; parameters are lifted as gradient roots,
/// the rollout is recorded through all time steps (including the mean
/// coupling), and one backward pass yields `dJ_S/dtheta`.
pub fn loss_mfc<M: Model>(
    params: &NetParams,
    model: &M,
    sample_seed: u64,
    config: &TrainConfig,
    tape: &Tape,
) -> Result<(f64, Vec<f64>, RolloutResult), TrainError> {
    let grid = config.grid()?;
    let ens0 = Ensemble::sample_x0(model, config.batch, substream(sample_seed, 1));
    let noise = sample_noise(
        &grid,
        config.batch,
        model.dim_w(),
        &model.common_noise(),
        substream(sample_seed, 2),
    )?;

    tape.clear();
    let theta: Vec<Var> = params
        .theta
        .iter()
        .enumerate()
        .map(|(slot, v)| tape.param(slot, *v))
        .collect();
    let mut control = net_control::<Var>(
        tape,
        &params.arch,
        &theta,
        config.clamp.as_ref(),
        with_cn_input(model),
    );
    let run = rollout::<Var, _, _>(tape, model, &mut control, &ens0, &noise, &grid)?;
    let grad = tape
        .backward(run.total_cost_s)
        .map_err(|e| TrainError::BadConfig(e.to_string()))?;
    Ok((run.result.total_cost, grad, run.result))
}

/// Plain (untaped) rollout of a parameterized control; used for held-out
/// evaluation and oracle comparisons.
pub fn eval_rollout<M: Model>(
    params: &NetParams,
    model: &M,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    clamp: Option<&ClampBox>,
) -> Result<RolloutResult, SimError> {
    let ens0 = Ensemble::sample_x0(model, n, substream(seed, 1));
    let noise = sample_noise(
        grid,
        n,
        model.dim_w(),
        &model.common_noise(),
        substream(seed, 2),
    )?;
    let mut control =
        net_control::<f64>((), &params.arch, &params.theta, clamp, with_cn_input(model));
    Ok(rollout::<f64, _, _>((), model, &mut control, &ens0, &noise, grid)?.result)
}

/// Rollout under an arbitrary f64 feedback (e.g. a benchmark oracle) with
/// the same sampling conventions as `eval_rollout`.
pub fn eval_rollout_with<M: Model>(
    control: &OracleControl,
    model: &M,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<RolloutResult, SimError> {
    let ens0 = Ensemble::sample_x0(model, n, substream(seed, 1));
    let noise = sample_noise(
        grid,
        n,
        model.dim_w(),
        &model.common_noise(),
        substream(seed, 2),
    )?;
    let mut ctl = |t: f64, x: &[f64], _mu: &MeasureStats<f64>, _cn: &CnState, out: &mut [f64]| {
        out.copy_from_slice(&control(t, x));
    };
    Ok(rollout::<f64, _, _>((), model, &mut ctl, &ens0, &noise, grid)?.result)
}

/// Trains the feedback control. The optional `oracle` fills the L2-error
/// column of the trace; `on_eval` fires at each trace record (used for
/// checkpointing).
pub fn train<M: Model>(
    model: &M,
    config: &TrainConfig,
    oracle: Option<&OracleControl>,
    mut on_eval: impl FnMut(usize, &NetParams, &TraceRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let grid = config.grid()?;
    let arch = config.architecture(model)?;
    let mut params = nn::init(&arch, substream(config.seed, 0), InitScheme::UniformScaled);
    let mut opt = LrState::new(config.lr.clone(), params.theta.len())?;
    let eval_seed = substream(config.seed, u64::MAX);
    let eval_n = config.eval_batch.unwrap_or(config.batch);

    let tape = Tape::new();
    let mut trace = TrainTrace::default();
    let mut recent: std::collections::VecDeque<f64> =
        std::collections::VecDeque::with_capacity(MOVING_AVG_WINDOW);
    let started = Instant::now();

    for m in 1..=config.iterations {
        let sample_seed = substream(config.seed, m as u64);
        let (loss, grad, _) = match loss_mfc(&params, model, sample_seed, config, &tape) {
            Ok(v) => v,
            Err(TrainError::Sim(e)) => {
                return Err(TrainError::Diverged {
                    iteration: m,
                    message: e.to_string(),
                    trace,
                })
            }
            Err(e) => return Err(e),
        };
        if recent.len() == MOVING_AVG_WINDOW {
            recent.pop_front();
        }
        recent.push_back(loss);

        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Err(e) = sgd_step(&mut params.theta, &grad, &mut opt) {
            return Err(TrainError::Diverged {
                iteration: m,
                message: e.to_string(),
                trace,
            });
        }

        if m % config.eval_every == 0 || m == config.iterations {
            let eval = eval_rollout(&params, model, &grid, eval_n, eval_seed, config.clamp.as_ref())
                .map_err(|e| TrainError::Diverged {
                    iteration: m,
                    message: format!("evaluation rollout failed: {e}"),
                    trace: trace.clone(),
                })?;
            let l2 = match oracle {
                Some(orc) => Some(
                    l2_control_error(
                        &params,
                        orc,
                        model,
                        &grid,
                        eval_n,
                        eval_seed,
                        config.clamp.as_ref(),
                    )
                    .map_err(TrainError::Sim)?,
                ),
                None => None,
            };
            let record = TraceRecord {
                iteration: m,
                sampled_loss: loss,
                loss_avg: recent.iter().sum::<f64>() / recent.len() as f64,
                eval_loss: eval.total_cost,
                l2_error: l2,
                wall_secs: started.elapsed().as_secs_f64(),
            };
            on_eval(m, &params, &record);
            trace.records.push(record);
        }

        if let Some(tol) = config.grad_tol {
            if grad_norm < tol {
                break;
            }
        }
    }

    Ok(TrainOutcome { params, trace })
}

/// L2 distance between the learned control and an oracle feedback, measured
/// along trajectories driven by the learned control:
/// `sqrt( dt * sum_n mean_i |phi(t_n, X^i_n) - oracle(t_n, X^i_n)|^2 )`.
pub fn l2_control_error<M: Model>(
    params: &NetParams,
    oracle: &OracleControl,
    model: &M,
    grid: &TimeGrid,
    n_eval: usize,
    seed: u64,
    clamp: Option<&ClampBox>,
) -> Result<f64, SimError> {
    let run = eval_rollout(params, model, grid, n_eval, seed, clamp)?;
    let dt = grid.dt();
    let mut total = 0.0;
    for step in 0..grid.n_steps() {
        let t = grid.time(step);
        let mut acc = 0.0;
        for i in 0..n_eval {
            let x: Vec<f64> = (0..model.dim_x()).map(|k| run.state(step, i, k)).collect();
            let want = oracle(t, &x);
            let mut gap = 0.0;
            for k in 0..model.dim_alpha() {
                let d = run.control(step, i, k) - want[k];
                gap += d * d;
            }
            acc += gap;
        }
        total += dt * acc / n_eval as f64;
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{make_common_noise_lq, make_lq, LqMfc};
    use crate::simulate::CommonPath;

    fn small_lq() -> LqMfc {
        make_lq(0.5, 0.25, 1.0, 0.25, 0.5, 0.5, 1.0, 1.0, 0.5, 1.0, 0.3, 0.5, 0.3).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 5,
            batch: 4,
            horizon: 1.0,
            n_steps: 3,
            lr: LrSchedule::Constant { eta: 0.05 },
            seed: 7,
            eval_every: 2,
            eval_batch: None,
            hidden: vec![4],
            activation: Activation::Tanh,
            clamp: None,
            grad_tol: None,
        }
    }

    #[test]
    fn plain_sgd_step_moves_against_gradient() {
        let mut theta = vec![1.0];
        let mut st = LrState::new(LrSchedule::Constant { eta: 0.1 }, 1).unwrap();
        sgd_step(&mut theta, &[2.0], &mut st).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-15);

        // zero gradient leaves parameters unchanged
        let before = theta.clone();
        sgd_step(&mut theta, &[0.0], &mut st).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn step_decay_halves_learning_rate() {
        let mut theta = vec![0.0];
        let mut st = LrState::new(
            LrSchedule::StepDecay {
                eta0: 0.1,
                factor: 0.5,
                every: 2,
            },
            1,
        )
        .unwrap();
        // steps 1, 2 at eta = 0.1; steps 3, 4 at 0.05
        for _ in 0..4 {
            sgd_step(&mut theta, &[1.0], &mut st).unwrap();
        }
        assert!((theta[0] + (0.1 + 0.1 + 0.05 + 0.05)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        // hand-computed first Adam step: m_hat = g, v_hat = g^2,
        // delta = eta * g / (|g| + eps) ~ eta * sign(g)
        let eta = 0.01;
        for g in [3.0, -0.2, 1e-4] {
            let mut theta = vec![0.0];
            let mut st = LrState::new(
                LrSchedule::Adam {
                    eta,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                1,
            )
            .unwrap();
            sgd_step(&mut theta, &[g], &mut st).unwrap();
            let expected = eta * g / (g.abs() + 1e-8);
            assert!((theta[0] + expected).abs() < 1e-15, "g = {g}");
            assert!(theta[0].abs() <= eta * (1.0 + 1e-8));
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut theta = vec![0.0];
        let mut st = LrState::new(LrSchedule::Constant { eta: 0.1 }, 1).unwrap();
        assert!(sgd_step(&mut theta, &[f64::NAN], &mut st).is_err());
    }

    struct ZeroCost;
    impl Model for ZeroCost {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_alpha(&self) -> usize {
            1
        }
        fn drift<S: Scalar>(
            &self,
            _t: f64,
            _x: &[S],
            _mu: &MeasureStats<S>,
            alpha: &[S],
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = alpha[0];
        }
        fn vol<S: Scalar>(
            &self,
            _t: f64,
            x: &[S],
            _mu: &MeasureStats<S>,
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = x[0].constant_like(0.3);
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
            x[0].constant_like(0.0)
        }
        fn sample_x0(&self, _rng: &mut rand_chacha::ChaCha12Rng, out: &mut [f64]) {
            out[0] = 0.5;
        }
    }

    #[test]
    fn zero_cost_model_gives_zero_loss_and_gradient() {
        let cfg = tiny_config();
        let arch = cfg.architecture(&ZeroCost).unwrap();
        let params = nn::init(&arch, 3, InitScheme::UniformScaled);
        let tape = Tape::new();
        let (loss, grad, _) = loss_mfc(&params, &ZeroCost, 11, &cfg, &tape).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    struct ControlCost;
    impl Model for ControlCost {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_alpha(&self) -> usize {
            1
        }
        fn drift<S: Scalar>(
            &self,
            _t: f64,
            _x: &[S],
            _mu: &MeasureStats<S>,
            alpha: &[S],
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = alpha[0];
        }
        fn vol<S: Scalar>(
            &self,
            _t: f64,
            x: &[S],
            _mu: &MeasureStats<S>,
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = x[0].constant_like(0.3);
        }
        fn running_cost<S: Scalar>(
            &self,
            _t: f64,
            _x: &[S],
            _mu: &MeasureStats<S>,
            alpha: &[S],
            _cn: &CnState,
        ) -> S {
            alpha[0].powi(2)
        }
        fn terminal_cost<S: Scalar>(&self, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState) -> S {
            x[0].constant_like(0.0)
        }
        fn sample_x0(&self, _rng: &mut rand_chacha::ChaCha12Rng, out: &mut [f64]) {
            out[0] = 0.5;
        }
    }

    #[test]
    fn control_cost_only_is_stationary_at_zero_net() {
        // f = |alpha|^2, g = 0: the zero net is a pathwise stationary point
        let cfg = tiny_config();
        let arch = cfg.architecture(&ControlCost).unwrap();
        let params = nn::init(&arch, 3, InitScheme::Zeros);
        let tape = Tape::new();
        let (loss, grad, _) = loss_mfc(&params, &ControlCost, 11, &cfg, &tape).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn mfc_loss_gradient_matches_finite_differences() {
        // 1-4-1 net over (t, x), N = 4, N_T = 3
        let model = small_lq();
        let cfg = tiny_config();
        let arch = cfg.architecture(&model).unwrap();
        assert_eq!(arch.layer_dims, vec![2, 4, 1]);
        let params = nn::init(&arch, 5, InitScheme::UniformScaled);
        let tape = Tape::new();
        let sample_seed = 77;
        let (_, grad, _) = loss_mfc(&params, &model, sample_seed, &cfg, &tape).unwrap();

        let mut work = params.clone();
        for i in 0..work.theta.len() {
            let h = 1e-5 * work.theta[i].abs().max(1.0);
            let orig = work.theta[i];
            work.theta[i] = orig + h;
            let up = loss_mfc(&work, &model, sample_seed, &cfg, &tape).unwrap().0;
            work.theta[i] = orig - h;
            let down = loss_mfc(&work, &model, sample_seed, &cfg, &tape).unwrap().0;
            work.theta[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: ad={} fd={fd} rel={rel}", grad[i]);
        }
    }

    #[test]
    fn one_step_on_fixed_sample_decreases_that_sample_loss() {
        let model = small_lq();
        let cfg = tiny_config();
        let arch = cfg.architecture(&model).unwrap();
        let params = nn::init(&arch, 9, InitScheme::UniformScaled);
        let tape = Tape::new();
        let sample_seed = 1234;
        let (loss0, grad, _) = loss_mfc(&params, &model, sample_seed, &cfg, &tape).unwrap();

        let mut eta = 0.1;
        let mut decreased = false;
        for _ in 0..8 {
            let mut trial = params.clone();
            for (t, g) in trial.theta.iter_mut().zip(&grad) {
                *t -= eta * g;
            }
            let (loss1, _, _) = loss_mfc(&trial, &model, sample_seed, &cfg, &tape).unwrap();
            if loss1 < loss0 {
                decreased = true;
                break;
            }
            eta *= 0.5;
        }
        assert!(decreased, "no learning-rate halving produced a decrease");
    }

    #[test]
    fn train_rejects_zero_iterations() {
        let mut cfg = tiny_config();
        cfg.iterations = 0;
        let err = train(&small_lq(), &cfg, None, |_, _, _| {});
        assert!(matches!(err, Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let model = small_lq();
        let cfg = tiny_config();
        let a = train(&model, &cfg, None, |_, _, _| {}).unwrap();
        let b = train(&model, &cfg, None, |_, _, _| {}).unwrap();
        // wall times differ; compare everything else
        assert_eq!(a.params.theta, b.params.theta);
        assert_eq!(a.trace.records.len(), b.trace.records.len());
        for (ra, rb) in a.trace.records.iter().zip(&b.trace.records) {
            assert_eq!(ra.iteration, rb.iteration);
            assert_eq!(ra.sampled_loss.to_bits(), rb.sampled_loss.to_bits());
            assert_eq!(ra.eval_loss.to_bits(), rb.eval_loss.to_bits());
        }
    }

    #[test]
    fn evaluation_with_same_seed_is_identical() {
        let model = small_lq();
        let cfg = tiny_config();
        let out = train(&model, &cfg, None, |_, _, _| {}).unwrap();
        let grid = cfg.grid().unwrap();
        let a = eval_rollout(&out.params, &model, &grid, 8, 42, None).unwrap();
        let b = eval_rollout(&out.params, &model, &grid, 8, 42, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn l2_error_against_self_is_zero_and_constant_gap_is_c_sqrt_t() {
        let model = small_lq();
        let cfg = tiny_config();
        let arch = cfg.architecture(&model).unwrap();
        let params = nn::init(&arch, 5, InitScheme::Zeros);
        let grid = TimeGrid::new(1.0, 16).unwrap();

        // oracle identical to the (zero) learned control
        let zero_oracle = |_t: f64, _x: &[f64]| vec![0.0];
        let err = l2_control_error(&params, &zero_oracle, &model, &grid, 64, 3, None).unwrap();
        assert_eq!(err, 0.0);

        // zeros net against a constant oracle c: error = c sqrt(T) exactly
        // (the discrete sum is dt * N_T * c^2 = T c^2)
        let c = 0.8;
        let const_oracle = move |_t: f64, _x: &[f64]| vec![c];
        let err = l2_control_error(&params, &const_oracle, &model, &grid, 64, 3, None).unwrap();
        assert!((err - c).abs() < 1e-12, "err = {err}");
    }

    #[test]
    fn desk_scale_training_makes_progress() {
        let model = small_lq();
        let cfg = TrainConfig {
            iterations: 300,
            batch: 32,
            horizon: 1.0,
            n_steps: 10,
            lr: LrSchedule::Adam {
                eta: 0.02,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            seed: 3,
            eval_every: 50,
            eval_batch: Some(128),
            hidden: vec![8],
            activation: Activation::Tanh,
            clamp: None,
            grad_tol: None,
        };
        let out = train(&model, &cfg, None, |_, _, _| {}).unwrap();
        let first = out.trace.records.first().unwrap().eval_loss;
        let last = out.trace.last().unwrap().eval_loss;
        assert!(
            last <= first,
            "no progress: first eval {first}, last eval {last}"
        );
    }

    #[test]
    fn common_noise_loss_is_exchangeable_under_particle_permutation() {
        let model = make_common_noise_lq(1.5, 0.5, 0.3, 0.0, 0.3, 0.5).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            batch: 6,
            horizon: 1.0,
            n_steps: 4,
            lr: LrSchedule::Constant { eta: 0.01 },
            seed: 5,
            eval_every: 1,
            eval_batch: None,
            hidden: vec![4],
            activation: Activation::Tanh,
            clamp: None,
            grad_tol: None,
        };
        let arch = cfg.architecture(&model).unwrap();
        assert_eq!(arch.input_dim(), 3); // (t, x, eps0)
        let params = nn::init(&arch, 2, InitScheme::UniformScaled);
        let grid = cfg.grid().unwrap();

        let ens0 = Ensemble::sample_x0(&model, 6, 91);
        let noise = sample_noise(&grid, 6, 1, &model.common_noise(), 92).unwrap();

        let loss_of = |ens: &Ensemble, nz: &crate::simulate::NoiseBundle| {
            let mut ctl = net_control::<f64>((), &params.arch, &params.theta, None, true);
            rollout::<f64, _, _>((), &model, &mut ctl, ens, nz, &grid)
                .unwrap()
                .result
                .total_cost
        };
        let base = loss_of(&ens0, &noise);

        // permute particles (reverse), permuting initial states and noise rows
        let n = 6;
        let perm: Vec<usize> = (0..n).rev().collect();
        let states: Vec<f64> = perm.iter().map(|&i| ens0.states[i]).collect();
        let ens_p = Ensemble::new(states, n, 1).unwrap();
        let mut incs = vec![0.0; noise.increments.len()];
        for s in 0..grid.n_steps() {
            for (new_i, &old_i) in perm.iter().enumerate() {
                incs[s * n + new_i] = noise.increment(s, old_i, 0);
            }
        }
        let noise_p = crate::simulate::NoiseBundle {
            increments: incs,
            common: match &noise.common {
                CommonPath::Jump { jump_time, value } => CommonPath::Jump {
                    jump_time: *jump_time,
                    value: *value,
                },
                _ => panic!(),
            },
            n_steps: grid.n_steps(),
            n,
            dim_w: 1,
            seed: noise.seed,
        };
        let permuted = loss_of(&ens_p, &noise_p);
        assert!(
            (base - permuted).abs() < 1e-12,
            "loss not exchangeable: {base} vs {permuted}"
        );
    }
}
