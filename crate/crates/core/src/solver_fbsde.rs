//! Shooting solver for McKean-Vlasov FBSDEs.
//!
//! The backward equation is replaced by a forward one: learn the initial
//! value map `y0(x)` and the volatility map `z(t, x)` so that the
//! forward-forward system
//!
//! ```text
//! dX =  B(t, X, mu, Y) dt + vol(t, X, mu) dW
//! dY = -F(t, X, mu, Y, sigma^T z(t, X)) dt + z(t, X) dW,  Y_0 = y0(X_0)
//! ```
//!
//! matches the terminal condition in mean square:
//! `loss = E |Y_T - G(X_T, mu_T)|^2`. Both networks train jointly by SGD on
//! the sampled loss, exactly as the direct method. Because the solver only
//! sees the generic system (B, F, G, vol), it applies to FBSDEs from mean
//! field games as well as from control problems; the distinction lives
//! entirely in the supplied model.
//!
//! One `z` network takes time as an input coordinate, keeping the parameter
//! count independent of the number of time steps. With correlated-Brownian
//! common noise the `X` update uses the mixed increments while `z dW` uses
//! the idiosyncratic ones, matching the single-`W` typing of the backward
//! equation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::model::{FbsdeModel, MeasureStats};
use crate::nn::{self, Activation, Architecture, InitScheme, NetParams};
use crate::simulate::{
    cn_state_at, mixed_increment, sample_noise, Ensemble, NoiseBundle, SimError, TimeGrid,
    DIVERGENCE_GUARD,
};
use crate::solver_mfc::{LrSchedule, LrState, TraceRecord, TrainError, TrainTrace};
use crate::util::substream;

const MOVING_AVG_WINDOW: usize = 100;

/// Training configuration for the shooting solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbsdeTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub eval_every: usize,
    #[serde(default)]
    pub eval_batch: Option<usize>,
    pub y0_hidden: Vec<usize>,
    pub z_hidden: Vec<usize>,
    pub activation: Activation,
}

impl FbsdeTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::BadConfig("iterations must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::BadConfig("batch must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::BadConfig("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid, TrainError> {
        Ok(TimeGrid::new(self.horizon, self.n_steps)?)
    }

    pub fn y0_architecture<M: FbsdeModel>(&self, model: &M) -> Result<Architecture, TrainError> {
        let mut dims = vec![model.dim_x()];
        dims.extend(&self.y0_hidden);
        dims.push(model.dim_y());
        Architecture::new(dims, self.activation).map_err(|e| TrainError::BadConfig(e.to_string()))
    }

    pub fn z_architecture<M: FbsdeModel>(&self, model: &M) -> Result<Architecture, TrainError> {
        let mut dims = vec![1 + model.dim_x()];
        dims.extend(&self.z_hidden);
        dims.push(model.dim_y() * model.dim_w());
        Architecture::new(dims, self.activation).map_err(|e| TrainError::BadConfig(e.to_string()))
    }
}

/// Trajectories and terminal mismatch of one forward-forward rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeRollout {
    /// `(n_steps + 1) x n x dim_x`.
    pub x_traj: Vec<f64>,
    /// `(n_steps + 1) x n x dim_y`.
    pub y_traj: Vec<f64>,
    /// Squared terminal mismatch per particle.
    pub terminal_gap_sq: Vec<f64>,
    /// `(1/N) sum_i |Y_T^i - G(X_T^i, mu_T)|^2`.
    pub loss: f64,
    pub n: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    pub n_steps: usize,
}

impl FbsdeRollout {
    #[inline]
    pub fn x(&self, step: usize, particle: usize, coord: usize) -> f64 {
        self.x_traj[(step * self.n + particle) * self.dim_x + coord]
    }

    #[inline]
    pub fn y(&self, step: usize, particle: usize, coord: usize) -> f64 {
        self.y_traj[(step * self.n + particle) * self.dim_y + coord]
    }
}

pub struct FbsdeRun<S: Scalar> {
    pub rollout: FbsdeRollout,
    pub loss_s: S,
}

/// Euler scheme for the forward-forward system under the given network
/// parameters (plain `f64` values or tape-lifted `Var`s).
#[allow(clippy::too_many_arguments)]
pub fn fbsde_rollout<S, M>(
    ctx: S::Ctx,
    model: &M,
    y0_arch: &Architecture,
    y0_theta: &[S],
    z_arch: &Architecture,
    z_theta: &[S],
    ens0: &Ensemble,
    noise: &NoiseBundle,
    grid: &TimeGrid,
) -> Result<FbsdeRun<S>, SimError>
where
    S: Scalar,
    M: FbsdeModel,
{
    let (n, dim_x, dim_y, dim_w) = (ens0.n, model.dim_x(), model.dim_y(), model.dim_w());
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
    if y0_arch.input_dim() != dim_x
        || y0_arch.output_dim() != dim_y
        || z_arch.input_dim() != 1 + dim_x
        || z_arch.output_dim() != dim_y * dim_w
    {
        return Err(SimError::SizeMismatch {
            expected: dim_y * dim_w,
            got: z_arch.output_dim(),
        });
    }

    let n_steps = grid.n_steps();
    let dt = grid.dt();

    let mut xs: Vec<S> = ens0.states.iter().map(|v| S::constant(ctx, *v)).collect();
    let mut xs_next = xs.clone();

    // Y_0 = y0(X_0)
    let mut ys: Vec<S> = Vec::with_capacity(n * dim_y);
    for i in 0..n {
        let out = nn::forward(y0_arch, y0_theta, &xs[i * dim_x..(i + 1) * dim_x]);
        ys.extend(out);
    }
    let mut ys_next = ys.clone();

    let mut x_traj = Vec::with_capacity((n_steps + 1) * n * dim_x);
    let mut y_traj = Vec::with_capacity((n_steps + 1) * n * dim_y);
    x_traj.extend(xs.iter().map(|v| v.val()));
    y_traj.extend(ys.iter().map(|v| v.val()));

    let mut scratch: Vec<S> = Vec::with_capacity(n);
    let mut drift: Vec<S> = vec![S::constant(ctx, 0.0); dim_x];
    let mut vol: Vec<S> = vec![S::constant(ctx, 0.0); dim_x * dim_w];
    let mut driver: Vec<S> = vec![S::constant(ctx, 0.0); dim_y];
    let mut stz: Vec<S> = vec![S::constant(ctx, 0.0); dim_y * dim_w];
    let mut z_input: Vec<S> = Vec::with_capacity(1 + dim_x);

    for step in 0..n_steps {
        let t = grid.time(step);
        let cn = cn_state_at(&noise.common, t);
        let mu = MeasureStats::from_points(&xs, n, dim_x, &mut scratch);
        for i in 0..n {
            let x = &xs[i * dim_x..(i + 1) * dim_x];
            let y = &ys[i * dim_y..(i + 1) * dim_y];

            z_input.clear();
            z_input.push(S::constant(ctx, t));
            z_input.extend_from_slice(x);
            let z = nn::forward(z_arch, z_theta, &z_input);

            model.vol(t, x, &mu, &cn, &mut vol);
            // sigma^T z, contracting the state index (square vol assumed,
            // as in the 1-d test cases)
            for r in 0..dim_y {
                for w in 0..dim_w {
                    let mut acc = vol[w] * z[r * dim_w];
                    for j in 1..dim_x.min(dim_w) {
                        acc = acc + vol[j * dim_w + w] * z[r * dim_w + j];
                    }
                    stz[r * dim_w + w] = acc;
                }
            }

            model.fwd_drift(t, x, &mu, y, &cn, &mut drift);
            model.driver(t, x, &mu, y, &stz, &cn, &mut driver);

            for k in 0..dim_x {
                let mut nx = x[k] + drift[k].mul_c(dt);
                for w in 0..dim_w {
                    let dw = mixed_increment(noise, step, i, w);
                    nx = nx + vol[k * dim_w + w].mul_c(dw);
                }
                let v = nx.val();
                if !v.is_finite() || v.abs() > DIVERGENCE_GUARD {
                    return Err(SimError::Divergence {
                        step: step + 1,
                        particle: i,
                        value: v,
                    });
                }
                xs_next[i * dim_x + k] = nx;
            }
            for r in 0..dim_y {
                let mut ny = y[r] - driver[r].mul_c(dt);
                for w in 0..dim_w {
                    // z is paired with the idiosyncratic increments
                    let dw = noise.increment(step, i, w);
                    ny = ny + z[r * dim_w + w].mul_c(dw);
                }
                let v = ny.val();
                if !v.is_finite() || v.abs() > DIVERGENCE_GUARD {
                    return Err(SimError::Divergence {
                        step: step + 1,
                        particle: i,
                        value: v,
                    });
                }
                ys_next[i * dim_y + r] = ny;
            }
        }
        std::mem::swap(&mut xs, &mut xs_next);
        std::mem::swap(&mut ys, &mut ys_next);
        x_traj.extend(xs.iter().map(|v| v.val()));
        y_traj.extend(ys.iter().map(|v| v.val()));
    }

    // terminal mismatch
    let mu_t = MeasureStats::from_points(&xs, n, dim_x, &mut scratch);
    let cn_t = cn_state_at(&noise.common, grid.horizon());
    let mut g = vec![S::constant(ctx, 0.0); dim_y];
    let mut gaps: Vec<S> = Vec::with_capacity(n);
    for i in 0..n {
        let x = &xs[i * dim_x..(i + 1) * dim_x];
        let y = &ys[i * dim_y..(i + 1) * dim_y];
        model.terminal(x, &mu_t, &cn_t, &mut g);
        let mut sq = (y[0] - g[0]) * (y[0] - g[0]);
        for r in 1..dim_y {
            let d = y[r] - g[r];
            sq = sq + d * d;
        }
        gaps.push(sq);
    }
    let loss_s = S::mean(&gaps);

    Ok(FbsdeRun {
        rollout: FbsdeRollout {
            x_traj,
            y_traj,
            terminal_gap_sq: gaps.iter().map(|g| g.val()).collect(),
            loss: loss_s.val(),
            n,
            dim_x,
            dim_y,
            n_steps,
        },
        loss_s,
    })
}

pub struct FbsdeTrainOutcome {
    pub y0: NetParams,
    pub z: NetParams,
    pub trace: TrainTrace,
}

/// Sampled shooting loss and its gradient over the concatenated
/// `(theta_y0, theta_z)` vector.
pub fn loss_fbsde<M: FbsdeModel>(
    y0: &NetParams,
    z: &NetParams,
    model: &M,
    sample_seed: u64,
    config: &FbsdeTrainConfig,
    tape: &Tape,
) -> Result<(f64, Vec<f64>, FbsdeRollout), TrainError> {
    let grid = config.grid()?;
    let ens0 = Ensemble::sample_x0_fbsde(model, config.batch, substream(sample_seed, 1));
    let noise = sample_noise(
        &grid,
        config.batch,
        model.dim_w(),
        &model.common_noise(),
        substream(sample_seed, 2),
    )?;

    tape.clear();
    let y0_theta: Vec<Var> = y0
        .theta
        .iter()
        .enumerate()
        .map(|(slot, v)| tape.param(slot, *v))
        .collect();
    let off = y0.theta.len();
    let z_theta: Vec<Var> = z
        .theta
        .iter()
        .enumerate()
        .map(|(slot, v)| tape.param(off + slot, *v))
        .collect();
    let run = fbsde_rollout::<Var, _>(
        tape, model, &y0.arch, &y0_theta, &z.arch, &z_theta, &ens0, &noise, &grid,
    )?;
    let grad = tape
        .backward(run.loss_s)
        .map_err(|e| TrainError::BadConfig(e.to_string()))?;
    Ok((run.rollout.loss, grad, run.rollout))
}

/// Untaped rollout for held-out evaluation.
pub fn eval_fbsde<M: FbsdeModel>(
    y0: &NetParams,
    z: &NetParams,
    model: &M,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<FbsdeRollout, SimError> {
    let ens0 = Ensemble::sample_x0_fbsde(model, n, substream(seed, 1));
    let noise = sample_noise(
        grid,
        n,
        model.dim_w(),
        &model.common_noise(),
        substream(seed, 2),
    )?;
    Ok(fbsde_rollout::<f64, _>(
        (),
        model,
        &y0.arch,
        &y0.theta,
        &z.arch,
        &z.theta,
        &ens0,
        &noise,
        grid,
    )?
    .rollout)
}

/// Joint SGD over both networks; fresh population sample per iteration.
pub fn train_fbsde<M: FbsdeModel>(
    model: &M,
    config: &FbsdeTrainConfig,
    mut on_eval: impl FnMut(usize, &NetParams, &NetParams, &TraceRecord),
) -> Result<FbsdeTrainOutcome, TrainError> {
    config.validate()?;
    let grid = config.grid()?;
    let mut y0 = nn::init(
        &config.y0_architecture(model)?,
        substream(config.seed, 0),
        InitScheme::UniformScaled,
    );
    let mut z = nn::init(
        &config.z_architecture(model)?,
        substream(config.seed, 1),
        InitScheme::UniformScaled,
    );
    let n_params = y0.theta.len() + z.theta.len();
    let mut opt = LrState::new(config.lr.clone(), n_params)?;
    let eval_seed = substream(config.seed, u64::MAX);
    let eval_n = config.eval_batch.unwrap_or(config.batch);

    let tape = Tape::new();
    let mut trace = TrainTrace::default();
    let mut recent: std::collections::VecDeque<f64> =
        std::collections::VecDeque::with_capacity(MOVING_AVG_WINDOW);
    let started = std::time::Instant::now();
    let mut joint = vec![0.0; n_params];

    for m in 1..=config.iterations {
        let sample_seed = substream(config.seed, m as u64);
        let (loss, grad, _) = match loss_fbsde(&y0, &z, model, sample_seed, config, &tape) {
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

        joint[..y0.theta.len()].copy_from_slice(&y0.theta);
        joint[y0.theta.len()..].copy_from_slice(&z.theta);
        if let Err(e) = crate::solver_mfc::sgd_step(&mut joint, &grad, &mut opt) {
            return Err(TrainError::Diverged {
                iteration: m,
                message: e.to_string(),
                trace,
            });
        }
        let split = y0.theta.len();
        y0.theta.copy_from_slice(&joint[..split]);
        z.theta.copy_from_slice(&joint[split..]);

        if m % config.eval_every == 0 || m == config.iterations {
            let eval = eval_fbsde(&y0, &z, model, &grid, eval_n, eval_seed).map_err(|e| {
                TrainError::Diverged {
                    iteration: m,
                    message: format!("evaluation rollout failed: {e}"),
                    trace: trace.clone(),
                }
            })?;
            let record = TraceRecord {
                iteration: m,
                sampled_loss: loss,
                loss_avg: recent.iter().sum::<f64>() / recent.len() as f64,
                eval_loss: eval.loss,
                l2_error: None,
                wall_secs: started.elapsed().as_secs_f64(),
            };
            on_eval(m, &y0, &z, &record);
            trace.records.push(record);
        }
    }

    Ok(FbsdeTrainOutcome { y0, z, trace })
}

/// One point of the Y0-versus-rho curve.
#[derive(Debug, Clone)]
pub struct RhoPoint {
    pub rho: f64,
    pub seed: u64,
    /// `(y0_estimate, final_eval_loss)` or the failure message.
    pub outcome: Result<(f64, f64), String>,
}

/// Trains one model per rho and reports `y0_net(x0)`. Runs are independent
/// and seed-controlled; per-rho failures are reported in place and the rest
/// of the curve is still returned. Requires a deterministic (point mass)
/// initial state so Y0 is a scalar readout.
pub fn y0_vs_rho_curve<M, F>(
    family: F,
    rho_list: &[f64],
    config: &FbsdeTrainConfig,
) -> Vec<RhoPoint>
where
    M: FbsdeModel,
    F: Fn(f64) -> M,
{
    let mut curve = Vec::with_capacity(rho_list.len());
    for (idx, &rho) in rho_list.iter().enumerate() {
        let model = family(rho);
        let seed = substream(config.seed, 0x5000 + idx as u64);
        let mut cfg = config.clone();
        cfg.seed = seed;
        let outcome = match model.x0_point() {
            None => Err("Y0 curve requires a point-mass initial state".to_string()),
            Some(x0) => match train_fbsde(&model, &cfg, |_, _, _, _| {}) {
                Ok(out) => {
                    let y0_val = nn::forward(&out.y0.arch, &out.y0.theta, &x0)[0];
                    let eval_loss = out.trace.last().map(|r| r.eval_loss).unwrap_or(f64::NAN);
                    Ok((y0_val, eval_loss))
                }
                Err(e) => Err(e.to_string()),
            },
        };
        curve.push(RhoPoint { rho, seed, outcome });
    }
    curve
}

impl Ensemble {
    /// Draws `n` i.i.d. initial states from an FBSDE model's mu_0.
    pub fn sample_x0_fbsde<M: FbsdeModel>(model: &M, n: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let dim = model.dim_x();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut states = vec![0.0; n * dim];
        for i in 0..n {
            model.sample_x0(&mut rng, &mut states[i * dim..(i + 1) * dim]);
        }
        Ensemble { states, n, dim }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_sincos_fbsde, CnState, CommonNoiseSpec};
    use crate::nn::Activation;

    fn id_arch(input: usize, output: usize) -> Architecture {
        Architecture::new(vec![input, output], Activation::Tanh).unwrap()
    }

    fn tiny_cfg() -> FbsdeTrainConfig {
        FbsdeTrainConfig {
            iterations: 5,
            batch: 4,
            horizon: 1.0,
            n_steps: 3,
            lr: LrSchedule::Constant { eta: 0.05 },
            seed: 17,
            eval_every: 2,
            eval_batch: None,
            y0_hidden: vec![4],
            z_hidden: vec![4],
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn constant_y_when_driver_and_z_vanish() {
        // F = 0 (sincos), z = 0, y0 = c: Y_T = c for every particle
        let model = make_sincos_fbsde(0.4, 0.3, 1.0);
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let n = 6;
        let ens0 = Ensemble::sample_x0_fbsde(&model, n, 1);
        let noise = sample_noise(&grid, n, 1, &CommonNoiseSpec::None, 2).unwrap();

        let y0_arch = id_arch(1, 1);
        let c = -0.37;
        let y0_theta = vec![0.0, c]; // weight 0, bias c
        let z_arch = id_arch(2, 1);
        let z_theta = vec![0.0, 0.0, 0.0];

        let run = fbsde_rollout::<f64, _>(
            (),
            &model,
            &y0_arch,
            &y0_theta,
            &z_arch,
            &z_theta,
            &ens0,
            &noise,
            &grid,
        )
        .unwrap();
        for i in 0..n {
            assert_eq!(run.rollout.y(grid.n_steps(), i, 0), c);
        }
    }

    #[test]
    fn sincos_rho_zero_forward_is_pure_diffusion() {
        let sigma = 0.5;
        let model = make_sincos_fbsde(0.0, sigma, 1.0);
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let n = 3;
        let ens0 = Ensemble::sample_x0_fbsde(&model, n, 1);
        let noise = sample_noise(&grid, n, 1, &CommonNoiseSpec::None, 9).unwrap();

        let y0_arch = id_arch(1, 1);
        let z_arch = id_arch(2, 1);
        let run = fbsde_rollout::<f64, _>(
            (),
            &model,
            &y0_arch,
            &[0.3, 0.1],
            &z_arch,
            &[0.1, -0.2, 0.05],
            &ens0,
            &noise,
            &grid,
        )
        .unwrap();
        for i in 0..n {
            let sum_dw: f64 = (0..grid.n_steps()).map(|s| noise.increment(s, i, 0)).sum();
            let want = 1.0 + sigma * sum_dw;
            assert!(
                (run.rollout.x(grid.n_steps(), i, 0) - want).abs() < 1e-12,
                "particle {i}"
            );
        }
    }

    /// Y replicates X when B = 0, F = 0, G = id, y0 = id, z = sigma.
    struct Replication {
        sigma: f64,
    }

    impl FbsdeModel for Replication {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_y(&self) -> usize {
            1
        }
        fn fwd_drift<S: Scalar>(
            &self,
            _t: f64,
            x: &[S],
            _mu: &MeasureStats<S>,
            _y: &[S],
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = x[0].constant_like(0.0);
        }
        fn vol<S: Scalar>(
            &self,
            _t: f64,
            x: &[S],
            _mu: &MeasureStats<S>,
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = x[0].constant_like(self.sigma);
        }
        fn driver<S: Scalar>(
            &self,
            _t: f64,
            x: &[S],
            _mu: &MeasureStats<S>,
            _y: &[S],
            _stz: &[S],
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = x[0].constant_like(0.0);
        }
        fn terminal<S: Scalar>(
            &self,
            x: &[S],
            _mu: &MeasureStats<S>,
            _cn: &CnState,
            out: &mut [S],
        ) {
            out[0] = x[0];
        }
        fn sample_x0(&self, _rng: &mut rand_chacha::ChaCha12Rng, out: &mut [f64]) {
            out[0] = 0.8;
        }
        fn x0_point(&self) -> Option<Vec<f64>> {
            Some(vec![0.8])
        }
    }

    #[test]
    fn replication_has_zero_loss_and_zero_gradient() {
        let sigma = 0.6;
        let model = Replication { sigma };
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let n = 3;
        let ens0 = Ensemble::sample_x0_fbsde(&model, n, 1);
        let noise = sample_noise(&grid, n, 1, &CommonNoiseSpec::None, 5).unwrap();

        let y0_arch = id_arch(1, 1);
        let y0_theta = vec![1.0, 0.0]; // identity
        let z_arch = id_arch(2, 1);
        let z_theta = vec![0.0, 0.0, sigma]; // constant sigma

        let tape = Tape::new();
        let y0_v: Vec<Var> = y0_theta
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(i, *v))
            .collect();
        let z_v: Vec<Var> = z_theta
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(2 + i, *v))
            .collect();
        let run = fbsde_rollout::<Var, _>(
            &tape, &model, &y0_arch, &y0_v, &z_arch, &z_v, &ens0, &noise, &grid,
        )
        .unwrap();
        assert_eq!(run.rollout.loss, 0.0);
        for gap in &run.rollout.terminal_gap_sq {
            assert_eq!(*gap, 0.0);
        }
        let grad = tape.backward(run.loss_s).unwrap();
        for (i, g) in grad.iter().enumerate() {
            assert_eq!(*g, 0.0, "gradient component {i}");
        }
    }

    #[test]
    fn rollout_loss_matches_post_hoc_recomputation() {
        let model = make_sincos_fbsde(0.5, 0.4, 1.0);
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let n = 8;
        let ens0 = Ensemble::sample_x0_fbsde(&model, n, 3);
        let noise = sample_noise(&grid, n, 1, &CommonNoiseSpec::None, 4).unwrap();
        let cfg = tiny_cfg();
        let y0 = nn::init(&cfg.y0_architecture(&model).unwrap(), 1, InitScheme::UniformScaled);
        let z = nn::init(&cfg.z_architecture(&model).unwrap(), 2, InitScheme::UniformScaled);
        let run = fbsde_rollout::<f64, _>(
            (),
            &model,
            &y0.arch,
            &y0.theta,
            &z.arch,
            &z.theta,
            &ens0,
            &noise,
            &grid,
        )
        .unwrap();

        // recompute mean squared terminal mismatch from stored trajectories
        let last = grid.n_steps();
        let mut stats_scratch = Vec::new();
        let xt: Vec<f64> = (0..n).map(|i| run.rollout.x(last, i, 0)).collect();
        let mu = MeasureStats::from_points(&xt, n, 1, &mut stats_scratch);
        let mut acc = 0.0;
        let mut g = [0.0];
        for i in 0..n {
            model.terminal(&[xt[i]], &mu, &CnState::default(), &mut g);
            let d = run.rollout.y(last, i, 0) - g[0];
            acc += d * d;
        }
        acc /= n as f64;
        assert!((acc - run.rollout.loss).abs() < 1e-10);
        assert!(run.rollout.loss >= 0.0);
    }

    #[test]
    fn shooting_gradient_matches_finite_differences() {
        let model = make_sincos_fbsde(0.5, 0.4, 1.0);
        let mut cfg = tiny_cfg();
        cfg.batch = 2;
        cfg.n_steps = 2;
        let y0 = nn::init(&cfg.y0_architecture(&model).unwrap(), 1, InitScheme::UniformScaled);
        let z = nn::init(&cfg.z_architecture(&model).unwrap(), 2, InitScheme::UniformScaled);
        let tape = Tape::new();
        let seed = 99;
        let (_, grad, _) = loss_fbsde(&y0, &z, &model, seed, &cfg, &tape).unwrap();

        let mut work_y0 = y0.clone();
        let mut work_z = z.clone();
        let n_y0 = y0.theta.len();
        for i in 0..n_y0 + z.theta.len() {
            let slot = if i < n_y0 {
                &mut work_y0.theta[i]
            } else {
                &mut work_z.theta[i - n_y0]
            };
            let orig = *slot;
            let h = 1e-5 * orig.abs().max(1.0);
            *slot = orig + h;
            let up = loss_fbsde(&work_y0, &work_z, &model, seed, &cfg, &tape).unwrap().0;
            let slot = if i < n_y0 {
                &mut work_y0.theta[i]
            } else {
                &mut work_z.theta[i - n_y0]
            };
            *slot = orig - h;
            let down = loss_fbsde(&work_y0, &work_z, &model, seed, &cfg, &tape).unwrap().0;
            let slot = if i < n_y0 {
                &mut work_y0.theta[i]
            } else {
                &mut work_z.theta[i - n_y0]
            };
            *slot = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: ad={} fd={fd}", grad[i]);
        }
    }

    #[test]
    fn training_reduces_eval_loss_and_is_deterministic() {
        let model = make_sincos_fbsde(0.0, 0.4, 1.0);
        let cfg = FbsdeTrainConfig {
            iterations: 200,
            batch: 32,
            horizon: 1.0,
            n_steps: 8,
            lr: LrSchedule::Adam {
                eta: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            seed: 21,
            eval_every: 20,
            eval_batch: Some(64),
            y0_hidden: vec![8],
            z_hidden: vec![8],
            activation: Activation::Tanh,
        };
        let out = train_fbsde(&model, &cfg, |_, _, _, _| {}).unwrap();
        let first = out.trace.records.first().unwrap().eval_loss;
        let last = out.trace.last().unwrap().eval_loss;
        assert!(last < first, "no improvement: {first} -> {last}");

        let out2 = train_fbsde(&model, &cfg, |_, _, _, _| {}).unwrap();
        assert_eq!(out.y0.theta, out2.y0.theta);
        assert_eq!(out.z.theta, out2.z.theta);
    }

    #[test]
    fn empty_rho_list_gives_empty_curve() {
        let cfg = tiny_cfg();
        let curve = y0_vs_rho_curve(|rho| make_sincos_fbsde(rho, 0.4, 1.0), &[], &cfg);
        assert!(curve.is_empty());
    }
}
