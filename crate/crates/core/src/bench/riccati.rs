//! Riccati ODE benchmarks for the linear-quadratic test cases.
//!
//! The coefficient ODEs are derived from the mean/deviation decomposition of
//! the LQ mean-field problem (they are not tabulated anywhere); the
//! cross-validation tests against the finite-difference PDE oracle and
//! against particle simulations are what qualifies them as benchmarks.
//!
//! For the LQ control problem, write `X = mubar + D` with `mubar = E[X]`.
//! The mean and the deviation solve independent LQ problems, giving two
//! scalar Riccati equations (backward in time, `'` = d/dt):
//!
//! ```text
//! p_d' = -2 A p_d + B^2 p_d^2 / R - (Q + Qbar S^2),
//!        p_d(T) = Q_T + Qbar_T S_T^2
//! p_m' = -2 (A + Abar) p_m + B^2 p_m^2 / R - (Q + Qbar (1-S)^2),
//!        p_m(T) = Q_T + Qbar_T (1-S_T)^2
//! s'   = -sigma^2 p_d,   s(T) = 0
//! ```
//!
//! with optimal feedback `alpha(t, x) = -(B/R) (p_d x + (p_m - p_d) mubar_t)`
//! and mean flow `mubar' = (A + Abar - B^2 p_m / R) mubar`. The optimal cost
//! from `mu_0 = N(mean, var)` is `p_m(0) mean^2 + p_d(0) var + s(0)`.
//!
//! For the systemic-risk game, the ansatz `Y_t = eta_t (X_t - mbar_t)`
//! reduces the FBSDE to
//!
//! ```text
//! eta' = 2 (a + q) eta + eta^2 - (eps - q^2),   eta(T) = c
//! ```
//!
//! with optimal control `alpha_t = (q + eta_t)(mbar_t - X_t)`.

use std::fmt;
use std::io::Write;

use crate::bench::BenchError;
use crate::model::{LqMfc, SystemicRisk};
use crate::simulate::TimeGrid;
use crate::util::fmt_f64;

/// Coefficient magnitude treated as a Riccati blow-up.
const BLOWUP_GUARD: f64 = 1e8;

/// RK4 sub-steps per grid step.
const SUBSTEPS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct BlowUp {
    pub t: f64,
    pub value: f64,
}

impl fmt::Display for BlowUp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Riccati coefficient blew up at t = {} (value {:e})",
            self.t, self.value
        )
    }
}

/// Backward RK4 integration from `t = horizon` down to 0 on a fine grid of
/// `n_steps * SUBSTEPS` intervals. Returns (ascending fine times, states at
/// those times).
fn rk4_backward<const K: usize>(
    grid: &TimeGrid,
    terminal: [f64; K],
    rhs: impl Fn(f64, &[f64; K]) -> [f64; K],
) -> Result<(Vec<f64>, Vec<[f64; K]>), BlowUp> {
    let n_fine = grid.n_steps() * SUBSTEPS;
    let h = grid.horizon() / n_fine as f64;
    let mut times = vec![0.0; n_fine + 1];
    let mut states = vec![[0.0; K]; n_fine + 1];
    times[n_fine] = grid.horizon();
    states[n_fine] = terminal;
    for idx in (0..n_fine).rev() {
        let t1 = (idx + 1) as f64 * h;
        let y1 = states[idx + 1];
        // integrate backward: step -h
        let k1 = rhs(t1, &y1);
        let k2 = rhs(t1 - 0.5 * h, &axpy(&y1, -0.5 * h, &k1));
        let k3 = rhs(t1 - 0.5 * h, &axpy(&y1, -0.5 * h, &k2));
        let k4 = rhs(t1 - h, &axpy(&y1, -h, &k3));
        let mut y0 = y1;
        for k in 0..K {
            y0[k] -= h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            if !y0[k].is_finite() || y0[k].abs() > BLOWUP_GUARD {
                return Err(BlowUp {
                    t: idx as f64 * h,
                    value: y0[k],
                });
            }
        }
        times[idx] = idx as f64 * h;
        states[idx] = y0;
    }
    Ok((times, states))
}

fn axpy<const K: usize>(y: &[f64; K], a: f64, k: &[f64; K]) -> [f64; K] {
    let mut out = *y;
    for i in 0..K {
        out[i] += a * k[i];
    }
    out
}

/// Linear interpolation on an ascending uniform time grid.
fn interp(times: &[f64], values: &[f64], t: f64) -> f64 {
    let n = times.len();
    if t <= times[0] {
        return values[0];
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    let h = times[1] - times[0];
    let idx = ((t - times[0]) / h) as usize;
    let idx = idx.min(n - 2);
    let w = (t - times[idx]) / h;
    values[idx] * (1.0 - w) + values[idx + 1] * w
}

/// Time-indexed Riccati coefficients for the LQ mean-field problem.
#[derive(Debug, Clone)]
pub struct LqRiccatiSolution {
    /// Fine integration grid (ascending).
    pub times: Vec<f64>,
    /// Deviation coefficient p_d(t).
    pub p_state: Vec<f64>,
    /// Mean coefficient p_m(t).
    pub p_mean: Vec<f64>,
    /// Constant term s(t) of the deviation value.
    pub s_offset: Vec<f64>,
    /// Optimal mean flow mubar(t) started from the model's mu_0 mean.
    pub mean_path: Vec<f64>,
    lq: LqMfc,
}

/// Integrates the LQ Riccati system backward with RK4 at `dt/10` resolution
/// and the mean flow forward along the optimal feedback.
pub fn riccati_lq_solve(lq: &LqMfc, grid: &TimeGrid) -> Result<LqRiccatiSolution, BenchError> {
    let q_d = lq.q + lq.qbar * lq.s * lq.s;
    let q_m = lq.q + lq.qbar * (1.0 - lq.s) * (1.0 - lq.s);
    let q_dt = lq.q_t + lq.qbar_t * lq.s_t * lq.s_t;
    let q_mt = lq.q_t + lq.qbar_t * (1.0 - lq.s_t) * (1.0 - lq.s_t);
    let b2r = lq.b * lq.b / lq.r;

    let (times, states) = rk4_backward(grid, [q_dt, q_mt, 0.0], |_t, y| {
        let [p_d, p_m, _s] = *y;
        [
            -2.0 * lq.a * p_d + b2r * p_d * p_d - q_d,
            -2.0 * (lq.a + lq.abar) * p_m + b2r * p_m * p_m - q_m,
            -lq.sigma * lq.sigma * p_d,
        ]
    })
    .map_err(BenchError::RiccatiBlowUp)?;

    let p_state: Vec<f64> = states.iter().map(|s| s[0]).collect();
    let p_mean: Vec<f64> = states.iter().map(|s| s[1]).collect();
    let s_offset: Vec<f64> = states.iter().map(|s| s[2]).collect();

    // forward mean flow: mubar' = (A + Abar - B^2 p_m / R) mubar
    let mut mean_path = vec![0.0; times.len()];
    mean_path[0] = lq.mu0_mean;
    let h = times[1] - times[0];
    for i in 0..times.len() - 1 {
        let rate_0 = lq.a + lq.abar - b2r * p_mean[i];
        let rate_1 = lq.a + lq.abar - b2r * p_mean[i + 1];
        let rate_half = 0.5 * (rate_0 + rate_1);
        // RK4 for the scalar linear ODE with interpolated coefficient
        let y = mean_path[i];
        let k1 = rate_0 * y;
        let k2 = rate_half * (y + 0.5 * h * k1);
        let k3 = rate_half * (y + 0.5 * h * k2);
        let k4 = rate_1 * (y + h * k3);
        mean_path[i + 1] = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }

    Ok(LqRiccatiSolution {
        times,
        p_state,
        p_mean,
        s_offset,
        mean_path,
        lq: lq.clone(),
    })
}

impl LqRiccatiSolution {
    pub fn p_state_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.p_state, t)
    }

    pub fn p_mean_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.p_mean, t)
    }

    pub fn mean_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.mean_path, t)
    }

    /// Optimal feedback `alpha(t, x) = -(B/R)(p_d x + (p_m - p_d) mubar_t)`.
    pub fn feedback(&self, t: f64, x: f64) -> f64 {
        let p_d = self.p_state_at(t);
        let p_m = self.p_mean_at(t);
        let mubar = self.mean_at(t);
        -(self.lq.b / self.lq.r) * (p_d * x + (p_m - p_d) * mubar)
    }

    /// Value of the control problem from `mu_0 = N(mean, var)`.
    pub fn optimal_cost(&self, mu0_mean: f64, mu0_var: f64) -> f64 {
        self.p_mean[0] * mu0_mean * mu0_mean + self.p_state[0] * mu0_var + self.s_offset[0]
    }

    /// Gradient of the adjoint `u(t, x) = p_d x^2 + 2 (p_m - p_d) mubar x + ...`,
    /// i.e. the quantity the HJB benchmark reports as `du/dx`.
    pub fn grad_u(&self, t: f64, x: f64) -> f64 {
        let p_d = self.p_state_at(t);
        let p_m = self.p_mean_at(t);
        2.0 * (p_d * x + (p_m - p_d) * self.mean_at(t))
    }

    pub fn dump_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "t,p_state,p_mean,s_offset,mean_path")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(self.times[i]),
                fmt_f64(self.p_state[i]),
                fmt_f64(self.p_mean[i]),
                fmt_f64(self.s_offset[i]),
                fmt_f64(self.mean_path[i])
            )?;
        }
        Ok(())
    }
}

/// Riccati benchmark for the systemic-risk game.
#[derive(Debug, Clone)]
pub struct SystemicRiccatiSolution {
    pub times: Vec<f64>,
    pub eta: Vec<f64>,
    model: SystemicRisk,
}

/// Integrates `eta' = 2(a+q) eta + eta^2 - (eps - q^2)` backward from
/// `eta(T) = c`.
pub fn riccati_systemic_solve(
    model: &SystemicRisk,
    grid: &TimeGrid,
) -> Result<SystemicRiccatiSolution, BenchError> {
    let (a, q, eps, c) = (model.a, model.q, model.eps, model.c);
    let (times, states) = rk4_backward(grid, [c], |_t, y| {
        let eta = y[0];
        [2.0 * (a + q) * eta + eta * eta - (eps - q * q)]
    })
    .map_err(BenchError::RiccatiBlowUp)?;
    Ok(SystemicRiccatiSolution {
        times,
        eta: states.iter().map(|s| s[0]).collect(),
        model: model.clone(),
    })
}

impl SystemicRiccatiSolution {
    pub fn eta_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.eta, t)
    }

    /// Adjoint oracle `Y_t = eta_t (x - mbar_t)`.
    pub fn y_oracle(&self, t: f64, x: f64, mbar: f64) -> f64 {
        self.eta_at(t) * (x - mbar)
    }

    /// Control oracle `alpha_t = (q + eta_t)(mbar_t - x)`.
    pub fn control_oracle(&self, t: f64, x: f64, mbar: f64) -> f64 {
        (self.model.q + self.eta_at(t)) * (mbar - x)
    }

    /// Exact Z loading on the idiosyncratic noise:
    /// `eta_t * sigma * sqrt(1 - rho^2)`.
    pub fn z_oracle(&self, t: f64) -> f64 {
        self.eta_at(t) * self.model.sigma * (1.0 - self.model.rho * self.model.rho).sqrt()
    }

    pub fn dump_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "t,eta")?;
        for i in 0..self.times.len() {
            writeln!(w, "{},{}", fmt_f64(self.times[i]), fmt_f64(self.eta[i]))?;
        }
        Ok(())
    }
}

/// Closed-form Y0 for the decoupled sin/cos FBSDE at rho = 0:
/// `E[sin(x0 + sigma W_T)] = sin(x0) exp(-sigma^2 T / 2)`.
pub fn analytic_y0_decoupled(x0: f64, sigma: f64, horizon: f64) -> f64 {
    x0.sin() * (-sigma * sigma * horizon / 2.0).exp()
}
