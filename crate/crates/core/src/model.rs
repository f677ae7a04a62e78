//! Mean-field problem definitions: drift, volatility, running and terminal
//! costs, initial law and common-noise structure, plus the bundled test-case
//! presets.
//!
//! A model interacts with the population only through [`MeasureStats`]
//! (mean, second moment, and optionally the raw particle block), which keeps
//! rollouts O(N) per step. All coefficient methods are generic over
//! [`Scalar`] so the same definition runs untaped (`f64`) or taped (`Var`).
//!
//! Coefficient implementations must be pure: models are immutable after
//! construction and safe to evaluate from many workers at once.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Scalar;
use crate::nn::ClampBox;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// The control-cost weight must be strictly positive (the Riccati
    /// oracle requires strict convexity in the control).
    NonPositiveControlCost { r: f64 },
    NegativeVolatility { sigma: f64 },
    BadTargets { xi1: f64, xi2: f64 },
    BadCorrelation { rho: f64 },
    BadJump { jump_time: f64 },
    /// Operation defined only for linear-quadratic-family presets.
    UnsupportedModel { op: &'static str },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::NonPositiveControlCost { r } => {
                write!(f, "control cost weight must be > 0, got {r}")
            }
            ModelError::NegativeVolatility { sigma } => {
                write!(f, "volatility must be >= 0, got {sigma}")
            }
            ModelError::BadTargets { xi1, xi2 } => {
                write!(f, "targets must satisfy xi1 < xi2, got {xi1} >= {xi2}")
            }
            ModelError::BadCorrelation { rho } => {
                write!(f, "correlation must lie in [0, 1], got {rho}")
            }
            ModelError::BadJump { jump_time } => {
                write!(f, "jump time must be positive, got {jump_time}")
            }
            ModelError::UnsupportedModel { op } => {
                write!(f, "{op} requires a linear-quadratic-family model")
            }
        }
    }
}

impl std::error::Error for ModelError {}

/// Common-noise structure shared by all particles of a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommonNoiseSpec {
    None,
    /// A process that is 0 before `jump_time` and jumps to `-magnitude` or
    /// `+magnitude` (probability 1/2 each), keeping that value until T.
    TwoPointJump { jump_time: f64, magnitude: f64 },
    /// Idiosyncratic and common Brownian motions mixed as
    /// `rho dW0 + sqrt(1 - rho^2) dW`.
    CorrelatedBrownian { rho: f64 },
}

impl CommonNoiseSpec {
    pub fn two_point_jump(jump_time: f64, magnitude: f64) -> Result<Self, ModelError> {
        if !(jump_time > 0.0) || !jump_time.is_finite() {
            return Err(ModelError::BadJump { jump_time });
        }
        Ok(CommonNoiseSpec::TwoPointJump {
            jump_time,
            magnitude,
        })
    }

    pub fn correlated_brownian(rho: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(ModelError::BadCorrelation { rho });
        }
        Ok(CommonNoiseSpec::CorrelatedBrownian { rho })
    }
}

/// Realized common-noise value visible to coefficients at one time step.
#[derive(Debug, Clone, Copy, Default)]
pub struct CnState {
    /// Current value of the jump process (0 when there is no common noise
    /// or before the jump).
    pub eps0: f64,
}

/// Summary statistics of the empirical measure coupling the dynamics.
pub struct MeasureStats<'a, S: Scalar> {
    /// Per-coordinate mean over particles.
    pub mean: Vec<S>,
    /// Mean of |x|^2 over particles.
    pub second_moment: S,
    /// Flattened `n x dim` particle block, for models that need the full
    /// empirical interaction.
    pub raw_points: Option<&'a [S]>,
}

impl<'a, S: Scalar> MeasureStats<'a, S> {
    /// Computes mean and second moment from a flattened `n x dim` block.
    /// Summation order is fixed (particle index ascending) so taped and
    /// untaped evaluations agree bitwise.
    pub fn from_points(points: &'a [S], n: usize, dim: usize, scratch: &mut Vec<S>) -> Self {
        assert_eq!(points.len(), n * dim);
        assert!(n >= 1, "empty ensemble");
        let mut mean = Vec::with_capacity(dim);
        for j in 0..dim {
            scratch.clear();
            scratch.extend((0..n).map(|i| points[i * dim + j]));
            mean.push(S::mean(scratch));
        }
        scratch.clear();
        for i in 0..n {
            let mut sq = points[i * dim] * points[i * dim];
            for j in 1..dim {
                let v = points[i * dim + j];
                sq = sq + v * v;
            }
            scratch.push(sq);
        }
        let second_moment = S::mean(scratch);
        MeasureStats {
            mean,
            second_moment,
            raw_points: Some(points),
        }
    }
}

/// A mean-field control problem: dynamics `dX = b dt + sigma dW` and cost
/// `E[ integral of f dt + g(X_T) ]`, with coefficients depending on the
/// empirical measure.
pub trait Model {
    fn dim_x(&self) -> usize;
    fn dim_alpha(&self) -> usize;
    fn dim_w(&self) -> usize {
        self.dim_x()
    }
    fn common_noise(&self) -> CommonNoiseSpec {
        CommonNoiseSpec::None
    }
    /// Optional box constraint applied to the control after the network.
    fn clamp(&self) -> Option<&ClampBox> {
        None
    }
    /// Number of feedback inputs: time, state coordinates, and the jump
    /// value when the model carries two-point-jump common noise.
    fn feedback_dim(&self) -> usize {
        let cn = match self.common_noise() {
            CommonNoiseSpec::TwoPointJump { .. } => 1,
            _ => 0,
        };
        1 + self.dim_x() + cn
    }

    fn drift<S: Scalar>(
        &self,
        t: f64,
        x: &[S],
        mu: &MeasureStats<S>,
        alpha: &[S],
        cn: &CnState,
        out: &mut [S],
    );

    /// Volatility matrix, row-major `dim_x x dim_w`.
    fn vol<S: Scalar>(&self, t: f64, x: &[S], mu: &MeasureStats<S>, cn: &CnState, out: &mut [S]);

    fn running_cost<S: Scalar>(
        &self,
        t: f64,
        x: &[S],
        mu: &MeasureStats<S>,
        alpha: &[S],
        cn: &CnState,
    ) -> S;

    fn terminal_cost<S: Scalar>(&self, x: &[S], mu: &MeasureStats<S>, cn: &CnState) -> S;

    /// Draws one initial state from mu_0.
    fn sample_x0(&self, rng: &mut ChaCha12Rng, out: &mut [f64]);

    /// `(B, R)` of a quadratic-in-control running cost `R |alpha|^2` with
    /// linear-in-control drift `B alpha`, when the model has that shape.
    fn lq_control_coeffs(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Hamiltonian minimizer for LQ-family models:
/// `argmin_a { B a y + R a^2 } = -B y / (2 R)`. Used only by the benchmark
/// oracles.
pub fn hat_alpha_lq<M: Model>(model: &M, _t: f64, _x: &[f64], _mu_mean: &[f64], y: &[f64])
    -> Result<Vec<f64>, ModelError> {
    let (b, r) = model
        .lq_control_coeffs()
        .ok_or(ModelError::UnsupportedModel { op: "hat_alpha_lq" })?;
    Ok(y.iter().map(|yi| -b * yi / (2.0 * r)).collect())
}

/// |x| built from the elementary op set; ties at 0 take the `+x` branch.
fn abs_s<S: Scalar>(x: S) -> S {
    x.max_val(-x)
}

fn sample_gaussian(rng: &mut ChaCha12Rng, mean: f64, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + std * z
}

// ---------------------------------------------------------------------------
// Test case 1: linear-quadratic mean field control
// ---------------------------------------------------------------------------

/// One-dimensional LQ mean-field control problem:
///
/// ```text
/// b = A x + Abar mubar + B v
/// f = Q x^2 + Qbar (mubar - S x)^2 + R v^2
/// g = Q_T x^2 + Qbar_T (mubar - S_T x)^2
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LqMfc {
    pub a: f64,
    pub abar: f64,
    pub b: f64,
    pub q: f64,
    pub qbar: f64,
    pub r: f64,
    pub s: f64,
    pub q_t: f64,
    pub qbar_t: f64,
    pub s_t: f64,
    pub sigma: f64,
    pub mu0_mean: f64,
    pub mu0_std: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn make_lq(
    a: f64,
    abar: f64,
    b: f64,
    q: f64,
    qbar: f64,
    r: f64,
    s: f64,
    q_t: f64,
    qbar_t: f64,
    s_t: f64,
    sigma: f64,
    mu0_mean: f64,
    mu0_std: f64,
) -> Result<LqMfc, ModelError> {
    if !(r > 0.0) {
        return Err(ModelError::NonPositiveControlCost { r });
    }
    if sigma < 0.0 {
        return Err(ModelError::NegativeVolatility { sigma });
    }
    Ok(LqMfc {
        a,
        abar,
        b,
        q,
        qbar,
        r,
        s,
        q_t,
        qbar_t,
        s_t,
        sigma,
        mu0_mean,
        mu0_std,
    })
}

impl Model for LqMfc {
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
        mu: &MeasureStats<S>,
        alpha: &[S],
        _cn: &CnState,
        out: &mut [S],
    ) {
        out[0] = x[0].mul_c(self.a) + mu.mean[0].mul_c(self.abar) + alpha[0].mul_c(self.b);
    }

    fn vol<S: Scalar>(&self, _t: f64, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState, out: &mut [S]) {
        out[0] = x[0].constant_like(self.sigma);
    }

    fn running_cost<S: Scalar>(
        &self,
        _t: f64,
        x: &[S],
        mu: &MeasureStats<S>,
        alpha: &[S],
        _cn: &CnState,
    ) -> S {
        let track = mu.mean[0] - x[0].mul_c(self.s);
        x[0].powi(2).mul_c(self.q) + track.powi(2).mul_c(self.qbar) + alpha[0].powi(2).mul_c(self.r)
    }

    fn terminal_cost<S: Scalar>(&self, x: &[S], mu: &MeasureStats<S>, _cn: &CnState) -> S {
        let track = mu.mean[0] - x[0].mul_c(self.s_t);
        x[0].powi(2).mul_c(self.q_t) + track.powi(2).mul_c(self.qbar_t)
    }

    fn sample_x0(&self, rng: &mut ChaCha12Rng, out: &mut [f64]) {
        out[0] = sample_gaussian(rng, self.mu0_mean, self.mu0_std);
    }

    fn lq_control_coeffs(&self) -> Option<(f64, f64)> {
        Some((self.b, self.r))
    }
}

// ---------------------------------------------------------------------------
// Test case 2: min-LQG (two-target terminal cost)
// ---------------------------------------------------------------------------

/// Controlled drift `b = v`, quadratic control cost `f = v^2`, and the
/// two-target terminal cost `g(x) = min(|x - xi1|, |x - xi2|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinLqg {
    pub xi1: f64,
    pub xi2: f64,
    pub sigma: f64,
    pub mu0_mean: f64,
    pub mu0_std: f64,
}

pub fn make_minlqg(
    xi1: f64,
    xi2: f64,
    sigma: f64,
    mu0_mean: f64,
    mu0_std: f64,
) -> Result<MinLqg, ModelError> {
    if xi1 >= xi2 {
        return Err(ModelError::BadTargets { xi1, xi2 });
    }
    if sigma < 0.0 {
        return Err(ModelError::NegativeVolatility { sigma });
    }
    Ok(MinLqg {
        xi1,
        xi2,
        sigma,
        mu0_mean,
        mu0_std,
    })
}

impl Model for MinLqg {
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

    fn vol<S: Scalar>(&self, _t: f64, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState, out: &mut [S]) {
        out[0] = x[0].constant_like(self.sigma);
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
        let d1 = abs_s(x[0].add_c(-self.xi1));
        let d2 = abs_s(x[0].add_c(-self.xi2));
        d1.min_val(d2)
    }

    fn sample_x0(&self, rng: &mut ChaCha12Rng, out: &mut [f64]) {
        out[0] = sample_gaussian(rng, self.mu0_mean, self.mu0_std);
    }

    fn lq_control_coeffs(&self) -> Option<(f64, f64)> {
        Some((1.0, 1.0))
    }
}

// ---------------------------------------------------------------------------
// Test case 5: mean field control with two-point-jump common noise
// ---------------------------------------------------------------------------

/// Targets `+-c_T` revealed at `jump_time`; terminal cost
/// `(x - eps0_T)^2 + K_T (x - E[X_T | eps0])^2`, running cost `|v|^2`.
/// The conditional mean is realized scenario-wise: one common-noise draw per
/// rollout, so the conditional mean is that rollout's population mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonNoiseLq {
    pub c_t: f64,
    pub k_t: f64,
    pub sigma: f64,
    pub mu0_mean: f64,
    pub mu0_std: f64,
    pub jump_time: f64,
}

pub fn make_common_noise_lq(
    c_t: f64,
    k_t: f64,
    sigma: f64,
    mu0_mean: f64,
    mu0_std: f64,
    jump_time: f64,
) -> Result<CommonNoiseLq, ModelError> {
    if sigma < 0.0 {
        return Err(ModelError::NegativeVolatility { sigma });
    }
    // validates jump_time > 0; the upper bound is checked against the grid
    // when noise is sampled
    CommonNoiseSpec::two_point_jump(jump_time, c_t)?;
    Ok(CommonNoiseLq {
        c_t,
        k_t,
        sigma,
        mu0_mean,
        mu0_std,
        jump_time,
    })
}

impl Model for CommonNoiseLq {
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_alpha(&self) -> usize {
        1
    }

    fn common_noise(&self) -> CommonNoiseSpec {
        CommonNoiseSpec::TwoPointJump {
            jump_time: self.jump_time,
            magnitude: self.c_t,
        }
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

    fn vol<S: Scalar>(&self, _t: f64, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState, out: &mut [S]) {
        out[0] = x[0].constant_like(self.sigma);
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

    fn terminal_cost<S: Scalar>(&self, x: &[S], mu: &MeasureStats<S>, cn: &CnState) -> S {
        let to_target = x[0].add_c(-cn.eps0);
        let to_mean = x[0] - mu.mean[0];
        to_target.powi(2) + to_mean.powi(2).mul_c(self.k_t)
    }

    fn sample_x0(&self, rng: &mut ChaCha12Rng, out: &mut [f64]) {
        out[0] = sample_gaussian(rng, self.mu0_mean, self.mu0_std);
    }

    fn lq_control_coeffs(&self) -> Option<(f64, f64)> {
        Some((1.0, 1.0))
    }
}

// ---------------------------------------------------------------------------
// Generic McKean-Vlasov FBSDE specification (Method 2 targets)
// ---------------------------------------------------------------------------

/// A forward-backward system
///
/// ```text
/// dX =  B(t, X, mu, Y) dt + vol(t, X, mu) dW
/// dY = -F(t, X, mu, Y, sigma^T z) dt + z(t, X) dW,   Y_T = G(X_T, mu_T)
/// ```
///
/// The sign convention for the driver matches `dY = -F dt + z dW`.
pub trait FbsdeModel {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn dim_w(&self) -> usize {
        self.dim_x()
    }
    fn common_noise(&self) -> CommonNoiseSpec {
        CommonNoiseSpec::None
    }

    fn fwd_drift<S: Scalar>(
        &self,
        t: f64,
        x: &[S],
        mu: &MeasureStats<S>,
        y: &[S],
        cn: &CnState,
        out: &mut [S],
    );

    fn vol<S: Scalar>(&self, t: f64, x: &[S], mu: &MeasureStats<S>, cn: &CnState, out: &mut [S]);

    /// Backward driver `F(t, x, mu, y, sigma^T z)`.
    fn driver<S: Scalar>(
        &self,
        t: f64,
        x: &[S],
        mu: &MeasureStats<S>,
        y: &[S],
        stz: &[S],
        cn: &CnState,
        out: &mut [S],
    );

    /// Terminal map `G(x_T, mu_T)`.
    fn terminal<S: Scalar>(&self, x: &[S], mu: &MeasureStats<S>, cn: &CnState, out: &mut [S]);

    fn sample_x0(&self, rng: &mut ChaCha12Rng, out: &mut [f64]);

    /// The deterministic initial point, when mu_0 is a point mass.
    fn x0_point(&self) -> Option<Vec<f64>> {
        None
    }
}

// ---------------------------------------------------------------------------
// Test case 3: sin/cos FBSDE (no measure coupling)
// ---------------------------------------------------------------------------

/// `dX = rho cos(Y) dt + sigma dW`, `Y_T = sin(X_T)`, driver `F = 0`.
/// At `rho = 0` the forward equation decouples and `X_T = x0 + sigma W_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinCosFbsde {
    pub rho: f64,
    pub sigma: f64,
    pub x0: f64,
}

pub fn make_sincos_fbsde(rho: f64, sigma: f64, x0: f64) -> SinCosFbsde {
    SinCosFbsde { rho, sigma, x0 }
}

impl FbsdeModel for SinCosFbsde {
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_y(&self) -> usize {
        1
    }

    fn fwd_drift<S: Scalar>(
        &self,
        _t: f64,
        _x: &[S],
        _mu: &MeasureStats<S>,
        y: &[S],
        _cn: &CnState,
        out: &mut [S],
    ) {
        out[0] = y[0].cos().mul_c(self.rho);
    }

    fn vol<S: Scalar>(&self, _t: f64, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState, out: &mut [S]) {
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

    fn terminal<S: Scalar>(&self, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState, out: &mut [S]) {
        out[0] = x[0].sin();
    }

    fn sample_x0(&self, _rng: &mut ChaCha12Rng, out: &mut [f64]) {
        out[0] = self.x0;
    }

    fn x0_point(&self) -> Option<Vec<f64>> {
        Some(vec![self.x0])
    }
}

// ---------------------------------------------------------------------------
// Test case 4: arctan mean field game
// ---------------------------------------------------------------------------

/// MFG FBSDE `dX = -rho Y dt + sigma dW`,
/// `dY = arctan(E[X_t]) dt + Z dW`, `Y_T = arctan(X_T)`.
/// In the generic sign convention `dY = -F dt + z dW` this is
/// `F(t, x, mu, y, z) = -arctan(mubar)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtanMfg {
    pub rho: f64,
    pub sigma: f64,
    pub x0: f64,
}

pub fn make_atan_mfg(rho: f64, sigma: f64, x0: f64) -> AtanMfg {
    AtanMfg { rho, sigma, x0 }
}

impl FbsdeModel for AtanMfg {
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_y(&self) -> usize {
        1
    }

    fn fwd_drift<S: Scalar>(
        &self,
        _t: f64,
        _x: &[S],
        _mu: &MeasureStats<S>,
        y: &[S],
        _cn: &CnState,
        out: &mut [S],
    ) {
        out[0] = y[0].mul_c(-self.rho);
    }

    fn vol<S: Scalar>(&self, _t: f64, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState, out: &mut [S]) {
        out[0] = x[0].constant_like(self.sigma);
    }

    fn driver<S: Scalar>(
        &self,
        _t: f64,
        _x: &[S],
        mu: &MeasureStats<S>,
        _y: &[S],
        _stz: &[S],
        _cn: &CnState,
        out: &mut [S],
    ) {
        out[0] = -mu.mean[0].atan();
    }

    fn terminal<S: Scalar>(&self, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState, out: &mut [S]) {
        out[0] = x[0].atan();
    }

    fn sample_x0(&self, _rng: &mut ChaCha12Rng, out: &mut [f64]) {
        out[0] = self.x0;
    }

    fn x0_point(&self) -> Option<Vec<f64>> {
        Some(vec![self.x0])
    }
}

// ---------------------------------------------------------------------------
// Test case 6: mean field game for systemic risk
// ---------------------------------------------------------------------------

/// Interbank lending game with common noise:
///
/// ```text
/// dX = [a (mbar - X) + alpha] dt + sigma (rho dW0 + sqrt(1 - rho^2) dW)
/// running cost: alpha^2/2 - q alpha (mbar - X) + (eps/2)(mbar - X)^2
/// terminal cost: (c/2)(mbar - X)^2
/// ```
///
/// The associated FBSDE (from the stochastic maximum principle, with
/// `alpha_hat = q (mbar - x) - y`):
///
/// ```text
/// B = (a + q)(mbar - x) - y
/// F = -(a + q) y - (eps - q^2)(mbar - x)
/// G = c (x - mbar)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SystemicRisk {
    pub a: f64,
    pub q: f64,
    pub eps: f64,
    pub c: f64,
    pub rho: f64,
    pub sigma: f64,
    pub x0_mean: f64,
    pub x0_std: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn make_systemic_risk(
    a: f64,
    q: f64,
    eps: f64,
    c: f64,
    rho: f64,
    sigma: f64,
    x0_mean: f64,
    x0_std: f64,
) -> Result<SystemicRisk, ModelError> {
    CommonNoiseSpec::correlated_brownian(rho)?;
    if q > eps * eps {
        // the q <= eps^2 convexity condition; warn rather than reject
        log::warn!(
            "systemic-risk parameters violate q <= eps^2 (q = {q}, eps^2 = {}); \
             the running cost may fail to be jointly convex",
            eps * eps
        );
    }
    Ok(SystemicRisk {
        a,
        q,
        eps,
        c,
        rho,
        sigma,
        x0_mean,
        x0_std,
    })
}

impl SystemicRisk {
    /// Per-agent running cost `alpha^2/2 - q alpha (mbar - x) + eps/2 (mbar - x)^2`.
    pub fn running_cost(&self, x: f64, mbar: f64, alpha: f64) -> f64 {
        0.5 * alpha * alpha - self.q * alpha * (mbar - x) + 0.5 * self.eps * (mbar - x) * (mbar - x)
    }

    /// Optimal feedback `alpha_hat = q (mbar - x) - y`.
    pub fn optimal_control(&self, x: f64, mbar: f64, y: f64) -> f64 {
        self.q * (mbar - x) - y
    }
}

impl FbsdeModel for SystemicRisk {
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_y(&self) -> usize {
        1
    }

    fn common_noise(&self) -> CommonNoiseSpec {
        CommonNoiseSpec::CorrelatedBrownian { rho: self.rho }
    }

    fn fwd_drift<S: Scalar>(
        &self,
        _t: f64,
        x: &[S],
        mu: &MeasureStats<S>,
        y: &[S],
        _cn: &CnState,
        out: &mut [S],
    ) {
        let gap = mu.mean[0] - x[0];
        out[0] = gap.mul_c(self.a + self.q) - y[0];
    }

    fn vol<S: Scalar>(&self, _t: f64, x: &[S], _mu: &MeasureStats<S>, _cn: &CnState, out: &mut [S]) {
        out[0] = x[0].constant_like(self.sigma);
    }

    fn driver<S: Scalar>(
        &self,
        _t: f64,
        x: &[S],
        mu: &MeasureStats<S>,
        y: &[S],
        _stz: &[S],
        _cn: &CnState,
        out: &mut [S],
    ) {
        let gap = mu.mean[0] - x[0];
        out[0] = -(y[0].mul_c(self.a + self.q)) - gap.mul_c(self.eps - self.q * self.q);
    }

    fn terminal<S: Scalar>(&self, x: &[S], mu: &MeasureStats<S>, _cn: &CnState, out: &mut [S]) {
        out[0] = (x[0] - mu.mean[0]).mul_c(self.c);
    }

    fn sample_x0(&self, rng: &mut ChaCha12Rng, out: &mut [f64]) {
        out[0] = sample_gaussian(rng, self.x0_mean, self.x0_std);
    }

    fn x0_point(&self) -> Option<Vec<f64>> {
        if self.x0_std == 0.0 {
            Some(vec![self.x0_mean])
        } else {
            None
        }
    }
}
