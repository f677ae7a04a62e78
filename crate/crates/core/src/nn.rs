//! Feed-forward networks used as feedback controls `(t, x) -> alpha`,
//! initial-value maps `y0(x)` and volatility maps `z(t, x)`.
//!
//! A network is a chain of affine layers with a common hidden activation and
//! an identity output layer. Parameters live in one flat `f64` vector so the
//! optimizers and the autodiff parameter slots can treat a network (or a
//! concatenation of networks) as a single point in R^p.
//!
//! # Parameter file format
//!
//! [`save_params`] writes a little-endian binary layout:
//!
//! ```text
//! bytes 0..4    magic "MFNP"
//! bytes 4..8    u32 format version (= 1)
//! bytes 8..12   u32 activation id (0 relu, 1 sigmoid, 2 tanh, 3 sine)
//! bytes 12..16  u32 number of layer dims L
//! then          L x u32 layer dims d0..d_{L-1}
//! then          u64 parameter count P
//! then          P x f64 parameters
//! ```
//!
//! Within the flat vector, layer i stores its weight matrix row-major
//! (shape `d_{i+1} x d_i`) followed by its bias vector (length `d_{i+1}`).

use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    BadArchitecture(String),
    DimensionMismatch { expected: usize, got: usize },
    BadClampBounds { index: usize },
    Io(String),
    BadFile(String),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::BadArchitecture(msg) => write!(f, "bad architecture: {msg}"),
            NnError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            NnError::BadClampBounds { index } => {
                write!(f, "clamp lower bound exceeds upper bound at coordinate {index}")
            }
            NnError::Io(msg) => write!(f, "i/o error: {msg}"),
            NnError::BadFile(msg) => write!(f, "bad parameter file: {msg}"),
        }
    }
}

impl std::error::Error for NnError {}

impl From<io::Error> for NnError {
    fn from(e: io::Error) -> Self {
        NnError::Io(e.to_string())
    }
}

/// Hidden-layer activation. The output layer is always the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// 2*pi-periodic activation.
    Sine,
}

impl Activation {
    fn id(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Tanh => 2,
            Activation::Sine => 3,
        }
    }

    fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Tanh),
            3 => Some(Activation::Sine),
            _ => None,
        }
    }

    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh(),
            Activation::Sine => x.sin(),
        }
    }

    /// Upper bound on |activation'|.
    pub fn slope_bound(self) -> f64 {
        match self {
            Activation::Relu | Activation::Tanh | Activation::Sine => 1.0,
            Activation::Sigmoid => 0.25,
        }
    }
}

/// Layer dimensions `[d0, ..., d_{l+1}]` plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self, NnError> {
        if layer_dims.len() < 2 {
            return Err(NnError::BadArchitecture(
                "need at least input and output dims".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(NnError::BadArchitecture("all dims must be >= 1".into()));
        }
        Ok(Self {
            layer_dims,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layer_dims.len() - 2
    }

    /// Total parameter count: sum over layers of `d_out * (d_in + 1)`.
    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum()
    }
}

/// Flat parameter vector bound to an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub arch: Architecture,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    UniformScaled,
    Zeros,
}

/// Deterministic initialization: the same `(arch, seed, scheme)` always
/// produces the same parameters.
pub fn init(arch: &Architecture, seed: u64, scheme: InitScheme) -> NetParams {
    let mut theta = vec![0.0; arch.param_count()];
    if let InitScheme::UniformScaled = scheme {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in arch.layer_dims.windows(2) {
            let (d_in, d_out) = (w[0], w[1]);
            let bound = 1.0 / (d_in as f64).sqrt();
            for v in theta[offset..offset + d_out * d_in].iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            offset += d_out * (d_in + 1); // biases stay zero
        }
    }
    NetParams {
        arch: arch.clone(),
        theta,
    }
}

/// Applies the network to `input`. Works on plain `f64` parameters or on
/// tape-lifted `Var` parameters; both produce bit-identical forward values.
pub fn forward<S: Scalar>(arch: &Architecture, theta: &[S], input: &[S]) -> Vec<S> {
    assert_eq!(
        theta.len(),
        arch.param_count(),
        "parameter vector length does not match architecture"
    );
    assert_eq!(
        input.len(),
        arch.input_dim(),
        "input length does not match architecture"
    );
    let n_layers = arch.layer_dims.len() - 1;
    let mut cur: Vec<S> = input.to_vec();
    let mut next: Vec<S> = Vec::new();
    let mut offset = 0;
    for (li, w) in arch.layer_dims.windows(2).enumerate() {
        let (d_in, d_out) = (w[0], w[1]);
        let weights = &theta[offset..offset + d_out * d_in];
        let biases = &theta[offset + d_out * d_in..offset + d_out * (d_in + 1)];
        offset += d_out * (d_in + 1);
        next.clear();
        for o in 0..d_out {
            let row = &weights[o * d_in..(o + 1) * d_in];
            let pre = S::dot_affine(row, &cur, biases[o]);
            let is_output = li == n_layers - 1;
            next.push(if is_output {
                pre
            } else {
                arch.activation.apply(pre)
            });
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Per-coordinate box constraint applied after the network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ClampBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, NnError> {
        if lo.len() != hi.len() {
            return Err(NnError::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if l > h {
                return Err(NnError::BadClampBounds { index: i });
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }
}

/// Coordinatewise clamp. The gradient is 1 inside the box and 0 outside;
/// infinite bounds are skipped so an unbounded box is the identity.
pub fn clamp_output<S: Scalar>(ctx: S::Ctx, v: &mut [S], b: &ClampBox) {
    assert_eq!(v.len(), b.dim(), "clamp box dimension mismatch");
    for (i, x) in v.iter_mut().enumerate() {
        let mut y = *x;
        if b.lo[i].is_finite() {
            y = y.max_val(S::constant(ctx, b.lo[i]));
        }
        if b.hi[i].is_finite() {
            y = y.min_val(S::constant(ctx, b.hi[i]));
        }
        *x = y;
    }
}

pub fn save_params<P: AsRef<Path>>(path: P, params: &NetParams) -> Result<(), NnError> {
    let mut f = File::create(path)?;
    write_params(&mut f, params)
}

pub fn write_params<W: Write>(w: &mut W, params: &NetParams) -> Result<(), NnError> {
    w.write_all(b"MFNP")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&params.arch.activation.id().to_le_bytes())?;
    w.write_all(&(params.arch.layer_dims.len() as u32).to_le_bytes())?;
    for d in &params.arch.layer_dims {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    w.write_all(&(params.theta.len() as u64).to_le_bytes())?;
    for v in &params.theta {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_params<P: AsRef<Path>>(path: P) -> Result<NetParams, NnError> {
    let mut f = File::open(path)?;
    read_params(&mut f)
}

pub fn read_params<R: Read>(r: &mut R) -> Result<NetParams, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"MFNP" {
        return Err(NnError::BadFile("wrong magic bytes".into()));
    }
    let version = read_u32(r)?;
    if version != 1 {
        return Err(NnError::BadFile(format!("unsupported version {version}")));
    }
    let act = Activation::from_id(read_u32(r)?)
        .ok_or_else(|| NnError::BadFile("unknown activation id".into()))?;
    let n_dims = read_u32(r)? as usize;
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(read_u32(r)? as usize);
    }
    let arch = Architecture::new(dims, act).map_err(|e| NnError::BadFile(e.to_string()))?;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8) as usize;
    if count != arch.param_count() {
        return Err(NnError::BadFile(format!(
            "parameter count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let mut theta = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf8)?;
        theta.push(f64::from_le_bytes(buf8));
    }
    Ok(NetParams { arch, theta })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use rand::Rng;
    use rand::SeedableRng;

    fn arch(dims: &[usize], act: Activation) -> Architecture {
        Architecture::new(dims.to_vec(), act).unwrap()
    }

    #[test]
    fn zeros_init_gives_zero_output() {
        let a = arch(&[3, 8, 2], Activation::Relu);
        let p = init(&a, 7, InitScheme::Zeros);
        let out = forward(&a, &p.theta, &[0.4, -2.0, 13.0]);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = arch(&[2, 16, 1], Activation::Tanh);
        let p1 = init(&a, 99, InitScheme::UniformScaled);
        let p2 = init(&a, 99, InitScheme::UniformScaled);
        assert_eq!(p1.theta, p2.theta);
        let p3 = init(&a, 100, InitScheme::UniformScaled);
        assert_ne!(p1.theta, p3.theta);
    }

    #[test]
    fn uniform_scaled_respects_support_bound() {
        let a = arch(&[100, 4, 1], Activation::Sigmoid);
        let p = init(&a, 3, InitScheme::UniformScaled);
        // first layer: fan_in = 100 -> |w| <= 0.1
        for w in &p.theta[..4 * 100] {
            assert!(w.abs() <= 0.1);
        }
    }

    #[test]
    fn identity_weights_reproduce_input() {
        // single output layer, w = I, beta = 0
        let a = arch(&[2, 2], Activation::Tanh);
        let mut p = init(&a, 0, InitScheme::Zeros);
        p.theta[0] = 1.0; // w[0][0]
        p.theta[3] = 1.0; // w[1][1]
        let out = forward(&a, &p.theta, &[0.25, -7.5]);
        assert_eq!(out, vec![0.25, -7.5]);
    }

    #[test]
    fn taped_and_untaped_forward_agree_bitwise() {
        let a = arch(&[1, 16, 1], Activation::Sigmoid);
        let p = init(&a, 5, InitScheme::UniformScaled);
        let x = 0.37;
        let plain = forward(&a, &p.theta, &[x]);

        let tape = Tape::new();
        let theta_v: Vec<Var> = p
            .theta
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(i, *v))
            .collect();
        let input = vec![tape.constant(x)];
        let taped = forward(&a, &theta_v, &input);
        assert_eq!(plain[0].to_bits(), taped[0].value().to_bits());
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let a = arch(&[2, 6, 1], Activation::Tanh);
        let p = init(&a, 11, InitScheme::UniformScaled);
        let input = [0.3, -0.8];

        let tape = Tape::new();
        let theta_v: Vec<Var> = p
            .theta
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(i, *v))
            .collect();
        let inp: Vec<Var> = input.iter().map(|v| tape.constant(*v)).collect();
        let out = forward(&a, &theta_v, &inp);
        let grad = tape.backward(out[0]).unwrap();

        let mut work = p.theta.clone();
        for i in 0..work.len() {
            let h = 1e-6 * work[i].abs().max(1.0);
            let orig = work[i];
            work[i] = orig + h;
            let up = forward(&a, &work, &input)[0];
            work[i] = orig - h;
            let down = forward(&a, &work, &input)[0];
            work[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8) < 1e-4,
                "param {i}: ad={} fd={}",
                grad[i],
                fd
            );
        }
    }

    #[test]
    fn lipschitz_bound_holds_on_sampled_pairs() {
        let a = arch(&[2, 12, 8, 1], Activation::Tanh);
        let p = init(&a, 21, InitScheme::UniformScaled);
        // bound: product over layers of (operator-norm upper bound) x slope bound
        // use the Frobenius norm as an operator-norm upper bound
        let mut bound = 1.0;
        let mut offset = 0;
        for (li, w) in a.layer_dims.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let fro: f64 = p.theta[offset..offset + d_in * d_out]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            bound *= fro;
            if li < a.layer_dims.len() - 2 {
                bound *= a.activation.slope_bound();
            }
            offset += d_out * (d_in + 1);
        }
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let dist: f64 = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist < 1e-9 {
                continue;
            }
            let fx = forward(&a, &p.theta, &x)[0];
            let fy = forward(&a, &p.theta, &y)[0];
            let quotient = (fx - fy).abs() / dist;
            assert!(
                quotient <= bound + 1e-9,
                "sampled quotient {quotient} exceeds bound {bound}"
            );
        }
    }

    #[test]
    fn sine_activation_is_2pi_periodic_in_preactivation() {
        let a = arch(&[1, 5, 1], Activation::Sine);
        let p = init(&a, 13, InitScheme::UniformScaled);
        let x = 0.77;
        let base = forward(&a, &p.theta, &[x])[0];
        // shift each hidden bias by 2*pi in turn; output must not change
        let bias_start = 5; // weights of layer 0: 5x1
        for k in 0..5 {
            let mut shifted = p.theta.clone();
            shifted[bias_start + k] += 2.0 * std::f64::consts::PI;
            let out = forward(&a, &shifted, &[x])[0];
            assert!(
                (out - base).abs() < 1e-12,
                "hidden unit {k}: {out} vs {base}"
            );
        }
    }

    #[test]
    fn clamp_behaviour_and_gradient() {
        let b = ClampBox::new(vec![-1.0], vec![1.0]).unwrap();
        let mut v = [5.0f64];
        clamp_output::<f64>((), &mut v, &b);
        assert_eq!(v[0], 1.0);

        let unbounded = ClampBox::new(vec![f64::NEG_INFINITY], vec![f64::INFINITY]).unwrap();
        let mut v = [0.3f64];
        clamp_output::<f64>((), &mut v, &unbounded);
        assert_eq!(v[0], 0.3);

        let mut v = [0.3f64];
        let b01 = ClampBox::new(vec![0.0], vec![1.0]).unwrap();
        clamp_output::<f64>((), &mut v, &b01);
        assert_eq!(v[0], 0.3);

        assert!(ClampBox::new(vec![2.0], vec![1.0]).is_err());

        // gradient: 1 inside, 0 outside
        let tape = Tape::new();
        for (x, expected) in [(0.5, 1.0), (2.0, 0.0), (-2.0, 0.0)] {
            let p = tape.param(0, x);
            let mut v = [p];
            clamp_output::<Var>(&tape, &mut v, &b);
            let grad = tape.backward(v[0]).unwrap();
            assert_eq!(grad[0], expected, "x = {x}");
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let a = arch(&[2, 7, 3], Activation::Sine);
        let p = init(&a, 17, InitScheme::UniformScaled);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_params(&path, &p).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a net").unwrap();
        assert!(matches!(load_params(&path), Err(NnError::BadFile(_))));
    }
}
