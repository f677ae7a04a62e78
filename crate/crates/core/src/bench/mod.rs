//! Independent benchmark oracles: Riccati ODE solutions for the
//! linear-quadratic test cases and a finite-difference Picard solver for the
//! coupled HJB/Fokker-Planck system. These never share code with the
//! neural solvers they validate.

pub mod pde;
pub mod riccati;

pub use pde::{
    pde_solve_common_noise_lq, pde_solve_hjb_fp, CnLqPdeSolution, PdeGrid, PdeProblem,
    PdeSolution, PicardSettings,
};
pub use riccati::{
    analytic_y0_decoupled, riccati_lq_solve, riccati_systemic_solve, BlowUp, LqRiccatiSolution,
    SystemicRiccatiSolution,
};

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum BenchError {
    RiccatiBlowUp(BlowUp),
    /// Picard iteration did not reach the tolerance; carries the residual
    /// history so the caller can retry with stronger damping.
    NoConvergence { residuals: Vec<f64> },
    BadDomain(String),
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::RiccatiBlowUp(b) => write!(f, "{b}"),
            BenchError::NoConvergence { residuals } => write!(
                f,
                "Picard iteration did not converge after {} iterations (last residual {:e})",
                residuals.len(),
                residuals.last().copied().unwrap_or(f64::NAN)
            ),
            BenchError::BadDomain(msg) => write!(f, "bad PDE domain: {msg}"),
        }
    }
}

impl std::error::Error for BenchError {}
