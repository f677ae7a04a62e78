//! Particle-based neural solvers for finite-horizon mean-field control and
//! McKean-Vlasov forward-backward SDEs.
//!
//! Two solution methods are provided:
//!
//! - [`solver_mfc`]: stochastic gradient descent on the sampled social cost
//!   of an N-particle system, over feedback controls `(t, x) -> alpha`
//!   parameterized by feed-forward networks. Gradients are exact
//!   reverse-mode derivatives of the full discrete rollout, including the
//!   empirical-mean coupling between particles.
//! - [`solver_fbsde`]: a shooting method for generic McKean-Vlasov FBSDEs.
//!   The backward equation is replaced by a forward one whose initial value
//!   `y0(x)` and volatility `z(t, x)` are learned by penalizing the terminal
//!   mismatch in mean square. This also covers FBSDEs arising from mean
//!   field games, where direct cost minimization does not apply.
//!
//! Independent benchmark oracles live in [`bench`]: Riccati ODE solutions
//! for the linear-quadratic test cases and a damped-Picard finite-difference
//! solver for the coupled HJB/Fokker-Planck system. The [`experiment`]
//! module wires presets, training, oracles and CSV/JSON reporting together
//! behind the `mfsolve` command-line interface.
//!
//! Everything is deterministic given a seed: rollouts, training traces and
//! emitted files are byte-identical across runs.

pub mod autodiff;
pub mod bench;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod simulate;
pub mod solver_fbsde;
pub mod solver_mfc;
pub mod util;
