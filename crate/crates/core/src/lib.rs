//! Two-timescale joint active/passive beamforming for an IRS-aided
//! multiuser MISO downlink.
//!
//! Long-term IRS phase shifts and rate-constraint multipliers are optimized
//! over statistical CSI with a constrained stochastic successive convex
//! approximation loop; short-term transmit beamformers come from a
//! weighted-MMSE solver whose iterations are unrolled for reverse-mode
//! differentiation. Baseline schemes, discrete-phase quantization and a
//! Monte-Carlo evaluation harness round out the toolkit.

pub mod baselines;
pub mod channel;
pub mod cssca;
pub mod harness;
pub mod qcqp;
pub mod quantize;
pub mod rng;
pub mod special;
pub mod unfold;
pub mod wmmse;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Complex column vector.
pub type CVector = DVector<Complex64>;
/// Complex dense matrix.
pub type CMatrix = DMatrix<Complex64>;
