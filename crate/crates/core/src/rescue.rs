//! Gradient amplification for saturated code bits, and dead-bit telemetry.
//!
//! A bit is *dead* when it sits in the tanh saturated region (`|h| >= tau`)
//! while the loss gradient shares its sign: the optimizer wants to move it
//! away from its pole, but the `1 - h^2` tanh derivative suppresses the
//! update. The amplifier rescales exactly those gradient entries by
//! `alpha = 1 / (1 - tau^2)`, cancelling the suppression.

use crate::error::{Error, Result};
use crate::matrix::{sign_pm, Matrix};

/// Amplifier settings. `alpha` is derived from `tau` at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplifierConfig {
    tau: f64,
    alpha: f64,
    pub enabled: bool,
}

impl AmplifierConfig {
    /// `tau` must lie in `[0, 1)`; `alpha = 1 / (1 - tau^2)`.
    pub fn new(tau: f64, enabled: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::config(format!(
                "tau must be in [0, 1), got {tau}"
            )));
        }
        Ok(AmplifierConfig {
            tau,
            alpha: 1.0 / (1.0 - tau * tau),
            enabled,
        })
    }

    #[inline]
    pub fn tau(&self) -> f64 {
        self.tau
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

fn check_shapes(codes: &Matrix, grads: &Matrix) -> Result<()> {
    if codes.shape() != grads.shape() {
        return Err(Error::config(format!(
            "codes {:?} and gradients {:?} differ in shape",
            codes.shape(),
            grads.shape()
        )));
    }
    Ok(())
}

/// Element-wise gradient amplification.
///
/// An entry is scaled by `alpha` iff `|h| >= tau` and `sign(h) = sign(g)`
/// (with `sign(0) = +1`). Every other entry — including the saturated
/// sign-mismatch case, where the update already pushes the bit deeper toward
/// its pole — passes through unchanged. Disabled configs return the
/// gradients untouched.
pub fn amplify(codes: &Matrix, grads: &Matrix, cfg: &AmplifierConfig) -> Result<Matrix> {
    check_shapes(codes, grads)?;
    if !cfg.enabled {
        return Ok(grads.clone());
    }
    let mut out = grads.clone();
    for (o, &h) in out.data_mut().iter_mut().zip(codes.data().iter()) {
        if h.abs() >= cfg.tau && sign_pm(h) == sign_pm(*o) {
            *o *= cfg.alpha;
        }
    }
    Ok(out)
}

/// One dead-bit measurement: how many bits of the scanned batch are stuck.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeadBitReport {
    pub step: u64,
    pub epoch: usize,
    pub dead_count: u64,
    pub total_bits: u64,
    pub dead_fraction: f64,
}

impl DeadBitReport {
    /// Stamps the measurement with its training position.
    pub fn at(mut self, step: u64, epoch: usize) -> Self {
        self.step = step;
        self.epoch = epoch;
        self
    }
}

/// Counts bits with `|h| >= tau` whose raw (pre-amplification) loss gradient
/// shares their sign.
pub fn count_dead_bits(codes: &Matrix, grads: &Matrix, tau: f64) -> Result<DeadBitReport> {
    check_shapes(codes, grads)?;
    let total_bits = (codes.rows() * codes.cols()) as u64;
    let mut dead_count = 0u64;
    for (&h, &g) in codes.data().iter().zip(grads.data().iter()) {
        if h.abs() >= tau && sign_pm(h) == sign_pm(g) {
            dead_count += 1;
        }
    }
    let dead_fraction = if total_bits == 0 {
        0.0
    } else {
        dead_count as f64 / total_bits as f64
    };
    Ok(DeadBitReport {
        step: 0,
        epoch: 0,
        dead_count,
        total_bits,
        dead_fraction,
    })
}
