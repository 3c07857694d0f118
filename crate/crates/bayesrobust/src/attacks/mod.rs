//! Adversarial example generation under an L-infinity threat model.
//!
//! Two attack families mirror the two optimization problems they
//! solve: budget-constrained loss maximization (FGSM, BIM, PGD, the
//! momentum transfer attack, SPSA, Square) and minimum-perturbation
//! search (C&W, DeepFool). Constrained attacks always return a sample
//! inside the epsilon ball and the pixel box; minimum-perturbation
//! attacks report their distance instead of honoring a budget.
//!
//! Oracle access levels are separate types: white-box attacks require
//! [`GradientAccess`], black-box score attacks run against a
//! [`ScoreAccess`] implementation that cannot expose gradients.

mod black_box;
mod oracle;
mod white_box;

pub use black_box::{mim_transfer, spsa, spsa_gradient, square_attack, SpsaParams, SquareParams, MIM_DECAY, MIM_STEPS};
pub use oracle::{DecisionAccess, DecisionOracle, GradientAccess, ScoreAccess, ScoreOracle, WhiteBoxOracle};
pub use white_box::{bim, cw_min_perturbation, deepfool, fgsm, pgd, CwParams, DeepFoolParams};

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Perturbation norms. Only the sup norm is implemented; the enum
/// leaves room for more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
}

/// Attacker budget: a norm bound on the input perturbation plus the
/// valid pixel box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThreatModel {
    pub norm: Norm,
    pub epsilon: f64,
    pub pixel_min: f64,
    pub pixel_max: f64,
}

impl ThreatModel {
    /// Sup-norm budget over the `[0, 1]` pixel box.
    pub fn linf(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidParam(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(ThreatModel { norm: Norm::Linf, epsilon, pixel_min: 0.0, pixel_max: 1.0 })
    }
}

/// One generated adversarial sample.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Array3<f64>,
    /// `max |x - x_adv|` over pixels.
    pub linf_distance: f64,
    /// Whether the target model's prediction flipped away from the
    /// attacked label.
    pub success: bool,
    /// Oracle queries spent; zero for white-box attacks.
    pub queries: usize,
}

/// Sup-norm distance between two images.
pub fn linf_distance(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Arithmetic mean of the per-sample distances; errors on no input.
pub fn mean_linf_distance(results: &[AttackResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("mean_linf_distance over no results"));
    }
    Ok(results.iter().map(|r| r.linf_distance).sum::<f64>() / results.len() as f64)
}

/// Elementwise sign with `sign(0) = 0`.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `cand` into the epsilon ball around `origin`, then into
/// the pixel box. With `epsilon = 0` this reproduces `origin` bitwise.
pub(crate) fn project(cand: &mut Array3<f64>, origin: &Array3<f64>, tm: &ThreatModel) {
    ndarray::Zip::from(&mut *cand).and(origin).for_each(|c, &o| {
        *c = c.clamp(o - tm.epsilon, o + tm.epsilon).clamp(tm.pixel_min, tm.pixel_max);
    });
}

pub(crate) fn clip_box(cand: &mut Array3<f64>, tm: &ThreatModel) {
    cand.mapv_inplace(|v| v.clamp(tm.pixel_min, tm.pixel_max));
}
