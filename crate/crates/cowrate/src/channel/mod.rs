//! Honest-channel detection statistics and the observable constraint set.
//!
//! The channel applies loss, a data-line slot-flip error, monitoring-line
//! misalignment, and detector dark counts to each block. This module
//! evaluates the resulting click probabilities in closed form, enumerates
//! the sifted-key gain and bit error, assembles the full list of expectation
//! values available to the key-rate estimation step, constructs an explicit
//! squashed joint state reproducing all of them (the feasibility witness),
//! and cross-checks everything against a sample-by-sample Monte-Carlo
//! simulation of the optical chain.

pub mod constraints;
pub mod honest;
pub mod monte_carlo;

pub use constraints::{observed_constraints, observed_constraints_relabeled, ConstraintSet};
pub use honest::honest_squashed_state;
pub use monte_carlo::{monte_carlo_oracle, FrequencyTable, McOutcome, McSetting};

use crate::protocol::{announcements, bit_at, slot_occupied, BlockConfig, ProtocolError};
use thiserror::Error;

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_E_D: f64 = 0.01;
pub const DEFAULT_E_M: f64 = 0.005;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),
    #[error("internal consistency violation: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Operator(#[from] crate::operators::OperatorError),
}

// ====================================================================
// Channel parameters
// ====================================================================

/// Physical parameters of the lossy, noisy link and the detectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    /// Channel transmittance, in (0, 1].
    pub eta_channel: f64,
    /// Detector efficiency, in (0, 1].
    pub eta_det: f64,
    /// Dark count probability per slot per detector, in [0, 1).
    pub epsilon: f64,
    /// Data-line flip probability (pulse lands in the wrong slot of its
    /// bit), in [0, 1/2).
    pub e_d: f64,
    /// Monitoring-line wrong-port probability at the interferometer,
    /// in [0, 1/2).
    pub e_m: f64,
}

impl ChannelParams {
    pub fn new(
        eta_channel: f64,
        eta_det: f64,
        epsilon: f64,
        e_d: f64,
        e_m: f64,
    ) -> Result<Self, ChannelError> {
        let p = Self { eta_channel, eta_det, epsilon, e_d, e_m };
        p.validate()?;
        Ok(p)
    }

    /// Parameters at a given total system loss in dB, folding everything
    /// into the channel factor (detector efficiency 1).
    pub fn from_loss_db(
        loss_db: f64,
        epsilon: f64,
        e_d: f64,
        e_m: f64,
    ) -> Result<Self, ChannelError> {
        if !loss_db.is_finite() || loss_db < 0.0 {
            return Err(ChannelError::InvalidParams(format!(
                "system loss {loss_db} dB must be finite and nonnegative"
            )));
        }
        Self::new(10f64.powf(-loss_db / 10.0), 1.0, epsilon, e_d, e_m)
    }

    fn validate(&self) -> Result<(), ChannelError> {
        let checks: [(&str, f64, bool); 5] = [
            ("eta_channel", self.eta_channel, self.eta_channel > 0.0 && self.eta_channel <= 1.0),
            ("eta_det", self.eta_det, self.eta_det > 0.0 && self.eta_det <= 1.0),
            ("epsilon", self.epsilon, (0.0..1.0).contains(&self.epsilon)),
            ("e_d", self.e_d, (0.0..0.5).contains(&self.e_d)),
            ("e_m", self.e_m, (0.0..0.5).contains(&self.e_m)),
        ];
        for (name, value, ok) in checks {
            if !ok {
                return Err(ChannelError::InvalidParams(format!(
                    "{name} = {value} is outside its admissible range"
                )));
            }
        }
        Ok(())
    }

    /// Total system transmittance η_channel · η_det.
    pub fn eta_sys(&self) -> f64 {
        self.eta_channel * self.eta_det
    }

    /// Total system loss in dB, −10·log10(η_sys).
    pub fn loss_db(&self) -> f64 {
        -10.0 * self.eta_sys().log10()
    }
}

// ====================================================================
// Closed-form click probabilities
// ====================================================================

/// Probability that no light survives anywhere in the block and exactly one
/// dark count fires in a given slot: ε(1−ε)^{2m−1} e^{−η_sys λ}.
fn dark_single(config: &BlockConfig, params: &ChannelParams) -> f64 {
    let two_m = 2 * config.m as i32;
    let eps = params.epsilon;
    eps * (1.0 - eps).powi(two_m - 1) * (-params.eta_sys() * config.lambda()).exp()
}

/// Probability scale of a single surviving photon with no dark count
/// anywhere: (1−ε)^{2m} η_sys μ e^{−η_sys λ}.
fn photon_single(config: &BlockConfig, params: &ChannelParams) -> f64 {
    let two_m = 2 * config.m as i32;
    let eta = params.eta_sys();
    (1.0 - params.epsilon).powi(two_m) * eta * config.mu * (-eta * config.lambda()).exp()
}

/// Data-line single-click probabilities per slot, conditioned on the
/// data-line setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataClickProbs {
    /// Single click in a slot the pattern occupies.
    pub p_correct: f64,
    /// Single click in the empty slot of a bit.
    pub p_error: f64,
    /// No conclusive single-click event in the block.
    pub p_inconclusive: f64,
}

pub fn data_click_probs(config: &BlockConfig, params: &ChannelParams) -> DataClickProbs {
    let d = dark_single(config, params);
    let c = photon_single(config, params);
    let p_correct = d + c * (1.0 - params.e_d);
    let p_error = d + c * params.e_d;
    DataClickProbs {
        p_correct,
        p_error,
        p_inconclusive: 1.0 - config.m as f64 * (p_correct + p_error),
    }
}

/// Joint preparation of the two bits feeding one monitoring interferometer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitoringPattern {
    /// Both bits place their pulse in the early slot: the early-slot pair
    /// interferes brightly.
    Same01,
    /// Both bits place their pulse in the late slot: the late-slot pair is
    /// the bright one.
    Same10,
    /// One early, one late: no bright pair, no interference contrast.
    Different,
}

impl MonitoringPattern {
    /// Classify the bit values at the two positions feeding a setting.
    pub fn classify(b_first: usize, b_second: usize) -> Self {
        match (b_first, b_second) {
            (1, 1) => MonitoringPattern::Same01,
            (0, 0) => MonitoringPattern::Same10,
            _ => MonitoringPattern::Different,
        }
    }
}

/// Monitoring-line single-click probabilities for one setting. `early` is
/// the interferometer mixing the first slots of the two bits (odd-numbered
/// temporal modes when counting from 1), `late` the second slots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitoringClickProbs {
    pub early_plus: f64,
    pub early_minus: f64,
    pub late_plus: f64,
    pub late_minus: f64,
}

impl MonitoringClickProbs {
    /// Outcome probabilities in the fixed order (early,+), (early,−),
    /// (late,+), (late,−).
    pub fn as_array(&self) -> [f64; 4] {
        [self.early_plus, self.early_minus, self.late_plus, self.late_minus]
    }
}

pub fn monitoring_click_probs(
    config: &BlockConfig,
    params: &ChannelParams,
    pattern: MonitoringPattern,
) -> MonitoringClickProbs {
    let d = dark_single(config, params);
    let c = photon_single(config, params);
    let ed = params.e_d;
    let em = params.e_m;
    // Bracket of a pair hit by both pulses: interference with misalignment.
    let bright_plus = 2.0 * (1.0 - ed) * (1.0 - ed) * (1.0 - em) + ed * (1.0 - ed);
    let bright_minus = 2.0 * (1.0 - ed) * (1.0 - ed) * em + ed * (1.0 - ed);
    // Bracket of the pair both pulses avoid: reached only via double flips.
    let dim_plus = 2.0 * ed * ed * (1.0 - em) + ed * (1.0 - ed);
    let dim_minus = 2.0 * ed * ed * em + ed * (1.0 - ed);
    // One pulse per pair: a balanced split plus flip-induced interference.
    let half = (1.0 + 2.0 * ed * ed - 2.0 * ed) / 2.0;
    let diff_plus = 2.0 * ed * (1.0 - ed) * (1.0 - em) + half;
    let diff_minus = 2.0 * ed * (1.0 - ed) * em + half;

    let (ep, em_, lp, lm) = match pattern {
        MonitoringPattern::Same01 => (bright_plus, bright_minus, dim_plus, dim_minus),
        MonitoringPattern::Same10 => (dim_plus, dim_minus, bright_plus, bright_minus),
        MonitoringPattern::Different => (diff_plus, diff_minus, diff_plus, diff_minus),
    };
    MonitoringClickProbs {
        early_plus: d + c * ep,
        early_minus: d + c * em_,
        late_plus: d + c * lp,
        late_minus: d + c * lm,
    }
}

/// Interferometric contrast (p₊ − p₋)/(p₊ + p₋) of the bright pair under a
/// same-state preparation, dark counts included.
pub fn visibility(config: &BlockConfig, params: &ChannelParams) -> f64 {
    let p = monitoring_click_probs(config, params, MonitoringPattern::Same01);
    (p.early_plus - p.early_minus) / (p.early_plus + p.early_minus)
}

// ====================================================================
// Sifted statistics
// ====================================================================

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftedStatistics {
    /// Probability per block of a conclusive announcement, G.
    pub gain: f64,
    /// Conclusive-conditioned bit error rate ē_c.
    pub bit_error: f64,
}

/// Exhaustive enumeration of the sifting stage: every pattern, every
/// data-line click slot, every announcement with its weight. The error
/// events are the clicks in the announced slot the pattern leaves empty.
pub fn sifted_statistics(config: &BlockConfig, params: &ChannelParams) -> SiftedStatistics {
    let m = config.m;
    let probs = data_click_probs(config, params);
    let pattern_weight = 1.0 / config.pattern_count() as f64;
    let mut gain = 0.0;
    let mut error = 0.0;
    for pattern in 0..config.pattern_count() {
        for ann in announcements(m) {
            let (q1, q2) = ann.positions;
            if bit_at(pattern, q1, m) == bit_at(pattern, q2, m) {
                continue;
            }
            for slot in [ann.slots.0, ann.slots.1] {
                let occupied = slot_occupied(pattern, slot, m);
                let p_click = if occupied { probs.p_correct } else { probs.p_error };
                gain += pattern_weight * ann.weight * p_click;
                if !occupied {
                    error += pattern_weight * ann.weight * p_click;
                }
            }
        }
    }
    SiftedStatistics { gain, bit_error: if gain > 0.0 { error / gain } else { 0.5 } }
}

// ====================================================================
// Tests
// ====================================================================
