//! Assembly of the expectation-value constraints available to the
//! estimation step: data-line and monitoring-line click statistics per
//! Alice pattern, full tomography of Alice's reduced state, and
//! normalization.

use super::{
    data_click_probs, monitoring_click_probs, visibility, ChannelError, ChannelParams,
    MonitoringPattern,
};
use crate::operators::{hermitian_basis, kron, kron_all, HermitianOperator, SubsystemLayout};
use crate::protocol::{bit_at, bob_povm, reduced_alice_state, slot_occupied, BlockConfig};

/// The observable side of the estimation problem: expectation constraints
/// (K_i, k_i) with tr(ρ K_i) = k_i, plus the derived scalar statistics.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub constraints: Vec<(HermitianOperator, f64)>,
    /// Conclusive-announcement probability per block.
    pub gain: f64,
    /// Conclusive-conditioned bit error rate.
    pub bit_error: f64,
    /// Bright-pair interferometric contrast under same-state preparation.
    pub visibility: f64,
}

/// Constraints under the standard labeling (bit value 1 occupies the early
/// slot of its position).
pub fn observed_constraints(
    config: &BlockConfig,
    params: &ChannelParams,
) -> Result<ConstraintSet, ChannelError> {
    build_constraints(config, params, false)
}

/// Constraints under the complementary labeling (bit value 1 occupies the
/// late slot). The physical statistics are identical up to the relabeling,
/// so estimation results must not depend on this choice; exposed for
/// consistency checks.
pub fn observed_constraints_relabeled(
    config: &BlockConfig,
    params: &ChannelParams,
) -> Result<ConstraintSet, ChannelError> {
    build_constraints(config, params, true)
}

fn build_constraints(
    config: &BlockConfig,
    params: &ChannelParams,
    relabeled: bool,
) -> Result<ConstraintSet, ChannelError> {
    let m = config.m;
    let np = config.pattern_count();
    let pattern_weight = 1.0 / np as f64;
    let povm = bob_povm(config)?;
    let data = data_click_probs(config, params);
    let shield_identity = config
        .shield_dim()
        .map(|s| HermitianOperator::identity(SubsystemLayout::single(s).expect("small dim")));

    // Under the complementary labeling slot s is occupied exactly when its
    // sibling slot within the bit is occupied under the standard one.
    let occupied = |pattern: usize, slot: usize| {
        if relabeled {
            slot_occupied(pattern, slot ^ 1, m)
        } else {
            slot_occupied(pattern, slot, m)
        }
    };
    let classify = |b1: usize, b2: usize| {
        if relabeled {
            MonitoringPattern::classify(1 - b1, 1 - b2)
        } else {
            MonitoringPattern::classify(b1, b2)
        }
    };

    let alice_bits_layout = SubsystemLayout::new(&vec![2; m])?;
    let pattern_projector = |i: usize| {
        let mut diag = vec![0.0; np];
        diag[i] = 1.0;
        HermitianOperator::from_diagonal(alice_bits_layout.clone(), &diag).expect("diag fits")
    };
    let embed = |i: usize, bob_op: &HermitianOperator| -> Result<HermitianOperator, ChannelError> {
        let p = pattern_projector(i);
        let op = match &shield_identity {
            Some(sh) => kron_all(&[&p, sh, bob_op])?,
            None => kron(&p, bob_op)?,
        };
        Ok(op)
    };

    let mut constraints = Vec::new();

    // Data-line click statistics, one constraint per pattern and slot.
    for i in 0..np {
        for (d, b_d) in povm.data.iter().enumerate() {
            let p_click = if occupied(i, d) { data.p_correct } else { data.p_error };
            constraints.push((embed(i, b_d)?, pattern_weight * p_click));
        }
    }

    // Monitoring-line statistics: per pattern, interior pair, and outcome.
    for i in 0..np {
        for setting in &povm.monitoring {
            let l = setting.position;
            let class = classify(bit_at(i, l, m), bit_at(i, l + 1, m));
            let probs = monitoring_click_probs(config, params, class).as_array();
            for (outcome, p) in setting.outcomes.iter().zip(probs) {
                constraints.push((embed(i, &outcome.op)?, pattern_weight * p));
            }
        }
    }

    // Sanity: click constraints carry conditional probabilities scaled by
    // the uniform pattern weight.
    for (_, k) in &constraints {
        if !(-1e-12..=pattern_weight + 1e-12).contains(k) {
            return Err(ChannelError::Inconsistent(format!(
                "click expectation {k} outside [0, 2^-m]"
            )));
        }
    }

    // Full tomography of Alice's reduced state.
    let rho_a = reduced_alice_state(config)?;
    let bob_identity = HermitianOperator::identity(config.bob_layout()?);
    for t in hermitian_basis(config.alice_dim()) {
        let t = HermitianOperator::new(config.alice_layout()?, t.matrix().clone())?;
        let k = t.hs_inner(&rho_a);
        constraints.push((kron(&t, &bob_identity)?, k));
    }

    // Normalization.
    constraints.push((HermitianOperator::identity(config.joint_layout()?), 1.0));

    // Closed forms, deliberately not sharing code with the enumeration in
    // sifted_statistics so the two paths can cross-check each other.
    let gain = m as f64 * (data.p_correct + data.p_error) / 2.0;
    let bit_error = data.p_error / (data.p_correct + data.p_error);
    Ok(ConstraintSet { constraints, gain, bit_error, visibility: visibility(config, params) })
}

// ====================================================================
// Tests
// ====================================================================
