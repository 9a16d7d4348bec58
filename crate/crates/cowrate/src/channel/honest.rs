//! Explicit squashed joint state of the honest channel.
//!
//! The state is assembled in closed form from the optical model: loss keeps
//! coherent (or fixed-photon-number) signals in their family while leaking
//! which-pattern information to the environment, the data-line flip mixes
//! slot assignments within each bit, detectors add dark counts, and the
//! squash keeps the single-excitation sector per block plus one inconclusive
//! level. Monitoring misalignment enters as a geometric damping of slot
//! coherences. The result reproduces every expectation value emitted by
//! `observed_constraints` exactly, which makes it both the feasibility
//! witness for the estimation problem and an oracle for the honest channel's
//! own phase-error rate.

use super::{ChannelError, ChannelParams};
use crate::operators::{CMatrix, HermitianOperator, C64};
use crate::protocol::{
    hamming, occupied_slot, poisson_weight, BlockConfig, PhaseMode,
};

/// Per-shield-level weights of the three squashed components for one Alice
/// pattern pair at Hamming distance Δ: the dark-count diagonal, the
/// single-surviving-photon block, and the inconclusive remainder.
struct LevelWeights {
    dark: f64,
    single: f64,
    trace_target: f64,
}

fn level_weights(
    config: &BlockConfig,
    params: &ChannelParams,
    delta: f64,
    level: usize,
) -> LevelWeights {
    let m = config.m as f64;
    let eta = params.eta_sys();
    let lambda = config.lambda();
    let eps = params.epsilon;
    let two_m = 2 * config.m as i32;
    let dark_scale = eps * (1.0 - eps).powi(two_m - 1);
    let single_scale = (1.0 - eps).powi(two_m);
    let gamma = (m - delta) / m;
    let x = (1.0 - eta) * gamma;

    match config.mode {
        PhaseMode::Pure => {
            // A single pseudo-level carrying the whole coherent-state block.
            let kappa = (-(1.0 - eta) * config.mu * delta).exp();
            let vac = (-eta * lambda).exp() * kappa;
            LevelWeights {
                dark: dark_scale * vac,
                single: single_scale * eta * config.mu * vac,
                trace_target: (-config.mu * delta).exp(),
            }
        }
        PhaseMode::Randomized { n_cut } => {
            if level < n_cut {
                // Tagged photon number n = level + 1.
                let n = level + 1;
                let p = poisson_weight(lambda, n);
                LevelWeights {
                    dark: dark_scale * p * x.powi(n as i32),
                    single: single_scale * (eta / m) * p * n as f64 * x.powi(n as i32 - 1),
                    trace_target: p * gamma.powi(n as i32),
                }
            } else {
                // Collector: vacuum plus the whole tail beyond the cutoff,
                // via full Poisson sums minus the tagged levels.
                let mut dark = (-lambda * (1.0 - x)).exp();
                let mut single = lambda * (-lambda * (1.0 - x)).exp();
                let mut trace = (-lambda * (1.0 - gamma)).exp();
                for n in 1..=n_cut {
                    let p = poisson_weight(lambda, n);
                    dark -= p * x.powi(n as i32);
                    single -= p * n as f64 * x.powi(n as i32 - 1);
                    trace -= p * gamma.powi(n as i32);
                }
                LevelWeights {
                    dark: dark_scale * dark,
                    single: single_scale * (eta / m) * single,
                    trace_target: trace,
                }
            }
        }
    }
}

/// The squashed joint state Alice–[shield–]Bob produced by the honest
/// channel at the given parameters. Unit trace, positive semidefinite, and
/// consistent with every constraint of `observed_constraints`.
pub fn honest_squashed_state(
    config: &BlockConfig,
    params: &ChannelParams,
) -> Result<HermitianOperator, ChannelError> {
    let m = config.m;
    let np = config.pattern_count();
    let sdim = config.shield_dim().unwrap_or(1);
    let bob_dim = config.bob_dim();
    let layout = config.joint_layout()?;
    let dim = layout.total_dim();
    let norm = 1.0 / np as f64;
    let ed = params.e_d;

    // Flip masks over bit positions with their probabilities.
    let flips: Vec<(usize, f64)> = (0..np)
        .map(|f| {
            let ones = (f as u32).count_ones() as i32;
            (f, ed.powi(ones) * (1.0 - ed).powi(m as i32 - ones))
        })
        .collect();
    let slots_of = |pattern: usize| -> Vec<usize> {
        (0..m).map(|q| occupied_slot(pattern, q, m)).collect()
    };
    let idx = |pattern: usize, level: usize, bob: usize| (pattern * sdim + level) * bob_dim + bob;

    let mut mat = CMatrix::zeros(dim, dim);
    for i in 0..np {
        for j in 0..np {
            let delta = hamming(i, j) as f64;
            for level in 0..sdim {
                let w = level_weights(config, params, delta, level);
                // Dark-count clicks: diagonal over the conclusive slots.
                for k in 0..2 * m {
                    mat[(idx(i, level, k), idx(j, level, k))] += C64::new(norm * w.dark, 0.0);
                }
                // Single surviving photon: slot coherences, mixed over flips.
                for &(f, pf) in &flips {
                    let coeff = norm * w.single * pf;
                    if coeff == 0.0 {
                        continue;
                    }
                    for &s1 in &slots_of(i ^ f) {
                        for &s2 in &slots_of(j ^ f) {
                            mat[(idx(i, level, s1), idx(j, level, s2))] +=
                                C64::new(coeff, 0.0);
                        }
                    }
                }
                // Inconclusive remainder keeps the block trace consistent
                // with Alice's reduced state.
                let leftover = w.trace_target
                    - 2.0 * m as f64 * w.dark
                    - (m as f64 - delta) * w.single;
                mat[(idx(i, level, 2 * m), idx(j, level, 2 * m))] +=
                    C64::new(norm * leftover, 0.0);
            }
        }
    }

    // Misalignment damps surviving slot coherences geometrically with slot
    // distance; distance-2 coherences carry exactly the factor 1 − 2e_m the
    // monitoring statistics show.
    let r = (1.0 - 2.0 * params.e_m).sqrt();
    if params.e_m > 0.0 {
        for row in 0..dim {
            for col in 0..dim {
                let (bs, bt) = (row % bob_dim, col % bob_dim);
                if bs != bt && bs < 2 * m && bt < 2 * m {
                    let d = bs.abs_diff(bt) as i32;
                    mat[(row, col)] *= C64::new(r.powi(d), 0.0);
                }
            }
        }
    }

    Ok(HermitianOperator::new(layout, mat)?)
}

// ====================================================================
// Tests
// ====================================================================
