//! Sample-by-sample simulation of the optical chain, independent of the
//! closed-form probabilities.
//!
//! Each sample propagates coherent pulses through loss, applies the
//! data-line flip, splits monitored pairs on a balanced beamsplitter with
//! per-photon wrong-port errors, draws Poisson photon counts and Bernoulli
//! dark counts per detector cell, and classifies the click record.
//! Frequencies converge to the closed forms of the parent module; the
//! comparison is the oracle test for those formulas.

use super::ChannelParams;
use crate::protocol::{occupied_slot, BlockConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;

/// Which receiver arm a simulated block is routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McSetting {
    Data,
    /// Monitoring interferometer across bit positions (position, position+1).
    Monitoring { position: usize },
}

/// Classified result of one simulated block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McOutcome {
    /// Single data-line click in the given slot.
    Click { slot: usize },
    /// Single monitoring click: pair identified by its first slot, and the
    /// detector port (true = bright/plus port).
    MonitorClick { pair_start: usize, plus: bool },
    /// Anything else: no clicks, multiple clicks, or clicks outside the
    /// conclusive cells.
    Inconclusive,
}

/// Empirical outcome frequencies with binomial standard errors.
#[derive(Debug, Clone)]
pub struct FrequencyTable {
    pub samples: u64,
    pub entries: Vec<(McOutcome, u64)>,
}

impl FrequencyTable {
    pub fn frequency(&self, outcome: McOutcome) -> f64 {
        let count = self
            .entries
            .iter()
            .find(|(o, _)| *o == outcome)
            .map(|(_, c)| *c)
            .unwrap_or(0);
        count as f64 / self.samples as f64
    }

    /// Standard error of the frequency estimate, √(p(1−p)/N), floored at
    /// the one-count level so zero-count cells still get a finite scale.
    pub fn std_error(&self, outcome: McOutcome) -> f64 {
        let p = self.frequency(outcome);
        let n = self.samples as f64;
        (p * (1.0 - p) / n).sqrt().max(1.0 / n)
    }
}

/// Simulate `samples` blocks of the given Alice pattern through the channel
/// and tally outcome frequencies. Deterministic for a fixed seed: sample `i`
/// always consumes stream `i` of a counter-based generator, so shard
/// boundaries and thread counts cannot change the result.
pub fn monte_carlo_oracle(
    config: &BlockConfig,
    params: &ChannelParams,
    pattern: &[u8],
    setting: McSetting,
    samples: u64,
    seed: u64,
) -> FrequencyTable {
    assert!(samples >= 1, "at least one sample required");
    assert_eq!(pattern.len(), config.m, "pattern length must equal the block size");
    assert!(pattern.iter().all(|&b| b <= 1), "pattern must be 0/1 valued");
    if let McSetting::Monitoring { position } = setting {
        assert!(position + 1 < config.m, "monitoring needs an interior bit pair");
    }

    let mask = pattern.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
    let n_cells = outcome_cells(config, setting);
    let base = ChaCha8Rng::seed_from_u64(seed);

    const SHARD: u64 = 8192;
    let shards: Vec<(u64, u64)> = (0..samples)
        .step_by(SHARD as usize)
        .map(|lo| (lo, (lo + SHARD).min(samples)))
        .collect();
    let counts = shards
        .par_iter()
        .map(|&(lo, hi)| {
            let mut local = vec![0u64; n_cells];
            for i in lo..hi {
                let mut rng = base.clone();
                rng.set_stream(i);
                let cell = simulate_block(config, params, mask, setting, &mut rng);
                local[cell] += 1;
            }
            local
        })
        .reduce(
            || vec![0u64; n_cells],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );

    let entries = (0..n_cells)
        .map(|c| (cell_outcome(config, setting, c), counts[c]))
        .collect();
    FrequencyTable { samples, entries }
}

fn outcome_cells(config: &BlockConfig, setting: McSetting) -> usize {
    match setting {
        McSetting::Data => 2 * config.m + 1,
        McSetting::Monitoring { .. } => 5,
    }
}

fn cell_outcome(config: &BlockConfig, setting: McSetting, cell: usize) -> McOutcome {
    match setting {
        McSetting::Data => {
            if cell < 2 * config.m {
                McOutcome::Click { slot: cell }
            } else {
                McOutcome::Inconclusive
            }
        }
        McSetting::Monitoring { position } => match cell {
            0 => McOutcome::MonitorClick { pair_start: 2 * position, plus: true },
            1 => McOutcome::MonitorClick { pair_start: 2 * position, plus: false },
            2 => McOutcome::MonitorClick { pair_start: 2 * position + 1, plus: true },
            3 => McOutcome::MonitorClick { pair_start: 2 * position + 1, plus: false },
            _ => McOutcome::Inconclusive,
        },
    }
}

fn sample_poisson(mean: f64, rng: &mut ChaCha8Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// One block through the chain; returns the outcome cell index (the last
/// cell is the inconclusive catch-all).
fn simulate_block(
    config: &BlockConfig,
    params: &ChannelParams,
    mask: usize,
    setting: McSetting,
    rng: &mut ChaCha8Rng,
) -> usize {
    let m = config.m;
    let eta = params.eta_sys();
    // Loss keeps coherent pulses coherent: per-slot intensities after the
    // channel, before the flip map.
    let bright = eta * config.mu;
    let mut intensity = vec![0.0f64; 2 * m];
    for q in 0..m {
        intensity[occupied_slot(mask, q, m)] = bright;
    }
    // Data-line flip: the pulse of a bit lands in the wrong slot.
    for q in 0..m {
        if rng.random_bool(params.e_d) {
            intensity.swap(2 * q, 2 * q + 1);
        }
    }

    match setting {
        McSetting::Data => {
            // One detector cell per slot; a block is conclusive when the
            // whole record holds exactly one count.
            let mut total = 0u64;
            let mut where_ = 0usize;
            for (s, &q) in intensity.iter().enumerate() {
                let c = sample_poisson(q, rng);
                if c > 0 {
                    total += c;
                    where_ = s;
                }
            }
            for s in 0..2 * m {
                if rng.random_bool(params.epsilon) {
                    total += 1;
                    where_ = s;
                }
            }
            if total == 1 {
                where_
            } else {
                2 * m
            }
        }
        McSetting::Monitoring { position } => {
            // Interfere the early pair and the late pair on balanced
            // beamsplitters; photons exit the wrong port with probability
            // e_m. Remaining slots bypass to ordinary cells. Cells:
            // 0..4 = (early+, early−, late+, late−), then bypass slots.
            let (e1, e2) = (2 * position, 2 * position + 2);
            let (l1, l2) = (2 * position + 1, 2 * position + 3);
            let mut cells = Vec::with_capacity(2 * m);
            for (a, b) in [(e1, e2), (l1, l2)] {
                let (amp_a, amp_b) = (intensity[a].sqrt(), intensity[b].sqrt());
                let plus = 0.5 * (amp_a + amp_b) * (amp_a + amp_b);
                let minus = 0.5 * (amp_a - amp_b) * (amp_a - amp_b);
                let n_plus = sample_poisson(plus, rng);
                let n_minus = sample_poisson(minus, rng);
                let stray_plus = binomial(n_plus, params.e_m, rng);
                let stray_minus = binomial(n_minus, params.e_m, rng);
                cells.push(n_plus - stray_plus + stray_minus);
                cells.push(n_minus - stray_minus + stray_plus);
            }
            for s in 0..2 * m {
                if s == e1 || s == e2 || s == l1 || s == l2 {
                    continue;
                }
                cells.push(sample_poisson(intensity[s], rng));
            }
            // Dark counts hit every cell of the record.
            for c in cells.iter_mut() {
                if rng.random_bool(params.epsilon) {
                    *c += 1;
                }
            }
            let total: u64 = cells.iter().sum();
            if total == 1 {
                match cells.iter().position(|&c| c == 1).expect("one count present") {
                    p @ 0..=3 => p,
                    _ => 4,
                }
            } else {
                4
            }
        }
    }
}

fn binomial(n: u64, p: f64, rng: &mut ChaCha8Rng) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

// ====================================================================
// Tests
// ====================================================================
