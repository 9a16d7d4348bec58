//! Finite-dimensional block model of the coherent-one-way protocol.
//!
//! A block groups `m` key bits; each bit occupies two temporal slots and the
//! pulse sits in the early slot for bit value 1, in the late slot for bit
//! value 0. Bob's squashed measurement space has one level per slot plus a
//! single inconclusive level. Announcements pair slots at cyclic distance 2
//! (a closed chain over each slot parity class), and sifting filters map the
//! announced degrees of freedom to one qubit per side. From those filters the
//! module assembles the sifting-gain operator and the averaged phase-error
//! operator that the semidefinite estimation step consumes.
//!
//! Conventions used throughout the crate:
//! * slots are 0-based, `0..2m`; slot `s` belongs to bit position `s/2`;
//! * a bit pattern is a `usize` whose binary digits, most significant first,
//!   are the bit values at positions `0..m`, so the pattern value equals the
//!   flattened index of the corresponding basis state in a `[2; m]` layout;
//! * Bob's basis index `2m` is the inconclusive level.

use crate::operators::{CMatrix, HermitianOperator, OperatorError, SubsystemLayout, C64};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid block configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

// ====================================================================
// Block configuration
// ====================================================================

/// Source preparation mode: pure blocks keep a global phase reference,
/// randomized blocks are phase-randomized and carry a shield factor that
/// records the block's total photon number up to the tagging cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseMode {
    Pure,
    Randomized { n_cut: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub m: usize,
    pub mu: f64,
    pub mode: PhaseMode,
}

impl BlockConfig {
    pub fn pure(m: usize, mu: f64) -> Result<Self, ProtocolError> {
        Self::with_mode(m, mu, PhaseMode::Pure)
    }

    pub fn randomized(m: usize, mu: f64, n_cut: usize) -> Result<Self, ProtocolError> {
        Self::with_mode(m, mu, PhaseMode::Randomized { n_cut })
    }

    pub fn with_mode(m: usize, mu: f64, mode: PhaseMode) -> Result<Self, ProtocolError> {
        if m < 2 {
            return Err(ProtocolError::InvalidConfig(format!(
                "block size m = {m}; the closed announcement chain needs m >= 2"
            )));
        }
        if m > 8 {
            return Err(ProtocolError::InvalidConfig(format!(
                "block size m = {m} exceeds the dense-representation budget"
            )));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(ProtocolError::InvalidConfig(format!(
                "pulse intensity mu = {mu} must be positive and finite"
            )));
        }
        if let PhaseMode::Randomized { n_cut } = mode {
            if n_cut < 1 {
                return Err(ProtocolError::InvalidConfig(
                    "tagging cutoff n_cut must be >= 1".into(),
                ));
            }
        }
        Ok(Self { m, mu, mode })
    }

    /// Mean total photon number of a block, λ = m·μ.
    pub fn lambda(&self) -> f64 {
        self.m as f64 * self.mu
    }

    pub fn pattern_count(&self) -> usize {
        1 << self.m
    }

    /// Dimension of the shield factor, if the mode carries one.
    pub fn shield_dim(&self) -> Option<usize> {
        match self.mode {
            PhaseMode::Pure => None,
            PhaseMode::Randomized { n_cut } => Some(n_cut + 1),
        }
    }

    pub fn alice_dim(&self) -> usize {
        self.pattern_count() * self.shield_dim().unwrap_or(1)
    }

    pub fn bob_dim(&self) -> usize {
        2 * self.m + 1
    }

    pub fn alice_layout(&self) -> Result<SubsystemLayout, ProtocolError> {
        let mut dims = vec![2usize; self.m];
        if let Some(s) = self.shield_dim() {
            dims.push(s);
        }
        Ok(SubsystemLayout::new(&dims)?)
    }

    pub fn bob_layout(&self) -> Result<SubsystemLayout, ProtocolError> {
        Ok(SubsystemLayout::single(self.bob_dim())?)
    }

    pub fn joint_layout(&self) -> Result<SubsystemLayout, ProtocolError> {
        let mut dims = vec![2usize; self.m];
        if let Some(s) = self.shield_dim() {
            dims.push(s);
        }
        dims.push(self.bob_dim());
        Ok(SubsystemLayout::new(&dims)?)
    }
}

// ====================================================================
// Bit-pattern helpers
// ====================================================================

/// Value of the bit at block position `pos` in `pattern` (see module docs).
#[inline]
pub fn bit_at(pattern: usize, pos: usize, m: usize) -> usize {
    (pattern >> (m - 1 - pos)) & 1
}

/// The slot carrying the pulse for the bit at `pos`: early slot for value 1,
/// late slot for value 0.
#[inline]
pub fn occupied_slot(pattern: usize, pos: usize, m: usize) -> usize {
    let q = 2 * pos;
    if bit_at(pattern, pos, m) == 1 {
        q
    } else {
        q + 1
    }
}

/// Whether `slot` carries a pulse under `pattern`.
#[inline]
pub fn slot_occupied(pattern: usize, slot: usize, m: usize) -> bool {
    occupied_slot(pattern, slot / 2, m) == slot
}

pub fn hamming(i: usize, j: usize) -> u32 {
    (i ^ j).count_ones()
}

// ====================================================================
// Announcements and sifting filters
// ====================================================================

/// Parity class of an announcement's slots: `Early` slots are the first slot
/// of each bit position, `Late` slots the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotParity {
    Early,
    Late,
}

/// One public detection announcement: an ordered pair of slots at cyclic
/// distance 2 within one parity class. A receiver click in `slots.0` maps to
/// sifted bit 0, in `slots.1` to sifted bit 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Announcement {
    pub parity: SlotParity,
    /// Ordered 0-based slot pair; `slots.1 = (slots.0 + 2) mod 2m`.
    pub slots: (usize, usize),
    /// Block positions carrying the two slots.
    pub positions: (usize, usize),
    /// Probability that a click in either slot triggers this announcement.
    pub weight: f64,
}

/// All announcements of the closed chain. For m ≥ 3 each parity cycle of
/// length m contributes m ordered pairs, each triggered with probability 1/2
/// per click. For m = 2 the two neighbour choices from any slot name the same
/// pair, so the duplicates merge into a single announcement of weight 1.
pub fn announcements(m: usize) -> Vec<Announcement> {
    assert!(m >= 2, "announcement chain needs m >= 2");
    let two_m = 2 * m;
    let (starts, weight): (Vec<usize>, f64) = if m == 2 {
        (vec![0, 1], 1.0)
    } else {
        ((0..two_m).collect(), 0.5)
    };
    starts
        .into_iter()
        .map(|s1| {
            let s2 = (s1 + 2) % two_m;
            Announcement {
                parity: if s1 % 2 == 0 { SlotParity::Early } else { SlotParity::Late },
                slots: (s1, s2),
                positions: (s1 / 2, s2 / 2),
                weight,
            }
        })
        .collect()
}

/// Sifting maps of one announcement: `filter_alice` acts on the ordered pair
/// of relevant bit qubits (basis `|b_first b_second⟩`), `filter_bob` on the
/// squashed receiver space; both map into one qubit.
#[derive(Debug, Clone)]
pub struct SiftingMaps {
    pub announcement: Announcement,
    pub filter_alice: CMatrix,
    pub filter_bob: CMatrix,
}

/// Build the sifting maps for every announcement. Bit labels are chosen so
/// that in a lossless noise-free channel both sifted bits coincide: the
/// pattern placing the pulse in the first announced slot maps to Alice bit 0,
/// matching the receiver's bit-0 click there.
pub fn announcement_filters(config: &BlockConfig) -> Vec<SiftingMaps> {
    let m = config.m;
    let bob_dim = config.bob_dim();
    announcements(m)
        .into_iter()
        .map(|ann| {
            // Amplitude √weight, so F_v^B† F_v^B carries the announcement
            // probability and the family sums to the data projectors.
            let amp = C64::new(ann.weight.sqrt(), 0.0);
            let mut fa = CMatrix::zeros(2, 4);
            // Two-qubit basis index 2·b_first + b_second. The first announced
            // slot is occupied by bit value 1 on Early slots, 0 on Late ones.
            match ann.parity {
                SlotParity::Early => {
                    fa[(0, 2)] = C64::new(1.0, 0.0); // |10⟩ → Alice bit 0
                    fa[(1, 1)] = C64::new(1.0, 0.0); // |01⟩ → Alice bit 1
                }
                SlotParity::Late => {
                    fa[(0, 1)] = C64::new(1.0, 0.0);
                    fa[(1, 2)] = C64::new(1.0, 0.0);
                }
            }
            let mut fb = CMatrix::zeros(2, bob_dim);
            fb[(0, ann.slots.0)] = amp;
            fb[(1, ann.slots.1)] = amp;
            SiftingMaps { announcement: ann, filter_alice: fa, filter_bob: fb }
        })
        .collect()
}

// ====================================================================
// Alice states
// ====================================================================

/// Poisson weight e^{−λ} λ^n / n!.
pub fn poisson_weight(lambda: f64, n: usize) -> f64 {
    let mut w = (-lambda).exp();
    for k in 1..=n {
        w *= lambda / k as f64;
    }
    w
}

/// Normalized overlap of two n-photon block states with bit patterns `i` and
/// `j`: ((m − Δ)/m)^n with Δ their Hamming distance.
pub fn gram_overlap(m: usize, n: u32, i: &[u8], j: &[u8]) -> Result<f64, ProtocolError> {
    if i.len() != m || j.len() != m {
        return Err(ProtocolError::InvalidConfig(format!(
            "bit strings of lengths {} and {} do not match m = {m}",
            i.len(),
            j.len()
        )));
    }
    if i.iter().chain(j.iter()).any(|&b| b > 1) {
        return Err(ProtocolError::InvalidConfig("bit strings must be 0/1 valued".into()));
    }
    let delta = i.iter().zip(j.iter()).filter(|(a, b)| a != b).count();
    Ok(((m - delta) as f64 / m as f64).powi(n as i32))
}

/// Mask-based Gram overlap used internally.
pub fn gram_overlap_masks(m: usize, n: u32, i: usize, j: usize) -> f64 {
    let delta = hamming(i, j) as f64;
    ((m as f64 - delta) / m as f64).powi(n as i32)
}

/// The single-bit reduced state of a pure block: a 2×2 matrix with diagonal
/// 1/2 and off-diagonal e^{−μ}/2. The full pure-mode Alice state is its m-th
/// tensor power.
pub fn single_bit_state(mu: f64) -> HermitianOperator {
    let layout = SubsystemLayout::single(2).expect("dim 2 fits");
    let h = 0.5;
    let o = 0.5 * (-mu).exp();
    let mut mat = CMatrix::zeros(2, 2);
    mat[(0, 0)] = C64::new(h, 0.0);
    mat[(1, 1)] = C64::new(h, 0.0);
    mat[(0, 1)] = C64::new(o, 0.0);
    mat[(1, 0)] = C64::new(o, 0.0);
    HermitianOperator::new(layout, mat).expect("exact hermitian")
}

/// Alice's reduced block state. Pure mode: entries 2^{−m} e^{−μ Δ_ij} on the
/// pattern basis. Randomized mode: block-diagonal over the shield with
/// Poisson weight p_λ(n) on levels n = 1..n_cut and the aggregate of all
/// remaining photon numbers (including vacuum) on the collector level, each
/// block a weighted Gram matrix of n-photon overlaps.
pub fn reduced_alice_state(config: &BlockConfig) -> Result<HermitianOperator, ProtocolError> {
    let m = config.m;
    let np = config.pattern_count();
    let norm = 1.0 / np as f64;
    let layout = config.alice_layout()?;
    match config.mode {
        PhaseMode::Pure => {
            let mut mat = CMatrix::zeros(np, np);
            for i in 0..np {
                for j in 0..np {
                    let delta = hamming(i, j) as f64;
                    mat[(i, j)] = C64::new(norm * (-config.mu * delta).exp(), 0.0);
                }
            }
            Ok(HermitianOperator::new(layout, mat)?)
        }
        PhaseMode::Randomized { n_cut } => {
            let sdim = n_cut + 1;
            let dim = np * sdim;
            let lambda = config.lambda();
            let mut mat = CMatrix::zeros(dim, dim);
            for i in 0..np {
                for j in 0..np {
                    let delta = hamming(i, j) as f64;
                    // Tail weight: sum over n ∉ {1..n_cut} of p_λ(n) γ^n,
                    // via the full mixture e^{−μΔ} minus the kept levels.
                    let mut collector = (-config.mu * delta).exp();
                    for n in 1..=n_cut {
                        let w = poisson_weight(lambda, n) * gram_overlap_masks(m, n as u32, i, j);
                        collector -= w;
                        let r = i * sdim + (n - 1);
                        let c = j * sdim + (n - 1);
                        mat[(r, c)] = C64::new(norm * w, 0.0);
                    }
                    let r = i * sdim + n_cut;
                    let c = j * sdim + n_cut;
                    mat[(r, c)] = C64::new(norm * collector, 0.0);
                }
            }
            Ok(HermitianOperator::new(layout, mat)?)
        }
    }
}

// ====================================================================
// Bob's squashed POVM
// ====================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Port {
    Plus,
    Minus,
}

/// One conclusive monitoring outcome: the rank-1 projector onto
/// (|c⟩ ± |c+2⟩)/√2 with `c = pair_start`.
#[derive(Debug, Clone)]
pub struct MonitoringOutcome {
    pub pair_start: usize,
    pub port: Port,
    pub op: HermitianOperator,
}

/// Monitoring setting for the interior bit pair (position, position+1):
/// four conclusive interference outcomes plus the inconclusive complement.
#[derive(Debug, Clone)]
pub struct MonitoringSetting {
    pub position: usize,
    pub outcomes: Vec<MonitoringOutcome>,
    pub inconclusive: HermitianOperator,
}

#[derive(Debug, Clone)]
pub struct BobPovm {
    /// Rank-1 slot projectors |d⟩⟨d| for d = 0..2m.
    pub data: Vec<HermitianOperator>,
    /// Projector onto the inconclusive level.
    pub data_inconclusive: HermitianOperator,
    /// One setting per interior bit pair, positions 0..m−1.
    pub monitoring: Vec<MonitoringSetting>,
}

fn slot_projector(bob: &SubsystemLayout, s: usize) -> HermitianOperator {
    let dim = bob.total_dim();
    let mut mat = CMatrix::zeros(dim, dim);
    mat[(s, s)] = C64::new(1.0, 0.0);
    HermitianOperator::new(bob.clone(), mat).expect("projector is hermitian")
}

fn interference_projector(bob: &SubsystemLayout, c: usize, port: Port) -> HermitianOperator {
    let dim = bob.total_dim();
    let sign = match port {
        Port::Plus => 1.0,
        Port::Minus => -1.0,
    };
    let mut mat = CMatrix::zeros(dim, dim);
    let h = C64::new(0.5, 0.0);
    let s = C64::new(0.5 * sign, 0.0);
    mat[(c, c)] = h;
    mat[(c + 2, c + 2)] = h;
    mat[(c, c + 2)] = s;
    mat[(c + 2, c)] = s;
    HermitianOperator::new(bob.clone(), mat).expect("projector is hermitian")
}

/// Bob's measurement families on the squashed space: the data-line slot
/// projectors and, per interior bit pair, the four conclusive interference
/// projectors with their inconclusive complement.
pub fn bob_povm(config: &BlockConfig) -> Result<BobPovm, ProtocolError> {
    let m = config.m;
    let bob = config.bob_layout()?;
    let data: Vec<_> = (0..2 * m).map(|s| slot_projector(&bob, s)).collect();
    let data_inconclusive = slot_projector(&bob, 2 * m);

    let monitoring = (0..m - 1)
        .map(|pos| {
            let outcomes: Vec<_> = [(2 * pos, Port::Plus), (2 * pos, Port::Minus),
                (2 * pos + 1, Port::Plus), (2 * pos + 1, Port::Minus)]
                .into_iter()
                .map(|(c, port)| MonitoringOutcome {
                    pair_start: c,
                    port,
                    op: interference_projector(&bob, c, port),
                })
                .collect();
            let mut inconclusive = HermitianOperator::identity(bob.clone());
            for o in &outcomes {
                inconclusive.add_assign_scaled(&o.op, -1.0);
            }
            MonitoringSetting { position: pos, outcomes, inconclusive }
        })
        .collect();

    Ok(BobPovm { data, data_inconclusive, monitoring })
}

// ====================================================================
// Gain and phase-error operators
// ====================================================================

/// Flattened joint index of (pattern, shield level, receiver level).
fn joint_index(config: &BlockConfig, pattern: usize, shield: usize, bob: usize) -> usize {
    let sdim = config.shield_dim().unwrap_or(1);
    (pattern * sdim + shield) * config.bob_dim() + bob
}

/// The sifting-gain operator P = Σ_v (F_v^A† F_v^A) ⊗ [1_shield ⊗]
/// (F_v^B† F_v^B). Diagonal in the pattern ⊗ slot basis; tr(ρP) is the
/// conclusive-announcement probability of ρ.
pub fn gain_operator(config: &BlockConfig) -> Result<HermitianOperator, ProtocolError> {
    let m = config.m;
    let layout = config.joint_layout()?;
    let sdim = config.shield_dim().unwrap_or(1);
    let mut diag = vec![0.0f64; layout.total_dim()];
    for ann in announcements(m) {
        for pattern in 0..config.pattern_count() {
            let conclusive =
                bit_at(pattern, ann.positions.0, m) != bit_at(pattern, ann.positions.1, m);
            if !conclusive {
                continue;
            }
            for shield in 0..sdim {
                for slot in [ann.slots.0, ann.slots.1] {
                    diag[joint_index(config, pattern, shield, slot)] += ann.weight;
                }
            }
        }
    }
    Ok(HermitianOperator::from_diagonal(layout, &diag)?)
}

/// The coherence-average operator X̄ = Σ_v X_A^{(v)} ⊗ [1_shield ⊗] X_B^{(v)}
/// with X_A^{(v)} = F_v^A† σ_x F_v^A and X_B^{(v)} = (1/2) F_v^B† σ_x F_v^B.
/// Traceless and Hermitian.
pub fn coherence_average_operator(config: &BlockConfig) -> Result<HermitianOperator, ProtocolError> {
    let m = config.m;
    let layout = config.joint_layout()?;
    let sdim = config.shield_dim().unwrap_or(1);
    let dim = layout.total_dim();
    let mut mat = CMatrix::zeros(dim, dim);
    for ann in announcements(m) {
        let half_w = 0.5 * ann.weight;
        let (p0, p1) = ann.positions;
        let toggle = (1 << (m - 1 - p0)) | (1 << (m - 1 - p1));
        for pattern in 0..config.pattern_count() {
            if bit_at(pattern, p0, m) == bit_at(pattern, p1, m) {
                continue;
            }
            let flipped = pattern ^ toggle;
            for shield in 0..sdim {
                // X_A swaps the conclusive patterns; X_B carries the slot
                // coherence |s1⟩⟨s2| + |s2⟩⟨s1| with prefactor weight/2.
                let r1 = joint_index(config, flipped, shield, ann.slots.0);
                let c1 = joint_index(config, pattern, shield, ann.slots.1);
                mat[(r1, c1)] += C64::new(half_w, 0.0);
                let r2 = joint_index(config, flipped, shield, ann.slots.1);
                let c2 = joint_index(config, pattern, shield, ann.slots.0);
                mat[(r2, c2)] += C64::new(half_w, 0.0);
            }
        }
    }
    Ok(HermitianOperator::new(layout, mat)?)
}

/// The averaged phase-error operator F = (1/2)·gain − X̄, so that
/// δ̄ = tr(ρ F) for every state ρ.
pub fn phase_error_objective(config: &BlockConfig) -> Result<HermitianOperator, ProtocolError> {
    let gain = gain_operator(config)?;
    let x = coherence_average_operator(config)?;
    let mut f = gain.scale(0.5);
    f.add_assign_scaled(&x, -1.0);
    Ok(f)
}

// ====================================================================
// Tests
// ====================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{kron, kron_all, partial_trace};
    use approx::assert_relative_eq;

    fn max_entry_diff(a: &HermitianOperator, b: &HermitianOperator) -> f64 {
        (a.matrix() - b.matrix()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn config_validation() {
        assert!(BlockConfig::pure(1, 0.1).is_err());
        assert!(BlockConfig::pure(2, 0.0).is_err());
        assert!(BlockConfig::pure(2, -0.5).is_err());
        assert!(BlockConfig::randomized(2, 0.1, 0).is_err());
        let c = BlockConfig::randomized(3, 0.2, 2).unwrap();
        assert_relative_eq!(c.lambda(), 0.6, max_relative = 1e-15);
        assert_eq!(c.alice_dim(), 8 * 3);
        assert_eq!(c.bob_dim(), 7);
    }

    #[test]
    fn announcement_combinatorics() {
        // m = 3: three ordered pairs per parity cycle, weight 1/2 each.
        let a3 = announcements(3);
        assert_eq!(a3.len(), 6);
        for ann in &a3 {
            assert_eq!(ann.weight, 0.5);
            assert_eq!(ann.slots.1, (ann.slots.0 + 2) % 6);
            assert_eq!(ann.slots.0 % 2, ann.slots.1 % 2);
        }
        // m = 2: the two neighbour choices coincide; merged weight 1.
        let a2 = announcements(2);
        assert_eq!(a2.len(), 2);
        assert!(a2.iter().all(|a| a.weight == 1.0));
        assert_eq!(a2[0].slots, (0, 2));
        assert_eq!(a2[1].slots, (1, 3));
    }

    #[test]
    fn filter_completeness_matches_data_projectors() {
        for m in [2usize, 3, 4] {
            let config = BlockConfig::pure(m, 0.1).unwrap();
            let filters = announcement_filters(&config);
            let bob_dim = config.bob_dim();
            let mut sum = CMatrix::zeros(bob_dim, bob_dim);
            for f in &filters {
                sum += f.filter_bob.adjoint() * &f.filter_bob;
            }
            let povm = bob_povm(&config).unwrap();
            let mut data_sum = CMatrix::zeros(bob_dim, bob_dim);
            for d in &povm.data {
                data_sum += d.matrix();
            }
            let dev = (&sum - &data_sum).iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(dev < 1e-14, "filter completeness violated at m = {m}: {dev}");
        }
    }

    #[test]
    fn alice_filters_are_rank_two_projectors_on_conclusive_patterns() {
        let config = BlockConfig::pure(3, 0.1).unwrap();
        for f in announcement_filters(&config) {
            let p = f.filter_alice.adjoint() * &f.filter_alice;
            // Projector onto span{|01⟩, |10⟩} of the relevant pair.
            let dev = (&p * &p - &p).iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(dev < 1e-15);
            let trace: C64 = p.diagonal().iter().sum();
            assert_relative_eq!(trace.re, 2.0, max_relative = 1e-15);
            assert_eq!(p[(1, 1)], C64::new(1.0, 0.0));
            assert_eq!(p[(2, 2)], C64::new(1.0, 0.0));
            assert_eq!(p[(0, 0)], C64::new(0.0, 0.0));
            assert_eq!(p[(3, 3)], C64::new(0.0, 0.0));
        }
    }

    #[test]
    fn correlated_bit_labels_in_noiseless_channel() {
        // For every announcement: the pattern whose pulse sits in the first
        // announced slot maps to Alice bit 0, matching Bob's bit-0 click.
        for m in [2usize, 3, 4] {
            let config = BlockConfig::pure(m, 0.1).unwrap();
            for f in announcement_filters(&config) {
                let ann = &f.announcement;
                // Bit value whose pulse sits in the first announced slot,
                // and the conclusive pair basis index it induces.
                let v_first = if ann.slots.0 % 2 == 0 { 1 } else { 0 };
                let v_second = 1 - v_first;
                let idx = 2 * v_first + v_second;
                assert_eq!(
                    f.filter_alice[(0, idx)],
                    C64::new(1.0, 0.0),
                    "Alice bit 0 must align with a click in the first slot"
                );
            }
        }
    }

    #[test]
    fn single_bit_state_matches_closed_form() {
        let mu = 0.3;
        let s = single_bit_state(mu);
        assert_eq!(s.matrix()[(0, 0)].re, 0.5);
        assert_relative_eq!(s.matrix()[(0, 1)].re, 0.5 * (-0.3f64).exp(), max_relative = 1e-15);
        // μ → ∞: off-diagonals vanish.
        let far = single_bit_state(800.0);
        assert_eq!(far.matrix()[(0, 1)].re, 0.0);
    }

    #[test]
    fn pure_state_is_tensor_power_of_single_bit_state() {
        for m in [2usize, 3] {
            let mu = 0.17;
            let config = BlockConfig::pure(m, mu).unwrap();
            let rho = reduced_alice_state(&config).unwrap();
            let one = single_bit_state(mu);
            let factors: Vec<&HermitianOperator> = (0..m).map(|_| &one).collect();
            let power = kron_all(&factors).unwrap();
            assert!(max_entry_diff(&rho, &power) < 1e-15);
        }
    }

    #[test]
    fn alice_states_are_density_matrices() {
        for m in [2usize, 3, 4, 5] {
            for mu in [1e-3, 0.05, 0.3, 1.0] {
                let pure = BlockConfig::pure(m, mu).unwrap();
                let rho = reduced_alice_state(&pure).unwrap();
                assert_relative_eq!(rho.trace(), 1.0, max_relative = 1e-10);
                assert!(rho.min_eigenvalue().unwrap() > -1e-10);

                if m <= 4 {
                    let rand = BlockConfig::randomized(m, mu, 2).unwrap();
                    let rho_r = reduced_alice_state(&rand).unwrap();
                    assert_relative_eq!(rho_r.trace(), 1.0, max_relative = 1e-10);
                    assert!(rho_r.min_eigenvalue().unwrap() > -1e-10);
                }
            }
        }
    }

    #[test]
    fn randomized_state_shield_blocks() {
        // m = 2, shield level n = 1 block: p_λ(1)·((2−Δ)/2)/4 entrywise.
        let config = BlockConfig::randomized(2, 0.13, 2).unwrap();
        let rho = reduced_alice_state(&config).unwrap();
        let lambda = config.lambda();
        let p1 = poisson_weight(lambda, 1);
        for i in 0..4usize {
            for j in 0..4usize {
                let delta = hamming(i, j) as f64;
                let want = p1 * (2.0 - delta) / 2.0 / 4.0;
                let got = rho.matrix()[(i * 3, j * 3)].re;
                assert_relative_eq!(got, want, max_relative = 1e-13, epsilon = 1e-18);
                // Off-diagonal shield entries vanish.
                assert_eq!(rho.matrix()[(i * 3, j * 3 + 1)], C64::new(0.0, 0.0));
            }
        }
        // Shield marginal: Poisson weights with the collector absorbing the rest.
        let shield = partial_trace(&rho, &[2]).unwrap();
        assert_relative_eq!(shield.matrix()[(0, 0)].re, poisson_weight(lambda, 1), max_relative = 1e-12);
        assert_relative_eq!(shield.matrix()[(1, 1)].re, poisson_weight(lambda, 2), max_relative = 1e-12);
        let rest = 1.0 - poisson_weight(lambda, 1) - poisson_weight(lambda, 2);
        assert_relative_eq!(shield.matrix()[(2, 2)].re, rest, max_relative = 1e-12);
    }

    #[test]
    fn gram_overlap_examples() {
        assert_eq!(gram_overlap(3, 5, &[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(gram_overlap(2, 1, &[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_relative_eq!(
            gram_overlap(3, 2, &[1, 0, 1], &[0, 0, 1]).unwrap(),
            4.0 / 9.0,
            max_relative = 1e-15
        );
        assert!(gram_overlap(3, 1, &[1, 0], &[1, 0, 1]).is_err());
        assert!(gram_overlap(2, 1, &[2, 0], &[1, 0]).is_err());
    }

    /// Brute-force n-photon inner product: expand both block states in the
    /// mode-occupation basis and take the dot product directly.
    fn brute_force_overlap(m: usize, n: usize, i: usize, j: usize) -> f64 {
        fn amplitudes(m: usize, n: usize, pattern: usize, out: &mut Vec<(Vec<usize>, f64)>) {
            // Distribute n photons over the m occupied modes.
            fn rec(
                pos: usize,
                left: usize,
                m: usize,
                pattern: usize,
                occ: &mut Vec<usize>,
                out: &mut Vec<(Vec<usize>, f64)>,
            ) {
                if pos == m {
                    if left == 0 {
                        // amplitude ∝ 1/√(∏ k_s!) with overall m^{-n/2}√(n!)
                        let mut inv = 1.0;
                        for &k in occ.iter() {
                            let mut f = 1.0;
                            for t in 1..=k {
                                f *= t as f64;
                            }
                            inv /= f.sqrt();
                        }
                        out.push((occ.clone(), inv));
                    }
                    return;
                }
                for k in 0..=left {
                    occ.push(k);
                    rec(pos + 1, left - k, m, pattern, occ, out);
                    occ.pop();
                }
            }
            let mut occ = Vec::new();
            rec(0, n, m, pattern, &mut occ, out);
            let mut nf = 1.0;
            for t in 1..=n {
                nf *= t as f64;
            }
            let norm = nf.sqrt() / (m as f64).powf(n as f64 / 2.0);
            for a in out.iter_mut() {
                a.1 *= norm;
            }
        }
        let mut ai = Vec::new();
        let mut aj = Vec::new();
        amplitudes(m, n, i, &mut ai);
        amplitudes(m, n, j, &mut aj);
        // Occupation vectors live on 2m modes; entry per position goes to the
        // occupied slot of that pattern.
        let to_modes = |pattern: usize, occ: &[usize]| -> Vec<usize> {
            let mut modes = vec![0usize; 2 * m];
            for (pos, &k) in occ.iter().enumerate() {
                modes[occupied_slot(pattern, pos, m)] += k;
            }
            modes
        };
        let mut acc = 0.0;
        for (oi, vi) in &ai {
            let mi = to_modes(i, oi);
            for (oj, vj) in &aj {
                if mi == to_modes(j, oj) {
                    acc += vi * vj;
                }
            }
        }
        acc
    }

    #[test]
    fn gram_overlap_matches_brute_force_expansion() {
        for (m, n, i, j) in [(3usize, 2usize, 0b101, 0b001), (2, 3, 0b01, 0b10), (3, 1, 0b110, 0b100), (2, 2, 0b00, 0b01)] {
            let direct = gram_overlap_masks(m, n as u32, i, j);
            let brute = brute_force_overlap(m, n, i, j);
            assert_relative_eq!(direct, brute, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn povm_completeness_and_orthogonality() {
        let config = BlockConfig::pure(2, 0.1).unwrap();
        let povm = bob_povm(&config).unwrap();
        let id = HermitianOperator::identity(config.bob_layout().unwrap());
        // Data setting: slot projectors plus inconclusive sum to identity.
        let mut total = HermitianOperator::zero(config.bob_layout().unwrap());
        for d in &povm.data {
            total.add_assign_scaled(d, 1.0);
        }
        total.add_assign_scaled(&povm.data_inconclusive, 1.0);
        assert_eq!(total.matrix(), id.matrix());

        // Monitoring setting: the four outcomes plus complement sum to identity.
        for setting in &povm.monitoring {
            let mut s = setting.inconclusive.clone();
            for o in &setting.outcomes {
                s.add_assign_scaled(&o.op, 1.0);
            }
            assert_eq!(s.matrix(), id.matrix());
        }

        // χ^+ is an eigenvector of B_{c,+} with eigenvalue 1, of B_{c,−} with 0.
        let plus = &povm.monitoring[0].outcomes[0].op;
        let minus = &povm.monitoring[0].outcomes[1].op;
        let mut chi = nalgebra::DVector::<C64>::zeros(config.bob_dim());
        chi[0] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        chi[2] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let applied = plus.matrix() * &chi;
        assert!((&applied - &chi).iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-15);
        let killed = minus.matrix() * &chi;
        assert!(killed.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-15);
    }

    #[test]
    fn monitoring_spectra_within_unit_interval() {
        let config = BlockConfig::pure(3, 0.1).unwrap();
        let povm = bob_povm(&config).unwrap();
        for setting in &povm.monitoring {
            let mut conclusive = HermitianOperator::zero(config.bob_layout().unwrap());
            for o in &setting.outcomes {
                conclusive.add_assign_scaled(&o.op, 1.0);
            }
            let vals = conclusive.eigenvalues().unwrap();
            assert!(vals[0] > -1e-12);
            assert!(vals[vals.len() - 1] < 1.0 + 1e-12);
            assert!(setting.inconclusive.min_eigenvalue().unwrap() > -1e-12);
        }
    }

    #[test]
    fn gain_operator_bounds_and_examples() {
        for m in [2usize, 3, 4] {
            let config = BlockConfig::pure(m, 0.1).unwrap();
            let gain = gain_operator(&config).unwrap();
            let vals = gain.eigenvalues().unwrap();
            assert!(vals[0] >= -1e-14, "gain PSD at m = {m}");
            assert!(vals[vals.len() - 1] <= 1.0 + 1e-14, "gain ≤ 1 at m = {m}");
        }

        // Inconclusive receiver level contributes zero gain.
        let config = BlockConfig::pure(2, 0.1).unwrap();
        let gain = gain_operator(&config).unwrap();
        for pattern in 0..4 {
            let idx = joint_index(&config, pattern, 0, config.bob_dim() - 1);
            assert_eq!(gain.matrix()[(idx, idx)], C64::new(0.0, 0.0));
        }
        // Conclusive pattern 01 with a click in slot 2 has positive weight.
        let idx = joint_index(&config, 0b01, 0, 2);
        assert!(gain.matrix()[(idx, idx)].re > 0.0);
    }

    /// Independent construction of X̄ following the per-pair form:
    /// Σ_l X_{A;l} ⊗ X_{B;l} with X_{B;l} = (1/4)(|2l−1⟩⟨2l+1| + h.c.
    /// + |2l⟩⟨2l+2| + h.c.) in 1-based slot labels, indices mod 2m.
    fn coherence_by_pairs(config: &BlockConfig) -> HermitianOperator {
        let m = config.m;
        let layout = config.joint_layout().unwrap();
        let dim = layout.total_dim();
        let sdim = config.shield_dim().unwrap_or(1);
        let mut mat = CMatrix::zeros(dim, dim);
        for l in 0..m {
            let lp = (l + 1) % m;
            let toggle = (1 << (m - 1 - l)) | (1 << (m - 1 - lp));
            for pattern in 0..config.pattern_count() {
                if bit_at(pattern, l, m) == bit_at(pattern, lp, m) {
                    continue;
                }
                let flipped = pattern ^ toggle;
                for shield in 0..sdim {
                    for (s1, s2) in [(2 * l, (2 * l + 2) % (2 * m)), (2 * l + 1, (2 * l + 3) % (2 * m))] {
                        let q = 0.25;
                        let r = joint_index(config, flipped, shield, s1);
                        let c = joint_index(config, pattern, shield, s2);
                        mat[(r, c)] += C64::new(q, 0.0);
                        let r2 = joint_index(config, flipped, shield, s2);
                        let c2 = joint_index(config, pattern, shield, s1);
                        mat[(r2, c2)] += C64::new(q, 0.0);
                    }
                }
            }
        }
        HermitianOperator::new(layout, mat).unwrap()
    }

    #[test]
    fn coherence_operator_matches_per_pair_construction() {
        for m in [2usize, 3, 4] {
            let config = BlockConfig::pure(m, 0.1).unwrap();
            let via_filters = coherence_average_operator(&config).unwrap();
            let via_pairs = coherence_by_pairs(&config);
            assert!(
                max_entry_diff(&via_filters, &via_pairs) < 1e-14,
                "announcement-built and pair-built coherence operators differ at m = {m}"
            );
        }
        let config = BlockConfig::randomized(2, 0.1, 2).unwrap();
        let via_filters = coherence_average_operator(&config).unwrap();
        let via_pairs = coherence_by_pairs(&config);
        assert!(max_entry_diff(&via_filters, &via_pairs) < 1e-14);
    }

    #[test]
    fn coherence_operator_is_traceless_with_quarter_eigenvalues() {
        for m in [2usize, 3, 4] {
            let config = BlockConfig::pure(m, 0.1).unwrap();
            let x = coherence_average_operator(&config).unwrap();
            assert!(x.trace().abs() < 1e-14);
        }
        // A single slot-pair coherence term has spectrum {±1/4, 0…}.
        let m = 3;
        let dim = 2 * m + 1;
        let mut xb = CMatrix::zeros(dim, dim);
        for (s1, s2) in [(0usize, 2usize), (1, 3)] {
            xb[(s1, s2)] += C64::new(0.25, 0.0);
            xb[(s2, s1)] += C64::new(0.25, 0.0);
        }
        let op = HermitianOperator::new(SubsystemLayout::single(dim).unwrap(), xb).unwrap();
        let vals = op.eigenvalues().unwrap();
        assert_relative_eq!(vals[0], -0.25, max_relative = 1e-13);
        assert_relative_eq!(vals[vals.len() - 1], 0.25, max_relative = 1e-13);
    }

    #[test]
    fn phase_error_between_zero_and_gain_on_random_separable_states() {
        let config = BlockConfig::pure(2, 0.1).unwrap();
        let f = phase_error_objective(&config).unwrap();
        let p = gain_operator(&config).unwrap();

        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            // Random product density matrix ρ_A ⊗ ρ_B via Gram construction.
            let rand_density = |dim: usize, next: &mut dyn FnMut() -> f64| {
                let mut g = CMatrix::zeros(dim, dim);
                for i in 0..dim {
                    for j in 0..dim {
                        g[(i, j)] = C64::new(next() - 0.5, next() - 0.5);
                    }
                }
                let gram = &g * g.adjoint();
                let tr: f64 = (0..dim).map(|i| gram[(i, i)].re).sum();
                let mat = gram / C64::new(tr, 0.0);
                HermitianOperator::new(SubsystemLayout::single(dim).unwrap(), mat).unwrap()
            };
            let ra = rand_density(4, &mut next);
            let rb = rand_density(5, &mut next);
            let rho = kron(&ra, &rb).unwrap();
            let delta = f.hs_inner(&rho);
            let gain = p.hs_inner(&rho);
            assert!(delta >= -1e-12, "phase error must be nonnegative, got {delta}");
            assert!(delta <= gain + 1e-12, "phase error {delta} exceeds gain {gain}");
        }
    }

    #[test]
    fn randomized_operators_act_as_identity_on_shield() {
        let config = BlockConfig::randomized(2, 0.1, 2).unwrap();
        for op in [gain_operator(&config).unwrap(), phase_error_objective(&config).unwrap()] {
            let mat = op.matrix();
            let sdim = 3;
            let bd = config.bob_dim();
            for pi in 0..config.pattern_count() {
                for pj in 0..config.pattern_count() {
                    for bi in 0..bd {
                        for bj in 0..bd {
                            let at = |s: usize, t: usize| {
                                mat[((pi * sdim + s) * bd + bi, (pj * sdim + t) * bd + bj)]
                            };
                            // Shield off-diagonal blocks vanish; diagonal blocks agree.
                            for s in 0..sdim {
                                for t in 0..sdim {
                                    if s != t {
                                        assert_eq!(at(s, t), C64::new(0.0, 0.0));
                                    } else {
                                        assert_eq!(at(s, s), at(0, 0));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
