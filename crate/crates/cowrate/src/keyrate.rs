//! From observed statistics to certified key rates.
//!
//! The estimation step casts the averaged phase-error rate as a semidefinite
//! program over the joint block state: the coherence term is maximized
//! subject to every expectation value the protocol reveals. Because the
//! conclusive-announcement probability G is pinned by the data-line
//! constraints, the bound splits into an exact G/2 offset plus a certified
//! bound on the coherence term alone. The block key-rate formula, the
//! intensity optimization, and loss sweeps with cutoff search are layered
//! on top.

use crate::channel::{
    observed_constraints, observed_constraints_relabeled, sifted_statistics, ChannelError,
    ChannelParams,
};
use crate::operators::{C64, CMatrix, HermitianOperator, OperatorError, SubsystemLayout};
use crate::protocol::{coherence_average_operator, BlockConfig, PhaseMode, ProtocolError};
use crate::sdp::{
    certified_bound, independent_constraints, reduce_zero_support, solve, SdpError, SdpProblem,
};
use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

/// Default relative duality-gap target for the estimation SDP.
pub const DEFAULT_SDP_TOL: f64 = 1e-6;

/// Default search window for the pulse intensity. The optimum falls steeply
/// with loss, from a few times 1e-2 at short distance to a few times 1e-4
/// near cutoff, so the window reaches well below the bright end.
pub const DEFAULT_MU_RANGE: (f64, f64) = (1e-5, 0.5);

/// Cutoff refinement stops once the bracketing interval is this narrow (dB).
pub const CUTOFF_RESOLUTION_DB: f64 = 0.1;

#[derive(Debug, Error)]
pub enum KeyrateError {
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
}

// ====================================================================
// Entropy and the block rate formula
// ====================================================================

/// Binary entropy −x log2 x − (1−x) log2(1−x), with h2(0) = h2(1) = 0.
pub fn binary_entropy(x: f64) -> Result<f64, KeyrateError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(KeyrateError::Domain(format!(
            "binary entropy argument {x} outside [0, 1]"
        )));
    }
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.log2() };
    Ok(term(x) + term(1.0 - x))
}

/// Per-pulse key rate of an m-bit block:
/// max(0, G·[1 − h2(ē_c) − h2(min(δ̄^max/G, 1/2))]) / (2m).
///
/// The entropy arguments are clamped to [0, 1/2]: beyond that point the
/// bound underlying the formula is vacuous rather than negative, so the
/// rate is reported as zero.
pub fn rate_from_statistics(
    gain: f64,
    e_bar: f64,
    delta_max: f64,
    m: usize,
) -> Result<f64, KeyrateError> {
    if m < 2 {
        return Err(KeyrateError::Domain(format!("block size m = {m} must be at least 2")));
    }
    if !(0.0..=1.0).contains(&gain) {
        return Err(KeyrateError::Domain(format!("gain {gain} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&e_bar) {
        return Err(KeyrateError::Domain(format!("bit error rate {e_bar} outside [0, 1]")));
    }
    if !delta_max.is_finite() || delta_max < -1e-9 {
        return Err(KeyrateError::Domain(format!(
            "phase error bound {delta_max} must be finite and nonnegative"
        )));
    }
    if gain == 0.0 || e_bar > 0.5 {
        return Ok(0.0);
    }
    let ratio = (delta_max / gain).clamp(0.0, 0.5);
    let bracket = 1.0 - binary_entropy(e_bar)? - binary_entropy(ratio)?;
    Ok((gain * bracket).max(0.0) / (2.0 * m as f64))
}

// ====================================================================
// Phase-error estimation
// ====================================================================

/// Certified upper bound on the averaged phase-error rate, with the solver
/// diagnostics needed to judge its quality.
#[derive(Debug, Clone, Copy)]
pub struct PhaseErrorBound {
    /// Certified upper bound on δ̄.
    pub delta_max: f64,
    /// delta_max / G, the entropy argument of the rate formula.
    pub ratio: f64,
    /// Conclusive-announcement probability G per block.
    pub gain: f64,
    /// Relative duality gap the solver reached.
    pub solver_gap: f64,
    /// False when the solver stopped short of the gap target; the bound is
    /// then still valid, just possibly loose.
    pub converged: bool,
    pub iterations: usize,
    /// Linearly independent constraints actually passed to the solver.
    pub constraint_count: usize,
}

/// Assembly knobs for consistency checks; the defaults are the production
/// path.
#[derive(Debug, Clone, Copy)]
pub struct EstimationOptions {
    /// Assemble the constraints under the complementary bit labeling. The
    /// resulting bound must agree with the standard labeling.
    pub relabeled: bool,
    /// Restrict the variable to shield-block-diagonal form (randomized
    /// mode). Exact, because dephasing in the shield basis preserves all
    /// constraints and the objective; the non-restricted solve is kept
    /// around to validate precisely that.
    pub dephase_shield: bool,
    /// Target relative duality gap.
    pub sdp_tol: f64,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self { relabeled: false, dephase_shield: true, sdp_tol: DEFAULT_SDP_TOL }
    }
}

/// Certified upper bound on the averaged phase-error rate compatible with
/// everything the protocol observes at these parameters.
pub fn max_phase_error(
    config: &BlockConfig,
    params: &ChannelParams,
) -> Result<PhaseErrorBound, KeyrateError> {
    max_phase_error_with(config, params, &EstimationOptions::default())
}

/// [`max_phase_error`] with explicit assembly options.
pub fn max_phase_error_with(
    config: &BlockConfig,
    params: &ChannelParams,
    opts: &EstimationOptions,
) -> Result<PhaseErrorBound, KeyrateError> {
    let set = if opts.relabeled {
        observed_constraints_relabeled(config, params)?
    } else {
        observed_constraints(config, params)?
    };
    let gain = set.gain;
    if !(gain > 0.0) {
        return Err(KeyrateError::Numeric(format!(
            "conclusive probability {gain}; nothing to estimate from"
        )));
    }

    // δ̄ = tr(ρ (P/2 − X̄)) and tr(ρP) = G is fixed by the data-line
    // constraints (P is diagonal in exactly the projectors they use), so
    // maximize the remaining term. Scaling by 1/G makes the SDP optimum the
    // entropy argument δ̄/G − 1/2 itself, keeping the solver's relative gap
    // target meaningful uniformly across losses.
    let objective = coherence_average_operator(config)?.scale(-1.0 / gain);
    let problem = assemble_problem(config, objective, set.constraints, opts.dephase_shield)?;
    // Dark-count-free parameters put exact zeros among the click
    // probabilities; carve their kernel out first or the interior-point
    // iteration has no interior to work in.
    let problem = reduce_zero_support(&problem)?;
    let reduced = independent_constraints(&problem)?;
    let (cert, converged) = match solve(&reduced, opts.sdp_tol) {
        Ok(c) => (c, true),
        Err(SdpError::Convergence { best, .. }) => (*best, false),
        Err(e) => return Err(e.into()),
    };
    let ratio = 0.5 + certified_bound(&cert);
    Ok(PhaseErrorBound {
        delta_max: gain * ratio,
        ratio,
        gain,
        solver_gap: cert.relative_gap(),
        converged,
        iterations: cert.iterations,
        constraint_count: reduced.constraints().len(),
    })
}

/// Build the SDP, either over the full joint space or restricted to a direct
/// sum over shield levels.
///
/// In randomized mode the variable is also restricted to the support of the
/// Alice marginal: tomography pins the marginal exactly, a positive
/// semidefinite matrix cannot carry weight over its marginal's kernel, and
/// that kernel is known in closed form (see [`level_support_basis`]). The
/// restriction is lossless, and without it the feasible set has no interior,
/// which stalls interior-point iterations far from the gap target.
fn assemble_problem(
    config: &BlockConfig,
    objective: HermitianOperator,
    constraints: Vec<(HermitianOperator, f64)>,
    dephase_shield: bool,
) -> Result<SdpProblem, KeyrateError> {
    let Some(sdim) = config.shield_dim() else {
        return Ok(SdpProblem::new(objective, constraints, 1.0)?);
    };
    let bd = config.bob_dim();
    let supports: Vec<DMatrix<f64>> =
        (0..sdim).map(|s| level_support_basis(config.m, s, sdim)).collect();
    if dephase_shield {
        let blocks: Vec<usize> = supports.iter().map(|v| v.ncols() * bd).collect();
        let obj = pinch_and_reduce(config, &objective, &supports)?;
        let cons = constraints
            .iter()
            .map(|(a, b)| Ok((pinch_and_reduce(config, a, &supports)?, *b)))
            .collect::<Result<Vec<_>, OperatorError>>()?;
        Ok(SdpProblem::with_blocks(obj, cons, blocks, 1.0)?)
    } else {
        let w = joint_support_isometry(config, &supports);
        let obj = conjugate_by_isometry(&objective, &w)?;
        let cons = constraints
            .iter()
            .map(|(a, b)| Ok((conjugate_by_isometry(a, &w)?, *b)))
            .collect::<Result<Vec<_>, OperatorError>>()?;
        Ok(SdpProblem::new(obj, cons, 1.0)?)
    }
}

/// Orthonormal basis (columns) for the support of the pattern-space block
/// the Alice marginal carries at shield level `s`.
///
/// Level s < sdim − 1 holds the (s+1)-photon Gram matrix with entries
/// ((m − Δ)/m)^(s+1); in the Fourier basis of the pattern hypercube its
/// eigenvalues vanish exactly on characters of Hamming weight above the
/// photon number, so the support is spanned by the low-weight characters.
/// The collector level mixes photon numbers up to infinity, including n ≥ m
/// whose Gram has full rank, so it keeps the whole space.
fn level_support_basis(m: usize, s: usize, sdim: usize) -> DMatrix<f64> {
    let np = 1usize << m;
    let photons = s + 1;
    if s == sdim - 1 || photons >= m {
        return DMatrix::identity(np, np);
    }
    let keep: Vec<usize> = (0..np).filter(|k| (k.count_ones() as usize) <= photons).collect();
    let norm = 1.0 / (np as f64).sqrt();
    let mut v = DMatrix::zeros(np, keep.len());
    for (col, &k) in keep.iter().enumerate() {
        for p in 0..np {
            let parity = (k & p).count_ones() & 1;
            v[(p, col)] = if parity == 1 { -norm } else { norm };
        }
    }
    v
}

/// Shield-dephased and support-restricted copy of a joint-space operator:
/// one contiguous diagonal block per shield level, each conjugated by the
/// level's pattern-support isometry tensored with the Bob identity.
/// Cross-shield components are annihilated, which is exactly what the
/// dephasing argument requires (their right-hand sides vanish because the
/// reduced state carries no shield coherence).
fn pinch_and_reduce(
    config: &BlockConfig,
    op: &HermitianOperator,
    supports: &[DMatrix<f64>],
) -> Result<HermitianOperator, OperatorError> {
    let np = config.pattern_count();
    let sdim = supports.len();
    let bd = config.bob_dim();
    let dim: usize = supports.iter().map(|v| v.ncols() * bd).sum();
    let src = op.matrix();
    let mut mat = CMatrix::zeros(dim, dim);
    let mut offset = 0usize;
    for (s, v) in supports.iter().enumerate() {
        let k = v.ncols();
        // Level block in (pattern ⊗ bob) coordinates.
        let mut level = CMatrix::zeros(np * bd, np * bd);
        for p1 in 0..np {
            for b1 in 0..bd {
                for p2 in 0..np {
                    for b2 in 0..bd {
                        level[(p1 * bd + b1, p2 * bd + b2)] =
                            src[((p1 * sdim + s) * bd + b1, (p2 * sdim + s) * bd + b2)];
                    }
                }
            }
        }
        let mut w = CMatrix::zeros(np * bd, k * bd);
        for p in 0..np {
            for j in 0..k {
                let val = C64::new(v[(p, j)], 0.0);
                for b in 0..bd {
                    w[(p * bd + b, j * bd + b)] = val;
                }
            }
        }
        let reduced = w.adjoint() * level * &w;
        for r in 0..k * bd {
            for c in 0..k * bd {
                mat[(offset + r, offset + c)] = reduced[(r, c)];
            }
        }
        offset += k * bd;
    }
    let layout = SubsystemLayout::with_ceiling(&[dim], dim.max(64))?;
    HermitianOperator::new(layout, mat)
}

/// Support isometry for the unrestricted joint space, shield coherences kept.
fn joint_support_isometry(config: &BlockConfig, supports: &[DMatrix<f64>]) -> CMatrix {
    let np = config.pattern_count();
    let sdim = supports.len();
    let bd = config.bob_dim();
    let full = np * sdim * bd;
    let reduced: usize = supports.iter().map(|v| v.ncols() * bd).sum();
    let mut w = CMatrix::zeros(full, reduced);
    let mut offset = 0usize;
    for (s, v) in supports.iter().enumerate() {
        for p in 0..np {
            for j in 0..v.ncols() {
                let val = C64::new(v[(p, j)], 0.0);
                for b in 0..bd {
                    w[((p * sdim + s) * bd + b, offset + j * bd + b)] = val;
                }
            }
        }
        offset += v.ncols() * bd;
    }
    w
}

fn conjugate_by_isometry(
    op: &HermitianOperator,
    w: &CMatrix,
) -> Result<HermitianOperator, OperatorError> {
    let reduced = w.adjoint() * op.matrix() * w;
    let dim = reduced.nrows();
    let layout = SubsystemLayout::with_ceiling(&[dim], dim.max(64))?;
    HermitianOperator::new(layout, reduced)
}

/// Worst constraint violation of the honest channel's own state against the
/// assembled constraint set; a consistency oracle for the whole model stack.
pub fn honest_state_residual(
    config: &BlockConfig,
    params: &ChannelParams,
) -> Result<f64, KeyrateError> {
    let rho = crate::channel::honest_squashed_state(config, params)?;
    let set = observed_constraints(config, params)?;
    let mut worst = 0.0f64;
    for (a, b) in &set.constraints {
        worst = worst.max((a.hs_inner(&rho) - b).abs());
    }
    Ok(worst)
}

// ====================================================================
// Rate points
// ====================================================================

/// One evaluated point of the key-rate curve.
#[derive(Debug, Clone, Copy)]
pub struct RatePoint {
    pub loss_db: f64,
    pub mu: f64,
    pub m: usize,
    /// Conclusive-announcement probability per block, G.
    pub gain: f64,
    /// Conclusive-conditioned bit error rate ē_c.
    pub e_bar: f64,
    /// Certified upper bound on the averaged phase error δ̄^max.
    pub delta_max: f64,
    /// max(0, G·[1 − h2(ē_c) − h2(δ̄^max/G)]) / (2m).
    pub rate_per_pulse: f64,
    /// Relative duality gap of the estimation SDP.
    pub solver_gap: f64,
    /// False when the solver fell short of its gap target (bound still
    /// valid) or, with NaN fields, failed outright.
    pub converged: bool,
}

impl RatePoint {
    /// Placeholder for a grid point whose estimation failed outright.
    pub fn failed(loss_db: f64, m: usize) -> Self {
        Self {
            loss_db,
            mu: f64::NAN,
            m,
            gain: f64::NAN,
            e_bar: f64::NAN,
            delta_max: f64::NAN,
            rate_per_pulse: f64::NAN,
            solver_gap: f64::NAN,
            converged: false,
        }
    }
}

/// Full pipeline for one (configuration, channel) pair: closed-form sifted
/// statistics, the estimation SDP, and the rate formula.
pub fn compute_rate_point(
    config: &BlockConfig,
    params: &ChannelParams,
    sdp_tol: f64,
) -> Result<RatePoint, KeyrateError> {
    let stats = sifted_statistics(config, params);
    let opts = EstimationOptions { sdp_tol, ..EstimationOptions::default() };
    let bound = max_phase_error_with(config, params, &opts)?;
    let rate = rate_from_statistics(bound.gain, stats.bit_error, bound.delta_max, config.m)?;
    Ok(RatePoint {
        loss_db: params.loss_db(),
        mu: config.mu,
        m: config.m,
        gain: bound.gain,
        e_bar: stats.bit_error,
        delta_max: bound.delta_max,
        rate_per_pulse: rate,
        solver_gap: bound.solver_gap,
        converged: bound.converged,
    })
}

// ====================================================================
// Intensity optimization
// ====================================================================

/// Outcome of the per-loss intensity search.
#[derive(Debug, Clone, Copy)]
pub struct IntensitySearch {
    pub best_mu: f64,
    pub point: RatePoint,
    /// True when every candidate intensity produced rate zero; `best_mu` is
    /// then just the range midpoint, not an argmax.
    pub all_zero: bool,
}

const PRESCAN_POINTS: usize = 12;
const MU_RELATIVE_TOL: f64 = 1e-3;

/// Maximize the rate over the pulse intensity at fixed channel parameters:
/// a log-spaced pre-scan against local maxima, then golden-section
/// refinement of the best bracket to 1e-3 relative in μ. The block size and
/// phase mode are taken from `template`; its intensity is ignored.
pub fn optimize_intensity(
    template: &BlockConfig,
    params: &ChannelParams,
    mu_range: (f64, f64),
    sdp_tol: f64,
) -> Result<IntensitySearch, KeyrateError> {
    let (lo, hi) = mu_range;
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi && hi <= 1.0) {
        return Err(KeyrateError::Domain(format!(
            "intensity range ({lo}, {hi}) must satisfy 0 < lo < hi <= 1"
        )));
    }
    let eval = |mu: f64| -> Result<RatePoint, KeyrateError> {
        let config = BlockConfig::with_mode(template.m, mu, template.mode)?;
        compute_rate_point(&config, params, sdp_tol)
    };

    // Pre-scan. Candidate evaluations are independent and pure; run them
    // concurrently and aggregate in grid order.
    let step = (hi / lo).powf(1.0 / (PRESCAN_POINTS - 1) as f64);
    let mus: Vec<f64> = (0..PRESCAN_POINTS).map(|k| lo * step.powi(k as i32)).collect();
    let evaluated: Vec<Result<RatePoint, KeyrateError>> =
        mus.par_iter().map(|&mu| eval(mu)).collect();

    let points: Vec<Option<RatePoint>> = evaluated
        .into_iter()
        .map(|r| r.ok().filter(|p| !p.rate_per_pulse.is_nan()))
        .collect();
    if points.iter().all(Option::is_none) {
        return Err(KeyrateError::Numeric(format!(
            "all {PRESCAN_POINTS} intensity candidates failed to evaluate"
        )));
    }
    let argmax = |score: &dyn Fn(&RatePoint) -> f64| -> (usize, RatePoint) {
        points
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.map(|p| (k, p)))
            .max_by(|(_, p), (_, q)| score(p).total_cmp(&score(q)))
            .unwrap()
    };

    let rate_score = |p: &RatePoint| p.rate_per_pulse;
    let (best_idx, grid_best) = argmax(&rate_score);
    if grid_best.rate_per_pulse > 0.0 {
        let (best_mu, best_point) = golden_refine(&mus, best_idx, grid_best, &rate_score, &eval);
        return Ok(IntensitySearch { best_mu, point: best_point, all_zero: false });
    }

    // Every grid point has rate zero. Near the cutoff the positive-rate
    // window in μ is narrower than the grid spacing, so a flat-zero scan
    // does not mean the rate is zero for every intensity: refine on the
    // entropy margin instead, which keeps a gradient where the rate
    // plateaus, then check the rate at its maximizer.
    let (margin_idx, margin_best) = argmax(&entropy_margin);
    let (best_mu, best_point) =
        golden_refine(&mus, margin_idx, margin_best, &entropy_margin, &eval);
    let all_zero = !(best_point.rate_per_pulse > 0.0);
    Ok(IntensitySearch { best_mu, point: best_point, all_zero })
}

/// The key-fraction margin 1 − h2(ē) − h2(δ̄^max/G), extended monotonically
/// past error 1/2 so it keeps penalizing worse errors where the binary
/// entropy would turn around. The rate is positive exactly where this
/// margin is positive, and unlike the rate it stays informative (negative
/// but varying) below the cutoff.
fn entropy_margin(p: &RatePoint) -> f64 {
    fn penalty(x: f64) -> f64 {
        if x <= 0.5 {
            binary_entropy(x.max(0.0)).unwrap_or(f64::INFINITY)
        } else {
            1.0 + (x - 0.5)
        }
    }
    if !(p.gain > 0.0) || !p.e_bar.is_finite() || !p.delta_max.is_finite() {
        return f64::NEG_INFINITY;
    }
    1.0 - penalty(p.e_bar) - penalty(p.delta_max / p.gain)
}

/// Golden-section refinement on ln μ over the one-cell bracket around the
/// best grid point, maximizing `score`. Hard failures inside the bracket
/// count as score −∞. Returns the best evaluated (μ, point) by score.
fn golden_refine(
    mus: &[f64],
    best_idx: usize,
    grid_best: RatePoint,
    score: &dyn Fn(&RatePoint) -> f64,
    eval: &dyn Fn(f64) -> Result<RatePoint, KeyrateError>,
) -> (f64, RatePoint) {
    let mut best_mu = mus[best_idx];
    let mut best_point = grid_best;
    let mut best_score = score(&grid_best);
    let mut probe = |ln_mu: f64| -> f64 {
        let mu = ln_mu.exp();
        match eval(mu) {
            Ok(p) if p.rate_per_pulse.is_nan() => f64::NEG_INFINITY,
            Ok(p) => {
                let s = score(&p);
                if s > best_score {
                    best_mu = mu;
                    best_point = p;
                    best_score = s;
                }
                s
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = mus[best_idx.saturating_sub(1)].ln();
    let mut b = mus[(best_idx + 1).min(mus.len() - 1)].ln();
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = probe(c);
    let mut fd = probe(d);
    while b - a > MU_RELATIVE_TOL.ln_1p() {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = probe(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = probe(d);
        }
    }
    (best_mu, best_point)
}

// ====================================================================
// Loss sweeps and the cutoff search
// ====================================================================

/// Per-point intensity policy of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntensityChoice {
    Fixed(f64),
    Optimize { lo: f64, hi: f64 },
}

/// A family of channel parameters swept over total system loss.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub m: usize,
    pub mode: PhaseMode,
    pub epsilon: f64,
    pub e_d: f64,
    pub e_m: f64,
    /// Strictly increasing loss grid in dB.
    pub losses_db: Vec<f64>,
    pub intensity: IntensityChoice,
    pub sdp_tol: f64,
}

/// Sweep results: the curve, the refined cutoff, and failure bookkeeping.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// One point per grid entry, in grid order.
    pub points: Vec<RatePoint>,
    /// Largest loss with positive rate, bisected to [`CUTOFF_RESOLUTION_DB`];
    /// `None` when no grid point has positive rate.
    pub cutoff_loss_db: Option<f64>,
    /// True when the rate is still positive at the last grid point: the true
    /// cutoff then lies beyond the grid and `cutoff_loss_db` is its lower
    /// bound.
    pub cutoff_at_grid_end: bool,
    /// Grid indices whose estimation failed outright, with the reason; the
    /// corresponding points carry NaN fields.
    pub failures: Vec<(usize, String)>,
}

/// One point of a sweep at an arbitrary loss, under the sweep's intensity
/// policy.
pub fn rate_at_loss(spec: &SweepSpec, loss_db: f64) -> Result<RatePoint, KeyrateError> {
    let params = ChannelParams::from_loss_db(loss_db, spec.epsilon, spec.e_d, spec.e_m)?;
    match spec.intensity {
        IntensityChoice::Fixed(mu) => {
            let config = BlockConfig::with_mode(spec.m, mu, spec.mode)?;
            compute_rate_point(&config, &params, spec.sdp_tol)
        }
        IntensityChoice::Optimize { lo, hi } => {
            let template = BlockConfig::with_mode(spec.m, (lo * hi).sqrt(), spec.mode)?;
            optimize_intensity(&template, &params, (lo, hi), spec.sdp_tol).map(|s| s.point)
        }
    }
}

/// Evaluate the whole loss grid and locate the rate cutoff.
///
/// A failed grid point is flagged and skipped, not fatal: long sweeps
/// survive isolated solver failures, and the exit status of the front end
/// reports partiality. The cutoff is the largest grid loss with positive
/// rate, refined by bisection until the bracket is narrower than 0.1 dB;
/// failures during refinement conservatively count as rate zero.
pub fn sweep_and_cutoff(spec: &SweepSpec) -> Result<SweepOutcome, KeyrateError> {
    if spec.losses_db.is_empty() {
        return Err(KeyrateError::Domain("loss grid is empty".into()));
    }
    if spec.losses_db.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(KeyrateError::Domain("loss grid must be strictly increasing".into()));
    }
    if let IntensityChoice::Fixed(mu) = spec.intensity {
        BlockConfig::with_mode(spec.m, mu, spec.mode)?;
    }

    // Grid points are independent; evaluate concurrently, keep grid order.
    let results: Vec<Result<RatePoint, KeyrateError>> =
        spec.losses_db.par_iter().map(|&loss| rate_at_loss(spec, loss)).collect();
    let mut points = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => points.push(p),
            Err(e) => {
                failures.push((k, e.to_string()));
                points.push(RatePoint::failed(spec.losses_db[k], spec.m));
            }
        }
    }

    let positive = |p: &RatePoint| p.rate_per_pulse > 0.0;
    let last_positive = points.iter().rposition(positive);
    let (cutoff, at_end) = match last_positive {
        None => (None, false),
        Some(i) if i + 1 == points.len() => (Some(spec.losses_db[i]), true),
        Some(i) => {
            let mut lo = spec.losses_db[i];
            let mut hi = spec.losses_db[i + 1];
            while hi - lo > CUTOFF_RESOLUTION_DB {
                let mid = 0.5 * (lo + hi);
                let mid_positive = rate_at_loss(spec, mid).map(|p| positive(&p)).unwrap_or(false);
                if mid_positive {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (Some(lo), false)
        }
    };
    Ok(SweepOutcome { points, cutoff_loss_db: cutoff, cutoff_at_grid_end: at_end, failures })
}

// ====================================================================
// Tests
// ====================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{honest_squashed_state, DEFAULT_EPSILON, DEFAULT_E_D, DEFAULT_E_M};
    use crate::operators::hermitian_basis;
    use crate::protocol::phase_error_objective;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn defaults_at(loss_db: f64) -> ChannelParams {
        ChannelParams::from_loss_db(loss_db, DEFAULT_EPSILON, DEFAULT_E_D, DEFAULT_E_M).unwrap()
    }

    #[test]
    fn entropy_anchors() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_relative_eq!(binary_entropy(0.11).unwrap(), 0.499916, epsilon = 5e-7);
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.1).is_err());
    }

    #[test]
    fn rate_formula_anchors() {
        assert_relative_eq!(rate_from_statistics(1.0, 0.0, 0.0, 2).unwrap(), 0.25);
        // Phase error at half the gain kills the rate regardless of e_bar.
        assert_eq!(rate_from_statistics(0.9, 0.0, 0.45, 3).unwrap(), 0.0);
        assert_eq!(rate_from_statistics(0.0, 0.1, 0.0, 2).unwrap(), 0.0);
        assert_eq!(rate_from_statistics(0.5, 0.51, 0.01, 2).unwrap(), 0.0);
        // Independent arithmetic for a generic point, natural-log entropy.
        let h = |x: f64| -(x * x.ln() + (1.0 - x) * (1.0 - x).ln()) / 2f64.ln();
        let want = 0.1 * (1.0 - h(0.03) - h(0.2)) / 6.0;
        assert_relative_eq!(rate_from_statistics(0.1, 0.03, 0.02, 3).unwrap(), want, epsilon = 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn entropy_is_symmetric_and_bounded(x in 0.0f64..=1.0) {
            let h = binary_entropy(x).unwrap();
            let hr = binary_entropy(1.0 - x).unwrap();
            prop_assert!((h - hr).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&h));
        }

        #[test]
        fn rate_never_exceeds_one_bit_per_block(
            gain in 0.0f64..=1.0,
            e_bar in 0.0f64..=1.0,
            ratio in 0.0f64..=1.0,
            m in 2usize..=4,
        ) {
            let rate = rate_from_statistics(gain, e_bar, ratio * gain, m).unwrap();
            prop_assert!(rate >= 0.0);
            prop_assert!(rate <= gain / (2.0 * m as f64) + 1e-15);
        }
    }

    // A feasible set that pins the state completely: full tomography of the
    // honest state. The certified maximum must match that state's own value.
    #[test]
    fn singleton_feasible_set_reproduces_point_value() {
        let config = BlockConfig::pure(2, 0.1).unwrap();
        let params = defaults_at(8.0);
        let rho = honest_squashed_state(&config, &params).unwrap();
        let set = observed_constraints(&config, &params).unwrap();
        let gain = set.gain;

        let layout = config.joint_layout().unwrap();
        let mut constraints = Vec::new();
        for t in hermitian_basis(rho.dim()) {
            let t = HermitianOperator::new(layout.clone(), t.matrix().clone()).unwrap();
            let b = t.hs_inner(&rho);
            constraints.push((t, b));
        }
        let objective = coherence_average_operator(&config).unwrap().scale(-1.0 / gain);
        let problem = SdpProblem::new(objective, constraints, 1.0).unwrap();
        let reduced = independent_constraints(&problem).unwrap();
        let cert = solve(&reduced, 1e-8).unwrap();
        let ratio = 0.5 + certified_bound(&cert);

        let f = phase_error_objective(&config).unwrap();
        let honest_ratio = f.hs_inner(&rho) / gain;
        assert_relative_eq!(ratio, honest_ratio, epsilon = 1e-6);
    }

    #[test]
    fn bound_dominates_honest_value_and_stays_physical() {
        for config in [
            BlockConfig::pure(2, 0.1).unwrap(),
            BlockConfig::randomized(2, 0.1, 2).unwrap(),
        ] {
            let params = defaults_at(8.0);
            let bound = max_phase_error(&config, &params).unwrap();
            let rho = honest_squashed_state(&config, &params).unwrap();
            let f = phase_error_objective(&config).unwrap();
            let honest = f.hs_inner(&rho);
            assert!(bound.converged, "estimation SDP must converge at benign parameters");
            assert!(
                bound.delta_max >= honest - 1e-8,
                "certified bound {} below the honest value {honest}",
                bound.delta_max
            );
            assert!(bound.delta_max >= -1e-9);
            assert!(
                bound.delta_max <= bound.gain + 1e-6,
                "bound {} exceeds the gain {}",
                bound.delta_max,
                bound.gain
            );
        }
    }

    #[test]
    fn honest_state_satisfies_observed_constraints() {
        for config in [
            BlockConfig::pure(2, 0.08).unwrap(),
            BlockConfig::pure(3, 0.15).unwrap(),
            BlockConfig::randomized(2, 0.08, 2).unwrap(),
            BlockConfig::randomized(3, 0.15, 2).unwrap(),
        ] {
            for loss in [0.0, 11.0, 27.0] {
                let residual = honest_state_residual(&config, &defaults_at(loss)).unwrap();
                assert!(
                    residual < 1e-12,
                    "honest residual {residual} at loss {loss} dB, {config:?}"
                );
            }
        }
    }

    #[test]
    fn relabeling_leaves_the_bound_unchanged() {
        let params = defaults_at(9.0);
        for config in [
            BlockConfig::pure(2, 0.12).unwrap(),
            BlockConfig::randomized(2, 0.12, 2).unwrap(),
        ] {
            let std = max_phase_error(&config, &params).unwrap();
            let opts = EstimationOptions { relabeled: true, ..EstimationOptions::default() };
            let flip = max_phase_error_with(&config, &params, &opts).unwrap();
            assert!(
                (std.ratio - flip.ratio).abs() < 1e-6,
                "relabeling moved the bound: {} vs {}",
                std.ratio,
                flip.ratio
            );
        }
    }

    #[test]
    fn shield_dephasing_matches_full_solve() {
        let config = BlockConfig::randomized(2, 0.1, 2).unwrap();
        for loss in [4.0, 12.0] {
            let params = defaults_at(loss);
            let restricted = max_phase_error(&config, &params).unwrap();
            let opts = EstimationOptions { dephase_shield: false, ..EstimationOptions::default() };
            let full = max_phase_error_with(&config, &params, &opts).unwrap();
            assert!(
                (restricted.ratio - full.ratio).abs() < 1e-6,
                "block restriction changed the optimum at {loss} dB: {} vs {}",
                restricted.ratio,
                full.ratio
            );
        }
    }

    #[test]
    fn noiseless_channel_gives_positive_rate() {
        let config = BlockConfig::pure(2, 0.05).unwrap();
        let params = ChannelParams::from_loss_db(0.0, 0.0, 0.0, 0.0).unwrap();
        let point = compute_rate_point(&config, &params, 1e-6).unwrap();
        assert!(point.converged);
        assert!(point.e_bar == 0.0);
        assert!(
            point.rate_per_pulse > 0.0,
            "noiseless rate must be positive, got {} with ratio {}",
            point.rate_per_pulse,
            point.delta_max / point.gain
        );
        assert!(point.rate_per_pulse <= point.gain / 4.0 + 1e-15);
    }

    #[test]
    fn vanishing_transmittance_kills_the_rate() {
        let config = BlockConfig::pure(2, 0.1).unwrap();
        let params = ChannelParams::from_loss_db(60.0, 1e-3, DEFAULT_E_D, DEFAULT_E_M).unwrap();
        let point = compute_rate_point(&config, &params, 1e-6).unwrap();
        assert_eq!(point.rate_per_pulse, 0.0);
    }

    #[test]
    fn intensity_search_finds_interior_maximum() {
        let template = BlockConfig::pure(2, 0.1).unwrap();
        let params = ChannelParams::from_loss_db(3.0, 0.0, 0.0, 0.0).unwrap();
        let search = optimize_intensity(&template, &params, (1e-3, 0.5), 1e-6).unwrap();
        assert!(!search.all_zero);
        assert!(search.point.rate_per_pulse > 0.0);
        assert!(
            search.best_mu > 1.2e-3 && search.best_mu < 0.45,
            "optimal intensity {} stuck at a boundary",
            search.best_mu
        );
    }

    #[test]
    fn intensity_search_flags_dead_channels() {
        let template = BlockConfig::pure(2, 0.1).unwrap();
        let params = ChannelParams::from_loss_db(60.0, 1e-3, DEFAULT_E_D, DEFAULT_E_M).unwrap();
        let search = optimize_intensity(&template, &params, (1e-2, 0.5), 1e-6).unwrap();
        assert!(search.all_zero);
        assert_relative_eq!(search.best_mu, 0.5 * (1e-2 + 0.5));
        assert_eq!(search.point.rate_per_pulse, 0.0);
    }

    #[test]
    fn sweep_orders_points_and_brackets_cutoff() {
        let spec = SweepSpec {
            m: 2,
            mode: PhaseMode::Pure,
            epsilon: 1e-4,
            e_d: DEFAULT_E_D,
            e_m: DEFAULT_E_M,
            losses_db: vec![2.0, 8.0, 14.0, 20.0, 26.0],
            intensity: IntensityChoice::Fixed(0.1),
            sdp_tol: 1e-6,
        };
        let out = sweep_and_cutoff(&spec).unwrap();
        assert_eq!(out.points.len(), 5);
        assert!(out.failures.is_empty());
        for w in out.points.windows(2) {
            assert!(
                w[1].rate_per_pulse <= w[0].rate_per_pulse + 1e-12,
                "rate must not increase with loss: {} then {}",
                w[0].rate_per_pulse,
                w[1].rate_per_pulse
            );
        }
        // With a strong dark count the cutoff must land inside this grid.
        let cutoff = out.cutoff_loss_db.expect("positive rate at low loss");
        assert!(!out.cutoff_at_grid_end);
        assert!(cutoff > 2.0 && cutoff < 26.0, "cutoff {cutoff}");
        let above = rate_at_loss(&spec, cutoff + CUTOFF_RESOLUTION_DB).unwrap();
        assert_eq!(above.rate_per_pulse, 0.0, "rate must vanish just past the cutoff");
    }

    #[test]
    fn sweep_rejects_malformed_grids() {
        let mut spec = SweepSpec {
            m: 2,
            mode: PhaseMode::Pure,
            epsilon: DEFAULT_EPSILON,
            e_d: DEFAULT_E_D,
            e_m: DEFAULT_E_M,
            losses_db: vec![],
            intensity: IntensityChoice::Fixed(0.1),
            sdp_tol: 1e-6,
        };
        assert!(matches!(sweep_and_cutoff(&spec), Err(KeyrateError::Domain(_))));
        spec.losses_db = vec![5.0, 5.0];
        assert!(matches!(sweep_and_cutoff(&spec), Err(KeyrateError::Domain(_))));
        spec.losses_db = vec![5.0, 4.0];
        assert!(matches!(sweep_and_cutoff(&spec), Err(KeyrateError::Domain(_))));
    }
}
