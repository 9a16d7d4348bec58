//! Semidefinite programming with certified duality bounds.
//!
//! Problems take the form
//!
//! ```text
//!   maximize   tr(C ρ)
//!   subject to tr(A_i ρ) = b_i,   ρ ⪰ 0,
//! ```
//!
//! with complex Hermitian data and optional block-diagonal structure. The
//! complex problem is embedded into real symmetric matrices, solved by a
//! primal-dual interior-point iteration, and every certificate quantity is
//! then recomputed from scratch against the original complex data. The
//! certified upper bound therefore relies only on weak duality applied to the
//! returned multipliers, never on trusting the solver's internal state.
//!
//! A slow, independent reference optimizer for cross-checking lives in
//! [`reference`].

mod ipm;
pub mod reference;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::operators::{HermitianOperator, OperatorError, C64, CMatrix};
use ipm::{RealProblem, SparseOp};

/// Default relative duality-gap target.
pub const DEFAULT_GAP_TOL: f64 = 1e-8;
/// Squared-residual threshold below which a constraint operator counts as
/// linearly dependent on the ones already kept.
const DROP_TOL: f64 = 1e-10;
/// Allowed mismatch between the right-hand sides of dependent constraints.
const CONTRADICTION_TOL: f64 = 1e-8;
/// Entries outside the declared blocks must stay below this times the scale.
const BLOCK_LEAK_TOL: f64 = 1e-12;
/// Relative magnitude below which a real or imaginary part counts as absent
/// when choosing the embedding. Misclassification can only cost convergence
/// quality, not certificate validity, because certificates are recomputed
/// from the original complex data.
const PART_NEGLIGIBLE: f64 = 1e-13;

// ============================================================================
// Errors
// ============================================================================

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("malformed problem: {0}")]
    Shape(String),
    #[error("infeasible constraints: {0}")]
    Infeasible(String),
    #[error("solver did not converge: {message}")]
    Convergence {
        message: String,
        /// Best iterate reached; its certified bound is still valid.
        best: Box<SdpCertificate>,
    },
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

// ============================================================================
// Problem
// ============================================================================

/// A maximization SDP over one Hermitian matrix variable, optionally split
/// into a direct sum of diagonal blocks.
#[derive(Clone, Debug)]
pub struct SdpProblem {
    objective: HermitianOperator,
    constraints: Vec<(HermitianOperator, f64)>,
    blocks: Option<Vec<usize>>,
    trace_bound: f64,
}

impl SdpProblem {
    /// Problem over a single dense block.
    pub fn new(
        objective: HermitianOperator,
        constraints: Vec<(HermitianOperator, f64)>,
        trace_bound: f64,
    ) -> Result<Self, SdpError> {
        Self::build(objective, constraints, None, trace_bound)
    }

    /// Problem whose variable is a direct sum of consecutive diagonal blocks
    /// of the given dimensions. Objective and constraints must vanish outside
    /// the blocks.
    pub fn with_blocks(
        objective: HermitianOperator,
        constraints: Vec<(HermitianOperator, f64)>,
        blocks: Vec<usize>,
        trace_bound: f64,
    ) -> Result<Self, SdpError> {
        Self::build(objective, constraints, Some(blocks), trace_bound)
    }

    fn build(
        objective: HermitianOperator,
        constraints: Vec<(HermitianOperator, f64)>,
        blocks: Option<Vec<usize>>,
        trace_bound: f64,
    ) -> Result<Self, SdpError> {
        let n = objective.dim();
        if constraints.is_empty() {
            return Err(SdpError::Shape(
                "at least one constraint is required to bound the feasible set".into(),
            ));
        }
        for (i, (a, b)) in constraints.iter().enumerate() {
            if a.dim() != n {
                return Err(SdpError::Shape(format!(
                    "constraint {i} has dimension {} but the objective has {n}",
                    a.dim()
                )));
            }
            if !b.is_finite() {
                return Err(SdpError::Shape(format!(
                    "constraint {i} has non-finite right-hand side {b}"
                )));
            }
        }
        if !(trace_bound.is_finite() && trace_bound > 0.0) {
            return Err(SdpError::Shape(format!(
                "trace bound must be positive and finite, got {trace_bound}"
            )));
        }
        if let Some(dims) = &blocks {
            if dims.is_empty() || dims.iter().any(|&d| d == 0) {
                return Err(SdpError::Shape("blocks must be nonempty".into()));
            }
            let total: usize = dims.iter().sum();
            if total != n {
                return Err(SdpError::Shape(format!(
                    "blocks sum to {total} but the variable has dimension {n}"
                )));
            }
            let owner = block_owner(dims);
            check_block_diagonal(&objective, &owner, "objective")?;
            for (i, (a, _)) in constraints.iter().enumerate() {
                check_block_diagonal(a, &owner, &format!("constraint {i}"))?;
            }
        }
        Ok(Self { objective, constraints, blocks, trace_bound })
    }

    pub fn objective(&self) -> &HermitianOperator {
        &self.objective
    }

    pub fn constraints(&self) -> &[(HermitianOperator, f64)] {
        &self.constraints
    }

    pub fn blocks(&self) -> Option<&[usize]> {
        self.blocks.as_deref()
    }

    /// Upper bound on tr(ρ) over the feasible set, used to certify bounds
    /// from slightly infeasible dual points.
    pub fn trace_bound(&self) -> f64 {
        self.trace_bound
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    fn block_dims(&self) -> Vec<usize> {
        self.blocks.clone().unwrap_or_else(|| vec![self.dim()])
    }

    /// Plain-text sparse dump for cross-checking against external solvers.
    /// One line per nonzero entry: `index row col re im rhs`, where the
    /// objective carries index -1 and rhs 0, and constraint `i` repeats its
    /// right-hand side on each of its lines.
    pub fn dump_triplets(&self) -> String {
        let mut out = String::new();
        let mut emit = |idx: i64, op: &HermitianOperator, rhs: f64| {
            let m = op.matrix();
            for r in 0..op.dim() {
                for c in 0..op.dim() {
                    let v = m[(r, c)];
                    if v.re != 0.0 || v.im != 0.0 {
                        out.push_str(&format!("{idx} {r} {c} {} {} {rhs}\n", v.re, v.im));
                    }
                }
            }
        };
        emit(-1, &self.objective, 0.0);
        for (i, (a, b)) in self.constraints.iter().enumerate() {
            emit(i as i64, a, *b);
        }
        out
    }
}

fn block_owner(dims: &[usize]) -> Vec<usize> {
    let mut owner = Vec::with_capacity(dims.iter().sum());
    for (k, &d) in dims.iter().enumerate() {
        owner.extend(std::iter::repeat(k).take(d));
    }
    owner
}

fn check_block_diagonal(
    op: &HermitianOperator,
    owner: &[usize],
    what: &str,
) -> Result<(), SdpError> {
    let scale = 1.0 + op.frobenius_norm();
    let m = op.matrix();
    for r in 0..op.dim() {
        for c in 0..op.dim() {
            if owner[r] != owner[c] && m[(r, c)].norm() > BLOCK_LEAK_TOL * scale {
                return Err(SdpError::Shape(format!(
                    "{what} has entry {} at ({r},{c}) outside the declared blocks",
                    m[(r, c)]
                )));
            }
        }
    }
    Ok(())
}

// ============================================================================
// Certificate
// ============================================================================

/// Output of [`solve`]: a near-feasible primal matrix together with dual
/// multipliers, with all reported quantities recomputed against the original
/// complex problem data.
#[derive(Clone, Debug)]
pub struct SdpCertificate {
    /// PSD (up to roundoff) matrix achieving `primal_value`.
    pub primal_matrix: HermitianOperator,
    /// Multipliers y, aligned with the solved problem's constraint list.
    pub dual_vector: Vec<f64>,
    pub primal_value: f64,
    pub dual_value: f64,
    /// max_i |tr(A_i ρ) − b_i|.
    pub primal_residual: f64,
    /// Smallest eigenvalue of Σ y_i A_i − C.
    pub dual_slack_mineig: f64,
    /// Copied from the problem so the certificate is self-contained.
    pub trace_bound: f64,
    pub iterations: usize,
}

impl SdpCertificate {
    pub fn relative_gap(&self) -> f64 {
        (self.primal_value - self.dual_value).abs()
            / (1.0 + self.primal_value.abs() + self.dual_value.abs())
    }
}

/// Rigorous upper bound on the SDP optimum from a certificate.
///
/// For any feasible ρ: tr(Cρ) = Σ y_i b_i − tr((Σ y_i A_i − C) ρ)
/// ≤ Σ y_i b_i + max(0, −λ_min(Σ y_i A_i − C)) · tr(ρ), and tr(ρ) is at most
/// the problem's trace bound. Only the multipliers are trusted; the slack
/// eigenvalue was recomputed from the original data when the certificate was
/// built.
pub fn certified_bound(cert: &SdpCertificate) -> f64 {
    cert.dual_value + (-cert.dual_slack_mineig).max(0.0) * cert.trace_bound
}

// ============================================================================
// Constraint reduction
// ============================================================================

/// Returns an equivalent problem whose constraint operators are linearly
/// independent in the Hilbert-Schmidt inner product.
///
/// Dependent operators are detected by a pivoted Cholesky factorization of
/// the normalized Gram matrix; a constraint is dropped once its squared
/// residual against the kept set falls below the drop tolerance. Dropped
/// constraints must have right-hand sides consistent with the linear
/// combination that reproduces them, otherwise the problem is infeasible.
pub fn independent_constraints(p: &SdpProblem) -> Result<SdpProblem, SdpError> {
    let cons = p.constraints();
    let n = cons.len();
    let mut norms = vec![0.0f64; n];
    let mut kept_mask = vec![true; n];

    // Zero operators constrain nothing: drop them, or flag a contradiction.
    for (i, (a, b)) in cons.iter().enumerate() {
        norms[i] = a.frobenius_norm();
        if norms[i] == 0.0 {
            if b.abs() > CONTRADICTION_TOL {
                return Err(SdpError::Infeasible(format!(
                    "constraint {i} has a zero operator but right-hand side {b}"
                )));
            }
            kept_mask[i] = false;
        }
    }
    let active: Vec<usize> = (0..n).filter(|&i| kept_mask[i]).collect();
    let na = active.len();

    let triplets: Vec<Vec<(usize, usize, C64)>> =
        active.iter().map(|&i| nonzero_entries(&cons[i].0)).collect();
    let mut gram = DMatrix::zeros(na, na);
    for i in 0..na {
        for j in i..na {
            let g = sparse_hs_dot(&triplets[i], &triplets[j])
                / (norms[active[i]] * norms[active[j]]);
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }

    // Pivoted Cholesky on the Gram matrix. `rows[t]` holds the coefficients
    // of every operator against the t-th orthonormalized pivot direction.
    let mut diag: Vec<f64> = (0..na).map(|i| gram[(i, i)]).collect();
    let mut processed = vec![false; na];
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut pivots: Vec<usize> = Vec::new();
    loop {
        let mut jstar = None;
        let mut dmax = DROP_TOL;
        for j in 0..na {
            if !processed[j] && diag[j] > dmax {
                dmax = diag[j];
                jstar = Some(j);
            }
        }
        let Some(js) = jstar else { break };
        let root = diag[js].sqrt();
        let mut row = vec![0.0f64; na];
        for j in 0..na {
            if processed[j] {
                continue;
            }
            let mut v = gram[(js, j)];
            for r in &rows {
                v -= r[js] * r[j];
            }
            row[j] = v / root;
            diag[j] = (diag[j] - row[j] * row[j]).max(0.0);
        }
        processed[js] = true;
        pivots.push(js);
        rows.push(row);
    }

    // Right-hand sides of the orthonormalized pivot directions, solved from
    // the triangular relation b̂(pivot_t) = Σ_{u≤t} rows[u][pivot_t] β_u.
    let bhat = |j: usize| cons[active[j]].1 / norms[active[j]];
    let mut beta = vec![0.0f64; pivots.len()];
    for (t, &pj) in pivots.iter().enumerate() {
        let mut v = bhat(pj);
        for u in 0..t {
            v -= rows[u][pj] * beta[u];
        }
        beta[t] = v / rows[t][pj];
    }
    for j in 0..na {
        if processed[j] {
            continue;
        }
        let implied: f64 = (0..pivots.len()).map(|t| rows[t][j] * beta[t]).sum();
        let got = bhat(j);
        if (got - implied).abs() > CONTRADICTION_TOL * (1.0 + got.abs()) {
            return Err(SdpError::Infeasible(format!(
                "constraint {} depends on the others but its right-hand side \
                 disagrees ({got} vs implied {implied} after normalization)",
                active[j]
            )));
        }
        kept_mask[active[j]] = false;
    }

    let mut selected: Vec<usize> = pivots.iter().map(|&j| active[j]).collect();
    selected.sort_unstable();
    let kept: Vec<(HermitianOperator, f64)> =
        selected.iter().map(|&i| cons[i].clone()).collect();
    Ok(SdpProblem {
        objective: p.objective.clone(),
        constraints: kept,
        blocks: p.blocks.clone(),
        trace_bound: p.trace_bound,
    })
}

/// Restrict the problem to the common kernel of all constraints that pair a
/// positive semidefinite operator with a zero right-hand side.
///
/// tr(A ρ) = 0 with A ⪰ 0 forces the support of any feasible ρ ⪰ 0 into
/// ker A, so such constraints leave the feasible set without interior and
/// interior-point iterations stall against the boundary. Conjugating by an
/// isometry onto the common kernel removes them entirely and restores strict
/// feasibility; the optimum is unchanged. Block structure is preserved by
/// reducing each block with its own kernel basis. Problems without
/// zero-probability constraints are returned as they are.
pub fn reduce_zero_support(p: &SdpProblem) -> Result<SdpProblem, SdpError> {
    let n = p.dim();
    // Sum the PSD zero-probability operators; tr(ρ Σ) = 0 pins ρ to ker Σ,
    // and ker Σ = ∩ ker A_i for PSD summands.
    let mut forced = vec![false; p.constraints.len()];
    let mut sum: Option<CMatrix> = None;
    for (i, (a, b)) in p.constraints.iter().enumerate() {
        if *b != 0.0 {
            continue;
        }
        let scale = a.frobenius_norm();
        if scale == 0.0 {
            continue;
        }
        if a.min_eigenvalue()? >= -1e-12 * scale {
            forced[i] = true;
            match &mut sum {
                Some(s) => *s += a.matrix(),
                None => sum = Some(a.matrix().clone()),
            }
        }
    }
    let Some(sum) = sum else {
        return Ok(p.clone());
    };

    // Kernel basis per block, so the reduced problem keeps a block direct
    // sum. Blocks whose kernel is empty disappear.
    let dims = p.block_dims();
    let mut w = CMatrix::zeros(n, n);
    let mut new_blocks = Vec::new();
    let mut col = 0usize;
    let mut offset = 0usize;
    for &d in &dims {
        let block = sum.view((offset, offset), (d, d)).into_owned();
        let eig = block
            .try_symmetric_eigen(f64::EPSILON, 0)
            .ok_or_else(|| SdpError::Shape("support-reduction eigendecomposition failed".into()))?;
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
        let cut = 1e-9 * (1.0 + lmax);
        let mut cols_here = 0usize;
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam < cut {
                for r in 0..d {
                    w[(offset + r, col)] = eig.eigenvectors[(r, k)];
                }
                col += 1;
                cols_here += 1;
            }
        }
        if cols_here > 0 {
            new_blocks.push(cols_here);
        }
        offset += d;
    }
    if col == 0 {
        return Err(SdpError::Infeasible(
            "zero-probability constraints leave the variable no support".into(),
        ));
    }
    if col == n {
        return Ok(p.clone());
    }

    let w = w.columns(0, col).into_owned();
    let conjugate = |op: &HermitianOperator| -> Result<HermitianOperator, SdpError> {
        let reduced = w.adjoint() * op.matrix() * &w;
        let layout = crate::operators::SubsystemLayout::with_ceiling(&[col], col.max(64))?;
        Ok(HermitianOperator::new(layout, reduced)?)
    };
    let objective = conjugate(&p.objective)?;
    let mut constraints = Vec::with_capacity(p.constraints.len());
    for (i, (a, b)) in p.constraints.iter().enumerate() {
        if forced[i] {
            continue; // identically zero on the kernel
        }
        constraints.push((conjugate(a)?, *b));
    }
    match p.blocks {
        Some(_) => SdpProblem::with_blocks(objective, constraints, new_blocks, p.trace_bound),
        None => SdpProblem::new(objective, constraints, p.trace_bound),
    }
}

fn nonzero_entries(op: &HermitianOperator) -> Vec<(usize, usize, C64)> {
    let m = op.matrix();
    let mut out = Vec::new();
    for r in 0..op.dim() {
        for c in 0..op.dim() {
            let v = m[(r, c)];
            if v.re != 0.0 || v.im != 0.0 {
                out.push((r, c, v));
            }
        }
    }
    out
}

/// Re tr(AB) for Hermitian A, B given as sorted sparse entry lists.
fn sparse_hs_dot(a: &[(usize, usize, C64)], b: &[(usize, usize, C64)]) -> f64 {
    let mut acc = 0.0;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        let ka = (a[i].0, a[i].1);
        let kb = (b[j].0, b[j].1);
        if ka < kb {
            i += 1;
        } else if kb < ka {
            j += 1;
        } else {
            let (va, vb) = (a[i].2, b[j].2);
            acc += va.re * vb.re + va.im * vb.im;
            i += 1;
            j += 1;
        }
    }
    acc
}

// ============================================================================
// Solving
// ============================================================================

/// Solve to the requested relative duality gap.
///
/// The solver is deterministic: identical problems produce bitwise identical
/// certificates. On iteration exhaustion the best certificate reached is
/// returned inside the error; its certified bound remains valid.
pub fn solve(p: &SdpProblem, tol: f64) -> Result<SdpCertificate, SdpError> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(SdpError::Shape(format!("gap tolerance must be positive, got {tol}")));
    }
    let emb = embed(p)?;
    let out = ipm::solve_real(&emb.real, tol);
    let cert = build_certificate(p, &emb, &out)?;
    if out.converged {
        Ok(cert)
    } else {
        Err(SdpError::Convergence { message: out.message, best: Box::new(cert) })
    }
}

// ----------------------------------------------------------------------------
// Real embedding
// ----------------------------------------------------------------------------

enum Path {
    /// All data real, possibly after discarding purely imaginary constraint
    /// operators with zero right-hand side (see `choose_path`).
    Real { drop: Vec<bool> },
    /// General complex data: M(A) = [[Re A, −Im A], [Im A, Re A]].
    Doubled,
}

struct Embedded {
    real: RealProblem,
    /// Original constraint indices present in the real problem, in order.
    kept: Vec<usize>,
    /// y_original = y_internal · dual_unscale, per kept constraint.
    dual_unscale: Vec<f64>,
    doubled: bool,
}

/// Pick the embedding. A purely imaginary Hermitian operator A satisfies
/// tr(Aρ) = 0 for every real symmetric ρ, and when all remaining data are
/// real the optimum is attained at a real ρ: conjugating any feasible point
/// gives another feasible point with the same objective value, so their
/// average — real symmetric — is optimal too. Such constraints are therefore
/// dropped, provided their right-hand side is (numerically) zero; if any
/// genuinely mixed operator appears, fall back to the doubled embedding,
/// which is exact for arbitrary Hermitian data.
fn choose_path(p: &SdpProblem) -> Path {
    let part_scales = |op: &HermitianOperator| {
        let m = op.matrix();
        let mut re_max = 0.0f64;
        let mut im_max = 0.0f64;
        for v in m.iter() {
            re_max = re_max.max(v.re.abs());
            im_max = im_max.max(v.im.abs());
        }
        (re_max, im_max)
    };
    let threshold = |op: &HermitianOperator| PART_NEGLIGIBLE * (1.0 + op.frobenius_norm());

    let (_, obj_im) = part_scales(&p.objective);
    if obj_im > threshold(&p.objective) {
        return Path::Doubled;
    }
    let mut drop = vec![false; p.constraints.len()];
    for (i, (a, b)) in p.constraints.iter().enumerate() {
        let (re, im) = part_scales(a);
        let tol = threshold(a);
        if im <= tol {
            continue;
        }
        if re <= tol && b.abs() <= 1e-11 {
            drop[i] = true;
            continue;
        }
        return Path::Doubled;
    }
    Path::Real { drop }
}

fn embed(p: &SdpProblem) -> Result<Embedded, SdpError> {
    let dims = p.block_dims();
    let owner = block_owner(&dims);
    let mut offsets = vec![0usize; dims.len()];
    for k in 1..dims.len() {
        offsets[k] = offsets[k - 1] + dims[k - 1];
    }

    let path = choose_path(p);
    let (doubled, drop) = match path {
        Path::Doubled => (true, vec![false; p.constraints.len()]),
        Path::Real { drop } => (false, drop),
    };
    let value_scale = if doubled { 2.0 } else { 1.0 };

    let embed_op = |op: &HermitianOperator| -> SparseOp {
        let m = op.matrix();
        let mut entries = Vec::new();
        for r in 0..op.dim() {
            for c in 0..op.dim() {
                let v = m[(r, c)];
                if v.re == 0.0 && v.im == 0.0 {
                    continue;
                }
                let blk = owner[r];
                if owner[c] != blk {
                    // Below the block-leak tolerance (validated at problem
                    // construction); treat as zero.
                    continue;
                }
                let d = dims[blk];
                let (lr, lc) = ((r - offsets[blk]) as u32, (c - offsets[blk]) as u32);
                if doubled {
                    let dd = d as u32;
                    if v.re != 0.0 {
                        entries.push((blk as u32, lr, lc, v.re));
                        entries.push((blk as u32, lr + dd, lc + dd, v.re));
                    }
                    if v.im != 0.0 {
                        entries.push((blk as u32, lr, lc + dd, -v.im));
                        entries.push((blk as u32, lr + dd, lc, v.im));
                    }
                } else if v.re != 0.0 {
                    entries.push((blk as u32, lr, lc, v.re));
                }
            }
        }
        SparseOp::new(entries)
    };

    let mut objective = embed_op(&p.objective);
    let obj_norm = objective.frobenius_norm().max(1e-12);
    objective.rescale(1.0 / obj_norm);

    let mut kept = Vec::new();
    let mut constraints = Vec::new();
    let mut rhs = Vec::new();
    let mut dual_unscale = Vec::new();
    let mut resid_scale = Vec::new();
    for (i, (a, b)) in p.constraints.iter().enumerate() {
        if drop[i] {
            continue;
        }
        let mut op = embed_op(a);
        let norm = op.frobenius_norm();
        if norm == 0.0 {
            // Real part vanished entirely; legitimate only for a vacuous
            // constraint, which reduction would have removed.
            if b.abs() > CONTRADICTION_TOL {
                return Err(SdpError::Infeasible(format!(
                    "constraint {i} vanishes in the real embedding but has \
                     right-hand side {b}"
                )));
            }
            continue;
        }
        op.rescale(1.0 / norm);
        kept.push(i);
        constraints.push(op);
        rhs.push(value_scale * b / norm);
        dual_unscale.push(obj_norm / norm);
        resid_scale.push(norm / value_scale);
    }
    if constraints.is_empty() {
        return Err(SdpError::Shape(
            "no constraints survive the embedding; the problem is unbounded".into(),
        ));
    }

    let real_dims: Vec<usize> =
        dims.iter().map(|&d| if doubled { 2 * d } else { d }).collect();
    Ok(Embedded {
        real: RealProblem {
            block_dims: real_dims,
            objective,
            constraints,
            rhs,
            resid_scale,
            value_unscale: obj_norm / value_scale,
        },
        kept,
        dual_unscale,
        doubled,
    })
}

fn recover_primal(
    p: &SdpProblem,
    emb: &Embedded,
    xs: &[DMatrix<f64>],
) -> Result<HermitianOperator, SdpError> {
    let dims = p.block_dims();
    let n = p.dim();
    let mut full = CMatrix::zeros(n, n);
    let mut offset = 0usize;
    for (k, &d) in dims.iter().enumerate() {
        let s = &xs[k];
        for i in 0..d {
            for j in 0..d {
                let v = if emb.doubled {
                    // S approximates M(ρ) = [[P, −Q], [Q, P]]; averaging the
                    // two diagonal copies and antisymmetrizing the corner is
                    // exactly the J-invariance projection, which preserves
                    // feasibility and objective value.
                    let re = 0.5 * (s[(i, j)] + s[(i + d, j + d)]);
                    let im = 0.25 * (s[(i + d, j)] - s[(i, j + d)] + s[(j, i + d)]
                        - s[(j + d, i)]);
                    C64::new(re, im)
                } else {
                    C64::new(0.5 * (s[(i, j)] + s[(j, i)]), 0.0)
                };
                full[(offset + i, offset + j)] = v;
            }
        }
        offset += d;
    }
    Ok(HermitianOperator::new(p.objective.layout().clone(), full)?)
}

fn build_certificate(
    p: &SdpProblem,
    emb: &Embedded,
    out: &ipm::IpmResult,
) -> Result<SdpCertificate, SdpError> {
    let rho = recover_primal(p, emb, &out.x)?;
    let mut dual = vec![0.0f64; p.constraints.len()];
    for (slot, &orig) in emb.kept.iter().enumerate() {
        dual[orig] = out.y[slot] * emb.dual_unscale[slot];
    }

    let primal_value = p.objective.hs_inner(&rho);
    let mut dual_value = 0.0;
    let mut primal_residual = 0.0f64;
    let mut slack = p.objective.scale(-1.0);
    for (i, (a, b)) in p.constraints.iter().enumerate() {
        dual_value += dual[i] * b;
        primal_residual = primal_residual.max((a.hs_inner(&rho) - b).abs());
        if dual[i] != 0.0 {
            slack.add_assign_scaled(a, dual[i]);
        }
    }
    let dual_slack_mineig = slack.min_eigenvalue()?;

    Ok(SdpCertificate {
        primal_matrix: rho,
        dual_vector: dual,
        primal_value,
        dual_value,
        primal_residual,
        dual_slack_mineig,
        trace_bound: p.trace_bound,
        iterations: out.iterations,
    })
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::SubsystemLayout;
    use approx::assert_relative_eq;

    fn herm(dim: usize, entries: &[(usize, usize, f64, f64)]) -> HermitianOperator {
        let mut m = CMatrix::zeros(dim, dim);
        for &(r, c, re, im) in entries {
            m[(r, c)] = C64::new(re, im);
            m[(c, r)] = C64::new(re, -im);
        }
        HermitianOperator::new(SubsystemLayout::single(dim).unwrap(), m).unwrap()
    }

    fn identity(dim: usize) -> HermitianOperator {
        HermitianOperator::identity(SubsystemLayout::single(dim).unwrap())
    }

    #[test]
    fn top_eigenvalue_example() {
        let c = herm(2, &[(0, 0, 1.0, 0.0), (1, 1, -1.0, 0.0)]);
        let p = SdpProblem::new(c, vec![(identity(2), 1.0)], 1.0).unwrap();
        let cert = solve(&p, 1e-9).unwrap();
        assert!((cert.primal_value - 1.0).abs() < 1e-7, "{}", cert.primal_value);
        assert!(cert.primal_residual <= 1e-9);
        assert!(cert.primal_matrix.min_eigenvalue().unwrap() >= -1e-9);
        let bound = certified_bound(&cert);
        assert!(bound >= cert.primal_value - 1e-9);
        assert!(bound <= 1.0 + 1e-6, "{bound}");
    }

    #[test]
    fn fully_determined_feasible_set() {
        // Objective σ_x, constraints pin ρ = |0⟩⟨0|, where σ_x averages to 0.
        //
        // This instance has no strictly feasible point and its dual optimum
        // is unattained (the multipliers diverge along a ray), so no
        // interior-point iteration can close the gap to full precision: the
        // floor is the diverging |y| times the primal residual noise. The
        // solver is expected to report non-convergence while still carrying
        // a sound certificate whose value is near the true optimum 0.
        let sx = herm(2, &[(0, 1, 1.0, 0.0)]);
        let sz = herm(2, &[(0, 0, 1.0, 0.0), (1, 1, -1.0, 0.0)]);
        let p =
            SdpProblem::new(sx, vec![(identity(2), 1.0), (sz, 1.0)], 1.0).unwrap();
        let cert = match solve(&p, 1e-9) {
            Ok(cert) => cert,
            Err(SdpError::Convergence { best, .. }) => *best,
            Err(other) => panic!("unexpected error: {other}"),
        };
        assert!(cert.primal_value.abs() < 1e-3, "{}", cert.primal_value);
        let rho = cert.primal_matrix.matrix();
        assert!((rho[(0, 0)].re - 1.0).abs() < 1e-3);
        assert!(rho[(1, 1)].re.abs() < 1e-3);
        // The certified bound stays on the safe side of the true optimum.
        let bound = certified_bound(&cert);
        assert!(bound >= -1e-9, "{bound}");
        assert!(bound < 1e-3, "{bound}");
    }

    #[test]
    fn duplicate_constraint_dropped() {
        let a = herm(2, &[(0, 0, 1.0, 0.0), (0, 1, 0.5, 0.0)]);
        let p = SdpProblem::new(
            identity(2),
            vec![(a.clone(), 1.0), (a.clone(), 1.0), (identity(2), 1.0)],
            1.0,
        )
        .unwrap();
        let r = independent_constraints(&p).unwrap();
        assert_eq!(r.constraints().len(), 2);
    }

    #[test]
    fn scalar_multiple_dropped() {
        let a = herm(2, &[(0, 0, 1.0, 0.0), (0, 1, 0.5, 0.0)]);
        let p = SdpProblem::new(
            identity(2),
            vec![(a.clone(), 1.0), (a.scale(2.0), 2.0), (identity(2), 1.0)],
            1.0,
        )
        .unwrap();
        let r = independent_constraints(&p).unwrap();
        assert_eq!(r.constraints().len(), 2);
        // The first of the two dependent copies is the one retained.
        assert_relative_eq!(r.constraints()[0].1, 1.0);
    }

    #[test]
    fn contradictory_dependent_constraints_error() {
        let a = herm(2, &[(0, 0, 1.0, 0.0), (0, 1, 0.5, 0.0)]);
        let p = SdpProblem::new(
            identity(2),
            vec![(a.clone(), 1.0), (a.clone(), 1.5)],
            1.0,
        )
        .unwrap();
        match independent_constraints(&p) {
            Err(SdpError::Infeasible(_)) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn zero_operator_constraints() {
        let zero = HermitianOperator::zero(SubsystemLayout::single(2).unwrap());
        let p = SdpProblem::new(
            identity(2),
            vec![(identity(2), 1.0), (zero.clone(), 0.0)],
            1.0,
        )
        .unwrap();
        let r = independent_constraints(&p).unwrap();
        assert_eq!(r.constraints().len(), 1);

        let p = SdpProblem::new(
            identity(2),
            vec![(identity(2), 1.0), (zero, 1.0)],
            1.0,
        )
        .unwrap();
        assert!(matches!(independent_constraints(&p), Err(SdpError::Infeasible(_))));
    }

    #[test]
    fn random_instances_match_reference_and_respect_duality() {
        for seed in 0..8u64 {
            let dim = 2 + (seed as usize % 5);
            let extras = 1 + (seed as usize % 4);
            let inst = reference::random_validation_instance(dim, extras, seed);
            let reduced = independent_constraints(&inst.problem).unwrap();
            let cert = solve(&reduced, 1e-9).unwrap();

            // Weak duality and certificate invariants.
            assert!(
                cert.dual_value
                    >= cert.primal_value - 1e-6 * cert.primal_value.abs().max(1.0),
                "weak duality violated at seed {seed}"
            );
            assert!(cert.primal_residual <= 1e-9, "seed {seed}");
            assert!(cert.primal_matrix.min_eigenvalue().unwrap() >= -1e-9);
            assert!(cert.relative_gap() <= 1e-8, "seed {seed}");

            // Independent reference optimizer agrees.
            let oracle =
                reference::barrier_optimum(&reduced, &inst.interior, 1e-9).unwrap();
            assert!(
                (cert.primal_value - oracle).abs() <= 1e-4,
                "seed {seed}: solver {} vs reference {oracle}",
                cert.primal_value
            );
            let bound = certified_bound(&cert);
            assert!(bound >= oracle - 1e-9, "seed {seed}: bound {bound} < {oracle}");
            assert!(bound >= cert.primal_value - 1e-7, "seed {seed}");
        }
    }

    #[test]
    fn blocked_and_flat_solutions_agree() {
        // Random block-diagonal data over blocks of size 2 and 3.
        let inst2 = reference::random_validation_instance(2, 2, 11);
        let inst3 = reference::random_validation_instance(3, 2, 12);
        let dim = 5;
        let lift = |a2: &HermitianOperator, a3: &HermitianOperator| {
            let mut m = CMatrix::zeros(dim, dim);
            for r in 0..2 {
                for c in 0..2 {
                    m[(r, c)] = a2.matrix()[(r, c)];
                }
            }
            for r in 0..3 {
                for c in 0..3 {
                    m[(2 + r, 2 + c)] = a3.matrix()[(r, c)];
                }
            }
            HermitianOperator::new(SubsystemLayout::single(dim).unwrap(), m).unwrap()
        };
        let objective =
            lift(inst2.problem.objective(), inst3.problem.objective());
        let interior = lift(&inst2.interior.scale(0.5), &inst3.interior.scale(0.5));
        let mut constraints = vec![(identity(dim), 1.0)];
        for k in 0..2 {
            let a = lift(&inst2.problem.constraints()[1 + k].0, &inst3.problem.constraints()[1 + k].0);
            let b = a.hs_inner(&interior);
            constraints.push((a, b));
        }
        let flat =
            SdpProblem::new(objective.clone(), constraints.clone(), 1.0).unwrap();
        let blocked =
            SdpProblem::with_blocks(objective, constraints, vec![2, 3], 1.0).unwrap();
        let cf = solve(&flat, 1e-9).unwrap();
        let cb = solve(&blocked, 1e-9).unwrap();
        assert!(
            (cf.primal_value - cb.primal_value).abs() <= 1e-7,
            "flat {} vs blocked {}",
            cf.primal_value,
            cb.primal_value
        );
        assert!((certified_bound(&cf) - certified_bound(&cb)).abs() <= 1e-6);
    }

    #[test]
    fn scaling_covariance() {
        let inst = reference::random_validation_instance(4, 3, 21);
        let reduced = independent_constraints(&inst.problem).unwrap();
        let cert = solve(&reduced, 1e-9).unwrap();
        let factor = 3.7;
        let scaled = SdpProblem::new(
            reduced.objective().scale(factor),
            reduced.constraints().to_vec(),
            reduced.trace_bound(),
        )
        .unwrap();
        let cert_s = solve(&scaled, 1e-9).unwrap();
        assert_relative_eq!(
            cert_s.primal_value,
            factor * cert.primal_value,
            max_relative = 1e-6,
            epsilon = 1e-8
        );
        assert_relative_eq!(
            cert_s.dual_value,
            factor * cert.dual_value,
            max_relative = 1e-6,
            epsilon = 1e-8
        );
    }

    #[test]
    fn solving_is_bitwise_deterministic() {
        let inst = reference::random_validation_instance(5, 3, 33);
        let reduced = independent_constraints(&inst.problem).unwrap();
        let a = solve(&reduced, 1e-8).unwrap();
        let b = solve(&reduced, 1e-8).unwrap();
        assert_eq!(a.primal_value.to_bits(), b.primal_value.to_bits());
        assert_eq!(a.dual_value.to_bits(), b.dual_value.to_bits());
        for (ya, yb) in a.dual_vector.iter().zip(&b.dual_vector) {
            assert_eq!(ya.to_bits(), yb.to_bits());
        }
    }

    #[test]
    fn purely_imaginary_zero_rhs_constraints_are_free() {
        // A real problem plus an antisymmetric (purely imaginary) observable
        // constrained to zero has the same optimum: the optimum is attained
        // at a real matrix, where that expectation vanishes automatically.
        let c = herm(3, &[(0, 0, 1.0, 0.0), (1, 2, 0.7, 0.0), (2, 2, -0.3, 0.0)]);
        let a1 = herm(3, &[(0, 1, 0.4, 0.0), (2, 2, 1.0, 0.0)]);
        let imag = herm(3, &[(0, 2, 0.0, 1.0)]);
        let base = SdpProblem::new(
            c.clone(),
            vec![(identity(3), 1.0), (a1.clone(), 0.2)],
            1.0,
        )
        .unwrap();
        let with_imag = SdpProblem::new(
            c,
            vec![(identity(3), 1.0), (a1, 0.2), (imag, 0.0)],
            1.0,
        )
        .unwrap();
        let ca = solve(&base, 1e-9).unwrap();
        let cb = solve(&with_imag, 1e-9).unwrap();
        assert!(
            (ca.primal_value - cb.primal_value).abs() <= 1e-8,
            "{} vs {}",
            ca.primal_value,
            cb.primal_value
        );
        assert_eq!(cb.dual_vector.len(), 3);
    }

    #[test]
    fn dump_format_is_stable() {
        let a = herm(2, &[(0, 1, 0.5, -0.25)]);
        let p = SdpProblem::new(identity(2), vec![(a, 0.125)], 1.0).unwrap();
        let dump = p.dump_triplets();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(
            lines,
            vec![
                "-1 0 0 1 0 0",
                "-1 1 1 1 0 0",
                "0 0 1 0.5 -0.25 0.125",
                "0 1 0 0.5 0.25 0.125",
            ]
        );
    }

    #[test]
    fn malformed_problems_are_rejected() {
        assert!(matches!(
            SdpProblem::new(identity(2), vec![], 1.0),
            Err(SdpError::Shape(_))
        ));
        assert!(matches!(
            SdpProblem::new(identity(2), vec![(identity(3), 1.0)], 1.0),
            Err(SdpError::Shape(_))
        ));
        assert!(matches!(
            SdpProblem::new(identity(2), vec![(identity(2), 1.0)], 0.0),
            Err(SdpError::Shape(_))
        ));
        // Off-block entry rejected when blocks are declared.
        let leaky = herm(2, &[(0, 1, 1.0, 0.0)]);
        assert!(matches!(
            SdpProblem::with_blocks(leaky, vec![(identity(2), 1.0)], vec![1, 1], 1.0),
            Err(SdpError::Shape(_))
        ));
    }
}
