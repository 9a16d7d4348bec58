//! Independent reference optimizer and instance generator for validating the
//! interior-point solver on small problems.
//!
//! The reference method eliminates the affine constraints exactly, by moving
//! to an orthonormal basis of the constraint span's complement, and then runs
//! a plain logarithmic-barrier Newton iteration in those coordinates. It
//! shares no algorithmic machinery with the production solver (no Schur
//! complement, no duality, no real embedding; it works directly on complex
//! matrices), so agreement between the two is meaningful evidence of
//! correctness. Costs grow with the fourth power of the dimension, so this is
//! strictly a test aid for tiny instances.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{SdpError, SdpProblem};
use crate::operators::{hermitian_basis, HermitianOperator, SubsystemLayout, C64, CMatrix};

// ============================================================================
// Instance generation
// ============================================================================

/// A randomly generated problem together with a strictly feasible interior
/// point (the right-hand sides are manufactured from it).
pub struct ValidationInstance {
    pub problem: SdpProblem,
    pub interior: HermitianOperator,
}

/// Deterministic random instance: a unit-trace constraint, `extra_constraints`
/// random Hermitian observables pinned to their values on a random strictly
/// positive state, and a random Hermitian objective.
pub fn random_validation_instance(
    dim: usize,
    extra_constraints: usize,
    seed: u64,
) -> ValidationInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = SubsystemLayout::single(dim).expect("small dimension");

    let interior = {
        let w = random_complex(&mut rng, dim);
        let mut s = &w * w.adjoint();
        s /= C64::new(dim as f64, 0.0);
        for i in 0..dim {
            s[(i, i)] += C64::new(0.2, 0.0);
        }
        let tr: f64 = (0..dim).map(|i| s[(i, i)].re).sum();
        s /= C64::new(tr, 0.0);
        HermitianOperator::new(layout.clone(), s).expect("hermitian by construction")
    };

    let mut constraints =
        vec![(HermitianOperator::identity(layout.clone()), 1.0)];
    for _ in 0..extra_constraints {
        let a = random_hermitian(&mut rng, &layout);
        let b = a.hs_inner(&interior);
        constraints.push((a, b));
    }
    let objective = random_hermitian(&mut rng, &layout);
    let problem =
        SdpProblem::new(objective, constraints, 1.0).expect("well-formed instance");
    ValidationInstance { problem, interior }
}

fn random_complex(rng: &mut ChaCha8Rng, dim: usize) -> CMatrix {
    let mut m = CMatrix::zeros(dim, dim);
    for r in 0..dim {
        for c in 0..dim {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            m[(r, c)] = C64::new(re, im);
        }
    }
    m
}

fn random_hermitian(rng: &mut ChaCha8Rng, layout: &SubsystemLayout) -> HermitianOperator {
    let g = random_complex(rng, layout.total_dim());
    let h = (&g + g.adjoint()) * C64::new(0.5, 0.0);
    let op = HermitianOperator::new(layout.clone(), h).expect("symmetrized");
    let norm = op.frobenius_norm();
    op.scale(1.0 / norm)
}

// ============================================================================
// Barrier reference method
// ============================================================================

/// Best feasible objective value found by the barrier method, a lower bound
/// on the true optimum that is accurate to roughly `final_barrier` times the
/// dimension once the final stage converges.
pub fn barrier_optimum(
    problem: &SdpProblem,
    interior: &HermitianOperator,
    final_barrier: f64,
) -> Result<f64, SdpError> {
    let n = problem.dim();
    if interior.dim() != n {
        return Err(SdpError::Shape(format!(
            "interior point has dimension {}, problem has {n}",
            interior.dim()
        )));
    }
    for (i, (a, b)) in problem.constraints().iter().enumerate() {
        let got = a.hs_inner(interior);
        if (got - b).abs() > 1e-7 * (1.0 + b.abs()) {
            return Err(SdpError::Shape(format!(
                "interior point violates constraint {i}: {got} vs {b}"
            )));
        }
    }
    if interior.min_eigenvalue()? <= 0.0 {
        return Err(SdpError::Shape("interior point is not strictly positive".into()));
    }

    let layout = problem.objective().layout().clone();

    // Orthonormal basis of the constraint span, then of its complement.
    let mut span: Vec<HermitianOperator> = Vec::new();
    for (a, _) in problem.constraints() {
        let mut r = a.clone();
        for q in &span {
            let coeff = q.hs_inner(&r);
            r.add_assign_scaled(q, -coeff);
        }
        let norm = r.frobenius_norm();
        if norm > 1e-10 * (1.0 + a.frobenius_norm()) {
            span.push(r.scale(1.0 / norm));
        }
    }
    let mut comp: Vec<HermitianOperator> = Vec::new();
    for e in hermitian_basis(n) {
        let mut r = HermitianOperator::new(layout.clone(), e.into_matrix())?;
        for q in span.iter().chain(comp.iter()) {
            let coeff = q.hs_inner(&r);
            r.add_assign_scaled(q, -coeff);
        }
        let norm = r.frobenius_norm();
        if norm > 1e-8 {
            comp.push(r.scale(1.0 / norm));
        }
    }
    if comp.is_empty() {
        // The constraints pin the matrix completely.
        return Ok(problem.objective().hs_inner(interior));
    }

    let lin: Vec<f64> =
        comp.iter().map(|b| problem.objective().hs_inner(b)).collect();
    let mut x = interior.matrix().clone();
    let objective_of = |m: &CMatrix| re_tr_product(problem.objective().matrix(), m);

    let mut mu = 1.0f64;
    loop {
        newton_stage(&mut x, &comp, &lin, mu, &objective_of)?;
        if mu <= final_barrier {
            break;
        }
        mu = (mu * 0.2).max(final_barrier);
    }
    Ok(objective_of(&x))
}

fn newton_stage(
    x: &mut CMatrix,
    comp: &[HermitianOperator],
    lin: &[f64],
    mu: f64,
    objective_of: &dyn Fn(&CMatrix) -> f64,
) -> Result<(), SdpError> {
    let k = comp.len();
    let phi = |m: &CMatrix| -> Option<f64> {
        let chol = Cholesky::new(m.clone())?;
        let logdet: f64 =
            2.0 * (0..m.nrows()).map(|i| chol.l()[(i, i)].re.ln()).sum::<f64>();
        Some(objective_of(m) + mu * logdet)
    };

    for _ in 0..60 {
        let chol = Cholesky::new(x.clone()).ok_or_else(|| {
            SdpError::Shape("barrier iterate lost positive definiteness".into())
        })?;
        let xinv = chol.inverse();
        let mats: Vec<CMatrix> =
            comp.iter().map(|b| &xinv * b.matrix()).collect();

        let mut grad = DVector::zeros(k);
        for i in 0..k {
            let tr: f64 = (0..x.nrows()).map(|d| mats[i][(d, d)].re).sum();
            grad[i] = lin[i] + mu * tr;
        }
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let v = re_tr_product(&mats[i], &mats[j]);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        // The Gram of X⁻¹-weighted directions is positive definite in exact
        // arithmetic but can lose that to roundoff when X is nearly singular;
        // escalate a relative ridge until the factorization succeeds. Damping
        // only shortens the ascent step, so feasibility of the iterate and
        // the lower-bound property of the returned value are unaffected.
        let mut ridge = 1e-13;
        let hchol = loop {
            let mut damped = hess.clone();
            for i in 0..k {
                damped[(i, i)] += ridge * (1.0 + hess[(i, i)]);
            }
            if let Some(c) = Cholesky::new(damped) {
                break c;
            }
            ridge *= 100.0;
            if ridge > 1.0 {
                return Err(SdpError::Shape(
                    "barrier Hessian not positive definite".into(),
                ));
            }
        };
        let step = hchol.solve(&grad) / mu;

        let decrement = grad.dot(&step);
        if decrement <= 1e-14 * (1.0 + objective_of(x).abs()) {
            return Ok(());
        }

        let mut dir = CMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..k {
            dir += comp[i].matrix() * C64::new(step[i], 0.0);
        }
        let current = phi(x).expect("iterate is positive definite");
        let mut t = 1.0f64;
        let mut accepted = false;
        while t >= 1e-14 {
            let trial = &*x + &dir * C64::new(t, 0.0);
            if let Some(value) = phi(&trial) {
                if value >= current - 1e-12 * (1.0 + current.abs()) {
                    *x = trial;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Ok(());
        }
    }
    Ok(())
}

/// Re tr(AB) without forming the product.
fn re_tr_product(a: &CMatrix, b: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (a[(i, j)], b[(j, i)]);
            acc += x.re * y.re - x.im * y.im;
        }
    }
    acc
}

// ============================================================================
// Tests
// ============================================================================
