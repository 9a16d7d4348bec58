//! Dense Hermitian operators over small tensor-product spaces.
//!
//! Everything downstream (protocol blocks, observed-statistics constraints,
//! the semidefinite solver) manipulates operators on spaces of the form
//! `H_1 ⊗ H_2 ⊗ … ⊗ H_k` with a few hundred total dimensions. This module
//! provides the layout bookkeeping, Kronecker products, partial traces, an
//! orthonormal Hermitian basis for tomography constraints, and a guarded
//! minimum-eigenvalue routine.

use nalgebra::DMatrix;
use num_complex::Complex;
use thiserror::Error;

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;

/// Largest total dimension accepted by default. Guards against accidental
/// construction of matrices too large for the dense representation.
pub const DEFAULT_DIM_CEILING: usize = 1024;

/// Entrywise deviation from `M = M†` tolerated before construction fails.
pub const HERMITICITY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("total dimension {dim} exceeds ceiling {ceiling}")]
    Capacity { dim: usize, ceiling: usize },
    #[error("matrix deviates from hermiticity by {dev:.3e} (tolerance {HERMITICITY_TOL:.0e})")]
    NotHermitian { dev: f64 },
    #[error("bad subsystem selection: {0}")]
    BadSubsystems(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("eigenvalue iteration did not converge")]
    EigenFailure,
}

// ====================================================================
// Layout
// ====================================================================

/// Ordered list of tensor-factor dimensions. The first factor varies slowest
/// in the flattened index, matching the usual Kronecker-product convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsystemLayout {
    dims: Vec<usize>,
    ceiling: usize,
}

impl SubsystemLayout {
    pub fn new(dims: &[usize]) -> Result<Self, OperatorError> {
        Self::with_ceiling(dims, DEFAULT_DIM_CEILING)
    }

    pub fn with_ceiling(dims: &[usize], ceiling: usize) -> Result<Self, OperatorError> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(OperatorError::BadSubsystems(
                "layout needs at least one factor and no zero dimensions".into(),
            ));
        }
        let mut total: usize = 1;
        for &d in dims {
            total = total
                .checked_mul(d)
                .ok_or(OperatorError::Capacity { dim: usize::MAX, ceiling })?;
        }
        if total > ceiling {
            return Err(OperatorError::Capacity { dim: total, ceiling });
        }
        Ok(Self { dims: dims.to_vec(), ceiling })
    }

    pub fn single(dim: usize) -> Result<Self, OperatorError> {
        Self::new(&[dim])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn factors(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn ceiling(&self) -> usize {
        self.ceiling
    }

    /// Stride of factor `i` in the flattened index.
    pub fn stride(&self, i: usize) -> usize {
        self.dims[i + 1..].iter().product()
    }

    /// Concatenation `self ⊗ other`, enforcing the larger of the two ceilings.
    pub fn then(&self, other: &SubsystemLayout) -> Result<SubsystemLayout, OperatorError> {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        SubsystemLayout::with_ceiling(&dims, self.ceiling.max(other.ceiling))
    }
}

// ====================================================================
// Hermitian operators
// ====================================================================

/// A Hermitian matrix tagged with the subsystem layout it acts on.
///
/// Construction symmetrizes the input as `(M + M†)/2` and rejects matrices
/// whose anti-Hermitian part exceeds [`HERMITICITY_TOL`], so every value of
/// this type is exactly Hermitian in storage.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator {
    layout: SubsystemLayout,
    mat: CMatrix,
}

impl HermitianOperator {
    pub fn new(layout: SubsystemLayout, mat: CMatrix) -> Result<Self, OperatorError> {
        let n = layout.total_dim();
        if mat.nrows() != n || mat.ncols() != n {
            return Err(OperatorError::DimensionMismatch(format!(
                "matrix is {}x{}, layout wants {}x{}",
                mat.nrows(),
                mat.ncols(),
                n,
                n
            )));
        }
        let mut dev: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                let d = (mat[(i, j)] - mat[(j, i)].conj()).norm();
                dev = dev.max(d);
            }
        }
        if dev > HERMITICITY_TOL {
            return Err(OperatorError::NotHermitian { dev });
        }
        let herm = CMatrix::from_fn(n, n, |i, j| (mat[(i, j)] + mat[(j, i)].conj()) * 0.5);
        Ok(Self { layout, mat: herm })
    }

    pub fn zero(layout: SubsystemLayout) -> Self {
        let n = layout.total_dim();
        Self { layout, mat: CMatrix::zeros(n, n) }
    }

    pub fn identity(layout: SubsystemLayout) -> Self {
        let n = layout.total_dim();
        Self { layout, mat: CMatrix::identity(n, n) }
    }

    /// Diagonal operator from real entries.
    pub fn from_diagonal(layout: SubsystemLayout, diag: &[f64]) -> Result<Self, OperatorError> {
        let n = layout.total_dim();
        if diag.len() != n {
            return Err(OperatorError::DimensionMismatch(format!(
                "diagonal has {} entries, layout wants {}",
                diag.len(),
                n
            )));
        }
        let mut mat = CMatrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            mat[(i, i)] = C64::new(d, 0.0);
        }
        Ok(Self { layout, mat })
    }

    pub fn layout(&self) -> &SubsystemLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> CMatrix {
        self.mat
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.mat[(i, i)].re).sum()
    }

    /// Hilbert-Schmidt inner product `tr(A B)`; real for Hermitian arguments.
    pub fn hs_inner(&self, other: &HermitianOperator) -> f64 {
        let n = self.dim();
        assert_eq!(n, other.dim(), "hs_inner on mismatched dimensions");
        let mut acc = 0.0;
        for j in 0..n {
            for i in 0..n {
                // tr(AB) = sum_ij A[i,j] B[j,i]; B[j,i] = conj(B[i,j]).
                let a = self.mat[(i, j)];
                let b = other.mat[(i, j)].conj();
                acc += a.re * b.re - a.im * b.im;
            }
        }
        acc
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> HermitianOperator {
        HermitianOperator { layout: self.layout.clone(), mat: &self.mat * C64::new(s, 0.0) }
    }

    pub fn add(&self, other: &HermitianOperator) -> Result<HermitianOperator, OperatorError> {
        if self.layout != other.layout {
            return Err(OperatorError::DimensionMismatch(
                "adding operators with different layouts".into(),
            ));
        }
        Ok(HermitianOperator { layout: self.layout.clone(), mat: &self.mat + &other.mat })
    }

    pub fn add_assign_scaled(&mut self, other: &HermitianOperator, s: f64) {
        assert_eq!(self.layout, other.layout, "layout mismatch in add_assign_scaled");
        self.mat += &other.mat * C64::new(s, 0.0);
    }

    /// Smallest eigenvalue. Accuracy is limited by the tridiagonal QL
    /// iteration in the backing library, in practice ~1e-14 relative to the
    /// spectral norm for the sizes used here.
    pub fn min_eigenvalue(&self) -> Result<f64, OperatorError> {
        min_eigenvalue(self)
    }

    /// All eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>, OperatorError> {
        let eig = self
            .mat
            .clone()
            .try_symmetric_eigen(f64::EPSILON, 0)
            .ok_or(OperatorError::EigenFailure)?;
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
        Ok(vals)
    }
}

pub fn min_eigenvalue(op: &HermitianOperator) -> Result<f64, OperatorError> {
    let vals = op.eigenvalues()?;
    Ok(vals[0])
}

// ====================================================================
// Kronecker products and partial traces
// ====================================================================

/// `a ⊗ b` with concatenated layouts. Fails if the product dimension passes
/// the layout ceiling.
pub fn kron(a: &HermitianOperator, b: &HermitianOperator) -> Result<HermitianOperator, OperatorError> {
    let layout = a.layout().then(b.layout())?;
    let mat = a.matrix().kronecker(b.matrix());
    // Kronecker product of Hermitian factors is exactly Hermitian.
    Ok(HermitianOperator { layout, mat })
}

/// Fold `kron` over a nonempty list of factors.
pub fn kron_all(factors: &[&HermitianOperator]) -> Result<HermitianOperator, OperatorError> {
    let mut iter = factors.iter();
    let first = iter
        .next()
        .ok_or_else(|| OperatorError::BadSubsystems("kron_all needs at least one factor".into()))?;
    let mut acc = (*first).clone();
    for f in iter {
        acc = kron(&acc, f)?;
    }
    Ok(acc)
}

/// Trace out every factor not listed in `keep`. Indices must be strictly
/// increasing and in range; the result keeps the original factor order.
pub fn partial_trace(
    op: &HermitianOperator,
    keep: &[usize],
) -> Result<HermitianOperator, OperatorError> {
    let dims = op.layout().dims();
    if keep.is_empty() {
        return Err(OperatorError::BadSubsystems("keep set must be nonempty".into()));
    }
    if keep.windows(2).any(|w| w[0] >= w[1]) || *keep.last().unwrap() >= dims.len() {
        return Err(OperatorError::BadSubsystems(format!(
            "keep indices {keep:?} must be strictly increasing and < {}",
            dims.len()
        )));
    }

    let kept_dims: Vec<usize> = keep.iter().map(|&i| dims[i]).collect();
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !keep.contains(i)).collect();

    // Flattened offsets of every kept and every traced multi-index.
    let offsets = |subset: &[usize]| -> Vec<usize> {
        let mut offs = vec![0usize];
        for &fi in subset {
            let d = dims[fi];
            let s = op.layout().stride(fi);
            let mut next = Vec::with_capacity(offs.len() * d);
            for &o in &offs {
                for v in 0..d {
                    next.push(o + v * s);
                }
            }
            offs = next;
        }
        offs
    };
    let kept_offs = offsets(keep);
    let traced_offs = offsets(&traced);

    let nk = kept_offs.len();
    let m = op.matrix();
    let mut out = CMatrix::zeros(nk, nk);
    for (r, &ro) in kept_offs.iter().enumerate() {
        for (c, &co) in kept_offs.iter().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for &t in &traced_offs {
                acc += m[(ro + t, co + t)];
            }
            out[(r, c)] = acc;
        }
    }
    let layout = SubsystemLayout::with_ceiling(&kept_dims, op.layout().ceiling())?;
    Ok(HermitianOperator { layout, mat: out })
}

// ====================================================================
// Hermitian basis
// ====================================================================

/// Hilbert-Schmidt-orthonormal Hermitian basis of `dim × dim` matrices,
/// `dim²` elements in a fixed order: the diagonal units `E_kk` first, then
/// for each pair `k < l` (lexicographic) the symmetric element
/// `(E_kl + E_lk)/√2` followed by the antisymmetric `i(E_lk − E_kl)/√2`.
pub fn hermitian_basis(dim: usize) -> Vec<HermitianOperator> {
    let layout = SubsystemLayout::single(dim).expect("basis dimension within ceiling");
    let mut out = Vec::with_capacity(dim * dim);
    for k in 0..dim {
        let mut m = CMatrix::zeros(dim, dim);
        m[(k, k)] = C64::new(1.0, 0.0);
        out.push(HermitianOperator { layout: layout.clone(), mat: m });
    }
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for k in 0..dim {
        for l in (k + 1)..dim {
            let mut s = CMatrix::zeros(dim, dim);
            s[(k, l)] = C64::new(inv_sqrt2, 0.0);
            s[(l, k)] = C64::new(inv_sqrt2, 0.0);
            out.push(HermitianOperator { layout: layout.clone(), mat: s });

            let mut a = CMatrix::zeros(dim, dim);
            a[(k, l)] = C64::new(0.0, -inv_sqrt2);
            a[(l, k)] = C64::new(0.0, inv_sqrt2);
            out.push(HermitianOperator { layout: layout.clone(), mat: a });
        }
    }
    out
}

// ====================================================================
// Tests
// ====================================================================
