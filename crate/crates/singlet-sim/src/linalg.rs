//! Dense complex linear algebra for Hilbert-space dimensions up to 64 and
//! superoperator dimensions up to 4096.
//!
//! Conventions used throughout the crate:
//! - tensor factor 0 is the slowest index in [`kron`] products,
//! - density matrices are vectorized column-major, `vec(A X B) = (Bᵀ ⊗ A) vec(X)`,
//! - eigenvalues are returned in a deterministic order (ascending real part,
//!   then ascending imaginary part).

use nalgebra::DMatrix;

use crate::error::SimError;

pub type C64 = num_complex::Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = nalgebra::DVector<C64>;

/// Shorthand complex constructor.
pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Real number lifted to a complex entry.
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Ordered local dimensions of the tensor factors of a Hilbert space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsystemDims {
    dims: Vec<usize>,
}

impl SubsystemDims {
    /// Builds the factor list; every local dimension must be at least 2.
    pub fn new(dims: &[usize]) -> Result<Self, SimError> {
        if dims.is_empty() {
            return Err(SimError::InvalidInput {
                context: "SubsystemDims::new".into(),
                reason: "empty factor list".into(),
            });
        }
        if let Some(d) = dims.iter().find(|&&d| d < 2) {
            return Err(SimError::InvalidInput {
                context: "SubsystemDims::new".into(),
                reason: format!("local dimension {d} is below 2"),
            });
        }
        Ok(Self { dims: dims.to_vec() })
    }

    /// A register of `n` qubits.
    pub fn qubits(n: usize) -> Result<Self, SimError> {
        Self::new(&vec![2; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    /// Product of all local dimensions.
    pub fn total(&self) -> usize {
        self.dims.iter().product()
    }

    /// Decomposes a flat index into per-factor indices, factor 0 slowest.
    fn split(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.dims.len()];
        for (k, &d) in self.dims.iter().enumerate().rev() {
            out[k] = flat % d;
            flat /= d;
        }
        out
    }

    /// Recombines per-factor indices into a flat index.
    fn join(&self, parts: &[usize]) -> usize {
        let mut flat = 0usize;
        for (k, &d) in self.dims.iter().enumerate() {
            flat = flat * d + parts[k];
        }
        flat
    }
}

/// Largest entry magnitude; zero for an empty matrix.
pub fn max_abs(a: &CMatrix) -> f64 {
    a.iter().fold(0.0f64, |m, z| m.max(z.norm()))
}

/// True when every entry is finite.
pub fn all_finite(a: &CMatrix) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

fn check_square(a: &CMatrix, context: &str) -> Result<usize, SimError> {
    if a.nrows() != a.ncols() {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!("matrix is {}x{}, not square", a.nrows(), a.ncols()),
        });
    }
    Ok(a.nrows())
}

fn check_dims_match(a: &CMatrix, dims: &SubsystemDims, context: &str) -> Result<(), SimError> {
    if a.nrows() != dims.total() {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!(
                "matrix dimension {} does not match factor product {}",
                a.nrows(),
                dims.total()
            ),
        });
    }
    Ok(())
}

/// Identity matrix of dimension `n`.
pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

/// Tensor product with the first factor as the slowest index.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Column-major vectorization of a matrix.
pub fn vectorize(a: &CMatrix) -> CVector {
    CVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vectorize`] for a `d`-dimensional square matrix.
pub fn unvectorize(v: &CVector, d: usize) -> CMatrix {
    CMatrix::from_column_slice(d, d, v.as_slice())
}

/// Partial trace over the factors not listed in `keep`. Kept factors retain
/// their original relative order.
pub fn partial_trace(
    rho: &CMatrix,
    dims: &SubsystemDims,
    keep: &[usize],
) -> Result<CMatrix, SimError> {
    check_square(rho, "partial_trace")?;
    check_dims_match(rho, dims, "partial_trace")?;
    if keep.is_empty() {
        return Err(SimError::InvalidInput {
            context: "partial_trace".into(),
            reason: "keep set is empty".into(),
        });
    }
    let mut keep_sorted = keep.to_vec();
    keep_sorted.sort_unstable();
    keep_sorted.dedup();
    if keep_sorted.len() != keep.len() || *keep_sorted.last().unwrap() >= dims.len() {
        return Err(SimError::InvalidInput {
            context: "partial_trace".into(),
            reason: format!("keep set {keep:?} invalid for {} factors", dims.len()),
        });
    }

    let out_dims: Vec<usize> = keep_sorted.iter().map(|&k| dims.dims[k]).collect();
    let out_total: usize = out_dims.iter().product();
    let traced: Vec<usize> = (0..dims.len()).filter(|k| !keep_sorted.contains(k)).collect();
    let n = dims.total();

    let mut out = CMatrix::zeros(out_total, out_total);
    for i in 0..n {
        let pi = dims.split(i);
        for j in 0..n {
            let pj = dims.split(j);
            if traced.iter().any(|&k| pi[k] != pj[k]) {
                continue;
            }
            let mut oi = 0usize;
            let mut oj = 0usize;
            for (&k, &d) in keep_sorted.iter().zip(out_dims.iter()) {
                oi = oi * d + pi[k];
                oj = oj * d + pj[k];
            }
            out[(oi, oj)] += rho[(i, j)];
        }
    }
    Ok(out)
}

/// Transposes the indices of one tensor factor, leaving the rest untouched.
pub fn partial_transpose(
    rho: &CMatrix,
    dims: &SubsystemDims,
    subsystem: usize,
) -> Result<CMatrix, SimError> {
    check_square(rho, "partial_transpose")?;
    check_dims_match(rho, dims, "partial_transpose")?;
    if subsystem >= dims.len() {
        return Err(SimError::InvalidInput {
            context: "partial_transpose".into(),
            reason: format!("subsystem {subsystem} out of range for {} factors", dims.len()),
        });
    }
    let n = dims.total();
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        let mut pi = dims.split(i);
        for j in 0..n {
            let mut pj = dims.split(j);
            std::mem::swap(&mut pi[subsystem], &mut pj[subsystem]);
            let ti = dims.join(&pi);
            let tj = dims.join(&pj);
            out[(ti, tj)] = rho[(i, j)];
            std::mem::swap(&mut pi[subsystem], &mut pj[subsystem]);
        }
    }
    Ok(out)
}

/// Relative tolerance below which a matrix is accepted as Hermitian.
pub const HERMITICITY_RTOL: f64 = 1e-10;

fn check_hermitian(a: &CMatrix, context: &str) -> Result<CMatrix, SimError> {
    let n = check_square(a, context)?;
    let scale = max_abs(a);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    if asym > HERMITICITY_RTOL * scale {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!("matrix is not Hermitian: asymmetry {asym:.3e} vs scale {scale:.3e}"),
        });
    }
    Ok((a + a.adjoint()) * cr(0.5))
}

/// Eigendecomposition of a Hermitian matrix. Returns eigenvalues in
/// ascending order and the matching unitary of column eigenvectors. Input
/// asymmetry beyond `1e-10` times the largest entry is rejected; smaller
/// asymmetry is symmetrized away.
pub fn herm_eig(a: &CMatrix) -> Result<(Vec<f64>, CMatrix), SimError> {
    let h = check_hermitian(a, "herm_eig")?;
    let n = h.nrows();
    let eig = nalgebra::SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(a: &CMatrix) -> Result<f64, SimError> {
    let (values, _) = herm_eig(a)?;
    Ok(values[0])
}

/// Propagator `exp(-i h t)` of a Hermitian generator, computed through the
/// eigendecomposition so the result is unitary to machine precision.
pub fn expm_unitary(h: &CMatrix, t: f64) -> Result<CMatrix, SimError> {
    let (values, vectors) = herm_eig(h)?;
    let n = values.len();
    let mut scaled = vectors.clone();
    for (col, &lambda) in values.iter().enumerate() {
        let phase = c64(0.0, -lambda * t).exp();
        for row in 0..n {
            scaled[(row, col)] *= phase;
        }
    }
    Ok(scaled * vectors.adjoint())
}

/// Eigenvalues and right eigenvectors of an arbitrary square matrix via its
/// complex Schur form. Output is ordered by ascending real part, then
/// ascending imaginary part, with each eigenvector normalized and its
/// largest component rotated to the positive real axis. Defective inputs do
/// not fail, but their repeated eigenvectors are not independent.
pub fn general_eig(a: &CMatrix) -> Result<(Vec<C64>, CMatrix), SimError> {
    let n = check_square(a, "general_eig")?;
    if max_abs(a) == 0.0 {
        return Ok((vec![c64(0.0, 0.0); n], identity(n)));
    }
    let max_iter = 50 * n.max(10);
    let schur = nalgebra::Schur::try_new(a.clone(), 1e-13, max_iter).ok_or_else(|| {
        SimError::Numerical {
            context: "general_eig".into(),
            reason: format!("Schur iteration did not converge within {max_iter} sweeps"),
        }
    })?;
    let (q, t) = schur.unpack();

    let t_scale = max_abs(&t).max(f64::MIN_POSITIVE);
    let floor = f64::EPSILON * t_scale;
    let mut pairs: Vec<(C64, CVector)> = Vec::with_capacity(n);
    for i in 0..n {
        let lambda = t[(i, i)];
        let mut y = CVector::zeros(n);
        y[i] = cr(1.0);
        for k in (0..i).rev() {
            let mut s = c64(0.0, 0.0);
            for m in (k + 1)..=i {
                s += t[(k, m)] * y[m];
            }
            let mut denom = t[(k, k)] - lambda;
            if denom.norm() < floor {
                denom = if denom.norm() == 0.0 {
                    cr(floor)
                } else {
                    denom * cr(floor / denom.norm())
                };
            }
            y[k] = -s / denom;
        }
        let mut v = &q * y;
        let norm = v.norm();
        if norm > 0.0 {
            v /= cr(norm);
        }
        let mut best = 0usize;
        for r in 1..n {
            if v[r].norm() > v[best].norm() {
                best = r;
            }
        }
        if v[best].norm() > 0.0 {
            let phase = v[best].conj() / cr(v[best].norm());
            v *= phase;
        }
        pairs.push((lambda, v));
    }

    pairs.sort_by(|a, b| {
        a.0.re
            .total_cmp(&b.0.re)
            .then_with(|| a.0.im.total_cmp(&b.0.im))
    });
    let values: Vec<C64> = pairs.iter().map(|p| p.0).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (col, (_, v)) in pairs.iter().enumerate() {
        vectors.set_column(col, v);
    }
    Ok((values, vectors))
}

/// Sum of absolute eigenvalues of a Hermitian matrix.
pub fn trace_norm(a: &CMatrix) -> Result<f64, SimError> {
    let (values, _) = herm_eig(a)?;
    Ok(values.iter().map(|l| l.abs()).sum())
}

/// Trace distance (1/2)||a - b||_1 between two Hermitian matrices.
pub fn trace_distance(a: &CMatrix, b: &CMatrix) -> Result<f64, SimError> {
    Ok(0.5 * trace_norm(&(a - b))?)
}

/// Matrix exponential of an arbitrary square matrix by scaling and squaring
/// with a Taylor series. Used for non-Hermitian generators such as
/// Liouvillians; Hermitian generators should go through [`expm_unitary`].
pub fn expm(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let mut one_norm = 0.0f64;
    for j in 0..a.ncols() {
        let col_sum: f64 = a.column(j).iter().map(|z| z.norm()).sum();
        one_norm = one_norm.max(col_sum);
    }
    let squarings = if one_norm > 0.5 {
        (one_norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let b = a * cr(0.5f64.powi(squarings as i32));

    let mut sum = identity(n);
    let mut term = identity(n);
    for k in 1..=60u32 {
        term = (&term * &b) * cr(1.0 / k as f64);
        sum += &term;
        if max_abs(&term) <= 1e-16 * max_abs(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Solves `a x = b` by full-pivot LU with one step of iterative refinement.
pub fn solve(a: &CMatrix, b: &CVector) -> Result<CVector, SimError> {
    let n = check_square(a, "solve")?;
    if b.len() != n {
        return Err(SimError::InvalidInput {
            context: "solve".into(),
            reason: format!("rhs length {} does not match dimension {n}", b.len()),
        });
    }
    let lu = nalgebra::FullPivLU::new(a.clone());
    let mut x = lu.solve(b).ok_or_else(|| SimError::Numerical {
        context: "solve".into(),
        reason: "matrix is singular to working precision".into(),
    })?;
    let residual = b - a * &x;
    if let Some(dx) = lu.solve(&residual) {
        x += dx;
    }
    Ok(x)
}
