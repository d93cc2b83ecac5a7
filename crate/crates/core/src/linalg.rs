//! Small dense complex linear algebra: skew-Hermitian exponentials, polar
//! projection to the unitary group, and Hermitian matrix functions.

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};

pub type C64 = nalgebra::Complex<f64>;
pub type CMat = DMatrix<C64>;

pub const I: C64 = C64::new(0.0, 1.0);

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// `max |(A + A*)_{ij}|`, zero for skew-adjoint matrices.
pub fn skew_defect(a: &CMat) -> f64 {
    (a + a.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `max |(U*U − I)_{ij}|`.
pub fn unitarity_defect(u: &CMat) -> f64 {
    let n = u.nrows();
    (u.adjoint() * u - identity(n))
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn normalized_trace(u: &CMat) -> C64 {
    u.trace() / u.nrows() as f64
}

/// `sinh(s)/s`, continuous at zero.
fn sinhc(s: C64) -> C64 {
    if s.norm() < 1e-4 {
        let s2 = s * s;
        C64::new(1.0, 0.0) + s2 / 6.0 + s2 * s2 / 120.0
    } else {
        s.sinh() / s
    }
}

/// Closed-form exponential of a 2×2 matrix via Cayley–Hamilton:
/// with `τ = tr X / 2`, `Y = X − τI`, `Y² = s²I`,
/// `exp X = e^τ (cosh s · I + sinh(s)/s · Y)`.
pub fn exp2(x: &Matrix2<C64>) -> Matrix2<C64> {
    let tau = (x[(0, 0)] + x[(1, 1)]) * 0.5;
    let y = x - Matrix2::identity() * tau;
    let s2 = y[(0, 0)] * y[(0, 0)] + y[(0, 1)] * y[(1, 0)];
    let s = s2.sqrt();
    let e = tau.exp();
    (Matrix2::identity() * s.cosh() + y * sinhc(s)) * e
}

/// Matrix exponential; exact closed forms for n ≤ 2, Padé scaling-and-squaring
/// otherwise.
pub fn expm(x: &CMat) -> CMat {
    match x.nrows() {
        1 => CMat::from_element(1, 1, x[(0, 0)].exp()),
        2 => from_mat2(&exp2(&to_mat2(x))),
        _ => x.clone().exp(),
    }
}

pub fn to_mat2(x: &CMat) -> Matrix2<C64> {
    Matrix2::new(x[(0, 0)], x[(0, 1)], x[(1, 0)], x[(1, 1)])
}

pub fn from_mat2(x: &Matrix2<C64>) -> CMat {
    CMat::from_row_slice(2, 2, &[x[(0, 0)], x[(0, 1)], x[(1, 0)], x[(1, 1)]])
}

/// Nearest unitary matrix (unitary polar factor `W V*` of `U = W Σ V*`).
pub fn polar_unitary(u: &CMat) -> CMat {
    if u.nrows() == 1 {
        let z = u[(0, 0)];
        return CMat::from_element(1, 1, z / z.norm());
    }
    let svd = u.clone().svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(w), Some(vt)) => w * vt,
        _ => u.clone(),
    }
}

/// Unitary polar factor of a 2×2 matrix by Newton iteration
/// `U ← ½(U + U^{-*})`, which converges quadratically near the group.
pub fn polar2(u: &Matrix2<C64>) -> Matrix2<C64> {
    let mut x = *u;
    for _ in 0..3 {
        match x.adjoint().try_inverse() {
            Some(inv) => x = (x + inv) * C64::new(0.5, 0.0),
            None => break,
        }
    }
    x
}

/// Eigenvalues (ascending) and eigenvectors (columns) of a Hermitian matrix.
pub fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    if n == 1 {
        return (vec![m[(0, 0)].re], identity(1));
    }
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = CMat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// `V f(Λ) V*` for a Hermitian matrix given its eigendecomposition.
pub fn apply_spectral(vals: &[f64], vecs: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let n = vals.len();
    let mut scaled = vecs.clone();
    for (c, &v) in vals.iter().enumerate() {
        let fv = f(v);
        for r in 0..n {
            scaled[(r, c)] *= fv;
        }
    }
    scaled * vecs.adjoint()
}

pub fn hermitian_function(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = hermitian_eigen(m);
    apply_spectral(&vals, &vecs, f)
}

/// Operator (spectral) norm.
pub fn op_norm(m: &CMat) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].norm();
    }
    let (vals, _) = hermitian_eigen(&(m.adjoint() * m));
    vals.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Operator norm of a 2×2 matrix from the closed-form largest eigenvalue of `M*M`.
pub fn op_norm2(m: &Matrix2<C64>) -> f64 {
    let h = m.adjoint() * m;
    let a = h[(0, 0)].re;
    let d = h[(1, 1)].re;
    let b = h[(0, 1)].norm();
    let lam = 0.5 * (a + d) + (0.25 * (a - d) * (a - d) + b * b).sqrt();
    lam.max(0.0).sqrt()
}
