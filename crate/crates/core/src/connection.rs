//! Metric connections `∇ = d + A` on the trivial rank-n bundle over a flat
//! torus, and the midpoint-exponential holonomy integrator.
//!
//! Along a discretized path `y_0..y_N` the parallel transport is the ordered
//! product `E_N ⋯ E_1` with `E_i = exp(−Σ_j A_j(m_i) Δy_i^j)`, `m_i` the
//! segment midpoint. Each factor is an exact exponential of a skew matrix, so
//! the product stays in the group; it is re-projected by polar decomposition
//! every 1024 steps to remove accumulated rounding.

use std::fmt;
use std::sync::Arc;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{LoopPath, TorusSpec};
use crate::linalg::{self, CMat, C64, I};

const SKEW_TOL: f64 = 1e-12;
const REPROJECT_EVERY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldType {
    RealOrthogonal,
    ComplexUnitary,
}

/// Writes the coefficient matrices `A_1(x), …, A_d(x)` (row-major, `d·n²`
/// entries) at the point `x`.
pub type FieldFn = Arc<dyn Fn(&[f64], &mut [C64]) + Send + Sync>;

#[derive(Clone)]
pub enum ConnectionForm {
    /// `A = 2πi Σ_j θ_j dx_j / L_j` on a line bundle.
    FlatAbelian { theta: Vec<f64>, periods: Vec<f64> },
    /// Constant skew matrices `a_1, …, a_d`.
    ConstantMatrix { coefficients: Vec<CMat> },
    /// A smooth matrix-valued one-form. Lift-defined (non-periodic) fields set
    /// `restrict_to_contractible` and may only be integrated on zero-winding
    /// loops.
    Field {
        evaluator: FieldFn,
        restrict_to_contractible: bool,
        smoothness: String,
    },
}

impl fmt::Debug for ConnectionForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FlatAbelian { theta, periods } => f
                .debug_struct("FlatAbelian")
                .field("theta", theta)
                .field("periods", periods)
                .finish(),
            Self::ConstantMatrix { coefficients } => f
                .debug_struct("ConstantMatrix")
                .field("coefficients", coefficients)
                .finish(),
            Self::Field {
                restrict_to_contractible,
                smoothness,
                ..
            } => f
                .debug_struct("Field")
                .field("restrict_to_contractible", restrict_to_contractible)
                .field("smoothness", smoothness)
                .finish_non_exhaustive(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConnectionSpec {
    rank: usize,
    dim: usize,
    field_type: FieldType,
    form: ConnectionForm,
    /// Constant coefficients commute pairwise (so holonomy depends only on the
    /// lifted displacement).
    commuting: bool,
    trivial: bool,
}

impl ConnectionSpec {
    /// The product connection `d` on the rank-n bundle.
    pub fn trivial(torus: &TorusSpec, rank: usize, field_type: FieldType) -> Result<Self> {
        ensure(rank >= 1, || "rank must be at least 1".into())?;
        Self::constant(field_type, vec![CMat::zeros(rank, rank); torus.dim()])
    }

    /// Flat line-bundle connection with holonomy `exp(−2πi θ·w)` around a loop
    /// of winding `w`.
    pub fn flat_abelian(torus: &TorusSpec, theta: Vec<f64>) -> Result<Self> {
        ensure(theta.len() == torus.dim(), || {
            format!("θ has {} components on a {}-torus", theta.len(), torus.dim())
        })?;
        ensure(theta.iter().all(|v| v.is_finite()), || "θ must be finite".into())?;
        let trivial = theta.iter().all(|&v| v == 0.0);
        Ok(Self {
            rank: 1,
            dim: torus.dim(),
            field_type: FieldType::ComplexUnitary,
            form: ConnectionForm::FlatAbelian {
                theta,
                periods: torus.side_lengths().to_vec(),
            },
            commuting: true,
            trivial,
        })
    }

    pub fn constant(field_type: FieldType, coefficients: Vec<CMat>) -> Result<Self> {
        let dim = coefficients.len();
        ensure((2..=3).contains(&dim), || {
            format!("expected 2 or 3 coefficient matrices, got {dim}")
        })?;
        let rank = coefficients[0].nrows();
        ensure(rank >= 1, || "rank must be at least 1".into())?;
        for (j, a) in coefficients.iter().enumerate() {
            if a.nrows() != rank || a.ncols() != rank {
                return Err(Error::RankMismatch {
                    expected: rank,
                    found: a.nrows().max(a.ncols()),
                });
            }
            check_coefficient(j, a, field_type)?;
        }
        let mut commuting = true;
        for i in 0..dim {
            for j in i + 1..dim {
                let c = &coefficients[i] * &coefficients[j] - &coefficients[j] * &coefficients[i];
                if c.iter().any(|z| z.norm() > 1e-14) {
                    commuting = false;
                }
            }
        }
        let trivial = coefficients.iter().all(|a| a.iter().all(|z| *z == C64::new(0.0, 0.0)));
        Ok(Self {
            rank,
            dim,
            field_type,
            form: ConnectionForm::ConstantMatrix { coefficients },
            commuting,
            trivial,
        })
    }

    /// A smooth one-form given by `evaluator`, checked for skew-adjointness (and
    /// realness for orthogonal bundles) on an `8^d` grid of the torus.
    pub fn field<F>(
        torus: &TorusSpec,
        rank: usize,
        field_type: FieldType,
        evaluator: F,
        restrict_to_contractible: bool,
        smoothness: impl Into<String>,
    ) -> Result<Self>
    where
        F: Fn(&[f64], &mut [C64]) + Send + Sync + 'static,
    {
        ensure(rank >= 1, || "rank must be at least 1".into())?;
        let dim = torus.dim();
        let mut buf = vec![C64::new(0.0, 0.0); dim * rank * rank];
        let n = 8usize;
        let mut x = vec![0.0; dim];
        for idx in 0..n.pow(dim as u32) {
            let mut r = idx;
            for (xj, l) in x.iter_mut().zip(torus.side_lengths()) {
                *xj = (r % n) as f64 / n as f64 * l;
                r /= n;
            }
            evaluator(&x, &mut buf);
            for j in 0..dim {
                let a = CMat::from_row_slice(rank, rank, &buf[j * rank * rank..(j + 1) * rank * rank]);
                check_coefficient(j, &a, field_type)?;
            }
        }
        Ok(Self {
            rank,
            dim,
            field_type,
            form: ConnectionForm::Field {
                evaluator: Arc::new(evaluator),
                restrict_to_contractible,
                smoothness: smoothness.into(),
            },
            commuting: false,
            trivial: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn field_type(&self) -> FieldType {
        self.field_type
    }

    pub fn form(&self) -> &ConnectionForm {
        &self.form
    }

    pub fn is_trivial(&self) -> bool {
        self.trivial
    }

    /// True when the holonomy of a path depends only on its lifted displacement.
    pub fn is_displacement_determined(&self) -> bool {
        self.commuting && !matches!(self.form, ConnectionForm::Field { .. })
    }

    pub fn restricted_to_contractible(&self) -> bool {
        matches!(
            self.form,
            ConnectionForm::Field {
                restrict_to_contractible: true,
                ..
            }
        )
    }

    /// Constant coefficient matrices `a_j` (1×1 for flat abelian connections),
    /// or `None` for non-constant fields.
    pub fn constant_coefficients(&self) -> Option<Vec<CMat>> {
        match &self.form {
            ConnectionForm::FlatAbelian { theta, periods } => Some(
                theta
                    .iter()
                    .zip(periods)
                    .map(|(t, l)| CMat::from_element(1, 1, I * (2.0 * std::f64::consts::PI * t / l)))
                    .collect(),
            ),
            ConnectionForm::ConstantMatrix { coefficients } => Some(coefficients.clone()),
            ConnectionForm::Field { .. } => None,
        }
    }

    /// Holonomy of a path with lifted displacement `disp`, when it depends on
    /// nothing else.
    pub fn holonomy_of_displacement(&self, disp: &[f64]) -> Option<GroupElement> {
        if self.trivial {
            return Some(GroupElement::identity(self.rank, self.field_type));
        }
        if !self.is_displacement_determined() {
            return None;
        }
        let matrix = match &self.form {
            ConnectionForm::FlatAbelian { theta, periods } => {
                let phase: f64 = theta.iter().zip(periods).zip(disp).map(|((t, l), y)| t * y / l).sum();
                CMat::from_element(1, 1, C64::from_polar(1.0, -2.0 * std::f64::consts::PI * phase))
            }
            ConnectionForm::ConstantMatrix { coefficients } => {
                let mut x = CMat::zeros(self.rank, self.rank);
                for (a, y) in coefficients.iter().zip(disp) {
                    x -= a * C64::new(*y, 0.0);
                }
                linalg::expm(&x)
            }
            ConnectionForm::Field { .. } => return None,
        };
        Some(GroupElement {
            matrix,
            field_type: self.field_type,
        })
    }
}

fn check_coefficient(index: usize, a: &CMat, field_type: FieldType) -> Result<()> {
    let defect = linalg::skew_defect(a);
    if defect.is_nan() || defect > SKEW_TOL {
        return Err(Error::NotSkewAdjoint { index, defect });
    }
    if field_type == FieldType::RealOrthogonal {
        let imag = a.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        if imag > SKEW_TOL {
            return Err(Error::NotSkewAdjoint { index, defect: imag });
        }
    }
    Ok(())
}

/// Pauli matrices `σ_x, σ_y, σ_z`.
pub fn pauli() -> [CMat; 3] {
    let z = C64::new(0.0, 0.0);
    let o = C64::new(1.0, 0.0);
    [
        CMat::from_row_slice(2, 2, &[z, o, o, z]),
        CMat::from_row_slice(2, 2, &[z, -I, I, z]),
        CMat::from_row_slice(2, 2, &[o, z, z, -o]),
    ]
}

/// Constant SU(2) connection with `a_j = c·iσ_j` (σ_x, σ_y, and σ_z in 3d).
pub fn su2_constant(torus: &TorusSpec, c: f64) -> Result<ConnectionSpec> {
    let s = pauli();
    let coefficients = (0..torus.dim()).map(|j| &s[j] * (I * c)).collect();
    ConnectionSpec::constant(FieldType::ComplexUnitary, coefficients)
}

/// Lift-defined U(1) field `A = i(B/2)(x_1 dx_2 − x_2 dx_1)` on the plane
/// cover of a 2-torus. The holonomy of a closed contractible polygon is
/// `exp(−iB·area)`, which the midpoint rule reproduces exactly.
pub fn levy_area_field(torus: &TorusSpec, b: f64) -> Result<ConnectionSpec> {
    if torus.dim() != 2 {
        return Err(Error::UnsupportedDimension(torus.dim()));
    }
    ConnectionSpec::field(
        torus,
        1,
        FieldType::ComplexUnitary,
        move |x, out| {
            out[0] = I * (-0.5 * b * x[1]);
            out[1] = I * (0.5 * b * x[0]);
        },
        true,
        "linear in the lift",
    )
}

/// A holonomy value, unitary (or orthogonal) up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement {
    matrix: CMat,
    field_type: FieldType,
}

impl GroupElement {
    pub fn identity(rank: usize, field_type: FieldType) -> Self {
        Self {
            matrix: linalg::identity(rank),
            field_type,
        }
    }

    pub fn from_matrix(matrix: CMat, field_type: FieldType) -> Result<Self> {
        ensure(matrix.is_square(), || "group element must be square".into())?;
        let defect = linalg::unitarity_defect(&matrix);
        ensure(defect <= 1e-10, || format!("matrix is not unitary (defect {defect:e})"))?;
        Ok(Self { matrix, field_type })
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn rank(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn field_type(&self) -> FieldType {
        self.field_type
    }

    /// Normalized trace `(1/n) Σ U_ii`.
    pub fn trace_norm(&self) -> C64 {
        linalg::normalized_trace(&self.matrix)
    }

    pub fn unitarity_defect(&self) -> f64 {
        linalg::unitarity_defect(&self.matrix)
    }

    pub fn adjoint(&self) -> Self {
        Self {
            matrix: self.matrix.adjoint(),
            field_type: self.field_type,
        }
    }

    /// Group product `self · other`.
    pub fn compose(&self, other: &GroupElement) -> Self {
        Self {
            matrix: &self.matrix * &other.matrix,
            field_type: self.field_type,
        }
    }
}

/// Normalized trace of a group element.
pub fn trace_norm(u: &GroupElement) -> C64 {
    u.trace_norm()
}

/// Parallel transport `Hol_{0,t}` along a discretized path.
pub fn holonomy(path: &LoopPath, conn: &ConnectionSpec) -> Result<GroupElement> {
    ensure(path.dim() == conn.dim, || {
        format!("path dimension {} vs connection dimension {}", path.dim(), conn.dim)
    })?;
    if conn.restricted_to_contractible() && path.winding().iter().any(|&w| w != 0) {
        return Err(Error::WindingViolation(path.winding().to_vec()));
    }
    Ok(transport(conn, path.lifted_points()))
}

/// Parallel transport along an open polygon given by flattened lifted points.
/// Lift-defined fields are evaluated at the given lifted coordinates.
pub fn holonomy_of_points(conn: &ConnectionSpec, points: &[f64]) -> Result<GroupElement> {
    let d = conn.dim;
    ensure(points.len().is_multiple_of(d) && points.len() >= 2 * d, || {
        "need at least two points of the connection dimension".into()
    })?;
    Ok(transport(conn, points))
}

fn transport(conn: &ConnectionSpec, points: &[f64]) -> GroupElement {
    let d = conn.dim;
    let n_pts = points.len() / d;
    let disp: Vec<f64> = (0..d).map(|j| points[(n_pts - 1) * d + j] - points[j]).collect();
    if let Some(u) = conn.holonomy_of_displacement(&disp) {
        return u;
    }
    let matrix = match conn.rank {
        1 => transport_rank1(conn, points),
        2 => transport_rank2(conn, points),
        _ => transport_general(conn, points),
    };
    GroupElement {
        matrix,
        field_type: conn.field_type,
    }
}

/// Writes `X_i = −Σ_j A_j(m_i) Δy_i^j` (row-major) for segment `i`.
struct StepGenerator<'a> {
    conn: &'a ConnectionSpec,
    buf: Vec<C64>,
    mid: Vec<f64>,
}

impl<'a> StepGenerator<'a> {
    fn new(conn: &'a ConnectionSpec) -> Self {
        let n2 = conn.rank * conn.rank;
        Self {
            conn,
            buf: vec![C64::new(0.0, 0.0); conn.dim * n2],
            mid: vec![0.0; conn.dim],
        }
    }

    fn generator(&mut self, a: &[f64], b: &[f64], out: &mut [C64]) {
        let n2 = self.conn.rank * self.conn.rank;
        out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        match &self.conn.form {
            ConnectionForm::ConstantMatrix { coefficients } => {
                for (j, c) in coefficients.iter().enumerate() {
                    let dy = b[j] - a[j];
                    // nalgebra storage is column-major; transpose into row-major.
                    for r in 0..self.conn.rank {
                        for s in 0..self.conn.rank {
                            out[r * self.conn.rank + s] -= c[(r, s)] * dy;
                        }
                    }
                }
            }
            ConnectionForm::Field { evaluator, .. } => {
                for j in 0..self.conn.dim {
                    self.mid[j] = 0.5 * (a[j] + b[j]);
                }
                evaluator(&self.mid, &mut self.buf);
                for j in 0..self.conn.dim {
                    let dy = b[j] - a[j];
                    for (o, c) in out.iter_mut().zip(&self.buf[j * n2..(j + 1) * n2]) {
                        *o -= c * dy;
                    }
                }
            }
            ConnectionForm::FlatAbelian { theta, periods } => {
                let phase: f64 = (0..self.conn.dim).map(|j| theta[j] / periods[j] * (b[j] - a[j])).sum();
                out[0] = I * (-2.0 * std::f64::consts::PI * phase);
            }
        }
    }
}

fn transport_rank1(conn: &ConnectionSpec, points: &[f64]) -> CMat {
    let d = conn.dim;
    let mut gen = StepGenerator::new(conn);
    let mut x = [C64::new(0.0, 0.0)];
    // Products of commuting phases: sum the exponents, exponentiate once and
    // keep only the phase.
    let mut phase = 0.0;
    for seg in points.windows(2 * d).step_by(d) {
        gen.generator(&seg[..d], &seg[d..], &mut x);
        phase += x[0].im;
    }
    CMat::from_element(1, 1, C64::from_polar(1.0, phase))
}

fn transport_rank2(conn: &ConnectionSpec, points: &[f64]) -> CMat {
    let d = conn.dim;
    let mut gen = StepGenerator::new(conn);
    let mut x = [C64::new(0.0, 0.0); 4];
    let mut u = Matrix2::<C64>::identity();
    for (i, seg) in points.windows(2 * d).step_by(d).enumerate() {
        gen.generator(&seg[..d], &seg[d..], &mut x);
        let step = linalg::exp2(&Matrix2::new(x[0], x[1], x[2], x[3]));
        u = step * u;
        if (i + 1) % REPROJECT_EVERY == 0 {
            u = linalg::polar2(&u);
        }
    }
    linalg::from_mat2(&linalg::polar2(&u))
}

fn transport_general(conn: &ConnectionSpec, points: &[f64]) -> CMat {
    let d = conn.dim;
    let n = conn.rank;
    let mut gen = StepGenerator::new(conn);
    let mut x = vec![C64::new(0.0, 0.0); n * n];
    let mut u = linalg::identity(n);
    for (i, seg) in points.windows(2 * d).step_by(d).enumerate() {
        gen.generator(&seg[..d], &seg[d..], &mut x);
        let step = linalg::expm(&CMat::from_row_slice(n, n, &x));
        u = step * u;
        if (i + 1) % REPROJECT_EVERY == 0 {
            u = linalg::polar_unitary(&u);
        }
    }
    linalg::polar_unitary(&u)
}

/// `tr Hol^{∇₁}(ℓ) − tr Hol^{∇₀}(ℓ)` for a closed loop.
pub fn chi(path: &LoopPath, conn0: &ConnectionSpec, conn1: &ConnectionSpec) -> Result<C64> {
    let h1 = holonomy(path, conn1)?.trace_norm();
    let h0 = holonomy(path, conn0)?.trace_norm();
    Ok(h1 - h0)
}

/// Convergence of the integrator along a smooth curve under grid refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub steps: Vec<usize>,
    /// Operator-norm error against the reference at 8× the finest resolution.
    pub errors: Vec<f64>,
    /// `log₂(e_k / e_{k+1})` for consecutive doublings.
    pub orders: Vec<f64>,
}

impl OrderReport {
    /// Smallest observed order among levels whose error is above the rounding
    /// floor; `None` when every error is at the floor.
    pub fn min_order(&self, floor: f64) -> Option<f64> {
        self.orders
            .iter()
            .zip(self.errors.windows(2))
            .filter(|(_, e)| e[1] > floor)
            .map(|(o, _)| *o)
            .reduce(f64::min)
    }
}

/// Integrates `conn` along `curve: [0,1] → R^d` at `base_steps · 2^k` steps
/// for `k < levels`, against a reference at 8× the finest resolution.
pub fn integrator_order_study<F>(
    conn: &ConnectionSpec,
    curve: F,
    base_steps: usize,
    levels: usize,
) -> Result<OrderReport>
where
    F: Fn(f64) -> Vec<f64>,
{
    ensure(base_steps >= 2 && levels >= 2, || {
        "need base_steps ≥ 2 and levels ≥ 2".into()
    })?;
    let sample = |n: usize| -> Vec<f64> { (0..=n).flat_map(|i| curve(i as f64 / n as f64)).collect() };
    let finest = base_steps << (levels - 1);
    let reference = holonomy_of_points(conn, &sample(8 * finest))?;
    let mut steps = Vec::new();
    let mut errors = Vec::new();
    for k in 0..levels {
        let n = base_steps << k;
        let u = holonomy_of_points(conn, &sample(n))?;
        steps.push(n);
        errors.push(linalg::op_norm(&(u.matrix() - reference.matrix())));
    }
    let orders = errors
        .windows(2)
        .map(|e| {
            if e[0] == 0.0 && e[1] == 0.0 {
                f64::INFINITY
            } else {
                (e[0] / e[1]).log2()
            }
        })
        .collect();
    Ok(OrderReport { steps, errors, orders })
}
