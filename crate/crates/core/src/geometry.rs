//! Flat torus model.
//!
//! Points on the torus are represented by coordinates in `R^d`; functions on
//! the torus (mass fields, connection coefficients) are evaluated on lifted
//! coordinates and must be periodic unless they are explicitly declared
//! lift-defined. A [`LoopPath`] stores the lifted polygon `y_0..y_N` of a
//! sampled bridge on the uniform time grid `s_i = i·t/N`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Relative size at which lattice series are truncated.
const SERIES_EPS: f64 = 1e-17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusSpec {
    side_lengths: Vec<f64>,
}

impl TorusSpec {
    pub fn new(side_lengths: Vec<f64>) -> Result<Self> {
        let d = side_lengths.len();
        if !(2..=3).contains(&d) {
            return Err(Error::UnsupportedDimension(d));
        }
        ensure(side_lengths.iter().all(|l| l.is_finite() && *l > 0.0), || {
            format!("side lengths must be positive and finite, got {side_lengths:?}")
        })?;
        Ok(Self { side_lengths })
    }

    /// The unit torus `R^d / Z^d`.
    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.side_lengths.len()
    }

    pub fn side_lengths(&self) -> &[f64] {
        &self.side_lengths
    }

    pub fn volume(&self) -> f64 {
        self.side_lengths.iter().product()
    }

    /// Representative of `x` in `[0, L_1) × … × [0, L_d)`.
    pub fn wrap(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.side_lengths)
            .map(|(&xi, &l)| {
                let r = xi.rem_euclid(l);
                if r >= l {
                    0.0
                } else {
                    r
                }
            })
            .collect()
    }

    /// Representative of a displacement in `[-L_j/2, L_j/2)` per axis.
    pub fn minimal_lift(&self, displacement: &[f64]) -> Vec<f64> {
        displacement
            .iter()
            .zip(&self.side_lengths)
            .map(|(&z, &l)| minimal_lift_1d(z, l))
            .collect()
    }

    /// Lattice vector `Σ w_j L_j e_j`.
    pub fn lattice_vector(&self, winding: &[i64]) -> Vec<f64> {
        winding
            .iter()
            .zip(&self.side_lengths)
            .map(|(&w, &l)| w as f64 * l)
            .collect()
    }

    pub fn uniform_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.side_lengths.iter().map(|&l| rng.gen::<f64>() * l).collect()
    }

    fn check_point(&self, x: &[f64], what: &str) -> Result<()> {
        ensure(x.len() == self.dim(), || {
            format!("{what} has dimension {} on a {}-torus", x.len(), self.dim())
        })?;
        ensure(x.iter().all(|v| v.is_finite()), || {
            format!("{what} has non-finite coordinates: {x:?}")
        })
    }
}

fn minimal_lift_1d(z: f64, l: f64) -> f64 {
    let r = (z + 0.5 * l).rem_euclid(l) - 0.5 * l;
    if r >= 0.5 * l {
        r - l
    } else {
        r
    }
}

/// One-dimensional periodic heat kernel for `½∂²` on a circle of length `l`,
/// at displacement `z`.
///
/// Uses the image sum for `2πt ≤ l²` and the Poisson-dual (Fourier) series
/// otherwise; both are truncated once terms fall below `1e-17` of the sum.
pub fn circle_heat_kernel(t: f64, z: f64, l: f64) -> f64 {
    if 2.0 * std::f64::consts::PI * t > l * l {
        circle_heat_kernel_dual(t, z, l)
    } else {
        circle_heat_kernel_images(t, z, l)
    }
}

fn circle_heat_kernel_images(t: f64, z: f64, l: f64) -> f64 {
    let z = minimal_lift_1d(z, l);
    let norm = (2.0 * std::f64::consts::PI * t).sqrt().recip();
    let mut sum = (-(z * z) / (2.0 * t)).exp();
    let mut k = 1i64;
    loop {
        let a = z + k as f64 * l;
        let b = z - k as f64 * l;
        let term = (-(a * a) / (2.0 * t)).exp() + (-(b * b) / (2.0 * t)).exp();
        sum += term;
        if term <= SERIES_EPS * sum || k > 10_000 {
            break;
        }
        k += 1;
    }
    norm * sum
}

fn circle_heat_kernel_dual(t: f64, z: f64, l: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut sum = 1.0;
    let mut n = 1u64;
    loop {
        let nf = n as f64;
        let decay = (-0.5 * (two_pi * nf / l).powi(2) * t).exp();
        sum += 2.0 * decay * (two_pi * nf * z / l).cos();
        if decay <= SERIES_EPS || n > 100_000 {
            break;
        }
        n += 1;
    }
    sum / l
}

/// Heat kernel `p_t(x, y)` of `½Δ` on the flat torus (a product of circle
/// kernels).
pub fn heat_kernel(spec: &TorusSpec, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    ensure(t.is_finite() && t > 0.0, || {
        format!("t must be positive and finite, got {t}")
    })?;
    spec.check_point(x, "x")?;
    spec.check_point(y, "y")?;
    Ok(x.iter()
        .zip(y)
        .zip(spec.side_lengths())
        .map(|((&xi, &yi), &l)| circle_heat_kernel(t, xi - yi, l))
        .product())
}

/// `p_t(x, x)`, which does not depend on `x`.
pub fn heat_kernel_diagonal(spec: &TorusSpec, t: f64) -> f64 {
    spec.side_lengths()
        .iter()
        .map(|&l| circle_heat_kernel(t, 0.0, l))
        .product()
}

/// Samples the lattice class `w` of a bridge whose minimal displacement is
/// `Δ`, with `P(w) ∝ exp(−|Δ + w·L|² / 2t)`.
///
/// The law factorizes over axes; each axis is sampled from its own truncated
/// discrete Gaussian, truncated once the remaining weight is below `1e-14` of
/// the accumulated mass.
pub fn sample_winding<R: Rng + ?Sized>(
    spec: &TorusSpec,
    t: f64,
    displacement: &[f64],
    rng: &mut R,
) -> Result<Vec<i64>> {
    ensure(t.is_finite() && t > 0.0, || {
        format!("t must be positive and finite, got {t}")
    })?;
    spec.check_point(displacement, "displacement")?;
    Ok(displacement
        .iter()
        .zip(spec.side_lengths())
        .map(|(&z, &l)| sample_winding_1d(t, minimal_lift_1d(z, l), l, rng))
        .collect())
}

/// Weights `exp(−((δ + kL)² − δ²)/2t)` for `k = 0, ±1, ±2, …` up to the
/// truncation radius, paired with their `k`.
pub(crate) fn winding_weights_1d(t: f64, delta: f64, l: f64) -> Vec<(i64, f64)> {
    let weight = |k: i64| {
        let a = delta + k as f64 * l;
        (-(a * a - delta * delta) / (2.0 * t)).exp()
    };
    let mut out = vec![(0i64, 1.0)];
    let mut total = 1.0;
    let mut k = 1i64;
    loop {
        let wp = weight(k);
        let wm = weight(-k);
        out.push((k, wp));
        out.push((-k, wm));
        total += wp + wm;
        // Beyond |δ| ≤ L/2 the weights decrease monotonically in |k| and the
        // remaining tail is dominated by a geometric series of the last term.
        if wp + wm <= 1e-14 * total || k > 1_000_000 {
            break;
        }
        k += 1;
    }
    out
}

fn sample_winding_1d<R: Rng + ?Sized>(t: f64, delta: f64, l: f64, rng: &mut R) -> i64 {
    // Fast path: both neighbouring classes carry less than 1e-300 relative mass.
    let near = (l - delta.abs()).powi(2) - delta * delta;
    if near / (2.0 * t) > 690.0 {
        return 0;
    }
    let weights = winding_weights_1d(t, delta, l);
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(k, w) in &weights {
        if u < w {
            return k;
        }
        u -= w;
    }
    0
}

/// Step-count policy `N = max(N_min, ceil(t / h₀))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepsPolicy {
    pub n_min: usize,
    pub h0: f64,
}

impl Default for StepsPolicy {
    fn default() -> Self {
        Self { n_min: 64, h0: 1e-4 }
    }
}

impl StepsPolicy {
    pub fn steps_for(&self, t: f64) -> usize {
        let by_h = (t / self.h0).ceil();
        let by_h = if by_h.is_finite() && by_h > 0.0 {
            by_h as usize
        } else {
            0
        };
        by_h.max(self.n_min).max(2)
    }
}

/// A time-discretized Brownian bridge (a loop when its endpoints coincide on
/// the torus), stored as lifted points on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopPath {
    duration: f64,
    dim: usize,
    base_point: Vec<f64>,
    /// Flattened `(N + 1) × d` lifted coordinates.
    lifted: Vec<f64>,
    winding: Vec<i64>,
}

impl LoopPath {
    /// Assembles a path from raw parts. `lifted` holds `N + 1 ≥ 3` points of
    /// dimension `dim`; `winding` is the lattice class of the path.
    pub fn from_parts(duration: f64, base_point: Vec<f64>, lifted: Vec<f64>, winding: Vec<i64>) -> Result<Self> {
        let dim = base_point.len();
        ensure(duration.is_finite() && duration > 0.0, || {
            format!("duration must be positive, got {duration}")
        })?;
        ensure((2..=3).contains(&dim), || format!("unsupported dimension {dim}"))?;
        ensure(winding.len() == dim, || "winding dimension mismatch".into())?;
        ensure(lifted.len().is_multiple_of(dim) && lifted.len() / dim >= 3, || {
            "lifted points must hold at least 3 points of the path dimension".into()
        })?;
        Ok(Self {
            duration,
            dim,
            base_point,
            lifted,
            winding,
        })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.lifted.len() / self.dim - 1
    }

    pub fn base_point(&self) -> &[f64] {
        &self.base_point
    }

    pub fn winding(&self) -> &[i64] {
        &self.winding
    }

    pub fn lifted_points(&self) -> &[f64] {
        &self.lifted
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.lifted[i * self.dim..(i + 1) * self.dim]
    }

    /// Lifted displacement `y_N − y_0`.
    pub fn displacement(&self) -> Vec<f64> {
        let n = self.n_steps();
        (0..self.dim).map(|j| self.point(n)[j] - self.point(0)[j]).collect()
    }

    /// True when `y_N − y_0` equals the lattice vector of the winding.
    pub fn is_closed(&self, spec: &TorusSpec) -> bool {
        let shift = spec.lattice_vector(&self.winding);
        self.displacement()
            .iter()
            .zip(&shift)
            .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()))
    }

    /// The same polygon traversed backwards.
    pub fn reversed(&self) -> LoopPath {
        let n = self.n_steps();
        let mut lifted = Vec::with_capacity(self.lifted.len());
        for i in (0..=n).rev() {
            lifted.extend_from_slice(self.point(i));
        }
        let base = lifted[..self.dim].to_vec();
        LoopPath {
            duration: self.duration,
            dim: self.dim,
            base_point: base,
            lifted,
            winding: self.winding.iter().map(|w| -w).collect(),
        }
    }

    /// Closed loop re-rooted at grid index `k` (cyclic rotation of the grid).
    pub fn rerooted(&self, k: usize) -> LoopPath {
        let n = self.n_steps();
        let k = k % n;
        let shift = self.displacement();
        let mut lifted = Vec::with_capacity(self.lifted.len());
        for i in k..=n {
            lifted.extend_from_slice(self.point(i));
        }
        for i in 1..=k {
            lifted.extend(self.point(i).iter().zip(&shift).map(|(a, s)| a + s));
        }
        let base = self.point(k).to_vec();
        LoopPath {
            duration: self.duration,
            dim: self.dim,
            base_point: base,
            lifted,
            winding: self.winding.clone(),
        }
    }
}

fn fill_bridge<R: Rng + ?Sized>(start: &[f64], end: &[f64], t: f64, n_steps: usize, rng: &mut R) -> Vec<f64> {
    let d = start.len();
    let h = t / n_steps as f64;
    let sd = h.sqrt();
    let mut lifted = vec![0.0; (n_steps + 1) * d];
    // Free Brownian motion from 0 on the grid.
    for i in 1..=n_steps {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            lifted[i * d + j] = lifted[(i - 1) * d + j] + sd * z;
        }
    }
    // Pin: B_i = W_i − (i/N)(W_N − (end − start)) + start.
    let w_end: Vec<f64> = lifted[n_steps * d..].to_vec();
    for i in 0..=n_steps {
        let frac = i as f64 / n_steps as f64;
        for j in 0..d {
            lifted[i * d + j] += start[j] - frac * (w_end[j] - (end[j] - start[j]));
        }
    }
    lifted[n_steps * d..].copy_from_slice(end);
    lifted[..d].copy_from_slice(start);
    lifted
}

/// Exact Gaussian bridge from `x` to `y` on the torus over `n_steps` uniform
/// steps: samples the lattice class, then a bridge in `R^d` from `x` to
/// `x + Δ + w·L` with `Δ` the minimal lift of `y − x`.
pub fn sample_bridge<R: Rng + ?Sized>(
    spec: &TorusSpec,
    t: f64,
    x: &[f64],
    y: &[f64],
    n_steps: usize,
    rng: &mut R,
) -> Result<LoopPath> {
    ensure(n_steps >= 2, || format!("n_steps must be ≥ 2, got {n_steps}"))?;
    spec.check_point(x, "x")?;
    spec.check_point(y, "y")?;
    let start = spec.wrap(x);
    let diff: Vec<f64> = y.iter().zip(&start).map(|(a, b)| a - b).collect();
    let winding = sample_winding(spec, t, &diff, rng)?;
    bridge_in_class(spec, t, &start, &diff, winding, n_steps, rng)
}

/// Bridge from `x` to `y` conditioned on the lattice class `winding`
/// (relative to the minimal lift of `y − x`). With zero winding and `x = y`
/// this is a contractible loop, as needed by lift-defined connections.
pub fn sample_bridge_in_class<R: Rng + ?Sized>(
    spec: &TorusSpec,
    t: f64,
    x: &[f64],
    y: &[f64],
    winding: &[i64],
    n_steps: usize,
    rng: &mut R,
) -> Result<LoopPath> {
    ensure(t.is_finite() && t > 0.0, || {
        format!("t must be positive and finite, got {t}")
    })?;
    ensure(n_steps >= 2, || format!("n_steps must be ≥ 2, got {n_steps}"))?;
    spec.check_point(x, "x")?;
    spec.check_point(y, "y")?;
    ensure(winding.len() == spec.dim(), || "winding dimension mismatch".into())?;
    let start = spec.wrap(x);
    let diff: Vec<f64> = y.iter().zip(&start).map(|(a, b)| a - b).collect();
    bridge_in_class(spec, t, &start, &diff, winding.to_vec(), n_steps, rng)
}

/// Free Brownian motion from `x` for time `t` on `n_steps` uniform steps, as
/// lifted points (`(n_steps + 1)·d` coordinates, starting at the wrapped `x`).
pub fn sample_free_path<R: Rng + ?Sized>(
    spec: &TorusSpec,
    t: f64,
    x: &[f64],
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    ensure(t.is_finite() && t > 0.0, || {
        format!("t must be positive and finite, got {t}")
    })?;
    ensure(n_steps >= 1, || "n_steps must be ≥ 1".into())?;
    spec.check_point(x, "x")?;
    let d = spec.dim();
    let sd = (t / n_steps as f64).sqrt();
    let mut points = spec.wrap(x);
    points.reserve(n_steps * d);
    for i in 1..=n_steps {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            let prev = points[(i - 1) * d + j];
            points.push(prev + sd * z);
        }
    }
    Ok(points)
}

fn bridge_in_class<R: Rng + ?Sized>(
    spec: &TorusSpec,
    t: f64,
    start: &[f64],
    diff: &[f64],
    winding: Vec<i64>,
    n_steps: usize,
    rng: &mut R,
) -> Result<LoopPath> {
    let delta = spec.minimal_lift(diff);
    let shift = spec.lattice_vector(&winding);
    let end: Vec<f64> = start
        .iter()
        .zip(&delta)
        .zip(&shift)
        .map(|((s, d), w)| s + d + w)
        .collect();
    let lifted = fill_bridge(start, &end, t, n_steps, rng);
    Ok(LoopPath {
        duration: t,
        dim: spec.dim(),
        base_point: start.to_vec(),
        lifted,
        winding,
    })
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum MassKind {
    Constant(f64),
    Field(ScalarFn),
}

/// Nonnegative killing rate `m` on the torus.
#[derive(Clone)]
pub struct MassField {
    kind: MassKind,
    lower_bound: f64,
    label: String,
}

impl fmt::Debug for MassField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MassField")
            .field("label", &self.label)
            .field("lower_bound", &self.lower_bound)
            .finish()
    }
}

impl MassField {
    pub fn constant(c: f64) -> Result<Self> {
        ensure(c.is_finite() && c >= 0.0, || format!("mass must be ≥ 0, got {c}"))?;
        Ok(Self {
            kind: MassKind::Constant(c),
            lower_bound: c,
            label: format!("constant:{c}"),
        })
    }

    /// A periodic mass field with a known lower bound `min m ≥ lower_bound ≥ 0`.
    pub fn field<F>(f: F, lower_bound: f64, label: impl Into<String>) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        ensure(lower_bound.is_finite() && lower_bound >= 0.0, || {
            format!("lower bound must be ≥ 0, got {lower_bound}")
        })?;
        Ok(Self {
            kind: MassKind::Field(Arc::new(f)),
            lower_bound,
            label: label.into(),
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            MassKind::Constant(c) => *c,
            MassKind::Field(f) => f(x),
        }
    }

    pub fn is_identically_zero(&self) -> bool {
        matches!(self.kind, MassKind::Constant(c) if c == 0.0)
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self.kind {
            MassKind::Constant(c) => Some(c),
            MassKind::Field(_) => None,
        }
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Checks nonnegativity (and the declared lower bound) on a `n^d` grid.
    pub fn validate_on_grid(&self, spec: &TorusSpec, n: usize) -> Result<()> {
        let d = spec.dim();
        let total = n.pow(d as u32);
        let mut x = vec![0.0; d];
        for idx in 0..total {
            let mut r = idx;
            for (xj, l) in x.iter_mut().zip(spec.side_lengths()) {
                *xj = (r % n) as f64 / n as f64 * l;
                r /= n;
            }
            let v = self.eval(&x);
            ensure(v.is_finite() && v >= self.lower_bound - 1e-12 && v >= 0.0, || {
                format!("mass field {} takes value {v} at {x:?}", self.label)
            })?;
        }
        Ok(())
    }
}

/// Trapezoidal approximation of `∫_0^t m(W_s) ds` along the path.
pub fn mass_integral(path: &LoopPath, m: &MassField) -> f64 {
    if let Some(c) = m.constant_value() {
        return c * path.duration();
    }
    let n = path.n_steps();
    let h = path.duration() / n as f64;
    let inner: f64 = (1..n).map(|i| m.eval(path.point(i))).sum();
    h * (0.5 * m.eval(path.point(0)) + inner + 0.5 * m.eval(path.point(n)))
}

/// Re-clocks a 2-dimensional loop by `τ̂(s) = ∫_0^s e^{2f(ℓ_u)} du`, re-roots it
/// at a uniform point of the new clock and re-grids it to `N` uniform steps of
/// the new clock by linear interpolation of the lifted points.
pub fn conformal_reparam<F, R>(path: &LoopPath, f: F, rng: &mut R) -> Result<LoopPath>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if path.dim() != 2 {
        return Err(Error::UnsupportedDimension(path.dim()));
    }
    let n = path.n_steps();
    let d = path.dim();
    let h = path.duration() / n as f64;
    let weights: Vec<f64> = (0..=n).map(|i| (2.0 * f(path.point(i))).exp()).collect();
    let mut clock = vec![0.0; n + 1];
    for i in 1..=n {
        clock[i] = clock[i - 1] + 0.5 * h * (weights[i - 1] + weights[i]);
    }
    let total = clock[n];
    let theta = rng.gen::<f64>() * total;
    let shift = path.displacement();

    let locate = |c: f64| -> Vec<f64> {
        // Clock value in [0, total]; returns the interpolated lifted point.
        let i = match clock.binary_search_by(|v| v.total_cmp(&c)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        };
        let span = clock[i + 1] - clock[i];
        let frac = if span > 0.0 {
            ((c - clock[i]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = path.point(i);
        let b = path.point(i + 1);
        (0..d).map(|j| a[j] + frac * (b[j] - a[j])).collect()
    };

    let mut lifted = Vec::with_capacity((n + 1) * d);
    for k in 0..n {
        let c = theta + k as f64 * total / n as f64;
        if c < total {
            lifted.extend(locate(c));
        } else {
            lifted.extend(locate(c - total).iter().zip(&shift).map(|(a, s)| a + s));
        }
    }
    let first: Vec<f64> = lifted[..d].to_vec();
    lifted.extend(first.iter().zip(&shift).map(|(a, s)| a + s));
    Ok(LoopPath {
        duration: total,
        dim: d,
        base_point: first,
        lifted,
        winding: path.winding().to_vec(),
    })
}
