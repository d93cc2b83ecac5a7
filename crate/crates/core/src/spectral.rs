//! Exact Fourier-mode spectra of `L = ½∇*∇ + m₀` for constant connections.
//!
//! On the mode `e^{2πi n·x/L}·v` the operator acts by the Hermitian matrix
//! `M_n = m₀·I − ½ Σ_j (2πi n_j/L_j·I + a_j)²`. Mode sums are truncated to a
//! box `|n_j| ≤ N_j` chosen from a certified floor `t_floor`; every heat-type
//! quantity is returned with a rigorous bound on the discarded modes, using
//! `λ_min(M_n) ≥ m₀ + ½ Σ_j (2π|n_j|/L_j − ‖a_j‖)₊²`.

use serde::{Deserialize, Serialize};

use crate::connection::ConnectionSpec;
use crate::error::{ensure, Error, Result};
use crate::geometry::TorusSpec;
use crate::gff::Section;
use crate::linalg::{self, CMat, C64, I};
use crate::quadrature;

/// Default certified floor for heat-type sums.
pub const DEFAULT_T_FLOOR: f64 = 1e-3;

/// Exponent `c` such that the per-axis truncation weight at `t_floor` is `e^{-c}`.
const TRUNCATION_EXPONENT: f64 = 40.0;

/// A value with an absolute error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certified {
    pub value: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct Mode {
    pub n: Vec<i64>,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMat,
}

#[derive(Debug, Clone)]
pub struct SpectralModel {
    torus: TorusSpec,
    conn: ConnectionSpec,
    coefficients: Vec<CMat>,
    coefficient_norms: Vec<f64>,
    mass0: f64,
    t_floor: f64,
    cutoffs: Vec<i64>,
    modes: Vec<Mode>,
    /// All eigenvalues over the box, ascending.
    eigenvalues: Vec<f64>,
}

/// Neumaier-compensated sum.
#[derive(Default, Clone, Copy)]
struct Compensated {
    sum: f64,
    c: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

impl SpectralModel {
    pub fn new(torus: &TorusSpec, conn: &ConnectionSpec, mass0: f64, t_floor: f64) -> Result<Self> {
        ensure(mass0.is_finite() && mass0 > 0.0, || {
            format!("m₀ must be positive, got {mass0}")
        })?;
        ensure(t_floor.is_finite() && t_floor > 0.0, || {
            format!("t_floor must be positive, got {t_floor}")
        })?;
        ensure(conn.dim() == torus.dim(), || {
            "connection and torus dimensions differ".into()
        })?;
        let coefficients = conn
            .constant_coefficients()
            .ok_or_else(|| Error::InvalidInput("spectral oracle requires a constant-coefficient connection".into()))?;
        let coefficient_norms: Vec<f64> = coefficients.iter().map(linalg::op_norm).collect();
        let x = (2.0 * TRUNCATION_EXPONENT / t_floor).sqrt();
        let cutoffs: Vec<i64> = torus
            .side_lengths()
            .iter()
            .zip(&coefficient_norms)
            .map(|(&l, &b)| ((x + b) * l / (2.0 * std::f64::consts::PI)).ceil() as i64 + 1)
            .collect();

        let mut model = Self {
            torus: torus.clone(),
            conn: conn.clone(),
            coefficients,
            coefficient_norms,
            mass0,
            t_floor,
            cutoffs,
            modes: Vec::new(),
            eigenvalues: Vec::new(),
        };
        let total: usize = model.cutoffs.iter().map(|&c| (2 * c + 1) as usize).product();
        let mut modes = Vec::with_capacity(total);
        for idx in 0..total {
            let n = model.mode_at(idx);
            let (vals, vecs) = linalg::hermitian_eigen(&model.mode_matrix(&n));
            modes.push(Mode {
                n,
                eigenvalues: vals,
                eigenvectors: vecs,
            });
        }
        let mut eigenvalues: Vec<f64> = modes.iter().flat_map(|m| m.eigenvalues.iter().copied()).collect();
        eigenvalues.sort_by(f64::total_cmp);
        model.modes = modes;
        model.eigenvalues = eigenvalues;
        Ok(model)
    }

    pub fn with_default_floor(torus: &TorusSpec, conn: &ConnectionSpec, mass0: f64) -> Result<Self> {
        Self::new(torus, conn, mass0, DEFAULT_T_FLOOR)
    }

    fn mode_at(&self, mut idx: usize) -> Vec<i64> {
        self.cutoffs
            .iter()
            .map(|&c| {
                let w = (2 * c + 1) as usize;
                let k = (idx % w) as i64 - c;
                idx /= w;
                k
            })
            .collect()
    }

    fn index_of(&self, n: &[i64]) -> Option<usize> {
        if n.len() != self.cutoffs.len() {
            return None;
        }
        let mut idx = 0usize;
        let mut stride = 1usize;
        for (&k, &c) in n.iter().zip(&self.cutoffs) {
            if k.abs() > c {
                return None;
            }
            idx += (k + c) as usize * stride;
            stride *= (2 * c + 1) as usize;
        }
        Some(idx)
    }

    pub fn torus(&self) -> &TorusSpec {
        &self.torus
    }

    pub fn connection(&self) -> &ConnectionSpec {
        &self.conn
    }

    pub fn rank(&self) -> usize {
        self.conn.rank()
    }

    pub fn mass0(&self) -> f64 {
        self.mass0
    }

    pub fn t_floor(&self) -> f64 {
        self.t_floor
    }

    pub fn mode_cutoff(&self) -> &[i64] {
        &self.cutoffs
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn mode(&self, n: &[i64]) -> Option<&Mode> {
        self.index_of(n).map(|i| &self.modes[i])
    }

    /// Smallest eigenvalue of `L` (attained inside the box, since the bound
    /// outside exceeds `m₀ + 40/t_floor`).
    pub fn spectral_gap(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `M_n = m₀·I − ½ Σ_j (2πi n_j/L_j·I + a_j)²`.
    pub fn mode_matrix(&self, n: &[i64]) -> CMat {
        let r = self.rank();
        let mut m = linalg::identity(r) * C64::new(self.mass0, 0.0);
        for ((a, &k), &l) in self.coefficients.iter().zip(n).zip(self.torus.side_lengths()) {
            let b = linalg::identity(r) * (I * (2.0 * std::f64::consts::PI * k as f64 / l)) + a;
            m -= &b * &b * C64::new(0.5, 0.0);
        }
        (&m + m.adjoint()) * C64::new(0.5, 0.0)
    }

    /// Bound on `Σ_{n ∉ box} tr e^{−t M_n}`.
    pub fn truncation_tail(&self, t: f64) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let c = 0.5 * t;
        let mut log_ratio = 0.0;
        for ((&n_max, &l), &b) in self
            .cutoffs
            .iter()
            .zip(self.torus.side_lengths())
            .zip(&self.coefficient_norms)
        {
            let alpha = two_pi / l;
            let g = |k: i64| (-c * (alpha * k.abs() as f64 - b).max(0.0).powi(2)).exp();
            let inside: f64 = (-n_max..=n_max).map(g).sum();
            let x = alpha * n_max as f64 - b;
            // Σ_{k>N} e^{−c(αk−β)²} ≤ (1/α)∫_x^∞ e^{−cu²}du ≤ e^{−cx²}/(2αcx).
            let outside = 2.0 * (-c * x * x).exp() / (2.0 * alpha * c * x);
            log_ratio += (outside / inside).ln_1p();
        }
        let inside_total: f64 = self
            .cutoffs
            .iter()
            .zip(self.torus.side_lengths())
            .zip(&self.coefficient_norms)
            .map(|((&n_max, &l), &b)| {
                let alpha = two_pi / l;
                (-n_max..=n_max)
                    .map(|k| (-c * (alpha * k.abs() as f64 - b).max(0.0).powi(2)).exp())
                    .sum::<f64>()
            })
            .product();
        self.rank() as f64 * (-t * self.mass0).exp() * inside_total * log_ratio.exp_m1()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        ensure(t.is_finite(), || format!("t must be finite, got {t}"))?;
        if t < self.t_floor {
            return Err(Error::BelowCertifiedFloor { t, floor: self.t_floor });
        }
        Ok(())
    }

    /// `Tr e^{−tL}` with a truncation bound.
    pub fn heat_trace(&self, t: f64) -> Result<Certified> {
        self.check_time(t)?;
        Ok(Certified {
            value: self.box_trace(t),
            error: self.truncation_tail(t),
        })
    }

    fn box_trace(&self, t: f64) -> f64 {
        let mut acc = Compensated::default();
        // Ascending eigenvalues: stop once the remaining terms are below
        // rounding of the accumulated sum.
        let total = self.eigenvalues.len();
        for (i, &lam) in self.eigenvalues.iter().enumerate() {
            let term = (-t * lam).exp();
            if term * (total - i) as f64 <= 1e-18 * acc.value() {
                break;
            }
            acc.add(term);
        }
        acc.value()
    }

    /// Twisted heat kernel `K_t(x, y)` as an `n×n` matrix, with a bound on the
    /// entrywise truncation error.
    pub fn heat_kernel_twisted(&self, t: f64, x: &[f64], y: &[f64]) -> Result<(CMat, f64)> {
        self.check_time(t)?;
        ensure(x.len() == self.torus.dim() && y.len() == self.torus.dim(), || {
            "point dimension mismatch".into()
        })?;
        let r = self.rank();
        let mut k = CMat::zeros(r, r);
        let two_pi = 2.0 * std::f64::consts::PI;
        for mode in &self.modes {
            let phase: f64 = mode
                .n
                .iter()
                .zip(x.iter().zip(y))
                .zip(self.torus.side_lengths())
                .map(|((&n, (&xi, &yi)), &l)| two_pi * n as f64 * (xi - yi) / l)
                .sum();
            let heat = linalg::apply_spectral(&mode.eigenvalues, &mode.eigenvectors, |lam| (-t * lam).exp());
            k += heat * C64::from_polar(1.0, phase);
        }
        let v = self.torus.volume();
        Ok((k / C64::new(v, 0.0), self.truncation_tail(t) / v))
    }

    fn check_section(&self, s: &Section) -> Result<()> {
        if s.rank() != self.rank() {
            return Err(Error::RankMismatch {
                expected: self.rank(),
                found: s.rank(),
            });
        }
        for (n, _) in s.modes() {
            if self.index_of(n).is_none() {
                return Err(Error::ModeOutOfBand(n.clone()));
            }
        }
        Ok(())
    }

    /// `Σ_n ŝ₁(n)* f(M_n) ŝ₂(n)` over the modes of `s₂`.
    fn spectral_pairing(&self, s1: &Section, s2: &Section, f: impl Fn(f64) -> f64) -> Result<C64> {
        self.check_section(s1)?;
        self.check_section(s2)?;
        let mut total = C64::new(0.0, 0.0);
        for (n, v2) in s2.modes() {
            let Some(v1) = s1.coefficient(n) else { continue };
            let mode = &self.modes[self.index_of(n).expect("checked")];
            let w = CMat::from_column_slice(v2.len(), 1, v2);
            let fw = linalg::apply_spectral(&mode.eigenvalues, &mode.eigenvectors, &f) * w;
            total += v1.iter().zip(fw.iter()).map(|(a, b)| a.conj() * b).sum::<C64>();
        }
        Ok(total)
    }

    /// Green pairing `⟨s₁, L⁻¹ s₂⟩ = Σ_n ŝ₁(n)* M_n⁻¹ ŝ₂(n)`.
    pub fn green_pairing(&self, s1: &Section, s2: &Section) -> Result<C64> {
        self.spectral_pairing(s1, s2, |lam| 1.0 / lam)
    }

    /// Heat pairing `⟨s₁, e^{−tL} s₂⟩`.
    pub fn heat_pairing(&self, t: f64, s1: &Section, s2: &Section) -> Result<C64> {
        ensure(t.is_finite() && t >= 0.0, || format!("t must be ≥ 0, got {t}"))?;
        self.spectral_pairing(s1, s2, |lam| (-t * lam).exp())
    }

    /// `L s`, mode by mode.
    pub fn apply_operator(&self, s: &Section) -> Result<Section> {
        self.check_section(s)?;
        let modes = s
            .modes()
            .iter()
            .map(|(n, v)| {
                let w = CMat::from_column_slice(v.len(), 1, v);
                let mv = self.mode_matrix(n) * w;
                (n.clone(), mv.iter().copied().collect())
            })
            .collect();
        Section::new(s.rank(), s.dim(), modes, false)
    }
}

/// `(1/n₁)ζ'₁(0) − (1/n₀)ζ'₀(0) = ∫_0^∞ [Tr₁(t)/n₁ − Tr₀(t)/n₀] dt/t`.
///
/// The integral is split at `t₀ = max(t_floor)`. Above `t₀` it is computed by
/// adaptive quadrature in `ln t` up to `T` with an exponential tail bound.
/// Below `t₀`, `q(t) = t^{d/2−2}·g(t)` (with `g` the integrand numerator) is
/// smooth; it is fitted by a quadratic through `t₀, 2t₀, 4t₀` and integrated in
/// closed form. The certificate adds the quadratic-vs-linear fit difference,
/// the quadrature error, the truncation tails and the `[T, ∞)` tail.
pub fn zeta_prime_diff(model0: &SpectralModel, model1: &SpectralModel) -> Result<Certified> {
    ensure_compatible(model0, model1)?;
    let n0 = model0.rank() as f64;
    let n1 = model1.rank() as f64;
    let d = model0.torus.dim() as f64;
    let t0 = model0.t_floor.max(model1.t_floor);
    let g = |t: f64| model1.box_trace(t) / n1 - model0.box_trace(t) / n0;

    let lam = model0.spectral_gap().min(model1.spectral_gap());
    let big_t = t0 + 45.0 / lam;
    let large = quadrature::integrate(|u| g(u.exp()), t0.ln(), big_t.ln(), 1e-13, 1e-15);
    let beyond = (model1.box_trace(big_t) / n1 + model0.box_trace(big_t) / n0) / (lam * big_t);
    let truncation = (model1.truncation_tail(t0) / n1 + model0.truncation_tail(t0) / n0) * (big_t / t0).ln();

    let ts = [t0, 2.0 * t0, 4.0 * t0];
    let q: Vec<f64> = ts.iter().map(|&t| t.powf(d / 2.0 - 2.0) * g(t)).collect();
    // Quadratic through the three points, in the variable s = t/t₀ ∈ {1, 2, 4}.
    let (c0, c1, c2) = quadratic_through([1.0, 2.0, 4.0], [q[0], q[1], q[2]]);
    let lin1 = q[1] - q[0];
    let lin0 = q[0] - lin1;
    let e = 2.0 - d / 2.0;
    let remainder = |cs: &[f64]| -> f64 {
        cs.iter()
            .enumerate()
            .map(|(k, &c)| c * t0.powf(e) / (k as f64 + e))
            .sum()
    };
    let small3 = remainder(&[c0, c1, c2]);
    let small2 = remainder(&[lin0, lin1]);

    Ok(Certified {
        value: large.value + small3,
        error: large.error + (small3 - small2).abs() + beyond + truncation,
    })
}

/// Coefficients of `c0 + c1·s + c2·s²` through three points.
fn quadratic_through(s: [f64; 3], y: [f64; 3]) -> (f64, f64, f64) {
    let d01 = (y[1] - y[0]) / (s[1] - s[0]);
    let d12 = (y[2] - y[1]) / (s[2] - s[1]);
    let c2 = (d12 - d01) / (s[2] - s[0]);
    let c1 = d01 - c2 * (s[0] + s[1]);
    let c0 = y[0] - c1 * s[0] - c2 * s[0] * s[0];
    (c0, c1, c2)
}

fn ensure_compatible(a: &SpectralModel, b: &SpectralModel) -> Result<()> {
    if a.torus != b.torus {
        return Err(Error::IncompatibleModels("models live on different tori".into()));
    }
    if a.mass0 != b.mass0 {
        return Err(Error::IncompatibleModels(format!(
            "masses differ: {} vs {}",
            a.mass0, b.mass0
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connection::{su2_constant, FieldType};
    use crate::geometry::heat_kernel;
    use std::f64::consts::PI;

    fn unit2() -> TorusSpec {
        TorusSpec::unit(2).unwrap()
    }

    fn abelian(theta: Vec<f64>) -> SpectralModel {
        let s = unit2();
        SpectralModel::with_default_floor(&s, &ConnectionSpec::flat_abelian(&s, theta).unwrap(), 1.0).unwrap()
    }

    /// `K_1(x) = ∫_0^∞ e^{−x cosh u} cosh u du`.
    fn bessel_k1(x: f64) -> f64 {
        quadrature::integrate(|u| (-x * u.cosh()).exp() * u.cosh(), 0.0, 40.0, 1e-14, 0.0).value
    }

    /// Image-sum oracle for flat abelian connections on the unit 2-torus:
    /// Σ_{k≠0} (cos 2πθ·k − 1)·(1/π)·√(2m)/|k|·K_1(|k|√(2m)).
    fn abelian_oracle_2d(theta: [f64; 2], m: f64) -> f64 {
        let mut s = 0.0;
        for k1 in -20i64..=20 {
            for k2 in -20i64..=20 {
                if k1 == 0 && k2 == 0 {
                    continue;
                }
                let r = ((k1 * k1 + k2 * k2) as f64).sqrt();
                let c = (2.0 * PI * (theta[0] * k1 as f64 + theta[1] * k2 as f64)).cos() - 1.0;
                s += c / PI * (2.0 * m).sqrt() / r * bessel_k1(r * (2.0 * m).sqrt());
            }
        }
        s
    }

    #[test]
    fn mode_matrices_are_hermitian_positive() {
        let s = unit2();
        let m = SpectralModel::new(&s, &su2_constant(&s, 0.5).unwrap(), 1.0, 1e-2).unwrap();
        for mode in m.modes().iter().step_by(7) {
            let mm = m.mode_matrix(&mode.n);
            assert!((&mm - mm.adjoint()).norm() < 1e-12);
            assert!(mode.eigenvalues[0] > 0.0);
            // Closed form for this connection: m + 1/4 + 2π²|n|² ± π|n|.
            let n2 = (mode.n[0] * mode.n[0] + mode.n[1] * mode.n[1]) as f64;
            let base = 1.25 + 2.0 * PI * PI * n2;
            assert!((mode.eigenvalues[0] - (base - PI * n2.sqrt())).abs() < 1e-9 * base);
            assert!((mode.eigenvalues[1] - (base + PI * n2.sqrt())).abs() < 1e-9 * base);
        }
        let flat = abelian(vec![0.0, 0.0]);
        assert!((flat.spectral_gap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn abelian_modes_are_shifted_lattice() {
        let m = abelian(vec![0.3, -0.1]);
        let mode = m.mode(&[2, -1]).unwrap();
        let expected = 1.0 + 0.5 * (2.0 * PI).powi(2) * ((2.3f64).powi(2) + (1.1f64).powi(2));
        assert!((mode.eigenvalues[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn heat_trace_examples() {
        let m0 = abelian(vec![0.0, 0.0]);
        let t = 30.0;
        let tr = m0.heat_trace(t).unwrap();
        assert!((tr.value / (-t).exp() - 1.0).abs() < 1e-12);

        let m1 = abelian(vec![0.3, 0.0]);
        let diff = m1.heat_trace(1.0).unwrap().value - m0.heat_trace(1.0).unwrap().value;
        assert!(diff < 0.0);
        // Direct mode sum in another order (axis-factorized).
        let axis = |th: f64| {
            (-60i64..=60)
                .map(|n| (-2.0 * PI * PI * (n as f64 + th).powi(2)).exp())
                .sum::<f64>()
        };
        let direct = (-1.0f64).exp() * (axis(0.3) * axis(0.0) - axis(0.0) * axis(0.0));
        assert!((diff - direct).abs() < 1e-12);

        // Weyl leading order at the floor.
        let tf = m0.t_floor();
        let weyl = tf * m0.heat_trace(tf).unwrap().value * 2.0 * PI;
        assert!((weyl - 1.0).abs() < 2e-3);
        assert!(matches!(m0.heat_trace(1e-4), Err(Error::BelowCertifiedFloor { .. })));
    }

    #[test]
    fn truncation_tail_bounds_actual_tail() {
        // Compare a model truncated at a coarse floor with one at a fine floor.
        let s = unit2();
        let conn = su2_constant(&s, 0.5).unwrap();
        let coarse = SpectralModel::new(&s, &conn, 1.0, 0.05).unwrap();
        let fine = SpectralModel::new(&s, &conn, 1.0, 1e-3).unwrap();
        for &t in &[0.05, 0.1, 0.5] {
            let a = coarse.heat_trace(t).unwrap();
            let b = fine.heat_trace(t).unwrap();
            assert!((b.value - a.value) <= a.error + 1e-12 * b.value);
            assert!(a.error < 1e-12 * a.value);
        }
        // At t below the floor the bound is still valid, just larger.
        let t = 0.01;
        let actual = fine.box_trace(t) - coarse.box_trace(t);
        assert!(actual <= coarse.truncation_tail(t));
    }

    #[test]
    fn zeta_diff_trivial_and_symmetric() {
        let m0 = abelian(vec![0.0, 0.0]);
        let z = zeta_prime_diff(&m0, &m0).unwrap();
        assert_eq!(z.value, 0.0);
        let a = zeta_prime_diff(&m0, &abelian(vec![0.3, 0.2])).unwrap();
        let b = zeta_prime_diff(&m0, &abelian(vec![-0.3, -0.2])).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        let c = zeta_prime_diff(&m0, &abelian(vec![1.3, -0.8])).unwrap();
        assert!((a.value - c.value).abs() < 1e-12);
    }

    #[test]
    fn zeta_diff_abelian_matches_bessel_oracle() {
        let m0 = abelian(vec![0.0, 0.0]);
        for theta in [[0.3, 0.0], [0.5, 0.0], [0.5, 0.5], [0.1, 0.35]] {
            let z = zeta_prime_diff(&m0, &abelian(theta.to_vec())).unwrap();
            let oracle = abelian_oracle_2d(theta, 1.0);
            assert!(
                (z.value - oracle).abs() < 1e-9 + z.error,
                "{theta:?}: {} vs {oracle} (cert {})",
                z.value,
                z.error
            );
            assert!(z.error < 1e-8);
        }
    }

    #[test]
    fn zeta_diff_split_self_consistency() {
        let s = unit2();
        let trivial = crate::connection::ConnectionSpec::trivial(&s, 1, FieldType::ComplexUnitary).unwrap();
        let su2 = su2_constant(&s, 0.5).unwrap();
        let theta = ConnectionSpec::flat_abelian(&s, vec![0.5, 0.5]).unwrap();
        for conn in [theta, su2] {
            let mut vals = Vec::new();
            for tf in [1e-3, 1e-4] {
                let a = SpectralModel::new(&s, &trivial, 1.0, tf).unwrap();
                let b = SpectralModel::new(&s, &conn, 1.0, tf).unwrap();
                vals.push(zeta_prime_diff(&a, &b).unwrap());
            }
            assert!((vals[0].value - vals[1].value).abs() <= vals[0].error + vals[1].error);
        }
    }

    #[test]
    fn zeta_diff_su2_value() {
        let s = unit2();
        let trivial = ConnectionSpec::trivial(&s, 1, FieldType::ComplexUnitary).unwrap();
        let a = SpectralModel::with_default_floor(&s, &trivial, 1.0).unwrap();
        let b = SpectralModel::with_default_floor(&s, &su2_constant(&s, 0.5).unwrap(), 1.0).unwrap();
        let z = zeta_prime_diff(&a, &b).unwrap();
        // Closed-form eigenvalues m + 1/4 + 2π²|n|² ± π|n| summed independently
        // on a composite Gauss grid in ln t over [1e-3, 60]; below 1e-3 the
        // integrand g(t)/t is affine in t to the precision needed.
        let tr = |t: f64| {
            let mut s = 0.0;
            for n1 in -160i64..=160 {
                for n2 in -160i64..=160 {
                    let r2 = (n1 * n1 + n2 * n2) as f64;
                    let base = 1.25 + 2.0 * PI * PI * r2;
                    let half = 0.5 * ((-t * (base - PI * r2.sqrt())).exp() + (-t * (base + PI * r2.sqrt())).exp());
                    s += half - (-t * (1.0 + 2.0 * PI * PI * r2)).exp();
                }
            }
            s
        };
        let t0: f64 = 1e-3;
        let nodes = quadrature::composite_gauss(t0.ln(), (60.0f64).ln(), 40, 8);
        let slope = (tr(2.0 * t0) / (2.0 * t0) - tr(t0) / t0) / t0;
        let head = tr(t0) - 0.5 * slope * t0 * t0;
        let oracle: f64 = head + nodes.iter().map(|&(u, w)| w * tr(u.exp())).sum::<f64>();
        assert!(
            (z.value - oracle).abs() < z.error + 1e-8,
            "{} vs {oracle} (cert {})",
            z.value,
            z.error
        );
        assert!((z.value - (-0.18738)).abs() < 1e-4);
        assert!(z.value < 0.0);
    }

    #[test]
    fn incompatible_models_rejected() {
        let s = unit2();
        let c = ConnectionSpec::flat_abelian(&s, vec![0.0, 0.0]).unwrap();
        let a = SpectralModel::new(&s, &c, 1.0, 1e-2).unwrap();
        let b = SpectralModel::new(&s, &c, 2.0, 1e-2).unwrap();
        assert!(matches!(zeta_prime_diff(&a, &b), Err(Error::IncompatibleModels(_))));
        let s2 = TorusSpec::new(vec![1.0, 2.0]).unwrap();
        let c2 = ConnectionSpec::flat_abelian(&s2, vec![0.0, 0.0]).unwrap();
        let d = SpectralModel::new(&s2, &c2, 1.0, 1e-2).unwrap();
        assert!(zeta_prime_diff(&a, &d).is_err());
    }

    #[test]
    fn twisted_kernel_reduces_to_scalar_kernel() {
        let s = unit2();
        let c = ConnectionSpec::trivial(&s, 2, FieldType::RealOrthogonal).unwrap();
        let m = SpectralModel::new(&s, &c, 1.0, 1e-2).unwrap();
        for &t in &[0.01, 0.2, 2.0] {
            let (k, err) = m.heat_kernel_twisted(t, &[0.1, 0.2], &[0.7, 0.9]).unwrap();
            let p = heat_kernel(&s, t, &[0.1, 0.2], &[0.7, 0.9]).unwrap() * (-t).exp();
            assert!((k[(0, 0)] - C64::new(p, 0.0)).norm() < 1e-10 + err);
            assert!((k[(1, 1)] - C64::new(p, 0.0)).norm() < 1e-10 + err);
            assert!(k[(0, 1)].norm() < 1e-12);
        }
    }

    #[test]
    fn twisted_kernel_trace_identity_and_abelian_images() {
        let s = unit2();
        let m = SpectralModel::new(&s, &su2_constant(&s, 0.5).unwrap(), 1.0, 1e-2).unwrap();
        let t = 0.3;
        let (k, _) = m.heat_kernel_twisted(t, &[0.4, 0.1], &[0.4, 0.1]).unwrap();
        let lhs = k.trace().re;
        let rhs = m.heat_trace(t).unwrap().value;
        assert!((lhs - rhs).abs() < 1e-12 * rhs);

        // Abelian: e^{−mt} Σ_k p_t(Δ_k) e^{+2πiθ·Δ_k}, Δ_k = y − x + k.
        let theta = [0.3, 0.0];
        let a = SpectralModel::new(
            &s,
            &ConnectionSpec::flat_abelian(&s, theta.to_vec()).unwrap(),
            1.0,
            1e-2,
        )
        .unwrap();
        let (x, y) = ([0.0, 0.0], [0.3, 0.4]);
        let (k, _) = a.heat_kernel_twisted(0.5, &x, &y).unwrap();
        let mut images = C64::new(0.0, 0.0);
        for k1 in -10..=10 {
            for k2 in -10..=10 {
                let d = [y[0] - x[0] + k1 as f64, y[1] - x[1] + k2 as f64];
                let p = (-(d[0] * d[0] + d[1] * d[1]) / 1.0).exp() / PI;
                images += C64::from_polar(p, 2.0 * PI * (theta[0] * d[0] + theta[1] * d[1]));
            }
        }
        images *= (-0.5f64).exp();
        assert!((k[(0, 0)] - images).norm() < 1e-12);
    }

    #[test]
    fn semigroup_property() {
        let s = unit2();
        let m = SpectralModel::new(&s, &su2_constant(&s, 0.5).unwrap(), 1.0, 1e-2).unwrap();
        let (a, b) = (0.2, 0.35);
        for mode in m.modes().iter().step_by(31) {
            let ea = linalg::apply_spectral(&mode.eigenvalues, &mode.eigenvectors, |l| (-a * l).exp());
            let eb = linalg::apply_spectral(&mode.eigenvalues, &mode.eigenvectors, |l| (-b * l).exp());
            let eab = linalg::apply_spectral(&mode.eigenvalues, &mode.eigenvectors, |l| (-(a + b) * l).exp());
            assert!((ea * eb - eab).norm() < 1e-12);
        }
    }

    #[test]
    fn green_pairing_examples() {
        let s = unit2();
        let m = SpectralModel::new(&s, &su2_constant(&s, 0.5).unwrap(), 1.0, 1e-2).unwrap();
        let v = vec![C64::new(0.3, 0.1), C64::new(-0.2, 0.5)];
        let s1 = Section::single_mode(vec![1, -2], v.clone()).unwrap();
        let g = m.green_pairing(&s1, &s1).unwrap();
        let minv = m.mode_matrix(&[1, -2]).try_inverse().unwrap();
        let w = CMat::from_column_slice(2, 1, &v);
        let expected = (w.adjoint() * minv * &w)[(0, 0)];
        assert!((g - expected).norm() < 1e-14);

        let mixed = Section::new(
            2,
            2,
            vec![
                (vec![0, 0], vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]),
                (vec![2, 1], vec![C64::new(0.0, 0.5), C64::new(0.2, 0.0)]),
                (vec![-1, 3], v.clone()),
            ],
            false,
        )
        .unwrap();
        let ls = m.apply_operator(&mixed).unwrap();
        let back = m.green_pairing(&mixed, &ls).unwrap();
        assert!((back - mixed.inner(&mixed)).norm() < 1e-12);

        // ∫_0^∞ ⟨s, e^{−tL} s⟩ dt in u = ln t.
        let integral = quadrature::integrate(
            |u| u.exp() * m.heat_pairing(u.exp(), &mixed, &mixed).unwrap().re,
            -30.0,
            5.0,
            1e-13,
            0.0,
        );
        let g = m.green_pairing(&mixed, &mixed).unwrap();
        assert!((integral.value - g.re).abs() < 1e-8);

        let far = Section::single_mode(vec![1000, 0], v).unwrap();
        assert!(matches!(m.green_pairing(&far, &far), Err(Error::ModeOutOfBand(_))));
    }

    #[test]
    fn field_connections_are_rejected() {
        let s = unit2();
        let f = crate::connection::levy_area_field(&s, 1.0).unwrap();
        assert!(SpectralModel::with_default_floor(&s, &f, 1.0).is_err());
    }
}
