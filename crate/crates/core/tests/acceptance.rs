//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! before asserting; run with `--nocapture` to see them all.

use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

use loopdet_core::connection::{holonomy, levy_area_field, su2_constant, trace_norm};
use loopdet_core::estimator::{
    conformal_comparison, estimate_partition_ratio, integral_form_estimate, moments_vs_t, ConformalReport,
    IntegralFormEstimate, IntegralGrid,
};
use loopdet_core::geometry::{heat_kernel, sample_bridge, sample_bridge_in_class, StepsPolicy};
use loopdet_core::gff::{annealed_weights, symanzik_moment, AnnealedMethod};
use loopdet_core::loopsoup::{campbell_expectation_check, CampbellReport};
use loopdet_core::rng::{par_replicas, stream};
use loopdet_core::spectral::zeta_prime_diff;
use loopdet_core::stats::{ComplexWelford, Welford};
use loopdet_core::validation::{run_suites, Suite};
use loopdet_core::{
    ConnectionEnsemble, ConnectionSpec, FieldType, MassField, ProductEstimate, Section, SoupConfig, SpectralModel,
    TorusSpec, C64,
};

const SIGMAS: f64 = 3.0;
const SOUP_REPLICAS: usize = 20_000;
/// |Q| = 1 for a flat line bundle, so the 1% target needs about 3.5e4 soups.
const ABELIAN_REPLICAS: usize = 40_000;
const TARGET_REL_STDERR: f64 = 0.01;
const DELTA: f64 = 1e-3;
const BIG_R: f64 = 20.0;
const FK_BRIDGES: usize = 1_000_000;
const MOMENT_BRIDGES: usize = 100_000;
const SLOPE_TOL_SECOND: f64 = 0.15;
const SLOPE_TOL_MEAN: f64 = 0.2;
const LEVY_BRIDGES: usize = 100_000;
const CAMPBELL_SAMPLES: usize = 1_000_000;
const SYMANZIK_SAMPLES: usize = 100_000;
const CONFORMAL_REPLICAS: usize = 4_000;
const PATHWISE_TOL: f64 = 1e-6;
const SUITE_BUDGET_SECS: f64 = 300.0;

fn report(name: &str, pass: bool, detail: String, start: Instant) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
    pass
}

fn unit2() -> TorusSpec {
    TorusSpec::unit(2).unwrap()
}

fn unit_mass() -> MassField {
    MassField::constant(1.0).unwrap()
}

fn line_bundle(s: &TorusSpec) -> ConnectionSpec {
    ConnectionSpec::trivial(s, 1, FieldType::ComplexUnitary).unwrap()
}

fn abelian(s: &TorusSpec, theta: [f64; 2]) -> ConnectionSpec {
    ConnectionSpec::flat_abelian(s, theta.to_vec()).unwrap()
}

/// `exp(ζ-difference)` and its certified error.
fn oracle(s: &TorusSpec, c0: &ConnectionSpec, c1: &ConnectionSpec) -> (f64, f64) {
    let a = SpectralModel::with_default_floor(s, c0, 1.0).unwrap();
    let b = SpectralModel::with_default_floor(s, c1, 1.0).unwrap();
    let z = zeta_prime_diff(&a, &b).unwrap();
    (z.value.exp(), z.value.exp() * z.error.exp_m1())
}

struct Case {
    estimate: ProductEstimate,
    integral: IntegralFormEstimate,
    oracle: f64,
    oracle_error: f64,
}

fn run_case(conn1: &ConnectionSpec, replicas: usize, seed: u64) -> Case {
    let s = unit2();
    let m = unit_mass();
    let c0 = line_bundle(&s);
    let cfg = SoupConfig::new(1.0, DELTA, BIG_R, seed).unwrap();
    let estimate = estimate_partition_ratio(&s, &cfg, &m, &c0, conn1, replicas).unwrap();
    let mut grid = IntegralGrid::new(DELTA, BIG_R, 12, 8).unwrap();
    grid.step_budget = Some(20_000_000);
    let integral = integral_form_estimate(
        &s,
        &m,
        &c0,
        conn1,
        &grid,
        100_000,
        1.0,
        StepsPolicy::default(),
        seed + 1,
    )
    .unwrap();
    let (oracle, oracle_error) = oracle(&s, &c0, conn1);
    Case {
        estimate,
        integral,
        oracle,
        oracle_error,
    }
}

fn abelian_case() -> &'static Case {
    static CASE: OnceLock<Case> = OnceLock::new();
    CASE.get_or_init(|| run_case(&abelian(&unit2(), [0.3, 0.0]), ABELIAN_REPLICAS, 101))
}

fn su2_case() -> &'static Case {
    static CASE: OnceLock<Case> = OnceLock::new();
    CASE.get_or_init(|| run_case(&su2_constant(&unit2(), 0.5).unwrap(), SOUP_REPLICAS, 202))
}

fn identity_check(name: &str, case: &Case, start: Instant) -> bool {
    let e = &case.estimate;
    let diff = (e.mean.re - case.oracle).abs();
    let tol = SIGMAS * e.stderr + e.bias_bound() + case.oracle_error;
    let rel = e.stderr / e.mean.norm();
    let pass = diff <= tol && e.mean.im.abs() <= SIGMAS * e.stderr && rel <= TARGET_REL_STDERR;
    report(
        name,
        pass,
        format!(
            "mean {:.5}{:+.5}i ± {:.5}, oracle {:.5}, |diff| {:.2e} ≤ {:.2e}, rel stderr {:.3}% ≤ {}%",
            e.mean.re,
            e.mean.im,
            e.stderr,
            case.oracle,
            diff,
            tol,
            100.0 * rel,
            100.0 * TARGET_REL_STDERR
        ),
        start,
    )
}

#[test]
fn abelian_determinant_identity() {
    let start = Instant::now();
    assert!(identity_check("abelian determinant identity", abelian_case(), start));
}

#[test]
fn non_abelian_determinant_identity() {
    let start = Instant::now();
    assert!(identity_check("non-abelian determinant identity", su2_case(), start));
}

#[test]
fn estimator_triangle() {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, case) in [("abelian", abelian_case()), ("su2", su2_case())] {
        let e = &case.estimate;
        let i = &case.integral;
        // (value, statistical error, deterministic bias)
        let soup = (e.mean.re, e.stderr, e.bias_bound());
        let integral = (i.ratio, i.ratio_stderr, i.ratio * (e.log_bias_bound).exp_m1());
        let spectral = (case.oracle, 0.0, case.oracle_error);
        let pairs = [
            ("soup/integral", soup, integral),
            ("soup/oracle", soup, spectral),
            ("integral/oracle", integral, spectral),
        ];
        for (tag, a, b) in pairs {
            let diff = (a.0 - b.0).abs();
            let tol = SIGMAS * a.1.hypot(b.1) + a.2 + b.2;
            pass &= diff <= tol;
            parts.push(format!("{label} {tag} {diff:.1e}≤{tol:.1e}"));
        }
    }
    assert!(report("estimator triangle", pass, parts.join(", "), start));
}

#[test]
fn feynman_kac_kernel() {
    let start = Instant::now();
    let s = unit2();
    let conn = abelian(&s, [0.3, 0.0]);
    let (t, x, y) = (0.5, [0.0, 0.0], [0.3, 0.4]);
    let model = SpectralModel::with_default_floor(&s, &conn, 1.0).unwrap();
    let (k, k_err) = model.heat_kernel_twisted(t, &x, &y).unwrap();
    let draws: Vec<C64> = par_replicas(404, FK_BRIDGES, |_, rng| {
        let path = sample_bridge(&s, t, &x, &y, 8, rng).unwrap();
        holonomy(&path, &conn).unwrap().matrix()[(0, 0)].conj()
    });
    let w = ComplexWelford::from_slice(&draws);
    let scale = (-t).exp() * heat_kernel(&s, t, &x, &y).unwrap();
    let mc = w.mean() * scale;
    let diff = (k[(0, 0)] - mc).norm();
    let tol = SIGMAS * w.stderr() * scale + k_err;
    assert!(report(
        "Feynman-Kac kernel",
        diff <= tol,
        format!("spectral {:.6}, MC {:.6}, |diff| {diff:.2e} ≤ {tol:.2e}", k[(0, 0)], mc),
        start,
    ));
}

#[test]
fn small_loop_moments() {
    let start = Instant::now();
    // A wide torus keeps winding loops out of the moments.
    let s = TorusSpec::new(vec![4.0, 4.0]).unwrap();
    let conn = su2_constant(&s, 0.5).unwrap();
    let grid = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];
    let rep = moments_vs_t(
        &s,
        &conn,
        &grid,
        &[vec![1.0, 1.0]],
        MOMENT_BRIDGES,
        StepsPolicy { n_min: 64, h0: 1e-3 },
        505,
    )
    .unwrap();
    let second = rep.moment_slopes[1].unwrap();
    let mean = rep.mean_slope.unwrap();
    let pass = (second.slope - 2.0).abs() <= SLOPE_TOL_SECOND && (mean.slope - 2.0).abs() <= SLOPE_TOL_MEAN;
    assert!(report(
        "small-loop moments",
        pass,
        format!(
            "E|I−Hol|² slope {:.3} ± {:.3} (2 ± {SLOPE_TOL_SECOND}), |E[I−Hol]| slope {:.3} ± {:.3} (2 ± {SLOPE_TOL_MEAN})",
            second.slope, second.slope_stderr, mean.slope, mean.slope_stderr
        ),
        start,
    ));
}

/// `∏_{k≥1} (1 + (λt/2πk)²)^{-1}`, the Karhunen–Loève form of the bridge's
/// Lévy-area characteristic function, with the tail in closed form.
fn levy_product(lambda_t: f64) -> f64 {
    let a = lambda_t / (2.0 * PI);
    let n = 200_000;
    let log: f64 = (1..=n).map(|k| (1.0 + (a / k as f64).powi(2)).ln()).sum();
    // Σ_{k>n} ln(1 + a²/k²) ≈ a²/n to leading order.
    (-(log + a * a / n as f64)).exp()
}

#[test]
fn levy_area_law() {
    let start = Instant::now();
    let s = unit2();
    let b = 1.0;
    let conn = levy_area_field(&s, b).unwrap();
    let x = [0.3, 0.6];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, &t) in [0.05, 0.1].iter().enumerate() {
        let closed = b * t / (2.0 * (b * t / 2.0).sinh());
        let product = levy_product(b * t);
        pass &= (closed - product).abs() <= 1e-10;
        let run = |steps: StepsPolicy, n: usize, seed: u64| {
            let vals: Vec<f64> = par_replicas(seed, n, |_, rng| {
                let l = sample_bridge_in_class(&s, t, &x, &x, &[0, 0], steps.steps_for(t), rng).unwrap();
                trace_norm(&holonomy(&l, &conn).unwrap()).re
            });
            Welford::from_slice(&vals)
        };
        let mc = run(StepsPolicy::default(), LEVY_BRIDGES, 600 + i as u64);
        let fine = run(StepsPolicy { n_min: 64, h0: 1e-5 }, 20_000, 610 + i as u64);
        let ok =
            (mc.mean - closed).abs() <= SIGMAS * mc.stderr() && (fine.mean - closed).abs() <= SIGMAS * fine.stderr();
        pass &= ok;
        parts.push(format!(
            "t={t}: oracle {closed:.7} (product {product:.7}), MC {:.7} ± {:.1e}, fine-step {:.7} ± {:.1e}",
            mc.mean,
            mc.stderr(),
            fine.mean,
            fine.stderr()
        ));
    }
    assert!(report("Lévy-area law", pass, parts.join("; "), start));
}

#[test]
fn campbell_formula() {
    let start = Instant::now();
    let constant = campbell_expectation_check(2.0, |_| C64::new(-0.5, 0.0), CAMPBELL_SAMPLES, 701).unwrap();
    let osc = campbell_expectation_check(3.0, |x| C64::from_polar(0.4, 2.0 * PI * x), CAMPBELL_SAMPLES, 702).unwrap();
    // Generating function of a Poisson(λ) sum: E[∏(1+g)] = exp(λ∫g).
    let z = |r: &CampbellReport, exact: C64| {
        let zr = (r.mc_mean.re - exact.re).abs() / r.stderr_re;
        let zi = if r.stderr_im > 0.0 {
            (r.mc_mean.im - exact.im).abs() / r.stderr_im
        } else {
            0.0
        };
        zr.max(zi)
    };
    let z1 = z(&constant, C64::new((-1.0f64).exp(), 0.0));
    let z2 = z(&osc, C64::new(1.0, 0.0));
    assert!(report(
        "Campbell formula",
        z1 <= SIGMAS && z2 <= SIGMAS,
        format!("e^-1 case z = {z1:.2}, oscillatory case z = {z2:.2}"),
        start,
    ));
}

#[test]
fn diamagnetic_inequality() {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, case) in [("abelian", abelian_case()), ("su2", su2_case())] {
        let e = &case.estimate;
        pass &= e.mean.re <= 1.0 + SIGMAS * e.stderr;
        parts.push(format!("{label} {:.5} ± {:.5}", e.mean.re, e.stderr));
    }
    let conformal = conformal_case();
    pass &= conformal.mean_g.re <= 1.0 + SIGMAS * conformal.stderr_g;
    parts.push(format!(
        "θ=(0.5,0) {:.5} ± {:.5}",
        conformal.mean_g.re, conformal.stderr_g
    ));
    let su2 = &su2_case().estimate;
    let margin = 1.0 - su2.mean.re;
    pass &= margin > SIGMAS * su2.stderr;
    parts.push(format!("su2 margin {margin:.4} > {:.4}", SIGMAS * su2.stderr));
    assert!(report("diamagnetic inequality", pass, parts.join(", "), start));
}

#[test]
fn symanzik_identity() {
    let start = Instant::now();
    let s = unit2();
    let ensemble = ConnectionEnsemble::new(
        &s,
        1.0,
        vec![
            ("trivial".into(), abelian(&s, [0.0, 0.0]), 0.5),
            ("half".into(), abelian(&s, [0.5, 0.0]), 0.5),
        ],
    )
    .unwrap();
    let alpha = 0.5;
    let spectral = annealed_weights(&ensemble, alpha, &AnnealedMethod::Spectral).unwrap();
    let soup = SoupConfig::new(alpha, DELTA, BIG_R, 909).unwrap();
    let by_soup = annealed_weights(
        &ensemble,
        alpha,
        &AnnealedMethod::LoopSoup {
            soup,
            replicas: SOUP_REPLICAS,
        },
    )
    .unwrap();
    let band = 3;
    let mut rng = stream(910, 0);
    let secs: Vec<Section> = (0..4)
        .map(|_| Section::random(1, 2, 2, false, &mut rng).unwrap())
        .collect();
    let k1 = symanzik_moment(
        &ensemble,
        &spectral,
        &secs[..2],
        &[1.0, 1.0],
        band,
        SYMANZIK_SAMPLES,
        911,
    )
    .unwrap();
    let k1f = symanzik_moment(
        &ensemble,
        &spectral,
        &secs[..2],
        &[0.0, 1.0],
        band,
        SYMANZIK_SAMPLES,
        912,
    )
    .unwrap();
    let k2 = symanzik_moment(&ensemble, &spectral, &secs, &[1.0, 1.0], band, SYMANZIK_SAMPLES, 913).unwrap();
    let wz = (spectral.ratios[1] - by_soup.ratios[1]).abs() / spectral.ratio_stderr[1].hypot(by_soup.ratio_stderr[1]);
    let pass = k1.z <= SIGMAS && k1f.z <= SIGMAS && k2.z <= SIGMAS && wz <= SIGMAS;
    assert!(report(
        "Symanzik identity",
        pass,
        format!(
            "k=1 z {:.2}, k=1 with f z {:.2}, k=2 z {:.2}; weight ratio spectral {:.5} vs soup {:.5} ± {:.5} (z {wz:.2})",
            k1.z, k1f.z, k2.z, spectral.ratios[1], by_soup.ratios[1], by_soup.ratio_stderr[1]
        ),
        start,
    ));
}

fn conformal_case() -> &'static ConformalReport {
    static CASE: OnceLock<ConformalReport> = OnceLock::new();
    CASE.get_or_init(|| {
        let s = unit2();
        let cfg = SoupConfig::new(1.0, DELTA, BIG_R, 1001).unwrap();
        let f = |x: &[f64]| 0.2 * (2.0 * PI * x[0]).cos();
        conformal_comparison(
            &s,
            &cfg,
            &unit_mass(),
            f,
            0.2,
            &line_bundle(&s),
            &abelian(&s, [0.5, 0.0]),
            CONFORMAL_REPLICAS,
        )
        .unwrap()
    })
}

#[test]
fn conformal_invariance() {
    let start = Instant::now();
    let r = conformal_case();
    let diff = (r.mean_g - r.mean_hat).norm();
    let tol = SIGMAS * r.stderr_g.hypot(r.stderr_hat);
    let pass = diff <= tol && r.max_chi_defect <= PATHWISE_TOL;
    assert!(report(
        "conformal invariance",
        pass,
        format!(
            "g-clock {:.5} ± {:.5}, ĝ-clock {:.5} ± {:.5}, |diff| {diff:.1e} ≤ {tol:.1e}; max |Δ tr Hol| {:.1e} ≤ {PATHWISE_TOL:.0e} over {} loops",
            r.mean_g.re, r.stderr_g, r.mean_hat.re, r.stderr_hat, r.max_chi_defect, r.loops_g
        ),
        start,
    ));
}

#[test]
fn invariant_suites() {
    let start = Instant::now();
    let checks = run_suites(&Suite::ALL, 1100).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{} {:.3e} > {:.3e}", c.name, c.value, c.tolerance))
        .collect();
    let pass = failed.is_empty() && secs <= SUITE_BUDGET_SECS;
    let detail = if failed.is_empty() {
        format!("{} invariants hold in {secs:.0}s ≤ {SUITE_BUDGET_SECS}s", checks.len())
    } else {
        failed.join("; ")
    };
    assert!(report("kernel and property suites", pass, detail, start));
}
