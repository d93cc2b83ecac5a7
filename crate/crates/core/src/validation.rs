//! Deterministic invariant battery over the public API: heat kernel,
//! bridges, holonomy, soup sampling and the spectral model.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connection::{
    holonomy, holonomy_of_points, levy_area_field, su2_constant, trace_norm, ConnectionSpec, FieldType,
};
use crate::error::Result;
use crate::geometry::{heat_kernel, heat_kernel_diagonal, sample_bridge, sample_bridge_in_class, MassField, TorusSpec};
use crate::linalg::{self, CMat};
use crate::loopsoup::{sample_soup_from, DurationSampler, SoupConfig, SoupDetail};
use crate::quadrature;
use crate::rng::{derive_seed, par_replicas, stream};
use crate::spectral::{zeta_prime_diff, SpectralModel};
use crate::stats::Welford;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Geometry,
    Connection,
    Loopsoup,
    Spectral,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Geometry, Suite::Connection, Suite::Loopsoup, Suite::Spectral];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Geometry => "geometry",
            Suite::Connection => "connection",
            Suite::Loopsoup => "loopsoup",
            Suite::Spectral => "spectral",
        }
    }
}

/// One invariant: the worst observed value against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub suite: Suite,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl InvariantCheck {
    fn new(suite: Suite, name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

fn unit2() -> TorusSpec {
    TorusSpec::unit(2).expect("valid torus")
}

/// Midpoints of an `n × n` grid on the unit square.
fn grid_points(n: usize) -> Vec<[f64; 2]> {
    (0..n * n)
        .map(|i| [((i / n) as f64 + 0.5) / n as f64, ((i % n) as f64 + 0.5) / n as f64])
        .collect()
}

fn geometry(seed: u64) -> Result<Vec<InvariantCheck>> {
    let s = unit2();
    let mut out = Vec::new();

    // Chapman–Kolmogorov by grid quadrature (spectrally accurate for periodic kernels).
    let pts = grid_points(96);
    let cell = 1.0 / pts.len() as f64;
    let mut rng = stream(seed, 0);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let x = s.uniform_point(&mut rng);
        let y = s.uniform_point(&mut rng);
        let a = 0.1 + 1.9 * rng.gen::<f64>();
        let b = 0.1 + 1.9 * rng.gen::<f64>();
        let mut conv = 0.0;
        for z in &pts {
            conv += heat_kernel(&s, a, &x, z)? * heat_kernel(&s, b, z, &y)?;
        }
        let direct = heat_kernel(&s, a + b, &x, &y)?;
        worst = worst.max((conv * cell - direct).abs() / direct);
    }
    out.push(InvariantCheck::new(
        Suite::Geometry,
        "chapman-kolmogorov relative error",
        worst,
        1e-6,
    ));

    let fine = grid_points(160);
    let fine_cell = 1.0 / fine.len() as f64;
    let mut worst = 0.0f64;
    for t in [0.01, 0.1, 1.0, 10.0] {
        let mut total = 0.0;
        for z in &fine {
            total += heat_kernel(&s, t, &[0.2, 0.7], z)?;
        }
        worst = worst.max((total * fine_cell - 1.0).abs());
    }
    out.push(InvariantCheck::new(Suite::Geometry, "normalization error", worst, 1e-8));

    // (2πt)^{d/2} p_t(x,x) − 1 on small times; winding images are below 1e-6 there.
    let mut worst = 0.0f64;
    for k in 0..=20 {
        let t = 1e-4 * 10f64.powf(k as f64 * 0.1);
        let v = 2.0 * PI * t * heat_kernel_diagonal(&s, t);
        worst = worst.max((v - 1.0).abs());
    }
    out.push(InvariantCheck::new(
        Suite::Geometry,
        "diagonal control |(2πt)p_t(x,x) − 1| on [1e-4, 1e-2]",
        worst,
        1e-6,
    ));

    // Fluctuation covariance s∧u − su/t at two interior times, as a z-score.
    let (t, n) = (1.0, 8);
    let x0 = [0.1, 0.1];
    let draws: Vec<Result<f64>> = par_replicas(derive_seed(seed, 1), 100_000, |_, rng| {
        let l = sample_bridge_in_class(&s, t, &x0, &x0, &[0, 0], n, rng)?;
        Ok((l.point(2)[0] - x0[0]) * (l.point(5)[0] - x0[0]))
    });
    let w = Welford::from_slice(&draws.into_iter().collect::<Result<Vec<_>>>()?);
    let (u, v) = (2.0 / n as f64, 5.0 / n as f64);
    let target = u.min(v) - u * v / t;
    out.push(InvariantCheck::new(
        Suite::Geometry,
        "bridge covariance |z|",
        (w.mean - target).abs() / w.stderr(),
        3.0,
    ));
    Ok(out)
}

fn connection(seed: u64) -> Result<Vec<InvariantCheck>> {
    let s = unit2();
    let conns: [ConnectionSpec; 3] = [
        su2_constant(&s, 0.5)?,
        levy_area_field(&s, 1.0)?,
        ConnectionSpec::flat_abelian(&s, vec![0.3, 0.7])?,
    ];
    let mut rng = stream(seed, 0);
    let (mut unitarity, mut reversal, mut concat, mut reroot) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for conn in &conns {
        for _ in 0..20 {
            let t = 0.01 + 0.5 * rng.gen::<f64>();
            let x = s.uniform_point(&mut rng);
            let l = if conn.restricted_to_contractible() {
                sample_bridge_in_class(&s, t, &x, &x, &[0, 0], 256, &mut rng)?
            } else {
                sample_bridge(&s, t, &x, &x, 256, &mut rng)?
            };
            let u = holonomy(&l, conn)?;
            unitarity = unitarity.max(u.unitarity_defect());
            let back = holonomy(&l.reversed(), conn)?;
            reversal = reversal.max((back.matrix() - u.matrix().adjoint()).norm());
            if !conn.is_displacement_determined() {
                let d = s.dim();
                let pts = l.lifted_points();
                let k = 100;
                let first = holonomy_of_points(conn, &pts[..(k + 1) * d])?;
                let second = holonomy_of_points(conn, &pts[k * d..])?;
                let joined: CMat = second.matrix() * first.matrix();
                concat = concat.max((joined - u.matrix()).norm());
            }
            let rooted = holonomy(&l.rerooted(77), conn)?;
            reroot = reroot.max((trace_norm(&rooted) - trace_norm(&u)).norm());
        }
    }
    Ok(vec![
        InvariantCheck::new(Suite::Connection, "unitarity defect", unitarity, 1e-10),
        InvariantCheck::new(Suite::Connection, "time-reversal defect", reversal, 1e-9),
        InvariantCheck::new(Suite::Connection, "concatenation defect", concat, 1e-12),
        InvariantCheck::new(Suite::Connection, "rerooting trace defect", reroot, 1e-9),
    ])
}

fn loopsoup(seed: u64) -> Result<Vec<InvariantCheck>> {
    let s = unit2();
    let m = MassField::constant(1.0)?;
    let soups = 10_000;
    let (d0, d1, r) = (1e-2, 2e-2, 20.0);
    let sample = |delta: f64, seed: u64| -> Result<Vec<Vec<f64>>> {
        let cfg = SoupConfig::new(1.0, delta, r, seed)?;
        let table = DurationSampler::new(&s, delta, r)?;
        let soups: Vec<Result<Vec<f64>>> = par_replicas(seed, soups, |_, rng| {
            let soup = sample_soup_from(&table, &s, &cfg, &m, SoupDetail::WindingOnly, rng)?;
            Ok(soup.loops.iter().map(|l| l.duration()).collect())
        });
        soups.into_iter().collect()
    };
    let wide = sample(d0, derive_seed(seed, 1))?;
    let narrow = sample(d1, derive_seed(seed, 2))?;
    let restricted: Vec<Vec<f64>> = wide
        .iter()
        .map(|ts| ts.iter().copied().filter(|&t| t >= d1).collect())
        .collect();
    let z = |a: &Welford, b: &Welford| (a.mean - b.mean).abs() / a.stderr().hypot(b.stderr());
    let count = |xs: &[Vec<f64>]| Welford::from_slice(&xs.iter().map(|v| v.len() as f64).collect::<Vec<_>>());
    let logs = |xs: &[Vec<f64>]| Welford::from_slice(&xs.iter().flatten().map(|t| t.ln()).collect::<Vec<_>>());
    let mut out = vec![
        InvariantCheck::new(
            Suite::Loopsoup,
            "restriction count |z|",
            z(&count(&restricted), &count(&narrow)),
            3.0,
        ),
        InvariantCheck::new(
            Suite::Loopsoup,
            "restriction log-duration |z|",
            z(&logs(&restricted), &logs(&narrow)),
            3.0,
        ),
    ];

    let split = 0.1;
    let lo: Vec<f64> = wide
        .iter()
        .map(|v| v.iter().filter(|&&t| t < split).count() as f64)
        .collect();
    let hi: Vec<f64> = wide
        .iter()
        .map(|v| v.iter().filter(|&&t| t >= split).count() as f64)
        .collect();
    let (wl, wh) = (Welford::from_slice(&lo), Welford::from_slice(&hi));
    let cov = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| (a - wl.mean) * (b - wh.mean))
        .sum::<f64>()
        / (soups - 1) as f64;
    let corr = cov / (wl.variance() * wh.variance()).sqrt();
    out.push(InvariantCheck::new(
        Suite::Loopsoup,
        "disjoint-band count correlation",
        corr.abs(),
        3.0 / (soups as f64).sqrt(),
    ));

    let cfg = SoupConfig::new(1.0, 1e-3, r, derive_seed(seed, 3))?;
    let table = DurationSampler::new(&s, cfg.delta, r)?;
    let counts: Vec<Result<f64>> = par_replicas(cfg.seed, 2_000, |_, rng| {
        Ok(sample_soup_from(&table, &s, &cfg, &m, SoupDetail::WindingOnly, rng)?.len() as f64)
    });
    let w = Welford::from_slice(&counts.into_iter().collect::<Result<Vec<_>>>()?);
    let kept = quadrature::integrate(|t| (-t).exp() * heat_kernel_diagonal(&s, t) / t, 1e-3, r, 1e-12, 0.0).value;
    out.push(InvariantCheck::new(
        Suite::Loopsoup,
        "kept count |z| (m=1, δ=1e-3, R=20)",
        (w.mean - kept).abs() / w.stderr(),
        3.0,
    ));
    Ok(out)
}

fn spectral() -> Result<Vec<InvariantCheck>> {
    let s = unit2();
    let line = ConnectionSpec::trivial(&s, 1, FieldType::ComplexUnitary)?;
    let trivial = SpectralModel::new(&s, &line, 1.0, 1e-2)?;
    let su2 = SpectralModel::new(&s, &su2_constant(&s, 0.5)?, 1.0, 1e-2)?;
    let (mut herm, mut gap, mut positive) = (0.0f64, 0.0f64, true);
    for model in [&trivial, &su2] {
        let mut smallest = f64::INFINITY;
        for mode in model.modes() {
            let mat = model.mode_matrix(&mode.n);
            herm = herm.max((&mat - mat.adjoint()).norm());
            positive &= mode.eigenvalues.iter().all(|&l| l > 0.0);
            smallest = mode.eigenvalues.iter().copied().fold(smallest, f64::min);
        }
        gap = gap.max((smallest - model.spectral_gap()).abs());
    }
    let base = SpectralModel::with_default_floor(&s, &line, 1.0)?;
    let z = |theta: Vec<f64>| -> Result<f64> {
        let model = SpectralModel::with_default_floor(&s, &ConnectionSpec::flat_abelian(&s, theta)?, 1.0)?;
        Ok(zeta_prime_diff(&base, &model)?.value)
    };
    let periodicity = (z(vec![0.3, 0.1])? - z(vec![1.3, -1.9])?).abs();
    let (ta, tb) = (0.2, 0.35);
    let mut semigroup = 0.0f64;
    for mode in su2.modes().iter().step_by(17) {
        let e = |t: f64| linalg::apply_spectral(&mode.eigenvalues, &mode.eigenvectors, |l| (-t * l).exp());
        semigroup = semigroup.max((e(ta) * e(tb) - e(ta + tb)).norm());
    }
    Ok(vec![
        InvariantCheck::new(
            Suite::Spectral,
            "mode matrix Hermitian defect",
            if positive { herm } else { f64::INFINITY },
            1e-12,
        ),
        InvariantCheck::new(Suite::Spectral, "spectral gap vs smallest eigenvalue", gap, 1e-12),
        InvariantCheck::new(
            Suite::Spectral,
            "mass minus gap at θ=0",
            (1.0 - trivial.spectral_gap()).max(0.0),
            0.0,
        ),
        InvariantCheck::new(Suite::Spectral, "gauge periodicity of ζ-difference", periodicity, 1e-12),
        InvariantCheck::new(Suite::Spectral, "semigroup defect", semigroup, 1e-12),
    ])
}

/// Runs the selected suites with streams derived from `seed` and the suite,
/// so a suite draws the same numbers whether or not others run with it.
pub fn run_suites(suites: &[Suite], seed: u64) -> Result<Vec<InvariantCheck>> {
    let mut out = Vec::new();
    for suite in suites {
        let seed = derive_seed(seed, *suite as u64);
        out.extend(match suite {
            Suite::Geometry => geometry(seed)?,
            Suite::Connection => connection(seed)?,
            Suite::Loopsoup => loopsoup(seed)?,
            Suite::Spectral => spectral()?,
        });
    }
    Ok(out)
}
