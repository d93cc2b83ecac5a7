//! Estimators of determinant ratios as loop-soup expectations.
//!
//! With `χ(ℓ) = tr Hol^{∇₁}(ℓ) − tr Hol^{∇₀}(ℓ)` (normalized traces),
//! `E_α[∏_ℓ (1 + χ(ℓ))] = exp(α·[(1/n₁)ζ'₁(0) − (1/n₀)ζ'₀(0)])`, and the
//! exponent is `∫ χ dΛ`. Soups are restricted to durations in `[δ, R]`; the
//! discarded pieces are bounded by [`small_t_tail_bound`] and
//! [`large_r_tail_bound`] and reported with every estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connection::{chi, holonomy, ConnectionSpec};
use crate::error::{ensure, Error, Result};
use crate::geometry::{
    heat_kernel_diagonal, mass_integral, sample_bridge, sample_bridge_in_class, sample_winding, LoopPath, MassField,
    StepsPolicy, TorusSpec,
};
use crate::linalg::{self, CMat, C64};
use crate::loopsoup::{visit_band, DurationSampler, LoopSoup, SoupConfig, SoupDetail};
use crate::quadrature;
use crate::rng::{derive_seed, par_replicas, stream, Stream};
use crate::stats::{loglog_fit, ComplexWelford, SlopeFit, Welford};

/// Number of duration strata (intensity deciles).
pub const STRATA: usize = 10;

/// Bridges per duration when fitting `|E[χ]| ≤ c·t²`.
pub const FIT_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductEstimate {
    pub mean: C64,
    /// Standard error of the complex mean.
    pub stderr: f64,
    pub n_replicas: usize,
    pub alpha: f64,
    pub delta: f64,
    pub big_r: f64,
    /// Bias of `mean` from loops shorter than `δ`, in the units of `mean`.
    pub small_t_bias_bound: f64,
    /// Bias of `mean` from loops longer than `R`, in the units of `mean`.
    pub large_r_bias_bound: f64,
    /// Bound on `|α·∫_{t∉[δ,R]} χ dΛ|`, the bias of `log_mean`.
    pub log_bias_bound: f64,
    pub log_mean: f64,
    pub log_mean_stderr: f64,
    /// Upper confidence value of `c` in `|E[χ]| ≤ c·t²` near `δ`.
    pub fitted_c: f64,
    pub strata: usize,
    pub winding_only: bool,
}

impl ProductEstimate {
    pub fn bias_bound(&self) -> f64 {
        self.small_t_bias_bound + self.large_r_bias_bound
    }
}

/// `∏_{ℓ∈soup} (1 + χ(ℓ))`; the empty product is 1.
pub fn product_over_soup(soup: &LoopSoup, conn0: &ConnectionSpec, conn1: &ConnectionSpec) -> Result<C64> {
    soup.loops
        .iter()
        .try_fold(C64::new(1.0, 0.0), |acc, l| Ok(acc * (1.0 + chi(l, conn0, conn1)?)))
}

fn winding_only(m: &MassField, conn0: &ConnectionSpec, conn1: &ConnectionSpec) -> bool {
    m.constant_value().is_some() && conn0.is_displacement_determined() && conn1.is_displacement_determined()
}

fn check_pair(spec: &TorusSpec, conn0: &ConnectionSpec, conn1: &ConnectionSpec) -> Result<()> {
    ensure(conn0.dim() == spec.dim() && conn1.dim() == spec.dim(), || {
        "connection and torus dimensions differ".into()
    })
}

/// A closed loop at `x` of duration `t`: three points carrying the winding
/// when that determines every holonomy in use, a full bridge otherwise.
/// Lift-defined fields only see contractible loops.
fn closed_loop<R: Rng + ?Sized>(
    spec: &TorusSpec,
    t: f64,
    x: &[f64],
    coarse: bool,
    contractible: bool,
    steps: StepsPolicy,
    rng: &mut R,
) -> Result<LoopPath> {
    let d = spec.dim();
    if coarse {
        let w = sample_winding(spec, t, &vec![0.0; d], rng)?;
        let shift = spec.lattice_vector(&w);
        let mut lifted = x.to_vec();
        lifted.extend(x.iter().zip(&shift).map(|(a, s)| a + 0.5 * s));
        lifted.extend(x.iter().zip(&shift).map(|(a, s)| a + s));
        return LoopPath::from_parts(t, x.to_vec(), lifted, w);
    }
    if contractible {
        sample_bridge_in_class(spec, t, x, x, &vec![0; d], steps.steps_for(t), rng)
    } else {
        sample_bridge(spec, t, x, x, steps.steps_for(t), rng)
    }
}

/// Fits `E[χ](t) = c·t²` at `t ∈ {δ, 3δ, 10δ}` and returns an upper
/// confidence value `|ĉ| + 3σ_ĉ`.
pub fn fit_small_t_constant(
    spec: &TorusSpec,
    conn0: &ConnectionSpec,
    conn1: &ConnectionSpec,
    delta: f64,
    samples: usize,
    steps: StepsPolicy,
    seed: u64,
) -> Result<f64> {
    let coarse = conn0.is_displacement_determined() && conn1.is_displacement_determined();
    let contractible = conn0.restricted_to_contractible() || conn1.restricted_to_contractible();
    let mut fits = Vec::new();
    for (k, &t) in [delta, 3.0 * delta, 10.0 * delta].iter().enumerate() {
        let vals: Vec<Result<f64>> = par_replicas(derive_seed(seed, 100 + k as u64), samples, |_, rng| {
            let x = spec.uniform_point(rng);
            let l = closed_loop(spec, t, &x, coarse, contractible, steps, rng)?;
            Ok(chi(&l, conn0, conn1)?.re)
        });
        let w = Welford::from_slice(&vals.into_iter().collect::<Result<Vec<_>>>()?);
        fits.push((t, w.mean, w.stderr()));
    }
    if fits.iter().all(|f| f.2 > 0.0) {
        let num: f64 = fits.iter().map(|(t, m, s)| m * t * t / (s * s)).sum();
        let den: f64 = fits.iter().map(|(t, _, s)| t.powi(4) / (s * s)).sum();
        Ok((num / den).abs() + 3.0 / den.sqrt())
    } else {
        Ok(fits
            .iter()
            .map(|(t, m, s)| (m.abs() + 3.0 * s) / (t * t))
            .fold(0.0, f64::max))
    }
}

/// `2c·V·∫_0^δ t²·(2πt)^{−d/2} dt/t`, the leading-kernel bound on
/// `|∫_{t<δ} χ dΛ|` with a factor-2 margin.
pub fn small_t_tail_bound(spec: &TorusSpec, delta: f64, fitted_c: f64) -> Result<f64> {
    ensure(delta >= 0.0 && fitted_c >= 0.0, || "δ and c must be ≥ 0".into())?;
    let v = spec.volume();
    let two_pi = 2.0 * std::f64::consts::PI;
    match spec.dim() {
        2 => Ok(2.0 * fitted_c * v * delta / two_pi),
        3 => Ok(2.0 * fitted_c * v * 2.0 * delta.sqrt() / two_pi.powf(1.5)),
        d => Err(Error::UnsupportedDimension(d)),
    }
}

/// `2·V·∫_R^∞ e^{−m₀t} p_t(0,0) dt/t`, the bound on `|∫_{t>R} χ dΛ|` from
/// `|χ| ≤ 2` and `e^{−∫m} ≤ e^{−m₀t}`.
pub fn large_r_tail_bound(spec: &TorusSpec, big_r: f64, m0: f64) -> Result<f64> {
    ensure(m0.is_finite() && m0 > 0.0, || {
        format!("mass lower bound must be positive, got {m0}")
    })?;
    ensure(big_r.is_finite() && big_r > 0.0, || {
        format!("R must be positive, got {big_r}")
    })?;
    let v = spec.volume();
    let end = big_r + 60.0 / m0;
    let f = |t: f64| (-m0 * t).exp() * heat_kernel_diagonal(spec, t) / t;
    let body = quadrature::integrate(f, big_r, end, 1e-10, 0.0);
    // p_t(0,0) is decreasing in t, so the remainder is at most p_T e^{−m₀T}/(m₀T).
    let rest = heat_kernel_diagonal(spec, end) * (-m0 * end).exp() / (m0 * end);
    Ok(2.0 * v * (body.value + body.error + rest))
}

/// Monte Carlo estimate of `E_α[∏_{ℓ∈L_δ^R}(1 + χ(ℓ))]`.
///
/// Replicas are stratified over intensity deciles of the duration: each
/// stratum is an independent Poisson process, so the product of per-stratum
/// means is unbiased. Replica `i` of stratum `b` uses the stream
/// `(derive_seed(seed, b), i)`.
pub fn estimate_partition_ratio(
    spec: &TorusSpec,
    config: &SoupConfig,
    m: &MassField,
    conn0: &ConnectionSpec,
    conn1: &ConnectionSpec,
    n_replicas: usize,
) -> Result<ProductEstimate> {
    config.validate()?;
    check_pair(spec, conn0, conn1)?;
    ensure(!m.is_identically_zero(), || {
        "the mass must not vanish identically".into()
    })?;
    ensure(n_replicas >= 2, || "need at least two replicas".into())?;
    let sampler = DurationSampler::new(spec, config.delta, config.big_r)?;
    let coarse = winding_only(m, conn0, conn1);
    let detail = if coarse {
        SoupDetail::WindingOnly
    } else {
        SoupDetail::Bridges
    };
    let total = sampler.total();
    let strata: Vec<Result<ComplexWelford>> = (0..STRATA)
        .map(|b| {
            let band = (total * b as f64 / STRATA as f64, total * (b + 1) as f64 / STRATA as f64);
            let seed = derive_seed(config.seed, b as u64);
            let values: Vec<Result<C64>> = par_replicas(seed, n_replicas, |_, rng: &mut Stream| {
                let mut q = C64::new(1.0, 0.0);
                visit_band(
                    spec,
                    config.intensity_alpha,
                    &sampler,
                    band,
                    m,
                    config.steps_policy,
                    detail,
                    rng,
                    |l| {
                        q *= 1.0 + chi(&l, conn0, conn1)?;
                        Ok(())
                    },
                )?;
                Ok(q)
            });
            let values = values.into_iter().collect::<Result<Vec<_>>>()?;
            Ok(ComplexWelford::from_slice(&values))
        })
        .collect();
    let strata = strata.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean, stderr) = combine_strata(&strata);

    let fitted_c = fit_small_t_constant(
        spec,
        conn0,
        conn1,
        config.delta,
        FIT_SAMPLES,
        config.steps_policy,
        derive_seed(config.seed, 0xC0FF),
    )?;
    let alpha = config.intensity_alpha;
    let small = alpha * small_t_tail_bound(spec, config.delta, fitted_c)?;
    let large = alpha * large_r_tail_bound(spec, config.big_r, m.lower_bound())?;
    let re = mean.re;
    let (log_mean, log_mean_stderr) = if re > 0.0 {
        (re.ln(), stderr / re)
    } else {
        (f64::NAN, f64::INFINITY)
    };
    Ok(ProductEstimate {
        mean,
        stderr,
        n_replicas,
        alpha,
        delta: config.delta,
        big_r: config.big_r,
        small_t_bias_bound: mean.norm() * small.exp_m1(),
        large_r_bias_bound: mean.norm() * large.exp_m1(),
        log_bias_bound: small + large,
        log_mean,
        log_mean_stderr,
        fitted_c,
        strata: STRATA,
        winding_only: coarse,
    })
}

/// Product of independent stratum means and its delta-method standard error
/// `sqrt(Σ_b σ_b² ∏_{c≠b} |μ_c|²)`.
fn combine_strata(strata: &[ComplexWelford]) -> (C64, f64) {
    let means: Vec<C64> = strata.iter().map(|w| w.mean()).collect();
    let mean = means.iter().product::<C64>();
    let var: f64 = strata
        .iter()
        .enumerate()
        .map(|(b, w)| {
            let others: f64 = means
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != b)
                .map(|(_, m)| m.norm_sqr())
                .product();
            w.stderr().powi(2) * others
        })
        .sum();
    (mean, var.sqrt())
}

/// Quadrature grid in `u = ln t` over `[δ, R]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegralGrid {
    pub delta: f64,
    pub big_r: f64,
    pub panels: usize,
    pub order: usize,
    /// Caps `samples × steps` per node; long durations get fewer bridges.
    pub step_budget: Option<usize>,
}

impl IntegralGrid {
    pub fn new(delta: f64, big_r: f64, panels: usize, order: usize) -> Result<Self> {
        ensure(delta > 0.0 && big_r > delta && big_r.is_finite(), || {
            "need 0 < δ < R < ∞".into()
        })?;
        ensure(panels >= 1 && order >= 1, || "grid needs panels and order ≥ 1".into())?;
        Ok(Self {
            delta,
            big_r,
            panels,
            order,
            step_budget: None,
        })
    }

    /// `(t, weight in u)` pairs.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        quadrature::composite_gauss(self.delta.ln(), self.big_r.ln(), self.panels, self.order)
            .into_iter()
            .map(|(u, w)| (u.exp(), w))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrandNode {
    pub t: f64,
    pub weight: f64,
    pub samples: usize,
    /// `E^m[χ]` including the mass weight `e^{−∫m}`.
    pub mean_chi: f64,
    pub stderr: f64,
    /// `V·p_t(0,0)·E^m[χ]`, the integrand in `u = ln t`.
    pub integrand: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegralFormEstimate {
    /// `∫_δ^R V p_t(0,0) E^m[χ] dt/t`.
    pub integral: f64,
    pub stderr: f64,
    pub alpha: f64,
    /// `exp(α·integral)`.
    pub ratio: f64,
    pub ratio_stderr: f64,
    pub nodes: Vec<IntegrandNode>,
}

/// Rao–Blackwellized estimate of `∫_{L_δ^R} χ dΛ` by quadrature over `t` of
/// bridge averages of `e^{−∫m}·Re χ`.
#[allow(clippy::too_many_arguments)]
pub fn integral_form_estimate(
    spec: &TorusSpec,
    m: &MassField,
    conn0: &ConnectionSpec,
    conn1: &ConnectionSpec,
    grid: &IntegralGrid,
    samples_per_t: usize,
    alpha: f64,
    steps: StepsPolicy,
    seed: u64,
) -> Result<IntegralFormEstimate> {
    check_pair(spec, conn0, conn1)?;
    ensure(samples_per_t >= 2, || "need at least two samples per node".into())?;
    let coarse = winding_only(m, conn0, conn1);
    let contractible = conn0.restricted_to_contractible() || conn1.restricted_to_contractible();
    let constant = m.constant_value();
    let v = spec.volume();
    let mut nodes = Vec::new();
    for (i, (t, w)) in grid.nodes().into_iter().enumerate() {
        let mut n = samples_per_t;
        if let (Some(budget), false) = (grid.step_budget, coarse) {
            n = n.min((budget / steps.steps_for(t)).max(2));
        }
        let vals: Vec<Result<f64>> = par_replicas(derive_seed(seed, i as u64), n, |_, rng| {
            let x = spec.uniform_point(rng);
            let l = closed_loop(spec, t, &x, coarse, contractible, steps, rng)?;
            let weight = match constant {
                Some(c) => (-c * t).exp(),
                None => (-mass_integral(&l, m)).exp(),
            };
            Ok(weight * chi(&l, conn0, conn1)?.re)
        });
        let acc = Welford::from_slice(&vals.into_iter().collect::<Result<Vec<_>>>()?);
        let p = heat_kernel_diagonal(spec, t);
        nodes.push(IntegrandNode {
            t,
            weight: w,
            samples: n,
            mean_chi: acc.mean,
            stderr: acc.stderr(),
            integrand: v * p * acc.mean,
        });
    }
    let integral: f64 = nodes.iter().map(|nd| nd.weight * nd.integrand).sum();
    let stderr = nodes
        .iter()
        .map(|nd| (nd.weight * v * heat_kernel_diagonal(spec, nd.t) * nd.stderr).powi(2))
        .sum::<f64>()
        .sqrt();
    let ratio = (alpha * integral).exp();
    Ok(IntegralFormEstimate {
        integral,
        stderr,
        alpha,
        ratio,
        ratio_stderr: ratio * alpha * stderr,
        nodes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub t: f64,
    /// `sup_x E‖I − Hol‖^p` for `p = 1, 2, 4` (operator norm).
    pub moments: [f64; 3],
    pub moment_stderr: [f64; 3],
    /// `sup_x ‖E[I − ½(Hol + Hol*)]‖`.
    pub mean_deviation: f64,
    pub mean_deviation_stderr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub t_grid: Vec<f64>,
    pub rows: Vec<MomentRow>,
    /// Log–log slopes of the three moments; `None` when they vanish.
    pub moment_slopes: [Option<SlopeFit>; 3],
    pub mean_slope: Option<SlopeFit>,
}

pub const MOMENT_POWERS: [i32; 3] = [1, 2, 4];

/// Small-loop moments of `I − Hol` over bridges `x → x`.
///
/// The mean deviation uses the symmetrization `I − ½(U + U*)`, which has the
/// same expectation as `I − U` by time reversal and a much smaller spread.
pub fn moments_vs_t(
    spec: &TorusSpec,
    conn: &ConnectionSpec,
    t_grid: &[f64],
    x_grid: &[Vec<f64>],
    samples: usize,
    steps: StepsPolicy,
    seed: u64,
) -> Result<MomentReport> {
    ensure(!t_grid.is_empty() && !x_grid.is_empty(), || "empty grid".into())?;
    ensure(t_grid.windows(2).all(|w| w[0] < w[1]), || {
        "t grid must be strictly increasing".into()
    })?;
    ensure(t_grid.iter().all(|&t| t > 0.0 && t <= 0.2), || {
        "t grid must lie in (0, 0.2]".into()
    })?;
    ensure(samples >= 2, || "need at least two samples".into())?;
    let r = conn.rank();
    let contractible = conn.restricted_to_contractible();
    let mut rows = Vec::new();
    for (i, &t) in t_grid.iter().enumerate() {
        let mut row = MomentRow {
            t,
            moments: [0.0; 3],
            moment_stderr: [0.0; 3],
            mean_deviation: 0.0,
            mean_deviation_stderr: 0.0,
        };
        for (j, x) in x_grid.iter().enumerate() {
            let stream_seed = derive_seed(seed, (i * x_grid.len() + j) as u64);
            let draws: Vec<Result<(CMat, [f64; 3])>> = par_replicas(stream_seed, samples, |_, rng| {
                let l = closed_loop(spec, t, x, false, contractible, steps, rng)?;
                let u = holonomy(&l, conn)?.matrix().clone();
                let dev = linalg::identity(r) - &u;
                let norm = linalg::op_norm(&dev);
                let sym = linalg::identity(r) - (&u + u.adjoint()) * C64::new(0.5, 0.0);
                Ok((sym, MOMENT_POWERS.map(|p| norm.powi(p))))
            });
            let draws = draws.into_iter().collect::<Result<Vec<_>>>()?;
            for (k, slot) in row.moments.clone().iter().enumerate() {
                let w = Welford::from_slice(&draws.iter().map(|d| d.1[k]).collect::<Vec<_>>());
                if w.mean > *slot {
                    row.moments[k] = w.mean;
                    row.moment_stderr[k] = w.stderr();
                }
            }
            let mut mean = CMat::zeros(r, r);
            let mut se2 = 0.0;
            for a in 0..r {
                for b in 0..r {
                    let zs: Vec<C64> = draws.iter().map(|d| d.0[(a, b)]).collect();
                    let w = ComplexWelford::from_slice(&zs);
                    mean[(a, b)] = w.mean();
                    se2 += w.stderr().powi(2);
                }
            }
            let dev = linalg::op_norm(&mean);
            if dev > row.mean_deviation {
                row.mean_deviation = dev;
                row.mean_deviation_stderr = se2.sqrt();
            }
        }
        rows.push(row);
    }
    let slope = |ys: Vec<f64>, ss: Vec<f64>| loglog_fit(t_grid, &ys, &ss);
    let moment_slopes = [0, 1, 2].map(|k| {
        slope(
            rows.iter().map(|r| r.moments[k]).collect(),
            rows.iter().map(|r| r.moment_stderr[k]).collect(),
        )
    });
    let mean_slope = slope(
        rows.iter().map(|r| r.mean_deviation).collect(),
        rows.iter().map(|r| r.mean_deviation_stderr).collect(),
    );
    Ok(MomentReport {
        t_grid: t_grid.to_vec(),
        rows,
        moment_slopes,
        mean_slope,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderReport {
    pub deltas: Vec<f64>,
    pub means: Vec<C64>,
    pub stderrs: Vec<f64>,
    /// `E|Q_δ|² / |E Q_δ|²`.
    pub normalized_second_moments: Vec<f64>,
    pub second_moment_stderrs: Vec<f64>,
    /// `E[Q_{δ_{k+1}} − Q_{δ_k}]` from coupled soups.
    pub increments: Vec<C64>,
    pub increment_stderrs: Vec<f64>,
}

/// Estimates `E[Q_δ^R]` along a decreasing ladder of cutoffs, all levels read
/// off the same soups (sampled at the smallest `δ`), so increments are
/// estimated with coupled noise.
#[allow(clippy::too_many_arguments)]
pub fn delta_ladder_diagnostic(
    spec: &TorusSpec,
    m: &MassField,
    conn0: &ConnectionSpec,
    conn1: &ConnectionSpec,
    alpha: f64,
    ladder: &[f64],
    big_r: f64,
    replicas: usize,
    steps: StepsPolicy,
    seed: u64,
) -> Result<LadderReport> {
    check_pair(spec, conn0, conn1)?;
    ensure(!ladder.is_empty(), || "empty ladder".into())?;
    ensure(ladder.windows(2).all(|w| w[0] > w[1]), || {
        "ladder must be strictly decreasing".into()
    })?;
    ensure(replicas >= 2, || "need at least two replicas".into())?;
    let smallest = *ladder.last().expect("non-empty");
    let config = SoupConfig {
        intensity_alpha: alpha,
        delta: smallest,
        big_r,
        seed,
        steps_policy: steps,
    };
    config.validate()?;
    let sampler = DurationSampler::new(spec, smallest, big_r)?;
    let detail = if winding_only(m, conn0, conn1) {
        SoupDetail::WindingOnly
    } else {
        SoupDetail::Bridges
    };
    let levels = ladder.len();
    let qs: Vec<Result<Vec<C64>>> = par_replicas(seed, replicas, |_, rng| {
        // factors[k]: product over loops with δ_k ≤ t < δ_{k−1}.
        let mut factors = vec![C64::new(1.0, 0.0); levels];
        visit_band(
            spec,
            alpha,
            &sampler,
            (0.0, sampler.total()),
            m,
            steps,
            detail,
            rng,
            |l| {
                let k = ladder.iter().position(|&d| l.duration() >= d).unwrap_or(levels - 1);
                factors[k] *= 1.0 + chi(&l, conn0, conn1)?;
                Ok(())
            },
        )?;
        let mut acc = C64::new(1.0, 0.0);
        Ok(factors
            .iter()
            .map(|f| {
                acc *= f;
                acc
            })
            .collect())
    });
    let qs = qs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut report = LadderReport {
        deltas: ladder.to_vec(),
        means: vec![],
        stderrs: vec![],
        normalized_second_moments: vec![],
        second_moment_stderrs: vec![],
        increments: vec![],
        increment_stderrs: vec![],
    };
    for k in 0..levels {
        let w = ComplexWelford::from_slice(&qs.iter().map(|q| q[k]).collect::<Vec<_>>());
        let sq = Welford::from_slice(&qs.iter().map(|q| q[k].norm_sqr()).collect::<Vec<_>>());
        let denom = w.mean().norm_sqr();
        report.means.push(w.mean());
        report.stderrs.push(w.stderr());
        let ratio = sq.mean / denom;
        let rel = (sq.stderr() / sq.mean).hypot(2.0 * w.stderr() / w.mean().norm());
        report.normalized_second_moments.push(ratio);
        report.second_moment_stderrs.push(ratio * rel);
        if k > 0 {
            let inc = ComplexWelford::from_slice(&qs.iter().map(|q| q[k] - q[k - 1]).collect::<Vec<_>>());
            report.increments.push(inc.mean());
            report.increment_stderrs.push(inc.stderr());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformalReport {
    pub delta: f64,
    pub big_r: f64,
    pub n_replicas: usize,
    /// Bound on `|f|` used to widen the sampled duration range.
    pub f_sup: f64,
    /// `E[Q]` with the cutoff `δ ≤ T ≤ R` on the `g`-clock duration.
    pub mean_g: C64,
    pub stderr_g: f64,
    /// `E[Q̂]` with the cutoff on the `e^{2f}g`-clock duration of the
    /// reparametrized loops.
    pub mean_hat: C64,
    pub stderr_hat: f64,
    /// Standard error of the paired difference `Q − Q̂`.
    pub paired_stderr: f64,
    /// `max |χ(ℓ) − χ(ℓ̂)|` over every reparametrized loop.
    pub max_chi_defect: f64,
    /// Loops in the `g` window, in the `ĝ` window, and in exactly one.
    pub loops_g: u64,
    pub loops_hat: u64,
    pub loops_exclusive: u64,
}

/// Couples the soups of `g` and `e^{2f}g` on a 2-torus: each `g`-loop is
/// reparametrized by its `e^{2f}g` quadratic variation and rerooted
/// uniformly. Both products are read off the same soups, with the duration
/// cutoff applied in the respective clock. The `g` soup is sampled on
/// `[δe^{−2‖f‖}, Re^{2‖f‖}]` so that both windows are covered.
#[allow(clippy::too_many_arguments)]
pub fn conformal_comparison<F>(
    spec: &TorusSpec,
    config: &SoupConfig,
    m: &MassField,
    f: F,
    f_sup: f64,
    conn0: &ConnectionSpec,
    conn1: &ConnectionSpec,
    n_replicas: usize,
) -> Result<ConformalReport>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    check_pair(spec, conn0, conn1)?;
    ensure(spec.dim() == 2, || "conformal coupling needs a 2-torus".into())?;
    ensure(f_sup.is_finite() && f_sup >= 0.0, || {
        "‖f‖ bound must be finite and ≥ 0".into()
    })?;
    ensure(n_replicas >= 2, || "need at least two replicas".into())?;
    let (delta, big_r) = (config.delta, config.big_r);
    let stretch = (2.0 * f_sup).exp();
    let sampler = DurationSampler::new(spec, delta / stretch, big_r * stretch)?;
    let inside = |t: f64| (delta..=big_r).contains(&t);
    type Draw = (C64, C64, f64, [u64; 3]);
    let draws: Vec<Result<Draw>> = par_replicas(config.seed, n_replicas, |_, rng| {
        let (mut q, mut q_hat, mut defect) = (C64::new(1.0, 0.0), C64::new(1.0, 0.0), 0.0f64);
        let mut counts = [0u64; 3];
        let mut pending = Vec::new();
        visit_band(
            spec,
            config.intensity_alpha,
            &sampler,
            (0.0, sampler.total()),
            m,
            config.steps_policy,
            SoupDetail::Bridges,
            rng,
            |l| {
                pending.push(l);
                Ok(())
            },
        )?;
        for l in pending {
            let hat = crate::geometry::conformal_reparam(&l, &f, rng)?;
            let ratio = hat.duration() / l.duration();
            ensure(
                ratio <= stretch * (1.0 + 1e-12) && ratio * stretch >= 1.0 - 1e-12,
                || format!("clock ratio {ratio} exceeds the bound e^(±2·{f_sup})"),
            )?;
            let c = chi(&l, conn0, conn1)?;
            let c_hat = chi(&hat, conn0, conn1)?;
            defect = defect.max((c - c_hat).norm());
            let (a, b) = (inside(l.duration()), inside(hat.duration()));
            if a {
                q *= 1.0 + c;
                counts[0] += 1;
            }
            if b {
                q_hat *= 1.0 + c_hat;
                counts[1] += 1;
            }
            if a != b {
                counts[2] += 1;
            }
        }
        Ok((q, q_hat, defect, counts))
    });
    let draws = draws.into_iter().collect::<Result<Vec<_>>>()?;
    let g = ComplexWelford::from_slice(&draws.iter().map(|d| d.0).collect::<Vec<_>>());
    let h = ComplexWelford::from_slice(&draws.iter().map(|d| d.1).collect::<Vec<_>>());
    let diff = ComplexWelford::from_slice(&draws.iter().map(|d| d.0 - d.1).collect::<Vec<_>>());
    let total = |k: usize| draws.iter().map(|d| d.3[k]).sum();
    Ok(ConformalReport {
        delta,
        big_r,
        n_replicas,
        f_sup,
        mean_g: g.mean(),
        stderr_g: g.stderr(),
        mean_hat: h.mean(),
        stderr_hat: h.stderr(),
        paired_stderr: diff.stderr(),
        max_chi_defect: draws.iter().map(|d| d.2).fold(0.0, f64::max),
        loops_g: total(0),
        loops_hat: total(1),
        loops_exclusive: total(2),
    })
}

/// Seeded convenience: a single soup's product, for CLI sampling runs.
pub fn single_soup_product(
    spec: &TorusSpec,
    config: &SoupConfig,
    m: &MassField,
    conn0: &ConnectionSpec,
    conn1: &ConnectionSpec,
    index: u64,
) -> Result<(LoopSoup, C64)> {
    let mut rng = stream(config.seed, index);
    let soup = crate::loopsoup::sample_soup(spec, config, m, &mut rng)?;
    let q = product_over_soup(&soup, conn0, conn1)?;
    Ok((soup, q))
}
