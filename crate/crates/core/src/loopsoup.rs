//! Poisson sampling of the massive Brownian loop soup restricted to durations
//! in `[δ, R]`, intensity bookkeeping, Campbell checks and soup snapshots.
//!
//! The loop measure on a flat torus is `Λ = ∫ dt/t ∫ dx p_t(x,x) P^m_{t,x,x}`.
//! Since `p_t(x,x)` does not depend on `x`, a soup is drawn as: a Poisson
//! count with mean `α·V·∫_δ^R p_t(0,0) dt/t`; i.i.d. durations from the
//! normalized density; uniform base points; bridges; then thinning with
//! probability `exp(−∫m)`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{
    heat_kernel_diagonal, mass_integral, sample_bridge, sample_winding, LoopPath, MassField, StepsPolicy, TorusSpec,
};
use crate::linalg::C64;
use crate::quadrature;
use crate::rng::par_replicas;
use crate::stats::Welford;

/// Number of knots of the tabulated duration CDF.
pub const DURATION_KNOTS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoupConfig {
    pub intensity_alpha: f64,
    pub delta: f64,
    pub big_r: f64,
    pub seed: u64,
    #[serde(default)]
    pub steps_policy: StepsPolicy,
}

impl SoupConfig {
    pub fn new(intensity_alpha: f64, delta: f64, big_r: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            intensity_alpha,
            delta,
            big_r,
            seed,
            steps_policy: StepsPolicy::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `α ≥ 0` (zero gives the empty soup) and `0 < δ < R < ∞`.
    pub fn validate(&self) -> Result<()> {
        ensure(self.intensity_alpha.is_finite() && self.intensity_alpha >= 0.0, || {
            format!("α must be ≥ 0, got {}", self.intensity_alpha)
        })?;
        ensure(self.delta.is_finite() && self.delta > 0.0, || {
            format!("δ must be positive, got {}", self.delta)
        })?;
        ensure(self.big_r.is_finite() && self.big_r > self.delta, || {
            format!("need δ < R < ∞, got δ = {}, R = {}", self.delta, self.big_r)
        })?;
        ensure(self.steps_policy.h0 > 0.0 && self.steps_policy.n_min >= 2, || {
            "invalid steps policy".into()
        })
    }
}

/// A sampled soup: the kept loops and the Poisson count before thinning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSoup {
    pub torus: TorusSpec,
    pub config: SoupConfig,
    pub loops: Vec<LoopPath>,
    pub raw_count: u64,
    pub mass_label: String,
}

impl LoopSoup {
    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }
}

fn check_cutoffs(delta: f64, big_r: f64) -> Result<()> {
    ensure(
        delta.is_finite() && delta > 0.0 && big_r.is_finite() && big_r >= delta,
        || format!("need 0 < δ ≤ R < ∞, got δ = {delta}, R = {big_r}"),
    )
}

/// `V·∫_δ^R p_t(0,0) dt/t`, integrated adaptively in `u = ln t`.
pub fn intensity_mass(spec: &TorusSpec, delta: f64, big_r: f64) -> Result<f64> {
    check_cutoffs(delta, big_r)?;
    let v = spec.volume();
    let r = quadrature::integrate(
        |u| v * heat_kernel_diagonal(spec, u.exp()),
        delta.ln(),
        big_r.ln(),
        1e-13,
        0.0,
    );
    Ok(r.value)
}

/// Tabulated CDF of `V·p_t(0,0)/t` on `[δ, R]` in `u = ln t`, inverted by
/// cubic Hermite interpolation (the density supplies exact knot slopes).
#[derive(Debug, Clone)]
pub struct DurationSampler {
    u: Vec<f64>,
    cdf: Vec<f64>,
    /// `dF/du` at the knots.
    slope: Vec<f64>,
}

impl DurationSampler {
    pub fn new(spec: &TorusSpec, delta: f64, big_r: f64) -> Result<Self> {
        check_cutoffs(delta, big_r)?;
        ensure(big_r > delta, || "empty duration range".into())?;
        let v = spec.volume();
        let dens = |u: f64| v * heat_kernel_diagonal(spec, u.exp());
        let (a, b) = (delta.ln(), big_r.ln());
        let h = (b - a) / (DURATION_KNOTS - 1) as f64;
        let u: Vec<f64> = (0..DURATION_KNOTS).map(|i| a + i as f64 * h).collect();
        let (gx, gw) = quadrature::gauss_legendre(6);
        let mut cdf = Vec::with_capacity(DURATION_KNOTS);
        cdf.push(0.0);
        for i in 1..DURATION_KNOTS {
            let (lo, hi) = (u[i - 1], u[i]);
            let piece: f64 = gx
                .iter()
                .zip(&gw)
                .map(|(x, w)| 0.5 * h * w * dens(0.5 * (lo + hi) + 0.5 * h * x))
                .sum();
            cdf.push(cdf[i - 1] + piece);
        }
        let slope = u.iter().map(|&x| dens(x)).collect();
        Ok(Self { u, cdf, slope })
    }

    /// Total tabulated mass `V·∫_δ^R p_t(0,0) dt/t`.
    pub fn total(&self) -> f64 {
        *self.cdf.last().expect("non-empty")
    }

    pub fn delta(&self) -> f64 {
        self.u[0].exp()
    }

    pub fn big_r(&self) -> f64 {
        self.u[self.u.len() - 1].exp()
    }

    fn hermite(&self, i: usize, s: f64) -> (f64, f64) {
        let h = self.u[i + 1] - self.u[i];
        let (f0, f1) = (self.cdf[i], self.cdf[i + 1]);
        let (d0, d1) = (self.slope[i] * h, self.slope[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let value =
            (2.0 * s3 - 3.0 * s2 + 1.0) * f0 + (s3 - 2.0 * s2 + s) * d0 + (-2.0 * s3 + 3.0 * s2) * f1 + (s3 - s2) * d1;
        let deriv = (6.0 * s2 - 6.0 * s) * f0
            + (3.0 * s2 - 4.0 * s + 1.0) * d0
            + (-6.0 * s2 + 6.0 * s) * f1
            + (3.0 * s2 - 2.0 * s) * d1;
        (value, deriv)
    }

    /// Mass of `[δ, t]`, clamped to the table range.
    pub fn cdf(&self, t: f64) -> f64 {
        let u = t.ln();
        if u <= self.u[0] {
            return 0.0;
        }
        if u >= self.u[self.u.len() - 1] {
            return self.total();
        }
        let h = self.u[1] - self.u[0];
        let i = (((u - self.u[0]) / h) as usize).min(self.u.len() - 2);
        self.hermite(i, (u - self.u[i]) / h).0
    }

    /// The duration `t` with `cdf(t) = mass`.
    pub fn quantile(&self, mass: f64) -> f64 {
        let mass = mass.clamp(0.0, self.total());
        let i = match self.cdf.binary_search_by(|c| c.total_cmp(&mass)) {
            Ok(i) => return self.u[i].exp(),
            Err(i) => i.clamp(1, self.cdf.len() - 1) - 1,
        };
        let span = self.cdf[i + 1] - self.cdf[i];
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut s = if span > 0.0 { (mass - self.cdf[i]) / span } else { 0.5 };
        for _ in 0..60 {
            let (f, df) = self.hermite(i, s);
            let r = f - mass;
            if r.abs() <= 1e-15 * self.total() {
                break;
            }
            if r > 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            let newton = s - r / df;
            s = if df > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        (self.u[i] + s * (self.u[i + 1] - self.u[i])).exp()
    }

    /// A duration drawn from the density restricted to masses `[lo, hi]`.
    pub fn sample_between<R: Rng + ?Sized>(&self, lo: f64, hi: f64, rng: &mut R) -> f64 {
        self.quantile(lo + rng.gen::<f64>() * (hi - lo))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sample_between(0.0, self.total(), rng)
    }
}

/// How much of each loop is materialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoupDetail {
    /// Full discretized bridges.
    Bridges,
    /// Only duration, base point and winding (three-point loops). Exact for
    /// holonomies that depend on the winding alone; requires constant mass.
    WindingOnly,
}

/// Draws the loops of one duration band (CDF masses `[lo, hi]`) and passes
/// each kept loop to `visit`. Returns the Poisson count before thinning.
#[allow(clippy::too_many_arguments)]
pub(crate) fn visit_band<R, F>(
    spec: &TorusSpec,
    alpha: f64,
    sampler: &DurationSampler,
    (lo, hi): (f64, f64),
    m: &MassField,
    steps: StepsPolicy,
    detail: SoupDetail,
    rng: &mut R,
    mut visit: F,
) -> Result<u64>
where
    R: Rng + ?Sized,
    F: FnMut(LoopPath) -> Result<()>,
{
    let mean = alpha * (hi - lo);
    let count = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .sample(rng) as u64
    } else {
        0
    };
    let constant = m.constant_value();
    ensure(detail == SoupDetail::Bridges || constant.is_some(), || {
        "winding-only soups need a constant mass".into()
    })?;
    let d = spec.dim();
    for _ in 0..count {
        let t = sampler.sample_between(lo, hi, rng);
        if let Some(c) = constant {
            // The thinning probability does not depend on the path.
            if c > 0.0 && rng.gen::<f64>() >= (-c * t).exp() {
                continue;
            }
        }
        let x = spec.uniform_point(rng);
        let path = match detail {
            SoupDetail::WindingOnly => {
                let w = sample_winding(spec, t, &vec![0.0; d], rng)?;
                let shift = spec.lattice_vector(&w);
                let mut lifted = x.clone();
                lifted.extend(x.iter().zip(&shift).map(|(a, s)| a + 0.5 * s));
                lifted.extend(x.iter().zip(&shift).map(|(a, s)| a + s));
                LoopPath::from_parts(t, x, lifted, w)?
            }
            SoupDetail::Bridges => sample_bridge(spec, t, &x, &x, steps.steps_for(t), rng)?,
        };
        if constant.is_none() && rng.gen::<f64>() >= (-mass_integral(&path, m)).exp() {
            continue;
        }
        visit(path)?;
    }
    Ok(count)
}

/// Samples the soup `L_δ^R` at intensity `α` with mass thinning, as full
/// bridges.
pub fn sample_soup<R: Rng + ?Sized>(
    spec: &TorusSpec,
    config: &SoupConfig,
    m: &MassField,
    rng: &mut R,
) -> Result<LoopSoup> {
    sample_soup_with(spec, config, m, SoupDetail::Bridges, rng)
}

pub fn sample_soup_with<R: Rng + ?Sized>(
    spec: &TorusSpec,
    config: &SoupConfig,
    m: &MassField,
    detail: SoupDetail,
    rng: &mut R,
) -> Result<LoopSoup> {
    config.validate()?;
    let sampler = DurationSampler::new(spec, config.delta, config.big_r)?;
    sample_soup_from(&sampler, spec, config, m, detail, rng)
}

/// As [`sample_soup_with`], reusing a duration table built for the same
/// torus and cutoffs. Worth it when drawing many soups.
pub fn sample_soup_from<R: Rng + ?Sized>(
    sampler: &DurationSampler,
    spec: &TorusSpec,
    config: &SoupConfig,
    m: &MassField,
    detail: SoupDetail,
    rng: &mut R,
) -> Result<LoopSoup> {
    ensure(
        (sampler.delta() / config.delta - 1.0).abs() < 1e-12 && (sampler.big_r() / config.big_r - 1.0).abs() < 1e-12,
        || "duration table does not match the soup cutoffs".into(),
    )?;
    let mut loops = Vec::new();
    let raw_count = visit_band(
        spec,
        config.intensity_alpha,
        sampler,
        (0.0, sampler.total()),
        m,
        config.steps_policy,
        detail,
        rng,
        |l| {
            loops.push(l);
            Ok(())
        },
    )?;
    Ok(LoopSoup {
        torus: spec.clone(),
        config: config.clone(),
        loops,
        raw_count,
        mass_label: m.label().to_string(),
    })
}

/// Monte Carlo check of `E[∏_{x∈P}(1 + g(x))] = exp(∫ g dμ)` for a Poisson
/// process `P` on `[0,1]` with intensity `c·Lebesgue`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CampbellReport {
    pub intensity: f64,
    pub n_samples: usize,
    pub mc_mean: C64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    pub closed_form: C64,
    /// Largest of the real- and imaginary-part z-scores.
    pub z: f64,
}

fn z_part(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff.abs() < 1e-14 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn campbell_expectation_check<G>(intensity: f64, g: G, n_samples: usize, seed: u64) -> Result<CampbellReport>
where
    G: Fn(f64) -> C64 + Sync,
{
    ensure(intensity.is_finite() && intensity >= 0.0, || {
        format!("invalid intensity {intensity}")
    })?;
    ensure(n_samples >= 2, || "need at least two samples".into())?;
    let re = quadrature::integrate(|x| g(x).re, 0.0, 1.0, 1e-13, 1e-15);
    let im = quadrature::integrate(|x| g(x).im, 0.0, 1.0, 1e-13, 1e-15);
    let closed_form = (C64::new(re.value, im.value) * intensity).exp();
    let poisson = if intensity > 0.0 {
        Some(Poisson::new(intensity).map_err(|e| Error::InvalidInput(e.to_string()))?)
    } else {
        None
    };
    let values: Vec<C64> = par_replicas(seed, n_samples, |_, rng| {
        let n = poisson.as_ref().map_or(0, |p| p.sample(rng) as u64);
        (0..n).fold(C64::new(1.0, 0.0), |acc, _| {
            acc * (C64::new(1.0, 0.0) + g(rng.gen::<f64>()))
        })
    });
    let wr = Welford::from_slice(&values.iter().map(|z| z.re).collect::<Vec<_>>());
    let wi = Welford::from_slice(&values.iter().map(|z| z.im).collect::<Vec<_>>());
    let mc_mean = C64::new(wr.mean, wi.mean);
    let z = z_part(wr.mean - closed_form.re, wr.stderr()).max(z_part(wi.mean - closed_form.im, wi.stderr()));
    Ok(CampbellReport {
        intensity,
        n_samples,
        mc_mean,
        stderr_re: wr.stderr(),
        stderr_im: wi.stderr(),
        closed_form,
        z,
    })
}

/// Leading bytes of a soup snapshot.
pub const SNAPSHOT_MAGIC: &[u8; 8] = b"LOOPSOUP";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    torus: TorusSpec,
    config: SoupConfig,
    raw_count: u64,
    mass_label: String,
    loops: Vec<SnapshotLoop>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotLoop {
    duration: f64,
    winding: Vec<i64>,
    n_points: usize,
}

/// Writes a snapshot: magic, `u32` version, `u64` header length, JSON header,
/// then every loop's lifted coordinates as little-endian `f64`.
pub fn write_snapshot<W: Write>(soup: &LoopSoup, mut out: W) -> Result<()> {
    let header = SnapshotHeader {
        torus: soup.torus.clone(),
        config: soup.config.clone(),
        raw_count: soup.raw_count,
        mass_label: soup.mass_label.clone(),
        loops: soup
            .loops
            .iter()
            .map(|l| SnapshotLoop {
                duration: l.duration(),
                winding: l.winding().to_vec(),
                n_points: l.n_steps() + 1,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for l in &soup.loops {
        for x in l.lifted_points() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_snapshot<R: Read>(mut input: R) -> Result<LoopSoup> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Format("not a soup snapshot".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: SnapshotHeader = serde_json::from_slice(&json)?;
    let d = header.torus.dim();
    let mut loops = Vec::with_capacity(header.loops.len());
    let mut buf = [0u8; 8];
    for meta in header.loops {
        let mut lifted = Vec::with_capacity(meta.n_points * d);
        for _ in 0..meta.n_points * d {
            input.read_exact(&mut buf)?;
            lifted.push(f64::from_le_bytes(buf));
        }
        let base = lifted[..d].to_vec();
        loops.push(LoopPath::from_parts(meta.duration, base, lifted, meta.winding)?);
    }
    Ok(LoopSoup {
        torus: header.torus,
        config: header.config,
        loops,
        raw_count: header.raw_count,
        mass_label: header.mass_label,
    })
}

pub fn save_snapshot(soup: &LoopSoup, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_snapshot(soup, std::io::BufWriter::new(file))
}

pub fn load_snapshot(path: &Path) -> Result<LoopSoup> {
    let file = std::fs::File::open(path)?;
    read_snapshot(std::io::BufReader::new(file))
}
