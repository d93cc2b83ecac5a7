//! Twisted Gaussian free fields for constant connections, annealed
//! connection ensembles, and Symanzik moment identities.
//!
//! Sections and fields are stored by Fourier modes in the orthonormal basis
//! `e_n(x)·v = V^{−1/2} e^{2πi n·x/L} v`. The pairing of a field with a section
//! is `Φ(s) = Σ_n ŝ(n)* Φ̂(n)`, so that `E[Φ(s₁) conj Φ(s₂)] = ⟨s₁, L⁻¹ s₂⟩`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::connection::{holonomy_of_points, ConnectionSpec, FieldType};
use crate::error::{ensure, Error, Result};
use crate::estimator;
use crate::geometry::{sample_free_path, MassField, StepsPolicy, TorusSpec};
use crate::linalg::{self, CMat, C64};
use crate::loopsoup::SoupConfig;
use crate::rng::{par_replicas, Stream};
use crate::spectral::{zeta_prime_diff, Certified, SpectralModel};
use crate::stats::{ComplexWelford, Welford};

/// A band-limited section of the trivial bundle, by Fourier coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    rank: usize,
    dim: usize,
    /// Sorted by mode, no duplicates.
    modes: Vec<(Vec<i64>, Vec<C64>)>,
    real: bool,
}

impl Section {
    /// Builds a section from `(n, ŝ(n))` pairs. With `real = true` the
    /// coefficients must satisfy `ŝ(−n) = conj ŝ(n)` to 1e-12.
    pub fn new(rank: usize, dim: usize, modes: Vec<(Vec<i64>, Vec<C64>)>, real: bool) -> Result<Self> {
        ensure(rank >= 1, || "rank must be ≥ 1".into())?;
        let mut modes = modes;
        for (n, v) in &modes {
            ensure(n.len() == dim, || format!("mode {n:?} has wrong dimension"))?;
            if v.len() != rank {
                return Err(Error::RankMismatch {
                    expected: rank,
                    found: v.len(),
                });
            }
            ensure(v.iter().all(|z| z.re.is_finite() && z.im.is_finite()), || {
                format!("non-finite coefficient at mode {n:?}")
            })?;
        }
        modes.sort_by(|a, b| a.0.cmp(&b.0));
        ensure(modes.windows(2).all(|w| w[0].0 != w[1].0), || "duplicate mode".into())?;
        let s = Self { rank, dim, modes, real };
        if real {
            for (n, v) in &s.modes {
                let neg: Vec<i64> = n.iter().map(|k| -k).collect();
                let mirror = s.coefficient(&neg);
                let ok = match mirror {
                    Some(w) => v.iter().zip(w).all(|(a, b)| (a - b.conj()).norm() <= 1e-12),
                    None => v.iter().all(|a| a.norm() <= 1e-12),
                };
                ensure(ok, || format!("real section is not conjugate-symmetric at mode {n:?}"))?;
            }
        }
        Ok(s)
    }

    /// A section supported on one mode (complex).
    pub fn single_mode(n: Vec<i64>, v: Vec<C64>) -> Result<Self> {
        let (rank, dim) = (v.len(), n.len());
        Self::new(rank, dim, vec![(n, v)], false)
    }

    /// The real section `v e_n + conj(v) e_{−n}`.
    pub fn real_mode(n: Vec<i64>, v: Vec<C64>) -> Result<Self> {
        let (rank, dim) = (v.len(), n.len());
        let neg: Vec<i64> = n.iter().map(|k| -k).collect();
        if neg == n {
            let re = v.iter().map(|z| C64::new(z.re, 0.0)).collect();
            return Self::new(rank, dim, vec![(n, re)], true);
        }
        let conj = v.iter().map(|z| z.conj()).collect();
        Self::new(rank, dim, vec![(n, v), (neg, conj)], true)
    }

    /// Random Gaussian coefficients on every mode with `|n|_∞ ≤ band`,
    /// symmetrized when `real`.
    pub fn random<R: Rng + ?Sized>(rank: usize, dim: usize, band: i64, real: bool, rng: &mut R) -> Result<Self> {
        ensure(band >= 0, || "band must be ≥ 0".into())?;
        let all = band_modes(dim, band);
        let mut modes = Vec::with_capacity(all.len());
        for n in all {
            let v: Vec<C64> = (0..rank).map(|_| complex_normal(rng)).collect();
            modes.push((n, v));
        }
        if real {
            let mut map: std::collections::BTreeMap<Vec<i64>, Vec<C64>> = modes.into_iter().collect();
            let keys: Vec<Vec<i64>> = map.keys().cloned().collect();
            for n in keys {
                let neg: Vec<i64> = n.iter().map(|k| -k).collect();
                if n > neg {
                    let v = map[&n].clone();
                    map.insert(neg, v.iter().map(|z| z.conj()).collect());
                } else if n == neg {
                    let v = map.get_mut(&n).expect("present");
                    v.iter_mut().for_each(|z| z.im = 0.0);
                }
            }
            modes = map.into_iter().collect();
        }
        Self::new(rank, dim, modes, real)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn modes(&self) -> &[(Vec<i64>, Vec<C64>)] {
        &self.modes
    }

    pub fn coefficient(&self, n: &[i64]) -> Option<&[C64]> {
        self.modes
            .binary_search_by(|(m, _)| m.as_slice().cmp(n))
            .ok()
            .map(|i| self.modes[i].1.as_slice())
    }

    /// Largest `|n_j|` over the support.
    pub fn band_limit(&self) -> i64 {
        self.modes
            .iter()
            .flat_map(|(n, _)| n.iter().map(|k| k.abs()))
            .max()
            .unwrap_or(0)
    }

    /// `L²` inner product `Σ_n ŝ(n)* t̂(n)`.
    pub fn inner(&self, other: &Section) -> C64 {
        let mut total = C64::new(0.0, 0.0);
        for (n, v) in &self.modes {
            if let Some(w) = other.coefficient(n) {
                total += v.iter().zip(w).map(|(a, b)| a.conj() * b).sum::<C64>();
            }
        }
        total
    }

    /// Pointwise value `s(x)`.
    pub fn eval(&self, torus: &TorusSpec, x: &[f64]) -> Vec<C64> {
        let norm = torus.volume().sqrt().recip();
        let mut out = vec![C64::new(0.0, 0.0); self.rank];
        for (n, v) in &self.modes {
            let phase: f64 = n
                .iter()
                .zip(x)
                .zip(torus.side_lengths())
                .map(|((&k, &xi), &l)| 2.0 * std::f64::consts::PI * k as f64 * xi / l)
                .sum();
            let e = C64::from_polar(norm, phase);
            for (o, c) in out.iter_mut().zip(v) {
                *o += c * e;
            }
        }
        out
    }
}

/// All modes with `|n|_∞ ≤ band`, lexicographically sorted.
fn band_modes(dim: usize, band: i64) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|p| {
                (-band..=band).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out
}

/// `(a + ib)/√2` with `a, b` standard normal, so `E|ξ|² = 1`.
fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    C64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
}

/// Stable fingerprint of a spectral model (FNV-1a over its defining data).
pub fn model_fingerprint(model: &SpectralModel) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for &l in model.torus().side_lengths() {
        eat(l.to_bits());
    }
    eat(model.mass0().to_bits());
    eat(model.rank() as u64);
    eat(matches!(model.connection().field_type(), FieldType::RealOrthogonal) as u64);
    for a in model.connection().constant_coefficients().unwrap_or_default() {
        for z in a.iter() {
            eat(z.re.to_bits());
            eat(z.im.to_bits());
        }
    }
    h
}

/// One draw of the twisted GFF, truncated to a band of modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwistedGFFSample {
    /// `Φ̂(n)` stored as a section.
    pub field: Section,
    pub model_hash: u64,
    pub seed: Option<u64>,
    pub index: Option<u64>,
}

impl TwistedGFFSample {
    /// `Φ(s) = Σ_n ŝ(n)* Φ̂(n)`; modes of `s` outside the band contribute zero
    /// and are rejected.
    pub fn pair(&self, s: &Section) -> Result<C64> {
        if s.rank() != self.field.rank() {
            return Err(Error::RankMismatch {
                expected: self.field.rank(),
                found: s.rank(),
            });
        }
        let band = self.field.band_limit();
        if let Some((n, _)) = s.modes().iter().find(|(n, _)| n.iter().any(|k| k.abs() > band)) {
            return Err(Error::ModeOutOfBand(n.clone()));
        }
        Ok(s.inner(&self.field))
    }
}

/// Precomputed `M_n^{−1/2}` for every mode in a band.
#[derive(Debug, Clone)]
pub struct GffSampler {
    rank: usize,
    dim: usize,
    real: bool,
    /// For real fields only the half-space `n ≥ −n` (lexicographic) is kept.
    roots: Vec<(Vec<i64>, CMat)>,
    model_hash: u64,
}

impl GffSampler {
    pub fn new(model: &SpectralModel, band: i64) -> Result<Self> {
        ensure(band >= 0, || "band must be ≥ 0".into())?;
        let real = model.connection().field_type() == FieldType::RealOrthogonal;
        let mut roots = Vec::new();
        for n in band_modes(model.torus().dim(), band) {
            let neg: Vec<i64> = n.iter().map(|k| -k).collect();
            if real && n < neg {
                continue;
            }
            let mode = model.mode(&n).ok_or_else(|| Error::ModeOutOfBand(n.clone()))?;
            let root = linalg::apply_spectral(&mode.eigenvalues, &mode.eigenvectors, |l| l.sqrt().recip());
            roots.push((n, root));
        }
        Ok(Self {
            rank: model.rank(),
            dim: model.torus().dim(),
            real,
            roots,
            model_hash: model_fingerprint(model),
        })
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TwistedGFFSample {
        let mut modes = Vec::with_capacity(if self.real {
            2 * self.roots.len()
        } else {
            self.roots.len()
        });
        for (n, root) in &self.roots {
            let neg: Vec<i64> = n.iter().map(|k| -k).collect();
            let self_conjugate = self.real && neg == *n;
            let xi: Vec<C64> = (0..self.rank)
                .map(|_| {
                    if self_conjugate {
                        C64::new(rng.sample(StandardNormal), 0.0)
                    } else {
                        complex_normal(rng)
                    }
                })
                .collect();
            let xi = CMat::from_column_slice(self.rank, 1, &xi);
            let mut phi: Vec<C64> = (root * xi).iter().copied().collect();
            if self_conjugate {
                // M₀ is real symmetric for real connections; drop rounding.
                phi.iter_mut().for_each(|z| z.im = 0.0);
            }
            if self.real && !self_conjugate {
                modes.push((neg, phi.iter().map(|z| z.conj()).collect()));
            }
            modes.push((n.clone(), phi));
        }
        TwistedGFFSample {
            field: Section::new(self.rank, self.dim, modes, false).expect("well-formed modes"),
            model_hash: self.model_hash,
            seed: None,
            index: None,
        }
    }
}

/// One field sample on the modes `|n|_∞ ≤ band`. Use [`GffSampler`] for
/// repeated draws.
pub fn sample_gff<R: Rng + ?Sized>(model: &SpectralModel, band: i64, rng: &mut R) -> Result<TwistedGFFSample> {
    Ok(GffSampler::new(model, band)?.sample(rng))
}

/// A finite probability measure on constant connections of a fixed rank.
#[derive(Debug, Clone)]
pub struct ConnectionEnsemble {
    names: Vec<String>,
    models: Vec<SpectralModel>,
    probabilities: Vec<f64>,
}

impl ConnectionEnsemble {
    pub fn new(torus: &TorusSpec, mass0: f64, members: Vec<(String, ConnectionSpec, f64)>) -> Result<Self> {
        ensure(!members.is_empty(), || "ensemble must have at least one member".into())?;
        let rank = members[0].1.rank();
        let field_type = members[0].1.field_type();
        let mut names = Vec::new();
        let mut models = Vec::new();
        let mut probabilities = Vec::new();
        for (name, conn, p) in members {
            if conn.rank() != rank {
                return Err(Error::RankMismatch {
                    expected: rank,
                    found: conn.rank(),
                });
            }
            ensure(conn.field_type() == field_type, || {
                "ensemble mixes real and complex members".into()
            })?;
            ensure(p.is_finite() && p > 0.0, || {
                format!("member {name} has invalid probability {p}")
            })?;
            models.push(SpectralModel::with_default_floor(torus, &conn, mass0)?);
            names.push(name);
            probabilities.push(p);
        }
        let total: f64 = probabilities.iter().sum();
        ensure((total - 1.0).abs() <= 1e-12, || {
            format!("probabilities sum to {total}, not 1")
        })?;
        Ok(Self {
            names,
            models,
            probabilities,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn models(&self) -> &[SpectralModel] {
        &self.models
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn rank(&self) -> usize {
        self.models[0].rank()
    }

    pub fn torus(&self) -> &TorusSpec {
        self.models[0].torus()
    }

    pub fn mass0(&self) -> f64 {
        self.models[0].mass0()
    }

    pub fn is_real(&self) -> bool {
        self.models[0].connection().field_type() == FieldType::RealOrthogonal
    }
}

#[derive(Debug, Clone)]
pub enum AnnealedMethod {
    /// Ratios `exp(α·[(1/n)ζ'_k − (1/n)ζ'_ref])` from the spectral oracle.
    Spectral,
    /// Ratios estimated as loop-soup expectations at intensity α.
    LoopSoup { soup: SoupConfig, replicas: usize },
}

/// Normalized annealed weights with the per-member ratios they came from.
///
/// Member 0 is the reference, so `ratios[0] = 1` exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnealedWeights {
    pub weights: Vec<f64>,
    pub weight_stderr: Vec<f64>,
    pub ratios: Vec<f64>,
    pub ratio_stderr: Vec<f64>,
    pub alpha: f64,
}

impl AnnealedWeights {
    fn from_ratios(probabilities: &[f64], ratios: Vec<f64>, ratio_stderr: Vec<f64>, alpha: f64) -> Result<Self> {
        let s: f64 = probabilities.iter().zip(&ratios).map(|(p, r)| p * r).sum();
        ensure(s > 0.0 && s.is_finite(), || {
            "annealed normalization is not positive".into()
        })?;
        let weights: Vec<f64> = probabilities.iter().zip(&ratios).map(|(p, r)| p * r / s).collect();
        // Delta method with independent ratio errors.
        let weight_stderr = (0..weights.len())
            .map(|k| {
                ratio_stderr
                    .iter()
                    .enumerate()
                    .map(|(j, &se)| {
                        let kd = if j == k { 1.0 } else { 0.0 };
                        let g = probabilities[j] * (kd - weights[k]) / s;
                        (g * se).powi(2)
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(Self {
            weights,
            weight_stderr,
            ratios,
            ratio_stderr,
            alpha,
        })
    }

    /// Standard error of `Σ_k w_k c_k` induced by the ratio uncertainties.
    pub fn stderr_of_mixture(&self, probabilities: &[f64], values: &[C64]) -> f64 {
        let s: f64 = probabilities.iter().zip(&self.ratios).map(|(p, r)| p * r).sum();
        let mix: C64 = self.weights.iter().zip(values).map(|(w, v)| v * *w).sum();
        self.ratio_stderr
            .iter()
            .enumerate()
            .map(|(j, &se)| ((values[j] - mix) * (probabilities[j] / s) * se).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

/// Annealed weights `w_k ∝ p_k·exp(α·[(1/n)ζ'_k(0) − (1/n)ζ'_ref(0)])`;
/// with `α = n/2` this is `p_k·exp(ζ'_k(0)/2 − ζ'_ref(0)/2)`.
pub fn annealed_weights(ensemble: &ConnectionEnsemble, alpha: f64, method: &AnnealedMethod) -> Result<AnnealedWeights> {
    ensure(alpha.is_finite() && alpha > 0.0, || {
        format!("α must be positive, got {alpha}")
    })?;
    let reference = &ensemble.models[0];
    let mut ratios = vec![1.0];
    let mut errors = vec![0.0];
    for model in &ensemble.models[1..] {
        match method {
            AnnealedMethod::Spectral => {
                let Certified { value, error } = zeta_prime_diff(reference, model)?;
                let r = (alpha * value).exp();
                ratios.push(r);
                errors.push(r * (alpha * error).exp_m1());
            }
            AnnealedMethod::LoopSoup { soup, replicas } => {
                let mut cfg = soup.clone();
                cfg.intensity_alpha = alpha;
                let est = estimator::estimate_partition_ratio(
                    ensemble.torus(),
                    &cfg,
                    &MassField::constant(ensemble.mass0())?,
                    reference.connection(),
                    model.connection(),
                    *replicas,
                )?;
                ratios.push(est.mean.re);
                errors.push(est.stderr);
            }
        }
    }
    AnnealedWeights::from_ratios(&ensemble.probabilities, ratios, errors, alpha)
}

/// Both sides of a Symanzik identity with their uncertainties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymanzikReport {
    pub order: usize,
    pub real: bool,
    pub formula: C64,
    pub formula_stderr: f64,
    pub direct: C64,
    pub direct_stderr: f64,
    pub samples: usize,
    pub z: f64,
    /// Number of draws that landed on each member.
    pub member_counts: Vec<u64>,
}

/// All perfect matchings of `0..2k`.
pub fn pairings(n: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(rest: &[usize], acc: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if rest.is_empty() {
            out.push(acc.clone());
            return;
        }
        let first = rest[0];
        for i in 1..rest.len() {
            let mut remaining: Vec<usize> = rest[1..].to_vec();
            let partner = remaining.remove(i - 1);
            acc.push((first, partner));
            rec(&remaining, acc, out);
            acc.pop();
        }
    }
    let mut out = Vec::new();
    if n.is_multiple_of(2) {
        rec(&(0..n).collect::<Vec<_>>(), &mut Vec::new(), &mut out);
    }
    out
}

/// All permutations of `0..k`.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Wick/Symanzik moment under one member: pairing sum (real field) or
/// permutation sum (complex field).
fn wick_moment(model: &SpectralModel, sections: &[Section], real: bool) -> Result<C64> {
    let k = sections.len() / 2;
    let mut total = C64::new(0.0, 0.0);
    if real {
        for p in pairings(2 * k) {
            let mut prod = C64::new(1.0, 0.0);
            for (i, j) in p {
                prod *= model.green_pairing(&sections[i], &sections[j])?;
            }
            total += prod;
        }
    } else {
        for sigma in permutations(k) {
            let mut prod = C64::new(1.0, 0.0);
            for (i, &j) in sigma.iter().enumerate() {
                prod *= model.green_pairing(&sections[i], &sections[k + j])?;
            }
            total += prod;
        }
    }
    Ok(total)
}

/// Field monomial whose expectation the identity computes: `∏_{i<2k} Φ(s_i)`
/// for real fields, `∏_{i<k} Φ(s_i)·conj(∏_{i≥k} Φ(s_i))` for complex ones.
fn field_monomial(sample: &TwistedGFFSample, sections: &[Section], real: bool) -> Result<C64> {
    let k = sections.len() / 2;
    let mut prod = C64::new(1.0, 0.0);
    for (i, s) in sections.iter().enumerate() {
        let v = sample.pair(s)?;
        prod *= if real || i < k { v } else { v.conj() };
    }
    Ok(prod)
}

/// Evaluates both sides of the Symanzik identity for `2k` sections and a
/// functional `f` of the member index: the weighted pairing/permutation sum,
/// and direct annealed Monte Carlo over `n_samples` (member, field) draws.
#[allow(clippy::too_many_arguments)]
pub fn symanzik_moment(
    ensemble: &ConnectionEnsemble,
    weights: &AnnealedWeights,
    sections: &[Section],
    f: &[f64],
    band: i64,
    n_samples: usize,
    seed: u64,
) -> Result<SymanzikReport> {
    let m = ensemble.len();
    ensure(f.len() == m, || format!("f has {} values for {} members", f.len(), m))?;
    ensure(weights.weights.len() == m, || {
        "weights do not match the ensemble".into()
    })?;
    ensure(!sections.is_empty() && sections.len().is_multiple_of(2), || {
        "need 2k sections".into()
    })?;
    let k = sections.len() / 2;
    ensure(k <= 3, || format!("order k = {k} exceeds 3"))?;
    let real = ensemble.is_real();
    for s in sections {
        if s.rank() != ensemble.rank() {
            return Err(Error::RankMismatch {
                expected: ensemble.rank(),
                found: s.rank(),
            });
        }
        ensure(!real || s.is_real(), || {
            "real fields need real (conjugate-symmetric) sections".into()
        })?;
        ensure(s.band_limit() <= band, || "section exceeds the sampling band".into())?;
    }

    let per_member: Vec<C64> = ensemble
        .models
        .iter()
        .zip(f)
        .map(|(model, &fk)| Ok(wick_moment(model, sections, real)? * fk))
        .collect::<Result<_>>()?;
    let formula: C64 = weights.weights.iter().zip(&per_member).map(|(w, v)| v * *w).sum();
    let formula_stderr = weights.stderr_of_mixture(&ensemble.probabilities, &per_member);

    let samplers: Vec<GffSampler> = ensemble
        .models
        .iter()
        .map(|model| GffSampler::new(model, band))
        .collect::<Result<_>>()?;
    let chooser = WeightedIndex::new(&weights.weights).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let draws: Vec<Result<(usize, C64)>> = par_replicas(seed, n_samples, |_, rng: &mut Stream| {
        let member = chooser.sample(rng);
        let phi = samplers[member].sample(rng);
        Ok((member, field_monomial(&phi, sections, real)? * f[member]))
    });
    let mut acc = ComplexWelford::default();
    let mut member_counts = vec![0u64; m];
    for d in draws {
        let (member, v) = d?;
        member_counts[member] += 1;
        acc.push(v);
    }
    let direct = acc.mean();
    let direct_stderr = acc.stderr();
    let combined = formula_stderr.hypot(direct_stderr);
    let diff = (formula - direct).norm();
    let z = if combined > 0.0 {
        diff / combined
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(SymanzikReport {
        order: k,
        real,
        formula,
        formula_stderr,
        direct,
        direct_stderr,
        samples: n_samples,
        z,
        member_counts,
    })
}

/// Monte Carlo estimate of `E[Φ(s₁) conj Φ(s₂)]` through the covariant
/// Feynman–Kac representation
/// `∫_0^∞ ∫∫ p_t(x,y) E^m_{t,x,y}[⟨s₁(x), Hol_{t,0} s₂(y)⟩] dx dy dt`.
///
/// Draws `x` uniformly, `t ~ Exp(m₀)` and a free Brownian path from `x`;
/// each sample has weight `V/m₀`. Returns the mean and its standard error.
pub fn covariance_path_integral(
    model: &SpectralModel,
    s1: &Section,
    s2: &Section,
    n_samples: usize,
    steps: StepsPolicy,
    seed: u64,
) -> Result<(C64, f64)> {
    let torus = model.torus();
    let conn = model.connection();
    for s in [s1, s2] {
        if s.rank() != model.rank() {
            return Err(Error::RankMismatch {
                expected: model.rank(),
                found: s.rank(),
            });
        }
    }
    let m0 = model.mass0();
    let weight = torus.volume() / m0;
    // Endpoint-determined holonomies need no interior points.
    let exact = conn.is_displacement_determined();
    let clock = Exp::new(m0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let values: Vec<Result<C64>> = par_replicas(seed, n_samples, |_, rng: &mut Stream| {
        let x = torus.uniform_point(rng);
        let t: f64 = rng.sample(clock);
        let n = if exact { 2 } else { steps.steps_for(t) };
        let points = sample_free_path(torus, t, &x, n, rng)?;
        let d = torus.dim();
        let y = torus.wrap(&points[n * d..]);
        let u = holonomy_of_points(conn, &points)?;
        let a = s1.eval(torus, &x);
        let b = CMat::from_column_slice(model.rank(), 1, &s2.eval(torus, &y));
        let hb = u.matrix().adjoint() * b;
        Ok(a.iter().zip(hb.iter()).map(|(p, q)| p.conj() * q).sum::<C64>() * weight)
    });
    let mut acc = ComplexWelford::default();
    for v in values {
        acc.push(v?);
    }
    Ok((acc.mean(), acc.stderr()))
}

/// Empirical marginal of the member index under the annealed sampler.
pub fn annealed_marginal(weights: &AnnealedWeights, n_samples: usize, seed: u64) -> Result<Vec<Welford>> {
    let chooser = WeightedIndex::new(&weights.weights).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let draws = par_replicas(seed, n_samples, |_, rng: &mut Stream| chooser.sample(rng));
    let mut acc = vec![Welford::new(); weights.weights.len()];
    for d in draws {
        for (j, a) in acc.iter_mut().enumerate() {
            a.push(if j == d { 1.0 } else { 0.0 });
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connection::su2_constant;
    use crate::rng::stream;

    fn unit2() -> TorusSpec {
        TorusSpec::unit(2).unwrap()
    }

    fn abelian(theta: [f64; 2]) -> ConnectionSpec {
        ConnectionSpec::flat_abelian(&unit2(), theta.to_vec()).unwrap()
    }

    fn real_su2() -> ConnectionSpec {
        // so(3)-free real rank-2 connection: a rotation generator on one axis.
        let j = CMat::from_row_slice(
            2,
            2,
            &[
                C64::new(0.0, 0.0),
                C64::new(-0.7, 0.0),
                C64::new(0.7, 0.0),
                C64::new(0.0, 0.0),
            ],
        );
        let z = CMat::zeros(2, 2);
        ConnectionSpec::constant(FieldType::RealOrthogonal, vec![j, z]).unwrap()
    }

    #[test]
    fn section_validation() {
        let v = vec![C64::new(1.0, 2.0)];
        assert!(Section::new(1, 2, vec![(vec![1, 0], v.clone())], true).is_err());
        let r = Section::real_mode(vec![1, 0], v.clone()).unwrap();
        assert!(r.is_real());
        assert_eq!(r.modes().len(), 2);
        assert!(Section::new(1, 2, vec![(vec![1, 0], v.clone()), (vec![1, 0], v.clone())], false).is_err());
        assert!(Section::new(2, 2, vec![(vec![1, 0], v)], false).is_err());
        let mut rng = stream(1, 0);
        let s = Section::random(2, 2, 2, true, &mut rng).unwrap();
        assert_eq!(s.modes().len(), 25);
        assert_eq!(s.band_limit(), 2);
    }

    #[test]
    fn section_eval_is_orthonormal_expansion() {
        let torus = TorusSpec::new(vec![2.0, 0.5]).unwrap();
        let s = Section::single_mode(vec![1, -1], vec![C64::new(0.5, 0.0)]).unwrap();
        let x = [0.3, 0.1];
        let phase = 2.0 * std::f64::consts::PI * (0.3 / 2.0 - 0.1 / 0.5);
        let expected = C64::from_polar(0.5, phase);
        assert!((s.eval(&torus, &x)[0] - expected).norm() < 1e-14);
        // A real section evaluates to real values.
        let r = Section::real_mode(vec![2, 1], vec![C64::new(0.3, -0.4)]).unwrap();
        assert!(r.eval(&torus, &x)[0].im.abs() < 1e-14);
    }

    #[test]
    fn combinatorics() {
        assert_eq!(pairings(2).len(), 1);
        assert_eq!(pairings(4).len(), 3);
        assert_eq!(pairings(6).len(), 15);
        assert_eq!(permutations(3).len(), 6);
        let mut p = permutations(3);
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 6);
    }

    #[test]
    fn pairing_is_linear() {
        let model = SpectralModel::with_default_floor(&unit2(), &abelian([0.3, 0.0]), 1.0).unwrap();
        let mut rng = stream(2, 0);
        let phi = sample_gff(&model, 3, &mut rng).unwrap();
        let a = Section::random(1, 2, 3, false, &mut rng).unwrap();
        let b = Section::random(1, 2, 3, false, &mut rng).unwrap();
        let c = C64::new(0.4, -1.3);
        let combo: Vec<(Vec<i64>, Vec<C64>)> = a
            .modes()
            .iter()
            .map(|(n, v)| (n.clone(), vec![v[0] + c.conj() * b.coefficient(n).unwrap()[0]]))
            .collect();
        let combo = Section::new(1, 2, combo, false).unwrap();
        let lhs = phi.pair(&combo).unwrap();
        let rhs = phi.pair(&a).unwrap() + c * phi.pair(&b).unwrap();
        assert!((lhs - rhs).norm() < 1e-12);
        let wide = Section::single_mode(vec![4, 0], vec![C64::new(1.0, 0.0)]).unwrap();
        assert!(matches!(phi.pair(&wide), Err(Error::ModeOutOfBand(_))));
    }

    fn covariance_battery(model: &SpectralModel, real: bool, seed: u64) {
        let band = 2;
        let sampler = GffSampler::new(model, band).unwrap();
        let n = 40_000;
        let mut rng = stream(seed, 999);
        let pairs: Vec<(Section, Section)> = (0..20)
            .map(|_| {
                (
                    Section::random(model.rank(), 2, band, real, &mut rng).unwrap(),
                    Section::random(model.rank(), 2, band, real, &mut rng).unwrap(),
                )
            })
            .collect();
        let fields: Vec<TwistedGFFSample> = par_replicas(seed, n, |_, rng| sampler.sample(rng));
        for (s1, s2) in &pairs {
            let mut cov = ComplexWelford::default();
            let mut mean = ComplexWelford::default();
            let mut pseudo = ComplexWelford::default();
            for phi in &fields {
                let a = phi.pair(s1).unwrap();
                let b = phi.pair(s2).unwrap();
                cov.push(a * b.conj());
                mean.push(a);
                pseudo.push(a * b);
            }
            let g = model.green_pairing(s1, s2).unwrap();
            let tol = 3.0 * cov.stderr();
            assert!(
                (cov.mean() - g).norm() <= tol,
                "cov {} vs green {} (tol {tol})",
                cov.mean(),
                g
            );
            assert!(mean.mean().norm() <= 3.0 * mean.stderr());
            if real {
                // Real fields: Φ(s₂) is real, so E[ΦΦ] equals the covariance.
                assert!((pseudo.mean() - g).norm() <= tol);
                assert!(fields[0].pair(s1).unwrap().im.abs() < 1e-12);
            } else {
                assert!(pseudo.mean().norm() <= 3.0 * pseudo.stderr());
            }
        }
    }

    #[test]
    fn covariance_matches_green_pairing_complex() {
        let s = unit2();
        let model = SpectralModel::with_default_floor(&s, &su2_constant(&s, 0.5).unwrap(), 1.0).unwrap();
        covariance_battery(&model, false, 11);
    }

    #[test]
    fn covariance_matches_green_pairing_real() {
        let model = SpectralModel::with_default_floor(&unit2(), &real_su2(), 0.7).unwrap();
        covariance_battery(&model, true, 12);
    }

    #[test]
    fn single_mode_variance() {
        let model = SpectralModel::with_default_floor(&unit2(), &abelian([0.3, 0.1]), 1.0).unwrap();
        let s = Section::single_mode(vec![1, -1], vec![C64::new(0.6, 0.8)]).unwrap();
        let sampler = GffSampler::new(&model, 1).unwrap();
        let vals: Vec<f64> = par_replicas(5, 100_000, |_, rng| sampler.sample(rng).pair(&s).unwrap().norm_sqr());
        let w = Welford::from_slice(&vals);
        let g = model.green_pairing(&s, &s).unwrap().re;
        assert!((w.mean - g).abs() <= 3.0 * w.stderr());
    }

    #[test]
    fn path_integral_covariance_abelian() {
        let model = SpectralModel::with_default_floor(&unit2(), &abelian([0.3, 0.0]), 1.0).unwrap();
        let s1 = Section::new(
            1,
            2,
            vec![
                (vec![0, 0], vec![C64::new(0.5, 0.0)]),
                (vec![-1, 0], vec![C64::new(1.0, 0.0)]),
                (vec![0, 1], vec![C64::new(0.0, 0.7)]),
            ],
            false,
        )
        .unwrap();
        let g = model.green_pairing(&s1, &s1).unwrap();
        let (mc, se) = covariance_path_integral(&model, &s1, &s1, 400_000, StepsPolicy::default(), 3).unwrap();
        assert!((mc - g).norm() <= 3.0 * se, "{mc} vs {g} ± {se}");
        // A cross pairing is sensitive to the direction of transport.
        let s2 = Section::single_mode(vec![-1, 0], vec![C64::new(1.0, 0.0)]).unwrap();
        let g12 = model.green_pairing(&s1, &s2).unwrap();
        let (mc12, se12) = covariance_path_integral(&model, &s1, &s2, 400_000, StepsPolicy::default(), 4).unwrap();
        assert!((mc12 - g12).norm() <= 3.0 * se12);
    }

    #[test]
    fn path_integral_covariance_su2() {
        let s = unit2();
        let model = SpectralModel::with_default_floor(&s, &su2_constant(&s, 0.5).unwrap(), 1.0).unwrap();
        let s1 = Section::new(
            2,
            2,
            vec![
                (vec![0, 0], vec![C64::new(1.0, 0.0), C64::new(0.0, 0.3)]),
                (vec![1, 0], vec![C64::new(0.0, 0.0), C64::new(0.8, 0.0)]),
            ],
            false,
        )
        .unwrap();
        let s2 = Section::single_mode(vec![0, 0], vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0)]).unwrap();
        let steps = StepsPolicy { n_min: 16, h0: 2e-2 };
        let g = model.green_pairing(&s1, &s2).unwrap();
        let (mc, se) = covariance_path_integral(&model, &s1, &s2, 100_000, steps, 9).unwrap();
        assert!((mc - g).norm() <= 3.0 * se, "{mc} vs {g} ± {se}");
    }

    #[test]
    fn single_member_weights_and_invariance() {
        let s = unit2();
        let e = ConnectionEnsemble::new(&s, 1.0, vec![("a".into(), abelian([0.2, 0.0]), 1.0)]).unwrap();
        let w = annealed_weights(&e, 0.5, &AnnealedMethod::Spectral).unwrap();
        assert_eq!(w.weights, vec![1.0]);
        // Only ratios enter: rescaling every ratio leaves weights unchanged.
        let p = [0.3, 0.7];
        let a = AnnealedWeights::from_ratios(&p, vec![1.0, 0.4], vec![0.0, 0.0], 0.5).unwrap();
        let b = AnnealedWeights::from_ratios(&p, vec![3.0, 1.2], vec![0.0, 0.0], 0.5).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ensemble_validation() {
        let s = unit2();
        let su2 = su2_constant(&s, 0.5).unwrap();
        assert!(matches!(
            ConnectionEnsemble::new(
                &s,
                1.0,
                vec![("a".into(), abelian([0.0, 0.0]), 0.5), ("b".into(), su2, 0.5)]
            ),
            Err(Error::RankMismatch { .. })
        ));
        assert!(ConnectionEnsemble::new(&s, 1.0, vec![("a".into(), abelian([0.0, 0.0]), 0.6)]).is_err());
    }

    #[test]
    fn spectral_weights_two_abelian_members() {
        let s = unit2();
        let e = ConnectionEnsemble::new(
            &s,
            1.0,
            vec![
                ("a".into(), abelian([0.0, 0.0]), 0.5),
                ("b".into(), abelian([0.5, 0.0]), 0.5),
            ],
        )
        .unwrap();
        let w = annealed_weights(&e, 0.5, &AnnealedMethod::Spectral).unwrap();
        let r = (0.5 * -1.00513f64).exp();
        assert!((w.ratios[1] - r).abs() < 1e-4);
        assert!((w.weights[0] - 1.0 / (1.0 + r)).abs() < 1e-4);
        let marg = annealed_marginal(&w, 100_000, 4).unwrap();
        for (acc, &wk) in marg.iter().zip(&w.weights) {
            assert!((acc.mean - wk).abs() <= 3.0 * acc.stderr());
        }
    }

    #[test]
    fn symanzik_single_member_k1_complex_is_green() {
        let s = unit2();
        let e = ConnectionEnsemble::new(&s, 1.0, vec![("a".into(), abelian([0.3, 0.0]), 1.0)]).unwrap();
        let w = annealed_weights(&e, 0.5, &AnnealedMethod::Spectral).unwrap();
        let mut rng = stream(8, 0);
        let s1 = Section::random(1, 2, 2, false, &mut rng).unwrap();
        let s2 = Section::random(1, 2, 2, false, &mut rng).unwrap();
        let rep = symanzik_moment(&e, &w, &[s1.clone(), s2.clone()], &[1.0], 2, 50_000, 1).unwrap();
        let g = e.models()[0].green_pairing(&s1, &s2).unwrap();
        assert!((rep.formula - g).norm() < 1e-14);
        assert!(rep.z <= 3.0);
    }

    #[test]
    fn symanzik_real_isserlis_k2() {
        let s = unit2();
        let e = ConnectionEnsemble::new(&s, 0.7, vec![("r".into(), real_su2(), 1.0)]).unwrap();
        let w = annealed_weights(&e, 1.0, &AnnealedMethod::Spectral).unwrap();
        let mut rng = stream(9, 0);
        let secs: Vec<Section> = (0..4)
            .map(|_| Section::random(2, 2, 1, true, &mut rng).unwrap())
            .collect();
        let rep = symanzik_moment(&e, &w, &secs, &[1.0], 1, 100_000, 2).unwrap();
        assert!(rep.real);
        assert!(rep.z <= 3.0, "{rep:?}");
        // Complex sections are refused for real fields.
        let c = Section::random(2, 2, 1, false, &mut rng).unwrap();
        assert!(symanzik_moment(&e, &w, &[c.clone(), c], &[1.0], 1, 10, 2).is_err());
    }

    #[test]
    fn symanzik_indicator_functional() {
        let s = unit2();
        let e = ConnectionEnsemble::new(
            &s,
            1.0,
            vec![
                ("a".into(), abelian([0.0, 0.0]), 0.5),
                ("b".into(), abelian([0.5, 0.0]), 0.5),
            ],
        )
        .unwrap();
        let w = annealed_weights(&e, 0.5, &AnnealedMethod::Spectral).unwrap();
        let s1 = Section::single_mode(vec![0, 0], vec![C64::new(1.0, 0.0)]).unwrap();
        let s2 = Section::single_mode(vec![1, 0], vec![C64::new(0.0, 1.0)]).unwrap();
        let secs = [s1.clone(), s2.clone(), s1, s2];
        let rep = symanzik_moment(&e, &w, &secs, &[0.0, 1.0], 1, 100_000, 3).unwrap();
        let under_b = wick_moment(&e.models()[1], &secs, false).unwrap();
        assert!((rep.formula - under_b * w.weights[1]).norm() < 1e-14);
        assert!(rep.z <= 3.0, "{rep:?}");
    }
}
