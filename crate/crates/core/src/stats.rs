//! Streaming moments, regression helpers and z-scores.

use serde::{Deserialize, Serialize};

use crate::linalg::C64;

/// Welford accumulator; merges pairwise with Chan's update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * (self.count as f64) * (other.count as f64) / n;
        self.count += other.count;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        merge_blocks(xs.iter().map(|&x| {
            let mut w = Welford::new();
            w.push(x);
            w
        }))
    }
}

/// Pairwise (tree) reduction of accumulators in the given order.
pub fn merge_blocks<I: IntoIterator<Item = Welford>>(items: I) -> Welford {
    let mut level: Vec<Welford> = items.into_iter().collect();
    if level.is_empty() {
        return Welford::new();
    }
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|c| {
                let mut a = c[0];
                if let Some(b) = c.get(1) {
                    a.merge(b);
                }
                a
            })
            .collect();
    }
    level[0]
}

/// Real and imaginary parts accumulated separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexWelford {
    pub re: Welford,
    pub im: Welford,
}

impl ComplexWelford {
    pub fn push(&mut self, z: C64) {
        self.re.push(z.re);
        self.im.push(z.im);
    }

    pub fn merge(&mut self, other: &ComplexWelford) {
        self.re.merge(&other.re);
        self.im.merge(&other.im);
    }

    pub fn count(&self) -> u64 {
        self.re.count
    }

    pub fn mean(&self) -> C64 {
        C64::new(self.re.mean, self.im.mean)
    }

    /// Standard error of the complex mean, `sqrt(E|X − μ|² / n)`.
    pub fn stderr(&self) -> f64 {
        self.re.stderr().hypot(self.im.stderr())
    }

    pub fn from_slice(zs: &[C64]) -> Self {
        Self {
            re: Welford::from_slice(&zs.iter().map(|z| z.re).collect::<Vec<_>>()),
            im: Welford::from_slice(&zs.iter().map(|z| z.im).collect::<Vec<_>>()),
        }
    }
}

/// `(a − b) / sqrt(σ_a² + σ_b²)`; zero when both values and errors coincide.
pub fn z_score(a: f64, sigma_a: f64, b: f64, sigma_b: f64) -> f64 {
    let s = sigma_a.hypot(sigma_b);
    if s == 0.0 {
        if a == b {
            0.0
        } else {
            f64::INFINITY.copysign(a - b)
        }
    } else {
        (a - b) / s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

/// Weighted least squares of `ln y` against `ln x`, with `σ_ln y = σ_y / y`.
///
/// Returns `None` if fewer than two points are usable (non-positive `y`).
pub fn loglog_fit(xs: &[f64], ys: &[f64], sigmas: &[f64]) -> Option<SlopeFit> {
    let mut pts = Vec::new();
    for ((&x, &y), &s) in xs.iter().zip(ys).zip(sigmas) {
        if x > 0.0 && y > 0.0 && y.is_finite() {
            let sl = if s > 0.0 { s / y } else { 0.0 };
            pts.push((x.ln(), y.ln(), sl));
        }
    }
    if pts.len() < 2 {
        return None;
    }
    // Points with zero reported error get the smallest positive error, or unit
    // weights when no point carries an error estimate.
    let min_pos = pts
        .iter()
        .map(|p| p.2)
        .filter(|&s| s > 0.0)
        .fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = pts
        .iter()
        .map(|p| {
            let s = if p.2 > 0.0 {
                p.2
            } else if min_pos.is_finite() {
                min_pos
            } else {
                1.0
            };
            1.0 / (s * s)
        })
        .collect();
    let sw: f64 = weights.iter().sum();
    let sx: f64 = pts.iter().zip(&weights).map(|(p, w)| w * p.0).sum();
    let sy: f64 = pts.iter().zip(&weights).map(|(p, w)| w * p.1).sum();
    let sxx: f64 = pts.iter().zip(&weights).map(|(p, w)| w * p.0 * p.0).sum();
    let sxy: f64 = pts.iter().zip(&weights).map(|(p, w)| w * p.0 * p.1).sum();
    let det = sw * sxx - sx * sx;
    if det <= 0.0 {
        return None;
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    let slope_stderr = if min_pos.is_finite() {
        (sw / det).sqrt()
    } else {
        // unweighted: residual-based error
        let n = pts.len() as f64;
        let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        if n > 2.0 {
            (rss / (n - 2.0) * sw / det).sqrt()
        } else {
            0.0
        }
    };
    Some(SlopeFit {
        slope,
        intercept,
        slope_stderr,
    })
}
