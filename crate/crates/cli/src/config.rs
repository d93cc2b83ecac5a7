//! Experiment configuration: one TOML document per experiment.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use loopdet_core::connection::{levy_area_field, su2_constant};
use loopdet_core::{CMat, ConnectionSpec, FieldType, MassField, SoupConfig, StepsPolicy, TorusSpec, C64};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Default sample count for Monte Carlo experiments.
    #[serde(default)]
    pub replicas: Option<usize>,
    /// Worker threads; `LOOPDET_WORKERS` overrides.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Output file stem relative to the output root; defaults to `name`.
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub csv: bool,
    pub manifold: Manifold,
    #[serde(default)]
    pub mass: Option<Mass>,
    #[serde(default)]
    pub connections: Vec<NamedConnection>,
    #[serde(default)]
    pub soup: Option<Soup>,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifold {
    pub side_lengths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Mass {
    Constant {
        value: f64,
    },
    /// `base + amplitude·cos(2π x_axis / L_axis)`.
    Cosine {
        base: f64,
        amplitude: f64,
        #[serde(default)]
        axis: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedConnection {
    pub name: String,
    #[serde(flatten)]
    pub form: ConnectionConfig,
}

// `flatten` ignores `deny_unknown_fields`, so split off `name` by hand.
impl<'de> Deserialize<'de> for NamedConnection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let mut table = toml::Table::deserialize(d)?;
        let name = match table.remove("name") {
            Some(toml::Value::String(s)) => s,
            _ => return Err(D::Error::custom("each connection needs a string `name`")),
        };
        let form = ConnectionConfig::deserialize(toml::Value::Table(table)).map_err(D::Error::custom)?;
        Ok(Self { name, form })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    #[default]
    Complex,
    Real,
}

impl From<FieldKind> for FieldType {
    fn from(k: FieldKind) -> Self {
        match k {
            FieldKind::Complex => FieldType::ComplexUnitary,
            FieldKind::Real => FieldType::RealOrthogonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConnectionConfig {
    Trivial {
        #[serde(default = "one")]
        rank: usize,
        #[serde(default)]
        field: FieldKind,
    },
    FlatAbelian {
        theta: Vec<f64>,
    },
    /// `a_j = i·coupling·σ_j`.
    Su2Constant {
        coupling: f64,
    },
    /// Constant skew matrices, one per axis, entries as `[re, im]`, row-major.
    Constant {
        #[serde(default)]
        field: FieldKind,
        coefficients: Vec<Vec<Vec<[f64; 2]>>>,
    },
    /// Lift-defined `A = i(B/2)(x₁dx₂ − x₂dx₁)`; contractible loops only.
    LevyArea {
        b: f64,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Soup {
    #[serde(default = "unit")]
    pub alpha: f64,
    pub delta: f64,
    pub big_r: f64,
    #[serde(default)]
    pub steps: Option<Steps>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Steps {
    pub n_min: usize,
    pub h0: f64,
}

impl From<Steps> for StepsPolicy {
    fn from(s: Steps) -> Self {
        StepsPolicy {
            n_min: s.n_min,
            h0: s.h0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegralFormParams {
    pub panels: usize,
    pub order: usize,
    pub samples_per_t: usize,
    #[serde(default)]
    pub step_budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleMember {
    pub connection: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CampbellFunction {
    /// `g ≡ value`.
    Constant { value: f64 },
    /// `g(u) = amplitude·e^{2πi·frequency·u}`.
    Oscillatory { amplitude: f64, frequency: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    ValidateKernel {
        #[serde(default)]
        suites: Option<Vec<loopdet_core::validation::Suite>>,
        #[serde(default)]
        time_budget_secs: Option<f64>,
    },
    SoupSample {
        #[serde(default)]
        snapshot: bool,
        #[serde(default = "default_bins")]
        histogram_bins: usize,
    },
    EstimateDet {
        conn0: String,
        conn1: Vec<String>,
        #[serde(default = "yes")]
        oracle: bool,
        #[serde(default)]
        integral_form: Option<IntegralFormParams>,
        /// Targets whose mean must sit below 1 by more than the tolerance.
        #[serde(default)]
        strict_diamagnetic: Vec<String>,
        #[serde(default)]
        max_rel_stderr: Option<f64>,
    },
    IntegralForm {
        conn0: String,
        conn1: String,
        grid: IntegralFormParams,
        #[serde(default = "yes")]
        oracle: bool,
    },
    SpectralOracle {
        conn0: String,
        conn1: Vec<String>,
        #[serde(default)]
        t_floor: Option<f64>,
        /// Pairs of targets expected to agree to 1e-12.
        #[serde(default)]
        expect_equal: Vec<[String; 2]>,
    },
    Moments {
        connection: String,
        t_grid: Vec<f64>,
        x_grid: Vec<Vec<f64>>,
        #[serde(default)]
        second_moment_slope_tolerance: Option<f64>,
        #[serde(default)]
        mean_slope_tolerance: Option<f64>,
        /// Overrides the `[soup]` step policy.
        #[serde(default)]
        steps: Option<Steps>,
    },
    FeynmanKac {
        connection: String,
        t: f64,
        x: Vec<f64>,
        y: Vec<f64>,
        #[serde(default = "default_bridge_steps")]
        bridge_steps: usize,
    },
    LevyArea {
        b: f64,
        t_values: Vec<f64>,
        x: Vec<f64>,
        #[serde(default)]
        fine_samples: Option<usize>,
        #[serde(default)]
        fine_h0: Option<f64>,
    },
    Symanzik {
        members: Vec<EnsembleMember>,
        #[serde(default)]
        alpha: Option<f64>,
        band: i64,
        section_band: i64,
        orders: Vec<usize>,
        /// Functionals of the member index; each order is run with each one.
        #[serde(default)]
        functionals: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        soup_weights: bool,
        #[serde(default)]
        soup_replicas: Option<usize>,
    },
    Conformal {
        conn0: String,
        conn1: String,
        /// `f(x) = amplitude·cos(2π x₁ / L₁)`.
        amplitude: f64,
        #[serde(default = "default_pathwise")]
        pathwise_tolerance: f64,
    },
    Campbell {
        intensity: f64,
        function: CampbellFunction,
        /// Independent closed form `[re, im]` to compare against.
        #[serde(default)]
        expected: Option<[f64; 2]>,
    },
}

fn yes() -> bool {
    true
}

fn default_bins() -> usize {
    20
}

fn default_bridge_steps() -> usize {
    8
}

fn default_pathwise() -> f64 {
    1e-6
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ValidateKernel { .. } => "validate-kernel",
            Self::SoupSample { .. } => "soup-sample",
            Self::EstimateDet { .. } => "estimate-det",
            Self::IntegralForm { .. } => "integral-form",
            Self::SpectralOracle { .. } => "spectral-oracle",
            Self::Moments { .. } => "moments",
            Self::FeynmanKac { .. } => "feynman-kac",
            Self::LevyArea { .. } => "levy-area",
            Self::Symanzik { .. } => "symanzik",
            Self::Conformal { .. } => "conformal",
            Self::Campbell { .. } => "campbell",
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Schema(msg) => CliError::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the canonical JSON form, so formatting does not matter.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical))
    }

    pub fn output_stem(&self) -> &str {
        self.output.as_deref().unwrap_or(&self.name)
    }

    fn check(&self) -> Result<(), CliError> {
        let schema = |msg: String| Err(CliError::Schema(msg));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return schema(format!("invalid experiment name {:?}", self.name));
        }
        if let Some(out) = &self.output {
            if out.is_empty() || Path::new(out).is_absolute() || out.split(['/', '\\']).any(|c| c == "..") {
                return schema(format!(
                    "output must be a relative path inside the output root, got {out:?}"
                ));
            }
        }
        if self.workers == Some(0) {
            return schema("workers must be at least 1".into());
        }
        let mut seen = BTreeMap::new();
        for c in &self.connections {
            if seen.insert(c.name.as_str(), ()).is_some() {
                return schema(format!("duplicate connection name {:?}", c.name));
            }
        }
        for name in self.referenced_connections() {
            if !seen.contains_key(name) {
                return schema(format!("unknown connection {name:?}"));
            }
        }
        Ok(())
    }

    fn referenced_connections(&self) -> Vec<&str> {
        match &self.experiment {
            Experiment::EstimateDet {
                conn0,
                conn1,
                strict_diamagnetic,
                ..
            } => std::iter::once(conn0)
                .chain(conn1)
                .chain(strict_diamagnetic)
                .map(String::as_str)
                .collect(),
            Experiment::SpectralOracle {
                conn0,
                conn1,
                expect_equal,
                ..
            } => std::iter::once(conn0)
                .chain(conn1)
                .chain(expect_equal.iter().flatten())
                .map(String::as_str)
                .collect(),
            Experiment::IntegralForm { conn0, conn1, .. } | Experiment::Conformal { conn0, conn1, .. } => {
                vec![conn0, conn1]
            }
            Experiment::Moments { connection, .. } | Experiment::FeynmanKac { connection, .. } => vec![connection],
            Experiment::Symanzik { members, .. } => members.iter().map(|m| m.connection.as_str()).collect(),
            _ => vec![],
        }
    }

    pub fn torus(&self) -> Result<TorusSpec, CliError> {
        Ok(TorusSpec::new(self.manifold.side_lengths.clone())?)
    }

    pub fn mass_field(&self) -> Result<MassField, CliError> {
        let torus = self.torus()?;
        match &self.mass {
            None => Err(CliError::Schema("this experiment needs a [mass] table".into())),
            Some(Mass::Constant { value }) => Ok(MassField::constant(*value)?),
            Some(Mass::Cosine { base, amplitude, axis }) => {
                let (base, amplitude, axis) = (*base, *amplitude, *axis);
                if axis >= torus.dim() {
                    return Err(CliError::Schema(format!("mass axis {axis} out of range")));
                }
                if base < amplitude.abs() {
                    return Err(CliError::Schema("cosine mass must satisfy base ≥ |amplitude|".into()));
                }
                let l = torus.side_lengths()[axis];
                Ok(MassField::field(
                    move |x| base + amplitude * (2.0 * PI * x[axis] / l).cos(),
                    base - amplitude.abs(),
                    format!("cosine:{base}:{amplitude}:{axis}"),
                )?)
            }
        }
    }

    /// Constant mass value, needed wherever a spectral model is built.
    pub fn mass0(&self) -> Result<f64, CliError> {
        match &self.mass {
            Some(Mass::Constant { value }) => Ok(*value),
            _ => Err(CliError::Schema("spectral comparisons need a constant mass".into())),
        }
    }

    pub fn connection(&self, name: &str) -> Result<ConnectionSpec, CliError> {
        let torus = self.torus()?;
        let entry = self
            .connections
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| CliError::Schema(format!("unknown connection {name:?}")))?;
        Ok(match &entry.form {
            ConnectionConfig::Trivial { rank, field } => ConnectionSpec::trivial(&torus, *rank, (*field).into())?,
            ConnectionConfig::FlatAbelian { theta } => ConnectionSpec::flat_abelian(&torus, theta.clone())?,
            ConnectionConfig::Su2Constant { coupling } => su2_constant(&torus, *coupling)?,
            ConnectionConfig::Constant { field, coefficients } => {
                let mats = coefficients
                    .iter()
                    .map(|rows| {
                        let n = rows.len();
                        if n == 0 || rows.iter().any(|r| r.len() != n) {
                            return Err(CliError::Schema(format!(
                                "connection {name:?}: matrices must be square"
                            )));
                        }
                        Ok(CMat::from_fn(n, n, |i, j| C64::new(rows[i][j][0], rows[i][j][1])))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                ConnectionSpec::constant((*field).into(), mats)?
            }
            ConnectionConfig::LevyArea { b } => levy_area_field(&torus, *b)?,
        })
    }

    pub fn soup_config(&self) -> Result<SoupConfig, CliError> {
        let soup = self
            .soup
            .as_ref()
            .ok_or_else(|| CliError::Schema("this experiment needs a [soup] table".into()))?;
        let mut cfg = SoupConfig::new(soup.alpha, soup.delta, soup.big_r, self.seed)?;
        if let Some(steps) = soup.steps {
            cfg.steps_policy = steps.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn steps(&self) -> StepsPolicy {
        self.soup
            .as_ref()
            .and_then(|s| s.steps)
            .map(Into::into)
            .unwrap_or_default()
    }

    pub fn replicas(&self) -> Result<usize, CliError> {
        match self.replicas {
            Some(n) if n >= 2 => Ok(n),
            Some(n) => Err(CliError::Schema(format!("replicas must be at least 2, got {n}"))),
            None => Err(CliError::Schema("this experiment needs `replicas`".into())),
        }
    }
}
