//! The JSON result record written for every run, and record comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Default z threshold for passing checks and comparisons.
pub const SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub name: String,
    pub kind: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub started_at: String,
    pub finished_at: String,
    pub provenance: Provenance,
    pub status: Status,
    pub checks: Vec<Check>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub workers: usize,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }

    /// `|a − b| ≤ tol`.
    pub fn within(name: impl Into<String>, a: f64, b: f64, tol: f64) -> Self {
        let diff = (a - b).abs();
        Self::new(
            name,
            diff <= tol,
            format!("|{a:.6e} − {b:.6e}| = {diff:.3e} ≤ {tol:.3e}"),
        )
    }

    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value <= bound, format!("{value:.4e} ≤ {bound:.4e}"))
    }
}

/// A scalar result. `stderr` is statistical, `bias` a deterministic bound
/// (truncation, certified oracle error); both are zero for exact values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantity {
    pub value: f64,
    #[serde(default)]
    pub stderr: f64,
    #[serde(default)]
    pub bias: f64,
}

impl Quantity {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            bias: 0.0,
        }
    }

    pub fn mc(value: f64, stderr: f64) -> Self {
        Self {
            value,
            stderr,
            bias: 0.0,
        }
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payload {
    pub quantities: BTreeMap<String, Quantity>,
    #[serde(default)]
    pub tables: Vec<Table>,
    /// Experiment-specific structured output.
    #[serde(default)]
    pub detail: serde_json::Value,
    /// Side files written next to the record (CSV tables, snapshots).
    #[serde(default)]
    pub files: Vec<String>,
}

impl ResultRecord {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let rec: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(CliError::Schema(format!(
                "{}: schema version {} (expected {SCHEMA_VERSION})",
                path.display(),
                rec.schema_version
            )));
        }
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

/// Writes each table as `<stem>.<table>.csv` and returns the file names.
pub fn write_tables(dir: &Path, stem: &str, tables: &[Table]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for t in tables {
        let path = dir.join(format!("{stem}.{}.csv", t.name));
        let io = |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(e) => CliError::io(&path, e),
            other => CliError::Schema(format!("{other:?}")),
        };
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(&t.columns).map_err(io)?;
        for row in &t.rows {
            w.write_record(row.iter().map(|x| x.to_string())).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyComparison {
    pub key_a: String,
    pub key_b: String,
    pub a: Quantity,
    pub b: Quantity,
    pub diff: f64,
    /// `diff / sqrt(σ_a² + σ_b²)`; zero when both sides agree exactly.
    pub z: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares quantities under `3·sqrt(σ_a² + σ_b²) + bias_a + bias_b`.
///
/// Without explicit pairs every key present in both records is compared.
pub fn compare(a: &ResultRecord, b: &ResultRecord, pairs: &[(String, String)]) -> Result<Vec<KeyComparison>, CliError> {
    let qa = &a.payload.quantities;
    let qb = &b.payload.quantities;
    let keys: Vec<(String, String)> = if pairs.is_empty() {
        qa.keys()
            .filter(|k| qb.contains_key(*k))
            .map(|k| (k.clone(), k.clone()))
            .collect()
    } else {
        pairs.to_vec()
    };
    if keys.is_empty() {
        return Err(CliError::Schema(format!(
            "records {:?} and {:?} share no quantities",
            a.name, b.name
        )));
    }
    keys.into_iter()
        .map(|(ka, kb)| {
            let x = *qa
                .get(&ka)
                .ok_or_else(|| CliError::Schema(format!("{:?} has no quantity {ka:?}", a.name)))?;
            let y = *qb
                .get(&kb)
                .ok_or_else(|| CliError::Schema(format!("{:?} has no quantity {kb:?}", b.name)))?;
            let diff = (x.value - y.value).abs();
            let sigma = x.stderr.hypot(y.stderr);
            let z = if diff == 0.0 { 0.0 } else { diff / sigma };
            let tolerance = SIGMAS * sigma + x.bias + y.bias;
            Ok(KeyComparison {
                key_a: ka,
                key_b: kb,
                a: x,
                b: y,
                diff,
                z,
                tolerance,
                pass: diff <= tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(q: &[(&str, Quantity)]) -> ResultRecord {
        let cfg = ExperimentConfig::parse(
            r#"
name = "r"
seed = 0
[manifold]
side_lengths = [1.0, 1.0]
[experiment]
kind = "campbell"
intensity = 1.0
function = { kind = "constant", value = 0.0 }
"#,
        )
        .unwrap();
        ResultRecord {
            schema_version: SCHEMA_VERSION,
            name: "r".into(),
            kind: "campbell".into(),
            config_hash: cfg.hash(),
            config: cfg,
            started_at: String::new(),
            finished_at: String::new(),
            provenance: Provenance {
                seed: 0,
                workers: 1,
                version: "0".into(),
            },
            status: Status::Pass,
            checks: vec![],
            payload: Payload {
                quantities: q.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                ..Default::default()
            },
        }
    }

    #[test]
    fn z_scores() {
        let a = record(&[("x", Quantity::mc(1.0, 0.3)), ("y", Quantity::exact(2.0))]);
        let b = record(&[("x", Quantity::mc(1.5, 0.4)), ("y", Quantity::exact(2.0))]);
        let c = compare(&a, &b, &[]).unwrap();
        assert_eq!(c.len(), 2);
        assert!((c[0].z - 1.0).abs() < 1e-12 && c[0].pass);
        assert_eq!(c[1].z, 0.0);
        let d = record(&[("x", Quantity::exact(1.0).with_bias(0.1))]);
        let e = record(&[("x", Quantity::exact(1.2).with_bias(0.05))]);
        assert!(!compare(&d, &e, &[]).unwrap()[0].pass);
        let paired = compare(&a, &b, &[("x".into(), "y".into())]).unwrap();
        assert_eq!(paired[0].key_b, "y");
        assert!(compare(&a, &record(&[("q", Quantity::exact(0.0))]), &[]).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let a = record(&[("x", Quantity::mc(0.1 + 0.2, 1e-17))]);
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ResultRecord>(&text).unwrap(), a);
    }
}
