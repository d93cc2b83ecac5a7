//! Experiment execution: turns a parsed config into checks and a payload.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use loopdet_core::connection::{holonomy, levy_area_field, trace_norm};
use loopdet_core::estimator::{
    conformal_comparison, estimate_partition_ratio, fit_small_t_constant, integral_form_estimate, large_r_tail_bound,
    moments_vs_t, small_t_tail_bound, IntegralGrid, MOMENT_POWERS,
};
use loopdet_core::geometry::{heat_kernel, heat_kernel_diagonal, sample_bridge, sample_bridge_in_class};
use loopdet_core::gff::{annealed_weights, symanzik_moment, AnnealedMethod};
use loopdet_core::loopsoup::{
    campbell_expectation_check, intensity_mass, sample_soup_from, save_snapshot, DurationSampler, SoupDetail,
};
use loopdet_core::quadrature::integrate;
use loopdet_core::rng::{derive_seed, par_replicas, stream};
use loopdet_core::spectral::{zeta_prime_diff, Certified};
use loopdet_core::stats::{ComplexWelford, Welford};
use loopdet_core::validation::{run_suites, Suite};
use loopdet_core::{ConnectionEnsemble, ConnectionSpec, Section, SpectralModel, StepsPolicy, C64};
use serde_json::json;

use crate::config::{CampbellFunction, Experiment, ExperimentConfig, IntegralFormParams};
use crate::error::CliError;
use crate::record::{
    write_tables, Check, Payload, Provenance, Quantity, ResultRecord, Status, Table, SCHEMA_VERSION, SIGMAS,
};

pub const ENV_WORKERS: &str = "LOOPDET_WORKERS";
pub const ENV_OUTPUT_ROOT: &str = "LOOPDET_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "results";

/// Checks and payload of one experiment, before provenance is attached.
#[derive(Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub payload: Payload,
    /// Binary side outputs to write next to the record.
    snapshot: Option<loopdet_core::LoopSoup>,
}

impl Outcome {
    fn quantity(&mut self, key: impl Into<String>, q: Quantity) {
        self.payload.quantities.insert(key.into(), q);
    }

    fn check(&mut self, c: Check) {
        self.checks.push(c);
    }
}

/// Worker count: `LOOPDET_WORKERS`, then the config, then all cores.
pub fn resolve_workers(cfg: &ExperimentConfig) -> Result<usize, CliError> {
    match std::env::var(ENV_WORKERS) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Schema(format!(
                "{ENV_WORKERS} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(cfg
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))),
    }
}

pub fn resolve_output_root() -> PathBuf {
    std::env::var_os(ENV_OUTPUT_ROOT).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Runs one config and writes its record under `root`. The record is written
/// whether or not the checks pass.
pub fn run_config(cfg: &ExperimentConfig, root: &Path) -> Result<(ResultRecord, PathBuf), CliError> {
    let workers = resolve_workers(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Schema(e.to_string()))?;
    let started_at = now();
    let mut outcome = pool.install(|| execute(cfg))?;
    let finished_at = now();

    let path = root.join(format!("{}.json", cfg.output_stem()));
    let dir = path.parent().unwrap_or(root).to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let stem = Path::new(cfg.output_stem())
        .file_name()
        .map_or_else(|| cfg.name.clone(), |s| s.to_string_lossy().into_owned());
    if cfg.csv {
        for p in write_tables(&dir, &stem, &outcome.payload.tables)? {
            outcome.payload.files.push(file_name(&p));
        }
    }
    if let Some(soup) = &outcome.snapshot {
        let p = dir.join(format!("{stem}.soup"));
        save_snapshot(soup, &p).map_err(|e| match e {
            loopdet_core::Error::Io(io) => CliError::io(&p, io),
            other => other.into(),
        })?;
        outcome.payload.files.push(file_name(&p));
    }

    let status = if outcome.checks.iter().all(|c| c.pass) {
        Status::Pass
    } else {
        Status::Fail
    };
    let record = ResultRecord {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        kind: cfg.experiment.kind().to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        started_at,
        finished_at,
        provenance: Provenance {
            seed: cfg.seed,
            workers,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        status,
        checks: outcome.checks,
        payload: outcome.payload,
    };
    record.save(&path)?;
    Ok((record, path))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Runs the experiment on the current rayon pool.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    match &cfg.experiment {
        Experiment::ValidateKernel {
            suites,
            time_budget_secs,
        } => validate_kernel(cfg, suites.as_deref(), *time_budget_secs, &mut out)?,
        Experiment::SoupSample {
            snapshot,
            histogram_bins,
        } => soup_sample(cfg, *snapshot, *histogram_bins, &mut out)?,
        Experiment::EstimateDet {
            conn0,
            conn1,
            oracle,
            integral_form,
            strict_diamagnetic,
            max_rel_stderr,
        } => estimate_det(
            cfg,
            conn0,
            conn1,
            *oracle,
            integral_form.as_ref(),
            strict_diamagnetic,
            *max_rel_stderr,
            &mut out,
        )?,
        Experiment::IntegralForm {
            conn0,
            conn1,
            grid,
            oracle,
        } => integral_form(cfg, conn0, conn1, grid, *oracle, &mut out)?,
        Experiment::SpectralOracle {
            conn0,
            conn1,
            t_floor,
            expect_equal,
        } => spectral_oracle(cfg, conn0, conn1, *t_floor, expect_equal, &mut out)?,
        Experiment::Moments {
            connection,
            t_grid,
            x_grid,
            second_moment_slope_tolerance,
            mean_slope_tolerance,
            steps,
        } => moments(
            cfg,
            connection,
            (t_grid, x_grid),
            steps.map_or_else(|| cfg.steps(), Into::into),
            (*second_moment_slope_tolerance, *mean_slope_tolerance),
            &mut out,
        )?,
        Experiment::FeynmanKac {
            connection,
            t,
            x,
            y,
            bridge_steps,
        } => feynman_kac(cfg, connection, *t, x, y, *bridge_steps, &mut out)?,
        Experiment::LevyArea {
            b,
            t_values,
            x,
            fine_samples,
            fine_h0,
        } => levy_area(cfg, *b, t_values, x, *fine_samples, *fine_h0, &mut out)?,
        Experiment::Symanzik { .. } => symanzik(cfg, &mut out)?,
        Experiment::Conformal {
            conn0,
            conn1,
            amplitude,
            pathwise_tolerance,
        } => conformal(cfg, conn0, conn1, *amplitude, *pathwise_tolerance, &mut out)?,
        Experiment::Campbell {
            intensity,
            function,
            expected,
        } => campbell(cfg, *intensity, function, *expected, &mut out)?,
    }
    Ok(out)
}

fn validate_kernel(
    cfg: &ExperimentConfig,
    suites: Option<&[Suite]>,
    budget: Option<f64>,
    out: &mut Outcome,
) -> Result<(), CliError> {
    let start = Instant::now();
    let checks = run_suites(suites.unwrap_or(&Suite::ALL), cfg.seed)?;
    let secs = start.elapsed().as_secs_f64();
    for c in &checks {
        out.check(Check::new(
            format!("{}: {}", c.suite.as_str(), c.name),
            c.pass,
            format!("{:.3e} ≤ {:.3e}", c.value, c.tolerance),
        ));
        out.quantity(format!("{}.{}", c.suite.as_str(), c.name), Quantity::exact(c.value));
    }
    if let Some(b) = budget {
        out.check(Check::at_most("time budget (s)", secs, b));
    }
    out.payload.detail = json!({ "invariants": checks.len() });
    Ok(())
}

fn soup_sample(cfg: &ExperimentConfig, snapshot: bool, bins: usize, out: &mut Outcome) -> Result<(), CliError> {
    let spec = cfg.torus()?;
    let m = cfg.mass_field()?;
    let soup_cfg = cfg.soup_config()?;
    let n = cfg.replicas()?;
    if bins == 0 {
        return Err(CliError::Schema("histogram_bins must be positive".into()));
    }
    let sampler = DurationSampler::new(&spec, soup_cfg.delta, soup_cfg.big_r)?;
    let draw = |rng: &mut loopdet_core::rng::Stream| {
        sample_soup_from(&sampler, &spec, &soup_cfg, &m, SoupDetail::Bridges, rng)
    };
    let soups = par_replicas(soup_cfg.seed, n, |_, rng| {
        let soup = draw(rng)?;
        let log_t: Vec<f64> = soup.loops.iter().map(|l| l.duration().ln()).collect();
        Ok::<_, loopdet_core::Error>((soup.raw_count as f64, log_t))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let raw = Welford::from_slice(&soups.iter().map(|s| s.0).collect::<Vec<_>>());
    let kept = Welford::from_slice(&soups.iter().map(|s| s.1.len() as f64).collect::<Vec<_>>());
    let alpha = soup_cfg.intensity_alpha;
    let expected_raw = alpha * intensity_mass(&spec, soup_cfg.delta, soup_cfg.big_r)?;
    out.quantity("raw_count", Quantity::mc(raw.mean, raw.stderr()));
    out.quantity("expected_raw_count", Quantity::exact(expected_raw));
    out.quantity("kept_count", Quantity::mc(kept.mean, kept.stderr()));
    out.check(z_check(
        "raw count vs intensity",
        raw.mean,
        raw.stderr(),
        expected_raw,
        0.0,
    ));
    if let Some(c) = m.constant_value() {
        let vol = spec.volume();
        let integral = integrate(
            |t| vol * (-c * t).exp() * heat_kernel_diagonal(&spec, t) / t,
            soup_cfg.delta,
            soup_cfg.big_r,
            1e-12,
            0.0,
        );
        let expected = alpha * integral.value;
        out.quantity("expected_kept_count", Quantity::exact(expected));
        out.check(z_check(
            "kept count vs massive intensity",
            kept.mean,
            kept.stderr(),
            expected,
            0.0,
        ));
    }

    let (lo, hi) = (soup_cfg.delta.ln(), soup_cfg.big_r.ln());
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for s in &soups {
        for &u in &s.1 {
            counts[(((u - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    out.payload.tables.push(Table {
        name: "durations".into(),
        columns: vec!["log_t_lo".into(), "log_t_hi".into(), "loops_per_soup".into()],
        rows: counts
            .iter()
            .enumerate()
            .map(|(i, &k)| vec![lo + i as f64 * width, lo + (i + 1) as f64 * width, k as f64 / n as f64])
            .collect(),
    });
    if snapshot {
        // Replica 0 again, so the snapshot is the first soup counted above.
        out.snapshot = Some(draw(&mut stream(soup_cfg.seed, 0))?);
    }
    Ok(())
}

fn z_check(name: &str, value: f64, stderr: f64, target: f64, bias: f64) -> Check {
    let diff = (value - target).abs();
    let z = if diff == 0.0 { 0.0 } else { diff / stderr };
    let tol = SIGMAS * stderr + bias;
    Check::new(
        name,
        diff <= tol,
        format!("{value:.6} ± {stderr:.2e} vs {target:.6}: z = {z:.2}, |diff| {diff:.2e} ≤ {tol:.2e}"),
    )
}

/// `exp(ζ-difference)` with its certified error.
fn oracle_ratio(cfg: &ExperimentConfig, c0: &ConnectionSpec, c1: &ConnectionSpec) -> Result<Quantity, CliError> {
    let spec = cfg.torus()?;
    let m0 = cfg.mass0()?;
    let a = SpectralModel::with_default_floor(&spec, c0, m0)?;
    let b = SpectralModel::with_default_floor(&spec, c1, m0)?;
    let z = zeta_prime_diff(&a, &b)?;
    Ok(exp_quantity(z))
}

fn exp_quantity(z: Certified) -> Quantity {
    Quantity::exact(z.value.exp()).with_bias(z.value.exp() * z.error.exp_m1())
}

#[allow(clippy::too_many_arguments)]
fn estimate_det(
    cfg: &ExperimentConfig,
    conn0: &str,
    targets: &[String],
    oracle: bool,
    integral: Option<&IntegralFormParams>,
    strict: &[String],
    max_rel: Option<f64>,
    out: &mut Outcome,
) -> Result<(), CliError> {
    let spec = cfg.torus()?;
    let m = cfg.mass_field()?;
    let base = cfg.soup_config()?;
    let n = cfg.replicas()?;
    let c0 = cfg.connection(conn0)?;
    let mut rows = Vec::new();
    for (i, name) in targets.iter().enumerate() {
        let c1 = cfg.connection(name)?;
        let mut soup_cfg = base.clone();
        soup_cfg.seed = derive_seed(cfg.seed, i as u64);
        let e = estimate_partition_ratio(&spec, &soup_cfg, &m, &c0, &c1, n)?;
        let soup = Quantity::mc(e.mean.re, e.stderr).with_bias(e.bias_bound());
        out.quantity(format!("{name}.soup"), soup);
        out.quantity(format!("{name}.soup_imag"), Quantity::mc(e.mean.im, e.stderr));
        out.check(z_check(
            &format!("{name}: imaginary part vanishes"),
            e.mean.im,
            e.stderr,
            0.0,
            0.0,
        ));
        if let Some(r) = max_rel {
            out.check(Check::at_most(
                format!("{name}: relative stderr"),
                e.stderr / e.mean.norm(),
                r,
            ));
        }
        if c0.is_trivial() {
            out.check(z_check_upper(
                &format!("{name}: diamagnetic bound"),
                e.mean.re,
                e.stderr,
            ));
        }
        if strict.contains(name) {
            let margin = 1.0 - e.mean.re;
            out.check(Check::new(
                format!("{name}: strict diamagnetic"),
                margin > SIGMAS * e.stderr,
                format!("1 − mean = {margin:.5} > {:.5}", SIGMAS * e.stderr),
            ));
        }
        let mut ratios = vec![("soup", soup)];
        if oracle {
            let o = oracle_ratio(cfg, &c0, &c1)?;
            out.quantity(format!("{name}.oracle"), o);
            ratios.push(("oracle", o));
        }
        if let Some(p) = integral {
            let i_est = run_integral(cfg, &c0, &c1, p, derive_seed(cfg.seed, 0x1000 + i as u64))?;
            let q = Quantity::mc(i_est.0.ratio, i_est.0.ratio_stderr).with_bias(i_est.0.ratio * i_est.1.exp_m1());
            out.quantity(format!("{name}.integral"), q);
            ratios.push(("integral", q));
        }
        for a in 0..ratios.len() {
            for b in a + 1..ratios.len() {
                let (la, qa) = ratios[a];
                let (lb, qb) = ratios[b];
                let tol = SIGMAS * qa.stderr.hypot(qb.stderr) + qa.bias + qb.bias;
                out.check(Check::within(format!("{name}: {la} vs {lb}"), qa.value, qb.value, tol));
            }
        }
        rows.push(vec![
            i as f64,
            e.mean.re,
            e.mean.im,
            e.stderr,
            e.small_t_bias_bound,
            e.large_r_bias_bound,
            e.fitted_c,
        ]);
        out.payload.detail[name] = serde_json::to_value(&e).expect("estimate serializes");
    }
    out.payload.tables.push(Table {
        name: "estimates".into(),
        columns: [
            "target",
            "mean_re",
            "mean_im",
            "stderr",
            "small_t_bias",
            "large_r_bias",
            "fitted_c",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    });
    Ok(())
}

fn z_check_upper(name: &str, value: f64, stderr: f64) -> Check {
    let bound = 1.0 + SIGMAS * stderr;
    Check::new(name, value <= bound, format!("{value:.5} ≤ 1 + 3σ = {bound:.5}"))
}

/// Integral-form estimate and the log-bias bound from the truncated tails.
fn run_integral(
    cfg: &ExperimentConfig,
    c0: &ConnectionSpec,
    c1: &ConnectionSpec,
    p: &IntegralFormParams,
    seed: u64,
) -> Result<(loopdet_core::estimator::IntegralFormEstimate, f64), CliError> {
    let spec = cfg.torus()?;
    let m = cfg.mass_field()?;
    let soup = cfg.soup_config()?;
    let mut grid = IntegralGrid::new(soup.delta, soup.big_r, p.panels, p.order)?;
    grid.step_budget = p.step_budget;
    let steps: StepsPolicy = cfg.steps();
    let est = integral_form_estimate(
        &spec,
        &m,
        c0,
        c1,
        &grid,
        p.samples_per_t,
        soup.intensity_alpha,
        steps,
        seed,
    )?;
    let c = fit_small_t_constant(&spec, c0, c1, soup.delta, p.samples_per_t, steps, derive_seed(seed, 1))?;
    let log_bias = soup.intensity_alpha
        * (small_t_tail_bound(&spec, soup.delta, c)? + large_r_tail_bound(&spec, soup.big_r, m.lower_bound())?);
    Ok((est, log_bias))
}

fn integral_form(
    cfg: &ExperimentConfig,
    conn0: &str,
    conn1: &str,
    p: &IntegralFormParams,
    oracle: bool,
    out: &mut Outcome,
) -> Result<(), CliError> {
    let c0 = cfg.connection(conn0)?;
    let c1 = cfg.connection(conn1)?;
    let (est, log_bias) = run_integral(cfg, &c0, &c1, p, cfg.seed)?;
    let q = Quantity::mc(est.ratio, est.ratio_stderr).with_bias(est.ratio * log_bias.exp_m1());
    out.quantity(format!("{conn1}.integral"), q);
    out.quantity(
        format!("{conn1}.integral_log"),
        Quantity::mc(est.integral, est.stderr).with_bias(log_bias),
    );
    if oracle {
        let o = oracle_ratio(cfg, &c0, &c1)?;
        out.quantity(format!("{conn1}.oracle"), o);
        let tol = SIGMAS * q.stderr + q.bias + o.bias;
        out.check(Check::within(
            format!("{conn1}: integral vs oracle"),
            q.value,
            o.value,
            tol,
        ));
    }
    out.payload.tables.push(Table {
        name: "integrand".into(),
        columns: ["t", "weight", "samples", "mean_chi", "stderr", "integrand"]
            .map(String::from)
            .to_vec(),
        rows: est
            .nodes
            .iter()
            .map(|n| vec![n.t, n.weight, n.samples as f64, n.mean_chi, n.stderr, n.integrand])
            .collect(),
    });
    Ok(())
}

fn spectral_oracle(
    cfg: &ExperimentConfig,
    conn0: &str,
    targets: &[String],
    t_floor: Option<f64>,
    expect_equal: &[[String; 2]],
    out: &mut Outcome,
) -> Result<(), CliError> {
    let spec = cfg.torus()?;
    let m0 = cfg.mass0()?;
    let model = |c: &ConnectionSpec| match t_floor {
        Some(t) => SpectralModel::new(&spec, c, m0, t),
        None => SpectralModel::with_default_floor(&spec, c, m0),
    };
    let base = model(&cfg.connection(conn0)?)?;
    let mut zetas = std::collections::BTreeMap::new();
    for name in targets {
        let m1 = model(&cfg.connection(name)?)?;
        let z = zeta_prime_diff(&base, &m1)?;
        out.quantity(format!("{name}.zeta_diff"), Quantity::exact(z.value).with_bias(z.error));
        out.quantity(format!("{name}.oracle"), exp_quantity(z));
        out.quantity(format!("{name}.gap"), Quantity::exact(m1.spectral_gap()));
        zetas.insert(name.clone(), z.value);
    }
    for [a, b] in expect_equal {
        let za = zetas
            .get(a)
            .ok_or_else(|| CliError::Schema(format!("{a:?} is not a target")))?;
        let zb = zetas
            .get(b)
            .ok_or_else(|| CliError::Schema(format!("{b:?} is not a target")))?;
        out.check(Check::within(format!("{a} = {b}"), *za, *zb, 1e-12));
    }
    Ok(())
}

fn moments(
    cfg: &ExperimentConfig,
    connection: &str,
    (t_grid, x_grid): (&[f64], &[Vec<f64>]),
    steps: StepsPolicy,
    (tol_second, tol_mean): (Option<f64>, Option<f64>),
    out: &mut Outcome,
) -> Result<(), CliError> {
    let spec = cfg.torus()?;
    let conn = cfg.connection(connection)?;
    let rep = moments_vs_t(&spec, &conn, t_grid, x_grid, cfg.replicas()?, steps, cfg.seed)?;
    for (p, fit) in MOMENT_POWERS.iter().zip(&rep.moment_slopes) {
        if let Some(f) = fit {
            out.quantity(format!("moment{p}.slope"), Quantity::mc(f.slope, f.slope_stderr));
        }
    }
    if let Some(f) = rep.mean_slope {
        out.quantity("mean.slope", Quantity::mc(f.slope, f.slope_stderr));
    }
    let slope_check = |name: &str, fit: Option<loopdet_core::stats::SlopeFit>, tol: f64| match fit {
        Some(f) => Check::within(name, f.slope, 2.0, tol),
        None => Check::new(name, false, "no usable points"),
    };
    if let Some(tol) = tol_second {
        out.check(slope_check("second-moment slope", rep.moment_slopes[1], tol));
    }
    if let Some(tol) = tol_mean {
        out.check(slope_check("mean-deviation slope", rep.mean_slope, tol));
    }
    out.payload.tables.push(Table {
        name: "moments".into(),
        columns: [
            "t",
            "m1",
            "m1_se",
            "m2",
            "m2_se",
            "m4",
            "m4_se",
            "mean_dev",
            "mean_dev_se",
        ]
        .map(String::from)
        .to_vec(),
        rows: rep
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.t,
                    r.moments[0],
                    r.moment_stderr[0],
                    r.moments[1],
                    r.moment_stderr[1],
                    r.moments[2],
                    r.moment_stderr[2],
                    r.mean_deviation,
                    r.mean_deviation_stderr,
                ]
            })
            .collect(),
    });
    Ok(())
}

fn feynman_kac(
    cfg: &ExperimentConfig,
    connection: &str,
    t: f64,
    x: &[f64],
    y: &[f64],
    steps: usize,
    out: &mut Outcome,
) -> Result<(), CliError> {
    let spec = cfg.torus()?;
    let m0 = cfg.mass0()?;
    let conn = cfg.connection(connection)?;
    let model = SpectralModel::with_default_floor(&spec, &conn, m0)?;
    let (k, k_err) = model.heat_kernel_twisted(t, x, y)?;
    let n = conn.rank();
    let draws = par_replicas(cfg.seed, cfg.replicas()?, |_, rng| {
        let path = sample_bridge(&spec, t, x, y, steps, rng)?;
        Ok::<_, loopdet_core::Error>(holonomy(&path, &conn)?.matrix().adjoint())
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let scale = (-m0 * t).exp() * heat_kernel(&spec, t, x, y)?;
    for i in 0..n {
        for j in 0..n {
            let w = ComplexWelford::from_slice(&draws.iter().map(|u| u[(i, j)]).collect::<Vec<_>>());
            let mc = w.mean() * scale;
            let se = w.stderr() * scale;
            let diff = (k[(i, j)] - mc).norm();
            let tol = SIGMAS * se + k_err;
            out.quantity(
                format!("k{i}{j}.spectral_re"),
                Quantity::exact(k[(i, j)].re).with_bias(k_err),
            );
            out.quantity(format!("k{i}{j}.mc_re"), Quantity::mc(mc.re, se));
            out.check(Check::new(
                format!("kernel entry ({i},{j})"),
                diff <= tol,
                format!("spectral {:.6}, MC {:.6}, |diff| {diff:.2e} ≤ {tol:.2e}", k[(i, j)], mc),
            ));
        }
    }
    Ok(())
}

fn levy_area(
    cfg: &ExperimentConfig,
    b: f64,
    t_values: &[f64],
    x: &[f64],
    fine_samples: Option<usize>,
    fine_h0: Option<f64>,
    out: &mut Outcome,
) -> Result<(), CliError> {
    let spec = cfg.torus()?;
    let conn = levy_area_field(&spec, b)?;
    let n = cfg.replicas()?;
    let zero = vec![0i64; spec.dim()];
    let run = |t: f64, steps: StepsPolicy, count: usize, seed: u64| -> Result<Welford, CliError> {
        let vals = par_replicas(seed, count, |_, rng| {
            let l = sample_bridge_in_class(&spec, t, x, x, &zero, steps.steps_for(t), rng)?;
            Ok::<_, loopdet_core::Error>(trace_norm(&holonomy(&l, &conn)?).re)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        Ok(Welford::from_slice(&vals))
    };
    for (i, &t) in t_values.iter().enumerate() {
        let closed = if b * t == 0.0 {
            1.0
        } else {
            b * t / (2.0 * (b * t / 2.0).sinh())
        };
        out.quantity(format!("t{t}.oracle"), Quantity::exact(closed));
        let mc = run(t, cfg.steps(), n, derive_seed(cfg.seed, i as u64))?;
        out.quantity(format!("t{t}.mc"), Quantity::mc(mc.mean, mc.stderr()));
        out.check(z_check(
            &format!("t={t}: bridge average"),
            mc.mean,
            mc.stderr(),
            closed,
            0.0,
        ));
        if let Some(fs) = fine_samples {
            let policy = StepsPolicy {
                n_min: cfg.steps().n_min,
                h0: fine_h0.unwrap_or(1e-5),
            };
            let fine = run(t, policy, fs, derive_seed(cfg.seed, 0x100 + i as u64))?;
            out.quantity(format!("t{t}.fine"), Quantity::mc(fine.mean, fine.stderr()));
            out.check(z_check(
                &format!("t={t}: fine-step average"),
                fine.mean,
                fine.stderr(),
                closed,
                0.0,
            ));
        }
    }
    Ok(())
}

fn symanzik(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let Experiment::Symanzik {
        members,
        alpha,
        band,
        section_band,
        orders,
        functionals,
        soup_weights,
        soup_replicas,
    } = &cfg.experiment
    else {
        unreachable!("dispatched on kind");
    };
    let spec = cfg.torus()?;
    let m0 = cfg.mass0()?;
    let list = members
        .iter()
        .map(|mem| {
            Ok((
                mem.connection.clone(),
                cfg.connection(&mem.connection)?,
                mem.probability,
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let ensemble = ConnectionEnsemble::new(&spec, m0, list)?;
    let alpha = alpha.unwrap_or(1.0);
    let weights = annealed_weights(&ensemble, alpha, &AnnealedMethod::Spectral)?;
    for (name, w) in ensemble.names().iter().zip(&weights.weights) {
        out.quantity(format!("{name}.weight"), Quantity::exact(*w));
    }
    let fs = functionals.clone().unwrap_or_else(|| vec![vec![1.0; ensemble.len()]]);
    let mut rng = stream(derive_seed(cfg.seed, 0x5EC), 0);
    let mut run = 0u64;
    for &k in orders {
        let secs = (0..2 * k)
            .map(|_| Section::random(ensemble.rank(), spec.dim(), *section_band, ensemble.is_real(), &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        for (j, f) in fs.iter().enumerate() {
            let r = symanzik_moment(
                &ensemble,
                &weights,
                &secs,
                f,
                *band,
                cfg.replicas()?,
                derive_seed(cfg.seed, run),
            )?;
            run += 1;
            out.quantity(
                format!("k{k}.f{j}.formula_re"),
                Quantity::mc(r.formula.re, r.formula_stderr),
            );
            out.quantity(
                format!("k{k}.f{j}.direct_re"),
                Quantity::mc(r.direct.re, r.direct_stderr),
            );
            out.check(Check::at_most(
                format!("order {k}, functional {j}: |z| formula vs direct"),
                r.z,
                SIGMAS,
            ));
        }
    }
    if *soup_weights {
        let mut soup = cfg.soup_config()?;
        soup.intensity_alpha = alpha;
        let by_soup = annealed_weights(
            &ensemble,
            alpha,
            &AnnealedMethod::LoopSoup {
                soup,
                replicas: soup_replicas.unwrap_or(cfg.replicas()?),
            },
        )?;
        for (j, name) in ensemble.names().iter().enumerate().skip(1) {
            let (a, b) = (weights.ratios[j], by_soup.ratios[j]);
            let sa = weights.ratio_stderr[j];
            let sb = by_soup.ratio_stderr[j];
            out.quantity(format!("{name}.ratio_spectral"), Quantity::mc(a, sa));
            out.quantity(format!("{name}.ratio_soup"), Quantity::mc(b, sb));
            out.check(z_check(
                &format!("{name}: soup vs spectral weight ratio"),
                b,
                sa.hypot(sb),
                a,
                0.0,
            ));
        }
    }
    Ok(())
}

fn conformal(
    cfg: &ExperimentConfig,
    conn0: &str,
    conn1: &str,
    amplitude: f64,
    tol: f64,
    out: &mut Outcome,
) -> Result<(), CliError> {
    let spec = cfg.torus()?;
    let l0 = spec.side_lengths()[0];
    let f = move |x: &[f64]| amplitude * (2.0 * PI * x[0] / l0).cos();
    let r = conformal_comparison(
        &spec,
        &cfg.soup_config()?,
        &cfg.mass_field()?,
        f,
        amplitude.abs(),
        &cfg.connection(conn0)?,
        &cfg.connection(conn1)?,
        cfg.replicas()?,
    )?;
    out.quantity("g_clock", Quantity::mc(r.mean_g.re, r.stderr_g));
    out.quantity("hat_clock", Quantity::mc(r.mean_hat.re, r.stderr_hat));
    out.quantity("max_chi_defect", Quantity::exact(r.max_chi_defect));
    let diff = (r.mean_g - r.mean_hat).norm();
    let bound = SIGMAS * r.stderr_g.hypot(r.stderr_hat);
    out.check(Check::at_most("clock means agree", diff, bound));
    out.check(Check::at_most("pathwise holonomy defect", r.max_chi_defect, tol));
    out.payload.detail = serde_json::to_value(&r).expect("report serializes");
    Ok(())
}

fn campbell(
    cfg: &ExperimentConfig,
    intensity: f64,
    function: &CampbellFunction,
    expected: Option<[f64; 2]>,
    out: &mut Outcome,
) -> Result<(), CliError> {
    let n = cfg.replicas()?;
    let r = match *function {
        CampbellFunction::Constant { value } => {
            campbell_expectation_check(intensity, |_| C64::new(value, 0.0), n, cfg.seed)?
        }
        CampbellFunction::Oscillatory { amplitude, frequency } => campbell_expectation_check(
            intensity,
            |u| C64::from_polar(amplitude, 2.0 * PI * frequency as f64 * u),
            n,
            cfg.seed,
        )?,
    };
    out.quantity("mc_re", Quantity::mc(r.mc_mean.re, r.stderr_re));
    out.quantity("mc_im", Quantity::mc(r.mc_mean.im, r.stderr_im));
    out.quantity("closed_form_re", Quantity::exact(r.closed_form.re));
    out.quantity("closed_form_im", Quantity::exact(r.closed_form.im));
    out.check(Check::at_most("|z| vs quadrature closed form", r.z, SIGMAS));
    if let Some([re, im]) = expected {
        out.check(z_check("real part vs expected", r.mc_mean.re, r.stderr_re, re, 0.0));
        out.check(z_check(
            "imaginary part vs expected",
            r.mc_mean.im,
            r.stderr_im,
            im,
            0.0,
        ));
    }
    Ok(())
}
