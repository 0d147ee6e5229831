//! File-based experiment orchestration behind the `onctl` binary.
//!
//! A run writes, under `<out>/<name>/`:
//!
//! ```text
//! summary.json
//! T<T>/trace.csv        t, x…, u…, w…, cost, ideal_cost, policy_movement
//! T<T>/comparators.csv  per-step costs of every comparator
//! T<T>/regret.svg       cumulative regret against each comparator
//! error.json            only when a run aborts
//! ```

mod checks;
pub mod spec;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::controller::{
    best_linear_in_hindsight, best_policy_in_hindsight, diagonal_costs, linear_rollout_costs, regret_series,
    run_gpc, run_linear_baseline, run_ons_counterexample, scalar_gain_grid, EtaRule, ExperimentTrace,
};
use crate::error::ControlError;
use crate::svg::{regret_plot, Series};
use crate::transfer::TransferCache;

pub use checks::{oracle, verify, CheckResult};
pub use spec::{parse_spec, parse_spec_str, ControlSpec, CostSpec, ExperimentSpec, LinearGrid, Scenario, SpecError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid spec:\n{0}")]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("io: {0}")]
    Io(String),
    #[error("{0} property check(s) failed")]
    ChecksFailed(usize),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl HarnessError {
    /// 2 spec validation, 3 numerical abort, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Spec(_) => 2,
            HarnessError::Io(_) => 4,
            HarnessError::ChecksFailed(_) => 3,
            HarnessError::Control(e) => match e {
                ControlError::Io(_) | ControlError::Csv(_) => 4,
                ControlError::StateDiverged { .. }
                | ControlError::DecompositionFailed { .. }
                | ControlError::Singular(_)
                | ControlError::StateBoundDiverges => 3,
                _ => 2,
            },
        }
    }
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

/// Attaches the offending path to an I/O failure.
fn at<T>(path: &Path, r: std::io::Result<T>) -> HarnessResult<T> {
    r.map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn csv_at<T>(path: &Path, r: csv::Result<T>) -> HarnessResult<T> {
    r.map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Outcome for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonResult {
    pub horizon: usize,
    pub regret_vs_best_m: f64,
    pub regret_vs_best_k: Option<f64>,
    pub mean_gap: f64,
    pub max_state_norm: f64,
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub runs: Vec<HorizonResult>,
    pub slope_loglog: Option<f64>,
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    name: &'a str,
    #[serde(rename = "T")]
    t: Vec<usize>,
    #[serde(rename = "regret_vs_best_M")]
    regret_vs_best_m: Vec<f64>,
    #[serde(rename = "regret_vs_best_K")]
    regret_vs_best_k: Option<Vec<Option<f64>>>,
    mean_gap: Vec<f64>,
    max_state_norm: Vec<f64>,
    slope_loglog: Option<f64>,
}

impl RunSummary {
    /// Wall-clock times are left out so the file is reproducible.
    pub fn to_json(&self) -> String {
        let has_k = self.runs.iter().any(|r| r.regret_vs_best_k.is_some());
        let doc = SummaryJson {
            name: &self.name,
            t: self.runs.iter().map(|r| r.horizon).collect(),
            regret_vs_best_m: self.runs.iter().map(|r| r.regret_vs_best_m).collect(),
            regret_vs_best_k: has_k.then(|| self.runs.iter().map(|r| r.regret_vs_best_k).collect()),
            mean_gap: self.runs.iter().map(|r| r.mean_gap).collect(),
            max_state_norm: self.runs.iter().map(|r| r.max_state_norm).collect(),
            slope_loglog: self.slope_loglog,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("summary serializes");
        s.push('\n');
        s
    }
}

/// Least-squares slope of `ln regret` on `ln T`, over points with positive
/// regret. `None` with fewer than two such points.
pub fn loglog_slope(points: &[(usize, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, r)| *r > 0.0 && r.is_finite())
        .map(|(t, r)| ((*t as f64).ln(), r.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub quiet: bool,
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            quiet: true,
            threads: 1,
        }
    }
}

/// Runs every horizon of `spec` and writes artifacts under `<out>/<name>/`.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> HarnessResult<RunSummary> {
    run_into(spec, &opts.out_dir.join(&spec.name), opts.quiet)
}

fn run_into(spec: &ExperimentSpec, dir: &Path, quiet: bool) -> HarnessResult<RunSummary> {
    at(dir, fs::create_dir_all(dir))?;
    let error_path = dir.join("error.json");
    if error_path.exists() {
        at(&error_path, fs::remove_file(&error_path))?;
    }
    let mut runs = Vec::with_capacity(spec.horizons.len());
    for &t in &spec.horizons {
        let sub = dir.join(format!("T{t}"));
        at(&sub, fs::create_dir_all(&sub))?;
        let started = Instant::now();
        let outcome = match &spec.scenario {
            Scenario::Control(c) => run_control(spec, c, t, &sub),
            Scenario::OnsCounterexample { delta } => run_ons(spec, *delta, t, &sub),
        };
        let mut result = match outcome {
            Ok(r) => r,
            Err(e) => {
                write_error(&error_path, spec, t, &e)?;
                return Err(e);
            }
        };
        result.wall_clock = started.elapsed();
        if !quiet {
            let k = result
                .regret_vs_best_k
                .map_or(String::new(), |k| format!(" regret_vs_best_K={k:.6}"));
            eprintln!(
                "{}: T={t} regret_vs_best_M={:.6}{k} mean_gap={:.3e} max_state_norm={:.4} ({:.2?})",
                spec.name, result.regret_vs_best_m, result.mean_gap, result.max_state_norm, result.wall_clock
            );
        }
        runs.push(result);
    }
    let slope_loglog = loglog_slope(&runs.iter().map(|r| (r.horizon, r.regret_vs_best_m)).collect::<Vec<_>>());
    let summary = RunSummary {
        name: spec.name.clone(),
        runs,
        slope_loglog,
    };
    let path = dir.join("summary.json");
    at(&path, fs::write(&path, summary.to_json()))?;
    Ok(summary)
}

fn write_error(path: &Path, spec: &ExperimentSpec, t: usize, e: &HarnessError) -> HarnessResult<()> {
    let mut doc = serde_json::json!({
        "name": spec.name,
        "T": t,
        "exit_code": e.exit_code(),
        "error": e.to_string(),
    });
    if let HarnessError::Control(ControlError::StateDiverged { t, norm, threshold }) = e {
        doc["diverged_at"] = serde_json::json!({"t": t, "norm": norm, "threshold": threshold});
    }
    at(path, fs::write(path, serde_json::to_string_pretty(&doc).expect("json") + "\n"))?;
    Ok(())
}

fn fmt_f(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v}")
}

fn write_trace(path: &Path, trace: &ExperimentTrace) -> HarnessResult<()> {
    let first = trace.records.first();
    let (dx, du) = first.map_or((0, 0), |r| (r.x.len(), r.u.len()));
    let mut header = vec!["t".to_string()];
    header.extend((0..dx).map(|i| format!("x{i}")));
    header.extend((0..du).map(|i| format!("u{i}")));
    header.extend((0..dx).map(|i| format!("w{i}")));
    header.extend(["cost", "ideal_cost", "policy_movement"].map(String::from));
    csv_at(path, write_trace_rows(path, &header, trace))
}

fn write_trace_rows(path: &Path, header: &[String], trace: &ExperimentTrace) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    let mut row = Vec::with_capacity(header.len());
    for r in &trace.records {
        row.clear();
        row.push(r.t.to_string());
        row.extend(r.x.iter().map(|v| fmt_f(*v)));
        row.extend(r.u.iter().map(|v| fmt_f(*v)));
        row.extend(r.w.iter().map(|v| fmt_f(*v)));
        row.extend([r.cost, r.ideal_cost, r.movement].map(fmt_f));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_columns(path: &Path, columns: &[(&str, &[f64])]) -> HarnessResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t"];
    header.extend(columns.iter().map(|c| c.0));
    w.write_record(&header)?;
    let n = columns.iter().map(|c| c.1.len()).max().unwrap_or(0);
    for t in 0..n {
        let mut row = vec![t.to_string()];
        row.extend(columns.iter().map(|c| c.1.get(t).map_or(String::new(), |v| fmt_f(*v))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cumulative_difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            acc += x - y;
            acc
        })
        .collect()
}

fn run_control(spec: &ExperimentSpec, c: &ControlSpec, t: usize, dir: &Path) -> HarnessResult<HorizonResult> {
    let cfg = c.config(t, spec.seed)?;
    let trace = run_gpc(&cfg)?;
    let baseline = run_linear_baseline(&c.system, &c.controller, &cfg.disturbance, cfg.cost.clone(), t)?;
    let w = trace.disturbances();
    let cost = cfg.cost.as_ref();

    let best = best_policy_in_hindsight(&w, cost, &c.controller, &c.system, trace.h, &cfg.radii())?;
    let cache = TransferCache::new(&c.system, &c.controller, trace.h)?;
    let best_m_costs = diagonal_costs(cost, &cache, &w, &best.policy)?;
    let regret_m = regret_series(&trace, &best_m_costs)?;
    let baseline_costs = baseline.costs();
    let costs = trace.costs();

    let grid = match &c.linear_grid {
        None => None,
        Some(LinearGrid::Gains(g)) => Some(g.clone()),
        Some(LinearGrid::Scalar { count }) => Some(scalar_gain_grid(
            &c.system,
            c.controller.kappa(),
            c.controller.gamma(),
            *count,
        )?),
    };
    let best_k_costs = match grid {
        Some(g) => {
            let (k, _) = best_linear_in_hindsight(&w, cost, &c.system, &g)?;
            Some(linear_rollout_costs(&c.system, &k, &w, cost)?)
        }
        None => None,
    };

    write_trace(&dir.join("trace.csv"), &trace)?;
    let mut columns: Vec<(&str, &[f64])> = vec![("best_M", &best_m_costs), ("fixed_K", &baseline_costs)];
    if let Some(k) = &best_k_costs {
        columns.push(("best_K", k));
    }
    write_columns(&dir.join("comparators.csv"), &columns)?;

    let mut series = vec![
        Series::new("vs best M in hindsight", regret_m.clone()),
        Series::new("vs fixed K baseline", cumulative_difference(&costs, &baseline_costs)),
    ];
    let regret_k = best_k_costs.as_ref().map(|k| cumulative_difference(&costs, k));
    if let Some(r) = &regret_k {
        series.push(Series::new("vs best K on grid", r.clone()));
    }
    fs::write(
        dir.join("regret.svg"),
        regret_plot(&format!("{} (T = {t}, H = {})", spec.name, trace.h), &series),
    )?;

    Ok(HorizonResult {
        horizon: t,
        regret_vs_best_m: regret_m.last().copied().unwrap_or(0.0),
        regret_vs_best_k: regret_k.and_then(|r| r.last().copied()),
        mean_gap: trace.mean_gap(),
        max_state_norm: trace.max_state_norm(),
        wall_clock: Duration::ZERO,
    })
}

fn run_ons(spec: &ExperimentSpec, delta: f64, t: usize, dir: &Path) -> HarnessResult<HorizonResult> {
    let res = run_ons_counterexample(t, delta)?;
    let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
    w.write_record(["t", "x0", "cost", "ideal_cost", "policy_movement"])?;
    for (k, (x, l)) in res.points.iter().zip(&res.losses).enumerate() {
        // Movement into x_t is the step taken after t − 1.
        let moved = if k == 0 { 0.0 } else { res.movements[k - 1] };
        w.write_record([k.to_string(), fmt_f(*x), fmt_f(*l), fmt_f(*l), fmt_f(moved)])?;
    }
    w.flush()?;
    let best = vec![res.best_loss; t];
    write_columns(&dir.join("comparators.csv"), &[("best_point", &best)])?;
    let regret = res.regret_series();
    fs::write(
        dir.join("regret.svg"),
        regret_plot(
            &format!("{} (T = {t})", spec.name),
            &[Series::new("vs best fixed point", regret.clone())],
        ),
    )?;
    Ok(HorizonResult {
        horizon: t,
        regret_vs_best_m: regret.last().copied().unwrap_or(0.0),
        regret_vs_best_k: None,
        mean_gap: 0.0,
        max_state_norm: res.points.iter().fold(0.0, |a, x| a.max(x.abs())),
        wall_clock: Duration::ZERO,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    H,
    Eta,
    Gamma,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::H => "H",
            SweepParam::Eta => "eta",
            SweepParam::Gamma => "gamma",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "H" | "h" => Ok(SweepParam::H),
            "eta" => Ok(SweepParam::Eta),
            "gamma" => Ok(SweepParam::Gamma),
            other => Err(format!("unknown sweep parameter `{other}` (expected H, eta or gamma)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub final_regret: f64,
    pub mean_gap: f64,
}

/// The spec with one parameter replaced.
pub fn override_spec(spec: &ExperimentSpec, param: SweepParam, value: f64) -> Result<ExperimentSpec, SpecError> {
    let ptr = format!("/{}", param.name());
    if !(value > 0.0 && value.is_finite()) {
        return Err(SpecError::single(ptr, format!("sweep values must be positive, got {value}")));
    }
    let Scenario::Control(c) = &spec.scenario else {
        return Err(SpecError::single("/scenario", "sweeps need the gpc scenario"));
    };
    let mut c = c.as_ref().clone();
    match param {
        SweepParam::H => {
            if value.fract() != 0.0 {
                return Err(SpecError::single(ptr, format!("H must be an integer, got {value}")));
            }
            c.memory = Some(value as usize);
        }
        SweepParam::Eta => c.eta = EtaRule::Fixed(value),
        SweepParam::Gamma => {
            if value > 1.0 {
                return Err(SpecError::single("/controller/gamma", format!("must lie in (0, 1], got {value}")));
            }
            c.controller = c
                .controller
                .with_gamma(value)
                .map_err(|e| SpecError::single("/controller/gamma", e.to_string()))?;
            let depth = 2 * spec.horizons.iter().map(|&t| c.memory_for(t)).max().unwrap_or(1) + 1;
            let report = crate::policy::verify_strong_stability(&c.system, &c.controller, depth)
                .map_err(|e| SpecError::single("/controller", e.to_string()))?;
            if !report.passed {
                return Err(SpecError::single(
                    "/controller/gamma",
                    format!("gamma = {value}: {}", report.details),
                ));
            }
        }
    }
    for &t in &spec.horizons {
        let h = c.memory_for(t);
        let ctrl = &c.controller;
        if crate::oco::state_bound(ctrl.kappa(), ctrl.gamma(), c.system.kappa_b(), c.system.w_bound(), h).is_err() {
            return Err(SpecError::single(ptr, format!("state bound diverges at {} = {value}", param.name())));
        }
    }
    Ok(ExperimentSpec {
        scenario: Scenario::Control(Box::new(c)),
        ..spec.clone()
    })
}

fn value_label(param: SweepParam, v: f64) -> String {
    format!("{}={}", param.name(), fmt_f(v))
}

/// One run per value, each in `<out>/<name>/sweep_<param>/<param>=<value>/`,
/// plus `sweep_<param>.csv` with the largest horizon's results.
pub fn sweep(spec: &ExperimentSpec, param: SweepParam, values: &[f64], opts: &RunOptions) -> HarnessResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(SpecError::single(format!("/{}", param.name()), "sweep needs at least one value").into());
    }
    let specs = values
        .iter()
        .map(|&v| override_spec(spec, param, v))
        .collect::<Result<Vec<_>, _>>()?;
    let root = opts.out_dir.join(&spec.name).join(format!("sweep_{}", param.name()));
    let job = |(s, v): (&ExperimentSpec, f64)| -> HarnessResult<SweepRow> {
        let summary = run_into(s, &root.join(value_label(param, v)), opts.quiet)?;
        let last = summary.runs.last().expect("at least one horizon");
        Ok(SweepRow {
            value: v,
            final_regret: last.regret_vs_best_m,
            mean_gap: last.mean_gap,
        })
    };
    let pairs: Vec<(&ExperimentSpec, f64)> = specs.iter().zip(values.iter().copied()).collect();
    let results: Vec<HarnessResult<SweepRow>> = if opts.threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| HarnessError::Io(e.to_string()))?;
        pool.install(|| pairs.par_iter().map(|p| job(*p)).collect())
    } else {
        pairs.iter().map(|p| job(*p)).collect()
    };
    let rows = results.into_iter().collect::<HarnessResult<Vec<_>>>()?;

    let table = root.with_extension("csv");
    let mut f = fs::File::create(&table)?;
    writeln!(f, "value,final_regret,mean_gap")?;
    for r in &rows {
        writeln!(f, "{},{},{}", fmt_f(r.value), fmt_f(r.final_regret), fmt_f(r.mean_gap))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(usize, f64)> = [10, 100, 1000].iter().map(|&t| (t, 3.0 * (t as f64).powf(0.5))).collect();
        assert!((loglog_slope(&pts).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(loglog_slope(&[(10, 1.0)]), None);
        assert_eq!(loglog_slope(&[(10, 0.0), (100, 0.0)]), None);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Spec(SpecError::single("/x", "bad")).exit_code(), 2);
        assert_eq!(HarnessError::Io("disk".into()).exit_code(), 4);
        let diverged = ControlError::StateDiverged {
            t: 3,
            norm: 1e9,
            threshold: 1.0,
        };
        assert_eq!(HarnessError::Control(diverged).exit_code(), 3);
    }

    #[test]
    fn sweep_param_parses() {
        assert_eq!("H".parse::<SweepParam>().unwrap(), SweepParam::H);
        assert_eq!("eta".parse::<SweepParam>().unwrap(), SweepParam::Eta);
        assert!("alpha".parse::<SweepParam>().is_err());
    }
}
