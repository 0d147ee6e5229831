//! Experiment specifications: strict JSON parsing with pointer-addressed
//! diagnostics.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde_json::{Map, Value};

use crate::controller::{EtaRule, GpcConfig, Optimizer};
use crate::error::ControlError;
use crate::lds::{
    make_counterexample_cost, make_quadratic_cost, read_replay_csv, Cost, DisturbanceGenerator, DisturbanceKind,
    LdsSystem,
};
use crate::linalg::spectral_norm;
use crate::oco::{state_bound, DEFAULT_ONS_DELTA};
use crate::policy::{horizon_for, verify_strong_stability, StabilizingController};

type MaybeMatrix = Option<DMatrix<f64>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecIssue {
    pub pointer: String,
    pub message: String,
}

/// Every problem found in a spec, in document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecError {
    pub issues: Vec<SpecIssue>,
}

impl SpecError {
    pub fn single(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            issues: vec![SpecIssue {
                pointer: pointer.into(),
                message: message.into(),
            }],
        }
    }

    pub fn mentions(&self, pointer: &str) -> bool {
        self.issues.iter().any(|i| i.pointer == pointer)
    }
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, i) in self.issues.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            let at = if i.pointer.is_empty() { "(root)" } else { &i.pointer };
            write!(f, "{at}: {}", i.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for SpecError {}

#[derive(Debug, Clone, PartialEq)]
pub enum CostSpec {
    Quadratic { q: DMatrix<f64>, r: DMatrix<f64> },
    /// `(δx − 1)²` with `δ = 1/√T`, rebuilt for each horizon.
    Counterexample,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearGrid {
    /// Evenly spaced stabilizing scalar gains.
    Scalar { count: usize },
    Gains(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone)]
pub struct ControlSpec {
    pub system: LdsSystem,
    pub controller: StabilizingController,
    pub cost: CostSpec,
    pub disturbance: DisturbanceKind,
    pub optimizer: Optimizer,
    pub eta: EtaRule,
    pub memory: Option<usize>,
    pub ons_delta: f64,
    pub linear_grid: Option<LinearGrid>,
    /// Comparator for the sufficiency construction.
    pub k_star: Option<StabilizingController>,
}

impl ControlSpec {
    pub fn cost_for(&self, horizon: usize) -> crate::Result<Arc<dyn Cost>> {
        Ok(match &self.cost {
            CostSpec::Quadratic { q, r } => Arc::new(make_quadratic_cost(q.clone(), r.clone())?),
            CostSpec::Counterexample => {
                Arc::new(make_counterexample_cost(horizon, self.system.input_dim())?)
            }
        })
    }

    pub fn memory_for(&self, horizon: usize) -> usize {
        self.memory.unwrap_or_else(|| {
            horizon_for(
                self.system.kappa_b(),
                self.controller.kappa(),
                self.controller.gamma(),
                horizon as f64,
            )
        })
    }

    pub fn config(&self, horizon: usize, seed: u64) -> crate::Result<GpcConfig> {
        let gen = DisturbanceGenerator::new(
            self.disturbance.clone(),
            self.system.state_dim(),
            self.system.w_bound(),
            seed,
        )?;
        let mut cfg = GpcConfig::new(
            self.system.clone(),
            self.controller.clone(),
            self.cost_for(horizon)?,
            gen,
            horizon,
        )
        .with_eta(self.eta)
        .with_optimizer(self.optimizer);
        cfg.memory = self.memory;
        cfg.ons_delta = self.ons_delta;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub enum Scenario {
    Control(Box<ControlSpec>),
    OnsCounterexample { delta: f64 },
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub scenario: Scenario,
    pub horizons: Vec<usize>,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn control(&self) -> Option<&ControlSpec> {
        match &self.scenario {
            Scenario::Control(c) => Some(c),
            Scenario::OnsCounterexample { .. } => None,
        }
    }
}

/// Reads and validates a spec file. Relative paths inside the spec resolve
/// against the spec's directory.
pub fn parse_spec(path: impl AsRef<Path>) -> Result<ExperimentSpec, super::HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| super::HarnessError::Io(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_spec_str(&text, base)?)
}

pub fn parse_spec_str(text: &str, base_dir: &Path) -> Result<ExperimentSpec, SpecError> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| SpecError::single("", format!("invalid JSON: {e}")))?;
    let mut p = Parser {
        issues: Vec::new(),
        base: base_dir.to_path_buf(),
    };
    let spec = p.spec(&root);
    match spec {
        Some(s) if p.issues.is_empty() => Ok(s),
        _ => Err(SpecError { issues: p.issues }),
    }
}

/// RFC 6901 token escaping.
fn token(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

fn child(ptr: &str, key: &str) -> String {
    format!("{ptr}/{}", token(key))
}

fn is_safe_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

struct Parser {
    issues: Vec<SpecIssue>,
    base: PathBuf,
}

impl Parser {
    fn issue(&mut self, pointer: impl Into<String>, message: impl Into<String>) {
        self.issues.push(SpecIssue {
            pointer: pointer.into(),
            message: message.into(),
        });
    }

    fn clean_since(&self, mark: usize) -> bool {
        self.issues.len() == mark
    }

    /// Checks the object shape, listing every missing and unknown key.
    fn object<'a>(
        &mut self,
        v: &'a Value,
        ptr: &str,
        required: &[&str],
        optional: &[&str],
    ) -> Option<&'a Map<String, Value>> {
        let Some(map) = v.as_object() else {
            self.issue(ptr, "expected an object");
            return None;
        };
        for key in required {
            if !map.contains_key(*key) {
                self.issue(child(ptr, key), format!("missing required key \"{key}\""));
            }
        }
        for key in map.keys() {
            if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
                self.issue(child(ptr, key), format!("unknown key \"{key}\""));
            }
        }
        Some(map)
    }

    fn number(&mut self, v: &Value, ptr: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.issue(ptr, "expected a finite number");
                None
            }
        }
    }

    fn positive(&mut self, v: &Value, ptr: &str) -> Option<f64> {
        let x = self.number(v, ptr)?;
        if x > 0.0 {
            Some(x)
        } else {
            self.issue(ptr, format!("must be positive, got {x}"));
            None
        }
    }

    fn integer(&mut self, v: &Value, ptr: &str, min: u64) -> Option<u64> {
        match v.as_u64() {
            Some(n) if n >= min => Some(n),
            Some(n) => {
                self.issue(ptr, format!("must be at least {min}, got {n}"));
                None
            }
            None => {
                self.issue(ptr, "expected a non-negative integer");
                None
            }
        }
    }

    fn string<'a>(&mut self, v: &'a Value, ptr: &str) -> Option<&'a str> {
        let s = v.as_str();
        if s.is_none() {
            self.issue(ptr, "expected a string");
        }
        s
    }

    fn vector(&mut self, v: &Value, ptr: &str) -> Option<Vec<f64>> {
        let Some(arr) = v.as_array() else {
            self.issue(ptr, "expected an array of numbers");
            return None;
        };
        let mark = self.issues.len();
        let vals: Vec<f64> = arr
            .iter()
            .enumerate()
            .filter_map(|(i, x)| self.number(x, &format!("{ptr}/{i}")))
            .collect();
        self.clean_since(mark).then_some(vals)
    }

    /// Row-major nested arrays; a bare number is a 1×1 matrix.
    fn matrix(&mut self, v: &Value, ptr: &str) -> Option<DMatrix<f64>> {
        if v.is_number() {
            return self.number(v, ptr).map(|x| DMatrix::from_element(1, 1, x));
        }
        let Some(rows) = v.as_array() else {
            self.issue(ptr, "expected a matrix (array of rows)");
            return None;
        };
        if rows.is_empty() {
            self.issue(ptr, "matrix must have at least one row");
            return None;
        }
        let mark = self.issues.len();
        let parsed: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| self.vector(r, &format!("{ptr}/{i}")))
            .collect();
        if !self.clean_since(mark) {
            return None;
        }
        let n = parsed[0].len();
        if n == 0 {
            self.issue(format!("{ptr}/0"), "rows must be non-empty");
            return None;
        }
        if let Some(i) = parsed.iter().position(|r| r.len() != n) {
            self.issue(format!("{ptr}/{i}"), format!("row has {} entries, expected {n}", parsed[i].len()));
            return None;
        }
        Some(DMatrix::from_fn(parsed.len(), n, |i, j| parsed[i][j]))
    }

    fn shape(&mut self, m: &DMatrix<f64>, ptr: &str, rows: usize, cols: usize) -> bool {
        if m.shape() == (rows, cols) {
            true
        } else {
            self.issue(
                ptr,
                format!("expected a {rows}x{cols} matrix, got {}x{}", m.nrows(), m.ncols()),
            );
            false
        }
    }

    fn resolve(&mut self, v: &Value, ptr: &str) -> Option<PathBuf> {
        let rel = self.string(v, ptr)?;
        let path = self.base.join(rel);
        if path.is_file() {
            Some(path)
        } else {
            self.issue(ptr, format!("file not found: {}", path.display()));
            None
        }
    }

    fn spec(&mut self, root: &Value) -> Option<ExperimentSpec> {
        let scenario_name = root
            .get("scenario")
            .map(|v| self.string(v, "/scenario").unwrap_or("?"))
            .unwrap_or("gpc")
            .to_string();
        let common_optional = ["scenario", "seed", "output"];
        let map = match scenario_name.as_str() {
            "gpc" => self.object(
                root,
                "",
                &["name", "system", "controller", "cost", "disturbance", "T"],
                &[&common_optional[..], &["optimizer", "eta", "H", "ons_delta", "comparators", "sufficiency"]]
                    .concat(),
            )?,
            "ons_counterexample" => {
                self.object(root, "", &["name", "T"], &[&common_optional[..], &["ons_delta"]].concat())?
            }
            other => {
                self.issue("/scenario", format!("unknown scenario \"{other}\" (expected gpc or ons_counterexample)"));
                return None;
            }
        };

        let name = map.get("name").and_then(|v| self.string(v, "/name")).map(str::to_string);
        if let Some(n) = &name {
            if !is_safe_name(n) {
                self.issue("/name", format!("\"{n}\" is not filesystem-safe (use letters, digits, '_', '-', '.')"));
            }
        }
        let horizons = map.get("T").and_then(|v| self.horizons(v));
        let seed = map.get("seed").map_or(Some(0), |v| self.integer(v, "/seed", 0));
        let output = map
            .get("output")
            .and_then(|v| self.string(v, "/output"))
            .map(|s| self.base.join(s));
        let ons_delta = map
            .get("ons_delta")
            .map_or(Some(DEFAULT_ONS_DELTA), |v| self.positive(v, "/ons_delta"));

        let scenario = if scenario_name == "gpc" {
            let ctl = self.control(map, horizons.as_deref().unwrap_or(&[]), ons_delta.unwrap_or(DEFAULT_ONS_DELTA));
            ctl.map(|c| Scenario::Control(Box::new(c)))
        } else {
            ons_delta.map(|delta| Scenario::OnsCounterexample { delta })
        };

        Some(ExperimentSpec {
            name: name?,
            scenario: scenario?,
            horizons: horizons?,
            seed: seed?,
            output,
        })
    }

    fn horizons(&mut self, v: &Value) -> Option<Vec<usize>> {
        let Some(arr) = v.as_array() else {
            self.issue("/T", "expected an array of horizons");
            return None;
        };
        if arr.is_empty() {
            self.issue("/T", "needs at least one horizon");
            return None;
        }
        let mark = self.issues.len();
        let ts: Vec<usize> = arr
            .iter()
            .enumerate()
            .filter_map(|(i, x)| self.integer(x, &format!("/T/{i}"), 2).map(|n| n as usize))
            .collect();
        if !self.clean_since(mark) {
            return None;
        }
        if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
            self.issue(format!("/T/{}", i + 1), "T values must be strictly increasing");
            return None;
        }
        Some(ts)
    }

    fn system(&mut self, v: &Value) -> Option<LdsSystem> {
        let map = self.object(v, "/system", &["W"], &["A", "B", "file", "kappa_A", "kappa_B"])?;
        let w = map.get("W").and_then(|v| self.positive(v, "/system/W"));
        let (a, b) = match (map.get("file"), map.get("A"), map.get("B")) {
            (Some(f), None, None) => self.system_file(f)?,
            (None, Some(a), Some(b)) => (self.matrix(a, "/system/A"), self.matrix(b, "/system/B")),
            (Some(_), _, _) => {
                self.issue("/system/file", "give either \"file\" or inline \"A\" and \"B\", not both");
                return None;
            }
            (None, a, _) => {
                let missing = if a.is_none() { "A" } else { "B" };
                self.issue(child("/system", missing), format!("missing required key \"{missing}\""));
                return None;
            }
        };
        let kappa_a = map.get("kappa_A").and_then(|v| self.positive(v, "/system/kappa_A"));
        let kappa_b = map.get("kappa_B").and_then(|v| self.positive(v, "/system/kappa_B"));
        let (a, b, w) = (a?, b?, w?);
        if !a.is_square() {
            self.issue("/system/A", format!("must be square, got {}x{}", a.nrows(), a.ncols()));
            return None;
        }
        if b.nrows() != a.nrows() {
            self.issue("/system/B", format!("needs {} rows to match A, got {}", a.nrows(), b.nrows()));
            return None;
        }
        let ka = kappa_a.unwrap_or_else(|| spectral_norm(&a));
        let kb = kappa_b.unwrap_or_else(|| spectral_norm(&b));
        match LdsSystem::new(a, b, ka, kb, w) {
            Ok(s) => Some(s),
            Err(ControlError::BoundViolated { what, value, bound }) => {
                let ptr = if what.contains('B') { "/system/kappa_B" } else { "/system/kappa_A" };
                self.issue(ptr, format!("‖{what}‖ = {value} exceeds the declared bound {bound}"));
                None
            }
            Err(e) => {
                self.issue("/system", e.to_string());
                None
            }
        }
    }

    fn system_file(&mut self, f: &Value) -> Option<(MaybeMatrix, MaybeMatrix)> {
        let path = self.resolve(f, "/system/file")?;
        let parsed = std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<Value>(&t).map_err(|e| e.to_string()));
        let doc = match parsed {
            Ok(d) => d,
            Err(e) => {
                self.issue("/system/file", format!("{}: {e}", path.display()));
                return None;
            }
        };
        // Pointers into the referenced file are reported under the key.
        let map = self.object(&doc, "/system/file", &["A", "B"], &[])?;
        Some((
            self.matrix(&map["A"], "/system/file/A"),
            self.matrix(&map["B"], "/system/file/B"),
        ))
    }

    fn controller(&mut self, v: &Value, sys: Option<&LdsSystem>) -> Option<StabilizingController> {
        let map = self.object(v, "/controller", &["K", "kappa", "gamma"], &["certificate"])?;
        let k = map.get("K").and_then(|v| self.matrix(v, "/controller/K"));
        let kappa = map.get("kappa").and_then(|v| self.number(v, "/controller/kappa"));
        let gamma = map.get("gamma").and_then(|v| self.number(v, "/controller/gamma"));
        if let Some(kp) = kappa {
            if kp < 1.0 {
                self.issue("/controller/kappa", format!("must be at least 1, got {kp}"));
            }
        }
        if let Some(g) = gamma {
            if !(g > 0.0 && g <= 1.0) {
                self.issue("/controller/gamma", format!("must lie in (0, 1], got {g}"));
            }
        }
        let cert = map.get("certificate").and_then(|c| {
            let cm = self.object(c, "/controller/certificate", &["H", "L"], &[])?;
            let hm = self.matrix(&cm["H"], "/controller/certificate/H");
            let l = self.matrix(&cm["L"], "/controller/certificate/L");
            Some((hm?, l?))
        });
        let (k, kappa, gamma, sys) = (k?, kappa?, gamma?, sys?);
        if !(kappa >= 1.0 && gamma > 0.0 && gamma <= 1.0) {
            return None;
        }
        let (dx, du) = (sys.state_dim(), sys.input_dim());
        if !self.shape(&k, "/controller/K", du, dx) {
            return None;
        }
        if let Some((hm, l)) = &cert {
            let ok_h = self.shape(hm, "/controller/certificate/H", dx, dx);
            let ok_l = self.shape(l, "/controller/certificate/L", dx, dx);
            if !(ok_h && ok_l) {
                return None;
            }
        }
        let mut ctrl = match StabilizingController::new(k, kappa, gamma) {
            Ok(c) => c,
            Err(e) => {
                self.issue("/controller/K", e.to_string());
                return None;
            }
        };
        if let Some((hm, l)) = cert {
            ctrl = ctrl.with_certificate(hm, l);
        }
        Some(ctrl)
    }

    /// Strong stability deep enough to cover twice the longest memory.
    fn check_stability(&mut self, sys: &LdsSystem, ctrl: &StabilizingController, depth: usize, ptr: &str) -> bool {
        match verify_strong_stability(sys, ctrl, depth) {
            Ok(r) if r.passed => true,
            Ok(r) => {
                self.issue(ptr, format!("not ({}, {})-strongly stable: {}", ctrl.kappa(), ctrl.gamma(), r.details));
                false
            }
            Err(e) => {
                self.issue(ptr, e.to_string());
                false
            }
        }
    }

    fn cost(&mut self, v: &Value, sys: Option<&LdsSystem>) -> Option<CostSpec> {
        let kind = v.get("kind").and_then(|k| self.string(k, "/cost/kind")).unwrap_or("");
        match kind {
            "quadratic" => {
                let map = self.object(v, "/cost", &["kind", "Q", "R"], &[])?;
                let q = map.get("Q").and_then(|v| self.matrix(v, "/cost/Q"));
                let r = map.get("R").and_then(|v| self.matrix(v, "/cost/R"));
                let (q, r, sys) = (q?, r?, sys?);
                let ok_q = self.shape(&q, "/cost/Q", sys.state_dim(), sys.state_dim());
                let ok_r = self.shape(&r, "/cost/R", sys.input_dim(), sys.input_dim());
                if !(ok_q && ok_r) {
                    return None;
                }
                if let Err(e) = make_quadratic_cost(q.clone(), r.clone()) {
                    let ptr = match &e {
                        ControlError::InvalidParameter { name: "R", .. } => "/cost/R",
                        _ => "/cost/Q",
                    };
                    self.issue(ptr, e.to_string());
                    return None;
                }
                Some(CostSpec::Quadratic { q, r })
            }
            "counterexample" => {
                self.object(v, "/cost", &["kind"], &[])?;
                if sys?.state_dim() != 1 {
                    self.issue("/cost/kind", "the counterexample cost needs a one-dimensional state");
                    return None;
                }
                Some(CostSpec::Counterexample)
            }
            "" if v.get("kind").is_none() => {
                self.object(v, "/cost", &["kind"], &["Q", "R"]);
                None
            }
            other => {
                if !other.is_empty() {
                    self.issue("/cost/kind", format!("unknown cost kind \"{other}\" (expected quadratic or counterexample)"));
                }
                None
            }
        }
    }

    fn disturbance(&mut self, v: &Value, sys: Option<&LdsSystem>, max_t: usize) -> Option<DisturbanceKind> {
        const P: &str = "/disturbance";
        let kind = match v.get("kind") {
            Some(k) => self.string(k, "/disturbance/kind")?,
            None => {
                self.object(v, P, &["kind"], &["value", "sigma", "half_width", "amplitude", "period", "file"]);
                return None;
            }
        };
        let kind = match kind {
            "zero" => {
                self.object(v, P, &["kind"], &[])?;
                DisturbanceKind::Zero
            }
            "constant" => {
                let m = self.object(v, P, &["kind", "value"], &[])?;
                let val = self.vector(m.get("value")?, "/disturbance/value")?;
                if let Some(s) = sys {
                    if val.len() != s.state_dim() {
                        self.issue(
                            "/disturbance/value",
                            format!("needs {} entries, got {}", s.state_dim(), val.len()),
                        );
                        return None;
                    }
                }
                DisturbanceKind::Constant(val.into())
            }
            "gaussian" => {
                let m = self.object(v, P, &["kind", "sigma"], &[])?;
                let sigma = self.positive(m.get("sigma")?, "/disturbance/sigma")?;
                DisturbanceKind::GaussianClipped { sigma }
            }
            "uniform" => {
                let m = self.object(v, P, &["kind", "half_width"], &[])?;
                let half_width = self.positive(m.get("half_width")?, "/disturbance/half_width")?;
                DisturbanceKind::Uniform { half_width }
            }
            "sinusoidal" => {
                let m = self.object(v, P, &["kind", "amplitude", "period"], &[])?;
                let amplitude = m.get("amplitude").and_then(|a| self.positive(a, "/disturbance/amplitude"));
                let period = m.get("period").and_then(|p| self.positive(p, "/disturbance/period"));
                DisturbanceKind::Sinusoidal {
                    amplitude: amplitude?,
                    period: period?,
                }
            }
            "sign_alternating" => {
                let m = self.object(v, P, &["kind", "amplitude"], &[])?;
                let amplitude = self.positive(m.get("amplitude")?, "/disturbance/amplitude")?;
                DisturbanceKind::SignAlternating { amplitude }
            }
            "replay" => {
                let m = self.object(v, P, &["kind", "file"], &[])?;
                let path = self.resolve(m.get("file")?, "/disturbance/file")?;
                let rows = match read_replay_csv(&path) {
                    Ok(r) => r,
                    Err(e) => {
                        self.issue("/disturbance/file", e.to_string());
                        return None;
                    }
                };
                if rows.len() < max_t {
                    self.issue(
                        "/disturbance/file",
                        format!("holds {} rows but the largest T is {max_t}", rows.len()),
                    );
                    return None;
                }
                if let (Some(s), Some(r)) = (sys, rows.first()) {
                    if r.len() != s.state_dim() {
                        self.issue(
                            "/disturbance/file",
                            format!("rows have {} columns, state dimension is {}", r.len(), s.state_dim()),
                        );
                        return None;
                    }
                }
                DisturbanceKind::Replay(rows)
            }
            other => {
                self.issue(
                    "/disturbance/kind",
                    format!(
                        "unknown disturbance kind \"{other}\" (expected zero, constant, gaussian, uniform, \
                         sinusoidal, sign_alternating or replay)"
                    ),
                );
                return None;
            }
        };
        Some(kind)
    }

    fn optimizer(&mut self, v: &Value) -> Option<Optimizer> {
        match self.string(v, "/optimizer")? {
            "ogd_m" => Some(Optimizer::OgdM),
            "ons_restricted" => Some(Optimizer::OnsRestricted),
            other => {
                self.issue("/optimizer", format!("unknown optimizer \"{other}\" (expected ogd_m or ons_restricted)"));
                None
            }
        }
    }

    fn eta(&mut self, v: &Value) -> Option<EtaRule> {
        if v.is_number() {
            return self.positive(v, "/eta").map(EtaRule::Fixed);
        }
        let rule = match v.get("rule") {
            Some(r) => self.string(r, "/eta/rule")?,
            None => {
                self.object(v, "/eta", &["rule"], &["scale", "value"]);
                return None;
            }
        };
        match rule {
            "theorem" => {
                self.object(v, "/eta", &["rule"], &[])?;
                Some(EtaRule::Theorem)
            }
            "main_theorem" => {
                let m = self.object(v, "/eta", &["rule"], &["scale"])?;
                let scale = m.get("scale").map_or(Some(1.0), |s| self.positive(s, "/eta/scale"))?;
                Some(EtaRule::MainTheorem { scale })
            }
            "fixed" => {
                let m = self.object(v, "/eta", &["rule", "value"], &[])?;
                Some(EtaRule::Fixed(self.positive(m.get("value")?, "/eta/value")?))
            }
            other => {
                self.issue("/eta/rule", format!("unknown rule \"{other}\" (expected theorem, main_theorem or fixed)"));
                None
            }
        }
    }

    fn comparators(&mut self, v: &Value, sys: Option<&LdsSystem>) -> Option<LinearGrid> {
        let map = self.object(v, "/comparators", &["linear_grid"], &[])?;
        let g = map.get("linear_grid")?;
        const P: &str = "/comparators/linear_grid";
        if let Some(obj) = g.as_object() {
            let _ = obj;
            let m = self.object(g, P, &["scalar_count"], &[])?;
            let count = self.integer(m.get("scalar_count")?, "/comparators/linear_grid/scalar_count", 1)? as usize;
            let s = sys?;
            if s.state_dim() != 1 || s.input_dim() != 1 {
                self.issue(P, "scalar_count needs a scalar system; list gains explicitly instead");
                return None;
            }
            return Some(LinearGrid::Scalar { count });
        }
        let Some(arr) = g.as_array() else {
            self.issue(P, "expected {\"scalar_count\": n} or an array of gain matrices");
            return None;
        };
        if arr.is_empty() {
            self.issue(P, "needs at least one gain");
            return None;
        }
        let mark = self.issues.len();
        let gains: Vec<DMatrix<f64>> = arr
            .iter()
            .enumerate()
            .filter_map(|(i, k)| {
                let ptr = format!("{P}/{i}");
                let k = self.matrix(k, &ptr)?;
                let s = sys?;
                self.shape(&k, &ptr, s.input_dim(), s.state_dim()).then_some(k)
            })
            .collect();
        (self.clean_since(mark) && sys.is_some()).then_some(LinearGrid::Gains(gains))
    }

    fn sufficiency(
        &mut self,
        v: &Value,
        sys: Option<&LdsSystem>,
        base: Option<&StabilizingController>,
        depth: usize,
    ) -> Option<StabilizingController> {
        let map = self.object(v, "/sufficiency", &["K_star"], &["kappa", "gamma"])?;
        let k = map.get("K_star").and_then(|k| self.matrix(k, "/sufficiency/K_star"));
        let kappa = map.get("kappa").map(|x| self.number(x, "/sufficiency/kappa"));
        let gamma = map.get("gamma").map(|x| self.number(x, "/sufficiency/gamma"));
        let (k, sys, base) = (k?, sys?, base?);
        let kappa = kappa.unwrap_or(Some(base.kappa()))?;
        let gamma = gamma.unwrap_or(Some(base.gamma()))?;
        if !self.shape(&k, "/sufficiency/K_star", sys.input_dim(), sys.state_dim()) {
            return None;
        }
        let target = match StabilizingController::new(k, kappa, gamma) {
            Ok(c) => c,
            Err(e) => {
                self.issue("/sufficiency", e.to_string());
                return None;
            }
        };
        self.check_stability(sys, &target, depth, "/sufficiency/K_star")
            .then_some(target)
    }

    fn control(&mut self, map: &Map<String, Value>, horizons: &[usize], ons_delta: f64) -> Option<ControlSpec> {
        let system = map.get("system").and_then(|v| self.system(v));
        let controller = map.get("controller").and_then(|v| self.controller(v, system.as_ref()));
        let cost = map.get("cost").and_then(|v| self.cost(v, system.as_ref()));
        let max_t = horizons.last().copied().unwrap_or(0);
        let disturbance = map
            .get("disturbance")
            .and_then(|v| self.disturbance(v, system.as_ref(), max_t));
        let optimizer = map.get("optimizer").map_or(Some(Optimizer::OgdM), |v| self.optimizer(v));
        let eta = map.get("eta").map_or(Some(EtaRule::Theorem), |v| self.eta(v));
        let memory = map
            .get("H")
            .map(|v| self.integer(v, "/H", 1).map(|h| h as usize));
        let linear_grid = map.get("comparators").map(|v| self.comparators(v, system.as_ref()));

        let h_max = match (&memory, &system, &controller) {
            (Some(Some(h)), _, _) => *h,
            (None, Some(s), Some(c)) => horizon_for(s.kappa_b(), c.kappa(), c.gamma(), max_t.max(2) as f64),
            _ => 1,
        };
        let depth = 2 * h_max + 1;
        let k_star = map
            .get("sufficiency")
            .map(|v| self.sufficiency(v, system.as_ref(), controller.as_ref(), depth));

        let (system, controller) = (system?, controller?);
        if !self.check_stability(&system, &controller, depth, "/controller") {
            return None;
        }
        let optimizer = optimizer?;
        if optimizer == Optimizer::OnsRestricted && (system.state_dim() != 1 || system.input_dim() != 1) {
            self.issue("/optimizer", "ons_restricted needs a scalar system");
        }
        let memory = match memory {
            Some(m) => Some(m?),
            None => None,
        };
        for &t in horizons {
            let h = memory.unwrap_or_else(|| horizon_for(system.kappa_b(), controller.kappa(), controller.gamma(), t as f64));
            if state_bound(controller.kappa(), controller.gamma(), system.kappa_b(), system.w_bound(), h).is_err() {
                let ptr = if memory.is_some() { "/H" } else { "/controller/gamma" };
                self.issue(ptr, format!("state bound diverges at H = {h} (T = {t}); increase H or gamma"));
                break;
            }
        }
        Some(ControlSpec {
            system,
            controller,
            cost: cost?,
            disturbance: disturbance?,
            optimizer,
            eta: eta?,
            memory,
            ons_delta,
            linear_grid: match linear_grid {
                Some(g) => Some(g?),
                None => None,
            },
            k_star: match k_star {
                Some(k) => Some(k?),
                None => None,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "minimal",
        "system": {"A": [[0.9]], "B": [[1.0]], "W": 1.0},
        "controller": {"K": [[0.5]], "kappa": 1.0, "gamma": 0.6},
        "cost": {"kind": "quadratic", "Q": [[1.0]], "R": [[1.0]]},
        "disturbance": {"kind": "zero"},
        "T": [100]
    }"#;

    fn parse(text: &str) -> Result<ExperimentSpec, SpecError> {
        parse_spec_str(text, Path::new("."))
    }

    fn edit(f: impl FnOnce(&mut Value)) -> String {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        f(&mut v);
        v.to_string()
    }

    #[test]
    fn minimal_spec_parses() {
        let s = parse(MINIMAL).unwrap();
        assert_eq!(s.name, "minimal");
        assert_eq!(s.horizons, vec![100]);
        assert_eq!(s.seed, 0);
        let c = s.control().unwrap();
        assert_eq!(c.disturbance, DisturbanceKind::Zero);
        assert_eq!(c.optimizer, Optimizer::OgdM);
        assert_eq!(c.eta, EtaRule::Theorem);
    }

    #[test]
    fn gamma_zero_points_at_gamma() {
        let e = parse(&edit(|v| v["controller"]["gamma"] = 0.0.into())).unwrap_err();
        assert!(e.mentions("/controller/gamma"), "{e}");
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse(&edit(|v| v["etaa"] = 0.1.into())).unwrap_err();
        assert!(e.mentions("/etaa"), "{e}");
        assert!(e.to_string().contains("\"etaa\""));
    }

    #[test]
    fn missing_keys_listed_exhaustively() {
        let e = parse(r#"{"name": "x", "T": [10]}"#).unwrap_err();
        for key in ["/system", "/controller", "/cost", "/disturbance"] {
            assert!(e.mentions(key), "{key} missing from {e}");
        }
    }

    #[test]
    fn horizons_strictly_increasing() {
        let e = parse(&edit(|v| v["T"] = serde_json::json!([100, 100]))).unwrap_err();
        assert!(e.mentions("/T/1"));
        let e = parse(&edit(|v| v["T"] = serde_json::json!([1]))).unwrap_err();
        assert!(e.mentions("/T/0"));
    }

    #[test]
    fn unsafe_names_rejected() {
        for bad in ["", "../up", "a/b", ".hidden", "sp ace"] {
            let e = parse(&edit(|v| v["name"] = bad.into())).unwrap_err();
            assert!(e.mentions("/name"), "{bad}");
        }
    }

    #[test]
    fn missing_replay_file_rejected_at_parse() {
        let e = parse(&edit(|v| {
            v["disturbance"] = serde_json::json!({"kind": "replay", "file": "no_such_file.csv"})
        }))
        .unwrap_err();
        assert!(e.mentions("/disturbance/file"));
    }

    #[test]
    fn unstable_controller_rejected() {
        let e = parse(&edit(|v| v["controller"]["K"] = serde_json::json!([[0.0]]))).unwrap_err();
        assert!(e.mentions("/controller"), "{e}");
    }

    #[test]
    fn shape_errors_use_pointers() {
        let e = parse(&edit(|v| v["cost"]["Q"] = serde_json::json!([[1.0, 0.0], [0.0, 1.0]]))).unwrap_err();
        assert!(e.mentions("/cost/Q"));
        let e = parse(&edit(|v| v["system"]["A"] = serde_json::json!([[1.0, 2.0], [3.0]]))).unwrap_err();
        assert!(e.mentions("/system/A/1"));
    }

    #[test]
    fn nested_unknown_keys() {
        let e = parse(&edit(|v| v["controller"]["gama"] = 0.5.into())).unwrap_err();
        assert!(e.mentions("/controller/gama"));
    }

    #[test]
    fn ons_scenario_is_minimal() {
        let s = parse(r#"{"name": "ons", "scenario": "ons_counterexample", "T": [10, 100]}"#).unwrap();
        assert!(matches!(s.scenario, Scenario::OnsCounterexample { delta } if delta == DEFAULT_ONS_DELTA));
        let e = parse(r#"{"name": "ons", "scenario": "ons_counterexample", "T": [10], "system": {}}"#).unwrap_err();
        assert!(e.mentions("/system"));
    }

    #[test]
    fn pointer_tokens_escape() {
        assert_eq!(child("", "a/b~c"), "/a~1b~0c");
    }
}
