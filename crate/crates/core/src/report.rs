//! Run configuration, stage orchestration and report output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::construction::{run_recursion, ConstructionConfig, ConstructionResult, DEFAULT_FEJER_SCAN_CAP};
use crate::decomposition::{
    build_basis, decompose, round_to_h, verify_decomposition, BasisMode, BoundCheck, LatticeParams, ENUMERATION_CAP,
};
use crate::error::{Error, Result};
use crate::fault::Fault;
use crate::matrix::{eta_bounds, BandParams, SymMatrix};
use crate::mixing::{
    block_bound_checks, composition_checks, doubling_gaps, gap_scan, is_nonincreasing, rho_hat, BlockBoundRecord,
    CompositionReport, GapPoint, WindowSpec,
};
use crate::perturbation::{CoefficientScheme, SchemeVariant};
use crate::simulation::{empirical_partial_sum_cov, normality_diagnostic, NormalityReport, ProcessSpec, SimulationOptions};

pub const SCHEMA_VERSION: u32 = 1;
/// Monte Carlo checks pass within this many standard errors.
pub const MC_Z_MAX: f64 = 4.0;
/// Agreement between the two exact routes to `G*_n`.
pub const ROUTE_TOL: f64 = 1e-8;
/// Level below which the decay scan must end.
pub const DECAY_FLOOR: f64 = 1e-3;
pub const LOWER_BOUND_NOTE: &str =
    "finite-window estimates are lower bounds on the dependence coefficients, not the coefficients themselves";

fn default_tau() -> f64 {
    0.5
}
fn default_delta() -> f64 {
    8.0
}
fn default_depth() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub m: usize,
    pub a: f64,
    pub b: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Target matrices as row lists; used cyclically across levels.
    pub targets: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub mixing: MixingConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub advanced: AdvancedConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub level: usize,
    pub replicates: usize,
    pub seed: u64,
    pub bernoulli_eps: Option<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { level: 3, replicates: 10_000, seed: 0, bernoulli_eps: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    pub window: usize,
    pub block_windows: Vec<usize>,
    pub max_gap: usize,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig { window: crate::mixing::DEFAULT_WINDOW, block_windows: vec![1, 4, 16, 64], max_gap: 1000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Both,
}

impl Format {
    fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }

    fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "both" => Ok(Format::Both),
            _ => Err(Error::Validation { field: "format".into(), message: format!("expected json, csv or both, got `{s}`") }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: Format,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("wobble-out"), format: Format::Both }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvancedConfig {
    pub scheme: SchemeVariant,
    pub m_cap: Option<usize>,
    pub basis_mode: BasisMode,
    pub enumeration_cap: usize,
    pub fejer_scan_cap: usize,
    pub min_grid: usize,
}

impl Default for AdvancedConfig {
    fn default() -> Self {
        AdvancedConfig {
            scheme: SchemeVariant::Harmonic,
            m_cap: None,
            basis_mode: BasisMode::Subset,
            enumeration_cap: ENUMERATION_CAP,
            fejer_scan_cap: DEFAULT_FEJER_SCAN_CAP,
            min_grid: 4096,
        }
    }
}

/// Command-line values that replace config entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub depth: Option<usize>,
    pub replicates: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

/// One value replaced to bring `(a, b, tau)` into `0 < a < 1 < b`, `0 < tau < 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Normalization {
    pub field: String,
    pub from: f64,
    pub to: f64,
}

impl RunConfig {
    /// Two-dimensional identity target on the band `[1, 2]`.
    pub fn example() -> Self {
        toml::from_str("m = 2\na = 1.0\nb = 2.0\ntargets = [[[1.0, 0.0], [0.0, 1.0]]]\n").expect("valid example")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.simulation.seed = s;
        }
        if let Some(d) = o.depth {
            self.depth = d;
        }
        if let Some(r) = o.replicates {
            self.simulation.replicates = r;
        }
        if let Some(dir) = &o.out {
            self.output.dir = dir.clone();
        }
        if let Some(f) = o.format {
            self.output.format = f;
        }
    }

    pub fn target_matrices(&self) -> Result<Vec<SymMatrix<f64>>> {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, rows)| {
                if rows.len() != self.m || rows.iter().any(|r| r.len() != self.m) {
                    return Err(Error::Validation {
                        field: format!("targets[{i}]"),
                        message: format!("must be {m}x{m}", m = self.m),
                    });
                }
                SymMatrix::from_rows(rows)
                    .map_err(|e| Error::Validation { field: format!("targets[{i}]"), message: e.to_string() })
            })
            .collect()
    }

    /// Field checks against the band as written.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Validation { field: field.into(), message });
        if self.m == 0 {
            return bad("m", "must be at least 1".into());
        }
        if !(self.a > 0.0) {
            return bad("a", format!("must be positive, got {}", self.a));
        }
        if !(self.a < self.b) {
            return bad("b", format!("need a < b, got a = {}, b = {}", self.a, self.b));
        }
        if !(self.tau > 0.0) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if !(self.delta > 0.0) {
            return bad("delta", format!("must be positive, got {}", self.delta));
        }
        if self.depth == 0 {
            return bad("depth", "must be at least 1".into());
        }
        if self.targets.is_empty() {
            return bad("targets", "at least one target is required".into());
        }
        for (i, g) in self.target_matrices()?.iter().enumerate() {
            let (lo, hi) = eta_bounds(g)?;
            for eig in [lo, hi] {
                if eig < self.a - 1e-10 || eig > self.b + 1e-10 {
                    return bad(
                        &format!("targets[{i}]"),
                        format!("eigenvalue {} lies outside [{}, {}]", (eig * 1e10).round() / 1e10, self.a, self.b),
                    );
                }
            }
        }
        let s = &self.simulation;
        if s.replicates < 100 {
            return bad("simulation.replicates", format!("need at least 100, got {}", s.replicates));
        }
        if s.level == 0 || s.level > self.depth {
            return bad("simulation.level", format!("must lie in 1..={}, got {}", self.depth, s.level));
        }
        if let Some(eps) = s.bernoulli_eps {
            if !(eps > 0.0) {
                return bad("simulation.bernoulli_eps", format!("must be positive, got {eps}"));
            }
        }
        let x = &self.mixing;
        if x.window == 0 || x.max_gap == 0 || x.block_windows.is_empty() || x.block_windows.contains(&0) {
            return bad("mixing", "window sizes and max_gap must be at least 1".into());
        }
        if self.advanced.fejer_scan_cap == 0 || !self.advanced.min_grid.is_power_of_two() {
            return bad("advanced", "fejer_scan_cap must be positive and min_grid a power of two".into());
        }
        Ok(())
    }

    /// Copy with `a < 1 < b` and `tau < 1` enforced, plus the replacements made.
    pub fn normalized(&self) -> (RunConfig, Vec<Normalization>) {
        let mut out = self.clone();
        let mut log = Vec::new();
        let mut fix = |field: &str, v: &mut f64, ok: bool, to: f64| {
            if !ok {
                log.push(Normalization { field: field.into(), from: *v, to });
                *v = to;
            }
        };
        fix("a", &mut out.a, self.a < 1.0, 0.5);
        fix("b", &mut out.b, self.b > 1.0, 2.0);
        fix("tau", &mut out.tau, self.tau < 1.0, 0.5);
        (out, log)
    }

    pub fn band(&self) -> Result<BandParams> {
        BandParams::new(self.m, self.a, self.b)
    }

    pub fn construction_config(&self) -> Result<ConstructionConfig> {
        let mut cfg = ConstructionConfig::new(self.band()?, self.target_matrices()?);
        cfg.tau = self.tau;
        cfg.delta = self.delta;
        cfg.depth = self.depth;
        let adv = &self.advanced;
        cfg.scheme = match (adv.scheme, adv.m_cap) {
            (v, Some(cap)) => CoefficientScheme::new(v, cap)?,
            (SchemeVariant::Harmonic, None) => CoefficientScheme::harmonic(),
            (SchemeVariant::LogWeighted, None) => CoefficientScheme::log_weighted(),
        };
        cfg.basis_mode = adv.basis_mode;
        cfg.enumeration_cap = adv.enumeration_cap;
        cfg.fejer_scan_cap = adv.fejer_scan_cap;
        cfg.min_grid = adv.min_grid;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A validated configuration with its normalized form.
#[derive(Clone, Debug, Serialize)]
pub struct LoadedConfig {
    pub input: RunConfig,
    pub normalizations: Vec<Normalization>,
    #[serde(skip)]
    pub normalized: RunConfig,
}

impl LoadedConfig {
    pub fn new(input: RunConfig) -> Result<Self> {
        input.validate()?;
        let (normalized, normalizations) = input.normalized();
        normalized.validate()?;
        Ok(LoadedConfig { input, normalizations, normalized })
    }
}

/// Reads a TOML config, or the embedded config of a JSON report, then
/// applies overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<LoadedConfig> {
    let mut cfg = match path {
        None => RunConfig::example(),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            if p.extension().is_some_and(|e| e == "json") {
                let v: serde_json::Value = serde_json::from_str(&text)?;
                let inner = v.get("config").and_then(|c| c.get("input")).cloned().unwrap_or(v);
                serde_json::from_value(inner)?
            } else {
                RunConfig::from_toml_str(&text)?
            }
        }
    };
    cfg.apply(overrides);
    LoadedConfig::new(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Exact,
    Quadrature,
    MonteCarlo,
}

/// One pass/fail entry; `value <= limit` unless stated otherwise in `detail`.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
    pub provenance: Provenance,
    pub detail: String,
}

impl Check {
    fn le(name: impl Into<String>, value: f64, limit: f64, provenance: Provenance, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed: value <= limit, value, limit, provenance, detail: detail.into() }
    }

    fn flag(name: impl Into<String>, passed: bool, provenance: Provenance, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            value: if passed { 1.0 } else { 0.0 },
            limit: 1.0,
            provenance,
            detail: detail.into(),
        }
    }

    fn error(stage: &str, e: &Error) -> Self {
        Check::flag(format!("{stage}.error"), false, Provenance::Exact, e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Decompose,
    Construct,
    Simulate,
    Mixing,
    Full,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Command::Decompose => "decompose",
            Command::Construct => "construct",
            Command::Simulate => "simulate",
            Command::Mixing => "mixing",
            Command::Full => "full",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConfigEcho {
    #[serde(flatten)]
    pub loaded: LoadedConfig,
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockCoefficient {
    pub block: String,
    pub coefficient: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecompositionEntry {
    pub target: usize,
    pub gamma: f64,
    pub h: SymMatrix<f64>,
    pub coefficients: Vec<BlockCoefficient>,
    pub reconstruction_error: f64,
    pub bounds: Vec<BoundCheck>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Constants {
    pub m: usize,
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    pub delta: f64,
    pub gamma: f64,
    pub big_l: usize,
    pub upsilon1: f64,
    pub upsilon2: f64,
    pub theta_big: f64,
    pub depth: usize,
    pub fejer_orders: Vec<usize>,
    pub max_eigen_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoeffRow {
    pub block: String,
    pub c: f64,
    pub cstar: f64,
    pub gap: f64,
    pub tol: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelRow {
    pub n: usize,
    pub fejer_order: usize,
    pub checked: bool,
    pub coefficients: Vec<CoeffRow>,
    pub target: SymMatrix<f64>,
    pub gstar: SymMatrix<f64>,
    pub gstar_gap: f64,
    pub gstar_tol: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Serialize)]
pub struct PerturbedCov {
    pub eps: f64,
    pub cov: SymMatrix<f64>,
    pub stderr: SymMatrix<f64>,
    pub expected: SymMatrix<f64>,
    pub max_z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationSection {
    pub level: usize,
    pub fejer_order: usize,
    pub replicates: usize,
    pub seed: u64,
    pub exact: SymMatrix<f64>,
    pub autocov_route: SymMatrix<f64>,
    pub empirical: SymMatrix<f64>,
    pub stderr: SymMatrix<f64>,
    pub max_z: f64,
    pub embedding_size: usize,
    pub clipped_mass: f64,
    pub normality: NormalityReport,
    pub perturbed: Option<PerturbedCov>,
}

#[derive(Clone, Debug, Serialize)]
pub struct WindowTrend {
    pub window: usize,
    pub rho_hat: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MixingSection {
    pub note: &'static str,
    pub window: usize,
    pub tau: f64,
    pub block_bounds: Vec<BlockBoundRecord>,
    pub composition: CompositionReport,
    pub gap_scan: Vec<GapPoint>,
    pub window_trend: Vec<WindowTrend>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: Command,
    pub config: ConfigEcho,
    pub constants: Option<Constants>,
    pub decomposition: Vec<DecompositionEntry>,
    pub levels: Vec<LevelRow>,
    pub simulation: Option<SimulationSection>,
    pub mixing: Option<MixingSection>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl Report {
    fn new(command: Command, loaded: &LoadedConfig, fault: Option<Fault>) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            command,
            config: ConfigEcho { loaded: loaded.clone(), fault },
            constants: None,
            decomposition: Vec::new(),
            levels: Vec::new(),
            simulation: None,
            mixing: None,
            checks: Vec::new(),
            passed: false,
        }
    }

    fn finish(mut self) -> Self {
        self.passed = self.checks.iter().all(|c| c.passed);
        self
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Decomposes every target on the band as written.
pub fn stage_decompose(report: &mut Report, cfg: &RunConfig) -> Result<()> {
    let lat = LatticeParams::new(cfg.band()?);
    let targets = cfg.target_matrices()?;
    let basis = build_basis(&targets, &lat, cfg.advanced.basis_mode, cfg.advanced.enumeration_cap)?;
    for (i, g) in targets.iter().enumerate() {
        let c = decompose(g, &basis, &lat)?;
        let check = verify_decomposition(g, &basis, &c, &lat)?;
        report.checks.push(Check::le(
            format!("decomposition.target[{i}].reconstruction"),
            check.reconstruction_error,
            check.reconstruction_tol,
            Provenance::Exact,
            "max entry error of the weighted sum",
        ));
        report.checks.push(Check::flag(
            format!("decomposition.target[{i}].bounds"),
            check.bounds.iter().all(BoundCheck::passed),
            Provenance::Exact,
            format!("smallest slack {:e}", check.min_slack()),
        ));
        report.decomposition.push(DecompositionEntry {
            target: i,
            gamma: lat.gamma,
            h: round_to_h(g, &lat)?,
            coefficients: basis
                .block_ids()
                .into_iter()
                .map(|id| BlockCoefficient { block: id.to_string(), coefficient: c.get(&basis, id) })
                .collect(),
            reconstruction_error: check.reconstruction_error,
            bounds: check.bounds,
        });
    }
    Ok(())
}

pub fn stage_construct(report: &mut Report, cfg: &RunConfig, fault: Option<Fault>) -> Result<ConstructionResult> {
    let mut cc = cfg.construction_config()?;
    cc.fault = fault;
    let res = run_recursion(&cc)?;
    let k = &res.constants;
    report.constants = Some(Constants {
        m: cfg.m,
        a: cfg.a,
        b: cfg.b,
        tau: cfg.tau,
        delta: k.delta_effective,
        gamma: k.gamma,
        big_l: k.big_l,
        upsilon1: k.upsilon1,
        upsilon2: k.upsilon2,
        theta_big: k.theta_big,
        depth: res.depth,
        fejer_orders: res.fejer_orders(),
        max_eigen_ratio: res.max_eigen_ratio,
    });
    report.checks.push(Check::flag(
        "construction.completed",
        res.completed(),
        Provenance::Quadrature,
        res.failure.clone().unwrap_or_else(|| format!("all {} levels built", res.depth)),
    ));
    for b in &res.bounds {
        report.levels.push(LevelRow {
            n: b.n,
            fejer_order: b.fejer_order,
            checked: b.checked,
            coefficients: b
                .coeffs
                .iter()
                .map(|c| CoeffRow { block: c.block.to_string(), c: c.c, cstar: c.cstar, gap: c.gap, tol: c.tol })
                .collect(),
            target: b.target.clone(),
            gstar: b.gstar.clone(),
            gstar_gap: b.gstar_gap,
            gstar_tol: b.gstar_tol,
            eta_min: b.eta_min,
            eta_max: b.eta_max,
            provenance: Provenance::Quadrature,
        });
        if !b.checked {
            continue;
        }
        let worst = b.coeffs.iter().max_by(|x, y| (x.gap / x.tol).total_cmp(&(y.gap / y.tol))).expect("non-empty");
        report.checks.push(Check::le(
            format!("construction.level[{}].coefficients", b.n),
            worst.gap,
            worst.tol,
            Provenance::Quadrature,
            format!("largest |c* - c| relative to its tolerance, block {}", worst.block),
        ));
        report.checks.push(Check::le(
            format!("construction.level[{}].gstar", b.n),
            b.gstar_gap,
            b.gstar_tol,
            Provenance::Quadrature,
            "max entry |G*_n - G_n|",
        ));
        report.checks.push(Check::flag(
            format!("construction.level[{}].positive_definite", b.n),
            b.positive_definite(),
            Provenance::Quadrature,
            format!("eigenvalues in [{:.6}, {:.6}]", b.eta_min, b.eta_max),
        ));
    }
    Ok(res)
}

pub fn stage_simulate(
    report: &mut Report,
    cfg: &RunConfig,
    res: &ConstructionResult,
    spec: &ProcessSpec,
    fault: Option<Fault>,
) -> Result<()> {
    let s = &cfg.simulation;
    let exact = crate::construction::exact_block_cov(res, s.level)?;
    let order = res.fejer_orders()[s.level - 1];
    let autocov_route = spec.partial_sum_cov(order)?;
    let route_gap = autocov_route.max_abs_diff(&exact)?;
    report.checks.push(Check::le(
        "simulation.autocovariance_route",
        route_gap,
        ROUTE_TOL * exact.max_abs_entry().max(1.0),
        Provenance::Quadrature,
        "G*_n from Fejer means against the truncated autocovariance tables",
    ));

    let opts = SimulationOptions { fejer_order: order, replicates: s.replicates, master_seed: s.seed, bernoulli_eps: None };
    let emp = empirical_partial_sum_cov(spec, &opts, fault)?;
    let max_z = emp.max_z(&exact);
    report.checks.push(Check::le(
        "simulation.covariance",
        max_z,
        MC_Z_MAX,
        Provenance::MonteCarlo,
        format!("largest standardized entry gap at N = {order}, {} replicates", s.replicates),
    ));
    let normality = normality_diagnostic(&emp.samples, &exact, fault)?;
    let worst = normality.checks.iter().map(|c| c.z()).fold(0.0, f64::max);
    report.checks.push(Check::le(
        "simulation.normality",
        worst,
        normality.z_max,
        Provenance::MonteCarlo,
        "largest standardized moment deviation after whitening",
    ));

    let perturbed = match s.bernoulli_eps {
        None => None,
        Some(eps) => {
            let opts = SimulationOptions { bernoulli_eps: Some(eps), ..opts.clone() };
            let p = empirical_partial_sum_cov(spec, &opts, fault)?;
            let mut expected = exact.clone();
            expected.add_scaled(eps, &SymMatrix::identity(cfg.m))?;
            let z = p.max_z(&expected);
            report.checks.push(Check::le(
                "simulation.bernoulli_shift",
                z,
                MC_Z_MAX,
                Provenance::MonteCarlo,
                "perturbed covariance against G*_n + eps I",
            ));
            Some(PerturbedCov { eps, cov: p.cov, stderr: p.stderr, expected, max_z: z })
        }
    };

    report.simulation = Some(SimulationSection {
        level: s.level,
        fejer_order: order,
        replicates: s.replicates,
        seed: s.seed,
        exact,
        autocov_route,
        empirical: emp.cov,
        stderr: emp.stderr,
        max_z,
        embedding_size: emp.embedding_size,
        clipped_mass: emp.max_clipped,
        normality,
        perturbed,
    });
    Ok(())
}

pub fn stage_mixing(report: &mut Report, cfg: &RunConfig, res: &ConstructionResult, spec: &ProcessSpec) -> Result<()> {
    let x = &cfg.mixing;
    let k = &res.constants;
    let block_bounds = block_bound_checks(spec, k.upsilon1, k.upsilon2, &x.block_windows)?;
    let worst = block_bounds.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
    report.checks.push(Check::flag(
        "mixing.block_bound",
        worst >= 0.0,
        Provenance::Quadrature,
        format!("rho_hat at gap 1 against 1 - exp(upsilon1 - upsilon2); smallest slack {worst:e}"),
    ));

    let composition = composition_checks(spec, &WindowSpec::symmetric(x.window, 1)?)?;
    report.checks.push(Check::le(
        "mixing.composition_rho",
        composition.rho_process,
        composition.rho_max_block + crate::mixing::COMPOSITION_TOL,
        Provenance::Quadrature,
        "process rho_hat against the largest block rho_hat",
    ));
    report.checks.push(Check::le(
        "mixing.composition_mi",
        composition.mi_process,
        composition.mi_block_sum + crate::mixing::COMPOSITION_TOL,
        Provenance::Quadrature,
        "process mi_hat against the sum of block mi_hat",
    ));
    report.checks.push(Check::le(
        "mixing.mi_additivity",
        composition.additivity_error,
        crate::mixing::ADDITIVITY_TOL,
        Provenance::Quadrature,
        "stacked independent blocks against the sum of their mi_hat",
    ));

    let scan = gap_scan(spec, x.window, x.window, &doubling_gaps(x.max_gap))?;
    let rho_mi = scan
        .iter()
        .map(|p| (2.0 * p.mi_hat).sqrt() - p.rho_hat)
        .chain(std::iter::once(composition.rho_mi_slack))
        .fold(f64::INFINITY, f64::min);
    report.checks.push(Check::flag(
        "mixing.rho_below_sqrt_2mi",
        rho_mi >= -1e-12,
        Provenance::Quadrature,
        format!("smallest sqrt(2 mi_hat) - rho_hat is {rho_mi:e}"),
    ));
    let rho: Vec<f64> = scan.iter().map(|p| p.rho_hat).collect();
    let mi: Vec<f64> = scan.iter().map(|p| p.mi_hat).collect();
    report.checks.push(Check::flag(
        "mixing.decay_nonincreasing",
        is_nonincreasing(&rho, 1e-12) && is_nonincreasing(&mi, 1e-12),
        Provenance::Quadrature,
        format!("rho_hat and mi_hat over gaps 1..={}; {LOWER_BOUND_NOTE}", x.max_gap),
    ));
    let last = scan.last().expect("non-empty scan");
    report.checks.push(Check::le(
        "mixing.decay_floor",
        last.rho_hat.max(last.mi_hat),
        DECAY_FLOOR,
        Provenance::Quadrature,
        format!("max(rho_hat, mi_hat) at gap {}", last.gap),
    ));

    let window_trend = x
        .block_windows
        .iter()
        .map(|&w| Ok(WindowTrend { window: w, rho_hat: rho_hat(spec, &WindowSpec::symmetric(w, 1)?)? }))
        .collect::<Result<Vec<_>>>()?;
    report.mixing = Some(MixingSection {
        note: LOWER_BOUND_NOTE,
        window: x.window,
        tau: cfg.tau,
        block_bounds,
        composition,
        gap_scan: scan,
        window_trend,
    });
    Ok(())
}

fn guarded<T>(report: &mut Report, stage: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            report.checks.push(Check::error(stage, &e));
            None
        }
    }
}

/// Runs the stages of `command`. Stage errors become failed checks so that
/// a report is always produced.
pub fn run_command(command: Command, loaded: &LoadedConfig, fault: Option<Fault>) -> Report {
    let mut report = Report::new(command, loaded, fault);
    let cfg = &loaded.normalized;
    if matches!(command, Command::Decompose | Command::Full) {
        let r = stage_decompose(&mut report, &loaded.input);
        guarded(&mut report, "decomposition", r);
    }
    if command == Command::Decompose {
        return report.finish();
    }
    let r = stage_construct(&mut report, cfg, fault);
    let Some(res) = guarded(&mut report, "construction", r) else { return report.finish() };
    if command == Command::Construct {
        return report.finish();
    }
    let r = ProcessSpec::from_construction(&res, cfg.advanced.min_grid);
    let Some(spec) = guarded(&mut report, "process", r) else { return report.finish() };
    if matches!(command, Command::Simulate | Command::Full) {
        let r = if res.gstar.len() < cfg.simulation.level {
            Err(Error::OutOfRange(format!(
                "simulation level {} not reached; construction stopped after {} levels",
                cfg.simulation.level,
                res.gstar.len()
            )))
        } else {
            stage_simulate(&mut report, cfg, &res, &spec, fault)
        };
        guarded(&mut report, "simulation", r);
    }
    if matches!(command, Command::Mixing | Command::Full) {
        let r = stage_mixing(&mut report, cfg, &res, &spec);
        guarded(&mut report, "mixing", r);
    }
    report.finish()
}

fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct MatrixEntry<'a> {
    table: &'a str,
    n: usize,
    i: usize,
    j: usize,
    value: f64,
}

fn matrix_rows<'a>(table: &'a str, n: usize, a: &SymMatrix<f64>) -> Vec<MatrixEntry<'a>> {
    let m = a.dim();
    (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| MatrixEntry { table, n, i, j, value: a.get(i, j) }).collect()
}

/// Writes `report.json` and/or the flat CSV tables and plot series into
/// `dir`; returns the files written.
pub fn write_outputs(report: &Report, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if format.json() {
        let p = dir.join("report.json");
        fs::write(&p, report.to_json()? + "\n")?;
        written.push(p);
    }
    if !format.csv() {
        return Ok(written);
    }
    let mut emit = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let p = dir.join(name);
        f(&p)?;
        written.push(p);
        Ok(())
    };

    emit("checks.csv", &|p| {
        write_csv(
            p,
            report.checks.iter().map(|c| (&c.name, c.passed, c.value, c.limit, c.provenance, &c.detail)).map(
                |(name, passed, value, limit, provenance, detail)| {
                    #[derive(Serialize)]
                    struct Row<'a> {
                        name: &'a str,
                        passed: bool,
                        value: f64,
                        limit: f64,
                        provenance: Provenance,
                        detail: &'a str,
                    }
                    Row { name, passed, value, limit, provenance, detail }
                },
            ),
        )
    })?;
    if !report.decomposition.is_empty() {
        emit("decomposition.csv", &|p| {
            #[derive(Serialize)]
            struct Row<'a> {
                target: usize,
                block: &'a str,
                coefficient: f64,
            }
            write_csv(
                p,
                report.decomposition.iter().flat_map(|d| {
                    d.coefficients.iter().map(move |c| Row { target: d.target, block: &c.block, coefficient: c.coefficient })
                }),
            )
        })?;
    }
    if !report.levels.is_empty() {
        emit("levels.csv", &|p| {
            #[derive(Serialize)]
            struct Row<'a> {
                n: usize,
                fejer_order: usize,
                checked: bool,
                block: &'a str,
                c: f64,
                cstar: f64,
                gap: f64,
                tol: f64,
            }
            write_csv(
                p,
                report.levels.iter().flat_map(|l| {
                    l.coefficients.iter().map(move |c| Row {
                        n: l.n,
                        fejer_order: l.fejer_order,
                        checked: l.checked,
                        block: &c.block,
                        c: c.c,
                        cstar: c.cstar,
                        gap: c.gap,
                        tol: c.tol,
                    })
                }),
            )
        })?;
        emit("gstar.csv", &|p| {
            write_csv(
                p,
                report.levels.iter().flat_map(|l| {
                    matrix_rows("target", l.n, &l.target).into_iter().chain(matrix_rows("gstar", l.n, &l.gstar))
                }),
            )
        })?;
        emit("plot_level_gap.csv", &|p| {
            #[derive(Serialize)]
            struct Row {
                n: usize,
                fejer_order: usize,
                gstar_gap: f64,
                gstar_tol: f64,
                coeff_gap: f64,
                coeff_tol: f64,
            }
            write_csv(
                p,
                report.levels.iter().map(|l| Row {
                    n: l.n,
                    fejer_order: l.fejer_order,
                    gstar_gap: l.gstar_gap,
                    gstar_tol: l.gstar_tol,
                    coeff_gap: l.coefficients.iter().map(|c| c.gap).fold(0.0, f64::max),
                    coeff_tol: l.coefficients.iter().map(|c| c.tol).fold(f64::INFINITY, f64::min),
                }),
            )
        })?;
    }
    if let Some(s) = &report.simulation {
        emit("simulation.csv", &|p| {
            #[derive(Serialize)]
            struct Row {
                i: usize,
                j: usize,
                exact: f64,
                empirical: f64,
                stderr: f64,
                z: f64,
            }
            let m = s.exact.dim();
            write_csv(
                p,
                (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).map(|(i, j)| {
                    let (e, x, se) = (s.exact.get(i, j), s.empirical.get(i, j), s.stderr.get(i, j));
                    Row { i, j, exact: e, empirical: x, stderr: se, z: (x - e).abs() / se }
                }),
            )
        })?;
    }
    if let Some(x) = &report.mixing {
        emit("plot_gap_mixing.csv", &|p| write_csv(p, &x.gap_scan))?;
        emit("mixing_block_bounds.csv", &|p| write_csv(p, &x.block_bounds))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_fills_defaults() {
        let cfg = RunConfig::example();
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.delta, 8.0);
        assert_eq!(cfg.depth, 8);
        assert_eq!(cfg.simulation, SimulationConfig::default());
        assert_eq!(cfg.mixing.window, 64);
        assert_eq!(cfg.output.format, Format::Both);
        let loaded = LoadedConfig::new(cfg).unwrap();
        assert_eq!(loaded.normalizations, vec![Normalization { field: "a".into(), from: 1.0, to: 0.5 }]);
        assert_eq!(loaded.normalized.a, 0.5);
    }

    #[test]
    fn a_not_below_b_is_rejected() {
        let mut cfg = RunConfig::example();
        cfg.a = 2.0;
        match cfg.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn target_outside_band_names_eigenvalue() {
        let mut cfg = RunConfig::example();
        cfg.targets = vec![vec![vec![2.0, 0.5], vec![0.5, 2.0]]];
        match cfg.validate() {
            Err(Error::Validation { field, message }) => {
                assert_eq!(field, "targets[0]");
                assert!(message.contains("eigenvalue 2.5"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("m = 2\na = 1.0\nb = 2.0\ntargets = []\nbogus = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::example();
        cfg.simulation.bernoulli_eps = Some(0.25);
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = RunConfig::example();
        cfg.apply(&Overrides { seed: Some(9), depth: Some(3), replicates: Some(500), out: None, format: Some(Format::Csv) });
        assert_eq!((cfg.simulation.seed, cfg.depth, cfg.simulation.replicates), (9, 3, 500));
        assert_eq!(cfg.output.format, Format::Csv);
    }

    #[test]
    fn decompose_worked_example() {
        let loaded = LoadedConfig::new(RunConfig::example()).unwrap();
        let report = run_command(Command::Decompose, &loaded, None);
        assert!(report.passed);
        let d = &report.decomposition[0];
        let gamma = 1.0 / 80.0;
        let get = |b: &str| d.coefficients.iter().find(|c| c.block == b).unwrap().coefficient;
        assert!((get("q2[0]") - 13.0 * gamma).abs() < 1e-12);
        assert!((get("q3[0,1]") - 3.0 * gamma).abs() < 1e-12);
        assert!((d.h.get(0, 1) + 0.0375).abs() < 1e-12);
    }
}
