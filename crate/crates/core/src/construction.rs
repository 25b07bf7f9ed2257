//! The level recursion: Fejer orders `N_n`, log-densities per building
//! block, starred coefficients and the exact partial-sum covariances `G*_n`.

use rayon::prelude::*;
use serde::Serialize;

use crate::decomposition::{
    build_basis, decompose, BasisMode, BasisSet, BlockId, CoeffArray, LatticeParams, ENUMERATION_CAP,
};
use crate::error::{Error, Result};
use crate::fault::Fault;
use crate::matrix::{eta_bounds, BandParams, SymMatrix};
use crate::perturbation::{
    construct_h, Branch, CoefficientScheme, PerturbChecks, PerturbRequest, PerturbResult,
};
use crate::spectral::{exp_fourier, fejer_means, fejer_rank, psi, CosineSeries, GridSpec};

/// Largest Fejer order scanned when computing ranks.
pub const DEFAULT_FEJER_SCAN_CAP: usize = 1 << 18;

#[derive(Clone, Debug, Serialize)]
pub struct ConstructionConfig {
    pub band: BandParams,
    pub tau: f64,
    pub delta: f64,
    pub targets: Vec<SymMatrix<f64>>,
    pub depth: usize,
    pub scheme: CoefficientScheme,
    pub basis_mode: BasisMode,
    pub enumeration_cap: usize,
    pub fejer_scan_cap: usize,
    pub min_grid: usize,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl ConstructionConfig {
    pub fn new(band: BandParams, targets: Vec<SymMatrix<f64>>) -> Self {
        ConstructionConfig {
            band,
            tau: 0.5,
            delta: 8.0,
            targets,
            depth: 8,
            scheme: CoefficientScheme::harmonic(),
            basis_mode: BasisMode::Subset,
            enumeration_cap: ENUMERATION_CAP,
            fejer_scan_cap: DEFAULT_FEJER_SCAN_CAP,
            min_grid: 4096,
            fault: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: String| Err(Error::Validation { field: f.into(), message: m });
        let BandParams { a, b, .. } = self.band;
        if !(0.0 < a && a < 1.0 && 1.0 < b) {
            return field("band", format!("need 0 < a < 1 < b, got a = {a}, b = {b}"));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return field("tau", format!("need 0 < tau < 1, got {}", self.tau));
        }
        if !(self.delta > 0.0) {
            return field("delta", "must be positive".into());
        }
        if self.depth == 0 {
            return field("depth", "must be at least 1".into());
        }
        if self.targets.is_empty() {
            return field("targets", "at least one target is required".into());
        }
        if self.fejer_scan_cap == 0 {
            return field("fejer_scan_cap", "must be positive".into());
        }
        Ok(())
    }

    /// Target `G_n` (1-based), cycling through the list.
    pub fn target(&self, n: usize) -> &SymMatrix<f64> {
        &self.targets[(n - 1) % self.targets.len()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecursionConstants {
    pub gamma: f64,
    pub big_l: usize,
    pub upsilon1: f64,
    pub upsilon2: f64,
    pub delta_effective: f64,
    pub theta_big: f64,
}

pub fn init_constants(cfg: &ConstructionConfig, basis: &BasisSet) -> RecursionConstants {
    let lat = LatticeParams::new(cfg.band);
    let big_l = basis.len_q1();
    let (m, b, l) = (cfg.band.m as f64, cfg.band.b, big_l as f64);
    RecursionConstants {
        gamma: lat.gamma,
        big_l,
        upsilon1: (lat.gamma / (3.0 * b * l)).ln(),
        upsilon2: 2f64.ln(),
        delta_effective: cfg.delta,
        theta_big: 7.0 * (2.0 * b * l + m + m * (m - 1.0) / 2.0),
    }
}

/// How one log-density was produced from its predecessor.
#[derive(Clone, Debug, Serialize)]
pub struct PerturbSummary {
    pub branch: Branch,
    pub target: f64,
    pub value_at_zero: f64,
    pub c_used: f64,
    pub halvings: usize,
    pub degree: usize,
    pub psi: f64,
    pub checks: PerturbChecks,
}

impl PerturbSummary {
    fn new(r: &PerturbResult, target: f64) -> Self {
        PerturbSummary {
            branch: r.branch,
            target,
            value_at_zero: r.h.value_at_zero(),
            c_used: r.c_used,
            halvings: r.halvings,
            degree: r.h.degree(),
            psi: psi(&r.h),
            checks: r.checks.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelState {
    pub n: usize,
    /// `N_n`; `None` until the level has been advanced.
    pub fejer_order: Option<usize>,
    /// Fejer rank of every function at tolerance `2^-n`.
    pub ranks: Vec<usize>,
    /// Log-densities in `BasisSet::block_ids` order.
    #[serde(skip)]
    pub functions: Vec<CosineSeries<f64>>,
    /// How each function was built (empty at level 1).
    pub records: Vec<PerturbSummary>,
}

/// Level 1: every log-density is zero.
pub fn init_level(basis: &BasisSet) -> LevelState {
    LevelState {
        n: 1,
        fejer_order: None,
        ranks: Vec::new(),
        functions: vec![CosineSeries::zero(); basis.block_ids().len()],
        records: Vec::new(),
    }
}

/// Condition C on every function: strictly inside `(upsilon1, upsilon2)`
/// and `Psi < delta`. Returns the smallest slack.
pub fn condition_c_slack(state: &LevelState, constants: &RecursionConstants) -> f64 {
    let mut slack = f64::INFINITY;
    for (i, f) in state.functions.iter().enumerate() {
        if let Some(r) = state.records.get(i) {
            slack = slack.min(r.checks.band.slack).min(r.checks.psi.slack);
        } else {
            // constant functions need no grid
            let v = f.a0();
            slack = slack
                .min(v - constants.upsilon1)
                .min(constants.upsilon2 - v)
                .min(constants.delta_effective - psi(f));
        }
    }
    slack
}

fn rank_grid(f: &CosineSeries<f64>, n_max: usize, min_grid: usize) -> GridSpec {
    GridSpec::for_series(f, n_max, min_grid)
}

/// Computes `N_n` for `state` and builds the next level's functions aimed
/// at the coefficients `next`.
pub fn advance_level(
    state: &mut LevelState,
    prev_order: usize,
    cfg: &ConstructionConfig,
    constants: &RecursionConstants,
    basis: &BasisSet,
    next: &CoeffArray,
) -> Result<LevelState> {
    let n = state.n;
    let eps = 0.5f64.powi(n as i32);
    let n_max = cfg.fejer_scan_cap;
    let ranks = state
        .functions
        .par_iter()
        .map(|f| fejer_rank(f, eps, rank_grid(f, n_max, cfg.min_grid), n_max))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_level(n))?;
    let order = prev_order + ranks.iter().copied().max().unwrap_or(1);
    state.ranks = ranks;
    state.fejer_order = Some(order);

    let ids = basis.block_ids();
    let built = ids
        .par_iter()
        .zip(state.functions.par_iter())
        .map(|(&id, f)| {
            let theta = next.get(basis, id).ln();
            let req = PerturbRequest {
                f: f.clone(),
                upsilon1: constants.upsilon1,
                upsilon2: constants.upsilon2,
                theta,
                delta: constants.delta_effective,
                eps,
                fejer_cap: order,
            };
            construct_h(&req, cfg.scheme).map(|r| (PerturbSummary::new(&r, theta), r.h))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_level(n))?;
    let (records, functions) = built.into_iter().unzip();
    Ok(LevelState { n: n + 1, fejer_order: None, ranks: Vec::new(), functions, records })
}

#[derive(Clone, Debug, Serialize)]
pub struct CoeffBound {
    pub block: BlockId,
    pub c: f64,
    pub cstar: f64,
    pub gap: f64,
    pub tol: f64,
}

impl CoeffBound {
    pub fn passed(&self) -> bool {
        self.gap <= self.tol
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelBounds {
    pub n: usize,
    pub fejer_order: usize,
    /// Levels below 2 are reported but not held to the bounds.
    pub checked: bool,
    pub coeffs: Vec<CoeffBound>,
    pub target: SymMatrix<f64>,
    pub gstar: SymMatrix<f64>,
    pub gstar_gap: f64,
    pub gstar_tol: f64,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl LevelBounds {
    pub fn coeffs_passed(&self) -> bool {
        self.coeffs.iter().all(CoeffBound::passed)
    }

    pub fn gstar_passed(&self) -> bool {
        self.gstar_gap <= self.gstar_tol
    }

    pub fn positive_definite(&self) -> bool {
        self.eta_min > 0.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstructionResult {
    pub lattice: LatticeParams,
    pub basis: BasisSet,
    pub constants: RecursionConstants,
    /// Decomposition of each distinct configured target.
    pub target_coeffs: Vec<CoeffArray>,
    /// Levels `1 ..`; every level except the last has its Fejer order.
    pub levels: Vec<LevelState>,
    /// `c*_n` for each level with a Fejer order.
    pub cstar: Vec<CoeffArray>,
    pub gstar: Vec<SymMatrix<f64>>,
    pub bounds: Vec<LevelBounds>,
    /// Largest eigenvalue ratio of `G*_n` over all levels.
    pub max_eigen_ratio: f64,
    /// Set when a level failed; the fields above cover the levels before it.
    pub failure: Option<String>,
    pub depth: usize,
}

impl ConstructionResult {
    /// Deepest available log-densities.
    pub fn final_functions(&self) -> &[CosineSeries<f64>] {
        &self.levels.last().expect("at least one level").functions
    }

    pub fn fejer_orders(&self) -> Vec<usize> {
        self.levels.iter().filter_map(|l| l.fejer_order).collect()
    }

    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    /// Conjunction of the per-level bounds at checked levels.
    pub fn bounds_passed(&self) -> bool {
        self.bounds
            .iter()
            .filter(|b| b.checked)
            .all(|b| b.coeffs_passed() && b.gstar_passed() && b.positive_definite())
    }
}

/// `sum c Q` over all blocks.
pub fn weighted_sum(basis: &BasisSet, c: &CoeffArray) -> Result<SymMatrix<f64>> {
    crate::decomposition::reconstruct(basis, c)
}

pub fn run_recursion(cfg: &ConstructionConfig) -> Result<ConstructionResult> {
    cfg.validate()?;
    let lattice = LatticeParams::new(cfg.band);
    let basis = build_basis(&cfg.targets, &lattice, cfg.basis_mode, cfg.enumeration_cap)?;
    let constants = init_constants(cfg, &basis);
    let target_coeffs =
        cfg.targets.iter().map(|g| decompose(g, &basis, &lattice)).collect::<Result<Vec<_>>>()?;
    let coeffs_of = |n: usize| &target_coeffs[(n - 1) % target_coeffs.len()];

    let mut levels = vec![init_level(&basis)];
    let mut prev_order = 1;
    let mut failure = None;
    for n in 1..=cfg.depth {
        let current = levels.last_mut().expect("non-empty");
        match advance_level(current, prev_order, cfg, &constants, &basis, coeffs_of(n + 1)) {
            Ok(next) => {
                prev_order = current.fejer_order.expect("set by advance");
                levels.push(next);
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }

    let mut result = ConstructionResult {
        lattice,
        basis,
        constants,
        target_coeffs,
        levels,
        cstar: Vec::new(),
        gstar: Vec::new(),
        bounds: Vec::new(),
        max_eigen_ratio: 0.0,
        failure,
        depth: cfg.depth,
    };
    fill_starred(&mut result, cfg)?;
    Ok(result)
}

/// Fejer integrals `c*_n` of the deepest densities, `G*_n`, and the per-level
/// bounds.
fn fill_starred(res: &mut ConstructionResult, cfg: &ConstructionConfig) -> Result<()> {
    let orders = res.fejer_orders();
    let Some(&top) = orders.last() else { return Ok(()) };
    let means: Vec<Vec<f64>> = res
        .final_functions()
        .par_iter()
        .map(|f| {
            let grid = GridSpec::for_series(f, top, cfg.min_grid);
            Ok(fejer_means(&exp_fourier(f, grid, 1.0)?, top))
        })
        .collect::<Result<_>>()?;

    let depth = res.depth;
    let theta_big = res.constants.theta_big;
    let truncation = 3.0 * 0.5f64.powi(depth as i32);
    let ids = res.basis.block_ids();
    for (i, &order) in orders.iter().enumerate() {
        let n = i + 1;
        let flat: Vec<f64> = means.iter().map(|m| m[order - 1]).collect();
        let mut cstar = CoeffArray::from_flat(&res.basis, &flat);
        if cfg.fault == Some(Fault::CorruptCstar) && n == 2 {
            cstar.c1[0] += 8.0 * 0.25 + truncation;
        }
        let gstar = weighted_sum(&res.basis, &cstar)?;
        let target = cfg.target(n).clone();
        let c = &res.target_coeffs[(n - 1) % res.target_coeffs.len()];
        let scale = 0.5f64.powi(n as i32);
        let coeffs = ids
            .iter()
            .map(|&id| {
                let (cv, sv) = (c.get(&res.basis, id), cstar.get(&res.basis, id));
                CoeffBound { block: id, c: cv, cstar: sv, gap: (sv - cv).abs(), tol: 7.0 * scale + truncation }
            })
            .collect();
        let allowance = if n == depth { truncation * theta_big / 7.0 } else { 0.0 };
        let (eta_min, eta_max) = eta_bounds(&gstar)?;
        res.max_eigen_ratio = res.max_eigen_ratio.max(eta_max / eta_min);
        res.bounds.push(LevelBounds {
            n,
            fejer_order: order,
            checked: n >= 2,
            coeffs,
            gstar_gap: gstar.max_abs_diff(&target)?,
            gstar_tol: scale * theta_big + allowance,
            target,
            gstar: gstar.clone(),
            eta_min,
            eta_max,
        });
        res.cstar.push(cstar);
        res.gstar.push(gstar);
    }
    Ok(())
}

/// `G*_n`, the covariance of `N_n^{-1/2} S(X, N_n)`.
pub fn exact_block_cov(res: &ConstructionResult, n: usize) -> Result<SymMatrix<f64>> {
    if n == 0 || n > res.gstar.len() {
        return Err(Error::OutOfRange(format!("level {n} not computed (have 1..={})", res.gstar.len())));
    }
    Ok(res.gstar[n - 1].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn i2_config(depth: usize) -> ConstructionConfig {
        let mut cfg = ConstructionConfig::new(BandParams::new(2, 0.5, 2.0).unwrap(), vec![SymMatrix::identity(2)]);
        cfg.depth = depth;
        cfg.fejer_scan_cap = 1 << 14;
        cfg
    }

    #[test]
    fn constants_for_identity_example() {
        let cfg = ConstructionConfig::new(BandParams::new(2, 1.0, 2.0).unwrap(), vec![SymMatrix::identity(2)]);
        let lat = LatticeParams::new(cfg.band);
        let basis = build_basis(&cfg.targets, &lat, BasisMode::Subset, ENUMERATION_CAP).unwrap();
        let k = init_constants(&cfg, &basis);
        assert_abs_diff_eq!(k.upsilon1, (1.0f64 / 480.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(k.upsilon2, 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(k.theta_big, 49.0, epsilon = 1e-12);
        assert!(k.upsilon1 < 0.0 && 0.0 < k.upsilon2);
    }

    #[test]
    fn level_one_is_flat() {
        let cfg = i2_config(1);
        let lat = LatticeParams::new(cfg.band);
        let basis = build_basis(&cfg.targets, &lat, BasisMode::Subset, ENUMERATION_CAP).unwrap();
        let k = init_constants(&cfg, &basis);
        let lvl = init_level(&basis);
        assert!(lvl.functions.iter().all(|f| f.is_constant() && f.a0() == 0.0 && psi(f) == 0.0));
        assert_abs_diff_eq!(condition_c_slack(&lvl, &k), k.upsilon2, epsilon = 1e-15);
    }

    #[test]
    fn depth_one_run() {
        let res = run_recursion(&i2_config(1)).unwrap();
        assert!(res.completed());
        assert_eq!(res.fejer_orders(), vec![2]);
        assert_eq!(res.levels.len(), 2);
        for r in &res.levels[1].records {
            assert!((r.value_at_zero - r.target).abs() < 0.5);
            assert!(r.checks.passed());
        }
    }

    #[test]
    fn identity_run_bounds_hold() {
        let res = run_recursion(&i2_config(4)).unwrap();
        assert!(res.completed(), "{:?}", res.failure);
        let orders = res.fejer_orders();
        assert!(orders.windows(2).all(|w| w[0] < w[1]));
        assert!(res.bounds_passed());
        assert!(exact_block_cov(&res, 3).is_ok());
        assert!(exact_block_cov(&res, 9).is_err());
    }

    #[test]
    fn corrupted_cstar_flags_one_bound() {
        let mut cfg = i2_config(3);
        cfg.fault = Some(Fault::CorruptCstar);
        let res = run_recursion(&cfg).unwrap();
        let lvl2 = &res.bounds[1];
        assert_eq!(lvl2.coeffs.iter().filter(|c| !c.passed()).count(), 1);
        assert!(!res.bounds_passed());
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = i2_config(1);
        cfg.tau = 1.5;
        assert!(matches!(run_recursion(&cfg), Err(Error::Validation { .. })));
    }
}
