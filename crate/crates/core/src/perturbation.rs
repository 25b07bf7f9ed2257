//! Narrow-bump perturbations `h = f + g` that move `h(0)` to a target value
//! while keeping `h` close to `f` in the norms the recursion cares about.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{exp_fourier, fejer_means, grid_values, psi, CosineSeries, GridSpec};

/// Margin for the strict band inequality on the grid.
pub const BAND_MARGIN: f64 = 1e-9;
/// Smallest `c` tried by the halving search.
pub const C_FLOOR: f64 = 1e-12;
/// Fraction of the remaining `Psi` budget a perturbation may use.
pub const PSI_SHARE: f64 = 0.9;
/// Smallest verification grid.
pub const MIN_GRID: usize = 4096;

const C0_SHRINK: f64 = 0.9;
const MASS_GROWTH: f64 = 1.5;
const BISECTION_STEPS: usize = 80;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbRequest {
    pub f: CosineSeries<f64>,
    pub upsilon1: f64,
    pub upsilon2: f64,
    pub theta: f64,
    pub delta: f64,
    pub eps: f64,
    pub fejer_cap: usize,
}

impl PerturbRequest {
    fn negated(&self) -> Self {
        PerturbRequest {
            f: self.f.neg(),
            upsilon1: -self.upsilon2,
            upsilon2: -self.upsilon1,
            theta: -self.theta,
            ..self.clone()
        }
    }

    fn grid_for(&self, h: &CosineSeries<f64>) -> GridSpec {
        let deg = h.degree().max(self.f.degree());
        GridSpec::at_least(MIN_GRID.max(4 * self.fejer_cap).max(16 * deg))
    }

    /// Checks the hypotheses on `(f, upsilon, theta, delta)`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleRequest(m));
        if !(self.eps > 0.0 && self.delta > 0.0 && self.fejer_cap >= 1) {
            return bad("eps, delta and the Fejer cap must be positive".into());
        }
        if !(self.upsilon1 < self.theta && self.theta < self.upsilon2) {
            return bad(format!(
                "target {} outside ({}, {})",
                self.theta, self.upsilon1, self.upsilon2
            ));
        }
        let p = psi(&self.f);
        if p >= self.delta {
            return bad(format!("Psi(f) = {p} is not below delta = {}", self.delta));
        }
        let vals = grid_values(&self.f, self.grid_for(&self.f))?;
        let (lo, hi) = min_max(&vals);
        if !(self.upsilon1 < lo && hi < self.upsilon2) {
            return bad(format!(
                "f ranges over [{lo}, {hi}], not inside ({}, {})",
                self.upsilon1, self.upsilon2
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeVariant {
    /// `a_k = (c^2/pi)/k` for `k <= 2`, `(c^2/pi)/(k log k)` after, cut at `M(c)`.
    LogWeighted,
    /// Harmonic coefficients on the frequency band `[ceil(1/c), M]`.
    Harmonic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefficientScheme {
    pub variant: SchemeVariant,
    pub m_cap: usize,
}

impl CoefficientScheme {
    pub fn new(variant: SchemeVariant, m_cap: usize) -> Result<Self> {
        if m_cap == 0 {
            return Err(Error::Validation { field: "m_cap".into(), message: "must be at least 1".into() });
        }
        Ok(CoefficientScheme { variant, m_cap })
    }

    pub fn harmonic() -> Self {
        CoefficientScheme { variant: SchemeVariant::Harmonic, m_cap: 1 << 20 }
    }

    pub fn log_weighted() -> Self {
        CoefficientScheme { variant: SchemeVariant::LogWeighted, m_cap: 10_000_000 }
    }
}

/// One verified inequality; `slack > 0` means it holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    pub slack: f64,
}

impl CheckRecord {
    fn upper(name: &str, measured: f64, limit: f64) -> Self {
        CheckRecord { name: name.into(), measured, limit, slack: limit - measured }
    }

    fn lower(name: &str, measured: f64, limit: f64) -> Self {
        CheckRecord { name: name.into(), measured, limit, slack: measured - limit }
    }

    pub fn passed(&self) -> bool {
        self.slack > 0.0
    }
}

/// The six properties a perturbation must satisfy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbChecks {
    /// Distance from `h` to the edges of `(upsilon1, upsilon2)` on the grid.
    pub band: CheckRecord,
    /// `Psi(h) < delta`.
    pub psi: CheckRecord,
    /// `|h(0) - theta| < eps`.
    pub value_at_zero: CheckRecord,
    /// `int |h - f| dlambda < eps`.
    pub l1: CheckRecord,
    /// `max_{n <= N} |int F_n (exp h - exp f) dlambda| < eps`.
    pub fejer: CheckRecord,
    /// Same as `fejer` for `exp(-h)` and `exp(-f)`.
    pub fejer_neg: CheckRecord,
    pub grid_size: usize,
}

impl PerturbChecks {
    pub fn all(&self) -> [&CheckRecord; 6] {
        [&self.band, &self.psi, &self.value_at_zero, &self.l1, &self.fejer, &self.fejer_neg]
    }

    pub fn passed(&self) -> bool {
        self.all().iter().all(|c| c.passed())
    }

    pub fn first_failure(&self) -> Option<&CheckRecord> {
        self.all().into_iter().find(|c| !c.passed())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `theta = f(0)`: `h = f`.
    Identity,
    /// `theta > f(0)`: upward bump.
    Raise,
    /// `theta < f(0)`: solved on the negated problem.
    Lower,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbResult {
    pub h: CosineSeries<f64>,
    pub c_used: f64,
    pub scheme: CoefficientScheme,
    pub branch: Branch,
    pub halvings: usize,
    pub checks: PerturbChecks,
}

/// `0.9` times the largest `c` with `c < min(1, theta - f(0))`,
/// `upsilon1 < f - c`, `f + c < upsilon2` and
/// `|f(lambda) - f(0)| < upsilon2 - theta` for `|lambda| <= c`.
pub fn select_c0(req: &PerturbRequest) -> Result<f64> {
    let f0 = req.f.value_at_zero();
    if req.theta <= f0 {
        return Err(Error::Precondition(format!("select_c0 needs theta > f(0), got {} <= {f0}", req.theta)));
    }
    let grid = req.grid_for(&req.f);
    let vals = grid_values(&req.f, grid)?;
    let (lo, hi) = min_max(&vals);
    let cap = 1f64.min(req.theta - f0).min(lo - req.upsilon1).min(req.upsilon2 - hi);
    let room = req.upsilon2 - req.theta;
    if !(cap > 0.0) || !(room > 0.0) {
        return Err(Error::InfeasibleRequest(format!(
            "no positive c0: cap {cap}, room above target {room}"
        )));
    }
    let near_ok = |c: f64| {
        let flat = (0..grid.size()).all(|j| {
            let lam: f64 = grid.node(j);
            lam.abs() > c || (vals[j] - f0).abs() < room
        });
        flat && (req.f.eval(c) - f0).abs() < room
    };
    let largest = if near_ok(cap) {
        cap
    } else {
        let (mut good, mut bad) = (0.0, cap);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (good + bad);
            if near_ok(mid) {
                good = mid;
            } else {
                bad = mid;
            }
        }
        good
    };
    if !(largest > 0.0) {
        return Err(Error::InfeasibleRequest("f varies too fast near zero for any c0".into()));
    }
    Ok(C0_SHRINK * largest)
}

/// Coefficient `a_{c,k}` of the literal scheme.
pub fn coeff_a(c: f64, k: usize) -> f64 {
    assert!(c > 0.0 && k >= 1);
    let base = c * c / PI;
    let kf = k as f64;
    if k <= 2 {
        base / kf
    } else {
        base / (kf * kf.ln())
    }
}

/// Outcome of the series-length search for the literal scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CapM {
    Exact(usize),
    /// The partial sum at `m_cap` is still within budget; carries an
    /// estimate of `ln ln M`.
    Overflow { log_log_estimate: f64 },
}

/// Greatest `M` with `sum_{k <= M} a_{c,k} <= budget`.
pub fn cap_m(c: f64, budget: f64, m_cap: usize) -> Result<CapM> {
    if budget <= coeff_a(c, 1) {
        return Err(Error::Precondition(format!(
            "budget {budget} does not exceed the first coefficient {}",
            coeff_a(c, 1)
        )));
    }
    let mut sum = 0.0;
    for k in 1..=m_cap {
        let next = sum + coeff_a(c, k);
        if next > budget {
            return Ok(CapM::Exact(k - 1));
        }
        sum = next;
    }
    // the tail sum_{m_cap < k <= M} 1/(k ln k) is ln ln M - ln ln m_cap
    let rest = (budget - sum) * PI / (c * c);
    Ok(CapM::Overflow { log_log_estimate: (m_cap as f64).ln().ln() + rest })
}

/// `g_c = sum_{k <= M} a_{c,k} cos(k lambda)`.
pub fn build_gc(c: f64, m: usize) -> CosineSeries<f64> {
    assert!(m >= 1);
    CosineSeries::new(0.0, (1..=m).map(|k| coeff_a(c, k)).collect())
}

/// Harmonic series on `[k_low, M]`: `a_k = budget / (k D)` with
/// `D = H_M - H_{k_low - 1}`, and `M` the smallest index with
/// `D >= max(budget^2 / (0.9 delta_room), min_mass)`.
///
/// The result has `g(0) = budget` and `Psi(g) = budget^2 / D`.
pub fn harmonic_band_gc(
    budget: f64,
    delta_room: f64,
    k_low: usize,
    min_mass: f64,
    m_cap: usize,
) -> Result<CosineSeries<f64>> {
    if !(budget > 0.0 && delta_room > 0.0 && k_low >= 1) {
        return Err(Error::Precondition("harmonic series needs positive budget and Psi room".into()));
    }
    let need = (budget * budget / (PSI_SHARE * delta_room)).max(min_mass);
    // H_M - H_{k-1} ~ ln(M / k)
    let ln_estimate = (k_low as f64).ln() + need;
    if ln_estimate > (4.0 * m_cap as f64).ln() {
        return Err(infeasible_harmonic(ln_estimate, need, m_cap));
    }
    let mut mass = 0.0;
    let mut m = k_low - 1;
    while mass < need {
        m += 1;
        if m > m_cap {
            return Err(infeasible_harmonic(ln_estimate, need, m_cap));
        }
        mass += 1.0 / m as f64;
    }
    let mut coeffs = vec![0.0; m];
    for (k, slot) in coeffs.iter_mut().enumerate().skip(k_low - 1) {
        *slot = budget / ((k + 1) as f64 * mass);
    }
    Ok(CosineSeries::new(0.0, coeffs))
}

/// Harmonic series on `[1, M]`.
pub fn harmonic_gc(budget: f64, delta_room: f64, m_cap: usize) -> Result<CosineSeries<f64>> {
    harmonic_band_gc(budget, delta_room, 1, 0.0, m_cap)
}

fn infeasible_harmonic(ln_terms: f64, mass: f64, m_cap: usize) -> Error {
    let log10 = ln_terms / std::f64::consts::LN_10;
    Error::SchemeInfeasible {
        needed_terms: ln_terms.exp(),
        detail: format!(
            "harmonic mass {mass:.3} needs about 10^{log10:.1} terms, cap is {m_cap}"
        ),
        hint: "raise delta or m_cap".into(),
    }
}

/// Recomputes the six properties of `h` against `req` from scratch.
pub fn verify_perturbation(req: &PerturbRequest, h: &CosineSeries<f64>) -> Result<PerturbChecks> {
    let grid = req.grid_for(h);
    let hv = grid_values(h, grid)?;
    let fv = grid_values(&req.f, grid)?;
    let (lo, hi) = min_max(&hv);
    let band_gap = (lo - req.upsilon1).min(req.upsilon2 - hi);

    let l1 = 2.0 * PI * hv.iter().zip(&fv).map(|(a, b)| (a - b).abs()).sum::<f64>() / grid.size() as f64;

    let fejer_gap = |sign: f64| -> Result<f64> {
        let n = req.fejer_cap;
        let mh = fejer_means(&exp_fourier(h, grid, sign)?, n);
        let mf = fejer_means(&exp_fourier(&req.f, grid, sign)?, n);
        Ok(2.0 * PI * mh.iter().zip(&mf).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    };

    Ok(PerturbChecks {
        band: CheckRecord::lower("band", band_gap, BAND_MARGIN),
        psi: CheckRecord::upper("psi", psi(h), req.delta),
        value_at_zero: CheckRecord::upper("value_at_zero", (h.value_at_zero() - req.theta).abs(), req.eps),
        l1: CheckRecord::upper("l1", l1, req.eps),
        fejer: CheckRecord::upper("fejer", fejer_gap(1.0)?, req.eps),
        fejer_neg: CheckRecord::upper("fejer_neg", fejer_gap(-1.0)?, req.eps),
        grid_size: grid.size(),
    })
}

/// Threshold below which `theta` and `f(0)` count as equal.
pub fn identity_tolerance(theta: f64) -> f64 {
    1e-12 * theta.abs().max(1.0)
}

/// Builds `h` with `h(0)` within `eps` of `theta`, close to `f`, and with
/// Fejer integrals of `exp(+-h)` close to those of `exp(+-f)` up to order `N`.
pub fn construct_h(req: &PerturbRequest, scheme: CoefficientScheme) -> Result<PerturbResult> {
    req.validate()?;
    let gap = req.theta - req.f.value_at_zero();
    if gap.abs() <= identity_tolerance(req.theta) {
        let checks = verify_perturbation(req, &req.f)?;
        return finish(req.f.clone(), 0.0, scheme, Branch::Identity, 0, checks);
    }
    if gap > 0.0 {
        return raise(req, scheme);
    }
    let up = raise(&req.negated(), scheme)?;
    let h = up.h.neg();
    let checks = verify_perturbation(req, &h)?;
    finish(h, up.c_used, scheme, Branch::Lower, up.halvings, checks)
}

fn finish(
    h: CosineSeries<f64>,
    c_used: f64,
    scheme: CoefficientScheme,
    branch: Branch,
    halvings: usize,
    checks: PerturbChecks,
) -> Result<PerturbResult> {
    if let Some(bad) = checks.first_failure() {
        return Err(Error::ConstructionFailed { c: c_used, halvings, check: bad.name.clone() });
    }
    Ok(PerturbResult { h, c_used, scheme, branch, halvings, checks })
}

fn raise(req: &PerturbRequest, scheme: CoefficientScheme) -> Result<PerturbResult> {
    let c0 = select_c0(req)?;
    let budget = req.theta - req.f.value_at_zero();
    let room = (req.delta.sqrt() - psi(&req.f).sqrt()).powi(2);
    let mut c = c0;
    let mut halvings = 0;
    let mut last_failure = String::from("none");
    while c >= C_FLOOR {
        let g = match scheme.variant {
            SchemeVariant::LogWeighted => match cap_m(c, budget, scheme.m_cap)? {
                CapM::Exact(m) => build_gc(c, m.max(1)),
                CapM::Overflow { log_log_estimate } => {
                    return Err(Error::SchemeInfeasible {
                        needed_terms: log_log_estimate.exp().exp(),
                        detail: format!(
                            "series length M(c) at c = {c:.3e} has ln ln M ~ {log_log_estimate:.2}"
                        ),
                        hint: "use the harmonic scheme".into(),
                    })
                }
            },
            SchemeVariant::Harmonic => {
                let k_low = (1.0 / c).ceil() as usize;
                widen_until_in_band(req, budget, room, k_low, scheme.m_cap)?
            }
        };
        let h = req.f.add(&g);
        let checks = verify_perturbation(req, &h)?;
        match checks.first_failure() {
            None => return Ok(PerturbResult { h, c_used: c, scheme, branch: Branch::Raise, halvings, checks }),
            Some(bad) => last_failure = bad.name.clone(),
        }
        c *= 0.5;
        halvings += 1;
    }
    Err(Error::ConstructionFailed { c, halvings, check: last_failure })
}

/// Harmonic band series whose side lobes keep `f + g` inside the band,
/// growing the harmonic mass by `MASS_GROWTH` until they do.
fn widen_until_in_band(
    req: &PerturbRequest,
    budget: f64,
    room: f64,
    k_low: usize,
    m_cap: usize,
) -> Result<CosineSeries<f64>> {
    let mut mass = 0.0;
    loop {
        let g = harmonic_band_gc(budget, room, k_low, mass, m_cap)?;
        let h = req.f.add(&g);
        let (lo, hi) = min_max(&grid_values(&h, req.grid_for(&h))?);
        if lo - req.upsilon1 > BAND_MARGIN && req.upsilon2 - hi > BAND_MARGIN {
            return Ok(g);
        }
        mass = MASS_GROWTH * budget * budget / psi(&g);
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn req(f: CosineSeries<f64>, theta: f64) -> PerturbRequest {
        PerturbRequest {
            f,
            upsilon1: -2.0,
            upsilon2: 2f64.ln(),
            theta,
            delta: 0.5,
            eps: 0.05,
            fejer_cap: 4,
        }
    }

    #[test]
    fn c0_for_flat_f() {
        let c0 = select_c0(&req(CosineSeries::zero(), 0.3)).unwrap();
        assert_abs_diff_eq!(c0, 0.27, epsilon = 1e-12);
    }

    #[test]
    fn c0_near_degenerate() {
        let f = CosineSeries::constant(0.3 - 1e-9);
        let c0 = select_c0(&req(f, 0.3)).unwrap();
        assert!(c0 > 0.0);
        assert_abs_diff_eq!(c0, 0.9e-9, epsilon = 1e-15);
    }

    #[test]
    fn c0_rejects_f_outside_band() {
        let f = CosineSeries::new(-1.9, vec![0.5]);
        let r = req(f, 0.0);
        assert!(matches!(r.validate(), Err(Error::InfeasibleRequest(_))));
        assert!(matches!(select_c0(&r), Err(Error::InfeasibleRequest(_))));
    }

    #[test]
    fn c0_respects_local_flatness() {
        // f(0) = 0.2, f drops steeply; room above theta is small
        let f = CosineSeries::new(0.0, vec![0.2]);
        let mut r = req(f.clone(), 0.68);
        r.upsilon2 = 0.7;
        let c0 = select_c0(&r).unwrap();
        let largest = c0 / 0.9;
        assert!((f.eval(largest) - 0.2).abs() <= 0.02 + 1e-9);
        assert!((f.eval(largest * 1.01) - 0.2).abs() >= 0.02 - 1e-9);
    }

    #[test]
    fn coefficient_examples() {
        assert_abs_diff_eq!(coeff_a(0.1, 1), 0.01 / PI, epsilon = 1e-17);
        assert_abs_diff_eq!(coeff_a(0.1, 2), 0.005 / PI, epsilon = 1e-17);
        assert_abs_diff_eq!(coeff_a(0.1, 3), 0.01 / PI / (3.0 * 3f64.ln()), epsilon = 1e-17);
    }

    #[test]
    fn cap_m_boundary_and_small_case() {
        let c = 0.5;
        let a1 = coeff_a(c, 1);
        assert_eq!(cap_m(c, a1 * 1.0001, 100).unwrap(), CapM::Exact(1));
        assert!(matches!(cap_m(c, a1, 100), Err(Error::Precondition(_))));
        let CapM::Exact(m) = cap_m(c, 0.1, 1000).unwrap() else { panic!("overflow") };
        let s: f64 = (1..=m).map(|k| coeff_a(c, k)).sum();
        assert!(s <= 0.1 && s + coeff_a(c, m + 1) > 0.1);
    }

    #[test]
    fn cap_m_overflow_estimate() {
        let out = cap_m(0.1, 0.5, 100_000).unwrap();
        let CapM::Overflow { log_log_estimate } = out else { panic!("expected overflow") };
        // pi * 0.5 / 0.01 is about 157, so ln ln M is of that order
        assert!(log_log_estimate > 100.0 && log_log_estimate < 200.0);
    }

    #[test]
    fn build_gc_value_at_zero() {
        let g = build_gc(0.3, 1);
        assert_eq!(g.degree(), 1);
        let g = build_gc(0.5, 40);
        let s: f64 = (1..=40).map(|k| coeff_a(0.5, k)).sum();
        assert_abs_diff_eq!(g.value_at_zero(), s, epsilon = 1e-15);
    }

    #[test]
    fn log_weighted_envelope_on_grid() {
        let c = 0.5;
        let CapM::Exact(m) = cap_m(c, 0.1, 1000).unwrap() else { panic!() };
        let g = build_gc(c, m);
        let grid = GridSpec::new(4096).unwrap();
        let v = grid_values(&g, grid).unwrap();
        for (j, &x) in v.iter().enumerate() {
            let lam: f64 = grid.node(j);
            if lam.abs() >= c {
                assert!(x.abs() <= c);
            } else {
                assert!(x >= -c && x <= 0.1 + 1e-15);
            }
        }
    }

    #[test]
    fn harmonic_examples() {
        let g = harmonic_gc(0.5, 0.1, 1000).unwrap();
        assert_eq!(g.degree(), 9);
        let h9: f64 = (1..=9).map(|k| 1.0 / k as f64).sum();
        assert_abs_diff_eq!(psi(&g), 0.25 / h9, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value_at_zero(), 0.5, epsilon = 1e-15);
        assert!(matches!(harmonic_gc(1.0, 0.001, 1 << 20), Err(Error::SchemeInfeasible { .. })));
    }

    #[test]
    fn harmonic_band_starts_at_k_low() {
        let g = harmonic_band_gc(0.7, 1.0, 10, 2.0, 10_000).unwrap();
        assert!(g.coeffs()[..9].iter().all(|&a| a == 0.0));
        assert_abs_diff_eq!(g.value_at_zero(), 0.7, epsilon = 1e-14);
        let mass: f64 = (10..=g.degree()).map(|k| 1.0 / k as f64).sum();
        assert!(mass >= 2.0);
        assert_abs_diff_eq!(psi(&g), 0.49 / mass, epsilon = 1e-15);
    }

    #[test]
    fn identity_branch() {
        let f = CosineSeries::new(0.1, vec![0.05]);
        let r = req(f.clone(), 0.15);
        let out = construct_h(&r, CoefficientScheme::harmonic()).unwrap();
        assert_eq!(out.branch, Branch::Identity);
        assert_eq!(out.h, f);
        assert!(out.checks.passed());
    }

    #[test]
    fn raise_branch_slack_positive() {
        let r = req(CosineSeries::zero(), 0.3);
        let out = construct_h(&r, CoefficientScheme::harmonic()).unwrap();
        assert_eq!(out.branch, Branch::Raise);
        for c in out.checks.all() {
            assert!(c.slack > 0.0, "{c:?}");
        }
        let again = verify_perturbation(&r, &out.h).unwrap();
        assert_eq!(again, out.checks);
    }

    #[test]
    fn lower_branch_is_mirror_image() {
        let down = construct_h(&req(CosineSeries::zero(), -0.4), CoefficientScheme::harmonic()).unwrap();
        assert_eq!(down.branch, Branch::Lower);
        assert!((down.h.value_at_zero() + 0.4).abs() < 0.05);
        let mut mirrored = req(CosineSeries::zero(), 0.4);
        mirrored.upsilon1 = -(2f64.ln());
        mirrored.upsilon2 = 2.0;
        let checks = verify_perturbation(&mirrored, &down.h.neg()).unwrap();
        assert!(checks.passed());
        assert_eq!(psi(&down.h), psi(&down.h.neg()));
    }

    #[test]
    fn log_weighted_scheme_reports_infeasibility() {
        let r = req(CosineSeries::zero(), 0.3);
        let scheme = CoefficientScheme::new(SchemeVariant::LogWeighted, 100_000).unwrap();
        assert!(matches!(construct_h(&r, scheme), Err(Error::SchemeInfeasible { .. })));
    }

    #[test]
    fn log_weighted_length_is_finite_only_for_large_budgets() {
        let CapM::Exact(m) = cap_m(0.9, 1.0, 10_000_000).unwrap() else { panic!("overflow") };
        assert!(m > 10_000 && m < 1_000_000, "{m}");
        let s: f64 = (1..=m).map(|k| coeff_a(0.9, k)).sum();
        assert!(s <= 1.0 && s + coeff_a(0.9, m + 1) > 1.0);
        assert!(matches!(cap_m(0.027, 0.03, 10_000_000).unwrap(), CapM::Overflow { .. }));
    }
}
