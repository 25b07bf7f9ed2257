//! Finite-window Gaussian dependence estimates: canonical correlations
//! between a past and a future window, the implied maximal-correlation and
//! mutual-information lower bounds, and their composition inequalities.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{eigen_decompose, matrix_power, Dense, SymMatrix};
use crate::simulation::ProcessSpec;
use crate::spectral::AutocovarianceTable;

pub const DEFAULT_WINDOW: usize = 64;
pub const CORR_CLIP: f64 = 1.0 - 1e-12;
pub const COMPOSITION_TOL: f64 = 1e-9;
pub const ADDITIVITY_TOL: f64 = 1e-10;

/// Stationary vector process with symmetric lag covariances.
pub trait LagCovariance: Sync {
    fn dim(&self) -> usize;
    /// `Cov(X_{t+k}, X_t)`.
    fn lag_cov(&self, k: usize) -> Result<SymMatrix<f64>>;
}

impl LagCovariance for AutocovarianceTable<f64> {
    fn dim(&self) -> usize {
        1
    }

    fn lag_cov(&self, k: usize) -> Result<SymMatrix<f64>> {
        Ok(SymMatrix::diagonal(&[self.lag(k as isize)?]))
    }
}

impl LagCovariance for ProcessSpec {
    fn dim(&self) -> usize {
        self.m
    }

    fn lag_cov(&self, k: usize) -> Result<SymMatrix<f64>> {
        ProcessSpec::lag_cov(self, k as isize)
    }
}

/// Independent scalar sequences stacked into one vector process.
pub struct Stacked<'a>(pub Vec<&'a AutocovarianceTable<f64>>);

impl LagCovariance for Stacked<'_> {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn lag_cov(&self, k: usize) -> Result<SymMatrix<f64>> {
        let d = self.0.iter().map(|t| t.lag(k as isize)).collect::<Result<Vec<_>>>()?;
        Ok(SymMatrix::diagonal(&d))
    }
}

/// Past window `X_{-p+1..0}` against future window `X_{gap..gap+q-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WindowSpec {
    pub past: usize,
    pub gap: usize,
    pub future: usize,
}

impl WindowSpec {
    pub fn new(past: usize, gap: usize, future: usize) -> Result<Self> {
        if past == 0 || future == 0 || gap == 0 {
            return Err(Error::Validation {
                field: "window".into(),
                message: format!("past, gap and future must be >= 1 (got {past}, {gap}, {future})"),
            });
        }
        Ok(WindowSpec { past, gap, future })
    }

    pub fn symmetric(len: usize, gap: usize) -> Result<Self> {
        Self::new(len, gap, len)
    }
}

#[derive(Clone, Debug)]
pub struct WindowCov {
    pub past: SymMatrix<f64>,
    pub future: SymMatrix<f64>,
    pub cross: Dense<f64>,
}

fn block_toeplitz(lags: &[SymMatrix<f64>], len: usize, m: usize) -> SymMatrix<f64> {
    SymMatrix::from_fn(len * m, |r, c| lags[(r / m).abs_diff(c / m)].get(r % m, c % m))
}

fn cross_block(lags: &[SymMatrix<f64>], w: &WindowSpec, m: usize) -> Dense<f64> {
    let mut out = Dense::zeros(w.past * m, w.future * m);
    for s in 0..w.past {
        for t in 0..w.future {
            let lag = &lags[w.gap + t + w.past - 1 - s];
            for i in 0..m {
                for j in 0..m {
                    out.set(s * m + i, t * m + j, lag.get(i, j));
                }
            }
        }
    }
    out
}

fn lags_up_to<P: LagCovariance + ?Sized>(process: &P, kmax: usize) -> Result<Vec<SymMatrix<f64>>> {
    (0..=kmax).map(|k| process.lag_cov(k)).collect()
}

pub fn window_cov<P: LagCovariance + ?Sized>(process: &P, w: &WindowSpec) -> Result<WindowCov> {
    let m = process.dim();
    let lags = lags_up_to(process, w.gap + w.past + w.future - 2)?;
    Ok(WindowCov {
        past: block_toeplitz(&lags, w.past, m),
        future: block_toeplitz(&lags, w.future, m),
        cross: cross_block(&lags, w, m),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CanonicalCorrelations {
    /// Descending, in `[0, CORR_CLIP]`.
    pub r: Vec<f64>,
    /// True when some correlation hit the clip.
    pub clipped: bool,
}

impl CanonicalCorrelations {
    pub fn top(&self) -> f64 {
        self.r.first().copied().unwrap_or(0.0)
    }

    /// `-(1/2) sum log(1 - r^2)`.
    pub fn mutual_information(&self) -> f64 {
        -0.5 * self.r.iter().map(|r| (-r * r).ln_1p()).sum::<f64>()
    }
}

fn inverse_sqrt(a: &SymMatrix<f64>, which: &str) -> Result<Dense<f64>> {
    match matrix_power(a, -0.5) {
        Ok(w) => Ok(Dense::from_sym(&w)),
        Err(Error::NotPositiveDefinite { min_eigenvalue }) => {
            Err(Error::DegenerateWindow(format!("{which} covariance has eigenvalue {min_eigenvalue:e}")))
        }
        Err(e) => Err(e),
    }
}

fn transpose(a: &Dense<f64>) -> Dense<f64> {
    let mut t = Dense::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            t.set(j, i, a.get(i, j));
        }
    }
    t
}

fn corrs_from_whitened(k: &Dense<f64>) -> Result<CanonicalCorrelations> {
    // squared singular values from the smaller Gram matrix
    let gram = if k.rows < k.cols { transpose(k).gram() } else { k.gram() };
    let eig = eigen_decompose(&gram)?;
    let mut clipped = false;
    let r = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            let r = l.max(0.0).sqrt();
            if r > CORR_CLIP {
                clipped = true;
                CORR_CLIP
            } else {
                r
            }
        })
        .collect();
    Ok(CanonicalCorrelations { r, clipped })
}

pub fn canonical_corrs(w: &WindowCov) -> Result<CanonicalCorrelations> {
    let wa = inverse_sqrt(&w.past, "past window")?;
    let wb = inverse_sqrt(&w.future, "future window")?;
    corrs_from_whitened(&wa.matmul(&w.cross)?.matmul(&wb)?)
}

pub fn rho_hat<P: LagCovariance + ?Sized>(process: &P, w: &WindowSpec) -> Result<f64> {
    Ok(canonical_corrs(&window_cov(process, w)?)?.top())
}

pub fn mi_hat<P: LagCovariance + ?Sized>(process: &P, w: &WindowSpec) -> Result<f64> {
    Ok(canonical_corrs(&window_cov(process, w)?)?.mutual_information())
}

#[derive(Clone, Debug, Serialize)]
pub struct GapPoint {
    pub gap: usize,
    pub rho_hat: f64,
    pub mi_hat: f64,
    pub clipped: bool,
}

/// `rho_hat` and `mi_hat` at each gap for fixed window lengths; the window
/// whitening is computed once.
pub fn gap_scan<P: LagCovariance + ?Sized>(process: &P, past: usize, future: usize, gaps: &[usize]) -> Result<Vec<GapPoint>> {
    let max_gap = gaps.iter().copied().max().unwrap_or(1);
    let m = process.dim();
    let lags = lags_up_to(process, max_gap + past + future - 2)?;
    let wa = inverse_sqrt(&block_toeplitz(&lags, past, m), "past window")?;
    let wb = inverse_sqrt(&block_toeplitz(&lags, future, m), "future window")?;
    gaps.par_iter()
        .map(|&gap| {
            let w = WindowSpec::new(past, gap, future)?;
            let cc = corrs_from_whitened(&wa.matmul(&cross_block(&lags, &w, m))?.matmul(&wb)?)?;
            Ok(GapPoint { gap, rho_hat: cc.top(), mi_hat: cc.mutual_information(), clipped: cc.clipped })
        })
        .collect()
}

/// Gaps `1, 2, 4, ...` up to and including `max_gap`.
pub fn doubling_gaps(max_gap: usize) -> Vec<usize> {
    let mut g: Vec<usize> = std::iter::successors(Some(1usize), |&x| Some(x * 2)).take_while(|&x| x < max_gap).collect();
    g.push(max_gap);
    g
}

/// Upper bound on the interlaced maximal correlation at gap 1 of a
/// Gaussian sequence whose log spectral density lies in `[upsilon1, upsilon2]`.
pub fn log_density_rho_bound(upsilon1: f64, upsilon2: f64) -> f64 {
    1.0 - (upsilon1 - upsilon2).exp()
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockMixing {
    pub block: String,
    pub copies: usize,
    pub rho_hat: f64,
    pub mi_hat: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompositionReport {
    pub window: WindowSpec,
    pub blocks: Vec<BlockMixing>,
    pub rho_process: f64,
    pub rho_max_block: f64,
    pub rho_slack: f64,
    pub mi_process: f64,
    pub mi_block_sum: f64,
    pub mi_slack: f64,
    /// `|I(stacked) - I(a) - I(b)|` for two distinct blocks, non-white ones first.
    pub additivity_error: f64,
    pub rho_mi_slack: f64,
}

impl CompositionReport {
    pub fn passed(&self) -> bool {
        self.rho_slack >= 0.0 && self.mi_slack >= 0.0 && self.additivity_error <= ADDITIVITY_TOL && self.rho_mi_slack >= 0.0
    }
}

/// `rho <= sqrt(2 I)` slack for one set of canonical correlations.
pub fn rho_mi_slack(cc: &CanonicalCorrelations) -> f64 {
    (2.0 * cc.mutual_information()).sqrt() - cc.top()
}

/// Compares the assembled process with its independent building blocks at a
/// matched window. Each lattice block enters with `m` independent copies.
pub fn composition_checks(spec: &ProcessSpec, w: &WindowSpec) -> Result<CompositionReport> {
    let proc_cc = canonical_corrs(&window_cov(spec, w)?)?;
    let block_cc = spec
        .autocov
        .par_iter()
        .map(|t| canonical_corrs(&window_cov(t, w)?))
        .collect::<Result<Vec<_>>>()?;
    let copies = |b: usize| if matches!(spec.blocks[b], crate::decomposition::BlockId::One(_)) { spec.m } else { 1 };
    let blocks: Vec<BlockMixing> = block_cc
        .iter()
        .enumerate()
        .map(|(b, cc)| BlockMixing {
            block: spec.blocks[b].to_string(),
            copies: copies(b),
            rho_hat: cc.top(),
            mi_hat: cc.mutual_information(),
        })
        .collect();
    let rho_max_block = blocks.iter().map(|b| b.rho_hat).fold(0.0, f64::max);
    let mi_block_sum: f64 = blocks.iter().map(|b| b.copies as f64 * b.mi_hat).sum();

    // prefer blocks with genuine serial dependence
    let (mut pick, rest): (Vec<usize>, Vec<usize>) =
        (0..spec.autocov.len()).partition(|&b| !spec.log_densities[b].is_constant());
    pick.extend(rest);
    let additivity_error = match pick[..] {
        [i, j, ..] => {
            let pair = Stacked(vec![&spec.autocov[i], &spec.autocov[j]]);
            let joint = canonical_corrs(&window_cov(&pair, w)?)?.mutual_information();
            (joint - blocks[i].mi_hat - blocks[j].mi_hat).abs()
        }
        _ => 0.0,
    };
    let rho_mi = std::iter::once(&proc_cc).chain(&block_cc).map(rho_mi_slack).fold(f64::INFINITY, f64::min);
    Ok(CompositionReport {
        window: *w,
        rho_process: proc_cc.top(),
        rho_max_block,
        rho_slack: rho_max_block + COMPOSITION_TOL - proc_cc.top(),
        mi_process: proc_cc.mutual_information(),
        mi_block_sum,
        mi_slack: mi_block_sum + COMPOSITION_TOL - proc_cc.mutual_information(),
        additivity_error,
        rho_mi_slack: rho_mi,
        blocks,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockBoundRecord {
    pub block: String,
    pub window: usize,
    pub rho_hat: f64,
    pub bound: f64,
    pub slack: f64,
}

/// `rho_hat(block, gap 1)` against the log-density bound for every block and
/// window length.
pub fn block_bound_checks(spec: &ProcessSpec, upsilon1: f64, upsilon2: f64, windows: &[usize]) -> Result<Vec<BlockBoundRecord>> {
    let bound = log_density_rho_bound(upsilon1, upsilon2);
    let mut out = Vec::new();
    for (b, table) in spec.autocov.iter().enumerate() {
        for &len in windows {
            let rho = rho_hat(table, &WindowSpec::symmetric(len, 1)?)?;
            out.push(BlockBoundRecord {
                block: spec.blocks[b].to_string(),
                window: len,
                rho_hat: rho,
                bound,
                slack: bound + COMPOSITION_TOL - rho,
            });
        }
    }
    Ok(out)
}

/// True when the sequence never rises by more than `tol`.
pub fn is_nonincreasing(values: &[f64], tol: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{autocov_truncated, CosineSeries, GridSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_term(a1: f64) -> AutocovarianceTable<f64> {
        autocov_truncated(&CosineSeries::new(0.0, vec![a1]), GridSpec::new(512).unwrap(), 1e-14).unwrap()
    }

    #[test]
    fn white_noise_has_zero_cross_block() {
        let t = AutocovarianceTable::white(2.0);
        let w = window_cov(&t, &WindowSpec::new(3, 1, 4).unwrap()).unwrap();
        assert!(w.cross.data.iter().all(|&x| x == 0.0));
        let cc = canonical_corrs(&w).unwrap();
        assert!(cc.r.iter().all(|&r| r == 0.0));
        assert_eq!(cc.mutual_information(), 0.0);
    }

    #[test]
    fn two_by_two_window() {
        let t = AutocovarianceTable::new(vec![2.0, 0.6], true).unwrap();
        let w = window_cov(&t, &WindowSpec::new(1, 1, 1).unwrap()).unwrap();
        assert_eq!(w.past.get(0, 0), 2.0);
        assert_eq!(w.future.get(0, 0), 2.0);
        assert_eq!(w.cross.get(0, 0), 0.6);
        let cc = canonical_corrs(&w).unwrap();
        assert_abs_diff_eq!(cc.top(), 0.3, epsilon = 1e-14);
    }

    #[test]
    fn identical_windows_hit_the_clip() {
        let a = SymMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let w = WindowCov { past: a.clone(), future: a.clone(), cross: Dense::from_sym(&a) };
        let cc = canonical_corrs(&w).unwrap();
        assert!(cc.clipped);
        assert_eq!(cc.top(), CORR_CLIP);
    }

    #[test]
    fn singular_window_is_degenerate() {
        let w = WindowCov { past: SymMatrix::zeros(1), future: SymMatrix::identity(1), cross: Dense::zeros(1, 1) };
        assert!(matches!(canonical_corrs(&w), Err(Error::DegenerateWindow(_))));
    }

    #[test]
    fn mi_formula() {
        let cc = CanonicalCorrelations { r: vec![0.5], clipped: false };
        assert_abs_diff_eq!(cc.mutual_information(), -0.5 * 0.75f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(cc.mutual_information(), 0.14384103622589045, epsilon = 1e-12);
    }

    #[test]
    fn window_monotonicity() {
        let t = one_term(0.8);
        let mut prev = (0.0, 0.0);
        for len in [1, 2, 4, 8, 16] {
            let cc = canonical_corrs(&window_cov(&t, &WindowSpec::symmetric(len, 1).unwrap()).unwrap()).unwrap();
            assert!(cc.top() >= prev.0 - 1e-12 && cc.mutual_information() >= prev.1 - 1e-12);
            prev = (cc.top(), cc.mutual_information());
        }
    }

    #[test]
    fn lemma_bound_on_one_term_blocks() {
        for a1 in [0.2, 0.5, 1.0] {
            let t = one_term(a1);
            let bound = log_density_rho_bound(-a1, a1);
            for len in [1, 8, 32] {
                assert!(rho_hat(&t, &WindowSpec::symmetric(len, 1).unwrap()).unwrap() <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn stacked_mi_is_additive() {
        let (a, b) = (one_term(0.7), one_term(-0.4));
        let w = WindowSpec::symmetric(6, 1).unwrap();
        let joint = mi_hat(&Stacked(vec![&a, &b]), &w).unwrap();
        let sum = mi_hat(&a, &w).unwrap() + mi_hat(&b, &w).unwrap();
        assert_abs_diff_eq!(joint, sum, epsilon = 1e-10);
        let white = AutocovarianceTable::white(1.0);
        assert_eq!(mi_hat(&Stacked(vec![&white, &white]), &w).unwrap(), 0.0);
    }

    #[test]
    fn gap_scan_matches_direct_and_decays() {
        let t = one_term(0.9);
        let gaps = doubling_gaps(64);
        let scan = gap_scan(&t, 8, 8, &gaps).unwrap();
        for p in &scan {
            let direct = rho_hat(&t, &WindowSpec::symmetric(8, p.gap).unwrap()).unwrap();
            assert_abs_diff_eq!(p.rho_hat, direct, epsilon = 1e-10);
        }
        let rho: Vec<f64> = scan.iter().map(|p| p.rho_hat).collect();
        assert!(is_nonincreasing(&rho, 1e-12));
        assert!(*rho.last().unwrap() < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn rho_bounded_by_mutual_information(a in prop::collection::vec(-0.6f64..0.6, 1..4), len in 1usize..6, gap in 1usize..4) {
            let f = CosineSeries::new(0.0, a);
            let t = autocov_truncated(&f, GridSpec::new(256).unwrap(), 1e-14).unwrap();
            let cc = canonical_corrs(&window_cov(&t, &WindowSpec::symmetric(len, gap).unwrap()).unwrap()).unwrap();
            prop_assert!(cc.r.iter().all(|&r| (0.0..1.0).contains(&r)));
            prop_assert!(rho_mi_slack(&cc) >= -1e-12);
        }
    }
}
