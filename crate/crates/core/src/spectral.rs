//! Even trigonometric polynomials on `[-pi, pi]`, the `Psi` functional,
//! Fejer kernels and Fourier coefficients of `exp(f)`.
//!
//! All integrals against `exp(f)` use the trapezoidal rule on a uniform
//! periodic grid, evaluated with FFTs. The integrands are entire and
//! periodic, so the rule converges geometrically once the grid resolves the
//! series.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Safety factor applied to the tolerance in [`fejer_rank`].
pub const RANK_MARGIN: f64 = 0.1;

/// Grid-to-degree ratio required before `exp(f)` is integrated on a grid.
pub const OVERSAMPLING: usize = 16;

/// `f(lambda) = a0 + sum_{k=1..K} a_k cos(k lambda)`, trailing zeros trimmed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSeries<T> {
    a0: T,
    coeffs: Vec<T>,
}

impl<T: Real> CosineSeries<T> {
    pub fn new(a0: T, mut coeffs: Vec<T>) -> Self {
        while coeffs.last().is_some_and(|c| *c == T::zero()) {
            coeffs.pop();
        }
        CosineSeries { a0, coeffs }
    }

    pub fn zero() -> Self {
        Self::constant(T::zero())
    }

    pub fn constant(c: T) -> Self {
        CosineSeries { a0: c, coeffs: Vec::new() }
    }

    #[inline]
    pub fn a0(&self) -> T {
        self.a0
    }

    /// `a_1 .. a_K`.
    #[inline]
    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    /// Cosine coefficient `a_k` (`k = 0` gives the constant term).
    pub fn coeff(&self, k: usize) -> T {
        match k {
            0 => self.a0,
            _ => self.coeffs.get(k - 1).copied().unwrap_or_else(T::zero),
        }
    }

    /// Highest frequency with a nonzero coefficient.
    #[inline]
    pub fn degree(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Clenshaw evaluation.
    pub fn eval(&self, lambda: T) -> T {
        let x = lambda.cos();
        let two_x = x + x;
        let (mut b1, mut b2) = (T::zero(), T::zero());
        for &c in self.coeffs.iter().rev() {
            let b0 = c + two_x * b1 - b2;
            b2 = b1;
            b1 = b0;
        }
        self.a0 + x * b1 - b2
    }

    /// `f(0)`, summed term by term.
    pub fn value_at_zero(&self) -> T {
        self.coeffs.iter().fold(self.a0, |acc, &c| acc + c)
    }

    pub fn add(&self, other: &Self) -> Self {
        let n = self.coeffs.len().max(other.coeffs.len());
        let coeffs = (1..=n).map(|k| self.coeff(k) + other.coeff(k)).collect();
        Self::new(self.a0 + other.a0, coeffs)
    }

    pub fn neg(&self) -> Self {
        CosineSeries { a0: -self.a0, coeffs: self.coeffs.iter().map(|&c| -c).collect() }
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.a0 * s, self.coeffs.iter().map(|&c| c * s).collect())
    }

    /// Keeps frequencies `<= k`.
    pub fn truncate(&self, k: usize) -> Self {
        Self::new(self.a0, self.coeffs.iter().take(k).copied().collect())
    }
}

/// `Psi(f) = sum_k k * a_k^2`; for a cosine polynomial the Fourier
/// coefficients `psi_{f,k}` are exactly the cosine coefficients.
pub fn psi<T: Real>(f: &CosineSeries<T>) -> T {
    f.coeffs()
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (i, &a)| acc + T::count(i + 1) * a * a)
}

/// Minkowski bound `sqrt Psi(f+g) <= sqrt Psi(f) + sqrt Psi(g)`.
pub fn psi_subadditive_check<T: Real>(f: &CosineSeries<T>, g: &CosineSeries<T>) -> bool {
    let lhs = psi(&f.add(g)).sqrt();
    let rhs = psi(f).sqrt() + psi(g).sqrt();
    lhs <= rhs + T::tol(1e-12)
}

/// Fejer kernel `F_n(lambda) = sin^2(n lambda / 2) / (n sin^2(lambda / 2))`,
/// `F_n(0) = n`.
pub fn fejer_kernel<T: Real>(n: usize, lambda: T) -> T {
    assert!(n >= 1, "Fejer kernel order must be positive");
    let nf = T::count(n);
    if lambda.abs() < T::lit(1e-8) {
        // n (1 - (n^2 - 1) lambda^2 / 12)
        return nf * (T::one() - (nf * nf - T::one()) * lambda * lambda / T::lit(12.0));
    }
    let half = T::lit(0.5);
    let num = (nf * lambda * half).sin();
    let den = (lambda * half).sin();
    num * num / (nf * den * den)
}

/// Uniform periodic grid `lambda_j = -pi + 2 pi j / size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    size: usize,
}

impl GridSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size < 4 || !size.is_power_of_two() {
            return Err(Error::Config(format!("grid size must be a power of two >= 4, got {size}")));
        }
        Ok(GridSpec { size })
    }

    /// Smallest power-of-two grid with at least `min` points.
    pub fn at_least(min: usize) -> Self {
        GridSpec { size: min.max(4).next_power_of_two() }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn node<T: Real>(&self, j: usize) -> T {
        -T::pi() + T::lit(2.0) * T::pi() * T::count(j) / T::count(self.size)
    }

    /// Index of the node at `lambda = 0`.
    pub fn zero_index(&self) -> usize {
        self.size / 2
    }

    /// Grid adequate for integrating `exp(f)` against Fejer kernels of order
    /// up to `max_order`.
    pub fn for_series<T: Real>(f: &CosineSeries<T>, max_order: usize, min_size: usize) -> Self {
        Self::at_least((OVERSAMPLING * f.degree()).max(4 * max_order).max(min_size))
    }

    fn require(&self, what: &str, needed: usize) -> Result<()> {
        if self.size < needed {
            return Err(Error::Config(format!(
                "grid of size {} too small for {what} (needs >= {needed})",
                self.size
            )));
        }
        Ok(())
    }
}

/// Values of `f` on every grid node, computed with one inverse FFT.
pub fn grid_values<T: Real>(f: &CosineSeries<T>, grid: GridSpec) -> Result<Vec<T>> {
    let g = grid.size();
    grid.require("series evaluation", 2 * f.degree() + 1)?;
    let mut buf = vec![Complex::new(T::zero(), T::zero()); g];
    buf[0] = Complex::new(f.a0(), T::zero());
    for (i, &a) in f.coeffs().iter().enumerate() {
        let k = i + 1;
        // exp(i k lambda_j) = (-1)^k exp(2 pi i j k / G)
        let signed = if k % 2 == 0 { a } else { -a };
        buf[k] = Complex::new(signed, T::zero());
    }
    FftPlanner::new().plan_fft_inverse(g).process(&mut buf);
    Ok(buf.into_iter().map(|z| z.re).collect())
}

/// Fourier coefficients `r_k = (1/G) sum_j exp(i k lambda_j) v_j` of grid
/// values of an even function, for `k = 0 .. G/2`.
pub fn grid_fourier<T: Real>(values: &[T]) -> Vec<T> {
    let g = values.len();
    let mut buf: Vec<Complex<T>> = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
    FftPlanner::new().plan_fft_inverse(g).process(&mut buf);
    let scale = T::one() / T::count(g);
    buf.iter()
        .take(g / 2 + 1)
        .enumerate()
        .map(|(k, z)| if k % 2 == 0 { z.re * scale } else { -z.re * scale })
        .collect()
}

/// Autocovariances `r[0..=kmax]` of a stationary sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutocovarianceTable<T> {
    r: Vec<T>,
    /// True when lags past the end of `r` are known to be negligible and
    /// read as zero.
    exhausted: bool,
}

impl<T: Real> AutocovarianceTable<T> {
    pub fn new(r: Vec<T>, exhausted: bool) -> Result<Self> {
        let Some(&r0) = r.first() else {
            return Err(Error::Config("autocovariance table is empty".into()));
        };
        if !(r0 > T::zero()) {
            return Err(Error::Config("autocovariance r[0] must be positive".into()));
        }
        let slack = r0 * T::tol(1e-12);
        if let Some(k) = r.iter().position(|&x| x.abs() > r0 + slack) {
            return Err(Error::Config(format!("|r[{k}]| exceeds r[0]")));
        }
        Ok(AutocovarianceTable { r, exhausted })
    }

    /// White noise with variance `var`.
    pub fn white(var: T) -> Self {
        AutocovarianceTable { r: vec![var], exhausted: true }
    }

    pub fn values(&self) -> &[T] {
        &self.r
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    /// Largest lag with a stored (nonzero-tail) value.
    pub fn kmax(&self) -> usize {
        self.r.len() - 1
    }

    /// `r[|k|]`.
    pub fn lag(&self, k: isize) -> Result<T> {
        let k = k.unsigned_abs();
        match self.r.get(k) {
            Some(&v) => Ok(v),
            None if self.exhausted => Ok(T::zero()),
            None => Err(Error::TableTooShort { needed: k, available: self.kmax() }),
        }
    }

    /// `Var(S_n / sqrt n) = sum_{|k|<n} (1 - |k|/n) r_k`.
    pub fn partial_sum_variance(&self, n: usize) -> Result<T> {
        assert!(n >= 1);
        let nf = T::count(n);
        let mut acc = self.lag(0)?;
        for k in 1..n {
            if k >= self.r.len() && self.exhausted {
                break;
            }
            let w = T::one() - T::count(k) / nf;
            acc = acc + T::lit(2.0) * w * self.lag(k as isize)?;
        }
        Ok(acc)
    }
}

/// All Fourier coefficients (lags `0 ..= G/2`) of `exp(sign * f)`.
pub fn exp_fourier<T: Real>(f: &CosineSeries<T>, grid: GridSpec, sign: T) -> Result<Vec<T>> {
    let vals: Vec<T> = grid_values(f, grid)?.into_iter().map(|v| (sign * v).exp()).collect();
    Ok(grid_fourier(&vals))
}

/// `r[k] = int exp(i k lambda) exp(f(lambda)) dlambda / 2pi` for `k <= kmax`.
pub fn autocov_of_exp<T: Real>(
    f: &CosineSeries<T>,
    grid: GridSpec,
    kmax: usize,
) -> Result<AutocovarianceTable<T>> {
    grid.require("autocovariance lags", 4 * kmax.max(1))?;
    let mut r = exp_fourier(f, grid, T::one())?;
    r.truncate(kmax + 1);
    AutocovarianceTable::new(r, f.is_constant())
}

/// Autocovariances of `exp(f)` cut at the last lag with
/// `|r_k| >= rel_cut * r_0`; the returned table reads zero beyond.
pub fn autocov_truncated<T: Real>(
    f: &CosineSeries<T>,
    grid: GridSpec,
    rel_cut: T,
) -> Result<AutocovarianceTable<T>> {
    let mut r = exp_fourier(f, grid, T::one())?;
    let cut = r[0] * rel_cut;
    let last = r.iter().rposition(|x| x.abs() >= cut).unwrap_or(0);
    if last + 1 >= r.len() {
        return Err(Error::Config(format!(
            "grid of size {} does not resolve the autocovariance tail",
            grid.size()
        )));
    }
    r.truncate(last + 1);
    AutocovarianceTable::new(r, true)
}

/// Fejer means `sigma_n = sum_{|k|<n} (1 - |k|/n) r_k` for `n = 1 ..= n_max`
/// (`out[n - 1] = sigma_n`). Lags past the end of `r` are treated as zero.
pub fn fejer_means<T: Real>(r: &[T], n_max: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n_max);
    let (mut sum_r, mut sum_kr) = (T::zero(), T::zero());
    let two = T::lit(2.0);
    for n in 1..=n_max {
        // add lag n-1 to the running sums (lag 0 counted once)
        let k = n - 1;
        if k >= 1 {
            let rk = r.get(k).copied().unwrap_or_else(T::zero);
            sum_r = sum_r + rk;
            sum_kr = sum_kr + T::count(k) * rk;
        }
        out.push(r[0] + two * sum_r - two * sum_kr / T::count(n));
    }
    out
}

/// `int F_n exp(f) dlambda / 2pi`, through the autocovariance identity.
pub fn fejer_integral_exp<T: Real>(f: &CosineSeries<T>, n: usize, grid: GridSpec) -> Result<T> {
    assert!(n >= 1);
    grid.require("Fejer order", 4 * n)?;
    let r = exp_fourier(f, grid, T::one())?;
    Ok(*fejer_means(&r, n).last().expect("n >= 1"))
}

/// `int F_n exp(f) dlambda / 2pi` by direct trapezoidal quadrature of the
/// kernel times the density.
pub fn fejer_integral_exp_direct<T: Real>(f: &CosineSeries<T>, n: usize, grid: GridSpec) -> Result<T> {
    grid.require("Fejer order", 4 * n)?;
    let vals = grid_values(f, grid)?;
    let sum = vals
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (j, &v)| acc + fejer_kernel(n, grid.node::<T>(j)) * v.exp());
    Ok(sum / T::count(grid.size()))
}

/// Smallest `N <= n_max` with `|exp(f(0)) - sigma_n(exp f)| <= eps (1 - margin)`
/// for every `n` in `N ..= n_max`.
pub fn fejer_rank<T: Real>(f: &CosineSeries<T>, eps: T, grid: GridSpec, n_max: usize) -> Result<usize> {
    assert!(eps > T::zero());
    grid.require("Fejer rank scan", 4 * n_max)?;
    let r = exp_fourier(f, grid, T::one())?;
    let target = f.value_at_zero().exp();
    let tol = eps * (T::one() - T::lit(RANK_MARGIN));
    let means = fejer_means(&r, n_max);
    let dev = |n: usize| (target - means[n - 1]).abs();
    if dev(n_max) > tol {
        return Err(Error::RankNotFound {
            eps: eps.to_f64().unwrap_or(f64::NAN),
            n_max,
            deviation: dev(n_max).to_f64().unwrap_or(f64::NAN),
        });
    }
    let mut rank = n_max;
    while rank > 1 && dev(rank - 1) <= tol {
        rank -= 1;
    }
    Ok(rank)
}
