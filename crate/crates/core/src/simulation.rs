//! Sampling the assembled Gaussian vector process and Monte Carlo checks
//! of its partial-sum covariance.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::construction::ConstructionResult;
use crate::decomposition::{BasisSet, BlockId};
use crate::error::{Error, Result};
use crate::fault::Fault;
use crate::matrix::{matrix_power, SymMatrix};
use crate::spectral::{autocov_truncated, AutocovarianceTable, CosineSeries, GridSpec};

/// Autocovariances below this fraction of `r[0]` are dropped.
pub const AUTOCOV_CUT: f64 = 1e-12;
/// Negative circulant eigenvalues above `-EMBED_TOL * r[0]` are clipped silently.
pub const EMBED_TOL: f64 = 1e-12;
/// Largest clipped mass (relative to `r[0]`) accepted after padding.
pub const EMBED_CLIP_LIMIT: f64 = 1e-6;
/// Embedding sizes are doubled at most this many times.
pub const EMBED_DOUBLINGS: usize = 4;

const STREAM_BITS: u32 = 24;

/// One independent scalar stream: building block plus copy index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct StreamId {
    pub block: usize,
    pub copy: usize,
}

/// Everything needed to sample the vector process.
#[derive(Clone, Debug)]
pub struct ProcessSpec {
    pub m: usize,
    pub blocks: Vec<BlockId>,
    pub weights: Vec<SymMatrix<f64>>,
    pub sqrt_q1: Vec<SymMatrix<f64>>,
    pub log_densities: Vec<CosineSeries<f64>>,
    pub autocov: Vec<AutocovarianceTable<f64>>,
}

impl ProcessSpec {
    pub fn new(basis: &BasisSet, log_densities: Vec<CosineSeries<f64>>, min_grid: usize) -> Result<Self> {
        let blocks = basis.block_ids();
        if blocks.len() != log_densities.len() {
            return Err(Error::DimensionMismatch { left: log_densities.len(), right: blocks.len() });
        }
        let sqrt_q1 = basis
            .q1
            .iter()
            .map(|q| {
                let s = matrix_power(q, 0.5)?;
                let err = s.mul_sym(&s)?.max_abs_diff(q)?;
                if err > 1e-10 {
                    return Err(Error::InternalConsistency(format!("square root residual {err:e}")));
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        let autocov = log_densities
            .par_iter()
            .map(|f| autocov_truncated(f, GridSpec::at_least((64 * f.degree()).max(min_grid)), AUTOCOV_CUT))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProcessSpec {
            m: basis.m,
            weights: blocks.iter().map(|&id| basis.matrix(id).clone()).collect(),
            blocks,
            sqrt_q1,
            log_densities,
            autocov,
        })
    }

    pub fn from_construction(res: &ConstructionResult, min_grid: usize) -> Result<Self> {
        Self::new(&res.basis, res.final_functions().to_vec(), min_grid)
    }

    /// Streams in sampling order: `m` copies for each lattice block, one
    /// for each corrector.
    pub fn streams(&self) -> Vec<StreamId> {
        let mut out = Vec::new();
        for (b, id) in self.blocks.iter().enumerate() {
            let copies = if matches!(id, BlockId::One(_)) { self.m } else { 1 };
            out.extend((0..copies).map(|copy| StreamId { block: b, copy }));
        }
        out
    }

    /// `Var(N^{-1/2} S_N)` from the autocovariance tables.
    pub fn partial_sum_cov(&self, n: usize) -> Result<SymMatrix<f64>> {
        let mut out = SymMatrix::zeros(self.m);
        for (table, q) in self.autocov.iter().zip(&self.weights) {
            out.add_scaled(table.partial_sum_variance(n)?, q)?;
        }
        Ok(out)
    }

    /// Autocovariance of `X` at lag `k`: `sum_b r_b(k) Q_b`.
    pub fn lag_cov(&self, k: isize) -> Result<SymMatrix<f64>> {
        let mut out = SymMatrix::zeros(self.m);
        for (table, q) in self.autocov.iter().zip(&self.weights) {
            out.add_scaled(table.lag(k)?, q)?;
        }
        Ok(out)
    }
}

/// RNG for one `(replicate, stream)` pair under a master seed.
pub fn stream_rng(master_seed: u64, replicate: usize, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((replicate as u64) << STREAM_BITS) | stream as u64);
    rng
}

/// Square-root circulant spectrum for sampling `len` consecutive values.
pub struct Embedding {
    len: usize,
    size: usize,
    scale: Vec<f64>,
    pub clipped: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Embedding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedding").field("len", &self.len).field("size", &self.size).field("clipped", &self.clipped).finish()
    }
}

impl Embedding {
    pub fn new(table: &AutocovarianceTable<f64>, len: usize) -> Result<Self> {
        assert!(len >= 1);
        if !table.is_exhausted() && table.kmax() + 1 < len {
            return Err(Error::TableTooShort { needed: len - 1, available: table.kmax() });
        }
        let r0 = table.lag(0)?;
        let mut size = (2 * len.max(table.kmax() + 1)).next_power_of_two();
        let mut planner = FftPlanner::new();
        for attempt in 0..=EMBED_DOUBLINGS {
            let fft = planner.plan_fft_forward(size);
            let mut buf = vec![Complex::new(0.0, 0.0); size];
            for j in 0..=size / 2 {
                let v = table.lag(j as isize).unwrap_or(0.0);
                buf[j] = Complex::new(v, 0.0);
                if j > 0 && j < size / 2 {
                    buf[size - j] = Complex::new(v, 0.0);
                }
            }
            fft.process(&mut buf);
            let min = buf.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
            if min >= -EMBED_TOL * r0 || attempt == EMBED_DOUBLINGS {
                let clipped: f64 = buf.iter().map(|z| (-z.re).max(0.0)).sum::<f64>() / size as f64;
                if clipped > EMBED_CLIP_LIMIT * r0 {
                    return Err(Error::Embedding { clipped, allowed: EMBED_CLIP_LIMIT * r0, size });
                }
                let scale = buf.iter().map(|z| (z.re.max(0.0) / size as f64).sqrt()).collect();
                return Ok(Embedding { len, size, scale, clipped, fft });
            }
            size *= 2;
        }
        unreachable!("loop returns on the last attempt")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = self
            .scale
            .iter()
            .map(|&s| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex::new(s * re, s * im)
            })
            .collect();
        self.fft.process(&mut buf);
        buf.iter().take(self.len).map(|z| z.re).collect()
    }
}

/// One realization of length `len` of the stationary Gaussian sequence with
/// autocovariances `table`.
pub fn sample_block(table: &AutocovarianceTable<f64>, len: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    Ok(Embedding::new(table, len)?.sample(rng))
}

/// `X_k = sum_l sqrt(Q1_l) [blocks(1,l,.)]_k + sum_u blocks(2,u)_k e_u
///       + sum_{u<v} blocks(3,uv)_k (e_u + e_v)`; `paths[s]` follows
/// `ProcessSpec::streams`. Returns `m` rows of length `N`.
pub fn assemble_path(spec: &ProcessSpec, paths: &[Option<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let streams = spec.streams();
    if paths.len() != streams.len() {
        return Err(Error::DimensionMismatch { left: paths.len(), right: streams.len() });
    }
    let get = |s: usize| {
        paths[s].as_ref().ok_or_else(|| {
            let id = streams[s];
            Error::MissingBlock(format!("{} copy {}", spec.blocks[id.block], id.copy))
        })
    };
    let len = match paths.iter().flatten().next() {
        Some(p) => p.len(),
        None => return Err(Error::MissingBlock("all streams".into())),
    };
    let m = spec.m;
    let mut x = vec![vec![0.0; len]; m];
    let mut s = 0;
    for id in &spec.blocks {
        match *id {
            BlockId::One(l) => {
                let cols: Vec<&Vec<f64>> = (0..m).map(|p| get(s + p)).collect::<Result<_>>()?;
                let root = &spec.sqrt_q1[l];
                for (i, row) in x.iter_mut().enumerate() {
                    for (p, col) in cols.iter().enumerate() {
                        let w = root.get(i, p);
                        if w != 0.0 {
                            row.iter_mut().zip(col.iter()).for_each(|(a, b)| *a += w * b);
                        }
                    }
                }
                s += m;
            }
            BlockId::Two(u) => {
                let p = get(s)?;
                x[u].iter_mut().zip(p).for_each(|(a, b)| *a += b);
                s += 1;
            }
            BlockId::Three(u, v) => {
                let p = get(s)?;
                for row in [u, v] {
                    x[row].iter_mut().zip(p).for_each(|(a, b)| *a += b);
                }
                s += 1;
            }
        }
    }
    Ok(x)
}

/// Adds i.i.d. `+-sqrt(eps)` to every entry of `path`.
pub fn add_bernoulli_perturbation(path: &mut [Vec<f64>], eps: f64, rng: &mut impl Rng) {
    assert!(eps > 0.0);
    let amp = eps.sqrt();
    for row in path.iter_mut() {
        for v in row.iter_mut() {
            *v += if rng.random_bool(0.5) { amp } else { -amp };
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationOptions {
    pub fejer_order: usize,
    pub replicates: usize,
    pub master_seed: u64,
    /// Adds `+-sqrt(eps)` noise to every coordinate when set.
    pub bernoulli_eps: Option<f64>,
}

/// Monte Carlo covariance of `N^{-1/2} S_N`.
#[derive(Clone, Debug, Serialize)]
pub struct PartialSumCov {
    pub fejer_order: usize,
    pub replicates: usize,
    pub mean: Vec<f64>,
    pub cov: SymMatrix<f64>,
    pub stderr: SymMatrix<f64>,
    pub max_clipped: f64,
    pub embedding_size: usize,
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
}

impl PartialSumCov {
    /// Largest `|cov - expected| / stderr` over entries.
    pub fn max_z(&self, expected: &SymMatrix<f64>) -> f64 {
        let m = self.cov.dim();
        let mut z: f64 = 0.0;
        for i in 0..m {
            for j in i..m {
                z = z.max((self.cov.get(i, j) - expected.get(i, j)).abs() / self.stderr.get(i, j));
            }
        }
        z
    }
}

/// Normalized partial sums `N^{-1/2} S_N` for each replicate.
pub fn simulate_partial_sums(spec: &ProcessSpec, opts: &SimulationOptions, fault: Option<Fault>) -> Result<(Vec<Vec<f64>>, f64, usize)> {
    if opts.replicates < 2 || opts.fejer_order == 0 {
        return Err(Error::Validation { field: "replicates".into(), message: "need at least 2 replicates and N >= 1".into() });
    }
    let n = opts.fejer_order;
    let streams = spec.streams();
    let embeddings = spec.autocov.iter().map(|t| Embedding::new(t, n)).collect::<Result<Vec<_>>>()?;
    let max_clipped = embeddings.iter().map(|e| e.clipped).fold(0.0, f64::max);
    let embedding_size = embeddings.iter().map(Embedding::size).max().unwrap_or(0);
    let dropped = (fault == Some(Fault::DropBlock)).then(|| streams.len() - 1);
    let norm = 1.0 / (n as f64).sqrt();
    let sums = (0..opts.replicates)
        .into_par_iter()
        .map(|rep| {
            let paths: Vec<Option<Vec<f64>>> = streams
                .iter()
                .enumerate()
                .map(|(s, id)| {
                    (Some(s) != dropped).then(|| {
                        let mut rng = stream_rng(opts.master_seed, rep, s);
                        let path = embeddings[id.block].sample(&mut rng);
                        vec![path.iter().sum::<f64>()]
                    })
                })
                .collect();
            let mut total = assemble_path(spec, &paths)?;
            if let Some(eps) = opts.bernoulli_eps {
                // the sum of N independent +-sqrt(eps) draws per coordinate
                let mut rng = stream_rng(opts.master_seed, rep, streams.len());
                let mut noise = vec![vec![0.0; n]; spec.m];
                add_bernoulli_perturbation(&mut noise, eps, &mut rng);
                for (row, add) in total.iter_mut().zip(&noise) {
                    row[0] += add.iter().sum::<f64>();
                }
            }
            Ok(total.iter().map(|row| row[0] * norm).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sums, max_clipped, embedding_size))
}

/// Sample covariance with per-entry standard errors.
pub fn sample_covariance(samples: &[Vec<f64>]) -> (Vec<f64>, SymMatrix<f64>, SymMatrix<f64>) {
    let k = samples.len() as f64;
    let m = samples[0].len();
    let mean: Vec<f64> = (0..m).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / k).collect();
    let mut cov = SymMatrix::zeros(m);
    let mut se = SymMatrix::zeros(m);
    for i in 0..m {
        for j in i..m {
            let prods: Vec<f64> = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).collect();
            let c = prods.iter().sum::<f64>() / (k - 1.0);
            let var = prods.iter().map(|p| (p - c) * (p - c)).sum::<f64>() / (k - 1.0);
            cov.set(i, j, c);
            se.set(i, j, (var / k).sqrt());
        }
    }
    (mean, cov, se)
}

pub fn empirical_partial_sum_cov(spec: &ProcessSpec, opts: &SimulationOptions, fault: Option<Fault>) -> Result<PartialSumCov> {
    let (samples, max_clipped, embedding_size) = simulate_partial_sums(spec, opts, fault)?;
    let (mean, cov, stderr) = sample_covariance(&samples);
    Ok(PartialSumCov {
        fejer_order: opts.fejer_order,
        replicates: opts.replicates,
        mean,
        cov,
        stderr,
        max_clipped,
        embedding_size,
        samples,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentCheck {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub stderr: f64,
}

impl MomentCheck {
    pub fn z(&self) -> f64 {
        (self.value - self.expected).abs() / self.stderr
    }

    pub fn passed(&self, z_max: f64) -> bool {
        self.z() <= z_max
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalityReport {
    pub checks: Vec<MomentCheck>,
    pub z_max: f64,
    pub passed: bool,
}

/// Whitens each sample with `sigma^{-1/2}` and compares moments with the
/// standard normal.
pub fn normality_diagnostic(samples: &[Vec<f64>], sigma: &SymMatrix<f64>, fault: Option<Fault>) -> Result<NormalityReport> {
    let power = if fault == Some(Fault::WrongNormalization) { -1.0 } else { -0.5 };
    let w = matrix_power(sigma, power)?;
    let z: Vec<Vec<f64>> = samples.iter().map(|s| w.mul_vec(s)).collect();
    let k = z.len() as f64;
    let m = sigma.dim();
    let se1 = 1.0 / k.sqrt();
    let mut checks = Vec::new();
    let mut col = |name: String, value: f64, expected: f64, stderr: f64| {
        checks.push(MomentCheck { name, value, expected, stderr })
    };
    for i in 0..m {
        let x: Vec<f64> = z.iter().map(|v| v[i]).collect();
        let mean = x.iter().sum::<f64>() / k;
        let c = |p: i32| x.iter().map(|v| (v - mean).powi(p)).sum::<f64>() / k;
        let var = c(2);
        col(format!("mean[{i}]"), mean, 0.0, se1);
        col(format!("variance[{i}]"), var, 1.0, (2.0 / k).sqrt());
        col(format!("skewness[{i}]"), c(3) / var.powf(1.5), 0.0, (6.0 / k).sqrt());
        col(format!("excess_kurtosis[{i}]"), c(4) / (var * var) - 3.0, 0.0, (24.0 / k).sqrt());
    }
    for i in 0..m {
        for j in i + 1..m {
            let (a, b): (Vec<f64>, Vec<f64>) = z.iter().map(|v| (v[i], v[j])).unzip();
            col(format!("correlation[{i},{j}]"), correlation(&a, &b), 0.0, se1);
        }
    }
    let z_max = 4.0;
    let passed = checks.iter().all(|c| c.passed(z_max));
    Ok(NormalityReport { checks, z_max, passed })
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / k, b.iter().sum::<f64>() / k);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{build_basis, BasisMode, LatticeParams, ENUMERATION_CAP};
    use crate::matrix::BandParams;
    use crate::spectral::autocov_of_exp;
    use approx::assert_abs_diff_eq;

    fn i2_spec(f: CosineSeries<f64>) -> ProcessSpec {
        let lat = LatticeParams::new(BandParams::new(2, 1.0, 2.0).unwrap());
        let basis = build_basis(&[SymMatrix::identity(2)], &lat, BasisMode::Subset, ENUMERATION_CAP).unwrap();
        let n = basis.block_ids().len();
        ProcessSpec::new(&basis, vec![f; n], 1024).unwrap()
    }

    #[test]
    fn white_noise_variance() {
        let table = AutocovarianceTable::white(1.0);
        let mut rng = stream_rng(7, 0, 0);
        let x = sample_block(&table, 100_000, &mut rng).unwrap();
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn constant_log_density_variance() {
        let t = autocov_of_exp(&CosineSeries::constant(0.7), GridSpec::new(64).unwrap(), 4).unwrap();
        let t = AutocovarianceTable::new(vec![t.lag(0).unwrap()], true).unwrap();
        let mut rng = stream_rng(3, 0, 0);
        let x = sample_block(&t, 50_000, &mut rng).unwrap();
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((var - 0.7f64.exp()).abs() < 0.05);
    }

    #[test]
    fn lag_one_autocovariance() {
        let f = CosineSeries::new(0.0, vec![0.6]);
        let t = autocov_truncated(&f, GridSpec::new(256).unwrap(), AUTOCOV_CUT).unwrap();
        let emb = Embedding::new(&t, 200_000).unwrap();
        let x = emb.sample(&mut stream_rng(11, 0, 0));
        let n = x.len() as f64;
        let r1 = x.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (n - 1.0);
        let r0 = t.lag(0).unwrap();
        // Bartlett-type standard error for a short-memory sequence
        let se = 2.0 * r0 / n.sqrt();
        assert!((r1 - t.lag(1).unwrap()).abs() < 3.0 * se);
    }

    #[test]
    fn stream_lineage_is_deterministic_and_distinct() {
        let a: f64 = stream_rng(5, 3, 2).sample(StandardNormal);
        let b: f64 = stream_rng(5, 3, 2).sample(StandardNormal);
        let c: f64 = stream_rng(5, 3, 1).sample(StandardNormal);
        let d: f64 = stream_rng(5, 4, 2).sample(StandardNormal);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn assembly_structure() {
        let spec = i2_spec(CosineSeries::zero());
        let streams = spec.streams();
        assert_eq!(streams.len(), 2 + 2 + 1);
        let zero = |len| vec![Some(vec![0.0; len]); streams.len()];
        let x = assemble_path(&spec, &zero(5)).unwrap();
        assert!(x.iter().flatten().all(|&v| v == 0.0));

        let two_first = streams.iter().position(|s| spec.blocks[s.block] == BlockId::Two(0)).unwrap();
        let mut p = zero(3);
        p[two_first] = Some(vec![1.0, 2.0, 3.0]);
        let x = assemble_path(&spec, &p).unwrap();
        assert_eq!(x[0], vec![1.0, 2.0, 3.0]);
        assert!(x[1].iter().all(|&v| v == 0.0));

        let three = streams.iter().position(|s| matches!(spec.blocks[s.block], BlockId::Three(..))).unwrap();
        let mut p = zero(3);
        p[three] = Some(vec![0.5, -1.0, 2.0]);
        let x = assemble_path(&spec, &p).unwrap();
        assert_eq!(x[0], x[1]);

        let mut p = zero(3);
        p[0] = None;
        assert!(matches!(assemble_path(&spec, &p), Err(Error::MissingBlock(_))));
    }

    #[test]
    fn white_noise_partial_sums() {
        let spec = i2_spec(CosineSeries::zero());
        let opts = SimulationOptions { fejer_order: 16, replicates: 4000, master_seed: 1, bernoulli_eps: None };
        let out = empirical_partial_sum_cov(&spec, &opts, None).unwrap();
        let expected = spec.partial_sum_cov(16).unwrap();
        // unit white noise in every block: the covariance is the plain sum of block matrices
        let mut sum = SymMatrix::zeros(2);
        spec.weights.iter().for_each(|q| sum.add_scaled(1.0, q).unwrap());
        assert_abs_diff_eq!(expected.max_abs_diff(&sum).unwrap(), 0.0, epsilon = 1e-12);
        assert!(out.max_z(&expected) < 4.5);
    }

    #[test]
    fn standard_errors_scale_with_replicates() {
        let spec = i2_spec(CosineSeries::zero());
        let mk = |k| SimulationOptions { fejer_order: 4, replicates: k, master_seed: 9, bernoulli_eps: None };
        let a = empirical_partial_sum_cov(&spec, &mk(2000), None).unwrap();
        let b = empirical_partial_sum_cov(&spec, &mk(4000), None).unwrap();
        let ratio = b.stderr.get(0, 0) / a.stderr.get(0, 0);
        assert!((ratio - 0.5f64.sqrt()).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn bernoulli_shift_is_eps_identity() {
        let spec = i2_spec(CosineSeries::zero());
        let opts = SimulationOptions { fejer_order: 8, replicates: 4000, master_seed: 2, bernoulli_eps: Some(0.5) };
        let out = empirical_partial_sum_cov(&spec, &opts, None).unwrap();
        let mut expected = spec.partial_sum_cov(8).unwrap();
        expected.add_scaled(0.5, &SymMatrix::identity(2)).unwrap();
        assert!(out.max_z(&expected) < 4.5);
    }

    #[test]
    fn bernoulli_noise_alone() {
        let mut path = vec![vec![0.0; 50_000]; 2];
        add_bernoulli_perturbation(&mut path, 0.3, &mut stream_rng(4, 0, 0));
        let (_, cov, se) = sample_covariance(&(0..50_000).map(|k| vec![path[0][k], path[1][k]]).collect::<Vec<_>>());
        assert!((cov.get(0, 0) - 0.3).abs() < 4.0 * se.get(0, 0));
        assert!(cov.get(0, 1).abs() < 4.0 * se.get(0, 1));
    }

    #[test]
    fn kurtosis_detects_bernoulli_mixture() {
        // N = 1, unit Gaussian plus +-1 noise: excess kurtosis -2/(1+1)^2 = -0.5
        let mut rng = stream_rng(8, 0, 0);
        let mut path = vec![(0..20_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()];
        add_bernoulli_perturbation(&mut path, 1.0, &mut stream_rng(8, 0, 1));
        let samples: Vec<Vec<f64>> = path[0].iter().map(|&v| vec![v]).collect();
        let report = normality_diagnostic(&samples, &SymMatrix::diagonal(&[2.0]), None).unwrap();
        assert!(!report.passed);
        let kurt = report.checks.iter().find(|c| c.name.starts_with("excess")).unwrap();
        assert!(!kurt.passed(4.0));
    }

    #[test]
    fn normality_calibration_and_negative_control() {
        let sigma = SymMatrix::from_rows(&[vec![2.0, 0.6], vec![0.6, 1.5]]).unwrap();
        let root = matrix_power(&sigma, 0.5).unwrap();
        let mut rng = stream_rng(21, 0, 0);
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                root.mul_vec(&z)
            })
            .collect();
        assert!(normality_diagnostic(&samples, &sigma, None).unwrap().passed);
        let bad = normality_diagnostic(&samples, &sigma, Some(Fault::WrongNormalization)).unwrap();
        assert!(!bad.passed);
        assert!(bad.checks.iter().any(|c| c.name.starts_with("variance") && !c.passed(4.0)));
    }

    #[test]
    fn drop_block_fault_errors() {
        let spec = i2_spec(CosineSeries::zero());
        let opts = SimulationOptions { fejer_order: 4, replicates: 10, master_seed: 1, bernoulli_eps: None };
        assert!(matches!(
            empirical_partial_sum_cov(&spec, &opts, Some(Fault::DropBlock)),
            Err(Error::MissingBlock(_))
        ));
    }
}
