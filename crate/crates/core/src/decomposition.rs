//! Lattice rounding and the positive decomposition
//! `G = sum c1 Q1 + sum c2 Q2 + sum c3 Q3` with coefficients in fixed
//! positive ranges.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{in_band, BandParams, SymMatrix};

/// Relative distance to a lattice point below which `g / gamma` is snapped.
pub const LATTICE_SNAP: f64 = 1e-9;
/// Default cap on the number of enumerated lattice candidates.
pub const ENUMERATION_CAP: usize = 1_000_000;
/// Tolerance for reconstruction of `G` from its coefficient array.
pub const RECONSTRUCTION_TOL: f64 = 1e-10;

const BOUND_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub band: BandParams,
    pub gamma: f64,
}

impl LatticeParams {
    pub fn new(band: BandParams) -> Self {
        let m = band.m as f64;
        LatticeParams { band, gamma: band.a / (20.0 * m * m) }
    }

    /// Band `[a/2, 2b]` that rounded matrices live in.
    pub fn outer_band(&self) -> BandParams {
        self.band.widened(self.band.a / 2.0, 2.0 * self.band.b)
    }

    /// `floor(x / gamma)`, snapping values within `LATTICE_SNAP` of a lattice
    /// point onto it.
    pub fn floor_units(&self, x: f64) -> i64 {
        let u = x / self.gamma;
        let r = u.round();
        if (u - r).abs() < LATTICE_SNAP {
            r as i64
        } else {
            u.floor() as i64
        }
    }
}

/// Index of one building block of the decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockId {
    /// Lattice matrix `Q1[l]`.
    One(usize),
    /// Diagonal corrector `Q2[u]`.
    Two(usize),
    /// Pair corrector `Q3[u, v]`, `u < v`.
    Three(usize, usize),
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::One(l) => write!(f, "q1[{l}]"),
            BlockId::Two(u) => write!(f, "q2[{u}]"),
            BlockId::Three(u, v) => write!(f, "q3[{u},{v}]"),
        }
    }
}

impl Serialize for BlockId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    /// One lattice matrix per distinct rounded target.
    Subset,
    /// Every lattice matrix in the outer band.
    Enumerate,
}

#[derive(Clone, Debug, Serialize)]
pub struct BasisSet {
    pub m: usize,
    pub q1: Vec<SymMatrix<f64>>,
    /// Lattice coordinates (entries in units of gamma, upper triangle).
    pub q1_keys: Vec<Vec<i64>>,
    pub q2: Vec<SymMatrix<f64>>,
    pub q3: Vec<SymMatrix<f64>>,
    pub pairs: Vec<(usize, usize)>,
    #[serde(skip)]
    index: HashMap<Vec<i64>, usize>,
}

impl BasisSet {
    fn new(m: usize, q1: Vec<SymMatrix<f64>>, q1_keys: Vec<Vec<i64>>) -> Self {
        let q2 = (0..m)
            .map(|u| SymMatrix::from_fn(m, |i, j| if i == u && j == u { 1.0 } else { 0.0 }))
            .collect();
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|u| (u + 1..m).map(move |v| (u, v))).collect();
        let q3 = pairs
            .iter()
            .map(|&(u, v)| SymMatrix::from_fn(m, |i, j| if (i == u || i == v) && (j == u || j == v) { 1.0 } else { 0.0 }))
            .collect();
        let index = q1_keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        BasisSet { m, q1, q1_keys, q2, q3, pairs, index }
    }

    /// Number of lattice matrices `L`.
    pub fn len_q1(&self) -> usize {
        self.q1.len()
    }

    pub fn position(&self, key: &[i64]) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn pair_index(&self, u: usize, v: usize) -> Option<usize> {
        let (u, v) = if u < v { (u, v) } else { (v, u) };
        self.pairs.iter().position(|&p| p == (u, v))
    }

    /// All block ids in canonical order: `Q1`, then `Q2`, then `Q3`.
    pub fn block_ids(&self) -> Vec<BlockId> {
        let mut ids: Vec<BlockId> = (0..self.q1.len()).map(BlockId::One).collect();
        ids.extend((0..self.m).map(BlockId::Two));
        ids.extend(self.pairs.iter().map(|&(u, v)| BlockId::Three(u, v)));
        ids
    }

    pub fn matrix(&self, id: BlockId) -> &SymMatrix<f64> {
        match id {
            BlockId::One(l) => &self.q1[l],
            BlockId::Two(u) => &self.q2[u],
            BlockId::Three(u, v) => &self.q3[self.pair_index(u, v).expect("pair in basis")],
        }
    }
}

/// Coefficients of one decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffArray {
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    /// Indexed like `BasisSet::pairs`.
    pub c3: Vec<f64>,
}

impl CoeffArray {
    pub fn get(&self, basis: &BasisSet, id: BlockId) -> f64 {
        match id {
            BlockId::One(l) => self.c1[l],
            BlockId::Two(u) => self.c2[u],
            BlockId::Three(u, v) => self.c3[basis.pair_index(u, v).expect("pair in basis")],
        }
    }

    pub fn set(&mut self, basis: &BasisSet, id: BlockId, v: f64) {
        match id {
            BlockId::One(l) => self.c1[l] = v,
            BlockId::Two(u) => self.c2[u] = v,
            BlockId::Three(a, b) => self.c3[basis.pair_index(a, b).expect("pair in basis")] = v,
        }
    }

    /// Values in `BasisSet::block_ids` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.c1.iter().chain(&self.c2).chain(&self.c3).copied().collect()
    }

    pub fn from_flat(basis: &BasisSet, flat: &[f64]) -> Self {
        let (l, m) = (basis.len_q1(), basis.m);
        CoeffArray {
            c1: flat[..l].to_vec(),
            c2: flat[l..l + m].to_vec(),
            c3: flat[l + m..].to_vec(),
        }
    }
}

/// `sum c1 Q1 + sum c2 Q2 + sum c3 Q3`.
pub fn reconstruct(basis: &BasisSet, c: &CoeffArray) -> Result<SymMatrix<f64>> {
    let mut out = SymMatrix::zeros(basis.m);
    for id in basis.block_ids() {
        out.add_scaled(c.get(basis, id), basis.matrix(id))?;
    }
    Ok(out)
}

fn lattice_key(h: &SymMatrix<f64>, lat: &LatticeParams) -> Vec<i64> {
    let m = h.dim();
    let mut key = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in i..m {
            key.push((h.get(i, j) / lat.gamma).round() as i64);
        }
    }
    key
}

fn from_key(m: usize, key: &[i64], gamma: f64) -> SymMatrix<f64> {
    let mut h = SymMatrix::zeros(m);
    let mut it = key.iter();
    for i in 0..m {
        for j in i..m {
            h.set(i, j, *it.next().expect("key length") as f64 * gamma);
        }
    }
    h
}

/// Rounds `G` down to the lattice and shifts it by `-8m` units on the
/// diagonal and `-3` units off it.
pub fn round_to_h(g: &SymMatrix<f64>, lat: &LatticeParams) -> Result<SymMatrix<f64>> {
    let m = lat.band.m;
    if g.dim() != m {
        return Err(Error::DimensionMismatch { left: g.dim(), right: m });
    }
    if !in_band(g, &lat.band)? {
        return Err(Error::Precondition("matrix is outside the eigenvalue band".into()));
    }
    let shift = 8 * m as i64;
    let mut key = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in i..m {
            let kappa = lat.floor_units(g.get(i, j));
            key.push(if i == j { kappa - shift } else { kappa - 3 });
        }
    }
    let h = from_key(m, &key, lat.gamma);
    if !in_band(&h, &lat.outer_band())? {
        return Err(Error::InternalConsistency("rounded matrix left the outer band".into()));
    }
    Ok(h)
}

/// Number of lattice candidates enumerate mode would scan.
pub fn enumeration_count(lat: &LatticeParams) -> f64 {
    let per_entry = (4.0 * lat.band.b / lat.gamma).floor() + 1.0;
    let m = lat.band.m as f64;
    per_entry.powf(m * (m + 1.0) / 2.0)
}

pub fn build_basis(
    targets: &[SymMatrix<f64>],
    lat: &LatticeParams,
    mode: BasisMode,
    enumeration_cap: usize,
) -> Result<BasisSet> {
    if targets.is_empty() {
        return Err(Error::Config("at least one target matrix is required".into()));
    }
    let m = lat.band.m;
    let rounded = targets.iter().map(|g| round_to_h(g, lat)).collect::<Result<Vec<_>>>()?;
    let (mut q1, mut keys) = (Vec::new(), Vec::new());
    match mode {
        BasisMode::Subset => {
            for h in rounded {
                let key = lattice_key(&h, lat);
                if !keys.contains(&key) {
                    keys.push(key);
                    q1.push(h);
                }
            }
        }
        BasisMode::Enumerate => {
            let count = enumeration_count(lat);
            if count > enumeration_cap as f64 {
                return Err(Error::EnumerationInfeasible { count, cap: enumeration_cap });
            }
            let reach = (2.0 * lat.band.b / lat.gamma).floor() as i64;
            let slots = m * (m + 1) / 2;
            let outer = lat.outer_band();
            let mut key = vec![-reach; slots];
            loop {
                let h = from_key(m, &key, lat.gamma);
                if in_band(&h, &outer)? {
                    keys.push(key.clone());
                    q1.push(h);
                }
                // odometer increment
                let mut pos = 0;
                while pos < slots && key[pos] == reach {
                    key[pos] = -reach;
                    pos += 1;
                }
                if pos == slots {
                    break;
                }
                key[pos] += 1;
            }
            if q1.is_empty() {
                return Err(Error::InternalConsistency("enumeration produced no lattice matrices".into()));
            }
        }
    }
    Ok(BasisSet::new(m, q1, keys))
}

/// Coefficient array for `G` against `basis`.
pub fn decompose(g: &SymMatrix<f64>, basis: &BasisSet, lat: &LatticeParams) -> Result<CoeffArray> {
    let h = round_to_h(g, lat)?;
    let own = basis.position(&lattice_key(&h, lat)).ok_or(Error::BasisIncomplete)?;
    let big_l = basis.len_q1();
    let floor = lat.gamma / (2.0 * lat.band.b * big_l as f64);
    let c1: Vec<f64> = (0..big_l).map(|l| if l == own { 1.0 } else { floor }).collect();

    let mut s = SymMatrix::zeros(basis.m);
    for (l, q) in basis.q1.iter().enumerate() {
        if l != own {
            s.add_scaled(c1[l], q)?;
        }
    }
    let c3: Vec<f64> = basis
        .pairs
        .iter()
        .map(|&(u, v)| (g.get(u, v) - h.get(u, v)) - s.get(u, v))
        .collect();
    let c2: Vec<f64> = (0..basis.m)
        .map(|u| {
            let touching: f64 = basis
                .pairs
                .iter()
                .zip(&c3)
                .filter(|((a, b), _)| *a == u || *b == u)
                .map(|(_, c)| *c)
                .sum();
            (g.get(u, u) - h.get(u, u)) - s.get(u, u) - touching
        })
        .collect();

    let out = CoeffArray { c1, c2, c3 };
    let report = verify_decomposition(g, basis, &out, lat)?;
    if let Some(bad) = report.bounds.iter().find(|b| !b.passed()) {
        return Err(Error::InternalConsistency(format!("coefficient {} = {} violates its bounds", bad.name, bad.value)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    /// Distance to the nearer end; negative when violated.
    pub slack: f64,
}

impl BoundCheck {
    fn new(name: String, value: f64, lo: f64, hi: f64) -> Self {
        BoundCheck { name, value, lo, hi, slack: (value - lo).min(hi - value) }
    }

    pub fn passed(&self) -> bool {
        self.slack >= -BOUND_TOL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub bounds: Vec<BoundCheck>,
    pub reconstruction_error: f64,
    pub reconstruction_tol: f64,
}

impl DecompositionReport {
    pub fn passed(&self) -> bool {
        self.bounds.iter().all(BoundCheck::passed) && self.reconstruction_error <= self.reconstruction_tol
    }

    pub fn min_slack(&self) -> f64 {
        self.bounds.iter().map(|b| b.slack).fold(f64::INFINITY, f64::min)
    }
}

/// Recomputes the weighted sum and checks every coefficient range.
pub fn verify_decomposition(
    g: &SymMatrix<f64>,
    basis: &BasisSet,
    c: &CoeffArray,
    lat: &LatticeParams,
) -> Result<DecompositionReport> {
    if c.c1.len() != basis.len_q1() || c.c2.len() != basis.m || c.c3.len() != basis.pairs.len() {
        return Err(Error::DimensionMismatch { left: c.flatten().len(), right: basis.block_ids().len() });
    }
    let gamma = lat.gamma;
    let m = basis.m as f64;
    let big_l = basis.len_q1() as f64;
    let mut bounds = Vec::new();
    for id in basis.block_ids() {
        let (lo, hi) = match id {
            BlockId::One(_) => (gamma / (2.0 * lat.band.b * big_l), 1.0),
            BlockId::Two(_) => (2.0 * m * gamma, 10.0 * m * gamma),
            BlockId::Three(..) => (2.0 * gamma, 5.0 * gamma),
        };
        bounds.push(BoundCheck::new(id.to_string(), c.get(basis, id), lo, hi));
    }
    let reconstruction_error = reconstruct(basis, c)?.max_abs_diff(g)?;
    Ok(DecompositionReport { bounds, reconstruction_error, reconstruction_tol: RECONSTRUCTION_TOL })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lat22() -> LatticeParams {
        LatticeParams::new(BandParams::new(2, 1.0, 2.0).unwrap())
    }

    fn rotated(theta: f64, l1: f64, l2: f64) -> SymMatrix<f64> {
        let (c, s) = (theta.cos(), theta.sin());
        SymMatrix::from_rows(&[
            vec![c * c * l1 + s * s * l2, c * s * (l1 - l2)],
            vec![c * s * (l1 - l2), s * s * l1 + c * c * l2],
        ])
        .unwrap()
    }

    #[test]
    fn identity_worked_example() {
        let lat = lat22();
        assert_abs_diff_eq!(lat.gamma, 1.0 / 80.0, epsilon = 1e-18);
        let g = SymMatrix::identity(2);
        let h = round_to_h(&g, &lat).unwrap();
        assert_abs_diff_eq!(h.get(0, 0), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(h.get(1, 1), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(h.get(0, 1), -0.0375, epsilon = 1e-12);
        let basis = build_basis(std::slice::from_ref(&g), &lat, BasisMode::Subset, ENUMERATION_CAP).unwrap();
        assert_eq!(basis.len_q1(), 1);
        let c = decompose(&g, &basis, &lat).unwrap();
        assert_eq!(c.c1, vec![1.0]);
        assert_abs_diff_eq!(c.c3[0], 3.0 * lat.gamma, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c2[0], 13.0 * lat.gamma, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c2[1], 13.0 * lat.gamma, epsilon = 1e-12);
        let report = verify_decomposition(&g, &basis, &c, &lat).unwrap();
        assert!(report.passed());
        let q3 = report.bounds.iter().find(|b| b.name == "q3[0,1]").unwrap();
        assert_abs_diff_eq!(q3.slack, lat.gamma, epsilon = 1e-12);
    }

    #[test]
    fn lattice_points_floor_to_themselves() {
        let lat = lat22();
        assert_eq!(lat.floor_units(3.0 * lat.gamma), 3);
        assert_eq!(lat.floor_units(3.0 * lat.gamma - 1e-3 * lat.gamma), 2);
        assert_eq!(lat.floor_units(-lat.gamma), -1);
    }

    #[test]
    fn equal_rounding_dedups() {
        let lat = lat22();
        let g1 = SymMatrix::identity(2);
        let g2 = SymMatrix::diagonal(&[1.001, 1.002]);
        let basis = build_basis(&[g1, g2], &lat, BasisMode::Subset, ENUMERATION_CAP).unwrap();
        assert_eq!(basis.len_q1(), 1);
    }

    #[test]
    fn enumeration_cap() {
        let lat = lat22();
        let count = enumeration_count(&lat);
        assert_eq!(count, 641f64.powi(3));
        let err = build_basis(&[SymMatrix::identity(2)], &lat, BasisMode::Enumerate, ENUMERATION_CAP);
        assert!(matches!(err, Err(Error::EnumerationInfeasible { .. })));
    }

    #[test]
    fn enumeration_micro_instance() {
        let lat = LatticeParams::new(BandParams::new(1, 1.0, 2.0).unwrap());
        let g = SymMatrix::diagonal(&[1.7]);
        let basis = build_basis(std::slice::from_ref(&g), &lat, BasisMode::Enumerate, ENUMERATION_CAP).unwrap();
        // lattice points in [0.5, 4] with spacing 1/20
        assert_eq!(basis.len_q1(), 71);
        let c = decompose(&g, &basis, &lat).unwrap();
        assert!(verify_decomposition(&g, &basis, &c, &lat).unwrap().passed());
    }

    #[test]
    fn missing_h_is_reported() {
        let lat = lat22();
        let basis = build_basis(&[SymMatrix::identity(2)], &lat, BasisMode::Subset, ENUMERATION_CAP).unwrap();
        let other = SymMatrix::diagonal(&[1.9, 1.1]);
        assert!(matches!(decompose(&other, &basis, &lat), Err(Error::BasisIncomplete)));
    }

    #[test]
    fn negative_control_flags_one_bound() {
        let lat = lat22();
        let g = SymMatrix::identity(2);
        let basis = build_basis(std::slice::from_ref(&g), &lat, BasisMode::Subset, ENUMERATION_CAP).unwrap();
        let mut c = decompose(&g, &basis, &lat).unwrap();
        c.c2[0] += 20.0 * 2.0 * lat.gamma;
        let report = verify_decomposition(&g, &basis, &c, &lat).unwrap();
        assert_eq!(report.bounds.iter().filter(|b| !b.passed()).count(), 1);
        assert!(!report.passed());
    }

    #[test]
    fn outside_band_rejected() {
        let lat = lat22();
        assert!(round_to_h(&SymMatrix::diagonal(&[0.5, 1.0]), &lat).is_err());
    }

    proptest! {
        #[test]
        fn rounded_entries_on_lattice(theta in 0.0..std::f64::consts::PI, l1 in 1.0..2.0f64, l2 in 1.0..2.0f64) {
            let lat = lat22();
            let g = rotated(theta, l1, l2);
            let h = round_to_h(&g, &lat).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let u = h.get(i, j) / lat.gamma;
                    prop_assert!((u - u.round()).abs() < 1e-12);
                    let reach = if i == j { 17.0 } else { 4.0 };
                    prop_assert!((g.get(i, j) - h.get(i, j)).abs() <= reach * lat.gamma + 1e-12);
                }
            }
        }

        #[test]
        fn multi_target_decomposition(t in proptest::collection::vec((0.0..3.2f64, 1.0..2.0f64, 1.0..2.0f64), 1..5)) {
            let lat = lat22();
            let targets: Vec<_> = t.iter().map(|&(a, b, c)| rotated(a, b, c)).collect();
            let basis = build_basis(&targets, &lat, BasisMode::Subset, ENUMERATION_CAP).unwrap();
            for g in &targets {
                let c = decompose(g, &basis, &lat).unwrap();
                let report = verify_decomposition(g, &basis, &c, &lat).unwrap();
                prop_assert!(report.passed());
                prop_assert!(report.reconstruction_error < 1e-12);
            }
        }
    }
}
