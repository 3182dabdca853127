//! Truncated multi-mode bosonic Fock spaces and ladder operators on them.
//!
//! Occupation vectors are enumerated lexicographically with the first listed
//! mode varying slowest. Every mode carries its own occupation cap; the
//! raising operator annihilates a state already at its cap.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Default upper bound on the dimension of any truncated space.
pub const DEFAULT_DIMENSION_LIMIT: usize = 20_000;

/// A single-particle mode labelled by its integer wave vector `n`, with
/// physical momentum `k = 2πn/L`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeId {
    pub index: usize,
    pub wave: Vec<i32>,
}

impl ModeId {
    pub fn new(index: usize, wave: Vec<i32>) -> Self {
        Self { index, wave }
    }

    pub fn is_zero(&self) -> bool {
        self.wave.iter().all(|&c| c == 0)
    }

    /// Physical wave vector for a box of side `box_length`.
    pub fn momentum(&self, box_length: f64) -> Vec<f64> {
        let unit = 2.0 * std::f64::consts::PI / box_length;
        self.wave.iter().map(|&c| unit * c as f64).collect()
    }
}

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}{:?}", self.index, self.wave)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ladder {
    Raise,
    Lower,
}

/// Truncated Fock space over an ordered list of modes with per-mode caps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FockBasis {
    modes: Vec<ModeId>,
    caps: Vec<u32>,
    strides: Vec<usize>,
    dim: usize,
}

/// Builds the truncated basis; the product of `(cap+1)` must not exceed `limit`.
pub fn build_basis(modes: &[ModeId], caps: &[u32], limit: usize) -> Result<FockBasis> {
    if modes.len() != caps.len() {
        return Err(Error::Structural(format!(
            "{} modes but {} caps",
            modes.len(),
            caps.len()
        )));
    }
    if let Some(pos) = caps.iter().position(|&c| c < 1) {
        return Err(Error::Domain(format!(
            "cap of mode {} must be at least 1",
            modes[pos]
        )));
    }
    for (i, a) in modes.iter().enumerate() {
        for b in &modes[i + 1..] {
            if a.wave == b.wave {
                return Err(Error::Model(format!("modes {a} and {b} share a wave vector")));
            }
        }
    }
    let mut dim: usize = 1;
    for &c in caps {
        dim = dim.checked_mul(c as usize + 1).unwrap_or(usize::MAX);
    }
    if dim > limit {
        let factors: Vec<String> = caps.iter().map(|c| (c + 1).to_string()).collect();
        return Err(Error::Sizing {
            what: format!("basis product {}", factors.join("x")),
            product: dim,
            limit,
        });
    }
    let mut strides = vec![1usize; modes.len()];
    for j in (0..modes.len().saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * (caps[j + 1] as usize + 1);
    }
    Ok(FockBasis {
        modes: modes.to_vec(),
        caps: caps.to_vec(),
        strides,
        dim,
    })
}

impl FockBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[ModeId] {
        &self.modes
    }

    pub fn caps(&self) -> &[u32] {
        &self.caps
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// Position of `mode` in this basis (matched by wave vector).
    pub fn position(&self, mode: &ModeId) -> Result<usize> {
        self.modes
            .iter()
            .position(|m| m.wave == mode.wave)
            .ok_or_else(|| Error::UnknownMode(mode.to_string()))
    }

    pub fn occupation(&self, index: usize, pos: usize) -> u32 {
        ((index / self.strides[pos]) % (self.caps[pos] as usize + 1)) as u32
    }

    pub fn state(&self, index: usize) -> Vec<u32> {
        (0..self.modes.len()).map(|p| self.occupation(index, p)).collect()
    }

    pub fn states(&self) -> impl Iterator<Item = Vec<u32>> + '_ {
        (0..self.dim).map(|i| self.state(i))
    }

    pub fn index_of(&self, occupations: &[u32]) -> Option<usize> {
        if occupations.len() != self.modes.len() {
            return None;
        }
        let mut idx = 0;
        for (p, &n) in occupations.iter().enumerate() {
            if n > self.caps[p] {
                return None;
            }
            idx += n as usize * self.strides[p];
        }
        Some(idx)
    }

    /// Total occupation of a basis state.
    pub fn total_number(&self, index: usize) -> u32 {
        (0..self.modes.len()).map(|p| self.occupation(index, p)).sum()
    }

    /// Applies the normal-ordered word `a*_{c1}…a*_{cr} a_{d1}…a_{ds}` to a
    /// basis state. Positions refer to this basis' mode order. Returns the
    /// image index and amplitude, or `None` when the truncated word kills the
    /// state.
    pub fn apply_normal_ordered(
        &self,
        index: usize,
        creators: &[usize],
        annihilators: &[usize],
    ) -> Option<(usize, f64)> {
        let mut idx = index;
        let mut amp = 1.0;
        for &p in annihilators.iter().rev() {
            let n = self.occupation(idx, p);
            if n == 0 {
                return None;
            }
            amp *= (n as f64).sqrt();
            idx -= self.strides[p];
        }
        for &p in creators.iter().rev() {
            let n = self.occupation(idx, p);
            if n == self.caps[p] {
                return None;
            }
            amp *= (n as f64 + 1.0).sqrt();
            idx += self.strides[p];
        }
        Some((idx, amp))
    }
}

/// Sparse complex matrix acting on a truncated basis. Rows are stored with
/// column indices in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorMatrix {
    dim: usize,
    rows: Vec<Vec<(usize, C64)>>,
    hermitian: bool,
}

impl OperatorMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            rows: vec![Vec::new(); dim],
            hermitian: true,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let rows = values
            .iter()
            .enumerate()
            .map(|(i, &v)| if v != 0.0 { vec![(i, C64::new(v, 0.0))] } else { Vec::new() })
            .collect();
        Self {
            dim: values.len(),
            rows,
            hermitian: true,
        }
    }

    /// Accumulates `(row, col, value)` triplets; duplicate positions are summed
    /// and exact zeros dropped. The hermitian flag is set from a check.
    pub fn from_triplets(dim: usize, triplets: impl IntoIterator<Item = (usize, usize, C64)>) -> Self {
        let mut acc: Vec<BTreeMap<usize, C64>> = vec![BTreeMap::new(); dim];
        for (i, j, v) in triplets {
            *acc[i].entry(j).or_insert(C64::new(0.0, 0.0)) += v;
        }
        let rows = acc
            .into_iter()
            .map(|row| row.into_iter().filter(|(_, v)| *v != C64::new(0.0, 0.0)).collect())
            .collect();
        let mut m = Self {
            dim,
            rows,
            hermitian: false,
        };
        m.hermitian = m.hermiticity_defect() <= 1e-12;
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn rows(&self) -> &[Vec<(usize, C64)>] {
        &self.rows
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        match self.rows[i].binary_search_by_key(&j, |(c, _)| *c) {
            Ok(pos) => self.rows[i][pos].1,
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, v)| (i, j, v)))
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.triplets().map(|(_, _, v)| v.norm()).fold(0.0, f64::max)
    }

    /// max |A_ij − conj(A_ji)| relative to max |A_ij|.
    pub fn hermiticity_defect(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for (i, j, v) in self.triplets() {
            worst = worst.max((v - self.get(j, i).conj()).norm());
        }
        worst / scale
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::from_triplets(self.dim, self.triplets().map(|(i, j, v)| (j, i, v.conj())));
        m.hermitian = self.hermitian;
        m
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self::from_triplets(self.dim, self.triplets().map(|(i, j, v)| (i, j, v * c)))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self::from_triplets(self.dim, self.triplets().chain(other.triplets())))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(C64::new(-1.0, 0.0)))
    }

    pub fn add_scaled(&self, other: &Self, c: C64) -> Result<Self> {
        self.add(&other.scaled(c))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        let mut trip = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            for &(k, a) in row {
                for &(j, b) in &other.rows[k] {
                    trip.push((i, j, a * b));
                }
            }
        }
        Ok(Self::from_triplets(self.dim, trip))
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, a)| a * v[j]).sum())
            .collect()
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn to_dense(&self) -> Array2<C64> {
        let mut a = Array2::zeros((self.dim, self.dim));
        for (i, j, v) in self.triplets() {
            a[[i, j]] = v;
        }
        a
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::Structural(format!(
                "operator dimensions {} and {} differ",
                self.dim, other.dim
            )));
        }
        Ok(())
    }
}

/// Ladder operator of `mode`: lower maps `|n⟩ → √n|n−1⟩`, raise maps
/// `|n⟩ → √(n+1)|n+1⟩` below the cap and kills the cap state.
pub fn ladder_matrix(basis: &FockBasis, mode: &ModeId, kind: Ladder) -> Result<OperatorMatrix> {
    let pos = basis.position(mode)?;
    let (cre, ann): (&[usize], &[usize]) = match kind {
        Ladder::Raise => (&[pos], &[]),
        Ladder::Lower => (&[], &[pos]),
    };
    let trip = (0..basis.dim()).filter_map(|col| {
        basis
            .apply_normal_ordered(col, cre, ann)
            .map(|(row, amp)| (row, col, C64::new(amp, 0.0)))
    });
    Ok(OperatorMatrix::from_triplets(basis.dim(), trip))
}

pub fn number_matrix(basis: &FockBasis, mode: &ModeId) -> Result<OperatorMatrix> {
    let pos = basis.position(mode)?;
    let diag: Vec<f64> = (0..basis.dim()).map(|i| basis.occupation(i, pos) as f64).collect();
    Ok(OperatorMatrix::diagonal(&diag))
}

/// Total number operator `Σ_k n_k`.
pub fn total_number_matrix(basis: &FockBasis) -> OperatorMatrix {
    let diag: Vec<f64> = (0..basis.dim()).map(|i| basis.total_number(i) as f64).collect();
    OperatorMatrix::diagonal(&diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn modes(n: usize) -> Vec<ModeId> {
        (0..n).map(|i| ModeId::new(i, vec![i as i32 - (n as i32) / 2])).collect()
    }

    #[test]
    fn single_mode_enumeration() {
        let b = build_basis(&modes(1), &[2], DEFAULT_DIMENSION_LIMIT).unwrap();
        assert_eq!(b.dim(), 3);
        let states: Vec<Vec<u32>> = b.states().collect();
        assert_eq!(states, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn product_dimensions() {
        assert_eq!(build_basis(&modes(2), &[1, 1], 100).unwrap().dim(), 4);
        assert_eq!(build_basis(&modes(3), &[4, 4, 4], 1000).unwrap().dim(), 125);
    }

    #[test]
    fn lexicographic_first_mode_slowest() {
        let b = build_basis(&modes(2), &[1, 2], 100).unwrap();
        let states: Vec<Vec<u32>> = b.states().collect();
        assert_eq!(states[0], vec![0, 0]);
        assert_eq!(states[1], vec![0, 1]);
        assert_eq!(states[3], vec![1, 0]);
        for (i, s) in states.iter().enumerate() {
            assert_eq!(b.index_of(s), Some(i));
        }
    }

    #[test]
    fn sizing_error_names_product() {
        let err = build_basis(&modes(3), &[30, 30, 30], 20_000).unwrap_err();
        match err {
            Error::Sizing { product, what, .. } => {
                assert_eq!(product, 29_791);
                assert!(what.contains("31x31x31"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_cap_rejected() {
        assert!(build_basis(&modes(1), &[0], 10).is_err());
    }

    #[test]
    fn ladder_actions() {
        let m = modes(1);
        let b = build_basis(&m, &[2], 10).unwrap();
        let lower = ladder_matrix(&b, &m[0], Ladder::Lower).unwrap();
        let raise = ladder_matrix(&b, &m[0], Ladder::Raise).unwrap();
        // lower |1> = |0>
        assert_eq!(lower.get(0, 1), C64::new(1.0, 0.0));
        // raise |1> = √2 |2>
        assert!((raise.get(2, 1).re - 2f64.sqrt()).abs() < 1e-15);
        // raise |2> = 0
        assert!((0..3).all(|r| raise.get(r, 2) == C64::new(0.0, 0.0)));
        assert_eq!(raise, lower.adjoint());
    }

    #[test]
    fn unknown_mode_is_lookup_error() {
        let m = modes(1);
        let b = build_basis(&m, &[2], 10).unwrap();
        let other = ModeId::new(7, vec![5]);
        assert!(matches!(
            ladder_matrix(&b, &other, Ladder::Lower),
            Err(Error::UnknownMode(_))
        ));
        assert!(number_matrix(&b, &other).is_err());
    }

    #[test]
    fn number_is_raise_times_lower() {
        let m = modes(3);
        let b = build_basis(&m, &[2, 3, 1], 100).unwrap();
        for mode in &m {
            let n = number_matrix(&b, mode).unwrap();
            let rl = ladder_matrix(&b, mode, Ladder::Raise)
                .unwrap()
                .matmul(&ladder_matrix(&b, mode, Ladder::Lower).unwrap())
                .unwrap();
            assert!(n.max_abs_diff(&rl).unwrap() < 1e-14);
        }
        let single = build_basis(&modes(1), &[3], 10).unwrap();
        let n = number_matrix(&single, &modes(1)[0]).unwrap();
        assert_eq!(n.get(2, 2).re, 2.0);
        assert_eq!(n.trace().re, 6.0);
    }

    #[test]
    fn commutator_is_identity_below_cap() {
        let m = modes(2);
        let b = build_basis(&m, &[3, 2], 100).unwrap();
        for (pos, mode) in m.iter().enumerate() {
            let lo = ladder_matrix(&b, mode, Ladder::Lower).unwrap();
            let hi = ladder_matrix(&b, mode, Ladder::Raise).unwrap();
            let comm = lo.matmul(&hi).unwrap().sub(&hi.matmul(&lo).unwrap()).unwrap();
            for i in 0..b.dim() {
                let at_cap = b.occupation(i, pos) == b.caps()[pos];
                let d = comm.get(i, i);
                if !at_cap {
                    assert!((d - C64::new(1.0, 0.0)).norm() < 1e-14);
                } else {
                    assert!((d - C64::new(1.0, 0.0)).norm() > 0.5);
                }
            }
        }
    }
}
