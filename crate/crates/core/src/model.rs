//! Hamiltonians of a finite set of momentum modes in a periodic box,
//! `H = Σ ε(k) n_k + (1/2V) Σ ν(p) a*_{k+p} a*_{q−p} a_k a_q`,
//! their grand-canonical and gauge-broken forms, and the reduced operators
//! obtained by replacing the ladder operators of selected modes with upper
//! or lower symbols.
//!
//! Interaction terms whose output momenta leave the retained mode list are
//! dropped, so every model here is a closed finite-mode system.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coherent::{lower_symbol, monomial_value, symbol_reorder, SymbolPolynomial};
use crate::error::{Error, Result};
use crate::fock::{build_basis, total_number_matrix, FockBasis, ModeId, OperatorMatrix, C64};

/// Single-particle energies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Dispersion {
    /// `ε(k) = |k|²` with `k = 2πn/L`.
    Quadratic,
    /// Explicit `ε` per integer wave vector.
    Table(Vec<(Vec<i32>, f64)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dimension: usize,
    pub box_length: f64,
    pub modes: Vec<ModeId>,
    pub dispersion: Dispersion,
    /// `ν(p)` keyed by integer wave vector, sorted.
    pub nu: Vec<(Vec<i32>, C64)>,
    pub phi: f64,
    /// Generator of the table, kept so the model can be rebuilt in another box.
    pub generator: Option<GaussianPotential>,
}

/// `ν(p) = g·exp(−(|p|σ)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPotential {
    pub g: f64,
    pub sigma: f64,
}

fn neg(w: &[i32]) -> Vec<i32> {
    w.iter().map(|c| -c).collect()
}

fn sub(a: &[i32], b: &[i32]) -> Vec<i32> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

impl ModelSpec {
    /// Validates and assembles a model. Modes are indexed in the given order.
    pub fn new(
        dimension: usize,
        box_length: f64,
        waves: &[Vec<i32>],
        dispersion: Dispersion,
        nu: Vec<(Vec<i32>, C64)>,
        phi: f64,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Model("dimension must be at least 1".into()));
        }
        if !(box_length > 0.0 && box_length.is_finite()) {
            return Err(Error::Model(format!("box length {box_length} is not positive")));
        }
        if waves.is_empty() {
            return Err(Error::Model("mode list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for w in waves {
            if w.len() != dimension {
                return Err(Error::Model(format!("wave vector {w:?} is not {dimension}-dimensional")));
            }
            if !seen.insert(w.clone()) {
                return Err(Error::Model(format!("duplicate mode {w:?}")));
            }
        }
        if !waves.iter().any(|w| w.iter().all(|&c| c == 0)) {
            return Err(Error::Model("the zero mode must be among the modes".into()));
        }
        let mut table: BTreeMap<Vec<i32>, C64> = BTreeMap::new();
        for (p, v) in nu {
            if p.len() != dimension {
                return Err(Error::Model(format!("ν entry {p:?} is not {dimension}-dimensional")));
            }
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::Model(format!("ν{p:?} is not finite")));
            }
            if table.insert(p.clone(), v).is_some() {
                return Err(Error::Model(format!("duplicate ν entry {p:?}")));
            }
        }
        for (p, v) in &table {
            match table.get(&neg(p)) {
                None => {
                    return Err(Error::Model(format!("ν{:?} present but ν{:?} missing", p, neg(p))))
                }
                Some(w) if (v.conj() - w).norm() > 1e-12 * (1.0 + v.norm()) => {
                    return Err(Error::Model(format!(
                        "ν{:?} = {} is not the conjugate of ν{:?} = {}",
                        neg(p),
                        w,
                        p,
                        v
                    )))
                }
                _ => {}
            }
        }
        let max_nu = table.values().map(|v| v.norm()).fold(0.0, f64::max);
        if !(phi >= max_nu) {
            return Err(Error::Model(format!("declared φ = {phi} is below max|ν| = {max_nu}")));
        }
        if let Dispersion::Table(entries) = &dispersion {
            for w in waves {
                if !entries.iter().any(|(k, _)| k == w) {
                    return Err(Error::Model(format!("dispersion table lacks mode {w:?}")));
                }
            }
        }
        let modes = waves
            .iter()
            .enumerate()
            .map(|(i, w)| ModeId::new(i, w.clone()))
            .collect();
        Ok(Self {
            dimension,
            box_length,
            modes,
            dispersion,
            nu: table.into_iter().collect(),
            phi,
            generator: None,
        })
    }

    /// `ν(p) = g·exp(−(|p|σ)²)` tabulated on every difference of retained
    /// wave vectors; `φ` defaults to `|g|`.
    pub fn gaussian(
        dimension: usize,
        box_length: f64,
        waves: &[Vec<i32>],
        g: f64,
        sigma: f64,
        phi: Option<f64>,
    ) -> Result<Self> {
        let unit = 2.0 * std::f64::consts::PI / box_length;
        let mut diffs = std::collections::BTreeSet::new();
        for a in waves {
            for b in waves {
                if a.len() == b.len() {
                    diffs.insert(sub(a, b));
                }
            }
        }
        let nu = diffs
            .into_iter()
            .map(|p| {
                let p2: f64 = p.iter().map(|&c| (unit * c as f64).powi(2)).sum();
                let v = g * (-p2 * sigma * sigma).exp();
                (p, C64::new(v, 0.0))
            })
            .collect();
        let mut spec = Self::new(dimension, box_length, waves, Dispersion::Quadratic, nu, phi.unwrap_or(g.abs()))?;
        spec.generator = Some(GaussianPotential { g, sigma });
        Ok(spec)
    }

    /// One-dimensional model on the modes `{−2π/L, 0, 2π/L}`.
    pub fn three_mode(box_length: f64, g: f64, sigma: f64) -> Result<Self> {
        Self::gaussian(1, box_length, &[vec![-1], vec![0], vec![1]], g, sigma, None)
    }

    pub fn volume(&self) -> f64 {
        self.box_length.powi(self.dimension as i32)
    }

    pub fn zero_mode(&self) -> &ModeId {
        self.modes.iter().find(|m| m.is_zero()).expect("validated")
    }

    pub fn mode(&self, wave: &[i32]) -> Result<&ModeId> {
        self.modes
            .iter()
            .find(|m| m.wave == wave)
            .ok_or_else(|| Error::UnknownMode(format!("{wave:?}")))
    }

    pub fn energy(&self, mode: &ModeId) -> f64 {
        match &self.dispersion {
            Dispersion::Quadratic => mode.momentum(self.box_length).iter().map(|k| k * k).sum(),
            Dispersion::Table(entries) => entries
                .iter()
                .find(|(k, _)| *k == mode.wave)
                .map(|(_, e)| *e)
                .expect("validated"),
        }
    }

    pub fn nu(&self, p: &[i32]) -> Result<C64> {
        self.nu
            .binary_search_by(|(k, _)| k.as_slice().cmp(p))
            .map(|i| self.nu[i].1)
            .map_err(|_| Error::Model(format!("ν{p:?} is needed but not tabulated")))
    }

    pub fn max_abs_nu(&self) -> f64 {
        self.nu.iter().map(|(_, v)| v.norm()).fold(0.0, f64::max)
    }

    /// Same modes and potential in a box of another side length; a
    /// generated potential is re-tabulated at the new momenta.
    pub fn with_box_length(&self, box_length: f64) -> Result<Self> {
        let waves: Vec<Vec<i32>> = self.modes.iter().map(|m| m.wave.clone()).collect();
        match self.generator {
            Some(GaussianPotential { g, sigma }) => {
                Self::gaussian(self.dimension, box_length, &waves, g, sigma, Some(self.phi))
            }
            None => Self::new(
                self.dimension,
                box_length,
                &waves,
                self.dispersion.clone(),
                self.nu.clone(),
                self.phi,
            ),
        }
    }
}

/// Inverse temperature, chemical potential and real gauge-breaking strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub beta: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl EnsembleParams {
    pub fn new(beta: f64, mu: f64, lambda: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!("β = {beta} must be positive and finite")));
        }
        if !mu.is_finite() || !lambda.is_finite() {
            return Err(Error::Domain("μ and λ must be finite".into()));
        }
        Ok(Self { beta, mu, lambda })
    }

    /// Accepts a complex `λ` only when it is real.
    pub fn with_complex_lambda(beta: f64, mu: f64, lambda: C64) -> Result<Self> {
        if lambda.im != 0.0 {
            return Err(Error::Domain(format!("λ = {lambda} is not real")));
        }
        Self::new(beta, mu, lambda.re)
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..*self }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..*self }
    }
}

/// Modes replaced by complex numbers, and their values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionPlan {
    pub modes: Vec<ModeId>,
    pub values: Vec<C64>,
}

impl SubstitutionPlan {
    pub fn new(modes: Vec<ModeId>, values: Vec<C64>) -> Result<Self> {
        if modes.len() != values.len() {
            return Err(Error::Structural(format!(
                "{} substituted modes but {} values",
                modes.len(),
                values.len()
            )));
        }
        for (i, a) in modes.iter().enumerate() {
            if modes[..i].iter().any(|b| b.wave == a.wave) {
                return Err(Error::Model(format!("mode {a} substituted twice")));
            }
        }
        Ok(Self { modes, values })
    }

    pub fn zero_mode(spec: &ModelSpec, z: C64) -> Self {
        Self {
            modes: vec![spec.zero_mode().clone()],
            values: vec![z],
        }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// Normal-ordered monomial `c · a*_{c1}…a*_{cr} a_{d1}…a_{ds}`, indices into
/// `ModelSpec::modes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub coeff: C64,
    pub creators: Vec<usize>,
    pub annihilators: Vec<usize>,
}

/// Monomials of `H`: kinetic terms and the momentum-closed pair interaction.
pub fn hamiltonian_terms(spec: &ModelSpec) -> Result<Vec<Term>> {
    let mut terms = Vec::new();
    for (i, m) in spec.modes.iter().enumerate() {
        let e = spec.energy(m);
        if e != 0.0 {
            terms.push(Term {
                coeff: C64::new(e, 0.0),
                creators: vec![i],
                annihilators: vec![i],
            });
        }
    }
    let half_inv_v = 0.5 / spec.volume();
    let index: BTreeMap<&[i32], usize> = spec
        .modes
        .iter()
        .enumerate()
        .map(|(i, m)| (m.wave.as_slice(), i))
        .collect();
    for (k, mk) in spec.modes.iter().enumerate() {
        for (q, mq) in spec.modes.iter().enumerate() {
            for (c1, mc1) in spec.modes.iter().enumerate() {
                let p = sub(&mc1.wave, &mk.wave);
                let out2 = sub(&mq.wave, &p);
                let Some(&c2) = index.get(out2.as_slice()) else {
                    continue;
                };
                let v = spec.nu(&p)?;
                if v == C64::new(0.0, 0.0) {
                    continue;
                }
                terms.push(Term {
                    coeff: v * half_inv_v,
                    creators: vec![c1, c2],
                    annihilators: vec![k, q],
                });
            }
        }
    }
    Ok(terms)
}

/// Monomials of `H_μ` plus the gauge term `√V λ (a₀ + a₀*)`.
pub fn grand_terms(spec: &ModelSpec, params: &EnsembleParams) -> Result<Vec<Term>> {
    let mut terms = hamiltonian_terms(spec)?;
    if params.mu != 0.0 {
        for i in 0..spec.modes.len() {
            terms.push(Term {
                coeff: C64::new(-params.mu, 0.0),
                creators: vec![i],
                annihilators: vec![i],
            });
        }
    }
    if params.lambda != 0.0 {
        let z0 = spec.zero_mode().index;
        let c = C64::new(spec.volume().sqrt() * params.lambda, 0.0);
        terms.push(Term {
            coeff: c,
            creators: vec![],
            annihilators: vec![z0],
        });
        terms.push(Term {
            coeff: c,
            creators: vec![z0],
            annihilators: vec![],
        });
    }
    Ok(terms)
}

/// Maps each spec mode to its position in `basis`, requiring equal mode sets.
fn positions(spec: &ModelSpec, basis: &FockBasis) -> Result<Vec<usize>> {
    if basis.num_modes() != spec.modes.len() {
        return Err(Error::Structural(format!(
            "basis has {} modes, model has {}",
            basis.num_modes(),
            spec.modes.len()
        )));
    }
    spec.modes.iter().map(|m| basis.position(m)).collect()
}

fn assemble(basis: &FockBasis, words: &[(C64, Vec<usize>, Vec<usize>)]) -> OperatorMatrix {
    let mut trip = Vec::new();
    for col in 0..basis.dim() {
        for (c, cre, ann) in words {
            if let Some((row, amp)) = basis.apply_normal_ordered(col, cre, ann) {
                trip.push((row, col, c * amp));
            }
        }
    }
    OperatorMatrix::from_triplets(basis.dim(), trip)
}

fn terms_on_basis(spec: &ModelSpec, basis: &FockBasis, terms: &[Term]) -> Result<OperatorMatrix> {
    let pos = positions(spec, basis)?;
    let words: Vec<_> = terms
        .iter()
        .map(|t| {
            (
                t.coeff,
                t.creators.iter().map(|&i| pos[i]).collect(),
                t.annihilators.iter().map(|&i| pos[i]).collect(),
            )
        })
        .collect();
    Ok(assemble(basis, &words))
}

pub fn build_hamiltonian(spec: &ModelSpec, basis: &FockBasis) -> Result<OperatorMatrix> {
    terms_on_basis(spec, basis, &hamiltonian_terms(spec)?)
}

/// `H_μ = H − μN`.
pub fn grand_shift(h: &OperatorMatrix, params: &EnsembleParams, basis: &FockBasis) -> Result<OperatorMatrix> {
    h.add_scaled(&total_number_matrix(basis), C64::new(-params.mu, 0.0))
}

/// `H_{μ,λ} = H_μ + √V λ (a₀ + a₀*)`.
pub fn gauge_break(
    h_mu: &OperatorMatrix,
    params: &EnsembleParams,
    spec: &ModelSpec,
    basis: &FockBasis,
) -> Result<OperatorMatrix> {
    if params.lambda == 0.0 {
        return Ok(h_mu.clone());
    }
    let p = basis.position(spec.zero_mode())?;
    let c = C64::new(spec.volume().sqrt() * params.lambda, 0.0);
    let field = assemble(basis, &[(c, vec![], vec![p]), (c, vec![p], vec![])]);
    h_mu.add(&field)
}

/// `H_{μ,λ}` assembled in one pass.
pub fn grand_hamiltonian(spec: &ModelSpec, params: &EnsembleParams, basis: &FockBasis) -> Result<OperatorMatrix> {
    terms_on_basis(spec, basis, &grand_terms(spec, params)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Lower,
    Upper,
}

/// Per-substituted-mode exponents `(power of z*, power of z)`.
pub type Exponents = Vec<(u32, u32)>;

fn eval_exponents(exps: &Exponents, z: &[C64]) -> C64 {
    exps.iter()
        .zip(z)
        .fold(C64::new(1.0, 0.0), |acc, (&(a, b), &zj)| acc * monomial_value(zj, a, b))
}

/// `H′(z)` or `H″(z)` as a polynomial in the substituted amplitudes with
/// operator coefficients on the reduced space, plus a scalar polynomial.
#[derive(Clone, Debug)]
pub struct ReducedHamiltonian {
    pub kind: SymbolKind,
    pub substituted: Vec<ModeId>,
    dim: usize,
    parts: Vec<(Exponents, OperatorMatrix)>,
    scalar: Vec<(Exponents, C64)>,
    gauge_covariant: bool,
}

impl ReducedHamiltonian {
    pub fn build(
        spec: &ModelSpec,
        params: &EnsembleParams,
        substituted: &[ModeId],
        reduced_basis: &FockBasis,
        kind: SymbolKind,
    ) -> Result<Self> {
        let subst_idx: Vec<usize> = substituted
            .iter()
            .map(|m| spec.mode(&m.wave).map(|x| x.index))
            .collect::<Result<_>>()?;
        let rest: Vec<usize> = (0..spec.modes.len()).filter(|i| !subst_idx.contains(i)).collect();
        if reduced_basis.num_modes() != rest.len()
            || rest.iter().any(|&i| reduced_basis.position(&spec.modes[i]).is_err())
        {
            return Err(Error::Structural(
                "reduced basis must hold exactly the modes that are not substituted".into(),
            ));
        }
        let rest_pos: BTreeMap<usize, usize> = rest
            .iter()
            .map(|&i| (i, reduced_basis.position(&spec.modes[i]).expect("checked")))
            .collect();
        let m = subst_idx.len();
        let mut part_words: BTreeMap<Exponents, Vec<(C64, Vec<usize>, Vec<usize>)>> = BTreeMap::new();
        let mut scalar: BTreeMap<Exponents, C64> = BTreeMap::new();
        let mut covariant = independent_phases(spec, &subst_idx);
        for term in grand_terms(spec, params)? {
            let count = |ops: &[usize], j: usize| ops.iter().filter(|&&i| i == j).count() as u32;
            let mut poly: Vec<(Exponents, i64)> = vec![(Vec::with_capacity(m), 1)];
            for &j in &subst_idx {
                let (a, b) = (count(&term.creators, j), count(&term.annihilators, j));
                let sym: SymbolPolynomial = match kind {
                    SymbolKind::Lower => lower_symbol(a, b),
                    SymbolKind::Upper => symbol_reorder(a, b),
                };
                let mut next = Vec::new();
                for (exps, c) in &poly {
                    for (&key, &d) in &sym.terms {
                        let mut e = exps.clone();
                        e.push(key);
                        next.push((e, c * d));
                    }
                }
                poly = next;
            }
            let cre: Vec<usize> = term.creators.iter().filter_map(|i| rest_pos.get(i).copied()).collect();
            let ann: Vec<usize> = term.annihilators.iter().filter_map(|i| rest_pos.get(i).copied()).collect();
            if cre.is_empty() && ann.is_empty() {
                for (e, c) in poly {
                    *scalar.entry(e).or_insert(C64::new(0.0, 0.0)) += term.coeff * c as f64;
                }
                continue;
            }
            if !conserves(spec, &term) {
                covariant = false;
            }
            for (e, c) in poly {
                part_words
                    .entry(e)
                    .or_default()
                    .push((term.coeff * c as f64, cre.clone(), ann.clone()));
            }
        }
        let parts = part_words
            .into_iter()
            .map(|(e, words)| (e, assemble(reduced_basis, &words)))
            .filter(|(_, op)| op.nnz() > 0)
            .collect();
        Ok(Self {
            kind,
            substituted: subst_idx.iter().map(|&i| spec.modes[i].clone()).collect(),
            dim: reduced_basis.dim(),
            parts,
            scalar: scalar.into_iter().filter(|(_, c)| c.norm() != 0.0).collect(),
            gauge_covariant: covariant,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when the spectrum of the operator part depends on the amplitudes
    /// only through their moduli: every term that keeps reduced-space
    /// operators conserves particle number and momentum, and the vectors
    /// `(1, k_j)` of the substituted modes are linearly independent, so any
    /// phase pattern can be undone by a unitary `exp(−iΣ(α + γ·k)n_k)`.
    pub fn is_gauge_covariant(&self) -> bool {
        self.gauge_covariant
    }

    /// Operator part without the scalar polynomial.
    pub fn operator_part(&self, z: &[C64]) -> OperatorMatrix {
        let mut trip = Vec::new();
        for (e, op) in &self.parts {
            let c = eval_exponents(e, z);
            if c.norm() == 0.0 {
                continue;
            }
            trip.extend(op.triplets().map(|(i, j, v)| (i, j, v * c)));
        }
        OperatorMatrix::from_triplets(self.dim, trip)
    }

    /// Scalar part (terms with no reduced-space operators).
    pub fn scalar_part(&self, z: &[C64]) -> C64 {
        self.scalar.iter().map(|(e, c)| c * eval_exponents(e, z)).sum()
    }

    pub fn assemble(&self, z: &[C64]) -> OperatorMatrix {
        let s = self.scalar_part(z);
        self.operator_part(z)
            .add(&OperatorMatrix::identity(self.dim).scaled(s))
            .expect("same dimension")
    }
}

fn conserves(spec: &ModelSpec, term: &Term) -> bool {
    if term.creators.len() != term.annihilators.len() {
        return false;
    }
    let total = |ops: &[usize]| {
        let mut acc = vec![0i64; spec.dimension];
        for &i in ops {
            for (a, &c) in acc.iter_mut().zip(&spec.modes[i].wave) {
                *a += c as i64;
            }
        }
        acc
    };
    total(&term.creators) == total(&term.annihilators)
}

/// Rank test of the vectors `(1, n_j)` over the substituted modes.
fn independent_phases(spec: &ModelSpec, subst: &[usize]) -> bool {
    let mut rows: Vec<Vec<f64>> = subst
        .iter()
        .map(|&i| {
            let mut r = vec![1.0];
            r.extend(spec.modes[i].wave.iter().map(|&c| c as f64));
            r
        })
        .collect();
    let cols = spec.dimension + 1;
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows.len()).find(|&r| rows[r][c].abs() > 1e-9) else {
            continue;
        };
        rows.swap(rank, p);
        for r in 0..rows.len() {
            if r != rank {
                let f = rows[r][c] / rows[rank][c];
                for k in 0..cols {
                    rows[r][k] -= f * rows[rank][k];
                }
            }
        }
        rank += 1;
    }
    rank == subst.len()
}

pub fn reduce_lower(
    spec: &ModelSpec,
    params: &EnsembleParams,
    plan: &SubstitutionPlan,
    reduced_basis: &FockBasis,
) -> Result<OperatorMatrix> {
    Ok(ReducedHamiltonian::build(spec, params, &plan.modes, reduced_basis, SymbolKind::Lower)?.assemble(&plan.values))
}

pub fn reduce_upper(
    spec: &ModelSpec,
    params: &EnsembleParams,
    plan: &SubstitutionPlan,
    reduced_basis: &FockBasis,
) -> Result<OperatorMatrix> {
    Ok(ReducedHamiltonian::build(spec, params, &plan.modes, reduced_basis, SymbolKind::Upper)?.assemble(&plan.values))
}

/// Closed form of `H″_μ(z) − H′_μ(z)` for the zero-mode substitution:
/// `μ − ε(0) + (1/2V)[(−4|z|²+2)ν(0) − Σ_{k≠0} n_k(2ν(0)+ν(k)+ν(−k))]`.
pub fn delta_operator(
    spec: &ModelSpec,
    params: &EnsembleParams,
    z: C64,
    reduced_basis: &FockBasis,
) -> Result<OperatorMatrix> {
    let zero = spec.zero_mode();
    if reduced_basis.position(zero).is_ok() || reduced_basis.num_modes() + 1 != spec.modes.len() {
        return Err(Error::Structural("reduced basis must omit exactly the zero mode".into()));
    }
    let nu0 = spec.nu(&zero.wave)?.re;
    let inv2v = 0.5 / spec.volume();
    let constant = params.mu - spec.energy(zero) + inv2v * (-4.0 * z.norm_sqr() + 2.0) * nu0;
    let mut slopes = Vec::with_capacity(reduced_basis.num_modes());
    for m in reduced_basis.modes() {
        let k = spec.nu(&m.wave)?;
        let mk = spec.nu(&neg(&m.wave))?;
        slopes.push(-inv2v * (2.0 * nu0 + k.re + mk.re));
    }
    let diag: Vec<f64> = (0..reduced_basis.dim())
        .map(|i| {
            constant
                + slopes
                    .iter()
                    .enumerate()
                    .map(|(p, s)| s * reduced_basis.occupation(i, p) as f64)
                    .sum::<f64>()
        })
        .collect();
    Ok(OperatorMatrix::diagonal(&diag))
}

/// Upper bound on `|⟨δ(z)⟩|` in a state where the lower symbol of `N` takes
/// the value `n_prime`. For one substituted mode this is
/// `2φ(N′+½)/V + |μ − ε|`; each further mode adds its own copy plus the
/// pair constant `2φ/V` per pair of substituted modes.
pub fn delta_bound(plan: &SubstitutionPlan, params: &EnsembleParams, spec: &ModelSpec, n_prime: f64) -> Result<f64> {
    if !(n_prime >= 0.0) {
        return Err(Error::Domain(format!("N′ = {n_prime} must be non-negative")));
    }
    let m = plan.len() as f64;
    let v = spec.volume();
    let kinetic: f64 = plan.modes.iter().map(|k| (params.mu - spec.energy(k)).abs()).sum();
    Ok(kinetic + 2.0 * m * spec.phi * (n_prime + 0.5) / v + m * (m - 1.0) * spec.phi / v)
}

/// A model together with per-mode occupation caps and a dimension limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedModel {
    pub spec: ModelSpec,
    /// Caps in the order of `spec.modes`.
    pub caps: Vec<u32>,
    pub dimension_limit: usize,
}

impl TruncatedModel {
    pub fn new(spec: ModelSpec, caps: Vec<u32>, dimension_limit: usize) -> Result<Self> {
        if caps.len() != spec.modes.len() {
            return Err(Error::Structural(format!(
                "{} caps for {} modes",
                caps.len(),
                spec.modes.len()
            )));
        }
        Ok(Self {
            spec,
            caps,
            dimension_limit,
        })
    }

    pub fn cap(&self, mode: &ModeId) -> Result<u32> {
        Ok(self.caps[self.spec.mode(&mode.wave)?.index])
    }

    pub fn zero_cap(&self) -> u32 {
        self.caps[self.spec.zero_mode().index]
    }

    /// Full basis with the zero mode first (slowest), then the remaining
    /// modes in model order.
    pub fn full_basis(&self) -> Result<FockBasis> {
        let z = self.spec.zero_mode().index;
        let order: Vec<usize> = std::iter::once(z)
            .chain((0..self.spec.modes.len()).filter(|&i| i != z))
            .collect();
        let modes: Vec<ModeId> = order.iter().map(|&i| self.spec.modes[i].clone()).collect();
        let caps: Vec<u32> = order.iter().map(|&i| self.caps[i]).collect();
        build_basis(&modes, &caps, self.dimension_limit)
    }

    /// Basis of the modes that are not substituted, in model order.
    pub fn reduced_basis(&self, substituted: &[ModeId]) -> Result<FockBasis> {
        for m in substituted {
            self.spec.mode(&m.wave)?;
        }
        let keep: Vec<usize> = (0..self.spec.modes.len())
            .filter(|&i| !substituted.iter().any(|m| m.wave == self.spec.modes[i].wave))
            .collect();
        let modes: Vec<ModeId> = keep.iter().map(|&i| self.spec.modes[i].clone()).collect();
        let caps: Vec<u32> = keep.iter().map(|&i| self.caps[i]).collect();
        build_basis(&modes, &caps, self.dimension_limit)
    }

    pub fn volume(&self) -> f64 {
        self.spec.volume()
    }
}

/// Which occupation caps grow with the volume in a family of models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapScaling {
    /// Only the zero-mode cap grows in proportion to `V`.
    #[default]
    ZeroMode,
    /// Every cap grows in proportion to `V`.
    All,
    None,
}

/// Copies of `base` in boxes of the given side lengths, with caps scaled
/// relative to the first length. Every member's full basis is sized up
/// front so an infeasible family fails before any work is done.
pub fn volume_family(
    base: &ModelSpec,
    lengths: &[f64],
    base_caps: &[u32],
    scaling: CapScaling,
    dimension_limit: usize,
) -> Result<Vec<TruncatedModel>> {
    let first = *lengths
        .first()
        .ok_or_else(|| Error::Precondition("volume family needs at least one length".into()))?;
    let v0 = first.powi(base.dimension as i32);
    let mut out = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let spec = base.with_box_length(l)?;
        let factor = spec.volume() / v0;
        let caps: Vec<u32> = spec
            .modes
            .iter()
            .zip(base_caps)
            .map(|(m, &c)| match scaling {
                CapScaling::All => (c as f64 * factor).round() as u32,
                CapScaling::ZeroMode if m.is_zero() => (c as f64 * factor).round() as u32,
                _ => c,
            })
            .collect();
        let model = TruncatedModel::new(spec, caps, dimension_limit)?;
        model.full_basis()?;
        out.push(model);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{ladder_matrix, number_matrix, Ladder, DEFAULT_DIMENSION_LIMIT};

    fn single(g: f64, v: f64) -> ModelSpec {
        ModelSpec::new(1, v, &[vec![0]], Dispersion::Quadratic, vec![(vec![0], C64::new(g, 0.0))], g.abs()).unwrap()
    }

    #[test]
    fn single_mode_interaction_diagonal() {
        let spec = single(1.5, 3.0);
        let b = build_basis(&spec.modes, &[6], 100).unwrap();
        let h = build_hamiltonian(&spec, &b).unwrap();
        for n in 0..=6usize {
            let want = 1.5 * (n * n.saturating_sub(1)) as f64 / (2.0 * 3.0);
            assert!((h.get(n, n).re - want).abs() < 1e-14);
        }
        assert_eq!(h.nnz(), 5);
    }

    #[test]
    fn free_gas_is_diagonal_kinetic() {
        let spec = ModelSpec::gaussian(1, 4.0, &[vec![-1], vec![0], vec![1]], 0.0, 0.5, Some(0.0)).unwrap();
        let tm = TruncatedModel::new(spec.clone(), vec![2, 3, 2], 1000).unwrap();
        let b = tm.full_basis().unwrap();
        let h = build_hamiltonian(&spec, &b).unwrap();
        let eps = (2.0 * std::f64::consts::PI / 4.0f64).powi(2);
        for i in 0..b.dim() {
            let s = b.state(i);
            assert!((h.get(i, i).re - eps * (s[1] + s[2]) as f64).abs() < 1e-13);
        }
        assert_eq!(h.nnz(), (0..b.dim()).filter(|&i| b.state(i)[1] + b.state(i)[2] > 0).count());
    }

    #[test]
    fn pair_exchange_coefficient() {
        let spec = ModelSpec::three_mode(4.0, 1.0, 0.5).unwrap();
        let tm = TruncatedModel::new(spec.clone(), vec![4, 4, 4], 1000).unwrap();
        let b = tm.full_basis().unwrap();
        let h = build_hamiltonian(&spec, &b).unwrap();
        // ⟨n₀−2, 1, 1| H |n₀, 0, 0⟩ collects ν(k) and ν(−k) orderings of
        // a_k* a_{−k}* a₀ a₀: 2ν(2π/L)/2V · √(n₀(n₀−1))
        let nu_k = spec.nu(&[1]).unwrap().re;
        let from = b.index_of(&[3, 0, 0]).unwrap();
        let to = b.index_of(&[1, 1, 1]).unwrap();
        let want = 2.0 * nu_k / (2.0 * 4.0) * (6.0f64).sqrt();
        assert!((h.get(to, from).re - want).abs() < 1e-14);
        assert!(h.is_hermitian());
    }

    #[test]
    fn grand_shift_and_gauge() {
        let spec = single(0.0, 2.0);
        let b = build_basis(&spec.modes, &[1], 10).unwrap();
        let h = build_hamiltonian(&spec, &b).unwrap();
        let p = EnsembleParams::new(1.0, -1.0, 0.3).unwrap();
        let hm = grand_shift(&h, &p, &b).unwrap();
        assert_eq!(hm.get(1, 1).re, 1.0);
        let hl = gauge_break(&hm, &p, &spec, &b).unwrap();
        assert!((hl.get(0, 1).re - 2f64.sqrt() * 0.3).abs() < 1e-15);
        assert!((hl.get(1, 0).re - 2f64.sqrt() * 0.3).abs() < 1e-15);
        let direct = grand_hamiltonian(&spec, &p, &b).unwrap();
        assert!(direct.max_abs_diff(&hl).unwrap() < 1e-15);
    }

    #[test]
    fn invalid_models_rejected() {
        let bad_pair = vec![(vec![0], C64::new(1.0, 0.0)), (vec![1], C64::new(0.5, 0.1)), (vec![-1], C64::new(0.5, 0.1))];
        let e = ModelSpec::new(1, 4.0, &[vec![0], vec![1]], Dispersion::Quadratic, bad_pair, 1.0).unwrap_err();
        assert!(e.to_string().contains("[-1]") && e.to_string().contains("[1]"));
        let e = ModelSpec::gaussian(1, 4.0, &[vec![0]], 2.0, 0.5, Some(1.0)).unwrap_err();
        assert!(e.to_string().contains("φ"));
        assert!(ModelSpec::new(1, 4.0, &[vec![1]], Dispersion::Quadratic, vec![], 0.0).is_err());
        assert!(EnsembleParams::new(0.0, 0.0, 0.0).is_err());
        assert!(EnsembleParams::with_complex_lambda(1.0, 0.0, C64::new(0.1, 0.1)).is_err());
        // missing ν for a connecting momentum
        let spec = ModelSpec::new(
            1,
            4.0,
            &[vec![0], vec![1]],
            Dispersion::Quadratic,
            vec![(vec![0], C64::new(1.0, 0.0))],
            1.0,
        )
        .unwrap();
        let b = build_basis(&spec.modes, &[1, 1], 10).unwrap();
        assert!(matches!(build_hamiltonian(&spec, &b), Err(Error::Model(_))));
    }

    #[test]
    fn single_mode_reductions_are_scalars() {
        let spec = single(1.0, 2.0);
        let p = EnsembleParams::new(1.0, 0.7, 0.0).unwrap();
        let tm = TruncatedModel::new(spec.clone(), vec![5], 100).unwrap();
        let rb = tm.reduced_basis(&spec.modes).unwrap();
        assert_eq!(rb.dim(), 1);
        let z = C64::new(1.2, -0.4);
        let plan = SubstitutionPlan::zero_mode(&spec, z);
        let lo = reduce_lower(&spec, &p, &plan, &rb).unwrap().get(0, 0).re;
        let s = z.norm_sqr();
        assert!((lo - (s * s / (2.0 * 2.0) - 0.7 * s)).abs() < 1e-13);
        let up = reduce_upper(&spec, &p, &plan, &rb).unwrap().get(0, 0).re;
        let delta = 0.7 + (-4.0 * s + 2.0) / (2.0 * 2.0);
        assert!((up - lo - delta).abs() < 1e-13);
        // μ = 0, ν(0) = 1, V = 1, z = 0: δ = 1
        let spec1 = single(1.0, 1.0);
        let rb1 = TruncatedModel::new(spec1.clone(), vec![3], 10).unwrap().reduced_basis(&spec1.modes).unwrap();
        let d = delta_operator(&spec1, &EnsembleParams::new(1.0, 0.0, 0.0).unwrap(), C64::new(0.0, 0.0), &rb1).unwrap();
        assert_eq!(d.get(0, 0).re, 1.0);
    }

    #[test]
    fn zero_amplitude_deletes_substituted_terms() {
        let spec = ModelSpec::three_mode(4.0, 1.0, 0.5).unwrap();
        let p = EnsembleParams::new(1.0, -0.5, 0.0).unwrap();
        let tm = TruncatedModel::new(spec.clone(), vec![3, 4, 3], 1000).unwrap();
        let zero = spec.zero_mode().clone();
        let rb = tm.reduced_basis(std::slice::from_ref(&zero)).unwrap();
        let plan = SubstitutionPlan::zero_mode(&spec, C64::new(0.0, 0.0));
        let red = reduce_lower(&spec, &p, &plan, &rb).unwrap();
        let kept: Vec<Term> = grand_terms(&spec, &p)
            .unwrap()
            .into_iter()
            .filter(|t| !t.creators.contains(&zero.index) && !t.annihilators.contains(&zero.index))
            .collect();
        let pos: BTreeMap<usize, usize> = [(0usize, 0usize), (2, 1)].into_iter().collect();
        let words: Vec<_> = kept
            .iter()
            .map(|t| {
                (
                    t.coeff,
                    t.creators.iter().map(|i| pos[i]).collect(),
                    t.annihilators.iter().map(|i| pos[i]).collect(),
                )
            })
            .collect();
        assert!(assemble(&rb, &words).max_abs_diff(&red).unwrap() < 1e-15);
    }

    #[test]
    fn gauge_covariance_flag() {
        let spec = ModelSpec::three_mode(4.0, 1.0, 0.5).unwrap();
        let tm = TruncatedModel::new(spec.clone(), vec![2, 3, 2], 1000).unwrap();
        let p = EnsembleParams::new(1.0, 0.5, 0.2).unwrap();
        let zero = [spec.zero_mode().clone()];
        let rb = tm.reduced_basis(&zero).unwrap();
        let r = ReducedHamiltonian::build(&spec, &p, &zero, &rb, SymbolKind::Upper).unwrap();
        assert!(r.is_gauge_covariant());
        let two = [spec.modes[1].clone(), spec.modes[2].clone()];
        let rb2 = tm.reduced_basis(&two).unwrap();
        let r2 = ReducedHamiltonian::build(&spec, &p, &two, &rb2, SymbolKind::Lower).unwrap();
        assert!(r2.is_gauge_covariant());
        let edge = [spec.modes[0].clone()];
        let rb3 = tm.reduced_basis(&edge).unwrap();
        let r3 = ReducedHamiltonian::build(&spec, &p, &edge, &rb3, SymbolKind::Lower).unwrap();
        // λ acts on the unsubstituted zero mode
        assert!(!r3.is_gauge_covariant());
    }

    #[test]
    fn family_scaling_and_sizing() {
        let spec = ModelSpec::three_mode(4.0, 1.0, 0.5).unwrap();
        let fam = volume_family(&spec, &[4.0, 8.0, 16.0, 32.0], &[3, 20, 3], CapScaling::ZeroMode, 20_000).unwrap();
        let caps: Vec<Vec<u32>> = fam.iter().map(|m| m.caps.clone()).collect();
        assert_eq!(caps, vec![vec![3, 20, 3], vec![3, 40, 3], vec![3, 80, 3], vec![3, 160, 3]]);
        assert_eq!(fam[3].volume(), 32.0);
        let e = volume_family(&spec, &[4.0, 32.0], &[10, 24, 10], CapScaling::All, 20_000).unwrap_err();
        assert!(matches!(e, Error::Sizing { .. }), "{e}");
    }

    #[test]
    fn delta_bound_plug_in() {
        let spec = single(1.0, 1.0);
        let plan = SubstitutionPlan::zero_mode(&spec, C64::new(0.0, 0.0));
        let b = delta_bound(&plan, &EnsembleParams::new(1.0, 0.0, 0.0).unwrap(), &spec, 0.0).unwrap();
        assert!((b - 1.0).abs() < 1e-15);
        let spec10 = single(1.0, 10.0);
        let b = delta_bound(&plan, &EnsembleParams::new(1.0, -0.5, 0.0).unwrap(), &spec10, 4.5).unwrap();
        assert!((b - 1.5).abs() < 1e-15);
        assert!(delta_bound(&plan, &EnsembleParams::new(1.0, 0.0, 0.0).unwrap(), &spec, -1.0).is_err());
    }

    #[test]
    fn gauge_spectrum_symmetric_in_lambda() {
        let spec = ModelSpec::three_mode(4.0, 1.0, 0.5).unwrap();
        let tm = TruncatedModel::new(spec.clone(), vec![1, 5, 1], DEFAULT_DIMENSION_LIMIT).unwrap();
        let b = tm.full_basis().unwrap();
        let hp = grand_hamiltonian(&spec, &EnsembleParams::new(1.0, 0.3, 0.4).unwrap(), &b).unwrap();
        let hm = grand_hamiltonian(&spec, &EnsembleParams::new(1.0, 0.3, -0.4).unwrap(), &b).unwrap();
        let ep = crate::spectrum::Spectrum::compute(&hp, false).unwrap().eigenvalues();
        let em = crate::spectrum::Spectrum::compute(&hm, false).unwrap().eigenvalues();
        for (a, c) in ep.iter().zip(&em) {
            assert!((a - c).abs() < 1e-11);
        }
        let n0 = number_matrix(&b, spec.zero_mode()).unwrap();
        let rl = ladder_matrix(&b, spec.zero_mode(), Ladder::Raise)
            .unwrap()
            .matmul(&ladder_matrix(&b, spec.zero_mode(), Ladder::Lower).unwrap())
            .unwrap();
        assert!(n0.max_abs_diff(&rl).unwrap() < 1e-14);
    }
}
