//! Coherent states of a single mode, the upper/lower symbol calculus and the
//! disc quadrature realising `∫d²z = π⁻¹∫dx dy`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{FockBasis, C64};
use crate::linalg;

/// `ln n!` for `n = 0..=max`.
pub fn log_factorials(max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(max + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=max {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Truncated coherent state `|z⟩ = e^{−|z|²/2} Σ zⁿ/√n! |n⟩`, `n ≤ cap`.
#[derive(Clone, Debug)]
pub struct CoherentVector {
    pub z: C64,
    pub cap: usize,
    pub coeffs: Vec<C64>,
    /// Probability weight above the cap, `Σ_{n>cap} e^{−|z|²}|z|^{2n}/n!`.
    pub tail_mass: f64,
}

pub fn coherent_vector(z: C64, cap: usize) -> CoherentVector {
    let s = z.norm_sqr();
    let (moduli, tail_mass) = poisson_amplitudes(s, cap);
    let theta = z.arg();
    let coeffs = moduli
        .iter()
        .enumerate()
        .map(|(n, &m)| C64::from_polar(m, n as f64 * theta))
        .collect();
    CoherentVector {
        z,
        cap,
        coeffs,
        tail_mass,
    }
}

/// Moduli `e^{−s/2} s^{n/2}/√n!` for `n ≤ cap` together with the Poisson mass
/// above the cap. Amplitudes are built by ratios outward from the Poisson
/// peak and normalised over a range wide enough to hold all but a negligible
/// fraction of the mass, so that `Σ|c_n|² + tail = 1` to rounding.
fn poisson_amplitudes(s: f64, cap: usize) -> (Vec<f64>, f64) {
    if s == 0.0 {
        let mut v = vec![0.0; cap + 1];
        v[0] = 1.0;
        return (v, 0.0);
    }
    let r = s.sqrt();
    let top = cap.max((s + 40.0 * r + 200.0) as usize);
    let peak = (s.floor() as usize).min(top);
    let mut u = vec![0.0; top + 1];
    u[peak] = 1.0;
    for n in (peak + 1)..=top {
        u[n] = u[n - 1] * r / (n as f64).sqrt();
    }
    for n in (0..peak).rev() {
        u[n] = u[n + 1] * ((n + 1) as f64).sqrt() / r;
    }
    let total: f64 = u.iter().map(|x| x * x).sum();
    let inv = total.sqrt().recip();
    let tail: f64 = u[cap + 1..].iter().map(|x| x * x).sum::<f64>() / total;
    u.truncate(cap + 1);
    u.iter_mut().for_each(|x| *x *= inv);
    (u, tail)
}

/// `P(Poisson(s) ≤ n)`, accurate when small.
pub fn poisson_lower_cdf(s: f64, n: usize) -> f64 {
    poisson_amplitudes(s, n).0.iter().map(|x| x * x).sum()
}

/// `P(Poisson(s) > cap)`.
pub fn poisson_upper_tail(s: f64, cap: usize) -> f64 {
    poisson_amplitudes(s, cap).1
}

impl CoherentVector {
    pub fn norm_sqr(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// `⟨z|a*^m aⁿ|z⟩` evaluated with the truncated coefficient vector.
    pub fn expect_normal(&self, m: usize, n: usize) -> C64 {
        let lowered = |k: usize| -> Vec<C64> {
            (0..=self.cap)
                .map(|j| {
                    if j + k > self.cap {
                        return C64::new(0.0, 0.0);
                    }
                    let amp: f64 = (j + 1..=j + k).map(|x| (x as f64).sqrt()).product();
                    self.coeffs[j + k] * amp
                })
                .collect()
        };
        let left = lowered(m);
        let right = lowered(n);
        left.iter().zip(&right).map(|(l, r)| l.conj() * r).sum()
    }
}

/// Polynomial in `(z*, z)` with exact integer coefficients, keyed by
/// `(power of z*, power of z)`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SymbolPolynomial {
    pub terms: BTreeMap<(u32, u32), i64>,
}

impl SymbolPolynomial {
    pub fn monomial(conj_power: u32, power: u32, coeff: i64) -> Self {
        let mut terms = BTreeMap::new();
        if coeff != 0 {
            terms.insert((conj_power, power), coeff);
        }
        Self { terms }
    }

    pub fn coefficient(&self, conj_power: u32, power: u32) -> i64 {
        self.terms.get(&(conj_power, power)).copied().unwrap_or(0)
    }

    pub fn eval(&self, z: C64) -> C64 {
        self.terms
            .iter()
            .map(|(&(a, b), &c)| monomial_value(z, a, b) * c as f64)
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

impl fmt::Display for SymbolPolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self
            .terms
            .iter()
            .rev()
            .map(|(&(a, b), &c)| {
                let mono = match (a, b) {
                    (0, 0) => String::new(),
                    (a, b) if a == b => format!("|z|^{}", 2 * a),
                    _ => format!("z*^{a} z^{b}"),
                };
                if mono.is_empty() {
                    c.to_string()
                } else if c == 1 {
                    mono
                } else {
                    format!("{c} {mono}")
                }
            })
            .collect();
        write!(f, "{}", parts.join(" + "))
    }
}

/// `z*^a z^b`, evaluated as `|z|^{2min(a,b)}` times a pure power so that
/// swapping `a` and `b` yields the exact complex conjugate.
pub fn monomial_value(z: C64, a: u32, b: u32) -> C64 {
    let base = z.norm_sqr().powi(a.min(b) as i32);
    if a >= b {
        z.conj().powu(a - b) * base
    } else {
        z.powu(b - a) * base
    }
}

/// Lower symbol `⟨z|a*^m aⁿ|z⟩ = z*^m zⁿ`.
pub fn lower_symbol(m: u32, n: u32) -> SymbolPolynomial {
    SymbolPolynomial::monomial(m, n, 1)
}

/// Upper symbol of the normal-ordered monomial `a*^m aⁿ`.
///
/// The monomial is rewritten in anti-normal order by multiplying `aⁿ` from
/// the left with `a*` one factor at a time, using
/// `a*·a^j a*^i = a^j a*^{i+1} − j·a^{j−1} a*^i`. An anti-normal monomial
/// `a^j a*^i` has upper symbol `z^j z*^i`.
pub fn symbol_reorder(m: u32, n: u32) -> SymbolPolynomial {
    // keyed by (power of a*, power of a) in anti-normal order
    let mut poly: BTreeMap<(u32, u32), i64> = BTreeMap::new();
    poly.insert((0, n), 1);
    for _ in 0..m {
        let mut next: BTreeMap<(u32, u32), i64> = BTreeMap::new();
        for (&(i, j), &c) in &poly {
            *next.entry((i + 1, j)).or_insert(0) += c;
            if j > 0 {
                *next.entry((i, j - 1)).or_insert(0) -= c * j as i64;
            }
        }
        next.retain(|_, c| *c != 0);
        poly = next;
    }
    SymbolPolynomial { terms: poly }
}

/// Node counts of the disc quadrature. The radial variable `s = |z|²` is
/// split into equal panels of at most `panel_width`, each carrying a
/// Gauss–Legendre rule; the angle uses a uniform trapezoid rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub radial_nodes_per_panel: usize,
    pub panel_width: f64,
    pub angular_nodes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            radial_nodes_per_panel: 32,
            panel_width: 16.0,
            angular_nodes: 64,
        }
    }
}

impl GridSpec {
    /// Same panels with half the radial and angular nodes; used to estimate
    /// the quadrature error of the finer rule.
    pub fn coarsened(&self) -> Self {
        Self {
            radial_nodes_per_panel: (self.radial_nodes_per_panel / 2).max(2),
            panel_width: self.panel_width,
            angular_nodes: (self.angular_nodes / 2).max(4),
        }
    }
}

/// `Z_max² = max(thermal ⟨n₀⟩, cap/2) + margin·√cap`.
pub fn zmax_sq_rule(thermal_n0: f64, cap: u32, margin: f64) -> f64 {
    thermal_n0.max(cap as f64 / 2.0) + margin * (cap as f64).sqrt()
}

/// Quadrature on the disc `|z|² ≤ Z_max²` for the measure `π⁻¹dx dy`.
/// Node `r·M + a` sits at radius `√s_r` and angle `2πa/M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub radius_sq: f64,
    pub radial: Vec<f64>,
    /// Weight of each radial node after the angular average (sums to `Z_max²`).
    pub radial_weights: Vec<f64>,
    pub angular: usize,
    pub scheme: String,
}

impl QuadratureGrid {
    pub fn disc(radius_sq: f64, spec: &GridSpec) -> Result<Self> {
        if !(radius_sq > 0.0) || spec.radial_nodes_per_panel == 0 || spec.angular_nodes == 0 {
            return Err(Error::Domain(format!(
                "invalid disc grid: Z_max²={radius_sq}, {spec:?}"
            )));
        }
        let panels = (radius_sq / spec.panel_width).ceil().max(1.0) as usize;
        let width = radius_sq / panels as f64;
        let rule = GaussLegendre::new(
            NonZeroUsize::new(spec.radial_nodes_per_panel).expect("nonzero node count"),
        );
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(panels * spec.radial_nodes_per_panel);
        for p in 0..panels {
            let a = p as f64 * width;
            for &(x, w) in rule.as_node_weight_pairs() {
                pairs.push((a + 0.5 * width * (x + 1.0), 0.5 * width * w));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (radial, radial_weights) = pairs.into_iter().unzip();
        Ok(Self {
            radius_sq,
            radial,
            radial_weights,
            angular: spec.angular_nodes,
            scheme: format!(
                "gauss-legendre(s) {}x{} panels, trapezoid(theta) {}",
                panels, spec.radial_nodes_per_panel, spec.angular_nodes
            ),
        })
    }

    pub fn len(&self) -> usize {
        self.radial.len() * self.angular
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn angle(&self, a: usize) -> f64 {
        2.0 * PI * a as f64 / self.angular as f64
    }

    pub fn node(&self, i: usize) -> C64 {
        let (r, a) = (i / self.angular, i % self.angular);
        C64::from_polar(self.radial[r].sqrt(), self.angle(a))
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.radial_weights[i / self.angular] / self.angular as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = (C64, f64)> + '_ {
        (0..self.len()).map(|i| (self.node(i), self.weight(i)))
    }

    /// Sum of all weights; equals `Z_max²` up to rounding.
    pub fn total_weight(&self) -> f64 {
        self.radial_weights.iter().sum()
    }
}

/// Coefficients `e^{−s} s^{(m+n)/2}/√(m!n!)` of `⟨m|z⟩⟨z|n⟩` at `|z|² = s`,
/// stripped of the phase `e^{i(n−m)θ}`.
fn radial_kernel(s: f64, cap: usize, lf: &[f64]) -> Vec<f64> {
    // returns the vector v_n = e^{−s/2} s^{n/2}/√n!, kernel is v_m v_n
    if s == 0.0 {
        let mut v = vec![0.0; cap + 1];
        v[0] = 1.0;
        return v;
    }
    let ls = s.ln();
    (0..=cap)
        .map(|n| (-0.5 * s + 0.5 * n as f64 * ls - 0.5 * lf[n]).exp())
        .collect()
}

/// Operator-norm deviation of `Σ_i w_i |z_i⟩⟨z_i|` from the identity on the
/// `cap`-truncated single-mode space.
pub fn identity_residual(cap: usize, grid: &QuadratureGrid) -> f64 {
    let lf = log_factorials(cap);
    let dim = cap + 1;
    let mut acc = vec![0.0; dim * dim];
    let m_ang = grid.angular as i64;
    for (r, &s) in grid.radial.iter().enumerate() {
        let v = radial_kernel(s, cap, &lf);
        let w = grid.radial_weights[r];
        for m in 0..dim {
            for n in 0..dim {
                // the trapezoid average of e^{i(n−m)θ} is 1 when M divides n−m
                if (n as i64 - m as i64).rem_euclid(m_ang) == 0 {
                    acc[m * dim + n] += w * v[m] * v[n];
                }
            }
        }
    }
    for k in 0..dim {
        acc[k * dim + k] -= 1.0;
    }
    let mat = ndarray::Array2::from_shape_vec((dim, dim), acc).expect("square");
    linalg::symmetric_eigenvalues(&mat)
        .into_iter()
        .fold(0.0, |worst, e| worst.max(e.abs()))
}

/// Evaluates `⟨z|ρ|z⟩` for a Hermitian single-mode matrix `rho` on every node
/// of `grid`, grouping the sum by angular harmonic at each radius.
pub fn husimi_on_grid(rho: &ndarray::Array2<C64>, grid: &QuadratureGrid) -> Vec<f64> {
    let cap = rho.nrows() - 1;
    let lf = log_factorials(cap);
    let mut out = Vec::with_capacity(grid.len());
    let phases: Vec<C64> = (0..grid.angular)
        .map(|a| C64::from_polar(1.0, grid.angle(a)))
        .collect();
    for &s in &grid.radial {
        let v = radial_kernel(s, cap, &lf);
        // h_d = Σ_m ρ_{m,m+d} v_m v_{m+d}, d ≥ 0; h_{−d} = conj(h_d)
        let harmonics: Vec<C64> = (0..=cap)
            .map(|d| (0..=cap - d).map(|m| rho[[m, m + d]] * (v[m] * v[m + d])).sum())
            .collect();
        for (a, _) in phases.iter().enumerate() {
            let mut val = harmonics[0].re;
            for (d, h) in harmonics.iter().enumerate().skip(1) {
                if h.norm() == 0.0 {
                    continue;
                }
                let ph = phases[(d * a) % grid.angular];
                val += 2.0 * (h * ph).re;
            }
            out.push(val);
        }
    }
    out
}

/// Partial inner product `Ψ(n_rest) = Σ_{n₀} conj(c_{n₀}(z)) Φ(n₀, n_rest)`
/// of a full-space vector with the coherent state of the first (slowest) mode.
pub fn partial_project(
    full_vector: &[C64],
    z: C64,
    basis: &FockBasis,
    reduced_basis: &FockBasis,
) -> Result<Vec<C64>> {
    check_factorization(basis, reduced_basis)?;
    if full_vector.len() != basis.dim() {
        return Err(Error::Structural(format!(
            "vector length {} does not match basis dimension {}",
            full_vector.len(),
            basis.dim()
        )));
    }
    let cap = basis.caps()[0] as usize;
    let coh = coherent_vector(z, cap);
    let rest = reduced_basis.dim();
    let mut out = vec![C64::new(0.0, 0.0); rest];
    for (n0, c) in coh.coeffs.iter().enumerate() {
        let cc = c.conj();
        if cc.norm() == 0.0 {
            continue;
        }
        let row = &full_vector[n0 * rest..(n0 + 1) * rest];
        for (o, &phi) in out.iter_mut().zip(row) {
            *o += cc * phi;
        }
    }
    Ok(out)
}

/// Verifies `basis = (first mode) ⊗ reduced_basis` with the first mode slowest.
pub fn check_factorization(basis: &FockBasis, reduced_basis: &FockBasis) -> Result<()> {
    let ok = basis.num_modes() == reduced_basis.num_modes() + 1
        && basis.modes()[1..] == *reduced_basis.modes()
        && basis.caps()[1..] == *reduced_basis.caps();
    if ok {
        Ok(())
    } else {
        Err(Error::Structural(
            "basis is not (substituted mode) ⊗ reduced basis with the substituted mode first".into(),
        ))
    }
}
