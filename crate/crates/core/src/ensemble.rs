//! Grand-canonical partition functions of the full model and of its
//! coherent-state substitutes, the peak of the substituted trace, the
//! coherent-state weight of the Gibbs state and condensate observables.
//!
//! Substituted traces are integrated on [`QuadratureGrid`]s, one per
//! substituted mode, combined as a product grid. When the reduced operator
//! is gauge covariant its non-scalar part is diagonalised once per radial
//! tuple and the scalar part is added node by node.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::coherent::{husimi_on_grid, poisson_lower_cdf, zmax_sq_rule, GridSpec, QuadratureGrid};
use crate::error::{Error, Result};
use crate::fock::{FockBasis, ModeId, C64};
use crate::linalg::logsumexp;
use crate::model::{grand_hamiltonian, EnsembleParams, ReducedHamiltonian, SymbolKind, TruncatedModel};
use crate::spectrum::{Spectrum, SpectrumCache};

/// Fraction of the integral allowed on the outermost radial ring.
pub const BOUNDARY_FRACTION_LIMIT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Lower,
    Upper,
    Peak,
}

impl From<SymbolKind> for Variant {
    fn from(k: SymbolKind) -> Self {
        match k {
            SymbolKind::Lower => Variant::Lower,
            SymbolKind::Upper => Variant::Upper,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionValue {
    pub log_value: f64,
    pub beta: f64,
    pub volume: f64,
    pub variant: Variant,
}

impl PartitionValue {
    pub fn pressure(&self) -> f64 {
        self.log_value / (self.beta * self.volume)
    }
}

/// Numerical settings shared by the ensemble routines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub grid: GridSpec,
    /// Per-mode grid for product grids over two substituted modes.
    pub multimode_grid: GridSpec,
    pub zmax_margin: f64,
    pub coarse_points: usize,
    pub search_tolerance: f64,
    pub fd_step: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            multimode_grid: GridSpec {
                radial_nodes_per_panel: 16,
                panel_width: 16.0,
                angular_nodes: 32,
            },
            zmax_margin: 12.0,
            coarse_points: 121,
            search_tolerance: 1e-6,
            fd_step: 1e-4,
        }
    }
}

fn check_beta(params: &EnsembleParams) -> Result<()> {
    if !(params.beta > 0.0 && params.beta.is_finite()) {
        return Err(Error::Domain(format!("β = {} must be positive", params.beta)));
    }
    Ok(())
}

/// Diagonalisation of the full `H_{μ,λ}` on the basis with the zero mode
/// first.
#[derive(Clone, Debug)]
pub struct FullEnsemble {
    pub basis: FockBasis,
    pub spectrum: Arc<Spectrum>,
    pub params: EnsembleParams,
    pub volume: f64,
}

impl FullEnsemble {
    pub fn new(cache: &SpectrumCache, model: &TruncatedModel, params: &EnsembleParams) -> Result<Self> {
        check_beta(params)?;
        let basis = model.full_basis()?;
        let h = grand_hamiltonian(&model.spec, params, &basis)?;
        let spectrum = cache.spectrum(&h, true)?;
        Ok(Self {
            basis,
            spectrum,
            params: *params,
            volume: model.volume(),
        })
    }

    pub fn log_xi(&self) -> f64 {
        self.spectrum.log_trace_exp(self.params.beta)
    }

    pub fn partition(&self) -> PartitionValue {
        PartitionValue {
            log_value: self.log_xi(),
            beta: self.params.beta,
            volume: self.volume,
            variant: Variant::Full,
        }
    }

    /// Normalised Boltzmann weights per block, aligned with the block values.
    fn weights(&self) -> Vec<Vec<f64>> {
        let beta = self.params.beta;
        let e0 = self.spectrum.ground_energy();
        let raw: Vec<Vec<f64>> = self
            .spectrum
            .blocks
            .iter()
            .map(|b| b.values.iter().map(|&e| (-beta * (e - e0)).exp()).collect())
            .collect();
        let z: f64 = raw.iter().flatten().sum();
        raw.into_iter()
            .map(|v| v.into_iter().map(|w| w / z).collect())
            .collect()
    }

    /// Reduced density matrix of the zero mode, `Tr′ e^{−βH}/Ξ`.
    pub fn zero_mode_density(&self) -> Array2<C64> {
        let cap = self.basis.caps()[0] as usize;
        let rest = self.basis.dim() / (cap + 1);
        let mut rho = Array2::<C64>::zeros((cap + 1, cap + 1));
        let weights = self.weights();
        for (block, w) in self.spectrum.blocks.iter().zip(&weights) {
            let vecs = block.vectors.as_ref().expect("full spectrum stores vectors");
            let mut groups: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
            for (row, &i) in block.indices.iter().enumerate() {
                groups.entry(i % rest).or_default().push((row, i / rest));
            }
            let cols: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 1e-300).collect();
            for members in groups.values() {
                for &(ra, na) in members {
                    for &(rb, nb) in members {
                        if nb < na {
                            continue;
                        }
                        let acc: C64 = cols
                            .iter()
                            .map(|&j| vecs.get(ra, j) * vecs.get(rb, j).conj() * w[j])
                            .sum();
                        rho[[na, nb]] += acc;
                        if na != nb {
                            rho[[nb, na]] += acc.conj();
                        }
                    }
                }
            }
        }
        rho
    }

    /// Thermal occupation distribution of the mode at basis position `pos`.
    pub fn occupation_distribution(&self, pos: usize) -> Vec<f64> {
        let cap = self.basis.caps()[pos] as usize;
        let mut dist = vec![0.0; cap + 1];
        let weights = self.weights();
        for (block, w) in self.spectrum.blocks.iter().zip(&weights) {
            let vecs = block.vectors.as_ref().expect("full spectrum stores vectors");
            for (row, &i) in block.indices.iter().enumerate() {
                let n = self.basis.occupation(i, pos) as usize;
                dist[n] += w
                    .iter()
                    .enumerate()
                    .map(|(j, wj)| wj * vecs.get(row, j).norm_sqr())
                    .sum::<f64>();
            }
        }
        dist
    }

    /// Estimated relative Boltzmann mass beyond the caps of the listed mode
    /// positions: the population at the cap extrapolated geometrically with
    /// the ratio of the last two populations.
    pub fn cap_tail(&self, positions: &[usize]) -> f64 {
        positions
            .iter()
            .map(|&p| geometric_tail(&self.occupation_distribution(p)))
            .sum()
    }
}

/// Relative population below which eigenvector round-off dominates and the
/// ratio of neighbouring populations carries no information.
pub const POPULATION_FLOOR: f64 = 1e-24;

/// `p_cap·r/(1−r)` with `r = p_cap/p_{cap−1}`; infinite when `r ≥ 1`. When
/// both populations sit below [`POPULATION_FLOOR`] the floor is returned.
pub fn geometric_tail(dist: &[f64]) -> f64 {
    let n = dist.len();
    let last = dist[n - 1].max(0.0);
    if last == 0.0 {
        return 0.0;
    }
    let floor = POPULATION_FLOOR * dist.iter().map(|p| p.max(0.0)).sum::<f64>();
    if n >= 2 && last <= floor && dist[n - 2] <= floor {
        return floor;
    }
    let prev = if n >= 2 { dist[n - 2].max(0.0) } else { 0.0 };
    if prev <= last {
        return f64::INFINITY;
    }
    let r = last / prev;
    last * r / (1.0 - r)
}

pub fn xi_full(cache: &SpectrumCache, model: &TruncatedModel, params: &EnsembleParams) -> Result<PartitionValue> {
    Ok(FullEnsemble::new(cache, model, params)?.partition())
}

/// `log Tr e^{−βH′(x)}` at a real zero-mode amplitude `x`.
fn log_trace_at(cache: &SpectrumCache, red: &ReducedHamiltonian, beta: f64, z: &[C64]) -> Result<f64> {
    let op = red.operator_part(z);
    let spec = cache.spectrum(&op, false)?;
    Ok(spec.log_trace_exp(beta) - beta * red.scalar_part(z).re)
}

/// Node values `log Tr e^{−βH(z)}` of a substituted trace on a product grid.
#[derive(Clone, Debug)]
pub struct SubstitutedIntegral {
    pub kind: SymbolKind,
    pub grids: Vec<QuadratureGrid>,
    /// Indexed with the first substituted mode slowest.
    pub log_traces: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub partition: PartitionValue,
    /// Share of the integral carried by nodes on an outermost radial ring.
    pub boundary_fraction: f64,
    pub radial_reduction: bool,
}

impl SubstitutedIntegral {
    pub fn log_value(&self) -> f64 {
        self.partition.log_value
    }

    /// Node `i` as amplitudes per substituted mode.
    pub fn node(&self, mut i: usize) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.grids.len()];
        for (j, g) in self.grids.iter().enumerate().rev() {
            out[j] = g.node(i % g.len());
            i /= g.len();
        }
        out
    }

    /// Normalised weight `exp(log w_i + L_i − log Ξ)` of node `i`.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let lz = self.partition.log_value;
        self.log_traces
            .iter()
            .zip(&self.log_weights)
            .map(|(l, w)| (l + w - lz).exp())
            .collect()
    }
}

fn product_len(grids: &[QuadratureGrid]) -> usize {
    grids.iter().map(QuadratureGrid::len).product()
}

/// Evaluates the substituted partition function for the modes `modes`.
#[allow(clippy::too_many_arguments)]
pub fn substituted_integral(
    cache: &SpectrumCache,
    model: &TruncatedModel,
    params: &EnsembleParams,
    modes: &[ModeId],
    grids: &[QuadratureGrid],
    kind: SymbolKind,
) -> Result<SubstitutedIntegral> {
    check_beta(params)?;
    if modes.is_empty() || modes.len() != grids.len() {
        return Err(Error::Structural(format!(
            "{} substituted modes with {} grids",
            modes.len(),
            grids.len()
        )));
    }
    let reduced = model.reduced_basis(modes)?;
    let red = ReducedHamiltonian::build(&model.spec, params, modes, &reduced, kind)?;
    let beta = params.beta;
    let total = product_len(grids);
    let mut log_traces = Vec::with_capacity(total);
    let mut log_weights = Vec::with_capacity(total);
    let covariant = red.is_gauge_covariant();
    let mut radial_cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let m = grids.len();
    let mut idx = vec![0usize; m];
    for _ in 0..total {
        let z: Vec<C64> = grids.iter().zip(&idx).map(|(g, &i)| g.node(i)).collect();
        let lw: f64 = grids.iter().zip(&idx).map(|(g, &i)| g.weight(i).ln()).sum();
        let l = if covariant {
            let radial: Vec<usize> = grids.iter().zip(&idx).map(|(g, &i)| i / g.angular).collect();
            let op_part = match radial_cache.get(&radial) {
                Some(&v) => v,
                None => {
                    let zr: Vec<C64> = grids
                        .iter()
                        .zip(&radial)
                        .map(|(g, &r)| C64::new(g.radial[r].sqrt(), 0.0))
                        .collect();
                    let spec = cache.spectrum(&red.operator_part(&zr), false)?;
                    let v = spec.log_trace_exp(beta);
                    radial_cache.insert(radial, v);
                    v
                }
            };
            op_part - beta * red.scalar_part(&z).re
        } else {
            log_trace_at(cache, &red, beta, &z)?
        };
        log_traces.push(l);
        log_weights.push(lw);
        for j in (0..m).rev() {
            idx[j] += 1;
            if idx[j] < grids[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
    let terms: Vec<f64> = log_traces.iter().zip(&log_weights).map(|(a, b)| a + b).collect();
    let log_value = logsumexp(&terms);
    if !log_value.is_finite() {
        return Err(Error::Numerical(format!("substituted trace is not finite: {log_value}")));
    }
    let mut boundary = Vec::new();
    for (i, t) in terms.iter().enumerate() {
        let mut rest = i;
        let mut on_ring = false;
        for g in grids.iter().rev() {
            let local = rest % g.len();
            rest /= g.len();
            on_ring |= local / g.angular == g.radial.len() - 1;
        }
        if on_ring {
            boundary.push(*t);
        }
    }
    let boundary_fraction = (logsumexp(&boundary) - log_value).exp();
    Ok(SubstitutedIntegral {
        kind,
        grids: grids.to_vec(),
        log_traces,
        log_weights,
        partition: PartitionValue {
            log_value,
            beta,
            volume: model.volume(),
            variant: kind.into(),
        },
        boundary_fraction,
        radial_reduction: covariant,
    })
}

/// As [`substituted_integral`], failing with a coverage error when the
/// outermost ring carries more than [`BOUNDARY_FRACTION_LIMIT`].
pub fn xi_substituted(
    cache: &SpectrumCache,
    model: &TruncatedModel,
    params: &EnsembleParams,
    modes: &[ModeId],
    grids: &[QuadratureGrid],
    kind: SymbolKind,
) -> Result<PartitionValue> {
    let res = covered(substituted_integral(cache, model, params, modes, grids, kind)?)?;
    Ok(res.partition)
}

/// Rejects an integral whose boundary ring is not negligible.
pub fn covered(res: SubstitutedIntegral) -> Result<SubstitutedIntegral> {
    if res.boundary_fraction > BOUNDARY_FRACTION_LIMIT {
        return Err(Error::Coverage(format!(
            "outermost ring carries {:.3e} of the {:?} integral; enlarge Z_max (Z_max² = {})",
            res.boundary_fraction,
            res.kind,
            res.grids.iter().map(|g| g.radius_sq.to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(res)
}

/// Location of the zero-mode Poisson peak of the lower-symbol trace along
/// the real axis, used to centre the integration disc.
pub fn thermal_n0_estimate(
    cache: &SpectrumCache,
    model: &TruncatedModel,
    params: &EnsembleParams,
    numerics: &Numerics,
) -> Result<f64> {
    let zero = model.spec.zero_mode().clone();
    let reduced = model.reduced_basis(std::slice::from_ref(&zero))?;
    let red = ReducedHamiltonian::build(&model.spec, params, &[zero], &reduced, SymbolKind::Lower)?;
    let x0 = (model.zero_cap() as f64).sqrt();
    let n = numerics.coarse_points.max(3);
    let lo = if params.lambda != 0.0 { -x0 } else { 0.0 };
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..n {
        let x = lo + (x0 - lo) * k as f64 / (n - 1) as f64;
        let f = log_trace_at(cache, &red, params.beta, &[C64::new(x, 0.0)])?;
        if f > best.0 {
            best = (f, x);
        }
    }
    Ok(best.1 * best.1)
}

/// Disc grid for one substituted mode: `Z_max²` from the cap and the
/// thermal estimate, and at least `cap + 2` angular nodes so that the
/// trapezoid rule resolves every harmonic of the truncated mode.
pub fn mode_grid(cap: u32, n_est: f64, spec: &GridSpec, margin: f64) -> Result<QuadratureGrid> {
    let spec = GridSpec {
        angular_nodes: spec.angular_nodes.max(cap as usize + 2),
        ..*spec
    };
    QuadratureGrid::disc(zmax_sq_rule(n_est, cap, margin), &spec)
}

/// Zero-mode grid for `model` at `params`.
pub fn zero_mode_grid(
    cache: &SpectrumCache,
    model: &TruncatedModel,
    params: &EnsembleParams,
    numerics: &Numerics,
    spec: &GridSpec,
) -> Result<QuadratureGrid> {
    let n_est = thermal_n0_estimate(cache, model, params, numerics)?;
    mode_grid(model.zero_cap(), n_est, spec, numerics.zmax_margin)
}

/// Grids for each substituted mode: the zero mode is centred on the thermal
/// estimate, other modes use the cap rule alone.
pub fn plan_grids(
    cache: &SpectrumCache,
    model: &TruncatedModel,
    params: &EnsembleParams,
    modes: &[ModeId],
    numerics: &Numerics,
    spec: &GridSpec,
) -> Result<Vec<QuadratureGrid>> {
    modes
        .iter()
        .map(|m| {
            let cap = model.cap(m)?;
            if m.is_zero() {
                zero_mode_grid(cache, model, params, numerics, spec)
            } else {
                mode_grid(cap, 0.0, spec, numerics.zmax_margin)
            }
        })
        .collect()
}

/// Search settings for the peak of the substituted trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub coarse_points: usize,
    pub tolerance: f64,
    /// Squared half-length of the search segment.
    pub radius_sq: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakValue {
    pub z_max: C64,
    pub partition: PartitionValue,
}

/// `max_z log Tr e^{−βH(z)}` over the zero-mode amplitude. The search runs on
/// the real segment `[−Z, Z]` when `λ ≠ 0` and on the ray `[0, Z]` when
/// `λ = 0`; a coarse scan is refined by golden-section search.
pub fn p_max(
    cache: &SpectrumCache,
    model: &TruncatedModel,
    params: &EnsembleParams,
    kind: SymbolKind,
    search: &SearchConfig,
) -> Result<PeakValue> {
    check_beta(params)?;
    let zero = model.spec.zero_mode().clone();
    let reduced = model.reduced_basis(std::slice::from_ref(&zero))?;
    let red = ReducedHamiltonian::build(&model.spec, params, &[zero], &reduced, kind)?;
    let f = |x: f64| log_trace_at(cache, &red, params.beta, &[C64::new(x, 0.0)]);
    let zr = search.radius_sq.sqrt();
    let lo = if params.lambda != 0.0 { -zr } else { 0.0 };
    let n = search.coarse_points.max(5);
    let xs: Vec<f64> = (0..n).map(|k| lo + (zr - lo) * k as f64 / (n - 1) as f64).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| f(x)).collect::<Result<_>>()?;
    let mut best = 0;
    for k in 1..n {
        let better = vals[k] > vals[best] || (vals[k] == vals[best] && xs[best] < 0.0 && xs[k] >= 0.0);
        if better {
            best = k;
        }
    }
    if best == n - 1 || (params.lambda != 0.0 && best == 0) {
        return Err(Error::Coverage(format!(
            "peak of the {kind:?} trace at the search boundary x = {}; enlarge the search radius",
            xs[best]
        )));
    }
    let (mut a, mut b) = (xs[best.saturating_sub(1)], xs[(best + 1).min(n - 1)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > search.tolerance {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    let mut x = 0.5 * (a + b);
    let mut fx = f(x)?;
    if vals[best] > fx {
        x = xs[best];
        fx = vals[best];
    }
    if params.lambda == 0.0 && x.abs() <= search.tolerance && f(0.0)? >= fx {
        x = 0.0;
        fx = f(0.0)?;
    }
    Ok(PeakValue {
        z_max: C64::new(x, 0.0),
        partition: PartitionValue {
            log_value: fx,
            beta: params.beta,
            volume: model.volume(),
            variant: Variant::Peak,
        },
    })
}

/// Source of a coherent-state weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Full,
    Upper,
}

/// Coherent-state weight on a grid with its first moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightField {
    pub source: WeightSource,
    pub grid: QuadratureGrid,
    /// Normalised so that `Σ w_i W_i = 1`.
    pub values: Vec<f64>,
    /// `Σ w_i W_i` before normalisation.
    pub raw_normalization: f64,
    pub mean: C64,
    pub second: f64,
    pub fourth: f64,
    pub volume: f64,
}

impl WeightField {
    fn from_values(source: WeightSource, grid: QuadratureGrid, raw: Vec<f64>, volume: f64) -> Result<Self> {
        if let Some(bad) = raw.iter().find(|&&v| v < -1e-12) {
            return Err(Error::Numerical(format!("negative coherent-state weight {bad:e}")));
        }
        let norm: f64 = (0..grid.len()).map(|i| grid.weight(i) * raw[i]).sum();
        let values: Vec<f64> = raw.iter().map(|v| v.max(0.0) / norm).collect();
        let (mut mean, mut second, mut fourth) = (C64::new(0.0, 0.0), 0.0, 0.0);
        for (i, &w) in values.iter().enumerate() {
            let (z, q) = (grid.node(i), grid.weight(i) * w);
            let s = z.norm_sqr();
            mean += z * q;
            second += s * q;
            fourth += s * s * q;
        }
        Ok(Self {
            source,
            grid,
            values,
            raw_normalization: norm,
            mean,
            second,
            fourth,
            volume,
        })
    }

    /// Mean of `ζ = z/√V`.
    pub fn zeta_mean(&self) -> C64 {
        self.mean / self.volume.sqrt()
    }

    /// `⟨|ζ − ⟨ζ⟩|²⟩`.
    pub fn zeta_variance(&self) -> f64 {
        (self.second - self.mean.norm_sqr()).max(0.0) / self.volume
    }

    /// Spread of the weight over angles at fixed radius: the largest
    /// deviation from the ring average, relative to the largest value.
    pub fn angular_spread(&self) -> f64 {
        let m = self.grid.angular;
        let top = self.values.iter().copied().fold(0.0, f64::max);
        let mut worst: f64 = 0.0;
        for ring in self.values.chunks(m) {
            let avg = ring.iter().sum::<f64>() / m as f64;
            for v in ring {
                worst = worst.max((v - avg).abs());
            }
        }
        if top > 0.0 {
            worst / top
        } else {
            0.0
        }
    }
}

/// Coherent-state weight of the zero mode. The full source evaluates
/// `⟨z|Tr′ e^{−βH}|z⟩/Ξ`; the upper source uses `Tr′ e^{−βH″(z)}/Ξ″`.
pub fn weight(
    cache: &SpectrumCache,
    model: &TruncatedModel,
    params: &EnsembleParams,
    grid: &QuadratureGrid,
    source: WeightSource,
) -> Result<WeightField> {
    match source {
        WeightSource::Full => {
            let full = FullEnsemble::new(cache, model, params)?;
            weight_from_full(&full, grid)
        }
        WeightSource::Upper => {
            let zero = model.spec.zero_mode().clone();
            let res = covered(substituted_integral(
                cache,
                model,
                params,
                &[zero],
                std::slice::from_ref(grid),
                SymbolKind::Upper,
            )?)?;
            weight_from_integral(&res, model.volume())
        }
    }
}

pub fn weight_from_full(full: &FullEnsemble, grid: &QuadratureGrid) -> Result<WeightField> {
    let rho = full.zero_mode_density();
    let raw = husimi_on_grid(&rho, grid);
    WeightField::from_values(WeightSource::Full, grid.clone(), raw, full.volume)
}

pub fn weight_from_integral(res: &SubstitutedIntegral, volume: f64) -> Result<WeightField> {
    if res.grids.len() != 1 {
        return Err(Error::Structural("weights need a single substituted mode".into()));
    }
    let g = &res.grids[0];
    let lz = res.log_value();
    let raw: Vec<f64> = res.log_traces.iter().map(|l| (l - lz).exp()).collect();
    WeightField::from_values(WeightSource::Upper, g.clone(), raw, volume)
}

/// Mass of `⟨z|ρ₀|z⟩` outside the disc `|z|² ≤ S`:
/// `Σ_n ρ_nn P(Poisson(S) ≤ n)`.
pub fn coherent_tail(rho: &Array2<C64>, radius_sq: f64) -> f64 {
    (0..rho.nrows())
        .map(|n| rho[[n, n]].re.max(0.0) * poisson_lower_cdf(radius_sq, n))
        .sum()
}

/// Finite-difference estimate of `ρ″ = (βV)⁻¹ ∂ log Ξ″/∂μ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    /// Richardson-extrapolated value.
    pub value: f64,
    pub step: f64,
    /// `|ρ(h) − ρ(h/2)|`.
    pub error: f64,
}

pub fn density_upper(
    cache: &SpectrumCache,
    model: &TruncatedModel,
    params: &EnsembleParams,
    grid: &QuadratureGrid,
    fd_step: f64,
) -> Result<DensityEstimate> {
    let h = fd_step * params.mu.abs().max(1.0);
    if !(h > 0.0) || params.mu + h / 2.0 == params.mu || h < 1e-12 {
        return Err(Error::Domain(format!("finite-difference step {h:e} underflows at μ = {}", params.mu)));
    }
    let zero = [model.spec.zero_mode().clone()];
    let grids = std::slice::from_ref(grid);
    let log_xi = |mu: f64| -> Result<f64> {
        Ok(substituted_integral(cache, model, &params.with_mu(mu), &zero, grids, SymbolKind::Upper)?.log_value())
    };
    let scale = params.beta * model.volume();
    let central = |step: f64| -> Result<f64> {
        Ok((log_xi(params.mu + step)? - log_xi(params.mu - step)?) / (2.0 * step * scale))
    };
    let (r1, r2) = (central(h)?, central(h / 2.0)?);
    Ok(DensityEstimate {
        value: r2 + (r2 - r1) / 3.0,
        step: h,
        error: (r1 - r2).abs(),
    })
}

/// Direct and weight-integral routes to `⟨n₀⟩` and `⟨a₀⟩`, with the peak
/// location and `ρ″`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondensateStats {
    pub n0_direct: f64,
    pub a0_direct: C64,
    pub n0_weight: f64,
    pub a0_weight: C64,
    pub z_max: C64,
    pub rho_upper: f64,
    pub volume: f64,
    /// `Σ w_i W_i` of the full weight before normalisation.
    pub weight_normalization: f64,
    pub coherent_tail: f64,
}

impl CondensateStats {
    /// Largest pairwise difference of `⟨n₀⟩/V`, `|⟨a₀⟩|²/V`, `|z_max|²/V`.
    pub fn spread(&self) -> f64 {
        let q = [
            self.n0_direct / self.volume,
            self.a0_direct.norm_sqr() / self.volume,
            self.z_max.norm_sqr() / self.volume,
        ];
        let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn cauchy_schwarz_margin(&self) -> f64 {
        self.n0_direct - self.a0_direct.norm_sqr()
    }
}

/// `⟨n₀⟩` and `⟨a₀⟩` from the zero-mode density matrix.
pub fn zero_mode_moments(rho: &Array2<C64>) -> (f64, C64) {
    let cap = rho.nrows() - 1;
    let n0: f64 = (0..=cap).map(|n| n as f64 * rho[[n, n]].re).sum();
    let a0: C64 = (1..=cap).map(|n| rho[[n, n - 1]] * (n as f64).sqrt()).sum();
    (n0, a0)
}

pub fn condensate_stats(
    cache: &SpectrumCache,
    model: &TruncatedModel,
    params: &EnsembleParams,
    grid: &QuadratureGrid,
    numerics: &Numerics,
) -> Result<CondensateStats> {
    let full = FullEnsemble::new(cache, model, params)?;
    let rho = full.zero_mode_density();
    let (n0_direct, a0_direct) = zero_mode_moments(&rho);
    let w = weight_from_full(&full, grid)?;
    let search = SearchConfig {
        coarse_points: numerics.coarse_points,
        tolerance: numerics.search_tolerance,
        radius_sq: grid.radius_sq,
    };
    let peak = p_max(cache, model, params, SymbolKind::Lower, &search)?;
    let rho_upper = density_upper(cache, model, params, grid, numerics.fd_step)?;
    Ok(CondensateStats {
        n0_direct,
        a0_direct,
        n0_weight: w.second - 1.0,
        a0_weight: w.mean,
        z_max: peak.z_max,
        rho_upper: rho_upper.value,
        volume: model.volume(),
        weight_normalization: w.raw_normalization,
        coherent_tail: coherent_tail(&rho, grid.radius_sq),
    })
}
