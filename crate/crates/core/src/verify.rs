//! Budgeted numerical checks of the substitution inequalities and of the
//! finite-volume trends of pressures, condensate observables and weights.
//!
//! A check passes when its raw gap is at least `−budget.total`. Budgets are
//! computed from the run (quadrature differences, cap populations,
//! finite-difference disagreement) and never tuned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coherent::{identity_residual, GridSpec, QuadratureGrid};
use crate::ensemble::{
    condensate_stats, covered, density_upper, p_max, plan_grids, substituted_integral, weight_from_full,
    weight_from_integral, zero_mode_grid, CondensateStats, FullEnsemble, Numerics,
    SearchConfig, SubstitutedIntegral,
};
use crate::error::{Error, Result};
use crate::fock::ModeId;
use crate::model::{delta_bound, EnsembleParams, ModelSpec, SubstitutionPlan, SymbolKind, TruncatedModel};
use crate::spectrum::SpectrumCache;

/// Relative slack on the multimode bound.
pub const MULTIMODE_TOLERANCE: f64 = 1e-6;

/// Largest tolerated spread ratio between the last and first volume.
pub const COLLAPSE_RATIO: f64 = 0.25;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub quad_residual: f64,
    pub coherent_tail: f64,
    pub cap_tail: f64,
    pub fd_step: f64,
    pub total: f64,
}

impl ErrorBudget {
    pub fn new(quad_residual: f64, coherent_tail: f64, cap_tail: f64, fd_step: f64) -> Self {
        let (q, c, t, f) = (quad_residual.abs(), coherent_tail.abs(), cap_tail.abs(), fd_step.abs());
        Self {
            quad_residual: q,
            coherent_tail: c,
            cap_tail: t,
            fd_step: f,
            total: q + c + t + f,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    Incomplete,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Incomplete => "INCOMPLETE",
        })
    }
}

/// Parameter point of a report. Family checks carry the largest volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub beta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub volume: f64,
}

impl Point {
    pub fn new(params: &EnsembleParams, volume: f64) -> Self {
        Self {
            beta: params.beta,
            mu: params.mu,
            lambda: params.lambda,
            volume,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check: String,
    pub inputs_hash: String,
    pub point: Point,
    pub raw_gap: f64,
    pub budget: ErrorBudget,
    pub verdict: Verdict,
    pub payload: BTreeMap<String, f64>,
    pub message: Option<String>,
}

impl VerificationReport {
    pub fn new(
        check: &str,
        inputs_hash: String,
        point: Point,
        raw_gap: f64,
        budget: ErrorBudget,
        payload: BTreeMap<String, f64>,
    ) -> Self {
        let (verdict, message) = if !budget.is_finite() {
            (Verdict::Incomplete, Some("error budget is not finite (a cap is too small)".to_string()))
        } else if !raw_gap.is_finite() {
            (Verdict::Incomplete, Some("raw gap is not finite".to_string()))
        } else if raw_gap >= -budget.total {
            (Verdict::Pass, None)
        } else {
            (Verdict::Fail, None)
        };
        let budget = if budget.is_finite() {
            budget
        } else {
            ErrorBudget::new(
                finite_or(budget.quad_residual),
                finite_or(budget.coherent_tail),
                finite_or(budget.cap_tail),
                finite_or(budget.fd_step),
            )
        };
        let payload = payload.into_iter().map(|(k, v)| (k, finite_or(v))).collect();
        Self {
            check: check.to_string(),
            inputs_hash,
            point,
            raw_gap: finite_or(raw_gap),
            budget,
            verdict,
            payload,
            message,
        }
    }

    /// Report for a check that could not be carried out.
    pub fn incomplete(check: &str, inputs_hash: String, point: Point, error: &Error) -> Self {
        Self {
            check: check.to_string(),
            inputs_hash,
            point,
            raw_gap: 0.0,
            budget: ErrorBudget::default(),
            verdict: Verdict::Incomplete,
            payload: BTreeMap::new(),
            message: Some(error.to_string()),
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// Non-finite values are stored as the largest finite value of their sign so
/// that reports stay valid JSON.
fn finite_or(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else if v.is_nan() {
        0.0
    } else {
        v.signum() * f64::MAX
    }
}

/// SHA-256 of the canonical JSON encoding of `value`.
pub fn inputs_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serialisable inputs");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct HashInputs<'a, E: Serialize> {
    check: &'a str,
    models: &'a [&'a TruncatedModel],
    params: &'a [EnsembleParams],
    numerics: &'a Numerics,
    extra: E,
}

/// Spectrum cache and numerical settings shared by the checks.
pub struct Lab {
    pub cache: SpectrumCache,
    pub numerics: Numerics,
}

impl Lab {
    pub fn new(numerics: Numerics) -> Self {
        Self {
            cache: SpectrumCache::in_memory(),
            numerics,
        }
    }

    pub fn with_cache(cache: SpectrumCache, numerics: Numerics) -> Self {
        Self { cache, numerics }
    }

    fn hash<E: Serialize>(&self, check: &str, models: &[&TruncatedModel], params: &[EnsembleParams], extra: E) -> String {
        inputs_hash(&HashInputs {
            check,
            models,
            params,
            numerics: &self.numerics,
            extra,
        })
    }

    fn search(&self, radius_sq: f64) -> SearchConfig {
        SearchConfig {
            coarse_points: self.numerics.coarse_points,
            tolerance: self.numerics.search_tolerance,
            radius_sq,
        }
    }
}

/// Substituted integral on the fine zero-mode grid together with the
/// disagreement of the coarse rule on the same disc.
struct Integrated {
    fine: SubstitutedIntegral,
    quad_error: f64,
}

fn integrate(
    lab: &Lab,
    model: &TruncatedModel,
    params: &EnsembleParams,
    modes: &[ModeId],
    spec: &GridSpec,
    kind: SymbolKind,
) -> Result<Integrated> {
    let grids = plan_grids(&lab.cache, model, params, modes, &lab.numerics, spec)?;
    integrate_on(lab, model, params, modes, &grids, spec, kind)
}

fn integrate_on(
    lab: &Lab,
    model: &TruncatedModel,
    params: &EnsembleParams,
    modes: &[ModeId],
    grids: &[QuadratureGrid],
    spec: &GridSpec,
    kind: SymbolKind,
) -> Result<Integrated> {
    let fine = covered(substituted_integral(&lab.cache, model, params, modes, grids, kind)?)?;
    let coarse_grids: Vec<QuadratureGrid> = grids
        .iter()
        .map(|g| {
            let c = spec.coarsened();
            QuadratureGrid::disc(
                g.radius_sq,
                &GridSpec {
                    angular_nodes: c.angular_nodes.max(g.angular / 2).max(2),
                    ..c
                },
            )
        })
        .collect::<Result<_>>()?;
    let coarse = substituted_integral(&lab.cache, model, params, modes, &coarse_grids, kind)?;
    let quad_error = (fine.log_value() - coarse.log_value()).abs() + fine.boundary_fraction;
    Ok(Integrated { fine, quad_error })
}

fn zero(model: &TruncatedModel) -> Vec<ModeId> {
    vec![model.spec.zero_mode().clone()]
}

fn payload(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
    entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// `Ξ′ ≤ Ξ ≤ Ξ″` for the zero-mode substitution.
pub fn check_sandwich(lab: &Lab, model: &TruncatedModel, params: &EnsembleParams) -> Result<VerificationReport> {
    let hash = lab.hash("sandwich", &[model], &[*params], ());
    let full = FullEnsemble::new(&lab.cache, model, params)?;
    let modes = zero(model);
    let lo = integrate(lab, model, params, &modes, &lab.numerics.grid, SymbolKind::Lower)?;
    let up = integrate(lab, model, params, &modes, &lab.numerics.grid, SymbolKind::Upper)?;
    let lx = full.log_xi();
    let (l_lo, l_up) = (lo.fine.log_value(), up.fine.log_value());
    let gap_lower = lx - l_lo;
    let gap_upper = l_up - lx;
    let budget = ErrorBudget::new(lo.quad_error + up.quad_error, 0.0, full.cap_tail(&[0]), 0.0);
    let bv = params.beta * model.volume();
    let p = payload(&[
        ("log_xi", lx),
        ("log_xi_lower", l_lo),
        ("log_xi_upper", l_up),
        ("gap_lower", gap_lower),
        ("gap_upper", gap_upper),
        ("upper_minus_lower", l_up - l_lo),
        ("pressure", lx / bv),
        ("pressure_lower", l_lo / bv),
        ("pressure_upper", l_up / bv),
        ("zmax_sq", lo.fine.grids[0].radius_sq),
        ("boundary_fraction", lo.fine.boundary_fraction.max(up.fine.boundary_fraction)),
    ]);
    Ok(VerificationReport::new(
        "sandwich",
        hash,
        Point::new(params, model.volume()),
        gap_lower.min(gap_upper),
        budget,
        p,
    ))
}

/// `Ξ″(μ) ≤ Ξ′(μ + 2φ/V) e^{β(|μ| + φ/V)}`.
pub fn check_shift(lab: &Lab, model: &TruncatedModel, params: &EnsembleParams) -> Result<VerificationReport> {
    let hash = lab.hash("shift", &[model], &[*params], ());
    let v = model.volume();
    let phi = model.spec.phi;
    let shifted = params.with_mu(params.mu + 2.0 * phi / v);
    let modes = zero(model);
    let up = integrate(lab, model, params, &modes, &lab.numerics.grid, SymbolKind::Upper)?;
    let lo = integrate(lab, model, &shifted, &modes, &lab.numerics.grid, SymbolKind::Lower)?;
    let rhs = lo.fine.log_value() + params.beta * (params.mu.abs() + phi / v);
    let lhs = up.fine.log_value();
    let budget = ErrorBudget::new(lo.quad_error + up.quad_error, 0.0, 0.0, 0.0);
    let p = payload(&[
        ("log_xi_upper", lhs),
        ("log_xi_lower_shifted", lo.fine.log_value()),
        ("shifted_mu", shifted.mu),
        ("log_rhs", rhs),
    ]);
    Ok(VerificationReport::new("shift", hash, Point::new(params, v), rhs - lhs, budget, p))
}

/// `Ξ ≥ max_z Tr e^{−βH′(z)}`.
pub fn check_maxz(lab: &Lab, model: &TruncatedModel, params: &EnsembleParams) -> Result<VerificationReport> {
    let hash = lab.hash("maxz", &[model], &[*params], ());
    let full = FullEnsemble::new(&lab.cache, model, params)?;
    let grid = zero_mode_grid(&lab.cache, model, params, &lab.numerics, &lab.numerics.grid)?;
    let peak = p_max(&lab.cache, model, params, SymbolKind::Lower, &lab.search(grid.radius_sq))?;
    let lx = full.log_xi();
    let lm = peak.partition.log_value;
    let budget = ErrorBudget::new(0.0, 0.0, full.cap_tail(&[0]), 0.0);
    let bv = params.beta * model.volume();
    let p = payload(&[
        ("log_xi", lx),
        ("log_max_lower", lm),
        ("pressure", lx / bv),
        ("pressure_max", lm / bv),
        ("z_max_re", peak.z_max.re),
        ("z_max_im", peak.z_max.im),
    ]);
    Ok(VerificationReport::new("maxz", hash, Point::new(params, model.volume()), lx - lm, budget, p))
}

/// `Ξ″ ≤ 2[Vρ″ + 1] max_z Tr e^{−βH″(z)}`. The payload records the split
/// `ξ = 2⟨N′⟩″` of the integral into the disc `|z|² < ξ` and its outside,
/// and the gap of the bound with constant 4 that this split yields.
pub fn check_peak(lab: &Lab, model: &TruncatedModel, params: &EnsembleParams) -> Result<VerificationReport> {
    let hash = lab.hash("peak", &[model], &[*params], ());
    let v = model.volume();
    let modes = zero(model);
    let up = integrate(lab, model, params, &modes, &lab.numerics.grid, SymbolKind::Upper)?;
    let grid = up.fine.grids[0].clone();
    let rho = density_upper(&lab.cache, model, params, &grid, lab.numerics.fd_step)?;
    let peak = p_max(&lab.cache, model, params, SymbolKind::Upper, &lab.search(grid.radius_sq))?;
    let n_prime = v * rho.value + 1.0;
    let l_up = up.fine.log_value();
    let lm = peak.partition.log_value;
    let gap = (2.0 * n_prime).ln() + lm - l_up;
    // split of the integral at |z|² = ξ
    let xi = 2.0 * n_prime;
    let (mut inner, mut outer_moment) = (Vec::new(), Vec::new());
    for (i, (l, w)) in up.fine.log_traces.iter().zip(&up.fine.log_weights).enumerate() {
        let s = grid.node(i).norm_sqr();
        if s < xi {
            inner.push(l + w);
        } else {
            outer_moment.push(l + w + s.ln());
        }
    }
    let log_inner = crate::linalg::logsumexp(&inner);
    let log_outer = crate::linalg::logsumexp(&outer_moment) - xi.ln();
    let fd = v * rho.error / n_prime;
    let budget = ErrorBudget::new(up.quad_error, 0.0, 0.0, fd);
    let p = payload(&[
        ("log_xi_upper", l_up),
        ("log_max_upper", lm),
        ("rho_upper", rho.value),
        ("n_prime_upper", n_prime),
        ("split_xi", xi),
        ("log_split_inner", log_inner),
        ("log_split_inner_bound", xi.ln() + lm),
        ("log_split_outer", log_outer),
        ("gap_constant_4", (4.0 * n_prime).ln() + lm - l_up),
        ("z_max_re", peak.z_max.re),
    ]);
    Ok(VerificationReport::new("peak", hash, Point::new(params, v), gap, budget, p))
}

/// The four pressures of one model with their combined error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressurePoint {
    pub volume: f64,
    pub full: f64,
    pub lower: f64,
    pub upper: f64,
    pub max: f64,
    /// Error bound on each pressure.
    pub error: f64,
}

impl PressurePoint {
    pub fn spread(&self) -> f64 {
        let v = [self.full, self.lower, self.upper, self.max];
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn pressure_point(lab: &Lab, model: &TruncatedModel, params: &EnsembleParams) -> Result<PressurePoint> {
    let full = FullEnsemble::new(&lab.cache, model, params)?;
    let modes = zero(model);
    let lo = integrate(lab, model, params, &modes, &lab.numerics.grid, SymbolKind::Lower)?;
    let up = integrate(lab, model, params, &modes, &lab.numerics.grid, SymbolKind::Upper)?;
    let peak = p_max(&lab.cache, model, params, SymbolKind::Lower, &lab.search(lo.fine.grids[0].radius_sq))?;
    let bv = params.beta * model.volume();
    let err = (lo.quad_error + up.quad_error + full.cap_tail(&[0])) / bv;
    Ok(PressurePoint {
        volume: model.volume(),
        full: full.log_xi() / bv,
        lower: lo.fine.log_value() / bv,
        upper: up.fine.log_value() / bv,
        max: peak.partition.log_value / bv,
        error: err,
    })
}

/// Closed-form pressures of a non-interacting model with untruncated modes
/// at `μ < 0`: `Ξ = Ξ^>/(1 − e^{βμ})`, `Ξ′ = Ξ^>/(β|μ|)`, `Ξ″ = e^{−βμ}Ξ′`,
/// `max_z = Ξ^>`.
pub fn free_pressure_point(spec: &ModelSpec, params: &EnsembleParams) -> Result<PressurePoint> {
    if params.mu >= 0.0 || params.lambda != 0.0 {
        return Err(Error::Precondition("closed-form free family needs μ < 0 and λ = 0".into()));
    }
    let (b, mu) = (params.beta, params.mu);
    let log_rest: f64 = spec
        .modes
        .iter()
        .filter(|m| !m.is_zero())
        .map(|m| -(-(b * (spec.energy(m) - mu))).exp_m1().abs().ln())
        .sum();
    let bv = b * spec.volume();
    let lower = log_rest - (b * mu.abs()).ln();
    Ok(PressurePoint {
        volume: spec.volume(),
        full: (log_rest - (-(b * mu).exp_m1()).ln()) / bv,
        lower: lower / bv,
        upper: (lower - b * mu) / bv,
        max: log_rest / bv,
        error: 0.0,
    })
}

/// Spread of the four pressures is non-increasing along the family and the
/// last spread is at most a quarter of the first.
pub fn check_pressure_collapse_points(
    hash: String,
    params: &EnsembleParams,
    points: &[PressurePoint],
) -> Result<VerificationReport> {
    if points.len() < 3 {
        return Err(Error::Precondition(format!(
            "pressure collapse needs at least 3 volumes, got {}",
            points.len()
        )));
    }
    let spreads: Vec<f64> = points.iter().map(PressurePoint::spread).collect();
    let mut gap = f64::INFINITY;
    for w in spreads.windows(2) {
        gap = gap.min(w[0] - w[1]);
    }
    let ratio_gap = COLLAPSE_RATIO * spreads[0] - spreads[spreads.len() - 1];
    gap = gap.min(ratio_gap);
    let err = points.iter().map(|p| 4.0 * p.error).fold(0.0, f64::max);
    let mut p = BTreeMap::new();
    for (pt, s) in points.iter().zip(&spreads) {
        p.insert(format!("spread_v{}", pt.volume), *s);
        p.insert(format!("pressure_v{}", pt.volume), pt.full);
    }
    p.insert("spread_ratio".into(), spreads[spreads.len() - 1] / spreads[0]);
    let last = points[points.len() - 1].volume;
    Ok(VerificationReport::new(
        "collapse",
        hash,
        Point::new(params, last),
        gap,
        ErrorBudget::new(err, 0.0, 0.0, 0.0),
        p,
    ))
}

pub fn check_pressure_collapse(lab: &Lab, family: &[TruncatedModel], params: &EnsembleParams) -> Result<VerificationReport> {
    let refs: Vec<&TruncatedModel> = family.iter().collect();
    let hash = lab.hash("collapse", &refs, &[*params], ());
    if family.len() < 3 {
        return Err(Error::Precondition(format!(
            "pressure collapse needs at least 3 volumes, got {}",
            family.len()
        )));
    }
    let points: Vec<PressurePoint> = family
        .iter()
        .map(|m| pressure_point(lab, m, params))
        .collect::<Result<_>>()?;
    check_pressure_collapse_points(hash, params, &points)
}

/// Closed-form collapse check of a non-interacting family.
pub fn check_pressure_collapse_free(specs: &[ModelSpec], params: &EnsembleParams) -> Result<VerificationReport> {
    let hash = inputs_hash(&("collapse-free", specs, params));
    let points: Vec<PressurePoint> = specs
        .iter()
        .map(|s| free_pressure_point(s, params))
        .collect::<Result<_>>()?;
    let mut r = check_pressure_collapse_points(hash, params, &points)?;
    r.check = "collapse-free".into();
    Ok(r)
}

/// Condensate observables of one model at one `λ`, with their error budget.
pub fn condensate_point(lab: &Lab, model: &TruncatedModel, params: &EnsembleParams) -> Result<(CondensateStats, ErrorBudget)> {
    let grid = zero_mode_grid(&lab.cache, model, params, &lab.numerics, &lab.numerics.grid)?;
    let stats = condensate_stats(&lab.cache, model, params, &grid, &lab.numerics)?;
    let full = FullEnsemble::new(&lab.cache, model, params)?;
    let dens = density_upper(&lab.cache, model, params, &grid, lab.numerics.fd_step)?;
    let budget = ErrorBudget::new(
        identity_residual(model.zero_cap() as usize, &grid),
        stats.coherent_tail,
        full.cap_tail(&[0]),
        dens.error,
    );
    Ok((stats, budget))
}

/// Finite-volume surrogates of `⟨n₀⟩/V = |⟨a₀⟩|²/V = |z_max|²/V`.
pub fn check_condensate(
    lab: &Lab,
    family: &[TruncatedModel],
    params: &EnsembleParams,
    lambdas: &[f64],
) -> Result<VerificationReport> {
    let refs: Vec<&TruncatedModel> = family.iter().collect();
    let hash = lab.hash("condensate", &refs, &[*params], lambdas);
    if lambdas.len() < 4 || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Precondition(format!(
            "condensate check needs at least 4 positive λ values, got {lambdas:?}"
        )));
    }
    if family.len() < 2 {
        return Err(Error::Precondition("condensate check needs a volume family".into()));
    }
    let mut lams = lambdas.to_vec();
    lams.sort_by(f64::total_cmp);
    let mut p = BTreeMap::new();
    let mut cs_gap = f64::INFINITY;
    let mut budget_total = ErrorBudget::default();
    let mut spreads = Vec::new();
    let mut last_n0 = Vec::new();
    for model in family {
        let mut worst_spread: f64 = 0.0;
        last_n0.clear();
        for &lam in &lams {
            let (s, b) = condensate_point(lab, model, &params.with_lambda(lam))?;
            cs_gap = cs_gap.min(s.cauchy_schwarz_margin());
            worst_spread = worst_spread.max(s.spread());
            last_n0.push((s.n0_direct, b));
            budget_total = ErrorBudget::new(
                budget_total.quad_residual.max(b.quad_residual),
                budget_total.coherent_tail.max(b.coherent_tail),
                budget_total.cap_tail.max(b.cap_tail),
                budget_total.fd_step.max(b.fd_step),
            );
            let tag = format!("v{}_l{}", model.volume(), lam);
            p.insert(format!("n0_{tag}"), s.n0_direct);
            p.insert(format!("a0_{tag}"), s.a0_direct.re);
            p.insert(format!("n0_weight_{tag}"), s.n0_weight);
            p.insert(format!("zmax_{tag}"), s.z_max.re);
        }
        p.insert(format!("spread_v{}", model.volume()), worst_spread);
        spreads.push(worst_spread);
    }
    let mono_gap = last_n0.windows(2).map(|w| w[1].0 - w[0].0).fold(f64::INFINITY, f64::min);
    let shrink_gap = spreads.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
    p.insert("cauchy_schwarz_margin".into(), cs_gap);
    p.insert("monotonicity_margin".into(), mono_gap);
    p.insert("shrinkage_margin".into(), shrink_gap);
    let last = family[family.len() - 1].volume();
    Ok(VerificationReport::new(
        "condensate",
        hash,
        Point::new(params, last),
        cs_gap.min(mono_gap).min(shrink_gap),
        budget_total,
        p,
    ))
}

/// Moments in `ζ = z/√V` of the full and upper weights of one model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationPoint {
    pub volume: f64,
    pub mean_full: f64,
    pub mean_upper: f64,
    pub var_full: f64,
    pub var_upper: f64,
}

pub fn concentration_point(lab: &Lab, model: &TruncatedModel, params: &EnsembleParams) -> Result<(ConcentrationPoint, f64)> {
    let full = FullEnsemble::new(&lab.cache, model, params)?;
    let grid = zero_mode_grid(&lab.cache, model, params, &lab.numerics, &lab.numerics.grid)?;
    let wf = weight_from_full(&full, &grid)?;
    let up = covered(substituted_integral(
        &lab.cache,
        model,
        params,
        &zero(model),
        std::slice::from_ref(&grid),
        SymbolKind::Upper,
    )?)?;
    let wu = weight_from_integral(&up, model.volume())?;
    let resid = identity_residual(model.zero_cap() as usize, &grid);
    Ok((
        ConcentrationPoint {
            volume: model.volume(),
            mean_full: wf.zeta_mean().re,
            mean_upper: wu.zeta_mean().re,
            var_full: wf.zeta_variance(),
            var_upper: wu.zeta_variance(),
        },
        resid,
    ))
}

/// Variances of `W` and `W″` in `ζ` decrease along the family and their
/// means differ by less than the larger standard deviation.
pub fn check_concentration(lab: &Lab, family: &[TruncatedModel], params: &EnsembleParams) -> Result<VerificationReport> {
    let refs: Vec<&TruncatedModel> = family.iter().collect();
    let hash = lab.hash("concentration", &refs, &[*params], ());
    if params.lambda == 0.0 {
        return Err(Error::Precondition(
            "concentration needs λ ≠ 0; at λ = 0 the weight is spread over a ring".into(),
        ));
    }
    if family.len() < 2 {
        return Err(Error::Precondition("concentration needs a volume family".into()));
    }
    let mut pts = Vec::new();
    let mut resid: f64 = 0.0;
    for m in family {
        let (pt, r) = concentration_point(lab, m, params)?;
        resid = resid.max(r);
        pts.push(pt);
    }
    let mut gap = f64::INFINITY;
    let mut p = BTreeMap::new();
    for w in pts.windows(2) {
        gap = gap.min(w[0].var_full - w[1].var_full);
        gap = gap.min(w[0].var_upper - w[1].var_upper);
    }
    for pt in &pts {
        let sd = pt.var_full.max(pt.var_upper).sqrt();
        gap = gap.min(sd - (pt.mean_full - pt.mean_upper).abs());
        let v = pt.volume;
        p.insert(format!("mean_full_v{v}"), pt.mean_full);
        p.insert(format!("mean_upper_v{v}"), pt.mean_upper);
        p.insert(format!("var_full_v{v}"), pt.var_full);
        p.insert(format!("var_upper_v{v}"), pt.var_upper);
    }
    let last = family[family.len() - 1].volume();
    // moments of a normalised weight carry the resolution error of the grid
    let budget = ErrorBudget::new(resid, 0.0, 0.0, 0.0);
    Ok(VerificationReport::new("concentration", hash, Point::new(params, last), gap, budget, p))
}

/// Sandwich for a simultaneous substitution of up to two modes, with the
/// spread `log Ξ″ − log Ξ′` bounded by `β` times the bound on `|⟨δ⟩|` at
/// `⟨N′⟩″`.
pub fn check_multimode(
    lab: &Lab,
    model: &TruncatedModel,
    params: &EnsembleParams,
    modes: &[ModeId],
) -> Result<VerificationReport> {
    let hash = lab.hash("multimode", &[model], &[*params], modes);
    let m = modes.len();
    if m > 2 {
        return Err(Error::Sizing {
            what: format!("product grid over {m} substituted modes"),
            product: m,
            limit: 2,
        });
    }
    if m == 0 {
        return Err(Error::Precondition("multimode check needs substituted modes".into()));
    }
    let spec = if m == 1 { lab.numerics.grid } else { lab.numerics.multimode_grid };
    let grids = plan_grids(&lab.cache, model, params, modes, &lab.numerics, &spec)?;
    let full = FullEnsemble::new(&lab.cache, model, params)?;
    let lo = integrate_on(lab, model, params, modes, &grids, &spec, SymbolKind::Lower)?;
    let up = integrate_on(lab, model, params, modes, &grids, &spec, SymbolKind::Upper)?;
    let lx = full.log_xi();
    let (l_lo, l_up) = (lo.fine.log_value(), up.fine.log_value());
    // ⟨N′⟩″ = V ρ″ + m from the μ-derivative of log Ξ″
    let h = lab.numerics.fd_step * params.mu.abs().max(1.0);
    let log_up = |mu: f64| -> Result<f64> {
        Ok(substituted_integral(&lab.cache, model, &params.with_mu(mu), modes, &grids, SymbolKind::Upper)?.log_value())
    };
    let d1 = (log_up(params.mu + h)? - log_up(params.mu - h)?) / (2.0 * h * params.beta);
    let d2 = (log_up(params.mu + h / 2.0)? - log_up(params.mu - h / 2.0)?) / (h * params.beta);
    let n_upper = d2 + (d2 - d1) / 3.0;
    let n_prime = n_upper + m as f64;
    let plan = SubstitutionPlan::new(modes.to_vec(), vec![crate::fock::C64::new(0.0, 0.0); m])?;
    let bound = params.beta * delta_bound(&plan, params, &model.spec, n_prime.max(0.0))?;
    let spread = l_up - l_lo;
    let bound_gap = bound * (1.0 + MULTIMODE_TOLERANCE) - spread;
    let positions: Vec<usize> = modes
        .iter()
        .map(|md| full.basis.position(md))
        .collect::<Result<_>>()?;
    let fd = params.beta * 2.0 * m as f64 * model.spec.phi / model.volume() * (d1 - d2).abs();
    let budget = ErrorBudget::new(lo.quad_error + up.quad_error, 0.0, full.cap_tail(&positions), fd);
    let p = payload(&[
        ("modes", m as f64),
        ("log_xi", lx),
        ("log_xi_lower", l_lo),
        ("log_xi_upper", l_up),
        ("gap_lower", lx - l_lo),
        ("gap_upper", l_up - lx),
        ("upper_minus_lower", spread),
        ("n_prime_upper", n_prime),
        ("bound", bound),
        ("bound_per_mode", bound / m as f64),
    ]);
    Ok(VerificationReport::new(
        "multimode",
        hash,
        Point::new(params, model.volume()),
        (lx - l_lo).min(l_up - lx).min(bound_gap),
        budget,
        p,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_sums_components() {
        let b = ErrorBudget::new(1e-9, 2e-9, -3e-9, 0.0);
        assert!((b.total - 6e-9).abs() < 1e-20);
        assert!(b.cap_tail > 0.0);
    }

    #[test]
    fn verdict_rule() {
        let h = String::new();
        let pt = Point { beta: 1.0, mu: 0.0, lambda: 0.0, volume: 1.0 };
        let b = ErrorBudget::new(1e-6, 0.0, 0.0, 0.0);
        assert_eq!(VerificationReport::new("x", h.clone(), pt, -5e-7, b, BTreeMap::new()).verdict, Verdict::Pass);
        assert_eq!(VerificationReport::new("x", h.clone(), pt, -2e-6, b, BTreeMap::new()).verdict, Verdict::Fail);
        let inf = ErrorBudget::new(0.0, 0.0, f64::INFINITY, 0.0);
        let r = VerificationReport::new("x", h, pt, 1.0, inf, BTreeMap::new());
        assert_eq!(r.verdict, Verdict::Incomplete);
        assert!(r.budget.total.is_finite());
    }

    #[test]
    fn free_family_closed_form_collapse() {
        let specs: Vec<ModelSpec> = [4.0, 8.0, 16.0, 32.0]
            .iter()
            .map(|&l| ModelSpec::gaussian(1, l, &[vec![-1], vec![0], vec![1]], 0.0, 0.5, Some(0.0)).unwrap())
            .collect();
        let p = EnsembleParams::new(1.0, -0.5, 0.0).unwrap();
        let r = check_pressure_collapse_free(&specs, &p).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!((r.payload["spread_ratio"] - 0.125).abs() < 1e-12);
        assert!(check_pressure_collapse_free(&specs[..2], &p).is_err());
    }
}
