//! Partition functions, peaks, weights and condensate observables against
//! closed forms and direct evaluations.

use bosesub::coherent::{identity_residual, GridSpec, QuadratureGrid};
use bosesub::ensemble::*;
use bosesub::fock::{OperatorMatrix, C64};
use bosesub::model::*;
use bosesub::spectrum::{Spectrum, SpectrumCache};

fn single_mode(g: f64, v: f64) -> ModelSpec {
    ModelSpec::new(1, v, &[vec![0]], Dispersion::Quadratic, vec![(vec![0], C64::new(g, 0.0))], g.abs()).unwrap()
}

fn free_three(l: f64) -> ModelSpec {
    ModelSpec::gaussian(1, l, &[vec![-1], vec![0], vec![1]], 0.0, 0.5, Some(0.0)).unwrap()
}

fn zero(model: &TruncatedModel) -> Vec<bosesub::fock::ModeId> {
    vec![model.spec.zero_mode().clone()]
}

#[test]
fn spectrum_of_diagonal_and_two_level() {
    let d = OperatorMatrix::diagonal(&[3.0, -1.0, 2.0]);
    assert_eq!(Spectrum::compute(&d, false).unwrap().eigenvalues(), vec![-1.0, 2.0, 3.0]);
    let t = 0.7;
    let c = |x: f64| C64::new(x, 0.0);
    let op = OperatorMatrix::from_triplets(2, vec![(0, 1, c(t)), (1, 0, c(t))]);
    let e = Spectrum::compute(&op, true).unwrap().eigenvalues();
    assert!((e[0] + t).abs() < 1e-15 && (e[1] - t).abs() < 1e-15);
}

#[test]
fn free_three_mode_spectrum_is_enumerated() {
    let spec = free_three(4.0);
    let model = TruncatedModel::new(spec.clone(), vec![3, 4, 3], 1000).unwrap();
    let p = EnsembleParams::new(1.0, -0.3, 0.0).unwrap();
    let full = FullEnsemble::new(&SpectrumCache::in_memory(), &model, &p).unwrap();
    let mut want: Vec<f64> = full
        .basis
        .states()
        .map(|s| {
            full.basis
                .modes()
                .iter()
                .zip(&s)
                .map(|(m, &n)| (spec.energy(m) + 0.3) * n as f64)
                .sum()
        })
        .collect();
    want.sort_by(f64::total_cmp);
    let got = full.spectrum.eigenvalues();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn reconstruction_residual_is_small() {
    let spec = ModelSpec::three_mode(4.0, 1.0, 0.5).unwrap();
    let model = TruncatedModel::new(spec.clone(), vec![3, 6, 3], 1000).unwrap();
    let p = EnsembleParams::new(1.0, -0.5, 0.2).unwrap();
    let basis = model.full_basis().unwrap();
    let h = grand_hamiltonian(&spec, &p, &basis).unwrap();
    let s = Spectrum::compute(&h, true).unwrap();
    assert!(s.reconstruction_residual(&h).unwrap() <= 1e-10 * h.max_abs());
}

#[test]
fn z_independent_integrand_scales_with_disc_area() {
    // μ = 0 and ν = 0: the substituted zero mode drops out of H′(z)
    let spec = free_three(4.0);
    let model = TruncatedModel::new(spec.clone(), vec![6, 8, 6], 2000).unwrap();
    let p = EnsembleParams::new(1.0, 0.0, 0.0).unwrap();
    let cache = SpectrumCache::in_memory();
    let grid = QuadratureGrid::disc(9.0, &GridSpec::default()).unwrap();
    let res = substituted_integral(&cache, &model, &p, &zero(&model), std::slice::from_ref(&grid), SymbolKind::Lower)
        .unwrap();
    let e = spec.energy(spec.mode(&[1]).unwrap());
    let single: f64 = (0..=6).map(|n| (-e * n as f64).exp()).sum();
    let want = 9f64.ln() + 2.0 * single.ln();
    assert!((res.log_value() - want).abs() < 1e-12, "{} vs {want}", res.log_value());
}

#[test]
fn upper_minus_lower_is_delta_reweighting() {
    let (g, v) = (1.2, 3.0);
    let model = TruncatedModel::new(single_mode(g, v), vec![30], 100).unwrap();
    let p = EnsembleParams::new(0.8, -0.4, 0.0).unwrap();
    let cache = SpectrumCache::in_memory();
    let grid = QuadratureGrid::disc(40.0, &GridSpec::default()).unwrap();
    let grids = std::slice::from_ref(&grid);
    let lo = substituted_integral(&cache, &model, &p, &zero(&model), grids, SymbolKind::Lower).unwrap();
    let up = substituted_integral(&cache, &model, &p, &zero(&model), grids, SymbolKind::Upper).unwrap();
    for i in (0..grid.len()).step_by(97) {
        let s = grid.node(i).norm_sqr();
        let delta = p.mu + (-4.0 * s + 2.0) * g / (2.0 * v);
        let got = up.log_traces[i] - lo.log_traces[i];
        assert!((got + p.beta * delta).abs() < 1e-11, "node {i}");
    }
}

#[test]
fn peak_of_single_mode_sits_at_mean_field_value() {
    let (g, v, mu) = (1.0, 8.0, 1.5);
    let model = TruncatedModel::new(single_mode(g, v), vec![40], 100).unwrap();
    let p = EnsembleParams::new(1.0, mu, 0.0).unwrap();
    let search = SearchConfig {
        coarse_points: 121,
        tolerance: 1e-8,
        radius_sq: 40.0,
    };
    let peak = p_max(&SpectrumCache::in_memory(), &model, &p, SymbolKind::Lower, &search).unwrap();
    // lower symbol g s²/2V − μ s is minimised at s = Vμ/g
    assert!((peak.z_max.norm_sqr() - v * mu / g).abs() < 1e-6);
    assert!(peak.z_max.re >= 0.0 && peak.z_max.im == 0.0);
}

#[test]
fn negative_field_gives_positive_real_peak() {
    let model = TruncatedModel::new(single_mode(1.0, 8.0), vec![40], 100).unwrap();
    let p = EnsembleParams::new(1.0, 1.5, -0.05).unwrap();
    let search = SearchConfig {
        coarse_points: 121,
        tolerance: 1e-8,
        radius_sq: 40.0,
    };
    let peak = p_max(&SpectrumCache::in_memory(), &model, &p, SymbolKind::Lower, &search).unwrap();
    assert!(peak.z_max.re > 0.0 && peak.z_max.im == 0.0);
    // stationarity of the scalar g x⁴/2V − μx² + 2√Vλx
    let x = peak.z_max.re;
    let slope = 4.0 * x.powi(3) / 16.0 - 3.0 * x + 2.0 * 8f64.sqrt() * -0.05;
    assert!(slope.abs() < 1e-5, "{slope}");
}

#[test]
fn peak_on_boundary_is_coverage_error() {
    let model = TruncatedModel::new(single_mode(1.0, 8.0), vec![40], 100).unwrap();
    let p = EnsembleParams::new(1.0, 1.5, 0.0).unwrap();
    let search = SearchConfig {
        coarse_points: 21,
        tolerance: 1e-8,
        radius_sq: 4.0,
    };
    let err = p_max(&SpectrumCache::in_memory(), &model, &p, SymbolKind::Lower, &search).unwrap_err();
    assert!(matches!(err, bosesub::error::Error::Coverage(_)));
}

fn small_model() -> TruncatedModel {
    TruncatedModel::new(ModelSpec::three_mode(4.0, 1.0, 0.5).unwrap(), vec![16, 4, 2], 2000).unwrap()
}

fn grid_for(model: &TruncatedModel, p: &EnsembleParams) -> QuadratureGrid {
    let n = Numerics::default();
    zero_mode_grid(&SpectrumCache::in_memory(), model, p, &n, &n.grid).unwrap()
}

#[test]
fn weights_are_normalised_and_gauge_symmetric() {
    let model = small_model();
    let cache = SpectrumCache::in_memory();
    let p = EnsembleParams::new(1.0, -0.3, 0.0).unwrap();
    let grid = grid_for(&model, &p);
    let resid = identity_residual(model.zero_cap() as usize, &grid);
    for source in [WeightSource::Full, WeightSource::Upper] {
        let w = weight(&cache, &model, &p, &grid, source).unwrap();
        assert!(w.values.iter().all(|&x| x >= 0.0));
        assert!(w.angular_spread() < 1e-10, "{source:?} {}", w.angular_spread());
        assert!(w.mean.norm() < 1e-10);
        let total: f64 = (0..grid.len()).map(|i| grid.weight(i) * w.values[i]).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    let full = weight(&cache, &model, &p, &grid, WeightSource::Full).unwrap();
    assert!((full.raw_normalization - 1.0).abs() <= resid + 1e-12);
}

#[test]
fn field_sign_sets_weight_mean_sign() {
    let model = small_model();
    let cache = SpectrumCache::in_memory();
    for lam in [0.1, -0.1] {
        let p = EnsembleParams::new(0.3, -0.3, lam).unwrap();
        let grid = grid_for(&model, &p);
        for source in [WeightSource::Full, WeightSource::Upper] {
            let w = weight(&cache, &model, &p, &grid, source).unwrap();
            assert!(w.mean.im.abs() < 1e-10);
            assert_eq!(w.mean.re.signum(), -lam.signum(), "{source:?} λ={lam}");
        }
    }
}

#[test]
fn weight_flattens_at_high_temperature() {
    // at small β the Gibbs state approaches the normalised identity on the
    // truncated space, whose Husimi moments are ⟨|z|²⟩ = cap/2 + 1
    let model = small_model();
    let cache = SpectrumCache::in_memory();
    let cap = model.zero_cap() as f64;
    let mut last = f64::INFINITY;
    for beta in [0.1, 0.01, 0.001] {
        let p = EnsembleParams::new(beta, 0.0, 0.0).unwrap();
        let grid = QuadratureGrid::disc(cap + 12.0 * cap.sqrt() + 20.0, &GridSpec::default()).unwrap();
        let w = weight(&cache, &model, &p, &grid, WeightSource::Full).unwrap();
        let dev = (w.second - (cap / 2.0 + 1.0)).abs();
        assert!(dev < last);
        last = dev;
    }
    assert!(last < 0.01, "{last}");
}

#[test]
fn condensate_routes_agree() {
    let model = small_model();
    let cache = SpectrumCache::in_memory();
    let numerics = Numerics::default();
    for (mu, lam) in [(-0.3, 0.0), (0.2, 0.1), (0.4, 0.3)] {
        let p = EnsembleParams::new(1.0, mu, lam).unwrap();
        let grid = grid_for(&model, &p);
        let resid = identity_residual(model.zero_cap() as usize, &grid);
        let s = condensate_stats(&cache, &model, &p, &grid, &numerics).unwrap();
        let scale = s.n0_direct.max(1.0);
        let tol = 10.0 * resid * scale + 1e-12 * scale;
        assert!((s.n0_weight - s.n0_direct).abs() <= tol, "n0 {} vs {}", s.n0_weight, s.n0_direct);
        assert!((s.a0_weight - s.a0_direct).norm() <= tol, "a0 {} vs {}", s.a0_weight, s.a0_direct);
        assert!(s.cauchy_schwarz_margin() >= 0.0);
        if lam == 0.0 {
            assert!(s.a0_direct.norm() < 1e-12 && s.a0_weight.norm() < 1e-10);
        }
    }
}

#[test]
fn strong_field_single_mode_quantities_agree_at_v8() {
    let model = TruncatedModel::new(single_mode(1.0, 8.0), vec![80], 200).unwrap();
    let p = EnsembleParams::new(5.0, 1.0, 0.5).unwrap();
    let cache = SpectrumCache::in_memory();
    let numerics = Numerics::default();
    let grid = zero_mode_grid(&cache, &model, &p, &numerics, &numerics.grid).unwrap();
    let s = condensate_stats(&cache, &model, &p, &grid, &numerics).unwrap();
    let q = [s.n0_direct, s.a0_direct.norm_sqr(), s.z_max.norm_sqr()];
    let hi = q.iter().copied().fold(0.0, f64::max);
    let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
    assert!((hi - lo) / hi < 0.2, "{q:?}");
}

/// `(βV)⁻¹ ∂/∂μ` of `log Ξ″ = Σ_{k≠0} log Σ_{n≤c} e^{−β(ε−μ)n} − log(β|μ|) − βμ`.
fn free_upper_density(spec: &ModelSpec, caps: &[u32], beta: f64, mu: f64) -> f64 {
    let mut d = 1.0 / mu.abs() - beta;
    for (m, &c) in spec.modes.iter().zip(caps) {
        if m.is_zero() {
            continue;
        }
        let x = beta * (spec.energy(m) - mu);
        let (num, den) = (0..=c).fold((0.0, 0.0), |(a, b), n| {
            let w = (-x * n as f64).exp();
            (a + n as f64 * w, b + w)
        });
        d += beta * num / den;
    }
    d / (beta * spec.volume())
}

#[test]
fn free_upper_density_matches_closed_form() {
    let spec = free_three(4.0);
    let caps = [4, 40, 4];
    let model = TruncatedModel::new(spec.clone(), caps.to_vec(), 5000).unwrap();
    let cache = SpectrumCache::in_memory();
    let grid = QuadratureGrid::disc(150.0, &GridSpec::default()).unwrap();
    let mut prev = f64::INFINITY;
    for mu in [-0.4, -0.6, -0.9] {
        let p = EnsembleParams::new(1.0, mu, 0.0).unwrap();
        let d = density_upper(&cache, &model, &p, &grid, 1e-4).unwrap();
        let want = free_upper_density(&spec, &caps, 1.0, mu);
        assert!((d.value - want).abs() < 1e-6, "μ={mu}: {} vs {want}", d.value);
        // h and h/2 differ at O(h²)
        assert!(d.error < 10.0 * d.step * d.step, "{}", d.error);
        assert!(d.value < prev);
        prev = d.value;
    }
}

#[test]
fn tiny_step_is_domain_error() {
    let model = small_model();
    let p = EnsembleParams::new(1.0, -0.5, 0.0).unwrap();
    let grid = QuadratureGrid::disc(40.0, &GridSpec::default()).unwrap();
    let err = density_upper(&SpectrumCache::in_memory(), &model, &p, &grid, 1e-20).unwrap_err();
    assert!(matches!(err, bosesub::error::Error::Domain(_)));
}
