//! Property tests of the structural invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;

use bosesub::coherent::*;
use bosesub::ensemble::{substituted_integral, zero_mode_grid, FullEnsemble, Numerics};
use bosesub::fock::*;
use bosesub::linalg::logsumexp;
use bosesub::model::*;
use bosesub::report::{parse_document, to_document};
use bosesub::spectrum::SpectrumCache;
use bosesub::verify::{ErrorBudget, Point, Verdict, VerificationReport};

fn modes(n: usize) -> Vec<ModeId> {
    (0..n).map(|i| ModeId::new(i, vec![i as i32])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_round_trip(caps in prop::collection::vec(1u32..5, 1..4)) {
        let b = build_basis(&modes(caps.len()), &caps, 10_000).unwrap();
        let want: usize = caps.iter().map(|&c| c as usize + 1).product();
        prop_assert_eq!(b.dim(), want);
        for (i, s) in b.states().enumerate() {
            prop_assert!(s.iter().zip(&caps).all(|(n, c)| n <= c));
            prop_assert_eq!(b.index_of(&s), Some(i));
        }
    }

    #[test]
    fn ladder_identities(caps in prop::collection::vec(1u32..5, 1..4), pick in 0usize..3) {
        let ms = modes(caps.len());
        let b = build_basis(&ms, &caps, 10_000).unwrap();
        let m = &ms[pick % ms.len()];
        let lo = ladder_matrix(&b, m, Ladder::Lower).unwrap();
        let hi = ladder_matrix(&b, m, Ladder::Raise).unwrap();
        prop_assert_eq!(hi.max_abs_diff(&lo.adjoint()).unwrap(), 0.0);
        let num = number_matrix(&b, m).unwrap();
        prop_assert!(num.max_abs_diff(&hi.matmul(&lo).unwrap()).unwrap() < 1e-14);
        let comm = lo.matmul(&hi).unwrap().sub(&hi.matmul(&lo).unwrap()).unwrap();
        let pos = b.position(m).unwrap();
        for i in 0..b.dim() {
            let below_cap = b.occupation(i, pos) < caps[pos];
            for j in 0..b.dim() {
                let want = if i == j && below_cap { 1.0 } else if i == j { comm.get(i, j).re } else { 0.0 };
                prop_assert!((comm.get(i, j) - C64::new(want, 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn coherent_norm_and_tail(re in -6.0f64..6.0, im in -6.0f64..6.0, cap in 0usize..80) {
        let v = coherent_vector(C64::new(re, im), cap);
        prop_assert!(v.tail_mass >= 0.0);
        prop_assert!((v.norm_sqr() + v.tail_mass - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lower_symbol_from_vector(re in -3.0f64..3.0, im in -3.0f64..3.0, m in 0u32..3, n in 0u32..3) {
        let z = C64::new(re, im);
        let v = coherent_vector(z, 80);
        let got = v.expect_normal(m as usize, n as usize);
        let want = monomial_value(z, m, n);
        prop_assert!((got - want).norm() < 1e-10 * (1.0 + want.norm()));
    }

    #[test]
    fn upper_symbols_are_conjugate_symmetric(re in -4.0f64..4.0, im in -4.0f64..4.0, m in 0u32..4, n in 0u32..4) {
        let z = C64::new(re, im);
        let a = symbol_reorder(m, n).eval(z);
        let b = symbol_reorder(n, m).eval(z);
        prop_assert!((a - b.conj()).norm() <= 1e-12 * (1.0 + a.norm()));
        if m == n {
            prop_assert!(a.im.abs() <= 1e-12 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn logsumexp_shift(xs in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((logsumexp(&shifted) - logsumexp(&xs) - c).abs() < 1e-11);
        prop_assert!(logsumexp(&xs) >= xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn budget_and_verdict_rule(q in 0.0f64..1e-3, c in 0.0f64..1e-3, t in -1e-3f64..1e-3, f in 0.0f64..1e-3, gap in -3e-3f64..3e-3) {
        let b = ErrorBudget::new(q, c, t, f);
        prop_assert!(b.quad_residual >= 0.0 && b.coherent_tail >= 0.0 && b.cap_tail >= 0.0 && b.fd_step >= 0.0);
        prop_assert!((b.total - (b.quad_residual + b.coherent_tail + b.cap_tail + b.fd_step)).abs() < 1e-18);
        let pt = Point { beta: 1.0, mu: 0.0, lambda: 0.0, volume: 1.0 };
        let r = VerificationReport::new("x", String::new(), pt, gap, b, BTreeMap::new());
        prop_assert_eq!(r.verdict == Verdict::Pass, gap >= -b.total);
    }

    #[test]
    fn report_document_round_trip(gaps in prop::collection::vec(-1.0f64..1.0, 1..6), mu in -2.0f64..0.0) {
        let reports: Vec<VerificationReport> = gaps
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let mut p = BTreeMap::new();
                p.insert("value".to_string(), g / 3.0);
                let pt = Point { beta: 1.0 + i as f64, mu, lambda: 0.1, volume: 4.0 };
                VerificationReport::new("sandwich", format!("{i:02}"), pt, g, ErrorBudget::new(1e-9, 0.0, 0.0, 0.0), p)
            })
            .collect();
        let text = to_document(&reports).unwrap();
        let back = parse_document(&text).unwrap();
        prop_assert_eq!(to_document(&back.reports).unwrap(), text);
    }
}

fn three_mode(l: f64, g: f64, sigma: f64) -> ModelSpec {
    ModelSpec::three_mode(l, g, sigma).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grand_hamiltonian_is_hermitian(l in 2.0f64..10.0, g in -1.0f64..2.0, sigma in 0.1f64..1.0,
                                      mu in -2.0f64..1.0, lam in -0.5f64..0.5) {
        let spec = three_mode(l, g, sigma);
        let b = build_basis(&spec.modes, &[3, 4, 3], 1000).unwrap();
        let p = EnsembleParams::new(1.0, mu, lam).unwrap();
        let h = grand_hamiltonian(&spec, &p, &b).unwrap();
        prop_assert!(h.is_hermitian());
        prop_assert!(h.hermiticity_defect() <= 1e-12 * h.max_abs().max(1.0));
    }

    #[test]
    fn upper_minus_lower_is_delta(re in -3.0f64..3.0, im in -3.0f64..3.0, g in 0.1f64..2.0,
                                  sigma in 0.1f64..1.0, mu in -1.5f64..1.0, lam in -0.3f64..0.3) {
        let spec = three_mode(4.0, g, sigma);
        let model = TruncatedModel::new(spec.clone(), vec![6, 4, 3], 1000).unwrap();
        let zero = spec.zero_mode().clone();
        let reduced = model.reduced_basis(std::slice::from_ref(&zero)).unwrap();
        let p = EnsembleParams::new(1.0, mu, lam).unwrap();
        let z = C64::new(re, im);
        let plan = SubstitutionPlan::zero_mode(&spec, z);
        let lo = reduce_lower(&spec, &p, &plan, &reduced).unwrap();
        let up = reduce_upper(&spec, &p, &plan, &reduced).unwrap();
        let delta = delta_operator(&spec, &p, z, &reduced).unwrap();
        let diff = up.sub(&lo).unwrap();
        let scale = diff.max_abs().max(delta.max_abs()).max(1.0);
        prop_assert!(diff.max_abs_diff(&delta).unwrap() <= 1e-12 * scale);
    }

    #[test]
    fn delta_within_bound(re in -3.0f64..3.0, im in -3.0f64..3.0, mu in -1.5f64..1.5) {
        let spec = three_mode(4.0, 1.0, 0.5);
        let model = TruncatedModel::new(spec.clone(), vec![6, 5, 5], 1000).unwrap();
        let zero = spec.zero_mode().clone();
        let reduced = model.reduced_basis(std::slice::from_ref(&zero)).unwrap();
        let p = EnsembleParams::new(1.0, mu, 0.0).unwrap();
        let z = C64::new(re, im);
        let plan = SubstitutionPlan::zero_mode(&spec, z);
        let delta = delta_operator(&spec, &p, z, &reduced).unwrap();
        for i in 0..reduced.dim() {
            let n_prime = z.norm_sqr() + reduced.total_number(i) as f64;
            let bound = delta_bound(&plan, &p, &spec, n_prime).unwrap();
            prop_assert!(delta.get(i, i).norm() <= bound);
        }
    }

    #[test]
    fn log_xi_convex_in_mu(mu0 in -1.5f64..0.0, step in 0.05f64..0.3, lam in 0.0f64..0.3) {
        let model = TruncatedModel::new(three_mode(4.0, 1.0, 0.5), vec![6, 3, 2], 1000).unwrap();
        let cache = SpectrumCache::in_memory();
        let vals: Vec<f64> = (0..5)
            .map(|k| {
                let p = EnsembleParams::new(1.0, mu0 + step * k as f64, lam).unwrap();
                FullEnsemble::new(&cache, &model, &p).unwrap().log_xi()
            })
            .collect();
        for w in vals.windows(3) {
            prop_assert!(w[0] + w[2] - 2.0 * w[1] >= -1e-12);
        }
    }

    #[test]
    fn pressure_convex_in_lambda(lam0 in -0.4f64..0.4, step in 0.02f64..0.2, mu in -1.0f64..0.5) {
        let model = TruncatedModel::new(three_mode(4.0, 1.0, 0.5), vec![6, 3, 2], 1000).unwrap();
        let cache = SpectrumCache::in_memory();
        let vals: Vec<f64> = (0..5)
            .map(|k| {
                let p = EnsembleParams::new(1.0, mu, lam0 + step * k as f64).unwrap();
                FullEnsemble::new(&cache, &model, &p).unwrap().partition().pressure()
            })
            .collect();
        for w in vals.windows(3) {
            prop_assert!(w[0] + w[2] - 2.0 * w[1] >= -1e-12);
        }
    }

    #[test]
    fn sandwich_on_small_models(beta in 0.3f64..2.0, mu in -1.5f64..-0.1, lam in -0.3f64..0.3, g in 0.2f64..1.5) {
        let model = TruncatedModel::new(three_mode(4.0, g, 0.5), vec![12, 3, 2], 1000).unwrap();
        let cache = SpectrumCache::in_memory();
        let p = EnsembleParams::new(beta, mu, lam).unwrap();
        let numerics = Numerics::default();
        let grid = zero_mode_grid(&cache, &model, &p, &numerics, &numerics.grid).unwrap();
        let zero = [model.spec.zero_mode().clone()];
        let grids = std::slice::from_ref(&grid);
        let lo = substituted_integral(&cache, &model, &p, &zero, grids, SymbolKind::Lower).unwrap();
        let up = substituted_integral(&cache, &model, &p, &zero, grids, SymbolKind::Upper).unwrap();
        let full = FullEnsemble::new(&cache, &model, &p).unwrap();
        let slack = 1e-8 + full.cap_tail(&[0]);
        prop_assert!(lo.log_value() <= full.log_xi() + slack);
        prop_assert!(full.log_xi() <= up.log_value() + slack);
    }
}

#[test]
fn symbol_duality_reconstructs_monomials() {
    let cap = 40usize;
    let spec = GridSpec::default();
    let grid = QuadratureGrid::disc(cap as f64 / 2.0 + 12.0 * (cap as f64).sqrt() + 30.0, &spec).unwrap();
    let resid = identity_residual(cap, &grid);
    let vecs: Vec<(CoherentVector, f64)> = grid.nodes().map(|(z, w)| (coherent_vector(z, cap), w)).collect();
    let fact = log_factorials(cap);
    let keep = cap - 6;
    for m in 0..=3u32 {
        for n in 0..=3u32 {
            let u = symbol_reorder(m, n);
            let mut acc = vec![C64::new(0.0, 0.0); (keep + 1) * (keep + 1)];
            // Σ|terms|, which sets the round-off floor of each entry
            let mut mag = vec![0.0; (keep + 1) * (keep + 1)];
            for (v, w) in &vecs {
                let uw = u.eval(v.z) * *w;
                for k in 0..=keep {
                    let ck = v.coeffs[k] * uw;
                    for l in 0..=keep {
                        let t = ck * v.coeffs[l].conj();
                        acc[k * (keep + 1) + l] += t;
                        mag[k * (keep + 1) + l] += t.norm();
                    }
                }
            }
            for k in 0..=keep {
                for l in 0..=keep {
                    let want = if k >= m as usize && l >= n as usize && k - m as usize == l - n as usize {
                        let lf = 0.5 * (fact[k] - fact[k - m as usize] + fact[l] - fact[l - n as usize]);
                        lf.exp()
                    } else {
                        0.0
                    };
                    let got = acc[k * (keep + 1) + l];
                    let tol = 10.0 * resid * want.abs().max(1.0) + 64.0 * f64::EPSILON * mag[k * (keep + 1) + l];
                    assert!((got - C64::new(want, 0.0)).norm() <= tol, "({m},{n}) at ({k},{l}): {got} vs {want}");
                }
            }
        }
    }
}
