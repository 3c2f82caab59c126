use std::sync::OnceLock;

use bonnet_core::ambient::{extend_potential, pullback_potential, AmbientOptions, AmbientPotential};
use bonnet_core::bonnet::{bonnet_embed, BonnetOptions};
use bonnet_core::fixtures::Fixture;
use bonnet_core::grid::{measured_order, partial, path_integrate, Chart, Field, LatticePath, Step};
use bonnet_core::lauritzen::LauritzenPair;
use bonnet_core::report::{read_field_csv, write_field_csv};
use bonnet_core::structures::StatisticalStructure;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn chart(m: usize) -> Chart {
    Chart::uniform(vec![(-0.5, 0.7), (0.1, 1.3)], m).unwrap()
}

fn wave(c: &Chart, a: f64, b: f64) -> Field {
    Field::scalar(c, |x| (a * x[0]).sin() * (b * x[1]).cos() + a * x[0] * x[1])
}

/// Smooth metric near `I` and a torsion-free connection; not statistical in
/// general.
fn perturbed_structure(c: &Chart, eps: f64, k: f64) -> StatisticalStructure {
    let g = Field::from_fn(c, &[2, 2], |x, o| {
        let off = eps * (k * x[0]).sin() * x[1];
        o.copy_from_slice(&[1.0 + eps * x[0] * x[0], off, off, 1.0 + eps * (k * x[1]).cos()]);
    });
    let gamma = Field::from_fn(c, &[2, 2, 2], |x, o| {
        for i in 0..2 {
            for j in 0..2 {
                for l in 0..2 {
                    o[(i * 2 + j) * 2 + l] = eps * ((i + j + 1) as f64 * x[l] + k * x[0] * x[1]);
                }
            }
        }
    });
    StatisticalStructure::new(g, gamma).unwrap()
}

fn sphere_ambient() -> &'static AmbientPotential {
    static CELL: OnceLock<AmbientPotential> = OnceLock::new();
    CELL.get_or_init(|| {
        let fx = Fixture::by_name("sphere2").unwrap();
        let c = fx.chart(33).unwrap();
        let b = bonnet_embed(&fx.structure(&c).unwrap(), &fx.extrinsic(&c).unwrap(), &BonnetOptions::default()).unwrap();
        let pb = pullback_potential(&b.pair, 1e-3).unwrap();
        extend_potential(&b.pair, &pb, &AmbientOptions::default()).unwrap()
    })
}

fn min_eig_on_manifold(a: &AmbientPotential, c: f64) -> f64 {
    let h = a.manifold_hessian(c);
    let n = h.value_shape()[0];
    (0..h.chart().len())
        .map(|p| DMatrix::from_row_slice(n, n, h.at(p)).symmetric_eigenvalues().min())
        .fold(f64::INFINITY, f64::min)
}

fn sphere_bonnet(frame: Option<DMatrix<f64>>) -> LauritzenPair {
    let fx = Fixture::by_name("sphere2").unwrap();
    let c = fx.chart(33).unwrap();
    let opts = BonnetOptions { base_frame: frame, ..BonnetOptions::default() };
    bonnet_embed(&fx.structure(&c).unwrap(), &fx.extrinsic(&c).unwrap(), &opts).unwrap().pair
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partial_is_linear(a in -3.0..3.0f64, b in -3.0..3.0f64, k1 in 0.5..3.0f64, k2 in 0.5..3.0f64, axis in 0usize..2) {
        let c = chart(17);
        let (u, v) = (wave(&c, k1, k2), wave(&c, k2, k1));
        let lhs = partial(&u.combine(a, &v, b).unwrap(), axis).unwrap();
        let rhs = partial(&u, axis).unwrap().combine(a, &partial(&v, axis).unwrap(), b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn reversed_paths_cancel(k in 0.5..3.0f64, moves in proptest::collection::vec((0usize..2, any::<bool>()), 1..40)) {
        let c = chart(17);
        let form = Field::from_fn(&c, &[2], |x, o| o.copy_from_slice(&[(k * x[1]).sin(), x[0] * x[0] - k * x[1]]));
        let mut at = [8usize, 8];
        let mut steps = Vec::new();
        for (axis, fwd) in moves {
            let next = if fwd { at[axis] + 1 } else { at[axis].wrapping_sub(1) };
            if next < 17 {
                at[axis] = next;
                steps.push(if fwd { Step::forward(axis) } else { Step::backward(axis) });
            }
        }
        let path = LatticePath::new(vec![8, 8], steps);
        let there = path_integrate(&form, &path).unwrap();
        let back = path_integrate(&form, &path.reversed()).unwrap();
        prop_assert_eq!(there[0], -back[0]);
    }

    #[test]
    fn dual_and_alpha_involutions(eps in -0.2..0.2f64, k in 0.5..3.0f64, alpha in -1.0..1.0f64) {
        let s = perturbed_structure(&chart(17), eps, k);
        let dd = s.dual().unwrap().dual().unwrap();
        prop_assert!(dd.gamma().max_abs_diff(s.gamma()).unwrap() <= 1e-12);
        let dual_alpha = s.with_connection(s.alpha_connection(alpha).unwrap()).unwrap().dual().unwrap();
        prop_assert!(dual_alpha.gamma().max_abs_diff(&s.alpha_connection(-alpha).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn residuals_are_translation_invariant(shift in -5.0..5.0f64, eps in -0.2..0.2f64) {
        let base = chart(17);
        let moved = Chart::uniform(base.ranges().iter().map(|(a, b)| (a + shift, b + shift)).collect(), 17).unwrap();
        let a = perturbed_structure(&base, eps, 1.3);
        let b = StatisticalStructure::new(
            Field::from_data(&moved, &[2, 2], a.g().data().to_vec()).unwrap(),
            Field::from_data(&moved, &[2, 2, 2], a.gamma().data().to_vec()).unwrap(),
        ).unwrap();
        let (ra, rb) = (a.check_statistical().unwrap(), b.check_statistical().unwrap());
        prop_assert!((ra.nabla_g_residual - rb.nabla_g_residual).abs() <= 1e-9 * (1.0 + ra.nabla_g_residual));
        prop_assert!((ra.torsion_residual - rb.torsion_residual).abs() <= 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact(values in proptest::collection::vec(-1e6..1e6f64, 25 * 3)) {
        let c = Chart::uniform(vec![(0.0, 1.0); 2], 5).unwrap();
        let f = Field::from_data(&c, &[3], values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        write_field_csv(&path, "v", &f).unwrap();
        prop_assert_eq!(read_field_csv(&path, &c).unwrap(), f);
    }

    #[test]
    fn measured_order_recovers_power_laws(p in 0.5..6.0f64, e in 1e-8..1.0f64, ratio in 1.5..4.0f64) {
        prop_assert!((measured_order(e, e / ratio.powf(p), ratio) - p).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hessian_on_the_manifold_is_monotone_in_c(c1 in 0.0..64.0f64, dc in 0.0..64.0f64) {
        let a = sphere_ambient();
        prop_assert!(min_eig_on_manifold(a, c1 + dc) >= min_eig_on_manifold(a, c1) - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// `B ↦ BM` changes the pair by contragredient constant maps, so the
    /// pairings `⟨f(p), φ(q)⟩` are unchanged.
    #[test]
    fn gauge_changes_keep_pairings(m in proptest::collection::vec(-0.4..0.4f64, 9)) {
        let mut frame = DMatrix::<f64>::identity(3, 3);
        for (v, d) in frame.iter_mut().zip(&m) {
            *v += d;
        }
        prop_assume!(frame.determinant().abs() > 0.2);
        let (a, b) = (sphere_bonnet(None), sphere_bonnet(Some(frame)));
        let probes = [0usize, 100, 500, 1088];
        let dot = |p: &LauritzenPair, i: usize, j: usize| -> f64 { p.f().at(i).iter().zip(p.phi().at(j)).map(|(x, y)| x * y).sum() };
        for &i in &probes {
            for &j in &probes {
                prop_assert!((dot(&a, i, j) - dot(&b, i, j)).abs() <= 1e-9);
            }
        }
        prop_assert!(a.f().max_abs_diff(b.f()).unwrap() > 1e-3 || m.iter().all(|v| v.abs() < 1e-3));
    }
}

#[test]
fn off_manifold_monotonicity_is_not_guaranteed() {
    let a = sphere_ambient();
    let lowest = |c: f64| a.min_eigenvalues_with(c).into_iter().fold(f64::INFINITY, f64::min);
    assert!(lowest(1.0) > 0.0);
    assert!(lowest(1024.0) < lowest(1.0));
}
