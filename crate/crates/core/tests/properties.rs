use proptest::prelude::*;

use rectiflow::coupling::{AffineMode, ParticleCoupling};
use rectiflow::distributions::ParticleSet;
use rectiflow::linalg::{Matrix, Vector};
use rectiflow::ot;

fn points(n: usize, d: usize) -> impl Strategy<Value = ParticleSet> {
    prop::collection::vec(-5.0..5.0f64, n * d).prop_map(move |v| ParticleSet::new(n, d, v).unwrap())
}

fn coupling(max_n: usize, d: usize) -> impl Strategy<Value = ParticleCoupling> {
    (2..max_n).prop_flat_map(move |n| {
        (points(n, d), points(n, d)).prop_map(|(a, b)| ParticleCoupling::new(a, b).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_distance_is_symmetric_and_nonnegative(a in points(30, 2), b in points(20, 2)) {
        let ab = ot::energy_distance(&a, &b).unwrap();
        let ba = ot::energy_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!(ot::energy_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn exact_plan_beats_the_given_pairing(c in coupling(40, 2)) {
        let plan = ot::discrete_ot_exact(c.x0(), c.x1()).unwrap();
        prop_assert!(plan.cost <= ot::transport_cost(&c) + 1e-12);
        let paired = plan.to_coupling(c.x0(), c.x1()).unwrap();
        prop_assert!((ot::transport_cost(&paired) - plan.cost).abs() < 1e-9);
        let mut seen = plan.assignment().unwrap().to_vec();
        seen.sort_unstable();
        prop_assert!(seen.iter().enumerate().all(|(i, &j)| i == j));
    }

    #[test]
    fn one_dimensional_exact_plan_is_the_sorted_pairing(c in coupling(60, 1)) {
        let exact = ot::discrete_ot_exact(c.x0(), c.x1()).unwrap().cost;
        let sorted = ot::quantile_ot_1d(c.x0(), c.x1()).unwrap().cost;
        prop_assert!((exact - sorted).abs() <= 1e-9 * exact.max(1.0));
    }

    #[test]
    fn sinkhorn_is_never_below_the_exact_cost(c in coupling(25, 2), scale in 0.05..1.0f64) {
        let cost = ot::squared_distance_matrix(c.x0(), c.x1());
        let exact = ot::discrete_ot_exact(c.x0(), c.x1()).unwrap().cost;
        let s = ot::sinkhorn(&cost, scale * cost.mean().max(1e-3), 20_000, 1e-9).unwrap();
        prop_assert!(s.plan.cost >= exact - 1e-6);
    }

    #[test]
    fn transport_cost_ignores_row_order(c in coupling(40, 3), shift in 0usize..40) {
        let n = c.len();
        let idx: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let a = ot::transport_cost(&c);
        prop_assert!((a - ot::transport_cost(&c.select(&idx))).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn affine_transform_round_trips(
        c in coupling(20, 2),
        m in prop::collection::vec(-1.0..1.0f64, 4),
        b in prop::collection::vec(-3.0..3.0f64, 2),
        s in 0.2..5.0f64,
    ) {
        let a = Matrix::from_row_slice(2, 2, &m) + Matrix::identity(2, 2) * 3.0;
        let modes = [
            AffineMode::Both { a, b: Vector::from_vec(b.clone()) },
            AffineMode::Shift1(Vector::from_vec(b)),
            AffineMode::Scale1(s),
        ];
        for mode in modes {
            let back = c.affine_transform(&mode).unwrap().affine_transform(&mode.inverse().unwrap()).unwrap();
            let err = back
                .x0()
                .as_slice()
                .iter()
                .chain(back.x1().as_slice())
                .zip(c.x0().as_slice().iter().chain(c.x1().as_slice()))
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            prop_assert!(err < 1e-9, "{mode:?}: {err}");
        }
    }

    #[test]
    fn coupling_text_format_is_lossless(c in coupling(30, 3)) {
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = ParticleCoupling::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.x0().as_slice(), c.x0().as_slice());
        prop_assert_eq!(back.x1().as_slice(), c.x1().as_slice());
    }
}
