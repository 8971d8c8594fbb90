use proptest::prelude::*;
use silab::clipstats::{
    clipped_mean, clipped_mean_with, g_clipped, inv_c_median, Classification, Convention, EmpiricalDist,
};

fn dist() -> impl Strategy<Value = EmpiricalDist> {
    (1usize..8, 0.0..0.9f64)
        .prop_flat_map(|(n, zero)| {
            (
                prop::collection::vec(0.01..20.0f64, n),
                prop::collection::vec(0.05..1.0f64, n),
                Just(zero),
            )
        })
        .prop_map(|(mut atoms, mut weights, zero)| {
            let s: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w *= (1.0 - zero) / s);
            if zero > 0.0 {
                atoms.push(0.0);
                weights.push(zero);
            }
            EmpiricalDist::normalized(atoms, weights).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mu_is_a_root_inside_the_sandwich(p in dist(), c in 1.05..12.0f64) {
        let r = clipped_mean(&p, c).unwrap();
        prop_assert!(g_clipped(&p, c, r.mu_c).abs() <= 1e-9 * (1.0 + p.mean()));
        let m = inv_c_median(&p, c).unwrap();
        prop_assert!(m / c <= r.mu_c + 1e-12);
        prop_assert!(r.mu_c <= p.mean() + 1e-12);
        if r.classification == Classification::TwoRoots {
            prop_assert!(r.mu_c > 0.0);
            // G > 0 just left of the largest root, < 0 beyond it
            prop_assert!(g_clipped(&p, c, 0.5 * r.mu_c) > 0.0);
        }
        prop_assert!(g_clipped(&p, c, 2.0 * r.mu_c + 1.0) < 0.0);
    }

    #[test]
    fn mu_is_nondecreasing_in_c(p in dist(), c in 1.05..6.0f64, dc in 0.0..6.0f64) {
        let a = clipped_mean(&p, c).unwrap().mu_c;
        let b = clipped_mean(&p, c + dc).unwrap().mu_c;
        prop_assert!(b >= a - 1e-9);
    }

    #[test]
    fn squared_convention_equals_c_mu_at_c_squared(p in dist(), c in 1.05..3.0f64) {
        let a = clipped_mean_with(&p, c, Convention::ClipAtCSquaredMu).unwrap().mu_c;
        let b = clipped_mean_with(&p, c * c, Convention::ClipAtCMu).unwrap().mu_c;
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b));
    }
}

#[test]
fn heavy_zero_mass_leaves_only_zero() {
    // mass at 0 above 1 − 1/C
    let p = EmpiricalDist::normalized(vec![0.0, 1.0], vec![0.9, 0.1]).unwrap();
    let r = clipped_mean(&p, 4.0).unwrap();
    assert_eq!(r.classification, Classification::ZeroOnly);
    assert_eq!(r.mu_c, 0.0);
}

#[test]
fn point_mass_is_its_own_clipped_mean() {
    let p = EmpiricalDist::normalized(vec![3.0], vec![1.0]).unwrap();
    let r = clipped_mean(&p, 2.0).unwrap();
    assert!((r.mu_c - 3.0).abs() < 1e-12);
    assert_eq!(r.classification, Classification::TwoRoots);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(EmpiricalDist::new(vec![1.0, -1.0], vec![0.5, 0.5]).is_err());
    assert!(EmpiricalDist::new(vec![1.0], vec![0.5]).is_err());
    assert!(EmpiricalDist::new(vec![], vec![]).is_err());
    let p = EmpiricalDist::normalized(vec![1.0], vec![1.0]).unwrap();
    assert!(clipped_mean(&p, 1.0).is_err());
}
