use proptest::prelude::*;
use silab::gradcheck::{numeric_grad, rel_error};
use silab::losses::{
    euler_residual, scalar_logistic_minimizer, AngleFamily, MatFac, MultiGroup, ProductLogistic, Rayleigh,
    StochasticLoss, StochasticRayleigh,
};
use silab::vecmath::{dot, norm, scaled};
use silab::Tensor;

fn sym(vals: &[f64], d: usize) -> Tensor {
    let data = (0..d * d)
        .map(|k| {
            let (i, j) = (k / d, k % d);
            let (a, b) = (i.min(j), i.max(j));
            vals[a * d + b]
        })
        .collect();
    Tensor::new(vec![d, d], data).unwrap()
}

fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, d).prop_filter("away from origin", |v| norm(v) > 0.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rayleigh_is_invariant_and_orthogonal(
        vals in prop::collection::vec(-2.0..2.0f64, 16),
        x in nonzero_vec(4),
        c in 1e-3..1e3f64,
    ) {
        let loss = Rayleigh::new(sym(&vals, 4)).unwrap();
        let a = loss.mean_eval(&x).unwrap();
        let b = loss.mean_eval(&scaled(&x, c)).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12 * (1.0 + a.loss.abs()));
        // gradient is (−1)-homogeneous
        prop_assert!(rel_error(&b.grad, &scaled(&a.grad, 1.0 / c), 1e-30) <= 1e-10);
        prop_assert!(dot(&a.grad, &x).abs() <= 1e-10 * (norm(&a.grad) * norm(&x) + 1e-30));
    }

    #[test]
    fn stochastic_rayleigh_samples_are_invariant(
        x in nonzero_vec(3),
        c in 1e-2..1e2f64,
        sample in any::<u64>(),
    ) {
        let loss = StochasticRayleigh::new(Tensor::diag(&[1.0, 2.0, 3.0]), 0.5).unwrap()
            .with_spikes(0.3, 10.0).unwrap();
        let a = loss.eval(sample, &x).unwrap();
        let b = loss.eval(sample, &scaled(&x, c)).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12 * (1.0 + a.loss.abs()));
        prop_assert!(euler_residual(&loss.groups(), &x, &a.grad) <= 1e-10);
    }

    #[test]
    fn multigroup_is_invariant_per_group(
        x in nonzero_vec(3),
        y in nonzero_vec(2),
        cx in 1e-2..1e2f64,
        cy in 1e-2..1e2f64,
    ) {
        let loss = MultiGroup::new(Tensor::diag(&[1.0, 2.0, 3.0]), Tensor::diag(&[-1.0, 4.0])).unwrap();
        let joined: Vec<f64> = x.iter().chain(&y).copied().collect();
        let moved: Vec<f64> = scaled(&x, cx).into_iter().chain(scaled(&y, cy)).collect();
        let a = loss.mean_eval(&joined).unwrap();
        let b = loss.mean_eval(&moved).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12 * (1.0 + a.loss.abs()));
        prop_assert!(euler_residual(&loss.groups(), &joined, &a.grad) <= 1e-10);
    }

    #[test]
    fn angle_loss_gradient_matches_differences(theta in -1.5..1.5f64, r in 0.2..5.0f64) {
        let loss = AngleFamily::new(1.3);
        let x = vec![r * theta.cos(), r * theta.sin()];
        let g = loss.mean_eval(&x).unwrap().grad;
        let fd = numeric_grad(|v| Ok(loss.mean_eval(v)?.loss), &x, 1e-6).unwrap();
        prop_assert!(rel_error(&g, &fd, 1e-8) <= 1e-5);
    }
}

#[test]
fn rayleigh_rejects_the_origin() {
    let loss = Rayleigh::new(Tensor::identity(3)).unwrap();
    assert!(loss.mean_eval(&[0.0, 0.0, 0.0]).is_err());
}

#[test]
fn rayleigh_rejects_asymmetric_matrices() {
    let a = Tensor::matrix(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
    assert!(Rayleigh::new(a).is_err());
}

#[test]
fn product_logistic_depends_only_on_the_product() {
    let loss = ProductLogistic {
        data: vec![(1.0, 1.0), (1.0, 1.0), (1.0, -1.0)],
        k: 2,
    };
    let a = loss.mean_eval(&[1.0, 2.0, 0.5, 3.0]).unwrap().loss;
    let b = loss.mean_eval(&[3.0, 1.0, 1.0, 1.0]).unwrap().loss;
    assert!((a - b).abs() < 1e-14);
    assert!(!loss.is_scale_invariant());
}

#[test]
fn logistic_minimizer_of_two_to_one_data_is_ln_two() {
    // 2/(1+e^X) = 1/(1+e^{−X})  ⇔  e^X = 2
    let x = scalar_logistic_minimizer(&[(1.0, 1.0), (1.0, 1.0), (1.0, -1.0)]).unwrap();
    assert!((x - 2f64.ln()).abs() < 1e-10);
}

#[test]
fn matfac_gradient_matches_differences() {
    let y = Tensor::matrix(&[&[1.0, -0.5], &[0.3, 2.0]]).unwrap();
    let loss = MatFac::new(y, 2).unwrap();
    let x = [0.3, -1.2, 0.7, 0.4, 1.1, 0.2, -0.6, 0.9];
    let g = loss.mean_eval(&x).unwrap().grad;
    let fd = numeric_grad(|v| Ok(loss.mean_eval(v)?.loss), &x, 1e-6).unwrap();
    assert!(rel_error(&g, &fd, 1e-8) < 1e-6);
}
