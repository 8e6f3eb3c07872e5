mod common;

use bayescan::autodiff::{Graph, Tensor};
use bayescan::variational::{reparameterize, sample_weights_with, GaussianParam, PriorSpec};
use common::{kl_oracle_cases, reduction_identity, rng, uniform};

#[test]
fn monte_carlo_kl_matches_closed_form() {
    for case in kl_oracle_cases() {
        assert!(
            case.passes(),
            "{}: mc {} vs analytic {}",
            case.label,
            case.mc,
            case.analytic
        );
    }
}

#[test]
fn zero_noise_reduces_to_the_deterministic_network() {
    let report = reduction_identity(100);
    assert_eq!(report.exact, report.configs);
}

#[test]
fn graph_reparameterization_agrees_with_direct_densities() {
    let mut r = rng(17);
    for _ in 0..20 {
        let theta =
            GaussianParam::new(uniform(&[3, 4], -1.0, 1.0, &mut r), uniform(&[3, 4], -3.0, 1.0, &mut r)).unwrap();
        let eps = uniform(&[3, 4], -3.0, 3.0, &mut r);
        let prior = PriorSpec::IsotropicGaussian { sigma: 0.5 };
        let direct = sample_weights_with(&theta, &prior, eps.clone()).unwrap();
        let mut g = Graph::new();
        let (mu, rho) = (g.param(theta.mu.clone()), g.param(theta.rho.clone()));
        let gw = reparameterize(&mut g, mu, rho, eps, &prior).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * a.abs().max(1.0);
        assert!(g
            .value(gw.w)
            .data()
            .iter()
            .zip(direct.w.data())
            .all(|(&a, &b)| close(a, b)));
        assert!(close(g.value(gw.log_q).item(), direct.log_q));
        assert!(close(g.value(gw.log_prior).item(), direct.log_prior));
    }
}

#[test]
fn sample_shape_mismatch_is_rejected() {
    let theta = GaussianParam::new(Tensor::zeros(&[2]), Tensor::zeros(&[2])).unwrap();
    assert!(sample_weights_with(&theta, &PriorSpec::default(), Tensor::zeros(&[3])).is_err());
    assert!(GaussianParam::new(Tensor::zeros(&[2]), Tensor::zeros(&[1, 2])).is_err());
    assert!(PriorSpec::IsotropicGaussian { sigma: 0.0 }.validate().is_err());
}
