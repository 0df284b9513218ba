mod support;

use privada_core::accountant::{self, PrivacyLedger, SamplingScheme, DEFAULT_C2};

#[test]
fn gaussian_rdp_is_exact() {
    let check = support::gaussian_rdp_check();
    assert!(check.passed, "{}", check.detail);
}

#[test]
fn subsampled_rdp_matches_quadrature() {
    let check = support::accountant_quadrature_check();
    assert!(check.passed, "{}", check.detail);
}

#[test]
fn quadrature_oracle_reproduces_the_unsampled_closed_form() {
    // with q = 1 the integral is E[exp(α(2x−1)/(2σ²))] = exp(α(α−1)/(2σ²))
    for sigma in [0.5, 1.0, 3.0] {
        for alpha in [2u32, 5, 17] {
            let got = support::subsampled_rdp_by_quadrature(1.0, sigma, alpha);
            let want = f64::from(alpha) / (2.0 * sigma * sigma);
            assert!((got - want).abs() <= 1e-9 * want, "σ={sigma} α={alpha}: {got} vs {want}");
        }
    }
}

#[test]
fn epsilon_is_monotone_in_steps_and_noise() {
    let check = support::accountant_monotonicity_check(1000, 21);
    assert!(check.passed, "{}", check.detail);
}

#[test]
fn subsampling_never_costs_more_than_the_full_mechanism() {
    for q in [0.001, 0.03, 0.2, 0.7, 0.999] {
        for sigma in [0.5, 1.0, 4.0] {
            for alpha in [2u32, 3, 8, 32, 128] {
                let sub = accountant::subsampled_gaussian_rdp(q, sigma, alpha).unwrap();
                let full = accountant::gaussian_rdp(sigma, f64::from(alpha));
                assert!(sub <= full * (1.0 + 1e-12), "q={q} σ={sigma} α={alpha}");
            }
        }
    }
}

#[test]
fn default_c2_bound_stays_within_target() {
    // σ from the closed-form bound must make the accountant report at most
    // the requested ε wherever the bound's precondition holds
    let orders = accountant::default_orders();
    let delta = 1e-5;
    let mut checked = 0;
    for q in [0.001, 0.005, 0.01, 0.02, 0.05, 0.1] {
        for steps in [100u64, 1_000, 5_000, 20_000, 100_000] {
            for eps in [0.1, 0.5, 1.0, 2.5, 8.0, 15.0] {
                let bound = accountant::sufficient_sigma(q, steps, eps, delta, 1.0, DEFAULT_C2);
                if !bound.precondition_met {
                    continue;
                }
                let got = accountant::epsilon_for(q, bound.sigma, steps, delta, &orders).unwrap().epsilon;
                assert!(got <= eps, "q={q} T={steps} ε={eps}: σ={} gives ε={got}", bound.sigma);
                checked += 1;
            }
        }
    }
    assert!(checked > 20, "only {checked} grid points met the precondition");
}

#[test]
fn calibrated_sigma_is_tight() {
    let orders = accountant::default_orders();
    for (q, steps, eps) in [(0.01, 1000, 1.0), (0.064, 400, 2.5), (0.05, 3000, 15.0)] {
        let s = accountant::calibrate_sigma(q, steps, eps, 1e-5, &orders).unwrap();
        let at = accountant::epsilon_for(q, s, steps, 1e-5, &orders).unwrap().epsilon;
        let below = accountant::epsilon_for(q, s * (1.0 - 1e-4), steps, 1e-5, &orders).unwrap().epsilon;
        assert!(at <= eps && below > eps, "q={q}: σ={s} ε={at} ε(σ⁻)={below}");
    }
}

#[test]
fn ledger_digest_depends_only_on_events() {
    let mut a = PrivacyLedger::new(1e-5, SamplingScheme::Poisson).unwrap();
    let mut b = PrivacyLedger::new(1e-5, SamplingScheme::Poisson).unwrap();
    a.record(0.01, 1.1, 3).unwrap();
    for _ in 0..3 {
        b.record(0.01, 1.1, 1).unwrap();
    }
    assert_eq!(a.digest(), b.digest());
    let before = a.digest();
    let _ = a.epsilon(&accountant::default_orders()).unwrap();
    assert_eq!(a.digest(), before);
    b.record(0.01, 1.2, 1).unwrap();
    assert_ne!(a.digest(), b.digest());
}
