mod support;

use distcap::losses::{analytic_gradients, relative_error, GradInstance, LossWeights};
use support::dd::{Dd, LN2};
use support::grad_oracle::central_differences;

#[test]
fn double_double_constants() {
    let ln2 = Dd::new(2.0).ln();
    assert!((ln2 - LN2).hi.abs() < 1e-30);
    // e = 2.718281828459045 + 1.4456468917292502e-16
    let e = Dd::ONE.exp();
    let want = Dd {
        hi: std::f64::consts::E,
        lo: 1.4456468917292502e-16,
    };
    assert!((e - want).hi.abs() < 1e-30);
    let third = Dd::ONE / Dd::new(3.0);
    assert!((third * Dd::new(3.0) - Dd::ONE).hi.abs() < 1e-31);
    let r = Dd::new(2.0).sqrt();
    assert!((r * r - Dd::new(2.0)).hi.abs() < 1e-30);
}

#[test]
fn exp_and_ln_are_inverse() {
    for x in [-30.0, -1.5, -1e-3, 0.25, 3.0, 40.0] {
        let x = Dd::new(x);
        let back = x.exp().ln();
        assert!((back - x).hi.abs() < 1e-28 * (1.0 + x.hi.abs()), "{x:?}");
    }
}

#[test]
fn oracle_agrees_with_analytic_gradients() {
    for seed in [3, 11] {
        let inst = GradInstance::random(seed);
        let mut grads = inst.params.zeros_like();
        analytic_gradients(&inst.params, &inst.example(), LossWeights::default(), &mut grads).unwrap();
        let numeric = central_differences(&inst, 1e-5);
        for (a, n) in grads.flatten().into_iter().zip(numeric) {
            assert!(relative_error(a, n) < 1e-6, "seed {seed}: {a} vs {n}");
        }
    }
}
