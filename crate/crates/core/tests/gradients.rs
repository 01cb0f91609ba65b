mod common;

use common::{gradient_groups, FD_REL_TOL};

fn check(name: &str) {
    let (_, f) = gradient_groups()
        .into_iter()
        .find(|(n, _)| *n == name)
        .unwrap();
    for seed in 0..20 {
        let err = f(seed);
        assert!(
            err <= FD_REL_TOL,
            "{name}, seed {seed}: relative error {err:e}"
        );
    }
}

#[test]
fn tape_ops_match_finite_differences() {
    check("tape ops");
}

#[test]
fn conv_layer_matches_finite_differences() {
    check("conv layer");
}

#[test]
fn adain_matches_finite_differences() {
    check("adain");
}

#[test]
fn normalizations_match_finite_differences() {
    check("normalizations");
}

#[test]
fn in_step_matches_finite_differences() {
    check("in step");
}

#[test]
fn sinkhorn_value_matches_finite_differences() {
    check("sinkhorn value");
}
