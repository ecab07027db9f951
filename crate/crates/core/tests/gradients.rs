use sotglp_core::model::Ablations;
use sotglp_core::suite::{gradient_check, GradCheckSetup};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn check(setup: GradCheckSetup, unroll: bool, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let err = gradient_check(setup, unroll, seed, H).unwrap();
        assert!(
            err <= TOL,
            "{setup:?} unroll={unroll} seed={seed}: {err:.3e}"
        );
    }
}

#[test]
fn full_loss_unrolled_ten_seeds() {
    check(GradCheckSetup::default(), true, 0..10);
}

#[test]
fn full_loss_detached_ten_seeds() {
    check(GradCheckSetup::default(), false, 0..10);
}

#[test]
fn ablated_variants() {
    let variants = [
        Ablations {
            no_vv: true,
            ..Default::default()
        },
        Ablations {
            no_proj: true,
            ..Default::default()
        },
        Ablations {
            shared_local: true,
            ..Default::default()
        },
        Ablations {
            detach_plan: true,
            ..Default::default()
        },
        Ablations {
            no_normalize: true,
            ..Default::default()
        },
        Ablations {
            no_vv: true,
            no_proj: true,
            shared_local: true,
            ..Default::default()
        },
    ];
    for ablations in variants {
        let setup = GradCheckSetup {
            ablations,
            ..Default::default()
        };
        check(setup, true, 0..3);
    }
}

#[test]
fn larger_support_and_lambda() {
    let setup = GradCheckSetup {
        num_classes: 3,
        num_patches: 9,
        top_k: 5,
        num_local: 3,
        lambda: 1.0,
        ..Default::default()
    };
    check(setup, true, 0..3);
    check(setup, false, 0..3);
}

#[test]
fn top_k_equal_to_patch_count() {
    let setup = GradCheckSetup {
        top_k: 6,
        ..Default::default()
    };
    check(setup, true, 0..3);
}
