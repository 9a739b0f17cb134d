//! Finite-difference gradients, Adam and backprop against independent
//! reference computations.

mod support;

use support::oracles::*;

#[test]
fn batch_gradient_matches_quadratic_derivative() {
    for seed in 0..20 {
        let c = gradient_check(seed, 0.001);
        assert!(c.relative_error <= 1e-2, "seed {seed}: {c:?}");
        assert!(c.absolute_error <= c.error_bound, "seed {seed}: {c:?}");
        assert!((0.3..=0.7).contains(&c.bias_factor), "seed {seed}: {c:?}");
    }
}

#[test]
fn adam_matches_reference_trajectories() {
    for (name, grads) in adam_sequences() {
        for lr in [0.001, 0.01, 0.3] {
            let dev = adam_max_deviation(&grads, lr);
            assert!(dev <= 1e-9, "{name} lr {lr}: {dev}");
        }
    }
}

#[test]
fn backprop_matches_central_differences() {
    for (arch, side, width) in BACKPROP_INSTANCES {
        for seed in [1, 2, 3] {
            let c = backprop_check(arch, side, width, seed, 1e-5);
            assert!(c.parameters <= 1000, "{c:?}");
            assert!(c.worst_relative_error <= 1e-4, "{c:?}");
        }
    }
}
