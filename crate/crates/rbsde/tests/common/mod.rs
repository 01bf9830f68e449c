//! Independent backward dynamic-programming oracles used to cross-check the
//! solver. Deliberately naive: dense matrices, exhaustive loops, no shared
//! code with the library's backward recursion.

// Each test binary uses its own subset of the oracles.
#![allow(dead_code)]

use rbsde::chain::ChainApprox;

/// Extracts step `m` of a chain as a dense row-stochastic matrix. Extraction
/// only; the DP below never touches the library's recursion.
pub fn dense_kernel(chain: &ChainApprox, m: usize) -> Vec<Vec<f64>> {
    let s_count = chain.n_states();
    let n = chain.n_nodes();
    let mut p = vec![vec![0.0; s_count]; s_count];
    for s in 0..s_count {
        let row = chain.row(m, s);
        let node = s % n;
        p[s][row.up as usize] += row.p_up;
        p[s][row.down as usize] += row.p_down;
        p[s][s] += row.p_mid;
        for &(target, pr) in &row.jumps {
            p[s][target as usize] += pr;
        }
        for (j, &pr) in row.switches.iter().enumerate() {
            if pr > 0.0 {
                p[s][j * n + node] += pr;
            }
        }
    }
    p
}

fn mat_vec(p: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Dynkin-game value by exhaustive backward min-max DP with zero driver:
/// `value_m = min(U_m, max(L_m, P_m · value_{m+1}))`, `value_M = terminal`.
///
/// `lower[m][s]` / `upper[m][s]` are the per-step barrier grids
/// (`lower.len() == upper.len() == kernels.len() + 1`; the terminal row is
/// not projected).
pub fn dynkin_min_max(
    kernels: &[Vec<Vec<f64>>],
    terminal: &[f64],
    lower: &[Vec<f64>],
    upper: &[Vec<f64>],
) -> Vec<f64> {
    let m_steps = kernels.len();
    let mut value = terminal.to_vec();
    for m in (0..m_steps).rev() {
        let cont = mat_vec(&kernels[m], &value);
        value = cont
            .iter()
            .enumerate()
            .map(|(s, &c)| c.max(lower[m][s]).min(upper[m][s]))
            .collect();
    }
    value
}

/// Snell-envelope DP for the one-barrier problem with discounting driver
/// `g = −r·y` evaluated at the continuation value:
/// `value_m = max(L_m, (1 − r·Δt)·(P_m · value_{m+1}))`.
pub fn snell_envelope(
    kernels: &[Vec<Vec<f64>>],
    terminal: &[f64],
    lower: &[Vec<f64>],
    r: f64,
    dt: f64,
) -> Vec<f64> {
    let m_steps = kernels.len();
    let mut value = terminal.to_vec();
    for m in (0..m_steps).rev() {
        let cont = mat_vec(&kernels[m], &value);
        value = cont
            .iter()
            .enumerate()
            .map(|(s, &c)| ((1.0 - r * dt) * c).max(lower[m][s]))
            .collect();
    }
    value
}

/// Same Snell-envelope DP for a time-homogeneous chain: one dense kernel
/// reused across `m_steps` steps (the per-step variant would need the full
/// kernel stack in memory on large grids).
#[allow(dead_code)]
pub fn snell_envelope_homogeneous(
    kernel: &[Vec<f64>],
    m_steps: usize,
    terminal: &[f64],
    lower: &[Vec<f64>],
    r: f64,
    dt: f64,
) -> Vec<f64> {
    let mut value = terminal.to_vec();
    for m in (0..m_steps).rev() {
        let cont = mat_vec(kernel, &value);
        value = cont
            .iter()
            .enumerate()
            .map(|(s, &c)| ((1.0 - r * dt) * c).max(lower[m][s]))
            .collect();
    }
    value
}

/// Plain iterated conditional expectation (no barriers, no driver), for
/// martingale cross-checks.
pub fn iterated_expectation(kernels: &[Vec<Vec<f64>>], terminal: &[f64]) -> Vec<f64> {
    let mut value = terminal.to_vec();
    for m in (0..kernels.len()).rev() {
        value = mat_vec(&kernels[m], &value);
    }
    value
}
