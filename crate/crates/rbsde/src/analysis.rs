//! Verification instruments: norm functionals of the solution spaces, a
//! priori bound/error-trend reports over data sequences, the multiplicative
//! adjoint oracle for linear problems, the comparison checker, and a Monte
//! Carlo consistency check of the exact norm DPs against sampled chain
//! paths.
//!
//! The discrete adjoint convention is chosen so the linear representation
//! identity telescopes exactly (branchwise), rather than discretizing the
//! stochastic-exponential formula; the exponential form is recovered
//! asymptotically and pinned by a unit test.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chain::ChainApprox;
use crate::data::{CostFunctions, Driver, DriverArgs, ProblemData, ProblemKind, ResolvedTau};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::solver::{solve, SolutionQuadruple};

/// Squared norms of a solution quadruple from a fixed start state, all
/// computed by exact DPs on the chain (no sampling).
///
/// Sup-in-time second moments are reported in their optional-stopping form
/// `sup_tau E[v_tau^2]` — the exact path-functional DP the chain supports
/// at per-state indexing; it lower-bounds `E[sup v^2]` and coincides with
/// it for monotone processes (in particular for `K±`, where the sup is the
/// terminal value).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct NormReport {
    pub s2_y: f64,
    pub h2_z: f64,
    pub hmu2_v: f64,
    pub s2_kplus: f64,
    pub s2_kminus: f64,
    /// Data-size proxy: `‖ξ‖² + ‖g(0,0,0)‖² + ‖L‖² + ‖U‖²` (+ the `alpha`
    /// proxy when a density bound is attached).
    pub data_size: f64,
}

impl NormReport {
    pub fn all_finite(&self) -> bool {
        [self.s2_y, self.h2_z, self.hmu2_v, self.s2_kplus, self.s2_kminus, self.data_size]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Forward marginals `p_0, …, p_M` from a point mass at `start_state`.
fn forward_marginals(chain: &ChainApprox, start_state: usize) -> Result<Vec<Vec<f64>>> {
    let mut p = vec![0.0; chain.n_states()];
    p[start_state] = 1.0;
    let mut out = Vec::with_capacity(chain.n_steps() + 1);
    out.push(p.clone());
    for m in 0..chain.n_steps() {
        p = chain.push_forward(m, &p)?;
        out.push(p.clone());
    }
    Ok(out)
}

/// Optional-stopping DP on squares: `V_M = q_M²`,
/// `V_m = max(q_m², E_m[V_{m+1}])`; returns `V_0` at `start_state`.
fn sup_sq_dp(
    chain: &ChainApprox,
    q: impl Fn(usize, usize) -> f64,
    start_state: usize,
) -> Result<f64> {
    let s_count = chain.n_states();
    let m_steps = chain.n_steps();
    let mut v: Vec<f64> = (0..s_count).map(|s| q(m_steps, s).powi(2)).collect();
    for m in (0..m_steps).rev() {
        let cond = chain.conditional_expectation(m, &v)?;
        for s in 0..s_count {
            v[s] = q(m, s).powi(2).max(cond[s]);
        }
    }
    Ok(v[start_state])
}

/// `Σ_m Δt Σ_s p_m(s) q(m,s)` over the non-terminal rows.
fn h2_integral(
    chain: &ChainApprox,
    marginals: &[Vec<f64>],
    q: impl Fn(usize, usize) -> f64,
) -> f64 {
    let mut acc = 0.0;
    for (m, p) in marginals.iter().enumerate().take(chain.n_steps()) {
        let mut row = 0.0;
        for (s, &mass) in p.iter().enumerate() {
            if mass > 0.0 {
                row += mass * q(m, s);
            }
        }
        acc += chain.dt * row;
    }
    acc
}

/// `|V|²_μ = Σ_atoms Ṽ²·f·mass + Σ_{j≠i} W̃²·λ_ij` at one node.
pub fn v_norm_sq(
    model: &ModelSpec,
    t: f64,
    x: f64,
    i: usize,
    vtilde: &[f64],
    wtilde: &[f64],
) -> f64 {
    let xs = [x];
    let mut acc = 0.0;
    for (a, atom) in model.jump_atoms.iter().enumerate() {
        let f = model.jump_intensity(t, &xs, i, a);
        acc += vtilde[a] * vtilde[a] * f * atom.mass;
    }
    let lam = model.regime_intensity(t, &xs);
    for (j, w) in wtilde.iter().enumerate() {
        if j != i {
            acc += w * w * lam[i * model.k + j];
        }
    }
    acc
}

/// Exact `(E[K_T], E[K_T²])` of the node-assigned increment field from
/// `start_state`, by the paired first/second-moment backward DP.
fn k_moments(
    chain: &ChainApprox,
    dk: impl Fn(usize, usize) -> f64,
    start_state: usize,
) -> Result<(f64, f64)> {
    let s_count = chain.n_states();
    let m_steps = chain.n_steps();
    let mut a = vec![0.0; s_count];
    let mut b = vec![0.0; s_count];
    for m in (0..m_steps).rev() {
        let ea = chain.conditional_expectation(m, &a)?;
        let eb = chain.conditional_expectation(m, &b)?;
        for s in 0..s_count {
            let d = dk(m, s);
            b[s] = d * d + 2.0 * d * ea[s] + eb[s];
            a[s] = d + ea[s];
        }
    }
    Ok((a[start_state], b[start_state]))
}

/// Computes the solution and data norms from `start_state`.
pub fn norms(
    chain: &ChainApprox,
    data: &ProblemData,
    sol: &SolutionQuadruple,
    start_state: usize,
) -> Result<NormReport> {
    let marginals = forward_marginals(chain, start_state)?;
    let n = chain.n_nodes();
    let s_count = chain.n_states();
    if sol.n_states != s_count || sol.m_steps != chain.n_steps() {
        return Err(Error::DimensionMismatch { expected: s_count, got: sol.n_states });
    }
    let s2_y = sup_sq_dp(chain, |m, s| sol.y_at(m, s), start_state)?;
    let h2_z = h2_integral(chain, &marginals, |m, s| sol.z_at(m, s).powi(2));
    let hmu2_v = h2_integral(chain, &marginals, |m, s| {
        v_norm_sq(
            &data.model,
            chain.times[m],
            chain.x_nodes[s % n],
            s / n,
            sol.vtilde_at(m, s),
            sol.wtilde_at(m, s),
        )
    });
    let (_, s2_kplus) = k_moments(chain, |m, s| sol.dk_plus_at(m, s), start_state)?;
    let (_, s2_kminus) = k_moments(chain, |m, s| sol.dk_minus_at(m, s), start_state)?;

    // Data size Φ-proxy.
    let terminal_sq: f64 = marginals[chain.n_steps()]
        .iter()
        .enumerate()
        .map(|(s, &p)| p * (data.cost.psi)(chain.x_nodes[s % n], s / n).powi(2))
        .sum();
    let zeros_v = vec![0.0; data.model.jump_atoms.len()];
    let zeros_w = vec![0.0; chain.k];
    let g0 = h2_integral(chain, &marginals, |m, s| {
        data.driver_value(
            chain.times[m],
            chain.x_nodes[s % n],
            s / n,
            0.0,
            0.0,
            &zeros_v,
            &zeros_w,
        )
        .powi(2)
    });
    let mut data_size = terminal_sq + g0;
    if let Some(ell) = &data.cost.ell {
        data_size += sup_sq_dp(
            chain,
            |m, s| ell(chain.times[m], chain.x_nodes[s % n], s / n),
            start_state,
        )?;
    }
    if let Some(h) = &data.cost.h_upper {
        data_size += sup_sq_dp(
            chain,
            |m, s| h(chain.times[m], chain.x_nodes[s % n], s / n),
            start_state,
        )?;
    }
    if let Some(alpha) = &data.alpha {
        data_size += h2_integral(chain, &marginals, |m, s| {
            alpha(chain.times[m], chain.x_nodes[s % n], s / n).powi(2)
        });
    }
    let report = NormReport { s2_y, h2_z, hmu2_v, s2_kplus, s2_kminus, data_size };
    if !report.all_finite() {
        return Err(Error::Solve("norm report contains non-finite entries".into()));
    }
    Ok(report)
}

/// One entry of the a priori sequence report; differences are taken
/// against the last element of the sequence, treated as the limit datum.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AprioriEntry {
    pub norms: NormReport,
    pub diff_s2_y: f64,
    pub diff_h2_z: f64,
    pub diff_hmu2_v: f64,
    /// `diff_s2_y + diff_h2_z + diff_hmu2_v`.
    pub diff_solution: f64,
    /// `‖ξ − ξ^∞‖² + ‖(g − g^∞)(Y^∞, Z^∞, V^∞)‖²` (+ barrier differences
    /// when barriers differ).
    pub diff_data: f64,
    /// Common-barrier control ratio `diff_solution / diff_data`; `None`
    /// when the data difference vanishes or the barriers differ.
    pub control_ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AprioriReport {
    pub entries: Vec<AprioriEntry>,
    /// Max over the sequence of solution-norm to data-norm ratio (the
    /// boundedness claim; no specific constant asserted).
    pub max_solution_to_data_ratio: f64,
    /// Whether the solution-difference norms are nonincreasing along the
    /// sequence (slack `1e−12`), excluding the reference entry.
    pub diffs_decreasing: bool,
    pub common_barriers: bool,
}

fn barrier_sup_diff(
    chain: &ChainApprox,
    a: &Option<crate::data::ObstacleFn>,
    b: &Option<crate::data::ObstacleFn>,
    start_state: usize,
) -> Result<f64> {
    let n = chain.n_nodes();
    match (a, b) {
        (None, None) => Ok(0.0),
        (Some(fa), Some(fb)) => sup_sq_dp(
            chain,
            |m, s| {
                let (t, x, i) = (chain.times[m], chain.x_nodes[s % n], s / n);
                fa(t, x, i) - fb(t, x, i)
            },
            start_state,
        ),
        _ => Err(Error::Data("barrier presence differs across the sequence".into())),
    }
}

/// Per-sequence norm and difference report backing the error-trend checks.
pub fn apriori_report(
    chain: &ChainApprox,
    items: &[(&ProblemData, &SolutionQuadruple)],
    start_state: usize,
) -> Result<AprioriReport> {
    if items.is_empty() {
        return Err(Error::Data("a priori report needs a nonempty sequence".into()));
    }
    let n = chain.n_nodes();
    let marginals = forward_marginals(chain, start_state)?;
    let (ref_data, ref_sol) = items[items.len() - 1];

    let mut entries = Vec::with_capacity(items.len());
    let mut max_ratio = 0.0f64;
    let mut common_barriers = true;
    for &(data, sol) in items {
        if sol.n_states != ref_sol.n_states || sol.m_steps != ref_sol.m_steps {
            return Err(Error::DimensionMismatch {
                expected: ref_sol.n_states,
                got: sol.n_states,
            });
        }
        let own = norms(chain, data, sol, start_state)?;
        if own.data_size > 0.0 {
            max_ratio = max_ratio.max((own.s2_y + own.h2_z + own.hmu2_v) / own.data_size);
        }
        let diff_s2_y = sup_sq_dp(chain, |m, s| sol.y_at(m, s) - ref_sol.y_at(m, s), start_state)?;
        let diff_h2_z = h2_integral(chain, &marginals, |m, s| {
            (sol.z_at(m, s) - ref_sol.z_at(m, s)).powi(2)
        });
        let diff_hmu2_v = h2_integral(chain, &marginals, |m, s| {
            let dv: Vec<f64> = sol
                .vtilde_at(m, s)
                .iter()
                .zip(ref_sol.vtilde_at(m, s))
                .map(|(a, b)| a - b)
                .collect();
            let dw: Vec<f64> = sol
                .wtilde_at(m, s)
                .iter()
                .zip(ref_sol.wtilde_at(m, s))
                .map(|(a, b)| a - b)
                .collect();
            v_norm_sq(&data.model, chain.times[m], chain.x_nodes[s % n], s / n, &dv, &dw)
        });

        // Data differences against the reference, evaluated on the
        // reference solution (the Eq-23-style control side).
        let xi_diff: f64 = marginals[chain.n_steps()]
            .iter()
            .enumerate()
            .map(|(s, &p)| {
                let (x, i) = (chain.x_nodes[s % n], s / n);
                p * ((data.cost.psi)(x, i) - (ref_data.cost.psi)(x, i)).powi(2)
            })
            .sum();
        let g_diff = h2_integral(chain, &marginals, |m, s| {
            let (t, x, i) = (chain.times[m], chain.x_nodes[s % n], s / n);
            let y = ref_sol.y_at(m, s);
            let z = ref_sol.z_at(m, s);
            let vt = ref_sol.vtilde_at(m, s);
            let wt = ref_sol.wtilde_at(m, s);
            (data.driver_value(t, x, i, y, z, vt, wt)
                - ref_data.driver_value(t, x, i, y, z, vt, wt))
            .powi(2)
        });
        let ell_diff = barrier_sup_diff(chain, &data.cost.ell, &ref_data.cost.ell, start_state)?;
        let h_diff =
            barrier_sup_diff(chain, &data.cost.h_upper, &ref_data.cost.h_upper, start_state)?;
        let barriers_common = ell_diff < 1e-14 && h_diff < 1e-14;
        common_barriers &= barriers_common;

        let mut diff_data = xi_diff + g_diff;
        if !barriers_common {
            diff_data += ell_diff + h_diff;
        }
        let diff_solution = diff_s2_y + diff_h2_z + diff_hmu2_v;
        let control_ratio = if barriers_common && diff_data > 0.0 {
            Some(diff_solution / diff_data)
        } else {
            None
        };
        entries.push(AprioriEntry {
            norms: own,
            diff_s2_y,
            diff_h2_z,
            diff_hmu2_v,
            diff_solution,
            diff_data,
            control_ratio,
        });
    }
    let diffs_decreasing = entries
        .windows(2)
        .take(entries.len().saturating_sub(1))
        .all(|w| w[1].diff_solution <= w[0].diff_solution + 1e-12);
    Ok(AprioriReport { entries, max_solution_to_data_ratio: max_ratio, diffs_decreasing, common_barriers })
}

pub type CoeffFn = Arc<dyn Fn(f64, f64, usize) -> f64 + Send + Sync>;

/// Coefficients of the linear driver `g = β·y + π·z + κ·⟨η, v⟩_μ` and the
/// matching adjoint.
#[derive(Clone)]
pub struct AdjointCoeffs {
    pub beta: CoeffFn,
    pub pi: CoeffFn,
    pub kappa: CoeffFn,
    /// Mark weight per jump atom, ≥ 0.
    pub eta_jump: Vec<f64>,
    /// Mark weight per regime target, ≥ 0 (own-regime entry unused).
    pub eta_switch: Vec<f64>,
}

impl AdjointCoeffs {
    pub fn constant(beta: f64, pi: f64, kappa: f64, n_atoms: usize, k: usize) -> Self {
        Self {
            beta: Arc::new(move |_, _, _| beta),
            pi: Arc::new(move |_, _, _| pi),
            kappa: Arc::new(move |_, _, _| kappa),
            eta_jump: vec![1.0; n_atoms],
            eta_switch: vec![1.0; k],
        }
    }
}

/// Per-branch multiplicative factors of one state's adjoint step.
#[derive(Clone, Debug)]
pub struct BranchFactors {
    pub up: f64,
    pub down: f64,
    pub mid: f64,
    pub jumps: Vec<f64>,
    pub switches: Vec<f64>,
}

/// The discrete adjoint: one factor per chain branch, built so that the
/// branchwise expectation is exactly `1 + βΔt` (drift part), the centered
/// diffusion weight is `π(ΔB̂ − E[ΔB̂])`, and jump/switch branches carry
/// `1 + κη` relative to the compensating mid correction.
#[derive(Clone, Debug)]
pub struct AdjointPath {
    /// `[step][state]`; for time-homogeneous coefficient functions the
    /// steps still differ through `t`, so factors are stored per step.
    pub factors: Vec<Vec<BranchFactors>>,
    /// Min over all branches; > 0 by the build-time positivity assertion.
    pub min_factor: f64,
}

impl AdjointPath {
    /// `E[Γ-factor] = 1 + βΔt` at `(m, s)`, exact by construction.
    pub fn expectation_factor(&self, chain: &ChainApprox, m: usize, s: usize) -> f64 {
        let f = &self.factors[m][s];
        let row = chain.row(m, s);
        let mut acc = row.p_up * f.up + row.p_down * f.down + row.p_mid * f.mid;
        for (a, &(_, p)) in row.jumps.iter().enumerate() {
            acc += p * f.jumps[a];
        }
        for (j, &p) in row.switches.iter().enumerate() {
            if p > 0.0 {
                acc += p * f.switches[j];
            }
        }
        acc
    }
}

/// Builds the adjoint factors, enforcing `κη > −1` at every mark and
/// positivity of every branch factor.
pub fn adjoint_gamma(chain: &ChainApprox, coeffs: &AdjointCoeffs) -> Result<AdjointPath> {
    if coeffs.eta_jump.iter().chain(&coeffs.eta_switch).any(|&e| !(e >= 0.0) || !e.is_finite()) {
        return Err(Error::AdjointPrecondition("mark weight eta must be finite and >= 0".into()));
    }
    let n = chain.n_nodes();
    let s_count = chain.n_states();
    let m_steps = chain.n_steps();
    let dt = chain.dt;
    let mut min_factor = f64::INFINITY;
    let mut factors = Vec::with_capacity(m_steps);
    for m in 0..m_steps {
        let t = chain.times[m];
        let mut step = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let row = chain.row(m, s);
            let x = chain.x_nodes[s % n];
            let i = s / n;
            let b = (coeffs.beta)(t, x, i) * dt;
            let p = (coeffs.pi)(t, x, i);
            let kap = (coeffs.kappa)(t, x, i);

            for (a, _) in row.jumps.iter().enumerate() {
                if kap * coeffs.eta_jump[a] <= -1.0 {
                    return Err(Error::AdjointPrecondition(format!(
                        "kappa*eta <= -1 on jump atom {a} at x = {x}, regime = {i}"
                    )));
                }
            }
            for (j, &pr) in row.switches.iter().enumerate() {
                if pr > 0.0 && kap * coeffs.eta_switch[j] <= -1.0 {
                    return Err(Error::AdjointPrecondition(format!(
                        "kappa*eta <= -1 on switch to regime {j} at x = {x}, regime = {i}"
                    )));
                }
            }

            let db = row.db();
            let mu = row.db_mean();
            let base = 1.0 + b - p * mu;
            // Compensator mass carried by the mid branch so the drift part
            // of the expectation stays exactly 1 + βΔt.
            let comp: f64 = kap
                * (row
                    .jumps
                    .iter()
                    .enumerate()
                    .map(|(a, &(_, q))| coeffs.eta_jump[a] * q)
                    .sum::<f64>()
                    + row
                        .switches
                        .iter()
                        .enumerate()
                        .map(|(j, &q)| coeffs.eta_switch[j] * q)
                        .sum::<f64>());
            if comp != 0.0 && row.p_mid <= 0.0 {
                return Err(Error::AdjointPrecondition(format!(
                    "vanishing mid branch at x = {x}, regime = {i} cannot carry the \
                     jump compensator correction"
                )));
            }
            let mid = if row.p_mid > 0.0 { base - comp / row.p_mid } else { base };
            let f = BranchFactors {
                up: base + p * db,
                down: base - p * db,
                mid,
                jumps: (0..row.jumps.len())
                    .map(|a| base + kap * coeffs.eta_jump[a])
                    .collect(),
                switches: (0..chain.k).map(|j| base + kap * coeffs.eta_switch[j]).collect(),
            };
            min_factor = min_factor.min(f.up).min(f.down);
            if row.p_mid > 0.0 {
                min_factor = min_factor.min(f.mid);
            }
            for (a, &(_, q)) in row.jumps.iter().enumerate() {
                if q > 0.0 {
                    min_factor = min_factor.min(f.jumps[a]);
                }
            }
            for (j, &q) in row.switches.iter().enumerate() {
                if q > 0.0 {
                    min_factor = min_factor.min(f.switches[j]);
                }
            }
            step.push(f);
        }
        factors.push(step);
    }
    if !min_factor.is_finite() || min_factor <= 0.0 {
        return Err(Error::AdjointPrecondition(format!(
            "adjoint factor {min_factor} <= 0; positivity of Gamma unprovable"
        )));
    }
    Ok(AdjointPath { factors, min_factor })
}

/// A linear problem for the representation identity: driver
/// `g = β·y + π·z + κ·⟨η, v⟩_μ`, per-state terminal values, optional
/// finite-variation increments and stopping index.
#[derive(Clone)]
pub struct LinearProblem {
    pub coeffs: AdjointCoeffs,
    /// Terminal values per state.
    pub xi: Vec<f64>,
    /// `[(M+1) × S]` per-step increments, rows `m < M`.
    pub a_increments: Option<Vec<f64>>,
    pub tau: Option<ResolvedTau>,
}

/// The Direct driver matching the adjoint branch factors: with the chain's
/// jump probability `f·mass·Δt` and switch probability `λ·Δt`, the solver's
/// explicit step reproduces `Y_m = E[Γ-factor · Y_{m+1}] + ΔA` exactly.
fn linear_driver(model: &ModelSpec, coeffs: &AdjointCoeffs) -> Driver {
    let model = model.clone();
    let coeffs = coeffs.clone();
    Driver::Direct(Arc::new(move |a: &DriverArgs| {
        let xs = [a.x];
        let beta = (coeffs.beta)(a.t, a.x, a.i);
        let pi = (coeffs.pi)(a.t, a.x, a.i);
        let kap = (coeffs.kappa)(a.t, a.x, a.i);
        let mut mark_part = 0.0;
        for (idx, atom) in model.jump_atoms.iter().enumerate() {
            let f = model.jump_intensity(a.t, &xs, a.i, idx);
            mark_part += coeffs.eta_jump[idx] * f * atom.mass * a.vtilde[idx];
        }
        let lam = model.regime_intensity(a.t, &xs);
        for (j, w) in a.wtilde.iter().enumerate() {
            if j != a.i {
                mark_part += coeffs.eta_switch[j] * lam[a.i * model.k + j] * w;
            }
        }
        beta * a.y + pi * a.z + kap * mark_part
    }))
}

/// Solves the linear problem and verifies the representation identity
/// `Γ₀Y₀ = E[Γ_τ Y_τ + Σ_{m<τ} Γ_m ΔA_m]` by running the adjoint-weighted
/// recursion; returns the max residual over start states. Telescoping
/// makes the residual pure rounding (≤ 1e−11 by contract).
pub fn linear_representation_check(
    chain: &ChainApprox,
    model: &ModelSpec,
    prob: &LinearProblem,
) -> Result<f64> {
    let s_count = chain.n_states();
    let m_steps = chain.n_steps();
    if prob.xi.len() != s_count {
        return Err(Error::DimensionMismatch { expected: s_count, got: prob.xi.len() });
    }
    let gamma = adjoint_gamma(chain, &prob.coeffs)?;

    // Sampled Lipschitz bound in y for the explicit-step feasibility check.
    let n = chain.n_nodes();
    let mut lip = 0.0f64;
    for m in 0..m_steps {
        for s in 0..s_count {
            lip = lip.max((prob.coeffs.beta)(chain.times[m], chain.x_nodes[s % n], s / n).abs());
        }
    }

    // Terminal lookup by exact grid coordinates.
    let xi = prob.xi.clone();
    let x_nodes = chain.x_nodes.clone();
    let psi = Arc::new(move |x: f64, i: usize| {
        let node = x_nodes
            .iter()
            .position(|&g| g == x)
            .expect("terminal evaluated off the spatial grid");
        xi[i * x_nodes.len() + node]
    });
    let data = ProblemData {
        kind: ProblemKind::Bsde,
        cost: CostFunctions {
            driver: linear_driver(model, &prob.coeffs),
            psi,
            ell: None,
            h_upper: None,
            lipschitz: lip,
            monotone_in_r: true,
        },
        model: model.clone(),
        tau: None,
        alpha: None,
        phi: None,
        a_increments: prob.a_increments.clone(),
        stopped_values: None,
    };
    let sol = solve(chain, &data)?;

    let stopped = |m: usize, s: usize| -> bool {
        match &prob.tau {
            Some(tau) => tau.active(m, s),
            None => false,
        }
    };
    // H(m, s) = E[Γ_τ Y_τ + Σ Γ ΔA | state s at m] / Γ_m along the branch
    // weighting; equals Y nodewise when the identity telescopes.
    let mut h: Vec<f64> = (0..s_count).map(|s| sol.y_at(m_steps, s)).collect();
    for m in (0..m_steps).rev() {
        let prev = h.clone();
        for s in 0..s_count {
            if stopped(m, s) {
                h[s] = sol.y_at(m, s);
                continue;
            }
            let row = chain.row(m, s);
            let f = &gamma.factors[m][s];
            let node = s % n;
            let mut acc = row.p_up * f.up * prev[row.up as usize]
                + row.p_down * f.down * prev[row.down as usize]
                + row.p_mid * f.mid * prev[s];
            for (a, &(target, q)) in row.jumps.iter().enumerate() {
                acc += q * f.jumps[a] * prev[target as usize];
            }
            for (j, &q) in row.switches.iter().enumerate() {
                if q > 0.0 {
                    acc += q * f.switches[j] * prev[j * n + node];
                }
            }
            let a_inc = prob.a_increments.as_ref().map(|a| a[m * s_count + s]).unwrap_or(0.0);
            h[s] = acc + a_inc;
        }
    }
    let mut residual = 0.0f64;
    for s in 0..s_count {
        residual = residual.max((sol.y_at(0, s) - h[s]).abs());
    }
    Ok(residual)
}

/// Verdict of the comparison checker.
#[derive(Clone, Debug, PartialEq)]
pub enum ComparisonVerdict {
    /// Hypotheses hold and `Y ≤ Y′` everywhere; carries `min(Y′ − Y)`.
    Pass { min_gap: f64 },
    /// A hypothesis failed; ordering is outside the theorem's scope.
    NotApplicable { hypothesis: String },
    /// Hypotheses hold but ordering broke — a solver bug by contract.
    Fail { min_gap: f64, witness: (usize, usize) },
}

/// Checks the comparison hypotheses nodewise, then the ordering
/// conclusion. Tolerance `1e−12` throughout.
pub fn comparison_check(
    chain: &ChainApprox,
    data: &ProblemData,
    sol: &SolutionQuadruple,
    data_prime: &ProblemData,
    sol_prime: &SolutionQuadruple,
) -> Result<ComparisonVerdict> {
    const TOL: f64 = 1e-12;
    let n = chain.n_nodes();
    let s_count = chain.n_states();
    let m_steps = chain.n_steps();
    if sol.n_states != s_count || sol_prime.n_states != s_count {
        return Err(Error::DimensionMismatch { expected: s_count, got: sol.n_states });
    }
    let na = |hyp: &str| Ok(ComparisonVerdict::NotApplicable { hypothesis: hyp.to_string() });
    if !data.cost.monotone_in_r || !data_prime.cost.monotone_in_r {
        return na("driver not declared monotone in r");
    }
    if !chain.monotone {
        return na("chain kernel not monotone");
    }
    // (i) terminal ordering.
    for s in 0..s_count {
        let (x, i) = (chain.x_nodes[s % n], s / n);
        if (data.cost.psi)(x, i) > (data_prime.cost.psi)(x, i) + TOL {
            return na("terminal condition not dominated (xi <= xi')");
        }
    }
    // (iii) barrier ordering; presence must match.
    let barrier_ordered = |a: &Option<crate::data::ObstacleFn>,
                           b: &Option<crate::data::ObstacleFn>|
     -> Option<bool> {
        match (a, b) {
            (None, None) => Some(true),
            (Some(fa), Some(fb)) => {
                for m in 0..=m_steps {
                    for s in 0..s_count {
                        let (t, x, i) = (chain.times[m], chain.x_nodes[s % n], s / n);
                        if fa(t, x, i) > fb(t, x, i) + TOL {
                            return Some(false);
                        }
                    }
                }
                Some(true)
            }
            _ => None,
        }
    };
    match barrier_ordered(&data.cost.ell, &data_prime.cost.ell) {
        Some(true) => {}
        Some(false) => return na("lower barrier not dominated (L <= L')"),
        None => return na("lower barrier present on only one side"),
    }
    match barrier_ordered(&data.cost.h_upper, &data_prime.cost.h_upper) {
        Some(true) => {}
        Some(false) => return na("upper barrier not dominated (U <= U')"),
        None => return na("upper barrier present on only one side"),
    }
    // (ii) driver domination along the primed solution.
    for m in 0..m_steps {
        for s in 0..s_count {
            let (t, x, i) = (chain.times[m], chain.x_nodes[s % n], s / n);
            let y = sol_prime.y_at(m, s);
            let z = sol_prime.z_at(m, s);
            let vt = sol_prime.vtilde_at(m, s);
            let wt = sol_prime.wtilde_at(m, s);
            if data.driver_value(t, x, i, y, z, vt, wt)
                > data_prime.driver_value(t, x, i, y, z, vt, wt) + TOL
            {
                return na("driver not dominated along the primed solution");
            }
        }
    }
    // Conclusion.
    let mut min_gap = f64::INFINITY;
    let mut witness = (0, 0);
    for m in 0..=m_steps {
        for s in 0..s_count {
            let gap = sol_prime.y_at(m, s) - sol.y_at(m, s);
            if gap < min_gap {
                min_gap = gap;
                witness = (m, s);
            }
        }
    }
    if min_gap >= -TOL {
        Ok(ComparisonVerdict::Pass { min_gap })
    } else {
        Ok(ComparisonVerdict::Fail { min_gap, witness })
    }
}

/// One z-test of an exact chain functional against its Monte Carlo
/// estimate over sampled chain paths.
#[derive(Clone, Copy, Debug)]
pub struct ZTest {
    pub exact: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
}

impl ZTest {
    fn new(exact: f64, sum: f64, sum_sq: f64, n: usize) -> Self {
        let nf = n as f64;
        let mean = sum / nf;
        let var = (sum_sq / nf - mean * mean).max(0.0) / (nf - 1.0).max(1.0) * nf;
        let se = (var / nf).sqrt();
        let z = if se > 0.0 { (mean - exact) / se } else { 0.0 };
        ZTest { exact, estimate: mean, std_error: se, z }
    }

    pub fn within(&self, n_sigma: f64) -> bool {
        self.z.abs() <= n_sigma
    }
}

/// Monte Carlo consistency of the exact norm DPs: simulates paths of the
/// chain itself (so the comparison is in the chain's own law, free of
/// discretization bias) and z-tests the time-integrated functionals and
/// the terminal `K` moments at 4σ.
#[derive(Clone, Copy, Debug)]
pub struct McNormCheck {
    pub h2_z: ZTest,
    pub hmu2_v: ZTest,
    pub mean_kplus: ZTest,
    pub mean_kminus: ZTest,
    pub n_paths: usize,
}

impl McNormCheck {
    pub fn pass(&self) -> bool {
        [self.h2_z, self.hmu2_v, self.mean_kplus, self.mean_kminus]
            .iter()
            .all(|t| t.within(4.0))
    }
}

/// Samples one branch of `row` with `u ∈ [0, 1)`; returns the target state.
fn sample_branch(row: &crate::chain::Row, s: usize, n: usize, u: f64) -> usize {
    let mut acc = row.p_up;
    if u < acc {
        return row.up as usize;
    }
    acc += row.p_down;
    if u < acc {
        return row.down as usize;
    }
    for &(target, p) in &row.jumps {
        acc += p;
        if u < acc {
            return target as usize;
        }
    }
    let node = s % n;
    for (j, &p) in row.switches.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            if u < acc {
                return j * n + node;
            }
        }
    }
    s
}

pub fn mc_norm_check(
    chain: &ChainApprox,
    data: &ProblemData,
    sol: &SolutionQuadruple,
    start_state: usize,
    n_paths: usize,
    seed: u64,
) -> Result<McNormCheck> {
    if n_paths < 2 {
        return Err(Error::Simulation("need at least 2 paths".into()));
    }
    let marginals = forward_marginals(chain, start_state)?;
    let n = chain.n_nodes();
    let exact_h2z = h2_integral(chain, &marginals, |m, s| sol.z_at(m, s).powi(2));
    let exact_hmu2 = h2_integral(chain, &marginals, |m, s| {
        v_norm_sq(
            &data.model,
            chain.times[m],
            chain.x_nodes[s % n],
            s / n,
            sol.vtilde_at(m, s),
            sol.wtilde_at(m, s),
        )
    });
    let (exact_kp, _) = k_moments(chain, |m, s| sol.dk_plus_at(m, s), start_state)?;
    let (exact_km, _) = k_moments(chain, |m, s| sol.dk_minus_at(m, s), start_state)?;

    let m_steps = chain.n_steps();
    // Per-path functionals, then sums and sums of squares for the z-tests.
    let sums = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path as u64);
            let mut s = start_state;
            let mut acc = [0.0f64; 4];
            for m in 0..m_steps {
                let (t, x, i) = (chain.times[m], chain.x_nodes[s % n], s / n);
                acc[0] += chain.dt * sol.z_at(m, s).powi(2);
                acc[1] += chain.dt
                    * v_norm_sq(&data.model, t, x, i, sol.vtilde_at(m, s), sol.wtilde_at(m, s));
                acc[2] += sol.dk_plus_at(m, s);
                acc[3] += sol.dk_minus_at(m, s);
                let u: f64 = rng.r#gen();
                s = sample_branch(chain.row(m, s), s, n, u);
            }
            let mut lifted = [0.0f64; 8];
            for i in 0..4 {
                lifted[i] = acc[i];
                lifted[i + 4] = acc[i] * acc[i];
            }
            lifted
        })
        .reduce(
            || [0.0f64; 8],
            |mut a, b| {
                for i in 0..8 {
                    a[i] += b[i];
                }
                a
            },
        );
    Ok(McNormCheck {
        h2_z: ZTest::new(exact_h2z, sums[0], sums[4], n_paths),
        hmu2_v: ZTest::new(exact_hmu2, sums[1], sums[5], n_paths),
        mean_kplus: ZTest::new(exact_kp, sums[2], sums[6], n_paths),
        mean_kminus: ZTest::new(exact_km, sums[3], sums[7], n_paths),
        n_paths,
    })
}
