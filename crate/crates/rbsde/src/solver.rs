//! Backward dynamic programming on the chain for all problem kinds, with
//! discrete Skorokhod bookkeeping, the pasting construction at a stopping
//! time, and the reflection-density check.
//!
//! The scheme is explicit: the driver is evaluated at the conditional
//! expectation of the next-step value (an implicit per-node fixed point is
//! available behind [`SolveOptions::implicit`]). Reflection is a single
//! median projection per node; the `K` increments it produces satisfy the
//! minimality and mutual-singularity identities exactly by construction,
//! and are re-verified after the solve rather than assumed.

use crate::chain::ChainApprox;
use crate::data::{ProblemData, ProblemKind, ResolvedTau};
use crate::error::{Error, Result};

/// Solver switches. The default is the explicit scheme.
#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// Resolve the driver by per-node fixed-point iteration instead of
    /// evaluating it at the conditional expectation.
    pub implicit: bool,
    /// Fixed-point tolerance for the implicit variant.
    pub tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { implicit: false, tol: 1e-12 }
    }
}

/// Post-solve self-check results.
#[derive(Clone, Copy, Debug, Default)]
pub struct Diagnostics {
    /// Max violation of `L ≤ Y ≤ U` over barrier-active nodes.
    pub max_constraint_violation: f64,
    /// Max of `|Y − L|` over nodes with `ΔK⁺ > 0` and `|U − Y|` over nodes
    /// with `ΔK⁻ > 0`.
    pub minimality_residual: f64,
    /// Max nodewise defect of the discrete backward equation.
    pub backward_residual: f64,
}

/// The solved quadruple on the full time × state grid.
///
/// `Kplus`/`Kminus` are stored as the per-step increments assigned at the
/// node where the reflection occurred (`dk_plus[m·S + s]`, zero at the
/// terminal row); cumulative trajectories are path sums of these
/// increments.
#[derive(Clone, Debug)]
pub struct SolutionQuadruple {
    pub kind: ProblemKind,
    pub m_steps: usize,
    pub n_states: usize,
    pub n_atoms: usize,
    pub k: usize,
    /// `[(M+1) × S]`.
    pub y: Vec<f64>,
    /// `[(M+1) × S]`; row `M` is zero.
    pub z: Vec<f64>,
    /// `[(M+1) × S × atoms]`; row `M` is zero.
    pub vtilde: Vec<f64>,
    /// `[(M+1) × S × k]`; row `M` is zero.
    pub wtilde: Vec<f64>,
    /// `[(M+1) × S]` per-step increments; row `M` is zero.
    pub dk_plus: Vec<f64>,
    pub dk_minus: Vec<f64>,
    /// Which nodes sat on a barrier after projection: 0 none, +1 lower,
    /// −1 upper.
    pub contact: Vec<i8>,
    pub diagnostics: Diagnostics,
}

impl SolutionQuadruple {
    pub fn y_at(&self, m: usize, s: usize) -> f64 {
        self.y[m * self.n_states + s]
    }

    pub fn z_at(&self, m: usize, s: usize) -> f64 {
        self.z[m * self.n_states + s]
    }

    pub fn vtilde_at(&self, m: usize, s: usize) -> &[f64] {
        let base = (m * self.n_states + s) * self.n_atoms;
        &self.vtilde[base..base + self.n_atoms]
    }

    pub fn wtilde_at(&self, m: usize, s: usize) -> &[f64] {
        let base = (m * self.n_states + s) * self.k;
        &self.wtilde[base..base + self.k]
    }

    pub fn dk_plus_at(&self, m: usize, s: usize) -> f64 {
        self.dk_plus[m * self.n_states + s]
    }

    pub fn dk_minus_at(&self, m: usize, s: usize) -> f64 {
        self.dk_minus[m * self.n_states + s]
    }

    /// Cumulative `K⁺` at `(m, s)` in the node-assigned sense (sum of the
    /// increments recorded at this state up to step `m`).
    pub fn kplus_cumulative(&self, m: usize, s: usize) -> f64 {
        (0..m).map(|mm| self.dk_plus_at(mm, s)).sum()
    }

    pub fn kminus_cumulative(&self, m: usize, s: usize) -> f64 {
        (0..m).map(|mm| self.dk_minus_at(mm, s)).sum()
    }
}

/// One state's outcome of a backward step.
#[derive(Clone, Copy)]
struct NodeStep {
    y: f64,
    dk_plus: f64,
    dk_minus: f64,
    contact: i8,
    residual: f64,
}

struct StepInputs<'a> {
    next: &'a [f64],
    lower: Option<&'a [f64]>,
    upper: Option<&'a [f64]>,
}

/// Shared backward step: conditional expectation, martingale components,
/// driver, optional finite-variation increment, then the median projection
/// with Skorokhod bookkeeping. Barrier slices are optional rather than
/// `±inf` sentinels so no infinity arithmetic happens.
fn backward_step(
    chain: &ChainApprox,
    data: &ProblemData,
    m: usize,
    inp: &StepInputs<'_>,
    opts: SolveOptions,
    z_out: &mut [f64],
    vt_out: &mut [f64],
    wt_out: &mut [f64],
    nodes: &mut [NodeStep],
) -> Result<()> {
    let s_count = chain.n_states();
    let n = chain.n_nodes();
    let n_atoms = data.model.jump_atoms.len();
    let k = chain.k;
    let t = chain.times[m];
    let dt = chain.dt;

    let cond = chain.conditional_expectation(m, inp.next)?;
    let parts = chain.martingale_components(m, inp.next)?;
    z_out.copy_from_slice(&parts.z);
    vt_out.copy_from_slice(&parts.vtilde);
    wt_out.copy_from_slice(&parts.wtilde);

    for s in 0..s_count {
        let x = chain.x_nodes[s % n];
        let i = s / n;
        let vt = &parts.vtilde[s * n_atoms..(s + 1) * n_atoms];
        let wt = &parts.wtilde[s * k..(s + 1) * k];
        let a_inc = data
            .a_increments
            .as_ref()
            .map(|a| a[m * s_count + s])
            .unwrap_or(0.0);

        let g_at = |y: f64| data.driver_value(t, x, i, y, parts.z[s], vt, wt);
        let y_hat;
        if opts.implicit {
            // Fixed point y = cond + dt·g(y) + ΔA; a contraction since
            // dt·Λ < 1.
            let mut y_cur = cond[s];
            for _ in 0..200 {
                let y_next = cond[s] + dt * g_at(y_cur) + a_inc;
                if (y_next - y_cur).abs() <= opts.tol * (1.0 + y_cur.abs()) {
                    y_cur = y_next;
                    break;
                }
                y_cur = y_next;
            }
            y_hat = y_cur;
        } else {
            y_hat = cond[s] + dt * g_at(cond[s]) + a_inc;
        }
        if !y_hat.is_finite() {
            return Err(Error::Solve(format!(
                "non-finite value at step {m}, x = {x}, regime = {i}"
            )));
        }

        let mut dk_plus = 0.0;
        let mut dk_minus = 0.0;
        let mut contact = 0i8;
        let mut y = y_hat;
        if let Some(lower) = inp.lower {
            if y_hat < lower[s] {
                dk_plus = lower[s] - y_hat;
                y = lower[s];
                contact = 1;
            } else if y_hat == lower[s] {
                contact = 1;
            }
        }
        if let Some(upper) = inp.upper {
            if y_hat > upper[s] {
                dk_minus = y_hat - upper[s];
                y = upper[s];
                contact = -1;
            } else if y_hat == upper[s] && contact == 0 {
                contact = -1;
            }
        }
        let residual = (y - (y_hat + dk_plus - dk_minus)).abs();
        nodes[s] = NodeStep { y, dk_plus, dk_minus, contact, residual };
    }
    Ok(())
}

fn eval_obstacle(
    chain: &ChainApprox,
    f: &crate::data::ObstacleFn,
    m: usize,
) -> Vec<f64> {
    let n = chain.n_nodes();
    (0..chain.n_states())
        .map(|s| f(chain.times[m], chain.x_nodes[s % n], s / n))
        .collect()
}

fn terminal_values(chain: &ChainApprox, data: &ProblemData) -> Vec<f64> {
    let n = chain.n_nodes();
    (0..chain.n_states())
        .map(|s| (data.cost.psi)(chain.x_nodes[s % n], s / n))
        .collect()
}

fn check_explicit_feasible(chain: &ChainApprox, data: &ProblemData, opts: SolveOptions) -> Result<()> {
    let product = chain.dt * data.cost.lipschitz;
    if product >= 1.0 && !opts.implicit {
        return Err(Error::ExplicitStepUnstable { product });
    }
    Ok(())
}

struct Accumulator {
    s_count: usize,
    n_atoms: usize,
    k: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    vtilde: Vec<f64>,
    wtilde: Vec<f64>,
    dk_plus: Vec<f64>,
    dk_minus: Vec<f64>,
    contact: Vec<i8>,
    diagnostics: Diagnostics,
}

impl Accumulator {
    fn new(m_steps: usize, s_count: usize, n_atoms: usize, k: usize) -> Self {
        let rows = m_steps + 1;
        Self {
            s_count,
            n_atoms,
            k,
            y: vec![0.0; rows * s_count],
            z: vec![0.0; rows * s_count],
            vtilde: vec![0.0; rows * s_count * n_atoms],
            wtilde: vec![0.0; rows * s_count * k],
            dk_plus: vec![0.0; rows * s_count],
            dk_minus: vec![0.0; rows * s_count],
            contact: vec![0; rows * s_count],
            diagnostics: Diagnostics::default(),
        }
    }

    fn set_row(&mut self, m: usize, y: &[f64]) {
        self.y[m * self.s_count..(m + 1) * self.s_count].copy_from_slice(y);
    }

    #[allow(clippy::too_many_arguments)]
    fn set_node(
        &mut self,
        m: usize,
        s: usize,
        node: &NodeStep,
        z: f64,
        vt: &[f64],
        wt: &[f64],
        lower: Option<f64>,
        upper: Option<f64>,
    ) {
        let idx = m * self.s_count + s;
        self.y[idx] = node.y;
        self.z[idx] = z;
        self.vtilde[idx * self.n_atoms..(idx + 1) * self.n_atoms].copy_from_slice(vt);
        self.wtilde[idx * self.k..(idx + 1) * self.k].copy_from_slice(wt);
        self.dk_plus[idx] = node.dk_plus;
        self.dk_minus[idx] = node.dk_minus;
        self.contact[idx] = node.contact;

        let d = &mut self.diagnostics;
        d.backward_residual = d.backward_residual.max(node.residual);
        if let Some(l) = lower {
            d.max_constraint_violation = d.max_constraint_violation.max(l - node.y);
            if node.dk_plus > 0.0 {
                d.minimality_residual = d.minimality_residual.max((node.y - l).abs());
            }
        }
        if let Some(u) = upper {
            d.max_constraint_violation = d.max_constraint_violation.max(node.y - u);
            if node.dk_minus > 0.0 {
                d.minimality_residual = d.minimality_residual.max((u - node.y).abs());
            }
        }
        debug_assert!(node.dk_plus >= 0.0 && node.dk_minus >= 0.0);
        debug_assert!(node.dk_plus.min(node.dk_minus) == 0.0);
    }

    fn finish(self, kind: ProblemKind, m_steps: usize) -> SolutionQuadruple {
        SolutionQuadruple {
            kind,
            m_steps,
            n_states: self.s_count,
            n_atoms: self.n_atoms,
            k: self.k,
            y: self.y,
            z: self.z,
            vtilde: self.vtilde,
            wtilde: self.wtilde,
            dk_plus: self.dk_plus,
            dk_minus: self.dk_minus,
            contact: self.contact,
            diagnostics: self.diagnostics,
        }
    }
}

/// Solves the problem on the chain. See [`solve_with`] for options.
pub fn solve(chain: &ChainApprox, data: &ProblemData) -> Result<SolutionQuadruple> {
    solve_with(chain, data, SolveOptions::default())
}

pub fn solve_with(
    chain: &ChainApprox,
    data: &ProblemData,
    opts: SolveOptions,
) -> Result<SolutionQuadruple> {
    check_explicit_feasible(chain, data, opts)?;
    match data.kind {
        ProblemKind::Bsde => solve_single_layer(chain, data, opts, false, false),
        ProblemKind::Rbsde => solve_single_layer(chain, data, opts, true, false),
        ProblemKind::R2bsde => solve_single_layer(chain, data, opts, true, true),
        ProblemKind::RbsdeRandomTerminal => solve_stopped(chain, data, opts),
        ProblemKind::TauR2bsde => solve_tau(chain, data, opts),
    }
}

fn solve_single_layer(
    chain: &ChainApprox,
    data: &ProblemData,
    opts: SolveOptions,
    use_lower: bool,
    use_upper: bool,
) -> Result<SolutionQuadruple> {
    let s_count = chain.n_states();
    let n_atoms = data.model.jump_atoms.len();
    let m_steps = chain.n_steps();
    let mut acc = Accumulator::new(m_steps, s_count, n_atoms, chain.k);

    let mut next = terminal_values(chain, data);
    acc.set_row(m_steps, &next);

    let mut z_row = vec![0.0; s_count];
    let mut vt_row = vec![0.0; s_count * n_atoms];
    let mut wt_row = vec![0.0; s_count * chain.k];
    let mut nodes = vec![NodeStep { y: 0.0, dk_plus: 0.0, dk_minus: 0.0, contact: 0, residual: 0.0 }; s_count];

    for m in (0..m_steps).rev() {
        let lower = if use_lower {
            Some(eval_obstacle(chain, data.cost.ell.as_ref().unwrap(), m))
        } else {
            None
        };
        let upper = if use_upper {
            Some(eval_obstacle(chain, data.cost.h_upper.as_ref().unwrap(), m))
        } else {
            None
        };
        let inp = StepInputs { next: &next, lower: lower.as_deref(), upper: upper.as_deref() };
        backward_step(chain, data, m, &inp, opts, &mut z_row, &mut vt_row, &mut wt_row, &mut nodes)?;
        for s in 0..s_count {
            acc.set_node(
                m,
                s,
                &nodes[s],
                z_row[s],
                &vt_row[s * n_atoms..(s + 1) * n_atoms],
                &wt_row[s * chain.k..(s + 1) * chain.k],
                lower.as_ref().map(|l| l[s]),
                upper.as_ref().map(|u| u[s]),
            );
            next[s] = nodes[s].y;
        }
    }
    Ok(acc.finish(data.kind, m_steps))
}

/// One-barrier problem stopped at `tau`: nodes where `tau` has occurred
/// hold the stopped value with zero components; elsewhere the usual
/// lower-reflected recursion runs against the merged continuation.
fn solve_stopped(
    chain: &ChainApprox,
    data: &ProblemData,
    opts: SolveOptions,
) -> Result<SolutionQuadruple> {
    let tau = data
        .tau
        .as_ref()
        .ok_or_else(|| Error::Solve("random-terminal kind requires a resolved tau".into()))?;
    let s_count = chain.n_states();
    let n_atoms = data.model.jump_atoms.len();
    let m_steps = chain.n_steps();
    let mut acc = Accumulator::new(m_steps, s_count, n_atoms, chain.k);

    let psi = terminal_values(chain, data);
    let stopped = |m: usize, s: usize| -> f64 {
        match &data.stopped_values {
            Some(v) => v[m * s_count + s],
            None => psi[s],
        }
    };

    let mut next: Vec<f64> = (0..s_count)
        .map(|s| if tau.active(m_steps, s) { stopped(m_steps, s) } else { psi[s] })
        .collect();
    acc.set_row(m_steps, &next);

    let mut z_row = vec![0.0; s_count];
    let mut vt_row = vec![0.0; s_count * n_atoms];
    let mut wt_row = vec![0.0; s_count * chain.k];
    let mut nodes = vec![NodeStep { y: 0.0, dk_plus: 0.0, dk_minus: 0.0, contact: 0, residual: 0.0 }; s_count];

    for m in (0..m_steps).rev() {
        let lower = eval_obstacle(chain, data.cost.ell.as_ref().unwrap(), m);
        let inp = StepInputs { next: &next, lower: Some(&lower), upper: None };
        backward_step(chain, data, m, &inp, opts, &mut z_row, &mut vt_row, &mut wt_row, &mut nodes)?;
        for s in 0..s_count {
            if tau.active(m, s) {
                let node = NodeStep { y: stopped(m, s), dk_plus: 0.0, dk_minus: 0.0, contact: 0, residual: 0.0 };
                acc.set_node(m, s, &node, 0.0, &vec![0.0; n_atoms], &vec![0.0; chain.k], None, None);
                next[s] = node.y;
            } else {
                acc.set_node(
                    m,
                    s,
                    &nodes[s],
                    z_row[s],
                    &vt_row[s * n_atoms..(s + 1) * n_atoms],
                    &wt_row[s * chain.k..(s + 1) * chain.k],
                    Some(lower[s]),
                    None,
                );
                next[s] = nodes[s].y;
            }
        }
    }
    Ok(acc.finish(data.kind, m_steps))
}

/// τ-activated upper barrier: two coupled layers. The post-τ layer runs the
/// full two-barrier recursion; the pre-τ layer reflects on the lower
/// barrier only and continues into the post-τ layer wherever the next state
/// has crossed into activation. The reported grid merges the layers by the
/// per-state activation indicator.
fn solve_tau(
    chain: &ChainApprox,
    data: &ProblemData,
    opts: SolveOptions,
) -> Result<SolutionQuadruple> {
    let tau = data
        .tau
        .as_ref()
        .ok_or_else(|| Error::Solve("tau-activated kind requires a resolved tau".into()))?;
    let s_count = chain.n_states();
    let n_atoms = data.model.jump_atoms.len();
    let m_steps = chain.n_steps();
    let mut acc = Accumulator::new(m_steps, s_count, n_atoms, chain.k);

    let psi = terminal_values(chain, data);
    let mut next_act = psi.clone();
    let mut next_merged = psi.clone();
    acc.set_row(m_steps, &psi);

    let mut z_row = vec![0.0; s_count];
    let mut vt_row = vec![0.0; s_count * n_atoms];
    let mut wt_row = vec![0.0; s_count * chain.k];
    let mut nodes = vec![NodeStep { y: 0.0, dk_plus: 0.0, dk_minus: 0.0, contact: 0, residual: 0.0 }; s_count];
    let mut nodes_in = nodes.clone();
    let mut z_in = z_row.clone();
    let mut vt_in = vt_row.clone();
    let mut wt_in = wt_row.clone();

    for m in (0..m_steps).rev() {
        let lower = eval_obstacle(chain, data.cost.ell.as_ref().unwrap(), m);
        let upper = eval_obstacle(chain, data.cost.h_upper.as_ref().unwrap(), m);

        // Post-τ layer: full two-barrier step against its own continuation.
        let inp = StepInputs { next: &next_act, lower: Some(&lower), upper: Some(&upper) };
        backward_step(chain, data, m, &inp, opts, &mut z_row, &mut vt_row, &mut wt_row, &mut nodes)?;

        // Pre-τ layer: lower reflection only, continuation merged by the
        // next step's activation.
        let inp = StepInputs { next: &next_merged, lower: Some(&lower), upper: None };
        backward_step(chain, data, m, &inp, opts, &mut z_in, &mut vt_in, &mut wt_in, &mut nodes_in)?;

        for s in 0..s_count {
            let act = tau.active(m, s);
            let (node, z, vt, wt, up) = if act {
                (
                    &nodes[s],
                    z_row[s],
                    &vt_row[s * n_atoms..(s + 1) * n_atoms],
                    &wt_row[s * chain.k..(s + 1) * chain.k],
                    Some(upper[s]),
                )
            } else {
                (
                    &nodes_in[s],
                    z_in[s],
                    &vt_in[s * n_atoms..(s + 1) * n_atoms],
                    &wt_in[s * chain.k..(s + 1) * chain.k],
                    None,
                )
            };
            acc.set_node(m, s, node, z, vt, wt, Some(lower[s]), up);
        }
        for s in 0..s_count {
            next_act[s] = nodes[s].y;
            next_merged[s] = if tau.active(m, s) { nodes[s].y } else { nodes_in[s].y };
        }
    }
    Ok(acc.finish(data.kind, m_steps))
}

/// Pasting construction: solve the full two-barrier problem, then the
/// one-barrier problem stopped at `tau` with the two-barrier solution as
/// its stopped values, and splice the two along the activation indicator.
/// Must agree nodewise with the direct τ-activated solve.
pub fn paste_tau(
    chain: &ChainApprox,
    data_r2: &ProblemData,
    tau: &ResolvedTau,
) -> Result<SolutionQuadruple> {
    if data_r2.cost.ell.is_none() || data_r2.cost.h_upper.is_none() {
        return Err(Error::Config("paste_tau requires complete two-barrier data".into()));
    }
    let mut full = data_r2.clone();
    full.kind = ProblemKind::R2bsde;
    full.tau = None;
    let hat = solve(chain, &full)?;

    let s_count = chain.n_states();
    let m_steps = chain.n_steps();
    let mut pre = data_r2.clone();
    pre.kind = ProblemKind::RbsdeRandomTerminal;
    pre.tau = Some(tau.clone());
    pre.stopped_values = Some(hat.y.clone());
    let bar = solve(chain, &pre)?;

    // Splice: activation picks the post-τ (two-barrier) quantities.
    let mut out = bar.clone();
    out.kind = ProblemKind::TauR2bsde;
    for m in 0..=m_steps {
        for s in 0..s_count {
            if tau.active(m, s) {
                let idx = m * s_count + s;
                out.y[idx] = hat.y[idx];
                out.z[idx] = hat.z[idx];
                out.vtilde[idx * hat.n_atoms..(idx + 1) * hat.n_atoms]
                    .copy_from_slice(&hat.vtilde[idx * hat.n_atoms..(idx + 1) * hat.n_atoms]);
                out.wtilde[idx * hat.k..(idx + 1) * hat.k]
                    .copy_from_slice(&hat.wtilde[idx * hat.k..(idx + 1) * hat.k]);
                out.dk_plus[idx] = hat.dk_plus[idx];
                out.dk_minus[idx] = hat.dk_minus[idx];
                out.contact[idx] = hat.contact[idx];
            }
        }
    }
    out.diagnostics.backward_residual = out
        .diagnostics
        .backward_residual
        .max(hat.diagnostics.backward_residual);
    out.diagnostics.max_constraint_violation = out
        .diagnostics
        .max_constraint_violation
        .max(hat.diagnostics.max_constraint_violation);
    out.diagnostics.minimality_residual = out
        .diagnostics
        .minimality_residual
        .max(hat.diagnostics.minimality_residual);
    Ok(out)
}

/// One node's line in the reflection-density report.
#[derive(Clone, Copy, Debug)]
pub struct DensityWorst {
    pub m: usize,
    pub state: usize,
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub enum DensityReport {
    /// `alpha` missing: the bound is not checkable for this barrier.
    NotApplicable,
    Checked {
        violations: usize,
        /// Most adverse `lhs − rhs` over all nodes (negative = slack).
        worst: DensityWorst,
    },
}

/// Verifies `ΔK⁺/Δt ≤ 1{contact}·(g⁻ + alpha) + tol` at every node, where
/// `tol` is the chain's per-node generator-consistency allowance on the
/// barrier's smooth function (plus a rounding cushion).
pub fn kplus_density_check(
    chain: &ChainApprox,
    data: &ProblemData,
    sol: &SolutionQuadruple,
) -> Result<DensityReport> {
    let alpha = match &data.alpha {
        Some(a) => a.clone(),
        None => return Ok(DensityReport::NotApplicable),
    };
    let s_count = chain.n_states();
    let n = chain.n_nodes();
    let dt = chain.dt;

    // Mesh-consistency allowance: generator residual of phi per node when
    // available, else the global drift/variance residual of the chain.
    let phi = data.phi.clone();
    let fallback = (chain.consistency.max_drift_residual
        + chain.consistency.max_variance_residual)
        / dt;

    let mut violations = 0usize;
    let mut worst = DensityWorst { m: 0, state: 0, margin: f64::NEG_INFINITY };
    for m in 0..sol.m_steps {
        let res_row = match &phi {
            Some(p) => Some(chain.generator_residual(&data.model, p, m)?),
            None => None,
        };
        let t = chain.times[m];
        for s in 0..s_count {
            let x = chain.x_nodes[s % n];
            let i = s / n;
            let lhs = sol.dk_plus_at(m, s) / dt;
            let at_lower = sol.contact[m * s_count + s] == 1;
            let g = data.driver_value(
                t,
                x,
                i,
                sol.y_at(m, s),
                sol.z_at(m, s),
                sol.vtilde_at(m, s),
                sol.wtilde_at(m, s),
            );
            let ind = if at_lower { 1.0 } else { 0.0 };
            let tol = res_row.as_ref().map(|r| r[s]).unwrap_or(fallback) + 1e-9;
            let rhs = ind * ((-g).max(0.0) + alpha(t, x, i)) + tol;
            let margin = lhs - rhs;
            if margin > 0.0 {
                violations += 1;
            }
            if margin > worst.margin {
                worst = DensityWorst { m, state: s, margin };
            }
        }
    }
    Ok(DensityReport::Checked { violations, worst })
}

/// Asserts the quadruple's structural invariants, returning the worst
/// margins; used by tests and the CLI invariants check.
pub fn verify_invariants(sol: &SolutionQuadruple) -> Diagnostics {
    let mut d = sol.diagnostics;
    for m in 0..sol.m_steps {
        for s in 0..sol.n_states {
            let (p, q) = (sol.dk_plus_at(m, s), sol.dk_minus_at(m, s));
            assert!(p >= 0.0 && q >= 0.0, "negative K increment at ({m}, {s})");
            assert!(p.min(q) == 0.0, "mutual singularity violated at ({m}, {s})");
        }
    }
    d.backward_residual = d.backward_residual.max(0.0);
    d
}
