//! Finite-state Markov-chain approximation of `(X, N)` on a 1-d spatial grid
//! × regime set × uniform time grid.
//!
//! Each state keeps an explicit branch list (diffusion up/down/mid, one jump
//! branch per atom, one switch branch per foreign regime) rather than a bare
//! transition matrix; the branch tags are what let the solver extract the
//! martingale components `(Z, Vtilde, Wtilde)` and let the adjoint oracle
//! weight branches individually.
//!
//! The diffusion stencil is a trinomial with an adaptive span `s = l·h`
//! (smallest integer `l >= 1` keeping all probabilities in `[0, 1]`) and
//! upwinded drift, so strongly diffusive states remain representable without
//! shrinking the global time step. Jump targets are snapped to the nearest
//! grid node; boundaries reflect by clamping branch targets.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Smooth, apply_generator};

/// One state's outgoing branches for a single time step.
#[derive(Clone, Debug)]
pub struct Row {
    /// Target state of the diffusion up/down branches (same regime).
    pub up: u32,
    pub down: u32,
    pub p_up: f64,
    pub p_down: f64,
    pub p_mid: f64,
    /// Spatial span of the diffusion branches (`l * h`).
    pub span: f64,
    /// Local dispersion used for the Brownian-increment proxy.
    pub sigma: f64,
    /// `(target state, probability)` per jump atom.
    pub jumps: Vec<(u32, f64)>,
    /// Switch probability per regime (0 at the own regime).
    pub switches: Vec<f64>,
}

impl Row {
    /// Brownian-increment proxy of the up branch (`span / sigma`); down is
    /// its negative, all other branches map to 0.
    pub fn db(&self) -> f64 {
        if self.sigma > 0.0 { self.span / self.sigma } else { 0.0 }
    }

    /// Mean of the Brownian-increment proxy under the row.
    pub fn db_mean(&self) -> f64 {
        (self.p_up - self.p_down) * self.db()
    }

    pub fn total_mass(&self) -> f64 {
        self.p_up
            + self.p_down
            + self.p_mid
            + self.jumps.iter().map(|&(_, p)| p).sum::<f64>()
            + self.switches.iter().sum::<f64>()
    }
}

/// Local-consistency diagnostics recorded at build time.
#[derive(Clone, Debug, Default)]
pub struct ConsistencyReport {
    /// Max |stencil mean increment − b·Δt| over interior states.
    pub max_drift_residual: f64,
    /// Max |stencil second moment − a·Δt| over interior states.
    pub max_variance_residual: f64,
    /// Max distance between a jump target and its snapped grid node.
    pub max_jump_snap_error: f64,
    /// Largest span multiple `l` used by any stencil.
    pub max_span_multiple: usize,
    /// States whose diffusion or jump branches were clamped at a boundary.
    pub clamped_states: usize,
}

#[derive(Debug)]
enum Kernels {
    /// One branch table shared by all steps (time-homogeneous coefficients).
    Homogeneous(Vec<Row>),
    PerStep(Vec<Vec<Row>>),
}

/// The built chain: immutable, safe for concurrent reads.
#[derive(Debug)]
pub struct ChainApprox {
    pub times: Vec<f64>,
    pub dt: f64,
    pub x_nodes: Vec<f64>,
    pub h: f64,
    pub k: usize,
    kernels: Kernels,
    pub consistency: ConsistencyReport,
    /// True iff every one-step weight is nonnegative (always the case for a
    /// successfully built chain; recorded for the comparison checker).
    pub monotone: bool,
}

/// Martingale components of a value vector against one chain step.
pub struct MartingaleParts {
    /// Scalar diffusion component per state.
    pub z: Vec<f64>,
    /// `[state × atom]`, row-major.
    pub vtilde: Vec<f64>,
    /// `[state × regime]`, row-major.
    pub wtilde: Vec<f64>,
    pub n_atoms: usize,
    pub k: usize,
}

impl ChainApprox {
    pub fn n_nodes(&self) -> usize {
        self.x_nodes.len()
    }

    pub fn n_states(&self) -> usize {
        self.x_nodes.len() * self.k
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state_index(&self, node: usize, regime: usize) -> usize {
        regime * self.x_nodes.len() + node
    }

    pub fn node_of(&self, state: usize) -> usize {
        state % self.x_nodes.len()
    }

    pub fn regime_of(&self, state: usize) -> usize {
        state / self.x_nodes.len()
    }

    pub fn rows(&self, m: usize) -> &[Row] {
        match &self.kernels {
            Kernels::Homogeneous(rows) => rows,
            Kernels::PerStep(per) => &per[m],
        }
    }

    pub fn row(&self, m: usize, state: usize) -> &Row {
        &self.rows(m)[state]
    }

    /// `P_m · values`, exact.
    pub fn conditional_expectation(&self, m: usize, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.n_states() {
            return Err(Error::DimensionMismatch {
                expected: self.n_states(),
                got: values.len(),
            });
        }
        let n = self.n_nodes();
        let rows = self.rows(m);
        Ok((0..self.n_states())
            .map(|s| {
                let row = &rows[s];
                let node = s % n;
                let mut acc = row.p_up * values[row.up as usize]
                    + row.p_down * values[row.down as usize]
                    + row.p_mid * values[s];
                for &(target, p) in &row.jumps {
                    acc += p * values[target as usize];
                }
                for (j, &p) in row.switches.iter().enumerate() {
                    if p > 0.0 {
                        acc += p * values[j * n + node];
                    }
                }
                acc
            })
            .collect())
    }

    /// Extracts `(Z, Vtilde, Wtilde)` of the value vector against step `m`.
    ///
    /// `Z` is the projection on the Brownian-increment proxy (`±span/sigma`
    /// on the diffusion branches, centered, divided by `Δt`), so it recovers
    /// `sigma·∂u` up to `O(h)`. `Vtilde`/`Wtilde` are the exact branch
    /// differences against the continuation (mid) state.
    pub fn martingale_components(&self, m: usize, values: &[f64]) -> Result<MartingaleParts> {
        if values.len() != self.n_states() {
            return Err(Error::DimensionMismatch {
                expected: self.n_states(),
                got: values.len(),
            });
        }
        let n = self.n_nodes();
        let rows = self.rows(m);
        let n_atoms = rows[0].jumps.len();
        let cond = self.conditional_expectation(m, values)?;
        let mut z = vec![0.0; self.n_states()];
        let mut vtilde = vec![0.0; self.n_states() * n_atoms];
        let mut wtilde = vec![0.0; self.n_states() * self.k];
        for s in 0..self.n_states() {
            let row = &rows[s];
            let node = s % n;
            let db = row.db();
            if db > 0.0 {
                // E[v · (ΔB̂ − E[ΔB̂])] / Δt; only up/down carry nonzero ΔB̂.
                let raw = db * (row.p_up * values[row.up as usize]
                    - row.p_down * values[row.down as usize]);
                z[s] = (raw - cond[s] * row.db_mean()) / self.dt;
            }
            for (a, &(target, _)) in row.jumps.iter().enumerate() {
                vtilde[s * n_atoms + a] = values[target as usize] - values[s];
            }
            for j in 0..self.k {
                wtilde[s * self.k + j] = values[j * n + node] - values[s];
            }
        }
        Ok(MartingaleParts { z, vtilde, wtilde, n_atoms, k: self.k })
    }

    /// Max over states and branches of the defect in the exact branchwise
    /// martingale decomposition
    /// `v(next) − E[v] = Σ_{β ≠ mid} (v_β − v_mid)(1_β − p_β)`,
    /// where the jump/switch coefficients are exactly `Vtilde`/`Wtilde` and
    /// the diffusion coefficients are the up/down branch differences that
    /// `Z` summarizes.
    pub fn decomposition_residual(&self, m: usize, values: &[f64]) -> Result<f64> {
        let n = self.n_nodes();
        let rows = self.rows(m);
        let cond = self.conditional_expectation(m, values)?;
        let mut worst = 0.0f64;
        for s in 0..self.n_states() {
            let row = &rows[s];
            let node = s % n;
            let v_mid = values[s];
            // (branch value, probability) over all non-mid branches.
            let mut branches: Vec<(f64, f64)> = vec![
                (values[row.up as usize], row.p_up),
                (values[row.down as usize], row.p_down),
            ];
            for &(target, p) in &row.jumps {
                branches.push((values[target as usize], p));
            }
            for (j, &p) in row.switches.iter().enumerate() {
                if p > 0.0 {
                    branches.push((values[j * n + node], p));
                }
            }
            let compensator: f64 =
                branches.iter().map(|&(v, p)| (v - v_mid) * p).sum();
            // Non-mid branches: reconstruction = (v_β − v_mid) − compensator.
            for &(v, _) in &branches {
                let lhs = v - cond[s];
                let rhs = (v - v_mid) - compensator;
                worst = worst.max((lhs - rhs).abs());
            }
            // Mid branch: all indicators are 0.
            worst = worst.max(((v_mid - cond[s]) - (-compensator)).abs());
        }
        Ok(worst)
    }

    /// Per-state defect `|(E[u(t_{m+1},·)|s] − u(t_m, s))/Δt − 𝒢u(t_m, s)|`
    /// of the chain against the generator on a smooth function. Used as the
    /// mesh-consistency allowance of the reflection-density check.
    pub fn generator_residual(&self, model: &ModelSpec, u: &Smooth, m: usize) -> Result<Vec<f64>> {
        let n = self.n_nodes();
        let t = self.times[m];
        let t_next = self.times[m + 1];
        let next: Vec<f64> = (0..self.n_states())
            .map(|s| u.eval(t_next, &[self.x_nodes[s % n]], s / n))
            .collect();
        let cond = self.conditional_expectation(m, &next)?;
        let mut out = vec![0.0; self.n_states()];
        for s in 0..self.n_states() {
            let x = [self.x_nodes[s % n]];
            let i = s / n;
            let g = apply_generator(model, u, t, &x, i)?;
            out[s] = ((cond[s] - u.eval(t, &x, i)) / self.dt - g).abs();
        }
        Ok(out)
    }

    /// Forward marginal propagation: `p_{m+1} = p_m P_m`, exact.
    pub fn push_forward(&self, m: usize, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.n_states() {
            return Err(Error::DimensionMismatch {
                expected: self.n_states(),
                got: p.len(),
            });
        }
        let n = self.n_nodes();
        let rows = self.rows(m);
        let mut out = vec![0.0; self.n_states()];
        for s in 0..self.n_states() {
            let mass = p[s];
            if mass == 0.0 {
                continue;
            }
            let row = &rows[s];
            let node = s % n;
            out[row.up as usize] += mass * row.p_up;
            out[row.down as usize] += mass * row.p_down;
            out[s] += mass * row.p_mid;
            for &(target, pr) in &row.jumps {
                out[target as usize] += mass * pr;
            }
            for (j, &pr) in row.switches.iter().enumerate() {
                if pr > 0.0 {
                    out[j * n + node] += mass * pr;
                }
            }
        }
        Ok(out)
    }
}

struct RowBuild {
    row: Row,
    drift_residual: f64,
    variance_residual: f64,
    snap_error: f64,
    span_multiple: usize,
    clamped: bool,
}

fn build_row(
    model: &ModelSpec,
    x_nodes: &[f64],
    h: f64,
    dt: f64,
    t: f64,
    node: usize,
    regime: usize,
) -> Result<RowBuild> {
    let n = x_nodes.len();
    let x = [x_nodes[node]];
    let state = |nd: usize, rg: usize| (rg * n + nd) as u32;

    // Jump branches: probability f·mass·Δt, target snapped to the grid.
    let mut jumps = Vec::with_capacity(model.jump_atoms.len());
    let mut snap_error = 0.0f64;
    let mut clamped = false;
    let mut jump_prob = 0.0;
    for (a, atom) in model.jump_atoms.iter().enumerate() {
        let delta = model.jump_size(t, &x, regime, a)[0];
        let p = model.jump_intensity(t, &x, regime, a) * atom.mass * dt;
        let target_x = x[0] + delta;
        let idx_raw = ((target_x - x_nodes[0]) / h).round();
        let idx = (idx_raw.max(0.0) as usize).min(n - 1);
        if idx as f64 != idx_raw {
            clamped = true;
        }
        snap_error = snap_error.max((x_nodes[idx] - target_x).abs());
        jumps.push((state(idx, regime), p));
        jump_prob += p;
    }

    // Switch branches: probability λ_ij·Δt.
    let lam = model.regime_intensity(t, &x);
    let mut switches = vec![0.0; model.k];
    let mut switch_prob = 0.0;
    for j in 0..model.k {
        if j != regime {
            let p = lam[regime * model.k + j] * dt;
            switches[j] = p;
            switch_prob += p;
        }
    }

    let budget = 1.0 - jump_prob - switch_prob;
    let a = model.covariance(t, &x, regime)[0];
    let b_eff = model.compensated_drift(t, &x, regime)[0];

    // Smallest span multiple l >= 1 with p_up + p_down <= budget.
    let need = |s: f64| a * dt / (s * s) + b_eff.abs() * dt / s;
    let mut l = 1usize;
    let l_cap = (n - 1).max(1);
    while need(l as f64 * h) > budget {
        l += 1;
        if l > l_cap {
            let s_max = l_cap as f64 * h;
            let rate = a / (s_max * s_max) + b_eff.abs() / s_max
                + (jump_prob + switch_prob) / dt;
            return Err(Error::StencilInfeasible {
                node,
                regime,
                dt,
                max_dt: 1.0 / rate,
            });
        }
    }
    let s = l as f64 * h;
    let p_up = a * dt / (2.0 * s * s) + b_eff.max(0.0) * dt / s;
    let p_down = a * dt / (2.0 * s * s) + (-b_eff).max(0.0) * dt / s;
    let p_mid = budget - p_up - p_down;
    if p_mid < -1e-15 {
        return Err(Error::Chain(format!(
            "internal: negative mid probability {p_mid:e} at node {node}, regime {regime}"
        )));
    }
    let p_mid = p_mid.max(0.0);

    let up_idx = (node + l).min(n - 1);
    let down_idx = node.saturating_sub(l);
    if up_idx != node + l || down_idx + l != node {
        clamped = true;
    }

    // Local-moment residuals against b·Δt and a·Δt, at the nominal
    // (unclamped) branch displacements.
    let mean_diff = (p_up - p_down) * s;
    let mean_jump: f64 = model
        .jump_atoms
        .iter()
        .enumerate()
        .map(|(idx, atom)| {
            model.jump_size(t, &x, regime, idx)[0]
                * model.jump_intensity(t, &x, regime, idx)
                * atom.mass
                * dt
        })
        .sum();
    let b_full = model.drift(t, &x, regime)[0];
    let drift_residual = (mean_diff + mean_jump - b_full * dt).abs();
    let second = (p_up + p_down) * s * s;
    let variance_residual = (second - a * dt).abs();

    let sigma_local = model.dispersion(t, &x, regime)[0];
    Ok(RowBuild {
        row: Row {
            up: state(up_idx, regime),
            down: state(down_idx, regime),
            p_up,
            p_down,
            p_mid,
            span: s,
            sigma: sigma_local.abs(),
            jumps,
            switches,
        },
        drift_residual,
        variance_residual,
        snap_error,
        span_multiple: l,
        clamped,
    })
}

fn build_step(
    model: &ModelSpec,
    x_nodes: &[f64],
    h: f64,
    dt: f64,
    t: f64,
    k: usize,
) -> Result<(Vec<Row>, ConsistencyReport)> {
    let n = x_nodes.len();
    let built: Vec<RowBuild> = (0..n * k)
        .into_par_iter()
        .map(|s| build_row(model, x_nodes, h, dt, t, s % n, s / n))
        .collect::<Result<_>>()?;
    let mut report = ConsistencyReport::default();
    let mut rows = Vec::with_capacity(built.len());
    for rb in built {
        report.max_drift_residual = report.max_drift_residual.max(rb.drift_residual);
        report.max_variance_residual = report.max_variance_residual.max(rb.variance_residual);
        report.max_jump_snap_error = report.max_jump_snap_error.max(rb.snap_error);
        report.max_span_multiple = report.max_span_multiple.max(rb.span_multiple);
        if rb.clamped {
            report.clamped_states += 1;
        }
        rows.push(rb.row);
    }
    Ok((rows, report))
}

/// Builds the chain on `spatial_nodes` uniform nodes over `spatial_bounds`
/// with `time_steps` uniform steps over `[0, T]`. Requires `d = 1`.
pub fn build_chain(
    model: &ModelSpec,
    time_steps: usize,
    spatial_bounds: (f64, f64),
    spatial_nodes: usize,
) -> Result<ChainApprox> {
    if model.d != 1 {
        return Err(Error::Chain(format!(
            "chain approximation requires d = 1 (got d = {})",
            model.d
        )));
    }
    if time_steps < 1 {
        return Err(Error::Chain("time_steps must be >= 1".into()));
    }
    if spatial_nodes < 2 {
        return Err(Error::Chain("spatial_nodes must be >= 2".into()));
    }
    let (lo, hi) = spatial_bounds;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Chain(format!("invalid spatial bounds [{lo}, {hi}]")));
    }
    let m_steps = time_steps;
    let dt = model.horizon / m_steps as f64;
    let times: Vec<f64> = (0..=m_steps)
        .map(|m| m as f64 * model.horizon / m_steps as f64)
        .collect();
    let h = (hi - lo) / (spatial_nodes - 1) as f64;
    let x_nodes: Vec<f64> = (0..spatial_nodes).map(|j| lo + j as f64 * h).collect();

    let (kernels, consistency) = if model.time_homogeneous {
        let (rows, report) = build_step(model, &x_nodes, h, dt, times[0], model.k)?;
        (Kernels::Homogeneous(rows), report)
    } else {
        let mut all = Vec::with_capacity(m_steps);
        let mut report = ConsistencyReport::default();
        for m in 0..m_steps {
            let (rows, step_report) = build_step(model, &x_nodes, h, dt, times[m], model.k)?;
            report.max_drift_residual =
                report.max_drift_residual.max(step_report.max_drift_residual);
            report.max_variance_residual = report
                .max_variance_residual
                .max(step_report.max_variance_residual);
            report.max_jump_snap_error =
                report.max_jump_snap_error.max(step_report.max_jump_snap_error);
            report.max_span_multiple =
                report.max_span_multiple.max(step_report.max_span_multiple);
            report.clamped_states = report.clamped_states.max(step_report.clamped_states);
            all.push(rows);
        }
        (Kernels::PerStep(all), report)
    };

    let chain = ChainApprox {
        times,
        dt,
        x_nodes,
        h,
        k: model.k,
        kernels,
        consistency,
        monotone: true,
    };

    // Row-stochasticity invariant, checked on every step actually stored.
    let steps_to_check: Vec<usize> = match &chain.kernels {
        Kernels::Homogeneous(_) => vec![0],
        Kernels::PerStep(per) => (0..per.len()).collect(),
    };
    for m in steps_to_check {
        for (s, row) in chain.rows(m).iter().enumerate() {
            let mass = row.total_mass();
            if (mass - 1.0).abs() > 1e-12 {
                return Err(Error::Chain(format!(
                    "row {s} at step {m} sums to {mass} (expected 1)"
                )));
            }
        }
    }
    Ok(chain)
}
