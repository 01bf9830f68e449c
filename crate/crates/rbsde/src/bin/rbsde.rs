//! Batch front door: parse a run configuration, build the model, chain and
//! problem data, run solves and checks, and emit CSV solutions plus
//! structured verdicts under a checksummed manifest.
//!
//! Exit codes: 0 when every check is PASS or NOT-APPLICABLE, 1 on any FAIL,
//! 2 on configuration errors (with line-anchored diagnostics for malformed
//! files).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use rbsde::analysis::{
    apriori_report, comparison_check, mc_norm_check, norms, AprioriReport, ComparisonVerdict,
};
use rbsde::chain::ChainApprox;
use rbsde::config::{RunConfig, TauDecl};
use rbsde::data::{assemble, ProblemData, TauSpec};
use rbsde::error::{Error, Result};
use rbsde::model::{ModelSpec, Smooth};
use rbsde::pathsim::{
    compensator_check, generator_weak_error, simulate_paths, terminal_regime_frequency,
    JumpConvention, WeakErrorStatus,
};
use rbsde::report::{
    exit_code, paths_csv, render_report, sha256_hex, solution_csv, Manifest, Timing, Verdict,
};
use rbsde::solver::{kplus_density_check, solve, DensityReport, SolutionQuadruple};

#[derive(Parser)]
#[command(
    name = "rbsde",
    version,
    about = "Reflected BSDE laboratory on regime-switching jump-diffusion chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate model paths and test the jump/switch compensators.
    Simulate(RunArgs),
    /// Build the chain, solve the declared problem, dump the solution.
    Solve(RunArgs),
    /// Solve, then run every check declared in the config.
    Check(RunArgs),
    /// Solve the problem and a terminal-shifted copy; verify the
    /// comparison ordering.
    Compare(RunArgs),
    /// Re-read a run directory and print its summary tables.
    Report {
        /// Run directory containing `manifest.json`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override; otherwise the config's seed is used.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; affects speed only, never results.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Simulate(args) => run_simulate(&args),
        Command::Solve(args) => run_solve(&args, false),
        Command::Check(args) => run_solve(&args, true),
        Command::Compare(args) => run_compare(&args),
        Command::Report { out } => run_report(&out),
    }
}

/// Loaded configuration plus resolved output directory and phase timings.
struct Session {
    config: RunConfig,
    out_dir: PathBuf,
    timings: Vec<Timing>,
}

impl Session {
    fn open(args: &RunArgs) -> Result<Self> {
        let mut config = RunConfig::from_path(&args.config)?;
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        if let Some(n) = args.threads {
            // Ignore the error when a pool already exists (e.g. repeated
            // invocation inside one process in tests).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        let out_dir = args
            .out
            .clone()
            .or_else(|| config.output.directory.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("rbsde-out"));
        std::fs::create_dir_all(&out_dir)?;
        Ok(Session { config, out_dir, timings: Vec::new() })
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.push(Timing {
            phase: phase.into(),
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(out)
    }

    /// Writes all artifacts plus `verdicts.json` and the manifest; file
    /// checksums cover everything except the manifest itself.
    fn finish(
        mut self,
        subcommand: &str,
        mut manifest: Manifest,
        artifacts: Vec<(String, String)>,
        verdicts: Vec<Verdict>,
    ) -> Result<i32> {
        let verdict_json = serde_json::to_string_pretty(&verdicts)?;
        manifest.subcommand = subcommand.into();
        manifest.verdicts = verdicts;
        for (name, body) in artifacts
            .into_iter()
            .chain(std::iter::once(("verdicts.json".into(), verdict_json)))
        {
            manifest.files.insert(name.clone(), sha256_hex(body.as_bytes()));
            std::fs::write(self.out_dir.join(&name), body)?;
        }
        manifest.timings = std::mem::take(&mut self.timings);
        std::fs::write(self.out_dir.join("manifest.json"), manifest.to_json())?;
        for v in &manifest.verdicts {
            let margin = match v.worst_margin {
                Some(m) => format!("{m:.4e}"),
                None => "-".into(),
            };
            println!("check {:<20} {:<16} margin {:>12}  {}", v.name, v.status.label(), margin, v.detail);
        }
        Ok(exit_code(&manifest.verdicts))
    }
}

/// State index of the chain node nearest the model's start point.
fn start_state(chain: &ChainApprox, config: &RunConfig) -> usize {
    let x0 = config.model.x0;
    let node = chain
        .x_nodes
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - x0).abs().total_cmp(&(b.1 - x0).abs()))
        .map(|(idx, _)| idx)
        .unwrap_or(0);
    chain.state_index(node, config.model.regime0)
}

fn manifest_for(config: &RunConfig, subcommand: &str) -> Manifest {
    Manifest::new(subcommand, sha256_hex(config.to_canonical_json().as_bytes()), config.seed)
}

/// Non-panicking scan of the reflection invariants; margin is the worst
/// violation (negative increments, mutual singularity, barrier excursion,
/// minimality residual).
fn invariants_verdict(sol: &SolutionQuadruple) -> Verdict {
    let mut worst = 0.0f64;
    let mut witness = None;
    for m in 0..sol.m_steps {
        for s in 0..sol.n_states {
            let (p, q) = (sol.dk_plus_at(m, s), sol.dk_minus_at(m, s));
            let local = (-p).max(-q).max(p.min(q));
            if local > worst {
                worst = local;
                witness = Some((m, s));
            }
        }
    }
    let d = sol.diagnostics;
    let margin = worst.max(d.max_constraint_violation).max(d.minimality_residual);
    let detail = format!(
        "constraint {:.2e}, minimality {:.2e}, K-structure {:.2e}",
        d.max_constraint_violation, d.minimality_residual, worst
    );
    let mut v = if margin <= 1e-12 {
        Verdict::pass("invariants", detail)
    } else {
        Verdict::fail("invariants", detail)
    };
    v = v.with_margin(margin);
    if let Some((m, s)) = witness {
        v = v.with_witness(m, s);
    }
    v
}

fn density_verdict(chain: &ChainApprox, data: &ProblemData, sol: &SolutionQuadruple) -> Result<Verdict> {
    Ok(match kplus_density_check(chain, data, sol)? {
        DensityReport::NotApplicable => Verdict::not_applicable(
            "kplus_density",
            "no reflection-density bound attached to the lower barrier".into(),
        ),
        DensityReport::Checked { violations, worst } => {
            let detail = format!("{violations} violation(s), worst margin {:.4e}", worst.margin);
            let v = if violations == 0 {
                Verdict::pass("kplus_density", detail)
            } else {
                Verdict::fail("kplus_density", detail)
            };
            v.with_margin(worst.margin).with_witness(worst.m, worst.state)
        }
    })
}

/// Rebuilds the declared problem with the terminal shifted by `shift`;
/// the shifted problem must still satisfy the ordering assumption
/// (M.2.ii), otherwise assembly rejects it.
fn shifted_problem(
    config: &RunConfig,
    model: &ModelSpec,
    chain: &ChainApprox,
    shift: f64,
) -> Result<ProblemData> {
    let base = config.build_problem(model, chain)?;
    let psi = base.cost.psi.clone();
    let mut cost = base.cost.clone();
    cost.psi = Arc::new(move |x: f64, i: usize| psi(x, i) + shift);
    let tau_spec = config.problem.tau.map(TauDecl::to_spec).unwrap_or(TauSpec::None);
    let mut data = assemble(base.kind, cost, model, chain, &tau_spec, base.alpha.clone())?;
    data.phi = base.phi.clone();
    Ok(data)
}

fn comparison_verdict(
    config: &RunConfig,
    model: &ModelSpec,
    chain: &ChainApprox,
    data: &ProblemData,
    sol: &SolutionQuadruple,
    shift: f64,
) -> Result<Verdict> {
    let data_prime = shifted_problem(config, model, chain, shift)?;
    let sol_prime = solve(chain, &data_prime)?;
    Ok(match comparison_check(chain, data, sol, &data_prime, &sol_prime)? {
        ComparisonVerdict::Pass { min_gap } => Verdict::pass(
            "comparison",
            format!("terminal shift {shift}: min(Y' - Y) = {min_gap:.4e}"),
        )
        .with_margin(-min_gap),
        ComparisonVerdict::NotApplicable { hypothesis } => Verdict::not_applicable(
            "comparison",
            format!("hypothesis not met: {hypothesis}"),
        ),
        ComparisonVerdict::Fail { min_gap, witness } => Verdict::fail(
            "comparison",
            format!("ordering broke: min(Y' - Y) = {min_gap:.4e}"),
        )
        .with_margin(-min_gap)
        .with_witness(witness.0, witness.1),
    })
}

fn apriori_verdict(
    config: &RunConfig,
    model: &ModelSpec,
    chain: &ChainApprox,
    data: &ProblemData,
    sol: &SolutionQuadruple,
    denominators: &[u32],
    start: usize,
) -> Result<(Verdict, AprioriReport)> {
    let mut items: Vec<(ProblemData, SolutionQuadruple)> = Vec::new();
    for &n in denominators {
        if n == 0 {
            return Err(Error::Config("apriori_sequence denominators must be >= 1".into()));
        }
        let d = shifted_problem(config, model, chain, 1.0 / n as f64)?;
        let s = solve(chain, &d)?;
        items.push((d, s));
    }
    let refs: Vec<(&ProblemData, &SolutionQuadruple)> = items
        .iter()
        .map(|(d, s)| (d, s))
        .chain(std::iter::once((data, sol)))
        .collect();
    let report = apriori_report(chain, &refs, start)?;
    let diffs: Vec<String> = report
        .entries
        .iter()
        .take(report.entries.len() - 1)
        .map(|e| format!("{:.3e}", e.diff_solution))
        .collect();
    let ok = report.diffs_decreasing && report.max_solution_to_data_ratio.is_finite();
    let detail = format!(
        "diff norms [{}], decreasing: {}, max solution/data ratio {:.3e}",
        diffs.join(", "),
        report.diffs_decreasing,
        report.max_solution_to_data_ratio
    );
    let v = if ok {
        Verdict::pass("apriori_sequence", detail)
    } else {
        Verdict::fail("apriori_sequence", detail)
    };
    Ok((v, report))
}

fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|m| horizon * m as f64 / steps as f64).collect()
}

fn compensator_verdict(
    config: &RunConfig,
    model: &ModelSpec,
    n_paths: usize,
    time_steps: usize,
) -> Result<Verdict> {
    let convention = config
        .simulate
        .as_ref()
        .map(|s| s.convention.to_convention())
        .unwrap_or(JumpConvention::Compensated);
    let grid = uniform_grid(model.horizon, time_steps);
    let bundle = simulate_paths(
        model,
        &grid,
        &[config.model.x0],
        config.model.regime0,
        n_paths,
        config.seed,
        convention,
    )?;
    let report = compensator_check(&bundle, model);
    let worst = report.lines.iter().map(|l| l.z_score.abs()).fold(0.0, f64::max);
    let detail = format!("{} mark(s) over {n_paths} paths, worst |z| = {worst:.3}", report.lines.len());
    let v = if report.pass {
        Verdict::pass("compensator", detail)
    } else {
        Verdict::fail("compensator", detail)
    };
    Ok(v.with_margin(worst - 4.0))
}

fn weak_error_verdict(
    config: &RunConfig,
    model: &ModelSpec,
    n_pairs: usize,
    dts: &[f64],
) -> Result<Verdict> {
    let u = Smooth::coordinate_squared(0, model.d);
    let table = generator_weak_error(
        model,
        &u,
        0.0,
        &[config.model.x0],
        config.model.regime0,
        dts,
        n_pairs,
        config.seed,
    )?;
    let order = table.observed_order;
    let detail = match order {
        Some(o) => format!("observed order {o:.3} over {} step sizes", dts.len()),
        None => "noise floor not cleared on enough rows".into(),
    };
    Ok(match table.status {
        WeakErrorStatus::Pass => {
            Verdict::pass("weak_error", detail).with_margin(0.9 - order.unwrap_or(0.0))
        }
        WeakErrorStatus::Fail => {
            Verdict::fail("weak_error", detail).with_margin(0.9 - order.unwrap_or(0.0))
        }
        WeakErrorStatus::Inconclusive => Verdict::not_applicable("weak_error", detail),
    })
}

fn norms_mc_verdict(
    config: &RunConfig,
    chain: &ChainApprox,
    data: &ProblemData,
    sol: &SolutionQuadruple,
    start: usize,
    n_paths: usize,
) -> Result<Verdict> {
    let check = mc_norm_check(chain, data, sol, start, n_paths, config.seed)?;
    let worst = [check.h2_z, check.hmu2_v, check.mean_kplus, check.mean_kminus]
        .iter()
        .map(|t| t.z.abs())
        .fold(0.0, f64::max);
    let detail = format!("{n_paths} chain paths, worst |z| = {worst:.3}");
    let v = if check.pass() {
        Verdict::pass("norms_mc", detail)
    } else {
        Verdict::fail("norms_mc", detail)
    };
    Ok(v.with_margin(worst - 4.0))
}

fn run_solve(args: &RunArgs, with_checks: bool) -> Result<i32> {
    let mut session = Session::open(args)?;
    let config = session.config.clone();
    let model = session.time("build_model", || config.build_model())?;
    let chain = session.time("build_chain", || config.build_chain(&model))?;
    let data = session.time("assemble", || config.build_problem(&model, &chain))?;
    let sol = session.time("solve", || solve(&chain, &data))?;
    let start = start_state(&chain, &config);

    let mut manifest = manifest_for(&config, "solve");
    manifest.norms = Some(session.time("norms", || norms(&chain, &data, &sol, start))?);

    let mut verdicts = vec![invariants_verdict(&sol)];
    if with_checks {
        for decl in &config.checks {
            use rbsde::config::CheckDecl::*;
            let v = match decl {
                Invariants => continue, // always first, above
                KplusDensity => session.time("check_kplus_density", || {
                    density_verdict(&chain, &data, &sol)
                })?,
                Comparison { shift } => session.time("check_comparison", || {
                    comparison_verdict(&config, &model, &chain, &data, &sol, *shift)
                })?,
                AprioriSequence { denominators } => {
                    let (v, report) = session.time("check_apriori", || {
                        apriori_verdict(&config, &model, &chain, &data, &sol, denominators, start)
                    })?;
                    manifest.apriori = Some(report);
                    v
                }
                Compensator { n_paths, time_steps } => session.time("check_compensator", || {
                    compensator_verdict(&config, &model, *n_paths, *time_steps)
                })?,
                WeakError { n_pairs, dts } => session.time("check_weak_error", || {
                    weak_error_verdict(&config, &model, *n_pairs, dts)
                })?,
                NormsMc { n_paths } => session.time("check_norms_mc", || {
                    norms_mc_verdict(&config, &chain, &data, &sol, start, *n_paths)
                })?,
            };
            verdicts.push(v);
        }
    }

    let mut artifacts = Vec::new();
    if config.output.solution_csv {
        artifacts.push(("solution.csv".to_string(), solution_csv(&chain, &sol)));
    }
    session.finish(if with_checks { "check" } else { "solve" }, manifest, artifacts, verdicts)
}

fn run_compare(args: &RunArgs) -> Result<i32> {
    let mut session = Session::open(args)?;
    let config = session.config.clone();
    let model = config.build_model()?;
    let chain = session.time("build_chain", || config.build_chain(&model))?;
    let data = session.time("assemble", || config.build_problem(&model, &chain))?;
    let sol = session.time("solve", || solve(&chain, &data))?;

    // Shifts from the config's comparison checks; 0.1 when none declared.
    let shifts: Vec<f64> = config
        .checks
        .iter()
        .filter_map(|c| match c {
            rbsde::config::CheckDecl::Comparison { shift } => Some(*shift),
            _ => None,
        })
        .collect();
    let shifts = if shifts.is_empty() { vec![0.1] } else { shifts };

    let mut verdicts = Vec::new();
    for shift in shifts {
        let mut v = session.time("check_comparison", || {
            comparison_verdict(&config, &model, &chain, &data, &sol, shift)
        })?;
        v.name = format!("comparison_{shift}");
        verdicts.push(v);
    }

    let manifest = manifest_for(&config, "compare");
    let artifacts = vec![("solution.csv".to_string(), solution_csv(&chain, &sol))];
    session.finish("compare", manifest, artifacts, verdicts)
}

fn run_simulate(args: &RunArgs) -> Result<i32> {
    let mut session = Session::open(args)?;
    let config = session.config.clone();
    let sim = config
        .simulate
        .clone()
        .ok_or_else(|| Error::Config("simulate subcommand needs a `simulate` block".into()))?;
    let model = config.build_model()?;
    let grid = uniform_grid(model.horizon, sim.time_steps);
    let bundle = session.time("simulate", || {
        simulate_paths(
            &model,
            &grid,
            &[config.model.x0],
            config.model.regime0,
            sim.n_paths,
            config.seed,
            sim.convention.to_convention(),
        )
    })?;

    let report = session.time("compensator", || Ok(compensator_check(&bundle, &model)))?;
    let worst = report.lines.iter().map(|l| l.z_score.abs()).fold(0.0, f64::max);
    for line in &report.lines {
        println!(
            "mark {:?}: events {:.0}, compensator mean {:.4}, z = {:+.3}",
            line.mark, line.empirical_count, line.compensator_mean, line.z_score
        );
    }
    for regime in 0..model.k {
        let (p, se) = terminal_regime_frequency(&bundle, regime);
        println!("terminal regime {regime}: frequency {p:.4} (se {se:.4})");
    }
    let detail = format!("{} paths, {} steps, worst |z| = {worst:.3}", sim.n_paths, sim.time_steps);
    let verdict = if report.pass {
        Verdict::pass("compensator", detail)
    } else {
        Verdict::fail("compensator", detail)
    }
    .with_margin(worst - 4.0);

    let mut artifacts = Vec::new();
    if sim.dump_paths {
        artifacts.push(("paths.csv".to_string(), paths_csv(&bundle)));
    }
    let manifest = manifest_for(&config, "simulate");
    session.finish("simulate", manifest, artifacts, vec![verdict])
}

fn run_report(dir: &Path) -> Result<i32> {
    let manifest = Manifest::from_path(&dir.join("manifest.json"))?;
    let summary = render_report(dir, &manifest)?;
    print!("{}", summary.text);
    Ok(if summary.clean { 0 } else { 1 })
}
