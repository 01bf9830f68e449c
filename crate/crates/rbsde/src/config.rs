//! File-declared runs: a serializable parametric model family (affine
//! coefficients per regime, constant-intensity jump atoms, constant regime
//! intensity matrix), a built-in cost family (affine driver, call/put-style
//! payoffs and obstacles), and the top-level run configuration consumed by
//! the CLI.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chain::{ChainApprox, build_chain};
use crate::data::{
    AlphaFn, CostFunctions, Driver, Floor, ObstacleFn, ProblemData, ProblemKind, TauSpec,
    assemble, lower_barrier_from_phi,
};
use crate::error::{Error, Result};
use crate::model::{JumpAtom, ModelSpec, Smooth};
use crate::pathsim::JumpConvention;

/// Affine coefficients of one regime: `b = b0 + b1·x`, `sigma = s0 + s1·x`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RegimeCoeffs {
    pub b0: f64,
    #[serde(default)]
    pub b1: f64,
    pub sigma0: f64,
    #[serde(default)]
    pub sigma1: f64,
}

/// One jump atom with a constant (state-independent) intensity density.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AtomDecl {
    pub y: f64,
    pub mass: f64,
    pub intensity: f64,
}

/// The serializable model family.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ParametricModel {
    pub horizon: f64,
    pub regimes: Vec<RegimeCoeffs>,
    #[serde(default)]
    pub atoms: Vec<AtomDecl>,
    /// Constant regime intensity matrix `k×k`; off-diagonal entries are the
    /// switch intensities, diagonals are recomputed as negative row sums.
    #[serde(default)]
    pub switching: Vec<Vec<f64>>,
    pub x0: f64,
    #[serde(default)]
    pub regime0: usize,
}

impl ParametricModel {
    /// Single-regime diffusion with affine coefficients.
    pub fn diffusion_1d(b0: f64, b1: f64, sigma0: f64, sigma1: f64, horizon: f64) -> Self {
        Self {
            horizon,
            regimes: vec![RegimeCoeffs { b0, b1, sigma0, sigma1 }],
            atoms: vec![],
            switching: vec![vec![0.0]],
            x0: 0.0,
            regime0: 0,
        }
    }

    /// A small two-regime model with jumps, used across unit tests.
    pub fn sample_two_regime() -> Self {
        Self {
            horizon: 1.0,
            regimes: vec![
                RegimeCoeffs { b0: 0.1, b1: 0.0, sigma0: 0.2, sigma1: 0.0 },
                RegimeCoeffs { b0: -0.05, b1: 0.0, sigma0: 0.3, sigma1: 0.0 },
            ],
            atoms: vec![AtomDecl { y: 0.5, mass: 1.0, intensity: 0.4 }],
            switching: vec![vec![0.0, 0.6], vec![0.3, 0.0]],
            x0: 1.0,
            regime0: 0,
        }
    }

    /// A `k`-regime model with `n_atoms` jump atoms, for structural tests.
    pub fn sample_regimes_atoms(k: usize, n_atoms: usize) -> Self {
        let regimes = (0..k)
            .map(|i| RegimeCoeffs {
                b0: 0.05 * (i as f64 + 1.0),
                b1: 0.0,
                sigma0: 0.1 * (i as f64 + 1.0),
                sigma1: 0.0,
            })
            .collect();
        let atoms = (0..n_atoms)
            .map(|a| AtomDecl { y: 0.3 * (a as f64 + 1.0), mass: 1.0, intensity: 0.2 })
            .collect();
        let switching = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 0.0 } else { 0.25 }).collect())
            .collect();
        Self { horizon: 1.0, regimes, atoms, switching, x0: 1.0, regime0: 0 }
    }

    /// The two-regime geometric-style model with unit jumps used by the
    /// integration suite.
    pub fn reference_two_regime() -> Self {
        Self {
            horizon: 1.0,
            regimes: vec![
                RegimeCoeffs { b0: 0.0, b1: 0.03, sigma0: 0.0, sigma1: 0.2 },
                RegimeCoeffs { b0: 0.0, b1: 0.01, sigma0: 0.0, sigma1: 0.3 },
            ],
            atoms: vec![
                AtomDecl { y: 1.0, mass: 1.0, intensity: 0.1 },
                AtomDecl { y: -1.0, mass: 1.0, intensity: 0.1 },
            ],
            switching: vec![vec![0.0, 0.5], vec![0.5, 0.0]],
            x0: 100.0,
            regime0: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.regimes.len()
    }

    pub fn build(&self) -> Result<ModelSpec> {
        let k = self.regimes.len();
        if k == 0 {
            return Err(Error::Config("model must declare at least one regime".into()));
        }
        if self.switching.len() != k || self.switching.iter().any(|row| row.len() != k) {
            return Err(Error::Config(format!(
                "switching matrix must be {k}×{k} to match the regime count"
            )));
        }
        if self.regime0 >= k {
            return Err(Error::Config(format!("regime0 = {} out of range", self.regime0)));
        }
        let regimes = self.regimes.clone();
        let regimes2 = self.regimes.clone();
        let atoms_decl = self.atoms.clone();
        let mut lam = vec![0.0; k * k];
        for i in 0..k {
            let mut row_sum = 0.0;
            for j in 0..k {
                if i != j {
                    let v = self.switching[i][j];
                    if v < 0.0 {
                        return Err(Error::Config(format!(
                            "switching[{i}][{j}] = {v} must be nonnegative"
                        )));
                    }
                    lam[i * k + j] = v;
                    row_sum += v;
                }
            }
            lam[i * k + i] = -row_sum;
        }
        let f_max = self.atoms.iter().map(|a| a.intensity).fold(0.0, f64::max);
        let lambda_max = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| lam[i * k + j])
            .fold(0.0, f64::max);
        let jump_atoms = self
            .atoms
            .iter()
            .map(|a| JumpAtom { y: vec![a.y], mass: a.mass })
            .collect();
        ModelSpec::new(
            1,
            k,
            self.horizon,
            jump_atoms,
            f_max,
            lambda_max,
            true,
            Arc::new(move |_, x: &[f64], i| vec![regimes[i].b0 + regimes[i].b1 * x[0]]),
            Arc::new(move |_, x: &[f64], i| vec![regimes2[i].sigma0 + regimes2[i].sigma1 * x[0]]),
            Arc::new(|_, _, _, y| y.to_vec()),
            Arc::new(move |_, _, _, y| {
                atoms_decl
                    .iter()
                    .find(|a| (a.y - y[0]).abs() < 1e-12)
                    .map(|a| a.intensity)
                    .unwrap_or(0.0)
            }),
            Arc::new(move |_, _| lam.clone()),
        )
    }
}

/// Affine driver family: `g~ = c0 + cu·u_i + cz·z + cr·r`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AffineDriver {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub coef_u: f64,
    #[serde(default)]
    pub coef_z: f64,
    #[serde(default)]
    pub coef_r: f64,
}

impl AffineDriver {
    pub fn lipschitz(&self) -> f64 {
        self.coef_u.abs() + self.coef_z.abs() + self.coef_r.abs()
    }
}

/// Built-in payoff/obstacle shapes in the spatial variable.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeDecl {
    Constant { value: f64 },
    /// `slope·x + intercept`.
    Affine { slope: f64, intercept: f64 },
    /// `(x − strike)⁺`.
    Call { strike: f64 },
    /// `(strike − x)⁺`.
    Put { strike: f64 },
    /// `max(x, floor)`.
    MaxWithFloor { floor: f64 },
    /// `max(x, floor) + offset`.
    MaxPlus { floor: f64, offset: f64 },
}

impl ShapeDecl {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ShapeDecl::Constant { value } => value,
            ShapeDecl::Affine { slope, intercept } => slope * x + intercept,
            ShapeDecl::Call { strike } => (x - strike).max(0.0),
            ShapeDecl::Put { strike } => (strike - x).max(0.0),
            ShapeDecl::MaxWithFloor { floor } => x.max(floor),
            ShapeDecl::MaxPlus { floor, offset } => x.max(floor) + offset,
        }
    }
}

/// The smooth functions available for barrier construction via the
/// generator route.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PhiKind {
    /// `phi(t, x, i) = x`.
    Coordinate,
}

/// `L = max(phi, floor)` with the reflection-density bound `alpha`
/// computed from the generator of `phi`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PhiBarrier {
    pub phi: PhiKind,
    #[serde(default)]
    pub floor: Option<f64>,
}

/// Lower-barrier declaration: either a plain shape, or the special
/// `phi`-built barrier, which also carries the reflection-density bound.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BarrierDecl {
    Phi(PhiBarrier),
    Shape(ShapeDecl),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TauDecl {
    Deterministic { time: f64 },
    HittingBelow { threshold: f64 },
    HittingAbove { threshold: f64 },
}

impl TauDecl {
    pub fn to_spec(self) -> TauSpec {
        match self {
            TauDecl::Deterministic { time } => TauSpec::Deterministic(time),
            TauDecl::HittingBelow { threshold } => TauSpec::HittingBelow(threshold),
            TauDecl::HittingAbove { threshold } => TauSpec::HittingAbove(threshold),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum KindDecl {
    Bsde,
    Rbsde,
    RbsdeRandomTerminal,
    R2bsde,
    TauR2bsde,
}

impl KindDecl {
    pub fn to_kind(self) -> ProblemKind {
        match self {
            KindDecl::Bsde => ProblemKind::Bsde,
            KindDecl::Rbsde => ProblemKind::Rbsde,
            KindDecl::RbsdeRandomTerminal => ProblemKind::RbsdeRandomTerminal,
            KindDecl::R2bsde => ProblemKind::R2bsde,
            KindDecl::TauR2bsde => ProblemKind::TauR2bsde,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: KindDecl,
    pub driver: AffineDriver,
    pub terminal: ShapeDecl,
    #[serde(default)]
    pub lower: Option<BarrierDecl>,
    #[serde(default)]
    pub upper: Option<BarrierDecl>,
    #[serde(default)]
    pub tau: Option<TauDecl>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub steps: usize,
    pub bounds: [f64; 2],
    pub nodes: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ConventionDecl {
    Compensated,
    Uncompensated,
}

impl ConventionDecl {
    pub fn to_convention(self) -> JumpConvention {
        match self {
            ConventionDecl::Compensated => JumpConvention::Compensated,
            ConventionDecl::Uncompensated => JumpConvention::Uncompensated,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_paths: usize,
    pub time_steps: usize,
    #[serde(default = "default_convention")]
    pub convention: ConventionDecl,
    /// Dump simulated paths as CSV.
    #[serde(default)]
    pub dump_paths: bool,
}

fn default_convention() -> ConventionDecl {
    ConventionDecl::Compensated
}

/// One checker activation with its parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckDecl {
    /// Reflection/Skorokhod invariants of the solved quadruple.
    Invariants,
    /// Lemma-style reflection-density bound (needs a `phi_coordinate` lower
    /// barrier).
    KplusDensity,
    /// Comparison under a terminal shift `xi' = xi + shift`.
    Comparison { shift: f64 },
    /// Stability trend over `xi + 1/n` for the listed `n`.
    AprioriSequence { denominators: Vec<u32> },
    /// Compensator statistics over simulated paths.
    Compensator { n_paths: usize, time_steps: usize },
    /// One-step weak error of the generator on `u = x²`.
    WeakError { n_pairs: usize, dts: Vec<f64> },
    /// Chain-DP norms versus Monte Carlo functionals.
    NormsMc { n_paths: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Default output directory; the CLI `--out` flag overrides it.
    #[serde(default)]
    pub directory: Option<String>,
    #[serde(default = "default_true")]
    pub solution_csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: None, solution_csv: true }
    }
}

fn default_true() -> bool {
    true
}

/// Top-level run configuration. The seed is mandatory: no implicit
/// randomness anywhere.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ParametricModel,
    pub chain: ChainConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub checks: Vec<CheckDecl>,
    #[serde(default)]
    pub output: OutputConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("config parse error at line {}, column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        self.model.build()
    }

    pub fn build_chain(&self, model: &ModelSpec) -> Result<ChainApprox> {
        build_chain(model, self.chain.steps, (self.chain.bounds[0], self.chain.bounds[1]), self.chain.nodes)
    }

    /// Builds the cost functions and assembles the problem on the chain.
    pub fn build_problem(&self, model: &ModelSpec, chain: &ChainApprox) -> Result<ProblemData> {
        let (cost, alpha) = build_cost(&self.problem, model)?;
        let has_phi = alpha.is_some();
        let tau_spec = self.problem.tau.map(TauDecl::to_spec).unwrap_or(TauSpec::None);
        let mut data = assemble(self.problem.kind.to_kind(), cost, model, chain, &tau_spec, alpha)?;
        if has_phi {
            data.phi = Some(Smooth::coordinate(0, 1));
        }
        Ok(data)
    }
}

fn obstacle_from_shape(shape: ShapeDecl) -> ObstacleFn {
    Arc::new(move |_t, x, _i| shape.eval(x))
}

/// Materializes the affine cost family; returns the cost functions plus the
/// reflection-density bound when the lower barrier carries one.
pub fn build_cost(problem: &ProblemConfig, model: &ModelSpec) -> Result<(CostFunctions, Option<AlphaFn>)> {
    let drv = problem.driver;
    let driver = Driver::Tilde(Arc::new(move |_t, _x, i: usize, u: &[f64], z: f64, r: f64| {
        drv.constant + drv.coef_u * u[i] + drv.coef_z * z + drv.coef_r * r
    }));
    let terminal = problem.terminal;
    let psi = Arc::new(move |x: f64, _i: usize| terminal.eval(x));

    let mut alpha = None;
    let lower: Option<ObstacleFn> = match problem.lower {
        None => None,
        Some(BarrierDecl::Shape(shape)) => Some(obstacle_from_shape(shape)),
        Some(BarrierDecl::Phi(PhiBarrier { phi: PhiKind::Coordinate, floor })) => {
            let phi = Smooth::coordinate(0, 1);
            let floor = match floor {
                None => Floor::None,
                Some(c) => Floor::At(c),
            };
            let built = lower_barrier_from_phi(&phi, floor, model);
            alpha = Some(built.alpha);
            Some(built.ell)
        }
    };
    let upper: Option<ObstacleFn> = match problem.upper {
        None => None,
        Some(BarrierDecl::Shape(shape)) => Some(obstacle_from_shape(shape)),
        Some(BarrierDecl::Phi(_)) => {
            return Err(Error::Config("phi-built barriers are lower barriers only".into()));
        }
    };

    Ok((
        CostFunctions {
            driver,
            psi,
            ell: lower,
            h_upper: upper,
            lipschitz: drv.lipschitz(),
            monotone_in_r: drv.coef_r >= 0.0,
        },
        alpha,
    ))
}
