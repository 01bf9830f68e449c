//! Coefficient specification of the regime-switching jump-diffusion factor
//! process `(X, N)` and pointwise evaluation of its extended generator.
//!
//! The process lives on `[0, T] x R^d x {0, .., k-1}`. Its generator acts on
//! a system of functions `u = u^i(t, x)` as the sum of four groups:
//! time + diffusion, compensated drift, a finite sum of jump terms (the jump
//! measure is a finite collection of atoms, so every jump integral is an
//! exact finite sum) and a regime-switch coupling through the intensity
//! matrix `lambda`.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Drift coefficient `b(t, x, i) -> R^d`.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], usize) -> Vec<f64> + Send + Sync>;
/// Dispersion `sigma(t, x, i) -> R^{d x d}` (row-major).
pub type DispersionFn = Arc<dyn Fn(f64, &[f64], usize) -> Vec<f64> + Send + Sync>;
/// Jump size `delta(t, x, i, y_atom) -> R^d`.
pub type JumpSizeFn = Arc<dyn Fn(f64, &[f64], usize, &[f64]) -> Vec<f64> + Send + Sync>;
/// Jump intensity density `f(t, x, i, y_atom) -> R_+`.
pub type JumpIntensityFn = Arc<dyn Fn(f64, &[f64], usize, &[f64]) -> f64 + Send + Sync>;
/// Regime intensity matrix `lambda(t, x) -> R^{k x k}` (row-major).
pub type RegimeIntensityFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// One atom of the finite jump measure `m(dy)`.
#[derive(Clone, Debug)]
pub struct JumpAtom {
    pub y: Vec<f64>,
    pub mass: f64,
}

/// Full coefficient set of the factor process.
///
/// Immutable after construction; coefficient callables must be reentrant.
#[derive(Clone)]
pub struct ModelSpec {
    pub d: usize,
    pub k: usize,
    pub horizon: f64,
    pub jump_atoms: Vec<JumpAtom>,
    /// Declared bound on the jump intensity density `f`.
    pub f_max: f64,
    /// Declared bound on the off-diagonal regime intensities.
    pub lambda_max: f64,
    /// True when every coefficient is independent of `t`; lets the chain
    /// builder reuse a single transition kernel across time steps.
    pub time_homogeneous: bool,
    drift: DriftFn,
    dispersion: DispersionFn,
    jump_size: JumpSizeFn,
    jump_intensity: JumpIntensityFn,
    regime_intensity: RegimeIntensityFn,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("d", &self.d)
            .field("k", &self.k)
            .field("horizon", &self.horizon)
            .field("atoms", &self.jump_atoms.len())
            .field("f_max", &self.f_max)
            .field("lambda_max", &self.lambda_max)
            .finish()
    }
}

#[allow(clippy::too_many_arguments)]
impl ModelSpec {
    pub fn new(
        d: usize,
        k: usize,
        horizon: f64,
        jump_atoms: Vec<JumpAtom>,
        f_max: f64,
        lambda_max: f64,
        time_homogeneous: bool,
        drift: DriftFn,
        dispersion: DispersionFn,
        jump_size: JumpSizeFn,
        jump_intensity: JumpIntensityFn,
        regime_intensity: RegimeIntensityFn,
    ) -> Result<Self> {
        if d < 1 {
            return Err(Error::Model("diffusion dimension d must be >= 1".into()));
        }
        if k < 1 {
            return Err(Error::Model("regime count k must be >= 1".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Model("time horizon must be positive and finite".into()));
        }
        for (idx, atom) in jump_atoms.iter().enumerate() {
            if atom.y.len() != d {
                return Err(Error::Model(format!(
                    "jump atom {idx} has dimension {}, expected {d}",
                    atom.y.len()
                )));
            }
            if !(atom.mass > 0.0 && atom.mass.is_finite()) {
                return Err(Error::Model(format!(
                    "jump atom {idx} mass must be strictly positive and finite"
                )));
            }
        }
        if !(f_max >= 0.0 && f_max.is_finite()) {
            return Err(Error::Model("f_max must be finite and nonnegative".into()));
        }
        if !(lambda_max >= 0.0 && lambda_max.is_finite()) {
            return Err(Error::Model("lambda_max must be finite and nonnegative".into()));
        }
        Ok(Self {
            d,
            k,
            horizon,
            jump_atoms,
            f_max,
            lambda_max,
            time_homogeneous,
            drift,
            dispersion,
            jump_size,
            jump_intensity,
            regime_intensity,
        })
    }

    pub fn total_jump_mass(&self) -> f64 {
        self.jump_atoms.iter().map(|a| a.mass).sum()
    }

    pub fn drift(&self, t: f64, x: &[f64], i: usize) -> Vec<f64> {
        (self.drift)(t, x, i)
    }

    /// Row-major `d x d` dispersion matrix.
    pub fn dispersion(&self, t: f64, x: &[f64], i: usize) -> Vec<f64> {
        (self.dispersion)(t, x, i)
    }

    /// Covariance `a = sigma sigma^T`, row-major.
    pub fn covariance(&self, t: f64, x: &[f64], i: usize) -> Vec<f64> {
        let s = self.dispersion(t, x, i);
        let d = self.d;
        let mut a = vec![0.0; d * d];
        for l in 0..d {
            for q in 0..d {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += s[l * d + r] * s[q * d + r];
                }
                a[l * d + q] = acc;
            }
        }
        a
    }

    pub fn jump_size(&self, t: f64, x: &[f64], i: usize, atom: usize) -> Vec<f64> {
        (self.jump_size)(t, x, i, &self.jump_atoms[atom].y)
    }

    pub fn jump_intensity(&self, t: f64, x: &[f64], i: usize, atom: usize) -> f64 {
        (self.jump_intensity)(t, x, i, &self.jump_atoms[atom].y)
    }

    /// Row-major `k x k` regime intensity matrix.
    pub fn regime_intensity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        (self.regime_intensity)(t, x)
    }

    /// Compensated drift `b - sum_atoms delta * f * mass`, the deterministic
    /// drift seen by the diffusion part when jumps are driven through the
    /// compensated measure.
    pub fn compensated_drift(&self, t: f64, x: &[f64], i: usize) -> Vec<f64> {
        let mut b = self.drift(t, x, i);
        for (a, atom) in self.jump_atoms.iter().enumerate() {
            let delta = self.jump_size(t, x, i, a);
            let w = self.jump_intensity(t, x, i, a) * atom.mass;
            for l in 0..self.d {
                b[l] -= delta[l] * w;
            }
        }
        b
    }

    /// Jump compensator drift `sum_atoms delta * f * mass`.
    pub fn jump_mean_rate(&self, t: f64, x: &[f64], i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        for (a, atom) in self.jump_atoms.iter().enumerate() {
            let delta = self.jump_size(t, x, i, a);
            let w = self.jump_intensity(t, x, i, a) * atom.mass;
            for l in 0..self.d {
                v[l] += delta[l] * w;
            }
        }
        v
    }

    /// Samples the boundedness and structure invariants at the given points.
    /// Coefficients are black-box callables, so these checks are sampled,
    /// not proven.
    pub fn validate_sampled(&self, points: &[(f64, Vec<f64>, usize)]) -> Result<()> {
        for (t, x, i) in points {
            let (t, i) = (*t, *i);
            let lam = self.regime_intensity(t, x);
            if lam.len() != self.k * self.k {
                return Err(Error::DimensionMismatch {
                    expected: self.k * self.k,
                    got: lam.len(),
                });
            }
            for row in 0..self.k {
                let mut sum = 0.0;
                for col in 0..self.k {
                    let v = lam[row * self.k + col];
                    if !v.is_finite() {
                        return Err(Error::NonFiniteCoefficient {
                            coefficient: "lambda",
                            t,
                            x: x.clone(),
                            regime: row,
                        });
                    }
                    if row != col {
                        if v < 0.0 {
                            return Err(Error::Model(format!(
                                "lambda[{row}][{col}] = {v} < 0 at t={t}, x={x:?}"
                            )));
                        }
                        if v > self.lambda_max + 1e-12 {
                            return Err(Error::Model(format!(
                                "lambda[{row}][{col}] = {v} exceeds declared bound {}",
                                self.lambda_max
                            )));
                        }
                    }
                    sum += v;
                }
                if sum.abs() > 1e-12 {
                    return Err(Error::Model(format!(
                        "lambda row {row} sums to {sum:e} (must be 0) at t={t}, x={x:?}"
                    )));
                }
            }
            for a in 0..self.jump_atoms.len() {
                let f = self.jump_intensity(t, x, i, a);
                if !f.is_finite() {
                    return Err(Error::NonFiniteCoefficient {
                        coefficient: "f",
                        t,
                        x: x.clone(),
                        regime: i,
                    });
                }
                if f < 0.0 {
                    return Err(Error::Model(format!(
                        "jump intensity f = {f} < 0 at t={t}, x={x:?}, atom {a}"
                    )));
                }
                if f > self.f_max + 1e-12 {
                    return Err(Error::Model(format!(
                        "jump intensity f = {f} exceeds declared bound {}",
                        self.f_max
                    )));
                }
            }
            let b = self.drift(t, x, i);
            let s = self.dispersion(t, x, i);
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCoefficient {
                    coefficient: "b",
                    t,
                    x: x.clone(),
                    regime: i,
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCoefficient {
                    coefficient: "sigma",
                    t,
                    x: x.clone(),
                    regime: i,
                });
            }
            // a = sigma sigma^T is symmetric PSD by construction; spot-check
            // symmetry and nonnegative diagonal of the computed product.
            let a = self.covariance(t, x, i);
            for l in 0..self.d {
                if a[l * self.d + l] < -1e-12 {
                    return Err(Error::Model(format!(
                        "covariance diagonal a[{l}][{l}] = {} < 0",
                        a[l * self.d + l]
                    )));
                }
                for q in 0..self.d {
                    if (a[l * self.d + q] - a[q * self.d + l]).abs() > 1e-10 {
                        return Err(Error::Model("covariance not symmetric".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A test function `u = u^i(t, x)` with supplied first and second
/// derivatives, as consumed by [`apply_generator`].
#[derive(Clone)]
pub struct Smooth {
    pub value: Arc<dyn Fn(f64, &[f64], usize) -> f64 + Send + Sync>,
    pub dt: Arc<dyn Fn(f64, &[f64], usize) -> f64 + Send + Sync>,
    /// Gradient in `x`, length `d`.
    pub grad: Arc<dyn Fn(f64, &[f64], usize) -> Vec<f64> + Send + Sync>,
    /// Hessian in `x`, row-major `d x d`.
    pub hess: Arc<dyn Fn(f64, &[f64], usize) -> Vec<f64> + Send + Sync>,
}

impl Smooth {
    pub fn constant(c: f64, d: usize) -> Self {
        Self {
            value: Arc::new(move |_, _, _| c),
            dt: Arc::new(|_, _, _| 0.0),
            grad: Arc::new(move |_, _, _| vec![0.0; d]),
            hess: Arc::new(move |_, _, _| vec![0.0; d * d]),
        }
    }

    /// The coordinate function `u(t, x, i) = x_l`.
    pub fn coordinate(l: usize, d: usize) -> Self {
        Self {
            value: Arc::new(move |_, x, _| x[l]),
            dt: Arc::new(|_, _, _| 0.0),
            grad: Arc::new(move |_, _, _| {
                let mut g = vec![0.0; d];
                g[l] = 1.0;
                g
            }),
            hess: Arc::new(move |_, _, _| vec![0.0; d * d]),
        }
    }

    /// `u(t, x, i) = x_l^2`.
    pub fn coordinate_squared(l: usize, d: usize) -> Self {
        Self {
            value: Arc::new(move |_, x, _| x[l] * x[l]),
            dt: Arc::new(|_, _, _| 0.0),
            grad: Arc::new(move |_, x, _| {
                let mut g = vec![0.0; d];
                g[l] = 2.0 * x[l];
                g
            }),
            hess: Arc::new(move |_, _, _| {
                let mut h = vec![0.0; d * d];
                h[l * d + l] = 2.0;
                h
            }),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], i: usize) -> f64 {
        (self.value)(t, x, i)
    }
}

/// Evaluates the generator at `(t, x, i)` as the exact sum of its four
/// groups; the jump integral is a finite sum over the atoms of `m`.
pub fn apply_generator(model: &ModelSpec, u: &Smooth, t: f64, x: &[f64], i: usize) -> Result<f64> {
    let d = model.d;
    let non_finite = |coefficient: &'static str| Error::NonFiniteCoefficient {
        coefficient,
        t,
        x: x.to_vec(),
        regime: i,
    };

    let du_dt = (u.dt)(t, x, i);
    let grad = (u.grad)(t, x, i);
    let hess = (u.hess)(t, x, i);
    if !du_dt.is_finite() || grad.iter().any(|v| !v.is_finite()) || hess.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model(format!(
            "test function derivatives not finite at t={t}, x={x:?}, regime={i}"
        )));
    }

    // Time + diffusion group.
    let a = model.covariance(t, x, i);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("sigma"));
    }
    let mut acc = du_dt;
    for l in 0..d {
        for q in 0..d {
            acc += 0.5 * a[l * d + q] * hess[l * d + q];
        }
    }

    // Compensated-drift group.
    let b = model.drift(t, x, i);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("b"));
    }
    let mut drift = b;
    for (idx, atom) in model.jump_atoms.iter().enumerate() {
        let delta = model.jump_size(t, x, i, idx);
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(non_finite("delta"));
        }
        let f = model.jump_intensity(t, x, i, idx);
        if !f.is_finite() {
            return Err(non_finite("f"));
        }
        for l in 0..d {
            drift[l] -= delta[l] * f * atom.mass;
        }
    }
    for l in 0..d {
        acc += drift[l] * grad[l];
    }

    // Jump-integral group.
    let u0 = u.eval(t, x, i);
    for (idx, atom) in model.jump_atoms.iter().enumerate() {
        let delta = model.jump_size(t, x, i, idx);
        let f = model.jump_intensity(t, x, i, idx);
        let shifted: Vec<f64> = x.iter().zip(&delta).map(|(xi, di)| xi + di).collect();
        acc += (u.eval(t, &shifted, i) - u0) * f * atom.mass;
    }

    // Regime-switch group.
    let lam = model.regime_intensity(t, x);
    if lam.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("lambda"));
    }
    for j in 0..model.k {
        acc += lam[i * model.k + j] * (u.eval(t, x, j) - u0);
    }

    Ok(acc)
}

/// One point of the mark space: either a diffusion-jump atom or a regime
/// target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    Jump { atom: usize },
    Regime { j: usize },
}

/// The disjoint union of the jump atoms and the regime marks, with the
/// reference mass `rho` and the state-dependent density `zeta` of the
/// compensator of the driving random measure.
#[derive(Clone, Debug)]
pub struct MarkSpace {
    pub marks: Vec<Mark>,
    n_atoms: usize,
}

impl MarkSpace {
    pub fn rho(&self, model: &ModelSpec, mark: Mark) -> f64 {
        match mark {
            Mark::Jump { atom } => model.jump_atoms[atom].mass,
            Mark::Regime { .. } => 1.0,
        }
    }

    /// Compensator density at the given mark: the jump intensity `f` on a
    /// jump mark, `1{i != j} lambda_ij` on a regime mark.
    pub fn zeta(&self, model: &ModelSpec, t: f64, x: &[f64], i: usize, mark: Mark) -> f64 {
        match mark {
            Mark::Jump { atom } => model.jump_intensity(t, x, i, atom),
            Mark::Regime { j } => {
                if i == j {
                    0.0
                } else {
                    model.regime_intensity(t, x)[i * model.k + j]
                }
            }
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }
}

/// Builds the mark space: one mark per jump atom, one per regime.
pub fn build_mark_space(model: &ModelSpec) -> MarkSpace {
    let mut marks = Vec::with_capacity(model.jump_atoms.len() + model.k);
    for atom in 0..model.jump_atoms.len() {
        marks.push(Mark::Jump { atom });
    }
    for j in 0..model.k {
        marks.push(Mark::Regime { j });
    }
    MarkSpace {
        marks,
        n_atoms: model.jump_atoms.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ParametricModel;

    fn diffusion_1d(b: f64, sigma: f64) -> ModelSpec {
        ParametricModel::diffusion_1d(b, 0.0, sigma, 0.0, 1.0).build().unwrap()
    }

    #[test]
    fn generator_vanishes_on_constants() {
        let model = diffusion_1d(0.7, 0.4);
        let u = Smooth::constant(5.0, 1);
        let g = apply_generator(&model, &u, 0.3, &[1.2], 0).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn generator_on_coordinate_is_drift() {
        // No jumps, no switching: G(x_1) = b_1.
        let model = diffusion_1d(0.7, 0.4);
        let u = Smooth::coordinate(0, 1);
        let g = apply_generator(&model, &u, 0.0, &[2.0], 0).unwrap();
        assert!((g - 0.7).abs() < 1e-14);
    }

    #[test]
    fn generator_on_square_matches_expansion() {
        // Pure diffusion: G(x_1^2) = 2 x_1 b_1 + a_11. Cross-checked against a
        // central finite difference of the one-step weak expectation
        // E[(x + b dt + sigma sqrt(dt) Z)^2] = x^2 + (2 x b + sigma^2) dt + b^2 dt^2.
        let (b, sigma, x) = (0.7, 0.4, 1.3);
        let model = diffusion_1d(b, sigma);
        let u = Smooth::coordinate_squared(0, 1);
        let g = apply_generator(&model, &u, 0.0, &[x], 0).unwrap();
        let expected = 2.0 * x * b + sigma * sigma;
        assert!((g - expected).abs() < 1e-12);

        let weak = |dt: f64| x * x + (2.0 * x * b + sigma * sigma) * dt + b * b * dt * dt;
        let dt = 1e-4;
        let fd = (weak(dt) - weak(-dt)) / (2.0 * dt);
        assert!((g - fd).abs() < 1e-7);
    }

    #[test]
    fn generator_is_linear_in_u() {
        let model = ParametricModel::sample_two_regime().build().unwrap();
        let u = Smooth::coordinate_squared(0, 1);
        let v = Smooth::coordinate(0, 1);
        let (alpha, beta) = (1.7, -0.3);
        let combo = Smooth {
            value: {
                let (u, v) = (u.clone(), v.clone());
                Arc::new(move |t, x, i| alpha * u.eval(t, x, i) + beta * v.eval(t, x, i))
            },
            dt: Arc::new(|_, _, _| 0.0),
            grad: {
                let (u, v) = (u.clone(), v.clone());
                Arc::new(move |t, x, i| {
                    let gu = (u.grad)(t, x, i);
                    let gv = (v.grad)(t, x, i);
                    gu.iter().zip(&gv).map(|(a, b)| alpha * a + beta * b).collect()
                })
            },
            hess: {
                let (u, v) = (u.clone(), v.clone());
                Arc::new(move |t, x, i| {
                    let hu = (u.hess)(t, x, i);
                    let hv = (v.hess)(t, x, i);
                    hu.iter().zip(&hv).map(|(a, b)| alpha * a + beta * b).collect()
                })
            },
        };
        for &(t, x, i) in &[(0.1, 0.5, 0), (0.4, 1.2, 1), (0.9, -0.7, 0)] {
            let g_combo = apply_generator(&model, &combo, t, &[x], i).unwrap();
            let g_u = apply_generator(&model, &u, t, &[x], i).unwrap();
            let g_v = apply_generator(&model, &v, t, &[x], i).unwrap();
            assert!((g_combo - (alpha * g_u + beta * g_v)).abs() < 1e-10);
        }
    }

    #[test]
    fn mark_space_counts_and_zeta() {
        // k=1, no atoms: a single regime mark whose zeta is identically 0.
        let model = diffusion_1d(0.0, 1.0);
        let ms = build_mark_space(&model);
        assert_eq!(ms.marks.len(), 1);
        assert_eq!(ms.zeta(&model, 0.0, &[0.0], 0, Mark::Regime { j: 0 }), 0.0);

        // 2 atoms, k=3: 5 marks.
        let model = ParametricModel::sample_regimes_atoms(3, 2).build().unwrap();
        let ms = build_mark_space(&model);
        assert_eq!(ms.marks.len(), 5);
        // Self-regime mark has zeta 0; off-regime mark carries lambda.
        assert_eq!(ms.zeta(&model, 0.0, &[1.0], 1, Mark::Regime { j: 1 }), 0.0);
        assert!(ms.zeta(&model, 0.0, &[1.0], 1, Mark::Regime { j: 0 }) > 0.0);
    }

    #[test]
    fn sampled_validation_catches_bad_lambda() {
        let lam_bad: RegimeIntensityFn = Arc::new(|_, _| vec![-0.5, 0.5, 0.5, -0.4]);
        let model = ModelSpec::new(
            1,
            2,
            1.0,
            vec![],
            0.0,
            1.0,
            true,
            Arc::new(|_, _, _| vec![0.0]),
            Arc::new(|_, _, _| vec![1.0]),
            Arc::new(|_, _, _, y| y.to_vec()),
            Arc::new(|_, _, _, _| 0.0),
            lam_bad,
        )
        .unwrap();
        let err = model.validate_sampled(&[(0.0, vec![0.0], 0)]);
        assert!(err.is_err());
    }
}
