//! Stage-equation solvers, time stepping and the linear stability function.
//!
//! Two solvers are provided for HBVMs:
//!
//! * [`step_full`] iterates on all `k` stage vectors of a Butcher tableau;
//! * [`step_reduced`] iterates only on the `s` Legendre coefficients `γ_j` of
//!   `σ̇`, rebuilding every stage as `σ(t₀ + t_i h) = y₀ + h Σ_j γ_j ∫₀^{t_i} P_j`.
//!
//! Both reach the same fixed point; the reduced form works in dimension `2m·s`
//! independently of the number of silent stages.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gradientmethods::{self, ConditionFlag, ItohAbeForm, SeparableSystem};
use crate::polybasis::{gauss_rule, shifted_legendre, shifted_legendre_integral, LegendreBasis};
use crate::tableau::{build_hbvm, ButcherTableau, HbvmSpec, StructureMatrices};

/// Canonical Hamiltonian system `ẏ = J ∇H(y)`, `y = (q, p)`, `J = [[0, I], [-I, 0]]`.
pub trait HamiltonianSystem: Send + Sync {
    /// Phase-space dimension `2m`.
    fn dim(&self) -> usize;

    fn energy(&self, y: &[f64]) -> Result<f64>;

    fn gradient(&self, y: &[f64], out: &mut [f64]) -> Result<()>;

    /// Analytic Hessian `∇²H(y)`, if available.
    fn hessian(&self, _y: &[f64]) -> Option<Result<DMatrix<f64>>> {
        None
    }

    /// Degree ν when `H` is a polynomial.
    fn poly_degree(&self) -> Option<usize> {
        None
    }

    fn label(&self) -> &str;

    /// Separable splitting `H = V(p) - U(q)` for one degree of freedom.
    fn as_separable(&self) -> Option<&dyn SeparableSystem> {
        None
    }
}

/// `f(y) = J ∇H(y)`.
pub fn vector_field(sys: &dyn HamiltonianSystem, y: &[f64], out: &mut [f64]) -> Result<()> {
    let n = sys.dim();
    let m = n / 2;
    let mut g = vec![0.0; n];
    sys.gradient(y, &mut g)?;
    for i in 0..m {
        out[i] = g[m + i];
        out[m + i] = -g[i];
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "{}: non-finite vector field at {y:?}",
            sys.label()
        )));
    }
    Ok(())
}

/// Central-difference Hessian from gradients, step `1e-6 (1 + |y_j|)`, symmetrized.
pub fn fd_hessian(sys: &dyn HamiltonianSystem, y: &[f64]) -> Result<DMatrix<f64>> {
    let n = sys.dim();
    let mut hess = DMatrix::zeros(n, n);
    let mut yp = y.to_vec();
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    for j in 0..n {
        let d = 1e-6 * (1.0 + y[j].abs());
        yp[j] = y[j] + d;
        sys.gradient(&yp, &mut gp)?;
        yp[j] = y[j] - d;
        sys.gradient(&yp, &mut gm)?;
        yp[j] = y[j];
        for i in 0..n {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * d);
        }
    }
    Ok(0.5 * (&hess + hess.transpose()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverScheme {
    FixedPoint,
    SimplifiedNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianSource {
    /// Analytic Hessian when the system provides one, finite differences otherwise.
    Auto,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub scheme: SolverScheme,
    /// Absolute tolerance on the max-norm of the stage increments.
    pub tol: f64,
    pub max_iter: usize,
    pub jacobian: JacobianSource,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            scheme: SolverScheme::SimplifiedNewton,
            tol: 1e-14,
            max_iter: 100,
            jacobian: JacobianSource::Auto,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("solver tolerance must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }

    fn jacobian_at(&self, sys: &dyn HamiltonianSystem, y: &[f64]) -> Result<DMatrix<f64>> {
        let hess = match self.jacobian {
            JacobianSource::Auto => match sys.hessian(y) {
                Some(h) => h?,
                None => fd_hessian(sys, y)?,
            },
            JacobianSource::FiniteDifference => fd_hessian(sys, y)?,
        };
        // J ∇²H
        let n = sys.dim();
        let m = n / 2;
        Ok(DMatrix::from_fn(n, n, |i, j| {
            if i < m {
                hess[(m + i, j)]
            } else {
                -hess[(i - m, j)]
            }
        }))
    }
}

/// Outcome of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// Legendre coefficients `γ_j` of `σ̇`, so that `σ(t₀ + τh) = y₀ + h Σ γ_j ∫₀^τ P_j`.
    pub gamma: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
    pub flag: Option<ConditionFlag>,
}

/// Roundoff floor, in units of `ε·(1 + ‖y₀‖∞)`: an iteration whose update
/// stops shrinking below it is accepted as converged.
const STALL_ULPS: f64 = 256.0;

enum Progress {
    Converged,
    Continue,
}

struct ConvergenceMonitor {
    tol: f64,
    floor: f64,
    prev: f64,
}

impl ConvergenceMonitor {
    fn new(tol: f64, y0: &[f64]) -> Self {
        let scale = 1.0 + y0.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        Self {
            tol,
            floor: (10.0 * tol).max(STALL_ULPS * f64::EPSILON * scale),
            prev: f64::INFINITY,
        }
    }

    fn check(&mut self, iterations: usize, update: f64) -> Result<Progress> {
        if !update.is_finite() {
            return Err(Error::NonConvergence {
                iterations,
                residual: update,
            });
        }
        let stalled = update >= self.prev && update <= self.floor;
        // with contraction rate ρ the remaining error is about update·ρ/(1-ρ)
        let rate = update / self.prev;
        let remaining = if rate < 1.0 {
            update * rate / (1.0 - rate)
        } else {
            f64::INFINITY
        };
        self.prev = update;
        if (update <= self.tol && remaining <= self.tol) || stalled {
            Ok(Progress::Converged)
        } else {
            Ok(Progress::Continue)
        }
    }
}

/// Precomputed data to step a Butcher tableau with the full stage system.
#[derive(Debug, Clone)]
pub struct FullStepper {
    tableau: ButcherTableau,
    /// Degree of σ used to report γ and extrapolate guesses.
    degree: usize,
    /// `𝓘` on the tableau abscissae for that degree.
    i_mat: DMatrix<f64>,
    extrapolation: DMatrix<f64>,
}

/// Precomputed data for the reduced `γ` solver of HBVM(k,s).
#[derive(Debug, Clone)]
pub struct ReducedStepper {
    spec: HbvmSpec,
    /// `𝓘`, `k × s`
    i_mat: DMatrix<f64>,
    /// `𝓓 𝓟ᵀ Ω`, `s × k`
    proj: DMatrix<f64>,
    /// `𝓓 𝓟ᵀ Ω 𝓘`, `s × s`
    coupling: DMatrix<f64>,
    extrapolation: DMatrix<f64>,
    tableau: ButcherTableau,
}

/// `E_jr = η_j ∫₀¹ P_j(τ) P_r(1 + τ) dτ`: re-expands `σ̇` of the previous step on
/// the next step interval.
fn extrapolation_matrix(s: usize) -> DMatrix<f64> {
    let q = gauss_rule(s).expect("s >= 1");
    DMatrix::from_fn(s, s, |j, r| {
        LegendreBasis::eta(j + 1)
            * q.integrate(|x| shifted_legendre(j + 1, x) * shifted_legendre(r + 1, 1.0 + x))
    })
}

fn extrapolate(e: &DMatrix<f64>, gamma: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s = e.nrows();
    let n = gamma.first().map_or(0, Vec::len);
    (0..s)
        .map(|j| {
            (0..n)
                .map(|a| (0..s).map(|r| e[(j, r)] * gamma[r][a]).sum())
                .collect()
        })
        .collect()
}

/// Solve `(I - h M ⊗ Jf) x = rhs` for block vectors stored row-wise (`rows × n`).
fn kron_lu(m: &DMatrix<f64>, jf: &DMatrix<f64>, h: f64) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let r = m.nrows();
    let n = jf.nrows();
    let mat = DMatrix::from_fn(r * n, r * n, |row, col| {
        let (i, a) = (row / n, row % n);
        let (j, b) = (col / n, col % n);
        let id = if row == col { 1.0 } else { 0.0 };
        id - h * m[(i, j)] * jf[(a, b)]
    });
    let lu = mat.lu();
    if !lu.is_invertible() {
        return Err(Error::NonConvergence {
            iterations: 0,
            residual: f64::NAN,
        });
    }
    Ok(lu)
}

impl FullStepper {
    pub fn new(tableau: ButcherTableau) -> Self {
        let degree = (tableau.order / 2).max(1);
        let i_mat = DMatrix::from_fn(tableau.stages(), degree, |i, j| {
            shifted_legendre_integral(j + 1, tableau.c[i])
        });
        Self {
            extrapolation: extrapolation_matrix(degree),
            tableau,
            degree,
            i_mat,
        }
    }

    pub fn tableau(&self) -> &ButcherTableau {
        &self.tableau
    }

    pub fn step(
        &self,
        sys: &dyn HamiltonianSystem,
        y0: &[f64],
        h: f64,
        cfg: &SolverConfig,
        guess: Option<&[Vec<f64>]>,
    ) -> Result<StepResult> {
        cfg.validate()?;
        let t = &self.tableau;
        let k = t.stages();
        let n = sys.dim();
        if y0.len() != n {
            return Err(Error::Config(format!("state has length {}, expected {n}", y0.len())));
        }
        // stage increments z_i = y_i - y0, stored k × n
        let mut z = DMatrix::<f64>::zeros(k, n);
        if let Some(gamma) = guess {
            let g = extrapolate(&self.extrapolation, gamma);
            for i in 0..k {
                for a in 0..n {
                    z[(i, a)] = h * (0..self.degree).map(|j| self.i_mat[(i, j)] * g[j][a]).sum::<f64>();
                }
            }
        }
        let mut fvals = DMatrix::<f64>::zeros(k, n);
        let mut stage = vec![0.0; n];
        let mut fbuf = vec![0.0; n];
        let mut eval_all = |z: &DMatrix<f64>, fvals: &mut DMatrix<f64>| -> Result<()> {
            for i in 0..k {
                for a in 0..n {
                    stage[a] = y0[a] + z[(i, a)];
                }
                vector_field(sys, &stage, &mut fbuf)?;
                for a in 0..n {
                    fvals[(i, a)] = fbuf[a];
                }
            }
            Ok(())
        };

        let lu = match cfg.scheme {
            SolverScheme::SimplifiedNewton => Some(kron_lu(&t.a, &cfg.jacobian_at(sys, y0)?, h)?),
            SolverScheme::FixedPoint => None,
        };
        let mut monitor = ConvergenceMonitor::new(cfg.tol, y0);
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        let mut converged = false;
        while iterations < cfg.max_iter {
            iterations += 1;
            eval_all(&z, &mut fvals)?;
            let target = h * &t.a * &fvals;
            let update = match &lu {
                Some(lu) => {
                    let g = &target - &z;
                    let rhs = DVector::from_iterator(k * n, g.transpose().iter().copied());
                    let dx = lu.solve(&rhs).ok_or(Error::NonConvergence {
                        iterations,
                        residual,
                    })?;
                    DMatrix::from_row_slice(k, n, dx.as_slice())
                }
                None => &target - &z,
            };
            z += &update;
            residual = update.amax();
            if let Progress::Converged = monitor.check(iterations, residual)? {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                iterations,
                residual,
            });
        }
        eval_all(&z, &mut fvals)?;
        let y1 = (0..n)
            .map(|a| y0[a] + h * (0..k).map(|i| t.b[i] * fvals[(i, a)]).sum::<f64>())
            .collect();
        let gamma = (0..self.degree)
            .map(|j| {
                let eta = LegendreBasis::eta(j + 1);
                (0..n)
                    .map(|a| {
                        eta * (0..k)
                            .map(|i| t.b[i] * shifted_legendre(j + 1, t.c[i]) * fvals[(i, a)])
                            .sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        Ok(StepResult {
            y0: y0.to_vec(),
            y1,
            gamma,
            iterations,
            residual,
            flag: None,
        })
    }
}

impl ReducedStepper {
    pub fn new(spec: HbvmSpec) -> Result<Self> {
        let rule = spec.rule()?;
        let m = StructureMatrices::new(&rule, spec.s);
        let proj = &m.d_mat * m.p_mat.transpose() * &m.o_mat;
        let coupling = &proj * &m.i_mat;
        Ok(Self {
            tableau: build_hbvm(spec)?,
            spec,
            i_mat: m.i_mat,
            proj,
            coupling,
            extrapolation: extrapolation_matrix(spec.s),
        })
    }

    pub fn spec(&self) -> HbvmSpec {
        self.spec
    }

    pub fn tableau(&self) -> &ButcherTableau {
        &self.tableau
    }

    pub fn step(
        &self,
        sys: &dyn HamiltonianSystem,
        y0: &[f64],
        h: f64,
        cfg: &SolverConfig,
        guess: Option<&[Vec<f64>]>,
    ) -> Result<StepResult> {
        cfg.validate()?;
        let s = self.spec.s;
        let k = self.i_mat.nrows();
        let n = sys.dim();
        if y0.len() != n {
            return Err(Error::Config(format!("state has length {}, expected {n}", y0.len())));
        }
        let mut gamma = DMatrix::<f64>::zeros(s, n);
        if let Some(g) = guess {
            let g = extrapolate(&self.extrapolation, g);
            for j in 0..s {
                for a in 0..n {
                    gamma[(j, a)] = g[j][a];
                }
            }
        }
        let mut fvals = DMatrix::<f64>::zeros(k, n);
        let mut stage = vec![0.0; n];
        let mut fbuf = vec![0.0; n];

        let lu = match cfg.scheme {
            SolverScheme::SimplifiedNewton => {
                Some(kron_lu(&self.coupling, &cfg.jacobian_at(sys, y0)?, h)?)
            }
            SolverScheme::FixedPoint => None,
        };
        let mut monitor = ConvergenceMonitor::new(cfg.tol, y0);
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        let mut converged = false;
        while iterations < cfg.max_iter {
            iterations += 1;
            // σ at every node from the current γ
            let incr = h * &self.i_mat * &gamma;
            for i in 0..k {
                for a in 0..n {
                    stage[a] = y0[a] + incr[(i, a)];
                }
                vector_field(sys, &stage, &mut fbuf)?;
                for a in 0..n {
                    fvals[(i, a)] = fbuf[a];
                }
            }
            let target = &self.proj * &fvals;
            let update = match &lu {
                Some(lu) => {
                    let g = &target - &gamma;
                    let rhs = DVector::from_iterator(s * n, g.transpose().iter().copied());
                    let dx = lu.solve(&rhs).ok_or(Error::NonConvergence {
                        iterations,
                        residual,
                    })?;
                    DMatrix::from_row_slice(s, n, dx.as_slice())
                }
                None => &target - &gamma,
            };
            gamma += &update;
            residual = h.abs() * update.amax();
            if let Progress::Converged = monitor.check(iterations, residual)? {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                iterations,
                residual,
            });
        }
        let y1 = (0..n).map(|a| y0[a] + h * gamma[(0, a)]).collect();
        let gamma = (0..s)
            .map(|j| gamma.row(j).iter().copied().collect())
            .collect();
        Ok(StepResult {
            y0: y0.to_vec(),
            y1,
            gamma,
            iterations,
            residual,
            flag: None,
        })
    }
}

/// One step of a Butcher tableau solving the full `k`-stage system.
pub fn step_full(
    t: &ButcherTableau,
    sys: &dyn HamiltonianSystem,
    y0: &[f64],
    h: f64,
    cfg: &SolverConfig,
) -> Result<StepResult> {
    FullStepper::new(t.clone()).step(sys, y0, h, cfg, None)
}

/// One step of HBVM(k,s) iterating on the `s` coefficients `γ_j` only.
pub fn step_reduced(
    spec: HbvmSpec,
    sys: &dyn HamiltonianSystem,
    y0: &[f64],
    h: f64,
    cfg: &SolverConfig,
) -> Result<StepResult> {
    ReducedStepper::new(spec)?.step(sys, y0, h, cfg, None)
}

/// Any one-step method the crate can integrate with.
#[derive(Debug, Clone)]
pub enum Method {
    /// HBVM(k,s) with the reduced solver.
    Hbvm(HbvmSpec),
    /// A Butcher tableau with the full stage solver.
    Tableau(ButcherTableau),
    ItohAbe(ItohAbeForm),
    /// Order-four closed-form method for `H = a(log q - q) + b(log p - p)`.
    Lv4 { a: f64, b: f64 },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Hbvm(spec) => spec.label(),
            Method::Tableau(t) => t.label.clone(),
            Method::ItohAbe(ItohAbeForm::Separable) => "ItohAbe-separable".into(),
            Method::ItohAbe(ItohAbeForm::General) => "ItohAbe-general".into(),
            Method::Lv4 { .. } => "LV4".into(),
        }
    }
}

enum StepperKind {
    Reduced(ReducedStepper),
    Full(FullStepper),
    ItohAbe(ItohAbeForm),
    Lv4 { a: f64, b: f64 },
}

/// A method with its precomputed data, ready to step repeatedly.
pub struct Stepper {
    kind: StepperKind,
    label: String,
}

impl Stepper {
    pub fn new(method: &Method) -> Result<Self> {
        let kind = match method {
            Method::Hbvm(spec) => StepperKind::Reduced(ReducedStepper::new(*spec)?),
            Method::Tableau(t) => StepperKind::Full(FullStepper::new(t.clone())),
            Method::ItohAbe(form) => StepperKind::ItohAbe(*form),
            Method::Lv4 { a, b } => StepperKind::Lv4 { a: *a, b: *b },
        };
        Ok(Self {
            kind,
            label: method.label(),
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// One step; `guess` is the previous step's `γ`, extrapolated as a starting value.
    pub fn step(
        &self,
        sys: &dyn HamiltonianSystem,
        y0: &[f64],
        h: f64,
        cfg: &SolverConfig,
        guess: Option<&[Vec<f64>]>,
    ) -> Result<StepResult> {
        let attempt = |g: Option<&[Vec<f64>]>| match &self.kind {
            StepperKind::Reduced(r) => r.step(sys, y0, h, cfg, g),
            StepperKind::Full(f) => f.step(sys, y0, h, cfg, g),
            StepperKind::ItohAbe(form) => gradientmethods::itoh_abe_step(*form, sys, y0, h, cfg, g),
            StepperKind::Lv4 { a, b } => gradientmethods::lv4_step_result(*a, *b, y0, h, cfg, g),
        };
        match attempt(guess) {
            // a poor extrapolated guess can leave the basin or the domain; retry from y0
            Err(_) if guess.is_some() => attempt(None),
            other => other,
        }
    }
}

/// Uniform-grid trajectory with per-step solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Entry `n` describes the step from `states[n]` to `states[n + 1]`.
    pub iterations: Vec<usize>,
    pub residuals: Vec<f64>,
    pub flags: Vec<Option<ConditionFlag>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory holds y0")
    }

    pub fn flagged_steps(&self) -> usize {
        self.flags.iter().filter(|f| f.is_some()).count()
    }
}

/// `n_steps` steps of size `h` from `y0` at `t = 0`.
pub fn integrate(
    method: &Method,
    sys: &dyn HamiltonianSystem,
    y0: &[f64],
    h: f64,
    n_steps: usize,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    let stepper = Stepper::new(method)?;
    integrate_with(&stepper, sys, y0, h, n_steps, cfg)
}

pub fn integrate_with(
    stepper: &Stepper,
    sys: &dyn HamiltonianSystem,
    y0: &[f64],
    h: f64,
    n_steps: usize,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut traj = Trajectory {
        times: Vec::with_capacity(n_steps + 1),
        states: Vec::with_capacity(n_steps + 1),
        iterations: Vec::with_capacity(n_steps),
        residuals: Vec::with_capacity(n_steps),
        flags: Vec::with_capacity(n_steps),
    };
    traj.times.push(0.0);
    traj.states.push(y0.to_vec());
    let mut prev_gamma: Option<Vec<Vec<f64>>> = None;
    for n in 0..n_steps {
        let y = traj.states.last().expect("nonempty");
        let res = stepper
            .step(sys, y, h, cfg, prev_gamma.as_deref())
            .map_err(|e| Error::Step {
                step: n,
                source: Box::new(e),
            })?;
        traj.times.push((n + 1) as f64 * h);
        traj.iterations.push(res.iterations);
        traj.residuals.push(res.residual);
        traj.flags.push(res.flag);
        traj.states.push(res.y1);
        prev_gamma = Some(res.gamma);
    }
    Ok(traj)
}

/// Stability function `R(z) = 1 + z bᵀ (I - zA)⁻¹ 𝟙`.
pub fn stability_value(t: &ButcherTableau, z: Complex64) -> Result<Complex64> {
    let k = t.stages();
    let m = DMatrix::<Complex64>::from_fn(k, k, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        Complex64::new(id, 0.0) - z * t.a[(i, j)]
    });
    let ones = DVector::<Complex64>::from_element(k, Complex64::new(1.0, 0.0));
    let lu = m.lu();
    let x = lu.solve(&ones).ok_or(Error::Pole)?;
    let bx: Complex64 = t.b.iter().zip(x.iter()).map(|(b, xi)| xi * *b).sum();
    let r = Complex64::new(1.0, 0.0) + z * bx;
    if !r.re.is_finite() || !r.im.is_finite() {
        return Err(Error::Pole);
    }
    Ok(r)
}

/// Shareable handle to a system.
pub type SharedSystem = Arc<dyn HamiltonianSystem>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polybasis::NodeFamily;
    use crate::tableau::gauss_collocation;

    /// `H = (q² + p²)/2 + q⁴/4`: smooth, nonlinear, polynomial of degree 4.
    struct Duffing;

    impl HamiltonianSystem for Duffing {
        fn dim(&self) -> usize {
            2
        }
        fn energy(&self, y: &[f64]) -> Result<f64> {
            Ok(0.5 * (y[0] * y[0] + y[1] * y[1]) + 0.25 * y[0].powi(4))
        }
        fn gradient(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = y[0] + y[0].powi(3);
            out[1] = y[1];
            Ok(())
        }
        fn poly_degree(&self) -> Option<usize> {
            Some(4)
        }
        fn label(&self) -> &str {
            "duffing"
        }
    }

    struct Constant;

    impl HamiltonianSystem for Constant {
        fn dim(&self) -> usize {
            2
        }
        fn energy(&self, _y: &[f64]) -> Result<f64> {
            Ok(3.0)
        }
        fn gradient(&self, _y: &[f64], out: &mut [f64]) -> Result<()> {
            out.fill(0.0);
            Ok(())
        }
        fn label(&self) -> &str {
            "constant"
        }
    }

    #[test]
    fn constant_hamiltonian_is_a_fixed_point() {
        let cfg = SolverConfig::default();
        for t in [gauss_collocation(2).unwrap(), crate::tableau::lobatto_iiia(3).unwrap()] {
            let r = step_full(&t, &Constant, &[0.3, -1.2], 0.4, &cfg).unwrap();
            assert_eq!(r.y1, vec![0.3, -1.2]);
        }
    }

    #[test]
    fn hbvm22_equals_gauss2() {
        let cfg = SolverConfig::default();
        let y0 = [0.8, -0.3];
        let a = step_full(
            &build_hbvm(HbvmSpec::gauss(2, 2).unwrap()).unwrap(),
            &Duffing,
            &y0,
            0.3,
            &cfg,
        )
        .unwrap();
        let b = step_full(&gauss_collocation(2).unwrap(), &Duffing, &y0, 0.3, &cfg).unwrap();
        for (x, y) in a.y1.iter().zip(&b.y1) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reduced_matches_full() {
        let cfg = SolverConfig::default();
        let y0 = [0.8, -0.3];
        for family in [NodeFamily::Gauss, NodeFamily::Lobatto] {
            for (k, s) in [(1, 1), (3, 1), (2, 2), (4, 2), (7, 3)] {
                let spec = HbvmSpec::new(k, s, family).unwrap();
                let full = step_full(&build_hbvm(spec).unwrap(), &Duffing, &y0, 0.25, &cfg).unwrap();
                let red = step_reduced(spec, &Duffing, &y0, 0.25, &cfg).unwrap();
                for (x, y) in full.y1.iter().zip(&red.y1) {
                    assert!((x - y).abs() <= 1e-12, "{spec}");
                }
                for (gf, gr) in full.gamma.iter().zip(&red.gamma) {
                    for (x, y) in gf.iter().zip(gr) {
                        assert!((x - y).abs() <= 1e-11, "{spec}");
                    }
                }
            }
        }
    }

    #[test]
    fn reduced_midpoint_is_implicit_midpoint() {
        let cfg = SolverConfig::default();
        let y0 = [0.8, -0.3];
        let h = 0.2;
        let r = step_reduced(HbvmSpec::gauss(1, 1).unwrap(), &Duffing, &y0, h, &cfg).unwrap();
        // y1 = y0 + h f((y0 + y1)/2)
        let mid = [(y0[0] + r.y1[0]) / 2.0, (y0[1] + r.y1[1]) / 2.0];
        let mut f = [0.0; 2];
        vector_field(&Duffing, &mid, &mut f).unwrap();
        for a in 0..2 {
            assert!((r.y1[a] - y0[a] - h * f[a]).abs() < 1e-14);
        }
    }

    #[test]
    fn polynomial_energy_conserved_once_k_is_large_enough() {
        let cfg = SolverConfig::default();
        let y0 = [1.1, 0.4];
        let h0 = Duffing.energy(&y0).unwrap();
        // ν = 4: k >= 2s conserves
        for s in 1..=3 {
            let r = step_reduced(HbvmSpec::gauss(2 * s, s).unwrap(), &Duffing, &y0, 0.3, &cfg).unwrap();
            assert!((Duffing.energy(&r.y1).unwrap() - h0).abs() < 100.0 * cfg.tol, "s={s}");
        }
        // Gauss(2) alone does not
        let r = step_reduced(HbvmSpec::gauss(2, 2).unwrap(), &Duffing, &y0, 0.3, &cfg).unwrap();
        assert!((Duffing.energy(&r.y1).unwrap() - h0).abs() > 1e-8);
    }

    #[test]
    fn fixed_point_and_newton_agree() {
        let y0 = [0.8, -0.3];
        let newton = SolverConfig::default();
        let fixed = SolverConfig {
            scheme: SolverScheme::FixedPoint,
            ..newton
        };
        let spec = HbvmSpec::gauss(4, 2).unwrap();
        let a = step_reduced(spec, &Duffing, &y0, 0.1, &newton).unwrap();
        let b = step_reduced(spec, &Duffing, &y0, 0.1, &fixed).unwrap();
        assert!(a.iterations < b.iterations);
        for (x, y) in a.y1.iter().zip(&b.y1) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn truncated_solve_reports_nonconvergence() {
        let cfg = SolverConfig {
            max_iter: 1,
            scheme: SolverScheme::FixedPoint,
            ..SolverConfig::default()
        };
        let err = step_reduced(HbvmSpec::gauss(4, 2).unwrap(), &Duffing, &[0.8, -0.3], 0.3, &cfg)
            .unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 1, .. }));
        assert!(SolverConfig { tol: 0.0, ..SolverConfig::default() }.validate().is_err());
    }

    #[test]
    fn integrate_zero_steps() {
        let t = integrate(
            &Method::Hbvm(HbvmSpec::gauss(2, 1).unwrap()),
            &Duffing,
            &[1.0, 0.0],
            0.1,
            0,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(t.states, vec![vec![1.0, 0.0]]);
        assert_eq!(t.steps(), 0);
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let cfg = SolverConfig::default();
        let y0 = [0.9, 0.2];
        for spec in [HbvmSpec::gauss(5, 2).unwrap(), HbvmSpec::lobatto(4, 3).unwrap()] {
            let fwd = step_reduced(spec, &Duffing, &y0, 0.3, &cfg).unwrap();
            let back = step_reduced(spec, &Duffing, &fwd.y1, -0.3, &cfg).unwrap();
            for a in 0..2 {
                assert!((back.y1[a] - y0[a]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stability_examples() {
        let t = build_hbvm(HbvmSpec::gauss(3, 1).unwrap()).unwrap();
        let r0 = stability_value(&t, Complex64::new(0.0, 0.0)).unwrap();
        assert!((r0 - 1.0).norm() < 1e-15);
        let r1 = stability_value(&t, Complex64::new(1.0, 0.0)).unwrap();
        assert!((r1 - 3.0).norm() < 1e-13);
        // midpoint has a pole at z = 2
        let mid = gauss_collocation(1).unwrap();
        assert_eq!(stability_value(&mid, Complex64::new(2.0, 0.0)), Err(Error::Pole));
        let t62 = build_hbvm(HbvmSpec::gauss(6, 2).unwrap()).unwrap();
        for y in [0.1, 1.0, 10.0] {
            let r = stability_value(&t62, Complex64::new(0.0, y)).unwrap();
            assert!((r.norm() - 1.0).abs() < 1e-12);
        }
    }
}
