//! Test Hamiltonians with analytic gradients, and a gradient validator.
//!
//! States are ordered `(q₁..q_m, p₁..p_m)`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gradientmethods::SeparableSystem;
use crate::integrator::{HamiltonianSystem, SharedSystem};

#[derive(Clone)]
pub struct ProblemInstance {
    pub system: SharedSystem,
    pub y0: Vec<f64>,
    pub default_h: f64,
    pub label: String,
}

impl std::fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("label", &self.label)
            .field("y0", &self.y0)
            .field("default_h", &self.default_h)
            .finish()
    }
}

fn check_len(y: &[f64], n: usize, label: &str) -> Result<()> {
    if y.len() != n {
        return Err(Error::Config(format!("{label}: state has length {}, expected {n}", y.len())));
    }
    Ok(())
}

/// `H = p³/3 - p/2 + q⁶/30 + q⁴/4 - q³/3 + 1/6`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faou;

impl HamiltonianSystem for Faou {
    fn dim(&self) -> usize {
        2
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        check_len(y, 2, "faou")?;
        let (q, p) = (y[0], y[1]);
        Ok(p.powi(3) / 3.0 - p / 2.0 + q.powi(6) / 30.0 + q.powi(4) / 4.0 - q.powi(3) / 3.0 + 1.0 / 6.0)
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(y, 2, "faou")?;
        let (q, p) = (y[0], y[1]);
        out[0] = q.powi(5) / 5.0 + q.powi(3) - q * q;
        out[1] = p * p - 0.5;
        Ok(())
    }

    fn hessian(&self, y: &[f64]) -> Option<Result<DMatrix<f64>>> {
        let (q, p) = (y[0], y[1]);
        Some(Ok(DMatrix::from_row_slice(
            2,
            2,
            &[q.powi(4) + 3.0 * q * q - 2.0 * q, 0.0, 0.0, 2.0 * p],
        )))
    }

    fn poly_degree(&self) -> Option<usize> {
        Some(6)
    }

    fn label(&self) -> &str {
        "faou"
    }
}

/// Fermi–Pasta–Ulam chain of `m` stiff/soft spring pairs with fixed ends.
#[derive(Debug, Clone, Copy)]
pub struct Fpu {
    pub m: usize,
    pub omega: f64,
}

impl Fpu {
    /// Displacement `q_i` with `q₀ = q_{2m+1} = 0`, `i` 0-based over `0..=2m+1`.
    fn q(&self, y: &[f64], i: usize) -> f64 {
        if i == 0 || i == 2 * self.m + 1 {
            0.0
        } else {
            y[i - 1]
        }
    }
}

impl HamiltonianSystem for Fpu {
    fn dim(&self) -> usize {
        4 * self.m
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        check_len(y, self.dim(), "fpu")?;
        let n = 2 * self.m;
        let kinetic: f64 = y[n..].iter().map(|p| p * p).sum::<f64>() / 2.0;
        let stiff: f64 = (1..=self.m)
            .map(|i| (self.q(y, 2 * i) - self.q(y, 2 * i - 1)).powi(2))
            .sum::<f64>()
            * self.omega
            * self.omega
            / 4.0;
        let soft: f64 = (0..=self.m)
            .map(|i| (self.q(y, 2 * i + 1) - self.q(y, 2 * i)).powi(4))
            .sum();
        Ok(kinetic + stiff + soft)
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(y, self.dim(), "fpu")?;
        let n = 2 * self.m;
        out.fill(0.0);
        out[n..].copy_from_slice(&y[n..]);
        let w2 = self.omega * self.omega / 2.0;
        for i in 1..=self.m {
            let d = self.q(y, 2 * i) - self.q(y, 2 * i - 1);
            out[2 * i - 1] += w2 * d;
            out[2 * i - 2] -= w2 * d;
        }
        for i in 0..=self.m {
            let d3 = 4.0 * (self.q(y, 2 * i + 1) - self.q(y, 2 * i)).powi(3);
            if 2 * i + 1 <= n {
                out[2 * i] += d3;
            }
            if i > 0 {
                out[2 * i - 1] -= d3;
            }
        }
        Ok(())
    }

    fn hessian(&self, y: &[f64]) -> Option<Result<DMatrix<f64>>> {
        let n = 2 * self.m;
        let mut hess = DMatrix::zeros(2 * n, 2 * n);
        for i in n..2 * n {
            hess[(i, i)] = 1.0;
        }
        // add c·(e_a - e_b)(e_a - e_b)ᵀ, skipping fixed ends (index None)
        let mut add = |a: Option<usize>, b: Option<usize>, c: f64| {
            for (u, su) in [(a, 1.0), (b, -1.0)] {
                for (v, sv) in [(a, 1.0), (b, -1.0)] {
                    if let (Some(u), Some(v)) = (u, v) {
                        hess[(u, v)] += c * su * sv;
                    }
                }
            }
        };
        let idx = |i: usize| (i >= 1 && i <= n).then(|| i - 1);
        let w2 = self.omega * self.omega / 2.0;
        for i in 1..=self.m {
            add(idx(2 * i), idx(2 * i - 1), w2);
        }
        for i in 0..=self.m {
            let d = self.q(y, 2 * i + 1) - self.q(y, 2 * i);
            add(idx(2 * i + 1), idx(2 * i), 12.0 * d * d);
        }
        Some(Ok(hess))
    }

    fn poly_degree(&self) -> Option<usize> {
        Some(4)
    }

    fn label(&self) -> &str {
        "fpu"
    }
}

/// Charged particle in a Biot–Savart magnetic field, unit mass, coupling
/// `α = e B₀`; state `(x, y, z, ẋ, ẏ, ż)` with the dotted variables as momenta.
#[derive(Debug, Clone, Copy)]
pub struct BiotSavart {
    pub alpha: f64,
}

impl BiotSavart {
    fn rho2(&self, y: &[f64]) -> Result<f64> {
        let r2 = y[0] * y[0] + y[1] * y[1];
        if !(r2 > 0.0) || !r2.is_finite() {
            return Err(Error::Domain(format!("biot: log singularity at ϱ = {}", r2.sqrt())));
        }
        Ok(r2)
    }
}

impl HamiltonianSystem for BiotSavart {
    fn dim(&self) -> usize {
        6
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        check_len(y, 6, "biot")?;
        let r2 = self.rho2(y)?;
        let a = self.alpha;
        let u = y[3] - a * y[0] / r2;
        let v = y[4] - a * y[1] / r2;
        let w = y[5] + a * 0.5 * r2.ln();
        Ok(0.5 * (u * u + v * v + w * w))
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(y, 6, "biot")?;
        let r2 = self.rho2(y)?;
        let r4 = r2 * r2;
        let (x, yy) = (y[0], y[1]);
        let a = self.alpha;
        let u = y[3] - a * x / r2;
        let v = y[4] - a * yy / r2;
        let w = y[5] + a * 0.5 * r2.ln();
        out[0] = -a * u * (yy * yy - x * x) / r4 + a * v * 2.0 * x * yy / r4 + a * w * x / r2;
        out[1] = a * u * 2.0 * x * yy / r4 - a * v * (x * x - yy * yy) / r4 + a * w * yy / r2;
        out[2] = 0.0;
        out[3] = u;
        out[4] = v;
        out[5] = w;
        Ok(())
    }

    fn label(&self) -> &str {
        "biot"
    }
}

/// `H = a(log q - q) + b(log p - p)`, i.e. `V(p) = b(log p - p)`, `U(q) = -a(log q - q)`.
#[derive(Debug, Clone, Copy)]
pub struct Lotka {
    pub a: f64,
    pub b: f64,
}

fn positive(x: f64, name: &str) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Domain(format!("lotka: {name} = {x} outside the positive half-line")))
    }
}

impl HamiltonianSystem for Lotka {
    fn dim(&self) -> usize {
        2
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        check_len(y, 2, "lotka")?;
        Ok(self.v(y[1])? - self.u(y[0])?)
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(y, 2, "lotka")?;
        out[0] = -self.du(y[0])?;
        out[1] = self.dv(y[1])?;
        Ok(())
    }

    fn hessian(&self, y: &[f64]) -> Option<Result<DMatrix<f64>>> {
        let (q, p) = (y[0], y[1]);
        Some(Ok(DMatrix::from_row_slice(
            2,
            2,
            &[-self.a / (q * q), 0.0, 0.0, -self.b / (p * p)],
        )))
    }

    fn label(&self) -> &str {
        "lotka"
    }

    fn as_separable(&self) -> Option<&dyn SeparableSystem> {
        Some(self)
    }
}

impl SeparableSystem for Lotka {
    fn v(&self, p: f64) -> Result<f64> {
        let p = positive(p, "p")?;
        Ok(self.b * (p.ln() - p))
    }

    fn dv(&self, p: f64) -> Result<f64> {
        let p = positive(p, "p")?;
        Ok(self.b * (1.0 / p - 1.0))
    }

    fn u(&self, q: f64) -> Result<f64> {
        let q = positive(q, "q")?;
        Ok(-self.a * (q.ln() - q))
    }

    fn du(&self, q: f64) -> Result<f64> {
        let q = positive(q, "q")?;
        Ok(-self.a * (1.0 / q - 1.0))
    }
}

/// Harmonic oscillator `H = ω(q² + p²)/2`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub omega: f64,
}

impl HamiltonianSystem for Linear {
    fn dim(&self) -> usize {
        2
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        check_len(y, 2, "linear")?;
        Ok(0.5 * self.omega * (y[0] * y[0] + y[1] * y[1]))
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(y, 2, "linear")?;
        out[0] = self.omega * y[0];
        out[1] = self.omega * y[1];
        Ok(())
    }

    fn hessian(&self, _y: &[f64]) -> Option<Result<DMatrix<f64>>> {
        Some(Ok(DMatrix::identity(2, 2) * self.omega))
    }

    fn poly_degree(&self) -> Option<usize> {
        Some(2)
    }

    fn label(&self) -> &str {
        "linear"
    }

    fn as_separable(&self) -> Option<&dyn SeparableSystem> {
        Some(self)
    }
}

impl SeparableSystem for Linear {
    fn v(&self, p: f64) -> Result<f64> {
        Ok(0.5 * self.omega * p * p)
    }
    fn dv(&self, p: f64) -> Result<f64> {
        Ok(self.omega * p)
    }
    fn u(&self, q: f64) -> Result<f64> {
        Ok(-0.5 * self.omega * q * q)
    }
    fn du(&self, q: f64) -> Result<f64> {
        Ok(-self.omega * q)
    }
}

/// Nonseparable oscillator `H = (q² + p²)/2 + q²p²/2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Nonseparable;

impl HamiltonianSystem for Nonseparable {
    fn dim(&self) -> usize {
        2
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        check_len(y, 2, "nonseparable")?;
        let (q, p) = (y[0], y[1]);
        Ok(0.5 * (q * q + p * p) + 0.5 * q * q * p * p)
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(y, 2, "nonseparable")?;
        let (q, p) = (y[0], y[1]);
        out[0] = q + q * p * p;
        out[1] = p + q * q * p;
        Ok(())
    }

    fn hessian(&self, y: &[f64]) -> Option<Result<DMatrix<f64>>> {
        let (q, p) = (y[0], y[1]);
        Some(Ok(DMatrix::from_row_slice(
            2,
            2,
            &[1.0 + p * p, 2.0 * q * p, 2.0 * q * p, 1.0 + q * q],
        )))
    }

    fn poly_degree(&self) -> Option<usize> {
        Some(4)
    }

    fn label(&self) -> &str {
        "nonseparable"
    }
}

pub fn problem_faou() -> ProblemInstance {
    ProblemInstance {
        system: Arc::new(Faou),
        y0: vec![0.0, 1.0],
        default_h: 0.16,
        label: "faou".into(),
    }
}

pub fn problem_fpu() -> ProblemInstance {
    let m = 3;
    let mut y0 = vec![0.0; 4 * m];
    for (i, q) in y0.iter_mut().take(2 * m).enumerate() {
        *q = i as f64 / 10.0;
    }
    ProblemInstance {
        system: Arc::new(Fpu { m, omega: 50.0 }),
        y0,
        default_h: 0.05,
        label: "fpu".into(),
    }
}

pub fn problem_biot() -> ProblemInstance {
    // m = 1, e = -1, B0 = 1
    ProblemInstance {
        system: Arc::new(BiotSavart { alpha: -1.0 }),
        y0: vec![0.5, 10.0, 0.0, -0.1, -0.3, 0.0],
        default_h: 0.1,
        label: "biot".into(),
    }
}

pub fn problem_lotka(a: f64, b: f64) -> Result<ProblemInstance> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Config(format!("lotka needs a, b > 0, got a = {a}, b = {b}")));
    }
    Ok(ProblemInstance {
        system: Arc::new(Lotka { a, b }),
        y0: vec![0.5, 0.5],
        default_h: 0.5,
        label: "lotka".into(),
    })
}

pub fn problem_linear(omega: f64) -> Result<ProblemInstance> {
    if !(omega.is_finite() && omega != 0.0) {
        return Err(Error::Config(format!("linear needs a finite nonzero ω, got {omega}")));
    }
    Ok(ProblemInstance {
        system: Arc::new(Linear { omega }),
        y0: vec![1.0, 0.0],
        default_h: 0.1,
        label: "linear".into(),
    })
}

pub fn problem_nonseparable() -> ProblemInstance {
    ProblemInstance {
        system: Arc::new(Nonseparable),
        y0: vec![0.5, 0.5],
        default_h: 0.1,
        label: "nonseparable".into(),
    }
}

/// Names accepted by [`problem_by_name`].
pub const PROBLEM_NAMES: [&str; 6] = ["faou", "fpu", "biot", "lotka", "linear", "nonseparable"];

/// Registry lookup. Parameters follow the name after colons:
/// `lotka:a:b` (default `1:1`) and `linear:ω` (default `1`).
pub fn problem_by_name(spec: &str) -> Result<ProblemInstance> {
    let mut parts = spec.split(':');
    let name = parts.next().unwrap_or_default();
    let params = parts
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad problem parameter {s:?} in {spec:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let arity = |n: usize| -> Result<()> {
        if params.len() > n {
            return Err(Error::Config(format!("{name} takes at most {n} parameters")));
        }
        Ok(())
    };
    match name {
        "faou" => arity(0).map(|_| problem_faou()),
        "fpu" => arity(0).map(|_| problem_fpu()),
        "biot" => arity(0).map(|_| problem_biot()),
        "nonseparable" => arity(0).map(|_| problem_nonseparable()),
        "lotka" => {
            arity(2)?;
            match params.as_slice() {
                [] => problem_lotka(1.0, 1.0),
                [a, b] => problem_lotka(*a, *b),
                _ => Err(Error::Config("lotka takes both a and b".into())),
            }
        }
        "linear" => {
            arity(1)?;
            problem_linear(params.first().copied().unwrap_or(1.0))
        }
        _ => Err(Error::Config(format!(
            "unknown problem {name:?}; expected one of {}",
            PROBLEM_NAMES.join(", ")
        ))),
    }
}

/// Max over `points` of `‖∇H(y) - D_h H(y)‖∞`, `D_h` the central difference with step `fd_step`.
pub fn validate_gradient(sys: &dyn HamiltonianSystem, points: &[Vec<f64>], fd_step: f64) -> Result<f64> {
    let n = sys.dim();
    let mut g = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for y in points {
        sys.gradient(y, &mut g)?;
        let mut yp = y.clone();
        for j in 0..n {
            yp[j] = y[j] + fd_step;
            let hp = sys.energy(&yp)?;
            yp[j] = y[j] - fd_step;
            let hm = sys.energy(&yp)?;
            yp[j] = y[j];
            worst = worst.max((g[j] - (hp - hm) / (2.0 * fd_step)).abs());
        }
    }
    Ok(worst)
}
