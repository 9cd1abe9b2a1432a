//! Shifted Legendre polynomials on `[0, 1]` and the Gauss / Lobatto rules built on them.
//!
//! Basis indices are 1-based: `P_j` has polynomial degree `j - 1`, `P_1 ≡ 1` and
//! `P_j(1) = 1`. With this normalization `∫₀¹ P_j² = 1 / (2j - 1)`, so the
//! consistency scaling is `η_j = 2j - 1`.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};

/// Evaluate the Legendre polynomial `L_n` on `[-1, 1]` together with `L_{n-1}`.
fn legendre_pair(n: usize, u: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut prev, mut cur) = (1.0, u);
    for m in 1..n {
        let m = m as f64;
        let next = ((2.0 * m + 1.0) * u * cur - m * prev) / (m + 1.0);
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// `P_j(x)` for any real `x`; no range checks.
pub(crate) fn shifted_legendre(j: usize, x: f64) -> f64 {
    debug_assert!(j >= 1);
    legendre_pair(j - 1, 2.0 * x - 1.0).0
}

/// `∫₀ˣ P_j` for any real `x`; no range checks.
///
/// For degree `n = j - 1 ≥ 1`, `∫₋₁ᵘ L_n = (L_{n+1}(u) - L_{n-1}(u)) / (2n + 1)`.
pub(crate) fn shifted_legendre_integral(j: usize, x: f64) -> f64 {
    debug_assert!(j >= 1);
    let n = j - 1;
    if n == 0 {
        return x;
    }
    let u = 2.0 * x - 1.0;
    let (ln, lnm1) = legendre_pair(n, u);
    let lnp1 = ((2 * n + 1) as f64 * u * ln - n as f64 * lnm1) / (n + 1) as f64;
    (lnp1 - lnm1) / (2.0 * (2 * n + 1) as f64)
}

fn check_args(j: usize, x: f64) -> Result<()> {
    if j < 1 {
        return Err(Error::Domain(format!("basis index must be >= 1, got {j}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("abscissa {x} outside [0, 1]")));
    }
    Ok(())
}

/// `P_j(x)` by the three-term recurrence.
pub fn legendre_eval(j: usize, x: f64) -> Result<f64> {
    check_args(j, x)?;
    Ok(shifted_legendre(j, x))
}

/// `∫₀ˣ P_j(t) dt`, exact up to rounding.
pub fn legendre_antiderivative(j: usize, x: f64) -> Result<f64> {
    check_args(j, x)?;
    Ok(shifted_legendre_integral(j, x))
}

/// Shifted Legendre basis `{P_1, ..., P_s}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LegendreBasis {
    max_degree: usize,
}

impl LegendreBasis {
    pub fn new(max_degree: usize) -> Result<Self> {
        if max_degree == 0 {
            return Err(Error::Domain("basis needs at least one polynomial".into()));
        }
        Ok(Self { max_degree })
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// `η_j = (∫₀¹ P_j²)⁻¹ = 2j - 1`.
    pub fn eta(j: usize) -> f64 {
        (2 * j - 1) as f64
    }

    pub fn eval(&self, j: usize, x: f64) -> Result<f64> {
        self.check_index(j)?;
        legendre_eval(j, x)
    }

    pub fn antiderivative(&self, j: usize, x: f64) -> Result<f64> {
        self.check_index(j)?;
        legendre_antiderivative(j, x)
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j > self.max_degree + 1 {
            return Err(Error::Domain(format!(
                "basis index {j} exceeds max_degree + 1 = {}",
                self.max_degree + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeFamily {
    Gauss,
    Lobatto,
}

impl std::fmt::Display for NodeFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeFamily::Gauss => f.write_str("gauss"),
            NodeFamily::Lobatto => f.write_str("lobatto"),
        }
    }
}

/// Interpolatory quadrature rule on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub family: NodeFamily,
    /// Largest `d` such that every polynomial of degree `d` is integrated exactly.
    pub exact_degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

const ROOT_TOL: f64 = 1e-14;
const MAX_ROOT_ITER: usize = 200;

/// Roots of an odd or even polynomial `f` in `(-1, 0)`, ascending, by
/// safeguarded Newton inside sign-change brackets.
///
/// `count` roots are expected; guesses are Chebyshev-type points.
fn negative_roots<F>(f: F, count: usize, guesses: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(f64) -> (f64, f64),
{
    if count == 0 {
        return Ok(Vec::new());
    }
    // Roots are roughly equispaced in θ = arccos(-u); scan finely in θ and stay
    // clear of u = 0, which is a root for odd f and never needed here.
    let samples = 32 * count + 64;
    let theta_max = PI / 2.0 - PI / (8.0 * (count as f64 + 1.0));
    let mut brackets = Vec::with_capacity(count);
    // start half a grid cell inside: derivative formulas are 0/0 at u = -1
    let mut a = -(0.5 * theta_max / samples as f64).cos();
    let mut fa = f(a).0;
    for m in 1..=samples {
        let b = -(theta_max * m as f64 / samples as f64).cos();
        let fb = f(b).0;
        if fa == 0.0 {
            brackets.push((a, a));
        } else if fa.signum() != fb.signum() && fb != 0.0 {
            brackets.push((a, b));
        }
        a = b;
        fa = fb;
    }
    if brackets.len() != count {
        return Err(Error::NonConvergence {
            iterations: 0,
            residual: (brackets.len() as f64 - count as f64).abs(),
        });
    }

    brackets
        .into_iter()
        .enumerate()
        .map(|(i, (lo, hi))| {
            if lo == hi {
                return Ok(lo);
            }
            let guess = guesses
                .get(i)
                .copied()
                .filter(|g| *g > lo && *g < hi)
                .unwrap_or(0.5 * (lo + hi));
            polish_root(&f, lo, hi, guess)
        })
        .collect()
}

fn polish_root<F>(f: &F, mut lo: f64, mut hi: f64, guess: f64) -> Result<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    let f_lo = f(lo).0;
    let mut x = guess;
    let mut last_step = hi - lo;
    for _ in 0..MAX_ROOT_ITER {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == f_lo.signum() {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - fx / dfx;
        let (next, step) = if dfx != 0.0 && newton > lo && newton < hi {
            (newton, (fx / dfx).abs())
        } else {
            (0.5 * (lo + hi), 0.5 * (hi - lo))
        };
        // bisection fallback when Newton stops contracting
        let (next, step) = if step > 0.5 * last_step && next == newton {
            (0.5 * (lo + hi), 0.5 * (hi - lo))
        } else {
            (next, step)
        };
        last_step = step;
        x = next;
        if step <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) || hi - lo <= f64::EPSILON
        {
            let (fx, dfx) = f(x);
            if fx.abs() <= ROOT_TOL * dfx.abs().max(1.0) {
                return Ok(x);
            }
            return Err(Error::NonConvergence {
                iterations: MAX_ROOT_ITER,
                residual: fx.abs(),
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ROOT_ITER,
        residual: f(x).0.abs(),
    })
}

/// Assemble nodes on `[0,1]` from the negative half of a symmetric node set on `[-1,1]`.
fn mirror(neg: &[f64], with_center: bool) -> Vec<f64> {
    let mut nodes: Vec<f64> = neg.iter().map(|u| 0.5 * (1.0 + u)).collect();
    if with_center {
        nodes.push(0.5);
    }
    nodes.extend(neg.iter().rev().map(|u| 0.5 * (1.0 - u)));
    nodes
}

/// `k`-point Gauss–Legendre rule on `[0, 1]`: nodes are the roots of `P_{k+1}`.
pub fn gauss_rule(k: usize) -> Result<QuadratureRule> {
    if k == 0 {
        return Err(Error::Domain("gauss_rule needs k >= 1".into()));
    }
    let f = |u: f64| {
        let (ln, lnm1) = legendre_pair(k, u);
        let d = k as f64 * (u * ln - lnm1) / (u * u - 1.0);
        (ln, d)
    };
    let half = k / 2;
    let guesses: Vec<f64> = (0..half)
        .map(|i| -(PI * (i as f64 + 0.75) / (k as f64 + 0.5)).cos())
        .collect();
    let neg = negative_roots(f, half, &guesses)?;
    let with_center = k % 2 == 1;
    let mut us: Vec<f64> = neg.clone();
    if with_center {
        us.push(0.0);
    }
    us.extend(neg.iter().rev().map(|u| -u));

    let weights = us
        .iter()
        .map(|&u| {
            let d = f(u).1;
            1.0 / ((1.0 - u * u) * d * d)
        })
        .collect();
    Ok(QuadratureRule {
        nodes: mirror(&neg, with_center),
        weights,
        family: NodeFamily::Gauss,
        exact_degree: 2 * k - 1,
    })
}

/// `n`-point Gauss–Lobatto rule on `[0, 1]`, including both endpoints.
pub fn lobatto_rule(n: usize) -> Result<QuadratureRule> {
    if n < 2 {
        return Err(Error::Domain("lobatto_rule needs n >= 2".into()));
    }
    let deg = n - 1;
    let nn1 = (deg * (deg + 1)) as f64;
    // interior nodes are the roots of L'_{n-1}
    let f = |u: f64| {
        let (ln, lnm1) = legendre_pair(deg, u);
        let d1 = deg as f64 * (u * ln - lnm1) / (u * u - 1.0);
        let d2 = (2.0 * u * d1 - nn1 * ln) / (1.0 - u * u);
        (d1, d2)
    };
    let interior = n - 2;
    let half = interior / 2;
    let guesses: Vec<f64> = (0..half)
        .map(|i| -(PI * (i as f64 + 1.0) / deg as f64).cos())
        .collect();
    let neg = negative_roots(f, half, &guesses)?;
    let with_center = interior % 2 == 1;

    let mut neg_all = vec![-1.0];
    neg_all.extend_from_slice(&neg);
    let mut us = neg_all.clone();
    if with_center {
        us.push(0.0);
    }
    us.extend(neg_all.iter().rev().map(|u| -u));

    let weights = us
        .iter()
        .map(|&u| {
            let ln = legendre_pair(deg, u).0;
            1.0 / (nn1 * ln * ln)
        })
        .collect();
    let mut nodes = mirror(&neg_all, with_center);
    nodes[0] = 0.0;
    nodes[n - 1] = 1.0;
    Ok(QuadratureRule {
        nodes,
        weights,
        family: NodeFamily::Lobatto,
        exact_degree: 2 * n - 3,
    })
}

/// Rule of the given family with `nodes` points.
pub fn rule(family: NodeFamily, nodes: usize) -> Result<QuadratureRule> {
    match family {
        NodeFamily::Gauss => gauss_rule(nodes),
        NodeFamily::Lobatto => lobatto_rule(nodes),
    }
}
