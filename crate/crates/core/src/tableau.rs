//! Butcher tableaux: the HBVM(k,s) family and classical collocation comparators.
//!
//! For HBVM(k,s) the stage matrix is `A = 𝓘 𝓓 𝓟ᵀ Ω`, where on the `k` quadrature
//! abscissae `t_i` with weights `ω_i`:
//!
//! * `𝓘_ij = ∫₀^{t_i} P_j`, `𝓟_ij = P_j(t_i)` (both `k × s`),
//! * `𝓓 = diag(2j - 1)` and `Ω = diag(ω_i)`.
//!
//! The fundamental/silent split of the abscissae is not represented: every node
//! enters the matrices on an equal footing.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt;
use crate::polybasis::{
    gauss_rule, lobatto_rule, rule, shifted_legendre, shifted_legendre_integral, LegendreBasis,
    NodeFamily, QuadratureRule,
};

/// A `k`-stage Runge–Kutta method.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub c: Vec<f64>,
    pub b: Vec<f64>,
    pub a: DMatrix<f64>,
    /// Classical order of the method.
    pub order: usize,
    pub label: String,
}

/// Identifies one member of the HBVM family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HbvmSpec {
    /// Number of fundamental stages (degree of the polynomial σ).
    pub s: usize,
    /// Total number of stages `k = s + r`.
    pub k: usize,
    pub family: NodeFamily,
}

impl HbvmSpec {
    pub fn new(k: usize, s: usize, family: NodeFamily) -> Result<Self> {
        if s == 0 {
            return Err(Error::Config("HBVM needs s >= 1".into()));
        }
        if k < s {
            return Err(Error::Config(format!("HBVM({k},{s}) needs k >= s")));
        }
        Ok(Self { s, k, family })
    }

    pub fn gauss(k: usize, s: usize) -> Result<Self> {
        Self::new(k, s, NodeFamily::Gauss)
    }

    pub fn lobatto(k: usize, s: usize) -> Result<Self> {
        Self::new(k, s, NodeFamily::Lobatto)
    }

    /// Number of silent stages `r = k - s`.
    pub fn silent(&self) -> usize {
        self.k - self.s
    }

    /// Number of abscissae: `k` Gauss nodes or `k + 1` Lobatto nodes.
    pub fn node_count(&self) -> usize {
        match self.family {
            NodeFamily::Gauss => self.k,
            NodeFamily::Lobatto => self.k + 1,
        }
    }

    pub fn rule(&self) -> Result<QuadratureRule> {
        rule(self.family, self.node_count())
    }

    /// Largest polynomial degree ν whose Hamiltonians are conserved exactly,
    /// i.e. the largest ν with `k ≥ ν s / 2`.
    pub fn conserved_degree(&self) -> usize {
        2 * self.k / self.s
    }

    pub fn label(&self) -> String {
        format!("HBVM({},{})-{}", self.k, self.s, self.family)
    }
}

impl fmt::Display for HbvmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The matrices `𝓘, 𝓟, 𝓓, Ω` of an HBVM on a given rule.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrices {
    pub i_mat: DMatrix<f64>,
    pub p_mat: DMatrix<f64>,
    pub d_mat: DMatrix<f64>,
    pub o_mat: DMatrix<f64>,
}

impl StructureMatrices {
    pub fn new(rule: &QuadratureRule, s: usize) -> Self {
        let k = rule.len();
        let i_mat = DMatrix::from_fn(k, s, |i, j| shifted_legendre_integral(j + 1, rule.nodes[i]));
        let p_mat = DMatrix::from_fn(k, s, |i, j| shifted_legendre(j + 1, rule.nodes[i]));
        let d_mat = DMatrix::from_fn(s, s, |i, j| {
            if i == j {
                LegendreBasis::eta(j + 1)
            } else {
                0.0
            }
        });
        let o_mat = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&rule.weights));
        Self {
            i_mat,
            p_mat,
            d_mat,
            o_mat,
        }
    }

    /// `A = 𝓘 𝓓 𝓟ᵀ Ω`.
    pub fn stage_matrix(&self) -> DMatrix<f64> {
        &self.i_mat * &self.d_mat * self.p_mat.transpose() * &self.o_mat
    }

    /// Max-norm of `𝓟ᵀ Ω 𝓟 - 𝓓⁻¹` (discrete orthogonality of the basis).
    pub fn orthonormality_residual(&self) -> f64 {
        let gram = self.p_mat.transpose() * &self.o_mat * &self.p_mat;
        let s = gram.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..s {
            for j in 0..s {
                let target = if i == j { 1.0 / self.d_mat[(i, i)] } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Butcher tableau of HBVM(k,s).
pub fn build_hbvm(spec: HbvmSpec) -> Result<ButcherTableau> {
    let rule = spec.rule()?;
    if rule.exact_degree + 1 < 2 * spec.s {
        return Err(Error::Config(format!(
            "{} quadrature is exact to degree {}, order {} needs degree >= 2s-1 = {}",
            spec,
            rule.exact_degree,
            2 * spec.s,
            2 * spec.s - 1
        )));
    }
    let a = StructureMatrices::new(&rule, spec.s).stage_matrix();
    Ok(ButcherTableau {
        c: rule.nodes,
        b: rule.weights,
        a,
        order: 2 * spec.s,
        label: spec.label(),
    })
}

fn lagrange(nodes: &[f64], j: usize, x: f64) -> f64 {
    nodes
        .iter()
        .enumerate()
        .filter(|(m, _)| *m != j)
        .map(|(_, &cm)| (x - cm) / (nodes[j] - cm))
        .product()
}

/// Collocation tableau `a_ij = ∫₀^{c_i} ℓ_j`, `b_j = ∫₀¹ ℓ_j` on the given nodes.
fn collocation(nodes: &[f64], order: usize, label: String) -> Result<ButcherTableau> {
    let n = nodes.len();
    // ℓ_j has degree n-1; a Gauss rule with ceil(n/2) points on [0, c_i] is exact
    let q = gauss_rule(n.div_ceil(2).max(1))?;
    let integral = |j: usize, upper: f64| -> f64 {
        upper * q.integrate(|x| lagrange(nodes, j, upper * x))
    };
    let a = DMatrix::from_fn(n, n, |i, j| integral(j, nodes[i]));
    let b = (0..n).map(|j| integral(j, 1.0)).collect();
    Ok(ButcherTableau {
        c: nodes.to_vec(),
        b,
        a,
        order,
        label,
    })
}

/// Classical `s`-stage Gauss–Legendre collocation method (order `2s`).
pub fn gauss_collocation(s: usize) -> Result<ButcherTableau> {
    let rule = gauss_rule(s)?;
    collocation(&rule.nodes, 2 * s, format!("Gauss({s})"))
}

/// Lobatto IIIA method with the given number of stages (order `2 stages - 2`).
pub fn lobatto_iiia(stages: usize) -> Result<ButcherTableau> {
    let rule = lobatto_rule(stages)?;
    collocation(&rule.nodes, 2 * stages - 2, format!("LobattoIIIA({stages})"))
}

/// Maximum residuals of the simplifying assumptions `C(s)`, `B(p)` and `D(s-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplifyingResiduals {
    /// `max_{i, q ≤ s} |Σ_j a_ij c_j^{q-1} - c_i^q / q|`
    pub c: f64,
    /// `|Σ_i b_i c_i^{q-1} - 1/q|` for `q = 1..=p`
    pub b: Vec<f64>,
    /// `max_{j, q ≤ s-1} |Σ_i b_i c_i^{q-1} a_ij - b_j (1 - c_j^q) / q|`; zero when `s = 1`.
    pub d: f64,
}

impl SimplifyingResiduals {
    pub fn b_max(&self) -> f64 {
        self.b.iter().copied().fold(0.0, f64::max)
    }
}

pub fn simplifying_residuals(t: &ButcherTableau, s: usize, p: usize) -> SimplifyingResiduals {
    let n = t.stages();
    let mut c_res: f64 = 0.0;
    for q in 1..=s {
        for i in 0..n {
            let lhs: f64 = (0..n).map(|j| t.a[(i, j)] * t.c[j].powi(q as i32 - 1)).sum();
            c_res = c_res.max((lhs - t.c[i].powi(q as i32) / q as f64).abs());
        }
    }
    let b_res = (1..=p)
        .map(|q| {
            let lhs: f64 = (0..n).map(|i| t.b[i] * t.c[i].powi(q as i32 - 1)).sum();
            (lhs - 1.0 / q as f64).abs()
        })
        .collect();
    let mut d_res: f64 = 0.0;
    for q in 1..s {
        for j in 0..n {
            let lhs: f64 = (0..n)
                .map(|i| t.b[i] * t.c[i].powi(q as i32 - 1) * t.a[(i, j)])
                .sum();
            let rhs = t.b[j] * (1.0 - t.c[j].powi(q as i32)) / q as f64;
            d_res = d_res.max((lhs - rhs).abs());
        }
    }
    SimplifyingResiduals {
        c: c_res,
        b: b_res,
        d: d_res,
    }
}

#[derive(Serialize, Deserialize)]
struct TableauJson {
    label: String,
    order: usize,
    #[serde(serialize_with = "numfmt::ser_vec")]
    c: Vec<f64>,
    #[serde(serialize_with = "numfmt::ser_vec")]
    b: Vec<f64>,
    #[serde(serialize_with = "numfmt::ser_rows", rename = "A")]
    a: Vec<Vec<f64>>,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.c.len()
    }

    /// Max-norm of `A 𝟙 - c`.
    pub fn row_sum_residual(&self) -> f64 {
        (0..self.stages())
            .map(|i| (self.a.row(i).sum() - self.c[i]).abs())
            .fold(0.0, f64::max)
    }

    /// Max-norm of `P A P + A - 𝟙 bᵀ`, `P` the index-reversing permutation.
    pub fn symmetry_residual(&self) -> f64 {
        let n = self.stages();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let r = self.a[(n - 1 - i, n - 1 - j)] + self.a[(i, j)] - self.b[j];
                worst = worst.max(r.abs());
            }
        }
        worst
    }

    /// Machine-readable dump: `c`, `b`, `A` row-major, `label`, `order`, 17 digits.
    pub fn to_json(&self) -> String {
        let dump = TableauJson {
            label: self.label.clone(),
            order: self.order,
            c: self.c.clone(),
            b: self.b.clone(),
            a: (0..self.stages())
                .map(|i| self.a.row(i).iter().copied().collect())
                .collect(),
        };
        serde_json::to_string_pretty(&dump).expect("tableau serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dump: TableauJson =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("tableau json: {e}")))?;
        let n = dump.c.len();
        if dump.b.len() != n || dump.a.len() != n || dump.a.iter().any(|r| r.len() != n) {
            return Err(Error::Config("tableau json: inconsistent dimensions".into()));
        }
        Ok(Self {
            c: dump.c,
            b: dump.b,
            a: DMatrix::from_fn(n, n, |i, j| dump.a[i][j]),
            order: dump.order,
            label: dump.label,
        })
    }
}

impl fmt::Display for ButcherTableau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} (order {}, {} stages)", self.label, self.order, self.stages())?;
        for i in 0..self.stages() {
            write!(f, "{:>24} |", numfmt::sci17(self.c[i]))?;
            for j in 0..self.stages() {
                write!(f, " {:>24}", numfmt::sci17(self.a[(i, j)]))?;
            }
            writeln!(f)?;
        }
        write!(f, "{:>24} +", "")?;
        for _ in 0..self.stages() {
            write!(f, "{:->25}", "")?;
        }
        writeln!(f)?;
        write!(f, "{:>24} |", "")?;
        for bj in &self.b {
            write!(f, " {:>24}", numfmt::sci17(*bj))?;
        }
        writeln!(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn spec_validation() {
        assert!(HbvmSpec::gauss(1, 2).is_err());
        assert!(HbvmSpec::gauss(3, 0).is_err());
        let s = HbvmSpec::gauss(6, 2).unwrap();
        assert_eq!(s.silent(), 4);
        assert_eq!(s.conserved_degree(), 6);
        assert_eq!(HbvmSpec::lobatto(6, 2).unwrap().node_count(), 7);
    }

    #[test]
    fn midpoint() {
        let t = build_hbvm(HbvmSpec::gauss(1, 1).unwrap()).unwrap();
        assert_eq!(t.c, vec![0.5]);
        assert_abs_diff_eq!(t.a[(0, 0)], 0.5, epsilon = 1e-16);
        assert_abs_diff_eq!(t.b[0], 1.0, epsilon = 1e-16);
        assert_eq!(t.order, 2);
        let g = gauss_collocation(1).unwrap();
        assert!(max_diff(&t.a, &g.a) < 1e-16);
    }

    #[test]
    fn gauss2_closed_form() {
        let g = gauss_collocation(2).unwrap();
        let r = 3f64.sqrt() / 6.0;
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, 0.25 - r, 0.25 + r, 0.25]);
        assert!(max_diff(&g.a, &expected) < 1e-15);
        let res = simplifying_residuals(&g, 2, 4);
        assert!(res.b_max() < 1e-13);
        assert!(res.c < 1e-13);
    }

    #[test]
    fn hbvm_with_k_equal_s_is_gauss_collocation() {
        for s in 1..=4 {
            let h = build_hbvm(HbvmSpec::gauss(s, s).unwrap()).unwrap();
            let g = gauss_collocation(s).unwrap();
            assert!(max_diff(&h.a, &g.a) < 1e-12, "s={s}");
        }
    }

    #[test]
    fn lobatto_hbvm_with_k_equal_s_is_lobatto_iiia() {
        for s in 1..=4 {
            let h = build_hbvm(HbvmSpec::lobatto(s, s).unwrap()).unwrap();
            let l = lobatto_iiia(s + 1).unwrap();
            assert!(max_diff(&h.a, &l.a) < 1e-12, "s={s}");
        }
    }

    #[test]
    fn lobatto_iiia_examples() {
        let t2 = lobatto_iiia(2).unwrap();
        let trap = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.5, 0.5]);
        assert!(max_diff(&t2.a, &trap) < 1e-16);
        let t3 = lobatto_iiia(3).unwrap();
        for (b, e) in t3.b.iter().zip([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]) {
            assert_abs_diff_eq!(*b, e, epsilon = 1e-15);
        }
        assert!(t3.a.row(0).iter().all(|x| *x == 0.0));
        // B(6) fails: Simpson is only exact to degree 3
        assert!(simplifying_residuals(&t3, 3, 6).b_max() > 1e-3);
    }

    #[test]
    fn hbvm62_simplifying_assumptions() {
        let t = build_hbvm(HbvmSpec::gauss(6, 2).unwrap()).unwrap();
        assert!(t.row_sum_residual() < 1e-13);
        let r = simplifying_residuals(&t, 2, 12);
        assert!(r.c < 1e-12);
        assert!(r.b_max() < 1e-12);
        assert!(r.d < 1e-12);
    }

    #[test]
    fn midpoint_residuals_trivial() {
        let t = gauss_collocation(1).unwrap();
        let r = simplifying_residuals(&t, 1, 2);
        assert!(r.c < 1e-15 && r.b_max() < 1e-15 && r.d == 0.0);
    }

    #[test]
    fn structure_orthonormality_and_symmetry() {
        for family in [NodeFamily::Gauss, NodeFamily::Lobatto] {
            for s in 1..=4 {
                for k in s..=s + 6 {
                    let spec = HbvmSpec::new(k, s, family).unwrap();
                    let rule = spec.rule().unwrap();
                    let m = StructureMatrices::new(&rule, s);
                    assert!(m.orthonormality_residual() < 1e-12);
                    let t = build_hbvm(spec).unwrap();
                    assert!(t.symmetry_residual() < 1e-12, "{spec}");
                    assert!(t.row_sum_residual() < 1e-13, "{spec}");
                    assert!((t.b.iter().sum::<f64>() - 1.0).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let t = build_hbvm(HbvmSpec::gauss(4, 2).unwrap()).unwrap();
        let text = t.to_json();
        assert!(text.contains("\"A\""));
        let back = ButcherTableau::from_json(&text).unwrap();
        assert_eq!(back, t);
        assert!(ButcherTableau::from_json("{\"label\":\"x\",\"order\":1,\"c\":[0.5],\"b\":[1.0],\"A\":[]}").is_err());
    }

    #[test]
    fn display_lists_all_rows() {
        let t = lobatto_iiia(3).unwrap();
        let s = t.to_string();
        assert!(s.starts_with("LobattoIIIA(3)"));
        assert_eq!(s.lines().count(), 6);
    }
}
