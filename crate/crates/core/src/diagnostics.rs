//! Energy-error reports, drift detection, empirical orders and node-family
//! comparisons, plus CSV/JSON emitters (17 significant digits throughout).

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{integrate, HamiltonianSystem, Method, SolverConfig, StepResult, Trajectory};
use crate::numfmt::{self, sci17};
use crate::polybasis::{shifted_legendre, shifted_legendre_integral, NodeFamily};
use crate::problems::ProblemInstance;
use crate::tableau::{ButcherTableau, HbvmSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    /// `H(y_n) - H(y_0)` for every stored state, starting with 0.
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub series: Vec<f64>,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub max_abs: f64,
    /// Least-squares slope of the series against time.
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub drift_slope: f64,
    /// `|slope|` over its standard error; 0 for an exactly flat series.
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub drift_pvalue_proxy: f64,
}

/// Slope and t-statistic of the ordinary least-squares line through `(t, e)`.
pub fn drift_fit(t: &[f64], e: &[f64]) -> (f64, f64) {
    let n = t.len();
    if n < 3 {
        return (0.0, 0.0);
    }
    let nf = n as f64;
    let tm = t.iter().sum::<f64>() / nf;
    let em = e.iter().sum::<f64>() / nf;
    let sxx: f64 = t.iter().map(|x| (x - tm) * (x - tm)).sum();
    let sxy: f64 = t.iter().zip(e).map(|(x, y)| (x - tm) * (y - em)).sum();
    if sxx == 0.0 {
        return (0.0, 0.0);
    }
    let slope = sxy / sxx;
    let intercept = em - slope * tm;
    let sse: f64 = t
        .iter()
        .zip(e)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    let proxy = if slope == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        slope.abs() / se
    };
    (slope, proxy)
}

pub fn energy_report(traj: &Trajectory, sys: &dyn HamiltonianSystem) -> Result<EnergyReport> {
    let first = traj
        .states
        .first()
        .ok_or_else(|| Error::Config("empty trajectory".into()))?;
    let h0 = sys.energy(first)?;
    let series = traj
        .states
        .iter()
        .map(|y| sys.energy(y).map(|h| h - h0))
        .collect::<Result<Vec<_>>>()?;
    let max_abs = series.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    let (drift_slope, drift_pvalue_proxy) = drift_fit(&traj.times, &series);
    Ok(EnergyReport {
        series,
        max_abs,
        drift_slope,
        drift_pvalue_proxy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderEstimate {
    /// Step sizes `h₀, h₀/2, ...`.
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub steps: Vec<f64>,
    /// End-point errors against the reference solution.
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub errors: Vec<f64>,
    /// `log₂(e_i / e_{i+1})`.
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub orders: Vec<f64>,
    #[serde(rename = "final", serialize_with = "numfmt::ser_f64")]
    pub final_order: f64,
}

/// End time of order studies.
pub const ORDER_END_TIME: f64 = 1.0;

/// Ratio between the finest studied step and the reference step.
pub const REFERENCE_REFINEMENT: usize = 64;

fn steps_to(t_end: f64, h: f64) -> Result<usize> {
    let n = t_end / h;
    let r = n.round();
    if r < 1.0 || (n - r).abs() > 1e-9 * r {
        return Err(Error::Config(format!("step {h} does not divide the end time {t_end}")));
    }
    Ok(r as usize)
}

/// Errors at `t = 1` for steps `h₀/2^i`, `i < levels`, against the same method
/// run with step `h₀/2^{levels-1}/64`.
pub fn empirical_order(
    method: &Method,
    problem: &ProblemInstance,
    h0: f64,
    levels: usize,
) -> Result<OrderEstimate> {
    empirical_order_with(method, problem, h0, levels, ORDER_END_TIME, &SolverConfig::default())
}

pub fn empirical_order_with(
    method: &Method,
    problem: &ProblemInstance,
    h0: f64,
    levels: usize,
    t_end: f64,
    cfg: &SolverConfig,
) -> Result<OrderEstimate> {
    if levels < 3 {
        return Err(Error::Config(format!("order study needs at least 3 levels, got {levels}")));
    }
    if !(h0 > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {h0}")));
    }
    let steps: Vec<f64> = (0..levels).map(|i| h0 / 2f64.powi(i as i32)).collect();
    let h_ref = steps[levels - 1] / REFERENCE_REFINEMENT as f64;
    let mut runs: Vec<f64> = steps.clone();
    runs.push(h_ref);
    let sys = problem.system.as_ref();
    let finals = runs
        .par_iter()
        .map(|&h| {
            let n = steps_to(t_end, h)?;
            Ok(integrate(method, sys, &problem.y0, h, n, cfg)?.last().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = &finals[levels];
    let errors: Vec<f64> = finals[..levels]
        .iter()
        .map(|y| y.iter().zip(reference).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
        .collect();
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let final_order = *orders.last().expect("levels >= 3");
    Ok(OrderEstimate {
        steps,
        errors,
        orders,
        final_order,
    })
}

/// For each `k`, the max over all steps of `‖y_Gauss - y_Lobatto‖∞` between
/// HBVM(k,s) on the two node families.
pub fn compare_node_families(
    s: usize,
    k_list: &[usize],
    problem: &ProblemInstance,
    h: f64,
    n_steps: usize,
) -> Result<Vec<f64>> {
    compare_node_families_with(s, k_list, problem, h, n_steps, &SolverConfig::default())
}

pub fn compare_node_families_with(
    s: usize,
    k_list: &[usize],
    problem: &ProblemInstance,
    h: f64,
    n_steps: usize,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let sys = problem.system.as_ref();
    let jobs: Vec<(usize, NodeFamily)> = k_list
        .iter()
        .flat_map(|&k| [(k, NodeFamily::Gauss), (k, NodeFamily::Lobatto)])
        .collect();
    let trajs = jobs
        .par_iter()
        .map(|&(k, family)| {
            let method = Method::Hbvm(HbvmSpec::new(k, s, family)?);
            integrate(&method, sys, &problem.y0, h, n_steps, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(trajs
        .chunks(2)
        .map(|pair| {
            pair[0]
                .states
                .iter()
                .zip(&pair[1].states)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max)
        })
        .collect())
}

/// `|Σ_i ω_i σ̇(t_i)ᵀ ∇H(σ(t_i))|` for the polynomial `σ` of a step, on the
/// nodes and weights of `tableau`.
pub fn line_integral_residual(
    step: &StepResult,
    sys: &dyn HamiltonianSystem,
    tableau: &ButcherTableau,
    h: f64,
) -> Result<f64> {
    let n = sys.dim();
    let mut sigma = vec![0.0; n];
    let mut sdot = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    for (&c, &w) in tableau.c.iter().zip(&tableau.b) {
        sigma.copy_from_slice(&step.y0);
        sdot.fill(0.0);
        for (j, g) in step.gamma.iter().enumerate() {
            let pj = shifted_legendre(j + 1, c);
            let ij = shifted_legendre_integral(j + 1, c);
            for a in 0..n {
                sigma[a] += h * ij * g[a];
                sdot[a] += pj * g[a];
            }
        }
        sys.gradient(&sigma, &mut grad)?;
        total += w * sdot.iter().zip(&grad).map(|(x, y)| x * y).sum::<f64>();
    }
    Ok(total.abs())
}

/// Trajectory as CSV: `step,t,H_err,y1,...`. `metadata` lines are emitted as a
/// leading `# key: value` block; pass an empty slice for a bare data file.
pub fn write_trajectory_csv<W: Write>(
    mut w: W,
    traj: &Trajectory,
    report: &EnergyReport,
    metadata: &[(&str, String)],
) -> io::Result<()> {
    for (k, v) in metadata {
        writeln!(w, "# {k}: {v}")?;
    }
    let dim = traj.states.first().map_or(0, Vec::len);
    write!(w, "step,t,H_err")?;
    for i in 1..=dim {
        write!(w, ",y{i}")?;
    }
    writeln!(w)?;
    for (n, (t, y)) in traj.times.iter().zip(&traj.states).enumerate() {
        write!(w, "{n},{},{}", sci17(*t), sci17(report.series[n]))?;
        for v in y {
            write!(w, ",{}", sci17(*v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Run summary for JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub problem: String,
    pub method: String,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub h: f64,
    pub steps: usize,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub max_abs_energy_error: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub drift_slope: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub drift_pvalue_proxy: f64,
    pub flagged_steps: usize,
    pub max_iterations: usize,
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub final_state: Vec<f64>,
}

impl RunSummary {
    pub fn new(problem: &str, method: &str, h: f64, traj: &Trajectory, report: &EnergyReport) -> Self {
        Self {
            problem: problem.into(),
            method: method.into(),
            h,
            steps: traj.steps(),
            max_abs_energy_error: report.max_abs,
            drift_slope: report.drift_slope,
            drift_pvalue_proxy: report.drift_pvalue_proxy,
            flagged_steps: traj.flagged_steps(),
            max_iterations: traj.iterations.iter().copied().max().unwrap_or(0),
            final_state: traj.last().to_vec(),
        }
    }
}

/// Full JSON document: summary plus the energy series and states.
#[derive(Debug, Clone, Serialize)]
pub struct RunDocument<'a> {
    pub summary: &'a RunSummary,
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub times: &'a [f64],
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub energy_error: &'a [f64],
    #[serde(serialize_with = "numfmt::ser_rows")]
    pub states: &'a [Vec<f64>],
}

pub fn write_run_json<W: Write>(
    mut w: W,
    summary: &RunSummary,
    traj: &Trajectory,
    report: &EnergyReport,
) -> io::Result<()> {
    let doc = RunDocument {
        summary,
        times: &traj.times,
        energy_error: &report.series,
        states: &traj.states,
    };
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{step_reduced, vector_field, ReducedStepper};
    use crate::problems::{problem_faou, problem_linear, problem_lotka};
    use crate::tableau::{build_hbvm, gauss_collocation};

    fn traj_from(times: Vec<f64>, states: Vec<Vec<f64>>) -> Trajectory {
        let n = states.len() - 1;
        Trajectory {
            times,
            states,
            iterations: vec![1; n],
            residuals: vec![0.0; n],
            flags: vec![None; n],
        }
    }

    #[test]
    fn flat_series_has_no_drift() {
        let p = problem_linear(1.0).unwrap();
        // states on the unit circle: H constant
        let states: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).cos(), (i as f64).sin()]).collect();
        let times = (0..50).map(|i| i as f64).collect();
        let r = energy_report(&traj_from(times, states), p.system.as_ref()).unwrap();
        assert!(r.max_abs < 1e-15);
        assert!(r.drift_slope.abs() < 1e-16);
    }

    #[test]
    fn linear_drift_is_detected() {
        let t: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let e: Vec<f64> = t.iter().enumerate().map(|(i, t)| 1e-3 * t + 1e-6 * ((i % 3) as f64 - 1.0)).collect();
        let (slope, proxy) = drift_fit(&t, &e);
        assert!((slope - 1e-3).abs() < 1e-8);
        assert!(proxy > 100.0);
        assert_eq!(drift_fit(&t, &vec![0.0; 100]), (0.0, 0.0));
    }

    #[test]
    fn midpoint_order_two() {
        let p = problem_linear(1.0).unwrap();
        let est = empirical_order(&Method::Hbvm(HbvmSpec::gauss(1, 1).unwrap()), &p, 0.1, 3).unwrap();
        assert!((est.final_order - 2.0).abs() < 0.2, "{est:?}");
    }

    #[test]
    fn order_study_rejects_bad_grids() {
        let p = problem_linear(1.0).unwrap();
        let m = Method::Hbvm(HbvmSpec::gauss(1, 1).unwrap());
        assert!(empirical_order(&m, &p, 0.3, 3).is_err());
        assert!(empirical_order(&m, &p, 0.1, 2).is_err());
    }

    #[test]
    fn line_integral_vanishes_at_convergence() {
        let p = problem_lotka(1.0, 1.0).unwrap();
        let spec = HbvmSpec::gauss(10, 2).unwrap();
        let t = build_hbvm(spec).unwrap();
        let cfg = SolverConfig::default();
        let step = step_reduced(spec, p.system.as_ref(), &p.y0, 0.5, &cfg).unwrap();
        let r = line_integral_residual(&step, p.system.as_ref(), &t, 0.5).unwrap();
        assert!(r <= 10.0 * cfg.tol, "{r}");

        // one fixed-point sweep from y0: γ₁ = f(y0), higher coefficients zero
        let mut f0 = vec![0.0; 2];
        vector_field(p.system.as_ref(), &p.y0, &mut f0).unwrap();
        let crude = StepResult {
            y0: p.y0.clone(),
            y1: vec![p.y0[0] + 0.5 * f0[0], p.y0[1] + 0.5 * f0[1]],
            gamma: vec![f0, vec![0.0; 2]],
            iterations: 1,
            residual: 1.0,
            flag: None,
        };
        let r = line_integral_residual(&crude, p.system.as_ref(), &t, 0.5).unwrap();
        assert!(r > 1e3 * cfg.tol, "{r}");
    }

    #[test]
    fn line_integral_zero_gradient() {
        struct Flat;
        impl HamiltonianSystem for Flat {
            fn dim(&self) -> usize {
                2
            }
            fn energy(&self, _y: &[f64]) -> Result<f64> {
                Ok(1.0)
            }
            fn gradient(&self, _y: &[f64], out: &mut [f64]) -> Result<()> {
                out.fill(0.0);
                Ok(())
            }
            fn label(&self) -> &str {
                "flat"
            }
        }
        let spec = HbvmSpec::gauss(4, 2).unwrap();
        let step = ReducedStepper::new(spec)
            .unwrap()
            .step(&Flat, &[0.3, 0.4], 0.1, &SolverConfig::default(), None)
            .unwrap();
        let r = line_integral_residual(&step, &Flat, &gauss_collocation(4).unwrap(), 0.1).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn node_families_agree_for_large_k() {
        let p = problem_faou();
        let d = compare_node_families(1, &[1, 3], &p, 0.16, 20).unwrap();
        assert_eq!(d.len(), 2);
        // ν = 6, s = 1: k = 3 conserves exactly on both families and both are
        // the same discretization of the line integral
        assert!(d[1] < 1e-12, "{d:?}");
        assert!(d[0] > d[1]);
    }

    #[test]
    fn csv_and_json_are_stable() {
        let p = problem_linear(1.0).unwrap();
        let m = Method::Hbvm(HbvmSpec::gauss(2, 1).unwrap());
        let traj = integrate(&m, p.system.as_ref(), &p.y0, 0.125, 4, &SolverConfig::default()).unwrap();
        let report = energy_report(&traj, p.system.as_ref()).unwrap();
        let mut a = Vec::new();
        write_trajectory_csv(&mut a, &traj, &report, &[]).unwrap();
        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,t,H_err,y1,y2"));
        assert!(lines.next().unwrap().starts_with("0,0.0000000000000000e0,0.0000000000000000e0,1.0000000000000000e0"));
        assert_eq!(text.lines().count(), 6);

        let summary = RunSummary::new("linear", &m.label(), 0.125, &traj, &report);
        let mut b = Vec::new();
        write_run_json(&mut b, &summary, &traj, &report).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&b).unwrap();
        assert_eq!(v["summary"]["steps"], 4);
        assert_eq!(v["summary"]["h"].as_f64(), Some(0.125));
        assert!(String::from_utf8(b).unwrap().contains("\"h\": 1.2500000000000000e-1"));
    }
}
