//! Method descriptors: `hbvm:gauss:6:2`, `gauss:2`, `lobatto3a:3`, `midpoint`,
//! `itohabe[:separable|general]`, `lv4[:a:b]`.

use hbvm::gradientmethods::ItohAbeForm;
use hbvm::integrator::Method;
use hbvm::polybasis::NodeFamily;
use hbvm::tableau::{build_hbvm, gauss_collocation, lobatto_iiia, ButcherTableau, HbvmSpec};

use crate::CliError;

/// A parsed descriptor. `Lv4 { params: None }` takes `a, b` from the problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Descriptor {
    Hbvm(HbvmSpec),
    Gauss(usize),
    Lobatto3a(usize),
    ItohAbe(ItohAbeForm),
    Lv4 { params: Option<(f64, f64)> },
}

fn count(field: &str, text: &str, what: &str) -> Result<usize, CliError> {
    field
        .parse::<usize>()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("bad {what} {field:?} in method {text:?}")))
}

fn real(field: &str, text: &str) -> Result<f64, CliError> {
    field
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite() && *x > 0.0)
        .ok_or_else(|| CliError::Usage(format!("bad parameter {field:?} in method {text:?}")))
}

pub fn parse(text: &str) -> Result<Descriptor, CliError> {
    let parts: Vec<&str> = text.trim().split(':').collect();
    let bad = || {
        CliError::Usage(format!(
            "unknown method {text:?}; expected hbvm:gauss|lobatto:k:s, gauss:s, lobatto3a:n, midpoint, itohabe[:separable|general] or lv4[:a:b]"
        ))
    };
    let d = match parts.as_slice() {
        ["hbvm", fam, k, s] => {
            let family = match *fam {
                "gauss" => NodeFamily::Gauss,
                "lobatto" => NodeFamily::Lobatto,
                _ => return Err(bad()),
            };
            let k = count(k, text, "k")?;
            let s = count(s, text, "s")?;
            Descriptor::Hbvm(HbvmSpec::new(k, s, family).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        ["gauss", s] => Descriptor::Gauss(count(s, text, "stage count")?),
        ["lobatto3a", n] => {
            let n = count(n, text, "stage count")?;
            if n < 2 {
                return Err(CliError::Usage("lobatto3a needs at least 2 stages".into()));
            }
            Descriptor::Lobatto3a(n)
        }
        ["midpoint"] => Descriptor::Gauss(1),
        ["itohabe"] | ["itohabe", "separable"] => Descriptor::ItohAbe(ItohAbeForm::Separable),
        ["itohabe", "general"] => Descriptor::ItohAbe(ItohAbeForm::General),
        ["lv4"] => Descriptor::Lv4 { params: None },
        ["lv4", a, b] => Descriptor::Lv4 {
            params: Some((real(a, text)?, real(b, text)?)),
        },
        _ => return Err(bad()),
    };
    Ok(d)
}

impl Descriptor {
    /// The Butcher tableau, for methods that have one.
    pub fn tableau(&self) -> Result<ButcherTableau, CliError> {
        let t = match self {
            Descriptor::Hbvm(spec) => build_hbvm(*spec),
            Descriptor::Gauss(s) => gauss_collocation(*s),
            Descriptor::Lobatto3a(n) => lobatto_iiia(*n),
            Descriptor::ItohAbe(_) | Descriptor::Lv4 { .. } => {
                return Err(CliError::Usage("discrete-gradient methods have no Butcher tableau".into()))
            }
        };
        t.map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Resolve against the problem; `lotka` carries the `(a, b)` of a Lotka problem.
    pub fn method(&self, problem: &str, lotka: Option<(f64, f64)>) -> Result<Method, CliError> {
        match self {
            Descriptor::Hbvm(spec) => Ok(Method::Hbvm(*spec)),
            Descriptor::Gauss(_) | Descriptor::Lobatto3a(_) => Ok(Method::Tableau(self.tableau()?)),
            Descriptor::ItohAbe(form) => Ok(Method::ItohAbe(*form)),
            Descriptor::Lv4 { params } => {
                let Some((a, b)) = lotka else {
                    return Err(CliError::Usage(format!("lv4 only integrates lotka problems, not {problem:?}")));
                };
                match params {
                    Some(p) if *p != (a, b) => Err(CliError::Usage(format!(
                        "lv4 parameters {p:?} do not match problem {problem:?}"
                    ))),
                    _ => Ok(Method::Lv4 { a, b }),
                }
            }
        }
    }
}

/// `(a, b)` of a `lotka[:a:b]` problem name.
pub fn lotka_params(problem: &str) -> Option<(f64, f64)> {
    let mut parts = problem.split(':');
    if parts.next()? != "lotka" {
        return None;
    }
    match (parts.next(), parts.next()) {
        (None, _) => Some((1.0, 1.0)),
        (Some(a), Some(b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar() {
        assert_eq!(parse("hbvm:gauss:6:2").unwrap(), Descriptor::Hbvm(HbvmSpec::gauss(6, 2).unwrap()));
        assert_eq!(parse("hbvm:lobatto:4:2").unwrap(), Descriptor::Hbvm(HbvmSpec::lobatto(4, 2).unwrap()));
        assert_eq!(parse("midpoint").unwrap(), Descriptor::Gauss(1));
        assert_eq!(parse("itohabe").unwrap(), Descriptor::ItohAbe(ItohAbeForm::Separable));
        assert_eq!(parse("lv4:2:3").unwrap(), Descriptor::Lv4 { params: Some((2.0, 3.0)) });
        for bad in ["", "rk4", "hbvm:gauss:2:6", "hbvm:chebyshev:6:2", "gauss:0", "lobatto3a:1", "lv4:1", "lv4:-1:1"] {
            assert!(matches!(parse(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn lv4_needs_matching_lotka() {
        let d = parse("lv4").unwrap();
        assert_eq!(d.method("lotka:2:3", lotka_params("lotka:2:3")).unwrap().label(), "LV4");
        assert!(d.method("faou", lotka_params("faou")).is_err());
        let d = parse("lv4:2:3").unwrap();
        assert!(d.method("lotka", lotka_params("lotka")).is_err());
    }
}
