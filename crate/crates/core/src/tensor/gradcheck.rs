//! Central finite-difference gradient checking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all checked entries.
    pub max_rel_error: f64,
    /// Parameter name and flat entry index of the largest error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose every perturbation crossed a ReLU kink or max-pool tie.
    pub skipped: usize,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of a scalar function with central
/// differences `(f(t + eps) - f(t - eps)) / (2 eps)` for every entry of every
/// parameter.
///
/// `f` receives a fresh graph and one trainable leaf per parameter, in order.
/// A perturbation that moves the forward pass onto a different piecewise-linear
/// branch (see [`Graph::activation_signature`]) is retried with `eps / 10` and
/// `eps / 100`; if all three cross, the entry is counted as skipped.
pub fn grad_check<F>(
    params: &[(&str, &Tensor)],
    cfg: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], with_backward: bool| -> Result<(f64, u64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        g.track_signature(true);
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Dimension(format!(
                "grad_check needs a scalar function, got {:?}",
                g.dims(out)
            )));
        }
        let y = g.scalar(out);
        let mut grads = Vec::new();
        if with_backward {
            g.backward(out)?;
            for &v in &vars {
                grads.push(
                    g.grad(v)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| alloc::vec![0.0; g.value(v).len()]),
                );
            }
        }
        Ok((y, g.activation_signature(), grads))
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| (*t).clone()).collect();
    let (_, base_sig, analytic) = eval(&values, true)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    for (p, (name, _)) in params.iter().enumerate() {
        for j in 0..values[p].len() {
            let orig = values[p].data()[j];
            let mut numeric = None;
            for step in [cfg.eps, cfg.eps / 10.0, cfg.eps / 100.0] {
                values[p].data_mut()[j] = orig + step;
                let (plus, sig_plus, _) = eval(&values, false)?;
                values[p].data_mut()[j] = orig - step;
                let (minus, sig_minus, _) = eval(&values, false)?;
                values[p].data_mut()[j] = orig;
                let diff = (plus - minus) / (2.0 * step);
                if !diff.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite finite difference for parameter {name}[{j}]"
                    )));
                }
                if sig_plus == base_sig && sig_minus == base_sig {
                    numeric = Some(diff);
                    break;
                }
            }
            let Some(n) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[p][j];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((String::from(*name), j));
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(alloc::vec![1], alloc::vec![3.0]).unwrap();
        let report = grad_check(&[("x", &x)], GradCheckConfig::default(), |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(report.passed);
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let mut g = Graph::new();
        let v = g.param(x);
        let s = g.sum(v).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::from_fn(&[4], |i| i as f64 + 0.3);
        let report = grad_check(&[("x", &x)], GradCheckConfig::default(), |g, v| {
            g.inject_fault(crate::tensor::OpKind::Scale);
            let y = g.scale(v[0], 2.0)?;
            g.sum(y)
        })
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst.as_ref().unwrap().0, "x");
    }
}
