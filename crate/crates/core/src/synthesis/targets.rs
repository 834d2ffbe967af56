use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(q: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(Error::input("target needs a nonempty q-vector"));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::input(format!("beta must be positive and finite, got {beta}")));
    }
    Ok(())
}

/// Softmax weights of `beta * q` relative to the maximum, their sum, and the max.
fn soft_weights(q: &[f64], beta: f64) -> (Vec<f64>, f64, f64) {
    let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = q.iter().map(|&v| (beta * (v - max)).exp()).collect();
    let sum = w.iter().sum();
    (w, sum, max)
}

/// Softmax(beta q)-weighted mean of `q`: a soft maximum.
pub fn t_minus(q: &[f64], beta: f64) -> Result<f64> {
    check(q)?;
    check_beta(beta)?;
    let (w, sum, max) = soft_weights(q, beta);
    let min = q.iter().cloned().fold(f64::INFINITY, f64::min);
    let offset: f64 = w.iter().zip(q).map(|(wi, &v)| wi * (v - max)).sum::<f64>() / sum;
    Ok((max + offset).clamp(min, max))
}

fn t_minus_grad(q: &[f64], beta: f64) -> Result<Vec<f64>> {
    let t = t_minus(q, beta)?;
    let (w, sum, _) = soft_weights(q, beta);
    Ok(w.iter().zip(q).map(|(wi, &v)| wi / sum * (1.0 + beta * (v - t))).collect())
}

fn negated(q: &[f64]) -> Vec<f64> {
    q.iter().map(|v| -v).collect()
}

/// Soft minimum, `-t_minus(-q)`.
pub fn t_plus(q: &[f64], beta: f64) -> Result<f64> {
    Ok(-t_minus(&negated(q), beta)?)
}

/// Soft spread `t_minus - t_plus`, nonnegative.
pub fn t_pm(q: &[f64], beta: f64) -> Result<f64> {
    Ok(t_minus(q, beta)? - t_plus(q, beta)?)
}

pub fn s_plus(q: &[f64]) -> Result<f64> {
    check(q)?;
    Ok(q.iter().sum())
}

pub fn s_minus(q: &[f64]) -> Result<f64> {
    Ok(-s_plus(q)?)
}

pub fn action_max_target(q: &[f64], action: usize) -> Result<f64> {
    match q.get(action) {
        Some(v) => Ok(-v),
        None => Err(Error::input(format!("action {action} out of range for {} actions", q.len()))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    ActionMax(usize),
    TPlus,
    TMinus,
    TPm,
    SPlus,
    SMinus,
}

impl Target {
    pub fn uses_beta(self) -> bool {
        matches!(self, Target::TPlus | Target::TMinus | Target::TPm)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::ActionMax(a) => write!(f, "action:{a}"),
            Target::TPlus => f.write_str("t+"),
            Target::TMinus => f.write_str("t-"),
            Target::TPm => f.write_str("t+-"),
            Target::SPlus => f.write_str("s+"),
            Target::SMinus => f.write_str("s-"),
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "t+" => Target::TPlus,
            "t-" => Target::TMinus,
            "t+-" | "t±" => Target::TPm,
            "s+" => Target::SPlus,
            "s-" => Target::SMinus,
            _ => match s.strip_prefix("action:").map(str::parse) {
                Some(Ok(a)) => Target::ActionMax(a),
                _ => return Err(Error::input(format!("unknown target `{s}` (expected action:<id>, t+, t-, t+-, s+ or s-)"))),
            },
        })
    }
}

/// A target function together with its sharpness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: Target,
    pub beta: f64,
}

impl TargetSpec {
    pub fn new(kind: Target, beta: f64) -> Self {
        Self { kind, beta }
    }

    pub fn validate(&self, action_count: usize) -> Result<()> {
        if self.kind.uses_beta() {
            check_beta(self.beta)?;
        }
        if let Target::ActionMax(a) = self.kind {
            if a >= action_count {
                return Err(Error::input(format!("action {a} out of range for {action_count} actions")));
            }
        }
        Ok(())
    }

    pub fn value(&self, q: &[f64]) -> Result<f64> {
        match self.kind {
            Target::ActionMax(a) => action_max_target(q, a),
            Target::TPlus => t_plus(q, self.beta),
            Target::TMinus => t_minus(q, self.beta),
            Target::TPm => t_pm(q, self.beta),
            Target::SPlus => s_plus(q),
            Target::SMinus => s_minus(q),
        }
    }

    /// Value and gradient with respect to `q`.
    pub fn value_and_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        let v = self.value(q)?;
        let g = match self.kind {
            Target::ActionMax(a) => {
                let mut g = vec![0.0; q.len()];
                g[a] = -1.0;
                g
            }
            Target::TMinus => t_minus_grad(q, self.beta)?,
            // d/dq [-T(-q)] = T'(-q)
            Target::TPlus => t_minus_grad(&negated(q), self.beta)?,
            Target::TPm => {
                let a = t_minus_grad(q, self.beta)?;
                let b = t_minus_grad(&negated(q), self.beta)?;
                a.iter().zip(&b).map(|(x, y)| x - y).collect()
            }
            Target::SPlus => vec![1.0; q.len()],
            Target::SMinus => vec![-1.0; q.len()],
        };
        Ok((v, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_values() {
        let e = std::f64::consts::E;
        assert!((t_minus(&[0.0, 1.0], 1.0).unwrap() - e / (1.0 + e)).abs() < 1e-15);
        assert!((t_minus(&[0.0, 1.0], 1e-9).unwrap() - 0.5).abs() < 1e-8);
        assert!((t_minus(&[0.0, 1.0], 1e3).unwrap() - 1.0).abs() < 1e-12);
        assert!(t_plus(&[0.0, 1.0], 1e3).unwrap().abs() < 1e-12);
        assert!((t_pm(&[0.0, 1.0], 1e3).unwrap() - 1.0).abs() < 1e-12);
        for c in [-3.7, 0.1, 12.25] {
            assert_eq!(t_minus(&[c; 4], 10.0).unwrap(), c);
            assert_eq!(t_plus(&[c; 4], 10.0).unwrap(), c);
            assert_eq!(t_pm(&[c; 4], 10.0).unwrap(), 0.0);
        }
        assert_eq!((s_plus(&[1.0, 2.0, 3.0]).unwrap(), s_minus(&[1.0, 2.0, 3.0]).unwrap()), (6.0, -6.0));
        assert_eq!(action_max_target(&[1.0, 2.0, 3.0], 2).unwrap(), -3.0);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(t_minus(&[], 1.0), Err(Error::Input(_))));
        assert!(matches!(t_minus(&[1.0], 0.0), Err(Error::Input(_))));
        assert!(matches!(action_max_target(&[1.0], 1), Err(Error::Input(_))));
        assert!(TargetSpec::new(Target::ActionMax(3), 10.0).validate(3).is_err());
    }

    #[test]
    fn overflow_safe_at_large_magnitudes() {
        let q = [1e4, -1e4, 3.0, 9999.5];
        for kind in [Target::TMinus, Target::TPlus, Target::TPm] {
            let (v, g) = TargetSpec::new(kind, 10.0).value_and_grad(&q).unwrap();
            assert!(v.is_finite() && g.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn target_names_round_trip() {
        for t in [Target::ActionMax(2), Target::TPlus, Target::TMinus, Target::TPm, Target::SPlus, Target::SMinus] {
            assert_eq!(t.to_string().parse::<Target>().unwrap(), t);
        }
        assert!("action:x".parse::<Target>().is_err());
        assert!("max".parse::<Target>().is_err());
    }

    fn q_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 1..8)
    }

    proptest! {
        #[test]
        fn t_plus_is_negated_t_minus_of_negation(q in q_vec(), beta in 0.01f64..50.0) {
            prop_assert_eq!(t_plus(&q, beta).unwrap().to_bits(), (-t_minus(&negated(&q), beta).unwrap()).to_bits());
        }

        #[test]
        fn bounds_and_nonnegative_spread(q in q_vec(), beta in 0.01f64..50.0) {
            let (lo, hi) = (q.iter().cloned().fold(f64::INFINITY, f64::min), q.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            let (tm, tp) = (t_minus(&q, beta).unwrap(), t_plus(&q, beta).unwrap());
            prop_assert!(lo <= tm && tm <= hi);
            prop_assert!(lo <= tp && tp <= hi);
            prop_assert!(t_pm(&q, beta).unwrap() >= 0.0);
        }

        #[test]
        fn shift_equivariance(q in q_vec(), beta in 0.01f64..20.0, c in -10.0f64..10.0) {
            let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
            prop_assert!((t_minus(&shifted, beta).unwrap() - t_minus(&q, beta).unwrap() - c).abs() < 1e-9);
            prop_assert!((t_pm(&shifted, beta).unwrap() - t_pm(&q, beta).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn analytic_gradient_matches_differences(q in prop::collection::vec(-2.0f64..2.0, 2..6), beta in 0.1f64..5.0) {
            for kind in [Target::TMinus, Target::TPlus, Target::TPm, Target::SPlus, Target::ActionMax(1)] {
                let spec = TargetSpec::new(kind, beta);
                let (_, g) = spec.value_and_grad(&q).unwrap();
                for i in 0..q.len() {
                    let h = 1e-6;
                    let (mut a, mut b) = (q.clone(), q.clone());
                    a[i] += h;
                    b[i] -= h;
                    let fd = (spec.value(&a).unwrap() - spec.value(&b).unwrap()) / (2.0 * h);
                    prop_assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{:?} {} {} {}", kind, i, fd, g[i]);
                }
            }
        }

        #[test]
        fn s_targets_are_linear(q in prop::collection::vec(-5.0f64..5.0, 3), r in prop::collection::vec(-5.0f64..5.0, 3)) {
            let sum: Vec<f64> = q.iter().zip(&r).map(|(a, b)| a + b).collect();
            prop_assert!((s_plus(&sum).unwrap() - s_plus(&q).unwrap() - s_plus(&r).unwrap()).abs() < 1e-12);
            prop_assert_eq!(s_plus(&q).unwrap() + s_minus(&q).unwrap(), 0.0);
        }
    }
}
