//! Collocation Butcher tableaus.
//!
//! Nodes are Legendre (Gauss) or right-Radau roots, located by bracketing on a
//! fine grid and polished with Newton's method. The stage matrix follows from
//! the collocation conditions `sum_j a_ij c_j^(k-1) = c_i^k / k`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    RadauIIA,
    GaussLegendre,
    Explicit,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::RadauIIA => "radau-iia",
            Family::GaussLegendre => "gauss-legendre",
            Family::Explicit => "explicit",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "radau-iia" | "radau" => Some(Family::RadauIIA),
            "gauss-legendre" | "gauss" => Some(Family::GaussLegendre),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub order: usize,
    pub family: Family,
    pub c_last_is_one: bool,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.c.len()
    }

    /// Short label such as `radau-iia-3` (family and nominal order).
    pub fn label(&self) -> alloc::string::String {
        format!("{}-{}", self.family.name(), self.order)
    }
}

/// Legendre polynomial `P_n` and its derivative at `x`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p0, mut p1) = (1.0, x);
    let (mut d0, mut d1) = (0.0, 1.0);
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        let d2 = ((2.0 * kf + 1.0) * (p1 + x * d1) - kf * d0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
        d0 = d1;
        d1 = d2;
    }
    (p1, d1)
}

/// Roots in `(0, 1]` of `q(2c - 1)`, located by sign changes and Newton refinement.
fn roots_unit_interval(q: impl Fn(f64) -> (f64, f64), count: usize, include_right: bool) -> Result<Vec<f64>> {
    let n = 4000;
    let mut roots = Vec::new();
    let mut prev = q(-1.0).0;
    for k in 1..n {
        let x = -1.0 + 2.0 * k as f64 / n as f64;
        let v = q(x).0;
        if v == 0.0 || v.signum() != prev.signum() {
            let (mut lo, mut hi) = (x - 2.0 / n as f64, x);
            for _ in 0..60 {
                let m = 0.5 * (lo + hi);
                if q(m).0.signum() == q(lo).0.signum() {
                    lo = m;
                } else {
                    hi = m;
                }
            }
            let mut r = 0.5 * (lo + hi);
            for _ in 0..50 {
                let (f, d) = q(r);
                let step = f / d;
                r -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            roots.push(0.5 * (r + 1.0));
        }
        prev = v;
    }
    if include_right {
        roots.push(1.0);
    }
    if roots.len() != count {
        return Err(Error::Solver(format!("found {} collocation nodes, expected {}", roots.len(), count)));
    }
    Ok(roots)
}

/// Collocation tableau for `family` with `stages` nodes.
pub fn tableau(family: Family, stages: usize) -> Result<ButcherTableau> {
    if !(1..=4).contains(&stages) || family == Family::Explicit {
        return Err(Error::Unsupported(format!("{} with {} stages", family.name(), stages)));
    }
    let s = stages;
    let c = match family {
        Family::GaussLegendre => roots_unit_interval(|x| legendre(s, x), s, false)?,
        _ => roots_unit_interval(
            |x| {
                let (p, dp) = legendre(s, x);
                let (q, dq) = legendre(s - 1, x);
                (p - q, dp - dq)
            },
            s,
            true,
        )?,
    };
    // interior sign-change scan excludes x = 1 for Radau; the node 1 is appended exactly
    let v = DMatrix::from_fn(s, s, |k, j| libm::pow(c[j], k as f64));
    let lu = v.clone().lu();
    let mut a = Vec::with_capacity(s);
    for &ci in &c {
        let rhs = DVector::from_fn(s, |k, _| libm::pow(ci, (k + 1) as f64) / (k + 1) as f64);
        let row = lu.solve(&rhs).ok_or_else(|| Error::Solver("singular Vandermonde system".into()))?;
        a.push(row.iter().cloned().collect());
    }
    let rhs = DVector::from_fn(s, |k, _| 1.0 / (k + 1) as f64);
    let b: Vec<f64> = lu.solve(&rhs).ok_or_else(|| Error::Solver("singular Vandermonde system".into()))?.iter().cloned().collect();
    let order = match family {
        Family::GaussLegendre => 2 * s,
        _ => 2 * s - 1,
    };
    let c_last_is_one = (c[s - 1] - 1.0).abs() < 1e-15;
    Ok(ButcherTableau { a, b, c, order, family, c_last_is_one })
}

/// Tableau with the requested nominal order from either family.
pub fn tableau_for_order(order: usize) -> Result<ButcherTableau> {
    if order % 2 == 1 {
        tableau(Family::RadauIIA, order.div_ceil(2))
    } else {
        tableau(Family::GaussLegendre, order / 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_order_conditions(t: &ButcherTableau) {
        // B(p): sum b_i c_i^(k-1) = 1/k; C(s): sum_j a_ij c_j^(k-1) = c_i^k / k
        for k in 1..=t.order {
            let q: f64 = t.b.iter().zip(&t.c).map(|(b, c)| b * libm::pow(*c, (k - 1) as f64)).sum();
            assert!((q - 1.0 / k as f64).abs() < 1e-14, "{:?} B({})", t.family, k);
        }
        for i in 0..t.stages() {
            for k in 1..=t.stages() {
                let q: f64 = (0..t.stages()).map(|j| t.a[i][j] * libm::pow(t.c[j], (k - 1) as f64)).sum();
                assert!((q - libm::pow(t.c[i], k as f64) / k as f64).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn defining_cases() {
        let ie = tableau(Family::RadauIIA, 1).unwrap();
        assert_eq!((ie.a.clone(), ie.b.clone(), ie.c.clone(), ie.order), (vec![vec![1.0]], vec![1.0], vec![1.0], 1));
        let mid = tableau(Family::GaussLegendre, 1).unwrap();
        assert!((mid.a[0][0] - 0.5).abs() < 1e-15 && (mid.c[0] - 0.5).abs() < 1e-15);
        assert_eq!(mid.order, 2);
        assert!(!mid.c_last_is_one);
    }

    #[test]
    fn radau_two_stage_nodes() {
        let t = tableau(Family::RadauIIA, 2).unwrap();
        assert!((t.c[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.c[1], 1.0);
        assert!((t.a[0][0] - 5.0 / 12.0).abs() < 1e-14 && (t.a[0][1] + 1.0 / 12.0).abs() < 1e-14);
    }

    #[test]
    fn all_supported_tableaus_satisfy_order_conditions() {
        for s in 1..=4 {
            for f in [Family::RadauIIA, Family::GaussLegendre] {
                let t = tableau(f, s).unwrap();
                assert!((t.b.iter().sum::<f64>() - 1.0).abs() < 1e-14);
                assert_eq!(t.c_last_is_one, f == Family::RadauIIA);
                check_order_conditions(&t);
            }
        }
        assert!(tableau(Family::RadauIIA, 5).is_err());
        assert!(tableau(Family::Explicit, 1).is_err());
        assert_eq!(tableau_for_order(7).unwrap().stages(), 4);
        assert_eq!(tableau_for_order(8).unwrap().family, Family::GaussLegendre);
    }
}
