//! Built-in example systems and closed-form references.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::model::{NonsmoothModel, SignMatrix, VectorField};

pub const CATALOG_IDS: [&str; 7] =
    ["tutorial-a", "tutorial-b", "tutorial-c", "tutorial-d", "union-2region", "irma", "robot-regions"];

/// Rate constants of the five-gene network.
#[derive(Clone, Debug, PartialEq)]
pub struct IrmaParameters {
    pub degradation: [f64; 5],
    pub basal: [f64; 5],
    pub activation: [f64; 5],
    pub thresholds: [(usize, f64); 7],
    pub input: f64,
}

pub const IRMA: IrmaParameters = IrmaParameters {
    degradation: [0.05, 0.04, 0.05, 0.02, 0.6],
    basal: [1.1e-4, 3e-4, 6e-4, 5e-4, 7.5e-4],
    activation: [9e-4, 0.15, 0.018, 0.03, 0.015],
    thresholds: [(0, 0.01), (1, 0.01), (1, 0.06), (1, 0.08), (2, 0.035), (3, 0.04), (4, 0.01)],
    input: 1.0,
};

pub const IRMA_X0: [f64; 5] = [0.011, 0.09, 0.04, 0.05, 0.015];

#[derive(Clone, Debug)]
pub struct CatalogEntry {
    pub model: NonsmoothModel,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Closed-form reference for the scalar tutorials.
    pub reference: Option<ScalarInclusion>,
    pub irma: Option<IrmaParameters>,
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{}{}", prefix, i)).collect()
}

fn scalar_model(name: &str, clock: bool, pos: Expr, neg: Expr) -> NonsmoothModel {
    let n_x = if clock { 2 } else { 1 };
    let (pos, neg) = if clock { (vec![pos, Expr::one()], vec![neg, Expr::one()]) } else { (vec![pos], vec![neg]) };
    NonsmoothModel {
        name: name.to_string(),
        n_x,
        n_u: 0,
        switching: vec![Expr::var(0)],
        field: VectorField::Regions {
            sign_matrix: SignMatrix::new(vec![vec![1], vec![-1]], 1),
            regions: vec![vec![0], vec![1]],
            fields: vec![pos, neg],
        },
        state_names: if clock { vec!["x".into(), "t".into()] } else { vec!["x".into()] },
    }
}

/// `x' in a - sign(x)` style tutorial with an optional clock-dependent drift.
fn tutorial(id: &str) -> (NonsmoothModel, ScalarInclusion, Vec<f64>, f64) {
    let clock = Expr::var(1);
    match id {
        "tutorial-a" => (
            scalar_model(id, false, Expr::constant(1.0), Expr::constant(3.0)),
            ScalarInclusion::new(Drift::Constant(2.0), -1.0, 1.0),
            vec![-1.0],
            1.0,
        ),
        "tutorial-b" => {
            let d = 0.2 * (5.0 * &clock).sin();
            (
                scalar_model(id, true, -1.0 + &d, 1.0 + &d),
                ScalarInclusion::new(Drift::Sine { amplitude: 0.2, frequency: 5.0 }, -1.0, 1.0),
                vec![1.0, 0.0],
                2.0,
            )
        }
        "tutorial-c" => (
            scalar_model(id, true, -1.0 + &clock, 1.0 + &clock),
            ScalarInclusion::new(Drift::Ramp, -1.0, 1.0),
            vec![-0.5, 0.0],
            2.0,
        ),
        _ => (
            scalar_model(id, false, Expr::constant(1.0), Expr::constant(-1.0)),
            ScalarInclusion::new(Drift::Constant(0.0), 1.0, -1.0),
            vec![0.0],
            1.0,
        ),
    }
}

fn union_two_region() -> NonsmoothModel {
    NonsmoothModel {
        name: "union-2region".into(),
        n_x: 2,
        n_u: 0,
        switching: vec![Expr::var(0), Expr::var(1)],
        field: VectorField::Regions {
            sign_matrix: SignMatrix::dense(2),
            regions: vec![vec![0, 1, 2], vec![3]],
            fields: vec![
                vec![Expr::constant(1.0), 0.5 - 0.2 * Expr::var(0)],
                vec![Expr::constant(1.0), 2.0 + 0.5 * Expr::var(1)],
            ],
        },
        state_names: names("x", 2),
    }
}

fn robot_regions() -> NonsmoothModel {
    let zero = vec![Expr::zero(); 3];
    NonsmoothModel {
        name: "robot-regions".into(),
        n_x: 3,
        n_u: 0,
        switching: (0..3).map(Expr::var).collect(),
        field: VectorField::Regions {
            sign_matrix: SignMatrix::dense(3),
            regions: vec![(0..6).collect(), vec![6], vec![7]],
            fields: vec![zero.clone(), zero.clone(), zero],
        },
        state_names: names("x", 3),
    }
}

/// The gene network with step values substituted directly (no region layer).
pub fn irma_model(p: &IrmaParameters) -> NonsmoothModel {
    let n_x = 5;
    let x = |i: usize| Expr::var(i);
    let a = |j: usize| Expr::var(n_x + j - 1);
    let base = |i: usize| -p.degradation[i] * x(i) + p.basal[i];
    let u = Expr::constant(p.input);
    let rhs = vec![
        base(0) + p.activation[0] * a(6),
        base(1) + p.activation[1] * a(1) * (1.0 - u) * a(7),
        base(2) + p.activation[2] * a(3),
        base(3) + p.activation[3] * a(2) * (1.0 - a(5)),
        base(4) + p.activation[4] * a(4),
    ];
    NonsmoothModel {
        name: "irma".into(),
        n_x,
        n_u: 0,
        switching: p.thresholds.iter().map(|&(i, c)| x(i) - c).collect(),
        field: VectorField::StepComposite { rhs },
        state_names: vec!["gal4".into(), "swi5".into(), "ash1".into(), "cbf1".into(), "gal80".into()],
    }
}

pub fn load_catalog(id: &str) -> Result<CatalogEntry> {
    match id {
        "tutorial-a" | "tutorial-b" | "tutorial-c" | "tutorial-d" => {
            let (model, r, x0, horizon) = tutorial(id);
            Ok(CatalogEntry { model, x0, horizon, reference: Some(r), irma: None })
        }
        "union-2region" => Ok(CatalogEntry {
            model: union_two_region(),
            x0: vec![-1.0, -0.5],
            horizon: 1.5,
            reference: None,
            irma: None,
        }),
        "irma" => Ok(CatalogEntry {
            model: irma_model(&IRMA),
            x0: IRMA_X0.to_vec(),
            horizon: 100.0,
            reference: None,
            irma: Some(IRMA),
        }),
        "robot-regions" => {
            Ok(CatalogEntry { model: robot_regions(), x0: vec![1.0; 3], horizon: 1.0, reference: None, irma: None })
        }
        _ => Err(Error::Unsupported(format!("unknown catalog model '{}'", id))),
    }
}

/// Time-dependent part of a scalar inclusion `x' in d(t) + s(x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Drift {
    Constant(f64),
    Sine { amplitude: f64, frequency: f64 },
    Ramp,
}

impl Drift {
    fn value(self, t: f64) -> f64 {
        match self {
            Drift::Constant(c) => c,
            Drift::Sine { amplitude, frequency } => amplitude * libm::sin(frequency * t),
            Drift::Ramp => t,
        }
    }

    fn integral(self, t: f64) -> f64 {
        match self {
            Drift::Constant(c) => c * t,
            Drift::Sine { amplitude, frequency } => -amplitude / frequency * libm::cos(frequency * t),
            Drift::Ramp => 0.5 * t * t,
        }
    }
}

/// Scalar inclusion `x' in d(t) + s_pos` for `x > 0` and `d(t) + s_neg` for `x < 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarInclusion {
    pub drift: Drift,
    pub s_pos: f64,
    pub s_neg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Positive,
    Negative,
    Sliding,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub x0: f64,
    pub mode: Mode,
}

/// Piecewise closed-form solution of a [`ScalarInclusion`].
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticTrajectory {
    pub segments: Vec<Segment>,
    pub switch_times: Vec<f64>,
    /// The start was on a repelling surface; the returned branch stays there.
    pub non_unique: bool,
    inclusion: ScalarInclusion,
}

impl ScalarInclusion {
    pub fn new(drift: Drift, s_pos: f64, s_neg: f64) -> Self {
        ScalarInclusion { drift, s_pos, s_neg }
    }

    pub fn f_pos(&self, t: f64) -> f64 {
        self.drift.value(t) + self.s_pos
    }

    pub fn f_neg(&self, t: f64) -> f64 {
        self.drift.value(t) + self.s_neg
    }

    fn flow(&self, mode: Mode, x0: f64, t0: f64, t: f64) -> f64 {
        let d = self.drift.integral(t) - self.drift.integral(t0);
        match mode {
            Mode::Positive => x0 + d + self.s_pos * (t - t0),
            Mode::Negative => x0 + d + self.s_neg * (t - t0),
            Mode::Sliding => 0.0,
        }
    }

    /// First time in `(t0, t_end]` at which `g` becomes true, located by scan plus bisection.
    fn first_event(t0: f64, t_end: f64, g: impl Fn(f64) -> bool) -> Option<f64> {
        let n = 4096;
        let dt = (t_end - t0) / n as f64;
        let mut lo = t0;
        for k in 1..=n {
            let hi = if k == n { t_end } else { t0 + dt * k as f64 };
            if g(hi) {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if m <= a || m >= b {
                        break;
                    }
                    if g(m) {
                        b = m;
                    } else {
                        a = m;
                    }
                }
                return Some(b);
            }
            lo = hi;
        }
        None
    }

    /// Exact trajectory on `[0, horizon]` starting from `x0` at time zero.
    pub fn solve(&self, x0: f64, horizon: f64) -> AnalyticTrajectory {
        let mut segments = Vec::new();
        let mut switch_times = Vec::new();
        let mut non_unique = false;
        let (mut t, mut x) = (0.0, x0);
        while t < horizon {
            let (fp, fnn) = (self.f_pos(t), self.f_neg(t));
            let mode = if x > 0.0 {
                Mode::Positive
            } else if x < 0.0 {
                Mode::Negative
            } else if fp > 0.0 && fnn > 0.0 {
                Mode::Positive
            } else if fp < 0.0 && fnn < 0.0 {
                Mode::Negative
            } else {
                if fp > 0.0 && fnn < 0.0 {
                    non_unique = true;
                }
                Mode::Sliding
            };
            let end = match mode {
                Mode::Positive => Self::first_event(t, horizon, |s| self.flow(mode, x, t, s) <= 0.0),
                Mode::Negative => Self::first_event(t, horizon, |s| self.flow(mode, x, t, s) >= 0.0),
                Mode::Sliding if non_unique => None,
                Mode::Sliding => Self::first_event(t, horizon, |s| self.f_pos(s) >= 0.0 || self.f_neg(s) <= 0.0),
            };
            let t1 = end.unwrap_or(horizon);
            segments.push(Segment { t0: t, t1, x0: x, mode });
            if end.is_some() && t1 < horizon {
                switch_times.push(t1);
            }
            x = if end.is_some() { 0.0 } else { self.flow(mode, x, t, t1) };
            t = t1;
        }
        AnalyticTrajectory { segments, switch_times, non_unique, inclusion: *self }
    }
}

impl AnalyticTrajectory {
    pub fn state(&self, t: f64) -> f64 {
        let seg = self
            .segments
            .iter()
            .find(|s| t <= s.t1)
            .or(self.segments.last())
            .expect("trajectory has at least one segment");
        self.inclusion.flow(seg.mode, seg.x0, seg.t0, t)
    }
}

/// Closed-form reference for a scalar tutorial model.
pub fn analytic_reference(id: &str, x0: f64, horizon: f64) -> Result<AnalyticTrajectory> {
    let entry = load_catalog(id)?;
    let r = entry
        .reference
        .ok_or_else(|| Error::Unsupported(format!("no closed-form reference for '{}'", id)))?;
    Ok(r.solve(x0, horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_model;

    #[test]
    fn catalog_models_validate() {
        for id in CATALOG_IDS {
            let e = load_catalog(id).unwrap();
            assert!(validate_model(&e.model).is_empty(), "{}: {:?}", id, validate_model(&e.model));
            assert_eq!(e.x0.len(), e.model.n_x);
        }
        assert!(load_catalog("nope").is_err());
    }

    #[test]
    fn crossing_reference() {
        let r = analytic_reference("tutorial-a", -1.0, 1.0).unwrap();
        assert_eq!(r.switch_times.len(), 1);
        assert!((r.switch_times[0] - 1.0 / 3.0).abs() < 1e-14);
        assert!((r.state(1.0) - 2.0 / 3.0).abs() < 1e-14);
        let r = analytic_reference("tutorial-a", 1.0, 1.0).unwrap();
        assert!(r.switch_times.is_empty());
        assert_eq!(r.state(1.0), 2.0);
    }

    #[test]
    fn sliding_references() {
        let r = analytic_reference("tutorial-b", 1.0, 3.0).unwrap();
        assert_eq!(r.switch_times.len(), 1);
        assert_eq!(r.state(2.5), 0.0);
        let r = analytic_reference("tutorial-c", 0.0, 2.0).unwrap();
        assert!((r.switch_times[0] - 1.0).abs() < 1e-12);
        assert!((r.state(2.0) - 0.5).abs() < 1e-12);
        let r = analytic_reference("tutorial-d", 0.0, 1.0).unwrap();
        assert!(r.non_unique);
        assert!(analytic_reference("irma", 0.0, 1.0).is_err());
    }

    #[test]
    fn irma_parameters_as_printed() {
        assert_eq!(IRMA.activation, [9e-4, 0.15, 0.018, 0.03, 0.015]);
        let m = irma_model(&IRMA);
        assert_eq!((m.n_x, m.n_psi()), (5, 7));
        let psi = m.eval_psi(&IRMA_X0, &[]).unwrap();
        assert!((psi[0] - 0.001).abs() < 1e-15 && (psi[3] - 0.01).abs() < 1e-15);
    }
}
