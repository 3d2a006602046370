//! Optimal control over piecewise-constant controls with one FESD step per
//! control interval.
//!
//! [`transcribe`] builds the full discrete-time problem (all interval
//! internals stacked into one decision vector) and is used to check a
//! solution. [`solve_ocp`] optimises over the controls only: every trial
//! control sequence is simulated to exact complementarity, gradients come
//! from the step sensitivities, and bounds and terminal inequalities enter
//! through a logarithmic barrier that is reduced stage by stage.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dcs::{Affine, Dcs};
use crate::discretize::{assemble_fesd, FesdSystem};
use crate::error::{Error, Result};
use crate::expr::{substitute, Expr, Substitution, Tape};
use crate::model::{NonsmoothModel, SignMatrix, VectorField};
use crate::simulate::{StepOutcome, StepSolver, Variant, Method};
use crate::solve::HomotopySettings;
use crate::tableau::ButcherTableau;

/// Quadratic tracking term `sum_i w_i (x_i - r_i)^2` added to the running cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracking {
    pub reference: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OcpSpec {
    pub model: NonsmoothModel,
    pub variant: Variant,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub n_ctrl: usize,
    pub n_fe: usize,
    pub tableau: ButcherTableau,
    /// Expression over `[x | u]`.
    pub running_cost: Expr,
    /// Expression over `x`.
    pub terminal_cost: Expr,
    /// Control bounds; infinite entries are unbounded.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `c(x_T) = 0`.
    pub terminal_eq: Vec<Expr>,
    /// `c(x_T) <= 0`.
    pub terminal_ineq: Vec<Expr>,
    pub tracking: Option<Tracking>,
}

impl OcpSpec {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if self.n_ctrl == 0 || self.n_fe == 0 {
            return Err(Error::Unsupported("an OCP needs at least one control interval and one element".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Unsupported("OCP horizon must be positive".into()));
        }
        if self.x0.len() != m.n_x || self.lower.len() != m.n_u || self.upper.len() != m.n_u {
            return Err(Error::Dimension("initial state or bounds do not match the model".into()));
        }
        for (lo, up) in self.lower.iter().zip(&self.upper) {
            if lo.is_nan() || up.is_nan() || lo >= up {
                return Err(Error::Unsupported(format!("invalid control bounds [{}, {}]", lo, up)));
            }
        }
        if self.running_cost.var_bound() > m.n_x + m.n_u {
            return Err(Error::Dimension("running cost refers to variables beyond [x | u]".into()));
        }
        for e in core::iter::once(&self.terminal_cost).chain(&self.terminal_eq).chain(&self.terminal_ineq) {
            if e.var_bound() > m.n_x {
                return Err(Error::Dimension("terminal expressions may only use the state".into()));
            }
        }
        if let Some(t) = &self.tracking {
            if t.reference.len() != m.n_x || t.weights.len() != m.n_x {
                return Err(Error::Dimension("tracking reference and weights need one entry per state".into()));
            }
        }
        Ok(())
    }

    /// Running cost including the tracking term.
    pub fn full_running_cost(&self) -> Expr {
        let mut terms = vec![self.running_cost.clone()];
        if let Some(t) = &self.tracking {
            for i in 0..self.model.n_x {
                if t.weights[i] != 0.0 {
                    let d = Expr::var(i) - t.reference[i];
                    terms.push(t.weights[i] * (&d * &d));
                }
            }
        }
        Expr::sum(terms)
    }
}

/// Model with the cost quadrature state appended after the original states.
pub fn with_quadrature(model: &NonsmoothModel, running_cost: &Expr) -> NonsmoothModel {
    let n_x = model.n_x;
    let shift = move |i: usize| Expr::var(if i < n_x { i } else { i + 1 });
    let mut sub = Substitution::new(&shift);
    let cost = sub.apply(running_cost);
    let switching = model.switching.iter().map(|e| sub.apply(e)).collect();
    let field = match &model.field {
        VectorField::Regions { sign_matrix, regions, fields } => VectorField::Regions {
            sign_matrix: sign_matrix.clone(),
            regions: regions.clone(),
            fields: fields
                .iter()
                .map(|f| f.iter().map(|e| sub.apply(e)).chain(core::iter::once(cost.clone())).collect())
                .collect(),
        },
        VectorField::StepComposite { rhs } => {
            VectorField::StepComposite { rhs: rhs.iter().map(|e| sub.apply(e)).chain(core::iter::once(cost.clone())).collect() }
        }
    };
    let mut state_names = model.state_names.clone();
    state_names.push(String::from("cost"));
    NonsmoothModel { name: format!("{}+cost", model.name), n_x: n_x + 1, n_u: model.n_u, switching, field, state_names }
}

/// Offsets into the stacked decision vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcpLayout {
    /// States including the cost quadrature.
    pub n_x: usize,
    pub n_u: usize,
    pub n_ctrl: usize,
    /// Unknowns of one interval's FESD system.
    pub n_interval: usize,
    pub n_decision: usize,
}

impl OcpLayout {
    pub fn s(&self, k: usize) -> usize {
        k * self.n_x
    }

    pub fn q(&self, k: usize) -> usize {
        (self.n_ctrl + 1) * self.n_x + k * self.n_u
    }

    pub fn interval(&self, k: usize) -> usize {
        (self.n_ctrl + 1) * self.n_x + self.n_ctrl * self.n_u + k * self.n_interval
    }
}

/// Full discrete-time problem over `s_0..s_N | q_0..q_{N-1} | interval unknowns`.
#[derive(Clone, Debug)]
pub struct TranscribedOcp {
    pub spec: OcpSpec,
    pub model: NonsmoothModel,
    pub dcs: Dcs,
    /// FESD system of a single control interval.
    pub interval: FesdSystem,
    pub layout: OcpLayout,
    /// Expression over the decision vector.
    pub objective: Expr,
    /// Equalities over the decision vector; the single parameter is the relaxation level.
    pub equalities: Vec<Expr>,
    /// Inequalities `g <= 0` (control bounds and terminal inequalities).
    pub inequalities: Vec<Expr>,
    /// Complementarity pairs as (multiplier index, complement) in the decision vector.
    pub pairs: Vec<(usize, Affine)>,
}

pub fn transcribe(spec: &OcpSpec) -> Result<TranscribedOcp> {
    spec.validate()?;
    let model = with_quadrature(&spec.model, &spec.full_running_cost());
    let dcs = spec.variant.build(&model)?;
    let interval = assemble_fesd(&dcs, &spec.tableau, spec.n_fe)?;
    let il = interval.layout.clone();
    let layout = OcpLayout {
        n_x: model.n_x,
        n_u: model.n_u,
        n_ctrl: spec.n_ctrl,
        n_interval: il.n_vars,
        n_decision: (spec.n_ctrl + 1) * model.n_x + spec.n_ctrl * model.n_u + spec.n_ctrl * il.n_vars,
    };
    let sigma = Expr::var(layout.n_decision);
    let dt = spec.horizon / spec.n_ctrl as f64;
    let lambda_start = dcs.exact_multipliers(&[spec.x0.as_slice(), &[0.0]].concat(), &spec.lower.iter().zip(&spec.upper).map(|(l, u)| midpoint(*l, *u)).collect::<Vec<_>>())?;

    let mut equalities = Vec::new();
    let mut pairs = Vec::new();
    let x0_full: Vec<f64> = spec.x0.iter().cloned().chain(core::iter::once(0.0)).collect();
    for (i, v) in x0_full.iter().enumerate() {
        equalities.push(Expr::var(layout.s(0) + i) - *v);
    }
    for k in 0..spec.n_ctrl {
        let off = layout.interval(k);
        let prev_end = |j: usize| -> Expr {
            // start multiplier of interval k aliases the end multiplier of interval k-1
            let pl = &interval.layout;
            let prev = layout.interval(k - 1);
            let last = pl.n_fe - 1;
            if spec.tableau.c_last_is_one || pl.n_b == 0 {
                Expr::var(prev + pl.z(last, pl.n_s - 1) + dcs.pairs[j].multiplier)
            } else {
                Expr::var(prev + pl.b(last) + j)
            }
        };
        let map = |i: usize| -> Expr {
            if i < il.n_vars {
                return Expr::var(off + i);
            }
            let p = i;
            if p >= il.p_s0() && p < il.p_s0() + il.n_x {
                Expr::var(layout.s(k) + p - il.p_s0())
            } else if p >= il.p_q() && p < il.p_q() + il.n_u {
                Expr::var(layout.q(k) + p - il.p_q())
            } else if p == il.p_horizon() {
                Expr::constant(dt)
            } else if p == il.p_sigma() {
                sigma.clone()
            } else if p == il.p_eq_weight() {
                Expr::one()
            } else {
                let j = p - il.p_lambda0();
                if k == 0 {
                    Expr::constant(lambda_start[j])
                } else {
                    prev_end(j)
                }
            }
        };
        let mut sub = Substitution::new(&map);
        for e in interval.base.iter().chain(&interval.cross).chain(&interval.equilibration) {
            equalities.push(sub.apply(e));
        }
        for i in 0..il.n_x {
            equalities.push(Expr::var(layout.s(k + 1) + i) - Expr::var(off + il.x(il.n_fe) + i));
        }
        for p in &interval.pairs {
            pairs.push((off + p.multiplier, Affine { index: off + p.complement.index, ..p.complement }));
        }
    }
    let n_x = spec.model.n_x;
    let last = layout.s(spec.n_ctrl);
    let terminal = |e: &Expr| substitute(e, &|i| Expr::var(last + i));
    let cost_state = |k: usize| Expr::var(layout.s(k) + n_x);
    let increments = Expr::sum((0..spec.n_ctrl).map(|k| cost_state(k + 1) - cost_state(k)));
    let objective = increments + terminal(&spec.terminal_cost);
    for e in &spec.terminal_eq {
        equalities.push(terminal(e));
    }
    let mut inequalities: Vec<Expr> = spec.terminal_ineq.iter().map(terminal).collect();
    for k in 0..spec.n_ctrl {
        for j in 0..layout.n_u {
            let u = Expr::var(layout.q(k) + j);
            if spec.lower[j].is_finite() {
                inequalities.push(spec.lower[j] - &u);
            }
            if spec.upper[j].is_finite() {
                inequalities.push(&u - spec.upper[j]);
            }
        }
    }
    Ok(TranscribedOcp { spec: spec.clone(), model, dcs, interval, layout, objective, equalities, inequalities, pairs })
}

fn midpoint(lo: f64, up: f64) -> f64 {
    match (lo.is_finite(), up.is_finite()) {
        (true, true) => 0.5 * (lo + up),
        (true, false) => lo + 1.0,
        (false, true) => up - 1.0,
        (false, false) => 0.0,
    }
}

#[derive(Clone, Debug)]
pub struct OcpSettings {
    pub homotopy: HomotopySettings,
    /// Initial barrier weight.
    pub barrier0: f64,
    /// Reduction factor per stage, shared by the barrier and the relaxation level.
    pub kappa: f64,
    pub barrier_min: f64,
    pub max_newton: usize,
    pub kkt_tol: f64,
    pub armijo_c: f64,
    /// Initial penalty weight for terminal equalities.
    pub penalty0: f64,
    /// Relative step for the finite-difference Hessian.
    pub fd_step: f64,
}

impl Default for OcpSettings {
    fn default() -> Self {
        OcpSettings {
            homotopy: HomotopySettings::default(),
            barrier0: 1e-1,
            kappa: 0.1,
            barrier_min: 1e-10,
            max_newton: 40,
            kkt_tol: 1e-6,
            armijo_c: 1e-4,
            penalty0: 10.0,
            fd_step: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub barrier: f64,
    pub sigma: f64,
    pub objective: f64,
    pub newton_iters: usize,
    pub gradient_inf: f64,
}

#[derive(Clone, Debug)]
pub struct OcpSolution {
    /// Interval boundary states (original states only).
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// Full decision vector of the transcription.
    pub decision: Vec<f64>,
    /// Element boundary times and states over the whole horizon.
    pub grid: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub complementarity_residual: f64,
    /// Largest transcription equality residual at the solution.
    pub equality_residual: f64,
    pub log: Vec<StageLog>,
    pub converged: bool,
}

/// Forward simulation of all intervals for a control sequence.
struct Rollout {
    outcomes: Vec<StepOutcome>,
    states: Vec<Vec<f64>>,
    exact: bool,
}

struct Problem<'a> {
    t: &'a TranscribedOcp,
    solver: StepSolver,
    terminal_cost: Tape,
    terminal_eq: Tape,
    terminal_ineq: Tape,
    dt: f64,
}

/// Value and gradient of every terminal function at a control sequence.
struct Evaluation {
    rollout: Rollout,
    objective: f64,
    grad_objective: DVector<f64>,
    eq: Vec<f64>,
    jac_eq: DMatrix<f64>,
    ineq: Vec<f64>,
    jac_ineq: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    fn new(t: &'a TranscribedOcp, settings: &OcpSettings) -> Result<Self> {
        let n_x = t.spec.model.n_x;
        let mut solver = StepSolver::new(&t.dcs, &t.spec.tableau, t.spec.n_fe, Method::Fesd, settings.homotopy.clone())?;
        solver.predict = true;
        Ok(Problem {
            t,
            solver,
            terminal_cost: Tape::compile(core::slice::from_ref(&t.spec.terminal_cost), n_x)?,
            terminal_eq: Tape::compile(&t.spec.terminal_eq, n_x)?,
            terminal_ineq: Tape::compile(&t.spec.terminal_ineq, n_x)?,
            dt: t.spec.horizon / t.spec.n_ctrl as f64,
        })
    }

    fn n_u(&self) -> usize {
        self.t.layout.n_u
    }

    fn controls(&self, q: &[f64]) -> Vec<Vec<f64>> {
        q.chunks(self.n_u().max(1)).map(|c| c.to_vec()).take(self.t.spec.n_ctrl).collect::<Vec<_>>()
    }

    fn rollout(&self, q: &[f64]) -> Result<Rollout> {
        let n_u = self.n_u();
        let mut s: Vec<f64> = self.t.spec.x0.iter().cloned().chain(core::iter::once(0.0)).collect();
        let mut states = vec![s.clone()];
        let mut outcomes: Vec<StepOutcome> = Vec::with_capacity(self.t.spec.n_ctrl);
        let mut exact = true;
        for k in 0..self.t.spec.n_ctrl {
            let qk = &q[k * n_u..(k + 1) * n_u];
            let prev = outcomes.last().map(|o| (&o.solution, &o.active));
            let out = self.solver.solve_step(&s, qk, self.dt, prev)?;
            if !out.solution.report.exact {
                exact = false;
            }
            let l = &self.solver.sys.layout;
            s = out.solution.vars[l.x(l.n_fe)..l.x(l.n_fe) + l.n_x].to_vec();
            states.push(s.clone());
            outcomes.push(out);
        }
        Ok(Rollout { outcomes, states, exact })
    }

    fn evaluate(&self, q: &[f64], with_gradient: bool) -> Result<Evaluation> {
        let rollout = self.rollout(q)?;
        let n_x = self.t.spec.model.n_x;
        let nxa = self.t.layout.n_x;
        let n_u = self.n_u();
        let nq = q.len();
        let end = rollout.states.last().unwrap();
        // d(s_N)/dq via forward chaining of the step sensitivities
        let mut ds = DMatrix::<f64>::zeros(nxa, nq);
        if with_gradient {
            for (k, out) in rollout.outcomes.iter().enumerate() {
                let (sx, su) = self.solver.step_sensitivity(&out.solution)?;
                let mut next = &sx * &ds;
                for j in 0..n_u {
                    for i in 0..nxa {
                        next[(i, k * n_u + j)] += su[(i, j)];
                    }
                }
                ds = next;
            }
        }
        let x = &end[..n_x];
        let terminal = |tape: &Tape| -> Result<(Vec<f64>, DMatrix<f64>)> {
            let (v, rows) = tape.eval_with_gradients(x)?;
            let mut jac = DMatrix::<f64>::zeros(v.len(), nq);
            if with_gradient {
                for (r, row) in rows.iter().enumerate() {
                    for &(i, d) in row {
                        for c in 0..nq {
                            jac[(r, c)] += d * ds[(i as usize, c)];
                        }
                    }
                }
            }
            Ok((v, jac))
        };
        let (rc, jrc) = terminal(&self.terminal_cost)?;
        let objective = end[n_x] + rc[0];
        let mut grad_objective = DVector::<f64>::zeros(nq);
        for c in 0..nq {
            grad_objective[c] = ds[(n_x, c)] + jrc[(0, c)];
        }
        let (eq, jac_eq) = terminal(&self.terminal_eq)?;
        let (ineq, jac_ineq) = terminal(&self.terminal_ineq)?;
        Ok(Evaluation { rollout, objective, grad_objective, eq, jac_eq, ineq, jac_ineq })
    }
}

/// Barrier and penalty terms of the stage merit function.
struct Stage<'a> {
    lower: &'a [f64],
    upper: &'a [f64],
    n_u: usize,
    barrier: f64,
    penalty: f64,
    eq_multipliers: Vec<f64>,
}

impl Stage<'_> {
    fn merit(&self, q: &[f64], ev: &Evaluation) -> f64 {
        let mut m = ev.objective;
        for (i, &v) in q.iter().enumerate() {
            let j = i % self.n_u;
            if self.lower[j].is_finite() {
                m -= self.barrier * libm::log(v - self.lower[j]);
            }
            if self.upper[j].is_finite() {
                m -= self.barrier * libm::log(self.upper[j] - v);
            }
        }
        for &g in &ev.ineq {
            m -= self.barrier * libm::log(-g);
        }
        for (c, l) in ev.eq.iter().zip(&self.eq_multipliers) {
            m += l * c + 0.5 * self.penalty * c * c;
        }
        m
    }

    fn gradient(&self, q: &[f64], ev: &Evaluation) -> DVector<f64> {
        let mut g = ev.grad_objective.clone();
        for (i, &v) in q.iter().enumerate() {
            let j = i % self.n_u;
            if self.lower[j].is_finite() {
                g[i] -= self.barrier / (v - self.lower[j]);
            }
            if self.upper[j].is_finite() {
                g[i] += self.barrier / (self.upper[j] - v);
            }
        }
        for (r, &c) in ev.ineq.iter().enumerate() {
            for i in 0..q.len() {
                g[i] -= self.barrier * ev.jac_ineq[(r, i)] / c;
            }
        }
        for (r, (c, l)) in ev.eq.iter().zip(&self.eq_multipliers).enumerate() {
            for i in 0..q.len() {
                g[i] += (l + self.penalty * c) * ev.jac_eq[(r, i)];
            }
        }
        g
    }

    fn feasible(&self, q: &[f64], ev: Option<&Evaluation>) -> bool {
        let bounds_ok = q.iter().enumerate().all(|(i, &v)| {
            let j = i % self.n_u;
            v > self.lower[j] && v < self.upper[j]
        });
        bounds_ok && ev.map_or(true, |e| e.ineq.iter().all(|g| *g < 0.0))
    }
}

/// Largest step in `(0, 1]` keeping the controls strictly inside their bounds.
fn max_step(q: &[f64], d: &DVector<f64>, lower: &[f64], upper: &[f64], n_u: usize) -> f64 {
    let mut t: f64 = 1.0;
    for (i, &v) in q.iter().enumerate() {
        let j = i % n_u;
        if d[i] < 0.0 && lower[j].is_finite() {
            t = t.min(0.995 * (lower[j] - v) / d[i]);
        }
        if d[i] > 0.0 && upper[j].is_finite() {
            t = t.min(0.995 * (upper[j] - v) / d[i]);
        }
    }
    t
}

pub fn solve_ocp(t: &TranscribedOcp, settings: &OcpSettings) -> Result<OcpSolution> {
    settings.homotopy.validate()?;
    let problem = Problem::new(t, settings)?;
    let n_u = t.layout.n_u;
    let nq = t.spec.n_ctrl * n_u;
    let mut q: Vec<f64> = (0..nq).map(|i| midpoint(t.spec.lower[i % n_u.max(1)], t.spec.upper[i % n_u.max(1)])).collect();
    let mut stage = Stage {
        lower: &t.spec.lower,
        upper: &t.spec.upper,
        n_u: n_u.max(1),
        barrier: settings.barrier0,
        penalty: settings.penalty0,
        eq_multipliers: vec![0.0; t.spec.terminal_eq.len()],
    };
    let mut ev = problem.evaluate(&q, true)?;
    if !stage.feasible(&q, Some(&ev)) {
        return Err(Error::Solver("initial controls violate a terminal inequality (infeasible stage)".into()));
    }
    let mut sigma = settings.homotopy.sigma0;
    let mut log = Vec::new();
    let mut last_eq_norm = f64::INFINITY;
    loop {
        let mut iters = 0;
        let stage_tol = (0.1 * stage.barrier).max(0.1 * settings.kkt_tol);
        loop {
            let g = stage.gradient(&q, &ev);
            if g.amax() <= stage_tol || iters >= settings.max_newton || nq == 0 {
                break;
            }
            iters += 1;
            let h = stage_hessian(&problem, &stage, &q, &g, settings.fd_step)?;
            let d = regularized_solve(h, &g).ok_or_else(|| Error::Solver("OCP Newton system could not be factored".into()))?;
            let mut step = max_step(&q, &d, &t.spec.lower, &t.spec.upper, stage.n_u);
            let m0 = stage.merit(&q, &ev);
            let slope = g.dot(&d);
            let mut accepted = None;
            while step > 1e-10 {
                let trial: Vec<f64> = q.iter().zip(d.iter()).map(|(a, b)| a + step * b).collect();
                if let Ok(te) = problem.evaluate(&trial, false) {
                    if stage.feasible(&trial, Some(&te)) && stage.merit(&trial, &te) <= m0 + settings.armijo_c * step * slope.min(0.0) {
                        accepted = Some(trial);
                        break;
                    }
                }
                step *= 0.5;
            }
            match accepted {
                Some(trial) => {
                    q = trial;
                    ev = problem.evaluate(&q, true)?;
                }
                None => break,
            }
        }
        let g = stage.gradient(&q, &ev);
        log.push(StageLog { barrier: stage.barrier, sigma, objective: ev.objective, newton_iters: iters, gradient_inf: g.amax() });
        let eq_norm = ev.eq.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        for (l, c) in stage.eq_multipliers.iter_mut().zip(&ev.eq) {
            *l += stage.penalty * c;
        }
        if eq_norm > 0.25 * last_eq_norm {
            stage.penalty *= 10.0;
        }
        last_eq_norm = eq_norm;
        if stage.barrier <= settings.barrier_min * (1.0 + 1e-9) {
            break;
        }
        stage.barrier = (stage.barrier * settings.kappa).max(settings.barrier_min);
        sigma = (sigma * settings.kappa).max(settings.homotopy.sigma_min);
    }
    finish(t, &problem, &stage, q, ev, log, settings)
}

fn stage_hessian(problem: &Problem, stage: &Stage, q: &[f64], g: &DVector<f64>, fd: f64) -> Result<DMatrix<f64>> {
    let n = q.len();
    let mut h = DMatrix::<f64>::zeros(n, n);
    for c in 0..n {
        let mut qp = q.to_vec();
        let mut step = fd * (1.0 + q[c].abs());
        let j = c % stage.n_u;
        // stay inside the bounds for the probe
        if qp[c] + step >= stage.upper[j] {
            step = -step;
        }
        qp[c] += step;
        let ev = problem.evaluate(&qp, true)?;
        let gp = stage.gradient(&qp, &ev);
        for r in 0..n {
            h[(r, c)] = (gp[r] - g[r]) / step;
        }
    }
    Ok(0.5 * (&h + h.transpose()))
}

fn regularized_solve(h: DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let scale = h.diagonal().amax().max(1e-8);
    let mut tau = 0.0;
    for _ in 0..40 {
        let m = &h + DMatrix::<f64>::identity(n, n) * tau;
        if let Some(ch) = m.cholesky() {
            return Some(-ch.solve(g));
        }
        tau = if tau == 0.0 { 1e-8 * scale } else { tau * 10.0 };
    }
    None
}

fn finish(
    t: &TranscribedOcp,
    problem: &Problem,
    stage: &Stage,
    q: Vec<f64>,
    ev: Evaluation,
    log: Vec<StageLog>,
    settings: &OcpSettings,
) -> Result<OcpSolution> {
    let l = &t.layout;
    let n_x = t.spec.model.n_x;
    let n_u = l.n_u;
    // first-order conditions with the barrier multipliers of the last stage
    let mut stationarity = ev.grad_objective.clone();
    let mut bound_comp: f64 = 0.0;
    for (i, &v) in q.iter().enumerate() {
        let j = i % n_u.max(1);
        if t.spec.lower[j].is_finite() {
            let z = stage.barrier / (v - t.spec.lower[j]);
            stationarity[i] -= z;
            bound_comp = bound_comp.max(z * (v - t.spec.lower[j]));
        }
        if t.spec.upper[j].is_finite() {
            let z = stage.barrier / (t.spec.upper[j] - v);
            stationarity[i] += z;
            bound_comp = bound_comp.max(z * (t.spec.upper[j] - v));
        }
    }
    for (r, &c) in ev.ineq.iter().enumerate() {
        let nu = -stage.barrier / c;
        bound_comp = bound_comp.max(nu * -c);
        for i in 0..q.len() {
            stationarity[i] += nu * ev.jac_ineq[(r, i)];
        }
    }
    for (r, lam) in stage.eq_multipliers.iter().enumerate() {
        for i in 0..q.len() {
            stationarity[i] += lam * ev.jac_eq[(r, i)];
        }
    }
    let eq_inf = ev.eq.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let kkt = stationarity.amax().max(bound_comp).max(eq_inf);

    // stack the interval solutions into the transcription's decision vector
    let mut w = vec![0.0; l.n_decision];
    for (k, s) in ev.rollout.states.iter().enumerate() {
        w[l.s(k)..l.s(k) + l.n_x].copy_from_slice(s);
    }
    for k in 0..t.spec.n_ctrl {
        w[l.q(k)..l.q(k) + n_u].copy_from_slice(&q[k * n_u..(k + 1) * n_u]);
        let vars = &ev.rollout.outcomes[k].solution.vars;
        w[l.interval(k)..l.interval(k) + l.n_interval].copy_from_slice(vars);
    }
    let mut inputs = w.clone();
    inputs.push(0.0);
    let eq_tape = Tape::compile(&t.equalities, l.n_decision + 1)?;
    let equality_residual = eq_tape.eval(&inputs)?.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let complementarity_residual =
        t.pairs.iter().fold(0.0f64, |a, (m, c)| a.max(libm::fabs(w[*m].min(c.eval(&w)))));
    let obj_tape = Tape::compile(core::slice::from_ref(&t.objective), l.n_decision)?;
    let objective = obj_tape.eval(&w)?[0];

    let isys = &problem.solver.sys;
    let il = &isys.layout;
    let mut grid = vec![0.0];
    let mut trajectory = vec![ev.rollout.states[0][..n_x].to_vec()];
    for (k, out) in ev.rollout.outcomes.iter().enumerate() {
        let hs = isys.step_sizes(&out.solution.vars, &out.solution.params);
        let mut tk = k as f64 * problem.dt;
        for n in 0..il.n_fe {
            tk += hs[n];
            grid.push(if n + 1 == il.n_fe { (k + 1) as f64 * problem.dt } else { tk });
            let x = il.x(n + 1);
            trajectory.push(out.solution.vars[x..x + n_x].to_vec());
        }
    }
    let converged = ev.rollout.exact && kkt <= settings.kkt_tol;
    Ok(OcpSolution {
        states: ev.rollout.states.iter().map(|s| s[..n_x].to_vec()).collect(),
        controls: problem.controls(&q),
        decision: w,
        grid,
        trajectory,
        objective,
        kkt_residual: kkt,
        complementarity_residual,
        equality_residual,
        log,
        converged,
    })
}

/// Objective of the transcription at a given piecewise-constant control
/// sequence, simulated with the same discretisation.
pub fn simulate_objective(t: &TranscribedOcp, settings: &OcpSettings, controls: &[Vec<f64>]) -> Result<f64> {
    let problem = Problem::new(t, settings)?;
    let q: Vec<f64> = controls.iter().flatten().cloned().collect();
    if q.len() != t.spec.n_ctrl * t.layout.n_u {
        return Err(Error::Dimension(format!("expected {} control values, got {}", t.spec.n_ctrl * t.layout.n_u, q.len())));
    }
    Ok(problem.evaluate(&q, false)?.objective)
}

/// Exhaustive search over `levels` evenly spaced values per control and interval.
///
/// Returns the best objective and its control sequence; sequences whose
/// simulation fails are skipped.
pub fn grid_search(t: &TranscribedOcp, settings: &OcpSettings, levels: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let n_u = t.layout.n_u;
    let nq = t.spec.n_ctrl * n_u;
    if levels < 2 || t.spec.lower.iter().chain(&t.spec.upper).any(|b| !b.is_finite()) {
        return Err(Error::Unsupported("grid search needs finite bounds and at least two levels".into()));
    }
    let problem = Problem::new(t, settings)?;
    let value = |j: usize, level: usize| t.spec.lower[j] + (t.spec.upper[j] - t.spec.lower[j]) * level as f64 / (levels - 1) as f64;
    let total = levels.checked_pow(nq as u32).ok_or_else(|| Error::Unsupported("grid too large".into()))?;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..total {
        let mut c = code;
        let q: Vec<f64> = (0..nq)
            .map(|i| {
                let lv = c % levels;
                c /= levels;
                value(i % n_u, lv)
            })
            .collect();
        let Ok(ev) = problem.evaluate(&q, false) else { continue };
        if !ev.rollout.exact || !ev.ineq.iter().all(|g| *g <= 0.0) || ev.eq.iter().any(|c| c.abs() > 1e-6) {
            continue;
        }
        if best.as_ref().map_or(true, |b| ev.objective < b.0) {
            best = Some((ev.objective, q));
        }
    }
    let (obj, q) = best.ok_or_else(|| Error::Solver("no grid point could be simulated".into()))?;
    Ok((obj, problem.controls(&q)))
}

/// Scalar model `x' in -sign(x) + u`.
pub fn sliding_model() -> NonsmoothModel {
    let u = Expr::var(1);
    NonsmoothModel {
        name: "sliding".into(),
        n_x: 1,
        n_u: 1,
        switching: vec![Expr::var(0)],
        field: VectorField::Regions {
            sign_matrix: SignMatrix::new(vec![vec![1], vec![-1]], 1),
            regions: vec![vec![0], vec![1]],
            fields: vec![vec![-1.0 + &u], vec![1.0 + &u]],
        },
        state_names: vec!["x".into()],
    }
}

/// Steer `x(0) = 1` to the switching surface over `T = 2` with `|u| <= 2`,
/// minimising the control energy plus `100 x(T)^2`.
pub fn sliding_ocp(n_ctrl: usize, n_fe: usize, tableau: ButcherTableau) -> OcpSpec {
    let u = Expr::var(1);
    let x = Expr::var(0);
    OcpSpec {
        model: sliding_model(),
        variant: Variant::Step(None),
        x0: vec![1.0],
        horizon: 2.0,
        n_ctrl,
        n_fe,
        tableau,
        running_cost: &u * &u,
        terminal_cost: 100.0 * (&x * &x),
        lower: vec![-2.0],
        upper: vec![2.0],
        terminal_eq: vec![],
        terminal_ineq: vec![],
        tracking: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tableau::{tableau, Family};

    fn spec(n_ctrl: usize, stages: usize, n_fe: usize) -> OcpSpec {
        sliding_ocp(n_ctrl, n_fe, tableau(Family::RadauIIA, stages).unwrap())
    }

    #[test]
    fn decision_count_matches_closed_form() {
        let t = transcribe(&spec(2, 1, 2)).unwrap();
        // per interval: states (N_FE+1) n_x, stage derivatives N_FE n_s n_x,
        // stage algebraics N_FE n_s (n_theta + 3 n_alpha), element lengths N_FE
        let (n_x, n_u, n_fe, n_s, n_theta, n_alpha) = (2, 1, 2, 1, 2, 1);
        let interval = (n_fe + 1) * n_x + n_fe * n_s * n_x + n_fe * n_s * (n_theta + 3 * n_alpha) + n_fe;
        assert_eq!(t.layout.n_decision, 2 * interval + 3 * n_x + 2 * n_u);
    }

    #[test]
    fn terminal_tracking_only() {
        let mut s = spec(1, 1, 2);
        s.running_cost = Expr::zero();
        s.terminal_cost = {
            let d = Expr::var(0) - 0.25;
            &d * &d
        };
        let t = transcribe(&s).unwrap();
        let tape = Tape::compile(core::slice::from_ref(&t.objective), t.layout.n_decision).unwrap();
        let mut w = vec![0.0; t.layout.n_decision];
        w[t.layout.s(1)] = 0.75;
        w[t.layout.s(1) + 1] = 0.0;
        assert!((tape.eval(&w).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn tracking_expands_to_weighted_squares() {
        let mut s = spec(1, 1, 2);
        s.running_cost = Expr::zero();
        s.tracking = Some(Tracking { reference: vec![0.5], weights: vec![3.0] });
        let l = s.full_running_cost();
        assert!((l.eval(&[1.5, 0.0]).unwrap() - 3.0).abs() < 1e-15);
    }
}
