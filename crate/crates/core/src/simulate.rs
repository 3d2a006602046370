//! Multi-step integration, switch extraction, dense output, sensitivities and
//! convergence-order studies.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::dcs::{Dcs, DcsKind};
use crate::discretize::{assemble_fesd, assemble_std, FesdSystem};
use crate::error::{Error, Result};
use crate::expr::Tape;
use crate::model::NonsmoothModel;
use crate::reformulate::{build_step_dcs, build_stewart_dcs};
use crate::solve::{
    classify, homotopy_solve, parameter_sensitivity, solve_with_active_set, ActiveSet, HomotopySettings, Solution,
    SolveReport,
};
use crate::tableau::ButcherTableau;

/// Which complementarity representation to integrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Step representation, optionally lifted to the given depth.
    Step(Option<usize>),
    Stewart,
}

impl Variant {
    pub fn build(self, model: &NonsmoothModel) -> Result<Dcs> {
        match self {
            Variant::Step(n_d) => build_step_dcs(model, n_d),
            Variant::Stewart => build_stewart_dcs(model),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Element lengths are unknowns (switch detection).
    Fesd,
    /// Uniform fixed elements.
    FixedGrid,
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub tableau: ButcherTableau,
    pub n_fe: usize,
    pub n_sim: usize,
    pub t_sim: f64,
    pub method: Method,
    pub homotopy: HomotopySettings,
    /// Try the previous step's active set before running the homotopy.
    pub predict: bool,
    /// Continue past steps whose terminal point only satisfies the relaxed conditions.
    pub accept_inexact: bool,
    pub sensitivities: bool,
}

impl SimOptions {
    pub fn new(tableau: ButcherTableau, n_fe: usize, n_sim: usize, t_sim: f64) -> Self {
        SimOptions {
            tableau,
            n_fe,
            n_sim,
            t_sim,
            method: Method::Fesd,
            homotopy: HomotopySettings::default(),
            predict: true,
            accept_inexact: true,
            sensitivities: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsiClass {
    Positive,
    Negative,
    Sliding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwitchKind {
    Crossing,
    EnterSliding,
    LeaveSliding,
}

impl SwitchKind {
    pub fn name(self) -> &'static str {
        match self {
            SwitchKind::Crossing => "crossing",
            SwitchKind::EnterSliding => "enter-sliding",
            SwitchKind::LeaveSliding => "leave-sliding",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Switch {
    pub t: f64,
    pub psi_index: usize,
    pub kind: SwitchKind,
}

/// Sign pattern of every switching function implied by which pair sides vanish.
pub fn psi_classes(dcs: &Dcs, multiplier_zero: &[bool]) -> Vec<PsiClass> {
    match dcs.kind {
        DcsKind::Step | DcsKind::StepComposite => (0..dcs.n_psi())
            .map(|j| match (multiplier_zero[2 * j], multiplier_zero[2 * j + 1]) {
                (true, false) => PsiClass::Positive,
                (false, true) => PsiClass::Negative,
                _ => PsiClass::Sliding,
            })
            .collect(),
        DcsKind::Stewart => (0..dcs.n_psi())
            .map(|j| {
                let signs: Vec<i8> = dcs
                    .base_signs
                    .iter()
                    .zip(multiplier_zero)
                    .filter(|(_, z)| **z)
                    .map(|(row, _)| row[j])
                    .collect();
                if !signs.is_empty() && signs.iter().all(|s| *s > 0) {
                    PsiClass::Positive
                } else if !signs.is_empty() && signs.iter().all(|s| *s < 0) {
                    PsiClass::Negative
                } else {
                    PsiClass::Sliding
                }
            })
            .collect(),
    }
}

/// One simulation step solved.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub solution: Solution,
    /// Element-level pattern (per stage on fixed grids).
    pub active: ActiveSet,
    pub predicted: bool,
}

/// Reusable solver for consecutive simulation steps of one assembled system.
#[derive(Clone, Debug)]
pub struct StepSolver {
    pub sys: FesdSystem,
    pub settings: HomotopySettings,
    pub predict: bool,
}

impl StepSolver {
    pub fn new(dcs: &Dcs, tableau: &ButcherTableau, n_fe: usize, method: Method, settings: HomotopySettings) -> Result<Self> {
        let sys = match method {
            Method::Fesd => assemble_fesd(dcs, tableau, n_fe)?,
            Method::FixedGrid => assemble_std(dcs, tableau, n_fe)?,
        };
        Ok(StepSolver { sys, settings, predict: true })
    }

    pub fn params(&self, s: &[f64], q: &[f64], horizon: f64) -> Result<Vec<f64>> {
        let l = &self.sys.layout;
        let lam = self.sys.dcs.exact_multipliers(s, q)?;
        let grid = vec![horizon / l.n_fe as f64; l.n_fe];
        Ok(l.params(s, q, horizon, self.settings.sigma0, &lam, &grid))
    }

    /// Guess built by repeating the last element of a previous solution from state `s`.
    fn repeated_guess(&self, prev: &Solution, s: &[f64], horizon: f64) -> Vec<f64> {
        let l = &self.sys.layout;
        let mut w = prev.vars.clone();
        let last = l.n_fe - 1;
        for n in 0..l.n_fe {
            for m in 0..l.n_s {
                let (src, dst) = (l.v(last, m), l.v(n, m));
                let v: Vec<f64> = prev.vars[src..src + l.n_x].to_vec();
                w[dst..dst + l.n_x].copy_from_slice(&v);
                let (src, dst) = (l.z(last, m), l.z(n, m));
                let z: Vec<f64> = prev.vars[src..src + l.n_z].to_vec();
                w[dst..dst + l.n_z].copy_from_slice(&z);
            }
            if l.n_b > 0 {
                let (src, dst) = (l.b(last), l.b(n));
                let b: Vec<f64> = prev.vars[src..src + l.n_b].to_vec();
                w[dst..dst + l.n_b].copy_from_slice(&b);
            }
            if let Some(i) = l.h(n) {
                w[i] = horizon / l.n_fe as f64;
            }
        }
        // states advance with the repeated element velocity
        let hn = horizon / l.n_fe as f64;
        let mut x = s.to_vec();
        for n in 0..=l.n_fe {
            w[l.x(n)..l.x(n) + l.n_x].copy_from_slice(&x);
            if n < l.n_fe {
                for i in 0..l.n_x {
                    x[i] += hn * (0..l.n_s).map(|j| self.sys.tableau.b[j] * w[l.v(n, j) + i]).sum::<f64>();
                }
            }
        }
        w
    }

    /// Solve one step from state `s` with control `q` over `horizon`.
    pub fn solve_step(
        &self,
        s: &[f64],
        q: &[f64],
        horizon: f64,
        prev: Option<(&Solution, &ActiveSet)>,
    ) -> Result<StepOutcome> {
        let params = self.params(s, q, horizon)?;
        if self.predict {
            if let Some((psol, pact)) = prev.filter(|(p, _)| p.report.exact) {
                let guess = self.repeated_guess(psol, s, horizon);
                let active =
                    if self.sys.is_fesd() { pact.repeat_last(self.sys.layout.n_fe) } else { repeat_rows(pact, &self.sys) };
                let mut p = params.clone();
                p[self.sys.layout.p_sigma() - self.sys.layout.n_vars] = 0.0;
                if let Ok((w, v, red, iters)) = solve_with_active_set(&self.sys, &guess, &p, &active) {
                    if v.passes(self.settings.comp_tol) {
                        let report = SolveReport {
                            converged: true,
                            exact: true,
                            residual_inf: v.base_inf,
                            comp_residual: v.comp_residual(),
                            newton_iters: iters,
                            degenerate_pattern: v.degenerate_pattern,
                            ..SolveReport::default()
                        };
                        let solution = Solution { vars: w, params: p, report, reduced: Some(red) };
                        return Ok(StepOutcome { solution, active, predicted: true });
                    }
                }
            }
        }
        if self.predict && self.sys.is_fesd() {
            if let Some((psol, pact)) = prev.filter(|(p, _)| p.report.exact) {
                if let Some(out) = self.solve_single_events(s, q, horizon, &params, psol, pact)? {
                    return Ok(out);
                }
            }
        }
        let w0 = self.sys.initial_guess(s, q, horizon, self.settings.sigma0)?;
        let solution = homotopy_solve(&self.sys, &w0, &params, &self.settings)?;
        let active = match &solution.reduced {
            Some(r) => r.active.clone(),
            None => classify(&self.sys, &solution.vars),
        };
        Ok(StepOutcome { solution, active, predicted: false })
    }

    /// Try active sets in which one or two switching functions change their
    /// sign pattern at an element boundary, starting from the previous pattern.
    ///
    /// Switching functions are flagged when the extrapolated end state has the
    /// opposite sign to the pattern, or when the pattern is sliding.
    fn solve_single_events(
        &self,
        s: &[f64],
        q: &[f64],
        horizon: f64,
        params: &[f64],
        psol: &Solution,
        pact: &ActiveSet,
    ) -> Result<Option<StepOutcome>> {
        let dcs = &self.sys.dcs;
        if !matches!(dcs.kind, DcsKind::Step | DcsKind::StepComposite) {
            return Ok(None);
        }
        let l = &self.sys.layout;
        let n_fe = l.n_fe;
        let base = pact.repeat_last(n_fe);
        let last = base.multiplier_zero[0].clone();
        let guess = self.repeated_guess(psol, s, horizon);
        let psi_end = psi_at(dcs, &guess[l.x(n_fe)..l.x(n_fe) + l.n_x], q)?;
        let psi_start = psi_at(dcs, s, q)?;
        let classes = psi_classes(dcs, &last);
        let mut flagged: Vec<(usize, [PsiClass; 2])> = Vec::new();
        for (j, c) in classes.iter().enumerate() {
            let targets = match c {
                PsiClass::Positive if psi_end[j] <= 0.0 || psi_start[j] <= 0.0 => [PsiClass::Negative, PsiClass::Sliding],
                PsiClass::Negative if psi_end[j] >= 0.0 || psi_start[j] >= 0.0 => [PsiClass::Positive, PsiClass::Sliding],
                PsiClass::Sliding if psi_end[j] >= 0.0 => [PsiClass::Positive, PsiClass::Negative],
                PsiClass::Sliding => [PsiClass::Negative, PsiClass::Positive],
                _ => continue,
            };
            flagged.push((j, targets));
        }
        if flagged.is_empty() || flagged.len() > 2 {
            return Ok(None);
        }
        let mut p0 = params.to_vec();
        p0[l.p_sigma() - l.n_vars] = 0.0;
        // (switching function, target, first element with the target)
        let mut changes: Vec<Vec<(usize, PsiClass, usize)>> = Vec::new();
        for &(j, targets) in &flagged {
            let mut opts = Vec::new();
            for t in targets {
                for b in 0..n_fe {
                    opts.push((j, t, b));
                }
            }
            changes = if changes.is_empty() {
                opts.into_iter().map(|o| vec![o]).collect()
            } else {
                changes.iter().flat_map(|c| opts.iter().map(move |o| [c.clone(), vec![*o]].concat())).collect()
            };
        }
        for change in changes.iter().take(48) {
            let mut active = base.clone();
            let mut w = guess.clone();
            for &(j, target, b) in change {
                for n in b..n_fe {
                    let (zn, zp) = match target {
                        PsiClass::Positive => (true, false),
                        PsiClass::Negative => (false, true),
                        PsiClass::Sliding => (true, true),
                    };
                    active.multiplier_zero[n][2 * j] = zn;
                    active.multiplier_zero[n][2 * j + 1] = zp;
                    if let Some(bz) = active.boundary_first_zero[n].get_mut(j) {
                        *bz = target != PsiClass::Positive;
                    }
                    set_group_guess(&self.sys, &mut w, n, j, target, psi_end[j].abs());
                }
            }
            if let Ok((w, v, red, iters)) = solve_with_active_set(&self.sys, &w, &p0, &active) {
                if v.passes(self.settings.comp_tol) {
                    let report = SolveReport {
                        converged: true,
                        exact: true,
                        residual_inf: v.base_inf,
                        comp_residual: v.comp_residual(),
                        newton_iters: iters,
                        degenerate_pattern: v.degenerate_pattern,
                        ..SolveReport::default()
                    };
                    let solution = Solution { vars: w, params: p0, report, reduced: Some(red) };
                    return Ok(Some(StepOutcome { solution, active, predicted: true }));
                }
            }
        }
        Ok(None)
    }

    /// Sensitivities of the terminal state to the initial state and to the controls.
    pub fn step_sensitivity(&self, sol: &Solution) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let red = sol.reduced.as_ref().ok_or_else(|| Error::Solver("step solved only approximately".into()))?;
        let l = &self.sys.layout;
        let p0 = l.p_s0() - l.n_vars;
        let d = parameter_sensitivity(red, &sol.vars, &sol.params, p0, l.n_x + l.n_u)?;
        let xe = l.x(l.n_fe);
        let rows = d.rows(xe, l.n_x);
        Ok((rows.columns(0, l.n_x).into_owned(), rows.columns(l.n_x, l.n_u).into_owned()))
    }
}

/// Initial values for one switching function's selection and multipliers in element `n`.
fn set_group_guess(sys: &FesdSystem, w: &mut [f64], n: usize, j: usize, target: PsiClass, scale: f64) {
    let l = &sys.layout;
    let zl = &sys.dcs.layout;
    let (Some(a), Some(lp), Some(ln)) = (zl.alpha, zl.lambda_p, zl.lambda_n) else { return };
    let (alpha, mp, mn) = match target {
        PsiClass::Positive => (1.0, scale, 0.0),
        PsiClass::Negative => (0.0, 0.0, scale),
        PsiClass::Sliding => (0.5, 0.0, 0.0),
    };
    for m in 0..l.n_s {
        let z = l.z(n, m);
        w[z + a.0 + j] = alpha;
        w[z + lp.0 + j] = mp;
        w[z + ln.0 + j] = mn;
    }
    if l.n_b > 0 {
        w[l.b(n) + 2 * j] = mn;
        w[l.b(n) + 2 * j + 1] = mp;
    }
}

fn repeat_rows(pact: &ActiveSet, sys: &FesdSystem) -> ActiveSet {
    let last = pact.multiplier_zero.last().cloned().unwrap_or_default();
    let rows = sys.layout.n_fe * sys.layout.n_s;
    ActiveSet { multiplier_zero: vec![last; rows], boundary_first_zero: vec![Vec::new(); sys.layout.n_fe] }
}

/// Integrated trajectory with all element-level data.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub n_x: usize,
    /// Element boundary times of all steps, starting at 0.
    pub grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Stage nodes `c` of the tableau, used for dense output.
    pub nodes: Vec<f64>,
    pub stage_times: Vec<Vec<f64>>,
    pub stage_states: Vec<Vec<Vec<f64>>>,
    pub stage_z: Vec<Vec<Vec<f64>>>,
    pub z_names: Vec<String>,
    pub switches: Vec<Switch>,
    /// Regions (or base sets) with a multiplier above 1e-6 in each element.
    pub active_sets: Vec<Vec<usize>>,
    pub psi_classes: Vec<Vec<PsiClass>>,
    /// Simulation step of every element.
    pub element_step: Vec<usize>,
    pub reports: Vec<SolveReport>,
    pub failure: Option<(usize, String)>,
    /// Product of the per-step state sensitivities (when requested and available).
    pub sensitivity: Option<DMatrix<f64>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        self.grid.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn all_exact(&self) -> bool {
        self.reports.iter().all(|r| r.exact)
    }
}

const ACTIVE_THRESHOLD: f64 = 1e-6;

/// An inexact step is only kept if its base rows and its complementarity hold to this level.
const INEXACT_TOL: f64 = 1e-2;

fn controls_for(controls: &[Vec<f64>], k: usize) -> &[f64] {
    match controls.len() {
        0 => &[],
        1 => &controls[0],
        _ => &controls[k.min(controls.len() - 1)],
    }
}

/// Chain `n_sim` step solves starting from `s0`.
///
/// `controls` holds one control vector per step, or a single vector used for all steps.
pub fn integrate(dcs: &Dcs, opts: &SimOptions, s0: &[f64], controls: &[Vec<f64>]) -> Result<Trajectory> {
    if !(opts.t_sim > 0.0) || opts.n_sim == 0 {
        return Err(Error::Unsupported("integration needs T_sim > 0 and N_sim >= 1".into()));
    }
    if s0.len() != dcs.n_x {
        return Err(Error::Dimension(format!("initial state has {} entries, expected {}", s0.len(), dcs.n_x)));
    }
    let mut solver = StepSolver::new(dcs, &opts.tableau, opts.n_fe, opts.method, opts.homotopy.clone())?;
    solver.predict = opts.predict;
    let l = solver.sys.layout.clone();
    let h_step = opts.t_sim / opts.n_sim as f64;
    let mut tr = Trajectory {
        n_x: dcs.n_x,
        grid: vec![0.0],
        states: vec![s0.to_vec()],
        nodes: opts.tableau.c.clone(),
        z_names: dcs.z_names.clone(),
        ..Trajectory::default()
    };
    let mut sens = opts.sensitivities.then(|| DMatrix::<f64>::identity(dcs.n_x, dcs.n_x));
    let mut s = s0.to_vec();
    let mut prev: Option<StepOutcome> = None;
    let mut t0 = 0.0;
    let theta = dcs.theta_range();
    for k in 0..opts.n_sim {
        let q = controls_for(controls, k);
        let out = match solver.solve_step(&s, q, h_step, prev.as_ref().map(|p| (&p.solution, &p.active))) {
            Ok(o) => o,
            Err(e) => {
                tr.failure = Some((k, format!("{}", e)));
                break;
            }
        };
        let sol = &out.solution;
        tr.reports.push(sol.report.clone());
        let usable = sol.vars.iter().all(|v| v.is_finite())
            && sol.report.residual_inf <= INEXACT_TOL
            && sol.report.comp_residual <= INEXACT_TOL;
        if !sol.report.converged && !(opts.accept_inexact && usable) {
            tr.failure = Some((k, sol.report.message.clone().unwrap_or_else(|| "solver failure".into())));
            break;
        }
        let w = &sol.vars;
        let hs = solver.sys.step_sizes(w, &sol.params);
        let mut t = t0;
        for n in 0..l.n_fe {
            let xn = &w[l.x(n)..l.x(n) + l.n_x];
            let mut times = Vec::with_capacity(l.n_s);
            let mut xs = Vec::with_capacity(l.n_s);
            let mut zs = Vec::with_capacity(l.n_s);
            let mut active = Vec::new();
            for m in 0..l.n_s {
                times.push(t + opts.tableau.c[m] * hs[n]);
                xs.push(
                    (0..l.n_x)
                        .map(|i| {
                            xn[i] + hs[n] * (0..l.n_s).map(|j| opts.tableau.a[m][j] * w[l.v(n, j) + i]).sum::<f64>()
                        })
                        .collect(),
                );
                let z = w[l.z(n, m)..l.z(n, m) + l.n_z].to_vec();
                if let Some((t0i, nt)) = theta {
                    for i in 0..nt {
                        if z[t0i + i] > ACTIVE_THRESHOLD && !active.contains(&i) {
                            active.push(i);
                        }
                    }
                }
                zs.push(z);
            }
            active.sort_unstable();
            let pattern = if solver.sys.is_fesd() {
                &out.active.multiplier_zero[n]
            } else {
                &out.active.multiplier_zero[n * l.n_s + l.n_s - 1]
            };
            tr.psi_classes.push(psi_classes(dcs, pattern));
            tr.active_sets.push(active);
            tr.stage_times.push(times);
            tr.stage_states.push(xs);
            tr.stage_z.push(zs);
            tr.element_step.push(k);
            t += hs[n];
            tr.grid.push(if n + 1 == l.n_fe { t0 + h_step } else { t });
            tr.states.push(w[l.x(n + 1)..l.x(n + 1) + l.n_x].to_vec());
        }
        if let Some(acc) = sens.as_mut() {
            match solver.step_sensitivity(sol) {
                Ok((sx, _)) => *acc = &sx * &*acc,
                Err(_) => sens = None,
            }
        }
        t0 += h_step;
        s = w[l.x(l.n_fe)..l.x(l.n_fe) + l.n_x].to_vec();
        prev = Some(out);
    }
    tr.sensitivity = sens;
    tr.switches = extract_switches(&tr);
    Ok(tr)
}

/// Convenience wrapper building the representation from a model.
pub fn integrate_model(
    model: &NonsmoothModel,
    variant: Variant,
    opts: &SimOptions,
    s0: &[f64],
    controls: &[Vec<f64>],
) -> Result<Trajectory> {
    integrate(&variant.build(model)?, opts, s0, controls)
}

/// Switches at element boundaries where a switching function changes its sign pattern.
pub fn extract_switches(tr: &Trajectory) -> Vec<Switch> {
    let h = tr.step_sizes();
    let h_max = h.iter().copied().fold(0.0, f64::max);
    // an element of negligible length carries no state change; its pattern is skipped
    let kept: Vec<usize> = (0..tr.psi_classes.len()).filter(|&e| h.get(e).map_or(true, |&v| v > VANISHING_ELEMENT * h_max)).collect();
    let mut out = Vec::new();
    for w in kept.windows(2) {
        let (a, b) = (&tr.psi_classes[w[0]], &tr.psi_classes[w[1]]);
        for j in 0..a.len() {
            if a[j] == b[j] {
                continue;
            }
            let kind = match (a[j], b[j]) {
                (PsiClass::Sliding, _) => SwitchKind::LeaveSliding,
                (_, PsiClass::Sliding) => SwitchKind::EnterSliding,
                _ => SwitchKind::Crossing,
            };
            out.push(Switch { t: tr.grid[w[0] + 1], psi_index: j, kind });
        }
    }
    out
}

/// Relative length below which an element is treated as a point when reading off switches.
const VANISHING_ELEMENT: f64 = 1e-9;

/// Lagrange basis value of node `k` among `nodes` at `tau`.
fn lagrange(nodes: &[f64], k: usize, tau: f64) -> f64 {
    nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .map(|(_, ci)| (tau - ci) / (nodes[k] - ci))
        .product()
}

/// Collocation-polynomial state at time `t`.
pub fn interpolate(tr: &Trajectory, t: f64) -> Result<Vec<f64>> {
    let (first, last) = (tr.grid[0], *tr.grid.last().unwrap());
    if !(t >= first && t <= last) {
        return Err(Error::Unsupported(format!("time {} outside [{}, {}]", t, first, last)));
    }
    if let Some(i) = tr.grid.iter().position(|g| *g == t) {
        return Ok(tr.states[i].clone());
    }
    let e = tr.grid.partition_point(|g| *g <= t).saturating_sub(1).min(tr.grid.len() - 2);
    let h = tr.grid[e + 1] - tr.grid[e];
    let tau = (t - tr.grid[e]) / h;
    let mut nodes = vec![0.0];
    nodes.extend_from_slice(&tr.nodes);
    let mut x = vec![0.0; tr.n_x];
    for (k, _) in nodes.iter().enumerate() {
        let l = lagrange(&nodes, k, tau);
        let src = if k == 0 { &tr.states[e] } else { &tr.stage_states[e][k - 1] };
        for i in 0..tr.n_x {
            x[i] += l * src[i];
        }
    }
    Ok(x)
}

/// Sensitivity of the terminal state of a single solved step (implicit differentiation).
pub fn forward_sensitivity(solver: &StepSolver, sol: &Solution) -> Result<DMatrix<f64>> {
    solver.step_sensitivity(sol).map(|(sx, _)| sx)
}

/// Switching-function values along the grid (for checks at reported switch times).
pub fn psi_at(dcs: &Dcs, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::compile(&dcs.switching, dcs.n_x + dcs.n_u)?;
    tape.eval(&[x, u].concat())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorNorm {
    /// Euclidean norm of the terminal-state error.
    Terminal,
    /// Largest Euclidean error over the simulation-step boundaries.
    MaxOverGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderRow {
    pub scheme: String,
    pub order_nominal: usize,
    pub n_sim: usize,
    pub h_avg: f64,
    pub err: f64,
    pub slope_fitted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderFit {
    pub scheme: String,
    pub order_nominal: usize,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub points_used: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrderStudyResult {
    pub rows: Vec<OrderRow>,
    pub fits: Vec<OrderFit>,
}

/// Usable error window for slope fits.
pub const FIT_WINDOW: (f64, f64) = (1e-11, 1e-2);

/// Least-squares slope and intercept of `log err` against `log h`.
///
/// Only points whose error lies inside [`FIT_WINDOW`] take part; the lower
/// edge keeps round-off floor points out of the fit.
pub fn fit_order(points: &[(f64, f64)]) -> Result<(f64, f64, usize)> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|(h, e)| *h > 0.0 && *e >= FIT_WINDOW.0 && *e <= FIT_WINDOW.1)
        .map(|&(h, e)| (libm::log(h), libm::log(e)))
        .collect();
    if used.len() < 2 {
        return Err(Error::Fit(format!("{} usable points, need at least 2", used.len())));
    }
    let n = used.len() as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / n;
    let my = used.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = used.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx, used.len()))
}

/// One cell of an order study.
#[derive(Clone, Debug)]
pub struct OrderCell {
    pub tableau: ButcherTableau,
    pub n_sim: usize,
}

/// Error of a trajectory against a reference trajectory.
pub fn trajectory_error(tr: &Trajectory, reference: &Trajectory, n_sim: usize, t_sim: f64, norm: ErrorNorm) -> Result<f64> {
    let dist = |a: &[f64], b: &[f64]| libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
    match norm {
        ErrorNorm::Terminal => Ok(dist(tr.terminal(), reference.terminal())),
        ErrorNorm::MaxOverGrid => {
            let mut worst: f64 = 0.0;
            for k in 1..=n_sim {
                let t = t_sim * k as f64 / n_sim as f64;
                let a = interpolate(tr, t.min(*tr.grid.last().unwrap()))?;
                let b = interpolate(reference, t.min(*reference.grid.last().unwrap()))?;
                worst = worst.max(dist(&a, &b));
            }
            Ok(worst)
        }
    }
}

/// Run independent jobs on up to `workers` threads; results keep job order.
#[cfg(feature = "std")]
pub fn fan_out<T: Send>(jobs: Vec<alloc::boxed::Box<dyn FnOnce() -> T + Send + '_>>, workers: usize) -> Vec<T> {
    use std::sync::Mutex;
    let n = jobs.len();
    let queue = Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(n.max(1)) {
            s.spawn(|| loop {
                let job = queue.lock().unwrap().pop();
                let Some((i, f)) = job else { break };
                let r = f();
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

/// Worker count from `FESD_STEP_THREADS`, defaulting to the available parallelism.
#[cfg(feature = "std")]
pub fn worker_count() -> usize {
    std::env::var("FESD_STEP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Integrate every (scheme, N_sim) cell and fit slopes per scheme against `reference`.
#[cfg(feature = "std")]
pub fn order_study(
    dcs: &Dcs,
    base: &SimOptions,
    cells: &[OrderCell],
    s0: &[f64],
    controls: &[Vec<f64>],
    reference: &Trajectory,
    norm: ErrorNorm,
) -> Result<OrderStudyResult> {
    let jobs: Vec<alloc::boxed::Box<dyn FnOnce() -> Result<(f64, f64)> + Send + '_>> = cells
        .iter()
        .map(|c| {
            let mut o = base.clone();
            o.tableau = c.tableau.clone();
            o.n_sim = c.n_sim;
            let b: alloc::boxed::Box<dyn FnOnce() -> Result<(f64, f64)> + Send + '_> = alloc::boxed::Box::new(move || {
                let tr = integrate(dcs, &o, s0, controls)?;
                if let Some((k, msg)) = &tr.failure {
                    return Err(Error::Solver(format!("step {}: {}", k, msg)));
                }
                let h = o.t_sim / (o.n_sim * o.n_fe) as f64;
                Ok((h, trajectory_error(&tr, reference, o.n_sim, o.t_sim, norm)?))
            });
            b
        })
        .collect();
    let results = fan_out(jobs, worker_count());
    let mut res = OrderStudyResult::default();
    for (c, r) in cells.iter().zip(&results) {
        let (h, err) = match r {
            Ok(v) => *v,
            Err(_) => (base.t_sim / (c.n_sim * base.n_fe) as f64, f64::NAN),
        };
        res.rows.push(OrderRow {
            scheme: c.tableau.label(),
            order_nominal: c.tableau.order,
            n_sim: c.n_sim,
            h_avg: h,
            err,
            slope_fitted: None,
        });
    }
    let mut labels: Vec<(String, usize)> = Vec::new();
    for c in cells {
        if !labels.iter().any(|(l, _)| *l == c.tableau.label()) {
            labels.push((c.tableau.label(), c.tableau.order));
        }
    }
    for (label, order) in labels {
        let pts: Vec<(f64, f64)> = res.rows.iter().filter(|r| r.scheme == label).map(|r| (r.h_avg, r.err)).collect();
        let fit = fit_order(&pts).ok();
        for r in res.rows.iter_mut().filter(|r| r.scheme == label) {
            r.slope_fitted = fit.map(|f| f.0);
        }
        res.fits.push(OrderFit {
            scheme: label,
            order_nominal: order,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            points_used: fit.map_or(0, |f| f.2),
        });
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_catalog;
    use crate::tableau::{tableau, Family};

    fn tutorial(x0: f64, n_fe: usize, n_sim: usize) -> Trajectory {
        let e = load_catalog("tutorial-a").unwrap();
        let mut o = SimOptions::new(tableau(Family::RadauIIA, 2).unwrap(), n_fe, n_sim, 1.0);
        o.sensitivities = true;
        integrate_model(&e.model, Variant::Step(None), &o, &[x0], &[]).unwrap()
    }

    #[test]
    fn tutorial_single_step() {
        let tr = tutorial(-1.0, 2, 1);
        assert_eq!(tr.switches.len(), 1);
        assert!((tr.switches[0].t - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(tr.switches[0].kind, SwitchKind::Crossing);
        assert!((tr.terminal()[0] - 2.0 / 3.0).abs() < 1e-9);
        let s = tr.sensitivity.unwrap();
        assert!((s[(0, 0)] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn tutorial_many_steps() {
        let tr = tutorial(-1.0, 2, 7);
        assert_eq!(tr.switches.len(), 1, "{:?}", tr.switches);
        assert!((tr.switches[0].t - 1.0 / 3.0).abs() < 1e-9);
        assert!((tr.terminal()[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!(tr.reports.iter().filter(|r| r.stages == 0).count() >= 5, "prediction path unused");
    }

    #[test]
    fn switch_free_run_has_equal_steps() {
        let tr = tutorial(1.0, 5, 1);
        assert!(tr.switches.is_empty());
        let h = tr.step_sizes();
        assert!(h.iter().all(|v| (v - 0.2).abs() < 1e-10));
    }

    #[test]
    fn interpolation_slopes_at_switch() {
        let tr = tutorial(-1.0, 2, 1);
        let eps = 1e-3;
        let ts = tr.switches[0].t;
        let left = (interpolate(&tr, ts).unwrap()[0] - interpolate(&tr, ts - eps).unwrap()[0]) / eps;
        let right = (interpolate(&tr, ts + eps).unwrap()[0] - interpolate(&tr, ts).unwrap()[0]) / eps;
        assert!((left - 3.0).abs() < 1e-8 && (right - 1.0).abs() < 1e-8);
        assert_eq!(interpolate(&tr, 1.0).unwrap(), tr.terminal().to_vec());
        assert!(interpolate(&tr, 1.5).is_err());
    }

    #[test]
    fn fit_recovers_slope() {
        let pts: Vec<(f64, f64)> = (0..5).map(|k| {
            let h = 0.1 / (1 << k) as f64;
            (h, 3.0 * h * h * h)
        }).collect();
        let (s, _, n) = fit_order(&pts).unwrap();
        assert!((s - 3.0).abs() < 1e-12 && n == 5);
        assert!(fit_order(&pts[..1]).is_err());
    }
}
