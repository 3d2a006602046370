//! Relaxation homotopy, damped Newton / Gauss-Newton iterations and the
//! terminal active-set polish for assembled FESD and fixed-grid systems.
//!
//! At every relaxation level the over-determined relaxed system is solved in
//! the least-squares sense. Once the relaxation is small, the active set is
//! read off the relaxed solution and a reduced smooth system (complementarity
//! pairs replaced by the zero side, step-equilibration replaced by equal
//! neighboring lengths at non-switch boundaries) is solved by Newton's method
//! and then checked against the exact, unrelaxed conditions.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dcs::{Affine, DcsKind};
use crate::discretize::{FesdSystem, PairSlot, Slot};
use crate::error::{Error, Result};
use crate::expr::{Category, Expr, ResidualBundle};

#[derive(Clone, Debug, PartialEq)]
pub struct HomotopySettings {
    pub sigma0: f64,
    pub kappa: f64,
    pub sigma_min: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub min_step: f64,
    /// Exact complementarity tolerance at termination.
    pub comp_tol: f64,
    /// Additional relaxation levels below `sigma_min` tried when the polish fails.
    pub extra_stages: usize,
    /// Replace the relaxed terminal point by an active-set solve of the exact conditions.
    pub polish: bool,
    /// Equilibration rows are weighted by `(sigma / sigma0)^exponent` during the homotopy.
    pub eq_weight_exponent: f64,
}

impl Default for HomotopySettings {
    fn default() -> Self {
        HomotopySettings {
            sigma0: 1.0,
            kappa: 0.1,
            sigma_min: 1e-10,
            max_iters: 50,
            armijo_c: 1e-4,
            backtrack: 0.5,
            min_step: 1e-8,
            comp_tol: 1e-9,
            extra_stages: 3,
            polish: true,
            eq_weight_exponent: 1.0,
        }
    }
}

impl HomotopySettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > self.sigma_min && self.sigma_min > 0.0) || !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Solver("homotopy settings need sigma0 > sigma_min > 0 and 0 < kappa < 1".into()));
        }
        Ok(())
    }

    /// Weight of the relaxed equilibration rows at relaxation level `sigma`.
    pub fn eq_weight(&self, sigma: f64) -> f64 {
        libm::pow(sigma / self.sigma0, self.eq_weight_exponent)
    }

    /// Inner tolerance at relaxation level `sigma`.
    pub fn tol(&self, sigma: f64) -> f64 {
        f64::max(1e-12, 0.1 * sigma)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveReport {
    pub converged: bool,
    pub residual_inf: f64,
    pub comp_residual: f64,
    pub stages: usize,
    pub newton_iters: usize,
    pub wall_time: f64,
    /// Terminal point satisfies the unrelaxed conditions (active-set polish succeeded).
    pub exact: bool,
    /// Exact complementarity residual after each relaxation level.
    pub stage_comp: Vec<f64>,
    pub message: Option<String>,
    /// A pair has both sides at zero in the terminal solution.
    pub degenerate_pattern: bool,
}

/// Smoothed Fischer-Burmeister function.
pub fn fb(a: f64, b: f64, sigma: f64) -> f64 {
    a + b - libm::sqrt(a * a + b * b + 2.0 * sigma)
}

/// Relaxed residual of `sys` at relaxation level `sigma`.
pub fn relax(sys: &FesdSystem, vars: &[f64], params: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let mut p = params.to_vec();
    p[sys.layout.p_sigma() - sys.layout.n_vars] = sigma;
    sys.relaxed.eval(vars, &p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub min_step: f64,
    /// Unknowns kept strictly positive by a fraction-to-boundary rule.
    pub positive: Vec<usize>,
}

impl NewtonSettings {
    pub fn new(tol: f64, max_iters: usize) -> Self {
        NewtonSettings { tol, max_iters, armijo_c: 1e-4, backtrack: 0.5, min_step: 1e-8, positive: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonOutcome {
    pub converged: bool,
    pub iters: usize,
    pub residual_inf: f64,
    /// Least-squares stationarity reached without driving the residual to tolerance.
    pub stationary: bool,
    pub message: Option<String>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| f64::max(m, x.abs()))
}

fn half_sq(v: &[f64]) -> f64 {
    0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

fn fraction_to_boundary(w: &[f64], d: &DVector<f64>, positive: &[usize]) -> f64 {
    let mut t: f64 = 1.0;
    for &i in positive {
        if d[i] < 0.0 {
            t = t.min(0.95 * w[i] / -d[i]);
        }
    }
    t
}

/// Levenberg-Marquardt with Marquardt scaling and gain-ratio damping updates.
///
/// Used for over-determined systems and as the fallback when a square Jacobian is singular.
pub fn levenberg_marquardt(
    f: &mut dyn FnMut(&[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>,
    w0: &[f64],
    s: &NewtonSettings,
) -> (Vec<f64>, NewtonOutcome) {
    let mut w = w0.to_vec();
    let mut out = NewtonOutcome { converged: false, iters: 0, residual_inf: f64::INFINITY, stationary: false, message: None };
    let (mut r, mut j) = match f(&w) {
        Ok(v) => v,
        Err(e) => {
            out.message = Some(format!("{}", e));
            return (w, out);
        }
    };
    let n = w.len();
    let mut jtj = j.tr_mul(&j);
    let mut g = j.tr_mul(&DVector::from_column_slice(&r));
    let mut diag: Vec<f64> = (0..n).map(|i| jtj[(i, i)].max(1e-300)).collect();
    let mut mu = 1e-3;
    let mut nu = 2.0;
    loop {
        out.residual_inf = inf_norm(&r);
        if out.residual_inf <= s.tol {
            out.converged = true;
            return (w, out);
        }
        let phi = half_sq(&r);
        if g.amax() <= 1e-15 * (1.0 + phi) {
            out.stationary = true;
            out.message = Some(format!("stationary point with residual {:.3e}", out.residual_inf));
            return (w, out);
        }
        if out.iters >= s.max_iters {
            out.message = Some(format!("iteration cap reached with residual {:.3e}", out.residual_inf));
            return (w, out);
        }
        out.iters += 1;
        let mut a = jtj.clone();
        for i in 0..n {
            a[(i, i)] += mu * diag[i];
        }
        let Some(ch) = a.cholesky() else {
            mu *= 10.0;
            continue;
        };
        let mut d = ch.solve(&(-&g));
        // per-component safeguard: positive unknowns shrink by at most 99% per step
        for &i in &s.positive {
            if w[i] + d[i] < 0.01 * w[i] {
                d[i] = -0.99 * w[i];
            }
        }
        let jd = &j * &d;
        let pred = -(g.dot(&d) + 0.5 * jd.norm_squared());
        let trial: Vec<f64> = w.iter().zip(d.iter()).map(|(a, b)| a + b).collect();
        let accepted = match f(&trial) {
            Ok((rt, jt)) => {
                let rho = (phi - half_sq(&rt)) / pred.max(1e-300);
                if rho > 1e-4 && rt.iter().all(|v| v.is_finite()) {
                    w = trial;
                    r = rt;
                    j = jt;
                    mu *= f64::max(1.0 / 3.0, 1.0 - libm::pow(2.0 * rho - 1.0, 3.0));
                    nu = 2.0;
                    true
                } else {
                    false
                }
            }
            Err(_) => false,
        };
        if accepted {
            jtj = j.tr_mul(&j);
            g = j.tr_mul(&DVector::from_column_slice(&r));
            for i in 0..n {
                diag[i] = diag[i].max(jtj[(i, i)]);
            }
            let wmax = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if d.amax() <= 1e-15 * (1.0 + wmax) {
                out.residual_inf = inf_norm(&r);
                out.converged = out.residual_inf <= s.tol;
                out.stationary = true;
                return (w, out);
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if mu > 1e30 {
                out.stationary = true;
                out.message = Some(format!("damping exhausted at residual {:.3e}", inf_norm(&r)));
                out.residual_inf = inf_norm(&r);
                return (w, out);
            }
        }
    }
}

/// Damped Newton with LU for square systems; Levenberg-Marquardt otherwise.
pub fn newton_solve(
    f: &mut dyn FnMut(&[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>,
    w0: &[f64],
    s: &NewtonSettings,
) -> (Vec<f64>, NewtonOutcome) {
    let mut w = w0.to_vec();
    let mut out = NewtonOutcome { converged: false, iters: 0, residual_inf: f64::INFINITY, stationary: false, message: None };
    let (mut r, mut j) = match f(&w) {
        Ok(v) => v,
        Err(e) => {
            out.message = Some(format!("{}", e));
            return (w, out);
        }
    };
    let (m, n) = j.shape();
    if m != n {
        return levenberg_marquardt(f, w0, s);
    }
    loop {
        out.residual_inf = inf_norm(&r);
        if out.residual_inf <= s.tol {
            out.converged = true;
            return (w, out);
        }
        if out.iters >= s.max_iters {
            out.message = Some(format!("iteration cap reached with residual {:.3e}", out.residual_inf));
            return (w, out);
        }
        let rhs = DVector::from_iterator(m, r.iter().map(|v| -v));
        let d = j.clone().lu().solve(&rhs).filter(|d| d.iter().all(|v| v.is_finite()));
        let Some(d) = d else {
            let rest = NewtonSettings { max_iters: s.max_iters - out.iters, ..s.clone() };
            let (w2, mut o2) = levenberg_marquardt(f, &w, &rest);
            o2.iters += out.iters;
            return (w2, o2);
        };
        out.iters += 1;
        let phi = half_sq(&r);
        // Newton direction: derivative of phi along d is -2 phi
        let slope = -2.0 * phi;
        let mut t = fraction_to_boundary(&w, &d, &s.positive);
        let mut accepted = false;
        while t >= s.min_step {
            let trial: Vec<f64> = w.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            if let Ok((rt, jt)) = f(&trial) {
                if half_sq(&rt) <= phi + s.armijo_c * t * slope || inf_norm(&rt) <= s.tol {
                    w = trial;
                    r = rt;
                    j = jt;
                    accepted = true;
                    break;
                }
            }
            t *= s.backtrack;
        }
        if !accepted {
            out.residual_inf = inf_norm(&r);
            out.message = Some(format!("line search stalled at residual {:.3e}", out.residual_inf));
            return (w, out);
        }
    }
}

/// Newton on a residual bundle with fixed parameters.
pub fn newton_solve_bundle(
    bundle: &ResidualBundle,
    vars0: &[f64],
    params: &[f64],
    tol: f64,
    max_iters: usize,
) -> (Vec<f64>, NewtonOutcome) {
    let mut f = |w: &[f64]| -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((bundle.eval(w, params)?, bundle.jacobian(w, params)?))
    };
    newton_solve(&mut f, vars0, &NewtonSettings::new(tol, max_iters))
}

/// Exact-condition check of a candidate solution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Verification {
    pub base_inf: f64,
    /// max over pairs of |min(a, b)|.
    pub pair_inf: f64,
    pub cross_inf: f64,
    pub equilibration_inf: f64,
    pub min_h: f64,
    pub degenerate_pattern: bool,
}

impl Verification {
    pub fn comp_residual(&self) -> f64 {
        self.pair_inf.max(self.cross_inf)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.base_inf <= tol && self.comp_residual() <= tol && self.equilibration_inf <= tol && self.min_h > 0.0
    }
}

fn pair_values(p: &PairSlot, w: &[f64]) -> (f64, f64) {
    (w[p.multiplier], p.complement.eval(w))
}

pub fn verify(sys: &FesdSystem, w: &[f64], params: &[f64]) -> Result<Verification> {
    let mut v = Verification { min_h: f64::INFINITY, ..Default::default() };
    let r = relax(sys, w, params, 0.0)?;
    v.base_inf = inf_norm(&r[..sys.base.len()]);
    for p in &sys.pairs {
        let (a, b) = pair_values(p, w);
        v.pair_inf = v.pair_inf.max(a.min(b).abs());
        if a.abs() <= 1e-12 && b.abs() <= 1e-12 {
            v.degenerate_pattern = true;
        }
    }
    let c = sys.checks.eval(w, params)?;
    let nc = sys.cross.len();
    v.cross_inf = inf_norm(&c[..nc]);
    v.equilibration_inf = inf_norm(&c[nc..]);
    for h in sys.step_sizes(w, params) {
        v.min_h = v.min_h.min(h);
    }
    Ok(v)
}

/// Which side of every pair is zero, element by element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSet {
    /// `[element][pair]`: true when the multiplier side vanishes (FESD), per stage for fixed grids.
    pub multiplier_zero: Vec<Vec<bool>>,
    /// End-point pairs: true when the multiplier entry is the zero one.
    pub boundary_first_zero: Vec<Vec<bool>>,
}

impl ActiveSet {
    /// Interior element boundaries (index `n` between elements `n-1` and `n`) where the pattern changes.
    pub fn switch_boundaries(&self) -> Vec<usize> {
        (1..self.multiplier_zero.len()).filter(|&n| self.multiplier_zero[n] != self.multiplier_zero[n - 1]).collect()
    }

    /// Same pattern everywhere as the last element (prediction for the next step).
    pub fn repeat_last(&self, n_fe: usize) -> ActiveSet {
        let last = self.multiplier_zero.last().cloned().unwrap_or_default();
        let lastb = self.boundary_first_zero.last().cloned().unwrap_or_default();
        ActiveSet { multiplier_zero: vec![last; n_fe], boundary_first_zero: vec![lastb; n_fe] }
    }
}

/// Alternative patterns obtained by absorbing short interior runs into a neighbor.
///
/// The relaxed solution occasionally places a very short transitional element
/// between two patterns; each candidate reassigns the elements of some interior
/// runs to the run on their left or right. The raw pattern comes first.
///
/// `groups` lists the two pairs belonging to one switching function. An element
/// where both are inactive reads as sliding; such entries are also tried as a
/// crossing away from, or a continuation of, the neighbouring element.
pub fn candidate_active_sets(active: &ActiveSet, groups: &[(usize, usize)], limit: usize) -> Vec<ActiveSet> {
    let mut out = merge_candidates(active, limit);
    let pats = &active.multiplier_zero;
    let n_fe = pats.len();
    let mut flipped_all = [active.clone(), active.clone()];
    for e in 0..n_fe {
        for &(i, k) in groups {
            if !(pats[e][i] && pats[e][k]) {
                continue;
            }
            let neighbour = [e.checked_sub(1), (e + 1 < n_fe).then_some(e + 1)]
                .into_iter()
                .flatten()
                .find(|&o| pats[o][i] != pats[o][k]);
            let Some(o) = neighbour else { continue };
            for (variant, same) in [(0, false), (1, true)] {
                let (a, b) = if same { (pats[o][i], pats[o][k]) } else { (pats[o][k], pats[o][i]) };
                let mut cand = active.clone();
                cand.multiplier_zero[e][i] = a;
                cand.multiplier_zero[e][k] = b;
                flipped_all[variant].multiplier_zero[e][i] = a;
                flipped_all[variant].multiplier_zero[e][k] = b;
                if !out.contains(&cand) && out.len() < limit {
                    out.push(cand);
                }
            }
        }
    }
    for cand in flipped_all {
        if !out.contains(&cand) && out.len() < limit {
            out.push(cand);
        }
    }
    out
}

fn merge_candidates(active: &ActiveSet, limit: usize) -> Vec<ActiveSet> {
    let pats = &active.multiplier_zero;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (e, p) in pats.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if pats[r.0] == *p => r.1 = e + 1,
            _ => runs.push((e, e + 1)),
        }
    }
    let mut out = vec![active.clone()];
    let interior = runs.len().saturating_sub(2);
    // each interior run is kept (0), merged left (1) or merged right (2)
    let total = 3usize.pow(interior.min(6) as u32);
    for code in 1..total {
        let mut c = code;
        let mut cand = active.clone();
        let mut ok = true;
        for r in 1..=interior {
            let choice = c % 3;
            c /= 3;
            let (a, b) = runs[r];
            let src = match choice {
                0 => continue,
                1 => runs[r - 1].0,
                _ => runs[r + 1].0,
            };
            if a == b {
                ok = false;
            }
            for e in a..b {
                cand.multiplier_zero[e] = pats[src].clone();
            }
        }
        if ok && !out.contains(&cand) {
            out.push(cand);
        }
        if out.len() >= limit {
            break;
        }
    }
    out
}

/// Copy the sign pattern at the step start into the first element wherever the
/// two disagree on a switching function with a definite sign.
fn with_start_pattern(active: &ActiveSet, start: &[bool], groups: &[(usize, usize)]) -> Option<ActiveSet> {
    let mut out = active.clone();
    let first = out.multiplier_zero.first_mut()?;
    let mut changed = false;
    for &(i, k) in groups {
        if start[i] != start[k] && (first[i], first[k]) != (start[i], start[k]) {
            first[i] = start[i];
            first[k] = start[k];
            changed = true;
        }
    }
    changed.then_some(out)
}

fn switch_groups(sys: &FesdSystem) -> Vec<(usize, usize)> {
    match sys.dcs.kind {
        DcsKind::Step | DcsKind::StepComposite => (0..sys.layout.n_pairs / 2).map(|j| (2 * j, 2 * j + 1)).collect(),
        DcsKind::Stewart => Vec::new(),
    }
}

fn log_ratio(a: f64, b: f64) -> f64 {
    libm::log(a.abs().max(1e-300)) - libm::log(b.abs().max(1e-300))
}

/// Read the active set off a (relaxed) solution.
pub fn classify(sys: &FesdSystem, w: &[f64]) -> ActiveSet {
    let l = &sys.layout;
    let np = l.n_pairs;
    let ns = l.n_s;
    if sys.is_fesd() {
        let mut score = vec![vec![0.0; np]; l.n_fe];
        let mut bnd = vec![Vec::new(); l.n_fe];
        for p in &sys.pairs {
            let (a, b) = pair_values(p, w);
            if p.stage <= ns {
                score[p.element][p.pair] += log_ratio(a, b);
            } else {
                bnd[p.element].push(a <= b);
            }
        }
        ActiveSet {
            multiplier_zero: score.iter().map(|row| row.iter().map(|s| *s < 0.0).collect()).collect(),
            boundary_first_zero: bnd,
        }
    } else {
        // fixed grid: one row per stage
        let mut rows = vec![vec![false; np]; l.n_fe * ns];
        for p in &sys.pairs {
            let (a, b) = pair_values(p, w);
            rows[p.element * ns + p.stage - 1][p.pair] = a <= b;
        }
        ActiveSet { multiplier_zero: rows, boundary_first_zero: vec![Vec::new(); l.n_fe] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Forced {
    Var(usize),
    /// Affine complement keyed by (index, offset bits, coef bits).
    Comp(usize, u64, u64),
}

fn forced_expr(f: Forced) -> Expr {
    match f {
        Forced::Var(i) => Expr::var(i),
        Forced::Comp(i, o, c) => f64::from_bits(o) + f64::from_bits(c) * Expr::var(i),
    }
}

fn comp_key(a: Affine) -> Forced {
    Forced::Comp(a.index, a.offset.to_bits(), a.coef.to_bits())
}

/// Smooth square (or nearly square) system for a fixed active set.
#[derive(Clone, Debug)]
pub struct ReducedSystem {
    pub bundle: ResidualBundle,
    pub active: ActiveSet,
}

pub fn reduced_system(sys: &FesdSystem, active: &ActiveSet) -> Result<ReducedSystem> {
    let l = &sys.layout;
    let ns = l.n_s;
    let np = l.n_pairs;
    let mut forced: BTreeSet<Forced> = BTreeSet::new();
    let stage_pair = |n: usize, m: usize, k: usize| -> &PairSlot {
        &sys.pairs[(n * ns + m - 1) * np + k]
    };
    let mut h_equal = Vec::new();
    if sys.is_fesd() {
        let c_one = sys.tableau.c_last_is_one;
        let switches = active.switch_boundaries();
        for n in 0..l.n_fe {
            for k in 0..np {
                if active.multiplier_zero[n][k] {
                    for m in 1..=ns {
                        forced.insert(Forced::Var(stage_pair(n, m, k).multiplier));
                    }
                } else {
                    for m in 1..=ns {
                        forced.insert(comp_key(stage_pair(n, m, k).complement));
                    }
                }
            }
        }
        for n in 1..l.n_fe {
            let is_switch = switches.contains(&n);
            if !is_switch {
                h_equal.push(Expr::var(l.h(n).unwrap()) - Expr::var(l.h(n - 1).unwrap()));
                if !c_one {
                    continue;
                }
            }
            let before = forced.len();
            for k in 0..np {
                let zero_after = active.multiplier_zero[n][k];
                let zero_before = active.multiplier_zero[n - 1][k];
                if c_one {
                    // start value of element n is the last stage multiplier of element n-1
                    if zero_after {
                        if let Slot::Var(i) = sys.multiplier_slot(n, 0, k) {
                            forced.insert(Forced::Var(i));
                        }
                    }
                } else if zero_after || zero_before {
                    if let Slot::Var(i) = sys.multiplier_slot(n, 0, k) {
                        forced.insert(Forced::Var(i));
                    }
                }
            }
            if is_switch && c_one && forced.len() == before {
                // leaving a sliding pattern: the complement of the pair that turns on vanishes at the boundary
                for k in 0..np {
                    if active.multiplier_zero[n - 1][k] && !active.multiplier_zero[n][k] {
                        forced.insert(comp_key(stage_pair(n - 1, ns, k).complement));
                    }
                }
            }
        }
        if !c_one {
            for p in sys.pairs.iter().filter(|p| p.stage == ns + 1) {
                let a = Forced::Var(p.multiplier);
                let b = comp_key(p.complement);
                let bvar = Forced::Var(p.complement.index);
                if forced.contains(&a) || forced.contains(&bvar) {
                    continue;
                }
                let first = active.boundary_first_zero[p.element].get(p.pair).copied().unwrap_or(true);
                forced.insert(if first { a } else { b });
            }
        }
    } else {
        for p in &sys.pairs {
            if active.multiplier_zero[p.element * ns + p.stage - 1][p.pair] {
                forced.insert(Forced::Var(p.multiplier));
            } else {
                forced.insert(comp_key(p.complement));
            }
        }
    }
    let mut rows = sys.base.clone();
    let mut tags = sys.base_tags.clone();
    for f in forced {
        rows.push(forced_expr(f));
        tags.push(Category::Complementarity);
    }
    for e in h_equal {
        rows.push(e);
        tags.push(Category::Equilibration);
    }
    let bundle = ResidualBundle::new(rows, tags, l.n_vars, l.n_params)?;
    Ok(ReducedSystem { bundle, active: active.clone() })
}

/// A solved system: unknowns, parameters used, report and the active-set system (when exact).
#[derive(Clone, Debug)]
pub struct Solution {
    pub vars: Vec<f64>,
    pub params: Vec<f64>,
    pub report: SolveReport,
    pub reduced: Option<ReducedSystem>,
}

fn h_indices(sys: &FesdSystem) -> Vec<usize> {
    (0..sys.layout.n_fe).filter_map(|n| sys.layout.h(n)).collect()
}

/// Solve the reduced system for `active` from `w0` and check the exact conditions.
pub fn solve_with_active_set(
    sys: &FesdSystem,
    w0: &[f64],
    params: &[f64],
    active: &ActiveSet,
) -> Result<(Vec<f64>, Verification, ReducedSystem, usize)> {
    let red = reduced_system(sys, active)?;
    let mut p = params.to_vec();
    p[sys.layout.p_sigma() - sys.layout.n_vars] = 0.0;
    let mut f = |w: &[f64]| -> Result<(Vec<f64>, DMatrix<f64>)> { Ok((red.bundle.eval(w, &p)?, red.bundle.jacobian(w, &p)?)) };
    let mut s = NewtonSettings::new(1e-12, 30);
    s.positive = h_indices(sys);
    let (w, out) = newton_solve(&mut f, w0, &s);
    let v = verify(sys, &w, &p)?;
    Ok((w, v, red, out.iters))
}

#[cfg(feature = "std")]
fn now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(not(feature = "std"))]
fn now() -> Option<()> {
    None
}

#[cfg(feature = "std")]
fn elapsed(t: Option<std::time::Instant>) -> f64 {
    t.map_or(0.0, |t| t.elapsed().as_secs_f64())
}

#[cfg(not(feature = "std"))]
fn elapsed(_: Option<()>) -> f64 {
    0.0
}

/// Relaxation homotopy followed by the active-set polish.
pub fn homotopy_solve(sys: &FesdSystem, w0: &[f64], params: &[f64], settings: &HomotopySettings) -> Result<Solution> {
    settings.validate()?;
    let start = now();
    let sigma_slot = sys.layout.p_sigma() - sys.layout.n_vars;
    let mut p = params.to_vec();
    let mut w = w0.to_vec();
    let mut report = SolveReport::default();
    let hidx = h_indices(sys);
    let mut sigma = settings.sigma0;
    let mut level = 0usize;
    let mut stage_failure: Option<String> = None;
    let mut below = 0usize;
    let weight_slot = sys.layout.p_eq_weight() - sys.layout.n_vars;
    loop {
        p[sigma_slot] = sigma;
        p[weight_slot] = settings.eq_weight(sigma);
        let pp = p.clone();
        let mut f = |x: &[f64]| -> Result<(Vec<f64>, DMatrix<f64>)> {
            Ok((sys.relaxed.eval(x, &pp)?, sys.relaxed.jacobian(x, &pp)?))
        };
        let mut ns = NewtonSettings::new(settings.tol(sigma), settings.max_iters);
        ns.armijo_c = settings.armijo_c;
        ns.backtrack = settings.backtrack;
        ns.min_step = settings.min_step;
        ns.positive = hidx.clone();
        let (wn, out) = newton_solve(&mut f, &w, &ns);
        report.newton_iters += out.iters;
        report.stages += 1;
        if wn.iter().all(|v| v.is_finite()) {
            w = wn;
        }
        if !out.converged && !out.stationary && stage_failure.is_none() {
            stage_failure = Some(format!(
                "stage {} (sigma {:.1e}): {}",
                level,
                sigma,
                out.message.clone().unwrap_or_default()
            ));
        }
        let v = verify(sys, &w, &p)?;
        report.stage_comp.push(v.comp_residual());
        report.residual_inf = out.residual_inf;
        let at_bottom = sigma <= settings.sigma_min * (1.0 + 1e-9);
        if at_bottom {
            if settings.polish {
                let raw = classify(sys, &w);
                let candidates = if sys.is_fesd() {
                    let start: Vec<bool> = (0..sys.layout.n_pairs).map(|k| p[sys.layout.p_lambda0() - sys.layout.n_vars + k] == 0.0).collect();
                    let groups = switch_groups(sys);
                    let mut c = candidate_active_sets(&raw, &groups, 16);
                    for k in 0..c.len() {
                        if let Some(fixed) = with_start_pattern(&c[k], &start, &groups) {
                            if !c.contains(&fixed) {
                                c.insert((2 * k + 1).min(c.len()), fixed);
                            }
                        }
                    }
                    c
                } else {
                    vec![raw]
                };
                for active in candidates {
                    let attempt = solve_with_active_set(sys, &w, &p, &active);
                    let Ok((wp, vp, red, iters)) = attempt else { continue };
                    report.newton_iters += iters;
                    if vp.passes(settings.comp_tol) {
                        p[sigma_slot] = 0.0;
                        report.converged = true;
                        report.exact = true;
                        report.residual_inf = vp.base_inf;
                        report.comp_residual = vp.comp_residual();
                        report.degenerate_pattern = vp.degenerate_pattern;
                        report.stage_comp.push(vp.comp_residual());
                        report.wall_time = elapsed(start);
                        return Ok(Solution { vars: wp, params: p, report, reduced: Some(red) });
                    }
                }
            } else if v.passes(settings.comp_tol) {
                report.converged = true;
                report.comp_residual = v.comp_residual();
                report.wall_time = elapsed(start);
                return Ok(Solution { vars: w, params: p, report, reduced: None });
            }
            if below >= settings.extra_stages {
                let v = verify(sys, &w, &p)?;
                report.comp_residual = v.comp_residual();
                report.residual_inf = v.base_inf;
                report.degenerate_pattern = v.degenerate_pattern;
                let msg = if v.min_h <= 0.0 {
                    String::from("degenerate step size")
                } else {
                    format!("exact complementarity not reached (residual {:.3e})", v.comp_residual())
                };
                report.message = Some(match stage_failure {
                    Some(s) => format!("{}; {}", msg, s),
                    None => msg,
                });
                report.wall_time = elapsed(start);
                return Ok(Solution { vars: w, params: p, report, reduced: None });
            }
            below += 1;
        }
        level += 1;
        sigma = if at_bottom { sigma * settings.kappa } else { (sigma * settings.kappa).max(settings.sigma_min) };
    }
}

/// Implicit-function sensitivity of the unknowns to the parameter block `[p0, p0 + k)`.
pub fn parameter_sensitivity(red: &ReducedSystem, w: &[f64], params: &[f64], p0: usize, k: usize) -> Result<DMatrix<f64>> {
    let j = red.bundle.jacobian(w, params)?;
    let (m, n) = j.shape();
    if m != n {
        return Err(Error::Solver(format!("reduced system is {}x{}, not square", m, n)));
    }
    let jp = red.bundle.jacobian_params(w, params)?;
    let rhs = -jp.columns(p0, k).into_owned();
    let lu = j.lu();
    lu.solve(&rhs).ok_or_else(|| Error::Solver("singular reduced Jacobian".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_catalog;
    use crate::discretize::assemble_fesd;
    use crate::reformulate::build_step_dcs;
    use crate::tableau::{tableau, Family};

    #[test]
    fn fb_roots() {
        assert_eq!(fb(2.0, 0.0, 0.0), 0.0);
        let s: f64 = 1e-4;
        assert!(fb(s.sqrt(), s.sqrt(), s).abs() < 1e-15);
    }

    #[test]
    fn scalar_newton() {
        let mut f = |x: &[f64]| -> Result<(Vec<f64>, DMatrix<f64>)> {
            Ok((vec![x[0] * x[0] - 4.0], DMatrix::from_element(1, 1, 2.0 * x[0])))
        };
        let (x, out) = newton_solve(&mut f, &[3.0], &NewtonSettings::new(1e-12, 20));
        assert!(out.converged && out.iters <= 8);
        assert!((x[0] - 2.0).abs() < 1e-12);
        let mut g = |x: &[f64]| -> Result<(Vec<f64>, DMatrix<f64>)> {
            Ok((vec![2.0 * x[0] + x[1] - 1.0, x[0] - x[1]], DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, -1.0])))
        };
        let (_, out) = newton_solve(&mut g, &[5.0, -3.0], &NewtonSettings::new(1e-12, 20));
        assert_eq!(out.iters, 1);
    }

    #[test]
    fn tutorial_switch_splits_elements() {
        for fam in [Family::RadauIIA, Family::GaussLegendre] {
            tutorial_switch(fam);
        }
    }

    fn tutorial_switch(fam: Family) {
        let e = load_catalog("tutorial-a").unwrap();
        let dcs = build_step_dcs(&e.model, None).unwrap();
        let sys = assemble_fesd(&dcs, &tableau(fam, 2).unwrap(), 2).unwrap();
        let s = HomotopySettings::default();
        let w0 = sys.initial_guess(&[-1.0], &[], 1.0, s.sigma0).unwrap();
        let lam = dcs.exact_multipliers(&[-1.0], &[]).unwrap();
        let p = sys.layout.params(&[-1.0], &[], 1.0, s.sigma0, &lam, &[]);
        let sol = homotopy_solve(&sys, &w0, &p, &s).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        let h = sys.step_sizes(&sol.vars, &sol.params);
        assert!((h[0] - 1.0 / 3.0).abs() < 1e-10 && (h[1] - 2.0 / 3.0).abs() < 1e-10, "{:?}", h);
        let xe = sol.vars[sys.layout.x(2)];
        assert!((xe - 2.0 / 3.0).abs() < 1e-10);
        let red = sol.reduced.unwrap();
        let sens = parameter_sensitivity(&red, &sol.vars, &sol.params, 0, 1).unwrap();
        assert!((sens[(sys.layout.x(2), 0)] - 1.0 / 3.0).abs() < 1e-8);
    }
}
