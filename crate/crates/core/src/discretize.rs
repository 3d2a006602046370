//! Runge-Kutta discretization of a [`Dcs`] with and without switch detection.
//!
//! Unknown vector, element by element:
//!
//! ```text
//! x_0 .. x_N | v_{n,m} | z_{n,m} | b_n (end-point multipliers, only if c_s < 1) | h_n (FESD only)
//! ```
//!
//! Parameters: `s0 (n_x) | q (n_u) | T | sigma | w_eq | lambda_start (n_pairs) | h_n (fixed grid only)`.
//!
//! The multiplier at the start of element `n > 0` is not a separate unknown:
//! it is the multiplier of the last stage of element `n - 1` when the last
//! node is 1, or that element's end-point multiplier otherwise. The first
//! element starts from the `lambda_start` parameters.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dcs::{Affine, Dcs, DcsKind, Signal};
use crate::error::{Error, Result};
use crate::expr::{Category, Expr, ResidualBundle, Substitution};
use crate::tableau::ButcherTableau;

/// Regularization of the normalized switch indicator in step equilibration.
pub const EQUILIBRATION_FLOOR: f64 = 1e-10;

/// Index bookkeeping for an assembled system.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub n_x: usize,
    pub n_u: usize,
    pub n_z: usize,
    pub n_s: usize,
    pub n_fe: usize,
    pub n_pairs: usize,
    /// End-point multiplier unknowns per element (0 when not used).
    pub n_b: usize,
    /// Element lengths are unknowns.
    pub fesd: bool,
    x_off: usize,
    v_off: usize,
    z_off: usize,
    b_off: usize,
    h_off: usize,
    pub n_vars: usize,
    pub n_params: usize,
}

impl Layout {
    fn new(dcs: &Dcs, n_s: usize, n_fe: usize, fesd: bool, boundary: bool) -> Layout {
        let n_pairs = dcs.pairs.len();
        let n_b = if boundary { n_pairs } else { 0 };
        let x_off = 0;
        let v_off = x_off + (n_fe + 1) * dcs.n_x;
        let z_off = v_off + n_fe * n_s * dcs.n_x;
        let b_off = z_off + n_fe * n_s * dcs.n_z;
        let h_off = b_off + n_fe * n_b;
        let n_vars = h_off + if fesd { n_fe } else { 0 };
        let n_params = dcs.n_x + dcs.n_u + 3 + n_pairs + if fesd { 0 } else { n_fe };
        Layout {
            n_x: dcs.n_x,
            n_u: dcs.n_u,
            n_z: dcs.n_z,
            n_s,
            n_fe,
            n_pairs,
            n_b,
            fesd,
            x_off,
            v_off,
            z_off,
            b_off,
            h_off,
            n_vars,
            n_params,
        }
    }

    /// Count of unknowns excluding element lengths.
    pub fn n_core(&self) -> usize {
        self.h_off
    }

    pub fn x(&self, n: usize) -> usize {
        self.x_off + n * self.n_x
    }

    /// Stage `m` is 0-based here.
    pub fn v(&self, n: usize, m: usize) -> usize {
        self.v_off + (n * self.n_s + m) * self.n_x
    }

    pub fn z(&self, n: usize, m: usize) -> usize {
        self.z_off + (n * self.n_s + m) * self.n_z
    }

    pub fn b(&self, n: usize) -> usize {
        self.b_off + n * self.n_b
    }

    pub fn h(&self, n: usize) -> Option<usize> {
        self.fesd.then(|| self.h_off + n)
    }

    pub fn p_s0(&self) -> usize {
        self.n_vars
    }

    pub fn p_q(&self) -> usize {
        self.n_vars + self.n_x
    }

    pub fn p_horizon(&self) -> usize {
        self.p_q() + self.n_u
    }

    pub fn p_sigma(&self) -> usize {
        self.p_horizon() + 1
    }

    /// Weight of the relaxed step-equilibration rows.
    pub fn p_eq_weight(&self) -> usize {
        self.p_sigma() + 1
    }

    pub fn p_lambda0(&self) -> usize {
        self.p_sigma() + 2
    }

    pub fn p_h(&self, n: usize) -> usize {
        self.p_lambda0() + self.n_pairs + n
    }

    /// Assemble the parameter vector.
    pub fn params(&self, s0: &[f64], q: &[f64], horizon: f64, sigma: f64, lambda0: &[f64], grid: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params);
        p.extend_from_slice(s0);
        p.extend_from_slice(q);
        p.push(horizon);
        p.push(sigma);
        p.push(1.0);
        p.extend_from_slice(lambda0);
        if !self.fesd {
            p.extend_from_slice(grid);
        }
        p
    }
}

/// Where a complementarity pair lives in the unknown vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSlot {
    pub element: usize,
    /// 1-based stage; `n_s + 1` marks the end-point multiplier block.
    pub stage: usize,
    /// Pair index within the DCS (or within the end-point block).
    pub pair: usize,
    pub multiplier: usize,
    pub complement: Affine,
}

/// A variable or parameter slot holding a multiplier value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Var(usize),
    Param(usize),
}

/// Assembled FESD or fixed-grid RK system.
#[derive(Clone, Debug)]
pub struct FesdSystem {
    pub layout: Layout,
    pub tableau: ButcherTableau,
    pub dcs: Dcs,
    /// Smooth equations: continuity, stage dynamics and algebraic rows, end-point rows, horizon.
    pub base: Vec<Expr>,
    pub base_tags: Vec<Category>,
    /// Stage pairs followed by end-point pairs.
    pub pairs: Vec<PairSlot>,
    pub cross: Vec<Expr>,
    /// Number of products of two unknowns in each cross row (relaxation target scale).
    pub cross_terms: Vec<usize>,
    pub equilibration: Vec<Expr>,
    /// `[base | FB(pairs, sigma) | cross - c_n sigma | w_eq * equilibration]`.
    pub relaxed: ResidualBundle,
    /// `[cross | equilibration]` without relaxation.
    pub checks: ResidualBundle,
}

impl FesdSystem {
    pub fn n_fe(&self) -> usize {
        self.layout.n_fe
    }

    /// Slot of the multiplier side of DCS pair `k` at stage `m` (0..=n_s+1) of element `n`.
    pub fn multiplier_slot(&self, n: usize, m: usize, k: usize) -> Slot {
        multiplier_slot(&self.layout, &self.dcs, self.tableau.c_last_is_one, n, m, k)
    }

    pub fn is_fesd(&self) -> bool {
        self.layout.fesd
    }

    /// Element lengths at a solution (from unknowns or fixed grid parameters).
    pub fn step_sizes(&self, vars: &[f64], params: &[f64]) -> Vec<f64> {
        (0..self.layout.n_fe)
            .map(|n| match self.layout.h(n) {
                Some(i) => vars[i],
                None => params[self.layout.p_h(n) - self.layout.n_vars],
            })
            .collect()
    }

    /// Unknown-vector guess following the standard initialization policy.
    pub fn initial_guess(&self, s0: &[f64], q: &[f64], horizon: f64, sigma0: f64) -> Result<Vec<f64>> {
        let l = &self.layout;
        let mut w = vec![0.0; l.n_vars];
        let z0 = self.dcs.initial_z(s0, q, sigma0)?;
        for n in 0..=l.n_fe {
            w[l.x(n)..l.x(n) + l.n_x].copy_from_slice(s0);
        }
        for n in 0..l.n_fe {
            for m in 0..l.n_s {
                w[l.z(n, m)..l.z(n, m) + l.n_z].copy_from_slice(&z0);
            }
            if l.n_b > 0 {
                let mut b = self.dcs.exact_multipliers(s0, q)?;
                for v in &mut b {
                    *v += libm::sqrt(sigma0);
                }
                w[l.b(n)..l.b(n) + l.n_b].copy_from_slice(&b);
            }
            if let Some(i) = l.h(n) {
                w[i] = horizon / l.n_fe as f64;
            }
        }
        Ok(w)
    }
}

fn multiplier_slot(l: &Layout, dcs: &Dcs, c_one: bool, n: usize, m: usize, k: usize) -> Slot {
    let stage_var = |n: usize, m: usize| Slot::Var(l.z(n, m - 1) + dcs.pairs[k].multiplier);
    if m == 0 {
        if n == 0 {
            Slot::Param(l.p_lambda0() + k)
        } else if c_one || l.n_b == 0 {
            stage_var(n - 1, l.n_s)
        } else {
            Slot::Var(l.b(n - 1) + k)
        }
    } else if m <= l.n_s {
        stage_var(n, m)
    } else {
        Slot::Var(l.b(n) + k)
    }
}

fn slot_expr(s: Slot) -> Expr {
    match s {
        Slot::Var(i) | Slot::Param(i) => Expr::var(i),
    }
}

/// Build the element-wise RK residuals shared by both system kinds.
fn assemble(dcs: &Dcs, tab: &ButcherTableau, n_fe: usize, fesd: bool) -> Result<FesdSystem> {
    if n_fe == 0 {
        return Err(Error::Unsupported("at least one finite element is required".into()));
    }
    let boundary = fesd && !tab.c_last_is_one;
    if boundary && dcs.boundary.is_none() {
        return Err(Error::Unsupported(format!(
            "{:?} representation has no end-point multipliers; use a tableau whose last node is 1",
            dcs.kind
        )));
    }
    let l = Layout::new(dcs, tab.stages(), n_fe, fesd, boundary);
    let n_s = l.n_s;
    let (n_x, n_u) = (l.n_x, l.n_u);
    let var = Expr::var;
    let h_expr = |n: usize| match l.h(n) {
        Some(i) => var(i),
        None => var(l.p_h(n)),
    };
    let q = |i: usize| var(l.p_q() + i);

    let mut base = Vec::new();
    let mut tags = Vec::new();
    for i in 0..n_x {
        base.push(var(l.x(0) + i) - var(l.p_s0() + i));
        tags.push(Category::Continuity);
    }
    let mut pairs = Vec::new();
    for n in 0..n_fe {
        let h = h_expr(n);
        for m in 0..n_s {
            // stage state x_n + h sum_j a_mj v_nj
            let stage: Vec<Expr> = (0..n_x)
                .map(|i| {
                    let inc = Expr::sum((0..n_s).map(|j| tab.a[m][j] * var(l.v(n, j) + i)));
                    var(l.x(n) + i) + &h * inc
                })
                .collect();
            let map = |i: usize| {
                if i < n_x {
                    stage[i].clone()
                } else if i < n_x + n_u {
                    q(i - n_x)
                } else {
                    var(l.z(n, m) + i - n_x - n_u)
                }
            };
            let mut sub = Substitution::new(&map);
            for i in 0..n_x {
                base.push(var(l.v(n, m) + i) - sub.apply(&dcs.dynamics[i]));
                tags.push(Category::Dynamics);
            }
            for g in &dcs.algebraic {
                base.push(sub.apply(g));
                tags.push(Category::Algebraic);
            }
            for (k, p) in dcs.pairs.iter().enumerate() {
                let off = l.z(n, m);
                pairs.push(PairSlot {
                    element: n,
                    stage: m + 1,
                    pair: k,
                    multiplier: off + p.multiplier,
                    complement: Affine { index: off + p.complement.index, ..p.complement },
                });
            }
        }
        for i in 0..n_x {
            let inc = Expr::sum((0..n_s).map(|j| tab.b[j] * var(l.v(n, j) + i)));
            base.push(var(l.x(n + 1) + i) - var(l.x(n) + i) - &h * inc);
            tags.push(Category::Continuity);
        }
    }
    if boundary {
        let spec = dcs.boundary.as_ref().unwrap();
        for n in 0..n_fe {
            let map = |i: usize| {
                if i < n_x {
                    var(l.x(n + 1) + i)
                } else if i < n_x + n_u {
                    q(i - n_x)
                } else {
                    var(l.b(n) + i - n_x - n_u)
                }
            };
            let mut sub = Substitution::new(&map);
            for e in &spec.equations {
                base.push(sub.apply(e));
                tags.push(Category::Algebraic);
            }
            for (k, &(i, j)) in spec.pairs.iter().enumerate() {
                pairs.push(PairSlot {
                    element: n,
                    stage: n_s + 1,
                    pair: k,
                    multiplier: l.b(n) + i,
                    complement: Affine::var(l.b(n) + j),
                });
            }
        }
    }
    if fesd {
        base.push(Expr::sum((0..n_fe).map(|n| var(l.h(n).unwrap()))) - var(l.p_horizon()));
        tags.push(Category::Horizon);
    }

    let c_one = tab.c_last_is_one;
    let mult = |n: usize, m: usize, k: usize| slot_expr(multiplier_slot(&l, dcs, c_one, n, m, k));
    let comp = |n: usize, m: usize, k: usize| {
        let p = dcs.pairs[k];
        p.complement.offset + p.complement.coef * var(l.z(n, m - 1) + p.complement.index)
    };
    let last_m = if boundary { n_s + 1 } else { n_s };

    let mut cross = Vec::new();
    let mut cross_terms = Vec::new();
    let mut equilibration = Vec::new();
    if fesd {
        for n in 0..n_fe.saturating_sub(1) {
            let mut terms = Vec::new();
            let mut unknown_products = 0usize;
            for el in [n, n + 1] {
                for m in 1..=n_s {
                    for mp in 0..=last_m {
                        if mp == m {
                            continue;
                        }
                        for k in 0..dcs.pairs.len() {
                            let slot = multiplier_slot(&l, dcs, c_one, el, mp, k);
                            if matches!(slot, Slot::Var(_)) {
                                unknown_products += 1;
                            }
                            terms.push(comp(el, m, k) * slot_expr(slot));
                        }
                    }
                }
            }
            cross_terms.push(unknown_products);
            cross.push(Expr::sum(terms));
        }
        for n in 1..n_fe {
            let sum_mult = |el: usize, k: usize| Expr::sum((0..=n_s).map(|m| mult(el, m, k)));
            let sum_comp = |el: usize, k: usize| Expr::sum((1..=n_s).map(|m| comp(el, m, k)));
            let signal = |el: usize, s: Signal| match s {
                Signal::Multiplier(k) => sum_mult(el, k),
                Signal::Complement(k) => sum_comp(el, k),
            };
            // each group factor is divided by its magnitude so that the product
            // stays O(1) however many switching functions there are
            let eta = Expr::product(dcs.groups.iter().map(|g| {
                let back: Vec<Expr> = g.iter().map(|s| signal(n - 1, *s)).collect();
                let fwd: Vec<Expr> = g.iter().map(|s| signal(n, *s)).collect();
                let upsilon = Expr::sum(back.iter().zip(&fwd).map(|(b, f)| b * f));
                let scale = Expr::sum(back.iter().cloned()) * Expr::sum(fwd.iter().cloned());
                upsilon / (&scale * &scale + EQUILIBRATION_FLOOR * EQUILIBRATION_FLOOR).sqrt()
            }));
            let dh = var(l.h(n).unwrap()) - var(l.h(n - 1).unwrap());
            equilibration.push(dh * eta);
        }
    }

    let sigma = var(l.p_sigma());
    let mut rows = base.clone();
    let mut rtags = tags.clone();
    for p in &pairs {
        let a = var(p.multiplier);
        let b = p.complement.expr(&var);
        if p.stage > n_s {
            // end-point multipliers pair with each other rather than with a
            // selection variable; shifting both by sigma keeps the inactive
            // side at O(sigma) like the stage multipliers
            rows.push(Expr::fischer_burmeister(&(&a - &sigma), &(&b - &sigma), &(&sigma * &sigma)));
        } else {
            rows.push(Expr::fischer_burmeister(&a, &b, &sigma));
        }
        rtags.push(Category::Complementarity);
    }
    for (c, &cnt) in cross.iter().zip(&cross_terms) {
        rows.push(c - (cnt as f64) * &sigma);
        rtags.push(Category::CrossComplementarity);
    }
    let weight = var(l.p_eq_weight());
    for e in &equilibration {
        rows.push(&weight * e);
        rtags.push(Category::Equilibration);
    }
    let relaxed = ResidualBundle::new(rows, rtags, l.n_vars, l.n_params)?;
    let mut crow = cross.clone();
    crow.extend(equilibration.iter().cloned());
    let ctags = cross
        .iter()
        .map(|_| Category::CrossComplementarity)
        .chain(equilibration.iter().map(|_| Category::Equilibration))
        .collect();
    let checks = ResidualBundle::new(crow, ctags, l.n_vars, l.n_params)?;
    Ok(FesdSystem {
        layout: l,
        tableau: tab.clone(),
        dcs: dcs.clone(),
        base,
        base_tags: tags,
        pairs,
        cross,
        cross_terms,
        equilibration,
        relaxed,
        checks,
    })
}

/// FESD system: element lengths are unknowns, with cross complementarity, step equilibration and `sum h = T`.
pub fn assemble_fesd(dcs: &Dcs, tab: &ButcherTableau, n_fe: usize) -> Result<FesdSystem> {
    assemble(dcs, tab, n_fe, true)
}

/// Standard RK system on a grid whose element lengths are parameters.
pub fn assemble_std(dcs: &Dcs, tab: &ButcherTableau, n_fe: usize) -> Result<FesdSystem> {
    assemble(dcs, tab, n_fe, false)
}

/// Switch indicator value for explicit multiplier sums (used by tests and switch classification).
///
/// `backward[k]` and `forward[k]` hold the summed multiplier (or complement) signal of term `k`.
pub fn indicator(groups: &[Vec<Signal>], backward: &[f64], forward: &[f64], signal_index: impl Fn(Signal) -> usize) -> f64 {
    groups
        .iter()
        .map(|g| g.iter().map(|&s| backward[signal_index(s)] * forward[signal_index(s)]).sum::<f64>())
        .product()
}

/// Scalar element residual: RK equations for one element in isolation (exposed for testing).
pub fn rk_element_residual(
    dcs: &Dcs,
    tab: &ButcherTableau,
    x_n: &[f64],
    v: &[Vec<f64>],
    z: &[Vec<f64>],
    x_next: &[f64],
    h: f64,
    q: &[f64],
) -> Result<Vec<f64>> {
    let n_s = tab.stages();
    let n_x = dcs.n_x;
    let mut out = Vec::new();
    let dyn_tape = crate::expr::Tape::compile(&dcs.dynamics, n_x + dcs.n_u + dcs.n_z)?;
    let alg_tape = crate::expr::Tape::compile(&dcs.algebraic, n_x + dcs.n_u + dcs.n_z)?;
    for m in 0..n_s {
        let stage: Vec<f64> =
            (0..n_x).map(|i| x_n[i] + h * (0..n_s).map(|j| tab.a[m][j] * v[j][i]).sum::<f64>()).collect();
        let inp = [stage.as_slice(), q, z[m].as_slice()].concat();
        let f = dyn_tape.eval(&inp)?;
        out.extend((0..n_x).map(|i| v[m][i] - f[i]));
        out.extend(alg_tape.eval(&inp)?);
    }
    out.extend((0..n_x).map(|i| x_next[i] - x_n[i] - h * (0..n_s).map(|j| tab.b[j] * v[j][i]).sum::<f64>()));
    Ok(out)
}

/// Whether a representation supports FESD with the given tableau.
pub fn supports(dcs: &Dcs, tab: &ButcherTableau) -> bool {
    tab.c_last_is_one || dcs.boundary.is_some() || dcs.kind != DcsKind::Stewart
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_catalog;
    use crate::reformulate::{build_step_dcs, build_stewart_dcs};
    use crate::tableau::{tableau, Family};

    fn tutorial_dcs() -> Dcs {
        build_step_dcs(&load_catalog("tutorial-a").unwrap().model, None).unwrap()
    }

    #[test]
    fn unknown_and_equation_counts() {
        let sys = assemble_fesd(&tutorial_dcs(), &tableau(Family::RadauIIA, 1).unwrap(), 2).unwrap();
        assert_eq!(sys.layout.n_core(), 15);
        assert_eq!(sys.layout.n_vars, 17);
        assert_eq!(sys.relaxed.len(), 15 + 2 * 2 - 1);
        let horizon_rows = sys.base_tags.iter().filter(|t| **t == Category::Horizon).count();
        assert_eq!(horizon_rows, 1);
        let one = assemble_fesd(&tutorial_dcs(), &tableau(Family::RadauIIA, 1).unwrap(), 1).unwrap();
        assert!(one.cross.is_empty() && one.equilibration.is_empty());
        let std = assemble_std(&tutorial_dcs(), &tableau(Family::RadauIIA, 1).unwrap(), 3).unwrap();
        assert!(std.layout.h(0).is_none());
        assert_eq!(std.relaxed.len(), std.layout.n_vars);
    }

    #[test]
    fn element_residual_in_negative_region() {
        let dcs = tutorial_dcs();
        let tab = tableau(Family::RadauIIA, 1).unwrap();
        // x = -1 -> -0.7 with h = 0.1: theta = (0, 1), alpha = 0, lambda_n = 0.7
        let z = vec![vec![0.0, 1.0, 0.0, 0.0, 0.7]];
        let r = rk_element_residual(&dcs, &tab, &[-1.0], &[vec![3.0]], &z, &[-0.7], 0.1, &[]).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12), "{:?}", r);
    }

    #[test]
    fn cross_rows_vanish_without_switch() {
        let dcs = tutorial_dcs();
        let tab = tableau(Family::RadauIIA, 2).unwrap();
        let sys = assemble_fesd(&dcs, &tab, 3).unwrap();
        let l = &sys.layout;
        let mut w = vec![0.0; l.n_vars];
        // positive region everywhere: alpha = 1, lambda_n = 0, lambda_p > 0
        for n in 0..3 {
            for m in 0..2 {
                let z = l.z(n, m);
                w[z] = 1.0;
                w[z + 2] = 1.0;
                w[z + 3] = 0.5 + n as f64;
            }
            w[l.h(n).unwrap()] = 0.2 + 0.1 * n as f64;
        }
        let p = l.params(&[1.0], &[], 1.0, 0.0, &[0.0, 1.0], &[]);
        let c = sys.checks.eval(&w, &p).unwrap();
        assert_eq!(&c[..2], &[0.0, 0.0]);
        // equilibration indicator positive: unequal h gives nonzero rows
        assert!(c[2].abs() > 0.0 && c[3].abs() > 0.0);
    }

    #[test]
    fn single_product_contribution() {
        // one pair, alpha_{0,1} = 0.5 and lambda_n at element start 0.2
        let dcs = tutorial_dcs();
        let sys = assemble_fesd(&dcs, &tableau(Family::RadauIIA, 1).unwrap(), 2).unwrap();
        let l = &sys.layout;
        let mut w = vec![0.0; l.n_vars];
        w[l.z(0, 0) + 2] = 0.5;
        w[l.z(1, 0) + 2] = 1.0;
        let p = l.params(&[0.0], &[], 1.0, 0.0, &[0.2, 0.0], &[]);
        // alpha_{0,1} * lambda_n_{0,0} = 0.1; all other products vanish
        let c = sys.checks.eval(&w, &p).unwrap();
        assert!((c[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn stewart_needs_unit_last_node_for_fesd() {
        let dcs = build_stewart_dcs(&load_catalog("tutorial-a").unwrap().model).unwrap();
        assert!(assemble_fesd(&dcs, &tableau(Family::GaussLegendre, 2).unwrap(), 2).is_err());
        assert!(assemble_std(&dcs, &tableau(Family::GaussLegendre, 2).unwrap(), 2).is_ok());
        let step = tutorial_dcs();
        let gl = assemble_fesd(&step, &tableau(Family::GaussLegendre, 2).unwrap(), 2).unwrap();
        assert_eq!(gl.layout.n_b, 2);
    }
}
