//! From nonsmooth models to complementarity systems.
//!
//! Region multipliers in the step representation are sums (over the base
//! sets of a region) of products of `alpha_j` or `1 - alpha_j`. The lifting
//! routine rewrites those products into bilinear pieces with auxiliary
//! variables so that no monomial has more than `n_d` factors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::dcs::{Affine, BoundarySpec, CompPair, Dcs, DcsKind, Signal, ZLayout};
use crate::error::{Error, Result};
use crate::expr::{substitute, Expr, Tape};
use crate::model::{ensure_valid, NonsmoothModel, SignMatrix, VectorField};

/// Factor contributed by switching function `j` to a base set with sign `s`.
fn step_factor(s: i8, alpha: Expr) -> Expr {
    if s > 0 {
        alpha
    } else {
        1.0 - alpha
    }
}

fn regions_of(model: &NonsmoothModel) -> Result<(&SignMatrix, &[Vec<usize>], &[Vec<Expr>])> {
    match &model.field {
        VectorField::Regions { sign_matrix, regions, fields } => Ok((sign_matrix, regions, fields)),
        VectorField::StepComposite { .. } => Err(Error::Unsupported(format!(
            "model '{}' has no region structure",
            model.name
        ))),
    }
}

/// Region multipliers as expressions in the step values `alpha_j = Var(j)`.
pub fn build_theta_exprs(model: &NonsmoothModel) -> Result<Vec<Expr>> {
    let (s, regions, _) = regions_of(model)?;
    Ok(theta_from_sign_matrix(s, regions))
}

/// Sum-of-products multipliers for arbitrary region unions of sign-matrix rows.
pub fn theta_from_sign_matrix(s: &SignMatrix, regions: &[Vec<usize>]) -> Vec<Expr> {
    let base: Vec<Expr> = s
        .rows()
        .iter()
        .map(|row| Expr::product(row.iter().enumerate().map(|(j, &sj)| step_factor(sj, Expr::var(j)))))
        .collect();
    regions.iter().map(|r| Expr::sum(r.iter().map(|&i| base[i].clone()))).collect()
}

/// Output of the lifting algorithm.
///
/// Expressions read `[alpha (n_psi) | beta (n_beta)]`; `beta_defs[k]` may use
/// only `alpha` and `beta_0 .. beta_{k-1}`.
#[derive(Clone, Debug)]
pub struct LiftingResult {
    pub n_psi: usize,
    pub n_d: usize,
    pub n_beta: usize,
    pub beta_defs: Vec<Expr>,
    pub theta_defs: Vec<Expr>,
}

impl LiftingResult {
    /// Region multipliers at `alpha` after eliminating `beta` by forward substitution.
    pub fn eval_theta(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let mut vals = alpha.to_vec();
        vals.resize(self.n_psi + self.n_beta, 0.0);
        for (k, def) in self.beta_defs.iter().enumerate() {
            vals[self.n_psi + k] = def.eval(&vals)?;
        }
        let tape = Tape::compile(&self.theta_defs, self.n_psi + self.n_beta)?;
        tape.eval(&vals)
    }

    /// Lifting residuals `(theta - theta_def, beta - beta_def)` over `[theta | alpha | beta]`.
    pub fn residuals(&self, n_f: usize) -> Vec<Expr> {
        let shift = |i: usize| Expr::var(n_f + i);
        let mut out: Vec<Expr> = self
            .theta_defs
            .iter()
            .enumerate()
            .map(|(k, d)| Expr::var(k) - substitute(d, &shift))
            .collect();
        for (k, d) in self.beta_defs.iter().enumerate() {
            out.push(Expr::var(n_f + self.n_psi + k) - substitute(d, &shift));
        }
        out
    }
}

/// Lift the multi-affine region multipliers so every monomial has at most `n_d` factors.
///
/// Follows the worklist form of the algorithm: rows are multiplied column by
/// column; from column `n_d` on, distinct row prefixes are replaced by new
/// variables, numbered by first occurrence.
pub fn lift(s: &SignMatrix, regions: &[Vec<usize>], n_d: usize) -> Result<LiftingResult> {
    if n_d < 2 {
        return Err(Error::Unsupported(format!("lifting depth {} < 2", n_d)));
    }
    let n_psi = s.n_psi();
    let n_rows = s.n_rows();
    let alpha = |j: usize| Expr::var(j);
    let mut beta_defs: Vec<Expr> = Vec::new();
    // current partial product per base row
    let mut partial: Vec<Expr> = vec![Expr::one(); n_rows];
    for j in 0..n_psi {
        for (i, row) in s.rows().iter().enumerate() {
            partial[i] = &partial[i] * step_factor(row[j], alpha(j));
        }
        let col = j + 1;
        if col >= n_d && col < n_psi {
            // unique prefixes of columns 0..=j, in order of first appearance
            let mut prefixes: Vec<&[i8]> = Vec::new();
            let mut map = vec![0usize; n_rows];
            for (i, row) in s.rows().iter().enumerate() {
                let p = &row[..col];
                let k = match prefixes.iter().position(|q| *q == p) {
                    Some(k) => k,
                    None => {
                        prefixes.push(p);
                        prefixes.len() - 1
                    }
                };
                map[i] = k;
            }
            let first_of = |k: usize| map.iter().position(|&m| m == k).unwrap();
            let base = beta_defs.len();
            for k in 0..prefixes.len() {
                beta_defs.push(partial[first_of(k)].clone());
            }
            for i in 0..n_rows {
                partial[i] = Expr::var(n_psi + base + map[i]);
            }
        }
    }
    let theta_defs = regions.iter().map(|r| Expr::sum(r.iter().map(|&i| partial[i].clone()))).collect();
    Ok(LiftingResult { n_psi, n_d, n_beta: beta_defs.len(), beta_defs, theta_defs })
}

/// Lifting variable count for a dense sign matrix.
pub fn n_beta_dense(n_psi: usize, n_d: usize) -> usize {
    if n_d >= n_psi {
        0
    } else {
        (1usize << n_psi) - (1usize << n_d)
    }
}

fn zvar(nxu: usize) -> impl Fn(usize) -> Expr {
    move |i| Expr::var(nxu + i)
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{}{}", prefix, i)).collect()
}

/// Pairs `(lambda_n_j, alpha_j)` and `(lambda_p_j, 1 - alpha_j)` with their equilibration groups.
fn step_pairs(n_psi: usize, a0: usize, p0: usize, n0: usize) -> (Vec<CompPair>, Vec<Vec<Signal>>) {
    let mut pairs = Vec::new();
    let mut groups = Vec::new();
    for j in 0..n_psi {
        pairs.push(CompPair { multiplier: n0 + j, complement: Affine::var(a0 + j) });
        pairs.push(CompPair { multiplier: p0 + j, complement: Affine::one_minus(a0 + j) });
        groups.push(vec![Signal::Multiplier(2 * j), Signal::Multiplier(2 * j + 1)]);
    }
    (pairs, groups)
}

/// End-point multipliers `psi(x) - lambda_p + lambda_n = 0`, `lambda_p` complementary to `lambda_n`.
fn step_boundary(model: &NonsmoothModel) -> BoundarySpec {
    let nxu = model.n_x + model.n_u;
    let b = zvar(nxu);
    let equations = model
        .switching
        .iter()
        .enumerate()
        .map(|(j, psi)| psi - b(2 * j + 1) + b(2 * j))
        .collect();
    let pairs = (0..model.n_psi()).map(|j| (2 * j + 1, 2 * j)).collect();
    BoundarySpec { equations, pairs }
}

/// Step-representation DCS, optionally lifted to depth `n_d`.
///
/// Stage variables are `[theta | alpha | lambda_p | lambda_n | beta]`.
/// Step-composite models are delegated to [`build_step_composite_dcs`].
pub fn build_step_dcs(model: &NonsmoothModel, n_d: Option<usize>) -> Result<Dcs> {
    ensure_valid(model)?;
    if matches!(model.field, VectorField::StepComposite { .. }) {
        return build_step_composite_dcs(model);
    }
    let (s, regions, fields) = regions_of(model)?;
    let n_psi = model.n_psi();
    let n_f = regions.len();
    let nxu = model.n_x + model.n_u;
    let z = zvar(nxu);
    let lifting = match n_d {
        Some(d) => lift(s, regions, d)?,
        None => LiftingResult {
            n_psi,
            n_d: n_psi,
            n_beta: 0,
            beta_defs: Vec::new(),
            theta_defs: theta_from_sign_matrix(s, regions),
        },
    };
    let n_beta = lifting.n_beta;
    let (t0, a0, p0, n0, b0) = (0, n_f, n_f + n_psi, n_f + 2 * n_psi, n_f + 3 * n_psi);
    let n_z = b0 + n_beta;
    // lifting residuals read [theta | alpha | beta]; remap into stage variables
    let remap = |i: usize| {
        if i < n_f + n_psi {
            z(i)
        } else {
            z(b0 + (i - n_f - n_psi))
        }
    };
    let mut algebraic: Vec<Expr> =
        lifting.residuals(n_f).iter().map(|r| substitute(r, &remap)).collect();
    for (j, psi) in model.switching.iter().enumerate() {
        algebraic.push(psi - z(p0 + j) + z(n0 + j));
    }
    let dynamics = (0..model.n_x)
        .map(|i| Expr::sum((0..n_f).map(|k| &fields[k][i] * z(t0 + k))))
        .collect();
    let (pairs, groups) = step_pairs(n_psi, a0, p0, n0);
    let mut z_names = names("theta", n_f);
    z_names.extend(names("alpha", n_psi));
    z_names.extend(names("lambda_p", n_psi));
    z_names.extend(names("lambda_n", n_psi));
    z_names.extend(names("beta", n_beta));
    Ok(Dcs {
        kind: DcsKind::Step,
        n_x: model.n_x,
        n_u: model.n_u,
        n_z,
        z_names,
        layout: ZLayout {
            theta: Some((t0, n_f)),
            alpha: Some((a0, n_psi)),
            lambda_p: Some((p0, n_psi)),
            lambda_n: Some((n0, n_psi)),
            beta: (n_beta > 0).then_some((b0, n_beta)),
            ..ZLayout::default()
        },
        dynamics,
        algebraic,
        pairs,
        groups,
        switching: model.switching.clone(),
        boundary: Some(step_boundary(model)),
        fields: fields.to_vec(),
        indicators: Vec::new(),
        base_signs: Vec::new(),
    })
}

/// Step DCS for right-hand sides written directly in step values; stage variables `[alpha | lambda_p | lambda_n]`.
pub fn build_step_composite_dcs(model: &NonsmoothModel) -> Result<Dcs> {
    ensure_valid(model)?;
    let VectorField::StepComposite { rhs } = &model.field else {
        return Err(Error::Unsupported(format!("model '{}' is not step-composite", model.name)));
    };
    let n_psi = model.n_psi();
    let nxu = model.n_x + model.n_u;
    let z = zvar(nxu);
    let (a0, p0, n0) = (0, n_psi, 2 * n_psi);
    // rhs reads [x | u | alpha] which coincides with the stage layout
    let dynamics = rhs.clone();
    let algebraic = model.switching.iter().enumerate().map(|(j, psi)| psi - z(p0 + j) + z(n0 + j)).collect();
    let (pairs, groups) = step_pairs(n_psi, a0, p0, n0);
    let mut z_names = names("alpha", n_psi);
    z_names.extend(names("lambda_p", n_psi));
    z_names.extend(names("lambda_n", n_psi));
    Ok(Dcs {
        kind: DcsKind::StepComposite,
        n_x: model.n_x,
        n_u: model.n_u,
        n_z: 3 * n_psi,
        z_names,
        layout: ZLayout {
            alpha: Some((a0, n_psi)),
            lambda_p: Some((p0, n_psi)),
            lambda_n: Some((n0, n_psi)),
            ..ZLayout::default()
        },
        dynamics,
        algebraic,
        pairs,
        groups,
        switching: model.switching.clone(),
        boundary: Some(step_boundary(model)),
        fields: Vec::new(),
        indicators: Vec::new(),
        base_signs: Vec::new(),
    })
}

/// Indicator functions `g = -S psi` over `[x | u]`.
pub fn stewart_indicators(s: &SignMatrix, switching: &[Expr]) -> Vec<Expr> {
    s.rows()
        .iter()
        .map(|row| -Expr::sum(row.iter().zip(switching).map(|(&sj, psi)| (sj as f64) * psi)))
        .collect()
}

/// Stewart DCS over all base sets; stage variables `[theta | lambda | mu]`.
///
/// Regions that are unions of base sets contribute duplicated vector-field columns.
pub fn build_stewart_dcs(model: &NonsmoothModel) -> Result<Dcs> {
    ensure_valid(model)?;
    let (s, regions, fields) = regions_of(model)?;
    if !s.is_dense() {
        return Err(Error::Unsupported("Stewart representation needs all 2^n_psi base sets".into()));
    }
    let n_b = s.n_rows();
    let nxu = model.n_x + model.n_u;
    let z = zvar(nxu);
    let (t0, l0, mu) = (0, n_b, 2 * n_b);
    let mut column_region = vec![0usize; n_b];
    for (k, r) in regions.iter().enumerate() {
        for &i in r {
            column_region[i] = k;
        }
    }
    let g = stewart_indicators(s, &model.switching);
    let mut algebraic: Vec<Expr> = (0..n_b).map(|i| &g[i] - z(l0 + i) + z(mu)).collect();
    algebraic.push(Expr::sum((0..n_b).map(|i| z(t0 + i))) - 1.0);
    let dynamics = (0..model.n_x)
        .map(|c| Expr::sum((0..n_b).map(|i| &fields[column_region[i]][c] * z(t0 + i))))
        .collect();
    let pairs = (0..n_b).map(|i| CompPair { multiplier: l0 + i, complement: Affine::var(t0 + i) }).collect();
    let groups = (0..n_b).map(|i| vec![Signal::Multiplier(i), Signal::Complement(i)]).collect();
    let mut z_names = names("theta", n_b);
    z_names.extend(names("lambda", n_b));
    z_names.push("mu".into());
    Ok(Dcs {
        kind: DcsKind::Stewart,
        n_x: model.n_x,
        n_u: model.n_u,
        n_z: 2 * n_b + 1,
        z_names,
        layout: ZLayout { theta: Some((t0, n_b)), lambda: Some((l0, n_b)), mu: Some(mu), ..ZLayout::default() },
        dynamics,
        algebraic,
        pairs,
        groups,
        switching: model.switching.clone(),
        boundary: None,
        fields: (0..n_b).map(|i| fields[column_region[i]].clone()).collect(),
        indicators: g,
        base_signs: s.rows().to_vec(),
    })
}

/// Regularity data of the DAE obtained by fixing an active set.
#[derive(Clone, Debug)]
pub struct ActiveSetDiagnostics {
    /// No switching function is zero: the DCS reduces to an ODE.
    pub ode_mode: bool,
    /// `grad psi_K^T F_I`, shape `|K| x |I|`.
    pub w: DMatrix<f64>,
    /// Derivatives of the active region multipliers with respect to `alpha_K`, shape `|I| x |K|`.
    pub b: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

impl ActiveSetDiagnostics {
    pub fn is_regular(&self) -> bool {
        self.ode_mode || self.rank == self.w.nrows()
    }
}

/// Numerical rank with relative tolerance `rel_tol * largest singular value`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> (usize, Vec<f64>) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0, Vec::new());
    }
    let sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().cloned().collect();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > rel_tol * top && s > 0.0).count();
    (rank, sv)
}

/// Build `W`, `B` and the rank of `W B` for region set `active` and zero switching functions `zero_set`.
///
/// Step values of switching functions outside `zero_set` follow the sign of
/// `psi(x)`; those in `zero_set` are taken from `alpha_k` (0.5 when omitted).
pub fn fixed_active_set_diagnostics(
    model: &NonsmoothModel,
    x: &[f64],
    u: &[f64],
    active: &[usize],
    zero_set: &[usize],
    alpha_k: Option<&[f64]>,
) -> Result<ActiveSetDiagnostics> {
    let (_, _, fields) = regions_of(model)?;
    let nxu = model.n_x + model.n_u;
    if zero_set.is_empty() {
        return Ok(ActiveSetDiagnostics {
            ode_mode: true,
            w: DMatrix::zeros(0, active.len()),
            b: DMatrix::zeros(active.len(), 0),
            singular_values: Vec::new(),
            rank: 0,
        });
    }
    let xu = [x, u].concat();
    let psi_tape = Tape::compile(&model.switching, nxu)?;
    let (psi, grads) = psi_tape.eval_with_gradients(&xu)?;
    let mut f_at = Vec::new();
    for &i in active {
        let t = Tape::compile(&fields[i], nxu)?;
        f_at.push(t.eval(&xu)?);
    }
    let mut w = DMatrix::zeros(zero_set.len(), active.len());
    for (a, &k) in zero_set.iter().enumerate() {
        for (b, f) in f_at.iter().enumerate() {
            w[(a, b)] = grads[k].iter().filter(|(c, _)| (*c as usize) < model.n_x).map(|&(c, d)| d * f[c as usize]).sum();
        }
    }
    let mut alpha: Vec<f64> = psi.iter().map(|&p| if p > 0.0 { 1.0 } else { 0.0 }).collect();
    for (a, &k) in zero_set.iter().enumerate() {
        alpha[k] = alpha_k.map_or(0.5, |v| v[a]);
    }
    let theta = build_theta_exprs(model)?;
    let sel: Vec<Expr> = active.iter().map(|&i| theta[i].clone()).collect();
    let (_, tg) = Tape::compile(&sel, model.n_psi())?.eval_with_gradients(&alpha)?;
    let mut b = DMatrix::zeros(active.len(), zero_set.len());
    for (r, row) in tg.iter().enumerate() {
        for &(c, d) in row {
            if let Some(col) = zero_set.iter().position(|&k| k == c as usize) {
                b[(r, col)] = d;
            }
        }
    }
    let (rank, singular_values) = numerical_rank(&(&w * &b), 1e-10);
    Ok(ActiveSetDiagnostics { ode_mode: false, w, b, singular_values, rank })
}

/// Problem-size counts for one representation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityRow {
    pub model: String,
    pub variant: String,
    pub n_psi: usize,
    pub n_f: usize,
    pub n_beta: usize,
    pub n_alg: usize,
    /// Complementarity conditions counted per vector condition (one per switching function for step).
    pub n_comp_pairs: usize,
    /// Complementarity conditions counted per scalar pair.
    pub n_comp_scalar: usize,
    pub n_eq: usize,
}

pub fn step_complexity(n_psi: usize, n_f: usize, n_beta: usize) -> (usize, usize, usize) {
    (n_f + 3 * n_psi + n_beta, 2 * n_psi, n_psi + n_beta + n_f)
}

pub fn stewart_complexity(n_psi: usize) -> (usize, usize, usize) {
    let nb = 1usize << n_psi;
    (2 * nb + 1, nb, nb + 1)
}

/// Step and Stewart size counts for a model; lifting depth `n_d` applies to the step variant.
pub fn complexity_report(model: &NonsmoothModel, n_d: Option<usize>) -> Result<Vec<ComplexityRow>> {
    let n_psi = model.n_psi();
    let step = build_step_dcs(model, n_d)?;
    let n_f = model.n_f();
    let n_beta = step.layout.beta.map_or(0, |b| b.1);
    let (n_alg, n_comp, n_eq) = step_complexity(n_psi, n_f, n_beta);
    debug_assert_eq!(n_alg, step.n_z);
    debug_assert_eq!(n_eq, step.algebraic.len());
    let mut rows = vec![ComplexityRow {
        model: model.name.clone(),
        variant: "step".into(),
        n_psi,
        n_f,
        n_beta,
        n_alg,
        n_comp_pairs: n_psi,
        n_comp_scalar: n_comp,
        n_eq,
    }];
    if let VectorField::Regions { .. } = model.field {
        let (n_alg, n_comp, n_eq) = stewart_complexity(n_psi);
        rows.push(ComplexityRow {
            model: model.name.clone(),
            variant: "stewart".into(),
            n_psi,
            n_f,
            n_beta: 0,
            n_alg,
            n_comp_pairs: n_comp,
            n_comp_scalar: n_comp,
            n_eq,
        });
    }
    Ok(rows)
}

/// Formula rows for a dense system with `n_psi` switching functions and one region per base set.
pub fn complexity_formula_rows(n_psi: usize, n_d: Option<usize>) -> Vec<ComplexityRow> {
    let n_f = 1usize << n_psi;
    let n_beta = n_d.map_or(0, |d| n_beta_dense(n_psi, d));
    let (a, c, e) = step_complexity(n_psi, n_f, n_beta);
    let (sa, sc, se) = stewart_complexity(n_psi);
    let name = format!("dense-{}", n_psi);
    vec![
        ComplexityRow {
            model: name.clone(),
            variant: "step".into(),
            n_psi,
            n_f,
            n_beta,
            n_alg: a,
            n_comp_pairs: n_psi,
            n_comp_scalar: c,
            n_eq: e,
        },
        ComplexityRow {
            model: name,
            variant: "stewart".into(),
            n_psi,
            n_f,
            n_beta: 0,
            n_alg: sa,
            n_comp_pairs: sc,
            n_comp_scalar: sc,
            n_eq: se,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_catalog;

    fn eval_all(es: &[Expr], at: &[f64]) -> Vec<f64> {
        es.iter().map(|e| e.eval(at).unwrap()).collect()
    }

    #[test]
    fn theta_for_four_singletons() {
        let s = SignMatrix::dense(2);
        let th = theta_from_sign_matrix(&s, &[vec![0], vec![1], vec![2], vec![3]]);
        let (a1, a2) = (0.3, 0.8);
        let v = eval_all(&th, &[a1, a2]);
        let expect = [a1 * a2, a1 * (1.0 - a2), (1.0 - a1) * a2, (1.0 - a1) * (1.0 - a2)];
        for k in 0..4 {
            assert!((v[k] - expect[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn theta_for_union_and_single_switch() {
        let m = load_catalog("union-2region").unwrap().model;
        let v = eval_all(&build_theta_exprs(&m).unwrap(), &[0.3, 0.6]);
        assert!((v[0] - (0.3 + 0.7 * 0.6)).abs() < 1e-15);
        assert!((v[1] - 0.7 * 0.4).abs() < 1e-15);
        let m = load_catalog("tutorial-a").unwrap().model;
        assert_eq!(eval_all(&build_theta_exprs(&m).unwrap(), &[0.25]), vec![0.25, 0.75]);
    }

    #[test]
    fn lifting_three_switches_depth_two() {
        let s = SignMatrix::dense(3);
        let regions: Vec<Vec<usize>> = (0..8).map(|i| vec![i]).collect();
        let l = lift(&s, &regions, 2).unwrap();
        assert_eq!(l.n_beta, 4);
        let a = [0.2, 0.7, 0.4];
        let b = eval_all(&l.beta_defs, &a);
        let expect = [a[0] * a[1], a[0] * (1.0 - a[1]), (1.0 - a[0]) * a[1], (1.0 - a[0]) * (1.0 - a[1])];
        for k in 0..4 {
            assert!((b[k] - expect[k]).abs() < 1e-15);
        }
        // theta_1 = beta_1 alpha_3
        let mut vals = a.to_vec();
        vals.extend_from_slice(&b);
        assert!((l.theta_defs[0].eval(&vals).unwrap() - b[0] * a[2]).abs() < 1e-15);
        assert!((l.theta_defs[1].eval(&vals).unwrap() - b[0] * (1.0 - a[2])).abs() < 1e-15);
        assert_eq!(lift(&s, &regions, 3).unwrap().n_beta, 0);
        assert_eq!(lift(&SignMatrix::dense(4), &(0..16).map(|i| vec![i]).collect::<Vec<_>>(), 2).unwrap().n_beta, 12);
        assert!(lift(&s, &regions, 1).is_err());
    }

    #[test]
    fn step_dcs_structure() {
        let m = load_catalog("tutorial-a").unwrap().model;
        let d = build_step_dcs(&m, None).unwrap();
        assert_eq!(d.n_pairs(), 2);
        assert_eq!(d.n_z, 2 + 3);
        // velocity theta_1 * 1 + theta_2 * 3 at theta = (0, 1)
        let v = d.dynamics[0].eval(&[-1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(v, 3.0);
        let robot = load_catalog("robot-regions").unwrap().model;
        let d = build_step_dcs(&robot, None).unwrap();
        assert_eq!((d.n_psi(), d.algebraic.len()), (3, 6));
        let irma = load_catalog("irma").unwrap().model;
        assert_eq!(build_step_dcs(&irma, None).unwrap().n_pairs(), 14);
    }

    #[test]
    fn stewart_dcs_structure() {
        let m = load_catalog("tutorial-a").unwrap().model;
        let d = build_stewart_dcs(&m).unwrap();
        assert_eq!(eval_all(&d.indicators, &[2.0]), vec![-2.0, 2.0]);
        let robot = load_catalog("robot-regions").unwrap().model;
        let d = build_stewart_dcs(&robot).unwrap();
        assert_eq!((d.n_pairs(), d.algebraic.len()), (8, 9));
    }

    #[test]
    fn sliding_diagnostics_are_regular() {
        let m = load_catalog("tutorial-b").unwrap().model;
        let d = fixed_active_set_diagnostics(&m, &[0.0, 0.3], &[], &[0, 1], &[0], None).unwrap();
        assert!(!d.ode_mode);
        assert_eq!(d.rank, 1);
        assert!((d.b[(0, 0)] - 1.0).abs() < 1e-15 && (d.b[(1, 0)] + 1.0).abs() < 1e-15);
        let ode = fixed_active_set_diagnostics(&m, &[1.0, 0.3], &[], &[0], &[], None).unwrap();
        assert!(ode.ode_mode && ode.is_regular());
        let spont = load_catalog("tutorial-d").unwrap().model;
        let d = fixed_active_set_diagnostics(&spont, &[0.0], &[], &[0, 1], &[0], None).unwrap();
        assert_eq!(d.rank, 1);
    }

    #[test]
    fn complexity_counts() {
        let robot = load_catalog("robot-regions").unwrap().model;
        let rows = complexity_report(&robot, None).unwrap();
        assert_eq!((rows[0].n_comp_pairs, rows[0].n_comp_scalar, rows[0].n_eq), (3, 6, 6));
        assert_eq!((rows[1].n_comp_pairs, rows[1].n_eq), (8, 9));
        assert_eq!(step_complexity(3, 8, 0).0, 17);
        assert_eq!(stewart_complexity(3).0, 17);
        assert_eq!(step_complexity(5, 2, 0).0, 17);
        assert_eq!(stewart_complexity(5).0, 65);
    }
}
