//! Stage-level description of a dynamic complementarity system.
//!
//! A [`Dcs`] is what the discretization consumes: at every RK stage it
//! introduces `n_z` algebraic unknowns `z`, imposes `algebraic(x, u, z) = 0`,
//! evaluates the velocity `dynamics(x, u, z)`, and requires each
//! [`CompPair`] to be complementary. Expressions read `[x | u | z]`.
//!
//! Every pair has a *multiplier* side (a single `z` entry, continuous in time)
//! and a *complement* side (an affine function of one `z` entry). Cross
//! complementarity couples complement sides at one stage with multiplier sides
//! at other stages of the same and the neighboring element.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::expr::{Expr, Tape};
use crate::model::heaviside_oracle;

/// `offset + coef * z[index]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub offset: f64,
    pub coef: f64,
    pub index: usize,
}

impl Affine {
    pub fn var(index: usize) -> Self {
        Affine { offset: 0.0, coef: 1.0, index }
    }

    pub fn one_minus(index: usize) -> Self {
        Affine { offset: 1.0, coef: -1.0, index }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.offset + self.coef * z[self.index]
    }

    /// Expression with `z[i]` replaced by `zvar(i)`.
    pub fn expr(&self, zvar: &dyn Fn(usize) -> Expr) -> Expr {
        self.offset + self.coef * zvar(self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompPair {
    /// Index into `z` of the multiplier side.
    pub multiplier: usize,
    pub complement: Affine,
}

/// Terms of the switch indicator used by step equilibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    /// Multiplier side of pair `k`, summed over stages including the element start.
    Multiplier(usize),
    /// Complement side of pair `k`, summed over the interior stages.
    Complement(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcsKind {
    /// Step representation with selection variables per switching function.
    Step,
    /// Step representation substituted directly into the right-hand side.
    StepComposite,
    /// Simplex multipliers over all base sets.
    Stewart,
}

/// Named ranges of the stage variables `z`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ZLayout {
    pub theta: Option<(usize, usize)>,
    pub alpha: Option<(usize, usize)>,
    pub lambda_p: Option<(usize, usize)>,
    pub lambda_n: Option<(usize, usize)>,
    pub beta: Option<(usize, usize)>,
    pub lambda: Option<(usize, usize)>,
    pub mu: Option<usize>,
}

/// Extra unknowns at element end points for tableaus whose last node is not 1.
///
/// Variables `b` (one per pair, holding that pair's multiplier value at the
/// end point) satisfy `equations(x_end, u, b) = 0` and the complementarity of
/// every listed `(i, j)` pair of `b` entries.
#[derive(Clone, Debug)]
pub struct BoundarySpec {
    pub equations: Vec<Expr>,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Dcs {
    pub kind: DcsKind,
    pub n_x: usize,
    pub n_u: usize,
    pub n_z: usize,
    pub z_names: Vec<String>,
    pub layout: ZLayout,
    pub dynamics: Vec<Expr>,
    pub algebraic: Vec<Expr>,
    pub pairs: Vec<CompPair>,
    pub groups: Vec<Vec<Signal>>,
    /// Switching functions over `[x | u]`.
    pub switching: Vec<Expr>,
    pub boundary: Option<BoundarySpec>,
    /// Region vector fields for Stewart/step (used by diagnostics), over `[x | u]`.
    pub fields: Vec<Vec<Expr>>,
    /// Stewart: `-S psi` over `[x | u]`.
    pub indicators: Vec<Expr>,
    /// Stewart: sign row of every base set (empty otherwise).
    pub base_signs: Vec<Vec<i8>>,
}

impl Dcs {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_psi(&self) -> usize {
        self.switching.len()
    }

    fn eval_psi(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::compile(&self.switching, self.n_x + self.n_u)?;
        tape.eval(&[x, u].concat())
    }

    fn eval_indicators(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::compile(&self.indicators, self.n_x + self.n_u)?;
        tape.eval(&[x, u].concat())
    }

    /// Exact multiplier-side values of every pair at state `x` (element start/end oracle).
    pub fn exact_multipliers(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            DcsKind::Step | DcsKind::StepComposite => {
                let sel = heaviside_oracle(&self.eval_psi(x, u)?)?;
                let mut out = Vec::with_capacity(self.pairs.len());
                for j in 0..self.n_psi() {
                    out.push(sel.lambda_n[j]);
                    out.push(sel.lambda_p[j]);
                }
                Ok(out)
            }
            DcsKind::Stewart => {
                let g = self.eval_indicators(x, u)?;
                let m = g.iter().cloned().fold(f64::INFINITY, f64::min);
                Ok(g.iter().map(|gi| gi - m).collect())
            }
        }
    }

    /// Starting guess for the stage variables at state `x` with relaxation `sigma0`.
    pub fn initial_z(&self, x: &[f64], u: &[f64], sigma0: f64) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.n_z];
        let shift = libm::sqrt(sigma0);
        match self.kind {
            DcsKind::Step | DcsKind::StepComposite => {
                let psi = self.eval_psi(x, u)?;
                let sel = heaviside_oracle(&psi)?;
                let (a0, _) = self.layout.alpha.unwrap();
                let (p0, _) = self.layout.lambda_p.unwrap();
                let (n0, _) = self.layout.lambda_n.unwrap();
                for j in 0..psi.len() {
                    z[a0 + j] = sel.alpha[j].value_or(0.5).clamp(0.0, 1.0);
                    z[p0 + j] = sel.lambda_p[j] + shift;
                    z[n0 + j] = sel.lambda_n[j] + shift;
                }
                if let Some((t0, nt)) = self.layout.theta {
                    for k in 0..nt {
                        z[t0 + k] = 1.0 / nt as f64;
                    }
                }
                self.fill_beta(&mut z, x, u)?;
            }
            DcsKind::Stewart => {
                let g = self.eval_indicators(x, u)?;
                let (t0, nt) = self.layout.theta.unwrap();
                let (l0, _) = self.layout.lambda.unwrap();
                let m = g.iter().cloned().fold(f64::INFINITY, f64::min);
                for i in 0..nt {
                    z[t0 + i] = 1.0 / nt as f64;
                    z[l0 + i] = g[i] - m + shift;
                }
                z[self.layout.mu.unwrap()] = -m + shift;
            }
        }
        Ok(z)
    }

    /// Solve the lifting equations for `beta` by forward substitution given the current `alpha`.
    fn fill_beta(&self, z: &mut [f64], x: &[f64], u: &[f64]) -> Result<()> {
        let Some((b0, nb)) = self.layout.beta else { return Ok(()) };
        let nxu = self.n_x + self.n_u;
        let nt = self.layout.theta.map_or(0, |t| t.1);
        // beta rows follow the theta rows in `algebraic`; each is beta_k - def_k
        for k in 0..nb {
            z[b0 + k] = 0.0;
            let row = &self.algebraic[nt + k];
            let tape = Tape::compile(core::slice::from_ref(row), nxu + self.n_z)?;
            let mut inp = [x, u, &*z].concat();
            inp[nxu + b0 + k] = 0.0;
            let r = tape.eval(&inp)?[0];
            z[b0 + k] = -r;
        }
        Ok(())
    }

    /// Multiplier-side value of every pair from the stage variables.
    pub fn multipliers_of(&self, z: &[f64]) -> Vec<f64> {
        self.pairs.iter().map(|p| z[p.multiplier]).collect()
    }

    /// Complement-side value of every pair from the stage variables.
    pub fn complements_of(&self, z: &[f64]) -> Vec<f64> {
        self.pairs.iter().map(|p| p.complement.eval(z)).collect()
    }

    /// Indices (into `z`) of the region multipliers, if this representation has them.
    pub fn theta_range(&self) -> Option<(usize, usize)> {
        self.layout.theta
    }
}
