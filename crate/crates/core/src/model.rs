//! Piecewise-smooth systems with Heaviside step nonlinearities.
//!
//! A [`NonsmoothModel`] carries switching functions `psi(x)` and one of two
//! right-hand-side descriptions:
//!
//! * [`VectorField::Regions`]: a Filippov system given by a sign matrix whose
//!   rows are base sets, regions formed as unions of rows, and one smooth
//!   vector field per region.
//! * [`VectorField::StepComposite`]: a right-hand side written directly in
//!   terms of step values, one per switching function, as in gene regulatory
//!   network models. These expressions read variables `[x | u | alpha]`.
//!
//! All model expressions read the variable layout `[x | u]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::expr::{Expr, Tape};

/// Dense or partial sign matrix; rows are base sets, entries are `+1` or `-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignMatrix {
    rows: Vec<Vec<i8>>,
    n_psi: usize,
}

impl SignMatrix {
    /// Build from rows without checking; use [`validate_sign_matrix`] for diagnostics.
    pub fn new(rows: Vec<Vec<i8>>, n_psi: usize) -> Self {
        SignMatrix { rows, n_psi }
    }

    /// All `2^n_psi` sign patterns, first column most significant, `+1` before `-1`.
    pub fn dense(n_psi: usize) -> Self {
        let n = 1usize << n_psi;
        let rows = (0..n)
            .map(|i| (0..n_psi).map(|j| if (i >> (n_psi - 1 - j)) & 1 == 0 { 1 } else { -1 }).collect())
            .collect();
        SignMatrix { rows, n_psi }
    }

    pub fn rows(&self) -> &[Vec<i8>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_psi(&self) -> usize {
        self.n_psi
    }

    pub fn is_dense(&self) -> bool {
        self.n_psi < usize::BITS as usize - 1 && self.rows.len() == 1usize << self.n_psi
    }

    /// Index of the row whose sign pattern matches `signs`.
    pub fn find_row(&self, signs: &[i8]) -> Option<usize> {
        self.rows.iter().position(|r| r.as_slice() == signs)
    }
}

/// Right-hand-side description of a model.
#[derive(Clone, Debug)]
pub enum VectorField {
    Regions {
        sign_matrix: SignMatrix,
        /// Region `k` is the union of the listed sign-matrix rows.
        regions: Vec<Vec<usize>>,
        /// One vector field (length `n_x`) per region.
        fields: Vec<Vec<Expr>>,
    },
    StepComposite {
        /// `n_x` expressions over `[x | u | alpha]`.
        rhs: Vec<Expr>,
    },
}

#[derive(Clone, Debug)]
pub struct NonsmoothModel {
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub switching: Vec<Expr>,
    pub field: VectorField,
    pub state_names: Vec<String>,
}

impl NonsmoothModel {
    pub fn n_psi(&self) -> usize {
        self.switching.len()
    }

    /// Number of regions (zero for step-composite models).
    pub fn n_f(&self) -> usize {
        match &self.field {
            VectorField::Regions { regions, .. } => regions.len(),
            VectorField::StepComposite { .. } => 0,
        }
    }

    pub fn sign_matrix(&self) -> Option<&SignMatrix> {
        match &self.field {
            VectorField::Regions { sign_matrix, .. } => Some(sign_matrix),
            VectorField::StepComposite { .. } => None,
        }
    }

    /// Evaluate the switching functions at `(x, u)`.
    pub fn eval_psi(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::compile(&self.switching, self.n_x + self.n_u)?;
        tape.eval(&[x, u].concat())
    }

    /// Index of the region containing a point with the given switching values (none on a boundary).
    pub fn region_of(&self, psi: &[f64]) -> Option<usize> {
        let VectorField::Regions { sign_matrix, regions, .. } = &self.field else {
            return None;
        };
        if psi.iter().any(|&p| p == 0.0) {
            return None;
        }
        let signs: Vec<i8> = psi.iter().map(|&p| if p > 0.0 { 1 } else { -1 }).collect();
        let row = sign_matrix.find_row(&signs)?;
        regions.iter().position(|r| r.contains(&row))
    }
}

/// Step value for one switching function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepValue {
    Value(f64),
    /// Any value in `[0, 1]` is admissible (switching function exactly zero).
    Free,
}

impl StepValue {
    pub fn value_or(self, fill: f64) -> f64 {
        match self {
            StepValue::Value(v) => v,
            StepValue::Free => fill,
        }
    }
}

/// Exact solution of the step-function LP for given switching values.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSelection {
    pub alpha: Vec<StepValue>,
    pub lambda_p: Vec<f64>,
    pub lambda_n: Vec<f64>,
}

/// Positive/negative parts of `psi` and the induced step values.
pub fn heaviside_oracle(psi: &[f64]) -> Result<StepSelection> {
    if psi.iter().any(|p| p.is_nan()) {
        return Err(Error::NanInput);
    }
    let mut sel = StepSelection { alpha: Vec::new(), lambda_p: Vec::new(), lambda_n: Vec::new() };
    for &p in psi {
        sel.lambda_p.push(if p > 0.0 { p } else { 0.0 });
        sel.lambda_n.push(if p < 0.0 { -p } else { 0.0 });
        sel.alpha.push(if p > 0.0 {
            StepValue::Value(1.0)
        } else if p < 0.0 {
            StepValue::Value(0.0)
        } else {
            StepValue::Free
        });
    }
    Ok(sel)
}

/// Set operations on region indicator expressions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionOp {
    Union,
    Intersect,
    Complement,
    /// `A \ B` for `B` contained in `A`.
    Difference,
}

/// Combine multiplier expressions of disjoint or nested sets.
///
/// `Complement` uses only the first operand; the others need two.
pub fn region_algebra(op: RegionOp, operands: &[Expr]) -> Result<Expr> {
    let need = if op == RegionOp::Complement { 1 } else { 2 };
    if operands.len() < need || (op == RegionOp::Difference && operands.len() != 2) {
        return Err(Error::Dimension(format!("{:?} needs {} operand(s), got {}", op, need, operands.len())));
    }
    Ok(match op {
        RegionOp::Union => Expr::sum(operands.iter().cloned()),
        RegionOp::Intersect => Expr::product(operands.iter().cloned()),
        RegionOp::Complement => 1.0 - &operands[0],
        RegionOp::Difference => &operands[0] - &operands[1],
    })
}

/// A structural problem found by [`validate_model`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    BadSignEntry { row: usize, col: usize, value: i8 },
    RowLength { row: usize, len: usize },
    DuplicateRow { row: usize, first: usize },
    TooManyRows { rows: usize },
    UncoveredBaseSet { row: usize },
    OverlappingRegions { row: usize },
    EmptyRegion { region: usize },
    RegionRowOutOfRange { region: usize, row: usize },
    FieldCount { regions: usize, fields: usize },
    FieldDimension { region: usize, len: usize },
    VariableOutOfRange { what: String, bound: usize },
    NonFinite { what: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BadSignEntry { row, col, value } => {
                write!(f, "sign matrix entry ({}, {}) is {}, expected +1 or -1", row, col, value)
            }
            Violation::RowLength { row, len } => write!(f, "sign matrix row {} has length {}", row, len),
            Violation::DuplicateRow { row, first } => write!(f, "duplicate row {} (same as row {})", row, first),
            Violation::TooManyRows { rows } => write!(f, "sign matrix has {} rows, more than 2^n_psi", rows),
            Violation::UncoveredBaseSet { row } => write!(f, "uncovered base set: row {}", row),
            Violation::OverlappingRegions { row } => write!(f, "row {} belongs to more than one region", row),
            Violation::EmptyRegion { region } => write!(f, "region {} is empty", region),
            Violation::RegionRowOutOfRange { region, row } => {
                write!(f, "region {} references missing row {}", region, row)
            }
            Violation::FieldCount { regions, fields } => {
                write!(f, "{} regions but {} vector fields", regions, fields)
            }
            Violation::FieldDimension { region, len } => {
                write!(f, "vector field of region {} has {} components", region, len)
            }
            Violation::VariableOutOfRange { what, bound } => {
                write!(f, "{} references a variable index >= {}", what, bound)
            }
            Violation::NonFinite { what } => write!(f, "{} is not finite at a probe point", what),
        }
    }
}

/// Sign-matrix checks: entries, row lengths, duplicates, row count.
pub fn validate_sign_matrix(s: &SignMatrix) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, row) in s.rows.iter().enumerate() {
        if row.len() != s.n_psi {
            out.push(Violation::RowLength { row: i, len: row.len() });
        }
        for (j, &v) in row.iter().enumerate() {
            if v != 1 && v != -1 {
                out.push(Violation::BadSignEntry { row: i, col: j, value: v });
            }
        }
        if let Some(first) = s.rows[..i].iter().position(|r| r == row) {
            out.push(Violation::DuplicateRow { row: i, first });
        }
    }
    if s.n_psi < 31 && s.rows.len() > 1usize << s.n_psi {
        out.push(Violation::TooManyRows { rows: s.rows.len() });
    }
    out
}

/// Deterministic probe points used to check that expressions evaluate to finite values.
fn probe_points(n: usize) -> Vec<Vec<f64>> {
    (0..3)
        .map(|k| (0..n).map(|i| 0.1 + 0.37 * ((i * 7 + k * 13) % 11) as f64 / 11.0).collect())
        .collect()
}

fn check_exprs(exprs: &[Expr], bound: usize, what: &str, out: &mut Vec<Violation>) {
    for (i, e) in exprs.iter().enumerate() {
        if e.var_bound() > bound {
            out.push(Violation::VariableOutOfRange { what: format!("{} {}", what, i), bound });
            continue;
        }
        for p in probe_points(bound) {
            match e.eval(&p) {
                Ok(v) if v.is_finite() => {}
                _ => {
                    out.push(Violation::NonFinite { what: format!("{} {}", what, i) });
                    break;
                }
            }
        }
    }
}

/// Structural diagnostics; an empty list means the model is valid.
pub fn validate_model(model: &NonsmoothModel) -> Vec<Violation> {
    let nxu = model.n_x + model.n_u;
    let mut out = Vec::new();
    check_exprs(&model.switching, nxu, "switching function", &mut out);
    match &model.field {
        VectorField::Regions { sign_matrix, regions, fields } => {
            if sign_matrix.n_psi != model.n_psi() {
                out.push(Violation::RowLength { row: 0, len: sign_matrix.n_psi });
            }
            out.extend(validate_sign_matrix(sign_matrix));
            let mut owner = vec![None; sign_matrix.n_rows()];
            for (k, r) in regions.iter().enumerate() {
                if r.is_empty() {
                    out.push(Violation::EmptyRegion { region: k });
                }
                for &row in r {
                    if row >= owner.len() {
                        out.push(Violation::RegionRowOutOfRange { region: k, row });
                    } else if owner[row].is_some() {
                        out.push(Violation::OverlappingRegions { row });
                    } else {
                        owner[row] = Some(k);
                    }
                }
            }
            for (row, o) in owner.iter().enumerate() {
                if o.is_none() {
                    out.push(Violation::UncoveredBaseSet { row });
                }
            }
            if fields.len() != regions.len() {
                out.push(Violation::FieldCount { regions: regions.len(), fields: fields.len() });
            }
            for (k, f) in fields.iter().enumerate() {
                if f.len() != model.n_x {
                    out.push(Violation::FieldDimension { region: k, len: f.len() });
                }
                check_exprs(f, nxu, &format!("field {} component", k), &mut out);
            }
        }
        VectorField::StepComposite { rhs } => {
            if rhs.len() != model.n_x {
                out.push(Violation::FieldDimension { region: 0, len: rhs.len() });
            }
            check_exprs(rhs, nxu + model.n_psi(), "right-hand side component", &mut out);
        }
    }
    out
}

/// Validate and convert the violation list into an error.
pub fn ensure_valid(model: &NonsmoothModel) -> Result<()> {
    let v = validate_model(model);
    if v.is_empty() {
        Ok(())
    } else {
        let msgs: Vec<String> = v.iter().map(|x| format!("{}", x)).collect();
        Err(Error::InvalidModel(msgs.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_psi_model(regions: Vec<Vec<usize>>, rows: Vec<Vec<i8>>) -> NonsmoothModel {
        let nf = regions.len();
        NonsmoothModel {
            name: "t".into(),
            n_x: 2,
            n_u: 0,
            switching: vec![Expr::var(0), Expr::var(1)],
            field: VectorField::Regions {
                sign_matrix: SignMatrix::new(rows, 2),
                regions,
                fields: vec![vec![Expr::one(), Expr::zero()]; nf],
            },
            state_names: vec![],
        }
    }

    #[test]
    fn oracle_examples() {
        let s = heaviside_oracle(&[2.0, -3.0, 0.0]).unwrap();
        assert_eq!(s.lambda_p, vec![2.0, 0.0, 0.0]);
        assert_eq!(s.lambda_n, vec![0.0, 3.0, 0.0]);
        assert_eq!(s.alpha, vec![StepValue::Value(1.0), StepValue::Value(0.0), StepValue::Free]);
        let s = heaviside_oracle(&[-1e-12]).unwrap();
        assert_eq!((s.alpha[0], s.lambda_n[0]), (StepValue::Value(0.0), 1e-12));
        assert_eq!(heaviside_oracle(&[f64::NAN]), Err(Error::NanInput));
    }

    #[test]
    fn dense_matrix_is_valid_with_singletons() {
        let s = SignMatrix::dense(2);
        assert_eq!(s.rows(), &[vec![1, 1], vec![1, -1], vec![-1, 1], vec![-1, -1]]);
        let m = two_psi_model(vec![vec![0], vec![1], vec![2], vec![3]], s.rows().to_vec());
        assert!(validate_model(&m).is_empty());
    }

    #[test]
    fn duplicate_and_uncovered_rows_reported() {
        let m = two_psi_model(vec![vec![0], vec![1], vec![2]], vec![vec![1, 1], vec![1, 1], vec![-1, 1], vec![-1, -1]]);
        let v = validate_model(&m);
        assert!(v.contains(&Violation::DuplicateRow { row: 1, first: 0 }));
        assert!(v.contains(&Violation::UncoveredBaseSet { row: 3 }));
    }

    #[test]
    fn region_algebra_rules() {
        let a = Expr::var(0);
        let b = Expr::var(1);
        let at = [0.25, 0.5];
        let ev = |op, ops: &[Expr]| region_algebra(op, ops).unwrap().eval(&at).unwrap();
        assert_eq!(ev(RegionOp::Union, &[a.clone(), b.clone()]), 0.75);
        assert_eq!(ev(RegionOp::Intersect, &[a.clone(), b.clone()]), 0.125);
        assert_eq!(ev(RegionOp::Complement, &[a.clone()]), 0.75);
        assert_eq!(ev(RegionOp::Difference, &[b, a]), 0.25);
    }
}
