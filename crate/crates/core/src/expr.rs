//! Scalar expression graphs.
//!
//! An [`Expr`] is an immutable, reference-counted DAG node. Shared
//! subexpressions stay shared: compiling a set of expressions into a
//! [`Tape`] visits each distinct node once, and evaluation plus sparse
//! forward-mode differentiation run over that tape.
//!
//! Variables are plain indices. A [`ResidualBundle`] splits the index space
//! into unknowns `[0, n_vars)` followed by parameters `[n_vars, n_vars + n_params)`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Elementary smooth functions available in expressions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => libm::sin(v),
            Func::Cos => libm::cos(v),
            Func::Exp => libm::exp(v),
            Func::Sqrt => libm::sqrt(v),
        }
    }
}

/// Node kinds of the expression graph.
#[derive(Debug)]
pub enum Node {
    Const(f64),
    Var(usize),
    Sum(Vec<Expr>),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Neg(Expr),
    Func(Func, Expr),
    /// Nonsmooth; only for oracle-style evaluation, rejected by differentiation.
    Min(Expr, Expr),
    /// Nonsmooth; only for oracle-style evaluation, rejected by differentiation.
    Max(Expr, Expr),
}

#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

impl Expr {
    fn new(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn constant(v: f64) -> Self {
        Expr::new(Node::Const(v))
    }

    pub fn zero() -> Self {
        Expr::constant(0.0)
    }

    pub fn one() -> Self {
        Expr::constant(1.0)
    }

    pub fn var(i: usize) -> Self {
        Expr::new(Node::Var(i))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Node::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_const(&self, v: f64) -> bool {
        self.as_const() == Some(v)
    }

    /// Identity of the underlying node, used to deduplicate shared subgraphs.
    pub fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// n-ary sum; constants are folded and zero terms dropped.
    pub fn sum<I: IntoIterator<Item = Expr>>(terms: I) -> Expr {
        let mut c = 0.0;
        let mut rest: Vec<Expr> = Vec::new();
        for t in terms {
            match t.as_const() {
                Some(v) => c += v,
                None => rest.push(t),
            }
        }
        if c != 0.0 {
            rest.push(Expr::constant(c));
        }
        match rest.len() {
            0 => Expr::zero(),
            1 => rest.pop().unwrap(),
            _ => Expr::new(Node::Sum(rest)),
        }
    }

    /// Product of several factors, folded left to right.
    pub fn product<I: IntoIterator<Item = Expr>>(factors: I) -> Expr {
        let mut acc: Option<Expr> = None;
        for f in factors {
            acc = Some(match acc {
                None => f,
                Some(a) => a * f,
            });
        }
        acc.unwrap_or_else(Expr::one)
    }

    /// Integer power, expanded into repeated multiplication (negative exponents divide).
    pub fn powi(&self, n: i32) -> Expr {
        if n == 0 {
            return Expr::one();
        }
        if let Some(c) = self.as_const() {
            return Expr::constant(libm::pow(c, n as f64));
        }
        let mut k = n.unsigned_abs();
        // square-and-multiply keeps the node count logarithmic in |n|
        let mut base = self.clone();
        let mut acc: Option<Expr> = None;
        while k > 0 {
            if k & 1 == 1 {
                acc = Some(match acc {
                    None => base.clone(),
                    Some(a) => a * base.clone(),
                });
            }
            k >>= 1;
            if k > 0 {
                base = base.clone() * base;
            }
        }
        let p = acc.unwrap();
        if n < 0 {
            Expr::one() / p
        } else {
            p
        }
    }

    pub fn apply(f: Func, a: Expr) -> Expr {
        if let Some(c) = a.as_const() {
            return Expr::constant(f.apply(c));
        }
        Expr::new(Node::Func(f, a))
    }

    pub fn sin(&self) -> Expr {
        Expr::apply(Func::Sin, self.clone())
    }

    pub fn cos(&self) -> Expr {
        Expr::apply(Func::Cos, self.clone())
    }

    pub fn exp(&self) -> Expr {
        Expr::apply(Func::Exp, self.clone())
    }

    pub fn sqrt(&self) -> Expr {
        Expr::apply(Func::Sqrt, self.clone())
    }

    pub fn min2(&self, other: &Expr) -> Expr {
        match (self.as_const(), other.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a.min(b)),
            _ => Expr::new(Node::Min(self.clone(), other.clone())),
        }
    }

    pub fn max2(&self, other: &Expr) -> Expr {
        match (self.as_const(), other.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a.max(b)),
            _ => Expr::new(Node::Max(self.clone(), other.clone())),
        }
    }

    /// Smoothed Fischer-Burmeister function `a + b - sqrt(a^2 + b^2 + 2 sigma)`.
    pub fn fischer_burmeister(a: &Expr, b: &Expr, sigma: &Expr) -> Expr {
        let r = Expr::sum([a.clone() * a.clone(), b.clone() * b.clone(), Expr::constant(2.0) * sigma.clone()]);
        Expr::sum([a.clone(), b.clone(), -r.sqrt()])
    }

    /// Largest variable index referenced plus one (0 for constant expressions).
    pub fn var_bound(&self) -> usize {
        let mut seen = BTreeMap::new();
        let mut bound = 0usize;
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if seen.insert(e.ptr_id(), ()).is_some() {
                continue;
            }
            match e.node() {
                Node::Const(_) => {}
                Node::Var(i) => bound = bound.max(i + 1),
                _ => stack.extend(children(&e).into_iter()),
            }
        }
        bound
    }

    /// Whether the graph contains min/max nodes.
    pub fn is_nonsmooth(&self) -> bool {
        let mut seen = BTreeMap::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if seen.insert(e.ptr_id(), ()).is_some() {
                continue;
            }
            match e.node() {
                Node::Min(..) | Node::Max(..) => return true,
                _ => stack.extend(children(&e).into_iter()),
            }
        }
        false
    }

    /// Evaluate a single expression at `inputs`.
    pub fn eval(&self, inputs: &[f64]) -> Result<f64> {
        let tape = Tape::compile(core::slice::from_ref(self), inputs.len())?;
        Ok(tape.eval(inputs)?[0])
    }

    /// Render with a custom variable naming.
    pub fn display_with<'a>(&'a self, names: &'a dyn Fn(usize) -> String) -> DisplayWith<'a> {
        DisplayWith { expr: self, names }
    }
}

fn children(e: &Expr) -> Vec<Expr> {
    match e.node() {
        Node::Const(_) | Node::Var(_) => Vec::new(),
        Node::Sum(ts) => ts.clone(),
        Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Min(a, b) | Node::Max(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Node::Neg(a) | Node::Func(_, a) => vec![a.clone()],
    }
}

impl From<f64> for Expr {
    fn from(v: f64) -> Self {
        Expr::constant(v)
    }
}

impl Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a + b),
            (Some(a), _) if a == 0.0 => rhs,
            (_, Some(b)) if b == 0.0 => self,
            _ => Expr::new(Node::Sum(vec![self, rhs])),
        }
    }
}

impl Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a - b),
            (Some(a), _) if a == 0.0 => -rhs,
            (_, Some(b)) if b == 0.0 => self,
            _ => Expr::new(Node::Sub(self, rhs)),
        }
    }
}

impl Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a * b),
            (Some(a), _) if a == 0.0 => Expr::zero(),
            (_, Some(b)) if b == 0.0 => Expr::zero(),
            (Some(a), _) if a == 1.0 => rhs,
            (_, Some(b)) if b == 1.0 => self,
            (Some(a), _) if a == -1.0 => -rhs,
            (_, Some(b)) if b == -1.0 => -self,
            _ => Expr::new(Node::Mul(self, rhs)),
        }
    }
}

impl Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a / b),
            (Some(a), _) if a == 0.0 => Expr::zero(),
            (_, Some(b)) if b == 1.0 => self,
            _ => Expr::new(Node::Div(self, rhs)),
        }
    }
}

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        match self.node() {
            Node::Const(v) => Expr::constant(-v),
            Node::Neg(inner) => inner.clone(),
            _ => Expr::new(Node::Neg(self)),
        }
    }
}

macro_rules! forward_ref_ops {
    ($($tr:ident :: $m:ident),*) => {$(
        impl $tr<&Expr> for &Expr {
            type Output = Expr;
            fn $m(self, rhs: &Expr) -> Expr { $tr::$m(self.clone(), rhs.clone()) }
        }
        impl $tr<&Expr> for Expr {
            type Output = Expr;
            fn $m(self, rhs: &Expr) -> Expr { $tr::$m(self, rhs.clone()) }
        }
        impl $tr<Expr> for &Expr {
            type Output = Expr;
            fn $m(self, rhs: Expr) -> Expr { $tr::$m(self.clone(), rhs) }
        }
        impl $tr<f64> for Expr {
            type Output = Expr;
            fn $m(self, rhs: f64) -> Expr { $tr::$m(self, Expr::constant(rhs)) }
        }
        impl $tr<f64> for &Expr {
            type Output = Expr;
            fn $m(self, rhs: f64) -> Expr { $tr::$m(self.clone(), Expr::constant(rhs)) }
        }
        impl $tr<Expr> for f64 {
            type Output = Expr;
            fn $m(self, rhs: Expr) -> Expr { $tr::$m(Expr::constant(self), rhs) }
        }
        impl $tr<&Expr> for f64 {
            type Output = Expr;
            fn $m(self, rhs: &Expr) -> Expr { $tr::$m(Expr::constant(self), rhs.clone()) }
        }
    )*};
}
forward_ref_ops!(Add::add, Sub::sub, Mul::mul, Div::div);

impl Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        -(self.clone())
    }
}

pub struct DisplayWith<'a> {
    expr: &'a Expr,
    names: &'a dyn Fn(usize) -> String,
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr, names: &dyn Fn(usize) -> String) -> fmt::Result {
    match e.node() {
        Node::Const(v) => {
            if *v < 0.0 {
                write!(f, "({:e})", v)
            } else {
                write!(f, "{:e}", v)
            }
        }
        Node::Var(i) => f.write_str(&names(*i)),
        Node::Sum(ts) => {
            f.write_str("(")?;
            for (k, t) in ts.iter().enumerate() {
                if k > 0 {
                    f.write_str(" + ")?;
                }
                write_expr(f, t, names)?;
            }
            f.write_str(")")
        }
        Node::Sub(a, b) => bin(f, a, " - ", b, names),
        Node::Mul(a, b) => bin(f, a, " * ", b, names),
        Node::Div(a, b) => bin(f, a, " / ", b, names),
        Node::Neg(a) => {
            f.write_str("(-")?;
            write_expr(f, a, names)?;
            f.write_str(")")
        }
        Node::Func(func, a) => {
            write!(f, "{}(", func.name())?;
            write_expr(f, a, names)?;
            f.write_str(")")
        }
        Node::Min(a, b) => call2(f, "min", a, b, names),
        Node::Max(a, b) => call2(f, "max", a, b, names),
    }
}

fn bin(f: &mut fmt::Formatter<'_>, a: &Expr, op: &str, b: &Expr, names: &dyn Fn(usize) -> String) -> fmt::Result {
    f.write_str("(")?;
    write_expr(f, a, names)?;
    f.write_str(op)?;
    write_expr(f, b, names)?;
    f.write_str(")")
}

fn call2(f: &mut fmt::Formatter<'_>, name: &str, a: &Expr, b: &Expr, names: &dyn Fn(usize) -> String) -> fmt::Result {
    write!(f, "{}(", name)?;
    write_expr(f, a, names)?;
    f.write_str(", ")?;
    write_expr(f, b, names)?;
    f.write_str(")")
}

impl fmt::Display for DisplayWith<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self.expr, self.names)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = |i: usize| alloc::format!("v{}", i);
        write_expr(f, self, &names)
    }
}

/// Rewrites variables into other expressions while preserving DAG sharing.
///
/// One `Substitution` can be applied to many expressions; nodes shared between
/// them are rewritten once.
pub struct Substitution<'a> {
    map: &'a dyn Fn(usize) -> Expr,
    cache: BTreeMap<usize, Expr>,
    // keeps source nodes alive so cached pointer keys cannot be reused
    keep: Vec<Expr>,
}

impl<'a> Substitution<'a> {
    pub fn new(map: &'a dyn Fn(usize) -> Expr) -> Self {
        Substitution { map, cache: BTreeMap::new(), keep: Vec::new() }
    }

    pub fn apply(&mut self, e: &Expr) -> Expr {
        if let Some(r) = self.cache.get(&e.ptr_id()) {
            return r.clone();
        }
        let out = match e.node() {
            Node::Const(_) => e.clone(),
            Node::Var(i) => (self.map)(*i),
            Node::Sum(ts) => {
                let ts: Vec<Expr> = ts.iter().map(|t| self.apply(t)).collect();
                Expr::sum(ts)
            }
            Node::Sub(a, b) => self.apply(a) - self.apply(b),
            Node::Mul(a, b) => self.apply(a) * self.apply(b),
            Node::Div(a, b) => self.apply(a) / self.apply(b),
            Node::Neg(a) => -self.apply(a),
            Node::Func(f, a) => Expr::apply(*f, self.apply(a)),
            Node::Min(a, b) => self.apply(a).min2(&self.apply(b)),
            Node::Max(a, b) => self.apply(a).max2(&self.apply(b)),
        };
        self.cache.insert(e.ptr_id(), out.clone());
        self.keep.push(e.clone());
        out
    }
}

/// Convenience wrapper around [`Substitution`] for a single expression.
pub fn substitute(e: &Expr, map: &dyn Fn(usize) -> Expr) -> Expr {
    Substitution::new(map).apply(e)
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(f64),
    Var(u32),
    Sum(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Func(Func, u32),
    Min(u32, u32),
    Max(u32, u32),
}

/// Sparse gradient rows: for each output, `(input index, partial derivative)`.
pub type SparseRows = Vec<Vec<(u32, f64)>>;

/// A linearized evaluation schedule for a set of expressions.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    args: Vec<u32>,
    outputs: Vec<u32>,
    n_inputs: usize,
    nonsmooth: bool,
}

impl Tape {
    pub fn compile(exprs: &[Expr], n_inputs: usize) -> Result<Tape> {
        let mut slots: BTreeMap<usize, u32> = BTreeMap::new();
        let mut tape = Tape { ops: Vec::new(), args: Vec::new(), outputs: Vec::new(), n_inputs, nonsmooth: false };
        // iterative post-order traversal; deep chains must not overflow the stack
        for root in exprs {
            let mut stack: Vec<(Expr, bool)> = vec![(root.clone(), false)];
            while let Some((e, expanded)) = stack.pop() {
                if slots.contains_key(&e.ptr_id()) {
                    continue;
                }
                if !expanded {
                    stack.push((e.clone(), true));
                    for c in children(&e) {
                        if !slots.contains_key(&c.ptr_id()) {
                            stack.push((c, false));
                        }
                    }
                    continue;
                }
                let s = |x: &Expr| slots[&x.ptr_id()];
                let op = match e.node() {
                    Node::Const(v) => Op::Const(*v),
                    Node::Var(i) => {
                        if *i >= n_inputs {
                            return Err(Error::Dimension(alloc::format!(
                                "variable index {} out of range (inputs: {})",
                                i, n_inputs
                            )));
                        }
                        Op::Var(*i as u32)
                    }
                    Node::Sum(ts) => {
                        let start = tape.args.len() as u32;
                        for t in ts {
                            tape.args.push(s(t));
                        }
                        Op::Sum(start, ts.len() as u32)
                    }
                    Node::Sub(a, b) => Op::Sub(s(a), s(b)),
                    Node::Mul(a, b) => Op::Mul(s(a), s(b)),
                    Node::Div(a, b) => Op::Div(s(a), s(b)),
                    Node::Neg(a) => Op::Neg(s(a)),
                    Node::Func(f, a) => Op::Func(*f, s(a)),
                    Node::Min(a, b) => {
                        tape.nonsmooth = true;
                        Op::Min(s(a), s(b))
                    }
                    Node::Max(a, b) => {
                        tape.nonsmooth = true;
                        Op::Max(s(a), s(b))
                    }
                };
                let id = tape.ops.len() as u32;
                tape.ops.push(op);
                slots.insert(e.ptr_id(), id);
            }
            tape.outputs.push(slots[&root.ptr_id()]);
        }
        Ok(tape)
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn check_inputs(&self, inputs: &[f64]) -> Result<()> {
        if inputs.len() != self.n_inputs {
            return Err(Error::Dimension(alloc::format!(
                "expected {} inputs, got {}",
                self.n_inputs,
                inputs.len()
            )));
        }
        Ok(())
    }

    fn forward_values(&self, inputs: &[f64]) -> Vec<f64> {
        let mut vals = vec![0.0; self.ops.len()];
        for (k, op) in self.ops.iter().enumerate() {
            vals[k] = match *op {
                Op::Const(v) => v,
                Op::Var(i) => inputs[i as usize],
                Op::Sum(st, n) => {
                    let mut acc = 0.0;
                    for &a in &self.args[st as usize..(st + n) as usize] {
                        acc += vals[a as usize];
                    }
                    acc
                }
                Op::Sub(a, b) => vals[a as usize] - vals[b as usize],
                Op::Mul(a, b) => vals[a as usize] * vals[b as usize],
                Op::Div(a, b) => vals[a as usize] / vals[b as usize],
                Op::Neg(a) => -vals[a as usize],
                Op::Func(f, a) => f.apply(vals[a as usize]),
                Op::Min(a, b) => vals[a as usize].min(vals[b as usize]),
                Op::Max(a, b) => vals[a as usize].max(vals[b as usize]),
            };
        }
        vals
    }

    fn collect_outputs(&self, vals: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.outputs.len());
        for (k, &o) in self.outputs.iter().enumerate() {
            let v = vals[o as usize];
            if v.is_nan() {
                return Err(Error::NanProduced { component: k });
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Evaluate all outputs.
    pub fn eval(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(inputs)?;
        let vals = self.forward_values(inputs);
        self.collect_outputs(&vals)
    }

    /// Values together with sparse gradients of every output with respect to every input.
    pub fn eval_with_gradients(&self, inputs: &[f64]) -> Result<(Vec<f64>, SparseRows)> {
        self.check_inputs(inputs)?;
        if self.nonsmooth {
            return Err(Error::NonSmooth);
        }
        let vals = self.forward_values(inputs);
        let mut ranges: Vec<(u32, u32)> = Vec::with_capacity(self.ops.len());
        let mut store: Vec<(u32, f64)> = Vec::new();
        let mut acc = vec![0.0; self.n_inputs];
        let mut mark = vec![false; self.n_inputs];
        let mut touched: Vec<u32> = Vec::new();

        for (k, op) in self.ops.iter().enumerate() {
            let mut push = |slot: u32, w: f64, store: &Vec<(u32, f64)>, ranges: &Vec<(u32, u32)>| {
                let (st, n) = ranges[slot as usize];
                for &(i, d) in &store[st as usize..(st + n) as usize] {
                    let iu = i as usize;
                    if !mark[iu] {
                        mark[iu] = true;
                        touched.push(i);
                    }
                    acc[iu] += w * d;
                }
            };
            match *op {
                Op::Const(_) => {}
                Op::Var(i) => {
                    let iu = i as usize;
                    mark[iu] = true;
                    touched.push(i);
                    acc[iu] = 1.0;
                }
                Op::Sum(st, n) => {
                    for &a in &self.args[st as usize..(st + n) as usize] {
                        push(a, 1.0, &store, &ranges);
                    }
                }
                Op::Sub(a, b) => {
                    push(a, 1.0, &store, &ranges);
                    push(b, -1.0, &store, &ranges);
                }
                Op::Mul(a, b) => {
                    push(a, vals[b as usize], &store, &ranges);
                    push(b, vals[a as usize], &store, &ranges);
                }
                Op::Div(a, b) => {
                    let vb = vals[b as usize];
                    push(a, 1.0 / vb, &store, &ranges);
                    push(b, -vals[a as usize] / (vb * vb), &store, &ranges);
                }
                Op::Neg(a) => push(a, -1.0, &store, &ranges),
                Op::Func(f, a) => {
                    let va = vals[a as usize];
                    let d = match f {
                        Func::Sin => libm::cos(va),
                        Func::Cos => -libm::sin(va),
                        Func::Exp => vals[k],
                        Func::Sqrt => {
                            if vals[k] <= 0.0 {
                                if ranges[a as usize].1 > 0 {
                                    return Err(Error::SqrtAtZero);
                                }
                                0.0
                            } else {
                                0.5 / vals[k]
                            }
                        }
                    };
                    push(a, d, &store, &ranges);
                }
                Op::Min(..) | Op::Max(..) => return Err(Error::NonSmooth),
            }
            let st = store.len() as u32;
            for &i in &touched {
                let iu = i as usize;
                store.push((i, acc[iu]));
                acc[iu] = 0.0;
                mark[iu] = false;
            }
            touched.clear();
            ranges.push((st, store.len() as u32 - st));
        }
        let values = self.collect_outputs(&vals)?;
        let rows = self
            .outputs
            .iter()
            .map(|&o| {
                let (st, n) = ranges[o as usize];
                store[st as usize..(st + n) as usize].to_vec()
            })
            .collect();
        Ok((values, rows))
    }
}

/// Role of a residual row; used for relaxation rules and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Dynamics,
    Algebraic,
    Complementarity,
    CrossComplementarity,
    Continuity,
    Equilibration,
    Horizon,
}

/// A list of residual expressions over unknowns followed by parameters.
#[derive(Clone, Debug)]
pub struct ResidualBundle {
    exprs: Vec<Expr>,
    tags: Vec<Category>,
    n_vars: usize,
    n_params: usize,
    tape: Tape,
}

impl ResidualBundle {
    pub fn new(exprs: Vec<Expr>, tags: Vec<Category>, n_vars: usize, n_params: usize) -> Result<Self> {
        if exprs.len() != tags.len() {
            return Err(Error::Dimension(alloc::format!(
                "{} residuals but {} tags",
                exprs.len(),
                tags.len()
            )));
        }
        let tape = Tape::compile(&exprs, n_vars + n_params)?;
        Ok(ResidualBundle { exprs, tags, n_vars, n_params, tape })
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.exprs
    }

    pub fn tags(&self) -> &[Category] {
        &self.tags
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn inputs(&self, vars: &[f64], params: &[f64]) -> Result<Vec<f64>> {
        if vars.len() != self.n_vars || params.len() != self.n_params {
            return Err(Error::Dimension(alloc::format!(
                "bundle expects {} vars and {} params, got {} and {}",
                self.n_vars,
                self.n_params,
                vars.len(),
                params.len()
            )));
        }
        let mut inp = Vec::with_capacity(vars.len() + params.len());
        inp.extend_from_slice(vars);
        inp.extend_from_slice(params);
        Ok(inp)
    }

    pub fn eval(&self, vars: &[f64], params: &[f64]) -> Result<Vec<f64>> {
        let inp = self.inputs(vars, params)?;
        self.tape.eval(&inp)
    }

    /// Residual values and sparse rows over all inputs (unknowns then parameters).
    pub fn eval_sparse(&self, vars: &[f64], params: &[f64]) -> Result<(Vec<f64>, SparseRows)> {
        let inp = self.inputs(vars, params)?;
        self.tape.eval_with_gradients(&inp)
    }

    /// Dense Jacobian with respect to the unknowns.
    pub fn jacobian(&self, vars: &[f64], params: &[f64]) -> Result<DMatrix<f64>> {
        let (_, rows) = self.eval_sparse(vars, params)?;
        Ok(dense_columns(&rows, 0, self.n_vars))
    }

    /// Dense Jacobian with respect to the parameters.
    pub fn jacobian_params(&self, vars: &[f64], params: &[f64]) -> Result<DMatrix<f64>> {
        let (_, rows) = self.eval_sparse(vars, params)?;
        Ok(dense_columns(&rows, self.n_vars, self.n_params))
    }
}

/// Scatter the columns `[offset, offset + n)` of sparse rows into a dense matrix.
pub fn dense_columns(rows: &SparseRows, offset: usize, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), n);
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            let c = c as usize;
            if c >= offset && c < offset + n {
                m[(r, c - offset)] += v;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(i: usize) -> Expr {
        Expr::var(i)
    }

    #[test]
    fn product_of_two_vars() {
        let e = x(0) * x(1);
        assert_eq!(e.eval(&[2.0, 3.0]).unwrap(), 6.0);
        let b = ResidualBundle::new(vec![e], vec![Category::Algebraic], 2, 0).unwrap();
        let j = b.jacobian(&[2.0, 3.0], &[]).unwrap();
        assert_eq!((j[(0, 0)], j[(0, 1)]), (3.0, 2.0));
    }

    #[test]
    fn sqrt_and_sin_derivatives() {
        assert_eq!(x(0).sqrt().eval(&[4.0]).unwrap(), 2.0);
        let b = ResidualBundle::new(vec![x(0).sin()], vec![Category::Algebraic], 1, 0).unwrap();
        assert_eq!(b.jacobian(&[0.0], &[]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn fischer_burmeister_values() {
        let fb = Expr::fischer_burmeister(&x(0), &x(1), &x(2));
        let v = fb.eval(&[1.0, 1.0, 0.0]).unwrap();
        assert!((v - (2.0 - libm::sqrt(2.0))).abs() < 1e-15);
        let b = ResidualBundle::new(vec![fb], vec![Category::Complementarity], 2, 1).unwrap();
        let j = b.jacobian(&[1.0, 1.0], &[1.0]).unwrap();
        assert!((j[(0, 0)] - 0.5).abs() < 1e-15 && (j[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shared_nodes_compile_once() {
        let s = x(0) * x(1);
        let e = &s + &s;
        let t = Tape::compile(&[e.clone(), s], 2).unwrap();
        // var0, var1, product, sum
        assert_eq!(t.len(), 4);
        assert_eq!(t.eval(&[2.0, 5.0]).unwrap(), vec![20.0, 10.0]);
    }

    #[test]
    fn min_max_rejected_by_differentiation() {
        let e = x(0).max2(&Expr::zero());
        assert_eq!(e.eval(&[-2.0]).unwrap(), 0.0);
        let t = Tape::compile(&[e], 1).unwrap();
        assert!(matches!(t.eval_with_gradients(&[1.0]), Err(Error::NonSmooth)));
    }

    #[test]
    fn sqrt_at_zero_with_dependence_is_an_error() {
        let t = Tape::compile(&[(x(0) * x(0)).sqrt()], 1).unwrap();
        assert!(matches!(t.eval_with_gradients(&[0.0]), Err(Error::SqrtAtZero)));
    }

    #[test]
    fn nan_reports_component() {
        let t = Tape::compile(&[x(0), x(0).sqrt()], 1).unwrap();
        assert!(matches!(t.eval(&[-1.0]), Err(Error::NanProduced { component: 1 })));
    }

    #[test]
    fn integer_powers_and_substitution() {
        let p = x(0).powi(5);
        assert_eq!(p.eval(&[2.0]).unwrap(), 32.0);
        assert_eq!(x(0).powi(-2).eval(&[2.0]).unwrap(), 0.25);
        let q = substitute(&(x(0) * x(1)), &|i| if i == 0 { x(1) + 1.0 } else { x(0) });
        assert_eq!(q.eval(&[3.0, 4.0]).unwrap(), 15.0);
    }

    #[test]
    fn out_of_range_variable_is_rejected() {
        assert!(Tape::compile(&[x(3)], 2).is_err());
        assert!(ResidualBundle::new(vec![x(0)], vec![Category::Algebraic], 1, 0)
            .unwrap()
            .eval(&[1.0, 2.0], &[])
            .is_err());
    }
}
