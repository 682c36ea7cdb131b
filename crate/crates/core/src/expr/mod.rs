//! Analytic scalar expressions over a declared variable set.
//!
//! Expressions are parsed once into an immutable [`Expr`] whose variable
//! references are resolved to slot indices. Evaluation is generic over
//! [`Scalar`], so first and second derivatives come from forward-mode dual
//! numbers rather than symbolic manipulation.
//!
//! Grammar (EBNF):
//!
//! ```text
//! expr    = term , { ("+" | "-") , term } ;
//! term    = unary , { ("*" | "/") , unary } ;
//! unary   = ("-" | "+") , unary | power ;
//! power   = primary , [ "^" , unary ] ;
//! primary = number | ident | ident , "(" , expr , ")" | "(" , expr , ")" ;
//! ident   = letter , { letter | digit | "_" } ;
//! number  = digit , { digit } , [ "." , { digit } ] , [ ("e" | "E") , [ "+" | "-" ] , digit , { digit } ] ;
//! ```
//!
//! Functions: `sin cos exp ln sqrt tanh`, each of arity one.

mod parse;
mod print;

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::scalar::{Dual, Dual64, Scalar};

pub use parse::ParseError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Tanh,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Tanh => "tanh",
        }
    }

    pub(crate) fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "exp" => UnaryOp::Exp,
            "ln" => UnaryOp::Ln,
            "sqrt" => UnaryOp::Sqrt,
            "tanh" => UnaryOp::Tanh,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    pub fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
            BinaryOp::Pow => '^',
        }
    }
}

/// Expression tree node; variables are slot indices into the owning [`VarSet`].
#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
}

impl Node {
    pub fn depth(&self) -> usize {
        match self {
            Node::Const(_) | Node::Var(_) => 1,
            Node::Unary(_, a) => 1 + a.depth(),
            Node::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    fn uses(&self, out: &mut Vec<bool>) {
        match self {
            Node::Const(_) => {}
            Node::Var(i) => out[*i] = true,
            Node::Unary(_, a) => a.uses(out),
            Node::Binary(_, a, b) => {
                a.uses(out);
                b.uses(out);
            }
        }
    }

    fn remap(&self, map: &[usize]) -> Node {
        match self {
            Node::Const(c) => Node::Const(*c),
            Node::Var(i) => Node::Var(map[*i]),
            Node::Unary(op, a) => Node::Unary(*op, Box::new(a.remap(map))),
            Node::Binary(op, a, b) => Node::Binary(*op, Box::new(a.remap(map)), Box::new(b.remap(map))),
        }
    }
}

/// Ordered list of variable names an expression may reference.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct VarSet {
    names: Vec<String>,
}

impl VarSet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        VarSet { names: names.into_iter().map(Into::into).collect() }
    }

    /// `x1..xn` followed by `extra` names.
    pub fn coords_and(n: usize, extra: &[&str]) -> Self {
        let mut names: Vec<String> = (1..=n).map(|i| alloc::format!("x{i}")).collect();
        names.extend(extra.iter().map(|s| s.to_string()));
        VarSet { names }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("domain error in `{subexpr}`: {reason}")]
    Domain { subexpr: String, reason: &'static str },
    #[error("expected {expected} bindings, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("variable `{0}` is not bound")]
    Unbound(String),
}

/// Parsed, immutable expression together with its variable set.
#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    root: Node,
    vars: VarSet,
}

impl Expr {
    pub fn parse(source: &str, vars: &VarSet) -> Result<Self, ParseError> {
        let root = parse::parse(source, vars)?;
        Ok(Expr { root, vars: vars.clone() })
    }

    pub fn from_node(root: Node, vars: VarSet) -> Self {
        Expr { root, vars }
    }

    pub fn constant(c: f64, vars: &VarSet) -> Self {
        Expr { root: Node::Const(c), vars: vars.clone() }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    /// Names of variables actually referenced.
    pub fn used_vars(&self) -> Vec<&str> {
        let mut used = alloc::vec![false; self.vars.len()];
        self.root.uses(&mut used);
        self.vars.names().iter().zip(used).filter(|(_, u)| *u).map(|(n, _)| n.as_str()).collect()
    }

    /// True when the expression is the literal constant zero.
    pub fn is_zero(&self) -> bool {
        matches!(self.root, Node::Const(c) if c == 0.0)
    }

    /// Substitute the variable `name` of `self` by the expression `inner`.
    /// The result is declared over `inner`'s variables followed by the
    /// remaining variables of `self` not already present.
    pub fn compose(&self, name: &str, inner: &Expr) -> Result<Expr, EvalError> {
        let slot = self.vars.index_of(name).ok_or_else(|| EvalError::Unbound(name.to_string()))?;
        let mut vars = inner.vars.clone();
        for n in self.vars.names() {
            if n != name && vars.index_of(n).is_none() {
                vars.names.push(n.clone());
            }
        }
        let map: Vec<usize> = self.vars.names().iter().map(|n| vars.index_of(n).unwrap_or(usize::MAX)).collect();
        let root = substitute(&self.root, slot, &inner.root, &map);
        Ok(Expr { root, vars })
    }

    /// Re-express over a different variable set; every used variable must exist there.
    pub fn rebind(&self, target: &VarSet) -> Result<Expr, EvalError> {
        let mut used = alloc::vec![false; self.vars.len()];
        self.root.uses(&mut used);
        let mut map = alloc::vec![usize::MAX; self.vars.len()];
        for (i, name) in self.vars.names().iter().enumerate() {
            match target.index_of(name) {
                Some(j) => map[i] = j,
                None if used[i] => return Err(EvalError::Unbound(name.clone())),
                None => {}
            }
        }
        Ok(Expr { root: self.root.remap(&map), vars: target.clone() })
    }

    pub fn eval<S: Scalar>(&self, bindings: &[S]) -> Result<S, EvalError> {
        if bindings.len() != self.vars.len() {
            return Err(EvalError::Arity { expected: self.vars.len(), got: bindings.len() });
        }
        eval_node(&self.root, bindings)
            .map_err(|(node, reason)| EvalError::Domain { subexpr: print::render(node, Some(&self.vars)), reason })
    }

    pub fn eval_f64(&self, bindings: &[f64]) -> Result<f64, EvalError> {
        self.eval(bindings)
    }

    /// Value and requested first/second derivatives from named bindings.
    pub fn eval_dual(
        &self,
        bindings: &BTreeMap<String, f64>,
        wanted: &DerivativeRequest,
    ) -> Result<DualValue, EvalError> {
        let mut point = Vec::with_capacity(self.vars.len());
        for name in self.vars.names() {
            let v = bindings.get(name).ok_or_else(|| EvalError::Unbound(name.clone()))?;
            point.push(*v);
        }
        let slot = |name: &str| self.vars.index_of(name).ok_or_else(|| EvalError::Unbound(name.to_string()));
        let value = self.eval(&point)?;
        let mut first = BTreeMap::new();
        for name in &wanted.first {
            let i = slot(name)?;
            let d = self.eval(&Dual64::seeded(&point, Some(i)))?;
            first.insert(name.clone(), d.eps);
        }
        let mut second = BTreeMap::new();
        for (a, b) in &wanted.second {
            let (i, j) = (slot(a)?, slot(b)?);
            let lifted: Vec<Dual<Dual64>> = point
                .iter()
                .enumerate()
                .map(|(k, &x)| {
                    let inner = if k == j { Dual64::var(x) } else { Dual64::constant(x) };
                    let outer = if k == i { Dual64::cst(1.0) } else { Dual64::cst(0.0) };
                    Dual::new(inner, outer)
                })
                .collect();
            let d = self.eval(&lifted)?;
            second.insert((a.clone(), b.clone()), d.eps.eps);
        }
        Ok(DualValue { value, first, second })
    }
}

fn substitute(node: &Node, slot: usize, with: &Node, map: &[usize]) -> Node {
    match node {
        Node::Const(c) => Node::Const(*c),
        Node::Var(i) if *i == slot => with.clone(),
        Node::Var(i) => Node::Var(map[*i]),
        Node::Unary(op, a) => Node::Unary(*op, Box::new(substitute(a, slot, with, map))),
        Node::Binary(op, a, b) => {
            Node::Binary(*op, Box::new(substitute(a, slot, with, map)), Box::new(substitute(b, slot, with, map)))
        }
    }
}

/// Which derivatives [`Expr::eval_dual`] should compute.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DerivativeRequest {
    pub first: Vec<String>,
    pub second: Vec<(String, String)>,
}

impl DerivativeRequest {
    pub fn first<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        DerivativeRequest { first: names.into_iter().map(Into::into).collect(), second: Vec::new() }
    }

    pub fn with_second(mut self, a: &str, b: &str) -> Self {
        self.second.push((a.to_string(), b.to_string()));
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualValue {
    pub value: f64,
    pub first: BTreeMap<String, f64>,
    pub second: BTreeMap<(String, String), f64>,
}

type Fault<'a> = (&'a Node, &'static str);

fn domain<'a>(node: &'a Node, reason: &'static str) -> Fault<'a> {
    (node, reason)
}

fn integer_exponent(node: &Node) -> Option<i32> {
    match node {
        Node::Const(c) if libm::trunc(*c) == *c && libm::fabs(*c) <= 64.0 => Some(*c as i32),
        Node::Unary(UnaryOp::Neg, a) => integer_exponent(a).map(|k| -k),
        _ => None,
    }
}

fn eval_node<'a, S: Scalar>(node: &'a Node, b: &[S]) -> Result<S, Fault<'a>> {
    let out = match node {
        Node::Const(c) => return Ok(S::cst(*c)),
        Node::Var(i) => return Ok(b[*i]),
        Node::Unary(op, a) => {
            let x = eval_node(a, b)?;
            match op {
                UnaryOp::Neg => -x,
                UnaryOp::Sin => x.sin(),
                UnaryOp::Cos => x.cos(),
                UnaryOp::Exp => x.exp(),
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Ln => {
                    if x.re() <= 0.0 {
                        return Err(domain(node, "logarithm of a non-positive value"));
                    }
                    x.ln()
                }
                UnaryOp::Sqrt => {
                    if x.re() < 0.0 {
                        return Err(domain(node, "square root of a negative value"));
                    }
                    x.sqrt()
                }
            }
        }
        Node::Binary(op, l, r) => {
            let x = eval_node(l, b)?;
            match op {
                BinaryOp::Pow => match integer_exponent(r) {
                    Some(k) => {
                        if k < 0 && x.re() == 0.0 {
                            return Err(domain(node, "zero raised to a negative power"));
                        }
                        x.powi(k)
                    }
                    None => {
                        let y = eval_node(r, b)?;
                        if x.re() <= 0.0 {
                            return Err(domain(node, "non-integer power of a non-positive base"));
                        }
                        (y * x.ln()).exp()
                    }
                },
                _ => {
                    let y = eval_node(r, b)?;
                    match op {
                        BinaryOp::Add => x + y,
                        BinaryOp::Sub => x - y,
                        BinaryOp::Mul => x * y,
                        BinaryOp::Div => {
                            if y.re() == 0.0 {
                                return Err(domain(node, "division by zero"));
                            }
                            x / y
                        }
                        BinaryOp::Pow => unreachable!(),
                    }
                }
            }
        }
    };
    if !out.is_finite() {
        return Err(domain(node, "non-finite result"));
    }
    Ok(out)
}

impl core::fmt::Display for Expr {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&print::render(&self.root, Some(&self.vars)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn vs(names: &[&str]) -> VarSet {
        VarSet::new(names.iter().copied())
    }

    #[test]
    fn parses_difference_of_variables() {
        let vars = vs(&["x1", "x2", "x3", "v"]);
        let e = Expr::parse("v - x3", &vars).unwrap();
        assert_eq!(*e.root(), Node::Binary(BinaryOp::Sub, Box::new(Node::Var(3)), Box::new(Node::Var(2))));
    }

    #[test]
    fn undeclared_variable_is_reported() {
        let vars = vs(&["x1", "x2", "x3", "w"]);
        let err = Expr::parse("w + (1 - w) * phi", &vars).unwrap_err();
        assert!(err.to_string().contains("unknown variable phi"), "{err}");
        assert_eq!(err.offset(), 14);
    }

    #[test]
    fn exp_times_speed_hand_value() {
        let vars = vs(&["x1", "v"]);
        let e = Expr::parse("exp(0.1*x1)*v", &vars).unwrap();
        assert_eq!(e.eval_f64(&[0.0, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn square_derivative() {
        let vars = vs(&["x1"]);
        let e = Expr::parse("x1*x1", &vars).unwrap();
        let mut b = BTreeMap::new();
        b.insert("x1".to_string(), 3.0);
        let d = e.eval_dual(&b, &DerivativeRequest::first(["x1"])).unwrap();
        assert_eq!(d.value, 9.0);
        assert_eq!(d.first["x1"], 6.0);
    }

    #[test]
    fn linear_derivative_in_speed() {
        let vars = vs(&["x3", "v"]);
        let e = Expr::parse("v - x3", &vars).unwrap();
        let mut b = BTreeMap::new();
        b.insert("v".to_string(), 1.5);
        b.insert("x3".to_string(), 0.2);
        let d = e.eval_dual(&b, &DerivativeRequest::first(["v"])).unwrap();
        assert_eq!(d.first["v"], 1.0);
    }

    #[test]
    fn exponential_derivative_matches_central_difference() {
        let vars = vs(&["x1"]);
        let e = Expr::parse("exp(0.1*x1)", &vars).unwrap();
        let mut b = BTreeMap::new();
        b.insert("x1".to_string(), 2.0);
        let d = e.eval_dual(&b, &DerivativeRequest::first(["x1"])).unwrap();
        let exact = 0.1 * libm::exp(0.2);
        assert!((d.first["x1"] - exact).abs() < 1e-15);
        let h = 1e-6;
        let fd = (e.eval_f64(&[2.0 + h]).unwrap() - e.eval_f64(&[2.0 - h]).unwrap()) / (2.0 * h);
        assert!((fd - d.first["x1"]).abs() <= 1e-9);
    }

    #[test]
    fn second_derivative_block() {
        let vars = vs(&["x", "y"]);
        let e = Expr::parse("x^2*y + sin(y)", &vars).unwrap();
        let mut b = BTreeMap::new();
        b.insert("x".to_string(), 1.5);
        b.insert("y".to_string(), 0.3);
        let req = DerivativeRequest::first(["x"]).with_second("x", "y").with_second("y", "y");
        let d = e.eval_dual(&b, &req).unwrap();
        assert!((d.second[&("x".into(), "y".into())] - 3.0).abs() < 1e-14);
        assert!((d.second[&("y".into(), "y".into())] + libm::sin(0.3)).abs() < 1e-14);
    }

    #[test]
    fn domain_errors_are_hard() {
        let vars = vs(&["x"]);
        let ln = Expr::parse("1 + ln(x)", &vars).unwrap();
        match ln.eval_f64(&[-1.0]) {
            Err(EvalError::Domain { subexpr, .. }) => assert_eq!(subexpr, "ln(x)"),
            other => panic!("{other:?}"),
        }
        let div = Expr::parse("1/(x - 2)", &vars).unwrap();
        assert!(matches!(div.eval_f64(&[2.0]), Err(EvalError::Domain { .. })));
        let pow = Expr::parse("x^0.5", &vars).unwrap();
        assert!(pow.eval_f64(&[-4.0]).is_err());
        let ipow = Expr::parse("x^3", &vars).unwrap();
        assert_eq!(ipow.eval_f64(&[-2.0]).unwrap(), -8.0);
    }

    #[test]
    fn compose_substitutes_variable() {
        let w_vars = vs(&["w"]);
        let rho = Expr::parse("2*w + 1", &w_vars).unwrap();
        let inner_vars = vs(&["x1", "v"]);
        let inner = Expr::parse("v - x1", &inner_vars).unwrap();
        let c = rho.compose("w", &inner).unwrap();
        assert_eq!(c.vars().names(), &["x1".to_string(), "v".to_string()]);
        assert_eq!(c.eval_f64(&[0.5, 3.0]).unwrap(), 6.0);
    }

    #[test]
    fn used_vars_lists_references() {
        let vars = vs(&["x1", "x2", "v"]);
        let e = Expr::parse("x2 * v", &vars).unwrap();
        assert_eq!(e.used_vars(), vec!["x2", "v"]);
    }
}
