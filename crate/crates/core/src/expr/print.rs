use alloc::format;
use alloc::string::String;

use super::{BinaryOp, Node, UnaryOp, VarSet};

// additive < multiplicative < unary minus < power < atom
fn precedence(node: &Node) -> u8 {
    match node {
        Node::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
        Node::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
        Node::Unary(UnaryOp::Neg, _) => 3,
        Node::Const(c) if c.is_sign_negative() => 3,
        Node::Binary(BinaryOp::Pow, ..) => 4,
        _ => 5,
    }
}

/// Canonical infix text; reparses to the same tree.
pub(super) fn render(node: &Node, vars: Option<&VarSet>) -> String {
    let mut out = String::new();
    write(node, vars, &mut out);
    out
}

fn write_wrapped(node: &Node, vars: Option<&VarSet>, wrap: bool, out: &mut String) {
    if wrap {
        out.push('(');
        write(node, vars, out);
        out.push(')');
    } else {
        write(node, vars, out);
    }
}

fn write(node: &Node, vars: Option<&VarSet>, out: &mut String) {
    match node {
        Node::Const(c) => out.push_str(&format!("{c:?}")),
        Node::Var(i) => match vars.and_then(|v| v.names().get(*i)) {
            Some(name) => out.push_str(name),
            None => out.push_str(&format!("${i}")),
        },
        Node::Unary(UnaryOp::Neg, a) => {
            out.push('-');
            // `-(-x)` and `-(-2.0)` need parentheses to survive a reparse
            write_wrapped(a, vars, precedence(a) <= 3, out);
        }
        Node::Unary(op, a) => {
            out.push_str(op.name());
            out.push('(');
            write(a, vars, out);
            out.push(')');
        }
        Node::Binary(op, l, r) => {
            let p = precedence(node);
            let (wrap_l, wrap_r) = match op {
                // right-associative: the base needs parentheses at equal precedence
                BinaryOp::Pow => (precedence(l) <= p, precedence(r) < 3),
                BinaryOp::Add | BinaryOp::Mul => (precedence(l) < p, precedence(r) <= p),
                BinaryOp::Sub | BinaryOp::Div => (precedence(l) < p, precedence(r) <= p),
            };
            write_wrapped(l, vars, wrap_l, out);
            out.push_str(match op {
                BinaryOp::Add => " + ",
                BinaryOp::Sub => " - ",
                BinaryOp::Mul => "*",
                BinaryOp::Div => "/",
                BinaryOp::Pow => "^",
            });
            write_wrapped(r, vars, wrap_r, out);
        }
    }
}
