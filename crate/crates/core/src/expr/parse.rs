use alloc::boxed::Box;
use alloc::string::{String, ToString};

use super::{BinaryOp, Node, UnaryOp, VarSet};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown variable {name} at byte {offset}")]
    UnknownVariable { offset: usize, name: String },
    #[error("function {name} at byte {offset} takes 1 argument, got {got}")]
    Arity { offset: usize, name: String, got: usize },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownVariable { offset, .. }
            | ParseError::Arity { offset, .. } => *offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok<'a> {
    Num(f64),
    Ident(&'a str),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Next token and its starting byte offset.
    fn next(&mut self) -> Result<(Tok<'a>, usize), ParseError> {
        self.skip_ws();
        let bytes = self.src.as_bytes();
        let start = self.pos;
        if start >= bytes.len() {
            return Ok((Tok::End, start));
        }
        let c = bytes[start];
        let tok = match c {
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                self.pos += 1;
                Tok::Op(c as char)
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b',' => {
                self.pos += 1;
                Tok::Comma
            }
            b'0'..=b'9' | b'.' => {
                let mut end = start;
                while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
                    end += 1;
                }
                if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                    let mut k = end + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        while k < bytes.len() && bytes[k].is_ascii_digit() {
                            k += 1;
                        }
                        end = k;
                    }
                }
                let text = &self.src[start..end];
                let value = text.parse::<f64>().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: alloc::format!("malformed number `{text}`"),
                })?;
                self.pos = end;
                Tok::Num(value)
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut end = start;
                while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                    end += 1;
                }
                self.pos = end;
                Tok::Ident(&self.src[start..end])
            }
            _ => {
                let ch = self.src[start..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    message: alloc::format!("unexpected character `{ch}`"),
                });
            }
        };
        Ok((tok, start))
    }
}

struct Parser<'a, 'v> {
    lex: Lexer<'a>,
    tok: Tok<'a>,
    at: usize,
    vars: &'v VarSet,
}

pub(super) fn parse(src: &str, vars: &VarSet) -> Result<Node, ParseError> {
    let mut lex = Lexer { src, pos: 0 };
    let (tok, at) = lex.next()?;
    let mut p = Parser { lex, tok, at, vars };
    let node = p.expr()?;
    if p.tok != Tok::End {
        return Err(p.unexpected("end of expression"));
    }
    Ok(node)
}

impl<'a, 'v> Parser<'a, 'v> {
    fn bump(&mut self) -> Result<(), ParseError> {
        let (tok, at) = self.lex.next()?;
        self.tok = tok;
        self.at = at;
        Ok(())
    }

    fn unexpected(&self, wanted: &str) -> ParseError {
        let found = match &self.tok {
            Tok::Num(x) => alloc::format!("number {x}"),
            Tok::Ident(s) => alloc::format!("`{s}`"),
            Tok::Op(c) => alloc::format!("`{c}`"),
            Tok::LParen => "`(`".to_string(),
            Tok::RParen => "`)`".to_string(),
            Tok::Comma => "`,`".to_string(),
            Tok::End => "end of input".to_string(),
        };
        ParseError::Syntax { offset: self.at, message: alloc::format!("expected {wanted}, found {found}") }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Op('+') => BinaryOp::Add,
                Tok::Op('-') => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.tok {
                Tok::Op('*') => BinaryOp::Mul,
                Tok::Op('/') => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        match self.tok {
            Tok::Op('-') => {
                self.bump()?;
                let inner = self.unary()?;
                // a negated literal is stored as a negative constant
                Ok(match inner {
                    Node::Const(c) => Node::Const(-c),
                    other => Node::Unary(UnaryOp::Neg, Box::new(other)),
                })
            }
            Tok::Op('+') => {
                self.bump()?;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if self.tok == Tok::Op('^') {
            self.bump()?;
            let exp = self.unary()?;
            return Ok(Node::Binary(BinaryOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        match self.tok.clone() {
            Tok::Num(x) => {
                self.bump()?;
                Ok(Node::Const(x))
            }
            Tok::LParen => {
                self.bump()?;
                let inner = self.expr()?;
                if self.tok != Tok::RParen {
                    return Err(self.unexpected("`)`"));
                }
                self.bump()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let at = self.at;
                self.bump()?;
                if self.tok == Tok::LParen {
                    let Some(op) = UnaryOp::from_name(name) else {
                        return Err(ParseError::Syntax {
                            offset: at,
                            message: alloc::format!("unknown function `{name}`"),
                        });
                    };
                    self.bump()?;
                    let arg = self.expr()?;
                    let mut got = 1;
                    while self.tok == Tok::Comma {
                        self.bump()?;
                        self.expr()?;
                        got += 1;
                    }
                    if self.tok != Tok::RParen {
                        return Err(self.unexpected("`)`"));
                    }
                    if got != 1 {
                        return Err(ParseError::Arity { offset: at, name: name.to_string(), got });
                    }
                    self.bump()?;
                    return Ok(Node::Unary(op, Box::new(arg)));
                }
                if UnaryOp::from_name(name).is_some() {
                    return Err(ParseError::Arity { offset: at, name: name.to_string(), got: 0 });
                }
                match self.vars.index_of(name) {
                    Some(i) => Ok(Node::Var(i)),
                    None => Err(ParseError::UnknownVariable { offset: at, name: name.to_string() }),
                }
            }
            _ => Err(self.unexpected("a number, variable, function or `(`")),
        }
    }
}
