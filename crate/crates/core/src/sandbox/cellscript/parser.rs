use super::lexer::{Tok, Token};
use super::ParseError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub(super) enum Expr {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Name(String),
    List(Vec<Expr>),
    Record(Vec<(String, Expr)>),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Index(Box<Expr>, Box<Expr>),
    Call(String, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub(super) enum Stmt {
    Let(String, Expr),
    Print(Expr),
    Fail(String),
}

pub(super) fn parse(tokens: Vec<Token>) -> Result<Vec<Stmt>, ParseError> {
    let mut p = Parser { tokens, pos: 0 };
    let mut stmts = Vec::new();
    loop {
        while p.peek() == &Tok::Sep {
            p.pos += 1;
        }
        if p.peek() == &Tok::Eof {
            return Ok(stmts);
        }
        stmts.push(p.stmt()?);
        match p.peek() {
            Tok::Sep | Tok::Eof => {}
            other => return Err(p.error(format!("expected end of statement, found {other:?}"))),
        }
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn next(&mut self) -> Tok {
        let tok = self.tokens[self.pos].tok.clone();
        if tok != Tok::Eof {
            self.pos += 1;
        }
        tok
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError::new(self.tokens[self.pos].line, message)
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {want:?}, found {:?}", self.peek())))
        }
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        match self.next() {
            Tok::Let => {
                let name = match self.next() {
                    Tok::Ident(name) => name,
                    other => return Err(self.error(format!("expected a name after `let`, found {other:?}"))),
                };
                self.expect(Tok::Assign)?;
                Ok(Stmt::Let(name, self.expr()?))
            }
            Tok::Print => Ok(Stmt::Print(self.expr()?)),
            Tok::Fail => match self.next() {
                Tok::Str(s) => Ok(Stmt::Fail(s)),
                other => Err(self.error(format!("`fail` takes a text literal, found {other:?}"))),
            },
            other => Err(self.error(format!("expected `let`, `print` or `fail`, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let left = self.additive()?;
        let op = match self.peek() {
            Tok::Eq => BinOp::Eq,
            Tok::Ne => BinOp::Ne,
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            _ => return Ok(left),
        };
        self.pos += 1;
        let right = self.additive()?;
        Ok(Expr::Binary(op, Box::new(left), Box::new(right)))
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(left),
            };
            self.pos += 1;
            left = Expr::Binary(op, Box::new(left), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(left),
            };
            self.pos += 1;
            left = Expr::Binary(op, Box::new(left), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        let mut e = self.primary()?;
        while *self.peek() == Tok::LBracket {
            self.pos += 1;
            let index = self.expr()?;
            self.expect(Tok::RBracket)?;
            e = Expr::Index(Box::new(e), Box::new(index));
        }
        Ok(e)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.next() {
            Tok::Null => Ok(Expr::Null),
            Tok::True => Ok(Expr::Bool(true)),
            Tok::False => Ok(Expr::Bool(false)),
            Tok::Int(i) => Ok(Expr::Int(i)),
            Tok::Float(f) => Ok(Expr::Float(f)),
            Tok::Str(s) => Ok(Expr::Str(s)),
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    self.pos += 1;
                    let args = self.items(Tok::RParen)?;
                    Ok(Expr::Call(name, args))
                } else {
                    Ok(Expr::Name(name))
                }
            }
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::LBracket => Ok(Expr::List(self.items(Tok::RBracket)?)),
            Tok::LBrace => {
                let mut fields = Vec::new();
                loop {
                    if *self.peek() == Tok::RBrace {
                        self.pos += 1;
                        return Ok(Expr::Record(fields));
                    }
                    let key = match self.next() {
                        Tok::Ident(k) | Tok::Str(k) => k,
                        other => return Err(self.error(format!("expected a record key, found {other:?}"))),
                    };
                    self.expect(Tok::Colon)?;
                    fields.push((key, self.expr()?));
                    match self.next() {
                        Tok::Comma => {}
                        Tok::RBrace => return Ok(Expr::Record(fields)),
                        other => return Err(self.error(format!("expected `,` or `}}`, found {other:?}"))),
                    }
                }
            }
            other => Err(self.error(format!("expected an expression, found {other:?}"))),
        }
    }

    /// Comma-separated expressions up to `close`; a trailing comma is allowed.
    fn items(&mut self, close: Tok) -> Result<Vec<Expr>, ParseError> {
        let mut items = Vec::new();
        loop {
            if *self.peek() == close {
                self.pos += 1;
                return Ok(items);
            }
            items.push(self.expr()?);
            let tok = self.next();
            if tok == close {
                return Ok(items);
            }
            if tok != Tok::Comma {
                return Err(self.error(format!("expected `,` or {close:?}, found {tok:?}")));
            }
        }
    }
}
