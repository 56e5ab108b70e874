//! The mini-language shared by the synthetic corpus and the AST-match metric.
//!
//! ```text
//! program    := stmt ((';' | newline) stmt)*
//! stmt       := 'if' expr ':' simple ('else' ':' simple)? | simple
//! simple     := 'return' expr? | IDENT '=' expr | expr
//! expr       := arith (('==' | '!=' | '<' | '<=' | '>' | '>=') arith)?
//! arith      := term (('+' | '-') term)*
//! term       := unary (('*' | '/' | '%') unary)*
//! unary      := '-' unary | atom
//! atom       := NUMBER | STRING | IDENT | IDENT '(' (expr (',' expr)*)? ')' | '(' expr ')'
//! ```

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Program,
    Assignment,
    If,
    Return,
    Call,
    BinaryOp,
    Identifier,
    Literal,
}

impl NodeKind {
    pub const ALL: [NodeKind; 8] = [
        NodeKind::Program,
        NodeKind::Assignment,
        NodeKind::If,
        NodeKind::Return,
        NodeKind::Call,
        NodeKind::BinaryOp,
        NodeKind::Identifier,
        NodeKind::Literal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Program => "program",
            NodeKind::Assignment => "assignment",
            NodeKind::If => "if",
            NodeKind::Return => "return",
            NodeKind::Call => "call",
            NodeKind::BinaryOp => "binary_op",
            NodeKind::Identifier => "identifier",
            NodeKind::Literal => "literal",
        }
    }
}

/// A syntax tree node. `label` holds the identifier, literal text, operator or
/// callee name; `If` children are condition, then-branch and optional else-branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MiniAst {
    pub kind: NodeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub children: Vec<MiniAst>,
}

impl MiniAst {
    fn leaf(kind: NodeKind, label: &str) -> Self {
        Self {
            kind,
            label: Some(label.to_string()),
            children: Vec::new(),
        }
    }

    fn node(kind: NodeKind, label: Option<&str>, children: Vec<MiniAst>) -> Self {
        Self {
            kind,
            label: label.map(str::to_string),
            children,
        }
    }

    /// Every node, pre-order.
    pub fn nodes(&self) -> Vec<&MiniAst> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.nodes());
        }
        out
    }

    /// Structure-and-kind serialization (labels dropped).
    pub fn shape_key(&self) -> String {
        if self.children.is_empty() {
            return format!("({})", self.kind.name());
        }
        let inner: Vec<String> = self.children.iter().map(MiniAst::shape_key).collect();
        format!("({} {})", self.kind.name(), inner.join(" "))
    }

    /// One shape key per node.
    pub fn subtree_keys(&self) -> Vec<String> {
        self.nodes().into_iter().map(MiniAst::shape_key).collect()
    }

    /// Canonical source text; parsing it yields an identical tree.
    pub fn to_code(&self) -> String {
        match self.kind {
            NodeKind::Program => self
                .children
                .iter()
                .map(MiniAst::to_code)
                .collect::<Vec<_>>()
                .join(" ; "),
            NodeKind::Assignment => format!(
                "{} = {}",
                self.children[0].to_code(),
                self.children[1].to_code()
            ),
            NodeKind::If => {
                let mut s = format!(
                    "if {} : {}",
                    self.children[0].to_code(),
                    self.children[1].to_code()
                );
                if let Some(e) = self.children.get(2) {
                    s.push_str(&format!(" else : {}", e.to_code()));
                }
                s
            }
            NodeKind::Return => match self.children.first() {
                Some(v) => format!("return {}", v.to_code()),
                None => "return".into(),
            },
            NodeKind::Call => {
                let args: Vec<String> = self.children.iter().map(MiniAst::to_code).collect();
                format!(
                    "{} ( {} )",
                    self.label.as_deref().unwrap_or(""),
                    args.join(" , ")
                )
                .replace("(  )", "( )")
            }
            NodeKind::BinaryOp => {
                let op = self.label.as_deref().unwrap_or("?");
                if op == "neg" {
                    format!("- {}", self.children[0].to_code_operand())
                } else {
                    format!(
                        "{} {op} {}",
                        self.children[0].to_code_operand(),
                        self.children[1].to_code_operand()
                    )
                }
            }
            NodeKind::Identifier | NodeKind::Literal => self.label.clone().unwrap_or_default(),
        }
    }

    fn to_code_operand(&self) -> String {
        if self.kind == NodeKind::BinaryOp {
            format!("( {} )", self.to_code())
        } else {
            self.to_code()
        }
    }
}

impl fmt::Display for MiniAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind.name())?;
        if let Some(l) = &self.label {
            write!(f, " {l}")?;
        }
        if !self.children.is_empty() {
            write!(f, "[")?;
            for (i, c) in self.children.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{c}")?;
            }
            write!(f, "]")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Str(String),
    Op(&'static str),
    Sep,
    End,
}

#[derive(Clone, Debug)]
struct Lexeme {
    tok: Tok,
    line: usize,
    col: usize,
}

const OPERATORS: [&str; 17] = [
    "==", "!=", "<=", ">=", "<", ">", "=", "+", "-", "*", "/", "%", "(", ")", ",", ":", ";",
];

fn lex(src: &str) -> Result<Vec<Lexeme>> {
    let chars: Vec<char> = src.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        let (l0, c0) = (line, col);
        if c == '\n' {
            out.push(Lexeme {
                tok: Tok::Sep,
                line,
                col,
            });
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let start = i;
        let tok = if c.is_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else if c.is_ascii_digit() {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            Tok::Number(chars[start..i].iter().collect())
        } else if c == '"' || c == '\'' {
            i += 1;
            while i < chars.len() && chars[i] != c && chars[i] != '\n' {
                i += 1;
            }
            if i >= chars.len() || chars[i] != c {
                return Err(Error::Parse {
                    line: l0,
                    col: c0,
                    msg: "unterminated string".into(),
                });
            }
            i += 1;
            Tok::Str(chars[start..i].iter().collect())
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let op = OPERATORS
                .iter()
                .find(|op| op.len() == 2 && two == **op)
                .or_else(|| {
                    OPERATORS
                        .iter()
                        .find(|op| op.len() == 1 && op.starts_with(c))
                });
            match op {
                Some(op) => {
                    i += op.len();
                    if *op == ";" {
                        Tok::Sep
                    } else {
                        Tok::Op(op)
                    }
                }
                None => {
                    return Err(Error::Parse {
                        line: l0,
                        col: c0,
                        msg: format!("unexpected character {c:?}"),
                    })
                }
            }
        };
        col += i - start;
        out.push(Lexeme {
            tok,
            line: l0,
            col: c0,
        });
    }
    out.push(Lexeme {
        tok: Tok::End,
        line,
        col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Lexeme>,
    pos: usize,
}

const COMPARISONS: [&str; 6] = ["==", "!=", "<", "<=", ">", ">="];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T> {
        let l = &self.toks[self.pos];
        Err(Error::Parse {
            line: l.line,
            col: l.col,
            msg: msg.into(),
        })
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn is_op(&self, op: &str) -> bool {
        matches!(self.peek(), Tok::Op(o) if *o == op)
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == w)
    }

    fn expect_op(&mut self, op: &str) -> Result<()> {
        if self.is_op(op) {
            self.bump();
            Ok(())
        } else {
            self.error(format!("expected '{op}'"))
        }
    }

    fn program(&mut self) -> Result<MiniAst> {
        let mut stmts = Vec::new();
        loop {
            while *self.peek() == Tok::Sep {
                self.bump();
            }
            if *self.peek() == Tok::End {
                break;
            }
            stmts.push(self.statement()?);
            match self.peek() {
                Tok::Sep | Tok::End => {}
                _ => return self.error("expected end of statement"),
            }
        }
        if stmts.is_empty() {
            return self.error("empty program");
        }
        Ok(MiniAst::node(NodeKind::Program, None, stmts))
    }

    fn statement(&mut self) -> Result<MiniAst> {
        if self.is_word("if") {
            self.bump();
            let cond = self.expr()?;
            self.expect_op(":")?;
            let then = self.simple()?;
            let mut children = vec![cond, then];
            if self.is_word("else") {
                self.bump();
                self.expect_op(":")?;
                children.push(self.simple()?);
            }
            return Ok(MiniAst::node(NodeKind::If, None, children));
        }
        self.simple()
    }

    fn simple(&mut self) -> Result<MiniAst> {
        if self.is_word("if") || self.is_word("else") {
            return self.error("unexpected keyword");
        }
        if self.is_word("return") {
            self.bump();
            let children = match self.peek() {
                Tok::Sep | Tok::End => Vec::new(),
                Tok::Ident(w) if w == "else" => Vec::new(),
                _ => vec![self.expr()?],
            };
            return Ok(MiniAst::node(NodeKind::Return, None, children));
        }
        if let (Tok::Ident(name), Tok::Op("=")) = (self.peek().clone(), self.peek_at(1)) {
            self.bump();
            self.bump();
            let value = self.expr()?;
            return Ok(MiniAst::node(
                NodeKind::Assignment,
                None,
                vec![MiniAst::leaf(NodeKind::Identifier, &name), value],
            ));
        }
        self.expr()
    }

    fn expr(&mut self) -> Result<MiniAst> {
        let lhs = self.arith()?;
        if let Tok::Op(op) = *self.peek() {
            if COMPARISONS.contains(&op) {
                self.bump();
                let rhs = self.arith()?;
                return Ok(MiniAst::node(NodeKind::BinaryOp, Some(op), vec![lhs, rhs]));
            }
        }
        Ok(lhs)
    }

    fn arith(&mut self) -> Result<MiniAst> {
        let mut lhs = self.term()?;
        while let Tok::Op(op @ ("+" | "-")) = *self.peek() {
            self.bump();
            let rhs = self.term()?;
            lhs = MiniAst::node(NodeKind::BinaryOp, Some(op), vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<MiniAst> {
        let mut lhs = self.unary()?;
        while let Tok::Op(op @ ("*" | "/" | "%")) = *self.peek() {
            self.bump();
            let rhs = self.unary()?;
            lhs = MiniAst::node(NodeKind::BinaryOp, Some(op), vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<MiniAst> {
        if self.is_op("-") {
            self.bump();
            let x = self.unary()?;
            return Ok(MiniAst::node(NodeKind::BinaryOp, Some("neg"), vec![x]));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<MiniAst> {
        match self.peek().clone() {
            Tok::Number(n) => {
                self.bump();
                Ok(MiniAst::leaf(NodeKind::Literal, &n))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(MiniAst::leaf(NodeKind::Literal, &s))
            }
            Tok::Ident(name) => {
                if matches!(name.as_str(), "if" | "else" | "return") {
                    return self.error(format!("unexpected keyword '{name}'"));
                }
                self.bump();
                if self.is_op("(") {
                    self.bump();
                    let mut args = Vec::new();
                    if !self.is_op(")") {
                        args.push(self.expr()?);
                        while self.is_op(",") {
                            self.bump();
                            args.push(self.expr()?);
                        }
                    }
                    self.expect_op(")")?;
                    return Ok(MiniAst::node(NodeKind::Call, Some(&name), args));
                }
                let kind = if matches!(name.as_str(), "True" | "False" | "None") {
                    NodeKind::Literal
                } else {
                    NodeKind::Identifier
                };
                Ok(MiniAst::leaf(kind, &name))
            }
            Tok::Op("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_op(")")?;
                Ok(e)
            }
            Tok::End | Tok::Sep => self.error("unexpected end of statement"),
            Tok::Op(op) => self.error(format!("unexpected '{op}'")),
        }
    }
}

/// Recursive-descent parse of a mini-language program.
pub fn parse_mini(code: &str) -> Result<MiniAst> {
    let toks = lex(code)?;
    Parser { toks, pos: 0 }.program()
}
