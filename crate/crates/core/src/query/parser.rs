//! Recursive-descent parser for
//!
//! ```text
//! SELECT (attr, .. | AGG(attr)) FROM coll
//!     [JOIN coll ON coll.attr = coll.attr]
//!     [WHERE attr CMP literal]
//! ```
//!
//! Keywords are case-insensitive; `attr` is `name` or `coll.name`.

use serde::{Deserialize, Serialize};

use crate::document::{AggregateFn, CmpOp, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown keyword {keyword} at byte {position}")]
    UnknownKeyword { position: usize, keyword: String },
    #[error("empty query")]
    Empty,
}

/// An attribute reference, optionally qualified by collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrName {
    pub collection: Option<String>,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SelectList {
    Attributes(Vec<AttrName>),
    Aggregate { function: AggregateFn, attr: AttrName },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinClause {
    pub collection: String,
    pub left: AttrName,
    pub right: AttrName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhereClause {
    pub attr: AttrName,
    pub op: CmpOp,
    pub value: Value,
}

/// Parsed query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub select: SelectList,
    pub from: String,
    pub join: Option<JoinClause>,
    pub filter: Option<WhereClause>,
}

const CLAUSE_KEYWORDS: [&str; 6] = ["SELECT", "FROM", "JOIN", "ON", "WHERE", "TRUE"];
const UNSUPPORTED_KEYWORDS: [&str; 20] = [
    "ORDER", "GROUP", "BY", "LIMIT", "HAVING", "UNION", "INSERT", "UPDATE", "DELETE", "AND", "OR",
    "NOT", "LEFT", "RIGHT", "INNER", "OUTER", "AS", "DISTINCT", "OFFSET", "INTO",
];

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Comma,
    Dot,
    LParen,
    RParen,
    Cmp(CmpOp),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

fn syntax(position: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax { position, message: message.into() }
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b',' => {
                out.push(Token { tok: Tok::Comma, pos: start });
                i += 1;
            }
            b'.' => {
                out.push(Token { tok: Tok::Dot, pos: start });
                i += 1;
            }
            b'(' => {
                out.push(Token { tok: Tok::LParen, pos: start });
                i += 1;
            }
            b')' => {
                out.push(Token { tok: Tok::RParen, pos: start });
                i += 1;
            }
            b'=' => {
                out.push(Token { tok: Tok::Cmp(CmpOp::Eq), pos: start });
                i += 1;
            }
            b'!' | b'<' | b'>' => {
                let next = bytes.get(i + 1).copied();
                let (op, len) = match (c, next) {
                    (b'!', Some(b'=')) => (CmpOp::Ne, 2),
                    (b'<', Some(b'>')) => (CmpOp::Ne, 2),
                    (b'<', Some(b'=')) => (CmpOp::Le, 2),
                    (b'>', Some(b'=')) => (CmpOp::Ge, 2),
                    (b'<', _) => (CmpOp::Lt, 1),
                    (b'>', _) => (CmpOp::Gt, 1),
                    _ => return Err(syntax(start, "expected '!='")),
                };
                out.push(Token { tok: Tok::Cmp(op), pos: start });
                i += len;
            }
            b'\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match bytes.get(i) {
                        None => return Err(syntax(start, "unterminated string literal")),
                        Some(b'\'') if bytes.get(i + 1) == Some(&b'\'') => {
                            s.push('\'');
                            i += 2;
                        }
                        Some(b'\'') => {
                            i += 1;
                            break;
                        }
                        Some(_) => {
                            let ch = text[i..].chars().next().expect("in bounds");
                            s.push(ch);
                            i += ch.len_utf8();
                        }
                    }
                }
                out.push(Token { tok: Tok::Str(s), pos: start });
            }
            b'0'..=b'9' | b'-' => {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                let lit = &text[start..i];
                let tok = if lit.contains('.') {
                    Tok::Float(lit.parse().map_err(|_| syntax(start, format!("bad number {lit}")))?)
                } else {
                    Tok::Int(lit.parse().map_err(|_| syntax(start, format!("bad number {lit}")))?)
                };
                out.push(Token { tok, pos: start });
            }
            c if c == b'_' || c.is_ascii_alphabetic() => {
                while i < bytes.len() && (bytes[i] == b'_' || bytes[i].is_ascii_alphanumeric()) {
                    i += 1;
                }
                out.push(Token { tok: Tok::Ident(text[start..i].to_owned()), pos: start });
            }
            _ => {
                let ch = text[i..].chars().next().expect("in bounds");
                return Err(syntax(start, format!("unexpected character {ch:?}")));
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.at)
    }

    fn pos(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.at).cloned();
        self.at += 1;
        t
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Ident(w), .. }) if w.eq_ignore_ascii_case(kw))
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.is_keyword(kw) {
            self.at += 1;
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected {kw}")))
        }
    }

    fn unexpected(&self, message: &str) -> ParseError {
        match self.peek() {
            Some(Token { tok: Tok::Ident(w), pos }) if is_unsupported(w) => {
                ParseError::UnknownKeyword { position: *pos, keyword: w.to_ascii_uppercase() }
            }
            Some(t) => syntax(t.pos, message),
            None => syntax(self.end, format!("{message}, found end of input")),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Token { tok: Tok::Ident(w), .. }) if !is_reserved(w) => {
                let w = w.clone();
                self.at += 1;
                Ok(w)
            }
            _ => Err(self.unexpected(&format!("expected {what}"))),
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek().map(|t| &t.tok) == Some(tok) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn attr(&mut self) -> Result<AttrName, ParseError> {
        let first = self.ident("attribute name")?;
        if self.eat(&Tok::Dot) {
            let name = self.ident("attribute name after '.'")?;
            Ok(AttrName { collection: Some(first), name })
        } else {
            Ok(AttrName { collection: None, name: first })
        }
    }

    fn qualified_attr(&mut self) -> Result<AttrName, ParseError> {
        let pos = self.pos();
        let attr = self.attr()?;
        if attr.collection.is_none() {
            return Err(syntax(pos, "join condition needs collection-qualified attributes"));
        }
        Ok(attr)
    }

    fn select_list(&mut self) -> Result<SelectList, ParseError> {
        if let Some(Token { tok: Tok::Ident(w), .. }) = self.peek() {
            if let Some(function) = AggregateFn::from_keyword(w) {
                if matches!(self.tokens.get(self.at + 1), Some(Token { tok: Tok::LParen, .. })) {
                    self.at += 2;
                    let attr = self.attr()?;
                    if !self.eat(&Tok::RParen) {
                        return Err(self.unexpected("expected ')'"));
                    }
                    return Ok(SelectList::Aggregate { function, attr });
                }
            }
        }
        let mut attrs = vec![self.attr()?];
        while self.eat(&Tok::Comma) {
            attrs.push(self.attr()?);
        }
        Ok(SelectList::Attributes(attrs))
    }

    fn literal(&mut self) -> Result<Value, ParseError> {
        let pos = self.pos();
        match self.bump().map(|t| t.tok) {
            Some(Tok::Int(i)) => Ok(Value::Int(i)),
            Some(Tok::Float(f)) => Ok(Value::Float(f)),
            Some(Tok::Str(s)) => Ok(Value::Str(s)),
            Some(Tok::Ident(w)) if w.eq_ignore_ascii_case("true") => Ok(Value::Bool(true)),
            Some(Tok::Ident(w)) if w.eq_ignore_ascii_case("false") => Ok(Value::Bool(false)),
            _ => Err(syntax(pos, "expected a literal")),
        }
    }

    fn query(&mut self) -> Result<Query, ParseError> {
        self.expect_keyword("SELECT")?;
        let select = self.select_list()?;
        self.expect_keyword("FROM")?;
        let from = self.ident("collection name")?;
        let join = if self.is_keyword("JOIN") {
            self.at += 1;
            let collection = self.ident("collection name")?;
            self.expect_keyword("ON")?;
            let left = self.qualified_attr()?;
            if !self.eat(&Tok::Cmp(CmpOp::Eq)) {
                return Err(self.unexpected("join condition must be an equality"));
            }
            let right = self.qualified_attr()?;
            Some(JoinClause { collection, left, right })
        } else {
            None
        };
        let filter = if self.is_keyword("WHERE") {
            self.at += 1;
            let attr = self.attr()?;
            let op = match self.bump().map(|t| t.tok) {
                Some(Tok::Cmp(op)) => op,
                _ => {
                    self.at -= 1;
                    return Err(self.unexpected("expected a comparison operator"));
                }
            };
            let value = self.literal()?;
            Some(WhereClause { attr, op, value })
        } else {
            None
        };
        if self.peek().is_some() {
            return Err(self.unexpected("unexpected trailing input"));
        }
        Ok(Query { select, from, join, filter })
    }
}

fn is_unsupported(word: &str) -> bool {
    UNSUPPORTED_KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(word))
}

fn is_reserved(word: &str) -> bool {
    is_unsupported(word)
        || CLAUSE_KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(word))
        || word.eq_ignore_ascii_case("false")
}

pub fn parse(text: &str) -> Result<Query, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let tokens = lex(text)?;
    Parser { tokens, at: 0, end: text.len() }.query()
}
