//! Filter language: lexer, recursive-descent parser, validation against a schema,
//! canonical printing, and the full-scan executor.
//!
//! ```text
//! query   := clause ("ORDER" "BY" attr ("ASC"|"DESC"))? ("LIMIT" int)?
//! clause  := conj ("OR" conj)*
//! conj    := term ("AND" term)*
//! term    := "NOT" term | "(" clause ")" | cmp
//! cmp     := attr op literal | attr "IN" "(" literal ("," literal)* ")" | attr "CONTAINS" literal
//! ```
//!
//! String equality and `IN` are case-sensitive. `CONTAINS` is a case-insensitive substring
//! test on text and a case-insensitive membership test on text lists. A comparison against
//! an attribute the item does not carry is false.

use std::cmp::Ordering;
use std::fmt;

use super::{AttrKind, AttrValue, Catalog, CatalogError, Item, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn is_ordering(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Ne)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Text(String),
    Number(f64),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Text(s) => write!(f, "'{}'", s.replace('\'', "''")),
            Literal::Number(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Cmp { attr: String, op: CmpOp, value: Literal },
    In { attr: String, values: Vec<Literal> },
    Contains { attr: String, value: Literal },
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Not(Box<Predicate>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Order {
    pub attr: String,
    pub ascending: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryExpr {
    pub root: Predicate,
    pub order_by: Option<Order>,
    pub limit: Option<usize>,
}

// ---------------------------------------------------------------------------
// printing

fn fmt_child(p: &Predicate, parent_is_and: bool, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let needs_parens = match p {
        Predicate::Or(_) => true,
        Predicate::And(_) => parent_is_and,
        _ => false,
    };
    if needs_parens {
        write!(f, "({p})")
    } else {
        write!(f, "{p}")
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Cmp { attr, op, value } => write!(f, "{attr} {} {value}", op.symbol()),
            Predicate::In { attr, values } => {
                let vals: Vec<String> = values.iter().map(ToString::to_string).collect();
                write!(f, "{attr} IN ({})", vals.join(", "))
            }
            Predicate::Contains { attr, value } => write!(f, "{attr} CONTAINS {value}"),
            Predicate::And(children) | Predicate::Or(children) => {
                let is_and = matches!(self, Predicate::And(_));
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(if is_and { " AND " } else { " OR " })?;
                    }
                    if is_and {
                        fmt_child(c, true, f)?;
                    } else {
                        match c {
                            Predicate::Or(_) => write!(f, "({c})")?,
                            _ => write!(f, "{c}")?,
                        }
                    }
                }
                Ok(())
            }
            Predicate::Not(inner) => match **inner {
                Predicate::And(_) | Predicate::Or(_) => write!(f, "NOT ({inner})"),
                _ => write!(f, "NOT {inner}"),
            },
        }
    }
}

impl fmt::Display for QueryExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)?;
        if let Some(o) = &self.order_by {
            write!(f, " ORDER BY {} {}", o.attr, if o.ascending { "ASC" } else { "DESC" })?;
        }
        if let Some(n) = self.limit {
            write!(f, " LIMIT {n}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// lexing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64, String),
    Op(CmpOp),
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: usize,
}

fn parse_err(position: usize, expected: impl Into<String>) -> CatalogError {
    CatalogError::ParseError { position, expected: expected.into() }
}

fn lex(text: &str) -> Result<Vec<Spanned>> {
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
            b'(' => {
                i += 1;
                out.push(Spanned { tok: Tok::LParen, pos: start });
            }
            b')' => {
                i += 1;
                out.push(Spanned { tok: Tok::RParen, pos: start });
            }
            b',' => {
                i += 1;
                out.push(Spanned { tok: Tok::Comma, pos: start });
            }
            b'=' => {
                i += 1;
                out.push(Spanned { tok: Tok::Op(CmpOp::Eq), pos: start });
            }
            b'!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    i += 2;
                    out.push(Spanned { tok: Tok::Op(CmpOp::Ne), pos: start });
                } else {
                    return Err(parse_err(i + 1, "'='"));
                }
            }
            b'<' | b'>' => {
                let eq = bytes.get(i + 1) == Some(&b'=');
                let op = match (c, eq) {
                    (b'<', true) => CmpOp::Le,
                    (b'<', false) => CmpOp::Lt,
                    (_, true) => CmpOp::Ge,
                    _ => CmpOp::Gt,
                };
                i += if eq { 2 } else { 1 };
                out.push(Spanned { tok: Tok::Op(op), pos: start });
            }
            b'\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match text[i..].find('\'') {
                        None => return Err(parse_err(text.len(), "closing quote")),
                        Some(off) => {
                            s.push_str(&text[i..i + off]);
                            i += off + 1;
                            if bytes.get(i) == Some(&b'\'') {
                                s.push('\'');
                                i += 1;
                            } else {
                                break;
                            }
                        }
                    }
                }
                out.push(Spanned { tok: Tok::Str(s), pos: start });
            }
            b'-' | b'0'..=b'9' | b'.' => {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                let raw = &text[start..i];
                let n: f64 = raw.parse().map_err(|_| parse_err(start, "number"))?;
                out.push(Spanned { tok: Tok::Num(n, raw.to_string()), pos: start });
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Spanned { tok: Tok::Ident(text[start..i].to_string()), pos: start });
            }
            _ => return Err(parse_err(start, "token")),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// parsing

const KEYWORDS: &[&str] = &["AND", "OR", "NOT", "IN", "CONTAINS", "ORDER", "BY", "ASC", "DESC", "LIMIT"];

struct Parser {
    toks: Vec<Spanned>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|s| &s.tok)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |s| s.pos)
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.keyword(kw) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(parse_err(self.pos(), kw))
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&tok) {
            self.at += 1;
            Ok(())
        } else {
            Err(parse_err(self.pos(), what))
        }
    }

    fn attr(&mut self) -> Result<String> {
        match self.peek() {
            Some(Tok::Ident(w)) if !KEYWORDS.iter().any(|k| w.eq_ignore_ascii_case(k)) => {
                let w = w.clone();
                self.at += 1;
                Ok(w)
            }
            _ => Err(parse_err(self.pos(), "attribute")),
        }
    }

    fn literal(&mut self) -> Result<Literal> {
        let lit = match self.peek() {
            Some(Tok::Str(s)) => Literal::Text(s.clone()),
            Some(Tok::Num(n, _)) => Literal::Number(*n),
            _ => return Err(parse_err(self.pos(), "literal")),
        };
        self.at += 1;
        Ok(lit)
    }

    fn query(&mut self) -> Result<QueryExpr> {
        let root = self.clause()?;
        let mut order_by = None;
        if self.eat_keyword("ORDER") {
            self.expect_keyword("BY")?;
            let attr = self.attr()?;
            let ascending = if self.eat_keyword("ASC") {
                true
            } else if self.eat_keyword("DESC") {
                false
            } else {
                return Err(parse_err(self.pos(), "ASC or DESC"));
            };
            order_by = Some(Order { attr, ascending });
        }
        let mut limit = None;
        if self.eat_keyword("LIMIT") {
            let pos = self.pos();
            match self.peek() {
                Some(Tok::Num(_, raw)) if raw.bytes().all(|b| b.is_ascii_digit()) => {
                    let n: usize = raw.parse().map_err(|_| parse_err(pos, "positive integer"))?;
                    if n == 0 {
                        return Err(parse_err(pos, "positive integer"));
                    }
                    self.at += 1;
                    limit = Some(n);
                }
                _ => return Err(parse_err(pos, "positive integer")),
            }
        }
        if self.at != self.toks.len() {
            return Err(parse_err(self.pos(), "end of input"));
        }
        Ok(QueryExpr { root, order_by, limit })
    }

    fn clause(&mut self) -> Result<Predicate> {
        let mut parts = vec![self.conj()?];
        while self.eat_keyword("OR") {
            parts.push(self.conj()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Predicate::Or(parts) })
    }

    fn conj(&mut self) -> Result<Predicate> {
        let mut parts = vec![self.term()?];
        while self.eat_keyword("AND") {
            parts.push(self.term()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Predicate::And(parts) })
    }

    fn term(&mut self) -> Result<Predicate> {
        if self.eat_keyword("NOT") {
            return Ok(Predicate::Not(Box::new(self.term()?)));
        }
        if self.peek() == Some(&Tok::LParen) {
            self.at += 1;
            let inner = self.clause()?;
            self.expect(Tok::RParen, "')'")?;
            return Ok(inner);
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Predicate> {
        let attr = self.attr()?;
        if self.eat_keyword("IN") {
            self.expect(Tok::LParen, "'('")?;
            let mut values = vec![self.literal()?];
            while self.peek() == Some(&Tok::Comma) {
                self.at += 1;
                values.push(self.literal()?);
            }
            self.expect(Tok::RParen, "')'")?;
            return Ok(Predicate::In { attr, values });
        }
        if self.eat_keyword("CONTAINS") {
            let value = self.literal()?;
            return Ok(Predicate::Contains { attr, value });
        }
        match self.peek() {
            Some(Tok::Op(op)) => {
                let op = *op;
                self.at += 1;
                let value = self.literal()?;
                Ok(Predicate::Cmp { attr, op, value })
            }
            _ => Err(parse_err(self.pos(), "operator")),
        }
    }
}

/// Parses filter-language text. Keywords are case-insensitive; AND binds tighter than OR.
pub fn parse_query(text: &str) -> Result<QueryExpr> {
    let toks = lex(text)?;
    let mut p = Parser { toks, at: 0, end: text.len() };
    p.query()
}

// ---------------------------------------------------------------------------
// validation

fn check_pred(p: &Predicate, catalog: &Catalog) -> Result<()> {
    let kind = |attr: &str| catalog.kind_of(attr).ok_or_else(|| CatalogError::UnknownAttribute(attr.to_string()));
    let mismatch = |attr: &str| Err(CatalogError::TypeMismatch(attr.to_string()));
    match p {
        Predicate::Cmp { attr, op, value } => match (kind(attr)?, value) {
            (AttrKind::Number, Literal::Number(_)) => Ok(()),
            (AttrKind::Text, Literal::Text(_)) if !op.is_ordering() => Ok(()),
            _ => mismatch(attr),
        },
        Predicate::In { attr, values } => {
            let k = kind(attr)?;
            let ok = values.iter().all(|v| {
                matches!(
                    (k, v),
                    (AttrKind::Number, Literal::Number(_)) | (AttrKind::Text | AttrKind::TextList, Literal::Text(_))
                )
            });
            if ok {
                Ok(())
            } else {
                mismatch(attr)
            }
        }
        Predicate::Contains { attr, value } => match (kind(attr)?, value) {
            (AttrKind::Text | AttrKind::TextList, Literal::Text(_)) => Ok(()),
            _ => mismatch(attr),
        },
        Predicate::And(ps) | Predicate::Or(ps) => ps.iter().try_for_each(|c| check_pred(c, catalog)),
        Predicate::Not(inner) => check_pred(inner, catalog),
    }
}

impl QueryExpr {
    /// Checks attribute existence and operator/kind compatibility against the catalog schema.
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        check_pred(&self.root, catalog)?;
        if let Some(o) = &self.order_by {
            match catalog.kind_of(&o.attr) {
                None => return Err(CatalogError::UnknownAttribute(o.attr.clone())),
                Some(AttrKind::TextList) => return Err(CatalogError::TypeMismatch(o.attr.clone())),
                Some(_) => {}
            }
        }
        if self.limit == Some(0) {
            return Err(parse_err(0, "positive integer"));
        }
        Ok(())
    }

    /// Parses and validates in one step.
    pub fn parse_for(text: &str, catalog: &Catalog) -> Result<Self> {
        let q = parse_query(text)?;
        q.validate(catalog)?;
        Ok(q)
    }
}

// ---------------------------------------------------------------------------
// execution

fn eval(p: &Predicate, item: &Item) -> Result<bool> {
    let mismatch = |attr: &str| CatalogError::TypeMismatch(attr.to_string());
    Ok(match p {
        Predicate::Cmp { attr, op, value } => match (item.attr(attr), value) {
            (None, _) => false,
            (Some(AttrValue::Number(x)), Literal::Number(y)) => match op {
                CmpOp::Eq => x == y,
                CmpOp::Ne => x != y,
                CmpOp::Lt => x < y,
                CmpOp::Le => x <= y,
                CmpOp::Gt => x > y,
                CmpOp::Ge => x >= y,
            },
            (Some(AttrValue::Text(x)), Literal::Text(y)) => match op {
                CmpOp::Eq => x == y,
                CmpOp::Ne => x != y,
                _ => return Err(mismatch(attr)),
            },
            _ => return Err(mismatch(attr)),
        },
        Predicate::In { attr, values } => match item.attr(attr) {
            None => false,
            Some(AttrValue::Number(x)) => values.iter().any(|v| matches!(v, Literal::Number(y) if x == y)),
            Some(AttrValue::Text(x)) => values.iter().any(|v| matches!(v, Literal::Text(y) if x == y)),
            Some(AttrValue::List(xs)) => {
                xs.iter().any(|x| values.iter().any(|v| matches!(v, Literal::Text(y) if x == y)))
            }
        },
        Predicate::Contains { attr, value } => {
            let Literal::Text(needle) = value else { return Err(mismatch(attr)) };
            let needle = needle.to_lowercase();
            match item.attr(attr) {
                None => false,
                Some(AttrValue::Text(x)) => x.to_lowercase().contains(&needle),
                Some(AttrValue::List(xs)) => xs.iter().any(|x| x.to_lowercase() == needle),
                Some(AttrValue::Number(_)) => return Err(mismatch(attr)),
            }
        }
        Predicate::And(ps) => {
            for c in ps {
                if !eval(c, item)? {
                    return Ok(false);
                }
            }
            true
        }
        Predicate::Or(ps) => {
            for c in ps {
                if eval(c, item)? {
                    return Ok(true);
                }
            }
            false
        }
        Predicate::Not(inner) => !eval(inner, item)?,
    })
}

/// Compares two optional sort keys; items lacking the attribute sort after those that have it.
fn cmp_keys(a: Option<&AttrValue>, b: Option<&AttrValue>, ascending: bool) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Greater,
        (Some(_), None) => Ordering::Less,
        (Some(x), Some(y)) => {
            let ord = match (x, y) {
                (AttrValue::Number(x), AttrValue::Number(y)) => x.total_cmp(y),
                (AttrValue::Text(x), AttrValue::Text(y)) => x.cmp(y),
                _ => Ordering::Equal,
            };
            if ascending {
                ord
            } else {
                ord.reverse()
            }
        }
    }
}

pub(super) fn run(catalog: &Catalog, q: &QueryExpr) -> Result<Vec<String>> {
    let mut hits: Vec<&Item> = Vec::new();
    for item in catalog.items() {
        if eval(&q.root, item)? {
            hits.push(item);
        }
    }
    match &q.order_by {
        Some(o) => {
            hits.sort_by(|a, b| cmp_keys(a.attr(&o.attr), b.attr(&o.attr), o.ascending).then_with(|| a.id.cmp(&b.id)))
        }
        None => hits.sort_by(|a, b| b.popularity.cmp(&a.popularity).then_with(|| a.id.cmp(&b.id))),
    }
    let limit = q.limit.unwrap_or(usize::MAX);
    Ok(hits.into_iter().take(limit).map(|it| it.id.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_catalog;

    fn cmp(attr: &str, op: CmpOp, value: Literal) -> Predicate {
        Predicate::Cmp { attr: attr.into(), op, value }
    }

    fn fixture() -> Catalog {
        let src = r#"{"schema":[{"name":"genre","kind":"text"},{"name":"price","kind":"number"},{"name":"tags","kind":"text-list"},{"name":"release_year","kind":"number"}]}
{"id":"g1","title":"Eldervale","attributes":{"genre":"RPG","price":15,"tags":["fantasy","Story"],"release_year":2019}}
{"id":"g2","title":"Witcher-like Quest","attributes":{"genre":"RPG","price":30,"tags":["open-world"],"release_year":2015}}
{"id":"g3","title":"Stardew Valley","attributes":{"genre":"farming","price":14.99,"tags":["coop","cozy"],"release_year":2016}}
{"id":"g4","title":"Boom Arena","attributes":{"genre":"shooter","price":20,"tags":["pvp"]}}
{"id":"g5","title":"Boom Arena 2","attributes":{"genre":"co-op","price":25,"tags":["coop"],"release_year":2021}}
"#;
        load_catalog(src.as_bytes()).unwrap()
    }

    #[test]
    fn simple_limit() {
        let q = parse_query("genre = 'RPG' LIMIT 3").unwrap();
        assert_eq!(q.root, cmp("genre", CmpOp::Eq, Literal::Text("RPG".into())));
        assert_eq!(q.limit, Some(3));
        assert_eq!(q.order_by, None);
    }

    #[test]
    fn conjunction_with_order() {
        let q = parse_query("price < 20 AND tags CONTAINS 'coop' ORDER BY release_year DESC").unwrap();
        assert_eq!(
            q.root,
            Predicate::And(vec![
                cmp("price", CmpOp::Lt, Literal::Number(20.0)),
                Predicate::Contains { attr: "tags".into(), value: Literal::Text("coop".into()) },
            ])
        );
        assert_eq!(q.order_by, Some(Order { attr: "release_year".into(), ascending: false }));
    }

    #[test]
    fn incomplete_comparison() {
        let err = parse_query("price <").unwrap_err();
        assert_eq!(err, CatalogError::ParseError { position: 7, expected: "literal".into() });
    }

    #[test]
    fn precedence_and_keywords() {
        let q = parse_query("a = 1 or b = 2 and not c = 3").unwrap();
        let Predicate::Or(parts) = &q.root else { panic!("expected OR at root") };
        assert_eq!(parts.len(), 2);
        assert!(matches!(&parts[1], Predicate::And(v) if matches!(v[1], Predicate::Not(_))));
    }

    #[test]
    fn string_escape_and_in() {
        let q = parse_query("title_x IN ('it''s', 'b')").unwrap();
        assert_eq!(
            q.root,
            Predicate::In {
                attr: "title_x".into(),
                values: vec![Literal::Text("it's".into()), Literal::Text("b".into())]
            }
        );
        assert_eq!(q.to_string(), "title_x IN ('it''s', 'b')");
    }

    #[test]
    fn parse_errors() {
        assert!(parse_query("").is_err());
        assert!(parse_query("price < 20 LIMIT 0").is_err());
        assert!(parse_query("price < 20 LIMIT 2.5").is_err());
        assert!(parse_query("(price < 20").is_err());
        assert!(parse_query("genre = 'open").is_err());
        assert!(parse_query("ORDER BY price ASC").is_err());
        assert!(parse_query("price < 20 ORDER BY price").is_err());
        assert!(parse_query("price ~ 3").is_err());
    }

    #[test]
    fn validation() {
        let cat = fixture();
        assert_eq!(
            QueryExpr::parse_for("color = 'x'", &cat).unwrap_err(),
            CatalogError::UnknownAttribute("color".into())
        );
        assert_eq!(QueryExpr::parse_for("genre < 'x'", &cat).unwrap_err(), CatalogError::TypeMismatch("genre".into()));
        assert_eq!(
            QueryExpr::parse_for("price CONTAINS 'x'", &cat).unwrap_err(),
            CatalogError::TypeMismatch("price".into())
        );
        assert_eq!(QueryExpr::parse_for("tags = 'x'", &cat).unwrap_err(), CatalogError::TypeMismatch("tags".into()));
        assert!(QueryExpr::parse_for("price < 3 ORDER BY nope ASC", &cat).is_err());
    }

    #[test]
    fn run_empty_and_rpg_under_20() {
        let cat = fixture();
        let none = QueryExpr::parse_for("price > 1000", &cat).unwrap();
        assert!(cat.run_query(&none).unwrap().is_empty());
        let q = QueryExpr::parse_for("price < 20 AND genre = 'RPG'", &cat).unwrap();
        assert_eq!(cat.run_query(&q).unwrap(), ["g1"]);
    }

    #[test]
    fn not_is_complement() {
        let cat = fixture();
        let pos = cat.run_query(&QueryExpr::parse_for("genre = 'RPG'", &cat).unwrap()).unwrap();
        let neg = cat.run_query(&QueryExpr::parse_for("NOT (genre = 'RPG')", &cat).unwrap()).unwrap();
        assert_eq!(pos.len() + neg.len(), cat.len());
        assert!(pos.iter().all(|id| !neg.contains(id)));
    }

    #[test]
    fn contains_is_case_insensitive() {
        let cat = fixture();
        let q = QueryExpr::parse_for("tags CONTAINS 'STORY'", &cat).unwrap();
        assert_eq!(cat.run_query(&q).unwrap(), ["g1"]);
        let q = QueryExpr::parse_for("genre CONTAINS 'co-'", &cat).unwrap();
        assert_eq!(cat.run_query(&q).unwrap(), ["g5"]);
        // equality stays case-sensitive
        let q = QueryExpr::parse_for("genre = 'rpg'", &cat).unwrap();
        assert!(cat.run_query(&q).unwrap().is_empty());
    }

    #[test]
    fn ordering_and_missing_keys() {
        let cat = fixture();
        let q = QueryExpr::parse_for("price > 0 ORDER BY release_year ASC", &cat).unwrap();
        assert_eq!(cat.run_query(&q).unwrap(), ["g2", "g3", "g1", "g5", "g4"]);
        let q = QueryExpr::parse_for("price > 0 ORDER BY release_year DESC LIMIT 2", &cat).unwrap();
        assert_eq!(cat.run_query(&q).unwrap(), ["g5", "g1"]);
        // default order: popularity (all zero here) then id
        let q = QueryExpr::parse_for("price >= 20", &cat).unwrap();
        assert_eq!(cat.run_query(&q).unwrap(), ["g2", "g4", "g5"]);
    }

    #[test]
    fn escaped_type_mismatch_surfaces_at_run() {
        let cat = fixture();
        let q = parse_query("genre > 'a'").unwrap();
        assert_eq!(cat.run_query(&q).unwrap_err(), CatalogError::TypeMismatch("genre".into()));
    }

    #[test]
    fn printing_preserves_grouping() {
        for text in [
            "a = 1 AND (b = 2 OR c = 3)",
            "(a = 1 AND b = 2) AND c = 3",
            "a = 1 OR (b = 2 OR c = 3)",
            "NOT (a = 1 OR b = 2) ORDER BY a ASC LIMIT 4",
            "NOT NOT a = -1.5",
        ] {
            let q = parse_query(text).unwrap();
            assert_eq!(parse_query(&q.to_string()).unwrap(), q, "{text}");
        }
    }
}
