use crate::model::parse_date;

use super::{
    check_literal, CmpOp, Expr, Field, FieldType, Literal, Predicate, QueryAst, QueryError, Target,
};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Num(String),
    Sym(&'static str),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

fn syntax(position: usize, expected: impl Into<String>) -> QueryError {
    QueryError::SyntaxError {
        position,
        expected: expected.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>, QueryError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'(' | b')' | b'[' | b']' | b',' | b'=' => {
                i += 1;
                Tok::Sym(match c {
                    b'(' => "(",
                    b')' => ")",
                    b'[' => "[",
                    b']' => "]",
                    b',' => ",",
                    _ => "=",
                })
            }
            b'!' if bytes.get(i + 1) == Some(&b'=') => {
                i += 2;
                Tok::Sym("!=")
            }
            b'<' | b'>' => {
                let eq = bytes.get(i + 1) == Some(&b'=');
                i += 1 + usize::from(eq);
                Tok::Sym(match (c, eq) {
                    (b'<', false) => "<",
                    (b'<', true) => "<=",
                    (_, false) => ">",
                    (_, true) => ">=",
                })
            }
            b'\'' => {
                i += 1;
                let mut s = String::new();
                loop {
                    match text[i..].find('\'') {
                        None => return Err(syntax(start, "closing quote")),
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
                Tok::Str(s)
            }
            b'-' | b'0'..=b'9' => {
                if c == b'-' {
                    i += 1;
                }
                let digits = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i == digits {
                    return Err(syntax(start, "number"));
                }
                if bytes.get(i) == Some(&b'.') {
                    i += 1;
                    let frac = i;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    if i == frac {
                        return Err(syntax(i, "digits after decimal point"));
                    }
                }
                Tok::Num(text[start..i].to_string())
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || matches!(bytes[i], b'_' | b'.' | b'-'))
                {
                    i += 1;
                }
                Tok::Word(text[start..i].to_string())
            }
            _ => return Err(syntax(start, "token")),
        };
        out.push(Token { tok, pos: start });
    }
    out.push(Token {
        tok: Tok::End,
        pos: text.len(),
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.at]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        let hit = self.is_keyword(kw);
        if hit {
            self.bump();
        }
        hit
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), QueryError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(syntax(self.peek().pos, kw))
        }
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        let hit = matches!(self.peek().tok, Tok::Sym(s) if s == sym);
        if hit {
            self.bump();
        }
        hit
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), QueryError> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(syntax(self.peek().pos, format!("`{sym}`")))
        }
    }

    fn query(&mut self) -> Result<QueryAst, QueryError> {
        let q = if self.eat_keyword("SELECT") {
            let t = self.bump();
            let target = match &t.tok {
                Tok::Word(w) => Target::parse(&w.to_ascii_lowercase()),
                _ => None,
            }
            .ok_or_else(|| syntax(t.pos, "`patients` or `images`"))?;
            QueryAst::select(target, self.where_clause()?)
        } else if self.eat_keyword("EXEC") {
            let t = self.bump();
            let algo = match t.tok {
                Tok::Word(w) if !is_reserved(&w) => w,
                _ => return Err(syntax(t.pos, "algorithm id")),
            };
            QueryAst::exec(algo, self.where_clause()?)
        } else {
            return Err(syntax(self.peek().pos, "SELECT or EXEC"));
        };
        if self.peek().tok != Tok::End {
            return Err(syntax(self.peek().pos, "end of query"));
        }
        Ok(q)
    }

    fn where_clause(&mut self) -> Result<Option<Expr>, QueryError> {
        if self.peek().tok == Tok::End {
            return Ok(None);
        }
        self.expect_keyword("WHERE")?;
        self.expr().map(Some)
    }

    fn expr(&mut self) -> Result<Expr, QueryError> {
        let mut parts = vec![self.term()?];
        while self.eat_keyword("OR") {
            parts.push(self.term()?);
        }
        Ok(Expr::or(parts))
    }

    fn term(&mut self) -> Result<Expr, QueryError> {
        let mut parts = vec![self.factor()?];
        while self.eat_keyword("AND") {
            parts.push(self.factor()?);
        }
        Ok(Expr::and(parts))
    }

    fn factor(&mut self) -> Result<Expr, QueryError> {
        if self.eat_keyword("NOT") {
            return Ok(Expr::not(self.factor()?));
        }
        if self.eat_sym("(") {
            let e = self.expr()?;
            self.expect_sym(")")?;
            return Ok(e);
        }
        self.pred().map(Expr::Pred)
    }

    fn pred(&mut self) -> Result<Predicate, QueryError> {
        let t = self.bump();
        let (name, fpos) = match t.tok {
            Tok::Word(w) if !is_reserved(&w) => (w, t.pos),
            _ => return Err(syntax(t.pos, "field, `NOT` or `(`")),
        };
        let field = Field::parse(&name).ok_or(QueryError::UnknownField {
            position: fpos,
            name: name.clone(),
        })?;

        if self.eat_keyword("IN") {
            self.expect_sym("[")?;
            let lo_pos = self.peek().pos;
            let lo = self.number_literal(field)?;
            self.expect_sym(",")?;
            let hi = self.number_literal(field)?;
            self.expect_sym("]")?;
            if !field.field_type().is_ordered() {
                return Err(QueryError::TypeMismatch {
                    position: fpos,
                    detail: format!("range on unordered field {field}"),
                });
            }
            let ordered = match (&lo, &hi) {
                (Literal::Num(a), Literal::Num(b)) => a <= b,
                (Literal::Date(a), Literal::Date(b)) => a <= b,
                _ => false,
            };
            if !ordered {
                return Err(QueryError::BadRange { position: lo_pos });
            }
            return Ok(Predicate::InRange { field, lo, hi });
        }

        let t = self.bump();
        let op = match t.tok {
            Tok::Sym("=") => CmpOp::Eq,
            Tok::Sym("!=") => CmpOp::Ne,
            Tok::Sym("<") => CmpOp::Lt,
            Tok::Sym("<=") => CmpOp::Le,
            Tok::Sym(">") => CmpOp::Gt,
            Tok::Sym(">=") => CmpOp::Ge,
            _ => return Err(syntax(t.pos, "comparison operator or IN")),
        };
        if !op.is_equality() && !field.field_type().is_ordered() {
            return Err(QueryError::TypeMismatch {
                position: t.pos,
                detail: format!("`{}` on unordered field {field}", op.symbol()),
            });
        }
        let lpos = self.peek().pos;
        let value = match self.peek().tok.clone() {
            Tok::Str(s) => {
                self.bump();
                Literal::Str(s)
            }
            Tok::Num(_) => self.number_literal(field)?,
            _ => return Err(syntax(lpos, "literal")),
        };
        check_literal(field, &value).map_err(|detail| QueryError::TypeMismatch {
            position: lpos,
            detail,
        })?;
        Ok(Predicate::Compare { field, op, value })
    }

    /// A bare number, read as a date when the field is a date.
    fn number_literal(&mut self, field: Field) -> Result<Literal, QueryError> {
        let t = self.bump();
        let Tok::Num(text) = t.tok else {
            return Err(syntax(t.pos, "number"));
        };
        if field.field_type() == FieldType::Date {
            return parse_date(&text)
                .map(Literal::Date)
                .map_err(|_| QueryError::TypeMismatch {
                    position: t.pos,
                    detail: format!("`{text}` is not a YYYYMMDD date"),
                });
        }
        let v: f64 = text.parse().map_err(|_| syntax(t.pos, "number"))?;
        if !v.is_finite() {
            return Err(syntax(t.pos, "finite number"));
        }
        Ok(Literal::Num(v))
    }
}

fn is_reserved(w: &str) -> bool {
    ["SELECT", "EXEC", "WHERE", "AND", "OR", "NOT", "IN"]
        .iter()
        .any(|k| w.eq_ignore_ascii_case(k))
}

pub fn parse_query(text: &str) -> Result<QueryAst, QueryError> {
    let toks = lex(text)?;
    Parser { toks, at: 0 }.query()
}
