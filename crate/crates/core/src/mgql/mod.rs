//! The clinician query language.
//!
//! ```text
//! query     := "SELECT" target ["WHERE" expr]
//!            | "EXEC" ident ["WHERE" expr]
//! target    := "patients" | "images"
//! expr      := term { "OR" term }
//! term      := factor { "AND" factor }
//! factor    := "NOT" factor | "(" expr ")" | pred
//! pred      := field op literal | field "IN" "[" number "," number "]"
//! op        := "=" | "!=" | "<" | "<=" | ">" | ">="
//! literal   := "'" chars "'" | number | date(YYYYMMDD)
//! ```
//!
//! Keywords are case-insensitive, string literals are not, and a quote inside
//! a string literal is written `''`. A missing `WHERE` clause matches every
//! row; it is how site routing expresses a residual predicate that became
//! trivially true.
//!
//! ASTs are kept in a normal form: `And`/`Or` nodes have at least two
//! children and never directly contain a node of the same kind. The parser
//! produces this form and the printer relies on it, so
//! `parse(print(q)) == q` holds for every normalized `q`.

mod eval;
mod parser;
mod printer;

use std::fmt;

use chrono::NaiveDate;
use thiserror::Error;

pub use eval::{eval, FieldSource, Value};
pub use parser::parse_query;
pub use printer::{print_expr, print_query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Patients,
    Images,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Patients => "patients",
            Target::Images => "images",
        }
    }

    pub fn parse(s: &str) -> Option<Target> {
        match s {
            "patients" => Some(Target::Patients),
            "images" => Some(Target::Images),
            _ => None,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    PatientId,
    PatientSex,
    PatientAge,
    PatientHeight,
    PatientWeight,
    ImageLaterality,
    ImageView,
    ImageModality,
    ImageStudyDate,
    DerivedKind,
    DerivedDensity,
    DerivedFindings,
    SiteId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldType {
    /// Free string, equality only.
    Text,
    /// Closed set of codes, equality only.
    Code(&'static [&'static str]),
    /// Site token, equality only.
    Site,
    Number,
    Date,
}

impl FieldType {
    pub fn is_ordered(self) -> bool {
        matches!(self, FieldType::Number | FieldType::Date)
    }
}

const SEX_CODES: &[&str] = &["F", "M", "O"];
const LATERALITY_CODES: &[&str] = &["L", "R"];
const VIEW_CODES: &[&str] = &["CC", "MLO"];
const KIND_CODES: &[&str] = &["smf", "cade"];

impl Field {
    pub const ALL: &'static [Field] = &[
        Field::PatientId,
        Field::PatientSex,
        Field::PatientAge,
        Field::PatientHeight,
        Field::PatientWeight,
        Field::ImageLaterality,
        Field::ImageView,
        Field::ImageModality,
        Field::ImageStudyDate,
        Field::DerivedKind,
        Field::DerivedDensity,
        Field::DerivedFindings,
        Field::SiteId,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::PatientId => "patient.id",
            Field::PatientSex => "patient.sex",
            Field::PatientAge => "patient.age",
            Field::PatientHeight => "patient.height_m",
            Field::PatientWeight => "patient.weight_kg",
            Field::ImageLaterality => "image.laterality",
            Field::ImageView => "image.view",
            Field::ImageModality => "image.modality",
            Field::ImageStudyDate => "image.study_date",
            Field::DerivedKind => "derived.kind",
            Field::DerivedDensity => "derived.density_pct",
            Field::DerivedFindings => "derived.num_findings",
            Field::SiteId => "site.id",
        }
    }

    pub fn parse(name: &str) -> Option<Field> {
        Field::ALL.iter().copied().find(|f| f.name() == name)
    }

    pub fn field_type(self) -> FieldType {
        match self {
            Field::PatientId | Field::ImageModality => FieldType::Text,
            Field::PatientSex => FieldType::Code(SEX_CODES),
            Field::ImageLaterality => FieldType::Code(LATERALITY_CODES),
            Field::ImageView => FieldType::Code(VIEW_CODES),
            Field::DerivedKind => FieldType::Code(KIND_CODES),
            Field::SiteId => FieldType::Site,
            Field::PatientAge
            | Field::PatientHeight
            | Field::PatientWeight
            | Field::DerivedDensity
            | Field::DerivedFindings => FieldType::Number,
            Field::ImageStudyDate => FieldType::Date,
        }
    }

    pub fn is_derived(self) -> bool {
        matches!(
            self,
            Field::DerivedKind | Field::DerivedDensity | Field::DerivedFindings
        )
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub const ALL: &'static [CmpOp] = &[
        CmpOp::Eq,
        CmpOp::Ne,
        CmpOp::Lt,
        CmpOp::Le,
        CmpOp::Gt,
        CmpOp::Ge,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn is_equality(self) -> bool {
        matches!(self, CmpOp::Eq | CmpOp::Ne)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Str(String),
    Num(f64),
    Date(NaiveDate),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Compare {
        field: Field,
        op: CmpOp,
        value: Literal,
    },
    /// Inclusive on both ends.
    InRange {
        field: Field,
        lo: Literal,
        hi: Literal,
    },
}

impl Predicate {
    pub fn field(&self) -> Field {
        match self {
            Predicate::Compare { field, .. } | Predicate::InRange { field, .. } => *field,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Pred(Predicate),
    Not(Box<Expr>),
    And(Vec<Expr>),
    Or(Vec<Expr>),
}

impl Expr {
    pub fn not(e: Expr) -> Expr {
        Expr::Not(Box::new(e))
    }

    /// Builds a conjunction in normal form.
    pub fn and(parts: Vec<Expr>) -> Expr {
        Self::flatten(parts, true)
    }

    /// Builds a disjunction in normal form.
    pub fn or(parts: Vec<Expr>) -> Expr {
        Self::flatten(parts, false)
    }

    fn flatten(parts: Vec<Expr>, conj: bool) -> Expr {
        let mut out = Vec::with_capacity(parts.len());
        for p in parts {
            match (p, conj) {
                (Expr::And(inner), true) | (Expr::Or(inner), false) => out.extend(inner),
                (other, _) => out.push(other),
            }
        }
        assert!(!out.is_empty(), "empty boolean connective");
        if out.len() == 1 {
            out.pop().unwrap()
        } else if conj {
            Expr::And(out)
        } else {
            Expr::Or(out)
        }
    }

    /// Calls `f` on every predicate in the tree.
    pub fn visit_preds<'a>(&'a self, f: &mut impl FnMut(&'a Predicate)) {
        match self {
            Expr::Pred(p) => f(p),
            Expr::Not(e) => e.visit_preds(f),
            Expr::And(es) | Expr::Or(es) => es.iter().for_each(|e| e.visit_preds(f)),
        }
    }

    pub fn any_pred(&self, mut f: impl FnMut(&Predicate) -> bool) -> bool {
        let mut hit = false;
        self.visit_preds(&mut |p| hit |= f(p));
        hit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryAst {
    pub target: Target,
    /// `None` matches every row.
    pub expr: Option<Expr>,
    /// Algorithm to run over the selected images before reporting them.
    pub exec: Option<String>,
}

impl QueryAst {
    pub fn select(target: Target, expr: Option<Expr>) -> Self {
        QueryAst {
            target,
            expr,
            exec: None,
        }
    }

    pub fn exec(algo_id: impl Into<String>, expr: Option<Expr>) -> Self {
        QueryAst {
            target: Target::Images,
            expr,
            exec: Some(algo_id.into()),
        }
    }

    pub fn mentions(&self, mut f: impl FnMut(Field) -> bool) -> bool {
        self.expr
            .as_ref()
            .is_some_and(|e| e.any_pred(|p| f(p.field())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryClass {
    Simple,
    Complex,
}

/// Complex queries touch derived data or run an algorithm.
pub fn classify(q: &QueryAst) -> QueryClass {
    if q.exec.is_some() || q.mentions(Field::is_derived) {
        QueryClass::Complex
    } else {
        QueryClass::Simple
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("syntax error at {position}: expected {expected}")]
    SyntaxError { position: usize, expected: String },
    #[error("unknown field `{name}` at {position}")]
    UnknownField { position: usize, name: String },
    #[error("type mismatch at {position}: {detail}")]
    TypeMismatch { position: usize, detail: String },
    #[error("empty range at {position}: lower bound exceeds upper bound")]
    BadRange { position: usize },
}

impl QueryError {
    /// Wire error code.
    pub fn code(&self) -> &'static str {
        match self {
            QueryError::SyntaxError { .. } => "SyntaxError",
            QueryError::UnknownField { .. } => "UnknownField",
            QueryError::TypeMismatch { .. } => "TypeMismatch",
            QueryError::BadRange { .. } => "BadRange",
        }
    }
}

/// Checks that a literal fits a field: type, code set and, for strings, shape.
pub(crate) fn check_literal(field: Field, lit: &Literal) -> Result<(), String> {
    match (field.field_type(), lit) {
        (FieldType::Text, Literal::Str(_)) => Ok(()),
        (FieldType::Code(codes), Literal::Str(s)) => {
            if codes.contains(&s.as_str()) {
                Ok(())
            } else {
                Err(format!("`{s}` is not one of {codes:?} for {field}"))
            }
        }
        (FieldType::Site, Literal::Str(s)) => {
            if crate::model::is_site_token(s) {
                Ok(())
            } else {
                Err(format!("`{s}` is not a site token"))
            }
        }
        (FieldType::Number, Literal::Num(v)) if v.is_finite() => Ok(()),
        (FieldType::Date, Literal::Date(_)) => Ok(()),
        (ty, lit) => Err(format!("{field} ({ty:?}) cannot be compared with {lit:?}")),
    }
}
