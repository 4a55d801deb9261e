use std::borrow::Cow;
use std::cmp::Ordering;

use chrono::NaiveDate;

use super::{CmpOp, Expr, Field, Literal, Predicate};

/// A field value as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub enum Value<'a> {
    Text(Cow<'a, str>),
    Num(f64),
    Date(NaiveDate),
    /// Codes of the derived-record kinds present on the row.
    Kinds(Vec<&'static str>),
}

/// Anything a predicate can be evaluated against.
pub trait FieldSource {
    /// `None` when the row has no value for the field.
    fn value(&self, field: Field) -> Option<Value<'_>>;
}

/// Evaluates `expr` against a row.
///
/// A predicate over a field the row lacks is false; `NOT` then negates that
/// false like any other. `derived.kind != k` needs at least one derived
/// record on the row.
pub fn eval(expr: &Expr, row: &dyn FieldSource) -> bool {
    match expr {
        Expr::Pred(p) => eval_pred(p, row),
        Expr::Not(e) => !eval(e, row),
        Expr::And(es) => es.iter().all(|e| eval(e, row)),
        Expr::Or(es) => es.iter().any(|e| eval(e, row)),
    }
}

fn eval_pred(p: &Predicate, row: &dyn FieldSource) -> bool {
    let Some(v) = row.value(p.field()) else {
        return false;
    };
    match p {
        Predicate::Compare { op, value, .. } => compare(&v, *op, value),
        Predicate::InRange { lo, hi, .. } => {
            matches!(order(&v, lo), Some(Ordering::Greater | Ordering::Equal))
                && matches!(order(&v, hi), Some(Ordering::Less | Ordering::Equal))
        }
    }
}

fn compare(v: &Value<'_>, op: CmpOp, lit: &Literal) -> bool {
    if let (Value::Kinds(kinds), Literal::Str(k)) = (v, lit) {
        if kinds.is_empty() {
            return false;
        }
        let has = kinds.contains(&k.as_str());
        return match op {
            CmpOp::Eq => has,
            CmpOp::Ne => !has,
            _ => false,
        };
    }
    let Some(ord) = order(v, lit) else {
        return false;
    };
    match op {
        CmpOp::Eq => ord == Ordering::Equal,
        CmpOp::Ne => ord != Ordering::Equal,
        CmpOp::Lt => ord == Ordering::Less,
        CmpOp::Le => ord != Ordering::Greater,
        CmpOp::Gt => ord == Ordering::Greater,
        CmpOp::Ge => ord != Ordering::Less,
    }
}

fn order(v: &Value<'_>, lit: &Literal) -> Option<Ordering> {
    match (v, lit) {
        (Value::Text(a), Literal::Str(b)) => Some(a.as_ref().cmp(b.as_str())),
        (Value::Num(a), Literal::Num(b)) => a.partial_cmp(b),
        (Value::Date(a), Literal::Date(b)) => Some(a.cmp(b)),
        _ => None,
    }
}
