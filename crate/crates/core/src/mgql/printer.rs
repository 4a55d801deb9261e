use std::fmt::Write;

use crate::model::format_date;

use super::{Expr, Literal, Predicate, QueryAst};

/// Canonical text: uppercase keywords, single spaces, minimal parentheses.
pub fn print_query(q: &QueryAst) -> String {
    let mut out = match &q.exec {
        Some(algo) => format!("EXEC {algo}"),
        None => format!("SELECT {}", q.target),
    };
    if let Some(e) = &q.expr {
        out.push_str(" WHERE ");
        write_expr(&mut out, e, 0);
    }
    out
}

pub fn print_expr(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, e, 0);
    out
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Or(_) => 1,
        Expr::And(_) => 2,
        Expr::Not(_) | Expr::Pred(_) => 3,
    }
}

fn write_expr(out: &mut String, e: &Expr, min: u8) {
    let parens = precedence(e) < min;
    if parens {
        out.push('(');
    }
    match e {
        Expr::Pred(p) => write_pred(out, p),
        Expr::Not(inner) => {
            out.push_str("NOT ");
            write_expr(out, inner, 3);
        }
        Expr::And(parts) | Expr::Or(parts) => {
            let (sep, child_min) = if matches!(e, Expr::And(_)) {
                (" AND ", 3)
            } else {
                (" OR ", 2)
            };
            for (i, p) in parts.iter().enumerate() {
                if i > 0 {
                    out.push_str(sep);
                }
                write_expr(out, p, child_min);
            }
        }
    }
    if parens {
        out.push(')');
    }
}

fn write_pred(out: &mut String, p: &Predicate) {
    match p {
        Predicate::Compare { field, op, value } => {
            let _ = write!(out, "{field} {} ", op.symbol());
            write_literal(out, value);
        }
        Predicate::InRange { field, lo, hi } => {
            let _ = write!(out, "{field} IN [");
            write_literal(out, lo);
            out.push(',');
            write_literal(out, hi);
            out.push(']');
        }
    }
}

fn write_literal(out: &mut String, lit: &Literal) {
    match lit {
        Literal::Str(s) => {
            out.push('\'');
            out.push_str(&s.replace('\'', "''"));
            out.push('\'');
        }
        Literal::Num(v) => {
            let _ = write!(out, "{v}");
        }
        Literal::Date(d) => out.push_str(&format_date(*d)),
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_query;
    use super::*;

    const TABLE_QUERIES: &[&str] = &[
        "SELECT images WHERE patient.id = 'a1b2c3d4e5f60718'",
        "SELECT images WHERE patient.sex = 'F'",
        "SELECT images WHERE patient.age IN [50,60] AND image.laterality = 'L'",
    ];

    #[test]
    fn table_queries_are_canonical() {
        for q in TABLE_QUERIES {
            let ast = parse_query(q).unwrap();
            assert_eq!(&print_query(&ast), q);
            assert_eq!(parse_query(&print_query(&ast)).unwrap(), ast);
        }
    }

    #[test]
    fn canonicalization() {
        let text = "select images where ((patient.sex='F'   or patient.sex = 'O')) and not (image.view='CC' and image.laterality='R')";
        let canon = print_query(&parse_query(text).unwrap());
        assert_eq!(
            canon,
            "SELECT images WHERE (patient.sex = 'F' OR patient.sex = 'O') AND NOT (image.view = 'CC' AND image.laterality = 'R')"
        );
        assert_eq!(print_query(&parse_query(&canon).unwrap()), canon);
    }

    #[test]
    fn literals() {
        let q = parse_query("EXEC microcalc-v2 WHERE image.study_date IN [20010101,20011231] AND patient.height_m > 1.5 AND image.modality != 'o''k'").unwrap();
        assert_eq!(
            print_query(&q),
            "EXEC microcalc-v2 WHERE image.study_date IN [20010101,20011231] AND patient.height_m > 1.5 AND image.modality != 'o''k'"
        );
        assert_eq!(
            print_query(&parse_query("SELECT patients").unwrap()),
            "SELECT patients"
        );
        assert_eq!(
            print_query(&parse_query("SELECT images WHERE patient.age > 50.0").unwrap()),
            "SELECT images WHERE patient.age > 50"
        );
    }
}
