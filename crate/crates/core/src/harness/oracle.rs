//! Brute-force reference answers: filter the concatenated dumps of every site
//! with a separate evaluator and render rows the way MG-XML does.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use chrono::NaiveDate;

use crate::mgql::{parse_query, CmpOp, Expr, Field, Literal, Predicate, QueryError, Target};
use crate::model::DerivedKind;
use crate::store::JoinedRow;

/// One expected row: site, row id and rendered column values.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RefRow {
    pub site: String,
    pub id: String,
    pub values: Vec<Option<String>>,
}

#[derive(Debug, Clone)]
enum V {
    S(String),
    N(f64),
    D(NaiveDate),
    Kinds(Vec<String>),
}

struct Flat {
    site: String,
    local_id: u64,
    pid: String,
    sex: String,
    birth_year: i32,
    age: u32,
    height: Option<f64>,
    weight: Option<f64>,
    laterality: String,
    view: String,
    modality: String,
    study_date: NaiveDate,
    kinds: Vec<String>,
    density: Option<f64>,
    findings: Option<f64>,
}

fn flatten(r: &JoinedRow) -> Option<Flat> {
    let img = r.image.as_ref()?;
    let field =
        |k: DerivedKind, name: &str| r.derived.get(&k).and_then(|d| d.fields.get(name).copied());
    Some(Flat {
        site: r.site.to_string(),
        local_id: img.local_id,
        pid: r.patient.pid.to_string(),
        sex: r.patient.sex.code().into(),
        birth_year: r.patient.birth_year,
        age: img.age_at_study,
        height: r.patient.height_m,
        weight: r.patient.weight_kg,
        laterality: img.laterality.code().into(),
        view: img.view.code().into(),
        modality: img.modality.clone(),
        study_date: img.study_date,
        kinds: r.derived.keys().map(|k| k.code().to_string()).collect(),
        density: field(DerivedKind::Smf, "density_pct"),
        findings: field(DerivedKind::Cade, "num_findings"),
    })
}

fn lookup(f: &Flat, field: Field) -> Option<V> {
    let s = |x: &str| Some(V::S(x.to_string()));
    match field {
        Field::PatientId => s(&f.pid),
        Field::PatientSex => s(&f.sex),
        Field::PatientAge => Some(V::N(f64::from(f.age))),
        Field::PatientHeight => f.height.map(V::N),
        Field::PatientWeight => f.weight.map(V::N),
        Field::ImageLaterality => s(&f.laterality),
        Field::ImageView => s(&f.view),
        Field::ImageModality => s(&f.modality),
        Field::ImageStudyDate => Some(V::D(f.study_date)),
        Field::DerivedKind => Some(V::Kinds(f.kinds.clone())),
        Field::DerivedDensity => f.density.map(V::N),
        Field::DerivedFindings => f.findings.map(V::N),
        Field::SiteId => s(&f.site),
    }
}

fn cmp(v: &V, l: &Literal) -> Option<Ordering> {
    match (v, l) {
        (V::S(a), Literal::Str(b)) => Some(a.as_str().cmp(b.as_str())),
        (V::N(a), Literal::Num(b)) => a.partial_cmp(b),
        (V::D(a), Literal::Date(b)) => Some(a.cmp(b)),
        _ => None,
    }
}

fn holds(p: &Predicate, f: &Flat) -> bool {
    match p {
        Predicate::Compare { field, op, value } => {
            let Some(v) = lookup(f, *field) else {
                return false;
            };
            if let V::Kinds(ks) = &v {
                let Literal::Str(k) = value else { return false };
                return match op {
                    CmpOp::Eq => ks.iter().any(|x| x == k),
                    CmpOp::Ne => !ks.is_empty() && ks.iter().all(|x| x != k),
                    _ => false,
                };
            }
            let Some(o) = cmp(&v, value) else {
                return false;
            };
            match op {
                CmpOp::Eq => o.is_eq(),
                CmpOp::Ne => o.is_ne(),
                CmpOp::Lt => o.is_lt(),
                CmpOp::Le => o.is_le(),
                CmpOp::Gt => o.is_gt(),
                CmpOp::Ge => o.is_ge(),
            }
        }
        Predicate::InRange { field, lo, hi } => {
            let Some(v) = lookup(f, *field) else {
                return false;
            };
            cmp(&v, lo).is_some_and(Ordering::is_ge) && cmp(&v, hi).is_some_and(Ordering::is_le)
        }
    }
}

fn matches(e: &Expr, f: &Flat) -> bool {
    match e {
        Expr::Pred(p) => holds(p, f),
        Expr::Not(x) => !matches(x, f),
        Expr::And(xs) => xs.iter().all(|x| matches(x, f)),
        Expr::Or(xs) => xs.iter().any(|x| matches(x, f)),
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Evaluates `query` over every row of every site.
pub fn oracle_eval(dumps: &[JoinedRow], query: &str) -> Result<Vec<RefRow>, QueryError> {
    let q = parse_query(query)?;
    let flats: Vec<Flat> = dumps.iter().filter_map(flatten).collect();
    let hits = flats
        .iter()
        .filter(|f| q.expr.as_ref().is_none_or(|e| matches(e, f)));
    let mut out: Vec<(String, u64, RefRow)> = Vec::new();
    match q.target {
        Target::Images => {
            for f in hits {
                let values = vec![
                    Some(f.pid.clone()),
                    Some(f.sex.clone()),
                    Some(f.age.to_string()),
                    f.height.map(num),
                    f.weight.map(num),
                    Some(f.laterality.clone()),
                    Some(f.view.clone()),
                    Some(f.modality.clone()),
                    Some(f.study_date.format("%Y%m%d").to_string()),
                    f.density.map(|d| format!("{d:.2}")),
                    f.findings.map(num),
                ];
                let id = format!("{}:{}", f.site, f.local_id);
                out.push((
                    f.site.clone(),
                    f.local_id,
                    RefRow {
                        site: f.site.clone(),
                        id,
                        values,
                    },
                ));
            }
        }
        Target::Patients => {
            let mut seen = BTreeSet::new();
            for f in hits {
                if !seen.insert((f.site.clone(), f.pid.clone())) {
                    continue;
                }
                let values = vec![
                    Some(f.pid.clone()),
                    Some(f.sex.clone()),
                    Some(f.birth_year.to_string()),
                    f.height.map(num),
                    f.weight.map(num),
                ];
                out.push((
                    f.site.clone(),
                    0,
                    RefRow {
                        site: f.site.clone(),
                        id: f.pid.clone(),
                        values,
                    },
                ));
            }
        }
    }
    out.sort_by(|a, b| (&a.0, a.1, &a.2.id).cmp(&(&b.0, b.1, &b.2.id)));
    Ok(out.into_iter().map(|(_, _, r)| r).collect())
}

/// The same rows as a merged result set would carry them.
pub fn result_rows(rs: &crate::federation::ResultSet) -> Vec<RefRow> {
    rs.rows
        .iter()
        .map(|r| RefRow {
            site: r.site.to_string(),
            id: r.id.clone(),
            values: r.values.clone(),
        })
        .collect()
}
