//! Seeded query suites over a corpus.

use chrono::NaiveDate;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mgql::{
    parse_query, print_query, CmpOp, Expr, Field, Literal, Predicate, QueryAst, Target,
};

/// What the generator may mention.
#[derive(Debug, Clone)]
pub struct SuiteInputs {
    /// Stored patient pseudonyms.
    pub pids: Vec<String>,
    pub sites: Vec<String>,
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

fn cmp(field: Field, op: CmpOp, value: Literal) -> Expr {
    Expr::Pred(Predicate::Compare { field, op, value })
}

fn s(v: &str) -> Literal {
    Literal::Str(v.to_string())
}

const ORDERED: &[CmpOp] = CmpOp::ALL;
const EQUALITY: &[CmpOp] = &[CmpOp::Eq, CmpOp::Ne];

struct Gen<'a> {
    rng: ChaCha8Rng,
    inputs: &'a SuiteInputs,
    allow_site: bool,
}

impl Gen<'_> {
    fn op(&mut self, ops: &[CmpOp]) -> CmpOp {
        *ops.choose(&mut self.rng).expect("non-empty")
    }

    fn age(&mut self) -> f64 {
        f64::from(self.rng.random_range(25..=85u32))
    }

    fn study_date(&mut self) -> NaiveDate {
        date(2000, 1, 1) + chrono::Duration::days(self.rng.random_range(0..=2190))
    }

    fn pred(&mut self) -> Expr {
        let pick = self
            .rng
            .random_range(0..if self.allow_site { 13 } else { 12 });
        match pick {
            0 => {
                let pid = self
                    .inputs
                    .pids
                    .choose(&mut self.rng)
                    .cloned()
                    .unwrap_or_else(|| "0000000000000000".into());
                let op = self.op(EQUALITY);
                cmp(Field::PatientId, op, Literal::Str(pid))
            }
            1 | 2 => {
                let sex = *["F", "F", "M", "O"].choose(&mut self.rng).unwrap();
                let op = self.op(EQUALITY);
                cmp(Field::PatientSex, op, s(sex))
            }
            3 => {
                if self.rng.random_bool(0.5) {
                    let (a, b) = (self.age(), self.age());
                    Expr::Pred(Predicate::InRange {
                        field: Field::PatientAge,
                        lo: Literal::Num(a.min(b)),
                        hi: Literal::Num(a.max(b)),
                    })
                } else {
                    let (op, a) = (self.op(ORDERED), self.age());
                    cmp(Field::PatientAge, op, Literal::Num(a))
                }
            }
            4 => {
                let h = f64::from(self.rng.random_range(148..=185u32)) / 100.0;
                let op = self.op(ORDERED);
                cmp(Field::PatientHeight, op, Literal::Num(h))
            }
            5 => {
                let w = f64::from(self.rng.random_range(45..=110u32));
                let op = self.op(ORDERED);
                cmp(Field::PatientWeight, op, Literal::Num(w))
            }
            6 => {
                let l = *["L", "R"].choose(&mut self.rng).unwrap();
                let op = self.op(EQUALITY);
                cmp(Field::ImageLaterality, op, s(l))
            }
            7 => {
                let v = *["CC", "MLO"].choose(&mut self.rng).unwrap();
                let op = self.op(EQUALITY);
                cmp(Field::ImageView, op, s(v))
            }
            8 => {
                let m = *["MG", "MG", "CR"].choose(&mut self.rng).unwrap();
                let op = self.op(EQUALITY);
                cmp(Field::ImageModality, op, s(m))
            }
            9 => {
                if self.rng.random_bool(0.5) {
                    let (a, b) = (self.study_date(), self.study_date());
                    Expr::Pred(Predicate::InRange {
                        field: Field::ImageStudyDate,
                        lo: Literal::Date(a.min(b)),
                        hi: Literal::Date(a.max(b)),
                    })
                } else {
                    let (op, d) = (self.op(ORDERED), self.study_date());
                    cmp(Field::ImageStudyDate, op, Literal::Date(d))
                }
            }
            10 => {
                let k = *["smf", "cade"].choose(&mut self.rng).unwrap();
                let op = self.op(EQUALITY);
                cmp(Field::DerivedKind, op, s(k))
            }
            11 => {
                if self.rng.random_bool(0.5) {
                    let (op, d) = (
                        self.op(ORDERED),
                        f64::from(self.rng.random_range(10..=70u32)),
                    );
                    cmp(Field::DerivedDensity, op, Literal::Num(d))
                } else {
                    let (op, n) = (self.op(ORDERED), f64::from(self.rng.random_range(0..=5u32)));
                    cmp(Field::DerivedFindings, op, Literal::Num(n))
                }
            }
            _ => {
                let site = self
                    .inputs
                    .sites
                    .choose(&mut self.rng)
                    .cloned()
                    .unwrap_or_else(|| "nowhere".into());
                let op = self.op(EQUALITY);
                cmp(Field::SiteId, op, Literal::Str(site))
            }
        }
    }

    fn expr(&mut self, depth: u32) -> Expr {
        if depth == 0 || self.rng.random_bool(0.35) {
            return self.pred();
        }
        match self.rng.random_range(0..5) {
            0 => Expr::not(self.expr(depth - 1)),
            1 | 2 => {
                let n = self.rng.random_range(2..=3);
                Expr::And((0..n).map(|_| self.expr(depth - 1)).collect())
            }
            _ => {
                let n = self.rng.random_range(2..=3);
                Expr::Or((0..n).map(|_| self.expr(depth - 1)).collect())
            }
        }
    }
}

/// The three query forms of the original evaluation: by id, all female,
/// and age range with laterality.
pub fn table2_queries(pid: &str) -> Vec<String> {
    vec![
        format!("SELECT images WHERE patient.id = '{pid}'"),
        "SELECT patients WHERE patient.sex = 'F'".to_string(),
        "SELECT images WHERE patient.age IN [50,60] AND image.laterality = 'L'".to_string(),
    ]
}

/// `n` canonical query texts. Roughly one in eight mentions `site.id`.
pub fn gen_suite(seed: u64, n: usize, inputs: &SuiteInputs) -> Vec<String> {
    let pid = inputs
        .pids
        .first()
        .cloned()
        .unwrap_or_else(|| "0000000000000000".into());
    let mut out = table2_queries(&pid);
    out.push("SELECT images".to_string());
    out.push("SELECT patients".to_string());
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        inputs,
        allow_site: false,
    };
    while out.len() < n {
        g.allow_site = g.rng.random_bool(0.125);
        let target = if g.rng.random_bool(0.7) {
            Target::Images
        } else {
            Target::Patients
        };
        let expr = g.expr(3);
        out.push(print_query(&QueryAst::select(target, Some(expr))));
    }
    out.truncate(n.max(5));
    out.iter()
        .map(|q| print_query(&parse_query(q).expect("generated queries parse")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> SuiteInputs {
        SuiteInputs {
            pids: vec!["0123456789abcdef".into(), "fedcba9876543210".into()],
            sites: vec!["cambridge".into(), "udine".into()],
        }
    }

    #[test]
    fn suites_parse_and_repeat() {
        let a = gen_suite(1, 250, &inputs());
        assert_eq!(a.len(), 250);
        assert_eq!(a, gen_suite(1, 250, &inputs()));
        for q in &a {
            let ast = parse_query(q).unwrap_or_else(|e| panic!("{q}: {e}"));
            assert_eq!(&print_query(&ast), q);
        }
        let with_site = a.iter().filter(|q| q.contains("site.id")).count();
        assert!(with_site > 5 && with_site < 80, "{with_site}");
    }
}
