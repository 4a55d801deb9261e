//! Query decomposition, local execution and merging of per-site results.
//!
//! Data is partitioned horizontally: every site holds disjoint patients, so a
//! query decomposes into the same predicate sent to every site it routes to.
//! `site.id` predicates are resolved here, per site, and never travel.

mod resultset;

use std::time::Duration;

use thiserror::Error;

use crate::mgql::{eval, CmpOp, Expr, Field, Literal, Predicate, QueryAst, Target};
use crate::model::{SiteDescriptor, SiteId};
use crate::store::{ScanTarget, Store, StoreError};

pub use resultset::{columns_for, from_xml, project, to_xml, Missing, ResultSet, Row};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(5000);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FederationError {
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("result sets disagree on columns")]
    ColumnMismatch,
    #[error("store failure: {0}")]
    StoreFailure(#[from] StoreError),
    #[error("malformed MG-XML: {0}")]
    MalformedXml(String),
    #[error("MG-XML schema violation: {0}")]
    SchemaViolation(String),
}

impl FederationError {
    pub fn code(&self) -> &'static str {
        match self {
            FederationError::UnknownSite(_) => "UnknownSite",
            FederationError::ColumnMismatch => "ColumnMismatch",
            FederationError::StoreFailure(_) => "StoreFailure",
            FederationError::MalformedXml(_) => "MalformedXml",
            FederationError::SchemaViolation(_) => "SchemaViolation",
        }
    }
}

/// Why a site contributed no rows.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SiteFailure {
    #[error("timeout")]
    Timeout,
    #[error("connection_refused")]
    ConnectionRefused,
    #[error("remote_error:{0}")]
    RemoteError(String),
    #[error("unreachable")]
    Unreachable,
}

impl SiteFailure {
    /// The `reason` attribute of a `<missing>` entry.
    pub fn reason(&self) -> String {
        self.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedQuery {
    /// `None` when routing excludes the decomposing site.
    pub local: Option<QueryAst>,
    pub remote: Vec<(SiteId, QueryAst)>,
}

impl DecomposedQuery {
    pub fn sites(&self, self_site: &SiteId) -> Vec<SiteId> {
        let mut out: Vec<SiteId> = self.remote.iter().map(|(s, _)| s.clone()).collect();
        if self.local.is_some() {
            out.push(self_site.clone());
        }
        out.sort();
        out
    }
}

enum Residual {
    True,
    False,
    Expr(Expr),
}

fn site_literal(p: &Predicate) -> Option<(CmpOp, &str)> {
    match p {
        Predicate::Compare {
            field: Field::SiteId,
            op,
            value: Literal::Str(s),
        } => Some((*op, s.as_str())),
        _ => None,
    }
}

/// Partially evaluates every `site.id` predicate for `site`.
fn residual(e: &Expr, site: &str) -> Residual {
    match e {
        Expr::Pred(p) => match site_literal(p) {
            Some((CmpOp::Eq, s)) if s == site => Residual::True,
            Some((CmpOp::Ne, s)) if s != site => Residual::True,
            Some(_) => Residual::False,
            None => Residual::Expr(e.clone()),
        },
        Expr::Not(inner) => match residual(inner, site) {
            Residual::True => Residual::False,
            Residual::False => Residual::True,
            Residual::Expr(x) => Residual::Expr(Expr::not(x)),
        },
        Expr::And(es) | Expr::Or(es) => {
            let conj = matches!(e, Expr::And(_));
            let mut kept = Vec::new();
            for part in es {
                match (residual(part, site), conj) {
                    (Residual::False, true) => return Residual::False,
                    (Residual::True, false) => return Residual::True,
                    (Residual::True, true) | (Residual::False, false) => {}
                    (Residual::Expr(x), _) => kept.push(x),
                }
            }
            match (kept.is_empty(), conj) {
                (true, true) => Residual::True,
                (true, false) => Residual::False,
                (false, true) => Residual::Expr(Expr::and(kept)),
                (false, false) => Residual::Expr(Expr::or(kept)),
            }
        }
    }
}

/// Splits `q` into the part run here and the parts forwarded to peers.
///
/// Only the decomposing site and public peers are candidates, in topology
/// order. Forwarded queries carry no `site.id` predicates.
pub fn analyze(
    q: &QueryAst,
    self_site: &SiteId,
    topology: &[SiteDescriptor],
) -> Result<DecomposedQuery, FederationError> {
    if let Some(e) = &q.expr {
        let mut unknown = None;
        e.visit_preds(&mut |p| {
            if let Some((_, s)) = site_literal(p) {
                if unknown.is_none() && !topology.iter().any(|d| d.site_id.as_str() == s) {
                    unknown = Some(s.to_string());
                }
            }
        });
        if let Some(s) = unknown {
            return Err(FederationError::UnknownSite(s));
        }
    }
    let mut out = DecomposedQuery {
        local: None,
        remote: Vec::new(),
    };
    let mut consider: Vec<&SiteId> = vec![self_site];
    for d in topology {
        if d.public && &d.site_id != self_site && !consider.contains(&&d.site_id) {
            consider.push(&d.site_id);
        }
    }
    for site in consider {
        let routed = match &q.expr {
            None => Some(None),
            Some(e) => match residual(e, site.as_str()) {
                Residual::True => Some(None),
                Residual::False => None,
                Residual::Expr(x) => Some(Some(x)),
            },
        };
        let Some(expr) = routed else { continue };
        let sub = QueryAst {
            target: q.target,
            expr,
            exec: q.exec.clone(),
        };
        if site == self_site {
            out.local = Some(sub);
        } else {
            out.remote.push((site.clone(), sub));
        }
    }
    Ok(out)
}

fn scan_target(t: Target) -> ScanTarget {
    match t {
        Target::Images => ScanTarget::Images,
        Target::Patients => ScanTarget::Patients,
    }
}

/// Runs `q` against this site's store only; any `EXEC` clause must already
/// have been carried out.
pub fn execute_local(store: &Store, q: &QueryAst) -> Result<ResultSet, FederationError> {
    let rows = match &q.expr {
        None => store.scan(&|_| true, scan_target(q.target))?,
        Some(e) => match residual(e, store.site().as_str()) {
            Residual::True => store.scan(&|_| true, scan_target(q.target))?,
            Residual::False => Vec::new(),
            Residual::Expr(x) => store.scan(&|r| eval(&x, r), scan_target(q.target))?,
        },
    };
    Ok(ResultSet::from_rows(q.target, &rows))
}

/// Concatenates per-site outcomes. Failed parts become `<missing>` entries.
pub fn merge(
    target: Target,
    parts: Vec<(SiteId, Result<ResultSet, SiteFailure>)>,
) -> Result<ResultSet, FederationError> {
    let mut out = ResultSet::empty(target);
    for (site, part) in parts {
        match part {
            Ok(rs) => {
                if rs.target != target || rs.columns != out.columns {
                    return Err(FederationError::ColumnMismatch);
                }
                out.rows.extend(rs.rows);
                out.missing.extend(rs.missing);
            }
            Err(f) => out.missing.push(Missing {
                site,
                reason: f.reason(),
            }),
        }
    }
    out.sort();
    Ok(out)
}

/// Fans a decomposed query out concurrently and merges the answers.
///
/// `remote` is called once per routed peer, each on its own thread.
pub fn federate<L, R>(
    q: &QueryAst,
    self_site: &SiteId,
    topology: &[SiteDescriptor],
    local: L,
    remote: R,
) -> Result<ResultSet, FederationError>
where
    L: FnOnce(&QueryAst) -> Result<ResultSet, FederationError>,
    R: Fn(&SiteId, &QueryAst) -> Result<ResultSet, SiteFailure> + Sync,
{
    let plan = analyze(q, self_site, topology)?;
    let remote = &remote;
    let (local_part, mut parts) = std::thread::scope(|s| {
        let handles: Vec<_> = plan
            .remote
            .iter()
            .map(|(site, sub)| (site.clone(), s.spawn(move || remote(site, sub))))
            .collect();
        let local_part = plan.local.as_ref().map(local);
        let parts = handles
            .into_iter()
            .map(|(site, h)| {
                let r = h
                    .join()
                    .unwrap_or_else(|_| Err(SiteFailure::RemoteError("InternalError".into())));
                (site, r)
            })
            .collect::<Vec<_>>();
        (local_part, parts)
    });
    if let Some(l) = local_part {
        parts.push((self_site.clone(), Ok(l?)));
    }
    merge(q.target, parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mgql::{parse_query, print_query};

    fn topo(ids: &[&str]) -> Vec<SiteDescriptor> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| SiteDescriptor {
                site_id: SiteId::new(*id).unwrap(),
                display_name: id.to_string(),
                address: format!("127.0.0.1:{}", 7000 + i),
                public: true,
            })
            .collect()
    }

    fn sid(s: &str) -> SiteId {
        SiteId::new(s).unwrap()
    }

    fn q(text: &str) -> QueryAst {
        parse_query(text).unwrap()
    }

    #[test]
    fn broadcast_without_site_predicate() {
        let all_female = q("SELECT images WHERE patient.sex = 'F'");
        let d = analyze(
            &all_female,
            &sid("cambridge"),
            &topo(&["cambridge", "udine"]),
        )
        .unwrap();
        assert_eq!(d.local.as_ref(), Some(&all_female));
        assert_eq!(d.remote, vec![(sid("udine"), all_female.clone())]);

        let d = analyze(&all_female, &sid("cambridge"), &topo(&["cambridge"])).unwrap();
        assert!(d.remote.is_empty());
    }

    #[test]
    fn routing_consumes_site_predicates() {
        let t = topo(&["cambridge", "udine", "cern"]);
        let d = analyze(
            &q("SELECT images WHERE site.id = 'cambridge' AND patient.sex = 'F'"),
            &sid("cambridge"),
            &t,
        )
        .unwrap();
        assert_eq!(
            print_query(d.local.as_ref().unwrap()),
            "SELECT images WHERE patient.sex = 'F'"
        );
        assert!(d.remote.is_empty());

        let d = analyze(
            &q("SELECT images WHERE site.id = 'udine'"),
            &sid("cambridge"),
            &t,
        )
        .unwrap();
        assert!(d.local.is_none());
        assert_eq!(d.remote, vec![(sid("udine"), q("SELECT images"))]);

        let d = analyze(
            &q("SELECT images WHERE NOT site.id = 'udine' OR patient.age > 60"),
            &sid("cambridge"),
            &t,
        )
        .unwrap();
        assert_eq!(d.local, Some(q("SELECT images")));
        assert_eq!(
            d.remote,
            vec![
                (sid("udine"), q("SELECT images WHERE patient.age > 60")),
                (sid("cern"), q("SELECT images"))
            ]
        );
        assert_eq!(
            d.sites(&sid("cambridge")),
            vec![sid("cambridge"), sid("cern"), sid("udine")]
        );

        let d = analyze(
            &q("SELECT images WHERE site.id = 'udine' AND patient.age > 60"),
            &sid("cern"),
            &t,
        )
        .unwrap();
        assert_eq!(
            d.remote,
            vec![(sid("udine"), q("SELECT images WHERE patient.age > 60"))]
        );
        assert!(d.local.is_none());
    }

    #[test]
    fn unknown_site_is_rejected() {
        let e = analyze(
            &q("SELECT images WHERE site.id = 'oxford'"),
            &sid("cambridge"),
            &topo(&["cambridge"]),
        );
        assert_eq!(e, Err(FederationError::UnknownSite("oxford".into())));
    }

    #[test]
    fn private_sites_are_skipped() {
        let mut t = topo(&["a", "b", "c"]);
        t[1].public = false;
        let d = analyze(&q("SELECT images"), &sid("a"), &t).unwrap();
        assert_eq!(d.remote.len(), 1);
        assert_eq!(d.remote[0].0, sid("c"));
    }

    #[test]
    fn merge_rules() {
        let row = |site: &str, id: u64| Row {
            site: sid(site),
            id: format!("{site}:{id}"),
            values: vec![None; 11],
        };
        let mut a = ResultSet::empty(Target::Images);
        a.rows = vec![row("b", 10), row("b", 2)];
        let one = merge(Target::Images, vec![(sid("b"), Ok(a.clone()))]).unwrap();
        assert_eq!(
            one.rows.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["b:2", "b:10"]
        );

        let with_empty = merge(
            Target::Images,
            vec![
                (sid("b"), Ok(a.clone())),
                (sid("a"), Ok(ResultSet::empty(Target::Images))),
            ],
        )
        .unwrap();
        assert_eq!(with_empty, one);
        assert!(with_empty.complete);

        let failed = merge(
            Target::Images,
            vec![
                (sid("b"), Ok(a.clone())),
                (sid("a"), Err(SiteFailure::Timeout)),
            ],
        )
        .unwrap();
        assert!(!failed.complete);
        assert_eq!(
            failed.missing,
            vec![Missing {
                site: sid("a"),
                reason: "timeout".into()
            }]
        );
        assert_eq!(failed.rows, one.rows);

        let p = ResultSet::empty(Target::Patients);
        assert_eq!(
            merge(Target::Images, vec![(sid("a"), Ok(p))]),
            Err(FederationError::ColumnMismatch)
        );
    }

    #[test]
    fn empty_xml() {
        let rs = ResultSet::empty(Target::Images);
        assert_eq!(
            to_xml(&rs),
            "<resultset target=\"images\" complete=\"true\"/>"
        );
        assert_eq!(from_xml(&to_xml(&rs)).unwrap(), rs);
    }

    #[test]
    fn xml_layout_and_escaping() {
        let mut rs = ResultSet::empty(Target::Patients);
        rs.rows.push(Row {
            site: sid("udine"),
            id: "a1b2c3d4e5f60718".into(),
            values: vec![
                Some("a1b2c3d4e5f60718".into()),
                Some("<F&'\">".into()),
                None,
                Some("".into()),
                None,
            ],
        });
        rs.missing.push(Missing {
            site: sid("cambridge"),
            reason: "timeout".into(),
        });
        rs.complete = false;
        let xml = to_xml(&rs);
        assert_eq!(
            xml,
            "<resultset target=\"patients\" complete=\"false\">\n  \
             <row site=\"udine\" id=\"a1b2c3d4e5f60718\">\n    \
             <col name=\"patient.id\">a1b2c3d4e5f60718</col>\n    \
             <col name=\"patient.sex\">&lt;F&amp;&apos;&quot;&gt;</col>\n    \
             <col name=\"patient.height_m\"></col>\n  \
             </row>\n  \
             <missing site=\"cambridge\" reason=\"timeout\"/>\n\
             </resultset>"
        );
        assert_eq!(from_xml(&xml).unwrap(), rs);
    }

    #[test]
    fn xml_rejects_garbage() {
        assert!(matches!(
            from_xml("<resultset"),
            Err(FederationError::MalformedXml(_))
        ));
        assert!(matches!(
            from_xml("<resultset target=\"x\" complete=\"true\"/>"),
            Err(FederationError::SchemaViolation(_))
        ));
        assert!(matches!(
            from_xml(""),
            Err(FederationError::MalformedXml(_) | FederationError::SchemaViolation(_))
        ));
        let bad_col = "<resultset target=\"images\" complete=\"true\">\n<row site=\"a\" id=\"a:1\"><col name=\"nope\">1</col></row></resultset>";
        assert!(matches!(
            from_xml(bad_col),
            Err(FederationError::SchemaViolation(_))
        ));
        let lying = "<resultset target=\"images\" complete=\"true\">\n<missing site=\"a\" reason=\"timeout\"/></resultset>";
        assert!(matches!(
            from_xml(lying),
            Err(FederationError::SchemaViolation(_))
        ));
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn value() -> impl Strategy<Value = Option<String>> {
            prop::option::of(
                prop::string::string_regex("[ -~\\n\\té<>&'\"\\x01\\r]{0,12}").unwrap(),
            )
        }

        prop_compose! {
            fn row(ncols: usize)(site in "[a-z]{1,6}", local in 1u64..10_000, values in prop::collection::vec(value(), ncols)) -> Row {
                Row { id: format!("{site}:{local}"), site: SiteId::new(site).unwrap(), values }
            }
        }

        fn result_set() -> impl Strategy<Value = ResultSet> {
            prop_oneof![Just(Target::Images), Just(Target::Patients)].prop_flat_map(|t| {
                let n = columns_for(t).len();
                (
                    prop::collection::vec(row(n), 0..6),
                    prop::collection::vec(("[a-z_]{1,8}", "[ -~]{0,16}"), 0..3),
                )
                    .prop_map(move |(rows, missing)| {
                        let mut rs = ResultSet::empty(t);
                        rs.rows = rows;
                        rs.missing = missing
                            .into_iter()
                            .map(|(s, reason)| Missing {
                                site: SiteId::new(s).unwrap(),
                                reason,
                            })
                            .collect();
                        rs.sort();
                        rs
                    })
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn xml_round_trip(rs in result_set()) {
                let xml = to_xml(&rs);
                prop_assert_eq!(from_xml(&xml).unwrap(), rs.clone());
                prop_assert_eq!(to_xml(&from_xml(&xml).unwrap()), xml);
            }
        }
    }
}
