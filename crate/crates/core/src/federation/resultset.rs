use std::fmt::Write as _;

use quick_xml::escape::{escape, resolve_xml_entity};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::FederationError;
use crate::mgql::Target;
use crate::model::{format_date, parse_gfid, SiteId};
use crate::store::JoinedRow;

const IMAGE_COLUMNS: &[&str] = &[
    "patient.id",
    "patient.sex",
    "patient.age",
    "patient.height_m",
    "patient.weight_kg",
    "image.laterality",
    "image.view",
    "image.modality",
    "image.study_date",
    "derived.density_pct",
    "derived.num_findings",
];

const PATIENT_COLUMNS: &[&str] = &[
    "patient.id",
    "patient.sex",
    "patient.birth_year",
    "patient.height_m",
    "patient.weight_kg",
];

/// The fixed column list reported for a target.
pub fn columns_for(target: Target) -> &'static [&'static str] {
    match target {
        Target::Images => IMAGE_COLUMNS,
        Target::Patients => PATIENT_COLUMNS,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub site: SiteId,
    /// gfid for image rows, pseudonym for patient rows.
    pub id: String,
    /// Aligned with the result set's columns; `None` when the row has no value.
    pub values: Vec<Option<String>>,
}

impl Row {
    fn sort_key(&self) -> (&str, u64, &str) {
        let local = parse_gfid(&self.id).map(|g| g.local_id).unwrap_or(0);
        (self.site.as_str(), local, self.id.as_str())
    }

    pub fn get<'a>(&'a self, columns: &[String], name: &str) -> Option<&'a str> {
        let i = columns.iter().position(|c| c == name)?;
        self.values[i].as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Missing {
    pub site: SiteId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultSet {
    pub target: Target,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub complete: bool,
    pub missing: Vec<Missing>,
}

impl ResultSet {
    pub fn empty(target: Target) -> ResultSet {
        ResultSet {
            target,
            columns: columns_for(target).iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            complete: true,
            missing: Vec::new(),
        }
    }

    /// Builds a complete set from store rows.
    pub fn from_rows(target: Target, rows: &[JoinedRow]) -> ResultSet {
        let mut rs = ResultSet::empty(target);
        rs.rows = rows.iter().map(|r| project(target, r)).collect();
        rs.sort();
        rs
    }

    /// Restores row order and the `complete` flag.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        self.missing.sort_by(|a, b| a.site.cmp(&b.site));
        self.complete = self.missing.is_empty();
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_xml(&self) -> String {
        to_xml(self)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// One result row in wire form.
pub fn project(target: Target, r: &JoinedRow) -> Row {
    let p = &r.patient;
    match target {
        Target::Patients => Row {
            site: r.site.clone(),
            id: p.pid.to_string(),
            values: vec![
                Some(p.pid.to_string()),
                Some(p.sex.code().to_string()),
                Some(p.birth_year.to_string()),
                p.height_m.map(num),
                p.weight_kg.map(num),
            ],
        },
        Target::Images => {
            let img = r.image.as_ref().expect("image rows carry an image");
            let derived = |kind, field: &str| {
                r.derived
                    .get(&kind)
                    .and_then(|d| d.fields.get(field))
                    .copied()
            };
            Row {
                site: r.site.clone(),
                id: format!("{}:{}", r.site, img.local_id),
                values: vec![
                    Some(p.pid.to_string()),
                    Some(p.sex.code().to_string()),
                    Some(img.age_at_study.to_string()),
                    p.height_m.map(num),
                    p.weight_kg.map(num),
                    Some(img.laterality.code().to_string()),
                    Some(img.view.code().to_string()),
                    Some(img.modality.clone()),
                    Some(format_date(img.study_date)),
                    derived(crate::model::DerivedKind::Smf, "density_pct")
                        .map(|v| format!("{v:.2}")),
                    derived(crate::model::DerivedKind::Cade, "num_findings").map(num),
                ],
            }
        }
    }
}

fn esc(s: &str) -> String {
    let e = escape(s);
    if !e.chars().any(|c| c.is_control() && c != '\n' && c != '\t') {
        return e.into_owned();
    }
    let mut out = String::with_capacity(e.len());
    for c in e.chars() {
        if c.is_control() && c != '\n' && c != '\t' {
            let _ = write!(out, "&#x{:X};", c as u32);
        } else {
            out.push(c);
        }
    }
    out
}

/// Serializes to MG-XML. Output is a pure function of the set.
pub fn to_xml(r: &ResultSet) -> String {
    let mut out = String::new();
    let head = format!(
        "<resultset target=\"{}\" complete=\"{}\"",
        r.target, r.complete
    );
    if r.rows.is_empty() && r.missing.is_empty() {
        out.push_str(&head);
        out.push_str("/>");
        return out;
    }
    out.push_str(&head);
    out.push_str(">\n");
    for row in &r.rows {
        let _ = write!(
            out,
            "  <row site=\"{}\" id=\"{}\"",
            esc(row.site.as_str()),
            esc(&row.id)
        );
        let cols: Vec<_> = r
            .columns
            .iter()
            .zip(&row.values)
            .filter_map(|(c, v)| Some((c, v.as_ref()?)))
            .collect();
        if cols.is_empty() {
            out.push_str("/>\n");
            continue;
        }
        out.push_str(">\n");
        for (c, v) in cols {
            let _ = writeln!(out, "    <col name=\"{}\">{}</col>", esc(c), esc(v));
        }
        out.push_str("  </row>\n");
    }
    for m in &r.missing {
        let _ = writeln!(
            out,
            "  <missing site=\"{}\" reason=\"{}\"/>",
            esc(m.site.as_str()),
            esc(&m.reason)
        );
    }
    out.push_str("</resultset>");
    out
}

fn malformed(e: impl std::fmt::Display) -> FederationError {
    FederationError::MalformedXml(e.to_string())
}

fn schema(msg: impl Into<String>) -> FederationError {
    FederationError::SchemaViolation(msg.into())
}

fn attr(e: &BytesStart<'_>, name: &str) -> Result<String, FederationError> {
    let a = e
        .try_get_attribute(name)
        .map_err(malformed)?
        .ok_or_else(|| {
            schema(format!(
                "<{}> lacks `{name}`",
                String::from_utf8_lossy(e.name().as_ref())
            ))
        })?;
    Ok(a.unescape_value().map_err(malformed)?.into_owned())
}

fn site_attr(e: &BytesStart<'_>) -> Result<SiteId, FederationError> {
    let s = attr(e, "site")?;
    SiteId::new(s).map_err(|e| schema(e.to_string()))
}

enum Open {
    Nothing,
    Root,
    Row(Row),
    Col(Row, usize, String),
}

/// Parses MG-XML produced by [`to_xml`].
pub fn from_xml(xml: &str) -> Result<ResultSet, FederationError> {
    let mut reader = Reader::from_str(xml);
    let mut rs: Option<ResultSet> = None;
    let mut state = Open::Nothing;
    let mut done = false;
    loop {
        let ev = reader.read_event().map_err(malformed)?;
        state = match (state, ev) {
            (s, Event::Eof) => {
                if !done || !matches!(s, Open::Nothing) {
                    return Err(malformed("unexpected end of document"));
                }
                break;
            }
            (s, Event::Decl(_) | Event::Comment(_)) => s,
            (Open::Nothing, Event::Start(e))
                if rs.is_none() && e.name().as_ref() == b"resultset" =>
            {
                rs = Some(open_root(&e)?);
                Open::Root
            }
            (Open::Nothing, Event::Empty(e))
                if rs.is_none() && e.name().as_ref() == b"resultset" =>
            {
                rs = Some(open_root(&e)?);
                done = true;
                Open::Nothing
            }
            (Open::Root, Event::Start(e)) if e.name().as_ref() == b"row" => {
                Open::Row(new_row(&e, rs.as_ref())?)
            }
            (Open::Root, Event::Empty(e)) if e.name().as_ref() == b"row" => {
                let row = new_row(&e, rs.as_ref())?;
                rs.as_mut().unwrap().rows.push(row);
                Open::Root
            }
            (Open::Root, Event::Empty(e)) if e.name().as_ref() == b"missing" => {
                let m = Missing {
                    site: site_attr(&e)?,
                    reason: attr(&e, "reason")?,
                };
                rs.as_mut().unwrap().missing.push(m);
                Open::Root
            }
            (Open::Root, Event::End(_)) => {
                done = true;
                Open::Nothing
            }
            (Open::Row(row), Event::Start(e)) if e.name().as_ref() == b"col" => {
                let name = attr(&e, "name")?;
                let set = rs.as_ref().unwrap();
                let i = set
                    .column(&name)
                    .ok_or_else(|| schema(format!("unknown column `{name}`")))?;
                if row.values[i].is_some() {
                    return Err(schema(format!("column `{name}` repeated")));
                }
                Open::Col(row, i, String::new())
            }
            (Open::Row(mut row), Event::Empty(e)) if e.name().as_ref() == b"col" => {
                let name = attr(&e, "name")?;
                let i = rs
                    .as_ref()
                    .unwrap()
                    .column(&name)
                    .ok_or_else(|| schema(format!("unknown column `{name}`")))?;
                row.values[i] = Some(String::new());
                Open::Row(row)
            }
            (Open::Row(row), Event::End(_)) => {
                rs.as_mut().unwrap().rows.push(row);
                Open::Root
            }
            (Open::Col(row, i, mut text), Event::Text(t)) => {
                text.push_str(&t.decode().map_err(malformed)?);
                Open::Col(row, i, text)
            }
            (Open::Col(row, i, mut text), Event::GeneralRef(r)) => {
                match r.resolve_char_ref().map_err(malformed)? {
                    Some(c) => text.push(c),
                    None => {
                        let name = r.decode().map_err(malformed)?;
                        text.push_str(
                            resolve_xml_entity(&name)
                                .ok_or_else(|| malformed(format!("unknown entity &{name};")))?,
                        );
                    }
                }
                Open::Col(row, i, text)
            }
            (Open::Col(mut row, i, text), Event::End(_)) => {
                row.values[i] = Some(text);
                Open::Row(row)
            }
            (s @ (Open::Root | Open::Row(_) | Open::Nothing), Event::Text(t)) => {
                if !t.decode().map_err(malformed)?.trim().is_empty() {
                    return Err(schema("stray text"));
                }
                s
            }
            (_, ev) => return Err(schema(format!("unexpected {ev:?}"))),
        };
    }
    let rs = rs.ok_or_else(|| schema("no <resultset>"))?;
    if rs.complete != rs.missing.is_empty() {
        return Err(schema("complete flag disagrees with missing entries"));
    }
    Ok(rs)
}

fn open_root(e: &BytesStart<'_>) -> Result<ResultSet, FederationError> {
    let target = attr(e, "target")?;
    let target = Target::parse(&target).ok_or_else(|| schema(format!("bad target `{target}`")))?;
    let complete = match attr(e, "complete")?.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(schema(format!("bad complete flag `{other}`"))),
    };
    let mut set = ResultSet::empty(target);
    set.complete = complete;
    Ok(set)
}

fn new_row(e: &BytesStart<'_>, rs: Option<&ResultSet>) -> Result<Row, FederationError> {
    let rs = rs.ok_or_else(|| schema("row outside resultset"))?;
    Ok(Row {
        site: site_attr(e)?,
        id: attr(e, "id")?,
        values: vec![None; rs.columns.len()],
    })
}
