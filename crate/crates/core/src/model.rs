//! Domain records shared by every layer: site-scoped pseudonyms, patient,
//! image, derived and annotation records, and global file identifiers.
//!
//! Nothing in here carries a raw patient identifier or name. Ingest replaces
//! the raw id with a [`Pseudonym`] keyed by the site secret and reduces the
//! birth date to a year.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("raw patient id is empty")]
    EmptyId,
    #[error("site secret must be at least 16 bytes")]
    WeakSecret,
    #[error("study date precedes birth date")]
    NegativeAge,
    #[error("malformed global file id `{0}`")]
    BadGfid(String),
    #[error("malformed site id `{0}`")]
    BadSiteId(String),
    #[error("malformed pseudonym `{0}`")]
    BadPseudonym(String),
    #[error("bad date `{0}` (expected YYYYMMDD)")]
    BadDate(String),
    #[error("bad enumeration value `{0}`")]
    BadEnum(String),
}

/// Minimum accepted length of a per-site pseudonymization secret.
pub const MIN_SECRET_LEN: usize = 16;

/// Site token: `[a-z0-9_]{1,32}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SiteId(String);

impl SiteId {
    pub fn new(s: impl Into<String>) -> Result<Self, ModelError> {
        let s = s.into();
        if is_site_token(&s) {
            Ok(SiteId(s))
        } else {
            Err(ModelError::BadSiteId(s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub fn is_site_token(s: &str) -> bool {
    (1..=32).contains(&s.len())
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for SiteId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SiteId::new(s)
    }
}

impl TryFrom<String> for SiteId {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        SiteId::new(s)
    }
}

impl From<SiteId> for String {
    fn from(s: SiteId) -> String {
        s.0
    }
}

/// 16 lowercase hex characters derived from a keyed hash of the raw id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pseudonym(String);

impl Pseudonym {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Pseudonym {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 16 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Pseudonym(s.to_string()))
        } else {
            Err(ModelError::BadPseudonym(s.to_string()))
        }
    }
}

impl TryFrom<String> for Pseudonym {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Pseudonym> for String {
    fn from(p: Pseudonym) -> String {
        p.0
    }
}

/// First 16 hex chars of `SHA-256(secret || 0x00 || utf8(raw_id))`.
pub fn pseudonymize(raw_id: &str, site_secret: &[u8]) -> Result<Pseudonym, ModelError> {
    if raw_id.is_empty() {
        return Err(ModelError::EmptyId);
    }
    if site_secret.len() < MIN_SECRET_LEN {
        return Err(ModelError::WeakSecret);
    }
    let mut h = Sha256::new();
    h.update(site_secret);
    h.update([0u8]);
    h.update(raw_id.as_bytes());
    let digest = h.finalize();
    Ok(Pseudonym(hex::encode(&digest[..8])))
}

/// Completed years between two dates, birthday aware.
pub fn derive_age(birth: NaiveDate, study: NaiveDate) -> Result<u32, ModelError> {
    if study < birth {
        return Err(ModelError::NegativeAge);
    }
    let mut years = study.year() - birth.year();
    if (study.month(), study.day()) < (birth.month(), birth.day()) {
        years -= 1;
    }
    Ok(years as u32)
}

pub fn parse_date(s: &str) -> Result<NaiveDate, ModelError> {
    if s.len() != 8 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ModelError::BadDate(s.to_string()));
    }
    NaiveDate::parse_from_str(s, "%Y%m%d").map_err(|_| ModelError::BadDate(s.to_string()))
}

pub fn format_date(d: NaiveDate) -> String {
    d.format("%Y%m%d").to_string()
}

/// Serde adapter storing dates as `YYYYMMDD` strings.
pub(crate) mod yyyymmdd {
    use chrono::NaiveDate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &NaiveDate, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_date(*d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_date(&s).map_err(serde::de::Error::custom)
    }
}

macro_rules! code_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $code:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $code)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn code(self) -> &'static str {
                match self {
                    $($name::$variant => $code),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.code())
            }
        }

        impl FromStr for $name {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($code => Ok($name::$variant),)+
                    other => Err(ModelError::BadEnum(other.to_string())),
                }
            }
        }
    };
}

code_enum!(Sex { Female => "F", Male => "M", Other => "O" });
code_enum!(Laterality { Left => "L", Right => "R" });
code_enum!(View { Cc => "CC", Mlo => "MLO" });
code_enum!(
    /// Kind of algorithm output attached to an image.
    DerivedKind { Smf => "smf", Cade => "cade" }
);

impl DerivedKind {
    /// Field every record of this kind must carry.
    pub fn mandatory_field(self) -> &'static str {
        match self {
            DerivedKind::Smf => "density_pct",
            DerivedKind::Cade => "num_findings",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub pid: Pseudonym,
    pub sex: Sex,
    pub birth_year: i32,
    pub height_m: Option<f64>,
    pub weight_kg: Option<f64>,
}

pub const MIN_BIRTH_YEAR: i32 = 1880;

/// Content address of a stored blob.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlobRef {
    pub sha256: String,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub local_id: u64,
    pub pid: Pseudonym,
    pub modality: String,
    pub laterality: Laterality,
    pub view: View,
    #[serde(with = "yyyymmdd")]
    pub study_date: NaiveDate,
    pub age_at_study: u32,
    pub rows: u32,
    pub cols: u32,
    pub blob: BlobRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedRecord {
    pub local_id: u64,
    pub image_local_id: u64,
    pub kind: DerivedKind,
    pub fields: std::collections::BTreeMap<String, f64>,
    pub algo_id: String,
    pub job_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub local_id: u64,
    pub image_local_id: u64,
    pub author: String,
    pub region: Region,
    pub text: String,
    /// Seconds since the Unix epoch.
    pub created_at: i64,
}

/// `site:local` — names one image file anywhere in the VO.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GlobalFileId {
    pub site: SiteId,
    pub local_id: u64,
}

impl GlobalFileId {
    pub fn new(site: SiteId, local_id: u64) -> Self {
        GlobalFileId { site, local_id }
    }
}

pub fn format_gfid(g: &GlobalFileId) -> String {
    format!("{}:{}", g.site, g.local_id)
}

pub fn parse_gfid(s: &str) -> Result<GlobalFileId, ModelError> {
    let bad = || ModelError::BadGfid(s.to_string());
    let (site, local) = s.split_once(':').ok_or_else(bad)?;
    let site = SiteId::new(site).map_err(|_| bad())?;
    if local.is_empty() || !local.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let local_id = local.parse().map_err(|_| bad())?;
    Ok(GlobalFileId { site, local_id })
}

impl fmt::Display for GlobalFileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_gfid(self))
    }
}

impl FromStr for GlobalFileId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_gfid(s)
    }
}

impl TryFrom<String> for GlobalFileId {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        parse_gfid(&s)
    }
}

impl From<GlobalFileId> for String {
    fn from(g: GlobalFileId) -> String {
        format_gfid(&g)
    }
}

/// One member of the VO as the registry lists it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteDescriptor {
    pub site_id: SiteId,
    pub display_name: String,
    /// `host:port`
    pub address: String,
    /// Whether the site takes part in query fan-out.
    pub public: bool,
}

pub fn is_valid_address(addr: &str) -> bool {
    match addr.rsplit_once(':') {
        Some((host, port)) => {
            !host.is_empty() && !host.contains(char::is_whitespace) && port.parse::<u16>().is_ok()
        }
        None => false,
    }
}
