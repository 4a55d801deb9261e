//! Minimal DICOM Part-10 reader/writer.
//!
//! Only explicit VR little endian (`1.2.840.10008.1.2.1`) is accepted, pixel
//! data must be uncompressed OB/OW, and sequences are not supported. Tags
//! outside [`WHITELIST`] are carried through opaquely.

use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{parse_date, Laterality, Sex, View};

pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
/// Digital Mammography X-Ray Image Storage, For Presentation.
pub const MAMMO_SOP_CLASS: &str = "1.2.840.10008.5.1.4.1.1.1.2";
pub const IMPLEMENTATION_CLASS_UID: &str = "2.25.191026432604427739415404570186893041";

const PREAMBLE_LEN: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub group: u16,
    pub element: u16,
}

impl Tag {
    pub const fn new(group: u16, element: u16) -> Tag {
        Tag { group, element }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.group, self.element)
    }
}

pub mod tags {
    use super::Tag;

    pub const GROUP_LENGTH: Tag = Tag::new(0x0002, 0x0000);
    pub const META_VERSION: Tag = Tag::new(0x0002, 0x0001);
    pub const MEDIA_SOP_CLASS: Tag = Tag::new(0x0002, 0x0002);
    pub const MEDIA_SOP_INSTANCE: Tag = Tag::new(0x0002, 0x0003);
    pub const TRANSFER_SYNTAX: Tag = Tag::new(0x0002, 0x0010);
    pub const IMPLEMENTATION_CLASS: Tag = Tag::new(0x0002, 0x0012);

    pub const SOP_CLASS_UID: Tag = Tag::new(0x0008, 0x0016);
    pub const SOP_INSTANCE_UID: Tag = Tag::new(0x0008, 0x0018);
    pub const STUDY_DATE: Tag = Tag::new(0x0008, 0x0020);
    pub const MODALITY: Tag = Tag::new(0x0008, 0x0060);
    pub const PATIENT_NAME: Tag = Tag::new(0x0010, 0x0010);
    pub const PATIENT_ID: Tag = Tag::new(0x0010, 0x0020);
    pub const PATIENT_BIRTH_DATE: Tag = Tag::new(0x0010, 0x0030);
    pub const PATIENT_SEX: Tag = Tag::new(0x0010, 0x0040);
    pub const PATIENT_SIZE: Tag = Tag::new(0x0010, 0x1020);
    pub const PATIENT_WEIGHT: Tag = Tag::new(0x0010, 0x1030);
    pub const VIEW_POSITION: Tag = Tag::new(0x0018, 0x5101);
    pub const IMAGE_LATERALITY: Tag = Tag::new(0x0020, 0x0062);
    pub const SAMPLES_PER_PIXEL: Tag = Tag::new(0x0028, 0x0002);
    pub const PHOTOMETRIC: Tag = Tag::new(0x0028, 0x0004);
    pub const ROWS: Tag = Tag::new(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag::new(0x0028, 0x0011);
    pub const BITS_ALLOCATED: Tag = Tag::new(0x0028, 0x0100);
    pub const PIXEL_DATA: Tag = Tag::new(0x7FE0, 0x0010);
}

/// Tags the metadata extractor understands, with their expected VR.
pub const WHITELIST: &[(Tag, &str, &str)] = &[
    (tags::SOP_CLASS_UID, "UI", "SOPClassUID"),
    (tags::SOP_INSTANCE_UID, "UI", "SOPInstanceUID"),
    (tags::STUDY_DATE, "DA", "StudyDate"),
    (tags::MODALITY, "CS", "Modality"),
    (tags::PATIENT_NAME, "PN", "PatientName"),
    (tags::PATIENT_ID, "LO", "PatientID"),
    (tags::PATIENT_BIRTH_DATE, "DA", "PatientBirthDate"),
    (tags::PATIENT_SEX, "CS", "PatientSex"),
    (tags::PATIENT_SIZE, "DS", "PatientSize"),
    (tags::PATIENT_WEIGHT, "DS", "PatientWeight"),
    (tags::VIEW_POSITION, "CS", "ViewPosition"),
    (tags::IMAGE_LATERALITY, "CS", "ImageLaterality"),
    (tags::SAMPLES_PER_PIXEL, "US", "SamplesPerPixel"),
    (tags::PHOTOMETRIC, "CS", "PhotometricInterpretation"),
    (tags::ROWS, "US", "Rows"),
    (tags::COLUMNS, "US", "Columns"),
    (tags::BITS_ALLOCATED, "US", "BitsAllocated"),
    (tags::PIXEL_DATA, "OW", "PixelData"),
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DicomError {
    #[error("missing 128-byte preamble or DICM magic")]
    BadPreamble,
    #[error("unsupported transfer syntax `{0}`")]
    UnsupportedTransferSyntax(String),
    #[error("element {tag} at offset {offset} runs past end of input")]
    TruncatedElement { tag: Tag, offset: usize },
    #[error("malformed element at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("tag set invariant violated: {0}")]
    InvariantViolation(String),
    #[error("missing mandatory tag {0}")]
    MissingTag(Tag),
    #[error("bad value for tag {0}")]
    BadValue(Tag),
}

/// Two-character value representation code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vr(pub [u8; 2]);

impl Vr {
    pub const PN: Vr = Vr(*b"PN");
    pub const LO: Vr = Vr(*b"LO");
    pub const SH: Vr = Vr(*b"SH");
    pub const DA: Vr = Vr(*b"DA");
    pub const CS: Vr = Vr(*b"CS");
    pub const DS: Vr = Vr(*b"DS");
    pub const US: Vr = Vr(*b"US");
    pub const UI: Vr = Vr(*b"UI");
    pub const UL: Vr = Vr(*b"UL");
    pub const OB: Vr = Vr(*b"OB");
    pub const OW: Vr = Vr(*b"OW");

    pub fn parse(code: &str) -> Option<Vr> {
        let b = code.as_bytes();
        (b.len() == 2 && b.iter().all(u8::is_ascii_uppercase)).then(|| Vr([b[0], b[1]]))
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).unwrap_or("??")
    }

    fn is_valid(&self) -> bool {
        self.0.iter().all(u8::is_ascii_uppercase)
    }

    /// VRs encoded with 2 reserved bytes and a 32-bit length.
    fn has_long_length(&self) -> bool {
        matches!(
            &self.0,
            b"OB"
                | b"OD"
                | b"OF"
                | b"OL"
                | b"OV"
                | b"OW"
                | b"SQ"
                | b"SV"
                | b"UC"
                | b"UN"
                | b"UR"
                | b"UT"
                | b"UV"
        )
    }

    fn is_text(&self) -> bool {
        matches!(
            &self.0,
            b"AE"
                | b"AS"
                | b"CS"
                | b"DA"
                | b"DS"
                | b"DT"
                | b"IS"
                | b"LO"
                | b"LT"
                | b"PN"
                | b"SH"
                | b"ST"
                | b"TM"
                | b"UC"
                | b"UR"
                | b"UT"
        )
    }

    fn pad_byte(&self) -> u8 {
        if self.is_text() {
            b' '
        } else {
            0
        }
    }
}

impl fmt::Display for Vr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub vr: Vr,
    pub value: Vec<u8>,
}

/// Data set elements (file meta excluded) ordered by tag.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagSet {
    elements: BTreeMap<Tag, Element>,
}

impl TagSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, tag: Tag) -> Option<&Element> {
        self.elements.get(&tag)
    }

    pub fn contains(&self, tag: Tag) -> bool {
        self.elements.contains_key(&tag)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tag, &Element)> {
        self.elements.iter()
    }

    pub fn remove(&mut self, tag: Tag) -> Option<Element> {
        self.elements.remove(&tag)
    }

    /// Inserts a value as given, without padding.
    pub fn insert_raw(&mut self, tag: Tag, vr: Vr, value: Vec<u8>) {
        self.elements.insert(tag, Element { vr, value });
    }

    /// Inserts a value, padding odd lengths with the VR's pad byte.
    pub fn insert(&mut self, tag: Tag, vr: Vr, mut value: Vec<u8>) {
        if value.len() % 2 == 1 {
            value.push(vr.pad_byte());
        }
        self.insert_raw(tag, vr, value);
    }

    pub fn set_text(&mut self, tag: Tag, vr: Vr, text: &str) {
        self.insert(tag, vr, text.as_bytes().to_vec());
    }

    pub fn set_us(&mut self, tag: Tag, v: u16) {
        self.insert_raw(tag, Vr::US, v.to_le_bytes().to_vec());
    }

    /// Text value with trailing space/NUL padding removed.
    pub fn text(&self, tag: Tag) -> Option<String> {
        self.get(tag).map(|e| decode_text(&e.value))
    }

    pub fn us(&self, tag: Tag) -> Option<u16> {
        self.get(tag)
            .and_then(|e| <[u8; 2]>::try_from(e.value.as_slice()).ok())
            .map(u16::from_le_bytes)
    }

    fn check_invariants(&self) -> Result<(), DicomError> {
        let mut last = None;
        for (tag, el) in &self.elements {
            if tag.group == 0x0002 {
                return Err(DicomError::InvariantViolation(format!(
                    "{tag} belongs to the file meta group"
                )));
            }
            if !el.vr.is_valid() {
                return Err(DicomError::InvariantViolation(format!("{tag} has bad VR")));
            }
            if el.value.len() % 2 != 0 {
                return Err(DicomError::InvariantViolation(format!(
                    "{tag} has odd value length {}",
                    el.value.len()
                )));
            }
            let limit = if el.vr.has_long_length() {
                u32::MAX as usize - 1
            } else {
                u16::MAX as usize
            };
            if el.value.len() > limit {
                return Err(DicomError::InvariantViolation(format!(
                    "{tag} value too long"
                )));
            }
            if last == Some(tags::PIXEL_DATA) {
                return Err(DicomError::InvariantViolation(
                    "pixel data must be the last element".into(),
                ));
            }
            last = Some(*tag);
        }
        Ok(())
    }
}

fn decode_text(v: &[u8]) -> String {
    let s = String::from_utf8_lossy(v);
    s.trim_end_matches([' ', '\0']).to_string()
}

fn put_element(out: &mut Vec<u8>, tag: Tag, vr: Vr, value: &[u8]) {
    out.extend_from_slice(&tag.group.to_le_bytes());
    out.extend_from_slice(&tag.element.to_le_bytes());
    out.extend_from_slice(&vr.0);
    if vr.has_long_length() {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

fn padded_uid(uid: &str) -> Vec<u8> {
    let mut v = uid.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(0);
    }
    v
}

/// Serializes a tag set. Output is a pure function of the input.
pub fn write_dicom(t: &TagSet) -> Result<Vec<u8>, DicomError> {
    t.check_invariants()?;

    let sop_class = t
        .text(tags::SOP_CLASS_UID)
        .unwrap_or_else(|| MAMMO_SOP_CLASS.into());
    let sop_instance = t
        .text(tags::SOP_INSTANCE_UID)
        .unwrap_or_else(|| "2.25.0".into());
    let mut meta = Vec::new();
    put_element(&mut meta, tags::META_VERSION, Vr::OB, &[0, 1]);
    put_element(
        &mut meta,
        tags::MEDIA_SOP_CLASS,
        Vr::UI,
        &padded_uid(&sop_class),
    );
    put_element(
        &mut meta,
        tags::MEDIA_SOP_INSTANCE,
        Vr::UI,
        &padded_uid(&sop_instance),
    );
    put_element(
        &mut meta,
        tags::TRANSFER_SYNTAX,
        Vr::UI,
        &padded_uid(EXPLICIT_VR_LE),
    );
    put_element(
        &mut meta,
        tags::IMPLEMENTATION_CLASS,
        Vr::UI,
        &padded_uid(IMPLEMENTATION_CLASS_UID),
    );

    let body_len: usize = t
        .elements
        .values()
        .map(|e| e.value.len() + if e.vr.has_long_length() { 12 } else { 8 })
        .sum();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + 4 + 12 + meta.len() + body_len);
    out.resize(PREAMBLE_LEN, 0);
    out.extend_from_slice(MAGIC);
    put_element(
        &mut out,
        tags::GROUP_LENGTH,
        Vr::UL,
        &(meta.len() as u32).to_le_bytes(),
    );
    out.extend_from_slice(&meta);
    for (tag, el) in &t.elements {
        put_element(&mut out, *tag, el.vr, &el.value);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

struct RawElement<'a> {
    tag: Tag,
    vr: Vr,
    value: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn peek_group(&self) -> Option<u16> {
        self.buf
            .get(self.pos..self.pos + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn next_element(&mut self) -> Result<RawElement<'a>, DicomError> {
        let offset = self.pos;
        let unknown = Tag::new(0xFFFF, 0xFFFF);
        let head = self.take(8).ok_or(DicomError::TruncatedElement {
            tag: unknown,
            offset,
        })?;
        let tag = Tag::new(
            u16::from_le_bytes([head[0], head[1]]),
            u16::from_le_bytes([head[2], head[3]]),
        );
        let vr = Vr([head[4], head[5]]);
        if !vr.is_valid() {
            return Err(DicomError::Malformed {
                offset,
                reason: format!("{tag} has invalid VR"),
            });
        }
        let len = if vr.has_long_length() {
            if head[6..8] != [0, 0] {
                return Err(DicomError::Malformed {
                    offset,
                    reason: format!("{tag} reserved bytes are not zero"),
                });
            }
            let l = self
                .take(4)
                .ok_or(DicomError::TruncatedElement { tag, offset })?;
            u32::from_le_bytes([l[0], l[1], l[2], l[3]])
        } else {
            u32::from(u16::from_le_bytes([head[6], head[7]]))
        };
        if len == u32::MAX {
            return Err(DicomError::Malformed {
                offset,
                reason: format!("{tag} has undefined length"),
            });
        }
        if len % 2 != 0 {
            return Err(DicomError::Malformed {
                offset,
                reason: format!("{tag} has odd length {len}"),
            });
        }
        let value = self
            .take(len as usize)
            .ok_or(DicomError::TruncatedElement { tag, offset })?;
        Ok(RawElement {
            tag,
            vr,
            value,
            offset,
        })
    }
}

/// Parses a Part-10 file into its data set.
pub fn parse_dicom(bytes: &[u8]) -> Result<TagSet, DicomError> {
    if bytes.len() < PREAMBLE_LEN + 4 || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(DicomError::BadPreamble);
    }
    let mut cur = Cursor {
        buf: bytes,
        pos: PREAMBLE_LEN + 4,
    };

    let mut transfer_syntax = None;
    while cur.peek_group() == Some(0x0002) {
        let el = cur.next_element()?;
        if el.tag == tags::TRANSFER_SYNTAX {
            transfer_syntax = Some(decode_text(el.value));
        }
    }
    match transfer_syntax {
        Some(ts) if ts == EXPLICIT_VR_LE => {}
        Some(ts) => return Err(DicomError::UnsupportedTransferSyntax(ts)),
        None => return Err(DicomError::UnsupportedTransferSyntax(String::new())),
    }

    let mut set = TagSet::new();
    let mut last: Option<Tag> = None;
    while !cur.at_end() {
        let el = cur.next_element()?;
        if let Some(prev) = last {
            if el.tag <= prev {
                return Err(DicomError::Malformed {
                    offset: el.offset,
                    reason: format!("{} not in ascending order", el.tag),
                });
            }
            if prev == tags::PIXEL_DATA {
                return Err(DicomError::Malformed {
                    offset: el.offset,
                    reason: "element after pixel data".into(),
                });
            }
        }
        if el.tag.group == 0x0002 {
            return Err(DicomError::Malformed {
                offset: el.offset,
                reason: "file meta element inside data set".into(),
            });
        }
        if el.tag == tags::PIXEL_DATA && el.vr != Vr::OB && el.vr != Vr::OW {
            return Err(DicomError::Malformed {
                offset: el.offset,
                reason: "pixel data must be OB or OW".into(),
            });
        }
        last = Some(el.tag);
        set.insert_raw(el.tag, el.vr, el.value.to_vec());
    }
    Ok(set)
}

/// Whitelisted metadata of one mammogram, still containing raw identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMeta {
    pub patient_id_raw: String,
    pub patient_name_raw: String,
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub height_m: Option<f64>,
    pub weight_kg: Option<f64>,
    pub modality: String,
    pub laterality: Laterality,
    pub view: View,
    pub study_date: NaiveDate,
    pub rows: u32,
    pub cols: u32,
    pub bits_allocated: u16,
}

fn required_text(t: &TagSet, tag: Tag) -> Result<String, DicomError> {
    t.text(tag).ok_or(DicomError::MissingTag(tag))
}

fn required_us(t: &TagSet, tag: Tag) -> Result<u16, DicomError> {
    if !t.contains(tag) {
        return Err(DicomError::MissingTag(tag));
    }
    t.us(tag).ok_or(DicomError::BadValue(tag))
}

fn date_value(t: &TagSet, tag: Tag) -> Result<NaiveDate, DicomError> {
    parse_date(required_text(t, tag)?.trim()).map_err(|_| DicomError::BadValue(tag))
}

fn enum_value<T: std::str::FromStr>(t: &TagSet, tag: Tag) -> Result<T, DicomError> {
    required_text(t, tag)?
        .trim()
        .parse()
        .map_err(|_| DicomError::BadValue(tag))
}

fn decimal_value(t: &TagSet, tag: Tag) -> Result<Option<f64>, DicomError> {
    match t.text(tag) {
        None => Ok(None),
        Some(s) => {
            let v: f64 = s.trim().parse().map_err(|_| DicomError::BadValue(tag))?;
            if v.is_finite() && v >= 0.0 {
                Ok(Some(v))
            } else {
                Err(DicomError::BadValue(tag))
            }
        }
    }
}

pub fn extract_metadata(t: &TagSet) -> Result<ImageMeta, DicomError> {
    let patient_id_raw = required_text(t, tags::PATIENT_ID)?;
    if patient_id_raw.trim().is_empty() {
        return Err(DicomError::BadValue(tags::PATIENT_ID));
    }
    let sex = enum_value(t, tags::PATIENT_SEX)?;
    let birth_date = date_value(t, tags::PATIENT_BIRTH_DATE)?;
    let modality = required_text(t, tags::MODALITY)?.trim().to_string();
    let laterality = enum_value(t, tags::IMAGE_LATERALITY)?;
    let view = enum_value(t, tags::VIEW_POSITION)?;
    let study_date = date_value(t, tags::STUDY_DATE)?;
    let rows = required_us(t, tags::ROWS)?;
    let cols = required_us(t, tags::COLUMNS)?;
    let bits_allocated = required_us(t, tags::BITS_ALLOCATED)?;
    if rows == 0 {
        return Err(DicomError::BadValue(tags::ROWS));
    }
    if cols == 0 {
        return Err(DicomError::BadValue(tags::COLUMNS));
    }
    if bits_allocated != 8 && bits_allocated != 16 {
        return Err(DicomError::BadValue(tags::BITS_ALLOCATED));
    }
    let pixels = t
        .get(tags::PIXEL_DATA)
        .ok_or(DicomError::MissingTag(tags::PIXEL_DATA))?;
    let expected = rows as usize * cols as usize * (bits_allocated as usize / 8);
    let padded = expected + expected % 2;
    if pixels.value.len() != padded {
        return Err(DicomError::BadValue(tags::PIXEL_DATA));
    }
    Ok(ImageMeta {
        patient_id_raw: patient_id_raw.trim().to_string(),
        patient_name_raw: t.text(tags::PATIENT_NAME).unwrap_or_default(),
        birth_date,
        sex,
        height_m: decimal_value(t, tags::PATIENT_SIZE)?,
        weight_kg: decimal_value(t, tags::PATIENT_WEIGHT)?,
        modality,
        laterality,
        view,
        study_date,
        rows: rows.into(),
        cols: cols.into(),
        bits_allocated,
    })
}

/// Unpacks 8- or 16-bit little-endian pixel samples.
pub fn pixel_samples(t: &TagSet, meta: &ImageMeta) -> Result<Vec<u16>, DicomError> {
    let raw = &t
        .get(tags::PIXEL_DATA)
        .ok_or(DicomError::MissingTag(tags::PIXEL_DATA))?
        .value;
    let n = meta.rows as usize * meta.cols as usize;
    let samples: Vec<u16> = if meta.bits_allocated == 8 {
        raw.iter().take(n).map(|&b| u16::from(b)).collect()
    } else {
        raw.chunks_exact(2)
            .take(n)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect()
    };
    if samples.len() != n {
        return Err(DicomError::BadValue(tags::PIXEL_DATA));
    }
    Ok(samples)
}
