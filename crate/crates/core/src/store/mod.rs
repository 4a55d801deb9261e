//! Per-site persistence, independent of the grid layer.
//!
//! Layout under a data directory:
//!
//! ```text
//! data_dir/blobs/<first2hex>/<sha256>   content-addressed image files
//! data_dir/meta.log                     length-prefixed JSON records
//! ```
//!
//! The log is replayed into an in-memory index on open. One writer at a time
//! mutates the index (and appends to the log) under a write lock; scans hold
//! the read lock, so a scan never observes a half-applied write.

mod blobs;
mod log;

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mgql::{Field, FieldSource, Value};
use crate::model::{
    AnnotationRecord, BlobRef, DerivedKind, DerivedRecord, ImageRecord, PatientRecord, Pseudonym,
    SiteId, MIN_BIRTH_YEAR,
};

pub use blobs::sha256_hex;
pub use log::{decode_all as decode_log, Record};

use blobs::BlobBackend;
use log::LogSink;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("i/o failure: {0}")]
    IoFailure(String),
    #[error("not found")]
    NotFound,
    #[error("IntegrityError: blob {0} does not match its hash")]
    IntegrityError(String),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("unknown patient {0}")]
    UnknownPatient(String),
    #[error("unknown image {0}")]
    UnknownImage(u64),
    #[error("annotation region outside image bounds")]
    RegionOutOfBounds,
    #[error("empty blob")]
    EmptyBlob,
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::IoFailure(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteStats {
    pub num_patients: u64,
    pub num_image_files: u64,
    pub num_derived_files: u64,
    pub metadata_size_bytes: u64,
    pub blob_storage_size_bytes: u64,
}

/// A patient joined with one of their images and the latest derived record
/// of each kind for that image.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedRow {
    pub site: SiteId,
    pub patient: PatientRecord,
    pub image: Option<ImageRecord>,
    pub derived: BTreeMap<DerivedKind, DerivedRecord>,
}

impl FieldSource for JoinedRow {
    fn value(&self, field: Field) -> Option<Value<'_>> {
        let text = |s: &str| Some(Value::Text(Cow::Owned(s.to_string())));
        let derived_num = |kind: DerivedKind, name: &str| {
            self.derived
                .get(&kind)
                .and_then(|d| d.fields.get(name))
                .map(|v| Value::Num(*v))
        };
        match field {
            Field::PatientId => Some(Value::Text(Cow::Borrowed(self.patient.pid.as_str()))),
            Field::PatientSex => Some(Value::Text(Cow::Borrowed(self.patient.sex.code()))),
            Field::PatientAge => self
                .image
                .as_ref()
                .map(|i| Value::Num(i.age_at_study.into())),
            Field::PatientHeight => self.patient.height_m.map(Value::Num),
            Field::PatientWeight => self.patient.weight_kg.map(Value::Num),
            Field::ImageLaterality => self.image.as_ref().and_then(|i| text(i.laterality.code())),
            Field::ImageView => self.image.as_ref().and_then(|i| text(i.view.code())),
            Field::ImageModality => self
                .image
                .as_ref()
                .map(|i| Value::Text(Cow::Borrowed(i.modality.as_str()))),
            Field::ImageStudyDate => self.image.as_ref().map(|i| Value::Date(i.study_date)),
            Field::DerivedKind => Some(Value::Kinds(
                self.derived.keys().map(|k| k.code()).collect(),
            )),
            Field::DerivedDensity => derived_num(DerivedKind::Smf, "density_pct"),
            Field::DerivedFindings => derived_num(DerivedKind::Cade, "num_findings"),
            Field::SiteId => Some(Value::Text(Cow::Borrowed(self.site.as_str()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanTarget {
    Patients,
    Images,
}

#[derive(Default)]
struct Index {
    patients: BTreeMap<Pseudonym, PatientRecord>,
    images: BTreeMap<u64, ImageRecord>,
    derived: BTreeMap<u64, DerivedRecord>,
    /// (image, kind) -> newest derived local id
    latest: HashMap<(u64, DerivedKind), u64>,
    annotations: BTreeMap<u64, AnnotationRecord>,
    docs: BTreeMap<(String, String), serde_json::Value>,
    blobs: HashMap<String, u64>,
    image_by_blob: HashMap<String, u64>,
    next_image: u64,
    next_derived: u64,
    next_annotation: u64,
    log_bytes: u64,
}

impl Index {
    fn apply(&mut self, rec: Record) {
        match rec {
            Record::Patient(p) => {
                self.patients.insert(p.pid.clone(), p);
            }
            Record::Image(i) => {
                self.next_image = self.next_image.max(i.local_id);
                self.image_by_blob.insert(i.blob.sha256.clone(), i.local_id);
                self.images.insert(i.local_id, i);
            }
            Record::Derived(d) => {
                self.next_derived = self.next_derived.max(d.local_id);
                let slot = self
                    .latest
                    .entry((d.image_local_id, d.kind))
                    .or_insert(d.local_id);
                *slot = (*slot).max(d.local_id);
                self.derived.insert(d.local_id, d);
            }
            Record::Annotation(a) => {
                self.next_annotation = self.next_annotation.max(a.local_id);
                self.annotations.insert(a.local_id, a);
            }
            Record::Doc { kind, key, body } => {
                self.docs.insert((kind, key), body);
            }
        }
    }

    fn joined(&self, site: &SiteId, image: &ImageRecord) -> Option<JoinedRow> {
        let patient = self.patients.get(&image.pid)?.clone();
        let derived = DerivedKind::ALL
            .iter()
            .filter_map(|k| {
                let id = self.latest.get(&(image.local_id, *k))?;
                Some((*k, self.derived.get(id)?.clone()))
            })
            .collect();
        Some(JoinedRow {
            site: site.clone(),
            patient,
            image: Some(image.clone()),
            derived,
        })
    }
}

struct Inner {
    index: Index,
    log: LogSink,
    blobs: BlobBackend,
}

impl Inner {
    fn commit(&mut self, rec: Record) -> Result<(), StoreError> {
        let n = self.log.append(&rec)?;
        self.index.log_bytes += n;
        self.index.apply(rec);
        Ok(())
    }
}

/// One site's metadata and blob store.
pub struct Store {
    site: SiteId,
    data_dir: Option<PathBuf>,
    inner: RwLock<Inner>,
    writes: AtomicU64,
}

impl Store {
    /// Opens a file-backed store, replaying `meta.log`.
    pub fn open(site: SiteId, data_dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        let dir = data_dir.as_ref();
        std::fs::create_dir_all(dir.join("blobs"))?;
        let (log, records) = LogSink::open_file(&dir.join("meta.log"))?;
        let blobs = BlobBackend::Dir(dir.join("blobs"));
        let mut index = Index::default();
        index.log_bytes = log.bytes()?.len() as u64;
        for r in records {
            index.apply(r);
        }
        for (sha, size) in blobs.list()? {
            index.blobs.insert(sha, size);
        }
        Ok(Store {
            site,
            data_dir: Some(dir.to_path_buf()),
            inner: RwLock::new(Inner { index, log, blobs }),
            writes: AtomicU64::new(0),
        })
    }

    /// A store that lives only in memory, with the same log encoding.
    pub fn in_memory(site: SiteId) -> Store {
        Store {
            site,
            data_dir: None,
            inner: RwLock::new(Inner {
                index: Index::default(),
                log: LogSink::Memory(Vec::new()),
                blobs: BlobBackend::Memory(HashMap::new()),
            }),
            writes: AtomicU64::new(0),
        }
    }

    pub fn site(&self) -> &SiteId {
        &self.site
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    /// Number of successful mutations since this handle was opened.
    pub fn write_count(&self) -> u64 {
        self.writes.load(Ordering::SeqCst)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    fn bump(&self) {
        self.writes.fetch_add(1, Ordering::SeqCst);
    }

    pub fn put_blob(&self, bytes: &[u8]) -> Result<BlobRef, StoreError> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyBlob);
        }
        let sha = sha256_hex(bytes);
        let r = BlobRef {
            sha256: sha.clone(),
            size_bytes: bytes.len() as u64,
        };
        let mut inner = self.write();
        if inner.index.blobs.contains_key(&sha) {
            return Ok(r);
        }
        inner.blobs.write(&sha, bytes)?;
        inner.index.blobs.insert(sha, r.size_bytes);
        drop(inner);
        self.bump();
        Ok(r)
    }

    pub fn get_blob(&self, r: &BlobRef) -> Result<Vec<u8>, StoreError> {
        let inner = self.read();
        if !inner.index.blobs.contains_key(&r.sha256) {
            return Err(StoreError::NotFound);
        }
        inner.blobs.read(r)
    }

    pub fn blob_count(&self) -> usize {
        self.read().index.blobs.len()
    }

    /// Fault injection: flips the low bit of one stored byte.
    pub fn inject_bit_flip(&self, r: &BlobRef, byte: usize) -> Result<(), StoreError> {
        self.write().blobs.flip_bit(r, byte)
    }

    pub fn upsert_patient(&self, p: PatientRecord) -> Result<(), StoreError> {
        let this_year = current_year();
        if !(MIN_BIRTH_YEAR..=this_year).contains(&p.birth_year) {
            return Err(StoreError::InvariantViolation(format!(
                "birth_year {} outside [{MIN_BIRTH_YEAR}, {this_year}]",
                p.birth_year
            )));
        }
        for v in [p.height_m, p.weight_kg].into_iter().flatten() {
            if !v.is_finite() || v < 0.0 {
                return Err(StoreError::InvariantViolation(format!(
                    "bad anthropometric value {v}"
                )));
            }
        }
        self.write().commit(Record::Patient(p))?;
        self.bump();
        Ok(())
    }

    pub fn patient(&self, pid: &Pseudonym) -> Option<PatientRecord> {
        self.read().index.patients.get(pid).cloned()
    }

    /// Assigns the next local id (ignoring `m.local_id`) and stores the row.
    pub fn insert_image(&self, mut m: ImageRecord) -> Result<u64, StoreError> {
        let mut inner = self.write();
        if !inner.index.patients.contains_key(&m.pid) {
            return Err(StoreError::UnknownPatient(m.pid.to_string()));
        }
        if m.rows == 0 || m.cols == 0 {
            return Err(StoreError::InvariantViolation(
                "image has zero extent".into(),
            ));
        }
        m.local_id = inner.index.next_image + 1;
        let id = m.local_id;
        inner.commit(Record::Image(m))?;
        drop(inner);
        self.bump();
        Ok(id)
    }

    pub fn image(&self, local_id: u64) -> Option<ImageRecord> {
        self.read().index.images.get(&local_id).cloned()
    }

    pub fn image_by_blob(&self, sha256: &str) -> Option<u64> {
        self.read().index.image_by_blob.get(sha256).copied()
    }

    pub fn insert_derived(&self, mut d: DerivedRecord) -> Result<u64, StoreError> {
        let mut inner = self.write();
        if !inner.index.images.contains_key(&d.image_local_id) {
            return Err(StoreError::UnknownImage(d.image_local_id));
        }
        let need = d.kind.mandatory_field();
        if !d.fields.contains_key(need) {
            return Err(StoreError::InvariantViolation(format!(
                "{} record lacks {need}",
                d.kind
            )));
        }
        d.local_id = inner.index.next_derived + 1;
        let id = d.local_id;
        inner.commit(Record::Derived(d))?;
        drop(inner);
        self.bump();
        Ok(id)
    }

    /// Every derived record for an image, oldest first.
    pub fn derived_for(&self, image_local_id: u64) -> Vec<DerivedRecord> {
        self.read()
            .index
            .derived
            .values()
            .filter(|d| d.image_local_id == image_local_id)
            .cloned()
            .collect()
    }

    pub fn insert_annotation(&self, mut a: AnnotationRecord) -> Result<u64, StoreError> {
        let mut inner = self.write();
        let img = inner
            .index
            .images
            .get(&a.image_local_id)
            .ok_or(StoreError::UnknownImage(a.image_local_id))?;
        let r = a.region;
        if !(r.x0 < r.x1 && r.x1 <= img.cols && r.y0 < r.y1 && r.y1 <= img.rows) {
            return Err(StoreError::RegionOutOfBounds);
        }
        a.local_id = inner.index.next_annotation + 1;
        let id = a.local_id;
        inner.commit(Record::Annotation(a))?;
        drop(inner);
        self.bump();
        Ok(id)
    }

    pub fn annotations_for(&self, image_local_id: u64) -> Vec<AnnotationRecord> {
        self.read()
            .index
            .annotations
            .values()
            .filter(|a| a.image_local_id == image_local_id)
            .cloned()
            .collect()
    }

    pub fn put_doc(
        &self,
        kind: &str,
        key: &str,
        body: serde_json::Value,
    ) -> Result<(), StoreError> {
        self.write().commit(Record::Doc {
            kind: kind.into(),
            key: key.into(),
            body,
        })?;
        self.bump();
        Ok(())
    }

    pub fn get_doc(&self, kind: &str, key: &str) -> Option<serde_json::Value> {
        self.read()
            .index
            .docs
            .get(&(kind.to_string(), key.to_string()))
            .cloned()
    }

    pub fn docs(&self, kind: &str) -> Vec<(String, serde_json::Value)> {
        self.read()
            .index
            .docs
            .iter()
            .filter(|((k, _), _)| k == kind)
            .map(|((_, key), v)| (key.clone(), v.clone()))
            .collect()
    }

    /// Rows satisfying `pred`, under one consistent snapshot.
    ///
    /// For [`ScanTarget::Images`] rows come in local id order. For
    /// [`ScanTarget::Patients`] a patient is returned once (without an image)
    /// when any of their image rows satisfies `pred`, ordered by pseudonym.
    pub fn scan(
        &self,
        pred: &dyn Fn(&JoinedRow) -> bool,
        target: ScanTarget,
    ) -> Result<Vec<JoinedRow>, StoreError> {
        let inner = self.read();
        let idx = &inner.index;
        let rows = idx
            .images
            .values()
            .filter_map(|img| idx.joined(&self.site, img));
        Ok(match target {
            ScanTarget::Images => rows.filter(|r| pred(r)).collect(),
            ScanTarget::Patients => {
                let mut hit = BTreeMap::new();
                for r in rows {
                    if !hit.contains_key(&r.patient.pid) && pred(&r) {
                        hit.insert(r.patient.pid.clone(), r.patient);
                    }
                }
                hit.into_values()
                    .map(|patient| JoinedRow {
                        site: self.site.clone(),
                        patient,
                        image: None,
                        derived: BTreeMap::new(),
                    })
                    .collect()
            }
        })
    }

    /// Every image row.
    pub fn dump(&self) -> Vec<JoinedRow> {
        self.scan(&|_| true, ScanTarget::Images).unwrap_or_default()
    }

    pub fn site_stats(&self) -> SiteStats {
        let inner = self.read();
        let idx = &inner.index;
        SiteStats {
            num_patients: idx.patients.len() as u64,
            num_image_files: idx.images.len() as u64,
            num_derived_files: idx.derived.len() as u64,
            metadata_size_bytes: idx.log_bytes,
            blob_storage_size_bytes: idx.blobs.values().sum(),
        }
    }

    /// Raw bytes of the metadata log.
    pub fn meta_log_bytes(&self) -> Result<Vec<u8>, StoreError> {
        self.read().log.bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mgql::{eval, parse_query};
    use crate::model::{parse_date, pseudonymize, Laterality, Region, Sex, View};

    fn site() -> SiteId {
        SiteId::new("cambridge").unwrap()
    }

    fn patient(raw: &str) -> PatientRecord {
        PatientRecord {
            pid: pseudonymize(raw, b"0123456789abcdef0123").unwrap(),
            sex: Sex::Female,
            birth_year: 1950,
            height_m: Some(1.6),
            weight_kg: Some(61.0),
        }
    }

    fn image(store: &Store, pid: &Pseudonym, lat: Laterality, payload: &[u8]) -> ImageRecord {
        ImageRecord {
            local_id: 0,
            pid: pid.clone(),
            modality: "MG".into(),
            laterality: lat,
            view: View::Cc,
            study_date: parse_date("20040101").unwrap(),
            age_at_study: 54,
            rows: 10,
            cols: 20,
            blob: store.put_blob(payload).unwrap(),
        }
    }

    fn smf(image_local_id: u64, density: f64) -> DerivedRecord {
        DerivedRecord {
            local_id: 0,
            image_local_id,
            kind: DerivedKind::Smf,
            fields: [("density_pct".to_string(), density)].into(),
            algo_id: "density-v1".into(),
            job_id: "job".into(),
        }
    }

    #[test]
    fn blobs_are_content_addressed() {
        let s = Store::in_memory(site());
        let a = s.put_blob(b"hello").unwrap();
        assert_eq!(s.blob_count(), 1);
        let b = s.put_blob(b"hello").unwrap();
        assert_eq!(a, b);
        assert_eq!(s.blob_count(), 1);
        let c = s.put_blob(b"world").unwrap();
        assert_ne!(a, c);
        assert_eq!(s.get_blob(&a).unwrap(), b"hello");
        assert_eq!(s.put_blob(b""), Err(StoreError::EmptyBlob));
        let unknown = BlobRef {
            sha256: sha256_hex(b"nope"),
            size_bytes: 4,
        };
        assert_eq!(s.get_blob(&unknown), Err(StoreError::NotFound));
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let s = Store::in_memory(site());
        let r = s.put_blob(&[7u8; 100]).unwrap();
        s.inject_bit_flip(&r, 50).unwrap();
        assert!(matches!(s.get_blob(&r), Err(StoreError::IntegrityError(_))));

        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(site(), dir.path()).unwrap();
        let r = s.put_blob(&[9u8; 100]).unwrap();
        let path = dir
            .path()
            .join("blobs")
            .join(&r.sha256[..2])
            .join(&r.sha256);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] ^= 0x80;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(s.get_blob(&r), Err(StoreError::IntegrityError(_))));
    }

    #[test]
    fn large_blob_hash_matches_external_tool() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(site(), dir.path()).unwrap();
        let bytes: Vec<u8> = (0..8 * 1024 * 1024u32)
            .map(|i| (i.wrapping_mul(2654435761) >> 13) as u8)
            .collect();
        let r = s.put_blob(&bytes).unwrap();
        let file = dir.path().join("probe.bin");
        std::fs::write(&file, &bytes).unwrap();
        let out = match std::process::Command::new("sha256sum").arg(&file).output() {
            Ok(o) if o.status.success() => o,
            _ => return, // no coreutils on this host
        };
        let external = String::from_utf8(out.stdout).unwrap();
        assert_eq!(external.split_whitespace().next().unwrap(), r.sha256);
        assert_eq!(r.size_bytes, bytes.len() as u64);
    }

    #[test]
    fn patients_upsert_and_validate() {
        let s = Store::in_memory(site());
        let mut p = patient("a");
        s.upsert_patient(p.clone()).unwrap();
        assert_eq!(s.patient(&p.pid), Some(p.clone()));
        p.weight_kg = Some(70.5);
        s.upsert_patient(p.clone()).unwrap();
        assert_eq!(s.patient(&p.pid).unwrap().weight_kg, Some(70.5));
        p.birth_year = 1700;
        assert!(matches!(
            s.upsert_patient(p),
            Err(StoreError::InvariantViolation(_))
        ));
    }

    #[test]
    fn image_ids_increase() {
        let s = Store::in_memory(site());
        let p = patient("a");
        let img = image(&s, &p.pid, Laterality::Left, b"x");
        assert!(matches!(
            s.insert_image(img.clone()),
            Err(StoreError::UnknownPatient(_))
        ));
        s.upsert_patient(p.clone()).unwrap();
        let ids: Vec<u64> = (0..3)
            .map(|_| s.insert_image(img.clone()).unwrap())
            .collect();
        assert_eq!(ids, vec![1, 2, 3]);
    }

    #[test]
    fn derived_and_latest_wins() {
        let s = Store::in_memory(site());
        let p = patient("a");
        s.upsert_patient(p.clone()).unwrap();
        let id = s
            .insert_image(image(&s, &p.pid, Laterality::Left, b"x"))
            .unwrap();
        assert_eq!(
            s.insert_derived(smf(99, 1.0)),
            Err(StoreError::UnknownImage(99))
        );
        let mut bad = smf(id, 1.0);
        bad.fields.clear();
        assert!(matches!(
            s.insert_derived(bad),
            Err(StoreError::InvariantViolation(_))
        ));

        let q = parse_query("SELECT images WHERE derived.density_pct > 50")
            .unwrap()
            .expr
            .unwrap();
        let hits = |s: &Store| s.scan(&|r| eval(&q, r), ScanTarget::Images).unwrap().len();
        assert_eq!(hits(&s), 0, "missing derived data never matches");
        s.insert_derived(smf(id, 70.0)).unwrap();
        assert_eq!(hits(&s), 1);
        s.insert_derived(smf(id, 30.0)).unwrap();
        assert_eq!(hits(&s), 0, "newest record supersedes");
        assert_eq!(s.derived_for(id).len(), 2);
        assert_eq!(s.site_stats().num_derived_files, 2);
    }

    #[test]
    fn annotations() {
        let s = Store::in_memory(site());
        let p = patient("a");
        s.upsert_patient(p.clone()).unwrap();
        let id = s
            .insert_image(image(&s, &p.pid, Laterality::Left, b"x"))
            .unwrap();
        let note = |author: &str, x1| AnnotationRecord {
            local_id: 0,
            image_local_id: id,
            author: author.into(),
            region: Region {
                x0: 0,
                y0: 0,
                x1,
                y1: 10,
            },
            text: "mass".into(),
            created_at: 0,
        };
        s.insert_annotation(note("amy", 20)).unwrap();
        s.insert_annotation(note("bob", 5)).unwrap();
        assert_eq!(
            s.insert_annotation(note("cy", 21)),
            Err(StoreError::RegionOutOfBounds)
        );
        let mut dangling = note("dee", 5);
        dangling.image_local_id = 7;
        assert_eq!(
            s.insert_annotation(dangling),
            Err(StoreError::UnknownImage(7))
        );
        let authors: Vec<String> = s
            .annotations_for(id)
            .into_iter()
            .map(|a| a.author)
            .collect();
        assert_eq!(authors, vec!["amy", "bob"]);
    }

    #[test]
    fn scan_matches_dump_filter() {
        let s = Store::in_memory(site());
        assert!(s.scan(&|_| true, ScanTarget::Images).unwrap().is_empty());
        for (i, raw) in ["a", "b", "c"].iter().enumerate() {
            let mut p = patient(raw);
            p.sex = if i == 1 { Sex::Male } else { Sex::Female };
            s.upsert_patient(p.clone()).unwrap();
            for lat in [Laterality::Left, Laterality::Right] {
                s.insert_image(image(&s, &p.pid, lat, format!("{raw}{lat}").as_bytes()))
                    .unwrap();
            }
        }
        let q = parse_query("SELECT images WHERE patient.sex = 'F'")
            .unwrap()
            .expr
            .unwrap();
        let scanned = s.scan(&|r| eval(&q, r), ScanTarget::Images).unwrap();
        let brute: Vec<JoinedRow> = s
            .dump()
            .into_iter()
            .filter(|r| r.patient.sex == Sex::Female)
            .collect();
        assert_eq!(scanned, brute);
        assert_eq!(scanned.len(), 4);

        let pats = s.scan(&|r| eval(&q, r), ScanTarget::Patients).unwrap();
        assert_eq!(pats.len(), 2);
        assert!(pats.windows(2).all(|w| w[0].patient.pid < w[1].patient.pid));
    }

    #[test]
    fn stats() {
        let s = Store::in_memory(site());
        assert_eq!(s.site_stats(), SiteStats::default());
        let p = patient("a");
        s.upsert_patient(p.clone()).unwrap();
        s.insert_image(image(&s, &p.pid, Laterality::Left, b"abcd"))
            .unwrap();
        let st = s.site_stats();
        assert_eq!(
            (
                st.num_patients,
                st.num_image_files,
                st.blob_storage_size_bytes
            ),
            (1, 1, 4)
        );
        assert_eq!(
            st.metadata_size_bytes,
            s.meta_log_bytes().unwrap().len() as u64
        );
    }

    #[test]
    fn reopen_replays_log() {
        let dir = tempfile::tempdir().unwrap();
        let p = patient("a");
        let id = {
            let s = Store::open(site(), dir.path()).unwrap();
            s.upsert_patient(p.clone()).unwrap();
            let id = s
                .insert_image(image(&s, &p.pid, Laterality::Right, b"pixels"))
                .unwrap();
            s.insert_derived(smf(id, 12.5)).unwrap();
            s.put_doc("job", "j1", serde_json::json!({"state": "NEW"}))
                .unwrap();
            s.put_doc("job", "j1", serde_json::json!({"state": "COMPLETED"}))
                .unwrap();
            id
        };
        let s = Store::open(site(), dir.path()).unwrap();
        let img = s.image(id).unwrap();
        assert_eq!(s.get_blob(&img.blob).unwrap(), b"pixels");
        assert_eq!(s.image_by_blob(&img.blob.sha256), Some(id));
        assert_eq!(s.get_doc("job", "j1").unwrap()["state"], "COMPLETED");
        assert_eq!(s.insert_image(img).unwrap(), id + 1);
        let st = s.site_stats();
        assert_eq!(
            (st.num_patients, st.num_image_files, st.num_derived_files),
            (1, 2, 1)
        );
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = Store::open(site(), dir.path()).unwrap();
            s.upsert_patient(patient("a")).unwrap();
        }
        let log = dir.path().join("meta.log");
        let mut bytes = std::fs::read(&log).unwrap();
        let good = bytes.len();
        bytes.extend_from_slice(&[0, 0, 1, 0, b'{']);
        std::fs::write(&log, bytes).unwrap();
        let s = Store::open(site(), dir.path()).unwrap();
        assert_eq!(s.site_stats().num_patients, 1);
        assert_eq!(std::fs::metadata(&log).unwrap().len() as usize, good);
    }

    #[test]
    fn scans_see_whole_writes() {
        use std::sync::Arc;
        let s = Arc::new(Store::in_memory(site()));
        let p = patient("a");
        s.upsert_patient(p.clone()).unwrap();
        let writer = {
            let s = Arc::clone(&s);
            let p = p.clone();
            std::thread::spawn(move || {
                for i in 0..200u32 {
                    let img = image(&s, &p.pid, Laterality::Left, &i.to_le_bytes());
                    s.insert_image(img).unwrap();
                }
            })
        };
        for _ in 0..50 {
            let rows = s.dump();
            let ids: Vec<u64> = rows
                .iter()
                .map(|r| r.image.as_ref().unwrap().local_id)
                .collect();
            assert!(ids.iter().enumerate().all(|(i, id)| *id == i as u64 + 1));
        }
        writer.join().unwrap();
        assert_eq!(s.dump().len(), 200);
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn current_year() -> i32 {
    use chrono::Datelike;
    chrono::Utc::now().year()
}

// No wall clock on wasm32-unknown-unknown.
#[cfg(target_arch = "wasm32")]
fn current_year() -> i32 {
    2100
}
