//! Synthetic mammography corpus with a ground-truth manifest.
//!
//! Every image is 8-bit: a dark background (10..=40), a bright dense band
//! (140..=180) filling the first rows, and a few tiny saturated blobs
//! (250..=255) that stand in for microcalcifications.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::{tags, write_dicom, TagSet, Vr, MAMMO_SOP_CLASS};
use crate::model::{format_date, Laterality, Region, Sex, View};
use crate::store::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("BadParams: {0}")]
    BadParams(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub seed: u64,
    pub patients: usize,
    pub per_patient: usize,
    pub rows: u16,
    pub cols: u16,
}

impl CorpusParams {
    pub fn new(seed: u64, patients: usize, per_patient: usize) -> CorpusParams {
        CorpusParams {
            seed,
            patients,
            per_patient,
            rows: 128,
            cols: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub filename: String,
    pub sha256: String,
    pub patient_index: usize,
    pub raw_patient_id: String,
    pub raw_patient_name: String,
    #[serde(with = "date")]
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub height_m: Option<f64>,
    pub weight_kg: Option<f64>,
    #[serde(with = "date")]
    pub study_date: NaiveDate,
    pub laterality: Laterality,
    pub view: View,
    pub planted_dense_fraction: f64,
    pub planted_blob_count: usize,
    /// End-exclusive boxes ordered by (y0, x0).
    pub planted_blob_bboxes: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub params: CorpusParams,
    pub entries: Vec<ManifestEntry>,
}

mod date {
    use chrono::NaiveDate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &NaiveDate, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::model::format_date(*d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
        let s = String::deserialize(d)?;
        crate::model::parse_date(&s).map_err(serde::de::Error::custom)
    }
}

pub struct Corpus {
    pub manifest: CorpusManifest,
    /// Aligned with the manifest entries.
    pub files: Vec<Vec<u8>>,
}

const SURNAMES: &[&str] = &[
    "ALDERTON",
    "BRIGHTWELL",
    "CASTELLANO",
    "DUNMORE",
    "ELLSWORTH",
    "FAIRBANKS",
    "GALLOWAY",
    "HARTLEY",
    "IRONSIDE",
    "JESSUP",
    "KINGSLEY",
    "LOCKWOOD",
    "MARSHBANK",
    "NORTHCOTE",
    "OAKENFOLD",
    "PEMBERTON",
    "QUINTERO",
    "ROSSETTI",
    "SALTONSTALL",
    "THORNBURY",
    "UPWOOD",
    "VANCOURT",
    "WINTERBOURNE",
    "YARDLEY",
    "ZANETTI",
];

const GIVEN: &[&str] = &[
    "ADELINA",
    "BEATRIX",
    "CORDELIA",
    "DOMENICA",
    "EVANGELINE",
    "FIORELLA",
    "GWENDOLYN",
    "HONORIA",
    "ISOLDE",
    "JOSEPHINE",
    "KATARINA",
    "LUDOVICA",
    "MARGHERITA",
    "NICOLETTA",
    "OTTAVIA",
    "PERPETUA",
    "ROSALIND",
    "SERAFINA",
    "TERESINA",
    "VALENTINA",
    "WILHELMINA",
];

/// Laterality and view for the four standard screening images.
const VIEWS: [(Laterality, View); 4] = [
    (Laterality::Left, View::Cc),
    (Laterality::Left, View::Mlo),
    (Laterality::Right, View::Cc),
    (Laterality::Right, View::Mlo),
];

fn day_in(rng: &mut ChaCha8Rng, from: NaiveDate, to: NaiveDate) -> NaiveDate {
    from + Duration::days(rng.random_range(0..=(to - from).num_days()))
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

struct Planted {
    pixels: Vec<u8>,
    dense_fraction: f64,
    blobs: Vec<Region>,
}

fn plant(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Planted {
    let n = rows * cols;
    let f: f64 = rng.random_range(0.15..0.65);
    let k = ((f * n as f64).round() as usize).clamp(1, n - 1);
    let mut px: Vec<u8> = (0..n)
        .map(|i| {
            if i < k {
                rng.random_range(140..=180)
            } else {
                rng.random_range(10..=40)
            }
        })
        .collect();
    let mut bright = k;
    let full_rows = k / cols;
    let want = rng.random_range(0..=5usize);
    let mut blobs: Vec<Region> = Vec::new();
    for _ in 0..want {
        let (w, h) = (rng.random_range(2..=3u32), rng.random_range(2..=3u32));
        let in_dense = full_rows >= h as usize + 2;
        let (y_lo, y_hi) = if in_dense {
            (1, full_rows as u32 - h - 1)
        } else {
            ((full_rows + 2) as u32, rows as u32 - h - 1)
        };
        if y_lo > y_hi || cols < w as usize + 2 {
            continue;
        }
        for _attempt in 0..100 {
            let x0 = rng.random_range(1..=(cols as u32 - w - 1));
            let y0 = rng.random_range(y_lo..=y_hi);
            let r = Region {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            };
            let clear = blobs.iter().all(|b| {
                r.x0 >= b.x1 + 2 || b.x0 >= r.x1 + 2 || r.y0 >= b.y1 + 2 || b.y0 >= r.y1 + 2
            });
            if !clear {
                continue;
            }
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    let i = y as usize * cols + x as usize;
                    if i >= k {
                        bright += 1;
                    }
                    px[i] = rng.random_range(250..=255);
                }
            }
            blobs.push(r);
            break;
        }
    }
    blobs.sort_by_key(|b| (b.y0, b.x0));
    Planted {
        pixels: px,
        dense_fraction: bright as f64 / n as f64,
        blobs,
    }
}

/// Generates the corpus in memory. Identical parameters give identical bytes.
pub fn gen_corpus(p: CorpusParams) -> Result<Corpus, CorpusError> {
    if p.rows < 16 || p.cols < 16 {
        return Err(CorpusError::BadParams(format!(
            "images must be at least 16x16, got {}x{}",
            p.rows, p.cols
        )));
    }
    if p.patients > 0 && p.per_patient == 0 {
        return Err(CorpusError::BadParams(
            "per_patient must be at least 1".into(),
        ));
    }
    if p.patients > 99_999 || p.per_patient > 64 {
        return Err(CorpusError::BadParams(
            "at most 99999 patients with 64 images each".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut entries = Vec::new();
    let mut files = Vec::new();
    for pi in 0..p.patients {
        let surname = SURNAMES[rng.random_range(0..SURNAMES.len())];
        let given = GIVEN[rng.random_range(0..GIVEN.len())];
        let raw_id = format!("MGR-{surname}-{:05}", pi + 1);
        let raw_name = format!("{surname}^{given}");
        let sex = match rng.random_range(0..100) {
            0..=87 => Sex::Female,
            88..=97 => Sex::Male,
            _ => Sex::Other,
        };
        let birth = day_in(&mut rng, ymd(1925, 1, 1), ymd(1975, 12, 31));
        let height_m = rng
            .random_bool(0.85)
            .then(|| f64::from(rng.random_range(148..=185u32)) / 100.0);
        let weight_kg = rng
            .random_bool(0.85)
            .then(|| f64::from(rng.random_range(450..=1100u32)) / 10.0);
        let first_view = rng.random_range(0..4usize);
        for ii in 0..p.per_patient {
            let study = day_in(&mut rng, ymd(2000, 1, 1), ymd(2005, 12, 31));
            let (laterality, view) = VIEWS[(first_view + ii) % 4];
            let planted = plant(&mut rng, p.rows.into(), p.cols.into());
            let mut t = TagSet::new();
            t.set_text(tags::SOP_CLASS_UID, Vr::UI, MAMMO_SOP_CLASS);
            t.set_text(
                tags::SOP_INSTANCE_UID,
                Vr::UI,
                &format!("2.25.{}.{}.{}", p.seed, pi + 1, ii + 1),
            );
            t.set_text(tags::STUDY_DATE, Vr::DA, &format_date(study));
            t.set_text(tags::MODALITY, Vr::CS, "MG");
            t.set_text(tags::PATIENT_NAME, Vr::PN, &raw_name);
            t.set_text(tags::PATIENT_ID, Vr::LO, &raw_id);
            t.set_text(tags::PATIENT_BIRTH_DATE, Vr::DA, &format_date(birth));
            t.set_text(tags::PATIENT_SEX, Vr::CS, sex.code());
            if let Some(h) = height_m {
                t.set_text(tags::PATIENT_SIZE, Vr::DS, &format!("{h}"));
            }
            if let Some(w) = weight_kg {
                t.set_text(tags::PATIENT_WEIGHT, Vr::DS, &format!("{w}"));
            }
            t.set_text(tags::VIEW_POSITION, Vr::CS, view.code());
            t.set_text(tags::IMAGE_LATERALITY, Vr::CS, laterality.code());
            t.set_us(tags::SAMPLES_PER_PIXEL, 1);
            t.set_text(tags::PHOTOMETRIC, Vr::CS, "MONOCHROME2");
            t.set_us(tags::ROWS, p.rows);
            t.set_us(tags::COLUMNS, p.cols);
            t.set_us(tags::BITS_ALLOCATED, 8);
            t.insert(tags::PIXEL_DATA, Vr::OB, planted.pixels);
            let bytes = write_dicom(&t).map_err(|e| CorpusError::BadParams(e.to_string()))?;
            entries.push(ManifestEntry {
                filename: format!("p{:05}_i{:02}.dcm", pi + 1, ii + 1),
                sha256: sha256_hex(&bytes),
                patient_index: pi,
                raw_patient_id: raw_id.clone(),
                raw_patient_name: raw_name.clone(),
                birth_date: birth,
                sex,
                height_m,
                weight_kg,
                study_date: study,
                laterality,
                view,
                planted_dense_fraction: planted.dense_fraction,
                planted_blob_count: planted.blobs.len(),
                planted_blob_bboxes: planted.blobs,
            });
            files.push(bytes);
        }
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            seed: p.seed,
            params: p,
            entries,
        },
        files,
    })
}

impl Corpus {
    /// Writes every file plus `manifest.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), CorpusError> {
        let io = |e: std::io::Error| CorpusError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        for (e, bytes) in self.manifest.entries.iter().zip(&self.files) {
            std::fs::write(dir.join(&e.filename), bytes).map_err(io)?;
        }
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), json).map_err(io)
    }

    /// Entry indices per site. Whole patients go to one site, round robin.
    pub fn partition(&self, n_sites: usize) -> Vec<Vec<usize>> {
        let n = n_sites.max(1);
        let mut out = vec![Vec::new(); n];
        for (i, e) in self.manifest.entries.iter().enumerate() {
            out[e.patient_index % n].push(i);
        }
        out
    }
}
