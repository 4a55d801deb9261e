//! Byte scans over stores and tapped frames: identity leaks and pixel data
//! leaving its site.

use aho_corasick::AhoCorasick;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::Value;

use super::corpus::CorpusManifest;
use crate::dicom::{parse_dicom, tags};
use crate::services::TapFrame;
use crate::store::Store;

/// Length of the pixel-data prefix used as a locality needle.
pub const PIXEL_PREFIX: usize = 64;

/// Multi-needle byte search.
pub struct Scanner {
    ac: AhoCorasick,
    pub needles: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hit {
    pub needle: usize,
    /// Where the needle was found, e.g. `frame udine->cambridge #3`.
    pub location: String,
}

impl Scanner {
    pub fn new(needles: Vec<Vec<u8>>) -> Scanner {
        let ac = AhoCorasick::new(&needles).expect("needles build an automaton");
        Scanner { ac, needles }
    }

    pub fn first(&self, hay: &[u8]) -> Option<usize> {
        if self.needles.is_empty() {
            return None;
        }
        self.ac.find(hay).map(|m| m.pattern().as_usize())
    }

    /// Searches `hay` and appends at most one hit for it.
    pub fn scan(&self, hay: &[u8], location: &str, hits: &mut Vec<Hit>) {
        if let Some(needle) = self.first(hay) {
            hits.push(Hit {
                needle,
                location: location.to_string(),
            });
        }
    }

    /// Searches each frame as sent and with its base64 strings decoded.
    pub fn scan_frames(&self, frames: &[TapFrame]) -> Vec<Hit> {
        let mut hits = Vec::new();
        for f in frames {
            let loc = format!("frame {}->{} #{}", f.from, f.to, f.seq);
            for hay in frame_views(&f.bytes) {
                let before = hits.len();
                self.scan(&hay, &loc, &mut hits);
                if hits.len() > before {
                    break;
                }
            }
        }
        hits
    }
}

/// A frame's raw bytes followed by every base64 string in its JSON decoded.
pub fn frame_views(frame: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![frame.to_vec()];
    let Some(json) = frame
        .get(4..)
        .and_then(|p| serde_json::from_slice::<Value>(p).ok())
    else {
        return out;
    };
    fn walk(v: &Value, out: &mut Vec<Vec<u8>>) {
        match v {
            Value::String(s) if s.len() >= 16 => {
                if let Ok(b) = B64.decode(s) {
                    out.push(b);
                }
            }
            Value::Array(xs) => xs.iter().for_each(|x| walk(x, out)),
            Value::Object(m) => m.values().for_each(|x| walk(x, out)),
            _ => {}
        }
    }
    walk(&json, &mut out);
    out
}

/// Raw patient ids and names from the manifest, deduplicated.
pub fn identity_needles(m: &CorpusManifest) -> Vec<Vec<u8>> {
    let mut v: Vec<Vec<u8>> = m
        .entries
        .iter()
        .flat_map(|e| {
            [
                e.raw_patient_id.as_bytes().to_vec(),
                e.raw_patient_name.as_bytes().to_vec(),
            ]
        })
        .collect();
    v.sort();
    v.dedup();
    v
}

/// The first bytes of the pixel data of every blob in `store`.
pub fn pixel_prefixes(store: &Store) -> Vec<Vec<u8>> {
    store
        .dump()
        .iter()
        .filter_map(|r| {
            let img = r.image.as_ref()?;
            let bytes = store.get_blob(&img.blob).ok()?;
            let px = parse_dicom(&bytes)
                .ok()?
                .get(tags::PIXEL_DATA)?
                .value
                .clone();
            Some(px[..PIXEL_PREFIX.min(px.len())].to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_plain_and_base64() {
        let s = Scanner::new(vec![b"MGR-ALDERTON-00001".to_vec(), vec![7u8; 64]]);
        let body =
            serde_json::json!({"bytes_b64": B64.encode([vec![1u8; 10], vec![7u8; 64]].concat())});
        let mut frame = Vec::new();
        let payload = serde_json::to_vec(&body).unwrap();
        frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        frame.extend_from_slice(&payload);
        let f = TapFrame {
            from: "a".into(),
            to: "b".into(),
            seq: 1,
            bytes: frame,
        };
        let hits = s.scan_frames(&[f]);
        assert_eq!(
            hits,
            vec![Hit {
                needle: 1,
                location: "frame a->b #1".into()
            }]
        );
        assert_eq!(s.first(b"xx MGR-ALDERTON-00001 yy"), Some(0));
        assert_eq!(s.first(b"MGR-ALDERTON-0000"), None);
        assert_eq!(Scanner::new(vec![]).first(b"anything"), None);
    }
}
