//! Browser demo over one in-memory site: phantom mammograms, the density and
//! microcalcification plugins, and MGQL queries against the site's catalog.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use mgvo_core::algorithms::decode_pixels;
use mgvo_core::algorithms::plugins::{self, MicrocalcParams, Threshold};
use mgvo_core::federation::execute_local;
use mgvo_core::harness::{gen_corpus, Corpus, CorpusParams};
use mgvo_core::mgql::{parse_query, print_query};
use mgvo_core::model::SiteId;
use mgvo_core::services::ingest_dicom;
use mgvo_core::store::Store;

const SITE_SECRET: &[u8] = b"browser-demo-site-secret";

#[wasm_bindgen]
pub struct Demo {
    corpus: Corpus,
    store: Store,
}

#[wasm_bindgen]
impl Demo {
    /// A site holding `patients` phantom patients with two views each.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, patients: u32) -> Result<Demo, String> {
        let corpus = gen_corpus(CorpusParams {
            rows: 128,
            cols: 128,
            ..CorpusParams::new(u64::from(seed), patients.clamp(1, 200) as usize, 2)
        })
        .map_err(|e| e.to_string())?;
        let store = Store::in_memory(SiteId::new("demo").expect("valid site id"));
        for f in &corpus.files {
            ingest_dicom(&store, SITE_SECRET, f).map_err(|e| e.to_string())?;
        }
        Ok(Demo { corpus, store })
    }

    pub fn image_count(&self) -> usize {
        self.corpus.files.len()
    }

    pub fn rows(&self) -> u32 {
        u32::from(self.corpus.manifest.params.rows)
    }

    pub fn cols(&self) -> u32 {
        u32::from(self.corpus.manifest.params.cols)
    }

    /// Image `i` as RGBA bytes for a canvas.
    pub fn rgba(&self, i: usize) -> Result<Vec<u8>, String> {
        let px = decode_pixels(self.file(i)?)?;
        let scale = 255.0 / f64::from(px.max_value.max(1));
        Ok(px
            .data
            .iter()
            .flat_map(|&v| {
                let g = (f64::from(v) * scale).round() as u8;
                [g, g, g, 255]
            })
            .collect())
    }

    /// Runs both plugins on image `i`, alongside what the generator planted.
    pub fn analyze(&self, i: usize) -> Result<String, String> {
        let px = decode_pixels(self.file(i)?)?;
        let e = &self.corpus.manifest.entries[i];
        let density = plugins::density(&px, Threshold::Otsu).map_err(|e| e.to_string())?;
        let regions = plugins::microcalc(&px, MicrocalcParams::for_max_value(px.max_value))
            .map_err(|e| e.to_string())?;
        let out = json!({
            "laterality": e.laterality.code(),
            "view": e.view.code(),
            "planted_density_pct": 100.0 * e.planted_dense_fraction,
            "density_pct": density,
            "planted_blobs": e.planted_blob_count,
            "regions": regions.iter().map(|r| [r.x0, r.y0, r.x1, r.y1]).collect::<Vec<_>>(),
        });
        Ok(out.to_string())
    }

    /// Parses and runs a query; returns canonical text and rows, or the error.
    pub fn query(&self, text: &str) -> String {
        run_query(&self.store, text).to_string()
    }
}

impl Demo {
    fn file(&self, i: usize) -> Result<&[u8], String> {
        self.corpus
            .files
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| format!("no image {i}"))
    }
}

fn run_query(store: &Store, text: &str) -> Value {
    let q = match parse_query(text) {
        Ok(q) => q,
        Err(e) => return json!({ "error": e.to_string(), "code": e.code() }),
    };
    if q.exec.is_some() {
        return json!({ "canonical": print_query(&q), "error": "EXEC needs a running grid-box", "code": "BadRequest" });
    }
    match execute_local(store, &q) {
        Ok(rs) => json!({
            "canonical": print_query(&q),
            "columns": rs.columns,
            "rows": rs.rows.iter().map(|r| {
                let mut v = vec![Some(r.id.clone())];
                v.extend(r.values.iter().cloned());
                v
            }).collect::<Vec<_>>(),
        }),
        Err(e) => json!({ "canonical": print_query(&q), "error": e.to_string(), "code": e.code() }),
    }
}
