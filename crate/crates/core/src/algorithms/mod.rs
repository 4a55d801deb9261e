//! Algorithm descriptors, data-local task execution and job bookkeeping.
//!
//! Algorithms are parameterized descriptors of built-in plugins; no code is
//! uploaded. A job runs one task per routed site, at that site, and only the
//! task summary travels back.

mod jobs;
pub mod plugins;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::{extract_metadata, parse_dicom, pixel_samples};
use crate::federation::execute_local;
use crate::mgql::{parse_query, Target};
use crate::model::{parse_gfid, DerivedKind, DerivedRecord};
use crate::store::Store;

pub use jobs::{
    advance_job, new_job_id, schedule_job, JobRecord, JobState, TaskRecord, TaskResult, TaskState,
};
use plugins::{MicrocalcParams, NormalizeParams, Pixels, PluginError, Threshold};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlgoError {
    #[error("unknown plugin kind `{0}`")]
    UnknownPluginKind(String),
    #[error("algorithm `{0}` already registered")]
    DuplicateAlgoId(String),
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: String, to: String },
    #[error("unknown task: {0}")]
    UnknownTask(String),
}

impl AlgoError {
    pub fn code(&self) -> &'static str {
        match self {
            AlgoError::UnknownPluginKind(_) => "UnknownPluginKind",
            AlgoError::DuplicateAlgoId(_) => "DuplicateAlgoId",
            AlgoError::UnknownAlgorithm(_) => "UnknownAlgorithm",
            AlgoError::BadParams(_) => "BadParams",
            AlgoError::IllegalTransition { .. } => "IllegalTransition",
            AlgoError::UnknownTask(_) => "UnknownTask",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PluginKind {
    /// Normalize grey levels, then measure density.
    Normalize,
    Density,
    Microcalc,
}

impl PluginKind {
    pub fn name(self) -> &'static str {
        match self {
            PluginKind::Normalize => "normalize",
            PluginKind::Density => "density",
            PluginKind::Microcalc => "microcalc",
        }
    }

    pub fn output_kind(self) -> DerivedKind {
        match self {
            PluginKind::Normalize | PluginKind::Density => DerivedKind::Smf,
            PluginKind::Microcalc => DerivedKind::Cade,
        }
    }

    /// Accepted parameters and their inclusive ranges.
    pub fn param_ranges(self) -> &'static [(&'static str, f64, f64)] {
        match self {
            PluginKind::Normalize => &[
                ("target_mean", 0.0, 65535.0),
                ("target_std", 1.0, 65535.0),
                ("threshold", 0.0, 65535.0),
            ],
            PluginKind::Density => &[("threshold", 0.0, 65535.0)],
            PluginKind::Microcalc => &[
                ("threshold", 0.0, 65535.0),
                ("min_area", 1.0, 1e6),
                ("max_area", 1.0, 1e6),
            ],
        }
    }
}

impl fmt::Display for PluginKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PluginKind {
    type Err = AlgoError;
    fn from_str(s: &str) -> Result<Self, AlgoError> {
        match s {
            "normalize" => Ok(PluginKind::Normalize),
            "density" => Ok(PluginKind::Density),
            "microcalc" => Ok(PluginKind::Microcalc),
            other => Err(AlgoError::UnknownPluginKind(other.to_string())),
        }
    }
}

/// `name-vN`: a registered, immutable plugin configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmDescriptor {
    pub algo_id: String,
    pub plugin_kind: PluginKind,
    pub params: BTreeMap<String, f64>,
    pub version: u32,
}

/// Splits `name-vN` into its name and version.
pub fn split_algo_id(id: &str) -> Option<(&str, u32)> {
    let (name, v) = id.rsplit_once("-v")?;
    let ok_name = !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
    let ok_v = !v.is_empty() && v.bytes().all(|b| b.is_ascii_digit());
    (ok_name && ok_v).then(|| v.parse().ok().map(|v| (name, v)))?
}

impl AlgorithmDescriptor {
    pub fn new(
        algo_id: &str,
        plugin_kind: PluginKind,
        params: BTreeMap<String, f64>,
    ) -> Result<Self, AlgoError> {
        let (_, version) = split_algo_id(algo_id).ok_or_else(|| {
            AlgoError::BadParams(format!(
                "algorithm id `{algo_id}` is not of the form name-vN"
            ))
        })?;
        let d = AlgorithmDescriptor {
            algo_id: algo_id.to_string(),
            plugin_kind,
            params,
            version,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        if split_algo_id(&self.algo_id).map(|(_, v)| v) != Some(self.version) {
            return Err(AlgoError::BadParams(format!(
                "`{}` does not end in -v{}",
                self.algo_id, self.version
            )));
        }
        let ranges = self.plugin_kind.param_ranges();
        for (k, v) in &self.params {
            let (_, lo, hi) = ranges.iter().find(|(name, ..)| name == k).ok_or_else(|| {
                AlgoError::BadParams(format!("{} takes no parameter `{k}`", self.plugin_kind))
            })?;
            if !(v.is_finite() && (*lo..=*hi).contains(v)) {
                return Err(AlgoError::BadParams(format!(
                    "`{k}` = {v} outside [{lo}, {hi}]"
                )));
            }
            if k != "target_mean" && k != "target_std" && v.fract() != 0.0 {
                return Err(AlgoError::BadParams(format!("`{k}` must be an integer")));
            }
        }
        let area = |k: &str, d: f64| self.params.get(k).copied().unwrap_or(d);
        if self.plugin_kind == PluginKind::Microcalc
            && area("min_area", 1.0) > area("max_area", 64.0)
        {
            return Err(AlgoError::BadParams("min_area exceeds max_area".into()));
        }
        Ok(())
    }

    fn threshold(&self) -> Threshold {
        self.params
            .get("threshold")
            .map_or(Threshold::Otsu, |t| Threshold::Fixed(*t as u16))
    }

    /// Runs the plugin on one image and returns the derived fields.
    pub fn run(&self, px: &Pixels) -> Result<BTreeMap<String, f64>, PluginError> {
        let mut out = BTreeMap::new();
        match self.plugin_kind {
            PluginKind::Density => {
                out.insert(
                    "density_pct".to_string(),
                    plugins::density(px, self.threshold())?,
                );
            }
            PluginKind::Normalize => {
                let d = NormalizeParams::default();
                let p = NormalizeParams {
                    target_mean: self
                        .params
                        .get("target_mean")
                        .copied()
                        .unwrap_or(d.target_mean),
                    target_std: self
                        .params
                        .get("target_std")
                        .copied()
                        .unwrap_or(d.target_std),
                };
                let norm = plugins::normalize(px, p)?;
                let (mean, std) = norm.mean_std();
                out.insert(
                    "density_pct".to_string(),
                    plugins::density(&norm, self.threshold())?,
                );
                out.insert("norm_mean".to_string(), (mean * 100.0).round() / 100.0);
                out.insert("norm_std".to_string(), (std * 100.0).round() / 100.0);
            }
            PluginKind::Microcalc => {
                let d = MicrocalcParams::for_max_value(px.max_value);
                let p = MicrocalcParams {
                    threshold: self
                        .params
                        .get("threshold")
                        .map_or(d.threshold, |t| *t as u16),
                    min_area: self
                        .params
                        .get("min_area")
                        .map_or(d.min_area, |a| *a as usize),
                    max_area: self
                        .params
                        .get("max_area")
                        .map_or(d.max_area, |a| *a as usize),
                };
                out.insert(
                    "num_findings".to_string(),
                    plugins::microcalc(px, p)?.len() as f64,
                );
            }
        }
        Ok(out)
    }
}

/// The VO-wide set of registered algorithms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    algos: BTreeMap<String, AlgorithmDescriptor>,
}

impl Catalog {
    pub fn register(&mut self, d: AlgorithmDescriptor) -> Result<(), AlgoError> {
        d.validate()?;
        if self.algos.contains_key(&d.algo_id) {
            return Err(AlgoError::DuplicateAlgoId(d.algo_id));
        }
        self.algos.insert(d.algo_id.clone(), d);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&AlgorithmDescriptor, AlgoError> {
        self.algos
            .get(id)
            .ok_or_else(|| AlgoError::UnknownAlgorithm(id.to_string()))
    }

    pub fn list(&self) -> Vec<AlgorithmDescriptor> {
        self.algos.values().cloned().collect()
    }

    pub fn replace_all(&mut self, list: Vec<AlgorithmDescriptor>) {
        self.algos = list.into_iter().map(|d| (d.algo_id.clone(), d)).collect();
    }
}

/// Grey levels of a stored DICOM file.
pub fn decode_pixels(dicom_bytes: &[u8]) -> Result<Pixels, String> {
    let tags = parse_dicom(dicom_bytes).map_err(|e| e.to_string())?;
    let meta = extract_metadata(&tags).map_err(|e| e.to_string())?;
    let data = pixel_samples(&tags, &meta).map_err(|e| e.to_string())?;
    let max_value = if meta.bits_allocated >= 16 {
        u16::MAX
    } else {
        (1u16 << meta.bits_allocated) - 1
    };
    Ok(Pixels::new(
        meta.rows as usize,
        meta.cols as usize,
        max_value,
        data,
    ))
}

/// Runs one site's task against its own store: select images, run the plugin
/// on each, then write every derived record or none.
pub fn run_task(
    store: &Store,
    algo: &AlgorithmDescriptor,
    job_id: &str,
    task: &TaskRecord,
) -> TaskRecord {
    let mut out = task.clone();
    let fail = |mut t: TaskRecord, msg: String| {
        t.state = TaskState::Failed;
        t.derived_written = 0;
        t.error = Some(msg);
        t
    };
    let q = match parse_query(&task.selector) {
        Ok(q) => q,
        Err(e) => return fail(out, e.to_string()),
    };
    let selected = match execute_local(
        store,
        &crate::mgql::QueryAst {
            target: Target::Images,
            expr: q.expr,
            exec: None,
        },
    ) {
        Ok(rs) => rs,
        Err(e) => return fail(out, e.to_string()),
    };
    out.images_selected = selected.rows.len() as u64;
    let mut results = Vec::new();
    let mut errors = Vec::new();
    for row in &selected.rows {
        let outcome = (|| {
            let gfid = parse_gfid(&row.id).map_err(|e| e.to_string())?;
            let img = store
                .image(gfid.local_id)
                .ok_or_else(|| format!("image {} vanished", row.id))?;
            let bytes = store.get_blob(&img.blob).map_err(|e| e.to_string())?;
            let px = decode_pixels(&bytes)?;
            let fields = algo.run(&px).map_err(|e| e.to_string())?;
            Ok::<_, String>((gfid.local_id, fields))
        })();
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => errors.push(format!("{}: {e}", row.id)),
        }
    }
    if !errors.is_empty() {
        return fail(out, errors.join("; "));
    }
    for (image_local_id, fields) in results {
        let rec = DerivedRecord {
            local_id: 0,
            image_local_id,
            kind: algo.plugin_kind.output_kind(),
            fields,
            algo_id: algo.algo_id.clone(),
            job_id: job_id.to_string(),
        };
        if let Err(e) = store.insert_derived(rec) {
            return fail(out, e.to_string());
        }
        out.derived_written += 1;
    }
    out.state = TaskState::Done;
    out.error = None;
    out
}
