//! Deterministic image plugins. They stand in for mammogram standardization
//! and microcalcification detection and make no clinical claim.

use thiserror::Error;

use crate::model::Region;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PluginError {
    #[error("EmptyImage")]
    EmptyImage,
    #[error("BadParams: {0}")]
    BadParams(String),
}

/// A grey-level image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pixels {
    pub rows: usize,
    pub cols: usize,
    /// Largest representable sample, `2^bits - 1`.
    pub max_value: u16,
    pub data: Vec<u16>,
}

impl Pixels {
    pub fn new(rows: usize, cols: usize, max_value: u16, data: Vec<u16>) -> Pixels {
        assert_eq!(
            rows * cols,
            data.len(),
            "pixel buffer does not match its extent"
        );
        Pixels {
            rows,
            cols,
            max_value,
            data,
        }
    }

    pub fn filled(rows: usize, cols: usize, max_value: u16, v: u16) -> Pixels {
        Pixels::new(rows, cols, max_value, vec![v; rows * cols])
    }

    pub fn at(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.cols + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u16) {
        self.data[y * self.cols + x] = v;
    }

    fn check(&self) -> Result<(), PluginError> {
        if self.data.is_empty() {
            Err(PluginError::EmptyImage)
        } else {
            Ok(())
        }
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&p| f64::from(p)).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&p| (f64::from(p) - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeParams {
    pub target_mean: f64,
    pub target_std: f64,
}

impl Default for NormalizeParams {
    fn default() -> Self {
        NormalizeParams {
            target_mean: 128.0,
            target_std: 32.0,
        }
    }
}

/// Shifts and scales grey levels to a target mean and standard deviation.
pub fn normalize(px: &Pixels, p: NormalizeParams) -> Result<Pixels, PluginError> {
    px.check()?;
    let max = f64::from(px.max_value);
    let (mean, std) = px.mean_std();
    let data = if std == 0.0 {
        let v = p.target_mean.round().clamp(0.0, max) as u16;
        vec![v; px.data.len()]
    } else {
        px.data
            .iter()
            .map(|&v| {
                ((f64::from(v) - mean) / std * p.target_std + p.target_mean)
                    .round()
                    .clamp(0.0, max) as u16
            })
            .collect()
    };
    Ok(Pixels {
        rows: px.rows,
        cols: px.cols,
        max_value: px.max_value,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Threshold {
    #[default]
    Otsu,
    Fixed(u16),
}

/// Otsu's threshold: the first `t` in `[min, max - 1]` maximizing the
/// between-class variance of `{p <= t}` and `{p > t}`. `None` for a constant
/// image.
pub fn otsu_threshold(px: &Pixels) -> Option<u16> {
    let lo = *px.data.iter().min()?;
    let hi = *px.data.iter().max()?;
    if lo == hi {
        return None;
    }
    let mut hist = vec![0u64; usize::from(hi - lo) + 1];
    for &p in &px.data {
        hist[usize::from(p - lo)] += 1;
    }
    let total = px.data.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, lo);
    for (i, &c) in hist.iter().enumerate().take(hist.len() - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best.0 {
            best = (between, lo + i as u16);
        }
    }
    Some(best.1)
}

/// Percentage of pixels strictly above the threshold, to two decimals.
pub fn density(px: &Pixels, threshold: Threshold) -> Result<f64, PluginError> {
    px.check()?;
    let t = match threshold {
        Threshold::Fixed(t) => t,
        Threshold::Otsu => match otsu_threshold(px) {
            Some(t) => t,
            None => return Ok(0.0),
        },
    };
    let above = px.data.iter().filter(|&&p| p > t).count();
    Ok((100.0 * above as f64 / px.data.len() as f64 * 100.0).round() / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicrocalcParams {
    pub threshold: u16,
    pub min_area: usize,
    pub max_area: usize,
}

impl MicrocalcParams {
    /// Defaults for a given sample depth: threshold 220 on the 8-bit scale.
    pub fn for_max_value(max_value: u16) -> MicrocalcParams {
        let threshold = (220.0 * f64::from(max_value) / 255.0).round() as u16;
        MicrocalcParams {
            threshold,
            min_area: 1,
            max_area: 64,
        }
    }
}

/// Bright 8-connected components with an area in `[min_area, max_area]`.
/// Regions are end-exclusive bounding boxes sorted by `(y0, x0)`.
pub fn microcalc(px: &Pixels, p: MicrocalcParams) -> Result<Vec<Region>, PluginError> {
    px.check()?;
    if p.min_area > p.max_area {
        return Err(PluginError::BadParams(format!(
            "min_area {} exceeds max_area {}",
            p.min_area, p.max_area
        )));
    }
    let (w, h) = (px.cols, px.rows);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || px.data[start] <= p.threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut x0, mut y0, mut x1, mut y1) = (0usize, w, h, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let j = ny * w + nx;
                    if !seen[j] && px.data[j] > p.threshold {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if (p.min_area..=p.max_area).contains(&area) {
            out.push(Region {
                x0: x0 as u32,
                y0: y0 as u32,
                x1: x1 as u32,
                y1: y1 as u32,
            });
        }
    }
    out.sort_by_key(|r| (r.y0, r.x0));
    Ok(out)
}
