//! Thresholding, confusion-count metrics, connected-component
//! post-processing, TP/FP/FN overlays and CSV reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Keep only the largest connected foreground component.
    pub largest_component: bool,
    /// Flip enclosed background (holes) to foreground.
    pub fill_holes: bool,
    pub report_csv: String,
    pub overlay_dir: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            largest_component: true,
            fill_holes: false,
            report_csv: "metrics.csv".into(),
            overlay_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
}

/// pixel >= t maps to 1, else 0. Idempotent on binary input at t in (0,1).
pub fn threshold(probs: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0 < t && t < 1.0) {
        return Err(Error::Config(format!("threshold {t} outside (0,1)")));
    }
    let data = probs.data().iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&probs.shape().to_vec(), data)
}

fn ensure_binary(name: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("{name} mask is not binary")));
    }
    Ok(())
}

/// Dice, precision and recall from per-pixel confusion counts.
///
/// Empty-denominator conventions: if both masks are empty all three metrics
/// are 1; a metric whose own denominator is 0 against a non-empty counterpart
/// is 0.
pub fn metrics(id: &str, pred: &Tensor, gt: &Tensor) -> Result<SampleMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    ensure_binary("pred", pred)?;
    ensure_binary("gt", gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    let dice = if both_empty {
        1.0
    } else {
        2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    let precision = if c.tp + c.fp == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if c.tp + c.fn_ == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    Ok(SampleMetrics { id: id.to_string(), dice, precision, recall, counts: c })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn neighbors(&self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

fn mask_dims(mask: &Tensor) -> Result<(usize, usize)> {
    match mask.shape() {
        [1, h, w] => Ok((*h, *w)),
        [h, w] => Ok((*h, *w)),
        other => Err(Error::Data(format!("expected [1,H,W] or [H,W] mask, got {other:?}"))),
    }
}

/// Keep only the largest connected foreground component (ties go to the
/// component found first in raster-scan order). Empty in, empty out.
pub fn largest_component(mask: &Tensor, connectivity: Connectivity) -> Result<Tensor> {
    ensure_binary("mask", mask)?;
    let (h, w) = mask_dims(mask)?;
    let data = mask.data();
    let mut label = vec![0u32; h * w]; // 0 = unvisited/background
    let mut sizes = vec![0u64];
    let mut stack = Vec::new();
    let mut next = 1u32;
    for start in 0..h * w {
        if data[start] == 0.0 || label[start] != 0 {
            continue;
        }
        sizes.push(0);
        label[start] = next;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            sizes[next as usize] += 1;
            let (y, x) = ((idx / w) as i64, (idx % w) as i64);
            for (dy, dx) in connectivity.neighbors() {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let nidx = ny as usize * w + nx as usize;
                if data[nidx] != 0.0 && label[nidx] == 0 {
                    label[nidx] = next;
                    stack.push(nidx);
                }
            }
        }
        next += 1;
    }
    if next == 1 {
        return Ok(mask.clone());
    }
    let mut best = 1u32;
    for l in 2..next {
        if sizes[l as usize] > sizes[best as usize] {
            best = l;
        }
    }
    let out = label.iter().map(|&l| if l == best { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&mask.shape().to_vec(), out)
}

/// Flip background components that do not touch the image border to
/// foreground (flood fill from the border).
pub fn fill_holes(mask: &Tensor, connectivity: Connectivity) -> Result<Tensor> {
    ensure_binary("mask", mask)?;
    let (h, w) = mask_dims(mask)?;
    let data = mask.data();
    let mut reachable = vec![false; h * w];
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let idx = y * w + x;
            if border && data[idx] == 0.0 && !reachable[idx] {
                reachable[idx] = true;
                stack.push(idx);
                while let Some(i) = stack.pop() {
                    let (cy, cx) = ((i / w) as i64, (i % w) as i64);
                    for (dy, dx) in connectivity.neighbors() {
                        let (ny, nx) = (cy + dy, cx + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let nidx = ny as usize * w + nx as usize;
                        if data[nidx] == 0.0 && !reachable[nidx] {
                            reachable[nidx] = true;
                            stack.push(nidx);
                        }
                    }
                }
            }
        }
    }
    let out = data
        .iter()
        .zip(&reachable)
        .map(|(&v, &r)| if v != 0.0 || !r { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(&mask.shape().to_vec(), out)
}

/// Apply the configured post-processing steps.
pub fn postprocess(mask: &Tensor, cfg: &EvalConfig) -> Result<Tensor> {
    let mut out = if cfg.largest_component {
        largest_component(mask, Connectivity::Four)?
    } else {
        mask.clone()
    };
    if cfg.fill_holes {
        out = fill_holes(&out, Connectivity::Four)?;
    }
    Ok(out)
}

/// 8-bit RGB raster.
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Grayscale base with TP pixels pure green, FP pure red, FN pure blue and TN
/// untouched.
pub fn overlay(image: &Tensor, pred: &Tensor, gt: &Tensor) -> Result<Rgb> {
    if image.shape() != pred.shape() || image.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            left: image.shape().to_vec(),
            right: pred.shape().to_vec(),
        });
    }
    ensure_binary("pred", pred)?;
    ensure_binary("gt", gt)?;
    let (h, w) = mask_dims(gt)?;
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let p = pred.data()[i] != 0.0;
        let g = gt.data()[i] != 0.0;
        let rgb: [u8; 3] = match (p, g) {
            (true, true) => [0, 255, 0],
            (true, false) => [255, 0, 0],
            (false, true) => [0, 0, 255],
            (false, false) => {
                let v = (image.data()[i] * 255.0).round().clamp(0.0, 255.0) as u8;
                [v, v, v]
            }
        };
        data.extend_from_slice(&rgb);
    }
    Ok(Rgb { width: w, height: h, data })
}

/// Binary PPM (P6), 8-bit.
pub fn save_ppm(path: &Path, rgb: &Rgb) -> Result<()> {
    let mut out = Vec::with_capacity(rgb.data.len() + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", rgb.width, rgb.height).as_bytes());
    out.extend_from_slice(&rgb.data);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Per-sample rows plus the aggregate; aggregation is the unweighted mean of
/// per-sample values.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub rows: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn new(mut rows: Vec<SampleMetrics>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        MetricsReport { rows }
    }

    /// (mean dice, mean precision, mean recall).
    pub fn aggregate(&self) -> (f64, f64, f64) {
        let n = self.rows.len().max(1) as f64;
        let dice = self.rows.iter().map(|r| r.dice).sum::<f64>() / n;
        let precision = self.rows.iter().map(|r| r.precision).sum::<f64>() / n;
        let recall = self.rows.iter().map(|r| r.recall).sum::<f64>() / n;
        (dice, precision, recall)
    }

    /// Aggregate line in the dice,precision,recall column order.
    pub fn summary_line(&self) -> String {
        let (d, p, r) = self.aggregate();
        format!("{d:.4},{p:.4},{r:.4}")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice,precision,recall,tp,fp,fn,tn\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{},{},{},{}\n",
                r.id, r.dice, r.precision, r.recall, r.counts.tp, r.counts.fp, r.counts.fn_, r.counts.tn
            ));
        }
        let (d, p, rc) = self.aggregate();
        let n = self.rows.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> u64| -> f64 {
            self.rows.iter().map(|r| f(r) as f64).sum::<f64>() / n
        };
        out.push_str(&format!(
            "MEAN,{d:.4},{p:.4},{rc:.4},{:.1},{:.1},{:.1},{:.1}\n",
            mean(|r| r.counts.tp),
            mean(|r| r.counts.fp),
            mean(|r| r.counts.fn_),
            mean(|r| r.counts.tn),
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Data("report needs at least one sample".into()));
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
