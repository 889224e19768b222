//! Synthetic phantom generation, PGM raster I/O, dataset splits and batching.
//!
//! The phantom stands in for clinical slices: one or two overlapping rotated
//! ellipses on a darker background, box-blurred, with additive Gaussian
//! noise. Masks stay strictly binary through every path.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One paired grayscale image and binary mask, both [1, H, W].
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.image.rank() != 3 || self.mask.rank() != 3 || self.image.shape() != self.mask.shape()
        {
            return Err(Error::Data(format!(
                "sample {}: image {:?} and mask {:?} must both be [1,H,W] and equal",
                self.id,
                self.image.shape(),
                self.mask.shape()
            )));
        }
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Data(format!(
                "sample {}: {h}x{w} not divisible by 4",
                self.id
            )));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("sample {}: mask is not binary", self.id)));
        }
        if self.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data(format!("sample {}: image outside [0,1]", self.id)));
        }
        Ok(())
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    /// Ellipse semi-axes drawn from [size * min_frac, size * max_frac].
    pub semi_axis_min_frac: f64,
    pub semi_axis_max_frac: f64,
    /// Center jitter around the image center, as a fraction of size.
    pub center_jitter_frac: f64,
    pub lobes_min: usize,
    pub lobes_max: usize,
    pub fg_offset_min: f64,
    pub fg_offset_max: f64,
    pub bg_base_min: f64,
    pub bg_base_max: f64,
    pub noise_sigma: f64,
    /// Box-blur kernel width (odd; 1 disables smoothing).
    pub blur_width: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 64,
            semi_axis_min_frac: 1.0 / 8.0,
            semi_axis_max_frac: 1.0 / 3.0,
            center_jitter_frac: 1.0 / 8.0,
            lobes_min: 1,
            lobes_max: 2,
            fg_offset_min: 0.25,
            fg_offset_max: 0.45,
            bg_base_min: 0.2,
            bg_base_max: 0.4,
            noise_sigma: 0.05,
            blur_width: 3,
        }
    }
}

/// Foreground-fraction bounds enforced by rejection sampling.
pub const FG_FRACTION_MIN: f64 = 0.02;
pub const FG_FRACTION_MAX: f64 = 0.6;
const MAX_REJECTIONS: usize = 20;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 8
            && self.size % 4 == 0
            && self.semi_axis_min_frac > 0.0
            && self.semi_axis_min_frac <= self.semi_axis_max_frac
            && self.semi_axis_max_frac < 0.5
            && self.center_jitter_frac >= 0.0
            && (1..=2).contains(&self.lobes_min)
            && self.lobes_min <= self.lobes_max
            && self.lobes_max <= 2
            && self.fg_offset_min > 0.0
            && self.fg_offset_min <= self.fg_offset_max
            && self.bg_base_min >= 0.0
            && self.bg_base_min <= self.bg_base_max
            && self.bg_base_max + self.fg_offset_max <= 1.0 + 1e-12
            && self.noise_sigma >= 0.0
            && self.blur_width >= 1
            && self.blur_width % 2 == 1;
        if !ok {
            return Err(Error::Config(format!("invalid phantom config: {self:?}")));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Generate one phantom sample. Deterministic under the rng state; rejects
/// and redraws masks whose foreground fraction leaves
/// [`FG_FRACTION_MIN`, `FG_FRACTION_MAX`], failing after 20 attempts.
pub fn generate_phantom(rng: &mut Rng, cfg: &PhantomConfig) -> Result<Sample> {
    cfg.validate()?;
    let s = cfg.size;
    let sf = s as f64;
    let mut mask = vec![0.0f64; s * s];

    let mut accepted = false;
    for _ in 0..MAX_REJECTIONS {
        mask.fill(0.0);
        let lobes = cfg.lobes_min + rng.uniform_int(cfg.lobes_max - cfg.lobes_min + 1);
        let jitter = cfg.center_jitter_frac * sf;
        let first = Ellipse {
            cx: sf / 2.0 + rng.range(-jitter, jitter),
            cy: sf / 2.0 + rng.range(-jitter, jitter),
            a: rng.range(cfg.semi_axis_min_frac * sf, cfg.semi_axis_max_frac * sf),
            b: rng.range(cfg.semi_axis_min_frac * sf, cfg.semi_axis_max_frac * sf),
            theta: rng.range(0.0, std::f64::consts::PI),
        };
        let mut ellipses = vec![first];
        for _ in 1..lobes {
            // second lobe centered inside the first so the union stays connected
            let base = &ellipses[0];
            let radius = 0.8 * base.a.min(base.b) * rng.uniform();
            let angle = rng.range(0.0, std::f64::consts::TAU);
            ellipses.push(Ellipse {
                cx: base.cx + radius * angle.cos(),
                cy: base.cy + radius * angle.sin(),
                a: rng.range(cfg.semi_axis_min_frac * sf, cfg.semi_axis_max_frac * sf),
                b: rng.range(cfg.semi_axis_min_frac * sf, cfg.semi_axis_max_frac * sf),
                theta: rng.range(0.0, std::f64::consts::PI),
            });
        }
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if ellipses.iter().any(|e| e.contains(px, py)) {
                    mask[y * s + x] = 1.0;
                }
            }
        }
        let frac = mask.iter().sum::<f64>() / (s * s) as f64;
        if (FG_FRACTION_MIN..=FG_FRACTION_MAX).contains(&frac) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::Data(format!(
            "phantom degenerate after {MAX_REJECTIONS} attempts (foreground fraction out of bounds)"
        )));
    }

    let base = rng.range(cfg.bg_base_min, cfg.bg_base_max);
    let offset = rng.range(cfg.fg_offset_min, cfg.fg_offset_max);
    let mut image: Vec<f64> = mask.iter().map(|&m| base + offset * m).collect();
    if cfg.blur_width > 1 {
        image = box_blur(&image, s, s, cfg.blur_width);
    }
    if cfg.noise_sigma > 0.0 {
        for v in &mut image {
            *v += cfg.noise_sigma * rng.normal();
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }

    let sample = Sample {
        id: String::new(),
        image: Tensor::from_vec(&[1, s, s], image)?,
        mask: Tensor::from_vec(&[1, s, s], mask)?,
    };
    Ok(sample)
}

/// Separable box blur; windows are clipped at the borders and normalized by
/// the surviving valid width.
fn box_blur(data: &[f64], h: usize, w: usize, width: usize) -> Vec<f64> {
    let r = width / 2;
    let mut horiz = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let sum: f64 = data[y * w + lo..=y * w + hi].iter().sum();
            horiz[y * w + x] = sum / (hi - lo + 1) as f64;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut sum = 0.0;
            for yy in lo..=hi {
                sum += horiz[yy * w + x];
            }
            out[y * w + x] = sum / (hi - lo + 1) as f64;
        }
    }
    out
}

// ---- PGM I/O ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

impl PgmDepth {
    fn maxval(&self) -> u32 {
        match self {
            PgmDepth::Eight => 255,
            PgmDepth::Sixteen => 65535,
        }
    }
}

/// Write a [1,H,W] (or [H,W]) tensor of values in [0,1] as binary PGM (P5).
/// 16-bit samples are big-endian per the format. No comments are written.
pub fn save_pgm(path: &Path, image: &Tensor, depth: PgmDepth) -> Result<()> {
    let (h, w) = image_dims(image)?;
    let maxval = depth.maxval();
    let mut out = Vec::with_capacity(h * w * 2 + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n{maxval}\n").as_bytes());
    for &v in image.data() {
        let q = (v * maxval as f64).round().clamp(0.0, maxval as f64) as u32;
        match depth {
            PgmDepth::Eight => out.push(q as u8),
            PgmDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w)),
        [h, w] => Ok((*h, *w)),
        other => Err(Error::Data(format!("expected [1,H,W] or [H,W], got {other:?}"))),
    }
}

/// Read a binary PGM (P5) with maxval 255 or 65535; pixel p maps to
/// p / maxval. Comments after the magic token are tolerated.
pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// [`load_pgm`] for mask files: every pixel must be 0 or maxval.
pub fn load_pgm_mask(path: &Path) -> Result<Tensor> {
    let t = load_pgm(path)?;
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!(
            "{}: mask contains values other than 0 and maxval",
            path.display()
        )));
    }
    Ok(t)
}

fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::Data("empty file".into()))?;
    if magic != b"P5" {
        return Err(Error::Data(format!(
            "bad magic {:?} (only binary P5 supported)",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let tok = next_token(bytes, &mut pos)
            .ok_or_else(|| Error::Data("truncated header".into()))?;
        *d = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad header token {:?}", String::from_utf8_lossy(tok))))?;
    }
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if w == 0 || h == 0 {
        return Err(Error::Data("zero image dimension".into()));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Data(format!("maxval {maxval} not in {{255, 65535}}")));
    }
    // single whitespace byte separates header and payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Data("missing header/payload separator".into()));
    }
    pos += 1;
    let bpp = if maxval == 255 { 1 } else { 2 };
    let expected = w * h * bpp;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Data(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Data(format!(
            "trailing data: expected {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let maxval_f = maxval as f64;
    let data: Vec<f64> = if bpp == 1 {
        payload.iter().map(|&b| b as f64 / maxval_f).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval_f)
            .collect()
    };
    Tensor::from_vec(&[1, h, w], data)
}

/// Next whitespace-delimited token, skipping '#' comment lines.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

// ---- splits -----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Deterministic shuffled split: the first ceil(fraction * n) shuffled ids
/// (clamped so both parts stay non-empty) go to train.
pub fn split_dataset(ids: &[String], train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0,1)")));
    }
    if ids.len() < 2 {
        return Err(Error::Data(format!("need at least 2 ids to split, got {}", ids.len())));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Data("duplicate ids in dataset".into()));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut shuffled);
    let n_train = ((train_fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len() - 1);
    let test = shuffled.split_off(n_train);
    Ok(DatasetSplit { train: shuffled, test })
}

/// Two-section plain-text manifest: a `[train]` header, one id per line, then
/// `[test]` and its ids.
pub fn save_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut out = String::from("[train]\n");
    for id in &split.train {
        out.push_str(id);
        out.push('\n');
    }
    out.push_str("[test]\n");
    for id in &split.test {
        out.push_str(id);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut split = DatasetSplit { train: Vec::new(), test: Vec::new() };
    let mut section: Option<bool> = None; // true = train
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[train]" => section = Some(true),
            "[test]" => section = Some(false),
            id => match section {
                Some(true) => split.train.push(id.to_string()),
                Some(false) => split.test.push(id.to_string()),
                None => {
                    return Err(Error::Data(format!(
                        "{}: id '{id}' before any section header",
                        path.display()
                    )))
                }
            },
        }
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Data(format!("{}: empty split section", path.display())));
    }
    Ok(split)
}

// ---- dataset directory layout ----------------------------------------------------

/// Write samples under `<root>/images/<id>.pgm` and `<root>/masks/<id>.pgm`.
pub fn save_dataset(root: &Path, samples: &[Sample], depth: PgmDepth) -> Result<()> {
    for sample in samples {
        sample.validate()?;
        save_pgm(&root.join("images").join(format!("{}.pgm", sample.id)), &sample.image, depth)?;
        save_pgm(&root.join("masks").join(format!("{}.pgm", sample.id)), &sample.mask, PgmDepth::Eight)?;
    }
    Ok(())
}

pub fn load_samples(root: &Path, ids: &[String]) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_pgm(&root.join("images").join(format!("{id}.pgm")))?;
        let mask = load_pgm_mask(&root.join("masks").join(format!("{id}.pgm")))?;
        let sample = Sample { id: id.clone(), image, mask };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

// ---- batching ----------------------------------------------------------------------

/// Seeded permutation of 0..n chopped into batches; the final partial batch
/// is kept.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Stack the selected samples into ([B,1,H,W], [B,1,H,W]) image/mask tensors.
/// Heterogeneous sample sizes are an error; nothing is resized implicitly.
pub fn stack_batch(samples: &[Sample], indices: &[usize]) -> Result<(Tensor, Tensor)> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let (h, w) = samples[indices[0]].spatial();
    let mut images = Vec::with_capacity(indices.len() * h * w);
    let mut masks = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        let s = &samples[i];
        if s.spatial() != (h, w) {
            return Err(Error::Data(format!(
                "heterogeneous sample sizes: {} is {:?}, expected {h}x{w}",
                s.id,
                s.spatial()
            )));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    Ok((
        Tensor::from_vec(&[indices.len(), 1, h, w], images)?,
        Tensor::from_vec(&[indices.len(), 1, h, w], masks)?,
    ))
}
