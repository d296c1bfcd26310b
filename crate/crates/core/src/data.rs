//! Frame sequences: synthetic vortex generation, HR to LR degradation, triplet windowing and
//! the on-disk manifest + PNG format.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};
use image::{ImageBuffer, Luma};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::generator::{Frame, FrameTriplet, SCALE};

pub const MANIFEST_HEADER: &str = "# pestgan-manifest v1";

/// Non-overlapping `factor x factor` block average.
pub fn degrade(hr: &Frame, factor: usize) -> Result<Frame> {
    let (h, w) = hr.dim();
    if factor == 0 || h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} frame is not divisible into {factor}x{factor} blocks"
        )));
    }
    let area = (factor * factor) as f64;
    let mut block = Vec::with_capacity(factor * factor);
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
        block.clear();
        for dy in 0..factor {
            for dx in 0..factor {
                block.push(hr[[y * factor + dy, x * factor + dx]]);
            }
        }
        pairwise_sum(&block) / area
    }))
}

/// Tree summation; exact for constant power-of-two-length inputs.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub timestamps: Vec<DateTime<Utc>>,
}

/// Synthetic sequences are stamped hourly from this instant.
pub fn synthetic_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).single().expect("valid epoch")
}

impl ImageSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>, timestamps: Vec<DateTime<Utc>>) -> Result<Self> {
        let id = id.into();
        if frames.len() != timestamps.len() {
            return Err(Error::invalid(format!(
                "sequence `{id}`: {} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        if let Some(first) = frames.first() {
            if let Some(bad) = frames.iter().find(|f| f.dim() != first.dim()) {
                return Err(Error::shape(format!(
                    "sequence `{id}`: frame {:?} differs from {:?}",
                    bad.dim(),
                    first.dim()
                )));
            }
        }
        for i in 1..timestamps.len() {
            if timestamps[i] <= timestamps[i - 1] {
                return Err(DataError::NonMonotoneTimestamps { sequence: id, line: i + 1 }.into());
            }
        }
        Ok(Self { id, frames, timestamps })
    }

    /// Frames stamped hourly from [`synthetic_epoch`].
    pub fn hourly(id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let t0 = synthetic_epoch();
        let ts = (0..frames.len()).map(|i| t0 + Duration::hours(i as i64)).collect();
        Self::new(id, frames, ts)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Smallest interval between consecutive frames.
    pub fn cadence(&self) -> Option<Duration> {
        self.timestamps.windows(2).map(|w| w[1] - w[0]).min()
    }

    /// Maximal index ranges with no interval longer than the cadence.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.len();
        if n == 0 {
            return Vec::new();
        }
        let cadence = match self.cadence() {
            Some(c) => c,
            None => return vec![0..n],
        };
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..n {
            if self.timestamps[i] - self.timestamps[i - 1] > cadence {
                out.push(start..i);
                start = i;
            }
        }
        out.push(start..n);
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub sequence_id: String,
    /// Index of the center frame within its sequence.
    pub center: usize,
    pub lr: FrameTriplet,
    /// HR frames `t-1, t, t+1`.
    pub hr: [Frame; 3],
    /// LR triplet centered at `t-1`, present when that window lies in the same gap-free span.
    pub prev_lr: Option<FrameTriplet>,
}

impl TrainingSample {
    pub fn hr_center(&self) -> &Frame {
        &self.hr[1]
    }
}

/// Stride-1 windows of three consecutive frames that never cross a timestamp gap.
pub fn window_triplets(seq: &ImageSequence) -> Result<Vec<TrainingSample>> {
    let lr: Vec<Frame> = seq.frames.iter().map(|f| degrade(f, SCALE)).collect::<Result<_>>()?;
    let triplet = |c: usize| FrameTriplet::new(lr[c - 1].clone(), lr[c].clone(), lr[c + 1].clone());
    let mut out = Vec::new();
    for span in seq.segments() {
        if span.len() < 3 {
            continue;
        }
        for c in span.start + 1..span.end - 1 {
            let prev_lr = if c >= span.start + 2 { Some(triplet(c - 1)?) } else { None };
            out.push(TrainingSample {
                sequence_id: seq.id.clone(),
                center: c,
                lr: triplet(c)?,
                hr: [
                    seq.frames[c - 1].clone(),
                    seq.frames[c].clone(),
                    seq.frames[c + 1].clone(),
                ],
                prev_lr,
            });
        }
    }
    Ok(out)
}

pub fn window_all(seqs: &[ImageSequence]) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for s in seqs {
        out.extend(window_triplets(s)?);
    }
    Ok(out)
}

/// Partition by sequence id, preserving order.
pub fn split_by_ids(seqs: Vec<ImageSequence>, test_ids: &[String]) -> (Vec<ImageSequence>, Vec<ImageSequence>) {
    seqs.into_iter().partition(|s| !test_ids.contains(&s.id))
}

/// Hold out the last `n_test` sequences.
pub fn split_tail(mut seqs: Vec<ImageSequence>, n_test: usize) -> (Vec<ImageSequence>, Vec<ImageSequence>) {
    let cut = seqs.len().saturating_sub(n_test);
    let test = seqs.split_off(cut);
    (seqs, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    /// Rotation rate about the grid center, radians per integration step.
    pub omega: f64,
    /// Diffusion coefficient in grid cells squared per step.
    pub nu: f64,
    pub blobs: usize,
    /// Range of blob standard deviations in cells.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Blob centers lie within this fraction of the half-size from the grid center.
    pub placement_radius: f64,
    pub steps_per_frame: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            omega: 0.02,
            nu: 0.05,
            blobs: 4,
            sigma_min: 1.5,
            sigma_max: 5.0,
            placement_radius: 0.6,
            steps_per_frame: 4,
            frames: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Largest distance from the rotation center to any cell.
    pub fn max_radius(&self) -> f64 {
        (self.size.saturating_sub(1)) as f64 / 2.0 * 2f64.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::invalid(format!("grid size {} too small", self.size)));
        }
        if !(self.nu >= 0.0 && self.nu <= 0.25) {
            return Err(Error::invalid(format!("diffusion {} outside [0, 0.25]", self.nu)));
        }
        if !self.omega.is_finite() || self.omega.abs() * self.max_radius() > 1.0 {
            return Err(Error::invalid(format!(
                "rotation {} moves the grid corner more than one cell per step",
                self.omega
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::invalid("blob sigma range must satisfy 0 < min <= max"));
        }
        if !(0.0..=1.0).contains(&self.placement_radius) {
            return Err(Error::invalid("placement radius must lie in [0, 1]"));
        }
        if self.steps_per_frame == 0 {
            return Err(Error::invalid("steps_per_frame must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub sigma_major: f64,
    pub sigma_minor: f64,
    pub angle: f64,
    pub amplitude: f64,
}

impl Blob {
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.x;
        let dy = y - self.y;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        self.amplitude
            * (-0.5 * (u * u / (self.sigma_major * self.sigma_major) + v * v / (self.sigma_minor * self.sigma_minor)))
                .exp()
    }
}

pub fn random_blobs(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Blob> {
    let half = (cfg.size as f64 - 1.0) / 2.0;
    (0..cfg.blobs)
        .map(|_| {
            let r = cfg.placement_radius * half * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let a = rng.random_range(cfg.sigma_min..=cfg.sigma_max);
            let b = rng.random_range(cfg.sigma_min..=cfg.sigma_max);
            Blob {
                x: half + r * theta.cos(),
                y: half + r * theta.sin(),
                sigma_major: a.max(b),
                sigma_minor: a.min(b),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                amplitude: rng.random_range(0.5..1.0),
            }
        })
        .collect()
}

pub fn render_blobs(blobs: &[Blob], size: usize) -> Frame {
    Array2::from_shape_fn((size, size), |(y, x)| {
        blobs.iter().map(|b| b.value(x as f64, y as f64)).sum()
    })
}

/// Bilinear sample with coordinates clamped to the grid.
fn bilinear(f: &Frame, x: f64, y: f64) -> f64 {
    let (h, w) = f.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    (1.0 - fy) * ((1.0 - fx) * f[[y0, x0]] + fx * f[[y0, x1]]) + fy * ((1.0 - fx) * f[[y1, x0]] + fx * f[[y1, x1]])
}

/// Semi-Lagrangian solid-body rotation by `omega` about the grid center. Positive `omega`
/// increases `atan2(y - c, x - c)` in image coordinates.
pub fn advect_rotation(f: &Frame, omega: f64) -> Frame {
    let (h, w) = f.dim();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (s, c) = omega.sin_cos();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // departure point: rotate back by omega
        bilinear(f, cx + c * dx + s * dy, cy - s * dx + c * dy)
    })
}

/// One explicit step of `f += nu * lap(f)` with zero-flux (mirrored ghost) boundaries.
pub fn diffuse(f: &Frame, nu: f64) -> Frame {
    let (h, w) = f.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let c = f[[y, x]];
        let up = if y > 0 { f[[y - 1, x]] } else { c };
        let down = if y + 1 < h { f[[y + 1, x]] } else { c };
        let left = if x > 0 { f[[y, x - 1]] } else { c };
        let right = if x + 1 < w { f[[y, x + 1]] } else { c };
        c + nu * (up + down + left + right - 4.0 * c)
    })
}

/// Unnormalized field at every output frame, starting from the seeded blob field.
pub fn synth_vortex_fields(cfg: &SynthConfig) -> Result<Vec<Frame>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blobs = random_blobs(cfg, &mut rng);
    let mut field = render_blobs(&blobs, cfg.size);
    let mut out = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        if i > 0 {
            for _ in 0..cfg.steps_per_frame {
                if cfg.omega != 0.0 {
                    field = advect_rotation(&field, cfg.omega);
                }
                if cfg.nu != 0.0 {
                    field = diffuse(&field, cfg.nu);
                }
            }
        }
        out.push(field.clone());
    }
    Ok(out)
}

/// Synthetic sequence scaled so the sequence peak maps to +1 and zero to -1.
pub fn synth_vortex_sequence(cfg: &SynthConfig) -> Result<ImageSequence> {
    let fields = synth_vortex_fields(cfg)?;
    let peak = fields
        .iter()
        .flat_map(|f| f.iter().copied())
        .fold(0.0f64, f64::max);
    let frames = fields
        .into_iter()
        .map(|f| {
            if peak > 0.0 {
                f.mapv(|v| (2.0 * v / peak - 1.0).clamp(-1.0, 1.0))
            } else {
                f.mapv(|_| -1.0)
            }
        })
        .collect();
    ImageSequence::hourly(format!("synth-{:05}", cfg.seed), frames)
}

/// `count` sequences with seeds `base.seed, base.seed + 1, ...`.
pub fn synth_dataset(base: &SynthConfig, count: usize) -> Result<Vec<ImageSequence>> {
    (0..count)
        .map(|i| {
            synth_vortex_sequence(&SynthConfig {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

pub fn from_stored(v: u16, depth: BitDepth) -> f64 {
    v as f64 * 2.0 / depth.max_value() - 1.0
}

pub fn to_stored(v: f64, depth: BitDepth) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * depth.max_value()).round() as u16
}

/// Round a frame to the nearest representable stored value.
pub fn quantize(frame: &Frame, depth: BitDepth) -> Frame {
    frame.mapv(|v| from_stored(to_stored(v, depth), depth))
}

pub fn write_png(path: &Path, frame: &Frame, depth: BitDepth) -> Result<()> {
    let (h, w) = frame.dim();
    let img_err = |e: image::ImageError| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    match depth {
        BitDepth::Eight => {
            let buf: Vec<u8> = frame.iter().map(|&v| to_stored(v, depth) as u8).collect();
            ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized to frame")
                .save(path)
                .map_err(img_err)?;
        }
        BitDepth::Sixteen => {
            let buf: Vec<u16> = frame.iter().map(|&v| to_stored(v, depth)).collect();
            ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized to frame")
                .save(path)
                .map_err(img_err)?;
        }
    }
    Ok(())
}

/// Read a grayscale PNG and map its integer range to [-1, 1].
pub fn read_png(path: &Path) -> Result<Frame> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()).into());
    }
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let frame = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            Array2::from_shape_vec((h, w), buf.into_raw().into_iter().map(|v| from_stored(v as u16, BitDepth::Eight)).collect())
        }
        image::DynamicImage::ImageLuma16(buf) => {
            Array2::from_shape_vec((h, w), buf.into_raw().into_iter().map(|v| from_stored(v, BitDepth::Sixteen)).collect())
        }
        other => {
            return Err(DataError::Image {
                path: path.to_path_buf(),
                reason: format!("expected single-channel grayscale, found {:?}", other.color()),
            }
            .into())
        }
    };
    Ok(frame.expect("decoded buffer matches its dimensions"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub path: PathBuf,
    pub timestamp: DateTime<Utc>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub sequence_id: String,
    pub records: Vec<FrameRecord>,
}

impl SequenceManifest {
    pub fn cadence(&self) -> Option<Duration> {
        self.records.windows(2).map(|w| w[1].timestamp - w[0].timestamp).min()
    }
}

/// Parse manifest text. Sequences keep the order of their first record.
pub fn parse_manifest(text: &str) -> Result<Vec<SequenceManifest>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, first)) if first.trim_end() == MANIFEST_HEADER => {}
        Some((_, first)) => {
            return Err(DataError::Manifest {
                line: 1,
                reason: format!("expected header `{MANIFEST_HEADER}`, found `{first}`"),
            }
            .into())
        }
    }
    let mut out: Vec<SequenceManifest> = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let bad = |reason: String| Error::from(DataError::Manifest { line, reason });
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let timestamp = DateTime::parse_from_rfc3339(fields[1])
            .map_err(|e| bad(format!("timestamp `{}`: {e}", fields[1])))?
            .with_timezone(&Utc);
        let height: usize = fields[3].parse().map_err(|_| bad(format!("height `{}`", fields[3])))?;
        let width: usize = fields[4].parse().map_err(|_| bad(format!("width `{}`", fields[4])))?;
        if fields[0].is_empty() || fields[2].is_empty() {
            return Err(bad("empty sequence id or path".into()));
        }
        let record = FrameRecord {
            path: PathBuf::from(fields[2]),
            timestamp,
            height,
            width,
        };
        match out.iter_mut().find(|m| m.sequence_id == fields[0]) {
            Some(m) => {
                if m.records.last().is_some_and(|r| r.timestamp >= timestamp) {
                    return Err(DataError::NonMonotoneTimestamps {
                        sequence: fields[0].to_string(),
                        line,
                    }
                    .into());
                }
                m.records.push(record);
            }
            None => out.push(SequenceManifest {
                sequence_id: fields[0].to_string(),
                records: vec![record],
            }),
        }
    }
    Ok(out)
}

pub fn format_manifest(manifests: &[SequenceManifest]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for m in manifests {
        for r in &m.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                m.sequence_id,
                r.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
                r.path.display(),
                r.height,
                r.width
            ));
        }
    }
    s
}

/// Load every sequence listed in a manifest; frame paths are relative to the manifest.
pub fn load_sequences(manifest_path: &Path) -> Result<Vec<ImageSequence>> {
    if !manifest_path.is_file() {
        return Err(DataError::MissingFile(manifest_path.to_path_buf()).into());
    }
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for m in parse_manifest(&text)? {
        let mut frames = Vec::with_capacity(m.records.len());
        for r in &m.records {
            let path = root.join(&r.path);
            let frame = read_png(&path)?;
            let (h, w) = frame.dim();
            if (h, w) != (r.height, r.width) {
                return Err(DataError::FrameShape {
                    path,
                    expected_h: r.height,
                    expected_w: r.width,
                    found_h: h,
                    found_w: w,
                }
                .into());
            }
            frames.push(frame);
        }
        let ts = m.records.iter().map(|r| r.timestamp).collect();
        out.push(ImageSequence::new(m.sequence_id, frames, ts)?);
    }
    Ok(out)
}

/// Write `frames/<id>/<index>.png` plus `manifest.tsv` under `dir`; returns the manifest path.
pub fn save_sequences(dir: &Path, seqs: &[ImageSequence], depth: BitDepth) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifests = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut records = Vec::with_capacity(s.len());
        for (i, (f, t)) in s.frames.iter().zip(&s.timestamps).enumerate() {
            let rel = PathBuf::from("frames").join(&s.id).join(format!("{i:05}.png"));
            write_png(&dir.join(&rel), f, depth)?;
            records.push(FrameRecord {
                path: rel,
                timestamp: *t,
                height: f.nrows(),
                width: f.ncols(),
            });
        }
        manifests.push(SequenceManifest {
            sequence_id: s.id.clone(),
            records,
        });
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, format_manifest(&manifests)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
