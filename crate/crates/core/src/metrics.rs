//! Image-quality metrics. Callers map model-domain frames in [-1, 1] to [0, 1] with
//! [`to_unit_range`] first; peak and dynamic range are then 1.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Frame;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn to_unit_range(frame: &Frame) -> Frame {
    frame.mapv(|v| (v + 1.0) / 2.0)
}

fn check_pair(a: &Frame, b: &Frame) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty frame"));
    }
    Ok(())
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; identical frames give `f64::INFINITY`.
pub fn psnr(reference: &Frame, test: &Frame, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter_valid(f: &Frame, g: &[f64]) -> Frame {
    let k = g.len();
    let (h, w) = f.dim();
    let rows = Array2::from_shape_fn((h, w + 1 - k), |(y, x)| (0..k).map(|i| g[i] * f[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - k, w + 1 - k), |(y, x)| (0..k).map(|i| g[i] * rows[[y + i, x]]).sum::<f64>())
}

/// Single-scale SSIM, Gaussian 11x11 window with sigma 1.5, dynamic range 1, averaged over
/// valid window positions.
pub fn ssim(reference: &Frame, test: &Frame) -> Result<f64> {
    check_pair(reference, test)?;
    let (h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let g = gaussian_window();
    let mu_x = filter_valid(reference, &g);
    let mu_y = filter_valid(test, &g);
    let xx = filter_valid(&(reference * reference), &g);
    let yy = filter_valid(&(test * test), &g);
    let xy = filter_valid(&(reference * test), &g);
    let mut total = 0.0;
    for ((((mx, my), sxx), syy), sxy) in mu_x.iter().zip(&mu_y).zip(&xx).zip(&yy).zip(&xy) {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Single-band RASE: `100 / mean(reference) * RMSE`.
pub fn rase(reference: &Frame, test: &Frame) -> Result<f64> {
    let m = mse(reference, test)?;
    let mean = reference.mean().expect("non-empty");
    if mean == 0.0 {
        return Err(Error::UndefinedMetric("RASE with zero reference mean".into()));
    }
    Ok(100.0 / mean * m.sqrt())
}

/// Mean over consecutive pairs of the pixel variance of the frame difference.
pub fn flicker(seq: &[Frame]) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::invalid(format!("flicker needs at least 2 frames, got {}", seq.len())));
    }
    let mut total = 0.0;
    for pair in seq.windows(2) {
        check_pair(&pair[0], &pair[1])?;
        let d = &pair[1] - &pair[0];
        let mean = d.mean().expect("non-empty");
        total += d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
    }
    Ok(total / (seq.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rase_percent: f64,
}

impl FrameMetrics {
    /// Metrics of `test` against `reference`, both in [0, 1].
    pub fn compute(reference: &Frame, test: &Frame) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(reference, test, 1.0)?,
            ssim: ssim(reference, test)?,
            rase_percent: rase(reference, test)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    /// Mean PSNR over frames with finite PSNR; `None` if every frame was exact.
    pub psnr_db: Option<f64>,
    pub infinite_psnr_frames: usize,
    pub ssim: f64,
    pub rase_percent: f64,
    /// Mean flicker over the evaluated sequences, when any had at least two frames.
    pub flicker: Option<f64>,
}

impl MetricReport {
    pub fn from_frames(per_frame: Vec<FrameMetrics>, flicker: Option<f64>) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::invalid("metric report over zero frames"));
        }
        let n = per_frame.len() as f64;
        let finite: Vec<f64> = per_frame.iter().map(|m| m.psnr_db).filter(|p| p.is_finite()).collect();
        let psnr_db = if finite.is_empty() {
            None
        } else {
            Some(finite.iter().sum::<f64>() / finite.len() as f64)
        };
        Ok(Self {
            infinite_psnr_frames: per_frame.len() - finite.len(),
            psnr_db,
            ssim: per_frame.iter().map(|m| m.ssim).sum::<f64>() / n,
            rase_percent: per_frame.iter().map(|m| m.rase_percent).sum::<f64>() / n,
            flicker,
            per_frame,
        })
    }

    /// Compare paired frames in [0, 1]; `sequences` groups the test frames for flicker.
    pub fn compare(references: &[Frame], tests: &[Frame], sequences: &[Vec<Frame>]) -> Result<Self> {
        if references.len() != tests.len() {
            return Err(Error::shape(format!(
                "{} reference frames vs {} test frames",
                references.len(),
                tests.len()
            )));
        }
        let per_frame = references
            .iter()
            .zip(tests)
            .map(|(r, t)| FrameMetrics::compute(r, t))
            .collect::<Result<Vec<_>>>()?;
        let flickers = sequences
            .iter()
            .filter(|s| s.len() >= 2)
            .map(|s| flicker(s))
            .collect::<Result<Vec<_>>>()?;
        let fl = if flickers.is_empty() {
            None
        } else {
            Some(flickers.iter().sum::<f64>() / flickers.len() as f64)
        };
        Self::from_frames(per_frame, fl)
    }

    pub fn psnr_cell(&self) -> String {
        match self.psnr_db {
            Some(p) => format!("{p:.4}"),
            None => "inf".to_string(),
        }
    }
}
