//! Raster output: loss-curve panels, frame grids and kernel previews.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::data::{write_png, BitDepth};
use crate::error::{DataError, Error, Result};
use crate::generator::{upsample_nn, Frame};
use crate::losses::LossReport;
use crate::phys_operators::KernelBank;

const PANEL_W: u32 = 480;
const PANEL_H: u32 = 120;
const MARGIN: u32 = 8;

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| {
        DataError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
        .into()
    })
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Series of every log field against step, one stacked panel per field, in
/// [`LossReport::FIELDS`] order. Each panel is scaled to its own range.
pub fn render_loss_curves(reports: &[LossReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::invalid("no log records to plot"));
    }
    let fields: Vec<Vec<f64>> = (0..LossReport::FIELDS.len())
        .map(|i| {
            reports
                .iter()
                .map(|r| r.values()[i])
                .collect()
        })
        .collect();
    let n = fields.len() as u32;
    let mut img = RgbImage::from_pixel(PANEL_W, n * PANEL_H, Rgb([255, 255, 255]));
    let steps: Vec<f64> = reports.iter().map(|r| r.step as f64).collect();
    let (s_min, s_max) = (steps[0], *steps.last().expect("non-empty"));
    for (p, series) in fields.iter().enumerate() {
        let top = p as u32 * PANEL_H;
        let (w, h) = ((PANEL_W - 2 * MARGIN) as f64, (PANEL_H - 2 * MARGIN) as f64);
        for x in MARGIN..PANEL_W - MARGIN {
            img.put_pixel(x, top + PANEL_H - MARGIN, Rgb([160, 160, 160]));
        }
        for y in top + MARGIN..top + PANEL_H - MARGIN {
            img.put_pixel(MARGIN, y, Rgb([160, 160, 160]));
        }
        let finite: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let to_px = |s: f64, v: f64| {
            let fx = if s_max > s_min { (s - s_min) / (s_max - s_min) } else { 0.5 };
            let x = MARGIN as f64 + fx * w;
            let y = top as f64 + MARGIN as f64 + (1.0 - (v - lo) / span) * h;
            (x.round() as i64, y.round() as i64)
        };
        let mut last = None;
        for (s, v) in steps.iter().zip(series) {
            if !v.is_finite() {
                last = None;
                continue;
            }
            let pt = to_px(*s, *v);
            if let Some(prev) = last {
                draw_line(&mut img, prev, pt, Rgb([30, 90, 200]));
            } else {
                draw_line(&mut img, pt, pt, Rgb([30, 90, 200]));
            }
            last = Some(pt);
        }
    }
    save_rgb(&img, path)
}

/// Grid of frames in [-1, 1]. Smaller frames are enlarged by pixel replication to the
/// largest frame's size when the sizes divide evenly.
pub fn render_image_grid(rows: &[Vec<Frame>], path: &Path) -> Result<()> {
    let cells: Vec<&Frame> = rows.iter().flatten().collect();
    let Some(size) = cells.iter().map(|f| f.dim()).max() else {
        return Err(Error::invalid("empty image grid"));
    };
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let pad = 2usize;
    let (ch, cw) = size;
    let width = cols * (cw + pad) + pad;
    let height = rows.len() * (ch + pad) + pad;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, frame) in row.iter().enumerate() {
            let (fh, fw) = frame.dim();
            let scaled = if (fh, fw) == size {
                frame.clone()
            } else if ch % fh == 0 && cw % fw == 0 && ch / fh == cw / fw {
                upsample_nn(frame, ch / fh)?
            } else {
                return Err(Error::shape(format!("cannot fit a {fh}x{fw} frame into {ch}x{cw}")));
            };
            let (oy, ox) = (pad + r * (ch + pad), pad + c * (cw + pad));
            for ((y, x), v) in scaled.indexed_iter() {
                let g = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8;
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb([g, g, g]));
            }
        }
    }
    save_rgb(&img, path)
}

/// Moment table for a bank: one row per operator with its targeted order, squared moment
/// error over the constrained entries, and the kernel sum.
pub fn kernel_table(bank: &KernelBank) -> Result<String> {
    let report = bank.report()?;
    let kernels = bank.kernel_arrays()?;
    let mut s = String::new();
    let _ = writeln!(s, "{:<4} {:>3} {:>3} {:>14} {:>14}", "op", "a", "b", "moment_err", "kernel_sum");
    for (i, (((a, b), (_, _, err)), k)) in bank.layout.iter().zip(&report).zip(&kernels).enumerate() {
        let _ = writeln!(s, "{:<4} {:>3} {:>3} {:>14.6e} {:>14.6e}", i, a, b, err, k.sum());
    }
    Ok(s)
}

/// Kernels side by side as a 16-bit grayscale PNG, each scaled by its largest magnitude and
/// enlarged `zoom` times.
pub fn render_kernels(bank: &KernelBank, zoom: usize, path: &Path) -> Result<()> {
    let kernels = bank.kernel_arrays()?;
    let k = bank.kernel_size();
    let pad = 1;
    let cell = k * zoom;
    let width = kernels.len() * (cell + pad) + pad;
    let height = cell + 2 * pad;
    let mut canvas = Array2::<f64>::zeros((height, width));
    for (i, kern) in kernels.iter().enumerate() {
        let peak = kern.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm = if peak > 0.0 { kern.mapv(|v| v / peak) } else { kern.clone() };
        let big = upsample_nn(&norm, zoom)?;
        let ox = pad + i * (cell + pad);
        for ((y, x), v) in big.indexed_iter() {
            canvas[[pad + y, ox + x]] = *v;
        }
    }
    write_png(path, &canvas, BitDepth::Sixteen)
}
