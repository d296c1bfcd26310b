use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use crate::data::{save_sequences, window_triplets, BitDepth, ImageSequence, TrainingSample};
use crate::error::{DataError, Error, Result};
use crate::generator::{upsample_nn, Frame, Generator, SCALE};
use crate::metrics::{flicker, to_unit_range, MetricReport};
use crate::nn::tensor_to_frames;

const INFER_BATCH: usize = 16;

/// SR center frames for a list of samples, batched.
pub fn super_resolve(generator: &Generator, samples: &[TrainingSample], dtype: DType) -> Result<Vec<Frame>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFER_BATCH) {
        let lr = Tensor::cat(
            &chunk.iter().map(|s| s.lr.to_tensor(dtype)).collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let sr = generator.forward(&lr)?.sr.detach();
        out.extend(tensor_to_frames(&sr)?);
    }
    Ok(out)
}

/// Runs of samples with consecutive centers in the same sequence.
fn runs(samples: &[TrainingSample]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        let split = i == samples.len()
            || samples[i].sequence_id != samples[i - 1].sequence_id
            || samples[i].center != samples[i - 1].center + 1;
        if split {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub model: MetricReport,
    /// Nearest-neighbor upsampling of the LR center.
    pub baseline: MetricReport,
    /// Flicker of the HR frames over the same runs of centers.
    pub hr_flicker: Option<f64>,
}

fn grouped(frames: &[Frame], runs: &[std::ops::Range<usize>]) -> Vec<Vec<Frame>> {
    runs.iter().map(|r| frames[r.clone()].to_vec()).collect()
}

fn mean_flicker(groups: &[Vec<Frame>]) -> Result<Option<f64>> {
    let values = groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| flicker(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    })
}

/// Metrics of arbitrary SR frames against the samples' HR centers.
pub fn score_frames(samples: &[TrainingSample], sr: &[Frame]) -> Result<(MetricReport, MetricReport, Option<f64>)> {
    if samples.is_empty() {
        return Err(DataError::Empty.into());
    }
    if samples.len() != sr.len() {
        return Err(Error::shape(format!("{} samples but {} SR frames", samples.len(), sr.len())));
    }
    let runs = runs(samples);
    let hr: Vec<Frame> = samples.iter().map(|s| to_unit_range(s.hr_center())).collect();
    let sr: Vec<Frame> = sr.iter().map(to_unit_range).collect();
    let nn: Vec<Frame> = samples
        .iter()
        .map(|s| Ok(to_unit_range(&upsample_nn(s.lr.center(), SCALE)?)))
        .collect::<Result<_>>()?;
    let model = MetricReport::compare(&hr, &sr, &grouped(&sr, &runs))?;
    let baseline = MetricReport::compare(&hr, &nn, &grouped(&nn, &runs))?;
    Ok((model, baseline, mean_flicker(&grouped(&hr, &runs))?))
}

/// Super-resolve every eligible center frame and score it.
pub fn evaluate(generator: &Generator, seqs: &[ImageSequence], dtype: DType) -> Result<EvalResult> {
    let mut samples = Vec::new();
    for s in seqs {
        samples.extend(window_triplets(s)?);
    }
    if samples.is_empty() {
        return Err(DataError::Empty.into());
    }
    let sr = super_resolve(generator, &samples, dtype)?;
    let (model, baseline, hr_flicker) = score_frames(&samples, &sr)?;
    Ok(EvalResult {
        model,
        baseline,
        hr_flicker,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl EvalResult {
    /// Aligned text table followed by one machine-readable line per row.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10} {:>8} {:>10} {:>10} {:>7}", "method", "PSNR (dB)", "SSIM", "RASE (%)", "flicker", "frames");
        for (name, r) in [("pestgan", &self.model), ("nearest", &self.baseline)] {
            let _ = writeln!(
                s,
                "{:<10} {:>10} {:>8.4} {:>10.4} {:>10} {:>7}",
                name,
                r.psnr_cell(),
                r.ssim,
                r.rase_percent,
                opt(r.flicker),
                r.per_frame.len()
            );
        }
        let _ = writeln!(s, "{:<10} {:>10} {:>8} {:>10} {:>10}", "hr", "-", "-", "-", opt(self.hr_flicker));
        for (name, r) in [("pestgan", &self.model), ("nearest", &self.baseline)] {
            let _ = writeln!(
                s,
                "metrics\tmethod={name}\tpsnr_db={}\tssim={}\trase_percent={}\tflicker={}\tframes={}\tinfinite_psnr={}",
                r.psnr_db.map_or("inf".to_string(), |p| p.to_string()),
                r.ssim,
                r.rase_percent,
                r.flicker.map_or("-".to_string(), |f| f.to_string()),
                r.per_frame.len(),
                r.infinite_psnr_frames
            );
        }
        let _ = writeln!(s, "metrics\tmethod=hr\tflicker={}", self.hr_flicker.map_or("-".to_string(), |f| f.to_string()));
        s
    }
}

/// Write SR frames for every eligible center as a 16-bit dataset; returns the manifest path.
pub fn infer(generator: &Generator, seqs: &[ImageSequence], dtype: DType, out_dir: &Path) -> Result<PathBuf> {
    let mut out = Vec::new();
    for s in seqs {
        let samples = window_triplets(s)?;
        if samples.is_empty() {
            continue;
        }
        let sr = super_resolve(generator, &samples, dtype)?;
        let ts = samples.iter().map(|x| s.timestamps[x.center]).collect();
        let frames = sr.into_iter().map(|f| f.mapv(|v| v.clamp(-1.0, 1.0))).collect();
        out.push(ImageSequence::new(format!("{}-sr", s.id), frames, ts)?);
    }
    save_sequences(out_dir, &out, BitDepth::Sixteen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_vortex_sequence, SynthConfig};

    fn samples() -> Vec<TrainingSample> {
        let cfg = SynthConfig {
            size: 32,
            frames: 5,
            ..SynthConfig::default()
        };
        window_triplets(&synth_vortex_sequence(&cfg).unwrap()).unwrap()
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let s = samples();
        let hr: Vec<Frame> = s.iter().map(|x| x.hr_center().clone()).collect();
        let (model, baseline, hr_flicker) = score_frames(&s, &hr).unwrap();
        assert_eq!(model.psnr_db, None);
        assert_eq!(model.infinite_psnr_frames, 3);
        assert!((model.ssim - 1.0).abs() < 1e-12);
        assert_eq!(model.rase_percent, 0.0);
        assert_eq!(model.flicker, hr_flicker);
        let again = score_frames(&s, &hr).unwrap().1;
        assert_eq!(baseline, again);
    }

    #[test]
    fn runs_split_on_gaps_and_sequences() {
        let mut s = samples();
        assert_eq!(runs(&s), vec![0..3]);
        s[2].center = 7;
        assert_eq!(runs(&s), vec![0..2, 2..3]);
        s[1].sequence_id = "other".into();
        assert_eq!(runs(&s), vec![0..1, 1..2, 2..3]);
        assert!(score_frames(&[], &[]).is_err());
    }
}
