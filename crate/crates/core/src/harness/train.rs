use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TrainingSample;
use crate::discriminators::{build_temporal_input, Mode, SpatialDiscriminator, TemporalDiscriminator};
use crate::error::{Error, Result};
use crate::generator::{FrameTriplet, Generator};
use crate::losses::{
    feature_matching_loss, hinge_d_loss, hinge_g_loss, spatial_energy_loss, temporal_continuity_loss,
    total_generator_loss, GeneratorTerms, LossReport,
};
use crate::nn::{frames_to_tensor, scalar, ParamStore};
use crate::optim::Adam;
use crate::phys_operators::kernel_moment_loss;

use super::config::RunConfig;

// Offsets that keep the three parameter stores on independent streams.
const GEN_SEED: u64 = 0x6e;
const DS_SEED: u64 = 0x5d5;
const DT_SEED: u64 = 0xd7;
const BATCH_SEED: u64 = 0xba7c;

/// All mutable training state: three parameter stores, their models and optimizers.
pub struct TrainState {
    pub config: RunConfig,
    pub gen_store: ParamStore,
    pub generator: Generator,
    pub ds_store: ParamStore,
    pub spatial: SpatialDiscriminator,
    pub dt_store: ParamStore,
    pub temporal: TemporalDiscriminator,
    pub opt_g: Adam,
    pub opt_ds: Adam,
    pub opt_dt: Adam,
    /// Completed training steps.
    pub step: u64,
}

/// Tensors for one batch. `prev_index` lists the batch rows whose previous triplet exists;
/// those triplets are appended after the current ones in `lr`.
pub struct Batch {
    pub lr: Tensor,
    pub lr_up: Tensor,
    pub hr_prev: Tensor,
    pub hr: Tensor,
    pub hr_next: Tensor,
    pub size: usize,
    pub prev_index: Vec<u32>,
}

impl Batch {
    pub fn new(samples: &[&TrainingSample], dtype: DType) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut triplets: Vec<&FrameTriplet> = samples.iter().map(|s| &s.lr).collect();
        let mut prev_index = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if let Some(p) = &s.prev_lr {
                triplets.push(p);
                prev_index.push(i as u32);
            }
        }
        let lr = Tensor::cat(
            &triplets.iter().map(|t| t.to_tensor(dtype)).collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let hr_at = |k: usize| frames_to_tensor(&samples.iter().map(|s| &s.hr[k]).collect::<Vec<_>>(), dtype);
        let hr = hr_at(1)?;
        let (_, _, h, w) = hr.dims4()?;
        let lr_center = frames_to_tensor(&samples.iter().map(|s| s.lr.center()).collect::<Vec<_>>(), dtype)?;
        Ok(Self {
            lr,
            lr_up: lr_center.upsample_nearest2d(h, w)?,
            hr_prev: hr_at(0)?,
            hr,
            hr_next: hr_at(2)?,
            size: samples.len(),
            prev_index,
        })
    }
}

fn check_finite(name: &str, t: &Tensor) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::TrainingFault { term: name.to_string() });
    }
    Ok(v)
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let mut gen_store = ParamStore::new(dtype, config.seed ^ GEN_SEED);
        let generator = Generator::new(&mut gen_store, &config.generator)?;
        let mut ds_store = ParamStore::new(dtype, config.seed ^ DS_SEED);
        let spatial = SpatialDiscriminator::new(&mut ds_store, &config.spatial_critic)?;
        let mut dt_store = ParamStore::new(dtype, config.seed ^ DT_SEED);
        let temporal = TemporalDiscriminator::new(&mut dt_store, &config.temporal_critic)?;
        Ok(Self {
            opt_g: Adam::new(config.optim.generator),
            opt_ds: Adam::new(config.optim.discriminator),
            opt_dt: Adam::new(config.optim.discriminator),
            config,
            gen_store,
            generator,
            ds_store,
            spatial,
            dt_store,
            temporal,
            step: 0,
        })
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// Sample indices for `step`; depends only on the seed and the step number.
    pub fn batch_indices(&self, step: u64, n_samples: usize) -> Vec<usize> {
        let k = self.config.train.batch_size.min(n_samples);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ BATCH_SEED ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rand::seq::index::sample(&mut rng, n_samples, k).into_vec()
    }

    /// Generator pass over the batch: SR for the current triplets and, for rows with a
    /// previous triplet, SR at `t-1`.
    pub fn generate(&self, batch: &Batch) -> Result<(Tensor, Option<Tensor>)> {
        let out = self.generator.forward(&batch.lr)?.sr;
        let sr = out.narrow(0, 0, batch.size)?;
        let prev = if batch.prev_index.is_empty() {
            None
        } else {
            Some(out.narrow(0, batch.size, batch.prev_index.len())?)
        };
        Ok((sr, prev))
    }

    /// Hinge update of the spatial critic; real and fake pass through it together.
    pub fn update_spatial(&mut self, batch: &Batch, sr: &Tensor) -> Result<f64> {
        let b = batch.size;
        let lr_up = Tensor::cat(&[&batch.lr_up, &batch.lr_up], 0)?;
        let candidate = Tensor::cat(&[&batch.hr, &sr.detach()], 0)?;
        let score = self.spatial.forward(&lr_up, &candidate, Mode::Train)?.score;
        let loss = hinge_d_loss(&score.narrow(0, 0, b)?, &score.narrow(0, b, b)?)?;
        let value = check_finite("d_spatial", &loss)?;
        let grads = loss.backward()?;
        self.opt_ds.step(self.ds_store.iter(), &grads)?;
        Ok(value)
    }

    /// Hinge update of the temporal critic: all-HR stacks against stacks with the SR center.
    pub fn update_temporal(&mut self, batch: &Batch, sr: &Tensor) -> Result<f64> {
        let b = batch.size;
        let prev = Tensor::cat(&[&batch.hr_prev, &batch.hr_prev], 0)?;
        let center = Tensor::cat(&[&batch.hr, &sr.detach()], 0)?;
        let next = Tensor::cat(&[&batch.hr_next, &batch.hr_next], 0)?;
        let score = self.temporal.forward(&build_temporal_input(&prev, &center, &next)?, Mode::Train)?;
        let loss = hinge_d_loss(&score.narrow(0, 0, b)?, &score.narrow(0, b, b)?)?;
        let value = check_finite("d_temporal", &loss)?;
        let grads = loss.backward()?;
        self.opt_dt.step(self.dt_store.iter(), &grads)?;
        Ok(value)
    }

    /// Generator terms with fresh critic scores. Critic passes are skipped when both
    /// adversarial and feature weights are zero; `Mode::Eval` keeps the spectral states fixed.
    pub fn generator_terms(
        &mut self,
        batch: &Batch,
        sr: &Tensor,
        sr_prev: Option<&Tensor>,
        mode: Mode,
    ) -> Result<GeneratorTerms> {
        let b = batch.size;
        let w = self.config.loss;
        let zero = || -> Result<Tensor> { Ok(Tensor::zeros((), sr.dtype(), sr.device())?) };
        let l1 = crate::losses::l1_loss(sr, &batch.hr)?;

        let (feat, adv) = if w.lambda_adv == 0.0 && w.lambda_feat == 0.0 {
            (zero()?, zero()?)
        } else {
            let lr_up = Tensor::cat(&[&batch.lr_up, &batch.lr_up], 0)?;
            let candidate = Tensor::cat(&[&batch.hr, sr], 0)?;
            let ds = self.spatial.forward(&lr_up, &candidate, mode)?;
            let real: Vec<Tensor> = ds.features.iter().map(|f| f.narrow(0, 0, b)).collect::<candle_core::Result<_>>()?;
            let fake: Vec<Tensor> = ds.features.iter().map(|f| f.narrow(0, b, b)).collect::<candle_core::Result<_>>()?;
            let feat = feature_matching_loss(&real, &fake)?;
            let stack = build_temporal_input(&batch.hr_prev, sr, &batch.hr_next)?;
            let dt_fake = self.temporal.forward(&stack, mode)?;
            let adv = hinge_g_loss(&ds.score.narrow(0, b, b)?, &dt_fake)?;
            (feat, adv)
        };

        let mut stat = spatial_energy_loss(sr, &batch.hr)?;
        if let Some(prev) = sr_prev {
            let idx = Tensor::new(batch.prev_index.as_slice(), sr.device())?;
            let current = sr.index_select(&idx, 0)?;
            stat = (stat + (temporal_continuity_loss(&current, prev)? * w.lambda_t)?)?;
        }
        let ker = kernel_moment_loss(&self.generator.phycell.bank)?.to_dtype(sr.dtype())?;
        Ok(GeneratorTerms { l1, feat, adv, stat, ker })
    }

    pub fn update_generator(&mut self, batch: &Batch, sr: &Tensor, sr_prev: Option<&Tensor>) -> Result<LossReport> {
        let terms = self.generator_terms(batch, sr, sr_prev, Mode::Train)?;
        let (total, report) = total_generator_loss(&terms, &self.config.loss)?;
        let grads = total.backward()?;
        self.opt_g.step(self.gen_store.iter(), &grads)?;
        Ok(report)
    }

    /// One alternating step: spatial critic, temporal critic, then generator.
    pub fn train_step(&mut self, samples: &[&TrainingSample]) -> Result<LossReport> {
        let batch = Batch::new(samples, self.dtype())?;
        let (sr, sr_prev) = self.generate(&batch)?;
        let (d_spatial, d_temporal) = if self.config.train.freeze_discriminators {
            (0.0, 0.0)
        } else {
            (self.update_spatial(&batch, &sr)?, self.update_temporal(&batch, &sr)?)
        };
        let mut report = self.update_generator(&batch, &sr, sr_prev.as_ref())?;
        self.step += 1;
        report.step = self.step;
        report.d_spatial = d_spatial;
        report.d_temporal = d_temporal;
        Ok(report)
    }

    /// Draw the batch for the next step from `samples` and train on it.
    pub fn train_next(&mut self, samples: &[TrainingSample]) -> Result<LossReport> {
        if samples.is_empty() {
            return Err(crate::error::DataError::Empty.into());
        }
        let idx = self.batch_indices(self.step, samples.len());
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &samples[i]).collect();
        self.train_step(&batch)
    }

    /// Order-sensitive hashes of the generator and both critics' parameters.
    pub fn fingerprints(&self) -> Result<[u64; 3]> {
        Ok([
            self.gen_store.fingerprint()?,
            self.ds_store.fingerprint()?,
            self.dt_store.fingerprint()?,
        ])
    }
}
