//! Spatial and temporal critics with spectrally normalized convolution blocks.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, ParamStore};

const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-12;

/// Power-iteration state of one normalized weight.
#[derive(Debug, Clone)]
pub struct SpectralState {
    /// Left singular-vector estimate, unit norm, `(out,)`.
    pub u: Tensor,
    /// Right singular-vector estimate, unit norm, `(in,)`.
    pub v: Tensor,
    pub sigma: f64,
    /// Number of power-iteration updates applied so far.
    pub iterations: u64,
    /// Set when the weight was numerically zero at the last update.
    pub degenerate: bool,
}

impl SpectralState {
    /// Random unit `u` for a weight with `rows` outputs and `cols` inputs.
    pub fn random(rows: usize, cols: usize, dtype: DType, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Result<Tensor> {
            let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = xs.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            let xs: Vec<f64> = xs.iter().map(|x| x / norm).collect();
            Ok(Tensor::from_vec(xs, n, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
        };
        Ok(Self {
            u: draw(rows)?,
            v: draw(cols)?,
            sigma: 0.0,
            iterations: 0,
            degenerate: false,
        })
    }

    /// One power-iteration update on a detached 2-D weight.
    pub fn power_iterate(&mut self, weight: &Tensor) -> Result<()> {
        let w = weight.detach();
        let v = w.t()?.matmul(&self.u.unsqueeze(1)?)?.squeeze(1)?;
        let v_norm = crate::nn::scalar(&v.sqr()?.sum_all()?.sqrt()?)?;
        if v_norm <= NORM_EPS {
            self.degenerate = true;
            self.sigma = 0.0;
            self.iterations += 1;
            return Ok(());
        }
        let v = (v / v_norm)?;
        let u = w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?;
        let u_norm = crate::nn::scalar(&u.sqr()?.sum_all()?.sqrt()?)?;
        self.u = (u / u_norm.max(NORM_EPS))?;
        self.v = v;
        self.sigma = crate::nn::scalar(&self.estimate(&w)?)?;
        self.degenerate = false;
        self.iterations += 1;
        Ok(())
    }

    /// `u^T W v`, differentiable with respect to `W`.
    fn estimate(&self, weight: &Tensor) -> Result<Tensor> {
        Ok(self
            .u
            .unsqueeze(0)?
            .matmul(&weight.matmul(&self.v.unsqueeze(1)?)?)?
            .squeeze(1)?
            .squeeze(0)?)
    }
}

/// Divide a 2-D weight by its estimated top singular value. With `update` set, one power
/// iteration refreshes the state first; otherwise the stored vectors are reused unchanged.
/// A zero weight is returned as is and the state is flagged degenerate.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralState, update: bool) -> Result<Tensor> {
    if weight.rank() != 2 {
        return Err(Error::shape(format!("expected a 2-D weight, got {:?}", weight.dims())));
    }
    if update {
        state.power_iterate(weight)?;
    }
    if state.degenerate {
        return Ok(weight.clone());
    }
    let sigma = state.estimate(weight)?;
    if crate::nn::scalar(&sigma)?.abs() <= NORM_EPS {
        state.degenerate = true;
        state.sigma = 0.0;
        return Ok(weight.clone());
    }
    Ok(weight.broadcast_div(&sigma)?)
}

/// Whether a forward pass may advance the spectral-norm state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution whose weight is spectrally normalized on every forward pass.
#[derive(Debug, Clone)]
pub struct SnConv2d {
    pub conv: Conv2d,
    pub state: SpectralState,
}

impl SnConv2d {
    pub fn effective_weight(&mut self, mode: Mode) -> Result<Tensor> {
        let w = self.conv.weight.as_tensor();
        let dims = w.dims4()?;
        let flat = w.reshape((dims.0, dims.1 * dims.2 * dims.3))?;
        let normalized = spectral_normalize(&flat, &mut self.state, mode == Mode::Train)?;
        Ok(normalized.reshape(dims)?)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = self.effective_weight(mode)?;
        self.conv.forward_with_weight(x, &w)
    }

    /// Run `n` power iterations without a forward pass.
    pub fn warm_up(&mut self, n: usize) -> Result<()> {
        let w = self.conv.weight.as_tensor();
        let dims = w.dims4()?;
        let flat = w.reshape((dims.0, dims.1 * dims.2 * dims.3))?;
        for _ in 0..n {
            self.state.power_iterate(&flat)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    /// Output channels of the strided 4x4 blocks.
    pub channels: Vec<usize>,
    /// Power iterations run when the critic is built.
    pub init_power_iterations: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            init_power_iterations: 100,
        }
    }
}

/// Fully convolutional patch critic: strided SN blocks, then an un-normalized 1x1 linear head;
/// the score is the spatial mean of the head's map.
#[derive(Debug, Clone)]
pub struct Critic {
    pub blocks: Vec<SnConv2d>,
    pub head: Conv2d,
    in_channels: usize,
}

#[derive(Debug, Clone)]
pub struct CriticOutput {
    /// `(B,)`
    pub score: Tensor,
    /// Post-activation output of every SN block, in order.
    pub features: Vec<Tensor>,
}

impl Critic {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, cfg: &CriticConfig) -> Result<Self> {
        if cfg.channels.is_empty() {
            return Err(Error::invalid("critic needs at least one block"));
        }
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut c_in = in_channels;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let conv = Conv2d::new(store, &format!("{name}.block{i}"), c_in, c_out, 4, 2, 1, true)?;
            let seed = 0x5eed ^ ((i as u64) << 8) ^ name.bytes().map(u64::from).sum::<u64>();
            let state = SpectralState::random(c_out, c_in * 16, store.dtype(), seed)?;
            let mut block = SnConv2d { conv, state };
            block.warm_up(cfg.init_power_iterations)?;
            blocks.push(block);
            c_in = c_out;
        }
        let head = Conv2d::new(store, &format!("{name}.head"), c_in, 1, 1, 1, 0, true)?;
        Ok(Self {
            blocks,
            head,
            in_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn total_stride(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<CriticOutput> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "critic expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let stride = self.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} input is not divisible by the critic stride {stride}"
            )));
        }
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut y = x.clone();
        for block in &mut self.blocks {
            y = leaky_relu(&block.forward(&y, mode)?, SLOPE)?;
            features.push(y.clone());
        }
        let map = self.head.forward(&y)?;
        let score = map.reshape((b, ()))?.mean(1)?;
        Ok(CriticOutput { score, features })
    }
}

/// `[I_{t-1}, I_t, I_{t+1}, I_t - I_{t-1}, I_{t+1} - I_t]` along channels, `(B, 5, H, W)`.
#[derive(Debug, Clone)]
pub struct TemporalStack(pub Tensor);

pub fn build_temporal_input(prev: &Tensor, center: &Tensor, next: &Tensor) -> Result<TemporalStack> {
    if prev.dims() != center.dims() || next.dims() != center.dims() {
        return Err(Error::shape(format!(
            "temporal frames {:?}, {:?}, {:?}",
            prev.dims(),
            center.dims(),
            next.dims()
        )));
    }
    let (_, c, _, _) = center.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("temporal frames must be single-channel, got {c}")));
    }
    let d_prev = (center - prev)?;
    let d_next = (next - center)?;
    Ok(TemporalStack(Tensor::cat(&[prev, center, next, &d_prev, &d_next], 1)?))
}

impl TemporalStack {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn frames(&self) -> Result<[Tensor; 3]> {
        Ok([self.0.narrow(1, 0, 1)?, self.0.narrow(1, 1, 1)?, self.0.narrow(1, 2, 1)?])
    }

    pub fn differences(&self) -> Result<[Tensor; 2]> {
        Ok([self.0.narrow(1, 3, 1)?, self.0.narrow(1, 4, 1)?])
    }
}

/// Critic on `[lr_up ; candidate]`.
#[derive(Debug, Clone)]
pub struct SpatialDiscriminator(pub Critic);

impl SpatialDiscriminator {
    pub fn new(store: &mut ParamStore, cfg: &CriticConfig) -> Result<Self> {
        Ok(Self(Critic::new(store, "ds", 2, cfg)?))
    }

    pub fn forward(&mut self, lr_up: &Tensor, candidate: &Tensor, mode: Mode) -> Result<CriticOutput> {
        if lr_up.dims() != candidate.dims() {
            return Err(Error::shape(format!(
                "upsampled LR {:?} vs candidate {:?}",
                lr_up.dims(),
                candidate.dims()
            )));
        }
        self.0.forward(&Tensor::cat(&[lr_up, candidate], 1)?, mode)
    }
}

/// Critic on 5-channel frame + difference stacks.
#[derive(Debug, Clone)]
pub struct TemporalDiscriminator(pub Critic);

impl TemporalDiscriminator {
    pub fn new(store: &mut ParamStore, cfg: &CriticConfig) -> Result<Self> {
        Ok(Self(Critic::new(store, "dt", 5, cfg)?))
    }

    pub fn forward(&mut self, stack: &TemporalStack, mode: Mode) -> Result<Tensor> {
        Ok(self.0.forward(stack.tensor(), mode)?.score)
    }
}
