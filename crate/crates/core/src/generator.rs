//! Physics-encoded generator: nearest-neighbor pre-upsampling, shared strided encoder,
//! disentangled PhyCell (physics) and ConvLSTM (texture) branches, center-frame fusion and a
//! transposed-convolution decoder with residual blocks.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    frames_to_tensor, leaky_relu, sigmoid, tensor_to_frames, Conv2d, ConvTranspose2d, ParamStore,
};
use crate::phycell::{LatentState, PhyCell, PhyCellConfig};
use crate::phys_operators::DEFAULT_LAYOUT;

pub const SCALE: usize = 4;
const SLOPE: f64 = 0.2;

pub type Frame = Array2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_channels: usize,
    pub encoder_hidden: usize,
    pub decoder_channels: usize,
    pub residual_blocks: usize,
    pub phycell_kernel_size: usize,
    /// Derivative orders `[a, b]` of the operator bank.
    pub bank_layout: Vec<[usize; 2]>,
    /// Constrain moment entries with `a + b <= moment_max_order`; absent means the full matrix.
    pub moment_max_order: Option<usize>,
    /// Start the bank at the exact moment solutions instead of random kernels.
    pub bank_init_exact: bool,
    pub bank_init_std: f64,
    pub combine_init_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_channels: 64,
            encoder_hidden: 32,
            decoder_channels: 32,
            residual_blocks: 3,
            phycell_kernel_size: 7,
            bank_layout: DEFAULT_LAYOUT.iter().map(|&(a, b)| [a, b]).collect(),
            moment_max_order: Some(2),
            bank_init_exact: true,
            bank_init_std: 0.1,
            combine_init_std: 0.01,
        }
    }
}

impl GeneratorConfig {
    pub fn layout(&self) -> Vec<(usize, usize)> {
        self.bank_layout.iter().map(|&[a, b]| (a, b)).collect()
    }
}

/// `[I_{t-1}, I_t, I_{t+1}]`, single-channel, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriplet {
    frames: [Frame; 3],
}

impl FrameTriplet {
    pub fn new(prev: Frame, center: Frame, next: Frame) -> Result<Self> {
        let dim = center.dim();
        if prev.dim() != dim || next.dim() != dim {
            return Err(Error::shape(format!(
                "triplet frames {:?}, {:?}, {:?}",
                prev.dim(),
                dim,
                next.dim()
            )));
        }
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::invalid("empty frame"));
        }
        for f in [&prev, &center, &next] {
            if f.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::invalid("triplet values must lie in [-1, 1]"));
            }
        }
        Ok(Self {
            frames: [prev, center, next],
        })
    }

    pub fn frames(&self) -> &[Frame; 3] {
        &self.frames
    }

    pub fn center(&self) -> &Frame {
        &self.frames[1]
    }

    pub fn dim(&self) -> (usize, usize) {
        self.frames[1].dim()
    }

    /// `(1, 3, H, W)` tensor with time along the channel axis.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let refs: Vec<&Frame> = self.frames.iter().collect();
        Ok(frames_to_tensor(&refs, dtype)?.reshape((1, 3, self.dim().0, self.dim().1))?)
    }
}

/// Replicate each pixel into a `factor x factor` block.
pub fn upsample_nn(frame: &Frame, factor: usize) -> Result<Frame> {
    let (h, w) = frame.dim();
    if h == 0 || w == 0 || factor == 0 {
        return Err(Error::invalid(format!(
            "cannot upsample a {h}x{w} frame by {factor}"
        )));
    }
    Ok(Array2::from_shape_fn((h * factor, w * factor), |(y, x)| {
        frame[[y / factor, x / factor]]
    }))
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Encoder {
    pub const STRIDE: usize = 4;

    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, latent: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), 1, hidden, 4, 2, 1, true)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), hidden, latent, 4, 2, 1, true)?,
        })
    }

    /// `(B, 1, H, W) -> (B, C, H/4, W/4)`.
    pub fn encode(&self, frame_up: &Tensor) -> Result<LatentState> {
        let (_, _, h, w) = frame_up.dims4()?;
        if h % Self::STRIDE != 0 || w % Self::STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "{h}x{w} is not divisible by the encoder stride {}",
                Self::STRIDE
            )));
        }
        let x = leaky_relu(&self.conv1.forward(frame_up)?, SLOPE)?;
        LatentState::new(leaky_relu(&self.conv2.forward(&x)?, SLOPE)?)
    }
}

/// Test hooks pinning ConvLSTM gates to constants.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateOverride {
    pub input: Option<f64>,
    pub forget: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvLstm {
    /// `[x ; h] -> [i, f, o, g]`, 3x3.
    pub gates: Conv2d,
    pub hidden: usize,
    pub overrides: GateOverride,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            gates: Conv2d::new(store, &format!("{name}.gates"), input + hidden, 4 * hidden, 3, 1, 1, true)?,
            hidden,
            overrides: GateOverride::default(),
        })
    }

    pub fn zero_state(&self, like: &LatentState) -> Result<LstmState> {
        let (b, _, h, w) = like.tensor().dims4()?;
        let z = Tensor::zeros((b, self.hidden, h, w), like.tensor().dtype(), like.tensor().device())?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    pub fn step(&self, x: &LatentState, state: &LstmState) -> Result<LstmState> {
        let (b, _, h, w) = x.tensor().dims4()?;
        if state.h.dims() != [b, self.hidden, h, w] || state.c.dims() != state.h.dims() {
            return Err(Error::shape(format!(
                "lstm state {:?}/{:?} does not fit input {:?}",
                state.h.dims(),
                state.c.dims(),
                x.dims()
            )));
        }
        let z = self.gates.forward(&Tensor::cat(&[x.tensor(), &state.h], 1)?)?;
        let n = self.hidden;
        let pinned = |v: Option<f64>, pre: Tensor| -> Result<Tensor> {
            match v {
                Some(v) => Ok((pre.ones_like()? * v)?),
                None => sigmoid(&pre),
            }
        };
        let i = pinned(self.overrides.input, z.narrow(1, 0, n)?)?;
        let f = pinned(self.overrides.forget, z.narrow(1, n, n)?)?;
        let o = sigmoid(&z.narrow(1, 2 * n, n)?)?;
        let g = z.narrow(1, 3 * n, n)?.tanh()?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, 1, true)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = leaky_relu(&self.conv1.forward(x)?, SLOPE)?;
        Ok((x + self.conv2.forward(&y)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub up1: ConvTranspose2d,
    pub up2: ConvTranspose2d,
    pub blocks: Vec<ResBlock>,
    pub out: Conv2d,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig) -> Result<Self> {
        let d = cfg.decoder_channels;
        Ok(Self {
            up1: ConvTranspose2d::new(store, &format!("{name}.up1"), cfg.latent_channels, cfg.encoder_hidden, 4, 2, 1)?,
            up2: ConvTranspose2d::new(store, &format!("{name}.up2"), cfg.encoder_hidden, d, 4, 2, 1)?,
            blocks: (0..cfg.residual_blocks)
                .map(|i| ResBlock::new(store, &format!("{name}.res{i}"), d))
                .collect::<Result<_>>()?,
            out: Conv2d::new(store, &format!("{name}.out"), d, 1, 3, 1, 1, true)?,
        })
    }

    /// Pre-activation output; the generator applies `tanh`.
    fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        let mut x = leaky_relu(&self.up1.forward(fused)?, SLOPE)?;
        x = leaky_relu(&self.up2.forward(&x)?, SLOPE)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.out.forward(&x)
    }
}

/// Which branch outputs reach the fusion layer (ablation / wiring hooks).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BranchMask {
    #[default]
    Both,
    PhysicsOnly,
    TextureOnly,
}

#[derive(Debug, Clone)]
pub struct GeneratorState {
    pub phy: LatentState,
    pub res: LstmState,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// `(B, 1, 4h, 4w)` in `[-1, 1]`.
    pub sr: Tensor,
    /// States recorded right after the center frame; these feed the fusion layer.
    pub center: GeneratorState,
    /// States after the t+1 frame (diagnostics only).
    pub last: GeneratorState,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub encoder: Encoder,
    pub phycell: PhyCell,
    pub convlstm: ConvLstm,
    pub fuse: Conv2d,
    pub decoder: Decoder,
    pub branch_mask: BranchMask,
}

impl Generator {
    pub fn new(store: &mut ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        let c = cfg.latent_channels;
        if c == 0 || cfg.encoder_hidden == 0 || cfg.decoder_channels == 0 {
            return Err(Error::invalid("generator widths must be positive"));
        }
        let phycell = PhyCell::new(
            store,
            "gen.phycell",
            &PhyCellConfig {
                channels: c,
                kernel_size: cfg.phycell_kernel_size,
                layout: cfg.layout(),
                max_order: cfg.moment_max_order,
                bank_init_std: cfg.bank_init_std,
                combine_init_std: cfg.combine_init_std,
            },
        )?;
        if cfg.bank_init_exact {
            phycell.bank.reset_to_targets()?;
        }
        Ok(Self {
            config: cfg.clone(),
            encoder: Encoder::new(store, "gen.encoder", cfg.encoder_hidden, c)?,
            phycell,
            convlstm: ConvLstm::new(store, "gen.convlstm", c, c)?,
            fuse: Conv2d::new(store, "gen.fuse", 2 * c, c, 3, 1, 1, true)?,
            decoder: Decoder::new(store, "gen.decoder", cfg)?,
            branch_mask: BranchMask::Both,
        })
    }

    /// Super-resolve a batch of LR triplets `(B, 3, h, w)` into `(B, 1, 4h, 4w)`.
    pub fn forward(&self, lr: &Tensor) -> Result<GeneratorOutput> {
        let (b, t, h, w) = lr.dims4()?;
        if t != 3 {
            return Err(Error::shape(format!("expected 3 frames per triplet, got {t}")));
        }
        let up = lr
            .reshape((b * 3, 1, h, w))?
            .upsample_nearest2d(h * SCALE, w * SCALE)?;
        let latents = self.encoder.encode(&up)?;
        let (_, c, lh, lw) = latents.tensor().dims4()?;
        let latents = latents.tensor().reshape((b, 3, c, lh, lw))?;
        let frame_latent = |i: usize| -> Result<LatentState> {
            LatentState::new(latents.narrow(1, i, 1)?.squeeze(1)?)
        };

        let x0 = frame_latent(0)?;
        let mut phy = LatentState::zeros_like(&x0)?;
        let mut res = self.convlstm.zero_state(&x0)?;
        let mut center = None;
        for i in 0..3 {
            let x = if i == 0 { x0.clone() } else { frame_latent(i)? };
            phy = self.phycell.step(&phy, &x)?;
            res = self.convlstm.step(&x, &res)?;
            if i == 1 {
                center = Some(GeneratorState {
                    phy: phy.clone(),
                    res: res.clone(),
                });
            }
        }
        let center = center.expect("triplet has a center frame");
        let (phy_in, res_in) = match self.branch_mask {
            BranchMask::Both => (center.phy.tensor().clone(), center.res.h.clone()),
            BranchMask::PhysicsOnly => (center.phy.tensor().clone(), center.res.h.zeros_like()?),
            BranchMask::TextureOnly => (center.phy.tensor().zeros_like()?, center.res.h.clone()),
        };
        let fused = leaky_relu(&self.fuse.forward(&Tensor::cat(&[&phy_in, &res_in], 1)?)?, SLOPE)?;
        let sr = self.decoder.forward(&fused)?.tanh()?;
        Ok(GeneratorOutput {
            sr,
            center,
            last: GeneratorState { phy, res },
        })
    }

    pub fn generate(&self, triplet: &FrameTriplet, dtype: DType) -> Result<(Frame, GeneratorOutput)> {
        let out = self.forward(&triplet.to_tensor(dtype)?)?;
        let frame = tensor_to_frames(&out.sr)?.remove(0);
        Ok((frame, out))
    }
}
