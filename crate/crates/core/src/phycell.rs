//! Recurrent physics branch: prediction with moment-constrained operators, then a gated
//! correction against the encoded observation,
//!
//! ```text
//! h~_{t+1} = h_t + combine(bank(h_t))
//! h_{t+1}  = h~_{t+1} + K (x_t - h~_{t+1}),   K = sigmoid(conv3x3([x_t ; h~_{t+1}]))
//! ```

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, ParamStore};
use crate::phys_operators::{apply_bank_depthwise, KernelBank};

/// Latent grid `(B, C, H', W')` carried through a sequence.
#[derive(Debug, Clone)]
pub struct LatentState(pub Tensor);

impl LatentState {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape(format!("latent state must be rank 4, got {:?}", t.dims())));
        }
        Ok(Self(t))
    }

    pub fn zeros_like(other: &LatentState) -> Result<Self> {
        Ok(Self(other.0.zeros_like()?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> &[usize] {
        self.0.dims()
    }
}

/// How the correction gain is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainMode {
    Learned,
    /// Constant gain, bypassing the gain filter.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct PhyCell {
    pub bank: KernelBank,
    /// 1x1 mixing weights `(C, C * n_ops, 1, 1)`, no bias.
    pub combine: Var,
    pub gain: Conv2d,
    pub gain_mode: GainMode,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct PhyCellConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub layout: Vec<(usize, usize)>,
    pub max_order: Option<usize>,
    pub bank_init_std: f64,
    pub combine_init_std: f64,
}

impl PhyCell {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &PhyCellConfig) -> Result<Self> {
        let bank = KernelBank::new(
            store,
            &format!("{name}.bank"),
            &cfg.layout,
            cfg.kernel_size,
            cfg.max_order,
            cfg.bank_init_std,
        )?;
        let c = cfg.channels;
        let combine = store.normal(
            &format!("{name}.combine"),
            &[c, c * bank.len(), 1, 1],
            cfg.combine_init_std,
        )?;
        let gain = Conv2d::new(store, &format!("{name}.gain"), 2 * c, c, 3, 1, 1, true)?;
        Ok(Self {
            bank,
            combine,
            gain,
            gain_mode: GainMode::Learned,
            channels: c,
        })
    }

    /// Assemble from explicit parts (used by tests and tooling).
    pub fn from_parts(bank: KernelBank, combine: Var, gain: Conv2d) -> Result<Self> {
        let (c, ck, kh, kw) = combine.dims4()?;
        if ck != c * bank.len() || kh != 1 || kw != 1 {
            return Err(Error::shape(format!(
                "combine weights {:?} do not match {} operators",
                combine.dims(),
                bank.len()
            )));
        }
        Ok(Self {
            bank,
            combine,
            gain,
            gain_mode: GainMode::Learned,
            channels: c,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, s: &LatentState) -> Result<()> {
        let dims = s.dims();
        if dims[1] != self.channels {
            return Err(Error::shape(format!(
                "latent has {} channels, cell expects {}",
                dims[1], self.channels
            )));
        }
        Ok(())
    }

    /// Physics residual `combine(bank(h))`, linear in `h`.
    pub fn dynamics(&self, h: &LatentState) -> Result<Tensor> {
        self.check(h)?;
        let responses = apply_bank_depthwise(h.tensor(), &self.bank)?;
        Ok(responses.conv2d(self.combine.as_tensor(), 0, 1, 1, 1)?)
    }

    pub fn predict(&self, h: &LatentState) -> Result<LatentState> {
        LatentState::new((h.tensor() + self.dynamics(h)?)?)
    }

    pub fn gain(&self, h_tilde: &LatentState, x: &LatentState) -> Result<Tensor> {
        match self.gain_mode {
            GainMode::Learned => {
                let stacked = Tensor::cat(&[x.tensor(), h_tilde.tensor()], 1)?;
                sigmoid(&self.gain.forward(&stacked)?)
            }
            GainMode::Fixed(k) => Ok((h_tilde.tensor().ones_like()? * k)?),
        }
    }

    pub fn correct(&self, h_tilde: &LatentState, x: &LatentState) -> Result<LatentState> {
        if h_tilde.dims() != x.dims() {
            return Err(Error::shape(format!(
                "prediction {:?} vs observation {:?}",
                h_tilde.dims(),
                x.dims()
            )));
        }
        self.check(x)?;
        let k = self.gain(h_tilde, x)?;
        let innovation = (x.tensor() - h_tilde.tensor())?;
        LatentState::new((h_tilde.tensor() + (k * innovation)?)?)
    }

    pub fn step(&self, h: &LatentState, x: &LatentState) -> Result<LatentState> {
        let h_tilde = self.predict(h)?;
        self.correct(&h_tilde, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phys_operators::DEFAULT_LAYOUT;
    use candle_core::{DType, Device};
    use ndarray::Array2;

    fn cell(c: usize, seed: u64) -> PhyCell {
        let mut store = ParamStore::new(DType::F64, seed);
        PhyCell::new(
            &mut store,
            "phy",
            &PhyCellConfig {
                channels: c,
                kernel_size: 7,
                layout: DEFAULT_LAYOUT.to_vec(),
                max_order: Some(2),
                bank_init_std: 0.1,
                combine_init_std: 0.1,
            },
        )
        .unwrap()
    }

    fn randn(shape: (usize, usize, usize, usize)) -> LatentState {
        LatentState::new(Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn zero_combine_is_identity() {
        let cell = cell(3, 1);
        cell.combine.set(&cell.combine.zeros_like().unwrap()).unwrap();
        let h = randn((2, 3, 9, 9));
        assert_eq!(max_abs_diff(cell.predict(&h).unwrap().tensor(), h.tensor()), 0.0);
    }

    #[test]
    fn delta_bank_scales_state() {
        let mut delta = Array2::zeros((7, 7));
        delta[[3, 3]] = 1.0;
        let bank = KernelBank::from_kernels(&[delta], &[(0, 0)], None, DType::F64).unwrap();
        let c = 0.35;
        let mut combine = vec![0.0; 4];
        combine[0] = c;
        combine[3] = c;
        let combine = Var::from_vec(combine, (2, 2, 1, 1), &Device::Cpu).unwrap();
        let mut store = ParamStore::new(DType::F64, 0);
        let gain = Conv2d::new(&mut store, "g", 4, 2, 3, 1, 1, true).unwrap();
        let cell = PhyCell::from_parts(bank, combine, gain).unwrap();
        let h = randn((1, 2, 8, 8));
        let out = cell.predict(&h).unwrap();
        let expected = (h.tensor() * (1.0 + c)).unwrap();
        assert!(max_abs_diff(out.tensor(), &expected) < 1e-14);
    }

    #[test]
    fn forced_gains() {
        let mut cell = cell(2, 2);
        let h = randn((1, 2, 8, 8));
        let x = randn((1, 2, 8, 8));
        cell.gain_mode = GainMode::Fixed(0.0);
        assert_eq!(max_abs_diff(cell.correct(&h, &x).unwrap().tensor(), h.tensor()), 0.0);
        cell.gain_mode = GainMode::Fixed(1.0);
        assert!(max_abs_diff(cell.correct(&h, &x).unwrap().tensor(), x.tensor()) < 1e-14);
        cell.gain_mode = GainMode::Learned;
        assert_eq!(max_abs_diff(cell.correct(&h, &h).unwrap().tensor(), h.tensor()), 0.0);
    }

    #[test]
    fn step_composes_identities() {
        let mut cell = cell(2, 3);
        cell.combine.set(&cell.combine.zeros_like().unwrap()).unwrap();
        let h = randn((1, 2, 8, 8));
        let x = randn((1, 2, 8, 8));
        cell.gain_mode = GainMode::Fixed(1.0);
        assert!(max_abs_diff(cell.step(&h, &x).unwrap().tensor(), x.tensor()) < 1e-14);
        cell.gain_mode = GainMode::Fixed(0.0);
        assert_eq!(max_abs_diff(cell.step(&h, &x).unwrap().tensor(), h.tensor()), 0.0);
    }

    #[test]
    fn shape_errors() {
        let cell = cell(2, 4);
        let h = randn((1, 2, 8, 8));
        let x = randn((1, 2, 9, 8));
        assert!(cell.correct(&h, &x).is_err());
        assert!(cell.predict(&randn((1, 3, 8, 8))).is_err());
        assert!(cell.predict(&randn((1, 2, 4, 4))).is_err());
    }

    #[test]
    fn predict_is_linear_in_state() {
        let cell = cell(2, 5);
        let h = randn((1, 2, 10, 10));
        let alpha = -1.7;
        let scaled = LatentState::new((h.tensor() * alpha).unwrap()).unwrap();
        let lhs = cell.predict(&scaled).unwrap();
        let rhs = ((h.tensor() * alpha).unwrap() + (cell.dynamics(&h).unwrap() * alpha).unwrap())
            .unwrap();
        assert!(max_abs_diff(lhs.tensor(), &rhs) < 1e-10);
    }
}
