//! Small layer toolkit on top of `candle_core`: a named parameter store with
//! seeded initialization, convolution layers and activation helpers.

use std::collections::BTreeMap;
use std::hash::Hasher;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Named trainable parameters. Iteration order is the lexicographic name
/// order, which keeps optimizer updates and serialization deterministic.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound)
            .map_err(|e| Error::invalid(format!("uniform init for `{name}`: {e}")))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std)
            .map_err(|e| Error::invalid(format!("normal init for `{name}`: {e}")))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![0.0; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Hash over every parameter's bytes; changes iff some parameter changes.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for (name, var) in &self.vars {
            hasher.write(name.as_bytes());
            for x in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                hasher.write_u64(x.to_bits());
            }
        }
        Ok(hasher.finish())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

/// 2-D convolution (cross-correlation), square kernel, optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub mode: Padding,
}

impl Conv2d {
    /// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[c_out], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            mode: Padding::Zero,
        })
    }

    pub fn with_mode(mut self, mode: Padding) -> Self {
        self.mode = mode;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, self.weight.as_tensor())
    }

    pub fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let y = match self.mode {
            Padding::Zero => x.conv2d(weight, self.padding, self.stride, 1, 1)?,
            Padding::Replicate => {
                pad_replicate(x, self.padding)?.conv2d(weight, 0, self.stride, 1, 1)?
            }
        };
        add_channel_bias(&y, self.bias.as_ref())
    }
}

/// Transposed convolution used for 2x spatial upsampling.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_out * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[c_in, c_out, kernel, kernel], bound)?;
        let bias = Some(store.uniform(&format!("{name}.bias"), &[c_out], bound)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), self.padding, 0, self.stride, 1)?;
        add_channel_bias(&y, self.bias.as_ref())
    }
}

fn add_channel_bias(y: &Tensor, bias: Option<&Var>) -> Result<Tensor> {
    match bias {
        Some(b) => {
            let c = b.dims()[0];
            Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
        }
        None => Ok(y.clone()),
    }
}

/// Edge-clamp padding of the two trailing (spatial) dimensions.
pub fn pad_replicate(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Ok(x.clone());
    }
    let rank = x.rank();
    Ok(x.pad_with_same(rank - 2, r, r)?.pad_with_same(rank - 1, r, r)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, slope*x) == (1-slope)*relu(x) + slope*x for 0 <= slope < 1
    Ok(((x.relu()? * (1.0 - slope))? + (x * slope)?)?)
}

/// Logistic function through the identity sigmoid(x) = (tanh(x/2) + 1) / 2.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Population variance of each sample over all non-batch dimensions: (B, ...) -> (B,).
pub fn per_sample_variance(x: &Tensor) -> Result<Tensor> {
    let b = x.dims()[0];
    let flat = x.reshape((b, ()))?;
    let mean = flat.mean_keepdim(1)?;
    Ok(flat.broadcast_sub(&mean)?.sqr()?.mean(1)?)
}

/// Stack frames into a `(B, 1, H, W)` tensor.
pub fn frames_to_tensor(frames: &[&Array2<f64>], dtype: DType) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty frame list"))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        if f.dim() != (h, w) {
            return Err(Error::shape(format!(
                "frame {:?} does not match {:?}",
                f.dim(),
                (h, w)
            )));
        }
        data.extend(f.iter().copied());
    }
    Ok(Tensor::from_vec(data, (frames.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`frames_to_tensor`] for single-channel tensors.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("expected 1 channel, got {c}")));
    }
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    (0..b)
        .map(|i| {
            Array2::from_shape_vec((h, w), data[i * h * w..(i + 1) * h * w].to_vec())
                .map_err(|e| Error::shape(e.to_string()))
        })
        .collect()
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_matches_piecewise() {
        let x = Tensor::new(&[-2.0f64, -0.5, 0.0, 0.5, 3.0], &Device::Cpu).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap().to_vec1::<f64>().unwrap();
        let expected = [-0.4, -0.1, 0.0, 0.5, 3.0];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_matches_logistic() {
        let xs = [-30.0f64, -1.0, 0.0, 2.5, 30.0];
        let x = Tensor::new(&xs, &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        for (xv, yv) in xs.iter().zip(y) {
            assert!((yv - 1.0 / (1.0 + (-xv).exp())).abs() < 1e-14);
        }
    }

    #[test]
    fn store_is_seeded() {
        let mut a = ParamStore::new(DType::F64, 7);
        let mut b = ParamStore::new(DType::F64, 7);
        a.normal("w", &[3, 3], 1.0).unwrap();
        b.normal("w", &[3, 3], 1.0).unwrap();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert!(a.zeros("w", &[1]).is_err());
    }

    #[test]
    fn frames_round_trip() {
        let f = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 / 11.0);
        let t = frames_to_tensor(&[&f, &f], DType::F64).unwrap();
        assert_eq!(t.dims(), &[2, 1, 3, 4]);
        let back = tensor_to_frames(&t).unwrap();
        assert_eq!(back[1], f);
    }
}
