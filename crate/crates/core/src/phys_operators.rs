//! Moment analysis of convolution kernels.
//!
//! A `k x k` kernel `W` applied as a correlation, `(W * f)(x, y) = sum W[v][u] f(x + u, y + v)`,
//! expands by Taylor's theorem into `sum_{a,b} M[a][b] d^{a+b} f / dx^a dy^b` (grid units), where
//!
//! ```text
//! M[a][b] = 1/(a! b!) * sum_{u,v = -r..r} W[v + r][u + r] * u^a * v^b
//! ```
//!
//! with `u` the column offset (rightward) and `v` the row offset (downward). Forcing `M` to the
//! unit matrix `e_{ab}` therefore makes the kernel act like `d^{a+b} / dx^a dy^b`.

use std::f64::consts::FRAC_PI_2;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::nn::{pad_replicate, ParamStore};
use crate::optim::{Adam, AdamConfig};

/// Operator set spanning the advection and diffusion terms: identity, first and second derivatives.
pub const DEFAULT_LAYOUT: [(usize, usize); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)];

#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    /// `entries[[a, b]]`: a = x-derivative order, b = y-derivative order.
    pub entries: Array2<f64>,
}

impl MomentMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            entries: Array2::zeros((k, k)),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[[a, b]]
    }

    /// Squared Frobenius distance, optionally restricted to entries with `a + b <= max_order`.
    pub fn sq_distance(&self, other: &MomentMatrix, max_order: Option<usize>) -> f64 {
        self.entries
            .indexed_iter()
            .filter(|((a, b), _)| max_order.is_none_or(|m| a + b <= m))
            .map(|((a, b), x)| (x - other.entries[[a, b]]).powi(2))
            .sum()
    }
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::invalid(format!(
            "kernel size must be odd and >= 3, got {k}"
        )));
    }
    Ok(())
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// `basis[[i, a]] = u_i^a / a!` with `u_i = i - r`.
pub fn moment_basis(k: usize) -> Array2<f64> {
    let r = (k / 2) as i64;
    Array2::from_shape_fn((k, k), |(i, a)| {
        let u = (i as i64 - r) as f64;
        u.powi(a as i32) / factorial(a)
    })
}

pub fn moment_matrix(kernel: &Array2<f64>) -> Result<MomentMatrix> {
    let (rows, cols) = kernel.dim();
    if rows != cols {
        return Err(Error::invalid(format!("kernel must be square, got {rows}x{cols}")));
    }
    check_kernel_size(rows)?;
    if kernel.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("kernel has non-finite entries"));
    }
    let k = rows;
    let r = (k / 2) as i64;
    let mut entries = Array2::zeros((k, k));
    for a in 0..k {
        for b in 0..k {
            let mut acc = 0.0;
            for row in 0..k {
                let v = (row as i64 - r) as f64;
                for col in 0..k {
                    let u = (col as i64 - r) as f64;
                    acc += kernel[[row, col]] * u.powi(a as i32) * v.powi(b as i32);
                }
            }
            entries[[a, b]] = acc / (factorial(a) * factorial(b));
        }
    }
    Ok(MomentMatrix { entries })
}

pub fn target_moment(a: usize, b: usize, k: usize) -> Result<MomentMatrix> {
    check_kernel_size(k)?;
    if a >= k || b >= k {
        return Err(Error::invalid(format!(
            "derivative orders ({a},{b}) out of range for kernel size {k}"
        )));
    }
    let mut m = MomentMatrix::zeros(k);
    m.entries[[a, b]] = 1.0;
    Ok(m)
}

/// The unique kernel whose full moment matrix equals `target` (the moment map is invertible).
pub fn kernel_from_moments(target: &MomentMatrix) -> Result<Array2<f64>> {
    let k = target.kernel_size();
    check_kernel_size(k)?;
    // M = B^T W^T B  =>  W^T = B^{-T} M B^{-1}
    let inv = invert(&moment_basis(k))?;
    let wt = inv.t().dot(&target.entries).dot(&inv);
    Ok(wt.reversed_axes())
}

fn invert(m: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .expect("non-empty range");
        if a[[pivot, col]].abs() < 1e-300 {
            return Err(Error::invalid("singular moment basis"));
        }
        for j in 0..n {
            a.swap([col, j], [pivot, j]);
            inv.swap([col, j], [pivot, j]);
        }
        let p = a[[col, col]];
        for j in 0..n {
            a[[col, j]] /= p;
            inv[[col, j]] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = a[[i, col]];
                if f != 0.0 {
                    for j in 0..n {
                        a[[i, j]] -= f * a[[col, j]];
                        inv[[i, j]] -= f * inv[[col, j]];
                    }
                }
            }
        }
    }
    Ok(inv)
}

/// Moment-constrained filter bank; `kernels` has shape `(n, 1, k, k)` so it can be applied
/// depthwise with a single convolution.
#[derive(Debug, Clone)]
pub struct KernelBank {
    pub kernels: Var,
    pub layout: Vec<(usize, usize)>,
    pub targets: Vec<MomentMatrix>,
    /// Only entries with `a + b <= max_order` are constrained; `None` constrains the full matrix.
    pub max_order: Option<usize>,
    kernel_size: usize,
}

impl KernelBank {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layout: &[(usize, usize)],
        kernel_size: usize,
        max_order: Option<usize>,
        init_std: f64,
    ) -> Result<Self> {
        validate_layout(layout, kernel_size)?;
        let kernels = store.normal(name, &[layout.len(), 1, kernel_size, kernel_size], init_std)?;
        Self::assemble(kernels, layout, kernel_size, max_order)
    }

    pub fn from_kernels(
        kernels: &[Array2<f64>],
        layout: &[(usize, usize)],
        max_order: Option<usize>,
        dtype: DType,
    ) -> Result<Self> {
        let k = kernels
            .first()
            .map(|w| w.nrows())
            .ok_or_else(|| Error::invalid("empty kernel bank"))?;
        if kernels.len() != layout.len() {
            return Err(Error::invalid(format!(
                "{} kernels for {} layout entries",
                kernels.len(),
                layout.len()
            )));
        }
        validate_layout(layout, k)?;
        let mut data = Vec::with_capacity(kernels.len() * k * k);
        for w in kernels {
            if w.dim() != (k, k) {
                return Err(Error::shape(format!("kernel {:?} in a bank of size {k}", w.dim())));
            }
            data.extend(w.iter().copied());
        }
        let t = Tensor::from_vec(data, (kernels.len(), 1, k, k), &Device::Cpu)?.to_dtype(dtype)?;
        Self::assemble(Var::from_tensor(&t)?, layout, k, max_order)
    }

    fn assemble(
        kernels: Var,
        layout: &[(usize, usize)],
        kernel_size: usize,
        max_order: Option<usize>,
    ) -> Result<Self> {
        let targets = layout
            .iter()
            .map(|&(a, b)| target_moment(a, b, kernel_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kernels,
            layout: layout.to_vec(),
            targets,
            max_order,
            kernel_size,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    /// Overwrite every kernel with the exact solution of its full moment target.
    pub fn reset_to_targets(&self) -> Result<()> {
        let k = self.kernel_size;
        let mut data = Vec::with_capacity(self.len() * k * k);
        for &(a, b) in &self.layout {
            data.extend(kernel_from_moments(&target_moment(a, b, k)?)?.iter().copied());
        }
        let t = Tensor::from_vec(data, (self.len(), 1, k, k), self.kernels.device())?
            .to_dtype(self.kernels.dtype())?;
        self.kernels.set(&t)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn kernel_arrays(&self) -> Result<Vec<Array2<f64>>> {
        let k = self.kernel_size;
        let data = self
            .kernels
            .as_tensor()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        data.chunks(k * k)
            .map(|c| Array2::from_shape_vec((k, k), c.to_vec()).map_err(|e| Error::shape(e.to_string())))
            .collect()
    }

    fn constraint_mask(&self) -> Array2<f64> {
        let k = self.kernel_size;
        Array2::from_shape_fn((k, k), |(a, b)| {
            if self.max_order.is_none_or(|m| a + b <= m) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Per-kernel `(moment matrix, target, squared error)` computed by direct summation.
    pub fn report(&self) -> Result<Vec<(MomentMatrix, MomentMatrix, f64)>> {
        self.kernel_arrays()?
            .iter()
            .zip(&self.targets)
            .map(|(w, t)| {
                let m = moment_matrix(w)?;
                let err = m.sq_distance(t, self.max_order);
                Ok((m, t.clone(), err))
            })
            .collect()
    }
}

fn validate_layout(layout: &[(usize, usize)], k: usize) -> Result<()> {
    check_kernel_size(k)?;
    if layout.is_empty() {
        return Err(Error::invalid("operator layout is empty"));
    }
    for (i, &(a, b)) in layout.iter().enumerate() {
        if a >= k || b >= k {
            return Err(Error::invalid(format!(
                "operator ({a},{b}) does not fit a {k}x{k} kernel"
            )));
        }
        if layout[..i].contains(&(a, b)) {
            return Err(Error::invalid(format!("operator ({a},{b}) listed twice")));
        }
    }
    Ok(())
}

/// Differentiable moment loss: `sum_k || mask . (M(W_k) - M_target,k) ||_F^2`.
pub fn kernel_moment_loss(bank: &KernelBank) -> Result<Tensor> {
    let k = bank.kernel_size;
    let n = bank.len();
    let w = bank.kernels.as_tensor();
    let dtype = w.dtype();
    let dev = w.device();
    let basis = moment_basis(k);
    let basis = Tensor::from_vec(basis.iter().copied().collect(), (k, k), dev)?.to_dtype(dtype)?;
    let basis_t = basis.t()?.contiguous()?;
    let wt = w.reshape((n, k, k))?.transpose(1, 2)?.contiguous()?;
    // M_k = B^T W_k^T B
    let moments = basis_t
        .unsqueeze(0)?
        .broadcast_as((n, k, k))?
        .contiguous()?
        .matmul(&wt)?
        .matmul(&basis.unsqueeze(0)?.broadcast_as((n, k, k))?.contiguous()?)?;
    let mut targets = Array3::<f64>::zeros((n, k, k));
    for (i, &(a, b)) in bank.layout.iter().enumerate() {
        targets[[i, a, b]] = 1.0;
    }
    let targets =
        Tensor::from_vec(targets.iter().copied().collect(), (n, k, k), dev)?.to_dtype(dtype)?;
    let mask = bank.constraint_mask();
    let mask = Tensor::from_vec(mask.iter().copied().collect(), (1, k, k), dev)?.to_dtype(dtype)?;
    Ok((moments - targets)?.broadcast_mul(&mask)?.sqr()?.sum_all()?)
}

/// Scalar value of [`kernel_moment_loss`] computed through direct moment summation.
pub fn kernel_moment_loss_value(bank: &KernelBank) -> Result<f64> {
    Ok(bank.report()?.iter().map(|(_, _, e)| e).sum())
}

/// Minimize the moment loss alone; returns the loss recorded before every step and after the last.
pub fn fit_bank(bank: &KernelBank, steps: usize, config: AdamConfig) -> Result<Vec<f64>> {
    let mut opt = Adam::new(config);
    let name = "bank".to_string();
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let loss = kernel_moment_loss(bank)?;
        history.push(crate::nn::scalar(&loss)?);
        let grads = loss.backward()?;
        opt.step([(&name, &bank.kernels)], &grads)?;
    }
    history.push(crate::nn::scalar(&kernel_moment_loss(bank)?)?);
    Ok(history)
}

/// Correlate `field` with every kernel of the bank (replicate padding, shape preserved).
pub fn apply_operator_bank(field: &Array2<f64>, bank: &KernelBank) -> Result<Vec<Array2<f64>>> {
    let k = bank.kernel_size;
    let (h, w) = field.dim();
    if h < k || w < k {
        return Err(Error::invalid(format!(
            "field {h}x{w} is smaller than the {k}x{k} kernels"
        )));
    }
    let r = (k / 2) as i64;
    let kernels = bank.kernel_arrays()?;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    Ok(kernels
        .iter()
        .map(|kern| {
            Array2::from_shape_fn((h, w), |(y, x)| {
                let mut acc = 0.0;
                for row in 0..k {
                    let sy = clamp(y as i64 + row as i64 - r, h);
                    for col in 0..k {
                        let sx = clamp(x as i64 + col as i64 - r, w);
                        acc += kern[[row, col]] * field[[sy, sx]];
                    }
                }
                acc
            })
        })
        .collect())
}

/// Tensor route used by the recurrent cell: every channel of `(B, C, H, W)` is filtered by every
/// operator, giving `(B, C * n_ops, H, W)` ordered channel-major (`c * n_ops + op`).
pub fn apply_bank_depthwise(h: &Tensor, bank: &KernelBank) -> Result<Tensor> {
    let (b, c, height, width) = h.dims4()?;
    let k = bank.kernel_size;
    if height < k || width < k {
        return Err(Error::invalid(format!(
            "latent {height}x{width} is smaller than the {k}x{k} kernels"
        )));
    }
    let x = h.reshape((b * c, 1, height, width))?;
    let x = pad_replicate(&x, k / 2)?;
    let y = x.conv2d(bank.kernels.as_tensor(), 0, 1, 1, 1)?;
    Ok(y.reshape((b, c * bank.len(), height, width))?)
}

/// Closed-form test fields with known derivatives of every order.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticField {
    /// `amp * exp(-((x-x0)^2 + (y-y0)^2) / (2 sigma^2))`
    GaussianBump { x0: f64, y0: f64, sigma: f64, amp: f64 },
    /// `sin(kx x + ky y + phase)`
    Sinusoid { kx: f64, ky: f64, phase: f64 },
    /// `sum coef * x^px * y^py`
    Polynomial { terms: Vec<(f64, u32, u32)> },
}

impl AnalyticField {
    /// Build from a catalog id: `gaussian [x0 y0 sigma amp]`, `sinusoid [kx ky phase]`,
    /// `polynomial [coef px py]...`.
    pub fn from_id(id: &str, params: &[f64]) -> Result<Self> {
        let arity = |n: usize| {
            if params.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!("`{id}` takes {n} parameters, got {}", params.len())))
            }
        };
        match id {
            "gaussian" => {
                arity(4)?;
                Ok(Self::GaussianBump {
                    x0: params[0],
                    y0: params[1],
                    sigma: params[2],
                    amp: params[3],
                })
            }
            "sinusoid" => {
                arity(3)?;
                Ok(Self::Sinusoid {
                    kx: params[0],
                    ky: params[1],
                    phase: params[2],
                })
            }
            "polynomial" => {
                if params.is_empty() || params.len() % 3 != 0 {
                    return Err(Error::invalid("`polynomial` takes (coef, px, py) triples"));
                }
                let terms = params
                    .chunks(3)
                    .map(|t| {
                        if t[1] < 0.0 || t[2] < 0.0 || t[1].fract() != 0.0 || t[2].fract() != 0.0 {
                            Err(Error::invalid("polynomial powers must be non-negative integers"))
                        } else {
                            Ok((t[0], t[1] as u32, t[2] as u32))
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok(Self::Polynomial { terms })
            }
            other => Err(Error::invalid(format!("unknown analytic field `{other}`"))),
        }
    }

    pub fn derivative_at(&self, a: u32, b: u32, x: f64, y: f64) -> f64 {
        match self {
            Self::GaussianBump { x0, y0, sigma, amp } => {
                let dx = (x - x0) / sigma;
                let dy = (y - y0) / sigma;
                let gx = (-0.5 * dx * dx).exp();
                let gy = (-0.5 * dy * dy).exp();
                let sign = if (a + b) % 2 == 0 { 1.0 } else { -1.0 };
                amp * sign * hermite_he(a, dx) * hermite_he(b, dy) * gx * gy
                    / sigma.powi((a + b) as i32)
            }
            Self::Sinusoid { kx, ky, phase } => {
                kx.powi(a as i32)
                    * ky.powi(b as i32)
                    * (kx * x + ky * y + phase + f64::from(a + b) * FRAC_PI_2).sin()
            }
            Self::Polynomial { terms } => terms
                .iter()
                .filter(|&&(_, px, py)| px >= a && py >= b)
                .map(|&(c, px, py)| {
                    c * falling(px, a) * falling(py, b) * x.powi((px - a) as i32) * y.powi((py - b) as i32)
                })
                .sum(),
        }
    }
}

/// Probabilists' Hermite polynomial He_n.
fn hermite_he(n: u32, z: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, z);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = z * cur - f64::from(k) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

fn falling(p: u32, a: u32) -> f64 {
    (0..a).map(|i| f64::from(p - i)).product()
}

/// Sampling grid: pixel (row, col) sits at `(x0 + col*dx, y0 + row*dy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Grid {
    pub fn square(n: usize, spacing: f64) -> Self {
        Self {
            height: n,
            width: n,
            x0: 0.0,
            y0: 0.0,
            dx: spacing,
            dy: spacing,
        }
    }

    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(row, col)| {
            f(self.x0 + col as f64 * self.dx, self.y0 + row as f64 * self.dy)
        })
    }
}

/// Exact `d^{a+b} f / dx^a dy^b` sampled on the grid.
pub fn derivative_oracle(field: &AnalyticField, a: u32, b: u32, grid: &Grid) -> Array2<f64> {
    grid.sample(|x, y| field.derivative_at(a, b, x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn central_dx3() -> Array2<f64> {
        array![[0.0, 0.0, 0.0], [-0.5, 0.0, 0.5], [0.0, 0.0, 0.0]]
    }

    fn delta(k: usize) -> Array2<f64> {
        let mut w = Array2::zeros((k, k));
        w[[k / 2, k / 2]] = 1.0;
        w
    }

    #[test]
    fn central_difference_moments() {
        let m = moment_matrix(&central_dx3()).unwrap();
        let mut expected = Array2::zeros((3, 3));
        expected[[1, 0]] = 1.0;
        for (x, e) in m.entries.iter().zip(expected.iter()) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_and_delta_kernels() {
        assert_eq!(moment_matrix(&Array2::zeros((3, 3))).unwrap(), MomentMatrix::zeros(3));
        let m = moment_matrix(&delta(5)).unwrap();
        assert_eq!(m, target_moment(0, 0, 5).unwrap());
    }

    #[test]
    fn moment_matrix_rejects_bad_kernels() {
        assert!(moment_matrix(&Array2::zeros((4, 4))).is_err());
        assert!(moment_matrix(&Array2::zeros((1, 1))).is_err());
        assert!(moment_matrix(&Array2::zeros((3, 5))).is_err());
        let mut w = Array2::zeros((3, 3));
        w[[0, 0]] = f64::NAN;
        assert!(moment_matrix(&w).is_err());
    }

    #[test]
    fn targets() {
        assert_eq!(target_moment(0, 0, 3).unwrap().get(0, 0), 1.0);
        assert_eq!(target_moment(1, 0, 3).unwrap().get(1, 0), 1.0);
        let t = target_moment(2, 2, 7).unwrap();
        assert_eq!(t.get(2, 2), 1.0);
        assert_eq!(t.entries.sum(), 1.0);
        assert!(target_moment(3, 0, 3).is_err());
        assert!(target_moment(0, 0, 4).is_err());
    }

    #[test]
    fn loss_examples() {
        let bank =
            KernelBank::from_kernels(&[delta(3)], &[(0, 0)], None, DType::F64).unwrap();
        assert_eq!(crate::nn::scalar(&kernel_moment_loss(&bank).unwrap()).unwrap(), 0.0);
        let bank = KernelBank::from_kernels(&[Array2::zeros((3, 3))], &[(1, 0)], None, DType::F64)
            .unwrap();
        assert!((crate::nn::scalar(&kernel_moment_loss(&bank).unwrap()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_moment_kernel_is_exact() {
        for &(a, b) in &DEFAULT_LAYOUT {
            let t = target_moment(a, b, 7).unwrap();
            let w = kernel_from_moments(&t).unwrap();
            assert!(moment_matrix(&w).unwrap().sq_distance(&t, None) < 1e-20);
        }
        let w = kernel_from_moments(&target_moment(1, 0, 3).unwrap()).unwrap();
        for (x, e) in w.iter().zip(central_dx3().iter()) {
            assert!((x - e).abs() < 1e-14);
        }
    }

    #[test]
    fn reset_bank_satisfies_targets() {
        let mut store = ParamStore::new(DType::F64, 9);
        let bank = KernelBank::new(&mut store, "bank", &DEFAULT_LAYOUT, 7, None, 0.5).unwrap();
        assert!(kernel_moment_loss_value(&bank).unwrap() > 1.0);
        bank.reset_to_targets().unwrap();
        assert!(kernel_moment_loss_value(&bank).unwrap() < 1e-20);
    }

    #[test]
    fn bank_layout_validation() {
        let mut store = ParamStore::new(DType::F64, 0);
        assert!(KernelBank::new(&mut store, "a", &[(0, 0), (0, 0)], 3, None, 0.1).is_err());
        assert!(KernelBank::new(&mut store, "b", &[(3, 0)], 3, None, 0.1).is_err());
        assert!(KernelBank::new(&mut store, "c", &DEFAULT_LAYOUT, 6, None, 0.1).is_err());
        let bank = KernelBank::new(&mut store, "d", &DEFAULT_LAYOUT, 7, Some(2), 0.1).unwrap();
        assert_eq!(bank.len(), 6);
        assert_eq!(bank.kernels.dims(), &[6, 1, 7, 7]);
    }

    #[test]
    fn operator_responses() {
        let bank = KernelBank::from_kernels(
            &[delta(3), central_dx3()],
            &[(0, 0), (1, 0)],
            None,
            DType::F64,
        )
        .unwrap();
        let ramp = Array2::from_shape_fn((6, 8), |(_, x)| x as f64);
        let out = apply_operator_bank(&ramp, &bank).unwrap();
        assert_eq!(out[0], ramp);
        for y in 0..6 {
            for x in 1..7 {
                assert_eq!(out[1][[y, x]], 1.0);
            }
        }
        let constant = Array2::from_elem((6, 8), 3.25);
        let out = apply_operator_bank(&constant, &bank).unwrap();
        assert!(out[1].iter().all(|&v| v == 0.0));
        assert!(apply_operator_bank(&Array2::zeros((2, 8)), &bank).is_err());
    }

    #[test]
    fn tensor_route_matches_direct_route() {
        let mut store = ParamStore::new(DType::F64, 3);
        let bank = KernelBank::new(&mut store, "bank", &DEFAULT_LAYOUT, 5, None, 0.3).unwrap();
        let field = Array2::from_shape_fn((9, 11), |(y, x)| ((x * 7 + y * 3) % 5) as f64 - 1.3);
        let direct = apply_operator_bank(&field, &bank).unwrap();
        let t = crate::nn::frames_to_tensor(&[&field], DType::F64).unwrap();
        let y = apply_bank_depthwise(&t, &bank).unwrap();
        let frames = crate::nn::tensor_to_frames(&y.reshape((6, 1, 9, 11)).unwrap()).unwrap();
        for (d, f) in direct.iter().zip(&frames) {
            for (a, b) in d.iter().zip(f.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analytic_catalog() {
        let grid = Grid::square(16, 0.3);
        let s = AnalyticField::from_id("sinusoid", &[1.0, 0.0, 0.0]).unwrap();
        let d = derivative_oracle(&s, 1, 0, &grid);
        let c = grid.sample(|x, _| x.cos());
        for (a, b) in d.iter().zip(c.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let g = AnalyticField::from_id("gaussian", &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let d = derivative_oracle(&g, 0, 0, &grid);
        let f = grid.sample(|x, y| (-(x * x + y * y) / 2.0).exp());
        for (a, b) in d.iter().zip(f.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = AnalyticField::from_id("polynomial", &[1.0, 2.0, 1.0]).unwrap();
        assert!(derivative_oracle(&p, 2, 1, &grid).iter().all(|&v| v == 2.0));
        assert!(AnalyticField::from_id("vortex", &[]).is_err());
        assert!(AnalyticField::from_id("gaussian", &[1.0]).is_err());
    }

    #[test]
    fn gaussian_derivatives_match_finite_differences() {
        let g = AnalyticField::GaussianBump {
            x0: 0.3,
            y0: -0.2,
            sigma: 0.7,
            amp: 1.5,
        };
        let e = 1e-4;
        for &(x, y) in &[(0.1, 0.2), (-0.5, 0.4), (1.0, -1.0)] {
            let fd = (g.derivative_at(1, 1, x + e, y) - g.derivative_at(1, 1, x - e, y)) / (2.0 * e);
            assert!((fd - g.derivative_at(2, 1, x, y)).abs() < 1e-6);
            let fd = (g.derivative_at(2, 0, x, y + e) - g.derivative_at(2, 0, x, y - e)) / (2.0 * e);
            assert!((fd - g.derivative_at(2, 1, x, y)).abs() < 1e-6);
        }
    }
}
