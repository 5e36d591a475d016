//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is built from.
//!
//! All reductions accumulate in a fixed order (ascending index along the
//! reduced axis, starting from zero). Parallel execution only splits work
//! across independent outputs, so results never depend on the [`Exec`] policy.

use std::fmt::Debug;
use std::iter::Sum;

use half::f16;
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Gaussian(0, std) entries drawn in row-major order.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gaussian(0.0, std)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        same_shape(self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    /// Add a bias vector to every row of the last axis.
    pub fn add_row_bias(&mut self, bias: &Self) -> Result<()> {
        let w = self.last_dim();
        if bias.len() != w {
            return Err(Error::Dimension(format!(
                "bias of length {} for rows of width {w}",
                bias.len()
            )));
        }
        for row in self.data.chunks_mut(w) {
            for (x, &b) in row.iter_mut().zip(&bias.data) {
                *x = *x + b;
            }
        }
        Ok(())
    }

    /// Sum over all rows of the last axis, giving a vector of length `last_dim`.
    pub fn column_sums(&self) -> Self {
        let w = self.last_dim();
        let mut out = vec![T::zero(); w];
        for row in self.data.chunks(w) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        Self {
            shape: vec![w],
            data: out,
        }
    }
}

fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// `a [.., n, k] × b [k, p] → [.., n, p]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_with(a, b, Exec::default())
}

pub fn matmul_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, exec: Exec) -> Result<Tensor<T>> {
    if a.rank() < 1 || b.rank() != 2 {
        return Err(Error::Dimension(format!(
            "matmul needs [..,n,k] x [k,p], got {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let k = a.last_dim();
    let (kb, p) = (b.shape[0], b.shape[1]);
    if k != kb {
        return Err(Error::Dimension(format!(
            "inner extents differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let rows = a.len().checked_div(k).unwrap_or(0);
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = p;
    let mut out = vec![T::zero(); rows * p];
    let (ad, bd) = (&a.data, &b.data);
    exec.for_work(rows * k * p).for_each_chunk(&mut out, p, |r, orow| {
        let arow = &ad[r * k..(r + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    Tensor::new(shape, out)
}

/// `aᵀ b` for row-stacked operands: `a [R, k]`, `b [R, p]` → `[k, p]`,
/// summing over `R` in ascending order. Leading axes are flattened into `R`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, p) = (a.last_dim(), b.last_dim());
    let rows = if k == 0 { 0 } else { a.len() / k };
    if rows * p != b.len() {
        return Err(Error::Dimension(format!(
            "row counts differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); k * p];
    let (ad, bd) = (&a.data, &b.data);
    Exec::default()
        .for_work(rows * k * p)
        .for_each_chunk(&mut out, p, |i, orow| {
            for r in 0..rows {
                let av = ad[r * k + i];
                let brow = &bd[r * p..(r + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        });
    Tensor::new(vec![k, p], out)
}

/// `a bᵀ`: `a [.., p]`, `b [k, p]` → `[.., k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.rank() != 2 || a.last_dim() != b.shape[1] {
        return Err(Error::Dimension(format!(
            "matmul_nt needs [..,p] x [k,p], got {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (k, p) = (b.shape[0], b.shape[1]);
    let rows = if p == 0 { 0 } else { a.len() / p };
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = k;
    let mut out = vec![T::zero(); rows * k];
    let (ad, bd) = (&a.data, &b.data);
    Exec::default()
        .for_work(rows * k * p)
        .for_each_chunk(&mut out, k, |r, orow| {
            let arow = &ad[r * p..(r + 1) * p];
            for (i, o) in orow.iter_mut().enumerate() {
                let brow = &bd[i * p..(i + 1) * p];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc = acc + x * y;
                }
                *o = acc;
            }
        });
    Tensor::new(shape, out)
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<T> {
    /// (x − μ) / √(σ² + eps), before the affine transform.
    pub normalized: Tensor<T>,
    /// 1 / √(σ² + eps) per row.
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Layer norm over the last axis. Mean and (population) variance are
/// computed in two sequential passes.
pub fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let h = x.last_dim();
    if gamma.len() != h || beta.len() != h {
        return Err(Error::Dimension(format!(
            "layer norm width {h}, affine lengths {} / {}",
            gamma.len(),
            beta.len()
        )));
    }
    let rows = if h == 0 { 0 } else { x.len() / h };
    let hn = T::of(h as f64);
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * h..(r + 1) * h];
        let mut sum = T::zero();
        for &v in row {
            sum = sum + v;
        }
        let mean = sum / hn;
        let mut sq = T::zero();
        for &v in row {
            let d = v - mean;
            sq = sq + d * d;
        }
        let rstd = T::one() / (sq / hn + eps).sqrt();
        inv_std.push(rstd);
        for j in 0..h {
            let xh = (row[j] - mean) * rstd;
            normalized[r * h + j] = xh;
            out[r * h + j] = gamma.data[j] * xh + beta.data[j];
        }
    }
    Ok((
        Tensor::new(x.shape.clone(), out)?,
        NormStats {
            normalized: Tensor::new(x.shape.clone(), normalized)?,
            inv_std,
        },
    ))
}

/// Backward of [`layer_norm_with_stats`].
/// Returns `(d_x, d_gamma, d_beta)`.
pub fn layer_norm_backward<T: Scalar>(
    d_out: &Tensor<T>,
    stats: &NormStats<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    same_shape(d_out, &stats.normalized)?;
    let h = d_out.last_dim();
    let rows = stats.inv_std.len();
    let hn = T::of(h as f64);
    let mut dx = vec![T::zero(); d_out.len()];
    let mut dgamma = vec![T::zero(); h];
    let mut dbeta = vec![T::zero(); h];
    for r in 0..rows {
        let dy = &d_out.data[r * h..(r + 1) * h];
        let xh = &stats.normalized.data[r * h..(r + 1) * h];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..h {
            let g = dy[j] * gamma.data[j];
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * xh[j];
            dgamma[j] = dgamma[j] + dy[j] * xh[j];
            dbeta[j] = dbeta[j] + dy[j];
        }
        let rstd = stats.inv_std[r];
        for j in 0..h {
            let g = dy[j] * gamma.data[j];
            dx[r * h + j] = rstd * (g - sum_g / hn - xh[j] * sum_gx / hn);
        }
    }
    Ok((
        Tensor::new(d_out.shape.clone(), dx)?,
        Tensor::new(vec![h], dgamma)?,
        Tensor::new(vec![h], dbeta)?,
    ))
}

/// √(2/π), the GELU tanh-approximation scale.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the GELU tanh approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Elementwise nonlinearity used by adapters and the backbone FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn to_u8(self) -> u8 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let c = T::of(GELU_SQRT_2_OVER_PI);
                let k = T::of(GELU_CUBIC);
                let half = T::of(0.5);
                half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let c = T::of(GELU_SQRT_2_OVER_PI);
                let k = T::of(GELU_CUBIC);
                let half = T::of(0.5);
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + T::of(3.0) * k * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            }
        }
    }

    pub fn forward<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Softmax over each row of the last axis, max-subtracted.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 1 {
        return Err(Error::Dimension("softmax needs rank >= 1".into()));
    }
    let w = x.last_dim();
    let mut out = x.data.clone();
    if w > 0 {
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Mean over the sequence axis: `[B, S, H] → [B, H]`.
pub fn mean_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!(
            "mean_pool needs [B,S,H], got {:?}",
            x.shape
        )));
    }
    let (b, s, h) = (x.shape[0], x.shape[1], x.shape[2]);
    if s == 0 {
        return Err(Error::Empty("mean_pool over zero positions".into()));
    }
    let sn = T::of(s as f64);
    let mut out = vec![T::zero(); b * h];
    for bi in 0..b {
        let acc = &mut out[bi * h..(bi + 1) * h];
        for si in 0..s {
            let row = &x.data[(bi * s + si) * h..(bi * s + si + 1) * h];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a / sn;
        }
    }
    Tensor::new(vec![b, h], out)
}

/// Largest finite binary16 value.
pub const F16_MAX: f32 = 65504.0;

/// Convert one scalar to binary16 (round-to-nearest-even). Values beyond the
/// finite binary16 range saturate to ±65504 instead of becoming infinite.
pub fn to_f16(x: f32) -> f16 {
    f16::from_f32(x.clamp(-F16_MAX, F16_MAX))
}

/// Round-trip every element through binary16.
pub fn f16_roundtrip<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::of(to_f16(v.to_f32().unwrap_or(0.0)).to_f64()))
}

/// Central finite differences of a scalar function of a parameter vector.
pub fn finite_diff_grad<F>(f: F, theta: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> f64 + Sync + Send,
{
    finite_diff_grad_with(f, theta, h, Exec::default())
}

/// [`finite_diff_grad`] with an explicit execution policy; coordinates are
/// evaluated independently.
pub fn finite_diff_grad_with<F>(f: F, theta: &Tensor<f64>, h: f64, exec: Exec) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> f64 + Sync + Send,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Input(format!("finite-difference step must be positive, got {h}")));
    }
    let grads = exec.map(theta.len(), |i| {
        let mut probe = theta.clone();
        let x = probe.data[i];
        probe.data[i] = x + h;
        let up = f(&probe);
        probe.data[i] = x - h;
        let down = f(&probe);
        (up - down) / (2.0 * h)
    });
    Tensor::new(theta.shape.clone(), grads)
}
