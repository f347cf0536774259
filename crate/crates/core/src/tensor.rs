//! Dense real tensors, the seeded generator every stochastic step draws
//! from, and the central-difference gradient oracle used by the layer tests.

use std::fmt;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Default perturbation for [`finite_diff_grad`].
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Dense row-major `f64` array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = checked_len(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// One-dimensional tensor over `data`.
    ///
    /// Panics if `data` is empty.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = checked_len(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Self {
            shape: vec![n],
            data: self.data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape(format!(
                "dot of {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "expected {shape:?}, found {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Channels/height/width of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::shape(format!(
                "expected a [C,H,W] tensor, found {other:?}"
            ))),
        }
    }

    /// Concatenates rank-3 tensors of equal spatial extent along channels.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| Error::shape("no tensors to concatenate"))?
            .chw()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for part in parts {
            let (c, ph, pw) = part.chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "spatial extent {ph}x{pw} does not match {h}x{w}"
                )));
            }
            channels += c;
            data.extend_from_slice(part.data());
        }
        Tensor::from_vec(&[channels, h, w], data)
    }

    /// Channel slice `[start, start + count)` of a rank-3 tensor.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if start + count > c || count == 0 {
            return Err(Error::shape(format!(
                "channel range {start}..{} outside {c} channels",
                start + count
            )));
        }
        let plane = h * w;
        Tensor::from_vec(
            &[count, h, w],
            self.data[start * plane..(start + count) * plane].to_vec(),
        )
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}...", &self.data[..SHOWN])
        }
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Seeded counter-based generator.
///
/// Each `(seed, stream)` pair addresses an independent keystream, so work
/// split across threads can draw from its own stream and stay reproducible.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a sub-task, derived from this one's seed.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::with_stream(self.seed, stream.wrapping_add(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// He initialization: i.i.d. `N(0, 2 / fan_in)`.
pub fn init_he(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::Dimension("fan_in must be at least 1".into()));
    }
    let mut t = Tensor::zeros(shape)?;
    let std = (2.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = std * rng.normal();
    }
    Ok(t)
}

/// Tensor of i.i.d. uniform values in `[low, high)`.
pub fn uniform_tensor(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Result<Tensor> {
    let mut t = Tensor::zeros(shape)?;
    for v in t.data_mut() {
        *v = rng.uniform_in(low, high);
    }
    Ok(t)
}

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Dimension(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        grad.data[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest componentwise relative error between an analytic and a numerical
/// gradient. Components where both are below `floor` in magnitude are
/// compared on an absolute scale of `floor`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::zeros(&[2, 0]),
            Err(Error::InvalidShape(_))
        ));
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn he_init_statistics() {
        let mut rng = Rng::new(7);
        let t = init_he(&[4, 4], 16, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0f64 / 16.0).sqrt();
        assert!(mean.abs() < 0.5, "mean {mean}");
        assert!((std - target).abs() < 0.5 * target, "std {std}");
    }

    #[test]
    fn he_init_degenerate_and_errors() {
        let mut rng = Rng::new(1);
        let t = init_he(&[1], 1, &mut rng).unwrap();
        assert!(t.data()[0].is_finite());
        assert!(matches!(
            init_he(&[0, 3], 4, &mut rng),
            Err(Error::InvalidShape(_))
        ));
        assert!(init_he(&[3], 0, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = init_he(&[3, 5], 15, &mut Rng::new(99)).unwrap();
        let b = init_he(&[3, 5], 15, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
        let c = init_he(&[3, 5], 15, &mut Rng::new(100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn streams_are_independent() {
        let mut a = Rng::with_stream(5, 0);
        let mut b = Rng::with_stream(5, 1);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut c = Rng::new(5).fork(3);
        let mut d = Rng::new(5).fork(3);
        assert_eq!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn fd_of_square() {
        let x = Tensor::vector(vec![3.0]);
        let g = finite_diff_grad(|t| Ok(t.norm_sq()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = finite_diff_grad(|_| Ok(4.2), &x, DEFAULT_FD_EPS).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::vector(vec![0.3, -7.0, 12.5, 0.0]);
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, DEFAULT_FD_EPS).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn fd_reports_non_finite_index() {
        let x = Tensor::vector(vec![1.0, 0.0]);
        let err = finite_diff_grad(
            |t| Ok(if t.data()[1] != 0.0 { f64::NAN } else { 0.0 }),
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
    }

    #[test]
    fn concat_and_slice_channels() {
        let a = Tensor::filled(&[1, 2, 2], 1.0).unwrap();
        let b = Tensor::filled(&[2, 2, 2], 2.0).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(c.channel_slice(1, 2).unwrap(), b);
        assert!(c.channel_slice(2, 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fd_of_linear_functional_is_coefficients(
                coeffs in proptest::collection::vec(-1.0f64..1.0, 1..12),
                seed in any::<u64>(),
            ) {
                let c = Tensor::vector(coeffs.clone());
                let mut rng = crate::tensor::Rng::new(seed);
                let x = uniform_tensor(&[coeffs.len()], -1.0, 1.0, &mut rng).unwrap();
                let g = finite_diff_grad(|t| t.dot(&c), &x, DEFAULT_FD_EPS).unwrap();
                for (gi, ci) in g.data().iter().zip(&coeffs) {
                    prop_assert!((gi - ci).abs() < 1e-9);
                }
            }
        }
    }
}
