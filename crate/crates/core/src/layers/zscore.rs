//! Channel-wise z-scoring of activations without affine parameters.

use ndarray::{Array1, Array3, ArrayD, ArrayView3, ArrayViewD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result, RpuError};
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Train,
    Test,
}

#[derive(Debug, Clone)]
struct ZCache<T> {
    xhat: Array3<T>,
    inv_std: Array1<T>,
    shape: IxDyn,
}

/// Normalizes `(N, C)` inputs over the batch and `(N, C, H, W)` inputs over
/// batch and spatial positions, per channel.
#[derive(Debug, Clone)]
pub struct ZScoreNorm<T: Scalar> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub mode: NormMode,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    cache: Option<ZCache<T>>,
}

impl<T: Scalar> ZScoreNorm<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_params(channels, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_params(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if channels == 0 {
            return Err(config_err("zscore channels must be >= 1"));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(config_err(format!("zscore eps must be >= 0, got {eps}")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(config_err(format!("zscore momentum must be in [0, 1], got {momentum}")));
        }
        Ok(Self {
            channels,
            eps,
            momentum,
            mode: NormMode::Train,
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            cache: None,
        })
    }

    fn as_ncs<'a>(&self, x: &'a ArrayViewD<'a, T>) -> Result<ArrayView3<'a, T>> {
        let shape = x.shape();
        if !(shape.len() == 2 || shape.len() == 4) {
            return Err(RpuError::Shape {
                context: "zscore input rank",
                expected: "2 or 4".into(),
                got: shape.len().to_string(),
            });
        }
        if shape[1] != self.channels {
            return Err(shape_err("zscore channels", self.channels, shape[1]));
        }
        let s: usize = shape[2..].iter().product();
        x.view()
            .into_shape_with_order((shape[0], self.channels, s))
            .map_err(|_| RpuError::State("zscore input must be contiguous"))
    }

    pub fn forward(&mut self, x: ArrayViewD<'_, T>) -> Result<ArrayD<T>> {
        let shape = x.raw_dim();
        let owned;
        let x = if x.is_standard_layout() {
            x
        } else {
            owned = x.as_standard_layout().into_owned();
            owned.view()
        };
        let v = self.as_ncs(&x)?;
        let (n, c, s) = v.dim();
        let eps = T::lit(self.eps);
        let y = match self.mode {
            NormMode::Test => {
                let mut y = v.to_owned();
                for ch in 0..c {
                    let inv = (self.running_var[ch] + eps).sqrt().recip();
                    let mu = self.running_mean[ch];
                    y.index_axis_mut(Axis(1), ch).mapv_inplace(|a| (a - mu) * inv);
                }
                self.cache = None;
                y
            }
            NormMode::Train => {
                if n < 2 {
                    return Err(RpuError::Empty("zscore train batch needs at least 2 samples"));
                }
                let m = T::from_usize(n * s).expect("count fits");
                let mut xhat = v.to_owned();
                let mut inv_std = Array1::zeros(c);
                let mom = T::lit(self.momentum);
                for ch in 0..c {
                    let mut lane = xhat.index_axis_mut(Axis(1), ch);
                    let mu = lane.sum() / m;
                    let var = lane.iter().map(|a| (*a - mu) * (*a - mu)).sum::<T>() / m;
                    let inv = (var + eps).sqrt().recip();
                    lane.mapv_inplace(|a| (a - mu) * inv);
                    inv_std[ch] = inv;
                    self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mu;
                    self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * var;
                }
                self.cache = Some(ZCache {
                    xhat: xhat.clone(),
                    inv_std,
                    shape: shape.clone(),
                });
                xhat
            }
        };
        Ok(y.into_shape_with_order(shape).expect("same element count"))
    }

    /// Gradient through the batch statistics (train-mode forward required).
    pub fn backward(&mut self, d: ArrayViewD<'_, T>) -> Result<ArrayD<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(RpuError::State("zscore backward before a train-mode forward"))?;
        if d.raw_dim() != cache.shape {
            return Err(shape_err("zscore gradient", format!("{:?}", cache.shape), format!("{:?}", d.shape())));
        }
        let d = d.as_standard_layout();
        let (n, c, s) = cache.xhat.dim();
        let dv = d.view().into_shape_with_order((n, c, s)).expect("checked shape");
        let m = T::from_usize(n * s).expect("count fits");
        let mut dx = Array3::zeros((n, c, s));
        for ch in 0..c {
            let dy = dv.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = dy.sum();
            let sum_dy_xh = (&dy * &xh).sum();
            let k = cache.inv_std[ch] / m;
            let mut out = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut out).and(&dy).and(&xh).for_each(|o, &g, &h| {
                *o = k * (m * g - sum_dy - h * sum_dy_xh);
            });
        }
        Ok(dx.into_shape_with_order(cache.shape.clone()).expect("same element count"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check(x: ArrayD<f64>, d: ArrayD<f64>) {
        let mut norm = ZScoreNorm::<f64>::with_params(x.shape()[1], 1e-5, 0.1).unwrap();
        norm.forward(x.view()).unwrap();
        let dx = norm.backward(d.view()).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fp = (&norm.forward(xp.view()).unwrap() * &d).sum();
            let fm = (&norm.forward(xm.view()).unwrap() * &d).sum();
            let fd = (fp - fm) / (2.0 * h);
            let a = dx.as_slice().unwrap()[i];
            assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3), "{i}: {a} vs {fd}");
        }
    }

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn hand_computed_channel() {
        let mut norm = ZScoreNorm::<f64>::with_params(1, 0.0, 0.1).unwrap();
        let y = norm.forward(array![[1.0], [2.0], [3.0]].into_dyn().view()).unwrap();
        let e = (1.5f64).sqrt();
        for (a, b) in y.iter().zip([-e, 0.0, e]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((norm.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((norm.running_var[0] - (0.9 + 0.1 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_is_zero() {
        let mut norm = ZScoreNorm::<f64>::new(2).unwrap();
        let y = norm.forward(array![[5.0, 1.0], [5.0, -1.0]].into_dyn().view()).unwrap();
        assert_eq!(y[[0, 0]], 0.0);
        assert_eq!(y[[1, 0]], 0.0);
    }

    #[test]
    fn standardized_input_unchanged_up_to_eps() {
        let mut norm = ZScoreNorm::<f64>::new(1).unwrap();
        let x = array![[-1.0], [1.0], [-1.0], [1.0]].into_dyn();
        let y = norm.forward(x.view()).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_statistics_after_norm() {
        let x = random(&[6, 3, 4, 5], 1);
        let mut norm = ZScoreNorm::<f64>::new(3).unwrap();
        let y = norm.forward(x.view()).unwrap();
        for ch in 0..3 {
            let lane = y.index_axis(Axis(1), ch);
            let mean = lane.mean().unwrap();
            let var = lane.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() <= 1e-6);
            assert!((1.0 - 1e-4..=1.0).contains(&var), "{var}");
        }
    }

    #[test]
    fn test_mode_uses_running_stats() {
        let mut norm = ZScoreNorm::<f64>::with_params(1, 0.0, 1.0).unwrap();
        norm.forward(array![[0.0], [4.0]].into_dyn().view()).unwrap();
        norm.mode = NormMode::Test;
        let y = norm.forward(array![[2.0]].into_dyn().view()).unwrap();
        assert_eq!(y[[0, 0]], 0.0);
        let y = norm.forward(array![[4.0]].into_dyn().view()).unwrap();
        assert!((y[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let mut norm = ZScoreNorm::<f64>::new(2).unwrap();
        assert!(norm.backward(Array::zeros(IxDyn(&[2, 2])).view()).is_err());
        assert!(norm.forward(Array::zeros(IxDyn(&[1, 2])).view()).is_err());
        assert!(norm.forward(Array::zeros(IxDyn(&[3, 3])).view()).is_err());
        assert!(norm.forward(Array::zeros(IxDyn(&[3, 2, 2])).view()).is_err());
        assert!(ZScoreNorm::<f64>::with_params(2, 1e-5, 2.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_2d() {
        fd_check(random(&[3, 4], 2), random(&[3, 4], 3));
    }

    #[test]
    fn gradient_matches_finite_differences_4d() {
        fd_check(random(&[2, 2, 3, 2], 4), random(&[2, 2, 3, 2], 5));
    }

    #[test]
    fn dx_sums_to_zero_per_channel() {
        let x = random(&[5, 3], 6);
        let mut norm = ZScoreNorm::<f64>::new(3).unwrap();
        norm.forward(x.view()).unwrap();
        let dx = norm.backward(random(&[5, 3], 7).view()).unwrap();
        for s in dx.sum_axis(Axis(0)).iter() {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_gradient_on_symmetric_input_is_antisymmetric() {
        // uniform d is projected out entirely, which is the antisymmetric
        // (and trivially zero) response
        let x = array![[-2.0], [-1.0], [1.0], [2.0]].into_dyn();
        let mut norm = ZScoreNorm::<f64>::new(1).unwrap();
        norm.forward(x.view()).unwrap();
        let dx = norm.backward(Array::from_elem(IxDyn(&[4, 1]), 0.7).view()).unwrap();
        for i in 0..2 {
            assert!((dx[[i, 0]] + dx[[3 - i, 0]]).abs() < 1e-12);
        }
        // a linear ramp d on the same input gives an antisymmetric dx
        let d = array![[-0.3], [-0.1], [0.1], [0.3]].into_dyn();
        norm.forward(x.view()).unwrap();
        let dx = norm.backward(d.view()).unwrap();
        for i in 0..2 {
            assert!((dx[[i, 0]] + dx[[3 - i, 0]]).abs() < 1e-12);
        }
    }
}
