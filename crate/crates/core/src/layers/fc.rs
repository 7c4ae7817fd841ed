use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Result, RpuError};
use crate::scalar::Scalar;

use super::backend::MatrixBackend;

/// Fully-connected layer on `(batch, features)` activations. The optional
/// bias is digital and trained with plain SGD.
#[derive(Debug, Clone)]
pub struct FullyConnected<T: Scalar> {
    pub backend: MatrixBackend<T>,
    pub bias: Option<Array1<T>>,
    input: Option<Array2<T>>,
    grad_out: Option<Array2<T>>,
}

impl<T: Scalar> FullyConnected<T> {
    pub fn new(backend: MatrixBackend<T>) -> Self {
        Self {
            backend,
            bias: None,
            input: None,
            grad_out: None,
        }
    }

    /// Adds a zero-initialised digital bias.
    pub fn with_bias(mut self) -> Self {
        self.bias = Some(Array1::zeros(self.backend.out_dim()));
        self
    }

    pub fn in_features(&self) -> usize {
        self.backend.in_dim()
    }

    pub fn out_features(&self) -> usize {
        self.backend.out_dim()
    }

    /// Per-sample forward products. The input is kept for the update when
    /// `cache` is set.
    pub fn forward(&mut self, x: ArrayView2<'_, T>, cache: bool) -> Result<Array2<T>> {
        let mut y = self.backend.forward_rows(x)?;
        if let Some(b) = &self.bias {
            y += b;
        }
        self.input = cache.then(|| x.to_owned());
        Ok(y)
    }

    /// Transposed products `out_scale · Wᵀ d`. The output gradient is kept
    /// for the update.
    pub fn backward(&mut self, d: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let dx = self.backend.backward_rows(d)?;
        self.grad_out = Some(d.to_owned());
        Ok(dx)
    }

    /// Records the output gradient without propagating it further (first
    /// layer of a network).
    pub fn set_output_grad(&mut self, d: Array2<T>) {
        self.grad_out = Some(d);
    }

    /// Update from explicit inputs and output gradients, rows in order.
    pub fn update(&mut self, x: ArrayView2<'_, T>, d: ArrayView2<'_, T>, lr: f64) -> Result<()> {
        self.backend.update_rows(x, d, lr)?;
        update_bias(&mut self.bias, d, lr);
        Ok(())
    }

    /// Update from the cached forward input and backward gradient.
    pub fn update_cached(&mut self, lr: f64) -> Result<()> {
        let x = self
            .input
            .take()
            .ok_or(RpuError::State("fc update without a cached forward input"))?;
        let d = self
            .grad_out
            .take()
            .ok_or(RpuError::State("fc update without a cached output gradient"))?;
        self.update(x.view(), d.view(), lr)
    }
}

/// `b ← b - lr Σ_k d_k` over the rows of `d`.
pub(crate) fn update_bias<T: Scalar>(bias: &mut Option<Array1<T>>, d: ArrayView2<'_, T>, lr: f64) {
    if let Some(b) = bias {
        b.scaled_add(T::lit(-lr), &d.sum_axis(Axis(0)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::backend::{AnalogMatrix, FloatMatrix};
    use crate::management::IoManagement;
    use crate::pulse::PulseConfig;
    use crate::remap::{make_remap, RemapConfig};
    use crate::tile::{AnalogTile, ConverterConfig, DeviceConfig};
    use ndarray::{array, Array2};

    fn exact() -> ConverterConfig {
        ConverterConfig {
            dac_bits: 52,
            dac_bound: 1.0,
            adc_bits: 52,
            adc_bound: 100.0,
        }
    }

    fn analog(w: &Array2<f64>, remap: RemapConfig, conv: ConverterConfig, noise: f64, seed: u64) -> FullyConnected<f64> {
        let device = DeviceConfig {
            out_noise_std: noise,
            ..DeviceConfig::baseline()
        };
        let mut tile = AnalogTile::new(w.nrows(), w.ncols(), device, conv, seed).unwrap();
        tile.set_weights(w.view()).unwrap();
        FullyConnected::new(MatrixBackend::Analog(AnalogMatrix::new(
            tile,
            remap,
            PulseConfig::baseline(),
            IoManagement::enabled(),
        )))
    }

    #[test]
    fn identity_layer() {
        let w = array![[0.5, 0.0], [0.0, 0.5]];
        let mut fc = analog(&w, RemapConfig::disabled(2, 0.6).unwrap(), exact(), 0.0, 1);
        let x = array![[0.4, -2.0], [1.0, 0.25]];
        let y = fc.forward(x.view(), false).unwrap();
        for (a, b) in y.iter().zip((&x * 0.5).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_batch_gives_zero() {
        let w = array![[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]];
        let mut fc = analog(&w, RemapConfig::disabled(3, 0.6).unwrap(), ConverterConfig::baseline(), 0.06, 1);
        let y = fc.forward(Array2::zeros((4, 3)).view(), true).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let dx = fc.backward(Array2::zeros((4, 2)).view()).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_dense_oracle_within_quantization() {
        let w = array![[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]];
        let remap = make_remap(0.5, 3, 0.6, true).unwrap();
        let mut fc = analog(&w, remap, ConverterConfig::baseline(), 0.0, 1);
        let x = array![[0.3, -0.9, 0.45]];
        let y = fc.forward(x.view(), false).unwrap();
        let oracle = x.dot(&w.t()) * remap.out_scale;
        // α = 0.9: DAC error ≤ Σ|w| Δ_dac/2 per row, ADC error ≤ Δ_adc/2
        let dac = 1.0 / 63.0 / 2.0;
        let adc = 24.0 / 510.0 / 2.0;
        for j in 0..2 {
            let l1: f64 = w.row(j).iter().map(|v| v.abs()).sum();
            let bound = remap.out_scale * 0.9 * (l1 * dac + adc);
            assert!((y[[0, j]] - oracle[[0, j]]).abs() <= bound);
        }
    }

    #[test]
    fn small_errors_survive_backward_pass() {
        // With noise management a 1e-6-scale error vector has the same
        // relative error as a unit-scale one.
        let w = array![[0.3, -0.2, 0.5], [0.1, 0.45, -0.35], [-0.2, 0.1, 0.25]];
        let d = array![[0.8, -0.3, 0.5]];
        let oracle = d.dot(&w);
        let rel = |dx: &Array2<f64>, scale: f64| {
            let err: f64 = dx.iter().zip(oracle.iter()).map(|(a, b)| (a / scale - b).powi(2)).sum();
            (err / oracle.iter().map(|b| b * b).sum::<f64>()).sqrt()
        };
        let avg = |scale: f64, io: IoManagement| {
            let mut fc = analog(&w, RemapConfig::disabled(3, 0.6).unwrap(), ConverterConfig::baseline(), 0.06, 3);
            if let MatrixBackend::Analog(a) = &mut fc.backend {
                a.io = io;
            }
            let mut acc = 0.0;
            for _ in 0..200 {
                let dx = fc.backward((&d * scale).view()).unwrap();
                acc += rel(&dx, scale);
            }
            acc / 200.0
        };
        let unit = avg(1.0, IoManagement::enabled());
        let tiny = avg(1e-6, IoManagement::enabled());
        let tiny_unmanaged = avg(1e-6, IoManagement::disabled());
        assert!(tiny < 1.5 * unit, "tiny {tiny} vs unit {unit}");
        assert!(tiny_unmanaged > 0.99, "unmanaged {tiny_unmanaged}");
    }

    #[test]
    fn zero_error_leaves_weights() {
        let w = array![[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]];
        let mut fc = analog(&w, RemapConfig::disabled(3, 0.6).unwrap(), ConverterConfig::baseline(), 0.06, 1);
        fc.update(array![[1.0, 2.0, 3.0]].view(), array![[0.0, 0.0]].view(), 0.1).unwrap();
        assert_eq!(fc.backend.as_analog().unwrap().tile.read_weights(), w);
    }

    #[test]
    fn repeated_updates_saturate() {
        let w = Array2::zeros((1, 1));
        let mut fc = analog(&w, RemapConfig::disabled(1, 0.6).unwrap(), ConverterConfig::baseline(), 0.0, 1);
        for _ in 0..400 {
            fc.update(array![[1.0]].view(), array![[-1.0]].view(), 0.05).unwrap();
        }
        let v = fc.backend.as_analog().unwrap().tile.weights()[[0, 0]];
        assert!(v <= 0.6 && v > 0.59, "{v}");
    }

    #[test]
    fn digital_bias_shifts_output_and_learns() {
        let mut fc = FullyConnected::new(MatrixBackend::Float(FloatMatrix {
            weights: array![[1.0f64, 0.0], [0.0, 1.0]],
        }))
        .with_bias();
        fc.bias = Some(array![0.5, -1.0]);
        let y = fc.forward(array![[1.0, 2.0]].view(), true).unwrap();
        assert_eq!(y, array![[1.5, 1.0]]);
        fc.set_output_grad(array![[1.0, -2.0], [3.0, 0.0]]);
        fc.input = Some(array![[0.0, 0.0], [0.0, 0.0]]);
        fc.update_cached(0.5).unwrap();
        assert_eq!(fc.bias.unwrap(), array![0.5 - 2.0, -1.0 + 1.0]);
    }

    #[test]
    fn float_update_is_summed_gradient() {
        let mut fc = FullyConnected::new(MatrixBackend::Float(FloatMatrix {
            weights: array![[0.0f64, 0.0]],
        }));
        fc.update(array![[1.0, 2.0], [3.0, -1.0]].view(), array![[0.5], [1.0]].view(), 0.1)
            .unwrap();
        let MatrixBackend::Float(f) = &fc.backend else { unreachable!() };
        // Σ d xᵀ = [0.5 + 3, 1 - 1]
        assert!((f.weights[[0, 0]] + 0.35).abs() < 1e-15);
        assert!(f.weights[[0, 1]].abs() < 1e-15);
    }

    #[test]
    fn cached_update_requires_forward() {
        let mut fc = FullyConnected::new(MatrixBackend::Float(FloatMatrix {
            weights: array![[0.0f64, 0.0]],
        }));
        assert!(fc.update_cached(0.1).is_err());
    }
}
