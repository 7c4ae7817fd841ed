//! A single resistive crossbar array.
//!
//! Weights are held in physical weight units inside `[-w_bound, w_bound]` at
//! full floating-point precision. The finite number of device states is not
//! imposed by rounding the storage; it emerges from the pulsed update, where
//! every coincident pulse moves a weight by one noisy step of mean `dw_min`.
//!
//! All analog circuit noise is referred to the output lines: every
//! matrix-vector product adds fresh Gaussian noise of standard deviation
//! `out_noise_std` to each output. The DAC and ADC are modelled separately
//! by [`quantize`] and applied by the peripheral management layer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;

/// Physical parameters of the resistive devices of one array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    /// Mean weight change of a single coincident pulse.
    pub dw_min: f64,
    /// Standard deviation of a single step, relative to `dw_min`.
    pub dw_min_std_ratio: f64,
    /// Symmetric hard bound; weights live in `[-w_bound, w_bound]`.
    pub w_bound: f64,
    /// Standard deviation of the additive output noise.
    pub out_noise_std: f64,
}

impl DeviceConfig {
    /// The baseline device: 1200 states, 30% step variability, σ = 0.06.
    pub const fn baseline() -> Self {
        Self {
            dw_min: 0.001,
            dw_min_std_ratio: 0.3,
            w_bound: 0.6,
            out_noise_std: 0.06,
        }
    }

    /// Baseline with four times the states (4800).
    pub const fn states_4x() -> Self {
        Self {
            dw_min: 0.00025,
            ..Self::baseline()
        }
    }

    /// Baseline bounds and noise with 12000 states.
    pub const fn states_12k() -> Self {
        Self {
            dw_min: 0.0001,
            ..Self::baseline()
        }
    }

    pub fn with_dw_min(self, dw_min: f64) -> Self {
        Self { dw_min, ..self }
    }

    pub fn noise_free(self) -> Self {
        Self {
            out_noise_std: 0.0,
            ..self
        }
    }

    /// `2 * w_bound / dw_min` without rounding.
    pub fn num_states(&self) -> f64 {
        2.0 * self.w_bound / self.dw_min
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.dw_min,
            self.dw_min_std_ratio,
            self.w_bound,
            self.out_noise_std,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(config_err("device parameters must be finite"));
        }
        if self.dw_min <= 0.0 {
            return Err(config_err(format!("dw_min must be > 0, got {}", self.dw_min)));
        }
        if self.w_bound <= 0.0 {
            return Err(config_err(format!("w_bound must be > 0, got {}", self.w_bound)));
        }
        if self.dw_min_std_ratio < 0.0 {
            return Err(config_err("dw_min_std_ratio must be >= 0"));
        }
        if self.out_noise_std < 0.0 {
            return Err(config_err("out_noise_std must be >= 0"));
        }
        if self.num_states() < 2.0 {
            return Err(config_err(format!(
                "device has {} states, need at least 2",
                self.num_states()
            )));
        }
        Ok(())
    }
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

/// Number of device states `2 * w_bound / dw_min`, rounded to the nearest
/// integer (the quotient is rarely exact in binary floating point).
pub fn count_states(device: &DeviceConfig) -> u64 {
    device.num_states().round() as u64
}

/// Resolution and clipping range of the input (DAC) and output (ADC)
/// converters of an array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConverterConfig {
    pub dac_bits: u32,
    pub dac_bound: f64,
    pub adc_bits: u32,
    pub adc_bound: f64,
}

/// Highest supported converter resolution; finer grids are below `f64`
/// precision anyway.
pub const MAX_CONVERTER_BITS: u32 = 52;

impl ConverterConfig {
    /// 7-bit DAC on ±1 and 9-bit ADC on ±12.
    pub const fn baseline() -> Self {
        Self {
            dac_bits: 7,
            dac_bound: 1.0,
            adc_bits: 9,
            adc_bound: 12.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [("dac_bits", self.dac_bits), ("adc_bits", self.adc_bits)] {
            if bits == 0 || bits > MAX_CONVERTER_BITS {
                return Err(config_err(format!(
                    "{name} must be in 1..={MAX_CONVERTER_BITS}, got {bits}"
                )));
            }
        }
        for (name, bound) in [("dac_bound", self.dac_bound), ("adc_bound", self.adc_bound)] {
            if !(bound > 0.0 && bound.is_finite()) {
                return Err(config_err(format!("{name} must be finite and > 0, got {bound}")));
            }
        }
        Ok(())
    }

    pub fn dac_step(&self) -> f64 {
        quantization_step(self.dac_bits, self.dac_bound)
    }

    pub fn adc_step(&self) -> f64 {
        quantization_step(self.adc_bits, self.adc_bound)
    }
}

impl Default for ConverterConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

/// Number of non-zero levels on each side of zero: `2^(bits-1) - 1`.
fn half_levels(bits: u32) -> u64 {
    debug_assert!(bits >= 1 && bits <= 63);
    (1u64 << (bits - 1)) - 1
}

/// Step `2 * bound / (2^bits - 2)` of the symmetric mid-tread quantizer.
/// A 1-bit converter has the single level 0 and an infinite step.
pub fn quantization_step(bits: u32, bound: f64) -> f64 {
    let half = half_levels(bits);
    if half == 0 {
        f64::INFINITY
    } else {
        bound / half as f64
    }
}

/// Symmetric uniform mid-tread quantizer with `2^bits - 1` levels on
/// `[-bound, bound]`.
///
/// Zero and `±bound` are represented exactly. Inputs beyond the range are
/// clipped silently and ties round away from zero.
#[inline]
pub fn quantize<T: Scalar>(x: T, bits: u32, bound: T) -> T {
    let half = half_levels(bits);
    if half == 0 {
        return T::zero();
    }
    let half = T::lit(half as f64);
    let clipped = x.max(-bound).min(bound);
    // `round` on floats breaks ties away from zero.
    let level = (clipped * half / bound).round();
    // the outermost level can round one ulp past the bound
    (level * bound / half).max(-bound).min(bound)
}

/// `true` iff any output reaches the ADC bound (boundary counts as saturated).
pub fn detect_saturation<T: Scalar>(y: ArrayView1<'_, T>, adc_bound: T) -> bool {
    y.iter().any(|v| v.abs() >= adc_bound)
}

/// One crossbar array: weights, converters, and its own random stream.
///
/// A tile is single-writer. Output noise and pulse generation draw from the
/// same ChaCha stream in call order, so a tile driven through the same call
/// sequence from the same seed reproduces bit for bit.
#[derive(Debug, Clone)]
pub struct AnalogTile<T: Scalar> {
    weights: Array2<T>,
    device: DeviceConfig,
    converters: ConverterConfig,
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> AnalogTile<T> {
    /// A zero-initialised `d_out × d_in` tile.
    pub fn new(
        d_out: usize,
        d_in: usize,
        device: DeviceConfig,
        converters: ConverterConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::with_stream(d_out, d_in, device, converters, seed, 0)
    }

    /// Like [`AnalogTile::new`] but on an independent ChaCha stream of the
    /// same seed, so every tile of a network can share one run seed.
    pub fn with_stream(
        d_out: usize,
        d_in: usize,
        device: DeviceConfig,
        converters: ConverterConfig,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        device.validate()?;
        converters.validate()?;
        if d_out == 0 || d_in == 0 {
            return Err(config_err(format!("tile shape {d_out}x{d_in} is empty")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self {
            weights: Array2::zeros((d_out, d_in)),
            device,
            converters,
            seed,
            stream,
            rng,
        })
    }

    pub fn d_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.dim()
    }

    pub fn device(&self) -> &DeviceConfig {
        &self.device
    }

    pub fn converters(&self) -> &ConverterConfig {
        &self.converters
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn w_bound(&self) -> T {
        T::lit(self.device.w_bound)
    }

    /// Borrow of the stored weights. Physical hardware would not offer a
    /// noiseless read; this exists for diagnostics and tests.
    pub fn weights(&self) -> ArrayView2<'_, T> {
        self.weights.view()
    }

    pub fn read_weights(&self) -> Array2<T> {
        self.weights.clone()
    }

    /// Overwrites the weights, clipping every element into the bounds.
    pub fn set_weights(&mut self, w: ArrayView2<'_, T>) -> Result<()> {
        if w.dim() != self.weights.dim() {
            return Err(shape_err("set_weights", self.weights.dim(), w.dim()));
        }
        let b = self.w_bound();
        self.weights.zip_mut_with(&w, |dst, &src| *dst = src.max(-b).min(b));
        Ok(())
    }

    /// Raw analog product `W x + ξ` (or `Wᵀ x + ξ` when `transposed`).
    ///
    /// `x` is expected to be DAC-quantized already; no ADC is applied.
    pub fn analog_mvm(&mut self, x: ArrayView1<'_, T>, transposed: bool) -> Result<Array1<T>> {
        let mut y = if transposed {
            if x.len() != self.d_out() {
                return Err(shape_err("analog_mvm (transposed)", self.d_out(), x.len()));
            }
            self.weights.t().dot(&x)
        } else {
            if x.len() != self.d_in() {
                return Err(shape_err("analog_mvm", self.d_in(), x.len()));
            }
            self.weights.dot(&x)
        };
        self.add_output_noise(&mut y);
        Ok(y)
    }

    fn add_output_noise(&mut self, y: &mut Array1<T>) {
        let std = self.device.out_noise_std;
        if std == 0.0 {
            return;
        }
        for v in y.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *v += T::lit(std * z);
        }
    }

    pub(crate) fn weights_and_rng_mut(&mut self) -> (&mut Array2<T>, &mut ChaCha8Rng, &DeviceConfig) {
        (&mut self.weights, &mut self.rng, &self.device)
    }

    /// Snapshot of the full tile state, including the RNG position.
    pub fn checkpoint(&self) -> TileCheckpoint {
        TileCheckpoint {
            format: TILE_FORMAT.to_string(),
            d_out: self.d_out(),
            d_in: self.d_in(),
            device: self.device,
            converters: self.converters,
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos().to_string(),
            weights: self.weights.iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Rebuilds a tile from a checkpoint, resuming the RNG where it stopped.
    pub fn from_checkpoint(cp: &TileCheckpoint) -> Result<Self> {
        if cp.format != TILE_FORMAT {
            return Err(config_err(format!(
                "unsupported tile format {:?}, expected {TILE_FORMAT:?}",
                cp.format
            )));
        }
        if cp.weights.len() != cp.d_out * cp.d_in {
            return Err(shape_err(
                "tile checkpoint weights",
                cp.d_out * cp.d_in,
                cp.weights.len(),
            ));
        }
        let word_pos: u128 = cp
            .word_pos
            .parse()
            .map_err(|_| config_err(format!("bad RNG word position {:?}", cp.word_pos)))?;
        let mut tile = Self::with_stream(
            cp.d_out,
            cp.d_in,
            cp.device,
            cp.converters,
            cp.seed,
            cp.stream,
        )?;
        let w = Array2::from_shape_vec(
            (cp.d_out, cp.d_in),
            cp.weights.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("weight count checked above");
        tile.set_weights(w.view())?;
        tile.rng.set_word_pos(word_pos);
        Ok(tile)
    }
}

/// Format tag of [`TileCheckpoint`].
pub const TILE_FORMAT: &str = "rpu-tile/1";

/// JSON-serialisable tile state.
///
/// `weights` is row-major `d_out × d_in`. `word_pos` is the decimal ChaCha8
/// word position of the tile stream, stored as a string because it is a
/// 128-bit counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileCheckpoint {
    pub format: String,
    pub d_out: usize,
    pub d_in: usize,
    pub device: DeviceConfig,
    pub converters: ConverterConfig,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: String,
    pub weights: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::RpuError;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn tile(d_out: usize, d_in: usize, noise: f64) -> AnalogTile<f64> {
        let device = DeviceConfig {
            out_noise_std: noise,
            ..DeviceConfig::baseline()
        };
        AnalogTile::new(d_out, d_in, device, ConverterConfig::baseline(), 7).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0f64, 7, 1.0), 0.0);
        assert_eq!(quantize(2.0f64, 7, 1.0), 1.0);
        // step 2/126 = 1/63; 0.5 * 63 = 31.5 rounds away from zero to 32
        assert_eq!(quantize(0.5f64, 7, 1.0), 32.0 / 63.0);
        assert_eq!(quantize(-0.5f64, 7, 1.0), -32.0 / 63.0);
        assert_eq!(quantize(-30.0f64, 9, 12.0), -12.0);
        assert_eq!(quantize(-3.0f64, 9, 12.0), -64.0 * 12.0 / 255.0);
    }

    #[test]
    fn one_bit_converter_only_has_zero() {
        assert_eq!(quantize(0.9f64, 1, 1.0), 0.0);
        assert!(quantization_step(1, 1.0).is_infinite());
    }

    #[test]
    fn step_matches_level_count() {
        assert_eq!(quantization_step(7, 1.0), 1.0 / 63.0);
        assert_eq!(quantization_step(9, 12.0), 24.0 / 510.0);
    }

    #[test]
    fn saturation_boundary_is_inclusive() {
        assert!(!detect_saturation(array![0.1, -11.9].view(), 12.0));
        assert!(detect_saturation(array![13.0, 0.0].view(), 12.0));
        assert!(detect_saturation(array![-12.0, 5.0].view(), 12.0));
    }

    #[test]
    fn state_counts() {
        let base = DeviceConfig::baseline();
        assert_eq!(count_states(&base), 1200);
        assert_eq!(count_states(&base.with_dw_min(0.00025)), 4800);
        assert_eq!(count_states(&base.with_dw_min(0.0001)), 12000);
    }

    #[test]
    fn invalid_device_rejected() {
        let bad = DeviceConfig {
            dw_min: 0.0,
            ..DeviceConfig::baseline()
        };
        assert!(bad.validate().is_err());
        let too_coarse = DeviceConfig {
            dw_min: 1.0,
            w_bound: 0.4,
            ..DeviceConfig::baseline()
        };
        assert!(too_coarse.validate().is_err());
        let bad_conv = ConverterConfig {
            adc_bits: 0,
            ..ConverterConfig::baseline()
        };
        assert!(bad_conv.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut t = tile(3, 4, 0.0);
        let y = t.analog_mvm(array![0.3, -1.0, 0.5, 0.2].view(), false).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_passes_input_through() {
        let mut t = tile(2, 2, 0.0);
        t.set_weights(array![[0.5, 0.0], [0.0, 0.5]].view()).unwrap();
        let y = t.analog_mvm(array![0.5, -1.0].view(), false).unwrap();
        assert_eq!(y, array![0.25, -0.5]);
    }

    #[test]
    fn set_weights_clips_to_bounds() {
        let mut t = tile(1, 3, 0.0);
        t.set_weights(array![[0.7, -0.6, -2.0]].view()).unwrap();
        assert_eq!(t.read_weights(), array![[0.6, -0.6, -0.6]]);
    }

    #[test]
    fn shape_errors() {
        let mut t = tile(2, 3, 0.0);
        assert!(matches!(
            t.analog_mvm(array![1.0, 2.0].view(), false),
            Err(RpuError::Shape { .. })
        ));
        assert!(t.analog_mvm(array![1.0, 2.0].view(), true).is_ok());
        assert!(t.set_weights(Array2::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn noise_off_is_reproducible() {
        let w = array![[0.1, -0.2, 0.3], [0.05, 0.4, -0.6]];
        let x = array![0.2, -0.7, 1.0];
        let run = || {
            let mut t = tile(2, 3, 0.0);
            t.set_weights(w.view()).unwrap();
            t.analog_mvm(x.view(), false).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn checkpoint_restores_weights_and_stream() {
        let mut t = tile(2, 3, 0.06);
        t.set_weights(array![[0.1, -0.2, 0.3], [0.05, 0.4, -0.6]].view())
            .unwrap();
        let x = array![0.2, -0.7, 1.0];
        t.analog_mvm(x.view(), false).unwrap();
        let cp = t.checkpoint();
        let json = serde_json::to_string(&cp).unwrap();
        let mut restored =
            AnalogTile::<f64>::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(restored.read_weights(), t.read_weights());
        let a = t.analog_mvm(x.view(), false).unwrap();
        let b = restored.analog_mvm(x.view(), false).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(x in -3.0f64..3.0, bits in 2u32..12, bound in 0.1f64..20.0) {
            let q = quantize(x, bits, bound);
            prop_assert_eq!(quantize(q, bits, bound), q);
        }

        #[test]
        fn quantize_error_within_half_step(x in -1.0f64..1.0, bits in 2u32..16, bound in 0.1f64..20.0) {
            let x = x * bound;
            let q = quantize(x, bits, bound);
            let step = quantization_step(bits, bound);
            prop_assert!((q - x).abs() <= step / 2.0 * (1.0 + 1e-12));
            prop_assert!(q.abs() <= bound);
        }

        #[test]
        fn transposed_equals_product_with_transpose(
            vals in proptest::collection::vec(-0.6f64..0.6, 12),
            x in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let w = Array2::from_shape_vec((3, 4), vals).unwrap();
            let mut t = tile(3, 4, 0.0);
            t.set_weights(w.view()).unwrap();
            let mut tt = tile(4, 3, 0.0);
            tt.set_weights(w.t()).unwrap();
            let xv = Array1::from(x);
            let a = t.analog_mvm(xv.view(), true).unwrap();
            let b = tt.analog_mvm(xv.view(), false).unwrap();
            for (p, q) in a.iter().zip(b.iter()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn set_weights_keeps_bounds(vals in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let mut t = tile(2, 3, 0.0);
            t.set_weights(Array2::from_shape_vec((2, 3), vals).unwrap().view()).unwrap();
            prop_assert!(t.weights().iter().all(|w| w.abs() <= 0.6));
        }
    }
}
