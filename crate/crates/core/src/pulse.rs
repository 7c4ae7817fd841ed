//! Stochastic pulse-coincidence weight update.
//!
//! Each input element `x_i` and error element `d_j` is translated into a
//! train of `bl_max` pulse slots, each slot firing independently with
//! probability `s_x |x_i|` (resp. `s_d |d_j|`). A weight changes only when its
//! row and column fire in the same slot; every coincidence moves it by one
//! step drawn from `N(dw_min, (ratio * dw_min)^2)` and clips it at the hard
//! bounds. The expected change is therefore
//! `-bl_max * p_i * q_j * dw_min * sign(x_i) sign(d_j) = -lr * d_j * x_i`
//! whenever `s_x * s_d * bl_max * dw_min = lr` and no probability clips.
//!
//! Polarity is resolved at the coincidence from the signs of the two sides,
//! which realises the two-combination (positive/negative) pulse scheme.

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::scalar::{max_abs, Scalar};
use crate::tile::{AnalogTile, DeviceConfig};

/// Pulse trains are stored as bit masks, one bit per slot.
pub const MAX_PULSE_TRAIN: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PulseConfig {
    /// Length of every pulse train.
    pub bl_max: u32,
    /// Number of positive/negative train combinations driven per update.
    pub combo_count: u32,
    /// Balance the two sides' probabilities by their maxima. When off, both
    /// sides use the common scale `sqrt(lr / (bl_max * dw_min))`.
    pub update_management: bool,
}

impl PulseConfig {
    pub const fn baseline() -> Self {
        Self {
            bl_max: 31,
            combo_count: 2,
            update_management: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bl_max == 0 || self.bl_max > MAX_PULSE_TRAIN {
            return Err(config_err(format!(
                "bl_max must be in 1..={MAX_PULSE_TRAIN}, got {}",
                self.bl_max
            )));
        }
        if self.combo_count != 2 {
            return Err(config_err(format!(
                "only the 2-combination pulse scheme is simulated, got combo_count = {}",
                self.combo_count
            )));
        }
        Ok(())
    }
}

impl Default for PulseConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

/// Probability scales of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateScales {
    pub s_x: f64,
    pub s_d: f64,
    pub lr: f64,
    /// Some pulse probability exceeded 1 and was clipped; the expected update
    /// is then smaller than `lr * d xᵀ` for the affected elements.
    pub clipped: bool,
}

impl UpdateScales {
    pub fn zero(lr: f64) -> Self {
        Self {
            s_x: 0.0,
            s_d: 0.0,
            lr,
            clipped: false,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.s_x == 0.0 || self.s_d == 0.0
    }
}

/// Probability scales for the update `-lr * d xᵀ`.
///
/// With update management, `s_x = sqrt(lr/(bl*dw) * max|d| / max|x|)` and
/// `s_d = sqrt(lr/(bl*dw) * max|x| / max|d|)`, so the largest probabilities on
/// both sides are equal. A zero `x`, zero `d` or non-positive `lr` gives zero
/// scales, i.e. an exact no-op.
pub fn compute_update_scales<T: Scalar>(
    x: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
    lr: f64,
    device: &DeviceConfig,
    pulse: &PulseConfig,
) -> UpdateScales {
    let x_max = max_abs(x.iter()).as_f64();
    let d_max = max_abs(d.iter()).as_f64();
    if x_max == 0.0 || d_max == 0.0 || !(lr > 0.0) {
        return UpdateScales::zero(lr);
    }
    let base = lr / (pulse.bl_max as f64 * device.dw_min);
    let (s_x, s_d) = if pulse.update_management {
        ((base * d_max / x_max).sqrt(), (base * x_max / d_max).sqrt())
    } else {
        (base.sqrt(), base.sqrt())
    };
    UpdateScales {
        s_x,
        s_d,
        lr,
        clipped: s_x * x_max > 1.0 || s_d * d_max > 1.0,
    }
}

/// Pulse trains of one side of the array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PulseTrains {
    /// Bit `t` of `masks[k]` is set when element `k` fires in slot `t`.
    pub masks: Vec<u64>,
    /// Polarity of element `k`.
    pub negative: Vec<bool>,
    pub len: u32,
}

impl PulseTrains {
    pub fn pulse_count(&self, k: usize) -> u32 {
        self.masks[k].count_ones()
    }
}

/// Draws `bl` independent Bernoulli slots per element.
///
/// Probabilities of 0 and 1 are resolved without consuming random numbers.
pub fn generate_pulse_train<R: Rng + ?Sized>(
    prob: &[f64],
    negative: &[bool],
    bl: u32,
    rng: &mut R,
) -> PulseTrains {
    debug_assert_eq!(prob.len(), negative.len());
    debug_assert!(bl >= 1 && bl <= MAX_PULSE_TRAIN);
    let full = if bl == 64 { u64::MAX } else { (1u64 << bl) - 1 };
    let masks = prob
        .iter()
        .map(|&p| {
            if p <= 0.0 {
                0
            } else if p >= 1.0 {
                full
            } else {
                let mut m = 0u64;
                for t in 0..bl {
                    if rng.random::<f64>() < p {
                        m |= 1 << t;
                    }
                }
                m
            }
        })
        .collect();
    PulseTrains {
        masks,
        negative: negative.to_vec(),
        len: bl,
    }
}

fn trains_for<T: Scalar, R: Rng + ?Sized>(
    v: ArrayView1<'_, T>,
    scale: f64,
    bl: u32,
    rng: &mut R,
) -> PulseTrains {
    let prob: Vec<f64> = v.iter().map(|e| (scale * e.as_f64().abs()).min(1.0)).collect();
    let negative: Vec<bool> = v.iter().map(|e| *e < T::zero()).collect();
    generate_pulse_train(&prob, &negative, bl, rng)
}

/// Generated trains of one update, for inspection.
#[derive(Debug, Clone)]
pub struct PulseTrace {
    pub scales: UpdateScales,
    pub x_trains: PulseTrains,
    pub d_trains: PulseTrains,
}

/// One stochastic pulsed update approximating `W ← W - lr * d xᵀ`.
pub fn pulsed_update<T: Scalar>(
    tile: &mut AnalogTile<T>,
    x: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
    lr: f64,
    pulse: &PulseConfig,
) -> Result<UpdateScales> {
    update_impl(tile, x, d, lr, pulse, false).map(|(s, _)| s)
}

/// [`pulsed_update`] that also returns the drawn pulse trains.
pub fn pulsed_update_traced<T: Scalar>(
    tile: &mut AnalogTile<T>,
    x: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
    lr: f64,
    pulse: &PulseConfig,
) -> Result<Option<PulseTrace>> {
    update_impl(tile, x, d, lr, pulse, true).map(|(_, t)| t)
}

fn update_impl<T: Scalar>(
    tile: &mut AnalogTile<T>,
    x: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
    lr: f64,
    pulse: &PulseConfig,
    trace: bool,
) -> Result<(UpdateScales, Option<PulseTrace>)> {
    if x.len() != tile.d_in() {
        return Err(shape_err("pulsed_update x", tile.d_in(), x.len()));
    }
    if d.len() != tile.d_out() {
        return Err(shape_err("pulsed_update d", tile.d_out(), d.len()));
    }
    pulse.validate()?;
    let scales = compute_update_scales(x, d, lr, tile.device(), pulse);
    if scales.is_noop() {
        return Ok((scales, None));
    }

    let (weights, rng, device) = tile.weights_and_rng_mut();
    let x_trains = trains_for(x, scales.s_x, pulse.bl_max, rng);
    let d_trains = trains_for(d, scales.s_d, pulse.bl_max, rng);

    let dw = device.dw_min;
    let dw_std = device.dw_min_std_ratio * dw;
    let bound = T::lit(device.w_bound);

    for (j, mut row) in weights.rows_mut().into_iter().enumerate() {
        let mask_d = d_trains.masks[j];
        if mask_d == 0 {
            continue;
        }
        let neg_d = d_trains.negative[j];
        for (i, w) in row.iter_mut().enumerate() {
            let coincidences = (mask_d & x_trains.masks[i]).count_ones();
            if coincidences == 0 {
                continue;
            }
            // Same signs on both sides mean a positive gradient: step down.
            let down = neg_d == x_trains.negative[i];
            let mut v = *w;
            // Every coincidence of this weight has the same polarity, so
            // applying them in slot order reduces to applying them in turn.
            for _ in 0..coincidences {
                let step = if dw_std > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    dw + dw_std * z
                } else {
                    dw
                };
                let step = T::lit(step);
                v = if down { v - step } else { v + step };
                v = v.max(-bound).min(bound);
            }
            *w = v;
        }
    }

    let trace = trace.then(|| PulseTrace {
        scales,
        x_trains,
        d_trains,
    });
    Ok((scales, trace))
}

/// Summary of a batch of pulsed updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchUpdateSummary {
    pub updates: usize,
    pub clipped: usize,
}

/// Pulsed updates for the rows of `xs` and `ds`, applied one after the other
/// in row order. Nothing is accumulated or averaged before pulsing.
pub fn pulsed_update_batch<T: Scalar>(
    tile: &mut AnalogTile<T>,
    xs: ArrayView2<'_, T>,
    ds: ArrayView2<'_, T>,
    lr: f64,
    pulse: &PulseConfig,
) -> Result<BatchUpdateSummary> {
    if xs.nrows() != ds.nrows() {
        return Err(shape_err("pulsed_update_batch rows", xs.nrows(), ds.nrows()));
    }
    let mut summary = BatchUpdateSummary::default();
    for (x, d) in xs.rows().into_iter().zip(ds.rows()) {
        let s = pulsed_update(tile, x, d, lr, pulse)?;
        summary.updates += 1;
        summary.clipped += s.clipped as usize;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tile::ConverterConfig;
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tile(d_out: usize, d_in: usize, seed: u64) -> AnalogTile<f64> {
        AnalogTile::new(
            d_out,
            d_in,
            DeviceConfig::baseline(),
            ConverterConfig::baseline(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn scales_unit_example() {
        let s = compute_update_scales(
            array![1.0f64].view(),
            array![1.0f64].view(),
            0.01,
            &DeviceConfig::baseline(),
            &PulseConfig::baseline(),
        );
        let expected = (0.01f64 / 0.031).sqrt();
        assert!((s.s_x - expected).abs() < 1e-15);
        assert!((s.s_d - expected).abs() < 1e-15);
        assert!((s.s_x - 0.5680).abs() < 1e-4);
        assert!((s.s_x * s.s_d * 31.0 * 0.001 - 0.01).abs() < 1e-15);
        assert!(!s.clipped);
    }

    #[test]
    fn scales_balance_side_maxima() {
        let x = array![0.3f64, -2.0, 0.5];
        let d = array![1e-3f64, -4e-3];
        let s = compute_update_scales(
            x.view(),
            d.view(),
            0.05,
            &DeviceConfig::baseline(),
            &PulseConfig::baseline(),
        );
        assert!((s.s_x * 2.0 - s.s_d * 4e-3).abs() < 1e-12);
        assert!((s.s_x * s.s_d * 31.0 * 0.001 - 0.05).abs() < 1e-12);
    }

    #[test]
    fn large_lr_clips_probabilities() {
        let s = compute_update_scales(
            array![1.0f64].view(),
            array![1.0f64].view(),
            1.0,
            &DeviceConfig::baseline(),
            &PulseConfig::baseline(),
        );
        assert!(s.clipped);
    }

    #[test]
    fn zero_error_is_noop() {
        let mut t = tile(2, 2, 1);
        t.set_weights(array![[0.1, 0.2], [0.3, 0.4]].view()).unwrap();
        let before = t.read_weights();
        let s = pulsed_update(
            &mut t,
            array![1.0, 1.0].view(),
            array![0.0, 0.0].view(),
            0.1,
            &PulseConfig::baseline(),
        )
        .unwrap();
        assert!(s.is_noop());
        assert_eq!(t.read_weights(), before);
    }

    #[test]
    fn trains_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = generate_pulse_train(&[0.0, 1.0], &[false, true], 31, &mut rng);
        assert_eq!(t.masks[0], 0);
        assert_eq!(t.pulse_count(1), 31);
        assert!(t.negative[1]);
    }

    #[test]
    fn train_mean_pulse_count() {
        // Binomial(31, 0.5): mean 15.5, std of the mean over 1e4 trains 0.028.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let probs = vec![0.5; n];
        let neg = vec![false; n];
        let t = generate_pulse_train(&probs, &neg, 31, &mut rng);
        let mean = (0..n).map(|k| t.pulse_count(k) as f64).sum::<f64>() / n as f64;
        assert!((mean - 15.5).abs() < 0.5, "mean pulse count {mean}");
        // 3 standard errors of the binomial mean
        assert!((mean - 15.5).abs() < 3.0 * (31.0f64 * 0.25 / n as f64).sqrt());
    }

    #[test]
    fn saturated_weight_stays_at_bound() {
        // Exact only without step variability: a Gaussian step is negative
        // with probability ~4e-4 at 30% spread.
        let device = DeviceConfig {
            dw_min_std_ratio: 0.0,
            ..DeviceConfig::baseline()
        };
        let mut t =
            AnalogTile::<f64>::new(1, 1, device, ConverterConfig::baseline(), 3).unwrap();
        t.set_weights(array![[0.6]].view()).unwrap();
        // negative gradient pushes the weight up
        for _ in 0..50 {
            pulsed_update(
                &mut t,
                array![1.0].view(),
                array![-1.0].view(),
                0.02,
                &PulseConfig::baseline(),
            )
            .unwrap();
            assert_eq!(t.weights()[[0, 0]], 0.6);
        }
    }

    #[test]
    fn single_weight_expectation() {
        // E[Δw] = -lr * d * x = -0.01; checked within 3 standard errors.
        let mut t = tile(1, 1, 5);
        let pulse = PulseConfig::baseline();
        let n = 100_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            t.set_weights(array![[0.0]].view()).unwrap();
            pulsed_update(&mut t, array![1.0].view(), array![1.0].view(), 0.01, &pulse).unwrap();
            let dw = t.weights()[[0, 0]];
            sum += dw;
            sum_sq += dw * dw;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean + 0.01).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn batch_matches_sequential_calls() {
        let xs = array![[1.0, -0.5], [0.2, 0.9], [-1.0, 0.3]];
        let ds = array![[0.3, -0.1], [-0.7, 0.2], [0.05, 0.4]];
        let mut a = tile(2, 2, 9);
        let mut b = tile(2, 2, 9);
        a.set_weights(array![[0.55, -0.55], [0.0, 0.59]].view()).unwrap();
        b.set_weights(a.weights()).unwrap();
        let pulse = PulseConfig::baseline();
        pulsed_update_batch(&mut a, xs.view(), ds.view(), 0.3, &pulse).unwrap();
        for (x, d) in xs.rows().into_iter().zip(ds.rows()) {
            pulsed_update(&mut b, x, d, 0.3, &pulse).unwrap();
        }
        assert_eq!(a.read_weights(), b.read_weights());
    }

    #[test]
    fn batch_row_mismatch_and_empty() {
        let mut t = tile(2, 2, 1);
        let pulse = PulseConfig::baseline();
        assert!(pulsed_update_batch(
            &mut t,
            Array2::<f64>::zeros((2, 2)).view(),
            Array2::<f64>::zeros((3, 2)).view(),
            0.1,
            &pulse
        )
        .is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        let s = pulsed_update_batch(&mut t, empty.view(), empty.view(), 0.1, &pulse).unwrap();
        assert_eq!(s.updates, 0);
    }

    #[test]
    fn zero_probability_elements_never_pulse() {
        let mut t = tile(2, 3, 4);
        let trace = pulsed_update_traced(
            &mut t,
            array![0.0, 1.0, 0.0].view(),
            array![0.5, 0.0].view(),
            0.05,
            &PulseConfig::baseline(),
        )
        .unwrap()
        .unwrap();
        assert_eq!(trace.x_trains.masks[0], 0);
        assert_eq!(trace.x_trains.masks[2], 0);
        assert_eq!(trace.d_trains.masks[1], 0);
        let w = t.read_weights();
        assert_eq!(w.row(1).to_vec(), vec![0.0; 3]);
        assert_eq!(w[[0, 0]], 0.0);
        assert_eq!(w[[0, 2]], 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut t = tile(2, 3, 4);
        let pulse = PulseConfig::baseline();
        let r = pulsed_update(&mut t, array![1.0, 1.0].view(), array![1.0, 1.0].view(), 0.1, &pulse);
        assert!(r.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn updates_respect_bounds(
            seed in 0u64..1000,
            xs in proptest::collection::vec(-3.0f64..3.0, 12),
            ds in proptest::collection::vec(-3.0f64..3.0, 8),
            lr in 0.001f64..2.0,
        ) {
            let mut t = tile(2, 3, seed);
            t.set_weights(array![[0.59, -0.59, 0.0], [0.3, -0.2, 0.6]].view()).unwrap();
            let xs = Array2::from_shape_vec((4, 3), xs).unwrap();
            let ds = Array2::from_shape_vec((4, 2), ds).unwrap();
            pulsed_update_batch(&mut t, xs.view(), ds.view(), lr, &PulseConfig::baseline()).unwrap();
            prop_assert!(t.weights().iter().all(|w| w.abs() <= 0.6));
        }

        #[test]
        fn scales_product_matches_lr(
            x in proptest::collection::vec(-2.0f64..2.0, 4),
            d in proptest::collection::vec(-2.0f64..2.0, 3),
            lr in 1e-4f64..1.0,
        ) {
            let (x, d) = (Array1::from(x), Array1::from(d));
            let s = compute_update_scales(x.view(), d.view(), lr, &DeviceConfig::baseline(), &PulseConfig::baseline());
            if !s.is_noop() {
                prop_assert!((s.s_x * s.s_d * 31.0 * 0.001 / lr - 1.0).abs() < 1e-12);
            }
        }
    }
}
