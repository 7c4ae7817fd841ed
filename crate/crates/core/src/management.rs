//! Digital input/output management around a tile.
//!
//! Noise management divides the input by `α = max|x_i|` before the DAC and
//! multiplies the ADC output by `α`, so that small signals (typically the
//! back-propagated errors) use the full DAC range instead of disappearing
//! under the output noise. Bound management, applied in the forward direction
//! only, doubles `α` and repeats the analog product until no output reaches
//! the ADC bound, trading one bit of effective ADC resolution per iteration
//! for range.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, RpuError};
use crate::scalar::{max_abs, Scalar};
use crate::tile::{detect_saturation, quantize, AnalogTile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `W x`
    Forward,
    /// `Wᵀ d`
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IoManagement {
    pub noise_management: bool,
    pub bound_management: bool,
}

impl IoManagement {
    pub const fn enabled() -> Self {
        Self {
            noise_management: true,
            bound_management: true,
        }
    }

    pub const fn disabled() -> Self {
        Self {
            noise_management: false,
            bound_management: false,
        }
    }
}

impl Default for IoManagement {
    fn default() -> Self {
        Self::enabled()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvmResult<T> {
    /// Digital output after the ADC and the `α` rescale.
    pub y: Array1<T>,
    /// Final input scale; 0 when a zero input short-circuited the product.
    pub alpha_used: T,
    pub bm_iterations: u32,
    /// The last analog pass still saturated the ADC.
    pub saturated: bool,
}

/// `y = α · ADC(W · DAC(x / α) + ξ)` with noise and bound management.
///
/// With noise management on, an all-zero input returns zeros without an
/// analog pass. Without it, `α = 1`. Bound management only acts in the
/// forward direction and stops after `adc_bits` passes; a remaining
/// saturation is reported in [`MvmResult::saturated`].
pub fn managed_mvm<T: Scalar>(
    tile: &mut AnalogTile<T>,
    x: ArrayView1<'_, T>,
    direction: Direction,
    io: IoManagement,
) -> Result<MvmResult<T>> {
    let expected = match direction {
        Direction::Forward => tile.d_in(),
        Direction::Backward => tile.d_out(),
    };
    if x.len() != expected {
        return Err(shape_err("managed_mvm", expected, x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RpuError::NonFinite("managed_mvm"));
    }

    let conv = *tile.converters();
    let mut alpha = if io.noise_management {
        max_abs(x.iter())
    } else {
        T::one()
    };
    if alpha == T::zero() {
        let n = match direction {
            Direction::Forward => tile.d_out(),
            Direction::Backward => tile.d_in(),
        };
        return Ok(MvmResult {
            y: Array1::zeros(n),
            alpha_used: T::zero(),
            bm_iterations: 1,
            saturated: false,
        });
    }

    let transposed = direction == Direction::Backward;
    let bound_mgmt = io.bound_management && direction == Direction::Forward;
    let max_iterations = conv.adc_bits;
    let dac_bound = T::lit(conv.dac_bound);
    let adc_bound = T::lit(conv.adc_bound);

    let mut iterations = 0;
    loop {
        iterations += 1;
        let xq = x.mapv(|v| quantize(v / alpha, conv.dac_bits, dac_bound));
        let raw = tile.analog_mvm(xq.view(), transposed)?;
        let saturated = detect_saturation(raw.view(), adc_bound);
        if bound_mgmt && saturated && iterations < max_iterations {
            alpha = alpha + alpha;
            continue;
        }
        let y = raw.mapv(|v| quantize(v, conv.adc_bits, adc_bound) * alpha);
        return Ok(MvmResult {
            y,
            alpha_used: alpha,
            bm_iterations: iterations,
            saturated,
        });
    }
}

/// ADC bits left after `bm_iterations` passes, one lost per doubling,
/// never below 1.
pub fn effective_adc_resolution(bm_iterations: u32, adc_bits: u32) -> u32 {
    adc_bits
        .saturating_sub(bm_iterations.saturating_sub(1))
        .max(1)
}
