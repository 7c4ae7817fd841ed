//! Virtual remapping of a layer's weight range onto the device range.
//!
//! Weights of a layer with fan-in `n` rarely need to exceed `β/√n` in
//! magnitude. Mapping `(-β/√n, β/√n)` onto the physical `(-w_b, w_b)` lets
//! the layer use all device states. The mapping is realised digitally: the
//! tile output of both forward and backward products is multiplied by
//! `out_scale = β / (√n · w_b)`, and the layer learning rate is divided by
//! the same factor so the effective update is unchanged.

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::management::{managed_mvm, Direction, IoManagement, MvmResult};
use crate::scalar::Scalar;
use crate::tile::{AnalogTile, DeviceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemapConfig {
    pub gamma: f64,
    pub n_in: usize,
    pub w_bound: f64,
    pub beta: f64,
    pub out_scale: f64,
    pub enabled: bool,
}

/// Remap with the default `β = √3/γ`.
pub fn make_remap(gamma: f64, n_in: usize, w_bound: f64, enabled: bool) -> Result<RemapConfig> {
    check_gamma(gamma)?;
    make_remap_with_beta(gamma, 3f64.sqrt() / gamma, n_in, w_bound, enabled)
}

/// Remap with an explicit `β` (per-layer override).
pub fn make_remap_with_beta(
    gamma: f64,
    beta: f64,
    n_in: usize,
    w_bound: f64,
    enabled: bool,
) -> Result<RemapConfig> {
    check_gamma(gamma)?;
    if n_in == 0 {
        return Err(config_err("remap fan-in must be >= 1"));
    }
    if !(w_bound > 0.0 && w_bound.is_finite()) {
        return Err(config_err(format!("w_bound must be > 0, got {w_bound}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(config_err(format!("beta must be > 0, got {beta}")));
    }
    let out_scale = if enabled {
        beta / ((n_in as f64).sqrt() * w_bound)
    } else {
        1.0
    };
    Ok(RemapConfig {
        gamma,
        n_in,
        w_bound,
        beta,
        out_scale,
        enabled,
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(config_err(format!("gamma must be in (0, 1], got {gamma}")));
    }
    Ok(())
}

impl RemapConfig {
    /// A disabled remap (output factor 1) for a layer of fan-in `n_in`.
    pub fn disabled(n_in: usize, w_bound: f64) -> Result<Self> {
        make_remap(1.0, n_in, w_bound, false)
    }

    /// Half-width of the initialisation range in physical units.
    pub fn init_half_range(&self) -> f64 {
        if self.enabled {
            self.gamma * self.w_bound
        } else {
            (3.0 / self.n_in as f64).sqrt().min(self.w_bound)
        }
    }
}

/// `out_scale · managed_mvm(tile, x, direction)`.
pub fn remapped_forward<T: Scalar>(
    tile: &mut AnalogTile<T>,
    remap: &RemapConfig,
    x: ndarray::ArrayView1<'_, T>,
    direction: Direction,
    io: IoManagement,
) -> Result<MvmResult<T>> {
    let mut r = managed_mvm(tile, x, direction, io)?;
    if remap.out_scale != 1.0 {
        let s = T::lit(remap.out_scale);
        r.y.mapv_inplace(|v| v * s);
    }
    Ok(r)
}

/// Layer learning rate in physical units: `lr / out_scale`.
pub fn remapped_lr(lr: f64, remap: &RemapConfig) -> f64 {
    if remap.enabled {
        lr / remap.out_scale
    } else {
        lr
    }
}

/// Uniform initialisation in `(-γ w_b, γ w_b)` when remapped, otherwise
/// Xavier-uniform `(-√3/√n, √3/√n)` clipped to the bounds.
pub fn init_weights<T: Scalar, R: Rng + ?Sized>(
    tile: &mut AnalogTile<T>,
    remap: &RemapConfig,
    rng: &mut R,
) -> Result<()> {
    if remap.w_bound != tile.device().w_bound {
        return Err(config_err(format!(
            "remap bound {} differs from tile bound {}",
            remap.w_bound,
            tile.device().w_bound
        )));
    }
    let a = remap.init_half_range();
    let w = ndarray::Array2::from_shape_simple_fn(tile.shape(), || T::lit(rng.random_range(-a..a)));
    tile.set_weights(w.view())
}

/// Number of device states spanned by the initialisation range.
pub fn init_range_states(remap: &RemapConfig, device: &DeviceConfig) -> f64 {
    2.0 * remap.init_half_range() / device.dw_min
}

/// Per-row signal-to-noise estimate `‖w_i‖² ⟨‖x‖²⟩ / σ²` over the rows of
/// `inputs`. A diagnostic proportionality, not a calibrated SNR.
pub fn snr_estimate<T: Scalar>(
    tile: &AnalogTile<T>,
    inputs: ArrayView2<'_, T>,
    out_noise_std: f64,
) -> Result<Vec<f64>> {
    if inputs.nrows() == 0 {
        return Err(crate::error::RpuError::Empty("SNR input batch"));
    }
    if inputs.ncols() != tile.d_in() {
        return Err(shape_err("snr_estimate", tile.d_in(), inputs.ncols()));
    }
    if !(out_noise_std > 0.0) {
        return Err(config_err("SNR is undefined for zero output noise"));
    }
    let mean_sq_norm = inputs
        .rows()
        .into_iter()
        .map(|x| x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        / inputs.nrows() as f64;
    let var = out_noise_std * out_noise_std;
    Ok(tile
        .weights()
        .rows()
        .into_iter()
        .map(|w| w.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() * mean_sq_norm / var)
        .collect())
}
