use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::management::{Direction, IoManagement};
use crate::pulse::{pulsed_update_batch, PulseConfig};
use crate::remap::{remapped_forward, remapped_lr, RemapConfig};
use crate::scalar::Scalar;
use crate::tile::AnalogTile;

/// Running counters of the analog products of one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MvmStats {
    pub forward_calls: u64,
    pub bm_iterations: u64,
    pub saturated: u64,
    pub updates: u64,
    pub clipped_updates: u64,
}

impl MvmStats {
    pub fn mean_bm_iterations(&self) -> f64 {
        if self.forward_calls == 0 {
            0.0
        } else {
            self.bm_iterations as f64 / self.forward_calls as f64
        }
    }

    pub fn saturation_rate(&self) -> f64 {
        if self.forward_calls == 0 {
            0.0
        } else {
            self.saturated as f64 / self.forward_calls as f64
        }
    }
}

/// Weight matrix stored on a tile, with its remap, pulse and I/O settings.
#[derive(Debug, Clone)]
pub struct AnalogMatrix<T: Scalar> {
    pub tile: AnalogTile<T>,
    pub remap: RemapConfig,
    pub pulse: PulseConfig,
    pub io: IoManagement,
    stats: MvmStats,
}

impl<T: Scalar> AnalogMatrix<T> {
    pub fn new(tile: AnalogTile<T>, remap: RemapConfig, pulse: PulseConfig, io: IoManagement) -> Self {
        Self {
            tile,
            remap,
            pulse,
            io,
            stats: MvmStats::default(),
        }
    }

    pub fn forward(&mut self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        let r = remapped_forward(&mut self.tile, &self.remap, x, Direction::Forward, self.io)?;
        self.stats.forward_calls += 1;
        self.stats.bm_iterations += r.bm_iterations as u64;
        self.stats.saturated += r.saturated as u64;
        Ok(r.y)
    }

    pub fn backward(&mut self, d: ArrayView1<'_, T>) -> Result<Array1<T>> {
        let io = IoManagement {
            bound_management: false,
            ..self.io
        };
        Ok(remapped_forward(&mut self.tile, &self.remap, d, Direction::Backward, io)?.y)
    }

    /// Sequential pulsed updates, one per row, at the remapped rate.
    pub fn update(&mut self, xs: ArrayView2<'_, T>, ds: ArrayView2<'_, T>, lr: f64) -> Result<()> {
        let s = pulsed_update_batch(&mut self.tile, xs, ds, remapped_lr(lr, &self.remap), &self.pulse)?;
        self.stats.updates += s.updates as u64;
        self.stats.clipped_updates += s.clipped as u64;
        Ok(())
    }

    pub fn stats(&self) -> MvmStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = MvmStats::default();
    }
}

/// Plain floating-point weights for the reference network.
#[derive(Debug, Clone)]
pub struct FloatMatrix<T: Scalar> {
    pub weights: Array2<T>,
}

/// The weight operator of a fully-connected or convolution layer.
#[derive(Debug, Clone)]
pub enum MatrixBackend<T: Scalar> {
    Analog(AnalogMatrix<T>),
    Float(FloatMatrix<T>),
}

impl<T: Scalar> MatrixBackend<T> {
    pub fn in_dim(&self) -> usize {
        match self {
            Self::Analog(a) => a.tile.d_in(),
            Self::Float(f) => f.weights.ncols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Analog(a) => a.tile.d_out(),
            Self::Float(f) => f.weights.nrows(),
        }
    }

    /// Weights as seen by the digital side (`out_scale · W` for tiles).
    pub fn effective_weights(&self) -> Array2<T> {
        match self {
            Self::Analog(a) => a.tile.weights().mapv(|w| w * T::lit(a.remap.out_scale)),
            Self::Float(f) => f.weights.clone(),
        }
    }

    /// Rows of `xs` are input vectors; returns one output row per input row.
    pub fn forward_rows(&mut self, xs: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if xs.ncols() != self.in_dim() {
            return Err(shape_err("layer forward", self.in_dim(), xs.ncols()));
        }
        match self {
            Self::Analog(a) => {
                let mut out = Array2::zeros((xs.nrows(), a.tile.d_out()));
                for (x, mut o) in xs.rows().into_iter().zip(out.rows_mut()) {
                    o.assign(&a.forward(x)?);
                }
                Ok(out)
            }
            Self::Float(f) => Ok(xs.dot(&f.weights.t())),
        }
    }

    pub fn backward_rows(&mut self, ds: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if ds.ncols() != self.out_dim() {
            return Err(shape_err("layer backward", self.out_dim(), ds.ncols()));
        }
        match self {
            Self::Analog(a) => {
                let mut out = Array2::zeros((ds.nrows(), a.tile.d_in()));
                for (d, mut o) in ds.rows().into_iter().zip(out.rows_mut()) {
                    o.assign(&a.backward(d)?);
                }
                Ok(out)
            }
            Self::Float(f) => Ok(ds.dot(&f.weights)),
        }
    }

    /// `W ← W - lr Σ_k d_k x_kᵀ`, pulsed row by row on a tile and summed in
    /// one step for float weights.
    pub fn update_rows(&mut self, xs: ArrayView2<'_, T>, ds: ArrayView2<'_, T>, lr: f64) -> Result<()> {
        if xs.nrows() != ds.nrows() {
            return Err(shape_err("layer update rows", xs.nrows(), ds.nrows()));
        }
        if xs.ncols() != self.in_dim() || ds.ncols() != self.out_dim() {
            return Err(shape_err(
                "layer update",
                (self.in_dim(), self.out_dim()),
                (xs.ncols(), ds.ncols()),
            ));
        }
        match self {
            Self::Analog(a) => a.update(xs, ds, lr),
            Self::Float(f) => {
                let grad = ds.t().dot(&xs);
                f.weights.scaled_add(T::lit(-lr), &grad);
                Ok(())
            }
        }
    }

    pub fn stats(&self) -> Option<MvmStats> {
        match self {
            Self::Analog(a) => Some(a.stats()),
            Self::Float(_) => None,
        }
    }

    pub fn reset_stats(&mut self) {
        if let Self::Analog(a) = self {
            a.reset_stats();
        }
    }

    pub fn as_analog(&self) -> Option<&AnalogMatrix<T>> {
        match self {
            Self::Analog(a) => Some(a),
            Self::Float(_) => None,
        }
    }

    pub fn as_analog_mut(&mut self) -> Option<&mut AnalogMatrix<T>> {
        match self {
            Self::Analog(a) => Some(a),
            Self::Float(_) => None,
        }
    }
}
