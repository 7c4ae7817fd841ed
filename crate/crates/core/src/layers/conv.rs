//! 2-D convolution as a crossbar product over unrolled patches.
//!
//! Each input patch is flattened in `(channel, ky, kx)` order into one column
//! of length `in_channels · kh · kw`, which is the fan-in of the kernel
//! matrix stored on the tile. Patches of a sample are visited row-major over
//! output positions, samples in batch order; updates follow the same order.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result, RpuError};
use crate::scalar::Scalar;

use super::backend::MatrixBackend;
use super::fc::update_bias;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(config_err("conv kernel and stride must be >= 1"));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(config_err(format!(
                "conv kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

/// Unrolls one `(C, H, W)` sample into `(patches, C·kh·kw)`.
pub fn im2col<T: Scalar>(x: ArrayView3<'_, T>, g: &ConvGeometry) -> Result<Array2<T>> {
    let (c, h, w) = x.dim();
    if c != g.in_channels {
        return Err(shape_err("im2col channels", g.in_channels, c));
    }
    let (oh, ow) = g.output_hw(h, w)?;
    let pad = g.padding as isize;
    let mut cols = Array2::zeros((oh * ow, g.fan_in()));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = cols.row_mut(oy * ow + ox);
            let mut k = 0;
            for ch in 0..c {
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            row[k] = x[[ch, iy as usize, ix as usize]];
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatters patch columns back, summing overlaps.
pub fn col2im<T: Scalar>(cols: ArrayView2<'_, T>, g: &ConvGeometry, h: usize, w: usize) -> Result<Array3<T>> {
    let (oh, ow) = g.output_hw(h, w)?;
    if cols.dim() != (oh * ow, g.fan_in()) {
        return Err(shape_err("col2im", (oh * ow, g.fan_in()), cols.dim()));
    }
    let pad = g.padding as isize;
    let mut x = Array3::zeros((g.in_channels, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row(oy * ow + ox);
            let mut k = 0;
            for ch in 0..g.in_channels {
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[[ch, iy as usize, ix as usize]] += row[k];
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Convolution on `(N, C, H, W)` activations with an optional digital
/// per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub backend: MatrixBackend<T>,
    pub geometry: ConvGeometry,
    pub bias: Option<Array1<T>>,
    cols: Option<(Array2<T>, (usize, usize, usize, usize))>,
    grad_rows: Option<Array2<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(backend: MatrixBackend<T>, geometry: ConvGeometry) -> Result<Self> {
        if backend.in_dim() != geometry.fan_in() || backend.out_dim() != geometry.out_channels {
            return Err(shape_err(
                "conv kernel matrix",
                (geometry.out_channels, geometry.fan_in()),
                (backend.out_dim(), backend.in_dim()),
            ));
        }
        Ok(Self {
            backend,
            geometry,
            bias: None,
            cols: None,
            grad_rows: None,
        })
    }

    /// Adds a zero-initialised digital bias.
    pub fn with_bias(mut self) -> Self {
        self.bias = Some(Array1::zeros(self.geometry.out_channels));
        self
    }

    fn unroll(&self, x: ArrayView4<'_, T>) -> Result<Array2<T>> {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.geometry.output_hw(h, w)?;
        let p = oh * ow;
        let mut all = Array2::zeros((n * p, self.geometry.fan_in()));
        for (s, sample) in x.outer_iter().enumerate() {
            all.slice_mut(s![s * p..(s + 1) * p, ..])
                .assign(&im2col(sample, &self.geometry)?);
        }
        Ok(all)
    }

    /// Patch rows `(N·P, Cout)` back to `(N, Cout, oh, ow)`.
    fn fold_rows(rows: Array2<T>, n: usize, oh: usize, ow: usize) -> Array4<T> {
        let c = rows.ncols();
        let y = rows
            .into_shape_with_order((n, oh, ow, c))
            .expect("row count is n * oh * ow");
        y.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned()
    }

    /// `(N, Cout, oh, ow)` gradients to patch rows `(N·P, Cout)`.
    fn unfold_grad(d: ArrayView4<'_, T>) -> Array2<T> {
        let (n, c, oh, ow) = d.dim();
        d.permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * oh * ow, c))
            .expect("contiguous")
    }

    pub fn forward(&mut self, x: ArrayView4<'_, T>, cache: bool) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.geometry.in_channels {
            return Err(shape_err("conv forward channels", self.geometry.in_channels, c));
        }
        let (oh, ow) = self.geometry.output_hw(h, w)?;
        let cols = self.unroll(x)?;
        let mut rows = self.backend.forward_rows(cols.view())?;
        if let Some(b) = &self.bias {
            rows += b;
        }
        self.cols = cache.then_some((cols, (n, c, h, w)));
        Ok(Self::fold_rows(rows, n, oh, ow))
    }

    pub fn backward(&mut self, d: ArrayView4<'_, T>) -> Result<Array4<T>> {
        let (_, shape) = self
            .cols
            .as_ref()
            .ok_or(RpuError::State("conv backward before forward"))?;
        let (n, c, h, w) = *shape;
        let d_rows = self.check_grad(d, n, h, w)?;
        let dcols = self.backend.backward_rows(d_rows.view())?;
        let p = dcols.nrows() / n;
        let mut dx = Array4::zeros((n, c, h, w));
        for s in 0..n {
            let img = col2im(dcols.slice(s![s * p..(s + 1) * p, ..]), &self.geometry, h, w)?;
            dx.index_axis_mut(Axis(0), s).assign(&img);
        }
        self.grad_rows = Some(d_rows);
        Ok(dx)
    }

    fn check_grad(&self, d: ArrayView4<'_, T>, n: usize, h: usize, w: usize) -> Result<Array2<T>> {
        let (oh, ow) = self.geometry.output_hw(h, w)?;
        let expected = (n, self.geometry.out_channels, oh, ow);
        if d.dim() != expected {
            return Err(shape_err("conv gradient", expected, d.dim()));
        }
        Ok(Self::unfold_grad(d))
    }

    /// Records the output gradient without computing the input gradient.
    pub fn set_output_grad(&mut self, d: ArrayView4<'_, T>) -> Result<()> {
        let (_, (n, _, h, w)) = self
            .cols
            .as_ref()
            .ok_or(RpuError::State("conv gradient before forward"))?;
        let rows = self.check_grad(d, *n, *h, *w)?;
        self.grad_rows = Some(rows);
        Ok(())
    }

    /// One update per patch column, ordered by (sample, patch).
    pub fn update(&mut self, x: ArrayView4<'_, T>, d: ArrayView4<'_, T>, lr: f64) -> Result<()> {
        let (n, _, h, w) = x.dim();
        let cols = self.unroll(x)?;
        let rows = self.check_grad(d, n, h, w)?;
        self.backend.update_rows(cols.view(), rows.view(), lr)?;
        update_bias(&mut self.bias, rows.view(), lr);
        Ok(())
    }

    pub fn update_cached(&mut self, lr: f64) -> Result<()> {
        let (cols, _) = self
            .cols
            .take()
            .ok_or(RpuError::State("conv update without a cached forward input"))?;
        let rows = self
            .grad_rows
            .take()
            .ok_or(RpuError::State("conv update without a cached output gradient"))?;
        self.backend.update_rows(cols.view(), rows.view(), lr)?;
        update_bias(&mut self.bias, rows.view(), lr);
        Ok(())
    }
}
