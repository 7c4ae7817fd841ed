//! Digital-side operators computed in full precision.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, ArrayViewD, Axis, IxDyn};

use crate::error::{config_err, shape_err, Result, RpuError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Default)]
pub struct Relu<T: Scalar> {
    mask: Option<ArrayD<bool>>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self {
            mask: None,
            _t: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: ArrayViewD<'_, T>) -> ArrayD<T> {
        self.mask = Some(x.mapv(|v| v > T::zero()));
        x.mapv(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward(&mut self, d: ArrayViewD<'_, T>) -> Result<ArrayD<T>> {
        let mask = self.mask.as_ref().ok_or(RpuError::State("relu backward before forward"))?;
        if mask.shape() != d.shape() {
            return Err(shape_err("relu gradient", format!("{:?}", mask.shape()), format!("{:?}", d.shape())));
        }
        let mut out = d.to_owned();
        ndarray::Zip::from(&mut out).and(mask).for_each(|o, &m| {
            if !m {
                *o = T::zero();
            }
        });
        Ok(out)
    }
}

/// Max pooling over square windows of `(N, C, H, W)` activations, no padding.
#[derive(Debug, Clone)]
pub struct MaxPool<T: Scalar> {
    pub size: usize,
    pub stride: usize,
    /// Flat `(iy, ix)` of each output's argmax, plus the input shape.
    argmax: Option<(Array4<usize>, (usize, usize, usize, usize))>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool<T> {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(config_err("maxpool size and stride must be >= 1"));
        }
        Ok(Self {
            size,
            stride,
            argmax: None,
            _t: std::marker::PhantomData,
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.size || w < self.size {
            return Err(config_err(format!("maxpool window {} larger than input {h}x{w}", self.size)));
        }
        Ok(((h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1))
    }

    pub fn forward(&mut self, x: ArrayView4<'_, T>) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w)?;
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut arg = Array4::zeros((n, c, oh, ow));
        for s in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (y0, x0) = (oy * self.stride, ox * self.stride);
                        let mut best = (y0, x0);
                        for iy in y0..y0 + self.size {
                            for ix in x0..x0 + self.size {
                                if x[[s, ch, iy, ix]] > x[[s, ch, best.0, best.1]] {
                                    best = (iy, ix);
                                }
                            }
                        }
                        y[[s, ch, oy, ox]] = x[[s, ch, best.0, best.1]];
                        arg[[s, ch, oy, ox]] = best.0 * w + best.1;
                    }
                }
            }
        }
        self.argmax = Some((arg, (n, c, h, w)));
        Ok(y)
    }

    pub fn backward(&mut self, d: ArrayView4<'_, T>) -> Result<Array4<T>> {
        let (arg, shape) = self
            .argmax
            .as_ref()
            .ok_or(RpuError::State("maxpool backward before forward"))?;
        if d.dim() != arg.dim() {
            return Err(shape_err("maxpool gradient", arg.dim(), d.dim()));
        }
        let w = shape.3;
        let mut dx = Array4::zeros(*shape);
        for ((s, ch, oy, ox), &g) in d.indexed_iter() {
            let flat = arg[[s, ch, oy, ox]];
            dx[[s, ch, flat / w, flat % w]] += g;
        }
        Ok(dx)
    }
}

/// Reshapes `(N, ...)` to `(N, features)` and back.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    shape: Option<IxDyn>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: ArrayViewD<'_, T>) -> Result<Array2<T>> {
        if x.ndim() < 2 {
            return Err(shape_err("flatten rank", ">= 2", x.ndim()));
        }
        let n = x.shape()[0];
        let f = x.len() / n.max(1);
        self.shape = Some(x.raw_dim());
        Ok(x.as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, f))
            .expect("element count preserved"))
    }

    pub fn backward<T: Scalar>(&self, d: ArrayView2<'_, T>) -> Result<ArrayD<T>> {
        let shape = self.shape.clone().ok_or(RpuError::State("flatten backward before forward"))?;
        d.as_standard_layout()
            .into_owned()
            .into_shape_with_order(shape.clone())
            .map_err(|_| shape_err("flatten gradient", format!("{shape:?}"), format!("{:?}", d.dim())))
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn softmax_xent<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (n, k) = logits.dim();
    if n != labels.len() {
        return Err(shape_err("softmax_xent labels", n, labels.len()));
    }
    if n == 0 {
        return Err(RpuError::Empty("softmax_xent batch"));
    }
    let inv_n = T::from_usize(n).expect("batch fits").recip();
    let mut grad = Array2::zeros((n, k));
    let mut loss = T::zero();
    for ((row, mut g), &label) in logits.axis_iter(Axis(0)).zip(grad.rows_mut()).zip(labels) {
        if label >= k {
            return Err(shape_err("softmax_xent label", format!("< {k}"), label));
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (gi, &v) in g.iter_mut().zip(row.iter()) {
            *gi = (v - m).exp();
            z += *gi;
        }
        loss += z.ln() - (row[label] - m);
        g.mapv_inplace(|e| e / z * inv_n);
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Index of the largest logit per row; the first wins on ties.
pub fn argmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
