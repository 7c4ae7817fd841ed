//! Declarative network description and the layer stack built from it.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, Ix2, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::layers::zscore::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::layers::{
    softmax_xent, AnalogMatrix, Conv2d, ConvGeometry, Flatten, FloatMatrix, FullyConnected, MatrixBackend, MaxPool,
    MvmStats, NormMode, Relu, ZScoreNorm,
};
use crate::management::IoManagement;
use crate::pulse::PulseConfig;
use crate::remap::{init_weights, make_remap, make_remap_with_beta, RemapConfig};
use crate::scalar::Scalar;
use crate::tile::{AnalogTile, ConverterConfig, DeviceConfig, TileCheckpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Weight layers on simulated tiles.
    Analog,
    /// Plain floating-point weights and SGD.
    #[serde(alias = "float")]
    FloatReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemapSpec {
    pub enabled: bool,
    pub gamma: f64,
    /// Overrides the default `√3/γ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl Default for RemapSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            gamma: 0.4,
            beta: None,
        }
    }
}

impl RemapSpec {
    pub fn resolve(&self, n_in: usize, w_bound: f64) -> Result<RemapConfig> {
        match self.beta {
            Some(beta) => make_remap_with_beta(self.gamma, beta, n_in, w_bound, self.enabled),
            None => make_remap(self.gamma, n_in, w_bound, self.enabled),
        }
    }
}

/// Device, converter, pulse, I/O and remap settings of a weight layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RpuSpec {
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub converters: ConverterConfig,
    #[serde(default)]
    pub pulse: PulseConfig,
    #[serde(default)]
    pub io: IoManagement,
    #[serde(default)]
    pub remap: RemapSpec,
}

impl RpuSpec {
    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.converters.validate()?;
        self.pulse.validate()?;
        // gamma and beta are checked by resolving a dummy layer
        self.remap.resolve(1, self.device.w_bound).map(|_| ())
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn default_stride() -> usize {
    1
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Fc {
        out: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rpu: Option<RpuSpec>,
        /// Digital bias, off by default.
        #[serde(default, skip_serializing_if = "is_false")]
        bias: bool,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rpu: Option<RpuSpec>,
        #[serde(default, skip_serializing_if = "is_false")]
        bias: bool,
    },
    Zscore {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Relu,
    Maxpool {
        size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
    },
    Flatten,
}

impl LayerSpec {
    fn is_weight(&self) -> bool {
        matches!(self, Self::Fc { .. } | Self::Conv { .. })
    }

    fn zscore() -> Self {
        Self::Zscore {
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

/// Network architecture and default RPU settings.
///
/// `input_shape` excludes the batch axis: `[features]` or `[C, H, W]`. With
/// `auto_zscore` a z-score layer is inserted in front of every weight layer
/// except the first; `zscore_first` extends that to the first one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub rpu: RpuSpec,
    #[serde(default)]
    pub auto_zscore: bool,
    #[serde(default)]
    pub zscore_first: bool,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// `flatten, fc(hidden), relu, [zscore,] fc(classes)`.
    pub fn mlp(input_shape: Vec<usize>, hidden: usize, classes: usize, rpu: RpuSpec) -> Self {
        Self {
            input_shape,
            rpu,
            auto_zscore: true,
            zscore_first: false,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Fc {
                    out: hidden,
                    rpu: None,
                    bias: false,
                },
                LayerSpec::Relu,
                LayerSpec::Fc {
                    out: classes,
                    rpu: None,
                    bias: false,
                },
            ],
        }
    }

    /// Layer list with the automatic z-score layers inserted.
    pub fn resolved_layers(&self) -> Vec<LayerSpec> {
        if !self.auto_zscore {
            return self.layers.clone();
        }
        let mut out = Vec::with_capacity(self.layers.len() + 4);
        let mut first = true;
        for l in &self.layers {
            if l.is_weight() {
                let preceded = matches!(out.last(), Some(LayerSpec::Zscore { .. }));
                if (!first || self.zscore_first) && !preceded {
                    out.push(LayerSpec::zscore());
                }
                first = false;
            }
            out.push(l.clone());
        }
        out
    }

    /// Checks layer dimensions and returns the output shape per layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        self.rpu.validate()?;
        if !(self.input_shape.len() == 1 || self.input_shape.len() == 3) || self.input_shape.contains(&0) {
            return Err(config_err(format!(
                "input_shape must be [features] or [C, H, W] with nonzero dims, got {:?}",
                self.input_shape
            )));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::new();
        for (i, l) in self.resolved_layers().iter().enumerate() {
            shape = match l {
                LayerSpec::Fc { out, rpu, .. } => {
                    if shape.len() != 1 {
                        return Err(config_err(format!("layer {i}: fc expects flat input, got {shape:?}")));
                    }
                    if *out == 0 {
                        return Err(config_err(format!("layer {i}: fc out must be >= 1")));
                    }
                    if let Some(r) = rpu {
                        r.validate()?;
                    }
                    vec![*out]
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    rpu,
                    ..
                } => {
                    if shape.len() != 3 {
                        return Err(config_err(format!("layer {i}: conv expects [C, H, W] input, got {shape:?}")));
                    }
                    if *out_channels == 0 {
                        return Err(config_err(format!("layer {i}: conv out_channels must be >= 1")));
                    }
                    if let Some(r) = rpu {
                        r.validate()?;
                    }
                    let g = geometry(shape[0], *out_channels, *kernel, *stride, *padding);
                    let (oh, ow) = g
                        .output_hw(shape[1], shape[2])
                        .map_err(|e| config_err(format!("layer {i}: {e}")))?;
                    vec![*out_channels, oh, ow]
                }
                LayerSpec::Zscore { eps, momentum } => {
                    ZScoreNorm::<f64>::with_params(shape[0], *eps, *momentum)
                        .map_err(|e| config_err(format!("layer {i}: {e}")))?;
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::Maxpool { size, stride } => {
                    if shape.len() != 3 {
                        return Err(config_err(format!("layer {i}: maxpool expects [C, H, W] input, got {shape:?}")));
                    }
                    let p = MaxPool::<f64>::new(*size, stride.unwrap_or(*size))
                        .map_err(|e| config_err(format!("layer {i}: {e}")))?;
                    let (oh, ow) = p
                        .output_hw(shape[1], shape[2])
                        .map_err(|e| config_err(format!("layer {i}: {e}")))?;
                    vec![shape[0], oh, ow]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            shapes.push(shape.clone());
        }
        if shape.len() != 1 {
            return Err(config_err(format!("network output must be flat logits, got {shape:?}")));
        }
        if !self.resolved_layers().iter().any(LayerSpec::is_weight) {
            return Err(config_err("network has no weight layer"));
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.validate()?.last().map(|s| s[0]).unwrap_or(0))
    }
}

fn geometry(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels,
        out_channels,
        kernel_h: kernel,
        kernel_w: kernel,
        stride,
        padding,
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T: Scalar> {
    Fc(FullyConnected<T>),
    Conv(Conv2d<T>),
    ZScore(ZScoreNorm<T>),
    Relu(Relu<T>),
    MaxPool(MaxPool<T>),
    Flatten(Flatten),
}

impl<T: Scalar> Layer<T> {
    pub fn backend(&self) -> Option<&MatrixBackend<T>> {
        match self {
            Self::Fc(l) => Some(&l.backend),
            Self::Conv(l) => Some(&l.backend),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Array1<T>> {
        match self {
            Self::Fc(l) => l.bias.as_ref(),
            Self::Conv(l) => l.bias.as_ref(),
            _ => None,
        }
    }

    fn bias_mut(&mut self) -> Option<&mut Array1<T>> {
        match self {
            Self::Fc(l) => l.bias.as_mut(),
            Self::Conv(l) => l.bias.as_mut(),
            _ => None,
        }
    }

    fn backend_mut(&mut self) -> Option<&mut MatrixBackend<T>> {
        match self {
            Self::Fc(l) => Some(&mut l.backend),
            Self::Conv(l) => Some(&mut l.backend),
            _ => None,
        }
    }
}

/// Statistics of one weight layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub name: String,
    pub stats: MvmStats,
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    spec: NetworkSpec,
    mode: Mode,
    seed: u64,
    layers: Vec<Layer<T>>,
    names: Vec<Option<String>>,
    first_weight: usize,
}

fn to_ix2<T: Scalar>(x: ArrayD<T>, what: &'static str) -> Result<Array2<T>> {
    let nd = x.ndim();
    x.into_dimensionality::<Ix2>()
        .map_err(|_| shape_err(what, "rank 2", format!("rank {nd}")))
}

impl<T: Scalar> Network<T> {
    /// Builds and initialises the network.
    ///
    /// Weight initialisation draws from stream 0 of `seed`; the tile of the
    /// `k`-th weight layer runs on stream `k + 1`.
    pub fn build(spec: &NetworkSpec, mode: Mode, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(0);
        let mut shape = spec.input_shape.clone();
        let mut layers = Vec::new();
        let mut names = Vec::new();
        let mut first_weight = None;
        let (mut n_fc, mut n_conv) = (0, 0);
        for (i, l) in spec.resolved_layers().iter().enumerate() {
            let (layer, name) = match l {
                LayerSpec::Fc { out, rpu, bias } => {
                    let n_in = shape[0];
                    let stream = (n_fc + n_conv + 1) as u64;
                    n_fc += 1;
                    let backend = make_backend(rpu.as_ref().unwrap_or(&spec.rpu), mode, *out, n_in, seed, stream, &mut init_rng)?;
                    shape = vec![*out];
                    let fc = FullyConnected::new(backend);
                    let fc = if *bias { fc.with_bias() } else { fc };
                    (Layer::Fc(fc), Some(format!("fc{n_fc}")))
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    rpu,
                    bias,
                } => {
                    let g = geometry(shape[0], *out_channels, *kernel, *stride, *padding);
                    let stream = (n_fc + n_conv + 1) as u64;
                    n_conv += 1;
                    let backend = make_backend(
                        rpu.as_ref().unwrap_or(&spec.rpu),
                        mode,
                        *out_channels,
                        g.fan_in(),
                        seed,
                        stream,
                        &mut init_rng,
                    )?;
                    let (oh, ow) = g.output_hw(shape[1], shape[2])?;
                    shape = vec![*out_channels, oh, ow];
                    let conv = Conv2d::new(backend, g)?;
                    let conv = if *bias { conv.with_bias() } else { conv };
                    (Layer::Conv(conv), Some(format!("conv{n_conv}")))
                }
                LayerSpec::Zscore { eps, momentum } => {
                    (Layer::ZScore(ZScoreNorm::with_params(shape[0], *eps, *momentum)?), None)
                }
                LayerSpec::Relu => (Layer::Relu(Relu::new()), None),
                LayerSpec::Maxpool { size, stride } => {
                    let p = MaxPool::new(*size, stride.unwrap_or(*size))?;
                    let (oh, ow) = p.output_hw(shape[1], shape[2])?;
                    shape = vec![shape[0], oh, ow];
                    (Layer::MaxPool(p), None)
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    (Layer::Flatten(Flatten::new()), None)
                }
            };
            if name.is_some() && first_weight.is_none() {
                first_weight = Some(i);
            }
            layers.push(layer);
            names.push(name);
        }
        Ok(Self {
            spec: spec.clone(),
            mode,
            seed,
            layers,
            names,
            first_weight: first_weight.expect("validated: at least one weight layer"),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Names of the weight layers in order (`fc1`, `conv1`, ...).
    pub fn weight_layer_names(&self) -> Vec<String> {
        self.names.iter().flatten().cloned().collect()
    }

    /// Forward pass to logits. `train` selects batch statistics in z-score
    /// layers and caches what the backward pass and update need.
    pub fn forward(&mut self, x: ArrayViewD<'_, T>, train: bool) -> Result<Array2<T>> {
        let expect: Vec<usize> = self.spec.input_shape.clone();
        if x.ndim() != expect.len() + 1 || x.shape()[1..] != expect[..] {
            return Err(shape_err("network input", expect, &x.shape()[1..]));
        }
        let mut a: ArrayD<T> = x.to_owned();
        for layer in &mut self.layers {
            a = match layer {
                Layer::Fc(l) => l.forward(to_ix2(a, "fc input")?.view(), train)?.into_dyn(),
                Layer::Conv(l) => {
                    let x4 = a.into_dimensionality::<Ix4>().map_err(|_| shape_err("conv input", "rank 4", "other"))?;
                    l.forward(x4.view(), train)?.into_dyn()
                }
                Layer::ZScore(l) => {
                    l.mode = if train { NormMode::Train } else { NormMode::Test };
                    l.forward(a.view())?
                }
                Layer::Relu(l) => l.forward(a.view()),
                Layer::MaxPool(l) => {
                    let x4 = a.into_dimensionality::<Ix4>().map_err(|_| shape_err("maxpool input", "rank 4", "other"))?;
                    l.forward(x4.view())?.into_dyn()
                }
                Layer::Flatten(l) => l.forward(a.view())?.into_dyn(),
            };
        }
        to_ix2(a, "network output")
    }

    /// Back-propagates the logit gradient. The first weight layer only
    /// records its output gradient; nothing below it is computed.
    pub fn backward(&mut self, grad: ArrayView2<'_, T>) -> Result<()> {
        let mut d: ArrayD<T> = grad.to_owned().into_dyn();
        for i in (self.first_weight..self.layers.len()).rev() {
            let first = i == self.first_weight;
            d = match &mut self.layers[i] {
                Layer::Fc(l) => {
                    let d2 = to_ix2(d, "fc gradient")?;
                    if first {
                        l.set_output_grad(d2);
                        return Ok(());
                    }
                    l.backward(d2.view())?.into_dyn()
                }
                Layer::Conv(l) => {
                    let d4 = d.into_dimensionality::<Ix4>().map_err(|_| shape_err("conv gradient", "rank 4", "other"))?;
                    if first {
                        return l.set_output_grad(d4.view());
                    }
                    l.backward(d4.view())?.into_dyn()
                }
                Layer::ZScore(l) => l.backward(d.view())?,
                Layer::Relu(l) => l.backward(d.view())?,
                Layer::MaxPool(l) => {
                    let d4 = d.into_dimensionality::<Ix4>().map_err(|_| shape_err("maxpool gradient", "rank 4", "other"))?;
                    l.backward(d4.view())?.into_dyn()
                }
                Layer::Flatten(l) => l.backward(to_ix2(d, "flatten gradient")?.view())?,
            };
        }
        Ok(())
    }

    /// `W ← W - lr Σ_k d_k x_kᵀ` on every weight layer from the cached
    /// forward inputs and backward gradients.
    pub fn update(&mut self, lr: f64) -> Result<()> {
        for layer in &mut self.layers {
            match layer {
                Layer::Fc(l) => l.update_cached(lr)?,
                Layer::Conv(l) => l.update_cached(lr)?,
                _ => {}
            }
        }
        Ok(())
    }

    /// One SGD step on a batch; returns the mean cross-entropy.
    ///
    /// The logit gradient is that of the mean batch loss, so each sample's
    /// update carries a `1/N` factor: the per-sample pulsed updates of an
    /// analog network run at an effective `lr / N` and sum to the same
    /// expected change as one mean-gradient step.
    pub fn train_step(&mut self, x: ArrayViewD<'_, T>, labels: &[usize], lr: f64) -> Result<T> {
        let logits = self.forward(x, true)?;
        let (loss, grad) = softmax_xent(logits.view(), labels)?;
        if !loss.is_finite() {
            return Ok(loss);
        }
        self.backward(grad.view())?;
        self.update(lr)?;
        Ok(loss)
    }

    pub fn predict(&mut self, x: ArrayViewD<'_, T>) -> Result<Array2<T>> {
        self.forward(x, false)
    }

    pub fn layer_stats(&self) -> Vec<LayerStats> {
        self.layers
            .iter()
            .zip(&self.names)
            .filter_map(|(l, n)| {
                let stats = l.backend()?.stats().unwrap_or_default();
                Some(LayerStats {
                    name: n.clone()?,
                    stats,
                })
            })
            .collect()
    }

    pub fn reset_stats(&mut self) {
        for l in &mut self.layers {
            if let Some(b) = l.backend_mut() {
                b.reset_stats();
            }
        }
    }

    pub fn checkpoint(&self) -> NetworkCheckpoint {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Fc(FullyConnected { backend, .. }) | Layer::Conv(Conv2d { backend, .. }) => match backend {
                    MatrixBackend::Analog(a) => LayerState::Tile(a.tile.checkpoint()),
                    MatrixBackend::Float(f) => LayerState::Float {
                        rows: f.weights.nrows(),
                        cols: f.weights.ncols(),
                        weights: f.weights.iter().map(|v| v.as_f64()).collect(),
                    },
                },
                Layer::ZScore(z) => LayerState::ZScore {
                    running_mean: z.running_mean.iter().map(|v| v.as_f64()).collect(),
                    running_var: z.running_var.iter().map(|v| v.as_f64()).collect(),
                },
                _ => LayerState::Stateless,
            })
            .collect();
        let mut biases: Vec<Option<Vec<f64>>> = self
            .layers
            .iter()
            .map(|l| l.bias().map(|b| b.iter().map(|v| v.as_f64()).collect()))
            .collect();
        if biases.iter().all(Option::is_none) {
            biases.clear();
        }
        NetworkCheckpoint {
            format: NETWORK_FORMAT.to_string(),
            spec: self.spec.clone(),
            mode: self.mode,
            seed: self.seed,
            layers,
            biases,
        }
    }

    pub fn from_checkpoint(cp: &NetworkCheckpoint) -> Result<Self> {
        if cp.format != NETWORK_FORMAT {
            return Err(config_err(format!(
                "unsupported network format {:?}, expected {NETWORK_FORMAT:?}",
                cp.format
            )));
        }
        let mut net = Self::build(&cp.spec, cp.mode, cp.seed)?;
        if cp.layers.len() != net.layers.len() {
            return Err(shape_err("checkpoint layers", net.layers.len(), cp.layers.len()));
        }
        for (layer, state) in net.layers.iter_mut().zip(&cp.layers) {
            match (layer, state) {
                (Layer::Fc(FullyConnected { backend, .. }) | Layer::Conv(Conv2d { backend, .. }), st) => {
                    match (backend, st) {
                        (MatrixBackend::Analog(a), LayerState::Tile(t)) => {
                            let tile = AnalogTile::from_checkpoint(t)?;
                            if tile.shape() != a.tile.shape() {
                                return Err(shape_err("checkpoint tile", a.tile.shape(), tile.shape()));
                            }
                            a.tile = tile;
                        }
                        (MatrixBackend::Float(f), LayerState::Float { rows, cols, weights }) => {
                            if (*rows, *cols) != f.weights.dim() || weights.len() != rows * cols {
                                return Err(shape_err("checkpoint weights", f.weights.dim(), (*rows, *cols)));
                            }
                            f.weights = Array2::from_shape_vec((*rows, *cols), weights.iter().map(|&v| T::lit(v)).collect())
                                .expect("length checked");
                        }
                        _ => return Err(config_err("checkpoint layer kind does not match the network")),
                    }
                }
                (Layer::ZScore(z), LayerState::ZScore { running_mean, running_var }) => {
                    if running_mean.len() != z.channels || running_var.len() != z.channels {
                        return Err(shape_err("checkpoint zscore", z.channels, running_mean.len()));
                    }
                    z.running_mean = running_mean.iter().map(|&v| T::lit(v)).collect();
                    z.running_var = running_var.iter().map(|&v| T::lit(v)).collect();
                }
                (Layer::Relu(_) | Layer::MaxPool(_) | Layer::Flatten(_), LayerState::Stateless) => {}
                _ => return Err(config_err("checkpoint layer kind does not match the network")),
            }
        }
        if !cp.biases.is_empty() {
            if cp.biases.len() != net.layers.len() {
                return Err(shape_err("checkpoint biases", net.layers.len(), cp.biases.len()));
            }
            for (layer, saved) in net.layers.iter_mut().zip(&cp.biases) {
                match (layer.bias_mut(), saved) {
                    (Some(b), Some(v)) if v.len() == b.len() => {
                        b.iter_mut().zip(v).for_each(|(d, &s)| *d = T::lit(s));
                    }
                    (None, None) => {}
                    _ => return Err(config_err("checkpoint biases do not match the network")),
                }
            }
        }
        Ok(net)
    }
}

fn make_backend<T: Scalar>(
    rpu: &RpuSpec,
    mode: Mode,
    d_out: usize,
    n_in: usize,
    seed: u64,
    stream: u64,
    init_rng: &mut ChaCha8Rng,
) -> Result<MatrixBackend<T>> {
    match mode {
        Mode::Analog => {
            let remap = rpu.remap.resolve(n_in, rpu.device.w_bound)?;
            let mut tile = AnalogTile::with_stream(d_out, n_in, rpu.device, rpu.converters, seed, stream)?;
            init_weights(&mut tile, &remap, init_rng)?;
            Ok(MatrixBackend::Analog(AnalogMatrix::new(tile, remap, rpu.pulse, rpu.io)))
        }
        Mode::FloatReference => {
            let a = (3.0 / n_in as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((d_out, n_in), || T::lit(init_rng.random_range(-a..a)));
            Ok(MatrixBackend::Float(FloatMatrix { weights }))
        }
    }
}

pub const NETWORK_FORMAT: &str = "rpu-network/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerState {
    Tile(TileCheckpoint),
    Float { rows: usize, cols: usize, weights: Vec<f64> },
    ZScore { running_mean: Vec<f64>, running_var: Vec<f64> },
    Stateless,
}

/// JSON-serialisable network state: the spec plus per-layer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format: String,
    pub spec: NetworkSpec,
    pub mode: Mode,
    pub seed: u64,
    pub layers: Vec<LayerState>,
    /// Digital biases aligned with `layers`; empty when no layer has one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub biases: Vec<Option<Vec<f64>>>,
}

impl NetworkCheckpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};

    fn exact_rpu(remap: bool) -> RpuSpec {
        RpuSpec {
            device: DeviceConfig::baseline().noise_free(),
            converters: ConverterConfig {
                dac_bits: 52,
                dac_bound: 1.0,
                adc_bits: 52,
                adc_bound: 100.0,
            },
            remap: RemapSpec {
                enabled: remap,
                ..RemapSpec::default()
            },
            ..RpuSpec::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    fn cnn_spec(rpu: RpuSpec) -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![2, 6, 6],
            rpu,
            auto_zscore: true,
            zscore_first: false,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    rpu: None,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Maxpool { size: 2, stride: None },
                LayerSpec::Flatten,
                LayerSpec::Fc {
                    out: 4,
                    rpu: None,
                    bias: false,
                },
            ],
        }
    }

    /// Float network holding the effective weights of an analog one.
    fn float_twin(net: &Network<f64>) -> Network<f64> {
        let mut twin = Network::build(net.spec(), Mode::FloatReference, 0).unwrap();
        for (t, a) in twin.layers_mut().iter_mut().zip(net.layers()) {
            if let (Some(MatrixBackend::Float(f)), Some(b)) = (t.backend_mut(), a.backend()) {
                f.weights = b.effective_weights();
            }
        }
        twin
    }

    #[test]
    fn auto_zscore_skips_first_weight_layer() {
        let spec = NetworkSpec::mlp(vec![8], 5, 3, RpuSpec::default());
        let kinds: Vec<_> = spec.resolved_layers().iter().map(|l| format!("{l:?}")).collect();
        assert!(kinds[0].starts_with("Flatten"));
        assert!(kinds[1].starts_with("Fc"));
        assert!(kinds[3].starts_with("Zscore"));
        assert_eq!(kinds.len(), 5);
        let with_first = NetworkSpec {
            zscore_first: true,
            ..spec
        };
        assert!(format!("{:?}", with_first.resolved_layers()[1]).starts_with("Zscore"));
    }

    #[test]
    fn validation_reports_bad_dims() {
        let mut spec = cnn_spec(RpuSpec::default());
        assert_eq!(spec.num_classes().unwrap(), 4);
        spec.layers.remove(3);
        assert!(spec.validate().is_err());
        let spec = NetworkSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::Relu],
            ..NetworkSpec::mlp(vec![4], 2, 2, RpuSpec::default())
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn noise_free_exact_analog_matches_float_twin() {
        for remap in [true, false] {
            let spec = cnn_spec(exact_rpu(remap));
            let mut net = Network::<f64>::build(&spec, Mode::Analog, 5).unwrap();
            let mut twin = float_twin(&net);
            let x = random(&[3, 2, 6, 6], 6);
            let a = net.forward(x.view(), true).unwrap();
            let b = twin.forward(x.view(), true).unwrap();
            for (p, q) in a.iter().zip(b.iter()) {
                assert!((p - q).abs() <= 1e-6 * q.abs().max(1e-3), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn first_update_direction_matches_float_reference() {
        // Same effective weights, one step: the analog change is a noisy
        // version of the float change and points the same way on average.
        let spec = NetworkSpec::mlp(vec![6], 5, 3, exact_rpu(true));
        let mut net = Network::<f64>::build(&spec, Mode::Analog, 1).unwrap();
        let mut twin = float_twin(&net);
        let x = random(&[4, 6], 2);
        let labels = [0, 1, 2, 1];
        let before: Vec<_> = net.layers().iter().filter_map(|l| l.backend().map(|b| b.effective_weights())).collect();
        net.train_step(x.view(), &labels, 0.5).unwrap();
        twin.train_step(x.view(), &labels, 0.5).unwrap();
        let mut dot = 0.0;
        for ((a, t), w0) in net
            .layers()
            .iter()
            .filter_map(Layer::backend)
            .zip(twin.layers().iter().filter_map(Layer::backend))
            .zip(before)
        {
            dot += ((&a.effective_weights() - &w0) * (&t.effective_weights() - &w0)).sum();
        }
        assert!(dot > 0.0);
    }

    #[test]
    fn update_touches_only_weight_layers_own_tiles() {
        let spec = NetworkSpec::mlp(vec![6], 5, 3, RpuSpec::default());
        let mut net = Network::<f64>::build(&spec, Mode::Analog, 1).unwrap();
        let x = random(&[4, 6], 2);
        net.forward(x.view(), true).unwrap();
        let (_, grad) = softmax_xent(net.forward(x.view(), true).unwrap().view(), &[0, 1, 2, 0]).unwrap();
        // zero gradient on the last layer output: nothing below changes
        net.backward((grad * 0.0).view()).unwrap();
        let before = net.checkpoint();
        net.update(0.1).unwrap();
        let after = net.checkpoint();
        for (b, a) in before.layers.iter().zip(&after.layers) {
            if let (LayerState::Tile(b), LayerState::Tile(a)) = (b, a) {
                assert_eq!(b.weights, a.weights);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let spec = cnn_spec(RpuSpec::default());
        let mut net = Network::<f32>::build(&spec, Mode::Analog, 3).unwrap();
        let x = random(&[2, 2, 6, 6], 4).mapv(|v| v as f32);
        net.train_step(x.view(), &[1, 3], 0.1).unwrap();
        assert!(net.layers().iter().any(|l| l.bias().is_some_and(|b| b.iter().any(|v| *v != 0.0))));
        let json = serde_json::to_string(&net.checkpoint()).unwrap();
        let cp: NetworkCheckpoint = serde_json::from_str(&json).unwrap();
        let mut restored = Network::<f32>::from_checkpoint(&cp).unwrap();
        let a = net.predict(x.view()).unwrap();
        let b = restored.predict(x.view()).unwrap();
        assert_eq!(a, b);
        net.train_step(x.view(), &[0, 2], 0.1).unwrap();
        restored.train_step(x.view(), &[0, 2], 0.1).unwrap();
        assert_eq!(net.checkpoint(), restored.checkpoint());
    }

    #[test]
    fn float_checkpoint_round_trip() {
        let spec = NetworkSpec::mlp(vec![6], 5, 3, RpuSpec::default());
        let net = Network::<f64>::build(&spec, Mode::FloatReference, 3).unwrap();
        let restored = Network::<f64>::from_checkpoint(&net.checkpoint()).unwrap();
        assert_eq!(net.checkpoint(), restored.checkpoint());
    }

    #[test]
    fn spec_serde_round_trip() {
        let spec = cnn_spec(RpuSpec::default());
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&s).unwrap(), spec);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let spec = NetworkSpec::mlp(vec![6], 5, 3, RpuSpec::default());
        let mut net = Network::<f64>::build(&spec, Mode::Analog, 1).unwrap();
        assert!(net.forward(random(&[2, 5], 1).view(), false).is_err());
    }
}
