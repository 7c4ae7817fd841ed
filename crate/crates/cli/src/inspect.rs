//! The `inspect` command: weight statistics of a saved network.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rpu_core::layers::MatrixBackend;
use rpu_core::remap::snr_estimate;
use rpu_core::{Network, NetworkCheckpoint};
use serde::Serialize;

use crate::error::CliError;

/// Number of random inputs behind each SNR estimate.
pub const SNR_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside land in the end bins.
    pub fn new(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for v in values {
            let k = ((v - lo) / width).floor();
            let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(bins - 1) };
            counts[k] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the bin containing `v`.
    pub fn bin_of(&self, v: f64) -> usize {
        let bins = self.counts.len();
        let k = ((v - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        (k.max(0.0) as usize).min(bins - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnrSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub analog: bool,
    pub shape: (usize, usize),
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
    /// Digital output factor of the remapped layer.
    pub out_scale: Option<f64>,
    /// Share of weights within one `dw_min` of either bound.
    pub saturation: Option<f64>,
    /// `(max - min) / dw_min`.
    pub state_span: Option<f64>,
    /// Device states available between the bounds.
    pub states: Option<f64>,
    /// Per-row SNR over standard normal inputs; absent without output noise.
    pub snr: Option<SnrSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub mode: String,
    pub seed: u64,
    pub layers: Vec<LayerReport>,
}

pub fn inspect_file(path: &Path, bins: usize, seed: u64) -> Result<Report, CliError> {
    let cp = NetworkCheckpoint::load(path)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    inspect(&cp, bins, seed)
}

pub fn inspect(cp: &NetworkCheckpoint, bins: usize, seed: u64) -> Result<Report, CliError> {
    if bins == 0 {
        return Err(CliError::Config("--bins must be >= 1".into()));
    }
    let net = Network::<f64>::from_checkpoint(cp)
        .map_err(|e| CliError::Config(format!("invalid checkpoint: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = net.weight_layer_names();
    let backends = net.layers().iter().filter_map(|l| l.backend());
    let mut layers = Vec::new();
    for (name, backend) in names.into_iter().zip(backends) {
        layers.push(match backend {
            MatrixBackend::Analog(m) => {
                let w = m.tile.read_weights();
                let dev = *m.tile.device();
                let bound = dev.w_bound;
                let mut r = summarize(name, &w, Histogram::new(w.iter().copied(), -bound, bound, bins));
                r.analog = true;
                r.out_scale = Some(m.remap.out_scale);
                r.saturation = Some(
                    w.iter().filter(|v| v.abs() >= bound - dev.dw_min).count() as f64 / w.len().max(1) as f64,
                );
                r.state_span = Some((r.max - r.min) / dev.dw_min);
                r.states = Some(dev.num_states());
                if dev.out_noise_std > 0.0 {
                    let inputs = Array2::from_shape_simple_fn((SNR_SAMPLES, w.ncols()), || StandardNormal.sample(&mut rng));
                    let snr = snr_estimate(&m.tile, inputs.view(), dev.out_noise_std)?;
                    r.snr = Some(SnrSummary {
                        mean: snr.iter().sum::<f64>() / snr.len() as f64,
                        min: snr.iter().copied().fold(f64::INFINITY, f64::min),
                        max: snr.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    });
                }
                r
            }
            MatrixBackend::Float(m) => {
                let w = &m.weights;
                let a = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let a = if a > 0.0 { a } else { 1.0 };
                summarize(name, w, Histogram::new(w.iter().copied(), -a, a, bins))
            }
        });
    }
    Ok(Report {
        mode: format!("{:?}", cp.mode),
        seed: cp.seed,
        layers,
    })
}

fn summarize(name: String, w: &Array2<f64>, histogram: Histogram) -> LayerReport {
    let n = w.len().max(1) as f64;
    let mean = w.sum() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    LayerReport {
        name,
        analog: false,
        shape: w.dim(),
        min: w.iter().copied().fold(f64::INFINITY, f64::min),
        max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        std: var.sqrt(),
        histogram,
        out_scale: None,
        saturation: None,
        state_span: None,
        states: None,
        snr: None,
    }
}

pub fn render(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode {}, seed {}", report.mode, report.seed);
    for l in &report.layers {
        let _ = writeln!(
            s,
            "\n{} ({}, {}x{})",
            l.name,
            if l.analog { "analog" } else { "float" },
            l.shape.0,
            l.shape.1
        );
        let _ = writeln!(
            s,
            "  weights   min {:.5}  max {:.5}  mean {:.5}  std {:.5}",
            l.min, l.max, l.mean, l.std
        );
        if let Some(o) = l.out_scale {
            let _ = writeln!(s, "  out_scale {o:.5}");
        }
        if let Some(sat) = l.saturation {
            let _ = writeln!(s, "  saturated {:.4}%", sat * 100.0);
        }
        if let (Some(span), Some(states)) = (l.state_span, l.states) {
            let _ = writeln!(s, "  span      {span:.0} of {states:.0} states ({:.1}%)", 100.0 * span / states);
        }
        if let Some(snr) = &l.snr {
            let _ = writeln!(
                s,
                "  snr       mean {:.1} dB  min {:.1} dB  max {:.1} dB",
                db(snr.mean),
                db(snr.min),
                db(snr.max)
            );
        }
        let h = &l.histogram;
        let total = h.total().max(1) as f64;
        let peak = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let width = (h.hi - h.lo) / h.counts.len() as f64;
        for (k, &c) in h.counts.iter().enumerate() {
            let lo = h.lo + k as f64 * width;
            let bar = "#".repeat((40.0 * c as f64 / peak).round() as usize);
            let _ = writeln!(s, "  {:>9.4} {:>7.3}% {bar}", lo, 100.0 * c as f64 / total);
        }
    }
    s
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}
