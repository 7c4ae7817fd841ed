//! Plain mini-batch SGD with a step-decay learning rate.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{config_err, shape_err, Result, RpuError};
use crate::layers::{argmax_rows, softmax_xent};
use crate::network::Network;
use crate::scalar::Scalar;

/// ChaCha stream of the epoch shuffles.
pub const SHUFFLE_STREAM: u64 = 1000;
/// ChaCha stream of the augmentation draws.
pub const AUGMENT_STREAM: u64 = 1001;
/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e4;
const EVAL_BATCH: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(config_err(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(config_err(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(config_err("decay_every must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate of the 0-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEpochStats {
    pub name: String,
    /// Mean bound-management passes per forward product.
    pub bm_mean: f64,
    /// Share of forward products still saturated after the last pass.
    pub sat_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent of misclassified training samples, measured during the epoch.
    pub train_err: f64,
    pub test_err: f64,
    pub lr: f64,
    pub layers: Vec<LayerEpochStats>,
}

fn error_count<T: Scalar>(logits: ndarray::ArrayView2<'_, T>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p != l).count()
}

/// Top-1 test error in percent, z-score layers in test mode.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(RpuError::Empty("evaluation split"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut wrong = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let logits = net.predict(x.view())?;
        wrong += error_count(logits.view(), &y);
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

/// Trains `net` and evaluates on `test` after every epoch.
///
/// Each epoch draws a fresh permutation from the shuffle stream of
/// `cfg.seed` (or reuses the first one when `shuffle_per_epoch` is off),
/// walks it in batches, and for each batch runs forward, softmax
/// cross-entropy, backward and the per-layer updates in sample order.
/// `observer` sees every epoch's metrics and the network right after the
/// epoch; an error from it stops training.
pub fn train<T: Scalar, F>(
    net: &mut Network<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    mut observer: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&EpochMetrics, &Network<T>) -> Result<()>,
{
    cfg.validate()?;
    aug.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train_set.is_empty() {
        return Err(RpuError::Empty("training split"));
    }
    if train_set.sample_shape() != net.spec().input_shape {
        return Err(shape_err("training samples", &net.spec().input_shape, train_set.sample_shape()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(AUGMENT_STREAM);
    let units = train_set.channel_units();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch > 0 && aug.shuffle_per_epoch {
            order.shuffle(&mut shuffle_rng);
        }
        let lr = cfg.lr_at_epoch(epoch);
        net.reset_stats();
        let (mut loss_sum, mut wrong) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(chunk);
            let x = augment(x.view(), aug, &units, &train_set.value_range, &mut aug_rng)?;
            let logits = net.forward(x.view(), true)?;
            let (loss, grad) = softmax_xent(logits.view(), &y)?;
            let loss = loss.as_f64();
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(RpuError::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            wrong += error_count(logits.view(), &y);
            net.backward(grad.view())?;
            net.update(lr)?;
        }
        let layers = net
            .layer_stats()
            .into_iter()
            .map(|s| LayerEpochStats {
                name: s.name,
                bm_mean: s.stats.mean_bm_iterations(),
                sat_rate: s.stats.saturation_rate(),
            })
            .collect();
        let n = train_set.len() as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_err: 100.0 * wrong as f64 / n,
            test_err: evaluate(net, test_set)?,
            lr,
            layers,
        };
        observer(&m, net)?;
        history.push(m);
    }
    Ok(history)
}

/// Column names of the metrics CSV for the given weight layers.
pub fn metrics_header(layer_names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "train_loss", "train_err", "test_err", "lr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for n in layer_names {
        h.push(format!("{n}_bm_mean"));
        h.push(format!("{n}_sat_rate"));
    }
    h
}

/// Per-epoch metrics as CSV, one row per epoch, header always written.
pub struct MetricsCsv<W: Write> {
    writer: csv::Writer<W>,
    columns: usize,
}

impl<W: Write> MetricsCsv<W> {
    pub fn new(sink: W, layer_names: &[String]) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(sink);
        let header = metrics_header(layer_names);
        writer.write_record(&header)?;
        writer.flush()?;
        Ok(Self {
            writer,
            columns: header.len(),
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        let mut row = vec![
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.train_err.to_string(),
            m.test_err.to_string(),
            m.lr.to_string(),
        ];
        for l in &m.layers {
            row.push(l.bm_mean.to_string());
            row.push(l.sat_rate.to_string());
        }
        if row.len() != self.columns {
            return Err(shape_err("metrics row", self.columns, row.len()));
        }
        self.writer.write_record(&row)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| RpuError::Io(std::io::Error::other(e.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, Split};
    use crate::network::{Mode, NetworkSpec, RpuSpec};
    use ndarray::{Array2, ArrayD, IxDyn};

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr0: 0.1,
            decay_factor: 0.8,
            decay_every: 5,
            epochs,
            batch_size: 10,
            seed: 3,
        }
    }

    fn blobs(sep: f64) -> (Dataset<f64>, Dataset<f64>) {
        (
            make_synthetic(3, 6, 300, sep, 1, Split::Train).unwrap(),
            make_synthetic(3, 6, 150, sep, 2, Split::Test).unwrap(),
        )
    }

    fn mlp() -> NetworkSpec {
        NetworkSpec::mlp(vec![6], 16, 3, RpuSpec::default())
    }

    #[test]
    fn schedule_steps() {
        let c = TrainConfig {
            decay_every: 20,
            ..cfg(1)
        };
        assert_eq!(c.lr_at_epoch(0), 0.1);
        assert!((c.lr_at_epoch(19) - 0.1).abs() < 1e-15);
        assert!((c.lr_at_epoch(20) - 0.08).abs() < 1e-15);
        assert!((c.lr_at_epoch(40) - 0.064).abs() < 1e-15);
        let lrs: Vec<f64> = (0..100).map(|e| c.lr_at_epoch(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            TrainConfig { lr0: 0.0, ..cfg(1) },
            TrainConfig {
                decay_factor: 1.5,
                ..cfg(1)
            },
            TrainConfig {
                batch_size: 0,
                ..cfg(1)
            },
            TrainConfig {
                decay_every: 0,
                ..cfg(1)
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_epochs_leaves_network() {
        let (tr, te) = blobs(10.0);
        let mut net = Network::<f64>::build(&mlp(), Mode::Analog, 1).unwrap();
        let before = net.checkpoint();
        let m = train(&mut net, &tr, &te, &cfg(0), &AugmentConfig::none(), |_, _| Ok(())).unwrap();
        assert!(m.is_empty());
        assert_eq!(net.checkpoint(), before);
    }

    #[test]
    fn float_reference_learns_separable_blobs() {
        let (tr, te) = blobs(10.0);
        let mut net = Network::<f64>::build(&mlp(), Mode::FloatReference, 1).unwrap();
        let m = train(&mut net, &tr, &te, &cfg(20), &AugmentConfig::none(), |_, _| Ok(())).unwrap();
        assert_eq!(m.len(), 20);
        assert!(m.last().unwrap().test_err <= 2.0, "{:?}", m.last());
        assert!(m.iter().all(|e| e.layers.iter().all(|l| l.bm_mean == 0.0)));
    }

    #[test]
    fn analog_learns_separable_blobs() {
        let (tr, te) = blobs(10.0);
        let mut net = Network::<f64>::build(&mlp(), Mode::Analog, 1).unwrap();
        let m = train(&mut net, &tr, &te, &cfg(5), &AugmentConfig::none(), |_, _| Ok(())).unwrap();
        assert!(m.last().unwrap().test_err <= 5.0, "{:?}", m.last());
        assert!(m[0].layers.iter().all(|l| l.bm_mean >= 1.0));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (tr, te) = blobs(3.0);
        let run = |mode| {
            let mut net = Network::<f32>::build(&mlp(), mode, 7).unwrap();
            let tr = Dataset::new(tr.images.mapv(|v| v as f32), tr.labels.clone(), 3, Split::Train).unwrap();
            let te = Dataset::new(te.images.mapv(|v| v as f32), te.labels.clone(), 3, Split::Test).unwrap();
            train(&mut net, &tr, &te, &cfg(3), &AugmentConfig::none(), |_, _| Ok(())).unwrap()
        };
        for mode in [Mode::Analog, Mode::FloatReference] {
            assert_eq!(run(mode), run(mode));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, te) = blobs(10.0);
        let mut tr = tr;
        tr.images[[17, 2]] = f64::INFINITY;
        let mut net = Network::<f64>::build(&mlp(), Mode::FloatReference, 1).unwrap();
        let err = train(&mut net, &tr, &te, &cfg(3), &AugmentConfig::none(), |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, RpuError::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn evaluate_edge_cases() {
        let spec = NetworkSpec {
            auto_zscore: false,
            ..NetworkSpec::mlp(vec![3], 3, 3, RpuSpec::default())
        };
        let mut net = Network::<f64>::build(&spec, Mode::FloatReference, 1).unwrap();
        // identity weights and a relu: one-hot inputs classify perfectly
        for l in net.layers_mut() {
            if let crate::network::Layer::Fc(fc) = l {
                if let crate::layers::MatrixBackend::Float(f) = &mut fc.backend {
                    f.weights = Array2::eye(3);
                }
            }
        }
        let x = ArrayD::from_shape_fn(IxDyn(&[10, 3]), |ix| if ix[1] == ix[0] % 3 { 1.0 } else { 0.0 });
        let ds = Dataset::new(x, (0..10).map(|i| i % 3).collect(), 3, Split::Test).unwrap();
        assert_eq!(evaluate(&mut net, &ds).unwrap(), 0.0);
        let empty = ds.take(0);
        assert!(evaluate(&mut net, &empty).is_err());
    }

    #[test]
    fn noise_free_evaluation_is_repeatable() {
        let (_, te) = blobs(3.0);
        let spec = NetworkSpec::mlp(
            vec![6],
            16,
            3,
            RpuSpec {
                device: crate::tile::DeviceConfig::baseline().noise_free(),
                ..RpuSpec::default()
            },
        );
        let mut net = Network::<f64>::build(&spec, Mode::Analog, 1).unwrap();
        let a = evaluate(&mut net, &te).unwrap();
        let b = evaluate(&mut net, &te).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn random_logits_are_near_chance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20000;
        let logits = Array2::from_shape_simple_fn((n, 10), || rng.random::<f64>());
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let err = 100.0 * error_count(logits.view(), &labels) as f64 / n as f64;
        assert!((err - 90.0).abs() < 1.5, "{err}");
    }

    #[test]
    fn csv_header_and_rows() {
        let names = vec!["fc1".to_string(), "fc2".to_string()];
        let mut w = MetricsCsv::new(Vec::new(), &names).unwrap();
        w.write(&EpochMetrics {
            epoch: 1,
            train_loss: 0.5,
            train_err: 10.0,
            test_err: 12.5,
            lr: 0.1,
            layers: vec![
                LayerEpochStats {
                    name: "fc1".into(),
                    bm_mean: 1.0,
                    sat_rate: 0.0,
                },
                LayerEpochStats {
                    name: "fc2".into(),
                    bm_mean: 1.25,
                    sat_rate: 0.5,
                },
            ],
        })
        .unwrap();
        let out = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(
            out,
            "epoch,train_loss,train_err,test_err,lr,fc1_bm_mean,fc1_sat_rate,fc2_bm_mean,fc2_sat_rate\n\
             1,0.5,10,12.5,0.1,1,0,1.25,0.5\n"
        );
    }
}
