//! Mini-batch training, evaluation, prediction and the persistence baseline.
//!
//! Loss is the mean squared error averaged over batch rows and the 24
//! horizons. Each epoch draws a fresh permutation from a ChaCha8 stream
//! seeded by [`TrainConfig::seed`] (stream 1; model weights use stream 0), so
//! `(seed, data, config)` fix the resulting checkpoint bytes.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetEntry, DatasetVariant, OUTPUT_LEN};
use crate::ingestion::format_utc;
use crate::models::{Checkpoint, ModelError, Network};
use crate::neural::{adam_step, mse, AdamConfig, AdamState, Tensor};
use crate::sensor_network::IoError;

/// Rows per forward pass during evaluation, independent of worker count.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model takes {model_input} inputs, {variant} dataset entries have {data_input}")]
    VariantMismatch {
        model_input: usize,
        variant: DatasetVariant,
        data_input: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        /// State at the end of the last completed epoch.
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(IoError(e))
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub shuffle: bool,
    /// Emit a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Before the first step, shift the output-layer bias so the mean
    /// pre-activation matches the mean target per horizon.
    pub calibrate_output_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            shuffle: true,
            checkpoint_every: 0,
            calibrate_output_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let problem = if self.epochs == 0 {
            Some("epochs must be at least 1")
        } else if self.batch_size == 0 {
            Some("batch size must be at least 1")
        } else if !(a.lr > 0.0 && a.lr.is_finite()) {
            Some("learning rate must be positive")
        } else if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            Some("Adam betas must lie in [0, 1)")
        } else if a.eps.is_nan() || a.eps <= 0.0 {
            Some("Adam eps must be positive")
        } else {
            None
        };
        match problem {
            Some(p) => Err(TrainError::InvalidConfig(p.into())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-entry training loss of each epoch, measured while training.
    pub epoch_losses: Vec<f64>,
    /// Filled in by the caller once a test set has been scored.
    pub test_mse: Option<f64>,
    /// Not written by [`TrainReport::write_csv`], which must stay
    /// reproducible.
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// `epoch,loss` rows followed by a `# final_loss=... test_mse=...` line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss")?;
        for (i, l) in self.epoch_losses.iter().enumerate() {
            writeln!(w, "{},{l:?}", i + 1)?;
        }
        let last = self.epoch_losses.last().copied().unwrap_or(f64::NAN);
        match self.test_mse {
            Some(t) => writeln!(w, "# final_loss={last:?} test_mse={t:?}"),
            None => writeln!(w, "# final_loss={last:?} test_mse=none"),
        }
    }
}

pub fn check_variant(net: &Network, variant: DatasetVariant) -> Result<()> {
    if net.input_len() != variant.input_len() {
        return Err(TrainError::VariantMismatch {
            model_input: net.input_len(),
            variant,
            data_input: variant.input_len(),
        });
    }
    Ok(())
}

fn batch_tensors(entries: &[&DatasetEntry], width: usize) -> (Tensor, Tensor) {
    let mut x = Vec::with_capacity(entries.len() * width);
    let mut y = Vec::with_capacity(entries.len() * OUTPUT_LEN);
    for e in entries {
        x.extend_from_slice(&e.input);
        y.extend_from_slice(&e.output);
    }
    (
        Tensor::matrix(entries.len(), width, x),
        Tensor::matrix(entries.len(), OUTPUT_LEN, y),
    )
}

/// Shifts the output bias by the mean gap between targets and
/// pre-activations over the first entries of `data`, so no output ReLU
/// starts dead.
pub fn calibrate_output_bias(net: &mut Network, data: &Dataset) -> Result<()> {
    let sample: Vec<&DatasetEntry> = data.entries().iter().take(EVAL_CHUNK).collect();
    let (x, y) = batch_tensors(&sample, net.input_len());
    let (_, cache) = net.forward_train(&x)?;
    let pre = cache.output_preactivation();
    let n = sample.len() as f64;
    let mut shift = vec![0.0; OUTPUT_LEN];
    for r in 0..sample.len() {
        for (j, s) in shift.iter_mut().enumerate() {
            *s += (y.row(r)[j] - pre.row(r)[j]) / n;
        }
    }
    let name = net.output_bias_name();
    let ps = net.params_mut();
    let id = ps.id(&name).map_err(ModelError::from)?;
    for (b, s) in ps.value_mut(id).data_mut().iter_mut().zip(&shift) {
        *b += s;
    }
    Ok(())
}

/// Trains `net` in place; see [`train_with`].
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    train_with(net, data, cfg, |_, _| {})
}

/// Trains `net` in place on `data`, calling `on_checkpoint(epoch, ckpt)`
/// every `cfg.checkpoint_every` epochs. Returns the final checkpoint.
pub fn train_with<F>(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<(Checkpoint, TrainReport)>
where
    F: FnMut(usize, &Checkpoint),
{
    cfg.validate()?;
    check_variant(net, data.variant())?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    if cfg.calibrate_output_bias {
        calibrate_output_bias(net, data)?;
    }
    let mut adam = AdamState::new(cfg.adam, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n = data.len();
    let width = net.input_len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_good = net.checkpoint(&adam);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DatasetEntry> = idx.iter().map(|&i| &data.entries()[i]).collect();
            let (x, y) = batch_tensors(&batch, width);
            net.params_mut().zero_grad();
            let (pred, cache) = net.forward_train(&x)?;
            let (loss, dy) = mse(&pred, &y).map_err(ModelError::from)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    last_good: Box::new(last_good),
                });
            }
            total += loss * batch.len() as f64;
            net.backward(&cache, &dy);
            adam_step(net.params_mut(), &mut adam).map_err(ModelError::from)?;
        }
        let epoch_loss = total / n as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss}");
        losses.push(epoch_loss);
        last_good = net.checkpoint(&adam);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            on_checkpoint(epoch, &last_good);
        }
    }
    let report = TrainReport {
        epoch_losses: losses,
        test_mse: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((last_good, report))
}

/// Forecasts for every entry of `data`, in dataset order. Chunks are spread
/// over `workers` threads; results do not depend on the worker count.
pub fn predict_all(net: &Network, data: &Dataset, workers: usize) -> Result<Vec<Vec<f64>>> {
    check_variant(net, data.variant())?;
    let entries: Vec<&DatasetEntry> = data.entries().iter().collect();
    let run = |chunk: &[&DatasetEntry]| -> Result<Vec<Vec<f64>>> {
        let (x, _) = batch_tensors(chunk, net.input_len());
        let y = net.forward(&x)?;
        Ok((0..chunk.len()).map(|r| y.row(r).to_vec()).collect())
    };
    let chunks: Vec<Result<Vec<Vec<f64>>>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        pool.install(|| entries.par_chunks(EVAL_CHUNK).map(run).collect())
    } else {
        entries.chunks(EVAL_CHUNK).map(run).collect()
    };
    let mut out = Vec::with_capacity(entries.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Per-entry MSE over the 24 horizons, in dataset order.
pub fn entry_errors(net: &Network, data: &Dataset, workers: usize) -> Result<Vec<f64>> {
    let preds = predict_all(net, data, workers)?;
    Ok(preds
        .iter()
        .zip(data.entries())
        .map(|(p, e)| mean_sq(p, &e.output))
        .collect())
}

/// Mean over entries of the per-entry MSE, summed in dataset order (feet²).
pub fn evaluate(net: &Network, data: &Dataset, workers: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let errs = entry_errors(net, data, workers)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Forward pass for one entry.
pub fn predict(net: &Network, entry: &DatasetEntry) -> Result<Vec<f64>> {
    predict_input(net, &entry.input)
}

pub fn predict_input(net: &Network, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != net.input_len() {
        let variant = if input.len() == DatasetVariant::Smaller.input_len() {
            DatasetVariant::Smaller
        } else {
            DatasetVariant::Larger
        };
        return Err(TrainError::VariantMismatch {
            model_input: net.input_len(),
            variant,
            data_input: input.len(),
        });
    }
    let y = net.forward(&Tensor::vector(input.to_vec()))?;
    Ok(y.into_data())
}

/// 24 copies of the most recent own-sensor stage `H^S_{t-1}`.
pub fn persistence_baseline(entry: &DatasetEntry, variant: DatasetVariant) -> Vec<f64> {
    vec![entry.input[variant.last_self_index()]; OUTPUT_LEN]
}

pub fn persistence_mse(data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let v = data.variant();
    let total: f64 = data
        .entries()
        .iter()
        .map(|e| mean_sq(&persistence_baseline(e, v), &e.output))
        .sum();
    Ok(total / data.len() as f64)
}

pub const TRACE_HEADER: &str = "sensor,t,horizon,measured,predicted";

/// Measured-vs-predicted rows, 24 per entry; `horizon` h is the stage at
/// `t + h` hours.
pub fn write_trace<W: Write>(mut w: W, net: &Network, data: &Dataset, workers: usize) -> Result<()> {
    let preds = predict_all(net, data, workers)?;
    writeln!(w, "{TRACE_HEADER}")?;
    for (e, p) in data.entries().iter().zip(&preds) {
        let t = format_utc(e.t);
        for (h, (m, q)) in e.output.iter().zip(p).enumerate() {
            writeln!(w, "{},{t},{h},{m:?},{q:?}", e.sensor)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FcNetConfig, FcSubnetConfig, ForecasterConfig, GruSubnetConfig, ModelConfig};
    use crate::sensor_network::SensorId;
    use chrono::{TimeDelta, TimeZone, Utc};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_fc(variant: DatasetVariant) -> ModelConfig {
        ModelConfig::Fc(FcNetConfig {
            widths: vec![variant.input_len(), 16, 16, 24],
        })
    }

    fn small_gru() -> ModelConfig {
        ModelConfig::Gru(ForecasterConfig {
            upstream_count: 4,
            gru: GruSubnetConfig {
                seq_len: 24,
                embed: 4,
                hidden: 6,
                out: 2,
            },
            precip: FcSubnetConfig {
                widths: vec![40, 8, 4],
            },
            head: vec![14, 16, 24],
        })
    }

    fn random_dataset(variant: DatasetVariant, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t0 = Utc.with_ymd_and_hms(2010, 5, 1, 0, 0, 0).unwrap();
        let entries = (0..n)
            .map(|i| DatasetEntry {
                sensor: SensorId::new(format!("S{:02}", i % 3)).unwrap(),
                t: t0 + TimeDelta::hours(i as i64),
                input: (0..variant.input_len()).map(|_| rng.random_range(0.5..3.0)).collect(),
                output: (0..OUTPUT_LEN).map(|_| rng.random_range(0.5..3.0)).collect(),
            })
            .collect();
        Dataset::new(variant, entries).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let d = random_dataset(DatasetVariant::Smaller, 4, 0);
        let mut net = Network::new(small_fc(DatasetVariant::Smaller), 0).unwrap();
        assert!(matches!(
            train(&mut net, &d, &quick_cfg(0)),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn gru_on_smaller_is_variant_mismatch() {
        let d = random_dataset(DatasetVariant::Smaller, 4, 0);
        let mut net = Network::new(small_gru(), 0).unwrap();
        assert!(matches!(
            train(&mut net, &d, &quick_cfg(1)),
            Err(TrainError::VariantMismatch { model_input: 160, .. })
        ));
        assert!(matches!(predict(&net, &d.entries()[0]), Err(TrainError::VariantMismatch { .. })));
    }

    #[test]
    fn empty_dataset_rejected() {
        let d = Dataset::new(DatasetVariant::Larger, vec![]).unwrap();
        let mut net = Network::new(small_gru(), 0).unwrap();
        assert!(matches!(evaluate(&net, &d, 1), Err(TrainError::EmptyDataset)));
        assert!(matches!(train(&mut net, &d, &quick_cfg(1)), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn single_entry_memorized() {
        for cfg in [small_fc(DatasetVariant::Larger), small_gru()] {
            let d = random_dataset(DatasetVariant::Larger, 1, 5);
            let mut net = Network::new(cfg, 1).unwrap();
            let (_, report) = train(&mut net, &d, &quick_cfg(200)).unwrap();
            let last = *report.epoch_losses.last().unwrap();
            assert!(last < 1e-3, "{}: {last}", net.config());
            assert!(evaluate(&net, &d, 1).unwrap() < 1e-3);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let d = random_dataset(DatasetVariant::Larger, 20, 1);
        let run = || {
            let mut net = Network::new(small_gru(), 7).unwrap();
            let (ckpt, report) = train(&mut net, &d, &quick_cfg(3)).unwrap();
            let mut csv = Vec::new();
            report.write_csv(&mut csv).unwrap();
            (ckpt.to_bytes(), csv)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn report_rows_match_epochs() {
        let d = random_dataset(DatasetVariant::Smaller, 10, 1);
        let mut net = Network::new(small_fc(DatasetVariant::Smaller), 0).unwrap();
        let (_, mut report) = train(&mut net, &d, &quick_cfg(4)).unwrap();
        report.test_mse = Some(0.25);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss");
        assert_eq!(lines.len(), 1 + 4 + 1);
        assert!(lines[5].starts_with("# final_loss=") && lines[5].ends_with("test_mse=0.25"));
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn checkpoint_cadence() {
        let d = random_dataset(DatasetVariant::Smaller, 10, 1);
        let mut net = Network::new(small_fc(DatasetVariant::Smaller), 0).unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            ..quick_cfg(5)
        };
        let mut seen = vec![];
        let (last, _) = train_with(&mut net, &d, &cfg, |e, c| seen.push((e, c.adam.step))).unwrap();
        // 10 entries in batches of 8 is 2 steps per epoch
        assert_eq!(seen, vec![(2, 4), (4, 8)]);
        assert_eq!(last.adam.step, 10);
    }

    #[test]
    fn divergence_aborts_with_last_good_state() {
        let d = random_dataset(DatasetVariant::Smaller, 10, 1);
        let mut net = Network::new(small_fc(DatasetVariant::Smaller), 0).unwrap();
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 1e300,
                ..AdamConfig::default()
            },
            ..quick_cfg(5)
        };
        match train(&mut net, &d, &cfg) {
            Err(TrainError::NonFiniteLoss { epoch, last_good, .. }) => {
                assert!(epoch >= 1);
                assert!(last_good.params.iter().all(|p| p.value.is_finite()));
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn zero_model_predicts_zeros() {
        let d = random_dataset(DatasetVariant::Larger, 2, 1);
        let mut net = Network::new(small_gru(), 0).unwrap();
        net.params_mut().zero_values();
        assert_eq!(predict(&net, &d.entries()[0]).unwrap(), vec![0.0; 24]);
    }

    #[test]
    fn predict_matches_forward() {
        let d = random_dataset(DatasetVariant::Larger, 3, 2);
        let net = Network::new(small_gru(), 4).unwrap();
        for e in d.entries() {
            let direct = net.forward(&Tensor::vector(e.input.clone())).unwrap();
            assert_eq!(predict(&net, e).unwrap(), direct.into_data());
        }
    }

    #[test]
    fn evaluate_is_mean_of_entry_mse() {
        let d = random_dataset(DatasetVariant::Larger, 300, 2);
        let net = Network::new(small_gru(), 4).unwrap();
        let direct: Vec<f64> = d
            .entries()
            .iter()
            .map(|e| {
                let p = net.forward(&Tensor::vector(e.input.clone())).unwrap();
                mse(&p, &Tensor::matrix(1, 24, e.output.clone())).unwrap().0
            })
            .collect();
        let expect = direct.iter().sum::<f64>() / direct.len() as f64;
        let got = evaluate(&net, &d, 1).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert_eq!(evaluate(&net, &d, 3).unwrap().to_bits(), got.to_bits());
    }

    #[test]
    fn persistence_examples() {
        let v = DatasetVariant::Smaller;
        let mut e = random_dataset(v, 1, 0).into_entries().remove(0);
        e.input[v.last_self_index()] = 5.5;
        assert_eq!(persistence_baseline(&e, v), vec![5.5; 24]);

        // constant world
        e.input.iter_mut().for_each(|x| *x = 2.0);
        e.output = vec![2.0; 24];
        let d = Dataset::new(v, vec![e.clone()]).unwrap();
        assert_eq!(persistence_mse(&d).unwrap(), 0.0);

        // ramp of 1 ft/h: last self value is at t-1, outputs at t..t+23
        e.input[v.last_self_index()] = 10.0;
        e.output = (0..24).map(|h| 11.0 + h as f64).collect();
        let d = Dataset::new(v, vec![e]).unwrap();
        let expect = (1..=24).map(|k| (k * k) as f64).sum::<f64>() / 24.0;
        assert!((expect - 204.166_666_666_666_67).abs() < 1e-9);
        assert!((persistence_mse(&d).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn trace_schema() {
        let d = random_dataset(DatasetVariant::Larger, 5, 2);
        let net = Network::new(small_gru(), 4).unwrap();
        let mut out = Vec::new();
        write_trace(&mut out, &net, &d, 1).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert_eq!(lines.len() - 1, 24 * d.len());
        for (i, l) in lines[1..].iter().enumerate() {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 5);
            assert_eq!(f[2].parse::<usize>().unwrap(), i % 24);
            let e = &d.entries()[i / 24];
            assert_eq!(f[3].parse::<f64>().unwrap(), e.output[i % 24]);
            assert!(f[4].parse::<f64>().unwrap() >= 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn losses_finite_and_one_per_epoch(seed in 0u64..500, epochs in 1usize..4) {
            let d = random_dataset(DatasetVariant::Smaller, 12, seed);
            let mut net = Network::new(small_fc(DatasetVariant::Smaller), seed).unwrap();
            let (_, r) = train(&mut net, &d, &TrainConfig { seed, ..quick_cfg(epochs) }).unwrap();
            prop_assert_eq!(r.epoch_losses.len(), epochs);
            prop_assert!(r.epoch_losses.iter().all(|l| l.is_finite()));
        }
    }
}
