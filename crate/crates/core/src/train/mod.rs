//! Optimizer, schedule, checkpoints, and the training/evaluation loops.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointHeader, MAGIC, VERSION};
pub use config::{RunConfig, DESK_LR0};
pub use optim::{lr_schedule, sgd_update, OptimConfig, Sgd};

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::image::{mask_image, write_pgm, GrayImage};
use crate::data::{load_dataset, resize_pair, split, stack, synth_generate, SegSample, Split};
use crate::error::{Error, Result};
use crate::loss::combined_loss;
use crate::metrics::{binarize, MetricsReport};
use crate::model::{ForwardTrace, NamedArray, TransAttUnet};
use crate::nn::Mode;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{set_checked, Tensor};

/// Training runs in single precision.
pub type Model = TransAttUnet<f32>;

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_dice";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let val = self.val_dice.map(|d| format!("{d:.8}")).unwrap_or_default();
        format!("{},{},{:.8},{val}", self.epoch, self.lr, self.train_loss)
    }
}

impl<T: Scalar> ForwardTrace<T> {
    /// Name of the first stage (in execution order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut named: Vec<(String, &Tensor<T>)> = Vec::new();
        for (i, s) in self.skips.iter().enumerate() {
            named.push((format!("encoder.{i}"), s));
        }
        named.push(("bottleneck".into(), &self.bottleneck));
        named.push(("saa".into(), &self.saa));
        for (k, d) in self.decoder.iter().enumerate() {
            named.push((format!("decoder.{k}"), &d.features));
        }
        named.push(("msc".into(), &self.fused));
        named.push(("head".into(), &self.logits));
        named.push(("output".into(), &self.prob));
        named.into_iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n)
    }
}

/// Loads or generates the run's data and resizes it to the model input.
pub fn prepare_data(cfg: &RunConfig) -> Result<Split> {
    let data = match &cfg.data_dir {
        Some(dir) => load_dataset(dir)?,
        None => split(
            synth_generate(&cfg.synth, cfg.n_samples)?,
            cfg.split_fractions,
            cfg.synth.seed,
        )?,
    };
    let size = (cfg.model.image_size[0], cfg.model.image_size[1]);
    let resize = |v: Vec<SegSample>| v.iter().map(|s| resize_pair(s, size)).collect::<Result<Vec<_>>>();
    Ok(Split {
        train: resize(data.train)?,
        val: resize(data.val)?,
        test: resize(data.test)?,
    })
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub sgd: Sgd<f32>,
    rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_dice: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        Ok(Self {
            sgd: Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay),
            rng: Rng::derive(cfg.model.seed, 1),
            model,
            cfg,
            epoch: 0,
            best_val_dice: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let momentum = self
            .sgd
            .velocities()
            .iter()
            .map(|(name, v)| NamedArray {
                name: name.clone(),
                shape: vec![v.len()],
                data: v.iter().map(|&x| x as f64).collect(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                config: self.cfg.clone(),
                epoch: self.epoch,
                rng: self.rng.clone(),
                best_val_dice: self.best_val_dice,
            },
            model: self.model.state(),
            momentum,
        }
    }

    /// Restores the full training state, so continuing reproduces an
    /// uninterrupted run.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.header.config.clone())?;
        t.model.load_state(&ckpt.model)?;
        let velocities: BTreeMap<String, Vec<f32>> = ckpt
            .momentum
            .iter()
            .map(|a| (a.name.clone(), a.data.iter().map(|&v| v as f32).collect()))
            .collect();
        t.sgd.set_velocities(velocities);
        t.rng = ckpt.header.rng.clone();
        t.epoch = ckpt.header.epoch;
        t.best_val_dice = ckpt.header.best_val_dice;
        Ok(t)
    }

    /// One pass over `train` in shuffled minibatches (the last partial batch
    /// is kept). Returns the sample-weighted mean loss.
    pub fn train_epoch(&mut self, train: &[SegSample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::InvalidInput("training split is empty".into()));
        }
        let lr = lr_schedule(self.epoch, &self.cfg.optim);
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.cfg.optim.batch_size).enumerate() {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = stack::<f32>(&batch)?;
            let trace = self.model.forward_trace(&x, Mode::Train)?;
            let loss = combined_loss(&trace.prob, &y, &self.cfg.loss)?;
            let value = loss.item()? as f64;
            if !value.is_finite() {
                let culprit = trace.first_non_finite().unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite(format!(
                    "loss is {value} at epoch {} batch {b}; first non-finite tensor: {culprit}",
                    self.epoch
                )));
            }
            loss.backward()?;
            self.sgd.step(&mut self.model, lr)?;
            if let Some((name, _, _)) = self.model.named_params().iter().find(|(_, t, _)| !t.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter {name} became non-finite at epoch {} batch {b}",
                    self.epoch
                )));
            }
            total += value * batch.len() as f64;
        }
        self.epoch += 1;
        Ok(total / train.len() as f64)
    }

    /// Trains until `cfg.optim.epochs` epochs are complete, or `stop_after`
    /// more epochs have run. With `out`, appends to `out/log.csv` and writes
    /// `out/last.ckpt` every epoch and `out/best.ckpt` on a new best
    /// validation Dice.
    pub fn fit(&mut self, data: &Split, out: Option<&Path>, stop_after: Option<usize>) -> Result<Vec<EpochLog>> {
        let _guard = CheckedGuard::new(self.cfg.checked);
        let mut logs = Vec::new();
        let mut log_file = match out {
            Some(dir) => Some(open_log(dir, self.epoch == 0)?),
            None => None,
        };
        let end = match stop_after {
            Some(n) => (self.epoch + n).min(self.cfg.optim.epochs),
            None => self.cfg.optim.epochs,
        };
        while self.epoch < end {
            let lr = lr_schedule(self.epoch, &self.cfg.optim);
            let epoch = self.epoch;
            let train_loss = self.train_epoch(&data.train)?;
            let val_dice = if data.val.is_empty() {
                None
            } else {
                Some(evaluate(&self.model, &data.val, self.cfg.threshold)?.aggregate.dice)
            };
            let entry = EpochLog {
                epoch,
                lr,
                train_loss,
                val_dice,
            };
            let improved = match (val_dice, self.best_val_dice) {
                (Some(v), Some(best)) => v > best,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                self.best_val_dice = val_dice;
            }
            if let (Some(dir), Some((path, file))) = (out, log_file.as_mut()) {
                writeln!(file, "{}", entry.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join("last.ckpt"))?;
                if improved || (val_dice.is_none() && self.epoch == end) {
                    ckpt.save(&dir.join("best.ckpt"))?;
                }
            }
            logs.push(entry);
        }
        Ok(logs)
    }
}

fn open_log(dir: &Path, fresh: bool) -> Result<(PathBuf, fs::File)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("log.csv");
    let mut file = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    if fresh {
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
    }
    Ok((path, file))
}

/// Enables checked mode for its lifetime when asked to.
struct CheckedGuard(bool);

impl CheckedGuard {
    fn new(on: bool) -> Self {
        if on {
            set_checked(true);
        }
        Self(on)
    }
}

impl Drop for CheckedGuard {
    fn drop(&mut self) {
        if self.0 {
            set_checked(false);
        }
    }
}

/// Eval-mode probabilities for each sample, in order.
pub fn predict<T: Scalar>(model: &TransAttUnet<T>, samples: &[SegSample]) -> Result<Vec<Tensor<T>>> {
    samples
        .iter()
        .map(|s| {
            let (x, _) = stack::<T>(&[s])?;
            model.forward(&x, Mode::Eval)
        })
        .collect()
}

/// Per-image metrics of the eval-mode model on `samples`.
pub fn evaluate<T: Scalar>(model: &TransAttUnet<T>, samples: &[SegSample], threshold: f64) -> Result<MetricsReport> {
    let probs = predict(model, samples)?;
    let items: Vec<(String, Vec<T>, Vec<T>)> = samples
        .iter()
        .zip(probs)
        .map(|(s, p)| {
            let truth = s
                .mask
                .data()
                .iter()
                .map(|&v| T::from_f32(v).expect("f32 converts"))
                .collect();
            (s.id.clone(), p.to_vec(), truth)
        })
        .collect();
    MetricsReport::evaluate(&items, threshold)
}

/// Writes `metrics.csv` and `metrics.json` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("metrics.json");
    fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))
}

/// Writes `<id>_prob.pgm` (probability ×255, rounded) and `<id>_mask.pgm`
/// (0/255 at the threshold) per sample.
pub fn write_predictions<T: Scalar>(
    model: &TransAttUnet<T>,
    samples: &[SegSample],
    threshold: f64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (s, p) in samples.iter().zip(predict(model, samples)?) {
        let (h, w) = (s.height(), s.width());
        let prob_path = dir.join(format!("{}_prob.pgm", s.id));
        write_pgm(&prob_path, &GrayImage::from_unit(p.data(), h, w)?)?;
        let mask: Vec<f32> = binarize(p.data(), threshold).into_iter().map(f32::from).collect();
        let mask_path = dir.join(format!("{}_mask.pgm", s.id));
        write_pgm(&mask_path, &mask_image(&mask, h, w)?)?;
        written.extend([prob_path, mask_path]);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MscMode;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.base_channels = 4;
        cfg.model.depth = 2;
        cfg.model.heads = 2;
        cfg.model.image_size = [16, 16];
        cfg.synth.size = [16, 16];
        cfg.n_samples = 10;
        cfg.optim.epochs = 3;
        cfg
    }

    #[test]
    fn batches_per_epoch_and_partial_batch() {
        let cfg = tiny();
        let data = prepare_data(&cfg).unwrap();
        assert_eq!(data.train.len(), 8);
        let mut t = Trainer::new(cfg).unwrap();
        let logs = t.fit(&data, None, None).unwrap();
        assert_eq!(logs.len(), 3);
        assert_eq!(t.epoch, 3);
        assert!(logs.iter().all(|l| l.train_loss.is_finite() && l.val_dice.is_some()));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = RunConfig { n_samples: 7, ..tiny() };
        let data = prepare_data(&cfg).unwrap();
        let mut full = Trainer::new(cfg.clone()).unwrap();
        let all = full.fit(&data, None, None).unwrap();

        let mut first = Trainer::new(cfg).unwrap();
        first.fit(&data, None, Some(1)).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let ckpt = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
        let rest = resumed.fit(&data, None, None).unwrap();
        assert_eq!(&all[1..], &rest[..]);
        assert_eq!(full.model.state(), resumed.model.state());
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            model: crate::model::ModelConfig {
                msc_mode: MscMode::Cascade,
                ..tiny().model
            },
            ..tiny()
        };
        let data = prepare_data(&cfg).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        t.fit(&data, Some(dir.path()), None).unwrap();
        let log = fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.starts_with(LOG_HEADER));
        assert!(dir.path().join("best.ckpt").is_file() && dir.path().join("last.ckpt").is_file());

        let report = evaluate(&t.model, &data.test, 0.5).unwrap();
        write_report(&report, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + data.test.len() + 1);
        let files = write_predictions(&t.model, &data.test, 0.5, dir.path()).unwrap();
        assert_eq!(files.len(), 2 * data.test.len());
    }

    #[test]
    fn nan_input_is_diagnosed() {
        let cfg = tiny();
        let mut data = prepare_data(&cfg).unwrap();
        let s = &mut data.train[0];
        let mut v = s.image.to_vec();
        v[5] = f32::NAN;
        s.image = Tensor::from_vec(v, s.image.shape()).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let err = t.train_epoch(&data.train).unwrap_err().to_string();
        assert!(err.contains("encoder.0"), "{err}");
    }
}
