//! Training harness: batching, Adam updates, validation-plateau early
//! stopping, checkpointing, and the per-epoch log.

mod adam;
mod augment;
mod dataset;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::augment;
pub use dataset::{
    split_dataset, DatasetManifest, ManifestEntry, Split, DEFAULT_SPLIT_RATIOS,
};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, BinaryMask, GrayImage};
use crate::objectives;
use crate::seeds::derive_seed;
use crate::tensor::{Graph, Scalar, Tensor};
use crate::unet::{save_checkpoint, UNetModel};

/// Training hyperparameters.
///
/// A plateau is declared when validation loss fails to improve on its best
/// value by more than `plateau_min_delta` for `plateau_patience` consecutive
/// epochs. The checkpoint returned is always the one with the strictly best
/// validation loss seen, independent of the plateau delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub augment: bool,
    pub seed: u64,
    /// Shared binarization threshold for validation metrics.
    pub threshold: f64,
    /// Smoothing constant of the soft dice loss (evaluation metrics use
    /// hard counts and no smoothing).
    pub dice_smooth: f64,
}

impl Default for TrainConfig {
    /// Defaults target a full-scale 512x512 run (hence the small batch);
    /// desk-scale runs raise the batch size and cap the epochs instead.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 2,
            max_epochs: 100,
            plateau_patience: 3,
            plateau_min_delta: 1e-4,
            augment: false,
            seed: 0,
            threshold: 0.5,
            dice_smooth: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Parameter("max epochs must be positive".into()));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Parameter(
                "plateau patience must be at least 1".into(),
            ));
        }
        if self.plateau_min_delta < 0.0 || self.plateau_min_delta.is_nan() {
            return Err(Error::Parameter(format!(
                "plateau min delta must be non-negative, got {}",
                self.plateau_min_delta
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Parameter(format!(
                "threshold must be inside (0, 1), got {}",
                self.threshold
            )));
        }
        if self.dice_smooth < 0.0 {
            return Err(Error::Parameter(format!(
                "dice smoothing must be non-negative, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// The four tracked scalars for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
}

impl EpochRecord {
    fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\n",
            self.epoch, self.train_loss, self.val_loss, self.val_dice, self.val_iou
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub log: Vec<EpochRecord>,
    /// Path of the best checkpoint; the trained model passed to
    /// [`train`] is also restored to these weights.
    pub best_checkpoint: PathBuf,
}

struct Sample {
    image: GrayImage,
    mask: BinaryMask,
}

fn load_samples(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    manifest
        .entries_for(split)
        .map(|e| {
            let image = imaging::load_gray(&e.image)?;
            let mask = imaging::decode_mask(&imaging::load_gray(&e.mask)?)?;
            if image.width() != mask.width() || image.height() != mask.height() {
                return Err(Error::Dimension(format!(
                    "{}: image {}x{} does not pair with mask {}x{}",
                    e.image.display(),
                    image.width(),
                    image.height(),
                    mask.width(),
                    mask.height()
                )));
            }
            Ok(Sample { image, mask })
        })
        .collect()
}

/// Stacks samples into a `[N, 1, H, W]` input tensor and a flat 0/1 truth
/// buffer in the same order.
fn assemble_batch<T: Scalar>(samples: &[&Sample]) -> (Tensor<T>, Vec<T>) {
    let h = samples[0].image.height();
    let w = samples[0].image.width();
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut truth = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        data.extend(normalized_pixels::<T>(&s.image));
        truth.extend(s.mask.pixels().iter().map(|&p| T::from_f64(p as f64)));
    }
    let tensor = Tensor::new(vec![samples.len(), 1, h, w], data).expect("batch dims consistent");
    (tensor, truth)
}

fn normalized_pixels<T: Scalar>(image: &GrayImage) -> impl Iterator<Item = T> + '_ {
    let scale = T::one() / T::from_f64(image.bit_depth().max_value() as f64);
    image
        .pixels()
        .iter()
        .map(move |&p| T::from_f64(p as f64) * scale)
}

/// Runs one forward pass and returns per-image (loss, dice, iou) means over
/// a split.
fn evaluate_split(
    model: &UNetModel<f32>,
    samples: &[Sample],
    threshold: f64,
    smooth: f64,
) -> Result<(f64, f64, f64)> {
    let mut loss_sum = 0.0;
    let mut dice_sum = 0.0;
    let mut iou_sum = 0.0;
    for s in samples {
        let mut graph = Graph::<f32>::new();
        let input = imaging::normalize::<f32>(&s.image);
        let pass = model.forward(&mut graph, input)?;
        let pred = graph.value(pass.output);
        loss_sum += objectives::combined_loss_value(pred, &s.mask, smooth)?;
        let hard = objectives::binarize_prediction(pred, threshold)?;
        dice_sum += objectives::dice_score(&hard, &s.mask)?;
        iou_sum += objectives::iou(&hard, &s.mask)?;
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, dice_sum / n, iou_sum / n))
}

/// Trains `model` on the manifest's train split, tracking the val split for
/// plateau stopping. Writes `log` and `checkpoints/` under `run_dir` and
/// restores the model to the best-validation-loss checkpoint before
/// returning. Fully deterministic for a fixed (config, manifest, data).
pub fn train(
    model: &mut UNetModel<f32>,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_samples = load_samples(manifest, Split::Train)?;
    let val_samples = load_samples(manifest, Split::Val)?;
    if train_samples.is_empty() {
        return Err(Error::Parameter("manifest has an empty train split".into()));
    }
    if val_samples.is_empty() {
        return Err(Error::Parameter("manifest has an empty val split".into()));
    }
    let (h, w) = (
        train_samples[0].image.height(),
        train_samples[0].image.width(),
    );
    for s in train_samples.iter().chain(&val_samples) {
        if s.image.height() != h || s.image.width() != w {
            return Err(Error::Dimension(format!(
                "all images must share dimensions; found {}x{} and {}x{}",
                w,
                h,
                s.image.width(),
                s.image.height()
            )));
        }
    }
    model.config().validate_input_dims(h, w)?;

    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = run_dir.join("log");
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut adam_state = AdamState::new(model.params());
    let adam_config = config.adam_config();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xE9_0C]));

    let mut log = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let best_path = ckpt_dir.join("best.ckpt");
    let marker_path = ckpt_dir.join("best");
    let mut plateau_best = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_weighted = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let batch_loss = if config.augment {
                let augmented: Vec<Sample> = chunk
                    .iter()
                    .map(|&idx| {
                        let s = &train_samples[idx];
                        let seed = derive_seed(config.seed, &[epoch as u64, idx as u64]);
                        let (image, mask) = augment(&s.image, &s.mask, seed)?;
                        Ok(Sample { image, mask })
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&Sample> = augmented.iter().collect();
                train_step(model, &refs, &mut adam_state, &adam_config, config)?
            } else {
                let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_samples[i]).collect();
                train_step(model, &refs, &mut adam_state, &adam_config, config)?
            };
            loss_weighted += batch_loss * chunk.len() as f64;
        }
        let train_loss = loss_weighted / train_samples.len() as f64;

        let (val_loss, val_dice, val_iou) =
            evaluate_split(model, &val_samples, config.threshold, config.dice_smooth)?;
        if !val_loss.is_finite() {
            return Err(Error::non_finite(format!("validation loss at epoch {epoch}")));
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_dice,
            val_iou,
        };
        log_file
            .write_all(record.log_line().as_bytes())
            .and_then(|_| log_file.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        log.push(record);

        save_checkpoint(model, &ckpt_dir.join(format!("epoch_{epoch:03}.ckpt")))?;

        // Best checkpoint tracks the strict minimum.
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            save_checkpoint(model, &best_path)?;
            std::fs::write(&marker_path, format!("epoch_{epoch:03}.ckpt\n"))
                .map_err(|e| Error::io(&marker_path, e))?;
        }

        // Plateau detection: the first epoch only sets the baseline.
        if epoch == 1 {
            plateau_best = val_loss;
        } else if val_loss < plateau_best - config.plateau_min_delta {
            plateau_best = val_loss;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.plateau_patience {
                stopped_early = true;
            }
        }
        if stopped_early {
            break;
        }
    }

    *model = crate::unet::load_checkpoint(&best_path)?;
    Ok(TrainOutcome {
        epochs_run,
        best_epoch,
        best_val_loss,
        stopped_early,
        log,
        best_checkpoint: best_path,
    })
}

fn train_step(
    model: &mut UNetModel<f32>,
    batch: &[&Sample],
    adam_state: &mut AdamState<f32>,
    adam_config: &AdamConfig,
    config: &TrainConfig,
) -> Result<f64> {
    let (input, truth) = assemble_batch::<f32>(batch);
    let mut graph = Graph::<f32>::new();
    let pass = model.forward(&mut graph, input)?;
    let loss = objectives::combined_loss(&mut graph, pass.output, &truth, config.dice_smooth)?;
    let loss_value = graph.value(loss).item()?.as_f64();
    graph.backward(loss)?;
    let grads: Vec<Vec<f32>> = pass
        .params
        .iter()
        .map(|&id| {
            graph
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; graph.value(id).numel()])
        })
        .collect();
    adam_step(model.params_mut(), &grads, adam_state, adam_config)?;
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{encode_mask, save_gray, BitDepth};
    use crate::unet::UNetConfig;

    /// Writes a tiny high-contrast dataset: bright square on dark ground.
    fn write_square_dataset(dir: &Path, n: usize, size: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..n {
            let mut pixels = vec![40u16; size * size];
            let mut mask_pixels = vec![0u8; size * size];
            let side = size / 4 + (i % 3);
            let off = 2 + (i % 4);
            for y in off..(off + side).min(size) {
                for x in off..(off + side).min(size) {
                    pixels[y * size + x] = 210;
                    mask_pixels[y * size + x] = 1;
                }
            }
            let image = GrayImage::new(size, size, BitDepth::Eight, pixels).unwrap();
            let mask = BinaryMask::new(size, size, mask_pixels).unwrap();
            let image_path = dir.join(format!("images/{i:03}.png"));
            let mask_path = dir.join(format!("masks/{i:03}.png"));
            save_gray(&image_path, &image).unwrap();
            save_gray(&mask_path, &encode_mask(&mask)).unwrap();
            entries.push(ManifestEntry {
                split: if i < n - 2 { Split::Train } else { Split::Val },
                image: image_path,
                mask: mask_path,
            });
        }
        DatasetManifest {
            entries,
            seed: None,
        }
    }

    fn desk_model(seed: u64) -> UNetModel<f32> {
        UNetModel::build(
            UNetConfig {
                depth: 2,
                base_channels: 4,
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
            },
            seed,
        )
        .unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_val_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_square_dataset(dir.path(), 6, 16);
        for e in &mut manifest.entries {
            e.split = Split::Train;
        }
        let mut model = desk_model(0);
        let err = train(&mut model, &manifest, &quick_config(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn plateau_patience_one_with_infinite_delta_stops_after_two_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_square_dataset(dir.path(), 6, 16);
        let mut model = desk_model(0);
        let config = TrainConfig {
            plateau_patience: 1,
            plateau_min_delta: f64::INFINITY,
            max_epochs: 50,
            ..quick_config()
        };
        let outcome = train(&mut model, &manifest, &config, &dir.path().join("run")).unwrap();
        assert_eq!(outcome.epochs_run, 2);
        assert!(outcome.stopped_early);
        assert_eq!(outcome.log.len(), 2);
    }

    #[test]
    fn same_seed_gives_identical_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_square_dataset(dir.path(), 6, 16);
        let run = |run_name: &str| {
            let mut model = desk_model(1);
            let out = train(
                &mut model,
                &manifest,
                &quick_config(),
                &dir.path().join(run_name),
            )
            .unwrap();
            (out, model)
        };
        let (out_a, model_a) = run("a");
        let (out_b, model_b) = run("b");
        assert_eq!(out_a.log, out_b.log);
        assert_eq!(
            std::fs::read(dir.path().join("a/log")).unwrap(),
            std::fs::read(dir.path().join("b/log")).unwrap()
        );
        assert_eq!(
            std::fs::read(&out_a.best_checkpoint).unwrap(),
            std::fs::read(&out_b.best_checkpoint).unwrap()
        );
        for (p, q) in model_a.params().iter().zip(model_b.params()) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn returned_model_is_the_best_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_square_dataset(dir.path(), 6, 16);
        let mut model = desk_model(2);
        let config = TrainConfig {
            max_epochs: 4,
            ..quick_config()
        };
        let outcome = train(&mut model, &manifest, &config, &dir.path().join("run")).unwrap();

        let best_logged = outcome
            .log
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.best_val_loss, best_logged);

        let reloaded = crate::unet::load_checkpoint(&outcome.best_checkpoint).unwrap();
        for (p, q) in model.params().iter().zip(reloaded.params()) {
            assert_eq!(p.data(), q.data());
        }

        // Marker file points at the epoch checkpoint of the best epoch.
        let marker = std::fs::read_to_string(dir.path().join("run/checkpoints/best")).unwrap();
        assert_eq!(
            marker.trim(),
            format!("epoch_{:03}.ckpt", outcome.best_epoch)
        );
    }

    #[test]
    fn augmented_training_still_runs_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_square_dataset(dir.path(), 6, 16);
        let config = TrainConfig {
            augment: true,
            ..quick_config()
        };
        let mut model_a = desk_model(4);
        let out_a = train(&mut model_a, &manifest, &config, &dir.path().join("a")).unwrap();
        let mut model_b = desk_model(4);
        let out_b = train(&mut model_b, &manifest, &config, &dir.path().join("b")).unwrap();
        assert_eq!(out_a.log, out_b.log);
    }

    #[test]
    fn val_metrics_stay_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_square_dataset(dir.path(), 6, 16);
        let mut model = desk_model(5);
        let outcome = train(&mut model, &manifest, &quick_config(), &dir.path().join("run"))
            .unwrap();
        for r in &outcome.log {
            assert!((0.0..=1.0).contains(&r.val_dice));
            assert!((0.0..=1.0).contains(&r.val_iou));
            assert!(r.val_loss.is_finite());
            assert!(r.train_loss.is_finite());
        }
    }
}
