use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use vertseg_core::imaging::{
    clahe, decode_mask, encode_mask, load_gray, normalize, resize_bilinear, resize_mask,
    save_gray, BinaryMask, ClaheParams, GrayImage,
};
use vertseg_core::objectives::{
    binarize_prediction, combined_loss_value, dice_score, iou, ImageMetrics, MetricsReport,
};
use vertseg_core::phantom::{generate_dataset, PhantomParams};
use vertseg_core::tensor::{Graph, Tensor};
use vertseg_core::trainer::{self, DatasetManifest, ManifestEntry, Split, TrainConfig};
use vertseg_core::unet::{load_checkpoint, UNetConfig, UNetModel};

use crate::config::FileConfig;
use crate::{EvalArgs, OverlayArgs, PredictArgs, PreprocessArgs, SynthArgs, TrainArgs};

fn write_echo<T: Serialize>(dir: &Path, name: &str, echo: &T) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = toml::to_string(echo).context("serializing resolved config")?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct SynthEcho {
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    split_ratios: Option<(f64, f64, f64)>,
    params: PhantomParams,
}

pub fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let section = file.synth.unwrap_or_default();

    let mut params = PhantomParams::default();
    section.apply(&mut params);
    if let Some(v) = args.seed {
        params.seed = v;
    }
    if let Some(v) = args.width {
        params.width = v;
    }
    if let Some(v) = args.height {
        params.height = v;
    }
    if let Some(v) = args.n_vertebrae {
        params.n_vertebrae = v;
    }
    if let Some(v) = args.fracture_prob {
        params.fracture_prob = v;
    }
    if let Some(v) = args.noise_sigma {
        params.noise_sigma = v;
    }
    if let Some(v) = args.texture_amplitude {
        params.texture_amplitude = v;
    }
    if args.hard_mode {
        params.hard_mode = true;
    }

    let n = match args.n {
        Some(v) => v as usize,
        None => section.n.ok_or_else(|| {
            anyhow!(vertseg_core::Error::Parameter(
                "--n is required (as a flag or [synth] n in the config file)".into()
            ))
        })?,
    };
    let no_split = args.no_split || section.no_split.unwrap_or(false);
    let ratios = match (&args.ratios, section.split_ratios) {
        (Some(text), _) => Some(parse_ratios(text)?),
        (None, Some(r)) => Some(r),
        (None, None) => Some(trainer::DEFAULT_SPLIT_RATIOS),
    };
    let split = if no_split || n < 3 { None } else { ratios };

    let manifest = generate_dataset(n, &params, &args.out, split)?;
    write_echo(
        &args.out,
        "synth-config.toml",
        &SynthEcho {
            n,
            split_ratios: split,
            params,
        },
    )?;
    let (tr, va, te) = manifest.counts();
    println!(
        "wrote {n} phantom pairs to {} (train/val/test = {tr}/{va}/{te})",
        args.out.display()
    );
    Ok(())
}

fn parse_ratios(text: &str) -> anyhow::Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing split ratios {text:?}"))?;
    if parts.len() != 3 {
        bail!("split ratios need exactly three comma-separated values, got {text:?}");
    }
    Ok((parts[0], parts[1], parts[2]))
}

#[derive(Serialize)]
struct PreprocessEcho {
    manifest: String,
    width: usize,
    height: usize,
    clahe: bool,
    clahe_params: ClaheParams,
}

pub fn preprocess(args: PreprocessArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let section = file.preprocess.unwrap_or_default();

    let width = args.width.or(section.width).unwrap_or(512);
    let height = args.height.or(section.height).unwrap_or(512);
    let apply_clahe = if args.no_clahe {
        false
    } else {
        section.clahe.unwrap_or(true)
    };
    let defaults = ClaheParams::default();
    let clahe_params = ClaheParams {
        tiles_x: args.tiles_x.or(section.tiles_x).unwrap_or(defaults.tiles_x),
        tiles_y: args.tiles_y.or(section.tiles_y).unwrap_or(defaults.tiles_y),
        clip_limit: args
            .clip_limit
            .or(section.clip_limit)
            .unwrap_or(defaults.clip_limit),
        bins: args.bins.or(section.bins).unwrap_or(defaults.bins),
    };

    let manifest = DatasetManifest::load(&args.manifest)?;
    if manifest.entries.is_empty() {
        bail!(vertseg_core::Error::Manifest(format!(
            "{}: no entries",
            args.manifest.display()
        )));
    }

    let mut seen_names = HashSet::new();
    for e in &manifest.entries {
        let name = file_name(&e.image)?;
        file_name(&e.mask)?;
        if !seen_names.insert(name.to_string()) {
            bail!(vertseg_core::Error::Manifest(format!(
                "duplicate image file name {name:?} would collide in the output directory"
            )));
        }
    }

    let mut entries = Vec::with_capacity(manifest.entries.len());
    let mut failures: Vec<(PathBuf, vertseg_core::Error)> = Vec::new();
    for e in &manifest.entries {
        match preprocess_entry(e, &args.out, width, height, apply_clahe, &clahe_params) {
            Ok(entry) => entries.push(entry),
            Err(err) => failures.push((e.image.clone(), err)),
        }
    }

    if !failures.is_empty() {
        for (path, err) in &failures {
            eprintln!("failed: {}: {err}", path.display());
        }
        let (_, first) = failures.swap_remove(0);
        return Err(anyhow!(first).context(format!(
            "{} of {} entries failed preprocessing",
            failures.len() + 1,
            manifest.entries.len()
        )));
    }

    DatasetManifest {
        entries,
        seed: None,
    }
    .save(&args.out.join("manifest.tsv"))?;
    write_echo(
        &args.out,
        "preprocess-config.toml",
        &PreprocessEcho {
            manifest: args.manifest.display().to_string(),
            width,
            height,
            clahe: apply_clahe,
            clahe_params,
        },
    )?;
    println!(
        "preprocessed {} pairs to {width}x{height} in {}",
        manifest.entries.len(),
        args.out.display()
    );
    Ok(())
}

fn file_name(path: &Path) -> anyhow::Result<&str> {
    path.file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| anyhow!("path {} has no usable file name", path.display()))
}

fn preprocess_entry(
    entry: &ManifestEntry,
    out_dir: &Path,
    width: usize,
    height: usize,
    apply_clahe: bool,
    clahe_params: &ClaheParams,
) -> Result<ManifestEntry, vertseg_core::Error> {
    let image = load_gray(&entry.image)?;
    let image = if apply_clahe {
        clahe(&image, clahe_params)?
    } else {
        image
    };
    let image = resize_bilinear(&image, width, height)?;

    let mask = decode_mask(&load_gray(&entry.mask)?)?;
    let mask = resize_mask(&mask, width, height)?;

    let image_rel = PathBuf::from("images").join(entry.image.file_name().expect("validated above"));
    let mask_rel = PathBuf::from("masks").join(entry.mask.file_name().expect("validated above"));
    save_gray(&out_dir.join(&image_rel), &image)?;
    save_gray(&out_dir.join(&mask_rel), &encode_mask(&mask))?;
    Ok(ManifestEntry {
        split: entry.split,
        image: image_rel,
        mask: mask_rel,
    })
}

#[derive(Serialize)]
struct TrainEcho {
    manifest: String,
    unet: UNetConfig,
    train: TrainConfig,
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let section = file.train.unwrap_or_default();

    let unet_defaults = UNetConfig::default();
    let unet = UNetConfig {
        depth: args.depth.or(section.depth).unwrap_or(unet_defaults.depth),
        base_channels: args
            .base_channels
            .or(section.base_channels)
            .unwrap_or(unet_defaults.base_channels),
        ..unet_defaults
    };
    let defaults = TrainConfig::default();
    let train_config = TrainConfig {
        learning_rate: args
            .learning_rate
            .or(section.learning_rate)
            .unwrap_or(defaults.learning_rate),
        beta1: section.beta1.unwrap_or(defaults.beta1),
        beta2: section.beta2.unwrap_or(defaults.beta2),
        epsilon: section.epsilon.unwrap_or(defaults.epsilon),
        batch_size: args
            .batch_size
            .or(section.batch_size)
            .unwrap_or(defaults.batch_size),
        max_epochs: args
            .max_epochs
            .or(section.max_epochs)
            .unwrap_or(defaults.max_epochs),
        plateau_patience: args
            .patience
            .or(section.plateau_patience)
            .unwrap_or(defaults.plateau_patience),
        plateau_min_delta: args
            .min_delta
            .or(section.plateau_min_delta)
            .unwrap_or(defaults.plateau_min_delta),
        augment: args.augment || section.augment.unwrap_or(defaults.augment),
        seed: args.seed.or(section.seed).unwrap_or(defaults.seed),
        threshold: args
            .threshold
            .or(section.threshold)
            .unwrap_or(defaults.threshold),
        dice_smooth: args
            .smooth
            .or(section.dice_smooth)
            .unwrap_or(defaults.dice_smooth),
    };

    let manifest = DatasetManifest::load(&args.manifest)?;
    std::fs::create_dir_all(args.out.join("reports"))
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_echo(
        &args.out,
        "config",
        &TrainEcho {
            manifest: args.manifest.display().to_string(),
            unet,
            train: train_config,
        },
    )?;

    let mut model = UNetModel::<f32>::build(unet, train_config.seed)?;
    println!(
        "training depth-{} base-{} network ({} parameters); follow {} for progress",
        unet.depth,
        unet.base_channels,
        model.param_count(),
        args.out.join("log").display()
    );
    let outcome = trainer::train(&mut model, &manifest, &train_config, &args.out)?;
    println!(
        "{} epochs ({}), best epoch {} with val loss {}; best checkpoint: {}",
        outcome.epochs_run,
        if outcome.stopped_early {
            "stopped on validation plateau"
        } else {
            "reached max epochs"
        },
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.best_checkpoint.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho {
    manifest: String,
    split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pred_dir: Option<String>,
    threshold: f64,
    dice_smooth: f64,
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let section = file.eval.unwrap_or_default();

    let split_name = args
        .split
        .or(section.split)
        .unwrap_or_else(|| "test".to_string());
    let split = Split::parse(&split_name)?;
    let threshold = args.threshold.or(section.threshold).unwrap_or(0.5);
    let smooth = args.smooth.or(section.dice_smooth).unwrap_or(1.0);

    let manifest = DatasetManifest::load(&args.manifest)?;
    let entries: Vec<&ManifestEntry> = manifest.entries_for(split).collect();
    if entries.is_empty() {
        bail!(vertseg_core::Error::Parameter(format!(
            "split {split} of {} is empty",
            args.manifest.display()
        )));
    }

    let model = match (&args.checkpoint, &args.pred_dir) {
        (Some(ckpt), None) => Some(load_checkpoint(ckpt)?),
        (None, Some(_)) => None,
        (None, None) => bail!(vertseg_core::Error::Parameter(
            "eval needs either --checkpoint or --pred-dir".into()
        )),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };

    let mut per_image = Vec::with_capacity(entries.len());
    for entry in &entries {
        let truth = decode_mask(&load_gray(&entry.mask)?)?;
        let id = file_name(&entry.image)?.to_string();
        let (pred_probs, hard) = match &model {
            Some(model) => {
                let image = load_gray(&entry.image)?;
                let mut graph = Graph::<f32>::new();
                let pass = model.forward(&mut graph, normalize::<f32>(&image))?;
                let pred = graph.value(pass.output).clone();
                let hard = binarize_prediction(&pred, threshold)?;
                (pred, hard)
            }
            None => {
                let dir = args.pred_dir.as_ref().expect("mode checked");
                let pred_path = dir.join(file_name(&entry.image)?);
                let hard = decode_mask(&load_gray(&pred_path)?)?;
                let probs = Tensor::<f32>::new(
                    vec![1, 1, hard.height(), hard.width()],
                    hard.pixels().iter().map(|&p| p as f32).collect(),
                )?;
                (probs, hard)
            }
        };
        per_image.push(ImageMetrics {
            id,
            dice: dice_score(&hard, &truth)?,
            iou: iou(&hard, &truth)?,
            loss: combined_loss_value(&pred_probs, &truth, smooth)?,
        });
    }

    let report = MetricsReport::from_per_image(per_image)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let table_path = args.out.join("metrics.tsv");
    std::fs::write(&table_path, report.to_table())
        .with_context(|| format!("writing {}", table_path.display()))?;
    let json_path = args.out.join("metrics.json");
    std::fs::write(&json_path, report.to_json())
        .with_context(|| format!("writing {}", json_path.display()))?;
    write_echo(
        &args.out,
        "eval-config.toml",
        &EvalEcho {
            manifest: args.manifest.display().to_string(),
            split: split_name,
            checkpoint: args.checkpoint.map(|p| p.display().to_string()),
            pred_dir: args.pred_dir.map(|p| p.display().to_string()),
            threshold,
            dice_smooth: smooth,
        },
    )?;

    // Scores are stored in [0, 1]; console output scales by 100.
    println!(
        "split {split}: mean dice {:.2}  mean iou {:.2}  mean loss {:.4}  (n={}, dice/iou x100)",
        report.mean_dice * 100.0,
        report.mean_iou * 100.0,
        report.mean_loss,
        report.per_image.len()
    );
    println!("reports: {} and {}", table_path.display(), json_path.display());
    Ok(())
}

pub fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let section = file.predict.unwrap_or_default();
    let threshold = args.threshold.or(section.threshold).unwrap_or(0.5);

    let model = load_checkpoint(&args.checkpoint)?;
    let image = load_gray(&args.image)?;
    let mut graph = Graph::<f32>::new();
    let pass = model.forward(&mut graph, normalize::<f32>(&image))?;
    let mask = binarize_prediction(graph.value(pass.output), threshold)?;
    save_gray(&args.out, &encode_mask(&mask))?;
    println!(
        "wrote {} ({}x{}, {:.1}% foreground)",
        args.out.display(),
        mask.width(),
        mask.height(),
        mask.foreground_fraction() * 100.0
    );
    Ok(())
}

pub fn overlay(args: OverlayArgs) -> anyhow::Result<()> {
    let base = load_gray(&args.image)?;
    let truth = decode_mask(&load_gray(&args.truth)?)?;
    let pred = decode_mask(&load_gray(&args.pred)?)?;
    if truth.width() != base.width()
        || truth.height() != base.height()
        || pred.width() != base.width()
        || pred.height() != base.height()
    {
        bail!(vertseg_core::Error::Dimension(format!(
            "image {}x{}, truth {}x{}, and prediction {}x{} must all match",
            base.width(),
            base.height(),
            truth.width(),
            truth.height(),
            pred.width(),
            pred.height()
        )));
    }

    let rgb = render_overlay(&base, &truth, &pred);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    rgb.save_with_format(&args.out, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Grayscale base with truth-only pixels tinted red, prediction-only blue,
/// and agreement purple; background untinted.
fn render_overlay(base: &GrayImage, truth: &BinaryMask, pred: &BinaryMask) -> image::RgbImage {
    let max = base.bit_depth().max_value() as u32;
    image::RgbImage::from_fn(base.width() as u32, base.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let gray = (base.get(x, y) as u32 * 255 / max) as u8;
        let tint = |channel_on: bool| -> u8 {
            if channel_on {
                ((gray as u16 + 255) / 2) as u8
            } else {
                (gray / 2) as u8
            }
        };
        match (truth.get(x, y) == 1, pred.get(x, y) == 1) {
            (false, false) => image::Rgb([gray, gray, gray]),
            (true, false) => image::Rgb([tint(true), tint(false), tint(false)]),
            (false, true) => image::Rgb([tint(false), tint(false), tint(true)]),
            (true, true) => image::Rgb([tint(true), tint(false), tint(true)]),
        }
    })
}
