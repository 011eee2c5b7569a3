//! Training loop, evaluation and prediction export.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{self, pgm, DatasetSplit, LabeledImage};
use crate::error::{Error, Result};
use crate::fcm::MembershipMatrix;
use crate::loss::{self, LabelField};
use crate::matrix::ClassMatrix;
use crate::metrics::{MetricsRecord, SegmentationCounts};
use crate::models::{forward_segment, Model};
use crate::nn::{adam_step, Graph, Mode, OptimizerState, Tensor, TensorArchive};
use crate::seed::{self, stream};

use super::config::RunConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRecord>,
    /// Index into `history` of the best validation Dice.
    pub best_index: usize,
    pub stopped_early: bool,
    /// Weights at the best epoch.
    pub model: Model<f32>,
}

impl TrainOutcome {
    pub fn best(&self) -> &MetricsRecord {
        &self.history[self.best_index]
    }

    pub fn last(&self) -> &MetricsRecord {
        self.history.last().expect("at least one epoch")
    }
}

/// Loads the configured dataset (from disk, or generated in memory) and
/// makes sure memberships exist when the loss needs them.
pub fn load_images(cfg: &RunConfig) -> Result<Vec<LabeledImage>> {
    let images = match &cfg.data_dir {
        Some(dir) => {
            if !dir.join("manifest.txt").is_file() {
                return Err(Error::config(format!("{} is not a dataset directory (no manifest.txt)", dir.display())));
            }
            let images = data::read_dataset(dir)?;
            if cfg.loss.needs_fcm() {
                if let Some(img) = images.iter().find(|i| i.memberships.is_none()) {
                    return Err(Error::config(format!(
                        "loss uses FCM memberships ({}) but image {} in {} has no cached membership file",
                        cfg.loss.membership_source,
                        img.index,
                        dir.display()
                    )));
                }
            }
            images
        }
        None => {
            let mut images = data::generate_phantoms(&cfg.phantom)?;
            if cfg.loss.needs_fcm() {
                data::cache_memberships(&mut images, &cfg.fcm)?;
            }
            images
        }
    };
    if images.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    for img in &images {
        img.validate(cfg.phantom.num_classes)?;
    }
    Ok(images)
}

pub fn prepare(cfg: &RunConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    data::split_dataset(load_images(cfg)?, cfg.split_fraction, cfg.seed)
}

/// Stacks images into `[B, 1, H, W]`.
fn batch_tensor(images: &[&LabeledImage]) -> Result<Tensor<f32>> {
    let (h, w) = (images[0].height, images[0].width);
    if images.iter().any(|i| (i.height, i.width) != (h, w)) {
        return Err(Error::shape("images in a batch must share a size"));
    }
    let data = images.iter().flat_map(|i| i.intensities.iter().map(|&v| v as f32)).collect();
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// `[B, c, H, W]` logits as one `c x (B*H*W)` matrix, image-major.
fn logits_matrix(t: &Tensor<f32>) -> Result<ClassMatrix> {
    let (b, c, h, w) = t.dims4()?;
    let hw = h * w;
    let mut m = ClassMatrix::zeros(c, b * hw);
    let d = t.data();
    for bi in 0..b {
        for k in 0..c {
            for p in 0..hw {
                m.set(k, bi * hw + p, d[(bi * c + k) * hw + p] as f64);
            }
        }
    }
    Ok(m)
}

/// Inverse of [`logits_matrix`], scaled.
fn matrix_to_layout(m: &ClassMatrix, b: usize, scale: f64) -> Vec<f32> {
    let c = m.classes();
    let hw = m.pixels() / b;
    let mut out = vec![0.0f32; c * m.pixels()];
    for bi in 0..b {
        for k in 0..c {
            for p in 0..hw {
                out[(bi * c + k) * hw + p] = (scale * m.get(k, bi * hw + p)) as f32;
            }
        }
    }
    out
}

fn stacked_memberships(images: &[&LabeledImage]) -> Option<MembershipMatrix> {
    let first = images[0].memberships.as_ref()?;
    let c = first.clusters();
    let n: usize = images.iter().map(|i| i.pixels()).sum();
    let mut m = ClassMatrix::zeros(c, n);
    let mut off = 0;
    for img in images {
        let u = img.memberships.as_ref()?;
        for k in 0..c {
            for p in 0..img.pixels() {
                m.set(k, off + p, u.get(k, p));
            }
        }
        off += img.pixels();
    }
    Some(MembershipMatrix(m))
}

/// Predictions and pooled counts over a set of images.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub counts: SegmentationCounts,
    pub predictions: Vec<Vec<usize>>,
}

/// Evaluation-mode forward over `images` in batches.
pub fn evaluate(model: &mut Model<f32>, images: &[LabeledImage], batch_size: usize) -> Result<Evaluation> {
    let mut counts = SegmentationCounts::new(model.spec.num_classes);
    let mut predictions = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let fields = forward_segment(model, &batch_tensor(&refs)?)?;
        for (img, p) in chunk.iter().zip(fields) {
            let pred = p.argmax();
            counts.add(&pred, &img.labels)?;
            predictions.push(pred);
        }
    }
    Ok(Evaluation { counts, predictions })
}

/// Writes `pred_%04d.pgm` (class ids, like the label files) per image.
pub fn write_predictions(dir: impl AsRef<Path>, images: &[LabeledImage], predictions: &[Vec<usize>]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (img, pred) in images.iter().zip(predictions) {
        pgm::save_labels_pgm(pred, img.width, img.height, dir.join(format!("pred_{:04}.pgm", img.index)))?;
    }
    Ok(())
}

fn write_csv(path: &Path, num_classes: usize, history: &[MetricsRecord]) -> Result<()> {
    let mut s = MetricsRecord::csv_header(num_classes);
    s.push('\n');
    for r in history {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Trains on a prepared split. With `out_dir`, writes `metrics.csv` after
/// every epoch and `best.ckpt` whenever validation Dice improves. When the
/// validation set is empty the training images are scored in its place.
pub fn train_split(cfg: &RunConfig, split: &DatasetSplit, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let needs_fcm = cfg.loss.needs_fcm();
    if needs_fcm {
        if let Some(img) = split.train.iter().find(|i| i.memberships.is_none()) {
            return Err(Error::config(format!(
                "loss uses FCM memberships ({}) but image {} has none cached",
                cfg.loss.membership_source, img.index
            )));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let c = cfg.phantom.num_classes;
    let mut model = Model::<f32>::build(cfg.model, &cfg.unet_spec(), cfg.deep_supervision, cfg.seed)?;
    let mut opt = OptimizerState::adam(cfg.learning_rate);
    let val_set = if split.val.is_empty() { &split.train } else { &split.val };

    let mut history: Vec<MetricsRecord> = Vec::new();
    let mut best_index = 0;
    let mut best_archive: Option<TensorArchive> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut train_counts = SegmentationCounts::new(c);
        let mut loss_sum = 0.0;

        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<&LabeledImage> = idx.iter().map(|&i| &split.train[i]).collect();
            let labels: Vec<usize> = imgs.iter().flat_map(|i| i.labels.iter().copied()).collect();
            let y = LabelField::from_labels(&labels, c)?;
            let u = if needs_fcm { stacked_memberships(&imgs) } else { None };

            let mut g = Graph::new();
            let x = g.input(batch_tensor(&imgs)?);
            let mut rng = seed::rng(cfg.seed, &[stream::DROPOUT, epoch as u64, bi as u64]);
            let heads = model.forward(&mut g, x, Mode::Train, &mut rng)?;
            let weight = 1.0 / heads.len() as f64;

            let mut batch_loss = 0.0;
            let mut root = None;
            for &head in &heads {
                if !g.value(head).is_finite() {
                    return Err(Error::Numeric(format!("non-finite logits at epoch {epoch}, batch {bi}")));
                }
                let z = logits_matrix(g.value(head))?;
                let (value, grad) = loss::loss_and_grad(&y, &z, u.as_ref(), &cfg.loss)?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {bi}")));
                }
                batch_loss += weight * value;
                let term = g.external_loss(head, (weight * value) as f32, matrix_to_layout(&grad, imgs.len(), weight))?;
                root = Some(match root {
                    None => term,
                    Some(r) => g.add(r, term)?,
                });
            }
            let last = *heads.last().expect("at least one head");
            train_counts.add(&logits_matrix(g.value(last))?.argmax_columns(), &labels)?;

            model.store.zero_grad();
            g.backward(root.expect("at least one head"), &mut model.store)?;
            adam_step(&mut model.store, &mut opt)?;
            if model.store.iter().any(|p| !p.value.is_finite()) {
                return Err(Error::Numeric(format!("non-finite parameter after epoch {epoch}, batch {bi}")));
            }
            loss_sum += batch_loss * imgs.len() as f64;
        }

        let val = evaluate(&mut model, val_set, cfg.batch_size)?;
        let record = MetricsRecord {
            epoch,
            loss: loss_sum / split.train.len() as f64,
            ac: train_counts.accuracy(),
            dc: train_counts.dice(),
            iou: train_counts.iou(),
            ac_val: val.counts.accuracy(),
            dc_val: val.counts.dice(),
            iou_val: val.counts.iou(),
            dc_val_per_class: val.counts.dice_per_class(),
            iou_val_per_class: val.counts.iou_per_class(),
        };

        let improved = best_archive.is_none() || record.dc_val > history[best_index].dc_val;
        history.push(record);
        if improved {
            best_index = history.len() - 1;
            since_best = 0;
            let mut ar = model.to_archive();
            ar.set_meta("epoch", epoch.to_string());
            if let Some(dir) = out_dir {
                ar.save(dir.join(CHECKPOINT_FILE))?;
            }
            best_archive = Some(ar);
        } else {
            since_best += 1;
        }
        if let Some(dir) = out_dir {
            write_csv(&dir.join(METRICS_FILE), c, &history)?;
        }
        if cfg.early_stopping_patience > 0 && since_best >= cfg.early_stopping_patience {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }

    let model = Model::from_archive(&best_archive.expect("at least one epoch ran"))?;
    Ok(TrainOutcome { history, best_index, stopped_early, model })
}

/// Loads data per `cfg` and trains, writing artifacts to `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let split = prepare(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    train_split(cfg, &split, Some(&cfg.out_dir))
}

/// Loads a checkpoint, scores `images` and optionally writes predictions.
pub fn evaluate_checkpoint(
    checkpoint: impl AsRef<Path>,
    images: &[LabeledImage],
    out_dir: Option<&Path>,
) -> Result<Evaluation> {
    let mut model = Model::<f32>::load_checkpoint(checkpoint)?;
    for img in images {
        img.validate(model.spec.num_classes)?;
    }
    let eval = evaluate(&mut model, images, 8)?;
    if let Some(dir) = out_dir {
        write_predictions(dir, images, &eval.predictions)?;
    }
    Ok(eval)
}
