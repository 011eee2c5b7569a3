//! Segmentation metrics: pixel accuracy, Dice and IoU.
//!
//! Dice and IoU are averaged over classes with equal weight, background
//! included. A class absent from both maps scores 1.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Pixel and overlap counts, pooled over any number of label-map pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationCounts {
    classes: usize,
    correct: u64,
    total: u64,
    intersection: Vec<u64>,
    predicted: Vec<u64>,
    truth: Vec<u64>,
}

impl SegmentationCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            correct: 0,
            total: 0,
            intersection: vec![0; classes],
            predicted: vec![0; classes],
            truth: vec![0; classes],
        }
    }

    pub fn from_maps(pred: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        let mut c = Self::new(classes);
        c.add(pred, truth)?;
        Ok(c)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!("prediction has {} pixels, truth has {}", pred.len(), truth.len())));
        }
        if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= self.classes) {
            return Err(Error::invalid(format!("label {bad} is not below {}", self.classes)));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.predicted[p] += 1;
            self.truth[t] += 1;
            if p == t {
                self.correct += 1;
                self.intersection[p] += 1;
            }
        }
        self.total += pred.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &SegmentationCounts) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("cannot merge counts over different class sets"));
        }
        self.correct += other.correct;
        self.total += other.total;
        for k in 0..self.classes {
            self.intersection[k] += other.intersection[k];
            self.predicted[k] += other.predicted[k];
            self.truth[k] += other.truth[k];
        }
        Ok(())
    }

    /// Fraction of matching pixels; 1 for an empty set.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn dice_per_class(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let denom = self.predicted[k] + self.truth[k];
                if denom == 0 {
                    1.0
                } else {
                    2.0 * self.intersection[k] as f64 / denom as f64
                }
            })
            .collect()
    }

    pub fn iou_per_class(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let union = self.predicted[k] + self.truth[k] - self.intersection[k];
                if union == 0 {
                    1.0
                } else {
                    self.intersection[k] as f64 / union as f64
                }
            })
            .collect()
    }

    pub fn dice(&self) -> f64 {
        mean(&self.dice_per_class())
    }

    pub fn iou(&self) -> f64 {
        mean(&self.iou_per_class())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let classes = pred.iter().chain(truth).max().map_or(1, |&m| m + 1);
    Ok(SegmentationCounts::from_maps(pred, truth, classes)?.accuracy())
}

pub fn dice(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    Ok(SegmentationCounts::from_maps(pred, truth, num_classes)?.dice())
}

pub fn iou(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    Ok(SegmentationCounts::from_maps(pred, truth, num_classes)?.iou())
}

/// One epoch of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ac: f64,
    pub dc: f64,
    pub iou: f64,
    pub ac_val: f64,
    pub dc_val: f64,
    pub iou_val: f64,
    pub dc_val_per_class: Vec<f64>,
    pub iou_val_per_class: Vec<f64>,
}

impl MetricsRecord {
    pub fn csv_header(num_classes: usize) -> String {
        let mut s = String::from("epoch,loss,AC,DC,IoU,AC_val,DC_val,IoU_val");
        for k in 0..num_classes {
            write!(s, ",DC_{k}").unwrap();
        }
        for k in 0..num_classes {
            write!(s, ",IoU_{k}").unwrap();
        }
        s
    }

    pub fn to_csv_row(&self) -> String {
        let mut s = format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.loss, self.ac, self.dc, self.iou, self.ac_val, self.dc_val, self.iou_val
        );
        for v in self.dc_val_per_class.iter().chain(&self.iou_val_per_class) {
            write!(s, ",{v:.6}").unwrap();
        }
        s
    }
}
