//! Class-by-pixel matrices shared by the clustering and loss code.
//!
//! Storage is row-major with one row per class (or cluster) and one column
//! per pixel, so `get(i, j)` is the degree of pixel `j` in class `i`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatrix {
    classes: usize,
    pixels: usize,
    data: Vec<f64>,
}

impl ClassMatrix {
    pub fn zeros(classes: usize, pixels: usize) -> Self {
        Self { classes, pixels, data: vec![0.0; classes * pixels] }
    }

    pub fn from_vec(classes: usize, pixels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * pixels {
            return Err(Error::shape(format!(
                "{} values cannot form a {classes}x{pixels} matrix",
                data.len()
            )));
        }
        Ok(Self { classes, pixels, data })
    }

    /// Builds a matrix from per-class rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.len();
        let pixels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != pixels) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self { classes, pixels, data: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    #[inline]
    pub fn get(&self, class: usize, pixel: usize) -> f64 {
        self.data[class * self.pixels + pixel]
    }

    #[inline]
    pub fn set(&mut self, class: usize, pixel: usize, v: f64) {
        self.data[class * self.pixels + pixel] = v;
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.data[class * self.pixels..(class + 1) * self.pixels]
    }

    pub fn column(&self, pixel: usize) -> Vec<f64> {
        (0..self.classes).map(|i| self.get(i, pixel)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ClassMatrix) -> bool {
        self.classes == other.classes && self.pixels == other.pixels
    }

    pub(crate) fn check_same_shape(&self, other: &ClassMatrix, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape {}x{} vs {}x{}",
                self.classes, self.pixels, other.classes, other.pixels
            )))
        }
    }

    /// Largest deviation of any column sum from 1.
    pub fn max_column_sum_error(&self) -> f64 {
        (0..self.pixels)
            .map(|j| {
                let s: f64 = (0..self.classes).map(|i| self.get(i, j)).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Index of the largest entry per column; first index wins ties.
    pub fn argmax_columns(&self) -> Vec<usize> {
        (0..self.pixels)
            .map(|j| {
                let mut best = 0;
                for i in 1..self.classes {
                    if self.get(i, j) > self.get(best, j) {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { classes: self.classes, pixels: self.pixels, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}
