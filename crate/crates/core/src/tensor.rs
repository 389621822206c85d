//! Domain containers shared by every stage of the pipeline.

use std::ops::Deref;

use crate::error::{Error, Result};

/// Dense row-major `rows x cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows.
        let cols = self.cols.max(1);
        let empty = self.cols == 0;
        (0..self.rows).map(move |i| {
            if empty {
                &self.data[0..0]
            } else {
                &self.data[i * cols..(i + 1) * cols]
            }
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Round every entry through `f32`, the persisted precision.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

macro_rules! matrix_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Matrix);

        impl $name {
            pub fn into_inner(self) -> Matrix {
                self.0
            }
        }

        impl Deref for $name {
            type Target = Matrix;
            fn deref(&self) -> &Matrix {
                &self.0
            }
        }
    };
}

matrix_newtype!(
    /// Backbone features, one row per sample.
    EmbeddingMatrix
);
matrix_newtype!(
    /// Classifier logits, one row per sample.
    LogitMatrix
);
matrix_newtype!(
    /// Row-stochastic class probabilities.
    ProbMatrix
);

impl EmbeddingMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        Ok(EmbeddingMatrix(m))
    }
}

impl LogitMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite("logit matrix".into()));
        }
        Ok(LogitMatrix(m))
    }
}

impl ProbMatrix {
    /// Validates that each row lies in `[0,1]` and sums to 1 within 1e-6.
    pub fn new(m: Matrix) -> Result<Self> {
        for (i, row) in m.iter_rows().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("row {i} has entries outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(ProbMatrix(m))
    }

    /// Row argmax for every sample.
    pub fn predictions(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    /// Top-label probability for every sample.
    pub fn top_confidence(&self) -> Vec<f64> {
        self.iter_rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Single-channel or RGB image batch stored `N x C x H x W`, intensities in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl ImageBatch {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("image batch must hold at least one image"));
        }
        if c != 1 && c != 3 {
            return Err(Error::invalid(format!("channel count must be 1 or 3, got {c}")));
        }
        if data.len() != n * c * h * w {
            return Err(Error::invalid(format!(
                "image batch {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(ImageBatch { n, c, h, w, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch {
            n: idx.len(),
            data,
            ..*self
        }
    }
}

/// Class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {l} outside [0,{num_classes})")));
        }
        Ok(LabelVector { labels, num_classes })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn select(&self, idx: &[usize]) -> LabelVector {
        LabelVector {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Per-sample scores; orientation is "higher = more trustworthy".
pub type ScoreVector = Vec<f64>;

/// Numerically stable softmax of a single row (max-shifted).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln Σ exp(row)` computed with the max shift.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &LogitMatrix) -> Result<ProbMatrix> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = logits.0.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(ProbMatrix(out))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_row(row: &[f64]) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::invalid("argmax of an empty row"));
    }
    Ok(argmax(row))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
