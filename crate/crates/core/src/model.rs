//! Reference classifier: one ReLU hidden layer feeding a linear head.
//!
//! The hidden activations are the embedding `z` consumed by probing heads.
//! Parameters live in `f64`; after training they are rounded through `f32`
//! so that the in-memory model and its checkpoint are the same numbers.

use std::ops::Deref;

use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sspb::{Container, Tensor};
use crate::tensor::{
    log_sum_exp, softmax_in_place, softmax_rows, EmbeddingMatrix, ImageBatch, LogitMatrix, Matrix, ProbMatrix,
};

/// Fully connected layer `y = W z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearLayer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward_into(&self, z: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.bias[k] + dot(self.weight.row(k), z);
        }
    }

    /// Logits for every row of `z`.
    pub fn logits(&self, z: &Matrix) -> Result<LogitMatrix> {
        if z.cols() != self.in_dim() {
            return Err(Error::invalid(format!(
                "layer expects {} inputs, got {}",
                self.in_dim(),
                z.cols()
            )));
        }
        let mut out = Matrix::zeros(z.rows(), self.out_dim());
        for i in 0..z.rows() {
            self.forward_into(z.row(i), out.row_mut(i));
        }
        LogitMatrix::new(out)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }

    pub fn round_to_f32(&mut self) {
        self.weight.round_to_f32();
        for v in &mut self.bias {
            *v = *v as f32 as f64;
        }
    }

    pub(crate) fn to_tensors(&self) -> (Tensor, Tensor) {
        let w = Tensor::f32(&[self.out_dim(), self.in_dim()], self.weight.to_f32_vec()).unwrap();
        let b = Tensor::f32(&[self.out_dim()], self.bias.iter().map(|&v| v as f32).collect()).unwrap();
        (w, b)
    }

    pub(crate) fn from_tensors(w: &Tensor, b: &Tensor, what: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("checkpoint section {what} has unexpected shape or dtype"));
        let (wd, bd) = (w.dims_usize(), b.dims_usize());
        if wd.len() != 2 || bd.len() != 1 || bd[0] != wd[0] {
            return Err(bad());
        }
        let wv = w.as_f32().ok_or_else(bad)?;
        let bv = b.as_f32().ok_or_else(bad)?;
        Ok(LinearLayer {
            weight: Matrix::from_vec(wd[0], wd[1], wv.iter().map(|&v| v as f64).collect())?,
            bias: bv.iter().map(|&v| v as f64).collect(),
        })
    }

    fn hash_into(&self, h: &mut Sha256) {
        for v in self.weight.as_slice().iter().chain(&self.bias) {
            h.update(v.to_le_bytes());
        }
    }
}

/// Classification head `f_c`, a linear layer over embeddings.
pub type ClassifierHead = LinearLayer;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_f32(a: &[f64], x: &[f32]) -> f64 {
    a.iter().zip(x).map(|(w, &v)| w * v as f64).sum()
}

/// Hidden ReLU layer mapping a flattened image to its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub hidden: LinearLayer,
    /// Expected `(channels, height, width)` of input images.
    pub input_shape: (usize, usize, usize),
}

impl Backbone {
    pub fn embed_dim(&self) -> usize {
        self.hidden.out_dim()
    }

    fn check_batch(&self, batch: &ImageBatch) -> Result<()> {
        let (c, h, w) = self.input_shape;
        let [_, bc, bh, bw] = batch.dims();
        if (bc, bh, bw) != (c, h, w) {
            return Err(Error::invalid(format!(
                "model expects {c}x{h}x{w} images, batch holds {bc}x{bh}x{bw}"
            )));
        }
        Ok(())
    }

    /// Pre-activation and embedding of one flattened image.
    fn hidden_one(&self, x: &[f32], pre: &mut [f64], z: &mut [f64]) {
        for d in 0..self.embed_dim() {
            pre[d] = self.hidden.bias[d] + dot_f32(self.hidden.weight.row(d), x);
            z[d] = pre[d].max(0.0);
        }
    }

    pub fn embed_image(&self, x: &[f32]) -> Vec<f64> {
        let d = self.embed_dim();
        let mut pre = vec![0.0; d];
        let mut z = vec![0.0; d];
        self.hidden_one(x, &mut pre, &mut z);
        z
    }

    pub fn embed(&self, batch: &ImageBatch) -> Result<EmbeddingMatrix> {
        self.check_batch(batch)?;
        let d = self.embed_dim();
        let mut out = Matrix::zeros(batch.len(), d);
        let mut pre = vec![0.0; d];
        for i in 0..batch.len() {
            let mut z = vec![0.0; d];
            self.hidden_one(batch.image(i), &mut pre, &mut z);
            out.row_mut(i).copy_from_slice(&z);
        }
        EmbeddingMatrix::new(out)
    }

    pub fn freeze(self) -> FrozenBackbone {
        FrozenBackbone(self)
    }

    /// SHA-256 over the parameter bits; changes whenever any weight changes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.hidden.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}

/// A backbone whose parameters can no longer change.
///
/// Only shared access is exposed, so probing and calibration code holding a
/// `FrozenBackbone` cannot mutate `θ_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone(Backbone);

impl Deref for FrozenBackbone {
    type Target = Backbone;
    fn deref(&self) -> &Backbone {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(Error::invalid(format!("lr0 must be finite and >= 0, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at optimizer step `step` of `total` (no restarts).
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// He-normal initialization `N(0, 2 / fan_in)` with zero biases.
pub fn init_model(
    input_shape: (usize, usize, usize),
    hidden: usize,
    num_classes: usize,
    seed: u64,
) -> Result<(Backbone, ClassifierHead)> {
    if hidden < num_classes {
        return Err(Error::invalid(format!(
            "embedding dim {hidden} must be at least the class count {num_classes}"
        )));
    }
    let (c, h, w) = input_shape;
    let fan_in = c * h * w;
    let mut rng = Rng::new(seed);
    let mut layer = |out: usize, inp: usize| {
        let std = (2.0 / inp as f64).sqrt();
        let data = (0..out * inp).map(|_| std * rng.normal()).collect();
        LinearLayer {
            weight: Matrix::from_vec(out, inp, data).unwrap(),
            bias: vec![0.0; out],
        }
    };
    let hidden_layer = layer(hidden, fan_in);
    let head = layer(num_classes, hidden);
    Ok((
        Backbone {
            hidden: hidden_layer,
            input_shape,
        },
        head,
    ))
}

/// Embeddings, logits and probabilities for a batch.
pub fn forward(
    backbone: &Backbone,
    head: &ClassifierHead,
    batch: &ImageBatch,
) -> Result<(EmbeddingMatrix, LogitMatrix, ProbMatrix)> {
    let z = backbone.embed(batch)?;
    let logits = head.logits(&z)?;
    let probs = softmax_rows(&logits)?;
    Ok((z, logits, probs))
}

/// Embeddings from a frozen backbone; the backbone is only borrowed.
pub fn embed_dataset(backbone: &FrozenBackbone, batch: &ImageBatch) -> Result<EmbeddingMatrix> {
    backbone.embed(batch)
}

/// Gradients of the mean cross-entropy with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: LinearLayer,
    pub head: LinearLayer,
}

/// Mean cross-entropy of `labels` under the model, with analytic gradients.
pub fn loss_and_gradients(
    backbone: &Backbone,
    head: &ClassifierHead,
    images: &[&[f32]],
    labels: &[usize],
) -> (f64, Gradients) {
    let d = backbone.embed_dim();
    let k = head.out_dim();
    let inv_b = 1.0 / images.len() as f64;
    let mut g = Gradients {
        hidden: LinearLayer::zeros(d, backbone.hidden.in_dim()),
        head: LinearLayer::zeros(k, d),
    };
    let mut pre = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut logits = vec![0.0; k];
    let mut dz = vec![0.0; d];
    let mut loss = 0.0;
    for (x, &y) in images.iter().zip(labels) {
        backbone.hidden_one(x, &mut pre, &mut z);
        head.forward_into(&z, &mut logits);
        loss += log_sum_exp(&logits) - logits[y];
        softmax_in_place(&mut logits);
        logits[y] -= 1.0;
        dz.iter_mut().for_each(|v| *v = 0.0);
        for (c, &dl) in logits.iter().enumerate() {
            let dl = dl * inv_b;
            g.head.bias[c] += dl;
            let wrow = head.weight.row(c);
            let grow = g.head.weight.row_mut(c);
            for j in 0..d {
                grow[j] += dl * z[j];
                dz[j] += dl * wrow[j];
            }
        }
        for j in 0..d {
            if pre[j] <= 0.0 {
                continue;
            }
            let dp = dz[j];
            g.hidden.bias[j] += dp;
            for (gw, &xv) in g.hidden.weight.row_mut(j).iter_mut().zip(x.iter()) {
                *gw += dp * xv as f64;
            }
        }
    }
    (loss * inv_b, g)
}

fn sgd_step(layer: &mut LinearLayer, grad: &LinearLayer, lr: f64) {
    for (w, g) in layer.weight.as_mut_slice().iter_mut().zip(grad.weight.as_slice()) {
        *w -= lr * g;
    }
    for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
        *b -= lr * g;
    }
}

/// Mini-batch SGD on mean cross-entropy; returns the mean training loss of each epoch.
pub fn train_classifier(
    backbone: &mut Backbone,
    head: &mut ClassifierHead,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    backbone.check_batch(&train.images)?;
    if train.labels.num_classes() != head.out_dim() {
        return Err(Error::invalid(format!(
            "head has {} outputs but the dataset has {} classes",
            head.out_dim(),
            train.labels.num_classes()
        )));
    }
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<&[f32]> = chunk.iter().map(|&i| train.images.image(i)).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train.labels.as_slice()[i]).collect();
            let (loss, g) = loss_and_gradients(backbone, head, &imgs, &ys);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            let lr = cosine_lr(cfg.lr0, step, total);
            sgd_step(&mut backbone.hidden, &g.hidden, lr);
            sgd_step(head, &g.head, lr);
            step += 1;
        }
        trace.push(epoch_loss / n as f64);
    }
    if !backbone.hidden.is_finite() || !head.is_finite() {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    Ok(trace)
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(probs: &ProbMatrix, labels: &[usize]) -> f64 {
    let hits = probs.predictions().iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Write backbone and classifier sections into a checkpoint container.
pub fn store_model(c: &mut Container, backbone: &Backbone, head: &ClassifierHead) {
    let (w1, b1) = backbone.hidden.to_tensors();
    let (ch, h, w) = backbone.input_shape;
    c.push(
        "backbone.input_shape",
        Tensor::i32(&[3], vec![ch as i32, h as i32, w as i32]).unwrap(),
    );
    c.push("backbone.w1", w1);
    c.push("backbone.b1", b1);
    let (wc, bc) = head.to_tensors();
    c.push("classifier.wc", wc);
    c.push("classifier.bc", bc);
}

pub fn load_model(c: &Container) -> Result<(Backbone, ClassifierHead)> {
    let get = |name: &str| {
        c.get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks section {name}")))
    };
    let shape = get("backbone.input_shape")?
        .as_i32()
        .filter(|s| s.len() == 3 && s.iter().all(|&v| v > 0))
        .ok_or_else(|| Error::invalid("bad backbone.input_shape section"))?
        .to_vec();
    let hidden = LinearLayer::from_tensors(get("backbone.w1")?, get("backbone.b1")?, "backbone")?;
    let head = LinearLayer::from_tensors(get("classifier.wc")?, get("classifier.bc")?, "classifier")?;
    let input_shape = (shape[0] as usize, shape[1] as usize, shape[2] as usize);
    if hidden.in_dim() != input_shape.0 * input_shape.1 * input_shape.2 || head.in_dim() != hidden.out_dim() {
        return Err(Error::invalid("checkpoint layer dimensions do not chain"));
    }
    Ok((Backbone { hidden, input_shape }, head))
}
