//! Linear probing heads on a frozen backbone and the probing confidence
//! they produce.
//!
//! A head for task `T` is trained to predict which transform of `T` was
//! applied to an image, from the frozen embedding of the transformed image.
//! At inference the head sees the untransformed image; its softmax mass on
//! label 0 (the identity) is the probing confidence.

use std::thread;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cosine_lr, FrozenBackbone, LinearLayer, TrainConfig};
use crate::rng::{fnv1a, Rng};
use crate::sspb::{Container, Tensor};
use crate::tensor::{log_sum_exp, softmax_in_place, EmbeddingMatrix, ImageBatch, Matrix};
use crate::transforms::{ProbingTask, Transform};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbingHead {
    pub task: ProbingTask,
    pub layer: LinearLayer,
}

impl ProbingHead {
    /// Zero-initialized head; its confidence is `1/k` everywhere.
    pub fn zeros(task: ProbingTask, embed_dim: usize) -> Self {
        let k = task.len();
        ProbingHead {
            task,
            layer: LinearLayer::zeros(k, embed_dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.layer.in_dim()
    }

    /// Softmax over transform labels for each embedding row.
    pub fn predict(&self, z: &Matrix) -> Result<Matrix> {
        let mut out = self.layer.logits(z)?.into_inner();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        Ok(out)
    }

    /// Probability of the identity label for each embedding row.
    pub fn confidence_from_embeddings(&self, z: &EmbeddingMatrix) -> Result<Vec<f64>> {
        let p = self.predict(z)?;
        Ok(p.iter_rows().map(|r| r[0]).collect())
    }
}

/// Embeddings of every training image under every transform of one task.
///
/// Values are rounded through `f32`, the exchange precision, so heads
/// trained in-process and heads trained from exported files see identical
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbeddings {
    pub task: ProbingTask,
    /// One `N x D` matrix per transform, rows aligned by sample.
    pub per_transform: Vec<EmbeddingMatrix>,
}

impl TaskEmbeddings {
    pub fn new(task: ProbingTask, per_transform: Vec<EmbeddingMatrix>) -> Result<Self> {
        if per_transform.len() != task.len() {
            return Err(Error::invalid(format!(
                "task {} has {} transforms but {} embedding sets were given",
                task.name(),
                task.len(),
                per_transform.len()
            )));
        }
        let (n, d) = (per_transform[0].rows(), per_transform[0].cols());
        for (t, m) in task.transforms().iter().zip(&per_transform) {
            if (m.rows(), m.cols()) != (n, d) {
                return Err(Error::invalid(format!(
                    "task {} transform {t}: expected {n}x{d} embeddings, found {}x{}",
                    task.name(),
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if n == 0 {
            return Err(Error::invalid("no training samples for probing"));
        }
        Ok(TaskEmbeddings { task, per_transform })
    }

    pub fn num_samples(&self) -> usize {
        self.per_transform[0].rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.per_transform[0].cols()
    }

    /// Keep only the transforms of `sub`, which must be drawn from this task.
    pub fn restrict(&self, sub: &ProbingTask) -> Result<TaskEmbeddings> {
        let mut picked = Vec::with_capacity(sub.len());
        for t in sub.transforms() {
            let j = self.task.transforms().iter().position(|u| u == t).ok_or_else(|| {
                Error::invalid(format!(
                    "transform {t} of {} is not part of task {}",
                    sub.name(),
                    self.task.name()
                ))
            })?;
            picked.push(self.per_transform[j].clone());
        }
        TaskEmbeddings::new(sub.clone(), picked)
    }
}

/// Apply every transform of `task` to `images` and embed the results.
pub fn embed_task(backbone: &FrozenBackbone, images: &ImageBatch, task: &ProbingTask) -> Result<TaskEmbeddings> {
    let [n, c, h, w] = images.dims();
    let mut per_transform = Vec::with_capacity(task.len());
    for t in task.transforms() {
        let mut data = Vec::with_capacity(images.as_slice().len());
        for i in 0..n {
            let (out, _, _) = t.apply(images.image(i), c, h, w)?;
            data.extend(out);
        }
        let moved = ImageBatch::new(n, c, h, w, data)?;
        let mut z = backbone.embed(&moved)?.into_inner();
        z.round_to_f32();
        per_transform.push(EmbeddingMatrix::new(z)?);
    }
    TaskEmbeddings::new(task.clone(), per_transform)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: ProbingHead,
    /// Accuracy on the probing labels of the training set after the last epoch.
    pub train_accuracy: f64,
    pub loss_trace: Vec<f64>,
}

/// Mean cross-entropy of a linear softmax layer and its gradient.
pub fn head_loss_and_gradient(layer: &LinearLayer, z: &[&[f64]], labels: &[usize]) -> (f64, LinearLayer) {
    let k = layer.out_dim();
    let d = layer.in_dim();
    let inv_b = 1.0 / z.len() as f64;
    let mut g = LinearLayer::zeros(k, d);
    let mut logits = vec![0.0; k];
    let mut loss = 0.0;
    for (row, &y) in z.iter().zip(labels) {
        layer.forward_into(row, &mut logits);
        loss += log_sum_exp(&logits) - logits[y];
        softmax_in_place(&mut logits);
        logits[y] -= 1.0;
        for (c, &dl) in logits.iter().enumerate() {
            let dl = dl * inv_b;
            g.bias[c] += dl;
            for (gw, &zv) in g.weight.row_mut(c).iter_mut().zip(row.iter()) {
                *gw += dl * zv;
            }
        }
    }
    (loss * inv_b, g)
}

fn task_seed(base: u64, task: &ProbingTask) -> u64 {
    base ^ fnv1a(format!("{}|{}", task.name(), task.spec_string()).as_bytes())
}

/// SGD on the probing labels over precomputed transformed embeddings.
///
/// Samples are shuffled first; each mini-batch then contains all `k`
/// transformed copies of its samples. The head starts at zero and is
/// rounded through `f32` at the end, matching its checkpointed form.
pub fn train_head_on_embeddings(emb: &TaskEmbeddings, cfg: &TrainConfig) -> Result<TrainedHead> {
    cfg.validate()?;
    let n = emb.num_samples();
    let k = emb.task.len();
    let mut head = ProbingHead::zeros(emb.task.clone(), emb.embed_dim());
    let mut rng = Rng::new(task_seed(cfg.seed, &emb.task));
    let mut order: Vec<usize> = (0..n).collect();
    let total = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut step = 0;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut rows: Vec<&[f64]> = Vec::with_capacity(chunk.len() * k);
            let mut labels = Vec::with_capacity(chunk.len() * k);
            for &i in chunk {
                for (j, m) in emb.per_transform.iter().enumerate() {
                    rows.push(m.row(i));
                    labels.push(j);
                }
            }
            let (loss, g) = head_loss_and_gradient(&head.layer, &rows, &labels);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("probing loss for task {}", emb.task.name())));
            }
            epoch_loss += loss * rows.len() as f64;
            let lr = cosine_lr(cfg.lr0, step, total);
            for (w, gw) in head.layer.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                *w -= lr * gw;
            }
            for (b, gb) in head.layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
            step += 1;
        }
        trace.push(epoch_loss / (n * k) as f64);
    }
    head.layer.round_to_f32();
    let mut hits = 0;
    for (j, m) in emb.per_transform.iter().enumerate() {
        let p = head.predict(m)?;
        hits += p.iter_rows().filter(|r| crate::tensor::argmax(r) == j).count();
    }
    Ok(TrainedHead {
        head,
        train_accuracy: hits as f64 / (n * k) as f64,
        loss_trace: trace,
    })
}

/// Train a probing head for `task` on the frozen backbone.
pub fn train_probing_head(
    backbone: &FrozenBackbone,
    train: &Dataset,
    task: &ProbingTask,
    cfg: &TrainConfig,
) -> Result<TrainedHead> {
    let emb = embed_task(backbone, &train.images, task)?;
    train_head_on_embeddings(&emb, cfg)
}

/// Train one head per task concurrently; output order follows `tasks`.
pub fn train_heads(tasks: &[TaskEmbeddings], cfg: &TrainConfig) -> Result<Vec<TrainedHead>> {
    thread::scope(|s| {
        let handles: Vec<_> = tasks
            .iter()
            .map(|emb| s.spawn(move || train_head_on_embeddings(emb, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("probing head training panicked"))
            .collect()
    })
}

/// Probing confidence `p_T(x)` for untransformed images.
pub fn probing_confidence(head: &ProbingHead, backbone: &FrozenBackbone, batch: &ImageBatch) -> Result<Vec<f64>> {
    if head.embed_dim() != backbone.embed_dim() {
        return Err(Error::invalid(format!(
            "head expects {}-dim embeddings, backbone produces {}",
            head.embed_dim(),
            backbone.embed_dim()
        )));
    }
    let z = backbone.embed(batch)?;
    head.confidence_from_embeddings(&z)
}

/// Untrained head with `N(0,1)` weights and biases.
pub fn random_head(task: &ProbingTask, embed_dim: usize, seed: u64) -> ProbingHead {
    let k = task.len();
    let mut rng = Rng::new(seed);
    let weight = Matrix::from_vec(k, embed_dim, (0..k * embed_dim).map(|_| rng.normal()).collect()).unwrap();
    let bias = (0..k).map(|_| rng.normal()).collect();
    ProbingHead {
        task: task.clone(),
        layer: LinearLayer { weight, bias },
    }
}

/// Per-task probing confidences for one set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingConfidence {
    pub tasks: Vec<String>,
    /// `values[i][n]` is task `i`'s confidence on sample `n`.
    pub values: Vec<Vec<f64>>,
}

impl ProbingConfidence {
    pub fn new(tasks: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if tasks.len() != values.len() {
            return Err(Error::invalid("one confidence vector per task is required"));
        }
        if let Some(first) = values.first() {
            if values.iter().any(|v| v.len() != first.len()) {
                return Err(Error::invalid("confidence vectors differ in length"));
            }
        }
        Ok(ProbingConfidence { tasks, values })
    }

    /// Confidences of `heads` on the same embedding rows.
    pub fn from_heads(heads: &[&ProbingHead], z: &EmbeddingMatrix) -> Result<Self> {
        let values = heads
            .iter()
            .map(|h| h.confidence_from_embeddings(z))
            .collect::<Result<Vec<_>>>()?;
        ProbingConfidence::new(heads.iter().map(|h| h.task.name().to_string()).collect(), values)
    }

    pub fn num_tasks(&self) -> usize {
        self.values.len()
    }

    pub fn num_samples(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn task(&self, name: &str) -> Option<&[f64]> {
        self.tasks
            .iter()
            .position(|t| t == name)
            .map(|i| self.values[i].as_slice())
    }
}

/// Write a head as three sections `probe.<name>.{w,b,transforms}`.
pub fn store_head(c: &mut Container, head: &ProbingHead) {
    let name = head.task.name();
    let (w, b) = head.layer.to_tensors();
    c.push(format!("probe.{name}.w"), w);
    c.push(format!("probe.{name}.b"), b);
    let mut codes = Vec::with_capacity(head.task.len() * 3);
    for t in head.task.transforms() {
        match *t {
            Transform::Rotate { quarter_turns } => codes.extend([0, quarter_turns as i32, 0]),
            Transform::Translate { dx, dy } => codes.extend([1, dx, dy]),
        }
    }
    c.push(
        format!("probe.{name}.transforms"),
        Tensor::i32(&[head.task.len(), 3], codes).unwrap(),
    );
}

pub fn load_head(c: &Container, name: &str) -> Result<ProbingHead> {
    let get = |suffix: &str| {
        c.get(&format!("probe.{name}.{suffix}"))
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks probing head {name}")))
    };
    let layer = LinearLayer::from_tensors(get("w")?, get("b")?, name)?;
    let codes = get("transforms")?
        .as_i32()
        .ok_or_else(|| Error::invalid(format!("bad transform table for head {name}")))?;
    let transforms = codes
        .chunks_exact(3)
        .map(|c| match c[0] {
            0 if (0..4).contains(&c[1]) => Ok(Transform::Rotate {
                quarter_turns: c[1] as u8,
            }),
            1 => Ok(Transform::Translate { dx: c[1], dy: c[2] }),
            _ => Err(Error::invalid(format!("bad transform code in head {name}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let task = ProbingTask::new(name, transforms)?;
    if task.len() != layer.out_dim() {
        return Err(Error::invalid(format!(
            "head {name} output size disagrees with its task"
        )));
    }
    Ok(ProbingHead { task, layer })
}

/// Names of every probing head stored in a checkpoint, in storage order.
pub fn stored_head_names(c: &Container) -> Vec<String> {
    c.names()
        .filter_map(|n| n.strip_prefix("probe.")?.strip_suffix(".w").map(str::to_string))
        .collect()
}
