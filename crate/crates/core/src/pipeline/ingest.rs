//! File layout for externally extracted embeddings.
//!
//! ```text
//! train_emb__<task>__<transform>.sspb   f32 N x D, one file per transform
//! val_emb.sspb  val_logits.sspb  val_labels.sspb     f32 N x D, f32 N x K, i32 N
//! test_emb.sspb test_logits.sspb test_labels.sspb
//! ood_emb.sspb  ood_logits.sspb
//! manifest.txt                          optional; task.<name> = <transforms>
//! ```
//!
//! Transform tokens replace `:` with `_`, so translation `-8:0` is stored
//! as `train_emb__translation__-8_0.sspb`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::probing::TaskEmbeddings;
use crate::sspb::{read_tensor, write_tensor, Tensor};
use crate::tensor::{EmbeddingMatrix, LogitMatrix, Matrix};
use crate::transforms::{ProbingTask, Transform};

use super::eval::{EvalInputs, Labelled, Outputs};
use super::manifest::{sha256_file, Manifest};
use super::MANIFEST;

pub fn train_file_name(task: &ProbingTask, t: &Transform) -> String {
    format!("train_emb__{}__{}.sspb", task.name(), t.file_token())
}

fn matrix_tensor(m: &Matrix) -> Tensor {
    Tensor::f32(&[m.rows(), m.cols()], m.to_f32_vec()).expect("dims match data")
}

fn write(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    write_tensor(dir.join(name), t)
}

/// Write training embeddings and evaluation outputs in the ingest layout.
pub fn write_layout(dir: &Path, train: &[TaskEmbeddings], inputs: &EvalInputs, run_manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for emb in train {
        for (t, m) in emb.task.transforms().iter().zip(&emb.per_transform) {
            write(dir, &train_file_name(&emb.task, t), &matrix_tensor(m))?;
        }
    }
    for (split, l) in [("val", &inputs.val), ("test", &inputs.test)] {
        write(dir, &format!("{split}_emb.sspb"), &matrix_tensor(&l.out.z))?;
        write(dir, &format!("{split}_logits.sspb"), &matrix_tensor(&l.out.logits))?;
        let labels = l.labels.iter().map(|&v| v as i32).collect();
        write(
            dir,
            &format!("{split}_labels.sspb"),
            &Tensor::i32(&[l.labels.len()], labels)?,
        )?;
    }
    write(dir, "ood_emb.sspb", &matrix_tensor(&inputs.ood.z))?;
    write(dir, "ood_logits.sspb", &matrix_tensor(&inputs.ood.logits))?;

    let mut m = Manifest::default();
    m.set("embed_dim", inputs.val.out.z.cols());
    m.set("num_classes", inputs.val.out.logits.cols());
    for emb in train {
        m.set(format!("task.{}", emb.task.name()), emb.task.spec_string());
    }
    if let Some(h) = run_manifest.get("model.sha256.checkpoint") {
        m.set("source.checkpoint_sha256", h);
    }
    m.write(&dir.join(MANIFEST))
}

/// Inputs read back from an ingest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub train: Vec<TaskEmbeddings>,
    pub val: Labelled,
    pub test: Labelled,
    pub ood: Outputs,
    /// `(file stem, sha256)` of every file read.
    pub hashes: Vec<(String, String)>,
}

struct Reader<'a> {
    dir: &'a Path,
    hashes: Vec<(String, String)>,
}

impl Reader<'_> {
    /// A 2-D f32 tensor; `rows`/`cols` are checked when given, naming the
    /// file they were taken from.
    fn matrix(&mut self, name: &str, rows: Option<(usize, &str)>, cols: Option<(usize, &str)>) -> Result<Matrix> {
        let path = self.dir.join(name);
        let t = read_tensor(&path)?;
        self.hashes
            .push((name.trim_end_matches(".sspb").to_string(), sha256_file(&path)?));
        let dims = t.dims_usize();
        let data = t
            .as_f32()
            .filter(|_| dims.len() == 2)
            .ok_or_else(|| Error::invalid(format!("{name}: expected a 2-D f32 tensor, found dims {dims:?}")))?;
        if let Some((n, from)) = rows {
            if dims[0] != n {
                return Err(Error::invalid(format!(
                    "{name}: expected {n} rows to match {from}, found {}",
                    dims[0]
                )));
            }
        }
        if let Some((d, from)) = cols {
            if dims[1] != d {
                return Err(Error::invalid(format!(
                    "{name}: expected {d} columns to match {from}, found {}",
                    dims[1]
                )));
            }
        }
        Matrix::from_vec(dims[0], dims[1], data.iter().map(|&v| v as f64).collect())
    }

    fn labels(&mut self, name: &str, n: usize, from: &str) -> Result<Vec<usize>> {
        let path = self.dir.join(name);
        let t = read_tensor(&path)?;
        self.hashes
            .push((name.trim_end_matches(".sspb").to_string(), sha256_file(&path)?));
        let dims = t.dims_usize();
        let data = t
            .as_i32()
            .filter(|_| dims.len() == 1)
            .ok_or_else(|| Error::invalid(format!("{name}: expected a 1-D i32 tensor, found dims {dims:?}")))?;
        if dims[0] != n {
            return Err(Error::invalid(format!(
                "{name}: expected {n} labels to match {from}, found {}",
                dims[0]
            )));
        }
        data.iter()
            .map(|&l| usize::try_from(l).map_err(|_| Error::invalid(format!("{name}: negative label {l}"))))
            .collect()
    }

    fn outputs(&mut self, split: &str, dims: Option<(usize, usize)>) -> Result<Outputs> {
        let emb = format!("{split}_emb.sspb");
        let logits = format!("{split}_logits.sspb");
        let z = self.matrix(&emb, None, dims.map(|(d, _)| (d, "val_emb.sspb")))?;
        let l = self.matrix(
            &logits,
            Some((z.rows(), &emb)),
            dims.map(|(_, k)| (k, "val_logits.sspb")),
        )?;
        if l.cols() < 2 {
            return Err(Error::invalid(format!(
                "{logits}: need at least 2 classes, found {}",
                l.cols()
            )));
        }
        Outputs::from_parts(EmbeddingMatrix::new(z)?, LogitMatrix::new(l)?)
    }

    fn labelled(&mut self, split: &str, dims: Option<(usize, usize)>) -> Result<Labelled> {
        let out = self.outputs(split, dims)?;
        let labels = self.labels(&format!("{split}_labels.sspb"), out.len(), &format!("{split}_emb.sspb"))?;
        Labelled::new(out, labels)
    }
}

fn check_manifest(dir: &Path, tasks: &[ProbingTask]) -> Result<()> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(());
    }
    let m = Manifest::read(&path)?;
    for task in tasks {
        let key = format!("task.{}", task.name());
        match m.get(&key) {
            Some(spec) if spec == task.spec_string() => {}
            Some(spec) => {
                return Err(Error::ConfigGeneral(format!(
                    "{}: task {} was extracted with transforms {spec}, the config declares {}",
                    path.display(),
                    task.name(),
                    task.spec_string()
                )))
            }
            None => {
                return Err(Error::MissingInput {
                    path,
                    reason: format!("no entry for task {}", task.name()),
                })
            }
        }
    }
    Ok(())
}

/// Read and cross-check every file of the layout for `tasks`.
pub fn read_layout(dir: &Path, tasks: &[ProbingTask]) -> Result<Loaded> {
    check_manifest(dir, tasks)?;
    let mut r = Reader {
        dir,
        hashes: Vec::new(),
    };
    let val = r.labelled("val", None)?;
    let dims = Some((val.out.z.cols(), val.out.logits.cols()));
    let test = r.labelled("test", dims)?;
    let ood = r.outputs("ood", dims)?;
    let d = val.out.z.cols();
    let mut train = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut mats = Vec::with_capacity(task.len());
        let mut first: Option<(usize, String)> = None;
        for t in task.transforms() {
            let name = train_file_name(task, t);
            let rows = first.as_ref().map(|(n, f)| (*n, f.as_str()));
            let m = r.matrix(&name, rows, Some((d, "val_emb.sspb"))).map_err(|e| match e {
                Error::MissingInput { path, .. } => Error::MissingInput {
                    path,
                    reason: format!("training embeddings for task {}, transform {t}", task.name()),
                },
                other => other,
            })?;
            if first.is_none() {
                first = Some((m.rows(), name));
            }
            mats.push(EmbeddingMatrix::new(m)?);
        }
        train.push(TaskEmbeddings::new(task.clone(), mats)?);
    }
    Ok(Loaded {
        train,
        val,
        test,
        ood,
        hashes: r.hashes,
    })
}
