//! Pipeline stages sharing one run directory.
//!
//! ```text
//! <run.dir>/
//!   manifest.txt            sorted key = value lines, merged across stages
//!   run.log                 timestamps, one line per completed stage
//!   data/<split>_images.sspb, data/<split>_labels.sspb
//!   checkpoint.sspc         backbone, classifier and probing heads
//!   reports/*.csv, *.md     one table per evaluation
//!   export/                 embeddings in the ingest layout
//! ```
//!
//! Every stage reads its inputs completely before writing anything.

pub mod config;
pub mod eval;
pub mod ingest;
pub mod manifest;
pub mod report;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub use config::{Mode, RunConfig};
pub use eval::{
    AblationRow, CalibrationResult, EvalInputs, Labelled, MisclassResult, OodResult, Outputs, ProbeAnalysis,
};
pub use manifest::Manifest;
pub use report::Table;

use crate::data::{carve_validation, generate_id_dataset, generate_ood_dataset, Dataset, Split, CANVAS, NUM_DIGITS};
use crate::error::{Error, Result};
use crate::model::{init_model, load_model, store_model, train_classifier, ClassifierHead, FrozenBackbone};
use crate::probing::{embed_task, load_head, store_head, train_heads, ProbingHead, TaskEmbeddings};
use crate::sspb::{read_tensor, write_tensor, Container, Tensor};
use crate::tensor::{ImageBatch, LabelVector};
use manifest::sha256_file;
use report::{slug, write_table, write_text};

pub const MANIFEST: &str = "manifest.txt";
pub const RUN_LOG: &str = "run.log";
pub const CHECKPOINT: &str = "checkpoint.sspc";
pub const DATA_DIR: &str = "data";
pub const REPORT_DIR: &str = "reports";
pub const EXPORT_DIR: &str = "export";

pub fn data_file(run_dir: &Path, split: Split, kind: &str) -> PathBuf {
    run_dir.join(DATA_DIR).join(format!("{}_{kind}.sspb", split.name()))
}

fn require_mode(cfg: &RunConfig, mode: Mode, stage: &str) -> Result<()> {
    if cfg.mode != mode {
        let want = if mode == Mode::Synthetic { "synthetic" } else { "ingest" };
        return Err(Error::ConfigGeneral(format!("`{stage}` requires mode = {want}")));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Load the manifest and refresh its configuration section.
fn open_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let mut m = Manifest::read_or_default(&cfg.run_dir.join(MANIFEST))?;
    m.clear_prefix("config.");
    for (k, v) in cfg.resolved() {
        m.set(format!("config.{k}"), v);
    }
    Ok(m)
}

fn finish(cfg: &RunConfig, manifest: &Manifest, stage: &str) -> Result<()> {
    create_dir(&cfg.run_dir)?;
    manifest.write(&cfg.run_dir.join(MANIFEST))?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let path = cfg.run_dir.join(RUN_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(log, "{secs} {stage} done").map_err(|e| Error::io(&path, e))
}

fn write_dataset(run_dir: &Path, ds: &Dataset, manifest: &mut Manifest) -> Result<Vec<PathBuf>> {
    let [n, c, h, w] = ds.images.dims();
    let images = Tensor::f32(&[n, c, h, w], ds.images.as_slice().to_vec())?;
    let labels = Tensor::i32(&[n], ds.labels.as_slice().iter().map(|&l| l as i32).collect())?;
    let mut paths = Vec::new();
    for (kind, t) in [("images", images), ("labels", labels)] {
        let p = data_file(run_dir, ds.split, kind);
        write_tensor(&p, &t)?;
        manifest.set(format!("data.sha256.{}_{kind}", ds.split.name()), sha256_file(&p)?);
        paths.push(p);
    }
    manifest.set(format!("data.n.{}", ds.split.name()), n);
    Ok(paths)
}

fn shape_error(path: &Path, expected: String, found: &[usize]) -> Error {
    Error::invalid(format!("{}: expected {expected}, found dims {found:?}", path.display()))
}

pub fn load_dataset(run_dir: &Path, split: Split) -> Result<Dataset> {
    let ip = data_file(run_dir, split, "images");
    let lp = data_file(run_dir, split, "labels");
    let images = read_tensor(&ip)?;
    let labels = read_tensor(&lp)?;
    let dims = images.dims_usize();
    let data = images
        .as_f32()
        .filter(|_| dims.len() == 4 && dims[2] == CANVAS && dims[3] == CANVAS)
        .ok_or_else(|| shape_error(&ip, format!("f32 images N x C x {CANVAS} x {CANVAS}"), &dims))?;
    let n = dims[0];
    let ldims = labels.dims_usize();
    let raw = labels
        .as_i32()
        .filter(|_| ldims == [n])
        .ok_or_else(|| shape_error(&lp, format!("{n} i32 labels"), &ldims))?;
    let labels = raw
        .iter()
        .map(|&l| usize::try_from(l).map_err(|_| Error::invalid(format!("{}: negative label {l}", lp.display()))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images: ImageBatch::new(n, dims[1], dims[2], dims[3], data.to_vec())?,
        labels: LabelVector::new(labels, NUM_DIGITS)?,
        split,
    })
}

/// Generate the train, validation and test splits into `<run.dir>/data`.
pub fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    require_mode(cfg, Mode::Synthetic, "gen-data")?;
    let pool = generate_id_dataset(&cfg.data.gen_config(cfg.data.n_train_per_class), Split::Train)?;
    let (train, val) = carve_validation(&pool, cfg.data.val_fraction)?;
    let test = generate_id_dataset(&cfg.data.gen_config(cfg.data.n_test_per_class), Split::Test)?;
    let mut m = open_manifest(cfg)?;
    create_dir(&cfg.run_dir.join(DATA_DIR))?;
    let mut files = Vec::new();
    for ds in [&train, &val, &test] {
        files.extend(write_dataset(&cfg.run_dir, ds, &mut m)?);
    }
    finish(cfg, &m, "gen-data")?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub loss_trace: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// `(task, probing-label training accuracy)` per head.
    pub heads: Vec<(String, f64)>,
    pub checkpoint_sha256: String,
}

/// Train the classifier, freeze it, train one probing head per task and
/// write the checkpoint.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    require_mode(cfg, Mode::Synthetic, "train")?;
    let train = load_dataset(&cfg.run_dir, Split::Train)?;
    let val = load_dataset(&cfg.run_dir, Split::Val)?;
    let [_, c, h, w] = train.images.dims();
    let (mut backbone, mut head) = init_model((c, h, w), cfg.hidden, NUM_DIGITS, cfg.train.seed)?;
    let loss_trace = train_classifier(&mut backbone, &mut head, &train, &cfg.train)?;
    backbone.hidden.round_to_f32();
    head.round_to_f32();
    let backbone = backbone.freeze();

    let tr = Labelled::new(
        Outputs::compute(&backbone, &head, &train.images)?,
        train.labels.as_slice().to_vec(),
    )?;
    let va = Labelled::new(
        Outputs::compute(&backbone, &head, &val.images)?,
        val.labels.as_slice().to_vec(),
    )?;
    let embs = train_task_embeddings(cfg, &backbone, &train)?;
    let trained = train_heads(&embs, &cfg.probe)?;

    let mut ckpt = Container::new();
    store_model(&mut ckpt, &backbone, &head);
    for t in &trained {
        store_head(&mut ckpt, &t.head);
    }
    let path = cfg.run_dir.join(CHECKPOINT);
    let mut m = open_manifest(cfg)?;
    m.clear_prefix("probe.");
    create_dir(&cfg.run_dir)?;
    ckpt.write(&path)?;
    let checkpoint_sha256 = sha256_file(&path)?;
    m.set("model.sha256.checkpoint", &checkpoint_sha256);
    m.set("model.backbone_fingerprint", backbone.fingerprint());
    m.set("train.final_loss", loss_trace.last().copied().unwrap_or(f64::NAN));
    m.set("train.accuracy.train", tr.accuracy());
    m.set("train.accuracy.val", va.accuracy());
    let mut heads = Vec::new();
    for t in &trained {
        let name = t.head.task.name();
        m.set(format!("probe.{name}.transforms"), t.head.task.spec_string());
        m.set(format!("probe.{name}.train_accuracy"), t.train_accuracy);
        heads.push((name.to_string(), t.train_accuracy));
    }
    finish(cfg, &m, "train")?;
    Ok(TrainSummary {
        loss_trace,
        train_accuracy: tr.accuracy(),
        val_accuracy: va.accuracy(),
        heads,
        checkpoint_sha256,
    })
}

fn train_task_embeddings(cfg: &RunConfig, backbone: &FrozenBackbone, train: &Dataset) -> Result<Vec<TaskEmbeddings>> {
    cfg.tasks
        .iter()
        .map(|t| embed_task(backbone, &train.images, t))
        .collect()
}

/// Backbone, classifier and the heads of every configured task.
pub fn load_artifacts(cfg: &RunConfig) -> Result<(FrozenBackbone, ClassifierHead, Vec<ProbingHead>)> {
    let path = cfg.run_dir.join(CHECKPOINT);
    let ckpt = Container::read(&path)?;
    let (backbone, classifier) = load_model(&ckpt)?;
    let mut heads = Vec::new();
    for task in &cfg.tasks {
        let head = load_head(&ckpt, task.name()).map_err(|_| Error::MissingInput {
            path: path.clone(),
            reason: format!("no probing head for task {}", task.name()),
        })?;
        if head.task != *task {
            return Err(Error::invalid(format!(
                "checkpoint head {} was trained on transforms {}, the config declares {}",
                task.name(),
                head.task.spec_string(),
                task.spec_string()
            )));
        }
        heads.push(head);
    }
    Ok((backbone.freeze(), classifier, heads))
}

fn synthetic_inputs(cfg: &RunConfig) -> Result<(EvalInputs, FrozenBackbone)> {
    let (backbone, classifier, heads) = load_artifacts(cfg)?;
    let val = load_dataset(&cfg.run_dir, Split::Val)?;
    let test = load_dataset(&cfg.run_dir, Split::Test)?;
    let ood = generate_ood_dataset(&cfg.data.gen_config(cfg.data.n_ood_per_class), Split::Test)?;
    let labelled = |ds: &Dataset| -> Result<Labelled> {
        Labelled::new(
            Outputs::compute(&backbone, &classifier, &ds.images)?,
            ds.labels.as_slice().to_vec(),
        )
    };
    let inputs = EvalInputs::new(
        heads,
        labelled(&val)?,
        labelled(&test)?,
        Outputs::compute(&backbone, &classifier, &ood.images)?,
    )?;
    Ok((inputs, backbone))
}

fn reports_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join(REPORT_DIR)
}

fn record_rows(m: &mut Manifest, report: &str, table: &Table) {
    m.clear_prefix(&format!("metric.{report}."));
    for (method, vals) in &table.rows {
        for (col, v) in table.columns.iter().zip(vals) {
            if let Some(v) = v {
                m.set(format!("metric.{report}.{}.{}", slug(method), slug(col)), v);
            }
        }
    }
}

fn record_fusion(m: &mut Manifest, prefix: &str, f: &eval::FusionChoice) {
    m.clear_prefix(prefix);
    for (base, cfg, (b, fused)) in [
        ("msp", &f.msp, f.val_aupr_err[0]),
        ("entropy", &f.entropy, f.val_aupr_err[1]),
    ] {
        for (t, l) in cfg.tasks.iter().zip(&cfg.lambdas) {
            m.set(format!("{prefix}{base}.{t}"), l);
        }
        m.set(format!("{prefix}{base}.val_aupr_err.base"), b);
        m.set(format!("{prefix}{base}.val_aupr_err.fused"), fused);
    }
}

/// Misclassification report plus the probing-confidence analysis.
fn report_misclass(
    cfg: &RunConfig,
    inputs: &EvalInputs,
    m: &mut Manifest,
) -> Result<(MisclassResult, Vec<ProbeAnalysis>)> {
    let r = eval::evaluate_misclassification(inputs, &cfg.fusion_grid)?;
    let probes = eval::probing_analysis(inputs, cfg.probe.seed)?;
    let dir = reports_dir(cfg);
    let table = Table::misclassification(&r.rows);
    write_table(&dir, "misclassification", "Misclassification detection (test)", &table)?;
    record_rows(m, "misclassification", &table);
    record_fusion(m, "lambda.", &r.fusion);
    m.set("eval.test_accuracy", r.test_accuracy);

    let mut pt = Table::new(&["Spearman", "Point-biserial", "Mean conf (correct)", "Mean conf (error)"]);
    for p in &probes {
        pt.push(
            p.name.clone(),
            vec![
                Some(p.spearman),
                Some(p.point_biserial),
                Some(p.mean_confidence_correct).filter(|v| v.is_finite()),
                Some(p.mean_confidence_error).filter(|v| v.is_finite()),
            ],
        );
        write_text(
            &dir.join(format!("correlation_{}.csv", slug(&p.name))),
            &report::correlation_csv(&p.curve),
        )?;
    }
    write_table(&dir, "probing", "Probing confidence versus correctness (test)", &pt)?;
    record_rows(m, "probing", &pt);
    Ok((r, probes))
}

fn report_ood(cfg: &RunConfig, inputs: &EvalInputs, m: &mut Manifest) -> Result<OodResult> {
    let r = eval::evaluate_ood(inputs, &cfg.fusion_grid)?;
    let mut t = Table::new(&["AUROC"]);
    for (method, rep) in &r.rows {
        t.push(method.clone(), vec![rep.auroc]);
    }
    write_table(
        &reports_dir(cfg),
        "ood",
        "Out-of-distribution detection (ID test vs OOD)",
        &t,
    )?;
    record_rows(m, "ood", &t);
    Ok(r)
}

fn report_calibration(cfg: &RunConfig, inputs: &EvalInputs, m: &mut Manifest) -> Result<CalibrationResult> {
    let r = eval::evaluate_calibration(inputs, cfg.calib_bins)?;
    let t = Table::calibration(&r.rows);
    write_table(&reports_dir(cfg), "calibration", "Calibration (test)", &t)?;
    record_rows(m, "calibration", &t);
    m.clear_prefix("temp.");
    m.set("temp.scalar", r.temperature);
    m.set("temp.a0", r.model.a0);
    for (task, a) in r.model.tasks.iter().zip(&r.model.a) {
        m.set(format!("temp.a.{task}"), a);
    }
    m.set("temp.val_nll.scalar", r.val_nll_temp);
    m.set("temp.val_nll.input_dependent", r.val_nll_ssp);
    Ok(r)
}

fn ablation_subsets(cfg: &RunConfig) -> Vec<crate::transforms::ProbingTask> {
    cfg.ablate_rotation
        .iter()
        .chain(&cfg.ablate_translation)
        .cloned()
        .collect()
}

fn report_ablation(
    cfg: &RunConfig,
    inputs: &EvalInputs,
    train: &[TaskEmbeddings],
    m: &mut Manifest,
) -> Result<Vec<AblationRow>> {
    let rows = eval::ablation(inputs, train, &ablation_subsets(cfg), &cfg.probe, &cfg.fusion_grid)?;
    let mut t = Table::new(&["Transforms", "AUROC"]);
    for r in &rows {
        t.push(r.label.clone(), vec![Some(r.transforms as f64), Some(r.auroc)]);
    }
    write_table(
        &reports_dir(cfg),
        "ablation",
        "Probing-task ablation (MSP+SSP, test AUROC)",
        &t,
    )?;
    record_rows(m, "ablation", &t);
    Ok(rows)
}

pub fn eval_misclass(cfg: &RunConfig) -> Result<(MisclassResult, Vec<ProbeAnalysis>)> {
    require_mode(cfg, Mode::Synthetic, "eval-misclass")?;
    let (inputs, _) = synthetic_inputs(cfg)?;
    let mut m = open_manifest(cfg)?;
    let r = report_misclass(cfg, &inputs, &mut m)?;
    finish(cfg, &m, "eval-misclass")?;
    Ok(r)
}

pub fn eval_ood(cfg: &RunConfig) -> Result<OodResult> {
    require_mode(cfg, Mode::Synthetic, "eval-ood")?;
    let (inputs, _) = synthetic_inputs(cfg)?;
    let mut m = open_manifest(cfg)?;
    let r = report_ood(cfg, &inputs, &mut m)?;
    finish(cfg, &m, "eval-ood")?;
    Ok(r)
}

pub fn calibrate(cfg: &RunConfig) -> Result<CalibrationResult> {
    require_mode(cfg, Mode::Synthetic, "calibrate")?;
    let (inputs, _) = synthetic_inputs(cfg)?;
    let mut m = open_manifest(cfg)?;
    let r = report_calibration(cfg, &inputs, &mut m)?;
    finish(cfg, &m, "calibrate")?;
    Ok(r)
}

pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    require_mode(cfg, Mode::Synthetic, "ablate")?;
    let (inputs, backbone) = synthetic_inputs(cfg)?;
    let train = load_dataset(&cfg.run_dir, Split::Train)?;
    let embs = train_task_embeddings(cfg, &backbone, &train)?;
    let mut m = open_manifest(cfg)?;
    let r = report_ablation(cfg, &inputs, &embs, &mut m)?;
    finish(cfg, &m, "ablate")?;
    Ok(r)
}

/// Write the trained run's embeddings and logits in the ingest layout
/// under `<run.dir>/export`.
pub fn export(cfg: &RunConfig) -> Result<PathBuf> {
    require_mode(cfg, Mode::Synthetic, "export")?;
    let (inputs, backbone) = synthetic_inputs(cfg)?;
    let train = load_dataset(&cfg.run_dir, Split::Train)?;
    let embs = train_task_embeddings(cfg, &backbone, &train)?;
    let dir = cfg.run_dir.join(EXPORT_DIR);
    let mut m = open_manifest(cfg)?;
    ingest::write_layout(&dir, &embs, &inputs, &m)?;
    m.set("export.sha256.manifest", sha256_file(&dir.join(MANIFEST))?);
    finish(cfg, &m, "export")?;
    Ok(dir)
}

/// Everything produced by a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub train: Option<TrainSummary>,
    pub misclass: MisclassResult,
    pub probes: Vec<ProbeAnalysis>,
    pub ood: OodResult,
    pub calibration: CalibrationResult,
    pub ablation: Vec<AblationRow>,
}

/// Evaluate externally extracted embeddings. Heads are trained from the
/// ingested training embeddings; the evaluations are those of synthetic mode.
pub fn ingest(cfg: &RunConfig) -> Result<RunSummary> {
    require_mode(cfg, Mode::Ingest, "ingest")?;
    let dir = cfg.ingest_dir.as_deref().expect("validated config");
    let loaded = ingest::read_layout(dir, &cfg.tasks)?;
    let heads = train_heads(&loaded.train, &cfg.probe)?
        .into_iter()
        .map(|t| t.head)
        .collect();
    let inputs = EvalInputs::new(heads, loaded.val, loaded.test, loaded.ood)?;
    let mut m = open_manifest(cfg)?;
    for (name, hash) in &loaded.hashes {
        m.set(format!("ingest.sha256.{name}"), hash);
    }
    let (misclass, probes) = report_misclass(cfg, &inputs, &mut m)?;
    let ood = report_ood(cfg, &inputs, &mut m)?;
    let calibration = report_calibration(cfg, &inputs, &mut m)?;
    let ablation = report_ablation(cfg, &inputs, &loaded.train, &mut m)?;
    finish(cfg, &m, "ingest")?;
    Ok(RunSummary {
        train: None,
        misclass,
        probes,
        ood,
        calibration,
        ablation,
    })
}

/// All synthetic stages in order: gen-data, train, the three evaluations
/// and the ablation.
pub fn run_all(cfg: &RunConfig) -> Result<RunSummary> {
    if cfg.mode == Mode::Ingest {
        return ingest(cfg);
    }
    gen_data(cfg)?;
    let train = train(cfg)?;
    let (misclass, probes) = eval_misclass(cfg)?;
    let ood = eval_ood(cfg)?;
    let calibration = calibrate(cfg)?;
    let ablation = ablate(cfg)?;
    Ok(RunSummary {
        train: Some(train),
        misclass,
        probes,
        ood,
        calibration,
        ablation,
    })
}
