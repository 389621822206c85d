//! Evaluations shared by synthetic and ingest mode.
//!
//! Both modes reduce to the same inputs: probing heads, plus embeddings,
//! logits and labels for the validation and test splits and embeddings and
//! logits for the OOD set, all at `f32` precision.

use crate::calibration::{
    apply_binning, apply_temperature, fit_histogram_binning, fit_input_dependent, fit_temperature,
    nll_with_temperatures, with_top_confidence, TemperatureModel,
};
use crate::error::{Error, Result};
use crate::metrics::{auroc, binned_correlation, point_biserial, BinaryOutcome, BinnedCorrelation, MetricReport};
use crate::model::{accuracy, Backbone, ClassifierHead, TrainConfig};
use crate::probing::{random_head, train_heads, ProbingConfidence, ProbingHead, TaskEmbeddings};
use crate::rng::fnv1a;
use crate::scores::{entropy_score, fuse_ssp, msp_score, search_lambda, FusionConfig};
use crate::tensor::{softmax_rows, EmbeddingMatrix, ImageBatch, LogitMatrix, ProbMatrix};
use crate::transforms::ProbingTask;

/// Bins of the probing-confidence correlation analysis.
pub const CORRELATION_BINS: usize = 10;

/// Embeddings, logits and softmax probabilities of one sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub z: EmbeddingMatrix,
    pub logits: LogitMatrix,
    pub probs: ProbMatrix,
}

impl Outputs {
    pub fn from_parts(z: EmbeddingMatrix, logits: LogitMatrix) -> Result<Self> {
        if z.rows() != logits.rows() {
            return Err(Error::invalid(format!(
                "{} embedding rows but {} logit rows",
                z.rows(),
                logits.rows()
            )));
        }
        let probs = softmax_rows(&logits)?;
        Ok(Outputs { z, logits, probs })
    }

    /// Forward `images`, rounding embeddings and logits through `f32`.
    pub fn compute(backbone: &Backbone, classifier: &ClassifierHead, images: &ImageBatch) -> Result<Self> {
        let mut z = backbone.embed(images)?.into_inner();
        let mut logits = classifier.logits(&z)?.into_inner();
        z.round_to_f32();
        logits.round_to_f32();
        Self::from_parts(EmbeddingMatrix::new(z)?, LogitMatrix::new(logits)?)
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labelled {
    pub out: Outputs,
    pub labels: Vec<usize>,
    pub correct: Vec<bool>,
}

impl Labelled {
    pub fn new(out: Outputs, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != out.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                out.len()
            )));
        }
        let k = out.logits.cols();
        if let Some(l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {l} outside {k} classes")));
        }
        let correct = out
            .probs
            .predictions()
            .iter()
            .zip(&labels)
            .map(|(p, y)| p == y)
            .collect();
        Ok(Labelled { out, labels, correct })
    }

    pub fn accuracy(&self) -> f64 {
        accuracy(&self.out.probs, &self.labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInputs {
    pub heads: Vec<ProbingHead>,
    pub val: Labelled,
    pub test: Labelled,
    pub ood: Outputs,
}

impl EvalInputs {
    pub fn new(heads: Vec<ProbingHead>, val: Labelled, test: Labelled, ood: Outputs) -> Result<Self> {
        let d = val.out.z.cols();
        let k = val.out.logits.cols();
        for (name, o) in [("test", &test.out), ("ood", &ood)] {
            if o.z.cols() != d || o.logits.cols() != k {
                return Err(Error::invalid(format!(
                    "{name} outputs are {}-dim embeddings with {} logits, expected {d} and {k}",
                    o.z.cols(),
                    o.logits.cols()
                )));
            }
        }
        for h in &heads {
            if h.embed_dim() != d {
                return Err(Error::invalid(format!(
                    "head {} expects {}-dim embeddings, found {d}",
                    h.task.name(),
                    h.embed_dim()
                )));
            }
        }
        Ok(EvalInputs { heads, val, test, ood })
    }

    pub fn confidences(&self, z: &EmbeddingMatrix) -> Result<ProbingConfidence> {
        confidences(&self.heads, z)
    }
}

fn confidences(heads: &[ProbingHead], z: &EmbeddingMatrix) -> Result<ProbingConfidence> {
    let refs: Vec<&ProbingHead> = heads.iter().collect();
    ProbingConfidence::from_heads(&refs, z)
}

pub const MSP: &str = "MSP";
pub const MSP_SSP: &str = "MSP+SSP";
pub const ENTROPY: &str = "Entropy";
pub const ENTROPY_SSP: &str = "Entropy+SSP";

/// Fusion weights selected on validation AUPR-ERR for each base score.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionChoice {
    pub msp: FusionConfig,
    pub entropy: FusionConfig,
    /// `(base, fused)` validation AUPR-ERR for MSP and entropy.
    pub val_aupr_err: [(f64, f64); 2],
}

pub fn select_fusion(inputs: &EvalInputs, grid: &[f64]) -> Result<FusionChoice> {
    let val = &inputs.val;
    let confs = inputs.confidences(&val.out.z)?;
    let pick = |base: Vec<f64>| -> Result<(FusionConfig, (f64, f64))> {
        let base_aupr = crate::metrics::aupr_for(&base, &val.correct, crate::metrics::Positive::Errors)?;
        let (cfg, fused) = search_lambda(&base, &confs, &val.correct, grid)?;
        Ok((cfg, (base_aupr, fused)))
    };
    let (msp, a) = pick(msp_score(&val.out.probs))?;
    let (entropy, b) = pick(entropy_score(&val.out.probs))?;
    Ok(FusionChoice {
        msp,
        entropy,
        val_aupr_err: [a, b],
    })
}

/// The four scores of one sample set, in report order.
fn method_scores(out: &Outputs, confs: &ProbingConfidence, choice: &FusionChoice) -> Result<Vec<(String, Vec<f64>)>> {
    let msp = msp_score(&out.probs);
    let ent = entropy_score(&out.probs);
    Ok(vec![
        (MSP.into(), msp.clone()),
        (MSP_SSP.into(), fuse_ssp(&msp, confs, &choice.msp)?),
        (ENTROPY.into(), ent.clone()),
        (ENTROPY_SSP.into(), fuse_ssp(&ent, confs, &choice.entropy)?),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisclassResult {
    pub fusion: FusionChoice,
    pub rows: Vec<(String, MetricReport)>,
    pub test_accuracy: f64,
}

/// Misclassification detection on the test split.
pub fn evaluate_misclassification(inputs: &EvalInputs, grid: &[f64]) -> Result<MisclassResult> {
    let fusion = select_fusion(inputs, grid)?;
    let test = &inputs.test;
    let confs = inputs.confidences(&test.out.z)?;
    let rows = method_scores(&test.out, &confs, &fusion)?
        .into_iter()
        .map(|(m, s)| Ok((m, MetricReport::misclassification(&s, &test.correct)?)))
        .collect::<Result<_>>()?;
    Ok(MisclassResult {
        fusion,
        rows,
        test_accuracy: test.accuracy(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodResult {
    pub fusion: FusionChoice,
    pub rows: Vec<(String, MetricReport)>,
}

/// In-distribution test samples versus the OOD set, ID as the positive
/// class, using the fusion weights selected for misclassification.
pub fn evaluate_ood(inputs: &EvalInputs, grid: &[f64]) -> Result<OodResult> {
    let fusion = select_fusion(inputs, grid)?;
    let id = method_scores(&inputs.test.out, &inputs.confidences(&inputs.test.out.z)?, &fusion)?;
    let ood = method_scores(&inputs.ood, &inputs.confidences(&inputs.ood.z)?, &fusion)?;
    let mut rows = Vec::with_capacity(id.len());
    for ((m, s_id), (_, s_ood)) in id.into_iter().zip(ood) {
        let n_id = s_id.len();
        let mut scores = s_id;
        scores.extend(s_ood);
        let mut labels = vec![true; n_id];
        labels.resize(scores.len(), false);
        let o = BinaryOutcome::new(scores, labels)?;
        rows.push((
            m,
            MetricReport {
                auroc: Some(auroc(&o)?),
                ..Default::default()
            },
        ));
    }
    Ok(OodResult { fusion, rows })
}

pub const UNCALIBRATED: &str = "MSP (uncalibrated)";
pub const HIST_BINNING: &str = "Hist. Binning";
pub const TEMP_SCALING: &str = "Temp. Scaling";
pub const SCALING_SSP: &str = "Scaling+SSP";

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub temperature: f64,
    pub model: TemperatureModel,
    pub val_nll_temp: f64,
    pub val_nll_ssp: f64,
    pub rows: Vec<(String, MetricReport)>,
    /// Test accuracy of the predictions each row is scored on.
    pub accuracies: Vec<f64>,
}

/// Four calibration methods fitted on validation and scored on test.
pub fn evaluate_calibration(inputs: &EvalInputs, bins: usize) -> Result<CalibrationResult> {
    let (val, test) = (&inputs.val, &inputs.test);
    let val_confs = inputs.confidences(&val.out.z)?;
    let test_confs = inputs.confidences(&test.out.z)?;
    let preds = test.out.probs.predictions();
    let acc = |p: &[usize]| p.iter().zip(&test.labels).filter(|(a, b)| a == b).count() as f64 / p.len() as f64;

    let mut rows = Vec::new();
    let mut accuracies = Vec::new();
    rows.push((
        UNCALIBRATED.to_string(),
        MetricReport::calibration(&test.out.probs, &test.labels, bins)?,
    ));
    accuracies.push(acc(&preds));

    let binning = fit_histogram_binning(&val.out.probs.top_confidence(), &val.correct, bins)?;
    let top = apply_binning(&binning, &test.out.probs.top_confidence());
    let binned = with_top_confidence(&test.out.probs, &top)?;
    rows.push((
        HIST_BINNING.to_string(),
        MetricReport::calibration_with_top(&binned, &preds, &top, &test.labels, bins)?,
    ));
    accuracies.push(acc(&preds));

    let t = fit_temperature(&val.out.logits, &val.labels)?;
    let scalar = TemperatureModel::scalar(t, &val_confs.tasks);
    let ts = apply_temperature(&test.out.logits, &test_confs, &scalar)?;
    rows.push((
        TEMP_SCALING.to_string(),
        MetricReport::calibration(&ts, &test.labels, bins)?,
    ));
    accuracies.push(acc(&ts.predictions()));

    let model = fit_input_dependent(&val.out.logits, &val_confs, &val.labels)?;
    let ssp = apply_temperature(&test.out.logits, &test_confs, &model)?;
    rows.push((
        SCALING_SSP.to_string(),
        MetricReport::calibration(&ssp, &test.labels, bins)?,
    ));
    accuracies.push(acc(&ssp.predictions()));

    let n = val.labels.len();
    let val_nll_temp = nll_with_temperatures(&val.out.logits, &val.labels, &scalar.temperatures(&val_confs, n)?);
    let val_nll_ssp = nll_with_temperatures(&val.out.logits, &val.labels, &model.temperatures(&val_confs, n)?);
    Ok(CalibrationResult {
        temperature: t,
        model,
        val_nll_temp,
        val_nll_ssp,
        rows,
        accuracies,
    })
}

/// Relationship between one head's probing confidence and test correctness.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeAnalysis {
    pub name: String,
    pub random: bool,
    pub spearman: f64,
    pub point_biserial: f64,
    pub mean_confidence_correct: f64,
    pub mean_confidence_error: f64,
    pub curve: BinnedCorrelation,
}

/// Seed of the untrained comparison head for `task`.
pub fn random_head_seed(base: u64, task: &ProbingTask) -> u64 {
    base ^ fnv1a(format!("random|{}|{}", task.name(), task.spec_string()).as_bytes())
}

fn analyse(name: String, random: bool, conf: &[f64], correct: &[bool]) -> Result<ProbeAnalysis> {
    let curve = binned_correlation(conf, correct, CORRELATION_BINS)?;
    let mean = |want: bool| {
        let (s, n) = conf
            .iter()
            .zip(correct)
            .filter(|(_, &c)| c == want)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    };
    Ok(ProbeAnalysis {
        name,
        random,
        spearman: curve.spearman,
        point_biserial: point_biserial(conf, correct),
        mean_confidence_correct: mean(true),
        mean_confidence_error: mean(false),
        curve,
    })
}

/// Trained heads first, then one `N(0,1)` random head per task.
pub fn probing_analysis(inputs: &EvalInputs, random_seed: u64) -> Result<Vec<ProbeAnalysis>> {
    let test = &inputs.test;
    let d = test.out.z.cols();
    let mut out = Vec::new();
    for h in &inputs.heads {
        let conf = h.confidence_from_embeddings(&test.out.z)?;
        out.push(analyse(h.task.name().to_string(), false, &conf, &test.correct)?);
    }
    for h in &inputs.heads {
        let r = random_head(&h.task, d, random_head_seed(random_seed, &h.task));
        let conf = r.confidence_from_embeddings(&test.out.z)?;
        out.push(analyse(
            format!("random {}", h.task.name()),
            true,
            &conf,
            &test.correct,
        )?);
    }
    Ok(out)
}

/// One ablation configuration: a set of probing tasks trained from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub transforms: usize,
    pub auroc: f64,
    pub fusion: FusionConfig,
}

fn task_label(task: &ProbingTask) -> String {
    format!("{} [{}]", task.name(), task.spec_string())
}

/// Misclassification AUROC of MSP+SSP for task combinations and for
/// per-task transform subsets. `train` holds the full training embeddings
/// of every configured task; subsets are cut from them.
pub fn ablation(
    inputs: &EvalInputs,
    train: &[TaskEmbeddings],
    subsets: &[ProbingTask],
    probe: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<AblationRow>> {
    let mut configs: Vec<(String, Vec<TaskEmbeddings>)> = Vec::new();
    if train.len() > 1 {
        for t in train {
            configs.push((t.task.name().to_string(), vec![t.clone()]));
        }
        let all = train.iter().map(|t| t.task.name()).collect::<Vec<_>>().join("+");
        configs.push((all, train.to_vec()));
    }
    for sub in subsets {
        let full = train
            .iter()
            .find(|t| t.task.name() == sub.name())
            .ok_or_else(|| Error::invalid(format!("no training embeddings for task {}", sub.name())))?;
        configs.push((task_label(sub), vec![full.restrict(sub)?]));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for (label, embs) in configs {
        let heads: Vec<ProbingHead> = train_heads(&embs, probe)?.into_iter().map(|t| t.head).collect();
        let sub_inputs = EvalInputs {
            heads,
            val: inputs.val.clone(),
            test: inputs.test.clone(),
            ood: inputs.ood.clone(),
        };
        let r = evaluate_misclassification(&sub_inputs, grid)?;
        let auroc = r
            .rows
            .iter()
            .find(|(m, _)| m == MSP_SSP)
            .and_then(|(_, rep)| rep.auroc)
            .expect("misclassification rows include MSP+SSP");
        rows.push(AblationRow {
            label,
            transforms: embs.iter().map(|e| e.task.len()).sum(),
            auroc,
            fusion: r.fusion.msp,
        });
    }
    Ok(rows)
}
