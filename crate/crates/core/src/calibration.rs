//! Post-hoc calibration fitted on validation data: scalar temperature
//! scaling, temperature as an affine function of probing confidence, and
//! top-label histogram binning.

use crate::error::{Error, Result};
use crate::probing::ProbingConfidence;
use crate::tensor::{log_sum_exp, softmax_in_place, LogitMatrix, Matrix, ProbMatrix};

/// Lower clamp on the per-sample temperature.
pub const TAU_MIN: f64 = 1e-2;

const LN_T_LO: f64 = -2.995_732_273_553_991; // ln 0.05
const LN_T_HI: f64 = 2.995_732_273_553_991; // ln 20
const GOLDEN_ITERS: usize = 200;
const DESCENT_ITERS: usize = 500;
const MIN_STEP: f64 = 1e-10;

/// `τ(x) = max(a0 + Σ_i a_i p_i(x), TAU_MIN)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureModel {
    pub a0: f64,
    pub tasks: Vec<String>,
    pub a: Vec<f64>,
}

impl TemperatureModel {
    /// Classical temperature scaling: a constant temperature.
    pub fn scalar(t: f64, tasks: &[String]) -> Self {
        TemperatureModel {
            a0: t,
            tasks: tasks.to_vec(),
            a: vec![0.0; tasks.len()],
        }
    }

    pub fn temperatures(&self, confs: &ProbingConfidence, n: usize) -> Result<Vec<f64>> {
        temperatures(self.a0, &self.a, confs, n)
    }
}

fn temperatures(a0: f64, a: &[f64], confs: &ProbingConfidence, n: usize) -> Result<Vec<f64>> {
    if a.len() != confs.num_tasks() {
        return Err(Error::invalid(format!(
            "{} temperature coefficients for {} probing tasks",
            a.len(),
            confs.num_tasks()
        )));
    }
    if confs.num_tasks() > 0 && confs.num_samples() != n {
        return Err(Error::invalid(format!(
            "{n} logit rows but {} probing confidences",
            confs.num_samples()
        )));
    }
    Ok((0..n)
        .map(|s| {
            let tau = a0 + a.iter().zip(&confs.values).map(|(ai, p)| ai * p[s]).sum::<f64>();
            tau.max(TAU_MIN)
        })
        .collect())
}

fn check_labels(logits: &LogitMatrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "need a non-empty validation set with one label per row ({} rows, {} labels)",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y >= logits.cols()) {
        return Err(Error::invalid("label outside the logit range"));
    }
    Ok(())
}

/// Mean NLL of `softmax(logits_n / τ_n)`.
pub fn nll_with_temperatures(logits: &LogitMatrix, labels: &[usize], taus: &[f64]) -> f64 {
    let mut scaled = vec![0.0; logits.cols()];
    let total: f64 = logits
        .iter_rows()
        .zip(labels)
        .zip(taus)
        .map(|((row, &y), &t)| {
            for (s, &l) in scaled.iter_mut().zip(row) {
                *s = l / t;
            }
            log_sum_exp(&scaled) - scaled[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Scalar temperature minimizing validation NLL, by golden-section search
/// on `ln T` over `[ln 0.05, ln 20]`.
pub fn fit_temperature(logits: &LogitMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let n = labels.len();
    let f = |u: f64| nll_with_temperatures(logits, labels, &vec![u.exp(); n]);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LN_T_LO, LN_T_HI);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let t = ((a + b) / 2.0).exp();
    if !t.is_finite() {
        return Err(Error::NonFinite("fitted temperature".into()));
    }
    Ok(t)
}

/// NLL of the affine-temperature model and its gradient in `(a0, a_1..a_M)`.
fn nll_and_gradient(
    logits: &LogitMatrix,
    labels: &[usize],
    confs: &ProbingConfidence,
    params: &[f64],
) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut p = vec![0.0; logits.cols()];
    for (s, (row, &y)) in logits.iter_rows().zip(labels).enumerate() {
        let raw = params[0]
            + params[1..]
                .iter()
                .zip(&confs.values)
                .map(|(ai, c)| ai * c[s])
                .sum::<f64>();
        let tau = raw.max(TAU_MIN);
        for (q, &l) in p.iter_mut().zip(row) {
            *q = l / tau;
        }
        loss += log_sum_exp(&p) - p[y];
        if raw <= TAU_MIN {
            continue;
        }
        softmax_in_place(&mut p);
        // d/dτ of -log softmax(l/τ)[y] = (l_y - E_p[l]) / τ²
        let expected: f64 = p.iter().zip(row).map(|(q, l)| q * l).sum();
        let dtau = (row[y] - expected) / (tau * tau);
        grad[0] += dtau;
        for (g, c) in grad[1..].iter_mut().zip(&confs.values) {
            *g += dtau * c[s];
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, grad)
}

/// Fit `τ(x) = a0 + Σ a_i p_i(x)` by minimizing validation NLL.
///
/// Starts from the scalar temperature-scaling solution with `a_i = 0` and
/// only accepts steps that lower the NLL, so the result is never worse on
/// the validation set than classical temperature scaling.
pub fn fit_input_dependent(
    logits: &LogitMatrix,
    confs: &ProbingConfidence,
    labels: &[usize],
) -> Result<TemperatureModel> {
    check_labels(logits, labels)?;
    if confs.num_tasks() > 0 && confs.num_samples() != labels.len() {
        return Err(Error::invalid("probing confidences are not aligned with the logits"));
    }
    let t = fit_temperature(logits, labels)?;
    let mut params = vec![0.0; confs.num_tasks() + 1];
    params[0] = t;
    let (mut loss, mut grad) = nll_and_gradient(logits, labels, confs, &params);
    let mut step = 1.0;
    'outer: for _ in 0..DESCENT_ITERS {
        if grad.iter().all(|&g| g == 0.0) {
            break;
        }
        loop {
            let cand: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
            let (cl, cg) = nll_and_gradient(logits, labels, confs, &cand);
            if cl < loss {
                params = cand;
                loss = cl;
                grad = cg;
                step *= 2.0;
                break;
            }
            step /= 2.0;
            if step < MIN_STEP {
                break 'outer;
            }
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("temperature coefficients".into()));
    }
    Ok(TemperatureModel {
        a0: params[0],
        tasks: confs.tasks.clone(),
        a: params[1..].to_vec(),
    })
}

/// `softmax(logits / τ(x))` per row.
pub fn apply_temperature(
    logits: &LogitMatrix,
    confs: &ProbingConfidence,
    model: &TemperatureModel,
) -> Result<ProbMatrix> {
    let taus = model.temperatures(confs, logits.rows())?;
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for (i, (row, &t)) in logits.iter_rows().zip(&taus).enumerate() {
        let dst = out.row_mut(i);
        for (d, &l) in dst.iter_mut().zip(row) {
            *d = l / t;
        }
        softmax_in_place(dst);
    }
    ProbMatrix::new(out)
}

/// Calibrated top-label confidence per equal-width bin on `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinningModel {
    pub values: Vec<f64>,
}

impl BinningModel {
    pub fn bins(&self) -> usize {
        self.values.len()
    }

    fn bin_of(&self, c: f64) -> usize {
        let m = self.values.len();
        ((c.clamp(0.0, 1.0) * m as f64) as usize).min(m - 1)
    }
}

/// Empirical validation accuracy per bin; empty bins keep their midpoint.
/// Bins are left-closed with 1.0 in the last bin.
pub fn fit_histogram_binning(confidence: &[f64], correct: &[bool], bins: usize) -> Result<BinningModel> {
    if bins == 0 {
        return Err(Error::invalid("histogram binning needs at least one bin"));
    }
    if confidence.len() != correct.len() {
        return Err(Error::invalid("confidence and correctness lengths differ"));
    }
    let mut model = BinningModel {
        values: vec![0.0; bins],
    };
    let mut counts = vec![(0usize, 0usize); bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        let b = model.bin_of(c);
        counts[b].0 += 1;
        counts[b].1 += ok as usize;
    }
    for (b, (v, (n, hits))) in model.values.iter_mut().zip(counts).enumerate() {
        *v = if n > 0 {
            hits as f64 / n as f64
        } else {
            (b as f64 + 0.5) / bins as f64
        };
    }
    Ok(model)
}

pub fn apply_binning(model: &BinningModel, confidence: &[f64]) -> Vec<f64> {
    confidence.iter().map(|&c| model.values[model.bin_of(c)]).collect()
}

/// Replace each row's top-label probability with `top[i]`, rescaling the
/// other entries proportionally (uniformly when they are all zero).
///
/// The argmax used for accuracy is the original one; only the probability
/// values change.
pub fn with_top_confidence(probs: &ProbMatrix, top: &[f64]) -> Result<ProbMatrix> {
    if top.len() != probs.rows() {
        return Err(Error::invalid("one calibrated confidence per row is required"));
    }
    let k = probs.cols();
    let mut out = Matrix::zeros(probs.rows(), k);
    for (i, (row, &c)) in probs.iter_rows().zip(top).enumerate() {
        let arg = crate::tensor::argmax(row);
        let rest = 1.0 - row[arg];
        let dst = out.row_mut(i);
        for (j, d) in dst.iter_mut().enumerate() {
            *d = if j == arg {
                c
            } else if rest > 0.0 {
                row[j] * (1.0 - c) / rest
            } else {
                (1.0 - c) / (k - 1) as f64
            };
        }
    }
    ProbMatrix::new(out)
}
