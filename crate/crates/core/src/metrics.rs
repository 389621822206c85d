//! Threshold-sweep ranking metrics, calibration errors and proper scoring
//! rules.
//!
//! Thresholds are swept only at observed score values, descending. Equal
//! scores form one threshold step, so each sweep is exact with respect to
//! the tie-aware pairwise definition.

use crate::error::{Error, Result};
use crate::tensor::ProbMatrix;

/// Scores paired with positive-class flags; a higher score means more
/// affinity to the positive class.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryOutcome {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Which side of a correctness split is treated as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    /// Misclassifications are positive; low confidence signals them.
    Errors,
    /// Correct predictions are positive; high confidence signals them.
    Successes,
}

impl BinaryOutcome {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("metric scores".into()));
        }
        Ok(BinaryOutcome { scores, labels })
    }

    /// Orient confidence scores toward the requested positive class.
    pub fn from_confidence(confidence: &[f64], correct: &[bool], positive: Positive) -> Result<Self> {
        match positive {
            Positive::Successes => BinaryOutcome::new(confidence.to_vec(), correct.to_vec()),
            Positive::Errors => BinaryOutcome::new(
                confidence.iter().map(|s| -s).collect(),
                correct.iter().map(|c| !c).collect(),
            ),
        }
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    fn require_both(&self, what: &str) -> Result<()> {
        if self.positives() == 0 || self.negatives() == 0 {
            return Err(Error::UndefinedMetric(format!(
                "{what} needs at least one positive and one negative"
            )));
        }
        Ok(())
    }

    /// Cumulative `(tp, fp)` after each distinct threshold, descending.
    fn sweep(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        let mut i = 0;
        while i < idx.len() {
            let s = self.scores[idx[i]];
            while i < idx.len() && self.scores[idx[i]] == s {
                if self.labels[idx[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            out.push((tp, fp));
        }
        out
    }
}

/// ROC points `(FPR, TPR)`, starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve(o: &BinaryOutcome) -> Result<Vec<(f64, f64)>> {
    o.require_both("ROC")?;
    let (p, n) = (o.positives() as f64, o.negatives() as f64);
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(o.sweep().into_iter().map(|(tp, fp)| (fp as f64 / n, tp as f64 / p)));
    Ok(pts)
}

/// Area under the ROC curve by trapezoidal integration.
pub fn auroc(o: &BinaryOutcome) -> Result<f64> {
    let pts = roc_curve(o)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum())
}

/// Average precision: `Σ (R_k - R_{k-1}) P_k` over distinct thresholds.
pub fn aupr(o: &BinaryOutcome) -> Result<f64> {
    let p = o.positives();
    if p == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one positive".into()));
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in o.sweep() {
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// AUPR of a confidence score with the chosen positive class.
pub fn aupr_for(confidence: &[f64], correct: &[bool], positive: Positive) -> Result<f64> {
    aupr(&BinaryOutcome::from_confidence(confidence, correct, positive)?)
}

/// FPR at the first threshold (descending) whose TPR reaches 95%.
pub fn fpr_at_95_tpr(o: &BinaryOutcome) -> Result<f64> {
    o.require_both("FPR@95%TPR")?;
    let (p, n) = (o.positives(), o.negatives());
    for (tp, fp) in o.sweep() {
        // TPR >= 0.95 in integer arithmetic.
        if tp * 100 >= 95 * p {
            return Ok(fp as f64 / n as f64);
        }
    }
    unreachable!("the final threshold accepts every positive")
}

/// Per-bin statistics shared by ECE and MCE.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Equal-width right-closed bins on `(0, 1]`; confidence 0 falls in the first bin.
pub fn calibration_bins(confidence: &[f64], correct: &[bool], m: usize) -> Result<Vec<CalibrationBin>> {
    if confidence.len() != correct.len() {
        return Err(Error::invalid("confidence and correctness lengths differ"));
    }
    if m == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {c} outside [0,1]")));
    }
    let mut sums = vec![(0usize, 0.0f64, 0usize); m];
    for (&c, &ok) in confidence.iter().zip(correct) {
        let b = ((c * m as f64).ceil() as usize).saturating_sub(1).min(m - 1);
        sums[b].0 += 1;
        sums[b].1 += c;
        sums[b].2 += ok as usize;
    }
    Ok(sums
        .into_iter()
        .map(|(count, conf, hits)| CalibrationBin {
            count,
            mean_confidence: if count > 0 { conf / count as f64 } else { 0.0 },
            accuracy: if count > 0 { hits as f64 / count as f64 } else { 0.0 },
        })
        .collect())
}

/// Expected calibration error over `m` bins.
pub fn ece(confidence: &[f64], correct: &[bool], m: usize) -> Result<f64> {
    let n = confidence.len();
    if n == 0 {
        return Ok(0.0);
    }
    let bins = calibration_bins(confidence, correct, m)?;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// Maximum calibration error over non-empty bins.
pub fn mce(confidence: &[f64], correct: &[bool], m: usize) -> Result<f64> {
    let bins = calibration_bins(confidence, correct, m)?;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.accuracy - b.mean_confidence).abs())
        .fold(0.0, f64::max))
}

const NLL_FLOOR: f64 = 1e-12;

fn check_labels(probs: &ProbMatrix, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::invalid(format!("label {l} outside {} classes", probs.cols())));
    }
    Ok(())
}

/// Mean `-ln p_true`, with `p_true` floored at 1e-12.
pub fn nll(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = probs
        .iter_rows()
        .zip(labels)
        .map(|(r, &y)| -r[y].max(NLL_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean over samples of the squared distance to the one-hot label row.
pub fn brier(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = probs
        .iter_rows()
        .zip(labels)
        .map(|(r, &y)| {
            r.iter()
                .enumerate()
                .map(|(k, &p)| {
                    let o = if k == y { 1.0 } else { 0.0 };
                    (p - o) * (p - o)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Average ranks (1-based), ties share the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Pearson correlation between a continuous value and a binary outcome.
pub fn point_biserial(values: &[f64], flags: &[bool]) -> f64 {
    let f: Vec<f64> = flags.iter().map(|&b| b as u8 as f64).collect();
    pearson(values, &f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCorrelation {
    pub bins: Vec<CorrelationBin>,
    /// Spearman correlation of (bin index, accuracy) over non-empty bins.
    pub spearman: f64,
}

/// Accuracy per equal-width confidence bin on `[0,1]` and its rank
/// correlation with the bin index. Bins are left-closed; 1.0 lands in the
/// last bin.
pub fn binned_correlation(confidence: &[f64], correct: &[bool], bins: usize) -> Result<BinnedCorrelation> {
    if confidence.len() != correct.len() {
        return Err(Error::invalid("confidence and correctness lengths differ"));
    }
    if bins == 0 || confidence.len() < bins {
        return Err(Error::invalid(format!(
            "need at least {bins} samples for {bins} bins, got {}",
            confidence.len()
        )));
    }
    let mut acc = vec![(0usize, 0.0f64, 0usize); bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("confidence {c} outside [0,1]")));
        }
        let b = ((c * bins as f64) as usize).min(bins - 1);
        acc[b].0 += 1;
        acc[b].1 += c;
        acc[b].2 += ok as usize;
    }
    let width = 1.0 / bins as f64;
    let out: Vec<CorrelationBin> = acc
        .into_iter()
        .enumerate()
        .map(|(i, (count, sum, hits))| CorrelationBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count,
            mean_confidence: if count > 0 { sum / count as f64 } else { f64::NAN },
            accuracy: if count > 0 {
                hits as f64 / count as f64
            } else {
                f64::NAN
            },
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = out
        .iter()
        .enumerate()
        .filter(|(_, b)| b.count > 0)
        .map(|(i, b)| (i as f64, b.accuracy))
        .unzip();
    Ok(BinnedCorrelation {
        spearman: spearman(&xs, &ys),
        bins: out,
    })
}

/// Scalar metrics for one method; absent entries were not computed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub fpr_at_95tpr: Option<f64>,
    pub aupr_err: Option<f64>,
    pub aupr_succ: Option<f64>,
    pub auroc: Option<f64>,
    pub ece: Option<f64>,
    pub mce: Option<f64>,
    pub nll: Option<f64>,
    pub brier: Option<f64>,
}

impl MetricReport {
    /// The four misclassification-detection metrics of a confidence score.
    ///
    /// FPR@95%TPR and AUROC treat correct predictions as positive.
    pub fn misclassification(confidence: &[f64], correct: &[bool]) -> Result<Self> {
        let succ = BinaryOutcome::from_confidence(confidence, correct, Positive::Successes)?;
        Ok(MetricReport {
            fpr_at_95tpr: Some(fpr_at_95_tpr(&succ)?),
            aupr_err: Some(aupr_for(confidence, correct, Positive::Errors)?),
            aupr_succ: Some(aupr(&succ)?),
            auroc: Some(auroc(&succ)?),
            ..Default::default()
        })
    }

    /// Calibration metrics of a probability matrix, scored on its own
    /// argmax and top-label probability.
    pub fn calibration(probs: &ProbMatrix, labels: &[usize], bins: usize) -> Result<Self> {
        Self::calibration_with_top(probs, &probs.predictions(), &probs.top_confidence(), labels, bins)
    }

    /// Calibration metrics where the predicted class and its confidence are
    /// supplied separately from the probability rows, as for histogram
    /// binning. ECE and MCE use `(predictions, top_confidence)`; NLL and
    /// Brier use `probs`.
    pub fn calibration_with_top(
        probs: &ProbMatrix,
        predictions: &[usize],
        top_confidence: &[f64],
        labels: &[usize],
        bins: usize,
    ) -> Result<Self> {
        check_labels(probs, labels)?;
        if predictions.len() != labels.len() || top_confidence.len() != labels.len() {
            return Err(Error::invalid("predictions, confidences and labels differ in length"));
        }
        let correct: Vec<bool> = predictions.iter().zip(labels).map(|(p, y)| p == y).collect();
        Ok(MetricReport {
            ece: Some(ece(top_confidence, &correct, bins)?),
            mce: Some(mce(top_confidence, &correct, bins)?),
            nll: Some(nll(probs, labels)?),
            brier: Some(brier(probs, labels)?),
            ..Default::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn outcome(scores: &[f64], labels: &[bool]) -> BinaryOutcome {
        BinaryOutcome::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    fn probs(rows: &[Vec<f64>]) -> ProbMatrix {
        ProbMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        let sep = outcome(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert_eq!(auroc(&sep).unwrap(), 1.0);
        let flat = outcome(&[0.3; 4], &[false, true, false, true]);
        assert_eq!(auroc(&flat).unwrap(), 0.5);
        let mixed = outcome(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
        assert!((auroc(&mixed).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_needs_both_classes() {
        let o = outcome(&[0.1, 0.2], &[true, true]);
        assert!(matches!(auroc(&o), Err(Error::UndefinedMetric(_))));
        assert!(matches!(fpr_at_95_tpr(&o), Err(Error::UndefinedMetric(_))));
        let none = outcome(&[0.1, 0.2], &[false, false]);
        assert!(matches!(aupr(&none), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn roc_curve_endpoints() {
        let o = outcome(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
        let pts = roc_curve(&o).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn aupr_examples() {
        let sep = outcome(&[0.9, 0.8, 0.1], &[true, true, false]);
        assert_eq!(aupr(&sep).unwrap(), 1.0);
        let last = outcome(&[0.9, 0.8, 0.7, 0.6, 0.1], &[false, false, false, false, true]);
        assert!((aupr(&last).unwrap() - 0.2).abs() < 1e-15);
        let hand = outcome(&[0.9, 0.8, 0.7], &[true, false, true]);
        assert!((aupr(&hand).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn aupr_error_orientation() {
        // Errors carry the lowest confidence, so AUPR-ERR is perfect.
        let conf = [0.9, 0.8, 0.2, 0.1];
        let correct = [true, true, false, false];
        assert_eq!(aupr_for(&conf, &correct, Positive::Errors).unwrap(), 1.0);
        assert_eq!(aupr_for(&conf, &correct, Positive::Successes).unwrap(), 1.0);
    }

    #[test]
    fn fpr95_examples() {
        let sep = outcome(&[0.9, 0.8, 0.1], &[true, true, false]);
        assert_eq!(fpr_at_95_tpr(&sep).unwrap(), 0.0);
        let flat = outcome(&[0.5; 4], &[true, false, true, false]);
        assert_eq!(fpr_at_95_tpr(&flat).unwrap(), 1.0);

        let mut scores = vec![1.0; 20];
        let mut labels = vec![true; 20];
        scores.extend(vec![0.9; 19]);
        labels.extend(vec![true; 19]);
        scores.push(0.95);
        labels.push(false);
        scores.extend(vec![0.0; 9]);
        labels.extend(vec![false; 9]);
        let o = outcome(&scores, &labels);
        assert!((fpr_at_95_tpr(&o).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ece_mce_examples() {
        assert_eq!(ece(&[1.0, 1.0], &[true, true], 15).unwrap(), 0.0);
        assert_eq!(mce(&[1.0, 1.0], &[true, true], 15).unwrap(), 0.0);

        let conf = [0.8; 5];
        let correct = [true, true, true, false, false];
        assert!((ece(&conf, &correct, 15).unwrap() - 0.2).abs() < 1e-12);
        assert!((mce(&conf, &correct, 15).unwrap() - 0.2).abs() < 1e-12);

        // Bin (0.2,0.4]: conf 0.3, accuracy 0.4 (gap 0.1).
        // Bin (0.8,1.0]: conf 0.9, accuracy 0.6 (gap 0.3).
        let mut conf = vec![0.3; 5];
        let mut correct = vec![true, true, false, false, false];
        conf.extend([0.9; 5]);
        correct.extend([true, true, true, false, false]);
        assert!((ece(&conf, &correct, 5).unwrap() - 0.2).abs() < 1e-12);
        assert!((mce(&conf, &correct, 5).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ece_bin_edges() {
        let bins = calibration_bins(&[0.0, 1.0, 0.5], &[true, true, true], 2).unwrap();
        assert_eq!(bins[0].count, 2); // 0.0 and 0.5 (right-closed)
        assert_eq!(bins[1].count, 1);
        assert!(calibration_bins(&[1.5], &[true], 2).is_err());
    }

    #[test]
    fn nll_examples() {
        let onehot = probs(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(nll(&onehot, &[0, 1]).unwrap(), 0.0);
        let uniform = probs(&[vec![0.25; 4]]);
        assert!((nll(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let wrong = probs(&[vec![1.0, 0.0]]);
        let v = nll(&wrong, &[1]).unwrap();
        assert!((v - 27.631021115928547).abs() < 1e-9 && v.is_finite());
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&probs(&[vec![1.0, 0.0]]), &[0]).unwrap(), 0.0);
        assert_eq!(brier(&probs(&[vec![0.5, 0.5]]), &[1]).unwrap(), 0.5);
        let b = brier(&probs(&[vec![0.7, 0.2, 0.1]]), &[0]).unwrap();
        assert!((b - 0.14).abs() < 1e-12);
        assert!(brier(&probs(&[vec![0.5, 0.5]]), &[2]).is_err());
    }

    #[test]
    fn binned_correlation_examples() {
        // Accuracy rises with bin index.
        let conf = [0.05, 0.05, 0.55, 0.55, 0.95, 0.95, 0.95, 0.95, 0.55, 0.05];
        let correct = [false, false, true, false, true, true, true, true, false, false];
        let r = binned_correlation(&conf, &correct, 10).unwrap();
        assert!((r.spearman - 1.0).abs() < 1e-12);
        assert_eq!(r.bins.iter().filter(|b| b.count > 0).count(), 3);

        let flat = binned_correlation(&conf, &[true; 10], 10).unwrap();
        assert_eq!(flat.spearman, 0.0);
        assert!(binned_correlation(&[0.5; 3], &[true; 3], 10).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn point_biserial_sign() {
        let v = [0.1, 0.2, 0.8, 0.9];
        assert!(point_biserial(&v, &[false, false, true, true]) > 0.9);
        assert_eq!(point_biserial(&v, &[true; 4]), 0.0);
    }

    #[test]
    fn report_shapes() {
        let conf = [0.9, 0.8, 0.6, 0.3];
        let correct = [true, true, false, false];
        let r = MetricReport::misclassification(&conf, &correct).unwrap();
        assert_eq!(r.auroc, Some(1.0));
        assert!(r.ece.is_none());
        let p = probs(&[vec![0.9, 0.1], vec![0.4, 0.6]]);
        let c = MetricReport::calibration(&p, &[0, 0], 15).unwrap();
        assert!(c.ece.is_some() && c.auroc.is_none());
    }
}
