//! Brute-force oracles and randomized checks shared by the integration
//! tests and the acceptance binary. Each check returns `Ok(detail)` or
//! `Err(detail)`.

#![allow(dead_code)]

use std::time::Instant;

use ssprobe::calibration::{
    apply_temperature, fit_input_dependent, fit_temperature, nll_with_temperatures, TemperatureModel,
};
use ssprobe::metrics::aupr_for;
use ssprobe::metrics::{aupr, auroc, ece, fpr_at_95_tpr, mce, BinaryOutcome, Positive};
use ssprobe::model::{loss_and_gradients, Backbone, LinearLayer};
use ssprobe::probing::{head_loss_and_gradient, ProbingConfidence};
use ssprobe::rng::Rng;
use ssprobe::scores::{fuse_ssp, search_lambda, FusionConfig, DEFAULT_GRID};
use ssprobe::tensor::{argmax_row, LogitMatrix, Matrix};
use ssprobe::transforms::{rotate_quarter, translate_reflect};

pub type Check = Result<String, String>;

/// Random scored instance with both classes present. Scores come from a
/// small set of levels so ties are common.
pub fn random_instance(rng: &mut Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.int_inclusive(2, max_n as i64) as usize;
        let levels = rng.int_inclusive(2, 40);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.int_inclusive(0, levels) as f64 / levels as f64 * 4.0 - 2.0)
            .collect();
        let bias = rng.uniform();
        let labels: Vec<bool> = scores
            .iter()
            .map(|s| rng.uniform() < bias * (s + 2.0) / 4.0 + (1.0 - bias) * 0.5)
            .collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

/// Mann-Whitney statistic: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// `(tp, fp)` at every distinct threshold, descending, each counted by a
/// full scan of `score >= threshold`.
pub fn threshold_counts(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds
        .iter()
        .map(|&t| {
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= t).count();
            let fp = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= t).count();
            (tp, fp)
        })
        .collect()
}

pub fn oracle_aupr(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let mut area = 0.0;
    let mut prev = 0.0;
    for (tp, fp) in threshold_counts(scores, labels) {
        let recall = tp as f64 / p;
        area += (recall - prev) * (tp as f64 / (tp + fp) as f64);
        prev = recall;
    }
    area
}

pub fn oracle_fpr95(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    threshold_counts(scores, labels)
        .into_iter()
        .find(|&(tp, _)| tp * 100 >= 95 * p)
        .map(|(_, fp)| fp as f64 / n as f64)
        .unwrap()
}

fn ranking_metrics(scores: Vec<f64>, labels: Vec<bool>) -> [f64; 3] {
    let o = BinaryOutcome::new(scores, labels).unwrap();
    [auroc(&o).unwrap(), aupr(&o).unwrap(), fpr_at_95_tpr(&o).unwrap()]
}

/// AUROC against the pairwise statistic, AUPR and FPR@95 against
/// threshold enumeration, on 200 random instances with `N <= 200`.
pub fn metric_oracle_suite(seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (s, l) = random_instance(&mut rng, 200);
        let [a, ap, fpr] = ranking_metrics(s.clone(), l.clone());
        let diff = (a - pairwise_auroc(&s, &l)).abs();
        worst = worst.max(diff);
        if diff > 1e-9 {
            return Err(format!("case {case}: AUROC off by {diff:e}"));
        }
        let want = oracle_aupr(&s, &l);
        if ap != want {
            return Err(format!("case {case}: AUPR {ap} vs enumeration {want}"));
        }
        let want = oracle_fpr95(&s, &l);
        if fpr != want {
            return Err(format!("case {case}: FPR@95 {fpr} vs enumeration {want}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        return Err(format!("took {secs:.2}s"));
    }
    Ok(format!("max AUROC deviation {worst:.1e}, {secs:.2}s"))
}

/// Ranking metrics under `2s + 3` and `tanh(s)`.
pub fn ranking_invariance_suite(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (s, l) = random_instance(&mut rng, 200);
        let base = ranking_metrics(s.clone(), l.clone());
        for (name, f) in [
            ("2s+3", (|v: f64| 2.0 * v + 3.0) as fn(f64) -> f64),
            ("tanh", f64::tanh),
        ] {
            let t = ranking_metrics(s.iter().map(|&v| f(v)).collect(), l.clone());
            for (a, b) in base.iter().zip(&t) {
                let d = (a - b).abs();
                worst = worst.max(d);
                if d > 1e-12 {
                    return Err(format!("case {case}: {name} changed a metric by {d:e}"));
                }
            }
        }
    }
    Ok(format!("max deviation {worst:.1e}"))
}

/// Relative error `|a - f| / max(|a|, |f|)` over the whole parameter vector.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, f)| a - f).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

const FD_STEP: f64 = 1e-4;

fn random_layer(rng: &mut Rng, out: usize, inp: usize, std: f64) -> LinearLayer {
    LinearLayer {
        weight: Matrix::from_vec(out, inp, (0..out * inp).map(|_| std * rng.normal()).collect()).unwrap(),
        bias: (0..out).map(|_| 0.1 * rng.normal()).collect(),
    }
}

fn params(layer: &LinearLayer) -> Vec<f64> {
    layer.weight.as_slice().iter().chain(&layer.bias).copied().collect()
}

/// Central differences of `loss` with respect to every parameter of the
/// layer selected by `pick`.
fn numeric_grad<S: Clone>(state: &S, pick: fn(&mut S) -> &mut LinearLayer, loss: impl Fn(&S) -> f64) -> Vec<f64> {
    let mut s = state.clone();
    let n = {
        let l = pick(&mut s);
        l.weight.as_slice().len() + l.bias.len()
    };
    (0..n)
        .map(|i| {
            let nudge = |s: &mut S, d: f64| {
                let l = pick(s);
                let w = l.weight.as_slice().len();
                if i < w {
                    l.weight.as_mut_slice()[i] += d;
                } else {
                    l.bias[i - w] += d;
                }
            };
            nudge(&mut s, FD_STEP);
            let up = loss(&s);
            nudge(&mut s, -2.0 * FD_STEP);
            let down = loss(&s);
            nudge(&mut s, FD_STEP);
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

type Model = (Backbone, LinearLayer);

/// A small model and batch whose hidden pre-activations all keep a margin
/// from zero larger than any finite-difference nudge can cross.
fn gradient_fixture(seed: u64) -> (Model, Vec<Vec<f32>>, Vec<usize>) {
    let (c, h, w) = (1, 4, 4);
    let mut rng = Rng::new(seed);
    loop {
        let hidden = random_layer(&mut rng, 8, c * h * w, 0.5);
        let head = random_layer(&mut rng, 3, 8, 0.5);
        let images: Vec<Vec<f32>> = (0..5)
            .map(|_| (0..c * h * w).map(|_| rng.uniform() as f32).collect())
            .collect();
        let labels: Vec<usize> = (0..5).map(|_| rng.int_inclusive(0, 2) as usize).collect();
        let margin_ok = images.iter().all(|x| {
            (0..8).all(|j| {
                let pre: f64 = hidden.bias[j]
                    + hidden
                        .weight
                        .row(j)
                        .iter()
                        .zip(x)
                        .map(|(a, &b)| a * b as f64)
                        .sum::<f64>();
                pre.abs() > 1e-2
            })
        });
        if margin_ok {
            let backbone = Backbone {
                hidden,
                input_shape: (c, h, w),
            };
            return ((backbone, head), images, labels);
        }
    }
}

/// Backbone and classifier-head gradients against central differences.
pub fn gradient_check_model(seed: u64) -> Result<(f64, f64), String> {
    let (model, images, labels) = gradient_fixture(seed);
    let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
    let loss = |m: &Model| loss_and_gradients(&m.0, &m.1, &refs, &labels).0;
    let (_, g) = loss_and_gradients(&model.0, &model.1, &refs, &labels);
    let backbone = relative_error(&params(&g.hidden), &numeric_grad(&model, |m| &mut m.0.hidden, loss));
    let head = relative_error(&params(&g.head), &numeric_grad(&model, |m| &mut m.1, loss));
    Ok((backbone, head))
}

/// Probing-head gradient against central differences.
pub fn gradient_check_probe(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let layer = random_layer(&mut rng, 4, 6, 1.0);
    let z: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
    let labels: Vec<usize> = (0..5).map(|_| rng.int_inclusive(0, 3) as usize).collect();
    let refs: Vec<&[f64]> = z.iter().map(|v| v.as_slice()).collect();
    let (_, g) = head_loss_and_gradient(&layer, &refs, &labels);
    let numeric = numeric_grad(&layer, |l| l, |l| head_loss_and_gradient(l, &refs, &labels).0);
    relative_error(&params(&g), &numeric)
}

pub fn gradient_suite() -> Check {
    let mut worst = [0.0f64; 3];
    for seed in 1..=10 {
        let (b, h) = gradient_check_model(seed)?;
        let p = gradient_check_probe(seed);
        for (w, v) in worst.iter_mut().zip([b, h, p]) {
            *w = w.max(v);
        }
    }
    let detail = format!(
        "max relative error backbone {:.1e}, classifier {:.1e}, probing head {:.1e}",
        worst[0], worst[1], worst[2]
    );
    if worst.iter().all(|&e| e < 1e-4) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Logits, one probing confidence per sample and labels loosely tied to
/// both, so the input-dependent fit has something to find.
pub fn calibration_fixture(rng: &mut Rng, n: usize, k: usize) -> (LogitMatrix, ProbingConfidence, Vec<usize>) {
    let scale = 0.5 + 4.0 * rng.uniform();
    let mut logits = Matrix::zeros(n, k);
    let mut conf = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let p = rng.uniform();
        for c in 0..k {
            logits.set(i, c, scale * rng.normal());
        }
        let top = argmax_row(logits.row(i)).unwrap();
        let y = if rng.uniform() < 0.3 + 0.6 * p {
            top
        } else {
            rng.int_inclusive(0, k as i64 - 1) as usize
        };
        conf.push(p);
        labels.push(y);
    }
    let confs = ProbingConfidence::new(vec!["rotation".into()], vec![conf]).unwrap();
    (LogitMatrix::new(logits).unwrap(), confs, labels)
}

/// Argmax preservation, input-dependent NLL against scalar scaling, and
/// MCE against ECE, on random inputs.
pub fn calibration_suite(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let mut worst_gap = f64::NEG_INFINITY;
    for case in 0..40 {
        let (logits, confs, labels) = calibration_fixture(&mut rng, 200, 5);

        let t = fit_temperature(&logits, &labels).map_err(|e| e.to_string())?;
        let scalar = TemperatureModel::scalar(t, &confs.tasks);
        let fitted = fit_input_dependent(&logits, &confs, &labels).map_err(|e| e.to_string())?;
        let nll = |m: &TemperatureModel| {
            nll_with_temperatures(&logits, &labels, &m.temperatures(&confs, labels.len()).unwrap())
        };
        let gap = nll(&fitted) - nll(&scalar);
        worst_gap = worst_gap.max(gap);
        if gap > 1e-9 {
            return Err(format!("case {case}: input-dependent NLL exceeds scalar by {gap:e}"));
        }

        let arbitrary = TemperatureModel {
            a0: rng.uniform() * 3.0 - 1.0,
            tasks: confs.tasks.clone(),
            a: vec![rng.normal() * 2.0],
        };
        for m in [&scalar, &fitted, &arbitrary] {
            let p = apply_temperature(&logits, &confs, m).map_err(|e| e.to_string())?;
            for (i, row) in logits.iter_rows().enumerate() {
                if argmax_row(row).unwrap() != argmax_row(p.row(i)).unwrap() {
                    return Err(format!("case {case}: row {i} changed its argmax"));
                }
            }
        }

        let n = rng.int_inclusive(1, 300) as usize;
        let mut c: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        c[0] = [0.0, 1.0, 0.5][case % 3];
        let ok: Vec<bool> = c.iter().map(|&v| rng.uniform() < v).collect();
        let m = [1, 5, 15, 40][case % 4];
        let (e, x) = (ece(&c, &ok, m).unwrap(), mce(&c, &ok, m).unwrap());
        if x < e {
            return Err(format!("case {case}: MCE {x} < ECE {e}"));
        }
    }
    Ok(format!("largest NLL(input-dependent) - NLL(scalar) {worst_gap:.2e}"))
}

/// The searched fusion never scores below the base on validation AUPR-ERR.
pub fn fusion_suite(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    for case in 0..30 {
        let n = rng.int_inclusive(20, 150) as usize;
        let base: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let correct: Vec<bool> = base.iter().map(|&b| rng.uniform() < 0.5 + 0.4 * b).collect();
        if correct.iter().all(|&c| c) {
            continue;
        }
        let tasks = rng.int_inclusive(1, 2) as usize;
        let confs = ProbingConfidence::new(
            (0..tasks).map(|t| format!("task{t}")).collect(),
            (0..tasks).map(|_| (0..n).map(|_| rng.uniform()).collect()).collect(),
        )
        .unwrap();
        let grid = &DEFAULT_GRID[..6];
        let (cfg, best) = search_lambda(&base, &confs, &correct, grid).map_err(|e| e.to_string())?;
        let plain = aupr_for(&base, &correct, Positive::Errors).unwrap();
        let refit = aupr_for(&fuse_ssp(&base, &confs, &cfg).unwrap(), &correct, Positive::Errors).unwrap();
        let zero = fuse_ssp(&base, &confs, &FusionConfig::zeros(&confs.tasks)).unwrap();
        if best < plain || refit != best || zero != base {
            return Err(format!("case {case}: fused {best} vs base {plain}"));
        }
    }
    Ok("30 random validation sets".into())
}

/// Quarter turns, zero shift and the reflection index rule.
pub fn transform_algebra_suite(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    for case in 0..50 {
        let c = rng.int_inclusive(1, 3) as usize;
        let n = rng.int_inclusive(1, 9) as usize;
        let img: Vec<f32> = (0..c * n * n).map(|_| rng.normal() as f32).collect();
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = rotate_quarter(&cur, c, n, n, 1).unwrap().0;
        }
        if cur != img {
            return Err(format!("case {case}: four quarter turns changed a {n}x{n} image"));
        }
        if translate_reflect(&img, c, n, n, 0, 0).unwrap() != img {
            return Err(format!("case {case}: zero shift changed the image"));
        }
    }
    let row = [1.0f32, 2.0, 3.0];
    let right = translate_reflect(&row, 1, 1, 3, 1, 0).unwrap();
    let left = translate_reflect(&row, 1, 1, 3, -1, 0).unwrap();
    if right != [2.0, 1.0, 2.0] || left != [2.0, 3.0, 2.0] {
        return Err(format!("row [1,2,3]: +1 gave {right:?}, -1 gave {left:?}"));
    }
    let (quarter, _, _) = rotate_quarter(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2, 1).unwrap();
    if quarter != [2.0, 4.0, 1.0, 3.0] {
        return Err(format!("[[a,b],[c,d]] turned to {quarter:?}"));
    }
    Ok("50 random images, reflection rows [2,1,2] and [2,3,2]".into())
}
