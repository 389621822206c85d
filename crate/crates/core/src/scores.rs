//! Baseline confidence scores and their fusion with probing confidence.
//!
//! All scores are oriented "higher = more trustworthy".

use crate::error::{Error, Result};
use crate::metrics::{aupr_for, Positive};
use crate::probing::ProbingConfidence;
use crate::tensor::{ProbMatrix, ScoreVector};

/// Maximum softmax probability per row.
pub fn msp_score(probs: &ProbMatrix) -> ScoreVector {
    probs.top_confidence()
}

/// Negated Shannon entropy per row (`0 ln 0 = 0`).
pub fn entropy_score(probs: &ProbMatrix) -> ScoreVector {
    probs
        .iter_rows()
        .map(|r| r.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .collect()
}

/// Per-task fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub tasks: Vec<String>,
    pub lambdas: Vec<f64>,
}

impl FusionConfig {
    pub fn zeros(tasks: &[String]) -> Self {
        FusionConfig {
            tasks: tasks.to_vec(),
            lambdas: vec![0.0; tasks.len()],
        }
    }
}

/// `S(x) + Σ_i λ_i p_i(x)`.
pub fn fuse_ssp(base: &[f64], confs: &ProbingConfidence, cfg: &FusionConfig) -> Result<ScoreVector> {
    if cfg.lambdas.len() != confs.num_tasks() {
        return Err(Error::invalid(format!(
            "{} fusion weights for {} probing tasks",
            cfg.lambdas.len(),
            confs.num_tasks()
        )));
    }
    if confs.num_tasks() > 0 && confs.num_samples() != base.len() {
        return Err(Error::invalid(format!(
            "base score has {} samples, probing confidence has {}",
            base.len(),
            confs.num_samples()
        )));
    }
    let mut out = base.to_vec();
    for (lambda, p) in cfg.lambdas.iter().zip(&confs.values) {
        for (o, v) in out.iter_mut().zip(p) {
            *o += lambda * v;
        }
    }
    Ok(out)
}

/// Sorted, deduplicated candidate weights; must contain 0.
pub fn normalize_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("fusion grid values must be finite"));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    if !g.contains(&0.0) {
        return Err(Error::invalid("fusion grid must contain 0"));
    }
    Ok(g)
}

/// Exhaustive search over the per-task grid product for the weights that
/// maximize validation AUPR-ERR. Candidates are visited in lexicographic
/// order and only a strict improvement replaces the incumbent, so ties go
/// to the lexicographically smallest weight vector.
pub fn search_lambda(
    base_val: &[f64],
    confs_val: &ProbingConfidence,
    correct_val: &[bool],
    grid: &[f64],
) -> Result<(FusionConfig, f64)> {
    let grid = normalize_grid(grid)?;
    let m = confs_val.num_tasks();
    let mut cfg = FusionConfig::zeros(&confs_val.tasks);
    let mut best_cfg = cfg.clone();
    let mut best = f64::NEG_INFINITY;
    let mut digits = vec![0usize; m];
    loop {
        for (l, &d) in cfg.lambdas.iter_mut().zip(&digits) {
            *l = grid[d];
        }
        let fused = fuse_ssp(base_val, confs_val, &cfg)?;
        let score = aupr_for(&fused, correct_val, Positive::Errors)?;
        if score > best {
            best = score;
            best_cfg = cfg.clone();
        }
        // Odometer increment, last task fastest.
        let mut i = m;
        loop {
            if i == 0 {
                return Ok((best_cfg, best));
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < grid.len() {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// Default per-task candidate weights. The small steps matter when the base
/// score is concentrated near 1, as MSP is for an accurate classifier.
pub const DEFAULT_GRID: [f64; 11] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Matrix;

    fn probs(rows: &[Vec<f64>]) -> ProbMatrix {
        ProbMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn confs(values: Vec<Vec<f64>>) -> ProbingConfidence {
        let names = (0..values.len()).map(|i| format!("t{i}")).collect();
        ProbingConfidence::new(names, values).unwrap()
    }

    #[test]
    fn msp_examples() {
        assert!((msp_score(&probs(&[vec![0.1; 10]]))[0] - 0.1).abs() < 1e-15);
        assert_eq!(msp_score(&probs(&[vec![0.0, 0.0, 1.0]])), vec![1.0]);
        assert_eq!(msp_score(&probs(&[vec![0.2, 0.5, 0.3]])), vec![0.5]);
    }

    #[test]
    fn entropy_examples() {
        let p = probs(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.25; 4]]);
        let s = entropy_score(&p);
        assert_eq!(s[0], 0.0);
        assert!((s[1] + 4f64.ln()).abs() < 1e-15);
        let half = entropy_score(&probs(&[vec![0.5, 0.5]]));
        assert!((half[0] + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn entropy_and_msp_rank_alike_for_two_classes() {
        let mut rng = Rng::new(2);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let p = rng.uniform();
                vec![p, 1.0 - p]
            })
            .collect();
        let p = probs(&rows);
        let (m, e) = (msp_score(&p), entropy_score(&p));
        for i in 0..50 {
            for j in 0..50 {
                if m[i] > m[j] + 1e-12 {
                    assert!(e[i] > e[j], "rows {i} {j}");
                }
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let base = vec![0.3, 0.7];
        let c = confs(vec![vec![0.9, 0.9]]);
        let zero = FusionConfig::zeros(&c.tasks);
        assert_eq!(fuse_ssp(&base, &c, &zero).unwrap(), base);
        let half = FusionConfig {
            tasks: c.tasks.clone(),
            lambdas: vec![0.5],
        };
        assert!((fuse_ssp(&base, &c, &half).unwrap()[1] - 1.15).abs() < 1e-15);

        let two = confs(vec![vec![0.8], vec![0.6]]);
        let cfg = FusionConfig {
            tasks: two.tasks.clone(),
            lambdas: vec![1.0, 2.0],
        };
        assert!((fuse_ssp(&[0.0], &two, &cfg).unwrap()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn fusion_length_mismatch() {
        let c = confs(vec![vec![0.9, 0.9, 0.1]]);
        assert!(fuse_ssp(&[0.1, 0.2], &c, &FusionConfig::zeros(&c.tasks)).is_err());
        let wrong = FusionConfig {
            tasks: vec![],
            lambdas: vec![],
        };
        assert!(fuse_ssp(&[0.1, 0.2, 0.3], &c, &wrong).is_err());
    }

    #[test]
    fn constant_confidence_selects_zero() {
        let base: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let correct: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
        let c = confs(vec![vec![0.4; 20]]);
        let (cfg, _) = search_lambda(&base, &c, &correct, &DEFAULT_GRID).unwrap();
        assert_eq!(cfg.lambdas, vec![0.0]);
        let (cfg, _) = search_lambda(&base, &c, &correct, &[0.0]).unwrap();
        assert_eq!(cfg.lambdas, vec![0.0]);
    }

    #[test]
    fn grid_must_contain_zero() {
        let c = confs(vec![vec![0.4; 2]]);
        assert!(search_lambda(&[0.1, 0.2], &c, &[true, false], &[0.5, 1.0]).is_err());
    }

    #[test]
    fn separating_confidence_reaches_perfect_aupr() {
        let mut rng = Rng::new(8);
        let n = 60;
        let correct: Vec<bool> = (0..n).map(|i| i % 4 != 0).collect();
        let base: Vec<f64> = (0..n).map(|_| rng.uniform() * 0.1).collect();
        let p: Vec<f64> = correct.iter().map(|&c| if c { 0.9 } else { 0.2 }).collect();
        let c = confs(vec![p]);
        let (cfg, best) = search_lambda(&base, &c, &correct, &DEFAULT_GRID).unwrap();
        let fused = fuse_ssp(&base, &c, &cfg).unwrap();
        let oracle = aupr_for(&fused, &correct, Positive::Errors).unwrap();
        assert_eq!(best, 1.0);
        assert_eq!(oracle, 1.0);
        assert!(cfg.lambdas[0] > 0.0);
    }

    #[test]
    fn search_visits_full_product_with_lexicographic_ties() {
        // Both tasks perfectly separate; the smallest winning vector is (0, 0.01).
        let correct = vec![true, true, false, false];
        let base = vec![0.0; 4];
        let p = vec![0.9, 0.8, 0.1, 0.2];
        let c = confs(vec![p.clone(), p]);
        let (cfg, best) = search_lambda(&base, &c, &correct, &DEFAULT_GRID).unwrap();
        assert_eq!(best, 1.0);
        assert_eq!(cfg.lambdas, vec![0.0, 0.01]);
    }
}
