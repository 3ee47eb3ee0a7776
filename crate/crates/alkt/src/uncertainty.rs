//! Disagreement-based uncertainty scoring between teacher and student
//! outputs, temperature-scaling calibration, and the classic uncertainty
//! baselines.

use crate::distill::attention_distances;
use crate::error::{AlktError, Result};
use crate::nets::ForwardResult;
use crate::tensor::softmax_vec;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyScore {
    pub index: usize,
    pub value: f64,
}

/// One fitted temperature per model, applied to its own logits before
/// softmax.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Calibration {
    pub teacher_temperature: f64,
    pub student_temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMetric {
    KlPosterior,
    MsePosterior,
    MseFeature,
    L1Feature,
    AttentionDistance,
}

impl UncertaintyMetric {
    pub fn name(self) -> &'static str {
        match self {
            UncertaintyMetric::KlPosterior => "kl-posterior",
            UncertaintyMetric::MsePosterior => "mse-posterior",
            UncertaintyMetric::MseFeature => "mse-feature",
            UncertaintyMetric::L1Feature => "l1-feature",
            UncertaintyMetric::AttentionDistance => "attention-distance",
        }
    }
}

impl std::str::FromStr for UncertaintyMetric {
    type Err = AlktError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl-posterior" => Ok(UncertaintyMetric::KlPosterior),
            "mse-posterior" => Ok(UncertaintyMetric::MsePosterior),
            "mse-feature" => Ok(UncertaintyMetric::MseFeature),
            "l1-feature" => Ok(UncertaintyMetric::L1Feature),
            "attention-distance" => Ok(UncertaintyMetric::AttentionDistance),
            other => Err(AlktError::invalid(format!(
                "unknown uncertainty metric {other:?}"
            ))),
        }
    }
}

/// KL(p || q) with eps-flooring inside the log ratio.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(AlktError::ShapeMismatch {
            op: "kl-divergence",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    if eps <= 0.0 {
        return Err(AlktError::invalid("kl eps must be > 0"));
    }
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        sum += pi * (pi.max(eps) / qi.max(eps)).ln();
    }
    Ok(sum)
}

fn posteriors(fr: &ForwardResult, temperature: f64) -> Vec<Vec<f64>> {
    let b = fr.logits.shape()[0];
    (0..b)
        .map(|r| {
            let scaled: Vec<f64> = fr.logits.row(r).iter().map(|v| v / temperature).collect();
            softmax_vec(&scaled)
        })
        .collect()
}

/// Mean squared difference of two probability vectors (usable for vector
/// posteriors or flattened per-pixel probability maps).
pub fn mse_posterior(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(AlktError::ShapeMismatch {
            op: "mse-posterior",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}

/// Per-sample disagreement scores for a batch of paired outputs. `indices`
/// names the dataset index of each row.
pub fn score(
    teacher_out: &ForwardResult,
    student_out: &ForwardResult,
    indices: &[usize],
    metric: UncertaintyMetric,
    calibration: Option<&Calibration>,
) -> Result<Vec<UncertaintyScore>> {
    let b = teacher_out.logits.shape()[0];
    if student_out.logits.shape() != teacher_out.logits.shape() || indices.len() != b {
        return Err(AlktError::ShapeMismatch {
            op: "score",
            lhs: teacher_out.logits.shape().to_vec(),
            rhs: student_out.logits.shape().to_vec(),
        });
    }
    let (tt, st) = match calibration {
        Some(c) => (c.teacher_temperature, c.student_temperature),
        None => (1.0, 1.0),
    };
    let values: Vec<f64> = match metric {
        UncertaintyMetric::KlPosterior => {
            let pt = posteriors(teacher_out, tt);
            let ps = posteriors(student_out, st);
            pt.iter()
                .zip(&ps)
                .map(|(p, q)| kl_divergence(p, q, KL_EPS))
                .collect::<Result<_>>()?
        }
        UncertaintyMetric::MsePosterior => {
            let pt = posteriors(teacher_out, tt);
            let ps = posteriors(student_out, st);
            pt.iter()
                .zip(&ps)
                .map(|(p, q)| mse_posterior(p, q))
                .collect::<Result<_>>()?
        }
        UncertaintyMetric::MseFeature | UncertaintyMetric::L1Feature => {
            let l1 = metric == UncertaintyMetric::L1Feature;
            let mut vals = vec![0.0; b];
            let mut total = 0usize;
            for (ta, sa) in teacher_out
                .block_activations
                .iter()
                .zip(&student_out.block_activations)
            {
                if ta.shape() != sa.shape() {
                    return Err(AlktError::ShapeMismatch {
                        op: "score",
                        lhs: ta.shape().to_vec(),
                        rhs: sa.shape().to_vec(),
                    });
                }
                let inner: usize = ta.shape()[1..].iter().product();
                total += inner;
                for r in 0..b {
                    let x = &ta.data()[r * inner..(r + 1) * inner];
                    let y = &sa.data()[r * inner..(r + 1) * inner];
                    vals[r] += x
                        .iter()
                        .zip(y)
                        .map(|(a, c)| if l1 { (a - c).abs() } else { (a - c) * (a - c) })
                        .sum::<f64>();
                }
            }
            vals.iter().map(|v| v / total as f64).collect()
        }
        UncertaintyMetric::AttentionDistance => attention_distances(
            &student_out.block_activations,
            &teacher_out.block_activations,
        )?,
    };
    Ok(indices
        .iter()
        .zip(values)
        .map(|(&index, value)| UncertaintyScore { index, value })
        .collect())
}

/// Default calibration grid: 0.05, 0.10, ..., 5.00.
pub fn default_temperature_grid() -> Vec<f64> {
    (1..=100).map(|i| i as f64 * 0.05).collect()
}

/// Grid-search temperature minimizing validation NLL; ties go to the
/// smallest temperature.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize], grid: &[f64]) -> Result<f64> {
    if logits.is_empty() || labels.len() != logits.len() {
        return Err(AlktError::invalid("fit-temperature needs a nonempty validation set"));
    }
    if grid.is_empty() {
        return Err(AlktError::invalid("temperature grid is empty"));
    }
    let mut best_t = grid[0];
    let mut best_nll = f64::INFINITY;
    for &t in grid {
        let mut nll = 0.0;
        for (z, &y) in logits.iter().zip(labels) {
            let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
            let p = softmax_vec(&scaled);
            nll -= p[y].max(KL_EPS).ln();
        }
        nll /= logits.len() as f64;
        if nll < best_nll {
            best_nll = nll;
            best_t = t;
        }
    }
    Ok(best_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Entropy,
    Margin,
    LeastConfidence,
}

/// Classic uncertainty baselines, all oriented so larger = more uncertain.
pub fn baseline_scores(posteriors: &[Vec<f64>], kind: BaselineKind) -> Vec<f64> {
    posteriors
        .iter()
        .map(|p| match kind {
            BaselineKind::Entropy => -p
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|&x| x * x.ln())
                .sum::<f64>(),
            BaselineKind::Margin => {
                let mut top = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for &x in p {
                    if x > top {
                        second = top;
                        top = x;
                    } else if x > second {
                        second = x;
                    }
                }
                -(top - second)
            }
            BaselineKind::LeastConfidence => {
                1.0 - p.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect()
}

/// Export scores as `index,score,metric` CSV.
pub fn write_scores_csv(
    path: &Path,
    scores: &[UncertaintyScore],
    metric: UncertaintyMetric,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "index,score,metric")?;
    for s in scores {
        writeln!(f, "{},{},{}", s.index, s.value, metric.name())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_pair, ArchConfig};
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    #[test]
    fn kl_hand_values() {
        assert_relative_eq!(
            kl_divergence(&[0.3, 0.7], &[0.3, 0.7], KL_EPS).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert!(
            (kl_divergence(&[0.5, 0.5], &[0.9, 0.1], KL_EPS).unwrap() - 0.510826).abs() < 1e-6
        );
        assert!(
            (kl_divergence(&[0.9, 0.1], &[0.5, 0.5], KL_EPS).unwrap() - 0.368064).abs() < 1e-6
        );
    }

    #[test]
    fn kl_length_mismatch_errors() {
        assert!(kl_divergence(&[1.0], &[0.5, 0.5], KL_EPS).is_err());
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let k = rng.gen_range(2..6);
            let mut p: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mut q: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
            p.iter_mut().for_each(|v| *v /= sp);
            q.iter_mut().for_each(|v| *v /= sq);
            assert!(kl_divergence(&p, &q, KL_EPS).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn mse_posterior_hand_value_and_symmetry() {
        let v = mse_posterior(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert_relative_eq!(v, 0.25, epsilon = 1e-12);
        assert_relative_eq!(
            v,
            mse_posterior(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            epsilon = 1e-15
        );
    }

    fn pair_outputs(seed: u64) -> (crate::nets::ForwardResult, crate::nets::ForwardResult, Tensor) {
        let arch = ArchConfig::mlp(2, 8, 3, 2);
        let (t, s) = build_pair(&arch, seed).unwrap();
        let batch = Tensor::new(vec![3, 2], vec![0.1, -0.2, 1.0, 0.5, -0.7, 0.3]).unwrap();
        (t.forward(&batch).unwrap(), s.forward(&batch).unwrap(), batch)
    }

    #[test]
    fn identical_outputs_score_zero_for_all_metrics() {
        let (t_out, _, _) = pair_outputs(4);
        for metric in [
            UncertaintyMetric::KlPosterior,
            UncertaintyMetric::MsePosterior,
            UncertaintyMetric::MseFeature,
            UncertaintyMetric::L1Feature,
            UncertaintyMetric::AttentionDistance,
        ] {
            let scores = score(&t_out, &t_out, &[0, 1, 2], metric, None).unwrap();
            for s in scores {
                assert_relative_eq!(s.value, 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn kl_direction_is_teacher_first() {
        // regression pin: KL(teacher || student), not the reverse
        let (t_out, s_out, _) = pair_outputs(4);
        let scores = score(&t_out, &s_out, &[0, 1, 2], UncertaintyMetric::KlPosterior, None).unwrap();
        for (r, s) in scores.iter().enumerate() {
            let pt = softmax_vec(t_out.logits.row(r));
            let ps = softmax_vec(s_out.logits.row(r));
            let expect = kl_divergence(&pt, &ps, KL_EPS).unwrap();
            assert_relative_eq!(s.value, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn calibration_at_unit_temperature_is_identity() {
        let (t_out, s_out, _) = pair_outputs(4);
        let plain = score(&t_out, &s_out, &[0, 1, 2], UncertaintyMetric::KlPosterior, None).unwrap();
        let unit = Calibration {
            teacher_temperature: 1.0,
            student_temperature: 1.0,
        };
        let cal = score(&t_out, &s_out, &[0, 1, 2], UncertaintyMetric::KlPosterior, Some(&unit))
            .unwrap();
        for (a, b) in plain.iter().zip(&cal) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
    }

    #[test]
    fn kl_score_invariant_to_logit_shift() {
        let (t_out, s_out, batch) = pair_outputs(4);
        let shift = |fr: &crate::nets::ForwardResult, c: f64| crate::nets::ForwardResult {
            logits: Tensor::new(
                fr.logits.shape().to_vec(),
                fr.logits.data().iter().map(|v| v + c).collect(),
            )
            .unwrap(),
            block_activations: fr.block_activations.clone(),
            penultimate: fr.penultimate.clone(),
        };
        let _ = batch;
        let base = score(&t_out, &s_out, &[0, 1, 2], UncertaintyMetric::KlPosterior, None).unwrap();
        let shifted = score(
            &shift(&t_out, 3.0),
            &shift(&s_out, -1.5),
            &[0, 1, 2],
            UncertaintyMetric::KlPosterior,
            None,
        )
        .unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert_relative_eq!(a.value, b.value, epsilon = 1e-9);
        }
    }

    #[test]
    fn fit_temperature_constant_logits_tie_breaks_low() {
        let logits = vec![vec![0.0, 0.0, 0.0]; 5];
        let labels = vec![0, 1, 2, 0, 1];
        let t = fit_temperature(&logits, &labels, &default_temperature_grid()).unwrap();
        assert_relative_eq!(t, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn fit_temperature_recovers_known_scale() {
        use rand::{Rng, SeedableRng};
        // construct logits = z * k from a known posterior; fitting should
        // recover T within one grid step of k
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let k_true = 2.5;
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..4000 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = softmax_vec(&z);
            // sample label from p
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut y = 2;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    y = i;
                    break;
                }
            }
            logits.push(z.iter().map(|v| v * k_true).collect());
            labels.push(y);
        }
        let t = fit_temperature(&logits, &labels, &default_temperature_grid()).unwrap();
        assert!((t - k_true).abs() <= 0.05 + 1e-9, "fitted {t}");
    }

    #[test]
    fn fit_temperature_achieves_grid_minimal_nll() {
        let logits = vec![vec![4.0, 0.0], vec![0.0, 4.0], vec![5.0, 0.0]];
        let labels = vec![0, 1, 0];
        let grid = default_temperature_grid();
        let t = fit_temperature(&logits, &labels, &grid).unwrap();
        let nll_at = |tt: f64| {
            logits
                .iter()
                .zip(&labels)
                .map(|(z, &y)| {
                    let p = softmax_vec(&z.iter().map(|v| v / tt).collect::<Vec<_>>());
                    -p[y].ln()
                })
                .sum::<f64>()
        };
        let best = nll_at(t);
        for &g in &grid {
            assert!(best <= nll_at(g) + 1e-12);
        }
    }

    #[test]
    fn fit_temperature_empty_errors() {
        assert!(fit_temperature(&[], &[], &default_temperature_grid()).is_err());
    }

    #[test]
    fn baseline_hand_values() {
        let uniform = vec![vec![0.25; 4]];
        let e = baseline_scores(&uniform, BaselineKind::Entropy);
        assert_relative_eq!(e[0], 4f64.ln(), epsilon = 1e-12);

        let onehot = vec![vec![1.0, 0.0, 0.0]];
        assert_relative_eq!(baseline_scores(&onehot, BaselineKind::Entropy)[0], 0.0);
        assert_relative_eq!(baseline_scores(&onehot, BaselineKind::Margin)[0], -1.0);
        assert_relative_eq!(
            baseline_scores(&onehot, BaselineKind::LeastConfidence)[0],
            0.0
        );

        let p = vec![vec![0.5, 0.3, 0.2]];
        assert_relative_eq!(baseline_scores(&p, BaselineKind::Margin)[0], -0.2, epsilon = 1e-12);
    }

    #[test]
    fn scores_rank_as_expected() {
        let scores = vec![
            UncertaintyScore { index: 1, value: 0.1 },
            UncertaintyScore { index: 2, value: 0.9 },
            UncertaintyScore { index: 3, value: 0.5 },
        ];
        let mut ranked = scores.clone();
        ranked.sort_by(|a, b| b.value.partial_cmp(&a.value).unwrap());
        let order: Vec<usize> = ranked.iter().map(|s| s.index).collect();
        assert_eq!(order, vec![2, 3, 1]);
    }
}
