//! Attention maps, the attention-transfer loss, and joint teacher/student
//! training for one AL cycle.
//!
//! The transfer loss sums, over matched blocks, the L2 distance between the
//! L2-normalized attention vectors of student and teacher. The teacher branch
//! is treated as constant: no gradient flows into the teacher, whose own loss
//! is task cross-entropy only.

use crate::error::{AlktError, Result};
use crate::nets::BlockModel;
use crate::optim::{sgd_step, SgdConfig};
use crate::tensor::{softmax_vec, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMetric {
    Attention,
    MseFeature,
    L1Feature,
    KlPosterior,
}

impl std::str::FromStr for TransferMetric {
    type Err = AlktError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(TransferMetric::Attention),
            "mse-feature" => Ok(TransferMetric::MseFeature),
            "l1-feature" => Ok(TransferMetric::L1Feature),
            "kl-posterior" => Ok(TransferMetric::KlPosterior),
            other => Err(AlktError::invalid(format!("unknown transfer metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub transfer_metric: TransferMetric,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 100.0,
            transfer_metric: TransferMetric::Attention,
            epochs: 40,
            batch_size: 32,
            sgd: SgdConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(AlktError::invalid("lambda must be >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AlktError::invalid("epochs and batch-size must be >= 1"));
        }
        self.sgd.validate()
    }
}

/// Per-epoch curves plus final train accuracies, serializable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub teacher_task_loss: Vec<f64>,
    pub student_task_loss: Vec<f64>,
    pub transfer_loss: Vec<f64>,
    pub teacher_accuracy: Vec<f64>,
    pub student_accuracy: Vec<f64>,
}

impl TrainReport {
    pub fn final_teacher_accuracy(&self) -> f64 {
        *self.teacher_accuracy.last().unwrap_or(&0.0)
    }
}

/// Attention map of one sample's activation: entry j = sum over channels of
/// A[c,j]^2. Rank-1 input is taken as a single channel over its own units.
pub fn attention_map(activation: &Tensor) -> Vec<f64> {
    let shape = activation.shape();
    let data = activation.data();
    if shape.len() == 1 {
        return data.iter().map(|v| v * v).collect();
    }
    let c = shape[0];
    let spatial: usize = shape[1..].iter().product();
    let mut out = vec![0.0; spatial];
    for ci in 0..c {
        for j in 0..spatial {
            let a = data[ci * spatial + j];
            out[j] += a * a;
        }
    }
    out
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// L2 distance between L2-normalized attention maps (zero-norm maps pass
/// through unnormalized).
pub fn attention_map_distance(map_s: &[f64], map_t: &[f64]) -> Result<f64> {
    if map_s.len() != map_t.len() {
        return Err(AlktError::ShapeMismatch {
            op: "attention-map-distance",
            lhs: vec![map_s.len()],
            rhs: vec![map_t.len()],
        });
    }
    let a = normalize(map_s);
    let b = normalize(map_t);
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Split a batched activation (`[b, w]` or `[b, c, h, w]`) into per-sample
/// attention maps.
fn batch_attention_maps(act: &Tensor) -> Vec<Vec<f64>> {
    let b = act.shape()[0];
    let inner: usize = act.shape()[1..].iter().product();
    (0..b)
        .map(|i| {
            let sample = Tensor::new(
                act.shape()[1..].to_vec(),
                act.data()[i * inner..(i + 1) * inner].to_vec(),
            )
            .expect("slice matches shape");
            attention_map(&sample)
        })
        .collect()
}

/// Per-sample transfer distances, summed over blocks.
pub fn attention_distances(
    student_acts: &[Tensor],
    teacher_acts: &[Tensor],
) -> Result<Vec<f64>> {
    if student_acts.len() != teacher_acts.len() {
        return Err(AlktError::ShapeMismatch {
            op: "transfer-loss",
            lhs: vec![student_acts.len()],
            rhs: vec![teacher_acts.len()],
        });
    }
    let b = student_acts
        .first()
        .map(|t| t.shape()[0])
        .unwrap_or_default();
    let mut out = vec![0.0; b];
    for (s, t) in student_acts.iter().zip(teacher_acts) {
        if s.shape() != t.shape() {
            return Err(AlktError::ShapeMismatch {
                op: "transfer-loss",
                lhs: s.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let ms = batch_attention_maps(s);
        let mt = batch_attention_maps(t);
        for i in 0..b {
            out[i] += attention_map_distance(&ms[i], &mt[i])?;
        }
    }
    Ok(out)
}

/// Mean over the batch of the per-sample transfer loss.
pub fn transfer_loss(student_acts: &[Tensor], teacher_acts: &[Tensor]) -> Result<f64> {
    let d = attention_distances(student_acts, teacher_acts)?;
    if d.is_empty() {
        return Ok(0.0);
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Graph node for a block's normalized attention rows `[b, spatial]`.
fn attention_rows_graph(tape: &mut Tape, act: Var) -> Result<Var> {
    let shape = tape.shape(act).to_vec();
    let rows = match shape.len() {
        2 => tape.square(act),
        _ => {
            let b = shape[0];
            let c = shape[1];
            let spatial: usize = shape[2..].iter().product();
            let r = tape.reshape(act, vec![b, c, spatial])?;
            let sq = tape.square(r);
            tape.sum_axis(sq, 1)?
        }
    };
    tape.row_l2_normalize(rows)
}

/// Differentiable transfer loss: student activations are graph vars, teacher
/// activations enter as constants.
pub fn transfer_loss_graph(
    tape: &mut Tape,
    student_acts: &[Var],
    teacher_acts: &[Tensor],
) -> Result<Var> {
    if student_acts.len() != teacher_acts.len() {
        return Err(AlktError::ShapeMismatch {
            op: "transfer-loss",
            lhs: vec![student_acts.len()],
            rhs: vec![teacher_acts.len()],
        });
    }
    let b = teacher_acts[0].shape()[0];
    let mut per_sample: Option<Var> = None;
    for (&s_act, t_act) in student_acts.iter().zip(teacher_acts) {
        if tape.shape(s_act) != t_act.shape() {
            return Err(AlktError::ShapeMismatch {
                op: "transfer-loss",
                lhs: tape.shape(s_act).to_vec(),
                rhs: t_act.shape().to_vec(),
            });
        }
        let s_rows = attention_rows_graph(tape, s_act)?;
        let t_maps = batch_attention_maps(t_act);
        let spatial = t_maps[0].len();
        let t_data: Vec<f64> = t_maps.iter().flat_map(|m| normalize(m)).collect();
        let t_rows = tape.leaf_from(vec![b, spatial], t_data)?;
        let diff = tape.sub(s_rows, t_rows)?;
        let sq = tape.square(diff);
        let sums = tape.sum_axis(sq, 1)?;
        let d = tape.sqrt_guard(sums);
        per_sample = Some(match per_sample {
            None => d,
            Some(acc) => tape.add(acc, d)?,
        });
    }
    let total = tape.sum_all(per_sample.expect("at least one block"));
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// MSE/L1 over concatenated flattened block activations, teacher constant.
fn feature_loss_graph(
    tape: &mut Tape,
    student_acts: &[Var],
    teacher_acts: &[Tensor],
    l1: bool,
) -> Result<Var> {
    let counts: Vec<usize> = teacher_acts.iter().map(|t| t.numel()).collect();
    let total: usize = counts.iter().sum();
    let mut acc: Option<Var> = None;
    for ((&s_act, t_act), &n) in student_acts.iter().zip(teacher_acts).zip(&counts) {
        let t = tape.leaf(t_act);
        let per_block = if l1 {
            tape.l1(s_act, t)?
        } else {
            tape.mse(s_act, t)?
        };
        let weighted = tape.scale(per_block, n as f64 / total as f64);
        acc = Some(match acc {
            None => weighted,
            Some(a) => tape.add(a, weighted)?,
        });
    }
    Ok(acc.expect("at least one block"))
}

/// KL(teacher || student) over posteriors, mean over the batch, teacher
/// constant.
fn kl_posterior_loss_graph(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
) -> Result<Var> {
    let b = teacher_logits.shape()[0];
    let k = teacher_logits.shape()[1];
    let log_p_s = tape.log_softmax(student_logits)?;
    let mut weights = Vec::with_capacity(b * k);
    let mut teacher_entropy_term = 0.0;
    for r in 0..b {
        let p = softmax_vec(teacher_logits.row(r));
        for &pi in &p {
            weights.push(-pi / b as f64);
            if pi > 0.0 {
                teacher_entropy_term += pi * pi.ln() / b as f64;
            }
        }
    }
    let w = tape.leaf_from(vec![b, k], weights)?;
    let prod = tape.mul(w, log_p_s)?;
    let ce = tape.sum_all(prod);
    let offset = tape.leaf_from(vec![1], vec![teacher_entropy_term])?;
    tape.add(ce, offset)
}

/// Jointly train teacher (task loss) and student (task + lambda * transfer)
/// on the labeled set, sharing shuffled batch order.
pub fn train_cycle(
    teacher: &mut BlockModel,
    student: &mut BlockModel,
    features: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = features.shape()[0];
    if n == 0 || labels.is_empty() {
        return Err(AlktError::invalid("labeled set is empty"));
    }
    if labels.len() != n {
        return Err(AlktError::invalid(format!(
            "{n} samples but {} labels",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        teacher_task_loss: Vec::with_capacity(cfg.epochs),
        student_task_loss: Vec::with_capacity(cfg.epochs),
        transfer_loss: Vec::with_capacity(cfg.epochs),
        teacher_accuracy: Vec::with_capacity(cfg.epochs),
        student_accuracy: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut t_loss_sum = 0.0;
        let mut s_loss_sum = 0.0;
        let mut trans_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = features.gather_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            // teacher: task loss only
            let mut tape_t = Tape::new();
            let gf_t = teacher.forward_graph(&mut tape_t, &xb, None)?;
            let logp_t = tape_t.log_softmax(gf_t.logits)?;
            let loss_t = tape_t.cross_entropy(logp_t, &yb)?;
            let loss_t_val = tape_t.value(loss_t)[0];
            if !loss_t_val.is_finite() {
                return Err(AlktError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            tape_t.backward(loss_t)?;
            let teacher_acts: Vec<Tensor> = gf_t
                .block_activations
                .iter()
                .map(|&v| tape_t.tensor(v))
                .collect();
            let teacher_logits = tape_t.tensor(gf_t.logits);
            for &(pi, var) in &gf_t.param_vars {
                let g = tape_t.grad(var);
                for (dst, &src) in teacher.params[pi].grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            sgd_step(&mut teacher.params, &cfg.sgd, epoch, cfg.epochs);

            // student: task loss + lambda * transfer
            let mut tape_s = Tape::new();
            let gf_s = student.forward_graph(&mut tape_s, &xb, None)?;
            let logp_s = tape_s.log_softmax(gf_s.logits)?;
            let task_s = tape_s.cross_entropy(logp_s, &yb)?;
            let s_task_val = tape_s.value(task_s)[0];
            let (total, trans_val) = if cfg.lambda == 0.0 {
                (task_s, 0.0)
            } else {
                let trans = match cfg.transfer_metric {
                    TransferMetric::Attention => {
                        transfer_loss_graph(&mut tape_s, &gf_s.block_activations, &teacher_acts)?
                    }
                    TransferMetric::MseFeature => {
                        feature_loss_graph(&mut tape_s, &gf_s.block_activations, &teacher_acts, false)?
                    }
                    TransferMetric::L1Feature => {
                        feature_loss_graph(&mut tape_s, &gf_s.block_activations, &teacher_acts, true)?
                    }
                    TransferMetric::KlPosterior => {
                        kl_posterior_loss_graph(&mut tape_s, gf_s.logits, &teacher_logits)?
                    }
                };
                let trans_val = tape_s.value(trans)[0];
                let scaled = tape_s.scale(trans, cfg.lambda);
                (tape_s.add(task_s, scaled)?, trans_val)
            };
            let total_val = tape_s.value(total)[0];
            if !total_val.is_finite() {
                return Err(AlktError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            tape_s.backward(total)?;
            for &(pi, var) in &gf_s.param_vars {
                let g = tape_s.grad(var);
                for (dst, &src) in student.params[pi].grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            sgd_step(&mut student.params, &cfg.sgd, epoch, cfg.epochs);

            t_loss_sum += loss_t_val;
            s_loss_sum += s_task_val;
            trans_sum += trans_val;
            batches += 1;
        }
        report.teacher_task_loss.push(t_loss_sum / batches as f64);
        report.student_task_loss.push(s_loss_sum / batches as f64);
        report.transfer_loss.push(trans_sum / batches as f64);
        report
            .teacher_accuracy
            .push(train_accuracy(teacher, features, labels, cfg.batch_size)?);
        report
            .student_accuracy
            .push(train_accuracy(student, features, labels, cfg.batch_size)?);
    }
    Ok(report)
}

fn train_accuracy(
    model: &BlockModel,
    features: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let n = features.shape()[0];
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let idxs: Vec<usize> = (start..end).collect();
        let fr = model.forward(&features.gather_rows(&idxs))?;
        for (r, &i) in idxs.iter().enumerate() {
            let row = fr.logits.row(r);
            let pred = argmax(row);
            if pred == labels[i] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Index of the max value, first occurrence on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
