//! Active-learning cycle driver: per-cycle training and evaluation, run
//! artifacts (CSV + manifest), the posterior-bound diagnostic, and the
//! selected-data study.

use crate::datasets::{Dataset, DatasetManifest};
use crate::distill::{train_cycle, DistillConfig};
use crate::error::{AlktError, Result};
use crate::nets::{build_pair, ArchConfig, BlockModel};
use crate::selection::{
    select_with_strategy, BudgetSchedule, PoolState, SelectionContext, Strategy,
};
use crate::tensor::{softmax_vec, Tensor};
use crate::uncertainty::{
    default_temperature_grid, fit_temperature, Calibration, UncertaintyMetric,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// One row of a run's learning curve. `selected` holds the indices annotated
/// to reach this budget point (the initial labeled set for cycle 0), so the
/// cycle-0 record depends only on the data seed, never on the strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub budget_fraction: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// train minus test accuracy, in percentage points.
    pub gap_pp: f64,
    pub per_class_accuracy: Vec<f64>,
    pub selected: Vec<usize>,
    pub wall_time_secs: f64,
}

/// L2 distances between posteriors and the one-hot label for one sample.
#[derive(Debug, Clone)]
pub struct BoundRecord {
    pub index: usize,
    pub d_teacher_student: f64,
    pub student_to_label: f64,
    pub teacher_to_label: f64,
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub records: Vec<BoundRecord>,
    /// Pearson correlation between the teacher-student distance and the
    /// bound it contributes to (distance plus student-to-label).
    pub pearson: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Classes absent from the split report 0.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`, counts summing to the split size.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub cycle: usize,
    pub index: usize,
    pub score: f64,
    pub strategy: Strategy,
}

/// Everything one run needs beyond the dataset and the strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    pub schedule: BudgetSchedule,
    pub distill: DistillConfig,
    pub metric: UncertaintyMetric,
    pub calibrate: bool,
    pub mc_passes: usize,
    pub mc_drop_prob: f64,
    pub data_seed: u64,
    pub init_seed: u64,
    pub strategy_seed: u64,
    pub eval_batch: usize,
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn new(arch: ArchConfig) -> Self {
        ExperimentConfig {
            arch,
            schedule: BudgetSchedule::default(),
            distill: DistillConfig::default(),
            metric: UncertaintyMetric::KlPosterior,
            calibrate: false,
            mc_passes: 10,
            mc_drop_prob: 0.1,
            data_seed: 0,
            init_seed: 0,
            strategy_seed: 0,
            eval_batch: 256,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.schedule.validate()?;
        self.distill.validate()?;
        if self.eval_batch == 0 {
            return Err(AlktError::invalid("eval batch must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub records: Vec<CycleRecord>,
    /// `(cycle, record)` for every sample selected across the run.
    pub bounds: Vec<(usize, BoundRecord)>,
    pub trace: Vec<TraceRow>,
    pub final_labeled: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub strategy: Strategy,
    pub config: ExperimentConfig,
    pub dataset: DatasetManifest,
    pub git_describe: String,
}

/// Top-1 accuracy, per-class accuracy, and confusion counts of `model` on
/// the given split indices.
pub fn evaluate(model: &BlockModel, dataset: &Dataset, split: &[usize]) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(AlktError::invalid("cannot evaluate on an empty split"));
    }
    let c = dataset.num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    for chunk in split.chunks(256) {
        let xb = dataset.features().gather_rows(chunk);
        let out = model.forward(&xb)?;
        let labels = dataset.labels_for(chunk);
        for (r, &y) in labels.iter().enumerate() {
            let pred = crate::distill::argmax(out.logits.row(r));
            confusion[y][pred] += 1;
        }
    }
    let mut correct = 0usize;
    let mut per_class = vec![0.0; c];
    for (y, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        correct += row[y];
        if total > 0 {
            per_class[y] = row[y] as f64 / total as f64;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / split.len() as f64,
        per_class_accuracy: per_class,
        confusion,
    })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Posterior triangle-inequality diagnostic over a set of samples with known
/// labels. Distances are L2 over softmax posteriors and one-hot labels — a
/// true metric, unlike the KL score used for selection — so every record
/// must satisfy `teacher_to_label <= d + student_to_label` up to 1e-9.
pub fn bound_diagnostic(
    teacher: &BlockModel,
    student: &BlockModel,
    features: &Tensor,
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<BoundReport> {
    if indices.len() != labels.len() || indices.len() != features.shape()[0] {
        return Err(AlktError::invalid("bound diagnostic inputs disagree on length"));
    }
    let t_out = teacher.forward(features)?;
    let s_out = student.forward(features)?;
    let mut records = Vec::with_capacity(indices.len());
    for (r, (&index, &y)) in indices.iter().zip(labels).enumerate() {
        let p_t = softmax_vec(t_out.logits.row(r));
        let p_s = softmax_vec(s_out.logits.row(r));
        let mut onehot = vec![0.0; num_classes];
        onehot[y] = 1.0;
        let rec = BoundRecord {
            index,
            d_teacher_student: l2(&p_t, &p_s),
            student_to_label: l2(&p_s, &onehot),
            teacher_to_label: l2(&p_t, &onehot),
        };
        if rec.teacher_to_label > rec.d_teacher_student + rec.student_to_label + 1e-9 {
            return Err(AlktError::invalid(format!(
                "posterior bound violated at index {index}"
            )));
        }
        records.push(rec);
    }
    let xs: Vec<f64> = records.iter().map(|r| r.d_teacher_student).collect();
    let ys: Vec<f64> = records
        .iter()
        .map(|r| r.d_teacher_student + r.student_to_label)
        .collect();
    Ok(BoundReport {
        pearson: pearson(&xs, &ys),
        records,
    })
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

fn fit_calibration(
    teacher: &BlockModel,
    student: &BlockModel,
    features: &Tensor,
    labels: &[usize],
) -> Result<Calibration> {
    let grid = default_temperature_grid();
    let t_logits: Vec<Vec<f64>> = {
        let out = teacher.forward(features)?;
        (0..labels.len()).map(|r| out.logits.row(r).to_vec()).collect()
    };
    let s_logits: Vec<Vec<f64>> = {
        let out = student.forward(features)?;
        (0..labels.len()).map(|r| out.logits.row(r).to_vec()).collect()
    };
    Ok(Calibration {
        teacher_temperature: fit_temperature(&t_logits, labels, &grid)?,
        student_temperature: fit_temperature(&s_logits, labels, &grid)?,
    })
}

/// Run the full AL protocol for one strategy: per budget point, train a
/// fresh teacher/student pair on the labeled set, evaluate, then score,
/// select and annotate the next batch. Artifacts (when `out_dir` is given)
/// are reflushed after every cycle, so a failing run leaves the completed
/// cycles on disk.
pub fn run_experiment(
    dataset: &Dataset,
    strategy: Strategy,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let pool_n = dataset.train_pool.len();
    let mut pool = PoolState::init_over(
        dataset.train_pool.clone(),
        cfg.schedule.initial_fraction,
        cfg.data_seed,
    )?;
    let points = cfg.schedule.budget_points();
    let quota = cfg.schedule.quota(pool_n);
    let mut out = RunOutput {
        strategy,
        records: Vec::new(),
        bounds: Vec::new(),
        trace: Vec::new(),
        final_labeled: Vec::new(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let manifest = RunManifest {
            strategy,
            config: cfg.clone(),
            dataset: dataset.manifest(),
            git_describe: git_describe(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
    }
    let mut incoming = pool.labeled().to_vec();
    for (cycle, &frac) in points.iter().enumerate() {
        let started = Instant::now();
        let cycle_u = cycle as u64;
        let (mut teacher, mut student) =
            build_pair(&cfg.arch, cfg.init_seed.wrapping_add(cycle_u))?;
        let labeled = pool.labeled().to_vec();
        let feats = dataset.features().gather_rows(&labeled);
        let labels = dataset.labels_for(&labeled);
        let train_seed = cfg.init_seed.wrapping_add(0x7000).wrapping_add(cycle_u);
        train_cycle(&mut teacher, &mut student, &feats, &labels, &cfg.distill, train_seed)?;
        let test_eval = evaluate(&teacher, dataset, &dataset.test)?;
        let train_eval = evaluate(&teacher, dataset, &labeled)?;

        let last = cycle + 1 == points.len();
        if !last {
            let sel_seed = cfg.strategy_seed.wrapping_add(cycle_u);
            let candidates = pool.draw_subset(quota, sel_seed)?;
            let calibration = if cfg.calibrate {
                Some(fit_calibration(&teacher, &student, &feats, &labels)?)
            } else {
                None
            };
            let ctx = SelectionContext {
                teacher: &teacher,
                student: &student,
                features: dataset.features(),
                labeled: &labeled,
                candidates: &candidates,
                quota,
                metric: cfg.metric,
                calibration,
                mc_passes: cfg.mc_passes,
                mc_drop_prob: cfg.mc_drop_prob,
                seed: sel_seed.wrapping_add(0x9e37_79b9),
                batch_size: cfg.eval_batch,
                threads: cfg.threads,
            };
            let outcome = select_with_strategy(strategy, &ctx)?;
            for &index in &outcome.selected {
                let score = outcome
                    .scores
                    .iter()
                    .find(|s| s.index == index)
                    .map(|s| s.value)
                    .unwrap_or(0.0);
                out.trace.push(TraceRow {
                    cycle,
                    index,
                    score,
                    strategy,
                });
            }
            pool.annotate(&outcome.selected)?;
            let sel_feats = dataset.features().gather_rows(&outcome.selected);
            let sel_labels = dataset.labels_for(&outcome.selected);
            let report = bound_diagnostic(
                &teacher,
                &student,
                &sel_feats,
                &outcome.selected,
                &sel_labels,
                dataset.num_classes,
            )?;
            out.bounds
                .extend(report.records.into_iter().map(|r| (cycle, r)));
            out.records.push(CycleRecord {
                cycle,
                budget_fraction: frac,
                train_accuracy: train_eval.accuracy,
                test_accuracy: test_eval.accuracy,
                gap_pp: (train_eval.accuracy - test_eval.accuracy) * 100.0,
                per_class_accuracy: test_eval.per_class_accuracy,
                selected: std::mem::replace(&mut incoming, outcome.selected),
                wall_time_secs: started.elapsed().as_secs_f64(),
            });
        } else {
            out.records.push(CycleRecord {
                cycle,
                budget_fraction: frac,
                train_accuracy: train_eval.accuracy,
                test_accuracy: test_eval.accuracy,
                gap_pp: (train_eval.accuracy - test_eval.accuracy) * 100.0,
                per_class_accuracy: test_eval.per_class_accuracy,
                selected: std::mem::take(&mut incoming),
                wall_time_secs: started.elapsed().as_secs_f64(),
            });
        }
        if let Some(dir) = out_dir {
            flush_artifacts(dir, &out)?;
        }
    }
    out.final_labeled = pool.labeled().to_vec();
    Ok(out)
}

fn flush_artifacts(dir: &Path, out: &RunOutput) -> Result<()> {
    write_records_csv(&dir.join("records.csv"), &out.records)?;
    write_bounds_csv(&dir.join("bounds.csv"), &out.bounds)?;
    write_trace_csv(&dir.join("selection_trace.csv"), &out.trace)?;
    Ok(())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Wall time is deliberately not written: the file must be bitwise
/// reproducible across runs of one manifest.
pub fn write_records_csv(path: &Path, records: &[CycleRecord]) -> Result<()> {
    let mut buf =
        String::from("cycle,budget_fraction,train_accuracy,test_accuracy,gap_pp,per_class_accuracy,selected\n");
    for r in records {
        buf.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.cycle,
            r.budget_fraction,
            r.train_accuracy,
            r.test_accuracy,
            r.gap_pp,
            join_f64(&r.per_class_accuracy),
            join_usize(&r.selected),
        ));
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<CycleRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(AlktError::parse(format!(
                "records.csv line {}: expected 7 columns, got {}",
                lineno + 1,
                cols.len()
            )));
        }
        let bad = |c: &str| AlktError::parse(format!("records.csv line {}: {c:?}", lineno + 1));
        let parse_list_f = |s: &str| -> Result<Vec<f64>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(';')
                .map(|t| t.parse::<f64>().map_err(|_| bad(t)))
                .collect()
        };
        let parse_list_u = |s: &str| -> Result<Vec<usize>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(';')
                .map(|t| t.parse::<usize>().map_err(|_| bad(t)))
                .collect()
        };
        out.push(CycleRecord {
            cycle: cols[0].parse().map_err(|_| bad(cols[0]))?,
            budget_fraction: cols[1].parse().map_err(|_| bad(cols[1]))?,
            train_accuracy: cols[2].parse().map_err(|_| bad(cols[2]))?,
            test_accuracy: cols[3].parse().map_err(|_| bad(cols[3]))?,
            gap_pp: cols[4].parse().map_err(|_| bad(cols[4]))?,
            per_class_accuracy: parse_list_f(cols[5])?,
            selected: parse_list_u(cols[6])?,
            wall_time_secs: 0.0,
        });
    }
    Ok(out)
}

pub fn write_bounds_csv(path: &Path, rows: &[(usize, BoundRecord)]) -> Result<()> {
    let mut buf = String::from("cycle,index,d_teacher_student,student_to_label,teacher_to_label\n");
    for (cycle, r) in rows {
        buf.push_str(&format!(
            "{},{},{},{},{}\n",
            cycle, r.index, r.d_teacher_student, r.student_to_label, r.teacher_to_label
        ));
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut buf = String::from("cycle,index,score,strategy\n");
    for r in rows {
        buf.push_str(&format!(
            "{},{},{},{}\n",
            r.cycle,
            r.index,
            r.score,
            r.strategy.name()
        ));
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// One strategy's row in the selected-data study.
#[derive(Debug, Clone)]
pub struct StudyEntry {
    pub strategy: Strategy,
    /// Current-model accuracy on the samples the strategy picked
    /// (1.0 by convention when the extra quota is zero).
    pub selected_accuracy: f64,
    /// Test accuracy after retraining on initial + selected.
    pub retrained_test_accuracy: f64,
    pub selected: Vec<usize>,
}

/// Two-phase study: train on a random initial split, let each strategy pick
/// `extra_quota` more samples, then report (a) the current model's accuracy
/// on each picked set and (b) test accuracy after retraining on the union.
/// Candidates come from the usual 10x subset rule unless `full_pool` is set.
pub fn selected_data_study(
    dataset: &Dataset,
    initial_fraction: f64,
    extra_quota: usize,
    strategies: &[Strategy],
    cfg: &ExperimentConfig,
    full_pool: bool,
) -> Result<Vec<StudyEntry>> {
    cfg.validate()?;
    let pool = PoolState::init_over(dataset.train_pool.clone(), initial_fraction, cfg.data_seed)?;
    if extra_quota > pool.unlabeled().len() {
        return Err(AlktError::invalid(format!(
            "extra quota {extra_quota} exceeds the unlabeled pool ({})",
            pool.unlabeled().len()
        )));
    }
    let labeled = pool.labeled().to_vec();
    let feats = dataset.features().gather_rows(&labeled);
    let labels = dataset.labels_for(&labeled);
    let (mut teacher, mut student) = build_pair(&cfg.arch, cfg.init_seed)?;
    let train_seed = cfg.init_seed.wrapping_add(0x7000);
    train_cycle(&mut teacher, &mut student, &feats, &labels, &cfg.distill, train_seed)?;

    let mut entries = Vec::new();
    for &strategy in strategies {
        let selected = if extra_quota == 0 {
            Vec::new()
        } else {
            let candidates = if full_pool {
                pool.unlabeled().to_vec()
            } else {
                pool.draw_subset(extra_quota, cfg.strategy_seed)?
            };
            let calibration = if cfg.calibrate {
                Some(fit_calibration(&teacher, &student, &feats, &labels)?)
            } else {
                None
            };
            let ctx = SelectionContext {
                teacher: &teacher,
                student: &student,
                features: dataset.features(),
                labeled: &labeled,
                candidates: &candidates,
                quota: extra_quota,
                metric: cfg.metric,
                calibration,
                mc_passes: cfg.mc_passes,
                mc_drop_prob: cfg.mc_drop_prob,
                seed: cfg.strategy_seed.wrapping_add(0x9e37_79b9),
                batch_size: cfg.eval_batch,
                threads: cfg.threads,
            };
            select_with_strategy(strategy, &ctx)?.selected
        };
        let selected_accuracy = if selected.is_empty() {
            1.0
        } else {
            evaluate(&teacher, dataset, &selected)?.accuracy
        };
        let mut union = labeled.clone();
        union.extend_from_slice(&selected);
        union.sort_unstable();
        let union_feats = dataset.features().gather_rows(&union);
        let union_labels = dataset.labels_for(&union);
        let (mut re_teacher, mut re_student) =
            build_pair(&cfg.arch, cfg.init_seed.wrapping_add(1))?;
        train_cycle(
            &mut re_teacher,
            &mut re_student,
            &union_feats,
            &union_labels,
            &cfg.distill,
            train_seed.wrapping_add(1),
        )?;
        entries.push(StudyEntry {
            strategy,
            selected_accuracy,
            retrained_test_accuracy: evaluate(&re_teacher, dataset, &dataset.test)?.accuracy,
            selected,
        });
    }
    Ok(entries)
}

/// Train a different (typically deeper or wider) teacher architecture on the
/// final labeled set each strategy produced; returns test accuracy per
/// strategy.
pub fn transfer_to_deeper_study(
    dataset: &Dataset,
    traces: &[(Strategy, Vec<usize>)],
    deeper: &ArchConfig,
    cfg: &ExperimentConfig,
) -> Result<Vec<(Strategy, f64)>> {
    deeper.validate()?;
    let mut out = Vec::new();
    for (strategy, labeled) in traces {
        let feats = dataset.features().gather_rows(labeled);
        let labels = dataset.labels_for(labeled);
        let (mut teacher, mut student) = build_pair(deeper, cfg.init_seed)?;
        train_cycle(
            &mut teacher,
            &mut student,
            &feats,
            &labels,
            &cfg.distill,
            cfg.init_seed.wrapping_add(0x7000),
        )?;
        out.push((*strategy, evaluate(&teacher, dataset, &dataset.test)?.accuracy));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_blobs;
    use approx::assert_relative_eq;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(ArchConfig::mlp(2, 8, 3, 2));
        cfg.distill.epochs = 3;
        cfg.distill.batch_size = 16;
        cfg.data_seed = 7;
        cfg.init_seed = 11;
        cfg.strategy_seed = 13;
        cfg
    }

    fn tiny_blobs() -> Dataset {
        make_blobs(&[40, 40, 40], 2, 0.3, 5).unwrap()
    }

    #[test]
    fn evaluate_constant_predictor_per_class() {
        let data = tiny_blobs();
        let arch = ArchConfig::mlp(1, 4, 3, 2);
        let mut model = BlockModel::new(&arch, 1, 0).unwrap();
        // zero all weights, then bias the head hard toward class 1
        for p in model.params.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let head_bias = model.params.len() - 1;
        model.params[head_bias].data = vec![0.0, 50.0, 0.0];
        let eval = evaluate(&model, &data, &data.test).unwrap();
        assert_eq!(eval.per_class_accuracy, vec![0.0, 1.0, 0.0]);
        let total: usize = eval.confusion.iter().flatten().sum();
        assert_eq!(total, data.test.len());
    }

    #[test]
    fn balanced_split_accuracy_is_mean_of_per_class() {
        let data = tiny_blobs();
        // test split is stratified, so it is balanced here
        let arch = ArchConfig::mlp(1, 8, 3, 2);
        let model = BlockModel::new(&arch, 1, 3).unwrap();
        let eval = evaluate(&model, &data, &data.test).unwrap();
        let mean: f64 =
            eval.per_class_accuracy.iter().sum::<f64>() / eval.per_class_accuracy.len() as f64;
        assert_relative_eq!(eval.accuracy, mean, epsilon = 1e-12);
    }

    #[test]
    fn evaluate_empty_split_errors() {
        let data = tiny_blobs();
        let model = BlockModel::new(&ArchConfig::mlp(1, 4, 3, 2), 1, 0).unwrap();
        assert!(evaluate(&model, &data, &[]).is_err());
    }

    #[test]
    fn bound_identical_models_collapse() {
        let data = tiny_blobs();
        let arch = ArchConfig::mlp(2, 8, 3, 2);
        let m = BlockModel::new(&arch, 2, 9).unwrap();
        let idxs: Vec<usize> = data.test[..10].to_vec();
        let feats = data.features().gather_rows(&idxs);
        let labels = data.labels_for(&idxs);
        let report = bound_diagnostic(&m, &m, &feats, &idxs, &labels, 3).unwrap();
        for r in &report.records {
            assert_eq!(r.d_teacher_student, 0.0);
            assert_eq!(r.teacher_to_label, r.student_to_label);
        }
    }

    #[test]
    fn bound_hand_value() {
        // p_T=[1,0], p_S=[0.5,0.5], label=0
        let p_t = [1.0, 0.0];
        let p_s = [0.5, 0.5];
        let y = [1.0, 0.0];
        assert_relative_eq!(l2(&p_t, &p_s), 0.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(l2(&p_s, &y), 0.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(l2(&p_t, &y), 0.0, epsilon = 1e-12);
        assert!(l2(&p_t, &y) <= l2(&p_t, &p_s) + l2(&p_s, &y) + 1e-9);
    }

    #[test]
    fn bound_holds_for_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s1: f64 = raw[..2].iter().sum();
            let s2: f64 = raw[2..].iter().sum();
            let p_t = [raw[0] / s1, raw[1] / s1];
            let p_s = [raw[2] / s2, raw[3] / s2];
            let y = [1.0, 0.0];
            assert!(l2(&p_t, &y) <= l2(&p_t, &p_s) + l2(&p_s, &y) + 1e-9);
        }
    }

    #[test]
    fn schedule_gives_expected_record_counts() {
        let data = tiny_blobs();
        let mut cfg = tiny_cfg();
        cfg.schedule = BudgetSchedule {
            initial_fraction: 0.10,
            final_fraction: 0.30,
            step: 0.05,
        };
        let out = run_experiment(&data, Strategy::Random, &cfg, None).unwrap();
        assert_eq!(out.records.len(), 5);
        let fracs: Vec<f64> = out.records.iter().map(|r| r.budget_fraction).collect();
        assert_eq!(fracs, cfg.schedule.budget_points());
        for (got, want) in fracs.iter().zip([0.10, 0.15, 0.20, 0.25, 0.30]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn cycle0_is_strategy_seed_invariant_for_random() {
        let data = tiny_blobs();
        let mut a = tiny_cfg();
        a.schedule = BudgetSchedule {
            initial_fraction: 0.10,
            final_fraction: 0.15,
            step: 0.05,
        };
        let mut b = a.clone();
        b.strategy_seed = 999;
        let ra = run_experiment(&data, Strategy::Random, &a, None).unwrap();
        let rb = run_experiment(&data, Strategy::Random, &b, None).unwrap();
        assert_eq!(ra.records[0].selected, rb.records[0].selected);
        assert_eq!(
            ra.records[0].test_accuracy.to_bits(),
            rb.records[0].test_accuracy.to_bits()
        );
        assert_eq!(
            ra.records[0].train_accuracy.to_bits(),
            rb.records[0].train_accuracy.to_bits()
        );
    }

    #[test]
    fn labeled_grows_by_quota_each_cycle() {
        let data = tiny_blobs();
        let cfg = tiny_cfg();
        let pool_n = data.train_pool.len();
        let quota = cfg.schedule.quota(pool_n);
        let initial = crate::selection::round_half_up(cfg.schedule.initial_fraction * pool_n as f64);
        let out = run_experiment(&data, Strategy::Proposed, &cfg, None).unwrap();
        let cycles = out.records.len() - 1;
        assert_eq!(out.final_labeled.len(), initial + cycles * quota);
        for r in &out.records {
            assert!(r.train_accuracy >= 0.0 && r.train_accuracy <= 1.0);
            assert!(r.test_accuracy >= 0.0 && r.test_accuracy <= 1.0);
            assert_relative_eq!(
                r.gap_pp,
                (r.train_accuracy - r.test_accuracy) * 100.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn artifacts_written_and_reread() {
        let data = tiny_blobs();
        let mut cfg = tiny_cfg();
        cfg.schedule = BudgetSchedule {
            initial_fraction: 0.10,
            final_fraction: 0.20,
            step: 0.05,
        };
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&data, Strategy::Entropy, &cfg, Some(dir.path())).unwrap();
        for f in ["records.csv", "bounds.csv", "selection_trace.csv", "manifest.json"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let back = read_records_csv(&dir.path().join("records.csv")).unwrap();
        assert_eq!(back.len(), out.records.len());
        for (a, b) in back.iter().zip(&out.records) {
            assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
            assert_eq!(a.selected, b.selected);
        }
    }

    #[test]
    fn study_reports_both_phases_and_zero_quota_identity() {
        let data = tiny_blobs();
        let cfg = tiny_cfg();
        let entries = selected_data_study(
            &data,
            0.2,
            10,
            &[Strategy::Random, Strategy::Proposed],
            &cfg,
            false,
        )
        .unwrap();
        assert_eq!(entries.len(), 2);
        for e in &entries {
            assert_eq!(e.selected.len(), 10);
            assert!(e.selected_accuracy >= 0.0 && e.selected_accuracy <= 1.0);
            assert!(e.retrained_test_accuracy > 0.0);
        }
        let zero = selected_data_study(&data, 0.2, 0, &[Strategy::Random, Strategy::Proposed], &cfg, false)
            .unwrap();
        assert_eq!(
            zero[0].retrained_test_accuracy.to_bits(),
            zero[1].retrained_test_accuracy.to_bits()
        );
    }

    #[test]
    fn deeper_study_same_arch_equals_plain_retrain() {
        let data = tiny_blobs();
        let cfg = tiny_cfg();
        let labeled: Vec<usize> = data.train_pool[..60].to_vec();
        let traces = vec![
            (Strategy::Random, labeled.clone()),
            (Strategy::Proposed, labeled.clone()),
        ];
        let got = transfer_to_deeper_study(&data, &traces, &cfg.arch, &cfg).unwrap();
        assert_eq!(got.len(), 2);
        // same labeled set and same arch: identical accuracy per strategy row
        assert_eq!(got[0].1.to_bits(), got[1].1.to_bits());

        let feats = data.features().gather_rows(&labeled);
        let labels = data.labels_for(&labeled);
        let (mut t, mut s) = build_pair(&cfg.arch, cfg.init_seed).unwrap();
        train_cycle(&mut t, &mut s, &feats, &labels, &cfg.distill, cfg.init_seed.wrapping_add(0x7000))
            .unwrap();
        let plain = evaluate(&t, &data, &data.test).unwrap().accuracy;
        assert_eq!(got[0].1.to_bits(), plain.to_bits());
    }

    #[test]
    fn reports_never_mention_miou() {
        let data = tiny_blobs();
        let mut cfg = tiny_cfg();
        cfg.schedule = BudgetSchedule {
            initial_fraction: 0.10,
            final_fraction: 0.15,
            step: 0.05,
        };
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&data, Strategy::Random, &cfg, Some(dir.path())).unwrap();
        for f in ["records.csv", "bounds.csv", "selection_trace.csv", "manifest.json"] {
            let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(!text.to_lowercase().contains("iou"), "{f} mentions iou");
        }
    }
}
