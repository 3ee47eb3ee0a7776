//! Pool bookkeeping, the subset-restricted top-M selection protocol, and the
//! baseline selection strategies.

use crate::error::{AlktError, Result};
use crate::nets::BlockModel;
use crate::tensor::{softmax_vec, Tensor};
use crate::uncertainty::{
    baseline_scores, score, BaselineKind, Calibration, UncertaintyMetric, UncertaintyScore,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Partition of dataset indices into labeled and unlabeled sets across AL
/// cycles. Both sides stay sorted; the partition invariant is checked on
/// every mutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    history: Vec<Vec<usize>>,
    universe: Vec<usize>,
}

impl PoolState {
    /// Seed a pool over `0..n` with `round(initial_fraction * n)` labeled
    /// indices drawn uniformly.
    pub fn init(n: usize, initial_fraction: f64, seed: u64) -> Result<Self> {
        Self::init_over((0..n).collect(), initial_fraction, seed)
    }

    /// Same as [`PoolState::init`] over an arbitrary index universe.
    pub fn init_over(universe: Vec<usize>, initial_fraction: f64, seed: u64) -> Result<Self> {
        if universe.is_empty() {
            return Err(AlktError::invalid("cannot build a pool over an empty dataset"));
        }
        if !(initial_fraction > 0.0 && initial_fraction <= 1.0) {
            return Err(AlktError::invalid("initial fraction must be in (0,1]"));
        }
        let mut universe = universe;
        universe.sort_unstable();
        let k = round_half_up(initial_fraction * universe.len() as f64);
        let k = k.min(universe.len()).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = rand::seq::index::sample(&mut rng, universe.len(), k);
        let mut labeled: Vec<usize> = picked.iter().map(|i| universe[i]).collect();
        labeled.sort_unstable();
        let unlabeled: Vec<usize> = universe
            .iter()
            .copied()
            .filter(|i| labeled.binary_search(i).is_err())
            .collect();
        let pool = PoolState {
            labeled,
            unlabeled,
            history: Vec::new(),
            universe,
        };
        pool.check_partition();
        Ok(pool)
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn history(&self) -> &[Vec<usize>] {
        &self.history
    }

    fn check_partition(&self) {
        debug_assert!(self.labeled.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(self.unlabeled.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            self.labeled.len() + self.unlabeled.len(),
            self.universe.len(),
            "pool partition violated"
        );
        assert!(
            self.labeled
                .iter()
                .all(|i| self.unlabeled.binary_search(i).is_err()),
            "pool partition violated: overlapping sets"
        );
    }

    /// Public partition check (used by the invariant suite).
    pub fn partition_holds(&self) -> bool {
        self.labeled.len() + self.unlabeled.len() == self.universe.len()
            && self
                .labeled
                .iter()
                .all(|i| self.unlabeled.binary_search(i).is_err())
    }

    /// Draw the per-cycle candidate subset R_U: `min(10*m, |unlabeled|)`
    /// indices uniformly without replacement.
    pub fn draw_subset(&self, m: usize, seed: u64) -> Result<Vec<usize>> {
        if m == 0 {
            return Err(AlktError::invalid("per-cycle quota must be >= 1"));
        }
        if self.unlabeled.is_empty() {
            return Err(AlktError::invalid("unlabeled pool is empty"));
        }
        let k = (10 * m).min(self.unlabeled.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = rand::seq::index::sample(&mut rng, self.unlabeled.len(), k);
        let mut out: Vec<usize> = picked.iter().map(|i| self.unlabeled[i]).collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Move `selected` from unlabeled to labeled and append to history.
    pub fn annotate(&mut self, selected: &[usize]) -> Result<()> {
        let mut sorted = selected.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(AlktError::invalid("selected indices contain a repeat"));
        }
        for &i in &sorted {
            if self.unlabeled.binary_search(&i).is_err() {
                return Err(AlktError::invalid(format!(
                    "selected index {i} is not in the unlabeled pool"
                )));
            }
        }
        self.unlabeled.retain(|i| sorted.binary_search(i).is_err());
        self.labeled.extend_from_slice(&sorted);
        self.labeled.sort_unstable();
        self.history.push(sorted);
        self.check_partition();
        Ok(())
    }
}

/// Round half-up for nonnegative values.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Labeling budget as fractions of the train pool.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub initial_fraction: f64,
    pub final_fraction: f64,
    pub step: f64,
}

impl Default for BudgetSchedule {
    fn default() -> Self {
        BudgetSchedule {
            initial_fraction: 0.10,
            final_fraction: 0.40,
            step: 0.05,
        }
    }
}

impl BudgetSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_fraction > 0.0
            && self.initial_fraction <= self.final_fraction
            && self.final_fraction <= 1.0)
        {
            return Err(AlktError::invalid("need 0 < initial <= final <= 1"));
        }
        if self.step <= 0.0 {
            return Err(AlktError::invalid("step must be > 0"));
        }
        let steps = (self.final_fraction - self.initial_fraction) / self.step;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(AlktError::invalid(
                "(final - initial) must be an integer multiple of step",
            ));
        }
        Ok(())
    }

    /// All budget fractions, initial point included.
    pub fn budget_points(&self) -> Vec<f64> {
        let steps = ((self.final_fraction - self.initial_fraction) / self.step).round() as usize;
        (0..=steps)
            .map(|i| self.initial_fraction + i as f64 * self.step)
            .collect()
    }

    /// Per-cycle quota for a pool of `n` samples.
    pub fn quota(&self, n: usize) -> usize {
        round_half_up(self.step * n as f64)
    }
}

/// Top-m scores; ties broken by ascending dataset index; output ascending.
pub fn select_top(scores: &[UncertaintyScore], m: usize) -> Result<Vec<usize>> {
    if scores.len() < m {
        return Err(AlktError::invalid(format!(
            "cannot select {m} from {} scores",
            scores.len()
        )));
    }
    let mut ranked: Vec<&UncertaintyScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.index.cmp(&b.index)));
    let mut out: Vec<usize> = ranked[..m].iter().map(|s| s.index).collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Proposed,
    Random,
    Entropy,
    Margin,
    LeastConfidence,
    McDropoutEntropy,
    CoresetKcenter,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Proposed,
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Margin,
        Strategy::LeastConfidence,
        Strategy::McDropoutEntropy,
        Strategy::CoresetKcenter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Proposed => "proposed",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Margin => "margin",
            Strategy::LeastConfidence => "least-confidence",
            Strategy::McDropoutEntropy => "mc-dropout-entropy",
            Strategy::CoresetKcenter => "coreset-kcenter",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = AlktError;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AlktError::invalid(format!("unknown strategy {s:?}")))
    }
}

/// Everything a strategy may need for one cycle's selection.
pub struct SelectionContext<'a> {
    pub teacher: &'a BlockModel,
    pub student: &'a BlockModel,
    /// Full dataset features; strategies gather rows by index.
    pub features: &'a Tensor,
    pub labeled: &'a [usize],
    /// Candidate subset R_U.
    pub candidates: &'a [usize],
    pub quota: usize,
    pub metric: UncertaintyMetric,
    pub calibration: Option<Calibration>,
    pub mc_passes: usize,
    pub mc_drop_prob: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub threads: usize,
}

pub struct SelectionOutcome {
    pub selected: Vec<usize>,
    pub scores: Vec<UncertaintyScore>,
}

fn chunked_scores<F>(ctx: &SelectionContext, f: F) -> Result<Vec<UncertaintyScore>>
where
    F: Fn(&[usize]) -> Result<Vec<UncertaintyScore>> + Sync,
{
    let chunks: Vec<&[usize]> = ctx.candidates.chunks(ctx.batch_size.max(1)).collect();
    let results: Vec<Result<Vec<UncertaintyScore>>> = if ctx.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(ctx.threads)
            .build()
            .map_err(|e| AlktError::invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            chunks.par_iter().map(|c| f(c)).collect()
        })
    } else {
        chunks.iter().map(|c| f(c)).collect()
    };
    let mut out = Vec::with_capacity(ctx.candidates.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn disagreement_scores(ctx: &SelectionContext) -> Result<Vec<UncertaintyScore>> {
    chunked_scores(ctx, |chunk| {
        let batch = ctx.features.gather_rows(chunk);
        let t_out = ctx.teacher.forward(&batch)?;
        let s_out = ctx.student.forward(&batch)?;
        score(&t_out, &s_out, chunk, ctx.metric, ctx.calibration.as_ref())
    })
}

fn teacher_baseline_scores(
    ctx: &SelectionContext,
    kind: BaselineKind,
) -> Result<Vec<UncertaintyScore>> {
    chunked_scores(ctx, |chunk| {
        let batch = ctx.features.gather_rows(chunk);
        let t_out = ctx.teacher.forward(&batch)?;
        let posts: Vec<Vec<f64>> = (0..chunk.len())
            .map(|r| softmax_vec(t_out.logits.row(r)))
            .collect();
        let vals = baseline_scores(&posts, kind);
        Ok(chunk
            .iter()
            .zip(vals)
            .map(|(&index, value)| UncertaintyScore { index, value })
            .collect())
    })
}

fn mc_dropout_entropy_scores(ctx: &SelectionContext) -> Result<Vec<UncertaintyScore>> {
    // entropy of the mean posterior over K stochastic passes
    let batch = ctx.features.gather_rows(ctx.candidates);
    let passes =
        ctx.teacher
            .forward_mc_dropout(&batch, ctx.mc_passes, ctx.mc_drop_prob, ctx.seed)?;
    let k = ctx.mc_passes as f64;
    let mut out = Vec::with_capacity(ctx.candidates.len());
    for (r, &index) in ctx.candidates.iter().enumerate() {
        let classes = passes[0][r].len();
        let mut mean = vec![0.0; classes];
        for pass in &passes {
            for (m, &p) in mean.iter_mut().zip(&pass[r]) {
                *m += p / k;
            }
        }
        let value = baseline_scores(&[mean], BaselineKind::Entropy)[0];
        out.push(UncertaintyScore { index, value });
    }
    Ok(out)
}

/// Greedy farthest-first (k-center) over raw feature vectors. Each entry of
/// `candidates` is `(dataset index, feature vector)`. Ties break toward the
/// smallest dataset index.
pub fn kcenter_greedy(
    candidates: &[(usize, Vec<f64>)],
    labeled: &[Vec<f64>],
    m: usize,
) -> Result<Vec<usize>> {
    if candidates.len() < m {
        return Err(AlktError::invalid(format!(
            "cannot pick {m} centers from {} candidates",
            candidates.len()
        )));
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut min_dist: Vec<f64> = candidates
        .iter()
        .map(|(_, f)| {
            labeled
                .iter()
                .map(|l| dist(f, l))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut picked_mask = vec![false; candidates.len()];
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<usize> = None;
        for (i, &d) in min_dist.iter().enumerate() {
            if picked_mask[i] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    d > min_dist[b] || (d == min_dist[b] && candidates[i].0 < candidates[b].0)
                }
            };
            if better {
                best = Some(i);
            }
        }
        let b = best.expect("candidates remain");
        picked_mask[b] = true;
        picked.push(candidates[b].0);
        for (i, (_, f)) in candidates.iter().enumerate() {
            if !picked_mask[i] {
                let d = dist(f, &candidates[b].1);
                if d < min_dist[i] {
                    min_dist[i] = d;
                }
            }
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

fn penultimate_features(ctx: &SelectionContext, idxs: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut feats = Vec::with_capacity(idxs.len());
    for chunk in idxs.chunks(ctx.batch_size.max(1)) {
        let batch = ctx.features.gather_rows(chunk);
        let out = ctx.teacher.forward(&batch)?;
        let w = out.penultimate.shape()[1];
        for r in 0..chunk.len() {
            feats.push(out.penultimate.data()[r * w..(r + 1) * w].to_vec());
        }
    }
    Ok(feats)
}

/// Run one strategy over the candidate subset and return the selected
/// indices (sorted ascending) plus per-candidate scores for tracing.
pub fn select_with_strategy(kind: Strategy, ctx: &SelectionContext) -> Result<SelectionOutcome> {
    if ctx.candidates.len() < ctx.quota {
        return Err(AlktError::invalid(format!(
            "candidate subset ({}) smaller than quota ({})",
            ctx.candidates.len(),
            ctx.quota
        )));
    }
    match kind {
        Strategy::Proposed => {
            let scores = disagreement_scores(ctx)?;
            let selected = select_top(&scores, ctx.quota)?;
            Ok(SelectionOutcome { selected, scores })
        }
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            let picked = rand::seq::index::sample(&mut rng, ctx.candidates.len(), ctx.quota);
            let mut selected: Vec<usize> = picked.iter().map(|i| ctx.candidates[i]).collect();
            selected.sort_unstable();
            let scores = ctx
                .candidates
                .iter()
                .map(|&index| UncertaintyScore { index, value: 0.0 })
                .collect();
            Ok(SelectionOutcome { selected, scores })
        }
        Strategy::Entropy | Strategy::Margin | Strategy::LeastConfidence => {
            let bk = match kind {
                Strategy::Entropy => BaselineKind::Entropy,
                Strategy::Margin => BaselineKind::Margin,
                _ => BaselineKind::LeastConfidence,
            };
            let scores = teacher_baseline_scores(ctx, bk)?;
            let selected = select_top(&scores, ctx.quota)?;
            Ok(SelectionOutcome { selected, scores })
        }
        Strategy::McDropoutEntropy => {
            let scores = mc_dropout_entropy_scores(ctx)?;
            let selected = select_top(&scores, ctx.quota)?;
            Ok(SelectionOutcome { selected, scores })
        }
        Strategy::CoresetKcenter => {
            let cand_feats = penultimate_features(ctx, ctx.candidates)?;
            let labeled_feats = penultimate_features(ctx, ctx.labeled)?;
            let pairs: Vec<(usize, Vec<f64>)> = ctx
                .candidates
                .iter()
                .copied()
                .zip(cand_feats)
                .collect();
            let selected = kcenter_greedy(&pairs, &labeled_feats, ctx.quota)?;
            // report each candidate's distance-to-labeled as its trace score
            let scores = pairs
                .iter()
                .map(|(index, f)| {
                    let value = labeled_feats
                        .iter()
                        .map(|l| {
                            f.iter()
                                .zip(l)
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    UncertaintyScore {
                        index: *index,
                        value,
                    }
                })
                .collect();
            Ok(SelectionOutcome { selected, scores })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_pool_arithmetic() {
        let pool = PoolState::init(100, 0.10, 1).unwrap();
        assert_eq!(pool.labeled().len(), 10);
        assert_eq!(pool.unlabeled().len(), 90);
    }

    #[test]
    fn init_pool_full_fraction() {
        let pool = PoolState::init(20, 1.0, 1).unwrap();
        assert!(pool.unlabeled().is_empty());
    }

    #[test]
    fn init_pool_deterministic_in_seed() {
        let a = PoolState::init(100, 0.10, 7).unwrap();
        let b = PoolState::init(100, 0.10, 7).unwrap();
        assert_eq!(a.labeled(), b.labeled());
        let c = PoolState::init(100, 0.10, 8).unwrap();
        assert_ne!(a.labeled(), c.labeled());
    }

    #[test]
    fn init_pool_empty_errors() {
        assert!(PoolState::init(0, 0.1, 0).is_err());
    }

    #[test]
    fn draw_subset_ten_times_quota() {
        let pool = PoolState::init(100, 0.10, 1).unwrap();
        assert_eq!(pool.draw_subset(5, 2).unwrap().len(), 50);
        assert_eq!(pool.draw_subset(1, 2).unwrap().len(), 10);
    }

    #[test]
    fn draw_subset_clamps_to_pool() {
        let pool = PoolState::init(40, 0.25, 1).unwrap(); // 30 unlabeled
        assert_eq!(pool.draw_subset(5, 2).unwrap().len(), 30);
    }

    #[test]
    fn draw_subset_empty_pool_errors() {
        let pool = PoolState::init(10, 1.0, 1).unwrap();
        assert!(pool.draw_subset(1, 0).is_err());
    }

    #[test]
    fn select_top_examples() {
        let scores = vec![
            UncertaintyScore { index: 7, value: 0.1 },
            UncertaintyScore { index: 3, value: 0.9 },
            UncertaintyScore { index: 5, value: 0.5 },
        ];
        assert_eq!(select_top(&scores, 1).unwrap(), vec![3]);
        assert_eq!(select_top(&scores, 3).unwrap(), vec![3, 5, 7]);

        let equal = vec![
            UncertaintyScore { index: 9, value: 1.0 },
            UncertaintyScore { index: 2, value: 1.0 },
            UncertaintyScore { index: 4, value: 1.0 },
        ];
        assert_eq!(select_top(&equal, 2).unwrap(), vec![2, 4]);
        assert!(select_top(&equal, 4).is_err());
    }

    #[test]
    fn annotate_moves_and_records() {
        let mut pool = PoolState::init(100, 0.10, 1).unwrap();
        let pick: Vec<usize> = pool.unlabeled()[..5].to_vec();
        pool.annotate(&pick).unwrap();
        assert_eq!(pool.labeled().len(), 15);
        assert_eq!(pool.unlabeled().len(), 85);
        assert_eq!(pool.history(), &[pick]);

        let before = pool.clone();
        pool.annotate(&[]).unwrap();
        assert_eq!(pool.labeled(), before.labeled());

        let dup = vec![pool.unlabeled()[0], pool.unlabeled()[0]];
        assert!(pool.annotate(&dup).is_err());
        let labeled0 = pool.labeled()[0];
        assert!(pool.annotate(&[labeled0]).is_err());
    }

    #[test]
    fn budget_schedule_points() {
        let s = BudgetSchedule::default();
        s.validate().unwrap();
        let pts = s.budget_points();
        assert_eq!(pts.len(), 7);
        assert!((pts[0] - 0.10).abs() < 1e-12);
        assert!((pts[6] - 0.40).abs() < 1e-12);
        assert_eq!(s.quota(1600), 80);

        let bad = BudgetSchedule {
            initial_fraction: 0.1,
            final_fraction: 0.33,
            step: 0.05,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kcenter_greedy_traces() {
        // 1-D: labeled feature {0}, candidates at 1 and 10
        let candidates = vec![(1usize, vec![1.0]), (2usize, vec![10.0])];
        let labeled = vec![vec![0.0]];
        assert_eq!(kcenter_greedy(&candidates, &labeled, 1).unwrap(), vec![2]);
        assert_eq!(kcenter_greedy(&candidates, &labeled, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn kcenter_tie_breaks_to_smaller_index() {
        let candidates = vec![(9usize, vec![1.0]), (2usize, vec![-1.0])];
        let labeled = vec![vec![0.0]];
        assert_eq!(kcenter_greedy(&candidates, &labeled, 1).unwrap(), vec![2]);
    }

    #[test]
    fn random_strategy_reproducible() {
        use crate::nets::{build_pair, ArchConfig};
        let arch = ArchConfig::mlp(2, 8, 2, 2);
        let (t, s) = build_pair(&arch, 0).unwrap();
        let features = Tensor::new(vec![20, 2], (0..40).map(|i| i as f64).collect()).unwrap();
        let candidates: Vec<usize> = (0..20).collect();
        let ctx = SelectionContext {
            teacher: &t,
            student: &s,
            features: &features,
            labeled: &[],
            candidates: &candidates,
            quota: 5,
            metric: UncertaintyMetric::KlPosterior,
            calibration: None,
            mc_passes: 10,
            mc_drop_prob: 0.1,
            seed: 42,
            batch_size: 8,
            threads: 1,
        };
        let a = select_with_strategy(super::Strategy::Random, &ctx).unwrap();
        let b = select_with_strategy(super::Strategy::Random, &ctx).unwrap();
        assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn proposed_strategy_is_deterministic_given_models() {
        use crate::nets::{build_pair, ArchConfig};
        let arch = ArchConfig::mlp(2, 8, 3, 2);
        let (t, s) = build_pair(&arch, 3).unwrap();
        let features = Tensor::new(
            vec![30, 2],
            (0..60).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let candidates: Vec<usize> = (0..30).step_by(2).collect();
        let ctx = SelectionContext {
            teacher: &t,
            student: &s,
            features: &features,
            labeled: &[1, 3],
            candidates: &candidates,
            quota: 4,
            metric: UncertaintyMetric::KlPosterior,
            calibration: None,
            mc_passes: 10,
            mc_drop_prob: 0.1,
            seed: 0,
            batch_size: 7,
            threads: 1,
        };
        let a = select_with_strategy(super::Strategy::Proposed, &ctx).unwrap();
        let b = select_with_strategy(super::Strategy::Proposed, &ctx).unwrap();
        assert_eq!(a.selected, b.selected);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert_eq!(x.value.to_bits(), y.value.to_bits());
        }
    }

    proptest! {
        /// select-top equals brute-force sort-and-slice.
        #[test]
        fn select_top_matches_sort_oracle(values in proptest::collection::vec(0.0f64..10.0, 1..50), m_frac in 0.0f64..1.0) {
            let scores: Vec<UncertaintyScore> = values
                .iter()
                .enumerate()
                .map(|(index, &value)| UncertaintyScore { index, value })
                .collect();
            let m = ((scores.len() as f64) * m_frac) as usize;
            let got = select_top(&scores, m).unwrap();

            let mut oracle: Vec<(f64, usize)> =
                scores.iter().map(|s| (s.value, s.index)).collect();
            oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut expect: Vec<usize> = oracle[..m].iter().map(|&(_, i)| i).collect();
            expect.sort_unstable();
            prop_assert_eq!(got, expect);
        }

        /// Partition invariant holds after arbitrary annotate sequences.
        #[test]
        fn pool_partition_invariant(seed in 0u64..1000, picks in proptest::collection::vec(0usize..50, 0..8)) {
            let mut pool = PoolState::init(60, 0.2, seed).unwrap();
            for p in picks {
                if pool.unlabeled().is_empty() { break; }
                let k = p % pool.unlabeled().len().min(5) + 1;
                let sel: Vec<usize> = pool.unlabeled()[..k.min(pool.unlabeled().len())].to_vec();
                pool.annotate(&sel).unwrap();
                prop_assert!(pool.partition_holds());
            }
        }
    }
}
