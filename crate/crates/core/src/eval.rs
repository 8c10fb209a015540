//! Ranking metrics, non-neural baselines and evaluation breakdowns.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::convolution::SampledNeighbors;
use crate::dataset::{ItemCatalog, Session};
use crate::hypergraph::HeteroHypergraph;
use crate::model::{level_map, Model, SessionScores};
use crate::params::ParameterStore;
use crate::preference::{joint_loss, ModelError};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptyResults,
    KTooLarge { k: usize, have: usize },
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::EmptyResults => write!(f, "no results to evaluate"),
            EvalError::KTooLarge { k, have } => {
                write!(f, "k={k} exceeds the stored ranking length {have}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

/// One evaluated session: the top of the ranking plus where the target
/// landed (1-based; `None` when outside the stored top).
#[derive(Debug, Clone)]
pub struct RankedResult {
    pub top: Vec<u32>,
    pub rank: Option<usize>,
    pub target: u32,
    pub target_level: u32,
    pub prefix_len: usize,
}

impl RankedResult {
    /// Build from a full ranking (permutation prefix of the catalog).
    pub fn from_order(
        order: &[u32],
        k_max: usize,
        target: u32,
        target_level: u32,
        prefix_len: usize,
    ) -> Self {
        let rank = order.iter().position(|&i| i == target).map(|p| p + 1);
        RankedResult {
            top: order.iter().take(k_max).copied().collect(),
            rank: rank.filter(|&r| r <= k_max),
            target,
            target_level,
            prefix_len,
        }
    }

    /// Build from raw scores without sorting the whole catalog: the rank of
    /// the target is counted directly (ties break by ascending index).
    pub fn from_scores<F: Float>(
        scores: &[F],
        k_max: usize,
        target: u32,
        target_level: u32,
        prefix_len: usize,
    ) -> Self {
        let t = target as usize;
        let ts = scores[t];
        let mut rank = 1usize;
        for (i, &s) in scores.iter().enumerate() {
            if s > ts || (s == ts && i < t) {
                rank += 1;
            }
        }
        let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
        idx.sort_by(|&a, &b| {
            scores[b as usize]
                .partial_cmp(&scores[a as usize])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k_max);
        RankedResult {
            top: idx,
            rank: (rank <= k_max).then_some(rank),
            target,
            target_level,
            prefix_len,
        }
    }
}

/// Fraction of sessions whose target is in the top k.
pub fn prec_at_k(results: &[RankedResult], k: usize) -> Result<f64, EvalError> {
    check(results, k)?;
    let hits = results.iter().filter(|r| r.rank.is_some_and(|rk| rk <= k)).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean reciprocal rank, zero beyond k.
pub fn mrr_at_k(results: &[RankedResult], k: usize) -> Result<f64, EvalError> {
    check(results, k)?;
    let sum: f64 = results
        .iter()
        .map(|r| match r.rank {
            Some(rk) if rk <= k => 1.0 / rk as f64,
            _ => 0.0,
        })
        .sum();
    Ok(sum / results.len() as f64)
}

fn check(results: &[RankedResult], k: usize) -> Result<(), EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    if let Some(r) = results.iter().find(|r| r.top.len() < k) {
        return Err(EvalError::KTooLarge { k, have: r.top.len() });
    }
    Ok(())
}

/// Item occurrence counts over the training sessions (targets included).
pub fn global_popularity(train: &[Session], n_items: usize) -> Vec<usize> {
    let mut pop = vec![0usize; n_items];
    for s in train {
        for &i in &s.seq {
            pop[i as usize] += 1;
        }
    }
    pop
}

/// Session popularity baseline: items of the prefix ranked by in-session
/// frequency (ties by global popularity, then index), the remaining catalog
/// appended by global popularity.
pub fn s_pop_rank(prefix: &[u32], pop: &[usize]) -> Vec<u32> {
    let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in prefix {
        *freq.entry(i).or_insert(0) += 1;
    }
    let mut in_session: Vec<u32> = freq.keys().copied().collect();
    in_session.sort_by(|&a, &b| {
        freq[&b]
            .cmp(&freq[&a])
            .then(pop[b as usize].cmp(&pop[a as usize]))
            .then(a.cmp(&b))
    });
    let mut rest: Vec<u32> =
        (0..pop.len() as u32).filter(|i| !freq.contains_key(i)).collect();
    rest.sort_by(|&a, &b| pop[b as usize].cmp(&pop[a as usize]).then(a.cmp(&b)));
    in_session.extend(rest);
    in_session
}

/// Session-similarity nearest neighbors over binary item-incidence vectors.
pub struct SknnIndex {
    item_sets: Vec<Vec<u32>>,
    inverted: Vec<Vec<u32>>,
    pop: Vec<usize>,
    pop_order: Vec<u32>,
    pub k_neighbors: usize,
}

impl SknnIndex {
    pub fn build(train: &[Session], n_items: usize, k_neighbors: usize) -> Self {
        let mut item_sets = Vec::with_capacity(train.len());
        let mut inverted = vec![Vec::new(); n_items];
        for (sid, s) in train.iter().enumerate() {
            let mut set = s.seq.clone();
            set.sort_unstable();
            set.dedup();
            for &i in &set {
                inverted[i as usize].push(sid as u32);
            }
            item_sets.push(set);
        }
        let pop = global_popularity(train, n_items);
        let mut pop_order: Vec<u32> = (0..n_items as u32).collect();
        pop_order.sort_by(|&a, &b| pop[b as usize].cmp(&pop[a as usize]).then(a.cmp(&b)));
        SknnIndex { item_sets, inverted, pop, pop_order, k_neighbors }
    }

    pub fn popularity(&self) -> &[usize] {
        &self.pop
    }

    /// Full ranking for one prefix. Sessions sharing no item fall back to
    /// the global popularity order.
    pub fn rank(&self, prefix: &[u32]) -> Vec<u32> {
        let mut query = prefix.to_vec();
        query.sort_unstable();
        query.dedup();

        let mut candidates: Vec<u32> = Vec::new();
        for &i in &query {
            candidates.extend_from_slice(&self.inverted[i as usize]);
        }
        candidates.sort_unstable();
        candidates.dedup();
        if candidates.is_empty() {
            return self.pop_order.clone();
        }

        // Cosine over binary incidence vectors.
        let mut scored: Vec<(f64, u32)> = candidates
            .into_iter()
            .map(|sid| {
                let set = &self.item_sets[sid as usize];
                let mut overlap = 0usize;
                let mut a = 0;
                let mut b = 0;
                while a < query.len() && b < set.len() {
                    match query[a].cmp(&set[b]) {
                        core::cmp::Ordering::Less => a += 1,
                        core::cmp::Ordering::Greater => b += 1,
                        core::cmp::Ordering::Equal => {
                            overlap += 1;
                            a += 1;
                            b += 1;
                        }
                    }
                }
                let sim = overlap as f64 / ((query.len() * set.len()) as f64).sqrt();
                (sim, sid)
            })
            .collect();
        scored.sort_by(|x, y| {
            y.0.partial_cmp(&x.0).unwrap_or(core::cmp::Ordering::Equal).then(x.1.cmp(&y.1))
        });
        scored.truncate(self.k_neighbors);

        let mut item_score = vec![0.0f64; self.pop.len()];
        for (sim, sid) in &scored {
            for &i in &self.item_sets[*sid as usize] {
                item_score[i as usize] += sim;
            }
        }
        let mut ranked: Vec<u32> = (0..self.pop.len() as u32)
            .filter(|&i| item_score[i as usize] > 0.0)
            .collect();
        ranked.sort_by(|&a, &b| {
            item_score[b as usize]
                .partial_cmp(&item_score[a as usize])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let scored_set: Vec<bool> = item_score.iter().map(|&s| s > 0.0).collect();
        for &i in &self.pop_order {
            if !scored_set[i as usize] {
                ranked.push(i);
            }
        }
        ranked
    }
}

/// Uniform-random ranking with a fixed seed per session.
pub fn random_rank(n_items: usize, rng: &mut Rng) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n_items as u32).collect();
    rng.shuffle(&mut order);
    order
}

/// Model evaluation over a session list: one shared convolution pass, then
/// per-session ranking by the combined score. Also accumulates the mean
/// two-task loss (price head skipped for interest-only variants) and counts
/// probability clamps.
pub struct ModelEvaluation {
    pub results: Vec<RankedResult>,
    pub mean_loss: f64,
    pub clamped: usize,
}

pub fn evaluate_model<F: Float>(
    model: &Model,
    store: &ParameterStore<F>,
    graph: &HeteroHypergraph,
    caps: &SampledNeighbors,
    sessions: &[Session],
    catalog: &ItemCatalog,
    k_max: usize,
) -> Result<ModelEvaluation, ModelError> {
    let lmap = level_map(catalog);
    let mut tape = crate::autodiff::Tape::new();
    let tables = model.convolve(&mut tape, store, graph, caps);
    let mut results = Vec::with_capacity(sessions.len());
    let mut loss_sum = 0.0;
    let mut clamped = 0usize;
    for s in sessions {
        let scores: SessionScores<F> =
            model.score_session(&mut tape, store, &tables, s.prefix(), catalog, &lmap)?;
        let target = s.target();
        let target_level = catalog.level[target as usize];
        let interest: Vec<f64> =
            scores.interest.iter().map(|&p| p.to_f64().unwrap_or(0.0)).collect();
        let (loss, was_clamped) = match &scores.price {
            Some(price) => {
                let price: Vec<f64> = price.iter().map(|&p| p.to_f64().unwrap_or(0.0)).collect();
                joint_loss(&interest, target as usize, &price, target_level as usize - 1)
            }
            None => {
                let p = interest[target as usize];
                (-(p.max(1e-12)).ln(), p < 1e-12)
            }
        };
        loss_sum += loss;
        clamped += was_clamped as usize;
        results.push(RankedResult::from_scores(
            &scores.combined,
            k_max,
            target,
            target_level,
            s.prefix().len(),
        ));
    }
    Ok(ModelEvaluation {
        mean_loss: if sessions.is_empty() { 0.0 } else { loss_sum / sessions.len() as f64 },
        clamped,
        results,
    })
}

/// Prec/MRR at one cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub k: usize,
    pub prec: f64,
    pub mrr: f64,
}

pub fn metrics_table(results: &[RankedResult], ks: &[usize]) -> Result<Vec<MetricsRow>, EvalError> {
    ks.iter()
        .map(|&k| {
            Ok(MetricsRow { k, prec: prec_at_k(results, k)?, mrr: mrr_at_k(results, k)? })
        })
        .collect()
}

/// Metrics grouped by the target item's price level.
pub fn breakdown_by_level(
    results: &[RankedResult],
    ks: &[usize],
) -> Result<Vec<(u32, usize, Vec<MetricsRow>)>, EvalError> {
    let mut groups: BTreeMap<u32, Vec<RankedResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.target_level).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(level, rs)| Ok((level, rs.len(), metrics_table(&rs, ks)?)))
        .collect()
}

/// Metrics grouped by prefix length.
pub fn breakdown_by_length(
    results: &[RankedResult],
    ks: &[usize],
) -> Result<Vec<(usize, usize, Vec<MetricsRow>)>, EvalError> {
    let mut groups: BTreeMap<usize, Vec<RankedResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.prefix_len).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(len, rs)| Ok((len, rs.len(), metrics_table(&rs, ks)?)))
        .collect()
}

/// Evaluate a plain ranking baseline (s-pop, sknn, random) over sessions.
pub fn evaluate_baseline<R>(
    sessions: &[Session],
    catalog: &ItemCatalog,
    k_max: usize,
    mut ranker: R,
) -> Vec<RankedResult>
where
    R: FnMut(&[u32]) -> Vec<u32>,
{
    sessions
        .iter()
        .map(|s| {
            let order = ranker(s.prefix());
            RankedResult::from_order(
                &order,
                k_max,
                s.target(),
                catalog.level[s.target() as usize],
                s.prefix().len(),
            )
        })
        .collect()
}

pub use crate::preference::rank_descending as rank_items_descending;

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(ranks: &[Option<usize>]) -> Vec<RankedResult> {
        // Synthesize results with k_max = 20 rankings.
        ranks
            .iter()
            .enumerate()
            .map(|(i, &rank)| {
                let target = 500 + i as u32;
                let mut top: Vec<u32> = (0..20).collect();
                if let Some(r) = rank {
                    if r <= 20 {
                        top[r - 1] = target;
                    }
                }
                RankedResult {
                    top,
                    rank: rank.filter(|&r| r <= 20),
                    target,
                    target_level: 1,
                    prefix_len: 2,
                }
            })
            .collect()
    }

    #[test]
    fn prec_and_mrr_on_the_hand_fixture() {
        let results = fixture(&[Some(1), Some(3), Some(12)]);
        assert!((prec_at_k(&results, 10).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let mrr = mrr_at_k(&results, 10).unwrap();
        assert!((mrr - 4.0 / 9.0).abs() < 1e-12, "mrr {mrr}");
        // rank 11 with k=10 contributes zero.
        let r11 = fixture(&[Some(11)]);
        assert_eq!(mrr_at_k(&r11, 10).unwrap(), 0.0);
        assert_eq!(prec_at_k(&r11, 10).unwrap(), 0.0);
        let r1 = fixture(&[Some(1)]);
        assert_eq!(mrr_at_k(&r1, 10).unwrap(), 1.0);
    }

    #[test]
    fn metrics_error_on_empty_input() {
        assert!(matches!(prec_at_k(&[], 10), Err(EvalError::EmptyResults)));
        assert!(matches!(mrr_at_k(&[], 10), Err(EvalError::EmptyResults)));
    }

    #[test]
    fn metrics_are_monotone_in_k_and_mrr_below_prec() {
        let mut rng = Rng::new(31);
        for _ in 0..200 {
            let ranks: alloc::vec::Vec<Option<usize>> = (0..20)
                .map(|_| {
                    let r = rng.below(30) + 1;
                    (r <= 20).then_some(r)
                })
                .collect();
            let results = fixture(&ranks);
            let mut prev_p = 0.0;
            let mut prev_m = 0.0;
            for k in [1, 5, 10, 20] {
                let p = prec_at_k(&results, k).unwrap();
                let m = mrr_at_k(&results, k).unwrap();
                assert!(p >= prev_p && m >= prev_m);
                assert!(m <= p + 1e-12);
                prev_p = p;
                prev_m = m;
            }
        }
    }

    #[test]
    fn concatenation_is_weighted_average() {
        let a = fixture(&[Some(1), Some(4), None]);
        let b = fixture(&[Some(2)]);
        let mut both = a.clone();
        both.extend(b.clone());
        let pa = prec_at_k(&a, 10).unwrap();
        let pb = prec_at_k(&b, 10).unwrap();
        let pall = prec_at_k(&both, 10).unwrap();
        let expected = (pa * a.len() as f64 + pb * b.len() as f64) / both.len() as f64;
        assert!((pall - expected).abs() < 1e-12);
    }

    #[test]
    fn s_pop_prefers_in_session_frequency() {
        let pop = vec![5, 9, 1, 7];
        // prefix [a=0, b=1, a=0]: a has frequency 2.
        let order = s_pop_rank(&[0, 1, 0], &pop);
        assert_eq!(order[0], 0);
        assert_eq!(order[1], 1);
        // Remaining items by global popularity: 3 (pop 7) before 2 (pop 1).
        assert_eq!(&order[2..], &[3, 2]);
    }

    #[test]
    fn s_pop_breaks_prefix_ties_by_popularity() {
        let pop = vec![5, 9, 1];
        let order = s_pop_rank(&[0, 1], &pop);
        assert_eq!(order, vec![1, 0, 2]);
    }

    fn session(seq: &[u32]) -> Session {
        Session { seq: seq.to_vec(), times: (0..seq.len() as i64).collect() }
    }

    #[test]
    fn sknn_single_matching_neighbor_promotes_its_items() {
        let train = vec![session(&[0, 1, 2]), session(&[3, 4])];
        let index = SknnIndex::build(&train, 5, 500);
        let order = index.rank(&[0, 1]);
        // The first session is the only neighbor; its items win.
        assert_eq!(&order[..3], &[0, 1, 2]);
    }

    #[test]
    fn sknn_falls_back_to_popularity() {
        let train = vec![session(&[0, 1]), session(&[0, 2])];
        let index = SknnIndex::build(&train, 4, 500);
        // Item 3 occurs nowhere in training; the prefix shares nothing.
        let order = index.rank(&[3]);
        assert_eq!(order[0], 0, "most popular first");
    }

    #[test]
    fn sknn_identical_session_has_cosine_one() {
        let train = vec![session(&[0, 1, 2])];
        let index = SknnIndex::build(&train, 3, 500);
        // Internals exercised through ranking; identical prefix keeps the
        // session's own items on top in index order.
        let order = index.rank(&[0, 1, 2]);
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn ranked_from_scores_counts_rank_with_tie_rule() {
        let scores = [0.1f64, 0.5, 0.5, 0.9];
        let r = RankedResult::from_scores(&scores, 4, 2, 1, 3);
        // 0.9 first, then index 1 (tie with 2, lower index wins), target 2 at rank 3.
        assert_eq!(r.rank, Some(3));
        assert_eq!(r.top, vec![3, 1, 2, 0]);
    }

    #[test]
    fn random_ranker_is_a_permutation() {
        let mut rng = Rng::new(4);
        let order = random_rank(50, &mut rng);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<alloc::vec::Vec<u32>>());
    }

    #[test]
    fn perfect_ranker_scores_one() {
        let results: alloc::vec::Vec<RankedResult> = (0..40u32)
            .map(|target| {
                let mut top = alloc::vec![target];
                top.extend((0..40).filter(|&i| i != target).take(19));
                RankedResult { top, rank: Some(1), target, target_level: 1, prefix_len: 2 }
            })
            .collect();
        assert_eq!(prec_at_k(&results, 10).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&results, 10).unwrap(), 1.0);
    }

    #[test]
    fn random_ranker_hits_at_the_expected_rate() {
        // Prec@20 of a uniform ranking over 1000 items has expectation 0.02;
        // 2000 sessions keep the Monte-Carlo noise well inside [0.01, 0.03].
        let n_items = 1000;
        let mut rng = Rng::new(123);
        let results: alloc::vec::Vec<RankedResult> = (0..2000)
            .map(|s| {
                let order = random_rank(n_items, &mut rng);
                RankedResult::from_order(&order, 20, s % n_items as u32, 1, 2)
            })
            .collect();
        let prec = prec_at_k(&results, 20).unwrap();
        assert!((0.01..=0.03).contains(&prec), "prec@20 {prec}");
    }

    #[test]
    fn breakdown_rows_match_observed_groups() {
        let results = alloc::vec![
            RankedResult { top: (0..20).collect(), rank: Some(1), target: 0, target_level: 1, prefix_len: 1 },
            RankedResult { top: (0..20).collect(), rank: None, target: 1, target_level: 3, prefix_len: 1 },
            RankedResult { top: (0..20).collect(), rank: Some(4), target: 2, target_level: 3, prefix_len: 6 },
        ];
        let by_level = breakdown_by_level(&results, &[10]).unwrap();
        assert_eq!(by_level.len(), 2); // levels 1 and 3 observed
        assert_eq!(by_level[0].0, 1);
        assert_eq!(by_level[1], (3, 2, alloc::vec![MetricsRow { k: 10, prec: 0.5, mrr: 0.125 }]));
        let by_length = breakdown_by_length(&results, &[10]).unwrap();
        assert_eq!(by_length.len(), 2); // prefix lengths 1 and 6
        assert_eq!(by_length[0].1, 2);
    }
}
