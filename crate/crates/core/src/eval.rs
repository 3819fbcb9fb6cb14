//! Filtered ranking metrics.
//!
//! Ranks use the average-tie policy: `1 + #greater + #tied/2`, where the
//! counts run over surviving candidates other than the gold object.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::data::{Split, TkgDataset, Triple};
use crate::error::{Result, TkgError};
use crate::model::{forward_window, Ctx, Model};

/// Which facts are removed from a query's candidate list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    /// Facts true at the query timestamp.
    #[default]
    TimeAware,
    /// Facts true at any timestamp of the dataset. Kept for comparison only.
    Static,
}

/// Scores with filtered candidates set to `None`; the gold object survives.
pub fn time_aware_filter(scores: &[f64], query: Triple, facts: &HashSet<Triple>) -> Result<Vec<Option<f64>>> {
    if query.object >= scores.len() {
        return Err(TkgError::contract(format!(
            "gold object {} outside {} candidates",
            query.object,
            scores.len()
        )));
    }
    if !facts.contains(&query) {
        return Err(TkgError::contract(format!("gold fact {query:?} missing from the filter set")));
    }
    Ok(scores
        .iter()
        .enumerate()
        .map(|(o, &s)| {
            let other_true = o != query.object && facts.contains(&Triple::new(query.subject, query.relation, o));
            (!other_true).then_some(s)
        })
        .collect())
}

/// Average-tie rank of `gold` among the surviving entries of `masked`.
pub fn rank_of_gold(masked: &[Option<f64>], gold: usize) -> Result<f64> {
    let target = masked
        .get(gold)
        .copied()
        .flatten()
        .ok_or_else(|| TkgError::contract(format!("gold candidate {gold} is masked or missing")))?;
    let mut survivors: Vec<f64> = masked.iter().flatten().copied().collect();
    survivors.sort_by(|a, b| b.total_cmp(a));
    // 1-based positions of the tie group holding the gold score.
    let first = survivors.iter().position(|&s| s == target).expect("gold survives") + 1;
    let last = survivors.iter().rposition(|&s| s == target).expect("gold survives") + 1;
    Ok((first + last) as f64 / 2.0)
}

/// Filtered rank by exhaustive pairwise comparison.
pub fn oracle_rank(scores: &[f64], query: Triple, facts: &HashSet<Triple>) -> f64 {
    let g = scores[query.object];
    let mut rank = 1.0;
    for (c, &s) in scores.iter().enumerate() {
        if c == query.object || facts.contains(&Triple::new(query.subject, query.relation, c)) {
            continue;
        }
        if s > g {
            rank += 1.0;
        } else if s == g {
            rank += 0.5;
        }
    }
    rank
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub query: Triple,
    pub time: usize,
    pub raw_rank: f64,
    pub filtered_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestampMetrics {
    pub time: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub num_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    /// Keys `"1"`, `"3"`, `"10"`.
    pub hits: BTreeMap<String, f64>,
    pub num_queries: usize,
    pub per_timestamp: Vec<TimestampMetrics>,
}

pub const HITS_LEVELS: [usize; 3] = [1, 3, 10];

fn summarise(ranks: &[f64]) -> (f64, [f64; 3]) {
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n;
    let hits = HITS_LEVELS.map(|k| ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n);
    (mrr, hits)
}

/// MRR and Hits@{1,3,10} over filtered ranks, overall and per timestamp.
pub fn compute_metrics(records: &[RankRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(TkgError::contract("compute_metrics over zero records"));
    }
    let ranks: Vec<f64> = records.iter().map(|r| r.filtered_rank).collect();
    let (mrr, hits) = summarise(&ranks);
    let mut by_time: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_time.entry(r.time).or_default().push(r.filtered_rank);
    }
    let per_timestamp = by_time
        .into_iter()
        .map(|(time, ranks)| {
            let (mrr, h) = summarise(&ranks);
            TimestampMetrics {
                time,
                mrr,
                hits1: h[0],
                hits3: h[1],
                hits10: h[2],
                num_queries: ranks.len(),
            }
        })
        .collect();
    Ok(MetricsReport {
        mrr,
        hits: HITS_LEVELS
            .iter()
            .zip(hits)
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        num_queries: records.len(),
        per_timestamp,
    })
}

impl MetricsReport {
    pub fn hits_at(&self, k: usize) -> f64 {
        self.hits.get(&k.to_string()).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }

    /// One row per timestamp.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,num_queries,mrr,hits1,hits3,hits10\n");
        for t in &self.per_timestamp {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                t.time, t.num_queries, t.mrr, t.hits1, t.hits3, t.hits10
            );
        }
        out
    }
}

/// Rank records for every query (forward and inverse) of `split`, each
/// scored from its most recent `history` snapshots.
pub fn rank_split(model: &Model, dataset: &TkgDataset, split: Split, history: usize, filter: FilterMode) -> Result<Vec<RankRecord>> {
    let windows = dataset.history_windows(history, split)?;
    let all_facts: HashSet<Triple> = match filter {
        FilterMode::Static => (0..dataset.num_times()).flat_map(|t| dataset.facts_at(t)).collect(),
        FilterMode::TimeAware => HashSet::new(),
    };
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut records = Vec::new();
    for w in windows {
        if w.queries.is_empty() {
            continue;
        }
        tape.reset();
        let vars = model.params.bind(&mut tape, false);
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            model,
            mode: Mode::Eval,
            rng: &mut rng,
        };
        let out = forward_window(&mut ctx, w.history, &w.queries, w.query_time, None)?;
        let scores = tape.value(out.scores);
        let facts_now = dataset.facts_at(w.query_time);
        let facts = match filter {
            FilterMode::TimeAware => &facts_now,
            FilterMode::Static => &all_facts,
        };
        for (qi, &q) in w.queries.iter().enumerate() {
            let row = scores.row(qi);
            let raw: Vec<Option<f64>> = row.iter().copied().map(Some).collect();
            let masked = time_aware_filter(row, q, facts)?;
            records.push(RankRecord {
                query: q,
                time: w.query_time,
                raw_rank: rank_of_gold(&raw, q.object)?,
                filtered_rank: rank_of_gold(&masked, q.object)?,
            });
        }
    }
    Ok(records)
}

pub fn evaluate_split(model: &Model, dataset: &TkgDataset, split: Split, history: usize, filter: FilterMode) -> Result<MetricsReport> {
    compute_metrics(&rank_split(model, dataset, split, history, filter)?)
}
