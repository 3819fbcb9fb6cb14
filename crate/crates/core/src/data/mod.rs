//! Quadruple datasets: parsing, timestamp densification, inverse edges,
//! per-timestamp snapshots and sliding history windows.

mod io;
mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset_dir, parse_quadruple_file, parse_quadruples, write_dataset_dir, RawQuadruple};
pub use synthetic::gen_synthetic_tkg;

use crate::error::{Result, TkgError};

/// One timestamped fact with a dense time index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub time: usize,
}

/// A directed, relation-labelled edge `(subject, relation, object)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

impl Triple {
    pub fn new(subject: usize, relation: usize, object: usize) -> Self {
        Triple {
            subject,
            relation,
            object,
        }
    }
}

/// All facts sharing one timestamp, as a multigraph edge list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SnapshotGraph {
    pub time: usize,
    pub edges: Vec<Triple>,
}

impl SnapshotGraph {
    pub fn new(time: usize, edges: Vec<Triple>) -> Self {
        SnapshotGraph { time, edges }
    }

    pub fn subjects(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.subject).collect()
    }

    pub fn relations(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.relation).collect()
    }

    pub fn objects(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.object).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = TkgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(TkgError::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// A temporal knowledge graph split chronologically into train/valid/test.
///
/// Snapshot edges always carry the inverse of every raw edge, using relation
/// id `r + num_raw_relations`. Within a snapshot the raw edges come first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TkgDataset {
    pub num_entities: usize,
    pub num_raw_relations: usize,
    pub snapshots: Vec<SnapshotGraph>,
    /// `(train_end, valid_end)`: train is `[0, train_end)`, valid is
    /// `[train_end, valid_end)`, test is `[valid_end, T)`.
    pub split_boundaries: (usize, usize),
}

/// Queries of one timestamp together with the evidence preceding it.
#[derive(Clone, Debug)]
pub struct HistoryWindow<'a> {
    pub history: &'a [SnapshotGraph],
    pub query_time: usize,
    pub queries: Vec<Triple>,
}

impl TkgDataset {
    /// Builds a dataset from raw-relation quadruples that already carry dense
    /// time indices in `0..num_times`.
    pub fn from_quadruples(
        quads: &[Quadruple],
        num_entities: usize,
        num_raw_relations: usize,
        num_times: usize,
        split_boundaries: (usize, usize),
    ) -> Result<Self> {
        let (train_end, valid_end) = split_boundaries;
        if train_end > valid_end || valid_end > num_times {
            return Err(TkgError::contract(format!(
                "split boundaries {split_boundaries:?} do not fit {num_times} timestamps"
            )));
        }
        if let Some(q) = quads
            .iter()
            .find(|q| q.subject >= num_entities || q.object >= num_entities)
        {
            return Err(TkgError::contract(format!(
                "entity id out of range in {q:?} (num_entities = {num_entities})"
            )));
        }
        let augmented = augment_inverse(quads, num_raw_relations)?;
        let mut snapshots = build_snapshots(&augmented, num_times)?;
        // keep raw edges ahead of their inverses within every snapshot
        for s in &mut snapshots {
            let (raw, inv): (Vec<Triple>, Vec<Triple>) =
                s.edges.iter().partition(|e| e.relation < num_raw_relations);
            s.edges = raw.into_iter().chain(inv).collect();
        }
        Ok(TkgDataset {
            num_entities,
            num_raw_relations,
            snapshots,
            split_boundaries,
        })
    }

    pub fn num_relations(&self) -> usize {
        2 * self.num_raw_relations
    }

    pub fn num_times(&self) -> usize {
        self.snapshots.len()
    }

    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let (train_end, valid_end) = self.split_boundaries;
        match split {
            Split::Train => 0..train_end,
            Split::Valid => train_end..valid_end,
            Split::Test => valid_end..self.snapshots.len(),
        }
    }

    /// Raw (non-inverse) quadruples with time index inside `range`.
    pub fn raw_quadruples(&self, range: std::ops::Range<usize>) -> Vec<Quadruple> {
        self.snapshots[range]
            .iter()
            .flat_map(|s| {
                s.edges
                    .iter()
                    .filter(|e| e.relation < self.num_raw_relations)
                    .map(move |e| Quadruple {
                        subject: e.subject,
                        relation: e.relation,
                        object: e.object,
                        time: s.time,
                    })
            })
            .collect()
    }

    /// Every true edge at timestamp `t`, inverse edges included.
    pub fn facts_at(&self, t: usize) -> HashSet<Triple> {
        self.snapshots[t].edges.iter().copied().collect()
    }

    /// One window per timestamp of `split` that has at least one earlier
    /// snapshot. History is drawn from ground-truth snapshots regardless of
    /// which split they belong to.
    pub fn history_windows(&self, m: usize, split: Split) -> Result<Vec<HistoryWindow<'_>>> {
        if m == 0 {
            return Err(TkgError::contract("history length m must be at least 1"));
        }
        Ok(self
            .split_range(split)
            .filter(|&t| t > 0)
            .map(|t| self.window_at(t, m))
            .collect())
    }

    /// History `max(0, t−m)..t` and the edges of snapshot `t` as queries.
    pub fn window_at(&self, t: usize, m: usize) -> HistoryWindow<'_> {
        let start = t.saturating_sub(m);
        HistoryWindow {
            history: &self.snapshots[start..t],
            query_time: t,
            queries: self.snapshots[t].edges.clone(),
        }
    }
}

/// Maps the inverse-edge relation id back and forth (`r ↔ r ± |R₀|`).
pub fn inverse_relation(relation: usize, num_raw_relations: usize) -> usize {
    if relation < num_raw_relations {
        relation + num_raw_relations
    } else {
        relation - num_raw_relations
    }
}

/// Replaces raw timestamps by their dense rank among all distinct values.
/// Returns the quadruples and the number of distinct timestamps.
pub fn normalize_timestamps(raw: &[RawQuadruple]) -> Result<(Vec<Quadruple>, usize)> {
    if raw.is_empty() {
        return Err(TkgError::contract("cannot normalize an empty quadruple set"));
    }
    let mut times: Vec<u64> = raw.iter().map(|q| q.time).collect();
    times.sort_unstable();
    times.dedup();
    let quads = raw
        .iter()
        .map(|q| Quadruple {
            subject: q.subject,
            relation: q.relation,
            object: q.object,
            time: times.binary_search(&q.time).expect("timestamp was collected"),
        })
        .collect();
    Ok((quads, times.len()))
}

/// Appends `(o, r + num_raw_relations, s, t)` for every input quadruple.
pub fn augment_inverse(quads: &[Quadruple], num_raw_relations: usize) -> Result<Vec<Quadruple>> {
    if let Some(q) = quads.iter().find(|q| q.relation >= num_raw_relations) {
        return Err(TkgError::contract(format!(
            "relation {} is not below num_raw_relations = {num_raw_relations}",
            q.relation
        )));
    }
    let mut out = quads.to_vec();
    out.extend(quads.iter().map(|q| Quadruple {
        subject: q.object,
        relation: q.relation + num_raw_relations,
        object: q.subject,
        time: q.time,
    }));
    Ok(out)
}

/// Groups quadruples into exactly `num_times` snapshots, preserving order.
pub fn build_snapshots(quads: &[Quadruple], num_times: usize) -> Result<Vec<SnapshotGraph>> {
    let mut snapshots: Vec<SnapshotGraph> = (0..num_times).map(|t| SnapshotGraph::new(t, vec![])).collect();
    for q in quads {
        let snap = snapshots.get_mut(q.time).ok_or_else(|| {
            TkgError::contract(format!("time index {} outside 0..{num_times}", q.time))
        })?;
        snap.edges.push(Triple::new(q.subject, q.relation, q.object));
    }
    Ok(snapshots)
}
