//! ConvTransE scoring, top-k virtual graph sampling and the re-scored pass.

use std::collections::HashSet;

use rand::Rng;

use crate::autodiff::{linear, Tensor, Var};
use crate::data::{inverse_relation, SnapshotGraph, Triple};
use crate::encoder::{evolve_snapshot, EvolutionState};
use crate::error::{Result, TkgError};
use crate::model::{Ctx, ModelConfig};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct ConvTransEParams {
    /// `[C × 2w]`: the first `w` taps read the subject row, the rest the
    /// relation row.
    pub kernel: ParamId,
    pub conv_bias: ParamId,
    /// `[C·d × d]`
    pub proj: ParamId,
    pub proj_bias: ParamId,
}

impl ConvTransEParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (c, w, d) = (cfg.channels, cfg.kernel_width, cfg.dim);
        ConvTransEParams {
            kernel: store.add_glorot("decoder.kernel", &[c, 2 * w], rng),
            conv_bias: store.add_zeros("decoder.conv_bias", &[c]),
            proj: store.add_glorot("decoder.proj", &[c * d, d], rng),
            proj_bias: store.add_zeros("decoder.proj_bias", &[d]),
        }
    }
}

/// Pre-sigmoid ConvTransE logits for `subjects[q]`/`relations[q]` rows
/// against every row of `candidates`: `[Q × |V|]`.
pub fn convtranse_logits(ctx: &mut Ctx<'_>, subjects: Var, relations: Var, candidates: Var) -> Result<Var> {
    let p = ctx.model.decoder.clone();
    let v = ctx.vars;
    let conv = ctx.tape.conv_pair(subjects, relations, v[p.kernel], v[p.conv_bias])?;
    let act = ctx.rrelu(conv)?;
    let projected = linear(ctx.tape, act, v[p.proj], v[p.proj_bias])?;
    ctx.tape.matmul_bt(projected, candidates)
}

/// First-pass probabilities `[Q × |V|]` for every query, scored against
/// `h_final` with the base relation table.
pub fn score_all_queries(ctx: &mut Ctx<'_>, h_final: Var, queries: &[Triple]) -> Result<Var> {
    if queries.is_empty() {
        return Err(TkgError::contract("score_all_queries needs at least one query"));
    }
    let rel_table = ctx.vars[ctx.model.encoder.relation_emb];
    let subj: Vec<usize> = queries.iter().map(|q| q.subject).collect();
    let rels: Vec<usize> = queries.iter().map(|q| q.relation).collect();
    let s = ctx.tape.gather_rows(h_final, &subj)?;
    let r = ctx.tape.gather_rows(rel_table, &rels)?;
    let logits = convtranse_logits(ctx, s, r, h_final)?;
    Ok(ctx.tape.sigmoid(logits))
}

/// Sampled edges for the query timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VirtualGraph {
    pub edges: Vec<Triple>,
    pub query_time: usize,
}

impl VirtualGraph {
    pub fn as_snapshot(&self) -> SnapshotGraph {
        SnapshotGraph::new(self.query_time, self.edges.clone())
    }
}

/// Indices of the `k` largest entries of `row` (clipped to its length),
/// ties broken towards the lower index, in descending score order.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

/// For each query, top-k candidates become edges `(s, r, o_i)` together with
/// their inverses `(o_i, r⁻¹, s)`. The union over queries keeps first
/// occurrences only.
pub fn sample_virtual_graph(
    scores: &Tensor,
    queries: &[Triple],
    k: usize,
    num_raw_relations: usize,
    query_time: usize,
) -> VirtualGraph {
    let mut seen = HashSet::new();
    let mut forward = Vec::new();
    let mut inverse = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        for o in top_k(scores.row(qi), k) {
            let edge = Triple::new(q.subject, q.relation, o);
            if seen.insert(edge) {
                forward.push(edge);
            }
        }
    }
    for e in &forward {
        let inv = Triple::new(e.object, inverse_relation(e.relation, num_raw_relations), e.subject);
        if seen.insert(inv) {
            inverse.push(inv);
        }
    }
    forward.extend(inverse);
    VirtualGraph {
        edges: forward,
        query_time,
    }
}

/// One further evolution step over `graph`, gated by the factors carried in
/// `state`, then re-scoring of `queries`.
pub fn rescore_with_virtual(
    ctx: &mut Ctx<'_>,
    state: &EvolutionState,
    graph: &VirtualGraph,
    queries: &[Triple],
) -> Result<(EvolutionState, Var)> {
    let next = evolve_snapshot(ctx, Some(state), &graph.as_snapshot())?;
    let h = *next.h_hat.last().expect("at least one layer");
    let scores = score_all_queries(ctx, h, queries)?;
    Ok((next, scores))
}
