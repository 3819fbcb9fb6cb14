//! Cross-time disentanglement into an active and a stable factor.
//!
//! Every node attends over its in-neighbours in the previous snapshot plus a
//! self-loop slot. One score per slot feeds two opposed softmaxes, `η` for
//! the active factor and `η̄` for the stable one. The active factor is
//! carried through a GRU.

use rand::Rng;

use crate::autodiff::{gru_cell, GruVars, Tape, Var};
use crate::data::SnapshotGraph;
use crate::error::{Result, TkgError};
use crate::model::{Ctx, ModelConfig};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `[2·d_h × d_h]`
    pub w_q: ParamId,
    /// `[2·d_h × d_h]`
    pub w_k: ParamId,
    /// `[d_h × d_h]`
    pub w_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

#[derive(Clone, Debug)]
pub struct DisentangleParams {
    pub heads: Vec<HeadParams>,
    pub self_loop_relation: ParamId,
    pub gru: GruParams,
}

impl DisentangleParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, dh) = (cfg.dim, cfg.head_dim());
        let heads = (0..cfg.heads)
            .map(|h| HeadParams {
                w_q: store.add_glorot(format!("disentangle.head{h}.w_q"), &[2 * dh, dh], rng),
                w_k: store.add_glorot(format!("disentangle.head{h}.w_k"), &[2 * dh, dh], rng),
                w_v: store.add_glorot(format!("disentangle.head{h}.w_v"), &[dh, dh], rng),
            })
            .collect();
        let self_loop_relation = store.add_glorot("disentangle.self_loop_relation", &[1, d], rng);
        let mut square = |name: &str, rng: &mut R| store.add_glorot(format!("disentangle.gru.{name}"), &[d, d], rng);
        let (w_z, u_z) = (square("w_z", rng), square("u_z", rng));
        let (w_r, u_r) = (square("w_r", rng), square("u_r", rng));
        let (w_h, u_h) = (square("w_h", rng), square("u_h", rng));
        let gru = GruParams {
            w_z,
            u_z,
            b_z: store.add_zeros("disentangle.gru.b_z", &[d]),
            w_r,
            u_r,
            b_r: store.add_zeros("disentangle.gru.b_r", &[d]),
            w_h,
            u_h,
            b_h: store.add_zeros("disentangle.gru.b_h", &[d]),
        };
        DisentangleParams {
            heads,
            self_loop_relation,
            gru,
        }
    }
}

/// Active and stable factors for the whole node set, each `[|V|×d]`.
#[derive(Clone, Copy, Debug)]
pub struct Factors {
    pub active: Var,
    pub stable: Var,
}

impl Factors {
    pub fn zeros(ctx: &mut Ctx<'_>, n: usize, d: usize) -> Self {
        Factors {
            active: ctx.zeros(n, d),
            stable: ctx.zeros(n, d),
        }
    }
}

/// Attention slot: neighbour `subject` reached over `relation` (or the
/// self-loop) for node `object`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRelation {
    Edge(usize),
    SelfLoop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub subject: usize,
    pub relation: SlotRelation,
    pub object: usize,
}

/// Attention slots of every node: all in-edges of `prev` (duplicates kept),
/// then one self-loop slot per node, so no node is left without a slot.
pub fn neighbor_slots(prev: &SnapshotGraph, num_entities: usize) -> Vec<Slot> {
    prev.edges
        .iter()
        .map(|e| Slot {
            subject: e.subject,
            relation: SlotRelation::Edge(e.relation),
            object: e.object,
        })
        .chain((0..num_entities).map(|o| Slot {
            subject: o,
            relation: SlotRelation::SelfLoop,
            object: o,
        }))
        .collect()
}

/// Slots addressed to node `o`, in slot order.
pub fn neighbor_set(prev: &SnapshotGraph, o: usize) -> Vec<(usize, SlotRelation)> {
    prev.edges
        .iter()
        .filter(|e| e.object == o)
        .map(|e| (e.subject, SlotRelation::Edge(e.relation)))
        .chain(std::iter::once((o, SlotRelation::SelfLoop)))
        .collect()
}

/// `(softmax(e), softmax(−e))` of a plain score list.
pub fn exclusive_softmax(e: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if e.is_empty() {
        return Err(TkgError::contract("exclusive_softmax over an empty score list"));
    }
    let soft = |sign: f64| {
        let max = e.iter().map(|v| sign * v).fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = e.iter().map(|v| (sign * v - max).exp()).collect();
        let total: f64 = ex.iter().sum();
        ex.into_iter().map(|v| v / total).collect::<Vec<_>>()
    };
    Ok((soft(1.0), soft(-1.0)))
}

/// Per-head attention tensors, one entry per slot.
#[derive(Clone, Debug)]
pub struct HeadAttention {
    pub scores: Var,
    pub eta: Var,
    pub eta_bar: Var,
}

pub struct DisentangleOutput {
    pub factors: Factors,
    pub slots: Vec<Slot>,
    pub heads: Vec<HeadAttention>,
    /// Concatenated active pooling before the GRU.
    pub active_input: Var,
}

/// Runs attention over `prev`'s slots for every node and head and returns
/// `(𝒜_t, ℬ_t)`. `alpha_prev` is the GRU state `𝒜_{t−1}`.
pub fn disentangle_step(
    ctx: &mut Ctx<'_>,
    h_t: Var,
    h_prev: Var,
    prev: &SnapshotGraph,
    alpha_prev: Var,
) -> Result<DisentangleOutput> {
    let (n, d, dh) = (ctx.cfg().num_entities, ctx.cfg().dim, ctx.cfg().head_dim());
    for (name, v) in [("current", h_t), ("previous", h_prev), ("active", alpha_prev)] {
        if ctx.tape.value(v).shape() != [n, d] {
            return Err(TkgError::shape(format!(
                "disentangle: {name} features have shape {:?}, expected [{n}, {d}]",
                ctx.tape.value(v).shape()
            )));
        }
    }
    let slots = neighbor_slots(prev, n);
    let segments: Vec<usize> = slots.iter().map(|s| s.object).collect();
    let subjects: Vec<usize> = slots.iter().map(|s| s.subject).collect();

    let params = &ctx.model.disentangler;
    let rel_table = ctx.vars[ctx.model.encoder.relation_emb];
    let self_loop = ctx.vars[params.self_loop_relation];
    let tape = &mut *ctx.tape;
    let loops = tape.gather_rows(self_loop, &vec![0; n])?;
    let relations = if prev.edges.is_empty() {
        loops
    } else {
        let edge_rel = tape.gather_rows(rel_table, &prev.relations())?;
        tape.concat_rows(edge_rel, loops)?
    };
    let queries = tape.gather_rows(h_t, &segments)?;
    let keys = tape.gather_rows(h_prev, &subjects)?;

    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads.len());
    let mut active_parts = Vec::with_capacity(params.heads.len());
    let mut stable_parts = Vec::with_capacity(params.heads.len());
    for (h, hp) in params.heads.iter().enumerate() {
        let q_h = tape.slice_cols(queries, h * dh, dh)?;
        let k_h = tape.slice_cols(keys, h * dh, dh)?;
        let r_h = tape.slice_cols(relations, h * dh, dh)?;
        let q_in = tape.concat(q_h, r_h)?;
        let k_in = tape.concat(k_h, r_h)?;
        let q = tape.matmul(q_in, ctx.vars[hp.w_q])?;
        let k = tape.matmul(k_in, ctx.vars[hp.w_k])?;
        let v = tape.matmul(k_h, ctx.vars[hp.w_v])?;
        let qk = tape.mul(q, k)?;
        let dot = tape.row_sum(qk)?;
        let scores = tape.scale(dot, inv_sqrt);
        let eta = tape.segment_softmax(scores, &segments, n)?;
        let neg = tape.neg(scores);
        let eta_bar = tape.segment_softmax(neg, &segments, n)?;
        let weighted = tape.mul_col(v, eta)?;
        active_parts.push(tape.segment_mean(weighted, &segments, n)?);
        let weighted_bar = tape.mul_col(v, eta_bar)?;
        stable_parts.push(tape.segment_mean(weighted_bar, &segments, n)?);
        heads.push(HeadAttention { scores, eta, eta_bar });
    }
    let join = |tape: &mut Tape, parts: &[Var]| -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.concat(acc, p)?;
        }
        Ok(acc)
    };
    let active_input = join(tape, &active_parts)?;
    let stable = join(tape, &stable_parts)?;
    let g = &params.gru;
    let v = ctx.vars;
    let gru = GruVars {
        w_z: v[g.w_z],
        u_z: v[g.u_z],
        b_z: v[g.b_z],
        w_r: v[g.w_r],
        u_r: v[g.u_r],
        b_r: v[g.b_r],
        w_h: v[g.w_h],
        u_h: v[g.u_h],
        b_h: v[g.b_h],
    };
    let active = gru_cell(tape, alpha_prev, active_input, &gru)?;
    Ok(DisentangleOutput {
        factors: Factors { active, stable },
        slots,
        heads,
        active_input,
    })
}

/// Values of `(η, η̄)` for node `o` and head `h`, in slot order.
pub fn node_attention(tape: &Tape, out: &DisentangleOutput, head: usize, o: usize) -> (Vec<f64>, Vec<f64>) {
    let eta = tape.value(out.heads[head].eta).data();
    let eta_bar = tape.value(out.heads[head].eta_bar).data();
    out.slots
        .iter()
        .enumerate()
        .filter(|(_, s)| s.object == o)
        .map(|(i, _)| (eta[i], eta_bar[i]))
        .unzip()
}
