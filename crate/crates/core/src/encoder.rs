//! Multi-span evolution backbone.
//!
//! At each timestamp the node features pass through `ω` message-passing
//! layers. Layer `l` reads the current output of layer `l−1` plus a
//! transformed copy of its own output at the previous timestamp, aggregates
//! neighbour and self-loop messages with PNA statistics, and mixes the result
//! with its previous output through a gate driven by the active factor. The
//! layer-0 input is gated between the entity table and the previous final
//! output by the stable factor.

use rand::Rng;

use crate::autodiff::{gated_mix, linear, Var};
use crate::data::SnapshotGraph;
use crate::disentangle::{self, Factors};
use crate::error::{Result, TkgError};
use crate::model::{Ctx, ModelConfig};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w_nbr: ParamId,
    pub w_sf: ParamId,
    pub w_rel: ParamId,
    pub b_rel: ParamId,
    /// `[4d × d]` projection of the concatenated PNA statistics.
    pub pna_proj: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w_ce: ParamId,
    pub w_ug: ParamId,
    pub b_ug: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub entity_emb: ParamId,
    pub relation_emb: ParamId,
    /// Pooled in place of incoming relations for nodes without in-edges.
    pub null_relation: ParamId,
    pub layers: Vec<LayerParams>,
    pub w_ig: ParamId,
    pub b_ig: ParamId,
    pub g_w1: ParamId,
    pub g_b1: ParamId,
    pub g_w2: ParamId,
    pub g_b2: ParamId,
}

impl EncoderParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let entity_emb = store.add_glorot("encoder.entity_emb", &[cfg.num_entities, d], rng);
        let relation_emb = store.add_glorot("encoder.relation_emb", &[cfg.num_relations(), d], rng);
        let null_relation = store.add_glorot("encoder.null_relation", &[1, d], rng);
        let layers = (1..=cfg.layers)
            .map(|l| {
                let name = |p: &str| format!("encoder.layer{l}.{p}");
                LayerParams {
                    w_nbr: store.add_glorot(name("w_nbr"), &[d, d], rng),
                    w_sf: store.add_glorot(name("w_sf"), &[d, d], rng),
                    w_rel: store.add_glorot(name("w_rel"), &[d, d], rng),
                    b_rel: store.add_zeros(name("b_rel"), &[d]),
                    pna_proj: store.add_glorot(name("pna_proj"), &[4 * d, d], rng),
                    ln_gain: store.add_filled(name("ln_gain"), &[d], 1.0),
                    ln_bias: store.add_zeros(name("ln_bias"), &[d]),
                    w_ce: store.add_glorot(name("w_ce"), &[d, d], rng),
                    w_ug: store.add_glorot(name("w_ug"), &[d, d], rng),
                    b_ug: store.add_zeros(name("b_ug"), &[d]),
                }
            })
            .collect();
        EncoderParams {
            entity_emb,
            relation_emb,
            null_relation,
            layers,
            w_ig: store.add_glorot("encoder.w_ig", &[d, d], rng),
            b_ig: store.add_zeros("encoder.b_ig", &[d]),
            g_w1: store.add_glorot("encoder.g.w1", &[2 * d, d], rng),
            g_b1: store.add_zeros("encoder.g.b1", &[d]),
            g_w2: store.add_glorot("encoder.g.w2", &[d, d], rng),
            g_b2: store.add_zeros("encoder.g.b2", &[d]),
        }
    }

    fn layer(&self, l: usize) -> Result<&LayerParams> {
        if l == 0 || l > self.layers.len() {
            return Err(TkgError::contract(format!(
                "layer index {l} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[l - 1])
    }
}

/// Node features of the most recently evolved timestamp.
#[derive(Clone, Debug)]
pub struct EvolutionState {
    /// `Ĥ_t^l` for `l = 0..=ω`, each `[|V|×d]`.
    pub h_hat: Vec<Var>,
    /// `Ĥ_{t−1}^l` as used by this step (the layer-0 output at window start).
    pub h_hat_prev: Vec<Var>,
    /// Aggregated features `H_t^l` for `l = 1..=ω`.
    pub aggregated: Vec<Var>,
    /// Update gates `U_t^l` for `l = 1..=ω`.
    pub update_gates: Vec<Var>,
    /// Initialisation gate `I_t`; absent at window start.
    pub init_gate: Option<Var>,
    /// Factors the next timestamp will consume.
    pub factors: Factors,
}

/// `r^l = ℛ W_REL^l + b_REL^l` for the whole relation table.
pub fn relation_layer_embed(ctx: &mut Ctx<'_>, l: usize) -> Result<Var> {
    let enc = &ctx.model.encoder;
    let layer = enc.layer(l)?;
    let (rel, w, b) = (ctx.vars[enc.relation_emb], ctx.vars[layer.w_rel], ctx.vars[layer.b_rel]);
    linear(ctx.tape, rel, w, b)
}

/// PNA message passing for one layer.
///
/// Each node aggregates `{ (ḧ_s + r^l_r) W_nbr : (s, r, o) ∈ G } ⊎ { ḧ_o W_sf }`
/// into `[mean | max | min | std]`, projects back to `d`, and returns
/// `ḧ + RReLU(LayerNorm(projection))`.
pub fn aggregate_messages(
    ctx: &mut Ctx<'_>,
    snapshot: &SnapshotGraph,
    ddot_h: Var,
    r_l: Var,
    l: usize,
) -> Result<Var> {
    let n = ctx.cfg().num_entities;
    if ctx.tape.value(ddot_h).rows() != n {
        return Err(TkgError::shape(format!(
            "aggregate_messages: {} feature rows for {n} entities",
            ctx.tape.value(ddot_h).rows()
        )));
    }
    let layer = ctx.model.encoder.layer(l)?.clone();
    let v = ctx.vars;
    let tape = &mut *ctx.tape;

    let self_msgs = tape.matmul(ddot_h, v[layer.w_sf])?;
    let mut segments: Vec<usize> = snapshot.objects();
    let messages = if snapshot.edges.is_empty() {
        self_msgs
    } else {
        let src = tape.gather_rows(ddot_h, &snapshot.subjects())?;
        let rel = tape.gather_rows(r_l, &snapshot.relations())?;
        let summed = tape.add(src, rel)?;
        let nbr = tape.matmul(summed, v[layer.w_nbr])?;
        tape.concat_rows(nbr, self_msgs)?
    };
    segments.extend(0..n);

    let stats = tape.segment_pna(messages, &segments, n)?;
    let projected = tape.matmul(stats, v[layer.pna_proj])?;
    let eps = ctx.model.config.layer_norm_eps;
    let normed = tape.layer_norm(projected, v[layer.ln_gain], v[layer.ln_bias], eps)?;
    let act = ctx.rrelu(normed)?;
    ctx.tape.add(ddot_h, act)
}

/// `ḧ_t^{l−1} = Ĥ_t^{l−1} + Ĥ_{t−1}^l W_CE^l`; just `Ĥ_t^{l−1}` without
/// multi-span.
pub fn cross_time_input(ctx: &mut Ctx<'_>, h_hat_lower: Var, h_hat_prev_l: Var, l: usize) -> Result<Var> {
    if !ctx.cfg().ablation.multi_span {
        return Ok(h_hat_lower);
    }
    let w_ce = ctx.vars[ctx.model.encoder.layer(l)?.w_ce];
    let carried = ctx.tape.matmul(h_hat_prev_l, w_ce)?;
    ctx.tape.add(h_hat_lower, carried)
}

/// `U = σ(𝒜_{t−1} W_UG^l + b_UG^l)`, `Ĥ_t^l = U ⊗ H + (1 − U) ⊗ Ĥ_{t−1}^l`.
///
/// Without multi-span the historical term is dropped and `Ĥ_t^l = H`.
/// Returns the updated features and the gate.
pub fn gated_update(
    ctx: &mut Ctx<'_>,
    h_agg: Var,
    h_hat_prev_l: Var,
    active: Var,
    l: usize,
) -> Result<(Var, Var)> {
    let layer = ctx.model.encoder.layer(l)?;
    let (w, b) = (ctx.vars[layer.w_ug], ctx.vars[layer.b_ug]);
    let pre = linear(ctx.tape, active, w, b)?;
    let gate = ctx.tape.sigmoid(pre);
    if !ctx.cfg().ablation.multi_span {
        return Ok((h_agg, gate));
    }
    let out = gated_mix(ctx.tape, gate, h_agg, h_hat_prev_l)?;
    Ok((out, gate))
}

/// Mean of the base relation embeddings over each node's in-edges in
/// `snapshot`; nodes without in-edges get the learned null relation.
pub fn pooled_in_relations(ctx: &mut Ctx<'_>, snapshot: &SnapshotGraph) -> Result<Var> {
    let n = ctx.cfg().num_entities;
    let enc = &ctx.model.encoder;
    let (rel_emb, null_rel) = (ctx.vars[enc.relation_emb], ctx.vars[enc.null_relation]);
    let mut has_in = vec![false; n];
    for e in &snapshot.edges {
        has_in[e.object] = true;
    }
    let lonely: Vec<usize> = (0..n).filter(|&o| !has_in[o]).collect();
    let mut segments = snapshot.objects();
    segments.extend(&lonely);
    let tape = &mut *ctx.tape;
    let nulls = tape.gather_rows(null_rel, &vec![0; lonely.len()])?;
    let rows = if snapshot.edges.is_empty() {
        nulls
    } else {
        let rels = tape.gather_rows(rel_emb, &snapshot.relations())?;
        tape.concat_rows(rels, nulls)?
    };
    tape.segment_mean(rows, &segments, n)
}

/// Layer-0 features `g(P_t ∥ MP{ℛ_K(o)})`.
///
/// At window start `P = 𝒱`; otherwise `I = σ(ℬ_{t−1} W_IG + b_IG)` and
/// `P = I ⊗ 𝒱 + (1 − I) ⊗ Ĥ_{t−1}^ω`. `prev` carries `(Ĥ_{t−1}^ω, ℬ_{t−1})`.
/// Returns the features and the gate when one was applied.
pub fn init_layer0(
    ctx: &mut Ctx<'_>,
    snapshot: &SnapshotGraph,
    prev: Option<(Var, Var)>,
) -> Result<(Var, Option<Var>)> {
    let enc = ctx.model.encoder.clone();
    let v = ctx.vars;
    let entities = v[enc.entity_emb];
    let (p, gate) = match prev {
        None => (entities, None),
        Some((prev_final, stable)) => {
            let pre = linear(ctx.tape, stable, v[enc.w_ig], v[enc.b_ig])?;
            let gate = ctx.tape.sigmoid(pre);
            (gated_mix(ctx.tape, gate, entities, prev_final)?, Some(gate))
        }
    };
    let pooled = pooled_in_relations(ctx, snapshot)?;
    let joined = ctx.tape.concat(p, pooled)?;
    let hidden = linear(ctx.tape, joined, v[enc.g_w1], v[enc.g_b1])?;
    let hidden = ctx.rrelu(hidden)?;
    let out = linear(ctx.tape, hidden, v[enc.g_w2], v[enc.g_b2])?;
    Ok((out, gate))
}

/// Runs layer 0 and all `ω` layers for one snapshot.
///
/// `prev` is the state after the previous timestamp, or `None` at window
/// start, where every `Ĥ_{t−1}^l` resolves to this step's layer-0 output and
/// factors are zero. The returned state carries `prev`'s factors forward.
pub fn evolve_snapshot(
    ctx: &mut Ctx<'_>,
    prev: Option<&EvolutionState>,
    snapshot: &SnapshotGraph,
) -> Result<EvolutionState> {
    let layers = ctx.cfg().layers;
    let (h0, init_gate) = init_layer0(
        ctx,
        snapshot,
        prev.map(|p| (*p.h_hat.last().expect("non-empty"), p.factors.stable)),
    )?;
    let (h_hat_prev, factors) = match prev {
        Some(p) => (p.h_hat.clone(), p.factors),
        None => {
            let (n, d) = (ctx.cfg().num_entities, ctx.cfg().dim);
            (vec![h0; layers + 1], Factors::zeros(ctx, n, d))
        }
    };

    let mut h_hat = vec![h0];
    let mut aggregated = Vec::with_capacity(layers);
    let mut update_gates = Vec::with_capacity(layers);
    for l in 1..=layers {
        let r_l = relation_layer_embed(ctx, l)?;
        let ddot = cross_time_input(ctx, h_hat[l - 1], h_hat_prev[l], l)?;
        let agg = aggregate_messages(ctx, snapshot, ddot, r_l, l)?;
        let (updated, gate) = gated_update(ctx, agg, h_hat_prev[l], factors.active, l)?;
        h_hat.push(updated);
        aggregated.push(agg);
        update_gates.push(gate);
    }
    Ok(EvolutionState {
        h_hat,
        h_hat_prev,
        aggregated,
        update_gates,
        init_gate,
        factors,
    })
}

/// Encoding of a full history window.
pub struct WindowEncoding {
    pub state: EvolutionState,
    /// Factors produced after each timestamp past the first.
    pub factors: Vec<Factors>,
    /// Stable factors of `factors`, in order.
    pub betas: Vec<Var>,
}

/// Evolves the snapshots of `history` in order. After every timestamp but
/// the first, the disentangler compares `Ĥ_t^ω` with `Ĥ_{t−1}^ω` over
/// `G_{t−1}` and its factors drive the gates of the next timestamp.
pub fn evolve_window(ctx: &mut Ctx<'_>, history: &[SnapshotGraph]) -> Result<WindowEncoding> {
    if history.is_empty() {
        return Err(TkgError::contract("cannot evolve an empty history window"));
    }
    let mut state = evolve_snapshot(ctx, None, &history[0])?;
    let mut factors = Vec::new();
    let mut betas = Vec::new();
    for pair in history.windows(2) {
        let next = evolve_snapshot(ctx, Some(&state), &pair[1])?;
        let new_factors = if ctx.cfg().ablation.disentangle {
            let h_t = *next.h_hat.last().expect("non-empty");
            let h_prev = *state.h_hat.last().expect("non-empty");
            let out = disentangle::disentangle_step(ctx, h_t, h_prev, &pair[0], next.factors.active)?;
            betas.push(out.factors.stable);
            out.factors
        } else {
            next.factors
        };
        factors.push(new_factors);
        state = EvolutionState {
            factors: new_factors,
            ..next
        };
    }
    Ok(WindowEncoding { state, factors, betas })
}
