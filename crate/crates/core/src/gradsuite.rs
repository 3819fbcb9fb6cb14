//! End-to-end gradient check of the total training loss on a tiny model.
//!
//! The instance is fixed: 12 entities, 4 raw relations, d = 8, two
//! evolution layers, a 3-snapshot history, one attention head and k = 3.
//! Activations run in eval mode and the virtual graph is sampled once from
//! the unperturbed model and then pinned, so the loss is smooth in every
//! parameter away from max/min ties.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Mode, Tape, Tensor};
use crate::data::{Quadruple, SnapshotGraph, TkgDataset, Triple};
use crate::error::Result;
use crate::model::{forward_window, gradcheck_model_with, multi_label_targets, Ctx, Model, ModelConfig};
use crate::training::loss::{disentangle_loss, prediction_loss, total_loss};

pub const NUM_ENTITIES: usize = 12;
pub const NUM_RAW_RELATIONS: usize = 4;
pub const DIM: usize = 8;
pub const LAYERS: usize = 2;
pub const HISTORY: usize = 3;
pub const HEADS: usize = 1;
pub const SAMPLE_K: usize = 3;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradSuiteOptions {
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Seeds both the parameters and the graph.
    pub seed: u64,
    /// Negates the analytic gradient of the named parameter before the
    /// comparison. Only useful to show that the check catches such a bug.
    pub inject_sign_bug: Option<String>,
}

impl Default for GradSuiteOptions {
    fn default() -> Self {
        GradSuiteOptions {
            eps: 1e-5,
            tolerance: TOLERANCE,
            seed: 0,
            inject_sign_bug: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentError {
    /// Parameter tensor name.
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteReport {
    pub components: Vec<ComponentError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub elapsed: Duration,
}

impl GradSuiteReport {
    pub fn failing(&self) -> Vec<&ComponentError> {
        self.components
            .iter()
            // NaN errors fail too.
            .filter(|c| c.max_rel_error >= self.tolerance || c.max_rel_error.is_nan())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }
}

/// Snapshots `0..=HISTORY`: the history followed by the query snapshot.
///
/// Every entity has one outgoing fact per snapshot and no pair of entities
/// points at each other, so the inverse edges never duplicate a
/// (subject, object) pair. Duplicates would make some attention-score
/// gradients vanish exactly, leaving only rounding noise to compare.
pub fn suite_snapshots(seed: u64) -> Result<Vec<SnapshotGraph>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut quads = Vec::new();
    for time in 0..=HISTORY {
        let mut pairs: HashSet<(usize, usize)> = HashSet::new();
        for subject in 0..NUM_ENTITIES {
            let object = loop {
                let o = rng.gen_range(0..NUM_ENTITIES);
                if o != subject && !pairs.contains(&(o, subject)) {
                    break o;
                }
            };
            pairs.insert((subject, object));
            quads.push(Quadruple {
                subject,
                relation: rng.gen_range(0..NUM_RAW_RELATIONS),
                object,
                time,
            });
        }
    }
    let ds = TkgDataset::from_quadruples(&quads, NUM_ENTITIES, NUM_RAW_RELATIONS, HISTORY + 1, (HISTORY + 1, HISTORY + 1))?;
    Ok(ds.snapshots)
}

pub fn suite_model(seed: u64) -> Result<Model> {
    let mut cfg = ModelConfig::new(NUM_ENTITIES, NUM_RAW_RELATIONS, DIM, LAYERS, HEADS);
    cfg.sample_k = SAMPLE_K;
    Model::new(cfg, seed)
}

/// Runs the check over every parameter tensor of [`suite_model`].
pub fn run_grad_suite(opts: &GradSuiteOptions) -> Result<GradSuiteReport> {
    let start = Instant::now();
    let model = suite_model(opts.seed)?;
    let snapshots = suite_snapshots(opts.seed)?;
    let (history, query) = snapshots.split_at(HISTORY);
    let queries: Vec<Triple> = query[0].edges.clone();
    let facts: HashSet<Triple> = queries.iter().copied().collect();
    let targets = multi_label_targets(&queries, &facts, NUM_ENTITIES);
    let query_time = HISTORY;

    // Sample the virtual graph once, from the unperturbed parameters.
    let pinned = {
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            model: &model,
            mode: Mode::Eval,
            rng: &mut rng,
        };
        forward_window(&mut ctx, history, &queries, query_time, None)?.virtual_graph
    };

    let bug = opts
        .inject_sign_bug
        .as_ref()
        .map(|name| {
            model.params.find(name).ok_or_else(|| {
                crate::TkgError::Config(format!("unknown parameter '{name}' for sign-bug injection"))
            })
        })
        .transpose()?;
    let report = gradcheck_model_with(
        &model,
        &[],
        opts.eps,
        |ctx, _| {
            let out = forward_window(ctx, history, &queries, query_time, pinned.as_ref())?;
            let pred = prediction_loss(ctx.tape, out.scores, &targets)?;
            let dis = disentangle_loss(ctx.tape, &out.betas)?;
            total_loss(ctx.tape, pred, Some(dis))
        },
        |grads: &mut [Tensor]| {
            if let Some(id) = bug {
                grads[id.index()].data_mut().iter_mut().for_each(|g| *g = -*g);
            }
        },
    )?;
    let components = model
        .params
        .names()
        .iter()
        .zip(&report.per_leaf)
        .map(|(name, &e)| ComponentError {
            name: name.clone(),
            max_rel_error: e,
        })
        .collect();
    Ok(GradSuiteReport {
        components,
        max_rel_error: report.max_rel_error,
        tolerance: opts.tolerance,
        coordinates: report.coordinates,
        elapsed: start.elapsed(),
    })
}
