//! Shared fixtures for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape, Tensor};
use crate::data::{SnapshotGraph, Triple};
use crate::model::{Ctx, Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::Result;

pub fn tiny_model(n: usize, raw_rel: usize, d: usize, layers: usize, heads: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(n, raw_rel, d, layers, heads);
    cfg.channels = 4;
    cfg.sample_k = 3;
    Model::new(cfg, seed).expect("valid tiny config")
}

/// Records `f` in eval mode on a fresh tape with frozen parameters.
pub fn with_ctx<T>(model: &Model, f: impl FnOnce(&mut Ctx<'_>) -> Result<T>) -> (Tape, T) {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = {
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            model,
            mode: Mode::Eval,
            rng: &mut rng,
        };
        f(&mut ctx).expect("forward pass succeeds")
    };
    (tape, out)
}

pub fn set(params: &mut ParamStore, id: ParamId, t: Tensor) {
    assert_eq!(params.get(id).shape(), t.shape());
    *params.get_mut(id) = t;
}

pub fn set_fill(params: &mut ParamStore, id: ParamId, v: f64) {
    params.get_mut(id).fill(v);
}

pub fn random_snapshot<R: Rng>(rng: &mut R, n: usize, num_rel: usize, edges: usize, time: usize) -> SnapshotGraph {
    let edges = (0..edges)
        .map(|_| Triple::new(rng.gen_range(0..n), rng.gen_range(0..num_rel), rng.gen_range(0..n)))
        .collect();
    SnapshotGraph::new(time, edges)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}
