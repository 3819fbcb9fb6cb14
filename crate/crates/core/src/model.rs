//! Model configuration, parameter layout and the full forward pass over one
//! history window: evolution, disentanglement, first-pass scoring, virtual
//! graph sampling and re-scoring.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check_with, GradCheckReport, Mode, Tape, Tensor, Var};
use crate::data::{SnapshotGraph, Triple};
use crate::decoder::{self, ConvTransEParams, VirtualGraph};
use crate::disentangle::{DisentangleParams, Factors};
use crate::encoder::{self, EncoderParams, EvolutionState};
use crate::error::{Result, TkgError};
use crate::params::{Bound, ParamStore};

/// Runtime switches for the ablation variants. All on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Cross-time same-layer inputs and the historical update term.
    pub multi_span: bool,
    /// Active/stable factors, the factor GRU and the stability loss.
    pub disentangle: bool,
    /// Second scoring pass over a sampled virtual graph.
    pub virtual_graph: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            multi_span: true,
            disentangle: true,
            virtual_graph: true,
        }
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        multi_span: true,
        disentangle: true,
        virtual_graph: true,
    };

    /// The full model plus the four reduced variants, with display names.
    pub fn variants() -> [(&'static str, Ablation); 5] {
        [
            ("full", Ablation::FULL),
            ("w/o multi-span", Ablation { multi_span: false, ..Ablation::FULL }),
            ("w/o disentangle", Ablation { disentangle: false, ..Ablation::FULL }),
            (
                "w/o multi-span & disentangle",
                Ablation {
                    multi_span: false,
                    disentangle: false,
                    ..Ablation::FULL
                },
            ),
            ("w/o virtual graph", Ablation { virtual_graph: false, ..Ablation::FULL }),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_entities: usize,
    pub num_raw_relations: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Decoder convolution channels.
    pub channels: usize,
    /// Decoder convolution width (odd).
    pub kernel_width: usize,
    pub sample_k: usize,
    pub rrelu_lower: f64,
    pub rrelu_upper: f64,
    pub layer_norm_eps: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(num_entities: usize, num_raw_relations: usize, dim: usize, layers: usize, heads: usize) -> Self {
        ModelConfig {
            num_entities,
            num_raw_relations,
            dim,
            layers,
            heads,
            channels: 32,
            kernel_width: 3,
            sample_k: 50,
            rrelu_lower: 1.0 / 8.0,
            rrelu_upper: 1.0 / 3.0,
            layer_norm_eps: 1e-5,
            ablation: Ablation::default(),
        }
    }

    pub fn num_relations(&self) -> usize {
        2 * self.num_raw_relations
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TkgError::Config(m));
        if self.num_entities == 0 || self.num_raw_relations == 0 {
            return fail("model needs at least one entity and one relation".into());
        }
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.channels == 0 {
            return fail("dim, layers, heads and channels must all be at least 1".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.kernel_width.is_multiple_of(2) {
            return fail(format!("kernel width {} must be odd", self.kernel_width));
        }
        if self.sample_k == 0 {
            return fail("sampling count k must be at least 1".into());
        }
        if !(0.0 < self.rrelu_lower && self.rrelu_lower <= self.rrelu_upper && self.rrelu_upper < 1.0) {
            return fail("rrelu bounds must satisfy 0 < lower <= upper < 1".into());
        }
        Ok(())
    }
}

/// Parameter layout plus values.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub disentangler: DisentangleParams,
    pub decoder: ConvTransEParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = EncoderParams::register(&mut params, &config, &mut rng);
        let disentangler = DisentangleParams::register(&mut params, &config, &mut rng);
        let decoder = ConvTransEParams::register(&mut params, &config, &mut rng);
        Ok(Model {
            config,
            params,
            encoder,
            disentangler,
            decoder,
        })
    }
}

/// Everything an operation needs while recording onto a tape.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a Bound,
    pub model: &'a Model,
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
}

impl Ctx<'_> {
    pub fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn rrelu(&mut self, x: Var) -> Result<Var> {
        let (lo, hi) = (self.model.config.rrelu_lower, self.model.config.rrelu_upper);
        self.tape.rrelu(x, self.mode, lo, hi, self.rng)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.tape.constant(Tensor::zeros(&[rows, cols]))
    }
}

/// Result of running the model over one window.
pub struct WindowOutput {
    /// First-pass probabilities `[Q × |V|]`.
    pub first_pass: Var,
    /// Final probabilities: the re-scored pass, or the first pass when the
    /// virtual graph is ablated.
    pub scores: Var,
    pub virtual_graph: Option<VirtualGraph>,
    /// Stable factors computed along the window, in time order.
    pub betas: Vec<Var>,
    /// Factors computed along the window, in time order.
    pub factors: Vec<Factors>,
    pub state: EvolutionState,
}

/// Evolves `history`, scores `queries` and, unless ablated, re-scores them
/// after one more evolution step over the sampled virtual graph.
///
/// `fixed_virtual` pins the sampled graph (used by gradient checks so the
/// discrete top-k choice does not move under perturbation).
pub fn forward_window(
    ctx: &mut Ctx<'_>,
    history: &[SnapshotGraph],
    queries: &[Triple],
    query_time: usize,
    fixed_virtual: Option<&VirtualGraph>,
) -> Result<WindowOutput> {
    let encoding = encoder::evolve_window(ctx, history)?;
    let final_layer = *encoding.state.h_hat.last().expect("at least one layer");
    let first_pass = decoder::score_all_queries(ctx, final_layer, queries)?;
    let (scores, virtual_graph, state) = if ctx.cfg().ablation.virtual_graph {
        let graph = match fixed_virtual {
            Some(g) => g.clone(),
            None => {
                let k = ctx.cfg().sample_k;
                let raw = ctx.cfg().num_raw_relations;
                decoder::sample_virtual_graph(ctx.tape.value(first_pass), queries, k, raw, query_time)
            }
        };
        let (state, scores) = decoder::rescore_with_virtual(ctx, &encoding.state, &graph, queries)?;
        (scores, Some(graph), state)
    } else {
        (first_pass, None, encoding.state)
    };
    Ok(WindowOutput {
        first_pass,
        scores,
        virtual_graph,
        betas: encoding.betas,
        factors: encoding.factors,
        state,
    })
}

/// Multi-label targets `[Q × |V|]`: 1 for every true object of the query's
/// `(subject, relation)` among `facts`.
pub fn multi_label_targets(queries: &[Triple], facts: &HashSet<Triple>, num_entities: usize) -> Vec<f64> {
    let mut targets = vec![0.0; queries.len() * num_entities];
    for (qi, q) in queries.iter().enumerate() {
        for f in facts {
            if f.subject == q.subject && f.relation == q.relation {
                targets[qi * num_entities + f.object] = 1.0;
            }
        }
    }
    targets
}

/// Central-difference check of `f` with respect to every model parameter
/// followed by the `extras` leaves. Activations run in eval mode.
///
/// `per_leaf` in the report follows the parameter store order, then `extras`.
pub fn gradcheck_model<F>(model: &Model, extras: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    gradcheck_model_with(model, extras, eps, f, |_| {})
}

/// [`gradcheck_model`] with a hook that may rewrite the analytic gradients.
pub fn gradcheck_model_with<F, T>(model: &Model, extras: &[Tensor], eps: f64, mut f: F, tamper: T) -> Result<GradCheckReport>
where
    F: FnMut(&mut Ctx<'_>, &[Var]) -> Result<Var>,
    T: FnOnce(&mut [Tensor]),
{
    let np = model.params.len();
    let mut leaves = model.params.tensors().to_vec();
    leaves.extend_from_slice(extras);
    finite_difference_check_with(&leaves, eps, |tape, vars| {
        let bound = Bound::from_vars(vars[..np].to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx {
            tape,
            vars: &bound,
            model,
            mode: Mode::Eval,
            rng: &mut rng,
        };
        f(&mut ctx, &vars[np..])
    }, tamper)
}
