//! The epoch loop: one Adam step per training window, in time order.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Tensor};
use crate::data::{HistoryWindow, Split, TkgDataset};
use crate::error::{Result, TkgError};
use crate::eval::{evaluate_split, FilterMode};
use crate::model::{forward_window, multi_label_targets, Ctx, Model};
use crate::training::adam::AdamState;
use crate::training::checkpoint::Checkpoint;
use crate::training::config::TrainConfig;
use crate::training::loss::{disentangle_loss, prediction_loss, total_loss};

/// Stream of the training RNG; parameter initialisation uses stream 0.
const TRAIN_STREAM: u64 = 1;

/// Losses of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub l_pred: f64,
    /// Summed over node pairs, as optimised.
    pub l_dis: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based index of the finished epoch.
    pub epoch: usize,
    pub l_pred: f64,
    /// Mean per window of the stability loss divided by the node count.
    pub l_dis: f64,
    pub wall_time: Duration,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_pred: f64,
    pub l_dis: f64,
    /// Absent when the dataset has no validation timestamps.
    pub valid_mrr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_valid_mrr: Option<f64>,
    pub stale_epochs: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &TkgDataset) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(dataset.num_entities, dataset.num_raw_relations), config.seed)?;
        let adam = AdamState::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Trainer {
            config,
            model,
            adam,
            rng,
            epoch: 0,
            best_valid_mrr: None,
            stale_epochs: 0,
        })
    }

    /// Resumes from `ckpt`, which must match `dataset`'s sizes.
    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: &TkgDataset) -> Result<Self> {
        if (ckpt.num_entities, ckpt.num_raw_relations) != (dataset.num_entities, dataset.num_raw_relations) {
            return Err(TkgError::checkpoint(
                "dataset",
                format!(
                    "checkpoint was trained on {} entities and {} relations, dataset has {} and {}",
                    ckpt.num_entities, ckpt.num_raw_relations, dataset.num_entities, dataset.num_raw_relations
                ),
            ));
        }
        ckpt.config.validate()?;
        let model = ckpt.restore_model(&ckpt.config)?;
        Ok(Trainer {
            config: ckpt.config.clone(),
            model,
            adam: ckpt.adam.clone(),
            rng: ckpt.rng(),
            epoch: ckpt.epoch,
            best_valid_mrr: ckpt.best_valid_mrr,
            stale_epochs: ckpt.stale_epochs,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            num_entities: self.model.config.num_entities,
            num_raw_relations: self.model.config.num_raw_relations,
            epoch: self.epoch,
            best_valid_mrr: self.best_valid_mrr,
            stale_epochs: self.stale_epochs,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Forward, backward and one Adam step on a single window. Returns
    /// `None` when the window has no queries.
    pub fn train_window(&mut self, dataset: &TkgDataset, window: &HistoryWindow<'_>) -> Result<Option<StepLoss>> {
        if window.queries.is_empty() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let vars = self.model.params.bind(&mut tape, true);
        let (loss, l_pred, l_dis) = {
            let mut ctx = Ctx {
                tape: &mut tape,
                vars: &vars,
                model: &self.model,
                mode: Mode::Train,
                rng: &mut self.rng,
            };
            let out = forward_window(&mut ctx, window.history, &window.queries, window.query_time, None)?;
            let facts = dataset.facts_at(window.query_time);
            let targets = multi_label_targets(&window.queries, &facts, dataset.num_entities);
            let pred = prediction_loss(ctx.tape, out.scores, &targets)?;
            let dis = if self.model.config.ablation.disentangle {
                Some(disentangle_loss(ctx.tape, &out.betas)?)
            } else {
                None
            };
            let loss = total_loss(ctx.tape, pred, dis)?;
            let l_dis = dis.map_or(0.0, |d| ctx.tape.value(d).item());
            (loss, ctx.tape.value(pred).item(), l_dis)
        };
        tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.gradients(&tape);
        self.adam.step(&mut self.model.params, &grads, self.config.learning_rate)?;
        Ok(Some(StepLoss { l_pred, l_dis }))
    }

    /// One pass over the training windows.
    pub fn train_epoch(&mut self, dataset: &TkgDataset) -> Result<EpochStats> {
        let start = Instant::now();
        let windows = dataset.history_windows(self.config.history, Split::Train)?;
        let n = dataset.num_entities as f64;
        let (mut pred, mut dis, mut steps) = (0.0, 0.0, 0usize);
        for w in &windows {
            if let Some(s) = self.train_window(dataset, w)? {
                pred += s.l_pred;
                dis += s.l_dis / n;
                steps += 1;
            }
        }
        self.epoch += 1;
        let steps = steps.max(1) as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            l_pred: pred / steps,
            l_dis: dis / steps,
            wall_time: start.elapsed(),
        })
    }

    /// Time-aware filtered validation MRR, or `None` without validation data.
    pub fn valid_mrr(&self, dataset: &TkgDataset) -> Result<Option<f64>> {
        let range = dataset.split_range(Split::Valid);
        if range.clone().all(|t| t == 0 || dataset.snapshots[t].edges.is_empty()) {
            return Ok(None);
        }
        let rep = evaluate_split(&self.model, dataset, Split::Valid, self.config.history, FilterMode::TimeAware)?;
        Ok(Some(rep.mrr))
    }

    /// Whether the patience budget is spent.
    pub fn should_stop(&self) -> bool {
        self.config.patience.is_some_and(|p| self.stale_epochs >= p)
    }

    fn track_validation(&mut self, mrr: Option<f64>) {
        let Some(mrr) = mrr else { return };
        match self.best_valid_mrr {
            Some(best) if mrr <= best => self.stale_epochs += 1,
            _ => {
                self.best_valid_mrr = Some(mrr);
                self.stale_epochs = 0;
            }
        }
    }

    /// Trains until `max_epochs` (counting epochs already completed) or the
    /// patience budget runs out. `on_epoch` sees each record after the
    /// trainer state has been updated, so it can checkpoint.
    pub fn run<F>(&mut self, dataset: &TkgDataset, mut on_epoch: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&EpochRecord, &EpochStats, &Trainer) -> Result<()>,
    {
        let mut records = Vec::new();
        while self.epoch < self.config.max_epochs && !self.should_stop() {
            let stats = self.train_epoch(dataset)?;
            let valid_mrr = self.valid_mrr(dataset)?;
            self.track_validation(valid_mrr);
            let rec = EpochRecord {
                epoch: stats.epoch,
                l_pred: stats.l_pred,
                l_dis: stats.l_dis,
                valid_mrr,
            };
            on_epoch(&rec, &stats, self)?;
            records.push(rec);
        }
        Ok(records)
    }
}
