//! Optimization of text-side parameters against a frozen encoder.

mod objective;
mod optim;

pub use objective::{gradients, loss, loss_and_gradients, Example, Gradients};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SGD_MOMENTUM};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{argmax, tuned_head, PromptSpec, DEFAULT_PROMPT};
use crate::encoder::FrozenDualEncoder;
use crate::error::{Error, Result};
use crate::lbfgs::{minimize, LbfgsOptions, LbfgsReport};
use crate::protocol::evaluate;
use crate::rng::{derive_seed, SeededRng};
use crate::textparams::{init_parameters, Method, TextParameterSet};
use crate::tokens::ClassSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    BestValidation,
    FinalEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub checkpoint_policy: CheckpointPolicy,
    pub seed: u64,
    /// Context length for coop, coop-csc and cona; ignored by name tuning.
    pub l_context: usize,
    /// Fixed prompt for name tuning.
    pub prompt_template: String,
    /// Replace class names by random tokens; trains with α forced to 0.
    pub ablation_random_names: bool,
}

impl TrainConfig {
    /// Published defaults for `method`, taking the first point of each grid.
    pub fn defaults(method: Method) -> Self {
        let grid = TrainGrid::defaults(method);
        let (optimizer, epochs) = match method {
            Method::Coop | Method::CoopCsc => (OptimizerKind::Sgd, 50),
            Method::NameTuning | Method::Cona => (OptimizerKind::Adamw, 20),
        };
        Self {
            method,
            optimizer,
            learning_rate: grid.learning_rates[0],
            batch_size: 8,
            epochs,
            alpha: grid.alphas[0],
            checkpoint_policy: CheckpointPolicy::BestValidation,
            seed: 0,
            l_context: grid.context_lengths[0],
            prompt_template: DEFAULT_PROMPT.to_string(),
            ablation_random_names: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if matches!(self.method, Method::Coop | Method::CoopCsc) && self.l_context == 0 {
            return Err(Error::config(format!("{} needs l_context >= 1", self.method)));
        }
        Ok(())
    }

    /// α actually applied: zero under the random-name ablation.
    pub fn effective_alpha(&self) -> f64 {
        if self.ablation_random_names {
            0.0
        } else {
            self.alpha
        }
    }

    fn with_point(&self, p: &GridPoint) -> Self {
        Self {
            learning_rate: p.learning_rate,
            alpha: p.alpha,
            l_context: p.l_context,
            ..self.clone()
        }
    }
}

/// Hyperparameter axes searched in lexicographic order: learning rate, then
/// α, then context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainGrid {
    pub learning_rates: Vec<f64>,
    pub alphas: Vec<f64>,
    pub context_lengths: Vec<usize>,
}

impl TrainGrid {
    pub fn defaults(method: Method) -> Self {
        match method {
            Method::Coop | Method::CoopCsc => Self {
                learning_rates: vec![6.25e-5, 5e-4, 2e-3, 4e-3],
                alphas: vec![0.0],
                context_lengths: vec![8, 16],
            },
            Method::NameTuning => Self {
                learning_rates: vec![1e-5, 1e-4, 1e-3, 4e-3],
                alphas: vec![0.01, 0.1, 1.0, 10.0],
                context_lengths: vec![0],
            },
            Method::Cona => Self {
                learning_rates: vec![1e-5],
                alphas: vec![1.0, 5.0, 10.0, 20.0],
                context_lengths: vec![4],
            },
        }
    }

    pub fn single(cfg: &TrainConfig) -> Self {
        Self {
            learning_rates: vec![cfg.learning_rate],
            alphas: vec![cfg.alpha],
            context_lengths: vec![cfg.l_context],
        }
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &alpha in &self.alphas {
                for &l_context in &self.context_lengths {
                    out.push(GridPoint {
                        learning_rate,
                        alpha,
                        l_context,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub alpha: f64,
    pub l_context: usize,
}

impl GridPoint {
    /// Child seed owned by this point, a function of its values only, so a
    /// duplicated point reproduces the same run.
    pub fn seed(&self, base: u64) -> u64 {
        derive_seed(
            base,
            &format!(
                "grid:{:016x}:{:016x}:{}",
                self.learning_rate.to_bits(),
                self.alpha.to_bits(),
                self.l_context
            ),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sum of mini-batch objective values seen during the epoch.
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub params: TextParameterSet,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointHistory {
    pub epochs: Vec<EpochRecord>,
}

impl CheckpointHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// Index of the snapshot picked by `policy`.
    pub fn select(&self, policy: CheckpointPolicy) -> Result<usize> {
        if self.epochs.is_empty() {
            return Err(Error::config("empty checkpoint history"));
        }
        match policy {
            CheckpointPolicy::FinalEpoch => Ok(self.epochs.len() - 1),
            CheckpointPolicy::BestValidation => {
                let accs = self
                    .epochs
                    .iter()
                    .map(|e| {
                        e.val_accuracy
                            .ok_or_else(|| Error::config("best_validation needs validation accuracy"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                // argmax keeps the earliest of equal values
                Ok(argmax(&accs))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub initial: TextParameterSet,
    pub final_params: TextParameterSet,
    pub history: CheckpointHistory,
    /// Index into `history.epochs`.
    pub selected_index: usize,
    pub selected: TextParameterSet,
}

impl TrainOutcome {
    pub fn selected_epoch(&self) -> usize {
        self.history.epochs[self.selected_index].epoch
    }
}

/// What the optimizer sees at each step; `indices` point into the train set.
#[derive(Debug)]
pub struct BatchInfo<'a> {
    pub epoch: usize,
    pub indices: &'a [usize],
}

pub type BatchObserver<'a> = &'a (dyn Fn(&BatchInfo<'_>) + Sync);

fn prompt_for(cfg: &TrainConfig, enc: &dyn FrozenDualEncoder) -> Result<Option<PromptSpec>> {
    match cfg.method {
        Method::NameTuning => Ok(Some(PromptSpec::new(&cfg.prompt_template, enc)?)),
        _ => Ok(None),
    }
}

/// Fresh parameters for `cfg`, drawn from the run's `init` stream.
pub fn initial_parameters(
    cfg: &TrainConfig,
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
) -> Result<TextParameterSet> {
    let prompt = prompt_for(cfg, enc)?;
    let rng = SeededRng::new(cfg.seed).fork("init");
    init_parameters(
        cfg.method,
        classes,
        cfg.l_context,
        prompt.as_ref(),
        &rng,
        cfg.ablation_random_names,
    )
}

pub fn train_run(
    train: &[Example],
    val: Option<&[Example]>,
    cfg: &TrainConfig,
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
) -> Result<TrainOutcome> {
    let init = initial_parameters(cfg, enc, classes)?;
    train_from(init, train, val, cfg, enc, classes, None)
}

/// [`train_run`] from explicit starting parameters.
pub fn train_from(
    init: TextParameterSet,
    train: &[Example],
    val: Option<&[Example]>,
    cfg: &TrainConfig,
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
    observer: Option<BatchObserver<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if cfg.checkpoint_policy == CheckpointPolicy::BestValidation && val.is_none_or(<[_]>::is_empty) {
        return Err(Error::config("best_validation checkpointing needs a validation set"));
    }
    let alpha = cfg.effective_alpha();
    let mut shuffle_rng = SeededRng::new(cfg.seed).fork("shuffle");
    let mut params = init.clone();
    let mut flat = params.flatten();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, flat.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = CheckpointHistory::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if let Some(obs) = observer {
                obs(&BatchInfo {
                    epoch,
                    indices: chunk,
                });
            }
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let (l, grads) = loss_and_gradients(&params, &batch, enc, classes, alpha)?;
            epoch_loss += l;
            let flat_grad: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
            opt.step(&mut flat, &flat_grad);
            params.set_flat(&flat)?;
        }
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&tuned_head(enc, &params, classes)?, v)?),
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            val_accuracy,
            params: params.clone(),
        });
    }
    let selected_index = history.select(cfg.checkpoint_policy)?;
    let selected = history.epochs[selected_index].params.clone();
    Ok(TrainOutcome {
        initial: init,
        final_params: params,
        history,
        selected_index,
        selected,
    })
}

/// Full-batch L-BFGS on the objective, from `init`. Used where a converged
/// optimum is needed rather than a fixed epoch budget.
pub fn fit_to_convergence(
    init: &TextParameterSet,
    data: &[Example],
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
    alpha: f64,
    opts: &LbfgsOptions,
) -> Result<(TextParameterSet, LbfgsReport)> {
    let mut scratch = init.clone();
    let (x, report) = minimize(
        init.flatten(),
        |x| {
            scratch.set_flat(x)?;
            let (l, g) = loss_and_gradients(&scratch, data, enc, classes, alpha)?;
            Ok((l, g.iter().flat_map(|t| t.iter().copied()).collect()))
        },
        opts,
    )?;
    let mut out = init.clone();
    out.set_flat(&x)?;
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridScore {
    pub point: GridPoint,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchOutcome {
    pub best: TrainConfig,
    pub scores: Vec<GridScore>,
    /// Fresh run with the winning configuration and the base seed.
    pub final_run: TrainOutcome,
    pub test_accuracy: Option<f64>,
}

/// Index of the best score, earliest on ties.
pub fn pick_best(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::config("empty hyperparameter grid"));
    }
    Ok(argmax(scores))
}

/// Scores every grid point by a full run on `train` and the selected
/// parameters' accuracy on `val`, then reruns the winner.
pub fn grid_search(
    grid: &TrainGrid,
    base: &TrainConfig,
    train: &[Example],
    val: &[Example],
    test: Option<&[Example]>,
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
) -> Result<GridSearchOutcome> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::config("empty hyperparameter grid"));
    }
    for p in &points {
        base.with_point(p).validate()?;
    }
    let accs = points
        .par_iter()
        .map(|p| {
            let cfg = TrainConfig {
                seed: p.seed(base.seed),
                ..base.with_point(p)
            };
            let out = train_run(train, Some(val), &cfg, enc, classes)?;
            evaluate(&tuned_head(enc, &out.selected, classes)?, val)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best_idx = pick_best(&accs)?;
    let best = base.with_point(&points[best_idx]);
    let final_run = train_run(train, Some(val), &best, enc, classes)?;
    let test_accuracy = match test {
        Some(t) => Some(evaluate(&tuned_head(enc, &final_run.selected, classes)?, t)?),
        None => None,
    };
    Ok(GridSearchOutcome {
        best,
        scores: points
            .into_iter()
            .zip(accs)
            .map(|(point, val_accuracy)| GridScore { point, val_accuracy })
            .collect(),
        final_run,
        test_accuracy,
    })
}
