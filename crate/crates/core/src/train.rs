//! Adam, the per-trial training loop, best-epoch selection and
//! aggregation across trials.

use std::time::Instant;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset, TaskData, BATCH_SIZE};
use crate::error::{Error, Result};
use crate::models::{self, stream, stream_rng, Head, Model, ModelSpec};
use crate::sparse::Backend;
use crate::tensor::{self, Element, Tensor};
use crate::tree::ParamCount;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers of Adam for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    /// Zeroed moments for parameters of the given element counts.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_params(params: &[Tensor<T>]) -> Self {
        Self::new(&params.iter().map(Tensor::numel).collect::<Vec<_>>())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates `params` from their accumulated gradients; parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &[Tensor<T>], lr: f64) -> Result<()> {
        let grads: Vec<Vec<T>> = params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect();
        let refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(params, &refs, self, lr)
    }
}

/// Bias-corrected Adam: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Element>(params: &[Tensor<T>], grads: &[&[T]], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "adam_step: {} parameters, {} gradients, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || p.numel() != state.m[i].len() {
            return Err(Error::Usage(format!(
                "adam_step: parameter {i} has {} elements, gradient {}, state {}",
                p.numel(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(state.eps));
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let mut data = p.data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..g.len() {
            m[k] = b1 * m[k] + (T::one() - b1) * g[k];
            v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            data[k] = data[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Everything that determines a set of trials of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub spec: ModelSpec,
    /// Defaults to the family's rate when absent.
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch: usize,
    pub trials: usize,
    pub base_seed: u64,
    pub backend: Backend,
    /// Record per-tree-layer gradient norms at the end of every epoch.
    pub grad_probe: bool,
}

impl TrainConfig {
    pub fn new(spec: ModelSpec) -> Self {
        Self {
            spec,
            learning_rate: None,
            epochs: 100,
            batch: BATCH_SIZE,
            trials: 10,
            base_seed: 0,
            backend: Backend::default(),
            grad_probe: false,
        }
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| self.spec.family().default_learning_rate())
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Parameter("trials must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch must be at least 1".into()));
        }
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norms: Option<Vec<f64>>,
}

/// Per-epoch history of one trial and its selected epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// `None` when the trial failed.
    pub best_epoch: Option<usize>,
    /// Classifier parameters (the CNN trunk excluded).
    pub params: ParamCount,
    pub trunk_params: ParamCount,
    pub wall_seconds: f64,
    pub failure: Option<String>,
}

impl TrialReport {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn best(&self) -> Option<&EpochMetrics> {
        self.best_epoch.map(|i| &self.epochs[i])
    }

    /// Equality of everything except the wall time.
    pub fn same_results(&self, other: &Self) -> bool {
        self.trial == other.trial
            && self.seed == other.seed
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.params == other.params
            && self.failure == other.failure
    }
}

/// Index of the smallest value, the first one on ties. NaN never wins.
pub fn best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        if best.is_none_or(|b| l < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

fn count_correct<T: Element>(head: Head, logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let probs = tensor::no_grad(|| models::probabilities(head, logits))?;
    Ok(models::labels_from_probabilities(head, &probs)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count())
}

/// Mean loss and accuracy over `dataset` in eval mode, visited in index
/// order.
pub fn evaluate<T: Element>(model: &mut Model<T>, dataset: &Dataset, batch: usize) -> Result<(f64, f64)> {
    model.eval();
    let mut rng = stream_rng(0, 0);
    let (mut loss, mut correct) = (0.0, 0usize);
    tensor::no_grad(|| -> Result<()> {
        for b in batches::<T, _>(dataset, batch, false, &mut rng)? {
            let logits = model.forward(&b.x)?;
            loss += model.loss(&logits, &b.labels)?.item().as_f64() * b.labels.len() as f64;
            correct += count_correct(model.head(), &logits, &b.labels)?;
        }
        Ok(())
    })?;
    let n = dataset.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Per-tree-layer L2 norms of the current weight gradients, leaf side
/// first.
pub fn grad_norm_probe<T: Element>(model: &Model<T>) -> Vec<f64> {
    model.dendritic_grad_norms()
}

/// Trains a freshly initialized model with seed `base_seed + trial` and
/// records every epoch.
pub fn train_trial(config: &TrainConfig, data: &TaskData, trial: usize) -> Result<TrialReport> {
    config.validate()?;
    let start = Instant::now();
    let seed = config.base_seed + trial as u64;
    let mut model = Model::<f32>::build(&config.spec, seed, config.backend)?;
    let params: Vec<Tensor<f32>> = model.parameters().into_iter().map(|(_, p)| p).collect();
    let mut adam = AdamState::for_params(&params);
    let mut shuffle = stream_rng(seed, stream::SHUFFLE);
    let lr = config.lr();

    let mut report = TrialReport {
        trial,
        seed,
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: None,
        params: model.classifier_parameter_count(),
        trunk_params: model.trunk_parameter_count(),
        wall_seconds: 0.0,
        failure: None,
    };

    'epochs: for epoch in 0..config.epochs {
        model.train();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for b in batches::<f32, _>(&data.train, config.batch, true, &mut shuffle)? {
            model.zero_grad();
            let logits = model.forward(&b.x)?;
            let loss = model.loss(&logits, &b.labels)?;
            let l = loss.item() as f64;
            if !l.is_finite() {
                let msg = format!("non-finite training loss at epoch {epoch}");
                warn!("{} trial {trial}: {msg}", config.spec);
                report.failure = Some(msg);
                break 'epochs;
            }
            loss.backward()?;
            adam.step(&params, lr)?;
            loss_sum += l * b.labels.len() as f64;
            correct += count_correct(model.head(), &logits, &b.labels)?;
        }
        let grad_norms = config.grad_probe.then(|| grad_norm_probe(&model));
        let n = data.train.len() as f64;
        let (val_loss, val_acc) = evaluate(&mut model, &data.val, config.batch)?;
        if !val_loss.is_finite() {
            let msg = format!("non-finite validation loss at epoch {epoch}");
            warn!("{} trial {trial}: {msg}", config.spec);
            report.failure = Some(msg);
            break;
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            grad_norms,
        };
        debug!(
            "{} trial {trial} epoch {epoch}: train {:.4}/{:.4} val {:.4}/{:.4}",
            config.spec, m.train_loss, m.train_acc, m.val_loss, m.val_acc
        );
        report.epochs.push(m);
    }

    if report.failure.is_none() {
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.val_loss).collect();
        report.best_epoch = best_epoch(&losses);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// All trials of `config`, run in parallel and returned in trial order.
pub fn run_trials(config: &TrainConfig, data: &TaskData) -> Result<Vec<TrialReport>> {
    config.validate()?;
    (0..config.trials)
        .into_par_iter()
        .map(|t| train_trial(config, data, t))
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample (n - 1) standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// Best-epoch metrics aggregated over successful trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub failed: usize,
    pub train_acc: Stat,
    pub val_acc: Stat,
    pub val_loss: Stat,
    pub params: ParamCount,
    pub trunk_params: ParamCount,
}

pub fn aggregate(reports: &[TrialReport]) -> Result<Summary> {
    let ok: Vec<&TrialReport> = reports.iter().filter(|r| r.succeeded()).collect();
    let failed = reports.len() - ok.len();
    if failed > 0 {
        warn!("{failed} of {} trials failed and are excluded", reports.len());
    }
    let best: Vec<&EpochMetrics> = ok.iter().filter_map(|r| r.best()).collect();
    if best.is_empty() {
        return Err(Error::Aggregation("no successful trials to aggregate".into()));
    }
    let col = |f: fn(&EpochMetrics) -> f64| Stat::of(&best.iter().map(|e| f(e)).collect::<Vec<_>>());
    Ok(Summary {
        trials: best.len(),
        failed,
        train_acc: col(|e| e.train_acc),
        val_acc: col(|e| e.val_acc),
        val_loss: col(|e| e.val_loss),
        params: ok[0].params,
        trunk_params: ok[0].trunk_params,
    })
}

/// Trials and summary of one model configuration.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub config: TrainConfig,
    pub reports: Vec<TrialReport>,
    pub summary: Summary,
}

pub fn run_model(config: &TrainConfig, data: &TaskData) -> Result<ModelRun> {
    let reports = run_trials(config, data)?;
    let summary = aggregate(&reports)?;
    Ok(ModelRun {
        config: config.clone(),
        reports,
        summary,
    })
}

/// Which entries of a dropout sweep win by mean validation accuracy
/// (highest, first on ties) and by mean validation loss (lowest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepChoice {
    pub by_val_acc: usize,
    pub by_val_loss: usize,
}

pub fn select_dropout(summaries: &[Summary]) -> Option<SweepChoice> {
    if summaries.is_empty() {
        return None;
    }
    let mut by_acc = 0;
    let mut by_loss = 0;
    for (i, s) in summaries.iter().enumerate() {
        if s.val_acc.mean > summaries[by_acc].val_acc.mean {
            by_acc = i;
        }
        if s.val_loss.mean < summaries[by_loss].val_loss.mean {
            by_loss = i;
        }
    }
    Some(SweepChoice {
        by_val_acc: by_acc,
        by_val_loss: by_loss,
    })
}
