//! Adam training with a stratified 70/15/15 split, minibatches of 40,
//! validation-based checkpoint selection with early stopping, repeated runs
//! and grid search.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{stratified_split, MtsDataset, Split};
use crate::error::{arg, Error, Result};
use crate::eval::{evaluate, EvalReport, OverlapRule};
use crate::model::{Ablation, LaxcatConfig, LaxcatModel, Reduction};
use crate::numerics::{argmax, cross_entropy, mean, mix_seed, sample_std, Matrix, SeededRng};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return arg(format!(
            "adam shapes differ: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Checkpoint selection criterion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    ValAccuracy,
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainProtocol {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub fractions: [f64; 3],
    pub repeats: usize,
    pub seed: u64,
    pub selection: Selection,
    pub adam: AdamConfig,
    pub overlap_rule: OverlapRule,
    /// Sum minibatch gradients in instance order.
    pub deterministic: bool,
}

impl Default for TrainProtocol {
    fn default() -> Self {
        Self {
            batch_size: 40,
            max_epochs: 200,
            patience: 20,
            fractions: [0.7, 0.15, 0.15],
            repeats: 5,
            seed: 0,
            selection: Selection::ValAccuracy,
            adam: AdamConfig::default(),
            overlap_rule: OverlapRule::AnyPoint,
            deterministic: true,
        }
    }
}

impl TrainProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return arg("batch size must be at least 1");
        }
        if self.max_epochs == 0 {
            return arg("max_epochs must be at least 1");
        }
        if self.patience == 0 {
            return arg("patience must be at least 1");
        }
        if self.repeats == 0 {
            return arg("repeats must be at least 1");
        }
        if (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return arg("split fractions must sum to 1");
        }
        Ok(())
    }

    /// Split seed of repeat `r`.
    pub fn split_seed(&self, repeat: usize) -> u64 {
        mix_seed(self.seed, 2 * repeat as u64)
    }

    /// Model-initialization seed of repeat `r` given the config's own seed.
    pub fn model_seed(&self, config_seed: u64, repeat: usize) -> u64 {
        mix_seed(config_seed ^ self.seed, 2 * repeat as u64 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// One training run on one split. Equality ignores the wall time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub repeat: usize,
    pub split_seed: u64,
    pub model_seed: u64,
    pub split_sizes: [usize; 3],
    /// Training objective before the first update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub selected_val_accuracy: f64,
    pub selected_val_loss: f64,
    pub test: EvalReport,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.repeat == other.repeat
            && self.split_seed == other.split_seed
            && self.model_seed == other.model_seed
            && self.split_sizes == other.split_sizes
            && self.initial_train_loss == other.initial_train_loss
            && self.epochs == other.epochs
            && self.selected_epoch == other.selected_epoch
            && self.selected_val_accuracy == other.selected_val_accuracy
            && self.selected_val_loss == other.selected_val_loss
            && self.test == other.test
    }
}

/// All repeats of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub ablation: Ablation,
    pub config: LaxcatConfig,
    pub protocol: TrainProtocol,
    pub runs: Vec<RunRecord>,
    pub test_accuracies: Vec<f64>,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    pub mean_val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_aam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_aam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_uniform_aam: Option<f64>,
    /// Share of masked test instances whose largest joint-attention cell lies
    /// on a masked variable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub argmax_on_mask_variable: Option<f64>,
    /// Repeat whose model is returned (best validation score, earliest on ties).
    pub returned_repeat: usize,
}

impl TrainReport {
    pub fn wall_seconds(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.wall_seconds).collect()
    }
}

/// Mean loss (without regularizer) and accuracy over `indices`.
fn score(model: &LaxcatModel, ds: &MtsDataset, indices: &[usize]) -> Result<(f64, f64)> {
    let parts: Vec<(f64, bool)> = indices
        .par_iter()
        .map(|&i| {
            let probs = model.predict_proba(&ds.instances[i])?;
            let y = ds.labels[i];
            Ok((cross_entropy(&probs, y)?, argmax(&probs) == y))
        })
        .collect::<Result<_>>()?;
    let n = indices.len() as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = 100.0 * parts.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

fn check_dataset(ds: &MtsDataset, config: &LaxcatConfig) -> Result<()> {
    if ds.p != config.variables || ds.t_len != config.t_len || ds.class_count != config.classes {
        return Err(Error::Data(format!(
            "dataset is {}x{} with {} classes, model expects {}x{} with {}",
            ds.p, ds.t_len, ds.class_count, config.variables, config.t_len, config.classes
        )));
    }
    Ok(())
}

/// Trains one repeat: split, Adam epochs, checkpoint selection, test evaluation.
pub fn train_run(
    ds: &MtsDataset,
    config: &LaxcatConfig,
    protocol: &TrainProtocol,
    repeat: usize,
) -> Result<(LaxcatModel, RunRecord)> {
    protocol.validate()?;
    check_dataset(ds, config)?;
    let started = Instant::now();
    let split_seed = protocol.split_seed(repeat);
    let split = stratified_split(ds, protocol.fractions, split_seed)?;
    check_train_classes(ds, &split)?;

    let model_seed = protocol.model_seed(config.seed, repeat);
    let mut model = LaxcatModel::new(LaxcatConfig {
        seed: model_seed,
        ..config.clone()
    })?;
    let reduction = if protocol.deterministic {
        Reduction::Ordered
    } else {
        Reduction::Unordered
    };

    let train_refs = |idx: &[usize]| -> (Vec<&Matrix>, Vec<usize>) {
        (
            idx.iter().map(|&i| &ds.instances[i]).collect(),
            idx.iter().map(|&i| ds.labels[i]).collect(),
        )
    };
    let initial_train_loss = score(&model, ds, &split.train)?.0 + model.regularizer();

    let mut flat = model.params.flatten();
    let mut adam = AdamState::new(flat.len(), protocol.adam);
    let mut order = split.train.clone();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, f64, LaxcatModel)> = None;
    let mut since_best = 0;
    for epoch in 1..=protocol.max_epochs {
        let mut rng = SeededRng::derive(split_seed ^ model_seed, 1000 + epoch as u64);
        rng.shuffle(&mut order);
        for chunk in order.chunks(protocol.batch_size) {
            let (xs, ys) = train_refs(chunk);
            let (_, grads) = model.loss_and_grad(&xs, &ys, reduction)?;
            adam_step(&mut flat, &grads.flatten(), &mut adam)?;
            model.params.assign_flat(&flat)?;
        }
        let (train_loss, train_accuracy) = score(&model, ds, &split.train)?;
        let (val_loss, val_accuracy) = score(&model, ds, &split.val)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: train_loss + model.regularizer(),
            train_accuracy,
            val_loss,
            val_accuracy,
        });
        let improved = match &best {
            None => true,
            Some((_, best_acc, best_loss, _)) => match protocol.selection {
                Selection::ValAccuracy => val_accuracy > *best_acc,
                Selection::ValLoss => val_loss < *best_loss,
            },
        };
        if improved {
            best = Some((epoch, val_accuracy, val_loss, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= protocol.patience {
                break;
            }
        }
    }
    let (selected_epoch, selected_val_accuracy, selected_val_loss, best_model) =
        best.expect("at least one epoch runs");
    let test = evaluate(&best_model, ds, &split.test, protocol.overlap_rule)?;
    Ok((
        best_model,
        RunRecord {
            repeat,
            split_seed,
            model_seed,
            split_sizes: [split.train.len(), split.val.len(), split.test.len()],
            initial_train_loss,
            epochs,
            selected_epoch,
            selected_val_accuracy,
            selected_val_loss,
            test,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

fn check_train_classes(ds: &MtsDataset, split: &Split) -> Result<()> {
    let mut seen = vec![false; ds.class_count];
    for &i in &split.train {
        seen[ds.labels[i]] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!("class {c} is missing from the training split")));
    }
    Ok(())
}

/// Runs `protocol.repeats` independent repeats and summarizes them.
pub fn train(
    ds: &MtsDataset,
    config: &LaxcatConfig,
    protocol: &TrainProtocol,
) -> Result<(LaxcatModel, TrainReport)> {
    protocol.validate()?;
    config.validate()?;
    let results: Vec<(LaxcatModel, RunRecord)> = (0..protocol.repeats)
        .into_par_iter()
        .map(|r| train_run(ds, config, protocol, r))
        .collect::<Result<_>>()?;

    let returned_repeat = {
        let mut best = 0;
        for (k, (_, run)) in results.iter().enumerate() {
            let cur = &results[best].1;
            let better = match protocol.selection {
                Selection::ValAccuracy => run.selected_val_accuracy > cur.selected_val_accuracy,
                Selection::ValLoss => run.selected_val_loss < cur.selected_val_loss,
            };
            if better {
                best = k;
            }
        }
        best
    };
    let (models, runs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let model = models.into_iter().nth(returned_repeat).expect("repeat exists");
    let report = summarize(config, protocol, runs, returned_repeat);
    Ok((model, report))
}

fn summarize(
    config: &LaxcatConfig,
    protocol: &TrainProtocol,
    runs: Vec<RunRecord>,
    returned_repeat: usize,
) -> TrainReport {
    let test_accuracies: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
    let val: Vec<f64> = runs.iter().map(|r| r.selected_val_accuracy).collect();
    let aams: Vec<f64> = runs.iter().filter_map(|r| r.test.mean_aam).collect();
    let uniform: Vec<f64> = runs.iter().filter_map(|r| r.test.mean_uniform_aam).collect();
    let cells: Vec<_> = runs
        .iter()
        .filter_map(|r| r.test.instance_aam.as_ref())
        .flatten()
        .collect();
    let has_aam = !aams.is_empty();
    TrainReport {
        ablation: config.ablation,
        config: config.clone(),
        protocol: protocol.clone(),
        mean_test_accuracy: mean(&test_accuracies),
        std_test_accuracy: sample_std(&test_accuracies),
        mean_val_accuracy: mean(&val),
        test_accuracies,
        mean_aam: has_aam.then(|| mean(&aams)),
        std_aam: has_aam.then(|| sample_std(&aams)),
        mean_uniform_aam: has_aam.then(|| mean(&uniform)),
        argmax_on_mask_variable: (!cells.is_empty()).then(|| {
            cells.iter().filter(|c| c.argmax_in_mask_variables).count() as f64 / cells.len() as f64
        }),
        runs,
        returned_repeat,
    }
}

/// Hyperparameter grids; every combination is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grids {
    pub filters: Vec<usize>,
    pub kernel_lens: Vec<usize>,
    pub hidden: Vec<usize>,
    pub reg_alpha: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            filters: vec![8, 16, 32],
            kernel_lens: vec![2, 3, 5],
            hidden: vec![8, 16, 32],
            reg_alpha: vec![0.001, 0.01, 0.1],
        }
    }
}

impl Grids {
    pub fn size(&self) -> usize {
        self.filters.len() * self.kernel_lens.len() * self.hidden.len() * self.reg_alpha.len()
    }

    pub fn configs(&self, base: &LaxcatConfig) -> Vec<LaxcatConfig> {
        let mut out = Vec::with_capacity(self.size());
        for &filters in &self.filters {
            for &kernel_len in &self.kernel_lens {
                for &hidden in &self.hidden {
                    for &reg_alpha in &self.reg_alpha {
                        out.push(LaxcatConfig {
                            filters,
                            kernel_len,
                            stride: None,
                            hidden,
                            reg_alpha,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub filters: usize,
    pub kernel_len: usize,
    pub hidden: usize,
    pub reg_alpha: f64,
    pub mean_val_accuracy: f64,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Index into `rows` with the highest mean validation accuracy (earliest on ties).
    pub best: usize,
    pub best_config: LaxcatConfig,
    pub best_report: TrainReport,
}

/// Exhaustive search; selects by mean validation accuracy over the repeats.
pub fn grid_search(
    ds: &MtsDataset,
    base: &LaxcatConfig,
    grids: &Grids,
    protocol: &TrainProtocol,
) -> Result<(LaxcatModel, GridReport)> {
    if grids.size() == 0 {
        return arg("every grid needs at least one value");
    }
    let mut rows = Vec::with_capacity(grids.size());
    let mut best: Option<(usize, LaxcatModel, TrainReport)> = None;
    for (k, cfg) in grids.configs(base).into_iter().enumerate() {
        let (model, report) = train(ds, &cfg, protocol)?;
        rows.push(GridRow {
            filters: cfg.filters,
            kernel_len: cfg.kernel_len,
            hidden: cfg.hidden,
            reg_alpha: cfg.reg_alpha,
            mean_val_accuracy: report.mean_val_accuracy,
            mean_test_accuracy: report.mean_test_accuracy,
            std_test_accuracy: report.std_test_accuracy,
        });
        let better = best
            .as_ref()
            .is_none_or(|(_, _, b)| report.mean_val_accuracy > b.mean_val_accuracy);
        if better {
            best = Some((k, model, report));
        }
    }
    let (best, model, best_report) = best.expect("grid is nonempty");
    Ok((
        model,
        GridReport {
            rows,
            best,
            best_config: best_report.config.clone(),
            best_report,
        },
    ))
}
