//! Epoch loop shared by every regime: plain baselines, meta-learned
//! multipliers, learnable temperatures and replay of a frozen schedule.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Formulation, PersonalTrain, RunConfig, SplitMode};
use super::metrics::{mean_std, MetricsRecord};
use super::trajectory::{EpochSnapshot, TrajectoryLog};
use crate::data_params::{DataParamState, WeightMode};
use crate::datagen::{
    corrupt_labels_at, holdout_split, kfold_split, make_blobs, personalization_split,
    CorruptionManifest, KFoldSplit, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::losses::{self, LossSelector, SIGMA_MIN};
use crate::meta::{meta_train_step, replay_schedule, MetaRates};
use crate::nn::{forward, mlp_manifest, per_sample_backward, Batch, ParamVector};
use crate::optim::{OptimizerKind, OptimizerState};

const SPLIT_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const META_STREAM: u64 = 3;

/// Independent seed for one consumer of a base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A dataset with its index sets. Instance multipliers are indexed by
/// dataset row.
#[derive(Clone, Debug)]
pub struct Experiment {
    /// `labels` are the training labels (possibly corrupted).
    pub dataset: LabeledDataset,
    pub train: Vec<usize>,
    pub meta: Vec<usize>,
    pub test: Vec<usize>,
    pub folds: Option<KFoldSplit>,
    pub manifest: Option<CorruptionManifest>,
}

impl Experiment {
    /// Builds or loads the dataset, splits it and applies label noise to the
    /// trainable instances.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        let dataset = load_dataset(config)?;
        Self::from_dataset(config, dataset)
    }

    pub fn from_dataset(config: &RunConfig, mut dataset: LabeledDataset) -> Result<Self> {
        let mut manifest = match &config.manifest_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Some(CorruptionManifest::from_csv(&text, &p.display().to_string())?)
            }
            None => None,
        };
        let split_seed = derive_seed(config.seeds.data, SPLIT_STREAM);
        let (train, meta, test, folds) = match (config.split, config.target_superclass) {
            (SplitMode::KFold, _) => {
                let f = kfold_split(&dataset, config.k, config.test_per_class, split_seed)?;
                (f.pool(), Vec::new(), f.test.clone(), Some(f))
            }
            (SplitMode::Holdout, Some(target)) => {
                if dataset.superclass_map.is_none() {
                    dataset = dataset.with_contiguous_superclasses(config.superclasses)?;
                }
                let p = personalization_split(
                    &dataset,
                    target,
                    config.meta_per_class,
                    config.test_per_class,
                    split_seed,
                )?;
                let train = match config.personal_train {
                    PersonalTrain::Full => p.full_train,
                    PersonalTrain::Biased => p.biased_train,
                };
                (train, p.meta_from_target, p.test_on_target, None)
            }
            (SplitMode::Holdout, None) => {
                let s = holdout_split(
                    &dataset,
                    config.meta_per_class,
                    config.test_per_class,
                    split_seed,
                )?;
                (s.train, s.meta, s.test, None)
            }
        };
        if config.noise > 0.0 {
            let (noisy, m) = corrupt_labels_at(
                &dataset,
                &train,
                config.noise,
                derive_seed(config.seeds.data, NOISE_STREAM),
            )?;
            dataset = noisy;
            manifest = Some(m);
        }
        Ok(Self {
            dataset,
            train,
            meta,
            test,
            folds,
            manifest,
        })
    }

    /// Same data with different train and meta sets.
    pub fn with_sets(&self, train: Vec<usize>, meta: Vec<usize>) -> Self {
        Self {
            train,
            meta,
            folds: None,
            ..self.clone()
        }
    }

    pub fn n_classes(&self) -> usize {
        self.dataset.n_classes()
    }

    /// Train instances whose label was changed by corruption.
    pub fn corrupted_train(&self) -> BTreeSet<usize> {
        let corrupted = self
            .manifest
            .as_ref()
            .map(|m| m.corrupted())
            .unwrap_or_default();
        self.train
            .iter()
            .copied()
            .filter(|i| corrupted.contains(i))
            .collect()
    }
}

fn load_dataset(config: &RunConfig) -> Result<LabeledDataset> {
    match &config.data_path {
        Some(path) => {
            let mut ds = LabeledDataset::read_csv(path, None)?;
            if let Some(sp) = &config.superclass_path {
                let text = std::fs::read_to_string(sp).map_err(|e| Error::io(sp, e))?;
                ds.set_superclasses_from_csv(&text, &sp.display().to_string())?;
            }
            Ok(ds)
        }
        None => {
            let per_class = config.train_per_class + config.meta_per_class + config.test_per_class;
            let ds = make_blobs(
                config.classes,
                per_class,
                config.dims,
                config.spread,
                config.seeds.data,
            )?;
            if config.superclasses >= 1 && config.superclasses <= config.classes {
                ds.with_contiguous_superclasses(config.superclasses)
            } else {
                Ok(ds)
            }
        }
    }
}

/// Meta-gradient summary of one step, kept when `log.steps` is on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub epoch: usize,
    pub step: u64,
    pub meta_loss: f64,
    pub per_instance_metagrad: std::collections::BTreeMap<usize, f64>,
    pub per_class_metagrad: std::collections::BTreeMap<usize, f64>,
    pub wd_metagrad: f64,
    pub clamp_count: usize,
}

/// Passed to the observer after every epoch.
pub struct EpochEvent<'a> {
    pub epoch: usize,
    pub model: &'a ParamVector,
    pub dps: &'a DataParamState,
    pub record: &'a MetricsRecord,
    pub snapshot: &'a EpochSnapshot,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters used for evaluation (the iterate average under Polyak).
    pub model: ParamVector,
    pub dps: DataParamState,
    pub trajectory: TrajectoryLog,
    pub metrics: Vec<MetricsRecord>,
    pub steps: Vec<StepSummary>,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.metrics.last().expect("at least one epoch")
    }
}

#[derive(Clone, Copy)]
enum Regime<'a> {
    Baseline,
    Meta,
    Temperature,
    Replay(&'a TrajectoryLog),
}

pub fn initial_model(config: &RunConfig, exp: &Experiment) -> Result<ParamVector> {
    let manifest = mlp_manifest(
        exp.dataset.dims(),
        &config.hidden,
        exp.n_classes(),
        config.activation,
    );
    ParamVector::init(manifest, config.seeds.init)
}

/// Trains under the regime selected by `config`.
pub fn run_training(
    config: &RunConfig,
    exp: &Experiment,
    observer: &mut dyn FnMut(&EpochEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    let regime = match config.formulation {
        Formulation::Temperature => Regime::Temperature,
        Formulation::Meta if config.uses_meta_set() => Regime::Meta,
        Formulation::Meta => Regime::Baseline,
    };
    train_loop(config, exp, regime, observer)
}

/// Trains on `exp.train` with the multipliers of `trajectory` frozen per
/// epoch. No meta samples are drawn.
pub fn replay_train(
    config: &RunConfig,
    exp: &Experiment,
    trajectory: &TrajectoryLog,
    observer: &mut dyn FnMut(&EpochEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    if trajectory.len() < config.epochs {
        return Err(Error::Config(format!(
            "trajectory covers {} epochs but {} are configured",
            trajectory.len(),
            config.epochs
        )));
    }
    if config.optimizer != OptimizerKind::Sgd {
        return Err(Error::Config("replay uses sgd".into()));
    }
    train_loop(config, exp, Regime::Replay(trajectory), observer)
}

/// Silently accepts every epoch.
pub fn no_observer(_: &EpochEvent) -> Result<()> {
    Ok(())
}

fn replay_state(
    trajectory: &TrajectoryLog,
    epoch: usize,
    n_instances: usize,
    n_classes: usize,
    mode: WeightMode,
) -> Result<DataParamState> {
    let s = replay_schedule(trajectory, epoch)?;
    let mut dps = DataParamState::new(n_instances, n_classes, mode, s.lambda_wd);
    for (&i, &w) in &s.w_inst {
        *dps.w_inst.get_mut(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: n_instances,
        })? = w;
    }
    if !s.w_class.is_empty() {
        if s.w_class.len() != n_classes {
            return Err(Error::LengthMismatch {
                expected: n_classes,
                got: s.w_class.len(),
            });
        }
        dps.w_class = s.w_class;
    }
    Ok(dps)
}

struct SetEval {
    loss: f64,
    acc: f64,
    class_acc: Vec<Option<f64>>,
}

fn evaluate_set(
    model: &ParamVector,
    ds: &LabeledDataset,
    indices: &[usize],
    true_labels: bool,
) -> Result<Option<SetEval>> {
    if indices.is_empty() {
        return Ok(None);
    }
    let (x, y) = ds.gather(indices, true_labels);
    let logits = forward(model, &x)?;
    let k = ds.n_classes();
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    let mut loss = 0.0;
    for (b, &label) in y.iter().enumerate() {
        let z = logits.row(b);
        loss += losses::ce_loss(z, label)?.0;
        counts[label] += 1;
        if losses::inference_logits(z) == label {
            hits[label] += 1;
        }
    }
    let n = y.len() as f64;
    Ok(Some(SetEval {
        loss: loss / n,
        acc: hits.iter().sum::<usize>() as f64 / n,
        class_acc: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
    }))
}

fn make_batch(ds: &LabeledDataset, idx: &[usize], true_labels: bool, unique: bool) -> Result<Batch> {
    let (x, y) = ds.gather(idx, true_labels);
    if unique {
        Batch::new(x, y, idx.to_vec())
    } else {
        Batch::with_repeats(x, y, idx.to_vec())
    }
}

fn diverged(epoch: usize, step: u64, err: Error, last_good: Option<usize>) -> Error {
    if !err.is_numeric() {
        return err;
    }
    Error::Diverged {
        epoch,
        step,
        reason: err.to_string(),
        last_good: match last_good {
            Some(e) => format!("end of epoch {e}"),
            None => "initial parameters".into(),
        },
    }
}

fn add_decay(grad: &mut [f64], theta: &[f64], lambda_wd: f64) {
    if lambda_wd != 0.0 {
        grad.iter_mut().zip(theta).for_each(|(g, t)| *g += lambda_wd * t);
    }
}

fn train_loop(
    config: &RunConfig,
    exp: &Experiment,
    regime: Regime,
    observer: &mut dyn FnMut(&EpochEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    let ds = &exp.dataset;
    let n_classes = exp.n_classes();
    if exp.train.is_empty() {
        return Err(Error::Empty("train set"));
    }
    if matches!(regime, Regime::Meta) && exp.meta.is_empty() {
        return Err(Error::Config(
            "meta-learned rates need a non-empty meta set (data.meta_per_class > 0)".into(),
        ));
    }

    let mut model = initial_model(config, exp)?;
    let mode = match regime {
        Regime::Baseline | Regime::Temperature => WeightMode::None,
        Regime::Meta | Regime::Replay(_) => config.mode,
    };
    let mut dps = DataParamState::new(ds.len(), n_classes, mode, config.wd_init);
    dps.wd_learnable = config.wd_learnable;
    dps.history_reset = config.history_reset;
    if matches!(regime, Regime::Temperature) {
        dps.enable_temperature(config.temperature_mode);
    }
    let mut opt = OptimizerState::new(config.optimizer, config.lr, config.hyper, model.len())?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seeds.shuffle);
    let mut meta_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.shuffle, META_STREAM));
    let corrupted = exp.corrupted_train();
    let mut order = exp.train.clone();

    let mut out = TrainOutcome {
        model: model.clone(),
        dps: dps.clone(),
        trajectory: TrajectoryLog::default(),
        metrics: Vec::with_capacity(config.epochs),
        steps: Vec::new(),
    };
    let mut last_good: Option<usize> = None;
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        opt.lr = lr;
        if let Regime::Replay(traj) = regime {
            dps = replay_state(traj, epoch, ds.len(), n_classes, mode)?;
        }
        order.shuffle(&mut shuffle_rng);
        let mut grad_evals = 0u64;
        let mut meta_samples = 0u64;
        let mut clamp_count = 0usize;

        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch = make_batch(ds, chunk, false, true)?;
            grad_evals += batch.len() as u64;
            let result: Result<()> = (|| {
                match regime {
                    Regime::Baseline | Regime::Replay(_) => {
                        let g = per_sample_backward(&model, &batch, LossSelector::PlainCe, &dps)?;
                        let w = crate::meta::effective_weights(&batch, &dps);
                        let mut grad = g.grads.weighted_sum(&w);
                        let inv = 1.0 / batch.len() as f64;
                        grad.iter_mut().for_each(|v| *v *= inv);
                        add_decay(&mut grad, model.values(), dps.lambda_wd);
                        opt.step(model.values_mut(), &grad)?;
                    }
                    Regime::Temperature => {
                        let sel = LossSelector::Temperature(config.temperature_mode);
                        let g = per_sample_backward(&model, &batch, sel, &dps)?;
                        clamp_count += g.clamped.len();
                        let mut grad = g.grads.mean();
                        add_decay(&mut grad, model.values(), dps.lambda_wd);
                        let dsigma = g.dsigma.as_deref().unwrap_or(&[]);
                        update_temperatures(&mut dps, &batch, dsigma, config.temperature_lr);
                        opt.step(model.values_mut(), &grad)?;
                    }
                    Regime::Meta => {
                        let picks: Vec<usize> = (0..batch.len())
                            .map(|_| exp.meta[meta_rng.gen_range(0..exp.meta.len())])
                            .collect();
                        let meta_batch = make_batch(ds, &picks, true, false)?;
                        meta_samples += meta_batch.len() as u64;
                        let rates = MetaRates {
                            lr,
                            lr_data: config.lr_data,
                            lr_wd: config.lr_wd,
                        };
                        let (next, dps_next, report) =
                            meta_train_step(&model, &dps, &batch, &meta_batch, rates, n_classes)?;
                        clamp_count += report.clamp_count;
                        if config.log_steps {
                            out.steps.push(StepSummary {
                                epoch,
                                step,
                                meta_loss: report.meta_loss,
                                per_instance_metagrad: report.per_instance_metagrad,
                                per_class_metagrad: report.per_class_metagrad,
                                wd_metagrad: report.wd_metagrad,
                                clamp_count: report.clamp_count,
                            });
                        }
                        model = next;
                        dps = dps_next;
                    }
                }
                Ok(())
            })();
            result.map_err(|e| diverged(epoch, step, e, last_good))?;
        }

        let eval_model = model.with_values(opt.eval_params(model.values()).to_vec())?;
        let train_eval = evaluate_set(&eval_model, ds, &exp.train, false)?
            .expect("train set checked non-empty");
        if !train_eval.loss.is_finite() {
            return Err(diverged(
                epoch,
                step,
                Error::NonFiniteStep {
                    step,
                    context: "train loss".into(),
                },
                last_good,
            ));
        }
        let meta_eval = evaluate_set(&eval_model, ds, &exp.meta, true)?;
        let test_eval = evaluate_set(&eval_model, ds, &exp.test, true)?;

        let (mut clean_w, mut corrupt_w) = (Vec::new(), Vec::new());
        for &i in &exp.train {
            let w = dps.effective_weight(i, ds.labels[i]);
            if corrupted.contains(&i) {
                corrupt_w.push(w);
            } else {
                clean_w.push(w);
            }
        }
        let clean = mean_std(&clean_w);
        let corrupt = mean_std(&corrupt_w);

        let record = MetricsRecord {
            epoch,
            lr,
            train_loss: train_eval.loss,
            train_acc: train_eval.acc,
            meta_loss: meta_eval.as_ref().map(|m| m.loss),
            meta_acc: meta_eval.as_ref().map(|m| m.acc),
            test_acc: test_eval.as_ref().map(|t| t.acc),
            class_meta_acc: meta_eval.map(|m| m.class_acc).unwrap_or_default(),
            w_clean_mean: clean.map(|c| c.0),
            w_clean_std: clean.map(|c| c.1),
            w_corrupt_mean: corrupt.map(|c| c.0),
            w_corrupt_std: corrupt.map(|c| c.1),
            lambda_wd: dps.lambda_wd,
            clamp_count,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            train_grad_evals: grad_evals,
            meta_samples,
        };
        let snapshot = EpochSnapshot::capture(&dps);
        observer(&EpochEvent {
            epoch,
            model: &eval_model,
            dps: &dps,
            record: &record,
            snapshot: &snapshot,
        })?;
        out.trajectory.epochs.push(snapshot);
        out.metrics.push(record);
        out.model = eval_model;
        last_good = Some(epoch);
    }
    out.dps = dps;
    Ok(out)
}

/// SGD on the temperature tables from the per-row `dL_i / d sigma_eff`.
/// Class temperatures move by the mean over their members in the batch.
fn update_temperatures(dps: &mut DataParamState, batch: &Batch, dsigma: &[f64], lr: f64) {
    if let Some(table) = dps.sigma_class.as_mut() {
        let k = table.len();
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (&y, &d) in batch.labels.iter().zip(dsigma) {
            sum[y] += d;
            count[y] += 1;
        }
        for c in 0..k {
            if count[c] > 0 {
                table[c] = (table[c] - lr * sum[c] / count[c] as f64).max(SIGMA_MIN);
            }
        }
    }
    let class_table = dps.sigma_class.clone();
    if let Some(table) = dps.sigma_inst.as_mut() {
        for ((&i, &y), &d) in batch.indices.iter().zip(&batch.labels).zip(dsigma) {
            // joint mode keeps the sum at or above the floor
            let floor = match &class_table {
                Some(ct) => SIGMA_MIN - ct[y],
                None => SIGMA_MIN,
            };
            table[i] = (table[i] - lr * d).max(floor);
        }
    }
}
