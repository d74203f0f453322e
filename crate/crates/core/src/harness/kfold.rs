//! Schedule collection by k-fold: each fold in turn is the meta set while
//! the rest trains, the per-fold trajectories are averaged, and the average
//! is replayed on the whole pool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{no_observer, replay_train, run_training, EpochEvent, Experiment, TrainOutcome};
use super::trajectory::TrajectoryLog;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub overrides: Vec<String>,
    pub fold_acc: Vec<f64>,
    pub mean_acc: f64,
}

#[derive(Clone, Debug)]
pub struct KFoldOutcome {
    pub scores: Vec<GridScore>,
    /// Index into `scores` of the selected point.
    pub best: usize,
    pub trajectory: TrajectoryLog,
    /// Per-fold trajectories of the selected point, in fold order.
    pub fold_trajectories: Vec<TrajectoryLog>,
}

impl KFoldOutcome {
    pub fn best_score(&self) -> &GridScore {
        &self.scores[self.best]
    }
}

fn collect_point(
    config: &RunConfig,
    exp: &Experiment,
) -> Result<(Vec<f64>, TrajectoryLog, Vec<TrajectoryLog>)> {
    let folds = exp
        .folds
        .as_ref()
        .ok_or_else(|| Error::Config("k-fold collection needs split.kind = kfold".into()))?;
    let mut accs = Vec::with_capacity(folds.folds.len());
    let mut runs = Vec::with_capacity(folds.folds.len());
    let mut support = Vec::with_capacity(folds.folds.len());
    for f in 0..folds.folds.len() {
        let train = folds.train_for(f);
        let sub = exp.with_sets(train.clone(), folds.folds[f].clone());
        let out = run_training(config, &sub, &mut no_observer).map_err(|e| fold_error(f, e))?;
        accs.push(
            out.final_record()
                .meta_acc
                .ok_or(Error::Empty("held-out fold"))?,
        );
        runs.push(out.trajectory);
        support.push(train);
    }
    let avg = TrajectoryLog::average(&runs, &support)?;
    Ok((accs, avg, runs))
}

fn fold_error(fold: usize, err: Error) -> Error {
    match err {
        Error::Diverged {
            epoch,
            step,
            reason,
            last_good,
        } => Error::Diverged {
            epoch,
            step,
            reason: format!("fold {fold}: {reason}"),
            last_good,
        },
        Error::Io { .. } => err,
        other => Error::Config(format!("fold {fold}: {other}")),
    }
}

/// Runs every grid point over all folds and keeps the averaged trajectory
/// of the point with the best mean held-out accuracy.
pub fn kfold_collect(config: &RunConfig, exp: &Experiment) -> Result<KFoldOutcome> {
    let mut scores: Vec<GridScore> = Vec::new();
    let mut best: Option<(usize, TrajectoryLog, Vec<TrajectoryLog>)> = None;
    for point in config.grid_points() {
        let cfg = config.with_overrides(&point)?;
        let (fold_acc, traj, runs) = collect_point(&cfg, exp)?;
        let mean_acc = fold_acc.iter().sum::<f64>() / fold_acc.len() as f64;
        let better = best
            .as_ref()
            .map_or(true, |(b, _, _)| mean_acc > scores[*b].mean_acc);
        scores.push(GridScore {
            overrides: point,
            fold_acc,
            mean_acc,
        });
        if better {
            best = Some((scores.len() - 1, traj, runs));
        }
    }
    let (best, trajectory, fold_trajectories) = best.ok_or(Error::Empty("grid"))?;
    Ok(KFoldOutcome {
        scores,
        best,
        trajectory,
        fold_trajectories,
    })
}

/// Collection followed by replay of the selected schedule on the pool.
pub fn kfold_then_replay(
    config: &RunConfig,
    exp: &Experiment,
    observer: &mut dyn FnMut(&EpochEvent) -> Result<()>,
) -> Result<(KFoldOutcome, TrainOutcome)> {
    let collected = kfold_collect(config, exp)?;
    let cfg = config.with_overrides(&collected.best_score().overrides)?;
    let pool = exp.with_sets(exp.train.clone(), Vec::new());
    let replayed = replay_train(&cfg, &pool, &collected.trajectory, observer)?;
    Ok((collected, replayed))
}

pub fn write_scores(path: &Path, outcome: &KFoldOutcome) -> Result<()> {
    let body = serde_json::json!({
        "best": outcome.best_score(),
        "scores": outcome.scores,
    });
    std::fs::write(path, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(extra: &str) -> RunConfig {
        let extra: Vec<String> = extra.lines().map(String::from).collect();
        RunConfig::parse_with_overrides(&format!(
            "data.classes = 3\ndata.dims = 4\ndata.train_per_class = 30\ndata.meta_per_class = 0\n\
             data.test_per_class = 10\ndata.superclasses = 1\nmodel.widths = 8\ntrain.epochs = 2\n\
             train.batch_size = 16\nsplit.kind = kfold\nsplit.k = 3\nmeta.mode = instance\n"
        ), &extra)
        .unwrap()
    }

    #[test]
    fn collects_and_replays() {
        let c = config("grid.meta.lr_data = 1|5");
        let exp = Experiment::prepare(&c).unwrap();
        assert_eq!(exp.train.len(), 90);
        let (k, replay) = kfold_then_replay(&c, &exp, &mut no_observer).unwrap();
        assert_eq!(k.scores.len(), 2);
        assert_eq!(k.trajectory.len(), 2);
        let best = k.best_score().mean_acc;
        assert!(k.scores.iter().all(|s| s.mean_acc <= best));
        assert_eq!(replay.metrics.len(), 2);
        assert!(replay.metrics.iter().all(|m| m.meta_samples == 0));
    }

    #[test]
    fn holdout_split_is_rejected() {
        let c = config("split.kind = holdout\ndata.meta_per_class = 5");
        let exp = Experiment::prepare(&c).unwrap();
        assert!(kfold_collect(&c, &exp).is_err());
    }
}
