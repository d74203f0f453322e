//! Command-line front end. `run` returns the process exit status.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{self, CheckTarget, GradCheckReport};
use crate::datagen::{corrupt_labels, LabeledDataset};
use crate::error::{Error, Result};
use crate::harness::metrics::{read_jsonl, to_jsonl};
use crate::harness::train::EpochEvent;
use crate::harness::{
    kfold, kfold_then_replay, replay_train, run_training, Aggregate, Experiment, MetricsRecord,
    RunConfig, TrainOutcome, TrajectoryLog,
};
use crate::nn::{per_sample_backward, ParamVector};

pub const OUT_ENV: &str = "METASCHED_OUT";

#[derive(Parser, Debug)]
#[command(name = "metasched", version, about = "Meta-learned per-instance and per-class learning rates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the data, init and shuffle seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic blobs dataset and its superclass map.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Corrupts the labels of a dataset file with probability `noise.p`.
    Corrupt {
        #[command(flatten)]
        common: Common,
        /// Dataset to corrupt.
        #[arg(long)]
        input: PathBuf,
    },
    /// Trains one run (or `seed.repeats` runs).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Collects a fold-averaged schedule and replays it on the pool.
    Kfold {
        #[command(flatten)]
        common: Common,
    },
    /// Retrains with a frozen trajectory.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Finite-difference checks of every gradient formula.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Diagnostics over a finished run directory.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `train`.
        #[arg(long)]
        input: PathBuf,
    },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("missing required flag --config <path>".into()))?;
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.extend([
            format!("seed.data={s}"),
            format!("seed.init={s}"),
            format!("seed.shuffle={s}"),
        ]);
    }
    RunConfig::load(path, &overrides)
}

fn out_dir(common: &Common, config: Option<&RunConfig>, command: &str) -> Result<PathBuf> {
    let dir = match (&common.out, config.and_then(|c| c.out_dir.clone())) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => d,
        (None, None) => {
            let root = std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            let tag = config.map(|c| c.digest()[..12].to_string()).unwrap_or_default();
            root.join(format!("{command}-{tag}"))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenerateData { common } => {
            let config = load_config(&common)?;
            let exp = Experiment::prepare(&config.with_overrides(&["noise.p=0".into()])?)?;
            let dir = out_dir(&common, Some(&config), "data")?;
            exp.dataset.write_csv(&dir.join("dataset.csv"))?;
            if let Some(s) = exp.dataset.superclass_csv() {
                write(&dir.join("superclasses.csv"), &s)?;
            }
            println!("{}", dir.join("dataset.csv").display());
            Ok(0)
        }
        Command::Corrupt { common, input } => {
            let config = load_config(&common)?;
            let ds = LabeledDataset::read_csv(&input, None)?;
            let (noisy, manifest) = corrupt_labels(&ds, config.noise, config.seeds.data)?;
            let dir = out_dir(&common, Some(&config), "corrupt")?;
            noisy.write_csv(&dir.join("dataset.csv"))?;
            write(&dir.join("manifest.csv"), &manifest.to_csv())?;
            println!(
                "corrupted {} of {} labels (p = {}, effective flip rate {:.4})",
                manifest.corrupted().len(),
                ds.len(),
                config.noise,
                manifest.effective_flip_rate(ds.n_classes())
            );
            Ok(0)
        }
        Command::Train { common } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, Some(&config), "train")?;
            train_repeats(&config, &dir)?;
            Ok(0)
        }
        Command::Kfold { common } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, Some(&config), "kfold")?;
            let exp = Experiment::prepare(&config)?;
            let mut obs = RunWriter::new(&dir, &config, &exp)?;
            let (collected, replayed) = kfold_then_replay(&config, &exp, &mut |e| obs.epoch(e))?;
            kfold::write_scores(&dir.join("kfold.json"), &collected)?;
            collected.trajectory.write_csv(&dir.join("collected_trajectory.csv"))?;
            for (f, t) in collected.fold_trajectories.iter().enumerate() {
                t.write_csv(&dir.join(format!("fold-{f}_trajectory.csv")))?;
            }
            obs.finish(&replayed)?;
            Ok(0)
        }
        Command::Replay { common, trajectory } => {
            let config = load_config(&common)?;
            let traj = TrajectoryLog::read_csv(&trajectory)?;
            let dir = out_dir(&common, Some(&config), "replay")?;
            let exp = Experiment::prepare(&config)?;
            let exp = exp.with_sets(exp.train.clone(), Vec::new());
            let mut obs = RunWriter::new(&dir, &config, &exp)?;
            let out = replay_train(&config, &exp, &traj, &mut |e| obs.epoch(e))?;
            obs.finish(&out)?;
            Ok(0)
        }
        Command::Gradcheck { common, trials } => {
            let seed = common.seed.unwrap_or(0);
            let mut reports = Vec::new();
            for t in CheckTarget::ALL {
                let r = analysis::finite_diff_check(t, trials, seed)?;
                println!(
                    "{:<18} {} max_rel={:.3e} max_abs={:.3e} samples={}",
                    r.name,
                    if r.pass { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.max_abs_err,
                    r.samples
                );
                reports.push(r);
            }
            if common.out.is_some() {
                let dir = out_dir(&common, None, "gradcheck")?;
                write_json(&dir.join("gradcheck.json"), &reports)?;
            }
            Ok(if reports.iter().all(|r: &GradCheckReport| r.pass) {
                0
            } else {
                1
            })
        }
        Command::Analyze { common, input } => {
            let reports = analyze_run(&input)?;
            let dir = common.out.clone().unwrap_or_else(|| input.clone());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (name, body) in reports {
                write_json(&dir.join(format!("{name}.json")), &body)?;
                println!("{}", dir.join(format!("{name}.json")).display());
            }
            Ok(0)
        }
    }
}

/// Writes run files as training progresses.
struct RunWriter {
    dir: PathBuf,
    metrics: PathBuf,
}

impl RunWriter {
    fn new(dir: &Path, config: &RunConfig, exp: &Experiment) -> Result<Self> {
        write(&dir.join("config.txt"), &config.to_text())?;
        if let Some(m) = &exp.manifest {
            write(&dir.join("manifest.csv"), &m.to_csv())?;
        }
        write_json(
            &dir.join("split.json"),
            &serde_json::json!({ "train": exp.train, "meta": exp.meta, "test": exp.test }),
        )?;
        let metrics = dir.join("metrics.jsonl");
        write(&metrics, "")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn epoch(&mut self, e: &EpochEvent) -> Result<()> {
        crate::harness::metrics::append_jsonl(&self.metrics, e.record)?;
        write_json(
            &self.dir.join("checkpoint.json"),
            &serde_json::json!({ "epoch": e.epoch, "model": e.model, "data_params": e.dps }),
        )
    }

    fn finish(&self, out: &TrainOutcome) -> Result<()> {
        out.trajectory.write_csv(&self.dir.join("trajectory.csv"))?;
        write_json(&self.dir.join("model.json"), &out.model)?;
        write_json(&self.dir.join("data_params.json"), &out.dps)?;
        if !out.steps.is_empty() {
            write(&self.dir.join("steps.jsonl"), &to_jsonl(&out.steps)?)?;
        }
        let last = out.final_record();
        write_json(&self.dir.join("summary.json"), last)?;
        println!(
            "epochs={} train_acc={:.4} test_acc={} -> {}",
            out.metrics.len(),
            last.train_acc,
            last.test_acc.map_or("n/a".into(), |a| format!("{a:.4}")),
            self.dir.display()
        );
        Ok(())
    }
}

fn annotate_checkpoint(err: Error, dir: &Path) -> Error {
    match err {
        Error::Diverged {
            epoch,
            step,
            reason,
            last_good,
        } => Error::Diverged {
            epoch,
            step,
            reason,
            last_good: format!("{last_good} ({})", dir.join("checkpoint.json").display()),
        },
        other => other,
    }
}

fn train_one(config: &RunConfig, dir: &Path) -> Result<TrainOutcome> {
    let exp = Experiment::prepare(config)?;
    let mut obs = RunWriter::new(dir, config, &exp)?;
    write(&dir.join("dataset.digest"), &exp.dataset.digest())?;
    let out = run_training(config, &exp, &mut |e| obs.epoch(e)).map_err(|e| annotate_checkpoint(e, dir))?;
    obs.finish(&out)?;
    Ok(out)
}

fn train_repeats(config: &RunConfig, dir: &Path) -> Result<()> {
    if config.repeats == 1 {
        train_one(config, dir)?;
        return Ok(());
    }
    let mut test = Vec::new();
    let mut train = Vec::new();
    for r in 0..config.repeats {
        let cfg = config.with_seed_offset(r as u64)?;
        let sub = dir.join(format!("seed-{r}"));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let out = train_one(&cfg, &sub)?;
        let last = out.final_record();
        train.push(last.train_acc);
        if let Some(t) = last.test_acc {
            test.push(t);
        }
    }
    let mut aggregates = vec![Aggregate::new("train_acc", train)?];
    if !test.is_empty() {
        aggregates.push(Aggregate::new("test_acc", test)?);
    }
    for a in &aggregates {
        println!("{}: {:.4} +- {:.4} over {} runs", a.name, a.mean, a.std, a.values.len());
    }
    write_json(&dir.join("aggregate.json"), &aggregates)
}

/// Separation, per-class correlation, gradient variance and spectral
/// reports for a run directory.
pub fn analyze_run(dir: &Path) -> Result<Vec<(&'static str, serde_json::Value)>> {
    let config = RunConfig::load(&dir.join("config.txt"), &[])?;
    let exp = Experiment::prepare(&config)?;
    let metrics: Vec<MetricsRecord> = read_jsonl(&dir.join("metrics.jsonl"))?;
    let traj = TrajectoryLog::read_csv(&dir.join("trajectory.csv"))?;
    let model_text = std::fs::read_to_string(dir.join("model.json")).map_err(|e| Error::io(dir.join("model.json"), e))?;
    let model: ParamVector = serde_json::from_str(&model_text)?;
    let model = ParamVector::new(model.manifest().to_vec(), model.values().to_vec())?;
    let last = traj.epochs.last().ok_or(Error::Empty("trajectory"))?;
    let n = exp.dataset.len();
    let w_inst: Vec<f64> = (0..n).map(|i| last.instance_weight(i)).collect();
    let mut out = Vec::new();

    if let Some(m) = &exp.manifest {
        let per_epoch: Vec<serde_json::Value> = traj
            .epochs
            .iter()
            .enumerate()
            .map(|(e, s)| {
                let w: Vec<f64> = (0..n).map(|i| s.instance_weight(i)).collect();
                let r = analysis::separation(&w, &exp.train, m).ok();
                serde_json::json!({ "epoch": e, "report": r })
            })
            .collect();
        out.push((
            "separation",
            serde_json::json!({
                "final": analysis::separation(&w_inst, &exp.train, m)?,
                "noise_fraction": m.noise_fraction,
                "effective_flip_rate": m.effective_flip_rate(exp.n_classes()),
                "per_epoch": per_epoch,
            }),
        ));
    }

    let per_epoch: Vec<serde_json::Value> = traj
        .epochs
        .iter()
        .zip(&metrics)
        .map(|(s, rec)| {
            let (rates, acc): (Vec<f64>, Vec<f64>) = s
                .w_class
                .iter()
                .zip(&rec.class_meta_acc)
                .filter_map(|(&w, a)| a.map(|a| (w, a)))
                .unzip();
            let r = analysis::lr_performance_correlation(&rates, &acc).ok().flatten();
            serde_json::json!({ "epoch": rec.epoch, "pearson_r": r })
        })
        .collect();
    out.push(("correlation", serde_json::json!({ "per_epoch": per_epoch })));

    let sample: Vec<usize> = exp.train.iter().copied().take(256).collect();
    let (x, y) = exp.dataset.gather(&sample, false);
    let batch = crate::nn::Batch::new(x.clone(), y.clone(), sample.clone())?;
    let g = per_sample_backward(&model, &batch, crate::losses::LossSelector::PlainCe, &crate::data_params::DataParamState::empty())?;
    let learned: Vec<f64> = sample
        .iter()
        .map(|&i| match config.mode {
            crate::data_params::WeightMode::Instance => last.instance_weight(i),
            crate::data_params::WeightMode::Class => last.w_class.get(exp.dataset.labels[i]).copied().unwrap_or(1.0),
            crate::data_params::WeightMode::None => 1.0,
        })
        .collect();
    out.push((
        "variance",
        serde_json::json!({
            "samples": sample.len(),
            "unit_weights": analysis::grad_variance(&g.grads, &vec![1.0; sample.len()])?,
            "learned_weights": analysis::grad_variance(&g.grads, &learned)?,
        }),
    ));

    if model.len() <= analysis::HESSIAN_MAX_PARAMS {
        let m = 10.min(model.len());
        let h = analysis::model_hessian_top_eigs(&model, &x, &y, m, 0)?;
        out.push(("hessian", serde_json::to_value(h)?));
    }
    Ok(out)
}
