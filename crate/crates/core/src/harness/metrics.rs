use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Against the labels used for training, which may be noisy.
    pub train_acc: f64,
    pub meta_loss: Option<f64>,
    pub meta_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Meta-set accuracy per class; `None` where the class is absent.
    pub class_meta_acc: Vec<Option<f64>>,
    pub w_clean_mean: Option<f64>,
    pub w_clean_std: Option<f64>,
    pub w_corrupt_mean: Option<f64>,
    pub w_corrupt_std: Option<f64>,
    pub lambda_wd: f64,
    pub clamp_count: usize,
    pub wall_ms: f64,
    pub train_grad_evals: u64,
    pub meta_samples: u64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Mean and spread of one scalar over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn new(name: &str, values: Vec<f64>) -> Result<Self> {
        let (mean, std) = mean_std(&values).ok_or(Error::Empty("aggregate values"))?;
        Ok(Self {
            name: name.to_string(),
            values,
            mean,
            std,
        })
    }
}
