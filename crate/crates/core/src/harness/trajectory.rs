//! Per-epoch record of every data parameter, stored as long-form CSV
//! `epoch,kind,id,value`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data_params::DataParamState;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochSnapshot {
    /// Instance multipliers that differ from 1.
    pub w_inst: BTreeMap<usize, f64>,
    pub w_class: Vec<f64>,
    pub lambda_wd: f64,
    pub sigma_class: Vec<f64>,
    pub sigma_inst: Vec<f64>,
}

impl EpochSnapshot {
    pub fn capture(dps: &DataParamState) -> Self {
        Self {
            w_inst: dps
                .w_inst
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 1.0)
                .map(|(i, &w)| (i, w))
                .collect(),
            w_class: dps.w_class.clone(),
            lambda_wd: dps.lambda_wd,
            sigma_class: dps.sigma_class.clone().unwrap_or_default(),
            sigma_inst: dps.sigma_inst.clone().unwrap_or_default(),
        }
    }

    pub fn instance_weight(&self, index: usize) -> f64 {
        self.w_inst.get(&index).copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub epochs: Vec<EpochSnapshot>,
}

const HEADER: &str = "epoch,kind,id,value";

fn push_rows(out: &mut String, epoch: usize, kind: &str, rows: impl Iterator<Item = (usize, f64)>) {
    for (id, v) in rows {
        // `{:?}` round-trips f64 exactly
        out.push_str(&format!("{epoch},{kind},{id},{v:?}\n"));
    }
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for (e, s) in self.epochs.iter().enumerate() {
            push_rows(&mut out, e, "wd", std::iter::once((0, s.lambda_wd)));
            push_rows(&mut out, e, "class", s.w_class.iter().copied().enumerate());
            push_rows(&mut out, e, "inst", s.w_inst.iter().map(|(&i, &w)| (i, w)));
            push_rows(&mut out, e, "sigma_class", s.sigma_class.iter().copied().enumerate());
            push_rows(&mut out, e, "sigma_inst", s.sigma_inst.iter().copied().enumerate());
        }
        out
    }

    pub fn from_csv(text: &str, file: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            file: file.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(perr(1, format!("expected header {HEADER}"))),
        }
        let mut epochs: Vec<EpochSnapshot> = Vec::new();
        let set_dense = |v: &mut Vec<f64>, id: usize, x: f64, line: usize| {
            if id != v.len() {
                return Err(perr(line, format!("expected id {}, got {id}", v.len())));
            }
            v.push(x);
            Ok(())
        };
        for (n, line) in lines {
            let ln = n + 1;
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(perr(ln, "expected 4 fields".into()));
            }
            let epoch: usize = f[0].parse().map_err(|e| perr(ln, format!("epoch: {e}")))?;
            let id: usize = f[2].parse().map_err(|e| perr(ln, format!("id: {e}")))?;
            let value: f64 = f[3].parse().map_err(|e| perr(ln, format!("value: {e}")))?;
            if !value.is_finite() {
                return Err(perr(ln, "value is not finite".into()));
            }
            if epoch == epochs.len() {
                epochs.push(EpochSnapshot::default());
            } else if epoch + 1 != epochs.len() {
                return Err(perr(ln, format!("epochs must be contiguous from 0, saw {epoch}")));
            }
            let snap = epochs.last_mut().expect("pushed above");
            match f[1] {
                "wd" => snap.lambda_wd = value,
                "class" => set_dense(&mut snap.w_class, id, value, ln)?,
                "inst" => {
                    snap.w_inst.insert(id, value);
                }
                "sigma_class" => set_dense(&mut snap.sigma_class, id, value, ln)?,
                "sigma_inst" => set_dense(&mut snap.sigma_inst, id, value, ln)?,
                other => return Err(perr(ln, format!("unknown kind `{other}`"))),
            }
        }
        Ok(Self { epochs })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }

    /// Elementwise mean of several trajectories of equal length.
    ///
    /// `inst_support[r]` lists the instances that run `r` could train on;
    /// each instance multiplier is averaged only over the runs that saw it.
    pub fn average(runs: &[TrajectoryLog], inst_support: &[Vec<usize>]) -> Result<Self> {
        let first = runs.first().ok_or(Error::Empty("trajectories to average"))?;
        if inst_support.len() != runs.len() {
            return Err(Error::LengthMismatch {
                expected: runs.len(),
                got: inst_support.len(),
            });
        }
        let n_epochs = first.len();
        if let Some(r) = runs.iter().find(|r| r.len() != n_epochs) {
            return Err(Error::LengthMismatch {
                expected: n_epochs,
                got: r.len(),
            });
        }
        let runs_f = runs.len() as f64;
        let mean_vec = |e: usize, pick: fn(&EpochSnapshot) -> &Vec<f64>| -> Result<Vec<f64>> {
            let len = pick(&first.epochs[e]).len();
            let mut acc = vec![0.0; len];
            for r in runs {
                let v = pick(&r.epochs[e]);
                if v.len() != len {
                    return Err(Error::LengthMismatch {
                        expected: len,
                        got: v.len(),
                    });
                }
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            }
            Ok(acc.into_iter().map(|a| a / runs_f).collect())
        };
        let mut epochs = Vec::with_capacity(n_epochs);
        for e in 0..n_epochs {
            let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for (r, support) in runs.iter().zip(inst_support) {
                for &i in support {
                    let s = sums.entry(i).or_insert((0.0, 0));
                    s.0 += r.epochs[e].instance_weight(i);
                    s.1 += 1;
                }
            }
            epochs.push(EpochSnapshot {
                w_inst: sums
                    .into_iter()
                    .map(|(i, (s, n))| (i, s / n as f64))
                    .filter(|&(_, w)| w != 1.0)
                    .collect(),
                w_class: mean_vec(e, |s| &s.w_class)?,
                lambda_wd: runs.iter().map(|r| r.epochs[e].lambda_wd).sum::<f64>() / runs_f,
                sigma_class: mean_vec(e, |s| &s.sigma_class)?,
                sigma_inst: mean_vec(e, |s| &s.sigma_inst)?,
            });
        }
        Ok(Self { epochs })
    }
}
