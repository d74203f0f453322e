//! Synthetic Gaussian-blob datasets, label corruption with provenance, and
//! train/meta/test, k-fold and superclass splits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Distance between any two class means.
pub const MEAN_SEPARATION: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    /// Labels seen by training; may be corrupted.
    pub labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// `superclass_map[c]` is the superclass of class `c`.
    pub superclass_map: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// Groups classes into `n_super` contiguous superclasses.
    pub fn with_contiguous_superclasses(mut self, n_super: usize) -> Result<Self> {
        let k = self.n_classes();
        if n_super == 0 || n_super > k {
            return Err(Error::Dataset(format!(
                "cannot group {k} classes into {n_super} superclasses"
            )));
        }
        self.superclass_map = Some((0..k).map(|c| c * n_super / k).collect());
        Ok(self)
    }

    /// SHA-256 of the canonical CSV encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,label,true_label");
        for j in 0..self.dims() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{},{}", i, self.labels[i], self.true_labels[i]);
            for v in self.features.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV encoding. The class count is the largest label seen
    /// plus one unless given.
    pub fn from_csv(text: &str, n_classes: Option<usize>, file: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            file: file.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 4 || cols[..3] != ["index", "label", "true_label"] {
            return Err(perr(1, "header must start with index,label,true_label,f0".into()));
        }
        let d = cols.len() - 3;
        for (j, c) in cols[3..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(perr(1, format!("unexpected column `{c}`")));
            }
        }
        let mut labels = Vec::new();
        let mut true_labels = Vec::new();
        let mut data = Vec::new();
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 3 {
                return Err(perr(ln + 1, format!("expected {} fields, got {}", d + 3, fields.len())));
            }
            let index: usize = fields[0]
                .parse()
                .map_err(|e| perr(ln + 1, format!("index: {e}")))?;
            if index != labels.len() {
                return Err(perr(ln + 1, format!("index {index} out of sequence")));
            }
            labels.push(fields[1].parse().map_err(|e| perr(ln + 1, format!("label: {e}")))?);
            true_labels.push(
                fields[2]
                    .parse()
                    .map_err(|e| perr(ln + 1, format!("true_label: {e}")))?,
            );
            for f in &fields[3..] {
                data.push(f.parse::<f64>().map_err(|e| perr(ln + 1, format!("feature: {e}")))?);
            }
        }
        let seen = labels.iter().chain(&true_labels).max().map_or(0, |m| m + 1);
        let k = n_classes.unwrap_or(seen);
        if seen > k {
            return Err(Error::Dataset(format!("label {} exceeds {k} classes", seen - 1)));
        }
        let n = labels.len();
        Ok(Self {
            features: Matrix::from_vec(n, d, data)?,
            labels,
            true_labels,
            class_names: (0..k).map(|c| format!("class{c}")).collect(),
            superclass_map: None,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, n_classes: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, n_classes, &path.display().to_string())
    }

    pub fn superclass_csv(&self) -> Option<String> {
        self.superclass_map.as_ref().map(|map| {
            let mut out = String::from("class,superclass\n");
            for (c, s) in map.iter().enumerate() {
                let _ = writeln!(out, "{c},{s}");
            }
            out
        })
    }

    pub fn set_superclasses_from_csv(&mut self, text: &str, file: &str) -> Result<()> {
        let rows = parse_int_rows(text, &["class", "superclass"], file)?;
        let mut map = vec![usize::MAX; self.n_classes()];
        for (line, r) in rows {
            let slot = map.get_mut(r[0]).ok_or_else(|| Error::Parse {
                file: file.into(),
                line,
                msg: format!("class {} out of range", r[0]),
            })?;
            *slot = r[1];
        }
        if let Some(c) = map.iter().position(|&s| s == usize::MAX) {
            return Err(Error::Dataset(format!("class {c} has no superclass")));
        }
        self.superclass_map = Some(map);
        Ok(())
    }

    /// Features and labels of `indices`; `true_labels` selects the clean labels.
    pub fn gather(&self, indices: &[usize], true_labels: bool) -> (Matrix, Vec<usize>) {
        let src = if true_labels { &self.true_labels } else { &self.labels };
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| src[i]).collect(),
        )
    }
}

fn parse_int_rows(text: &str, header: &[&str], file: &str) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let perr = |line: usize, msg: String| Error::Parse {
        file: file.to_string(),
        line,
        msg,
    };
    let (_, h) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let got: Vec<&str> = h.split(',').map(str::trim).collect();
    if got != header {
        return Err(perr(1, format!("expected header {}", header.join(","))));
    }
    lines
        .map(|(ln, line)| {
            let vals: std::result::Result<Vec<usize>, _> =
                line.split(',').map(|f| f.trim().parse::<usize>()).collect();
            let vals = vals.map_err(|e| perr(ln + 1, e.to_string()))?;
            if vals.len() != header.len() {
                return Err(perr(ln + 1, format!("expected {} fields", header.len())));
            }
            Ok((ln + 1, vals))
        })
        .collect()
}

/// `k` points in `d` dimensions with all pairwise distances equal to
/// [`MEAN_SEPARATION`], randomly rotated.
pub fn blob_means(k: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k < 2 || d < 2 {
        return Err(Error::Dataset(format!("need k >= 2 and d >= 2, got k={k}, d={d}")));
    }
    if k - 1 > d {
        return Err(Error::Dataset(format!(
            "{k} equidistant means need at least {} dimensions, got {d}",
            k - 1
        )));
    }
    // Scaled basis vectors of R^k are equidistant; centre them and express in
    // an orthonormal basis of their (k-1)-dimensional span.
    let scale = MEAN_SEPARATION / std::f64::consts::SQRT_2;
    let centred: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| scale * (if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64))
                .collect()
        })
        .collect();
    let span = gram_schmidt(&centred[..k - 1]);
    let coords: Vec<Vec<f64>> = centred
        .iter()
        .map(|p| span.iter().map(|b| dot(p, b)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_616e_735f_7631);
    let random: Vec<Vec<f64>> = (0..k - 1)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let rotation = gram_schmidt(&random);
    Ok(coords
        .iter()
        .map(|c| {
            (0..d)
                .map(|j| c.iter().zip(&rotation).map(|(ci, r)| ci * r[j]).sum())
                .collect()
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut u = v.clone();
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&u, b);
                u.iter_mut().zip(b).for_each(|(ui, bi)| *ui -= c * bi);
            }
        }
        let norm = dot(&u, &u).sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        basis.push(u);
    }
    basis
}

/// Isotropic Gaussian clusters with standard deviation `spread` around
/// equidistant means. Rows are class-major.
pub fn make_blobs(
    n_classes: usize,
    per_class: usize,
    dims: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if per_class == 0 {
        return Err(Error::Dataset("per_class must be positive".into()));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::Dataset(format!("spread must be non-negative, got {spread}")));
    }
    let means = blob_means(n_classes, dims, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_classes * per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for m in mean {
                let eps: f64 = rng.sample(StandardNormal);
                data.push(m + spread * eps);
            }
            labels.push(c);
        }
    }
    Ok(LabeledDataset {
        features: Matrix::from_vec(n, dims, data)?,
        true_labels: labels.clone(),
        labels,
        class_names: (0..n_classes).map(|c| format!("class{c}")).collect(),
        superclass_map: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionEntry {
    pub index: usize,
    pub original: usize,
    pub assigned: usize,
}

/// Every replacement draw, including draws that re-assigned the original label.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionManifest {
    pub entries: Vec<CorruptionEntry>,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl CorruptionManifest {
    /// Indices whose label actually changed.
    pub fn corrupted(&self) -> BTreeSet<usize> {
        self.entries
            .iter()
            .filter(|e| e.original != e.assigned)
            .map(|e| e.index)
            .collect()
    }

    /// Expected share of labels that actually change, `p (K-1) / K`.
    pub fn effective_flip_rate(&self, n_classes: usize) -> f64 {
        self.noise_fraction * (n_classes as f64 - 1.0) / n_classes as f64
    }

    /// Overwrites labels with the assigned ones.
    pub fn apply(&self, ds: &mut LabeledDataset) -> Result<()> {
        for e in &self.entries {
            let slot = ds.labels.get_mut(e.index).ok_or(Error::IndexOutOfRange {
                index: e.index,
                len: ds.true_labels.len(),
            })?;
            *slot = e.assigned;
        }
        Ok(())
    }

    /// Restores the original labels.
    pub fn invert(&self, ds: &mut LabeledDataset) -> Result<()> {
        for e in self.entries.iter().rev() {
            let slot = ds.labels.get_mut(e.index).ok_or(Error::IndexOutOfRange {
                index: e.index,
                len: ds.true_labels.len(),
            })?;
            *slot = e.original;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,original,assigned\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.index, e.original, e.assigned);
        }
        out
    }

    /// Parses the CSV encoding; noise fraction and seed are not part of it.
    pub fn from_csv(text: &str, file: &str) -> Result<Self> {
        let rows = parse_int_rows(text, &["index", "original", "assigned"], file)?;
        Ok(Self {
            entries: rows
                .into_iter()
                .map(|(_, r)| CorruptionEntry {
                    index: r[0],
                    original: r[1],
                    assigned: r[2],
                })
                .collect(),
            noise_fraction: f64::NAN,
            seed: 0,
        })
    }
}

/// Replaces each label with probability `p` by a uniform draw over all classes.
pub fn corrupt_labels(
    ds: &LabeledDataset,
    p: f64,
    seed: u64,
) -> Result<(LabeledDataset, CorruptionManifest)> {
    let all: Vec<usize> = (0..ds.len()).collect();
    corrupt_labels_at(ds, &all, p, seed)
}

/// As [`corrupt_labels`] restricted to `indices`.
pub fn corrupt_labels_at(
    ds: &LabeledDataset,
    indices: &[usize],
    p: f64,
    seed: u64,
) -> Result<(LabeledDataset, CorruptionManifest)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Dataset(format!("noise fraction must be in [0, 1], got {p}")));
    }
    let k = ds.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    let mut entries = Vec::new();
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for i in sorted {
        if i >= ds.len() {
            return Err(Error::IndexOutOfRange { index: i, len: ds.len() });
        }
        if rng.gen_bool(p) {
            let assigned = rng.gen_range(0..k);
            entries.push(CorruptionEntry {
                index: i,
                original: ds.labels[i],
                assigned,
            });
            out.labels[i] = assigned;
        }
    }
    Ok((
        out,
        CorruptionManifest {
            entries,
            noise_fraction: p,
            seed,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitKind {
    /// Per-class counts of meta and test instances; the rest is train.
    Holdout { meta_per_class: usize, test_per_class: usize },
    /// Per-class test count; the remaining pool is cut into `k` folds.
    KFold { k: usize, test_per_class: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub seed: u64,
    pub personalization_target: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutSplit {
    pub train: Vec<usize>,
    pub meta: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KFoldSplit {
    pub folds: Vec<Vec<usize>>,
    pub test: Vec<usize>,
}

impl KFoldSplit {
    /// Every pooled instance outside fold `f`.
    pub fn train_for(&self, f: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn pool(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.folds.concat();
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    Holdout(HoldoutSplit),
    KFold(KFoldSplit),
}

fn class_members(ds: &LabeledDataset, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); ds.n_classes()];
    for (i, &y) in ds.true_labels.iter().enumerate() {
        members[y].push(i);
    }
    for m in &mut members {
        m.shuffle(rng);
    }
    members
}

pub fn holdout_split(
    ds: &LabeledDataset,
    meta_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<HoldoutSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = HoldoutSplit {
        train: Vec::new(),
        meta: Vec::new(),
        test: Vec::new(),
    };
    for (c, members) in class_members(ds, &mut rng).iter().enumerate() {
        if meta_per_class + test_per_class >= members.len() {
            return Err(Error::Dataset(format!(
                "class {c} has {} instances; meta ({meta_per_class}) + test ({test_per_class}) leaves none for training",
                members.len()
            )));
        }
        split.meta.extend_from_slice(&members[..meta_per_class]);
        split
            .test
            .extend_from_slice(&members[meta_per_class..meta_per_class + test_per_class]);
        split
            .train
            .extend_from_slice(&members[meta_per_class + test_per_class..]);
    }
    split.train.sort_unstable();
    split.meta.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

pub fn kfold_split(ds: &LabeledDataset, k: usize, test_per_class: usize, seed: u64) -> Result<KFoldSplit> {
    if k < 2 {
        return Err(Error::Dataset(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    let mut pool = Vec::new();
    for (c, members) in class_members(ds, &mut rng).iter().enumerate() {
        if test_per_class >= members.len() {
            return Err(Error::Dataset(format!(
                "class {c} has {} instances, cannot hold out {test_per_class} for test",
                members.len()
            )));
        }
        test.extend_from_slice(&members[..test_per_class]);
        pool.extend_from_slice(&members[test_per_class..]);
    }
    if k > pool.len() {
        return Err(Error::Dataset(format!("{k} folds over {} instances", pool.len())));
    }
    pool.sort_unstable();
    pool.shuffle(&mut rng);
    let n = pool.len();
    let folds = (0..k)
        .map(|f| {
            let mut fold = pool[f * n / k..(f + 1) * n / k].to_vec();
            fold.sort_unstable();
            fold
        })
        .collect();
    test.sort_unstable();
    Ok(KFoldSplit { folds, test })
}

pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<Split> {
    match spec.kind {
        SplitKind::Holdout {
            meta_per_class,
            test_per_class,
        } => holdout_split(ds, meta_per_class, test_per_class, spec.seed).map(Split::Holdout),
        SplitKind::KFold { k, test_per_class } => {
            kfold_split(ds, k, test_per_class, spec.seed).map(Split::KFold)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizationSplit {
    pub target_classes: Vec<usize>,
    pub full_train: Vec<usize>,
    pub biased_train: Vec<usize>,
    pub meta_from_target: Vec<usize>,
    pub test_on_target: Vec<usize>,
}

pub fn personalization_split(
    ds: &LabeledDataset,
    target: usize,
    meta_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<PersonalizationSplit> {
    let map = ds
        .superclass_map
        .as_ref()
        .ok_or_else(|| Error::Dataset("dataset has no superclass map".into()))?;
    let target_classes: Vec<usize> = (0..map.len()).filter(|&c| map[c] == target).collect();
    if target_classes.is_empty() {
        return Err(Error::Dataset(format!("unknown superclass {target}")));
    }
    let base = holdout_split(ds, meta_per_class, test_per_class, seed)?;
    let in_target = |i: &usize| map[ds.true_labels[*i]] == target;
    Ok(PersonalizationSplit {
        biased_train: base
            .train
            .iter()
            .copied()
            .filter(|&i| map[ds.labels[i]] == target)
            .collect(),
        meta_from_target: base.meta.iter().copied().filter(in_target).collect(),
        test_on_target: base.test.iter().copied().filter(in_target).collect(),
        full_train: base.train,
        target_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest(means: &[Vec<f64>], x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, m) in means.iter().enumerate() {
            let d: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    #[test]
    fn means_are_equidistant() {
        let means = blob_means(10, 16, 3).unwrap();
        for i in 0..10 {
            for j in i + 1..10 {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((d - MEAN_SEPARATION).abs() < 1e-10);
            }
        }
        assert!(blob_means(5, 3, 0).is_err());
        assert!(blob_means(4, 3, 0).is_ok());
    }

    #[test]
    fn zero_spread_is_perfectly_separable() {
        let ds = make_blobs(4, 25, 3, 0.0, 1).unwrap();
        let means = blob_means(4, 3, 1).unwrap();
        for i in 0..ds.len() {
            assert_eq!(nearest(&means, ds.features.row(i)), ds.labels[i]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_blobs(3, 50, 4, 1.0, 42).unwrap();
        let b = make_blobs(3, 50, 4, 1.0, 42).unwrap();
        assert_eq!(a.to_csv().as_bytes(), b.to_csv().as_bytes());
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), make_blobs(3, 50, 4, 1.0, 43).unwrap().digest());
    }

    #[test]
    fn nearest_mean_accuracy_matches_monte_carlo_bayes_rate() {
        let (k, d, seed) = (3, 16, 5);
        let ds = make_blobs(k, 200, d, 1.0, seed).unwrap();
        let mut emp = vec![vec![0.0; d]; k];
        for i in 0..ds.len() {
            for (e, x) in emp[ds.labels[i]].iter_mut().zip(ds.features.row(i)) {
                *e += x / 200.0;
            }
        }
        let acc = (0..ds.len())
            .filter(|&i| nearest(&emp, ds.features.row(i)) == ds.labels[i])
            .count() as f64
            / ds.len() as f64;

        let means = blob_means(k, d, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let trials = 100_000;
        let mut hits = 0;
        for t in 0..trials {
            let c = t % k;
            let x: Vec<f64> = means[c]
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            if nearest(&means, &x) == c {
                hits += 1;
            }
        }
        let bayes = hits as f64 / trials as f64;
        assert!((acc - bayes).abs() <= 0.03, "nearest-mean {acc} vs bayes {bayes}");
    }

    #[test]
    fn zero_noise_is_a_no_op() {
        let ds = make_blobs(3, 20, 2, 1.0, 0).unwrap();
        let (out, manifest) = corrupt_labels(&ds, 0.0, 7).unwrap();
        assert_eq!(out, ds);
        assert!(manifest.entries.is_empty());
    }

    #[test]
    fn full_noise_flips_two_thirds_of_three_classes() {
        let ds = make_blobs(3, 1000, 2, 1.0, 0).unwrap();
        let (out, manifest) = corrupt_labels(&ds, 1.0, 11).unwrap();
        let changed = (0..ds.len()).filter(|&i| out.labels[i] != ds.labels[i]).count();
        let frac = changed as f64 / ds.len() as f64;
        assert!((frac - 2.0 / 3.0).abs() <= 0.03, "{frac}");
        assert_eq!(manifest.entries.len(), ds.len());
        assert!((manifest.effective_flip_rate(3) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn manifest_bookkeeping_and_round_trip() {
        let clean = make_blobs(4, 100, 3, 1.0, 2).unwrap();
        let (noisy, manifest) = corrupt_labels(&clean, 0.5, 3).unwrap();
        for e in &manifest.entries {
            assert_eq!(noisy.labels[e.index] != clean.labels[e.index], e.assigned != e.original);
        }
        let mut reapplied = clean.clone();
        manifest.apply(&mut reapplied).unwrap();
        assert_eq!(reapplied, noisy);
        let mut restored = noisy.clone();
        manifest.invert(&mut restored).unwrap();
        assert_eq!(restored.labels, clean.true_labels);

        let parsed = CorruptionManifest::from_csv(&manifest.to_csv(), "m").unwrap();
        assert_eq!(parsed.entries, manifest.entries);
    }

    #[test]
    fn kfold_partitions_the_pool() {
        let ds = make_blobs(4, 25, 3, 1.0, 0).unwrap();
        let folds = kfold_split(&ds, 5, 0, 9).unwrap();
        let mut seen = BTreeSet::new();
        for f in &folds.folds {
            assert_eq!(f.len(), 20);
            for &i in f {
                assert!(seen.insert(i));
            }
        }
        assert_eq!(seen.len(), 100);
        for i in 0..100 {
            let count = (0..5).filter(|&f| folds.train_for(f).contains(&i)).count();
            assert_eq!(count, 4);
        }
        assert_eq!(kfold_split(&ds, 5, 0, 9).unwrap(), folds);
    }

    #[test]
    fn holdout_is_disjoint_and_deterministic() {
        let ds = make_blobs(3, 30, 2, 1.0, 0).unwrap();
        let s = holdout_split(&ds, 4, 6, 1).unwrap();
        assert_eq!(s.meta.len(), 12);
        assert_eq!(s.test.len(), 18);
        assert_eq!(s.train.len(), 60);
        let all: BTreeSet<usize> = s.train.iter().chain(&s.meta).chain(&s.test).copied().collect();
        assert_eq!(all.len(), 90);
        assert_eq!(holdout_split(&ds, 4, 6, 1).unwrap(), s);
        let empty_meta = holdout_split(&ds, 0, 6, 1).unwrap();
        assert!(empty_meta.meta.is_empty());
        assert!(holdout_split(&ds, 30, 0, 1).is_err());
    }

    #[test]
    fn personalization_filters_to_target() {
        let ds = make_blobs(10, 30, 12, 1.0, 0)
            .unwrap()
            .with_contiguous_superclasses(2)
            .unwrap();
        let p = personalization_split(&ds, 1, 3, 5, 4).unwrap();
        assert_eq!(p.target_classes, vec![5, 6, 7, 8, 9]);
        let biased: BTreeSet<usize> = p.biased_train.iter().map(|&i| ds.labels[i]).collect();
        assert_eq!(biased, (5..10).collect());
        assert!(p.meta_from_target.iter().all(|&i| ds.true_labels[i] >= 5));
        assert!(p.test_on_target.iter().all(|&i| ds.true_labels[i] >= 5));

        let whole = ds.clone().with_contiguous_superclasses(1).unwrap();
        let p = personalization_split(&whole, 0, 3, 5, 4).unwrap();
        assert_eq!(p.biased_train, p.full_train);
        assert!(personalization_split(&whole, 3, 3, 5, 4).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = make_blobs(3, 7, 3, 0.8, 12).unwrap();
        let (ds, _) = corrupt_labels(&ds, 0.5, 1).unwrap();
        let ds = ds.with_contiguous_superclasses(3).unwrap();
        let mut back = LabeledDataset::from_csv(&ds.to_csv(), Some(3), "d").unwrap();
        back.set_superclasses_from_csv(&ds.superclass_csv().unwrap(), "s").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_rejects_bad_rows() {
        assert!(LabeledDataset::from_csv("index,label,true_label,f0\n0,1,1\n", None, "x").is_err());
        assert!(LabeledDataset::from_csv("index,label\n", None, "x").is_err());
        assert!(LabeledDataset::from_csv("index,label,true_label,f0\n1,1,1,0.5\n", None, "x").is_err());
    }
}
