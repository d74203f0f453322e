//! Finite-difference gradient checks and diagnostics over finished runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_params::{DataParamState, WeightMode};
use crate::datagen::CorruptionManifest;
use crate::error::{Error, Result};
use crate::losses::{self, LossSelector};
use crate::meta::{self, MetaRates};
use crate::nn::{mean_loss_and_grad, mlp_manifest, per_sample_backward, Activation, Batch, Matrix, ParamVector, PerSampleGrads};

/// Relative-error threshold of a passing check.
pub const REL_TOL: f64 = 1e-5;
/// Absolute-error threshold of a passing check.
pub const ABS_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst `|a - n| / max(|a|, |n|, ABS_TOL / REL_TOL)`. The floor makes
    /// a component pass when either its relative or its absolute error is
    /// within tolerance.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckTarget {
    PerSampleGrad,
    TemperatureGrads,
    InstanceMetagrad,
    ClassMetagrad,
    WdMetagrad,
    /// Internal sanity target on a quadratic.
    Quadratic,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 5] = [
        CheckTarget::PerSampleGrad,
        CheckTarget::TemperatureGrads,
        CheckTarget::InstanceMetagrad,
        CheckTarget::ClassMetagrad,
        CheckTarget::WdMetagrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckTarget::PerSampleGrad => "per_sample_grad",
            CheckTarget::TemperatureGrads => "temperature_grads",
            CheckTarget::InstanceMetagrad => "instance_metagrad",
            CheckTarget::ClassMetagrad => "class_metagrad",
            CheckTarget::WdMetagrad => "wd_metagrad",
            CheckTarget::Quadratic => "quadratic",
        }
    }
}

/// Running worst-case errors.
#[derive(Clone, Copy, Debug, Default)]
struct Worst {
    rel: f64,
    abs: f64,
    samples: usize,
}

impl Worst {
    fn add(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs()).max(ABS_TOL / REL_TOL);
        let rel = if abs.is_nan() { f64::INFINITY } else { abs / scale };
        self.rel = self.rel.max(rel);
        self.abs = self.abs.max(if abs.is_nan() { f64::INFINITY } else { abs });
        self.samples += 1;
    }

    fn report(self, name: &str) -> GradCheckReport {
        GradCheckReport {
            name: name.to_string(),
            max_rel_err: self.rel,
            max_abs_err: self.abs,
            pass: self.rel <= REL_TOL || self.abs <= ABS_TOL,
            samples: self.samples,
        }
    }
}

/// Central difference of `f` along coordinate `j` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], j: usize, h: f64) -> Result<f64> {
    let mut xp = x.to_vec();
    xp[j] += h;
    let fp = f(&xp)?;
    xp[j] = x[j] - h;
    let fm = f(&xp)?;
    Ok((fp - fm) / (2.0 * h))
}

/// Compares `analytic` with central differences of `f` at `x`.
pub fn compare_gradient(
    name: &str,
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != x.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: analytic.len(),
        });
    }
    let mut worst = Worst::default();
    for j in 0..x.len() {
        worst.add(analytic[j], central_diff(f, x, j, h)?);
    }
    Ok(worst.report(name))
}

/// Runs `trials` randomized checks of `target`.
pub fn finite_diff_check(target: CheckTarget, trials: usize, seed: u64) -> Result<GradCheckReport> {
    finite_diff_check_with(target, trials, seed, &|_| {})
}

/// As [`finite_diff_check`], with `perturb` applied to every analytic
/// gradient before comparison. Used to confirm that a wrong formula fails.
pub fn finite_diff_check_with(
    target: CheckTarget,
    trials: usize,
    seed: u64,
    perturb: &dyn Fn(&mut [f64]),
) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..trials {
        let trial_seed: u64 = rng.gen();
        let mut trng = ChaCha8Rng::seed_from_u64(trial_seed);
        let pairs = match target {
            CheckTarget::PerSampleGrad => per_sample_trial(&mut trng, perturb)?,
            CheckTarget::TemperatureGrads => temperature_trial(&mut trng, perturb)?,
            CheckTarget::InstanceMetagrad => metagrad_trial(&mut trng, WeightMode::Instance, perturb)?,
            CheckTarget::ClassMetagrad => metagrad_trial(&mut trng, WeightMode::Class, perturb)?,
            CheckTarget::WdMetagrad => wd_trial(&mut trng, perturb)?,
            CheckTarget::Quadratic => quadratic_trial(&mut trng, perturb)?,
        };
        for (a, n) in pairs {
            worst.add(a, n);
        }
    }
    Ok(worst.report(target.name()))
}

const STEP: f64 = 1e-5;
const TEMPERATURE_STEP: f64 = 1e-6;

struct Problem {
    model: ParamVector,
    train: Batch,
    meta: Batch,
    n_classes: usize,
    n_instances: usize,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

fn random_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let d = rng.gen_range(2..=4);
    let h = rng.gen_range(2..=5);
    let k = rng.gen_range(2..=4);
    let b = rng.gen_range(2..=5);
    // smooth activation keeps the finite differences away from kinks
    let model = ParamVector::init(mlp_manifest(d, &[h], k, Activation::Tanh), rng.gen())?;
    let n_instances = b + rng.gen_range(0..4);
    let mut idx: Vec<usize> = (0..n_instances).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
    idx.truncate(b);
    let labels = (0..b).map(|_| rng.gen_range(0..k)).collect();
    let train = Batch::new(random_matrix(rng, b, d, 2.0), labels, idx)?;
    let meta_labels = (0..b).map(|_| rng.gen_range(0..k)).collect();
    let meta = Batch::with_repeats(random_matrix(rng, b, d, 2.0), meta_labels, vec![0; b])?;
    Ok(Problem {
        model,
        train,
        meta,
        n_classes: k,
        n_instances,
    })
}

fn random_state(rng: &mut ChaCha8Rng, p: &Problem, mode: WeightMode) -> DataParamState {
    let mut dps = DataParamState::new(p.n_instances, p.n_classes, mode, rng.gen_range(0.0..0.01));
    dps.w_inst.iter_mut().for_each(|w| *w = rng.gen_range(0.2..2.0));
    dps.w_class.iter_mut().for_each(|w| *w = rng.gen_range(0.2..2.0));
    dps
}

fn random_rates(rng: &mut ChaCha8Rng) -> MetaRates {
    MetaRates {
        lr: rng.gen_range(0.05..1.0),
        lr_data: 1.0,
        lr_wd: 1.0,
    }
}

type Pairs = Vec<(f64, f64)>;

fn per_sample_trial(rng: &mut ChaCha8Rng, perturb: &dyn Fn(&mut [f64])) -> Result<Pairs> {
    let p = random_problem(rng)?;
    let dps = DataParamState::empty();
    let out = per_sample_backward(&p.model, &p.train, LossSelector::PlainCe, &dps)?;
    let mut pairs = Vec::new();
    for b in 0..p.train.len() {
        let x = p.train.features.row(b).to_vec();
        let y = p.train.labels[b];
        let mut f = |theta: &[f64]| -> Result<f64> {
            let m = p.model.with_values(theta.to_vec())?;
            let z = crate::nn::forward(&m, &Matrix::from_vec(1, x.len(), x.clone())?)?;
            Ok(losses::ce_loss(z.row(0), y)?.0)
        };
        let mut analytic = out.grads.row(b).to_vec();
        perturb(&mut analytic);
        for j in 0..analytic.len() {
            pairs.push((analytic[j], central_diff(&mut f, p.model.values(), j, STEP)?));
        }
    }
    Ok(pairs)
}

fn temperature_trial(rng: &mut ChaCha8Rng, perturb: &dyn Fn(&mut [f64])) -> Result<Pairs> {
    let k = rng.gen_range(2..=6);
    let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let y = rng.gen_range(0..k);
    let sigma = rng.gen_range(0.2..3.0);
    let out = losses::temperature_ce(&z, y, sigma)?;
    let mut analytic = out.dz.clone();
    analytic.push(out.dsigma);
    perturb(&mut analytic);

    let mut x = z.clone();
    x.push(sigma);
    let mut f = |v: &[f64]| -> Result<f64> { Ok(losses::temperature_ce(&v[..k], y, v[k])?.loss) };
    (0..=k)
        .map(|j| Ok((analytic[j], central_diff(&mut f, &x, j, TEMPERATURE_STEP)?)))
        .collect()
}

/// Meta loss at the one-step rollout as a function of the data parameters.
fn meta_loss_at(p: &Problem, dps: &DataParamState, lr: f64) -> Result<f64> {
    let rolled = meta::rollout_one_step(&p.model, &p.train, dps, lr)?;
    Ok(meta::meta_loss_and_grad(&rolled, &p.meta)?.0)
}

fn metagrad_trial(rng: &mut ChaCha8Rng, mode: WeightMode, perturb: &dyn Fn(&mut [f64])) -> Result<Pairs> {
    let p = random_problem(rng)?;
    let dps = random_state(rng, &p, mode);
    let rates = random_rates(rng);
    let (_, _, report) = meta::meta_train_step(&p.model, &dps, &p.train, &p.meta, rates, p.n_classes)?;
    let (keys, mut analytic): (Vec<usize>, Vec<f64>) = match mode {
        WeightMode::Instance => report.per_instance_metagrad.into_iter().unzip(),
        _ => report.per_class_metagrad.into_iter().unzip(),
    };
    perturb(&mut analytic);
    let base: Vec<f64> = match mode {
        WeightMode::Instance => keys.iter().map(|&i| dps.w_inst[i]).collect(),
        _ => keys.iter().map(|&c| dps.w_class[c]).collect(),
    };
    let mut f = |w: &[f64]| -> Result<f64> {
        let mut d = dps.clone();
        for (&key, &v) in keys.iter().zip(w) {
            match mode {
                WeightMode::Instance => d.w_inst[key] = v,
                _ => d.w_class[key] = v,
            }
        }
        meta_loss_at(&p, &d, rates.lr)
    };
    (0..keys.len())
        .map(|j| Ok((analytic[j], central_diff(&mut f, &base, j, STEP)?)))
        .collect()
}

fn wd_trial(rng: &mut ChaCha8Rng, perturb: &dyn Fn(&mut [f64])) -> Result<Pairs> {
    let p = random_problem(rng)?;
    let mode = if rng.gen_bool(0.5) { WeightMode::Instance } else { WeightMode::None };
    let mut dps = random_state(rng, &p, mode);
    dps.wd_learnable = true;
    let rates = random_rates(rng);
    let (_, _, report) = meta::meta_train_step(&p.model, &dps, &p.train, &p.meta, rates, p.n_classes)?;
    let mut analytic = vec![report.wd_metagrad];
    perturb(&mut analytic);
    let mut f = |v: &[f64]| -> Result<f64> {
        let mut d = dps.clone();
        d.lambda_wd = v[0];
        meta_loss_at(&p, &d, rates.lr)
    };
    // the coefficient enters linearly, so a larger step keeps round-off down
    Ok(vec![(analytic[0], central_diff(&mut f, &[dps.lambda_wd], 0, TEMPERATURE_STEP * 10.0)?)])
}

fn quadratic_trial(rng: &mut ChaCha8Rng, perturb: &dyn Fn(&mut [f64])) -> Result<Pairs> {
    let n = rng.gen_range(1..=6);
    let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut analytic: Vec<f64> = a.iter().zip(&x).map(|(ai, xi)| ai * xi).collect();
    perturb(&mut analytic);
    let mut f = |v: &[f64]| -> Result<f64> {
        Ok(0.5 * a.iter().zip(v).map(|(ai, vi)| ai * vi * vi).sum::<f64>())
    };
    // central differences are exact on a quadratic for any step
    (0..n)
        .map(|j| Ok((analytic[j], central_diff(&mut f, &x, j, 1e-2)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub clean_mean: f64,
    pub clean_std: f64,
    pub corrupt_mean: f64,
    pub corrupt_std: f64,
    /// Probability that a corrupt instance has a lower weight than a clean
    /// one, ties counted half.
    pub auc: f64,
    pub n_clean: usize,
    pub n_corrupt: usize,
}

/// Rank-based AUC of "lower weight means corrupt".
pub fn auc(clean: &[f64], corrupt: &[f64]) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::Empty("clean set"));
    }
    if corrupt.is_empty() {
        return Err(Error::Empty("corrupt set"));
    }
    // corrupt instances are the positives; score = -w
    let mut all: Vec<(f64, bool)> = corrupt
        .iter()
        .map(|&w| (-w, true))
        .chain(clean.iter().map(|&w| (-w, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (corrupt.len() as f64, clean.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Clean/corrupt statistics of the instance weights over `indices`.
pub fn separation(w_inst: &[f64], indices: &[usize], manifest: &CorruptionManifest) -> Result<SeparationReport> {
    let corrupted = manifest.corrupted();
    let (mut clean, mut corrupt) = (Vec::new(), Vec::new());
    for &i in indices {
        let w = *w_inst.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: w_inst.len(),
        })?;
        if corrupted.contains(&i) {
            corrupt.push(w);
        } else {
            clean.push(w);
        }
    }
    let auc = auc(&clean, &corrupt)?;
    let (clean_mean, clean_std) = crate::harness::mean_std(&clean).expect("checked non-empty");
    let (corrupt_mean, corrupt_std) = crate::harness::mean_std(&corrupt).expect("checked non-empty");
    Ok(SeparationReport {
        clean_mean,
        clean_std,
        corrupt_mean,
        corrupt_std,
        auc,
        n_clean: clean.len(),
        n_corrupt: corrupt.len(),
    })
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn lr_performance_correlation(rates: &[f64], accuracy: &[f64]) -> Result<Option<f64>> {
    if rates.len() != accuracy.len() {
        return Err(Error::LengthMismatch {
            expected: rates.len(),
            got: accuracy.len(),
        });
    }
    if rates.len() < 3 {
        return Err(Error::Contract(format!(
            "correlation needs at least 3 classes, got {}",
            rates.len()
        )));
    }
    let n = rates.len() as f64;
    let mx = rates.iter().sum::<f64>() / n;
    let my = accuracy.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in rates.iter().zip(accuracy) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Trace of the sample covariance of the rows `w_i * g_i`.
pub fn grad_variance(grads: &PerSampleGrads, weights: &[f64]) -> Result<f64> {
    let b = grads.rows();
    if weights.len() != b {
        return Err(Error::LengthMismatch {
            expected: b,
            got: weights.len(),
        });
    }
    if b < 2 {
        return Err(Error::Contract("gradient variance needs at least 2 rows".into()));
    }
    let mean: Vec<f64> = grads
        .weighted_sum(weights)
        .into_iter()
        .map(|s| s / b as f64)
        .collect();
    let mut total = 0.0;
    for (row, &w) in grads.iter_rows().zip(weights) {
        total += row
            .iter()
            .zip(&mean)
            .map(|(g, m)| (w * g - m) * (w * g - m))
            .sum::<f64>();
    }
    Ok(total / (b - 1) as f64)
}

pub const HESSIAN_TOL: f64 = 1e-6;
pub const HESSIAN_MAX_ITERS: usize = 500;
pub const HESSIAN_MAX_PARAMS: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Per eigenvalue, in the same order; `false` marks an estimate that hit
    /// the iteration cap.
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(g(theta + h v) - g(theta - h v)) / 2h` with `h = 1e-4 (1 + |theta|) / |v|`.
pub fn hvp(grad: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let nv = norm(v);
    if nv == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = 1e-4 * (1.0 + norm(theta)) / nv;
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t + h * x).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t - h * x).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Leading `m` eigenvalues, by magnitude, of the Hessian of the function
/// whose gradient is `grad`, via power iteration with deflation.
pub fn hessian_top_eigs(
    grad: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    m: usize,
    seed: u64,
) -> Result<HessianReport> {
    let p = theta.len();
    if p > HESSIAN_MAX_PARAMS {
        return Err(Error::Contract(format!(
            "spectral probe limited to {HESSIAN_MAX_PARAMS} parameters, got {p}"
        )));
    }
    if m == 0 || m > p {
        return Err(Error::Contract(format!("cannot extract {m} eigenvalues from {p} parameters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut found: Vec<(f64, Vec<f64>, bool, usize)> = Vec::with_capacity(m);
    for _ in 0..m {
        let mut v: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut apply = |v: &[f64], found: &[(f64, Vec<f64>, bool, usize)]| -> Result<Vec<f64>> {
            let mut w = hvp(grad, theta, v)?;
            for (lam, u, _, _) in found {
                let c = lam * dot(u, v);
                w.iter_mut().zip(u).for_each(|(wi, ui)| *wi -= c * ui);
            }
            Ok(w)
        };
        // start orthogonal to what is already found
        for (_, u, _, _) in &found {
            let c = dot(u, &v);
            v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= c * ui);
        }
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        let mut lambda = 0.0;
        let mut converged = false;
        let mut iters = 0;
        while iters < HESSIAN_MAX_ITERS {
            iters += 1;
            let w = apply(&v, &found)?;
            let est = dot(&v, &w);
            // residual of the Rayleigh pair
            let resid = norm(
                &w.iter()
                    .zip(&v)
                    .map(|(wi, vi)| wi - est * vi)
                    .collect::<Vec<_>>(),
            );
            lambda = est;
            let nw = norm(&w);
            if resid <= HESSIAN_TOL * est.abs().max(1e-12) || nw == 0.0 {
                converged = true;
                break;
            }
            v = w.into_iter().map(|x| x / nw).collect();
        }
        found.push((lambda, v, converged, iters));
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(HessianReport {
        eigenvalues: found.iter().map(|f| f.0).collect(),
        converged: found.iter().map(|f| f.2).collect(),
        iterations: found.iter().map(|f| f.3).collect(),
    })
}

/// Spectral probe of the mean plain cross-entropy over `(features, labels)`.
pub fn model_hessian_top_eigs(
    model: &ParamVector,
    features: &Matrix,
    labels: &[usize],
    m: usize,
    seed: u64,
) -> Result<HessianReport> {
    let mut grad = |theta: &[f64]| -> Result<Vec<f64>> {
        let probe = model.with_values(theta.to_vec())?;
        Ok(mean_loss_and_grad(&probe, features, labels)?.1)
    };
    hessian_top_eigs(&mut grad, model.values(), m, seed)
}
