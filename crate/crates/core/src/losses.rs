//! Cross-entropy, the weighted batch objective and the temperature-scaled
//! cross-entropy used by learnable data temperatures.

use serde::{Deserialize, Serialize};

use crate::data_params::DataParamState;
use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Lower bound on any effective temperature.
pub const SIGMA_MIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureMode {
    Class,
    Instance,
    Joint,
}

impl std::str::FromStr for TemperatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "class" => Ok(Self::Class),
            "instance" => Ok(Self::Instance),
            "joint" => Ok(Self::Joint),
            other => Err(Error::Config(format!("unknown temperature mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossSelector {
    PlainCe,
    Temperature(TemperatureMode),
}

/// Softmax bookkeeping for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxRecord {
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    /// Distribution over non-target classes, `q[y] = 0`.
    pub q: Vec<f64>,
    pub y: usize,
    pub sigma_eff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureOutput {
    pub loss: f64,
    pub dz: Vec<f64>,
    pub dsigma: f64,
    pub record: SoftmaxRecord,
    /// The requested temperature was below [`SIGMA_MIN`] and was raised to it.
    pub clamped: bool,
}

/// Loss, logit gradient and (for temperature losses) temperature gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLoss {
    pub loss: f64,
    pub dz: Vec<f64>,
    pub dsigma: Option<f64>,
    pub clamped: bool,
}

fn check_target(z: &[f64], y: usize) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::Contract(format!(
            "cross-entropy needs at least 2 classes, got {}",
            z.len()
        )));
    }
    if y >= z.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: z.len(),
        });
    }
    Ok(())
}

/// Returns `(p, log_sum_exp)` of `scale * z`, max-subtracted.
fn softmax_scaled(z: &[f64], scale: f64) -> (Vec<f64>, f64) {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let mut p: Vec<f64> = z.iter().map(|&v| (v * scale - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    (p, max + sum.ln())
}

/// `-log softmax(z)[y]` and `softmax(z) - onehot(y)`.
pub fn ce_loss(z: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    check_target(z, y)?;
    let (mut p, lse) = softmax_scaled(z, 1.0);
    let loss = lse - z[y];
    p[y] -= 1.0;
    Ok((loss, p))
}

/// Cross-entropy of `softmax(z / sigma)` with gradients in `z` and `sigma`.
pub fn temperature_ce(z: &[f64], y: usize, sigma: f64) -> Result<TemperatureOutput> {
    check_target(z, y)?;
    let clamped = !(sigma >= SIGMA_MIN);
    let sigma = if clamped { SIGMA_MIN } else { sigma };
    let inv = 1.0 / sigma;
    let (p, lse) = softmax_scaled(z, inv);
    let loss = lse - z[y] * inv;

    let dz: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| (pj - if j == y { 1.0 } else { 0.0 }) * inv)
        .collect();

    // 1 - p_y summed over the other classes keeps precision when p_y -> 1.
    let rest: f64 = p
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .sum();
    let q: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| if j == y || rest == 0.0 { 0.0 } else { pj / rest })
        .collect();
    // (1 - p_y) * q_j == p_j, so the bracket is expanded to avoid dividing by rest.
    let expected_other: f64 = p
        .iter()
        .zip(z)
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, (&pj, &zj))| pj * zj)
        .sum();
    let dsigma = (rest * z[y] - expected_other) * inv * inv;

    Ok(TemperatureOutput {
        loss,
        dz,
        dsigma,
        record: SoftmaxRecord {
            z: z.to_vec(),
            p,
            q,
            y,
            sigma_eff: sigma,
        },
        clamped,
    })
}

/// A temperature after applying the lower bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedSigma {
    pub value: f64,
    pub clamped: bool,
}

/// Effective temperature of instance `index` with label `y`.
pub fn resolve_sigma(
    mode: TemperatureMode,
    y: usize,
    index: usize,
    dps: &DataParamState,
) -> Result<ResolvedSigma> {
    let class = |dps: &DataParamState| -> Result<f64> {
        let table = dps
            .sigma_class
            .as_ref()
            .ok_or(Error::MissingTable("sigma_class"))?;
        table.get(y).copied().ok_or(Error::LabelOutOfRange {
            label: y,
            classes: table.len(),
        })
    };
    let inst = |dps: &DataParamState| -> Result<f64> {
        let table = dps
            .sigma_inst
            .as_ref()
            .ok_or(Error::MissingTable("sigma_inst"))?;
        table.get(index).copied().ok_or(Error::IndexOutOfRange {
            index,
            len: table.len(),
        })
    };
    let raw = match mode {
        TemperatureMode::Class => class(dps)?,
        TemperatureMode::Instance => inst(dps)?,
        TemperatureMode::Joint => class(dps)? + inst(dps)?,
    };
    Ok(if raw >= SIGMA_MIN {
        ResolvedSigma {
            value: raw,
            clamped: false,
        }
    } else {
        ResolvedSigma {
            value: SIGMA_MIN,
            clamped: true,
        }
    })
}

/// Dispatches on the selector for one sample.
pub fn evaluate(
    selector: LossSelector,
    z: &[f64],
    y: usize,
    index: usize,
    dps: &DataParamState,
) -> Result<SampleLoss> {
    match selector {
        LossSelector::PlainCe => {
            let (loss, dz) = ce_loss(z, y)?;
            Ok(SampleLoss {
                loss,
                dz,
                dsigma: None,
                clamped: false,
            })
        }
        LossSelector::Temperature(mode) => {
            let sigma = resolve_sigma(mode, y, index, dps)?;
            let out = temperature_ce(z, y, sigma.value)?;
            Ok(SampleLoss {
                loss: out.loss,
                dz: out.dz,
                dsigma: Some(out.dsigma),
                clamped: sigma.clamped || out.clamped,
            })
        }
    }
}

/// `(1/B) sum_i w_i L_i + (lambda_wd / 2) ||theta||^2`. An empty batch counts as
/// one zero-loss sample.
pub fn weighted_batch_loss(
    losses: &[f64],
    weights: &[f64],
    model: &ParamVector,
    lambda_wd: f64,
) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: losses.len(),
            got: weights.len(),
        });
    }
    if let Some(i) = weights.iter().position(|&w| !(w >= 0.0)) {
        return Err(Error::Contract(format!(
            "weight {i} is negative ({})",
            weights[i]
        )));
    }
    let b = losses.len().max(1) as f64;
    let data: f64 = losses.iter().zip(weights).map(|(l, w)| w * l).sum();
    Ok(data / b + 0.5 * lambda_wd * model.squared_norm())
}

/// Predicted class from raw logits; ties go to the lowest index.
pub fn inference_logits(z: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_params::WeightMode;
    use crate::nn::{mlp_manifest, Activation};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ce_symmetric_case() {
        let (loss, dz) = ce_loss(&[0.0, 0.0], 0).unwrap();
        assert!(close(loss, std::f64::consts::LN_2, 1e-15));
        assert_eq!(dz, vec![-0.5, 0.5]);
    }

    #[test]
    fn ce_matches_log1p_closed_form() {
        // ln(1 + e^-1)
        let (loss, _) = ce_loss(&[1.0, 0.0], 0).unwrap();
        assert!(close(loss, (-1.0f64).exp().ln_1p(), 1e-15));
        assert!(close(loss, 0.313262, 1e-6));
    }

    #[test]
    fn ce_rejects_bad_label() {
        assert!(matches!(
            ce_loss(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn ce_is_shift_invariant() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.25).collect();
        let (l0, d0) = ce_loss(&z, 2).unwrap();
        let (l1, d1) = ce_loss(&shifted, 2).unwrap();
        assert!(close(l0, l1, 1e-12));
        for (a, b) in d0.iter().zip(&d1) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn unit_temperature_reproduces_ce_exactly() {
        let z = [0.4, -0.3, 1.9];
        let (loss, dz) = ce_loss(&z, 1).unwrap();
        let t = temperature_ce(&z, 1, 1.0).unwrap();
        assert_eq!(t.loss, loss);
        assert_eq!(t.dz, dz);
        assert!(t.dsigma.is_finite());
    }

    #[test]
    fn temperature_two_class_closed_forms() {
        let t = temperature_ce(&[2.0, 0.0], 0, 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!(close(t.record.p[0], e / (e + 1.0), 1e-15));
        assert!(close(t.record.p[1], 1.0 / (e + 1.0), 1e-15));
        assert!(close(t.loss, 0.313262, 1e-6));
        assert!(close(t.dz[0], -0.134471, 1e-6));
        assert!(close(t.dz[1], 0.134471, 1e-6));
        let expect = (1.0 / (e + 1.0)) / 4.0 * 2.0;
        assert!(close(t.dsigma, expect, 1e-15));
        assert!(close(t.dsigma, 0.134471, 1e-6));
    }

    #[test]
    fn misclassified_sample_pushes_temperature_up() {
        let t = temperature_ce(&[0.0, 3.0], 0, 1.0).unwrap();
        let p0 = t.record.p[0];
        assert!(close(t.dsigma, (1.0 - p0) * (0.0 - 3.0), 1e-14));
        assert!(t.dsigma < 0.0);
    }

    #[test]
    fn temperature_below_floor_is_clamped() {
        let t = temperature_ce(&[1.0, 0.0], 0, 0.01).unwrap();
        assert!(t.clamped);
        assert_eq!(t.record.sigma_eff, SIGMA_MIN);
    }

    #[test]
    fn record_distributions_are_normalised() {
        let t = temperature_ce(&[0.1, 2.0, -0.5, 0.7], 3, 0.8).unwrap();
        assert!(close(t.record.p.iter().sum(), 1.0, 1e-12));
        assert!(close(t.record.q.iter().sum(), 1.0, 1e-12));
        assert_eq!(t.record.q[3], 0.0);
    }

    fn sigma_state() -> DataParamState {
        let mut dps = DataParamState::new(4, 3, WeightMode::None, 0.0);
        dps.enable_temperature(TemperatureMode::Joint);
        dps
    }

    #[test]
    fn resolve_joint_at_init() {
        let dps = sigma_state();
        let s = resolve_sigma(TemperatureMode::Joint, 2, 1, &dps).unwrap();
        assert_eq!(s.value, 1.0);
        assert!(!s.clamped);
    }

    #[test]
    fn resolve_instance_lookup_and_clamp() {
        let mut dps = sigma_state();
        dps.sigma_inst.as_mut().unwrap()[3] = 0.7;
        let s = resolve_sigma(TemperatureMode::Instance, 0, 3, &dps).unwrap();
        assert_eq!(s.value, 0.7);
        dps.sigma_inst.as_mut().unwrap()[3] = -0.99;
        let s = resolve_sigma(TemperatureMode::Joint, 0, 3, &dps).unwrap();
        assert_eq!(s.value, SIGMA_MIN);
        assert!(s.clamped);
    }

    #[test]
    fn resolve_without_table_fails() {
        let dps = DataParamState::new(4, 3, WeightMode::None, 0.0);
        assert!(matches!(
            resolve_sigma(TemperatureMode::Class, 0, 0, &dps),
            Err(Error::MissingTable("sigma_class"))
        ));
    }

    #[test]
    fn weighted_loss_examples() {
        let model = ParamVector::zeros(mlp_manifest(1, &[], 2, Activation::Identity)).unwrap();
        assert_eq!(weighted_batch_loss(&[1.0, 2.0], &[1.0, 1.0], &model, 0.0).unwrap(), 1.5);
        assert_eq!(weighted_batch_loss(&[1.0, 2.0], &[0.0, 2.0], &model, 0.0).unwrap(), 2.0);
        // four parameters, each 1: ||theta||^2 = 4
        let model = model.with_values(vec![1.0; 4]).unwrap();
        assert!(close(weighted_batch_loss(&[], &[], &model, 0.1).unwrap(), 0.2, 1e-15));
        assert!(weighted_batch_loss(&[1.0], &[-0.1], &model, 0.0).is_err());
    }

    #[test]
    fn inference_tie_and_lookup() {
        assert_eq!(inference_logits(&[1.0, 1.0]), 0);
        assert_eq!(inference_logits(&[0.2, 0.9, -1.0]), 1);
    }

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn temperature_gradients_match_finite_differences(
            z in prop::collection::vec(-4.0f64..4.0, 2..6),
            ysel in 0usize..100,
            sigma in 0.2f64..5.0,
        ) {
            let y = ysel % z.len();
            let h = 1e-6;
            let out = temperature_ce(&z, y, sigma).unwrap();
            let num_s = fd(|s| temperature_ce(&z, y, s).unwrap().loss, sigma, h);
            let err = (num_s - out.dsigma).abs();
            prop_assert!(err <= 1e-5 * num_s.abs().max(out.dsigma.abs()) || err <= 1e-8);
            for j in 0..z.len() {
                let num = fd(|v| { let mut zz = z.clone(); zz[j] = v; temperature_ce(&zz, y, sigma).unwrap().loss }, z[j], h);
                let err = (num - out.dz[j]).abs();
                prop_assert!(err <= 1e-5 * num.abs().max(out.dz[j].abs()) || err <= 1e-8);
            }
        }

        #[test]
        fn argmax_ignores_temperature(z in prop::collection::vec(-10.0f64..10.0, 2..8), sigma in 0.05f64..20.0) {
            let scaled: Vec<f64> = z.iter().map(|v| v / sigma).collect();
            let (p, _) = softmax_scaled(&scaled, 1.0);
            let by_prob = inference_logits(&p);
            prop_assert_eq!(by_prob, inference_logits(&z));
        }

        #[test]
        fn unit_weights_give_mean_ce(losses in prop::collection::vec(0.0f64..10.0, 1..20)) {
            let model = ParamVector::zeros(mlp_manifest(1, &[], 2, Activation::Identity)).unwrap();
            let w = vec![1.0; losses.len()];
            let got = weighted_batch_loss(&losses, &w, &model, 0.0).unwrap();
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            prop_assert!((got - mean).abs() <= 1e-12 * mean.max(1.0));
        }
    }
}
