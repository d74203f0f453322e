//! Dense feedforward network over a flat parameter vector.
//!
//! Parameters are stored layer by layer: the row-major `out_dim x in_dim`
//! weight matrix followed by the `out_dim` bias. Per-sample gradients come
//! from a single batched backward pass: output deltas are propagated as a
//! `B x width` matrix and each row's gradient is the outer product of its
//! delta with the cached layer input.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_params::DataParamState;
use crate::error::{Error, Result};
use crate::losses::{self, LossSelector};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix holding the given rows, in order. Repeats are allowed.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    /// ReLU at exactly 0 has derivative 0.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Builds the manifest of an MLP: `input -> hidden.. -> output`, hidden
/// layers using `activation`, logits layer using identity.
pub fn mlp_manifest(
    input: usize,
    hidden: &[usize],
    output: usize,
    activation: Activation,
) -> Vec<LayerSpec> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(input);
    widths.extend_from_slice(hidden);
    widths.push(output);
    let last = widths.len() - 2;
    widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let act = if l == last {
                Activation::Identity
            } else {
                activation
            };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

pub fn validate_manifest(manifest: &[LayerSpec]) -> Result<()> {
    let last = manifest
        .last()
        .ok_or_else(|| Error::Manifest("no layers".into()))?;
    for (l, spec) in manifest.iter().enumerate() {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(Error::Manifest(format!("layer {l} has a zero dimension")));
        }
    }
    for (l, pair) in manifest.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Shape {
                layer: l + 1,
                expected: pair[0].out_dim,
                got: pair[1].in_dim,
            });
        }
    }
    if last.activation != Activation::Identity {
        return Err(Error::Manifest("last layer must emit raw logits".into()));
    }
    Ok(())
}

pub fn manifest_param_count(manifest: &[LayerSpec]) -> usize {
    manifest.iter().map(LayerSpec::param_count).sum()
}

/// Flattened model parameters together with their layer manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    manifest: Vec<LayerSpec>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(manifest: Vec<LayerSpec>, values: Vec<f64>) -> Result<Self> {
        validate_manifest(&manifest)?;
        let expected = manifest_param_count(&manifest);
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("parameter {i} is not finite")));
        }
        Ok(Self { manifest, values })
    }

    pub fn zeros(manifest: Vec<LayerSpec>) -> Result<Self> {
        let n = manifest_param_count(&manifest);
        Self::new(manifest, vec![0.0; n])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(manifest: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_manifest(&manifest)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(manifest_param_count(&manifest));
        for spec in &manifest {
            let bound = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            for _ in 0..spec.out_dim * spec.in_dim {
                values.push(rng.gen_range(-bound..=bound));
            }
            values.extend(std::iter::repeat(0.0).take(spec.out_dim));
        }
        Self::new(manifest, values)
    }

    /// Same manifest, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.manifest.clone(), values)
    }

    pub fn manifest(&self) -> &[LayerSpec] {
        &self.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers. Callers keep values finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.manifest[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.manifest[self.manifest.len() - 1].out_dim
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.manifest.len());
        let mut at = 0;
        for spec in &self.manifest {
            offsets.push(at);
            at += spec.param_count();
        }
        offsets
    }

    pub fn layer(&self, l: usize) -> LayerView<'_> {
        let offset: usize = self.manifest[..l].iter().map(LayerSpec::param_count).sum();
        let spec = self.manifest[l];
        let w_len = spec.out_dim * spec.in_dim;
        LayerView {
            spec,
            weights: &self.values[offset..offset + w_len],
            bias: &self.values[offset + w_len..offset + spec.param_count()],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerView<'a> {
    pub spec: LayerSpec,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

/// Owned per-layer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn flatten(layers: &[LayerParams]) -> Result<ParamVector> {
    let manifest: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
    let mut values = Vec::with_capacity(manifest_param_count(&manifest));
    for (i, layer) in layers.iter().enumerate() {
        let spec = layer.spec;
        if layer.weights.len() != spec.out_dim * spec.in_dim {
            return Err(Error::Shape {
                layer: i,
                expected: spec.out_dim * spec.in_dim,
                got: layer.weights.len(),
            });
        }
        if layer.bias.len() != spec.out_dim {
            return Err(Error::Shape {
                layer: i,
                expected: spec.out_dim,
                got: layer.bias.len(),
            });
        }
        values.extend_from_slice(&layer.weights);
        values.extend_from_slice(&layer.bias);
    }
    ParamVector::new(manifest, values)
}

pub fn unflatten(model: &ParamVector) -> Vec<LayerParams> {
    (0..model.manifest.len())
        .map(|l| {
            let v = model.layer(l);
            LayerParams {
                spec: v.spec,
                weights: v.weights.to_vec(),
                bias: v.bias.to_vec(),
            }
        })
        .collect()
}

/// Activations cached by the forward pass.
pub(crate) struct ForwardCache {
    /// `inputs[l]` is the matrix entering layer `l`; `inputs[0]` is the batch.
    inputs: Vec<Matrix>,
    /// Pre-activations of each layer.
    pre: Vec<Matrix>,
    logits: Matrix,
}

fn check_input(model: &ParamVector, features: &Matrix) -> Result<()> {
    if features.cols() != model.input_dim() {
        return Err(Error::Shape {
            layer: 0,
            expected: model.input_dim(),
            got: features.cols(),
        });
    }
    Ok(())
}

pub(crate) fn forward_cached(model: &ParamVector, features: &Matrix) -> Result<ForwardCache> {
    check_input(model, features)?;
    let n_layers = model.manifest.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut current = features.clone();
    for l in 0..n_layers {
        let layer = model.layer(l);
        let spec = layer.spec;
        let mut z = Matrix::zeros(current.rows(), spec.out_dim);
        for b in 0..current.rows() {
            let a = current.row(b);
            let out = z.row_mut(b);
            for (o, slot) in out.iter_mut().enumerate() {
                let w = &layer.weights[o * spec.in_dim..(o + 1) * spec.in_dim];
                *slot = layer.bias[o] + w.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>();
            }
        }
        let mut post = z.clone();
        if spec.activation != Activation::Identity {
            post.data
                .iter_mut()
                .for_each(|x| *x = spec.activation.apply(*x));
        }
        inputs.push(current);
        pre.push(z);
        current = post;
    }
    Ok(ForwardCache {
        inputs,
        pre,
        logits: current,
    })
}

/// Logits for each row of `features`.
pub fn forward(model: &ParamVector, features: &Matrix) -> Result<Matrix> {
    Ok(forward_cached(model, features)?.logits)
}

/// A mini-batch drawn from a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    /// Batch whose rows are distinct dataset instances.
    pub fn new(features: Matrix, labels: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        let batch = Self::with_repeats(features, labels, indices)?;
        let mut seen = HashSet::with_capacity(batch.indices.len());
        for &i in &batch.indices {
            if !seen.insert(i) {
                return Err(Error::Contract(format!(
                    "instance {i} appears twice in the batch"
                )));
            }
        }
        Ok(batch)
    }

    /// Batch that may repeat instances, as produced by sampling with
    /// replacement. Only valid where no per-instance state is touched.
    pub fn with_repeats(features: Matrix, labels: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if labels.len() != features.rows() {
            return Err(Error::LengthMismatch {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if indices.len() != features.rows() {
            return Err(Error::LengthMismatch {
                expected: features.rows(),
                got: indices.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `B x P` matrix of per-sample parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleGrads {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PerSampleGrads {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = Matrix::from_rows(rows)?;
        Ok(Self {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `sum_i weights[i] * row_i`.
    pub fn weighted_sum(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &w) in self.iter_rows().zip(weights) {
            for (o, g) in out.iter_mut().zip(row) {
                *o += w * g;
            }
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = self.weighted_sum(&vec![1.0; self.rows]);
        let n = self.rows as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Result of a per-sample backward pass.
#[derive(Clone, Debug)]
pub struct SampleGradients {
    pub losses: Vec<f64>,
    pub grads: PerSampleGrads,
    pub logits: Matrix,
    /// `dL_i / d sigma_eff(i)`; present for the temperature loss only.
    pub dsigma: Option<Vec<f64>>,
    /// Rows whose effective temperature was clamped to the lower bound.
    pub clamped: Vec<usize>,
}

/// Per-sample losses and exact parameter gradients.
pub fn per_sample_backward(
    model: &ParamVector,
    batch: &Batch,
    loss: LossSelector,
    dps: &DataParamState,
) -> Result<SampleGradients> {
    let cache = forward_cached(model, &batch.features)?;
    let b_len = batch.len();
    let k = model.output_dim();

    let mut losses_out = Vec::with_capacity(b_len);
    let mut delta = Matrix::zeros(b_len, k);
    let mut dsigma = matches!(loss, LossSelector::Temperature(_)).then(|| Vec::with_capacity(b_len));
    let mut clamped = Vec::new();
    for b in 0..b_len {
        let z = cache.logits.row(b);
        let eval = losses::evaluate(loss, z, batch.labels[b], batch.indices[b], dps)?;
        if !eval.loss.is_finite() || eval.dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { sample: b });
        }
        losses_out.push(eval.loss);
        delta.row_mut(b).copy_from_slice(&eval.dz);
        if let Some(ds) = dsigma.as_mut() {
            ds.push(eval.dsigma.unwrap_or(0.0));
        }
        if eval.clamped {
            clamped.push(b);
        }
    }

    let p = model.len();
    let offsets = model.layer_offsets();
    let mut grads = vec![0.0; b_len * p];
    for l in (0..model.manifest.len()).rev() {
        let layer = model.layer(l);
        let spec = layer.spec;
        let input = &cache.inputs[l];
        let w_len = spec.out_dim * spec.in_dim;
        for b in 0..b_len {
            let d = delta.row(b);
            let a = input.row(b);
            let row = &mut grads[b * p + offsets[l]..b * p + offsets[l] + spec.param_count()];
            let (gw, gb) = row.split_at_mut(w_len);
            for (o, &d_o) in d.iter().enumerate() {
                let out = &mut gw[o * spec.in_dim..(o + 1) * spec.in_dim];
                for (g, &ai) in out.iter_mut().zip(a) {
                    *g = d_o * ai;
                }
            }
            gb.copy_from_slice(d);
        }
        if l == 0 {
            break;
        }
        let below = model.manifest[l - 1].activation;
        let mut next = Matrix::zeros(b_len, spec.in_dim);
        for b in 0..b_len {
            let d = delta.row(b);
            let pre = cache.pre[l - 1].row(b);
            let post = input.row(b);
            let out = next.row_mut(b);
            for (o, &d_o) in d.iter().enumerate() {
                let w = &layer.weights[o * spec.in_dim..(o + 1) * spec.in_dim];
                for (acc, wi) in out.iter_mut().zip(w) {
                    *acc += wi * d_o;
                }
            }
            for i in 0..spec.in_dim {
                out[i] *= below.derivative(pre[i], post[i]);
            }
        }
        delta = next;
    }

    for (b, row) in grads.chunks_exact(p).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { sample: b });
        }
    }

    Ok(SampleGradients {
        losses: losses_out,
        grads: PerSampleGrads {
            rows: b_len,
            cols: p,
            data: grads,
        },
        logits: cache.logits,
        dsigma,
        clamped,
    })
}

/// Mean plain cross-entropy over `(features, labels)` and its gradient.
pub fn mean_loss_and_grad(
    model: &ParamVector,
    features: &Matrix,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let indices: Vec<usize> = (0..labels.len()).collect();
    let batch = Batch::with_repeats(features.clone(), labels.to_vec(), indices)?;
    let out = per_sample_backward(model, &batch, LossSelector::PlainCe, &DataParamState::empty())?;
    let loss = out.losses.iter().sum::<f64>() / out.losses.len() as f64;
    Ok((loss, out.grads.mean()))
}

/// Mean plain cross-entropy without gradients.
pub fn mean_loss(model: &ParamVector, features: &Matrix, labels: &[usize]) -> Result<f64> {
    let logits = forward(model, features)?;
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        total += losses::ce_loss(logits.row(b), y)?.0;
    }
    Ok(total / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(seed: u64) -> ParamVector {
        ParamVector::init(mlp_manifest(3, &[5, 4], 3, Activation::Tanh), seed).unwrap()
    }

    fn toy_batch() -> Batch {
        let feats = Matrix::from_rows(&[
            vec![0.5, -1.0, 2.0],
            vec![0.1, 0.2, 0.3],
            vec![-1.5, 0.7, 0.0],
            vec![0.5, -1.0, 2.0],
        ])
        .unwrap();
        Batch::new(feats, vec![0, 2, 1, 0], vec![10, 11, 12, 13]).unwrap()
    }

    /// Single-sample forward + backward, no batching.
    fn naive_sample_grad(model: &ParamVector, x: &[f64], y: usize) -> Vec<f64> {
        let layers = unflatten(model);
        let mut acts = vec![x.to_vec()];
        let mut pres = Vec::new();
        for layer in &layers {
            let a = acts.last().unwrap();
            let z: Vec<f64> = (0..layer.spec.out_dim)
                .map(|o| {
                    layer.bias[o]
                        + (0..layer.spec.in_dim)
                            .map(|i| layer.weights[o * layer.spec.in_dim + i] * a[i])
                            .sum::<f64>()
                })
                .collect();
            let post: Vec<f64> = z.iter().map(|&v| layer.spec.activation.apply(v)).collect();
            pres.push(z);
            acts.push(post);
        }
        let (_, mut delta) = losses::ce_loss(acts.last().unwrap(), y).unwrap();
        let mut per_layer = vec![Vec::new(); layers.len()];
        for l in (0..layers.len()).rev() {
            let spec = layers[l].spec;
            let mut g = Vec::with_capacity(spec.param_count());
            for o in 0..spec.out_dim {
                for i in 0..spec.in_dim {
                    g.push(delta[o] * acts[l][i]);
                }
            }
            g.extend_from_slice(&delta);
            per_layer[l] = g;
            if l > 0 {
                let below = layers[l - 1].spec.activation;
                delta = (0..spec.in_dim)
                    .map(|i| {
                        let s: f64 = (0..spec.out_dim)
                            .map(|o| layers[l].weights[o * spec.in_dim + i] * delta[o])
                            .sum();
                        s * below.derivative(pres[l - 1][i], acts[l][i])
                    })
                    .collect();
            }
        }
        per_layer.concat()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layers = [LayerParams {
            spec: LayerSpec::new(2, 2, Activation::Identity),
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        }];
        let model = flatten(&layers).unwrap();
        let out = forward(&model, &Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let model = ParamVector::zeros(mlp_manifest(4, &[6], 3, Activation::Relu)).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0, 0.5], vec![9.0, 9.0, 9.0, 9.0]]).unwrap();
        let out = forward(&model, &x).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_forward_matches_straight_line_evaluation() {
        let model =
            ParamVector::init(mlp_manifest(3, &[4], 2, Activation::Relu), 7).unwrap();
        let x = [1.0, 1.0, 1.0];
        let v = model.values();
        // layer 0: 4x3 weights at 0..12, bias 12..16; layer 1: 2x4 at 16..24, bias 24..26
        let mut h = [0.0; 4];
        for o in 0..4 {
            let z = v[12 + o] + v[o * 3] * x[0] + v[o * 3 + 1] * x[1] + v[o * 3 + 2] * x[2];
            h[o] = if z > 0.0 { z } else { 0.0 };
        }
        let mut expect = [0.0; 2];
        for o in 0..2 {
            expect[o] = v[24 + o]
                + v[16 + o * 4] * h[0]
                + v[16 + o * 4 + 1] * h[1]
                + v[16 + o * 4 + 2] * h[2]
                + v[16 + o * 4 + 3] * h[3];
        }
        let out = forward(&model, &Matrix::from_rows(&[x.to_vec()]).unwrap()).unwrap();
        for o in 0..2 {
            let rel = (out.row(0)[o] - expect[o]).abs() / expect[o].abs().max(1e-300);
            assert!(rel <= 1e-12, "logit {o}: {} vs {}", out.row(0)[o], expect[o]);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = toy_model(1);
        let err = forward(&model, &Matrix::zeros(2, 4)).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 0, expected: 3, got: 4 }));
    }

    #[test]
    fn manifest_rejects_mismatched_layers() {
        let m = vec![
            LayerSpec::new(3, 4, Activation::Relu),
            LayerSpec::new(5, 2, Activation::Identity),
        ];
        assert!(matches!(
            ParamVector::zeros(m),
            Err(Error::Shape { layer: 1, expected: 4, got: 5 })
        ));
        let m = vec![LayerSpec::new(3, 2, Activation::Relu)];
        assert!(matches!(ParamVector::zeros(m), Err(Error::Manifest(_))));
    }

    #[test]
    fn flatten_round_trip_and_length() {
        let model = toy_model(3);
        let manifest = model.manifest().to_vec();
        assert_eq!(model.len(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 3 + 3);
        assert_eq!(model.len(), manifest_param_count(&manifest));
        assert_eq!(flatten(&unflatten(&model)).unwrap(), model);

        let mut short = model.values().to_vec();
        short.pop();
        assert!(matches!(
            ParamVector::new(manifest, short),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn batched_gradients_match_naive_per_sample_loop() {
        let model = toy_model(5);
        let batch = toy_batch();
        let out = per_sample_backward(&model, &batch, LossSelector::PlainCe, &DataParamState::empty())
            .unwrap();
        for b in 0..batch.len() {
            let naive = naive_sample_grad(&model, batch.features.row(b), batch.labels[b]);
            for (a, n) in out.grads.row(b).iter().zip(&naive) {
                assert!((a - n).abs() <= 1e-14 * (1.0 + n.abs()));
            }
        }
    }

    #[test]
    fn duplicated_sample_gives_identical_rows() {
        let model = toy_model(9);
        let out = per_sample_backward(&model, &toy_batch(), LossSelector::PlainCe, &DataParamState::empty())
            .unwrap();
        assert_eq!(out.grads.row(0), out.grads.row(3));
        assert_eq!(out.losses[0], out.losses[3]);
    }

    #[test]
    fn single_sample_batch_equals_full_batch_gradient() {
        let model = toy_model(2);
        let x = Matrix::from_rows(&[vec![0.3, 0.1, -0.7]]).unwrap();
        let out = per_sample_backward(
            &model,
            &Batch::new(x.clone(), vec![1], vec![0]).unwrap(),
            LossSelector::PlainCe,
            &DataParamState::empty(),
        )
        .unwrap();
        let (_, full) = mean_loss_and_grad(&model, &x, &[1]).unwrap();
        assert_eq!(out.grads.row(0), full.as_slice());
    }

    #[test]
    fn batch_rejects_duplicate_indices() {
        let x = Matrix::zeros(2, 3);
        assert!(Batch::new(x.clone(), vec![0, 1], vec![4, 4]).is_err());
        assert!(Batch::with_repeats(x, vec![0, 1], vec![4, 4]).is_ok());
    }

    #[test]
    fn overflow_reports_sample_index() {
        let manifest = mlp_manifest(3, &[], 2, Activation::Identity);
        let model = ParamVector::new(manifest, vec![1e300; 8]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![1e10, 1e10, 1e10]]).unwrap();
        let batch = Batch::new(x, vec![0, 1], vec![0, 1]).unwrap();
        let err = per_sample_backward(&model, &batch, LossSelector::PlainCe, &DataParamState::empty())
            .unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { sample: 1 }), "{err}");
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
        assert_eq!(Activation::Relu.apply(0.0), 0.0);
    }
}
