//! Mini-batch SGD with momentum on squared error, with quantization-aware
//! forward passes and straight-through gradients.
//!
//! Quantizers apply in the forward direction only (weights and activations
//! are replaced by their dequantized bit-plane approximations, with dynamic
//! per-batch scales); the backward pass treats them as identity and updates
//! the full-precision master weights. Masters are clipped to [-1, 1] after
//! each step when weight quantization is active, which keeps the 1-bit scale
//! from drifting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochLoss, ForwardMode, Model, NnError, OutputActivation, Result};
use crate::bitkernel::{gemm_dense, DenseMatrix};
use crate::quant::sign_plus;

/// Optimizer settings. Defaults: lr 0.01, momentum 0.9, batch 256.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch: 256,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Feature rows with aligned target rows.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub features: DenseMatrix,
    pub targets: DenseMatrix,
}

impl DataSet {
    pub fn new(features: DenseMatrix, targets: DenseMatrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(NnError::EmptyDataset);
        }
        if features.rows() != targets.rows() {
            return Err(NnError::BadSpec(format!(
                "{} feature rows vs {} target rows",
                features.rows(),
                targets.rows()
            )));
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weight/bias gradients in layer order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Mean squared error over every output of every row.
pub fn mse_loss(outputs: &DenseMatrix, targets: &DenseMatrix) -> f64 {
    let n = (outputs.rows() * outputs.cols()) as f64;
    outputs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(y, t)| (y - t) * (y - t))
        .sum::<f64>()
        / n
}

/// Bit-plane round trip with dynamic scales, used as the fake quantizer
/// inside the training forward pass.
fn fake_quantize(values: &[f64], bits: usize) -> Vec<f64> {
    let n = values.len() as f64;
    let mut residual = values.to_vec();
    let mut approx = vec![0.0; values.len()];
    for _ in 0..bits {
        let alpha = residual.iter().map(|r| r.abs()).sum::<f64>() / n;
        for (r, a) in residual.iter_mut().zip(approx.iter_mut()) {
            let s = sign_plus(*r) as f64;
            *a += alpha * s;
            *r -= alpha * s;
        }
    }
    approx
}

fn fake_quantize_matrix(m: &DenseMatrix, bits: usize) -> DenseMatrix {
    let data = fake_quantize(m.data(), bits);
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    out.data_mut().copy_from_slice(&data);
    out
}

struct BatchPass {
    loss: f64,
    /// Quantized (or raw) inputs actually fed to each layer.
    site_inputs: Vec<DenseMatrix>,
    /// Quantized (or raw) weights used by each layer.
    used_weights: Vec<DenseMatrix>,
    /// Pre-activation values per layer.
    pre_acts: Vec<DenseMatrix>,
    outputs: DenseMatrix,
}

fn qat_forward(model: &Model, x: &DenseMatrix, targets: &DenseMatrix) -> Result<BatchPass> {
    let spec = &model.spec;
    let layers = spec.layer_count();
    let mut site_inputs = Vec::with_capacity(layers);
    let mut used_weights = Vec::with_capacity(layers);
    let mut pre_acts = Vec::with_capacity(layers);
    let mut a = x.clone();
    for l in 0..layers {
        let a_used = if spec.quantizes_site(l) {
            fake_quantize_matrix(&a, spec.neuron_bits as usize)
        } else {
            a
        };
        let w_used = if spec.quantizes_weights() {
            fake_quantize_matrix(&model.weights[l], spec.weight_bits as usize)
        } else {
            model.weights[l].clone()
        };
        let mut z = gemm_dense(&a_used, &w_used.transposed())?;
        super::add_bias(&mut z, &model.biases[l]);
        a = if l + 1 == layers {
            super::apply_output(z.clone(), spec.output_activation)
        } else {
            super::apply_hidden(z.clone())
        };
        site_inputs.push(a_used);
        used_weights.push(w_used);
        pre_acts.push(z);
    }
    let loss = mse_loss(&a, targets);
    Ok(BatchPass {
        loss,
        site_inputs,
        used_weights,
        pre_acts,
        outputs: a,
    })
}

fn backward(model: &Model, pass: &BatchPass, targets: &DenseMatrix) -> Result<Gradients> {
    let spec = &model.spec;
    let layers = spec.layer_count();
    let m = pass.outputs.rows();
    let out_dim = pass.outputs.cols();
    let scale = 2.0 / (m * out_dim) as f64;

    // d(loss)/d(pre-activation) of the output layer
    let mut dz = DenseMatrix::zeros(m, out_dim);
    for i in 0..m {
        for j in 0..out_dim {
            let y = pass.outputs.get(i, j);
            let t = targets.get(i, j);
            let dy = scale * (y - t);
            let v = match spec.output_activation {
                OutputActivation::Sigmoid => dy * y * (1.0 - y),
                OutputActivation::Identity => dy,
            };
            dz.set(i, j, v);
        }
    }

    let mut grad_w: Vec<DenseMatrix> = Vec::with_capacity(layers);
    let mut grad_b: Vec<Vec<f64>> = Vec::with_capacity(layers);
    for l in (0..layers).rev() {
        let gw = gemm_dense(&dz.transposed(), &pass.site_inputs[l])?;
        let mut gb = vec![0.0; dz.cols()];
        for i in 0..dz.rows() {
            for (b, &v) in gb.iter_mut().zip(dz.row(i)) {
                *b += v;
            }
        }
        grad_w.push(gw);
        grad_b.push(gb);
        if l > 0 {
            // straight-through: the activation quantizer backpropagates as
            // identity, so d(site input) flows directly into the ReLU grad
            let da = gemm_dense(&dz, &pass.used_weights[l])?;
            let mut next = DenseMatrix::zeros(da.rows(), da.cols());
            for i in 0..da.rows() {
                for j in 0..da.cols() {
                    let relu_grad = if pass.pre_acts[l - 1].get(i, j) > 0.0 { 1.0 } else { 0.0 };
                    next.set(i, j, da.get(i, j) * relu_grad);
                }
            }
            dz = next;
        }
    }
    grad_w.reverse();
    grad_b.reverse();
    Ok(Gradients {
        weights: grad_w,
        biases: grad_b,
    })
}

/// Loss and parameter gradients for one batch under the model's QAT forward
/// semantics (full-precision when both bit widths are 32).
pub fn loss_and_gradients(
    model: &Model,
    features: &DenseMatrix,
    targets: &DenseMatrix,
) -> Result<(f64, Gradients)> {
    let pass = qat_forward(model, features, targets)?;
    let grads = backward(model, &pass, targets)?;
    Ok((pass.loss, grads))
}

fn gather_rows(src: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(idx.len(), src.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(src.row(i));
    }
    out
}

/// Trains in place. Deterministic per `hyper.seed`; the weights with the best
/// validation loss are retained and the loss curve lands in `model.meta`.
pub fn train(model: &mut Model, train: &DataSet, valid: &DataSet, hyper: &Hyper) -> Result<()> {
    if train.is_empty() || valid.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if hyper.batch == 0 {
        return Err(NnError::BadHyper("batch size 0".into()));
    }
    if hyper.epochs == 0 {
        return Err(NnError::BadHyper("0 epochs".into()));
    }
    if !(hyper.lr.is_finite() && hyper.lr > 0.0) {
        return Err(NnError::BadHyper(format!("lr {}", hyper.lr)));
    }
    let spec = model.spec.clone();
    for set in [train, valid] {
        if set.features.cols() != spec.input_dim() {
            return Err(NnError::DimMismatch {
                expected: spec.input_dim(),
                got: set.features.cols(),
            });
        }
        if set.targets.cols() != spec.output_dim() {
            return Err(NnError::DimMismatch {
                expected: spec.output_dim(),
                got: set.targets.cols(),
            });
        }
    }
    if spec.output_activation == OutputActivation::Sigmoid {
        if let Some(bad) = train.targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(NnError::BadSpec(format!(
                "sigmoid output needs targets in [0,1], found {bad}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut vel_w: Vec<DenseMatrix> = model
        .weights
        .iter()
        .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut vel_b: Vec<Vec<f64>> = model.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let clip = spec.quantizes_weights();

    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<(Vec<DenseMatrix>, Vec<Vec<f64>>)> = None;
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut perm: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..hyper.epochs {
        perm.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_index, chunk) in perm.chunks(hyper.batch).enumerate() {
            let x = gather_rows(&train.features, chunk);
            let t = gather_rows(&train.targets, chunk);
            let (loss, grads) = loss_and_gradients(model, &x, &t)?;
            if !loss.is_finite() {
                return Err(NnError::NanLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            for l in 0..spec.layer_count() {
                let vw = vel_w[l].data_mut();
                for (v, &g) in vw.iter_mut().zip(grads.weights[l].data()) {
                    *v = hyper.momentum * *v + g;
                }
                let wm = model.weights[l].data_mut();
                for (w, &v) in wm.iter_mut().zip(vel_w[l].data()) {
                    *w -= hyper.lr * v;
                    if clip {
                        *w = w.clamp(-1.0, 1.0);
                    }
                }
                for (v, &g) in vel_b[l].iter_mut().zip(&grads.biases[l]) {
                    *v = hyper.momentum * *v + g;
                }
                for (b, &v) in model.biases[l].iter_mut().zip(&vel_b[l]) {
                    *b -= hyper.lr * v;
                }
            }
        }
        let train_loss = epoch_loss / train.len() as f64;
        let valid_loss = qat_forward(model, &valid.features, &valid.targets)?.loss;
        if !valid_loss.is_finite() {
            return Err(NnError::NanLoss { epoch, batch: usize::MAX });
        }
        history.push(EpochLoss {
            train: train_loss,
            valid: valid_loss,
        });
        if valid_loss < best_valid {
            best_valid = valid_loss;
            best_epoch = epoch;
            best_params = Some((model.weights.clone(), model.biases.clone()));
        }
    }
    if let Some((w, b)) = best_params {
        model.weights = w;
        model.biases = b;
    }
    model.meta.epochs = hyper.epochs;
    model.meta.seed = hyper.seed;
    model.meta.loss_history = history;
    model.meta.best_epoch = Some(best_epoch);
    // training touches the masters only; stale packed planes must not linger
    model.activation_scales = None;
    model.packed_weights = None;
    Ok(())
}

/// Loss of the QAT forward pass on a dataset (no parameter updates).
pub fn qat_loss(model: &Model, set: &DataSet) -> Result<f64> {
    Ok(qat_forward(model, &set.features, &set.targets)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{calibrate_activations, ModelSpec};
    use rand::rngs::StdRng;
    use rand::Rng as _;

    fn xor_dataset(n: usize, seed: u64) -> DataSet {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut x = DenseMatrix::zeros(n, 2);
        let mut t = DenseMatrix::zeros(n, 1);
        for i in 0..n {
            let a = rng.gen::<bool>();
            let b = rng.gen::<bool>();
            x.set(i, 0, if a { 1.0 } else { -1.0 } + rng.gen_range(-0.1..0.1));
            x.set(i, 1, if b { 1.0 } else { -1.0 } + rng.gen_range(-0.1..0.1));
            t.set(i, 0, if a ^ b { 1.0 } else { 0.0 });
        }
        DataSet::new(x, t).unwrap()
    }

    #[test]
    fn full_precision_trainer_solves_xor_toy() {
        let spec = ModelSpec::new(vec![2, 8, 8, 1], OutputActivation::Sigmoid, 32, 32).unwrap();
        let mut model = Model::init(spec, 1).unwrap();
        let train_set = xor_dataset(256, 2);
        let valid_set = xor_dataset(64, 3);
        let hyper = Hyper {
            lr: 0.2,
            momentum: 0.9,
            batch: 32,
            epochs: 500,
            seed: 4,
        };
        train(&mut model, &train_set, &valid_set, &hyper).unwrap();
        let final_loss = model.meta.loss_history.last().unwrap().train;
        assert!(final_loss < 0.05, "final training loss {final_loss}");
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let spec = ModelSpec::new(vec![5, 7, 6, 3], OutputActivation::Sigmoid, 32, 32).unwrap();
        let model = Model::init(spec, 9).unwrap();
        let mut rng = StdRng::seed_from_u64(10);
        let x = DenseMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let t = DenseMatrix::from_fn(5, 3, |_, _| rng.gen_range(0.1..0.9));
        let (_, grads) = loss_and_gradients(&model, &x, &t).unwrap();
        let eps = 1e-4;
        for l in 0..model.spec.layer_count() {
            for i in 0..model.weights[l].rows() {
                for j in 0..model.weights[l].cols() {
                    let mut plus = model.clone();
                    plus.weights[l].set(i, j, plus.weights[l].get(i, j) + eps);
                    let mut minus = model.clone();
                    minus.weights[l].set(i, j, minus.weights[l].get(i, j) - eps);
                    let lp = loss_and_gradients(&plus, &x, &t).unwrap().0;
                    let lm = loss_and_gradients(&minus, &x, &t).unwrap().0;
                    let numeric = (lp - lm) / (2.0 * eps);
                    let analytic = grads.weights[l].get(i, j);
                    let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                    assert!(rel < 1e-4, "layer {l} ({i},{j}): {analytic} vs {numeric}");
                }
            }
            for j in 0..model.biases[l].len() {
                let mut plus = model.clone();
                plus.biases[l][j] += eps;
                let mut minus = model.clone();
                minus.biases[l][j] -= eps;
                let lp = loss_and_gradients(&plus, &x, &t).unwrap().0;
                let lm = loss_and_gradients(&minus, &x, &t).unwrap().0;
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads.biases[l][j];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-4, "bias layer {l} [{j}]");
            }
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let spec = ModelSpec::new(vec![2, 6, 1], OutputActivation::Sigmoid, 1, 2).unwrap();
        let hyper = Hyper {
            epochs: 5,
            batch: 32,
            ..Hyper::default()
        };
        let train_set = xor_dataset(128, 20);
        let valid_set = xor_dataset(32, 21);
        let mut a = Model::init(spec.clone(), 22).unwrap();
        train(&mut a, &train_set, &valid_set, &hyper).unwrap();
        let mut b = Model::init(spec, 22).unwrap();
        train(&mut b, &train_set, &valid_set, &hyper).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.meta.loss_history, b.meta.loss_history);
    }

    #[test]
    fn degenerate_bits_train_like_plain_path() {
        // the 32/32 QAT path must skip the fake quantizers entirely
        let spec = ModelSpec::new(vec![2, 6, 1], OutputActivation::Sigmoid, 32, 32).unwrap();
        let train_set = xor_dataset(64, 30);
        let x = gather_rows(&train_set.features, &[0, 1, 2, 3]);
        let t = gather_rows(&train_set.targets, &[0, 1, 2, 3]);
        let model = Model::init(spec, 31).unwrap();
        let pass = qat_forward(&model, &x, &t).unwrap();
        let plain = crate::nn::forward(&model, &x, ForwardMode::Full).unwrap();
        assert_eq!(pass.outputs, plain.outputs);
    }

    #[test]
    fn one_step_updates_masters_not_packed_planes() {
        let spec = ModelSpec::new(vec![2, 6, 1], OutputActivation::Sigmoid, 1, 2).unwrap();
        let mut model = Model::init(spec, 40).unwrap();
        let data = xor_dataset(64, 41);
        calibrate_activations(&mut model, &data.features).unwrap();
        let packed_before = model.packed_weights.clone().unwrap();
        let masters_before = model.weights.clone();

        // a single manual SGD step using the QAT gradients
        let (_, grads) = loss_and_gradients(&model, &data.features, &data.targets).unwrap();
        for l in 0..model.spec.layer_count() {
            let wm = model.weights[l].data_mut();
            for (w, &g) in wm.iter_mut().zip(grads.weights[l].data()) {
                *w = (*w - 0.05 * g).clamp(-1.0, 1.0);
            }
        }
        assert_ne!(model.weights, masters_before);
        assert_eq!(model.packed_weights.clone().unwrap(), packed_before);

        // re-quantization reflects the update
        calibrate_activations(&mut model, &data.features).unwrap();
        assert_ne!(model.packed_weights.unwrap(), packed_before);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostic() {
        let spec = ModelSpec::new(vec![2, 6, 1], OutputActivation::Identity, 32, 32).unwrap();
        let mut model = Model::init(spec, 50).unwrap();
        let mut t = DenseMatrix::zeros(64, 1);
        for i in 0..64 {
            t.set(i, 0, 1e154);
        }
        let features = xor_dataset(64, 51).features;
        let set = DataSet::new(features.clone(), t).unwrap();
        let hyper = Hyper {
            lr: 1e30,
            epochs: 3,
            batch: 16,
            ..Hyper::default()
        };
        let err = train(&mut model, &set, &set, &hyper).unwrap_err();
        assert!(matches!(err, NnError::NanLoss { .. }), "{err}");
    }

    #[test]
    fn sigmoid_targets_must_be_in_unit_interval() {
        let spec = ModelSpec::new(vec![2, 4, 1], OutputActivation::Sigmoid, 32, 32).unwrap();
        let mut model = Model::init(spec, 60).unwrap();
        let x = DenseMatrix::from_fn(8, 2, |_, _| 0.1);
        let mut t = DenseMatrix::zeros(8, 1);
        t.set(0, 0, 1.5);
        let set = DataSet::new(x, t).unwrap();
        assert!(train(&mut model, &set.clone(), &set, &Hyper::default()).is_err());
    }
}
