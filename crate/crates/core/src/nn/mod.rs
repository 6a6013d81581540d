//! MLP definition, quantized/full-precision inference, activation-scale
//! calibration, and the compute/memory cost model.
//!
//! Weight bits W and neuron bits N each range over {1, 2, 4, 8, 32}, where 32
//! means full precision. In quantized mode every layer input is packed to N
//! bit planes under calibration-frozen scales and every weight matrix to W
//! planes packed offline, so each matmul runs through
//! [`crate::bitkernel::gemm_quantized`]; bias add and activations stay in
//! full precision.

mod cost;
mod io;
mod train;

pub use cost::{model_cost, CostEstimate};
pub use io::{load_model, save_model, FORMAT_VERSION, MODEL_MAGIC};
pub use train::{loss_and_gradients, mse_loss, train, DataSet, Gradients, Hyper};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitkernel::{gemm_dense, gemm_quantized, DenseMatrix, KernelError};
use crate::dsp::NormStats;
use crate::quant::{quantize_matrix, quantize_residual, QuantError, QuantizedTensor};

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("quantized mode requires calibrated activation scales")]
    MissingCalibration,
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("json error")]
    Json(#[from] serde_json::Error),
    #[error("bad model file: {0}")]
    BadModelFile(String),
    #[error("corrupt file (checksum)")]
    ChecksumMismatch,
    #[error("model format version {got}, expected {expected}")]
    VersionMismatch { got: u16, expected: u16 },
}

pub const FULL_PRECISION_BITS: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

/// Architecture plus bit widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input, hidden..., output dimensions.
    pub layer_dims: Vec<usize>,
    pub output_activation: OutputActivation,
    pub weight_bits: u8,
    pub neuron_bits: u8,
    pub context_frames: usize,
    /// Whether the input features themselves are quantized, in addition to
    /// hidden-layer neurons.
    pub quantize_input: bool,
}

fn valid_bits(b: u8) -> bool {
    matches!(b, 1..=8 | 32)
}

impl ModelSpec {
    pub fn new(
        layer_dims: Vec<usize>,
        output_activation: OutputActivation,
        weight_bits: u8,
        neuron_bits: u8,
    ) -> Result<Self> {
        let spec = Self {
            layer_dims,
            output_activation,
            weight_bits,
            neuron_bits,
            context_frames: 7,
            quantize_input: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 3 {
            return Err(NnError::BadSpec(
                "need at least one hidden layer (input, hidden, output)".into(),
            ));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(NnError::BadSpec("zero layer dimension".into()));
        }
        if !valid_bits(self.weight_bits) || !valid_bits(self.neuron_bits) {
            return Err(NnError::BadSpec(format!(
                "bit widths must be 1..=8 or 32, got W={} N={}",
                self.weight_bits, self.neuron_bits
            )));
        }
        if self.context_frames == 0 || self.context_frames % 2 == 0 {
            return Err(NnError::BadSpec(format!(
                "context_frames must be odd, got {}",
                self.context_frames
            )));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn quantizes_weights(&self) -> bool {
        self.weight_bits < FULL_PRECISION_BITS
    }

    pub fn quantizes_activations(&self) -> bool {
        self.neuron_bits < FULL_PRECISION_BITS
    }

    /// Whether the input of layer `l` is a quantized activation site.
    pub fn quantizes_site(&self, l: usize) -> bool {
        self.quantizes_activations() && (l > 0 || self.quantize_input)
    }
}

/// Per-epoch training/validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train: f64,
    pub valid: f64,
}

/// Training provenance and the pipeline statistics needed at inference time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub task: Option<String>,
    pub epochs: usize,
    pub seed: u64,
    pub loss_history: Vec<EpochLoss>,
    pub best_epoch: Option<usize>,
    pub feature_stats: Option<NormStats>,
    pub target_stats: Option<NormStats>,
}

/// An MLP with full-precision master parameters and, once calibrated, frozen
/// activation scales plus pre-packed weight planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
    /// Frozen residual-mean scales per layer-input site (empty vector for
    /// sites that are not quantized). `None` until calibration.
    pub activation_scales: Option<Vec<Vec<f64>>>,
    /// Offline-packed weight planes, built at calibration time when W < 32.
    pub packed_weights: Option<Vec<QuantizedTensor>>,
    pub meta: TrainMeta,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 1e-300 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Model {
    /// He-initialized model, deterministic per seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.layer_count() {
            let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            weights.push(DenseMatrix::from_fn(fan_out, fan_in, |_, _| std * gaussian(&mut rng)));
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            spec,
            weights,
            biases,
            activation_scales: None,
            packed_weights: None,
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
        })
    }

    pub fn is_calibrated(&self) -> bool {
        self.activation_scales.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Full,
    Quantized,
}

/// Outputs plus the full-precision input of every layer (the activation
/// sites used for calibration).
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub outputs: DenseMatrix,
    pub layer_inputs: Vec<DenseMatrix>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn apply_hidden(mut z: DenseMatrix) -> DenseMatrix {
    for v in z.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    z
}

fn apply_output(mut z: DenseMatrix, act: OutputActivation) -> DenseMatrix {
    if act == OutputActivation::Sigmoid {
        for v in z.data_mut() {
            *v = sigmoid(*v);
        }
    }
    z
}

fn add_bias(z: &mut DenseMatrix, bias: &[f64]) {
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Runs a feature batch (one row per frame) through the model.
///
/// `Quantized` mode uses frozen activation scales and pre-packed weights
/// (requires calibration unless both bit widths are 32, in which case it is
/// bitwise identical to `Full`).
pub fn forward(model: &Model, features: &DenseMatrix, mode: ForwardMode) -> Result<ForwardPass> {
    let spec = &model.spec;
    if features.cols() != spec.input_dim() {
        return Err(NnError::DimMismatch {
            expected: spec.input_dim(),
            got: features.cols(),
        });
    }
    let quantized = mode == ForwardMode::Quantized;
    if quantized
        && (spec.quantizes_activations() && !model.is_calibrated()
            || spec.quantizes_weights() && model.packed_weights.is_none())
    {
        return Err(NnError::MissingCalibration);
    }
    let mut layer_inputs = Vec::with_capacity(spec.layer_count());
    let mut a = features.clone();
    for l in 0..spec.layer_count() {
        layer_inputs.push(a.clone());
        let quant_acts = quantized && spec.quantizes_site(l);
        let quant_weights = quantized && spec.quantizes_weights();
        let mut z = match (quant_acts, quant_weights) {
            (true, true) => {
                let scales = &model.activation_scales.as_ref().unwrap()[l];
                let xq = QuantizedTensor::from_matrix_with_scales(&a, scales)?;
                gemm_quantized(&xq, &model.packed_weights.as_ref().unwrap()[l])?
            }
            (true, false) => {
                let scales = &model.activation_scales.as_ref().unwrap()[l];
                let xq = QuantizedTensor::from_matrix_with_scales(&a, scales)?;
                gemm_dense(&xq.dequantize(), &model.weights[l].transposed())?
            }
            (false, true) => {
                let wq = &model.packed_weights.as_ref().unwrap()[l];
                gemm_dense(&a, &wq.dequantize().transposed())?
            }
            (false, false) => gemm_dense(&a, &model.weights[l].transposed())?,
        };
        add_bias(&mut z, &model.biases[l]);
        a = if l + 1 == spec.layer_count() {
            apply_output(z, spec.output_activation)
        } else {
            apply_hidden(z)
        };
    }
    Ok(ForwardPass {
        outputs: a,
        layer_inputs,
    })
}

/// Freezes activation scales from a full-precision forward pass over the
/// calibration batch, and packs the weight planes for inference.
///
/// At each quantized site the residual-mean scales are computed over the
/// pooled activations of the whole calibration set.
pub fn calibrate_activations(model: &mut Model, calibration: &DenseMatrix) -> Result<()> {
    if calibration.rows() == 0 {
        return Err(NnError::EmptyCalibration);
    }
    let pass = forward(model, calibration, ForwardMode::Full)?;
    let mut scales = Vec::with_capacity(model.spec.layer_count());
    for (l, site) in pass.layer_inputs.iter().enumerate() {
        if model.spec.quantizes_site(l) {
            let q = quantize_residual(site.data(), model.spec.neuron_bits as usize)?;
            scales.push(q.scales);
        } else {
            scales.push(Vec::new());
        }
    }
    model.activation_scales = Some(scales);
    if model.spec.quantizes_weights() {
        let packed = model
            .weights
            .iter()
            .map(|w| quantize_matrix(w, model.spec.weight_bits as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        model.packed_weights = Some(packed);
    } else {
        model.packed_weights = None;
    }
    Ok(())
}
