//! Layer kernels, graph construction and execution for the tiny-CNN runtime.
//!
//! A [`ModelGraph`] is a linear chain of layers with explicit skip edges for
//! residual adds. Activations are identified by [`TensorId`]; id 0 is the
//! network input and each layer produces exactly one new id. The graph runs
//! in `Real32` or `Int8` mode; int8 execution accumulates in i32 and
//! requantizes through a real multiplier `s_in * s_w / s_out` with
//! round-half-to-even.

pub mod footprint;
pub mod io;
pub mod kernels;
pub mod mobilenet;
pub mod train;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{DType, QuantParams, Tensor, TensorError};

pub use mobilenet::{build_mobilenet_v2, make_divisible, BlockSpec, GraphBuilder};

/// Identifier of an activation tensor within a graph.
pub type TensorId = usize;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("int8 execution requires quantization params for tensor {0}")]
    MissingQParams(TensorId),
    #[error("int8 weights must be symmetric (zero_point 0)")]
    AsymmetricWeights,
    #[error("mixed or unsupported dtypes: {0}")]
    MixedDTypes(String),
    #[error("graph is malformed: {0}")]
    Malformed(String),
    #[error("model input must be {expected:?}, got {actual:?}")]
    BadInput {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

/// Spatial padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size = ceil(in / stride); zero padding split with the
    /// extra cell at the end.
    Same,
    /// No padding; requires input >= kernel.
    Valid,
}

impl Padding {
    pub fn name(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

/// Per-output-channel bias; i32 in int8 mode at scale `s_in * s_w`.
#[derive(Debug, Clone, PartialEq)]
pub enum Bias {
    Real(Vec<f32>),
    Int(Vec<i32>),
}

impl Bias {
    pub fn len(&self) -> usize {
        match self {
            Bias::Real(v) => v.len(),
            Bias::Int(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_size(&self) -> usize {
        self.len() * 4
    }
}

/// One graph node.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv2d {
        weights: Tensor,
        bias: Bias,
        stride: usize,
        padding: Padding,
    },
    DepthwiseConv2d {
        weights: Tensor,
        bias: Bias,
        stride: usize,
        padding: Padding,
    },
    Relu6,
    GlobalAvgPool,
    FullyConnected {
        weights: Tensor,
        bias: Bias,
    },
    Softmax,
    /// Elementwise add of the layer input and `rhs`.
    ResidualAdd {
        rhs: TensorId,
    },
}

impl LayerOp {
    pub fn name(&self) -> &'static str {
        match self {
            LayerOp::Conv2d { .. } => "conv2d",
            LayerOp::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerOp::Relu6 => "relu6",
            LayerOp::GlobalAvgPool => "global_avg_pool",
            LayerOp::FullyConnected { .. } => "fully_connected",
            LayerOp::Softmax => "softmax",
            LayerOp::ResidualAdd { .. } => "residual_add",
        }
    }

    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            LayerOp::Conv2d { weights, .. }
            | LayerOp::DepthwiseConv2d { weights, .. }
            | LayerOp::FullyConnected { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Bias> {
        match self {
            LayerOp::Conv2d { bias, .. }
            | LayerOp::DepthwiseConv2d { bias, .. }
            | LayerOp::FullyConnected { bias, .. } => Some(bias),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub op: LayerOp,
    pub input: TensorId,
    pub output: TensorId,
}

/// Ordered layer graph with per-tensor quantization metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub dtype: DType,
    /// NHWC, N = 1.
    pub input_shape: [usize; 4],
    pub num_classes: usize,
    /// Int8 mode: activation params keyed by tensor id (id 0 = input). The
    /// softmax output stays real and has no entry.
    pub activation_qparams: BTreeMap<TensorId, QuantParams>,
}

impl ModelGraph {
    /// Number of activation tensor ids (input + one per layer).
    pub fn tensor_count(&self) -> usize {
        self.layers.len() + 1
    }

    /// Tensor id holding the network output.
    pub fn output_id(&self) -> TensorId {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    /// Total weight elements (excluding biases).
    pub fn weight_elems(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.op.weights())
            .map(Tensor::len)
            .sum()
    }

    /// Total bias elements.
    pub fn bias_elems(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.op.bias())
            .map(Bias::len)
            .sum()
    }

    /// Weights plus biases; the classic parameter count.
    pub fn param_count(&self) -> usize {
        self.weight_elems() + self.bias_elems()
    }

    /// Structural sanity: ids are produced before use, outputs are unique
    /// and dense, residual adds join equal shapes.
    pub fn validate(&self) -> Result<(), NnError> {
        let n = self.tensor_count();
        let mut produced = vec![false; n];
        produced[0] = true;
        for (step, layer) in self.layers.iter().enumerate() {
            for used in layer.op.consumed_ids(layer.input) {
                if used >= n || !produced[used] {
                    return Err(NnError::Malformed(format!(
                        "layer {step} consumes tensor {used} before it is produced"
                    )));
                }
            }
            if layer.output >= n || produced[layer.output] {
                return Err(NnError::Malformed(format!(
                    "layer {step} output id {} reused or out of range",
                    layer.output
                )));
            }
            produced[layer.output] = true;
        }
        let shapes = self.activation_shapes()?;
        for layer in &self.layers {
            if let LayerOp::ResidualAdd { rhs } = layer.op {
                if shapes[layer.input] != shapes[rhs] {
                    return Err(NnError::Malformed(format!(
                        "residual add joins {:?} and {:?}",
                        shapes[layer.input], shapes[rhs]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Statically inferred NHWC shape of every activation tensor.
    pub fn activation_shapes(&self) -> Result<Vec<[usize; 4]>, NnError> {
        let mut shapes = vec![[0usize; 4]; self.tensor_count()];
        shapes[0] = self.input_shape;
        for layer in &self.layers {
            let input = shapes[layer.input];
            shapes[layer.output] = kernels::infer_output_shape(&layer.op, input)?;
        }
        Ok(shapes)
    }

    /// Element dtype of every activation tensor under this graph's mode.
    /// Softmax runs in real arithmetic even in int8 mode.
    pub fn activation_dtypes(&self) -> Vec<DType> {
        let mut dtypes = vec![self.dtype; self.tensor_count()];
        if self.dtype == DType::Int8 {
            for layer in &self.layers {
                if matches!(layer.op, LayerOp::Softmax) {
                    dtypes[layer.output] = DType::Real32;
                }
            }
        }
        dtypes
    }
}

impl LayerOp {
    /// Tensor ids a layer reads, given its primary input.
    pub fn consumed_ids(&self, input: TensorId) -> Vec<TensorId> {
        match self {
            LayerOp::ResidualAdd { rhs } => vec![input, *rhs],
            _ => vec![input],
        }
    }
}

/// Execute the graph and keep every activation (calibration hook).
/// The image must be Real32; int8 graphs quantize it with the input params.
pub fn execute(model: &ModelGraph, image: &Tensor) -> Result<Vec<Tensor>, NnError> {
    let expected = &model.input_shape[..];
    if image.shape() != expected {
        return Err(NnError::BadInput {
            expected: expected.to_vec(),
            actual: image.shape().to_vec(),
        });
    }
    let int8 = model.dtype == DType::Int8;
    let input = if int8 {
        let qp = *model
            .activation_qparams
            .get(&0)
            .ok_or(NnError::MissingQParams(0))?;
        image.quantize(qp)?
    } else {
        image.clone()
    };

    let mut acts: Vec<Option<Tensor>> = vec![None; model.tensor_count()];
    acts[0] = Some(input);
    for (step, layer) in model.layers.iter().enumerate() {
        let x = acts[layer.input]
            .as_ref()
            .ok_or_else(|| NnError::Malformed(format!("layer {step} input missing")))?;
        let out_qp = if int8 {
            model.activation_qparams.get(&layer.output).copied()
        } else {
            None
        };
        let y = match &layer.op {
            LayerOp::Conv2d {
                weights,
                bias,
                stride,
                padding,
            } => kernels::conv2d(x, weights, bias, *stride, *padding, out_qp)?,
            LayerOp::DepthwiseConv2d {
                weights,
                bias,
                stride,
                padding,
            } => kernels::depthwise_conv2d(x, weights, bias, *stride, *padding, out_qp)?,
            LayerOp::Relu6 => kernels::relu6(x, out_qp)?,
            LayerOp::GlobalAvgPool => kernels::global_avg_pool(x, out_qp)?,
            LayerOp::FullyConnected { weights, bias } => {
                kernels::fully_connected(x, weights, bias, out_qp)?
            }
            LayerOp::Softmax => kernels::softmax(x)?,
            LayerOp::ResidualAdd { rhs } => {
                let r = acts[*rhs]
                    .as_ref()
                    .ok_or_else(|| NnError::Malformed(format!("layer {step} rhs missing")))?;
                kernels::residual_add(x, r, out_qp)?
            }
        };
        acts[layer.output] = Some(y);
    }
    acts.into_iter()
        .map(|t| t.ok_or_else(|| NnError::Malformed("unproduced tensor".into())))
        .collect()
}

/// Run the graph and return the class probability vector.
pub fn run_inference(model: &ModelGraph, image: &Tensor) -> Result<Vec<f32>, NnError> {
    let acts = execute(model, image)?;
    let out = &acts[model.output_id()];
    Ok(out.as_real32()?.to_vec())
}
