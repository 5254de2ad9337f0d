//! Graph builder and the inverted-residual network topology.
//!
//! Blocks follow the expand (1x1) -> depthwise (3x3) -> linear project (1x1)
//! pattern with a skip connection at stride 1 and matching channel counts;
//! an expansion factor of 1 omits the expand stage. Channel counts scale
//! with the width multiplier and round to a multiple of 8 (minimum 8).

use std::collections::BTreeMap;

use crate::rng::{SeededRng, Stream};
use crate::tensor::{DType, Tensor};

use super::{Bias, Layer, LayerOp, ModelGraph, NnError, Padding, TensorId};

/// Bottleneck stage settings: (expansion, output channels, repeats, stride).
pub const STAGE_SETTINGS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

const STEM_CHANNELS: usize = 32;
const HEAD_CHANNELS: usize = 1280;

/// One inverted-residual block description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    /// Expansion factor t; 1 skips the expand convolution.
    pub expansion: usize,
    /// Output (projected) channel count.
    pub out_channels: usize,
    /// Depthwise stride, 1 or 2.
    pub stride: usize,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.expansion == 0 || self.out_channels == 0 {
            return Err(NnError::Malformed(
                "block needs positive expansion and channels".into(),
            ));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(NnError::Malformed(format!(
                "block stride {} not in {{1,2}}",
                self.stride
            )));
        }
        Ok(())
    }

    /// A block keeps the residual connection iff stride 1 and the channel
    /// count is preserved.
    pub fn has_residual(&self, in_channels: usize) -> bool {
        self.stride == 1 && in_channels == self.out_channels
    }
}

/// Round a scaled channel count to the nearest multiple of `divisor`
/// (minimum `divisor`), never shrinking by more than 10%.
pub fn make_divisible(value: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = (((value + d / 2.0).floor() as usize) / divisor * divisor).max(divisor);
    if (out as f64) < 0.9 * value {
        out += divisor;
    }
    out
}

/// Incrementally builds a valid chain graph with seeded weights.
pub struct GraphBuilder {
    layers: Vec<Layer>,
    next_id: TensorId,
    input_shape: [usize; 4],
    rng: SeededRng,
}

impl GraphBuilder {
    pub fn new(input_shape: [usize; 4], seed: u64) -> Self {
        Self {
            layers: Vec::new(),
            next_id: 1,
            input_shape,
            rng: SeededRng::new(seed, Stream::Weights),
        }
    }

    fn push(&mut self, op: LayerOp, input: TensorId) -> TensorId {
        let output = self.next_id;
        self.next_id += 1;
        self.layers.push(Layer { op, input, output });
        output
    }

    /// Seeded uniform weights scaled to preserve activation variance
    /// through the clipped-linear stack (bound = sqrt(6 / fan_in)).
    fn init_weights(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.symmetric_f32(bound)).collect();
        Tensor::real32(shape, data).expect("shape/data constructed together")
    }

    pub fn conv2d(
        &mut self,
        input: TensorId,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> TensorId {
        let weights = self.init_weights(
            vec![out_channels, kernel, kernel, in_channels],
            in_channels * kernel * kernel,
        );
        let bias = Bias::Real(vec![0.0; out_channels]);
        self.push(
            LayerOp::Conv2d {
                weights,
                bias,
                stride,
                padding,
            },
            input,
        )
    }

    pub fn depthwise(
        &mut self,
        input: TensorId,
        channels: usize,
        kernel: usize,
        stride: usize,
    ) -> TensorId {
        let weights = self.init_weights(vec![channels, kernel, kernel, 1], kernel * kernel);
        let bias = Bias::Real(vec![0.0; channels]);
        self.push(
            LayerOp::DepthwiseConv2d {
                weights,
                bias,
                stride,
                padding: Padding::Same,
            },
            input,
        )
    }

    pub fn relu6(&mut self, input: TensorId) -> TensorId {
        self.push(LayerOp::Relu6, input)
    }

    pub fn global_avg_pool(&mut self, input: TensorId) -> TensorId {
        self.push(LayerOp::GlobalAvgPool, input)
    }

    /// The classification head keeps the plain small-uniform init; it is the
    /// trained layer.
    pub fn fully_connected(&mut self, input: TensorId, in_dim: usize, out_dim: usize) -> TensorId {
        let n = in_dim * out_dim;
        let data = (0..n).map(|_| self.rng.symmetric_f32(0.1)).collect();
        let weights = Tensor::real32(vec![out_dim, in_dim], data).expect("consistent shape");
        let bias = Bias::Real(vec![0.0; out_dim]);
        self.push(LayerOp::FullyConnected { weights, bias }, input)
    }

    pub fn softmax(&mut self, input: TensorId) -> TensorId {
        self.push(LayerOp::Softmax, input)
    }

    pub fn residual_add(&mut self, input: TensorId, rhs: TensorId) -> TensorId {
        self.push(LayerOp::ResidualAdd { rhs }, input)
    }

    /// Emit one inverted-residual block; returns the block output id.
    pub fn inverted_residual(
        &mut self,
        input: TensorId,
        in_channels: usize,
        spec: BlockSpec,
    ) -> Result<TensorId, NnError> {
        spec.validate()?;
        let expanded = spec.expansion * in_channels;
        let mut x = input;
        if spec.expansion != 1 {
            x = self.conv2d(x, in_channels, expanded, 1, 1, Padding::Same);
            x = self.relu6(x);
        }
        x = self.depthwise(x, expanded, 3, spec.stride);
        x = self.relu6(x);
        // linear projection: no activation
        x = self.conv2d(x, expanded, spec.out_channels, 1, 1, Padding::Same);
        if spec.has_residual(in_channels) {
            x = self.residual_add(x, input);
        }
        Ok(x)
    }

    pub fn finish(self, num_classes: usize) -> ModelGraph {
        ModelGraph {
            layers: self.layers,
            dtype: DType::Real32,
            input_shape: self.input_shape,
            num_classes,
            activation_qparams: BTreeMap::new(),
        }
    }
}

/// Build the canonical width-scaled topology: stem conv, seven bottleneck
/// stages, 1x1 head conv, global pool, fully connected classifier, softmax.
pub fn build_mobilenet_v2(
    width_multiplier: f64,
    input_res: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelGraph, NnError> {
    if !(width_multiplier > 0.0) || !width_multiplier.is_finite() {
        return Err(NnError::Malformed(format!(
            "width multiplier must be positive, got {width_multiplier}"
        )));
    }
    if input_res == 0 || input_res % 32 != 0 {
        return Err(NnError::Malformed(format!(
            "input resolution {input_res} must be a positive multiple of 32"
        )));
    }
    if classes < 2 {
        return Err(NnError::Malformed(
            "classifier needs at least two classes".into(),
        ));
    }

    let mut b = GraphBuilder::new([1, input_res, input_res, 3], seed);
    let stem = make_divisible(STEM_CHANNELS as f64 * width_multiplier, 8);
    let mut x = b.conv2d(0, 3, stem, 3, 2, Padding::Same);
    x = b.relu6(x);
    let mut channels = stem;
    for (t, c, n, s) in STAGE_SETTINGS {
        let out_channels = make_divisible(c as f64 * width_multiplier, 8);
        for rep in 0..n {
            let spec = BlockSpec {
                expansion: t,
                out_channels,
                stride: if rep == 0 { s } else { 1 },
            };
            x = b.inverted_residual(x, channels, spec)?;
            channels = out_channels;
        }
    }
    let head = if width_multiplier > 1.0 {
        make_divisible(HEAD_CHANNELS as f64 * width_multiplier, 8)
    } else {
        HEAD_CHANNELS
    };
    x = b.conv2d(x, channels, head, 1, 1, Padding::Same);
    x = b.relu6(x);
    x = b.global_avg_pool(x);
    x = b.fully_connected(x, head, classes);
    b.softmax(x);

    let model = b.finish(classes);
    model.validate()?;
    Ok(model)
}
