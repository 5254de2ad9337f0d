//! Post-training quantization: calibration, Real32 -> Int8 conversion, and
//! model evaluation.
//!
//! Calibration is plain running min/max per activation tensor over a
//! representative frame set. Weights quantize symmetric per tensor;
//! activations take asymmetric params from the profile; biases are stored
//! i32 at scale `s_in * s_w`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::nn::{execute, run_inference, Bias, LayerOp, ModelGraph, NnError, TensorId};
use crate::scene::{Frame, MaskLabel, SceneError};
use crate::tensor::{DType, QuantParams, QuantScheme, TensorError};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("calibration set is empty")]
    EmptyCalibrationSet,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("profile has no range for tensor {0}")]
    MissingRange(TensorId),
    #[error("model is already int8")]
    AlreadyQuantized,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Observed (min, max) per activation tensor id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationProfile {
    ranges: BTreeMap<TensorId, (f32, f32)>,
}

impl CalibrationProfile {
    pub fn range(&self, id: TensorId) -> Option<(f32, f32)> {
        self.ranges.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn observe(&mut self, id: TensorId, min: f32, max: f32) {
        let entry = self
            .ranges
            .entry(id)
            .or_insert((f32::INFINITY, f32::NEG_INFINITY));
        entry.0 = entry.0.min(min);
        entry.1 = entry.1.max(max);
    }

    /// Merge two profiles; min/max merging is associative and commutative,
    /// so fan-out order cannot change the result.
    pub fn merge(mut self, other: CalibrationProfile) -> CalibrationProfile {
        for (id, (lo, hi)) in other.ranges {
            self.observe(id, lo, hi);
        }
        self
    }

    /// Quantization params for an activation range: asymmetric, zero
    /// included, degenerate all-zero ranges nudged to a minimal span.
    pub fn activation_qparams(&self, id: TensorId) -> Result<QuantParams, QuantError> {
        let (mut lo, mut hi) = self.range(id).ok_or(QuantError::MissingRange(id))?;
        if lo == 0.0 && hi == 0.0 {
            // all-zero activation: any tiny span represents it exactly
            (lo, hi) = (0.0, 1e-6);
        }
        Ok(QuantParams::from_range(lo, hi, QuantScheme::Asymmetric)?)
    }
}

/// Run Real32 inference over the calibration set, recording per-tensor
/// running min/max. Weight ranges come from the weights themselves later.
pub fn calibrate(model: &ModelGraph, frames: &[Frame]) -> Result<CalibrationProfile, QuantError> {
    if frames.is_empty() {
        return Err(QuantError::EmptyCalibrationSet);
    }
    frames
        .par_iter()
        .map(|frame| {
            let acts = execute(model, &frame.to_input_tensor())?;
            let mut profile = CalibrationProfile::default();
            for (id, t) in acts.iter().enumerate() {
                let (lo, hi) = t.value_range()?;
                profile.observe(id, lo, hi);
            }
            Ok(profile)
        })
        .reduce(
            || Ok(CalibrationProfile::default()),
            |a, b| Ok(a?.merge(b?)),
        )
}

/// Convert a calibrated Real32 model to Int8: same topology, weights
/// symmetric per tensor, activations asymmetric from the profile, biases
/// i32 at `s_in * s_w`.
pub fn quantize_model(
    model: &ModelGraph,
    profile: &CalibrationProfile,
) -> Result<ModelGraph, QuantError> {
    if model.dtype != DType::Real32 {
        return Err(QuantError::AlreadyQuantized);
    }
    // Activation fusion: when a tensor's only consumer is a ReLU6, give it
    // the clamped output range. The producing kernel's saturating
    // requantization then implements the clamp itself and the ReLU6 layer
    // degenerates to identity, instead of spending int8 resolution on
    // pre-activation values the clamp discards.
    let mut consumer_count = vec![0usize; model.tensor_count()];
    for layer in &model.layers {
        for used in layer.op.consumed_ids(layer.input) {
            consumer_count[used] += 1;
        }
    }
    let mut fused_range: BTreeMap<TensorId, TensorId> = BTreeMap::new();
    for layer in &model.layers {
        if matches!(layer.op, LayerOp::Relu6) && consumer_count[layer.input] == 1 {
            fused_range.insert(layer.input, layer.output);
        }
    }
    let params_for = |id: TensorId| -> Result<QuantParams, QuantError> {
        profile.activation_qparams(fused_range.get(&id).copied().unwrap_or(id))
    };

    let mut activation_qparams = BTreeMap::new();
    activation_qparams.insert(0, params_for(0)?);
    for layer in &model.layers {
        if matches!(layer.op, LayerOp::Softmax) {
            continue; // stays real
        }
        activation_qparams.insert(layer.output, params_for(layer.output)?);
    }

    let quantize_bias = |bias: &Bias, s_in: f32, s_w: f32| -> Result<Bias, QuantError> {
        let b = match bias {
            Bias::Real(v) => v,
            Bias::Int(_) => return Err(QuantError::AlreadyQuantized),
        };
        let scale = f64::from(s_in) * f64::from(s_w);
        Ok(Bias::Int(
            b.iter()
                .map(|&x| {
                    (f64::from(x) / scale)
                        .round_ties_even()
                        .clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
                })
                .collect(),
        ))
    };

    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let in_qp = activation_qparams
            .get(&layer.input)
            .copied()
            .ok_or(QuantError::MissingRange(layer.input))?;
        let op = match &layer.op {
            LayerOp::Conv2d {
                weights,
                bias,
                stride,
                padding,
            } => {
                let (lo, hi) = weights.value_range()?;
                let w_qp = QuantParams::from_range(lo, hi, QuantScheme::Symmetric)?;
                LayerOp::Conv2d {
                    weights: weights.quantize(w_qp)?,
                    bias: quantize_bias(bias, in_qp.scale, w_qp.scale)?,
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerOp::DepthwiseConv2d {
                weights,
                bias,
                stride,
                padding,
            } => {
                let (lo, hi) = weights.value_range()?;
                let w_qp = QuantParams::from_range(lo, hi, QuantScheme::Symmetric)?;
                LayerOp::DepthwiseConv2d {
                    weights: weights.quantize(w_qp)?,
                    bias: quantize_bias(bias, in_qp.scale, w_qp.scale)?,
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerOp::FullyConnected { weights, bias } => {
                let (lo, hi) = weights.value_range()?;
                let w_qp = QuantParams::from_range(lo, hi, QuantScheme::Symmetric)?;
                LayerOp::FullyConnected {
                    weights: weights.quantize(w_qp)?,
                    bias: quantize_bias(bias, in_qp.scale, w_qp.scale)?,
                }
            }
            passthrough => passthrough.clone(),
        };
        layers.push(crate::nn::Layer {
            op,
            input: layer.input,
            output: layer.output,
        });
    }

    Ok(ModelGraph {
        layers,
        dtype: DType::Int8,
        input_shape: model.input_shape,
        num_classes: model.num_classes,
        activation_qparams,
    })
}

/// Accuracy, confusion matrix and (optionally) argmax agreement with a
/// reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Rows = truth (mask, no-mask), cols = prediction.
    pub confusion: [[usize; 2]; 2],
    pub agreement: Option<f64>,
    pub total: usize,
}

impl EvalResult {
    pub fn tp(&self) -> usize {
        self.confusion[0][0]
    }
    pub fn fn_(&self) -> usize {
        self.confusion[0][1]
    }
    pub fn fp(&self) -> usize {
        self.confusion[1][0]
    }
    pub fn tn(&self) -> usize {
        self.confusion[1][1]
    }

    pub const CSV_HEADER: &'static str = "model,dtype,accuracy,tp,fn,fp,tn,agreement";

    pub fn csv_row(&self, model_name: &str, dtype: DType) -> String {
        let agreement = self
            .agreement
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".to_string());
        format!(
            "{model_name},{},{:.4},{},{},{},{},{agreement}",
            match dtype {
                DType::Real32 => "real32",
                DType::Int8 => "int8",
            },
            self.accuracy,
            self.tp(),
            self.fn_(),
            self.fp(),
            self.tn(),
        )
    }
}

/// Evaluate a model on a labeled set; with a reference model, also report
/// argmax agreement.
pub fn evaluate(
    model: &ModelGraph,
    test_set: &[Frame],
    reference: Option<&ModelGraph>,
) -> Result<EvalResult, QuantError> {
    if test_set.is_empty() {
        return Err(QuantError::EmptyEvalSet);
    }
    let argmax = |probs: &[f32]| -> usize {
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let rows: Vec<(usize, usize, Option<usize>)> = test_set
        .par_iter()
        .map(|frame| {
            let truth = frame.label()?.class_index();
            let probs = run_inference(model, &frame.to_input_tensor())?;
            let pred = argmax(&probs);
            let ref_pred = match reference {
                Some(r) => Some(argmax(&run_inference(r, &frame.to_input_tensor())?)),
                None => None,
            };
            Ok::<_, QuantError>((truth, pred, ref_pred))
        })
        .collect::<Result<_, _>>()?;

    let mut confusion = [[0usize; 2]; 2];
    let mut agree = 0usize;
    for &(truth, pred, ref_pred) in &rows {
        confusion[truth][pred.min(1)] += 1;
        if ref_pred == Some(pred) {
            agree += 1;
        }
    }
    let total = rows.len();
    let correct = confusion[0][0] + confusion[1][1];
    Ok(EvalResult {
        accuracy: correct as f64 / total as f64,
        confusion,
        agreement: reference.map(|_| agree as f64 / total as f64),
        total,
    })
}

/// Convenience label read used by mission attribution.
pub fn predicted_label(probs: &[f32]) -> (MaskLabel, f64) {
    let (idx, &p) = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty probability vector");
    (
        MaskLabel::from_class_index(idx).unwrap_or(MaskLabel::NoMask),
        f64::from(p),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mobilenet_v2, footprint, io};
    use crate::scene::{generate_dataset, DatasetParams};

    fn small_model() -> ModelGraph {
        build_mobilenet_v2(0.35, 96, 2, 7).unwrap()
    }

    fn calib_frames(n: usize) -> Vec<Frame> {
        generate_dataset(n, 21, &DatasetParams::default())
    }

    #[test]
    fn calibrate_rejects_empty_set() {
        let model = small_model();
        assert!(matches!(
            calibrate(&model, &[]),
            Err(QuantError::EmptyCalibrationSet)
        ));
    }

    #[test]
    fn profile_merge_is_order_free_and_monotone() {
        let model = small_model();
        let frames = calib_frames(6);
        let p1 = calibrate(&model, &frames[..3]).unwrap();
        let p2 = calibrate(&model, &frames[3..]).unwrap();
        let whole = calibrate(&model, &frames).unwrap();
        assert_eq!(p1.clone().merge(p2.clone()), p2.clone().merge(p1.clone()));
        assert_eq!(p1.clone().merge(p2), whole);
        // growth only widens ranges
        let sub = calibrate(&model, &frames[..3]).unwrap();
        for (&id, &(lo, hi)) in &whole.ranges {
            if let Some((slo, shi)) = sub.range(id) {
                assert!(lo <= slo && hi >= shi, "tensor {id}");
            }
        }
    }

    #[test]
    fn relu6_ranges_calibrate_within_bounds() {
        let model = small_model();
        let frames = calib_frames(20);
        let profile = calibrate(&model, &frames).unwrap();
        for layer in &model.layers {
            if matches!(layer.op, LayerOp::Relu6) {
                let (lo, hi) = profile.range(layer.output).unwrap();
                assert!(lo >= 0.0 && hi <= 6.0, "relu6 output range ({lo}, {hi})");
            }
        }
    }

    #[test]
    fn degenerate_range_is_nudged() {
        let mut profile = CalibrationProfile::default();
        profile.observe(3, 0.0, 0.0);
        let qp = profile.activation_qparams(3).unwrap();
        assert!(qp.scale > 0.0);
        assert_eq!(qp.dequantize_value(qp.quantize_value(0.0)), 0.0);
    }

    #[test]
    fn quantized_model_structure_and_size() {
        let model = small_model();
        let profile = calibrate(&model, &calib_frames(8)).unwrap();
        let q = quantize_model(&model, &profile).unwrap();
        assert_eq!(q.dtype, DType::Int8);
        assert_eq!(q.layers.len(), model.layers.len());
        assert_eq!(io::dump_text(&q), io::dump_text(&model)); // topology preserved
                                                              // weights shrink exactly 4x in element bytes
        let wf: usize = model
            .layers
            .iter()
            .filter_map(|l| l.op.weights())
            .map(|w| w.byte_size())
            .sum();
        let wq: usize = q
            .layers
            .iter()
            .filter_map(|l| l.op.weights())
            .map(|w| w.byte_size())
            .sum();
        assert_eq!(wf, 4 * wq);
        // serialized ratio lands in the published window
        let f_bytes = io::to_bytes(&model).unwrap().len() as f64;
        let q_bytes = io::to_bytes(&q).unwrap().len() as f64;
        let ratio = q_bytes / f_bytes;
        assert!((0.25..=0.40).contains(&ratio), "flash ratio {ratio}");
        // and the footprint report agrees
        let ff = footprint::memory_footprint(&model).unwrap();
        let fq = footprint::memory_footprint(&q).unwrap();
        assert!(fq.flash_bytes < ff.flash_bytes);
        assert!(fq.ram_peak_bytes < ff.ram_peak_bytes);
    }

    #[test]
    fn quantize_model_is_idempotent_in_effect() {
        let model = small_model();
        let profile = calibrate(&model, &calib_frames(8)).unwrap();
        let q1 = quantize_model(&model, &profile).unwrap();
        // re-quantizing a dequantized copy with the same profile gives the
        // same activation params
        let q2 = quantize_model(&model, &profile).unwrap();
        assert_eq!(q1.activation_qparams, q2.activation_qparams);
        assert!(matches!(
            quantize_model(&q1, &profile),
            Err(QuantError::AlreadyQuantized)
        ));
    }

    #[test]
    fn evaluate_agreement_with_itself_is_total() {
        let model = small_model();
        let frames = calib_frames(10);
        let result = evaluate(&model, &frames, Some(&model)).unwrap();
        assert_eq!(result.agreement, Some(1.0));
        assert_eq!(result.total, 10);
        let row_sums: usize = result.confusion.iter().flatten().sum();
        assert_eq!(row_sums, 10);
    }

    #[test]
    fn confusion_rows_match_class_counts() {
        let model = small_model();
        let frames = calib_frames(12);
        let result = evaluate(&model, &frames, None).unwrap();
        assert_eq!(result.confusion[0][0] + result.confusion[0][1], 6);
        assert_eq!(result.confusion[1][0] + result.confusion[1][1], 6);
        assert_eq!(result.agreement, None);
        let trace = result.tp() + result.tn();
        assert_eq!(result.accuracy, trace as f64 / 12.0);
    }

    #[test]
    fn constant_predictor_scores_half_on_balanced_set() {
        use crate::nn::{Bias, LayerOp};
        use crate::tensor::Tensor;

        // zero weights with a biased head: every frame predicts class 0
        let mut model = small_model();
        for layer in &mut model.layers {
            match &mut layer.op {
                LayerOp::Conv2d { weights, .. } | LayerOp::DepthwiseConv2d { weights, .. } => {
                    *weights = Tensor::zeros(weights.shape().to_vec());
                }
                LayerOp::FullyConnected { weights, bias } => {
                    *weights = Tensor::zeros(weights.shape().to_vec());
                    *bias = Bias::Real(vec![1.0, 0.0]);
                }
                _ => {}
            }
        }
        let frames = calib_frames(40); // balanced by construction
        let result = evaluate(&model, &frames, None).unwrap();
        assert_eq!(result.accuracy, 0.5);
        assert_eq!(result.confusion[0][0], 20);
        assert_eq!(result.confusion[1][0], 20);
    }

    #[test]
    fn csv_row_shape() {
        let r = EvalResult {
            accuracy: 0.975,
            confusion: [[490, 10], [15, 485]],
            agreement: Some(0.99),
            total: 1000,
        };
        assert_eq!(
            EvalResult::CSV_HEADER,
            "model,dtype,accuracy,tp,fn,fp,tn,agreement"
        );
        assert_eq!(
            r.csv_row("m", DType::Int8),
            "m,int8,0.9750,490,10,15,485,0.9900"
        );
    }
}
