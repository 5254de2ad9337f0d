//! Float and int8 layer kernels.
//!
//! Int8 arithmetic: inputs and weights are affine-quantized per tensor,
//! weights symmetric. Accumulation is exact in i32 over `(q_in - zp_in) * q_w`
//! plus an i32 bias at scale `s_in * s_w`; the accumulator is scaled back to
//! the declared output params through the real multiplier
//! `s_in * s_w / s_out`, rounded half-to-even, saturating to [-128, 127].

use crate::tensor::{DType, QuantParams, Tensor};

use super::{Bias, LayerOp, NnError, Padding};

/// Output spatial extent and leading pad for one dimension.
fn dim_out(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize), NnError> {
    match padding {
        Padding::Valid => {
            if input < kernel {
                return Err(NnError::Shape(format!(
                    "valid padding needs input {input} >= kernel {kernel}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, needed / 2))
        }
    }
}

/// Requantize an i32 accumulator through a real multiplier.
fn requantize(acc: i32, multiplier: f64, zero_point: i8) -> i8 {
    let v = (f64::from(acc) * multiplier).round_ties_even() + f64::from(zero_point);
    v.clamp(-128.0, 127.0) as i8
}

/// Four-lane f32 dot product. Multiple accumulators let the compiler keep
/// the lanes independent; the summation order differs from a sequential
/// fold, which every caller here tolerates.
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0f32; 4];
    let quads = n / 4;
    for i in 0..quads {
        let j = i * 4;
        lanes[0] += a[j] * b[j];
        lanes[1] += a[j + 1] * b[j + 1];
        lanes[2] += a[j + 2] * b[j + 2];
        lanes[3] += a[j + 3] * b[j + 3];
    }
    let mut sum = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for j in quads * 4..n {
        sum += a[j] * b[j];
    }
    sum
}

/// Four-lane i32 dot of zero-shifted int8 input against int8 weights;
/// exact regardless of lane split.
fn dot_i8(a: &[i8], b: &[i8], zp_in: i32) -> i32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0i32; 4];
    let quads = n / 4;
    for i in 0..quads {
        let j = i * 4;
        lanes[0] += (i32::from(a[j]) - zp_in) * i32::from(b[j]);
        lanes[1] += (i32::from(a[j + 1]) - zp_in) * i32::from(b[j + 1]);
        lanes[2] += (i32::from(a[j + 2]) - zp_in) * i32::from(b[j + 2]);
        lanes[3] += (i32::from(a[j + 3]) - zp_in) * i32::from(b[j + 3]);
    }
    let mut sum = lanes[0] + lanes[1] + lanes[2] + lanes[3];
    for j in quads * 4..n {
        sum += (i32::from(a[j]) - zp_in) * i32::from(b[j]);
    }
    sum
}

fn shape4(t: &Tensor, what: &str) -> Result<[usize; 4], NnError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(NnError::Shape(format!("{what} must be rank 4, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Statically infer a layer's output shape from its input shape.
pub fn infer_output_shape(op: &LayerOp, input: [usize; 4]) -> Result<[usize; 4], NnError> {
    let [n, h, w, c] = input;
    match op {
        LayerOp::Conv2d {
            weights,
            stride,
            padding,
            ..
        } => {
            let [o, kh, kw, i] = shape4(weights, "conv weights")?;
            if i != c {
                return Err(NnError::Shape(format!(
                    "conv expects {i} input channels, activation has {c}"
                )));
            }
            let (oh, _) = dim_out(h, kh, *stride, *padding)?;
            let (ow, _) = dim_out(w, kw, *stride, *padding)?;
            Ok([n, oh, ow, o])
        }
        LayerOp::DepthwiseConv2d {
            weights,
            stride,
            padding,
            ..
        } => {
            let [o, kh, kw, i] = shape4(weights, "depthwise weights")?;
            if i != 1 || o != c {
                return Err(NnError::Shape(format!(
                    "depthwise weights must be [{c}, kh, kw, 1], got [{o}, {kh}, {kw}, {i}]"
                )));
            }
            let (oh, _) = dim_out(h, kh, *stride, *padding)?;
            let (ow, _) = dim_out(w, kw, *stride, *padding)?;
            Ok([n, oh, ow, c])
        }
        LayerOp::Relu6 | LayerOp::ResidualAdd { .. } => Ok(input),
        LayerOp::GlobalAvgPool => Ok([n, 1, 1, c]),
        LayerOp::FullyConnected { weights, .. } => {
            let ws = weights.shape();
            if ws.len() != 2 {
                return Err(NnError::Shape(format!(
                    "fc weights must be rank 2, got {ws:?}"
                )));
            }
            let (o, i) = (ws[0], ws[1]);
            if i != h * w * c {
                return Err(NnError::Shape(format!(
                    "fc expects {i} inputs, activation flattens to {}",
                    h * w * c
                )));
            }
            Ok([n, 1, 1, o])
        }
        LayerOp::Softmax => Ok(input),
    }
}

enum Mode<'a> {
    Real {
        bias: &'a [f32],
    },
    Int8 {
        in_qp: QuantParams,
        w_qp: QuantParams,
        out_qp: QuantParams,
        bias: &'a [i32],
    },
}

fn conv_mode<'a>(
    input: &Tensor,
    weights: &Tensor,
    bias: &'a Bias,
    out_qp: Option<QuantParams>,
    out_channels: usize,
) -> Result<Mode<'a>, NnError> {
    if bias.len() != out_channels {
        return Err(NnError::Shape(format!(
            "bias has {} entries for {out_channels} output channels",
            bias.len()
        )));
    }
    match (input.dtype(), weights.dtype(), bias) {
        (DType::Real32, DType::Real32, Bias::Real(b)) => {
            if out_qp.is_some() {
                return Err(NnError::MixedDTypes(
                    "output quant params supplied for a real kernel".into(),
                ));
            }
            Ok(Mode::Real { bias: b })
        }
        (DType::Int8, DType::Int8, Bias::Int(b)) => {
            let in_qp = *input.qparams().expect("int8 tensor carries qparams");
            let w_qp = *weights.qparams().expect("int8 tensor carries qparams");
            if w_qp.zero_point != 0 {
                return Err(NnError::AsymmetricWeights);
            }
            let out_qp = out_qp.ok_or(NnError::MissingQParams(0))?;
            Ok(Mode::Int8 {
                in_qp,
                w_qp,
                out_qp,
                bias: b,
            })
        }
        _ => Err(NnError::MixedDTypes(format!(
            "input {:?} / weights {:?} / bias {}",
            input.dtype(),
            weights.dtype(),
            match bias {
                Bias::Real(_) => "real",
                Bias::Int(_) => "int",
            }
        ))),
    }
}

/// Pointwise (1x1, stride 1) convolution as a per-pixel GEMV with four
/// output channels per input pass.
fn pointwise_f32(
    x: &[f32],
    wt: &[f32],
    bias: &[f32],
    pixels: usize,
    c: usize,
    o: usize,
    out: &mut [f32],
) {
    for p in 0..pixels {
        let xs = &x[p * c..(p + 1) * c];
        let row = &mut out[p * o..(p + 1) * o];
        let mut oc = 0;
        while oc + 4 <= o {
            let w0 = &wt[oc * c..(oc + 1) * c];
            let w1 = &wt[(oc + 1) * c..(oc + 2) * c];
            let w2 = &wt[(oc + 2) * c..(oc + 3) * c];
            let w3 = &wt[(oc + 3) * c..(oc + 4) * c];
            let (mut a0, mut a1, mut a2, mut a3) =
                (bias[oc], bias[oc + 1], bias[oc + 2], bias[oc + 3]);
            for i in 0..c {
                let xv = xs[i];
                a0 += xv * w0[i];
                a1 += xv * w1[i];
                a2 += xv * w2[i];
                a3 += xv * w3[i];
            }
            row[oc] = a0;
            row[oc + 1] = a1;
            row[oc + 2] = a2;
            row[oc + 3] = a3;
            oc += 4;
        }
        while oc < o {
            row[oc] = bias[oc] + dot_f32(xs, &wt[oc * c..(oc + 1) * c]);
            oc += 1;
        }
    }
}

fn pointwise_i8(
    x: &[i8],
    wt: &[i8],
    bias: &[i32],
    pixels: usize,
    c: usize,
    o: usize,
    zp_in: i32,
    mult: f64,
    zp_out: i8,
    out: &mut [i8],
) {
    for p in 0..pixels {
        let xs = &x[p * c..(p + 1) * c];
        let row = &mut out[p * o..(p + 1) * o];
        let mut oc = 0;
        while oc + 4 <= o {
            let w0 = &wt[oc * c..(oc + 1) * c];
            let w1 = &wt[(oc + 1) * c..(oc + 2) * c];
            let w2 = &wt[(oc + 2) * c..(oc + 3) * c];
            let w3 = &wt[(oc + 3) * c..(oc + 4) * c];
            let (mut a0, mut a1, mut a2, mut a3) =
                (bias[oc], bias[oc + 1], bias[oc + 2], bias[oc + 3]);
            for i in 0..c {
                let xv = i32::from(xs[i]) - zp_in;
                a0 += xv * i32::from(w0[i]);
                a1 += xv * i32::from(w1[i]);
                a2 += xv * i32::from(w2[i]);
                a3 += xv * i32::from(w3[i]);
            }
            row[oc] = requantize(a0, mult, zp_out);
            row[oc + 1] = requantize(a1, mult, zp_out);
            row[oc + 2] = requantize(a2, mult, zp_out);
            row[oc + 3] = requantize(a3, mult, zp_out);
            oc += 4;
        }
        while oc < o {
            let acc = bias[oc] + dot_i8(xs, &wt[oc * c..(oc + 1) * c], zp_in);
            row[oc] = requantize(acc, mult, zp_out);
            oc += 1;
        }
    }
}

/// 2-D convolution, NHWC activations, OHWI weights.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Bias,
    stride: usize,
    padding: Padding,
    out_qp: Option<QuantParams>,
) -> Result<Tensor, NnError> {
    let [n, h, w, c] = shape4(input, "conv input")?;
    let [o, kh, kw, i] = shape4(weights, "conv weights")?;
    if i != c {
        return Err(NnError::Shape(format!(
            "conv expects {i} input channels, activation has {c}"
        )));
    }
    let (oh, pad_h) = dim_out(h, kh, stride, padding)?;
    let (ow, pad_w) = dim_out(w, kw, stride, padding)?;
    let out_shape = vec![n, oh, ow, o];

    match conv_mode(input, weights, bias, out_qp, o)? {
        Mode::Real { bias } => {
            let x = input.as_real32()?;
            let wt = weights.as_real32()?;
            let mut out = vec![0f32; n * oh * ow * o];
            if kh == 1 && kw == 1 && stride == 1 {
                pointwise_f32(x, wt, bias, n * h * w, c, o, &mut out);
                return Ok(Tensor::real32(out_shape, out)?);
            }
            for bn in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = ((bn * oh + oy) * ow + ox) * o;
                        for oc in 0..o {
                            let mut acc = bias[oc];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad_h as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let xb = ((bn * h + iy as usize) * w + ix as usize) * c;
                                    let wb = ((oc * kh + ky) * kw + kx) * c;
                                    acc += dot_f32(&x[xb..xb + c], &wt[wb..wb + c]);
                                }
                            }
                            out[base + oc] = acc;
                        }
                    }
                }
            }
            Ok(Tensor::real32(out_shape, out)?)
        }
        Mode::Int8 {
            in_qp,
            w_qp,
            out_qp,
            bias,
        } => {
            let x = input.as_int8()?;
            let wt = weights.as_int8()?;
            let zp_in = i32::from(in_qp.zero_point);
            let mult = f64::from(in_qp.scale) * f64::from(w_qp.scale) / f64::from(out_qp.scale);
            let mut out = vec![0i8; n * oh * ow * o];
            if kh == 1 && kw == 1 && stride == 1 {
                pointwise_i8(
                    x,
                    wt,
                    bias,
                    n * h * w,
                    c,
                    o,
                    zp_in,
                    mult,
                    out_qp.zero_point,
                    &mut out,
                );
                return Ok(Tensor::int8(out_shape, out, out_qp)?);
            }
            for bn in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = ((bn * oh + oy) * ow + ox) * o;
                        for oc in 0..o {
                            let mut acc = bias[oc];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad_h as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let xb = ((bn * h + iy as usize) * w + ix as usize) * c;
                                    let wb = ((oc * kh + ky) * kw + kx) * c;
                                    acc += dot_i8(&x[xb..xb + c], &wt[wb..wb + c], zp_in);
                                }
                            }
                            out[base + oc] = requantize(acc, mult, out_qp.zero_point);
                        }
                    }
                }
            }
            Ok(Tensor::int8(out_shape, out, out_qp)?)
        }
    }
}

/// Depthwise 2-D convolution, weights [C, kh, kw, 1] (one filter per
/// channel, multiplier 1). No cross-channel accumulation.
pub fn depthwise_conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Bias,
    stride: usize,
    padding: Padding,
    out_qp: Option<QuantParams>,
) -> Result<Tensor, NnError> {
    let [n, h, w, c] = shape4(input, "depthwise input")?;
    let [o, kh, kw, i] = shape4(weights, "depthwise weights")?;
    if i != 1 || o != c {
        return Err(NnError::Shape(format!(
            "depthwise weights must be [{c}, kh, kw, 1], got [{o}, {kh}, {kw}, {i}]"
        )));
    }
    let (oh, pad_h) = dim_out(h, kh, stride, padding)?;
    let (ow, pad_w) = dim_out(w, kw, stride, padding)?;
    let out_shape = vec![n, oh, ow, c];

    match conv_mode(input, weights, bias, out_qp, c)? {
        Mode::Real { bias } => {
            let x = input.as_real32()?;
            let wt = weights.as_real32()?;
            let mut out = vec![0f32; n * oh * ow * c];
            for bn in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = ((bn * oh + oy) * ow + ox) * c;
                        // seed with bias so the accumulation order matches
                        // the plain grouped-convolution definition
                        out[base..base + c].copy_from_slice(bias);
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad_h as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad_w as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let xb = ((bn * h + iy as usize) * w + ix as usize) * c;
                                for ch in 0..c {
                                    out[base + ch] += x[xb + ch] * wt[(ch * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
            Ok(Tensor::real32(out_shape, out)?)
        }
        Mode::Int8 {
            in_qp,
            w_qp,
            out_qp,
            bias,
        } => {
            let x = input.as_int8()?;
            let wt = weights.as_int8()?;
            let zp_in = i32::from(in_qp.zero_point);
            let mult = f64::from(in_qp.scale) * f64::from(w_qp.scale) / f64::from(out_qp.scale);
            let mut out = vec![0i8; n * oh * ow * c];
            let mut acc = vec![0i32; c];
            for bn in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        acc.copy_from_slice(bias);
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad_h as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad_w as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let xb = ((bn * h + iy as usize) * w + ix as usize) * c;
                                for ch in 0..c {
                                    acc[ch] += (i32::from(x[xb + ch]) - zp_in)
                                        * i32::from(wt[(ch * kh + ky) * kw + kx]);
                                }
                            }
                        }
                        let base = ((bn * oh + oy) * ow + ox) * c;
                        for ch in 0..c {
                            out[base + ch] = requantize(acc[ch], mult, out_qp.zero_point);
                        }
                    }
                }
            }
            Ok(Tensor::int8(out_shape, out, out_qp)?)
        }
    }
}

/// Elementwise clamp(x, 0, 6). Int8 tensors are rescaled to the output
/// params and clamped between the quantized images of 0 and 6.
pub fn relu6(input: &Tensor, out_qp: Option<QuantParams>) -> Result<Tensor, NnError> {
    match input.dtype() {
        DType::Real32 => {
            if out_qp.is_some() {
                return Err(NnError::MixedDTypes(
                    "output quant params supplied for a real tensor".into(),
                ));
            }
            let x = input.as_real32()?;
            let out = x.iter().map(|&v| v.clamp(0.0, 6.0)).collect();
            Ok(Tensor::real32(input.shape().to_vec(), out)?)
        }
        DType::Int8 => {
            let out_qp = out_qp.ok_or(NnError::MissingQParams(0))?;
            let in_qp = *input.qparams().expect("int8 tensor carries qparams");
            let x = input.as_int8()?;
            let mult = f64::from(in_qp.scale) / f64::from(out_qp.scale);
            let lo = out_qp.quantize_value(0.0);
            let hi = out_qp.quantize_value(6.0);
            let zp_in = i32::from(in_qp.zero_point);
            let out = x
                .iter()
                .map(|&q| {
                    let v = requantize(i32::from(q) - zp_in, mult, out_qp.zero_point);
                    v.clamp(lo, hi)
                })
                .collect();
            Ok(Tensor::int8(input.shape().to_vec(), out, out_qp)?)
        }
    }
}

/// Mean over H and W per channel; output N x 1 x 1 x C.
pub fn global_avg_pool(input: &Tensor, out_qp: Option<QuantParams>) -> Result<Tensor, NnError> {
    let [n, h, w, c] = shape4(input, "pool input")?;
    if h == 0 || w == 0 {
        return Err(NnError::Shape("pool requires spatial extents >= 1".into()));
    }
    let count = h * w;
    let out_shape = vec![n, 1, 1, c];
    match input.dtype() {
        DType::Real32 => {
            if out_qp.is_some() {
                return Err(NnError::MixedDTypes(
                    "output quant params supplied for a real tensor".into(),
                ));
            }
            let x = input.as_real32()?;
            let mut out = vec![0f32; n * c];
            for bn in 0..n {
                for ch in 0..c {
                    let mut sum = 0f32;
                    for y in 0..h {
                        for xx in 0..w {
                            sum += x[((bn * h + y) * w + xx) * c + ch];
                        }
                    }
                    out[bn * c + ch] = sum / count as f32;
                }
            }
            Ok(Tensor::real32(out_shape, out)?)
        }
        DType::Int8 => {
            let out_qp = out_qp.ok_or(NnError::MissingQParams(0))?;
            let in_qp = *input.qparams().expect("int8 tensor carries qparams");
            let x = input.as_int8()?;
            let zp_in = i32::from(in_qp.zero_point);
            // i32 sum of (q - zp), requantized with the 1/count folded into
            // the multiplier
            let mult = f64::from(in_qp.scale) / (f64::from(out_qp.scale) * count as f64);
            let mut out = vec![0i8; n * c];
            for bn in 0..n {
                for ch in 0..c {
                    let mut sum = 0i32;
                    for y in 0..h {
                        for xx in 0..w {
                            sum += i32::from(x[((bn * h + y) * w + xx) * c + ch]) - zp_in;
                        }
                    }
                    out[bn * c + ch] = requantize(sum, mult, out_qp.zero_point);
                }
            }
            Ok(Tensor::int8(out_shape, out, out_qp)?)
        }
    }
}

/// Matrix-vector product plus bias; weights [O, I], input flattened per
/// batch entry. Int8 semantics as `conv2d`.
pub fn fully_connected(
    input: &Tensor,
    weights: &Tensor,
    bias: &Bias,
    out_qp: Option<QuantParams>,
) -> Result<Tensor, NnError> {
    let ishape = input.shape();
    if ishape.is_empty() {
        return Err(NnError::Shape("fc input must have a batch dim".into()));
    }
    let n = ishape[0];
    let flat: usize = ishape[1..].iter().product();
    let ws = weights.shape();
    if ws.len() != 2 {
        return Err(NnError::Shape(format!(
            "fc weights must be rank 2, got {ws:?}"
        )));
    }
    let (o, i) = (ws[0], ws[1]);
    if i != flat {
        return Err(NnError::Shape(format!(
            "fc expects {i} inputs, activation flattens to {flat}"
        )));
    }
    let out_shape = vec![n, 1, 1, o];
    match conv_mode(input, weights, bias, out_qp, o)? {
        Mode::Real { bias } => {
            let x = input.as_real32()?;
            let wt = weights.as_real32()?;
            let mut out = vec![0f32; n * o];
            for bn in 0..n {
                let xs = &x[bn * flat..(bn + 1) * flat];
                for oc in 0..o {
                    let acc = bias[oc] + dot_f32(xs, &wt[oc * i..(oc + 1) * i]);
                    out[bn * o + oc] = acc;
                }
            }
            Ok(Tensor::real32(out_shape, out)?)
        }
        Mode::Int8 {
            in_qp,
            w_qp,
            out_qp,
            bias,
        } => {
            let x = input.as_int8()?;
            let wt = weights.as_int8()?;
            let zp_in = i32::from(in_qp.zero_point);
            let mult = f64::from(in_qp.scale) * f64::from(w_qp.scale) / f64::from(out_qp.scale);
            let mut out = vec![0i8; n * o];
            for bn in 0..n {
                let xs = &x[bn * flat..(bn + 1) * flat];
                for oc in 0..o {
                    let acc = bias[oc] + dot_i8(xs, &wt[oc * i..(oc + 1) * i], zp_in);
                    out[bn * o + oc] = requantize(acc, mult, out_qp.zero_point);
                }
            }
            Ok(Tensor::int8(out_shape, out, out_qp)?)
        }
    }
}

/// Numerically stable softmax over the last axis, always in real
/// arithmetic. Int8 inputs are dequantized first.
pub fn softmax(input: &Tensor) -> Result<Tensor, NnError> {
    let real;
    let t = match input.dtype() {
        DType::Real32 => input,
        DType::Int8 => {
            real = input.dequantize()?;
            &real
        }
    };
    let shape = t.shape().to_vec();
    let classes = *shape
        .last()
        .ok_or_else(|| NnError::Shape("softmax needs an axis".into()))?;
    if classes == 0 {
        return Err(NnError::Shape("softmax needs at least one class".into()));
    }
    let x = t.as_real32()?;
    let mut out = vec![0f32; x.len()];
    for (row_in, row_out) in x.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = row_in.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0f32;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(Tensor::real32(shape, out)?)
}

/// Elementwise addition of two activations with identical shapes.
pub fn residual_add(
    a: &Tensor,
    b: &Tensor,
    out_qp: Option<QuantParams>,
) -> Result<Tensor, NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::Shape(format!(
            "residual add joins {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    match (a.dtype(), b.dtype()) {
        (DType::Real32, DType::Real32) => {
            let xs = a.as_real32()?;
            let ys = b.as_real32()?;
            let out = xs.iter().zip(ys).map(|(x, y)| x + y).collect();
            Ok(Tensor::real32(a.shape().to_vec(), out)?)
        }
        (DType::Int8, DType::Int8) => {
            let out_qp = out_qp.ok_or(NnError::MissingQParams(0))?;
            let qa = *a.qparams().expect("int8 tensor carries qparams");
            let qb = *b.qparams().expect("int8 tensor carries qparams");
            let xs = a.as_int8()?;
            let ys = b.as_int8()?;
            let sa = f64::from(qa.scale);
            let sb = f64::from(qb.scale);
            let so = f64::from(out_qp.scale);
            let out = xs
                .iter()
                .zip(ys)
                .map(|(&x, &y)| {
                    let real = f64::from(i32::from(x) - i32::from(qa.zero_point)) * sa
                        + f64::from(i32::from(y) - i32::from(qb.zero_point)) * sb;
                    let q = (real / so).round_ties_even() + f64::from(out_qp.zero_point);
                    q.clamp(-128.0, 127.0) as i8
                })
                .collect();
            Ok(Tensor::int8(a.shape().to_vec(), out, out_qp)?)
        }
        _ => Err(NnError::MixedDTypes("residual add of mixed dtypes".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeededRng, Stream};
    use crate::tensor::QuantScheme;

    fn t4(shape: [usize; 4], data: Vec<f32>) -> Tensor {
        Tensor::real32(shape.to_vec(), data).unwrap()
    }

    fn random_tensor(shape: Vec<usize>, bound: f32, rng: &mut SeededRng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.symmetric_f32(bound)).collect();
        Tensor::real32(shape, data).unwrap()
    }

    fn asym_for(t: &Tensor) -> QuantParams {
        let (lo, hi) = t.value_range().unwrap();
        QuantParams::from_range(lo, hi, QuantScheme::Asymmetric).unwrap()
    }

    fn sym_for(t: &Tensor) -> QuantParams {
        let (lo, hi) = t.value_range().unwrap();
        QuantParams::from_range(lo, hi, QuantScheme::Symmetric).unwrap()
    }

    /// Compare an int8 result against the float reference: every element
    /// within `2 * scale`, and at least 99% within `1 * scale`.
    fn assert_int8_close(int8_out: &Tensor, float_out: &Tensor) -> (f64, f64) {
        let qp = *int8_out.qparams().unwrap();
        let deq = int8_out.dequantize().unwrap();
        let a = deq.as_real32().unwrap();
        let b = float_out.as_real32().unwrap();
        let scale = f64::from(qp.scale);
        let mut within_one = 0usize;
        let mut worst: f64 = 0.0;
        for (x, y) in a.iter().zip(b) {
            let err = f64::from(x - y).abs();
            worst = worst.max(err);
            assert!(
                err <= 2.0 * scale + 1e-9,
                "err {err} > 2*scale {}",
                2.0 * scale
            );
            if err <= scale + 1e-9 {
                within_one += 1;
            }
        }
        let frac = within_one as f64 / a.len() as f64;
        assert!(frac >= 0.99, "only {frac} within one scale");
        (worst / scale, frac)
    }

    #[test]
    fn conv_identity_kernel() {
        let input = t4([1, 3, 3, 1], (1..=9).map(|v| v as f32).collect());
        let w = t4([1, 1, 1, 1], vec![1.0]);
        let out = conv2d(&input, &w, &Bias::Real(vec![0.0]), 1, Padding::Same, None).unwrap();
        assert_eq!(out.as_real32().unwrap(), input.as_real32().unwrap());
    }

    #[test]
    fn conv_all_ones_valid_sums_window() {
        let input = t4([1, 3, 3, 1], vec![2.0; 9]);
        let w = t4([1, 3, 3, 1], vec![1.0; 9]);
        let out = conv2d(&input, &w, &Bias::Real(vec![0.0]), 1, Padding::Valid, None).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.as_real32().unwrap(), &[18.0]);
    }

    #[test]
    fn conv_same_padding_shapes() {
        let input = t4([1, 5, 5, 2], vec![0.5; 50]);
        let w = t4([3, 3, 3, 2], vec![0.1; 54]);
        let out = conv2d(
            &input,
            &w,
            &Bias::Real(vec![0.0; 3]),
            2,
            Padding::Same,
            None,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 3]);
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let input = t4([1, 4, 4, 3], vec![0.0; 48]);
        let w = t4([2, 3, 3, 4], vec![0.0; 72]);
        assert!(conv2d(
            &input,
            &w,
            &Bias::Real(vec![0.0; 2]),
            1,
            Padding::Same,
            None
        )
        .is_err());
    }

    #[test]
    fn conv_int8_close_to_float() {
        let mut rng = SeededRng::new(5, Stream::Tests);
        let input = random_tensor(vec![1, 8, 8, 4], 1.0, &mut rng);
        let weights = random_tensor(vec![6, 3, 3, 4], 0.5, &mut rng);
        let bias: Vec<f32> = (0..6).map(|_| rng.symmetric_f32(0.2)).collect();
        let float_out = conv2d(
            &input,
            &weights,
            &Bias::Real(bias.clone()),
            1,
            Padding::Same,
            None,
        )
        .unwrap();

        let in_qp = asym_for(&input);
        let w_qp = sym_for(&weights);
        let out_qp = asym_for(&float_out);
        let bias_scale = f64::from(in_qp.scale) * f64::from(w_qp.scale);
        let bias_q: Vec<i32> = bias
            .iter()
            .map(|&b| (f64::from(b) / bias_scale).round_ties_even() as i32)
            .collect();
        let int8_out = conv2d(
            &input.quantize(in_qp).unwrap(),
            &weights.quantize(w_qp).unwrap(),
            &Bias::Int(bias_q),
            1,
            Padding::Same,
            Some(out_qp),
        )
        .unwrap();
        assert_int8_close(&int8_out, &float_out);
    }

    #[test]
    fn conv_int8_requires_out_params() {
        let mut rng = SeededRng::new(6, Stream::Tests);
        let input = random_tensor(vec![1, 4, 4, 2], 1.0, &mut rng);
        let weights = random_tensor(vec![2, 1, 1, 2], 0.5, &mut rng);
        let qi = input.quantize(asym_for(&input)).unwrap();
        let qw = weights.quantize(sym_for(&weights)).unwrap();
        assert!(conv2d(&qi, &qw, &Bias::Int(vec![0, 0]), 1, Padding::Same, None).is_err());
        // asymmetric weights are rejected
        let qw_asym = weights.quantize(asym_for(&weights)).unwrap();
        if qw_asym.qparams().unwrap().zero_point != 0 {
            assert!(matches!(
                conv2d(
                    &qi,
                    &qw_asym,
                    &Bias::Int(vec![0, 0]),
                    1,
                    Padding::Same,
                    Some(asym_for(&input))
                ),
                Err(NnError::AsymmetricWeights)
            ));
        }
    }

    #[test]
    fn depthwise_identity_per_channel() {
        let input = t4([1, 2, 2, 3], (0..12).map(|v| v as f32).collect());
        let w = t4([3, 1, 1, 1], vec![1.0; 3]);
        let out = depthwise_conv2d(
            &input,
            &w,
            &Bias::Real(vec![0.0; 3]),
            1,
            Padding::Same,
            None,
        )
        .unwrap();
        assert_eq!(out.as_real32().unwrap(), input.as_real32().unwrap());
    }

    /// Independent oracle: depthwise == direct convolution with one group
    /// per channel.
    fn grouped_conv_oracle(
        input: &Tensor,
        weights: &Tensor,
        bias: &[f32],
        stride: usize,
    ) -> Vec<f32> {
        let (h, w, c) = (input.shape()[1], input.shape()[2], input.shape()[3]);
        let (kh, kw) = (weights.shape()[1], weights.shape()[2]);
        let x = input.as_real32().unwrap();
        let wt = weights.as_real32().unwrap();
        // Same padding
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let ph = (((oh - 1) * stride + kh).saturating_sub(h)) / 2;
        let pw = (((ow - 1) * stride + kw).saturating_sub(w)) / 2;
        let mut out = vec![0f32; oh * ow * c];
        for g in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[g];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            acc += x[(iy as usize * w + ix as usize) * c + g]
                                * wt[(g * kh + ky) * kw + kx];
                        }
                    }
                    out[(oy * ow + ox) * c + g] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_equals_grouped_conv_oracle() {
        let mut rng = SeededRng::new(7, Stream::Tests);
        for stride in [1, 2] {
            let input = random_tensor(vec![1, 6, 6, 3], 1.0, &mut rng);
            let weights = random_tensor(vec![3, 3, 3, 1], 0.7, &mut rng);
            let bias: Vec<f32> = (0..3).map(|_| rng.symmetric_f32(0.2)).collect();
            let out = depthwise_conv2d(
                &input,
                &weights,
                &Bias::Real(bias.clone()),
                stride,
                Padding::Same,
                None,
            )
            .unwrap();
            let oracle = grouped_conv_oracle(&input, &weights, &bias, stride);
            assert_eq!(out.as_real32().unwrap(), &oracle[..], "stride {stride}");
        }
    }

    #[test]
    fn depthwise_int8_close_to_float() {
        let mut rng = SeededRng::new(8, Stream::Tests);
        let input = random_tensor(vec![1, 6, 6, 3], 1.0, &mut rng);
        let weights = random_tensor(vec![3, 3, 3, 1], 0.6, &mut rng);
        let bias: Vec<f32> = (0..3).map(|_| rng.symmetric_f32(0.1)).collect();
        let float_out = depthwise_conv2d(
            &input,
            &weights,
            &Bias::Real(bias.clone()),
            1,
            Padding::Same,
            None,
        )
        .unwrap();
        let in_qp = asym_for(&input);
        let w_qp = sym_for(&weights);
        let out_qp = asym_for(&float_out);
        let bias_scale = f64::from(in_qp.scale) * f64::from(w_qp.scale);
        let bias_q: Vec<i32> = bias
            .iter()
            .map(|&b| (f64::from(b) / bias_scale).round_ties_even() as i32)
            .collect();
        let int8_out = depthwise_conv2d(
            &input.quantize(in_qp).unwrap(),
            &weights.quantize(w_qp).unwrap(),
            &Bias::Int(bias_q),
            1,
            Padding::Same,
            Some(out_qp),
        )
        .unwrap();
        assert_int8_close(&int8_out, &float_out);
    }

    #[test]
    fn depthwise_rejects_channel_multiplier() {
        let input = t4([1, 4, 4, 3], vec![0.0; 48]);
        let w = t4([6, 3, 3, 1], vec![0.0; 54]);
        assert!(depthwise_conv2d(
            &input,
            &w,
            &Bias::Real(vec![0.0; 6]),
            1,
            Padding::Same,
            None
        )
        .is_err());
    }

    #[test]
    fn relu6_hand_values() {
        let input = t4([1, 1, 1, 3], vec![-1.5, 3.0, 7.2]);
        let out = relu6(&input, None).unwrap();
        assert_eq!(out.as_real32().unwrap(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn relu6_int8_clamps_in_quantized_domain() {
        let input = t4([1, 1, 1, 4], vec![-2.0, 0.5, 3.0, 9.0]);
        let in_qp = asym_for(&input);
        let out_qp = QuantParams::from_range(0.0, 6.0, QuantScheme::Asymmetric).unwrap();
        let out = relu6(&input.quantize(in_qp).unwrap(), Some(out_qp)).unwrap();
        let deq = out.dequantize().unwrap();
        let vals = deq.as_real32().unwrap();
        let scale = out_qp.scale;
        assert!(
            (vals[0] - 0.0).abs() <= f32::EPSILON,
            "negative clamps to exact zero"
        );
        assert!((vals[1] - 0.5).abs() <= 2.0 * scale);
        assert!((vals[2] - 3.0).abs() <= 2.0 * scale);
        assert!(
            (vals[3] - 6.0).abs() <= 2.0 * scale,
            "overflow clamps to six"
        );
    }

    #[test]
    fn pool_hand_values() {
        let constant = t4([1, 3, 3, 2], vec![4.25; 18]);
        let out = global_avg_pool(&constant, None).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 2]);
        assert_eq!(out.as_real32().unwrap(), &[4.25, 4.25]);

        let quad = t4([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let out = global_avg_pool(&quad, None).unwrap();
        assert_eq!(out.as_real32().unwrap(), &[2.5]);
    }

    #[test]
    fn pool_int8_error_within_one_scale() {
        let mut rng = SeededRng::new(9, Stream::Tests);
        let input = random_tensor(vec![1, 8, 8, 4], 1.0, &mut rng);
        let float_out = global_avg_pool(&input, None).unwrap();
        let in_qp = asym_for(&input);
        // averaging cannot leave the input range, so the natural output
        // params are the input params
        let out = global_avg_pool(&input.quantize(in_qp).unwrap(), Some(in_qp)).unwrap();
        let deq = out.dequantize().unwrap();
        for (a, b) in deq
            .as_real32()
            .unwrap()
            .iter()
            .zip(float_out.as_real32().unwrap())
        {
            assert!(
                (a - b).abs() <= in_qp.scale,
                "err {} scale {}",
                (a - b).abs(),
                in_qp.scale
            );
        }
    }

    #[test]
    fn fc_identity_and_hand_product() {
        let input = t4([1, 1, 1, 2], vec![3.0, -1.0]);
        let eye = Tensor::real32(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = fully_connected(&input, &eye, &Bias::Real(vec![0.0, 0.0]), None).unwrap();
        assert_eq!(out.as_real32().unwrap(), &[3.0, -1.0]);

        let w = Tensor::real32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = t4([1, 1, 1, 2], vec![1.0, 1.0]);
        let out = fully_connected(&ones, &w, &Bias::Real(vec![0.0, 0.0]), None).unwrap();
        assert_eq!(out.as_real32().unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn fc_rejects_dimension_mismatch() {
        let input = t4([1, 1, 1, 3], vec![0.0; 3]);
        let w = Tensor::real32(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(fully_connected(&input, &w, &Bias::Real(vec![0.0; 2]), None).is_err());
    }

    #[test]
    fn fc_int8_close_to_float() {
        let mut rng = SeededRng::new(10, Stream::Tests);
        let input = random_tensor(vec![1, 1, 1, 32], 1.0, &mut rng);
        let weights = random_tensor(vec![8, 32], 0.4, &mut rng);
        let bias: Vec<f32> = (0..8).map(|_| rng.symmetric_f32(0.3)).collect();
        let float_out = fully_connected(&input, &weights, &Bias::Real(bias.clone()), None).unwrap();
        let in_qp = asym_for(&input);
        let w_qp = sym_for(&weights);
        let out_qp = asym_for(&float_out);
        let bias_scale = f64::from(in_qp.scale) * f64::from(w_qp.scale);
        let bias_q: Vec<i32> = bias
            .iter()
            .map(|&b| (f64::from(b) / bias_scale).round_ties_even() as i32)
            .collect();
        let int8_out = fully_connected(
            &input.quantize(in_qp).unwrap(),
            &weights.quantize(w_qp).unwrap(),
            &Bias::Int(bias_q),
            Some(out_qp),
        )
        .unwrap();
        assert_int8_close(&int8_out, &float_out);
    }

    #[test]
    fn softmax_hand_values() {
        let even = t4([1, 1, 1, 2], vec![0.0, 0.0]);
        let out = softmax(&even).unwrap();
        assert_eq!(out.as_real32().unwrap(), &[0.5, 0.5]);

        let skew = t4([1, 1, 1, 2], vec![std::f32::consts::LN_2, 0.0]);
        let out = softmax(&skew).unwrap();
        let p = out.as_real32().unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_normalizes_and_shift_invariant() {
        let mut rng = SeededRng::new(11, Stream::Tests);
        for _ in 0..50 {
            let raw: Vec<f32> = (0..5).map(|_| rng.symmetric_f32(20.0)).collect();
            let t = t4([1, 1, 1, 5], raw.clone());
            let p = softmax(&t).unwrap();
            let probs = p.as_real32().unwrap().to_vec();
            let sum: f32 = probs.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let shifted = t4([1, 1, 1, 5], raw.iter().map(|v| v + 7.5).collect());
            let p2 = softmax(&shifted).unwrap();
            for (a, b) in probs.iter().zip(p2.as_real32().unwrap()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn residual_add_float_and_int8() {
        let a = t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t4([1, 1, 2, 2], vec![0.5, -0.5, 1.5, -1.5]);
        let out = residual_add(&a, &b, None).unwrap();
        assert_eq!(out.as_real32().unwrap(), &[1.5, 1.5, 4.5, 2.5]);

        let float_sum = out;
        let qa = asym_for(&a);
        let qb = asym_for(&b);
        let qo = asym_for(&float_sum);
        let int8 =
            residual_add(&a.quantize(qa).unwrap(), &b.quantize(qb).unwrap(), Some(qo)).unwrap();
        assert_int8_close(&int8, &float_sum);

        let c = t4([1, 2, 2, 1], vec![0.0; 4]);
        assert!(residual_add(&a, &c, None).is_err());
    }

    #[test]
    fn valid_padding_needs_room() {
        let input = t4([1, 2, 2, 1], vec![0.0; 4]);
        let w = t4([1, 3, 3, 1], vec![0.0; 9]);
        assert!(conv2d(&input, &w, &Bias::Real(vec![0.0]), 1, Padding::Valid, None).is_err());
    }
}
