//! Binary model container ("TWNG") and the plain-text graph dump.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "TWNG" | version u16 | dtype u8 | reserved u8
//! input_shape 4xu32 | num_classes u32 | layer_count u32 | qparam_count u32
//! bias_blob_len u64 | weight_blob_len u64
//! layer table: op u8, stride u8, padding u8, weight_rank u8,
//!              input u32, output u32, aux u32,
//!              weight_shape 4xu32,
//!              weight_off u64, weight_len u64, bias_off u64, bias_len u64
//! qparam table: kind u8 (0 activation / 1 layer weights), id u32,
//!               scale f32, zero_point i8
//! bias blob (f32 or i32 per mode) | weight blob (f32 or i8 per mode)
//! ```
//!
//! `load(save(m))` reproduces the model bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{DType, QuantParams, Tensor};

use super::{Bias, Layer, LayerOp, ModelGraph, Padding, TensorId};

pub const MAGIC: &[u8; 4] = b"TWNG";
pub const FORMAT_VERSION: u16 = 1;
const NO_AUX: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}: {what}")]
    Parse { offset: usize, what: String },
}

fn parse_err(offset: usize, what: impl Into<String>) -> ModelIoError {
    ModelIoError::Parse {
        offset,
        what: what.into(),
    }
}

// ---------------------------------------------------------------- encoding

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn op_code(op: &LayerOp) -> u8 {
    match op {
        LayerOp::Conv2d { .. } => 0,
        LayerOp::DepthwiseConv2d { .. } => 1,
        LayerOp::Relu6 => 2,
        LayerOp::GlobalAvgPool => 3,
        LayerOp::FullyConnected { .. } => 4,
        LayerOp::Softmax => 5,
        LayerOp::ResidualAdd { .. } => 6,
    }
}

fn stride_of(op: &LayerOp) -> u8 {
    match op {
        LayerOp::Conv2d { stride, .. } | LayerOp::DepthwiseConv2d { stride, .. } => *stride as u8,
        _ => 1,
    }
}

fn padding_of(op: &LayerOp) -> u8 {
    match op {
        LayerOp::Conv2d { padding, .. } | LayerOp::DepthwiseConv2d { padding, .. } => match padding
        {
            Padding::Same => 0,
            Padding::Valid => 1,
        },
        _ => 0,
    }
}

fn weight_bytes(t: &Tensor) -> Vec<u8> {
    match t.dtype() {
        DType::Real32 => t
            .as_real32()
            .expect("dtype checked")
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::Int8 => t
            .as_int8()
            .expect("dtype checked")
            .iter()
            .map(|&q| q as u8)
            .collect(),
    }
}

fn bias_bytes(b: &Bias) -> Vec<u8> {
    match b {
        Bias::Real(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Bias::Int(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

/// Serialize a model to its container bytes.
pub fn to_bytes(model: &ModelGraph) -> Result<Vec<u8>, ModelIoError> {
    let mut weight_blob = Vec::new();
    let mut bias_blob = Vec::new();
    struct Entry {
        wrank: u8,
        wshape: [u32; 4],
        woff: u64,
        wlen: u64,
        boff: u64,
        blen: u64,
    }
    let mut entries = Vec::with_capacity(model.layers.len());
    let mut weight_qparams: Vec<(u32, QuantParams)> = Vec::new();

    for (idx, layer) in model.layers.iter().enumerate() {
        let mut entry = Entry {
            wrank: 0,
            wshape: [0; 4],
            woff: 0,
            wlen: 0,
            boff: 0,
            blen: 0,
        };
        if let Some(w) = layer.op.weights() {
            let shape = w.shape();
            entry.wrank = shape.len() as u8;
            for (i, &d) in shape.iter().enumerate().take(4) {
                entry.wshape[i] = d as u32;
            }
            let bytes = weight_bytes(w);
            entry.woff = weight_blob.len() as u64;
            entry.wlen = bytes.len() as u64;
            weight_blob.extend_from_slice(&bytes);
            if let Some(qp) = w.qparams() {
                weight_qparams.push((idx as u32, *qp));
            }
        }
        if let Some(b) = layer.op.bias() {
            let bytes = bias_bytes(b);
            entry.boff = bias_blob.len() as u64;
            entry.blen = bytes.len() as u64;
            bias_blob.extend_from_slice(&bytes);
        }
        entries.push(entry);
    }

    let qparam_count = model.activation_qparams.len() + weight_qparams.len();

    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(match model.dtype {
        DType::Real32 => 0,
        DType::Int8 => 1,
    });
    w.u8(0);
    for d in model.input_shape {
        w.u32(d as u32);
    }
    w.u32(model.num_classes as u32);
    w.u32(model.layers.len() as u32);
    w.u32(qparam_count as u32);
    w.u64(bias_blob.len() as u64);
    w.u64(weight_blob.len() as u64);

    for (layer, entry) in model.layers.iter().zip(&entries) {
        w.u8(op_code(&layer.op));
        w.u8(stride_of(&layer.op));
        w.u8(padding_of(&layer.op));
        w.u8(entry.wrank);
        w.u32(layer.input as u32);
        w.u32(layer.output as u32);
        let aux = match layer.op {
            LayerOp::ResidualAdd { rhs } => rhs as u32,
            _ => NO_AUX,
        };
        w.u32(aux);
        for d in entry.wshape {
            w.u32(d);
        }
        w.u64(entry.woff);
        w.u64(entry.wlen);
        w.u64(entry.boff);
        w.u64(entry.blen);
    }

    for (&tid, qp) in &model.activation_qparams {
        w.u8(0);
        w.u32(tid as u32);
        w.f32(qp.scale);
        w.u8(qp.zero_point as u8);
    }
    for (layer_idx, qp) in &weight_qparams {
        w.u8(1);
        w.u32(*layer_idx);
        w.f32(qp.scale);
        w.u8(qp.zero_point as u8);
    }

    w.buf.extend_from_slice(&bias_blob);
    w.buf.extend_from_slice(&weight_blob);
    Ok(w.buf)
}

// ---------------------------------------------------------------- decoding

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelIoError> {
        if self.pos + n > self.buf.len() {
            return Err(parse_err(
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelIoError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32, ModelIoError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

struct RawLayer {
    op: u8,
    stride: u8,
    padding: u8,
    wrank: u8,
    input: u32,
    output: u32,
    aux: u32,
    wshape: [u32; 4],
    woff: u64,
    wlen: u64,
    boff: u64,
    blen: u64,
}

fn decode_weights(
    dtype: DType,
    shape: Vec<usize>,
    bytes: &[u8],
    qp: Option<QuantParams>,
    offset: usize,
) -> Result<Tensor, ModelIoError> {
    let elems: usize = shape.iter().product();
    match dtype {
        DType::Real32 => {
            if bytes.len() != elems * 4 {
                return Err(parse_err(
                    offset,
                    format!(
                        "weight blob slice is {} bytes, shape {shape:?} needs {}",
                        bytes.len(),
                        elems * 4
                    ),
                ));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::real32(shape, data).map_err(|e| parse_err(offset, e.to_string()))
        }
        DType::Int8 => {
            if bytes.len() != elems {
                return Err(parse_err(
                    offset,
                    format!(
                        "weight blob slice is {} bytes, shape {shape:?} needs {elems}",
                        bytes.len()
                    ),
                ));
            }
            let qp = qp.ok_or_else(|| parse_err(offset, "int8 weights missing quant params"))?;
            let data = bytes.iter().map(|&b| b as i8).collect();
            Tensor::int8(shape, data, qp).map_err(|e| parse_err(offset, e.to_string()))
        }
    }
}

fn decode_bias(dtype: DType, bytes: &[u8], offset: usize) -> Result<Bias, ModelIoError> {
    if bytes.len() % 4 != 0 {
        return Err(parse_err(offset, "bias blob slice not a multiple of 4"));
    }
    let vals = bytes.chunks_exact(4);
    Ok(match dtype {
        DType::Real32 => Bias::Real(
            vals.map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::Int8 => Bias::Int(
            vals.map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    })
}

/// Parse a model from container bytes.
pub fn from_bytes(buf: &[u8]) -> Result<ModelGraph, ModelIoError> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(parse_err(
            0,
            format!("bad magic {magic:02x?}, expected \"TWNG\""),
        ));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(parse_err(
            4,
            format!("unsupported format version {version}"),
        ));
    }
    let dtype = match r.u8("dtype")? {
        0 => DType::Real32,
        1 => DType::Int8,
        other => return Err(parse_err(6, format!("unknown dtype flag {other}"))),
    };
    r.u8("reserved")?;
    let mut input_shape = [0usize; 4];
    for d in &mut input_shape {
        *d = r.u32("input shape")? as usize;
    }
    let num_classes = r.u32("class count")? as usize;
    let layer_count = r.u32("layer count")? as usize;
    let qparam_count = r.u32("qparam count")? as usize;
    let bias_blob_len = r.u64("bias blob length")? as usize;
    let weight_blob_len = r.u64("weight blob length")? as usize;

    let mut raws = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let what = format!("layer {i}");
        let mut raw = RawLayer {
            op: r.u8(&what)?,
            stride: r.u8(&what)?,
            padding: r.u8(&what)?,
            wrank: r.u8(&what)?,
            input: r.u32(&what)?,
            output: r.u32(&what)?,
            aux: r.u32(&what)?,
            wshape: [0; 4],
            woff: 0,
            wlen: 0,
            boff: 0,
            blen: 0,
        };
        for d in &mut raw.wshape {
            *d = r.u32(&what)?;
        }
        raw.woff = r.u64(&what)?;
        raw.wlen = r.u64(&what)?;
        raw.boff = r.u64(&what)?;
        raw.blen = r.u64(&what)?;
        raws.push(raw);
    }

    let mut activation_qparams = BTreeMap::new();
    let mut weight_qparams: BTreeMap<u32, QuantParams> = BTreeMap::new();
    for i in 0..qparam_count {
        let what = format!("qparam {i}");
        let kind = r.u8(&what)?;
        let id = r.u32(&what)?;
        let scale = r.f32(&what)?;
        let zero_point = r.u8(&what)? as i8;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(parse_err(
                r.pos,
                format!("qparam {i} has invalid scale {scale}"),
            ));
        }
        let qp = QuantParams { scale, zero_point };
        match kind {
            0 => {
                activation_qparams.insert(id as TensorId, qp);
            }
            1 => {
                weight_qparams.insert(id, qp);
            }
            other => return Err(parse_err(r.pos, format!("unknown qparam kind {other}"))),
        }
    }

    let bias_base = r.pos;
    let bias_blob = r.take(bias_blob_len, "bias blob")?;
    let weight_base = r.pos;
    let weight_blob = r.take(weight_blob_len, "weight blob")?;
    if r.pos != buf.len() {
        return Err(parse_err(
            r.pos,
            format!("{} trailing bytes", buf.len() - r.pos),
        ));
    }

    let mut layers = Vec::with_capacity(layer_count);
    for (idx, raw) in raws.iter().enumerate() {
        let wshape: Vec<usize> = raw.wshape[..raw.wrank as usize]
            .iter()
            .map(|&d| d as usize)
            .collect();
        let weight_slice = |off: u64, len: u64| -> Result<&[u8], ModelIoError> {
            let (off, len) = (off as usize, len as usize);
            if off + len > weight_blob.len() {
                return Err(parse_err(
                    weight_base + off.min(weight_blob.len()),
                    format!("layer {idx} weight slice out of bounds"),
                ));
            }
            Ok(&weight_blob[off..off + len])
        };
        let bias_slice = |off: u64, len: u64| -> Result<&[u8], ModelIoError> {
            let (off, len) = (off as usize, len as usize);
            if off + len > bias_blob.len() {
                return Err(parse_err(
                    bias_base + off.min(bias_blob.len()),
                    format!("layer {idx} bias slice out of bounds"),
                ));
            }
            Ok(&bias_blob[off..off + len])
        };
        let padding = match raw.padding {
            0 => Padding::Same,
            1 => Padding::Valid,
            other => {
                return Err(parse_err(
                    weight_base,
                    format!("layer {idx} unknown padding {other}"),
                ))
            }
        };
        let stride = raw.stride as usize;
        let conv_parts = || -> Result<(Tensor, Bias), ModelIoError> {
            let w = decode_weights(
                dtype,
                wshape.clone(),
                weight_slice(raw.woff, raw.wlen)?,
                weight_qparams.get(&(idx as u32)).copied(),
                weight_base + raw.woff as usize,
            )?;
            let b = decode_bias(
                dtype,
                bias_slice(raw.boff, raw.blen)?,
                bias_base + raw.boff as usize,
            )?;
            Ok((w, b))
        };
        let op = match raw.op {
            0 => {
                let (weights, bias) = conv_parts()?;
                LayerOp::Conv2d {
                    weights,
                    bias,
                    stride,
                    padding,
                }
            }
            1 => {
                let (weights, bias) = conv_parts()?;
                LayerOp::DepthwiseConv2d {
                    weights,
                    bias,
                    stride,
                    padding,
                }
            }
            2 => LayerOp::Relu6,
            3 => LayerOp::GlobalAvgPool,
            4 => {
                let (weights, bias) = conv_parts()?;
                LayerOp::FullyConnected { weights, bias }
            }
            5 => LayerOp::Softmax,
            6 => {
                if raw.aux == NO_AUX {
                    return Err(parse_err(
                        weight_base,
                        format!("layer {idx} residual missing rhs"),
                    ));
                }
                LayerOp::ResidualAdd {
                    rhs: raw.aux as TensorId,
                }
            }
            other => {
                return Err(parse_err(
                    weight_base,
                    format!("layer {idx} unknown op code {other}"),
                ))
            }
        };
        layers.push(Layer {
            op,
            input: raw.input as TensorId,
            output: raw.output as TensorId,
        });
    }

    let model = ModelGraph {
        layers,
        dtype,
        input_shape,
        num_classes,
        activation_qparams,
    };
    model
        .validate()
        .map_err(|e| parse_err(buf.len(), format!("decoded graph invalid: {e}")))?;
    Ok(model)
}

/// Write the container to disk.
pub fn save(model: &ModelGraph, path: &Path) -> Result<(), ModelIoError> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a container from disk.
pub fn load(path: &Path) -> Result<ModelGraph, ModelIoError> {
    let bytes = fs::read(path).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

/// Plain-text graph dump, one layer per line, for structural golden tests.
pub fn dump_text(model: &ModelGraph) -> String {
    let mut out = String::new();
    for layer in &model.layers {
        let mut line = format!(
            "{} in={} out={}",
            layer.op.name(),
            layer.input,
            layer.output
        );
        if let LayerOp::ResidualAdd { rhs } = layer.op {
            line.push_str(&format!(" rhs={rhs}"));
        }
        if let Some(w) = layer.op.weights() {
            let dims: Vec<String> = w.shape().iter().map(|d| d.to_string()).collect();
            line.push_str(&format!(" w=[{}]", dims.join(",")));
        }
        match &layer.op {
            LayerOp::Conv2d {
                stride, padding, ..
            }
            | LayerOp::DepthwiseConv2d {
                stride, padding, ..
            } => {
                line.push_str(&format!(" stride={stride} pad={}", padding.name()));
            }
            _ => {}
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_mobilenet_v2;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = build_mobilenet_v2(0.35, 96, 2, 7).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(model, back);
        // and byte-stable through a second pass
        assert_eq!(bytes, to_bytes(&back).unwrap());
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let model = build_mobilenet_v2(0.35, 96, 2, 7).unwrap();
        let bytes = to_bytes(&model).unwrap();
        for cut in [0, 3, 7, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, ModelIoError::Parse { .. }),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn bad_magic_is_rejected_with_offset() {
        let model = build_mobilenet_v2(0.35, 96, 2, 7).unwrap();
        let mut bytes = to_bytes(&model).unwrap();
        bytes[0] = b'X';
        match from_bytes(&bytes).unwrap_err() {
            ModelIoError::Parse { offset, what } => {
                assert_eq!(offset, 0);
                assert!(what.contains("magic"), "{what}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_version_is_rejected() {
        let model = build_mobilenet_v2(0.35, 96, 2, 7).unwrap();
        let mut bytes = to_bytes(&model).unwrap();
        bytes[4] = 0xEE;
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn dump_text_is_stable_and_complete() {
        let model = build_mobilenet_v2(0.35, 96, 2, 7).unwrap();
        let dump = dump_text(&model);
        assert_eq!(dump.lines().count(), model.layers.len());
        assert!(dump.starts_with("conv2d in=0 out=1 w=[16,3,3,3] stride=2 pad=same"));
        let n = model.layers.len();
        assert!(dump
            .trim_end()
            .ends_with(&format!("softmax in={} out={}", n - 1, n)));
    }
}
