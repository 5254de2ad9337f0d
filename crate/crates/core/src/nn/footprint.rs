//! Flash and RAM accounting.
//!
//! Flash is the serialized container size. RAM peak is the largest number of
//! activation bytes simultaneously live under the sequential execution
//! schedule: a buffer is live from the step that produces it until the step
//! of its last consumer. Weights live in flash and are not counted.

use super::{io, ModelGraph, NnError};

/// Flash/RAM footprint of a model under its execution schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryFootprint {
    pub flash_bytes: usize,
    pub ram_peak_bytes: usize,
}

/// Byte size of every activation tensor.
fn activation_bytes(model: &ModelGraph) -> Result<Vec<usize>, NnError> {
    let shapes = model.activation_shapes()?;
    let dtypes = model.activation_dtypes();
    Ok(shapes
        .iter()
        .zip(dtypes)
        .map(|(shape, dtype)| shape.iter().product::<usize>() * dtype.byte_width())
        .collect())
}

/// Production step and last-consumer step for every tensor id. The input
/// counts as produced at step 0; an unconsumed tensor (the graph output)
/// lives exactly through its producing step.
fn live_intervals(model: &ModelGraph) -> (Vec<usize>, Vec<usize>) {
    let n = model.tensor_count();
    let mut produced = vec![0usize; n];
    let mut last_use = vec![0usize; n];
    for (step, layer) in model.layers.iter().enumerate() {
        produced[layer.output] = step;
        last_use[layer.output] = step;
        for used in layer.op.consumed_ids(layer.input) {
            last_use[used] = last_use[used].max(step);
        }
    }
    (produced, last_use)
}

/// Peak concurrent activation bytes by liveness analysis over the schedule.
pub fn ram_peak_bytes(model: &ModelGraph) -> Result<usize, NnError> {
    let sizes = activation_bytes(model)?;
    let (produced, last_use) = live_intervals(model);
    let steps = model.layers.len();
    let mut peak = 0usize;
    for step in 0..steps {
        let mut live = 0usize;
        for tid in 0..model.tensor_count() {
            if produced[tid] <= step && step <= last_use[tid] {
                live += sizes[tid];
            }
        }
        peak = peak.max(live);
    }
    if steps == 0 {
        peak = sizes.first().copied().unwrap_or(0);
    }
    Ok(peak)
}

/// Reference brute-force simulator: materializes a buffer per tensor,
/// frees it after its last consumer runs, and scans the running total at
/// every step. Kept deliberately independent of `ram_peak_bytes` as its
/// oracle.
pub fn ram_peak_reference(model: &ModelGraph) -> Result<usize, NnError> {
    let sizes = activation_bytes(model)?;
    let mut remaining_uses = vec![0usize; model.tensor_count()];
    for layer in &model.layers {
        for used in layer.op.consumed_ids(layer.input) {
            remaining_uses[used] += 1;
        }
    }

    let mut buffers: Vec<Option<Vec<u8>>> = vec![None; model.tensor_count()];
    buffers[0] = Some(vec![0u8; sizes[0]]);
    let total = |bufs: &[Option<Vec<u8>>]| -> usize { bufs.iter().flatten().map(Vec::len).sum() };
    let mut peak = total(&buffers);
    for layer in &model.layers {
        buffers[layer.output] = Some(vec![0u8; sizes[layer.output]]);
        peak = peak.max(total(&buffers));
        for used in layer.op.consumed_ids(layer.input) {
            remaining_uses[used] -= 1;
            if remaining_uses[used] == 0 {
                buffers[used] = None;
            }
        }
        // the freshly produced buffer dies immediately if nothing reads it
        // and it is not scanned again; peak already accounted for this step
        if remaining_uses[layer.output] == 0 {
            buffers[layer.output] = None;
        }
    }
    Ok(peak)
}

/// Full footprint: serialized size plus activation liveness peak.
pub fn memory_footprint(model: &ModelGraph) -> Result<MemoryFootprint, NnError> {
    let flash_bytes = io::to_bytes(model)
        .map_err(|e| NnError::Malformed(format!("serialization failed: {e}")))?
        .len();
    Ok(MemoryFootprint {
        flash_bytes,
        ram_peak_bytes: ram_peak_bytes(model)?,
    })
}
