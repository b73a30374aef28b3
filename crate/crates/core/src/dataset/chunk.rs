use alloc::vec::Vec;

use super::{ActionChunk, Episode};

/// Anchor downsampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ChunkSpec {
    pub horizon_s: f64,
    pub anchors: usize,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        ChunkSpec {
            horizon_s: 4.0,
            anchors: 30,
        }
    }
}

impl ChunkSpec {
    /// Control steps covered by one anchor interval (at least one).
    pub fn steps_per_anchor(&self, freq_hz: f64) -> usize {
        (libm::floor(self.horizon_s * freq_hz / self.anchors as f64 + 0.5) as usize).max(1)
    }
}

/// `n + round_half_up(j * horizon * freq / K)` for `j = 1..=K`, clamped to
/// the last step.
pub fn anchor_indices(n: usize, len: usize, freq_hz: f64, spec: ChunkSpec) -> Vec<usize> {
    let k = spec.anchors as f64;
    (1..=spec.anchors)
        .map(|j| {
            let off = libm::floor(j as f64 * spec.horizon_s * freq_hz / k + 0.5) as usize;
            (n + off).min(len.saturating_sub(1))
        })
        .collect()
}

/// Chunk of aligned actions starting after step `n`; steps past the end
/// repeat the final action.
///
/// Panics if the episode has not been aligned or `n` is out of range.
pub fn extract_chunk(ep: &Episode, n: usize, freq_hz: f64, spec: ChunkSpec) -> ActionChunk {
    assert!(n < ep.steps.len(), "chunk start {n} past episode end");
    let anchors = anchor_indices(n, ep.steps.len(), freq_hz, spec)
        .into_iter()
        .map(|i| {
            ep.steps[i]
                .action
                .clone()
                .expect("extract_chunk requires an aligned episode")
        })
        .collect();
    ActionChunk { anchors }
}
