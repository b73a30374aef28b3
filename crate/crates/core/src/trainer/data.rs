//! Turning episodes into flow-matching samples.

use alloc::vec::Vec;

use crate::dataset::{extract_chunk, ChunkSpec, DomainDataset, DomainNorm};
use crate::flow::Conditioning;

/// Conditioning plus a normalized target chunk and its gripper labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cond: Conditioning,
    /// `K x cont_dim`, normalized.
    pub target: Vec<f64>,
    /// `K x grip_dim`, each 0 or 1.
    pub labels: Vec<f64>,
}

/// Sample anchored at `step` of `episode`; `domain` is the model's
/// registry index for this dataset.
pub fn make_sample(ds: &DomainDataset, episode: usize, step: usize, domain: usize, norm: &DomainNorm, chunk: ChunkSpec) -> Sample {
    let ep = &ds.episodes[episode];
    let st = &ep.steps[step];
    let c = extract_chunk(ep, step, ds.hardware.control_freq_hz, chunk);
    let mut target = c.continuous();
    norm.apply(&mut target);
    Sample {
        cond: Conditioning {
            domain,
            views: st.obs.clone(),
            proprio: st.proprio.clone(),
            task_id: st.task_id as usize,
        },
        target,
        labels: c.grippers().into_iter().map(f64::from).collect(),
    }
}

/// Every `stride`-th step of every episode.
pub fn strided_samples(ds: &DomainDataset, domain: usize, norm: &DomainNorm, chunk: ChunkSpec, stride: usize) -> Vec<Sample> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for (e, ep) in ds.episodes.iter().enumerate() {
        for n in (0..ep.steps.len()).step_by(stride) {
            out.push(make_sample(ds, e, n, domain, norm, chunk));
        }
    }
    out
}

/// Moves the last `n_val` episodes into a held-out dataset.
pub fn split_holdout(ds: &DomainDataset, n_val: usize) -> (DomainDataset, DomainDataset) {
    let n_val = n_val.min(ds.episodes.len().saturating_sub(1));
    let cut = ds.episodes.len() - n_val;
    (
        DomainDataset {
            hardware: ds.hardware.clone(),
            episodes: ds.episodes[..cut].to_vec(),
        },
        DomainDataset {
            hardware: ds.hardware.clone(),
            episodes: ds.episodes[cut..].to_vec(),
        },
    )
}
