//! Demonstration data model: hardware descriptions, episodes, the aligned
//! end-effector action space, anchor chunks, normalization and the
//! heterogeneous mixture sampler.

use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::Rot6D;

mod align;
mod chunk;
mod mixture;
mod norm;

pub use align::{align_episode, RawLayout, RotationConvention, GRIPPER_THRESHOLD};
pub use chunk::{anchor_indices, extract_chunk, ChunkSpec};
pub use mixture::{Draw, MixtureSampler, MixtureSpec};
pub use norm::{compute_norm_stats, DomainNorm, NormStats, STD_FLOOR};

/// Continuous dims per arm: xyz + Rot6D.
pub const ARM_CONT_DIM: usize = 9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("episode {episode} of domain `{domain}` is invalid: {reason}")]
    InvalidEpisode {
        domain: String,
        episode: usize,
        reason: String,
    },
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("mixture configuration error: {0}")]
    Config(String),
}

/// One data source: embodiment, cameras and control interface.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct HardwareConfig {
    pub domain_id: String,
    pub embodiment_name: String,
    pub num_arms: usize,
    /// Joints per arm.
    pub dof: usize,
    pub proprio_dim: usize,
    pub control_freq_hz: f64,
    /// Ordered view names; the first one is the main view.
    pub views: Vec<String>,
    /// Feature length of each view, aligned with `views`.
    pub view_dims: Vec<usize>,
    pub description_text: String,
}

impl HardwareConfig {
    pub fn cont_dim(&self) -> usize {
        ARM_CONT_DIM * self.num_arms
    }

    pub fn grip_dim(&self) -> usize {
        self.num_arms
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.views.is_empty() {
            return Err(DataError::Schema(alloc::format!(
                "domain `{}` has no views",
                self.domain_id
            )));
        }
        if self.views.len() != self.view_dims.len() {
            return Err(DataError::Schema(alloc::format!(
                "domain `{}`: {} views but {} view dims",
                self.domain_id,
                self.views.len(),
                self.view_dims.len()
            )));
        }
        if !(1..=2).contains(&self.num_arms) {
            return Err(DataError::Schema(alloc::format!(
                "domain `{}`: num_arms must be 1 or 2",
                self.domain_id
            )));
        }
        if !(self.control_freq_hz > 0.0 && self.control_freq_hz.is_finite()) {
            return Err(DataError::Schema(alloc::format!(
                "domain `{}`: control frequency must be positive",
                self.domain_id
            )));
        }
        Ok(())
    }
}

/// End-effector command for one arm.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArmAction {
    pub xyz: [f64; 3],
    pub rot6d: Rot6D,
    pub gripper: u8,
}

impl ArmAction {
    pub fn continuous(&self) -> [f64; ARM_CONT_DIM] {
        let mut out = [0.0; ARM_CONT_DIM];
        out[..3].copy_from_slice(&self.xyz);
        out[3..].copy_from_slice(&self.rot6d.v);
        out
    }

    pub fn from_parts(cont: &[f64], gripper: u8) -> Self {
        let mut xyz = [0.0; 3];
        xyz.copy_from_slice(&cont[..3]);
        let mut v = [0.0; 6];
        v.copy_from_slice(&cont[3..ARM_CONT_DIM]);
        ArmAction {
            xyz,
            rot6d: Rot6D { v },
            gripper,
        }
    }
}

/// Aligned action: one [`ArmAction`] per arm.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlignedAction {
    pub arms: Vec<ArmAction>,
}

impl AlignedAction {
    pub fn continuous(&self) -> Vec<f64> {
        self.arms.iter().flat_map(|a| a.continuous()).collect()
    }

    pub fn grippers(&self) -> Vec<u8> {
        self.arms.iter().map(|a| a.gripper).collect()
    }

    pub fn is_valid(&self) -> bool {
        self.arms.iter().all(|a| {
            a.gripper <= 1
                && a.xyz.iter().all(|x| x.is_finite())
                && crate::geometry::rot6d_decode(&a.rot6d).is_ok()
        })
    }
}

/// `K` anchor actions summarizing the upcoming horizon.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActionChunk {
    pub anchors: Vec<AlignedAction>,
}

impl ActionChunk {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Row-major `K x cont_dim` continuous block.
    pub fn continuous(&self) -> Vec<f64> {
        self.anchors.iter().flat_map(|a| a.continuous()).collect()
    }

    /// Row-major `K x grip_dim` gripper labels.
    pub fn grippers(&self) -> Vec<u8> {
        self.anchors.iter().flat_map(|a| a.grippers()).collect()
    }

    pub fn from_flat(cont: &[f64], grip: &[u8], k: usize, arms: usize) -> Self {
        let anchors = (0..k)
            .map(|j| AlignedAction {
                arms: (0..arms)
                    .map(|a| {
                        let off = (j * arms + a) * ARM_CONT_DIM;
                        ArmAction::from_parts(&cont[off..off + ARM_CONT_DIM], grip[j * arms + a])
                    })
                    .collect(),
            })
            .collect();
        ActionChunk { anchors }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Step {
    /// One feature vector per view, ordered as [`HardwareConfig::views`].
    pub obs: Vec<Vec<f64>>,
    pub proprio: Vec<f64>,
    pub task_id: u32,
    pub raw_action: Vec<f64>,
    /// Filled by [`align_episode`].
    pub action: Option<AlignedAction>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodeMeta {
    pub seed: u64,
    pub task_id: u32,
    /// Flattened task description (goal coordinates, gripper requirements).
    pub task_params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Episode {
    pub domain_id: String,
    pub steps: Vec<Step>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Structural checks against the domain's hardware description.
    pub fn validate(&self, hw: &HardwareConfig, index: usize) -> Result<(), DataError> {
        let bad = |reason: String| DataError::InvalidEpisode {
            domain: hw.domain_id.clone(),
            episode: index,
            reason,
        };
        if self.domain_id != hw.domain_id {
            return Err(bad(alloc::format!("belongs to `{}`", self.domain_id)));
        }
        if self.steps.len() < 2 {
            return Err(bad("fewer than 2 steps".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.obs.len() != hw.views.len() {
                return Err(bad(alloc::format!("step {i}: {} views, expected {}", s.obs.len(), hw.views.len())));
            }
            for (v, (feat, &dim)) in s.obs.iter().zip(&hw.view_dims).enumerate() {
                if feat.len() != dim {
                    return Err(bad(alloc::format!("step {i}: view {v} has dim {}, expected {dim}", feat.len())));
                }
            }
            if s.proprio.len() != hw.proprio_dim {
                return Err(bad(alloc::format!("step {i}: proprio dim {}", s.proprio.len())));
            }
            let finite = s.obs.iter().flatten().chain(&s.proprio).chain(&s.raw_action).all(|x| x.is_finite());
            if !finite {
                return Err(bad(alloc::format!("step {i}: non-finite value")));
            }
        }
        Ok(())
    }
}

/// All episodes of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub hardware: HardwareConfig,
    pub episodes: Vec<Episode>,
}
