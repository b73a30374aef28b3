use alloc::format;

use super::{AlignedAction, ArmAction, DataError, Episode};
use crate::geometry::{rot6d_encode, RotationMatrix};

/// Raw grippers at or above this value (on their `[0, 1]` range) are closed.
pub const GRIPPER_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RotationConvention {
    /// One angle about +z.
    Heading,
    /// Intrinsic yaw, pitch, roll: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    EulerZyx,
}

impl RotationConvention {
    fn width(self) -> usize {
        match self {
            RotationConvention::Heading => 1,
            RotationConvention::EulerZyx => 3,
        }
    }

    fn to_matrix(self, r: &[f64]) -> RotationMatrix {
        match self {
            RotationConvention::Heading => RotationMatrix::about_z(r[0]),
            RotationConvention::EulerZyx => {
                let rz = RotationMatrix::about_z(r[0]);
                let (sp, cp) = (libm::sin(r[1]), libm::cos(r[1]));
                let ry = RotationMatrix {
                    m: [[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]],
                };
                let (sr, cr) = (libm::sin(r[2]), libm::cos(r[2]));
                let rx = RotationMatrix {
                    m: [[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]],
                };
                rz.mul(&ry).mul(&rx)
            }
        }
    }
}

/// Per-arm raw action layout: `xyz | rotation | gripper`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RawLayout {
    pub arms: usize,
    pub rotation: RotationConvention,
}

impl RawLayout {
    pub fn arm_width(&self) -> usize {
        3 + self.rotation.width() + 1
    }

    pub fn width(&self) -> usize {
        self.arms * self.arm_width()
    }
}

/// Converts every step's raw action into the aligned EEF representation.
pub fn align_episode(ep: &Episode, layout: RawLayout) -> Result<Episode, DataError> {
    let mut out = ep.clone();
    let w = layout.arm_width();
    for (i, step) in out.steps.iter_mut().enumerate() {
        if step.raw_action.len() != layout.width() {
            return Err(DataError::Schema(format!(
                "step {i}: raw action has {} values, layout expects {}",
                step.raw_action.len(),
                layout.width()
            )));
        }
        if step.raw_action.iter().any(|x| !x.is_finite()) {
            return Err(DataError::Schema(format!("step {i}: non-finite raw action")));
        }
        let arms = (0..layout.arms)
            .map(|a| {
                let raw = &step.raw_action[a * w..(a + 1) * w];
                let rot = layout.rotation.to_matrix(&raw[3..w - 1]);
                ArmAction {
                    xyz: [raw[0], raw[1], raw[2]],
                    rot6d: rot6d_encode(&rot),
                    gripper: u8::from(raw[w - 1] >= GRIPPER_THRESHOLD),
                }
            })
            .collect();
        step.action = Some(AlignedAction { arms });
    }
    Ok(out)
}
