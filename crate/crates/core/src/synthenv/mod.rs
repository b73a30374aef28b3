//! Synthetic heterogeneous-embodiment suite: planar kinematic chains with
//! differing DoF, cameras, control rates and arm counts, scripted experts
//! and closed-loop rollouts.
//!
//! The world is planar and lifted to 3D actions (`z = 0`, rotation about
//! `+z`). Control is in end-effector space so one aligned action space
//! drives every embodiment.

use alloc::string::String;
use alloc::vec::Vec;

use libm::{cos, sin};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{AlignedAction, RawLayout, RotationConvention};
use crate::geometry::rot6d_decode;

mod expert;
mod kinematics;
mod rollout;
mod suite;

pub use expert::{replay_success, scripted_expert, ExpertConfig, ExpertController};
pub use kinematics::{wrap_angle, EefPose, PlanarChain};
pub use rollout::{rollout, Observation, RolloutResult};
pub use suite::{demo_dataset, demo_episode, held_out_embodiment, make_suite, sample_task, suite_mixture, Embodiment, SUITE_WEIGHTS};

/// Workspace units per second.
pub const V_MAX: f64 = 1.0;
/// Success / grasp tolerance in workspace units.
pub const EPS_GOAL: f64 = 0.05;
/// Heading slew limit, radians per second.
pub const OMEGA_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("joint angles outside limits")]
    JointLimits,
    #[error("unknown view `{0}`")]
    UnknownView(String),
    #[error("task unreachable: {0}")]
    Unreachable(String),
    #[error("expert failed to finish within {0} steps")]
    ExpertTimeout(usize),
}

/// 2D similarity transform `p' = scale * R(theta) * p + translation`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraView {
    pub name: String,
    pub theta: f64,
    pub translation: [f64; 2],
    pub scale: f64,
}

impl CameraView {
    pub fn project(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = (sin(self.theta), cos(self.theta));
        [
            self.scale * (c * p[0] - s * p[1]) + self.translation[0],
            self.scale * (s * p[0] + c * p[1]) + self.translation[1],
        ]
    }
}

/// Demonstrator idiosyncrasies of one data source. These are invisible in
/// any single observation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpertStyle {
    /// Cruise speed as a fraction of [`V_MAX`].
    pub speed_frac: f64,
    /// Lateral bulge of transfer paths relative to their length.
    pub arc_bulge: f64,
    /// Preferred heading relative to the base-to-EEF bearing.
    pub heading_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmbodimentSpec {
    /// One chain per arm; all arms share link lengths.
    pub arms: Vec<PlanarChain>,
    pub control_freq_hz: f64,
    /// First view is the main view.
    pub views: Vec<CameraView>,
    pub sigma_obs: f64,
    pub gripper: bool,
    pub style: ExpertStyle,
    pub home: Vec<f64>,
}

impl EmbodimentSpec {
    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn dof(&self) -> usize {
        self.arms[0].dof()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.control_freq_hz
    }

    /// Keypoints per view: chain points of every arm, then each arm's
    /// object and target.
    pub fn keypoints_per_view(&self) -> usize {
        self.num_arms() * (self.dof() + 1) + 2 * self.num_arms()
    }

    pub fn view_dim(&self) -> usize {
        2 * self.keypoints_per_view()
    }

    /// Joints, EEF xy, gripper and held flag per arm.
    pub fn proprio_dim(&self) -> usize {
        self.num_arms() * (self.dof() + 4)
    }

    pub fn raw_layout(&self) -> RawLayout {
        RawLayout {
            arms: self.num_arms(),
            rotation: RotationConvention::Heading,
        }
    }

    pub fn view_index(&self, view: &str) -> Result<usize, SimError> {
        self.views
            .iter()
            .position(|v| v.name == view)
            .ok_or_else(|| SimError::UnknownView(view.into()))
    }

    pub fn initial_state(&self, task: &Task) -> WorldState {
        WorldState {
            joints: self.arms.iter().map(|_| self.home.clone()).collect(),
            gripper: alloc::vec![0; self.num_arms()],
            held: alloc::vec![false; self.num_arms()],
            objects: task.arms.iter().map(|a| a.object).collect(),
        }
    }
}

/// Pick-and-place goals for one arm.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArmTask {
    /// Grasp here (gripper closed).
    pub object: [f64; 2],
    /// Release here (gripper open).
    pub target: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Task {
    pub task_id: u32,
    pub arms: Vec<ArmTask>,
    pub eps_goal: f64,
}

impl Task {
    /// Goal waypoints per arm with their required gripper state.
    pub fn waypoints(&self) -> Vec<Vec<([f64; 2], u8)>> {
        self.arms
            .iter()
            .map(|a| alloc::vec![(a.object, 1), (a.target, 0)])
            .collect()
    }

    pub fn to_params(&self) -> Vec<f64> {
        self.arms
            .iter()
            .flat_map(|a| [a.object[0], a.object[1], a.target[0], a.target[1]])
            .collect()
    }

    pub fn from_params(task_id: u32, params: &[f64]) -> Task {
        Task {
            task_id,
            arms: params
                .chunks_exact(4)
                .map(|c| ArmTask {
                    object: [c[0], c[1]],
                    target: [c[2], c[3]],
                })
                .collect(),
            eps_goal: EPS_GOAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorldState {
    pub joints: Vec<Vec<f64>>,
    pub gripper: Vec<u8>,
    pub held: Vec<bool>,
    /// Current object position per arm.
    pub objects: Vec<[f64; 2]>,
}

impl WorldState {
    pub fn eef(&self, spec: &EmbodimentSpec, arm: usize) -> EefPose {
        spec.arms[arm].fk_unchecked(&self.joints[arm])
    }

    /// Every object released within tolerance of its target.
    pub fn success(&self, spec: &EmbodimentSpec, task: &Task) -> bool {
        let _ = spec;
        task.arms.iter().enumerate().all(|(a, t)| {
            let o = self.objects[a];
            !self.held[a] && libm::hypot(o[0] - t.target[0], o[1] - t.target[1]) <= task.eps_goal
        })
    }

    pub fn proprio(&self, spec: &EmbodimentSpec) -> Vec<f64> {
        let mut out = Vec::with_capacity(spec.proprio_dim());
        for a in 0..spec.num_arms() {
            out.extend_from_slice(&self.joints[a]);
            let p = self.eef(spec, a);
            out.extend_from_slice(&p.xy);
            out.push(self.gripper[a] as f64);
            out.push(if self.held[a] { 1.0 } else { 0.0 });
        }
        out
    }
}

/// Noisy projected keypoints for one view.
pub fn observe<R: Rng + ?Sized>(
    spec: &EmbodimentSpec,
    state: &WorldState,
    task: &Task,
    view: &str,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    let cam = &spec.views[spec.view_index(view)?];
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(spec.keypoints_per_view());
    for (a, chain) in spec.arms.iter().enumerate() {
        pts.extend(chain.points(&state.joints[a]));
    }
    for (a, t) in task.arms.iter().enumerate() {
        pts.push(state.objects[a]);
        pts.push(t.target);
    }
    let mut out = Vec::with_capacity(2 * pts.len());
    for p in pts {
        let q = cam.project(p);
        for v in q {
            let noise = if spec.sigma_obs > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                spec.sigma_obs * z
            } else {
                0.0
            };
            out.push(v + noise);
        }
    }
    Ok(out)
}

/// One control step toward an aligned action. Per-arm EEF displacement is
/// clamped to `V_MAX / freq`; the gripper takes the commanded state.
pub fn step(spec: &EmbodimentSpec, state: &WorldState, action: &AlignedAction, task: &Task) -> WorldState {
    step_with_gripper(spec, state, action, task, true)
}

/// Like [`step`], optionally leaving the gripper untouched.
pub fn step_with_gripper(
    spec: &EmbodimentSpec,
    state: &WorldState,
    action: &AlignedAction,
    task: &Task,
    apply_gripper: bool,
) -> WorldState {
    let mut next = state.clone();
    let max_step = V_MAX / spec.control_freq_hz;
    let max_turn = OMEGA_MAX / spec.control_freq_hz;
    for (a, chain) in spec.arms.iter().enumerate() {
        let Some(cmd) = action.arms.get(a) else { continue };
        if cmd.xyz.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let cur = chain.fk_unchecked(&state.joints[a]);
        let d = [cmd.xyz[0] - cur.xy[0], cmd.xyz[1] - cur.xy[1]];
        let dist = libm::hypot(d[0], d[1]);
        let target = if dist > max_step {
            [cur.xy[0] + d[0] * max_step / dist, cur.xy[1] + d[1] * max_step / dist]
        } else {
            [cmd.xyz[0], cmd.xyz[1]]
        };
        let heading = rot6d_decode(&cmd.rot6d).map(|r| r.heading()).unwrap_or(cur.heading);
        let heading = cur.heading + wrap_angle(heading - cur.heading);
        chain.resolve(&mut next.joints[a], target, heading, max_turn);
        if apply_gripper && spec.gripper {
            let g = cmd.gripper.min(1);
            let eef = chain.fk_unchecked(&next.joints[a]).xy;
            if g == 1 && state.gripper[a] == 0 && !state.held[a] {
                let o = state.objects[a];
                if libm::hypot(o[0] - eef[0], o[1] - eef[1]) <= task.eps_goal {
                    next.held[a] = true;
                }
            }
            if g == 0 && state.held[a] {
                next.held[a] = false;
            }
            next.gripper[a] = g;
        }
        if next.held[a] {
            next.objects[a] = chain.fk_unchecked(&next.joints[a]).xy;
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ArmAction;
    use crate::geometry::{rot6d_encode, RotationMatrix};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn command(xy: [f64; 2], heading: f64, gripper: u8) -> AlignedAction {
        AlignedAction {
            arms: vec![ArmAction {
                xyz: [xy[0], xy[1], 0.0],
                rot6d: rot6d_encode(&RotationMatrix::about_z(heading)),
                gripper,
            }],
        }
    }

    fn setup() -> (EmbodimentSpec, Task, WorldState) {
        let suite = make_suite(0);
        let spec = suite[1].spec.clone();
        let task = sample_task(&spec, 0, &mut ChaCha8Rng::seed_from_u64(1));
        let state = spec.initial_state(&task);
        (spec, task, state)
    }

    #[test]
    fn commanding_current_pose_is_a_fixed_point() {
        let (spec, task, state) = setup();
        let p = state.eef(&spec, 0);
        let next = step(&spec, &state, &command(p.xy, p.heading, 0), &task);
        for (a, b) in next.joints[0].iter().zip(&state.joints[0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(next.gripper, state.gripper);
    }

    #[test]
    fn distant_command_moves_exactly_the_speed_limit() {
        let (spec, task, state) = setup();
        let p = state.eef(&spec, 0);
        let next = step(&spec, &state, &command([p.xy[0] - 0.5, p.xy[1] - 0.2], p.heading, 0), &task);
        let q = next.eef(&spec, 0);
        let moved = libm::hypot(q.xy[0] - p.xy[0], q.xy[1] - p.xy[1]);
        assert!((moved - V_MAX / spec.control_freq_hz).abs() < 1e-9, "{moved}");
    }

    #[test]
    fn repeated_steps_converge_to_reachable_pose() {
        let (spec, task, mut state) = setup();
        let goal = task.arms[0].object;
        let mut n = 0;
        while libm::hypot(state.eef(&spec, 0).xy[0] - goal[0], state.eef(&spec, 0).xy[1] - goal[1]) > EPS_GOAL {
            let before = state.eef(&spec, 0).xy;
            state = step(&spec, &state, &command(goal, 1.0, 0), &task);
            let after = state.eef(&spec, 0).xy;
            assert!(libm::hypot(after[0] - before[0], after[1] - before[1]) <= V_MAX / spec.control_freq_hz + 1e-9);
            n += 1;
            assert!(n < 1000, "did not converge");
        }
    }

    #[test]
    fn observe_identity_camera_without_noise_gives_raw_keypoints() {
        let (mut spec, task, state) = setup();
        spec.sigma_obs = 0.0;
        spec.views[0] = CameraView {
            name: spec.views[0].name.clone(),
            theta: 0.0,
            translation: [0.0, 0.0],
            scale: 1.0,
        };
        let name = spec.views[0].name.clone();
        let obs = observe(&spec, &state, &task, &name, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pts = spec.arms[0].points(&state.joints[0]);
        assert_eq!(obs.len(), spec.view_dim());
        assert_eq!(&obs[..2], &pts[0]);
        assert_eq!(&obs[2 * spec.dof()..2 * spec.dof() + 2], &pts[spec.dof()]);

        // A half-turn camera negates every coordinate.
        spec.views[0].theta = core::f64::consts::PI;
        let flipped = observe(&spec, &state, &task, &name, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in flipped.iter().zip(&obs) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn observation_noise_is_seeded() {
        let (spec, task, state) = setup();
        let name = spec.views[0].name.clone();
        let a = observe(&spec, &state, &task, &name, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = observe(&spec, &state, &task, &name, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = observe(&spec, &state, &task, &name, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(
            observe(&spec, &state, &task, "nope", &mut ChaCha8Rng::seed_from_u64(5)),
            Err(SimError::UnknownView(_))
        ));
    }

    #[test]
    fn grasp_and_release_move_the_object() {
        let (spec, task, mut state) = setup();
        let obj = task.arms[0].object;
        for _ in 0..500 {
            state = step(&spec, &state, &command(obj, 1.0, 0), &task);
        }
        state = step(&spec, &state, &command(obj, 1.0, 1), &task);
        assert!(state.held[0]);
        let tgt = task.arms[0].target;
        for _ in 0..500 {
            state = step(&spec, &state, &command(tgt, 1.0, 1), &task);
        }
        assert!(!state.success(&spec, &task));
        state = step(&spec, &state, &command(tgt, 1.0, 0), &task);
        assert!(!state.held[0]);
        assert!(state.success(&spec, &task));
    }
}
