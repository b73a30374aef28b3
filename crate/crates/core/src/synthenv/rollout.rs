use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{observe, step_with_gripper, EmbodimentSpec, Task, WorldState};
use crate::dataset::{anchor_indices, ActionChunk, ChunkSpec};

/// What a learned policy sees at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// One feature vector per view, main view first.
    pub views: Vec<Vec<f64>>,
    pub proprio: Vec<f64>,
    pub task_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub success: bool,
    pub steps: usize,
    /// World state after every executed control step, starting state first.
    pub trajectory: Vec<WorldState>,
    /// Why the rollout stopped early, if it did.
    pub failure: Option<String>,
}

/// Closed-loop execution. The policy is queried every `replan_every`
/// anchors; anchor `j` is commanded for the control steps between its
/// predecessor's offset and its own. The world state is passed alongside
/// the observation for privileged (scripted) policies; learned policies
/// ignore it.
pub fn rollout<P>(
    mut policy: P,
    spec: &EmbodimentSpec,
    task: &Task,
    chunk: ChunkSpec,
    max_steps: usize,
    replan_every: usize,
    seed: u64,
) -> RolloutResult
where
    P: FnMut(&Observation, &WorldState) -> Option<ActionChunk>,
{
    assert!(max_steps >= 1, "max_steps must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = spec.initial_state(task);
    let offsets = anchor_indices(0, usize::MAX, spec.control_freq_hz, chunk);
    let mut trajectory = alloc::vec![state.clone()];
    let mut steps = 0;
    let finish = |success, steps, trajectory, failure| RolloutResult {
        success,
        steps,
        trajectory,
        failure,
    };
    loop {
        let views = match spec
            .views
            .iter()
            .map(|v| observe(spec, &state, task, &v.name, &mut rng))
            .collect::<Result<Vec<_>, _>>()
        {
            Ok(v) => v,
            Err(e) => return finish(false, steps, trajectory, Some(alloc::format!("{e}"))),
        };
        let obs = Observation {
            views,
            proprio: state.proprio(spec),
            task_id: task.task_id,
        };
        let Some(pred) = policy(&obs, &state) else {
            return finish(false, steps, trajectory, Some("policy produced no action".into()));
        };
        let finite = pred
            .anchors
            .iter()
            .all(|a| a.arms.len() == spec.num_arms() && a.continuous().iter().all(|v| v.is_finite()));
        if !finite || pred.is_empty() {
            return finish(false, steps, trajectory, Some("policy emitted a non-finite or malformed action".into()));
        }
        let mut prev = 0;
        for (j, anchor) in pred.anchors.iter().enumerate().take(replan_every.max(1)) {
            let span = offsets.get(j).map(|o| o - prev).unwrap_or(1);
            prev = offsets.get(j).copied().unwrap_or(prev + 1);
            for s in 0..span {
                state = step_with_gripper(spec, &state, anchor, task, s + 1 == span);
                steps += 1;
                trajectory.push(state.clone());
                if state.success(spec, task) {
                    return finish(true, steps, trajectory, None);
                }
                if steps >= max_steps {
                    return finish(false, steps, trajectory, None);
                }
            }
        }
    }
}
