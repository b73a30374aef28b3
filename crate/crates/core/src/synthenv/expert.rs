use alloc::format;
use alloc::vec::Vec;

use libm::{atan2, ceil, hypot, sin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{observe, step, ArmTask, EmbodimentSpec, SimError, Task, WorldState, V_MAX};
use crate::dataset::{
    anchor_indices, AlignedAction, ArmAction, ActionChunk, ChunkSpec, Episode, EpisodeMeta, Step,
};
use crate::geometry::{rot6d_encode, RotationMatrix};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpertConfig {
    /// Relative jitter of speed, path bulge and start pose; 0 disables it.
    pub jitter: f64,
    pub dwell_s: f64,
    pub settle_s: f64,
    pub max_s: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            jitter: 0.1,
            dwell_s: 0.2,
            settle_s: 0.3,
            max_s: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Approach,
    Close(usize),
    Carry,
    Open(usize),
    Done,
}

#[derive(Debug, Clone)]
struct Segment {
    start: [f64; 2],
    goal: [f64; 2],
    bulge: f64,
    length: f64,
    s: f64,
}

impl Segment {
    fn new(start: [f64; 2], goal: [f64; 2], bulge: f64) -> Self {
        let mut seg = Segment {
            start,
            goal,
            bulge,
            length: 0.0,
            s: 0.0,
        };
        let mut prev = start;
        for i in 1..=32 {
            let p = seg.at(i as f64 / 32.0);
            seg.length += hypot(p[0] - prev[0], p[1] - prev[1]);
            prev = p;
        }
        seg
    }

    fn at(&self, s: f64) -> [f64; 2] {
        let d = [self.goal[0] - self.start[0], self.goal[1] - self.start[1]];
        // Left normal scaled by the chord length.
        let off = self.bulge * sin(core::f64::consts::PI * s);
        [
            self.start[0] + s * d[0] - off * d[1],
            self.start[1] + s * d[1] + off * d[0],
        ]
    }
}

#[derive(Debug, Clone)]
struct ArmExpert {
    phase: Phase,
    segment: Option<Segment>,
    speed: f64,
    bulge: f64,
}

/// Waypoint-following demonstrator: approach, grasp, carry along a bulged
/// path, release, hold.
#[derive(Debug, Clone)]
pub struct ExpertController {
    arms: Vec<ArmExpert>,
    cfg: ExpertConfig,
}

impl ExpertController {
    /// Starts in the phase implied by `state`, so the controller can take
    /// over mid-episode.
    pub fn new<R: Rng + ?Sized>(spec: &EmbodimentSpec, task: &Task, state: &WorldState, cfg: &ExpertConfig, rng: &mut R) -> Self {
        let arms = task
            .arms
            .iter()
            .enumerate()
            .map(|(a, t)| {
                let mut jit = |x: f64| {
                    if cfg.jitter > 0.0 {
                        x * (1.0 + cfg.jitter * rng.random_range(-1.0..1.0))
                    } else {
                        x
                    }
                };
                let speed = (jit(spec.style.speed_frac) * V_MAX).min(0.95 * V_MAX);
                let bulge = jit(spec.style.arc_bulge);
                let o = state.objects[a];
                let placed = hypot(o[0] - t.target[0], o[1] - t.target[1]) <= task.eps_goal;
                let phase = if state.held[a] {
                    Phase::Carry
                } else if placed {
                    Phase::Done
                } else {
                    Phase::Approach
                };
                // Mid-carry: rejoin the path a fresh run would follow (pickup
                // spot to target) instead of bulging again from here, which
                // can drift into a short arm's inner dead zone.
                let segment = (phase == Phase::Carry).then(|| {
                    let mut seg = Segment::new(t.object, t.target, bulge);
                    let eef = state.eef(spec, a).xy;
                    seg.s = (0..=256)
                        .map(|i| i as f64 / 256.0)
                        .map(|s| {
                            let p = seg.at(s);
                            (hypot(p[0] - eef[0], p[1] - eef[1]), s)
                        })
                        .fold((f64::INFINITY, 0.0), |m, c| if c.0 < m.0 { c } else { m })
                        .1;
                    seg
                });
                ArmExpert {
                    phase,
                    segment,
                    speed,
                    bulge,
                }
            })
            .collect();
        ExpertController { arms, cfg: cfg.clone() }
    }

    pub fn done(&self) -> bool {
        self.arms.iter().all(|a| a.phase == Phase::Done)
    }

    /// Aligned command for the next control step.
    pub fn act(&mut self, spec: &EmbodimentSpec, task: &Task, state: &WorldState) -> AlignedAction {
        let dt = spec.dt();
        let dwell = ceil(self.cfg.dwell_s * spec.control_freq_hz) as usize;
        let tol = 0.2 * task.eps_goal;
        let mut arms = Vec::with_capacity(self.arms.len());
        for (a, ex) in self.arms.iter_mut().enumerate() {
            let chain = &spec.arms[a];
            let eef = state.eef(spec, a);
            let t: &ArmTask = &task.arms[a];
            let (cmd, gripper) = loop {
                match ex.phase {
                    Phase::Approach | Phase::Carry => {
                        let approach = ex.phase == Phase::Approach;
                        let goal = if approach { state.objects[a] } else { t.target };
                        let bulge = if approach { 0.5 * ex.bulge } else { ex.bulge };
                        let seg = ex.segment.get_or_insert_with(|| Segment::new(eef.xy, goal, bulge));
                        if seg.s >= 1.0 && hypot(eef.xy[0] - goal[0], eef.xy[1] - goal[1]) <= tol {
                            ex.segment = None;
                            ex.phase = if approach { Phase::Close(0) } else { Phase::Open(0) };
                            continue;
                        }
                        let ds = if seg.length > 1e-9 { ex.speed * dt / seg.length } else { 1.0 };
                        seg.s = (seg.s + ds).min(1.0);
                        break (seg.at(seg.s), u8::from(!approach));
                    }
                    Phase::Close(n) => {
                        if n >= dwell {
                            ex.phase = Phase::Carry;
                            continue;
                        }
                        ex.phase = Phase::Close(n + 1);
                        break (state.objects[a], 1);
                    }
                    Phase::Open(n) => {
                        ex.phase = if n >= dwell { Phase::Done } else { Phase::Open(n + 1) };
                        break (t.target, 0);
                    }
                    Phase::Done => break (eef.xy, 0),
                }
            };
            let heading = if chain.dof() > 2 {
                atan2(cmd[1] - chain.base[1], cmd[0] - chain.base[0]) + spec.style.heading_offset
            } else {
                eef.heading
            };
            arms.push(ArmAction {
                xyz: [cmd[0], cmd[1], 0.0],
                rot6d: rot6d_encode(&RotationMatrix::about_z(heading)),
                gripper,
            });
        }
        AlignedAction { arms }
    }

    /// Simulates this controller forward from `state` and returns the anchor
    /// chunk it would demonstrate. Used to wrap the expert as a policy.
    pub fn plan_chunk(&self, spec: &EmbodimentSpec, task: &Task, state: &WorldState, chunk: ChunkSpec) -> ActionChunk {
        let mut ctrl = self.clone();
        let mut s = state.clone();
        let offsets = anchor_indices(0, usize::MAX, spec.control_freq_hz, chunk);
        let horizon = *offsets.last().unwrap_or(&0);
        let mut actions = Vec::with_capacity(horizon + 1);
        for _ in 0..=horizon {
            let a = ctrl.act(spec, task, &s);
            let next = step(spec, &s, &a, task);
            actions.push(heading_as_executed(spec, &next, a));
            s = next;
        }
        ActionChunk {
            anchors: offsets.iter().map(|&i| actions[i].clone()).collect(),
        }
    }
}

/// Two-link arms cannot track a heading command; their recorded heading is
/// the one the arm ends up with.
fn heading_as_executed(spec: &EmbodimentSpec, next: &WorldState, mut a: AlignedAction) -> AlignedAction {
    for (i, arm) in a.arms.iter_mut().enumerate() {
        if spec.arms[i].dof() <= 2 {
            arm.rot6d = rot6d_encode(&RotationMatrix::about_z(next.eef(spec, i).heading));
        }
    }
    a
}

fn raw_action(a: &AlignedAction) -> Vec<f64> {
    a.arms
        .iter()
        .flat_map(|arm| {
            let h = crate::geometry::rot6d_decode(&arm.rot6d).map(|r| r.heading()).unwrap_or(0.0);
            [arm.xyz[0], arm.xyz[1], arm.xyz[2], h, arm.gripper as f64]
        })
        .collect()
}

fn check_reachable(spec: &EmbodimentSpec, task: &Task) -> Result<(), SimError> {
    if task.arms.len() != spec.num_arms() {
        return Err(SimError::Unreachable(format!(
            "task has {} arms, embodiment {}",
            task.arms.len(),
            spec.num_arms()
        )));
    }
    for (chain, t) in spec.arms.iter().zip(&task.arms) {
        for p in [t.object, t.target] {
            let r = hypot(p[0] - chain.base[0], p[1] - chain.base[1]);
            if r > 0.95 * chain.reach() || r < 0.1 * chain.reach() {
                return Err(SimError::Unreachable(format!("goal ({:.3}, {:.3}) at radius {r:.3}", p[0], p[1])));
            }
        }
    }
    Ok(())
}

/// Demonstration episode for `task`; the success predicate holds at its end.
pub fn scripted_expert(
    domain_id: &str,
    spec: &EmbodimentSpec,
    task: &Task,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<Episode, SimError> {
    check_reachable(spec, task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = spec.initial_state(task);
    if cfg.jitter > 0.0 {
        for (a, q) in state.joints.iter_mut().enumerate() {
            for v in q.iter_mut() {
                *v += 0.5 * cfg.jitter * rng.random_range(-1.0..1.0);
            }
            spec.arms[a].clamp(q);
        }
    }
    let mut ctrl = ExpertController::new(spec, task, &state, cfg, &mut rng);
    let max_steps = ceil(cfg.max_s * spec.control_freq_hz) as usize;
    let settle = ceil(cfg.settle_s * spec.control_freq_hz) as usize;
    let mut steps = Vec::new();
    let mut after_done = 0;
    while after_done < settle {
        if steps.len() >= max_steps {
            return Err(SimError::ExpertTimeout(max_steps));
        }
        let obs = spec
            .views
            .iter()
            .map(|v| observe(spec, &state, task, &v.name, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let proprio = state.proprio(spec);
        let action = ctrl.act(spec, task, &state);
        let next = step(spec, &state, &action, task);
        let action = heading_as_executed(spec, &next, action);
        steps.push(Step {
            obs,
            proprio,
            task_id: task.task_id,
            raw_action: raw_action(&action),
            action: None,
        });
        state = next;
        if ctrl.done() {
            after_done += 1;
        }
    }
    if !state.success(spec, task) {
        return Err(SimError::Unreachable("expert finished without success".into()));
    }
    Ok(Episode {
        domain_id: domain_id.into(),
        steps,
        meta: EpisodeMeta {
            seed,
            task_id: task.task_id,
            task_params: task.to_params(),
        },
    })
}

/// Replays an episode's recorded raw actions through the simulator.
pub fn replay_success(spec: &EmbodimentSpec, task: &Task, ep: &Episode) -> bool {
    let layout = spec.raw_layout();
    let Ok(aligned) = crate::dataset::align_episode(ep, layout) else {
        return false;
    };
    let mut state = spec.initial_state(task);
    if let Some(first) = ep.steps.first() {
        // Joint angles come first in each arm's proprio block.
        let per_arm = spec.dof() + 4;
        for (a, q) in state.joints.iter_mut().enumerate() {
            q.copy_from_slice(&first.proprio[a * per_arm..a * per_arm + spec.dof()]);
        }
    }
    for s in &aligned.steps {
        state = step(spec, &state, s.action.as_ref().unwrap(), task);
    }
    state.success(spec, task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthenv::{make_suite, sample_task};

    #[test]
    fn experts_succeed_on_every_domain() {
        for (d, e) in make_suite(0).iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
            for i in 0..10 {
                let task = sample_task(&e.spec, i % 2, &mut rng);
                let ep = scripted_expert(&e.hardware.domain_id, &e.spec, &task, &ExpertConfig::default(), i as u64).unwrap();
                let secs = ep.len() as f64 / e.spec.control_freq_hz;
                assert!((1.5..=8.0).contains(&secs), "{} lasted {secs} s", e.hardware.domain_id);
                assert!(ep.validate(&e.hardware, i as usize).is_ok());
                assert!(replay_success(&e.spec, &task, &ep), "{} replay failed", e.hardware.domain_id);
            }
        }
    }

    #[test]
    fn zero_jitter_same_seed_is_identical() {
        let e = &make_suite(0)[3];
        let task = sample_task(&e.spec, 1, &mut ChaCha8Rng::seed_from_u64(4));
        let cfg = ExpertConfig {
            jitter: 0.0,
            ..ExpertConfig::default()
        };
        let a = scripted_expert("x", &e.spec, &task, &cfg, 8).unwrap();
        let b = scripted_expert("x", &e.spec, &task, &cfg, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_task_is_rejected() {
        let e = &make_suite(0)[0];
        let mut task = sample_task(&e.spec, 0, &mut ChaCha8Rng::seed_from_u64(4));
        task.arms[0].target = [5.0, 5.0];
        assert!(matches!(
            scripted_expert("x", &e.spec, &task, &ExpertConfig::default(), 0),
            Err(SimError::Unreachable(_))
        ));
    }
}
