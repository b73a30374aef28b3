use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use core::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ArmTask, CameraView, EmbodimentSpec, ExpertStyle, PlanarChain, Task, EPS_GOAL};
use crate::dataset::HardwareConfig;

/// A simulated embodiment together with its data-source description.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Embodiment {
    pub spec: EmbodimentSpec,
    pub hardware: HardwareConfig,
}

fn camera(name: &str, theta: f64, tx: f64, ty: f64, scale: f64) -> CameraView {
    CameraView {
        name: name.to_string(),
        theta,
        translation: [tx, ty],
        scale,
    }
}

fn lengths(base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter().map(|l| l * (1.0 + 0.1 * rng.random_range(-1.0..1.0))).collect()
}

fn chain(base: [f64; 2], links: &[f64]) -> PlanarChain {
    let mut joint_limits = vec![(-0.5, PI + 0.5)];
    joint_limits.extend(core::iter::repeat_n((-2.8, 2.8), links.len() - 1));
    PlanarChain {
        base,
        link_lengths: links.to_vec(),
        joint_limits,
    }
}

fn home(dof: usize) -> Vec<f64> {
    let mut q = vec![FRAC_PI_2 + 0.5];
    q.extend(core::iter::repeat_n(-1.5 / (dof - 1) as f64, dof - 1));
    q
}

struct Setup<'a> {
    domain_id: &'a str,
    embodiment: &'a str,
    label: &'a str,
    links: &'a [f64],
    arms: usize,
    freq: f64,
    views: Vec<CameraView>,
    style: ExpertStyle,
}

fn build(s: Setup<'_>) -> Embodiment {
    let bases: Vec<[f64; 2]> = if s.arms == 2 {
        vec![[-0.7, 0.0], [0.7, 0.0]]
    } else {
        vec![[0.0, 0.0]]
    };
    let spec = EmbodimentSpec {
        arms: bases.iter().map(|b| chain(*b, s.links)).collect(),
        control_freq_hz: s.freq,
        views: s.views,
        sigma_obs: 0.005,
        gripper: true,
        style: s.style,
        home: home(s.links.len()),
    };
    let view_names: Vec<String> = spec.views.iter().map(|v| v.name.clone()).collect();
    let camera_text = view_names
        .iter()
        .map(|v| {
            let mut c = v.chars();
            match c.next() {
                Some(f) => format!("{}{} View", f.to_uppercase(), c.as_str()),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" / ");
    let hardware = HardwareConfig {
        domain_id: s.domain_id.to_string(),
        embodiment_name: s.embodiment.to_string(),
        num_arms: s.arms,
        dof: s.links.len(),
        proprio_dim: spec.proprio_dim(),
        control_freq_hz: s.freq,
        views: view_names,
        view_dims: vec![spec.view_dim(); spec.views.len()],
        description_text: format!(
            "Embodiment: {}, Camera Setup: {}, Freq: {}Hz",
            s.label, camera_text, s.freq as u32
        ),
    };
    Embodiment { spec, hardware }
}

struct Kinematics {
    two: Vec<f64>,
    three: Vec<f64>,
    three_b: Vec<f64>,
    four: Vec<f64>,
}

fn kinematics(seed: u64) -> Kinematics {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Kinematics {
        two: lengths(&[0.55, 0.45], &mut rng),
        three: lengths(&[0.45, 0.35, 0.25], &mut rng),
        three_b: lengths(&[0.5, 0.3, 0.3], &mut rng),
        four: lengths(&[0.4, 0.3, 0.25, 0.15], &mut rng),
    }
}

fn style(speed_frac: f64, arc_bulge: f64, heading_offset: f64) -> ExpertStyle {
    ExpertStyle {
        speed_frac,
        arc_bulge,
        heading_offset,
    }
}

/// Seven data sources across five simulated robots.
///
/// Domains 2 and 3 share kinematics and demonstrator style and differ only
/// in their cameras. Link lengths are jittered by `seed`.
pub fn make_suite(seed: u64) -> Vec<Embodiment> {
    let k = kinematics(seed);
    let top = || camera("top", 0.0, 0.0, 0.0, 1.0);
    vec![
        build(Setup {
            domain_id: "planar2-top",
            embodiment: "planar2",
            label: "Single Planar-2",
            links: &k.two,
            arms: 1,
            freq: 30.0,
            views: vec![top()],
            style: style(0.7, 0.15, 0.0),
        }),
        build(Setup {
            domain_id: "planar3-left",
            embodiment: "planar3",
            label: "Single Planar-3",
            links: &k.three,
            arms: 1,
            freq: 30.0,
            views: vec![camera("left", 0.6, -0.3, 0.2, 1.0)],
            style: style(0.55, -0.2, 0.4),
        }),
        build(Setup {
            domain_id: "planar3-right",
            embodiment: "planar3",
            label: "Single Planar-3",
            links: &k.three,
            arms: 1,
            freq: 30.0,
            views: vec![camera("right", -0.6, 0.3, 0.2, 1.0)],
            style: style(0.55, -0.2, 0.4),
        }),
        build(Setup {
            domain_id: "planar4-top",
            embodiment: "planar4",
            label: "Single Planar-4",
            links: &k.four,
            arms: 1,
            freq: 15.0,
            views: vec![top()],
            style: style(0.8, 0.0, -0.5),
        }),
        build(Setup {
            domain_id: "dual-planar2",
            embodiment: "dual-planar2",
            label: "Dual Planar-2",
            links: &k.two,
            arms: 2,
            freq: 30.0,
            views: vec![top()],
            style: style(0.6, 0.25, 0.0),
        }),
        build(Setup {
            domain_id: "planar3b-oblique",
            embodiment: "planar3b",
            label: "Single Planar-3B",
            links: &k.three_b,
            arms: 1,
            freq: 10.0,
            views: vec![camera("oblique", 0.3, 0.1, -0.2, 0.7)],
            style: style(0.5, -0.1, 0.8),
        }),
        build(Setup {
            domain_id: "planar4-wrist",
            embodiment: "planar4",
            label: "Single Planar-4",
            links: &k.four,
            arms: 1,
            freq: 30.0,
            views: vec![top(), camera("wrist", FRAC_PI_2, 0.0, -1.0, 1.5)],
            style: style(0.8, 0.0, -0.5),
        }),
    ]
}

/// Novel setup used for adaptation studies: the three-link robot of domains
/// 2 and 3 seen through an unseen front camera.
pub fn held_out_embodiment(seed: u64) -> Embodiment {
    let k = kinematics(seed);
    build(Setup {
        domain_id: "planar3-front",
        embodiment: "planar3",
        label: "Single Planar-3",
        links: &k.three,
        arms: 1,
        freq: 30.0,
        views: vec![camera("front", PI, 0.0, 0.8, 0.9)],
        style: style(0.55, -0.2, 0.4),
    })
}

/// Random pick-and-place task; `task_id` 0 carries objects from the left
/// sector to the right one, 1 the reverse.
pub fn sample_task<R: Rng + ?Sized>(spec: &EmbodimentSpec, task_id: u32, rng: &mut R) -> Task {
    let left = (1.9, 2.6);
    let right = (0.55, 1.25);
    let (from, to) = if task_id.is_multiple_of(2) { (left, right) } else { (right, left) };
    let arms = spec
        .arms
        .iter()
        .map(|c| {
            let reach = c.reach();
            let mut point = |sector: (f64, f64)| {
                let r = reach * rng.random_range(0.45..0.8);
                let a = rng.random_range(sector.0..sector.1);
                [c.base[0] + r * libm::cos(a), c.base[1] + r * libm::sin(a)]
            };
            let object = point(from);
            let target = point(to);
            ArmTask { object, target }
        })
        .collect();
    Task {
        task_id,
        arms,
        eps_goal: EPS_GOAL,
    }
}

/// Pretraining weights of the seven data sources, in suite order.
pub const SUITE_WEIGHTS: [f64; 7] = [0.4, 0.15, 0.15, 0.1, 0.03, 0.1, 0.07];

/// [`SUITE_WEIGHTS`] keyed by the suite's domain ids.
pub fn suite_mixture(suite: &[Embodiment]) -> Result<crate::dataset::MixtureSpec, crate::dataset::DataError> {
    if suite.len() != SUITE_WEIGHTS.len() {
        return Err(crate::dataset::DataError::Config(format!("suite has {} domains, expected 7", suite.len())));
    }
    crate::dataset::MixtureSpec::new(suite.iter().zip(SUITE_WEIGHTS).map(|(e, w)| (e.hardware.domain_id.clone(), w)).collect())
}

/// Episode `index` of a domain's demonstrations: alternating task ids,
/// task geometry and expert noise both derived from `(seed, index)`.
/// Unreachable draws are resampled.
pub fn demo_episode(e: &Embodiment, seed: u64, index: usize, cfg: &super::ExpertConfig) -> Result<(Task, crate::dataset::Episode), super::SimError> {
    let task_id = (index % 2) as u32;
    let mut last = None;
    for attempt in 0..16u64 {
        let s = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64)
            .wrapping_mul(31)
            .wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let task = sample_task(&e.spec, task_id, &mut rng);
        match super::scripted_expert(&e.hardware.domain_id, &e.spec, &task, cfg, s) {
            Ok(ep) => {
                let ep = crate::dataset::align_episode(&ep, e.spec.raw_layout()).expect("expert actions always align");
                return Ok((task, ep));
            }
            Err(err) => last = Some(err),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// `episodes` aligned demonstrations for one embodiment.
pub fn demo_dataset(e: &Embodiment, episodes: usize, seed: u64, cfg: &super::ExpertConfig) -> Result<crate::dataset::DomainDataset, super::SimError> {
    let eps = (0..episodes)
        .map(|i| demo_episode(e, seed, i, cfg).map(|(_, ep)| ep))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(crate::dataset::DomainDataset {
        hardware: e.hardware.clone(),
        episodes: eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_is_deterministic_with_seven_domains() {
        let a = make_suite(0);
        assert_eq!(a.len(), 7);
        assert_eq!(a, make_suite(0));
        assert_ne!(a, make_suite(1));
        let ids: Vec<&str> = a.iter().map(|e| e.hardware.domain_id.as_str()).collect();
        for (i, id) in ids.iter().enumerate() {
            assert!(!ids[..i].contains(id));
        }
    }

    #[test]
    fn paired_domains_differ_only_in_cameras() {
        let s = make_suite(3);
        let (l, r) = (&s[1].spec, &s[2].spec);
        assert_eq!(l.arms, r.arms);
        assert_eq!(l.style, r.style);
        assert_eq!(l.control_freq_hz, r.control_freq_hz);
        assert_ne!(l.views, r.views);
        assert_eq!(held_out_embodiment(3).spec.arms, l.arms);
    }

    #[test]
    fn suite_covers_required_setups() {
        let s = make_suite(0);
        let shape: Vec<(usize, usize, u32, usize)> = s
            .iter()
            .map(|e| (e.spec.dof(), e.spec.num_arms(), e.spec.control_freq_hz as u32, e.spec.views.len()))
            .collect();
        assert_eq!(
            shape,
            vec![(2, 1, 30, 1), (3, 1, 30, 1), (3, 1, 30, 1), (4, 1, 15, 1), (2, 2, 30, 1), (3, 1, 10, 1), (4, 1, 30, 2)]
        );
        for e in &s {
            e.hardware.validate().unwrap();
            assert_eq!(e.hardware.view_dims[0], e.spec.view_dim());
            assert!(e.spec.arms[0].within_limits(&e.spec.home));
        }
        assert_eq!(s[6].hardware.views, vec!["top".to_string(), "wrist".to_string()]);
    }

    #[test]
    fn tasks_lie_in_the_reachable_annulus() {
        let s = make_suite(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for e in &s {
            for id in 0..2 {
                let t = sample_task(&e.spec, id, &mut rng);
                for (arm, at) in e.spec.arms.iter().zip(&t.arms) {
                    for p in [at.object, at.target] {
                        let r = libm::hypot(p[0] - arm.base[0], p[1] - arm.base[1]);
                        assert!(r < arm.reach() * 0.81 && r > arm.reach() * 0.44);
                    }
                }
            }
        }
    }
}
