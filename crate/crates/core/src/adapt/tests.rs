use super::*;
use crate::dataset::{compute_norm_stats, ChunkSpec};
use crate::model::{ModelConfig, Owner};
use crate::synthenv::{demo_dataset, held_out_embodiment, make_suite};
use crate::trainer::split_holdout;
use alloc::vec;
use rand::Rng;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        prompt_len: 2,
        chunk_len: 6,
        enc_hidden: 8,
        time_dim: 8,
        ..ModelConfig::default()
    }
}

fn chunk() -> ChunkSpec {
    ChunkSpec { horizon_s: 1.0, anchors: 6 }
}

/// Suite model with perturbed weights so every tensor carries gradient.
fn pretrained() -> PolicyModel<f32> {
    let hws: Vec<_> = make_suite(0).into_iter().map(|e| e.hardware).collect();
    let mut m = PolicyModel::<f32>::init(&tiny_cfg(), &hws, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for v in m.params.data.iter_mut().flatten() {
        *v += 0.1 * (rng.random::<f32>() - 0.5);
    }
    m
}

struct Target {
    train: DomainDataset,
    val: DomainDataset,
    norm: DomainNorm,
}

fn target() -> Target {
    let ds = demo_dataset(&held_out_embodiment(0), 3, 7, &ExpertConfig::default()).unwrap();
    let (train, val) = split_holdout(&ds, 1);
    let norm = compute_norm_stats(core::slice::from_ref(&train)).unwrap().get("planar3-front").unwrap().clone();
    Target { train, val, norm }
}

fn data(t: &Target) -> AdaptData<'_> {
    AdaptData {
        train: &t.train,
        norm: &t.norm,
        val: &t.val,
        chunk: chunk(),
        val_stride: 30,
    }
}

fn optim() -> OptimConfig {
    OptimConfig {
        batch_size: 4,
        eval_interval: 2,
        base_lr: 1e-3,
        flow_steps: 2,
        ..OptimConfig::default()
    }
}

fn small(warm: u64, joint: u64) -> AdaptConfig {
    AdaptConfig {
        warmup_iters: warm,
        lr_warmup_iters: 2,
        joint_iters: joint,
        peft_rank: 2,
        peft_alpha: 2.0,
        ..AdaptConfig::default()
    }
}

fn shared_and_other(m: &PolicyModel<f32>, new: usize) -> Vec<(String, Vec<f32>)> {
    m.params
        .infos
        .iter()
        .zip(&m.params.data)
        .filter(|(i, _)| i.owner != Owner::Domain(new) && i.owner != Owner::Adapter)
        .map(|(i, d)| (i.name.clone(), d.clone()))
        .collect()
}

#[test]
fn nearest_prefers_arms_then_dof_then_frequency() {
    let m = pretrained();
    let held = held_out_embodiment(0).hardware;
    assert_eq!(nearest_domain(&m, &held), Some(1));
    let mut dual = make_suite(0)[4].hardware.clone();
    dual.domain_id = "dual-new".into();
    assert_eq!(nearest_domain(&m, &dual), Some(4));
    let mut four = held.clone();
    four.dof = 4;
    four.control_freq_hz = 14.0;
    assert_eq!(nearest_domain(&m, &four), Some(3));
    let mut tri = held;
    tri.num_arms = 3;
    assert_eq!(nearest_domain(&m, &tri), None);
}

#[test]
fn registered_domain_is_rejected_unless_resuming() {
    let mut m = pretrained();
    let hw = make_suite(0)[0].hardware.clone();
    assert_eq!(
        prepare_domain(&mut m, &hw, AdaptMode::TwoStep, &small(1, 1), false),
        Err(AdaptError::AlreadyRegistered("planar2-top".into()))
    );
    assert_eq!(prepare_domain(&mut m, &hw, AdaptMode::TwoStep, &small(1, 1), true).unwrap().0, 0);
}

#[test]
fn warm_up_freezes_the_backbone_bitwise() {
    let t = target();
    let base = pretrained();
    let out = adapt(base.clone(), &data(&t), AdaptMode::TwoStep, &small(3, 0), &optim(), false, None).unwrap();
    assert_eq!(shared_and_other(&out.model, out.domain), shared_and_other(&base, usize::MAX));

    let mut fresh = base.clone();
    let (idx, _) = prepare_domain(&mut fresh, &t.train.hardware, AdaptMode::TwoStep, &small(3, 0), false).unwrap();
    let p = out.model.domains[idx].prompt.unwrap();
    assert_ne!(out.model.params.data[p], fresh.params.data[p]);
}

#[test]
fn joint_training_moves_the_backbone_and_curves_cover_both_steps() {
    let t = target();
    let base = pretrained();
    let out = adapt(base.clone(), &data(&t), AdaptMode::TwoStep, &small(3, 3), &optim(), false, None).unwrap();
    let iters: Vec<u64> = out.curve.iter().map(|r| r.iter).collect();
    assert_eq!(iters, vec![0, 2, 4, 6]);
    assert!(out.curve.iter().all(|r| r.mode == "two_step" && r.val_l1.is_finite() && r.success_rate.is_none()));
    let q = out.model.blocks[0].q.w;
    assert_ne!(out.model.params.data[q], base.params.data[q]);
}

#[test]
fn lr_ramp_is_linear_after_warm_up() {
    let c = AdaptConfig {
        warmup_iters: 10,
        lr_warmup_iters: 4,
        ..AdaptConfig::default()
    };
    let f = |m, it| lr_factor(m, &c, it);
    assert_eq!(f(AdaptMode::TwoStep, 10), 1.0);
    assert_eq!(f(AdaptMode::TwoStep, 11), 0.25);
    assert_eq!(f(AdaptMode::TwoStep, 13), 0.75);
    assert_eq!(f(AdaptMode::TwoStep, 14), 1.0);
    assert_eq!(f(AdaptMode::Full, 1), 0.25);
    assert_eq!(f(AdaptMode::Random, 1), 1.0);
}

#[test]
fn peft_trains_adapters_and_new_domain_only() {
    let t = target();
    let base = pretrained();
    let cfg = small(2, 2);
    let out = peft_adapt(base.clone(), &data(&t), &cfg, &optim()).unwrap();
    assert_eq!(shared_and_other(&out.model, out.domain), shared_and_other(&base, usize::MAX));

    let (d, r) = (16, 2);
    let per_block = 4 * r * (d + d) + 2 * r * (d + 4 * d);
    let hw = &t.train.hardware;
    let (c, g, pr) = (hw.cont_dim(), hw.grip_dim(), hw.proprio_dim);
    let io = (c + pr + 8) * d + d + d * (c + g) + c + g;
    assert_eq!(out.trainable.trainable, per_block + 2 * d + io);
    assert!(out.trainable.fraction < 0.5);
    let moved = out.model.params.infos.iter().zip(&out.model.params.data).any(|(i, v)| i.owner == Owner::Adapter && i.name.ends_with(".b") && v.iter().any(|x| *x != 0.0));
    assert!(moved);
}

#[test]
fn zero_budget_peft_matches_the_frozen_model() {
    let t = target();
    let base = pretrained();
    let out = peft_adapt(base.clone(), &data(&t), &small(0, 0), &optim()).unwrap();
    assert!(out.model.has_lora());
    let mut plain = base.clone();
    prepare_domain(&mut plain, &t.train.hardware, AdaptMode::Random, &small(0, 0), false).unwrap();
    let s = crate::trainer::strided_samples(&t.val, out.domain, &t.norm, chunk(), 40);
    let inp = s[0].cond.to_input::<f32>(&s[0].target, 0.3);
    assert_eq!(out.model.forward(&inp).unwrap(), plain.forward(&inp).unwrap());
}

#[test]
fn merged_adapters_reproduce_the_adapted_model() {
    let t = target();
    let out = peft_adapt(pretrained(), &data(&t), &small(2, 2), &optim()).unwrap();
    let m64 = out.model.cast::<f64>();
    let mut merged = m64.clone();
    merged.merge_lora();
    assert!(!merged.has_lora());
    let s = crate::trainer::strided_samples(&t.val, out.domain, &t.norm, chunk(), 40);
    let inp = s[0].cond.to_input::<f64>(&s[0].target, 0.6);
    let (a, b) = (m64.forward(&inp).unwrap(), merged.forward(&inp).unwrap());
    for (x, y) in a.velocity.iter().zip(&b.velocity).chain(a.logits.iter().zip(&b.logits)) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn transfer_modes_share_a_grid_and_copy_nearest_keeps_its_prompt() {
    let t = target();
    let base = pretrained();
    let outs = prompt_transfer_eval(&base, &data(&t), &small(2, 2), &optim(), &AdaptMode::TRANSFER).unwrap();
    let grid = |o: &AdaptOutcome| o.curve.iter().map(|r| r.iter).collect::<Vec<_>>();
    assert_eq!(grid(&outs[0]), grid(&outs[1]));
    assert_eq!(grid(&outs[1]), grid(&outs[2]));
    let cn = &outs[1];
    let src = cn.nearest.unwrap();
    let (ps, pd) = (cn.model.domains[src].prompt.unwrap(), cn.model.domains[cn.domain].prompt.unwrap());
    assert_eq!(cn.model.params.data[ps], cn.model.params.data[pd]);
    for o in &outs {
        for (i, d) in base.domains.iter().enumerate() {
            let p = d.prompt.unwrap();
            let q = o.model.domains[i].prompt.unwrap();
            assert_eq!(base.params.data[p], o.model.params.data[q]);
        }
    }
}

#[test]
fn expert_like_policy_is_scored_by_rollouts() {
    let t = target();
    let out = peft_adapt(pretrained(), &data(&t), &small(0, 0), &optim()).unwrap();
    let cfg = RolloutConfig {
        episodes: 2,
        max_seconds: 1.0,
        flow_steps: 1,
        ..RolloutConfig::default()
    };
    let r = success_rate(&out.model, out.domain, &held_out_embodiment(0), &t.norm, chunk(), &cfg);
    assert!((0.0..=1.0).contains(&r));
    assert_eq!(r, success_rate(&out.model, out.domain, &held_out_embodiment(0), &t.norm, chunk(), &cfg));
}
