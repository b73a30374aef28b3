use super::*;
use alloc::string::ToString;
use alloc::vec;
use rand::Rng;
use rand_distr::StandardNormal;

fn hw(id: &str, name: &str, arms: usize, main_kp: usize, aux_kp: &[usize], desc: &str) -> HardwareConfig {
    let mut views = vec!["main".to_string()];
    let mut dims = vec![2 * main_kp];
    for (i, k) in aux_kp.iter().enumerate() {
        views.push(format!("aux{i}"));
        dims.push(2 * k);
    }
    HardwareConfig {
        domain_id: id.into(),
        embodiment_name: name.into(),
        num_arms: arms,
        dof: 3,
        proprio_dim: 5 * arms,
        control_freq_hz: 30.0,
        views,
        view_dims: dims,
        description_text: desc.into(),
    }
}

fn small_cfg(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        prompt_len: 3,
        chunk_len: 4,
        ffn_mult: 2,
        time_dim: 4,
        enc_hidden: 5,
        max_obs_tokens: 24,
        num_tasks: 3,
        hpt_latents: 2,
        lang_vocab: 11,
        lang_max_tokens: 4,
        variant,
        shared_io: false,
        cont_dim: 18,
        grip_dim: 2,
        proprio_dim: 10,
    }
}

fn domains() -> Vec<HardwareConfig> {
    vec![
        hw("a", "arm3", 1, 4, &[], "Embodiment: arm3, Camera Setup: Top View"),
        hw("b", "arm3", 1, 4, &[3], "Embodiment: arm3, Camera Setup: Left View"),
        hw("c", "dual", 2, 6, &[], "Embodiment: dual, Camera Setup: Top View"),
    ]
}

fn rnd(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn input(m: &PolicyModel<f64>, domain: usize, rng: &mut ChaCha8Rng) -> ModelInput<f64> {
    let hw = &m.domains[domain].hardware;
    ModelInput {
        domain,
        views: hw.view_dims.iter().map(|&n| rnd(n, rng)).collect(),
        proprio: rnd(hw.proprio_dim, rng),
        task_id: rng.random_range(0..m.cfg.num_tasks),
        a_t: rnd(m.cfg.chunk_len * hw.cont_dim(), rng),
        t: rng.random::<f64>(),
    }
}

fn perturb(m: &mut PolicyModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in m.params.data.iter_mut().flatten() {
        *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = PolicyModel::<f32>::init(&small_cfg(Variant::SoftPrompt), &domains(), 7).unwrap();
    let b = PolicyModel::<f32>::init(&small_cfg(Variant::SoftPrompt), &domains(), 7).unwrap();
    assert_eq!(a, b);
    let c = PolicyModel::<f32>::init(&small_cfg(Variant::SoftPrompt), &domains(), 8).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn fresh_model_outputs_exactly_zero_velocity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in Variant::ALL {
        let m = PolicyModel::<f64>::init(&small_cfg(v), &domains(), 3).unwrap();
        for d in 0..3 {
            let out = m.forward(&input(&m, d, &mut rng)).unwrap();
            assert_eq!(out.velocity.len(), 4 * m.domains[d].hardware.cont_dim());
            assert_eq!(out.logits.len(), 4 * m.domains[d].hardware.grip_dim());
            assert!(out.velocity.iter().all(|x| *x == 0.0));
            assert!(out.logits.iter().all(|x| *x == 0.0));
        }
    }
}

#[test]
fn sequence_lengths() {
    let mut cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        ..ModelConfig::default()
    };
    let one = [hw("x", "arm", 1, 8, &[], "d")];
    let m = PolicyModel::<f64>::init(&cfg, &one, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (seq, layout) = m.assemble_sequence(&input(&m, 0, &mut rng)).unwrap();
    assert_eq!(layout.len(), 55);
    assert_eq!(seq.len(), 55 * 16);
    cfg.variant = Variant::SharedOnly;
    let m = PolicyModel::<f64>::init(&cfg, &one, 0).unwrap();
    let (_, layout) = m.assemble_sequence(&input(&m, 0, &mut rng)).unwrap();
    assert_eq!(layout.len(), 39);
}

#[test]
fn unknown_domain_is_a_lookup_error() {
    let m = PolicyModel::<f64>::init(&small_cfg(Variant::SoftPrompt), &domains(), 0).unwrap();
    assert!(matches!(m.domain_index("zzz"), Err(ModelError::UnknownDomain(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut inp = input(&m, 0, &mut rng);
    inp.domain = 9;
    assert!(matches!(m.forward(&inp), Err(ModelError::UnknownDomain(_))));
}

#[test]
fn domains_differ_only_in_prompt_and_control_rows() {
    let two = [hw("p", "arm", 1, 4, &[], "d"), hw("q", "arm", 1, 4, &[], "d")];
    let m = PolicyModel::<f64>::init(&small_cfg(Variant::SoftPrompt), &two, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = input(&m, 0, &mut rng);
    let b = ModelInput { domain: 1, ..a.clone() };
    let (sa, l) = m.assemble_sequence(&a).unwrap();
    let (sb, _) = m.assemble_sequence(&b).unwrap();
    let d = m.cfg.d_model;
    let rows = |s: &[f64], r: core::ops::Range<usize>| s[r.start * d..r.end * d].to_vec();
    let obs = l.prompts..l.prompts + l.obs;
    assert_eq!(rows(&sa, obs.clone()), rows(&sb, obs));
    assert_ne!(rows(&sa, 0..l.prompts), rows(&sb, 0..l.prompts));
    let ctrl = l.prompts + l.obs..l.len();
    assert_ne!(rows(&sa, ctrl.clone()), rows(&sb, ctrl));
}

#[test]
fn lang_prompt_identical_descriptions_give_identical_tokens() {
    let two = [hw("p", "arm", 1, 4, &[], "Embodiment: X, Freq: 30Hz"), hw("q", "arm", 1, 4, &[], "Embodiment: X, Freq: 30Hz")];
    let m = PolicyModel::<f64>::init(&small_cfg(Variant::LangPrompt), &two, 0).unwrap();
    assert_eq!(m.domains[0].lang_tokens, m.domains[1].lang_tokens);
    assert_eq!(m.domains[0].lang_tokens.len(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = input(&m, 0, &mut rng);
    let b = ModelInput { domain: 1, ..a.clone() };
    let (sa, la) = m.assemble_sequence(&a).unwrap();
    let (sb, _) = m.assemble_sequence(&b).unwrap();
    assert_eq!(sa[..la.obs * 8], sb[..la.obs * 8]);
}

#[test]
fn hpt_latent_count_is_fixed() {
    let m = PolicyModel::<f64>::init(&small_cfg(Variant::HPTProj), &domains(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for d in 0..3 {
        let (_, l) = m.assemble_sequence(&input(&m, d, &mut rng)).unwrap();
        assert_eq!(l.obs, 2);
    }
}

fn lin_size(din: usize, dout: usize) -> usize {
    din * dout + dout
}

/// Parameter count written out from the architecture description.
fn closed_form(cfg: &ModelConfig, doms: &[HardwareConfig]) -> (usize, usize) {
    let d = cfg.d_model;
    let mut shared = 2 * (lin_size(2, cfg.enc_hidden) + lin_size(cfg.enc_hidden, d));
    shared += cfg.num_tasks * d + cfg.max_obs_tokens * d + cfg.chunk_len * d + 2 * d;
    shared += cfg.layers * (4 * d + 4 * lin_size(d, d) - d + lin_size(d, cfg.ffn_mult * d) + lin_size(cfg.ffn_mult * d, d));
    if cfg.variant == Variant::LangPrompt {
        shared += cfg.lang_vocab * d;
    }
    let soft = cfg.variant == Variant::SoftPrompt && !cfg.shared_io;
    if !soft {
        shared += lin_size(cfg.cont_dim + cfg.proprio_dim + cfg.time_dim, d);
    }
    if cfg.variant == Variant::SharedOnly || (cfg.variant == Variant::SoftPrompt && cfg.shared_io) {
        shared += lin_size(d, cfg.cont_dim + cfg.grip_dim);
    }
    let mut unshared = 0;
    for h in doms {
        match cfg.variant {
            Variant::SoftPrompt => {
                unshared += cfg.prompt_len * d;
                if !cfg.shared_io {
                    unshared += lin_size(h.cont_dim() + h.proprio_dim + cfg.time_dim, d) + lin_size(d, h.cont_dim() + h.grip_dim());
                }
            }
            Variant::SharedOnly => {}
            Variant::HPTProj => unshared += cfg.hpt_latents * d + 2 * lin_size(d, d) - d + lin_size(d, h.cont_dim() + h.grip_dim()),
            _ => unshared += lin_size(d, h.cont_dim() + h.grip_dim()),
        }
    }
    (shared, unshared)
}

#[test]
fn parameter_counts_match_closed_form() {
    for v in Variant::ALL {
        let cfg = small_cfg(v);
        let m = PolicyModel::<f32>::init(&cfg, &domains(), 0).unwrap();
        let r = m.param_report();
        let (s, u) = closed_form(&cfg, &domains());
        assert_eq!((r.shared, r.unshared, r.total), (s, u, s + u), "{v:?}");
        assert_eq!(r.unshared_fraction, u as f64 / (s + u) as f64);
    }
    let r = PolicyModel::<f32>::init(&small_cfg(Variant::SharedOnly), &domains(), 0).unwrap().param_report();
    assert_eq!(r.unshared_fraction, 0.0);
}

#[test]
fn desk_config_fraction_matches_formula() {
    let suite = crate::synthenv::make_suite(0);
    let hws: Vec<_> = suite.iter().map(|e| e.hardware.clone()).collect();
    let cfg = ModelConfig::default();
    let m = PolicyModel::<f32>::init(&cfg, &hws, 0).unwrap();
    let (s, u) = closed_form(&cfg, &hws);
    let r = m.param_report();
    assert_eq!(r.total, s + u);
    assert_eq!(r.unshared_fraction, u as f64 / (s + u) as f64);
}

#[test]
fn adding_a_domain_adds_prompt_and_io_sizes() {
    let cfg = small_cfg(Variant::SoftPrompt);
    let mut m = PolicyModel::<f32>::init(&cfg, &domains(), 0).unwrap();
    let before = m.param_report();
    let h = hw("new", "arm3", 1, 4, &[], "x");
    m.register_domain(&h, 1).unwrap();
    let after = m.param_report();
    let d = cfg.d_model;
    let io = lin_size(h.cont_dim() + h.proprio_dim + cfg.time_dim, d) + lin_size(d, h.cont_dim() + h.grip_dim());
    assert_eq!(after.unshared - before.unshared, cfg.prompt_len * d + io);
    assert_eq!(after.shared, before.shared);
    assert!(matches!(m.register_domain(&h, 1), Err(ModelError::DuplicateDomain(_))));
}

#[test]
fn soft_prompt_without_prompts_matches_shared_only() {
    let mut a_cfg = small_cfg(Variant::SoftPrompt);
    a_cfg.prompt_len = 0;
    a_cfg.shared_io = true;
    let a = PolicyModel::<f64>::init(&a_cfg, &domains(), 5).unwrap();
    let b = PolicyModel::<f64>::init(&small_cfg(Variant::SharedOnly), &domains(), 5).unwrap();
    let mut a = a;
    let mut b = b;
    perturb(&mut a, 9);
    perturb(&mut b, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for d in 0..3 {
        let inp = input(&a, d, &mut rng);
        assert_eq!(a.forward(&inp).unwrap(), b.forward(&inp).unwrap());
    }
}

#[test]
fn forward_is_deterministic_and_batch_invariant() {
    let mut m = PolicyModel::<f64>::init(&small_cfg(Variant::SoftPrompt), &domains(), 0).unwrap();
    perturb(&mut m, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<_> = (0..3).map(|d| input(&m, d, &mut rng)).collect();
    let (outs, _) = m.forward_batch(&batch).unwrap();
    for (inp, o) in batch.iter().zip(&outs) {
        let single = m.forward(inp).unwrap();
        for (x, y) in single.velocity.iter().zip(&o.velocity) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_eq!(m.forward_batch(&batch).unwrap().0, outs);
}

#[test]
fn non_finite_activations_report_the_layer() {
    let mut m = PolicyModel::<f64>::init(&small_cfg(Variant::SoftPrompt), &domains(), 0).unwrap();
    let w = m.blocks[1].f2.w;
    m.params.data[w][0] = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inp = input(&m, 0, &mut rng);
    assert_eq!(m.forward(&inp), Err(ModelError::NonFinite { layer: 2 }));
}

fn loss_and_grads(m: &PolicyModel<f64>, batch: &[ModelInput<f64>], wseed: u64) -> (f64, Grads<f64>) {
    let (outs, cache) = m.forward_batch(batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(wseed);
    let douts: Vec<_> = outs
        .iter()
        .map(|o| ModelOutput {
            velocity: rnd(o.velocity.len(), &mut rng),
            logits: rnd(o.logits.len(), &mut rng),
        })
        .collect();
    let loss = outs
        .iter()
        .zip(&douts)
        .map(|(o, w)| {
            o.velocity.iter().zip(&w.velocity).map(|(a, b)| a * b).sum::<f64>()
                + o.logits.iter().zip(&w.logits).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum();
    let mut g = Grads::zeros_like(&m.params);
    m.backward_batch(batch, &cache, &douts, &mut g);
    (loss, g)
}

fn finite_difference_check(mut m: PolicyModel<f64>) {
    perturb(&mut m, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<_> = (0..m.domains.len()).map(|d| input(&m, d, &mut rng)).collect();
    let (_, g) = loss_and_grads(&m, &batch, 99);
    let eps = 1e-6;
    let mut pick = ChaCha8Rng::seed_from_u64(5);
    for id in 0..m.params.len() {
        for _ in 0..3 {
            let i = pick.random_range(0..m.params.data[id].len());
            let orig = m.params.data[id][i];
            m.params.data[id][i] = orig + eps;
            let (lp, _) = loss_and_grads(&m, &batch, 99);
            m.params.data[id][i] = orig - eps;
            let (lm, _) = loss_and_grads(&m, &batch, 99);
            m.params.data[id][i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = g.data[id][i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-5 || (fd - an).abs() < 1e-8, "{}[{i}]: analytic {an} numeric {fd}", m.params.infos[id].name);
        }
    }
}

#[test]
fn gradients_match_finite_differences_for_every_variant() {
    for v in Variant::ALL {
        finite_difference_check(PolicyModel::init(&small_cfg(v), &domains(), 0).unwrap());
    }
}

#[test]
fn gradients_match_finite_differences_with_adapters() {
    let mut m = PolicyModel::<f64>::init(&small_cfg(Variant::SoftPrompt), &domains(), 0).unwrap();
    m.attach_lora(2, 4.0, 1);
    finite_difference_check(m);
}

#[test]
fn other_domains_get_exactly_zero_gradient() {
    let mut m = PolicyModel::<f64>::init(&small_cfg(Variant::SoftPrompt), &domains(), 0).unwrap();
    perturb(&mut m, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = vec![input(&m, 0, &mut rng), input(&m, 0, &mut rng)];
    let (_, g) = loss_and_grads(&m, &batch, 1);
    for d in [1, 2] {
        for id in m.domain_params(d) {
            assert!(g.data[id].iter().all(|x| *x == 0.0));
        }
    }
    for id in m.domain_params(0) {
        assert!(g.data[id].iter().any(|x| *x != 0.0));
    }
}

#[test]
fn every_shared_parameter_receives_gradient_from_every_domain() {
    let mut m = PolicyModel::<f64>::init(&small_cfg(Variant::SoftPrompt), &domains(), 0).unwrap();
    perturb(&mut m, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for d in 0..3 {
        let batch = vec![input(&m, d, &mut rng)];
        let (_, g) = loss_and_grads(&m, &batch, d as u64);
        for (id, info) in m.params.infos.iter().enumerate() {
            if info.owner != Owner::Shared {
                continue;
            }
            // The auxiliary encoder only sees domains that have an auxiliary view.
            if info.name.starts_with("shared.aux_enc") && m.domains[d].hardware.views.len() == 1 {
                continue;
            }
            assert!(g.data[id].iter().any(|x| *x != 0.0), "domain {d}: {}", info.name);
        }
    }
}

#[test]
fn zero_adapters_leave_the_output_unchanged_and_merge_round_trips() {
    let mut m = PolicyModel::<f64>::init(&small_cfg(Variant::SoftPrompt), &domains(), 0).unwrap();
    perturb(&mut m, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inp = input(&m, 1, &mut rng);
    let base = m.forward(&inp).unwrap();
    let n_before = m.params.len();
    let ids = m.attach_lora(2, 2.0, 3);
    assert_eq!(m.forward(&inp).unwrap(), base);
    for id in ids {
        for v in m.params.data[id].iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let adapted = m.forward(&inp).unwrap();
    assert_ne!(adapted, base);
    let factors = m.merge_lora();
    assert_eq!(m.params.len(), n_before);
    assert!(!m.has_lora());
    let merged = m.forward(&inp).unwrap();
    for (a, b) in adapted.velocity.iter().zip(&merged.velocity) {
        assert!((a - b).abs() < 1e-6);
    }
    m.unmerge_lora(&factors);
    let again = m.forward(&inp).unwrap();
    for (a, b) in adapted.velocity.iter().zip(&again.velocity) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn config_validation() {
    let mut c = small_cfg(Variant::SoftPrompt);
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = small_cfg(Variant::SoftPrompt);
    c.prompt_len = 0;
    assert!(c.validate().is_err());
    c.shared_io = true;
    assert!(c.validate().is_ok());
    assert!(PolicyModel::<f32>::init(&small_cfg(Variant::SoftPrompt), &[], 0).is_err());
    assert_eq!(Variant::parse("SoftPrompt"), Some(Variant::SoftPrompt));
    assert_eq!(Variant::parse("hpt_proj"), Some(Variant::HPTProj));
    assert_eq!(Variant::parse("nope"), None);
}

#[test]
fn hashing_is_deterministic_and_bounded() {
    let a = hash_tokens("Embodiment: Single Franka, Camera Setup: Top View", 1024, 16);
    assert_eq!(a, hash_tokens("embodiment single franka camera setup top view", 1024, 16));
    assert_eq!(a.len(), 7);
    assert!(a.iter().all(|t| *t < 1024));
}
