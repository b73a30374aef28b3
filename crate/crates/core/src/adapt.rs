//! Bringing a pretrained policy to an embodiment it has not seen.
//!
//! Every procedure registers the new domain, optionally seeds its io
//! projections from the nearest registered hardware, and then trains on
//! the new domain only, recording a learning curve.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ChunkSpec, DomainDataset, DomainNorm, HardwareConfig, MixtureSpec};
use crate::flow::{generate, Conditioning};
use crate::model::{ModelError, Owner, PolicyModel};
use crate::synthenv::{demo_episode, rollout, Embodiment, ExpertConfig};
use crate::trainer::{AdamW, OptimConfig, TrainError, TrainState, Trainer, ValSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AdaptMode {
    /// Fresh prompt, adapters plus new-domain tensors trained.
    Random,
    /// Prompt copied from the nearest hardware and frozen; adapters and
    /// io projections trained.
    CopyNearest,
    /// Prompt warm-up with a frozen backbone, then everything.
    TwoStep,
    /// Everything trainable from the first step.
    Full,
}

impl AdaptMode {
    pub const TRANSFER: [AdaptMode; 3] = [AdaptMode::Random, AdaptMode::CopyNearest, AdaptMode::TwoStep];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::Random => "random",
            AdaptMode::CopyNearest => "copy_nearest",
            AdaptMode::TwoStep => "two_step",
            AdaptMode::Full => "full",
        }
    }

    /// `peft` is accepted as another name for `random`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" | "peft" => Some(AdaptMode::Random),
            "copy_nearest" => Some(AdaptMode::CopyNearest),
            "two_step" => Some(AdaptMode::TwoStep),
            "full" => Some(AdaptMode::Full),
            _ => None,
        }
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, AdaptMode::Random | AdaptMode::CopyNearest)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AdaptConfig {
    /// Prompt warm-up length of the two-step procedure.
    pub warmup_iters: u64,
    /// Linear learning-rate ramp at the start of joint training.
    pub lr_warmup_iters: u64,
    /// Joint training length. Every mode trains for
    /// `warmup_iters + joint_iters` iterations in total.
    pub joint_iters: u64,
    pub peft_rank: usize,
    pub peft_alpha: f64,
    pub init_mode: AdaptMode,
    /// Seed io projections from the nearest registered hardware.
    pub init_io_from_nearest: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            warmup_iters: 1000,
            lr_warmup_iters: 1000,
            joint_iters: 5000,
            peft_rank: 16,
            peft_alpha: 16.0,
            init_mode: AdaptMode::TwoStep,
            init_io_from_nearest: true,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.init_mode.uses_adapters() && self.peft_rank == 0 {
            return Err(AdaptError::Config("adapter rank must be at least 1".into()));
        }
        if self.peft_alpha.is_nan() || self.peft_alpha <= 0.0 {
            return Err(AdaptError::Config("adapter alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> u64 {
        self.warmup_iters + self.joint_iters
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdaptError {
    #[error("domain `{0}` is already registered (pass resume to continue it)")]
    AlreadyRegistered(String),
    #[error("no registered domain with {0} arm(s) to copy a prompt from")]
    NoNearest(usize),
    #[error("adaptation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Registered domain closest to `hw`: same arm count, then smallest DoF
/// gap, then smallest frequency gap; ties go to the earlier registration.
pub fn nearest_domain<T>(model: &PolicyModel<T>, hw: &HardwareConfig) -> Option<usize> {
    model
        .domains
        .iter()
        .enumerate()
        .filter(|(_, d)| d.hardware.domain_id != hw.domain_id && d.hardware.num_arms == hw.num_arms)
        .min_by(|(ia, a), (ib, b)| {
            let key = |h: &HardwareConfig| (h.dof.abs_diff(hw.dof), libm::fabs(h.control_freq_hz - hw.control_freq_hz));
            let (ka, kb) = (key(&a.hardware), key(&b.hardware));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurveRow {
    pub iter: u64,
    pub mode: String,
    pub val_l1: f64,
    /// Only filled where rollouts were requested.
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainableReport {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

pub struct AdaptOutcome {
    pub model: PolicyModel<f32>,
    pub domain: usize,
    /// Domain whose prompt or projections seeded the new one.
    pub nearest: Option<usize>,
    pub curve: Vec<CurveRow>,
    pub state: TrainState,
    pub trainable: TrainableReport,
}

/// Target-domain data for one adaptation run.
pub struct AdaptData<'a> {
    pub train: &'a DomainDataset,
    pub norm: &'a DomainNorm,
    pub val: &'a DomainDataset,
    pub chunk: ChunkSpec,
    /// Every `val_stride`-th step of `val` is scored.
    pub val_stride: usize,
}

/// Registers `hw` and seeds its tensors. With `resume` an existing
/// registration is reused as is.
pub fn prepare_domain(
    model: &mut PolicyModel<f32>,
    hw: &HardwareConfig,
    mode: AdaptMode,
    cfg: &AdaptConfig,
    resume: bool,
) -> Result<(usize, Option<usize>), AdaptError> {
    if let Ok(i) = model.domain_index(&hw.domain_id) {
        return if resume {
            Ok((i, nearest_domain(model, hw)))
        } else {
            Err(AdaptError::AlreadyRegistered(hw.domain_id.clone()))
        };
    }
    let nearest = nearest_domain(model, hw);
    if mode == AdaptMode::CopyNearest && nearest.is_none() {
        return Err(AdaptError::NoNearest(hw.num_arms));
    }
    let idx = model.register_domain(hw, cfg.seed ^ 0xada9)?;
    if let Some(src) = nearest {
        if cfg.init_io_from_nearest {
            model.copy_domain_params(src, idx, false);
        }
        if mode == AdaptMode::CopyNearest {
            let (s, d) = (model.domains[src].prompt, model.domains[idx].prompt);
            if let (Some(s), Some(d)) = (s, d) {
                model.params.data[d] = model.params.data[s].clone();
            }
        }
    }
    Ok((idx, nearest))
}

/// Learning-rate multiplier at iteration `it` (1-based): a linear ramp
/// over `lr_warmup_iters` at the start of joint training for `two_step`
/// and at the start of `full`; constant otherwise.
pub fn lr_factor(mode: AdaptMode, cfg: &AdaptConfig, it: u64) -> f64 {
    let from = match mode {
        AdaptMode::TwoStep if it > cfg.warmup_iters => cfg.warmup_iters,
        AdaptMode::Full => 0,
        _ => return 1.0,
    };
    if cfg.lr_warmup_iters == 0 {
        return 1.0;
    }
    libm::fmin(1.0, (it - from) as f64 / cfg.lr_warmup_iters as f64)
}

fn trainable_report(mask: &[bool], model: &PolicyModel<f32>) -> TrainableReport {
    let total = model.params.numel();
    let trainable = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| model.params.data[i].len()).sum();
    TrainableReport {
        trainable,
        total,
        fraction: trainable as f64 / total.max(1) as f64,
    }
}

/// Success-rate callback: model and its domain index.
pub type SuccessHook<'a> = &'a mut dyn FnMut(&PolicyModel<f32>, usize) -> f64;

/// Runs `mode` on a model that does not yet know `data.train`'s domain.
/// `success` is called on the model at every evaluation point when given.
pub fn adapt(
    mut model: PolicyModel<f32>,
    data: &AdaptData<'_>,
    mode: AdaptMode,
    cfg: &AdaptConfig,
    optim: &OptimConfig,
    resume: bool,
    mut success: Option<SuccessHook<'_>>,
) -> Result<AdaptOutcome, AdaptError> {
    cfg.validate()?;
    let hw = &data.train.hardware;
    let (domain, nearest) = prepare_domain(&mut model, hw, mode, cfg, resume)?;
    if mode.uses_adapters() && !model.has_lora() {
        model.attach_lora(cfg.peft_rank, cfg.peft_alpha, cfg.seed ^ 0x10a4);
    }
    let own = |m: &PolicyModel<f32>, prompt: bool| -> Vec<bool> {
        let p = m.domains[domain].prompt;
        m.params
            .infos
            .iter()
            .enumerate()
            .map(|(i, info)| match info.owner {
                Owner::Domain(d) => d == domain && (prompt || Some(i) != p),
                Owner::Adapter => true,
                Owner::Shared => false,
            })
            .collect()
    };
    let (warm_mask, joint_mask) = match mode {
        AdaptMode::Random => (own(&model, true), own(&model, true)),
        AdaptMode::CopyNearest => (own(&model, false), own(&model, false)),
        AdaptMode::TwoStep => (own(&model, true), alloc::vec![true; model.params.len()]),
        AdaptMode::Full => {
            let all = alloc::vec![true; model.params.len()];
            (all.clone(), all)
        }
    };
    let trainable = trainable_report(&joint_mask, &model);

    let mix = MixtureSpec::new(alloc::vec![(hw.domain_id.clone(), 1.0)]).map_err(TrainError::from)?;
    let sets = core::slice::from_ref(data.train);
    let val = ValSet {
        name: hw.domain_id.clone(),
        samples: crate::trainer::strided_samples(data.val, domain, data.norm, data.chunk, data.val_stride),
    };
    let opt = AdamW::new(&model.params);
    let state = TrainState::fresh(cfg.seed);
    let mut tr = Trainer::new(model, opt, optim.clone(), state, &mix, sets, alloc::vec![data.norm.clone()], data.chunk)?;

    let mut curve = Vec::new();
    let mut record = |tr: &mut Trainer<'_>, curve: &mut Vec<CurveRow>| -> Result<(), AdaptError> {
        let rows = tr.evaluate(core::slice::from_ref(&val))?;
        let success_rate = success.as_mut().map(|f| f(&tr.model, domain));
        curve.push(CurveRow {
            iter: tr.state.iter,
            mode: mode.name().to_string(),
            val_l1: rows[0].val_l1,
            success_rate,
        });
        Ok(())
    };

    let interval = optim.eval_interval.max(1);
    let budget = cfg.budget();
    if tr.state.iter == 0 {
        record(&mut tr, &mut curve)?;
    }
    while tr.state.iter < budget {
        let it = tr.state.iter + 1;
        let mask = if it <= cfg.warmup_iters { &warm_mask } else { &joint_mask };
        tr.step(mask, lr_factor(mode, cfg, it))?;
        if tr.state.iter % interval == 0 || tr.state.iter == budget {
            record(&mut tr, &mut curve)?;
        }
    }
    Ok(AdaptOutcome {
        model: tr.model,
        domain,
        nearest,
        curve,
        state: tr.state,
        trainable,
    })
}

/// Parameter-efficient finetuning: adapters on every attention and
/// feed-forward matrix plus the new prompt and io projections.
pub fn peft_adapt(
    model: PolicyModel<f32>,
    data: &AdaptData<'_>,
    cfg: &AdaptConfig,
    optim: &OptimConfig,
) -> Result<AdaptOutcome, AdaptError> {
    adapt(model, data, AdaptMode::Random, cfg, optim, false, None)
}

/// Prompt warm-up with the backbone frozen, then joint training.
pub fn two_step_adapt(
    model: PolicyModel<f32>,
    data: &AdaptData<'_>,
    cfg: &AdaptConfig,
    optim: &OptimConfig,
) -> Result<AdaptOutcome, AdaptError> {
    adapt(model, data, AdaptMode::TwoStep, cfg, optim, false, None)
}

/// The same budget and seed under each prompt-initialization mode.
pub fn prompt_transfer_eval(
    model: &PolicyModel<f32>,
    data: &AdaptData<'_>,
    cfg: &AdaptConfig,
    optim: &OptimConfig,
    modes: &[AdaptMode],
) -> Result<Vec<AdaptOutcome>, AdaptError> {
    modes.iter().map(|&m| adapt(model.clone(), data, m, cfg, optim, false, None)).collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct RolloutConfig {
    pub episodes: usize,
    /// Time limit per episode in simulated seconds.
    pub max_seconds: f64,
    /// Anchors executed before the policy is queried again.
    pub replan_every: usize,
    pub flow_steps: usize,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            episodes: 50,
            max_seconds: 20.0,
            replan_every: 8,
            flow_steps: crate::flow::DEFAULT_STEPS,
            seed: 1_000_003,
        }
    }
}

/// Closed-loop success over `cfg.episodes` tasks that the scripted expert
/// can solve. Task `i` alternates task ids like the demonstrations.
pub fn success_rate(
    model: &PolicyModel<f32>,
    domain: usize,
    e: &Embodiment,
    norm: &DomainNorm,
    chunk: ChunkSpec,
    cfg: &RolloutConfig,
) -> f64 {
    if cfg.episodes == 0 {
        return 0.0;
    }
    let max = libm::ceil(cfg.max_seconds * e.spec.control_freq_hz) as usize;
    let mut wins = 0;
    for i in 0..cfg.episodes {
        let Ok((task, _)) = demo_episode(e, cfg.seed, i, &ExpertConfig::default()) else { continue };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let policy = |obs: &crate::synthenv::Observation, _: &crate::synthenv::WorldState| {
            let cond = Conditioning {
                domain,
                views: obs.views.clone(),
                proprio: obs.proprio.clone(),
                task_id: obs.task_id as usize,
            };
            generate(model, &cond, norm, &mut rng, cfg.flow_steps).ok()
        };
        if rollout(policy, &e.spec, &task, chunk, max.max(1), cfg.replan_every, cfg.seed ^ i as u64).success {
            wins += 1;
        }
    }
    wins as f64 / cfg.episodes as f64
}

#[cfg(test)]
mod tests;
