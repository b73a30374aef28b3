//! Heterogeneous pretraining loop, validation protocol and gradient check.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ChunkSpec, DataError, DomainDataset, DomainNorm, MixtureSampler, MixtureSpec};
use crate::flow::{fm_loss_grad, generate_batch, interpolate, sample_noise, target_velocity, FlowError, FmLoss};
use crate::model::{Grads, ModelError, ModelInput, ModelOutput, Owner, PolicyModel};
use crate::real::Real;

mod data;
mod optim;

pub use data::{make_sample, split_holdout, strided_samples, Sample};
pub use optim::{clip_grad_norm, AdamW};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct OptimConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub iters: u64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub lr_prompt: f64,
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub lambda_bce: f64,
    /// Euler steps used when validating.
    pub flow_steps: usize,
    pub val_seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            iters: 30_000,
            batch_size: 64,
            eval_interval: 1000,
            lr_prompt: 0.1,
            lr_encoder: 0.1,
            lr_rest: 1.0,
            lambda_bce: crate::flow::LAMBDA_BCE,
            flow_steps: crate::flow::DEFAULT_STEPS,
            val_seed: 0,
        }
    }
}

impl OptimConfig {
    /// Batch 1024 for 200k iterations; far beyond a desk budget.
    pub fn paper_scale() -> Self {
        OptimConfig {
            iters: 200_000,
            batch_size: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.base_lr > 0.0
            && self.lr_prompt > 0.0
            && self.lr_encoder > 0.0
            && self.lr_rest > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && self.flow_steps >= 1
            && self.lambda_bce >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config("learning rates and multipliers must be positive, betas in [0, 1), batch and flow steps >= 1".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iter} (domain `{domain}`)")]
    NonFinite { iter: u64, domain: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training configuration: {0}")]
    Config(String),
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: [u64; 2],
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let w = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: [(w >> 64) as u64, w as u64],
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(((self.word_pos[0] as u128) << 64) | self.word_pos[1] as u128);
        r
    }
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRow {
    pub iter: u64,
    pub domain: String,
    pub loss_mse: f64,
    pub loss_bce: f64,
    pub grad_norm: f64,
    pub val_l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Accum {
    pub mse: f64,
    pub bce: f64,
    pub grad_norm: f64,
    pub n: u64,
}

/// Everything besides parameters and moments needed to resume exactly.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainState {
    pub iter: u64,
    pub sampler_rng: RngState,
    pub noise_rng: RngState,
    pub acc: Accum,
    pub history: Vec<MetricRow>,
}

impl TrainState {
    pub fn fresh(seed: u64) -> Self {
        let mut s = ChaCha8Rng::seed_from_u64(seed);
        s.set_stream(1);
        let mut n = ChaCha8Rng::seed_from_u64(seed);
        n.set_stream(2);
        TrainState {
            iter: 0,
            sampler_rng: RngState::capture(&s),
            noise_rng: RngState::capture(&n),
            acc: Accum::default(),
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: FmLoss,
    pub grad_norm: f64,
}

/// Noisy inputs and flow targets for a batch, drawn from `rng`.
pub fn flow_batch<T: Real, R: Rng + ?Sized>(batch: &[Sample], k: usize, rng: &mut R) -> (Vec<ModelInput<T>>, Vec<Vec<f64>>) {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        let c = s.target.len() / k;
        let a0 = sample_noise(rng, k, c);
        let t: f64 = rng.random();
        inputs.push(s.cond.to_input(&interpolate(&a0, &s.target, t), t));
        targets.push(target_velocity(&a0, &s.target));
    }
    (inputs, targets)
}

/// Mean flow-matching loss of a batch and the gradient of that mean,
/// accumulated into `grads`.
pub fn loss_and_backward<T: Real>(
    model: &PolicyModel<T>,
    inputs: &[ModelInput<T>],
    targets: &[Vec<f64>],
    batch: &[Sample],
    lambda_bce: f64,
    grads: &mut Grads<T>,
    iter: u64,
) -> Result<FmLoss, TrainError> {
    let (outs, cache) = match model.forward_batch(inputs) {
        Ok(v) => v,
        Err(ModelError::NonFinite { .. }) => {
            let bad = inputs.iter().find(|i| model.forward(i).is_err()).map_or(0, |i| i.domain);
            return Err(TrainError::NonFinite {
                iter,
                domain: model.domains[bad].id().to_string(),
            });
        }
        Err(e) => return Err(e.into()),
    };
    let b = inputs.len() as f64;
    let mut total = FmLoss::default();
    let mut douts = Vec::with_capacity(outs.len());
    for ((o, tv), s) in outs.iter().zip(targets).zip(batch) {
        let pv: Vec<f64> = o.velocity.iter().map(|x| x.as_f64()).collect();
        let lg: Vec<f64> = o.logits.iter().map(|x| x.as_f64()).collect();
        let g = match fm_loss_grad(&pv, tv, &lg, &s.labels, lambda_bce) {
            Ok(g) if g.loss.total.is_finite() => g,
            Ok(_) | Err(FlowError::NonFinite(_)) => {
                return Err(TrainError::NonFinite {
                    iter,
                    domain: model.domains[s.cond.domain].id().to_string(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        total.mse += g.loss.mse / b;
        total.bce += g.loss.bce / b;
        total.total += g.loss.total / b;
        douts.push(ModelOutput {
            velocity: g.d_pred.iter().map(|x| T::of(x / b)).collect(),
            logits: g.d_logits.iter().map(|x| T::of(x / b)).collect(),
        });
    }
    model.backward_batch(inputs, &cache, &douts, grads);
    Ok(total)
}

/// One optimizer step on `batch`. Only tensors flagged in `mask` change.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &mut PolicyModel<T>,
    opt: &mut AdamW<T>,
    batch: &[Sample],
    rng: &mut ChaCha8Rng,
    cfg: &OptimConfig,
    mask: &[bool],
    lr_factor: f64,
    iter: u64,
) -> Result<StepStats, TrainError> {
    let (inputs, targets) = flow_batch::<T, _>(batch, model.cfg.chunk_len, rng);
    // Tensors of domains absent from the batch get no update at all, decay included.
    let mut present = alloc::vec![false; model.domains.len()];
    for s in batch {
        present[s.cond.domain] = true;
    }
    let mask: Vec<bool> = mask
        .iter()
        .zip(&model.params.infos)
        .map(|(&m, info)| m && !matches!(info.owner, Owner::Domain(d) if !present[d]))
        .collect();
    let mut grads = Grads::with_mask(&model.params, mask);
    let loss = loss_and_backward(model, &inputs, &targets, batch, cfg.lambda_bce, &mut grads, iter)?;
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        let domain = model.domains[batch[0].cond.domain].id().to_string();
        return Err(TrainError::NonFinite { iter, domain });
    }
    opt.step(&mut model.params, &grads, cfg, lr_factor);
    Ok(StepStats { loss, grad_norm })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValReport {
    /// Mean over every continuous and gripper entry.
    pub l1: f64,
    /// Mean over continuous entries only.
    pub l1_cont: f64,
    /// Mean per continuous dimension index.
    pub per_dim: Vec<f64>,
    pub samples: usize,
}

/// Fully denoised predictions against ground truth in normalized units.
/// Noise comes from a stream seeded with `seed`, so repeated calls agree.
pub fn validate<T: Real>(model: &PolicyModel<T>, samples: &[Sample], steps: usize, seed: u64) -> Result<ValReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("validation set is empty".into()));
    }
    let k = model.cfg.chunk_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum_c, mut n_c, mut sum_g, mut n_g) = (0.0, 0usize, 0.0, 0usize);
    let mut dim_sum: Vec<f64> = Vec::new();
    let mut dim_n: Vec<usize> = Vec::new();
    for chunk in samples.chunks(64) {
        let conds: Vec<_> = chunk.iter().map(|s| s.cond.clone()).collect();
        let noise: Vec<_> = chunk.iter().map(|s| sample_noise(&mut rng, k, s.target.len() / k)).collect();
        let gens = generate_batch(model, &conds, noise, steps)?;
        for (s, g) in chunk.iter().zip(gens) {
            let c = s.target.len() / k;
            if dim_sum.len() < c {
                dim_sum.resize(c, 0.0);
                dim_n.resize(c, 0);
            }
            for (i, (p, t)) in g.cont.iter().zip(&s.target).enumerate() {
                let e = (p - t).abs();
                sum_c += e;
                dim_sum[i % c] += e;
                dim_n[i % c] += 1;
            }
            n_c += s.target.len();
            for (p, y) in g.grip.iter().zip(&s.labels) {
                sum_g += (f64::from(*p) - y).abs();
            }
            n_g += s.labels.len();
        }
    }
    Ok(ValReport {
        l1: (sum_c + sum_g) / (n_c + n_g) as f64,
        l1_cont: sum_c / n_c as f64,
        per_dim: dim_sum.iter().zip(&dim_n).map(|(s, n)| s / *n as f64).collect(),
        samples: samples.len(),
    })
}

/// Named held-out samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ValSet {
    pub name: String,
    pub samples: Vec<Sample>,
}

/// Owns the model and optimizer while sampling batches from a mixture.
pub struct Trainer<'a> {
    pub model: PolicyModel<f32>,
    pub opt: AdamW<f32>,
    pub cfg: OptimConfig,
    pub state: TrainState,
    pub chunk: ChunkSpec,
    datasets: &'a [DomainDataset],
    norms: Vec<DomainNorm>,
    domain_of: Vec<usize>,
    sampler: MixtureSampler,
    noise: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    /// `norms[i]` normalizes `datasets[i]`; every dataset's domain must be
    /// registered in the model.
    pub fn new(
        model: PolicyModel<f32>,
        opt: AdamW<f32>,
        cfg: OptimConfig,
        state: TrainState,
        mixture: &MixtureSpec,
        datasets: &'a [DomainDataset],
        norms: Vec<DomainNorm>,
        chunk: ChunkSpec,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if chunk.anchors != model.cfg.chunk_len {
            return Err(TrainError::Config(format!(
                "chunk has {} anchors but the model expects {}",
                chunk.anchors, model.cfg.chunk_len
            )));
        }
        if norms.len() != datasets.len() {
            return Err(TrainError::Config("one normalizer per dataset is required".into()));
        }
        let domain_of = datasets
            .iter()
            .map(|d| model.domain_index(&d.hardware.domain_id))
            .collect::<Result<Vec<_>, _>>()?;
        let sampler = MixtureSampler::with_rng(mixture, datasets, state.sampler_rng.restore())?;
        let noise = state.noise_rng.restore();
        Ok(Trainer {
            model,
            opt,
            cfg,
            state,
            chunk,
            datasets,
            norms,
            domain_of,
            sampler,
            noise,
        })
    }

    fn sync_state(&mut self) {
        self.state.sampler_rng = RngState::capture(self.sampler.rng());
        self.state.noise_rng = RngState::capture(&self.noise);
    }

    /// One optimizer step on a fresh mixture batch.
    pub fn step(&mut self, mask: &[bool], lr_factor: f64) -> Result<StepStats, TrainError> {
        let draws = self.sampler.draw_batch(self.cfg.batch_size);
        let batch: Vec<Sample> = draws
            .iter()
            .map(|d| {
                make_sample(
                    &self.datasets[d.dataset],
                    d.episode,
                    d.step,
                    self.domain_of[d.dataset],
                    &self.norms[d.dataset],
                    self.chunk,
                )
            })
            .collect();
        let iter = self.state.iter + 1;
        let st = train_step(&mut self.model, &mut self.opt, &batch, &mut self.noise, &self.cfg, mask, lr_factor, iter)?;
        self.state.iter = iter;
        let a = &mut self.state.acc;
        a.mse += st.loss.mse;
        a.bce += st.loss.bce;
        a.grad_norm += st.grad_norm;
        a.n += 1;
        self.sync_state();
        Ok(st)
    }

    /// Validates every set, appends one row per set plus a `mean` row, and
    /// resets the running loss averages.
    pub fn evaluate(&mut self, valsets: &[ValSet]) -> Result<Vec<MetricRow>, TrainError> {
        let a = self.state.acc;
        let n = a.n.max(1) as f64;
        let mut rows = Vec::with_capacity(valsets.len() + 1);
        let mut total = 0.0;
        for v in valsets {
            let r = validate(&self.model, &v.samples, self.cfg.flow_steps, self.cfg.val_seed)?;
            total += r.l1;
            rows.push(MetricRow {
                iter: self.state.iter,
                domain: v.name.clone(),
                loss_mse: a.mse / n,
                loss_bce: a.bce / n,
                grad_norm: a.grad_norm / n,
                val_l1: r.l1,
            });
        }
        if !valsets.is_empty() {
            rows.push(MetricRow {
                iter: self.state.iter,
                domain: "mean".into(),
                loss_mse: a.mse / n,
                loss_bce: a.bce / n,
                grad_norm: a.grad_norm / n,
                val_l1: total / valsets.len() as f64,
            });
        }
        self.state.acc = Accum::default();
        self.state.history.extend(rows.iter().cloned());
        Ok(rows)
    }

    /// Steps until iteration `until`, validating every `eval_interval`
    /// iterations and at `until`.
    pub fn run<F: Fn(u64) -> f64>(&mut self, until: u64, valsets: &[ValSet], mask: &[bool], lr_factor: F) -> Result<(), TrainError> {
        while self.state.iter < until {
            let f = lr_factor(self.state.iter + 1);
            self.step(mask, f)?;
            let it = self.state.iter;
            if (self.cfg.eval_interval > 0 && it.is_multiple_of(self.cfg.eval_interval)) || it == until {
                self.evaluate(valsets)?;
            }
        }
        Ok(())
    }

    pub fn all_trainable(&self) -> Vec<bool> {
        vec![true; self.model.params.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coarse parameter families that were sampled.
    pub families: BTreeSet<&'static str>,
    /// Name and coordinate of the worst entry.
    pub worst: (String, usize),
}

/// Family of a tensor, from its name.
pub fn param_family(name: &str) -> &'static str {
    if name.starts_with("adapter.") {
        "adapter"
    } else if name.ends_with(".prompt") {
        "prompt"
    } else if name.contains("in_proj") || name.contains("out_proj") {
        "projection"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".ffn.") {
        "ffn"
    } else if name.contains("_enc.") || name.contains("task_emb") || name.contains("lang_emb") {
        "encoder"
    } else if name.contains(".hpt.") {
        "resampler"
    } else if name.contains(".pos_") {
        "positional"
    } else {
        "norm"
    }
}

/// Central finite differences on at least `n_params` coordinates spread
/// over every tensor, against the analytic gradient of the batch's mean
/// flow-matching loss. Noise and flow times are fixed by `seed`.
pub fn gradient_check(model: &PolicyModel<f64>, batch: &[Sample], eps: f64, n_params: usize, lambda_bce: f64, seed: u64) -> Result<GradCheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, targets) = flow_batch::<f64, _>(batch, model.cfg.chunk_len, &mut rng);
    let mut grads = Grads::zeros_like(&model.params);
    loss_and_backward(model, &inputs, &targets, batch, lambda_bce, &mut grads, 0)?;
    let mut probe = model.clone();
    let eval = |m: &PolicyModel<f64>| -> Result<f64, TrainError> {
        let mut g = Grads::with_mask(&m.params, vec![false; m.params.len()]);
        Ok(loss_and_backward(m, &inputs, &targets, batch, lambda_bce, &mut g, 0)?.total)
    };
    let tensors = model.params.len();
    let per = n_params.div_ceil(tensors).max(1);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        families: BTreeSet::new(),
        worst: (String::new(), 0),
    };
    for id in 0..tensors {
        let len = model.params.data[id].len();
        for _ in 0..per.min(len) {
            let i = rng.random_range(0..len);
            let orig = probe.params.data[id][i];
            probe.params.data[id][i] = orig + eps;
            let lp = eval(&probe)?;
            probe.params.data[id][i] = orig - eps;
            let lm = eval(&probe)?;
            probe.params.data[id][i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.data[id][i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (model.params.infos[id].name.clone(), i);
            }
            report.checked += 1;
            report.families.insert(param_family(&model.params.infos[id].name));
        }
    }
    Ok(report)
}
