//! Soft-prompted transformer velocity field and the heterogeneity-handling
//! variants it is compared against.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::HardwareConfig;
use crate::real::Real;

pub mod lora;
pub mod ops;
mod params;
mod policy;

pub use params::{Grads, Init, Owner, ParamGroup, ParamId, ParamInfo, ParamStore};
pub use policy::{BatchCache, ModelInput, ModelOutput, SequenceLayout};

/// How domain heterogeneity is absorbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    /// One shared input/output projection, no prompts.
    SharedOnly,
    /// Shared inputs, one output head per domain.
    DomainHeads,
    /// Per-domain cross-attention resampler over observation tokens.
    HPTProj,
    /// Hashed hardware description tokens appended to the observation.
    LangPrompt,
    /// Learnable per-domain prompt tokens plus per-domain io projections.
    SoftPrompt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SharedOnly,
        Variant::DomainHeads,
        Variant::HPTProj,
        Variant::LangPrompt,
        Variant::SoftPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SharedOnly => "shared_only",
            Variant::DomainHeads => "domain_heads",
            Variant::HPTProj => "hpt_proj",
            Variant::LangPrompt => "lang_prompt",
            Variant::SoftPrompt => "soft_prompt",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Variant::ALL.iter().copied().find(|v| {
            let n: String = v.name().chars().filter(|c| *c != '_').collect();
            n == norm
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Prompt tokens per domain (k).
    pub prompt_len: usize,
    /// Anchors per chunk (K).
    pub chunk_len: usize,
    pub ffn_mult: usize,
    pub time_dim: usize,
    /// Hidden width of the observation encoder stubs.
    pub enc_hidden: usize,
    pub max_obs_tokens: usize,
    pub num_tasks: usize,
    pub hpt_latents: usize,
    pub lang_vocab: usize,
    pub lang_max_tokens: usize,
    pub variant: Variant,
    /// Force shared io projections even for the soft-prompt variant.
    pub shared_io: bool,
    /// Widths of the shared (padded) projections.
    pub cont_dim: usize,
    pub grip_dim: usize,
    pub proprio_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            layers: 4,
            heads: 4,
            prompt_len: 16,
            chunk_len: 30,
            ffn_mult: 4,
            time_dim: 32,
            enc_hidden: 64,
            max_obs_tokens: 48,
            num_tasks: 8,
            hpt_latents: 8,
            lang_vocab: 1024,
            lang_max_tokens: 16,
            variant: Variant::SoftPrompt,
            shared_io: false,
            cont_dim: 18,
            grip_dim: 2,
            proprio_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("domain `{0}` is already registered")]
    DuplicateDomain(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.chunk_len == 0 {
            return bad("chunk_len must be at least 1");
        }
        if self.variant == Variant::SoftPrompt && self.prompt_len == 0 && !self.shared_io {
            return bad("soft_prompt needs prompt_len >= 1");
        }
        if !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be even");
        }
        if self.variant == Variant::HPTProj && self.hpt_latents == 0 {
            return bad("hpt_proj needs hpt_latents >= 1");
        }
        if self.ffn_mult == 0 || self.enc_hidden == 0 || self.max_obs_tokens == 0 || self.num_tasks == 0 {
            return bad("widths must be positive");
        }
        Ok(())
    }

    pub fn prompt_tokens(&self) -> usize {
        if self.variant == Variant::SoftPrompt {
            self.prompt_len
        } else {
            0
        }
    }

    pub fn per_domain_in(&self) -> bool {
        self.variant == Variant::SoftPrompt && !self.shared_io
    }

    pub fn per_domain_out(&self) -> bool {
        match self.variant {
            Variant::SharedOnly => false,
            Variant::SoftPrompt => !self.shared_io,
            _ => true,
        }
    }
}

/// A linear map, optionally carrying a low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lin {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
    pub lora: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub f1: Lin,
    pub f2: Lin,
}

impl BlockIds {
    pub fn matrices(&self) -> [&Lin; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.f1, &self.f2]
    }

    pub fn matrices_mut(&mut self) -> [&mut Lin; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.f1, &mut self.f2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedIds {
    pub main1: Lin,
    pub main2: Lin,
    pub aux1: Lin,
    pub aux2: Lin,
    pub task_emb: ParamId,
    pub lang_emb: Option<ParamId>,
    pub pos_obs: ParamId,
    pub pos_ctrl: ParamId,
    pub in_proj: Option<Lin>,
    pub out_proj: Option<Lin>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HptIds {
    pub latents: ParamId,
    pub wk: Lin,
    pub wv: Lin,
}

/// One registered domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSlot {
    pub hardware: HardwareConfig,
    pub prompt: Option<ParamId>,
    pub in_proj: Option<Lin>,
    pub out_proj: Option<Lin>,
    pub hpt: Option<HptIds>,
    /// Hashed description tokens (language-prompt variant).
    pub lang_tokens: Vec<usize>,
}

impl DomainSlot {
    pub fn id(&self) -> &str {
        &self.hardware.domain_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub shared: usize,
    pub unshared: usize,
    pub adapter: usize,
    pub unshared_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub shared: SharedIds,
    pub blocks: Vec<BlockIds>,
    pub domains: Vec<DomainSlot>,
    /// LoRA scale alpha / r; meaningful only once adapters are attached.
    pub lora_scale: f64,
}

/// Lower-cased alphanumeric words hashed (FNV-1a) into `vocab` slots.
pub fn hash_tokens(text: &str, vocab: usize, max_tokens: usize) -> Vec<usize> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(max_tokens)
        .map(|w| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in w.bytes() {
                h ^= b.to_ascii_lowercase() as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            (h % vocab as u64) as usize
        })
        .collect()
}

pub(crate) struct Builder<'a, T, R> {
    pub ps: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

pub(crate) const INIT_STD: f64 = 0.02;

impl<T: Real, R: rand::Rng> Builder<'_, T, R> {
    pub fn lin_no_bias(&mut self, name: &str, din: usize, dout: usize, group: ParamGroup, owner: Owner) -> Lin {
        let w = self.ps.add(format!("{name}.w"), din, dout, group, true, owner, Init::TruncNormal(INIT_STD), self.rng);
        Lin {
            w,
            b: None,
            din,
            dout,
            lora: None,
        }
    }

    pub fn tensor(&mut self, name: String, rows: usize, cols: usize, group: ParamGroup, owner: Owner, init: Init) -> ParamId {
        self.ps.add(name, rows, cols, group, false, owner, init, self.rng)
    }

    pub fn lin(&mut self, name: &str, din: usize, dout: usize, group: ParamGroup, owner: Owner, zero: bool) -> Lin {
        let init = if zero { Init::Zeros } else { Init::TruncNormal(INIT_STD) };
        let w = self.ps.add(format!("{name}.w"), din, dout, group, true, owner, init, self.rng);
        let b = self.ps.add(format!("{name}.b"), 1, dout, group, false, owner, Init::Zeros, self.rng);
        Lin {
            w,
            b: Some(b),
            din,
            dout,
            lora: None,
        }
    }
}

impl<T: Real> PolicyModel<T> {
    /// Builds and initializes a model with the given domains registered in order.
    pub fn init(cfg: &ModelConfig, domains: &[HardwareConfig], seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        if domains.is_empty() {
            return Err(ModelError::Config("at least one domain is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::default();
        let d = cfg.d_model;
        let mut b = Builder { ps: &mut ps, rng: &mut rng };
        let sh = Owner::Shared;
        let enc = ParamGroup::Encoder;
        let rest = ParamGroup::Rest;
        let tn = Init::TruncNormal(INIT_STD);
        let main1 = b.lin("shared.main_enc.l1", 2, cfg.enc_hidden, enc, sh, false);
        let main2 = b.lin("shared.main_enc.l2", cfg.enc_hidden, d, enc, sh, false);
        let aux1 = b.lin("shared.aux_enc.l1", 2, cfg.enc_hidden, enc, sh, false);
        let aux2 = b.lin("shared.aux_enc.l2", cfg.enc_hidden, d, enc, sh, false);
        let task_emb = b.tensor("shared.task_emb".into(), cfg.num_tasks, d, enc, sh, tn);
        let lang_emb = (cfg.variant == Variant::LangPrompt)
            .then(|| b.tensor("shared.lang_emb".into(), cfg.lang_vocab, d, enc, sh, tn));
        let pos_obs = b.tensor("shared.pos_obs".into(), cfg.max_obs_tokens, d, rest, sh, tn);
        let pos_ctrl = b.tensor("shared.pos_ctrl".into(), cfg.chunk_len, d, rest, sh, tn);
        let in_proj = (!cfg.per_domain_in()).then(|| {
            b.lin(
                "shared.in_proj",
                cfg.cont_dim + cfg.proprio_dim + cfg.time_dim,
                d,
                rest,
                sh,
                false,
            )
        });
        let mut blocks = Vec::with_capacity(cfg.layers);
        let f = cfg.ffn_mult * d;
        for l in 0..cfg.layers {
            let p = format!("blocks.{l}");
            blocks.push(BlockIds {
                ln1_g: b.tensor(format!("{p}.ln1.g"), 1, d, rest, sh, Init::Ones),
                ln1_b: b.tensor(format!("{p}.ln1.b"), 1, d, rest, sh, Init::Zeros),
                q: b.lin(&format!("{p}.attn.q"), d, d, rest, sh, false),
                // A key bias shifts every score of a query equally, so softmax ignores it.
                k: b.lin_no_bias(&format!("{p}.attn.k"), d, d, rest, sh),
                v: b.lin(&format!("{p}.attn.v"), d, d, rest, sh, false),
                o: b.lin(&format!("{p}.attn.o"), d, d, rest, sh, false),
                ln2_g: b.tensor(format!("{p}.ln2.g"), 1, d, rest, sh, Init::Ones),
                ln2_b: b.tensor(format!("{p}.ln2.b"), 1, d, rest, sh, Init::Zeros),
                f1: b.lin(&format!("{p}.ffn.l1"), d, f, rest, sh, false),
                f2: b.lin(&format!("{p}.ffn.l2"), f, d, rest, sh, false),
            });
        }
        let lnf_g = b.tensor("shared.ln_f.g".into(), 1, d, rest, sh, Init::Ones);
        let lnf_b = b.tensor("shared.ln_f.b".into(), 1, d, rest, sh, Init::Zeros);
        let out_proj = (!cfg.per_domain_out())
            .then(|| b.lin("shared.out_proj", d, cfg.cont_dim + cfg.grip_dim, rest, sh, true));
        let mut model = PolicyModel {
            cfg: cfg.clone(),
            params: ps,
            shared: SharedIds {
                main1,
                main2,
                aux1,
                aux2,
                task_emb,
                lang_emb,
                pos_obs,
                pos_ctrl,
                in_proj,
                out_proj,
                lnf_g,
                lnf_b,
            },
            blocks,
            domains: Vec::new(),
            lora_scale: 1.0,
        };
        for hw in domains {
            model.register_domain_with(hw, &mut rng)?;
        }
        Ok(model)
    }

    pub fn domain_index(&self, id: &str) -> Result<usize, ModelError> {
        self.domains
            .iter()
            .position(|s| s.id() == id)
            .ok_or_else(|| ModelError::UnknownDomain(id.to_string()))
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.domains.iter().map(|s| s.id().to_string()).collect()
    }

    /// Registers a new domain with freshly initialized domain parameters.
    pub fn register_domain(&mut self, hw: &HardwareConfig, seed: u64) -> Result<usize, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.register_domain_with(hw, &mut rng)
    }

    fn register_domain_with<R: rand::Rng>(&mut self, hw: &HardwareConfig, rng: &mut R) -> Result<usize, ModelError> {
        hw.validate().map_err(|e| ModelError::Config(format!("{e}")))?;
        if self.domains.iter().any(|s| s.id() == hw.domain_id) {
            return Err(ModelError::DuplicateDomain(hw.domain_id.clone()));
        }
        let cfg = &self.cfg;
        if hw.view_dims.iter().any(|v| v % 2 != 0) {
            return Err(ModelError::Config(format!("domain `{}`: view dims must be even", hw.domain_id)));
        }
        if !cfg.per_domain_in() && (hw.cont_dim() > cfg.cont_dim || hw.proprio_dim > cfg.proprio_dim) {
            return Err(ModelError::Config(format!(
                "domain `{}` exceeds the shared input width",
                hw.domain_id
            )));
        }
        if !cfg.per_domain_out() && (hw.cont_dim() > cfg.cont_dim || hw.grip_dim() > cfg.grip_dim) {
            return Err(ModelError::Config(format!(
                "domain `{}` exceeds the shared output width",
                hw.domain_id
            )));
        }
        let lang_tokens = if cfg.variant == Variant::LangPrompt {
            hash_tokens(&hw.description_text, cfg.lang_vocab, cfg.lang_max_tokens)
        } else {
            Vec::new()
        };
        let n_obs = hw.view_dims.iter().map(|v| v / 2).sum::<usize>() + 1 + lang_tokens.len();
        if n_obs > cfg.max_obs_tokens {
            return Err(ModelError::Config(format!(
                "domain `{}` has {n_obs} observation tokens, more than max_obs_tokens = {}",
                hw.domain_id, cfg.max_obs_tokens
            )));
        }
        let idx = self.domains.len();
        let owner = Owner::Domain(idx);
        let d = cfg.d_model;
        let name = |s: &str| format!("domain.{}.{s}", hw.domain_id);
        let cfg = cfg.clone();
        let mut b = Builder { ps: &mut self.params, rng };
        let prompt = (cfg.prompt_tokens() > 0).then(|| {
            b.tensor(
                name("prompt"),
                cfg.prompt_len,
                d,
                ParamGroup::Prompt,
                owner,
                Init::Normal(INIT_STD),
            )
        });
        let in_proj = cfg.per_domain_in().then(|| {
            b.lin(
                &name("in_proj"),
                hw.cont_dim() + hw.proprio_dim + cfg.time_dim,
                d,
                ParamGroup::Rest,
                owner,
                false,
            )
        });
        let hpt = (cfg.variant == Variant::HPTProj).then(|| HptIds {
            latents: b.tensor(
                name("hpt.latents"),
                cfg.hpt_latents,
                d,
                ParamGroup::Rest,
                owner,
                Init::TruncNormal(INIT_STD),
            ),
            wk: b.lin_no_bias(&name("hpt.wk"), d, d, ParamGroup::Rest, owner),
            wv: b.lin(&name("hpt.wv"), d, d, ParamGroup::Rest, owner, false),
        });
        let out_proj = cfg.per_domain_out().then(|| {
            b.lin(
                &name("out_proj"),
                d,
                hw.cont_dim() + hw.grip_dim(),
                ParamGroup::Rest,
                owner,
                true,
            )
        });
        self.domains.push(DomainSlot {
            hardware: hw.clone(),
            prompt,
            in_proj,
            out_proj,
            hpt,
            lang_tokens,
        });
        Ok(idx)
    }

    /// Parameter ids owned by domain `idx`.
    pub fn domain_params(&self, idx: usize) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params.infos[i].owner == Owner::Domain(idx))
            .collect()
    }

    /// Overwrites domain `dst`'s tensors with those of `src` where the
    /// shapes agree; returns how many tensors were copied.
    pub fn copy_domain_params(&mut self, src: usize, dst: usize, include_prompt: bool) -> usize {
        let suffix = |s: &str, id: &str| s.strip_prefix(&format!("domain.{id}.")).map(String::from);
        let src_id = self.domains[src].id().to_string();
        let dst_id = self.domains[dst].id().to_string();
        let mut copied = 0;
        for d in self.domain_params(dst) {
            let Some(tail) = suffix(&self.params.infos[d].name, &dst_id) else { continue };
            if tail == "prompt" && !include_prompt {
                continue;
            }
            if let Some(s) = self.params.find(&format!("domain.{src_id}.{tail}")) {
                let (a, b) = (&self.params.infos[s], &self.params.infos[d]);
                if a.rows == b.rows && a.cols == b.cols {
                    self.params.data[d] = self.params.data[s].clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn param_report(&self) -> ParamReport {
        let mut r = ParamReport {
            total: 0,
            shared: 0,
            unshared: 0,
            adapter: 0,
            unshared_fraction: 0.0,
        };
        for info in &self.params.infos {
            let n = info.len();
            r.total += n;
            match info.owner {
                Owner::Shared => r.shared += n,
                Owner::Domain(_) => r.unshared += n,
                Owner::Adapter => r.adapter += n,
            }
        }
        r.unshared_fraction = if r.total == 0 {
            0.0
        } else {
            r.unshared as f64 / r.total as f64
        };
        r
    }

    /// Converts every parameter to another precision, keeping ids.
    pub fn cast<U: Real>(&self) -> PolicyModel<U> {
        PolicyModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            shared: self.shared.clone(),
            blocks: self.blocks.clone(),
            domains: self.domains.clone(),
            lora_scale: self.lora_scale,
        }
    }

    /// Trainability mask selecting parameters by predicate.
    pub fn mask<F: Fn(&ParamInfo) -> bool>(&self, f: F) -> Vec<bool> {
        self.params.infos.iter().map(f).collect()
    }

    /// Mean-pooled prompt of each domain (soft-prompt variant only).
    pub fn mean_prompts(&self) -> Vec<(String, String, Vec<f64>)> {
        self.domains
            .iter()
            .filter_map(|s| {
                let p = s.prompt?;
                let info = &self.params.infos[p];
                let data = self.params.get(p);
                let mut m = alloc::vec![0.0; info.cols];
                for r in 0..info.rows {
                    for c in 0..info.cols {
                        m[c] += data[r * info.cols + c].as_f64() / info.rows as f64;
                    }
                }
                Some((s.id().to_string(), s.hardware.embodiment_name.clone(), m))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
