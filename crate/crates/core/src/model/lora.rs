//! Low-rank adapters on the backbone's attention and feed-forward matrices.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Init, Owner, ParamGroup, ParamId, ParamStore, PolicyModel, INIT_STD};
use crate::real::Real;

const MATRIX_NAMES: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.l1", "ffn.l2"];

/// A folded adapter pair, kept so the fold can be undone.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactor<T> {
    pub block: usize,
    pub matrix: usize,
    pub rank: usize,
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> PolicyModel<T> {
    /// Calls `f` on every parameter id referenced by the model structure.
    pub fn visit_ids_mut<F: FnMut(&mut ParamId)>(&mut self, mut f: F) {
        let lin = |l: &mut super::Lin, f: &mut F| {
            f(&mut l.w);
            if let Some(b) = l.b.as_mut() {
                f(b);
            }
            if let Some((a, b)) = l.lora.as_mut() {
                f(a);
                f(b);
            }
        };
        let s = &mut self.shared;
        for l in [&mut s.main1, &mut s.main2, &mut s.aux1, &mut s.aux2] {
            lin(l, &mut f);
        }
        f(&mut s.task_emb);
        if let Some(x) = s.lang_emb.as_mut() {
            f(x);
        }
        f(&mut s.pos_obs);
        f(&mut s.pos_ctrl);
        for l in [s.in_proj.as_mut(), s.out_proj.as_mut()].into_iter().flatten() {
            lin(l, &mut f);
        }
        f(&mut s.lnf_g);
        f(&mut s.lnf_b);
        for b in &mut self.blocks {
            for id in [&mut b.ln1_g, &mut b.ln1_b, &mut b.ln2_g, &mut b.ln2_b] {
                f(id);
            }
            for l in b.matrices_mut() {
                lin(l, &mut f);
            }
        }
        for d in &mut self.domains {
            if let Some(p) = d.prompt.as_mut() {
                f(p);
            }
            for l in [d.in_proj.as_mut(), d.out_proj.as_mut()].into_iter().flatten() {
                lin(l, &mut f);
            }
            if let Some(h) = d.hpt.as_mut() {
                f(&mut h.latents);
                lin(&mut h.wk, &mut f);
                lin(&mut h.wv, &mut f);
            }
        }
    }

    /// Drops the given tensors and renumbers every remaining id.
    pub fn remove_params(&mut self, ids: &[ParamId]) {
        let n = self.params.len();
        let mut map = alloc::vec![usize::MAX; n];
        let mut store = ParamStore::default();
        for i in 0..n {
            if !ids.contains(&i) {
                map[i] = store.infos.len();
                store.infos.push(self.params.infos[i].clone());
                store.data.push(core::mem::take(&mut self.params.data[i]));
            }
        }
        self.params = store;
        self.visit_ids_mut(|id| {
            assert!(map[*id] != usize::MAX, "removed tensor still referenced");
            *id = map[*id];
        });
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.matrices().iter().any(|l| l.lora.is_some()))
    }

    /// Attaches rank-`rank` adapters (A ~ N(0, 0.02), B = 0) to every
    /// attention and feed-forward matrix. Returns the new parameter ids.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Vec<ParamId> {
        assert!(rank >= 1, "adapter rank must be at least 1");
        assert!(!self.has_lora(), "adapters already attached");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut new = Vec::new();
        for bi in 0..self.blocks.len() {
            for (mi, name) in MATRIX_NAMES.iter().enumerate() {
                let (din, dout) = {
                    let l = self.blocks[bi].matrices()[mi];
                    (l.din, l.dout)
                };
                let a = self.params.add(
                    format!("adapter.blocks.{bi}.{name}.a"),
                    din,
                    rank,
                    ParamGroup::Rest,
                    false,
                    Owner::Adapter,
                    Init::Normal(INIT_STD),
                    &mut rng,
                );
                let b = self.params.add(
                    format!("adapter.blocks.{bi}.{name}.b"),
                    rank,
                    dout,
                    ParamGroup::Rest,
                    false,
                    Owner::Adapter,
                    Init::Zeros,
                    &mut rng,
                );
                self.blocks[bi].matrices_mut()[mi].lora = Some((a, b));
                new.extend([a, b]);
            }
        }
        self.lora_scale = alpha / rank as f64;
        new
    }

    /// Folds `W <- W + (alpha/r) A B` and removes the adapters.
    pub fn merge_lora(&mut self) -> Vec<LoraFactor<T>> {
        let s = T::of(self.lora_scale);
        let mut factors = Vec::new();
        let mut drop = Vec::new();
        for bi in 0..self.blocks.len() {
            for mi in 0..MATRIX_NAMES.len() {
                let l = *self.blocks[bi].matrices()[mi];
                let Some((a, b)) = l.lora else { continue };
                let r = self.params.infos[a].cols;
                let (av, bv) = (self.params.data[a].clone(), self.params.data[b].clone());
                T::gemm(l.din, r, l.dout, s, &av, false, &bv, false, T::one(), &mut self.params.data[l.w]);
                factors.push(LoraFactor {
                    block: bi,
                    matrix: mi,
                    rank: r,
                    a: av,
                    b: bv,
                });
                self.blocks[bi].matrices_mut()[mi].lora = None;
                drop.extend([a, b]);
            }
        }
        self.remove_params(&drop);
        factors
    }

    /// Reverses [`merge_lora`](Self::merge_lora).
    pub fn unmerge_lora(&mut self, factors: &[LoraFactor<T>]) {
        let s = T::of(self.lora_scale);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for f in factors {
            let l = *self.blocks[f.block].matrices()[f.matrix];
            T::gemm(l.din, f.rank, l.dout, -s, &f.a, false, &f.b, false, T::one(), &mut self.params.data[l.w]);
            let name = MATRIX_NAMES[f.matrix];
            let a = self.params.add(
                format!("adapter.blocks.{}.{name}.a", f.block),
                l.din,
                f.rank,
                ParamGroup::Rest,
                false,
                Owner::Adapter,
                Init::Zeros,
                &mut rng,
            );
            let b = self.params.add(
                format!("adapter.blocks.{}.{name}.b", f.block),
                f.rank,
                l.dout,
                ParamGroup::Rest,
                false,
                Owner::Adapter,
                Init::Zeros,
                &mut rng,
            );
            self.params.data[a].clone_from(&f.a);
            self.params.data[b].clone_from(&f.b);
            self.blocks[f.block].matrices_mut()[f.matrix].lora = Some((a, b));
        }
    }
}
