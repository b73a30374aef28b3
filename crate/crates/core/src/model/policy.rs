//! Batched forward and reverse passes. Samples from different domains can
//! share a batch: row-wise layers run on the stacked token matrix while
//! attention stays within each sample's segment.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::{self, AttnCache};
use super::{BlockIds, Grads, Lin, ModelError, ParamStore, PolicyModel};
use crate::real::Real;

/// One conditioning + noisy-chunk query of the velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub domain: usize,
    /// Per-view keypoint features, main view first.
    pub views: Vec<Vec<T>>,
    pub proprio: Vec<T>,
    pub task_id: usize,
    /// Noisy chunk, `K x cont_dim` of the domain.
    pub a_t: Vec<T>,
    pub t: T,
}

/// Velocity (`K x cont`) and gripper logits (`K x grip`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub velocity: Vec<T>,
    pub logits: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub prompts: usize,
    pub obs: usize,
    pub ctrl: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.prompts + self.obs + self.ctrl
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct EncCache<T> {
    x: Vec<T>,
    u: Vec<T>,
    h: Vec<T>,
    xa1: Option<Vec<T>>,
    xa2: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
struct HptCache<T> {
    obs: Vec<T>,
    kk: Vec<T>,
    vv: Vec<T>,
    attn: AttnCache<T>,
}

#[derive(Debug, Clone)]
struct FrontCache<T> {
    layout: SequenceLayout,
    offset: usize,
    n_raw: usize,
    enc: Vec<EncCache<T>>,
    hpt: Option<HptCache<T>>,
    ctrl_in: Vec<T>,
    in_lin: Lin,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<AttnCache<T>>,
    ctx: Vec<T>,
    xa: [Option<Vec<T>>; 6],
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Everything the reverse pass needs from [`PolicyModel::forward_batch`].
#[derive(Debug, Clone)]
pub struct BatchCache<T> {
    fronts: Vec<FrontCache<T>>,
    blocks: Vec<BlockCache<T>>,
    rows: usize,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    y: Vec<T>,
    heads: Vec<(Lin, Option<Vec<T>>)>,
}

impl Lin {
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], n: usize, scale: T) -> (Vec<T>, Option<Vec<T>>) {
        let mut y = ops::linear(x, n, self.din, ps.get(self.w), self.b.map(|b| ps.get(b)), self.dout);
        let xa = self.lora.map(|(a, bm)| {
            let r = ps.infos[a].cols;
            let xa = ops::linear(x, n, self.din, ps.get(a), None, r);
            T::gemm(n, r, self.dout, scale, &xa, false, ps.get(bm), false, T::one(), &mut y);
            xa
        });
        (y, xa)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &[T],
        n: usize,
        xa: Option<&[T]>,
        dy: &[T],
        grads: &mut Grads<T>,
        mut dx: Option<&mut [T]>,
        scale: T,
    ) {
        let (din, dout) = (self.din, self.dout);
        if let Some(dw) = grads.slot(self.w) {
            T::gemm(din, n, dout, T::one(), x, true, dy, false, T::one(), dw);
        }
        if let Some(b) = self.b {
            if let Some(db) = grads.slot(b) {
                for row in dy.chunks_exact(dout) {
                    for (g, v) in db.iter_mut().zip(row) {
                        *g += *v;
                    }
                }
            }
        }
        if let (Some((a, bm)), Some(xa)) = (self.lora, xa) {
            let r = ps.infos[a].cols;
            if let Some(db) = grads.slot(bm) {
                T::gemm(r, n, dout, scale, xa, true, dy, false, T::one(), db);
            }
            if grads.wants(a) || dx.is_some() {
                let mut dxa = vec![T::zero(); n * r];
                T::gemm(n, dout, r, scale, dy, false, ps.get(bm), true, T::zero(), &mut dxa);
                if let Some(da) = grads.slot(a) {
                    T::gemm(din, n, r, T::one(), x, true, &dxa, false, T::one(), da);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    T::gemm(n, r, din, T::one(), &dxa, false, ps.get(a), true, T::one(), dx);
                }
            }
        }
        if let Some(dx) = dx {
            T::gemm(n, dout, din, T::one(), dy, false, ps.get(self.w), true, T::one(), dx);
        }
    }
}

fn add_rows<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

fn col_sum_into<T: Real>(dst: &mut [T], dy: &[T], d: usize) {
    for row in dy.chunks_exact(d) {
        add_rows(dst, row);
    }
}

fn finite<T: Real>(x: &[T]) -> bool {
    x.iter().all(|v| v.is_finite())
}

impl<T: Real> PolicyModel<T> {
    fn scale(&self) -> T {
        T::of(self.lora_scale)
    }

    fn check_input(&self, inp: &ModelInput<T>) -> Result<(), ModelError> {
        let slot = self
            .domains
            .get(inp.domain)
            .ok_or_else(|| ModelError::UnknownDomain(format!("#{}", inp.domain)))?;
        let hw = &slot.hardware;
        let bad = |m: alloc::string::String| Err(ModelError::Input(format!("domain `{}`: {m}", hw.domain_id)));
        if inp.views.len() != hw.views.len() {
            return bad(format!("expected {} views, got {}", hw.views.len(), inp.views.len()));
        }
        for (v, (x, n)) in inp.views.iter().zip(&hw.view_dims).enumerate() {
            if x.len() != *n {
                return bad(format!("view {v} has {} features, expected {n}", x.len()));
            }
        }
        if inp.proprio.len() != hw.proprio_dim {
            return bad(format!("proprio has {} values, expected {}", inp.proprio.len(), hw.proprio_dim));
        }
        if inp.a_t.len() != self.cfg.chunk_len * hw.cont_dim() {
            return bad(format!("noisy chunk has {} values, expected {}", inp.a_t.len(), self.cfg.chunk_len * hw.cont_dim()));
        }
        if inp.task_id >= self.cfg.num_tasks {
            return bad(format!("task id {} out of range", inp.task_id));
        }
        let all_finite = inp.views.iter().all(|v| finite(v)) && finite(&inp.proprio) && finite(&inp.a_t) && inp.t.is_finite();
        if !all_finite {
            return bad("non-finite input".into());
        }
        Ok(())
    }

    /// Encoder stub for one view: `l2(gelu(l1(keypoint)))` per keypoint.
    fn encode_view(&self, view: &[T], main: bool) -> (Vec<T>, EncCache<T>) {
        let (l1, l2) = if main {
            (&self.shared.main1, &self.shared.main2)
        } else {
            (&self.shared.aux1, &self.shared.aux2)
        };
        let n = view.len() / 2;
        let s = self.scale();
        let (u, xa1) = l1.forward(&self.params, view, n, s);
        let h = ops::gelu(&u);
        let (tok, xa2) = l2.forward(&self.params, &h, n, s);
        (
            tok,
            EncCache {
                x: view.to_vec(),
                u,
                h,
                xa1,
                xa2,
            },
        )
    }

    /// Token rows and layout of one sample, appended to `seq`.
    fn front(&self, inp: &ModelInput<T>, seq: &mut Vec<T>) -> Result<FrontCache<T>, ModelError> {
        self.check_input(inp)?;
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let slot = &self.domains[inp.domain];
        let hw = &slot.hardware;
        let ps = &self.params;
        let offset = seq.len() / d;

        let mut prompts = 0;
        if let Some(p) = slot.prompt {
            seq.extend_from_slice(ps.get(p));
            prompts = ps.infos[p].rows;
        }

        let mut obs: Vec<T> = Vec::new();
        let mut enc = Vec::with_capacity(inp.views.len());
        for (vi, view) in inp.views.iter().enumerate() {
            let (tok, c) = self.encode_view(view, vi == 0);
            obs.extend_from_slice(&tok);
            enc.push(c);
            if vi == 0 {
                let te = ps.get(self.shared.task_emb);
                obs.extend_from_slice(&te[inp.task_id * d..(inp.task_id + 1) * d]);
            }
        }
        if let Some(le) = self.shared.lang_emb {
            let le = ps.get(le);
            for &t in &slot.lang_tokens {
                obs.extend_from_slice(&le[t * d..(t + 1) * d]);
            }
        }
        let n_raw = obs.len() / d;
        add_rows(&mut obs, &ps.get(self.shared.pos_obs)[..n_raw * d]);

        let (n_obs, hpt) = match &slot.hpt {
            Some(h) => {
                let s = self.scale();
                let lat = ps.get(h.latents);
                let m = ps.infos[h.latents].rows;
                let (kk, _) = h.wk.forward(ps, &obs, n_raw, s);
                let (vv, _) = h.wv.forward(ps, &obs, n_raw, s);
                let (mut r, attn) = ops::attention(lat, &kk, &vv, m, n_raw, d, 1);
                add_rows(&mut r, lat);
                seq.extend_from_slice(&r);
                (m, Some(HptCache { obs, kk, vv, attn }))
            }
            None => {
                seq.extend_from_slice(&obs);
                (n_raw, None)
            }
        };

        let k = cfg.chunk_len;
        let (in_lin, in_c, in_p) = match slot.in_proj {
            Some(l) => (l, hw.cont_dim(), hw.proprio_dim),
            None => (self.shared.in_proj.expect("shared input projection"), cfg.cont_dim, cfg.proprio_dim),
        };
        let temb = ops::time_embedding(inp.t, cfg.time_dim);
        let c = hw.cont_dim();
        let width = in_c + in_p + cfg.time_dim;
        let mut ctrl_in = vec![T::zero(); k * width];
        for j in 0..k {
            let row = &mut ctrl_in[j * width..(j + 1) * width];
            row[..c].copy_from_slice(&inp.a_t[j * c..(j + 1) * c]);
            row[in_c..in_c + hw.proprio_dim].copy_from_slice(&inp.proprio);
            row[in_c + in_p..].copy_from_slice(&temb);
        }
        let (mut ctrl, _) = in_lin.forward(ps, &ctrl_in, k, self.scale());
        add_rows(&mut ctrl, ps.get(self.shared.pos_ctrl));
        seq.extend_from_slice(&ctrl);

        Ok(FrontCache {
            layout: SequenceLayout {
                prompts,
                obs: n_obs,
                ctrl: k,
            },
            offset,
            n_raw,
            enc,
            hpt,
            ctrl_in,
            in_lin,
        })
    }

    /// Input token matrix (`len x d`) of one sample before the backbone.
    pub fn assemble_sequence(&self, inp: &ModelInput<T>) -> Result<(Vec<T>, SequenceLayout), ModelError> {
        let mut seq = Vec::new();
        let c = self.front(inp, &mut seq)?;
        Ok((seq, c.layout))
    }

    fn block_forward(&self, b: &BlockIds, x: &mut [T], segs: &[(usize, usize)]) -> BlockCache<T> {
        let ps = &self.params;
        let d = self.cfg.d_model;
        let n = x.len() / d;
        let s = self.scale();
        let (h1, xhat1, rstd1) = ops::layer_norm(x, d, ps.get(b.ln1_g), ps.get(b.ln1_b));
        let (q, xaq) = b.q.forward(ps, &h1, n, s);
        let (k, xak) = b.k.forward(ps, &h1, n, s);
        let (v, xav) = b.v.forward(ps, &h1, n, s);
        let mut ctx = vec![T::zero(); n * d];
        let mut attn = Vec::with_capacity(segs.len());
        for &(off, len) in segs {
            let r = off * d..(off + len) * d;
            let (c, a) = ops::attention(&q[r.clone()], &k[r.clone()], &v[r.clone()], len, len, d, self.cfg.heads);
            ctx[r].copy_from_slice(&c);
            attn.push(a);
        }
        let (o, xao) = b.o.forward(ps, &ctx, n, s);
        add_rows(x, &o);
        let (h2, xhat2, rstd2) = ops::layer_norm(x, d, ps.get(b.ln2_g), ps.get(b.ln2_b));
        let (u, xa1) = b.f1.forward(ps, &h2, n, s);
        let g = ops::gelu(&u);
        let (f, xa2) = b.f2.forward(ps, &g, n, s);
        add_rows(x, &f);
        BlockCache {
            xhat1,
            rstd1,
            h1,
            q,
            k,
            v,
            attn,
            ctx,
            xa: [xaq, xak, xav, xao, xa1, xa2],
            xhat2,
            rstd2,
            h2,
            u,
            g,
        }
    }

    /// Forward pass over a ragged batch.
    pub fn forward_batch(&self, batch: &[ModelInput<T>]) -> Result<(Vec<ModelOutput<T>>, BatchCache<T>), ModelError> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let k = cfg.chunk_len;
        let mut x = Vec::new();
        let mut fronts = Vec::with_capacity(batch.len());
        for inp in batch {
            fronts.push(self.front(inp, &mut x)?);
        }
        if !finite(&x) {
            return Err(ModelError::NonFinite { layer: 0 });
        }
        let segs: Vec<(usize, usize)> = fronts.iter().map(|f| (f.offset, f.layout.len())).collect();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            blocks.push(self.block_forward(b, &mut x, &segs));
            if !finite(&x) {
                return Err(ModelError::NonFinite { layer: l + 1 });
            }
        }
        let mut ctrl_rows = Vec::with_capacity(batch.len() * k * d);
        for f in &fronts {
            let start = f.offset + f.layout.prompts + f.layout.obs;
            ctrl_rows.extend_from_slice(&x[start * d..(start + k) * d]);
        }
        let ps = &self.params;
        let (y, xhat_f, rstd_f) = ops::layer_norm(&ctrl_rows, d, ps.get(self.shared.lnf_g), ps.get(self.shared.lnf_b));
        let mut outs = Vec::with_capacity(batch.len());
        let mut heads = Vec::with_capacity(batch.len());
        for (i, inp) in batch.iter().enumerate() {
            let slot = &self.domains[inp.domain];
            let (lin, grip_at) = match slot.out_proj {
                Some(l) => (l, slot.hardware.cont_dim()),
                None => (self.shared.out_proj.expect("shared output projection"), cfg.cont_dim),
            };
            let (o, xa) = lin.forward(ps, &y[i * k * d..(i + 1) * k * d], k, self.scale());
            let (c, g) = (slot.hardware.cont_dim(), slot.hardware.grip_dim());
            let mut velocity = Vec::with_capacity(k * c);
            let mut logits = Vec::with_capacity(k * g);
            for row in o.chunks_exact(lin.dout) {
                velocity.extend_from_slice(&row[..c]);
                logits.extend_from_slice(&row[grip_at..grip_at + g]);
            }
            if !finite(&velocity) || !finite(&logits) {
                return Err(ModelError::NonFinite { layer: self.blocks.len() + 1 });
            }
            outs.push(ModelOutput { velocity, logits });
            heads.push((lin, xa));
        }
        let rows = x.len() / d;
        Ok((
            outs,
            BatchCache {
                fronts,
                blocks,
                rows,
                xhat_f,
                rstd_f,
                y,
                heads,
            },
        ))
    }

    pub fn forward(&self, inp: &ModelInput<T>) -> Result<ModelOutput<T>, ModelError> {
        let (mut o, _) = self.forward_batch(core::slice::from_ref(inp))?;
        Ok(o.pop().expect("one output"))
    }

    fn block_backward(&self, b: &BlockIds, c: &BlockCache<T>, dx: Vec<T>, segs: &[(usize, usize)], grads: &mut Grads<T>) -> Vec<T> {
        let ps = &self.params;
        let d = self.cfg.d_model;
        let n = dx.len() / d;
        let s = self.scale();
        let f = b.f1.dout;
        let mut dg = vec![T::zero(); n * f];
        b.f2.backward(ps, &c.g, n, c.xa[5].as_deref(), &dx, grads, Some(&mut dg), s);
        let mut du = vec![T::zero(); n * f];
        ops::gelu_backward(&c.u, &dg, &mut du);
        let mut dh2 = vec![T::zero(); n * d];
        b.f1.backward(ps, &c.h2, n, c.xa[4].as_deref(), &du, grads, Some(&mut dh2), s);
        let mut dx1 = dx;
        ops::layer_norm_backward(&dh2, &c.xhat2, &c.rstd2, d, ps.get(b.ln2_g), grads.slot(b.ln2_g), None, &mut dx1);
        if let Some(db) = grads.slot(b.ln2_b) {
            col_sum_into(db, &dh2, d);
        }

        let mut dctx = vec![T::zero(); n * d];
        b.o.backward(ps, &c.ctx, n, c.xa[3].as_deref(), &dx1, grads, Some(&mut dctx), s);
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        for (&(off, len), a) in segs.iter().zip(&c.attn) {
            let r = off * d..(off + len) * d;
            ops::attention_backward(
                &dctx[r.clone()],
                &c.q[r.clone()],
                &c.k[r.clone()],
                &c.v[r.clone()],
                a,
                len,
                len,
                d,
                self.cfg.heads,
                &mut dq[r.clone()],
                &mut dk[r.clone()],
                &mut dv[r],
            );
        }
        let mut dh1 = vec![T::zero(); n * d];
        b.q.backward(ps, &c.h1, n, c.xa[0].as_deref(), &dq, grads, Some(&mut dh1), s);
        b.k.backward(ps, &c.h1, n, c.xa[1].as_deref(), &dk, grads, Some(&mut dh1), s);
        b.v.backward(ps, &c.h1, n, c.xa[2].as_deref(), &dv, grads, Some(&mut dh1), s);
        let mut dx0 = dx1;
        ops::layer_norm_backward(&dh1, &c.xhat1, &c.rstd1, d, ps.get(b.ln1_g), grads.slot(b.ln1_g), None, &mut dx0);
        if let Some(db) = grads.slot(b.ln1_b) {
            col_sum_into(db, &dh1, d);
        }
        dx0
    }

    fn encoder_backward(&self, main: bool, c: &EncCache<T>, dtok: &[T], grads: &mut Grads<T>) {
        let (l1, l2) = if main {
            (&self.shared.main1, &self.shared.main2)
        } else {
            (&self.shared.aux1, &self.shared.aux2)
        };
        let ps = &self.params;
        let active = [l1.w, l2.w]
            .iter()
            .chain(l1.b.iter())
            .chain(l2.b.iter())
            .chain(l1.lora.iter().flat_map(|(a, b)| [a, b]))
            .chain(l2.lora.iter().flat_map(|(a, b)| [a, b]))
            .any(|&id| grads.wants(id));
        if !active {
            return;
        }
        let n = c.x.len() / 2;
        let s = self.scale();
        let mut dh = vec![T::zero(); n * l2.din];
        l2.backward(ps, &c.h, n, c.xa2.as_deref(), dtok, grads, Some(&mut dh), s);
        let mut du = vec![T::zero(); n * l1.dout];
        ops::gelu_backward(&c.u, &dh, &mut du);
        l1.backward(ps, &c.x, n, c.xa1.as_deref(), &du, grads, None, s);
    }

    fn front_backward(&self, inp: &ModelInput<T>, f: &FrontCache<T>, dseq: &[T], grads: &mut Grads<T>) {
        let d = self.cfg.d_model;
        let ps = &self.params;
        let slot = &self.domains[inp.domain];
        let s = self.scale();
        let l = f.layout;
        let (dp, rest) = dseq.split_at(l.prompts * d);
        let (dobs_eff, dctrl) = rest.split_at(l.obs * d);
        if let Some(p) = slot.prompt {
            if let Some(g) = grads.slot(p) {
                add_rows(g, dp);
            }
        }

        let dobs: Vec<T> = match (&slot.hpt, &f.hpt) {
            (Some(h), Some(c)) => {
                let m = l.obs;
                if let Some(g) = grads.slot(h.latents) {
                    add_rows(g, dobs_eff);
                }
                let mut dlat = vec![T::zero(); m * d];
                let mut dkk = vec![T::zero(); f.n_raw * d];
                let mut dvv = vec![T::zero(); f.n_raw * d];
                ops::attention_backward(
                    dobs_eff,
                    ps.get(h.latents),
                    &c.kk,
                    &c.vv,
                    &c.attn,
                    m,
                    f.n_raw,
                    d,
                    1,
                    &mut dlat,
                    &mut dkk,
                    &mut dvv,
                );
                if let Some(g) = grads.slot(h.latents) {
                    add_rows(g, &dlat);
                }
                let mut dobs = vec![T::zero(); f.n_raw * d];
                h.wk.backward(ps, &c.obs, f.n_raw, None, &dkk, grads, Some(&mut dobs), s);
                h.wv.backward(ps, &c.obs, f.n_raw, None, &dvv, grads, Some(&mut dobs), s);
                dobs
            }
            _ => dobs_eff.to_vec(),
        };
        if let Some(g) = grads.slot(self.shared.pos_obs) {
            add_rows(&mut g[..f.n_raw * d], &dobs);
        }
        let mut row = 0;
        for (vi, c) in f.enc.iter().enumerate() {
            let n = c.x.len() / 2;
            self.encoder_backward(vi == 0, c, &dobs[row * d..(row + n) * d], grads);
            row += n;
            if vi == 0 {
                if let Some(g) = grads.slot(self.shared.task_emb) {
                    add_rows(&mut g[inp.task_id * d..(inp.task_id + 1) * d], &dobs[row * d..(row + 1) * d]);
                }
                row += 1;
            }
        }
        if let Some(le) = self.shared.lang_emb {
            if let Some(g) = grads.slot(le) {
                for &t in &slot.lang_tokens {
                    add_rows(&mut g[t * d..(t + 1) * d], &dobs[row * d..(row + 1) * d]);
                    row += 1;
                }
            }
        }

        if let Some(g) = grads.slot(self.shared.pos_ctrl) {
            add_rows(g, dctrl);
        }
        f.in_lin.backward(ps, &f.ctrl_in, l.ctrl, None, dctrl, grads, None, s);
    }

    /// Accumulates parameter gradients of `sum_i <douts_i, outs_i>` into `grads`.
    pub fn backward_batch(&self, batch: &[ModelInput<T>], cache: &BatchCache<T>, douts: &[ModelOutput<T>], grads: &mut Grads<T>) {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let k = cfg.chunk_len;
        let ps = &self.params;
        let s = self.scale();
        let mut dy = vec![T::zero(); batch.len() * k * d];
        for (i, (inp, dout)) in batch.iter().zip(douts).enumerate() {
            let slot = &self.domains[inp.domain];
            let (lin, xa) = &cache.heads[i];
            let grip_at = if slot.out_proj.is_some() { slot.hardware.cont_dim() } else { cfg.cont_dim };
            let (c, g) = (slot.hardware.cont_dim(), slot.hardware.grip_dim());
            let mut d_o = vec![T::zero(); k * lin.dout];
            for j in 0..k {
                let row = &mut d_o[j * lin.dout..(j + 1) * lin.dout];
                row[..c].copy_from_slice(&dout.velocity[j * c..(j + 1) * c]);
                row[grip_at..grip_at + g].copy_from_slice(&dout.logits[j * g..(j + 1) * g]);
            }
            let r = i * k * d..(i + 1) * k * d;
            lin.backward(ps, &cache.y[r.clone()], k, xa.as_deref(), &d_o, grads, Some(&mut dy[r]), s);
        }
        let mut dctrl = vec![T::zero(); dy.len()];
        ops::layer_norm_backward(
            &dy,
            &cache.xhat_f,
            &cache.rstd_f,
            d,
            ps.get(self.shared.lnf_g),
            grads.slot(self.shared.lnf_g),
            None,
            &mut dctrl,
        );
        if let Some(db) = grads.slot(self.shared.lnf_b) {
            col_sum_into(db, &dy, d);
        }
        let mut dx = vec![T::zero(); cache.rows * d];
        for (i, f) in cache.fronts.iter().enumerate() {
            let start = f.offset + f.layout.prompts + f.layout.obs;
            dx[start * d..(start + k) * d].copy_from_slice(&dctrl[i * k * d..(i + 1) * k * d]);
        }
        let segs: Vec<(usize, usize)> = cache.fronts.iter().map(|f| (f.offset, f.layout.len())).collect();
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(b, c, dx, &segs, grads);
        }
        for (inp, f) in batch.iter().zip(&cache.fronts) {
            let n = f.layout.len();
            self.front_backward(inp, f, &dx[f.offset * d..(f.offset + n) * d], grads);
        }
    }
}
