//! Toy multi-modal encoder: a per-frame visual MLP, mean-pooled token
//! embeddings, positional and modality-type terms, and stacked fusion
//! blocks (linear + tanh + layernorm over the concatenated modal summary)
//! producing per-frame fused features.
//!
//! Forward code is generic over [`Context`], so the identical graph runs on
//! the recording tape during cloud training and on the tape-free evaluator
//! on the device path.

use crate::numerics::{Context, NumericsError, ParamBinder, ParamStore, SeedRng, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_raw: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_frames: usize,
    pub fusion_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // d_model = 192 keeps the one-frame upload at exactly 192 * 4 = 768 bytes.
        Self { d_raw: 32, d_model: 192, vocab_size: 64, max_frames: 8, fusion_blocks: 1 }
    }
}

pub struct FusionBlockParams<H> {
    pub w: H,
    pub b: H,
    pub ln_gamma: H,
    pub ln_beta: H,
}

pub struct EncoderParams<H> {
    pub visual_w: H,
    pub visual_b: H,
    pub token_embed: H,
    pub pos_frame: H,
    pub type_visual: H,
    pub type_text: H,
    pub blocks: Vec<FusionBlockParams<H>>,
    d_model: usize,
    max_frames: usize,
}

/// Create freshly initialized encoder tensors in the store under `encoder.*`.
pub fn init_params(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut SeedRng) {
    let (dr, dm) = (cfg.d_raw, cfg.d_model);
    let scaled = |rng: &mut SeedRng, n: usize, s: f64| -> Vec<f64> {
        rng.normal_vec(n).into_iter().map(|x| x * s).collect()
    };
    store.insert(
        "encoder.visual.w",
        Tensor::new(vec![dm, dr], scaled(rng, dm * dr, 1.0 / (dr as f64).sqrt())).unwrap(),
    );
    store.insert("encoder.visual.b", Tensor::zeros(vec![dm]));
    store.insert(
        "encoder.token_embed",
        Tensor::new(vec![cfg.vocab_size, dm], scaled(rng, cfg.vocab_size * dm, 0.5)).unwrap(),
    );
    store.insert(
        "encoder.pos_frame",
        Tensor::new(vec![cfg.max_frames, dm], scaled(rng, cfg.max_frames * dm, 0.1)).unwrap(),
    );
    store.insert("encoder.type.visual", Tensor::new(vec![dm], scaled(rng, dm, 0.1)).unwrap());
    store.insert("encoder.type.text", Tensor::new(vec![dm], scaled(rng, dm, 0.1)).unwrap());
    for b in 0..cfg.fusion_blocks {
        let fan_in = 2 * dm;
        store.insert(
            &format!("encoder.fuse{b}.w"),
            Tensor::new(vec![dm, fan_in], scaled(rng, dm * fan_in, 1.0 / (fan_in as f64).sqrt())).unwrap(),
        );
        store.insert(&format!("encoder.fuse{b}.b"), Tensor::zeros(vec![dm]));
        store.insert(&format!("encoder.fuse{b}.ln_gamma"), Tensor::new(vec![dm], vec![1.0; dm]).unwrap());
        store.insert(&format!("encoder.fuse{b}.ln_beta"), Tensor::zeros(vec![dm]));
    }
}

/// Bind encoder parameters out of a store into a graph context.
pub fn bind<C: Context>(
    binder: &mut ParamBinder<'_, C>,
    cfg: &EncoderConfig,
    trainable: bool,
) -> crate::Result<EncoderParams<C::Handle>> {
    let mut blocks = Vec::with_capacity(cfg.fusion_blocks);
    for b in 0..cfg.fusion_blocks {
        blocks.push(FusionBlockParams {
            w: binder.bind(&format!("encoder.fuse{b}.w"), trainable)?,
            b: binder.bind(&format!("encoder.fuse{b}.b"), trainable)?,
            ln_gamma: binder.bind(&format!("encoder.fuse{b}.ln_gamma"), trainable)?,
            ln_beta: binder.bind(&format!("encoder.fuse{b}.ln_beta"), trainable)?,
        });
    }
    Ok(EncoderParams {
        visual_w: binder.bind("encoder.visual.w", trainable)?,
        visual_b: binder.bind("encoder.visual.b", trainable)?,
        token_embed: binder.bind("encoder.token_embed", trainable)?,
        pos_frame: binder.bind("encoder.pos_frame", trainable)?,
        type_visual: binder.bind("encoder.type.visual", trainable)?,
        type_text: binder.bind("encoder.type.text", trainable)?,
        blocks,
        d_model: cfg.d_model,
        max_frames: cfg.max_frames,
    })
}

impl<H: Copy + std::fmt::Debug> EncoderParams<H> {
    /// Per-frame visual features: one shared MLP over every frame row.
    pub fn encode_video<C: Context<Handle = H>>(&self, ctx: &mut C, frames: H) -> crate::Result<H> {
        Ok(ctx.linear(frames, self.visual_w, self.visual_b)?)
    }

    /// Query feature: mean of the token embedding rows (order-invariant).
    pub fn encode_text<C: Context<Handle = H>>(&self, ctx: &mut C, tokens: &[usize]) -> crate::Result<H> {
        Ok(ctx.embed_mean(self.token_embed, tokens)?)
    }

    /// Visual features + positional and modality-type terms.
    fn visual_summary<C: Context<Handle = H>>(&self, ctx: &mut C, f_v: H) -> crate::Result<H> {
        let n_f = ctx.value(f_v).shape()[0];
        if n_f > self.max_frames {
            return Err(NumericsError::IndexOutOfRange {
                op: "fuse positional table",
                index: n_f,
                bound: self.max_frames,
            }
            .into());
        }
        let pos = ctx.slice_flat(self.pos_frame, 0, n_f * self.d_model)?;
        let pos = ctx.reshape(pos, &[n_f, self.d_model])?;
        let e_v = ctx.add(f_v, pos)?;
        Ok(ctx.add_row_broadcast(e_v, self.type_visual)?)
    }

    /// Text feature + modality-type term.
    fn text_summary<C: Context<Handle = H>>(&self, ctx: &mut C, f_t: H) -> crate::Result<H> {
        Ok(ctx.add(f_t, self.type_text)?)
    }

    /// Fused per-frame features for one sample: [N_f, d_model].
    pub fn fuse<C: Context<Handle = H>>(&self, ctx: &mut C, f_v: H, f_t: H) -> crate::Result<H> {
        self.fuse_batch(ctx, &[f_v], &[f_t])
    }

    /// Fused features for a whole minibatch, stacked as [sum N_f, d_model].
    ///
    /// The heavy linear/layernorm work runs once over the stacked rows; only
    /// the per-sample text broadcast is assembled sample by sample. Single
    /// sample and batch paths share this code, so they are equal by
    /// construction.
    pub fn fuse_batch<C: Context<Handle = H>>(
        &self,
        ctx: &mut C,
        f_v: &[H],
        f_t: &[H],
    ) -> crate::Result<H> {
        assert_eq!(f_v.len(), f_t.len(), "one query per video");
        assert!(!f_v.is_empty(), "empty batch");
        let d = self.d_model;

        let mut per_sample: Vec<H> = Vec::with_capacity(f_v.len());
        let mut frame_counts = Vec::with_capacity(f_v.len());
        for (&v, &t) in f_v.iter().zip(f_t) {
            let ev = self.visual_summary(ctx, v)?;
            frame_counts.push(ctx.value(ev).shape()[0]);
            per_sample.push({
                let et = self.text_summary(ctx, t)?;
                ctx.concat_rows_broadcast(ev, et)?
            });
        }

        let mut stacked = ctx.concat_rows(&per_sample)?;
        for (bi, block) in self.blocks.iter().enumerate() {
            let h = ctx.linear(stacked, block.w, block.b)?;
            let h = ctx.tanh(h);
            let h = ctx.layernorm(h, block.ln_gamma, block.ln_beta, LN_EPS)?;
            if bi + 1 == self.blocks.len() {
                return Ok(h);
            }
            // re-inject each sample's text summary for the next block
            let mut parts = Vec::with_capacity(f_t.len());
            let mut offset = 0;
            for (i, &t) in f_t.iter().enumerate() {
                let rows = frame_counts[i];
                let flat = ctx.slice_flat(h, offset * d, rows * d)?;
                let sample = ctx.reshape(flat, &[rows, d])?;
                let et = self.text_summary(ctx, t)?;
                parts.push(ctx.concat_rows_broadcast(sample, et)?);
                offset += rows;
            }
            stacked = ctx.concat_rows(&parts)?;
        }
        unreachable!("fusion_blocks >= 1 returns inside the loop");
    }

    /// Full single-sample path: frames + tokens -> fused per-frame features.
    pub fn fused_features<C: Context<Handle = H>>(
        &self,
        ctx: &mut C,
        frames: &Tensor,
        tokens: &[usize],
    ) -> crate::Result<H> {
        let token_sets = [tokens.to_vec()];
        self.fused_features_stacked(ctx, std::slice::from_ref(frames), &token_sets)
    }

    /// Fused features for B same-shape samples in one stacked graph,
    /// [B * n_f, d_model] with sample b occupying rows b*n_f .. (b+1)*n_f.
    ///
    /// Every op in the chain treats rows independently, so each output row is
    /// bitwise the row `fused_features` produces for that sample alone; the
    /// stacking only batches the matmuls.
    pub fn fused_features_stacked<C: Context<Handle = H>>(
        &self,
        ctx: &mut C,
        frames: &[Tensor],
        token_sets: &[Vec<usize>],
    ) -> crate::Result<H> {
        assert_eq!(frames.len(), token_sets.len(), "one query per video");
        assert!(!frames.is_empty(), "empty batch");
        let b = frames.len();
        let (n_f, d_raw) = frames[0].dims2("fused_features_stacked")?;
        if n_f > self.max_frames {
            return Err(NumericsError::IndexOutOfRange {
                op: "fuse positional table",
                index: n_f,
                bound: self.max_frames,
            }
            .into());
        }

        let mut stacked = Vec::with_capacity(b * n_f * d_raw);
        for f in frames {
            assert_eq!(f.shape(), frames[0].shape(), "uniform frame shapes when stacking");
            stacked.extend_from_slice(f.data());
        }
        let all_frames = ctx.constant(Tensor::new(vec![b * n_f, d_raw], stacked)?);
        let f_v = self.encode_video(ctx, all_frames)?;

        // positional + modality terms: one [n_f, d] block tiled over the batch
        let pos = ctx.slice_flat(self.pos_frame, 0, n_f * self.d_model)?;
        let pos = ctx.reshape(pos, &[n_f, self.d_model])?;
        let pos = ctx.tile_rows(pos, b)?;
        let e_v = ctx.add(f_v, pos)?;
        let mut x = ctx.add_row_broadcast(e_v, self.type_visual)?;

        // one text summary row per sample, spread over that sample's frames
        let f_t = ctx.embed_mean_rows(self.token_embed, token_sets)?;
        let e_t = ctx.add_row_broadcast(f_t, self.type_text)?;
        let t_rep = ctx.repeat_rows(e_t, n_f)?;

        for block in &self.blocks {
            let cat = ctx.concat_cols(x, t_rep)?;
            let h = ctx.linear(cat, block.w, block.b)?;
            let h = ctx.tanh(h);
            x = ctx.layernorm(h, block.ln_gamma, block.ln_beta, LN_EPS)?;
        }
        Ok(x)
    }
}

// ── tests ────────────────────────────────────────────────────────────────
