//! Fast domain adaptor: aggregate a few sampled frame features, project the
//! aggregate into an embedding, and run a hypernetwork whose output IS the
//! device classifier — the weights and bias of its final linear layer.
//!
//! Cloud training differentiates through the whole chain; the device only
//! ever applies a finished [`GeneratedHead`] with plain dot products.

use crate::harness::ConfigError;
use crate::numerics::{kernels, Context, ParamBinder, ParamStore, SeedRng, Tensor};

/// Raw hypernetwork outputs are scaled by this, which together with the
/// small final-layer init keeps generated heads near zero at the start of
/// training (uniform predictions, stable gradients).
pub const OUTPUT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct FdaConfig {
    pub d_model: usize,
    pub d_proj: usize,
    pub hidden: usize,
    pub head_in: usize,
    pub head_out: usize,
}

impl Default for FdaConfig {
    fn default() -> Self {
        Self { d_model: 192, d_proj: 192, hidden: 96, head_in: 192, head_out: 10 }
    }
}

impl FdaConfig {
    pub fn flat_len(&self) -> usize {
        self.head_in * self.head_out + self.head_out
    }
}

pub struct FdaParams<H> {
    pub proj_w1: H,
    pub proj_b1: H,
    pub proj_w2: H,
    pub proj_b2: H,
    pub proj_ln_gamma: H,
    pub proj_ln_beta: H,
    pub hyper_w1: H,
    pub hyper_b1: H,
    pub hyper_w2: H,
    pub hyper_b2: H,
}

pub fn init_params(store: &mut ParamStore, cfg: &FdaConfig, rng: &mut SeedRng) {
    let scaled = |rng: &mut SeedRng, n: usize, s: f64| -> Vec<f64> {
        rng.normal_vec(n).into_iter().map(|x| x * s).collect()
    };
    let (dm, dp, dh, flat) = (cfg.d_model, cfg.d_proj, cfg.hidden, cfg.flat_len());
    store.insert(
        "fda.proj.w1",
        Tensor::new(vec![dm, dm], scaled(rng, dm * dm, 1.0 / (dm as f64).sqrt())).unwrap(),
    );
    store.insert("fda.proj.b1", Tensor::zeros(vec![dm]));
    store.insert(
        "fda.proj.w2",
        Tensor::new(vec![dp, dm], scaled(rng, dp * dm, 1.0 / (dm as f64).sqrt())).unwrap(),
    );
    store.insert("fda.proj.b2", Tensor::zeros(vec![dp]));
    store.insert("fda.proj.ln_gamma", Tensor::new(vec![dp], vec![1.0; dp]).unwrap());
    store.insert("fda.proj.ln_beta", Tensor::zeros(vec![dp]));
    store.insert(
        "fda.hyper.w1",
        Tensor::new(vec![dh, dp], scaled(rng, dh * dp, 1.0 / (dp as f64).sqrt())).unwrap(),
    );
    store.insert("fda.hyper.b1", Tensor::zeros(vec![dh]));
    // near-zero generated heads at init: small final layer, zero bias
    store.insert("fda.hyper.w2", Tensor::new(vec![flat, dh], scaled(rng, flat * dh, 1e-2)).unwrap());
    store.insert("fda.hyper.b2", Tensor::zeros(vec![flat]));
}

pub fn bind<C: Context>(
    binder: &mut ParamBinder<'_, C>,
    trainable: bool,
) -> crate::Result<FdaParams<C::Handle>> {
    Ok(FdaParams {
        proj_w1: binder.bind("fda.proj.w1", trainable)?,
        proj_b1: binder.bind("fda.proj.b1", trainable)?,
        proj_w2: binder.bind("fda.proj.w2", trainable)?,
        proj_b2: binder.bind("fda.proj.b2", trainable)?,
        proj_ln_gamma: binder.bind("fda.proj.ln_gamma", trainable)?,
        proj_ln_beta: binder.bind("fda.proj.ln_beta", trainable)?,
        hyper_w1: binder.bind("fda.hyper.w1", trainable)?,
        hyper_b1: binder.bind("fda.hyper.b1", trainable)?,
        hyper_w2: binder.bind("fda.hyper.w2", trainable)?,
        hyper_b2: binder.bind("fda.hyper.b2", trainable)?,
    })
}

// ── frame aggregation ────────────────────────────────────────────────────

/// Choose the D frame indices whose features are averaged into the global
/// representation. Uniform, without replacement. D must satisfy 1 < D ≤ N_f.
pub fn sample_frame_indices(n_frames: usize, d: usize, rng: &mut SeedRng) -> Result<Vec<usize>, ConfigError> {
    if d <= 1 || d > n_frames {
        return Err(ConfigError::invalid(format!(
            "frame sample count D={d} must satisfy 1 < D <= N_f={n_frames}"
        )));
    }
    Ok(rng.sample_without_replacement(n_frames, d))
}

impl<H: Copy + std::fmt::Debug> FdaParams<H> {
    /// Mean of the selected frame rows: F_g, the aggregate the hypernetwork
    /// ultimately conditions on. Returns a 1-D [d_model] handle.
    pub fn aggregate_frames<C: Context<Handle = H>>(
        &self,
        ctx: &mut C,
        frame_features: H,
        indices: &[usize],
    ) -> crate::Result<H> {
        Ok(ctx.mean_rows_subset(frame_features, indices)?)
    }

    /// Projection f_p: linear → tanh → linear → layernorm, rows in, rows out.
    pub fn project_embedding<C: Context<Handle = H>>(&self, ctx: &mut C, rows: H) -> crate::Result<H> {
        let h = ctx.linear(rows, self.proj_w1, self.proj_b1)?;
        let h = ctx.tanh(h);
        let h = ctx.linear(h, self.proj_w2, self.proj_b2)?;
        Ok(ctx.layernorm(h, self.proj_ln_gamma, self.proj_ln_beta, crate::encoder::LN_EPS)?)
    }

    /// Hypernetwork f_h: each input row becomes one flat parameter vector
    /// (length head_in·head_out + head_out), already output-scaled.
    pub fn generate<C: Context<Handle = H>>(&self, ctx: &mut C, embedding_rows: H) -> crate::Result<H> {
        let h = ctx.linear(embedding_rows, self.hyper_w1, self.hyper_b1)?;
        let h = ctx.tanh(h);
        let theta = ctx.linear(h, self.hyper_w2, self.hyper_b2)?;
        Ok(ctx.scale(theta, OUTPUT_SCALE))
    }

    /// Training-path head application: slice one flat parameter row into
    /// (W, b) inside the graph and apply it to a [1, head_in] feature row,
    /// so task gradients flow back into the hypernetwork.
    pub fn apply_head_graph<C: Context<Handle = H>>(
        &self,
        ctx: &mut C,
        theta_row: H,
        feature_row: H,
        cfg: &FdaConfig,
    ) -> crate::Result<H> {
        let (ins, outs) = (cfg.head_in, cfg.head_out);
        let w_flat = ctx.slice_flat(theta_row, 0, ins * outs)?;
        let w = ctx.reshape(w_flat, &[outs, ins])?;
        let b = ctx.slice_flat(theta_row, ins * outs, outs)?;
        Ok(ctx.linear(feature_row, w, b)?)
    }
}

// ── the generated head, device side ──────────────────────────────────────

/// The downloaded classifier: one linear layer's weights and bias. Applying
/// it is plain arithmetic — no graph context anywhere near this type.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedHead {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GeneratedHead {
    /// Split a flat parameter vector (weights row-major, then bias) into a
    /// head for the given slot.
    pub fn from_flat(flat: &[f64], in_dim: usize, out_dim: usize) -> Result<Self, ConfigError> {
        let want = in_dim * out_dim + out_dim;
        if flat.len() != want {
            return Err(ConfigError::invalid(format!(
                "flat parameter vector has {} values, slot ({in_dim},{out_dim}) needs {want}",
                flat.len()
            )));
        }
        Ok(GeneratedHead {
            in_dim,
            out_dim,
            weight: Tensor::new(vec![out_dim, in_dim], flat[..in_dim * out_dim].to_vec())
                .map_err(|e| ConfigError::invalid(format!("bad weight values: {e}")))?,
            bias: Tensor::new(vec![out_dim], flat[in_dim * out_dim..].to_vec())
                .map_err(|e| ConfigError::invalid(format!("bad bias values: {e}")))?,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.weight.data().to_vec();
        flat.extend_from_slice(self.bias.data());
        flat
    }
}

/// Device-side prediction: logits = W·x + b, prediction = argmax. Pure
/// arithmetic on values — the backpropagation-free contract made literal.
pub fn apply_generated_head(feature: &Tensor, head: &GeneratedHead) -> crate::Result<(Tensor, usize)> {
    let d = feature.dims1("apply_generated_head")?;
    if d != head.in_dim {
        return Err(ConfigError::invalid(format!(
            "feature dim {d} does not match head input dim {}",
            head.in_dim
        ))
        .into());
    }
    let logits = kernels::linear(feature.data(), 1, d, head.weight.data(), head.out_dim, head.bias.data());
    let pred = argmax(&logits);
    Ok((Tensor::new(vec![head.out_dim], logits).unwrap(), pred))
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Classification feature: plain mean over ALL frame rows (mirrors the
/// F_g construction, but deterministic — no sampling on the predict path).
pub fn pool_frames(frame_features: &Tensor) -> crate::Result<Tensor> {
    let (n, d) = frame_features.dims2("pool_frames")?;
    let all: Vec<usize> = (0..n).collect();
    Ok(Tensor::new(vec![d], kernels::row_mean(frame_features.data(), d, &all)).unwrap())
}

// ── tests ────────────────────────────────────────────────────────────────
