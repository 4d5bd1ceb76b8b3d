//! Device-side evaluation.
//!
//! Every function here models what runs on the resource-bound endpoint:
//! forward-only feature extraction, one small upload, and plain-arithmetic
//! application of the downloaded head. The whole pass holds the
//! no-differentiation guard, so any code path that tried to allocate
//! training state would abort the test run instead of silently shipping a
//! heavyweight device.

use super::config::ExperimentConfig;
use crate::adr;
use crate::fda::{self, GeneratedHead};
use crate::numerics::{kernels, Context, Eval, NoTapeGuard, ParamBinder, ParamStore, SeedRng, Tensor};
use crate::protocol::{AdaptClient, ProtocolError, TimingRecord};
use crate::synthdata::{Corpus, Sample};
use crate::{encoder, Error};

// rng stream tags for evaluation-time choices
const TAG_EVAL_ANCHOR: u64 = 0x41;
const TAG_EVAL_SUBSET: u64 = 0x42;

/// What the device uploads per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UploadFeature {
    /// One anchor frame's fused feature row (the reasoning path).
    Anchor,
    /// Mean of a random frame subset (the direct conditioning path).
    FrameSubsetMean,
}

/// Fused per-frame feature rows [n_frames, d_model] for one sample,
/// computed forward-only.
pub fn fused_rows(
    store: &ParamStore,
    config: &ExperimentConfig,
    sample: &Sample,
) -> crate::Result<Tensor> {
    let enc_cfg = config.encoder_config();
    let mut ctx = Eval::new();
    let mut binder = ParamBinder::new(&mut ctx, store);
    let enc = encoder::bind(&mut binder, &enc_cfg, false)?;
    let fused = enc.fused_features(
        &mut ctx,
        &sample.frames_tensor(config.corpus.n_frames, config.corpus.d_raw),
        &sample.token_ids(),
    )?;
    Ok(ctx.value(fused).clone())
}

/// Classification feature for one sample: fused rows pooled over frames.
pub fn pooled_feature(
    store: &ParamStore,
    config: &ExperimentConfig,
    sample: &Sample,
) -> crate::Result<Tensor> {
    fda::pool_frames(&fused_rows(store, config, sample)?)
}

fn upload_from_rows(
    rows: &Tensor,
    upload: UploadFeature,
    config: &ExperimentConfig,
    anchor_rng: &mut SeedRng,
    subset_rng: &mut SeedRng,
) -> crate::Result<Tensor> {
    match upload {
        UploadFeature::Anchor => {
            Ok(adr::select_anchor(rows, config.anchor_policy, anchor_rng)?.1)
        }
        UploadFeature::FrameSubsetMean => {
            let (n, d) = rows.dims2("upload_from_rows")?;
            let ids = fda::sample_frame_indices(n, config.d_frames, subset_rng)?;
            Ok(Tensor::new(vec![d], kernels::row_mean(rows.data(), d, &ids)).unwrap())
        }
    }
}

/// One evaluated sample: what the device predicted and what the exchange cost.
#[derive(Debug, Clone)]
pub struct SamplePrediction {
    pub device_id: u32,
    pub sample_index: usize,
    pub predicted: usize,
    pub label: usize,
    pub timing: TimingRecord,
}

/// Pooled evaluation result across every device's realtime stream.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<SamplePrediction>,
}

impl EvalOutcome {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.correct as f64 / self.total as f64
    }

    /// Mean measured wall time per exchange, milliseconds.
    pub fn mean_wall_ms(&self) -> f64 {
        if self.predictions.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.predictions.iter().map(|p| p.timing.measured_wall_ms).sum();
        sum / self.predictions.len() as f64
    }
}

fn locate(err: Error, device_id: u32, sample_index: usize) -> Error {
    // a dropped link should tell the operator where the stream died
    match err {
        Error::Protocol(ProtocolError::Transport { detail }) => {
            Error::Protocol(ProtocolError::Transport {
                detail: format!("device {device_id}, realtime sample {sample_index}: {detail}"),
            })
        }
        other => other,
    }
}

/// Run the full adaptive loop: for each realtime sample, extract features,
/// upload the chosen conditioning feature, download a head, classify
/// locally. `device_store` needs only encoder parameters.
pub fn evaluate_adaptive(
    client: &AdaptClient,
    device_store: &ParamStore,
    config: &ExperimentConfig,
    corpus: &Corpus,
    upload: UploadFeature,
) -> crate::Result<EvalOutcome> {
    let _device = NoTapeGuard::new();
    let root = SeedRng::new(config.seed);
    let mut anchor_rng = root.split(TAG_EVAL_ANCHOR);
    let mut subset_rng = root.split(TAG_EVAL_SUBSET);

    let mut out = EvalOutcome { correct: 0, total: 0, predictions: Vec::new() };
    for dev in &corpus.devices {
        let device_id = dev.domain.device_id;
        for (si, sample) in dev.realtime.iter().enumerate() {
            let rows = fused_rows(device_store, config, sample)?;
            let feature =
                upload_from_rows(&rows, upload, config, &mut anchor_rng, &mut subset_rng)?;
            let (head, timing) = client
                .request_adaptation(device_id, 0, &feature)
                .map_err(|e| locate(e, device_id, si))?;
            let pooled = fda::pool_frames(&rows)?;
            let (_, predicted) = fda::apply_generated_head(&pooled, &head)?;
            let label = sample.label as usize;
            out.correct += usize::from(predicted == label);
            out.total += 1;
            out.predictions.push(SamplePrediction {
                device_id,
                sample_index: si,
                predicted,
                label,
                timing,
            });
        }
    }
    Ok(out)
}

/// Evaluate a fixed head (no cloud exchange): pooled feature -> argmax.
/// `head_for` picks the head per device, so one shared global head and
/// per-device fine-tuned heads both fit.
pub fn evaluate_with_head<'a>(
    device_store: &ParamStore,
    config: &ExperimentConfig,
    corpus: &Corpus,
    mut head_for: impl FnMut(u32) -> &'a GeneratedHead,
) -> crate::Result<(usize, usize)> {
    let _device = NoTapeGuard::new();
    let (mut correct, mut total) = (0, 0);
    for dev in &corpus.devices {
        let head = head_for(dev.domain.device_id);
        for sample in &dev.realtime {
            let pooled = pooled_feature(device_store, config, sample)?;
            let (_, predicted) = fda::apply_generated_head(&pooled, head)?;
            correct += usize::from(predicted == sample.label as usize);
            total += 1;
        }
    }
    Ok((correct, total))
}

// ── tests ────────────────────────────────────────────────────────────────
