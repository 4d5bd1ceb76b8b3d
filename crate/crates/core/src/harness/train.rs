//! Two-stage cloud-side training.
//!
//! Stage 1 fits the distribution reasoner on cached (aggregate, anchor)
//! feature pairs computed once from the history set with the initial
//! encoder. Stage 2 trains encoder + hypernetwork end to end with task
//! cross-entropy, routing every sample through the frozen reasoner exactly
//! as serving will, so the hypernetwork learns on the distribution it will
//! actually see. Both stages are deterministic: every random choice draws
//! from a stream derived from the config seed.

use std::collections::BTreeMap;

use super::config::ExperimentConfig;
use super::TrainError;
use crate::adr::{self, SampleMode};
use crate::encoder;
use crate::fda;
use crate::numerics::{
    kernels, AdamW, AdamWConfig, Context, Eval, Gradients, ParamBinder, ParamStore, PolySchedule,
    SeedRng, Tape, Tensor,
};
use crate::synthdata::{Corpus, Sample};

// rng stream tags (stable across versions; changing one changes every run)
const TAG_INIT_ENCODER: u64 = 0x11;
const TAG_INIT_FDA: u64 = 0x12;
const TAG_INIT_ADR: u64 = 0x13;
const TAG_STAGE1_SUBSET: u64 = 0x21;
const TAG_STAGE1_ANCHOR: u64 = 0x22;
const TAG_STAGE1_SHUFFLE: u64 = 0x23;
const TAG_STAGE1_NOISE: u64 = 0x24;
const TAG_STAGE2_SHUFFLE: u64 = 0x31;
const TAG_STAGE2_ANCHOR: u64 = 0x32;
const TAG_STAGE2_SUBSET: u64 = 0x33;

// samples per stacked forward-only featurization pass (memory/speed balance)
const FEATURE_CHUNK: usize = 256;

/// How stage-2 training conditions the hypernetwork on each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Anchor row through the frozen distribution reasoner (the full path).
    ReasonedAnchor,
    /// Mean of a random frame subset fed to the hypernetwork directly,
    /// bypassing the reasoner (the plain-hypernetwork ablation).
    DirectSubsetMean,
}

/// Trained parameters plus the loss trajectories the reports publish.
pub struct TrainOutcome {
    pub store: ParamStore,
    /// Mean total objective per stage-1 epoch.
    pub stage1_total: Vec<f64>,
    /// Mean reconstruction component per stage-1 epoch.
    pub stage1_rec: Vec<f64>,
    /// Mean task cross-entropy per stage-2 epoch.
    pub stage2_ce: Vec<f64>,
}

/// Fresh parameter store for all three subsystems, derived from the seed.
pub fn init_store(config: &ExperimentConfig) -> ParamStore {
    let root = SeedRng::new(config.seed);
    let mut store = ParamStore::new();
    encoder::init_params(&mut store, &config.encoder_config(), &mut root.split(TAG_INIT_ENCODER));
    fda::init_params(&mut store, &config.fda_config(), &mut root.split(TAG_INIT_FDA));
    adr::init_params(&mut store, &config.adr_config(), &mut root.split(TAG_INIT_ADR));
    store
}

/// All history samples across devices in a fixed (device, position) order.
pub fn history_samples(corpus: &Corpus) -> Vec<(usize, &Sample)> {
    corpus
        .devices
        .iter()
        .enumerate()
        .flat_map(|(di, dev)| dev.history.iter().map(move |s| (di, s)))
        .collect()
}

fn optimizer(lr: f64, power: f64, total_steps: u64) -> AdamW {
    AdamW::new(AdamWConfig::new(PolySchedule { base_lr: lr, total_steps, power }))
}

fn named_gradients(grads: &Gradients, tracked: &[(String, crate::numerics::NodeId)]) -> BTreeMap<String, Tensor> {
    let mut by_name = BTreeMap::new();
    for (name, id) in tracked {
        if let Some(g) = grads.get(*id) {
            by_name.insert(name.clone(), g.clone());
        }
    }
    by_name
}

fn take_rows(src: &Tensor, d: usize, ids: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend_from_slice(src.row(i));
    }
    Tensor::new(vec![ids.len(), d], data).unwrap()
}

pub(crate) fn check_finite(stage: &'static str, epoch: usize, loss: f64) -> Result<(), TrainError> {
    if !loss.is_finite() {
        return Err(TrainError::Diverged {
            stage,
            epoch,
            detail: format!("objective became {loss}; lower the learning rate or shrink the model"),
        });
    }
    Ok(())
}

// ── stage 1: feature pairs ───────────────────────────────────────────────

/// One (aggregate, anchor) feature pair per history sample, computed with
/// the current encoder on the forward-only evaluator. Rows follow
/// [`history_samples`] order.
pub fn stage1_feature_pairs(
    store: &ParamStore,
    config: &ExperimentConfig,
    corpus: &Corpus,
) -> crate::Result<(Tensor, Tensor)> {
    let enc_cfg = config.encoder_config();
    let d = config.d_model;
    let n_frames = config.corpus.n_frames;
    let root = SeedRng::new(config.seed);
    let mut subset_rng = root.split(TAG_STAGE1_SUBSET);
    let mut anchor_rng = root.split(TAG_STAGE1_ANCHOR);

    let samples = history_samples(corpus);
    let mut fg = Vec::with_capacity(samples.len() * d);
    let mut anchors = Vec::with_capacity(samples.len() * d);
    // featurize in stacked chunks: identical per-row numbers to one-at-a-time
    // evaluation, but the matmuls run over hundreds of rows instead of eight
    for chunk in samples.chunks(FEATURE_CHUNK) {
        let mut ctx = Eval::new();
        let mut binder = ParamBinder::new(&mut ctx, store);
        let enc = encoder::bind(&mut binder, &enc_cfg, false)?;
        let frames: Vec<Tensor> = chunk
            .iter()
            .map(|(_, s)| s.frames_tensor(n_frames, config.corpus.d_raw))
            .collect();
        let token_sets: Vec<Vec<usize>> = chunk.iter().map(|(_, s)| s.token_ids()).collect();
        let fused = enc.fused_features_stacked(&mut ctx, &frames, &token_sets)?;
        let fused = ctx.value(fused);
        for i in 0..chunk.len() {
            let rows = Tensor::new(
                vec![n_frames, d],
                fused.data()[i * n_frames * d..(i + 1) * n_frames * d].to_vec(),
            )
            .unwrap();
            let ids = fda::sample_frame_indices(n_frames, config.d_frames, &mut subset_rng)?;
            fg.extend_from_slice(&kernels::row_mean(rows.data(), d, &ids));
            let (_, anchor) = adr::select_anchor(&rows, config.anchor_policy, &mut anchor_rng)?;
            anchors.extend_from_slice(anchor.data());
        }
    }
    let m = samples.len();
    Ok((Tensor::new(vec![m, d], fg).unwrap(), Tensor::new(vec![m, d], anchors).unwrap()))
}

// ── stage 1: reasoner training ───────────────────────────────────────────

pub fn run_stage1(
    store: &mut ParamStore,
    config: &ExperimentConfig,
    fg: &Tensor,
    anchors: &Tensor,
) -> crate::Result<(Vec<f64>, Vec<f64>)> {
    let m = fg.shape()[0];
    let d = config.d_model;
    let batches_per_epoch = m.div_ceil(config.batch_size) as u64;
    let mut opt = optimizer(
        config.lr_stage1,
        config.poly_power,
        config.epochs_stage1 as u64 * batches_per_epoch,
    );
    let root = SeedRng::new(config.seed);
    let mut shuffle_rng = root.split(TAG_STAGE1_SHUFFLE);
    let mut noise_rng = root.split(TAG_STAGE1_NOISE);

    let mut total_curve = Vec::with_capacity(config.epochs_stage1);
    let mut rec_curve = Vec::with_capacity(config.epochs_stage1);
    for epoch in 0..config.epochs_stage1 {
        let order = shuffle_rng.sample_without_replacement(m, m);
        let (mut total_sum, mut rec_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let fg_b = take_rows(fg, d, batch);
            let an_b = take_rows(anchors, d, batch);
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(&mut tape, store);
            let params = adr::bind(&mut binder, true)?;
            let tracked = binder.into_tracked();
            let fg_h = tape.constant(fg_b);
            let an_h = tape.constant(an_b);
            // the reasoner always trains with reparameterized draws; the
            // serving-time sampling mode is a separate, inference-only knob
            let graph = adr::stage1_loss(
                &mut tape,
                &params,
                fg_h,
                an_h,
                config.lambda,
                config.style_source,
                SampleMode::Stochastic,
                &mut noise_rng,
            )?;
            let report = graph.report(&tape, config.lambda)?;
            check_finite("stage1", epoch, report.total)?;
            let grads = tape.backward(graph.total)?;
            opt.apply(store, &named_gradients(&grads, &tracked))?;
            total_sum += report.total * batch.len() as f64;
            rec_sum += report.rec * batch.len() as f64;
        }
        total_curve.push(total_sum / m as f64);
        rec_curve.push(rec_sum / m as f64);
    }
    Ok((total_curve, rec_curve))
}

// ── stage 2: encoder + hypernetwork through the frozen reasoner ──────────

struct Stage2Batch<'a> {
    samples: Vec<&'a Sample>,
}

pub fn run_stage2(
    store: &mut ParamStore,
    config: &ExperimentConfig,
    corpus: &Corpus,
) -> crate::Result<Vec<f64>> {
    run_stage2_with(store, config, corpus, Conditioning::ReasonedAnchor)
}

pub fn run_stage2_with(
    store: &mut ParamStore,
    config: &ExperimentConfig,
    corpus: &Corpus,
    conditioning: Conditioning,
) -> crate::Result<Vec<f64>> {
    let enc_cfg = config.encoder_config();
    let fda_cfg = config.fda_config();
    let d = config.d_model;
    let n_frames = config.corpus.n_frames;

    let samples = history_samples(corpus);
    let m = samples.len();
    let batches_per_epoch = m.div_ceil(config.batch_size) as u64;
    let mut opt = optimizer(
        config.lr_stage2,
        config.poly_power,
        config.epochs_stage2 as u64 * batches_per_epoch,
    );
    let root = SeedRng::new(config.seed);
    let mut shuffle_rng = root.split(TAG_STAGE2_SHUFFLE);
    let mut anchor_rng = root.split(TAG_STAGE2_ANCHOR);
    let mut subset_rng = root.split(TAG_STAGE2_SUBSET);
    // the reasoner runs in mean mode inside the training graph: that is the
    // serving default, and it keeps stage-2 gradients noise-free
    let mut unused_rng = SeedRng::new(0);

    let mut ce_curve = Vec::with_capacity(config.epochs_stage2);
    for epoch in 0..config.epochs_stage2 {
        let order = shuffle_rng.sample_without_replacement(m, m);
        let mut ce_sum = 0.0;
        for batch_ids in order.chunks(config.batch_size) {
            let batch = Stage2Batch {
                samples: batch_ids.iter().map(|&i| samples[i].1).collect(),
            };
            let b = batch.samples.len();

            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(&mut tape, store);
            let enc = encoder::bind(&mut binder, &enc_cfg, true)?;
            let fda_p = fda::bind(&mut binder, true)?;
            let adr_p = match conditioning {
                Conditioning::ReasonedAnchor => Some(adr::bind(&mut binder, false)?),
                Conditioning::DirectSubsetMean => None,
            };
            let tracked = binder.into_tracked();

            // batched fusion over the whole minibatch
            let frames: Vec<Tensor> = batch
                .samples
                .iter()
                .map(|s| s.frames_tensor(n_frames, config.corpus.d_raw))
                .collect();
            let token_sets: Vec<Vec<usize>> = batch.samples.iter().map(|s| s.token_ids()).collect();
            let fused = enc.fused_features_stacked(&mut tape, &frames, &token_sets)?; // [b*n_frames, d]

            // conditioning features, one row per sample
            let cond = match conditioning {
                Conditioning::ReasonedAnchor => {
                    let adr_p = adr_p.as_ref().unwrap();
                    let anchor_rows: Vec<usize> = (0..b)
                        .map(|i| {
                            let a = match config.anchor_policy {
                                adr::AnchorPolicy::First => 0,
                                adr::AnchorPolicy::Random => anchor_rng.below(n_frames),
                            };
                            i * n_frames + a
                        })
                        .collect();
                    let anchors = tape.gather_rows(fused, &anchor_rows)?; // [b, d]
                    let (mu, lv) = adr_p.posterior_graph(&mut tape, anchors)?;
                    let z = adr_p.sample_graph(&mut tape, mu, lv, SampleMode::Mean, &mut unused_rng)?;
                    let decoded = adr_p.decode_graph(&mut tape, z)?;
                    match config.style_source {
                        adr::StyleSource::Reconstructed => tape.adain_rows(decoded, anchors)?,
                        adr::StyleSource::Anchor => tape.adain_rows(anchors, decoded)?,
                    }
                }
                Conditioning::DirectSubsetMean => {
                    let mut picked = Vec::with_capacity(b * config.d_frames);
                    for i in 0..b {
                        let mut ids =
                            fda::sample_frame_indices(n_frames, config.d_frames, &mut subset_rng)?;
                        // ascending order keeps each group mean bitwise equal
                        // to the sorted accumulation mean_rows_subset uses
                        ids.sort_unstable();
                        picked.extend(ids.iter().map(|&k| i * n_frames + k));
                    }
                    let rows = tape.gather_rows(fused, &picked)?; // [b*d_frames, d]
                    tape.mean_rows_groups(rows, config.d_frames)?
                }
            };

            // batched hypernetwork, then one generated head per sample
            let embedding = fda_p.project_embedding(&mut tape, cond)?; // [b, d_proj]
            let theta = fda_p.generate(&mut tape, embedding)?; // [b, flat_len]
            let pooled = tape.mean_rows_groups(fused, n_frames)?; // [b, d]

            let flat = fda_cfg.flat_len();
            let mut logit_rows = Vec::with_capacity(b);
            let mut labels = Vec::with_capacity(b);
            for (i, s) in batch.samples.iter().enumerate() {
                let theta_row = tape.slice_flat(theta, i * flat, flat)?;
                let pooled_row = tape.slice_flat(pooled, i * d, d)?;
                let pooled_row = tape.reshape(pooled_row, &[1, d])?;
                let logits = fda_p.apply_head_graph(&mut tape, theta_row, pooled_row, &fda_cfg)?;
                logit_rows.push(logits);
                labels.push(s.label as usize);
            }
            let logits = tape.concat_rows(&logit_rows)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_val = tape.value(loss).item()?;
            check_finite("stage2", epoch, loss_val)?;
            let grads = tape.backward(loss)?;
            opt.apply(store, &named_gradients(&grads, &tracked))?;
            ce_sum += loss_val * b as f64;
        }
        ce_curve.push(ce_sum / m as f64);
    }
    Ok(ce_curve)
}

/// The full cloud-side training phase: init, stage 1, stage 2.
pub fn run_phase1_train(config: &ExperimentConfig, corpus: &Corpus) -> crate::Result<TrainOutcome> {
    if corpus.config != config.corpus {
        return Err(super::ConfigError::invalid(
            "corpus was generated with different parameters than this config describes",
        )
        .into());
    }
    let mut store = init_store(config);
    let (fg, anchors) = stage1_feature_pairs(&store, config, corpus)?;
    let (stage1_total, stage1_rec) = run_stage1(&mut store, config, &fg, &anchors)?;
    let stage2_ce = run_stage2(&mut store, config, corpus)?;
    Ok(TrainOutcome { store, stage1_total, stage1_rec, stage2_ce })
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::checkpoint::checkpoint_bytes;

    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig::parse(
            "
            corpus.num_devices=2
            corpus.per_history=6
            corpus.per_realtime=2
            corpus.d_raw=5
            corpus.n_frames=4
            corpus.vocab_size=12
            corpus.num_answers=3
            corpus.max_query_len=4
            model.d_model=10
            model.d_proj=8
            model.hidden_h=6
            model.d_latent=3
            model.adr_hidden=5
            train.d_frames=2
            train.batch_size=4
            train.epochs_stage1=2
            train.epochs_stage2=2
            ",
        )
        .unwrap()
    }

    #[test]
    fn same_seed_gives_byte_identical_checkpoints() {
        let cfg = smoke_config();
        let corpus = Corpus::generate(&cfg.corpus).unwrap();
        let a = run_phase1_train(&cfg, &corpus).unwrap();
        let b = run_phase1_train(&cfg, &corpus).unwrap();
        assert_eq!(checkpoint_bytes(&cfg, &a.store), checkpoint_bytes(&cfg, &b.store));
        assert_eq!(a.stage1_total, b.stage1_total);
        assert_eq!(a.stage2_ce, b.stage2_ce);

        let mut cfg2 = cfg.clone();
        cfg2.seed = 999;
        let c = run_phase1_train(&cfg2, &corpus).unwrap();
        assert_ne!(checkpoint_bytes(&cfg, &a.store), checkpoint_bytes(&cfg2, &c.store));
    }

    #[test]
    fn zero_epochs_leaves_initialization_untouched() {
        let mut cfg = smoke_config();
        cfg.epochs_stage1 = 0;
        cfg.epochs_stage2 = 0;
        let corpus = Corpus::generate(&cfg.corpus).unwrap();
        let out = run_phase1_train(&cfg, &corpus).unwrap();
        let init = init_store(&cfg);
        assert_eq!(checkpoint_bytes(&cfg, &out.store), checkpoint_bytes(&cfg, &init));
        assert!(out.stage1_total.is_empty());
        assert!(out.stage2_ce.is_empty());
    }

    #[test]
    fn training_actually_reduces_both_objectives() {
        let mut cfg = smoke_config();
        cfg.epochs_stage1 = 40;
        cfg.epochs_stage2 = 10;
        // small nets want a bolder rate than the full-scale default
        cfg.lr_stage1 = 3e-3;
        cfg.lr_stage2 = 3e-3;
        let corpus = Corpus::generate(&cfg.corpus).unwrap();
        let out = run_phase1_train(&cfg, &corpus).unwrap();
        // stage 1 reparameterizes, so single epochs are noisy; compare
        // head/tail window means instead of endpoints
        let s1 = &out.stage1_total;
        let head: f64 = s1[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = s1[s1.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "stage-1 objective should fall: head {head}, tail {tail}, {s1:?}");
        // stage 2 is deterministic (mean-mode reasoner), so endpoints suffice
        let s2 = &out.stage2_ce;
        assert!(s2.last().unwrap() < s2.first().unwrap(), "stage-2 CE should fall: {s2:?}");
    }

    #[test]
    fn divergence_is_reported_not_propagated_as_nan() {
        let mut cfg = smoke_config();
        cfg.lr_stage1 = 1e12;
        cfg.epochs_stage1 = 30;
        let corpus = Corpus::generate(&cfg.corpus).unwrap();
        match run_phase1_train(&cfg, &corpus) {
            Err(crate::Error::Train(TrainError::Diverged { stage, .. })) => {
                assert_eq!(stage, "stage1");
            }
            Ok(_) => panic!("FAIL: a 1e12 learning rate must diverge"),
            Err(other) => panic!("FAIL: wrong error {other:?}"),
        }
    }

    #[test]
    fn mismatched_corpus_is_rejected() {
        let cfg = smoke_config();
        let mut other = cfg.corpus.clone();
        other.shift_strength = 1.0;
        let corpus = Corpus::generate(&other).unwrap();
        assert!(matches!(
            run_phase1_train(&cfg, &corpus),
            Err(crate::Error::Config(crate::harness::ConfigError::Invalid { .. }))
        ));
    }
}
