//! Synthetic multi-device corpora with controllable distribution shift.
//!
//! Ground truth couples both modalities: a hidden class id factors into a
//! visual cluster (which frames orbit) and a token group (which queries
//! lean on), so neither modality alone pins down the label. Each device
//! warps the shared distribution by a strength-`s` domain: a mean shift of
//! length `s`, a rotation of `0.15·s` radians in a random plane, and
//! `floor(s)` random label transpositions. At `s = 0` every device draws
//! from the same distribution; as `s` grows, a single pooled classifier
//! degrades while per-device classifiers stay viable.
//!
//! Frames are quantized to f32 at generation time, so corpus files round
//! trip value-exactly.

use crate::numerics::{SeedRng, Tensor};
use crate::protocol::{crc32, ByteReader, ByteWriter, ProtocolError};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad corpus config: {detail}")]
    Config { detail: String },
    #[error("bad data-file magic {got:?}")]
    Magic { got: [u8; 4] },
    #[error("unsupported data-file version {got}")]
    Version { got: u16 },
    #[error("data-file checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("data file malformed: {detail}")]
    Malformed { detail: String },
    #[error(transparent)]
    Frame(#[from] ProtocolError),
}

fn config_err(detail: impl Into<String>) -> DataError {
    DataError::Config { detail: detail.into() }
}

fn malformed(detail: impl Into<String>) -> DataError {
    DataError::Malformed { detail: detail.into() }
}

// ── configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub num_devices: usize,
    pub per_history: usize,
    pub per_realtime: usize,
    pub num_answers: usize,
    pub d_raw: usize,
    pub n_frames: usize,
    pub vocab_size: usize,
    pub max_query_len: usize,
    pub shift_strength: f64,
    pub frame_noise: f64,
    pub center_scale: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_devices: 3,
            per_history: 2000,
            per_realtime: 500,
            num_answers: 10,
            d_raw: 32,
            n_frames: 8,
            vocab_size: 64,
            max_query_len: 12,
            shift_strength: 3.0,
            frame_noise: 0.3,
            center_scale: 2.0,
            seed: 17,
        }
    }
}

impl CorpusConfig {
    /// Number of token groups: queries are informative only when there are
    /// enough classes to split across two groups.
    pub fn token_groups(&self) -> usize {
        if self.num_answers >= 4 {
            2
        } else {
            1
        }
    }

    /// Number of visual clusters; class id = cluster * groups + group.
    pub fn visual_clusters(&self) -> usize {
        self.num_answers.div_ceil(self.token_groups())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_devices == 0 || self.num_devices > 100_000 {
            return Err(config_err(format!("num_devices {} out of range 1..=100000", self.num_devices)));
        }
        if self.per_history == 0 || self.per_realtime == 0 {
            return Err(config_err("per_history and per_realtime must be at least 1"));
        }
        if self.per_history > 1_000_000 || self.per_realtime > 1_000_000 {
            return Err(config_err("per-device sample counts capped at 1e6"));
        }
        if self.num_answers < 2 || self.num_answers > u16::MAX as usize {
            return Err(config_err(format!("num_answers {} out of range 2..=65535", self.num_answers)));
        }
        if self.d_raw < 2 || self.d_raw > 65_536 {
            return Err(config_err(format!("d_raw {} out of range 2..=65536 (rotation needs a plane)", self.d_raw)));
        }
        if self.n_frames == 0 || self.n_frames > 65_536 {
            return Err(config_err(format!("n_frames {} out of range 1..=65536", self.n_frames)));
        }
        if self.vocab_size < 2 || self.vocab_size > u16::MAX as usize + 1 {
            return Err(config_err(format!("vocab_size {} out of range 2..=65536", self.vocab_size)));
        }
        if self.max_query_len < 3 || self.max_query_len > u16::MAX as usize {
            return Err(config_err(format!("max_query_len {} out of range 3..=65535", self.max_query_len)));
        }
        for (name, v) in [
            ("shift_strength", self.shift_strength),
            ("frame_noise", self.frame_noise),
            ("center_scale", self.center_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.center_scale == 0.0 {
            return Err(config_err("center_scale must be positive"));
        }
        Ok(())
    }
}

// ── data model ───────────────────────────────────────────────────────────

/// One device's warp of the shared distribution. Stored in the corpus file
/// for inspection; generation happens in f64 and is quantized here.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDomain {
    pub device_id: u32,
    pub shift_vec: Vec<f32>,
    pub rot_p: Vec<f32>,
    pub rot_q: Vec<f32>,
    pub angle: f32,
    /// Maps hidden class id -> label this device reports.
    pub label_perm: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clip_id: u32,
    pub label: u16,
    pub tokens: Vec<u16>,
    /// Row-major [n_frames][d_raw], already f32-quantized.
    pub frames: Vec<f32>,
}

impl Sample {
    /// Frames as an [n_frames, d_raw] tensor (widened to f64 for the model).
    /// Frame values are validated finite at generation and parse time.
    pub fn frames_tensor(&self, n_frames: usize, d_raw: usize) -> Tensor {
        debug_assert_eq!(self.frames.len(), n_frames * d_raw);
        Tensor::from_f32(vec![n_frames, d_raw], &self.frames).expect("frames validated on entry")
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceData {
    pub domain: DeviceDomain,
    pub history: Vec<Sample>,
    pub realtime: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub devices: Vec<DeviceData>,
}

// ── generation ───────────────────────────────────────────────────────────

const TAG_CENTERS: u64 = 1;
const TAG_DOMAIN: u64 = 2;
const TAG_SAMPLES: u64 = 3;

fn unit_vector(rng: &mut SeedRng, d: usize) -> Vec<f64> {
    loop {
        let v = rng.normal_vec(d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Orthonormal pair spanning a random plane.
fn rotation_plane(rng: &mut SeedRng, d: usize) -> (Vec<f64>, Vec<f64>) {
    let p = unit_vector(rng, d);
    loop {
        let raw = rng.normal_vec(d);
        let proj: f64 = raw.iter().zip(&p).map(|(a, b)| a * b).sum();
        let q: Vec<f64> = raw.iter().zip(&p).map(|(a, b)| a - proj * b).collect();
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return (p, q.into_iter().map(|x| x / norm).collect());
        }
    }
}

fn rotate_in_plane(x: &[f64], p: &[f64], q: &[f64], angle: f64) -> Vec<f64> {
    let xp: f64 = x.iter().zip(p).map(|(a, b)| a * b).sum();
    let xq: f64 = x.iter().zip(q).map(|(a, b)| a * b).sum();
    let (sin, cos) = angle.sin_cos();
    x.iter()
        .enumerate()
        .map(|(j, &v)| v + (cos - 1.0) * (xp * p[j] + xq * q[j]) + sin * (xp * q[j] - xq * p[j]))
        .collect()
}

/// `floor(strength)` uniformly random transpositions composed onto identity.
fn label_permutation(rng: &mut SeedRng, k: usize, strength: f64) -> Vec<u16> {
    let mut perm: Vec<u16> = (0..k as u16).collect();
    for _ in 0..strength.floor() as usize {
        let i = rng.below(k);
        let mut j = rng.below(k - 1);
        if j >= i {
            j += 1;
        }
        perm.swap(i, j);
    }
    perm
}

/// Class ids for one section, balanced to within one sample per class.
fn balanced_labels(rng: &mut SeedRng, n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let extra = rng.sample_without_replacement(k, n % k);
    let mut ids: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat(c).take(base)).collect();
    ids.extend(extra);
    let order = rng.permutation(n);
    order.into_iter().map(|i| ids[i]).collect()
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Corpus, DataError> {
        config.validate()?;
        let cfg = config.clone();
        let k = cfg.num_answers;
        let groups = cfg.token_groups();
        let root = SeedRng::new(cfg.seed);

        // Cluster centers are shared across devices: near-orthogonal random
        // directions scaled to sit clear of the frame noise.
        let mut centers_rng = root.split(TAG_CENTERS);
        let centers: Vec<Vec<f64>> = (0..cfg.visual_clusters())
            .map(|_| {
                unit_vector(&mut centers_rng, cfg.d_raw)
                    .into_iter()
                    .map(|x| x * cfg.center_scale)
                    .collect()
            })
            .collect();

        let mut devices = Vec::with_capacity(cfg.num_devices);
        for dev in 0..cfg.num_devices {
            let mut domain_rng = root.split2(TAG_DOMAIN, dev as u64);
            let s = cfg.shift_strength;
            let shift_dir = unit_vector(&mut domain_rng, cfg.d_raw);
            let shift_vec: Vec<f64> = shift_dir.iter().map(|x| x * s).collect();
            let (rot_p, rot_q) = rotation_plane(&mut domain_rng, cfg.d_raw);
            let angle = 0.15 * s;
            let perm = label_permutation(&mut domain_rng, k, s);

            // Rotated centers are per-device constants; precompute once.
            let warped_centers: Vec<Vec<f64>> = centers
                .iter()
                .map(|c| {
                    rotate_in_plane(c, &rot_p, &rot_q, angle)
                        .into_iter()
                        .zip(&shift_vec)
                        .map(|(x, sh)| x + sh)
                        .collect()
                })
                .collect();

            let mut sample_rng = root.split2(TAG_SAMPLES, dev as u64);
            let make_section = |count: usize, id_base: u32, rng: &mut SeedRng| -> Vec<Sample> {
                let class_ids = balanced_labels(rng, count, k);
                class_ids
                    .into_iter()
                    .enumerate()
                    .map(|(i, class)| {
                        let cluster = class / groups;
                        let group = class % groups;
                        let center = &warped_centers[cluster];
                        let mut frames = Vec::with_capacity(cfg.n_frames * cfg.d_raw);
                        for _ in 0..cfg.n_frames {
                            for &c in center {
                                frames.push((c + cfg.frame_noise * rng.normal()) as f32);
                            }
                        }
                        let len = 3 + rng.below(cfg.max_query_len - 3 + 1);
                        let group_count = (cfg.vocab_size - group).div_ceil(groups);
                        let tokens: Vec<u16> = (0..len)
                            .map(|_| {
                                let t = if rng.uniform() < 0.75 {
                                    group + groups * rng.below(group_count)
                                } else {
                                    rng.below(cfg.vocab_size)
                                };
                                t as u16
                            })
                            .collect();
                        Sample {
                            clip_id: id_base + i as u32,
                            label: perm[class],
                            tokens,
                            frames,
                        }
                    })
                    .collect()
            };

            let history = make_section(cfg.per_history, 0, &mut sample_rng);
            let realtime = make_section(cfg.per_realtime, cfg.per_history as u32, &mut sample_rng);

            devices.push(DeviceData {
                domain: DeviceDomain {
                    device_id: dev as u32,
                    shift_vec: shift_vec.iter().map(|&x| x as f32).collect(),
                    rot_p: rot_p.iter().map(|&x| x as f32).collect(),
                    rot_q: rot_q.iter().map(|&x| x as f32).collect(),
                    angle: angle as f32,
                    label_perm: perm,
                },
                history,
                realtime,
            });
        }

        Ok(Corpus { config: cfg, devices })
    }

    pub fn device(&self, id: usize) -> &DeviceData {
        &self.devices[id]
    }
}

// ── file format ──────────────────────────────────────────────────────────

const MAGIC: [u8; 4] = *b"CDCD";
const VERSION: u16 = 1;

impl Corpus {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut w = ByteWriter::with_capacity(1 << 16);
        w.put_bytes(&MAGIC);
        w.put_u16(VERSION);
        w.put_u32(cfg.num_devices as u32);
        w.put_u32(cfg.per_history as u32);
        w.put_u32(cfg.per_realtime as u32);
        w.put_u32(cfg.num_answers as u32);
        w.put_u32(cfg.d_raw as u32);
        w.put_u32(cfg.n_frames as u32);
        w.put_u32(cfg.vocab_size as u32);
        w.put_u32(cfg.max_query_len as u32);
        w.put_u64(cfg.seed);
        w.put_f64(cfg.shift_strength);
        w.put_f64(cfg.frame_noise);
        w.put_f64(cfg.center_scale);
        for dev in &self.devices {
            let d = &dev.domain;
            w.put_u32(d.device_id);
            for &v in &d.shift_vec {
                w.put_f32(v);
            }
            for &v in &d.rot_p {
                w.put_f32(v);
            }
            for &v in &d.rot_q {
                w.put_f32(v);
            }
            w.put_f32(d.angle);
            for &p in &d.label_perm {
                w.put_u16(p);
            }
            for sample in dev.history.iter().chain(&dev.realtime) {
                w.put_u32(sample.clip_id);
                w.put_u16(sample.label);
                w.put_u16(sample.tokens.len() as u16);
                for &t in &sample.tokens {
                    w.put_u16(t);
                }
                for &f in &sample.frames {
                    w.put_f32(f);
                }
            }
        }
        let crc = crc32(w.as_slice());
        w.put_u32(crc);
        w.into_vec()
    }

    pub fn parse_bytes(bytes: &[u8]) -> Result<Corpus, DataError> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.take_bytes(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(DataError::Magic { got: magic });
        }
        let version = r.take_u16()?;
        if version != VERSION {
            return Err(DataError::Version { got: version });
        }
        let config = CorpusConfig {
            num_devices: r.take_u32()? as usize,
            per_history: r.take_u32()? as usize,
            per_realtime: r.take_u32()? as usize,
            num_answers: r.take_u32()? as usize,
            d_raw: r.take_u32()? as usize,
            n_frames: r.take_u32()? as usize,
            vocab_size: r.take_u32()? as usize,
            max_query_len: r.take_u32()? as usize,
            seed: r.take_u64()?,
            shift_strength: r.take_f64()?,
            frame_noise: r.take_f64()?,
            center_scale: r.take_f64()?,
        };
        config.validate().map_err(|e| malformed(format!("header: {e}")))?;

        let k = config.num_answers;
        let mut devices = Vec::with_capacity(config.num_devices);
        for _ in 0..config.num_devices {
            let device_id = r.take_u32()?;
            let shift_vec = r.take_f32_vec(config.d_raw)?;
            let rot_p = r.take_f32_vec(config.d_raw)?;
            let rot_q = r.take_f32_vec(config.d_raw)?;
            let angle = r.take_f32()?;
            let label_perm = r.take_u16_vec(k)?;
            {
                let mut seen = vec![false; k];
                for &p in &label_perm {
                    if (p as usize) >= k || seen[p as usize] {
                        return Err(malformed(format!("device {device_id}: label_perm is not a permutation")));
                    }
                    seen[p as usize] = true;
                }
            }
            let read_section = |count: usize, r: &mut ByteReader| -> Result<Vec<Sample>, DataError> {
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    let clip_id = r.take_u32()?;
                    let label = r.take_u16()?;
                    if label as usize >= k {
                        return Err(malformed(format!("device {device_id}: label {label} >= {k}")));
                    }
                    let qlen = r.take_u16()? as usize;
                    if qlen < 3 || qlen > config.max_query_len {
                        return Err(malformed(format!("device {device_id}: query length {qlen} out of range")));
                    }
                    let tokens = r.take_u16_vec(qlen)?;
                    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
                        return Err(malformed(format!("device {device_id}: token {t} >= vocab {}", config.vocab_size)));
                    }
                    let frames = r.take_f32_vec(config.n_frames * config.d_raw)?;
                    if let Some(f) = frames.iter().find(|f| !f.is_finite()) {
                        return Err(malformed(format!("device {device_id}: non-finite frame value {f}")));
                    }
                    out.push(Sample { clip_id, label, tokens, frames });
                }
                Ok(out)
            };
            let history = read_section(config.per_history, &mut r)?;
            let realtime = read_section(config.per_realtime, &mut r)?;
            devices.push(DeviceData {
                domain: DeviceDomain { device_id, shift_vec, rot_p, rot_q, angle, label_perm },
                history,
                realtime,
            });
        }

        let body_len = r.pos();
        let stored = r.take_u32()?;
        if r.remaining() != 0 {
            return Err(malformed(format!("{} trailing bytes after checksum", r.remaining())));
        }
        let computed = crc32(&bytes[..body_len]);
        if stored != computed {
            return Err(DataError::Checksum { stored, computed });
        }
        Ok(Corpus { config, devices })
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| crate::Error::io(format!("writing corpus {}", path.display()), e))
    }

    pub fn load(path: &Path) -> crate::Result<Corpus> {
        let bytes = std::fs::read(path)
            .map_err(|e| crate::Error::io(format!("reading corpus {}", path.display()), e))?;
        Ok(Corpus::parse_bytes(&bytes)?)
    }
}

// ── tests ────────────────────────────────────────────────────────────────
