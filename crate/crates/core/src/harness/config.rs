//! Experiment configuration: one flat key=value text file covering corpus,
//! model dimensions, training budgets, and serving behavior.
//!
//! Parsing starts from the defaults and applies overrides, so a config file
//! lists only what it changes. Serialization is canonical (sorted keys,
//! shortest-exact float formatting); the FNV-1a hash of that canonical text
//! is embedded in every checkpoint and report, which is what makes "same
//! config" a checkable claim rather than a hope.

use super::ConfigError;
use crate::adr::{AnchorPolicy, SampleMode, StyleSource};
use crate::encoder::EncoderConfig;
use crate::fda::FdaConfig;
use crate::protocol::delay::{default_scenarios, NetworkScenario};
use crate::synthdata::CorpusConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    // model dimensions
    pub d_model: usize,
    pub d_proj: usize,
    pub hidden_h: usize,
    pub d_latent: usize,
    pub adr_hidden: usize,
    pub fusion_blocks: usize,
    // training
    pub d_frames: usize,
    pub lambda: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub seed: u64,
    // serving
    pub anchor_policy: AnchorPolicy,
    pub style_source: StyleSource,
    pub sample_mode: SampleMode,
    pub rtt_ms: f64,
    pub scenarios: Vec<NetworkScenario>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            d_model: 192,
            d_proj: 192,
            hidden_h: 96,
            d_latent: 64,
            adr_hidden: 128,
            fusion_blocks: 1,
            d_frames: 3,
            lambda: 0.1,
            lr_stage1: 2e-5,
            lr_stage2: 1e-4,
            epochs_stage1: 10,
            epochs_stage2: 40,
            batch_size: 16,
            poly_power: 1.0,
            seed: 1,
            anchor_policy: AnchorPolicy::First,
            style_source: StyleSource::Reconstructed,
            sample_mode: SampleMode::Mean,
            rtt_ms: 0.0,
            scenarios: default_scenarios(),
        }
    }
}

// ── enum spellings ───────────────────────────────────────────────────────

fn anchor_policy_str(p: AnchorPolicy) -> &'static str {
    match p {
        AnchorPolicy::First => "first",
        AnchorPolicy::Random => "random",
    }
}

fn style_source_str(s: StyleSource) -> &'static str {
    match s {
        StyleSource::Reconstructed => "reconstructed",
        StyleSource::Anchor => "anchor",
    }
}

fn sample_mode_str(m: SampleMode) -> &'static str {
    match m {
        SampleMode::Mean => "mean",
        SampleMode::Stochastic => "stochastic",
    }
}

// ── canonical serialization ──────────────────────────────────────────────

fn scenarios_str(scenarios: &[NetworkScenario]) -> String {
    scenarios
        .iter()
        .map(|s| format!("{}:{}", s.name, s.bandwidth_mbps))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_scenario_list(value: &str) -> Result<Vec<NetworkScenario>, ConfigError> {
    let mut out = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        let Some(split) = part.rfind(':') else {
            return Err(ConfigError::BadValue {
                key: "scenarios".into(),
                detail: format!("expected name:bandwidth_MBps, got {part:?}"),
            });
        };
        let bandwidth: f64 = part[split + 1..].parse().map_err(|_| ConfigError::BadValue {
            key: "scenarios".into(),
            detail: format!("bandwidth {:?} is not a number", &part[split + 1..]),
        })?;
        out.push(NetworkScenario::new(&part[..split], bandwidth)?);
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Every key in sorted order, one per line. Parsing this text back
    /// yields an equal config; hashing it yields [`ExperimentConfig::hash`].
    pub fn to_canonical_text(&self) -> String {
        let c = &self.corpus;
        let pairs: Vec<(&str, String)> = vec![
            ("corpus.center_scale", c.center_scale.to_string()),
            ("corpus.d_raw", c.d_raw.to_string()),
            ("corpus.frame_noise", c.frame_noise.to_string()),
            ("corpus.max_query_len", c.max_query_len.to_string()),
            ("corpus.n_frames", c.n_frames.to_string()),
            ("corpus.num_answers", c.num_answers.to_string()),
            ("corpus.num_devices", c.num_devices.to_string()),
            ("corpus.per_history", c.per_history.to_string()),
            ("corpus.per_realtime", c.per_realtime.to_string()),
            ("corpus.seed", c.seed.to_string()),
            ("corpus.shift_strength", c.shift_strength.to_string()),
            ("corpus.vocab_size", c.vocab_size.to_string()),
            ("model.adr_hidden", self.adr_hidden.to_string()),
            ("model.d_latent", self.d_latent.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.d_proj", self.d_proj.to_string()),
            ("model.fusion_blocks", self.fusion_blocks.to_string()),
            ("model.hidden_h", self.hidden_h.to_string()),
            ("scenarios", scenarios_str(&self.scenarios)),
            ("serve.anchor_policy", anchor_policy_str(self.anchor_policy).into()),
            ("serve.rtt_ms", self.rtt_ms.to_string()),
            ("serve.sample_mode", sample_mode_str(self.sample_mode).into()),
            ("serve.style_source", style_source_str(self.style_source).into()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.d_frames", self.d_frames.to_string()),
            ("train.epochs_stage1", self.epochs_stage1.to_string()),
            ("train.epochs_stage2", self.epochs_stage2.to_string()),
            ("train.lambda", self.lambda.to_string()),
            ("train.lr_stage1", self.lr_stage1.to_string()),
            ("train.lr_stage2", self.lr_stage2.to_string()),
            ("train.poly_power", self.poly_power.to_string()),
            ("train.seed", self.seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// FNV-1a over the canonical text.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.to_canonical_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Parse overrides on top of the defaults. `#` starts a comment; blank
    /// lines are ignored; a key may appear at most once.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(ConfigError::invalid(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::invalid(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a single `key=value` override (also used for CLI `--set`).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                detail: format!("cannot parse {value:?}"),
            })
        }
        match key {
            "corpus.center_scale" => self.corpus.center_scale = num(key, value)?,
            "corpus.d_raw" => self.corpus.d_raw = num(key, value)?,
            "corpus.frame_noise" => self.corpus.frame_noise = num(key, value)?,
            "corpus.max_query_len" => self.corpus.max_query_len = num(key, value)?,
            "corpus.n_frames" => self.corpus.n_frames = num(key, value)?,
            "corpus.num_answers" => self.corpus.num_answers = num(key, value)?,
            "corpus.num_devices" => self.corpus.num_devices = num(key, value)?,
            "corpus.per_history" => self.corpus.per_history = num(key, value)?,
            "corpus.per_realtime" => self.corpus.per_realtime = num(key, value)?,
            "corpus.seed" => self.corpus.seed = num(key, value)?,
            "corpus.shift_strength" => self.corpus.shift_strength = num(key, value)?,
            "corpus.vocab_size" => self.corpus.vocab_size = num(key, value)?,
            "model.adr_hidden" => self.adr_hidden = num(key, value)?,
            "model.d_latent" => self.d_latent = num(key, value)?,
            "model.d_model" => self.d_model = num(key, value)?,
            "model.d_proj" => self.d_proj = num(key, value)?,
            "model.fusion_blocks" => self.fusion_blocks = num(key, value)?,
            "model.hidden_h" => self.hidden_h = num(key, value)?,
            "scenarios" => self.scenarios = parse_scenario_list(value)?,
            "serve.anchor_policy" => {
                self.anchor_policy = match value {
                    "first" => AnchorPolicy::First,
                    "random" => AnchorPolicy::Random,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            detail: format!("expected first|random, got {value:?}"),
                        })
                    }
                }
            }
            "serve.rtt_ms" => self.rtt_ms = num(key, value)?,
            "serve.sample_mode" => {
                self.sample_mode = match value {
                    "mean" => SampleMode::Mean,
                    "stochastic" => SampleMode::Stochastic,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            detail: format!("expected mean|stochastic, got {value:?}"),
                        })
                    }
                }
            }
            "serve.style_source" => {
                self.style_source = match value {
                    "reconstructed" => StyleSource::Reconstructed,
                    "anchor" => StyleSource::Anchor,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            detail: format!("expected reconstructed|anchor, got {value:?}"),
                        })
                    }
                }
            }
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.d_frames" => self.d_frames = num(key, value)?,
            "train.epochs_stage1" => self.epochs_stage1 = num(key, value)?,
            "train.epochs_stage2" => self.epochs_stage2 = num(key, value)?,
            "train.lambda" => self.lambda = num(key, value)?,
            "train.lr_stage1" => self.lr_stage1 = num(key, value)?,
            "train.lr_stage2" => self.lr_stage2 = num(key, value)?,
            "train.poly_power" => self.poly_power = num(key, value)?,
            "train.seed" => self.seed = num(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.corpus.validate().map_err(|e| ConfigError::invalid(e.to_string()))?;
        let positive = [
            ("model.d_model", self.d_model),
            ("model.d_proj", self.d_proj),
            ("model.hidden_h", self.hidden_h),
            ("model.d_latent", self.d_latent),
            ("model.adr_hidden", self.adr_hidden),
            ("model.fusion_blocks", self.fusion_blocks),
            ("train.batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ConfigError::BadValue { key: key.into(), detail: "must be positive".into() });
            }
        }
        if self.d_frames <= 1 || self.d_frames > self.corpus.n_frames {
            return Err(ConfigError::BadValue {
                key: "train.d_frames".into(),
                detail: format!(
                    "need 1 < D <= n_frames ({}), got {}",
                    self.corpus.n_frames, self.d_frames
                ),
            });
        }
        for (key, v) in
            [("train.lambda", self.lambda), ("train.lr_stage1", self.lr_stage1), ("train.lr_stage2", self.lr_stage2)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::BadValue {
                    key: key.into(),
                    detail: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        if !self.rtt_ms.is_finite() || self.rtt_ms < 0.0 {
            return Err(ConfigError::BadValue {
                key: "serve.rtt_ms".into(),
                detail: format!("must be finite and non-negative, got {}", self.rtt_ms),
            });
        }
        if !self.poly_power.is_finite() || self.poly_power <= 0.0 {
            return Err(ConfigError::BadValue {
                key: "train.poly_power".into(),
                detail: format!("must be positive, got {}", self.poly_power),
            });
        }
        if self.scenarios.is_empty() {
            return Err(ConfigError::BadValue {
                key: "scenarios".into(),
                detail: "need at least one scenario".into(),
            });
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Error::io(format!("reading config {}", path.display()), e))?;
        Ok(Self::parse(&text)?)
    }

    // ── derived module configs ───────────────────────────────────────────

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_raw: self.corpus.d_raw,
            d_model: self.d_model,
            vocab_size: self.corpus.vocab_size,
            max_frames: self.corpus.n_frames,
            fusion_blocks: self.fusion_blocks,
        }
    }

    pub fn fda_config(&self) -> FdaConfig {
        FdaConfig {
            d_model: self.d_model,
            d_proj: self.d_proj,
            hidden: self.hidden_h,
            head_in: self.d_model,
            head_out: self.corpus.num_answers,
        }
    }

    pub fn adr_config(&self) -> crate::adr::AdrConfig {
        crate::adr::AdrConfig {
            d_model: self.d_model,
            d_latent: self.d_latent,
            hidden: self.adr_hidden,
        }
    }
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_canonical_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn canonical_text_is_sorted_and_stable() {
        let text = ExperimentConfig::default().to_canonical_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        // hashing the same config twice is stable
        assert_eq!(ExperimentConfig::default().hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg = ExperimentConfig::parse("train.seed=9\ncorpus.shift_strength=0\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.corpus.shift_strength, 0.0);
        assert_eq!(cfg.d_frames, 3);
        assert_eq!(cfg.lambda, 0.1);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let cfg = ExperimentConfig::parse(
            "
            # budget trims for a smoke run
            train.epochs_stage2 = 5   # fewer epochs

            serve.anchor_policy = random
            ",
        )
        .unwrap();
        assert_eq!(cfg.epochs_stage2, 5);
        assert_eq!(cfg.anchor_policy, AnchorPolicy::Random);
    }

    #[test]
    fn bad_inputs_are_typed_errors() {
        assert!(matches!(
            ExperimentConfig::parse("no_such_key=3"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("train.d_frames=house"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("train.seed=1\ntrain.seed=2"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("just words"),
            Err(ConfigError::Invalid { .. })
        ));
        // D outside (1, n_frames]
        assert!(ExperimentConfig::parse("train.d_frames=1").is_err());
        assert!(ExperimentConfig::parse("train.d_frames=9").is_err());
        // scenario syntax
        assert!(ExperimentConfig::parse("scenarios=4G").is_err());
        assert!(ExperimentConfig::parse("scenarios=4G:fast").is_err());
        let ok = ExperimentConfig::parse("scenarios=wifi:12.5,5G:100").unwrap();
        assert_eq!(ok.scenarios.len(), 2);
        assert_eq!(ok.scenarios[0].name, "wifi");
    }

    #[test]
    fn scenario_list_survives_canonical_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenarios = vec![
            NetworkScenario::new("lab", 2.5).unwrap(),
            NetworkScenario::new("5G", 100.0).unwrap(),
        ];
        let back = ExperimentConfig::parse(&cfg.to_canonical_text()).unwrap();
        assert_eq!(back.scenarios, cfg.scenarios);
    }
}
