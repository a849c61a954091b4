//! Hyperparameter configuration: the single source of truth for every shape
//! used by the model, data pipeline, and trainer.
//!
//! Configs serialize to a flat UTF-8 `key=value` text format, one pair per
//! line, with `#` starting a comment. Unknown keys are rejected so typos
//! surface immediately. The environment variable `MDVIT_CONFIG` may supply a
//! default file path for the CLI.

use crate::error::{MdvitError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Environment variable consulted for a default config path.
pub const CONFIG_ENV_VAR: &str = "MDVIT_CONFIG";

/// Fallback seed when none is configured, fixed for reproducible tests.
pub const DEFAULT_SEED: u64 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Paradigm {
    /// Separate training: one independent BASE model per domain.
    St,
    /// Joint training: one BASE model on balanced mixed batches.
    Jt,
    /// Multi-domain adaptive training: universal network + DA + MKD peers.
    Mat,
}

impl Paradigm {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "st" => Ok(Paradigm::St),
            "jt" => Ok(Paradigm::Jt),
            "mat" => Ok(Paradigm::Mat),
            other => Err(MdvitError::config(format!(
                "unknown paradigm '{other}' (expected st, jt, or mat)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::St => "st",
            Paradigm::Jt => "jt",
            Paradigm::Mat => "mat",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input resolution (H, W); both divisible by 32.
    pub image_size: (usize, usize),
    /// Number of domains M.
    pub num_domains: usize,
    /// Encoder channel dims C_1..C_4.
    pub encoder_channels: [usize; 4],
    /// Transformer layers L_i per block, blocks 1..8.
    pub layers_per_block: [usize; 8],
    /// Attention heads in every MHSA.
    pub num_heads: usize,
    /// Hidden width of the two-layer CNN bridge.
    pub bridge_hidden: usize,
    /// Hidden width of the auxiliary peer decoders.
    pub peer_hidden: usize,
    /// DA reduction ratio r.
    pub da_reduction: usize,
    /// Domain adapters on (off reproduces BASE).
    pub da_enabled: bool,
    /// Auxiliary peers + mutual knowledge distillation on.
    pub mkd_enabled: bool,
    /// Weight of the peer segmentation losses in Eq. 1.
    pub alpha: f64,
    /// Weight of the distillation losses in Eq. 1.
    pub beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (256, 256),
            num_domains: 4,
            encoder_channels: [64, 128, 320, 512],
            layers_per_block: [2; 8],
            num_heads: 8,
            bridge_hidden: 1024,
            peer_hidden: 512,
            da_reduction: 2,
            da_enabled: true,
            mkd_enabled: true,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by gradient checks and sanity training.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: (32, 32),
            num_domains: 4,
            encoder_channels: [8, 16, 24, 32],
            layers_per_block: [1; 8],
            num_heads: 2,
            bridge_hidden: 64,
            peer_hidden: 32,
            da_reduction: 2,
            da_enabled: true,
            mkd_enabled: true,
            alpha: 0.5,
            beta: 0.5,
        }
    }

    /// Channel dimension of block `i` (1..=8); the decoder mirrors the
    /// encoder in reverse.
    pub fn block_channels(&self, block: usize) -> usize {
        assert!((1..=8).contains(&block), "block index out of range");
        if block <= 4 {
            self.encoder_channels[block - 1]
        } else {
            self.encoder_channels[8 - block]
        }
    }

    /// Per-head channel dim K at block `i`.
    pub fn head_dim(&self, block: usize) -> usize {
        self.block_channels(block) / self.num_heads
    }

    /// Reduced DA dim floor(K/r) at block `i`.
    pub fn da_dim(&self, block: usize) -> usize {
        self.head_dim(block) / self.da_reduction
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(MdvitError::config(format!(
                "image_size ({h}, {w}) must be divisible by 32"
            )));
        }
        if self.num_domains < 1 {
            return Err(MdvitError::config("num_domains must be >= 1"));
        }
        if self.num_heads < 1 {
            return Err(MdvitError::config("num_heads must be >= 1"));
        }
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            if c == 0 || c % self.num_heads != 0 {
                return Err(MdvitError::config(format!(
                    "encoder_channels[{i}] = {c} must be a positive multiple of num_heads ({})",
                    self.num_heads
                )));
            }
        }
        if self.layers_per_block.contains(&0) {
            return Err(MdvitError::config("layers_per_block entries must be >= 1"));
        }
        if self.bridge_hidden == 0 || self.peer_hidden == 0 {
            return Err(MdvitError::config("hidden widths must be >= 1"));
        }
        if self.da_reduction < 1 {
            return Err(MdvitError::config("da_reduction must be >= 1"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(MdvitError::config("alpha and beta must be >= 0"));
        }
        if self.da_enabled {
            for block in 1..=8 {
                if self.da_dim(block) < 1 {
                    return Err(MdvitError::config(format!(
                        "da_enabled requires floor(K/r) >= 1 at every block; block {block} has K={} r={}",
                        self.head_dim(block),
                        self.da_reduction
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs between LR decay steps.
    pub lr_step: usize,
    /// Multiplicative decay factor per step.
    pub lr_gamma: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Master augmentation switch.
    pub augment: bool,
    pub aug_scale: bool,
    pub aug_shift: bool,
    pub aug_rotate: bool,
    pub aug_flip: bool,
    pub aug_noise: bool,
    pub aug_brightness_contrast: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            paradigm: Paradigm::Mat,
            epochs: 200,
            batch_size: 16,
            base_lr: 1e-4,
            lr_step: 50,
            lr_gamma: 0.5,
            weight_decay: 0.01,
            seed: DEFAULT_SEED,
            augment: true,
            aug_scale: true,
            aug_shift: true,
            aug_rotate: true,
            aug_flip: true,
            aug_noise: true,
            aug_brightness_contrast: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MdvitError::config("epochs and batch_size must be >= 1"));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(MdvitError::config("base_lr must be > 0"));
        }
        if self.lr_step == 0 {
            return Err(MdvitError::config("lr_step must be >= 1"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(MdvitError::config("lr_gamma must lie in (0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(MdvitError::config("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Joint checks that need both halves (e.g. balanced-sampling divisibility).
pub fn validate_pair(model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    model.validate()?;
    train.validate()?;
    if train.paradigm != Paradigm::St && !train.batch_size.is_multiple_of(model.num_domains) {
        return Err(MdvitError::config(format!(
            "batch_size {} must be divisible by num_domains {} under {} balanced sampling",
            train.batch_size, model.num_domains, train.paradigm
        )));
    }
    if train.paradigm == Paradigm::Mat && !(model.da_enabled && model.mkd_enabled) {
        return Err(MdvitError::config(
            "paradigm mat requires da_enabled=true and mkd_enabled=true",
        ));
    }
    Ok(())
}

/// Token count N_i = (H / 2^{i+1}) * (W / 2^{i+1}) of encoder block `i`.
pub fn token_count(i: usize, h: usize, w: usize) -> Result<usize> {
    if !(1..=4).contains(&i) {
        return Err(MdvitError::shape(format!("block index {i} out of 1..=4")));
    }
    let div = 1usize << (i + 1);
    if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
        return Err(MdvitError::shape(format!(
            "image ({h}, {w}) not divisible by 2^{} for block {i}",
            i + 1
        )));
    }
    Ok((h / div) * (w / div))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| MdvitError::config(format!("{key}: expected integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| MdvitError::config(format!("{key}: expected number, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(MdvitError::config(format!(
            "{key}: expected boolean, got '{other}'"
        ))),
    }
}

fn parse_list(key: &str, v: &str, expect: usize) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> = v.split(',').map(|p| parse_usize(key, p)).collect();
    let items = items?;
    if items.len() != expect {
        return Err(MdvitError::config(format!(
            "{key}: expected {expect} comma-separated integers, got {}",
            items.len()
        )));
    }
    Ok(items)
}

/// Parse configs from the flat key=value text format. Missing keys take the
/// documented defaults; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(MdvitError::config(format!(
                "line {}: expected key=value, got '{raw}'",
                lineno + 1
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "image_size" => {
                let v = parse_list(key, value, 2)?;
                model.image_size = (v[0], v[1]);
            }
            "num_domains" => model.num_domains = parse_usize(key, value)?,
            "encoder_channels" => {
                let v = parse_list(key, value, 4)?;
                model.encoder_channels = [v[0], v[1], v[2], v[3]];
            }
            "layers_per_block" => {
                let v = parse_list(key, value, 8)?;
                model.layers_per_block = v.try_into().unwrap();
            }
            "num_heads" => model.num_heads = parse_usize(key, value)?,
            "bridge_hidden" => model.bridge_hidden = parse_usize(key, value)?,
            "peer_hidden" => model.peer_hidden = parse_usize(key, value)?,
            "da_reduction" => model.da_reduction = parse_usize(key, value)?,
            "da_enabled" => model.da_enabled = parse_bool(key, value)?,
            "mkd_enabled" => model.mkd_enabled = parse_bool(key, value)?,
            "alpha" => model.alpha = parse_f64(key, value)?,
            "beta" => model.beta = parse_f64(key, value)?,
            "paradigm" => train.paradigm = Paradigm::parse(value)?,
            "epochs" => train.epochs = parse_usize(key, value)?,
            "batch_size" => train.batch_size = parse_usize(key, value)?,
            "base_lr" => train.base_lr = parse_f64(key, value)?,
            "lr_step" => train.lr_step = parse_usize(key, value)?,
            "lr_gamma" => train.lr_gamma = parse_f64(key, value)?,
            "weight_decay" => train.weight_decay = parse_f64(key, value)?,
            "seed" => {
                train.seed = value.parse().map_err(|_| {
                    MdvitError::config(format!("seed: expected integer, got '{value}'"))
                })?
            }
            "augment" => train.augment = parse_bool(key, value)?,
            "aug_scale" => train.aug_scale = parse_bool(key, value)?,
            "aug_shift" => train.aug_shift = parse_bool(key, value)?,
            "aug_rotate" => train.aug_rotate = parse_bool(key, value)?,
            "aug_flip" => train.aug_flip = parse_bool(key, value)?,
            "aug_noise" => train.aug_noise = parse_bool(key, value)?,
            "aug_brightness_contrast" => train.aug_brightness_contrast = parse_bool(key, value)?,
            other => {
                return Err(MdvitError::config(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

/// Load and validate configs from a file.
pub fn load_config(path: impl AsRef<Path>) -> Result<(ModelConfig, TrainConfig)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| MdvitError::config(format!("cannot read config '{}': {e}", path.display())))?;
    parse_config(&text)
}

fn list(items: &[usize]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Serialize both configs with every key materialized; parses back to an
/// equal pair.
pub fn serialize_config(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut out = String::new();
    let push = |out: &mut String, k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    push(
        &mut out,
        "image_size",
        list(&[model.image_size.0, model.image_size.1]),
    );
    push(&mut out, "num_domains", model.num_domains.to_string());
    push(&mut out, "encoder_channels", list(&model.encoder_channels));
    push(&mut out, "layers_per_block", list(&model.layers_per_block));
    push(&mut out, "num_heads", model.num_heads.to_string());
    push(&mut out, "bridge_hidden", model.bridge_hidden.to_string());
    push(&mut out, "peer_hidden", model.peer_hidden.to_string());
    push(&mut out, "da_reduction", model.da_reduction.to_string());
    push(&mut out, "da_enabled", model.da_enabled.to_string());
    push(&mut out, "mkd_enabled", model.mkd_enabled.to_string());
    push(&mut out, "alpha", format!("{}", model.alpha));
    push(&mut out, "beta", format!("{}", model.beta));
    push(&mut out, "paradigm", train.paradigm.as_str().to_string());
    push(&mut out, "epochs", train.epochs.to_string());
    push(&mut out, "batch_size", train.batch_size.to_string());
    push(&mut out, "base_lr", format!("{}", train.base_lr));
    push(&mut out, "lr_step", train.lr_step.to_string());
    push(&mut out, "lr_gamma", format!("{}", train.lr_gamma));
    push(&mut out, "weight_decay", format!("{}", train.weight_decay));
    push(&mut out, "seed", train.seed.to_string());
    push(&mut out, "augment", train.augment.to_string());
    push(&mut out, "aug_scale", train.aug_scale.to_string());
    push(&mut out, "aug_shift", train.aug_shift.to_string());
    push(&mut out, "aug_rotate", train.aug_rotate.to_string());
    push(&mut out, "aug_flip", train.aug_flip.to_string());
    push(&mut out, "aug_noise", train.aug_noise.to_string());
    push(
        &mut out,
        "aug_brightness_contrast",
        train.aug_brightness_contrast.to_string(),
    );
    out
}
