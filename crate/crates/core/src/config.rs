//! Experiment configuration: a flat `key = value` document (TOML syntax)
//! with defaults for every key, plus the shared enums and the learning-rate
//! schedule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ReidError, Result};
use crate::rng::fnv1a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Aerial,
    Ground,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visible, Modality::Infrared];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }
}

impl Platform {
    pub const ALL: [Platform; 2] = [Platform::Aerial, Platform::Ground];

    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Aerial => "aerial",
            Platform::Ground => "ground",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Platform::Aerial => 0,
            Platform::Ground => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = ReidError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "visible" | "rgb" | "vis" => Ok(Modality::Visible),
            "infrared" | "ir" => Ok(Modality::Infrared),
            _ => Err(ReidError::InvalidArgument(format!("unknown modality `{s}`"))),
        }
    }
}

impl FromStr for Platform {
    type Err = ReidError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aerial" | "uav" => Ok(Platform::Aerial),
            "ground" | "cctv" => Ok(Platform::Ground),
            _ => Err(ReidError::InvalidArgument(format!("unknown platform `{s}`"))),
        }
    }
}

/// One of the three streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Style,
    Memory,
    Intermediary,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Style, Stream::Memory, Stream::Intermediary];

    fn bit(self) -> u8 {
        match self {
            Stream::Style => 1,
            Stream::Memory => 2,
            Stream::Intermediary => 4,
        }
    }

    pub fn digit(self) -> char {
        match self {
            Stream::Style => '1',
            Stream::Memory => '2',
            Stream::Intermediary => '3',
        }
    }
}

/// Non-empty subset of the streams, written `St1`, `St23`, `St123`, ...
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSet(u8);

impl StreamSet {
    pub const ALL: StreamSet = StreamSet(7);

    /// The seven non-empty subsets in ablation-table order.
    pub const ABLATION_ORDER: [StreamSet; 7] =
        [StreamSet(1), StreamSet(2), StreamSet(4), StreamSet(3), StreamSet(5), StreamSet(6), StreamSet(7)];

    pub fn of(streams: &[Stream]) -> Self {
        StreamSet(streams.iter().fold(0, |acc, s| acc | s.bit()))
    }

    pub fn contains(self, s: Stream) -> bool {
        self.0 & s.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn streams(self) -> impl Iterator<Item = Stream> {
        Stream::ALL.into_iter().filter(move |s| self.contains(*s))
    }
}

impl fmt::Display for StreamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("St")?;
        for s in self.streams() {
            write!(f, "{}", s.digit())?;
        }
        Ok(())
    }
}

impl fmt::Debug for StreamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for StreamSet {
    type Err = ReidError;
    fn from_str(s: &str) -> Result<Self> {
        let mut bits = 0u8;
        let body = s.trim();
        for part in body.split([',', '+', ' ']).filter(|p| !p.is_empty()) {
            let digits = part.trim_start_matches("St").trim_start_matches("st");
            if digits.is_empty() {
                return Err(ReidError::config("stream_mask", format!("cannot parse `{s}`")));
            }
            for c in digits.chars() {
                bits |= match c {
                    '1' => 1,
                    '2' => 2,
                    '3' => 4,
                    _ => return Err(ReidError::config("stream_mask", format!("unknown stream `{c}` in `{s}`"))),
                };
            }
        }
        if bits == 0 {
            return Err(ReidError::config("stream_mask", "must name at least one stream"));
        }
        Ok(StreamSet(bits))
    }
}

impl Serialize for StreamSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StreamSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which tensors the cross-reconstruction loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrOperands {
    /// Encoder feature maps of the anaglyph frames.
    Features,
    /// Raw anaglyph pixels.
    Pixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_identities_per_batch: usize,
    pub tracklets_per_identity: usize,
    pub frames_per_clip: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub tau: f64,
    pub lr_init: f64,
    pub epochs: usize,
    pub seed: u64,
    pub stream_mask: StreamSet,
    pub image_size: [usize; 2],
    pub embed_dim: usize,
    pub triplet_margin: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub edge_kernel: [f64; 9],
    pub edge_offset: f64,
    pub cr_operands: CrOperands,
    pub style_augment: bool,
    pub style_attack: bool,
    pub aux_stream_heads: bool,
    pub camera_filter: bool,
    pub checkpoint_every: usize,
    pub conv_width: usize,
    pub attn_width: usize,
    pub patch_size: usize,
    pub decoder_layers: usize,
    pub lstm_hidden: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_identities_per_batch: 8,
            tracklets_per_identity: 4,
            frames_per_clip: 8,
            lambda1: 1.0,
            lambda2: 1.5,
            lambda3: 1.0,
            lambda4: 1.5,
            tau: 0.07,
            lr_init: 3.5e-4,
            epochs: 120,
            seed: 0,
            stream_mask: StreamSet::ALL,
            image_size: [32, 16],
            embed_dim: 64,
            triplet_margin: 0.3,
            label_smoothing: 0.1,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 10.0,
            pixel_mean: [0.5, 0.5, 0.5],
            pixel_std: [0.25, 0.25, 0.25],
            edge_kernel: [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
            edge_offset: 0.0,
            cr_operands: CrOperands::Features,
            style_augment: true,
            style_attack: true,
            aux_stream_heads: false,
            camera_filter: true,
            checkpoint_every: 10,
            conv_width: 8,
            attn_width: 32,
            patch_size: 8,
            decoder_layers: 2,
            lstm_hidden: 32,
        }
    }
}

/// Key, default, and meaning for every config key (used by `--help`).
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("num_identities_per_batch", "8", "identities per batch (P)"),
    ("tracklets_per_identity", "4", "tracklets per identity (K)"),
    ("frames_per_clip", "8", "frames per clip (T)"),
    ("lambda1", "1.0", "weight of the triplet loss"),
    ("lambda2", "1.5", "weight of the style-attack loss"),
    ("lambda3", "1.0", "weight of the cross-reconstruction loss"),
    ("lambda4", "1.5", "weight of the video-to-memory loss"),
    ("tau", "0.07", "video-to-memory temperature"),
    ("lr_init", "3.5e-4", "initial Adam learning rate (cosine annealed to 0)"),
    ("epochs", "120", "training epochs"),
    ("seed", "0", "global seed"),
    ("stream_mask", "\"St123\"", "enabled streams"),
    ("image_size", "[32, 16]", "frame height, width"),
    ("embed_dim", "64", "stream and fused feature width"),
    ("triplet_margin", "0.3", "batch-hard triplet margin"),
    ("label_smoothing", "0.1", "identity loss label smoothing"),
    ("weight_decay", "0.0", "L2 weight decay"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("grad_clip_norm", "10.0", "global gradient-norm clip (0 disables)"),
    ("pixel_mean", "[0.5, 0.5, 0.5]", "per-channel standardisation mean"),
    ("pixel_std", "[0.25, 0.25, 0.25]", "per-channel standardisation std"),
    ("edge_kernel", "[0,1,0,1,-4,1,0,1,0]", "3x3 anaglyph edge operator, row-major"),
    ("edge_offset", "0.0", "anaglyph offset"),
    ("cr_operands", "\"features\"", "cross-reconstruction operands: features | pixels"),
    ("style_augment", "true", "channel-wise style augmentation on stream 1 input"),
    ("style_attack", "true", "style attack after block 3 of stream 1"),
    ("aux_stream_heads", "false", "extra per-stream identity heads"),
    ("camera_filter", "true", "drop same-id same-camera gallery entries"),
    ("checkpoint_every", "10", "epochs between checkpoints (0: final only)"),
    ("conv_width", "8", "base channel width of the convolutional encoders"),
    ("attn_width", "32", "token width of the patch-attention encoder"),
    ("patch_size", "8", "patch side of the patch-attention encoder"),
    ("decoder_layers", "2", "memory prompt decoder depth"),
    ("lstm_hidden", "32", "hidden width of each temporal LSTM direction"),
];

impl ExperimentConfig {
    pub fn batch_tracklets(&self) -> usize {
        self.num_identities_per_batch * self.tracklets_per_identity
    }

    pub fn batch_frames(&self) -> usize {
        self.batch_tracklets() * self.frames_per_clip
    }

    pub fn lambdas(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_identities_per_batch", self.num_identities_per_batch),
            ("tracklets_per_identity", self.tracklets_per_identity),
            ("frames_per_clip", self.frames_per_clip),
            ("epochs", self.epochs),
            ("embed_dim", self.embed_dim),
            ("conv_width", self.conv_width),
            ("attn_width", self.attn_width),
            ("patch_size", self.patch_size),
            ("lstm_hidden", self.lstm_hidden),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ReidError::config(k, "must be at least 1"));
            }
        }
        for (i, l) in self.lambdas().iter().enumerate() {
            if !(l.is_finite() && *l >= 0.0) {
                return Err(ReidError::config(format!("lambda{}", i + 1), format!("must be a non-negative real, got {l}")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ReidError::config("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return Err(ReidError::config("lr_init", format!("must be > 0, got {}", self.lr_init)));
        }
        if !(self.triplet_margin.is_finite() && self.triplet_margin >= 0.0) {
            return Err(ReidError::config("triplet_margin", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ReidError::config("label_smoothing", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(ReidError::config("weight_decay", "must be >= 0"));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ReidError::config(k, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(ReidError::config("adam_eps", "must be > 0"));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(ReidError::config("grad_clip_norm", "must be >= 0"));
        }
        if self.pixel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(ReidError::config("pixel_std", "entries must be > 0"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(ReidError::config("seed", "must fit in a signed 64-bit integer"));
        }
        if self.stream_mask.is_empty() {
            return Err(ReidError::config("stream_mask", "must name at least one stream"));
        }
        let [h, w] = self.image_size;
        if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
            return Err(ReidError::config("image_size", format!("sides must be multiples of 8 and >= 8, got {h}x{w}")));
        }
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(ReidError::config("patch_size", format!("must divide image_size {h}x{w}")));
        }
        if self.edge_kernel.iter().any(|v| !v.is_finite()) || !self.edge_offset.is_finite() {
            return Err(ReidError::config("edge_kernel", "entries must be finite"));
        }
        Ok(())
    }

    /// Parse a key-value document, applying `overrides` (`key=value`) on top.
    pub fn from_str_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ReidError::ConfigParse(e.to_string()))?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| ReidError::ConfigParse(format!("override `{ov}` is not key=value")))?;
            let k = k.trim();
            if !CONFIG_KEYS.iter().any(|(name, _, _)| *name == k) {
                return Err(ReidError::config(k, "unknown config key"));
            }
            let v = v.trim();
            let value = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        for k in table.keys() {
            if !CONFIG_KEYS.iter().any(|(name, _, _)| name == k) {
                return Err(ReidError::config(k.clone(), "unknown config key"));
            }
        }
        let cfg: ExperimentConfig = toml::Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| {
            let key = table
                .keys()
                .find(|k| e.to_string().contains(k.as_str()))
                .cloned()
                .unwrap_or_else(|| "<document>".into());
            ReidError::config(key, e.to_string().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Stable hash of the serialised config.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

impl FromStr for ExperimentConfig {
    type Err = ReidError;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_str_with_overrides(s, &[])
    }
}

/// Read a config file; omitted keys take their defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_config_with_overrides(path, &[])
}

pub fn load_config_with_overrides(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
    ExperimentConfig::from_str_with_overrides(&text, overrides)
}

/// Cosine-annealed learning rate, `lr_init * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(ReidError::InvalidArgument("total_steps must be > 0".into()));
    }
    if step > total_steps {
        return Err(ReidError::InvalidArgument(format!("step {step} outside [0, {total_steps}]")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_init * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
