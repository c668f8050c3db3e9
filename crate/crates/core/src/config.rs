//! Model and training configuration, plus the flat key-value config file
//! format used by the CLI.
//!
//! The file format is one `key = value` pair per line, `#` starts a comment.
//! An `ablation = <preset>` line expands to the corresponding module wiring
//! (rectification enables, module order, query composition); explicit keys
//! after it override the preset.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {value} ({reason})")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("malformed config line {line}: {text}")]
    MalformedLine { line: usize, text: String },
}

/// Order of the two rectification modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectifyOrder {
    GeometryFirst,
    AppearanceFirst,
}

/// Query composition for the rectification attention: direction embedding
/// only (V) or rendered-depth plus direction (VD).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    V,
    Vd,
}

/// Named module-wiring presets matching the ablation table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationPreset {
    /// Plain cost-volume field, no rectification.
    Bl,
    /// Appearance rectification only, direction-only query.
    AV,
    /// Appearance rectification only, depth+direction query.
    AVd,
    /// Geometric rectification only, direction-only query.
    GV,
    /// Geometric rectification only, depth+direction query.
    GVd,
    /// Both modules, appearance first.
    AgVd,
    /// Both modules, geometry first (the shipped default).
    GaVd,
}

impl AblationPreset {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BL" => Some(Self::Bl),
            "A_V" => Some(Self::AV),
            "A_VD" => Some(Self::AVd),
            "G_V" => Some(Self::GV),
            "G_VD" => Some(Self::GVd),
            "AG_VD" => Some(Self::AgVd),
            "GA_VD" => Some(Self::GaVd),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Bl => "BL",
            Self::AV => "A_V",
            Self::AVd => "A_VD",
            Self::GV => "G_V",
            Self::GVd => "G_VD",
            Self::AgVd => "AG_VD",
            Self::GaVd => "GA_VD",
        }
    }

    pub fn all() -> [AblationPreset; 7] {
        [
            Self::Bl,
            Self::AV,
            Self::AVd,
            Self::GV,
            Self::GVd,
            Self::AgVd,
            Self::GaVd,
        ]
    }
}

/// Architecture and wiring of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Image feature channels C_1 produced by the 2-D extractor.
    pub feat_channels: usize,
    /// Widths of the three extractor stages; the last must equal
    /// `feat_channels`.
    pub extractor_channels: [usize; 3],
    /// Geometry volume channels.
    pub volume_channels: usize,
    /// Base channel width of the 3-D U-Net.
    pub unet_base: usize,
    /// Radiance feature width C_r; also the attention model dimension.
    pub radiance_dim: usize,
    pub attention_heads: usize,
    /// Number of sweep planes D.
    pub sweep_planes: usize,
    /// Samples per ray N.
    pub samples_per_ray: usize,
    pub position_freqs: usize,
    pub direction_freqs: usize,
    pub depth_freqs: usize,
    /// Hidden width of the M_1..M_4 heads.
    pub mlp_hidden: usize,
    pub geo_rectify: bool,
    pub app_rectify: bool,
    pub order: RectifyOrder,
    pub query_mode: QueryMode,
    /// Drop the sample-interval term from the transmittance, matching the
    /// printed rendering formulas verbatim (sigma_k instead of
    /// sigma_k * delta_k).
    pub strict_paper_delta: bool,
    /// Average appearance features over visible views only instead of over
    /// all source views.
    pub visibility_weighted_mean: bool,
    /// Composite over white instead of black.
    pub white_background: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_channels: 32,
            extractor_channels: [8, 16, 32],
            volume_channels: 8,
            unet_base: 8,
            radiance_dim: 64,
            attention_heads: 4,
            sweep_planes: 128,
            samples_per_ray: 128,
            position_freqs: 10,
            direction_freqs: 5,
            depth_freqs: 5,
            mlp_hidden: 128,
            geo_rectify: true,
            app_rectify: true,
            order: RectifyOrder::GeometryFirst,
            query_mode: QueryMode::Vd,
            strict_paper_delta: false,
            visibility_weighted_mean: false,
            white_background: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the scaled-down
    /// experiments: every block shrinks but the wiring is identical.
    pub fn tiny() -> Self {
        ModelConfig {
            feat_channels: 8,
            extractor_channels: [8, 8, 8],
            volume_channels: 4,
            unet_base: 4,
            radiance_dim: 16,
            attention_heads: 2,
            sweep_planes: 32,
            samples_per_ray: 32,
            position_freqs: 6,
            direction_freqs: 3,
            depth_freqs: 3,
            mlp_hidden: 32,
            ..ModelConfig::default()
        }
    }

    pub fn apply_preset(&mut self, preset: AblationPreset) {
        let (geo, app, order, query) = match preset {
            AblationPreset::Bl => (false, false, RectifyOrder::GeometryFirst, QueryMode::Vd),
            AblationPreset::AV => (false, true, RectifyOrder::GeometryFirst, QueryMode::V),
            AblationPreset::AVd => (false, true, RectifyOrder::GeometryFirst, QueryMode::Vd),
            AblationPreset::GV => (true, false, RectifyOrder::GeometryFirst, QueryMode::V),
            AblationPreset::GVd => (true, false, RectifyOrder::GeometryFirst, QueryMode::Vd),
            AblationPreset::AgVd => (true, true, RectifyOrder::AppearanceFirst, QueryMode::Vd),
            AblationPreset::GaVd => (true, true, RectifyOrder::GeometryFirst, QueryMode::Vd),
        };
        self.geo_rectify = geo;
        self.app_rectify = app;
        self.order = order;
        self.query_mode = query;
    }

    pub fn position_dim(&self) -> usize {
        3 * (2 * self.position_freqs + 1)
    }

    pub fn direction_dim(&self) -> usize {
        3 * (2 * self.direction_freqs + 1)
    }

    pub fn depth_dim(&self) -> usize {
        2 * self.depth_freqs + 1
    }

    /// Input width of the query head M_3.
    pub fn query_input_dim(&self) -> usize {
        match self.query_mode {
            QueryMode::V => self.direction_dim(),
            QueryMode::Vd => self.depth_dim() + self.direction_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |key: &str, value: String, reason: &str| {
            Err(ConfigError::InvalidValue {
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        if self.extractor_channels[2] != self.feat_channels {
            return err(
                "extractor_channels",
                format!("{:?}", self.extractor_channels),
                "last stage width must equal feat_channels",
            );
        }
        if self.radiance_dim % self.attention_heads != 0 {
            return err(
                "radiance_dim",
                self.radiance_dim.to_string(),
                "must be divisible by attention_heads",
            );
        }
        if self.sweep_planes < 2 || self.samples_per_ray < 2 {
            return err(
                "sweep_planes/samples",
                format!("{}/{}", self.sweep_planes, self.samples_per_ray),
                "need at least 2 planes and 2 samples",
            );
        }
        Ok(())
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub seed: u64,
    /// Stratified depth jitter during training.
    pub jitter: bool,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Source views per target (M).
    pub source_views: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rays_per_batch: 1024,
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 10_000,
            seed: 0,
            jitter: true,
            grad_clip: 0.0,
            lr_schedule: LrSchedule::Constant,
            log_every: 50,
            checkpoint_every: 1000,
            source_views: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rays_per_batch < 1 {
            return Err(ConfigError::InvalidValue {
                key: "rays_per_batch".into(),
                value: self.rays_per_batch.to_string(),
                reason: "must be at least 1".into(),
            });
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::InvalidValue {
                key: "learning_rate".into(),
                value: self.learning_rate.to_string(),
                reason: "must be positive".into(),
            });
        }
        if self.source_views < 2 {
            return Err(ConfigError::InvalidValue {
                key: "source_views".into(),
                value: self.source_views.to_string(),
                reason: "need at least 2 source views".into(),
            });
        }
        Ok(())
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn tiny() -> Self {
        Config {
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::MalformedLine {
                line: lineno + 1,
                text: raw.to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|e| bad(&e.to_string()));
        let parse_u64 = |v: &str| v.parse::<u64>().map_err(|e| bad(&e.to_string()));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| bad(&e.to_string()));
        let parse_bool = |v: &str| match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("expected true/false")),
        };
        match key {
            "ablation" => {
                let preset = AblationPreset::parse(value).ok_or_else(|| bad("unknown preset"))?;
                self.model.apply_preset(preset);
            }
            "feat_channels" => self.model.feat_channels = parse_usize(value)?,
            "extractor_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(&e.to_string()))?;
                if parts.len() != 3 {
                    return Err(bad("expected three comma-separated widths"));
                }
                self.model.extractor_channels = [parts[0], parts[1], parts[2]];
            }
            "volume_channels" => self.model.volume_channels = parse_usize(value)?,
            "unet_base" => self.model.unet_base = parse_usize(value)?,
            "radiance_dim" => self.model.radiance_dim = parse_usize(value)?,
            "attention_heads" => self.model.attention_heads = parse_usize(value)?,
            "sweep_planes" => self.model.sweep_planes = parse_usize(value)?,
            "samples_per_ray" => self.model.samples_per_ray = parse_usize(value)?,
            "position_freqs" => self.model.position_freqs = parse_usize(value)?,
            "direction_freqs" => self.model.direction_freqs = parse_usize(value)?,
            "depth_freqs" => self.model.depth_freqs = parse_usize(value)?,
            "mlp_hidden" => self.model.mlp_hidden = parse_usize(value)?,
            "geo_rectify" => self.model.geo_rectify = parse_bool(value)?,
            "app_rectify" => self.model.app_rectify = parse_bool(value)?,
            "order" => {
                self.model.order = match value {
                    "geometry_first" => RectifyOrder::GeometryFirst,
                    "appearance_first" => RectifyOrder::AppearanceFirst,
                    _ => return Err(bad("expected geometry_first or appearance_first")),
                }
            }
            "query" => {
                self.model.query_mode = match value.to_ascii_lowercase().as_str() {
                    "v" => QueryMode::V,
                    "vd" => QueryMode::Vd,
                    _ => return Err(bad("expected v or vd")),
                }
            }
            "strict_paper_delta" => self.model.strict_paper_delta = parse_bool(value)?,
            "visibility_weighted_mean" => {
                self.model.visibility_weighted_mean = parse_bool(value)?
            }
            "white_background" => self.model.white_background = parse_bool(value)?,
            "rays_per_batch" => self.train.rays_per_batch = parse_usize(value)?,
            "learning_rate" => self.train.learning_rate = parse_f64(value)?,
            "beta1" => self.train.beta1 = parse_f64(value)?,
            "beta2" => self.train.beta2 = parse_f64(value)?,
            "adam_eps" => self.train.adam_eps = parse_f64(value)?,
            "steps" => self.train.steps = parse_u64(value)?,
            "seed" => self.train.seed = parse_u64(value)?,
            "jitter" => self.train.jitter = parse_bool(value)?,
            "grad_clip" => self.train.grad_clip = parse_f64(value)?,
            "lr_schedule" => {
                self.train.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(bad("expected constant or cosine")),
                }
            }
            "log_every" => self.train.log_every = parse_u64(value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_u64(value)?,
            "source_views" => self.train.source_views = parse_usize(value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Canonical serialization: every key, sorted, one per line. Feeding this
    /// back through [`Config::parse`] reproduces the config, and its hash is
    /// the config hash stored in checkpoints.
    pub fn canonical(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut pairs: Vec<(&str, String)> = vec![
            ("adam_eps", t.adam_eps.to_string()),
            ("app_rectify", m.app_rectify.to_string()),
            ("attention_heads", m.attention_heads.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("depth_freqs", m.depth_freqs.to_string()),
            ("direction_freqs", m.direction_freqs.to_string()),
            (
                "extractor_channels",
                format!(
                    "{},{},{}",
                    m.extractor_channels[0], m.extractor_channels[1], m.extractor_channels[2]
                ),
            ),
            ("feat_channels", m.feat_channels.to_string()),
            ("geo_rectify", m.geo_rectify.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("jitter", t.jitter.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("log_every", t.log_every.to_string()),
            (
                "lr_schedule",
                match t.lr_schedule {
                    LrSchedule::Constant => "constant".into(),
                    LrSchedule::Cosine => "cosine".into(),
                },
            ),
            ("mlp_hidden", m.mlp_hidden.to_string()),
            (
                "order",
                match m.order {
                    RectifyOrder::GeometryFirst => "geometry_first".into(),
                    RectifyOrder::AppearanceFirst => "appearance_first".into(),
                },
            ),
            ("position_freqs", m.position_freqs.to_string()),
            (
                "query",
                match m.query_mode {
                    QueryMode::V => "v".into(),
                    QueryMode::Vd => "vd".into(),
                },
            ),
            ("radiance_dim", m.radiance_dim.to_string()),
            ("rays_per_batch", t.rays_per_batch.to_string()),
            ("samples_per_ray", m.samples_per_ray.to_string()),
            ("seed", t.seed.to_string()),
            ("source_views", t.source_views.to_string()),
            ("steps", t.steps.to_string()),
            ("strict_paper_delta", m.strict_paper_delta.to_string()),
            ("sweep_planes", m.sweep_planes.to_string()),
            ("unet_base", m.unet_base.to_string()),
            (
                "visibility_weighted_mean",
                m.visibility_weighted_mean.to_string(),
            ),
            ("volume_channels", m.volume_channels.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }
}

/// FNV-1a 64-bit, used for config hashing and container checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
