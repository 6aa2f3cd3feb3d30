//! Run configuration: every architecture and training hyperparameter, its
//! defaults, validation, and a flat `key = value` text form.
//!
//! The text form is a flat TOML subset (one `key = value` per line, `#`
//! comments, quoted strings, bracketed integer lists). [`RunConfig::set_key`]
//! is the single registry of key names; the file parser and the CLI
//! `--set key=value` overrides both go through it.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("{constraint}: {lhs_name} = {lhs}, {rhs_name} = {rhs}")]
    Constraint {
        constraint: &'static str,
        lhs_name: &'static str,
        lhs: String,
        rhs_name: &'static str,
        rhs: String,
    },
}

impl ConfigError {
    fn constraint(
        constraint: &'static str,
        lhs_name: &'static str,
        lhs: impl fmt::Display,
        rhs_name: &'static str,
        rhs: impl fmt::Display,
    ) -> Self {
        ConfigError::Constraint {
            constraint,
            lhs_name,
            lhs: lhs.to_string(),
            rhs_name,
            rhs: rhs.to_string(),
        }
    }
}

/// Which encoder stream the bottleneck reshapes into a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BottleneckRoute {
    /// The final backbone token stream, reshaped to its `(H/P, W/P)` grid.
    #[default]
    Dino,
    /// The deepest-scale slice of the final adapter token stream.
    SpaDeepest,
}

impl BottleneckRoute {
    pub fn as_str(self) -> &'static str {
        match self {
            BottleneckRoute::Dino => "dino",
            BottleneckRoute::SpaDeepest => "spa_deepest",
        }
    }
}

impl FromStr for BottleneckRoute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dino" => Ok(BottleneckRoute::Dino),
            "spa_deepest" => Ok(BottleneckRoute::SpaDeepest),
            other => Err(format!("expected `dino` or `spa_deepest`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetKind {
    #[default]
    Synapse,
    Acdc,
    Synthetic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Synapse => "synapse",
            DatasetKind::Acdc => "acdc",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synapse" => Ok(DatasetKind::Synapse),
            "acdc" => Ok(DatasetKind::Acdc),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(format!("expected synapse, acdc or synthetic, got `{other}`")),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sentinel value of `backbone_checkpoint` selecting a randomly initialized backbone.
pub const RANDOM_BACKBONE: &str = "random";

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Pixels per patch side.
    pub patch_size: usize,
    /// Token width shared by the backbone and both adapters.
    pub embed_dim: usize,
    /// Transformer blocks in the frozen backbone.
    pub num_blocks: usize,
    /// Encoder stages; each owns `num_blocks / num_stages` blocks and one fusion adapter.
    pub num_stages: usize,
    /// Self-attention heads inside the backbone blocks.
    pub backbone_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Downsampling factors of the three adapter feature maps.
    pub spa_scales: [usize; 3],
    pub spa_channels: [usize; 3],
    /// Squeeze-and-excitation after each pyramid stage.
    pub spa_channel_attention: bool,
    pub mhca_heads: usize,
    /// `None` until resolved; resolves to `num_classes`.
    pub bottleneck_channels: Option<usize>,
    pub bottleneck_route: BottleneckRoute,
    /// Output channels of decoder stages A, B, C.
    pub decoder_channels: [usize; 3],
    /// Network input `(H, W)`.
    pub input_size: [usize; 2],
    /// Checkpoint path or [`RANDOM_BACKBONE`].
    pub backbone_checkpoint: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 14,
            embed_dim: 768,
            num_blocks: 12,
            num_stages: 3,
            backbone_heads: 12,
            mlp_ratio: 4,
            num_classes: 9,
            spa_scales: [4, 8, 16],
            spa_channels: [128, 256, 512],
            spa_channel_attention: true,
            mhca_heads: 12,
            bottleneck_channels: None,
            bottleneck_route: BottleneckRoute::Dino,
            decoder_channels: [512, 256, 128],
            input_size: [224, 224],
            backbone_checkpoint: RANDOM_BACKBONE.to_owned(),
        }
    }
}

/// Contiguous block ranges, one per encoder stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePartition {
    pub stages: Vec<Range<usize>>,
}

impl StagePartition {
    pub fn even(num_blocks: usize, num_stages: usize) -> Result<Self, ConfigError> {
        if num_stages == 0 || num_blocks % num_stages != 0 {
            return Err(ConfigError::constraint(
                "L mod N != 0",
                "num_blocks",
                num_blocks,
                "num_stages",
                num_stages,
            ));
        }
        let per = num_blocks / num_stages;
        let stages = (0..num_stages).map(|s| s * per..(s + 1) * per).collect();
        Ok(StagePartition { stages })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn blocks_per_stage(&self) -> usize {
        self.stages.first().map_or(0, |r| r.len())
    }
}

impl ModelConfig {
    /// Small randomly initialized configuration used by tests and desk-scale runs.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_blocks: 6,
            num_stages: 3,
            backbone_heads: 4,
            mlp_ratio: 2,
            num_classes: 3,
            spa_channels: [16, 32, 64],
            mhca_heads: 4,
            decoder_channels: [64, 32, 16],
            input_size: [112, 112],
            ..ModelConfig::default()
        }
    }

    pub fn height(&self) -> usize {
        self.input_size[0]
    }

    pub fn width(&self) -> usize {
        self.input_size[1]
    }

    /// Patch grid `(H/P, W/P)`.
    pub fn token_grid(&self) -> (usize, usize) {
        (self.height() / self.patch_size, self.width() / self.patch_size)
    }

    /// `K = H·W / P²`.
    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    /// Spatial size of the adapter map at scale index `s`.
    pub fn spa_grid(&self, s: usize) -> (usize, usize) {
        let r = self.spa_scales[s];
        (self.height() / r, self.width() / r)
    }

    pub fn spa_layout(&self) -> [(usize, usize); 3] {
        [self.spa_grid(0), self.spa_grid(1), self.spa_grid(2)]
    }

    /// `H·W·(1/r1² + 1/r2² + 1/r3²)`.
    pub fn spa_token_count(&self) -> usize {
        self.spa_layout().iter().map(|(h, w)| h * w).sum()
    }

    pub fn blocks_per_stage(&self) -> usize {
        self.num_blocks / self.num_stages.max(1)
    }

    pub fn stage_partition(&self) -> Result<StagePartition, ConfigError> {
        StagePartition::even(self.num_blocks, self.num_stages)
    }

    pub fn resolved_bottleneck_channels(&self) -> usize {
        self.bottleneck_channels.unwrap_or(self.num_classes)
    }

    pub fn is_random_backbone(&self) -> bool {
        self.backbone_checkpoint == RANDOM_BACKBONE
    }

    /// Fills every defaulted field in place.
    pub fn resolve(&mut self) {
        if self.bottleneck_channels.is_none() {
            self.bottleneck_channels = Some(self.num_classes);
        }
    }

    /// Sets the input size, switching to the first adapter scale triple that
    /// tiles it exactly: `(4, 8, 16)`, else `(4, 7, 14)`.
    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = [h, w];
        if let Some(scales) = compatible_scales(h, w) {
            self.spa_scales = scales;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let [h, w] = self.input_size;
        let positive: [(&str, usize); 7] = [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_stages", self.num_stages),
            ("backbone_heads", self.backbone_heads),
            ("mhca_heads", self.mhca_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ConfigError::InvalidValue {
                    key: key.to_owned(),
                    value: "0".to_owned(),
                    reason: "must be positive".to_owned(),
                });
            }
        }
        if self.num_classes < 2 {
            return Err(ConfigError::constraint(
                "num_classes < 2",
                "num_classes",
                self.num_classes,
                "minimum",
                2,
            ));
        }
        if self.num_classes > 255 {
            return Err(ConfigError::constraint(
                "num_classes > 255",
                "num_classes",
                self.num_classes,
                "maximum",
                255,
            ));
        }
        StagePartition::even(self.num_blocks, self.num_stages)?;
        if h % self.patch_size != 0 {
            return Err(ConfigError::constraint("H mod P != 0", "H", h, "P", self.patch_size));
        }
        if w % self.patch_size != 0 {
            return Err(ConfigError::constraint("W mod P != 0", "W", w, "P", self.patch_size));
        }
        if h == 0 || w == 0 {
            return Err(ConfigError::constraint("empty input", "H", h, "W", w));
        }
        for (s, &r) in self.spa_scales.iter().enumerate() {
            if r == 0 {
                return Err(ConfigError::InvalidValue {
                    key: "spa_scales".to_owned(),
                    value: format!("{:?}", self.spa_scales),
                    reason: format!("scale {s} is zero"),
                });
            }
            if h % r != 0 {
                return Err(ConfigError::constraint("H mod r != 0", "H", h, "r", r));
            }
            if w % r != 0 {
                return Err(ConfigError::constraint("W mod r != 0", "W", w, "r", r));
            }
        }
        if !self.spa_scales.windows(2).all(|p| p[0] < p[1]) {
            return Err(ConfigError::InvalidValue {
                key: "spa_scales".to_owned(),
                value: format!("{:?}", self.spa_scales),
                reason: "scales must be strictly increasing".to_owned(),
            });
        }
        if self.spa_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(ConfigError::InvalidValue {
                key: "spa_channels/decoder_channels".to_owned(),
                value: format!("{:?} / {:?}", self.spa_channels, self.decoder_channels),
                reason: "channel counts must be positive".to_owned(),
            });
        }
        if self.embed_dim % self.mhca_heads != 0 {
            return Err(ConfigError::constraint(
                "D mod mhca_heads != 0",
                "embed_dim",
                self.embed_dim,
                "mhca_heads",
                self.mhca_heads,
            ));
        }
        if self.embed_dim % self.backbone_heads != 0 {
            return Err(ConfigError::constraint(
                "D mod backbone_heads != 0",
                "embed_dim",
                self.embed_dim,
                "backbone_heads",
                self.backbone_heads,
            ));
        }
        if self.bottleneck_channels == Some(0) {
            return Err(ConfigError::InvalidValue {
                key: "bottleneck_channels".to_owned(),
                value: "0".to_owned(),
                reason: "must be positive".to_owned(),
            });
        }
        Ok(())
    }
}

/// First adapter scale triple in `[(4, 8, 16), (4, 7, 14)]` that divides both sides.
pub fn compatible_scales(h: usize, w: usize) -> Option<[usize; 3]> {
    [[4, 8, 16], [4, 7, 14]]
        .into_iter()
        .find(|s| s.iter().all(|&r| h % r == 0 && w % r == 0))
}

/// Optimization and data-pipeline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub base_lr: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub lr_power: f64,
    pub max_epochs: usize,
    /// Overrides `max_epochs` when set.
    pub max_iterations: Option<usize>,
    pub seed: u64,
    pub aug_flip: bool,
    pub aug_rotation: bool,
    pub aug_intensity: bool,
    pub w_dice: f64,
    pub w_ce: f64,
    pub dataset: DatasetKind,
    pub data_root: String,
    pub output_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            weight_decay: 1e-4,
            base_lr: 1e-4,
            lr_power: 0.9,
            max_epochs: 150,
            max_iterations: None,
            seed: 1234,
            aug_flip: true,
            aug_rotation: true,
            aug_intensity: true,
            w_dice: 1.0,
            w_ce: 1.0,
            dataset: DatasetKind::Synapse,
            data_root: "data/synapse".to_owned(),
            output_dir: "runs/udfa".to_owned(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::constraint(
                "batch_size < 1",
                "batch_size",
                0,
                "minimum",
                1,
            ));
        }
        if !(self.w_dice >= 0.0) || !(self.w_ce >= 0.0) {
            return Err(ConfigError::constraint(
                "loss weights must be non-negative",
                "w_dice",
                self.w_dice,
                "w_ce",
                self.w_ce,
            ));
        }
        if !(self.w_dice + self.w_ce > 0.0) {
            return Err(ConfigError::constraint(
                "w_dice + w_ce must be positive",
                "w_dice",
                self.w_dice,
                "w_ce",
                self.w_ce,
            ));
        }
        for (key, v) in [
            ("weight_decay", self.weight_decay),
            ("base_lr", self.base_lr),
            ("lr_power", self.lr_power),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::InvalidValue {
                    key: key.to_owned(),
                    value: format!("{v}"),
                    reason: "must be finite and non-negative".to_owned(),
                });
            }
        }
        Ok(())
    }
}

/// Model plus training configuration: everything one run needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Defaults for the Synapse multi-organ CT benchmark.
pub fn default_synapse_config() -> (ModelConfig, TrainConfig) {
    let mut model = ModelConfig::default();
    model.resolve();
    (model, TrainConfig::default())
}

/// ACDC cardiac MRI: RV, Myo, LV plus background.
pub fn default_acdc_config() -> (ModelConfig, TrainConfig) {
    let mut model = ModelConfig {
        num_classes: 4,
        ..ModelConfig::default()
    };
    model.resolve();
    let train = TrainConfig {
        dataset: DatasetKind::Acdc,
        data_root: "data/acdc".to_owned(),
        ..TrainConfig::default()
    };
    (model, train)
}

/// Every recognized key, in serialization order.
pub const KEYS: &[&str] = &[
    "patch_size",
    "embed_dim",
    "num_blocks",
    "num_stages",
    "backbone_heads",
    "mlp_ratio",
    "num_classes",
    "spa_scales",
    "spa_channels",
    "spa_channel_attention",
    "mhca_heads",
    "bottleneck_channels",
    "bottleneck_route",
    "decoder_channels",
    "input_size",
    "backbone_checkpoint",
    "batch_size",
    "weight_decay",
    "base_lr",
    "lr_power",
    "max_epochs",
    "max_iterations",
    "seed",
    "aug_flip",
    "aug_rotation",
    "aug_intensity",
    "w_dice",
    "w_ce",
    "dataset",
    "data_root",
    "output_dir",
];

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_owned(),
        value: value.to_owned(),
        reason: reason.into(),
    }
}

fn unquote(value: &str) -> &str {
    let v = value.trim();
    if v.len() >= 2
        && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\'')))
    {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    unquote(value)
        .parse::<T>()
        .map_err(|e| invalid(key, value, e.to_string()))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N], ConfigError> {
    let inner = value.trim();
    let inner = inner
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(inner);
    let items: Vec<&str> = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.len() != N {
        return Err(invalid(key, value, format!("expected {N} integers")));
    }
    let mut out = [0usize; N];
    for (slot, item) in out.iter_mut().zip(items) {
        *slot = item
            .parse()
            .map_err(|e: core::num::ParseIntError| invalid(key, value, e.to_string()))?;
    }
    Ok(out)
}

fn fmt_list(xs: &[usize]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_str(s: &str) -> String {
    format!("\"{s}\"")
}

fn fmt_float(x: f64) -> String {
    // `{:?}` keeps a decimal point or exponent so the value reads back as a float.
    format!("{x:?}")
}

impl RunConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        RunConfig { model, train }
    }

    /// Assigns one key from its textual value.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "patch_size" => m.patch_size = parse_scalar(key, value)?,
            "embed_dim" => m.embed_dim = parse_scalar(key, value)?,
            "num_blocks" => m.num_blocks = parse_scalar(key, value)?,
            "num_stages" => m.num_stages = parse_scalar(key, value)?,
            "backbone_heads" => m.backbone_heads = parse_scalar(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse_scalar(key, value)?,
            "num_classes" => m.num_classes = parse_scalar(key, value)?,
            "spa_scales" => m.spa_scales = parse_list(key, value)?,
            "spa_channels" => m.spa_channels = parse_list(key, value)?,
            "spa_channel_attention" => m.spa_channel_attention = parse_scalar(key, value)?,
            "mhca_heads" => m.mhca_heads = parse_scalar(key, value)?,
            "bottleneck_channels" => m.bottleneck_channels = Some(parse_scalar(key, value)?),
            "bottleneck_route" => {
                m.bottleneck_route = unquote(value).parse().map_err(|e| invalid(key, value, e))?
            }
            "decoder_channels" => m.decoder_channels = parse_list(key, value)?,
            "input_size" => m.input_size = parse_list(key, value)?,
            "backbone_checkpoint" => m.backbone_checkpoint = unquote(value).to_owned(),
            "batch_size" => t.batch_size = parse_scalar(key, value)?,
            "weight_decay" => t.weight_decay = parse_scalar(key, value)?,
            "base_lr" => t.base_lr = parse_scalar(key, value)?,
            "lr_power" => t.lr_power = parse_scalar(key, value)?,
            "max_epochs" => t.max_epochs = parse_scalar(key, value)?,
            "max_iterations" => {
                let n: usize = parse_scalar(key, value)?;
                t.max_iterations = (n > 0).then_some(n);
            }
            "seed" => t.seed = parse_scalar(key, value)?,
            "aug_flip" => t.aug_flip = parse_scalar(key, value)?,
            "aug_rotation" => t.aug_rotation = parse_scalar(key, value)?,
            "aug_intensity" => t.aug_intensity = parse_scalar(key, value)?,
            "w_dice" => t.w_dice = parse_scalar(key, value)?,
            "w_ce" => t.w_ce = parse_scalar(key, value)?,
            "dataset" => t.dataset = unquote(value).parse().map_err(|e| invalid(key, value, e))?,
            "data_root" => t.data_root = unquote(value).to_owned(),
            "output_dir" => t.output_dir = unquote(value).to_owned(),
            other => return Err(ConfigError::UnknownKey(other.to_owned())),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.to_owned(),
        })?;
        self.set_key(key.trim(), value.trim())
    }

    /// Every key with its value in file syntax, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let mut out = Vec::with_capacity(KEYS.len());
        for &key in KEYS {
            let value = match key {
                "patch_size" => m.patch_size.to_string(),
                "embed_dim" => m.embed_dim.to_string(),
                "num_blocks" => m.num_blocks.to_string(),
                "num_stages" => m.num_stages.to_string(),
                "backbone_heads" => m.backbone_heads.to_string(),
                "mlp_ratio" => m.mlp_ratio.to_string(),
                "num_classes" => m.num_classes.to_string(),
                "spa_scales" => fmt_list(&m.spa_scales),
                "spa_channels" => fmt_list(&m.spa_channels),
                "spa_channel_attention" => m.spa_channel_attention.to_string(),
                "mhca_heads" => m.mhca_heads.to_string(),
                "bottleneck_channels" => match m.bottleneck_channels {
                    Some(c) => c.to_string(),
                    None => continue,
                },
                "bottleneck_route" => fmt_str(m.bottleneck_route.as_str()),
                "decoder_channels" => fmt_list(&m.decoder_channels),
                "input_size" => fmt_list(&m.input_size),
                "backbone_checkpoint" => fmt_str(&m.backbone_checkpoint),
                "batch_size" => t.batch_size.to_string(),
                "weight_decay" => fmt_float(t.weight_decay),
                "base_lr" => fmt_float(t.base_lr),
                "lr_power" => fmt_float(t.lr_power),
                "max_epochs" => t.max_epochs.to_string(),
                "max_iterations" => t.max_iterations.unwrap_or(0).to_string(),
                "seed" => t.seed.to_string(),
                "aug_flip" => t.aug_flip.to_string(),
                "aug_rotation" => t.aug_rotation.to_string(),
                "aug_intensity" => t.aug_intensity.to_string(),
                "w_dice" => fmt_float(t.w_dice),
                "w_ce" => fmt_float(t.w_ce),
                "dataset" => fmt_str(t.dataset.as_str()),
                "data_root" => fmt_str(&t.data_root),
                "output_dir" => fmt_str(&t.output_dir),
                _ => unreachable!("key list and serializer out of sync: {key}"),
            };
            out.push((key, value));
        }
        out
    }

    /// Serializes to the flat `key = value` form accepted by [`parse_config`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn resolve(&mut self) {
        self.model.resolve();
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Parses a config text over the given base, resolves defaults and validates.
pub fn parse_config_over(text: &str, base: RunConfig) -> Result<RunConfig, ConfigError> {
    let mut cfg = base;
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']') && !line.contains('=')) {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_owned(),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_owned(),
            });
        }
        cfg.set_key(key, value.trim())?;
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a config text over the Synapse defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let (model, train) = default_synapse_config();
    parse_config_over(text, RunConfig::new(model, train))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let (m, t) = default_synapse_config();
        m.validate().unwrap();
        t.validate().unwrap();
        assert_eq!(m.num_tokens(), 256);
        assert_eq!(m.token_grid(), (16, 16));
        assert_eq!(m.num_classes, 9);
        assert_eq!(m.num_stages, 3);
        assert_eq!(m.resolved_bottleneck_channels(), 9);
        assert_eq!(t.batch_size, 12);
        assert_eq!(t.weight_decay, 1e-4);
        assert_eq!((t.w_dice, t.w_ce), (1.0, 1.0));
        assert_eq!(m.spa_token_count(), 3136 + 784 + 196);
    }

    #[test]
    fn acdc_has_four_classes() {
        let (m, t) = default_acdc_config();
        assert_eq!(m.num_classes, 4);
        assert_eq!(t.dataset, DatasetKind::Acdc);
    }

    #[test]
    fn stage_mismatch_names_both_operands() {
        let err = parse_config("num_blocks = 12\nnum_stages = 5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("L mod N != 0"), "{msg}");
        assert!(msg.contains("12") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn input_308_gives_484_tokens() {
        let cfg = parse_config("input_size = [308, 308]\nspa_scales = [4, 7, 14]\n").unwrap();
        assert_eq!(cfg.model.num_tokens(), 484);
        assert_eq!(cfg.model.token_grid(), (22, 22));
    }

    #[test]
    fn input_308_rejects_octave_scales() {
        let err = parse_config("input_size = [308, 308]\n").unwrap_err();
        assert!(err.to_string().contains("H mod r != 0"), "{err}");
        assert_eq!(compatible_scales(308, 308), Some([4, 7, 14]));
        assert_eq!(compatible_scales(224, 224), Some([4, 8, 16]));
    }

    #[test]
    fn patch_must_tile() {
        let err = parse_config("input_size = [230, 224]\n").unwrap_err();
        assert!(err.to_string().contains("H mod P"), "{err}");
    }

    #[test]
    fn heads_must_divide_width() {
        let err = parse_config("mhca_heads = 7\n").unwrap_err();
        assert!(err.to_string().contains("mhca_heads"), "{err}");
    }

    #[test]
    fn loss_weights_checked() {
        let err = parse_config("w_dice = 0.0\nw_ce = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");
        assert!(parse_config("w_dice = -1.0\n").is_err());
        assert!(parse_config("batch_size = 0\n").is_err());
    }

    #[test]
    fn unknown_key_and_syntax_errors() {
        assert_eq!(
            parse_config("bogus = 1\n").unwrap_err(),
            ConfigError::UnknownKey("bogus".into())
        );
        assert!(matches!(
            parse_config("just words\n").unwrap_err(),
            ConfigError::Syntax { line: 1, .. }
        ));
        assert!(parse_config("spa_scales = [4, 8]\n").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = parse_config(
            "# run\nbackbone_checkpoint = \"ckpt/dino#v2.safetensors\" # trailing\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.model.backbone_checkpoint, "ckpt/dino#v2.safetensors");
        assert_eq!(cfg.train.seed, 7);
        cfg.apply_override("spa_scales=4,7,14").unwrap();
        assert_eq!(cfg.model.spa_scales, [4, 7, 14]);
        cfg.apply_override("bottleneck_route=spa_deepest").unwrap();
        assert_eq!(cfg.model.bottleneck_route, BottleneckRoute::SpaDeepest);
        assert!(cfg.apply_override("no_equals").is_err());
    }

    #[test]
    fn text_round_trip() {
        let (m, t) = default_acdc_config();
        let cfg = RunConfig::new(m, t);
        let back = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partition_is_contiguous() {
        let p = StagePartition::even(12, 3).unwrap();
        assert_eq!(p.stages, [0..4, 4..8, 8..12]);
        assert_eq!(StagePartition::even(12, 2).unwrap().blocks_per_stage(), 6);
        assert_eq!(StagePartition::even(12, 6).unwrap().blocks_per_stage(), 2);
        assert!(StagePartition::even(12, 5).is_err());
    }
}
