//! Architecture configuration: validation, closed-form parameter accounting,
//! the fusion budget solver and sweep grids.
//!
//! A [`ModelConfig`] is the single source of truth for what gets built. The
//! closed-form counts here must agree *exactly* with enumeration over a live
//! model (see `model::VlModel::param_report`); that equality is tested, not
//! assumed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EssenError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "one-tower")]
    OneTower,
    #[serde(rename = "two-tower")]
    TwoTower,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::OneTower => write!(f, "one-tower"),
            Arch::TwoTower => write!(f, "two-tower"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextTowerConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionPatchConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionCnnConfig {
    pub image_size: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub out_proj: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisionConfig {
    Patch(VisionPatchConfig),
    Cnn(VisionCnnConfig),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub hidden: usize,
    pub ffn: usize,
    pub layers: usize,
    pub heads: usize,
    /// The ffn width is conventionally locked to 4x hidden; set this to
    /// deviate on purpose.
    #[serde(default)]
    pub allow_custom_ffn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub text: TextTowerConfig,
    pub vision: VisionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountMethod {
    ClosedForm,
    Enumeration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub per_module: BTreeMap<String, u64>,
    pub total: u64,
    pub method: CountMethod,
}

impl ParameterReport {
    pub fn from_modules(per_module: BTreeMap<String, u64>, method: CountMethod) -> Self {
        let total = per_module.values().sum();
        Self {
            per_module,
            total,
            method,
        }
    }

    /// Aligned plain-text table, one row per module plus a total row.
    pub fn render_table(&self) -> String {
        let width = self
            .per_module
            .keys()
            .map(|k| k.len())
            .chain(["module".len(), "total".len()])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>14}", "module", "params");
        let _ = writeln!(out, "{}  {}", "-".repeat(width), "-".repeat(14));
        for (name, count) in &self.per_module {
            let _ = writeln!(out, "{:<width$}  {:>14}", name, count);
        }
        let _ = writeln!(out, "{}  {}", "-".repeat(width), "-".repeat(14));
        let _ = writeln!(out, "{:<width$}  {:>14}", "total", self.total);
        out
    }
}

impl VisionConfig {
    /// Width of the token vectors this tower hands to the bridge projection.
    pub fn out_width(&self) -> usize {
        match self {
            VisionConfig::Patch(p) => p.hidden,
            VisionConfig::Cnn(c) => c.out_proj,
        }
    }

    /// Token count produced by the standalone tower (patch path includes the
    /// leading image-CLS token).
    pub fn tower_token_count(&self) -> usize {
        match self {
            VisionConfig::Patch(p) => {
                let n = p.image_size / p.patch_size;
                n * n + 1
            }
            VisionConfig::Cnn(c) => {
                let s = c.image_size >> c.stage_channels.len();
                s * s
            }
        }
    }

    /// Token count when the vision features are embedded straight into a
    /// one-tower joint sequence (no image-CLS on the patch path).
    pub fn joint_token_count(&self) -> usize {
        match self {
            VisionConfig::Patch(p) => {
                let n = p.image_size / p.patch_size;
                n * n
            }
            VisionConfig::Cnn(c) => {
                let s = c.image_size >> c.stage_channels.len();
                s * s
            }
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            VisionConfig::Patch(p) => p.image_size,
            VisionConfig::Cnn(c) => c.image_size,
        }
    }
}

impl ModelConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Joint sequence length for a one-tower model:
    /// padded text + [SEP] boundary + visual tokens.
    pub fn joint_len(&self) -> usize {
        self.text.max_len + 1 + self.vision.joint_token_count()
    }

    pub fn validated(self) -> Result<Self> {
        let violations = validate_config(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(EssenError::InvalidConfig(violations))
        }
    }
}

/// Collects every violated invariant; an empty list means the config is valid.
pub fn validate_config(cfg: &ModelConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    let t = &cfg.text;
    for (field, value) in [
        ("text.vocab_size", t.vocab_size),
        ("text.hidden", t.hidden),
        ("text.layers", t.layers),
        ("text.heads", t.heads),
        ("text.ffn", t.ffn),
    ] {
        if value == 0 {
            v.push(Violation::new(field, "must be a positive count"));
        }
    }
    if t.heads > 0 && t.hidden % t.heads != 0 {
        v.push(Violation::new(
            "text.hidden",
            format!("hidden {} not divisible by heads {}", t.hidden, t.heads),
        ));
    }
    if t.ffn < t.hidden {
        v.push(Violation::new(
            "text.ffn",
            format!("ffn {} must be >= hidden {}", t.ffn, t.hidden),
        ));
    }
    if t.max_len < 2 {
        v.push(Violation::new(
            "text.max_len",
            "must be at least 2 ([CLS] plus one token)",
        ));
    }

    match &cfg.vision {
        VisionConfig::Patch(p) => {
            for (field, value) in [
                ("vision.patch.image_size", p.image_size),
                ("vision.patch.patch_size", p.patch_size),
                ("vision.patch.hidden", p.hidden),
                ("vision.patch.layers", p.layers),
                ("vision.patch.heads", p.heads),
                ("vision.patch.ffn", p.ffn),
            ] {
                if value == 0 {
                    v.push(Violation::new(field, "must be a positive count"));
                }
            }
            if p.patch_size > 0 && p.image_size % p.patch_size != 0 {
                v.push(Violation::new(
                    "vision.patch.image_size",
                    format!(
                        "image_size {} not divisible by patch_size {}",
                        p.image_size, p.patch_size
                    ),
                ));
            }
            if p.heads > 0 && p.hidden % p.heads != 0 {
                v.push(Violation::new(
                    "vision.patch.hidden",
                    format!("hidden {} not divisible by heads {}", p.hidden, p.heads),
                ));
            }
        }
        VisionConfig::Cnn(c) => {
            if c.image_size == 0 {
                v.push(Violation::new("vision.cnn.image_size", "must be positive"));
            }
            if c.stage_channels.is_empty() {
                v.push(Violation::new(
                    "vision.cnn.stage_channels",
                    "needs at least one stage",
                ));
            }
            if c.stage_channels.iter().any(|&ch| ch == 0) {
                v.push(Violation::new(
                    "vision.cnn.stage_channels",
                    "stage channels must be positive",
                ));
            }
            if c.blocks_per_stage == 0 {
                v.push(Violation::new(
                    "vision.cnn.blocks_per_stage",
                    "must be positive",
                ));
            }
            if c.out_proj == 0 {
                v.push(Violation::new("vision.cnn.out_proj", "must be positive"));
            }
            let div = 1usize << c.stage_channels.len();
            if !c.stage_channels.is_empty() && c.image_size % div != 0 {
                v.push(Violation::new(
                    "vision.cnn.image_size",
                    format!("image_size {} not divisible by 2^stages = {}", c.image_size, div),
                ));
            }
        }
    }

    match (cfg.arch, &cfg.fusion) {
        (Arch::OneTower, Some(_)) => v.push(Violation::new(
            "fusion",
            "one-tower configs must not carry a fusion block",
        )),
        (Arch::TwoTower, None) => v.push(Violation::new(
            "fusion",
            "two-tower configs require a fusion block",
        )),
        (Arch::TwoTower, Some(f)) => {
            if f.hidden == 0 {
                v.push(Violation::new("fusion.hidden", "must be positive"));
            }
            if f.heads == 0 {
                v.push(Violation::new("fusion.heads", "must be positive"));
            }
            if f.heads > 0 && f.hidden % f.heads != 0 {
                v.push(Violation::new(
                    "fusion.hidden",
                    format!("hidden {} not divisible by heads {}", f.hidden, f.heads),
                ));
            }
            if !f.allow_custom_ffn && f.ffn != 4 * f.hidden {
                v.push(Violation::new(
                    "fusion.ffn",
                    format!(
                        "ffn {} must be 4 x hidden = {} (set allow_custom_ffn to override)",
                        f.ffn,
                        4 * f.hidden
                    ),
                ));
            }
        }
        (Arch::OneTower, None) => {}
    }

    v
}

/// Parameters of one post-norm encoder block at width `d` / ffn width `f`:
/// four attention projections with biases, the two FFN matrices with biases,
/// and two layer norms.
pub fn block_params(d: u64, f: u64) -> u64 {
    4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d)
}

/// One dual-stream fusion layer (text side + vision side).
pub fn dual_fusion_layer_params(d: u64, f: u64) -> u64 {
    2 * block_params(d, f)
}

fn proj_params(from: u64, to: u64) -> u64 {
    if from == to {
        0 // identity bridge, parameter-free
    } else {
        from * to + to
    }
}

fn pooler_params(d: u64) -> u64 {
    d * d + d
}

pub fn text_tower_params(t: &TextTowerConfig) -> u64 {
    let d = t.hidden as u64;
    (t.vocab_size as u64) * d
        + (t.max_len as u64) * d
        + (t.layers as u64) * block_params(d, t.ffn as u64)
}

fn patch_tower_params(p: &VisionPatchConfig) -> u64 {
    let d = p.hidden as u64;
    let n = ((p.image_size / p.patch_size) * (p.image_size / p.patch_size)) as u64;
    let patch_dim = 3 * (p.patch_size * p.patch_size) as u64;
    patch_dim * d + d       // patch projection
        + d                 // image-CLS token
        + (n + 1) * d       // position table
        + (p.layers as u64) * block_params(d, p.ffn as u64)
}

fn cnn_stack_params(c: &VisionCnnConfig) -> u64 {
    let c0 = c.stage_channels[0] as u64;
    let mut total = 27 * c0 + c0; // 3x3 stem from RGB
    let mut in_ch = c0;
    for &out in &c.stage_channels {
        let out = out as u64;
        for block in 0..c.blocks_per_stage {
            let cin = if block == 0 { in_ch } else { out };
            total += cin * 9 + cin; // depthwise
            total += cin * out + out; // pointwise
        }
        in_ch = out;
    }
    total
}

fn cnn_tower_params(c: &VisionCnnConfig) -> u64 {
    let last = *c.stage_channels.last().unwrap() as u64;
    cnn_stack_params(c) + last * c.out_proj as u64 + c.out_proj as u64
}

pub fn vision_tower_params(v: &VisionConfig) -> u64 {
    match v {
        VisionConfig::Patch(p) => patch_tower_params(p),
        VisionConfig::Cnn(c) => cnn_tower_params(c),
    }
}

/// Closed-form count of every trainable scalar in the encoder model
/// described by `cfg` (classification heads are attachments and excluded).
pub fn param_count_closed_form(cfg: &ModelConfig) -> Result<ParameterReport> {
    let violations = validate_config(cfg);
    if !violations.is_empty() {
        return Err(EssenError::InvalidConfig(violations));
    }
    let mut per_module = BTreeMap::new();
    match cfg.arch {
        Arch::TwoTower => {
            let fusion = cfg.fusion.as_ref().unwrap();
            let d_f = fusion.hidden as u64;
            per_module.insert("text_tower".to_string(), text_tower_params(&cfg.text));
            per_module.insert("vision_tower".to_string(), vision_tower_params(&cfg.vision));
            per_module.insert(
                "text_proj".to_string(),
                proj_params(cfg.text.hidden as u64, d_f),
            );
            per_module.insert(
                "vision_proj".to_string(),
                proj_params(cfg.vision.out_width() as u64, d_f),
            );
            per_module.insert(
                "fusion".to_string(),
                (fusion.layers as u64) * dual_fusion_layer_params(d_f, fusion.ffn as u64),
            );
            per_module.insert("pooler".to_string(), pooler_params(d_f));
        }
        Arch::OneTower => {
            let d = cfg.text.hidden as u64;
            let joint_pos = cfg.joint_len() as u64;
            per_module.insert(
                "joint_embeddings".to_string(),
                (cfg.text.vocab_size as u64) * d + joint_pos * d + 2 * d,
            );
            let frontend = match &cfg.vision {
                VisionConfig::Patch(p) => {
                    3 * (p.patch_size * p.patch_size) as u64 * d + d
                }
                VisionConfig::Cnn(c) => {
                    cnn_tower_params(c) + proj_params(c.out_proj as u64, d)
                }
            };
            per_module.insert("vision_frontend".to_string(), frontend);
            per_module.insert(
                "joint_encoder".to_string(),
                (cfg.text.layers as u64) * block_params(d, cfg.text.ffn as u64),
            );
            per_module.insert("pooler".to_string(), pooler_params(d));
        }
    }
    Ok(ParameterReport::from_modules(per_module, CountMethod::ClosedForm))
}

/// Full two-tower total for a candidate fusion shape, given fixed backbones.
fn two_tower_total(
    text: &TextTowerConfig,
    vision: &VisionConfig,
    hidden: usize,
    layers: usize,
) -> u64 {
    let d_f = hidden as u64;
    text_tower_params(text)
        + vision_tower_params(vision)
        + proj_params(text.hidden as u64, d_f)
        + proj_params(vision.out_width() as u64, d_f)
        + (layers as u64) * dual_fusion_layer_params(d_f, 4 * d_f)
        + pooler_params(d_f)
}

const SOLVER_MAX_LAYERS: usize = 32;
const SOLVER_OVERSHOOT: f64 = 0.02;
const SOLVER_FEASIBLE: f64 = 0.10;

/// Picks the (hidden, layers) fusion shape from `hidden_candidates` x 1..=32
/// whose full two-tower total lands closest to `target_total` without
/// exceeding it by more than 2%. Ties break toward fewer parameters, then
/// fewer layers. Candidates not divisible by `heads` are skipped.
pub fn solve_fusion_dims(
    target_total: u64,
    text: &TextTowerConfig,
    vision: &VisionConfig,
    hidden_candidates: &[usize],
    heads: usize,
) -> Result<FusionConfig> {
    assert!(!hidden_candidates.is_empty(), "hidden_candidates empty");
    let limit = (target_total as f64) * (1.0 + SOLVER_OVERSHOOT);
    let mut best: Option<(u64, u64, usize, usize)> = None; // (distance, total, layers, hidden)
    for &hidden in hidden_candidates {
        if hidden == 0 || hidden % heads != 0 {
            continue;
        }
        for layers in 1..=SOLVER_MAX_LAYERS {
            let total = two_tower_total(text, vision, hidden, layers);
            if (total as f64) > limit {
                break; // totals grow with layers
            }
            let distance = total.abs_diff(target_total);
            let key = (distance, total, layers, hidden);
            if best.map_or(true, |b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                best = Some(key);
            }
        }
    }
    match best {
        Some((distance, _, layers, hidden))
            if (distance as f64) <= (target_total as f64) * SOLVER_FEASIBLE =>
        {
            Ok(FusionConfig {
                hidden,
                ffn: 4 * hidden,
                layers,
                heads,
                allow_custom_ffn: false,
            })
        }
        Some((distance, ..)) => Err(EssenError::NoSolution {
            target: target_total,
            best_distance: distance,
        }),
        None => Err(EssenError::NoSolution {
            target: target_total,
            best_distance: u64::MAX,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    FusionLayers,
    FusionHidden,
    TextBackbone,
    VisionBackbone,
    Arch,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fusion_layers" => Ok(Self::FusionLayers),
            "fusion_hidden" => Ok(Self::FusionHidden),
            "text_backbone" => Ok(Self::TextBackbone),
            "vision_backbone" => Ok(Self::VisionBackbone),
            "arch" => Ok(Self::Arch),
            other => Err(format!("unknown sweep axis `{other}`")),
        }
    }
}

/// Named backbone shapes the sweep axes can substitute in. Text shapes keep
/// the base vocab and max_len; vision shapes keep the base image size.
pub fn text_backbone_shape(name: &str, base: &TextTowerConfig) -> Option<TextTowerConfig> {
    let (hidden, layers, heads, ffn) = match name {
        "nano" => (64, 2, 4, 256),
        "tiny" => (128, 4, 4, 512),
        "small" => (256, 6, 8, 1024),
        "base" => (448, 12, 8, 1792),
        _ => return None,
    };
    Some(TextTowerConfig {
        vocab_size: base.vocab_size,
        hidden,
        layers,
        heads,
        ffn,
        max_len: base.max_len,
    })
}

pub fn vision_backbone_shape(name: &str, base: &VisionConfig) -> Option<VisionConfig> {
    let image_size = base.image_size();
    match name {
        "patch-nano" => Some(VisionConfig::Patch(VisionPatchConfig {
            image_size,
            patch_size: 8,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
        })),
        "patch-tiny" => Some(VisionConfig::Patch(VisionPatchConfig {
            image_size,
            patch_size: 8,
            hidden: 128,
            layers: 4,
            heads: 4,
            ffn: 512,
        })),
        "patch-small" => Some(VisionConfig::Patch(VisionPatchConfig {
            image_size,
            patch_size: 8,
            hidden: 192,
            layers: 6,
            heads: 6,
            ffn: 768,
        })),
        "cnn-nano" => Some(VisionConfig::Cnn(VisionCnnConfig {
            image_size,
            stage_channels: vec![12, 24, 48],
            blocks_per_stage: 1,
            out_proj: 64,
        })),
        "cnn-tiny" => Some(VisionConfig::Cnn(VisionCnnConfig {
            image_size,
            stage_channels: vec![24, 48, 96],
            blocks_per_stage: 2,
            out_proj: 128,
        })),
        "cnn-small" => Some(VisionConfig::Cnn(VisionCnnConfig {
            image_size,
            stage_channels: vec![32, 64, 128, 192],
            blocks_per_stage: 2,
            out_proj: 256,
        })),
        _ => None,
    }
}

/// One config per value; every other field is copied from `base`. The
/// fusion_hidden axis rescales ffn to keep the 4x convention.
pub fn sweep_grid(base: &ModelConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<ModelConfig>> {
    let mut out = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::FusionLayers => {
                let layers = parse_count(value, "fusion_layers")?;
                let fusion = cfg.fusion.as_mut().ok_or_else(|| {
                    EssenError::InvalidConfig(vec![Violation::new(
                        "fusion",
                        "fusion_layers sweep requires a two-tower base",
                    )])
                })?;
                fusion.layers = layers;
            }
            SweepAxis::FusionHidden => {
                let hidden = parse_count(value, "fusion_hidden")?;
                let fusion = cfg.fusion.as_mut().ok_or_else(|| {
                    EssenError::InvalidConfig(vec![Violation::new(
                        "fusion",
                        "fusion_hidden sweep requires a two-tower base",
                    )])
                })?;
                fusion.hidden = hidden;
                fusion.ffn = 4 * hidden;
            }
            SweepAxis::TextBackbone => {
                cfg.text = text_backbone_shape(value, &base.text).ok_or_else(|| {
                    EssenError::InvalidConfig(vec![Violation::new(
                        "text",
                        format!("unknown text backbone `{value}`"),
                    )])
                })?;
            }
            SweepAxis::VisionBackbone => {
                cfg.vision = vision_backbone_shape(value, &base.vision).ok_or_else(|| {
                    EssenError::InvalidConfig(vec![Violation::new(
                        "vision",
                        format!("unknown vision backbone `{value}`"),
                    )])
                })?;
            }
            SweepAxis::Arch => match value.as_str() {
                "one-tower" => {
                    cfg.arch = Arch::OneTower;
                    cfg.fusion = None;
                }
                "two-tower" => {
                    cfg.arch = Arch::TwoTower;
                    if cfg.fusion.is_none() {
                        cfg.fusion = base.fusion.clone().or(Some(FusionConfig {
                            hidden: 256,
                            ffn: 1024,
                            layers: 6,
                            heads: 8,
                            allow_custom_ffn: false,
                        }));
                    }
                }
                other => {
                    return Err(EssenError::InvalidConfig(vec![Violation::new(
                        "arch",
                        format!("unknown arch `{other}`"),
                    )]));
                }
            },
        }
        let violations = validate_config(&cfg);
        if !violations.is_empty() {
            return Err(EssenError::InvalidConfig(violations));
        }
        out.push(cfg);
    }
    Ok(out)
}

fn parse_count(s: &str, field: &str) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|_| {
        EssenError::InvalidConfig(vec![Violation::new(
            field,
            format!("`{s}` is not a count"),
        )])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tower_fixture() -> ModelConfig {
        ModelConfig {
            arch: Arch::TwoTower,
            text: TextTowerConfig {
                vocab_size: 400,
                hidden: 48,
                layers: 2,
                heads: 4,
                ffn: 192,
                max_len: 16,
            },
            vision: VisionConfig::Cnn(VisionCnnConfig {
                image_size: 24,
                stage_channels: vec![12, 24, 48],
                blocks_per_stage: 1,
                out_proj: 64,
            }),
            fusion: Some(FusionConfig {
                hidden: 64,
                ffn: 256,
                layers: 2,
                heads: 4,
                allow_custom_ffn: false,
            }),
            seed: 7,
        }
    }

    #[test]
    fn valid_config_has_no_violations() {
        assert!(validate_config(&two_tower_fixture()).is_empty());
    }

    #[test]
    fn patch_divisibility_violation_names_field() {
        let mut cfg = two_tower_fixture();
        cfg.vision = VisionConfig::Patch(VisionPatchConfig {
            image_size: 225,
            patch_size: 16,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
        });
        let v = validate_config(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "vision.patch.image_size");
    }

    #[test]
    fn one_tower_with_fusion_rejected() {
        let mut cfg = two_tower_fixture();
        cfg.arch = Arch::OneTower;
        let v = validate_config(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "fusion");
    }

    #[test]
    fn custom_ffn_requires_flag() {
        let mut cfg = two_tower_fixture();
        cfg.fusion.as_mut().unwrap().ffn = 300;
        assert_eq!(validate_config(&cfg).len(), 1);
        cfg.fusion.as_mut().unwrap().allow_custom_ffn = true;
        assert!(validate_config(&cfg).is_empty());
    }

    #[test]
    fn dual_layer_at_256_is_frozen_value() {
        // 2 x (4(d^2+d) + (d f + f) + (f d + d) + 2*2d) at d=256, f=1024
        assert_eq!(dual_fusion_layer_params(256, 1024), 1_579_520);
    }

    #[test]
    fn essen_shape_fusion_count() {
        let d = 320u64;
        let f = 1280u64;
        let expected = 6 * 2 * (4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d);
        let cfg = ModelConfig {
            fusion: Some(FusionConfig {
                hidden: 320,
                ffn: 1280,
                layers: 6,
                heads: 8,
                allow_custom_ffn: false,
            }),
            ..two_tower_fixture()
        };
        let report = param_count_closed_form(&cfg).unwrap();
        assert_eq!(report.per_module["fusion"], expected);
    }

    #[test]
    fn zero_fusion_layers_contribute_nothing() {
        let mut cfg = two_tower_fixture();
        cfg.fusion.as_mut().unwrap().layers = 0;
        let report = param_count_closed_form(&cfg).unwrap();
        assert_eq!(report.per_module["fusion"], 0);
    }

    #[test]
    fn fusion_linear_in_layers() {
        let mut cfg = two_tower_fixture();
        let one = param_count_closed_form(&cfg).unwrap().per_module["fusion"] / 2;
        cfg.fusion.as_mut().unwrap().layers = 14;
        let fourteen = param_count_closed_form(&cfg).unwrap().per_module["fusion"];
        assert_eq!(fourteen, 14 * one);
    }

    #[test]
    fn report_total_is_module_sum() {
        let report = param_count_closed_form(&two_tower_fixture()).unwrap();
        assert_eq!(report.total, report.per_module.values().sum::<u64>());
    }

    #[test]
    fn solver_recovers_exact_target() {
        let cfg = two_tower_fixture();
        let target = param_count_closed_form(&cfg).unwrap().total;
        let solved = solve_fusion_dims(
            target,
            &cfg.text,
            &cfg.vision,
            &[32, 48, 64, 96],
            cfg.fusion.as_ref().unwrap().heads,
        )
        .unwrap();
        assert_eq!(solved.hidden, 64);
        assert_eq!(solved.layers, 2);
        assert_eq!(solved.ffn, 256);
    }

    #[test]
    fn solver_rejects_infeasible_target() {
        let cfg = two_tower_fixture();
        let backbone = text_tower_params(&cfg.text) + vision_tower_params(&cfg.vision);
        // target below backbone total can never be within 10%
        let err = solve_fusion_dims(backbone / 4, &cfg.text, &cfg.vision, &[64], 4);
        assert!(matches!(err, Err(EssenError::NoSolution { .. })));
    }

    #[test]
    fn sweep_layers_axis() {
        let base = two_tower_fixture();
        let values: Vec<String> = ["4", "6", "8", "10"].iter().map(|s| s.to_string()).collect();
        let grid = sweep_grid(&base, SweepAxis::FusionLayers, &values).unwrap();
        assert_eq!(grid.len(), 4);
        for (cfg, layers) in grid.iter().zip([4, 6, 8, 10]) {
            assert_eq!(cfg.fusion.as_ref().unwrap().layers, layers);
            assert_eq!(cfg.text, base.text);
            assert_eq!(cfg.vision, base.vision);
        }
    }

    #[test]
    fn sweep_hidden_rescales_ffn() {
        let base = two_tower_fixture();
        let values: Vec<String> = ["192", "256", "320", "384"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let grid = sweep_grid(&base, SweepAxis::FusionHidden, &values).unwrap();
        let ffns: Vec<usize> = grid
            .iter()
            .map(|c| c.fusion.as_ref().unwrap().ffn)
            .collect();
        assert_eq!(ffns, vec![768, 1024, 1280, 1536]);
    }

    #[test]
    fn sweep_empty_values_is_empty() {
        let base = two_tower_fixture();
        assert!(sweep_grid(&base, SweepAxis::FusionLayers, &[]).unwrap().is_empty());
    }

    #[test]
    fn config_json_roundtrip_and_unknown_key_rejection() {
        let cfg = two_tower_fixture();
        let json = cfg.to_json();
        let back = ModelConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg);

        let bad = json.replacen("\"seed\"", "\"sneed\"", 1);
        assert!(ModelConfig::from_json(&bad).is_err());
    }
}
