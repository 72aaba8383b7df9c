//! Named model configurations: the two headline analog shapes, the final
//! compact configuration, and tiny variants for fast tests and gradient
//! checking. "Analog" means matched proportions at desk scale, not matched
//! absolute parameter counts.

use crate::config::{
    param_count_closed_form, Arch, FusionConfig, ModelConfig, TextTowerConfig, VisionCnnConfig,
    VisionConfig, VisionPatchConfig,
};

pub const PRESET_NAMES: [&str; 8] = [
    "essen",
    "two-tower-33m-analog",
    "one-tower-33m-analog",
    "tiny-two-tower",
    "tiny-one-tower",
    "tiny-two-tower-patch",
    "grad-tiny-two-tower",
    "grad-tiny-one-tower",
];

pub fn preset(name: &str) -> Option<ModelConfig> {
    let cfg = match name {
        // final configuration: CNN vision tower feeding a 6-layer, 320-wide
        // fusion encoder; out_proj equals the fusion width so the bridge is
        // the identity
        "essen" => ModelConfig {
            arch: Arch::TwoTower,
            text: TextTowerConfig {
                vocab_size: 512,
                hidden: 256,
                layers: 12,
                heads: 8,
                ffn: 1024,
                max_len: 24,
            },
            vision: VisionConfig::Cnn(VisionCnnConfig {
                image_size: 64,
                stage_channels: vec![24, 48, 96, 160],
                blocks_per_stage: 2,
                out_proj: 320,
            }),
            fusion: Some(FusionConfig {
                hidden: 320,
                ffn: 1280,
                layers: 6,
                heads: 8,
                allow_custom_ffn: false,
            }),
            seed: 0,
        },
        // two-tower analog of the first size-matched pair: transformer text
        // tower + patch vision tower, fusion 7 layers x 256 hidden
        "two-tower-33m-analog" => ModelConfig {
            arch: Arch::TwoTower,
            text: TextTowerConfig {
                vocab_size: 512,
                hidden: 128,
                layers: 4,
                heads: 4,
                ffn: 512,
                max_len: 16,
            },
            vision: VisionConfig::Patch(VisionPatchConfig {
                image_size: 32,
                patch_size: 8,
                hidden: 96,
                layers: 4,
                heads: 4,
                ffn: 384,
            }),
            fusion: Some(FusionConfig {
                hidden: 256,
                ffn: 1024,
                layers: 7,
                heads: 8,
                allow_custom_ffn: false,
            }),
            seed: 0,
        },
        "one-tower-33m-analog" => {
            let target = preset("two-tower-33m-analog")
                .and_then(|c| param_count_closed_form(&c).ok())
                .expect("analog preset is valid")
                .total;
            let base = ModelConfig {
                arch: Arch::OneTower,
                text: TextTowerConfig {
                    vocab_size: 512,
                    hidden: 192,
                    layers: 7,
                    heads: 4,
                    ffn: 768,
                    max_len: 16,
                },
                vision: VisionConfig::Patch(VisionPatchConfig {
                    image_size: 32,
                    patch_size: 8,
                    hidden: 192,
                    layers: 1,
                    heads: 4,
                    ffn: 768,
                }),
                fusion: None,
                seed: 0,
            };
            one_tower_ffn_matched(target, base)
        }
        // desk-scale workhorse used by the learning checks
        "tiny-two-tower" => ModelConfig {
            arch: Arch::TwoTower,
            text: TextTowerConfig {
                vocab_size: 512,
                hidden: 48,
                layers: 2,
                heads: 4,
                ffn: 192,
                max_len: 16,
            },
            vision: VisionConfig::Cnn(VisionCnnConfig {
                image_size: 32,
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
            seed: 0,
        },
        "tiny-one-tower" => {
            let target = preset("tiny-two-tower")
                .and_then(|c| param_count_closed_form(&c).ok())
                .expect("tiny preset is valid")
                .total;
            let base = ModelConfig {
                arch: Arch::OneTower,
                text: TextTowerConfig {
                    vocab_size: 512,
                    hidden: 64,
                    layers: 3,
                    heads: 4,
                    ffn: 256,
                    max_len: 16,
                },
                vision: VisionConfig::Patch(VisionPatchConfig {
                    image_size: 32,
                    patch_size: 8,
                    hidden: 64,
                    layers: 1,
                    heads: 4,
                    ffn: 256,
                }),
                fusion: None,
                seed: 0,
            };
            one_tower_ffn_matched(target, base)
        }
        // patch-tower sibling of the tiny workhorse
        "tiny-two-tower-patch" => ModelConfig {
            arch: Arch::TwoTower,
            text: TextTowerConfig {
                vocab_size: 512,
                hidden: 48,
                layers: 2,
                heads: 4,
                ffn: 192,
                max_len: 16,
            },
            vision: VisionConfig::Patch(VisionPatchConfig {
                image_size: 32,
                patch_size: 8,
                hidden: 48,
                layers: 2,
                heads: 4,
                ffn: 192,
            }),
            fusion: Some(FusionConfig {
                hidden: 64,
                ffn: 256,
                layers: 2,
                heads: 4,
                allow_custom_ffn: false,
            }),
            seed: 0,
        },
        // under the 50k-parameter gradient-check cap
        "grad-tiny-two-tower" => ModelConfig {
            arch: Arch::TwoTower,
            text: TextTowerConfig {
                vocab_size: 300,
                hidden: 8,
                layers: 1,
                heads: 2,
                ffn: 16,
                max_len: 12,
            },
            vision: VisionConfig::Cnn(VisionCnnConfig {
                image_size: 16,
                stage_channels: vec![4, 6],
                blocks_per_stage: 1,
                out_proj: 8,
            }),
            fusion: Some(FusionConfig {
                hidden: 8,
                ffn: 32,
                layers: 1,
                heads: 2,
                allow_custom_ffn: false,
            }),
            seed: 0,
        },
        "grad-tiny-one-tower" => ModelConfig {
            arch: Arch::OneTower,
            text: TextTowerConfig {
                vocab_size: 300,
                hidden: 8,
                layers: 2,
                heads: 2,
                ffn: 16,
                max_len: 12,
            },
            vision: VisionConfig::Patch(VisionPatchConfig {
                image_size: 16,
                patch_size: 8,
                hidden: 8,
                layers: 1,
                heads: 2,
                ffn: 16,
            }),
            fusion: None,
            seed: 0,
        },
        _ => return None,
    };
    Some(cfg)
}

/// Adjusts a one-tower config's FFN width so its closed-form total lands as
/// close as possible to `target` (the count is affine in ffn with slope
/// layers * (2*hidden + 1)).
pub fn one_tower_ffn_matched(target: u64, mut base: ModelConfig) -> ModelConfig {
    assert_eq!(base.arch, Arch::OneTower);
    let d = base.text.hidden as i64;
    let layers = base.text.layers as i64;
    let slope = layers * (2 * d + 1);
    let current = param_count_closed_form(&base).expect("valid base").total as i64;
    let f0 = base.text.ffn as i64;
    let f = f0 + (target as i64 - current) / slope;
    base.text.ffn = f.max(d) as usize;
    base
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::validate_config;
    use crate::model::VlModel;

    #[test]
    fn all_presets_are_valid() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            assert!(
                validate_config(&cfg).is_empty(),
                "preset {name} invalid: {:?}",
                validate_config(&cfg)
            );
        }
        assert!(preset("nonsense").is_none());
    }

    #[test]
    fn essen_preset_fusion_shape() {
        let cfg = preset("essen").unwrap();
        let fusion = cfg.fusion.unwrap();
        assert_eq!(fusion.hidden, 320);
        assert_eq!(fusion.ffn, 1280);
        assert_eq!(fusion.layers, 6);
    }

    #[test]
    fn analog_pair_parameter_matched_within_2_percent() {
        for (two, one) in [
            ("two-tower-33m-analog", "one-tower-33m-analog"),
            ("tiny-two-tower", "tiny-one-tower"),
        ] {
            let t = param_count_closed_form(&preset(two).unwrap()).unwrap().total as f64;
            let o = param_count_closed_form(&preset(one).unwrap()).unwrap().total as f64;
            let gap = (t - o).abs() / t;
            assert!(gap < 0.02, "{two} vs {one}: {t} vs {o} ({gap:.4})");
        }
    }

    #[test]
    fn grad_presets_under_cap() {
        for name in ["grad-tiny-two-tower", "grad-tiny-one-tower"] {
            let model = VlModel::<f32>::new(preset(name).unwrap()).unwrap();
            let total = model.store.total_scalars();
            assert!(
                total + 300 * 8 + 320 <= crate::pretrain::GRAD_CHECK_PARAM_CAP,
                "{name} too big: {total}"
            );
        }
    }
}
