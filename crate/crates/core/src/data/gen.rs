//! Whole-dataset generation: pretraining pairs and per-task splits, images
//! on disk, manifests and the induced vocabulary.
//!
//! Every example derives its own RNG seed from (master seed, lane, index),
//! so generation parallelizes over indices with byte-identical output
//! regardless of worker count.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::grammar::{gen_caption, gen_entail, gen_pairjudge, gen_refexp, EntailLabel};
use crate::data::manifest::{split_of, write_manifest, ManifestRecord, Split};
use crate::data::render::{object_bbox, render_ppm};
use crate::data::scene::gen_scene;
use crate::error::{EssenError, Result};
use crate::text::build_vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskCounts {
    pub pretrain: usize,
    pub entail: usize,
    pub pairjudge: usize,
    pub refres: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenConfig {
    pub canvas: usize,
    /// Inclusive object-count range for pretrain/entail/pairjudge scenes.
    pub object_count: (usize, usize),
    /// Objects per refres scene = candidate count K.
    pub refres_candidates: usize,
    pub counts: TaskCounts,
    pub vocab_size: usize,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            canvas: 32,
            object_count: (2, 5),
            refres_candidates: 5,
            counts: TaskCounts {
                pretrain: 2000,
                entail: 1200,
                pairjudge: 1200,
                refres: 1200,
            },
            vocab_size: 512,
        }
    }
}

impl DataGenConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

// Lane constants keep per-example seed streams disjoint.
const LANE_PRETRAIN: u64 = 1;
const LANE_ENTAIL: u64 = 2;
const LANE_PAIR_A: u64 = 3;
const LANE_PAIR_B: u64 = 4;
const LANE_REFRES: u64 = 5;
const LANE_TEXT: u64 = 6;
const LANE_DISTRACTOR: u64 = 7;

pub fn derive_seed(master: u64, lane: u64, index: u64) -> u64 {
    // splitmix64 over the packed triple
    let mut z = master
        .wrapping_add(lane.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize)]
pub struct DataGenSummary {
    pub records_per_task: std::collections::BTreeMap<String, usize>,
    pub images_written: usize,
    pub vocab_len: usize,
}

struct GeneratedExample {
    record: ManifestRecord,
    images: Vec<(String, Vec<u8>)>, // relative path, ppm bytes
}

pub fn generate_dataset(cfg: &DataGenConfig, seed: u64, out_dir: &Path) -> Result<DataGenSummary> {
    std::fs::create_dir_all(out_dir.join("images"))?;

    let mut per_task = std::collections::BTreeMap::new();
    let mut images_written = 0usize;
    let mut train_captions: Vec<String> = Vec::new();

    for task in ["pretrain", "entail", "pairjudge", "refres"] {
        let count = match task {
            "pretrain" => cfg.counts.pretrain,
            "entail" => cfg.counts.entail,
            "pairjudge" => cfg.counts.pairjudge,
            _ => cfg.counts.refres,
        };
        let examples: Vec<Result<GeneratedExample>> = (0..count)
            .into_par_iter()
            .map(|i| generate_example(cfg, seed, task, i))
            .collect();

        let mut by_split: std::collections::BTreeMap<&str, Vec<ManifestRecord>> =
            Split::ALL.iter().map(|s| (s.as_str(), Vec::new())).collect();
        for ex in examples {
            let ex = ex?;
            for (rel, bytes) in &ex.images {
                std::fs::write(out_dir.join(rel), bytes)?;
                images_written += 1;
            }
            if task == "pretrain" && split_of(&ex.record.id) == Split::Train {
                train_captions.push(ex.record.text.clone());
            }
            by_split
                .get_mut(split_of(&ex.record.id).as_str())
                .unwrap()
                .push(ex.record);
        }
        for (split, records) in by_split {
            write_manifest(&records, &out_dir.join(format!("{task}.{split}.jsonl")))?;
        }
        per_task.insert(task.to_string(), count);
    }

    if train_captions.is_empty() {
        return Err(EssenError::DataGen(
            "no pretrain training captions generated; increase counts.pretrain".into(),
        ));
    }
    let vocab = build_vocab(train_captions.iter(), cfg.vocab_size)?;
    vocab.save(&out_dir.join("vocab.txt"))?;

    Ok(DataGenSummary {
        records_per_task: per_task,
        images_written,
        vocab_len: vocab.len(),
    })
}

fn generate_example(
    cfg: &DataGenConfig,
    seed: u64,
    task: &str,
    i: usize,
) -> Result<GeneratedExample> {
    let id = format!("{task}-{i:06}");
    let idx = i as u64;
    match task {
        "pretrain" => {
            let scene = gen_scene(derive_seed(seed, LANE_PRETRAIN, idx), cfg.canvas, cfg.object_count)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, LANE_TEXT, idx));
            let caption = gen_caption(&scene, &mut rng);
            let (_, ppm) = render_ppm(&scene)?;
            let rel = format!("images/{id}.ppm");
            Ok(GeneratedExample {
                record: ManifestRecord {
                    id,
                    task: task.into(),
                    image: Some(rel.clone()),
                    image_a: None,
                    image_b: None,
                    text: caption,
                    label: None,
                    boxes: None,
                    gold: None,
                },
                images: vec![(rel, ppm)],
            })
        }
        "entail" => {
            let scene = gen_scene(derive_seed(seed, LANE_ENTAIL, idx), cfg.canvas, cfg.object_count)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, LANE_TEXT, idx + 1_000_000));
            let want = EntailLabel::from_index(i % 3).unwrap();
            let gen = gen_entail(
                &scene,
                &mut rng,
                want,
                derive_seed(seed, LANE_DISTRACTOR, idx),
            )?;
            let (_, ppm) = render_ppm(&scene)?;
            let rel = format!("images/{id}.ppm");
            Ok(GeneratedExample {
                record: ManifestRecord {
                    id,
                    task: task.into(),
                    image: Some(rel.clone()),
                    image_a: None,
                    image_b: None,
                    text: gen.text,
                    label: Some(serde_json::Value::String(gen.label.as_str().into())),
                    boxes: None,
                    gold: None,
                },
                images: vec![(rel, ppm)],
            })
        }
        "pairjudge" => {
            let scene_a = gen_scene(derive_seed(seed, LANE_PAIR_A, idx), cfg.canvas, cfg.object_count)?;
            let scene_b = gen_scene(derive_seed(seed, LANE_PAIR_B, idx), cfg.canvas, cfg.object_count)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, LANE_TEXT, idx + 2_000_000));
            let gen = gen_pairjudge(&scene_a, &scene_b, &mut rng, i % 2 == 0);
            let (_, ppm_a) = render_ppm(&scene_a)?;
            let (_, ppm_b) = render_ppm(&scene_b)?;
            let rel_a = format!("images/{id}-a.ppm");
            let rel_b = format!("images/{id}-b.ppm");
            Ok(GeneratedExample {
                record: ManifestRecord {
                    id,
                    task: task.into(),
                    image: None,
                    image_a: Some(rel_a.clone()),
                    image_b: Some(rel_b.clone()),
                    text: gen.text,
                    label: Some(serde_json::Value::Bool(gen.label)),
                    boxes: None,
                    gold: None,
                },
                images: vec![(rel_a, ppm_a), (rel_b, ppm_b)],
            })
        }
        "refres" => {
            let k = cfg.refres_candidates;
            let scene = gen_scene(derive_seed(seed, LANE_REFRES, idx), cfg.canvas, (k, k))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, LANE_TEXT, idx + 3_000_000));
            let gen = gen_refexp(&scene, &mut rng)?;
            let boxes: Vec<[usize; 4]> = scene
                .objects
                .iter()
                .map(|o| {
                    let (x0, y0, x1, y1) = object_bbox(o, scene.canvas);
                    [x0, y0, x1, y1]
                })
                .collect();
            let (_, ppm) = render_ppm(&scene)?;
            let rel = format!("images/{id}.ppm");
            Ok(GeneratedExample {
                record: ManifestRecord {
                    id,
                    task: task.into(),
                    image: Some(rel.clone()),
                    image_a: None,
                    image_b: None,
                    text: gen.text,
                    label: None,
                    boxes: Some(boxes),
                    gold: Some(gen.gold),
                },
                images: vec![(rel, ppm)],
            })
        }
        other => Err(EssenError::DataGen(format!("unknown task `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::read_manifest;

    fn tiny_cfg() -> DataGenConfig {
        DataGenConfig {
            canvas: 32,
            object_count: (2, 4),
            refres_candidates: 4,
            counts: TaskCounts {
                pretrain: 30,
                entail: 12,
                pairjudge: 10,
                refres: 10,
            },
            vocab_size: 400,
        }
    }

    #[test]
    fn dataset_generation_deterministic_and_split_disjoint() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = generate_dataset(&tiny_cfg(), 77, dir_a.path()).unwrap();
        let b = generate_dataset(&tiny_cfg(), 77, dir_b.path()).unwrap();
        assert_eq!(a.images_written, b.images_written);

        for task in ["pretrain", "entail", "pairjudge", "refres"] {
            let mut ids = std::collections::HashSet::new();
            let mut total = 0;
            for split in ["train", "dev", "test"] {
                let path_a = dir_a.path().join(format!("{task}.{split}.jsonl"));
                let recs_a = read_manifest(&path_a).unwrap();
                let recs_b = read_manifest(&dir_b.path().join(format!("{task}.{split}.jsonl"))).unwrap();
                assert_eq!(recs_a, recs_b, "nondeterministic manifest {task}.{split}");
                total += recs_a.len();
                for rec in &recs_a {
                    assert!(ids.insert(rec.id.clone()), "id {} in two splits", rec.id);
                    // referenced images exist
                    for img in [&rec.image, &rec.image_a, &rec.image_b].into_iter().flatten() {
                        assert!(dir_a.path().join(img).exists(), "missing image {img}");
                    }
                }
            }
            let expected = match task {
                "pretrain" => 30,
                "entail" => 12,
                "pairjudge" => 10,
                _ => 10,
            };
            assert_eq!(total, expected);
        }

        // byte-identical images across the two runs
        let img = "images/pretrain-000003.ppm";
        assert_eq!(
            std::fs::read(dir_a.path().join(img)).unwrap(),
            std::fs::read(dir_b.path().join(img)).unwrap()
        );
        assert!(dir_a.path().join("vocab.txt").exists());
    }

    #[test]
    fn entail_labels_balanced_within_one() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_cfg(), 5, dir.path()).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for split in ["train", "dev", "test"] {
            for rec in read_manifest(&dir.path().join(format!("entail.{split}.jsonl"))).unwrap() {
                let label = rec.label.unwrap().as_str().unwrap().to_string();
                *counts.entry(label).or_insert(0usize) += 1;
            }
        }
        let max = counts.values().max().unwrap();
        let min = counts.values().min().unwrap();
        assert!(max - min <= 1, "unbalanced entail labels {counts:?}");
    }
}
