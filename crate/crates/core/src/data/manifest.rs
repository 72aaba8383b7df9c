//! JSONL dataset manifests and the stable id-hash split.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EssenError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[usize; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
}

fn require<T>(field: &Option<T>, name: &str, line: usize) -> Result<()> {
    if field.is_none() {
        return Err(EssenError::Manifest {
            line,
            message: format!("missing required field `{name}`"),
        });
    }
    Ok(())
}

/// Task-dependent field requirements.
pub fn validate_record(rec: &ManifestRecord, line: usize) -> Result<()> {
    match rec.task.as_str() {
        "pretrain" => require(&rec.image, "image", line),
        "entail" => {
            require(&rec.image, "image", line)?;
            require(&rec.label, "label", line)
        }
        "pairjudge" => {
            require(&rec.image_a, "image_a", line)?;
            require(&rec.image_b, "image_b", line)?;
            require(&rec.label, "label", line)
        }
        "refres" => {
            require(&rec.image, "image", line)?;
            require(&rec.boxes, "boxes", line)?;
            require(&rec.gold, "gold", line)
        }
        other => Err(EssenError::Manifest {
            line,
            message: format!("unknown task `{other}`"),
        }),
    }
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut file, rec)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| EssenError::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
        validate_record(&rec, i + 1)?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// 80/10/10 split by stable id hash, so regenerating a larger dataset keeps
/// the old ids in their old splits.
pub fn split_of(id: &str) -> Split {
    match fnv1a64(id) % 10 {
        8 => Split::Dev,
        9 => Split::Test,
        _ => Split::Train,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<ManifestRecord> {
        vec![
            ManifestRecord {
                id: "pretrain-000001".into(),
                task: "pretrain".into(),
                image: Some("images/pretrain-000001.ppm".into()),
                image_a: None,
                image_b: None,
                text: "a red circle".into(),
                label: None,
                boxes: None,
                gold: None,
            },
            ManifestRecord {
                id: "refres-000002".into(),
                task: "refres".into(),
                image: Some("images/refres-000002.ppm".into()),
                image_a: None,
                image_b: None,
                text: "the blue square".into(),
                label: None,
                boxes: Some(vec![[1, 2, 6, 7], [10, 12, 16, 18]]),
                gold: Some(1),
            },
            ManifestRecord {
                id: "pairjudge-000003".into(),
                task: "pairjudge".into(),
                image: None,
                image_a: Some("images/pairjudge-000003-a.ppm".into()),
                image_b: Some("images/pairjudge-000003-b.ppm".into()),
                text: "both images contain a circle".into(),
                label: Some(serde_json::Value::Bool(true)),
                boxes: None,
                gold: None,
            },
        ]
    }

    #[test]
    fn manifest_roundtrip_field_for_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = sample_records();
        write_manifest(&records, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn empty_manifest_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&[], &path).unwrap();
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"refres-1\",\"task\":\"refres\",\"image\":\"x.ppm\",\"text\":\"the circle\",\"boxes\":[[0,0,4,4]]}\n",
        )
        .unwrap();
        let err = read_manifest(&path).unwrap_err();
        match err {
            EssenError::Manifest { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("gold"), "message was {message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"id\":\"a\"\n").unwrap();
        match read_manifest(&path).unwrap_err() {
            EssenError::Manifest { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn split_hash_is_stable_and_roughly_80_10_10() {
        let mut counts = [0usize; 3];
        for i in 0..5000 {
            match split_of(&format!("entail-{i:06}")) {
                Split::Train => counts[0] += 1,
                Split::Dev => counts[1] += 1,
                Split::Test => counts[2] += 1,
            }
        }
        assert!(counts[0] > 3700 && counts[0] < 4300, "{counts:?}");
        assert!(counts[1] > 300 && counts[1] < 700, "{counts:?}");
        assert!(counts[2] > 300 && counts[2] < 700, "{counts:?}");
        // stability: same id, same split
        assert_eq!(split_of("entail-000123"), split_of("entail-000123"));
    }
}
