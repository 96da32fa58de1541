//! Per-frame binary labels, one JSON object per line. A label value may be
//! 0, 1, or null; null marks an unknown annotation, which the probe skips
//! for that label without discarding the frame.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::manifest::VideoManifest;
use crate::error::{ClpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawLabelRecord {
    image: PathBuf,
    labels: BTreeMap<String, Option<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    /// Frame path, relative to the corpus root; must match a manifest frame.
    pub image: PathBuf,
    /// Label name to value; `None` is unknown.
    pub labels: BTreeMap<String, Option<bool>>,
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let file = std::fs::File::open(path).map_err(|e| ClpError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ClpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLabelRecord = serde_json::from_str(&line).map_err(|e| ClpError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let mut labels = BTreeMap::new();
        for (name, value) in raw.labels {
            let mapped = match value {
                None => None,
                Some(0) => Some(false),
                Some(1) => Some(true),
                Some(v) => {
                    return Err(ClpError::Format {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("label {name} must be 0, 1 or null, got {v}"),
                    })
                }
            };
            labels.insert(name, mapped);
        }
        out.push(LabelRecord {
            image: raw.image,
            labels,
        });
    }
    if out.is_empty() {
        return Err(ClpError::Data(format!("{}: no label records", path.display())));
    }
    Ok(out)
}

pub fn save_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| ClpError::io(path, e))?;
    for r in records {
        let raw = RawLabelRecord {
            image: r.image.clone(),
            labels: r
                .labels
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|b| b as u8)))
                .collect(),
        };
        let line = serde_json::to_string(&raw).expect("label record serializes");
        writeln!(file, "{line}").map_err(|e| ClpError::io(path, e))?;
    }
    Ok(())
}

/// Sorted union of label names across the records.
pub fn label_names(records: &[LabelRecord]) -> Vec<String> {
    let mut names = std::collections::BTreeSet::new();
    for r in records {
        for k in r.labels.keys() {
            names.insert(k.clone());
        }
    }
    names.into_iter().collect()
}

/// A labeled frame attached to its video and subject, ready for
/// subject-independent fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub image: PathBuf,
    pub video_id: String,
    pub subject_id: String,
    pub labels: BTreeMap<String, Option<bool>>,
}

/// Join label records with the manifests that own their frames. Every
/// labeled image must appear in exactly one manifest.
pub fn join_with_manifests(
    records: &[LabelRecord],
    manifests: &[VideoManifest],
) -> Result<Vec<ProbeExample>> {
    let mut frame_owner: BTreeMap<&Path, (&str, &str)> = BTreeMap::new();
    for m in manifests {
        for f in &m.frames {
            if frame_owner
                .insert(f.as_path(), (&m.video_id, &m.subject_id))
                .is_some()
            {
                return Err(ClpError::Data(format!(
                    "frame {} appears in more than one manifest",
                    f.display()
                )));
            }
        }
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let (video_id, subject_id) = frame_owner.get(r.image.as_path()).ok_or_else(|| {
            ClpError::Data(format!(
                "labeled image {} is not in any manifest",
                r.image.display()
            ))
        })?;
        out.push(ProbeExample {
            image: r.image.clone(),
            video_id: video_id.to_string(),
            subject_id: subject_id.to_string(),
            labels: r.labels.clone(),
        });
    }
    Ok(out)
}
