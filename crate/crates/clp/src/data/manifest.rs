//! Video manifests: one JSON object per line describing a video's frames in
//! temporal order, the subject they belong to, and any recording gaps.
//!
//! A gap index `g` marks a discontinuity between `frames[g-1]` and
//! `frames[g]`. Sequence windows must not straddle a gap: a window starting
//! at `start` with length J and stride s covers `start ..= start+(J-1)s`, so
//! it is invalid iff some gap g satisfies `start < g <= start+(J-1)s`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ClpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub video_id: String,
    pub subject_id: String,
    /// Frame image paths, relative to the corpus root, in temporal order.
    pub frames: Vec<PathBuf>,
    /// Discontinuity positions; `g` splits frames g-1 and g.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gaps: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

impl VideoManifest {
    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(ClpError::Data("manifest with empty video_id".into()));
        }
        if self.subject_id.is_empty() {
            return Err(ClpError::Data(format!(
                "video {}: empty subject_id",
                self.video_id
            )));
        }
        if self.frames.is_empty() {
            return Err(ClpError::Data(format!(
                "video {}: no frames",
                self.video_id
            )));
        }
        for &g in &self.gaps {
            if g == 0 || g >= self.frames.len() {
                return Err(ClpError::Data(format!(
                    "video {}: gap index {} outside 1..{}",
                    self.video_id,
                    g,
                    self.frames.len()
                )));
            }
        }
        for w in self.gaps.windows(2) {
            if w[1] <= w[0] {
                return Err(ClpError::Data(format!(
                    "video {}: gap indices must be strictly increasing",
                    self.video_id
                )));
            }
        }
        Ok(())
    }

    /// Frame indices covered by a window.
    pub fn window_indices(start: usize, seq_len: usize, stride: usize) -> Vec<usize> {
        (0..seq_len).map(|i| start + i * stride).collect()
    }

    /// Every start whose window fits inside the video and crosses no gap.
    pub fn valid_window_starts(&self, seq_len: usize, stride: usize) -> Vec<usize> {
        let span = (seq_len - 1) * stride;
        if span >= self.frames.len() {
            return Vec::new();
        }
        (0..self.frames.len() - span)
            .filter(|&start| {
                !self
                    .gaps
                    .iter()
                    .any(|&g| start < g && g <= start + span)
            })
            .collect()
    }
}

pub fn load_manifests(path: &Path) -> Result<Vec<VideoManifest>> {
    let file = std::fs::File::open(path).map_err(|e| ClpError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ClpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: VideoManifest = serde_json::from_str(&line).map_err(|e| ClpError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        m.validate()?;
        out.push(m);
    }
    if out.is_empty() {
        return Err(ClpError::Data(format!(
            "{}: no manifests",
            path.display()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for m in &out {
        if !seen.insert(&m.video_id) {
            return Err(ClpError::Data(format!(
                "duplicate video_id {}",
                m.video_id
            )));
        }
    }
    Ok(out)
}

pub fn save_manifests(path: &Path, manifests: &[VideoManifest]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| ClpError::io(path, e))?;
    for m in manifests {
        let line = serde_json::to_string(m).expect("manifest serializes");
        writeln!(file, "{line}").map_err(|e| ClpError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize, gaps: Vec<usize>) -> VideoManifest {
        VideoManifest {
            video_id: "v0".into(),
            subject_id: "s0".into(),
            frames: (0..n).map(|i| PathBuf::from(format!("f{i:04}.png"))).collect(),
            gaps,
            fps: Some(30.0),
        }
    }

    /// Independent check: enumerate windows and test the straddle condition
    /// frame by frame.
    fn brute_force_starts(n: usize, gaps: &[usize], seq_len: usize, stride: usize) -> Vec<usize> {
        let mut out = Vec::new();
        'starts: for start in 0..n {
            let last = start + (seq_len - 1) * stride;
            if last >= n {
                continue;
            }
            // Walk consecutive index pairs and reject if any gap falls
            // between them; this is the definition, stated differently from
            // the implementation's interval test.
            let idx: Vec<usize> = (0..seq_len).map(|i| start + i * stride).collect();
            for pair in idx.windows(2) {
                for &g in gaps {
                    if pair[0] < g && g <= pair[1] {
                        continue 'starts;
                    }
                }
            }
            out.push(start);
        }
        out
    }

    #[test]
    fn gapless_99_frame_video_has_83_starts_for_9_by_2_windows() {
        let m = manifest(99, vec![]);
        let starts = m.valid_window_starts(9, 2);
        // Span is (9-1)*2 = 16, so starts run 0..=82.
        assert_eq!(starts.len(), 83);
        assert_eq!(starts[0], 0);
        assert_eq!(*starts.last().unwrap(), 82);
        assert_eq!(starts, brute_force_starts(99, &[], 9, 2));
    }

    #[test]
    fn central_gap_removes_exactly_the_straddling_starts() {
        let m = manifest(99, vec![50]);
        let starts = m.valid_window_starts(9, 2);
        // Starts 34..=49 straddle the gap; 83 - 16 = 67 remain.
        assert_eq!(starts.len(), 67);
        assert!(!starts.contains(&34));
        assert!(!starts.contains(&49));
        assert!(starts.contains(&33));
        assert!(starts.contains(&50));
        assert_eq!(starts, brute_force_starts(99, &[50], 9, 2));
    }

    #[test]
    fn random_gap_patterns_match_the_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let n = rng.gen_range(5..80);
            let mut gaps: Vec<usize> = (1..n).filter(|_| rng.gen_bool(0.08)).collect();
            gaps.dedup();
            let seq_len = rng.gen_range(3..=9);
            let stride = rng.gen_range(1..=3);
            let m = manifest(n, gaps.clone());
            assert_eq!(
                m.valid_window_starts(seq_len, stride),
                brute_force_starts(n, &gaps, seq_len, stride),
                "n={n} gaps={gaps:?} seq_len={seq_len} stride={stride}"
            );
        }
    }

    #[test]
    fn too_short_videos_have_no_starts() {
        let m = manifest(16, vec![]);
        assert!(m.valid_window_starts(9, 2).is_empty());
        let m = manifest(17, vec![]);
        assert_eq!(m.valid_window_starts(9, 2), vec![0]);
    }

    #[test]
    fn gap_bounds_are_validated() {
        assert!(manifest(10, vec![0]).validate().is_err());
        assert!(manifest(10, vec![10]).validate().is_err());
        assert!(manifest(10, vec![9]).validate().is_ok());
        assert!(manifest(10, vec![3, 3]).validate().is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_line_accurate_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifests.jsonl");
        let ms = vec![manifest(5, vec![]), {
            let mut m = manifest(7, vec![2]);
            m.video_id = "v1".into();
            m
        }];
        save_manifests(&path, &ms).unwrap();
        assert_eq!(load_manifests(&path).unwrap(), ms);

        std::fs::write(&path, "{\"video_id\": \"v0\"}\n").unwrap();
        match load_manifests(&path) {
            Err(ClpError::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected format error, got {other:?}"),
        }

        let good = serde_json::to_string(&ms[0]).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match load_manifests(&path) {
            Err(ClpError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_video_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifests.jsonl");
        save_manifests(&path, &[manifest(5, vec![]), manifest(6, vec![])]).unwrap();
        assert!(load_manifests(&path).is_err());
    }
}
