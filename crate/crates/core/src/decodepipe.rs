//! Sliding-window inference, overlap averaging, median smoothing and segmentation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;

use crate::dsp::{read_matrix_dump, write_matrix_dump};
use crate::error::{CoreError, Result};
use crate::rttm::{active_runs, DiarizationAnnotation, LabelMatrix, TIME_EPS};

pub const PROB_MAGIC: &[u8; 4] = b"PROB";

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub chunk_frames: usize,
    pub shift_frames: usize,
    pub median_kernel: usize,
    pub threshold: f64,
    pub min_segment_s: f64,
    pub min_gap_s: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            chunk_frames: 600,
            shift_frames: 100,
            median_kernel: 11,
            threshold: 0.5,
            min_segment_s: 0.2,
            min_gap_s: 0.1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames == 0 || self.shift_frames == 0 || self.shift_frames > self.chunk_frames {
            return Err(CoreError::config(format!(
                "need 1 <= shift_frames <= chunk_frames, got shift {} chunk {}",
                self.shift_frames, self.chunk_frames
            )));
        }
        if self.median_kernel.is_multiple_of(2) {
            return Err(CoreError::config(format!("median kernel must be odd, got {}", self.median_kernel)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(CoreError::config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.min_segment_s >= 0.0 && self.min_gap_s >= 0.0) {
            return Err(CoreError::config("min_segment_s and min_gap_s must be non-negative"));
        }
        Ok(())
    }
}

/// Per-speaker, per-frame speech probabilities (`S × T`).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityMatrix {
    pub speakers: Vec<String>,
    pub frames: usize,
    pub frame_hop_s: f64,
    data: Vec<f64>,
}

impl ActivityMatrix {
    pub fn new(speakers: Vec<String>, frames: usize, frame_hop_s: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != speakers.len() * frames {
            return Err(CoreError::input(format!(
                "activity data has {} values, expected {} speakers x {} frames",
                data.len(),
                speakers.len(),
                frames
            )));
        }
        Ok(Self {
            speakers,
            frames,
            frame_hop_s,
            data,
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.data[s * self.frames + t]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.frames..(s + 1) * self.frames]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn from_labels(labels: &LabelMatrix) -> Self {
        let data = labels.window_values(0, labels.frames);
        Self {
            speakers: labels.speakers.clone(),
            frames: labels.frames,
            frame_hop_s: labels.frame_hop_s,
            data,
        }
    }

    /// Frame-major copy (`T × S`), the on-disk layout.
    fn transposed(&self) -> Vec<f64> {
        let s = self.num_speakers();
        let mut out = vec![0.0; self.data.len()];
        for i in 0..s {
            for t in 0..self.frames {
                out[t * s + i] = self.data[i * self.frames + t];
            }
        }
        out
    }
}

pub fn save_probs(probs: &ActivityMatrix, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    write_matrix_dump(
        BufWriter::new(f),
        PROB_MAGIC,
        probs.frames,
        probs.num_speakers(),
        probs.frame_hop_s,
        probs.frame_hop_s,
        &probs.transposed(),
    )
    .map_err(|e| CoreError::io(path, e))
}

/// Reads a PROB dump; the file does not store speaker names so the caller supplies them.
pub fn load_probs(path: &Path, speakers: &[String]) -> Result<ActivityMatrix> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let d = read_matrix_dump(BufReader::new(f), PROB_MAGIC, "PROB")?;
    if d.cols != speakers.len() {
        return Err(CoreError::format("PROB", format!("{} speaker columns, expected {}", d.cols, speakers.len())));
    }
    let mut data = vec![0.0; d.values.len()];
    for t in 0..d.rows {
        for s in 0..d.cols {
            data[s * d.rows + t] = d.values[t * d.cols + s];
        }
    }
    ActivityMatrix::new(speakers.to_vec(), d.rows, d.hop, data)
}

/// Half-open frame windows visited by the decoder.
pub fn decode_windows(frames: usize, chunk: usize, shift: usize) -> Vec<(usize, usize)> {
    if frames <= chunk {
        return vec![(0, frames)];
    }
    let mut w: Vec<(usize, usize)> = (0..)
        .map(|i| i * shift)
        .take_while(|&s| s + chunk <= frames)
        .map(|s| (s, s + chunk))
        .collect();
    if w.last().is_none_or(|&(_, e)| e < frames) {
        w.push((frames - chunk, frames));
    }
    w
}

/// Runs `predict(start, end)` on every window and averages overlapping outputs.
///
/// `predict` returns row-major `S × (end - start)` probabilities. Windows are
/// evaluated in parallel; the reduction runs in window order.
pub fn sliding_window_decode<F>(frames: usize, speakers: &[String], frame_hop_s: f64, cfg: &DecodeConfig, predict: F) -> Result<ActivityMatrix>
where
    F: Fn(usize, usize) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    if frames == 0 {
        return Err(CoreError::input("cannot decode a session with zero frames"));
    }
    let s = speakers.len();
    let windows = decode_windows(frames, cfg.chunk_frames, cfg.shift_frames);
    let outputs: Vec<Vec<f64>> = windows.par_iter().map(|&(a, b)| predict(a, b)).collect::<Result<_>>()?;
    // Running mean keeps agreeing windows exact.
    let mut mean = vec![0.0; s * frames];
    let mut count = vec![0u32; frames];
    for (&(a, b), out) in windows.iter().zip(&outputs) {
        let len = b - a;
        if out.len() != s * len {
            return Err(CoreError::Internal(format!("window output has {} values, expected {}", out.len(), s * len)));
        }
        for c in &mut count[a..b] {
            *c += 1;
        }
        for i in 0..s {
            let dst = &mut mean[i * frames + a..i * frames + b];
            for ((m, &v), &n) in dst.iter_mut().zip(&out[i * len..(i + 1) * len]).zip(&count[a..b]) {
                *m += (v - *m) / n as f64;
            }
        }
    }
    ActivityMatrix::new(speakers.to_vec(), frames, frame_hop_s, mean)
}

/// Running median of one row with replicate padding.
pub fn median_filter_row(row: &[f64], k: usize) -> Result<Vec<f64>> {
    if k.is_multiple_of(2) {
        return Err(CoreError::config(format!("median kernel must be odd, got {}", k)));
    }
    let n = row.len();
    let h = k / 2;
    let mut buf = Vec::with_capacity(k);
    Ok((0..n)
        .map(|t| {
            buf.clear();
            buf.extend((0..k).map(|j| row[(t + j).saturating_sub(h).min(n - 1)]));
            buf.sort_by(f64::total_cmp);
            buf[h]
        })
        .collect())
}

pub fn median_filter(probs: &ActivityMatrix, k: usize) -> Result<ActivityMatrix> {
    let mut data = Vec::with_capacity(probs.values().len());
    for s in 0..probs.num_speakers() {
        data.extend(median_filter_row(probs.row(s), k)?);
    }
    ActivityMatrix::new(probs.speakers.clone(), probs.frames, probs.frame_hop_s, data)
}

/// Per-speaker `[start, end)` intervals in seconds after thresholding, gap
/// merging and short-segment removal. Every speaker gets an entry.
pub fn threshold_to_segments(probs: &ActivityMatrix, cfg: &DecodeConfig) -> BTreeMap<String, Vec<(f64, f64)>> {
    let hop = probs.frame_hop_s;
    let mut out = BTreeMap::new();
    for (s, name) in probs.speakers.iter().enumerate() {
        let runs = active_runs(probs.row(s).iter().map(|&p| p >= cfg.threshold));
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
        for (a, b) in runs {
            match merged.last_mut() {
                Some(last) if ((a - last.1) as f64 * hop) < cfg.min_gap_s - TIME_EPS => last.1 = b,
                _ => merged.push((a, b)),
            }
        }
        let segs = merged
            .into_iter()
            .filter(|&(a, b)| (b - a) as f64 * hop >= cfg.min_segment_s - TIME_EPS)
            .map(|(a, b)| (a as f64 * hop, b as f64 * hop))
            .collect();
        out.insert(name.clone(), segs);
    }
    out
}

pub fn probs_to_annotation(probs: &ActivityMatrix, cfg: &DecodeConfig, session_id: &str) -> DiarizationAnnotation {
    DiarizationAnnotation::from_intervals(session_id, &threshold_to_segments(probs, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        DecodeConfig::default().validate().unwrap();
        let bad = DecodeConfig { shift_frames: 700, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DecodeConfig { threshold: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn windows_cover_and_end_align() {
        assert_eq!(decode_windows(1200, 600, 600), vec![(0, 600), (600, 1200)]);
        assert_eq!(decode_windows(300, 600, 100), vec![(0, 300)]);
        assert_eq!(decode_windows(1000, 600, 300), vec![(0, 600), (300, 900), (400, 1000)]);
        assert_eq!(decode_windows(1000, 600, 100).len(), 5);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_filter_row(&[0.0, 1.0, 0.0], 3).unwrap(), vec![0.0; 3]);
        assert_eq!(
            median_filter_row(&[0.1, 0.9, 0.2, 0.8, 0.3], 3).unwrap(),
            vec![0.1, 0.2, 0.8, 0.3, 0.3]
        );
        assert_eq!(median_filter_row(&[0.4; 7], 5).unwrap(), vec![0.4; 7]);
        assert!(median_filter_row(&[0.0], 4).is_err());
    }

    #[test]
    fn threshold_examples() {
        let cfg = DecodeConfig { min_segment_s: 0.0, min_gap_s: 0.0, ..Default::default() };
        let p = ActivityMatrix::new(vec!["A".into()], 4, 0.01, vec![0.1, 0.8, 0.9, 0.2]).unwrap();
        let segs = &threshold_to_segments(&p, &cfg)["A"];
        assert_eq!(segs.len(), 1);
        assert!((segs[0].0 - 0.01).abs() < 1e-12 && (segs[0].1 - 0.03).abs() < 1e-12);

        let p = ActivityMatrix::new(vec!["A".into()], 4, 0.01, vec![0.1; 4]).unwrap();
        assert!(threshold_to_segments(&p, &cfg)["A"].is_empty());
    }

    #[test]
    fn short_gap_is_merged() {
        let mut row = vec![0.9; 100];
        for v in &mut row[40..45] {
            *v = 0.0;
        }
        let p = ActivityMatrix::new(vec!["A".into()], 100, 0.01, row).unwrap();
        let segs = &threshold_to_segments(&p, &DecodeConfig::default())["A"];
        assert_eq!(segs.len(), 1);
    }
}
