//! RTTM reading and writing, and rasterization of annotations onto a frame grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{CoreError, Result};

/// Tolerance for comparing times that were produced by float arithmetic on a grid.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub onset_s: f64,
    pub duration_s: f64,
}

impl Segment {
    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }
}

/// Speaker segments of one session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiarizationAnnotation {
    pub session_id: String,
    entries: Vec<Segment>,
}

impl DiarizationAnnotation {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, speaker: &str, onset_s: f64, duration_s: f64) -> Result<()> {
        if !(onset_s.is_finite() && onset_s >= 0.0) {
            return Err(CoreError::input(format!("onset {} must be a non-negative time", onset_s)));
        }
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(CoreError::input(format!("duration {} must be positive", duration_s)));
        }
        self.entries.push(Segment {
            speaker: speaker.to_string(),
            onset_s,
            duration_s,
        });
        Ok(())
    }

    /// Builds a normalized annotation from per-speaker `[start, end)` intervals,
    /// silently skipping empty ones.
    pub fn from_intervals(session_id: &str, intervals: &BTreeMap<String, Vec<(f64, f64)>>) -> Self {
        let mut ann = Self::new(session_id);
        for (spk, ivs) in intervals {
            for &(a, b) in ivs {
                if b - a > TIME_EPS {
                    ann.entries.push(Segment {
                        speaker: spk.clone(),
                        onset_s: a,
                        duration_s: b - a,
                    });
                }
            }
        }
        ann.normalize();
        ann
    }

    pub fn entries(&self) -> &[Segment] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted, de-duplicated speaker labels.
    pub fn speakers(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// `[start, end)` intervals of one speaker, in onset order.
    pub fn intervals(&self, speaker: &str) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self
            .entries
            .iter()
            .filter(|e| e.speaker == speaker)
            .map(|e| (e.onset_s, e.end_s()))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    pub fn intervals_by_speaker(&self) -> BTreeMap<String, Vec<(f64, f64)>> {
        self.speakers().into_iter().map(|s| {
            let iv = self.intervals(&s);
            (s, iv)
        }).collect()
    }

    /// Sum of segment durations (overlapping speakers counted separately).
    pub fn total_speech_s(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_s).sum()
    }

    pub fn end_s(&self) -> f64 {
        self.entries.iter().map(Segment::end_s).fold(0.0, f64::max)
    }

    /// Merges overlapping or touching segments of the same speaker and sorts
    /// entries by `(onset, speaker)`. Untouched segments keep their exact values.
    pub fn normalize(&mut self) {
        let mut by_spk: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
        for e in self.entries.drain(..) {
            by_spk.entry(e.speaker.clone()).or_default().push(e);
        }
        for (_, mut segs) in by_spk {
            segs.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.duration_s.total_cmp(&b.duration_s)));
            let mut cur: Option<Segment> = None;
            for s in segs {
                match cur.as_mut() {
                    Some(c) if s.onset_s <= c.end_s() + TIME_EPS => {
                        if s.end_s() > c.end_s() {
                            c.duration_s = s.end_s() - c.onset_s;
                        }
                    }
                    _ => {
                        if let Some(c) = cur.take() {
                            self.entries.push(c);
                        }
                        cur = Some(s);
                    }
                }
            }
            if let Some(c) = cur {
                self.entries.push(c);
            }
        }
        self.sort();
    }

    fn sort(&mut self) {
        self.entries.sort_by(|a, b| {
            a.onset_s
                .total_cmp(&b.onset_s)
                .then_with(|| a.speaker.cmp(&b.speaker))
                .then_with(|| a.duration_s.total_cmp(&b.duration_s))
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseMode {
    /// Any non-SPEAKER line is an error.
    Strict,
    /// Non-SPEAKER lines are skipped.
    Lenient,
}

/// Parses RTTM text into normalized per-session annotations.
///
/// Lines look like `SPEAKER <file> <chan> <onset> <dur> <NA> <NA> <spk> <NA> <NA>`;
/// fields are whitespace-separated and blank lines are ignored.
pub fn parse_rttm(text: &str, mode: ParseMode) -> Result<BTreeMap<String, DiarizationAnnotation>> {
    let mut out: BTreeMap<String, DiarizationAnnotation> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields[0] != "SPEAKER" {
            match mode {
                ParseMode::Lenient => continue,
                ParseMode::Strict => {
                    return Err(CoreError::Rttm {
                        line: line_no,
                        msg: format!("unsupported record type `{}`", fields[0]),
                    })
                }
            }
        }
        if fields.len() < 8 {
            return Err(CoreError::Rttm {
                line: line_no,
                msg: format!("expected at least 8 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| CoreError::Rttm {
                line: line_no,
                msg: format!("bad {} `{}`", what, s),
            })
        };
        let onset = num(fields[3], "onset")?;
        let dur = num(fields[4], "duration")?;
        let session = fields[1];
        out.entry(session.to_string())
            .or_insert_with(|| DiarizationAnnotation::new(session))
            .push(fields[7], onset, dur)
            .map_err(|e| CoreError::Rttm {
                line: line_no,
                msg: e.to_string(),
            })?;
    }
    for ann in out.values_mut() {
        ann.normalize();
    }
    Ok(out)
}

/// Serializes annotations, one SPEAKER line per entry sorted by
/// `(session, onset, speaker)`, times with two decimals (ties to even).
pub fn write_rttm<'a>(annotations: impl IntoIterator<Item = &'a DiarizationAnnotation>) -> String {
    let mut rows: Vec<(&str, &Segment)> = annotations
        .into_iter()
        .flat_map(|a| a.entries.iter().map(move |e| (a.session_id.as_str(), e)))
        .collect();
    rows.sort_by(|a, b| {
        a.0.cmp(b.0)
            .then_with(|| a.1.onset_s.total_cmp(&b.1.onset_s))
            .then_with(|| a.1.speaker.cmp(&b.1.speaker))
            .then_with(|| a.1.duration_s.total_cmp(&b.1.duration_s))
    });
    let mut s = String::new();
    for (session, e) in rows {
        writeln!(s, "SPEAKER {} 1 {:.2} {:.2} <NA> <NA> {} <NA> <NA>", session, e.onset_s, e.duration_s, e.speaker).unwrap();
    }
    s
}

/// `S × T` binary speaker activity on a uniform frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub speakers: Vec<String>,
    pub frames: usize,
    pub frame_hop_s: f64,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn zeros(speakers: Vec<String>, frames: usize, frame_hop_s: f64) -> Self {
        let n = speakers.len() * frames;
        Self {
            speakers,
            frames,
            frame_hop_s,
            data: vec![0; n],
        }
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn get(&self, s: usize, t: usize) -> bool {
        self.data[s * self.frames + t] != 0
    }

    pub fn set(&mut self, s: usize, t: usize, active: bool) {
        self.data[s * self.frames + t] = active as u8;
    }

    pub fn row(&self, s: usize) -> &[u8] {
        &self.data[s * self.frames..(s + 1) * self.frames]
    }

    /// Frames `start..end` of every speaker as a row-major `f64` block.
    pub fn window_values(&self, start: usize, end: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_speakers() * (end - start));
        for s in 0..self.num_speakers() {
            v.extend(self.row(s)[start..end].iter().map(|&b| b as f64));
        }
        v
    }
}

/// Rasterizes `ann`: frame `t` is active for a speaker when that speaker's
/// speech covers at least half of `[t·hop, (t+1)·hop)`.
pub fn annotation_to_labels(ann: &DiarizationAnnotation, speakers: &[String], frame_hop_s: f64, frames: usize) -> Result<LabelMatrix> {
    if !(frame_hop_s > 0.0) {
        return Err(CoreError::config("frame hop must be positive"));
    }
    let mut labels = LabelMatrix::zeros(speakers.to_vec(), frames, frame_hop_s);
    for e in ann.entries() {
        let s = speakers
            .iter()
            .position(|x| *x == e.speaker)
            .ok_or_else(|| CoreError::input(format!("speaker `{}` not in speaker list {:?}", e.speaker, speakers)))?;
        let (a, b) = (e.onset_s, e.end_s());
        let first = ((a / frame_hop_s).floor().max(0.0) as usize).min(frames);
        let last = ((b / frame_hop_s).ceil().max(0.0) as usize).min(frames);
        for t in first..last {
            let lo = t as f64 * frame_hop_s;
            let overlap = b.min(lo + frame_hop_s) - a.max(lo);
            if overlap >= frame_hop_s / 2.0 - TIME_EPS {
                labels.set(s, t, true);
            }
        }
    }
    Ok(labels)
}

/// Inverse of [`annotation_to_labels`]: each run of active frames becomes one segment.
pub fn labels_to_annotation(labels: &LabelMatrix, session_id: &str) -> DiarizationAnnotation {
    let mut ann = DiarizationAnnotation::new(session_id);
    let hop = labels.frame_hop_s;
    for (s, spk) in labels.speakers.iter().enumerate() {
        for (t0, t1) in active_runs(labels.row(s).iter().map(|&b| b != 0)) {
            ann.entries.push(Segment {
                speaker: spk.clone(),
                onset_s: t0 as f64 * hop,
                duration_s: (t1 - t0) as f64 * hop,
            });
        }
    }
    ann.sort();
    ann
}

/// Maximal runs of `true` as half-open index ranges.
pub fn active_runs(flags: impl IntoIterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (t, on) in flags.into_iter().enumerate() {
        n = t + 1;
        match (on, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, n));
    }
    runs
}
