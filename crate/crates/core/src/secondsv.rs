//! Second-pass speaker verification: relabels single-speaker segments whose
//! utterance embedding sits clearly closer to another speaker's centroid.

use std::collections::BTreeMap;

use avsd_nn::ParameterStore;
use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::dsp::{log_mel, AudioSignal};
use crate::error::{CoreError, Result};
use crate::models::{embed_utterance, normalize_utterance, EncoderConfig};
use crate::rttm::{DiarizationAnnotation, TIME_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct SvConfig {
    pub min_segment_s: f64,
    /// Cosine advantage another centroid needs before a segment moves.
    pub reassign_margin: f64,
    /// Longest single-speaker segments averaged into each centroid.
    pub enroll_k: usize,
}

impl Default for SvConfig {
    fn default() -> Self {
        Self {
            min_segment_s: 0.5,
            reassign_margin: 0.1,
            enroll_k: 3,
        }
    }
}

impl SvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_segment_s > 0.0) {
            return Err(CoreError::config(format!("sv min_segment_s must be positive, got {}", self.min_segment_s)));
        }
        if !(self.reassign_margin >= 0.0) {
            return Err(CoreError::config(format!("sv margin must be non-negative, got {}", self.reassign_margin)));
        }
        if self.enroll_k == 0 {
            return Err(CoreError::config("sv enroll_k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeakerSegment {
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl SpeakerSegment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Maximal stretches with exactly one active speaker, at least `min_segment_s` long.
pub fn single_speaker_segments(ann: &DiarizationAnnotation, min_segment_s: f64) -> Vec<SpeakerSegment> {
    let mut events: Vec<(f64, i32, usize)> = Vec::new();
    let speakers = ann.speakers();
    for (k, spk) in speakers.iter().enumerate() {
        for (a, b) in ann.intervals(spk) {
            events.push((a, 1, k));
            events.push((b, -1, k));
        }
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut count = vec![0i32; speakers.len()];
    let mut out: Vec<SpeakerSegment> = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            count[events[i].2] += events[i].1;
            i += 1;
        }
        let Some(&next) = events.get(i).map(|e| &e.0) else { break };
        let mut active = count.iter().enumerate().filter(|(_, &c)| c > 0);
        if let (Some((k, _)), None) = (active.next(), active.next()) {
            match out.last_mut() {
                Some(last) if last.speaker == speakers[k] && (last.end_s - t).abs() <= TIME_EPS => last.end_s = next,
                _ => out.push(SpeakerSegment {
                    speaker: speakers[k].clone(),
                    start_s: t,
                    end_s: next,
                }),
            }
        }
    }
    out.retain(|s| s.duration_s() >= min_segment_s - TIME_EPS);
    out
}

/// Embeds a time span of one session.
pub trait SegmentEmbedder: Sync {
    fn embed(&self, start_s: f64, end_s: f64) -> Result<Vec<f64>>;
}

/// Re-extracts log-Mel features from the cropped audio and runs the utterance extractor.
pub struct ExtractorEmbedder<'a> {
    pub store: &'a ParameterStore,
    pub config: &'a EncoderConfig,
    pub audio: &'a AudioSignal,
}

impl SegmentEmbedder for ExtractorEmbedder<'_> {
    fn embed(&self, start_s: f64, end_s: f64) -> Result<Vec<f64>> {
        let crop = self.audio.crop(start_s, end_s);
        let feats = log_mel(&crop, self.config.n_mels)?;
        let x = normalize_utterance(feats.values(), feats.frames(), feats.n_mels())?;
        embed_utterance(self.store, self.config, &x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Relabel {
    pub segment: SpeakerSegment,
    pub to: String,
    pub own_cosine: f64,
    pub best_cosine: f64,
}

#[derive(Clone, Debug)]
pub struct SvOutcome {
    pub annotation: DiarizationAnnotation,
    pub relabels: Vec<Relabel>,
    /// Speakers without any usable single-speaker segment.
    pub exempt: Vec<String>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nearest-centroid relabeling of single-speaker segments.
pub fn correct_speakers(ann: &DiarizationAnnotation, embedder: &dyn SegmentEmbedder, cfg: &SvConfig) -> Result<SvOutcome> {
    cfg.validate()?;
    let segs = single_speaker_segments(ann, cfg.min_segment_s);
    let embs: Vec<Vec<f64>> = segs
        .par_iter()
        .map(|s| embedder.embed(s.start_s, s.end_s).map(unit))
        .collect::<Result<_>>()?;

    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in segs.iter().enumerate() {
        by_speaker.entry(&s.speaker).or_default().push(i);
    }
    let mut centroids: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (spk, mut idx) in by_speaker {
        idx.sort_by(|&a, &b| segs[b].duration_s().total_cmp(&segs[a].duration_s()).then(a.cmp(&b)));
        idx.truncate(cfg.enroll_k);
        let dim = embs[idx[0]].len();
        let mut c = vec![0.0; dim];
        for &i in &idx {
            c.iter_mut().zip(&embs[i]).for_each(|(a, b)| *a += b);
        }
        centroids.insert(spk, unit(c));
    }
    let exempt: Vec<String> = ann.speakers().into_iter().filter(|s| !centroids.contains_key(s.as_str())).collect();
    for s in &exempt {
        warn!(
            "session `{}`: speaker {} has no single-speaker segment of at least {} s; left out of verification",
            ann.session_id, s, cfg.min_segment_s
        );
    }

    let mut relabels = Vec::new();
    for (s, e) in segs.iter().zip(&embs) {
        let own = dot(e, &centroids[s.speaker.as_str()]);
        let best = centroids
            .iter()
            .filter(|(k, _)| **k != s.speaker)
            .map(|(k, c)| (*k, dot(e, c)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(a.0)));
        if let Some((to, cos)) = best {
            if cos - own > cfg.reassign_margin {
                relabels.push(Relabel {
                    segment: s.clone(),
                    to: to.to_string(),
                    own_cosine: own,
                    best_cosine: cos,
                });
            }
        }
    }
    if relabels.is_empty() {
        return Ok(SvOutcome {
            annotation: ann.clone(),
            relabels,
            exempt,
        });
    }

    let moves: Vec<(SpeakerSegment, String)> = relabels.iter().map(|r| (r.segment.clone(), r.to.clone())).collect();
    let annotation = relabel_segments(ann, &moves);
    Ok(SvOutcome {
        annotation,
        relabels,
        exempt,
    })
}

/// Moves each `(segment, new speaker)` span from the segment's speaker to the new one.
pub fn relabel_segments(ann: &DiarizationAnnotation, moves: &[(SpeakerSegment, String)]) -> DiarizationAnnotation {
    let mut intervals = ann.intervals_by_speaker();
    for (seg, to) in moves {
        let (a, b) = (seg.start_s, seg.end_s);
        if let Some(list) = intervals.get_mut(&seg.speaker) {
            *list = list
                .iter()
                .flat_map(|&(x, y)| {
                    if y <= a + TIME_EPS || x >= b - TIME_EPS {
                        vec![(x, y)]
                    } else {
                        [(x, a), (b, y)].into_iter().filter(|(p, q)| q - p > TIME_EPS).collect()
                    }
                })
                .collect();
        }
        intervals.entry(to.clone()).or_default().push((a, b));
    }
    intervals.retain(|_, v| !v.is_empty());
    DiarizationAnnotation::from_intervals(&ann.session_id, &intervals)
}
