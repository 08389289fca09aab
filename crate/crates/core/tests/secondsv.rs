mod common;

use std::collections::BTreeMap;

use avsd_core::rttm::{annotation_to_labels, DiarizationAnnotation};
use avsd_core::secondsv::{correct_speakers, single_speaker_segments, SegmentEmbedder, SvConfig};
use avsd_core::Result;
use proptest::prelude::*;

/// Random annotation on the 10 ms grid.
fn grid_annotation(spans: &[(usize, u32, u32)]) -> DiarizationAnnotation {
    let mut a = DiarizationAnnotation::new("s");
    for &(s, on, dur) in spans {
        a.push(&format!("spk{}", s), on as f64 * 0.01, dur as f64 * 0.01).unwrap();
    }
    a.normalize();
    a
}

fn spans() -> impl Strategy<Value = Vec<(usize, u32, u32)>> {
    prop::collection::vec((0usize..3, 0u32..400, 1u32..120), 0..14)
}

/// Per-frame "exactly one speaker active" runs, tagged with that speaker.
fn frame_oracle(ann: &DiarizationAnnotation, min_frames: usize) -> Vec<(String, usize, usize)> {
    let names = ann.speakers();
    let frames = (ann.end_s() / 0.01).round() as usize;
    let labels = annotation_to_labels(ann, &names, 0.01, frames).unwrap();
    let mut out: Vec<(String, usize, usize)> = Vec::new();
    for t in 0..frames {
        let active: Vec<usize> = (0..names.len()).filter(|&s| labels.get(s, t)).collect();
        if active.len() == 1 {
            let n = &names[active[0]];
            match out.last_mut() {
                Some(last) if &last.0 == n && last.2 == t => last.2 = t + 1,
                _ => out.push((n.clone(), t, t + 1)),
            }
        }
    }
    out.retain(|r| r.2 - r.1 >= min_frames);
    out
}

/// Deterministic pseudo-embedding of a time span.
struct Hashed;

impl SegmentEmbedder for Hashed {
    fn embed(&self, start_s: f64, end_s: f64) -> Result<Vec<f64>> {
        let x = (start_s * 1000.0).round() as u64 * 31 + (end_s * 1000.0).round() as u64;
        let h = avsd_nn::fnv1a(&x.to_le_bytes());
        Ok((0..4).map(|i| ((h >> (i * 16)) & 0xffff) as f64 / 65535.0 - 0.5).collect())
    }
}

proptest! {
    #[test]
    fn single_speaker_segments_match_frame_oracle(sp in spans(), min_frames in 0usize..40) {
        let ann = grid_annotation(&sp);
        let got: Vec<(String, usize, usize)> = single_speaker_segments(&ann, min_frames as f64 * 0.01)
            .into_iter()
            .map(|s| (s.speaker, (s.start_s / 0.01).round() as usize, (s.end_s / 0.01).round() as usize))
            .collect();
        prop_assert_eq!(got, frame_oracle(&ann, min_frames.max(1)));
    }

    #[test]
    fn infinite_margin_is_identity(sp in spans()) {
        let ann = grid_annotation(&sp);
        let cfg = SvConfig { reassign_margin: f64::INFINITY, min_segment_s: 0.05, ..Default::default() };
        let out = correct_speakers(&ann, &Hashed, &cfg).unwrap();
        prop_assert!(out.relabels.is_empty());
        prop_assert_eq!(out.annotation, ann);
    }

    #[test]
    fn relabeling_preserves_speech_and_speaker_set(sp in spans(), margin in 0.0f64..0.5) {
        let ann = grid_annotation(&sp);
        let cfg = SvConfig { reassign_margin: margin, min_segment_s: 0.05, enroll_k: 2 };
        let out = correct_speakers(&ann, &Hashed, &cfg).unwrap();
        let input: std::collections::BTreeSet<String> = ann.speakers().into_iter().collect();
        prop_assert!(out.annotation.speakers().iter().all(|s| input.contains(s)));
        // merging only fuses coincident boundaries, so the covered time is unchanged
        let cover = |a: &DiarizationAnnotation| {
            let names = a.speakers();
            let frames = (a.end_s() / 0.01).round() as usize;
            let l = annotation_to_labels(a, &names, 0.01, frames).unwrap();
            (0..frames).filter(|&t| (0..names.len()).any(|s| l.get(s, t))).count()
        };
        prop_assert_eq!(cover(&out.annotation), cover(&ann));
        // relabeled spans keep one speaker each, so per-frame speaker counts are unchanged
        prop_assert!((out.annotation.total_speech_s() - ann.total_speech_s()).abs() < 1e-6);
        if out.relabels.is_empty() {
            let again = correct_speakers(&out.annotation, &Hashed, &cfg).unwrap();
            prop_assert!(again.relabels.is_empty());
        }
    }
}

/// Embeds every span as its true owner's direction.
struct ByOwner(BTreeMap<u64, Vec<f64>>);

impl SegmentEmbedder for ByOwner {
    fn embed(&self, start_s: f64, _end_s: f64) -> Result<Vec<f64>> {
        Ok(self.0[&((start_s * 100.0).round() as u64)].clone())
    }
}

#[test]
fn segment_at_its_own_centroid_is_never_relabeled() {
    let ann = grid_annotation(&[(0, 0, 100), (1, 150, 100), (0, 300, 100), (1, 450, 100)]);
    let e = ByOwner(BTreeMap::from([
        (0, vec![1.0, 0.0]),
        (150, vec![0.0, 1.0]),
        (300, vec![1.0, 0.0]),
        (450, vec![0.0, 1.0]),
    ]));
    let out = correct_speakers(&ann, &e, &SvConfig { reassign_margin: 0.0, ..Default::default() }).unwrap();
    assert!(out.relabels.is_empty());
    assert_eq!(out.annotation, ann);
}

#[test]
fn second_pass_after_a_fix_changes_nothing() {
    let ann = grid_annotation(&[(0, 0, 100), (1, 150, 100), (0, 300, 100), (1, 450, 100), (0, 600, 60)]);
    let e = ByOwner(BTreeMap::from([
        (0, vec![1.0, 0.0]),
        (150, vec![0.0, 1.0]),
        (300, vec![1.0, 0.0]),
        (450, vec![0.0, 1.0]),
        (600, vec![0.1, 1.0]),
    ]));
    let cfg = SvConfig { enroll_k: 2, ..Default::default() };
    let first = correct_speakers(&ann, &e, &cfg).unwrap();
    assert_eq!(first.relabels.len(), 1);
    assert_eq!(first.relabels[0].to, "spk1");
    let second = correct_speakers(&first.annotation, &e, &cfg).unwrap();
    assert!(second.relabels.is_empty());
}

#[test]
fn invalid_config_rejected() {
    let ann = grid_annotation(&[(0, 0, 100)]);
    for cfg in [
        SvConfig { min_segment_s: 0.0, ..Default::default() },
        SvConfig { reassign_margin: -0.1, ..Default::default() },
        SvConfig { enroll_k: 0, ..Default::default() },
    ] {
        assert!(correct_speakers(&ann, &Hashed, &cfg).is_err());
    }
}
