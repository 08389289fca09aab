//! Diarization error rate on a 1 ms grid.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::rttm::DiarizationAnnotation;

/// Largest speaker count on the smaller side of an optimal mapping.
pub const MAX_MAPPING_SPEAKERS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    /// Hypothesis labels are compared to reference labels of the same name.
    Identity,
    /// One-to-one mapping that maximizes matched speech.
    Optimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoreOptions {
    pub collar_s: f64,
    pub mapping: Mapping,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            collar_s: 0.0,
            mapping: Mapping::Identity,
        }
    }
}

/// Error durations in seconds over the scored region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DerComponents {
    pub miss_s: f64,
    pub false_alarm_s: f64,
    pub speaker_error_s: f64,
    pub reference_s: f64,
}

impl DerComponents {
    fn ratio(&self, v: f64) -> f64 {
        if self.reference_s > 0.0 {
            v / self.reference_s
        } else {
            0.0
        }
    }

    pub fn miss(&self) -> f64 {
        self.ratio(self.miss_s)
    }

    pub fn false_alarm(&self) -> f64 {
        self.ratio(self.false_alarm_s)
    }

    pub fn speaker_error(&self) -> f64 {
        self.ratio(self.speaker_error_s)
    }

    /// DER as a fraction; 0 for an empty reference (which only scores when error free).
    pub fn der(&self) -> f64 {
        self.ratio(self.miss_s + self.false_alarm_s + self.speaker_error_s)
    }

    fn accumulate(&mut self, o: &DerComponents) {
        self.miss_s += o.miss_s;
        self.false_alarm_s += o.false_alarm_s;
        self.speaker_error_s += o.speaker_error_s;
        self.reference_s += o.reference_s;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionScore {
    pub session_id: String,
    #[serde(flatten)]
    pub components: DerComponents,
    pub der: f64,
    /// Hypothesis label to the reference label it was matched with.
    pub mapping: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusScore {
    pub sessions: Vec<SessionScore>,
    pub total: DerComponents,
    pub der: f64,
}

/// DER (in the unit of the inputs) from its three parts.
pub fn der_from_components(false_alarm: f64, miss: f64, speaker_error: f64) -> Result<f64> {
    for (name, v) in [("false alarm", false_alarm), ("miss", miss), ("speaker error", speaker_error)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(CoreError::input(format!("{} must be a non-negative number, got {}", name, v)));
        }
    }
    Ok(false_alarm + miss + speaker_error)
}

fn to_ms(t: f64) -> i64 {
    (t * 1000.0).round() as i64
}

#[derive(Clone, Copy)]
enum Track {
    Ref(usize),
    Hyp(usize),
    Collar,
}

struct Sweep {
    miss: i64,
    fa: i64,
    /// Σ min(|R|, |H|) over time.
    matchable: i64,
    reference: i64,
    /// overlap[r][h] in ms.
    overlap: Vec<Vec<i64>>,
}

fn sweep(
    ref_iv: &[Vec<(i64, i64)>],
    hyp_iv: &[Vec<(i64, i64)>],
    collar: &[(i64, i64)],
) -> Sweep {
    let mut events: Vec<(i64, i32, Track)> = Vec::new();
    let add = |track: Track, ivs: &[(i64, i64)], events: &mut Vec<(i64, i32, Track)>| {
        for &(a, b) in ivs {
            if b > a {
                events.push((a, 1, track));
                events.push((b, -1, track));
            }
        }
    };
    for (i, iv) in ref_iv.iter().enumerate() {
        add(Track::Ref(i), iv, &mut events);
    }
    for (i, iv) in hyp_iv.iter().enumerate() {
        add(Track::Hyp(i), iv, &mut events);
    }
    add(Track::Collar, collar, &mut events);
    events.sort_by_key(|e| e.0);

    let mut r_act = vec![0i32; ref_iv.len()];
    let mut h_act = vec![0i32; hyp_iv.len()];
    let mut c_act = 0i32;
    let mut out = Sweep {
        miss: 0,
        fa: 0,
        matchable: 0,
        reference: 0,
        overlap: vec![vec![0; hyp_iv.len()]; ref_iv.len()],
    };
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            let (_, d, tr) = events[i];
            match tr {
                Track::Ref(k) => r_act[k] += d,
                Track::Hyp(k) => h_act[k] += d,
                Track::Collar => c_act += d,
            }
            i += 1;
        }
        let Some(&(next, _, _)) = events.get(i) else { break };
        let len = next - t;
        if len == 0 || c_act > 0 {
            continue;
        }
        let nr = r_act.iter().filter(|&&c| c > 0).count() as i64;
        let nh = h_act.iter().filter(|&&c| c > 0).count() as i64;
        out.reference += nr * len;
        out.miss += (nr - nh).max(0) * len;
        out.fa += (nh - nr).max(0) * len;
        out.matchable += nr.min(nh) * len;
        if nr > 0 && nh > 0 {
            for (r, &ra) in r_act.iter().enumerate() {
                if ra > 0 {
                    for (h, &ha) in h_act.iter().enumerate() {
                        if ha > 0 {
                            out.overlap[r][h] += len;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Injective assignment maximizing Σ `w[r][h]`, returned as `(r, h)` pairs.
pub fn optimal_assignment(w: &[Vec<i64>]) -> Result<Vec<(usize, usize)>> {
    let nr = w.len();
    let nh = w.first().map_or(0, Vec::len);
    if nr == 0 || nh == 0 {
        return Ok(Vec::new());
    }
    // Iterate over the larger side, keep a bitmask over the smaller.
    let transpose = nr < nh;
    let (outer, inner) = if transpose { (nh, nr) } else { (nr, nh) };
    if inner > MAX_MAPPING_SPEAKERS {
        return Err(CoreError::config(format!(
            "optimal mapping supports at most {} speakers on the smaller side, got {}",
            MAX_MAPPING_SPEAKERS, inner
        )));
    }
    let weight = |o: usize, i: usize| if transpose { w[i][o] } else { w[o][i] };
    let states = 1usize << inner;
    const NEG: i64 = i64::MIN / 4;
    // dp[k][mask]: best value after the first k outer items.
    let mut dp = vec![vec![NEG; states]; outer + 1];
    dp[0][0] = 0;
    for o in 0..outer {
        for mask in 0..states {
            let v = dp[o][mask];
            if v == NEG {
                continue;
            }
            if v > dp[o + 1][mask] {
                dp[o + 1][mask] = v;
            }
            for i in 0..inner {
                if mask & (1 << i) == 0 {
                    let m2 = mask | (1 << i);
                    let cand = v + weight(o, i);
                    if cand > dp[o + 1][m2] {
                        dp[o + 1][m2] = cand;
                    }
                }
            }
        }
    }
    let (mut mask, _) = dp[outer]
        .iter()
        .enumerate()
        .max_by_key(|&(m, &v)| (v, std::cmp::Reverse(m)))
        .map(|(m, &v)| (m, v))
        .unwrap();
    let mut pairs = Vec::new();
    for o in (0..outer).rev() {
        if dp[o][mask] == dp[o + 1][mask] {
            continue;
        }
        let i = (0..inner)
            .find(|&i| mask & (1 << i) != 0 && dp[o][mask ^ (1 << i)] != NEG && dp[o][mask ^ (1 << i)] + weight(o, i) == dp[o + 1][mask])
            .expect("dp backtrack");
        mask ^= 1 << i;
        pairs.push(if transpose { (i, o) } else { (o, i) });
    }
    pairs.reverse();
    Ok(pairs)
}

/// Scores one session.
pub fn score_session(reference: &DiarizationAnnotation, hypothesis: &DiarizationAnnotation, opts: &ScoreOptions) -> Result<SessionScore> {
    if !(opts.collar_s.is_finite() && opts.collar_s >= 0.0) {
        return Err(CoreError::config(format!("collar must be non-negative, got {}", opts.collar_s)));
    }
    let mut reference = reference.clone();
    reference.normalize();
    let mut hypothesis = hypothesis.clone();
    hypothesis.normalize();

    let ref_spk = reference.speakers();
    let hyp_spk = hypothesis.speakers();
    let ms = |ann: &DiarizationAnnotation, s: &str| -> Vec<(i64, i64)> {
        ann.intervals(s).into_iter().map(|(a, b)| (to_ms(a), to_ms(b))).collect()
    };
    let ref_iv: Vec<_> = ref_spk.iter().map(|s| ms(&reference, s)).collect();
    let hyp_iv: Vec<_> = hyp_spk.iter().map(|s| ms(&hypothesis, s)).collect();
    let c = to_ms(opts.collar_s);
    let collar: Vec<(i64, i64)> = if c > 0 {
        ref_iv
            .iter()
            .flatten()
            .flat_map(|&(a, b)| [(a - c, a + c), (b - c, b + c)])
            .collect()
    } else {
        Vec::new()
    };

    let sw = sweep(&ref_iv, &hyp_iv, &collar);
    let pairs: Vec<(usize, usize)> = match opts.mapping {
        Mapping::Optimal => optimal_assignment(&sw.overlap)?,
        Mapping::Identity => hyp_spk
            .iter()
            .enumerate()
            .filter_map(|(h, name)| ref_spk.iter().position(|r| r == name).map(|r| (r, h)))
            .collect(),
    };
    let matched: i64 = pairs.iter().map(|&(r, h)| sw.overlap[r][h]).sum();
    let components = DerComponents {
        miss_s: sw.miss as f64 / 1000.0,
        false_alarm_s: sw.fa as f64 / 1000.0,
        speaker_error_s: (sw.matchable - matched) as f64 / 1000.0,
        reference_s: sw.reference as f64 / 1000.0,
    };
    if sw.reference == 0 && (sw.fa > 0 || sw.miss > 0) {
        return Err(CoreError::input(format!(
            "session `{}`: reference has no scored speech but hypothesis does; DER is undefined",
            reference.session_id
        )));
    }
    Ok(SessionScore {
        session_id: reference.session_id.clone(),
        der: components.der(),
        components,
        mapping: pairs
            .iter()
            .map(|&(r, h)| (hyp_spk[h].clone(), ref_spk[r].clone()))
            .collect(),
    })
}

/// Scores every reference session; a session absent from `hypotheses` is scored
/// against an empty hypothesis. Hypothesis sessions without a reference are an error.
pub fn score_corpus(
    references: &BTreeMap<String, DiarizationAnnotation>,
    hypotheses: &BTreeMap<String, DiarizationAnnotation>,
    opts: &ScoreOptions,
) -> Result<CorpusScore> {
    if let Some(extra) = hypotheses.keys().find(|k| !references.contains_key(*k)) {
        return Err(CoreError::input(format!("hypothesis session `{}` has no reference", extra)));
    }
    let mut sessions = Vec::with_capacity(references.len());
    let mut total = DerComponents::default();
    for (id, r) in references {
        let empty;
        let h = match hypotheses.get(id) {
            Some(h) => h,
            None => {
                empty = DiarizationAnnotation::new(id.clone());
                &empty
            }
        };
        let s = score_session(r, h, opts)?;
        total.accumulate(&s.components);
        sessions.push(s);
    }
    Ok(CorpusScore {
        sessions,
        der: total.der(),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: &str, segs: &[(&str, f64, f64)]) -> DiarizationAnnotation {
        let mut a = DiarizationAnnotation::new(id);
        for &(s, on, d) in segs {
            a.push(s, on, d).unwrap();
        }
        a.normalize();
        a
    }

    #[test]
    fn perfect_hypothesis_scores_zero() {
        let r = ann("S", &[("A", 0.0, 5.0), ("B", 3.0, 4.0)]);
        let s = score_session(&r, &r, &ScoreOptions::default()).unwrap();
        assert_eq!(s.der, 0.0);
        assert_eq!(s.components.reference_s, 9.0);
    }

    #[test]
    fn single_speaker_miss() {
        let r = ann("S", &[("A", 0.0, 10.0)]);
        let h = ann("S", &[("A", 0.0, 6.0)]);
        let s = score_session(&r, &h, &ScoreOptions::default()).unwrap();
        assert!((s.components.miss() - 0.4).abs() < 1e-12);
        assert_eq!(s.components.false_alarm_s, 0.0);
    }

    #[test]
    fn optimal_mapping_fixes_label_swap() {
        let r = ann("S", &[("A", 0.0, 4.0), ("B", 4.0, 4.0)]);
        let h = ann("S", &[("x", 0.0, 4.0), ("y", 4.0, 4.0)]);
        let id = score_session(&r, &h, &ScoreOptions::default()).unwrap();
        assert!((id.der - 1.0).abs() < 1e-12);
        let opt = score_session(&r, &h, &ScoreOptions { mapping: Mapping::Optimal, ..Default::default() }).unwrap();
        assert_eq!(opt.der, 0.0);
        assert_eq!(opt.mapping["x"], "A");
    }

    #[test]
    fn collar_excludes_boundaries() {
        let r = ann("S", &[("A", 1.0, 2.0)]);
        let h = ann("S", &[("A", 1.2, 1.6)]);
        let s = score_session(&r, &h, &ScoreOptions { collar_s: 0.25, ..Default::default() }).unwrap();
        assert_eq!(s.der, 0.0);
        assert!((s.components.reference_s - 1.5).abs() < 1e-12);
    }

    #[test]
    fn empty_reference() {
        let r = DiarizationAnnotation::new("S");
        let s = score_session(&r, &r, &ScoreOptions::default()).unwrap();
        assert_eq!(s.components, DerComponents::default());
        let h = ann("S", &[("A", 0.0, 1.0)]);
        assert!(score_session(&r, &h, &ScoreOptions::default()).is_err());
    }

    #[test]
    fn der_from_components_sums_and_validates() {
        assert!((der_from_components(1.0, 2.0, 3.5).unwrap() - 6.5).abs() < 1e-12);
        assert!(der_from_components(-0.1, 0.0, 0.0).is_err());
        assert!(der_from_components(0.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn assignment_prefers_larger_total() {
        let w = vec![vec![5, 4], vec![4, 0]];
        assert_eq!(optimal_assignment(&w).unwrap(), vec![(0, 1), (1, 0)]);
        let w = vec![vec![1], vec![3], vec![2]];
        assert_eq!(optimal_assignment(&w).unwrap(), vec![(1, 0)]);
    }
}
