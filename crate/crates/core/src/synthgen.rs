//! Seeded synthetic meetings: turn-taking activity, harmonic-comb voices in
//! white noise, and activity-driven lip features.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use avsd_nn::seeded_rng;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{log_mel, save_features, AudioSignal, DEFAULT_N_MELS, DEFAULT_SAMPLE_RATE, FRAME_HOP_S};
use crate::error::{CoreError, Result};
use crate::rttm::{labels_to_annotation, write_rttm, DiarizationAnnotation, LabelMatrix};
use crate::wav::save_wav;

pub const LIPF_MAGIC: &[u8; 4] = b"LIPF";
const RAMP_S: f64 = 0.020;
const TALK_S: (f64, f64) = (1.0, 4.0);
const PAUSE_S: (f64, f64) = (0.3, 2.5);
const HANDOVER_S: (f64, f64) = (0.1, 0.8);
/// Fixed seed for per-speaker lip directions so they agree across meetings.
const LIP_DIRECTION_SEED: u64 = 0x5eed_11b5;

pub fn speaker_name(s: usize) -> String {
    format!("spk{}", s)
}

pub fn fundamental_hz(s: usize) -> f64 {
    120.0 + 40.0 * s as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeetingSpec {
    pub num_speakers: usize,
    pub duration_s: f64,
    pub overlap_ratio: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub video_fps: f64,
    pub lip_dim: usize,
    /// Length of the direction vector added to lip frames during speech.
    pub lip_amplitude: f64,
    pub sample_rate_hz: u32,
}

impl Default for MeetingSpec {
    fn default() -> Self {
        Self {
            num_speakers: 2,
            duration_s: 60.0,
            overlap_ratio: 0.2,
            snr_db: 10.0,
            seed: 0,
            video_fps: 25.0,
            lip_dim: 16,
            lip_amplitude: 3.0,
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl MeetingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 {
            return Err(CoreError::config("a meeting needs at least one speaker"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(CoreError::config(format!("duration must be positive, got {}", self.duration_s)));
        }
        if !(0.0..=0.5).contains(&self.overlap_ratio) {
            return Err(CoreError::config(format!("overlap ratio must lie in [0, 0.5], got {}", self.overlap_ratio)));
        }
        if !(self.video_fps > 0.0) || self.lip_dim == 0 {
            return Err(CoreError::config("video fps and lip dimension must be positive"));
        }
        if !self.snr_db.is_finite() {
            return Err(CoreError::config("snr_db must be finite"));
        }
        Ok(())
    }

    fn label_frames(&self) -> usize {
        (self.duration_s / FRAME_HOP_S).round() as usize
    }
}

/// One speaker's lip feature stream (`frames × dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct LipFeatures {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl LipFeatures {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Clone, Debug)]
pub struct Meeting {
    pub audio: AudioSignal,
    /// Indexed like `annotation` speakers: `spk0`, `spk1`, ...
    pub lips: Vec<LipFeatures>,
    pub annotation: DiarizationAnnotation,
    pub labels: LabelMatrix,
}

/// Fraction of speech time (at least one speaker) with two or more speakers active.
pub fn overlap_fraction(labels: &LabelMatrix) -> f64 {
    let (mut speech, mut overlap) = (0usize, 0usize);
    for t in 0..labels.frames {
        let n = (0..labels.num_speakers()).filter(|&s| labels.get(s, t)).count();
        speech += (n >= 1) as usize;
        overlap += (n >= 2) as usize;
    }
    if speech == 0 {
        0.0
    } else {
        overlap as f64 / speech as f64
    }
}

#[derive(Clone, Copy)]
enum State {
    Talking(usize),
    /// Waiting until the timer runs out.
    Pausing(usize),
    /// Ready to speak, holding back while overlap is above target.
    Waiting,
}

/// Turn-taking on the 10 ms grid. A speaker whose pause ends starts at once if
/// the floor is free, barges in if measured overlap is below target, and
/// otherwise waits for a short handover pause after the floor frees up.
fn schedule<R: Rng>(spec: &MeetingSpec, rng: &mut R) -> LabelMatrix {
    let frames = spec.label_frames();
    let names = (0..spec.num_speakers).map(speaker_name).collect();
    let mut labels = LabelMatrix::zeros(names, frames, FRAME_HOP_S);
    let dur = |rng: &mut R, (lo, hi): (f64, f64)| ((rng.random_range(lo..hi) / FRAME_HOP_S).round() as usize).max(1);
    let mut state: Vec<State> = (0..spec.num_speakers).map(|_| State::Pausing(dur(rng, HANDOVER_S))).collect();
    let (mut speech, mut overlap) = (0usize, 0usize);
    for t in 0..frames {
        let talking_before = state.iter().filter(|s| matches!(s, State::Talking(_))).count();
        let ratio = if speech == 0 { 0.0 } else { overlap as f64 / speech as f64 };
        let mut free = talking_before == 0;
        for s in 0..spec.num_speakers {
            state[s] = match state[s] {
                State::Talking(left) if left > 1 => State::Talking(left - 1),
                State::Talking(_) => State::Pausing(dur(rng, PAUSE_S)),
                State::Pausing(left) if left > 1 => State::Pausing(left - 1),
                State::Pausing(_) | State::Waiting => {
                    if free || ratio < spec.overlap_ratio {
                        free = false;
                        State::Talking(dur(rng, TALK_S))
                    } else {
                        State::Waiting
                    }
                }
            };
        }
        let talking_now = state.iter().filter(|s| matches!(s, State::Talking(_))).count();
        if talking_now == 0 {
            // Floor just freed: give waiting speakers a handover pause.
            for st in state.iter_mut() {
                if matches!(st, State::Waiting) {
                    *st = State::Pausing(dur(rng, HANDOVER_S));
                }
            }
        }
        for (s, st) in state.iter().enumerate() {
            if matches!(st, State::Talking(_)) {
                labels.set(s, t, true);
            }
        }
        speech += (talking_now >= 1) as usize;
        overlap += (talking_now >= 2) as usize;
    }
    labels
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Fixed unit direction for speaker `s`, identical in every meeting.
pub fn lip_direction(s: usize, dim: usize) -> Vec<f64> {
    unit_vector(&mut seeded_rng(LIP_DIRECTION_SEED, &format!("lip-direction-{}-{}", s, dim)), dim)
}

/// Per-sample envelope with linear ramps of `RAMP_S` inside each active run.
fn envelope(row: &[u8], samples: usize, sr: u32) -> Vec<f64> {
    let per_frame = FRAME_HOP_S * sr as f64;
    let ramp = (RAMP_S * sr as f64).round().max(1.0);
    let mut env = vec![0.0; samples];
    for (a, b) in crate::rttm::active_runs(row.iter().map(|&v| v != 0)) {
        let sa = ((a as f64 * per_frame).round() as usize).min(samples);
        let sb = ((b as f64 * per_frame).round() as usize).min(samples);
        for (i, e) in env[sa..sb].iter_mut().enumerate() {
            let from_start = (i as f64 + 0.5) / ramp;
            let to_end = ((sb - sa - i) as f64 - 0.5) / ramp;
            *e = from_start.min(to_end).min(1.0);
        }
    }
    env
}

fn harmonic_comb<R: Rng>(f0: f64, samples: usize, sr: u32, rng: &mut R) -> Vec<f64> {
    let nyq = sr as f64 / 2.0;
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|k| (k as f64 * f0, 1.0 / k as f64))
        .take_while(|&(f, _)| f < nyq * 0.9)
        .map(|(f, a)| (f, a, rng.random_range(0.0..2.0 * PI)))
        .collect();
    let mut out = vec![0.0; samples];
    for (f, a, ph) in harmonics {
        // sin((n+1)w + ph) = 2cos(w) sin(nw + ph) - sin((n-1)w + ph)
        let w = 2.0 * PI * f / sr as f64;
        let c = 2.0 * w.cos();
        let (mut prev, mut cur) = ((ph - w).sin(), ph.sin());
        for o in out.iter_mut() {
            *o += a * cur;
            let next = c * cur - prev;
            prev = cur;
            cur = next;
        }
    }
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / samples.max(1) as f64).sqrt();
    if rms > 0.0 {
        for v in &mut out {
            *v /= rms;
        }
    }
    out
}

pub fn generate_meeting(spec: &MeetingSpec) -> Result<Meeting> {
    spec.validate()?;
    let labels = schedule(spec, &mut seeded_rng(spec.seed, "activity"));
    let annotation = labels_to_annotation(&labels, "");
    let sr = spec.sample_rate_hz;
    let samples = (spec.duration_s * sr as f64).round() as usize;

    let mut phase_rng = seeded_rng(spec.seed, "phases");
    let mut mix = vec![0.0; samples];
    for s in 0..spec.num_speakers {
        let env = envelope(labels.row(s), samples, sr);
        let comb = harmonic_comb(fundamental_hz(s), samples, sr, &mut phase_rng);
        for ((m, e), c) in mix.iter_mut().zip(&env).zip(&comb) {
            *m += e * c;
        }
    }
    let power = mix.iter().map(|x| x * x).sum::<f64>() / samples.max(1) as f64;
    let noise_std = if power > 0.0 { (power / 10f64.powf(spec.snr_db / 10.0)).sqrt() } else { 0.1 };
    let mut noise_rng = seeded_rng(spec.seed, "noise");
    for m in &mut mix {
        *m += noise_std * noise_rng.sample::<f64, _>(StandardNormal);
    }
    let peak = mix.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    let audio = AudioSignal::new(mix.into_iter().map(|x| x * gain).collect(), sr)?;

    let lip_frames = (spec.duration_s * spec.video_fps).round() as usize;
    let per_video = 1.0 / (spec.video_fps * FRAME_HOP_S);
    let mut lip_rng = seeded_rng(spec.seed, "lips");
    let lips = (0..spec.num_speakers)
        .map(|s| {
            let dir = lip_direction(s, spec.lip_dim);
            let row = labels.row(s);
            let mut values = Vec::with_capacity(lip_frames * spec.lip_dim);
            for j in 0..lip_frames {
                let a = ((j as f64 * per_video).round() as usize).min(row.len());
                let b = (((j + 1) as f64 * per_video).round() as usize).clamp(a, row.len());
                let act = if b > a { row[a..b].iter().map(|&v| v as f64).sum::<f64>() / (b - a) as f64 } else { 0.0 };
                for d in &dir {
                    values.push(spec.lip_amplitude * act * d + lip_rng.sample::<f64, _>(StandardNormal));
                }
            }
            LipFeatures {
                frames: lip_frames,
                dim: spec.lip_dim,
                values,
            }
        })
        .collect();

    Ok(Meeting {
        audio,
        lips,
        annotation,
        labels,
    })
}

pub fn write_lip<W: Write>(lips: &LipFeatures, mut w: W) -> std::io::Result<()> {
    w.write_all(LIPF_MAGIC)?;
    w.write_u32::<LittleEndian>(lips.frames as u32)?;
    w.write_u32::<LittleEndian>(lips.dim as u32)?;
    for &v in &lips.values {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()
}

pub fn read_lip<R: Read>(mut r: R) -> Result<LipFeatures> {
    let bad = |m: &str| CoreError::format("LIPF", m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("missing header"))?;
    if &magic != LIPF_MAGIC {
        return Err(bad("wrong magic"));
    }
    let frames = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let mut raw = vec![0f32; frames * dim];
    r.read_f32_into::<LittleEndian>(&mut raw).map_err(|_| bad("truncated values"))?;
    Ok(LipFeatures {
        frames,
        dim,
        values: raw.into_iter().map(f64::from).collect(),
    })
}

pub fn save_lip(lips: &LipFeatures, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    write_lip(lips, BufWriter::new(f)).map_err(|e| CoreError::io(path, e))
}

pub fn load_lip(path: &Path) -> Result<LipFeatures> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_lip(BufReader::new(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub session: String,
    pub split: Split,
    pub duration_s: f64,
    pub speakers: Vec<String>,
    pub wav: PathBuf,
    pub features: PathBuf,
    pub rttm: PathBuf,
    pub lips: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| CoreError::format("manifest", format!("{}:{}: {}", path.display(), i + 1, e)))?;
        records.push(rec);
    }
    Ok(Manifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        records,
    })
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CoreError::Internal(e.to_string()))?;
        writeln!(w, "{}", line).map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Seed of meeting `index` in a corpus generated with `seed`.
pub fn meeting_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ avsd_nn::fnv1a(format!("meeting-{}", index).as_bytes())
}

/// Writes `n` meetings plus `manifest.jsonl` into `dir`. The last
/// `round(n · dev_fraction)` meetings form the dev split.
pub fn generate_corpus(dir: &Path, n: usize, template: &MeetingSpec, seed: u64, dev_fraction: f64) -> Result<Manifest> {
    if n == 0 {
        return Err(CoreError::config("corpus needs at least one meeting"));
    }
    if !(0.0..=1.0).contains(&dev_fraction) {
        return Err(CoreError::config(format!("dev fraction must lie in [0, 1], got {}", dev_fraction)));
    }
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let n_dev = (n as f64 * dev_fraction).round() as usize;
    let records = (0..n)
        .map(|i| {
            let spec = MeetingSpec {
                seed: meeting_seed(seed, i),
                ..template.clone()
            };
            let id = format!("meeting{:03}", i);
            let mut m = generate_meeting(&spec)?;
            m.annotation.session_id = id.clone();
            let rel = |ext: &str| PathBuf::from(format!("{}.{}", id, ext));
            save_wav(&m.audio, &dir.join(rel("wav")))?;
            save_features(&log_mel(&m.audio, DEFAULT_N_MELS)?, &dir.join(rel("lmel")))?;
            let rttm_path = dir.join(rel("rttm"));
            fs::write(&rttm_path, write_rttm([&m.annotation])).map_err(|e| CoreError::io(&rttm_path, e))?;
            let mut lips = BTreeMap::new();
            for (s, l) in m.lips.iter().enumerate() {
                let p = PathBuf::from(format!("{}_{}.lipf", id, speaker_name(s)));
                save_lip(l, &dir.join(&p))?;
                lips.insert(speaker_name(s), p);
            }
            Ok(ManifestRecord {
                split: if i >= n - n_dev { Split::Dev } else { Split::Train },
                duration_s: spec.duration_s,
                speakers: (0..spec.num_speakers).map(speaker_name).collect(),
                wav: rel("wav"),
                features: rel("lmel"),
                rttm: rel("rttm"),
                lips,
                session: id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&records, &dir.join(MANIFEST_FILE))?;
    Ok(Manifest {
        root: dir.to_path_buf(),
        records,
    })
}
