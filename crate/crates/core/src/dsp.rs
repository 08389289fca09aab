//! Log-Mel filterbank features.
//!
//! Frames are cut without padding (a trailing partial frame is dropped), each
//! frame is Hann-windowed, transformed with a zero-padded FFT of the next
//! power-of-two size, and its power spectrum is pooled by triangular filters
//! on the HTK Mel scale before a natural log with an energy floor.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{CoreError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN_S: f64 = 0.025;
pub const FRAME_HOP_S: f64 = 0.010;
pub const DEFAULT_N_MELS: usize = 80;
pub const ENERGY_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(CoreError::input("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(CoreError::input(format!("sample {} is not finite", i)));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Samples in `[start_s, end_s)`, clipped to the signal.
    pub fn crop(&self, start_s: f64, end_s: f64) -> AudioSignal {
        let sr = self.sample_rate_hz as f64;
        let a = ((start_s * sr).round().max(0.0) as usize).min(self.samples.len());
        let b = ((end_s * sr).round().max(0.0) as usize).clamp(a, self.samples.len());
        AudioSignal {
            samples: self.samples[a..b].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// `T × M` log-Mel energies plus the framing that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelFeatures {
    values: Vec<f64>,
    frames: usize,
    n_mels: usize,
    pub frame_hop_s: f64,
    pub frame_len_s: f64,
    pub sample_rate_hz: u32,
}

impl LogMelFeatures {
    pub fn new(values: Vec<f64>, frames: usize, n_mels: usize, frame_hop_s: f64, frame_len_s: f64, sample_rate_hz: u32) -> Result<Self> {
        if values.len() != frames * n_mels {
            return Err(CoreError::input(format!("{} values for {}×{} features", values.len(), frames, n_mels)));
        }
        Ok(Self {
            values,
            frames,
            n_mels,
            frame_hop_s,
            frame_len_s,
            sample_rate_hz,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Frames `start..end` as a new feature block.
    pub fn slice(&self, start: usize, end: usize) -> LogMelFeatures {
        let end = end.min(self.frames);
        let start = start.min(end);
        LogMelFeatures {
            values: self.values[start * self.n_mels..end * self.n_mels].to_vec(),
            frames: end - start,
            n_mels: self.n_mels,
            frame_hop_s: self.frame_hop_s,
            frame_len_s: self.frame_len_s,
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

fn samples_for(seconds: f64, sr: u32) -> usize {
    (seconds * sr as f64).round() as usize
}

/// Number of whole frames that fit in `len` samples.
pub fn num_frames(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len || hop == 0 {
        0
    } else {
        1 + (len - frame_len) / hop
    }
}

/// Splits a signal into frames starting every `frame_hop_s`; frames that
/// would overrun the end are dropped.
pub fn frame_signal(signal: &AudioSignal, frame_len_s: f64, frame_hop_s: f64) -> Result<Vec<&[f64]>> {
    if !(frame_hop_s > 0.0 && frame_len_s >= frame_hop_s) {
        return Err(CoreError::config(format!(
            "need frame_len ≥ frame_hop > 0, got {} / {}",
            frame_len_s, frame_hop_s
        )));
    }
    let sr = signal.sample_rate_hz();
    let win = samples_for(frame_len_s, sr);
    let hop = samples_for(frame_hop_s, sr).max(1);
    if win == 0 {
        return Err(CoreError::config("frame length rounds to zero samples"));
    }
    if signal.len() < win {
        return Err(CoreError::SignalTooShort {
            samples: signal.len(),
            needed: win,
        });
    }
    let n = num_frames(signal.len(), win, hop);
    Ok((0..n).map(|i| &signal.samples()[i * hop..i * hop + win]).collect())
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of `n_mels` filters evenly spaced in Mel between
/// 0 Hz and Nyquist.
pub fn mel_center_frequencies(n_mels: usize, sample_rate_hz: u32) -> Vec<f64> {
    mel_edges(n_mels, sample_rate_hz)[1..=n_mels].to_vec()
}

fn mel_edges(n_mels: usize, sample_rate_hz: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Row-major `n_mels × (fft_size/2 + 1)` matrix of unnormalized triangles
/// (peak 1 at the center frequency).
pub fn mel_filterbank_matrix(n_mels: usize, fft_size: usize, sample_rate_hz: u32) -> Result<Vec<Vec<f64>>> {
    if n_mels == 0 {
        return Err(CoreError::config("n_mels must be at least 1"));
    }
    if fft_size < 2 {
        return Err(CoreError::config("fft size must be at least 2"));
    }
    let bins = fft_size / 2 + 1;
    let edges = mel_edges(n_mels, sample_rate_hz);
    let bin_hz = sample_rate_hz as f64 / fft_size as f64;
    let mut fb = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row: Vec<f64> = (0..bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (center - lo);
                let down = (hi - f) / (hi - center);
                up.min(down).max(0.0)
            })
            .collect();
        if row.iter().all(|&w| w == 0.0) {
            return Err(CoreError::config(format!(
                "{} mel filters are too many for fft size {}: filter {} covers no bin",
                n_mels, fft_size, m
            )));
        }
        fb.push(row);
    }
    Ok(fb)
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// 80-dim (by default) log-Mel features at 25 ms / 10 ms.
pub fn log_mel(signal: &AudioSignal, n_mels: usize) -> Result<LogMelFeatures> {
    log_mel_with(signal, n_mels, FRAME_LEN_S, FRAME_HOP_S)
}

pub fn log_mel_with(signal: &AudioSignal, n_mels: usize, frame_len_s: f64, frame_hop_s: f64) -> Result<LogMelFeatures> {
    let frames = frame_signal(signal, frame_len_s, frame_hop_s)?;
    let win_len = frames[0].len();
    let fft_size = win_len.next_power_of_two();
    let fb = mel_filterbank_matrix(n_mels, fft_size, signal.sample_rate_hz())?;
    let window = hann(win_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let bins = fft_size / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut values = Vec::with_capacity(frames.len() * n_mels);
    for frame in &frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win_len {
                Complex::new(frame[i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for row in &fb {
            let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            values.push(e.max(ENERGY_FLOOR).ln());
        }
    }
    LogMelFeatures::new(values, frames.len(), n_mels, frame_hop_s, frame_len_s, signal.sample_rate_hz())
}

pub const LMEL_MAGIC: &[u8; 4] = b"LMEL";

/// Writes `magic, u32 T, u32 M, f64 hop, f64 win` then row-major f32 values.
pub fn write_matrix_dump<W: Write>(mut w: W, magic: &[u8; 4], rows: usize, cols: usize, hop: f64, win: f64, values: &[f64]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(rows as u32)?;
    w.write_u32::<LittleEndian>(cols as u32)?;
    w.write_f64::<LittleEndian>(hop)?;
    w.write_f64::<LittleEndian>(win)?;
    for &v in values {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()
}

pub struct MatrixDump {
    pub rows: usize,
    pub cols: usize,
    pub hop: f64,
    pub win: f64,
    pub values: Vec<f64>,
}

pub fn read_matrix_dump<R: Read>(mut r: R, magic: &[u8; 4], format: &'static str) -> Result<MatrixDump> {
    let bad = |m: &str| CoreError::format(format, m.to_string());
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(|_| bad("missing header"))?;
    if &got != magic {
        return Err(bad("wrong magic"));
    }
    let rows = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let hop = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    let win = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    let mut raw = vec![0f32; rows * cols];
    r.read_f32_into::<LittleEndian>(&mut raw).map_err(|_| bad("truncated values"))?;
    Ok(MatrixDump {
        rows,
        cols,
        hop,
        win,
        values: raw.into_iter().map(f64::from).collect(),
    })
}

pub fn save_features(feats: &LogMelFeatures, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    write_matrix_dump(BufWriter::new(f), LMEL_MAGIC, feats.frames, feats.n_mels, feats.frame_hop_s, feats.frame_len_s, &feats.values)
        .map_err(|e| CoreError::io(path, e))
}

pub fn load_features(path: &Path, sample_rate_hz: u32) -> Result<LogMelFeatures> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let d = read_matrix_dump(BufReader::new(f), LMEL_MAGIC, "LMEL")?;
    LogMelFeatures::new(d.values, d.rows, d.cols, d.hop, d.win, sample_rate_hz)
}
