//! 16-bit PCM mono WAV, the only audio container the toolkit reads or writes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::dsp::AudioSignal;
use crate::error::{CoreError, Result};

const SUPPORTED_RATES: [u32; 2] = [8_000, 16_000];

pub fn write_wav<W: Write>(signal: &AudioSignal, mut w: W) -> std::io::Result<()> {
    let data_len = (signal.len() * 2) as u32;
    let sr = signal.sample_rate_hz();
    w.write_all(b"RIFF")?;
    w.write_u32::<LittleEndian>(36 + data_len)?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_u32::<LittleEndian>(16)?;
    w.write_u16::<LittleEndian>(1)?; // PCM
    w.write_u16::<LittleEndian>(1)?; // mono
    w.write_u32::<LittleEndian>(sr)?;
    w.write_u32::<LittleEndian>(sr * 2)?;
    w.write_u16::<LittleEndian>(2)?;
    w.write_u16::<LittleEndian>(16)?;
    w.write_all(b"data")?;
    w.write_u32::<LittleEndian>(data_len)?;
    for &s in signal.samples() {
        w.write_i16::<LittleEndian>(quantize(s))?;
    }
    w.flush()
}

fn quantize(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn read_wav<R: Read>(mut r: R) -> Result<AudioSignal> {
    let bad = |m: &str| CoreError::format("WAV", m.to_string());
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag).map_err(|_| bad("missing RIFF header"))?;
    if &tag != b"RIFF" {
        return Err(bad("not a RIFF file"));
    }
    r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    r.read_exact(&mut tag).map_err(|_| bad("truncated header"))?;
    if &tag != b"WAVE" {
        return Err(bad("not a WAVE file"));
    }
    let mut rate = None;
    loop {
        if r.read_exact(&mut tag).is_err() {
            return Err(bad("no data chunk"));
        }
        let len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated chunk header"))? as usize;
        match &tag {
            b"fmt " => {
                let mut body = vec![0u8; len];
                r.read_exact(&mut body).map_err(|_| bad("truncated fmt chunk"))?;
                let mut b = body.as_slice();
                let format = b.read_u16::<LittleEndian>().map_err(|_| bad("short fmt chunk"))?;
                let channels = b.read_u16::<LittleEndian>().map_err(|_| bad("short fmt chunk"))?;
                let sr = b.read_u32::<LittleEndian>().map_err(|_| bad("short fmt chunk"))?;
                b.read_u32::<LittleEndian>().map_err(|_| bad("short fmt chunk"))?;
                b.read_u16::<LittleEndian>().map_err(|_| bad("short fmt chunk"))?;
                let bits = b.read_u16::<LittleEndian>().map_err(|_| bad("short fmt chunk"))?;
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(bad(&format!(
                        "need 16-bit PCM mono, got format {} with {} channels at {} bits",
                        format, channels, bits
                    )));
                }
                if !SUPPORTED_RATES.contains(&sr) {
                    return Err(bad(&format!("unsupported sample rate {}", sr)));
                }
                rate = Some(sr);
                if len % 2 == 1 {
                    r.read_u8().ok();
                }
            }
            b"data" => {
                let sr = rate.ok_or_else(|| bad("data chunk before fmt chunk"))?;
                let mut raw = vec![0i16; len / 2];
                r.read_i16_into::<LittleEndian>(&mut raw).map_err(|_| bad("truncated data chunk"))?;
                let samples = raw.into_iter().map(|s| s as f64 / 32767.0).collect();
                return AudioSignal::new(samples, sr);
            }
            _ => {
                let skip = len + len % 2;
                std::io::copy(&mut (&mut r).take(skip as u64), &mut std::io::sink()).map_err(|_| bad("truncated chunk"))?;
            }
        }
    }
}

pub fn save_wav(signal: &AudioSignal, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    write_wav(signal, BufWriter::new(f)).map_err(|e| CoreError::io(path, e))
}

pub fn load_wav(path: &Path) -> Result<AudioSignal> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_wav(BufReader::new(f))
}
