#![allow(dead_code)]

use avsd_core::rttm::DiarizationAnnotation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Oracle {
    pub miss_ms: i64,
    pub fa_ms: i64,
    pub spkerr_ms: i64,
    pub ref_ms: i64,
}

fn ms_sets(ann: &DiarizationAnnotation, names: &[String], end: i64) -> Vec<Vec<bool>> {
    names
        .iter()
        .map(|n| {
            let mut v = vec![false; end as usize];
            for (a, b) in ann.intervals(n) {
                let (a, b) = ((a * 1000.0).round() as i64, (b * 1000.0).round() as i64);
                for t in a..b {
                    v[t as usize] = true;
                }
            }
            v
        })
        .collect()
}

/// Every injective map from `nh` hypothesis labels into `nr` references (None = unmapped).
fn all_maps(nh: usize, nr: usize) -> Vec<Vec<Option<usize>>> {
    fn rec(i: usize, nh: usize, nr: usize, cur: &mut Vec<Option<usize>>, used: &mut Vec<bool>, out: &mut Vec<Vec<Option<usize>>>) {
        if i == nh {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        rec(i + 1, nh, nr, cur, used, out);
        cur.pop();
        for r in 0..nr {
            if !used[r] {
                used[r] = true;
                cur.push(Some(r));
                rec(i + 1, nh, nr, cur, used, out);
                cur.pop();
                used[r] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, nh, nr, &mut Vec::new(), &mut vec![false; nr], &mut out);
    out
}

/// Millisecond-by-millisecond DER counts. `optimal` searches all mappings,
/// otherwise labels are matched by name.
pub fn brute_force(reference: &DiarizationAnnotation, hypothesis: &DiarizationAnnotation, collar_s: f64, optimal: bool) -> Oracle {
    let rn = reference.speakers();
    let hn = hypothesis.speakers();
    let c = (collar_s * 1000.0).round() as i64;
    let end = ((reference.end_s().max(hypothesis.end_s()) * 1000.0).round() as i64) + c + 2;
    let r = ms_sets(reference, &rn, end);
    let h = ms_sets(hypothesis, &hn, end);
    let mut excluded = vec![false; end as usize];
    if c > 0 {
        for n in &rn {
            for (a, b) in reference.intervals(n) {
                for bnd in [(a * 1000.0).round() as i64, (b * 1000.0).round() as i64] {
                    for t in (bnd - c).max(0)..(bnd + c).min(end) {
                        excluded[t as usize] = true;
                    }
                }
            }
        }
    }
    let maps = if optimal {
        all_maps(hn.len(), rn.len())
    } else {
        vec![hn.iter().map(|x| rn.iter().position(|y| y == x)).collect()]
    };
    let mut best: Option<Oracle> = None;
    for map in maps {
        let mut o = Oracle { miss_ms: 0, fa_ms: 0, spkerr_ms: 0, ref_ms: 0 };
        for t in 0..end as usize {
            if excluded[t] {
                continue;
            }
            let nr = r.iter().filter(|v| v[t]).count() as i64;
            let nh = h.iter().filter(|v| v[t]).count() as i64;
            let hit = (0..hn.len()).filter(|&j| h[j][t] && map[j].is_some_and(|i| r[i][t])).count() as i64;
            o.ref_ms += nr;
            o.miss_ms += (nr - nh).max(0);
            o.fa_ms += (nh - nr).max(0);
            o.spkerr_ms += nr.min(nh) - hit;
        }
        if best.as_ref().is_none_or(|b| o.spkerr_ms < b.spkerr_ms) {
            best = Some(o);
        }
    }
    best.unwrap()
}

/// Random session with up to `speakers` labels; times are whole milliseconds.
pub fn random_session(rng: &mut ChaCha8Rng, id: &str, speakers: usize, prefix: &str, span_ms: u32) -> DiarizationAnnotation {
    let mut a = DiarizationAnnotation::new(id);
    for s in 0..speakers {
        for _ in 0..rng.random_range(0..6) {
            let on = rng.random_range(0..span_ms);
            let d = rng.random_range(1..span_ms / 4);
            a.push(&format!("{}{}", prefix, s), on as f64 / 1000.0, d as f64 / 1000.0).unwrap();
        }
    }
    a.normalize();
    a
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod model {
    use avsd_core::models::{DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, LipEncoderConfig, ModelConfig, Preset, WindowInputs};
    use avsd_nn::Tensor;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub const N_MELS: usize = 8;

    pub fn small_config(kind: DecoderKind, encoder: EncoderKind, speakers: usize) -> ModelConfig {
        let mut encoder = EncoderConfig::preset(encoder, Preset::Toy, N_MELS);
        if encoder.kind == EncoderKind::ResnetSe {
            encoder.channels = vec![8, 8, 16, 16];
        } else {
            encoder.channels = vec![16];
        }
        encoder.se_channels = 4;
        encoder.embed_dim = 12;
        ModelConfig {
            lip: LipEncoderConfig { input_dim: 6, embed_dim: 8, heads: 2, ffn_dim: 16, ..Default::default() },
            encoder,
            decoder: DecoderConfig { model_dim: 16, ffn_dim: 24, conv_kernel: 5, ..DecoderConfig::toy(kind, speakers) },
        }
    }

    fn randn(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    fn unit(rng: &mut impl Rng, d: usize) -> Tensor {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::matrix(1, d, v.into_iter().map(|x| x / n).collect()).unwrap()
    }

    pub fn random_window(rng: &mut impl Rng, cfg: &ModelConfig, frames: usize) -> WindowInputs {
        let s = cfg.decoder.num_speakers;
        WindowInputs {
            feats: randn(rng, frames, cfg.encoder.n_mels),
            lips: (0..s)
                .map(|_| {
                    let mut t = randn(rng, frames, cfg.lip.embed_dim + 1);
                    for r in 0..frames {
                        t.data_mut()[r * (cfg.lip.embed_dim + 1) + cfg.lip.embed_dim] = 1.0;
                    }
                    t
                })
                .collect(),
            utts: (0..s).map(|_| unit(rng, cfg.encoder.embed_dim)).collect(),
        }
    }

    pub fn random_labels(rng: &mut impl Rng, frames: usize, speakers: usize) -> Tensor {
        Tensor::matrix(frames, speakers, (0..frames * speakers).map(|_| rng.random_range(0..2) as f64).collect()).unwrap()
    }
}
