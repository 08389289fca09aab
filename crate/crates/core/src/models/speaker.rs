//! Frame-level speaker encoders and the utterance-level extractor built on them.

use avsd_nn::layers::{conv1d, conv1d_specs, linear, linear_specs, squeeze_excite, squeeze_excite_specs};
use avsd_nn::{Graph, ParamSpec, ParameterStore, Tensor, Var};

use super::config::{EncoderConfig, EncoderKind};
use crate::error::{CoreError, Result};

pub const ENCODER_PREFIX: &str = "speaker_encoder";
pub const EXTRACTOR_PREFIX: &str = "speaker_extractor";
const ECAPA_DILATIONS: [usize; 3] = [2, 3, 4];

fn n(prefix: &str, leaf: &str) -> String {
    format!("{}.{}", prefix, leaf)
}

/// Parameters of a frame stack rooted at `prefix`.
pub fn frame_stack_specs(prefix: &str, cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    match cfg.kind {
        EncoderKind::ResnetSe => {
            s.extend(conv1d_specs(&n(prefix, "stem"), 3, cfg.n_mels, cfg.channels[0]));
            let mut prev = cfg.channels[0];
            for (i, &c) in cfg.channels.iter().enumerate() {
                let st = n(prefix, &format!("stage{}", i));
                s.extend(conv1d_specs(&n(&st, "conv1"), 3, prev, c));
                s.extend(conv1d_specs(&n(&st, "conv2"), 3, c, c));
                s.extend(squeeze_excite_specs(&n(&st, "se"), c, cfg.se_channels));
                if prev != c {
                    s.extend(linear_specs(&n(&st, "short"), prev, c));
                }
                prev = c;
            }
            s.extend(linear_specs(&n(prefix, "out"), prev, cfg.embed_dim));
        }
        EncoderKind::EcapaTdnn => {
            let c = cfg.channels[0];
            s.extend(conv1d_specs(&n(prefix, "stem"), 5, cfg.n_mels, c));
            for j in 0..ECAPA_DILATIONS.len() {
                let b = n(prefix, &format!("block{}", j));
                s.extend(conv1d_specs(&n(&b, "conv"), 3, c, c));
                s.extend(squeeze_excite_specs(&n(&b, "se"), c, cfg.se_channels));
            }
            s.extend(linear_specs(&n(prefix, "mfa"), c * ECAPA_DILATIONS.len(), c));
            s.extend(linear_specs(&n(prefix, "out"), c, cfg.embed_dim));
        }
    }
    s
}

/// `[T, n_mels]` normalized features to `[T, embed_dim]` frame embeddings.
/// Convolutions use same-padding, so the frame rate is preserved.
pub fn frame_stack(g: &mut Graph, store: &ParameterStore, prefix: &str, cfg: &EncoderConfig, feats: Var) -> Result<Var> {
    if g.shape(feats).first() == Some(&0) {
        return Err(CoreError::input("speaker encoder needs at least one frame"));
    }
    match cfg.kind {
        EncoderKind::ResnetSe => {
            let x = conv1d(g, store, &n(prefix, "stem"), feats, 1)?;
            let mut x = g.swish(x);
            let mut prev = cfg.channels[0];
            for (i, &c) in cfg.channels.iter().enumerate() {
                let st = n(prefix, &format!("stage{}", i));
                let h = conv1d(g, store, &n(&st, "conv1"), x, 1)?;
                let h = g.swish(h);
                let h = conv1d(g, store, &n(&st, "conv2"), h, 1)?;
                let h = squeeze_excite(g, store, &n(&st, "se"), h)?;
                let short = if prev != c { linear(g, store, &n(&st, "short"), x)? } else { x };
                let y = g.add(h, short)?;
                x = g.swish(y);
                prev = c;
            }
            Ok(linear(g, store, &n(prefix, "out"), x)?)
        }
        EncoderKind::EcapaTdnn => {
            let x = conv1d(g, store, &n(prefix, "stem"), feats, 1)?;
            let mut x = g.swish(x);
            let mut outs = Vec::with_capacity(ECAPA_DILATIONS.len());
            for (j, &dil) in ECAPA_DILATIONS.iter().enumerate() {
                let b = n(prefix, &format!("block{}", j));
                let h = conv1d(g, store, &n(&b, "conv"), x, dil)?;
                let h = g.swish(h);
                let h = squeeze_excite(g, store, &n(&b, "se"), h)?;
                x = g.add(x, h)?;
                outs.push(x);
            }
            let cat = g.concat_cols(&outs)?;
            let h = linear(g, store, &n(prefix, "mfa"), cat)?;
            let h = g.swish(h);
            Ok(linear(g, store, &n(prefix, "out"), h)?)
        }
    }
}

pub fn extractor_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let mut s = frame_stack_specs(&n(EXTRACTOR_PREFIX, "frames"), cfg);
    s.extend(linear_specs(&n(EXTRACTOR_PREFIX, "pool_proj"), 2 * cfg.embed_dim, cfg.embed_dim));
    s
}

/// Utterance embedding `[1, embed_dim]`: frame stack, mean+std pooling,
/// projection, L2 normalization.
pub fn extractor_forward(g: &mut Graph, store: &ParameterStore, cfg: &EncoderConfig, feats: Var) -> Result<Var> {
    let frames = frame_stack(g, store, &n(EXTRACTOR_PREFIX, "frames"), cfg, feats)?;
    let pooled = g.mean_std_pool(frames)?;
    let pooled = g.reshape(pooled, &[1, 2 * cfg.embed_dim])?;
    let e = linear(g, store, &n(EXTRACTOR_PREFIX, "pool_proj"), pooled)?;
    Ok(g.l2_normalize(e)?)
}

pub fn encoder_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    frame_stack_specs(&n(ENCODER_PREFIX, "frames"), cfg)
}

pub fn encoder_forward(g: &mut Graph, store: &ParameterStore, cfg: &EncoderConfig, feats: Var) -> Result<Var> {
    frame_stack(g, store, &n(ENCODER_PREFIX, "frames"), cfg, feats)
}

/// Unit-norm utterance embedding of normalized features, without gradients.
pub fn embed_utterance(store: &ParameterStore, cfg: &EncoderConfig, feats: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(feats.clone());
    let e = extractor_forward(&mut g, store, cfg, x)?;
    Ok(g.value(e).data().to_vec())
}

/// Copies extractor trunk tensors into the frame-level encoder wherever the
/// name (after the module prefix) and shape agree. Returns the copied names.
pub fn init_encoder_from_extractor(store: &mut ParameterStore) -> Vec<String> {
    let src = format!("{}.", EXTRACTOR_PREFIX);
    let dst = format!("{}.", ENCODER_PREFIX);
    let pairs: Vec<(String, Tensor)> = store
        .iter()
        .filter_map(|(name, t)| {
            let suffix = name.strip_prefix(&src)?;
            let target = format!("{}{}", dst, suffix);
            match store.get(&target) {
                Ok(existing) if existing.shape() == t.shape() => Some((target, t.clone())),
                _ => None,
            }
        })
        .collect();
    pairs
        .into_iter()
        .map(|(name, t)| {
            store.set(&name, t);
            name
        })
        .collect()
}

/// One mean and variance over every bin of a `[T, M]` log-Mel block; keeps the
/// long-term spectral shape, which carries speaker identity.
pub fn normalize_utterance(values: &[f64], frames: usize, n_mels: usize) -> Result<Tensor> {
    if frames == 0 || values.len() != frames * n_mels {
        return Err(CoreError::input(format!("feature block of {} values is not {} x {}", values.len(), frames, n_mels)));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let inv = 1.0 / (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n + 1e-5).sqrt();
    Ok(Tensor::matrix(frames, n_mels, values.iter().map(|v| (v - mean) * inv).collect())?)
}

/// Per-column mean/variance normalization of `[T, M]` log-Mel values.
pub fn normalize_features(values: &[f64], frames: usize, n_mels: usize) -> Result<Tensor> {
    if frames == 0 || values.len() != frames * n_mels {
        return Err(CoreError::input(format!("feature block of {} values is not {} x {}", values.len(), frames, n_mels)));
    }
    let mut mean = vec![0.0; n_mels];
    for row in values.chunks(n_mels) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= frames as f64);
    let mut var = vec![0.0; n_mels];
    for row in values.chunks(n_mels) {
        for j in 0..n_mels {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v / frames as f64 + 1e-5).sqrt()).collect();
    let out = values
        .chunks(n_mels)
        .flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - mean[j]) * inv[j]).collect::<Vec<_>>())
        .collect();
    Ok(Tensor::matrix(frames, n_mels, out)?)
}
