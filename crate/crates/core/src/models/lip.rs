//! Lip encoder: conv + self-attention over video frames, upsampled to the
//! acoustic frame rate, plus a per-frame visual VAD head used for enrollment.

use avsd_nn::layers::{conv1d, conv1d_specs, layer_norm, layer_norm_specs, linear, linear_specs, transformer_block, transformer_block_specs};
use avsd_nn::{Graph, ParamSpec, ParameterStore, Tensor, Var};

use super::config::LipEncoderConfig;
use crate::error::Result;

pub const LIP_PREFIX: &str = "lip_encoder";

fn p(leaf: &str) -> String {
    format!("{}.{}", LIP_PREFIX, leaf)
}

pub fn lip_encoder_specs(cfg: &LipEncoderConfig) -> Vec<ParamSpec> {
    let mut s = conv1d_specs(&p("conv"), cfg.conv_kernel, cfg.input_dim, cfg.embed_dim);
    for i in 0..cfg.layers {
        s.extend(transformer_block_specs(&p(&format!("block{}", i)), cfg.embed_dim, cfg.ffn_dim));
    }
    s.extend(layer_norm_specs(&p("ln_out"), cfg.embed_dim));
    s.extend(linear_specs(&p("proj"), cfg.embed_dim, cfg.embed_dim));
    s.extend(linear_specs(&p("vad_head"), cfg.embed_dim, 1));
    s
}

/// `[T_v, D_v]` video-rate features to `[T_v · upsample, D_l]` embeddings.
pub fn lip_encoder_forward(g: &mut Graph, store: &ParameterStore, cfg: &LipEncoderConfig, lips: Var) -> Result<Var> {
    let x = conv1d(g, store, &p("conv"), lips, 1)?;
    let mut x = g.swish(x);
    for i in 0..cfg.layers {
        x = transformer_block(g, store, &p(&format!("block{}", i)), x, cfg.heads)?;
    }
    let x = layer_norm(g, store, &p("ln_out"), x)?;
    let x = linear(g, store, &p("proj"), x)?;
    Ok(g.repeat_rows(x, cfg.upsample)?)
}

/// Per-frame speaking probability `[T, 1]` from lip embeddings.
pub fn lip_vad(g: &mut Graph, store: &ParameterStore, emb: Var) -> Result<Var> {
    let logit = linear(g, store, &p("vad_head"), emb)?;
    Ok(g.sigmoid(logit))
}

/// Width of a decoder lip input: the embedding plus a validity flag column.
pub fn lip_input_dim(cfg: &LipEncoderConfig) -> usize {
    cfg.embed_dim + 1
}

/// Runs the encoder on one speaker's stream and aligns it to `frames`
/// acoustic frames. Frames the video does not reach, or a missing stream,
/// become zero vectors with the validity flag cleared.
///
/// Returns `[frames, D_l + 1]` embeddings and the `[frames]` visual VAD.
pub fn encode_lips(store: &ParameterStore, cfg: &LipEncoderConfig, lips: Option<&Tensor>, frames: usize) -> Result<(Tensor, Vec<f64>)> {
    let d = cfg.embed_dim;
    let mut out = vec![0.0; frames * (d + 1)];
    let mut vad = vec![0.0; frames];
    if let Some(l) = lips.filter(|l| l.rows() > 0) {
        let mut g = Graph::new();
        let x = g.constant(l.clone());
        let emb = lip_encoder_forward(&mut g, store, cfg, x)?;
        let v = lip_vad(&mut g, store, emb)?;
        let (emb, v) = (g.value(emb), g.value(v));
        let n = emb.rows().min(frames);
        for t in 0..n {
            out[t * (d + 1)..t * (d + 1) + d].copy_from_slice(emb.row(t));
            out[t * (d + 1) + d] = 1.0;
            vad[t] = v.data()[t];
        }
    }
    Ok((Tensor::matrix(frames, d + 1, out)?, vad))
}
