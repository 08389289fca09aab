//! Audio-visual decoders. Each speaker is decoded independently with shared
//! weights, so the output columns follow the order of the speaker inputs.

use avsd_nn::layers::{
    depthwise_conv1d, depthwise_conv1d_specs, feed_forward, feed_forward_specs, layer_norm, layer_norm_specs, linear, linear_specs,
    multi_head_attention, transformer_block, transformer_block_specs, Activation, Attention,
};
use avsd_nn::{Graph, ParamSpec, ParameterStore, Var};

use super::config::{DecoderConfig, DecoderKind};
use crate::error::{CoreError, Result};

/// Decoder inputs already placed on a graph.
pub struct DecoderInputs {
    /// Per speaker, `[T, lip_dim]`.
    pub lips: Vec<Var>,
    /// Shared frame-level speaker embeddings, `[T, frame_dim]`.
    pub frames: Var,
    /// Per speaker utterance embedding, `[1, utt_dim]`.
    pub utts: Vec<Var>,
}

/// Input widths the decoder parameters are sized for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    pub lip: usize,
    pub frame: usize,
    pub utt: usize,
}

pub fn decoder_prefix(kind: DecoderKind) -> String {
    format!("decoder.{}", kind)
}

fn n(prefix: &str, leaf: &str) -> String {
    format!("{}.{}", prefix, leaf)
}

fn conformer_block_specs(prefix: &str, cfg: &DecoderConfig) -> Vec<ParamSpec> {
    let d = cfg.model_dim;
    let mut s = Vec::new();
    for ffn in ["ffn1", "ffn2"] {
        s.extend(layer_norm_specs(&n(prefix, &format!("ln_{}", ffn)), d));
        s.extend(feed_forward_specs(&n(prefix, ffn), d, cfg.ffn_dim));
    }
    s.extend(layer_norm_specs(&n(prefix, "ln_attn"), d));
    s.extend(avsd_nn::layers::attention_specs(&n(prefix, "attn"), d));
    s.extend(layer_norm_specs(&n(prefix, "ln_conv"), d));
    s.extend(linear_specs(&n(prefix, "pw1"), d, 2 * d));
    s.extend(depthwise_conv1d_specs(&n(prefix, "dw"), cfg.conv_kernel, d));
    s.extend(layer_norm_specs(&n(prefix, "ln_dw"), d));
    s.extend(linear_specs(&n(prefix, "pw2"), d, d));
    s.extend(layer_norm_specs(&n(prefix, "ln_out"), d));
    s
}

/// Macaron FFN halves around self-attention and a GLU + depthwise conv module.
fn conformer_block(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let d = *g.shape(x).last().unwrap_or(&0);
    let half_ffn = |g: &mut Graph, x: Var, which: &str| -> Result<Var> {
        let h = layer_norm(g, store, &n(prefix, &format!("ln_{}", which)), x)?;
        let h = feed_forward(g, store, &n(prefix, which), h, Activation::Swish)?;
        let h = g.scale(h, 0.5);
        Ok(g.add(x, h)?)
    };
    let x = half_ffn(g, x, "ffn1")?;
    let h = layer_norm(g, store, &n(prefix, "ln_attn"), x)?;
    let a = multi_head_attention(g, store, &n(prefix, "attn"), h, h, h, heads)?;
    let x = g.add(x, a.output)?;

    let h = layer_norm(g, store, &n(prefix, "ln_conv"), x)?;
    let h = linear(g, store, &n(prefix, "pw1"), h)?;
    let (a, b) = (g.slice_cols(h, 0, d)?, g.slice_cols(h, d, d)?);
    let gate = g.sigmoid(b);
    let h = g.mul(a, gate)?;
    let h = depthwise_conv1d(g, store, &n(prefix, "dw"), h)?;
    let h = layer_norm(g, store, &n(prefix, "ln_dw"), h)?;
    let h = g.swish(h);
    let h = linear(g, store, &n(prefix, "pw2"), h)?;
    let x = g.add(x, h)?;

    let x = half_ffn(g, x, "ffn2")?;
    Ok(layer_norm(g, store, &n(prefix, "ln_out"), x)?)
}

pub fn decoder_specs(cfg: &DecoderConfig, dims: DecoderDims) -> Vec<ParamSpec> {
    let pre = decoder_prefix(cfg.kind);
    let d = cfg.model_dim;
    let mut s = Vec::new();
    match cfg.kind {
        DecoderKind::Transformer | DecoderKind::Conformer => {
            s.extend(linear_specs(&n(&pre, "in_proj"), dims.lip + dims.frame + dims.utt, d));
            for i in 0..cfg.layers {
                let b = n(&pre, &format!("block{}", i));
                if cfg.kind == DecoderKind::Transformer {
                    s.extend(transformer_block_specs(&b, d, cfg.ffn_dim));
                } else {
                    s.extend(conformer_block_specs(&b, cfg));
                }
            }
        }
        DecoderKind::CrossAttention => {
            s.extend(linear_specs(&n(&pre, "lip_proj"), dims.lip, d));
            s.extend(linear_specs(&n(&pre, "utt_proj"), dims.utt, d));
            s.extend(linear_specs(&n(&pre, "frame_proj"), dims.frame, d));
            s.extend(avsd_nn::layers::attention_specs(&n(&pre, "stage1"), d));
            for i in 0..cfg.layers {
                let b = n(&pre, &format!("layer{}", i));
                s.extend(layer_norm_specs(&n(&b, "ln_q"), d));
                s.extend(avsd_nn::layers::attention_specs(&n(&b, "attn"), d));
                s.extend(layer_norm_specs(&n(&b, "ln_ffn"), d));
                s.extend(feed_forward_specs(&n(&b, "ffn"), d, cfg.ffn_dim));
            }
        }
    }
    s.extend(layer_norm_specs(&n(&pre, "ln_out"), d));
    s.extend(linear_specs(&n(&pre, "head"), d, 1));
    s
}

fn check_inputs(g: &Graph, cfg: &DecoderConfig, inputs: &DecoderInputs) -> Result<usize> {
    let s = inputs.lips.len();
    if s == 0 || s != inputs.utts.len() {
        return Err(CoreError::input(format!(
            "decoder needs one lip stream per utterance embedding, got {} and {}",
            s,
            inputs.utts.len()
        )));
    }
    if s != cfg.num_speakers {
        return Err(CoreError::input(format!("decoder configured for {} speakers, got {}", cfg.num_speakers, s)));
    }
    let t = g.shape(inputs.frames)[0];
    for &l in &inputs.lips {
        if g.shape(l)[0] != t {
            return Err(CoreError::input(format!("lip stream has {} frames, frame embeddings have {}", g.shape(l)[0], t)));
        }
    }
    for &u in &inputs.utts {
        if g.shape(u).len() != 2 || g.shape(u)[0] != 1 {
            return Err(CoreError::input(format!("utterance embedding must be [1, D], got {:?}", g.shape(u))));
        }
    }
    Ok(t)
}

/// First cross-attention stage: lip frames query the single utterance embedding.
pub fn cross_attention_stage1(g: &mut Graph, store: &ParameterStore, cfg: &DecoderConfig, lip: Var, utt: Var) -> Result<(Var, Attention)> {
    let pre = decoder_prefix(DecoderKind::CrossAttention);
    let q = linear(g, store, &n(&pre, "lip_proj"), lip)?;
    let kv = linear(g, store, &n(&pre, "utt_proj"), utt)?;
    let att = multi_head_attention(g, store, &n(&pre, "stage1"), q, kv, kv, cfg.heads)?;
    let h = g.add(q, att.output)?;
    Ok((h, att))
}

/// Per-speaker activity probabilities `[T, S]`.
pub fn decoder_forward(g: &mut Graph, store: &ParameterStore, cfg: &DecoderConfig, inputs: &DecoderInputs) -> Result<Var> {
    let t = check_inputs(g, cfg, inputs)?;
    let pre = decoder_prefix(cfg.kind);
    let frame_proj = match cfg.kind {
        DecoderKind::CrossAttention => Some(linear(g, store, &n(&pre, "frame_proj"), inputs.frames)?),
        _ => None,
    };
    let mut cols = Vec::with_capacity(inputs.lips.len());
    for (&lip, &utt) in inputs.lips.iter().zip(&inputs.utts) {
        let x = match cfg.kind {
            DecoderKind::Transformer | DecoderKind::Conformer => {
                let u = g.reshape(utt, &[g.shape(utt)[1]])?;
                let u = g.broadcast_rows(u, t)?;
                let cat = g.concat_cols(&[lip, inputs.frames, u])?;
                let mut x = linear(g, store, &n(&pre, "in_proj"), cat)?;
                for i in 0..cfg.layers {
                    let b = n(&pre, &format!("block{}", i));
                    x = if cfg.kind == DecoderKind::Transformer {
                        transformer_block(g, store, &b, x, cfg.heads)?
                    } else {
                        conformer_block(g, store, &b, x, cfg.heads)?
                    };
                }
                x
            }
            DecoderKind::CrossAttention => {
                let f = frame_proj.expect("projected above");
                let (h, _) = cross_attention_stage1(g, store, cfg, lip, utt)?;
                let mut x = g.add(h, f)?;
                for i in 0..cfg.layers {
                    let b = n(&pre, &format!("layer{}", i));
                    let q = layer_norm(g, store, &n(&b, "ln_q"), x)?;
                    let a = multi_head_attention(g, store, &n(&b, "attn"), q, f, f, cfg.heads)?;
                    x = g.add(x, a.output)?;
                    let h = layer_norm(g, store, &n(&b, "ln_ffn"), x)?;
                    let h = feed_forward(g, store, &n(&b, "ffn"), h, Activation::Swish)?;
                    x = g.add(x, h)?;
                }
                x
            }
        };
        let x = layer_norm(g, store, &n(&pre, "ln_out"), x)?;
        let logit = linear(g, store, &n(&pre, "head"), x)?;
        cols.push(g.sigmoid(logit));
    }
    Ok(if cols.len() == 1 { cols[0] } else { g.concat_cols(&cols)? })
}
