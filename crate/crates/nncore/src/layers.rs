//! Parameterized building blocks.
//!
//! Every block comes as a pair: `*_specs(prefix, ..)` lists the parameters it
//! owns, and the forward function reads them back from the store under the
//! same prefix.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSpec, ParameterStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn name(prefix: &str, leaf: &str) -> String {
    format!("{}.{}", prefix, leaf)
}

pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
    vec![ParamSpec::weight(name(prefix, "w"), d_in, d_out), ParamSpec::bias(name(prefix, "b"), d_out)]
}

/// `x · W + b` for `x: [T, d_in]`.
pub fn linear(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &name(prefix, "w"))?;
    let b = g.param(store, &name(prefix, "b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(name(prefix, "gamma"), &[d], Init::Ones),
        ParamSpec::new(name(prefix, "beta"), &[d], Init::Zeros),
    ]
}

pub fn layer_norm(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &name(prefix, "gamma"))?;
    let beta = g.param(store, &name(prefix, "beta"))?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

pub fn conv1d_specs(prefix: &str, kernel: usize, c_in: usize, c_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            name(prefix, "w"),
            &[kernel, c_in, c_out],
            Init::Xavier {
                fan_in: kernel * c_in,
                fan_out: kernel * c_out,
            },
        ),
        ParamSpec::bias(name(prefix, "b"), c_out),
    ]
}

pub fn conv1d(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
    let w = g.param(store, &name(prefix, "w"))?;
    let b = g.param(store, &name(prefix, "b"))?;
    g.conv1d(x, w, b, dilation)
}

pub fn depthwise_conv1d_specs(prefix: &str, kernel: usize, channels: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            name(prefix, "w"),
            &[kernel, channels],
            Init::Xavier {
                fan_in: kernel,
                fan_out: kernel,
            },
        ),
        ParamSpec::bias(name(prefix, "b"), channels),
    ]
}

pub fn depthwise_conv1d(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &name(prefix, "w"))?;
    let b = g.param(store, &name(prefix, "b"))?;
    g.depthwise_conv1d(x, w, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
    Sigmoid,
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Swish => g.swish(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

pub fn feed_forward_specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut s = linear_specs(&name(prefix, "fc1"), d, hidden);
    s.extend(linear_specs(&name(prefix, "fc2"), hidden, d));
    s
}

/// Two-layer position-wise MLP.
pub fn feed_forward(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var, act: Activation) -> Result<Var> {
    let h = linear(g, store, &name(prefix, "fc1"), x)?;
    let h = activate(g, h, act);
    linear(g, store, &name(prefix, "fc2"), h)
}

pub fn attention_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    ["wq", "wk", "wv", "wo"]
        .iter()
        .flat_map(|p| linear_specs(&name(prefix, p), d, d))
        .collect()
}

/// Output of [`multi_head_attention`].
pub struct Attention {
    pub output: Var,
    /// Per head, the `[T_q, T_k]` row-stochastic weight matrix.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with `heads` heads.
///
/// Per head `h`: `softmax(Q W_q,h (K W_k,h)ᵀ / sqrt(D/heads)) · V W_v,h`; head
/// outputs are concatenated and passed through the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Attention> {
    let d = *g.shape(q).last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(NnError::Config(format!("model dim {} is not divisible by {} heads", d, heads)));
    }
    if g.shape(k) != g.shape(v) || g.shape(k).last() != Some(&d) {
        return Err(NnError::shape("multi_head_attention", g.shape(k), g.shape(v)));
    }
    let qp = linear(g, store, &name(prefix, "wq"), q)?;
    let kp = linear(g, store, &name(prefix, "wk"), k)?;
    let vp = linear(g, store, &name(prefix, "wv"), v)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (g.slice_cols(qp, h * dh, dh)?, g.slice_cols(kp, h * dh, dh)?, g.slice_cols(vp, h * dh, dh)?)
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let output = linear(g, store, &name(prefix, "wo"), cat)?;
    Ok(Attention { output, weights })
}

/// Pre-norm self-attention block: `x + MHA(LN(x))` then `x + FFN(LN(x))`.
pub fn transformer_block_specs(prefix: &str, d: usize, ffn: usize) -> Vec<ParamSpec> {
    let mut s = layer_norm_specs(&name(prefix, "ln_attn"), d);
    s.extend(attention_specs(&name(prefix, "attn"), d));
    s.extend(layer_norm_specs(&name(prefix, "ln_ffn"), d));
    s.extend(feed_forward_specs(&name(prefix, "ffn"), d, ffn));
    s
}

pub fn transformer_block(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, store, &name(prefix, "ln_attn"), x)?;
    let a = multi_head_attention(g, store, &name(prefix, "attn"), h, h, h, heads)?;
    let x = g.add(x, a.output)?;
    let h = layer_norm(g, store, &name(prefix, "ln_ffn"), x)?;
    let f = feed_forward(g, store, &name(prefix, "ffn"), h, Activation::Swish)?;
    g.add(x, f)
}

/// Squeeze-and-excitation over time: channel gates from the time-mean.
pub fn squeeze_excite_specs(prefix: &str, channels: usize, bottleneck: usize) -> Vec<ParamSpec> {
    let mut s = linear_specs(&name(prefix, "down"), channels, bottleneck);
    s.extend(linear_specs(&name(prefix, "up"), bottleneck, channels));
    s
}

pub fn squeeze_excite(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let c = *g.shape(x).last().unwrap_or(&0);
    let m = g.mean_rows(x)?;
    let m = g.reshape(m, &[1, c])?;
    let h = linear(g, store, &name(prefix, "down"), m)?;
    let h = g.relu(h);
    let s = linear(g, store, &name(prefix, "up"), h)?;
    let s = g.sigmoid(s);
    let s = g.reshape(s, &[c])?;
    g.mul_row(x, s)
}
