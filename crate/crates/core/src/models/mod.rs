//! Network definitions. Every network is a function of `(graph, store, inputs)`
//! with parameters named under a module prefix:
//! `lip_encoder`, `speaker_extractor`, `speaker_encoder`, `decoder.<kind>`.

pub mod config;
pub mod decoder;
pub mod lip;
pub mod speaker;

use avsd_nn::{Graph, ParamSpec, ParameterStore, Tensor, Var};

pub use config::{DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, LipEncoderConfig, ModelConfig, Preset};
pub use decoder::{decoder_forward, decoder_prefix, decoder_specs, DecoderDims, DecoderInputs};
pub use lip::{encode_lips, lip_encoder_forward, lip_encoder_specs, lip_input_dim, lip_vad, LIP_PREFIX};
pub use speaker::{
    embed_utterance, encoder_forward, encoder_specs, extractor_forward, extractor_specs, init_encoder_from_extractor, normalize_features, normalize_utterance,
    ENCODER_PREFIX, EXTRACTOR_PREFIX,
};

use crate::error::{CoreError, Result};

/// Modules that joint training must leave untouched.
pub const FROZEN_MODULES: [&str; 2] = [LIP_PREFIX, EXTRACTOR_PREFIX];

pub fn module_of(param: &str) -> &str {
    param.split('.').next().unwrap_or(param)
}

/// Decoder input widths implied by the encoder configs.
pub fn decoder_dims(cfg: &ModelConfig) -> DecoderDims {
    DecoderDims {
        lip: lip_input_dim(&cfg.lip),
        frame: cfg.encoder.embed_dim,
        utt: cfg.encoder.embed_dim,
    }
}

pub fn model_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = lip_encoder_specs(&cfg.lip);
    s.extend(extractor_specs(&cfg.encoder));
    s.extend(encoder_specs(&cfg.encoder));
    s.extend(decoder_specs(&cfg.decoder, decoder_dims(cfg)));
    s
}

/// One decode or training window for all speakers.
#[derive(Clone, Debug)]
pub struct WindowInputs {
    /// Normalized log-Mel features `[T, n_mels]`.
    pub feats: Tensor,
    /// Per speaker lip embeddings with validity flag `[T, D_l + 1]`.
    pub lips: Vec<Tensor>,
    /// Per speaker unit-norm utterance embedding `[1, D]`.
    pub utts: Vec<Tensor>,
}

/// Speaker encoder plus decoder on one window; returns `[T, S]` probabilities.
pub fn forward_window(g: &mut Graph, store: &ParameterStore, cfg: &ModelConfig, w: &WindowInputs) -> Result<Var> {
    let feats = g.constant(w.feats.clone());
    let frames = encoder_forward(g, store, &cfg.encoder, feats)?;
    let inputs = DecoderInputs {
        lips: w.lips.iter().map(|l| g.constant(l.clone())).collect(),
        frames,
        utts: w.utts.iter().map(|u| g.constant(u.clone())).collect(),
    };
    decoder_forward(g, store, &cfg.decoder, &inputs)
}

/// Row-major `S × T` probabilities for one window.
pub fn predict_window(store: &ParameterStore, cfg: &ModelConfig, w: &WindowInputs) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = forward_window(&mut g, store, cfg, w)?;
    let v = g.value(out);
    let (t, s) = (v.rows(), v.cols());
    let mut res = vec![0.0; s * t];
    for (i, row) in v.data().chunks(s).enumerate() {
        for (j, &p) in row.iter().enumerate() {
            res[j * t + i] = p;
        }
    }
    Ok(res)
}

/// Configuration plus parameters of a complete system.
#[derive(Clone, Debug)]
pub struct AvsdModel {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl AvsdModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParameterStore::init(&model_specs(&config), seed)?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters, checking that every tensor the config needs is present with the right shape.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        for spec in model_specs(&config) {
            let t = params.get(&spec.name).map_err(|_| {
                CoreError::config(format!("checkpoint has no parameter `{}` required by the {} decoder config", spec.name, config.decoder.kind))
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(CoreError::config(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn predict(&self, w: &WindowInputs) -> Result<Vec<f64>> {
        predict_window(&self.params, &self.config, w)
    }

    /// Names of parameters updated by joint training.
    pub fn trainable_names(&self, train_speaker_encoder: bool) -> Vec<String> {
        let dec = format!("{}.", decoder_prefix(self.config.decoder.kind));
        let enc = format!("{}.", ENCODER_PREFIX);
        self.params
            .names()
            .filter(|n| n.starts_with(&dec) || (train_speaker_encoder && n.starts_with(&enc)))
            .map(str::to_string)
            .collect()
    }
}
