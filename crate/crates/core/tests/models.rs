mod common;

use avsd_core::models::decoder::cross_attention_stage1;
use avsd_core::models::*;
use avsd_nn::gradcheck::check_parameters;
use avsd_nn::{Graph, Tensor};
use common::model::{random_labels, random_window, small_config};
use common::rng;

fn zero_param(store: &mut avsd_nn::ParameterStore, name: &str) {
    let t = store.get(name).unwrap();
    let z = Tensor::zeros(t.shape());
    store.set(name, z);
}

#[test]
fn lip_encoder_upsamples_four_times() {
    let cfg = small_config(DecoderKind::Transformer, EncoderKind::ResnetSe, 2);
    let m = AvsdModel::new(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[100, cfg.lip.input_dim]));
    let y = lip_encoder_forward(&mut g, &m.params, &cfg.lip, x).unwrap();
    assert_eq!(g.shape(y), &[400, cfg.lip.embed_dim]);
}

#[test]
fn zero_projection_gives_constant_lip_output() {
    let cfg = small_config(DecoderKind::Transformer, EncoderKind::ResnetSe, 2);
    let mut m = AvsdModel::new(cfg.clone(), 1).unwrap();
    zero_param(&mut m.params, "lip_encoder.proj.w");
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[10, cfg.lip.input_dim]));
    let y = lip_encoder_forward(&mut g, &m.params, &cfg.lip, x).unwrap();
    let v = g.value(y);
    assert!((0..40).all(|t| v.row(t) == v.row(0)));
}

#[test]
fn missing_lip_stream_is_zero_with_cleared_flag() {
    let cfg = small_config(DecoderKind::Transformer, EncoderKind::ResnetSe, 2);
    let m = AvsdModel::new(cfg.clone(), 1).unwrap();
    let (emb, vad) = encode_lips(&m.params, &cfg.lip, None, 7).unwrap();
    assert_eq!(emb.shape(), &[7, cfg.lip.embed_dim + 1]);
    assert!(emb.data().iter().all(|&v| v == 0.0));
    assert!(vad.iter().all(|&v| v == 0.0));

    let lips = Tensor::zeros(&[2, cfg.lip.input_dim]);
    let (emb, _) = encode_lips(&m.params, &cfg.lip, Some(&lips), 10).unwrap();
    let flag = |t: usize| emb.get2(t, cfg.lip.embed_dim);
    assert_eq!((flag(0), flag(7), flag(8), flag(9)), (1.0, 1.0, 0.0, 0.0));
}

#[test]
fn speaker_encoder_keeps_frame_rate_and_is_time_invariant() {
    for kind in [EncoderKind::ResnetSe, EncoderKind::EcapaTdnn] {
        let cfg = small_config(DecoderKind::Transformer, kind, 2);
        let m = AvsdModel::new(cfg.clone(), 2).unwrap();
        let mut g = Graph::new();
        let row: Vec<f64> = (0..cfg.encoder.n_mels).map(|j| (j as f64 * 0.7).sin()).collect();
        let feats = Tensor::from_rows(&vec![row; 400]).unwrap();
        let x = g.constant(feats);
        let y = encoder_forward(&mut g, &m.params, &cfg.encoder, x).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[400, cfg.encoder.embed_dim]);
        for t in 40..360 {
            for (a, b) in v.row(t).iter().zip(v.row(200)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let mut g = Graph::new();
        let empty = g.constant(Tensor::zeros(&[0, cfg.encoder.n_mels]));
        assert!(encoder_forward(&mut g, &m.params, &cfg.encoder, empty).is_err());
    }
}

#[test]
fn extractor_embeddings_are_unit_norm_and_deterministic() {
    let mut r = rng(4);
    for kind in [EncoderKind::ResnetSe, EncoderKind::EcapaTdnn] {
        let cfg = small_config(DecoderKind::Transformer, kind, 2);
        let m = AvsdModel::new(cfg.clone(), 3).unwrap();
        for frames in [1, 5, 60] {
            let w = random_window(&mut r, &cfg, frames);
            let e = embed_utterance(&m.params, &cfg.encoder, &w.feats).unwrap();
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            assert_eq!(e, embed_utterance(&m.params, &cfg.encoder, &w.feats).unwrap());
        }
    }
}

#[test]
fn encoder_init_copies_matching_trunk() {
    let cfg = small_config(DecoderKind::Transformer, EncoderKind::ResnetSe, 2);
    let mut m = AvsdModel::new(cfg, 5).unwrap();
    let copied = init_encoder_from_extractor(&mut m.params);
    assert!(!copied.is_empty());
    for name in &copied {
        let src = name.replacen("speaker_encoder", "speaker_extractor", 1);
        assert_eq!(m.params.get(name).unwrap(), m.params.get(&src).unwrap());
    }
    assert!(copied.iter().all(|n| !n.contains("pool_proj")));
}

#[test]
fn outputs_are_probabilities_for_every_decoder() {
    let mut r = rng(6);
    for kind in DecoderKind::ALL {
        let cfg = small_config(kind, EncoderKind::ResnetSe, 3);
        let m = AvsdModel::new(cfg.clone(), 6).unwrap();
        let w = random_window(&mut r, &cfg, 20);
        let p = m.predict(&w).unwrap();
        assert_eq!(p.len(), 3 * 20);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn zero_head_gives_one_half() {
    let mut r = rng(7);
    for kind in DecoderKind::ALL {
        let cfg = small_config(kind, EncoderKind::ResnetSe, 2);
        let mut m = AvsdModel::new(cfg.clone(), 7).unwrap();
        let pre = decoder_prefix(kind);
        zero_param(&mut m.params, &format!("{}.head.w", pre));
        zero_param(&mut m.params, &format!("{}.head.b", pre));
        let p = m.predict(&random_window(&mut r, &cfg, 9)).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }
}

#[test]
fn mismatched_inputs_rejected() {
    let mut r = rng(8);
    let cfg = small_config(DecoderKind::Transformer, EncoderKind::ResnetSe, 2);
    let m = AvsdModel::new(cfg.clone(), 8).unwrap();
    let mut w = random_window(&mut r, &cfg, 10);
    w.lips[1] = Tensor::zeros(&[9, cfg.lip.embed_dim + 1]);
    assert!(m.predict(&w).is_err());
    let mut w = random_window(&mut r, &cfg, 10);
    w.utts.pop();
    assert!(m.predict(&w).is_err());
}

#[test]
fn stage_one_weights_are_exactly_one() {
    let mut r = rng(9);
    let cfg = small_config(DecoderKind::CrossAttention, EncoderKind::ResnetSe, 2);
    let m = AvsdModel::new(cfg.clone(), 9).unwrap();
    let w = random_window(&mut r, &cfg, 15);
    let mut g = Graph::new();
    let lip = g.constant(w.lips[0].clone());
    let utt = g.constant(w.utts[0].clone());
    let (_, att) = cross_attention_stage1(&mut g, &m.params, &cfg.decoder, lip, utt).unwrap();
    for h in att.weights {
        assert!(g.value(h).data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn permuting_speakers_permutes_output_rows() {
    let mut r = rng(10);
    for kind in DecoderKind::ALL {
        let cfg = small_config(kind, EncoderKind::ResnetSe, 3);
        let m = AvsdModel::new(cfg.clone(), 10).unwrap();
        let w = random_window(&mut r, &cfg, 25);
        let base = m.predict(&w).unwrap();
        let perm = [2, 0, 1];
        let pw = WindowInputs {
            feats: w.feats.clone(),
            lips: perm.iter().map(|&i| w.lips[i].clone()).collect(),
            utts: perm.iter().map(|&i| w.utts[i].clone()).collect(),
        };
        let got = m.predict(&pw).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(got[row * 25..(row + 1) * 25], base[src * 25..(src + 1) * 25], "{}", kind);
        }
    }
}

fn gradcheck(kind: DecoderKind, encoder: EncoderKind) -> f64 {
    let mut r = rng(11);
    let cfg = small_config(kind, encoder, 2);
    let m = AvsdModel::new(cfg.clone(), 11).unwrap();
    let w = random_window(&mut r, &cfg, 12);
    let labels = random_labels(&mut r, 12, 2);
    let loss = |store: &avsd_nn::ParameterStore, g: &mut Graph| {
        let p = forward_window(g, store, &cfg, &w)?;
        Ok::<_, avsd_core::CoreError>(g.bce(p, &labels)?)
    };
    let mut g = Graph::new();
    let l = loss(&m.params, &mut g).unwrap();
    let grads = g.backward(l).unwrap();
    let names = m.trainable_names(true);
    let report = check_parameters(&m.params, &names, &grads, 1e-5, 12, |s| {
        let mut g = Graph::new();
        let l = loss(s, &mut g).map_err(|e| avsd_nn::NnError::Config(e.to_string()))?;
        Ok(g.value(l).item().unwrap())
    })
    .unwrap();
    report.max_rel_err
}

#[test]
fn ecapa_end_to_end_gradients() {
    let err = gradcheck(DecoderKind::Transformer, EncoderKind::EcapaTdnn);
    assert!(err < 1e-5, "max relative error {}", err);
}

#[test]
fn resnet_cross_attention_gradients() {
    let err = gradcheck(DecoderKind::CrossAttention, EncoderKind::ResnetSe);
    assert!(err < 1e-5, "max relative error {}", err);
}
