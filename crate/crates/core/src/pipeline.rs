//! Session loading and the stage functions shared by the CLI and the demo.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use avsd_nn::{seeded_rng, Tensor};
use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{read_model_config, write_model_config, PipelineConfig};
use crate::decodepipe::{median_filter, probs_to_annotation, sliding_window_decode, ActivityMatrix, DecodeConfig};
use crate::dsp::{load_features, AudioSignal, LogMelFeatures};
use crate::error::{CoreError, Result};
use crate::models::{
    decoder_prefix, embed_utterance, encode_lips, init_encoder_from_extractor, normalize_features, normalize_utterance, AvsdModel, ModelConfig, WindowInputs, ENCODER_PREFIX,
    EXTRACTOR_PREFIX, LIP_PREFIX,
};
use crate::rttm::{annotation_to_labels, parse_rttm, DiarizationAnnotation, LabelMatrix, ParseMode};
use crate::scorer::{score_corpus, score_session, CorpusScore, DerComponents, ScoreOptions};
use crate::secondsv::{correct_speakers, relabel_segments, single_speaker_segments, ExtractorEmbedder, SpeakerSegment, SvConfig};
use crate::synthgen::{generate_corpus, load_lip, Manifest, ManifestRecord, Split};
use crate::trainer::{joint_train, ADAM_M, ADAM_V, STATE_KEY, pretrain_extractor, pretrain_lip_encoder, ExtractorSample, LipSample, TrainOutputs, TrainSample};
use crate::wav::load_wav;

/// One session as stored on disk.
#[derive(Clone, Debug)]
pub struct RawSession {
    pub id: String,
    pub audio: AudioSignal,
    pub feats: LogMelFeatures,
    /// Video-rate lip features per speaker; a missing entry means no stream.
    pub lips: BTreeMap<String, Tensor>,
    pub speakers: Vec<String>,
    pub reference: Option<DiarizationAnnotation>,
}

impl RawSession {
    pub fn frames(&self) -> usize {
        self.feats.frames()
    }

    pub fn frame_hop_s(&self) -> f64 {
        crate::dsp::FRAME_HOP_S
    }

    pub fn labels(&self) -> Result<Option<LabelMatrix>> {
        self.reference
            .as_ref()
            .map(|r| annotation_to_labels(r, &self.speakers, self.frame_hop_s(), self.frames()))
            .transpose()
    }
}

/// Reads audio, features, lips and (when `with_reference`) the reference RTTM of one record.
pub fn load_session(manifest: &Manifest, rec: &ManifestRecord, with_reference: bool) -> Result<RawSession> {
    let audio = load_wav(&manifest.resolve(&rec.wav))?;
    let feats = load_features(&manifest.resolve(&rec.features), audio.sample_rate_hz())?;
    let mut lips = BTreeMap::new();
    for (spk, p) in &rec.lips {
        let l = load_lip(&manifest.resolve(p))?;
        lips.insert(spk.clone(), Tensor::matrix(l.frames, l.dim, l.values)?);
    }
    let mut speakers = rec.speakers.clone();
    speakers.sort();
    speakers.dedup();
    let reference = if with_reference {
        let path = manifest.resolve(&rec.rttm);
        let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let mut anns = parse_rttm(&text, ParseMode::Strict)?;
        let mut ann = anns.remove(&rec.session).unwrap_or_else(|| DiarizationAnnotation::new(&rec.session));
        ann.session_id = rec.session.clone();
        if let Some(s) = ann.speakers().into_iter().find(|s| !speakers.contains(s)) {
            return Err(CoreError::input(format!("reference of {} names speaker {} missing from the manifest", rec.session, s)));
        }
        Some(ann)
    } else {
        None
    };
    Ok(RawSession {
        id: rec.session.clone(),
        audio,
        feats,
        lips,
        speakers,
        reference,
    })
}

pub fn load_sessions(manifest: &Manifest, split: Option<Split>, with_reference: bool) -> Result<Vec<RawSession>> {
    let recs: Vec<&ManifestRecord> = manifest.records.iter().filter(|r| split.is_none_or(|s| r.split == s)).collect();
    recs.par_iter().map(|r| load_session(manifest, r, with_reference)).collect()
}

/// Where the per-speaker utterance embeddings come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Enrollment {
    /// Single-speaker stretches of the reference labels.
    Oracle,
    /// Single-speaker stretches of the visual VAD.
    LipVad,
}

impl Enrollment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Enrollment::Oracle => "oracle",
            Enrollment::LipVad => "lip_vad",
        }
    }
}

impl std::str::FromStr for Enrollment {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Enrollment::Oracle),
            "lip_vad" => Ok(Enrollment::LipVad),
            _ => Err(CoreError::config(format!("unknown enrollment `{}` (expected oracle or lip_vad)", s))),
        }
    }
}

/// A session with frozen-module outputs computed.
#[derive(Clone, Debug)]
pub struct PreparedSession {
    pub id: String,
    pub speakers: Vec<String>,
    pub frame_hop_s: f64,
    pub feats: Tensor,
    pub lips: Vec<Tensor>,
    pub lip_vad: Vec<Vec<f64>>,
    pub utts: Vec<Tensor>,
    pub labels: Option<LabelMatrix>,
}

impl PreparedSession {
    pub fn frames(&self) -> usize {
        self.feats.rows()
    }

    pub fn window(&self, start: usize, end: usize) -> Result<WindowInputs> {
        let len = end - start;
        Ok(WindowInputs {
            feats: self.feats.slice_rows(start, len)?,
            lips: self.lips.iter().map(|l| l.slice_rows(start, len)).collect::<avsd_nn::Result<_>>()?,
            utts: self.utts.clone(),
        })
    }

    pub fn into_train_sample(self) -> Result<TrainSample> {
        let labels = self.labels.ok_or_else(|| CoreError::input(format!("session {} has no reference labels", self.id)))?;
        Ok(TrainSample {
            feats: self.feats,
            lips: self.lips,
            utts: self.utts,
            labels,
        })
    }
}

fn segment_frames(seg: &SpeakerSegment, hop: f64, frames: usize) -> (usize, usize) {
    let a = ((seg.start_s / hop).round() as usize).min(frames);
    let b = ((seg.end_s / hop).round() as usize).min(frames);
    (a, b)
}

/// Utterance embedding per speaker: the normalized mean of extractor
/// embeddings of the speaker's `k` longest single-speaker segments in `ann`,
/// or of the whole session when the speaker has none.
pub fn enroll_speakers(model: &AvsdModel, feats: &LogMelFeatures, speakers: &[String], ann: &DiarizationAnnotation, sv: &SvConfig) -> Result<Vec<Tensor>> {
    let hop = crate::dsp::FRAME_HOP_S;
    let segs = single_speaker_segments(ann, sv.min_segment_s);
    let n_mels = feats.n_mels();
    let embed = |a: usize, b: usize| -> Result<Vec<f64>> {
        let x = normalize_utterance(&feats.values()[a * n_mels..b * n_mels], b - a, n_mels)?;
        embed_utterance(&model.params, &model.config.encoder, &x)
    };
    let mut whole: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(speakers.len());
    for spk in speakers {
        let mut own: Vec<&SpeakerSegment> = segs.iter().filter(|s| &s.speaker == spk).collect();
        own.sort_by(|a, b| b.duration_s().total_cmp(&a.duration_s()).then(a.start_s.total_cmp(&b.start_s)));
        own.truncate(sv.enroll_k);
        let spans: Vec<(usize, usize)> = own.iter().map(|s| segment_frames(s, hop, feats.frames())).filter(|(a, b)| b > a).collect();
        let mut c = vec![0.0; model.config.encoder.embed_dim];
        if spans.is_empty() {
            warn!("{}: no single-speaker stretch for {}; enrolling from the whole session", ann.session_id, spk);
            if whole.is_none() {
                whole = Some(embed(0, feats.frames())?);
            }
            c.clone_from(whole.as_ref().expect("computed above"));
        } else {
            for (a, b) in spans {
                c.iter_mut().zip(embed(a, b)?).for_each(|(x, y)| *x += y);
            }
        }
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        c.iter_mut().for_each(|v| *v /= n);
        out.push(Tensor::matrix(1, c.len(), c)?);
    }
    Ok(out)
}

/// Runs the frozen lip encoder and extractor on a session.
pub fn prepare_session(model: &AvsdModel, raw: &RawSession, enrollment: Enrollment, decode: &DecodeConfig, sv: &SvConfig) -> Result<PreparedSession> {
    let frames = raw.frames();
    if raw.speakers.len() != model.config.decoder.num_speakers {
        return Err(CoreError::input(format!(
            "session {} has {} speakers, the model expects {}",
            raw.id,
            raw.speakers.len(),
            model.config.decoder.num_speakers
        )));
    }
    if raw.feats.n_mels() != model.config.encoder.n_mels {
        return Err(CoreError::input(format!(
            "session {} has {} mel bands, the model expects {}",
            raw.id,
            raw.feats.n_mels(),
            model.config.encoder.n_mels
        )));
    }
    let feats = normalize_features(raw.feats.values(), frames, raw.feats.n_mels())?;
    let mut lips = Vec::new();
    let mut lip_vad = Vec::new();
    for spk in &raw.speakers {
        let (emb, vad) = encode_lips(&model.params, &model.config.lip, raw.lips.get(spk), frames)?;
        lips.push(emb);
        lip_vad.push(vad);
    }
    let hop = raw.frame_hop_s();
    let labels = raw.labels()?;
    let ann = match enrollment {
        Enrollment::Oracle => raw
            .reference
            .clone()
            .ok_or_else(|| CoreError::input(format!("oracle enrollment needs a reference for {}", raw.id)))?,
        Enrollment::LipVad => {
            let vad = ActivityMatrix::new(raw.speakers.clone(), frames, hop, lip_vad.concat())?;
            let vad = if decode.median_kernel > 1 { median_filter(&vad, decode.median_kernel)? } else { vad };
            probs_to_annotation(&vad, decode, &raw.id)
        }
    };
    let utts = enroll_speakers(model, &raw.feats, &raw.speakers, &ann, sv)?;
    Ok(PreparedSession {
        id: raw.id.clone(),
        speakers: raw.speakers.clone(),
        frame_hop_s: hop,
        feats,
        lips,
        lip_vad,
        utts,
        labels,
    })
}

/// Sliding-window activity probabilities for one prepared session.
pub fn session_probabilities(model: &AvsdModel, s: &PreparedSession, decode: &DecodeConfig) -> Result<ActivityMatrix> {
    sliding_window_decode(s.frames(), &s.speakers, s.frame_hop_s, decode, |a, b| model.predict(&s.window(a, b)?))
}

/// Median filtering (when the kernel exceeds 1) and thresholding into an annotation.
pub fn postprocess(probs: &ActivityMatrix, decode: &DecodeConfig, session_id: &str) -> Result<DiarizationAnnotation> {
    let p = if decode.median_kernel > 1 { median_filter(probs, decode.median_kernel)? } else { probs.clone() };
    Ok(probs_to_annotation(&p, decode, session_id))
}

pub fn decode_session(model: &AvsdModel, s: &PreparedSession, decode: &DecodeConfig) -> Result<DiarizationAnnotation> {
    postprocess(&session_probabilities(model, s, decode)?, decode, &s.id)
}

/// Second-pass verification of one hypothesis against the session audio.
pub fn verify_session(model: &AvsdModel, raw: &RawSession, hyp: &DiarizationAnnotation, sv: &SvConfig) -> Result<DiarizationAnnotation> {
    let embedder = ExtractorEmbedder {
        store: &model.params,
        config: &model.config.encoder,
        audio: &raw.audio,
    };
    let out = correct_speakers(hyp, &embedder, sv)?;
    if !out.relabels.is_empty() {
        info!("{}: second pass relabeled {} segments", raw.id, out.relabels.len());
    }
    Ok(out.annotation)
}

/// Class index per speaker name across a corpus, in sorted name order.
pub fn speaker_classes(sessions: &[RawSession]) -> BTreeMap<String, usize> {
    let mut names: Vec<&String> = sessions.iter().flat_map(|s| s.speakers.iter()).collect();
    names.sort();
    names.dedup();
    names.into_iter().enumerate().map(|(i, n)| (n.clone(), i)).collect()
}

pub fn extractor_samples(sessions: &[RawSession], classes: &BTreeMap<String, usize>, min_segment_s: f64) -> Result<Vec<ExtractorSample>> {
    sessions
        .iter()
        .map(|s| {
            let reference = s.reference.as_ref().ok_or_else(|| CoreError::input(format!("session {} has no reference", s.id)))?;
            let segments = single_speaker_segments(reference, min_segment_s)
                .iter()
                .map(|seg| {
                    let (a, b) = segment_frames(seg, s.frame_hop_s(), s.frames());
                    (classes[&seg.speaker], a, b)
                })
                .filter(|&(_, a, b)| b > a)
                .collect();
            Ok(ExtractorSample {
                feats: s.feats.values().to_vec(),
                frames: s.frames(),
                n_mels: s.feats.n_mels(),
                segments,
            })
        })
        .collect()
}

pub fn lip_samples(sessions: &[RawSession]) -> Result<Vec<LipSample>> {
    let mut out = Vec::new();
    for s in sessions {
        let labels = s.labels()?.ok_or_else(|| CoreError::input(format!("session {} has no reference", s.id)))?;
        for (k, spk) in s.speakers.iter().enumerate() {
            if let Some(l) = s.lips.get(spk) {
                out.push(LipSample {
                    lips: l.clone(),
                    activity: labels.row(k).iter().map(|&v| v as f64).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Fresh model with pretrained lip encoder and extractor, and the speaker
/// encoder initialized from the extractor.
pub fn pretrain_model(cfg: &PipelineConfig, train: &[RawSession]) -> Result<AvsdModel> {
    let mut model = AvsdModel::new(cfg.model.clone(), cfg.seed)?;
    let classes = speaker_classes(train);
    let samples = extractor_samples(train, &classes, cfg.sv.min_segment_s)?;
    let losses = pretrain_extractor(&mut model.params, &cfg.model.encoder, &samples, classes.len(), &cfg.pretrain_extractor)?;
    info!("extractor pretraining: loss {:.4} -> {:.4}", losses.first().unwrap_or(&f64::NAN), losses.last().unwrap_or(&f64::NAN));
    let losses = pretrain_lip_encoder(&mut model.params, &cfg.model.lip, &lip_samples(train)?, &cfg.pretrain_lips)?;
    info!("lip encoder pretraining: loss {:.4} -> {:.4}", losses.first().unwrap_or(&f64::NAN), losses.last().unwrap_or(&f64::NAN));
    let copied = init_encoder_from_extractor(&mut model.params);
    info!("speaker encoder initialized from {} extractor tensors", copied.len());
    zero_output_head(&mut model)?;
    Ok(model)
}

/// Sets the decoder's output layer to zero so an untrained system predicts 0.5 everywhere.
pub fn zero_output_head(model: &mut AvsdModel) -> Result<()> {
    let pre = decoder_prefix(model.config.decoder.kind);
    for leaf in ["w", "b"] {
        model.params.get_mut(&format!("{}.head.{}", pre, leaf))?.data_mut().fill(0.0);
    }
    Ok(())
}

/// Joint training with the configured enrollment; returns per-epoch mean losses.
pub fn train_model(model: &mut AvsdModel, cfg: &PipelineConfig, train: &[RawSession], out: &TrainOutputs) -> Result<Vec<f64>> {
    let samples: Vec<TrainSample> = train
        .par_iter()
        .map(|r| prepare_session(model, r, cfg.enrollment, &cfg.decode, &cfg.sv)?.into_train_sample())
        .collect::<Result<_>>()?;
    joint_train(model, &samples, &cfg.train, out)
}

pub fn prepare_all(model: &AvsdModel, sessions: &[RawSession], enrollment: Enrollment, cfg: &PipelineConfig) -> Result<Vec<PreparedSession>> {
    sessions.par_iter().map(|r| prepare_session(model, r, enrollment, &cfg.decode, &cfg.sv)).collect()
}

pub fn references(sessions: &[RawSession]) -> BTreeMap<String, DiarizationAnnotation> {
    sessions.iter().filter_map(|s| s.reference.clone().map(|r| (s.id.clone(), r))).collect()
}

/// Result of relabeling corrupted single-speaker reference segments.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CorruptionTrial {
    pub corrupted: usize,
    pub restored: usize,
    pub clean: usize,
    pub disturbed: usize,
    pub speaker_error_before_s: f64,
    pub speaker_error_after_s: f64,
}

impl CorruptionTrial {
    pub fn restored_fraction(&self) -> f64 {
        self.restored as f64 / self.corrupted.max(1) as f64
    }

    pub fn disturbed_fraction(&self) -> f64 {
        self.disturbed as f64 / self.clean.max(1) as f64
    }
}

fn covered(ivs: &[(f64, f64)], a: f64, b: f64) -> f64 {
    ivs.iter().map(|&(x, y)| (y.min(b) - x.max(a)).max(0.0)).sum()
}

/// Swaps the speaker of `rate` of the single-speaker reference segments to
/// another speaker, runs the second pass and counts what it restores.
/// A segment counts as carrying its true label when more than half of it is
/// attributed to the true speaker in the output.
pub fn corruption_trial(model: &AvsdModel, sessions: &[RawSession], rate: f64, seed: u64, sv: &SvConfig, opts: &ScoreOptions) -> Result<CorruptionTrial> {
    let mut rng = seeded_rng(seed, "label-corruption");
    let mut trial = CorruptionTrial::default();
    for s in sessions {
        let reference = s.reference.as_ref().ok_or_else(|| CoreError::input(format!("session {} has no reference", s.id)))?;
        let segs = single_speaker_segments(reference, sv.min_segment_s);
        let mut order: Vec<usize> = (0..segs.len()).collect();
        order.shuffle(&mut rng);
        let n_bad = ((segs.len() as f64 * rate).round() as usize).min(segs.len());
        let bad: std::collections::BTreeSet<usize> = order[..n_bad].iter().copied().collect();
        let moves: Vec<(SpeakerSegment, String)> = bad
            .iter()
            .map(|&i| {
                let others: Vec<&String> = s.speakers.iter().filter(|x| **x != segs[i].speaker).collect();
                let to = others.choose(&mut rng).map(|x| (*x).clone()).unwrap_or_else(|| segs[i].speaker.clone());
                (segs[i].clone(), to)
            })
            .collect();
        let corrupted = relabel_segments(reference, &moves);
        let fixed = verify_session(model, s, &corrupted, sv)?;
        trial.speaker_error_before_s += score_session(reference, &corrupted, opts)?.components.speaker_error_s;
        trial.speaker_error_after_s += score_session(reference, &fixed, opts)?.components.speaker_error_s;
        let by_spk = fixed.intervals_by_speaker();
        for (i, seg) in segs.iter().enumerate() {
            let own = by_spk.get(&seg.speaker).map_or(0.0, |v| covered(v, seg.start_s, seg.end_s));
            let right = own > 0.5 * seg.duration_s();
            if bad.contains(&i) {
                trial.corrupted += 1;
                trial.restored += right as usize;
            } else {
                trial.clean += 1;
                trial.disturbed += (!right) as usize;
            }
        }
    }
    Ok(trial)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub system: String,
    pub false_alarm: f64,
    pub miss: f64,
    pub speaker_error: f64,
    pub der: f64,
    pub components: DerComponents,
}

impl ReportRow {
    pub fn new(system: &str, score: &CorpusScore) -> Self {
        let c = &score.total;
        Self {
            system: system.to_string(),
            false_alarm: c.false_alarm(),
            miss: c.miss(),
            speaker_error: c.speaker_error(),
            der: score.der,
            components: *c,
        }
    }
}

/// Percentage table with one line per row.
pub fn format_table(rows: &[ReportRow]) -> String {
    let w = rows.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<w$}  {:>7}  {:>7}  {:>7}  {:>7}\n", "system", "FA%", "MISS%", "SPKERR%", "DER%", w = w);
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}\n",
            r.system,
            100.0 * r.false_alarm,
            100.0 * r.miss,
            100.0 * r.speaker_error,
            100.0 * r.der,
            w = w
        ));
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct DemoReport {
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub untrained: ReportRow,
    pub epoch_losses: Vec<f64>,
    pub corruption: CorruptionTrial,
    pub stage_seconds: BTreeMap<String, f64>,
}

impl DemoReport {
    pub fn row(&self, system: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.system == system).or(Some(&self.untrained).filter(|r| r.system == system))
    }

    pub fn table(&self) -> String {
        let mut rows = vec![self.untrained.clone()];
        rows.extend(self.rows.iter().cloned());
        format_table(&rows)
    }
}

pub const ROW_UNTRAINED: &str = "untrained";
pub const ROW_BASE: &str = "base";
pub const ROW_SHIFT: &str = "+shift";
pub const ROW_MEDIAN: &str = "+median";
pub const ROW_SV: &str = "+sv";

struct Stopwatch(BTreeMap<String, f64>);

impl Stopwatch {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        info!("stage {}", stage);
        let out = f().map_err(|e| e.in_stage(stage))?;
        self.0.insert(stage.to_string(), t.elapsed().as_secs_f64());
        Ok(out)
    }
}

fn decode_all(model: &AvsdModel, prepared: &[PreparedSession], decode: &DecodeConfig) -> Result<Vec<ActivityMatrix>> {
    prepared.par_iter().map(|s| session_probabilities(model, s, decode)).collect()
}

fn annotate_all(probs: &[ActivityMatrix], prepared: &[PreparedSession], decode: &DecodeConfig) -> Result<BTreeMap<String, DiarizationAnnotation>> {
    probs.iter().zip(prepared).map(|(p, s)| Ok((s.id.clone(), postprocess(p, decode, &s.id)?))).collect()
}

/// Generates a corpus under `workdir`, pretrains, trains and decodes the dev
/// split with each post-processing step added in turn.
pub fn run_demo(cfg: &PipelineConfig, workdir: &Path) -> Result<DemoReport> {
    run_demo_with_model(cfg, workdir).map(|(r, _)| r)
}

/// [`run_demo`], also returning the trained model.
pub fn run_demo_with_model(cfg: &PipelineConfig, workdir: &Path) -> Result<(DemoReport, AvsdModel)> {
    cfg.validate()?;
    std::fs::create_dir_all(workdir).map_err(|e| CoreError::io(workdir, e))?;
    let ini = workdir.join("config.ini");
    std::fs::write(&ini, cfg.to_ini()).map_err(|e| CoreError::io(&ini, e))?;
    let mut sw = Stopwatch(BTreeMap::new());
    let corpus_dir = workdir.join("corpus");
    let manifest = sw.run("synth", || {
        generate_corpus(&corpus_dir, cfg.corpus.meetings, &cfg.corpus.meeting, cfg.seed, cfg.corpus.dev_fraction)
    })?;
    let (train, dev) = sw.run("load", || {
        Ok((load_sessions(&manifest, Some(Split::Train), true)?, load_sessions(&manifest, Some(Split::Dev), true)?))
    })?;
    if train.is_empty() || dev.is_empty() {
        return Err(CoreError::config("demo needs at least one train and one dev meeting").in_stage("load"));
    }
    let mut model = sw.run("pretrain", || pretrain_model(cfg, &train))?;
    let untrained_model = model.clone();
    let ckpt_dir = workdir.join("checkpoints");
    let epoch_losses = sw.run("train", || {
        train_model(
            &mut model,
            cfg,
            &train,
            &TrainOutputs {
                checkpoint_dir: Some(ckpt_dir.clone()),
                metrics_csv: Some(workdir.join("metrics.csv")),
                resume_from: None,
            },
        )
    })?;
    let refs = references(&dev);
    let base_cfg = DecodeConfig {
        shift_frames: cfg.decode.chunk_frames,
        median_kernel: 1,
        ..cfg.decode.clone()
    };
    let shift_cfg = DecodeConfig {
        median_kernel: 1,
        ..cfg.decode.clone()
    };
    let rows = sw.run("decode", || {
        let prepared = prepare_all(&model, &dev, cfg.enrollment, cfg)?;
        let base = annotate_all(&decode_all(&model, &prepared, &base_cfg)?, &prepared, &base_cfg)?;
        let shifted = decode_all(&model, &prepared, &shift_cfg)?;
        let shift = annotate_all(&shifted, &prepared, &shift_cfg)?;
        let median = annotate_all(&shifted, &prepared, &cfg.decode)?;
        let sv: BTreeMap<String, DiarizationAnnotation> = dev
            .par_iter()
            .map(|r| Ok((r.id.clone(), verify_session(&model, r, &median[&r.id], &cfg.sv)?)))
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (name, hyps) in [(ROW_BASE, &base), (ROW_SHIFT, &shift), (ROW_MEDIAN, &median), (ROW_SV, &sv)] {
            rows.push(ReportRow::new(name, &score_corpus(&refs, hyps, &cfg.score)?));
        }
        Ok(rows)
    })?;
    let untrained = sw.run("decode-untrained", || {
        let prepared = prepare_all(&untrained_model, &dev, cfg.enrollment, cfg)?;
        let hyps = annotate_all(&decode_all(&untrained_model, &prepared, &cfg.decode)?, &prepared, &cfg.decode)?;
        Ok(ReportRow::new(ROW_UNTRAINED, &score_corpus(&refs, &hyps, &cfg.score)?))
    })?;
    let corruption = sw.run("sv-corruption", || corruption_trial(&model, &dev, 0.1, cfg.seed, &cfg.sv, &cfg.score))?;
    let report = DemoReport {
        seed: cfg.seed,
        rows,
        untrained,
        epoch_losses,
        corruption,
        stage_seconds: sw.0,
    };
    Ok((report, model))
}

/// Sidecar config path for a checkpoint: same name with an `.ini` extension.
pub fn model_config_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("ini")
}

/// Writes the parameters and the config sidecar.
pub fn save_model(model: &AvsdModel, path: &Path) -> Result<()> {
    avsd_nn::save_checkpoint(&model.params, path).map_err(|e| crate::trainer::with_path(e, path))?;
    write_model_config(&model.config, &model_config_path(path))
}

/// Reads a model or trainer checkpoint together with its sidecar; optimizer state is dropped.
pub fn load_model(path: &Path) -> Result<AvsdModel> {
    let config = read_model_config(&model_config_path(path))?;
    let store = avsd_nn::load_checkpoint(path).map_err(|e| crate::trainer::with_path(e, path))?;
    let mut params = avsd_nn::ParameterStore::new(store.seed());
    for (name, t) in store.iter() {
        if !(name.starts_with(ADAM_M) || name.starts_with(ADAM_V) || name == STATE_KEY) {
            params.insert(name, t.clone())?;
        }
    }
    AvsdModel::from_parts(config, params)
}

/// A fresh model for `config` whose lip encoder, extractor and speaker
/// encoder come from `pretrained`; the decoder starts fresh with a zero head.
pub fn model_from_pretrained(pretrained: &AvsdModel, config: &ModelConfig, seed: u64) -> Result<AvsdModel> {
    let mut model = AvsdModel::new(config.clone(), seed)?;
    for module in [LIP_PREFIX, EXTRACTOR_PREFIX, ENCODER_PREFIX] {
        let prefix = format!("{}.", module);
        for name in model.params.names().filter(|n| n.starts_with(&prefix)).map(str::to_string).collect::<Vec<_>>() {
            let src = pretrained
                .params
                .get(&name)
                .map_err(|_| CoreError::config(format!("pretrained checkpoint lacks `{}`", name)))?;
            let dst = model.params.get_mut(&name)?;
            if src.shape() != dst.shape() {
                return Err(CoreError::config(format!(
                    "pretrained `{}` has shape {:?}, config expects {:?}",
                    name,
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
    }
    zero_output_head(&mut model)?;
    Ok(model)
}
