//! INI-style configuration files: `[section]` headers, `key = value` lines,
//! `#` or `;` comments. Unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::decodepipe::DecodeConfig;
use crate::dsp::DEFAULT_N_MELS;
use crate::error::{CoreError, Result};
use crate::pipeline::Enrollment;
use crate::models::{DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, LipEncoderConfig, ModelConfig, Preset};
use crate::scorer::{Mapping, ScoreOptions};
use crate::secondsv::SvConfig;
use crate::synthgen::MeetingSpec;
use crate::trainer::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    /// section -> key -> (value, line number)
    pub sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

fn ini_err(line: usize, msg: impl Into<String>) -> CoreError {
    CoreError::config(format!("config line {}: {}", line, msg.into()))
}

pub fn parse_ini(text: &str) -> Result<Ini> {
    let mut ini = Ini::default();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| ini_err(n, format!("malformed section header `{}`", line)))?;
            if ini.sections.contains_key(name) {
                return Err(ini_err(n, format!("section [{}] appears twice", name)));
            }
            ini.sections.insert(name.to_string(), BTreeMap::new());
            current = Some(name.to_string());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ini_err(n, format!("expected `key = value`, got `{}`", line)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ini_err(n, "empty key"));
        }
        let sec = current.as_ref().ok_or_else(|| ini_err(n, format!("key `{}` outside any section", k)))?;
        let map = ini.sections.get_mut(sec).expect("section inserted above");
        if map.insert(k.to_string(), (v.to_string(), n)).is_some() {
            return Err(ini_err(n, format!("key `{}` repeated in [{}]", k, sec)));
        }
    }
    Ok(ini)
}

/// Typed access to one section; keys not read before [`Section::finish`] are errors.
pub struct Section<'a> {
    name: &'a str,
    entries: BTreeMap<&'a str, &'a (String, usize)>,
}

impl<'a> Section<'a> {
    fn new(ini: &'a Ini, name: &'a str) -> Self {
        let entries = ini.sections.get(name).map(|m| m.iter().map(|(k, v)| (k.as_str(), v)).collect()).unwrap_or_default();
        Self { name, entries }
    }

    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((v, line)) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|e| ini_err(*line, format!("[{}] {} = `{}`: {}", self.name, key, v, e)))?;
        }
        Ok(())
    }

    pub fn take_list(&mut self, key: &str, slot: &mut Vec<usize>) -> Result<()> {
        if let Some((v, line)) = self.entries.remove(key) {
            *slot = v
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ini_err(*line, format!("[{}] {} = `{}`: {}", self.name, key, v, e)))?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((k, (_, line))) => Err(ini_err(*line, format!("unknown key `{}` in [{}]", k, self.name))),
            None => Ok(()),
        }
    }
}

impl FromStr for Mapping {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Mapping::Identity),
            "optimal" => Ok(Mapping::Optimal),
            _ => Err(CoreError::config(format!("unknown mapping `{}` (expected identity or optimal)", s))),
        }
    }
}

impl Mapping {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mapping::Identity => "identity",
            Mapping::Optimal => "optimal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub meetings: usize,
    pub dev_fraction: f64,
    pub meeting: MeetingSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            meetings: 12,
            dev_fraction: 0.34,
            // weak lips and noisy audio so that no single cue is enough
            meeting: MeetingSpec {
                snr_db: -9.0,
                lip_amplitude: 0.8,
                ..MeetingSpec::default()
            },
        }
    }
}

/// Settings for every pipeline stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain_extractor: PretrainConfig,
    pub pretrain_lips: PretrainConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// How target speakers are enrolled, in training and decoding alike.
    pub enrollment: Enrollment,
    pub sv: SvConfig,
    pub score: ScoreOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        Self {
            seed: 0,
            model: ModelConfig::toy(DecoderKind::Transformer, corpus.meeting.num_speakers, DEFAULT_N_MELS),
            corpus,
            pretrain_extractor: PretrainConfig::default(),
            pretrain_lips: PretrainConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            enrollment: Enrollment::LipVad,
            sv: SvConfig::default(),
            score: ScoreOptions::default(),
        }
    }
}

const SECTIONS: [&str; 11] = [
    "general",
    "synth",
    "lip_encoder",
    "speaker_encoder",
    "decoder",
    "pretrain_extractor",
    "pretrain_lips",
    "train",
    "decode",
    "sv",
    "score",
];

fn read_lip(s: &mut Section, c: &mut LipEncoderConfig) -> Result<()> {
    s.take("input_dim", &mut c.input_dim)?;
    s.take("embed_dim", &mut c.embed_dim)?;
    s.take("heads", &mut c.heads)?;
    s.take("ffn_dim", &mut c.ffn_dim)?;
    s.take("layers", &mut c.layers)?;
    s.take("conv_kernel", &mut c.conv_kernel)?;
    s.take("upsample", &mut c.upsample)
}

fn read_encoder(s: &mut Section, c: &mut EncoderConfig) -> Result<()> {
    let (mut kind, mut preset) = (c.kind, c.preset);
    s.take("kind", &mut kind)?;
    s.take("preset", &mut preset)?;
    if (kind, preset) != (c.kind, c.preset) {
        *c = EncoderConfig::preset(kind, preset, c.n_mels);
    }
    s.take_list("channels", &mut c.channels)?;
    s.take("se_channels", &mut c.se_channels)?;
    s.take("embed_dim", &mut c.embed_dim)?;
    s.take("n_mels", &mut c.n_mels)
}

fn read_decoder(s: &mut Section, c: &mut DecoderConfig) -> Result<()> {
    s.take("layers", &mut c.layers)?;
    s.take("heads", &mut c.heads)?;
    s.take("model_dim", &mut c.model_dim)?;
    s.take("ffn_dim", &mut c.ffn_dim)?;
    s.take("conv_kernel", &mut c.conv_kernel)?;
    s.take("num_speakers", &mut c.num_speakers)
}

/// Reads `[lip_encoder]`, `[speaker_encoder]`, `[decoder]` and the matching
/// `[decoder.<kind>]` override section into `model`.
fn read_model(ini: &Ini, model: &mut ModelConfig) -> Result<()> {
    let mut s = Section::new(ini, "lip_encoder");
    read_lip(&mut s, &mut model.lip)?;
    s.finish()?;
    let mut s = Section::new(ini, "speaker_encoder");
    read_encoder(&mut s, &mut model.encoder)?;
    s.finish()?;
    let mut s = Section::new(ini, "decoder");
    s.take("kind", &mut model.decoder.kind)?;
    read_decoder(&mut s, &mut model.decoder)?;
    s.finish()?;
    for kind in DecoderKind::ALL {
        let name = format!("decoder.{}", kind);
        if !ini.sections.contains_key(&name) {
            continue;
        }
        let mut scratch = model.decoder.clone();
        let target = if kind == model.decoder.kind { &mut model.decoder } else { &mut scratch };
        let mut s = Section::new(ini, &name);
        read_decoder(&mut s, target)?;
        s.finish()?;
    }
    Ok(())
}

fn check_sections(ini: &Ini, allowed: &[&str]) -> Result<()> {
    for name in ini.sections.keys() {
        let ok = allowed.contains(&name.as_str())
            || name.strip_prefix("decoder.").is_some_and(|k| k.parse::<DecoderKind>().is_ok());
        if !ok {
            let line = ini.sections[name].values().map(|v| v.1).min().unwrap_or(0);
            return Err(CoreError::config(format!("unknown section [{}] (near line {})", name, line)));
        }
    }
    Ok(())
}

fn read_pretrain(ini: &Ini, name: &str, c: &mut PretrainConfig) -> Result<()> {
    let mut s = Section::new(ini, name);
    s.take("lr", &mut c.lr)?;
    s.take("steps", &mut c.steps)?;
    s.take("batch_size", &mut c.batch_size)?;
    s.take("crop_frames", &mut c.crop_frames)?;
    s.finish()
}

impl PipelineConfig {
    pub fn from_ini(text: &str) -> Result<Self> {
        let ini = parse_ini(text)?;
        check_sections(&ini, &SECTIONS)?;
        let mut c = PipelineConfig::default();

        let mut s = Section::new(&ini, "general");
        s.take("seed", &mut c.seed)?;
        s.finish()?;

        let mut s = Section::new(&ini, "synth");
        let m = &mut c.corpus.meeting;
        s.take("meetings", &mut c.corpus.meetings)?;
        s.take("dev_fraction", &mut c.corpus.dev_fraction)?;
        s.take("num_speakers", &mut m.num_speakers)?;
        s.take("duration_s", &mut m.duration_s)?;
        s.take("overlap_ratio", &mut m.overlap_ratio)?;
        s.take("snr_db", &mut m.snr_db)?;
        s.take("video_fps", &mut m.video_fps)?;
        s.take("lip_dim", &mut m.lip_dim)?;
        s.take("lip_amplitude", &mut m.lip_amplitude)?;
        s.take("sample_rate_hz", &mut m.sample_rate_hz)?;
        s.finish()?;
        c.model.decoder.num_speakers = c.corpus.meeting.num_speakers;
        c.model.lip.input_dim = c.corpus.meeting.lip_dim;

        read_model(&ini, &mut c.model)?;
        read_pretrain(&ini, "pretrain_extractor", &mut c.pretrain_extractor)?;
        read_pretrain(&ini, "pretrain_lips", &mut c.pretrain_lips)?;

        let mut s = Section::new(&ini, "train");
        let t = &mut c.train;
        s.take("lr", &mut t.lr)?;
        s.take("beta1", &mut t.beta1)?;
        s.take("beta2", &mut t.beta2)?;
        s.take("eps", &mut t.eps)?;
        s.take("epochs", &mut t.epochs)?;
        s.take("chunk_frames", &mut t.chunk_frames)?;
        s.take("chunks_per_session", &mut t.chunks_per_session)?;
        s.take("batch_size", &mut t.batch_size)?;
        s.take("train_speaker_encoder", &mut t.train_speaker_encoder)?;
        let mut frozen = t.frozen_modules.iter().cloned().collect::<Vec<_>>().join(",");
        s.take("frozen_modules", &mut frozen)?;
        t.frozen_modules = frozen.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::to_string).collect();
        s.finish()?;

        let mut s = Section::new(&ini, "decode");
        let d = &mut c.decode;
        s.take("chunk_frames", &mut d.chunk_frames)?;
        s.take("shift_frames", &mut d.shift_frames)?;
        s.take("median_kernel", &mut d.median_kernel)?;
        s.take("threshold", &mut d.threshold)?;
        s.take("min_segment_s", &mut d.min_segment_s)?;
        s.take("min_gap_s", &mut d.min_gap_s)?;
        s.take("enrollment", &mut c.enrollment)?;
        s.finish()?;

        let mut s = Section::new(&ini, "sv");
        s.take("min_segment_s", &mut c.sv.min_segment_s)?;
        s.take("margin", &mut c.sv.reassign_margin)?;
        s.take("enroll_k", &mut c.sv.enroll_k)?;
        s.finish()?;

        let mut s = Section::new(&ini, "score");
        s.take("collar_s", &mut c.score.collar_s)?;
        s.take("mapping", &mut c.score.mapping)?;
        s.finish()?;

        c.set_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_ini(&text)
    }

    /// Propagates the global seed into every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.meeting.seed = seed;
        self.pretrain_extractor.seed = seed;
        self.pretrain_lips.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.meeting.validate()?;
        if self.corpus.meetings == 0 || !(0.0..1.0).contains(&self.corpus.dev_fraction) {
            return Err(CoreError::config("[synth] needs meetings > 0 and dev_fraction in [0, 1)"));
        }
        self.model.validate()?;
        if self.model.decoder.num_speakers != self.corpus.meeting.num_speakers {
            return Err(CoreError::config(format!(
                "decoder num_speakers {} differs from synth num_speakers {}",
                self.model.decoder.num_speakers, self.corpus.meeting.num_speakers
            )));
        }
        if self.model.lip.input_dim != self.corpus.meeting.lip_dim {
            return Err(CoreError::config(format!(
                "lip encoder input_dim {} differs from synth lip_dim {}",
                self.model.lip.input_dim, self.corpus.meeting.lip_dim
            )));
        }
        self.pretrain_extractor.validate()?;
        self.pretrain_lips.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.sv.validate()?;
        if !(self.score.collar_s >= 0.0) {
            return Err(CoreError::config("[score] collar_s must be non-negative"));
        }
        Ok(())
    }

    /// Full configuration as an INI file that [`PipelineConfig::from_ini`] reads back.
    pub fn to_ini(&self) -> String {
        let mut o = String::new();
        let m = &self.corpus.meeting;
        let _ = write!(
            o,
            "[general]\nseed = {}\n\n[synth]\nmeetings = {}\ndev_fraction = {}\nnum_speakers = {}\nduration_s = {}\noverlap_ratio = {}\nsnr_db = {}\nvideo_fps = {}\nlip_dim = {}\nlip_amplitude = {}\nsample_rate_hz = {}\n\n",
            self.seed,
            self.corpus.meetings,
            self.corpus.dev_fraction,
            m.num_speakers,
            m.duration_s,
            m.overlap_ratio,
            m.snr_db,
            m.video_fps,
            m.lip_dim,
            m.lip_amplitude,
            m.sample_rate_hz
        );
        o.push_str(&model_config_ini(&self.model));
        for (name, p) in [("pretrain_extractor", &self.pretrain_extractor), ("pretrain_lips", &self.pretrain_lips)] {
            let _ = write!(
                o,
                "\n[{}]\nlr = {}\nsteps = {}\nbatch_size = {}\ncrop_frames = {}\n",
                name, p.lr, p.steps, p.batch_size, p.crop_frames
            );
        }
        let t = &self.train;
        let _ = write!(
            o,
            "\n[train]\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nepochs = {}\nchunk_frames = {}\nchunks_per_session = {}\nbatch_size = {}\ntrain_speaker_encoder = {}\nfrozen_modules = {}\n",
            t.lr,
            t.beta1,
            t.beta2,
            t.eps,
            t.epochs,
            t.chunk_frames,
            t.chunks_per_session,
            t.batch_size,
            t.train_speaker_encoder,
            t.frozen_modules.iter().cloned().collect::<Vec<_>>().join(",")
        );
        let d = &self.decode;
        let _ = write!(
            o,
            "\n[decode]\nchunk_frames = {}\nshift_frames = {}\nmedian_kernel = {}\nthreshold = {}\nmin_segment_s = {}\nmin_gap_s = {}\nenrollment = {}\n",
            d.chunk_frames,
            d.shift_frames,
            d.median_kernel,
            d.threshold,
            d.min_segment_s,
            d.min_gap_s,
            self.enrollment.as_str()
        );
        let _ = write!(
            o,
            "\n[sv]\nmin_segment_s = {}\nmargin = {}\nenroll_k = {}\n\n[score]\ncollar_s = {}\nmapping = {}\n",
            self.sv.min_segment_s,
            self.sv.reassign_margin,
            self.sv.enroll_k,
            self.score.collar_s,
            self.score.mapping.as_str()
        );
        o
    }
}

/// The `[lip_encoder]`, `[speaker_encoder]` and `[decoder]` sections describing `cfg`.
pub fn model_config_ini(cfg: &ModelConfig) -> String {
    let l = &cfg.lip;
    let e = &cfg.encoder;
    let d = &cfg.decoder;
    format!(
        "[lip_encoder]\ninput_dim = {}\nembed_dim = {}\nheads = {}\nffn_dim = {}\nlayers = {}\nconv_kernel = {}\nupsample = {}\n\n\
         [speaker_encoder]\nkind = {}\npreset = {}\nchannels = {}\nse_channels = {}\nembed_dim = {}\nn_mels = {}\n\n\
         [decoder]\nkind = {}\nlayers = {}\nheads = {}\nmodel_dim = {}\nffn_dim = {}\nconv_kernel = {}\nnum_speakers = {}\n",
        l.input_dim,
        l.embed_dim,
        l.heads,
        l.ffn_dim,
        l.layers,
        l.conv_kernel,
        l.upsample,
        e.kind,
        e.preset,
        e.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        e.se_channels,
        e.embed_dim,
        e.n_mels,
        d.kind,
        d.layers,
        d.heads,
        d.model_dim,
        d.ffn_dim,
        d.conv_kernel,
        d.num_speakers
    )
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let ini = parse_ini(text)?;
    check_sections(&ini, &["lip_encoder", "speaker_encoder", "decoder"])?;
    let mut cfg = ModelConfig::toy(DecoderKind::Transformer, 2, DEFAULT_N_MELS);
    cfg.encoder = EncoderConfig::preset(EncoderKind::ResnetSe, Preset::Toy, DEFAULT_N_MELS);
    read_model(&ini, &mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Model sidecar written next to each checkpoint.
pub fn write_model_config(cfg: &ModelConfig, path: &Path) -> Result<()> {
    std::fs::write(path, model_config_ini(cfg)).map_err(|e| CoreError::io(path, e))
}

pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_model_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let mut c = PipelineConfig::default();
        c.set_seed(7);
        c.model.decoder.kind = DecoderKind::Conformer;
        c.decode.shift_frames = 600;
        c.train.train_speaker_encoder = false;
        c.enrollment = Enrollment::Oracle;
        assert_eq!(PipelineConfig::from_ini(&c.to_ini()).unwrap(), c);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = PipelineConfig::from_ini("[decode]\nthreshold = 0.4\n\nshfit_frames = 10\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4") && msg.contains("shfit_frames"), "{}", msg);
    }

    #[test]
    fn unknown_section_and_bad_values() {
        assert!(PipelineConfig::from_ini("[decoders]\n").is_err());
        assert!(PipelineConfig::from_ini("[decoder]\nkind = lstm\n").is_err());
        assert!(PipelineConfig::from_ini("[train]\nlr = -1\n").is_err());
        assert!(PipelineConfig::from_ini("seed = 1\n").is_err());
        assert!(PipelineConfig::from_ini("[train]\nfrozen_modules = decoder\n").is_err());
    }

    #[test]
    fn kind_override_section_applies_only_to_selected_kind() {
        let text = "[decoder]\nkind = conformer\n[decoder.conformer]\nlayers = 3\n[decoder.transformer]\nlayers = 5\n";
        let c = PipelineConfig::from_ini(text).unwrap();
        assert_eq!(c.model.decoder.kind, DecoderKind::Conformer);
        assert_eq!(c.model.decoder.layers, 3);
        assert!(PipelineConfig::from_ini("[decoder.transformer]\nlayerz = 5\n").is_err());
    }

    #[test]
    fn model_sidecar_round_trip() {
        let mut m = ModelConfig::toy(DecoderKind::CrossAttention, 3, 40);
        m.encoder = EncoderConfig::preset(EncoderKind::EcapaTdnn, Preset::Toy, 40);
        assert_eq!(parse_model_config(&model_config_ini(&m)).unwrap(), m);
    }
}
