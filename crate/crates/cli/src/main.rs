//! `avsd`: synthetic data, training, decoding and scoring from the command line.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use avsd_core::config::PipelineConfig;
use avsd_core::decodepipe::save_probs;
use avsd_core::dsp::AudioSignal;
use avsd_core::models::{DecoderKind, ModelConfig};
use avsd_core::pipeline::{
    decode_session, format_table, load_model, load_sessions, model_from_pretrained, prepare_all, pretrain_model, run_demo,
    save_model, session_probabilities, postprocess, train_model, Enrollment, ReportRow,
};
use avsd_core::rttm::{parse_rttm, write_rttm, DiarizationAnnotation, ParseMode};
use avsd_core::scorer::{score_corpus, Mapping, ScoreOptions};
use avsd_core::secondsv::{correct_speakers, ExtractorEmbedder};
use avsd_core::synthgen::{generate_corpus, read_manifest, Split, MANIFEST_FILE};
use avsd_core::trainer::{epoch_checkpoint_path, TrainOutputs};
use avsd_core::wav::load_wav;
use avsd_core::CoreError;
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "avsd", version, about = "Audio-visual speaker diarization toolkit")]
struct Cli {
    /// Pipeline config file (INI sections); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for session-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Seed for every stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic meeting corpus with a JSON-lines manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        meetings: Option<usize>,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Pretrain the utterance extractor and lip encoder on the train split.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        /// Output checkpoint; the model config is written next to it as `.ini`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly train the speaker encoder and decoder.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained checkpoint providing the lip encoder, extractor and speaker encoder.
        #[arg(long)]
        init: PathBuf,
        /// Directory for per-epoch checkpoints, `metrics.csv` and `model.ckpt`.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        decoder: DecoderArg,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a per-epoch checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Keep the speaker encoder at its initialization.
        #[arg(long)]
        freeze_speaker_encoder: bool,
    },
    /// Decode sessions into one RTTM file per session.
    Decode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// `train`, `dev` or `all`.
        #[arg(long, default_value = "dev")]
        split: String,
        #[command(flatten)]
        decoder: DecoderArg,
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long)]
        shift: Option<usize>,
        /// Median kernel in frames; 1 disables filtering.
        #[arg(long)]
        median: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write raw probability dumps (`<session>.prob`).
        #[arg(long)]
        probs: bool,
        /// Enroll speakers from the reference RTTM instead of the visual VAD.
        #[arg(long)]
        oracle_enrollment: bool,
    },
    /// Score hypothesis RTTMs against references.
    Score {
        /// Reference RTTM file or directory of `.rttm` files.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Hypothesis RTTM file or directory of `.rttm` files.
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        collar: Option<f64>,
        /// `identity` or `optimal`.
        #[arg(long)]
        mapping: Option<String>,
        /// Write per-session and total scores as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Relabel single-speaker segments with the utterance extractor.
    SvCorrect {
        #[arg(long)]
        rttm: PathBuf,
        /// Directory containing `<session>.wav`.
        #[arg(long)]
        audio: PathBuf,
        /// Checkpoint holding the extractor, with its `.ini` sidecar.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Generate, pretrain, train, decode and score end to end.
    Demo {
        /// Working directory; a temporary one is used when absent.
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DecoderArg {
    /// `transformer`, `conformer` or `cross_attention`.
    #[arg(long)]
    decoder: Option<String>,
}

impl DecoderArg {
    fn kind(&self) -> Result<Option<DecoderKind>> {
        Ok(self.decoder.as_deref().map(str::parse).transpose()?)
    }
}

/// Error for a required path that does not exist.
fn missing(path: &Path) -> CoreError {
    CoreError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(ErrorKind::NotFound, "no such file or directory"),
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(missing(p).into()),
        None => Ok(()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e.root() {
                CoreError::Config(_) => 1,
                CoreError::Io { source, .. } if source.kind() == ErrorKind::NotFound => 2,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return if e.kind() == ErrorKind::NotFound { 2 } else { 3 };
        }
    }
    3
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(&[p])?;
            PipelineConfig::load(p)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn split_filter(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "dev" => Ok(Some(Split::Dev)),
        "all" => Ok(None),
        _ => Err(CoreError::config(format!("unknown split `{}` (expected train, dev or all)", s)).into()),
    }
}

/// All `.rttm` inputs under a file or directory, merged by session.
fn read_rttms(path: &Path) -> Result<BTreeMap<String, DiarizationAnnotation>> {
    require(&[path])?;
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "rttm"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut out: BTreeMap<String, DiarizationAnnotation> = BTreeMap::new();
    for f in files {
        let text = std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
        for (id, ann) in parse_rttm(&text, ParseMode::Strict).with_context(|| format!("parsing {}", f.display()))? {
            match out.get_mut(&id) {
                Some(existing) => {
                    for s in ann.entries() {
                        existing.push(&s.speaker, s.onset_s, s.duration_s)?;
                    }
                    existing.normalize();
                }
                None => {
                    out.insert(id, ann);
                }
            }
        }
    }
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth {
            out,
            meetings,
            speakers,
            duration,
        } => {
            if let Some(n) = meetings {
                cfg.corpus.meetings = n;
            }
            if let Some(s) = speakers {
                cfg.corpus.meeting.num_speakers = s;
                cfg.model.decoder.num_speakers = s;
            }
            if let Some(d) = duration {
                cfg.corpus.meeting.duration_s = d;
            }
            cfg.validate()?;
            let m = generate_corpus(&out, cfg.corpus.meetings, &cfg.corpus.meeting, cfg.seed, cfg.corpus.dev_fraction)?;
            println!("wrote {} meetings to {}", m.records.len(), out.join(MANIFEST_FILE).display());
        }
        Command::Pretrain { manifest, out } => {
            cfg.validate()?;
            require(&[&manifest])?;
            let m = read_manifest(&manifest)?;
            let train = load_sessions(&m, Some(Split::Train), true)?;
            let model = pretrain_model(&cfg, &train)?;
            save_model(&model, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train {
            manifest,
            init,
            out_dir,
            decoder,
            epochs,
            resume,
            freeze_speaker_encoder,
        } => {
            if let Some(k) = decoder.kind()? {
                cfg.model.decoder.kind = k;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if freeze_speaker_encoder {
                cfg.train.train_speaker_encoder = false;
            }
            cfg.validate()?;
            require(&[&manifest, &init])?;
            if let Some(r) = &resume {
                require(&[r])?;
            }
            let pretrained = load_model(&init)?;
            let model_cfg = ModelConfig {
                decoder: cfg.model.decoder.clone(),
                ..pretrained.config.clone()
            };
            let mut model = model_from_pretrained(&pretrained, &model_cfg, cfg.seed)?;
            let m = read_manifest(&manifest)?;
            let train = load_sessions(&m, Some(Split::Train), true)?;
            let losses = train_model(
                &mut model,
                &cfg,
                &train,
                &TrainOutputs {
                    checkpoint_dir: Some(out_dir.clone()),
                    metrics_csv: Some(out_dir.join("metrics.csv")),
                    resume_from: resume,
                },
            )?;
            for (i, l) in losses.iter().enumerate() {
                info!("epoch loss {}: {:.5}", i, l);
            }
            let path = out_dir.join("model.ckpt");
            save_model(&model, &path)?;
            println!(
                "wrote {} (last epoch checkpoint {})",
                path.display(),
                epoch_checkpoint_path(&out_dir, cfg.train.epochs).display()
            );
        }
        Command::Decode {
            manifest,
            model,
            out_dir,
            split,
            decoder,
            chunk,
            shift,
            median,
            threshold,
            probs,
            oracle_enrollment,
        } => {
            let split = split_filter(&split)?;
            let kind = decoder.kind()?;
            if let Some(c) = chunk {
                cfg.decode.chunk_frames = c;
            }
            if let Some(s) = shift {
                cfg.decode.shift_frames = s;
            }
            if let Some(k) = median {
                cfg.decode.median_kernel = k;
            }
            if let Some(t) = threshold {
                cfg.decode.threshold = t;
            }
            cfg.decode.validate()?;
            cfg.sv.validate()?;
            require(&[&manifest, &model])?;
            let model = load_model(&model)?;
            if let Some(k) = kind.filter(|k| *k != model.config.decoder.kind) {
                return Err(CoreError::config(format!("checkpoint holds a {} decoder, not {}", model.config.decoder.kind, k)).into());
            }
            let m = read_manifest(&manifest)?;
            let sessions = load_sessions(&m, split, oracle_enrollment)?;
            let enrollment = if oracle_enrollment { Enrollment::Oracle } else { Enrollment::LipVad };
            let prepared = prepare_all(&model, &sessions, enrollment, &cfg)?;
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            for s in &prepared {
                let ann = if probs {
                    let p = session_probabilities(&model, s, &cfg.decode)?;
                    save_probs(&p, &out_dir.join(format!("{}.prob", s.id)))?;
                    postprocess(&p, &cfg.decode, &s.id)?
                } else {
                    decode_session(&model, s, &cfg.decode)?
                };
                write_file(&out_dir.join(format!("{}.rttm", s.id)), &write_rttm([&ann]))?;
            }
            println!("decoded {} sessions into {}", prepared.len(), out_dir.display());
        }
        Command::Score {
            reference,
            hyp,
            collar,
            mapping,
            json,
        } => {
            let opts = ScoreOptions {
                collar_s: collar.unwrap_or(cfg.score.collar_s),
                mapping: mapping.as_deref().map(str::parse::<Mapping>).transpose()?.unwrap_or(cfg.score.mapping),
            };
            if !(opts.collar_s >= 0.0) {
                return Err(CoreError::config("collar must be non-negative").into());
            }
            let refs = read_rttms(&reference)?;
            let hyps = read_rttms(&hyp)?;
            let score = score_corpus(&refs, &hyps, &opts)?;
            let mut rows: Vec<ReportRow> = score
                .sessions
                .iter()
                .map(|s| {
                    ReportRow::new(
                        &s.session_id,
                        &avsd_core::scorer::CorpusScore {
                            sessions: vec![],
                            total: s.components,
                            der: s.der,
                        },
                    )
                })
                .collect();
            rows.push(ReportRow::new("TOTAL", &score));
            print!("{}", format_table(&rows));
            let text = serde_json::to_string_pretty(&score)?;
            match json {
                Some(p) => write_file(&p, &text)?,
                None => println!("{}", text),
            }
        }
        Command::SvCorrect {
            rttm,
            audio,
            model,
            out,
            margin,
        } => {
            if let Some(m) = margin {
                cfg.sv.reassign_margin = m;
            }
            cfg.sv.validate()?;
            require(&[&rttm, &audio, &model])?;
            let model = load_model(&model)?;
            let anns = read_rttms(&rttm)?;
            let mut fixed = Vec::new();
            for (id, ann) in &anns {
                let wav = audio.join(format!("{}.wav", id));
                require(&[&wav])?;
                let signal: AudioSignal = load_wav(&wav)?;
                let embedder = ExtractorEmbedder {
                    store: &model.params,
                    config: &model.config.encoder,
                    audio: &signal,
                };
                let res = correct_speakers(ann, &embedder, &cfg.sv)?;
                println!("{}: {} segments relabeled", id, res.relabels.len());
                fixed.push(res.annotation);
            }
            write_file(&out, &write_rttm(fixed.iter()))?;
        }
        Command::Demo { workdir, epochs, json } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let tmp;
            let dir = match workdir {
                Some(d) => d,
                None => {
                    tmp = tempfile_dir()?;
                    tmp.clone()
                }
            };
            let report = run_demo(&cfg, &dir)?;
            print!("{}", report.table());
            let c = &report.corruption;
            println!(
                "second pass on corrupted labels: {}/{} corrupted segments restored, {}/{} clean segments disturbed",
                c.restored, c.corrupted, c.disturbed, c.clean
            );
            if let Some(p) = json {
                write_file(&p, &serde_json::to_string_pretty(&report)?)?;
            }
        }
    }
    Ok(())
}

/// A fresh directory under the system temp dir, named after the process id.
fn tempfile_dir() -> Result<PathBuf> {
    let d = std::env::temp_dir().join(format!("avsd-demo-{}", std::process::id()));
    std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build_global() {
        eprintln!("error: {}", e);
        return ExitCode::from(3);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
