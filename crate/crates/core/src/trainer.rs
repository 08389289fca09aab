//! Adam training loops: extractor and lip-encoder pretraining, and joint
//! training of the speaker encoder and decoder with the other modules frozen.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use avsd_nn::layers::{linear, linear_specs};
use avsd_nn::{load_checkpoint, save_checkpoint, seeded_rng, Graph, ParameterStore, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::decodepipe::ActivityMatrix;
use crate::error::{CoreError, Result};
use crate::models::{
    extractor_forward, forward_window, lip_encoder_forward, lip_vad, module_of, normalize_utterance, AvsdModel, EncoderConfig,
    LipEncoderConfig, WindowInputs, EXTRACTOR_PREFIX, FROZEN_MODULES, LIP_PREFIX,
};
use crate::rttm::LabelMatrix;

pub const BCE_CLAMP: f64 = 1e-7;
pub(crate) const STATE_KEY: &str = "trainer.state";
pub(crate) const ADAM_M: &str = "adam.m.";
pub(crate) const ADAM_V: &str = "adam.v.";
/// Fixed logit scale applied to unit-norm embeddings in the pretraining classifier.
const CLASSIFIER_SCALE: f64 = 10.0;

/// Mean binary cross-entropy over all `S × T` cells with clamped probabilities.
pub fn bce_loss(probs: &ActivityMatrix, labels: &LabelMatrix) -> Result<f64> {
    if probs.num_speakers() != labels.num_speakers() || probs.frames != labels.frames {
        return Err(CoreError::input(format!(
            "probabilities are {}x{}, labels {}x{}",
            probs.num_speakers(),
            probs.frames,
            labels.num_speakers(),
            labels.frames
        )));
    }
    let n = probs.values().len();
    if n == 0 {
        return Err(CoreError::input("empty probability matrix"));
    }
    let mut sum = 0.0;
    for s in 0..probs.num_speakers() {
        for (p, &y) in probs.row(s).iter().zip(labels.row(s)) {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            sum -= if y != 0 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every parameter in `grads`.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(CoreError::Internal(format!("gradient shape for `{}` differs from parameter", name)));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn save_into(&self, store: &mut ParameterStore) {
        for (name, m) in &self.m {
            store.set(&format!("{}{}", ADAM_M, name), Tensor::vector(m.clone()));
        }
        for (name, v) in &self.v {
            store.set(&format!("{}{}", ADAM_V, name), Tensor::vector(v.clone()));
        }
    }

    fn load_from(&mut self, store: &ParameterStore, steps: u64) {
        self.steps = steps;
        self.m.clear();
        self.v.clear();
        for (name, t) in store.iter() {
            if let Some(p) = name.strip_prefix(ADAM_M) {
                self.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                self.v.insert(p.to_string(), t.data().to_vec());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub chunk_frames: usize,
    /// Random chunks drawn per session per epoch; 0 means `ceil(T / chunk_frames)`.
    pub chunks_per_session: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub frozen_modules: BTreeSet<String>,
    /// When false the speaker encoder keeps its initialization (ablation).
    pub train_speaker_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 8,
            chunk_frames: 600,
            chunks_per_session: 0,
            batch_size: 4,
            seed: 0,
            frozen_modules: FROZEN_MODULES.iter().map(|s| s.to_string()).collect(),
            train_speaker_encoder: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(CoreError::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.chunk_frames == 0 || self.batch_size == 0 {
            return Err(CoreError::config("chunk_frames and batch_size must be positive"));
        }
        if let Some(bad) = self.frozen_modules.iter().find(|m| !FROZEN_MODULES.contains(&m.as_str())) {
            return Err(CoreError::config(format!(
                "module `{}` cannot be frozen (allowed: {})",
                bad,
                FROZEN_MODULES.join(", ")
            )));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(self.lr, self.beta1, self.beta2, self.eps)
    }
}

/// A full training session with frozen-module outputs precomputed.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// Normalized features `[T, n_mels]`.
    pub feats: Tensor,
    pub lips: Vec<Tensor>,
    pub utts: Vec<Tensor>,
    pub labels: LabelMatrix,
}

impl TrainSample {
    pub fn frames(&self) -> usize {
        self.labels.frames
    }

    pub fn window(&self, start: usize, end: usize) -> Result<(WindowInputs, Tensor)> {
        let len = end - start;
        let w = WindowInputs {
            feats: self.feats.slice_rows(start, len)?,
            lips: self.lips.iter().map(|l| l.slice_rows(start, len)).collect::<avsd_nn::Result<_>>()?,
            utts: self.utts.clone(),
        };
        let s = self.labels.num_speakers();
        let mut y = vec![0.0; len * s];
        for i in 0..s {
            for (t, &v) in self.labels.row(i)[start..end].iter().enumerate() {
                y[t * s + i] = v as f64;
            }
        }
        Ok((w, Tensor::matrix(len, s, y)?))
    }
}

/// `(sample index, start frame, end frame)`.
pub type Chunk = (usize, usize, usize);

/// Sums per-item gradients in item order so the result does not depend on scheduling.
fn batch_gradients<F>(items: usize, f: F) -> Result<(f64, BTreeMap<String, Tensor>)>
where
    F: Fn(usize) -> Result<(f64, BTreeMap<String, Tensor>)> + Sync,
{
    let parts: Vec<(f64, BTreeMap<String, Tensor>)> = (0..items).into_par_iter().map(&f).collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for (l, grads) in parts {
        loss += l;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let k = items as f64;
    for g in total.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= k);
    }
    Ok((loss / k, total))
}

/// Joint trainer state; everything needed for a bit-exact resume is in the checkpoint.
pub struct Trainer<'a> {
    pub model: &'a mut AvsdModel,
    pub cfg: TrainConfig,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    trainable: BTreeSet<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut AvsdModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let trainable = model
            .trainable_names(cfg.train_speaker_encoder)
            .into_iter()
            .filter(|n| !cfg.frozen_modules.contains(module_of(n)))
            .collect();
        Ok(Self {
            adam: cfg.adam(),
            model,
            cfg,
            epoch: 0,
            step: 0,
            trainable,
        })
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    /// Chunks of one epoch, grouped into batches, in a seed-and-epoch-fixed order.
    pub fn epoch_plan(&self, data: &[TrainSample], epoch: usize) -> Vec<Vec<Chunk>> {
        let mut rng = seeded_rng(self.cfg.seed, &format!("epoch-{}", epoch));
        let c = self.cfg.chunk_frames;
        let mut chunks = Vec::new();
        for (i, d) in data.iter().enumerate() {
            let t = d.frames();
            let n = if self.cfg.chunks_per_session > 0 { self.cfg.chunks_per_session } else { t.div_ceil(c) };
            for _ in 0..n {
                if t <= c {
                    chunks.push((i, 0, t));
                } else {
                    let a = rng.random_range(0..=t - c);
                    chunks.push((i, a, a + c));
                }
            }
        }
        chunks.shuffle(&mut rng);
        chunks.chunks(self.cfg.batch_size).map(<[Chunk]>::to_vec).collect()
    }

    /// Loss and gradients of the trainable parameters on one chunk.
    pub fn chunk_gradients(&self, data: &[TrainSample], (i, a, b): Chunk) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let (w, y) = data[i].window(a, b)?;
        let mut g = Graph::new();
        let p = forward_window(&mut g, &self.model.params, &self.model.config, &w)?;
        let loss = g.bce(p, &y)?;
        let value = g.value(loss).item().unwrap_or(f64::NAN);
        let grads = g.backward(loss)?.into_params();
        for name in grads.keys() {
            if self.cfg.frozen_modules.contains(module_of(name)) {
                return Err(CoreError::Internal(format!("gradient requested for frozen parameter `{}`", name)));
            }
        }
        Ok((value, grads.into_iter().filter(|(n, _)| self.trainable.contains(n)).collect()))
    }

    /// One optimizer step on a batch of chunks; returns the mean loss.
    pub fn train_step(&mut self, data: &[TrainSample], batch: &[Chunk]) -> Result<f64> {
        let (loss, grads) = batch_gradients(batch.len(), |k| self.chunk_gradients(data, batch[k]))?;
        if !loss.is_finite() {
            return Err(CoreError::Internal(format!("non-finite loss at step {}", self.step)));
        }
        self.adam.update(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs epoch `self.epoch + 1` and returns its per-step losses.
    pub fn run_epoch(&mut self, data: &[TrainSample], metrics: &mut Option<MetricsLog>) -> Result<Vec<f64>> {
        let plan = self.epoch_plan(data, self.epoch);
        let mut losses = Vec::with_capacity(plan.len());
        for batch in plan {
            let l = self.train_step(data, &batch)?;
            if let Some(m) = metrics.as_mut() {
                m.record(self.step, l, self.adam.lr)?;
            }
            losses.push(l);
        }
        self.epoch += 1;
        Ok(losses)
    }

    /// Model parameters plus optimizer state and counters.
    pub fn checkpoint_store(&self) -> ParameterStore {
        let mut s = self.model.params.clone();
        self.adam.save_into(&mut s);
        s.set(STATE_KEY, Tensor::vector(vec![self.epoch as f64, self.step as f64, self.adam.steps as f64]));
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.checkpoint_store(), path).map_err(|e| with_path(e, path))
    }

    /// Restores parameters, optimizer state and counters written by [`Trainer::save`].
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let store = load_checkpoint(path).map_err(|e| with_path(e, path))?;
        let state = store
            .get(STATE_KEY)
            .map_err(|_| CoreError::format("checkpoint", format!("{} holds no trainer state", path.display())))?
            .data()
            .to_vec();
        if state.len() != 3 {
            return Err(CoreError::format("checkpoint", "trainer state must have 3 entries"));
        }
        let mut params = ParameterStore::new(self.model.params.seed());
        for (name, t) in store.iter() {
            if !(name.starts_with(ADAM_M) || name.starts_with(ADAM_V) || name == STATE_KEY) {
                params.insert(name, t.clone())?;
            }
        }
        *self.model = AvsdModel::from_parts(self.model.config.clone(), params)?;
        self.epoch = state[0] as usize;
        self.step = state[1] as u64;
        self.adam.load_from(&store, state[2] as u64);
        Ok(())
    }
}

pub(crate) fn with_path(e: avsd_nn::NnError, path: &Path) -> CoreError {
    match e {
        avsd_nn::NnError::Io(source) => CoreError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    }
}

/// CSV log of `step,loss,lr`.
pub struct MetricsLog {
    path: PathBuf,
    w: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "step,loss,lr").map_err(|e| CoreError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            w,
        })
    }

    pub fn record(&mut self, step: u64, loss: f64, lr: f64) -> Result<()> {
        writeln!(self.w, "{},{},{}", step, loss, lr).map_err(|e| CoreError::io(&self.path, e))?;
        self.w.flush().map_err(|e| CoreError::io(&self.path, e))
    }
}

/// Where joint training writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// `epoch{k}.ckpt` is written here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    pub resume_from: Option<PathBuf>,
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch{}.ckpt", epoch))
}

/// Trains for `cfg.epochs` epochs in total (counting any resumed ones) and
/// returns the mean loss of each epoch run here.
pub fn joint_train(model: &mut AvsdModel, data: &[TrainSample], cfg: &TrainConfig, out: &TrainOutputs) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(CoreError::input("no training sessions"));
    }
    let frozen_before: Vec<(String, Tensor)> = model
        .params
        .iter()
        .filter(|(n, _)| cfg.frozen_modules.contains(module_of(n)))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let mut trainer = Trainer::new(model, cfg.clone())?;
    if let Some(p) = &out.resume_from {
        trainer.restore(p)?;
    }
    let mut metrics = out.metrics_csv.as_deref().map(MetricsLog::create).transpose()?;
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let mut epoch_losses = Vec::new();
    while trainer.epoch < cfg.epochs {
        let losses = trainer.run_epoch(data, &mut metrics)?;
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        info!("epoch {} mean loss {:.4} ({} steps)", trainer.epoch, mean, losses.len());
        epoch_losses.push(mean);
        if let Some(dir) = &out.checkpoint_dir {
            let path = epoch_checkpoint_path(dir, trainer.epoch);
            trainer.save(&path)?;
            crate::config::write_model_config(&trainer.model.config, &path.with_extension("ini"))?;
        }
    }
    for (n, t) in frozen_before {
        if trainer.model.params.get(&n)? != &t {
            return Err(CoreError::Internal(format!("frozen parameter `{}` changed during training", n)));
        }
    }
    Ok(epoch_losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 300,
            batch_size: 8,
            crop_frames: 150,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.crop_frames == 0 {
            return Err(CoreError::config("pretraining needs lr > 0, batch_size > 0, crop_frames > 0"));
        }
        Ok(())
    }
}

/// Raw log-Mel values of one session with its single-speaker frame ranges.
#[derive(Clone, Debug)]
pub struct ExtractorSample {
    pub feats: Vec<f64>,
    pub frames: usize,
    pub n_mels: usize,
    /// `(class, start frame, end frame)`.
    pub segments: Vec<(usize, usize, usize)>,
}

pub const CLASSIFIER_PREFIX: &str = "speaker_classifier";

/// One training crop: frames `start..end` of `data[sample]`, labelled `class`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractorCrop {
    pub sample: usize,
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

/// Speaker-classification training of the utterance extractor with a
/// temporary cosine classifier head.
pub struct ExtractorPretrainer {
    config: EncoderConfig,
    work: ParameterStore,
    adam: Adam,
    num_classes: usize,
}

impl ExtractorPretrainer {
    pub fn new(store: &ParameterStore, cfg: &EncoderConfig, num_classes: usize, pcfg: &PretrainConfig) -> Result<Self> {
        pcfg.validate()?;
        if num_classes < 2 {
            return Err(CoreError::input(format!(
                "extractor pretraining needs at least 2 speaker identities, found {}",
                num_classes
            )));
        }
        let head_specs = linear_specs(&format!("{}.out", CLASSIFIER_PREFIX), cfg.embed_dim, num_classes);
        let head = ParameterStore::init(&head_specs, pcfg.seed)?;
        let mut work = store.filter_prefix(&format!("{}.", EXTRACTOR_PREFIX));
        work.merge_prefix(&head, CLASSIFIER_PREFIX);
        Ok(Self {
            config: cfg.clone(),
            work,
            adam: Adam::new(pcfg.lr, 0.9, 0.999, 1e-8),
            num_classes,
        })
    }

    /// One Adam step on `batch`; returns the mean cross-entropy before the update.
    /// Each crop is normalized on its own, as at embedding time.
    pub fn step(&mut self, data: &[ExtractorSample], batch: &[ExtractorCrop]) -> Result<f64> {
        if let Some(c) = batch.iter().find(|c| c.class >= self.num_classes || c.end <= c.start || c.end > data[c.sample].frames) {
            return Err(CoreError::input(format!("invalid extractor crop {:?}", c)));
        }
        let (loss, grads) = batch_gradients(batch.len(), |k| {
            let c = batch[k];
            let d = &data[c.sample];
            let x = normalize_utterance(&d.feats[c.start * d.n_mels..c.end * d.n_mels], c.end - c.start, d.n_mels)?;
            let mut g = Graph::new();
            let x = g.constant(x);
            let e = extractor_forward(&mut g, &self.work, &self.config, x)?;
            let e = g.scale(e, CLASSIFIER_SCALE);
            let logits = linear(&mut g, &self.work, &format!("{}.out", CLASSIFIER_PREFIX), e)?;
            let loss = g.cross_entropy(logits, &[c.class])?;
            let v = g.value(loss).item().unwrap_or(f64::NAN);
            Ok((v, g.backward(loss)?.into_params()))
        })?;
        self.adam.update(&mut self.work, &grads)?;
        Ok(loss)
    }

    /// Copies the trained extractor into `store`; the classifier head is discarded.
    pub fn finish(self, store: &mut ParameterStore) {
        store.merge_prefix(&self.work, &format!("{}.", EXTRACTOR_PREFIX));
    }
}

/// Speaker-classification pretraining of the utterance extractor in `store`
/// on random crops of the labelled single-speaker segments.
pub fn pretrain_extractor(
    store: &mut ParameterStore,
    cfg: &EncoderConfig,
    data: &[ExtractorSample],
    num_classes: usize,
    pcfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    let classes: BTreeSet<usize> = data.iter().flat_map(|d| d.segments.iter().map(|s| s.0)).collect();
    if classes.len() < 2 {
        return Err(CoreError::input(format!(
            "extractor pretraining needs at least 2 speaker identities, found {}",
            classes.len()
        )));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
        return Err(CoreError::input(format!("class {} out of range for {} classes", c, num_classes)));
    }
    let segs: Vec<(usize, usize, usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.segments.iter().map(move |&(c, a, b)| (i, c, a, b)))
        .filter(|&(_, _, a, b)| b > a)
        .collect();
    let mut trainer = ExtractorPretrainer::new(store, cfg, num_classes, pcfg)?;
    let mut rng = seeded_rng(pcfg.seed, "pretrain-extractor");
    let mut losses = Vec::with_capacity(pcfg.steps);
    for _ in 0..pcfg.steps {
        let batch: Vec<ExtractorCrop> = (0..pcfg.batch_size)
            .map(|_| {
                let (sample, class, a, b) = segs[rng.random_range(0..segs.len())];
                let len = (b - a).min(pcfg.crop_frames);
                let start = rng.random_range(a..=b - len);
                ExtractorCrop {
                    sample,
                    class,
                    start,
                    end: start + len,
                }
            })
            .collect();
        losses.push(trainer.step(data, &batch)?);
    }
    trainer.finish(store);
    Ok(losses)
}

/// Video-rate lip features of one speaker and that speaker's activity on the acoustic grid.
#[derive(Clone, Debug)]
pub struct LipSample {
    pub lips: Tensor,
    pub activity: Vec<f64>,
}

/// Trains the lip encoder and its visual VAD head to predict the speaker's own activity.
pub fn pretrain_lip_encoder(store: &mut ParameterStore, cfg: &LipEncoderConfig, data: &[LipSample], pcfg: &PretrainConfig) -> Result<Vec<f64>> {
    pcfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::input("no lip streams to pretrain on"));
    }
    let mut work = store.filter_prefix(&format!("{}.", LIP_PREFIX));
    let mut adam = Adam::new(pcfg.lr, 0.9, 0.999, 1e-8);
    let mut rng = seeded_rng(pcfg.seed, "pretrain-lips");
    let crop = pcfg.crop_frames.div_ceil(cfg.upsample).max(1);
    let mut losses = Vec::with_capacity(pcfg.steps);
    for _ in 0..pcfg.steps {
        let batch: Vec<(usize, usize, usize)> = (0..pcfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                let n = data[i].lips.rows().min(data[i].activity.len() / cfg.upsample);
                let len = crop.min(n);
                let a = rng.random_range(0..=n - len);
                (i, a, a + len)
            })
            .collect();
        let (loss, grads) = batch_gradients(batch.len(), |k| {
            let (i, a, b) = batch[k];
            let d = &data[i];
            let mut g = Graph::new();
            let x = g.constant(d.lips.slice_rows(a, b - a)?);
            let emb = lip_encoder_forward(&mut g, &work, cfg, x)?;
            let p = lip_vad(&mut g, &work, emb)?;
            let y = Tensor::matrix((b - a) * cfg.upsample, 1, d.activity[a * cfg.upsample..b * cfg.upsample].to_vec())?;
            let loss = g.bce(p, &y)?;
            let v = g.value(loss).item().unwrap_or(f64::NAN);
            Ok((v, g.backward(loss)?.into_params()))
        })?;
        adam.update(&mut work, &grads)?;
        losses.push(loss);
    }
    store.merge_prefix(&work, &format!("{}.", LIP_PREFIX));
    Ok(losses)
}

/// True when every frozen-module tensor in `a` equals its counterpart in `b` bit for bit.
pub fn frozen_modules_identical(a: &ParameterStore, b: &ParameterStore) -> bool {
    a.iter()
        .filter(|(n, _)| FROZEN_MODULES.contains(&module_of(n)))
        .all(|(n, t)| b.get(n).is_ok_and(|u| u.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits())))
}
