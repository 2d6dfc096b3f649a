//! The two-step training loop.
//!
//! Each macro-batch of `M` samples first gets frozen pseudo-targets from an
//! evaluation-mode pass in sub-batches of `m1`; then `floor(M / m2)` Adam
//! steps run on disjoint mini-batches of transformed samples.
//!
//! [`Trainer`] advances one optimizer step at a time and can be snapshotted
//! between any two steps.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamState, MacroState, RngState, TrainState};
use crate::datasets::{sample_seed, Dataset, TransformConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, BatchPredictions, LossBreakdown, LossWeights};
use crate::metrics::{evaluate, ClusteringReport};
use crate::model::{argmax_rows, Model};
use crate::nn::Param;
use crate::pseudo_targets::{compute_pseudo_targets, recalibrate_batch_norm, PseudoTargetSet, RelationMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub macro_batch: usize,
    pub sub_batch: usize,
    pub mini_batch: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Optimizer steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub transform: TransformConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            macro_batch: 1000,
            sub_batch: 100,
            mini_batch: 32,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            transform: TransformConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.macro_batch == 0 || self.sub_batch == 0 || self.mini_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        if self.mini_batch > self.macro_batch || self.sub_batch > self.macro_batch {
            return Err(Error::InvalidConfig("m1 and m2 must not exceed the macro-batch size".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        self.weights.validate()?;
        self.transform.validate()
    }

    /// Optimizer steps per epoch on a dataset of `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let m = self.macro_batch.min(n);
        (n / m) * (m / self.mini_batch)
    }
}

/// Loss breakdown of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Metrics logged at the end of an epoch.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub occupied_clusters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EpochMetrics>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

impl From<&ClusteringReport> for EpochMetrics {
    fn from(r: &ClusteringReport) -> Self {
        Self { acc: r.acc, nmi: r.nmi, ari: r.ari }
    }
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[&Param<f32>]) -> Self {
        let zeros = |p: &&Param<f32>| ArrayD::zeros(p.value.raw_dim());
        Self {
            learning_rate,
            state: AdamState { t: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() },
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param<f32>>) {
        let (b1, b2) = ADAM_BETAS;
        self.state.t += 1;
        let t = self.state.t as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = (self.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (ADAM_EPS * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for ((p, m), v) in params.into_iter().zip(&mut self.state.m).zip(&mut self.state.v) {
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * *m / (v.sqrt() + eps);
            });
        }
    }
}

struct MacroContext {
    targets: PseudoTargetSet,
    order: Vec<usize>,
    transform_seed: u64,
    steps_done: usize,
}

/// Output sink of a training run: per-step CSV, per-epoch JSON lines and
/// checkpoints.
pub struct RunLog {
    dir: PathBuf,
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl RunLog {
    pub const STEP_LOG: &'static str = "loss.csv";
    pub const EPOCH_LOG: &'static str = "epochs.jsonl";
    pub const CHECKPOINT_DIR: &'static str = "checkpoints";

    /// Opens the logs in `dir`, appending when they already exist.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join(Self::CHECKPOINT_DIR))?;
        let step_path = dir.join(Self::STEP_LOG);
        let fresh = !step_path.exists();
        let mut steps = BufWriter::new(OpenOptions::new().create(true).append(true).open(&step_path)?);
        if fresh {
            writeln!(steps, "epoch,step,l_r,l_t,l_a,l_e,total")?;
        }
        let epochs = BufWriter::new(OpenOptions::new().create(true).append(true).open(dir.join(Self::EPOCH_LOG))?);
        Ok(Self { dir: dir.to_path_buf(), steps, epochs })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join(Self::CHECKPOINT_DIR).join(name)
    }

    fn step(&mut self, r: &StepRecord) -> Result<()> {
        let l = &r.loss;
        writeln!(self.steps, "{},{},{},{},{},{},{}", r.epoch, r.step, l.l_r, l.l_t, l.l_a, l.l_e, l.total)?;
        Ok(())
    }

    fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.epochs, r)?;
        writeln!(self.epochs)?;
        self.epochs.flush()?;
        self.steps.flush()?;
        Ok(())
    }
}

/// What a call to [`Trainer::step`] did.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Stepped(StepRecord),
    Finished,
}

pub struct Trainer<'d> {
    data: &'d Dataset,
    model: Model,
    cfg: TrainConfig,
    macro_size: usize,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    macro_index: usize,
    global_step: u64,
    epoch_order: Vec<usize>,
    context: Option<MacroContext>,
    history: Vec<StepRecord>,
    step1_peak: usize,
    log: Option<RunLog>,
    target_dump: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d Dataset, model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Self::check_compatible(data, &model)?;
        let macro_size = Self::macro_size(data, &cfg)?;
        let adam = Adam::new(cfg.learning_rate, &model.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            data,
            model,
            macro_size,
            adam,
            rng,
            epoch: 0,
            macro_index: 0,
            global_step: 0,
            epoch_order: Vec::new(),
            context: None,
            history: Vec::new(),
            step1_peak: 0,
            log: None,
            target_dump: None,
            cfg,
        })
    }

    fn macro_size(data: &Dataset, cfg: &TrainConfig) -> Result<usize> {
        let m = cfg.macro_batch.min(data.len());
        if m < cfg.mini_batch {
            return Err(Error::TooFewSamples { needed: cfg.mini_batch, got: data.len() });
        }
        if m < cfg.macro_batch {
            log::warn!("macro-batch {} clipped to the dataset size {m}", cfg.macro_batch);
        }
        Ok(m)
    }

    fn check_compatible(data: &Dataset, model: &Model) -> Result<()> {
        let mc = model.config();
        if mc.input_size != data.image_size() || mc.in_channels != data.output_channels() {
            return Err(Error::Incompatible(format!(
                "model expects {}x{:?} inputs, dataset yields {}x{:?}",
                mc.in_channels,
                mc.input_size,
                data.output_channels(),
                data.image_size()
            )));
        }
        if mc.cluster_count < 2 || data.len() < mc.cluster_count {
            return Err(Error::TooFewSamples { needed: mc.cluster_count, got: data.len() });
        }
        Ok(())
    }

    /// Attaches output logs; checkpoints go to the log directory.
    pub fn with_log(mut self, log: RunLog) -> Self {
        self.log = Some(log);
        self
    }

    /// Writes every macro-batch's pseudo-targets into `dir`.
    pub fn with_target_dump(mut self, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        self.target_dump = Some(dir);
        Ok(self)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Most decoded images alive at once during any Step one so far.
    pub fn step1_peak_images(&self) -> usize {
        self.step1_peak
    }

    fn macro_count(&self) -> usize {
        self.data.len() / self.macro_size
    }

    fn steps_per_macro(&self) -> usize {
        self.macro_size / self.cfg.mini_batch
    }

    fn begin_macro(&mut self) -> Result<()> {
        if self.epoch_order.is_empty() {
            self.epoch_order = self.data.all_indices();
            self.epoch_order.shuffle(&mut self.rng);
        }
        let start = self.macro_index * self.macro_size;
        let indices = self.epoch_order[start..start + self.macro_size].to_vec();
        let kmeans_seed = self.rng.random();
        let tracker = self.data.tracker();
        tracker.reset_peak();
        let k = self.model.config().cluster_count;
        recalibrate_batch_norm(&mut self.model, self.data, &indices, self.cfg.sub_batch)?;
        let targets = compute_pseudo_targets(&self.model, self.data, &indices, self.cfg.sub_batch, k, kmeans_seed)?;
        self.step1_peak = self.step1_peak.max(tracker.peak());
        if let Some(dir) = &self.target_dump {
            targets.write_dump(&dir.join(format!("epoch{:03}_macro{:03}.bin", self.epoch, self.macro_index)))?;
        }
        let mut order: Vec<usize> = (0..self.macro_size).collect();
        order.shuffle(&mut self.rng);
        let transform_seed = self.rng.random();
        self.context = Some(MacroContext { targets, order, transform_seed, steps_done: 0 });
        Ok(())
    }

    /// Runs one optimizer step, computing pseudo-targets first when a new
    /// macro-batch starts.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.is_finished() {
            return Ok(StepOutcome::Finished);
        }
        if self.context.is_none() {
            self.begin_macro()?;
        }
        let m2 = self.cfg.mini_batch;
        let (sub, seeds) = {
            let ctx = self.context.as_ref().expect("macro context");
            let positions = &ctx.order[ctx.steps_done * m2..(ctx.steps_done + 1) * m2];
            let seeds: Vec<u64> = positions.iter().map(|&p| sample_seed(ctx.transform_seed, p as u64)).collect();
            (ctx.targets.select(positions), seeds)
        };
        let loss = {
            let batch = self.data.transformed_batch(&sub.sample_indices, &self.cfg.transform, &seeds)?;
            let out = self.model.forward_train(batch.samples())?;
            let label = out.label.mapv(|v| v as f64);
            let attention_label = out.attention_label.mapv(|v| v as f64);
            let preds = BatchPredictions {
                label: label.view(),
                attention_label: attention_label.view(),
                sample_indices: &sub.sample_indices,
            };
            let (loss, grads) = total_loss(&preds, &sub, &self.cfg.weights)?;
            let finite = grads.label.iter().chain(grads.attention_label.iter()).all(|g| g.is_finite());
            if !loss.is_finite() || !finite {
                return Err(self.abort(&loss));
            }
            self.model.zero_grad();
            self.model.backward(&grads.label.mapv(|v| v as f32), &grads.attention_label.mapv(|v| v as f32))?;
            loss
        };
        self.adam.step(self.model.params_mut());
        self.global_step += 1;
        let record = StepRecord { epoch: self.epoch, step: self.global_step, loss };
        self.history.push(record.clone());
        if let Some(log) = &mut self.log {
            log.step(&record)?;
        }

        let ctx = self.context.as_mut().expect("macro context");
        ctx.steps_done += 1;
        if ctx.steps_done == self.steps_per_macro() {
            self.context = None;
            self.macro_index += 1;
            if self.macro_index == self.macro_count() {
                self.finish_epoch()?;
            }
        }
        if self.cfg.checkpoint_every > 0 && self.global_step % self.cfg.checkpoint_every == 0 {
            if let Some(log) = &self.log {
                let path = log.checkpoint_path(&format!("step_{:06}.ckpt", self.global_step));
                self.state().save(&path)?;
            }
        }
        Ok(StepOutcome::Stepped(record))
    }

    fn abort(&self, loss: &LossBreakdown) -> Error {
        let detail = format!(
            "l_r={} l_t={} l_a={} l_e={} total={}",
            loss.l_r, loss.l_t, loss.l_a, loss.l_e, loss.total
        );
        log::error!("aborting: non-finite loss at step {}: {detail}", self.global_step + 1);
        if let Some(log) = &self.log {
            let path = log.checkpoint_path("last_finite.ckpt");
            if let Err(e) = self.state().save(&path) {
                log::error!("could not save the last finite state: {e}");
            }
        }
        Error::NonFiniteLoss { step: self.global_step + 1, detail }
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let finished = self.epoch;
        self.epoch += 1;
        self.macro_index = 0;
        self.epoch_order.clear();
        if self.log.is_none() && !self.is_finished() {
            return Ok(());
        }
        let all = self.data.all_indices();
        recalibrate_batch_norm(&mut self.model, self.data, &all, self.cfg.sub_batch)?;
        if self.log.is_none() {
            return Ok(());
        }
        let recent: Vec<f64> =
            self.history.iter().filter(|r| r.epoch == finished).map(|r| r.loss.total).collect();
        let ids = final_inference(&self.model, self.data, self.cfg.sub_batch)?;
        let mut occupied = vec![false; self.model.config().cluster_count];
        for &c in &ids {
            occupied[c] = true;
        }
        let report = match self.data.ground_truth() {
            Some(truth) => Some(EpochMetrics::from(&evaluate(&ids, truth)?)),
            None => None,
        };
        let record = EpochRecord {
            epoch: finished,
            steps: self.global_step,
            mean_loss: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
            occupied_clusters: occupied.iter().filter(|&&o| o).count(),
            report,
        };
        if let Some(acc) = record.report.as_ref().map(|r| r.acc) {
            log::info!("epoch {finished}: loss {:.4} acc {acc:.4}", record.mean_loss);
        } else {
            log::info!("epoch {finished}: loss {:.4}", record.mean_loss);
        }
        if let Some(log) = &mut self.log {
            log.epoch(&record)?;
        }
        Ok(())
    }

    /// Runs until every epoch is done.
    pub fn run(&mut self) -> Result<()> {
        while let StepOutcome::Stepped(_) = self.step()? {}
        if let Some(log) = &self.log {
            self.state().save(&log.checkpoint_path("final.ckpt"))?;
        }
        Ok(())
    }

    /// Snapshot of the complete training state.
    pub fn state(&self) -> TrainState {
        let macro_state = self.context.as_ref().map(|c| MacroState {
            sample_indices: c.targets.sample_indices.clone(),
            balanced: c.targets.balanced.iter().copied().collect(),
            attention: c.targets.attention.iter().copied().collect(),
            relations: c.targets.relations.assignments().to_vec(),
            order: c.order.clone(),
            transform_seed: c.transform_seed,
            steps_done: c.steps_done,
        });
        let pos = self.rng.get_word_pos();
        TrainState {
            model_config: self.model.config().clone(),
            train_config: self.cfg.clone(),
            params: self.model.params().iter().map(|p| p.value.clone()).collect(),
            buffers: self.model.buffers().into_iter().cloned().collect(),
            adam: self.adam.state.clone(),
            epoch: self.epoch,
            macro_index: self.macro_index,
            global_step: self.global_step,
            epoch_order: self.epoch_order.clone(),
            macro_state,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: [(pos >> 64) as u64, pos as u64],
            },
            history: self.history.clone(),
        }
    }

    /// Restores a trainer from a snapshot taken on the same dataset.
    pub fn from_state(data: &'d Dataset, state: TrainState) -> Result<Self> {
        let model = state.model()?;
        Self::check_compatible(data, &model)?;
        let cfg = state.train_config;
        cfg.validate()?;
        let macro_size = Self::macro_size(data, &cfg)?;
        if state.adam.m.len() != state.params.len() || state.adam.v.len() != state.params.len() {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        if !state.epoch_order.is_empty() && state.epoch_order.len() != data.len() {
            return Err(Error::Incompatible("checkpoint was taken on a dataset of different size".into()));
        }
        let k = model.config().cluster_count;
        let context = match state.macro_state {
            None => None,
            Some(ms) => {
                let m = ms.sample_indices.len();
                if m != macro_size || ms.balanced.len() != m * k || ms.attention.len() != m * k {
                    return Err(Error::Incompatible("stored pseudo-targets do not fit this run".into()));
                }
                let shape = |v: Vec<f64>| Array2::from_shape_vec((m, k), v).expect("checked length");
                Some(MacroContext {
                    targets: PseudoTargetSet {
                        balanced: shape(ms.balanced),
                        relations: RelationMatrix::from_assignments(ms.relations),
                        attention: shape(ms.attention),
                        sample_indices: ms.sample_indices,
                    },
                    order: ms.order,
                    transform_seed: ms.transform_seed,
                    steps_done: ms.steps_done,
                })
            }
        };
        let mut rng = ChaCha8Rng::from_seed(state.rng.seed);
        rng.set_stream(state.rng.stream);
        rng.set_word_pos(((state.rng.word_pos[0] as u128) << 64) | state.rng.word_pos[1] as u128);
        let adam = Adam { learning_rate: cfg.learning_rate, state: state.adam };
        Ok(Self {
            data,
            model,
            macro_size,
            adam,
            rng,
            epoch: state.epoch,
            macro_index: state.macro_index,
            global_step: state.global_step,
            epoch_order: state.epoch_order,
            context,
            history: state.history,
            step1_peak: 0,
            log: None,
            target_dump: None,
            cfg,
        })
    }
}

/// Trains `model` on `data` for the configured epochs.
pub fn train(data: &Dataset, model: Model, cfg: TrainConfig) -> Result<(TrainState, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(data, model, cfg)?;
    trainer.run()?;
    Ok((trainer.state(), trainer.history().to_vec()))
}

/// Reopens a checkpoint for continued training on `data`.
pub fn resume<'d>(path: &Path, data: &'d Dataset) -> Result<Trainer<'d>> {
    Trainer::from_state(data, TrainState::load(path)?)
}

/// Cluster id of every sample, evaluated `batch_size` samples at a time.
pub fn final_inference(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let features = label_features(model, data, batch_size)?;
    Ok(argmax_rows(&features))
}

/// Evaluation-mode label features of every sample.
pub fn label_features(model: &Model, data: &Dataset, batch_size: usize) -> Result<Array2<f32>> {
    let k = model.config().cluster_count;
    let mut out = Array2::zeros((0, k));
    for chunk in data.all_indices().chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let l = model.label_features_eval(batch.samples())?;
        out.append(Axis(0), l.view()).expect("k columns");
    }
    Ok(out)
}
