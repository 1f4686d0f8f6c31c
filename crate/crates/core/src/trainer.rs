//! Episodic joint training and the batch-wise baseline.
//!
//! Every step is a pure function of `(seed, step index)` for its data, so a
//! run can be checkpointed and resumed without replaying earlier steps.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AdamConfig, RunConfig, TrainMode};
use crate::dataset::{
    load_class_dataset, load_unlabeled_pool, split_classes, ClassDataset, DatasetSplit, Sample,
    UnlabeledPool,
};
use crate::episodes::{episode_stream, Episode, EpisodeStream};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::network::checkpoint::{load_encoder_weights, Container, StoredArray};
use crate::network::{Model, STRIDE};
use crate::objectives::{feature_masks, joint_gradients, LossReport, SegmentationTask};
use crate::raster::{BinaryMask, Image};
use crate::seed;
use crate::surrogate::{corrupt_batch, UnlabeledBatch};

pub type TrainConfig = RunConfig;

/// Consecutive unusable episodes tolerated before giving up.
pub const MAX_RESAMPLES: usize = 10;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub few_shot: f64,
    pub surrogate: f64,
    pub total: f64,
    pub lambda: f64,
    pub episode_class: String,
    pub seed: u64,
}

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &Model<f32>, lr: f64, cfg: &AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = model
            .arrays()
            .iter()
            .map(|a| vec![0.0; a.values.len()])
            .collect();
        Self {
            lr: lr as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.eps as f32,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Model<f32>, grads: &Model<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let trainable: Vec<bool> = model.arrays().iter().map(|a| a.trainable).collect();
        let grad_arrays = grads.arrays();
        for (i, param) in model.arrays_mut().into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let g = grad_arrays[i].values;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..param.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                param[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    fn to_arrays(&self, model: &Model<f32>) -> Vec<StoredArray> {
        let mut out = Vec::new();
        for (i, a) in model
            .arrays()
            .iter()
            .enumerate()
            .filter(|(_, a)| a.trainable)
        {
            for (tag, state) in [("m", &self.m[i]), ("v", &self.v[i])] {
                out.push(StoredArray {
                    name: format!("adam.{tag}.{}", a.name),
                    shape: a.shape.clone(),
                    values: state.clone(),
                });
            }
        }
        out
    }

    fn restore(&mut self, model: &Model<f32>, container: &Container, t: u64) -> Result<()> {
        for (i, a) in model
            .arrays()
            .iter()
            .enumerate()
            .filter(|(_, a)| a.trainable)
        {
            for tag in ["m", "v"] {
                let name = format!("adam.{tag}.{}", a.name);
                let stored = container.array(&name).ok_or_else(|| {
                    Error::CorruptCheckpoint(format!("missing optimizer state `{name}`"))
                })?;
                if stored.values.len() != a.values.len() {
                    return Err(Error::ShapeMismatch(format!("optimizer state `{name}`")));
                }
                let slot = if tag == "m" {
                    &mut self.m[i]
                } else {
                    &mut self.v[i]
                };
                slot.copy_from_slice(&stored.values);
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Data for a single optimisation step.
#[derive(Clone, Debug)]
pub enum StepData {
    Episodes(Vec<Episode>),
    Regular(Vec<Arc<Sample>>),
}

#[derive(Clone, Debug)]
pub struct StepInputs {
    pub step: usize,
    pub seed: u64,
    pub data: StepData,
    pub surrogate: Option<UnlabeledBatch>,
}

impl StepInputs {
    fn label(&self) -> String {
        match &self.data {
            StepData::Episodes(eps) => eps
                .iter()
                .map(|e| e.class_id.as_str())
                .collect::<Vec<_>>()
                .join("+"),
            StepData::Regular(_) => "regular".to_string(),
        }
    }
}

/// One gradient step on the joint objective. Returns the loss measured
/// before the update.
pub fn train_step(
    model: &mut Model<f32>,
    optimizer: &mut Adam,
    tasks: &[SegmentationTask<'_>],
    batch: Option<&UnlabeledBatch>,
    lambda: f64,
) -> Result<LossReport> {
    let g = joint_gradients(model, tasks, batch, lambda)?;
    model.update_running(&g.decoder_stats, g.denoise_stats.as_deref());
    optimizer.step(model, &g.grads);
    Ok(g.report)
}

/// Builds the step inputs; shared read-only between the data producer and
/// the optimisation loop.
pub struct StepSource<'a> {
    config: RunConfig,
    dataset: &'a ClassDataset,
    split: &'a DatasetSplit,
    stream: Option<EpisodeStream<'a>>,
    train_samples: Vec<Arc<Sample>>,
}

impl<'a> StepSource<'a> {
    fn new(
        config: &RunConfig,
        dataset: &'a ClassDataset,
        split: &'a DatasetSplit,
        pool: Option<&'a UnlabeledPool>,
    ) -> Result<Self> {
        let stream = match config.mode {
            TrainMode::Episodic => {
                let u = if config.uses_surrogate() { config.u } else { 0 };
                Some(episode_stream(
                    dataset,
                    &split.train_classes,
                    config.k,
                    u,
                    pool,
                    seed::derive(config.seed, seed::STREAM_EPISODE, 0),
                )?)
            }
            TrainMode::Regular => None,
        };
        let train_samples = split
            .train_classes
            .iter()
            .filter_map(|c| dataset.samples(c))
            .flat_map(|s| s.iter().cloned())
            .collect::<Vec<_>>();
        if train_samples.is_empty() {
            return Err(Error::config("data.root", "no training samples"));
        }
        Ok(Self {
            config: config.clone(),
            dataset,
            split,
            stream,
            train_samples,
        })
    }

    fn feature_size(&self) -> (usize, usize) {
        (
            self.dataset.image_size.0 / STRIDE,
            self.dataset.image_size.1 / STRIDE,
        )
    }

    /// Episode `index`, replaced by a fresh draw while every support mask
    /// vanishes at feature resolution.
    fn usable_episode(&self, stream: &EpisodeStream<'_>, index: u64) -> Result<Episode> {
        let mut episode = stream.get(index)?;
        for attempt in 0..MAX_RESAMPLES as u64 {
            let supports: Vec<(&Image, &BinaryMask)> = episode
                .support
                .iter()
                .map(|s| (&s.image, &s.mask))
                .collect();
            match feature_masks(&supports, self.feature_size()) {
                Ok(_) => return Ok(episode),
                Err(Error::EmptyMask) => episode = stream.resample(index, attempt)?,
                Err(e) => return Err(e),
            }
        }
        Err(Error::ExhaustedResampling(MAX_RESAMPLES))
    }

    pub fn prepare(&self, step: usize) -> Result<StepInputs> {
        let cfg = &self.config;
        match &self.stream {
            Some(stream) => {
                let per = cfg.episodes_per_step as u64;
                let episodes = (0..per)
                    .map(|e| self.usable_episode(stream, step as u64 * per + e))
                    .collect::<Result<Vec<_>>>()?;
                let noise_seed = seed::derive(cfg.seed, seed::STREAM_NOISE, step as u64);
                // One unlabeled batch per step: the first episode's u images.
                let surrogate = if cfg.uses_surrogate() {
                    let clean: Vec<&Image> = episodes[0]
                        .unlabeled
                        .iter()
                        .map(|(_, img)| img.as_ref())
                        .collect();
                    Some(corrupt_batch(
                        &clean,
                        cfg.surrogate.copies,
                        cfg.surrogate.sigma,
                        noise_seed,
                    )?)
                } else {
                    None
                };
                Ok(StepInputs {
                    step,
                    seed: episodes[0].seed,
                    data: StepData::Episodes(episodes),
                    surrogate,
                })
            }
            None => {
                let s = seed::derive(cfg.seed, seed::STREAM_REGULAR, step as u64);
                let mut rng = seed::rng(s);
                let picks = (0..cfg.regular_batch)
                    .map(|_| {
                        Arc::clone(
                            &self.train_samples[rng.random_range(0..self.train_samples.len())],
                        )
                    })
                    .collect();
                Ok(StepInputs {
                    step,
                    seed: s,
                    data: StepData::Regular(picks),
                    surrogate: None,
                })
            }
        }
    }

    pub fn split(&self) -> &DatasetSplit {
        self.split
    }
}

/// Runs `train_step` on prepared inputs.
pub fn apply_step(
    model: &mut Model<f32>,
    optimizer: &mut Adam,
    inputs: &StepInputs,
    lambda: f64,
) -> Result<StepRecord> {
    let supports: Vec<Vec<(&Image, &BinaryMask)>> = match &inputs.data {
        StepData::Episodes(eps) => eps
            .iter()
            .map(|e| e.support.iter().map(|s| (&s.image, &s.mask)).collect())
            .collect(),
        StepData::Regular(samples) => vec![Vec::new(); samples.len()],
    };
    let tasks: Vec<SegmentationTask<'_>> = match &inputs.data {
        StepData::Episodes(eps) => eps
            .iter()
            .zip(&supports)
            .map(|(e, s)| SegmentationTask {
                supports: s,
                query: e.query_image(),
                target: e.query_mask(),
            })
            .collect(),
        StepData::Regular(samples) => samples
            .iter()
            .zip(&supports)
            .map(|(smp, s)| SegmentationTask {
                supports: s,
                query: &smp.image,
                target: &smp.mask,
            })
            .collect(),
    };
    let lambda = match inputs.data {
        StepData::Regular(_) => 0.0,
        StepData::Episodes(_) => lambda,
    };
    let report = train_step(model, optimizer, &tasks, inputs.surrogate.as_ref(), lambda)?;
    Ok(StepRecord {
        step: inputs.step,
        few_shot: report.few_shot,
        surrogate: report.surrogate,
        total: report.total,
        lambda: report.lambda,
        episode_class: inputs.label(),
        seed: inputs.seed,
    })
}

/// Training state: model, optimizer and the number of completed steps.
pub struct Trainer<'a> {
    source: StepSource<'a>,
    pub model: Model<f32>,
    pub optimizer: Adam,
    pub step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: &RunConfig,
        dataset: &'a ClassDataset,
        split: &'a DatasetSplit,
        pool: Option<&'a UnlabeledPool>,
    ) -> Result<Self> {
        config.validate()?;
        if config.mode == TrainMode::Regular && (config.k != 1 || config.u != 0) {
            warn!("regular mode ignores k={} and u={}", config.k, config.u);
        }
        if config.mode == TrainMode::Episodic && config.u == 0 && config.lambda > 0.0 {
            warn!("u = 0: no unlabeled images, the surrogate term is 0");
        }
        if dataset.channels != config.model.in_channels {
            return Err(Error::config(
                "model.in_channels",
                format!("dataset has {} channels", dataset.channels),
            ));
        }
        let mut model = Model::<f32>::init(&config.model, config.seed)?;
        if let Some(path) = &config.pretrained_encoder {
            load_encoder_weights(&mut model, path)?;
        }
        let optimizer = Adam::new(&model, config.learning_rate, &config.adam);
        Ok(Self {
            source: StepSource::new(config, dataset, split, pool)?,
            model,
            optimizer,
            step: 0,
        })
    }

    /// Restores model, optimizer state and step count from a checkpoint.
    pub fn resume(
        config: &RunConfig,
        dataset: &'a ClassDataset,
        split: &'a DatasetSplit,
        pool: Option<&'a UnlabeledPool>,
        checkpoint: &Path,
    ) -> Result<Self> {
        let mut trainer = Self::new(config, dataset, split, pool)?;
        let container = Container::read(checkpoint)?;
        if container.config != config.model {
            return Err(Error::ShapeMismatch(
                "checkpoint model config differs from run config".into(),
            ));
        }
        trainer.model = container.to_model()?;
        let meta: TrainingMeta = serde_json::from_value(container.metadata.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("training metadata: {e}")))?;
        trainer
            .optimizer
            .restore(&trainer.model, &container, meta.adam_t)?;
        trainer.step = meta.step;
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.source.config
    }

    /// Writes model, optimizer state and progress.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = TrainingMeta {
            step: self.step,
            adam_t: self.optimizer.t,
            seed: self.config().seed,
            mode: self.config().mode,
            lambda: self.config().lambda,
        };
        let mut container =
            Container::from_model(&self.model, serde_json::to_value(meta).expect("metadata"));
        container
            .arrays
            .extend(self.optimizer.to_arrays(&self.model));
        container.write(path)
    }

    /// Performs steps until `self.step == until`, streaming one log record
    /// per step to `log`. Step data is prepared on a producer thread and
    /// handed over in order.
    pub fn run_until(&mut self, until: usize, log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        self.run_with(until, log, &mut |_| Ok(()))
    }

    fn run_with(
        &mut self,
        until: usize,
        log: &mut dyn Write,
        after_step: &mut dyn FnMut(&Trainer<'_>) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let start = self.step;
        if until <= start {
            return Ok(Vec::new());
        }
        let lambda = self.config().lambda;
        let mut records = Vec::with_capacity(until - start);
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<StepInputs>>(4);
            let source = &self.source;
            scope.spawn(move || {
                for step in start..until {
                    let inputs = source.prepare(step);
                    let failed = inputs.is_err();
                    if tx.send(inputs).is_err() || failed {
                        break;
                    }
                }
            });
            for inputs in rx {
                let inputs = inputs?;
                let record = apply_step(&mut self.model, &mut self.optimizer, &inputs, lambda)?;
                self.step = inputs.step + 1;
                serde_json::to_writer(&mut *log, &record)
                    .map_err(|e| Error::io("training log", std::io::Error::other(e)))?;
                log.write_all(b"\n")
                    .map_err(|e| Error::io("training log", e))?;
                records.push(record);
                after_step(self)?;
            }
            Ok(())
        })?;
        Ok(records)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainingMeta {
    step: usize,
    adam_t: u64,
    seed: u64,
    mode: TrainMode,
    lambda: f64,
}

/// Loads the labelled dataset, its class split and (if needed) the
/// unlabeled pool described by `config`.
pub fn load_inputs(
    config: &RunConfig,
) -> Result<(ClassDataset, DatasetSplit, Option<UnlabeledPool>)> {
    let [h, w] = config.data.image_size;
    let dataset = load_class_dataset(&config.data.root, (h, w))?;
    let split = split_classes(&dataset, config.data.test_fraction, config.data.split_seed)?;
    let pool = match (&config.surrogate.pool_dir, config.uses_surrogate()) {
        (Some(dir), true) => Some(load_unlabeled_pool(dir, (h, w))?),
        _ => None,
    };
    Ok((dataset, split, pool))
}

/// Full training run as configured. Returns the final checkpoint path.
pub fn train(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let (dataset, split, pool) = load_inputs(config)?;
    let out = &config.output.dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.toml"), config.to_toml()).map_err(|e| Error::io(out, e))?;
    let split_json = serde_json::json!({
        "train_classes": split.train_classes,
        "test_classes": split.test_classes,
    });
    fs::write(out.join("split.json"), split_json.to_string()).map_err(|e| Error::io(out, e))?;

    let mut trainer = Trainer::new(config, &dataset, &split, pool.as_ref())?;
    let log_path = out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let eval_path = out.join("eval_log.jsonl");
    let mut eval_log = Vec::new();
    info!(
        "training {:?} for {} iterations on {} classes",
        config.mode,
        config.iterations,
        split.train_classes.len()
    );
    let every = config.output.checkpoint_every;
    let eval_every = config.eval_every;
    trainer.run_with(config.iterations, &mut log, &mut |t| {
        if every > 0 && t.step % every == 0 && t.step < config.iterations {
            t.save_checkpoint(&out.join(format!("checkpoint_{:06}.ckpt", t.step)))?;
        }
        if eval_every > 0 && t.step % eval_every == 0 {
            let report = evaluate(
                &t.model,
                &dataset,
                &split.test_classes,
                config.evaluation.k,
                config.evaluation.n_episodes,
                config.evaluation.seed,
            )?;
            info!("step {}: held-out mean DSC {:.4}", t.step, report.mean_dsc);
            eval_log.push(serde_json::json!({"step": t.step, "mean_dsc": report.mean_dsc}));
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if !eval_log.is_empty() {
        let text: String = eval_log.iter().map(|v| format!("{v}\n")).collect();
        fs::write(&eval_path, text).map_err(|e| Error::io(&eval_path, e))?;
    }
    let final_path = out.join("final.ckpt");
    trainer.save_checkpoint(&final_path)?;
    Ok(final_path)
}

/// Batch-wise supervised baseline: no episodes and a zero prototype during
/// training. The checkpoint is evaluated with the same episodic harness.
pub fn train_regular(config: &RunConfig) -> Result<PathBuf> {
    let mut config = config.clone();
    config.mode = TrainMode::Regular;
    train(&config)
}
