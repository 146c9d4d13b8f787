//! Optimization loop, configuration and checkpoints.
//!
//! Step order: forward, losses, backward, optimizer update, then EMA of the
//! prototypes toward the centroids of the embeddings computed before the
//! update. Batch order is a pure function of `(seed, step)`, which is what
//! makes resume reproduce an uninterrupted run exactly.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff::{Tensor, Var};
use crate::encoder::{BackboneKind, Encoder};
use crate::error::{Error, Result};
use crate::heads::{parse_caption_classes, CaptionEncoder, ProjectionHeads};
use crate::losses::{DenominatorMode, LossBreakdown};
use crate::model::{BatchInput, Model, ModelDims};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Param;
use crate::prototypes::{batch_centroids, BankFile, PrototypeBank};
use crate::schema::TaskSchema;

pub const CHECKPOINT_VERSION: u64 = 1;
pub const MAX_STEPS_CEILING: u64 = 40_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub tau: f64,
    pub momentum: f64,
    pub meta_dim: usize,
    pub task_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
    pub backbone: BackboneKind,
    pub seed: u64,
    pub denominator_mode: DenominatorMode,
    /// Capacity of the batch-assembly queue; 0 assembles batches inline.
    pub prefetch: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let dims = ModelDims::default();
        Self {
            batch_size: 32,
            max_steps: 2000,
            learning_rate: opt.learning_rate,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            tau: 1.0,
            momentum: dims.momentum,
            meta_dim: dims.meta_dim,
            task_dim: dims.task_dim,
            text_dim: dims.text_dim,
            hidden: dims.hidden,
            backbone: dims.backbone,
            seed: 0,
            denominator_mode: DenominatorMode::AsWritten,
            prefetch: 4,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.max_steps > MAX_STEPS_CEILING {
            return Err(Error::Config(format!(
                "max_steps {} exceeds the ceiling of {MAX_STEPS_CEILING}",
                self.max_steps
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.meta_dim == 0 || self.task_dim == 0 || self.text_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            backbone: self.backbone,
            hidden: self.hidden,
            meta_dim: self.meta_dim,
            task_dim: self.task_dim,
            text_dim: self.text_dim,
            momentum: self.momentum,
        }
    }
}

/// Where the data iterator stands; derived from the step counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCursor {
    pub seed: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub batches_per_epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u64,
    pub config: TrainConfig,
    pub schema: TaskSchema,
    pub step: u64,
    pub encoder: Encoder,
    pub heads: ProjectionHeads,
    pub caption_encoder: CaptionEncoder,
    pub prototypes: BankFile,
    pub optimizer: AdamW,
    pub rng: DataCursor,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let found = value.get("version").and_then(serde_json::Value::as_u64);
        if found != Some(CHECKPOINT_VERSION) {
            return Err(Error::Version {
                found: found.unwrap_or(0),
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::json(path, e))
    }

    /// Rebuilds the model, validating the prototype section against the schema.
    pub fn model(&self) -> Result<Model> {
        let bank_value = serde_json::to_value(&self.prototypes).map_err(|e| Error::Parse {
            line: None,
            msg: e.to_string(),
        })?;
        Ok(Model {
            schema: self.schema.clone(),
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
            caption: self.caption_encoder.clone(),
            bank: PrototypeBank::from_value(bank_value, &self.schema)?,
        })
    }
}

/// One logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub loss_csv: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
}

impl Trainer {
    pub fn new(schema: &TaskSchema, bins: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(schema, bins, config.dims(), &mut rng)?;
        let optimizer = AdamW::new(config.optimizer(), model.params())?;
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.model()?;
        if ckpt.optimizer.first_moment.len() != model.params().count() {
            return Err(Error::Parse {
                line: None,
                msg: "optimizer state does not match model parameters".into(),
            });
        }
        Ok(Self {
            config: ckpt.config.clone(),
            model,
            optimizer: ckpt.optimizer.clone(),
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self, batches_per_epoch: u64) -> Checkpoint {
        let bpe = batches_per_epoch.max(1);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            schema: self.model.schema.clone(),
            step: self.step,
            encoder: self.model.encoder.clone(),
            heads: self.model.heads.clone(),
            caption_encoder: self.model.caption.clone(),
            prototypes: self.model.bank.to_file(),
            optimizer: self.optimizer.clone(),
            rng: DataCursor {
                seed: self.config.seed,
                epoch: self.step / bpe,
                batch_in_epoch: self.step % bpe,
                batches_per_epoch,
            },
        }
    }

    /// One full update on `batch`; returns the losses before the update.
    pub fn train_step(&mut self, batch: &BatchInput<'_>) -> Result<LossBreakdown> {
        let mut obj = self
            .model
            .objective(batch, self.config.tau, self.config.denominator_mode)?;
        let losses = LossBreakdown::from_terms(&obj.graph, &obj.terms);
        if let Some(component) = losses.non_finite_component(&self.model.schema) {
            return Err(Error::NonFinite {
                component,
                step: self.step + 1,
            });
        }
        obj.graph.backward(obj.terms.total)?;

        let vars: Vec<Var> = obj.params.all().collect();
        let grads: Vec<Option<&Tensor>> = vars.iter().map(|&v| obj.graph.grad(v)).collect();
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite {
                component: "gradient".into(),
                step: self.step + 1,
            });
        }
        let mut params: Vec<&mut Param> = self.model.params_mut().collect();
        self.optimizer.step(&mut params, &grads)?;

        for (t, &z) in obj.subspaces.iter().enumerate() {
            let y: Vec<Option<usize>> = batch.labels.iter().map(|l| l[t]).collect();
            let centroids = batch_centroids(obj.graph.value(z), &y, self.model.schema.num_classes(t));
            self.model.bank.ema_update(t, &centroids)?;
        }
        self.step += 1;
        Ok(losses)
    }

    /// Trains from the current step up to `config.max_steps`.
    pub fn run(&mut self, data: &Dataset, opts: &RunOptions) -> Result<Vec<StepRecord>> {
        if data.schema() != &self.model.schema {
            return Err(Error::schema("dataset schema differs from the model schema"));
        }
        if data.bins() != Some(self.model.encoder.shape.bins) {
            return Err(Error::Dimension(format!(
                "dataset has {:?} frequency bins, model expects {}",
                data.bins(),
                self.model.encoder.shape.bins
            )));
        }
        let bs = self.config.batch_size;
        let batches_per_epoch = (data.len() / bs) as u64;
        if batches_per_epoch == 0 {
            return Err(Error::Config(format!(
                "{} training samples cannot fill one batch of {bs}",
                data.len()
            )));
        }
        let captions: Vec<Option<(&str, Vec<Option<usize>>)>> = data
            .samples()
            .iter()
            .map(|s| {
                s.caption
                    .as_deref()
                    .map(|c| parse_caption_classes(c, data.schema()).map(|l| (c, l)))
                    .transpose()
            })
            .collect::<Result<_>>()?;

        let mut log = match &opts.loss_csv {
            Some(path) => Some(LossLog::open(path, &self.model.schema, self.step == 0)?),
            None => None,
        };
        let mut records = Vec::new();
        let start = self.step;
        let end = self.config.max_steps.max(start);
        let seed = self.config.seed;
        let n = data.len();

        let mut body = |trainer: &mut Trainer, indices: Vec<usize>| -> Result<()> {
            let batch = BatchInput {
                frames: indices.iter().map(|&i| &data.samples()[i].frames).collect(),
                labels: indices.iter().map(|&i| data.samples()[i].labels.clone()).collect(),
                captions: indices.iter().filter_map(|&i| captions[i].clone()).collect(),
            };
            let losses = trainer.train_step(&batch)?;
            if let Some(log) = log.as_mut() {
                log.write(trainer.step, &losses)?;
            }
            records.push(StepRecord {
                step: trainer.step,
                losses,
            });
            if let Some(path) = &opts.checkpoint_path {
                let every = trainer.config.checkpoint_every;
                if every > 0 && trainer.step % every == 0 {
                    if let Some(log) = log.as_mut() {
                        log.flush()?;
                    }
                    trainer.checkpoint(batches_per_epoch).save(path)?;
                }
            }
            Ok(())
        };

        if self.config.prefetch == 0 {
            for step in start..end {
                body(self, batch_indices(n, bs, seed, step))?;
            }
        } else {
            let capacity = self.config.prefetch;
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel::<Vec<usize>>(capacity);
                scope.spawn(move || {
                    for step in start..end {
                        if tx.send(batch_indices(n, bs, seed, step)).is_err() {
                            break;
                        }
                    }
                });
                for indices in rx.iter() {
                    body(self, indices)?;
                }
                Ok(())
            })?;
        }

        if let Some(log) = log.as_mut() {
            log.flush()?;
        }
        if let Some(path) = &opts.checkpoint_path {
            self.checkpoint(batches_per_epoch).save(path)?;
        }
        Ok(records)
    }
}

/// Sample indices of the batch processed at `step` (0-based). Each epoch is
/// a fresh seeded permutation; the trailing partial batch is dropped.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let bpe = (n / batch_size) as u64;
    let epoch = step / bpe;
    let pos = (step % bpe) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    order.shuffle(&mut rng);
    order[pos * batch_size..(pos + 1) * batch_size].to_vec()
}

/// Fresh training run over `data`; returns the final checkpoint.
pub fn run_training(data: &Dataset, config: TrainConfig, opts: &RunOptions) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let bins = data.bins().ok_or(Error::EmptyTestSet)?;
    let mut trainer = Trainer::new(data.schema(), bins, config)?;
    let records = trainer.run(data, opts)?;
    let bpe = (data.len() / trainer.config.batch_size) as u64;
    Ok((trainer.checkpoint(bpe), records))
}

struct LossLog {
    writer: csv::Writer<std::fs::File>,
}

impl LossLog {
    fn open(path: &Path, schema: &TaskSchema, fresh: bool) -> Result<Self> {
        let append = !fresh && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if !append {
            writer.write_record(LossBreakdown::csv_header(schema))?;
        }
        Ok(Self { writer })
    }

    fn write(&mut self, step: u64, losses: &LossBreakdown) -> Result<()> {
        self.writer.write_record(losses.csv_row(step))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io("loss log", e))
    }
}
