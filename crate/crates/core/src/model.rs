//! The assembled model and the per-batch objective graph shared by the
//! trainer and the gradient checker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::diff::{Graph, Tensor, Var};
use crate::encoder::{BackboneKind, Encoder, EncoderShape};
use crate::error::{Error, Result};
use crate::heads::{parse_caption_classes, CaptionEncoder, ProjectionHeads};
use crate::losses::{self, DenominatorMode, LossTerms};
use crate::params::{self, Param};
use crate::prototypes::PrototypeBank;
use crate::schema::TaskSchema;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub backbone: BackboneKind,
    pub hidden: usize,
    /// META embedding width D.
    pub meta_dim: usize,
    /// Task subspace width d.
    pub task_dim: usize,
    pub text_dim: usize,
    pub momentum: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::FrameMlp,
            hidden: 64,
            meta_dim: 64,
            task_dim: 16,
            text_dim: 32,
            momentum: crate::prototypes::DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub schema: TaskSchema,
    pub encoder: Encoder,
    pub heads: ProjectionHeads,
    pub caption: CaptionEncoder,
    pub bank: PrototypeBank,
}

/// Graph leaves for every trainable tensor, split by section.
pub struct BoundParams {
    pub encoder: Vec<Var>,
    pub heads: Vec<Var>,
    pub caption: Vec<Var>,
}

impl BoundParams {
    /// All leaves in [`Model::params`] order.
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .iter()
            .chain(&self.heads)
            .chain(&self.caption)
            .copied()
    }
}

/// Labels and captions of one batch, resolved against the schema.
#[derive(Clone, Debug)]
pub struct BatchInput<'a> {
    pub frames: Vec<&'a Tensor>,
    pub labels: Vec<Vec<Option<usize>>>,
    /// Captions with the classes they name.
    pub captions: Vec<(&'a str, Vec<Option<usize>>)>,
}

impl<'a> BatchInput<'a> {
    pub fn from_samples(samples: &[&'a LabeledSample], schema: &TaskSchema) -> Result<Self> {
        let mut captions = Vec::new();
        for s in samples {
            if let Some(c) = s.caption.as_deref() {
                captions.push((c, parse_caption_classes(c, schema)?));
            }
        }
        Ok(Self {
            frames: samples.iter().map(|s| &s.frames).collect(),
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
            captions,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Everything recorded for one batch's objective.
pub struct ObjectiveGraph {
    pub graph: Graph,
    pub params: BoundParams,
    pub meta: Var,
    pub subspaces: Vec<Var>,
    pub terms: LossTerms,
}

impl Model {
    pub fn new(schema: &TaskSchema, bins: usize, dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(
            EncoderShape {
                kind: dims.backbone,
                bins,
                hidden: dims.hidden,
                dim: dims.meta_dim,
            },
            rng,
        )?;
        let heads = ProjectionHeads::new(schema, dims.meta_dim, dims.task_dim, rng)?;
        let caption = CaptionEncoder::new(schema, dims.text_dim, dims.task_dim, rng)?;
        let bank = PrototypeBank::new(schema, dims.task_dim, dims.momentum, rng)?;
        Ok(Self {
            schema: schema.clone(),
            encoder,
            heads,
            caption,
            bank,
        })
    }

    pub fn task_dim(&self) -> usize {
        self.heads.task_dim
    }

    pub fn meta_dim(&self) -> usize {
        self.encoder.dim()
    }

    /// Trainable tensors in a fixed order: encoder, heads, caption encoder.
    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.encoder
            .params
            .iter()
            .chain(&self.heads.params)
            .chain(&self.caption.params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.encoder
            .params
            .iter_mut()
            .chain(self.heads.params.iter_mut())
            .chain(self.caption.params.iter_mut())
    }

    pub fn count_trainable(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            encoder: params::bind_all(g, &self.encoder.params),
            heads: params::bind_all(g, &self.heads.params),
            caption: params::bind_all(g, &self.caption.params),
        }
    }

    /// Records META, per-task contrastive and both alignment losses.
    /// Alignment skips classes whose prototype has never been updated.
    pub fn objective(&self, batch: &BatchInput<'_>, tau: f64, mode: DenominatorMode) -> Result<ObjectiveGraph> {
        if batch.len() < 2 {
            return Err(Error::DegenerateBatch(format!(
                "training batch needs at least 2 samples, got {}",
                batch.len()
            )));
        }
        let mut g = Graph::new();
        let params = self.bind(&mut g);
        let meta = self.encoder.forward(&mut g, &params.encoder, &batch.frames)?;
        let subspaces = self.heads.project_all(&mut g, &params.heads, meta)?;

        let weights = losses::pair_similarity_weights(&batch.labels)?;
        let meta_loss = losses::meta_loss(&mut g, meta, &weights, tau)?;
        let (_, scl) = losses::scl_total(&mut g, &subspaces, &batch.labels, tau, mode)?;

        let mut pal_speech = Vec::with_capacity(subspaces.len());
        for (t, &z) in subspaces.iter().enumerate() {
            let y: Vec<Option<usize>> = batch.labels.iter().map(|l| l[t]).collect();
            pal_speech.push(losses::prototype_alignment_loss(
                &mut g,
                z,
                &y,
                self.bank.task(t),
                self.bank.initialized(t),
            )?);
        }
        let pal_speech = losses::sum_vars(&mut g, &pal_speech)?;

        let pal_text = if batch.captions.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let texts: Vec<&str> = batch.captions.iter().map(|(c, _)| *c).collect();
            let text_sub = self.caption.forward(&mut g, &params.caption, &texts)?;
            let mut parts = Vec::with_capacity(text_sub.len());
            for (t, &z) in text_sub.iter().enumerate() {
                let y: Vec<Option<usize>> = batch.captions.iter().map(|(_, l)| l[t]).collect();
                parts.push(losses::prototype_alignment_loss(
                    &mut g,
                    z,
                    &y,
                    self.bank.task(t),
                    self.bank.initialized(t),
                )?);
            }
            losses::sum_vars(&mut g, &parts)?
        };

        let terms = losses::total_loss(&mut g, meta_loss, scl, pal_speech, pal_text)?;
        Ok(ObjectiveGraph {
            graph: g,
            params,
            meta,
            subspaces,
            terms,
        })
    }

    /// META embeddings and per-task subspace embeddings for a batch.
    pub fn embed(&self, frames: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        let meta = self.encoder.encode(frames)?;
        let subspaces = self.heads.project(&meta)?;
        Ok((meta, subspaces))
    }
}
