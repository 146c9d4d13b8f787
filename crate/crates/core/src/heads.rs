//! Task-specific linear projections from META space and the bag-of-tokens
//! caption encoder that maps style captions into the same subspaces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{self, glorot_uniform, Param};
use crate::schema::TaskSchema;

/// One affine map `ℝ^D → ℝ^d` per task, stored as `[W_0, b_0, W_1, b_1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHeads {
    pub meta_dim: usize,
    pub task_dim: usize,
    pub params: Vec<Param>,
}

impl ProjectionHeads {
    pub fn new(schema: &TaskSchema, meta_dim: usize, task_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if meta_dim == 0 || task_dim == 0 {
            return Err(Error::Config("projection dimensions must be positive".into()));
        }
        let mut params = Vec::with_capacity(2 * schema.num_tasks());
        for t in 0..schema.num_tasks() {
            let name = schema.task_name(t);
            params.push(Param::weight(format!("{name}.weight"), glorot_uniform(meta_dim, task_dim, rng)));
            params.push(Param::bias(format!("{name}.bias"), Tensor::zeros(1, task_dim)));
        }
        Ok(Self {
            meta_dim,
            task_dim,
            params,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.params.len() / 2
    }

    pub fn count_parameters(&self) -> usize {
        params::count(&self.params)
    }

    /// `z^(t) = Z·W_t + b_t` for every task.
    pub fn project_all(&self, g: &mut Graph, vars: &[Var], meta: Var) -> Result<Vec<Var>> {
        let (_, width) = g.shape(meta);
        if width != self.meta_dim {
            return Err(Error::Shape {
                op: "project_all",
                left: g.shape(meta),
                right: (self.meta_dim, self.task_dim),
            });
        }
        vars.chunks(2)
            .map(|wb| {
                let z = g.matmul(meta, wb[0])?;
                g.add(z, wb[1])
            })
            .collect()
    }

    /// Inference-only projection of a B×D batch.
    pub fn project(&self, meta: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars = params::bind_frozen(&mut g, &self.params);
        let x = g.constant(meta.clone());
        let out = self.project_all(&mut g, &vars, x)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

pub const UNKNOWN_TOKEN: &str = "<unk>";
const TEMPLATE_WORDS: [&str; 2] = ["a", "voice"];

/// Lowercase, whitespace-split, edge punctuation trimmed.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Mean-pooled token embeddings followed by one affine map per task.
/// Parameters are stored as `[table, W_0, b_0, W_1, b_1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionEncoder {
    pub vocab: Vec<String>,
    pub text_dim: usize,
    pub task_dim: usize,
    pub params: Vec<Param>,
}

impl CaptionEncoder {
    pub fn new(schema: &TaskSchema, text_dim: usize, task_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if text_dim == 0 || task_dim == 0 {
            return Err(Error::Config("caption encoder dimensions must be positive".into()));
        }
        let mut vocab = vec![UNKNOWN_TOKEN.to_string()];
        let classes = schema.tasks().iter().flat_map(|t| t.classes.iter());
        for word in TEMPLATE_WORDS.iter().map(|w| w.to_string()).chain(classes.map(|c| c.to_lowercase())) {
            if !vocab.contains(&word) {
                vocab.push(word);
            }
        }
        let mut params = vec![Param::bias("token_table", glorot_uniform(vocab.len(), text_dim, rng))];
        for t in 0..schema.num_tasks() {
            let name = schema.task_name(t);
            params.push(Param::weight(format!("{name}.weight"), glorot_uniform(text_dim, task_dim, rng)));
            params.push(Param::bias(format!("{name}.bias"), Tensor::zeros(1, task_dim)));
        }
        Ok(Self {
            vocab,
            text_dim,
            task_dim,
            params,
        })
    }

    pub fn count_parameters(&self) -> usize {
        params::count(&self.params)
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.vocab.iter().position(|v| v == token).unwrap_or(0)
    }

    /// B×V matrix whose rows average the one-hot tokens of each caption.
    fn pooling_matrix(&self, captions: &[&str]) -> Result<Tensor> {
        let mut a = Tensor::zeros(captions.len().max(1), self.vocab.len());
        for (b, caption) in captions.iter().enumerate() {
            let tokens = tokenize(caption);
            if tokens.is_empty() {
                return Err(Error::Caption("empty caption".into()));
            }
            let w = 1.0 / tokens.len() as f64;
            for tok in &tokens {
                let id = self.token_id(tok);
                a.set(b, id, a.get(b, id) + w);
            }
        }
        Ok(a)
    }

    /// Per-task B×d caption embeddings recorded on `g`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], captions: &[&str]) -> Result<Vec<Var>> {
        if captions.is_empty() {
            return Err(Error::Caption("no captions".into()));
        }
        let a = g.constant(self.pooling_matrix(captions)?);
        let text = g.matmul(a, vars[0])?;
        vars[1..]
            .chunks(2)
            .map(|wb| {
                let z = g.matmul(text, wb[0])?;
                g.add(z, wb[1])
            })
            .collect()
    }

    /// Per-task d-vectors for a single caption.
    pub fn encode_caption(&self, caption: &str) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = params::bind_frozen(&mut g, &self.params);
        let out = self.forward(&mut g, &vars, &[caption])?;
        Ok(out.into_iter().map(|v| g.value(v).row(0).to_vec()).collect())
    }
}

/// Which class of each task a caption names. Tasks that are not mentioned
/// are `None`; naming two different classes of one task is an error.
pub fn parse_caption_classes(caption: &str, schema: &TaskSchema) -> Result<Vec<Option<usize>>> {
    let mut out = vec![None; schema.num_tasks()];
    for token in tokenize(caption) {
        for t in 0..schema.num_tasks() {
            let hit = schema.tasks()[t]
                .classes
                .iter()
                .position(|c| c.to_lowercase() == token);
            let Some(c) = hit else { continue };
            match out[t] {
                Some(prev) if prev != c => {
                    return Err(Error::Caption(format!(
                        "caption names both '{}' and '{}' for task '{}'",
                        schema.class_name(t, prev),
                        schema.class_name(t, c),
                        schema.task_name(t)
                    )))
                }
                _ => out[t] = Some(c),
            }
        }
    }
    Ok(out)
}
