//! Prototype-based classification, style-vector export and embedding-swap
//! style manipulation over a trained [`Model`].

use std::io::Write;
use std::path::Path;

use crate::data::LabeledSample;
use crate::diff::{cosine, norm, Tensor, COSINE_EPS};
use crate::error::{Error, Result};
use crate::heads::parse_caption_classes;
use crate::model::Model;
use crate::schema::TaskSchema;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub score: f64,
}

/// Nearest prototype by cosine; ties go to the lowest class index.
pub fn classify_embedding(model: &Model, task: usize, z: &[f64]) -> Result<Prediction> {
    let bank = &model.bank;
    if let Some(c) = bank.initialized(task).iter().position(|&ok| !ok) {
        return Err(Error::UninitializedPrototype {
            task: model.schema.task_name(task).into(),
            class: model.schema.class_name(task, c).into(),
        });
    }
    let mut best = Prediction {
        class: 0,
        score: f64::NEG_INFINITY,
    };
    for c in 0..model.schema.num_classes(task) {
        let s = cosine(z, bank.prototype(task, c), COSINE_EPS);
        if s > best.score {
            best = Prediction { class: c, score: s };
        }
    }
    Ok(best)
}

/// Concatenation of all task embeddings in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    task_dim: usize,
    values: Vec<f64>,
}

impl StyleVector {
    pub fn from_slices(slices: &[Vec<f64>]) -> Result<Self> {
        let task_dim = slices.first().map_or(0, Vec::len);
        if task_dim == 0 || slices.iter().any(|s| s.len() != task_dim) {
            return Err(Error::Dimension("style slices must share a positive width".into()));
        }
        Ok(Self {
            task_dim,
            values: slices.concat(),
        })
    }

    pub fn from_concat(values: Vec<f64>, task_dim: usize) -> Result<Self> {
        if task_dim == 0 || values.is_empty() || values.len() % task_dim != 0 {
            return Err(Error::Dimension(format!(
                "{} values do not split into slices of {task_dim}",
                values.len()
            )));
        }
        Ok(Self { task_dim, values })
    }

    pub fn num_tasks(&self) -> usize {
        self.values.len() / self.task_dim
    }

    pub fn task_dim(&self) -> usize {
        self.task_dim
    }

    pub fn slice(&self, task: usize) -> &[f64] {
        &self.values[task * self.task_dim..(task + 1) * self.task_dim]
    }

    pub fn slices(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.task_dim).map(<[f64]>::to_vec).collect()
    }

    pub fn concat(&self) -> &[f64] {
        &self.values
    }
}

pub fn extract_style(model: &Model, frames: &Tensor) -> Result<StyleVector> {
    let (_, subspaces) = model.embed(&[frames])?;
    StyleVector::from_slices(&subspaces.iter().map(|z| z.row(0).to_vec()).collect::<Vec<_>>())
}

/// Per-task prediction for one sample.
pub fn classify(model: &Model, frames: &Tensor) -> Result<Vec<Prediction>> {
    classify_style(model, &extract_style(model, frames)?)
}

pub fn classify_style(model: &Model, style: &StyleVector) -> Result<Vec<Prediction>> {
    (0..model.schema.num_tasks())
        .map(|t| classify_embedding(model, t, style.slice(t)))
        .collect()
}

/// Batched classification; row `i` holds the per-task predictions of `frames[i]`.
pub fn classify_batch(model: &Model, frames: &[&Tensor]) -> Result<Vec<Vec<Prediction>>> {
    let (_, subspaces) = model.embed(frames)?;
    (0..frames.len())
        .map(|i| {
            (0..model.schema.num_tasks())
                .map(|t| classify_embedding(model, t, subspaces[t].row(i)))
                .collect()
        })
        .collect()
}

/// Classifies the caption's own task embeddings; tasks the caption does
/// not mention come back as `None`.
pub fn classify_caption(model: &Model, caption: &str) -> Result<Vec<Option<Prediction>>> {
    let named = parse_caption_classes(caption, &model.schema)?;
    let embedded = model.caption.encode_caption(caption)?;
    named
        .iter()
        .enumerate()
        .map(|(t, n)| {
            n.map(|_| classify_embedding(model, t, &embedded[t]))
                .transpose()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManipulationReport {
    pub task: usize,
    pub source_class: usize,
    pub target_class: usize,
    pub orig_sim: f64,
    pub manip_sim: f64,
    pub reclass_hit: bool,
    pub other_tasks_stable: bool,
}

/// Moves one task slice toward a target prototype:
/// `(1−α)·z + α·p`, rescaled to `‖z‖`. Other slices are left untouched.
pub fn manipulate_style(
    model: &Model,
    style: &StyleVector,
    task: usize,
    target_class: usize,
    alpha: f64,
) -> Result<(StyleVector, ManipulationReport)> {
    if task >= model.schema.num_tasks() {
        return Err(Error::Config(format!("task index {task} out of range")));
    }
    if target_class >= model.schema.num_classes(task) {
        return Err(Error::Config(format!(
            "class index {target_class} out of range for task '{}'",
            model.schema.task_name(task)
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !model.bank.is_initialized(task, target_class) {
        return Err(Error::UninitializedPrototype {
            task: model.schema.task_name(task).into(),
            class: model.schema.class_name(task, target_class).into(),
        });
    }
    let before = classify_style(model, style)?;
    let z = style.slice(task);
    let p = model.bank.prototype(task, target_class);
    let mixed: Vec<f64> = z
        .iter()
        .zip(p)
        .map(|(zv, pv)| (1.0 - alpha) * zv + alpha * pv)
        .collect();
    let (zn, mn) = (norm(z), norm(&mixed));
    let new_slice: Vec<f64> = if mn > 0.0 {
        let k = zn / mn;
        mixed.iter().map(|v| v * k).collect()
    } else {
        mixed
    };
    let mut slices = style.slices();
    slices[task] = new_slice;
    let out = StyleVector::from_slices(&slices)?;
    let after = classify_style(model, &out)?;
    let report = ManipulationReport {
        task,
        source_class: before[task].class,
        target_class,
        orig_sim: cosine(z, p, COSINE_EPS),
        manip_sim: cosine(out.slice(task), p, COSINE_EPS),
        reclass_hit: after[task].class == target_class,
        other_tasks_stable: (0..before.len())
            .filter(|&t| t != task)
            .all(|t| before[t].class == after[t].class),
    };
    Ok((out, report))
}

pub fn manipulate(
    model: &Model,
    frames: &Tensor,
    task: usize,
    target_class: usize,
    alpha: f64,
) -> Result<(StyleVector, ManipulationReport)> {
    manipulate_style(model, &extract_style(model, frames)?, task, target_class, alpha)
}

/// Per-task averages over a set of manipulations, mirroring the
/// `task, orig_sim, manip_sim, accuracy` report columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipulationSummary {
    pub task: String,
    pub orig_sim: f64,
    pub manip_sim: f64,
    pub accuracy: f64,
    pub stability: f64,
    pub count: usize,
}

pub fn summarize_manipulations(schema: &TaskSchema, reports: &[ManipulationReport]) -> Vec<ManipulationSummary> {
    (0..schema.num_tasks())
        .filter_map(|t| {
            let rs: Vec<&ManipulationReport> = reports.iter().filter(|r| r.task == t).collect();
            if rs.is_empty() {
                return None;
            }
            let n = rs.len() as f64;
            Some(ManipulationSummary {
                task: schema.task_name(t).to_string(),
                orig_sim: rs.iter().map(|r| r.orig_sim).sum::<f64>() / n,
                manip_sim: rs.iter().map(|r| r.manip_sim).sum::<f64>() / n,
                accuracy: rs.iter().filter(|r| r.reclass_hit).count() as f64 / n,
                stability: rs.iter().filter(|r| r.other_tasks_stable).count() as f64 / n,
                count: rs.len(),
            })
        })
        .collect()
}

pub fn write_manipulation_csv<W: Write>(out: W, rows: &[ManipulationSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "orig_sim", "manip_sim", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            format!("{:.4}", r.orig_sim),
            format!("{:.4}", r.manip_sim),
            format!("{:.2}", 100.0 * r.accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io("manipulation csv", e))
}

/// One exported row: META embedding plus all task embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub split: String,
    pub meta: Vec<f64>,
    pub style: StyleVector,
}

pub fn embed_samples(model: &Model, samples: &[&LabeledSample], split: &str) -> Result<Vec<EmbeddingRow>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let frames: Vec<&Tensor> = samples.iter().map(|s| &s.frames).collect();
    let (meta, subspaces) = model.embed(&frames)?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(EmbeddingRow {
                id: s.id.clone(),
                split: split.to_string(),
                meta: meta.row(i).to_vec(),
                style: StyleVector::from_slices(
                    &subspaces.iter().map(|z| z.row(i).to_vec()).collect::<Vec<_>>(),
                )?,
            })
        })
        .collect()
}

pub fn embedding_csv_header(schema: &TaskSchema, meta_dim: usize, task_dim: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "split".to_string()];
    h.extend((0..meta_dim).map(|k| format!("meta_{k}")));
    for t in 0..schema.num_tasks() {
        h.extend((0..task_dim).map(|k| format!("{}_{k}", schema.task_name(t))));
    }
    h
}

/// Nine significant digits.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_embeddings_csv<W: Write>(
    out: W,
    schema: &TaskSchema,
    meta_dim: usize,
    task_dim: usize,
    rows: &[EmbeddingRow],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(embedding_csv_header(schema, meta_dim, task_dim))?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.split.clone()];
        rec.extend(r.meta.iter().map(|&v| sig9(v)));
        rec.extend(r.style.concat().iter().map(|&v| sig9(v)));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io("embeddings csv", e))
}

pub fn read_embeddings_csv(path: &Path, schema: &TaskSchema) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let meta_dim = header.iter().filter(|h| h.starts_with("meta_")).count();
    let per_task = header.len().saturating_sub(2 + meta_dim);
    if schema.num_tasks() == 0 || per_task % schema.num_tasks() != 0 || per_task == 0 {
        return Err(Error::Parse {
            line: Some(1),
            msg: "embedding header does not match schema".into(),
        });
    }
    let task_dim = per_task / schema.num_tasks();
    if header != embedding_csv_header(schema, meta_dim, task_dim) {
        return Err(Error::Parse {
            line: Some(1),
            msg: "embedding header does not match schema".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let nums: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: Some(i + 2),
                msg: format!("{e}"),
            })?;
        rows.push(EmbeddingRow {
            id: rec[0].to_string(),
            split: rec[1].to_string(),
            meta: nums[..meta_dim].to_vec(),
            style: StyleVector::from_concat(nums[meta_dim..].to_vec(), task_dim)?,
        });
    }
    Ok(rows)
}
