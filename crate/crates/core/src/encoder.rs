//! Frame-matrix encoders producing the shared D-wide META embedding.
//!
//! Three interchangeable backbones, all ending in a linear layer to D:
//!
//! * `frame_mlp`: mean over time, then `tanh(x·W1 + b1)·W2 + b2`.
//!   Parameters: `F·H + H + H·D + D`.
//! * `recurrent`: Elman cell `h ← tanh(x_t·W_in + h·W_rec + b)` from a zero
//!   state, final state through `W_out, b_out`.
//!   Parameters: `F·H + H·H + H + H·D + D`.
//! * `attention_pool`: one learned query scores frames through a key map,
//!   the softmax-weighted frame average goes through `W_out, b_out`.
//!   Parameters: `F·H + H + F·D + D`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{self, glorot_uniform, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    FrameMlp,
    Recurrent,
    AttentionPool,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::FrameMlp => "frame_mlp",
            BackboneKind::Recurrent => "recurrent",
            BackboneKind::AttentionPool => "attention_pool",
        })
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame_mlp" => Ok(Self::FrameMlp),
            "recurrent" => Ok(Self::Recurrent),
            "attention_pool" => Ok(Self::AttentionPool),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub kind: BackboneKind,
    pub bins: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl EncoderShape {
    /// Analytic parameter count for this architecture.
    pub fn parameter_count(&self) -> usize {
        let (f, h, d) = (self.bins, self.hidden, self.dim);
        match self.kind {
            BackboneKind::FrameMlp => f * h + h + h * d + d,
            BackboneKind::Recurrent => f * h + h * h + h + h * d + d,
            BackboneKind::AttentionPool => f * h + h + f * d + d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub shape: EncoderShape,
    pub params: Vec<Param>,
}

impl Encoder {
    pub fn new(shape: EncoderShape, rng: &mut impl Rng) -> Result<Self> {
        let EncoderShape {
            kind,
            bins: f,
            hidden: h,
            dim: d,
        } = shape;
        if f == 0 || h == 0 || d == 0 {
            return Err(Error::Config(
                "encoder bins, hidden and dim must be positive".into(),
            ));
        }
        let params = match kind {
            BackboneKind::FrameMlp => vec![
                Param::weight("w1", glorot_uniform(f, h, rng)),
                Param::bias("b1", Tensor::zeros(1, h)),
                Param::weight("w2", glorot_uniform(h, d, rng)),
                Param::bias("b2", Tensor::zeros(1, d)),
            ],
            BackboneKind::Recurrent => vec![
                Param::weight("w_in", glorot_uniform(f, h, rng)),
                Param::weight("w_rec", glorot_uniform(h, h, rng)),
                Param::bias("b_h", Tensor::zeros(1, h)),
                Param::weight("w_out", glorot_uniform(h, d, rng)),
                Param::bias("b_out", Tensor::zeros(1, d)),
            ],
            BackboneKind::AttentionPool => vec![
                Param::weight("w_key", glorot_uniform(f, h, rng)),
                Param::weight("query", glorot_uniform(h, 1, rng)),
                Param::weight("w_out", glorot_uniform(f, d, rng)),
                Param::bias("b_out", Tensor::zeros(1, d)),
            ],
        };
        Ok(Self { shape, params })
    }

    /// Exact number of trainable values stored.
    pub fn count_parameters(&self) -> usize {
        params::count(&self.params)
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    /// Records the encoder on `g` given bound parameter leaves (in
    /// `self.params` order); returns the B×D embedding.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], frames: &[&Tensor]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::DegenerateBatch("empty batch".into()));
        }
        if let Some(bad) = frames.iter().find(|f| f.rows() != self.shape.bins) {
            return Err(Error::Dimension(format!(
                "encoder expects {} frequency bins, got {}",
                self.shape.bins,
                bad.rows()
            )));
        }
        match self.shape.kind {
            BackboneKind::FrameMlp => {
                let pooled: Vec<Vec<f64>> = frames.iter().map(|f| time_mean(f)).collect();
                let x = g.constant(Tensor::from_rows(&pooled)?);
                let h = g.matmul(x, vars[0])?;
                let h = g.add(h, vars[1])?;
                let h = g.tanh(h);
                let out = g.matmul(h, vars[2])?;
                g.add(out, vars[3])
            }
            BackboneKind::Recurrent => self.forward_recurrent(g, vars, frames),
            BackboneKind::AttentionPool => {
                let scale = 1.0 / (self.shape.hidden as f64).sqrt();
                let mut pooled = Vec::with_capacity(frames.len());
                for f in frames {
                    let x = g.constant(f.transpose());
                    let keys = g.matmul(x, vars[0])?;
                    let scores = g.matmul(keys, vars[1])?;
                    let scores = g.scale(scores, scale);
                    let scores = g.transpose(scores);
                    let attn = g.softmax_rows(scores);
                    pooled.push(g.matmul(attn, x)?);
                }
                let pooled = g.concat_rows(&pooled)?;
                let out = g.matmul(pooled, vars[2])?;
                g.add(out, vars[3])
            }
        }
    }

    fn forward_recurrent(&self, g: &mut Graph, vars: &[Var], frames: &[&Tensor]) -> Result<Var> {
        // Batch samples of equal length together, then restore input order.
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, f) in frames.iter().enumerate() {
            groups.entry(f.cols()).or_default().push(i);
        }
        let mut finals = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(frames.len());
        for (len, members) in &groups {
            let mut h: Option<Var> = None;
            for step in 0..*len {
                let rows: Vec<Vec<f64>> = members
                    .iter()
                    .map(|&i| (0..self.shape.bins).map(|r| frames[i].get(r, step)).collect())
                    .collect();
                let x = g.constant(Tensor::from_rows(&rows)?);
                let mut pre = g.matmul(x, vars[0])?;
                if let Some(prev) = h {
                    let rec = g.matmul(prev, vars[1])?;
                    pre = g.add(pre, rec)?;
                }
                let pre = g.add(pre, vars[2])?;
                h = Some(g.tanh(pre));
            }
            finals.push(h.expect("frames have at least one column"));
            order.extend_from_slice(members);
        }
        let stacked = g.concat_rows(&finals)?;
        let mut position = vec![0; frames.len()];
        for (pos, &i) in order.iter().enumerate() {
            position[i] = pos;
        }
        let h = g.gather_rows(stacked, &position)?;
        let out = g.matmul(h, vars[3])?;
        g.add(out, vars[4])
    }

    /// Inference-only embedding of a batch (B×D).
    pub fn encode(&self, frames: &[&Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = params::bind_frozen(&mut g, &self.params);
        let out = self.forward(&mut g, &vars, frames)?;
        Ok(g.value(out).clone())
    }
}

fn time_mean(frames: &Tensor) -> Vec<f64> {
    let t = frames.cols() as f64;
    (0..frames.rows())
        .map(|r| frames.row(r).iter().sum::<f64>() / t)
        .collect()
}
