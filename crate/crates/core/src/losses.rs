//! Training objectives: graded-similarity META regularization, per-task
//! supervised contrastive loss, prototype alignment and their sum.
//!
//! Samples missing a label for a task contribute zero to that task's
//! terms but still count in the `1/B` averaging.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var, COSINE_EPS};
use crate::error::{Error, Result};
use crate::schema::TaskSchema;

/// Which anchor the supervised contrastive denominator uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// `Σ_{k≠i} exp(cos(z_k, z_j)/τ)`, anchored at the positive `z_j`.
    #[default]
    AsWritten,
    /// `Σ_{k≠i} exp(cos(z_i, z_k)/τ)`, anchored at `z_i`.
    Standard,
}

impl fmt::Display for DenominatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenominatorMode::AsWritten => "as_written",
            DenominatorMode::Standard => "standard",
        })
    }
}

impl std::str::FromStr for DenominatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(Self::AsWritten),
            "standard" => Ok(Self::Standard),
            other => Err(Error::Config(format!("unknown denominator mode '{other}'"))),
        }
    }
}

/// Pairwise label-agreement weights for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PairWeights {
    /// Fraction of co-labeled tasks on which `i` and `j` agree; zero diagonal.
    pub w: Tensor,
    /// `w` normalized over `j != i`; all-zero for invalid rows.
    pub w_hat: Tensor,
    /// Whether the row had nonzero off-diagonal mass.
    pub valid_row: Vec<bool>,
}

pub fn pair_similarity_weights<L: AsRef<[Option<usize>]>>(labels: &[L]) -> Result<PairWeights> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::DegenerateBatch(format!(
            "pair weights need at least 2 samples, got {b}"
        )));
    }
    let mut w = Tensor::zeros(b, b);
    for i in 0..b {
        for j in (i + 1)..b {
            let (yi, yj) = (labels[i].as_ref(), labels[j].as_ref());
            let mut both = 0usize;
            let mut agree = 0usize;
            for (a, c) in yi.iter().zip(yj) {
                if let (Some(a), Some(c)) = (a, c) {
                    both += 1;
                    agree += usize::from(a == c);
                }
            }
            let v = if both == 0 {
                0.0
            } else {
                agree as f64 / both as f64
            };
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    let mut w_hat = Tensor::zeros(b, b);
    let mut valid_row = vec![false; b];
    for i in 0..b {
        let mass: f64 = w.row(i).iter().sum();
        if mass > 0.0 {
            valid_row[i] = true;
            for j in 0..b {
                w_hat.set(i, j, w.get(i, j) / mass);
            }
        }
    }
    Ok(PairWeights {
        w,
        w_hat,
        valid_row,
    })
}

fn cosine_scores(g: &mut Graph, x: Var, tau: f64) -> Result<Var> {
    let c = g.cosine_sim_matrix(x, x, COSINE_EPS)?;
    Ok(g.scale(c, 1.0 / tau))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// `-(1/B) Σ_i Σ_{j≠i} ŵ_ij log p_ij` with `p` the diagonal-excluded
/// softmax over scaled cosine similarities of the META embeddings.
pub fn meta_loss(g: &mut Graph, x: Var, weights: &PairWeights, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let b = g.shape(x).0;
    if weights.w_hat.shape() != (b, b) {
        return Err(Error::Shape {
            op: "meta_loss",
            left: (b, b),
            right: weights.w_hat.shape(),
        });
    }
    let s = cosine_scores(g, x, tau)?;
    let logp = g.log_softmax_row_masked(s, true)?;
    let w = g.constant(weights.w_hat.clone());
    let weighted = g.mul(logp, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// `M_ij = 1/|P_i|` for each positive `j` of anchor `i`, else 0.
fn positive_weights(labels: &[Option<usize>]) -> Tensor {
    let b = labels.len();
    let mut m = Tensor::zeros(b, b);
    for i in 0..b {
        let Some(yi) = labels[i] else { continue };
        let positives: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == Some(yi)).collect();
        let k = 1.0 / positives.len().max(1) as f64;
        for j in positives {
            m.set(i, j, k);
        }
    }
    m
}

/// Supervised contrastive loss for one task subspace.
pub fn supervised_contrastive_loss(
    g: &mut Graph,
    z: Var,
    labels: &[Option<usize>],
    tau: f64,
    mode: DenominatorMode,
) -> Result<Var> {
    check_tau(tau)?;
    let b = g.shape(z).0;
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if b < 2 {
        return Err(Error::DegenerateBatch(format!(
            "contrastive loss needs at least 2 samples, got {b}"
        )));
    }
    let s = cosine_scores(g, z, tau)?;
    let term = match mode {
        DenominatorMode::Standard => g.log_softmax_row_masked(s, true)?,
        DenominatorMode::AsWritten => {
            // Cosines are bounded by 1, so shifting by 1/τ keeps every
            // exponent ≤ 0; the shift cancels between numerator and denominator.
            let shifted = g.add_scalar(s, -1.0 / tau);
            let e = g.exp(shifted);
            let col = g.col_sums(e);
            let neg_e = g.scale(e, -1.0);
            let denom = g.add(neg_e, col)?;
            let log_denom = g.log(denom);
            g.sub(shifted, log_denom)?
        }
    };
    let m = g.constant(positive_weights(labels));
    let weighted = g.mul(term, m)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Sum of per-task contrastive losses; `subspaces[t]` pairs with `labels[·][t]`.
pub fn scl_total<L: AsRef<[Option<usize>]>>(
    g: &mut Graph,
    subspaces: &[Var],
    labels: &[L],
    tau: f64,
    mode: DenominatorMode,
) -> Result<(Var, Vec<Var>)> {
    let mut per_task = Vec::with_capacity(subspaces.len());
    for (t, &z) in subspaces.iter().enumerate() {
        let y: Vec<Option<usize>> = labels.iter().map(|l| l.as_ref()[t]).collect();
        per_task.push(supervised_contrastive_loss(g, z, &y, tau, mode)?);
    }
    let total = sum_vars(g, &per_task)?;
    Ok((total, per_task))
}

/// `(1/B) Σ_i (1 − cos(z_i, p_{y_i}))` over samples whose label is present
/// and whose class prototype is usable. Prototypes enter as constants.
pub fn prototype_alignment_loss(
    g: &mut Graph,
    z: Var,
    labels: &[Option<usize>],
    prototypes: &Tensor,
    usable: &[bool],
) -> Result<Var> {
    let (b, d) = g.shape(z);
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if prototypes.cols() != d {
        return Err(Error::Shape {
            op: "prototype_alignment_loss",
            left: (b, d),
            right: prototypes.shape(),
        });
    }
    let classes = prototypes.rows();
    let mut mask = Tensor::zeros(b, classes);
    let mut counted = 0usize;
    for (i, label) in labels.iter().enumerate() {
        let Some(c) = *label else { continue };
        if c >= classes {
            return Err(Error::Dimension(format!(
                "label {c} out of range for {classes} prototypes"
            )));
        }
        if usable.get(c).copied().unwrap_or(false) {
            mask.set(i, c, 1.0);
            counted += 1;
        }
    }
    let p = g.constant(prototypes.clone());
    let cos = g.cosine_sim_matrix(z, p, COSINE_EPS)?;
    let m = g.constant(mask);
    let picked = g.mul(cos, m)?;
    let s = g.sum(picked);
    let s = g.scale(s, -1.0 / b as f64);
    Ok(g.add_scalar(s, counted as f64 / b as f64))
}

pub fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let Some(first) = it.next() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for v in it {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Graph handles for every term of the total objective.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub meta: Var,
    pub scl: Vec<Var>,
    pub pal_speech: Var,
    pub pal_text: Var,
    pub total: Var,
}

/// Unweighted sum `meta + Σ scl + pal_speech + pal_text`.
pub fn total_loss(
    g: &mut Graph,
    meta: Var,
    scl: Vec<Var>,
    pal_speech: Var,
    pal_text: Var,
) -> Result<LossTerms> {
    let scl_sum = sum_vars(g, &scl)?;
    let a = g.add(meta, scl_sum)?;
    let b = g.add(a, pal_speech)?;
    let total = g.add(b, pal_text)?;
    Ok(LossTerms {
        meta,
        scl,
        pal_speech,
        pal_text,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub meta: f64,
    pub scl: Vec<f64>,
    pub pal_speech: f64,
    pub pal_text: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(g: &Graph, terms: &LossTerms) -> Self {
        Self {
            meta: g.value(terms.meta).item(),
            scl: terms.scl.iter().map(|&v| g.value(v).item()).collect(),
            pal_speech: g.value(terms.pal_speech).item(),
            pal_text: g.value(terms.pal_text).item(),
            total: g.value(terms.total).item(),
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self, schema: &TaskSchema) -> Option<String> {
        if !self.meta.is_finite() {
            return Some("meta".into());
        }
        for (t, v) in self.scl.iter().enumerate() {
            if !v.is_finite() {
                return Some(format!("scl_{}", schema.task_name(t)));
            }
        }
        if !self.pal_speech.is_finite() {
            return Some("pal_speech".into());
        }
        if !self.pal_text.is_finite() {
            return Some("pal_text".into());
        }
        (!self.total.is_finite()).then(|| "total".into())
    }

    pub fn csv_header(schema: &TaskSchema) -> Vec<String> {
        let mut h = vec!["step".to_string(), "meta".to_string()];
        h.extend((0..schema.num_tasks()).map(|t| format!("scl_{}", schema.task_name(t))));
        h.extend(["pal_speech", "pal_text", "total"].map(String::from));
        h
    }

    /// One CSV row; `{:?}` formatting keeps the shortest exact representation.
    pub fn csv_row(&self, step: u64) -> Vec<String> {
        let mut r = vec![step.to_string(), format!("{:?}", self.meta)];
        r.extend(self.scl.iter().map(|v| format!("{v:?}")));
        r.extend([self.pal_speech, self.pal_text, self.total].map(|v| format!("{v:?}")));
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.param(&Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn pair_weight_examples() {
        let w = pair_similarity_weights(&[vec![Some(0), Some(0)], vec![Some(0), Some(1)]]).unwrap();
        assert_eq!(w.w.get(0, 1), 0.5);
        let w = pair_similarity_weights(&[vec![Some(1), Some(2)], vec![Some(1), Some(2)]]).unwrap();
        assert_eq!(w.w.get(0, 1), 1.0);
        // row 0 sees (0.5, 1.0) -> (1/3, 2/3)
        let w = pair_similarity_weights(&[
            vec![Some(0), Some(0)],
            vec![Some(0), Some(1)],
            vec![Some(0), Some(0)],
        ])
        .unwrap();
        assert!((w.w_hat.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.w_hat.get(0, 2) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(w.w_hat.get(0, 0), 0.0);
    }

    #[test]
    fn pair_weights_skip_unshared_tasks() {
        let w = pair_similarity_weights(&[
            vec![Some(0), None],
            vec![None, Some(1)],
            vec![Some(0), Some(1)],
        ])
        .unwrap();
        assert_eq!(w.w.get(0, 1), 0.0);
        assert_eq!(w.w.get(0, 2), 1.0);
        assert_eq!(w.w.get(1, 2), 1.0);
        assert!(w.valid_row.iter().all(|&v| v));
        assert!(pair_similarity_weights(&[vec![Some(0)]]).is_err());
    }

    #[test]
    fn meta_loss_two_samples_is_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7]]);
        let w = pair_similarity_weights(&[vec![Some(0)], vec![Some(0)]]).unwrap();
        let l = meta_loss(&mut g, x, &w, 1.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn meta_loss_without_overlap_is_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let w = pair_similarity_weights(&[vec![Some(0), None], vec![None, Some(1)], vec![None, None]])
            .unwrap();
        assert!(w.valid_row.iter().all(|&v| !v));
        let l = meta_loss(&mut g, x, &w, 1.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn scl_identical_pair_as_written_is_zero() {
        let mut g = Graph::new();
        let z = leaf(&mut g, &[vec![0.4, -0.2, 0.9], vec![0.4, -0.2, 0.9]]);
        let l = supervised_contrastive_loss(&mut g, z, &[Some(1), Some(1)], 1.0, DenominatorMode::AsWritten)
            .unwrap();
        assert!(g.value(l).item().abs() <= 1e-12);
    }

    #[test]
    fn scl_all_distinct_classes_is_zero() {
        let mut g = Graph::new();
        let z = leaf(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5]]);
        for mode in [DenominatorMode::AsWritten, DenominatorMode::Standard] {
            let l = supervised_contrastive_loss(&mut g, z, &[Some(0), Some(1), Some(2)], 1.0, mode)
                .unwrap();
            assert_eq!(g.value(l).item(), 0.0);
        }
    }

    #[test]
    fn pal_extremes() {
        let protos = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let mut g = Graph::new();
        let z = leaf(&mut g, &[vec![3.0, 0.0], vec![0.0, 0.5], vec![1.0, 1.0]]);
        let l = prototype_alignment_loss(&mut g, z, &[Some(0), Some(1), None], &protos, &[true, true])
            .unwrap();
        assert!(g.value(l).item().abs() <= 1e-12);

        let z = leaf(&mut g, &[vec![0.0, 3.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        let l = prototype_alignment_loss(&mut g, z, &[Some(0), Some(1), None], &protos, &[true, true])
            .unwrap();
        assert!((g.value(l).item() - 2.0 / 3.0).abs() <= 1e-12);

        // uninitialized class 1 is skipped
        let l = prototype_alignment_loss(&mut g, z, &[Some(0), Some(1), None], &protos, &[true, false])
            .unwrap();
        assert!((g.value(l).item() - 1.0 / 3.0).abs() <= 1e-12);

        assert!(prototype_alignment_loss(&mut g, z, &[Some(2), None, None], &protos, &[true, true]).is_err());
    }

    #[test]
    fn total_of_zero_parts_is_zero() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::scalar(0.0));
        let terms = total_loss(&mut g, zero, vec![zero, zero], zero, zero).unwrap();
        let b = LossBreakdown::from_terms(&g, &terms);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn csv_layout() {
        let schema = TaskSchema::from_pairs(&[("gender", &["f", "m"]), ("emotion", &["h", "s"])]).unwrap();
        assert_eq!(
            LossBreakdown::csv_header(&schema).join(","),
            "step,meta,scl_gender,scl_emotion,pal_speech,pal_text,total"
        );
        let b = LossBreakdown {
            meta: 0.1,
            scl: vec![0.2, 0.3],
            pal_speech: 0.0,
            pal_text: 1.0,
            total: 1.6,
        };
        assert_eq!(b.csv_row(7).join(","), "7,0.1,0.2,0.3,0.0,1.0,1.6");
    }
}
