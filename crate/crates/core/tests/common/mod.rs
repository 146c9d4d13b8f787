//! Straight-loop reference implementations and fixtures shared by the
//! integration and acceptance tests. Nothing here calls the graph engine.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stylespace::TaskSchema;

pub type Labels = Vec<Vec<Option<usize>>>;

pub fn o_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt().max(1e-8) * bb.sqrt().max(1e-8))
}

/// Agreement fraction over co-labeled tasks, and its row normalization.
pub fn o_pair_weights(labels: &Labels) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let b = labels.len();
    let mut w = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let mut both = 0.0;
            let mut same = 0.0;
            for t in 0..labels[i].len() {
                if let (Some(x), Some(y)) = (labels[i][t], labels[j][t]) {
                    both += 1.0;
                    if x == y {
                        same += 1.0;
                    }
                }
            }
            if both > 0.0 {
                w[i][j] = same / both;
            }
        }
    }
    let mut w_hat = vec![vec![0.0; b]; b];
    for i in 0..b {
        let mut row = 0.0;
        for j in 0..b {
            row += w[i][j];
        }
        if row > 0.0 {
            for j in 0..b {
                w_hat[i][j] = w[i][j] / row;
            }
        }
    }
    (w, w_hat)
}

pub fn o_meta_loss(x: &[Vec<f64>], labels: &Labels, tau: f64) -> f64 {
    let b = x.len();
    let (_, w_hat) = o_pair_weights(labels);
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        for k in 0..b {
            if k != i {
                denom += (o_cos(&x[i], &x[k]) / tau).exp();
            }
        }
        for j in 0..b {
            if j != i && w_hat[i][j] != 0.0 {
                let p = (o_cos(&x[i], &x[j]) / tau).exp() / denom;
                total += w_hat[i][j] * p.ln();
            }
        }
    }
    -total / b as f64
}

/// `standard = false` puts the positive `z_j` in the denominator anchor.
pub fn o_scl(z: &[Vec<f64>], y: &[Option<usize>], tau: f64, standard: bool) -> f64 {
    let b = z.len();
    let mut total = 0.0;
    for i in 0..b {
        let Some(yi) = y[i] else { continue };
        let positives: Vec<usize> = (0..b).filter(|&j| j != i && y[j] == Some(yi)).collect();
        if positives.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &j in &positives {
            let num = (o_cos(&z[i], &z[j]) / tau).exp();
            let mut den = 0.0;
            for k in 0..b {
                if k == i {
                    continue;
                }
                den += if standard {
                    (o_cos(&z[i], &z[k]) / tau).exp()
                } else {
                    (o_cos(&z[k], &z[j]) / tau).exp()
                };
            }
            acc += (num / den).ln();
        }
        total += acc / positives.len() as f64;
    }
    -total / b as f64
}

pub fn o_pal(z: &[Vec<f64>], y: &[Option<usize>], protos: &[Vec<f64>], usable: &[bool]) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        if let Some(c) = y[i] {
            if usable[c] {
                total += 1.0 - o_cos(&z[i], &protos[c]);
            }
        }
    }
    total / z.len() as f64
}

pub fn o_ema_closed_form(p0: &[f64], c: &[f64], m: f64, k: i32) -> Vec<f64> {
    let mk = m.powi(k);
    p0.iter().zip(c).map(|(p, c)| mk * p + (1.0 - mk) * c).collect()
}

/// Per-class recall / precision / F1 written out from the raw counts.
pub struct OracleMetrics {
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

pub fn o_metrics(cm: &[Vec<u64>]) -> OracleMetrics {
    let c = cm.len();
    let mut recalls = Vec::new();
    let mut f1s = Vec::new();
    let mut weighted = 0.0;
    let mut total = 0u64;
    for row in cm {
        for v in row {
            total += v;
        }
    }
    for k in 0..c {
        let mut support = 0u64;
        let mut predicted = 0u64;
        for j in 0..c {
            support += cm[k][j];
            predicted += cm[j][k];
        }
        if support == 0 {
            continue;
        }
        let tp = cm[k][k] as f64;
        let recall = tp / support as f64;
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        recalls.push(recall);
        f1s.push(f1);
        weighted += f1 * support as f64 / total as f64;
    }
    OracleMetrics {
        balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
        weighted_f1: weighted,
    }
}

/// Three tasks with 2, 3 and 4 classes.
pub fn schema_234() -> TaskSchema {
    TaskSchema::from_pairs(&[
        ("gender", &["female", "male"]),
        ("emotion", &["happy", "sad", "neutral"]),
        ("age", &["child", "teen", "adult", "senior"]),
    ])
    .unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Labels with roughly a `missing` share of entries absent.
pub fn random_labels(rng: &mut ChaCha8Rng, b: usize, classes: &[usize], missing: f64) -> Labels {
    (0..b)
        .map(|_| {
            classes
                .iter()
                .map(|&c| (!rng.gen_bool(missing)).then(|| rng.gen_range(0..c)))
                .collect()
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn column(labels: &Labels, t: usize) -> Vec<Option<usize>> {
    labels.iter().map(|l| l[t]).collect()
}
