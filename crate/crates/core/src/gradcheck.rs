//! Central finite-difference check of every loss component against the
//! reverse-mode gradients, over all trainable parameters.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::Tensor;
use crate::encoder::BackboneKind;
use crate::error::Result;
use crate::losses::DenominatorMode;
use crate::model::{BatchInput, Model, ModelDims};
use crate::schema::TaskSchema;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Meta,
    SclAsWritten,
    SclStandard,
    PalSpeech,
    PalText,
    Total,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Meta,
        Component::SclAsWritten,
        Component::SclStandard,
        Component::PalSpeech,
        Component::PalText,
        Component::Total,
    ];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Meta => "meta",
            Component::SclAsWritten => "scl_as_written",
            Component::SclStandard => "scl_standard",
            Component::PalSpeech => "pal_speech",
            Component::PalText => "pal_text",
            Component::Total => "total",
        })
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub batches: usize,
    pub batch_size: usize,
    pub meta_dim: usize,
    pub task_dim: usize,
    pub bins: usize,
    pub frames: usize,
    pub hidden: usize,
    pub text_dim: usize,
    pub backbone: BackboneKind,
    pub tau: f64,
    pub step: f64,
    /// Share of labels dropped to missing.
    pub missing_rate: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            batches: 5,
            batch_size: 6,
            meta_dim: 16,
            task_dim: 8,
            bins: 5,
            frames: 4,
            hidden: 6,
            text_dim: 6,
            backbone: BackboneKind::FrameMlp,
            tau: 0.5,
            step: FD_STEP,
            missing_rate: 0.2,
        }
    }
}

/// Largest relative error seen per component.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: Vec<(Component, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error.iter().all(|&(_, e)| e < tolerance)
    }

    pub fn get(&self, c: Component) -> f64 {
        self.max_rel_error
            .iter()
            .find(|(k, _)| *k == c)
            .map_or(f64::NAN, |&(_, e)| e)
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`, 0 when both are zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn grad_check_schema() -> TaskSchema {
    TaskSchema::from_pairs(&[
        ("gender", &["female", "male"]),
        ("emotion", &["happy", "sad", "neutral"]),
        ("age", &["child", "teen", "adult", "senior"]),
    ])
    .expect("static schema is valid")
}

struct RandomBatch {
    frames: Vec<Tensor>,
    labels: Vec<Vec<Option<usize>>>,
    captions: Vec<String>,
}

fn random_batch(schema: &TaskSchema, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<RandomBatch> {
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..cfg.batch_size {
        let data = (0..cfg.bins * cfg.frames).map(|_| rng.sample(StandardNormal)).collect();
        frames.push(Tensor::new(cfg.bins, cfg.frames, data)?);
        labels.push(
            (0..schema.num_tasks())
                .map(|t| (!rng.gen_bool(cfg.missing_rate)).then(|| rng.gen_range(0..schema.num_classes(t))))
                .collect::<Vec<_>>(),
        );
    }
    let captions = labels.iter().map(|l| schema.render_caption(l)).collect();
    Ok(RandomBatch {
        frames,
        labels,
        captions,
    })
}

fn component_values(model: &Model, batch: &BatchInput<'_>, tau: f64) -> Result<[f64; 6]> {
    let w = model.objective(batch, tau, DenominatorMode::AsWritten)?;
    let s = model.objective(batch, tau, DenominatorMode::Standard)?;
    let v = |g: &crate::diff::Graph, x| g.value(x).item();
    let scl_w: f64 = w.terms.scl.iter().map(|&x| v(&w.graph, x)).sum();
    let scl_s: f64 = s.terms.scl.iter().map(|&x| v(&s.graph, x)).sum();
    Ok([
        v(&w.graph, w.terms.meta),
        scl_w,
        scl_s,
        v(&w.graph, w.terms.pal_speech),
        v(&w.graph, w.terms.pal_text),
        v(&w.graph, w.terms.total),
    ])
}

/// Analytic gradients of every component, one tensor list per component.
fn analytic_grads(model: &Model, batch: &BatchInput<'_>, tau: f64) -> Result<Vec<Vec<Tensor>>> {
    let mut out = Vec::new();
    for c in Component::ALL {
        let mode = if c == Component::SclStandard {
            DenominatorMode::Standard
        } else {
            DenominatorMode::AsWritten
        };
        let mut obj = model.objective(batch, tau, mode)?;
        let root = match c {
            Component::Meta => obj.terms.meta,
            Component::SclAsWritten | Component::SclStandard => {
                crate::losses::sum_vars(&mut obj.graph, &obj.terms.scl)?
            }
            Component::PalSpeech => obj.terms.pal_speech,
            Component::PalText => obj.terms.pal_text,
            Component::Total => obj.terms.total,
        };
        obj.graph.backward(root)?;
        let grads = obj
            .params
            .all()
            .zip(model.params())
            .map(|(v, p)| {
                obj.graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols()))
            })
            .collect();
        out.push(grads);
    }
    Ok(out)
}

fn check_batch(model: &mut Model, rb: &RandomBatch, cfg: &GradCheckConfig, worst: &mut [f64; 6]) -> Result<()> {
    let analytic = {
        let batch = batch_input(rb, &model.schema)?;
        analytic_grads(model, &batch, cfg.tau)?
    };
    let shapes: Vec<(usize, usize)> = model.params().map(|p| p.value.shape()).collect();
    for (k, &(r, c)) in shapes.iter().enumerate() {
        let mut numeric = vec![vec![0.0; r * c]; 6];
        for i in 0..r * c {
            let orig = model.params().nth(k).expect("index in range").value.data()[i];
            let eval_at = |x: f64, model: &mut Model| -> Result<[f64; 6]> {
                model.params_mut().nth(k).expect("index in range").value.data_mut()[i] = x;
                let batch = batch_input(rb, &model.schema)?;
                component_values(model, &batch, cfg.tau)
            };
            let plus = eval_at(orig + cfg.step, model)?;
            let minus = eval_at(orig - cfg.step, model)?;
            model.params_mut().nth(k).expect("index in range").value.data_mut()[i] = orig;
            for j in 0..6 {
                numeric[j][i] = (plus[j] - minus[j]) / (2.0 * cfg.step);
            }
        }
        for j in 0..6 {
            let e = relative_error(analytic[j][k].data(), &numeric[j]);
            worst[j] = worst[j].max(e);
        }
    }
    Ok(())
}

fn batch_input<'a>(rb: &'a RandomBatch, schema: &TaskSchema) -> Result<BatchInput<'a>> {
    let captions = rb
        .captions
        .iter()
        .map(|c| Ok((c.as_str(), crate::heads::parse_caption_classes(c, schema)?)))
        .collect::<Result<_>>()?;
    Ok(BatchInput {
        frames: rb.frames.iter().collect(),
        labels: rb.labels.clone(),
        captions,
    })
}

/// Runs the check on `cfg.batches` seeded random batches, each with a fresh
/// model whose prototypes are all set to random directions.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let schema = grad_check_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = [0.0f64; 6];
    for _ in 0..cfg.batches {
        let dims = ModelDims {
            backbone: cfg.backbone,
            hidden: cfg.hidden,
            meta_dim: cfg.meta_dim,
            task_dim: cfg.task_dim,
            text_dim: cfg.text_dim,
            ..Default::default()
        };
        let mut model = Model::new(&schema, cfg.bins, dims, &mut rng)?;
        for t in 0..schema.num_tasks() {
            for c in 0..schema.num_classes(t) {
                let p: Vec<f64> = (0..cfg.task_dim).map(|_| rng.sample(StandardNormal)).collect();
                model.bank.set_prototype(t, c, &p)?;
            }
        }
        let rb = random_batch(&schema, cfg, &mut rng)?;
        check_batch(&mut model, &rb, cfg, &mut worst)?;
    }
    Ok(GradCheckReport {
        max_rel_error: Component::ALL.iter().copied().zip(worst).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn small_check_passes() {
        let cfg = GradCheckConfig {
            batches: 1,
            batch_size: 4,
            meta_dim: 4,
            task_dim: 3,
            bins: 3,
            frames: 2,
            hidden: 3,
            text_dim: 3,
            ..Default::default()
        };
        let r = run_grad_check(&cfg).unwrap();
        assert!(r.passed(TOLERANCE), "{r:?}");
    }
}
