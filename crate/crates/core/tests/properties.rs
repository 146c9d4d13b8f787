//! Property tests over randomly generated batches, matrices and models.

mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use stylespace::data::{generate_synthetic, split_subject_independent};
use stylespace::diff::{Graph, Tensor, Var};
use stylespace::inference::{self, classify_embedding, manipulate_style, StyleVector};
use stylespace::losses::{meta_loss, pair_similarity_weights, prototype_alignment_loss, supervised_contrastive_loss};
use stylespace::metrics::{balanced_accuracy, macro_f1, weighted_f1};
use stylespace::{BackboneKind, ConfusionMatrix, DenominatorMode, Model, ModelDims, SyntheticConfig};

fn leaf(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
    g.constant(Tensor::from_rows(rows).unwrap())
}

/// meta, scl (both modes, every task) and speech PAL on one batch.
fn all_losses(x: &[Vec<f64>], zs: &[Vec<Vec<f64>>], labels: &Labels, protos: &[Tensor]) -> Vec<f64> {
    let mut g = Graph::new();
    let mut out = Vec::new();
    let xv = leaf(&mut g, x);
    let w = pair_similarity_weights(labels).unwrap();
    let l = meta_loss(&mut g, xv, &w, 0.7).unwrap();
    out.push(g.value(l).item());
    for (t, z) in zs.iter().enumerate() {
        let zv = leaf(&mut g, z);
        let y = column(labels, t);
        for mode in [DenominatorMode::AsWritten, DenominatorMode::Standard] {
            let l = supervised_contrastive_loss(&mut g, zv, &y, 0.7, mode).unwrap();
            out.push(g.value(l).item());
        }
        let usable = vec![true; protos[t].rows()];
        let l = prototype_alignment_loss(&mut g, zv, &y, &protos[t], &usable).unwrap();
        out.push(g.value(l).item());
    }
    out
}

struct Batch {
    x: Vec<Vec<f64>>,
    zs: Vec<Vec<Vec<f64>>>,
    labels: Labels,
    protos: Vec<Tensor>,
}

fn batch(seed: u64, b: usize) -> Batch {
    let mut r = rng(seed);
    let classes = [2, 3, 4];
    Batch {
        x: random_rows(&mut r, b, 6),
        zs: (0..3).map(|_| random_rows(&mut r, b, 4)).collect(),
        labels: random_labels(&mut r, b, &classes, 0.25),
        protos: classes.iter().map(|&c| Tensor::from_rows(&random_rows(&mut r, c, 4)).unwrap()).collect(),
    }
}

fn trained_like_model(seed: u64) -> Model {
    let mut r = rng(seed);
    let dims = ModelDims {
        hidden: 6,
        meta_dim: 8,
        task_dim: 4,
        text_dim: 4,
        ..Default::default()
    };
    let mut model = Model::new(&schema_234(), 5, dims, &mut r).unwrap();
    for t in 0..3 {
        for c in 0..model.schema.num_classes(t) {
            let p: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            model.bank.set_prototype(t, c, &p).unwrap();
        }
    }
    model
}

fn random_confusion(seed: u64, classes: usize) -> Vec<Vec<u64>> {
    let mut r = rng(seed);
    let mut cm: Vec<Vec<u64>> = (0..classes)
        .map(|_| (0..classes).map(|_| if r.gen_bool(0.2) { 0 } else { r.gen_range(0..30) }).collect())
        .collect();
    cm[0][0] += 1;
    cm
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_permutation_equivariant(seed in any::<u64>(), b in 2usize..10) {
        let bt = batch(seed, b);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng(seed ^ 1));
        let pick = |rows: &[Vec<f64>]| perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
        let labels: Labels = perm.iter().map(|&i| bt.labels[i].clone()).collect();
        let zs: Vec<_> = bt.zs.iter().map(|z| pick(z)).collect();
        let a = all_losses(&bt.x, &bt.zs, &bt.labels, &bt.protos);
        let p = all_losses(&pick(&bt.x), &zs, &labels, &bt.protos);
        for (u, v) in a.iter().zip(&p) {
            prop_assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
    }

    #[test]
    fn losses_are_invariant_to_uniform_rescaling(seed in any::<u64>(), b in 2usize..10) {
        let bt = batch(seed, b);
        let triple = |rows: &[Vec<f64>]| rows.iter().map(|r| r.iter().map(|v| 3.0 * v).collect()).collect::<Vec<Vec<f64>>>();
        let zs: Vec<_> = bt.zs.iter().map(|z| triple(z)).collect();
        let a = all_losses(&bt.x, &bt.zs, &bt.labels, &bt.protos);
        let s = all_losses(&triple(&bt.x), &zs, &bt.labels, &bt.protos);
        for (u, v) in a.iter().zip(&s) {
            prop_assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
    }

    #[test]
    fn normalized_weights_rows_sum_to_one(seed in any::<u64>(), b in 2usize..12, missing in 0.0f64..0.9) {
        let labels = random_labels(&mut rng(seed), b, &[2, 3, 4], missing);
        let w = pair_similarity_weights(&labels).unwrap();
        for i in 0..b {
            let s: f64 = w.w_hat.row(i).iter().sum();
            if w.valid_row[i] {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(w.w_hat.row(i).iter().all(|&v| v == 0.0));
            }
            for j in 0..b {
                prop_assert!((0.0..=1.0).contains(&w.w.get(i, j)));
            }
        }
    }

    #[test]
    fn masked_log_softmax_rows_are_distributions(seed in any::<u64>(), m in 2usize..8) {
        let s = Tensor::from_rows(&random_rows(&mut rng(seed), m, m)).unwrap();
        let mut g = Graph::new();
        let v = g.constant(s);
        let out = g.log_softmax_row_masked(v, true).unwrap();
        for i in 0..m {
            let mass: f64 = (0..m).filter(|&j| j != i).map(|j| g.value(out).get(i, j).exp()).sum();
            prop_assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_bounded_and_class_permutation_invariant(seed in any::<u64>(), classes in 2usize..7) {
        let cm = random_confusion(seed, classes);
        let mut perm: Vec<usize> = (0..classes).collect();
        perm.shuffle(&mut rng(seed ^ 2));
        let permuted: Vec<Vec<u64>> = (0..classes)
            .map(|i| (0..classes).map(|j| cm[perm[i]][perm[j]]).collect())
            .collect();
        let a = ConfusionMatrix::from_counts(cm).unwrap();
        let b = ConfusionMatrix::from_counts(permuted).unwrap();
        for f in [balanced_accuracy, macro_f1, weighted_f1] {
            let (u, v) = (f(&a).unwrap(), f(&b).unwrap());
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_ignores_positive_rescaling(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let model = trained_like_model(seed);
        let mut r = rng(seed ^ 3);
        for t in 0..3 {
            let z: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
            let a = classify_embedding(&model, t, &z).unwrap();
            let b = classify_embedding(&model, t, &scaled).unwrap();
            prop_assert_eq!(a.class, b.class);
            prop_assert!((a.score - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_strength_manipulation_is_identity(seed in any::<u64>(), task in 0usize..3, target in 0usize..4) {
        let model = trained_like_model(seed);
        let target = target % model.schema.num_classes(task);
        let frames = Tensor::from_rows(&random_rows(&mut rng(seed ^ 4), 5, 3)).unwrap();
        let style = inference::extract_style(&model, &frames).unwrap();
        let (out, _) = manipulate_style(&model, &style, task, target, 0.0).unwrap();
        prop_assert_eq!(out.concat(), style.concat());
    }

    #[test]
    fn full_strength_manipulation_reaches_target(seed in any::<u64>(), task in 0usize..3, target in 0usize..4) {
        let model = trained_like_model(seed);
        let target = target % model.schema.num_classes(task);
        let frames = Tensor::from_rows(&random_rows(&mut rng(seed ^ 5), 5, 3)).unwrap();
        let style = inference::extract_style(&model, &frames).unwrap();
        let (out, report) = manipulate_style(&model, &style, task, target, 1.0).unwrap();
        prop_assert!(report.reclass_hit);
        prop_assert!((report.manip_sim - 1.0).abs() < 1e-12);
        prop_assert!(report.manip_sim >= report.orig_sim);
        prop_assert_eq!(classify_embedding(&model, task, out.slice(task)).unwrap().class, target);
        for other in (0..3).filter(|&t| t != task) {
            prop_assert_eq!(out.slice(other), style.slice(other));
        }
    }

    #[test]
    fn style_slices_round_trip(seed in any::<u64>(), tasks in 1usize..5, d in 1usize..6) {
        let slices = random_rows(&mut rng(seed), tasks, d);
        let s = StyleVector::from_slices(&slices).unwrap();
        prop_assert_eq!(s.slices(), slices.clone());
        let back = StyleVector::from_concat(s.concat().to_vec(), d).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn frame_mlp_ignores_frame_order(seed in any::<u64>(), frames in 1usize..7) {
        let model = trained_like_model(seed);
        let mut r = rng(seed ^ 6);
        let x = random_rows(&mut r, 5, frames);
        let mut order: Vec<usize> = (0..frames).collect();
        order.shuffle(&mut r);
        let shuffled: Vec<Vec<f64>> = x.iter().map(|row| order.iter().map(|&k| row[k]).collect()).collect();
        let a = model.encoder.encode(&[&Tensor::from_rows(&x).unwrap()]).unwrap();
        let b = model.encoder.encode(&[&Tensor::from_rows(&shuffled).unwrap()]).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn subject_split_is_disjoint(seed in any::<u64>(), fraction in 0.05f64..0.95) {
        let cfg = SyntheticConfig { samples: 60, bins: 4, frames: 2, subjects: 9, seed: seed % 1000, ..Default::default() };
        let data = generate_synthetic(&schema_234(), &cfg).unwrap();
        let (train, test) = split_subject_independent(&data, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), data.len());
        prop_assert!(!train.is_empty() && !test.is_empty());
        let a = train.subjects();
        prop_assert!(test.subjects().iter().all(|s| !a.contains(s)));
    }

    #[test]
    fn every_backbone_gives_fixed_width(seed in any::<u64>(), frames in 1usize..9, b in 1usize..4) {
        for backbone in [BackboneKind::FrameMlp, BackboneKind::Recurrent, BackboneKind::AttentionPool] {
            let dims = ModelDims { backbone, hidden: 5, meta_dim: 7, task_dim: 3, text_dim: 3, ..Default::default() };
            let model = Model::new(&schema_234(), 4, dims, &mut rng(seed)).unwrap();
            let mut r = rng(seed ^ 7);
            let xs: Vec<Tensor> = (0..b).map(|_| Tensor::from_rows(&random_rows(&mut r, 4, frames)).unwrap()).collect();
            let refs: Vec<&Tensor> = xs.iter().collect();
            let e = model.encoder.encode(&refs).unwrap();
            prop_assert_eq!(e.shape(), (b, 7));
            prop_assert_eq!(model.encoder.encode(&refs).unwrap(), e);
        }
    }
}
