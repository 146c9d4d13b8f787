//! The C entry points called through their Rust signatures.

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use stylespace::data::generate_synthetic;
use stylespace::inference;
use stylespace::trainer::{run_training, RunOptions};
use stylespace::{Model, SyntheticConfig, TaskSchema, Tensor, TrainConfig};
use stylespace_ffi::*;

const BINS: usize = 10;

fn schema() -> TaskSchema {
    TaskSchema::from_pairs(&[("gender", &["female", "male"]), ("emotion", &["happy", "sad", "neutral"])]).unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    path: PathBuf,
    model: Model,
    frames: Vec<Tensor>,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let cfg = SyntheticConfig {
        samples: 160,
        bins: BINS,
        frames: 3,
        subjects: 8,
        ..Default::default()
    };
    let data = generate_synthetic(&schema(), &cfg).unwrap();
    let config = TrainConfig {
        batch_size: 16,
        max_steps: 30,
        meta_dim: 12,
        task_dim: 5,
        hidden: 12,
        text_dim: 6,
        prefetch: 0,
        ..Default::default()
    };
    let (ckpt, _) = run_training(&data, config, &RunOptions::default()).unwrap();
    ckpt.save(&path).unwrap();
    let model = ckpt.model().unwrap();
    let frames = data.samples()[..4].iter().map(|s| s.frames.clone()).collect();
    Trained {
        _dir: dir,
        path,
        model,
        frames,
    }
}

fn load(path: &Path) -> *mut StsModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { sts_model_load(c.as_ptr(), &mut handle) }, StsStatus::Ok);
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    let p = sts_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn shape_queries() {
    let t = trained();
    let h = load(&t.path);
    let mut v = 0usize;
    unsafe {
        assert_eq!(sts_model_num_tasks(h, &mut v), StsStatus::Ok);
        assert_eq!(v, 2);
        assert_eq!(sts_model_num_classes(h, 1, &mut v), StsStatus::Ok);
        assert_eq!(v, 3);
        assert_eq!(sts_model_num_classes(h, 2, &mut v), StsStatus::InvalidArgument);
        assert_eq!(sts_model_task_dim(h, &mut v), StsStatus::Ok);
        assert_eq!(v, 5);
        assert_eq!(sts_model_bins(h, &mut v), StsStatus::Ok);
        assert_eq!(v, BINS);
        sts_model_free(h);
    }
}

#[test]
fn classify_and_style_match_the_library() {
    let t = trained();
    let h = load(&t.path);
    for x in &t.frames {
        let want = inference::classify(&t.model, x).unwrap();
        let mut classes = [0usize; 2];
        let mut scores = [0f64; 2];
        let st = unsafe {
            sts_classify(h, x.data().as_ptr(), BINS, x.cols(), classes.as_mut_ptr(), scores.as_mut_ptr(), 2)
        };
        assert_eq!(st, StsStatus::Ok);
        for k in 0..2 {
            assert_eq!(classes[k], want[k].class);
            assert_eq!(scores[k], want[k].score);
        }

        let style = inference::extract_style(&t.model, x).unwrap();
        let mut out = vec![0f64; 10];
        let st = unsafe { sts_extract_style(h, x.data().as_ptr(), BINS, x.cols(), out.as_mut_ptr(), out.len()) };
        assert_eq!(st, StsStatus::Ok);
        assert_eq!(out, style.concat());
    }
    unsafe { sts_model_free(h) };
}

#[test]
fn manipulation_reports_full_strength_hit() {
    let t = trained();
    let h = load(&t.path);
    let x = &t.frames[0];
    let mut out = vec![0f64; 10];
    let mut report = StsManipulation::default();
    let st = unsafe {
        sts_manipulate(h, x.data().as_ptr(), BINS, x.cols(), 1, 2, 1.0, out.as_mut_ptr(), out.len(), &mut report)
    };
    assert_eq!(st, StsStatus::Ok);
    assert_eq!(report.target_class, 2);
    assert_eq!(report.reclass_hit, 1);
    assert_eq!(report.other_tasks_stable, 1);
    assert!((report.manip_sim - 1.0).abs() < 1e-12);
    let (style, _) = inference::manipulate(&t.model, x, 1, 2, 1.0).unwrap();
    assert_eq!(out, style.concat());

    let st = unsafe {
        sts_manipulate(h, x.data().as_ptr(), BINS, x.cols(), 1, 2, 1.5, out.as_mut_ptr(), out.len(), ptr::null_mut())
    };
    assert_eq!(st, StsStatus::InvalidArgument);
    unsafe { sts_model_free(h) };
}

#[test]
fn caption_classification_marks_absent_tasks() {
    let t = trained();
    let h = load(&t.path);
    let mut classes = [7i64; 2];
    let mut scores = [0f64; 2];
    let c = CString::new("a sad voice").unwrap();
    let st = unsafe { sts_classify_caption(h, c.as_ptr(), classes.as_mut_ptr(), scores.as_mut_ptr(), 2) };
    assert_eq!(st, StsStatus::Ok);
    assert_eq!(classes[0], -1);
    assert!(scores[0].is_nan());
    let want = inference::classify_caption(&t.model, "a sad voice").unwrap();
    assert_eq!(classes[1], want[1].unwrap().class as i64);

    let c = CString::new("a happy sad voice").unwrap();
    let st = unsafe { sts_classify_caption(h, c.as_ptr(), classes.as_mut_ptr(), scores.as_mut_ptr(), 2) };
    assert_eq!(st, StsStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    unsafe { sts_model_free(h) };
}

#[test]
fn argument_errors_are_reported() {
    let t = trained();
    let h = load(&t.path);
    let x = &t.frames[0];
    let mut classes = [0usize; 2];
    let mut scores = [0f64; 2];
    unsafe {
        let st = sts_classify(h, x.data().as_ptr(), BINS, x.cols(), classes.as_mut_ptr(), scores.as_mut_ptr(), 1);
        assert_eq!(st, StsStatus::BufferTooSmall);
        assert!(last_error().contains("need 2"));
        let st = sts_classify(h, ptr::null(), BINS, x.cols(), classes.as_mut_ptr(), scores.as_mut_ptr(), 2);
        assert_eq!(st, StsStatus::NullPointer);
        let st = sts_classify(h, x.data().as_ptr(), BINS - 1, x.cols(), classes.as_mut_ptr(), scores.as_mut_ptr(), 2);
        assert_eq!(st, StsStatus::InvalidArgument);
        let st = sts_classify(ptr::null(), x.data().as_ptr(), BINS, x.cols(), classes.as_mut_ptr(), scores.as_mut_ptr(), 2);
        assert_eq!(st, StsStatus::NullPointer);
        let mut v = 0usize;
        assert_eq!(sts_model_num_tasks(h, ptr::null_mut()), StsStatus::NullPointer);
        assert_eq!(sts_model_num_tasks(h, &mut v), StsStatus::Ok);
        sts_model_free(h);
        sts_model_free(ptr::null_mut());
    }
}

#[test]
fn load_failures_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sts_model_load(missing.as_ptr(), &mut handle) }, StsStatus::Io);
    assert!(handle.is_null());
    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{not json").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sts_model_load(junk.as_ptr(), &mut handle) }, StsStatus::Parse);
    assert_eq!(unsafe { sts_model_load(ptr::null(), &mut handle) }, StsStatus::NullPointer);
    assert_eq!(unsafe { sts_model_load(junk.as_ptr(), ptr::null_mut()) }, StsStatus::NullPointer);
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stylespace.h")).unwrap();
    for name in [
        "STYLESPACE_H",
        "StsStatus",
        "StsModel",
        "StsManipulation",
        "sts_last_error_message",
        "sts_model_load",
        "sts_model_free",
        "sts_model_num_tasks",
        "sts_model_num_classes",
        "sts_model_task_dim",
        "sts_model_bins",
        "sts_classify",
        "sts_extract_style",
        "sts_manipulate",
        "sts_classify_caption",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
