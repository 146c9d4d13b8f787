//! Labeled samples, JSONL ingestion, the seeded synthetic generator and
//! subject-independent splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::schema::TaskSchema;

/// One sample: an F×t feature matrix, per-task optional labels and an
/// optional style caption. `subject` is the grouping key for splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub subject: String,
    pub frames: Tensor,
    pub labels: Vec<Option<usize>>,
    pub caption: Option<String>,
}

impl LabeledSample {
    pub fn bins(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: TaskSchema,
    samples: Vec<LabeledSample>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    subject: String,
    frames: Vec<Vec<f64>>,
    #[serde(default)]
    labels: BTreeMap<String, String>,
    #[serde(default)]
    caption: Option<String>,
}

impl Dataset {
    /// Validates labels against the schema and requires one bin count F
    /// across all samples.
    pub fn new(schema: TaskSchema, samples: Vec<LabeledSample>) -> Result<Self> {
        let bins = samples.first().map(LabeledSample::bins);
        for s in &samples {
            schema.check_labels(&s.labels)?;
            if Some(s.bins()) != bins {
                return Err(Error::Parse {
                    line: None,
                    msg: format!(
                        "sample '{}' has {} bins, expected {}",
                        s.id,
                        s.bins(),
                        bins.unwrap_or(0)
                    ),
                });
            }
        }
        Ok(Self { schema, samples })
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Frequency-bin count F shared by every sample (None when empty).
    pub fn bins(&self) -> Option<usize> {
        self.samples.first().map(LabeledSample::bins)
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.subject.as_str()).collect()
    }

    pub fn load_jsonl(path: &Path, schema: &TaskSchema) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(parse_record(&line, line_no, schema)?);
        }
        Self::new(schema.clone(), samples)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            let record = Record {
                id: s.id.clone(),
                subject: s.subject.clone(),
                frames: s.frames.to_rows(),
                labels: s
                    .labels
                    .iter()
                    .enumerate()
                    .filter_map(|(t, l)| {
                        l.map(|c| {
                            (
                                self.schema.task_name(t).to_string(),
                                self.schema.class_name(t, c).to_string(),
                            )
                        })
                    })
                    .collect(),
                caption: s.caption.clone(),
            };
            serde_json::to_writer(&mut w, &record).map_err(|e| Error::json(path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn subset(&self, keep: impl Fn(&LabeledSample) -> bool) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

fn parse_record(line: &str, line_no: usize, schema: &TaskSchema) -> Result<LabeledSample> {
    let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: Some(line_no),
        msg: e.to_string(),
    })?;
    let frames = Tensor::from_rows(&rec.frames).map_err(|e| Error::Parse {
        line: Some(line_no),
        msg: format!("frames: {e}"),
    })?;
    if !frames.all_finite() {
        return Err(Error::Parse {
            line: Some(line_no),
            msg: "frames contain non-finite values".into(),
        });
    }
    let mut labels = vec![None; schema.num_tasks()];
    for (task, class) in &rec.labels {
        let t = schema.task_index(task).ok_or_else(|| Error::Schema {
            line: Some(line_no),
            msg: format!("unknown task '{task}'"),
        })?;
        let c = schema.class_index(t, class).ok_or_else(|| Error::Schema {
            line: Some(line_no),
            msg: format!("unknown class '{class}' for task '{task}'"),
        })?;
        labels[t] = Some(c);
    }
    Ok(LabeledSample {
        id: rec.id,
        subject: rec.subject,
        frames,
        labels,
        caption: rec.caption,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub bins: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    pub subjects: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            bins: 32,
            frames: 8,
            noise_sigma: 0.25,
            subjects: 40,
            seed: 7,
        }
    }
}

/// The per-(task, class) unit-Frobenius-norm F×t patterns used by
/// [`generate_synthetic`] for a given seed. Each is a random spectral
/// envelope (Gaussian over bins) times a random positive loudness contour
/// (uniform in [0.5, 1.5] over frames), so the class signal survives
/// pooling over time.
pub fn synthetic_templates(
    schema: &TaskSchema,
    bins: usize,
    frames: usize,
    seed: u64,
) -> Vec<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..schema.num_tasks())
        .map(|t| {
            (0..schema.num_classes(t))
                .map(|_| {
                    let envelope: Vec<f64> = (0..bins)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let contour: Vec<f64> = (0..frames).map(|_| rng.gen_range(0.5..1.5)).collect();
                    let data: Vec<f64> = envelope
                        .iter()
                        .flat_map(|e| contour.iter().map(move |c| e * c))
                        .collect();
                    let n = data.iter().map(|v| v * v).sum::<f64>().sqrt();
                    Tensor::new(bins, frames, data.into_iter().map(|v| v / n).collect())
                        .expect("positive shape")
                })
                .collect()
        })
        .collect()
}

/// Seeded synthetic multi-factor data: frames are the sum of one template
/// per task plus Gaussian noise. Every subject carries a single label
/// combination and samples are dealt to subjects round-robin.
pub fn generate_synthetic(schema: &TaskSchema, cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.samples == 0 || cfg.bins == 0 || cfg.frames == 0 || cfg.subjects == 0 {
        return Err(Error::Config(
            "synthetic samples, bins, frames and subjects must be positive".into(),
        ));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Config("noise_sigma must be non-negative".into()));
    }
    let templates = synthetic_templates(schema, cfg.bins, cfg.frames, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let combos: Vec<Vec<usize>> = (0..cfg.subjects)
        .map(|_| {
            (0..schema.num_tasks())
                .map(|t| rng.gen_range(0..schema.num_classes(t)))
                .collect()
        })
        .collect();

    let width = (cfg.subjects - 1).to_string().len();
    let id_width = (cfg.samples - 1).to_string().len();
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let subject = i % cfg.subjects;
        let combo = &combos[subject];
        let mut frames = Tensor::zeros(cfg.bins, cfg.frames);
        for (t, &c) in combo.iter().enumerate() {
            frames.add_assign(&templates[t][c]);
        }
        if cfg.noise_sigma > 0.0 {
            for v in frames.data_mut() {
                *v += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let labels: Vec<Option<usize>> = combo.iter().map(|&c| Some(c)).collect();
        samples.push(LabeledSample {
            id: format!("syn-{i:0id_width$}"),
            subject: format!("subj-{subject:0width$}"),
            caption: Some(schema.render_caption(&labels)),
            frames,
            labels,
        });
    }
    Dataset::new(schema.clone(), samples)
}

/// Partitions by subject so no subject lands in both halves. The number of
/// test subjects is `round(fraction * subjects)`, clamped to `[1, subjects - 1]`.
pub fn split_subject_independent(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Split(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut keys: Vec<&str> = data.subjects().into_iter().collect();
    if keys.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 distinct subjects, found {}",
            keys.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);
    let n_test = ((test_fraction * keys.len() as f64).round() as usize).clamp(1, keys.len() - 1);
    let test: HashSet<String> = keys[..n_test].iter().map(|k| k.to_string()).collect();
    Ok((
        data.subset(|s| !test.contains(&s.subject)),
        data.subset(|s| test.contains(&s.subject)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema3() -> TaskSchema {
        TaskSchema::from_pairs(&[
            ("gender", &["female", "male"]),
            ("emotion", &["happy", "sad", "neutral"]),
            ("age", &["child", "adult", "senior"]),
        ])
        .unwrap()
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn resolves_labels_and_missing_tasks() {
        let f = write_lines(&[
            r#"{"id":"a","subject":"s1","frames":[[1,2],[3,4]],"labels":{"gender":"female","emotion":"happy"},"caption":null}"#,
        ]);
        let d = Dataset::load_jsonl(f.path(), &schema3()).unwrap();
        let s = &d.samples()[0];
        assert_eq!(s.labels, vec![Some(0), Some(0), None]);
        assert_eq!(s.frames.shape(), (2, 2));
        assert_eq!(s.caption, None);
    }

    #[test]
    fn unknown_class_is_schema_error_with_line() {
        let f = write_lines(&[
            r#"{"id":"a","subject":"s1","frames":[[1]],"labels":{"gender":"male"}}"#,
            r#"{"id":"b","subject":"s1","frames":[[1]],"labels":{"emotion":"joyful"}}"#,
        ]);
        match Dataset::load_jsonl(f.path(), &schema3()) {
            Err(Error::Schema { line: Some(2), msg }) => assert!(msg.contains("joyful")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_numbers_are_parse_errors() {
        let f = write_lines(&[r#"{"id":"a","subject":"s","frames":[[1,"x"]],"labels":{}}"#]);
        assert!(matches!(
            Dataset::load_jsonl(f.path(), &schema3()),
            Err(Error::Parse { line: Some(1), .. })
        ));
        let f = write_lines(&[r#"{"id":"a","subject":"s","frames":[[1,2],[3]],"labels":{}}"#]);
        assert!(matches!(
            Dataset::load_jsonl(f.path(), &schema3()),
            Err(Error::Parse { line: Some(1), .. })
        ));
    }

    #[test]
    fn noiseless_samples_with_equal_labels_match() {
        let cfg = SyntheticConfig {
            samples: 30,
            noise_sigma: 0.0,
            subjects: 3,
            ..Default::default()
        };
        let d = generate_synthetic(&schema3(), &cfg).unwrap();
        let s = d.samples();
        // round-robin subject assignment, so samples 0 and 3 share a subject
        assert_eq!(s[0].labels, s[3].labels);
        assert_eq!(s[0].frames, s[3].frames);
    }

    #[test]
    fn subjects_carry_one_combination() {
        let d = generate_synthetic(&schema3(), &SyntheticConfig::default()).unwrap();
        let mut by_subject: BTreeMap<&str, &Vec<Option<usize>>> = BTreeMap::new();
        for s in d.samples() {
            let prev = by_subject.insert(&s.subject, &s.labels);
            assert!(prev.is_none_or(|p| p == &s.labels));
        }
        assert_eq!(by_subject.len(), 40);
    }

    #[test]
    fn synthetic_captions_follow_template() {
        let cfg = SyntheticConfig {
            samples: 4,
            ..Default::default()
        };
        let d = generate_synthetic(&schema3(), &cfg).unwrap();
        let s = &d.samples()[0];
        assert_eq!(s.caption.as_deref(), Some(schema3().render_caption(&s.labels).as_str()));
        assert!(s.caption.as_ref().unwrap().starts_with("a ") && s.caption.as_ref().unwrap().ends_with(" voice"));
    }

    #[test]
    fn split_counts_and_errors() {
        let cfg = SyntheticConfig {
            samples: 50,
            subjects: 10,
            ..Default::default()
        };
        let d = generate_synthetic(&schema3(), &cfg).unwrap();
        let (train, test) = split_subject_independent(&d, 0.2, 1).unwrap();
        assert_eq!(test.subjects().len(), 2);
        assert_eq!(train.subjects().len(), 8);
        assert_eq!(train.len() + test.len(), 50);

        let one = d.subset(|s| s.subject == d.samples()[0].subject);
        assert!(matches!(split_subject_independent(&one, 0.2, 1), Err(Error::Split(_))));
        assert!(split_subject_independent(&d, 1.0, 1).is_err());
    }
}
