//! Per-task class prototypes tracked by exponential moving average of
//! batch centroids.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::schema::TaskSchema;

pub const BANK_VERSION: u64 = 1;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    schema: TaskSchema,
    momentum: f64,
    prototypes: Vec<Tensor>,
    initialized: Vec<Vec<bool>>,
}

/// On-disk layout of a bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankFile {
    pub version: u64,
    pub momentum: f64,
    pub schema: TaskSchema,
    pub prototypes: BTreeMap<String, Vec<Vec<f64>>>,
    pub initialized: BTreeMap<String, Vec<bool>>,
}

impl PrototypeBank {
    /// Random init, uniform in ±0.1, nothing marked initialized.
    pub fn new(schema: &TaskSchema, dim: usize, momentum: f64, rng: &mut impl Rng) -> Result<Self> {
        check_momentum(momentum)?;
        if dim == 0 {
            return Err(Error::Config("prototype dimension must be positive".into()));
        }
        let prototypes = (0..schema.num_tasks())
            .map(|t| {
                let c = schema.num_classes(t);
                let data = (0..c * dim).map(|_| rng.gen_range(-0.1..=0.1)).collect();
                Tensor::new(c, dim, data).expect("positive shape")
            })
            .collect();
        let initialized = (0..schema.num_tasks())
            .map(|t| vec![false; schema.num_classes(t)])
            .collect();
        Ok(Self {
            schema: schema.clone(),
            momentum,
            prototypes,
            initialized,
        })
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].cols()
    }

    /// C_t×d prototype matrix of a task.
    pub fn task(&self, task: usize) -> &Tensor {
        &self.prototypes[task]
    }

    pub fn prototype(&self, task: usize, class: usize) -> &[f64] {
        self.prototypes[task].row(class)
    }

    pub fn initialized(&self, task: usize) -> &[bool] {
        &self.initialized[task]
    }

    pub fn is_initialized(&self, task: usize, class: usize) -> bool {
        self.initialized[task][class]
    }

    /// Overwrites one prototype and marks it initialized.
    pub fn set_prototype(&mut self, task: usize, class: usize, value: &[f64]) -> Result<()> {
        if value.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "prototype has dimension {}, got {}",
                self.dim(),
                value.len()
            )));
        }
        self.prototypes[task].row_mut(class).copy_from_slice(value);
        self.initialized[task][class] = true;
        Ok(())
    }

    /// `p ← m·p + (1−m)·z_c` for every class with a centroid.
    pub fn ema_update(&mut self, task: usize, centroids: &[Option<Vec<f64>>]) -> Result<()> {
        let classes = self.schema.num_classes(task);
        if centroids.len() != classes {
            return Err(Error::Dimension(format!(
                "task '{}' has {classes} classes, got {} centroids",
                self.schema.task_name(task),
                centroids.len()
            )));
        }
        let dim = self.dim();
        if let Some(bad) = centroids.iter().flatten().find(|c| c.len() != dim) {
            return Err(Error::Dimension(format!(
                "centroid has dimension {}, bank expects {dim}",
                bad.len()
            )));
        }
        let m = self.momentum;
        for (c, centroid) in centroids.iter().enumerate() {
            let Some(z) = centroid else { continue };
            for (p, zv) in self.prototypes[task].row_mut(c).iter_mut().zip(z) {
                *p = m * *p + (1.0 - m) * zv;
            }
            self.initialized[task][c] = true;
        }
        Ok(())
    }

    pub fn to_file(&self) -> BankFile {
        BankFile {
            version: BANK_VERSION,
            momentum: self.momentum,
            schema: self.schema.clone(),
            prototypes: (0..self.schema.num_tasks())
                .map(|t| (self.schema.task_name(t).to_string(), self.prototypes[t].to_rows()))
                .collect(),
            initialized: (0..self.schema.num_tasks())
                .map(|t| (self.schema.task_name(t).to_string(), self.initialized[t].clone()))
                .collect(),
        }
    }

    /// Rebuilds a bank, rejecting version, schema and shape mismatches.
    pub fn from_value(value: serde_json::Value, expected: &TaskSchema) -> Result<Self> {
        let found = value.get("version").and_then(serde_json::Value::as_u64);
        if found != Some(BANK_VERSION) {
            return Err(Error::Version {
                found: found.unwrap_or(0),
                expected: BANK_VERSION,
            });
        }
        let file: BankFile = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: None,
            msg: format!("prototype bank: {e}"),
        })?;
        if &file.schema != expected {
            return Err(Error::schema("prototype bank was saved against a different schema"));
        }
        check_momentum(file.momentum)?;
        let mut prototypes = Vec::new();
        let mut initialized = Vec::new();
        let mut dim = None;
        for t in 0..expected.num_tasks() {
            let name = expected.task_name(t);
            let rows = file.prototypes.get(name).ok_or_else(|| Error::Parse {
                line: None,
                msg: format!("prototype bank missing task '{name}'"),
            })?;
            let mask = file.initialized.get(name).ok_or_else(|| Error::Parse {
                line: None,
                msg: format!("prototype bank missing mask for task '{name}'"),
            })?;
            let p = Tensor::from_rows(rows).map_err(|e| Error::Parse {
                line: None,
                msg: format!("prototype bank task '{name}': {e}"),
            })?;
            if p.rows() != expected.num_classes(t) || mask.len() != p.rows() {
                return Err(Error::schema(format!(
                    "prototype bank task '{name}' has wrong class count"
                )));
            }
            if *dim.get_or_insert(p.cols()) != p.cols() {
                return Err(Error::Parse {
                    line: None,
                    msg: "prototype bank tasks disagree on dimension".into(),
                });
            }
            prototypes.push(p);
            initialized.push(mask.clone());
        }
        Ok(Self {
            schema: file.schema,
            momentum: file.momentum,
            prototypes,
            initialized,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_file()).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, schema: &TaskSchema) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_value(value, schema)
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::Config(format!("momentum must lie in [0, 1), got {m}")))
    }
}

/// Mean embedding of each class present in the batch.
pub fn batch_centroids(z: &Tensor, labels: &[Option<usize>], classes: usize) -> Vec<Option<Vec<f64>>> {
    let d = z.cols();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (i, label) in labels.iter().enumerate() {
        let Some(c) = *label else { continue };
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(z.row(i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn schema() -> TaskSchema {
        TaskSchema::from_pairs(&[("gender", &["f", "m"]), ("emotion", &["h", "s", "n"])]).unwrap()
    }

    fn bank(dim: usize) -> PrototypeBank {
        PrototypeBank::new(&schema(), dim, DEFAULT_MOMENTUM, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn init_is_bounded_and_uninitialized() {
        let b = bank(4);
        assert!(b.task(1).data().iter().all(|v| v.abs() <= 0.1));
        assert_eq!(b.task(1).shape(), (3, 4));
        assert!(b.initialized(0).iter().all(|&x| !x));
    }

    #[test]
    fn centroid_examples() {
        let z = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0], vec![5.0, 6.0]]).unwrap();
        let c = batch_centroids(&z, &[Some(0), Some(0), Some(1)], 3);
        assert_eq!(c[0], Some(vec![0.0, 0.0]));
        assert_eq!(c[1], Some(vec![5.0, 6.0]));
        assert_eq!(c[2], None);
    }

    #[test]
    fn ema_single_step_and_absent_classes() {
        let mut b = bank(3);
        b.prototypes[0].row_mut(0).fill(0.0);
        let before = b.prototype(0, 1).to_vec();
        b.ema_update(0, &[Some(vec![1.0; 3]), None]).unwrap();
        for v in b.prototype(0, 0) {
            assert!((v - 0.01).abs() < 1e-15);
        }
        assert_eq!(b.prototype(0, 1), before.as_slice());
        assert!(b.is_initialized(0, 0) && !b.is_initialized(0, 1));
        assert!(b.ema_update(0, &[Some(vec![1.0; 2]), None]).is_err());
        assert!(b.ema_update(0, &[None]).is_err());
    }

    #[test]
    fn round_trip_and_schema_check() {
        let mut b = bank(2);
        b.ema_update(1, &[None, Some(vec![0.3, -0.1]), None]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        b.save(&path).unwrap();
        assert_eq!(PrototypeBank::load(&path, &schema()).unwrap(), b);

        let other = TaskSchema::from_pairs(&[("gender", &["f", "m"])]).unwrap();
        assert!(matches!(PrototypeBank::load(&path, &other), Err(Error::Schema { .. })));
    }

    #[test]
    fn old_version_is_rejected() {
        let mut v = serde_json::to_value(bank(2).to_file()).unwrap();
        v["version"] = 0.into();
        assert!(matches!(
            PrototypeBank::from_value(v, &schema()),
            Err(Error::Version { found: 0, expected: 1 })
        ));
    }

    #[test]
    fn momentum_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PrototypeBank::new(&schema(), 2, 1.0, &mut rng).is_err());
        assert!(PrototypeBank::new(&schema(), 2, -0.1, &mut rng).is_err());
        assert!(PrototypeBank::new(&schema(), 2, 0.0, &mut rng).is_ok());
    }
}
