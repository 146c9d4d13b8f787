//! Task/class vocabulary shared by every other module.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: Vec<String>,
}

/// Ordered task list; task and class positions are the label indices used
/// everywhere else.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct TaskSchema {
    tasks: Vec<TaskSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    tasks: Vec<TaskSpec>,
}

impl TryFrom<RawSchema> for TaskSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        TaskSchema::new(raw.tasks)
    }
}

impl From<TaskSchema> for RawSchema {
    fn from(s: TaskSchema) -> Self {
        RawSchema { tasks: s.tasks }
    }
}

impl TaskSchema {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::schema("schema needs at least one task"));
        }
        let mut names = HashSet::new();
        for task in &tasks {
            if task.name.is_empty() {
                return Err(Error::schema("empty task name"));
            }
            if !names.insert(task.name.as_str()) {
                return Err(Error::schema(format!("duplicate task '{}'", task.name)));
            }
            if task.classes.len() < 2 {
                return Err(Error::schema(format!(
                    "task '{}' needs at least 2 classes, has {}",
                    task.name,
                    task.classes.len()
                )));
            }
            let mut seen = HashSet::new();
            for class in &task.classes {
                if class.is_empty() || class.chars().any(char::is_whitespace) {
                    return Err(Error::schema(format!(
                        "class name '{class}' in task '{}' must be a single non-empty token",
                        task.name
                    )));
                }
                if !seen.insert(class.as_str()) {
                    return Err(Error::schema(format!(
                        "duplicate class '{class}' in task '{}'",
                        task.name
                    )));
                }
            }
        }
        Ok(Self { tasks })
    }

    /// Convenience constructor from `(task, [classes])` pairs.
    pub fn from_pairs(pairs: &[(&str, &[&str])]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(name, classes)| TaskSpec {
                    name: name.to_string(),
                    classes: classes.iter().map(|c| c.to_string()).collect(),
                })
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    /// Number of tasks.
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_classes(&self, task: usize) -> usize {
        self.tasks[task].classes.len()
    }

    pub fn task_name(&self, task: usize) -> &str {
        &self.tasks[task].name
    }

    pub fn class_name(&self, task: usize, class: usize) -> &str {
        &self.tasks[task].classes[class]
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn class_index(&self, task: usize, name: &str) -> Option<usize> {
        self.tasks[task].classes.iter().position(|c| c == name)
    }

    /// Validates a per-task label vector against this schema.
    pub fn check_labels(&self, labels: &[Option<usize>]) -> Result<()> {
        if labels.len() != self.num_tasks() {
            return Err(Error::schema(format!(
                "expected {} task labels, got {}",
                self.num_tasks(),
                labels.len()
            )));
        }
        for (t, label) in labels.iter().enumerate() {
            if let Some(c) = *label {
                if c >= self.num_classes(t) {
                    return Err(Error::schema(format!(
                        "label {c} out of range for task '{}' ({} classes)",
                        self.task_name(t),
                        self.num_classes(t)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Renders the caption template `a <class_1> ... <class_T> voice`,
    /// skipping tasks without a label.
    pub fn render_caption(&self, labels: &[Option<usize>]) -> String {
        let mut words = vec!["a"];
        for (t, label) in labels.iter().enumerate() {
            if let Some(c) = *label {
                words.push(self.class_name(t, c));
            }
        }
        words.push("voice");
        words.join(" ")
    }

    /// All fully-specified label combinations in lexicographic task order.
    pub fn all_combinations(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for t in 0..self.num_tasks() {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..self.num_classes(t)).map(move |c| {
                        let mut p = prefix.clone();
                        p.push(c);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> TaskSchema {
        TaskSchema::from_pairs(&[
            ("gender", &["female", "male"]),
            ("emotion", &["happy", "sad", "neutral"]),
        ])
        .unwrap()
    }

    #[test]
    fn json_shape() {
        let s = schema();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.starts_with(r#"{"tasks":[{"name":"gender","classes":["female","male"]}"#));
        let back: TaskSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_invalid_schemas() {
        assert!(TaskSchema::new(vec![]).is_err());
        assert!(TaskSchema::from_pairs(&[("a", &["x"])]).is_err());
        assert!(TaskSchema::from_pairs(&[("a", &["x", "x"])]).is_err());
        assert!(TaskSchema::from_pairs(&[("a", &["x", "y"]), ("a", &["p", "q"])]).is_err());
        assert!(TaskSchema::from_pairs(&[("a", &["x y", "z"])]).is_err());
        let err = serde_json::from_str::<TaskSchema>(r#"{"tasks":[{"name":"a","classes":["x"]}]}"#);
        assert!(err.is_err());
    }

    #[test]
    fn caption_template() {
        let s = schema();
        assert_eq!(s.render_caption(&[Some(0), Some(1)]), "a female sad voice");
        assert_eq!(s.render_caption(&[None, Some(2)]), "a neutral voice");
    }

    #[test]
    fn combinations_enumerate_product() {
        let combos = schema().all_combinations();
        assert_eq!(combos.len(), 6);
        assert_eq!(combos[0], vec![0, 0]);
        assert_eq!(combos[5], vec![1, 2]);
    }

    #[test]
    fn label_validation() {
        let s = schema();
        assert!(s.check_labels(&[Some(1), None]).is_ok());
        assert!(s.check_labels(&[Some(2), None]).is_err());
        assert!(s.check_labels(&[Some(0)]).is_err());
    }
}
