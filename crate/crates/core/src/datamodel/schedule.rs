use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::label::{ClassId, ClassSet, IGNORE_VALUE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub classes: Vec<String>,
}

/// Per-task class-name lists, as read from a JSON or TOML schedule file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub tasks: Vec<TaskConfig>,
}

impl ScheduleConfig {
    pub fn from_lists<S: AsRef<str>>(tasks: &[&[S]]) -> Self {
        Self {
            tasks: tasks
                .iter()
                .map(|t| TaskConfig {
                    name: None,
                    classes: t.iter().map(|c| c.as_ref().to_string()).collect(),
                })
                .collect(),
        }
    }

    /// Loads a schedule config; `.toml` files are parsed as TOML, anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("toml"))
            .unwrap_or(false);
        if is_toml {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }
}

/// Ordered, pairwise-disjoint class sets. Task `t` is 1-based; class
/// indices are assigned contiguously in declaration order, so the classes
/// seen up to task `t` are always `0..class_count_up_to(t)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    tasks: Vec<ClassSet>,
    class_names: Vec<String>,
}

pub fn build_task_schedule(config: &ScheduleConfig) -> Result<TaskSchedule> {
    if config.tasks.is_empty() {
        return Err(Error::Schedule("schedule declares no tasks".into()));
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut class_names = Vec::new();
    let mut tasks = Vec::new();
    for (ti, task) in config.tasks.iter().enumerate() {
        if task.classes.is_empty() {
            return Err(Error::Schedule(format!("task {} has no classes", ti + 1)));
        }
        let start = class_names.len();
        for name in &task.classes {
            if let Some(prev) = seen.insert(name.as_str(), ti + 1) {
                return Err(Error::Schedule(format!(
                    "class `{name}` declared in task {prev} and again in task {}",
                    ti + 1
                )));
            }
            class_names.push(name.clone());
        }
        if class_names.len() > IGNORE_VALUE as usize {
            return Err(Error::Schedule(format!(
                "at most {} classes fit in 8-bit labels",
                IGNORE_VALUE
            )));
        }
        tasks.push(ClassSet::range(start as ClassId, class_names.len() as ClassId));
    }
    Ok(TaskSchedule { tasks, class_names })
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_name(&self, c: ClassId) -> &str {
        &self.class_names[c as usize]
    }

    pub fn class_index(&self, name: &str) -> Option<ClassId> {
        self.class_names
            .iter()
            .position(|n| n == name)
            .map(|i| i as ClassId)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.tasks.len() {
            return Err(Error::Usage(format!(
                "task index {t} outside 1..={}",
                self.tasks.len()
            )));
        }
        Ok(())
    }

    /// C_t.
    pub fn task(&self, t: usize) -> Result<&ClassSet> {
        self.check_step(t)?;
        Ok(&self.tasks[t - 1])
    }

    /// C_{1:t-1}; empty for the base task.
    pub fn classes_before(&self, t: usize) -> Result<ClassSet> {
        self.check_step(t)?;
        Ok(ClassSet::range(0, self.tasks[t - 1].ids()[0]))
    }

    /// C_{1:t}.
    pub fn classes_up_to(&self, t: usize) -> Result<ClassSet> {
        Ok(ClassSet::range(0, self.class_count_up_to(t)? as ClassId))
    }

    pub fn class_count_up_to(&self, t: usize) -> Result<usize> {
        self.check_step(t)?;
        Ok(self.tasks[..t].iter().map(ClassSet::len).sum())
    }

    pub fn all_classes(&self) -> ClassSet {
        ClassSet::range(0, self.class_names.len() as ClassId)
    }
}
