//! Confusion matrices, IoU / mIoU over task class sets, and repeated-run
//! statistics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::datamodel::{ClassId, ClassSet, LabelMap, Sample, TaskSchedule};
use crate::error::{Error, Result};
use crate::network::{ProbMap, SegmentationModel};

/// Counts `counts[g][p]` over a declared class set. Ground-truth pixels that
/// are ignore-valued or outside the set contribute nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: ClassSet,
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: ClassSet) -> Self {
        let c = classes.len();
        Self {
            classes,
            counts: vec![0; c * c],
            total: 0,
        }
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    /// Number of pixels counted so far.
    pub fn total(&self) -> u64 {
        self.total
    }

    fn index(&self, c: ClassId) -> Option<usize> {
        self.classes.ids().binary_search(&c).ok()
    }

    /// Entry for ground truth `g` predicted as `p`.
    pub fn count(&self, g: ClassId, p: ClassId) -> u64 {
        match (self.index(g), self.index(p)) {
            (Some(i), Some(j)) => self.counts[i * self.classes.len() + j],
            _ => 0,
        }
    }

    pub fn accumulate(&mut self, predicted: &LabelMap, gt: &LabelMap) -> Result<()> {
        gt.check_same_shape(predicted.height(), predicted.width())?;
        let c = self.classes.len();
        for (&p, &g) in predicted.values().iter().zip(gt.values()) {
            let Some(gi) = (!gt.is_ignore(g)).then(|| self.index(g)).flatten() else {
                continue;
            };
            let pi = self.index(p).ok_or_else(|| {
                Error::Metrics(format!("predicted class {p} is outside the evaluated set"))
            })?;
            self.counts[gi * c + pi] += 1;
            self.total += 1;
        }
        Ok(())
    }

    /// Entry-wise sum; both matrices must cover the same class set.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::Metrics(
                "cannot merge confusion matrices over different class sets".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    /// TP / (TP + FP + FN), or `None` when the class never occurs in either
    /// ground truth or prediction.
    pub fn iou(&self, class: ClassId) -> Option<f64> {
        let i = self.index(class)?;
        let c = self.classes.len();
        let tp = self.counts[i * c + i];
        let row: u64 = self.counts[i * c..(i + 1) * c].iter().sum();
        let col: u64 = (0..c).map(|g| self.counts[g * c + i]).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over `subset`, skipping zero-union classes.
    pub fn miou(&self, subset: &ClassSet) -> Result<f64> {
        self.miou_detail(subset)?
            .value
            .ok_or_else(|| Error::Metrics("every class in the subset has zero union".into()))
    }

    pub fn miou_detail(&self, subset: &ClassSet) -> Result<MiouDetail> {
        if subset.is_empty() {
            return Err(Error::Metrics("mIoU over an empty class set".into()));
        }
        if !subset.is_subset(&self.classes) {
            return Err(Error::Metrics(format!(
                "subset {subset:?} is not covered by the matrix classes {:?}",
                self.classes
            )));
        }
        let per_class: Vec<(ClassId, Option<f64>)> =
            subset.ids().iter().map(|&c| (c, self.iou(c))).collect();
        let scored: Vec<f64> = per_class.iter().filter_map(|(_, v)| *v).collect();
        let excluded = per_class
            .iter()
            .filter(|(_, v)| v.is_none())
            .map(|(c, _)| *c)
            .collect();
        let value = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        Ok(MiouDetail {
            value,
            per_class,
            excluded,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouDetail {
    pub value: Option<f64>,
    pub per_class: Vec<(ClassId, Option<f64>)>,
    /// Zero-union classes left out of the mean.
    pub excluded: Vec<ClassId>,
}

/// Argmax restricted to `classes`, per pixel.
pub fn predict_restricted(probs: &ProbMap, classes: &ClassSet) -> Result<LabelMap> {
    if let Some(m) = classes.max() {
        if m as usize >= probs.channels() {
            return Err(Error::Metrics(format!(
                "class {m} is beyond the model's {} outputs",
                probs.channels()
            )));
        }
    }
    let values = (0..probs.num_pixels())
        .map(|p| probs.argmax_among(p, classes.ids()))
        .collect();
    LabelMap::new(probs.height(), probs.width(), values)
}

/// Which classes a report column covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSelector {
    Task(usize),
    /// Union of tasks 1..=t.
    UnionUpTo(usize),
}

impl TaskSelector {
    pub fn classes(&self, schedule: &TaskSchedule) -> Result<ClassSet> {
        match *self {
            TaskSelector::Task(t) => schedule.task(t).cloned(),
            TaskSelector::UnionUpTo(t) => schedule.classes_up_to(t),
        }
    }

    /// Column label, e.g. `T1` or `T1∪2`.
    pub fn label(&self) -> String {
        match *self {
            TaskSelector::Task(t) => format!("T{t}"),
            TaskSelector::UnionUpTo(t) => {
                let parts: Vec<String> = (1..=t).map(|i| i.to_string()).collect();
                format!("T{}", parts.join("∪"))
            }
        }
    }

    /// Parses a comma list like `1,2,union`; `union` means tasks 1..=`step`.
    pub fn parse_list(text: &str, step: usize) -> Result<Vec<TaskSelector>> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                if s.eq_ignore_ascii_case("union") {
                    Ok(TaskSelector::UnionUpTo(step))
                } else {
                    s.parse::<usize>()
                        .ok()
                        .filter(|&t| t >= 1)
                        .map(TaskSelector::Task)
                        .ok_or_else(|| Error::Config(format!("bad task selector `{s}`")))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: ClassId,
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSetMetrics {
    pub label: String,
    pub selector: TaskSelector,
    pub miou: Option<f64>,
    pub per_class: Vec<ClassIou>,
    pub excluded_zero_union: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub images: usize,
    pub task_sets: Vec<TaskSetMetrics>,
}

impl MetricsReport {
    pub fn miou(&self, selector: &TaskSelector) -> Option<f64> {
        self.task_sets
            .iter()
            .find(|m| &m.selector == selector)
            .and_then(|m| m.miou)
    }
}

/// Evaluates `model` on `samples` for each selected task set. Each column
/// predicts by argmax over its own classes; ground truth outside those
/// classes is ignored.
pub fn evaluate_model(
    model: &SegmentationModel,
    samples: &[Sample],
    schedule: &TaskSchedule,
    selectors: &[TaskSelector],
) -> Result<MetricsReport> {
    let sets: Vec<ClassSet> = selectors
        .iter()
        .map(|s| s.classes(schedule))
        .collect::<Result<_>>()?;
    let shards: Vec<Vec<ConfusionMatrix>> = samples
        .par_iter()
        .map(|s| {
            let probs = model.forward(&s.image)?;
            sets.iter()
                .map(|set| {
                    let mut cm = ConfusionMatrix::new(set.clone());
                    cm.accumulate(&predict_restricted(&probs, set)?, &s.labels)?;
                    Ok(cm)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut totals: Vec<ConfusionMatrix> = sets.iter().cloned().map(ConfusionMatrix::new).collect();
    for shard in &shards {
        for (acc, cm) in totals.iter_mut().zip(shard) {
            acc.merge(cm)?;
        }
    }
    let task_sets = selectors
        .iter()
        .zip(&totals)
        .map(|(sel, cm)| {
            let d = cm.miou_detail(cm.classes())?;
            Ok(TaskSetMetrics {
                label: sel.label(),
                selector: sel.clone(),
                miou: d.value,
                per_class: d
                    .per_class
                    .iter()
                    .map(|&(c, iou)| ClassIou {
                        class: c,
                        name: schedule.class_name(c).to_string(),
                        iou,
                    })
                    .collect(),
                excluded_zero_union: d.excluded,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        step: model.step(),
        images: samples.len(),
        task_sets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    #[default]
    StudentT,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mean: f64,
    /// Absent for a single run.
    pub half_width: Option<f64>,
    pub n: usize,
}

impl RunStats {
    /// `47.4±0.66` style; just the mean when the interval is absent.
    pub fn render(&self) -> String {
        match self.half_width {
            Some(h) => format!("{:.1}±{:.2}", self.mean, h),
            None => format!("{:.1}", self.mean),
        }
    }
}

/// Mean and confidence-interval half-width, with the sample standard
/// deviation (n − 1 denominator).
pub fn aggregate_runs(values: &[f64], confidence: f64, method: CiMethod) -> Result<RunStats> {
    if values.is_empty() {
        return Err(Error::Metrics("no values to aggregate".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(RunStats {
            mean,
            half_width: None,
            n,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let q = 1.0 - (1.0 - confidence) / 2.0;
    let crit = match method {
        CiMethod::StudentT => StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::Metrics(e.to_string()))?
            .inverse_cdf(q),
        CiMethod::Normal => Normal::new(0.0, 1.0)
            .map_err(|e| Error::Metrics(e.to_string()))?
            .inverse_cdf(q),
    };
    Ok(RunStats {
        mean,
        half_width: Some(crit * var.sqrt() / (n as f64).sqrt()),
        n,
    })
}

/// Aligned plain-text table: one header row, then rows of cells.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let width = |s: &str| s.chars().count();
    let mut widths: Vec<usize> = header.iter().map(|h| width(h)).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(width(cell));
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c}{}", " ".repeat(widths[i] - width(c))))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header);
    line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for row in rows {
        line(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(values: &[ClassId]) -> LabelMap {
        LabelMap::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn hand_case_seven_twelfths() {
        let mut cm = ConfusionMatrix::new(ClassSet::new([0, 1]));
        cm.accumulate(&lm(&[0, 0, 1, 1]), &lm(&[0, 1, 1, 1])).unwrap();
        assert_eq!(cm.iou(0), Some(0.5));
        assert!((cm.iou(1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((cm.miou(cm.classes()).unwrap() - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(ClassSet::new([0, 1, 2]));
        cm.accumulate(&lm(&[0, 1, 2, 2]), &lm(&[0, 1, 2, 2])).unwrap();
        assert_eq!(cm.count(2, 2), 2);
        assert_eq!(cm.count(0, 1), 0);
        assert_eq!(cm.miou(cm.classes()).unwrap(), 1.0);
    }

    #[test]
    fn ignore_and_out_of_set_gt_do_nothing() {
        let mut cm = ConfusionMatrix::new(ClassSet::new([0, 1]));
        cm.accumulate(&lm(&[0, 1]), &LabelMap::ignored(1, 2)).unwrap();
        cm.accumulate(&lm(&[0, 1]), &lm(&[5, 5])).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm, ConfusionMatrix::new(ClassSet::new([0, 1])));
    }

    #[test]
    fn zero_union_excluded() {
        let mut cm = ConfusionMatrix::new(ClassSet::new([0, 1, 2]));
        cm.accumulate(&lm(&[0, 0]), &lm(&[0, 0])).unwrap();
        let d = cm.miou_detail(cm.classes()).unwrap();
        assert_eq!(d.value, Some(1.0));
        assert_eq!(d.excluded, vec![1, 2]);
        assert!(cm.miou(&ClassSet::new([1])).is_err());
    }

    #[test]
    fn errors() {
        let mut cm = ConfusionMatrix::new(ClassSet::new([0, 1]));
        assert!(cm.accumulate(&lm(&[0]), &lm(&[0, 1])).is_err());
        assert!(cm.accumulate(&lm(&[7]), &lm(&[0])).is_err());
        assert!(cm.miou(&ClassSet::new([])).is_err());
        assert!(cm.miou(&ClassSet::new([3])).is_err());
        let other = ConfusionMatrix::new(ClassSet::new([0]));
        assert!(cm.merge(&other).is_err());
    }

    #[test]
    fn singleton_miou_is_class_iou() {
        let mut cm = ConfusionMatrix::new(ClassSet::new([0, 1]));
        cm.accumulate(&lm(&[0, 0, 1, 1]), &lm(&[0, 1, 1, 1])).unwrap();
        assert_eq!(cm.miou(&ClassSet::new([1])).unwrap(), cm.iou(1).unwrap());
    }

    #[test]
    fn selector_labels_and_parsing() {
        assert_eq!(TaskSelector::Task(2).label(), "T2");
        assert_eq!(TaskSelector::UnionUpTo(2).label(), "T1∪2");
        assert_eq!(
            TaskSelector::parse_list("1,2,union", 2).unwrap(),
            vec![
                TaskSelector::Task(1),
                TaskSelector::Task(2),
                TaskSelector::UnionUpTo(2)
            ]
        );
        assert!(TaskSelector::parse_list("0", 2).is_err());
        assert!(TaskSelector::parse_list("x", 2).is_err());
    }

    #[test]
    fn aggregate_basics() {
        let s = aggregate_runs(&[3.0, 3.0, 3.0], 0.95, CiMethod::StudentT).unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.half_width, Some(0.0));
        let one = aggregate_runs(&[47.4], 0.95, CiMethod::StudentT).unwrap();
        assert_eq!(one.half_width, None);
        assert_eq!(one.render(), "47.4");
        assert!(aggregate_runs(&[], 0.95, CiMethod::StudentT).is_err());
    }

    #[test]
    fn t_quantile_reference_values() {
        // two-sided 95% critical values for 19 and 4 degrees of freedom
        for (df, want) in [(19.0, 2.093_024_054_408_263), (4.0, 2.776_445_105_197_793)] {
            let t = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.975);
            assert!((t - want).abs() < 1e-9, "df {df}: {t}");
        }
    }

    #[test]
    fn render_style() {
        let s = RunStats {
            mean: 47.4,
            half_width: Some(0.66),
            n: 20,
        };
        assert_eq!(s.render(), "47.4±0.66");
    }

    #[test]
    fn table_alignment() {
        let t = render_table(
            &["method".into(), "T1".into()],
            &[vec!["FT+KD".into(), "45.0±1.00".into()]],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("FT+KD   45.0"));
    }
}
