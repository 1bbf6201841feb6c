//! Masked cross-entropy, distillation from the previous-step model, and the
//! combined per-sample objective, each returning its value together with the
//! gradient with respect to the student's logits (pixel-major, same layout
//! as the [`ProbMap`]).
//!
//! Conventions:
//! - probabilities are floored at [`LOG_FLOOR`] inside `log`;
//! - a term whose pixel set is empty contributes exactly 0 with zero gradient;
//! - distillation runs on every pixel whose label is not in the current task's
//!   classes, ignore-valued pixels included, with teacher probabilities used
//!   as-is (temperature 1) against the student's joint softmax.

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassSet, LabelMap, TaskSchedule};
use crate::error::{Error, Result};
use crate::network::ProbMap;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// d(value)/d(logits), pixel-major.
    pub grad: Vec<f64>,
}

impl LossValue {
    fn zero(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }
}

/// Pixel set L_C: locations whose label belongs to a class set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    mask: Vec<bool>,
    count: usize,
}

impl PixelMask {
    pub fn labeled(labels: &LabelMap, classes: &ClassSet) -> Self {
        let mask: Vec<bool> = labels
            .values()
            .iter()
            .map(|&v| !labels.is_ignore(v) && classes.contains(v))
            .collect();
        let count = mask.iter().filter(|&&b| b).count();
        Self { mask, count }
    }

    pub fn complement(&self) -> Self {
        let mask: Vec<bool> = self.mask.iter().map(|b| !b).collect();
        Self {
            count: mask.len() - self.count,
            mask,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn contains(&self, p: usize) -> bool {
        self.mask[p]
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

fn check_dims(probs: &ProbMap, labels: &LabelMap) -> Result<()> {
    if probs.height() != labels.height() || probs.width() != labels.width() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, labels are {}x{}",
            probs.height(),
            probs.width(),
            labels.height(),
            labels.width()
        )));
    }
    Ok(())
}

fn check_covers(probs: &ProbMap, classes: &ClassSet, what: &str) -> Result<()> {
    if let Some(m) = classes.max() {
        if m as usize >= probs.channels() {
            return Err(Error::Domain(format!(
                "{what} class {m} is outside the {} predicted channels",
                probs.channels()
            )));
        }
    }
    Ok(())
}

/// `-(1/|L_C|) Σ_{l∈L_C} log p(l, y_l)`.
pub fn masked_cross_entropy(
    probs: &ProbMap,
    labels: &LabelMap,
    class_set: &ClassSet,
) -> Result<LossValue> {
    check_dims(probs, labels)?;
    check_covers(probs, class_set, "supervised")?;
    let c = probs.channels();
    let mask = PixelMask::labeled(labels, class_set);
    if mask.count() == 0 {
        return Ok(LossValue::zero(probs.data().len()));
    }
    let inv = 1.0 / mask.count() as f64;
    let mut out = LossValue::zero(probs.data().len());
    for (p, &y) in labels.values().iter().enumerate() {
        if !mask.contains(p) {
            continue;
        }
        let row = probs.pixel(p);
        out.value -= row[y as usize].max(LOG_FLOOR).ln();
        let g = &mut out.grad[p * c..(p + 1) * c];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = row[k] * inv;
        }
        g[y as usize] -= inv;
    }
    out.value *= inv;
    Ok(out)
}

/// Soft targets over a task's classes: `dist` holds, for every pixel, one
/// weight per class of `classes` (in ascending class order). Only pixels
/// whose gate label is in `classes` are supervised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelMap {
    pub classes: ClassSet,
    pub dist: Vec<f64>,
}

/// Cross-entropy against soft targets, renormalized over the task's classes.
pub fn soft_cross_entropy(
    probs: &ProbMap,
    gate: &LabelMap,
    soft: &SoftLabelMap,
) -> Result<LossValue> {
    check_dims(probs, gate)?;
    check_covers(probs, &soft.classes, "supervised")?;
    let k = soft.classes.len();
    if soft.dist.len() != gate.len() * k {
        return Err(Error::Shape("soft label buffer does not match the label map".into()));
    }
    let c = probs.channels();
    let mask = PixelMask::labeled(gate, &soft.classes);
    let mut out = LossValue::zero(probs.data().len());
    if mask.count() == 0 {
        return Ok(out);
    }
    let inv = 1.0 / mask.count() as f64;
    for p in 0..gate.len() {
        if !mask.contains(p) {
            continue;
        }
        let q = &soft.dist[p * k..(p + 1) * k];
        let z: f64 = q.iter().sum();
        if z <= 0.0 {
            return Err(Error::Domain(format!("soft target at pixel {p} has no mass")));
        }
        let row = probs.pixel(p);
        let g = &mut out.grad[p * c..(p + 1) * c];
        for (kk, gk) in g.iter_mut().enumerate() {
            *gk = row[kk] * inv;
        }
        for (&cls, &w) in soft.classes.ids().iter().zip(q) {
            let w = w / z;
            out.value -= w * row[cls as usize].max(LOG_FLOOR).ln();
            g[cls as usize] -= w * inv;
        }
    }
    out.value *= inv;
    Ok(out)
}

/// `-(1/|L − L_{C_t}|) Σ_{l∉L_{C_t}} Σ_{c∈old} t(l,c) log p(l,c)`.
pub fn distillation_loss(
    student: &ProbMap,
    teacher: &ProbMap,
    labels: &LabelMap,
    novel_class_set: &ClassSet,
    old_class_set: &ClassSet,
) -> Result<LossValue> {
    check_dims(student, labels)?;
    if teacher.height() != student.height() || teacher.width() != student.width() {
        return Err(Error::Shape(format!(
            "teacher is {}x{}, student is {}x{}",
            teacher.height(),
            teacher.width(),
            student.height(),
            student.width()
        )));
    }
    check_covers(teacher, old_class_set, "teacher")?;
    check_covers(student, &old_class_set.union(novel_class_set), "student")?;
    let c = student.channels();
    let mask = PixelMask::labeled(labels, novel_class_set).complement();
    let mut out = LossValue::zero(student.data().len());
    if mask.count() == 0 || old_class_set.is_empty() {
        return Ok(out);
    }
    let inv = 1.0 / mask.count() as f64;
    for p in 0..labels.len() {
        if !mask.contains(p) {
            continue;
        }
        let s = student.pixel(p);
        let t = teacher.pixel(p);
        let mut t_mass = 0.0;
        for &cls in old_class_set.ids() {
            let tc = t[cls as usize];
            out.value -= tc * s[cls as usize].max(LOG_FLOOR).ln();
            t_mass += tc;
        }
        let g = &mut out.grad[p * c..(p + 1) * c];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = s[k] * t_mass * inv;
        }
        for &cls in old_class_set.ids() {
            g[cls as usize] -= t[cls as usize] * inv;
        }
    }
    out.value *= inv;
    Ok(out)
}

/// Which cross-entropy term a training sample feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    FewShot,
    Pseudo,
}

/// Multipliers of the three objective terms; all default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub fewshot_ce: f64,
    pub pseudo_ce: f64,
    pub kd: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            fewshot_ce: 1.0,
            pseudo_ce: 1.0,
            kd: 1.0,
        }
    }
}

/// Supervision attached to a training sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Hard(LabelMap),
    /// Gate labels decide which pixels are supervised; weights come from `soft`.
    Soft { gate: LabelMap, soft: SoftLabelMap },
}

impl Target {
    pub fn labels(&self) -> &LabelMap {
        match self {
            Target::Hard(l) => l,
            Target::Soft { gate, .. } => gate,
        }
    }

    pub fn flip_horizontal(&self) -> Target {
        match self {
            Target::Hard(l) => Target::Hard(l.flip_horizontal()),
            Target::Soft { gate, soft } => {
                let k = soft.classes.len();
                let (h, w) = (gate.height(), gate.width());
                let mut dist = soft.dist.clone();
                for y in 0..h {
                    for x in 0..w {
                        let src = (y * w + x) * k;
                        let dst = (y * w + w - 1 - x) * k;
                        dist[dst..dst + k].copy_from_slice(&soft.dist[src..src + k]);
                    }
                }
                Target::Soft {
                    gate: gate.flip_horizontal(),
                    soft: SoftLabelMap {
                        classes: soft.classes.clone(),
                        dist,
                    },
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub total: f64,
    /// Unweighted cross-entropy term.
    pub ce: f64,
    /// Unweighted distillation term (0 when not applied).
    pub kd: f64,
    pub grad: Vec<f64>,
}

/// Per-sample objective at schedule position `t`. The cross-entropy term is
/// routed by `source`; distillation applies whenever a teacher is given.
pub fn total_objective(
    student: &ProbMap,
    teacher: Option<&ProbMap>,
    target: &Target,
    source: SampleSource,
    schedule: &TaskSchedule,
    t: usize,
    weights: &TermWeights,
) -> Result<Objective> {
    let current = schedule.task(t)?;
    if t == 1 && teacher.is_some() {
        return Err(Error::Usage(
            "the base task has no previous model to distill from".into(),
        ));
    }
    let ce = match target {
        Target::Hard(l) => masked_cross_entropy(student, l, current)?,
        Target::Soft { gate, soft } => {
            if &soft.classes != current {
                return Err(Error::Domain(
                    "soft targets do not cover the current task's classes".into(),
                ));
            }
            soft_cross_entropy(student, gate, soft)?
        }
    };
    let w_ce = match source {
        SampleSource::FewShot => weights.fewshot_ce,
        SampleSource::Pseudo => weights.pseudo_ce,
    };
    let mut grad: Vec<f64> = ce.grad.iter().map(|g| g * w_ce).collect();
    let mut total = w_ce * ce.value;
    let mut kd_value = 0.0;
    if let Some(teacher) = teacher {
        let old = schedule.classes_before(t)?;
        let kd = distillation_loss(student, teacher, target.labels(), current, &old)?;
        kd_value = kd.value;
        total += weights.kd * kd.value;
        for (a, b) in grad.iter_mut().zip(&kd.grad) {
            *a += weights.kd * b;
        }
    }
    Ok(Objective {
        total,
        ce: ce.value,
        kd: kd_value,
        grad,
    })
}
