//! Pseudo-labels for retrieved neighbours, and the augmented training set.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{write_label_png, ClassId, ClassSet, FewShotSet, Image, LabelMap, UnlabeledPool};
use crate::error::{Error, Result};
use crate::losses::{SampleSource, SoftLabelMap, Target};
use crate::network::SegmentationModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    #[default]
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledItem {
    pub id: u32,
    pub stem: String,
    pub image: Image,
    pub labels: LabelMap,
    /// Present in soft mode: distributions over the novel classes.
    pub soft: Option<SoftLabelMap>,
}

/// U'_t: neighbourhood images with their pseudo-labels, ascending by id.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    pub items: Vec<PseudoLabeledItem>,
    pub tau: f64,
    pub step: usize,
    pub mode: PseudoLabelMode,
}

impl PseudoLabeledSet {
    pub fn empty(step: usize, tau: f64) -> Self {
        Self {
            items: Vec::new(),
            tau,
            step,
            mode: PseudoLabelMode::Hard,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Fraction of pixels carrying a pseudo-label.
    pub fn coverage(&self) -> f64 {
        let total: usize = self.items.iter().map(|i| i.labels.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let kept: usize = self.items.iter().map(|i| i.labels.count_non_ignore()).sum();
        kept as f64 / total as f64
    }
}

/// Per-pixel gate: the argmax class if it is novel and at least `tau`
/// confident, otherwise the ignore value. Ties go to the lowest class.
pub fn gate_pixel(probs: &[f64], novel: &ClassSet, tau: f64, ignore: ClassId) -> ClassId {
    let mut best = 0usize;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    if best < 256 && novel.contains(best as ClassId) && probs[best] >= tau {
        best as ClassId
    } else {
        ignore
    }
}

/// Runs `model` on the pool images listed in `ids` and keeps confident
/// novel-class predictions.
pub fn infer_pseudo_labels(
    model: &SegmentationModel,
    pool: &UnlabeledPool,
    ids: &[u32],
    novel_class_set: &ClassSet,
    tau: f64,
    mode: PseudoLabelMode,
    step: usize,
) -> Result<PseudoLabeledSet> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0, 1), got {tau}")));
    }
    if let Some(m) = novel_class_set.max() {
        if m as usize >= model.class_count() {
            return Err(Error::Usage(format!(
                "model emits {} classes but novel class {m} was requested",
                model.class_count()
            )));
        }
    }
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let items: Vec<PseudoLabeledItem> = ids
        .par_iter()
        .map(|&id| {
            let item = pool
                .get(id)
                .ok_or_else(|| Error::Usage(format!("id {id} is not in the unlabeled pool")))?;
            let probs = model.forward(&item.image)?;
            let (h, w) = (probs.height(), probs.width());
            let mut values = Vec::with_capacity(h * w);
            let mut dist = Vec::new();
            for p in 0..probs.num_pixels() {
                let row = probs.pixel(p);
                let label = gate_pixel(row, novel_class_set, tau, crate::datamodel::IGNORE_VALUE);
                values.push(label);
                if mode == PseudoLabelMode::Soft {
                    dist.extend(novel_class_set.ids().iter().map(|&c| row[c as usize]));
                }
            }
            Ok(PseudoLabeledItem {
                id,
                stem: item.stem.clone(),
                image: item.image.clone(),
                labels: LabelMap::new(h, w, values)?,
                soft: (mode == PseudoLabelMode::Soft).then(|| SoftLabelMap {
                    classes: novel_class_set.clone(),
                    dist,
                }),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PseudoLabeledSet {
        items,
        tau,
        step,
        mode,
    })
}

/// One element of the training collection D_t ∪ U'_t.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub key: String,
    pub image: Image,
    pub target: Target,
    pub source: SampleSource,
}

/// Few-shot items first, then pseudo-labeled items by ascending pool id.
pub fn assemble_augmented_set(
    fewshot: &FewShotSet,
    pseudo: &PseudoLabeledSet,
) -> Result<Vec<TrainingItem>> {
    if !pseudo.is_empty() && fewshot.task_index != pseudo.step {
        return Err(Error::Usage(format!(
            "few-shot set is for step {} but pseudo-labels are for step {}",
            fewshot.task_index, pseudo.step
        )));
    }
    let mut out: Vec<TrainingItem> = fewshot
        .items
        .iter()
        .map(|s| TrainingItem {
            key: s.id.clone(),
            image: s.image.clone(),
            target: Target::Hard(s.labels.clone()),
            source: SampleSource::FewShot,
        })
        .collect();
    let mut pseudo_items: Vec<&PseudoLabeledItem> = pseudo.items.iter().collect();
    pseudo_items.sort_by_key(|i| i.id);
    for pair in pseudo_items.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::Usage(format!(
                "pool id {} appears twice in the pseudo-labeled set",
                pair[0].id
            )));
        }
    }
    for item in pseudo_items {
        let target = match &item.soft {
            None => Target::Hard(item.labels.clone()),
            Some(soft) => Target::Soft {
                gate: item.labels.clone(),
                soft: soft.clone(),
            },
        };
        out.push(TrainingItem {
            key: format!("pool:{}", item.id),
            image: item.image.clone(),
            target,
            source: SampleSource::Pseudo,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub class: ClassId,
    /// Absent when no pixel was pseudo-labeled with this class.
    pub precision: Option<f64>,
    /// Absent when ground truth has no pixel of this class (or no GT given).
    pub recall: Option<f64>,
    pub predicted_pixels: usize,
    pub true_positive_pixels: usize,
    pub gt_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelQualityReport {
    pub coverage: f64,
    pub classes: Vec<ClassQuality>,
}

/// Coverage plus per-class precision/recall against optional ground truth
/// keyed by pool id.
pub fn pseudo_label_quality_report(
    set: &PseudoLabeledSet,
    novel_class_set: &ClassSet,
    ground_truth: Option<&BTreeMap<u32, LabelMap>>,
) -> Result<PseudoLabelQualityReport> {
    let mut predicted = vec![0usize; 256];
    let mut tp = vec![0usize; 256];
    let mut gt_count = vec![0usize; 256];
    for item in &set.items {
        let gt = match ground_truth {
            Some(map) => {
                let g = map.get(&item.id).ok_or_else(|| {
                    Error::Usage(format!("no ground truth for pool id {}", item.id))
                })?;
                g.check_same_shape(item.labels.height(), item.labels.width())?;
                Some(g)
            }
            None => None,
        };
        for (p, &v) in item.labels.values().iter().enumerate() {
            if !item.labels.is_ignore(v) {
                predicted[v as usize] += 1;
            }
            if let Some(g) = gt {
                let gv = g.values()[p];
                if !g.is_ignore(gv) {
                    gt_count[gv as usize] += 1;
                    if gv == v {
                        tp[v as usize] += 1;
                    }
                }
            }
        }
    }
    let classes = novel_class_set
        .ids()
        .iter()
        .map(|&c| {
            let i = c as usize;
            ClassQuality {
                class: c,
                precision: (ground_truth.is_some() && predicted[i] > 0)
                    .then(|| tp[i] as f64 / predicted[i] as f64),
                recall: (gt_count[i] > 0).then(|| tp[i] as f64 / gt_count[i] as f64),
                predicted_pixels: predicted[i],
                true_positive_pixels: tp[i],
                gt_pixels: gt_count[i],
            }
        })
        .collect();
    Ok(PseudoLabelQualityReport {
        coverage: set.coverage(),
        classes,
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    id: u32,
    stem: &'a str,
    tau: f64,
    step: usize,
    mode: PseudoLabelMode,
    source_model_hash: &'a str,
}

/// Writes `<dir>/<stem>.png` label images plus a `<stem>.json` sidecar each.
pub fn dump_pseudo_labels(set: &PseudoLabeledSet, dir: &Path, source_model_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for item in &set.items {
        write_label_png(&dir.join(format!("{}.png", item.stem)), &item.labels)?;
        let side = Sidecar {
            id: item.id,
            stem: &item.stem,
            tau: set.tau,
            step: set.step,
            mode: set.mode,
            source_model_hash,
        };
        let path = dir.join(format!("{}.json", item.stem));
        std::fs::write(&path, serde_json::to_string_pretty(&side)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
