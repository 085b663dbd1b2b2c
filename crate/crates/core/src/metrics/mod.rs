//! Instance matching, panoptic quality and count regression scores.
//!
//! Two instances match when `IoU > 0.5`, decided exactly as `2·|∩| > |∪|` on
//! pixel counts. Only instances of the same class are compared. A gt instance
//! can overlap at most one prediction by more than half, so matches are unique
//! without any assignment step.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{LabelError, PatchLabels};

pub use report::{evaluate, Aggregation, Counts, MetricsReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("IoU of two empty masks is undefined")]
    EmptyPair,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {0} has no instances in either map")]
    UndefinedClass(usize),
    #[error("no class has any instance in either set")]
    NoInstancesAnywhere,
    #[error("class {class}: ground-truth counts are constant, R² is undefined")]
    DegenerateTss { class: usize },
    #[error("R² needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("every class has degenerate ground-truth counts")]
    AllDegenerate,
    #[error("patch {patch}: {source}")]
    Label { patch: usize, source: LabelError },
}

/// IoU of two boolean masks over the same grid.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::ShapeMismatch(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        return Err(MetricsError::EmptyPair);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpPair {
    pub gt: u32,
    pub pred: u32,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

/// Matching outcome for one class of one patch. Ids are sorted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMatch {
    /// Sorted by gt id.
    pub tp: Vec<TpPair>,
    pub fp: Vec<u32>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Entry `t - 1` holds class `t`.
    pub classes: Vec<ClassMatch>,
}

impl MatchResult {
    pub fn class(&self, t: usize) -> &ClassMatch {
        &self.classes[t - 1]
    }
}

fn validated(labels: &PatchLabels, num_classes: usize, patch: usize) -> Result<BTreeMap<u32, u16>, MetricsError> {
    labels
        .validate(num_classes)
        .map_err(|source| MetricsError::Label { patch, source })
}

/// Matches one patch. Overlaps are tallied in a single pass over the pixels.
pub fn match_instances(gt: &PatchLabels, pred: &PatchLabels, num_classes: usize) -> Result<MatchResult, MetricsError> {
    match_patch(gt, pred, num_classes, 0)
}

pub(crate) fn match_patch(
    gt: &PatchLabels,
    pred: &PatchLabels,
    num_classes: usize,
    patch: usize,
) -> Result<MatchResult, MetricsError> {
    if gt.extents() != pred.extents() {
        return Err(MetricsError::ShapeMismatch(format!(
            "gt {:?} vs pred {:?}",
            gt.extents(),
            pred.extents()
        )));
    }
    let gt_classes = validated(gt, num_classes, patch)?;
    let pred_classes = validated(pred, num_classes, patch)?;
    let mut gt_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut overlap: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let pixels = gt
        .instances
        .ids
        .iter()
        .zip(&gt.classes.classes)
        .zip(pred.instances.ids.iter().zip(&pred.classes.classes));
    for ((&g, &gc), (&p, &pc)) in pixels {
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g != 0 && p != 0 && gc == pc {
            *overlap.entry((g, p)).or_default() += 1;
        }
    }

    let mut classes = vec![ClassMatch::default(); num_classes];
    let mut gt_matched = BTreeMap::new();
    let mut pred_matched = BTreeMap::new();
    for (&(g, p), &inter) in &overlap {
        let union = gt_area[&g] + pred_area[&p] - inter;
        if 2 * inter > union {
            gt_matched.insert(g, ());
            pred_matched.insert(p, ());
            classes[gt_classes[&g] as usize - 1].tp.push(TpPair {
                gt: g,
                pred: p,
                intersection: inter,
                union,
                iou: inter as f64 / union as f64,
            });
        }
    }
    for (&g, &c) in &gt_classes {
        if !gt_matched.contains_key(&g) {
            classes[c as usize - 1].fn_.push(g);
        }
    }
    for (&p, &c) in &pred_classes {
        if !pred_matched.contains_key(&p) {
            classes[c as usize - 1].fp.push(p);
        }
    }
    Ok(MatchResult { classes })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pq {
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
}

/// Sums in ascending order so the result does not depend on instance ids.
fn canonical_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Per-class totals, summable across patches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl ClassTally {
    pub fn from_match(m: &ClassMatch) -> Self {
        Self {
            tp: m.tp.len() as u64,
            fp: m.fp.len() as u64,
            fn_: m.fn_.len() as u64,
            iou_sum: canonical_sum(m.tp.iter().map(|p| p.iou).collect()),
        }
    }

    pub fn add(&mut self, other: &ClassTally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    /// True when the class has at least one instance on either side.
    pub fn is_defined(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    /// DQ, SQ and their product; SQ is 0 without true positives.
    pub fn pq(&self, class: usize) -> Result<Pq, MetricsError> {
        if !self.is_defined() {
            return Err(MetricsError::UndefinedClass(class));
        }
        let dq = self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        let sq = if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 };
        Ok(Pq { pq: dq * sq, dq, sq })
    }
}

pub fn pq_per_class(m: &MatchResult, t: usize) -> Result<Pq, MetricsError> {
    ClassTally::from_match(m.class(t)).pq(t)
}

/// Per-class tallies pooled over patches, summed in patch order.
pub fn pooled_tallies(results: &[MatchResult], num_classes: usize) -> Vec<ClassTally> {
    let mut totals = vec![ClassTally::default(); num_classes];
    for r in results {
        for (total, m) in totals.iter_mut().zip(&r.classes) {
            total.add(&ClassTally::from_match(m));
        }
    }
    totals
}

/// Mean PQ over classes with at least one instance on either side.
pub fn mpq_from_tallies(tallies: &[ClassTally]) -> Result<f64, MetricsError> {
    let pqs: Vec<f64> = tallies
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_defined())
        .map(|(i, t)| t.pq(i + 1).map(|p| p.pq))
        .collect::<Result<_, _>>()?;
    if pqs.is_empty() {
        return Err(MetricsError::NoInstancesAnywhere);
    }
    Ok(pqs.iter().sum::<f64>() / pqs.len() as f64)
}

/// Dataset mPQ: tallies are pooled over all patches before computing PQ.
pub fn mpq(results: &[MatchResult], num_classes: usize) -> Result<f64, MetricsError> {
    mpq_from_tallies(&pooled_tallies(results, num_classes))
}

/// `1 - RSS / TSS` of predicted against ground-truth counts.
pub fn r2_per_class(gt: &[f64], pred: &[f64], class: usize) -> Result<f64, MetricsError> {
    if gt.len() != pred.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} ground-truth counts vs {} predicted",
            gt.len(),
            pred.len()
        )));
    }
    if gt.len() < 2 {
        return Err(MetricsError::TooFewSamples(gt.len()));
    }
    let mean = gt.iter().sum::<f64>() / gt.len() as f64;
    let tss: f64 = gt.iter().map(|g| (g - mean).powi(2)).sum();
    if tss == 0.0 {
        return Err(MetricsError::DegenerateTss { class });
    }
    let rss: f64 = gt.iter().zip(pred).map(|(g, p)| (p - g).powi(2)).sum();
    Ok(1.0 - rss / tss)
}

/// Mean over the defined per-class values; `None` marks a degenerate class.
pub fn multi_r2(per_class: &[Option<f64>]) -> Result<f64, MetricsError> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::AllDegenerate);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}
