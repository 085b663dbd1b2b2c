use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{match_patch, mpq_from_tallies, multi_r2, pooled_tallies, r2_per_class, ClassTally, MatchResult, MetricsError};
use crate::dataset::{class_counts, LabelSet};

/// How per-patch matches are combined into PQ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// TP/FP/FN and IoU sums pooled over all patches, then PQ per class.
    #[default]
    Dataset,
    /// PQ computed per patch; per-class PQ and mPQ are means over the
    /// patches where they are defined.
    PerImage,
}

/// Instance counts; inner vectors are indexed by class `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub gt: Vec<Vec<u64>>,
    pub pred: Vec<Vec<u64>>,
    pub gt_total: Vec<u64>,
    pub pred_total: Vec<u64>,
}

/// Evaluation summary. Per-class vectors are indexed by class `t - 1`;
/// `null` marks a value that is undefined for the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub aggregation: Aggregation,
    pub patches: usize,
    pub pq: Vec<Option<f64>>,
    pub dq: Vec<Option<f64>>,
    pub sq: Vec<Option<f64>>,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
    pub mpq: Option<f64>,
    pub r2: Vec<Option<f64>>,
    /// True where ground-truth counts are constant across patches.
    pub r2_degenerate: Vec<bool>,
    pub multi_r2: Option<f64>,
    pub counts: Counts,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per class; undefined values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,pq,dq,sq,tp,fp,fn,r2,r2_degenerate,gt_total,pred_total\n");
        for i in 0..self.num_classes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                i + 1,
                fmt_opt(self.pq[i]),
                fmt_opt(self.dq[i]),
                fmt_opt(self.sq[i]),
                self.tp[i],
                self.fp[i],
                self.fn_[i],
                fmt_opt(self.r2[i]),
                self.r2_degenerate[i],
                self.counts.gt_total[i],
                self.counts.pred_total[i],
            ));
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Matches every patch pair (in parallel) and assembles the report.
pub fn evaluate(gt: &LabelSet, pred: &LabelSet, aggregation: Aggregation) -> Result<MetricsReport, MetricsError> {
    let c = gt.num_classes;
    if gt.len() != pred.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} gt patches vs {} predicted",
            gt.len(),
            pred.len()
        )));
    }
    if pred.num_classes != c {
        return Err(MetricsError::ShapeMismatch(format!(
            "gt has {c} classes, pred {}",
            pred.num_classes
        )));
    }
    let results: Vec<MatchResult> = gt
        .patches
        .par_iter()
        .zip(&pred.patches)
        .enumerate()
        .map(|(i, (g, p))| match_patch(g, p, c, i))
        .collect::<Result<_, _>>()?;

    let pooled = pooled_tallies(&results, c);
    let (pq, dq, sq, mpq) = match aggregation {
        Aggregation::Dataset => {
            let pqs: Vec<_> = pooled.iter().enumerate().map(|(i, t)| t.pq(i + 1).ok()).collect();
            (
                pqs.iter().map(|p| p.map(|p| p.pq)).collect(),
                pqs.iter().map(|p| p.map(|p| p.dq)).collect(),
                pqs.iter().map(|p| p.map(|p| p.sq)).collect(),
                mpq_from_tallies(&pooled).ok(),
            )
        }
        Aggregation::PerImage => {
            let per_patch: Vec<Vec<ClassTally>> = results.iter().map(|r| pooled_tallies(std::slice::from_ref(r), c)).collect();
            let class_mean = |t: usize, f: fn(&super::Pq) -> f64| {
                mean(per_patch.iter().filter_map(|tallies| tallies[t].pq(t + 1).ok()).map(|p| f(&p)))
            };
            (
                (0..c).map(|t| class_mean(t, |p| p.pq)).collect(),
                (0..c).map(|t| class_mean(t, |p| p.dq)).collect(),
                (0..c).map(|t| class_mean(t, |p| p.sq)).collect(),
                mean(per_patch.iter().filter_map(|tallies| mpq_from_tallies(tallies).ok())),
            )
        }
    };

    let gt_counts: Vec<Vec<u64>> = gt.patches.iter().map(|p| class_counts(p, c)).collect();
    let pred_counts: Vec<Vec<u64>> = pred.patches.iter().map(|p| class_counts(p, c)).collect();
    let column = |counts: &[Vec<u64>], t: usize| counts.iter().map(|row| row[t] as f64).collect::<Vec<_>>();
    let r2: Vec<Option<f64>> = (0..c)
        .map(|t| r2_per_class(&column(&gt_counts, t), &column(&pred_counts, t), t + 1).ok())
        .collect();
    let total = |counts: &[Vec<u64>]| (0..c).map(|t| counts.iter().map(|row| row[t]).sum()).collect();

    Ok(MetricsReport {
        num_classes: c,
        aggregation,
        patches: gt.len(),
        pq,
        dq,
        sq,
        tp: pooled.iter().map(|t| t.tp).collect(),
        fp: pooled.iter().map(|t| t.fp).collect(),
        fn_: pooled.iter().map(|t| t.fn_).collect(),
        mpq,
        r2_degenerate: r2.iter().map(Option::is_none).collect(),
        multi_r2: multi_r2(&r2).ok(),
        r2,
        counts: Counts {
            gt_total: total(&gt_counts),
            pred_total: total(&pred_counts),
            gt: gt_counts,
            pred: pred_counts,
        },
    })
}
