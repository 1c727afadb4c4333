//! Segmentation metrics: confusion matrices, per-class IoU/ACC, dataset and
//! cross-dataset means, seen/unseen splits and resolution groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costvol::{predict, SegmentationMap};
use crate::encoders::TextEmbedding;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::spm::SpmMode;
use crate::train::Sample;

/// Images below this area (in pixels) form the low-resolution group.
pub const HIGH_RES_AREA: f64 = 800.0 * 800.0;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: n,
            counts: rows.concat(),
            ignored: 0,
        })
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "merging {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &SegmentationMap, gt: &SegmentationMap, ignore_index: u8) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let n = self.num_classes;
        for (&p, &g) in pred.0.iter().zip(gt.0.iter()) {
            if g == ignore_index {
                self.ignored += 1;
                continue;
            }
            if p as usize >= n {
                return Err(Error::InvalidArgument(format!("predicted class {p} but only {n} classes")));
            }
            if g as usize >= n {
                return Err(Error::InvalidArgument(format!("ground-truth class {g} but only {n} classes")));
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }
}

pub fn accumulate_confusion(
    pred: &SegmentationMap,
    gt: &SegmentationMap,
    num_classes: usize,
    ignore_index: u8,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore_index)?;
    Ok(cm)
}

/// `None` marks a class the metric is undefined for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub iou: Option<f64>,
    pub acc: Option<f64>,
}

/// IoU is defined when the class occurs in ground truth or prediction, ACC
/// (ground-truth recall) when it occurs in ground truth.
pub fn class_metrics(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let n = cm.num_classes;
    (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let gt: u64 = (0..n).map(|p| cm.get(c, p)).sum();
            let pred: u64 = (0..n).map(|g| cm.get(g, c)).sum();
            let union = gt + pred - tp;
            ClassScores {
                iou: (union > 0).then(|| tp as f64 / union as f64),
                acc: (gt > 0).then(|| tp as f64 / gt as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: String,
    pub iou: Option<f64>,
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub miou: Option<f64>,
    pub macc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    pub seen_classes: Vec<String>,
    pub unseen_classes: Vec<String>,
    pub overall: Means,
    pub seen: Means,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen: Option<Means>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub per_class: Vec<ClassMetric>,
    pub miou: f64,
    pub macc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSection>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn means_of<'a>(classes: impl Iterator<Item = &'a ClassMetric> + Clone) -> Means {
    Means {
        miou: mean(classes.clone().filter_map(|c| c.iou)),
        macc: mean(classes.filter_map(|c| c.acc)),
    }
}

pub fn dataset_report(dataset: &str, cm: &ConfusionMatrix, class_names: &[String]) -> Result<EvalReport> {
    if class_names.len() != cm.num_classes {
        return Err(Error::Shape(format!(
            "{} class names for a {}-class matrix",
            class_names.len(),
            cm.num_classes
        )));
    }
    let per_class: Vec<ClassMetric> = class_metrics(cm)
        .into_iter()
        .zip(class_names)
        .map(|(s, name)| ClassMetric {
            class: name.clone(),
            iou: s.iou,
            acc: s.acc,
        })
        .collect();
    let m = means_of(per_class.iter());
    match (m.miou, m.macc) {
        (Some(miou), Some(macc)) => Ok(EvalReport {
            dataset: dataset.to_string(),
            per_class,
            miou,
            macc,
            split: None,
        }),
        _ => Err(Error::EmptyReport(format!("{dataset}: no class present in ground truth or prediction"))),
    }
}

pub fn split_report(report: &EvalReport, seen: &[String], unseen: &[String]) -> Result<SplitSection> {
    let known: BTreeSet<&str> = report.per_class.iter().map(|c| c.class.as_str()).collect();
    let seen_set: BTreeSet<&str> = seen.iter().map(String::as_str).collect();
    let unseen_set: BTreeSet<&str> = unseen.iter().map(String::as_str).collect();
    if let Some(c) = seen_set.intersection(&unseen_set).next() {
        return Err(Error::InvalidArgument(format!("class {c:?} is both seen and unseen")));
    }
    if let Some(c) = seen_set.union(&unseen_set).find(|c| !known.contains(*c)) {
        return Err(Error::InvalidArgument(format!("class {c:?} is not in the report")));
    }
    if seen_set.is_empty() && unseen_set.is_empty() {
        return Err(Error::InvalidArgument("split names no classes".into()));
    }
    let both: BTreeSet<&str> = seen_set.union(&unseen_set).copied().collect();
    let means = |set: &BTreeSet<&str>| means_of(report.per_class.iter().filter(|c| set.contains(c.class.as_str())));
    Ok(SplitSection {
        seen_classes: seen.to_vec(),
        unseen_classes: unseen.to_vec(),
        overall: means(&both),
        seen: means(&seen_set),
        unseen: (!unseen_set.is_empty()).then(|| means(&unseen_set)),
    })
}

/// Parse `seen=a,b;unseen=c` (either part optional).
pub fn parse_split(spec: &str) -> Result<(Vec<String>, Vec<String>)> {
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, list) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("bad split part {part:?}")))?;
        let names: Vec<String> = list
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        match key.trim() {
            "seen" => seen = names,
            "unseen" => unseen = names,
            other => return Err(Error::InvalidArgument(format!("unknown split key {other:?}"))),
        }
    }
    Ok((seen, unseen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionGroup {
    Low,
    High,
}

pub fn resolution_group(width: f64, height: f64) -> Result<ResolutionGroup> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidArgument(format!("native resolution {width}x{height} must be positive")));
    }
    Ok(if width * height < HIGH_RES_AREA {
        ResolutionGroup::Low
    } else {
        ResolutionGroup::High
    })
}

/// Partition dataset ids by native `(width, height)`.
pub fn resolution_groups(datasets: &[(String, f64, f64)]) -> Result<BTreeMap<ResolutionGroup, Vec<String>>> {
    let mut groups: BTreeMap<ResolutionGroup, Vec<String>> = BTreeMap::new();
    for (id, w, h) in datasets {
        groups.entry(resolution_group(*w, *h)?).or_default().push(id.clone());
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub group: ResolutionGroup,
    pub datasets: Vec<String>,
    pub m_miou: f64,
    pub m_macc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetReport {
    pub datasets: Vec<EvalReport>,
    pub m_miou: f64,
    pub m_macc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution_groups: Option<Vec<GroupMeans>>,
}

/// Unweighted means over datasets. `resolutions` (one `(width, height)` per
/// report) adds per-group sub-means.
pub fn cross_dataset_report(reports: Vec<EvalReport>, resolutions: Option<&[(f64, f64)]>) -> Result<CrossDatasetReport> {
    if reports.is_empty() {
        return Err(Error::EmptyReport("no dataset reports".into()));
    }
    let m_miou = mean(reports.iter().map(|r| r.miou)).expect("non-empty");
    let m_macc = mean(reports.iter().map(|r| r.macc)).expect("non-empty");
    let resolution_groups = match resolutions {
        None => None,
        Some(res) => {
            if res.len() != reports.len() {
                return Err(Error::Shape(format!("{} resolutions for {} reports", res.len(), reports.len())));
            }
            let mut members: BTreeMap<ResolutionGroup, Vec<&EvalReport>> = BTreeMap::new();
            for (r, &(w, h)) in reports.iter().zip(res) {
                members.entry(resolution_group(w, h)?).or_default().push(r);
            }
            Some(
                members
                    .into_iter()
                    .map(|(group, rs)| GroupMeans {
                        group,
                        datasets: rs.iter().map(|r| r.dataset.clone()).collect(),
                        m_miou: mean(rs.iter().map(|r| r.miou)).expect("non-empty"),
                        m_macc: mean(rs.iter().map(|r| r.macc)).expect("non-empty"),
                    })
                    .collect(),
            )
        }
    };
    Ok(CrossDatasetReport {
        datasets: reports,
        m_miou,
        m_macc,
        resolution_groups,
    })
}

/// Eval-mode predictions for every sample, merged in sample order.
pub fn evaluate_model(model: &Model, text: &TextEmbedding, samples: &[Sample], ignore_index: u8) -> Result<ConfusionMatrix> {
    let n = text.num_classes();
    let parts: Vec<Result<ConfusionMatrix>> = samples
        .par_iter()
        .map(|s| {
            let logits = model.logits(&s.features, text, SpmMode::Eval, None)?;
            let pred = predict(&logits)?;
            accumulate_confusion(&pred, &s.mask, n, ignore_index)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(n);
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0))
}

pub fn render_report(report: &EvalReport) -> String {
    let width = report
        .per_class
        .iter()
        .map(|c| c.class.chars().count())
        .chain([5])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = writeln!(out, "dataset: {}", report.dataset);
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "class", "IoU", "ACC");
    for c in &report.per_class {
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", c.class, pct(c.iou), pct(c.acc));
    }
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "mean", pct(Some(report.miou)), pct(Some(report.macc)));
    if let Some(s) = &report.split {
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "overall", pct(s.overall.miou), pct(s.overall.macc));
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "seen", pct(s.seen.miou), pct(s.seen.macc));
        if let Some(u) = &s.unseen {
            let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "unseen", pct(u.miou), pct(u.macc));
        }
    }
    out
}

pub fn render_cross_report(report: &CrossDatasetReport) -> String {
    let width = report
        .datasets
        .iter()
        .map(|r| r.dataset.chars().count())
        .chain([8])
        .max()
        .unwrap_or(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "dataset", "mIoU", "mACC");
    for r in &report.datasets {
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", r.dataset, pct(Some(r.miou)), pct(Some(r.macc)));
    }
    for g in report.resolution_groups.iter().flatten() {
        let name = match g.group {
            ResolutionGroup::Low => "low-res",
            ResolutionGroup::High => "high-res",
        };
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", name, pct(Some(g.m_miou)), pct(Some(g.m_macc)));
    }
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "m-mean", pct(Some(report.m_miou)), pct(Some(report.m_macc)));
    out
}
