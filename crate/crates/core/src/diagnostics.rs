//! Perturbation diagnostics: how the training-time noise moves the raw cost
//! volume inside versus outside the ground-truth regions.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::costvol::{SegmentationMap, IGNORE_INDEX};
use crate::encoders::{TextEmbedding, VisualFeatureMap};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::plot;
use crate::rng::Rng;
use crate::spm::NoiseSpec;
use crate::train::LogRecord;

pub const ALIGN_EPS: f64 = 1e-8;

pub const STAT_NAMES: [&str; 4] = ["gt_in_mean", "non_gt_mean", "gap", "align_ratio"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub gt_in_mean: f64,
    pub non_gt_mean: f64,
    pub gap: f64,
    pub align_ratio: f64,
    pub step: u64,
}

impl DeltaStats {
    fn from_means(gt_in_mean: f64, non_gt_mean: f64, align_ratio: f64, step: u64) -> Self {
        Self {
            gt_in_mean,
            non_gt_mean,
            gap: gt_in_mean - non_gt_mean,
            align_ratio,
            step,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "gt_in_mean" => Some(self.gt_in_mean),
            "non_gt_mean" => Some(self.non_gt_mean),
            "gap" => Some(self.gap),
            "align_ratio" => Some(self.align_ratio),
            _ => None,
        }
    }
}

/// Perturbed minus clean raw cost (`H' x W' x N`), averaged over `draws` noise draws.
pub fn delta_cost(
    model: &Model,
    visual: &VisualFeatureMap,
    text: &TextEmbedding,
    spec: &NoiseSpec,
    draws: usize,
    rng: &mut Rng,
) -> Result<Array3<f64>> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be >= 1".into()));
    }
    let clean = model.raw_cost(visual, text, None)?;
    let mut acc = Array3::zeros(clean.dim());
    for _ in 0..draws {
        let noise = model.draw_noise(spec, visual, rng)?;
        acc += &(model.raw_cost(visual, text, Some(&noise))? - &clean);
    }
    acc.mapv_inplace(|v| v / draws as f64);
    Ok(acc)
}

/// Majority label per `H/gh x W/gw` cell; ties (including ties with ignore) map to ignore.
pub fn downsample_majority(mask: &SegmentationMap, gh: usize, gw: usize) -> Result<SegmentationMap> {
    let (h, w) = mask.dim();
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::Shape(format!("cannot pool {h}x{w} mask onto a {gh}x{gw} grid")));
    }
    let (ch, cw) = (h / gh, w / gw);
    let mut out = Array2::from_elem((gh, gw), IGNORE_INDEX);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut counts = [0usize; 256];
            for y in gy * ch..(gy + 1) * ch {
                for x in gx * cw..(gx + 1) * cw {
                    counts[mask.0[[y, x]] as usize] += 1;
                }
            }
            let best = *counts.iter().max().expect("non-empty");
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
            let first = winners.next().expect("one winner").0;
            if winners.next().is_none() {
                out[[gy, gx]] = first as u8;
            }
        }
    }
    Ok(SegmentationMap(out))
}

/// Statistics of one image; `None` when the ground truth has no labelled cell.
pub fn delta_stats(delta: &Array3<f64>, gt: &SegmentationMap, eps: f64) -> Result<Option<DeltaStats>> {
    let (h, w, n) = delta.dim();
    if gt.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "delta grid {h}x{w} vs ground truth {:?}",
            gt.dim()
        )));
    }
    let mut counts = vec![0usize; n];
    let mut labelled = 0usize;
    for &g in gt.0.iter() {
        if g == IGNORE_INDEX {
            continue;
        }
        if g as usize >= n {
            return Err(Error::InvalidArgument(format!("ground-truth class {g} but only {n} classes")));
        }
        counts[g as usize] += 1;
        labelled += 1;
    }
    let present: Vec<usize> = (0..n).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return Ok(None);
    }
    let mut in_sum = 0.0;
    let mut out_sum = 0.0;
    for &c in &present {
        let (mut s_in, mut s_out) = (0.0, 0.0);
        for ((y, x), &g) in gt.0.indexed_iter() {
            if g == IGNORE_INDEX {
                continue;
            }
            if g as usize == c {
                s_in += delta[[y, x, c]];
            } else {
                s_out += delta[[y, x, c]];
            }
        }
        let n_out = labelled - counts[c];
        in_sum += s_in / counts[c] as f64;
        out_sum += if n_out > 0 { s_out / n_out as f64 } else { 0.0 };
    }
    let k = present.len() as f64;
    let gt_in = in_sum / k;
    let non_gt = out_sum / k;
    let ratio = (gt_in / (non_gt.abs() + eps)).max(0.0);
    Ok(Some(DeltaStats::from_means(gt_in, non_gt, ratio, 0)))
}

// Summation in sorted order so the result does not depend on image order.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.into_iter().sum::<f64>() / n
}

/// Average per-image statistics over the images where they are defined.
pub fn mean_stats(per_image: &[Option<DeltaStats>], step: u64) -> Option<DeltaStats> {
    let present: Vec<&DeltaStats> = per_image.iter().flatten().collect();
    if present.is_empty() {
        return None;
    }
    let gt_in = order_free_mean(present.iter().map(|s| s.gt_in_mean).collect());
    let non_gt = order_free_mean(present.iter().map(|s| s.non_gt_mean).collect());
    let ratio = order_free_mean(present.iter().map(|s| s.align_ratio).collect());
    Some(DeltaStats::from_means(gt_in, non_gt, ratio, step))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Curves of the four statistics against step: one SVG and one CSV per
/// statistic plus `delta_panel.svg`. Returns the files written.
pub fn emit_plots(log_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_log(log_path)?;
    if records.is_empty() {
        log::warn!("{}: empty log, no plots written", log_path.display());
        return Ok(Vec::new());
    }
    let series: Vec<(&str, Vec<(f64, f64)>)> = STAT_NAMES
        .iter()
        .map(|&name| {
            let pts = records
                .iter()
                .filter_map(|r| {
                    let v = match name {
                        "gt_in_mean" => r.gt_in_mean,
                        "non_gt_mean" => r.non_gt_mean,
                        "gap" => r.gap,
                        _ => r.align_ratio,
                    };
                    v.map(|v| (r.step as f64, v))
                })
                .collect();
            (name, pts)
        })
        .collect();
    if series.iter().all(|(_, p)| p.is_empty()) {
        log::warn!("{}: no diagnostic fields in any record, no plots written", log_path.display());
        return Ok(Vec::new());
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, pts) in &series {
        let svg = out_dir.join(format!("{name}.svg"));
        fs::write(&svg, plot::line_chart(name, "step", name, pts))?;
        let csv = out_dir.join(format!("{name}.csv"));
        let mut body = format!("step,{name}\n");
        for (x, y) in pts {
            body.push_str(&format!("{x},{y:?}\n"));
        }
        fs::write(&csv, body)?;
        written.push(svg);
        written.push(csv);
    }
    let panel = out_dir.join("delta_panel.svg");
    fs::write(&panel, plot::panel(&series, "step", 2))?;
    written.push(panel);
    Ok(written)
}
