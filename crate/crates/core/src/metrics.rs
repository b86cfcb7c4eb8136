//! Image/pixel AUROC, max-F1, per-region overlap, and multi-run reports.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape { what: "scores/labels", expected: vec![scores.len()], actual: vec![labels.len()] });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { what: "scores", index: vec![i] });
    }
    Ok(())
}

/// Indices sorted by descending score.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve from the Mann-Whitney statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("labels", "both classes must be present"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Best F1 over thresholds `score >= s` for every distinct score `s`.
pub fn max_f1(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::invalid("labels", "no positives"));
    }
    let idx = order_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (n_pos - tp)) as f64;
        best = best.max(f1);
    }
    Ok(best)
}

/// 8-connected components of a binary mask. Returns per-pixel labels
/// (`0` = background, components numbered from 1) and the component count.
pub fn connected_components(mask: ArrayView2<bool>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let here = y * w + x;
            let neighbours = [(0isize, -1isize), (-1, -1), (-1, 0), (-1, 1)];
            for (dy, dx) in neighbours {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if mask[[ny, nx]] {
                    let a = find(&mut parent, here);
                    let b = find(&mut parent, ny * w + nx);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut labels = Array2::zeros((h, w));
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                let root = find(&mut parent, y * w + x);
                let next = ids.len() + 1;
                labels[[y, x]] = *ids.entry(root).or_insert(next);
            }
        }
    }
    (labels, ids.len())
}

pub const DEFAULT_PRO_FPR_LIMIT: f64 = 0.3;

/// Trapezoidal area under `(fpr, y)` up to `limit`, with linear
/// interpolation at the limit, divided by `limit`.
pub fn normalized_partial_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for seg in points.windows(2) {
        let ((f0, p0), (f1, p1)) = (seg[0], seg[1]);
        if f0 >= limit {
            break;
        }
        if f1 > limit {
            let p_lim = p0 + (p1 - p0) * (limit - f0) / (f1 - f0);
            area += (limit - f0) * (p0 + p_lim) / 2.0;
            break;
        }
        area += (f1 - f0) * (p0 + p1) / 2.0;
    }
    area / limit
}

/// Per-region overlap integrated over FPR in `[0, fpr_limit]`, normalised.
///
/// The curve is exact: one point per distinct score, prediction is
/// `score >= threshold`, starting from `(0, 0)`.
pub fn pro(score_maps: &[Array2<f64>], gt_masks: &[Array2<bool>], fpr_limit: f64) -> Result<f64> {
    if score_maps.len() != gt_masks.len() {
        return Err(Error::Shape { what: "maps/masks", expected: vec![score_maps.len()], actual: vec![gt_masks.len()] });
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::invalid("fpr_limit", format!("must be in (0, 1], got {fpr_limit}")));
    }
    // (score, component id or 0 for normal pixels)
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    let mut comp_sizes: Vec<usize> = vec![0];
    for (map, gt) in score_maps.iter().zip(gt_masks) {
        if map.dim() != gt.dim() {
            return Err(Error::Shape { what: "score map", expected: gt.shape().to_vec(), actual: map.shape().to_vec() });
        }
        let (labels, n) = connected_components(gt.view());
        let offset = comp_sizes.len() - 1;
        comp_sizes.extend(std::iter::repeat_n(0, n));
        for (&s, &l) in map.iter().zip(labels.iter()) {
            if !s.is_finite() {
                return Err(Error::NonFinite { what: "score map", index: vec![] });
            }
            let id = if l == 0 { 0 } else { l + offset };
            comp_sizes[id] += (id != 0) as usize;
            pixels.push((s, id));
        }
    }
    let n_comp = comp_sizes.len() - 1;
    if n_comp == 0 {
        return Err(Error::invalid("gt_masks", "no anomalous pixels"));
    }
    let n_normal = pixels.iter().filter(|p| p.1 == 0).count();
    if n_normal == 0 {
        return Err(Error::invalid("gt_masks", "no normal pixels"));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut overlap_sum) = (0usize, 0.0f64);
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            let id = pixels[i].1;
            if id == 0 {
                fp += 1;
            } else {
                overlap_sum += 1.0 / comp_sizes[id] as f64;
            }
            i += 1;
        }
        points.push((fp as f64 / n_normal as f64, overlap_sum / n_comp as f64));
    }
    Ok(normalized_partial_area(&points, fpr_limit))
}

/// The five reported metrics for one category and run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub i_auc: f64,
    pub i_f1: f64,
    pub p_auc: f64,
    pub p_f1: f64,
    pub pro: f64,
}

pub const METRIC_NAMES: [&str; 5] = ["I-AUC", "I-F1", "P-AUC", "P-F1", "PRO"];

impl MetricSet {
    pub fn values(&self) -> [f64; 5] {
        [self.i_auc, self.i_f1, self.p_auc, self.p_f1, self.pro]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, f64)> {
        METRIC_NAMES.into_iter().zip(self.values())
    }
}

/// Detector output for one test image with its ground truth.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub score: f64,
    pub map: Array2<f64>,
    pub label: bool,
    pub gt: Array2<bool>,
}

/// All five metrics; pixel metrics pool every pixel of the category.
pub fn score_category(samples: &[ScoredSample], fpr_limit: f64) -> Result<MetricSet> {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let mut pix_scores = Vec::new();
    let mut pix_labels = Vec::new();
    for s in samples {
        if s.map.dim() != s.gt.dim() {
            return Err(Error::Shape { what: "pixel map", expected: s.gt.shape().to_vec(), actual: s.map.shape().to_vec() });
        }
        pix_scores.extend(s.map.iter().copied());
        pix_labels.extend(s.gt.iter().copied());
    }
    let maps: Vec<Array2<f64>> = samples.iter().map(|s| s.map.clone()).collect();
    let gts: Vec<Array2<bool>> = samples.iter().map(|s| s.gt.clone()).collect();
    Ok(MetricSet {
        i_auc: auroc(&scores, &labels)?,
        i_f1: max_f1(&scores, &labels)?,
        p_auc: auroc(&pix_scores, &pix_labels)?,
        p_f1: max_f1(&pix_scores, &pix_labels)?,
        pro: pro(&maps, &gts, fpr_limit)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub setup: String,
    pub seed: u64,
    pub categories: BTreeMap<String, MetricSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
}

impl Stat {
    /// Sample mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n_runs: n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setup: String,
    pub seeds: Vec<u64>,
    /// category -> metric -> statistic over runs
    pub categories: BTreeMap<String, BTreeMap<String, Stat>>,
    /// metric -> statistic of the per-run category averages
    pub average: BTreeMap<String, Stat>,
    pub runs: Vec<RunReport>,
}

pub fn aggregate_runs(reports: &[RunReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::invalid("reports", "need at least one run"))?;
    let cats: Vec<&String> = first.categories.keys().collect();
    if cats.is_empty() {
        return Err(Error::invalid("reports", "no categories"));
    }
    for r in reports {
        if r.categories.keys().collect::<Vec<_>>() != cats {
            return Err(Error::invalid("reports", format!("run with seed {} has a different category set", r.seed)));
        }
    }
    let mut categories = BTreeMap::new();
    for cat in &cats {
        let mut per_metric = BTreeMap::new();
        for (k, name) in METRIC_NAMES.iter().enumerate() {
            let vals: Vec<f64> = reports.iter().map(|r| r.categories[*cat].values()[k]).collect();
            per_metric.insert(name.to_string(), Stat::of(&vals));
        }
        categories.insert((*cat).clone(), per_metric);
    }
    let mut average = BTreeMap::new();
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let vals: Vec<f64> = reports
            .iter()
            .map(|r| r.categories.values().map(|m| m.values()[k]).sum::<f64>() / r.categories.len() as f64)
            .collect();
        average.insert(name.to_string(), Stat::of(&vals));
    }
    Ok(EvalReport {
        setup: first.setup.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        categories,
        average,
        runs: reports.to_vec(),
    })
}

/// `category,metric,mean,std,n_runs`, one row per category and metric.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("category,metric,mean,std,n_runs\n");
    for (cat, metrics) in &report.categories {
        for name in METRIC_NAMES {
            let s = &metrics[name];
            out.push_str(&format!("{cat},{name},{},{},{}\n", s.mean, s.std, s.n_runs));
        }
    }
    out
}
