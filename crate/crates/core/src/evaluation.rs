//! Anomaly maps from reconstructions, and the image/pixel metric report.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{self, ProCurve};
use crate::model::{reconstruct, ModelConfig};
use crate::params::ParamStore;
use crate::synthetic::{Dataset, TokenBatch};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnomalyResult {
    /// Row-major `h × w` grid of `1 − CS`.
    pub map: Vec<f64>,
    pub image_score: f64,
}

impl AnomalyResult {
    pub fn from_map(map: Vec<f64>) -> Self {
        let image_score = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { map, image_score }
    }
}

/// Per-token cosine distance between reconstruction and target, one grid
/// per sample.
pub fn anomaly_map(recon: &Tensor, target: &Tensor, grid: (usize, usize)) -> Result<Vec<AnomalyResult>> {
    if recon.shape() != target.shape() || recon.rank() != 3 {
        return Err(Error::Dimension(format!(
            "anomaly_map: reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let (b, n, d) = (recon.shape()[0], recon.shape()[1], recon.shape()[2]);
    if n != grid.0 * grid.1 {
        return Err(Error::Dimension(format!(
            "anomaly_map: {n} tokens do not fill a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let mut out = Vec::with_capacity(b);
    for s in 0..b {
        let map = (0..n)
            .map(|t| {
                let o = (s * n + t) * d;
                let (x, y) = (&recon.data()[o..o + d], &target.data()[o..o + d]);
                1.0 - cosine(x, y)
            })
            .collect();
        out.push(AnomalyResult::from_map(map));
    }
    Ok(out)
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (mut dot, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    let floor = crate::autodiff::COSINE_NORM_FLOOR;
    if xx.sqrt() < floor || yy.sqrt() < floor {
        0.0
    } else {
        // One square root of the product keeps x·x / √(x·x·x·x) exactly 1.
        (dot / (xx * yy).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Gaussian blur of a row-major grid with edge renormalisation.
pub fn gaussian_smooth(map: &[f64], grid: (usize, usize), sigma: f64) -> Vec<f64> {
    let (h, w) = grid;
    let r = (4.0 * sigma).ceil() as isize;
    let mut out = vec![0.0; map.len()];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (mut acc, mut norm) = (0.0, 0.0);
            for di in -r..=r {
                for dj in -r..=r {
                    let (ii, jj) = (i + di, j + dj);
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        continue;
                    }
                    let k = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                    acc += k * map[ii as usize * w + jj as usize];
                    norm += k;
                }
            }
            out[i as usize * w + j as usize] = acc / norm;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curves {
    pub image_roc: Vec<(f64, f64)>,
    pub image_pr: Vec<(f64, f64)>,
    pub pixel_roc: Vec<(f64, f64)>,
    pub pixel_pr: Vec<(f64, f64)>,
    pub pro: ProCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub i_auroc: f64,
    pub i_ap: f64,
    pub i_f1max: f64,
    pub p_auroc: f64,
    pub p_ap: f64,
    pub p_f1max: f64,
    pub aupro: f64,
    pub curves: Curves,
}

pub const METRICS_CSV_HEADER: &str = "i_auc,i_ap,i_f1,p_auc,p_ap,p_f1,aupro";

impl MetricsReport {
    /// The seven scalars in table column order.
    pub fn values(&self) -> [f64; 7] {
        [
            self.i_auroc,
            self.i_ap,
            self.i_f1max,
            self.p_auroc,
            self.p_ap,
            self.p_f1max,
            self.aupro,
        ]
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub fpr_limit: f64,
    /// Gaussian smoothing of maps before scoring; off by default.
    pub smoothing_sigma: Option<f64>,
    /// Samples per inference pass.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            smoothing_sigma: None,
            chunk: 16,
        }
    }
}

/// Scores for every sample of a dataset, plus the labels they are judged by.
#[derive(Clone, Debug)]
pub struct ScoredSet {
    pub grid: (usize, usize),
    pub results: Vec<AnomalyResult>,
    pub masks: Vec<Vec<bool>>,
    pub labels: Vec<bool>,
    pub class_ids: Vec<usize>,
}

impl ScoredSet {
    fn subset(&self, keep: impl Fn(usize) -> bool) -> ScoredSet {
        let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| keep(i)).collect();
        ScoredSet {
            grid: self.grid,
            results: idx.iter().map(|&i| self.results[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_ids: idx.iter().map(|&i| self.class_ids[i]).collect(),
        }
    }

    /// Mean image score over normal and anomalous samples.
    pub fn mean_scores(&self) -> (f64, f64) {
        let mean = |want: bool| {
            let v: Vec<f64> = self
                .results
                .iter()
                .zip(&self.labels)
                .filter(|(_, l)| **l == want)
                .map(|(r, _)| r.image_score)
                .collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        (mean(false), mean(true))
    }

    /// Mean token score over normal and anomalous samples (all tokens).
    pub fn mean_token_scores(&self) -> (f64, f64) {
        let mean = |want: bool| {
            let (mut s, mut c) = (0.0, 0usize);
            for (r, l) in self.results.iter().zip(&self.labels) {
                if *l == want {
                    s += r.map.iter().sum::<f64>();
                    c += r.map.len();
                }
            }
            s / c.max(1) as f64
        };
        (mean(false), mean(true))
    }
}

fn collect_samples(data: &Dataset) -> Vec<&TokenBatch> {
    data.batches.iter().filter(|b| !b.is_empty()).collect()
}

/// Runs the model in inference mode over every sample of `data`.
pub fn score_dataset(params: &ParamStore, cfg: &ModelConfig, data: &Dataset, opts: &EvalOptions) -> Result<ScoredSet> {
    let mut out = ScoredSet {
        grid: (data.spec.grid_h, data.spec.grid_w),
        results: Vec::new(),
        masks: Vec::new(),
        labels: Vec::new(),
        class_ids: Vec::new(),
    };
    for b in collect_samples(data) {
        out.grid = b.grid;
        let n = b.len();
        let mut start = 0;
        while start < n {
            let end = (start + opts.chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let part = b.select(&idx);
            let (recon, target) = reconstruct(params, cfg, &part)?;
            let mut res = anomaly_map(&recon, &target, part.grid)?;
            if let Some(sigma) = opts.smoothing_sigma {
                for r in res.iter_mut() {
                    *r = AnomalyResult::from_map(gaussian_smooth(&r.map, part.grid, sigma));
                }
            }
            out.results.extend(res);
            start = end;
        }
        for i in 0..n {
            out.masks.push(b.sample_mask(i).to_vec());
        }
        out.labels.extend(&b.image_labels);
        out.class_ids.extend(&b.class_ids);
    }
    Ok(out)
}

/// Scores that equal the ground-truth masks; a self-test of the metric path.
pub fn oracle_scores(data: &Dataset) -> ScoredSet {
    let mut out = ScoredSet {
        grid: (data.spec.grid_h, data.spec.grid_w),
        results: Vec::new(),
        masks: Vec::new(),
        labels: Vec::new(),
        class_ids: Vec::new(),
    };
    for b in collect_samples(data) {
        out.grid = b.grid;
        for i in 0..b.len() {
            let m = b.sample_mask(i).to_vec();
            out.results.push(AnomalyResult::from_map(
                m.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
            ));
            out.masks.push(m);
        }
        out.labels.extend(&b.image_labels);
        out.class_ids.extend(&b.class_ids);
    }
    out
}

/// All seven metrics and their curves for a scored set.
pub fn metrics_report(set: &ScoredSet, fpr_limit: f64) -> Result<MetricsReport> {
    let img: Vec<f64> = set.results.iter().map(|r| r.image_score).collect();
    let pix: Vec<f64> = set.results.iter().flat_map(|r| r.map.iter().copied()).collect();
    let pix_l: Vec<bool> = set.masks.iter().flat_map(|m| m.iter().copied()).collect();
    let ctx = |what: &'static str| move |e: Error| e.context(what);
    let maps: Vec<Vec<f64>> = set.results.iter().map(|r| r.map.clone()).collect();
    let pro = metrics::aupro(&maps, &set.masks, set.grid, fpr_limit).map_err(ctx("pixel AUPRO"))?;
    Ok(MetricsReport {
        i_auroc: metrics::auroc(&img, &set.labels).map_err(ctx("image AUROC"))?,
        i_ap: metrics::average_precision(&img, &set.labels).map_err(ctx("image AP"))?,
        i_f1max: metrics::f1_max(&img, &set.labels).map_err(ctx("image F1-max"))?,
        p_auroc: metrics::auroc(&pix, &pix_l).map_err(ctx("pixel AUROC"))?,
        p_ap: metrics::average_precision(&pix, &pix_l).map_err(ctx("pixel AP"))?,
        p_f1max: metrics::f1_max(&pix, &pix_l).map_err(ctx("pixel F1-max"))?,
        aupro: pro.aupro,
        curves: Curves {
            image_roc: metrics::roc_curve(&img, &set.labels)?,
            image_pr: metrics::pr_curve(&img, &set.labels)?,
            pixel_roc: metrics::roc_curve(&pix, &pix_l)?,
            pixel_pr: metrics::pr_curve(&pix, &pix_l)?,
            pro,
        },
    })
}

/// Per-class reports; a class whose metrics are undefined gets `None`.
pub fn per_class_reports(set: &ScoredSet, n_classes: usize, fpr_limit: f64) -> Vec<Option<MetricsReport>> {
    (0..n_classes)
        .map(|c| metrics_report(&set.subset(|i| set.class_ids[i] == c), fpr_limit).ok())
        .collect()
}

pub fn per_class_csv(reports: &[Option<MetricsReport>]) -> String {
    let mut s = format!("class,{METRICS_CSV_HEADER}\n");
    for (c, r) in reports.iter().enumerate() {
        match r {
            Some(r) => s.push_str(&format!("{c},{}\n", r.csv_row())),
            None => s.push_str(&format!("{c},nan,nan,nan,nan,nan,nan,nan\n")),
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_class: Vec<Option<MetricsReport>>,
    pub scores: ScoredSet,
}

/// Scores a test set and computes every metric.
pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, data: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    if data.is_all_normal() {
        return Err(Error::MetricUndefined("test set has no anomalous samples".into()));
    }
    let scores = score_dataset(params, cfg, data, opts)?;
    finish(scores, data.spec.n_classes, opts)
}

pub fn evaluate_oracle(data: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    finish(oracle_scores(data), data.spec.n_classes, opts)
}

fn finish(scores: ScoredSet, n_classes: usize, opts: &EvalOptions) -> Result<Evaluation> {
    let report = metrics_report(&scores, opts.fpr_limit)?;
    let per_class = per_class_reports(&scores, n_classes, opts.fpr_limit);
    Ok(Evaluation {
        report,
        per_class,
        scores,
    })
}
