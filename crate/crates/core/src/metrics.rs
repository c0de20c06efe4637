//! Ranking metrics. Equal scores are always treated as one group, so no
//! result depends on the order in which tied samples arrive.

use serde::Serialize;

use crate::error::{Error, Result};

/// Positions of `scores` in descending order, split into runs of equal score.
fn descending_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn check_inputs(scores: &[f64], labels: &[bool], what: &str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{what}: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("{what}: score {s}")));
    }
    let pos = labels.iter().filter(|l| **l).count();
    Ok((pos, labels.len() - pos))
}

/// `(threshold, tp, fp)` after admitting each score group, highest first.
fn cumulative_counts(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for g in descending_groups(scores) {
        for &i in &g {
            if labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        out.push((scores[g[0]], tp, fp));
    }
    out
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = check_inputs(scores, labels, "auroc")?;
    if p == 0 || n == 0 {
        return Err(Error::MetricUndefined(format!(
            "auroc needs both classes; got {p} positive and {n} negative"
        )));
    }
    // Walk groups from the lowest score up, counting negatives already seen.
    let mut below = 0usize;
    let mut acc = 0.0;
    for g in descending_groups(scores).iter().rev() {
        let gp = g.iter().filter(|&&i| labels[i]).count();
        let gn = g.len() - gp;
        acc += gp as f64 * (below as f64 + 0.5 * gn as f64);
        below += gn;
    }
    Ok(acc / (p as f64 * n as f64))
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = check_inputs(scores, labels, "roc_curve")?;
    if p == 0 || n == 0 {
        return Err(Error::MetricUndefined("roc_curve needs both classes".into()));
    }
    let mut pts = vec![(0.0, 0.0)];
    for (_, tp, fp) in cumulative_counts(scores, labels) {
        pts.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(pts)
}

/// `Σ (R_k − R_{k−1}) · P_k` over descending thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, _) = check_inputs(scores, labels, "average_precision")?;
    if p == 0 {
        return Err(Error::MetricUndefined("average_precision needs a positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in cumulative_counts(scores, labels) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / p as f64 * tp as f64 / (tp + fp) as f64;
        }
        prev_tp = tp;
    }
    Ok(ap)
}

/// PR points `(recall, precision)`, one per threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (p, _) = check_inputs(scores, labels, "pr_curve")?;
    if p == 0 {
        return Err(Error::MetricUndefined("pr_curve needs a positive".into()));
    }
    Ok(cumulative_counts(scores, labels)
        .into_iter()
        .map(|(_, tp, fp)| (tp as f64 / p as f64, tp as f64 / (tp + fp) as f64))
        .collect())
}

/// Best F1 over thresholds placed at the distinct scores.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, _) = check_inputs(scores, labels, "f1_max")?;
    if p == 0 {
        return Err(Error::MetricUndefined("f1_max needs a positive".into()));
    }
    Ok(cumulative_counts(scores, labels)
        .into_iter()
        .map(|(_, tp, fp)| 2.0 * tp as f64 / (tp + fp + p) as f64)
        .fold(0.0, f64::max))
}

/// Labels each `true` cell of a row-major `h × w` mask with its 8-connected
/// component id.
pub fn connected_regions(mask: &[bool], h: usize, w: usize) -> (Vec<Option<usize>>, usize) {
    let mut label = vec![None; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(count);
        stack.push(start);
        while let Some(c) = stack.pop() {
            let (r, col) = ((c / w) as isize, (c % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, col + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if mask[j] && label[j].is_none() {
                        label[j] = Some(count);
                        stack.push(j);
                    }
                }
            }
        }
        count += 1;
    }
    (label, count)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProCurve {
    /// `(fpr, pro)` from `(0, 0)`, in nondecreasing FPR.
    pub points: Vec<(f64, f64)>,
    pub fpr_limit: f64,
    pub aupro: f64,
}

/// Trapezoidal area under `points` over `[0, limit]`, interpolating linearly
/// at the limit, divided by `limit`.
pub fn normalized_partial_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for win in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

/// Area under the per-region-overlap curve up to `fpr_limit`, normalised.
///
/// `maps` and `masks` hold one row-major `h × w` grid per sample. Regions
/// are the 8-connected components of each mask; FPR is taken over all
/// tokens outside every mask.
pub fn aupro(maps: &[Vec<f64>], masks: &[Vec<bool>], grid: (usize, usize), fpr_limit: f64) -> Result<ProCurve> {
    let (h, w) = grid;
    if maps.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "aupro: {} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Parameter(format!("aupro: fpr_limit {fpr_limit} not in (0, 1]")));
    }
    let mut scores = Vec::new();
    // Region id per token, or None for normal tokens.
    let mut region = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        if m.len() != h * w || k.len() != h * w {
            return Err(Error::Dimension(format!("aupro: grid is {h}x{w} but a map has {} cells", m.len())));
        }
        let (lab, count) = connected_regions(k, h, w);
        let base = sizes.len();
        sizes.extend(std::iter::repeat(0).take(count));
        for (s, l) in m.iter().zip(lab) {
            scores.push(*s);
            region.push(l.map(|r| {
                sizes[base + r] += 1;
                base + r
            }));
        }
    }
    if sizes.is_empty() {
        return Err(Error::MetricUndefined("aupro: no anomalous regions".into()));
    }
    let normals = region.iter().filter(|r| r.is_none()).count();
    if normals == 0 {
        return Err(Error::MetricUndefined("aupro: no normal tokens".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("aupro: score {s}")));
    }
    let n_regions = sizes.len() as f64;
    let mut points = vec![(0.0, 0.0)];
    let mut fp = 0usize;
    let mut pro_sum = 0.0;
    for g in descending_groups(&scores) {
        for &i in &g {
            match region[i] {
                Some(r) => pro_sum += 1.0 / sizes[r] as f64,
                None => fp += 1,
            }
        }
        points.push((fp as f64 / normals as f64, pro_sum / n_regions));
    }
    let aupro = normalized_partial_area(&points, fpr_limit);
    Ok(ProCurve {
        points,
        fpr_limit,
        aupro,
    })
}
