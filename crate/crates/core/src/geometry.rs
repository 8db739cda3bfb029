//! Axis-aligned 3D box algebra: vertices, IoU, optimal assignment and
//! mAP evaluation across IoU thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("box sizes must be strictly positive, got {0:?}")]
    NonPositiveSize([f64; 3]),
    #[error("cost matrix entries must be finite")]
    NonFiniteCost,
    #[error("mAP is undefined without any ground truth")]
    UndefinedMetric,
}

/// Axis-aligned box in (z, y, x) order, center + size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl BBox3D {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<BBox3D, GeometryError> {
        if size.iter().any(|s| *s <= 0.0) {
            return Err(GeometryError::NonPositiveSize(size));
        }
        Ok(BBox3D { center, size })
    }

    /// From (min, max) corner form; the two forms interconvert losslessly.
    pub fn from_corners(min: [f64; 3], max: [f64; 3]) -> Result<BBox3D, GeometryError> {
        let center = [
            (min[0] + max[0]) / 2.0,
            (min[1] + max[1]) / 2.0,
            (min[2] + max[2]) / 2.0,
        ];
        let size = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
        BBox3D::new(center, size)
    }

    pub fn corners(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.center[a] - self.size[a] / 2.0;
            hi[a] = self.center[a] + self.size[a] / 2.0;
        }
        (lo, hi)
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// The 8 vertices, enumerated with the sign bits of (z, y, x) as an
    /// ascending 3-bit counter: index 0 is the all-minus corner, index 7
    /// the all-plus corner.
    pub fn vertices(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, v) in out.iter_mut().enumerate() {
            for a in 0..3 {
                let bit = (i >> (2 - a)) & 1;
                let sign = if bit == 1 { 0.5 } else { -0.5 };
                v[a] = self.center[a] + sign * self.size[a];
            }
        }
        out
    }
}

/// Intersection over union of two axis-aligned boxes; 0 when disjoint.
pub fn iou3d(a: &BBox3D, b: &BBox3D) -> f64 {
    let (alo, ahi) = a.corners();
    let (blo, bhi) = b.corners();
    let mut inter = 1.0;
    for ax in 0..3 {
        let lo = alo[ax].max(blo[ax]);
        let hi = ahi[ax].min(bhi[ax]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    inter / union
}

/// One scored prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox3D,
    pub category: usize,
    pub score: f64,
}

/// Ground-truth box with category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox3D,
    pub category: usize,
}

/// Rectangular assignment costs: rows are predictions, columns ground truths.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<CostMatrix, GeometryError> {
        assert_eq!(data.len(), rows * cols);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteCost);
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Globally optimal min-cost assignment of `min(rows, cols)` pairs via the
/// Jonker-Volgenant shortest-path formulation. Returns `(row, col)` pairs
/// sorted by row; processing order breaks cost ties toward lower indices.
pub fn hungarian_match(cost: &CostMatrix) -> Vec<(usize, usize)> {
    if cost.rows() == 0 || cost.cols() == 0 {
        return Vec::new();
    }
    if cost.rows() <= cost.cols() {
        solve_rows_leq_cols(&|i, j| cost.at(i, j), cost.rows(), cost.cols())
    } else {
        let mut pairs: Vec<(usize, usize)> =
            solve_rows_leq_cols(&|i, j| cost.at(j, i), cost.cols(), cost.rows())
                .into_iter()
                .map(|(c, r)| (r, c))
                .collect();
        pairs.sort_unstable();
        pairs
    }
}

fn solve_rows_leq_cols(
    cost: &dyn Fn(usize, usize) -> f64,
    rows: usize,
    cols: usize,
) -> Vec<(usize, usize)> {
    // Column `cols` is the virtual root where each augmenting search starts.
    let mut row_of_col: Vec<Option<usize>> = vec![None; cols + 1];
    let mut pot_row = vec![0.0f64; rows];
    let mut pot_col = vec![0.0f64; cols + 1];

    for row in 0..rows {
        let mut j_cur = cols;
        row_of_col[cols] = Some(row);
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut prev = vec![cols; cols + 1];
        let mut in_tree = vec![false; cols + 1];

        loop {
            in_tree[j_cur] = true;
            let i_cur = row_of_col[j_cur].expect("tree column always assigned");
            let mut delta = f64::INFINITY;
            let mut j_next = cols;
            for j in 0..cols {
                if in_tree[j] {
                    continue;
                }
                let reduced = cost(i_cur, j) - pot_row[i_cur] - pot_col[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    prev[j] = j_cur;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j_next = j;
                }
            }
            debug_assert!(delta.is_finite());
            for j in 0..=cols {
                if in_tree[j] {
                    pot_row[row_of_col[j].expect("assigned")] += delta;
                    pot_col[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j_cur = j_next;
            if row_of_col[j_cur].is_none() {
                break;
            }
        }
        // Augment along the alternating path back to the root.
        while j_cur != cols {
            let j_prev = prev[j_cur];
            row_of_col[j_cur] = row_of_col[j_prev];
            j_cur = j_prev;
        }
    }

    let mut pairs: Vec<(usize, usize)> = (0..cols)
        .filter_map(|j| row_of_col[j].map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Evaluation output: mAP per threshold plus per-category APs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// Parallel to `thresholds`.
    pub map: Vec<f64>,
    /// `per_category_ap[t][c]`: None for categories without ground truth.
    pub per_category_ap: Vec<Vec<Option<f64>>>,
    pub num_categories: usize,
    pub num_detections: usize,
    pub num_ground_truths: usize,
}

impl MapReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (*t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }
}

pub const DEFAULT_IOU_THRESHOLDS: [f64; 4] = [0.10, 0.25, 0.50, 0.75];

/// Greedy-matching mAP over a set of volumes.
///
/// Per category: detections sorted by descending score (stable, so input
/// order breaks ties), each greedily matched to the highest-IoU unmatched
/// ground truth of the same category in the same volume when IoU >= t.
/// AP is the area under the precision envelope; mAP averages categories
/// with at least one ground truth.
pub fn map_at(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<GroundTruth>],
    num_categories: usize,
    thresholds: &[f64],
) -> Result<MapReport, GeometryError> {
    assert_eq!(detections.len(), ground_truths.len());
    let total_gt: usize = ground_truths.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return Err(GeometryError::UndefinedMetric);
    }

    let mut per_category_ap = Vec::with_capacity(thresholds.len());
    let mut maps = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut aps: Vec<Option<f64>> = Vec::with_capacity(num_categories);
        for cat in 0..num_categories {
            let n_gt: usize = ground_truths
                .iter()
                .map(|g| g.iter().filter(|b| b.category == cat).count())
                .sum();
            if n_gt == 0 {
                aps.push(None);
                continue;
            }
            aps.push(Some(average_precision(
                detections,
                ground_truths,
                cat,
                n_gt,
                t,
            )));
        }
        let present: Vec<f64> = aps.iter().flatten().copied().collect();
        maps.push(present.iter().sum::<f64>() / present.len() as f64);
        per_category_ap.push(aps);
    }

    Ok(MapReport {
        thresholds: thresholds.to_vec(),
        map: maps,
        per_category_ap,
        num_categories,
        num_detections: detections.iter().map(|d| d.len()).sum(),
        num_ground_truths: total_gt,
    })
}

fn average_precision(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<GroundTruth>],
    category: usize,
    n_gt: usize,
    threshold: f64,
) -> f64 {
    // (volume, index-in-volume) for every detection of this category.
    let mut dets: Vec<(usize, usize, f64)> = Vec::new();
    for (v, dv) in detections.iter().enumerate() {
        for (i, d) in dv.iter().enumerate() {
            if d.category == category {
                dets.push((v, i, d.score));
            }
        }
    }
    // Stable sort keeps input order for equal scores.
    dets.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite scores"));

    let mut matched: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();

    let mut tp = Vec::with_capacity(dets.len());
    for &(v, i, _) in &dets {
        let det = &detections[v][i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truths[v].iter().enumerate() {
            if gt.category != category || matched[v][gi] {
                continue;
            }
            let iou = iou3d(&det.bbox, &gt.bbox);
            if iou < threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[v][gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    // Precision envelope over the cumulative PR curve.
    let mut precisions = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    let mut n_tp = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            n_tp += 1;
        }
        precisions.push(n_tp as f64 / (k + 1) as f64);
        recalls.push(n_tp as f64 / n_gt as f64);
    }
    for k in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[k + 1] > precisions[k] {
            precisions[k] = precisions[k + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recalls.len() {
        if recalls[k] > prev_recall {
            ap += (recalls[k] - prev_recall) * precisions[k];
            prev_recall = recalls[k];
        }
    }
    ap
}

/// Per-threshold report keyed for JSON emission.
pub fn report_to_json(report: &MapReport) -> serde_json::Value {
    let mut by_threshold = BTreeMap::new();
    for (i, t) in report.thresholds.iter().enumerate() {
        by_threshold.insert(format!("{t:.2}"), report.map[i]);
    }
    serde_json::json!({
        "map": by_threshold,
        "per_category_ap": report.per_category_ap,
        "num_categories": report.num_categories,
        "num_detections": report.num_detections,
        "num_ground_truths": report.num_ground_truths,
    })
}
