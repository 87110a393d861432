//! The five lesion-segmentation evaluation metrics: Dice overlap, 95th
//! percentile symmetric Hausdorff distance over boundary pixels, absolute
//! volume difference as a percentage, and component-level lesion recall and
//! F1. Includes exact brute-force oracles used to verify the fast paths.

use serde_json::json;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("mask tensor must be binary")]
    NotBinary,
    #[error("case lists misaligned: {0} ground-truth vs {1} predictions")]
    Misaligned(usize, usize),
}

/// 2D binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), h * w);
        BinaryMask { h, w, bits }
    }

    /// From a {0, 1}-valued [H, W] tensor.
    pub fn from_mask_tensor(t: &Tensor) -> Result<Self, MetricsError> {
        let s = t.shape();
        let (h, w) = match s.len() {
            2 => (s[0], s[1]),
            3 if s[0] == 1 => (s[1], s[2]),
            _ => return Err(MetricsError::NotBinary),
        };
        let mut bits = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v == 0.0 {
                bits.push(false);
            } else if v == 1.0 {
                bits.push(true);
            } else {
                return Err(MetricsError::NotBinary);
            }
        }
        Ok(BinaryMask { h, w, bits })
    }

    /// Threshold probabilities at a strict 0.5: exactly 0.5 is background.
    pub fn from_probabilities(probs: &[f64], h: usize, w: usize) -> Self {
        BinaryMask { h, w, bits: probs.iter().map(|&p| p > 0.5).collect() }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j]
    }

    pub fn volume(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixels with at least one 4-neighbor outside the foreground
    /// (image borders count as outside).
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.h {
            for j in 0..self.w {
                if !self.get(i, j) {
                    continue;
                }
                let edge = i == 0
                    || j == 0
                    || i == self.h - 1
                    || j == self.w - 1
                    || !self.get(i - 1, j)
                    || !self.get(i + 1, j)
                    || !self.get(i, j - 1)
                    || !self.get(i, j + 1);
                if edge {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn check_shapes(y: &BinaryMask, yhat: &BinaryMask) -> Result<(), MetricsError> {
    if y.dims() != yhat.dims() {
        return Err(MetricsError::ShapeMismatch(y.dims(), yhat.dims()));
    }
    Ok(())
}

/// Dice similarity 2|Y n Yhat| / (|Y| + |Yhat|); both empty gives 1.
pub fn dsc(y: &BinaryMask, yhat: &BinaryMask) -> Result<f64, MetricsError> {
    check_shapes(y, yhat)?;
    let inter = y
        .bits
        .iter()
        .zip(&yhat.bits)
        .filter(|(a, b)| **a && **b)
        .count();
    let denom = y.volume() + yhat.volume();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / denom as f64)
}

/// Absolute volume difference as a percentage of the true volume; undefined
/// (None) for an empty ground truth.
pub fn avd(y: &BinaryMask, yhat: &BinaryMask) -> Result<Option<f64>, MetricsError> {
    check_shapes(y, yhat)?;
    let vy = y.volume();
    if vy == 0 {
        return Ok(None);
    }
    let diff = (yhat.volume() as f64 - vy as f64).abs();
    Ok(Some(100.0 * diff / vy as f64))
}

const EDT_BIG: f64 = 1e12;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sect = |q: usize, p: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64
    };
    for q in 1..n {
        let mut s = sect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = sect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = dq * dq + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest source point, per grid
/// cell.
fn edt_squared(sources: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![EDT_BIG; h * w];
    for &(i, j) in sources {
        grid[i * w + j] = 0.0;
    }
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    // columns
    for j in 0..w {
        for i in 0..h {
            f[i] = grid[i * w + j];
        }
        dt1d(&f[..h], &mut d[..h], &mut v[..h], &mut z[..h + 1]);
        for i in 0..h {
            grid[i * w + j] = d[i];
        }
    }
    // rows
    for i in 0..h {
        f[..w].copy_from_slice(&grid[i * w..(i + 1) * w]);
        dt1d(&f[..w], &mut d[..w], &mut v[..w], &mut z[..w + 1]);
        grid[i * w..(i + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

/// Nearest-rank 95th percentile: the ceil(0.95 n)-th smallest value.
fn percentile95(mut distances: Vec<f64>) -> f64 {
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = distances.len();
    let rank = ((0.95 * n as f64).ceil() as usize).max(1);
    distances[rank - 1]
}

/// 95th percentile symmetric Hausdorff distance between mask boundaries,
/// Euclidean, in pixel units. Undefined (None) when either mask is empty.
pub fn h95(y: &BinaryMask, yhat: &BinaryMask) -> Result<Option<f64>, MetricsError> {
    check_shapes(y, yhat)?;
    if y.is_empty() || yhat.is_empty() {
        return Ok(None);
    }
    let by = y.boundary();
    let byh = yhat.boundary();
    let (h, w) = y.dims();
    let to_yhat = edt_squared(&byh, h, w);
    let to_y = edt_squared(&by, h, w);
    let d1: Vec<f64> = by.iter().map(|&(i, j)| to_yhat[i * w + j].sqrt()).collect();
    let d2: Vec<f64> = byh.iter().map(|&(i, j)| to_y[i * w + j].sqrt()).collect();
    Ok(Some(percentile95(d1).max(percentile95(d2))))
}

/// All-pairs oracle for h95: identical definition, O(n^2) point-to-point
/// distances instead of the distance transform.
pub fn h95_all_pairs(y: &BinaryMask, yhat: &BinaryMask) -> Result<Option<f64>, MetricsError> {
    check_shapes(y, yhat)?;
    if y.is_empty() || yhat.is_empty() {
        return Ok(None);
    }
    let by = y.boundary();
    let byh = yhat.boundary();
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let dists: Vec<f64> = from
            .iter()
            .map(|&(i, j)| {
                to.iter()
                    .map(|&(p, q)| {
                        let di = i as f64 - p as f64;
                        let dj = j as f64 - q as f64;
                        di * di + dj * dj
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        percentile95(dists)
    };
    Ok(Some(directed(&by, &byh).max(directed(&byh, &by))))
}

/// Full (100th percentile) symmetric Hausdorff distance over boundaries.
pub fn hausdorff_max(y: &BinaryMask, yhat: &BinaryMask) -> Result<Option<f64>, MetricsError> {
    check_shapes(y, yhat)?;
    if y.is_empty() || yhat.is_empty() {
        return Ok(None);
    }
    let by = y.boundary();
    let byh = yhat.boundary();
    let (h, w) = y.dims();
    let to_yhat = edt_squared(&byh, h, w);
    let to_y = edt_squared(&by, h, w);
    let m1 = by
        .iter()
        .map(|&(i, j)| to_yhat[i * w + j])
        .fold(0.0f64, f64::max);
    let m2 = byh
        .iter()
        .map(|&(i, j)| to_y[i * w + j])
        .fold(0.0f64, f64::max);
    Ok(Some(m1.max(m2).sqrt()))
}

/// Connected-component labeling, 8-connectivity, deterministic labels in
/// scan order (label 0 is background).
pub struct ComponentLabels {
    pub labels: Vec<u32>,
    pub count: usize,
}

pub fn connected_components(m: &BinaryMask) -> ComponentLabels {
    let (h, w) = m.dims();
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut queue: Vec<(usize, usize)> = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if !m.get(si, sj) || labels[si * w + sj] != 0 {
                continue;
            }
            count += 1;
            labels[si * w + sj] = count;
            queue.clear();
            queue.push((si, sj));
            while let Some((i, j)) = queue.pop() {
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let ni = i as i64 + di;
                        let nj = j as i64 + dj;
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if m.get(ni, nj) && labels[ni * w + nj] == 0 {
                            labels[ni * w + nj] = count;
                            queue.push((ni, nj));
                        }
                    }
                }
            }
        }
    }
    ComponentLabels { labels, count: count as usize }
}

/// Recursive flood-fill oracle for the component count.
pub fn component_count_recursive(m: &BinaryMask) -> usize {
    fn fill(m: &BinaryMask, seen: &mut [bool], i: usize, j: usize) {
        let (h, w) = m.dims();
        seen[i * w + j] = true;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let ni = i as i64 + di;
                let nj = j as i64 + dj;
                if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                if m.get(ni, nj) && !seen[ni * w + nj] {
                    fill(m, seen, ni, nj);
                }
            }
        }
    }
    let (h, w) = m.dims();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for i in 0..h {
        for j in 0..w {
            if m.get(i, j) && !seen[i * w + j] {
                count += 1;
                fill(m, &mut seen, i, j);
            }
        }
    }
    count
}

/// Component-level detection counts. `fn_` is the number of undetected
/// ground-truth components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LesionMatch {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// A ground-truth component counts as detected when it overlaps at least one
/// predicted pixel; a predicted component with no ground-truth overlap is a
/// false positive. With neither lesions nor predictions, recall and F1 are 1.
pub fn lesion_recall_f1(
    y: &BinaryMask,
    yhat: &BinaryMask,
) -> Result<(f64, f64, LesionMatch), MetricsError> {
    check_shapes(y, yhat)?;
    let cy = connected_components(y);
    let cyh = connected_components(yhat);
    let (h, w) = y.dims();

    let mut gt_detected = vec![false; cy.count + 1];
    let mut pred_touches_gt = vec![false; cyh.count + 1];
    for idx in 0..h * w {
        let gl = cy.labels[idx];
        let pl = cyh.labels[idx];
        if gl != 0 && pl != 0 {
            gt_detected[gl as usize] = true;
            pred_touches_gt[pl as usize] = true;
        } else if gl != 0 && yhat.bits[idx] {
            gt_detected[gl as usize] = true;
        } else if pl != 0 && y.bits[idx] {
            pred_touches_gt[pl as usize] = true;
        }
    }
    let tp = gt_detected.iter().filter(|&&d| d).count();
    let fn_ = cy.count - tp;
    let fp = pred_touches_gt[1..].iter().filter(|&&d| !d).count();

    let recall = if cy.count == 0 { 1.0 } else { tp as f64 / cy.count as f64 };
    let f1 = if tp + fp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64)
    };
    Ok((recall, f1, LesionMatch { tp, fp, fn_ }))
}

// ── per-case evaluation and reporting ───────────────────────────────

pub const METRIC_NAMES: [&str; 5] = ["DSC", "H95", "AVD", "Recall", "F1"];

#[derive(Clone, Debug)]
pub struct CaseMetrics {
    pub case_id: usize,
    pub dsc: f64,
    pub h95: Option<f64>,
    pub avd: Option<f64>,
    pub recall: f64,
    pub f1: f64,
}

impl CaseMetrics {
    pub fn get(&self, metric: usize) -> Option<f64> {
        match metric {
            0 => Some(self.dsc),
            1 => self.h95,
            2 => self.avd,
            3 => Some(self.recall),
            4 => Some(self.f1),
            _ => None,
        }
    }
}

/// Per-case metrics plus macro averages. Undefined cases (empty masks for
/// H95/AVD) are excluded from the averages and counted instead of silently
/// folded in.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub per_case: Vec<CaseMetrics>,
    pub avg: [Option<f64>; 5],
    pub n_undefined: [usize; 5],
    /// avg(self) - avg(baseline), per metric; negative is an improvement for
    /// the lower-is-better metrics (H95, AVD).
    pub gain: Option<[Option<f64>; 5]>,
}

pub fn evaluate_case(
    case_id: usize,
    y: &BinaryMask,
    yhat: &BinaryMask,
) -> Result<CaseMetrics, MetricsError> {
    let (recall, f1, _) = lesion_recall_f1(y, yhat)?;
    Ok(CaseMetrics {
        case_id,
        dsc: dsc(y, yhat)?,
        h95: h95(y, yhat)?,
        avd: avd(y, yhat)?,
        recall,
        f1,
    })
}

/// Evaluate aligned ground-truth / prediction case lists.
pub fn evaluate_all(
    case_ids: &[usize],
    y_set: &[BinaryMask],
    yhat_set: &[BinaryMask],
) -> Result<MetricsReport, MetricsError> {
    if y_set.len() != yhat_set.len() || case_ids.len() != y_set.len() {
        return Err(MetricsError::Misaligned(y_set.len(), yhat_set.len()));
    }
    let mut per_case = Vec::with_capacity(y_set.len());
    for ((id, y), yhat) in case_ids.iter().zip(y_set).zip(yhat_set) {
        per_case.push(evaluate_case(*id, y, yhat)?);
    }
    let mut avg = [None; 5];
    let mut n_undefined = [0usize; 5];
    for m in 0..5 {
        let defined: Vec<f64> = per_case.iter().filter_map(|c| c.get(m)).collect();
        n_undefined[m] = per_case.len() - defined.len();
        if !defined.is_empty() {
            avg[m] = Some(defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    Ok(MetricsReport { per_case, avg, n_undefined, gain: None })
}

impl MetricsReport {
    /// Fill gain fields as avg(self) - avg(baseline), metric by metric.
    pub fn with_gain_against(mut self, baseline: &MetricsReport) -> MetricsReport {
        let mut gain = [None; 5];
        for m in 0..5 {
            if let (Some(a), Some(b)) = (self.avg[m], baseline.avg[m]) {
                gain[m] = Some(a - b);
            }
        }
        self.gain = Some(gain);
        self
    }

    /// Per-case CSV with `NA` for undefined entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,dsc,h95,avd,recall,f1\n");
        let cell = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        for c in &self.per_case {
            out.push_str(&format!(
                "{},{:.6},{},{},{:.6},{:.6}\n",
                c.case_id,
                c.dsc,
                cell(c.h95),
                cell(c.avd),
                c.recall,
                c.f1
            ));
        }
        out
    }

    /// Fill gain fields from a baseline's aggregate JSON (as produced by
    /// `to_json`).
    pub fn with_gain_against_json(mut self, baseline: &serde_json::Value) -> MetricsReport {
        let mut gain = [None; 5];
        for (m, name) in METRIC_NAMES.iter().enumerate() {
            if let (Some(a), Some(b)) = (self.avg[m], baseline["metrics"][name]["avg"].as_f64()) {
                gain[m] = Some(a - b);
            }
        }
        self.gain = Some(gain);
        self
    }

    /// Aggregate JSON: averages, gains and undefined counts per metric.
    pub fn to_json(&self) -> serde_json::Value {
        let mut metrics = serde_json::Map::new();
        for (m, name) in METRIC_NAMES.iter().enumerate() {
            metrics.insert(
                name.to_string(),
                json!({
                    "avg": self.avg[m],
                    "gain": self.gain.and_then(|g| g[m]),
                    "n_undefined": self.n_undefined[m],
                }),
            );
        }
        json!({ "n_cases": self.per_case.len(), "metrics": metrics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn mask(h: usize, w: usize, ones: &[(usize, usize)]) -> BinaryMask {
        let mut bits = vec![false; h * w];
        for &(i, j) in ones {
            bits[i * w + j] = true;
        }
        BinaryMask::new(h, w, bits)
    }

    fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize, density: f64) -> BinaryMask {
        let bits: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < density).collect();
        BinaryMask::new(h, w, bits)
    }

    #[test]
    fn dsc_identity_disjoint_and_partial() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(3, 3)]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        // |y| = 4, |yhat| = 6, overlap 3 -> 0.6
        let y = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let yhat = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (2, 2), (2, 3), (3, 3)]);
        assert!((dsc(&y, &yhat).unwrap() - 0.6).abs() < 1e-15);
        // both empty
        let e = mask(4, 4, &[]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn dsc_is_symmetric() {
        let mut rng = derive_rng(1, "dsc-sym");
        for _ in 0..20 {
            let a = random_mask(&mut rng, 8, 8, 0.3);
            let b = random_mask(&mut rng, 8, 8, 0.3);
            assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        }
    }

    #[test]
    fn avd_examples() {
        let y = mask(16, 16, &(0..100).map(|k| (k / 16, k % 16)).collect::<Vec<_>>());
        let yhat = mask(16, 16, &(0..120).map(|k| (k / 16, k % 16)).collect::<Vec<_>>());
        assert!((avd(&y, &yhat).unwrap().unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(avd(&y, &y).unwrap().unwrap(), 0.0);
        let y50 = mask(16, 16, &(0..50).map(|k| (k / 16, k % 16)).collect::<Vec<_>>());
        let empty = mask(16, 16, &[]);
        assert_eq!(avd(&y50, &empty).unwrap().unwrap(), 100.0);
        assert_eq!(avd(&empty, &y50).unwrap(), None);
    }

    #[test]
    fn h95_identical_masks_zero() {
        let a = mask(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(h95(&a, &a).unwrap().unwrap(), 0.0);
    }

    #[test]
    fn h95_single_pixels_axis_aligned() {
        let a = mask(8, 8, &[(1, 1)]);
        let b = mask(8, 8, &[(1, 6)]);
        assert_eq!(h95(&a, &b).unwrap().unwrap(), 5.0);
    }

    #[test]
    fn h95_empty_is_undefined() {
        let a = mask(8, 8, &[(1, 1)]);
        let e = mask(8, 8, &[]);
        assert_eq!(h95(&a, &e).unwrap(), None);
        assert_eq!(h95(&e, &a).unwrap(), None);
    }

    #[test]
    fn h95_matches_all_pairs_oracle() {
        let mut rng = derive_rng(2, "h95-oracle");
        for trial in 0..220 {
            let h = rng.random_range(4..=32);
            let w = rng.random_range(4..=32);
            let density = rng.random_range(0.05..0.5);
            let a = random_mask(&mut rng, h, w, density);
            let b = random_mask(&mut rng, h, w, density);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let fast = h95(&a, &b).unwrap().unwrap();
            let brute = h95_all_pairs(&a, &b).unwrap().unwrap();
            assert_eq!(fast, brute, "trial {trial}: {fast} vs {brute}");
            // symmetry and the percentile-vs-max bound
            assert_eq!(h95(&b, &a).unwrap().unwrap(), fast);
            let full = hausdorff_max(&a, &b).unwrap().unwrap();
            assert!(fast <= full + 1e-12);
        }
    }

    #[test]
    fn h95_boundary_convention_differs_from_full_sets() {
        // The adopted convention measures distances between boundary pixel
        // sets. The alternative (distances from boundary points to the full
        // foreground set) gives a different number on nested masks: a point
        // on the outer ring is close to the inner DISK's rim either way, but
        // the inner rim's pixels are inside the outer FOREGROUND (distance
        // 0). This pins the choice and documents the gap.
        let mut outer = vec![false; 9 * 9];
        for i in 0..9 {
            for j in 0..9 {
                outer[i * 9 + j] = true;
            }
        }
        let y = BinaryMask::new(9, 9, outer);
        let mut inner = vec![false; 9 * 9];
        inner[4 * 9 + 4] = true;
        let yhat = BinaryMask::new(9, 9, inner);

        let boundary_version = h95(&y, &yhat).unwrap().unwrap();

        // full-set variant: per direction, distances from each foreground
        // pixel of one mask to the nearest foreground pixel of the other
        let directed_full = |a: &BinaryMask, b: &BinaryMask| -> f64 {
            let mut dists = Vec::new();
            for i in 0..9 {
                for j in 0..9 {
                    if !a.get(i, j) {
                        continue;
                    }
                    let mut best = f64::INFINITY;
                    for p in 0..9 {
                        for q in 0..9 {
                            if b.get(p, q) {
                                let d = ((i as f64 - p as f64).powi(2)
                                    + (j as f64 - q as f64).powi(2))
                                .sqrt();
                                best = best.min(d);
                            }
                        }
                    }
                    dists.push(best);
                }
            }
            dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
            dists[((0.95 * dists.len() as f64).ceil() as usize).max(1) - 1]
        };
        let full_version = directed_full(&y, &yhat).max(directed_full(&yhat, &y));
        assert!(
            (boundary_version - full_version).abs() > 0.5,
            "expected the conventions to disagree here: boundary {boundary_version} vs full {full_version}"
        );
    }

    #[test]
    fn components_basic_cases() {
        let e = mask(4, 4, &[]);
        assert_eq!(connected_components(&e).count, 0);
        // diagonal touch merges under 8-connectivity
        let diag = mask(4, 4, &[(0, 0), (1, 1)]);
        assert_eq!(connected_components(&diag).count, 1);
        // checkerboard connects entirely under 8-connectivity
        let mut ones = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if (i + j) % 2 == 0 {
                    ones.push((i, j));
                }
            }
        }
        let checker = mask(4, 4, &ones);
        assert_eq!(connected_components(&checker).count, 1);
    }

    #[test]
    fn components_match_recursive_oracle() {
        let mut rng = derive_rng(3, "cc-oracle");
        for _ in 0..220 {
            let h = rng.random_range(4..=64);
            let w = rng.random_range(4..=64);
            let density = rng.random_range(0.1..0.6);
            let m = random_mask(&mut rng, h, w, density);
            assert_eq!(connected_components(&m).count, component_count_recursive(&m));
        }
    }

    #[test]
    fn lesion_detection_counts() {
        let y = mask(8, 8, &[(1, 1), (5, 5)]);
        assert_eq!(lesion_recall_f1(&y, &y).unwrap().0, 1.0);
        assert_eq!(lesion_recall_f1(&y, &y).unwrap().1, 1.0);

        // two GT lesions detected, one missed, one spurious prediction:
        // TP = 2, FP = 1, FN = 1 -> recall 2/3, f1 = 2 / (2 + 0.5 * 2) = 2/3
        let gt = mask(12, 12, &[(1, 1), (5, 5), (9, 9)]);
        let pred = mask(12, 12, &[(1, 1), (5, 5), (3, 9)]);
        let (recall, f1, m) = lesion_recall_f1(&gt, &pred).unwrap();
        assert_eq!(m, LesionMatch { tp: 2, fp: 1, fn_: 1 });
        assert!((recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);

        // empty prediction with 3 GT lesions
        let empty = mask(12, 12, &[]);
        let (recall, f1, _) = lesion_recall_f1(&gt, &empty).unwrap();
        assert_eq!(recall, 0.0);
        assert_eq!(f1, 0.0);

        // neither lesions nor predictions
        let (recall, f1, _) = lesion_recall_f1(&empty, &empty).unwrap();
        assert_eq!(recall, 1.0);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn lesion_counts_partition_ground_truth() {
        let mut rng = derive_rng(4, "lesion-partition");
        for _ in 0..50 {
            let y = random_mask(&mut rng, 16, 16, 0.2);
            let yhat = random_mask(&mut rng, 16, 16, 0.2);
            let (_, _, m) = lesion_recall_f1(&y, &yhat).unwrap();
            assert_eq!(m.tp + m.fn_, connected_components(&y).count);
        }
    }

    #[test]
    fn report_single_case_and_self_gain() {
        let y = mask(8, 8, &[(2, 2), (2, 3)]);
        let yhat = mask(8, 8, &[(2, 2)]);
        let report = evaluate_all(&[7], &[y.clone()], &[yhat]).unwrap();
        assert_eq!(report.per_case.len(), 1);
        for m in 0..5 {
            assert_eq!(report.avg[m], report.per_case[0].get(m));
        }
        let gained = report.clone().with_gain_against(&report);
        for g in gained.gain.unwrap().iter().flatten() {
            assert_eq!(*g, 0.0);
        }
    }

    #[test]
    fn report_counts_undefined_cases() {
        let y = vec![mask(8, 8, &[]), mask(8, 8, &[(1, 1)])];
        let yhat = vec![mask(8, 8, &[(0, 0)]), mask(8, 8, &[(1, 1)])];
        let report = evaluate_all(&[0, 1], &y, &yhat).unwrap();
        assert_eq!(report.n_undefined[1], 1); // H95 undefined on empty GT
        assert_eq!(report.n_undefined[2], 1); // AVD undefined on empty GT
        let csv = report.to_csv();
        assert!(csv.contains("NA"));
        let j = report.to_json();
        assert_eq!(j["metrics"]["H95"]["n_undefined"], 1);
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = mask(4, 4, &[(0, 0)]);
        let b = mask(4, 5, &[(0, 0)]);
        assert!(dsc(&a, &b).is_err());
        assert!(h95(&a, &b).is_err());
        assert!(avd(&a, &b).is_err());
    }
}
