//! Confusion-matrix mIoU and boundary F-score.
//!
//! Boundary pixels of class `c` are pixels labeled `c` with a 4-neighbour of a
//! different class. A predicted boundary pixel matches if some ground-truth
//! boundary pixel of the same class lies within Euclidean distance `d`, and
//! vice versa for recall, with `d = max(1, ceil(tol_frac * diagonal))`.
//! Matches are micro-averaged over the foreground classes present in the
//! ground truth.

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate<T: Copy + Into<usize>>(&mut self, pred: &[T], gt: &[T]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.num_classes;
        if let Some(bad) = pred
            .iter()
            .chain(gt)
            .map(|&v| v.into())
            .find(|&v| v >= c)
        {
            return Err(Error::Invalid(format!("class id {bad} >= {c}")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g.into() * c + p.into()] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` for classes absent from both ground truth and
    /// prediction) and their mean.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Invalid("mIoU undefined: no class present".into()));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok((per_class, mean))
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        diag as f64 / total as f64
    }
}

/// Boundary pixels of `class` in an `h x w` map (4-connectivity).
pub fn class_boundary(map: &[u8], h: usize, w: usize, class: u8) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = map[y * w + x];
            if v != class {
                continue;
            }
            let differs = (y > 0 && map[(y - 1) * w + x] != v)
                || (y + 1 < h && map[(y + 1) * w + x] != v)
                || (x > 0 && map[y * w + x - 1] != v)
                || (x + 1 < w && map[y * w + x + 1] != v);
            out[y * w + x] = differs;
        }
    }
    out
}

const INF: f64 = 1e20;

/// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else if s <= z[k] {
                // k == 0 and the new parabola dominates from -inf
                v[0] = q;
                z[0] = -INF;
                z[1] = INF;
                break;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` pixel
/// (separable two-pass transform). Pixels with no feature anywhere get a huge value.
pub fn squared_distance_transform(features: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = features.iter().map(|&b| if b { 0.0 } else { INF }).collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

pub fn tolerance_radius(h: usize, w: usize, tol_frac: f64) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    ((tol_frac * diag).ceil() as usize).max(1)
}

/// Matched/total boundary pixel counts, summed over classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub pred_matched: u64,
    pub pred_total: u64,
    pub gt_matched: u64,
    pub gt_total: u64,
}

impl BoundaryCounts {
    pub fn add(&mut self, other: &BoundaryCounts) {
        self.pred_matched += other.pred_matched;
        self.pred_total += other.pred_total;
        self.gt_matched += other.gt_matched;
        self.gt_total += other.gt_total;
    }

    /// `(precision, recall, F)`; undefined ratios are 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.pred_matched, self.pred_total);
        let r = ratio(self.gt_matched, self.gt_total);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

fn count_matches(from: &[bool], to_dist: &[f64], radius_sq: f64) -> (u64, u64) {
    let mut matched = 0;
    let mut total = 0;
    for (i, &b) in from.iter().enumerate() {
        if b {
            total += 1;
            if to_dist[i] <= radius_sq {
                matched += 1;
            }
        }
    }
    (matched, total)
}

/// Boundary match counts for one image.
pub fn boundary_counts(pred: &[u8], gt: &[u8], h: usize, w: usize, radius: usize) -> Result<BoundaryCounts> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::Shape(format!(
            "boundary maps must be {h}x{w}, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut present = [false; 256];
    for &v in gt {
        present[v as usize] = true;
    }
    let r2 = (radius * radius) as f64;
    let mut counts = BoundaryCounts::default();
    for class in (1..=255u8).filter(|&c| present[c as usize]) {
        let bp = class_boundary(pred, h, w, class);
        let bg = class_boundary(gt, h, w, class);
        let dist_to_gt = squared_distance_transform(&bg, h, w);
        let dist_to_pred = squared_distance_transform(&bp, h, w);
        let (pm, pt) = count_matches(&bp, &dist_to_gt, r2);
        let (gm, gtot) = count_matches(&bg, &dist_to_pred, r2);
        counts.add(&BoundaryCounts {
            pred_matched: pm,
            pred_total: pt,
            gt_matched: gm,
            gt_total: gtot,
        });
    }
    Ok(counts)
}

/// Boundary precision, recall and F-score of one image.
pub fn boundary_fscore(pred: &[u8], gt: &[u8], h: usize, w: usize, tol_frac: f64) -> Result<(f64, f64, f64)> {
    if !(tol_frac >= 0.0) {
        return Err(Error::Config(format!("tol_frac must be non-negative, got {tol_frac}")));
    }
    Ok(boundary_counts(pred, gt, h, w, tolerance_radius(h, w, tol_frac))?.prf())
}

/// Dataset-level evaluation accumulator.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub confusion: ConfusionMatrix,
    pub boundary: BoundaryCounts,
    pub tol_frac: f64,
}

impl Evaluator {
    pub fn new(num_classes: usize, tol_frac: f64) -> Self {
        Evaluator {
            confusion: ConfusionMatrix::new(num_classes),
            boundary: BoundaryCounts::default(),
            tol_frac,
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<()> {
        self.confusion.accumulate(pred, gt)?;
        let radius = tolerance_radius(h, w, self.tol_frac);
        self.boundary.add(&boundary_counts(pred, gt, h, w, radius)?);
        Ok(())
    }

    pub fn finish(&self, split: &str, step: u64) -> Result<MetricsRecord> {
        let (per_class_iou, miou) = self.confusion.miou()?;
        let (p, r, f) = self.boundary.prf();
        Ok(MetricsRecord {
            per_class_iou,
            miou,
            boundary_precision: p,
            boundary_recall: r,
            boundary_f: f,
            pixel_accuracy: self.confusion.pixel_accuracy(),
            split: split.to_string(),
            step,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub boundary_precision: f64,
    pub boundary_recall: f64,
    pub boundary_f: f64,
    pub pixel_accuracy: f64,
    pub split: String,
    pub step: u64,
}

impl MetricsRecord {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "split {} @ step {}\n  mIoU            {:>7.2}%\n  boundary F      {:>7.2}%  (P {:.2}%, R {:.2}%)\n  pixel accuracy  {:>7.2}%\n",
            self.split,
            self.step,
            100.0 * self.miou,
            100.0 * self.boundary_f,
            100.0 * self.boundary_precision,
            100.0 * self.boundary_recall,
            100.0 * self.pixel_accuracy
        );
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("  class {c:<2} IoU    {:>7.2}%\n", 100.0 * v)),
                None => s.push_str(&format!("  class {c:<2} IoU        n/a\n")),
            }
        }
        s
    }
}
