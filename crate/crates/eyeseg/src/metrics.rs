//! Evaluation metrics: per-class Dice, 95th-percentile Hausdorff surface
//! distance, hard-label anatomical violation counts, and bootstrap
//! confidence intervals over per-image values.
//!
//! Definition pins (all part of the metric contract):
//!
//! - boundaries are class pixels with a 4-neighbor of another class or
//!   on the image border;
//! - HD95 pools directed boundary nearest-neighbor distances from both
//!   directions and takes the 95th percentile with linear interpolation
//!   between order statistics;
//! - an empty/empty class pair scores Dice 1 and HD95 0; a half-empty
//!   pair scores Dice 0 and HD95 `sqrt(H^2 + W^2)`;
//! - bootstrap CIs resample images (not pixels) with replacement,
//!   percentile method, seeded per resample.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{ClassSet, LabelMask};
use crate::seeds;

/// Distances-squared sentinel for grid cells not yet reached by any site.
const FAR: f64 = 1e20;

/// Dice overlap of class `c` between two masks.
///
/// `2|A ∩ B| / (|A| + |B|)`; 1 when both regions are empty, 0 when
/// exactly one is.
pub fn dice_score(pred: &LabelMask, gt: &LabelMask, c: u8) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (pv, gv) in pred.data().iter().zip(gt.data().iter()) {
        let pa = *pv == c;
        let ga = *gv == c;
        a += pa as usize;
        b += ga as usize;
        inter += (pa && ga) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    if a == 0 || b == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

fn check_same_shape(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.height(), a.width()),
            got: format!("{}x{}", b.height(), b.width()),
        });
    }
    Ok(())
}

/// Boundary pixels of class `c`: class pixels with at least one
/// 4-neighbor of a different class, or on the image border.
pub fn boundary_pixels(mask: &LabelMask, c: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != c {
                continue;
            }
            let on_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let neighbor_differs = (y > 0 && mask.get(y - 1, x) != c)
                || (y + 1 < h && mask.get(y + 1, x) != c)
                || (x > 0 && mask.get(y, x - 1) != c)
                || (x + 1 < w && mask.get(y, x + 1) != c);
            if on_border || neighbor_differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform to a set of sites
/// (two-pass lower-envelope algorithm; all outputs are exact integers
/// in f64).
fn squared_edt(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut row_dist = vec![FAR; h * w];
    // Row pass over binary data: squared distance to the nearest site
    // in the same row, by two linear sweeps.
    let mut site_in_row = vec![false; h * w];
    for &(y, x) in sites {
        site_in_row[y * w + x] = true;
    }
    for y in 0..h {
        let mut last: Option<usize> = None;
        for x in 0..w {
            if site_in_row[y * w + x] {
                last = Some(x);
            }
            if let Some(l) = last {
                let d = (x - l) as f64;
                row_dist[y * w + x] = d * d;
            }
        }
        let mut next: Option<usize> = None;
        for x in (0..w).rev() {
            if site_in_row[y * w + x] {
                next = Some(x);
            }
            if let Some(n) = next {
                let d = (n - x) as f64;
                let dd = d * d;
                if dd < row_dist[y * w + x] {
                    row_dist[y * w + x] = dd;
                }
            }
        }
    }
    // Column pass: lower envelope of parabolas seeded by the row pass.
    let mut out = vec![FAR; h * w];
    let mut v = vec![0usize; h];
    let mut z = vec![0.0f64; h + 1];
    let mut f = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = row_dist[y * w + x];
        }
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..h {
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * q as f64 - 2.0 * p as f64);
                if s <= z[k] {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        let mut k = 0usize;
        for y in 0..h {
            while z[k + 1] < y as f64 {
                k += 1;
            }
            let p = v[k];
            let dy = y as f64 - p as f64;
            out[y * w + x] = dy * dy + f[p];
        }
    }
    out
}

/// Percentile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// 95th-percentile Hausdorff distance between the class-`c` boundaries
/// of two masks, in pixels.
pub fn hd95(pred: &LabelMask, gt: &LabelMask, c: u8) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let a = boundary_pixels(pred, c);
    let b = boundary_pixels(gt, c);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Ok((((h * h) + (w * w)) as f64).sqrt());
        }
        _ => {}
    }
    let dist_to_b = squared_edt(h, w, &b);
    let dist_to_a = squared_edt(h, w, &a);
    let mut pooled: Vec<f64> = Vec::with_capacity(a.len() + b.len());
    for &(y, x) in &a {
        pooled.push(dist_to_b[y * w + x].sqrt());
    }
    for &(y, x) in &b {
        pooled.push(dist_to_a[y * w + x].sqrt());
    }
    pooled.sort_by(|p, q| p.partial_cmp(q).unwrap());
    Ok(percentile(&pooled, 0.95))
}

/// Hard-label violation counts of the three anatomical constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ViolationCounts {
    /// Pixels carrying both sclera and pupil. Always 0 for single-label
    /// masks; kept for future multi-label inputs.
    pub exclusion: usize,
    /// Iris pixels outside the filled sclera region.
    pub sclera_iris: usize,
    /// Pupil pixels outside the filled iris region.
    pub iris_pupil: usize,
}

impl ViolationCounts {
    pub fn total(&self) -> usize {
        self.exclusion + self.sclera_iris + self.iris_pupil
    }
}

/// Pixels reachable from the image border through non-`outer` pixels
/// (4-connectivity). The complement is the filled `outer` region.
fn exterior_of_filled(mask: &LabelMask, outer: u8) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let mut ext = vec![false; h * w];
    let mut queue = std::collections::VecDeque::new();
    let push = |y: usize, x: usize, ext: &mut Vec<bool>, queue: &mut std::collections::VecDeque<(usize, usize)>| {
        if !ext[y * w + x] && mask.get(y, x) != outer {
            ext[y * w + x] = true;
            queue.push_back((y, x));
        }
    };
    for x in 0..w {
        push(0, x, &mut ext, &mut queue);
        push(h - 1, x, &mut ext, &mut queue);
    }
    for y in 0..h {
        push(y, 0, &mut ext, &mut queue);
        push(y, w - 1, &mut ext, &mut queue);
    }
    while let Some((y, x)) = queue.pop_front() {
        if y > 0 {
            push(y - 1, x, &mut ext, &mut queue);
        }
        if y + 1 < h {
            push(y + 1, x, &mut ext, &mut queue);
        }
        if x > 0 {
            push(y, x - 1, &mut ext, &mut queue);
        }
        if x + 1 < w {
            push(y, x + 1, &mut ext, &mut queue);
        }
    }
    ext
}

/// Counts pixels violating each constraint under the hard-label
/// reading: enclosure violations are inner-class pixels lying in the
/// exterior of the flood-filled outer-class region.
pub fn violation_count(mask: &LabelMask) -> ViolationCounts {
    let count_outside = |outer: u8, inner: u8| -> usize {
        let ext = exterior_of_filled(mask, outer);
        mask.data()
            .iter()
            .enumerate()
            .filter(|(i, &v)| v == inner && ext[*i])
            .count()
    };
    ViolationCounts {
        exclusion: 0,
        sclera_iris: count_outside(ClassSet::SCLERA as u8, ClassSet::IRIS as u8),
        iris_pupil: count_outside(ClassSet::IRIS as u8, ClassSet::PUPIL as u8),
    }
}

/// Mean and percentile-method bootstrap confidence bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CiEstimate {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Percentile bootstrap CI of the mean over `values`.
///
/// Draws `resamples` resamples of size `n` with replacement (each from
/// its own derived seed, so the result is independent of evaluation
/// order), takes the mean of each, and returns the
/// `(1-level)/2` and `1-(1-level)/2` quantiles of the resample means.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<CiEstimate> {
    if values.len() < 2 {
        return Err(Error::InsufficientData {
            what: "bootstrap",
            needed: 2,
            got: values.len(),
        });
    }
    if resamples < 100 {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs at least 100 resamples, got {resamples}"
        )));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut stats: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds::item_rng(seed, i as u64);
            let mut sum = 0.0;
            for _ in 0..n {
                sum += values[rng.gen_range(0..n)];
            }
            sum / n as f64
        })
        .collect();
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    Ok(CiEstimate {
        mean,
        lower: percentile(&stats, alpha),
        upper: percentile(&stats, 1.0 - alpha),
    })
}

/// Per-image metric row.
#[derive(Debug, Clone, Serialize)]
pub struct ImageMetrics {
    pub stem: String,
    /// Dice per non-background class, in class order.
    pub dice: Vec<f64>,
    /// Mean Dice over non-background classes.
    pub dice_mean: f64,
    /// HD95 per non-background class, in class order.
    pub hd95: Vec<f64>,
    pub hd95_mean: f64,
    pub violations: ViolationCounts,
}

/// Aggregate statistics with bootstrap CIs, one per metric column.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateMetrics {
    pub dice: Vec<CiEstimate>,
    pub dice_mean: CiEstimate,
    pub hd95: Vec<CiEstimate>,
    pub hd95_mean: CiEstimate,
    pub violations_exclusion: CiEstimate,
    pub violations_sclera_iris: CiEstimate,
    pub violations_iris_pupil: CiEstimate,
}

/// Full evaluation report: one row per image plus aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    /// Names of the evaluated (non-background) classes.
    pub class_names: Vec<String>,
    pub images: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
    pub bootstrap_resamples: usize,
    pub confidence_level: f64,
    pub seed: u64,
}

/// Metrics of a single prediction/ground-truth pair: Dice and HD95 per
/// non-background class, plus violation counts of the prediction.
pub fn image_metrics(
    stem: &str,
    pred: &LabelMask,
    gt: &LabelMask,
    classes: &ClassSet,
) -> Result<ImageMetrics> {
    let mut dice = Vec::new();
    let mut hd = Vec::new();
    for c in 1..classes.len() {
        dice.push(dice_score(pred, gt, c as u8)?);
        hd.push(hd95(pred, gt, c as u8)?);
    }
    let n = dice.len() as f64;
    Ok(ImageMetrics {
        stem: stem.to_string(),
        dice_mean: dice.iter().sum::<f64>() / n,
        hd95_mean: hd.iter().sum::<f64>() / n,
        dice,
        hd95: hd,
        violations: violation_count(pred),
    })
}

/// Evaluates every (prediction, ground truth) pair and aggregates with
/// bootstrap CIs over images.
pub fn compute_report(
    pairs: &[(String, LabelMask, LabelMask)],
    classes: &ClassSet,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no prediction/ground-truth pairs"));
    }
    let images: Vec<ImageMetrics> = pairs
        .par_iter()
        .map(|(stem, pred, gt)| image_metrics(stem, pred, gt, classes))
        .collect::<Result<_>>()?;

    let n_cls = classes.len() - 1;
    let mut col = 0u64;
    let mut ci_of = |values: Vec<f64>| -> Result<CiEstimate> {
        col += 1;
        if values.len() == 1 {
            // Single image: CI collapses to the point estimate.
            return Ok(CiEstimate { mean: values[0], lower: values[0], upper: values[0] });
        }
        bootstrap_ci(&values, resamples, level, seeds::derive_seed(seed, col))
    };

    let dice: Vec<CiEstimate> = (0..n_cls)
        .map(|c| ci_of(images.iter().map(|m| m.dice[c]).collect()))
        .collect::<Result<_>>()?;
    let dice_mean = ci_of(images.iter().map(|m| m.dice_mean).collect())?;
    let hd: Vec<CiEstimate> = (0..n_cls)
        .map(|c| ci_of(images.iter().map(|m| m.hd95[c]).collect()))
        .collect::<Result<_>>()?;
    let hd95_mean = ci_of(images.iter().map(|m| m.hd95_mean).collect())?;
    let viol_excl = ci_of(images.iter().map(|m| m.violations.exclusion as f64).collect())?;
    let viol_si = ci_of(images.iter().map(|m| m.violations.sclera_iris as f64).collect())?;
    let viol_ip = ci_of(images.iter().map(|m| m.violations.iris_pupil as f64).collect())?;

    Ok(MetricReport {
        class_names: (1..classes.len()).map(|c| classes.name(c).to_string()).collect(),
        images,
        aggregate: AggregateMetrics {
            dice,
            dice_mean,
            hd95: hd,
            hd95_mean,
            violations_exclusion: viol_excl,
            violations_sclera_iris: viol_si,
            violations_iris_pupil: viol_ip,
        },
        bootstrap_resamples: resamples,
        confidence_level: level,
        seed,
    })
}

impl MetricReport {
    /// CSV rendering: one row per image, then `mean`, `ci_lower`, and
    /// `ci_upper` aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stem");
        for name in &self.class_names {
            out.push_str(&format!(",dice_{name}"));
        }
        out.push_str(",dice_mean");
        for name in &self.class_names {
            out.push_str(&format!(",hd95_{name}"));
        }
        out.push_str(",hd95_mean,viol_exclusion,viol_sclera_iris,viol_iris_pupil\n");
        for m in &self.images {
            out.push_str(&m.stem);
            for v in &m.dice {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push_str(&format!(",{:.6}", m.dice_mean));
            for v in &m.hd95 {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push_str(&format!(
                ",{:.6},{},{},{}\n",
                m.hd95_mean, m.violations.exclusion, m.violations.sclera_iris, m.violations.iris_pupil
            ));
        }
        let agg = &self.aggregate;
        for (label, pick) in [
            ("mean", 0usize),
            ("ci_lower", 1),
            ("ci_upper", 2),
        ] {
            let get = |ci: &CiEstimate| match pick {
                0 => ci.mean,
                1 => ci.lower,
                _ => ci.upper,
            };
            out.push_str(label);
            for ci in &agg.dice {
                out.push_str(&format!(",{:.6}", get(ci)));
            }
            out.push_str(&format!(",{:.6}", get(&agg.dice_mean)));
            for ci in &agg.hd95 {
                out.push_str(&format!(",{:.6}", get(ci)));
            }
            out.push_str(&format!(
                ",{:.6},{:.6},{:.6},{:.6}\n",
                get(&agg.hd95_mean),
                get(&agg.violations_exclusion),
                get(&agg.violations_sclera_iris),
                get(&agg.violations_iris_pupil)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}
