//! Non-overlapping max-pooling pyramids and the multi-scale supervision
//! loss with its analytic gradient.
//!
//! Pooling uses stride = kernel size, so windows tile the image without
//! overlap. Edge windows shrink when the kernel does not divide the
//! image (ceil-mode): every pixel participates at every scale. The loss
//! compares pooled prediction and ground-truth stacks per scale with a
//! mean absolute difference, averaged over scales, and routes each
//! pooled cell's subgradient back to the window argmax in the
//! prediction (first row-major index on ties).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2, Grid3, ProbMap};

/// Reduction applied by the loss terms.
///
/// `Mean` normalizes by the number of contributing cells so loss
/// magnitudes (and therefore the composite weights) do not depend on
/// image resolution. `Sum` is the literal unnormalized total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Ordered list of pooling kernel sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct KernelSchedule(Vec<usize>);

impl KernelSchedule {
    /// Validates: non-empty, every kernel >= 1, strictly increasing.
    pub fn new(kernels: Vec<usize>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::InvalidConfig("kernel schedule must not be empty".into()));
        }
        for &k in &kernels {
            if k < 1 {
                return Err(Error::InvalidConfig("kernel sizes must be >= 1".into()));
            }
        }
        if !kernels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(format!(
                "kernel schedule must be strictly increasing, got {kernels:?}"
            )));
        }
        Ok(KernelSchedule(kernels))
    }

    pub fn kernels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for KernelSchedule {
    fn default() -> Self {
        KernelSchedule(vec![2, 4, 8, 16])
    }
}

impl TryFrom<Vec<usize>> for KernelSchedule {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        KernelSchedule::new(v)
    }
}

impl From<KernelSchedule> for Vec<usize> {
    fn from(s: KernelSchedule) -> Vec<usize> {
        s.0
    }
}

pub(crate) fn pooled_len(n: usize, k: usize) -> usize {
    n.div_ceil(k)
}

/// Max-pools a single `H x W` grid with kernel = stride = `k`.
///
/// Output cell `(u, v)` is the maximum over rows `[u*k, min((u+1)*k, H))`
/// and the corresponding columns; shape is `ceil(H/k) x ceil(W/k)`.
pub fn maxpool2d(grid: &Grid2, k: usize) -> Result<Grid2> {
    if k < 1 {
        return Err(Error::InvalidConfig(format!("pooling kernel must be >= 1, got {k}")));
    }
    Ok(maxpool2d_with_argmax(grid, k).0)
}

/// Max-pooling that also records, per output cell, the source pixel of
/// the maximum (first in row-major order on ties) for gradient routing.
pub(crate) fn maxpool2d_with_argmax(grid: &Grid2, k: usize) -> (Grid2, Vec<(usize, usize)>) {
    let (h, w) = (grid.height(), grid.width());
    let (ph, pw) = (pooled_len(h, k), pooled_len(w, k));
    let mut out = Grid2::zeros(ph, pw);
    let mut arg = vec![(0usize, 0usize); ph * pw];
    for u in 0..ph {
        let y0 = u * k;
        let y1 = ((u + 1) * k).min(h);
        for v in 0..pw {
            let x0 = v * k;
            let x1 = ((v + 1) * k).min(w);
            let mut best = f64::NEG_INFINITY;
            let mut best_at = (y0, x0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let val = grid.get(y, x);
                    if val > best {
                        best = val;
                        best_at = (y, x);
                    }
                }
            }
            out.set(u, v, best);
            arg[u * pw + v] = best_at;
        }
    }
    (out, arg)
}

/// Pooled stack of a probability map at every kernel size of `schedule`.
#[derive(Debug, Clone)]
pub struct MultiScalePyramid {
    levels: Vec<(usize, Grid3)>,
}

impl MultiScalePyramid {
    pub fn levels(&self) -> &[(usize, Grid3)] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Grid3 {
        &self.levels[i].1
    }

    pub fn kernel(&self, i: usize) -> usize {
        self.levels[i].0
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Applies [`maxpool2d`] per channel per kernel size.
pub fn build_pyramid(p: &ProbMap, schedule: &KernelSchedule) -> MultiScalePyramid {
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let mut levels = Vec::with_capacity(schedule.len());
    for &k in schedule.kernels() {
        let (ph, pw) = (pooled_len(h, k), pooled_len(w, k));
        let mut level = Grid3::zeros(c, ph, pw);
        for ch in 0..c {
            let (pooled, _) = maxpool2d_with_argmax(&p.channel_grid(ch), k);
            for u in 0..ph {
                for v in 0..pw {
                    level.set(ch, u, v, pooled.get(u, v));
                }
            }
        }
        levels.push((k, level));
    }
    MultiScalePyramid { levels }
}

/// Value and prediction-gradient of the multi-scale supervision loss.
#[derive(Debug, Clone)]
pub struct TopoLoss {
    pub value: f64,
    /// Gradient with respect to the prediction probabilities (`C x H x W`).
    pub grad: Grid3,
}

/// Multi-scale loss: per scale, the absolute difference between pooled
/// prediction and pooled ground truth divided by the kernel size,
/// reduced per [`Reduction`] and averaged over scales.
///
/// The `1/k` factor damps coarse scales. Without it a coarse pooled
/// cell outweighs a pixel of the mean-reduced pixel loss by `k^2` and,
/// because the subgradient routes to a single window pixel, free-logit
/// optimization locks isolated wrong pixels in place instead of
/// converging (the damped form keeps unit term weights usable).
///
/// The subgradient of each pooled cell flows to the argmax pixel of its
/// window in `p` with sign `sgn(pooled_p - pooled_g)` (0 at an exact
/// tie of the pooled values).
pub fn topo_loss(p: &ProbMap, g: &ProbMap, schedule: &KernelSchedule, reduction: Reduction) -> Result<TopoLoss> {
    if !p.same_shape(g) {
        return Err(Error::ShapeMismatch {
            expected: p.shape_string(),
            got: g.shape_string(),
        });
    }
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let n_scales = schedule.len() as f64;
    let mut value = 0.0;
    let mut grad = Grid3::zeros(c, h, w);
    for &k in schedule.kernels() {
        let (ph, pw) = (pooled_len(h, k), pooled_len(w, k));
        let cells = (c * ph * pw) as f64;
        let scale = match reduction {
            Reduction::Mean => 1.0 / (n_scales * cells * k as f64),
            Reduction::Sum => 1.0 / k as f64,
        };
        for ch in 0..c {
            let (pp, arg) = maxpool2d_with_argmax(&p.channel_grid(ch), k);
            let (pg, _) = maxpool2d_with_argmax(&g.channel_grid(ch), k);
            for u in 0..ph {
                for v in 0..pw {
                    let diff = pp.get(u, v) - pg.get(u, v);
                    value += diff.abs() * scale;
                    if diff != 0.0 {
                        let (y, x) = arg[u * pw + v];
                        grad.add(ch, y, x, diff.signum() * scale);
                    }
                }
            }
        }
    }
    Ok(TopoLoss { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{one_hot, ClassSet, LabelMask, LogitGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid2 {
        Grid2::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    // Independent window-max oracle used by the pooling tests.
    fn brute_force_pool(grid: &Grid2, k: usize) -> Grid2 {
        let (h, w) = (grid.height(), grid.width());
        let mut out = Grid2::zeros(h.div_ceil(k), w.div_ceil(k));
        for u in 0..h.div_ceil(k) {
            for v in 0..w.div_ceil(k) {
                let mut m = f64::NEG_INFINITY;
                for y in u * k..((u + 1) * k).min(h) {
                    for x in v * k..((v + 1) * k).min(w) {
                        m = m.max(grid.get(y, x));
                    }
                }
                out.set(u, v, m);
            }
        }
        out
    }

    #[test]
    fn maxpool_two_by_two_definition() {
        let g = Grid2::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let pooled = maxpool2d(&g, 2).unwrap();
        assert_eq!((pooled.height(), pooled.width()), (1, 1));
        assert_eq!(pooled.get(0, 0), 0.4);
    }

    #[test]
    fn maxpool_kernel_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 5, 7);
        let pooled = maxpool2d(&g, 1).unwrap();
        assert_eq!(pooled, g);
    }

    #[test]
    fn maxpool_ragged_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_grid(&mut rng, 7, 5);
        let pooled = maxpool2d(&g, 3).unwrap();
        assert_eq!((pooled.height(), pooled.width()), (3, 2));
        assert_eq!(pooled, brute_force_pool(&g, 3));
    }

    #[test]
    fn maxpool_rejects_zero_kernel() {
        let g = Grid2::zeros(2, 2);
        assert!(maxpool2d(&g, 0).is_err());
    }

    #[test]
    fn maxpool_matches_brute_force_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
            let g = random_grid(&mut rng, h, w);
            for k in 1..=5 {
                assert_eq!(maxpool2d(&g, k).unwrap(), brute_force_pool(&g, k));
            }
        }
    }

    #[test]
    fn pyramid_of_binary_map_stays_binary() {
        let classes = ClassSet::eye(false);
        let mask = LabelMask::new(
            4,
            4,
            vec![0, 0, 1, 1, 0, 2, 2, 1, 0, 2, 3, 3, 0, 0, 3, 3],
            &classes,
        )
        .unwrap();
        let p = one_hot(&mask, &classes).unwrap();
        let schedule = KernelSchedule::new(vec![2, 4]).unwrap();
        let pyr = build_pyramid(&p, &schedule);
        assert_eq!(pyr.len(), 2);
        assert_eq!((pyr.level(0).height(), pyr.level(0).width()), (2, 2));
        assert_eq!((pyr.level(1).height(), pyr.level(1).width()), (1, 1));
        for (_, level) in pyr.levels() {
            for &v in level.data() {
                assert!(v == 0.0 || v == 1.0);
            }
        }
    }

    #[test]
    fn pyramid_of_constant_map_is_constant() {
        let p = ProbMap::new(2, 4, 6, vec![0.5; 2 * 4 * 6]).unwrap();
        let schedule = KernelSchedule::new(vec![2, 3]).unwrap();
        let pyr = build_pyramid(&p, &schedule);
        for (_, level) in pyr.levels() {
            for &v in level.data() {
                assert_eq!(v, 0.5);
            }
        }
    }

    #[test]
    fn coarse_level_is_max_of_nested_fine_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..2 * 8 * 8).map(|_| rng.gen_range(0.0..0.5)).collect();
        let p = ProbMap::from_raw_unchecked(2, 8, 8, data).unwrap();
        let schedule = KernelSchedule::new(vec![2, 4]).unwrap();
        let pyr = build_pyramid(&p, &schedule);
        let fine = pyr.level(0);
        let coarse = pyr.level(1);
        for c in 0..2 {
            for u in 0..coarse.height() {
                for v in 0..coarse.width() {
                    let mut m = f64::NEG_INFINITY;
                    for fu in 2 * u..(2 * u + 2).min(fine.height()) {
                        for fv in 2 * v..(2 * v + 2).min(fine.width()) {
                            m = m.max(fine.get(c, fu, fv));
                        }
                    }
                    assert_eq!(coarse.get(c, u, v), m);
                }
            }
        }
    }

    #[test]
    fn topo_loss_zero_on_identical_inputs() {
        let classes = ClassSet::eye(false);
        let mask = LabelMask::new(4, 4, vec![1; 16], &classes).unwrap();
        let p = one_hot(&mask, &classes).unwrap();
        let schedule = KernelSchedule::new(vec![2, 4]).unwrap();
        let loss = topo_loss(&p, &p, &schedule, Reduction::Mean).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn topo_loss_disjoint_one_hots_at_kernel_one() {
        let classes = ClassSet::eye(false);
        let a = one_hot(&LabelMask::filled(4, 4, 1, &classes).unwrap(), &classes).unwrap();
        let b = one_hot(&LabelMask::filled(4, 4, 2, &classes).unwrap(), &classes).unwrap();
        let schedule = KernelSchedule::new(vec![1]).unwrap();
        let loss = topo_loss(&a, &b, &schedule, Reduction::Mean).unwrap();
        assert!((loss.value - 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn topo_loss_value_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = crate::grid::normalize(&random_logit(&mut rng));
            let b = crate::grid::normalize(&random_logit(&mut rng));
            let schedule = KernelSchedule::new(vec![2, 3]).unwrap();
            let ab = topo_loss(&a, &b, &schedule, Reduction::Mean).unwrap();
            let ba = topo_loss(&b, &a, &schedule, Reduction::Mean).unwrap();
            assert!((ab.value - ba.value).abs() < 1e-12);
            assert!(ab.value >= 0.0);
        }
    }

    fn random_logit(rng: &mut ChaCha8Rng) -> LogitGrid {
        let data: Vec<f64> = (0..3 * 6 * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        LogitGrid::new(3, 6, 5, data).unwrap()
    }

    #[test]
    fn topo_loss_rejects_shape_mismatch() {
        let a = ProbMap::new(2, 2, 2, vec![0.5; 8]).unwrap();
        let b = ProbMap::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let schedule = KernelSchedule::default();
        assert!(matches!(
            topo_loss(&a, &b, &schedule, Reduction::Mean),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn kernel_schedule_rejects_non_increasing_and_zero() {
        assert!(KernelSchedule::new(vec![]).is_err());
        assert!(KernelSchedule::new(vec![0]).is_err());
        assert!(KernelSchedule::new(vec![2, 2]).is_err());
        assert!(KernelSchedule::new(vec![4, 2]).is_err());
        assert!(KernelSchedule::new(vec![1, 2, 8]).is_ok());
    }

    #[test]
    fn topo_gradient_matches_finite_differences_away_from_kinks() {
        // Gradient check with respect to the prediction probabilities.
        // Coordinates adjacent to pooled-value ties or window-argmax ties
        // are excluded: the subgradient convention there is arbitrary.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let classes = ClassSet::eye(false);
        let schedule = KernelSchedule::new(vec![2, 4]).unwrap();
        let (c, h, w) = (4usize, 8usize, 8usize);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = crate::grid::normalize(&LogitGrid::new(c, h, w, logits).unwrap());
            let mask_data: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..4)).collect();
            let g = one_hot(&LabelMask::new(h, w, mask_data, &classes).unwrap(), &classes).unwrap();
            let analytic = topo_loss(&p, &g, &schedule, Reduction::Mean).unwrap();

            let mut mask = vec![false; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        mask[(ch * h + y) * w + x] = coordinate_is_smooth(&p, &g, &schedule, ch, y, x);
                    }
                }
            }
            let report = crate::composite::finite_diff_check_flat(
                |data| {
                    let probe = ProbMap::from_raw_unchecked(c, h, w, data.to_vec())?;
                    Ok(topo_loss(&probe, &g, &schedule, Reduction::Mean)?.value)
                },
                p.data(),
                analytic.grad.data(),
                1e-5,
                Some(&mask),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "max relative error {}", report.max_rel_error);
        }
    }

    // A coordinate is kink-adjacent if, at any scale, its window has a
    // pooled |p - g| difference near zero or a near-tied window argmax.
    fn coordinate_is_smooth(
        p: &ProbMap,
        g: &ProbMap,
        schedule: &KernelSchedule,
        ch: usize,
        y: usize,
        x: usize,
    ) -> bool {
        let margin = 1e-3;
        for &k in schedule.kernels() {
            let (u, v) = (y / k, x / k);
            let (pp, arg) = maxpool2d_with_argmax(&p.channel_grid(ch), k);
            let (pg, _) = maxpool2d_with_argmax(&g.channel_grid(ch), k);
            let pw = pp.width();
            if (pp.get(u, v) - pg.get(u, v)).abs() <= margin {
                return false;
            }
            // Margin between the window max and the runner-up.
            let (ay, ax) = arg[u * pw + v];
            let mut second = f64::NEG_INFINITY;
            for wy in u * k..((u + 1) * k).min(p.height()) {
                for wx in v * k..((v + 1) * k).min(p.width()) {
                    if (wy, wx) != (ay, ax) {
                        second = second.max(p.get(ch, wy, wx));
                    }
                }
            }
            if second.is_finite() && pp.get(u, v) - second <= margin {
                return false;
            }
        }
        true
    }
}
