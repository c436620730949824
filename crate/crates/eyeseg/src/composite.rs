//! Weighted composition of the three loss terms, gradient chaining
//! through the softmax normalization, and a finite-difference gradient
//! checker.
//!
//! The composite evaluates, on the softmax of a logit grid,
//!
//! - the multi-scale pooling loss ([`crate::pool::topo_loss`]),
//! - the region-constraint loss ([`crate::constraints::iu_loss`]), and
//! - a pixel loss ([`crate::pixel_loss`]),
//!
//! combines them as `total = w_ms * multiscale + w_rc * constraint +
//! w_px * pixel`, and chains the probability-space gradients through the
//! softmax Jacobian so callers can optimize raw logits directly.

use serde::{Deserialize, Serialize};

use crate::constraints::{iu_loss, ConstraintMaps};
use crate::error::{Error, Result};
use crate::grid::{normalize, one_hot, ClassSet, Grid3, LabelMask, LogitGrid, ProbMap};
use crate::pixel_loss::{cross_entropy, dice_loss, PixelLossKind, CE_CLAMP_FLOOR};
use crate::pool::{maxpool2d_with_argmax, topo_loss, KernelSchedule, Reduction};

/// Non-negative weights for the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the multi-scale pooling term.
    pub multiscale: f64,
    /// Weight of the region-constraint term.
    pub constraint: f64,
    /// Weight of the pixel-level term.
    pub pixel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { multiscale: 1.0, constraint: 1.0, pixel: 1.0 }
    }
}

impl LossWeights {
    pub fn new(multiscale: f64, constraint: f64, pixel: f64) -> Result<Self> {
        let w = LossWeights { multiscale, constraint, pixel };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("multiscale", self.multiscale),
            ("constraint", self.constraint),
            ("pixel", self.pixel),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "loss weight '{name}' must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.multiscale == 0.0 && self.constraint == 0.0 && self.pixel == 0.0 {
            return Err(Error::InvalidConfig("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Full configuration of the composite loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub schedule: KernelSchedule,
    pub pixel: PixelLossKind,
    pub topo_reduction: Reduction,
    pub constraint_reduction: Reduction,
    /// Whether the soft Dice mean includes the background channel.
    pub dice_include_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            schedule: KernelSchedule::default(),
            pixel: PixelLossKind::default(),
            topo_reduction: Reduction::Mean,
            constraint_reduction: Reduction::Mean,
            dice_include_background: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.pixel.validate()
    }
}

/// Scalars, gradient, and constraint-map snapshot of one evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Unweighted multi-scale term.
    pub multiscale: f64,
    /// Unweighted region-constraint term.
    pub constraint: f64,
    /// Unweighted pixel term.
    pub pixel: f64,
    /// Weighted total.
    pub total: f64,
    /// Gradient of the weighted total with respect to the input grid
    /// (logits for [`total_loss`], probabilities for [`total_loss_on_probs`]).
    pub grad: Grid3,
    pub maps: ConstraintMaps,
}

fn pixel_term(p: &ProbMap, g: &ProbMap, cfg: &LossConfig) -> Result<crate::pixel_loss::PixelLoss> {
    match cfg.pixel {
        PixelLossKind::CrossEntropy => cross_entropy(p, g),
        PixelLossKind::SoftDice { eps } => dice_loss(p, g, eps, cfg.dice_include_background),
    }
}

fn breakdown_on_probs(p: &ProbMap, g: &ProbMap, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let topo = topo_loss(p, g, &cfg.schedule, cfg.topo_reduction)?;
    let iu = iu_loss(p, cfg.constraint_reduction)?;
    let px = pixel_term(p, g, cfg)?;

    let w = cfg.weights;
    let mut grad = Grid3::zeros(p.channels(), p.height(), p.width());
    grad.add_scaled(&topo.grad, w.multiscale);
    grad.add_scaled(&iu.grad, w.constraint);
    grad.add_scaled(&px.grad, w.pixel);

    Ok(LossBreakdown {
        multiscale: topo.value,
        constraint: iu.value,
        pixel: px.value,
        total: w.multiscale * topo.value + w.constraint * iu.value + w.pixel * px.value,
        grad,
        maps: iu.maps,
    })
}

/// Composite loss of a probability map against a label mask. The
/// returned gradient is with respect to the probabilities.
pub fn total_loss_on_probs(
    p: &ProbMap,
    g: &LabelMask,
    classes: &ClassSet,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let g1 = one_hot(g, classes)?;
    if !p.same_shape(&g1) {
        return Err(Error::ShapeMismatch {
            expected: g1.shape_string(),
            got: p.shape_string(),
        });
    }
    breakdown_on_probs(p, &g1, cfg)
}

/// Composite loss of a logit grid against a label mask.
///
/// Normalizes the logits with a per-pixel softmax, evaluates the three
/// terms, and chains the probability-space gradient through the softmax
/// Jacobian: `d/dz_c = p_c * (gp_c - sum_k gp_k * p_k)` per pixel.
pub fn total_loss(
    logits: &LogitGrid,
    g: &LabelMask,
    classes: &ClassSet,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if logits.channels() != classes.len()
        || logits.height() != g.height()
        || logits.width() != g.width()
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}x{}", classes.len(), g.height(), g.width()),
            got: format!("{}x{}x{}", logits.channels(), logits.height(), logits.width()),
        });
    }
    let p = normalize(logits);
    let g1 = one_hot(g, classes)?;
    let mut breakdown = breakdown_on_probs(&p, &g1, cfg)?;
    breakdown.grad = chain_through_softmax(&p, &breakdown.grad);
    Ok(breakdown)
}

/// Pulls a probability-space gradient back to logit space.
pub fn chain_through_softmax(p: &ProbMap, grad_p: &Grid3) -> Grid3 {
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let mut out = Grid3::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += grad_p.get(ch, y, x) * p.get(ch, y, x);
            }
            for ch in 0..c {
                out.set(ch, y, x, p.get(ch, y, x) * (grad_p.get(ch, y, x) - dot));
            }
        }
    }
    out
}

/// Result of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Maximum relative error over the checked coordinates.
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate, if any coordinate was checked.
    pub worst_coordinate: Option<usize>,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Absolute differences below this floor count as exact agreement: a
/// central difference of an O(1) function at step 1e-5 carries rounding
/// noise of roughly `eps * |f| / h ~ 3e-11`, so smaller discrepancies
/// are not measurable.
pub const FD_NOISE_FLOOR: f64 = 1e-10;

/// Central-difference gradient check over a flat coordinate vector.
///
/// For every coordinate `i` with `|analytic[i]| > 1e-8` (and, when
/// `mask` is given, `mask[i]`), compares `(f(x + h e_i) - f(x - h e_i)) / 2h`
/// against `analytic[i]` with relative error `|an - fd| / max(|fd|, 1e-12)`,
/// treating differences under [`FD_NOISE_FLOOR`] as zero.
pub fn finite_diff_check_flat(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    mask: Option<&[bool]>,
) -> Result<GradCheckReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {step}")));
    }
    if x.len() != analytic.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} coordinates", x.len()),
            got: format!("{} analytic entries", analytic.len()),
        });
    }
    let mut probe = x.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coordinate: None, checked: 0 };
    for i in 0..x.len() {
        if analytic[i].abs() <= 1e-8 {
            continue;
        }
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite loss during finite-difference probe at coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        let diff = (analytic[i] - fd).abs();
        let rel = if diff <= FD_NOISE_FLOOR { 0.0 } else { diff / fd.abs().max(1e-12) };
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(i);
        }
    }
    Ok(report)
}

/// [`finite_diff_check_flat`] specialized to logit grids: perturbs each
/// logit and compares against an analytic `C x H x W` gradient. The
/// optional pixel mask (length `H*W`) restricts the check to pixels away
/// from subgradient kinks.
pub fn finite_diff_check(
    mut f: impl FnMut(&LogitGrid) -> Result<f64>,
    logits: &LogitGrid,
    analytic: &Grid3,
    step: f64,
    pixel_mask: Option<&[bool]>,
) -> Result<GradCheckReport> {
    let (c, h, w) = (logits.channels(), logits.height(), logits.width());
    let coord_mask: Option<Vec<bool>> = pixel_mask.map(|pm| {
        let mut m = vec![false; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                m[ch * h * w + i] = pm[i];
            }
        }
        m
    });
    finite_diff_check_flat(
        |data| f(&LogitGrid::new(c, h, w, data.to_vec())?),
        logits.data(),
        analytic.data(),
        step,
        coord_mask.as_deref(),
    )
}

/// Marks pixels at which the composite loss is differentiable with a
/// margin, i.e. no pooling-window tie, no pooled difference near zero,
/// no rectifier argument near zero, and no probability near the
/// cross-entropy clamp floor. Finite-difference checks of [`total_loss`]
/// are restricted to these pixels.
pub fn smooth_pixel_mask(p: &ProbMap, g: &ProbMap, cfg: &LossConfig, margin: f64) -> Vec<bool> {
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let mut ok = vec![true; h * w];

    if cfg.weights.multiscale > 0.0 {
        for &k in cfg.schedule.kernels() {
            for ch in 0..c {
                let (pp, arg) = maxpool2d_with_argmax(&p.channel_grid(ch), k);
                let (pg, _) = maxpool2d_with_argmax(&g.channel_grid(ch), k);
                for u in 0..pp.height() {
                    for v in 0..pp.width() {
                        let mut kinky = (pp.get(u, v) - pg.get(u, v)).abs() <= margin;
                        if !kinky {
                            let (ay, ax) = arg[u * pp.width() + v];
                            let mut second = f64::NEG_INFINITY;
                            for y in u * k..((u + 1) * k).min(h) {
                                for x in v * k..((v + 1) * k).min(w) {
                                    if (y, x) != (ay, ax) {
                                        second = second.max(p.get(ch, y, x));
                                    }
                                }
                            }
                            kinky = second.is_finite() && pp.get(u, v) - second <= margin;
                        }
                        if kinky {
                            for y in u * k..((u + 1) * k).min(h) {
                                for x in v * k..((v + 1) * k).min(w) {
                                    ok[y * w + x] = false;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if cfg.weights.constraint > 0.0 && c > ClassSet::PUPIL {
        for y in 0..h {
            for x in 0..w {
                let ps = p.get(ClassSet::SCLERA, y, x);
                let pi = p.get(ClassSet::IRIS, y, x);
                let pp = p.get(ClassSet::PUPIL, y, x);
                if (ps - pp).abs() <= margin
                    || ps.min(pp) <= margin
                    || (pi - ps).abs() <= margin
                    || (pp - pi).abs() <= margin
                {
                    ok[y * w + x] = false;
                }
            }
        }
    }

    if cfg.weights.pixel > 0.0 && matches!(cfg.pixel, PixelLossKind::CrossEntropy) {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    if g.get(ch, y, x) == 1.0 && (p.get(ch, y, x) - CE_CLAMP_FLOOR).abs() <= margin {
                        ok[y * w + x] = false;
                    }
                }
            }
        }
    }

    ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_setup(seed: u64) -> (LogitGrid, LabelMask, ClassSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = ClassSet::eye(false);
        let (c, h, w) = (4usize, 8usize, 8usize);
        let logits: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mask: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..4)).collect();
        (
            LogitGrid::new(c, h, w, logits).unwrap(),
            LabelMask::new(h, w, mask, &classes).unwrap(),
            classes,
        )
    }

    #[test]
    fn near_perfect_prediction_has_tiny_pixel_and_multiscale_terms() {
        let classes = ClassSet::eye(false);
        let mask = LabelMask::new(4, 4, vec![0, 1, 1, 0, 1, 2, 2, 1, 1, 2, 3, 1, 0, 1, 1, 0], &classes).unwrap();
        let g1 = one_hot(&mask, &classes).unwrap();
        let mut data = vec![0.0; 4 * 16];
        for c in 0..4 {
            for i in 0..16 {
                if g1.channel(c)[i] == 1.0 {
                    data[c * 16 + i] = 20.0;
                }
            }
        }
        let logits = LogitGrid::new(4, 4, 4, data).unwrap();
        let cfg = LossConfig::default();
        let b = total_loss(&logits, &mask, &classes, &cfg).unwrap();
        // Multi-scale and pixel terms vanish; the constraint term keeps
        // its hard-label floor (one unit per iris/pupil pixel, mean-reduced).
        assert!(b.multiscale < 1e-6);
        assert!(b.pixel < 1e-6);
        let floor = (mask.class_area(2) + mask.class_area(3)) as f64 / 16.0;
        assert!((b.constraint - floor).abs() < 1e-6);
    }

    #[test]
    fn pixel_only_weights_reduce_to_pixel_loss() {
        let (logits, mask, classes) = random_setup(1);
        let cfg = LossConfig {
            weights: LossWeights::new(0.0, 0.0, 1.0).unwrap(),
            ..LossConfig::default()
        };
        let b = total_loss(&logits, &mask, &classes, &cfg).unwrap();
        assert_eq!(b.total, b.pixel);
    }

    #[test]
    fn total_is_the_weighted_sum_of_terms() {
        let (logits, mask, classes) = random_setup(2);
        let cfg = LossConfig {
            weights: LossWeights::new(0.7, 1.3, 2.1).unwrap(),
            ..LossConfig::default()
        };
        let b = total_loss(&logits, &mask, &classes, &cfg).unwrap();
        let expected = 0.7 * b.multiscale + 1.3 * b.constraint + 2.1 * b.pixel;
        assert!((b.total - expected).abs() < 1e-9);
    }

    #[test]
    fn doubling_weights_doubles_value_and_gradient() {
        let (logits, mask, classes) = random_setup(3);
        let cfg1 = LossConfig::default();
        let cfg2 = LossConfig {
            weights: LossWeights::new(2.0, 2.0, 2.0).unwrap(),
            ..LossConfig::default()
        };
        let b1 = total_loss(&logits, &mask, &classes, &cfg1).unwrap();
        let b2 = total_loss(&logits, &mask, &classes, &cfg2).unwrap();
        assert!((b2.total - 2.0 * b1.total).abs() < 1e-12);
        for (a, b) in b1.grad.data().iter().zip(b2.grad.data().iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroing_one_weight_removes_exactly_that_term() {
        let (logits, mask, classes) = random_setup(4);
        let full = LossConfig::default();
        let no_constraint = LossConfig {
            weights: LossWeights::new(1.0, 0.0, 1.0).unwrap(),
            ..LossConfig::default()
        };
        let fb = total_loss(&logits, &mask, &classes, &full).unwrap();
        let nb = total_loss(&logits, &mask, &classes, &no_constraint).unwrap();
        assert!((fb.total - nb.total - fb.constraint).abs() < 1e-12);
        assert_eq!(fb.multiscale, nb.multiscale);
        assert_eq!(fb.pixel, nb.pixel);
    }

    #[test]
    fn weights_reject_negative_and_all_zero() {
        assert!(LossWeights::new(-1.0, 0.0, 1.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 0.5).is_ok());
    }

    #[test]
    fn quadratic_gradient_check_sanity() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) * 0.3).collect();
        let analytic = x.clone();
        let report = finite_diff_check_flat(
            |v| Ok(0.5 * v.iter().map(|a| a * a).sum::<f64>()),
            &x,
            &analytic,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "error {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_entry_is_detected() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) * 0.3).collect();
        let mut analytic = x.clone();
        analytic[5] *= 2.0;
        let report = finite_diff_check_flat(
            |v| Ok(0.5 * v.iter().map(|a| a * a).sum::<f64>()),
            &x,
            &analytic,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.5);
        assert_eq!(report.worst_coordinate, Some(5));
    }

    #[test]
    fn finite_diff_check_rejects_bad_step() {
        let x = vec![1.0];
        assert!(finite_diff_check_flat(|_| Ok(0.0), &x, &x, 0.0, None).is_err());
        assert!(finite_diff_check_flat(|_| Ok(0.0), &x, &x, -1.0, None).is_err());
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (logits, mask, classes) = random_setup(100 + seed);
            let cfg = LossConfig {
                schedule: KernelSchedule::new(vec![2, 4]).unwrap(),
                ..LossConfig::default()
            };
            let b = total_loss(&logits, &mask, &classes, &cfg).unwrap();
            let p = normalize(&logits);
            let g1 = one_hot(&mask, &classes).unwrap();
            let mask_px = smooth_pixel_mask(&p, &g1, &cfg, 1e-3);
            let report = finite_diff_check(
                |z| Ok(total_loss(z, &mask, &classes, &cfg)?.total),
                &logits,
                &b.grad,
                1e-5,
                Some(&mask_px),
            )
            .unwrap();
            assert!(report.checked > 0);
            assert!(
                report.max_rel_error < 1e-4,
                "seed {seed}: max relative error {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn probability_path_matches_logit_path_values() {
        let (logits, mask, classes) = random_setup(7);
        let cfg = LossConfig::default();
        let via_logits = total_loss(&logits, &mask, &classes, &cfg).unwrap();
        let via_probs = total_loss_on_probs(&normalize(&logits), &mask, &classes, &cfg).unwrap();
        assert!((via_logits.total - via_probs.total).abs() < 1e-12);
        assert!((via_logits.multiscale - via_probs.multiscale).abs() < 1e-12);
    }
}
