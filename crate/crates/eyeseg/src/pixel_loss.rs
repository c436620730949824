//! Pixel-level baseline losses: multi-class cross-entropy and soft Dice,
//! both with analytic gradients with respect to the probability map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, ProbMap};

/// Floor applied to probabilities before the cross-entropy log. Part of
/// the loss definition: values below the floor contribute a constant
/// term and zero gradient.
pub const CE_CLAMP_FLOOR: f64 = 1e-7;

/// Default smoothing epsilon for the soft Dice loss.
pub const DICE_DEFAULT_EPS: f64 = 1e-6;

/// Which pixel-level loss the composite uses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PixelLossKind {
    #[default]
    CrossEntropy,
    SoftDice {
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_eps() -> f64 {
    DICE_DEFAULT_EPS
}

impl PixelLossKind {
    pub fn validate(&self) -> Result<()> {
        if let PixelLossKind::SoftDice { eps } = self {
            if eps.is_nan() || *eps <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "dice smoothing epsilon must be positive, got {eps}"
                )));
            }
        }
        Ok(())
    }
}

/// Value and probability-gradient of a pixel loss.
#[derive(Debug, Clone)]
pub struct PixelLoss {
    pub value: f64,
    /// Gradient with respect to the prediction probabilities (`C x H x W`).
    pub grad: Grid3,
}

fn check_pair(p: &ProbMap, g: &ProbMap) -> Result<()> {
    if !p.same_shape(g) {
        return Err(Error::ShapeMismatch {
            expected: p.shape_string(),
            got: g.shape_string(),
        });
    }
    // The ground truth must be one-hot: exactly one channel 1, rest 0.
    for y in 0..g.height() {
        for x in 0..g.width() {
            let mut ones = 0usize;
            for c in 0..g.channels() {
                let v = g.get(c, y, x);
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::NotOneHot { y, x });
                }
            }
            if ones != 1 {
                return Err(Error::NotOneHot { y, x });
            }
        }
    }
    Ok(())
}

/// Mean negative log-probability of the true class.
///
/// `L = -(1/(H*W)) * sum_pixels log(clamp(p[true], 1e-7, 1))`. The
/// gradient is `-1/(H*W * p[true])` on the true-class channel (zero when
/// the probability sits below the clamp floor) and zero elsewhere.
pub fn cross_entropy(p: &ProbMap, g: &ProbMap) -> Result<PixelLoss> {
    check_pair(p, g)?;
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let norm = 1.0 / (h * w) as f64;
    let mut value = 0.0;
    let mut grad = Grid3::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                if g.get(ch, y, x) == 1.0 {
                    let raw = p.get(ch, y, x);
                    let q = raw.clamp(CE_CLAMP_FLOOR, 1.0);
                    value -= q.ln() * norm;
                    if raw >= CE_CLAMP_FLOOR {
                        grad.set(ch, y, x, -norm / q);
                    }
                    break;
                }
            }
        }
    }
    Ok(PixelLoss { value, grad })
}

/// Soft Dice loss: `1 - mean_c (2*sum(p_c*g_c) + eps) / (sum p_c + sum g_c + eps)`.
///
/// `include_background` controls whether channel 0 enters the class mean
/// (it does by default).
pub fn dice_loss(p: &ProbMap, g: &ProbMap, eps: f64, include_background: bool) -> Result<PixelLoss> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "dice smoothing epsilon must be positive, got {eps}"
        )));
    }
    check_pair(p, g)?;
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let first = if include_background { 0 } else { 1 };
    if first >= c {
        return Err(Error::InvalidConfig("no classes left for the dice mean".into()));
    }
    let n_classes = (c - first) as f64;
    let mut grad = Grid3::zeros(c, h, w);
    let mut mean_dice = 0.0;
    for ch in first..c {
        let mut inter = 0.0;
        let mut p_sum = 0.0;
        let mut g_sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let pv = p.get(ch, y, x);
                let gv = g.get(ch, y, x);
                inter += pv * gv;
                p_sum += pv;
                g_sum += gv;
            }
        }
        let num = 2.0 * inter + eps;
        let den = p_sum + g_sum + eps;
        mean_dice += num / den / n_classes;
        // d/dp of num/den by the quotient rule; the loss negates it.
        for y in 0..h {
            for x in 0..w {
                let gv = g.get(ch, y, x);
                let d = (2.0 * gv * den - num) / (den * den);
                grad.set(ch, y, x, -d / n_classes);
            }
        }
    }
    Ok(PixelLoss { value: 1.0 - mean_dice, grad })
}
