//! Rectified exclusion and enclosure maps between the sclera, iris, and
//! pupil channels, and the region-constraint loss built from them.
//!
//! Three pointwise maps are defined:
//!
//! - exclusion: `max(0, min(sclera, pupil))` — sclera and pupil mass at
//!   the same pixel is forbidden;
//! - enclosure (sclera/iris): `max(0, iris - sclera)` — iris mass must
//!   not exceed sclera mass;
//! - enclosure (iris/pupil): `max(0, pupil - iris)`.
//!
//! The loss sums all three maps over pixels. Note that the enclosure
//! maps are evaluated literally on the exclusive per-class channels, so
//! on a one-hot encoding every iris pixel carries `iris - sclera = 1`
//! and every pupil pixel carries `pupil - iris = 1`: the loss acts as a
//! prior that trades off against the pixel loss rather than a quantity
//! that vanishes on hard annotations. For exact, geometry-aware
//! violation accounting on hard masks see [`crate::metrics::violation_count`]
//! and the membership grids in [`crate::phantom`].

use crate::error::{Error, Result};
use crate::grid::{ClassSet, Grid2, Grid3, ProbMap};
use crate::pool::Reduction;

/// The three violation maps, each `H x W` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ConstraintMaps {
    /// Overlap of sclera and pupil mass: `max(0, min(p_s, p_p))`.
    pub exclusion: Grid2,
    /// Iris mass exceeding sclera mass: `max(0, p_i - p_s)`.
    pub sclera_iris: Grid2,
    /// Pupil mass exceeding iris mass: `max(0, p_p - p_i)`.
    pub iris_pupil: Grid2,
}

impl ConstraintMaps {
    /// Sum of all three maps over all pixels.
    pub fn total(&self) -> f64 {
        self.exclusion.sum() + self.sclera_iris.sum() + self.iris_pupil.sum()
    }
}

fn check_same_shape(a: &Grid2, b: &Grid2) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.height(), a.width()),
            got: format!("{}x{}", b.height(), b.width()),
        });
    }
    Ok(())
}

/// Pointwise `max(0, min(a, b))`: the soft overlap of two mutually
/// exclusive regions. Symmetric in its arguments.
pub fn exclusion_map(a: &Grid2, b: &Grid2) -> Result<Grid2> {
    check_same_shape(a, b)?;
    let mut out = Grid2::zeros(a.height(), a.width());
    for y in 0..a.height() {
        for x in 0..a.width() {
            out.set(y, x, a.get(y, x).min(b.get(y, x)).max(0.0));
        }
    }
    Ok(out)
}

/// Pointwise `max(0, inner - outer)`: how much the inner region exceeds
/// the region that should enclose it.
pub fn violation_map(outer: &Grid2, inner: &Grid2) -> Result<Grid2> {
    check_same_shape(outer, inner)?;
    let mut out = Grid2::zeros(outer.height(), outer.width());
    for y in 0..outer.height() {
        for x in 0..outer.width() {
            out.set(y, x, (inner.get(y, x) - outer.get(y, x)).max(0.0));
        }
    }
    Ok(out)
}

/// Value, maps, and prediction-gradient of the region-constraint loss.
#[derive(Debug, Clone)]
pub struct IuLoss {
    pub value: f64,
    pub maps: ConstraintMaps,
    /// Gradient with respect to the prediction probabilities (`C x H x W`).
    /// Only the sclera, iris, and pupil channels receive gradient.
    pub grad: Grid3,
}

/// Region-constraint loss over a probability map.
///
/// Sums the three constraint maps, divided by the pixel count under
/// [`Reduction::Mean`]. Gradient conventions: the subgradient of
/// `max(0, .)` at 0 is 0; `min(p_s, p_p)` routes gradient to the smaller
/// channel, to sclera on a tie.
pub fn iu_loss(p: &ProbMap, reduction: Reduction) -> Result<IuLoss> {
    if p.channels() <= ClassSet::PUPIL {
        return Err(Error::MissingConstraintChannels { channels: p.channels() });
    }
    let (h, w) = (p.height(), p.width());
    let scale = match reduction {
        Reduction::Mean => 1.0 / (h * w) as f64,
        Reduction::Sum => 1.0,
    };
    let mut maps = ConstraintMaps {
        exclusion: Grid2::zeros(h, w),
        sclera_iris: Grid2::zeros(h, w),
        iris_pupil: Grid2::zeros(h, w),
    };
    let mut grad = Grid3::zeros(p.channels(), h, w);
    let mut raw_sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let ps = p.get(ClassSet::SCLERA, y, x);
            let pi = p.get(ClassSet::IRIS, y, x);
            let pp = p.get(ClassSet::PUPIL, y, x);

            let overlap = ps.min(pp).max(0.0);
            maps.exclusion.set(y, x, overlap);
            if overlap > 0.0 {
                raw_sum += overlap;
                if ps <= pp {
                    grad.add(ClassSet::SCLERA, y, x, scale);
                } else {
                    grad.add(ClassSet::PUPIL, y, x, scale);
                }
            }

            let si = (pi - ps).max(0.0);
            maps.sclera_iris.set(y, x, si);
            if si > 0.0 {
                raw_sum += si;
                grad.add(ClassSet::IRIS, y, x, scale);
                grad.add(ClassSet::SCLERA, y, x, -scale);
            }

            let ip = (pp - pi).max(0.0);
            maps.iris_pupil.set(y, x, ip);
            if ip > 0.0 {
                raw_sum += ip;
                grad.add(ClassSet::PUPIL, y, x, scale);
                grad.add(ClassSet::IRIS, y, x, -scale);
            }
        }
    }
    Ok(IuLoss { value: raw_sum * scale, maps, grad })
}
