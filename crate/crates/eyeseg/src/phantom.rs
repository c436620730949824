//! Deterministic synthetic eye phantoms and corruption operators.
//!
//! A phantom is a layered rasterization of analytic shapes: background,
//! sclera ellipse (the eye opening), optional caruncle disk, iris disk,
//! pupil disk — later layers overwrite earlier ones. A pixel belongs to
//! a shape iff its center `(row + 0.5, col + 0.5)` satisfies the shape's
//! strict inequality, which removes all boundary ambiguity from the
//! pixel-count oracles built on top.
//!
//! Because the generator knows the geometry, it can emit exact binary
//! region-membership grids (the iris disk including pixels later
//! overwritten by the pupil, the sclera region excluding the iris disk,
//! and so on) and exact violation areas. Those are the reference
//! quantities the constraint maps are tested against; corruption
//! operators return the analytically expected change in them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ClassSet, Grid2, LabelMask};
use crate::seeds;
use rand::seq::SliceRandom;
use rand::Rng;

/// Declarative phantom description; all lengths in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Eye-opening (sclera) ellipse center, (row, col).
    pub sclera_center: (f64, f64),
    /// Ellipse semi-axes, (vertical, horizontal).
    pub sclera_axes: (f64, f64),
    /// Iris circle center, (row, col); the pupil is concentric with it.
    pub iris_center: (f64, f64),
    pub iris_radius: f64,
    /// Pupil radius as a fraction of the iris radius, in (0, 1).
    pub pupil_fraction: f64,
    /// Adds a small caruncle disk tangent to the ellipse's left extreme.
    pub caruncle: bool,
    /// Seed consumed by stochastic corruption operators.
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 64,
            width: 64,
            sclera_center: (32.0, 32.0),
            sclera_axes: (18.0, 26.0),
            iris_center: (32.0, 32.0),
            iris_radius: 10.0,
            pupil_fraction: 0.5,
            caruncle: false,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Demo-scale phantom matching the working resolution of the
    /// mask pipeline (320 rows by 480 columns).
    pub fn demo() -> Self {
        PhantomSpec {
            height: 320,
            width: 480,
            sclera_center: (160.0, 240.0),
            sclera_axes: (90.0, 150.0),
            iris_center: (160.0, 240.0),
            iris_radius: 60.0,
            pupil_fraction: 0.45,
            caruncle: false,
            seed: 0,
        }
    }
}

/// Concrete shape parameters of a (possibly corrupted) phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub sclera_center: (f64, f64),
    pub sclera_axes: (f64, f64),
    pub iris_center: (f64, f64),
    pub iris_radius: f64,
    pub pupil_center: (f64, f64),
    pub pupil_radius: f64,
    /// Caruncle disk center and radius, when enabled.
    pub caruncle: Option<((f64, f64), f64)>,
}

impl Geometry {
    fn center_of(y: usize, x: usize) -> (f64, f64) {
        (y as f64 + 0.5, x as f64 + 0.5)
    }

    pub fn in_eye_opening(&self, y: usize, x: usize) -> bool {
        let (cy, cx) = Self::center_of(y, x);
        let dy = (cy - self.sclera_center.0) / self.sclera_axes.0;
        let dx = (cx - self.sclera_center.1) / self.sclera_axes.1;
        dy * dy + dx * dx < 1.0
    }

    pub fn in_iris(&self, y: usize, x: usize) -> bool {
        let (cy, cx) = Self::center_of(y, x);
        let dy = cy - self.iris_center.0;
        let dx = cx - self.iris_center.1;
        dy * dy + dx * dx < self.iris_radius * self.iris_radius
    }

    pub fn in_pupil(&self, y: usize, x: usize) -> bool {
        let (cy, cx) = Self::center_of(y, x);
        let dy = cy - self.pupil_center.0;
        let dx = cx - self.pupil_center.1;
        dy * dy + dx * dx < self.pupil_radius * self.pupil_radius
    }

    pub fn in_caruncle(&self, y: usize, x: usize) -> bool {
        match self.caruncle {
            None => false,
            Some(((ccy, ccx), r)) => {
                let (cy, cx) = Self::center_of(y, x);
                let dy = cy - ccy;
                let dx = cx - ccx;
                dy * dy + dx * dx < r * r
            }
        }
    }

    /// Sclera-region membership: inside the eye opening but outside the
    /// iris disk (the region the sclera label would occupy in the
    /// uncorrupted layering).
    pub fn in_sclera_region(&self, y: usize, x: usize) -> bool {
        self.in_eye_opening(y, x) && !self.in_iris(y, x)
    }

    /// Layered rasterization into a label mask.
    pub fn rasterize(&self, classes: &ClassSet) -> Result<LabelMask> {
        let (h, w) = (self.height, self.width);
        let mut data = vec![ClassSet::BACKGROUND as u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if self.in_eye_opening(y, x) {
                    data[i] = ClassSet::SCLERA as u8;
                }
                if self.in_caruncle(y, x) {
                    data[i] = ClassSet::CARUNCLE as u8;
                }
                if self.in_iris(y, x) {
                    data[i] = ClassSet::IRIS as u8;
                }
                if self.in_pupil(y, x) {
                    data[i] = ClassSet::PUPIL as u8;
                }
            }
        }
        LabelMask::new(h, w, data, classes)
    }

    /// Exact binary membership grids of the four geometric regions.
    pub fn memberships(&self) -> MembershipGrids {
        let (h, w) = (self.height, self.width);
        let mut grids = MembershipGrids {
            sclera_region: Grid2::zeros(h, w),
            eye_opening: Grid2::zeros(h, w),
            iris_disk: Grid2::zeros(h, w),
            pupil_disk: Grid2::zeros(h, w),
        };
        for y in 0..h {
            for x in 0..w {
                if self.in_eye_opening(y, x) {
                    grids.eye_opening.set(y, x, 1.0);
                }
                if self.in_sclera_region(y, x) {
                    grids.sclera_region.set(y, x, 1.0);
                }
                if self.in_iris(y, x) {
                    grids.iris_disk.set(y, x, 1.0);
                }
                if self.in_pupil(y, x) {
                    grids.pupil_disk.set(y, x, 1.0);
                }
            }
        }
        grids
    }

    /// Exact geometric violation pixel counts: sclera/pupil overlap,
    /// iris outside the eye opening, and pupil protruding past the iris
    /// disk.
    pub fn violation_areas(&self) -> GeometricViolations {
        let mut v = GeometricViolations::default();
        for y in 0..self.height {
            for x in 0..self.width {
                let pupil = self.in_pupil(y, x);
                if pupil && self.in_sclera_region(y, x) {
                    v.exclusion += 1;
                }
                if self.in_iris(y, x) && !self.in_eye_opening(y, x) {
                    v.sclera_iris += 1;
                }
                if pupil && !self.in_iris(y, x) {
                    v.iris_pupil += 1;
                }
            }
        }
        v
    }

    pub fn pupil_area(&self) -> usize {
        let mut n = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                n += self.in_pupil(y, x) as usize;
            }
        }
        n
    }

    fn disk_in_bounds(&self, center: (f64, f64), radius: f64) -> bool {
        center.0 - radius >= 0.0
            && center.0 + radius <= self.height as f64
            && center.1 - radius >= 0.0
            && center.1 + radius <= self.width as f64
    }
}

/// Binary membership grids of the geometric regions, as real grids so
/// they feed straight into the constraint-map operations.
#[derive(Debug, Clone)]
pub struct MembershipGrids {
    /// Eye opening minus the iris disk.
    pub sclera_region: Grid2,
    /// The full ellipse.
    pub eye_opening: Grid2,
    /// The iris disk, including pixels later overwritten by the pupil.
    pub iris_disk: Grid2,
    pub pupil_disk: Grid2,
}

/// Geometric violation pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GeometricViolations {
    pub exclusion: usize,
    pub sclera_iris: usize,
    pub iris_pupil: usize,
}

/// Change in geometric violation counts caused by a corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ViolationDelta {
    pub exclusion: i64,
    pub sclera_iris: i64,
    pub iris_pupil: i64,
}

impl ViolationDelta {
    fn between(before: GeometricViolations, after: GeometricViolations) -> Self {
        ViolationDelta {
            exclusion: after.exclusion as i64 - before.exclusion as i64,
            sclera_iris: after.sclera_iris as i64 - before.sclera_iris as i64,
            iris_pupil: after.iris_pupil as i64 - before.iris_pupil as i64,
        }
    }
}

/// A rasterized phantom together with the geometry it came from.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub mask: LabelMask,
    pub geometry: Geometry,
    pub classes: ClassSet,
    pub seed: u64,
}

/// Validates the `PhantomSpec` invariants and rasterizes the phantom.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::InvalidGeometry { condition: "image dimensions are positive".into() });
    }
    if !(spec.sclera_axes.0 > 0.0 && spec.sclera_axes.1 > 0.0 && spec.iris_radius > 0.0) {
        return Err(Error::InvalidGeometry { condition: "axes and radii are positive".into() });
    }
    if !(spec.pupil_fraction > 0.0 && spec.pupil_fraction < 1.0) {
        return Err(Error::InvalidGeometry {
            condition: format!("pupil radius < iris radius (fraction {}, must be in (0,1))", spec.pupil_fraction),
        });
    }
    // Ellipse within image bounds.
    if spec.sclera_center.0 - spec.sclera_axes.0 < 0.0
        || spec.sclera_center.0 + spec.sclera_axes.0 > spec.height as f64
        || spec.sclera_center.1 - spec.sclera_axes.1 < 0.0
        || spec.sclera_center.1 + spec.sclera_axes.1 > spec.width as f64
    {
        return Err(Error::InvalidGeometry { condition: "sclera ellipse within image bounds".into() });
    }
    // Iris circle inside the ellipse (conservative per-axis bound).
    let dy = (spec.iris_center.0 - spec.sclera_center.0).abs() + spec.iris_radius;
    let dx = (spec.iris_center.1 - spec.sclera_center.1).abs() + spec.iris_radius;
    if (dy / spec.sclera_axes.0).powi(2) + (dx / spec.sclera_axes.1).powi(2) > 1.0 {
        return Err(Error::InvalidGeometry { condition: "iris circle inside sclera ellipse".into() });
    }

    let caruncle = if spec.caruncle {
        let r = (spec.sclera_axes.0.min(spec.sclera_axes.1) / 6.0).max(1.5);
        let center = (spec.sclera_center.0, spec.sclera_center.1 - spec.sclera_axes.1 - r);
        Some((center, r))
    } else {
        None
    };

    let geometry = Geometry {
        height: spec.height,
        width: spec.width,
        sclera_center: spec.sclera_center,
        sclera_axes: spec.sclera_axes,
        iris_center: spec.iris_center,
        iris_radius: spec.iris_radius,
        pupil_center: spec.iris_center,
        pupil_radius: spec.pupil_fraction * spec.iris_radius,
        caruncle,
    };
    if let Some((center, r)) = caruncle {
        if !geometry.disk_in_bounds(center, r) {
            return Err(Error::InvalidGeometry { condition: "caruncle disk within image bounds".into() });
        }
    }
    let classes = ClassSet::eye(spec.caruncle);
    let mask = geometry.rasterize(&classes)?;
    Ok(Phantom { mask, geometry, classes, seed: spec.seed })
}

/// Geometric or label-space edits that inject known violations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "op")]
pub enum CorruptionOp {
    /// Grows the pupil radius by `r` pixels.
    DilatePupil { r: f64 },
    /// Moves the pupil center by `(dy, dx)` pixels.
    TranslatePupil { dy: f64, dx: f64 },
    /// Translates the pupil rightward until it overlaps at least `area`
    /// sclera-region pixels.
    ScleraPupilOverlap { area: usize },
    /// Reassigns exactly `round(rate * H * W)` pixels to uniformly
    /// random other classes.
    LabelNoise { rate: f64 },
}

/// A corrupted phantom plus, for the geometric operators, the exact
/// expected change in geometric violation counts. Label noise edits
/// labels rather than shapes, so it carries no geometric delta.
#[derive(Debug, Clone)]
pub struct Corrupted {
    pub phantom: Phantom,
    pub delta: Option<ViolationDelta>,
}

/// Applies a corruption operator. Geometric edits re-rasterize from the
/// updated geometry; the result is deterministic in `(phantom, op, seed)`.
pub fn corrupt(phantom: &Phantom, op: CorruptionOp, seed: u64) -> Result<Corrupted> {
    let before = phantom.geometry.violation_areas();
    match op {
        CorruptionOp::DilatePupil { r } => {
            if r < 0.0 {
                return Err(Error::InvalidConfig("dilation radius must be >= 0".into()));
            }
            let mut geometry = phantom.geometry.clone();
            geometry.pupil_radius += r;
            if !geometry.disk_in_bounds(geometry.pupil_center, geometry.pupil_radius) {
                return Err(Error::OutOfBounds { shape: "pupil" });
            }
            finish_geometric(phantom, geometry, before)
        }
        CorruptionOp::TranslatePupil { dy, dx } => {
            let mut geometry = phantom.geometry.clone();
            geometry.pupil_center.0 += dy;
            geometry.pupil_center.1 += dx;
            if !geometry.disk_in_bounds(geometry.pupil_center, geometry.pupil_radius) {
                return Err(Error::OutOfBounds { shape: "pupil" });
            }
            finish_geometric(phantom, geometry, before)
        }
        CorruptionOp::ScleraPupilOverlap { area } => {
            let mut geometry = phantom.geometry.clone();
            loop {
                if geometry.violation_areas().exclusion >= area {
                    break;
                }
                geometry.pupil_center.1 += 1.0;
                if !geometry.disk_in_bounds(geometry.pupil_center, geometry.pupil_radius) {
                    return Err(Error::OutOfBounds { shape: "pupil" });
                }
            }
            finish_geometric(phantom, geometry, before)
        }
        CorruptionOp::LabelNoise { rate } => {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!("noise rate must lie in [0, 1], got {rate}")));
            }
            let (h, w) = (phantom.mask.height(), phantom.mask.width());
            let n_classes = phantom.classes.len() as u8;
            let k = (rate * (h * w) as f64).round() as usize;
            let mut rng = seeds::rng(seed);
            let mut indices: Vec<usize> = (0..h * w).collect();
            indices.shuffle(&mut rng);
            let mut data = phantom.mask.data().to_vec();
            for &i in indices.iter().take(k) {
                let old = data[i];
                let mut new = rng.gen_range(0..n_classes - 1);
                if new >= old {
                    new += 1;
                }
                data[i] = new;
            }
            let mask = LabelMask::new(h, w, data, &phantom.classes)?;
            Ok(Corrupted {
                phantom: Phantom {
                    mask,
                    geometry: phantom.geometry.clone(),
                    classes: phantom.classes.clone(),
                    seed,
                },
                delta: None,
            })
        }
    }
}

fn finish_geometric(
    phantom: &Phantom,
    geometry: Geometry,
    before: GeometricViolations,
) -> Result<Corrupted> {
    let after = geometry.violation_areas();
    let mask = geometry.rasterize(&phantom.classes)?;
    Ok(Corrupted {
        phantom: Phantom {
            mask,
            geometry,
            classes: phantom.classes.clone(),
            seed: phantom.seed,
        },
        delta: Some(ViolationDelta::between(before, after)),
    })
}

/// Draws a random valid 64x64 phantom spec. Used by tests and the
/// acceptance suite to cover a range of geometries.
pub fn random_spec(seed: u64) -> PhantomSpec {
    let mut rng = seeds::rng(seed);
    loop {
        let spec = PhantomSpec {
            height: 64,
            width: 64,
            sclera_center: (32.0 + rng.gen_range(-3.0..3.0), 32.0 + rng.gen_range(-3.0..3.0)),
            sclera_axes: (rng.gen_range(14.0..19.0), rng.gen_range(21.0..26.0)),
            iris_center: (32.0 + rng.gen_range(-2.0..2.0), 32.0 + rng.gen_range(-2.0..2.0)),
            iris_radius: rng.gen_range(8.0..11.0),
            pupil_fraction: rng.gen_range(0.4..0.7),
            caruncle: false,
            seed,
        };
        if generate(&spec).is_ok() {
            return spec;
        }
    }
}
