//! Core grid types: class sets, label masks, probability maps, and
//! logit grids, plus the conversions between them.
//!
//! Grids are fixed-rank: `C x H x W` for per-class data (channel-major,
//! row-major within a channel) and `H x W` for masks and scalar fields.
//! All types are immutable after construction and every constructor
//! validates its invariants, so downstream numeric code can index
//! without re-checking.

use crate::error::{Error, Result};

/// Tolerance for the per-pixel channel sum of a probability map.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// One entry of a [`ClassSet`]: display name and mask-preview color.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDef {
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered set of segmentation classes.
///
/// Index 0 is always background; sclera, iris, and pupil occupy fixed
/// indices 1..=3 because the region constraints reference them. The
/// lacrimal caruncle is an optional, unconstrained fifth class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    classes: Vec<ClassDef>,
}

impl ClassSet {
    pub const BACKGROUND: usize = 0;
    pub const SCLERA: usize = 1;
    pub const IRIS: usize = 2;
    pub const PUPIL: usize = 3;
    pub const CARUNCLE: usize = 4;

    /// The standard eye class set. `caruncle` adds the optional fifth class.
    pub fn eye(caruncle: bool) -> Self {
        let mut classes = vec![
            ClassDef { name: "background".into(), color: [0, 0, 0] },
            ClassDef { name: "sclera".into(), color: [230, 230, 230] },
            ClassDef { name: "iris".into(), color: [70, 110, 180] },
            ClassDef { name: "pupil".into(), color: [20, 20, 20] },
        ];
        if caruncle {
            classes.push(ClassDef { name: "caruncle".into(), color: [200, 90, 90] });
        }
        ClassSet { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index].name
    }

    pub fn color(&self, index: usize) -> [u8; 3] {
        self.classes[index].color
    }

    pub fn has_caruncle(&self) -> bool {
        self.classes.len() > Self::CARUNCLE
    }

    /// Overrides the display color of the class named `name`; returns
    /// `None` when no class has that name.
    pub fn set_color_by_name(&mut self, name: &str, color: [u8; 3]) -> Option<()> {
        let class = self.classes.iter_mut().find(|c| c.name == name)?;
        class.color = color;
        Some(())
    }
}

/// Integer class-index grid (`H x W`). Ground-truth annotations and
/// hard predictions are label masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    /// Builds a mask and checks every value against `classes`.
    pub fn new(height: usize, width: usize, data: Vec<u8>, classes: &ClassSet) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width} = {} values", height * width),
                got: format!("{} values", data.len()),
            });
        }
        let mask = LabelMask { height, width, data };
        mask.validate_classes(classes)?;
        Ok(mask)
    }

    /// Constant-valued mask (class 0 unless stated otherwise).
    pub fn filled(height: usize, width: usize, value: u8, classes: &ClassSet) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], classes)
    }

    pub fn validate_classes(&self, classes: &ClassSet) -> Result<()> {
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.data[y * self.width + x];
                if (v as usize) >= classes.len() {
                    return Err(Error::InvalidLabel { value: v, y, x, classes: classes.len() });
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of pixels carrying class `c`.
    pub fn class_area(&self, c: u8) -> usize {
        self.data.iter().filter(|&&v| v == c).count()
    }
}

/// Unconstrained real-valued grid (`H x W`); carries pooled levels,
/// constraint maps, and other scalar fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width} = {} values", height * width),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Grid2 { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Grid2 { height, width, data: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_shape(&self, other: &Grid2) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Real-valued `C x H x W` volume; gradients and pooled stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Grid3 { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels}x{height}x{width} = {} values", channels * height * width),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Grid3 { channels, height, width, data })
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn add(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Grid3, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }
}

/// Per-class probability grid (`C x H x W`).
///
/// Invariants: every value in `[0, 1]` and each pixel's channel vector
/// sums to 1 within [`PROB_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    grid: Grid3,
}

impl ProbMap {
    /// Validating constructor.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let map = ProbMap { grid: Grid3::from_vec(channels, height, width, data)? };
        map.validate()?;
        Ok(map)
    }

    /// Wraps raw values without range/sum validation.
    ///
    /// Intended for perturbation studies (finite-difference probes must
    /// nudge single entries, which briefly breaks the sum invariant) and
    /// for internal constructors whose output is valid by construction.
    pub fn from_raw_unchecked(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(ProbMap { grid: Grid3::from_vec(channels, height, width, data)? })
    }

    /// Checks the range and per-pixel sum invariants.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = self.grid.get(ch, y, x);
                    if !v.is_finite() {
                        return Err(Error::NonFinite { what: "probability map", value: v, channel: ch, y, x });
                    }
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::ProbabilityRange { value: v, channel: ch, y, x });
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let sum: f64 = (0..c).map(|ch| self.grid.get(ch, y, x)).sum();
                if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                    return Err(Error::ProbabilitySum { y, x, sum, tolerance: PROB_SUM_TOLERANCE });
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.grid.channels()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.grid.get(c, y, x)
    }

    pub fn data(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.grid.channel(c)
    }

    /// Copies channel `c` into a standalone grid.
    pub fn channel_grid(&self, c: usize) -> Grid2 {
        Grid2 {
            height: self.height(),
            width: self.width(),
            data: self.channel(c).to_vec(),
        }
    }

    pub fn same_shape(&self, other: &ProbMap) -> bool {
        self.channels() == other.channels()
            && self.height() == other.height()
            && self.width() == other.width()
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.channels(), self.height(), self.width())
    }
}

/// Unbounded real `C x H x W` grid of pre-normalization model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    grid: Grid3,
}

impl LogitGrid {
    /// Validating constructor: rejects non-finite values, reporting the
    /// first offending coordinate.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let grid = Grid3::from_vec(channels, height, width, data)?;
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = grid.get(c, y, x);
                    if !v.is_finite() {
                        return Err(Error::NonFinite { what: "logit grid", value: v, channel: c, y, x });
                    }
                }
            }
        }
        Ok(LogitGrid { grid })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        LogitGrid { grid: Grid3::zeros(channels, height, width) }
    }

    pub fn channels(&self) -> usize {
        self.grid.channels()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.grid.get(c, y, x)
    }

    pub fn data(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.grid.data_mut()
    }
}

/// Per-pixel channel-wise softmax.
///
/// The maximum logit is subtracted per pixel before exponentiation, so
/// the output is shift-invariant and overflow-free. Output satisfies
/// both [`ProbMap`] invariants by construction.
pub fn normalize(logits: &LogitGrid) -> ProbMap {
    let (c, h, w) = (logits.channels(), logits.height(), logits.width());
    let mut data = vec![0.0; c * h * w];
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(logits.get(ch, y, x));
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (logits.get(ch, y, x) - max).exp();
                data[ch * hw + y * w + x] = e;
                sum += e;
            }
            for ch in 0..c {
                data[ch * hw + y * w + x] /= sum;
            }
        }
    }
    ProbMap::from_raw_unchecked(c, h, w, data).expect("shape is consistent by construction")
}

/// One-hot encoding of a label mask: exactly one channel is 1 per pixel.
pub fn one_hot(mask: &LabelMask, classes: &ClassSet) -> Result<ProbMap> {
    mask.validate_classes(classes)?;
    let (c, h, w) = (classes.len(), mask.height(), mask.width());
    let hw = h * w;
    let mut data = vec![0.0; c * hw];
    for y in 0..h {
        for x in 0..w {
            let label = mask.get(y, x) as usize;
            data[label * hw + y * w + x] = 1.0;
        }
    }
    ProbMap::from_raw_unchecked(c, h, w, data)
}

/// Hard prediction: per-pixel index of the maximum channel, ties broken
/// by the lowest class index.
pub fn argmax_mask(p: &ProbMap) -> LabelMask {
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let mut data = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = p.get(0, y, x);
            for ch in 1..c {
                let v = p.get(ch, y, x);
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            data[y * w + x] = best as u8;
        }
    }
    LabelMask { height: h, width: w, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> LogitGrid {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-scale..scale)).collect();
        LogitGrid::new(c, h, w, data).unwrap()
    }

    #[test]
    fn normalize_all_zero_logits_is_uniform() {
        let logits = LogitGrid::zeros(3, 2, 2);
        let p = normalize(&logits);
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    assert!((p.get(c, y, x) - 1.0 / 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalize_dominant_logit_approaches_one_hot() {
        let logits = LogitGrid::new(3, 1, 1, vec![0.0, 0.0, 50.0]).unwrap();
        let p = normalize(&logits);
        assert!(p.get(0, 0, 0) < 1e-20);
        assert!(p.get(1, 0, 0) < 1e-20);
        assert!(p.get(2, 0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn normalize_output_channel_sums_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = random_logits(&mut rng, 3, 4, 4, 5.0);
        let p = normalize(&logits);
        p.validate().unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let sum: f64 = (0..3).map(|c| p.get(c, y, x)).sum();
                assert!((sum - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn normalize_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let logits = random_logits(&mut rng, 4, 3, 5, 3.0);
            let shift = rng.gen_range(-10.0..10.0);
            let shifted = LogitGrid::new(
                4,
                3,
                5,
                logits.data().iter().map(|v| v + shift).collect(),
            )
            .unwrap();
            let a = normalize(&logits);
            let b = normalize(&shifted);
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn logit_grid_rejects_non_finite_with_coordinate() {
        let mut data = vec![0.0; 3 * 2 * 2];
        data[6] = f64::NAN; // channel 1, y 1, x 0
        let err = LogitGrid::new(3, 2, 2, data).unwrap_err();
        match err {
            Error::NonFinite { channel, y, x, .. } => {
                assert_eq!((channel, y, x), (1, 1, 0));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn one_hot_single_pixel() {
        let classes = ClassSet::eye(false);
        let mask = LabelMask::new(1, 1, vec![2], &classes).unwrap();
        let p = one_hot(&mask, &classes).unwrap();
        assert_eq!(p.channels(), 4);
        assert_eq!(
            (p.get(0, 0, 0), p.get(1, 0, 0), p.get(2, 0, 0), p.get(3, 0, 0)),
            (0.0, 0.0, 1.0, 0.0)
        );
    }

    #[test]
    fn one_hot_all_background() {
        let classes = ClassSet::eye(false);
        let mask = LabelMask::filled(3, 3, 0, &classes).unwrap();
        let p = one_hot(&mask, &classes).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(p.get(0, y, x), 1.0);
            }
        }
        p.validate().unwrap();
    }

    #[test]
    fn one_hot_rejects_out_of_range_label() {
        let classes = ClassSet::eye(false);
        let err = LabelMask::new(1, 2, vec![0, 9], &classes).unwrap_err();
        match err {
            Error::InvalidLabel { value, y, x, .. } => assert_eq!((value, y, x), (9, 0, 1)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn one_hot_then_argmax_is_identity() {
        let classes = ClassSet::eye(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
            let data: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..5)).collect();
            let mask = LabelMask::new(h, w, data, &classes).unwrap();
            let round = argmax_mask(&one_hot(&mask, &classes).unwrap());
            assert_eq!(round, mask);
        }
    }

    #[test]
    fn argmax_uniform_pixel_ties_to_class_zero() {
        let p = ProbMap::new(3, 1, 1, vec![1.0 / 3.0; 3]).unwrap();
        let mask = argmax_mask(&p);
        assert_eq!(mask.get(0, 0), 0);
    }

    #[test]
    fn argmax_survives_small_perturbation_of_one_hot() {
        // Exhaustive over all 2x2 masks with 3 classes, mixing the one-hot
        // encoding with an arbitrary distribution at weight eps < 0.5.
        let classes_small = 3usize;
        let eps_values = [0.1, 0.25, 0.39];
        let mixers: [[f64; 3]; 3] = [
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.2, 0.3, 0.5],
        ];
        for mask_code in 0..classes_small.pow(4) {
            let mut code = mask_code;
            let mut labels = [0u8; 4];
            for l in labels.iter_mut() {
                *l = (code % classes_small) as u8;
                code /= classes_small;
            }
            for &eps in &eps_values {
                for q in &mixers {
                    let mut data = vec![0.0; 3 * 4];
                    for (i, &label) in labels.iter().enumerate() {
                        let (y, x) = (i / 2, i % 2);
                        for c in 0..3 {
                            let onehot = if c == label as usize { 1.0 } else { 0.0 };
                            data[c * 4 + y * 2 + x] = (1.0 - eps) * onehot + eps * q[c];
                        }
                    }
                    let p = ProbMap::new(3, 2, 2, data).unwrap();
                    let m = argmax_mask(&p);
                    for (i, &label) in labels.iter().enumerate() {
                        assert_eq!(m.get(i / 2, i % 2), label);
                    }
                }
            }
        }
    }

    #[test]
    fn probmap_validation_catches_bad_sum_and_range() {
        assert!(matches!(
            ProbMap::new(2, 1, 1, vec![0.7, 0.7]),
            Err(Error::ProbabilitySum { .. })
        ));
        assert!(matches!(
            ProbMap::new(2, 1, 1, vec![1.3, -0.3]),
            Err(Error::ProbabilityRange { .. })
        ));
    }
}
