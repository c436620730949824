//! File formats and run configuration.
//!
//! - Label masks: 8-bit single-channel PNG, pixel value = class index.
//! - Probability/logit grids: a flat binary format with a 16-byte header
//!   (`PMAP` magic, then channels/height/width as little-endian u32)
//!   followed by `C*H*W` little-endian f32 values, channel-major,
//!   row-major within a channel.
//! - Heatmaps: min-max scaled 8-bit grayscale PNG plus a `.bounds.txt`
//!   sidecar recording the scaling range.
//! - Run configuration: a TOML document parsed strictly (unknown keys
//!   are fatal).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composite::LossConfig;
use crate::error::{Error, Result};
use crate::grid::{ClassSet, Grid2, LabelMask};
use crate::phantom::{CorruptionOp, PhantomSpec};

/// Magic bytes of the probability-map format.
pub const PROBMAP_MAGIC: [u8; 4] = *b"PMAP";

/// Reads an 8-bit single-channel PNG mask and validates every pixel
/// against `classes`.
pub fn read_mask(path: &Path, classes: &ClassSet) -> Result<LabelMask> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Validation(format!(
                "{}: mask must be an 8-bit single-channel image, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if h == 0 || w == 0 {
        return Err(Error::Validation(format!("{}: mask has zero dimension", path.display())));
    }
    LabelMask::new(h, w, gray.into_raw(), classes)
}

/// Writes a mask as an 8-bit single-channel PNG; the round trip through
/// [`read_mask`] is bit-exact.
pub fn write_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().to_vec(),
    )
    .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes an RGB preview of a mask using the class palette.
pub fn write_color_mask(mask: &LabelMask, classes: &ClassSet, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let color = classes.color(mask.get(y, x) as usize);
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes a `C x H x W` grid of values in the binary probability-map
/// format (values are stored as f32).
pub fn write_probmap(channels: usize, height: usize, width: usize, data: &[f64], path: &Path) -> Result<()> {
    if data.len() != channels * height * width {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", channels * height * width),
            got: format!("{}", data.len()),
        });
    }
    let mut buf = Vec::with_capacity(16 + data.len() * 4);
    buf.extend_from_slice(&PROBMAP_MAGIC);
    buf.extend_from_slice(&(channels as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a probability-map file back as `(channels, height, width, data)`.
pub fn read_probmap(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)?;
    if header[0..4] != PROBMAP_MAGIC {
        return Err(Error::Validation(format!(
            "{}: not a probability-map file (bad magic)",
            path.display()
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(4), dim(8), dim(12));
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Validation(format!("{}: zero dimension in header", path.display())));
    }
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != c * h * w * 4 {
        return Err(Error::ShapeMismatch {
            expected: format!("{} payload bytes", c * h * w * 4),
            got: format!("{}", raw.len()),
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((c, h, w, data))
}

/// Exports a non-negative grid as a min-max scaled grayscale PNG.
///
/// Degenerate scaling is pinned: an all-zero grid exports all-black, any
/// other constant grid exports mid-gray (128). The scaling bounds are
/// recorded in a `<path>.bounds.txt` sidecar.
pub fn export_heatmap(grid: &Grid2, path: &Path) -> Result<()> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in grid.data() {
        if !v.is_finite() {
            return Err(Error::Validation("heatmap values must be finite".into()));
        }
        min = min.min(v);
        max = max.max(v);
    }
    let mut img = image::GrayImage::new(grid.width() as u32, grid.height() as u32);
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            let v = grid.get(y, x);
            let byte = if min == max {
                if min == 0.0 {
                    0
                } else {
                    128
                }
            } else {
                ((v - min) / (max - min) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Luma([byte]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    let sidecar = format!("min={min}\nmax={max}\n");
    let mut side_path = path.as_os_str().to_owned();
    side_path.push(".bounds.txt");
    let mut f = fs::File::create(PathBuf::from(side_path))?;
    f.write_all(sidecar.as_bytes())?;
    Ok(())
}

/// Class-set options: the optional caruncle class and palette overrides
/// by class name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassConfig {
    pub caruncle: bool,
    pub palette: BTreeMap<String, [u8; 3]>,
}

impl ClassConfig {
    pub fn class_set(&self) -> Result<ClassSet> {
        let mut classes = ClassSet::eye(self.caruncle);
        for (name, color) in &self.palette {
            classes.set_color_by_name(name, *color).ok_or_else(|| {
                Error::InvalidConfig(format!("palette names unknown class '{name}'"))
            })?;
        }
        Ok(classes)
    }
}

/// Bootstrap parameters for aggregate reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { resamples: 1000, level: 0.95 }
    }
}

/// Phantom-dataset options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub spec: PhantomSpec,
    /// Number of masks to emit.
    pub count: usize,
    /// Draw a fresh random geometry per mask instead of repeating `spec`.
    pub randomize: bool,
    /// Corruption applied to every mask (seeded per index).
    pub corruption: Option<CorruptionOp>,
    /// Also write RGB previews.
    pub preview: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            spec: PhantomSpec::default(),
            count: 1,
            randomize: false,
            corruption: None,
            preview: false,
        }
    }
}

/// Optimizer settings (the loss configuration lives in `[loss]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSettings {
    pub step_size: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub log_stride: usize,
    pub init_scale: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        let d = crate::optimize::OptimConfig::default();
        OptimSettings {
            step_size: d.step_size,
            max_iters: d.max_iters,
            tolerance: d.tolerance,
            log_stride: d.log_stride,
            init_scale: d.init_scale,
        }
    }
}

impl OptimSettings {
    pub fn to_optim_config(&self, loss: LossConfig, seed: u64) -> crate::optimize::OptimConfig {
        crate::optimize::OptimConfig {
            step_size: self.step_size,
            max_iters: self.max_iters,
            tolerance: self.tolerance,
            loss,
            log_stride: self.log_stride,
            seed,
            init_scale: self.init_scale,
        }
    }
}

/// Top-level run configuration. Parsed strictly: unknown keys anywhere
/// in the document are fatal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Default output directory; subcommand `--out` overrides it.
    pub out: Option<PathBuf>,
    pub classes: ClassConfig,
    pub loss: LossConfig,
    pub bootstrap: BootstrapConfig,
    pub phantom: PhantomConfig,
    pub optimize: OptimSettings,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.bootstrap.resamples < 100 {
            return Err(Error::InvalidConfig("bootstrap.resamples must be >= 100".into()));
        }
        if !(0.0 < self.bootstrap.level && self.bootstrap.level < 1.0) {
            return Err(Error::InvalidConfig("bootstrap.level must lie in (0, 1)".into()));
        }
        if self.phantom.count == 0 {
            return Err(Error::InvalidConfig("phantom.count must be >= 1".into()));
        }
        self.optimize
            .to_optim_config(self.loss.clone(), self.seed)
            .validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec};
    use tempfile::tempdir;

    #[test]
    fn mask_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let phantom = generate(&PhantomSpec::default()).unwrap();
        let path = dir.path().join("mask.png");
        write_mask(&phantom.mask, &path).unwrap();
        let back = read_mask(&path, &phantom.classes).unwrap();
        assert_eq!(back, phantom.mask);
    }

    #[test]
    fn mask_with_unknown_class_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let img = image::GrayImage::from_raw(2, 2, vec![0, 1, 9, 2]).unwrap();
        img.save_with_format(&path, image::ImageFormat::Png).unwrap();
        let err = read_mask(&path, &ClassSet::eye(false)).unwrap_err();
        match err {
            Error::InvalidLabel { value, y, x, .. } => assert_eq!((value, y, x), (9, 1, 0)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mask_read_at_demo_resolution_preserves_dimensions() {
        let dir = tempdir().unwrap();
        let phantom = generate(&PhantomSpec::demo()).unwrap();
        let path = dir.path().join("demo.png");
        write_mask(&phantom.mask, &path).unwrap();
        let back = read_mask(&path, &phantom.classes).unwrap();
        assert_eq!((back.height(), back.width()), (320, 480));
    }

    #[test]
    fn probmap_round_trip_preserves_f32_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.pmap");
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64) / 7.0).collect();
        write_probmap(2, 3, 4, &data, &path).unwrap();
        let (c, h, w, back) = read_probmap(&path).unwrap();
        assert_eq!((c, h, w), (2, 3, 4));
        for (a, b) in data.iter().zip(back.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn probmap_rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pmap");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(read_probmap(&path).is_err());
        let mut buf = Vec::new();
        buf.extend_from_slice(&PROBMAP_MAGIC);
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&[0u8; 4]); // one f32 instead of eight
        fs::write(&path, buf).unwrap();
        assert!(matches!(read_probmap(&path), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn heatmap_degenerate_scaling_rules() {
        let dir = tempdir().unwrap();
        let zero = Grid2::zeros(2, 2);
        let zero_path = dir.path().join("zero.png");
        export_heatmap(&zero, &zero_path).unwrap();
        let img = image::open(&zero_path).unwrap().into_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 0));

        let constant = Grid2::new(2, 2, vec![0.7; 4]).unwrap();
        let const_path = dir.path().join("const.png");
        export_heatmap(&constant, &const_path).unwrap();
        let img = image::open(&const_path).unwrap().into_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 128));
    }

    #[test]
    fn heatmap_endpoints_map_to_black_and_white() {
        let dir = tempdir().unwrap();
        let grid = Grid2::new(1, 2, vec![0.0, 1.0]).unwrap();
        let path = dir.path().join("bw.png");
        export_heatmap(&grid, &path).unwrap();
        let img = image::open(&path).unwrap().into_luma8();
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(1, 0).0[0], 255);
        let sidecar = fs::read_to_string(dir.path().join("bw.png.bounds.txt")).unwrap();
        assert_eq!(sidecar, "min=0\nmax=1\n");
    }

    #[test]
    fn run_config_defaults_and_strict_parsing() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let err = RunConfig::from_toml_str("unknown_key = 1").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        let err = RunConfig::from_toml_str("[loss]\nbogus = 2").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn run_config_round_trips_through_toml() {
        let mut cfg = RunConfig { seed: 7, ..RunConfig::default() };
        cfg.phantom.count = 3;
        cfg.phantom.corruption = Some(CorruptionOp::LabelNoise { rate: 0.1 });
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn run_config_parses_full_document() {
        let text = r#"
seed = 42

[classes]
caruncle = true
[classes.palette]
iris = [10, 20, 30]

[loss]
schedule = [2, 4]
topo_reduction = "sum"
[loss.weights]
multiscale = 0.5
constraint = 2.0
pixel = 1.0
[loss.pixel]
kind = "soft-dice"
eps = 1e-5

[bootstrap]
resamples = 500
level = 0.9

[phantom]
count = 4
randomize = true
[phantom.spec]
height = 48
width = 48
sclera_center = [24.0, 24.0]
sclera_axes = [13.0, 19.0]
iris_center = [24.0, 24.0]
iris_radius = 7.0
pupil_fraction = 0.5
[phantom.corruption]
op = "dilate-pupil"
r = 2.0

[optimize]
step_size = 0.5
max_iters = 100
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(cfg.classes.caruncle);
        let classes = cfg.classes.class_set().unwrap();
        assert_eq!(classes.color(ClassSet::IRIS), [10, 20, 30]);
        assert_eq!(cfg.loss.schedule.kernels(), &[2, 4]);
        assert_eq!(cfg.phantom.count, 4);
        assert!(matches!(cfg.phantom.corruption, Some(CorruptionOp::DilatePupil { .. })));
        assert_eq!(cfg.optimize.max_iters, 100);
    }
}
