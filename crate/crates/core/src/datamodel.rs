//! Sample records, dataset-directory ingestion, and the procedural two-domain
//! toy-scene generator.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Data source of a sample. The discriminator label is the index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Synthetic,
    Real,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::Synthetic => 0,
            Domain::Real => 1,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Domain::Synthetic => Domain::Real,
            Domain::Real => Domain::Synthetic,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Synthetic => "synthetic",
            Domain::Real => "real",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "synthetic" => Ok(Domain::Synthetic),
            "real" => Ok(Domain::Real),
            other => Err(Error::Parse(format!("unknown domain `{other}`"))),
        }
    }
}

/// Which planes feed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Rgbd,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth => 1,
            Modality::Rgbd => 4,
        }
    }

    pub fn uses_depth(self) -> bool {
        !matches!(self, Modality::Rgb)
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "rgbd" => Ok(Modality::Rgbd),
            other => Err(Error::Parse(format!("unknown modality `{other}`"))),
        }
    }
}

/// One RGB / depth / label triple.
///
/// `rgb` is `H x W x 3` in `[0, 1]`, `depth` is in meters with `0` marking a
/// hole, and `hole_mask` is true exactly where depth is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    pub rgb: Array3<f32>,
    pub depth: Array2<f32>,
    pub label: Array2<u8>,
    pub hole_mask: Array2<bool>,
}

impl Sample {
    /// Assemble a sample, deriving the hole mask from the depth plane.
    pub fn new(
        id: impl Into<String>,
        domain: Domain,
        rgb: Array3<f32>,
        depth: Array2<f32>,
        label: Array2<u8>,
    ) -> Self {
        let hole_mask = depth.mapv(|d| d == 0.0);
        Self {
            id: id.into(),
            domain,
            rgb,
            depth,
            label,
            hole_mask,
        }
    }

    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }

    pub fn has_holes(&self) -> bool {
        self.hole_mask.iter().any(|&h| h)
    }

    /// Recompute `hole_mask` after the depth plane changed.
    pub fn refresh_hole_mask(&mut self) {
        self.hole_mask = self.depth.mapv(|d| d == 0.0);
    }

    /// Check every structural invariant for a `class_count`-class problem.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let corrupt = |reason: String| Error::CorruptSample {
            id: self.id.clone(),
            reason,
        };
        let (h, w) = self.depth.dim();
        if self.rgb.dim() != (h, w, 3) || self.label.dim() != (h, w) || self.hole_mask.dim() != (h, w) {
            return Err(corrupt(format!(
                "plane sizes differ: rgb {:?}, depth {:?}, label {:?}",
                self.rgb.dim(),
                self.depth.dim(),
                self.label.dim()
            )));
        }
        if self.rgb.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(corrupt("rgb value outside [0, 1]".into()));
        }
        if self.depth.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
            return Err(corrupt("negative or non-finite depth".into()));
        }
        if let Some(&l) = self.label.iter().find(|&&l| l as usize >= class_count) {
            return Err(corrupt(format!("label {l} >= class count {class_count}")));
        }
        if self
            .depth
            .iter()
            .zip(&self.hole_mask)
            .any(|(&d, &m)| m != (d == 0.0))
        {
            return Err(corrupt("hole mask disagrees with depth".into()));
        }
        Ok(())
    }
}

/// Location and interpretation of an on-disk dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub modality: Modality,
    pub class_count: usize,
    pub ignore_index: usize,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, modality: Modality, class_count: usize) -> Self {
        Self {
            root: root.into(),
            modality,
            class_count,
            ignore_index: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.class_count > 256 {
            return Err(Error::Config(format!(
                "class_count must be in 1..=256, got {}",
                self.class_count
            )));
        }
        if self.ignore_index >= self.class_count {
            return Err(Error::Config(format!(
                "ignore_index {} must be < class_count {}",
                self.ignore_index, self.class_count
            )));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.modality.channels()
    }

    fn plane_path(&self, plane: &str, id: &str) -> PathBuf {
        self.root.join(plane).join(format!("{id}.png"))
    }
}

pub const MANIFEST: &str = "manifest.txt";

/// Parse `id<TAB>domain` lines.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, Domain)>> {
    let path = root.join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.clone()),
        _ => Error::Io(e),
    })?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, domain) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse(format!("{}:{}: expected `id<TAB>domain`", path.display(), n + 1)))?;
        entries.push((id.to_string(), domain.parse()?));
    }
    Ok(entries)
}

pub fn write_manifest(root: &Path, entries: &[(String, Domain)]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut f = fs::File::create(root.join(MANIFEST))?;
    for (id, domain) in entries {
        writeln!(f, "{id}\t{domain}")?;
    }
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

/// Load one sample; its domain comes from the manifest.
pub fn load_sample(spec: &DatasetSpec, id: &str) -> Result<Sample> {
    let domain = read_manifest(&spec.root)?
        .into_iter()
        .find(|(m, _)| m == id)
        .map(|(_, d)| d)
        .ok_or_else(|| Error::NotFound(spec.root.join(MANIFEST).join(id)))?;
    load_sample_as(spec, id, domain)
}

fn load_sample_as(spec: &DatasetSpec, id: &str, domain: Domain) -> Result<Sample> {
    let rgb_img = open_image(&spec.plane_path("rgb", id))?.to_rgb8();
    let depth_img = open_image(&spec.plane_path("depth", id))?.to_luma16();
    let label_img = open_image(&spec.plane_path("label", id))?.to_luma8();
    let dims = [rgb_img.dimensions(), depth_img.dimensions(), label_img.dimensions()];
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(Error::CorruptSample {
            id: id.into(),
            reason: format!("image sizes differ: {dims:?}"),
        });
    }
    let (w, h) = (dims[0].0 as usize, dims[0].1 as usize);
    let rgb = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        rgb_img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    });
    let depth = Array2::from_shape_fn((h, w), |(y, x)| {
        depth_img.get_pixel(x as u32, y as u32)[0] as f32 / 1000.0
    });
    let label = Array2::from_shape_fn((h, w), |(y, x)| label_img.get_pixel(x as u32, y as u32)[0]);
    let sample = Sample::new(id, domain, rgb, depth, label);
    sample.validate(spec.class_count)?;
    Ok(sample)
}

/// A dataset directory with its manifest read once.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub entries: Vec<(String, Domain)>,
}

impl Dataset {
    pub fn open(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let entries = read_manifest(&spec.root)?;
        Ok(Self { spec, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let (id, domain) = &self.entries[index];
        load_sample_as(&self.spec, id, *domain)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Write a sample's three planes under `root` (8-bit rgb, 16-bit millimeter
/// depth, 8-bit label).
pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    let (h, w) = sample.depth.dim();
    for plane in ["rgb", "depth", "label"] {
        fs::create_dir_all(root.join(plane))?;
    }
    let rgb = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (sample.rgb[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    rgb.save(root.join("rgb").join(format!("{}.png", sample.id)))?;
    let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let mm = (sample.depth[[y as usize, x as usize]] * 1000.0).round();
        Luma([mm.clamp(0.0, u16::MAX as f32) as u16])
    });
    depth.save(root.join("depth").join(format!("{}.png", sample.id)))?;
    let label: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([sample.label[[y as usize, x as usize]]]));
    label.save(root.join("label").join(format!("{}.png", sample.id)))?;
    Ok(())
}

/// Save a label map as an 8-bit single-channel PNG.
pub fn write_label_png(path: &Path, label: &Array2<u8>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let (h, w) = label.dim();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([label[[y as usize, x as usize]]]));
    img.save(path)?;
    Ok(())
}

pub fn read_label_png(path: &Path) -> Result<Array2<u8>> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0]))
}

/// Default depth normalization range, meters.
pub const DEFAULT_MAX_DEPTH: f32 = 10.0;

/// Network input planes `C x H x W`: rgb channels first, normalized depth last.
pub fn to_network_input(sample: &Sample, modality: Modality, max_depth: f32) -> Result<Array3<f32>> {
    if modality.uses_depth() && sample.has_holes() {
        return Err(Error::HolesNotFilled);
    }
    if !(max_depth > 0.0) {
        return Err(Error::InvalidParam(format!("max depth must be positive, got {max_depth}")));
    }
    let (h, w) = sample.depth.dim();
    let c = modality.channels();
    Ok(Array3::from_shape_fn((c, h, w), |(ch, y, x)| match (modality, ch) {
        (Modality::Rgb, _) | (Modality::Rgbd, 0..=2) => sample.rgb[[y, x, ch]],
        _ => (sample.depth[[y, x]] / max_depth).clamp(0.0, 1.0),
    }))
}

// ---------------------------------------------------------------------------
// Toy scenes

/// Footprint used when a class is drawn as an object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// Where an object class may be placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Resting on the floor region.
    Floor,
    /// Hanging on the wall region.
    Wall,
    Anywhere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub name: String,
    pub color: [f32; 3],
    /// Depth plane range in meters.
    pub depth_range: (f32, f32),
    pub shape: ShapeKind,
    pub placement: Placement,
    /// Object width and height as fractions of the canvas.
    pub size_range: ((f32, f32), (f32, f32)),
}

/// Appearance gap applied to the real domain only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub hue_rotation_deg: f32,
    pub brightness_scale: f32,
    pub noise_sigma: f32,
    pub texture_amplitude: f32,
    /// Relative depth jitter (fraction of the true depth).
    pub depth_noise: f32,
    /// Fraction of pixels that read zero depth.
    pub depth_hole_rate: f32,
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            hue_rotation_deg: 0.0,
            brightness_scale: 1.0,
            noise_sigma: 0.0,
            texture_amplitude: 0.0,
            depth_noise: 0.0,
            depth_hole_rate: 0.0,
        }
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            hue_rotation_deg: 50.0,
            brightness_scale: 0.8,
            noise_sigma: 0.04,
            texture_amplitude: 0.06,
            depth_noise: 0.01,
            depth_hole_rate: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneConfig {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub objects_per_scene: (usize, usize),
    /// One entry per class; index 0 styles unlabeled clutter.
    pub styles: Vec<ClassStyle>,
    pub floor_class: u8,
    pub wall_class: u8,
    /// Probability that an object is unlabeled clutter (class 0).
    pub clutter_probability: f32,
    /// Relative per-object brightness and tint variation.
    pub material_jitter: f32,
    pub shift: DomainShift,
    pub min_class_diversity: usize,
    pub dominance_cap: f32,
    pub seed: u64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        let style = |name: &str, color, depth_range, shape, placement, size_range| ClassStyle {
            name: name.into(),
            color,
            depth_range,
            shape,
            placement,
            size_range,
        };
        Self {
            height: 48,
            width: 48,
            class_count: 6,
            objects_per_scene: (2, 4),
            styles: vec![
                style("clutter", [0.5, 0.5, 0.5], (1.0, 4.0), ShapeKind::Rect, Placement::Anywhere, ((0.1, 0.2), (0.1, 0.2))),
                style("floor", [0.55, 0.42, 0.30], (0.8, 1.2), ShapeKind::Rect, Placement::Floor, ((1.0, 1.0), (1.0, 1.0))),
                style("wall", [0.78, 0.76, 0.70], (4.0, 6.0), ShapeKind::Rect, Placement::Wall, ((1.0, 1.0), (1.0, 1.0))),
                style("table", [0.30, 0.60, 0.30], (2.0, 3.0), ShapeKind::Rect, Placement::Floor, ((0.30, 0.55), (0.15, 0.30))),
                style("vase", [0.25, 0.40, 0.75], (1.2, 2.2), ShapeKind::Ellipse, Placement::Anywhere, ((0.12, 0.25), (0.18, 0.35))),
                style("picture", [0.75, 0.30, 0.55], (3.5, 3.9), ShapeKind::Rect, Placement::Wall, ((0.15, 0.35), (0.12, 0.25))),
            ],
            floor_class: 1,
            wall_class: 2,
            clutter_probability: 0.1,
            material_jitter: 0.12,
            shift: DomainShift::default(),
            min_class_diversity: 3,
            dominance_cap: 0.85,
            seed: 0,
        }
    }
}

/// Upper bound on consecutive rejected layouts.
pub const MAX_REJECTIONS: u32 = 100;

impl ToySceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("canvas {}x{} too small", self.height, self.width));
        }
        if self.styles.len() != self.class_count {
            return bad(format!("{} styles for {} classes", self.styles.len(), self.class_count));
        }
        if self.min_class_diversity < 2 {
            return bad("min_class_diversity must be at least 2".into());
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return bad("objects_per_scene range is inverted".into());
        }
        let (f, w) = (self.floor_class as usize, self.wall_class as usize);
        if f == 0 || w == 0 || f >= self.class_count || w >= self.class_count || f == w {
            return bad("floor and wall must be distinct labeled classes".into());
        }
        let s = &self.shift;
        let finite = [s.hue_rotation_deg, s.brightness_scale, s.noise_sigma, s.texture_amplitude, s.depth_noise];
        if finite.iter().any(|v| !v.is_finite())
            || s.brightness_scale < 0.0
            || s.noise_sigma < 0.0
            || s.depth_noise < 0.0
            || !(0.0..1.0).contains(&s.depth_hole_rate)
        {
            return bad("domain shift parameters must be finite and non-negative".into());
        }
        if !(self.dominance_cap > 0.0 && self.dominance_cap <= 1.0) {
            return bad(format!("dominance_cap {} outside (0, 1]", self.dominance_cap));
        }
        for st in &self.styles {
            if !(st.depth_range.0 > 0.0 && st.depth_range.0 <= st.depth_range.1) {
                return bad(format!("class `{}` has an invalid depth range", st.name));
            }
        }
        Ok(())
    }

    fn object_classes(&self) -> Vec<u8> {
        (1..self.class_count as u8)
            .filter(|&c| c != self.floor_class && c != self.wall_class)
            .collect()
    }
}

struct Layout {
    label: Array2<u8>,
    depth: Array2<f32>,
    rgb: Array3<f32>,
}

fn draw_layout<R: Rng>(cfg: &ToySceneConfig, rng: &mut R) -> Layout {
    let (h, w) = (cfg.height, cfg.width);
    let horizon = ((h as f32) * rng.random_range(0.35..0.6)) as usize;
    let wall = &cfg.styles[cfg.wall_class as usize];
    let floor = &cfg.styles[cfg.floor_class as usize];
    let wall_depth = rng.random_range(wall.depth_range.0..=wall.depth_range.1);
    let near = rng.random_range(floor.depth_range.0..=floor.depth_range.1);
    let light = rng.random_range(0.85f32..1.15);
    let jitter = cfg.material_jitter;
    let tint = |rng: &mut R, base: [f32; 3]| {
        let b = rng.random_range(1.0 - jitter..=1.0 + jitter) * light;
        let mut c = [0.0; 3];
        for (i, v) in c.iter_mut().enumerate() {
            let t = rng.random_range(-jitter * 0.5..=jitter * 0.5);
            *v = (base[i] * b + t).clamp(0.0, 1.0);
        }
        c
    };
    let wall_color = tint(rng, wall.color);
    let floor_color = tint(rng, floor.color);

    let mut label = Array2::zeros((h, w));
    let mut depth = Array2::zeros((h, w));
    let mut rgb = Array3::zeros((h, w, 3));
    for y in 0..h {
        let (class, d, col) = if y < horizon {
            (cfg.wall_class, wall_depth, wall_color)
        } else {
            let t = (h - 1 - y) as f32 / (h - 1 - horizon).max(1) as f32;
            (cfg.floor_class, near + (wall_depth - near) * t, floor_color)
        };
        // Light falls off toward the bottom of the frame.
        let shade = 1.0 - 0.12 * y as f32 / h as f32;
        for x in 0..w {
            label[[y, x]] = class;
            depth[[y, x]] = d;
            for c in 0..3 {
                rgb[[y, x, c]] = (col[c] * shade).clamp(0.0, 1.0);
            }
        }
    }

    let object_classes = cfg.object_classes();
    let count = rng.random_range(cfg.objects_per_scene.0..=cfg.objects_per_scene.1);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = if object_classes.is_empty() || rng.random::<f32>() < cfg.clutter_probability {
            0u8
        } else {
            object_classes[rng.random_range(0..object_classes.len())]
        };
        let st = &cfg.styles[class as usize];
        let ow = ((rng.random_range(st.size_range.0 .0..=st.size_range.0 .1) * w as f32) as usize).max(2);
        let oh = ((rng.random_range(st.size_range.1 .0..=st.size_range.1 .1) * h as f32) as usize).max(2);
        let x0 = rng.random_range(0..=w.saturating_sub(ow)) as isize;
        let y0 = match st.placement {
            Placement::Wall => rng.random_range(0..=horizon.saturating_sub(oh / 2).max(1)) as isize - (oh / 4) as isize,
            Placement::Floor => {
                let bottom = rng.random_range(horizon.min(h - 1)..h) as isize;
                bottom - oh as isize + 1
            }
            Placement::Anywhere => rng.random_range(0..=h.saturating_sub(oh)) as isize,
        };
        let d = rng.random_range(st.depth_range.0..=st.depth_range.1);
        let color = if class == 0 {
            [rng.random(), rng.random(), rng.random()]
        } else {
            tint(rng, st.color)
        };
        objects.push((class, st.shape, x0, y0, ow, oh, d, color));
    }
    // Painter's order: far objects first.
    objects.sort_by(|a, b| b.6.total_cmp(&a.6));
    for (class, shape, x0, y0, ow, oh, d, color) in objects {
        let (cx, cy) = (x0 as f32 + ow as f32 / 2.0, y0 as f32 + oh as f32 / 2.0);
        let (rx, ry) = (ow as f32 / 2.0, oh as f32 / 2.0);
        for y in y0.max(0)..(y0 + oh as isize).min(h as isize) {
            for x in x0.max(0)..(x0 + ow as isize).min(w as isize) {
                if shape == ShapeKind::Ellipse {
                    let dx = (x as f32 + 0.5 - cx) / rx;
                    let dy = (y as f32 + 0.5 - cy) / ry;
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                let (y, x) = (y as usize, x as usize);
                label[[y, x]] = class;
                depth[[y, x]] = d;
                let shade = 1.0 - 0.12 * y as f32 / h as f32;
                for c in 0..3 {
                    rgb[[y, x, c]] = (color[c] * shade).clamp(0.0, 1.0);
                }
            }
        }
    }
    Layout { label, depth, rgb }
}

fn accept(cfg: &ToySceneConfig, label: &Array2<u8>) -> bool {
    let mut counts = vec![0usize; cfg.class_count];
    for &l in label {
        counts[l as usize] += 1;
    }
    let distinct = counts.iter().skip(1).filter(|&&c| c > 0).count();
    let max_frac = *counts.iter().max().unwrap() as f32 / label.len() as f32;
    distinct >= cfg.min_class_diversity && max_frac < cfg.dominance_cap
}

/// Rotate the hue of an RGB triple by `deg` degrees (via HSV).
pub fn rotate_hue(rgb: [f32; 3], deg: f32) -> [f32; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= f32::EPSILON {
        return rgb;
    }
    let mut hue = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    hue = (hue + deg).rem_euclid(360.0);
    let sat = delta / max;
    let c = max * sat;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = max - c;
    [r1 + m, g1 + m, b1 + m]
}

fn apply_depth_shift<R: Rng>(depth: &mut Array2<f32>, shift: &DomainShift, rng: &mut R) {
    if shift.depth_noise <= 0.0 && shift.depth_hole_rate <= 0.0 {
        return;
    }
    let noise = Normal::new(0.0f32, shift.depth_noise).expect("sigma is finite and >= 0");
    for d in depth.iter_mut() {
        let hole = rng.random::<f32>() < shift.depth_hole_rate;
        let n = noise.sample(rng);
        *d = if hole { 0.0 } else { (*d * (1.0 + n)).max(0.001) };
    }
}

fn apply_shift<R: Rng>(rgb: &mut Array3<f32>, shift: &DomainShift, rng: &mut R) {
    let (h, w, _) = rgb.dim();
    let fx = rng.random_range(0.15f32..0.45);
    let fy = rng.random_range(0.15f32..0.45);
    let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
    let noise = Normal::new(0.0f32, shift.noise_sigma.max(0.0)).expect("sigma is finite and >= 0");
    for y in 0..h {
        for x in 0..w {
            let px = [rgb[[y, x, 0]], rgb[[y, x, 1]], rgb[[y, x, 2]]];
            let rotated = rotate_hue(px, shift.hue_rotation_deg);
            let texture = shift.texture_amplitude * ((x as f32 * fx + phase).sin() * (y as f32 * fy).cos());
            for c in 0..3 {
                let n = if shift.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                rgb[[y, x, c]] = (rotated[c] * shift.brightness_scale + texture + n).clamp(0.0, 1.0);
            }
        }
    }
}

/// Deterministic toy scene for `(cfg, domain, index)`.
///
/// The layout (labels and clean depth) depends only on `(cfg.seed, index)`,
/// so both domains share it; the real domain additionally passes through the
/// appearance shift and depth sensor noise, which may leave holes.
pub fn generate_toy_sample(cfg: &ToySceneConfig, domain: Domain, index: u64) -> Result<Sample> {
    cfg.validate()?;
    for attempt in 0..MAX_REJECTIONS {
        let mut rng = seeds::rng(cfg.seed, &[index, attempt as u64]);
        let Layout { label, mut depth, mut rgb } = draw_layout(cfg, &mut rng);
        if !accept(cfg, &label) {
            continue;
        }
        if domain == Domain::Real {
            let mut arng = seeds::rng(cfg.seed, &[index, attempt as u64, seeds::tag("real")]);
            apply_shift(&mut rgb, &cfg.shift, &mut arng);
            apply_depth_shift(&mut depth, &cfg.shift, &mut arng);
        }
        let id = format!("toy_{}_{index:06}", domain);
        return Ok(Sample::new(id, domain, rgb, depth, label));
    }
    Err(Error::GenerationFailed {
        index,
        attempts: MAX_REJECTIONS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hue_rotation_by_zero_and_full_turn_is_identity() {
        let px = [0.2, 0.5, 0.7];
        for deg in [0.0, 360.0] {
            let r = rotate_hue(px, deg);
            for c in 0..3 {
                assert!((r[c] - px[c]).abs() < 1e-5);
            }
        }
        let red = rotate_hue([1.0, 0.0, 0.0], 120.0);
        assert!((red[1] - 1.0).abs() < 1e-5 && red[0].abs() < 1e-5);
    }

    #[test]
    fn grey_is_hue_invariant() {
        assert_eq!(rotate_hue([0.4, 0.4, 0.4], 77.0), [0.4, 0.4, 0.4]);
    }

    #[test]
    fn network_input_layouts() {
        let cfg = ToySceneConfig::default();
        let s = generate_toy_sample(&cfg, Domain::Synthetic, 0).unwrap();
        let rgbd = to_network_input(&s, Modality::Rgbd, 10.0).unwrap();
        assert_eq!(rgbd.dim(), (4, 48, 48));
        assert_eq!(rgbd[[0, 3, 5]], s.rgb[[3, 5, 0]]);
        assert_eq!(rgbd[[2, 3, 5]], s.rgb[[3, 5, 2]]);
        assert_eq!(rgbd[[3, 3, 5]], s.depth[[3, 5]] / 10.0);
        let rgb = to_network_input(&s, Modality::Rgb, 10.0).unwrap();
        assert_eq!(rgb.dim(), (3, 48, 48));
        let d = to_network_input(&s, Modality::Depth, 10.0).unwrap();
        assert_eq!(d.dim(), (1, 48, 48));
    }

    #[test]
    fn depth_normalization_is_linear() {
        let mut s = generate_toy_sample(&ToySceneConfig::default(), Domain::Synthetic, 1).unwrap();
        s.depth[[0, 0]] = 2.5;
        let d = to_network_input(&s, Modality::Depth, 10.0).unwrap();
        assert_eq!(d[[0, 0, 0]], 0.25);
    }

    #[test]
    fn holes_block_depth_input() {
        let mut s = generate_toy_sample(&ToySceneConfig::default(), Domain::Synthetic, 2).unwrap();
        s.depth[[4, 4]] = 0.0;
        s.refresh_hole_mask();
        assert!(matches!(to_network_input(&s, Modality::Rgbd, 10.0), Err(Error::HolesNotFilled)));
        assert!(to_network_input(&s, Modality::Rgb, 10.0).is_ok());
    }

    #[test]
    fn impossible_diversity_fails_generation() {
        let cfg = ToySceneConfig {
            min_class_diversity: 6,
            ..ToySceneConfig::default()
        };
        assert!(matches!(
            generate_toy_sample(&cfg, Domain::Synthetic, 0),
            Err(Error::GenerationFailed { .. })
        ));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = ToySceneConfig {
            min_class_diversity: 1,
            ..ToySceneConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.min_class_diversity = 3;
        cfg.shift.noise_sigma = f32::NAN;
        assert!(cfg.validate().is_err());
    }
}
