//! Synthetic street-like scenes and the evaluation harness built on them.
//!
//! Every scene mixes structures that favour different inference scales:
//! wide, weakly textured regions that need context, and 1–2 px lines that
//! vanish when the image is shrunk.

mod metrics;
pub mod experiment;
pub mod report;

pub use metrics::{miou, relative_training_cost, ConfusionMatrix, CostModel};

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autolabel::{read_labels, write_labels};
use crate::error::{bail, Error, Result};
use crate::labels::{LabelMap, IGNORE_ID};
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const LARGE_REGION: u8 = 1;
pub const THIN: u8 = 2;
pub const BLOB: u8 = 3;
pub const CLASS_NAMES: [&str; 4] = ["background", "large-region", "thin-structure", "blob"];

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Target area fraction of the large region before occlusion.
    pub large_coverage: [f64; 2],
    pub lines: [usize; 2],
    pub line_width: [f64; 2],
    pub line_length: [f64; 2],
    pub blobs: [usize; 2],
    pub blob_radius: [f64; 2],
    /// Amplitude of the smooth brightness field shared by background and
    /// large region. Locally it masks the small offset between the two.
    pub texture: f64,
    /// Knot spacing of that field in pixels.
    pub texture_cell: f64,
    /// Amplitude of the additive uniform noise on every pixel.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            large_coverage: [0.48, 0.62],
            lines: [2, 4],
            line_width: [1.0, 2.0],
            line_length: [40.0, 96.0],
            blobs: [2, 4],
            blob_radius: [4.0, 8.0],
            texture: 0.15,
            texture_cell: 16.0,
            noise: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            bail!(Config, "scenes must be at least 8x8, got {}x{}", self.height, self.width);
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0;
        for (name, r) in [
            ("large_coverage", self.large_coverage),
            ("line_width", self.line_width),
            ("line_length", self.line_length),
            ("blob_radius", self.blob_radius),
        ] {
            if !ordered(r) {
                bail!(Config, "{name} must be an ordered non-negative range, got {r:?}");
            }
        }
        if self.large_coverage[1] > 1.0 {
            bail!(Config, "large_coverage must stay within [0, 1]");
        }
        if self.line_width[0] < 1.0 || self.line_width[1] > 2.0 {
            bail!(Config, "thin lines must be 1 to 2 px wide, got {:?}", self.line_width);
        }
        if self.lines[0] > self.lines[1] || self.blobs[0] > self.blobs[1] {
            bail!(Config, "count ranges must be ordered");
        }
        if !(0.0..=0.5).contains(&self.noise) || !(0.0..=0.5).contains(&self.texture) {
            bail!(Config, "noise and texture amplitudes must lie in [0, 0.5]");
        }
        if self.texture_cell.is_nan() || self.texture_cell < 1.0 {
            bail!(Config, "texture_cell must be at least 1 px, got {}", self.texture_cell);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub width: f64,
}

impl Line {
    /// Whether pixel centre `(y, x)` lies on the line.
    pub fn covers(&self, y: f64, x: f64) -> bool {
        let (ay, ax) = self.from;
        let (dy, dx) = (self.to.0 - ay, self.to.1 - ax);
        let len2 = dy * dy + dx * dx;
        let t = (((y - ay) * dy + (x - ax) * dx) / len2).clamp(0.0, 1.0);
        let (py, px) = (ay + t * dy - y, ax + t * dx - x);
        (py * py + px * px).sqrt() <= self.width / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub centre: (f64, f64),
    pub radius: f64,
}

impl Blob {
    pub fn covers(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.centre.0, x - self.centre.1);
        dy * dy + dx * dx <= self.radius * self.radius
    }
}

/// Shapes a scene was rendered from, in painting order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    /// Pixels with `normal · (y, x) ≥ offset` belong to the large region.
    pub normal: (f64, f64),
    pub offset: f64,
    pub blobs: Vec<Blob>,
    pub lines: Vec<Line>,
}

impl SceneGeometry {
    /// Class at pixel `(y, x)`, recomputed from the shapes alone.
    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        if self.lines.iter().any(|l| l.covers(fy, fx)) {
            THIN
        } else if self.blobs.iter().any(|b| b.covers(fy, fx)) {
            BLOB
        } else if self.normal.0 * fy + self.normal.1 * fx >= self.offset {
            LARGE_REGION
        } else {
            BACKGROUND
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub geometry: SceneGeometry,
}

fn base_color(class: u8) -> [f64; 3] {
    match class {
        BACKGROUND => [0.42, 0.44, 0.42],
        LARGE_REGION => [0.50, 0.52, 0.50],
        THIN => [0.92, 0.86, 0.30],
        _ => [0.22, 0.34, 0.78],
    }
}

fn uniform(r: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        r.gen_range(range[0]..range[1])
    }
}

/// RNG stream for image `index` of a dataset generated from `seed`; any
/// image can be regenerated independently of the others.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Bilinear interpolation of uniform `±amplitude` knots spaced `cell` apart.
fn smooth_field(rng: &mut impl Rng, h: usize, w: usize, cell: f64, amplitude: f64) -> Vec<f64> {
    let (kh, kw) = ((h as f64 / cell).ceil() as usize + 2, (w as f64 / cell).ceil() as usize + 2);
    let knots: Vec<f64> = (0..kh * kw)
        .map(|_| if amplitude > 0.0 { rng.gen_range(-amplitude..=amplitude) } else { 0.0 })
        .collect();
    let (oy, ox) = (rng.gen_range(0.0..cell), rng.gen_range(0.0..cell));
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = (y as f64 + oy) / cell;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = (x as f64 + ox) / cell;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let k = |r: usize, c: usize| knots[r * kw + c];
            let top = k(y0, x0) * (1.0 - tx) + k(y0, x0 + 1) * tx;
            let bottom = k(y0 + 1, x0) * (1.0 - tx) + k(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Renders one scene with exact labels.
pub fn generate_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let diag = ((h * h + w * w) as f64).sqrt();

    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let normal = (theta.sin(), theta.cos());
    let mut proj: Vec<f64> = (0..h * w)
        .map(|i| normal.0 * ((i / w) as f64 + 0.5) + normal.1 * ((i % w) as f64 + 0.5))
        .collect();
    proj.sort_by(f64::total_cmp);
    let coverage = uniform(rng, spec.large_coverage);
    let above = ((coverage * (h * w) as f64).round() as usize).clamp(1, h * w);
    let offset = proj[h * w - above];

    let blobs = (0..rng.gen_range(spec.blobs[0]..=spec.blobs[1]))
        .map(|_| Blob {
            centre: (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)),
            radius: uniform(rng, spec.blob_radius),
        })
        .collect();
    let lines = (0..rng.gen_range(spec.lines[0]..=spec.lines[1]))
        .map(|_| {
            let from = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = uniform(rng, spec.line_length).min(diag);
            Line {
                from,
                to: (from.0 + len * angle.sin(), from.1 + len * angle.cos()),
                width: uniform(rng, spec.line_width),
            }
        })
        .collect();
    let geometry = SceneGeometry {
        normal,
        offset,
        blobs,
        lines,
    };

    let field = smooth_field(rng, h, w, spec.texture_cell, spec.texture);
    let hw = h * w;
    let mut labels = vec![BACKGROUND; hw];
    let mut image = vec![0.0f32; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let class = geometry.class_at(y, x);
            labels[y * w + x] = class;
            let textured = class == BACKGROUND || class == LARGE_REGION;
            let grain = if textured { field[y * w + x] } else { 0.0 };
            for (c, base) in base_color(class).iter().enumerate() {
                let noise = rng.gen_range(-spec.noise..=spec.noise);
                image[c * hw + y * w + x] = (base + grain + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Scene {
        image: Tensor::new(&[3, h, w], image)?,
        label: LabelMap::new(h, w, CLASS_NAMES.len() as u8, labels)?,
        geometry,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: u8,
}

impl Dataset {
    /// Scenes `first .. first + count` of the stream defined by `seed`.
    pub fn synthetic(spec: &SceneSpec, seed: u64, first: u64, count: usize) -> Result<Self> {
        let samples = (0..count as u64)
            .map(|i| {
                let s = generate_scene(spec, &mut scene_rng(seed, first + i))?;
                Ok(Sample {
                    image: s.image,
                    label: s.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            samples,
            num_classes: CLASS_NAMES.len() as u8,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `images/NNNN.hmst`, `labels/NNNN.hmsl` and a `manifest`.
    pub fn save(&self, dir: &Path, description: &str) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("labels"))?;
        let mut manifest = String::new();
        for line in description.lines() {
            manifest.push_str(&format!("# {line}\n"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let img = format!("images/{i:04}.hmst");
            let lab = format!("labels/{i:04}.hmsl");
            save_tensor(dir.join(&img), &s.image)?;
            write_labels(dir.join(&lab), &s.label)?;
            manifest.push_str(&format!("{img} {lab}\n"));
        }
        let mut f = fs::File::create(dir.join("manifest"))?;
        f.write_all(manifest.as_bytes())?;
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("manifest")).map_err(|e| {
            Error::Data(format!("cannot read {}: {e}", dir.join("manifest").display()))
        })?;
        let mut samples = Vec::new();
        for (n, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [img, lab] = parts[..] else {
                bail!(Data, "manifest line {} should list an image and a label", n + 1);
            };
            let image = load_tensor::<f32>(dir.join(img))?;
            let label = read_labels(dir.join(lab))?;
            if image.shape() != [3, label.height(), label.width()] {
                bail!(
                    Data,
                    "{img} has shape {:?} but {lab} is {}x{}",
                    image.shape(),
                    label.height(),
                    label.width()
                );
            }
            samples.push(Sample { image, label });
        }
        let Some(first) = samples.first() else {
            bail!(Data, "dataset {} lists no samples", dir.display());
        };
        let num_classes = first.label.num_classes();
        if samples.iter().any(|s| s.label.num_classes() != num_classes) {
            bail!(Data, "samples in {} disagree on the class count", dir.display());
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }
}

/// Images containing each class.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    by_class: Vec<Vec<usize>>,
}

/// A sampling decision: which image, and the pixel a crop should contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub index: usize,
    pub focus: Option<(usize, usize)>,
}

impl ClassIndex {
    pub fn new(ds: &Dataset) -> Self {
        let mut by_class = vec![Vec::new(); ds.num_classes as usize];
        for (i, s) in ds.samples.iter().enumerate() {
            let mut seen = vec![false; by_class.len()];
            for &v in s.label.data() {
                if v != IGNORE_ID {
                    seen[v as usize] = true;
                }
            }
            for (c, _) in seen.iter().enumerate().filter(|(_, &s)| s) {
                by_class[c].push(i);
            }
        }
        Self { by_class }
    }

    pub fn images_with(&self, class: u8) -> &[usize] {
        self.by_class.get(class as usize).map_or(&[], |v| v.as_slice())
    }

    /// Picks an image containing `class` and one of its pixels. Falls back
    /// to a random image without a focus when the class is absent.
    pub fn draw(&self, ds: &Dataset, class: u8, rng: &mut impl Rng) -> Draw {
        let Some(&index) = self.images_with(class).choose(rng) else {
            log::warn!("class {class} does not occur in the dataset; using a random crop");
            return Draw {
                index: rng.gen_range(0..ds.len()),
                focus: None,
            };
        };
        let label = &ds.samples[index].label;
        let hits: Vec<usize> = (0..label.len()).filter(|&p| label.data()[p] == class).collect();
        let p = *hits.choose(rng).expect("indexed class occurs");
        Draw {
            index,
            focus: Some((p / label.width(), p % label.width())),
        }
    }
}

/// Offset of a `crop`-long window inside `extent` that keeps `focus` inside
/// when given; negative offsets mean padding.
pub(crate) fn window_start(
    extent: usize,
    crop: usize,
    focus: Option<usize>,
    rng: &mut impl Rng,
) -> isize {
    if extent <= crop {
        return -(rng.gen_range(0..=crop - extent) as isize);
    }
    let (lo, hi) = match focus {
        Some(f) => (f.saturating_sub(crop - 1), f.min(extent - crop)),
        None => (0, extent - crop),
    };
    rng.gen_range(lo..=hi) as isize
}

/// Copies a window of `image`/`label`, padding with zeros and [`IGNORE_ID`].
pub(crate) fn crop_window(
    image: &Tensor<f32>,
    label: &LabelMap,
    top: isize,
    left: isize,
    (ch, cw): (usize, usize),
) -> Result<(Tensor<f32>, LabelMap)> {
    let (h, w) = (label.height() as isize, label.width() as isize);
    let mut img = vec![0.0f32; 3 * ch * cw];
    let mut lab = vec![IGNORE_ID; ch * cw];
    for y in 0..ch {
        let sy = top + y as isize;
        if sy < 0 || sy >= h {
            continue;
        }
        for x in 0..cw {
            let sx = left + x as isize;
            if sx < 0 || sx >= w {
                continue;
            }
            let src = (sy * w + sx) as usize;
            lab[y * cw + x] = label.data()[src];
            for c in 0..3 {
                img[(c * ch + y) * cw + x] = image.data()[c * (h * w) as usize + src];
            }
        }
    }
    Ok((
        Tensor::new(&[3, ch, cw], img)?,
        LabelMap::new(ch, cw, label.num_classes(), lab)?,
    ))
}

/// Class a class-uniform loader requests at `iteration`: classes in turn.
pub fn scheduled_class(iteration: u64, num_classes: u8) -> u8 {
    (iteration % num_classes.max(1) as u64) as u8
}

/// A crop of size `crop` that contains at least one pixel of `class`, or a
/// random crop with `fallback` set when no image has that class.
#[derive(Debug, Clone)]
pub struct ClassCrop {
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub fallback: bool,
}

pub fn class_uniform_sample(
    ds: &Dataset,
    index: &ClassIndex,
    class: u8,
    crop: (usize, usize),
    rng: &mut impl Rng,
) -> Result<ClassCrop> {
    if ds.is_empty() {
        bail!(Data, "cannot sample from an empty dataset");
    }
    let draw = index.draw(ds, class, rng);
    let s = &ds.samples[draw.index];
    let top = window_start(s.label.height(), crop.0, draw.focus.map(|f| f.0), rng);
    let left = window_start(s.label.width(), crop.1, draw.focus.map(|f| f.1), rng);
    let (image, label) = crop_window(&s.image, &s.label, top, left, crop)?;
    Ok(ClassCrop {
        image,
        label,
        fallback: draw.focus.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_keeps_focus() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for f in [0, 10, 95] {
            for _ in 0..50 {
                let s = window_start(96, 64, Some(f), &mut r);
                assert!(s >= 0 && s as usize <= f && f < s as usize + 64 && s as usize + 64 <= 96);
            }
        }
        let s = window_start(40, 64, None, &mut r);
        assert!((-24..=0).contains(&s));
    }

    #[test]
    fn padding_uses_ignore() {
        let img = Tensor::ones(&[3, 2, 2]).unwrap();
        let lab = LabelMap::filled(2, 2, 4, 1).unwrap();
        let (i, l) = crop_window(&img, &lab, -1, 0, (3, 2)).unwrap();
        assert_eq!(l.data(), &[IGNORE_ID, IGNORE_ID, 1, 1, 1, 1]);
        assert_eq!(i.data()[..2], [0.0, 0.0]);
    }
}
