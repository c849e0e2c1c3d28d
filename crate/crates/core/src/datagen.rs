//! Seeded synthetic "assembly progress" dataset.
//!
//! Each image shows a product case; step `k` adds the first `k - 1` part
//! glyphs on top of it. Nuisance jitter (translation, brightness, background
//! tint, per-part offsets, pixel noise) depends only on the instance seed, so
//! two renders of the same instance at adjacent steps differ only inside the
//! newly added glyph. Test splits also contain occluded `Error` images.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssues, Error, Result};
use crate::labeled::{Label, LabeledImage};
use crate::rng::{derive_seed, rng_from};

/// Reference resolution the layout constants are expressed in.
const REFERENCE_SIZE: f32 = 64.0;

const TAG_NOISE: u64 = 0x006e_6f69_7365;
const TAG_OCCLUDE: u64 = 0x6f63_636c;
const TAG_ERROR: u64 = 0x0065_7272_6f72;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Nuisance variation. Pixel quantities are given at the 64-px reference
/// scale and scaled with `image_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterSpec {
    pub translation_px: [f32; 2],
    pub brightness: [f32; 2],
    pub tint: [f32; 2],
    pub part_offset_px: [f32; 2],
    /// Half-width of the uniform per-pixel noise.
    pub noise: f32,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            translation_px: [-4.0, 4.0],
            brightness: [0.9, 1.1],
            tint: [-0.04, 0.04],
            part_offset_px: [-1.0, 1.0],
            noise: 0.02,
        }
    }
}

/// Occluders drawn over anomaly test images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OccluderSpec {
    pub count: [usize; 2],
    /// Allowed fraction of the product region hidden by the occluders.
    pub coverage: [f32; 2],
}

impl Default for OccluderSpec {
    fn default() -> Self {
        Self {
            count: [1, 3],
            coverage: [0.3, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_steps: usize,
    pub images_per_step: SplitCounts,
    /// Number of occluded `Error` images in the test split.
    pub error_test: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub jitter: JitterSpec,
    #[serde(default)]
    pub occluder: OccluderSpec,
    pub seed: u64,
}

fn default_image_size() -> usize {
    64
}

impl DatasetSpec {
    pub fn new(n_steps: usize, images_per_step: SplitCounts, error_test: usize, seed: u64) -> Self {
        Self {
            n_steps,
            images_per_step,
            error_test,
            image_size: default_image_size(),
            jitter: JitterSpec::default(),
            occluder: OccluderSpec::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = ConfigIssues::new();
        issues.check(self.n_steps >= 3, || {
            format!("dataset.n_steps must be >= 3 (got {})", self.n_steps)
        });
        issues.check(self.n_steps <= u16::MAX as usize, || "dataset.n_steps too large".into());
        issues.check(self.image_size >= 32 && self.image_size.is_multiple_of(16), || {
            format!(
                "dataset.image_size must be >= 32 and divisible by 16 (got {})",
                self.image_size
            )
        });
        let j = &self.jitter;
        for (name, r) in [
            ("translation_px", j.translation_px),
            ("brightness", j.brightness),
            ("tint", j.tint),
            ("part_offset_px", j.part_offset_px),
        ] {
            issues.check(r[0].is_finite() && r[1].is_finite() && r[0] < r[1], || {
                format!("dataset.jitter.{name} must be a finite range with lo < hi (got {r:?})")
            });
        }
        issues.check(j.brightness[0] > 0.0, || "dataset.jitter.brightness must be positive".into());
        issues.check(j.noise.is_finite() && j.noise >= 0.0, || {
            format!("dataset.jitter.noise must be finite and >= 0 (got {})", j.noise)
        });
        let o = &self.occluder;
        issues.check(o.count[0] >= 1 && o.count[0] <= o.count[1], || {
            format!("dataset.occluder.count must satisfy 1 <= lo <= hi (got {:?})", o.count)
        });
        issues.check(
            o.coverage[0] > 0.0 && o.coverage[0] < o.coverage[1] && o.coverage[1] < 1.0,
            || format!("dataset.occluder.coverage must satisfy 0 < lo < hi < 1 (got {:?})", o.coverage),
        );
        issues.into_result()
    }

    fn scale(&self) -> f32 {
        self.image_size as f32 / REFERENCE_SIZE
    }
}

/// Axis-aligned box in pixel coordinates; pixel `(x, y)` is inside when its
/// center `(x + 0.5, y + 0.5)` is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl Rect {
    fn from_xywh(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self {
            x0: x,
            y0: y,
            x1: x + w,
            y1: y + h,
        }
    }

    fn contains(&self, px: f32, py: f32) -> bool {
        px >= self.x0 && px < self.x1 && py >= self.y0 && py < self.y1
    }

    fn translate(&self, dx: f32, dy: f32) -> Self {
        Self::from_xywh(self.x0 + dx, self.y0 + dy, self.x1 - self.x0, self.y1 - self.y0)
    }

    /// Integer pixel bounds `[x0, x1) × [y0, y1)` of every pixel whose center
    /// lies inside, clipped to a `size × size` frame.
    pub fn pixel_bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let lo = |v: f32| ((v - 0.5).ceil().max(0.0) as usize).min(size);
        (lo(self.x0), lo(self.y0), lo(self.x1), lo(self.y1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Rect(Rect),
    Disc { cx: f32, cy: f32, r: f32 },
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
    Frame { outer: Rect, thickness: f32 },
}

impl Shape {
    fn contains(&self, px: f32, py: f32) -> bool {
        match *self {
            Shape::Rect(r) => r.contains(px, py),
            Shape::Disc { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Ellipse { cx, cy, rx, ry } => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
            Shape::Frame { outer, thickness } => {
                let inner = Rect {
                    x0: outer.x0 + thickness,
                    y0: outer.y0 + thickness,
                    x1: outer.x1 - thickness,
                    y1: outer.y1 - thickness,
                };
                outer.contains(px, py) && !inner.contains(px, py)
            }
        }
    }

    fn bounds(&self) -> Rect {
        match *self {
            Shape::Rect(r) | Shape::Frame { outer: r, .. } => r,
            Shape::Disc { cx, cy, r } => Rect {
                x0: cx - r,
                y0: cy - r,
                x1: cx + r,
                y1: cy + r,
            },
            Shape::Ellipse { cx, cy, rx, ry } => Rect {
                x0: cx - rx,
                y0: cy - ry,
                x1: cx + rx,
                y1: cy + ry,
            },
        }
    }

    fn translate(&self, dx: f32, dy: f32) -> Self {
        match *self {
            Shape::Rect(r) => Shape::Rect(r.translate(dx, dy)),
            Shape::Disc { cx, cy, r } => Shape::Disc {
                cx: cx + dx,
                cy: cy + dy,
                r,
            },
            Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse {
                cx: cx + dx,
                cy: cy + dy,
                rx,
                ry,
            },
            Shape::Frame { outer, thickness } => Shape::Frame {
                outer: outer.translate(dx, dy),
                thickness,
            },
        }
    }

    fn scaled(&self, s: f32) -> Self {
        let r = |r: Rect| Rect {
            x0: r.x0 * s,
            y0: r.y0 * s,
            x1: r.x1 * s,
            y1: r.y1 * s,
        };
        match *self {
            Shape::Rect(b) => Shape::Rect(r(b)),
            Shape::Disc { cx, cy, r: rad } => Shape::Disc {
                cx: cx * s,
                cy: cy * s,
                r: rad * s,
            },
            Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse {
                cx: cx * s,
                cy: cy * s,
                rx: rx * s,
                ry: ry * s,
            },
            Shape::Frame { outer, thickness } => Shape::Frame {
                outer: r(outer),
                thickness: thickness * s,
            },
        }
    }
}

type Rgb = [f32; 3];

// Case and part templates at the 64-px reference scale; part positions are
// relative to the case origin. Parts follow a desktop-PC build: PSU,
// motherboard, CPU, cooler, GPU, drive, cover.
const CASE_ORIGIN: (f32, f32) = (12.0, 7.0);
const CASE_SIZE: (f32, f32) = (40.0, 50.0);
const CASE_COLOR: Rgb = [0.25, 0.26, 0.28];

fn part_template(part: usize) -> (Shape, Rgb) {
    let rect = |x, y, w, h| Shape::Rect(Rect::from_xywh(x, y, w, h));
    match part {
        0 => (rect(3.0, 36.0, 16.0, 11.0), [0.62, 0.62, 0.66]),
        1 => (rect(4.0, 4.0, 28.0, 26.0), [0.13, 0.47, 0.22]),
        // The CPU is 8x8 reference px, 1.56% of the image: the subtle step.
        2 => (rect(13.0, 9.0, 8.0, 8.0), [0.85, 0.75, 0.35]),
        3 => (
            Shape::Disc {
                cx: 17.0,
                cy: 13.0,
                r: 6.0,
            },
            [0.72, 0.74, 0.80],
        ),
        4 => (rect(6.0, 21.0, 24.0, 5.0), [0.20, 0.22, 0.60]),
        5 => (rect(24.0, 36.0, 11.0, 9.0), [0.50, 0.32, 0.20]),
        6 => (
            Shape::Frame {
                outer: Rect::from_xywh(0.0, 0.0, CASE_SIZE.0, CASE_SIZE.1),
                thickness: 3.0,
            },
            [0.86, 0.86, 0.90],
        ),
        _ => {
            const PALETTE: [Rgb; 5] = [
                [0.90, 0.30, 0.30],
                [0.30, 0.80, 0.85],
                [0.95, 0.60, 0.10],
                [0.55, 0.30, 0.75],
                [0.95, 0.95, 0.40],
            ];
            let e = part - 7;
            let (col, row) = (e % 5, (e / 5) % 3);
            (
                rect(5.0 + 6.0 * col as f32, 28.0 + 6.0 * row as f32, 4.0, 4.0),
                PALETTE[e % PALETTE.len()],
            )
        }
    }
}

/// Everything that varies per instance, independent of the step.
#[derive(Debug, Clone)]
struct Scene {
    size: usize,
    background: Rgb,
    brightness: f32,
    case: Rect,
    parts: Vec<(Shape, Rgb)>,
    noise: Vec<f32>,
}

fn uniform(rng: &mut impl Rng, r: [f32; 2]) -> f32 {
    rng.gen_range(r[0]..r[1])
}

fn build_scene(spec: &DatasetSpec, instance_seed: u64) -> Scene {
    let s = spec.scale();
    let size = spec.image_size;
    let mut rng = rng_from(spec.seed, &[instance_seed]);
    let j = &spec.jitter;
    let tint = [uniform(&mut rng, j.tint), uniform(&mut rng, j.tint), uniform(&mut rng, j.tint)];
    let background = [0.80 + tint[0], 0.80 + tint[1], 0.82 + tint[2]];
    let brightness = uniform(&mut rng, j.brightness);
    let tx = uniform(&mut rng, j.translation_px) * s;
    let ty = uniform(&mut rng, j.translation_px) * s;
    let origin = (CASE_ORIGIN.0 * s + tx, CASE_ORIGIN.1 * s + ty);
    let case = Rect::from_xywh(origin.0, origin.1, CASE_SIZE.0 * s, CASE_SIZE.1 * s);
    // Part offsets are drawn for every part so that the stream (and hence
    // all other jitter) does not depend on the step being rendered.
    let parts = (0..spec.n_steps - 1)
        .map(|p| {
            let dx = uniform(&mut rng, j.part_offset_px) * s;
            let dy = uniform(&mut rng, j.part_offset_px) * s;
            let (shape, color) = part_template(p);
            (shape.scaled(s).translate(origin.0 + dx, origin.1 + dy), color)
        })
        .collect();
    let mut noise_rng = rng_from(spec.seed, &[instance_seed, TAG_NOISE]);
    let noise = if j.noise > 0.0 {
        (0..3 * size * size)
            .map(|_| noise_rng.gen_range(-j.noise..=j.noise))
            .collect()
    } else {
        vec![0.0; 3 * size * size]
    };
    Scene {
        size,
        background,
        brightness,
        case,
        parts,
        noise,
    }
}

impl Scene {
    fn render(&self, visible_parts: usize, occluders: &[(Shape, Rgb)]) -> Vec<f32> {
        let n = self.size;
        let mut px = vec![0.0f32; 3 * n * n];
        let case = Shape::Rect(self.case);
        for y in 0..n {
            for x in 0..n {
                let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
                let gradient = 0.05 * (cy / n as f32 - 0.5);
                let mut color = [
                    self.background[0] - gradient,
                    self.background[1] - gradient,
                    self.background[2] - gradient,
                ];
                if case.contains(cx, cy) {
                    color = CASE_COLOR;
                }
                for (shape, c) in &self.parts[..visible_parts] {
                    if shape.contains(cx, cy) {
                        color = *c;
                    }
                }
                for (shape, c) in occluders {
                    if shape.contains(cx, cy) {
                        color = *c;
                    }
                }
                for (ch, c) in color.iter().enumerate() {
                    let i = (ch * n + y) * n + x;
                    px[i] = (c * self.brightness + self.noise[i]).clamp(0.0, 1.0);
                }
            }
        }
        px
    }

    fn product_mask(&self) -> Vec<bool> {
        let n = self.size;
        (0..n * n)
            .map(|i| self.case.contains((i % n) as f32 + 0.5, (i / n) as f32 + 0.5))
            .collect()
    }
}

fn check_step(spec: &DatasetSpec, step: usize) -> Result<()> {
    if step == 0 || step > spec.n_steps {
        return Err(Error::Domain(format!(
            "step {step} out of range 1..={}",
            spec.n_steps
        )));
    }
    Ok(())
}

/// Renders one clean image of `step`. Pure in `(spec, step, instance_seed)`.
pub fn render_step_image(spec: &DatasetSpec, step: usize, instance_seed: u64) -> Result<LabeledImage> {
    check_step(spec, step)?;
    let scene = build_scene(spec, instance_seed);
    let pixels = scene.render(step - 1, &[]);
    LabeledImage::new(
        format!("s{step:02}-{instance_seed:016x}"),
        Label::Step(step as u16),
        spec.image_size,
        spec.image_size,
        pixels,
    )
}

/// Bounding box of the glyph that step `part + 2` adds, for a given instance.
pub fn part_region(spec: &DatasetSpec, part: usize, instance_seed: u64) -> Result<Rect> {
    if part + 1 >= spec.n_steps {
        return Err(Error::Domain(format!("part {part} does not exist for {} steps", spec.n_steps)));
    }
    Ok(build_scene(spec, instance_seed).parts[part].0.bounds())
}

/// Product (case) box of an instance.
pub fn product_region(spec: &DatasetSpec, instance_seed: u64) -> Rect {
    build_scene(spec, instance_seed).case
}

/// An occluded render together with the masks used to build it.
#[derive(Debug, Clone)]
pub struct OccludedRender {
    pub image: LabeledImage,
    /// Row-major `size × size` masks.
    pub occluder_mask: Vec<bool>,
    pub product_mask: Vec<bool>,
    /// Hidden fraction of the product region.
    pub coverage: f32,
    pub occluders: usize,
}

const SKIN: Rgb = [0.87, 0.68, 0.55];
const CLOTH: [Rgb; 4] = [
    [0.15, 0.15, 0.18],
    [0.55, 0.12, 0.12],
    [0.20, 0.30, 0.55],
    [0.90, 0.90, 0.92],
];

fn sample_occluder(rng: &mut impl Rng, case: &Rect, size: f32) -> (Shape, Rgb) {
    let (cw, ch) = (case.x1 - case.x0, case.y1 - case.y0);
    if rng.gen_bool(0.5) {
        // An arm reaching in from the left or right edge of the frame.
        let h = rng.gen_range(0.15..0.45) * ch;
        let yc = rng.gen_range(case.y0..case.y1);
        let reach = rng.gen_range(case.x0..case.x1);
        let shape = if rng.gen_bool(0.5) {
            Rect {
                x0: -1.0,
                y0: yc - h / 2.0,
                x1: reach,
                y1: yc + h / 2.0,
            }
        } else {
            Rect {
                x0: reach,
                y0: yc - h / 2.0,
                x1: size + 1.0,
                y1: yc + h / 2.0,
            }
        };
        (Shape::Rect(shape), SKIN)
    } else {
        // A head or torso.
        let cx = rng.gen_range(case.x0..case.x1);
        let cy = rng.gen_range(case.y0..case.y1);
        let rx = rng.gen_range(0.15..0.45) * cw;
        let ry = rng.gen_range(0.15..0.45) * ch;
        let color = if rng.gen_bool(0.3) { SKIN } else { CLOTH[rng.gen_range(0..CLOTH.len())] };
        (Shape::Ellipse { cx, cy, rx, ry }, color)
    }
}

fn occluder_mask(shapes: &[(Shape, Rgb)], size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f32 + 0.5, (i / size) as f32 + 0.5);
            shapes.iter().any(|(s, _)| s.contains(x, y))
        })
        .collect()
}

fn coverage(occ: &[bool], product: &[bool]) -> f32 {
    let total = product.iter().filter(|&&p| p).count();
    let hidden = occ.iter().zip(product).filter(|(&o, &p)| o && p).count();
    hidden as f32 / total.max(1) as f32
}

const OCCLUDER_ATTEMPTS: usize = 200;

/// Renders an occluded `Error` image together with its masks.
pub fn render_occluded(spec: &DatasetSpec, step: usize, instance_seed: u64) -> Result<OccludedRender> {
    check_step(spec, step)?;
    let scene = build_scene(spec, instance_seed);
    let product_mask = scene.product_mask();
    let [lo, hi] = spec.occluder.coverage;
    let mut rng = rng_from(spec.seed, &[instance_seed, TAG_OCCLUDE, step as u64]);
    let size = spec.image_size;
    let mut chosen = None;
    for _ in 0..OCCLUDER_ATTEMPTS {
        let count = rng.gen_range(spec.occluder.count[0]..=spec.occluder.count[1]);
        let shapes: Vec<_> = (0..count)
            .map(|_| sample_occluder(&mut rng, &scene.case, size as f32))
            .collect();
        let mask = occluder_mask(&shapes, size);
        let cov = coverage(&mask, &product_mask);
        if (lo..=hi).contains(&cov) {
            chosen = Some((shapes, mask, cov));
            break;
        }
    }
    let (shapes, mask, cov) = match chosen {
        Some(c) => c,
        None => {
            // Vertical band over the middle of the allowed coverage range.
            let frac = 0.5 * (lo + hi);
            let c = &scene.case;
            let band = Rect {
                x0: c.x0,
                y0: c.y0,
                x1: c.x0 + frac * (c.x1 - c.x0),
                y1: c.y1,
            };
            let shapes = vec![(Shape::Rect(band), SKIN)];
            let mask = occluder_mask(&shapes, size);
            let cov = coverage(&mask, &product_mask);
            (shapes, mask, cov)
        }
    };
    let pixels = scene.render(step - 1, &shapes);
    let image = LabeledImage::new(
        format!("err-s{step:02}-{instance_seed:016x}"),
        Label::Error,
        size,
        size,
        pixels,
    )?;
    Ok(OccludedRender {
        image,
        occluder_mask: mask,
        product_mask,
        coverage: cov,
        occluders: shapes.len(),
    })
}

/// Renders an occluded image of `step`, labeled `Error`.
pub fn render_occluded_image(spec: &DatasetSpec, step: usize, instance_seed: u64) -> Result<LabeledImage> {
    render_occluded(spec, step, instance_seed).map(|r| r.image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    fn count(&self, spec: &DatasetSpec) -> usize {
        match self {
            Split::Train => spec.images_per_step.train,
            Split::Val => spec.images_per_step.val,
            Split::Test => spec.images_per_step.test,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Domain(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub id: String,
    pub label: String,
    pub path: String,
}

impl ManifestEntry {
    pub fn label(&self) -> Result<Label> {
        self.label.parse()
    }
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPEC_FILE: &str = "dataset.toml";

/// Spec plus the list of files of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative entry paths resolve against.
    pub root: PathBuf,
}

/// Instance seed of the `index`-th clean image of `step` in `split`.
pub fn instance_seed(spec: &DatasetSpec, split: Split, step: usize, index: usize) -> u64 {
    derive_seed(spec.seed, &[split.tag(), step as u64, index as u64])
}

fn error_instance_seed(spec: &DatasetSpec, index: usize) -> u64 {
    derive_seed(spec.seed, &[TAG_ERROR, index as u64])
}

/// The planned contents of a dataset, without rendering anything.
pub fn plan_entries(spec: &DatasetSpec) -> Vec<ManifestEntry> {
    let mut entries = Vec::new();
    for split in Split::ALL {
        for step in 1..=spec.n_steps {
            let label = Label::Step(step as u16);
            for j in 0..split.count(spec) {
                let id = format!("{}-s{step:02}-{j:04}", split.as_str());
                entries.push(ManifestEntry {
                    split,
                    path: format!("{}/{}/{id}.png", split.as_str(), label.dir_name()),
                    label: label.to_string(),
                    id,
                });
            }
        }
    }
    for j in 0..spec.error_test {
        let id = format!("test-err-{j:04}");
        entries.push(ManifestEntry {
            split: Split::Test,
            path: format!("test/{}/{id}.png", Label::Error.dir_name()),
            label: Label::Error.to_string(),
            id,
        });
    }
    entries
}

/// Renders an entry of [`plan_entries`] back from its id.
fn render_entry(spec: &DatasetSpec, entry: &ManifestEntry) -> Result<LabeledImage> {
    let label = entry.label()?;
    let index: usize = entry
        .id
        .rsplit('-')
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Domain(format!("malformed entry id {}", entry.id)))?;
    let mut img = match label {
        Label::Step(step) => render_step_image(spec, step as usize, instance_seed(spec, entry.split, step as usize, index))?,
        Label::Error => {
            let step = index % spec.n_steps + 1;
            render_occluded_image(spec, step, error_instance_seed(spec, index))?
        }
        Label::Anomaly(_) => return Err(Error::Domain("anomaly labels are never generated".into())),
    };
    img.id = entry.id.clone();
    img.quantize();
    Ok(img)
}

/// Writes every image, `manifest.csv` and `dataset.toml` under `root`.
///
/// On failure, the files written so far are removed again.
pub fn generate_dataset(spec: &DatasetSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let entries = plan_entries(spec);
    let mut written: Vec<PathBuf> = Vec::new();
    let mut created_dirs: Vec<PathBuf> = Vec::new();
    let result = write_dataset(spec, root, &entries, &mut written, &mut created_dirs);
    if let Err(e) = result {
        for f in written.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in created_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
        return Err(e);
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        entries,
        root: root.to_path_buf(),
    };
    manifest.verify()?;
    Ok(manifest)
}

fn ensure_dir(dir: &Path, created: &mut Vec<PathBuf>) -> Result<()> {
    if dir.is_dir() {
        return Ok(());
    }
    if let Some(parent) = dir.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent, created)?;
        }
    }
    fs::create_dir(dir).map_err(|e| Error::io(dir, e))?;
    created.push(dir.to_path_buf());
    Ok(())
}

fn write_dataset(
    spec: &DatasetSpec,
    root: &Path,
    entries: &[ManifestEntry],
    written: &mut Vec<PathBuf>,
    created: &mut Vec<PathBuf>,
) -> Result<()> {
    ensure_dir(root, created)?;
    for entry in entries {
        let path = root.join(&entry.path);
        ensure_dir(path.parent().expect("entry paths have a parent"), created)?;
        let img = render_entry(spec, entry)?;
        written.push(path.clone());
        img.save_png(&path)?;
    }
    let spec_path = root.join(SPEC_FILE);
    let text = toml::to_string(spec).map_err(|e| Error::format(&spec_path, e.to_string()))?;
    written.push(spec_path.clone());
    fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    let manifest_path = root.join(MANIFEST_FILE);
    written.push(manifest_path.clone());
    write_manifest_csv(&manifest_path, entries)
}

fn write_manifest_csv(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for e in entries {
        w.serialize(e).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl DatasetManifest {
    /// Reads `dataset.toml` and `manifest.csv` from a generated dataset root.
    pub fn load(root: &Path) -> Result<Self> {
        let spec_path = root.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Error::format(&spec_path, e.to_string()))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let csv_err = |source| Error::Csv {
            path: manifest_path.clone(),
            source,
        };
        let mut r = csv::Reader::from_path(&manifest_path).map_err(csv_err)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["split", "id", "label", "path"] {
            return Err(Error::format(&manifest_path, format!("unexpected header {headers:?}")));
        }
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(csv_err)?;
        let manifest = Self {
            spec,
            entries,
            root: root.to_path_buf(),
        };
        manifest.verify()?;
        Ok(manifest)
    }

    /// Checks per-step counts against the dataset settings, id uniqueness and label placement.
    pub fn verify(&self) -> Result<()> {
        let mut issues = ConfigIssues::new();
        let mut ids = HashSet::new();
        for e in &self.entries {
            issues.check(ids.insert(e.id.as_str()), || format!("duplicate id {}", e.id));
            match e.label() {
                Ok(Label::Step(s)) => issues.check((1..=self.spec.n_steps).contains(&(s as usize)), || {
                    format!("{}: step {s} out of range", e.id)
                }),
                Ok(Label::Error) => issues.check(e.split == Split::Test, || {
                    format!("{}: Error label outside the test split", e.id)
                }),
                Ok(Label::Anomaly(_)) => issues.push(format!("{}: anomaly label in manifest", e.id)),
                Err(err) => issues.push(format!("{}: {err}", e.id)),
            }
        }
        for split in Split::ALL {
            for step in 1..=self.spec.n_steps {
                let label = Label::Step(step as u16).to_string();
                let n = self
                    .entries
                    .iter()
                    .filter(|e| e.split == split && e.label == label)
                    .count();
                let want = split.count(&self.spec);
                issues.check(n == want, || {
                    format!("{} {label}: {n} images, expected {want}", split.as_str())
                });
            }
        }
        let errors = self.entries.iter().filter(|e| e.label == "error").count();
        issues.check(errors == self.spec.error_test, || {
            format!("{errors} error images, expected {}", self.spec.error_test)
        });
        issues.into_result()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// Loads every image of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledImage>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| LabeledImage::load_png(&self.root.join(&e.path), e.id.clone(), e.label()?))
            .collect()
    }

    /// Step-labeled images of a split grouped by class (`[step - 1]`).
    pub fn load_by_step(&self, split: Split) -> Result<Vec<Vec<LabeledImage>>> {
        let mut classes = vec![Vec::new(); self.spec.n_steps];
        for img in self.load_split(split)? {
            if let Label::Step(s) = img.label {
                classes[s as usize - 1].push(img);
            }
        }
        Ok(classes)
    }
}
