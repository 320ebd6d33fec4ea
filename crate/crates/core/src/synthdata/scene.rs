use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::seeds;
use crate::{Error, Result};

/// RGB raster, row-major and channel-interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Quantizes to 8 bits per channel and back, matching a PNG round trip.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One annotated object: normalized center and extent plus class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    pub fn new(class_id: usize, bbox: BBox) -> Self {
        Self {
            class_id,
            cx: bbox.cx,
            cy: bbox.cy,
            w: bbox.w,
            h: bbox.h,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }

    pub fn is_inside_image(&self) -> bool {
        let b = self.bbox();
        const EPS: f64 = 1e-9;
        self.w > 0.0
            && self.h > 0.0
            && b.x0() >= -EPS
            && b.y0() >= -EPS
            && b.x1() <= 1.0 + EPS
            && b.y1() <= 1.0 + EPS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Raster,
    pub boxes: Vec<GroundTruthBox>,
}

impl Scene {
    pub fn has_class(&self, class_id: usize) -> bool {
        self.boxes.iter().any(|b| b.class_id == class_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Diamond,
    Frame,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Disk,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Bar,
        Shape::Diamond,
        Shape::Frame,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
            Shape::Diamond => "diamond",
            Shape::Frame => "frame",
        }
    }

    /// Height relative to width.
    fn aspect(&self) -> f64 {
        match self {
            Shape::Bar => 0.4,
            _ => 1.0,
        }
    }

    /// Mask test at local pixel-center coordinates `(u, v)` in `[0, 1]^2`.
    /// Every shape touches all four edges of its rectangle.
    fn contains(&self, u: f64, v: f64, w_px: usize, h_px: usize) -> bool {
        let du = u - 0.5;
        let dv = v - 0.5;
        let r2 = du * du + dv * dv;
        match self {
            Shape::Disk => r2 <= 0.25,
            Shape::Square | Shape::Bar => true,
            Shape::Triangle => du.abs() <= 0.5 * v + 1.0 / w_px as f64,
            Shape::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
            Shape::Ring => (0.09..=0.25).contains(&r2),
            Shape::Diamond => du.abs() + dv.abs() <= 0.5 + 0.5 / w_px.max(h_px) as f64,
            Shape::Frame => !(du.abs() < 0.3 && dv.abs() < 0.3),
        }
    }

    /// Saturated class color; the background is always darker.
    fn color(class_id: usize) -> [f32; 3] {
        const PALETTE: [[f32; 3]; 8] = [
            [1.00, 0.25, 0.20],
            [0.25, 0.95, 0.30],
            [0.35, 0.50, 1.00],
            [1.00, 0.95, 0.25],
            [1.00, 0.35, 1.00],
            [0.30, 1.00, 1.00],
            [1.00, 0.65, 0.20],
            [0.95, 0.95, 0.95],
        ];
        PALETTE[class_id % PALETTE.len()]
    }
}

/// Generator parameters. One shape archetype per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub class_shapes: Vec<Shape>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 96,
            class_shapes: Shape::ALL[..7].to_vec(),
            min_objects: 0,
            max_objects: 4,
            min_object_size: 0.12,
            max_object_size: 0.35,
            noise_sigma: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn with_classes(n: usize) -> Self {
        Self {
            class_shapes: Shape::ALL[..n.min(Shape::ALL.len())].to_vec(),
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_shapes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_shapes.iter().map(|s| s.name().to_string()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.image_size < 8 {
            return invalid("image_size must be at least 8 pixels");
        }
        if self.class_shapes.is_empty() || self.class_shapes.len() > Shape::ALL.len() {
            return invalid("between 1 and 8 classes are supported");
        }
        let distinct: BTreeSet<_> = self.class_shapes.iter().collect();
        if distinct.len() != self.class_shapes.len() {
            return invalid("class shapes must be distinct");
        }
        if self.min_objects > self.max_objects {
            return invalid("min_objects exceeds max_objects");
        }
        if !(self.min_object_size > 0.0
            && self.min_object_size <= self.max_object_size
            && self.max_object_size <= 1.0)
        {
            return invalid("object size range must satisfy 0 < min <= max <= 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return invalid("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// An object placement in pixel coordinates (top-left corner and size).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub class_id: usize,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Placement {
    /// Places an object of the given normalized size centered at `(cx, cy)`.
    pub fn centered(spec: &SceneSpec, class_id: usize, cx: f64, cy: f64, size: f64) -> Self {
        let n = spec.image_size as f64;
        let aspect = spec.class_shapes[class_id].aspect();
        let w = (size * n).round().max(1.0) as usize;
        let h = (size * aspect * n).round().max(1.0) as usize;
        let x0 = (cx * n - w as f64 / 2.0).round().max(0.0) as usize;
        let y0 = (cy * n - h as f64 / 2.0).round().max(0.0) as usize;
        Self {
            class_id,
            x0: x0.min(spec.image_size - w),
            y0: y0.min(spec.image_size - h),
            w,
            h,
        }
    }

    fn gt_box(&self, image_size: usize) -> GroundTruthBox {
        let n = image_size as f64;
        GroundTruthBox::new(
            self.class_id,
            BBox::from_corners(
                self.x0 as f64 / n,
                self.y0 as f64 / n,
                (self.x0 + self.w) as f64 / n,
                (self.y0 + self.h) as f64 / n,
            ),
        )
    }

    /// True when the rectangles, grown by a one pixel gap, intersect.
    fn collides(&self, other: &Placement) -> bool {
        self.x0 < other.x0 + other.w + 1
            && other.x0 < self.x0 + self.w + 1
            && self.y0 < other.y0 + other.h + 1
            && other.y0 < self.y0 + self.h + 1
    }
}

const PLACEMENT_ATTEMPTS: usize = 64;

/// Generates one scene. Deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = seeds::rng(seed);
    let n = spec.image_size;
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placements: Vec<Placement> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..spec.num_classes());
        let aspect = spec.class_shapes[class_id].aspect();
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = rng.random_range(spec.min_object_size..=spec.max_object_size);
            let w = ((size * n as f64).round() as usize).clamp(1, n);
            let h = ((size * aspect * n as f64).round() as usize).clamp(1, n);
            let candidate = Placement {
                class_id,
                x0: rng.random_range(0..=n - w),
                y0: rng.random_range(0..=n - h),
                w,
                h,
            };
            if placements.iter().all(|p| !p.collides(&candidate)) {
                placements.push(candidate);
                break;
            }
        }
    }
    render_with_rng(spec, &placements, &mut rng)
}

/// Renders the given placements over a random background.
pub fn render_scene(spec: &SceneSpec, placements: &[Placement], seed: u64) -> Result<Scene> {
    spec.validate()?;
    for p in placements {
        if p.class_id >= spec.num_classes() {
            return Err(Error::InvalidArgument(format!("class {} out of range", p.class_id)));
        }
        if p.w == 0 || p.h == 0 || p.x0 + p.w > spec.image_size || p.y0 + p.h > spec.image_size {
            return Err(Error::InvalidArgument("placement outside the image".into()));
        }
    }
    let mut rng = seeds::rng(seed);
    render_with_rng(spec, placements, &mut rng)
}

fn render_with_rng(spec: &SceneSpec, placements: &[Placement], rng: &mut impl Rng) -> Result<Scene> {
    let n = spec.image_size;
    let background = [
        rng.random_range(0.0..0.3f32),
        rng.random_range(0.0..0.3f32),
        rng.random_range(0.0..0.3f32),
    ];
    let mut image = Raster::filled(n, n, background);
    let mut boxes = Vec::with_capacity(placements.len());
    for p in placements {
        let shape = spec.class_shapes[p.class_id];
        let base = Shape::color(p.class_id);
        let jitter: f32 = rng.random_range(-0.06..0.06);
        let color = base.map(|c| (c + jitter).clamp(0.0, 1.0));
        for y in p.y0..p.y0 + p.h {
            let v = (y - p.y0) as f64 / p.h as f64 + 0.5 / p.h as f64;
            for x in p.x0..p.x0 + p.w {
                let u = (x - p.x0) as f64 / p.w as f64 + 0.5 / p.w as f64;
                if shape.contains(u, v, p.w, p.h) {
                    image.set_pixel(x, y, color);
                }
            }
        }
        boxes.push(p.gt_box(n));
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma as f32)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in image.data.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Scene { image, boxes })
}

/// Generates `n` scenes; scene `i` uses a seed derived from `(seed, i)`.
pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| generate_scene(spec, seeds::derive(seed, seeds::STREAM_SCENE, i as u64)))
        .collect()
}

/// Splits scenes by presence of any new-class object: those go to part B.
pub fn split_known_new(
    dataset: Vec<Scene>,
    new_classes: &BTreeSet<usize>,
    num_classes: usize,
) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if new_classes.is_empty() {
        return Err(Error::InvalidArgument("new_classes must be nonempty".into()));
    }
    if new_classes.len() >= num_classes || new_classes.iter().any(|&c| c >= num_classes) {
        return Err(Error::InvalidArgument(
            "new_classes must be a strict subset of the class set".into(),
        ));
    }
    let (part_b, part_a): (Vec<_>, Vec<_>) = dataset
        .into_iter()
        .partition(|s| s.boxes.iter().any(|b| new_classes.contains(&b.class_id)));
    debug_assert!(part_a
        .iter()
        .all(|s| s.boxes.iter().all(|b| !new_classes.contains(&b.class_id))));
    Ok((part_a, part_b))
}
