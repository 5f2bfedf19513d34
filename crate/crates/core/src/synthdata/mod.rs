//! Deterministic synthetic tracking sequences.
//!
//! A scene holds one target, same-family distractors tinted towards the
//! target colour by a similarity level, and clutter shapes from other
//! families. Objects random-walk from frame to frame.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded
//! with the spec's 64-bit seed through `SeedableRng::seed_from_u64`, and
//! normal draws use `rand_distr::Normal`. Both are platform independent,
//! so a spec regenerates the same frames everywhere.

mod io;
mod raster;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::kv::{self, KvFile};

pub use io::{export_sequence, import_sequence, read_annotations, read_ppm, regenerate, write_pgm, write_ppm};
pub use raster::{context_side, CropWindow, Raster, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the pixel centre `(x, y)` is covered by this shape inscribed in `b`.
    pub fn covers(self, b: &BBox, x: f64, y: f64) -> bool {
        if !b.contains(x, y) {
            return false;
        }
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let (cx, cy) = b.center();
                let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
                ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
            }
            ShapeKind::Triangle => {
                // apex at top centre, base along the bottom edge
                let (cx, _) = b.center();
                let t = (y - b.y1) / b.height();
                (x - cx).abs() <= t * b.width() / 2.0
            }
        }
    }
}

/// Generation parameters of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub target_width: f64,
    pub target_height: f64,
    pub distractors: usize,
    /// 1 = distractors look exactly like the target.
    pub similarity: f64,
    /// Number of clutter shapes.
    pub clutter: usize,
    /// Random-walk step deviation in pixels.
    pub motion_sigma: f64,
    /// Per-pixel texture noise deviation.
    pub noise_sigma: f64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 30,
            width: 128,
            height: 128,
            shape: ShapeKind::Ellipse,
            color: [0.85, 0.25, 0.2],
            target_width: 22.0,
            target_height: 22.0,
            distractors: 2,
            similarity: 0.8,
            clutter: 4,
            motion_sigma: 2.0,
            noise_sigma: 0.05,
        }
    }
}

const SPEC_KEYS: &[&str] = &[
    "seed",
    "frames",
    "width",
    "height",
    "shape",
    "color",
    "target_width",
    "target_height",
    "distractors",
    "similarity",
    "clutter",
    "motion_sigma",
    "noise_sigma",
];

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("frames", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return Err(Error::config("similarity", "must lie in [0, 1]"));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config("color", "components must lie in [0, 1]"));
        }
        if !(self.target_width >= 2.0 && self.target_height >= 2.0) {
            return Err(Error::config("target_width", "target must be at least 2 px"));
        }
        if !(self.motion_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::config("motion_sigma", "deviations must be non-negative"));
        }
        let max_side = self.target_width.max(self.target_height) * 1.3 + 4.0;
        if (self.width as f64) < max_side || (self.height as f64) < max_side {
            return Err(Error::config(
                "width",
                format!(
                    "image {}x{} too small for a {}x{} target",
                    self.width, self.height, self.target_width, self.target_height
                ),
            ));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(SPEC_KEYS)?;
        let d = Self::default();
        let shape = match kv.get_str("shape") {
            None => d.shape,
            Some(s) => ShapeKind::parse(s).ok_or_else(|| {
                Error::config("shape", format!("unknown shape `{s}` (rectangle, ellipse, triangle)"))
            })?,
        };
        let color = match kv.get_str("color") {
            None => d.color,
            Some(s) => {
                let parts: Vec<&str> = s.split(',').map(str::trim).collect();
                let vals: Vec<f64> = parts
                    .iter()
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::config("color", format!("`{s}`: {e}")))?;
                <[f64; 3]>::try_from(vals)
                    .map_err(|_| Error::config("color", "expected three comma-separated values"))?
            }
        };
        let spec = Self {
            seed: kv.get("seed", d.seed)?,
            frames: kv.get("frames", d.frames)?,
            width: kv.get("width", d.width)?,
            height: kv.get("height", d.height)?,
            shape,
            color,
            target_width: kv.get("target_width", d.target_width)?,
            target_height: kv.get("target_height", d.target_height)?,
            distractors: kv.get("distractors", d.distractors)?,
            similarity: kv.get("similarity", d.similarity)?,
            clutter: kv.get("clutter", d.clutter)?,
            motion_sigma: kv.get("motion_sigma", d.motion_sigma)?,
            noise_sigma: kv.get("noise_sigma", d.noise_sigma)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        let [r, g, b] = self.color;
        kv::render([
            ("seed", self.seed.to_string()),
            ("frames", self.frames.to_string()),
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("shape", self.shape.name().to_string()),
            ("color", format!("{r},{g},{b}")),
            ("target_width", self.target_width.to_string()),
            ("target_height", self.target_height.to_string()),
            ("distractors", self.distractors.to_string()),
            ("similarity", self.similarity.to_string()),
            ("clutter", self.clutter.to_string()),
            ("motion_sigma", self.motion_sigma.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
        ])
    }
}

/// Rendered frames with per-frame target and distractor boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub spec: SequenceSpec,
    pub frames: Vec<Raster>,
    pub gt: Vec<BBox>,
    /// `distractors[frame][k]`, same object order in every frame.
    pub distractors: Vec<Vec<BBox>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Content digest over frames and boxes.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for f in &self.frames {
            bytes.extend(f.data.iter().flat_map(|v| v.to_le_bytes()));
        }
        let boxes = self.gt.iter().chain(self.distractors.iter().flatten());
        for b in boxes {
            for v in [b.x1, b.y1, b.x2, b.y2] {
                bytes.extend(v.to_le_bytes());
            }
        }
        crate::digest::sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone)]
struct Object {
    shape: ShapeKind,
    color: [f64; 3],
    w: f64,
    h: f64,
    cx: f64,
    cy: f64,
}

impl Object {
    fn bbox(&self) -> BBox {
        BBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    fn clamp_into(&mut self, width: f64, height: f64) {
        self.cx = self.cx.clamp(self.w / 2.0, width - self.w / 2.0);
        self.cy = self.cy.clamp(self.h / 2.0, height - self.h / 2.0);
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, step: &Normal<f64>, width: f64, height: f64) {
        self.cx += step.sample(rng);
        self.cy += step.sample(rng);
        self.clamp_into(width, height);
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn place(rng: &mut ChaCha8Rng, w: f64, h: f64, width: f64, height: f64) -> (f64, f64) {
    (
        rng.random_range(w / 2.0..=width - w / 2.0),
        rng.random_range(h / 2.0..=height - h / 2.0),
    )
}

fn draw(img: &mut Raster, obj: &Object, noise: &Normal<f64>, rng: &mut ChaCha8Rng) {
    let b = obj.bbox();
    let x0 = b.x1.floor().max(0.0) as usize;
    let y0 = b.y1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil() as usize).min(img.width);
    let y1 = (b.y2.ceil() as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            if obj.shape.covers(&b, x as f64 + 0.5, y as f64 + 0.5) {
                for c in 0..CHANNELS {
                    let v = obj.color[c] + noise.sample(rng);
                    img.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
}

/// Renders the sequence described by `spec`. Identical specs give identical output.
pub fn gen_sequence(spec: &SequenceSpec) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (width, height) = (spec.width as f64, spec.height as f64);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let step = Normal::new(0.0, spec.motion_sigma)
        .map_err(|e| Error::config("motion_sigma", e.to_string()))?;

    let mut background = random_color(&mut rng);
    for _ in 0..64 {
        if color_distance(&background, &spec.color) > 0.35 {
            break;
        }
        background = random_color(&mut rng);
    }

    let (tx, ty) = place(&mut rng, spec.target_width, spec.target_height, width, height);
    let mut target = Object {
        shape: spec.shape,
        color: spec.color,
        w: spec.target_width,
        h: spec.target_height,
        cx: tx,
        cy: ty,
    };

    let mut distractors: Vec<Object> = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let other = random_color(&mut rng);
        let s = spec.similarity;
        let color = [0, 1, 2].map(|c| s * spec.color[c] + (1.0 - s) * other[c]);
        let jitter = 1.0 - s;
        let w = spec.target_width * (1.0 + jitter * rng.random_range(-0.3..0.3));
        let h = spec.target_height * (1.0 + jitter * rng.random_range(-0.3..0.3));
        let mut obj = Object {
            shape: spec.shape,
            color,
            w,
            h,
            cx: 0.0,
            cy: 0.0,
        };
        for _ in 0..100 {
            let (cx, cy) = place(&mut rng, w, h, width, height);
            obj.cx = cx;
            obj.cy = cy;
            let b = obj.bbox();
            let clear = !b.intersects(&target.bbox())
                && distractors.iter().all(|d| !b.intersects(&d.bbox()));
            if clear {
                break;
            }
        }
        distractors.push(obj);
    }

    let clutter: Vec<Object> = (0..spec.clutter)
        .map(|_| {
            let others: Vec<ShapeKind> = ShapeKind::ALL
                .into_iter()
                .filter(|k| *k != spec.shape)
                .collect();
            let shape = others[rng.random_range(0..others.len())];
            let w = rng.random_range(0.3..0.9) * spec.target_width;
            let h = rng.random_range(0.3..0.9) * spec.target_height;
            let (cx, cy) = place(&mut rng, w, h, width, height);
            Object {
                shape,
                color: random_color(&mut rng),
                w,
                h,
                cx,
                cy,
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    let mut dboxes = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        if f > 0 {
            target.step(&mut rng, &step, width, height);
            for d in &mut distractors {
                d.step(&mut rng, &step, width, height);
            }
        }
        let mut img = Raster::filled(spec.width, spec.height, background);
        for v in img.data.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        for obj in clutter.iter().chain(&distractors).chain(std::iter::once(&target)) {
            draw(&mut img, obj, &noise, &mut rng);
        }
        frames.push(img);
        gt.push(target.bbox());
        dboxes.push(distractors.iter().map(Object::bbox).collect());
    }

    Ok(Sequence {
        spec: spec.clone(),
        frames,
        gt,
        distractors: dboxes,
    })
}

/// Template and search crops for one frame plus boxes in search coordinates.
#[derive(Debug, Clone)]
pub struct CropPair {
    pub template: Raster,
    pub search: Raster,
    pub gt: BBox,
    pub distractors: Vec<BBox>,
    pub window: CropWindow,
}

/// Template window around the frame-0 target.
pub fn template_window(first_gt: &BBox, template_size: usize) -> CropWindow {
    let (cx, cy) = first_gt.center();
    CropWindow {
        cx,
        cy,
        side: context_side(first_gt.width(), first_gt.height()),
        out: template_size,
    }
}

/// Search window at `center` for a target of the given size.
pub fn search_window(
    center: (f64, f64),
    target_w: f64,
    target_h: f64,
    template_size: usize,
    search_size: usize,
) -> CropWindow {
    let side = context_side(target_w, target_h) * search_size as f64 / template_size as f64;
    CropWindow {
        cx: center.0,
        cy: center.1,
        side,
        out: search_size,
    }
}

/// Crops with the search window centred on the current target, shifted by
/// `shift` image pixels.
pub fn crop_pair_shifted(
    seq: &Sequence,
    frame: usize,
    template_size: usize,
    search_size: usize,
    shift: (f64, f64),
) -> Result<CropPair> {
    if frame >= seq.len() {
        return Err(Error::Invalid(format!(
            "frame {frame} out of range for a {}-frame sequence",
            seq.len()
        )));
    }
    let tw = template_window(&seq.gt[0], template_size);
    let cur = seq.gt[frame];
    let (cx, cy) = cur.center();
    let sw = search_window(
        (cx + shift.0, cy + shift.1),
        cur.width(),
        cur.height(),
        template_size,
        search_size,
    );
    Ok(CropPair {
        template: tw.extract(&seq.frames[0]),
        search: sw.extract(&seq.frames[frame]),
        gt: sw.to_crop(&cur),
        distractors: seq.distractors[frame].iter().map(|d| sw.to_crop(d)).collect(),
        window: sw,
    })
}

/// Template from frame 0 and a search region centred on the target of `frame`.
pub fn crop_pair(seq: &Sequence, frame: usize, template_size: usize, search_size: usize) -> Result<CropPair> {
    crop_pair_shifted(seq, frame, template_size, search_size, (0.0, 0.0))
}

/// Draws randomised specs for training and evaluation streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecSampler {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub target_size: (f64, f64),
    pub aspect: (f64, f64),
    pub distractors: (usize, usize),
    pub similarity: (f64, f64),
    pub clutter: (usize, usize),
    pub motion_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for SpecSampler {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 2,
            target_size: (18.0, 28.0),
            aspect: (0.7, 1.4),
            distractors: (1, 3),
            similarity: (0.6, 0.9),
            clutter: (2, 5),
            motion_sigma: 3.0,
            noise_sigma: 0.05,
        }
    }
}

impl SpecSampler {
    pub fn sample(&self, seed: u64) -> SequenceSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = rng.random_range(self.target_size.0..=self.target_size.1);
        let aspect = rng.random_range(self.aspect.0..=self.aspect.1);
        let shape = ShapeKind::ALL[rng.random_range(0..3)];
        let color = random_color(&mut rng);
        let distractors = rng.random_range(self.distractors.0..=self.distractors.1);
        let similarity = rng.random_range(self.similarity.0..=self.similarity.1);
        let clutter = rng.random_range(self.clutter.0..=self.clutter.1);
        SequenceSpec {
            seed: rng.random(),
            frames: self.frames,
            width: self.width,
            height: self.height,
            shape,
            color,
            target_width: size * aspect.sqrt(),
            target_height: size / aspect.sqrt(),
            distractors,
            similarity,
            clutter,
            motion_sigma: self.motion_sigma,
            noise_sigma: self.noise_sigma,
        }
    }
}
