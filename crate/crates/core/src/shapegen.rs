//! Procedural horizontal/vertical shape images.
//!
//! Every image is a pure function of `(family, class, seed, params)`.
//! Shapes are black (0.0) on white (1.0) with hard edges: filled shapes use
//! an even-odd scanline fill sampled at pixel centers, outlines are stroked
//! with a square brush, and the textured family fills the interior with
//! stripes orthogonal to the shape's long axis.

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{split_seed, SeededRng};

pub const FOREGROUND: f64 = 0.0;
pub const BACKGROUND: f64 = 1.0;

/// Vertices used to tessellate an ellipse.
pub const ELLIPSE_SEGMENTS: usize = 64;

/// Minimum foreground pixels in any generated image.
pub const MIN_FOREGROUND: usize = 16;

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeClass {
    Horizontal,
    Vertical,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 2] = [ShapeClass::Horizontal, ShapeClass::Vertical];

    pub fn label(self) -> usize {
        match self {
            ShapeClass::Horizontal => 0,
            ShapeClass::Vertical => 1,
        }
    }

    pub fn from_label(label: usize) -> Result<Self> {
        match label {
            0 => Ok(ShapeClass::Horizontal),
            1 => Ok(ShapeClass::Vertical),
            _ => Err(Error::Label { label, classes: 2 }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Horizontal => "horizontal",
            ShapeClass::Vertical => "vertical",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" | "0" => Ok(ShapeClass::Horizontal),
            "vertical" | "1" => Ok(ShapeClass::Vertical),
            other => Err(Error::Param(format!("unknown class '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeFamily {
    FilledRect,
    FilledEllipse,
    RectOutline,
    EllipseOutline,
    RandomOutline,
    RandomFilled,
    RandomTextured,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 7] = [
        ShapeFamily::FilledRect,
        ShapeFamily::FilledEllipse,
        ShapeFamily::RectOutline,
        ShapeFamily::EllipseOutline,
        ShapeFamily::RandomOutline,
        ShapeFamily::RandomFilled,
        ShapeFamily::RandomTextured,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::FilledRect => "filled_rect",
            ShapeFamily::FilledEllipse => "filled_ellipse",
            ShapeFamily::RectOutline => "rect_outline",
            ShapeFamily::EllipseOutline => "ellipse_outline",
            ShapeFamily::RandomOutline => "random_outline",
            ShapeFamily::RandomFilled => "random_filled",
            ShapeFamily::RandomTextured => "random_textured",
        }
    }

    /// Untextured families render strictly binary images.
    pub fn is_binary(self) -> bool {
        self != ShapeFamily::RandomTextured
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown shape family '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub margin: usize,
    pub aspect_min: f64,
    pub outline_thickness: usize,
    pub stripe_period: usize,
    pub stripe_duty: f64,
    pub contour_points: usize,
    pub radial_noise: f64,
    /// Smallest allowed extent of a shape along its short axis, in pixels.
    pub min_short_side: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            image_size: (64, 64),
            margin: 4,
            aspect_min: 1.6,
            outline_thickness: 2,
            stripe_period: 6,
            stripe_duty: 0.5,
            contour_points: 16,
            radial_noise: 0.35,
            min_short_side: 8,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let p = |m: String| Err(Error::Param(m));
        if h == 0 || w == 0 {
            return p("image size must be positive".into());
        }
        if 2 * self.margin >= h.min(w) {
            return p(format!(
                "margin {} too large for {h}x{w} image",
                self.margin
            ));
        }
        if !self.aspect_min.is_finite() || self.aspect_min <= 1.0 {
            return p(format!("aspect_min {} must be > 1", self.aspect_min));
        }
        if self.outline_thickness < 1 {
            return p("outline_thickness must be >= 1".into());
        }
        if self.stripe_period < 2 {
            return p("stripe_period must be >= 2".into());
        }
        if !(self.stripe_duty > 0.0 && self.stripe_duty < 1.0) {
            return p(format!("stripe_duty {} outside (0, 1)", self.stripe_duty));
        }
        if self.contour_points < 3 {
            return p("contour_points must be >= 3".into());
        }
        if !(0.0..1.0).contains(&self.radial_noise) {
            return p(format!("radial_noise {} outside [0, 1)", self.radial_noise));
        }
        if self.min_short_side < 1 {
            return p("min_short_side must be >= 1".into());
        }
        let (avail_y, avail_x) = self.available();
        let long_min = self.long_min();
        if avail_x < long_min as i64 || avail_y < long_min as i64 {
            return p(format!(
                "infeasible: shapes need a long side of at least {long_min}px but only {avail_x}x{avail_y}px is usable"
            ));
        }
        Ok(())
    }

    /// Usable `(height, width)` after margins and stroke slack.
    fn available(&self) -> (i64, i64) {
        let slack = (2 * self.margin + self.outline_thickness) as i64;
        (
            self.image_size.0 as i64 - slack,
            self.image_size.1 as i64 - slack,
        )
    }

    fn long_min(&self) -> usize {
        (self.aspect_min * self.min_short_side as f64).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    /// Axis-aligned rectangle covering pixel columns `x0..x0+width` and rows `y0..y0+height`.
    Rect {
        x0: i64,
        y0: i64,
        width: i64,
        height: i64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
    /// Closed polygon in pixel coordinates.
    Contour {
        points: Vec<(f64, f64)>,
    },
}

impl Geometry {
    /// `(min_x, min_y, max_x, max_y)` of the geometric shape.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        match self {
            Geometry::Rect {
                x0,
                y0,
                width,
                height,
            } => (
                *x0 as f64,
                *y0 as f64,
                (x0 + width) as f64,
                (y0 + height) as f64,
            ),
            Geometry::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Geometry::Contour { points } => points.iter().fold(
                (
                    f64::INFINITY,
                    f64::INFINITY,
                    f64::NEG_INFINITY,
                    f64::NEG_INFINITY,
                ),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
        }
    }

    /// Outline polygon of the shape.
    pub fn polygon(&self) -> Vec<(f64, f64)> {
        match self {
            Geometry::Rect {
                x0,
                y0,
                width,
                height,
            } => {
                let (x0, y0, x1, y1) = (
                    *x0 as f64,
                    *y0 as f64,
                    (x0 + width) as f64,
                    (y0 + height) as f64,
                );
                vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
            }
            Geometry::Ellipse { cx, cy, rx, ry } => (0..ELLIPSE_SEGMENTS)
                .map(|k| {
                    let t = TAU * k as f64 / ELLIPSE_SEGMENTS as f64;
                    (cx + rx * t.cos(), cy + ry * t.sin())
                })
                .collect(),
            Geometry::Contour { points } => points.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeScene {
    pub family: ShapeFamily,
    pub class: ShapeClass,
    pub seed: u64,
    pub geometry: Geometry,
    pub params: RenderParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageGray {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImageGray {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    fn put(&mut self, x: i64, y: i64, v: f64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.data[y as usize * self.width + x as usize] = v;
        }
    }

    pub fn is_foreground(&self, x: usize, y: usize) -> bool {
        self.get(x, y) != BACKGROUND
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != BACKGROUND).count()
    }

    /// Inclusive pixel bounding box `(min_x, min_y, max_x, max_y)` of non-background pixels.
    pub fn foreground_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_foreground(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// FNV-1a over the raw pixel bits.
    pub fn pixel_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r);
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PGM header"));
            }
            fields
                .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad PGM header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("unsupported PGM maxval"));
        }
        pos += 1; // single whitespace after maxval
        let body = bytes
            .get(pos..pos + width * height)
            .ok_or_else(|| bad("truncated PGM body"))?;
        Ok(ImageGray {
            height,
            width,
            data: body.iter().map(|&b| b as f64 / maxval as f64).collect(),
        })
    }
}

/// Classify by comparing the foreground bounding box's width and height.
/// Returns `None` for empty images and square boxes.
pub fn bbox_aspect_oracle(img: &ImageGray) -> Option<ShapeClass> {
    let (x0, y0, x1, y1) = img.foreground_bbox()?;
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    match bw.cmp(&bh) {
        std::cmp::Ordering::Greater => Some(ShapeClass::Horizontal),
        std::cmp::Ordering::Less => Some(ShapeClass::Vertical),
        std::cmp::Ordering::Equal => None,
    }
}

/// Whether the rendered image satisfies the class with the required margin.
fn image_satisfies(img: &ImageGray, class: ShapeClass, params: &RenderParams) -> bool {
    if img.foreground_count() < MIN_FOREGROUND {
        return false;
    }
    let Some((x0, y0, x1, y1)) = img.foreground_bbox() else {
        return false;
    };
    let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
    match class {
        ShapeClass::Horizontal => bw >= params.aspect_min * bh,
        ShapeClass::Vertical => bh >= params.aspect_min * bw,
    }
}

/// Sampled extents: `(extent along x, extent along y)`.
fn sample_extents_int(class: ShapeClass, p: &RenderParams, rng: &mut SeededRng) -> (i64, i64) {
    let (avail_y, avail_x) = p.available();
    let (avail_long, avail_short) = match class {
        ShapeClass::Horizontal => (avail_x, avail_y),
        ShapeClass::Vertical => (avail_y, avail_x),
    };
    let long = rng.range_inclusive(p.long_min() as i64, avail_long);
    let short_max = ((long as f64 / p.aspect_min).floor() as i64).min(avail_short);
    let short = rng.range_inclusive(
        p.min_short_side as i64,
        short_max.max(p.min_short_side as i64),
    );
    match class {
        ShapeClass::Horizontal => (long, short),
        ShapeClass::Vertical => (short, long),
    }
}

fn sample_extents_real(class: ShapeClass, p: &RenderParams, rng: &mut SeededRng) -> (f64, f64) {
    let (avail_y, avail_x) = p.available();
    let (avail_long, avail_short) = match class {
        ShapeClass::Horizontal => (avail_x as f64, avail_y as f64),
        ShapeClass::Vertical => (avail_y as f64, avail_x as f64),
    };
    let long_min = p.long_min() as f64;
    let long = if avail_long > long_min {
        rng.uniform(long_min, avail_long)
    } else {
        long_min
    };
    let short_min = p.min_short_side as f64;
    let short_max = (long / p.aspect_min).min(avail_short);
    let short = if short_max > short_min {
        rng.uniform(short_min, short_max)
    } else {
        short_min
    };
    match class {
        ShapeClass::Horizontal => (long, short),
        ShapeClass::Vertical => (short, long),
    }
}

/// Lowest allowed coordinate of the shape's bounding box along an axis.
fn lo_bound(p: &RenderParams) -> f64 {
    p.margin as f64 + p.outline_thickness as f64 / 2.0
}

fn sample_origin(size: usize, extent: f64, p: &RenderParams, rng: &mut SeededRng) -> f64 {
    let lo = lo_bound(p);
    let hi = size as f64 - lo - extent;
    if hi > lo {
        rng.uniform(lo, hi)
    } else {
        lo
    }
}

fn sample_geometry(
    family: ShapeFamily,
    class: ShapeClass,
    p: &RenderParams,
    rng: &mut SeededRng,
) -> Geometry {
    let (h, w) = p.image_size;
    match family {
        ShapeFamily::FilledRect | ShapeFamily::RectOutline => {
            let (ew, eh) = sample_extents_int(class, p, rng);
            let lo = lo_bound(p).ceil() as i64;
            let x0 = rng.range_inclusive(lo, (w as i64 - lo - ew).max(lo));
            let y0 = rng.range_inclusive(lo, (h as i64 - lo - eh).max(lo));
            Geometry::Rect {
                x0,
                y0,
                width: ew,
                height: eh,
            }
        }
        ShapeFamily::FilledEllipse | ShapeFamily::EllipseOutline => {
            let (ew, eh) = sample_extents_real(class, p, rng);
            let left = sample_origin(w, ew, p, rng);
            let top = sample_origin(h, eh, p, rng);
            Geometry::Ellipse {
                cx: left + ew / 2.0,
                cy: top + eh / 2.0,
                rx: ew / 2.0,
                ry: eh / 2.0,
            }
        }
        ShapeFamily::RandomOutline | ShapeFamily::RandomFilled | ShapeFamily::RandomTextured => {
            let n = p.contour_points;
            let step = TAU / n as f64;
            let phase = rng.uniform(0.0, step);
            let raw: Vec<(f64, f64)> = (0..n)
                .map(|k| {
                    let r = if p.radial_noise > 0.0 {
                        1.0 + rng.uniform(-p.radial_noise, p.radial_noise)
                    } else {
                        1.0
                    };
                    let t = phase + step * k as f64;
                    (r * t.cos(), r * t.sin())
                })
                .collect();
            let (ew, eh) = sample_extents_real(class, p, rng);
            let left = sample_origin(w, ew, p, rng);
            let top = sample_origin(h, eh, p, rng);
            let (mx, my, xx, xy) = Geometry::Contour {
                points: raw.clone(),
            }
            .bbox();
            let (sx, sy) = (ew / (xx - mx), eh / (xy - my));
            Geometry::Contour {
                points: raw
                    .into_iter()
                    .map(|(x, y)| (left + (x - mx) * sx, top + (y - my) * sy))
                    .collect(),
            }
        }
    }
}

/// Sample a scene whose rendering is unambiguous for its class: the
/// foreground bounding box is at least `aspect_min` times longer along the
/// class axis, and at least `MIN_FOREGROUND` pixels are drawn. Candidates
/// failing either test are resampled from the same seeded stream.
pub fn gen_scene(
    family: ShapeFamily,
    class: ShapeClass,
    seed: u64,
    params: &RenderParams,
) -> Result<ShapeScene> {
    params.validate()?;
    let mut rng = SeededRng::new(seed);
    for _ in 0..MAX_ATTEMPTS {
        let scene = ShapeScene {
            family,
            class,
            seed,
            geometry: sample_geometry(family, class, params, &mut rng),
            params: *params,
        };
        if image_satisfies(&rasterize(&scene), class, params) {
            return Ok(scene);
        }
    }
    Err(Error::Param(format!(
        "no valid {family} {class} scene after {MAX_ATTEMPTS} attempts (seed {seed}); parameters too tight"
    )))
}

/// Even-odd span list of polygon coverage per row, sampled at pixel centers.
fn scanline_fill(
    poly: &[(f64, f64)],
    height: usize,
    width: usize,
    mut visit: impl FnMut(i64, i64),
) {
    let n = poly.len();
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (x1, y1) = poly[i];
            let (x2, y2) = poly[(i + 1) % n];
            if (y1 <= yc) != (y2 <= yc) {
                xs.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // pixel x is covered when its center x + 0.5 lies in [a, b)
            let start = ((pair[0] - 0.5).ceil() as i64).max(0);
            let end = ((pair[1] - 0.5).ceil() as i64).min(width as i64);
            for x in start..end {
                visit(x, y as i64);
            }
        }
    }
}

/// Stamp a `t x t` square brush along every edge of a closed polygon.
fn stroke(img: &mut ImageGray, poly: &[(f64, f64)], t: usize) {
    let half = t as f64 / 2.0;
    let cover = |c: f64| {
        // pixels whose centers lie in [c - half, c + half)
        let lo = (c - half - 0.5).ceil() as i64;
        let hi = (c + half - 0.5).ceil() as i64;
        lo..hi
    };
    let n = poly.len();
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        let len = ((x2 - x1).powi(2) + (y2 - y1).powi(2)).sqrt();
        let steps = (len / 0.25).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let (px, py) = (x1 + (x2 - x1) * f, y1 + (y2 - y1) * f);
            for y in cover(py) {
                for x in cover(px) {
                    img.put(x, y, FOREGROUND);
                }
            }
        }
    }
}

fn in_stripe(coord: i64, p: &RenderParams) -> bool {
    let phase = coord.rem_euclid(p.stripe_period as i64) as f64;
    phase < p.stripe_duty * p.stripe_period as f64
}

/// Render a scene to a grayscale image.
pub fn rasterize(scene: &ShapeScene) -> ImageGray {
    let p = &scene.params;
    let (h, w) = p.image_size;
    let mut img = ImageGray::filled(h, w, BACKGROUND);
    let poly = scene.geometry.polygon();
    match scene.family {
        ShapeFamily::FilledRect | ShapeFamily::FilledEllipse | ShapeFamily::RandomFilled => {
            scanline_fill(&poly, h, w, |x, y| img.put(x, y, FOREGROUND));
        }
        ShapeFamily::RectOutline => {
            // stroke a path inset by half the brush so the band stays inside the rectangle
            let (x0, y0, x1, y1) = scene.geometry.bbox();
            let half = p.outline_thickness as f64 / 2.0;
            let inset = [
                (x0 + half, y0 + half),
                (x1 - half, y0 + half),
                (x1 - half, y1 - half),
                (x0 + half, y1 - half),
            ];
            stroke(&mut img, &inset, p.outline_thickness);
        }
        ShapeFamily::EllipseOutline | ShapeFamily::RandomOutline => {
            stroke(&mut img, &poly, p.outline_thickness);
        }
        ShapeFamily::RandomTextured => {
            // horizontal shapes get vertical stripes (keyed on column) and vice versa
            let class = scene.class;
            scanline_fill(&poly, h, w, |x, y| {
                let coord = match class {
                    ShapeClass::Horizontal => x,
                    ShapeClass::Vertical => y,
                };
                if in_stripe(coord, p) {
                    img.put(x, y, FOREGROUND);
                }
            });
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageGray,
    pub class: ShapeClass,
    pub family: ShapeFamily,
    pub seed: u64,
}

/// Seed of image `index` of `class` in a dataset rooted at `base_seed`.
pub fn sample_seed(base_seed: u64, class: ShapeClass, index: usize) -> u64 {
    split_seed(base_seed, &[class.label() as u64, index as u64])
}

/// `n_per_class` images of each class. With several families, image `i`
/// of each class uses `families[i % families.len()]`. Output order is
/// interleaved: `(i=0, horizontal), (i=0, vertical), (i=1, horizontal), ...`.
pub fn generate_dataset(
    families: &[ShapeFamily],
    n_per_class: usize,
    base_seed: u64,
    params: &RenderParams,
) -> Result<Vec<Sample>> {
    let h = generate_class(
        families,
        ShapeClass::Horizontal,
        n_per_class,
        base_seed,
        params,
    )?;
    let v = generate_class(
        families,
        ShapeClass::Vertical,
        n_per_class,
        base_seed,
        params,
    )?;
    Ok(h.into_iter().zip(v).flat_map(|(a, b)| [a, b]).collect())
}

/// The `class` half of `generate_dataset` with the same seeds.
pub fn generate_class(
    families: &[ShapeFamily],
    class: ShapeClass,
    n: usize,
    base_seed: u64,
    params: &RenderParams,
) -> Result<Vec<Sample>> {
    if families.is_empty() {
        return Err(Error::Empty("family list"));
    }
    if n < 1 {
        return Err(Error::Param("n_per_class must be >= 1".into()));
    }
    params.validate()?;
    (0..n)
        .map(|i| {
            let family = families[i % families.len()];
            let seed = sample_seed(base_seed, class, i);
            let scene = gen_scene(family, class, seed, params)?;
            Ok(Sample {
                image: rasterize(&scene),
                class,
                family,
                seed,
            })
        })
        .collect()
}

/// Write `<root>/<class>/<index>.pgm` plus `<root>/manifest.csv`
/// (`path,label,family,seed`, paths relative to `root`).
pub fn export_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    let mut manifest = String::from("path,label,family,seed\n");
    let mut counters = [0usize; 2];
    for class in ShapeClass::ALL {
        let dir = root.join(class.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        let idx = &mut counters[s.class.label()];
        let rel = format!("{}/{:05}.pgm", s.class.name(), idx);
        *idx += 1;
        let path = root.join(&rel);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&s.image.to_pgm())
            .map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!(
            "{rel},{},{},{}\n",
            s.class.name(),
            s.family.name(),
            s.seed
        ));
    }
    let mpath = root.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Read a directory written by `export_dataset`.
pub fn import_dataset(root: &Path) -> Result<Vec<Sample>> {
    let mpath: PathBuf = root.join("manifest.csv");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("path,label,family,seed") {
        return Err(Error::format(&mpath, "unexpected manifest header"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::format(
                &mpath,
                format!("line {}: expected 4 columns", n + 2),
            ));
        }
        let class: ShapeClass = cols[1].parse()?;
        let family: ShapeFamily = cols[2].parse()?;
        let seed: u64 = cols[3]
            .parse()
            .map_err(|_| Error::format(&mpath, format!("line {}: bad seed", n + 2)))?;
        let ipath = root.join(cols[0]);
        let bytes = fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        out.push(Sample {
            image: ImageGray::from_pgm(&bytes, &ipath)?,
            class,
            family,
            seed,
        });
    }
    Ok(out)
}
