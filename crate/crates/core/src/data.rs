//! Procedural segmentation scenes, augmentation and on-disk datasets.
//!
//! A scene is a smooth background (class 0) with filled circles, rectangles,
//! triangles and thin bars painted back to front. Each foreground class has
//! its own base color; every shape jitters that color slightly. Images are
//! quantized to 8 bits at generation time so that a write/read roundtrip is
//! exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::ops::bilinear_resize;
use crate::par;
use crate::tensor::Tensor4;

/// Smallest extent any non-bar structure may have after generation.
pub const MIN_THICK_WIDTH: usize = 4;

/// Default scale range for training augmentation.
pub const SCALE_RANGE: (f64, f64) = (0.75, 1.75);

/// Seed offset separating the validation scenes from the training scenes.
const VAL_SCENE_BASE: u64 = 1 << 32;

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 x 3 x H x W`, values in `[0, 1]`.
    pub image: Tensor4<f32>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor4<f32>, labels: LabelMap) -> Result<Self> {
        let [n, c, h, w] = image.dims();
        if n != 1 || c != 3 {
            return Err(Error::shape("sample", format!("image must be 1x3xHxW, got {:?}", image.dims())));
        }
        if labels.n != 1 || labels.h != h || labels.w != w {
            return Err(Error::shape(
                "sample",
                format!("image is {h}x{w}, labels are {}x{}", labels.h, labels.w),
            ));
        }
        Ok(Self { image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.h
    }

    pub fn width(&self) -> usize {
        self.labels.w
    }

    /// FNV-1a over the image bytes and labels, for cheap equality checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for v in self.image.data() {
            v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
        }
        self.labels.data.iter().copied().for_each(&mut eat);
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Probability that a shape is a 2 or 3 pixel wide bar.
    pub thin_prob: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 96,
            width: 96,
            num_classes: 6,
            min_shapes: 4,
            max_shapes: 9,
            thin_prob: 0.35,
            noise: 0.03,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > IGNORE as usize {
            return Err(Error::invalid(format!("at most {IGNORE} classes, got {}", self.num_classes)));
        }
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::invalid(format!(
                "scene extent {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::invalid("min_shapes exceeds max_shapes"));
        }
        if !(0.0..=1.0).contains(&self.thin_prob) {
            return Err(Error::invalid("thin_prob must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Seed for scene `index` under a global seed. Each index gets its own
/// ChaCha stream, so scenes can be generated in any order.
pub fn scene_seed(global: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(global);
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Triangle { p: [(f64, f64); 3] },
    Bar { a: (f64, f64), b: (f64, f64), half_width: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Triangle { p } => {
                let edge = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d0 = edge(p[0], p[1]);
                let d1 = edge(p[1], p[2]);
                let d2 = edge(p[2], p[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
            Shape::Bar { a, b, half_width } => {
                let (dy, dx) = (b.0 - a.0, b.1 - a.1);
                let len2 = dy * dy + dx * dx;
                let t = (((y - a.0) * dy + (x - a.1) * dx) / len2).clamp(0.0, 1.0);
                let (py, px) = (a.0 + t * dy, a.1 + t * dx);
                (y - py).powi(2) + (x - px).powi(2) <= half_width * half_width
            }
        }
    }

    fn is_bar(&self) -> bool {
        matches!(self, Shape::Bar { .. })
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base color of a foreground class.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let k = (class - 1) as f64 / (num_classes - 1).max(1) as f64;
    hsv_to_rgb(0.9 * k, 0.75, 0.85)
}

fn random_shape(rng: &mut ChaCha8Rng, h: f64, w: f64, thin_prob: f64) -> Shape {
    let size = h.min(w);
    if rng.gen_bool(thin_prob) {
        let half_width = if rng.gen_bool(0.5) { 1.0 } else { 1.5 };
        let len = rng.gen_range(size / 3.0..size);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let a = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
        let b = (a.0 + len * angle.sin(), a.1 + len * angle.cos());
        return Shape::Bar { a, b, half_width };
    }
    match rng.gen_range(0..3) {
        0 => Shape::Circle {
            cy: rng.gen_range(0.0..h),
            cx: rng.gen_range(0.0..w),
            r: rng.gen_range(4.0..size / 5.0),
        },
        1 => {
            let (sh, sw) = (rng.gen_range(6.0..size / 2.5), rng.gen_range(6.0..size / 2.5));
            let (y0, x0) = (rng.gen_range(-sh / 2.0..h - sh / 2.0), rng.gen_range(-sw / 2.0..w - sw / 2.0));
            Shape::Rect {
                y0,
                x0,
                y1: y0 + sh,
                x1: x0 + sw,
            }
        }
        _ => {
            let (cy, cx) = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
            let r = rng.gen_range(8.0..size / 3.5);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let p = [0.0, 1.0, 2.0].map(|k: f64| {
                let a = phase + k * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.4..0.4);
                (cy + r * a.sin(), cx + r * a.cos())
            });
            Shape::Triangle { p }
        }
    }
}

/// Clears every pixel of a non-bar region that is not covered by some
/// `MIN_THICK_WIDTH x MIN_THICK_WIDTH` window lying entirely inside pixels
/// of its own class. What remains is a union of such windows, so no part of
/// it is thinner than the window.
fn remove_slivers(labels: &mut [u8], owner: &mut [i32], bar: &[bool], h: usize, w: usize) {
    let k = MIN_THICK_WIDTH;
    if h < k || w < k {
        return;
    }
    let mut covered = vec![false; h * w];
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let c = labels[y0 * w + x0];
            if c == 0 {
                continue;
            }
            let uniform = (y0..y0 + k).all(|y| (x0..x0 + k).all(|x| labels[y * w + x] == c));
            if uniform {
                for y in y0..y0 + k {
                    covered[y * w + x0..y * w + x0 + k].fill(true);
                }
            }
        }
    }
    for i in 0..h * w {
        let is_bar = owner[i] >= 0 && bar[owner[i] as usize];
        if labels[i] != 0 && !covered[i] && !is_bar {
            labels[i] = 0;
            owner[i] = -1;
        }
    }
}

/// Renders a scene. Identical specs give identical samples.
pub fn generate_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut classes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(1..spec.num_classes);
        let shape = random_shape(&mut rng, h as f64, w as f64, spec.thin_prob);
        let base = class_color(class, spec.num_classes);
        colors.push(base.map(|c| (c + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0)));
        shapes.push(shape);
        classes.push(class as u8);
    }
    let mut owner = vec![-1i32; h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            // later shapes are in front
            if let Some(i) = (0..count).rev().find(|&i| shapes[i].contains(py, px)) {
                owner[y * w + x] = i as i32;
                labels[y * w + x] = classes[i];
            }
        }
    }
    let bar: Vec<bool> = shapes.iter().map(Shape::is_bar).collect();
    remove_slivers(&mut labels, &mut owner, &bar, h, w);

    let bg_level = rng.gen_range(0.25..0.55);
    let bg_tint = [0, 1, 2].map(|_| rng.gen_range(-0.05..0.05));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.05..0.2);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut image = Tensor4::<f32>::zeros([1, 3, h, w]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rgb = match owner[i] {
                o if o >= 0 => colors[o as usize],
                _ => {
                    let t = ((y as f64 / h as f64 - 0.5) * angle.sin() + (x as f64 / w as f64 - 0.5) * angle.cos()) * 2.0;
                    bg_tint.map(|d| bg_level + d + amp * t)
                }
            };
            for (c, v) in rgb.iter().enumerate() {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.data_mut()[c * plane + i] = quantize(v + n);
            }
        }
    }
    Sample::new(image, LabelMap::new(1, h, w, labels)?)
}

/// Rounds to the nearest of the 256 representable 8-bit levels.
pub fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Resizes by `factor`: bilinear for the image, nearest neighbour for the
/// labels. A factor of 1 returns the sample unchanged.
pub fn scale_sample(s: &Sample, factor: f64) -> Result<Sample> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("scale factor {factor} must be positive")));
    }
    let (h, w) = (s.height(), s.width());
    let (nh, nw) = (
        ((h as f64 * factor).round() as usize).max(1),
        ((w as f64 * factor).round() as usize).max(1),
    );
    if (nh, nw) == (h, w) {
        return Ok(s.clone());
    }
    let image = bilinear_resize(&s.image, nh, nw)?;
    Sample::new(image, resize_labels_nearest(&s.labels, nh, nw))
}

/// Nearest-neighbour resize with half-pixel centers.
pub fn resize_labels_nearest(labels: &LabelMap, h_out: usize, w_out: usize) -> LabelMap {
    let src = |o: usize, len_out: usize, len_in: usize| (((o as f64 + 0.5) * len_in as f64 / len_out as f64) as usize).min(len_in - 1);
    let ys: Vec<usize> = (0..h_out).map(|y| src(y, h_out, labels.h)).collect();
    let xs: Vec<usize> = (0..w_out).map(|x| src(x, w_out, labels.w)).collect();
    let mut out = LabelMap::filled(labels.n, h_out, w_out, 0);
    for n in 0..labels.n {
        for (y, &sy) in ys.iter().enumerate() {
            for (x, &sx) in xs.iter().enumerate() {
                out.set(n, y, x, labels.at(n, sy, sx));
            }
        }
    }
    out
}

pub fn random_scale(s: &Sample, range: (f64, f64), rng: &mut impl Rng) -> Result<Sample> {
    let factor = if range.0 < range.1 { rng.gen_range(range.0..range.1) } else { range.0 };
    scale_sample(s, factor)
}

/// Crops the window at `(y0, x0)` of size `h x w`, reading outside pixels as
/// 0 (image) and `IGNORE` (labels).
pub fn crop_at(s: &Sample, y0: usize, x0: usize, h: usize, w: usize) -> Result<Sample> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("crop size is empty"));
    }
    let (sh, sw) = (s.height(), s.width());
    let mut image = Tensor4::<f32>::zeros([1, 3, h, w]);
    let mut labels = LabelMap::filled(1, h, w, IGNORE);
    for y in 0..h {
        let yy = y0 + y;
        if yy >= sh {
            break;
        }
        for x in 0..w {
            let xx = x0 + x;
            if xx >= sw {
                break;
            }
            for c in 0..3 {
                image.set(0, c, y, x, s.image.at(0, c, yy, xx));
            }
            labels.set(0, y, x, s.labels.at(0, yy, xx));
        }
    }
    Sample::new(image, labels)
}

/// Uniformly placed crop. Samples smaller than the crop are padded at the
/// bottom and right first.
pub fn random_crop(s: &Sample, size: (usize, usize), rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::invalid("crop size is empty"));
    }
    let y0 = rng.gen_range(0..=s.height().saturating_sub(h));
    let x0 = rng.gen_range(0..=s.width().saturating_sub(w));
    crop_at(s, y0, x0, h, w)
}

pub fn hflip(s: &Sample) -> Sample {
    Sample {
        image: s.image.hflip(),
        labels: s.labels.hflip(),
    }
}

/// Mirrors left to right with probability one half.
pub fn random_hflip(s: &Sample, rng: &mut impl Rng) -> Sample {
    if rng.gen_bool(0.5) {
        hflip(s)
    } else {
        s.clone()
    }
}

/// Training augmentation: random scale, random crop, random flip.
pub fn augment(s: &Sample, crop: (usize, usize), scale_range: (f64, f64), rng: &mut impl Rng) -> Result<Sample> {
    let scaled = random_scale(s, scale_range, rng)?;
    let cropped = random_crop(&scaled, crop, rng)?;
    Ok(random_hflip(&cropped, rng))
}

// ---------------------------------------------------------------------------
// PPM / PGM

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Writes an 8-bit binary PPM from a `1 x 3 x H x W` image.
pub fn write_ppm(path: &Path, image: &Tensor4<f32>) -> Result<()> {
    let [_, _, h, w] = image.dims();
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(to_byte(image.data()[c * plane + i]));
        }
    }
    write_pnm(path, "P6", w, h, &bytes)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    write_pnm(path, "P5", w, h, bytes)
}

/// Parsed PNM: width, height and the raw raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Parses a binary P5 or P6 file with maxval 255. Whitespace and `#`
/// comments between header fields are allowed.
pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let fmt_err = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(fmt_err("missing P5/P6 magic".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        m => return Err(fmt_err(format!("unsupported magic P{}", m as char))),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err("truncated or malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err("header number out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fmt_err(format!("maxval {maxval} is not 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fmt_err("header must end with a single whitespace byte".into())),
    }
    let need = width * height * channels;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(fmt_err(format!("raster has {} bytes, expected {need}", data.len())));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        data: data[..need].to_vec(),
    })
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    parse_pnm(&bytes, path)
}

pub fn read_ppm(path: &Path) -> Result<Tensor4<f32>> {
    let p = read_pnm(path)?;
    if p.channels != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected a P6 color image".into(),
        });
    }
    let plane = p.width * p.height;
    let mut image = Tensor4::<f32>::zeros([1, 3, p.height, p.width]);
    for i in 0..plane {
        for c in 0..3 {
            image.data_mut()[c * plane + i] = p.data[3 * i + c] as f32 / 255.0;
        }
    }
    Ok(image)
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.ppm"))
}

fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("labels").join(format!("{id}.pgm"))
}

pub fn write_sample(dir: &Path, id: &str, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    write_ppm(&image_path(dir, id), &s.image)?;
    write_pgm(&label_path(dir, id), s.width(), s.height(), &s.labels.data)
}

/// Loads `images/<id>.ppm` and `labels/<id>.pgm`, checking extents and that
/// every label is below `num_classes` or `IGNORE`.
pub fn read_sample(dir: &Path, id: &str, num_classes: usize) -> Result<Sample> {
    let image = read_ppm(&image_path(dir, id))?;
    let lp = label_path(dir, id);
    let pgm = read_pnm(&lp)?;
    if pgm.channels != 1 {
        return Err(Error::Format {
            path: lp.clone(),
            detail: "expected a P5 grayscale label map".into(),
        });
    }
    if (pgm.height, pgm.width) != (image.h(), image.w()) {
        return Err(Error::Format {
            path: lp.clone(),
            detail: format!(
                "label map is {}x{} but image is {}x{}",
                pgm.height,
                pgm.width,
                image.h(),
                image.w()
            ),
        });
    }
    let labels = LabelMap::new(1, pgm.height, pgm.width, pgm.data)?;
    labels.validate(num_classes)?;
    Sample::new(image, labels)
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Contents of `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub entries: Vec<(String, Split)>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "# alignseg dataset manifest\nclasses {}\nsize {}x{}\nseed {}\n",
            self.num_classes, self.height, self.width, self.seed
        );
        for (id, split) in &self.entries {
            out.push_str(&format!("{id} {}\n", split.as_str()));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {line}: {detail}"),
        };
        let mut m = Manifest {
            num_classes: 0,
            height: 0,
            width: 0,
            seed: 0,
            entries: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (key, value) = match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(v), None) => (k, v),
                _ => return Err(err(i + 1, "expected two fields")),
            };
            match key {
                "classes" => m.num_classes = value.parse().map_err(|_| err(i + 1, "bad class count"))?,
                "seed" => m.seed = value.parse().map_err(|_| err(i + 1, "bad seed"))?,
                "size" => {
                    let (h, w) = parse_extent(value).ok_or_else(|| err(i + 1, "bad size"))?;
                    m.height = h;
                    m.width = w;
                }
                id => {
                    let split = match value {
                        "train" => Split::Train,
                        "val" => Split::Val,
                        _ => return Err(err(i + 1, "split must be train or val")),
                    };
                    m.entries.push((id.to_string(), split));
                }
            }
        }
        if m.num_classes < 2 {
            return Err(err(0, "missing or invalid class count"));
        }
        Ok(m)
    }
}

/// Parses `HxW`.
pub fn parse_extent(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

/// Scene spec for sample `index` of `split` under a global seed. Train and
/// validation scenes draw from disjoint seed streams.
pub fn split_scene_spec(base: &SceneSpec, global_seed: u64, split: Split, index: usize) -> SceneSpec {
    let stream = match split {
        Split::Train => index as u64,
        Split::Val => VAL_SCENE_BASE + index as u64,
    };
    SceneSpec {
        seed: scene_seed(global_seed, stream),
        ..base.clone()
    }
}

/// Generates `count` scenes of one split in memory.
pub fn generate_split(base: &SceneSpec, global_seed: u64, split: Split, count: usize) -> Result<Vec<Sample>> {
    base.validate()?;
    par::map_indices(count, |i| generate_scene(&split_scene_spec(base, global_seed, split, i)))
        .into_iter()
        .collect()
}

/// Writes a dataset directory: images, labels and `manifest.txt`.
/// A non-empty `dir` is refused unless `force` is set.
pub fn write_dataset(
    dir: &Path,
    base: &SceneSpec,
    global_seed: u64,
    train: usize,
    val: usize,
    force: bool,
) -> Result<Manifest> {
    base.validate()?;
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::invalid(format!(
            "{} exists and is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(train + val);
    for (split, count) in [(Split::Train, train), (Split::Val, val)] {
        let samples = generate_split(base, global_seed, split, count)?;
        for (i, s) in samples.iter().enumerate() {
            let id = format!("{}_{i:05}", split.as_str());
            write_sample(dir, &id, s)?;
            entries.push((id, split));
        }
    }
    let manifest = Manifest {
        num_classes: base.num_classes,
        height: base.height,
        width: base.width,
        seed: global_seed,
        entries,
    };
    fs::write(dir.join("manifest.txt"), manifest.render())?;
    Ok(manifest)
}

/// A dataset loaded fully into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let manifest = Manifest::parse(&text, &path)?;
        let load = |split| -> Result<Vec<Sample>> {
            let ids = manifest.ids(split);
            par::map_indices(ids.len(), |i| read_sample(dir, ids[i], manifest.num_classes))
                .into_iter()
                .collect()
        };
        Ok(Self {
            num_classes: manifest.num_classes,
            train: load(Split::Train)?,
            val: load(Split::Val)?,
        })
    }

    /// Generates both splits in memory, equal to what [`write_dataset`]
    /// followed by [`Dataset::load`] would give.
    pub fn synthetic(base: &SceneSpec, global_seed: u64, train: usize, val: usize) -> Result<Self> {
        Ok(Self {
            num_classes: base.num_classes,
            train: generate_split(base, global_seed, Split::Train, train)?,
            val: generate_split(base, global_seed, Split::Val, val)?,
        })
    }
}

/// Fraction of non-ignored pixels carrying each class.
pub fn class_frequencies(samples: &[Sample], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for s in samples {
        for &y in &s.labels.data {
            if (y as usize) < num_classes {
                counts[y as usize] += 1;
                total += 1;
            }
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// True where a pixel differs in label from its right or lower neighbour
/// (or from the pixel on the other side of that edge).
pub fn boundary_mask(labels: &[u8], h: usize, w: usize) -> Vec<bool> {
    let mut b = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && labels[i] != labels[i + 1] {
                b[i] = true;
                b[i + 1] = true;
            }
            if y + 1 < h && labels[i] != labels[i + w] {
                b[i] = true;
                b[i + w] = true;
            }
        }
    }
    b
}
