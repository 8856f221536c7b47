//! Samples, datasets, the on-disk format, splitting, augmentation, and the
//! synthetic ultrasound-like generator.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::tensor::{Scalar, Tensor};

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Validation(format!(
                "image of {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Location {
    Mask(Mask),
    BBox(BBox),
}

impl Location {
    pub fn to_mask(&self, width: usize, height: usize) -> Mask {
        match self {
            Location::Mask(m) => m.clone(),
            Location::BBox(b) => Mask::from_bbox(b, width, height),
        }
    }

    pub fn is_bbox(&self) -> bool {
        matches!(self, Location::BBox(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub class_label: usize,
    pub location: Option<Location>,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_label >= num_classes {
            return Err(Error::Validation(format!(
                "sample {}: class {} outside [0, {num_classes})",
                self.id, self.class_label
            )));
        }
        let (w, h) = (self.image.width, self.image.height);
        match &self.location {
            Some(Location::Mask(m)) if m.width() != w || m.height() != h => {
                Err(Error::Validation(format!(
                    "sample {}: mask {}x{} differs from image {w}x{h}",
                    self.id,
                    m.width(),
                    m.height()
                )))
            }
            Some(Location::BBox(b)) if !b.fits(w, h) => Err(Error::Validation(format!(
                "sample {}: bbox {b:?} outside {w}x{h} image",
                self.id
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            s.validate(num_classes)?;
        }
        Ok(Dataset {
            num_classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_located(&self) -> usize {
        self.samples.iter().filter(|s| s.location.is_some()).count()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.class_label] += 1;
        }
        counts
    }

    /// Checks every image is `size x size`.
    pub fn check_image_size(&self, size: usize) -> Result<()> {
        match self
            .samples
            .iter()
            .find(|s| s.image.width != size || s.image.height != size)
        {
            Some(s) => Err(Error::Config(format!(
                "sample {} is {}x{} but the model expects {size}x{size} input",
                s.id, s.image.width, s.image.height
            ))),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

// ---- synthetic generator ---------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub benign: usize,
    pub malignant: usize,
    pub size: usize,
    /// Fractional darkening of the lesion relative to the background.
    pub contrast: f64,
    /// Range of the larger semi-axis as a fraction of the image size.
    pub semi_axis: (f64, f64),
    /// Range of the minor/major axis ratio.
    pub axis_ratio: (f64, f64),
    /// Relative radial amplitude of malignant boundary lobes.
    pub perturbation: f64,
    /// Range of the number of malignant boundary lobes.
    pub lobes: (usize, usize),
    /// Strength of the multiplicative speckle.
    pub speckle: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            benign: 50,
            malignant: 50,
            size: 64,
            contrast: 0.6,
            semi_axis: (0.18, 0.3),
            axis_ratio: (0.6, 1.0),
            perturbation: 0.25,
            lobes: (5, 9),
            speckle: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.benign == 0 || self.malignant == 0 {
            return bad(format!(
                "both class counts must be positive, got {} benign and {} malignant",
                self.benign, self.malignant
            ));
        }
        if self.size < 8 {
            return bad(format!("image size {} is too small", self.size));
        }
        if !(self.perturbation > 0.0 && self.perturbation < 1.0) {
            return bad(format!("perturbation {} must be in (0,1)", self.perturbation));
        }
        let (s0, s1) = self.semi_axis;
        let (r0, r1) = self.axis_ratio;
        if !(0.0 < s0 && s0 <= s1 && s1 < 0.5) || !(0.0 < r0 && r0 <= r1 && r1 <= 1.0) {
            return bad("semi-axis and axis-ratio ranges must be nonempty and in range".into());
        }
        if self.lobes.0 == 0 || self.lobes.0 > self.lobes.1 {
            return bad(format!("lobe range {:?} is empty", self.lobes));
        }
        if !(0.0..1.0).contains(&self.contrast) || !(0.0..=1.0).contains(&self.speckle) {
            return bad("contrast must be in [0,1) and speckle in [0,1]".into());
        }
        Ok(())
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    lobes: Vec<(f64, f64, f64)>,
}

impl Lesion {
    fn draw(cfg: &SynthConfig, malignant: bool, rng: &mut ChaCha8Rng) -> Self {
        let m = cfg.size as f64;
        let a = m * rng.random_range(cfg.semi_axis.0..=cfg.semi_axis.1);
        let b = a * rng.random_range(cfg.axis_ratio.0..=cfg.axis_ratio.1);
        let phi = rng.random_range(0.0..std::f64::consts::PI);
        let cx = m * rng.random_range(0.4..=0.6);
        let cy = m * rng.random_range(0.4..=0.6);
        let mut lobes = Vec::new();
        if malignant {
            let k = rng.random_range(cfg.lobes.0..=cfg.lobes.1) as f64;
            let amp = cfg.perturbation * rng.random_range(0.7..=1.0);
            lobes.push((k, amp, rng.random_range(0.0..std::f64::consts::TAU)));
            lobes.push((
                k + 2.0,
                0.4 * amp,
                rng.random_range(0.0..std::f64::consts::TAU),
            ));
        }
        Lesion {
            cx,
            cy,
            a,
            b,
            cos: phi.cos(),
            sin: phi.sin(),
            lobes,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let rho = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let limit = 1.0
            + self
                .lobes
                .iter()
                .map(|&(k, amp, ph)| amp * (k * theta + ph).sin())
                .sum::<f64>();
        rho <= limit
    }
}

/// Correlated multiplicative speckle with unit mean.
fn speckle_field(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let re: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let im: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let blur = |f: &[f64], x: usize, y: usize| {
        let mut s = 0.0;
        for yy in y.saturating_sub(1)..=(y + 1).min(n - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(n - 1) {
                s += f[yy * n + xx];
            }
        }
        s
    };
    let mut mag = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (r, i) = (blur(&re, x, y), blur(&im, x, y));
            mag[y * n + x] = (r * r + i * i).sqrt();
        }
    }
    let mean = mag.iter().sum::<f64>() / (n * n) as f64;
    mag.iter_mut().for_each(|v| *v /= mean);
    mag
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn synth_sample(cfg: &SynthConfig, index: usize, malignant: bool) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let n = cfg.size;
    let lesion = Lesion::draw(cfg, malignant, &mut rng);
    let gain = rng.random_range(0.85..=1.0);
    let speckle = speckle_field(n, &mut rng);
    let mut pixels = Vec::with_capacity(n * n);
    let mut bits = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let inside = lesion.contains(x as f64 + 0.5, y as f64 + 0.5);
            let depth = 1.0 - 0.3 * (y as f64 + 0.5) / n as f64;
            let mut level = 0.6 * gain * depth;
            if inside {
                level *= 1.0 - cfg.contrast;
            }
            let mult = 1.0 + cfg.speckle * (speckle[y * n + x] - 1.0);
            pixels.push(quantize(level * mult));
            bits.push(inside);
        }
    }
    let mut mask = Mask::new(n, n, bits).expect("sizes agree");
    if mask.is_empty() {
        // Only reachable with degenerate configs; keep the label nonempty.
        mask.set(lesion.cx as usize, lesion.cy as usize, true);
    }
    Sample {
        id: format!("s{index:05}"),
        image: Image {
            width: n,
            height: n,
            pixels,
        },
        class_label: malignant as usize,
        location: Some(Location::Mask(mask)),
    }
}

/// Fully located two-class dataset; class 1 is malignant.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.benign + cfg.malignant)
        .map(|i| synth_sample(cfg, i, i >= cfg.benign))
        .collect();
    Ok(Dataset {
        num_classes: 2,
        samples,
    })
}

// ---- label dropping and splitting --------------------------------------------

/// Keeps the location label on `round(ratio * located)` samples.
///
/// The kept set is a prefix of one seeded permutation, so for a fixed seed
/// the kept set at a smaller ratio is a subset of the one at a larger ratio.
pub fn drop_location_labels(dataset: &Dataset, keep_ratio: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(Error::Config(format!("keep ratio {keep_ratio} outside [0,1]")));
    }
    let mut located: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.samples[i].location.is_some())
        .collect();
    located.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = (keep_ratio * located.len() as f64).round() as usize;
    let kept: HashSet<usize> = located[..keep].iter().copied().collect();
    let mut out = dataset.clone();
    for (i, s) in out.samples.iter_mut().enumerate() {
        if !kept.contains(&i) {
            s.location = None;
        }
    }
    Ok(out)
}

/// Stratified seeded split into `(train, val)`.
///
/// The validation size is `round(N * val_fraction)`, shared among classes by
/// largest remainder of their proportional quotas.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val fraction {val_fraction} outside (0,1)")));
    }
    let counts = dataset.class_counts();
    if let Some((k, &c)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(Error::Split(format!("class {k} has {c} samples; need at least 2")));
    }
    let total_val = (dataset.len() as f64 * val_fraction).round() as usize;
    let quotas: Vec<f64> = counts.iter().map(|&c| c as f64 * val_fraction).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total_val.saturating_sub(alloc.iter().sum());
    for &k in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if alloc[k] < counts[k] - 1 {
            alloc[k] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = vec![false; dataset.len()];
    for (k, &take) in alloc.iter().enumerate() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.samples[i].class_label == k)
            .collect();
        members.shuffle(&mut rng);
        for &i in &members[..take] {
            in_val[i] = true;
        }
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| !in_val[i]).collect();
    let val: Vec<usize> = (0..dataset.len()).filter(|&i| in_val[i]).collect();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

// ---- augmentation -------------------------------------------------------------

/// One draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        rotation_deg: 0.0,
        hflip: false,
        vflip: false,
        brightness: 1.0,
        contrast: 1.0,
    };

    /// Rotation in `[-15, 15]` degrees, flips with probability 0.5, and
    /// brightness/contrast factors in `[0.9, 1.1]`.
    pub fn random(rng: &mut impl Rng) -> Self {
        AugmentDraw {
            rotation_deg: rng.random_range(-15.0..=15.0),
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            brightness: rng.random_range(0.9..=1.1),
            contrast: rng.random_range(0.9..=1.1),
        }
    }
}

fn flip_pixels<V: Copy>(data: &[V], w: usize, h: usize, hflip: bool, vflip: bool) -> Vec<V> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        let sy = if vflip { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if hflip { w - 1 - x } else { x };
            out.push(data[sy * w + sx]);
        }
    }
    out
}

/// Source coordinate (in pixel-center units) of output pixel `(x, y)` under a
/// rotation by `deg` about the image center.
fn rotate_source(x: usize, y: usize, w: usize, h: usize, deg: f64) -> (f64, f64) {
    let (s, c) = deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
    (cx + c * dx + s * dy - 0.5, cy - s * dx + c * dy - 0.5)
}

fn rotate_image(px: &[f32], w: usize, h: usize, deg: f64) -> Vec<f32> {
    let at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            px[y as usize * w + x as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(px.len());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = rotate_source(x, y, w, h, deg);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (tx, ty) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = (1.0 - ty) * ((1.0 - tx) * at(x0, y0) + tx * at(x0 + 1, y0))
                + ty * ((1.0 - tx) * at(x0, y0 + 1) + tx * at(x0 + 1, y0 + 1));
            out.push(v as f32);
        }
    }
    out
}

fn rotate_mask(m: &Mask, deg: f64) -> Mask {
    let (w, h) = (m.width(), m.height());
    let mut out = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = rotate_source(x, y, w, h, deg);
            let (rx, ry) = (sx.round(), sy.round());
            if rx >= 0.0 && ry >= 0.0 && (rx as usize) < w && (ry as usize) < h {
                out.set(x, y, m.get(rx as usize, ry as usize));
            }
        }
    }
    out
}

/// Axis-aligned hull of `b` rotated by `deg` about the image center, clipped.
fn rotate_bbox(b: &BBox, w: usize, h: usize, deg: f64) -> BBox {
    let (s, c) = deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let corners = [
        (b.x0 as f64, b.y0 as f64),
        (b.x1 as f64, b.y0 as f64),
        (b.x0 as f64, b.y1 as f64),
        (b.x1 as f64, b.y1 as f64),
    ];
    let (mut lx, mut ly, mut hx, mut hy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (x, y) in corners {
        let (dx, dy) = (x - cx, y - cy);
        let (rx, ry) = (cx + c * dx - s * dy, cy + s * dx + c * dy);
        lx = lx.min(rx);
        ly = ly.min(ry);
        hx = hx.max(rx);
        hy = hy.max(ry);
    }
    let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64);
    let x0 = clip(lx.floor(), w - 1) as usize;
    let y0 = clip(ly.floor(), h - 1) as usize;
    let x1 = (clip(hx.ceil(), w) as usize).max(x0 + 1);
    let y1 = (clip(hy.ceil(), h) as usize).max(y0 + 1);
    BBox { x0, y0, x1, y1 }
}

fn flip_bbox(b: &BBox, w: usize, h: usize, hflip: bool, vflip: bool) -> BBox {
    let mut out = *b;
    if hflip {
        out.x0 = w - b.x1;
        out.x1 = w - b.x0;
    }
    if vflip {
        out.y0 = h - b.y1;
        out.y1 = h - b.y0;
    }
    out
}

/// Applies `draw` to the image and, with the same geometry, to its location.
pub fn augment_with(sample: &Sample, draw: &AugmentDraw) -> Sample {
    let (w, h) = (sample.image.width, sample.image.height);
    let mut px = sample.image.pixels.clone();
    let mut location = sample.location.clone();
    if draw.rotation_deg != 0.0 {
        px = rotate_image(&px, w, h, draw.rotation_deg);
        location = location.map(|l| match l {
            Location::Mask(m) => Location::Mask(rotate_mask(&m, draw.rotation_deg)),
            Location::BBox(b) => Location::BBox(rotate_bbox(&b, w, h, draw.rotation_deg)),
        });
    }
    if draw.hflip || draw.vflip {
        px = flip_pixels(&px, w, h, draw.hflip, draw.vflip);
        location = location.map(|l| match l {
            Location::Mask(m) => {
                let bits = flip_pixels(m.bits(), w, h, draw.hflip, draw.vflip);
                Location::Mask(Mask::new(w, h, bits).expect("same size"))
            }
            Location::BBox(b) => Location::BBox(flip_bbox(&b, w, h, draw.hflip, draw.vflip)),
        });
    }
    if draw.contrast != 1.0 || draw.brightness != 1.0 {
        let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
        for v in px.iter_mut() {
            let c = (*v as f64 - mean) * draw.contrast + mean;
            *v = (c * draw.brightness).clamp(0.0, 1.0) as f32;
        }
    }
    Sample {
        id: sample.id.clone(),
        image: Image {
            width: w,
            height: h,
            pixels: px,
        },
        class_label: sample.class_label,
        location,
    }
}

pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    augment_with(sample, &AugmentDraw::random(rng))
}

// ---- network targets --------------------------------------------------------------

/// Area-downsamples a location to `s x s` and thresholds at 0.5.
pub fn location_target(loc: &Location, width: usize, height: usize, s: usize) -> Result<Vec<f64>> {
    if s == 0 || width % s != 0 || height % s != 0 {
        return Err(Error::Config(format!(
            "cannot area-downsample {width}x{height} to {s}x{s}"
        )));
    }
    let mask = loc.to_mask(width, height);
    let (fx, fy) = (width / s, height / s);
    let cell = (fx * fy) as f64;
    let mut out = vec![0.0; s * s];
    for cy in 0..s {
        for cx in 0..s {
            let mut hits = 0usize;
            for y in cy * fy..(cy + 1) * fy {
                for x in cx * fx..(cx + 1) * fx {
                    hits += mask.get(x, y) as usize;
                }
            }
            if hits as f64 / cell >= 0.5 {
                out[cy * s + cx] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Stacks images into `[N, channels, H, W]`, replicating gray into every channel.
pub fn batch_images<T: Scalar>(samples: &[&Sample], channels: usize) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("empty image batch".into()))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut data = Vec::with_capacity(samples.len() * channels * w * h);
    for s in samples {
        if s.image.width != w || s.image.height != h {
            return Err(Error::Config(format!(
                "sample {} is {}x{}, batch is {w}x{h}",
                s.id, s.image.width, s.image.height
            )));
        }
        for _ in 0..channels {
            data.extend(s.image.pixels.iter().map(|&v| T::from_f64(v as f64)));
        }
    }
    Tensor::new(vec![samples.len(), channels, h, w], data)
}

// ---- on-disk format ---------------------------------------------------------------

const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    file: String,
    class: i64,
    loc_type: String,
    loc_data: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn save_png(path: &Path, w: usize, h: usize, bytes: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Internal("png buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Load(format!("cannot write {}: {e}", path.display())))
}

fn load_png(path: &Path) -> Result<image::GrayImage> {
    if !path.is_file() {
        return Err(Error::Load(format!("missing file {}", path.display())));
    }
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|e| Error::Load(format!("cannot decode {}: {e}", path.display())))
}

/// Writes `manifest.csv`, `images/` and `masks/` under `root`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let manifest = root.join(MANIFEST);
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&manifest)
        .map_err(|e| Error::Load(format!("cannot write {}: {e}", manifest.display())))?;
    let mut seen = HashSet::new();
    for s in &dataset.samples {
        if !seen.insert(s.id.as_str()) || s.id.contains(['/', '\\', ',']) {
            return Err(Error::Validation(format!("sample id {:?} is duplicate or not a file name", s.id)));
        }
        let file = format!("images/{}.png", s.id);
        let bytes = s.image.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        save_png(&root.join(&file), s.image.width, s.image.height, bytes)?;
        let (loc_type, loc_data) = match &s.location {
            None => ("none".to_string(), String::new()),
            Some(Location::BBox(b)) => ("bbox".to_string(), format!("{};{};{};{}", b.x0, b.y0, b.x1, b.y1)),
            Some(Location::Mask(m)) => {
                let mfile = format!("masks/{}.png", s.id);
                let bytes = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
                save_png(&root.join(&mfile), m.width(), m.height(), bytes)?;
                ("mask".to_string(), mfile)
            }
        };
        writer
            .serialize(ManifestRow {
                file,
                class: s.class_label as i64,
                loc_type,
                loc_data,
            })
            .map_err(|e| Error::Load(format!("cannot write manifest row: {e}")))?;
    }
    writer.flush().map_err(io_err(&manifest))?;
    Ok(manifest)
}

fn parse_bbox(data: &str) -> Option<BBox> {
    let v: Vec<usize> = data
        .split(';')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()?;
    match v[..] {
        [x0, y0, x1, y1] => BBox::new(x0, y0, x1, y1).ok(),
        _ => None,
    }
}

/// Reads a dataset written by [`save_dataset`] or laid out by hand.
pub fn load_dataset(root: &Path, num_classes: usize) -> Result<Dataset> {
    let manifest = root.join(MANIFEST);
    if !manifest.is_file() {
        return Err(Error::Load(format!("missing manifest {}", manifest.display())));
    }
    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", manifest.display())))?;
    let mut samples = Vec::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let entry = line + 2;
        let row = row.map_err(|e| Error::Load(format!("manifest line {entry}: {e}")))?;
        let fail = |msg: String| Error::Load(format!("manifest line {entry} ({}): {msg}", row.file));
        if row.class < 0 || row.class as usize >= num_classes {
            return Err(fail(format!("class {} outside [0, {num_classes})", row.class)));
        }
        let img = load_png(&root.join(&row.file))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        let location = match row.loc_type.as_str() {
            "none" => None,
            "bbox" => {
                let b = parse_bbox(&row.loc_data)
                    .ok_or_else(|| fail(format!("bad bbox {:?}", row.loc_data)))?;
                if !b.fits(w, h) {
                    return Err(fail(format!("bbox {:?} outside {w}x{h} image", row.loc_data)));
                }
                Some(Location::BBox(b))
            }
            "mask" => {
                let m = load_png(&root.join(&row.loc_data))?;
                if m.width() as usize != w || m.height() as usize != h {
                    return Err(fail("mask size differs from image".into()));
                }
                let bits = m.into_raw().into_iter().map(|b| b >= 128).collect();
                Some(Location::Mask(Mask::new(w, h, bits)?))
            }
            other => return Err(fail(format!("unknown loc_type {other:?}"))),
        };
        let id = Path::new(&row.file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| row.file.clone());
        samples.push(Sample {
            id,
            image: Image { width: w, height: h, pixels },
            class_label: row.class as usize,
            location,
        });
    }
    if samples.is_empty() {
        return Err(Error::Load(format!("{} lists no samples", manifest.display())));
    }
    Dataset::new(num_classes, samples)
}
