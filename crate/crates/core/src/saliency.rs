//! Grad-CAM over the top feature map of the extractor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{batch_images, Location, Sample};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::metrics::upsample;
use crate::model::{Heads, Model};
use crate::nn::{Mode, Session};
use crate::tensor::{Scalar, Tape, Var};

/// Identifier recorded as the source layer of every heatmap.
pub const SOURCE_LAYER: &str = "fex.top";

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
    pub class_index: usize,
    pub source_layer: String,
    /// The map was flat before normalization; `values` are all zero.
    pub degenerate: bool,
}

/// Raw class activation map `relu(sum_k w_k A_k)` for a single-sample
/// activation `[1,K,H,W]`, with `w_k` the spatial mean of `d score / d A_k`.
pub fn grad_cam_on_tape<T: Scalar>(tape: &Tape<T>, activation: Var, score: Var) -> Result<(Vec<f64>, usize, usize)> {
    let shape = tape.shape(activation).to_vec();
    let (k, h, w) = match shape[..] {
        [1, k, h, w] => (k, h, w),
        _ => {
            return Err(crate::error::dim_err!(
                "Grad-CAM needs a [1,K,H,W] activation, got {shape:?}"
            ))
        }
    };
    let grads = tape.backward(score)?;
    let g = grads.wrt(activation).to_f64_vec();
    let a = tape.value(activation).to_f64_vec();
    let hw = h * w;
    let mut map = vec![0.0; hw];
    for ch in 0..k {
        let wk = g[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (m, &av) in map.iter_mut().zip(&a[ch * hw..(ch + 1) * hw]) {
            *m += wk * av;
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok((map, h, w))
}

/// Bilinear upsampling then min-max normalization; a flat map becomes zeros.
pub fn normalize_heatmap(raw: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> (Vec<f64>, bool) {
    let up = upsample(raw, h, w, out_h, out_w);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return (vec![0.0; up.len()], true);
    }
    (up.iter().map(|&v| (v - lo) / (hi - lo)).collect(), false)
}

/// Grad-CAM of `class_index`'s logit multiplied by `logit_scale`.
pub fn grad_cam_scaled<T: Scalar>(model: &Model<T>, sample: &Sample, class_index: usize, logit_scale: f64) -> Result<Heatmap> {
    let k = model.config.num_classes;
    if class_index >= k {
        return Err(Error::Usage(format!("class index {class_index} outside [0, {k})")));
    }
    let size = model.config.fex.input_size;
    let images = batch_images::<T>(&[sample], model.config.fex.in_channels)?;
    if images.shape()[2] != size || images.shape()[3] != size {
        return Err(Error::Config(format!(
            "image {} is not {size}x{size}",
            sample.id
        )));
    }
    let mut s = Session::new(&model.params, Mode::Eval);
    let x = s.tape.constant(images);
    let out = model.forward(&mut s, x, Heads::All)?;
    let logits = out.class.expect("all heads").logits;
    let score = s.tape.narrow(logits, 1, class_index, 1)?;
    let score = s.tape.scale(score, T::from_f64(logit_scale))?;
    let score = s.tape.sum(score)?;
    let (raw, h, w) = grad_cam_on_tape(&s.tape, out.pyramid.top(), score)?;
    let (values, degenerate) = normalize_heatmap(&raw, h, w, sample.image.height, sample.image.width);
    Ok(Heatmap {
        width: sample.image.width,
        height: sample.image.height,
        values,
        class_index,
        source_layer: SOURCE_LAYER.to_string(),
        degenerate,
    })
}

pub fn grad_cam<T: Scalar>(model: &Model<T>, sample: &Sample, class_index: usize) -> Result<Heatmap> {
    grad_cam_scaled(model, sample, class_index, 1.0)
}

/// Overlap of a heatmap with the ground-truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyRow {
    pub id: String,
    pub class_index: usize,
    pub peak_x: usize,
    pub peak_y: usize,
    pub peak_in_box: Option<bool>,
    /// Share of the heatmap mass inside the box.
    pub mass_in_box: Option<f64>,
    pub degenerate: bool,
}

fn gt_box(sample: &Sample) -> Option<BBox> {
    match &sample.location {
        Some(Location::BBox(b)) => Some(*b),
        Some(Location::Mask(m)) => m.bbox(),
        None => None,
    }
}

pub fn saliency_row(sample: &Sample, map: &Heatmap) -> SaliencyRow {
    let mut peak = 0;
    for (i, &v) in map.values.iter().enumerate() {
        if v > map.values[peak] {
            peak = i;
        }
    }
    let (px, py) = (peak % map.width, peak / map.width);
    let bbox = gt_box(sample);
    let total: f64 = map.values.iter().sum();
    let mass = bbox.map(|b| {
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                inside += map.values[y * map.width + x];
            }
        }
        inside / total
    });
    SaliencyRow {
        id: sample.id.clone(),
        class_index: map.class_index,
        peak_x: px,
        peak_y: py,
        peak_in_box: bbox.map(|b| !map.degenerate && b.contains(px, py)),
        mass_in_box: mass,
        degenerate: map.degenerate,
    }
}

fn png_err(path: &Path, e: image::ImageError) -> Error {
    Error::Load(format!("cannot write {}: {e}", path.display()))
}

/// Writes `<id>_heatmap.png` (8-bit gray) and `<id>_overlay.png` (image in
/// gray, heat in red, ground-truth box in green).
pub fn write_heatmap_pngs(dir: &Path, sample: &Sample, map: &Heatmap) -> Result<()> {
    let (w, h) = (map.width as u32, map.height as u32);
    let gray: Vec<u8> = map.values.iter().map(|&v| (v * 255.0).round() as u8).collect();
    let path = dir.join(format!("{}_heatmap.png", sample.id));
    image::GrayImage::from_raw(w, h, gray)
        .ok_or_else(|| Error::Internal("heatmap buffer size".into()))?
        .save_with_format(&path, image::ImageFormat::Png)
        .map_err(|e| png_err(&path, e))?;
    let mut overlay = image::RgbImage::new(w, h);
    for (i, px) in overlay.pixels_mut().enumerate() {
        let base = sample.image.pixels[i] as f64;
        let heat = map.values[i];
        let r = (base * (1.0 - 0.5 * heat) + 0.5 * heat).min(1.0);
        let g = base * (1.0 - 0.5 * heat);
        *px = image::Rgb([(r * 255.0).round() as u8, (g * 255.0).round() as u8, (g * 255.0).round() as u8]);
    }
    if let Some(b) = gt_box(sample) {
        for x in b.x0..b.x1 {
            for y in [b.y0, b.y1 - 1] {
                overlay.put_pixel(x as u32, y as u32, image::Rgb([0, 255, 0]));
            }
        }
        for y in b.y0..b.y1 {
            for x in [b.x0, b.x1 - 1] {
                overlay.put_pixel(x as u32, y as u32, image::Rgb([0, 255, 0]));
            }
        }
    }
    let path = dir.join(format!("{}_overlay.png", sample.id));
    overlay
        .save_with_format(&path, image::ImageFormat::Png)
        .map_err(|e| png_err(&path, e))
}

pub fn rows_csv(rows: &[SaliencyRow]) -> String {
    let mut out = String::from("id,class_index,peak_x,peak_y,peak_in_box,mass_in_box,degenerate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.id,
            r.class_index,
            r.peak_x,
            r.peak_y,
            r.peak_in_box.map(|b| b.to_string()).unwrap_or_default(),
            r.mass_in_box.map(|m| m.to_string()).unwrap_or_default(),
            r.degenerate
        );
    }
    out
}

/// Grad-CAM of each sample's predicted class, written under `dir`.
pub fn export<T: Scalar>(model: &Model<T>, samples: &[Sample], dir: &Path) -> Result<Vec<SaliencyRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let images = batch_images::<T>(&[s], model.config.fex.in_channels)?;
        let pred = model.predict(&images, 1)?.remove(0);
        let map = grad_cam(model, s, pred.class())?;
        write_heatmap_pngs(dir, s, &map)?;
        rows.push(saliency_row(s, &map));
    }
    let path = dir.join("saliency.csv");
    fs::write(&path, rows_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
