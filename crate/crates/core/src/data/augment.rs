//! Random resize, crop and brightness distortion applied jointly to a pair
//! and its label map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::io::AlignedPair;
use super::label::LabelMap;
use crate::error::{Error, Result};
use crate::nn::ops::bilinear_matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_height: usize,
    pub crop_width: usize,
    pub brightness: bool,
    pub brightness_min: f64,
    pub brightness_max: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale_min: 0.5,
            scale_max: 2.0,
            crop_height: 360,
            crop_width: 360,
            brightness: true,
            brightness_min: 0.75,
            brightness_max: 1.25,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::config(format!(
                "scale range [{}, {}] is empty or non-positive",
                self.scale_min, self.scale_max
            )));
        }
        if self.crop_height < 8 || self.crop_width < 8 {
            return Err(Error::config("crop size must be at least 8x8"));
        }
        if self.brightness && !(self.brightness_min >= 0.0 && self.brightness_min <= self.brightness_max) {
            return Err(Error::config("brightness range is empty"));
        }
        Ok(())
    }
}

/// Bilinear resize of an interleaved image.
pub fn resize_image(img: &Image, oh: usize, ow: usize) -> Result<Image> {
    if (oh, ow) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let px = resize_raw(img.pixels(), img.height(), img.width(), img.channels(), oh, ow);
    Image::from_clamped(oh, ow, img.color_space(), px)
}

/// Separable bilinear resize of raw interleaved samples.
fn resize_raw(src: &[f32], h: usize, w: usize, ch: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (oh, ow) == (h, w) {
        return src.to_vec();
    }
    let rows = bilinear_matrix(oh, h);
    let cols = bilinear_matrix(ow, w);
    // horizontal pass: h × ow × ch
    let mut tmp = vec![0.0f64; h * ow * ch];
    for y in 0..h {
        for ox in 0..ow {
            let wrow = &cols[ox * w..(ox + 1) * w];
            for (x, &wt) in wrow.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                for c in 0..ch {
                    tmp[(y * ow + ox) * ch + c] += wt * src[(y * w + x) * ch + c] as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f64; oh * ow * ch];
    for oy in 0..oh {
        let wcol = &rows[oy * h..(oy + 1) * h];
        for (y, &wt) in wcol.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            for i in 0..ow * ch {
                out[oy * ow * ch + i] += wt * tmp[y * ow * ch + i];
            }
        }
    }
    out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}

/// Source index of output cell `o` under nearest-neighbor resampling.
pub fn nearest_source(o: usize, out: usize, input: usize) -> usize {
    (((o as f64 + 0.5) * input as f64 / out as f64).floor() as usize).min(input - 1)
}

pub fn resize_label(label: &LabelMap, oh: usize, ow: usize) -> Result<LabelMap> {
    let (h, w) = (label.height(), label.width());
    let mut classes = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = nearest_source(oy, oh, h);
        for ox in 0..ow {
            classes.push(label.get(sy, nearest_source(ox, ow, w)));
        }
    }
    LabelMap::new(oh, ow, classes, label.num_classes(), label.ignore_index())
}

/// Window of `crop` rows/cols starting at `(top, left)`; out-of-range cells take `fill`.
#[allow(clippy::too_many_arguments)]
fn crop_padded<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    ch: usize,
    top: usize,
    left: usize,
    ch_out: (usize, usize),
    fill: T,
) -> Vec<T> {
    let (ch_h, ch_w) = ch_out;
    let mut out = vec![fill; ch_h * ch_w * ch];
    for y in 0..ch_h {
        let sy = top + y;
        if sy >= h {
            break;
        }
        for x in 0..ch_w {
            let sx = left + x;
            if sx >= w {
                break;
            }
            let (d, s) = ((y * ch_w + x) * ch, (sy * w + sx) * ch);
            out[d..d + ch].copy_from_slice(&src[s..s + ch]);
        }
    }
    out
}

fn scale_brightness(img: Image, factor: f64) -> Result<Image> {
    let (h, w, cs) = (img.height(), img.width(), img.color_space());
    let pixels = img
        .into_pixels()
        .into_iter()
        .map(|v| (v as f64 * factor) as f32)
        .collect();
    Image::from_clamped(h, w, cs, pixels)
}

/// Applies one random geometric transform to both images and the label
/// (bilinear for images, nearest for labels), then per-image brightness.
/// Regions exposed by padding are zero in the images and `ignore_index` in
/// the label.
pub fn augment<R: Rng + ?Sized>(
    pair: &AlignedPair,
    label: &LabelMap,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<(AlignedPair, LabelMap)> {
    cfg.validate()?;
    if (label.height(), label.width()) != (pair.height(), pair.width()) {
        return Err(Error::shape("label size differs from its pair"));
    }
    let ratio = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let nh = ((pair.height() as f64 * ratio).round() as usize).max(1);
    let nw = ((pair.width() as f64 * ratio).round() as usize).max(1);
    let top = if nh > cfg.crop_height {
        rng.random_range(0..=nh - cfg.crop_height)
    } else {
        0
    };
    let left = if nw > cfg.crop_width {
        rng.random_range(0..=nw - cfg.crop_width)
    } else {
        0
    };
    let crop = (cfg.crop_height, cfg.crop_width);

    let geo = |img: &Image| -> Result<Image> {
        let ch = img.channels();
        let r = resize_raw(img.pixels(), img.height(), img.width(), ch, nh, nw);
        let px = crop_padded(&r, nh, nw, ch, top, left, crop, 0.0f32);
        Image::new(crop.0, crop.1, img.color_space(), px)
    };
    let mut visible = geo(&pair.visible)?;
    let mut infrared = geo(&pair.infrared)?;

    let lab = resize_label(label, nh, nw)?;
    let classes = crop_padded(lab.classes(), nh, nw, 1, top, left, crop, label.ignore_index());
    let label = LabelMap::new(crop.0, crop.1, classes, label.num_classes(), label.ignore_index())?;

    if cfg.brightness {
        let fv = rng.random_range(cfg.brightness_min..=cfg.brightness_max);
        let fi = rng.random_range(cfg.brightness_min..=cfg.brightness_max);
        visible = scale_brightness(visible, fv)?;
        infrared = scale_brightness(infrared, fi)?;
    }
    Ok((AlignedPair::new(visible, infrared, pair.id.clone())?, label))
}
