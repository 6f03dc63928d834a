use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted height and width.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ColorSpace {
    Gray,
    Rgb,
    YCbCr,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb | ColorSpace::YCbCr => 3,
        }
    }
}

/// A raster with interleaved (`h × w × c`) float samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    color_space: ColorSpace,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, color_space: ColorSpace, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::shape(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        let expect = height * width * color_space.channels();
        if pixels.len() != expect {
            return Err(Error::shape(format!(
                "{} samples for a {height}x{width} {color_space:?} image (expected {expect})",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Numerical(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            color_space,
            pixels,
        })
    }

    /// Builds an image, clamping samples into `[0, 1]` first.
    pub fn from_clamped(height: usize, width: usize, color_space: ColorSpace, mut pixels: Vec<f32>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(height, width, color_space, pixels)
    }

    pub fn gray(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        Self::new(height, width, ColorSpace::Gray, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.color_space.channels()
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels() + c]
    }

    /// One channel as a planar `h × w` buffer.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        let ch = self.channels();
        self.pixels.iter().skip(c).step_by(ch).copied().collect()
    }

    /// Luma plane: the gray samples, the Y of an RGB image, or channel 0 of YCbCr.
    pub fn luma(&self) -> Result<Vec<f32>> {
        match self.color_space {
            ColorSpace::Gray => Ok(self.pixels.clone()),
            ColorSpace::YCbCr => Ok(self.plane(0)),
            ColorSpace::Rgb => Ok(rgb_to_ycbcr(self)?.plane(0)),
        }
    }

    /// Mean over the channels, as a gray image.
    pub fn channel_mean(&self) -> Image {
        let ch = self.channels();
        let pixels = self
            .pixels
            .chunks(ch)
            .map(|p| p.iter().sum::<f32>() / ch as f32)
            .collect();
        Image {
            height: self.height,
            width: self.width,
            color_space: ColorSpace::Gray,
            pixels,
        }
    }

    /// Gray image replicated into three RGB channels.
    pub fn gray_to_rgb(&self) -> Result<Image> {
        if self.color_space != ColorSpace::Gray {
            return Err(Error::shape("expected a single-channel image"));
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        Ok(Image {
            height: self.height,
            width: self.width,
            color_space: ColorSpace::Rgb,
            pixels,
        })
    }

    /// 8-bit samples, rounded to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn convert(img: &Image, from: ColorSpace, to: ColorSpace, f: impl Fn([f32; 3]) -> [f32; 3]) -> Result<Image> {
    if img.color_space != from {
        return Err(Error::shape(format!(
            "expected a 3-channel {from:?} image, got {:?}",
            img.color_space
        )));
    }
    let pixels = img
        .pixels
        .chunks(3)
        .flat_map(|p| f([p[0], p[1], p[2]]).map(|v| v.clamp(0.0, 1.0)))
        .collect();
    Ok(Image {
        height: img.height,
        width: img.width,
        color_space: to,
        pixels,
    })
}

/// Full-range ITU-R BT.601 RGB → YCbCr, chroma centered on 0.5.
pub fn rgb_to_ycbcr(img: &Image) -> Result<Image> {
    convert(img, ColorSpace::Rgb, ColorSpace::YCbCr, |[r, g, b]| {
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let cb = 0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
        let cr = 0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
        [y, cb, cr]
    })
}

/// Inverse of [`rgb_to_ycbcr`].
pub fn ycbcr_to_rgb(img: &Image) -> Result<Image> {
    convert(img, ColorSpace::YCbCr, ColorSpace::Rgb, |[y, cb, cr]| {
        let (cb, cr) = (cb - 0.5, cr - 0.5);
        [y + 1.402 * cr, y - 0.344_136 * cb - 0.714_136 * cr, y + 1.772 * cb]
    })
}

/// Replaces the luma of a visible image with `fused` and converts back to RGB.
/// Gray visible images yield the fused plane unchanged.
pub fn reattach_chroma(fused: &Image, visible: &Image) -> Result<Image> {
    if fused.color_space != ColorSpace::Gray {
        return Err(Error::shape("fused image must be single-channel"));
    }
    if (fused.height, fused.width) != (visible.height, visible.width) {
        return Err(Error::shape("fused and visible sizes differ"));
    }
    match visible.color_space {
        ColorSpace::Gray => Ok(fused.clone()),
        ColorSpace::Rgb | ColorSpace::YCbCr => {
            let ycc = if visible.color_space == ColorSpace::Rgb {
                rgb_to_ycbcr(visible)?
            } else {
                visible.clone()
            };
            let mut pixels = ycc.pixels;
            for (i, y) in fused.pixels.iter().enumerate() {
                pixels[3 * i] = *y;
            }
            let ycc = Image { pixels, ..ycc };
            ycbcr_to_rgb(&ycc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgb(v: Vec<f32>) -> Image {
        Image::new(8, 8, ColorSpace::Rgb, v).unwrap()
    }

    #[test]
    fn gray_axis_has_neutral_chroma() {
        for v in [0.0f32, 0.3, 1.0] {
            let ycc = rgb_to_ycbcr(&rgb(vec![v; 192])).unwrap();
            for p in ycc.pixels().chunks(3) {
                assert!((p[0] - v).abs() < 1e-6);
                assert!((p[1] - 0.5).abs() < 1e-6);
                assert!((p[2] - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_non_rgb() {
        let g = Image::gray(8, 8, vec![0.5; 64]).unwrap();
        assert!(matches!(rgb_to_ycbcr(&g), Err(Error::ShapeMismatch(_))));
        assert!(matches!(ycbcr_to_rgb(&g), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn validates_range_and_size() {
        assert!(Image::gray(7, 8, vec![0.0; 56]).is_err());
        assert!(Image::gray(8, 8, vec![1.5; 64]).is_err());
        assert!(Image::gray(8, 8, vec![0.0; 63]).is_err());
    }

    #[test]
    fn chroma_reattach_keeps_fused_luma() {
        let vis = rgb((0..192).map(|i| (i % 7) as f32 / 7.0).collect());
        let fused = Image::gray(8, 8, vec![0.5; 64]).unwrap();
        let out = reattach_chroma(&fused, &vis).unwrap();
        let y = rgb_to_ycbcr(&out).unwrap().plane(0);
        // chroma clamping at the gamut edge can perturb Y slightly
        for v in y {
            assert!((v - 0.5).abs() < 0.05, "{v}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_error_below_1e3(seed in proptest::collection::vec(0.0f32..=1.0, 192)) {
            let img = rgb(seed);
            let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img).unwrap()).unwrap();
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                prop_assert!((a - b).abs() < 1e-3);
            }
        }
    }
}
