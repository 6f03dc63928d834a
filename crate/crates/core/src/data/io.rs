//! PNG input and output for pairs and label maps.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::image::{ColorSpace, Image};
use super::label::{LabelMap, Palette};
use crate::error::{Error, Result};

/// A registered visible/infrared pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub visible: Image,
    pub infrared: Image,
    pub id: String,
}

impl AlignedPair {
    pub fn new(visible: Image, infrared: Image, id: impl Into<String>) -> Result<Self> {
        if infrared.color_space() != ColorSpace::Gray {
            return Err(Error::shape("infrared must be single-channel"));
        }
        if visible.color_space() == ColorSpace::YCbCr {
            return Err(Error::shape("visible must be RGB or gray"));
        }
        if (visible.height(), visible.width()) != (infrared.height(), infrared.width()) {
            return Err(Error::shape(format!(
                "visible {}x{} vs infrared {}x{}",
                visible.height(),
                visible.width(),
                infrared.height(),
                infrared.width()
            )));
        }
        Ok(Self {
            visible,
            infrared,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.visible.height()
    }

    pub fn width(&self) -> usize {
        self.visible.width()
    }
}

fn decode_err(path: &Path, reason: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn open(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| decode_err(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode { reason, .. } => decode_err(path, reason),
        other => other,
    })
}

/// Decodes an in-memory PNG (or any format the `image` crate reads).
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let memory = Path::new("<memory>");
    let img = image::load_from_memory(bytes).map_err(|e| decode_err(memory, e))?;
    to_image(&img, memory)
}

/// Converts a decoded raster to floats in `[0, 1]`; alpha is dropped.
fn to_image(img: &DynamicImage, path: &Path) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let (space, pixels) = if color.has_color() {
        (ColorSpace::Rgb, img.to_rgb32f().into_raw())
    } else {
        (ColorSpace::Gray, img.to_luma32f().into_raw())
    };
    Image::from_clamped(h, w, space, pixels).map_err(|e| decode_err(path, e))
}

/// Loads and validates a visible/infrared pair. Multi-channel infrared files
/// are averaged over their channels.
pub fn load_pair(visible_path: &Path, infrared_path: &Path) -> Result<AlignedPair> {
    let visible = open(visible_path)?;
    let ir = open(infrared_path)?;
    let infrared = if ir.channels() > 1 { ir.channel_mean() } else { ir };
    let id = visible_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    AlignedPair::new(visible, infrared, id)
}

/// Decodes an in-memory label PNG through a palette.
pub fn decode_label(bytes: &[u8], num_classes: usize, palette: &Palette, ignore_index: u16) -> Result<LabelMap> {
    let img = image::load_from_memory(bytes).map_err(|e| decode_err(Path::new("<memory>"), e))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    palette.decode(rgb.as_raw(), w, h, num_classes, ignore_index)
}

pub fn load_label(path: &Path, num_classes: usize, palette: &Palette, ignore_index: u16) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| decode_err(path, e))?;
    decode_label(&bytes, num_classes, palette, ignore_index).map_err(|e| match e {
        Error::Decode { reason, .. } => decode_err(path, reason),
        other => other,
    })
}

fn write_png(path: &Path, img: DynamicImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

/// Writes an image as 8-bit PNG (gray or RGB; YCbCr is converted to RGB).
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynimg = match img.color_space() {
        ColorSpace::Gray => {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, img.to_u8()).expect("buffer sized by Image"))
        }
        ColorSpace::Rgb => {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, img.to_u8()).expect("buffer sized by Image"))
        }
        ColorSpace::YCbCr => {
            let rgb = super::image::ycbcr_to_rgb(img)?;
            return save_image(path, &rgb);
        }
    };
    write_png(path, dynimg)
}

pub fn save_label(path: &Path, label: &LabelMap, palette: &Palette) -> Result<()> {
    let rgb = palette.render(label)?;
    let img = RgbImage::from_raw(label.width() as u32, label.height() as u32, rgb).expect("buffer sized by LabelMap");
    write_png(path, DynamicImage::ImageRgb8(img))
}
