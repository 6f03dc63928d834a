//! On-disk dataset layout: `root/{Visible,Infrared,Label}/<id>.png` plus an
//! optional `root/palette.json`.

use std::path::{Path, PathBuf};

use super::io::{load_label, load_pair, save_image, save_label, AlignedPair};
use super::label::{LabelMap, Palette};
use crate::error::{Error, Result};

pub const VISIBLE_DIR: &str = "Visible";
pub const INFRARED_DIR: &str = "Infrared";
pub const LABEL_DIR: &str = "Label";
pub const PALETTE_FILE: &str = "palette.json";

pub fn visible_path(root: &Path, id: &str) -> PathBuf {
    root.join(VISIBLE_DIR).join(format!("{id}.png"))
}

pub fn infrared_path(root: &Path, id: &str) -> PathBuf {
    root.join(INFRARED_DIR).join(format!("{id}.png"))
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join(LABEL_DIR).join(format!("{id}.png"))
}

/// Sorted ids of every visible image that has an infrared partner.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(VISIBLE_DIR);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(id) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
            continue;
        };
        if infrared_path(root, &id).is_file() {
            ids.push(id);
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn write_scene(
    root: &Path,
    id: &str,
    pair: &AlignedPair,
    label: Option<&LabelMap>,
    palette: &Palette,
) -> Result<()> {
    save_image(&visible_path(root, id), &pair.visible)?;
    save_image(&infrared_path(root, id), &pair.infrared)?;
    if let Some(label) = label {
        save_label(&label_path(root, id), label, palette)?;
    }
    Ok(())
}

pub fn write_palette(root: &Path, palette: &Palette) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(PALETTE_FILE);
    std::fs::write(&path, palette.to_json()).map_err(|e| Error::io(&path, e))
}

/// The dataset's own palette when present, else the default one.
pub fn read_palette(root: &Path, num_classes: usize, ignore_index: u16) -> Result<Palette> {
    let path = root.join(PALETTE_FILE);
    if path.is_file() {
        Palette::load(&path)
    } else {
        Ok(Palette::default_for(num_classes, ignore_index))
    }
}

pub fn load_scene_pair(root: &Path, id: &str) -> Result<AlignedPair> {
    let mut pair = load_pair(&visible_path(root, id), &infrared_path(root, id))?;
    pair.id = id.to_string();
    Ok(pair)
}

pub fn load_scene(
    root: &Path,
    id: &str,
    num_classes: usize,
    palette: &Palette,
    ignore_index: u16,
) -> Result<(AlignedPair, LabelMap)> {
    let pair = load_scene_pair(root, id)?;
    let label = load_label(&label_path(root, id), num_classes, palette, ignore_index)?;
    if (label.height(), label.width()) != (pair.height(), pair.width()) {
        return Err(Error::shape(format!("label of {id} does not match its images")));
    }
    Ok((pair, label))
}

/// Planar network inputs of one scene: visible luma, infrared, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub visible: Vec<f32>,
    pub infrared: Vec<f32>,
    pub label: Option<Vec<u16>>,
}

impl Sample {
    pub fn new(pair: &AlignedPair, label: Option<&LabelMap>) -> Result<Self> {
        Ok(Self {
            id: pair.id.clone(),
            height: pair.height(),
            width: pair.width(),
            visible: pair.visible.luma()?,
            infrared: pair.infrared.pixels().to_vec(),
            label: label.map(|l| l.classes().to_vec()),
        })
    }
}
