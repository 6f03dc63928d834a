use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Default reserved label for "do not score this pixel".
pub const DEFAULT_IGNORE_INDEX: u16 = 255;

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: Vec<u16>,
    num_classes: usize,
    ignore_index: u16,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u16>, num_classes: usize, ignore_index: u16) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if (ignore_index as usize) < num_classes {
            return Err(Error::config(format!(
                "ignore_index {ignore_index} collides with a class id (num_classes = {num_classes})"
            )));
        }
        if classes.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} map",
                classes.len()
            )));
        }
        if let Some(bad) = classes
            .iter()
            .find(|&&c| c != ignore_index && c as usize >= num_classes)
        {
            return Err(Error::config(format!(
                "label {bad} outside [0, {num_classes}) and not the ignore index"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            num_classes,
            ignore_index,
        })
    }

    pub fn filled(height: usize, width: usize, class: u16, num_classes: usize, ignore_index: u16) -> Result<Self> {
        Self::new(height, width, vec![class; height * width], num_classes, ignore_index)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u16 {
        self.ignore_index
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.classes[y * self.width + x]
    }
}

/// Color → class mapping read from JSON objects like `{"0,0,0": 0, "255,0,0": 1}`.
/// Keys may also be a single gray level (`"128"`), meaning `"128,128,128"`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Palette {
    map: BTreeMap<[u8; 3], u16>,
}

impl Palette {
    pub fn new(entries: impl IntoIterator<Item = ([u8; 3], u16)>) -> Self {
        Self {
            map: entries.into_iter().collect(),
        }
    }

    /// A fixed, well-separated color per class id; `ignore_index` renders white.
    pub fn default_for(num_classes: usize, ignore_index: u16) -> Self {
        const BASE: [[u8; 3]; 8] = [
            [0, 0, 0],
            [220, 20, 60],
            [0, 128, 255],
            [255, 200, 0],
            [0, 200, 80],
            [160, 32, 240],
            [0, 220, 220],
            [255, 120, 0],
        ];
        let mut entries: Vec<([u8; 3], u16)> = (0..num_classes)
            .map(|c| {
                let color = if c < BASE.len() {
                    BASE[c]
                } else {
                    // deterministic spread for larger class counts
                    let h = (c as u32).wrapping_mul(2_654_435_761);
                    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8 | 1]
                };
                (color, c as u16)
            })
            .collect();
        entries.push(([255, 255, 255], ignore_index));
        Self::new(entries)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, u64> =
            serde_json::from_str(text).map_err(|e| Error::config(format!("palette JSON: {e}")))?;
        let mut map = BTreeMap::new();
        for (key, class) in raw {
            let class = u16::try_from(class).map_err(|_| Error::config(format!("palette class {class} too large")))?;
            let color = parse_color_key(&key)?;
            if let Some(prev) = map.insert(color, class) {
                if prev != class {
                    return Err(Error::config(format!("palette color {key} mapped twice")));
                }
            }
        }
        Ok(Self { map })
    }

    pub fn to_json(&self) -> String {
        let obj: BTreeMap<String, u16> = self
            .map
            .iter()
            .map(|(c, &id)| (format!("{},{},{}", c[0], c[1], c[2]), id))
            .collect();
        serde_json::to_string_pretty(&obj).expect("palette serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn class_of(&self, color: [u8; 3]) -> Option<u16> {
        self.map.get(&color).copied()
    }

    /// The smallest color mapped to `class`.
    pub fn color_of(&self, class: u16) -> Option<[u8; 3]> {
        self.map.iter().find(|(_, &c)| c == class).map(|(k, _)| *k)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Maps decoded RGB samples to a label map.
    pub fn decode(
        &self,
        rgb: &[u8],
        width: usize,
        height: usize,
        num_classes: usize,
        ignore_index: u16,
    ) -> Result<LabelMap> {
        if rgb.len() != width * height * 3 {
            return Err(Error::shape("label buffer length does not match its size"));
        }
        for (&color, &class) in &self.map {
            if class != ignore_index && class as usize >= num_classes {
                return Err(Error::config(format!(
                    "palette maps {color:?} to class {class}, outside [0, {num_classes})"
                )));
            }
        }
        let mut classes = Vec::with_capacity(width * height);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            let color = [px[0], px[1], px[2]];
            match self.class_of(color) {
                Some(c) => classes.push(c),
                None => {
                    return Err(Error::UnknownColor {
                        color,
                        x: (i % width) as u32,
                        y: (i / width) as u32,
                    })
                }
            }
        }
        LabelMap::new(height, width, classes, num_classes, ignore_index)
    }

    /// Renders a label map into RGB samples; classes without a color are an error.
    pub fn render(&self, label: &LabelMap) -> Result<Vec<u8>> {
        let mut lut: BTreeMap<u16, [u8; 3]> = BTreeMap::new();
        let mut out = Vec::with_capacity(label.classes.len() * 3);
        for &c in &label.classes {
            let color = match lut.get(&c) {
                Some(col) => *col,
                None => {
                    let col = self
                        .color_of(c)
                        .ok_or_else(|| Error::config(format!("palette has no color for class {c}")))?;
                    lut.insert(c, col);
                    col
                }
            };
            out.extend_from_slice(&color);
        }
        Ok(out)
    }
}

fn parse_color_key(key: &str) -> Result<[u8; 3]> {
    let parts: Vec<&str> = key.split(',').map(str::trim).collect();
    let num = |s: &str| {
        s.parse::<u8>()
            .map_err(|_| Error::config(format!("bad palette color component {s:?} in {key:?}")))
    };
    match parts.as_slice() {
        [g] => {
            let g = num(g)?;
            Ok([g, g, g])
        }
        [r, g, b] => Ok([num(r)?, num(g)?, num(b)?]),
        _ => Err(Error::config(format!("palette key {key:?} is not \"R,G,B\""))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rgb_and_gray_keys() {
        let p = Palette::from_json(r#"{"0,0,0": 0, "10, 20, 30": 2, "128": 1}"#).unwrap();
        assert_eq!(p.class_of([10, 20, 30]), Some(2));
        assert_eq!(p.class_of([128, 128, 128]), Some(1));
        assert_eq!(p.class_of([1, 1, 1]), None);
    }

    #[test]
    fn rejects_malformed_palettes() {
        assert!(Palette::from_json("[1,2]").is_err());
        assert!(Palette::from_json(r#"{"1,2": 0}"#).is_err());
        assert!(Palette::from_json(r#"{"300,0,0": 0}"#).is_err());
        assert!(Palette::from_json(r#"{"1,1,1": 0, "1": 1}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = Palette::default_for(14, 255);
        assert_eq!(Palette::from_json(&p.to_json()).unwrap(), p);
        assert_eq!(p.len(), 15);
    }

    #[test]
    fn decode_reports_unknown_color_position() {
        let p = Palette::new([([0, 0, 0], 0)]);
        let mut rgb = vec![0u8; 8 * 8 * 3];
        rgb[(2 * 8 + 5) * 3] = 9;
        match p.decode(&rgb, 8, 8, 2, 255) {
            Err(Error::UnknownColor { color, x, y }) => {
                assert_eq!((color, x, y), ([9, 0, 0], 5, 2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decode_validates_palette_classes() {
        let p = Palette::new([([0, 0, 0], 5)]);
        assert!(matches!(p.decode(&[0u8; 192], 8, 8, 4, 255), Err(Error::Config(_))));
    }

    #[test]
    fn render_then_decode_is_identity() {
        let p = Palette::default_for(4, 255);
        let classes: Vec<u16> = (0..64).map(|i| if i % 9 == 0 { 255 } else { (i % 4) as u16 }).collect();
        let l = LabelMap::new(8, 8, classes, 4, 255).unwrap();
        let rgb = p.render(&l).unwrap();
        assert_eq!(p.decode(&rgb, 8, 8, 4, 255).unwrap(), l);
    }

    #[test]
    fn label_map_validates_ids() {
        assert!(LabelMap::new(1, 2, vec![0, 4], 4, 255).is_err());
        assert!(LabelMap::new(1, 2, vec![0, 255], 4, 255).is_ok());
        assert!(LabelMap::new(1, 2, vec![0, 1], 4, 2).is_err());
    }
}
