//! Procedural visible/infrared scenes with exact segmentation ground truth.
//!
//! Shapes are painted back to front; the label keeps the topmost class. Every
//! shape of a thermal class is rendered hot (≥ 0.9) in the infrared plane.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{ColorSpace, Image};
use super::io::AlignedPair;
use super::label::{LabelMap, DEFAULT_IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::nn::ops::{blur_matrix, gaussian_kernel};

/// Lowest infrared level of a thermal-class pixel.
pub const THERMAL_FLOOR: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Corruption {
    #[default]
    None,
    LowLight,
    Fog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_size: (usize, usize),
    pub num_classes: usize,
    /// Inclusive range of shapes per scene.
    pub shapes_per_scene: (usize, usize),
    pub thermal_classes: BTreeSet<u16>,
    pub visible_corruption: Corruption,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: (96, 96),
            num_classes: 4,
            shapes_per_scene: (2, 4),
            thermal_classes: [1].into_iter().collect(),
            visible_corruption: Corruption::None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(text).map_err(|e| Error::config(format!("synth spec JSON: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::config("synthetic images must be at least 8x8"));
        }
        if h.saturating_mul(w) > 1 << 26 {
            return Err(Error::config("synthetic images are too large"));
        }
        if self.num_classes < 2 || self.num_classes > DEFAULT_IGNORE_INDEX as usize {
            return Err(Error::config("num_classes must be in [2, 255)"));
        }
        if self.shapes_per_scene.0 > self.shapes_per_scene.1 || self.shapes_per_scene.1 > 1000 {
            return Err(Error::config("shapes_per_scene range is invalid"));
        }
        if let Some(c) = self.thermal_classes.iter().find(|&&c| c as usize >= self.num_classes) {
            return Err(Error::config(format!("thermal class {c} is not a class id")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// Visible albedo of a class; spread over luminance by the golden ratio so
/// neighbouring ids stay distinguishable in gray.
fn class_albedo(class: u16) -> [f32; 3] {
    let l = 0.1 + 0.8 * ((class as f64 * 0.618_034).fract()) as f32;
    let tint = (class as f32 * 1.7).sin() * 0.12;
    [(l + tint).clamp(0.0, 1.0), l, (l - tint).clamp(0.0, 1.0)]
}

/// Generates one scene. The same `spec` and RNG state always give the same output.
pub fn synth_scene<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<(AlignedPair, LabelMap)> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let n = h * w;
    let noise = Normal::new(0.0f64, 1.0).expect("valid normal");

    // background: smooth color field plus fine texture in visible, flat and cool in infrared
    let (fy, fx, phase) = (
        rng.random_range(1.0..3.0),
        rng.random_range(1.0..3.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let base = rng.random_range(0.35..0.55);
    let mut vis = vec![0.0f32; n * 3];
    let mut ir = vec![0.0f32; n];
    let ir_base = rng.random_range(0.15..0.3);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
            let smooth = 0.08 * (std::f64::consts::TAU * (fy * u + fx * v) + phase).sin();
            let tex = 0.04 * noise.sample(rng);
            let g = base + smooth + tex;
            let i = y * w + x;
            vis[3 * i] = (g + 0.03) as f32;
            vis[3 * i + 1] = g as f32;
            vis[3 * i + 2] = (g - 0.03) as f32;
            ir[i] = (ir_base + 0.05 * u + 0.01 * noise.sample(rng)) as f32;
        }
    }
    let mut classes = vec![0u16; n];

    let count = rng.random_range(spec.shapes_per_scene.0..=spec.shapes_per_scene.1);
    let side = h.min(w) as f64;
    for _ in 0..count {
        let class = rng.random_range(1..spec.num_classes) as u16;
        let sh = rng.random_range(0.12 * side..=0.4 * side);
        let sw = rng.random_range(0.12 * side..=0.4 * side);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let shape = if rng.random_bool(0.5) {
            Shape::Rect {
                y0: cy - sh / 2.0,
                x0: cx - sw / 2.0,
                y1: cy + sh / 2.0,
                x1: cx + sw / 2.0,
            }
        } else {
            Shape::Ellipse {
                cy,
                cx,
                ry: sh / 2.0,
                rx: sw / 2.0,
            }
        };
        let albedo = class_albedo(class);
        let jitter = rng.random_range(-0.04..0.04) as f32;
        let thermal = spec.thermal_classes.contains(&class);
        let heat = if thermal {
            rng.random_range(0.93..0.98) as f32
        } else {
            rng.random_range(0.3..0.5) as f32
        };
        let striped = class.is_multiple_of(2);
        for y in 0..h {
            for x in 0..w {
                if !shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    continue;
                }
                let i = y * w + x;
                classes[i] = class;
                let stripe = if striped && (x / 3) % 2 == 0 { 0.08 } else { 0.0 };
                for c in 0..3 {
                    vis[3 * i + c] = albedo[c] + jitter + stripe + 0.02 * noise.sample(rng) as f32;
                }
                // bounded ripple keeps thermal pixels inside [heat - 0.02, heat + 0.02]
                let ripple = 0.02 * (2.0 * rng.random::<f32>() - 1.0);
                ir[i] = if thermal {
                    (heat + ripple).max(THERMAL_FLOOR)
                } else {
                    heat + ripple
                };
            }
        }
    }

    match spec.visible_corruption {
        Corruption::None => {}
        Corruption::LowLight => {
            for v in &mut vis {
                *v = *v * 0.2 + 0.01 * noise.sample(rng) as f32;
            }
        }
        Corruption::Fog => {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let alpha = blurred_field(&raw, h, w);
            for i in 0..n {
                let a = (0.3 + 0.5 * alpha[i]) as f32;
                for c in 0..3 {
                    vis[3 * i + c] = vis[3 * i + c] * (1.0 - a) + 0.8 * a;
                }
            }
        }
    }

    let visible = Image::from_clamped(h, w, ColorSpace::Rgb, vis)?;
    let infrared = Image::from_clamped(h, w, ColorSpace::Gray, ir)?;
    let pair = AlignedPair::new(visible, infrared, "synth")?;
    let label = LabelMap::new(h, w, classes, spec.num_classes, DEFAULT_IGNORE_INDEX)?;
    Ok((pair, label))
}

/// Heavily blurred random field rescaled to `[0, 1]`.
fn blurred_field(raw: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = (h.min(w) / 4) | 1;
    let taps = gaussian_kernel(k, k as f64 / 4.0);
    let rows = blur_matrix(h, &taps);
    let cols = blur_matrix(w, &taps);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..w).map(|j| cols[x * w + j] * raw[y * w + j]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..h).map(|i| rows[y * h + i] * tmp[i * w + x]).sum();
        }
    }
    let (lo, hi) = out
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    out.iter().map(|v| (v - lo) / span).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> SynthSpec {
        SynthSpec::default()
    }

    #[test]
    fn zero_shapes_is_background_only() {
        let s = SynthSpec {
            shapes_per_scene: (0, 0),
            ..spec()
        };
        let (_, label) = synth_scene(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(label.classes().iter().all(|&c| c == 0));
    }

    #[test]
    fn single_thermal_shape_is_hot() {
        let s = SynthSpec {
            num_classes: 2,
            shapes_per_scene: (1, 1),
            thermal_classes: [1].into_iter().collect(),
            ..spec()
        };
        for seed in 0..10 {
            let (pair, label) = synth_scene(&s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            // mask-average oracle over the generated arrays
            let (mut sum, mut count) = (0.0f64, 0usize);
            for y in 0..96 {
                for x in 0..96 {
                    if label.get(y, x) == 1 {
                        sum += pair.infrared.get(y, x, 0) as f64;
                        count += 1;
                    }
                }
            }
            assert!(count > 0, "seed {seed} drew no visible pixels");
            assert!(sum / count as f64 >= 0.9, "seed {seed}: {}", sum / count as f64);
        }
    }

    #[test]
    fn every_thermal_pixel_clears_the_floor() {
        let s = SynthSpec {
            shapes_per_scene: (3, 6),
            thermal_classes: [1, 3].into_iter().collect(),
            ..spec()
        };
        for corruption in [Corruption::None, Corruption::LowLight, Corruption::Fog] {
            let s = SynthSpec {
                visible_corruption: corruption,
                ..s.clone()
            };
            let (pair, label) = synth_scene(&s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            for (i, &c) in label.classes().iter().enumerate() {
                if s.thermal_classes.contains(&c) {
                    assert!(pair.infrared.pixels()[i] >= THERMAL_FLOOR);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let s = SynthSpec {
            visible_corruption: Corruption::Fog,
            ..spec()
        };
        let a = synth_scene(&s, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = synth_scene(&s, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(&s, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn low_light_darkens_visible() {
        let dark = SynthSpec {
            visible_corruption: Corruption::LowLight,
            ..spec()
        };
        let (a, _) = synth_scene(&spec(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (b, _) = synth_scene(&dark, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mean = |i: &Image| i.pixels().iter().map(|&v| v as f64).sum::<f64>() / i.pixels().len() as f64;
        assert!(mean(&b.visible) < 0.5 * mean(&a.visible));
    }

    #[test]
    fn validates_spec() {
        let bad = |s: SynthSpec| matches!(s.validate(), Err(Error::Config(_)));
        assert!(bad(SynthSpec {
            num_classes: 1,
            ..spec()
        }));
        assert!(bad(SynthSpec {
            thermal_classes: [7].into_iter().collect(),
            ..spec()
        }));
        assert!(bad(SynthSpec {
            image_size: (4, 96),
            ..spec()
        }));
        assert!(bad(SynthSpec {
            shapes_per_scene: (3, 1),
            ..spec()
        }));
    }

    #[test]
    fn json_round_trip() {
        let s = SynthSpec {
            visible_corruption: Corruption::LowLight,
            ..spec()
        };
        assert_eq!(SynthSpec::from_json(&s.to_json()).unwrap(), s);
        assert!(SynthSpec::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
