//! Image pairs, label maps, augmentation and the synthetic scene generator.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod io;
pub mod label;
pub mod synth;

pub use self::augment::{augment, AugConfig};
pub use self::dataset::Sample;
pub use self::image::{reattach_chroma, rgb_to_ycbcr, ycbcr_to_rgb, ColorSpace, Image};
pub use self::io::{load_label, load_pair, AlignedPair};
pub use self::label::{LabelMap, Palette, DEFAULT_IGNORE_INDEX};
pub use self::synth::{synth_scene, Corruption, SynthSpec};
