#![no_main]

use fuseg_core::data::io::decode_label;
use fuseg_core::data::Palette;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let palette = Palette::default_for(4, 255);
    if let Ok(label) = decode_label(data, 4, &palette, 255) {
        assert!(label.classes().iter().all(|&c| c < 4 || c == 255));
    }
});
