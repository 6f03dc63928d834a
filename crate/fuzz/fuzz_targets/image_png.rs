#![no_main]

use fuseg_core::data::io::decode_image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
