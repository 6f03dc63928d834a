#![no_main]

use fuseg_core::data::Palette;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = Palette::from_json(text) {
        assert_eq!(Palette::from_json(&p.to_json()).unwrap(), p);
    }
});
