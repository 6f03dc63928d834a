#![no_main]

use fuseg_core::data::{synth_scene, SynthSpec};
use libfuzzer_sys::fuzz_target;
use rand::SeedableRng;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = toml::from_str::<SynthSpec>(text) else {
        return;
    };
    if spec.validate().is_err() || spec.image_size.0 * spec.image_size.1 > 64 * 64 {
        return;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let (pair, label) = synth_scene(&spec, &mut rng).unwrap();
    assert_eq!((label.height(), label.width()), spec.image_size);
    assert_eq!(pair.height(), spec.image_size.0);
});
