//! Replays the checked-in fuzz corpus through the same checks the fuzz
//! targets run, so the seeds stay meaningful without a fuzzing toolchain.

use std::path::{Path, PathBuf};

use fuseg_cli::checkpoint::Checkpoint;
use fuseg_cli::config::Config;
use fuseg_core::data::io::{decode_image, decode_label};
use fuseg_core::data::{synth_scene, Palette, SynthSpec};
use fuseg_core::Error;
use rand::SeedableRng;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut seeds: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    seeds.sort();
    assert!(!seeds.is_empty(), "no seeds for {target}");
    seeds
}

fn split_checkpoint(data: &[u8]) -> (&[u8], &[u8]) {
    let n = (u16::from_le_bytes([data[0], data[1]]) as usize).min(data.len() - 2);
    data[2..].split_at(n)
}

#[test]
fn checkpoint_seeds() {
    for (name, data) in corpus("checkpoint") {
        let (manifest, blob) = split_checkpoint(&data);
        let result = Checkpoint::decode(manifest, blob);
        if let Ok(ck) = &result {
            assert_eq!(ck.blob().len(), blob.len(), "{name}");
        }
        match name.as_str() {
            "valid" | "empty_table" => assert!(result.is_ok(), "{name}: {:?}", result.err()),
            "truncated_blob" | "bad_dtype" => assert!(matches!(result, Err(Error::CorruptBlob(_))), "{name}"),
            "foreign_version" => assert!(matches!(result, Err(Error::VersionMismatch { found: 2, .. })), "{name}"),
            _ => {}
        }
    }
}

#[test]
fn config_seeds() {
    for (name, data) in corpus("config") {
        let text = std::str::from_utf8(&data).unwrap();
        let result = Config::from_toml(text);
        if let Ok(cfg) = &result {
            assert_eq!(&Config::from_toml(&cfg.to_toml()).unwrap(), cfg, "{name}");
        }
        let expect_ok = !matches!(name.as_str(), "unknown_key.toml" | "class_mismatch.toml");
        assert_eq!(result.is_ok(), expect_ok, "{name}");
    }
}

#[test]
fn palette_seeds() {
    for (name, data) in corpus("palette") {
        let text = std::str::from_utf8(&data).unwrap();
        if let Ok(p) = Palette::from_json(text) {
            assert_eq!(Palette::from_json(&p.to_json()).unwrap(), p, "{name}");
        }
    }
}

#[test]
fn label_png_seeds() {
    let palette = Palette::default_for(4, 255);
    for (name, data) in corpus("label_png") {
        let label = decode_label(&data, 4, &palette, 255).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(label.classes().iter().all(|&c| c < 4 || c == 255), "{name}");
        assert!(
            decode_label(&data[..data.len() / 2], 4, &palette, 255).is_err(),
            "{name} truncated"
        );
    }
}

#[test]
fn image_png_seeds() {
    for (name, data) in corpus("image_png") {
        let img = decode_image(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)), "{name}");
        assert!(decode_image(&data[..data.len() / 2]).is_err(), "{name} truncated");
    }
}

#[test]
fn synth_spec_seeds() {
    for (name, data) in corpus("synth_spec") {
        let spec: SynthSpec = toml::from_str(std::str::from_utf8(&data).unwrap()).unwrap();
        spec.validate().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
        let (pair, label) = synth_scene(&spec, &mut rng).unwrap();
        assert_eq!((label.height(), label.width()), spec.image_size, "{name}");
        assert_eq!((pair.height(), pair.width()), spec.image_size, "{name}");
    }
}
