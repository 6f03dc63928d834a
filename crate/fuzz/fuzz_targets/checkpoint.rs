#![no_main]

use fuseg_cli::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

// Layout: u16 little-endian manifest length, manifest bytes, blob bytes.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = (u16::from_le_bytes([data[0], data[1]]) as usize).min(data.len() - 2);
    let (manifest, blob) = data[2..].split_at(n);
    if let Ok(ck) = Checkpoint::decode(manifest, blob) {
        assert_eq!(ck.blob().len(), blob.len());
    }
});
