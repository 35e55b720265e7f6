//! Sample manifests arrive as JSONL from other tools; parsing must never
//! panic, and anything accepted must survive a canonical round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(records) = gat::manifest::parse_manifest(text) else { return };
    let canonical = gat::manifest::manifest_to_string(&records);
    let again = gat::manifest::parse_manifest(&canonical).expect("canonical text must parse");
    assert_eq!(records, again, "canonical serialization must be stable");
});
