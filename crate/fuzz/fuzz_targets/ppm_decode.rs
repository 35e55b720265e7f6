//! Frame files are attacker-shaped inputs when manifests point at foreign
//! data. Decoding must never panic, accepted frames must be consistent,
//! and re-encoding may move each channel by at most one quantization step.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((w, h, rgb)) = gat::ppm::decode_ppm(data) else { return };
    assert_eq!(rgb.len(), w * h * 3, "payload length must match the header");
    assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)), "channels must land in [0, 1]");
    let encoded = gat::ppm::encode_ppm(w, h, &rgb);
    let (w2, h2, rgb2) = gat::ppm::decode_ppm(&encoded).expect("own encoding must decode");
    assert_eq!((w, h), (w2, h2));
    for (a, b) in rgb.iter().zip(&rgb2) {
        assert!((a - b).abs() <= 0.5 / 255.0, "round trip moved a channel by {}", (a - b).abs());
    }
});
