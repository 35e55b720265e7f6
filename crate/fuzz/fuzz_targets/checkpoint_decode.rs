//! Checkpoints are the one binary format in the project; the decoder must
//! reject arbitrary bytes gracefully, and accepted bytes must re-encode to
//! a byte-identical fixpoint.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((cfg, params)) = gat::checkpoint::decode_checkpoint(data) else { return };
    let encoded = gat::checkpoint::encode_checkpoint(&cfg, &params).expect("decoded layout is valid");
    let (cfg2, params2) = gat::checkpoint::decode_checkpoint(&encoded).expect("own encoding must decode");
    let second = gat::checkpoint::encode_checkpoint(&cfg2, &params2).expect("decoded layout is valid");
    assert_eq!(encoded, second, "encoding must be a fixpoint after one decode");
});
