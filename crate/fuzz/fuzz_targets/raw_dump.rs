//! Raw frame-dump decoding must never panic, over-allocate, or hang; any
//! accepted dump must survive an encode/decode cycle bit-for-bit.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(frames) = rrpcp::io::decode_frames(data) else {
        return;
    };
    let encoded = rrpcp::io::encode_frames(&frames).expect("decoded dump re-encodes");
    let again = rrpcp::io::decode_frames(&encoded).expect("re-encoded dump decodes");
    assert_eq!(again.shape, frames.shape);
    assert_eq!(again.len(), frames.len());
    for (a, b) in again.frames.iter().zip(&frames.frames) {
        assert!(
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            "raw dump round trip altered a bit pattern"
        );
    }
});
