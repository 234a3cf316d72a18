#![no_main]

use libfuzzer_sys::fuzz_target;
use vidnet::checkpoint::{decode_archive, encode_archive};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode_archive(data) {
        let again = encode_archive(&tensors).expect("decoded tensors re-encode");
        let back = decode_archive(&again).expect("re-encoded archive decodes");
        assert_eq!(back.len(), tensors.len());
    }
});
