#![no_main]

use libfuzzer_sys::fuzz_target;
use vidnet::synthdata::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = Manifest::parse(text) {
            for v in &m.videos {
                assert!(!v.name.contains('/'));
            }
        }
    }
});
