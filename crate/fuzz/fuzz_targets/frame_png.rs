#![no_main]

use libfuzzer_sys::fuzz_target;
use vidnet::media::{compute_ela, Frame};

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = Frame::decode(data) {
        // Keep the ELA pass cheap on large decodes.
        if u64::from(f.height()) * u64::from(f.width()) <= 1 << 16 {
            let _ = compute_ela(&f, 50);
        }
    }
});
