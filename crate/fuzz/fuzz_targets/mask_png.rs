#![no_main]

use libfuzzer_sys::fuzz_target;
use vidnet::media::MaskFrame;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = MaskFrame::decode(data) {
        assert!(m.area() <= (m.height() * m.width()) as usize);
    }
});
