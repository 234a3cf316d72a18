#![no_main]

use libfuzzer_sys::fuzz_target;
use vidnet::training::Perturbation;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(p) = text.parse::<Perturbation>() {
            assert_eq!(p.to_string().parse::<Perturbation>().ok(), Some(p));
        }
    }
});
