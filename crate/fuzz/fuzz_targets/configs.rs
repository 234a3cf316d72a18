#![no_main]

use libfuzzer_sys::fuzz_target;
use vidnet::model::ModelConfig;
use vidnet::synthdata::SynthConfig;
use vidnet::training::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = serde_json::from_str::<TrainConfig>(text) {
        if c.validate().is_ok() {
            let _ = c.model_config().validate();
        }
    }
    if let Ok(c) = serde_json::from_str::<SynthConfig>(text) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_str::<ModelConfig>(text) {
        let _ = c.validate();
    }
});
