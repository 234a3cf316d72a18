//! Replays the checked-in fuzz seeds through the parser entry points.

use std::fs;
use std::path::PathBuf;

use vidnet::checkpoint::{decode_archive, encode_archive, parse_meta};
use vidnet::media::{Frame, MaskFrame};
use vidnet::synthdata::{Manifest, SynthConfig};
use vidnet::training::{Perturbation, TrainConfig};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn archives() {
    let mut accepted = 0;
    for (name, bytes) in seeds("checkpoint_archive") {
        if let Ok(t) = decode_archive(&bytes) {
            assert_eq!(decode_archive(&encode_archive(&t).unwrap()).unwrap(), t, "{name}");
            accepted += 1;
        }
    }
    assert!(accepted >= 2);
    assert!(decode_archive(
        &seeds("checkpoint_archive")
            .iter()
            .find(|s| s.0 == "rank2.safetensors")
            .unwrap()
            .1
    )
    .is_err());
}

#[test]
fn sidecars() {
    for (name, bytes) in seeds("checkpoint_meta") {
        parse_meta(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn manifests() {
    for (name, bytes) in seeds("manifest") {
        let parsed = Manifest::parse(std::str::from_utf8(&bytes).unwrap());
        assert_eq!(parsed.is_ok(), name == "synth.json", "{name}");
    }
}

#[test]
fn configs() {
    for (name, bytes) in seeds("configs") {
        let text = std::str::from_utf8(&bytes).unwrap();
        let train = serde_json::from_str::<TrainConfig>(text);
        let synth = serde_json::from_str::<SynthConfig>(text);
        if name == "unknown_key.json" {
            assert!(train.is_err() && synth.is_err());
        }
    }
}

#[test]
fn images() {
    for (name, bytes) in seeds("frame_png") {
        let ok = Frame::decode(&bytes).is_ok();
        assert_eq!(ok, name != "tiny.png", "{name}");
    }
    for (name, bytes) in seeds("mask_png") {
        let m = MaskFrame::decode(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(m.area() <= (m.height() * m.width()) as usize);
    }
}

#[test]
fn perturbation_names() {
    for (name, bytes) in seeds("perturbation_name") {
        let parsed = std::str::from_utf8(&bytes).unwrap().parse::<Perturbation>();
        assert_eq!(parsed.is_ok(), !matches!(name.as_str(), "jpeg0" | "snrNaN"), "{name}");
        if let Ok(p) = parsed {
            assert_eq!(p.to_string().parse::<Perturbation>().unwrap(), p);
        }
    }
}
