use image::{GrayImage, Luma, Rgb, RgbImage};
use vidnet::loss_metrics::ProbabilityMap;
use vidnet::media::Frame;

/// Probability `p` as the gray level `round_half_even(p · 255)`.
pub fn probability_level(p: f32) -> u8 {
    to_level(p.clamp(0.0, 1.0) * 255.0)
}

fn to_level(scaled: f32) -> u8 {
    scaled.round_ties_even() as u8
}

pub fn probability_image(map: &ProbabilityMap) -> GrayImage {
    GrayImage::from_fn(map.width, map.height, |x, y| {
        Luma([probability_level(map.values[(y * map.width + x) as usize])])
    })
}

/// The frame with detected pixels (p ≥ threshold) blended half-way to red.
pub fn overlay_image(frame: &Frame, map: &ProbabilityMap, threshold: f32) -> RgbImage {
    let img = frame.image();
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let Rgb([r, g, b]) = *img.get_pixel(x, y);
        if map.values[(y * map.width + x) as usize] >= threshold {
            Rgb([r / 2 + 128, g / 2, b / 2])
        } else {
            Rgb([r, g, b])
        }
    })
}
