//! Frames, masks, JPEG round-tripping, error level analysis and the
//! perturbations applied to test videos.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{kernels, Tensor};

/// Smallest frame side the encoder accepts (four 2× poolings).
pub const MIN_SIDE: u32 = 16;

/// JPEG quality used to compute ELA frames.
pub const ELA_QUALITY: u8 = 50;

/// An 8-bit RGB video frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame(RgbImage);

impl Frame {
    pub fn new(image: RgbImage) -> Result<Self> {
        if image.height() < MIN_SIDE || image.width() < MIN_SIDE {
            return Err(Error::arg(format!(
                "frame {}x{} is smaller than {MIN_SIDE}x{MIN_SIDE}",
                image.height(),
                image.width()
            )));
        }
        Ok(Frame(image))
    }

    /// Builds a frame from interleaved RGB bytes in row-major order.
    pub fn from_raw(height: u32, width: u32, rgb: Vec<u8>) -> Result<Self> {
        let expected = height as usize * width as usize * 3;
        if rgb.len() != expected {
            return Err(Error::arg(format!(
                "expected {expected} bytes for a {height}x{width} RGB frame, got {} (not RGB?)",
                rgb.len()
            )));
        }
        Self::new(RgbImage::from_raw(width, height, rgb).expect("length checked"))
    }

    pub fn filled(height: u32, width: u32, rgb: [u8; 3]) -> Result<Self> {
        Self::new(RgbImage::from_pixel(width, height, image::Rgb(rgb)))
    }

    /// Decodes a PNG (or any format `image` recognizes) held in memory.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::new(image::load_from_memory(bytes)?.to_rgb8())
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn image(&self) -> &RgbImage {
        &self.0
    }

    pub fn into_image(self) -> RgbImage {
        self.0
    }

    /// Interleaved RGB bytes.
    pub fn pixels(&self) -> &[u8] {
        self.0.as_raw()
    }

    pub fn flip_horizontal(&self) -> Frame {
        Frame(image::imageops::flip_horizontal(&self.0))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.0.save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Absolute difference between a frame and its JPEG recompression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElaFrame {
    pub pixels: RgbImage,
    pub source_quality: u8,
}

impl ElaFrame {
    pub fn as_frame(&self) -> Frame {
        Frame(self.pixels.clone())
    }

    pub fn is_zero(&self) -> bool {
        self.pixels.as_raw().iter().all(|&v| v == 0)
    }

    pub fn mean(&self) -> f64 {
        let raw = self.pixels.as_raw();
        raw.iter().map(|&v| v as f64).sum::<f64>() / raw.len().max(1) as f64
    }
}

/// Binary ground-truth mask; one byte per pixel, values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskFrame {
    height: u32,
    width: u32,
    bits: Vec<u8>,
}

impl MaskFrame {
    pub fn new(height: u32, width: u32, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height as usize * width as usize {
            return Err(Error::arg(format!(
                "mask {height}x{width} needs {} values, got {}",
                height as usize * width as usize,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::arg("mask values must be 0 or 1"));
        }
        Ok(MaskFrame { height, width, bits })
    }

    pub fn empty(height: u32, width: u32) -> Self {
        MaskFrame {
            height,
            width,
            bits: vec![0; height as usize * width as usize],
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: u32, x: u32) -> bool {
        self.bits[(y * self.width + x) as usize] == 1
    }

    pub fn set(&mut self, y: u32, x: u32, on: bool) {
        self.bits[(y * self.width + x) as usize] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.bits.len().max(1) as f64
    }

    pub fn flip_horizontal(&self) -> MaskFrame {
        let w = self.width as usize;
        let mut bits = self.bits.clone();
        for row in bits.chunks_mut(w) {
            row.reverse();
        }
        MaskFrame { bits, ..*self }
    }

    /// Reads a grayscale PNG; intensities of 128 and above are foreground.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = img.dimensions();
        let bits = img.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
        Self::new(h, w, bits)
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(y, x) { 255 } else { 0 }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// How 8-bit frames map to network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Normalization {
    /// `x / 255 - 0.5`.
    #[default]
    Centered,
    /// `(x / 255 - mean[c]) / std[c]`, for pretrained backbones.
    ChannelStats { mean: [f64; 3], std: [f64; 3] },
}

/// Channels-first network input with its declared value range.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTensor {
    /// `1×3×H×W`.
    pub values: Tensor<f32>,
    pub range: (f32, f32),
}

fn check_quality(quality: u8) -> Result<()> {
    if !(1..=100).contains(&quality) {
        return Err(Error::arg(format!("JPEG quality {quality} outside 1..=100")));
    }
    Ok(())
}

/// Baseline JPEG (4:4:4) encode/decode of an RGB image at `quality`.
pub fn jpeg_roundtrip_image(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    check_quality(quality)?;
    Ok(crate::jpeg::roundtrip(img, quality))
}

pub fn jpeg_roundtrip(frame: &Frame, quality: u8) -> Result<Frame> {
    Ok(Frame(jpeg_roundtrip_image(&frame.0, quality)?))
}

/// Error level analysis: `|frame - jpeg(frame, quality)|` per channel.
pub fn compute_ela(frame: &Frame, quality: u8) -> Result<ElaFrame> {
    let recompressed = jpeg_roundtrip(frame, quality)?;
    let mut pixels = frame.0.clone();
    for (d, &r) in pixels.iter_mut().zip(recompressed.0.iter()) {
        *d = d.abs_diff(r);
    }
    Ok(ElaFrame {
        pixels,
        source_quality: quality,
    })
}

fn check_snr(snr_db: f64) -> Result<()> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::arg(format!("SNR {snr_db} dB is not usable")));
    }
    Ok(())
}

/// Mean squared intensity over every channel value, in the 0..255 scale.
pub fn signal_power(frame: &Frame) -> f64 {
    let raw = frame.pixels();
    raw.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / raw.len() as f64
}

/// The zero-mean Gaussian noise field [`add_gaussian_noise`] adds, one
/// sample per channel value, before clamping.
pub fn gaussian_noise_field(frame: &Frame, snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    check_snr(snr_db)?;
    let n = frame.pixels().len();
    if snr_db == f64::INFINITY {
        return Ok(vec![0.0; n]);
    }
    let sigma = (signal_power(frame) / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect())
}

/// Adds Gaussian noise at the requested signal-to-noise ratio, then clamps
/// and rounds (half to even) back to 8 bits.
pub fn add_gaussian_noise(frame: &Frame, snr_db: f64, seed: u64) -> Result<Frame> {
    let noise = gaussian_noise_field(frame, snr_db, seed)?;
    let mut out = frame.0.clone();
    for (p, n) in out.iter_mut().zip(noise) {
        *p = (*p as f64 + n).clamp(0.0, 255.0).round_ties_even() as u8;
    }
    Ok(Frame(out))
}

/// Bilinear resize with half-pixel centres.
pub fn resize_frame(frame: &Frame, height: u32, width: u32) -> Result<Frame> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::arg(format!(
            "target size {height}x{width} below {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    let (h, w) = (frame.height() as usize, frame.width() as usize);
    let t = Tensor::<f64>::from_fn([1, 3, h, w], |[_, c, y, x]| {
        frame.0.get_pixel(x as u32, y as u32)[c] as f64
    });
    let inv = (h as f64 / height as f64, w as f64 / width as f64);
    let r = kernels::bilinear(&t, height as usize, width as usize, inv);
    let img = RgbImage::from_fn(width, height, |x, y| {
        let px = |c: usize| r.at([0, c, y as usize, x as usize]).clamp(0.0, 255.0).round_ties_even() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    Frame::new(img)
}

/// Nearest-neighbor mask resize.
pub fn resize_mask(mask: &MaskFrame, height: u32, width: u32) -> MaskFrame {
    let mut out = MaskFrame::empty(height, width);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * mask.height as f64 / height as f64) as u32;
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * mask.width as f64 / width as f64) as u32;
            out.set(y, x, mask.get(sy.min(mask.height - 1), sx.min(mask.width - 1)));
        }
    }
    out
}

fn to_tensor(img: &RgbImage, norm: &Normalization) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |[_, c, y, x]| {
        let v = img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0;
        match norm {
            Normalization::Centered => (v - 0.5) as f32,
            Normalization::ChannelStats { mean, std } => ((v - mean[c]) / std[c]) as f32,
        }
    })
}

fn declared_range(norm: &Normalization) -> (f32, f32) {
    match norm {
        Normalization::Centered => (-0.5, 0.5),
        Normalization::ChannelStats { mean, std } => {
            let lo = (0..3).map(|c| -mean[c] / std[c]).fold(f64::INFINITY, f64::min);
            let hi = (0..3)
                .map(|c| (1.0 - mean[c]) / std[c])
                .fold(f64::NEG_INFINITY, f64::max);
            (lo as f32, hi as f32)
        }
    }
}

/// Channels-first tensor with values `x / 255 - 0.5`.
pub fn normalize_for_network(frame: &Frame) -> NetworkTensor {
    normalize_with(frame.image(), &Normalization::Centered)
}

pub fn normalize_with(img: &RgbImage, norm: &Normalization) -> NetworkTensor {
    NetworkTensor {
        values: to_tensor(img, norm),
        range: declared_range(norm),
    }
}

/// A video on disk: numbered frame PNGs with an optional `masks/` sibling.
#[derive(Clone, Debug)]
pub struct Video {
    pub name: String,
    pub frames: Vec<Frame>,
    pub masks: Option<Vec<MaskFrame>>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:05}.png")
}

fn numbered_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png") {
            if stem.len() == 5 && stem.bytes().all(|b| b.is_ascii_digit()) {
                indices.push(stem.parse::<usize>().expect("digits"));
            }
        }
    }
    indices.sort_unstable();
    for (expected, &got) in indices.iter().enumerate() {
        if expected != got {
            return Err(Error::arg(format!(
                "{}: frame {} missing",
                dir.display(),
                frame_file_name(expected)
            )));
        }
    }
    Ok(indices.into_iter().map(|i| dir.join(frame_file_name(i))).collect())
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Loads `dir/00000.png, …` and, when present, `dir/masks/*.png`.
    pub fn load(dir: &Path) -> Result<Video> {
        let paths = numbered_pngs(dir)?;
        if paths.is_empty() {
            return Err(Error::arg(format!("{}: no frames", dir.display())));
        }
        let frames = paths.iter().map(|p| Frame::load_png(p)).collect::<Result<Vec<_>>>()?;
        let mask_dir = dir.join("masks");
        let masks = if mask_dir.is_dir() {
            let mpaths = numbered_pngs(&mask_dir)?;
            if mpaths.len() != frames.len() {
                return Err(Error::arg(format!(
                    "{}: {} masks for {} frames",
                    dir.display(),
                    mpaths.len(),
                    frames.len()
                )));
            }
            let masks = mpaths
                .iter()
                .map(|p| MaskFrame::load_png(p))
                .collect::<Result<Vec<_>>>()?;
            for (f, m) in frames.iter().zip(&masks) {
                if (f.height(), f.width()) != (m.height(), m.width()) {
                    return Err(Error::shape(format!(
                        "{}: mask size differs from frame size",
                        dir.display()
                    )));
                }
            }
            Some(masks)
        } else {
            None
        };
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Video { name, frames, masks })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            f.save_png(&dir.join(frame_file_name(i)))?;
        }
        if let Some(masks) = &self.masks {
            let mdir = dir.join("masks");
            fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
            for (i, m) in masks.iter().enumerate() {
                m.save_png(&mdir.join(frame_file_name(i)))?;
            }
        }
        Ok(())
    }
}
