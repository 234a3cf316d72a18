//! Deterministic synthetic "inpainted" videos with ground-truth masks.
//!
//! Each video pans over a textured background. A moving region is
//! replaced by heavily blurred surroundings and only that region is
//! recompressed at a different JPEG quality, leaving a localized
//! compression-history mismatch of the kind inpainting produces.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{self, jpeg_roundtrip_image, Frame, MaskFrame, Video};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Rectangle,
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub height: u32,
    pub width: u32,
    pub region_kind: RegionKind,
    /// Bounds on the per-frame mask area fraction.
    pub area_fraction_range: (f64, f64),
    /// Region speed in pixels per frame.
    pub motion_amplitude: f64,
    /// Quality of the JPEG pass applied to the filled region only.
    pub fill_jpeg_quality: u8,
    /// Quality at which the pristine frames were stored, if any.
    pub background_jpeg_quality: Option<u8>,
    /// Box-blur radius of the fill (three passes).
    pub blur_radius: usize,
    /// Also emit the untouched frames under `<video>/pristine/`.
    pub write_pristine: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 8,
            frames_per_video: 6,
            height: 64,
            width: 112,
            region_kind: RegionKind::Blob,
            area_fraction_range: (0.06, 0.2),
            motion_amplitude: 2.0,
            fill_jpeg_quality: 90,
            background_jpeg_quality: Some(50),
            blur_radius: 4,
            write_pristine: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_fraction_range;
        if !(0.0 < lo && lo < hi && hi < 0.5) {
            return Err(Error::arg(format!(
                "area_fraction_range ({lo}, {hi}) must satisfy 0 < lo < hi < 0.5"
            )));
        }
        if self.frames_per_video < 3 {
            return Err(Error::arg("frames_per_video must be at least 3"));
        }
        if self.height < crate::media::MIN_SIDE || self.width < crate::media::MIN_SIDE {
            return Err(Error::arg("frames must be at least 16x16"));
        }
        if !(1..=100).contains(&self.fill_jpeg_quality)
            || self.background_jpeg_quality.is_some_and(|q| !(1..=100).contains(&q))
        {
            return Err(Error::arg("JPEG qualities must lie in 1..=100"));
        }
        if !(self.motion_amplitude.is_finite() && self.motion_amplitude >= 0.0) {
            return Err(Error::arg("motion_amplitude must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One generated video: tampered frames, their masks and the untouched
/// frames they were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub name: String,
    pub frames: Vec<Frame>,
    pub masks: Vec<MaskFrame>,
    pub pristine: Vec<Frame>,
}

impl SynthVideo {
    pub fn tampered(&self) -> Video {
        Video {
            name: self.name.clone(),
            frames: self.frames.clone(),
            masks: Some(self.masks.clone()),
        }
    }

    /// Untouched frames with empty masks.
    pub fn pristine_video(&self) -> Video {
        let (h, w) = (self.frames[0].height(), self.frames[0].width());
        Video {
            name: format!("{}_pristine", self.name),
            frames: self.pristine.clone(),
            masks: Some(vec![MaskFrame::empty(h, w); self.pristine.len()]),
        }
    }
}

pub fn video_name(index: usize) -> String {
    format!("video_{index:03}")
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise plus a few flat-shaded shapes and stripes.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    let mut acc = vec![[0.0f64; 3]; h * w];
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..190.0));
    for (spacing, amp) in [(32usize, 55.0), (16, 30.0), (8, 18.0), (4, 10.0)] {
        let gh = h / spacing + 2;
        let gw = w / spacing + 2;
        let lattice: Vec<[f64; 3]> = (0..gh * gw)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        for y in 0..h {
            let fy = y as f64 / spacing as f64;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / spacing as f64;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
                for c in 0..3 {
                    let top = l(y0, x0)[c] * (1.0 - tx) + l(y0, x0 + 1)[c] * tx;
                    let bot = l(y0 + 1, x0)[c] * (1.0 - tx) + l(y0 + 1, x0 + 1)[c] * tx;
                    acc[y * w + x][c] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
    }
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = acc[y as usize * w + x as usize];
        Rgb(std::array::from_fn(|c| (base[c] + v[c]).clamp(0.0, 255.0) as u8))
    });
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let color: [u8; 3] = std::array::from_fn(|_| rng.random());
        let alpha = rng.random_range(0.4..0.9);
        let kind = rng.random_range(0..3);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let size = rng.random_range(4.0..(h.min(w) as f64 / 3.0).max(5.0));
        let period = rng.random_range(5.0..14.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let inside = match kind {
                0 => dy * dy + dx * dx < size * size,
                1 => dy.abs() < size * 0.6 && dx.abs() < size,
                _ => {
                    let t = dx * angle.cos() + dy * angle.sin();
                    (t / period).rem_euclid(1.0) < 0.35 && dy.abs() < size * 1.5
                }
            };
            if inside {
                for c in 0..3 {
                    p[c] = (p[c] as f64 * (1.0 - alpha) + color[c] as f64 * alpha) as u8;
                }
            }
        }
    }
    img
}

fn box_blur(img: &RgbImage, radius: usize, passes: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut buf: Vec<[f64; 3]> = img.pixels().map(|p| p.0.map(|v| v as f64)).collect();
    let r = radius as isize;
    for _ in 0..passes {
        for horizontal in [true, false] {
            let src = buf.clone();
            let (outer, inner) = if horizontal { (h, w) } else { (w, h) };
            for o in 0..outer {
                for i in 0..inner {
                    let mut sum = [0.0; 3];
                    for d in -r..=r {
                        let j = (i as isize + d).clamp(0, inner as isize - 1) as usize;
                        let idx = if horizontal { o * w + j } else { j * w + o };
                        for c in 0..3 {
                            sum[c] += src[idx][c];
                        }
                    }
                    let idx = if horizontal { o * w + i } else { i * w + o };
                    buf[idx] = sum.map(|s| s / (2 * r + 1) as f64);
                }
            }
        }
    }
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(buf[y as usize * w + x as usize].map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

/// Binary template of the region, `th×tw`.
struct Template {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Template {
    fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn rectangle(target: f64, aspect: f64, max_h: usize, max_w: usize) -> Template {
    let h = ((target / aspect).sqrt().round() as usize).clamp(1, max_h);
    let w = ((target / h as f64).round() as usize).clamp(1, max_w);
    Template {
        h,
        w,
        bits: vec![true; h * w],
    }
}

fn blob(rng: &mut ChaCha8Rng, target: f64, aspect: f64, max_h: usize, max_w: usize) -> Template {
    let phases: [f64; 2] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let amps = [rng.random_range(0.05..0.2), rng.random_range(0.0..0.1)];
    let raster = |scale: f64| {
        let ry = scale / aspect.sqrt();
        let rx = scale * aspect.sqrt();
        let h = ((2.0 * ry * 1.35).ceil() as usize).clamp(1, max_h);
        let w = ((2.0 * rx * 1.35).ceil() as usize).clamp(1, max_w);
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let bits = (0..h * w)
            .map(|i| {
                let dy = (i / w) as f64 + 0.5 - cy;
                let dx = (i % w) as f64 + 0.5 - cx;
                let theta = dy.atan2(dx);
                let edge = 1.0 + amps[0] * (3.0 * theta + phases[0]).sin() + amps[1] * (5.0 * theta + phases[1]).sin();
                (dy / ry).powi(2) + (dx / rx).powi(2) < edge * edge
            })
            .collect();
        Template { h, w, bits }
    };
    // Bisection on the radius scale until the rasterized area is close.
    let (mut lo, mut hi) = (0.5, (max_h.max(max_w) as f64));
    let mut best = raster(lo);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let t = raster(mid);
        let area = t.area() as f64;
        if (area - target).abs() < (best.area() as f64 - target).abs() {
            best = t;
        }
        if area < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best
}

/// Generates video `index` of the dataset described by `cfg`.
pub fn generate_video(cfg: &SynthConfig, index: usize) -> Result<SynthVideo> {
    cfg.validate()?;
    let mut rng = video_rng(cfg.seed, index);
    let (h, w) = (cfg.height as usize, cfg.width as usize);
    let n = cfg.frames_per_video;

    let pan: (i64, i64) = (rng.random_range(-1..=1), rng.random_range(-1..=1));
    let span = n as i64 - 1;
    let ch = h + (pan.0.unsigned_abs() as usize) * span as usize;
    let cw = w + (pan.1.unsigned_abs() as usize) * span as usize;
    let canvas = background(&mut rng, ch, cw);

    let (lo, hi) = cfg.area_fraction_range;
    let margin = 0.15 * (hi - lo);
    let total = (h * w) as f64;
    let mut template = None;
    for _ in 0..16 {
        let frac = rng.random_range(lo + margin..hi - margin);
        let aspect = rng.random_range(0.6..1.6);
        let t = match cfg.region_kind {
            RegionKind::Rectangle => rectangle(frac * total, aspect, h - 2, w - 2),
            RegionKind::Blob => blob(&mut rng, frac * total, aspect, h - 2, w - 2),
        };
        let f = t.area() as f64 / total;
        if f >= lo && f <= hi {
            template = Some(t);
            break;
        }
    }
    let template = template.ok_or_else(|| {
        Error::arg(format!(
            "cannot fit a region with area fraction in ({lo}, {hi}) into {h}x{w}"
        ))
    })?;

    // Region top-left moves at constant speed, bouncing off the borders.
    let max_y = (h - template.h) as f64;
    let max_x = (w - template.w) as f64;
    let mut pos = (rng.random_range(0.0..=max_y), rng.random_range(0.0..=max_x));
    let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut vel = (
        cfg.motion_amplitude * heading.sin(),
        cfg.motion_amplitude * heading.cos(),
    );

    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut pristine = Vec::with_capacity(n);
    for t in 0..n as i64 {
        let oy = if pan.0 >= 0 { pan.0 * t } else { (-pan.0) * (span - t) } as u32;
        let ox = if pan.1 >= 0 { pan.1 * t } else { (-pan.1) * (span - t) } as u32;
        let mut clean = image::imageops::crop_imm(&canvas, ox, oy, w as u32, h as u32).to_image();
        if let Some(q) = cfg.background_jpeg_quality {
            clean = jpeg_roundtrip_image(&clean, q)?;
        }
        let blurred = box_blur(&clean, cfg.blur_radius, 3);
        let (ty, tx) = (pos.0.round() as usize, pos.1.round() as usize);
        let mut mask = MaskFrame::empty(h as u32, w as u32);
        let mut filled = clean.clone();
        for i in 0..template.h {
            for j in 0..template.w {
                if template.bits[i * template.w + j] {
                    let (y, x) = ((ty + i) as u32, (tx + j) as u32);
                    mask.set(y, x, true);
                    filled.put_pixel(x, y, *blurred.get_pixel(x, y));
                }
            }
        }
        let recompressed = jpeg_roundtrip_image(&filled, cfg.fill_jpeg_quality)?;
        for (x, y, p) in filled.enumerate_pixels_mut() {
            if mask.get(y, x) {
                *p = *recompressed.get_pixel(x, y);
            }
        }
        frames.push(Frame::new(filled)?);
        masks.push(mask);
        pristine.push(Frame::new(clean)?);

        for (p, v, max) in [(&mut pos.0, &mut vel.0, max_y), (&mut pos.1, &mut vel.1, max_x)] {
            *p += *v;
            if *p < 0.0 {
                *p = -*p;
                *v = -*v;
            }
            if *p > max {
                *p = 2.0 * max - *p;
                *v = -*v;
            }
            *p = p.clamp(0.0, max);
        }
    }
    Ok(SynthVideo {
        name: video_name(index),
        frames,
        masks,
        pristine,
    })
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SynthVideo>> {
    (0..cfg.num_videos).map(|i| generate_video(cfg, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub frames: usize,
    #[serde(default)]
    pub pristine: Option<String>,
}

/// Index written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator: SynthConfig,
    pub videos: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(text)?;
        for v in &m.videos {
            if v.name.is_empty() || v.name.contains(['/', '\\']) || v.name == ".." {
                return Err(Error::arg(format!("bad video name {:?} in manifest", v.name)));
            }
            if let Some(p) = &v.pristine {
                let inside = Path::new(p)
                    .components()
                    .all(|c| matches!(c, std::path::Component::Normal(_)));
                if p.is_empty() || !inside {
                    return Err(Error::arg(format!("bad pristine path {p:?} in manifest")));
                }
            }
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let p = dir.join("manifest.json");
        Self::parse(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
    }
}

/// Tampered videos of a dataset directory and their pristine
/// counterparts (only for entries that list one).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub pristine: Vec<Video>,
}

/// Loads the videos listed in `dir/manifest.json`, or every subdirectory
/// holding `00000.png` when there is no manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if dir.join("manifest.json").is_file() {
        let m = Manifest::load(dir)?;
        let mut videos = Vec::with_capacity(m.videos.len());
        let mut pristine = Vec::new();
        for e in &m.videos {
            let v = Video::load(&dir.join(&e.name))?;
            if v.len() != e.frames {
                return Err(Error::arg(format!(
                    "{}: manifest lists {} frames, found {}",
                    e.name,
                    e.frames,
                    v.len()
                )));
            }
            videos.push(v);
            if let Some(p) = &e.pristine {
                let mut pv = Video::load(&dir.join(p))?;
                pv.name = format!("{}/pristine", e.name);
                pristine.push(pv);
            }
        }
        return Ok(Dataset { videos, pristine });
    }
    let mut dirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(media::frame_file_name(0)).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::arg(format!("{}: no videos found", dir.display())));
    }
    let videos = dirs.iter().map(|d| Video::load(d)).collect::<Result<_>>()?;
    Ok(Dataset {
        videos,
        pristine: Vec::new(),
    })
}

/// Writes every video (frames, `masks/`, optionally `pristine/`) plus
/// `manifest.json` under `out`.
pub fn write_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut videos = Vec::new();
    for i in 0..cfg.num_videos {
        let v = generate_video(cfg, i)?;
        let dir = out.join(&v.name);
        v.tampered().save(&dir)?;
        let pristine = if cfg.write_pristine {
            let pv = Video {
                name: v.name.clone(),
                frames: v.pristine.clone(),
                masks: None,
            };
            pv.save(&dir.join("pristine"))?;
            Some(format!("{}/pristine", v.name))
        } else {
            None
        };
        videos.push(ManifestEntry {
            name: v.name.clone(),
            frames: v.frames.len(),
            pristine,
        });
    }
    let manifest = Manifest {
        generator: cfg.clone(),
        videos,
    };
    let p = out.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}
