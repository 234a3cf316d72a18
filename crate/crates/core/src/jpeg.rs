//! Lossy stage of a baseline sequential JPEG codec: JFIF colour
//! conversion, 8×8 DCT, quantization with the standard tables scaled by
//! quality, and the inverse path. Entropy coding is lossless and therefore
//! skipped; the decoded pixels are those a full encode/decode would give.
//! All three components are coded at full resolution (4:4:4).

use std::sync::OnceLock;

use image::RgbImage;

/// Standard luminance quantization table, natural (row-major) order.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard chrominance quantization table.
pub const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// IJG quality scaling, clamped to the baseline range 1..=255.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

fn dct_matrix() -> &'static [[f64; 8]; 8] {
    static M: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (k, row) in m.iter_mut().enumerate() {
            let a = if k == 0 {
                (1.0f64 / 8.0).sqrt()
            } else {
                (2.0f64 / 8.0).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
            }
        }
        m
    })
}

/// Quantizes and reconstructs one level-shifted 8×8 block in place.
fn requantize_block(block: &mut [f64; 64], table: &[u16; 64]) {
    let m = dct_matrix();
    let mut tmp = [0.0f64; 64];
    // coeff = M · X · Mᵀ
    for k in 0..8 {
        for x in 0..8 {
            tmp[k * 8 + x] = (0..8).map(|n| m[k][n] * block[n * 8 + x]).sum();
        }
    }
    let mut coef = [0.0f64; 64];
    for k in 0..8 {
        for l in 0..8 {
            coef[k * 8 + l] = (0..8).map(|x| tmp[k * 8 + x] * m[l][x]).sum();
        }
    }
    for (c, &q) in coef.iter_mut().zip(table) {
        *c = (*c / q as f64).round() * q as f64;
    }
    // X = Mᵀ · coeff · M
    for n in 0..8 {
        for l in 0..8 {
            tmp[n * 8 + l] = (0..8).map(|k| m[k][n] * coef[k * 8 + l]).sum();
        }
    }
    for n in 0..8 {
        for x in 0..8 {
            block[n * 8 + x] = (0..8).map(|l| tmp[n * 8 + l] * m[l][x]).sum();
        }
    }
}

#[inline]
fn to_u8(v: f64) -> f64 {
    v.round().clamp(0.0, 255.0)
}

/// Encodes and decodes `img` at `quality` (1..=100, not validated here).
pub fn roundtrip(img: &RgbImage, quality: u8) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = [vec![0.0f64; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for (i, p) in img.pixels().enumerate() {
        let [r, g, b] = p.0.map(|v| v as f64);
        planes[0][i] = to_u8(0.299 * r + 0.587 * g + 0.114 * b);
        planes[1][i] = to_u8(-0.168736 * r - 0.331264 * g + 0.5 * b + 128.0);
        planes[2][i] = to_u8(0.5 * r - 0.418688 * g - 0.081312 * b + 128.0);
    }
    let tables = [
        scaled_table(&LUMA_TABLE, quality),
        scaled_table(&CHROMA_TABLE, quality),
        scaled_table(&CHROMA_TABLE, quality),
    ];
    for (plane, table) in planes.iter_mut().zip(&tables) {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // Partial edge blocks are padded by replicating the last
                // row/column.
                let mut block = [0.0f64; 64];
                for y in 0..8 {
                    let sy = (by + y).min(h - 1);
                    for x in 0..8 {
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                    }
                }
                requantize_block(&mut block, table);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        plane[(by + y) * w + bx + x] = to_u8(block[y * 8 + x] + 128.0);
                    }
                }
            }
        }
    }
    let mut out = img.clone();
    for (i, p) in out.pixels_mut().enumerate() {
        let (y, cb, cr) = (planes[0][i], planes[1][i] - 128.0, planes[2][i] - 128.0);
        p.0 = [
            to_u8(y + 1.402 * cr) as u8,
            to_u8(y - 0.344136 * cb - 0.714136 * cr) as u8,
            to_u8(y + 1.772 * cb) as u8,
        ];
    }
    out
}
