//! Procedural stand-ins for real logos and background photos, enough to run
//! the whole pipeline without external data.

use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use rand::Rng;

use super::{sample_rng, save_png, LogoEntry};
use crate::error::{Error, Result};
use crate::format::write_jsonl;

pub const LOGO_SIZE: u32 = 96;
pub const BACKGROUND_SIZE: (u32, u32) = (320, 240);

const LOGO_STREAM: u64 = 1 << 40;
const BACKGROUND_STREAM: u64 = 1 << 41;

fn random_colour<R: Rng>(rng: &mut R) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn contrasting<R: Rng>(rng: &mut R, base: [u8; 3]) -> [u8; 3] {
    loop {
        let c = random_colour(rng);
        let d: i32 = (0..3).map(|k| (c[k] as i32 - base[k] as i32).abs()).sum();
        if d > 200 {
            return c;
        }
    }
}

fn put(img: &mut RgbaImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgba([c[0], c[1], c[2], 255]));
    }
}

/// A flat-coloured badge with a few high-contrast shapes, unique per
/// `(seed, class, variant)`.
pub fn demo_logo(seed: u64, class: usize, variant: usize, size: u32) -> RgbaImage {
    let mut rng = sample_rng(seed, LOGO_STREAM + ((class as u64) << 8) + variant as u64);
    let base = random_colour(&mut rng);
    let mut img = RgbaImage::from_pixel(size, size, Rgba([base[0], base[1], base[2], 255]));
    let s = size as f64;
    let shapes = rng.random_range(3..=5);
    for _ in 0..shapes {
        let colour = contrasting(&mut rng, base);
        let cx = rng.random_range(0.15..0.85) * s;
        let cy = rng.random_range(0.15..0.85) * s;
        let r = rng.random_range(0.12..0.32) * s;
        match rng.random_range(0..6) {
            0 => {
                for y in 0..size as i64 {
                    for x in 0..size as i64 {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            put(&mut img, x, y, colour);
                        }
                    }
                }
            }
            1 => {
                let (hw, hh) = (r, r * rng.random_range(0.3..1.0));
                for y in (cy - hh) as i64..(cy + hh) as i64 {
                    for x in (cx - hw) as i64..(cx + hw) as i64 {
                        put(&mut img, x, y, colour);
                    }
                }
            }
            2 => {
                // Triangle pointing up or down.
                let flip = rng.random_bool(0.5);
                for y in (cy - r) as i64..(cy + r) as i64 {
                    let t = (y as f64 - (cy - r)) / (2.0 * r);
                    let t = if flip { 1.0 - t } else { t };
                    let half = t * r;
                    for x in (cx - half) as i64..(cx + half) as i64 {
                        put(&mut img, x, y, colour);
                    }
                }
            }
            3 => {
                // Diagonal stripes across the whole badge.
                let period = rng.random_range(8..24) as i64;
                let dir = if rng.random_bool(0.5) { 1 } else { -1 };
                for y in 0..size as i64 {
                    for x in 0..size as i64 {
                        if (x + dir * y).rem_euclid(period) < period / 3 {
                            put(&mut img, x, y, colour);
                        }
                    }
                }
            }
            4 => {
                // Checkerboard patch.
                let cell = rng.random_range(6..16) as i64;
                for y in (cy - r) as i64..(cy + r) as i64 {
                    for x in (cx - r) as i64..(cx + r) as i64 {
                        if (x.div_euclid(cell) + y.div_euclid(cell)) % 2 == 0 {
                            put(&mut img, x, y, colour);
                        }
                    }
                }
            }
            _ => {
                // Ring.
                let inner = r * rng.random_range(0.4..0.75);
                for y in 0..size as i64 {
                    for x in 0..size as i64 {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        let d2 = dx * dx + dy * dy;
                        if d2 <= r * r && d2 >= inner * inner {
                            put(&mut img, x, y, colour);
                        }
                    }
                }
            }
        }
    }
    img
}

/// Smooth colour field with a scatter of muted rectangles.
pub fn demo_background(seed: u64, index: usize, width: u32, height: u32) -> RgbaImage {
    let mut rng = sample_rng(seed, BACKGROUND_STREAM + index as u64);
    let waves: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            [
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(10.0..35.0),
                rng.random_range(0.0..3.0),
            ]
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(60.0..190.0));
    let mut img = RgbaImage::from_fn(width, height, |x, y| {
        let mut px = [0u8; 4];
        for (c, slot) in px.iter_mut().take(3).enumerate() {
            let mut v = tint[c];
            for w in &waves {
                let phase = w[0] * x as f64 + w[1] * y as f64 + w[2] + c as f64 * w[4];
                v += w[3] * phase.sin();
            }
            *slot = v.round().clamp(0.0, 255.0) as u8;
        }
        px[3] = 255;
        Rgba(px)
    });
    for _ in 0..rng.random_range(4..10) {
        let g: u8 = rng.random_range(40..200);
        let (w, h) = (rng.random_range(8..width / 3), rng.random_range(8..height / 3));
        let (x0, y0) = (rng.random_range(0..width - w), rng.random_range(0..height - h));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let p = img.get_pixel_mut(x, y);
                for k in 0..3 {
                    p.0[k] = ((p.0[k] as u16 + g as u16) / 2) as u8;
                }
            }
        }
    }
    img
}

pub fn class_name(index: usize) -> String {
    format!("class_{index:04}")
}

/// Writes `logos/<class>_<variant>.png`, `logos.jsonl` and
/// `backgrounds/bgNNNN.png` under `out_dir`. Returns the logos manifest
/// and backgrounds directory.
pub fn write_demo_assets(
    out_dir: &Path,
    classes: usize,
    variants: usize,
    backgrounds: usize,
    seed: u64,
) -> Result<(PathBuf, PathBuf)> {
    if classes == 0 || variants == 0 || backgrounds == 0 {
        return Err(Error::Invalid("asset counts must be positive".into()));
    }
    let logo_dir = out_dir.join("logos");
    let bg_dir = out_dir.join("backgrounds");
    for d in [&logo_dir, &bg_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(classes * variants);
    for c in 0..classes {
        for v in 0..variants {
            let class = class_name(c);
            let variant = format!("v{v}");
            let rel = format!("logos/{class}_{variant}.png");
            save_png(&out_dir.join(&rel), &demo_logo(seed, c, v, LOGO_SIZE))?;
            entries.push(LogoEntry { class, variant, path: rel });
        }
    }
    for i in 0..backgrounds {
        let (w, h) = BACKGROUND_SIZE;
        save_png(&bg_dir.join(format!("bg{i:04}.png")), &demo_background(seed, i, w, h))?;
    }
    let manifest = out_dir.join("logos.jsonl");
    write_jsonl(&manifest, &entries)?;
    Ok((manifest, bg_dir))
}
