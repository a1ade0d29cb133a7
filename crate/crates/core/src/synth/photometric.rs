use image::RgbaImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::to_u8;
use super::{uniform, SynthConfig};

/// Sampled photometric parameters, kept for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub hue_shift_deg: f64,
    pub saturation_scale: f64,
    pub brightness_scale: f64,
    pub invert: bool,
    pub gradient_strength: f64,
    pub gradient_angle_deg: f64,
    pub blur_sigma: f64,
}

impl PhotometricParams {
    pub fn identity() -> Self {
        Self {
            hue_shift_deg: 0.0,
            saturation_scale: 1.0,
            brightness_scale: 1.0,
            invert: false,
            gradient_strength: 0.0,
            gradient_angle_deg: 0.0,
            blur_sigma: 0.0,
        }
    }

    fn touches_hsv(&self) -> bool {
        self.hue_shift_deg != 0.0
            || self.saturation_scale != 1.0
            || self.brightness_scale != 1.0
            || self.invert
            || self.gradient_strength != 0.0
    }

    pub fn sample<R: Rng>(rng: &mut R, config: &SynthConfig) -> Self {
        Self {
            hue_shift_deg: uniform(rng, config.hue_shift_deg),
            saturation_scale: uniform(rng, config.saturation),
            brightness_scale: uniform(rng, config.brightness),
            invert: config.invert_probability > 0.0 && rng.random_bool(config.invert_probability),
            gradient_strength: uniform(rng, config.gradient_strength),
            gradient_angle_deg: if config.gradient_strength[1] > 0.0 {
                rng.random_range(0.0..360.0)
            } else {
                0.0
            },
            blur_sigma: uniform(rng, config.blur_sigma),
        }
    }
}

/// RGB in [0, 255] to (hue degrees, saturation in [0, 1], value in [0, 255]).
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Normalized Gaussian taps over `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_1d(src: &[f64], dst: &mut [f64], n: usize, stride: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as i64;
    for i in 0..n as i64 {
        let mut acc = 0.0;
        for (t, w) in kernel.iter().enumerate() {
            let j = (i + t as i64 - radius).clamp(0, n as i64 - 1) as usize;
            acc += w * src[j * stride];
        }
        dst[i as usize * stride] = acc;
    }
}

/// Separable Gaussian blur of a row-major `width x height` plane with
/// clamp-to-edge addressing. `sigma <= 0` is a no-op.
pub fn blur_plane(plane: &mut [f64], width: usize, height: usize, sigma: f64) {
    if sigma <= 0.0 || plane.is_empty() {
        return;
    }
    let kernel = gaussian_kernel(sigma);
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = y * width;
        convolve_1d(&plane[row..row + width], &mut tmp[row..row + width], width, 1, &kernel);
    }
    for x in 0..width {
        convolve_1d(&tmp[x..], &mut plane[x..], height, width, &kernel);
    }
}

/// Applies hue and saturation shift, brightness scaling, optional value
/// inversion and a linear brightness ramp in HSV space, then blurs the
/// colour and alpha planes. Identity parameters leave `img` untouched.
pub fn photometric_chain(img: &RgbaImage, p: &PhotometricParams) -> RgbaImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut planes: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    for px in img.pixels() {
        for (plane, v) in planes.iter_mut().zip(px.0) {
            plane.push(v as f64);
        }
    }

    if p.touches_hsv() {
        let (sin, cos) = p.gradient_angle_deg.to_radians().sin_cos();
        let half = ((cos.abs() * w as f64 + sin.abs() * h as f64) / 2.0).max(0.5);
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        for i in 0..n {
            let [hue, sat, val] = rgb_to_hsv([planes[0][i], planes[1][i], planes[2][i]]);
            let hue = hue + p.hue_shift_deg;
            let sat = (sat * p.saturation_scale).clamp(0.0, 1.0);
            let mut val = (val * p.brightness_scale).clamp(0.0, 255.0);
            if p.invert {
                val = 255.0 - val;
            }
            if p.gradient_strength != 0.0 {
                let (x, y) = ((i % w) as f64 + 0.5 - cx, (i / w) as f64 + 0.5 - cy);
                let t = (x * cos + y * sin) / half;
                val = (val * (1.0 + p.gradient_strength * t)).clamp(0.0, 255.0);
            }
            let rgb = hsv_to_rgb([hue, sat, val]);
            for c in 0..3 {
                planes[c][i] = rgb[c];
            }
        }
    }

    for plane in planes.iter_mut() {
        blur_plane(plane, w, h, p.blur_sigma);
    }

    let mut out = img.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        for c in 0..4 {
            px.0[c] = to_u8(planes[c][i]);
        }
    }
    out
}
