use image::RgbaImage;
use nalgebra::{Matrix3, SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::BBox;

/// Projective map from logo pixel coordinates to background coordinates,
/// normalized so that `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !(s.abs() > 1e-12) {
            return Err(Error::DegenerateQuad);
        }
        let mut h = [[0.0; 3]; 3];
        for (r, row) in h.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)] / s;
            }
        }
        let out = Homography(h);
        if !(out.det().abs() > 1e-9) || h.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateQuad);
        }
        Ok(out)
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.0[r][c])
    }

    pub fn det(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.matrix().try_inverse().ok_or(Error::DegenerateQuad)?;
        Self::from_matrix(inv)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[2][0] * x + h[2][1] * y + h[2][2];
        (
            (h[0][0] * x + h[0][1] * y + h[0][2]) / w,
            (h[1][0] * x + h[1][1] * y + h[1][2]) / w,
        )
    }

    /// The map taking the four `src` points onto the four `dst` points.
    pub fn from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let (x, y) = src[i];
            let (u, v) = dst[i];
            let r = 2 * i;
            a[(r, 0)] = x;
            a[(r, 1)] = y;
            a[(r, 2)] = 1.0;
            a[(r, 6)] = -u * x;
            a[(r, 7)] = -u * y;
            b[r] = u;
            a[(r + 1, 3)] = x;
            a[(r + 1, 4)] = y;
            a[(r + 1, 5)] = 1.0;
            a[(r + 1, 6)] = -v * x;
            a[(r + 1, 7)] = -v * y;
            b[r + 1] = v;
        }
        let sol = a.lu().solve(&b).ok_or(Error::DegenerateQuad)?;
        Self::from_matrix(Matrix3::new(
            sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0,
        ))
    }
}

/// Sampled geometric parameters, kept for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    /// Multiplier from logo pixels to background pixels.
    pub scale: f64,
    pub rotation_deg: f64,
    /// Per-corner displacement after scaling and rotation, in pixels, for
    /// corners `(0,0), (w,0), (w,h), (0,h)`.
    pub jitter: [[f64; 2]; 4],
    /// Offset of the logo centre.
    pub translate: [f64; 2],
}

impl GeometricParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation_deg: 0.0,
            jitter: [[0.0; 2]; 4],
            translate: [0.0; 2],
        }
    }
}

pub fn logo_corners(w: f64, h: f64) -> [(f64, f64); 4] {
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

/// Destination quad: scale and rotate about the logo centre, jitter each
/// corner, then translate.
pub fn warped_corners(logo_w: f64, logo_h: f64, g: &GeometricParams) -> [(f64, f64); 4] {
    let (cx, cy) = (logo_w / 2.0, logo_h / 2.0);
    let (sin, cos) = g.rotation_deg.to_radians().sin_cos();
    let mut out = [(0.0, 0.0); 4];
    for (i, &(x, y)) in logo_corners(logo_w, logo_h).iter().enumerate() {
        let (dx, dy) = ((x - cx) * g.scale, (y - cy) * g.scale);
        out[i] = (
            cos * dx - sin * dy + cx + g.jitter[i][0] + g.translate[0],
            sin * dx + cos * dy + cy + g.jitter[i][1] + g.translate[1],
        );
    }
    out
}

pub fn homography_from_params(logo_w: f64, logo_h: f64, g: &GeometricParams) -> Result<Homography> {
    if g.jitter == [[0.0; 2]; 4] {
        if !(g.scale > 0.0) {
            return Err(Error::DegenerateQuad);
        }
        let (sin, cos) = g.rotation_deg.to_radians().sin_cos();
        let (a, b) = (g.scale * cos, g.scale * sin);
        let (cx, cy) = (logo_w / 2.0, logo_h / 2.0);
        return Ok(Homography([
            [a, -b, cx + g.translate[0] - (a * cx - b * cy)],
            [b, a, cy + g.translate[1] - (b * cx + a * cy)],
            [0.0, 0.0, 1.0],
        ]));
    }
    let dst = warped_corners(logo_w, logo_h, g);
    if !is_convex(&dst) {
        return Err(Error::DegenerateQuad);
    }
    Homography::from_points(&logo_corners(logo_w, logo_h), &dst)
}

/// Signed shoelace area.
pub fn quad_area(q: &[(f64, f64); 4]) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        let (x0, y0) = q[i];
        let (x1, y1) = q[(i + 1) % 4];
        s += x0 * y1 - x1 * y0;
    }
    s / 2.0
}

/// Strictly convex with consistent winding.
pub fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (ax, ay) = q[i];
        let (bx, by) = q[(i + 1) % 4];
        let (cx, cy) = q[(i + 2) % 4];
        let cross = (bx - ax) * (cy - by) - (by - ay) * (cx - bx);
        if !(cross.abs() > 1e-9) {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

const HOMOGRAPHY_ATTEMPTS: usize = 16;

/// Samples scale, rotation, corner jitter and placement for a `logo` of the
/// given size inside a `target` background, retrying degenerate draws.
pub fn random_homography<R: Rng>(
    rng: &mut R,
    logo: (u32, u32),
    target: (u32, u32),
    config: &SynthConfig,
) -> Result<(Homography, GeometricParams)> {
    let (lw, lh) = (logo.0 as f64, logo.1 as f64);
    let (tw, th) = (target.0 as f64, target.1 as f64);
    for _ in 0..HOMOGRAPHY_ATTEMPTS {
        let frac = uniform(rng, config.scale);
        let scale = frac * tw.min(th) / lw.max(lh);
        let rotation_deg = uniform(rng, config.rotation_deg);
        let reach = config.perspective * scale * lw.min(lh);
        let mut jitter = [[0.0; 2]; 4];
        for corner in jitter.iter_mut() {
            for v in corner.iter_mut() {
                *v = uniform(rng, [-reach, reach]);
            }
        }
        // Keep the rotated box inside the frame when it fits; placement is
        // snapped to whole pixels.
        let (sin, cos) = rotation_deg.to_radians().sin_cos();
        let ex = (cos.abs() * lw + sin.abs() * lh) * scale / 2.0;
        let ey = (sin.abs() * lw + cos.abs() * lh) * scale / 2.0;
        let cx = if tw > 2.0 * ex { uniform(rng, [ex, tw - ex]) } else { tw / 2.0 };
        let cy = if th > 2.0 * ey { uniform(rng, [ey, th - ey]) } else { th / 2.0 };
        let params = GeometricParams {
            scale,
            rotation_deg,
            jitter,
            translate: [(cx - lw / 2.0).round(), (cy - lh / 2.0).round()],
        };
        if let Ok(h) = homography_from_params(lw, lh, &params) {
            return Ok((h, params));
        }
    }
    Err(Error::DegenerateQuad)
}

/// Pixel `(x, y)` of `img` as floats with clamp-to-edge addressing.
fn texel(img: &RgbaImage, x: i64, y: i64) -> [f64; 4] {
    let xc = x.clamp(0, img.width() as i64 - 1) as u32;
    let yc = y.clamp(0, img.height() as i64 - 1) as u32;
    let p = img.get_pixel(xc, yc).0;
    [p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64]
}

/// Bilinear sample at continuous coordinates where pixel `(i, j)` has its
/// centre at `(i + 0.5, j + 0.5)`.
pub fn sample_bilinear(img: &RgbaImage, u: f64, v: f64) -> [f64; 4] {
    let fx = u - 0.5;
    let fy = v - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let a = texel(img, x0, y0);
    let b = texel(img, x0 + 1, y0);
    let c = texel(img, x0, y0 + 1);
    let d = texel(img, x0 + 1, y0 + 1);
    let mut out = [0.0; 4];
    for k in 0..4 {
        let top = a[k] + (b[k] - a[k]) * tx;
        let bottom = c[k] + (d[k] - c[k]) * tx;
        out[k] = top + (bottom - top) * ty;
    }
    out
}

pub(crate) fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Smallest visible stamp area in px².
pub const MIN_STAMP_AREA: f64 = 32.0;

/// Warps `logo` into `background` through `h` and alpha-blends it.
///
/// Each covered background pixel centre is mapped back into the logo and
/// sampled bilinearly; the blend weight is `alpha * logo_alpha`. Returns the
/// composite and the axis-aligned hull of the warped logo, clipped to the
/// frame.
pub fn warp_composite(
    background: &RgbaImage,
    logo: &RgbaImage,
    h: &Homography,
    alpha: f64,
) -> Result<(RgbaImage, BBox)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let (bw, bh) = (background.width() as f64, background.height() as f64);
    let (lw, lh) = (logo.width() as f64, logo.height() as f64);
    let corners = logo_corners(lw, lh).map(|(x, y)| h.apply(x, y));
    let xs = corners.map(|c| c.0);
    let ys = corners.map(|c| c.1);
    let fold = |v: [f64; 4], f: fn(f64, f64) -> f64| v.into_iter().reduce(f).unwrap();
    let hull = [fold(xs, f64::min), fold(ys, f64::min), fold(xs, f64::max), fold(ys, f64::max)];
    if hull.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateQuad);
    }
    let bbox = BBox::new(hull[0], hull[1], hull[2], hull[3])
        .ok()
        .and_then(|b| b.clip(bw, bh));
    let bbox = match bbox {
        Some(b) if b.area() >= MIN_STAMP_AREA => b,
        other => {
            return Err(Error::OutOfFrame {
                area: other.map_or(0.0, |b| b.area()),
            })
        }
    };

    let inv = h.inverse()?;
    let mut out = background.clone();
    if alpha == 0.0 {
        return Ok((out, bbox));
    }
    let x0 = bbox.x_min.floor() as u32;
    let y0 = bbox.y_min.floor() as u32;
    let x1 = (bbox.x_max.ceil() as u32).min(background.width());
    let y1 = (bbox.y_max.ceil() as u32).min(background.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let (u, v) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            if !(u >= 0.0 && u < lw && v >= 0.0 && v < lh) {
                continue;
            }
            let s = sample_bilinear(logo, u, v);
            let a = alpha * s[3] / 255.0;
            if a <= 0.0 {
                continue;
            }
            let px = out.get_pixel_mut(x, y);
            for k in 0..3 {
                px.0[k] = to_u8(a * s[k] + (1.0 - a) * px.0[k] as f64);
            }
            px.0[3] = to_u8(a * 255.0 + (1.0 - a) * px.0[3] as f64);
        }
    }
    Ok((out, bbox))
}
