//! FAZ-centred Cartesian ↔ polar resampling.
//!
//! Coordinates: image pixel `(x, y)` covers `[x, x+1) × [y, y+1)`, `y` grows
//! downwards. Origin-relative coordinates `(u, v)` have `v` pointing up, so
//! `θ = atan2(v, u)` increases counter-clockwise on screen. After laterality
//! normalisation θ = 0 points at the temporal side (+x).
//!
//! Polar rows are angles: row `i` spans `[start + 2π·i/Θ, start + 2π·(i+1)/Θ)`
//! and is sampled at its centre. Columns are radii: column `j` spans
//! `[R·j/n, R·(j+1)/n)`, sampled at `R·(j + ½)/n`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Laterality {
    #[serde(rename = "OD")]
    Od,
    #[serde(rename = "OS")]
    Os,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

impl std::fmt::Display for Laterality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Laterality::Od => "OD",
            Laterality::Os => "OS",
            Laterality::Unknown => "unknown",
        })
    }
}

impl std::str::FromStr for Laterality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OD" | "od" => Ok(Laterality::Od),
            "OS" | "os" => Ok(Laterality::Os),
            "unknown" => Ok(Laterality::Unknown),
            other => Err(Error::Parameter(format!("unknown laterality '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CartesianImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved values in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// FAZ centre `(u_o, v_o)` in pixel coordinates.
    pub center: (f64, f64),
    pub laterality: Laterality,
    pub mm_per_pixel: Option<f64>,
}

impl CartesianImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>, center: (f64, f64), laterality: Laterality) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return dim_err("image dimensions must be positive");
        }
        if pixels.len() != width * height * channels {
            return dim_err(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                pixels.len()
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("pixel value {bad} outside [0,1]")));
        }
        let img = CartesianImage { width, height, channels, pixels, center, laterality, mm_per_pixel: None };
        img.check_inside(center)?;
        Ok(img)
    }

    /// Grayscale image from a closure over pixel coordinates.
    pub fn from_fn(width: usize, height: usize, center: (f64, f64), f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut px = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                px.push(f(x, y));
            }
        }
        CartesianImage::new(width, height, 1, px, center, Laterality::Od)
    }

    fn check_inside(&self, (u, v): (f64, f64)) -> Result<()> {
        if !(u > 0.0 && u < self.width as f64 && v > 0.0 && v < self.height as f64) {
            return Err(Error::Parameter(format!("centre ({u}, {v}) not strictly inside {}x{} image", self.width, self.height)));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Minimal distance from `origin` to any image edge.
    pub fn edge_radius(&self, origin: (f64, f64)) -> f64 {
        origin.0.min(self.width as f64 - origin.0).min(origin.1).min(self.height as f64 - origin.1)
    }

    pub fn max_radius(&self) -> f64 {
        self.edge_radius(self.center)
    }

    /// Horizontal mirror; the centre is reflected with the pixels.
    pub fn mirror_horizontal(&self) -> CartesianImage {
        let (w, c) = (self.width, self.channels);
        let mut px = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in 0..w {
                let src = (y * w + (w - 1 - x)) * c;
                px.extend_from_slice(&self.pixels[src..src + c]);
            }
        }
        CartesianImage { pixels: px, center: (w as f64 - self.center.0, self.center.1), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolarImage {
    pub theta_samples: usize,
    pub r_samples: usize,
    pub radius: f64,
    pub origin: (f64, f64),
    pub start_angle: f64,
    pub channels: usize,
    /// `theta_samples` rows × `r_samples` columns, channel-interleaved.
    pub pixels: Vec<f32>,
}

impl PolarImage {
    #[inline]
    pub fn get(&self, row: usize, col: usize, c: usize) -> f32 {
        self.pixels[(row * self.r_samples + col) * self.channels + c]
    }

    /// `[C, Θ, n]` tensor (channel planes).
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, ch) = (self.theta_samples, self.r_samples, self.channels);
        Tensor::from_fn(&[ch, h, w], |i| {
            let c = i / (h * w);
            let rest = i % (h * w);
            self.pixels[rest * ch + c]
        })
    }

    /// Angle at the centre of row `i`.
    pub fn row_angle(&self, i: usize) -> f64 {
        self.start_angle + TAU * (i as f64 + 0.5) / self.theta_samples as f64
    }

    /// Radius at the centre of column `j`.
    pub fn col_radius(&self, j: usize) -> f64 {
        self.radius * (j as f64 + 0.5) / self.r_samples as f64
    }
}

/// `(u, v) -> (θ, r)` with θ normalised to `[0, 2π)`.
pub fn cart_to_polar(u: f64, v: f64) -> (f64, f64) {
    (normalize_angle(v.atan2(u)), u.hypot(v))
}

/// `(θ, r) -> (u, v)`.
pub fn polar_to_cart(theta: f64, r: f64) -> (f64, f64) {
    (r * theta.cos(), r * theta.sin())
}

pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Image coordinates of an origin-relative point.
pub fn to_image_coords(origin: (f64, f64), (u, v): (f64, f64)) -> (f64, f64) {
    (origin.0 + u, origin.1 - v)
}

/// Origin-relative coordinates of the centre of pixel `(x, y)`.
pub fn pixel_offset(origin: (f64, f64), x: usize, y: usize) -> (f64, f64) {
    (x as f64 + 0.5 - origin.0, origin.1 - (y as f64 + 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarParams {
    pub theta_samples: usize,
    pub r_samples: usize,
    pub start_angle: f64,
    pub radius_override: Option<f64>,
}

impl PolarParams {
    pub fn new(theta_samples: usize, r_samples: usize) -> Self {
        PolarParams { theta_samples, r_samples, start_angle: 0.0, radius_override: None }
    }
}

impl Default for PolarParams {
    fn default() -> Self {
        PolarParams::new(224, 224)
    }
}

/// `(cos, sin)` at the centre of each row. Rows are looked up in a table anchored at the
/// nearest multiple of the angular step, and for Θ divisible by 4 the table
/// is filled by exact quarter-turn rotation, so start-angle shifts and 90°
/// rotations permute entries without rounding differences.
fn angle_table(start: f64, n: usize) -> Vec<(f64, f64)> {
    let step = TAU / n as f64;
    let k = (start / step).round();
    let mut residual = start - k * step;
    if residual.abs() < 1e-12 {
        residual = 0.0;
    }
    let k = (k as i64).rem_euclid(n as i64) as usize;
    let base: Vec<(f64, f64)> = if n % 4 == 0 {
        let q = n / 4;
        let mut t = Vec::with_capacity(n);
        for m in 0..q {
            let a = residual + step * (m as f64 + 0.5);
            t.push((a.cos(), a.sin()));
        }
        for m in q..n {
            let (c, s) = t[m - q];
            t.push((-s, c));
        }
        t
    } else {
        (0..n)
            .map(|m| {
                let a = residual + step * (m as f64 + 0.5);
                (a.cos(), a.sin())
            })
            .collect()
    };
    (0..n).map(|i| base[(i + k) % n]).collect()
}

/// Nearest pixel along one axis; exact boundary hits go to the pixel on the
/// origin side, out-of-range positions clamp to the edge pixel.
#[inline]
fn nearest_index(origin: f64, offset: f64, len: usize) -> usize {
    let x = origin + offset;
    let mut f = x.floor();
    if x == f && offset > 0.0 {
        f -= 1.0;
    }
    f.clamp(0.0, (len - 1) as f64) as usize
}

fn check_params(p: &PolarParams) -> Result<()> {
    if p.theta_samples < 8 || p.r_samples < 8 {
        return Err(Error::Parameter(format!("polar grid {}x{} below the 8x8 minimum", p.theta_samples, p.r_samples)));
    }
    if let Some(r) = p.radius_override {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Parameter(format!("radius override {r} must be positive")));
        }
    }
    if !p.start_angle.is_finite() {
        return Err(Error::Parameter("start angle must be finite".into()));
    }
    Ok(())
}

fn sample_polar(img: &CartesianImage, origin: (f64, f64), radius: f64, start: f64, theta_samples: usize, r_samples: usize) -> PolarImage {
    let table = angle_table(start, theta_samples);
    let ch = img.channels;
    let mut px = Vec::with_capacity(theta_samples * r_samples * ch);
    for &(c, s) in &table {
        for j in 0..r_samples {
            let r = radius * (j as f64 + 0.5) / r_samples as f64;
            let (u, v) = (r * c, r * s);
            let x = nearest_index(origin.0, u, img.width);
            let y = nearest_index(origin.1, -v, img.height);
            let src = (y * img.width + x) * ch;
            px.extend_from_slice(&img.pixels[src..src + ch]);
        }
    }
    PolarImage { theta_samples, r_samples, radius, origin, start_angle: start, channels: ch, pixels: px }
}

/// Nearest-neighbour polar resampling around the image's centre.
pub fn to_polar(img: &CartesianImage, params: &PolarParams) -> Result<PolarImage> {
    check_params(params)?;
    let radius = params.radius_override.unwrap_or_else(|| img.max_radius());
    Ok(sample_polar(img, img.center, radius, params.start_angle, params.theta_samples, params.r_samples))
}

/// Result of the inverse mapping: image plus a mask of pixels inside the disk.
#[derive(Clone, Debug)]
pub struct CartesianReconstruction {
    pub image: CartesianImage,
    pub valid: Vec<bool>,
}

/// Polar bin `(row, col)` nearest to an origin-relative point, if inside the disk.
pub fn polar_bin(p: &PolarImage, u: f64, v: f64) -> Option<(usize, usize)> {
    let (theta, r) = cart_to_polar(u, v);
    if r >= p.radius {
        return None;
    }
    let n = p.theta_samples as f64;
    let rho = (normalize_angle(theta - p.start_angle) * n / TAU).floor();
    let row = (rho as usize) % p.theta_samples;
    let col = ((r * p.r_samples as f64 / p.radius).floor() as usize).min(p.r_samples - 1);
    Some((row, col))
}

/// Inverse mapping onto an `out_width × out_height` canvas sharing the
/// polar image's origin. Pixels outside the disk are 0 and flagged invalid.
pub fn from_polar(p: &PolarImage, out_width: usize, out_height: usize) -> Result<CartesianReconstruction> {
    let (ox, oy) = p.origin;
    let eps = 1e-9;
    if ox - p.radius < -eps || oy - p.radius < -eps || ox + p.radius > out_width as f64 + eps || oy + p.radius > out_height as f64 + eps {
        return Err(Error::Parameter(format!(
            "{out_width}x{out_height} canvas does not contain the radius-{} disk at ({ox}, {oy})",
            p.radius
        )));
    }
    let ch = p.channels;
    let mut px = vec![0.0f32; out_width * out_height * ch];
    let mut valid = vec![false; out_width * out_height];
    for y in 0..out_height {
        for x in 0..out_width {
            let (u, v) = pixel_offset(p.origin, x, y);
            if let Some((row, col)) = polar_bin(p, u, v) {
                let i = y * out_width + x;
                valid[i] = true;
                for c in 0..ch {
                    px[i * ch + c] = p.get(row, col, c);
                }
            }
        }
    }
    let image = CartesianImage {
        width: out_width,
        height: out_height,
        channels: ch,
        pixels: px,
        center: p.origin,
        laterality: Laterality::Od,
        mm_per_pixel: None,
    };
    Ok(CartesianReconstruction { image, valid })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub start_angle_jitter: f64,
    /// Centre displacement in pixels `(du, dv)` (image axes).
    pub center_jitter: (f64, f64),
    pub radius_scale: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation { start_angle_jitter: 0.0, center_jitter: (0.0, 0.0), radius_scale: 1.0 }
    }
}

/// Polar transform with a perturbed start angle, centre and radius. A start
/// angle shift of `2πk/Θ` is a cyclic shift of `k` rows; scaling the radius
/// acts as a crop factor.
pub fn augment_polar(img: &CartesianImage, aug: &Augmentation, params: &PolarParams) -> Result<PolarImage> {
    check_params(params)?;
    if !(aug.radius_scale > 0.0 && aug.radius_scale <= 1.0) {
        return Err(Error::Parameter(format!("radius scale {} not in (0,1]", aug.radius_scale)));
    }
    let origin = (img.center.0 + aug.center_jitter.0, img.center.1 + aug.center_jitter.1);
    img.check_inside(origin)?;
    let base = params.radius_override.unwrap_or_else(|| img.edge_radius(origin));
    Ok(sample_polar(
        img,
        origin,
        base * aug.radius_scale,
        params.start_angle + aug.start_angle_jitter,
        params.theta_samples,
        params.r_samples,
    ))
}

/// Mirrors OS images so every eye shares the same angular layout. Unknown
/// laterality is passed through and reported via the returned flag.
pub fn normalize_laterality(img: &CartesianImage) -> (CartesianImage, bool) {
    match img.laterality {
        Laterality::Od => (img.clone(), false),
        Laterality::Os => {
            let mut m = img.mirror_horizontal();
            m.laterality = Laterality::Od;
            (m, false)
        }
        Laterality::Unknown => {
            log::warn!("laterality unknown; image left unmirrored");
            (img.clone(), true)
        }
    }
}
