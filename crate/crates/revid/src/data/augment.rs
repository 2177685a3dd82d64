//! Image augmentation: random crop-and-rescale, small rotations, and
//! brightness jitter. Mirroring and color jitter are deliberately absent;
//! viewpoint and color carry identity evidence for vehicles.

use super::{DataError, VehicleImage};
use rand::Rng;

/// The three augmentation operations, applied in the order given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    /// Keep a random 80–100%-area window, then rescale to the original size
    /// with nearest-neighbor sampling.
    Crop,
    /// Rotate by a uniform angle in `[-max, +max]` degrees, padding exposed
    /// corners with the nearest edge pixel.
    Rotate,
    /// Multiply every pixel by a uniform factor, clamping back into `[0, 1]`.
    Brightness,
}

/// Every op in the standard order; what the sequence builders apply.
pub const ALL_OPS: [AugmentOp; 3] = [AugmentOp::Crop, AugmentOp::Rotate, AugmentOp::Brightness];

/// Ranges the random draws come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    crop_area: (f64, f64),
    max_rotation_degrees: f64,
    brightness: (f64, f64),
}

impl Default for AugmentParams {
    /// The reported ranges: 80–100% crop area, up to 15 degrees of rotation,
    /// brightness factor 0.8–1.2.
    fn default() -> Self {
        Self {
            crop_area: (0.8, 1.0),
            max_rotation_degrees: 15.0,
            brightness: (0.8, 1.2),
        }
    }
}

impl AugmentParams {
    /// Validates that the crop fractions sit in `(0, 1]` with `lo <= hi`,
    /// the rotation bound is finite and nonnegative, and the brightness
    /// range is positive with `lo <= hi`.
    pub fn new(
        crop_area: (f64, f64),
        max_rotation_degrees: f64,
        brightness: (f64, f64),
    ) -> Result<Self, DataError> {
        let invalid = |reason: String| Err(DataError::InvalidAugment { reason });
        if !(crop_area.0 > 0.0 && crop_area.0 <= crop_area.1 && crop_area.1 <= 1.0) {
            return invalid(format!(
                "crop area fractions must satisfy 0 < lo <= hi <= 1, got {crop_area:?}"
            ));
        }
        if !max_rotation_degrees.is_finite() || max_rotation_degrees < 0.0 {
            return invalid(format!(
                "max rotation must be finite and >= 0 degrees, got {max_rotation_degrees}"
            ));
        }
        if !(brightness.0 > 0.0 && brightness.0 <= brightness.1 && brightness.1.is_finite()) {
            return invalid(format!(
                "brightness range must satisfy 0 < lo <= hi, got {brightness:?}"
            ));
        }
        Ok(Self {
            crop_area,
            max_rotation_degrees,
            brightness,
        })
    }

    pub fn crop_area(&self) -> (f64, f64) {
        self.crop_area
    }

    pub fn max_rotation_degrees(&self) -> f64 {
        self.max_rotation_degrees
    }

    pub fn brightness(&self) -> (f64, f64) {
        self.brightness
    }
}

/// Applies `ops` in order, drawing each op's parameters from `rng`.
/// Identity, camera tag, and dimensions are preserved; pixels stay in
/// `[0, 1]`. A fixed seed reproduces the output bit for bit.
pub fn augment(
    image: &VehicleImage,
    ops: &[AugmentOp],
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> VehicleImage {
    let mut out = image.clone();
    for op in ops {
        out = match op {
            AugmentOp::Crop => crop_rescale(&out, params, rng),
            AugmentOp::Rotate => rotate(&out, params, rng),
            AugmentOp::Brightness => brightness(&out, params, rng),
        };
    }
    out
}

fn crop_rescale(image: &VehicleImage, params: &AugmentParams, rng: &mut impl Rng) -> VehicleImage {
    let (w, h, d) = (image.width(), image.height(), image.depth());
    let (lo, hi) = params.crop_area;
    let area = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let side = area.sqrt();
    // Window dimensions never drop below the 8-pixel image minimum, so an
    // 8x8 input gets a full-frame (identity) crop instead of an error.
    let cw = ((w as f64 * side).round() as usize).clamp(8.min(w), w);
    let ch = ((h as f64 * side).round() as usize).clamp(8.min(h), h);
    let ox = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };
    let oy = if ch < h { rng.gen_range(0..=h - ch) } else { 0 };

    let mut pixels = vec![0.0; w * h * d];
    for y in 0..h {
        // Map the target pixel center back into the crop window.
        let sy = oy + (((y as f64 + 0.5) * ch as f64 / h as f64) as usize).min(ch - 1);
        for x in 0..w {
            let sx = ox + (((x as f64 + 0.5) * cw as f64 / w as f64) as usize).min(cw - 1);
            for c in 0..d {
                pixels[(y * w + x) * d + c] = image.at(sx, sy, c);
            }
        }
    }
    image.with_pixels(pixels)
}

fn rotate(image: &VehicleImage, params: &AugmentParams, rng: &mut impl Rng) -> VehicleImage {
    let max = params.max_rotation_degrees;
    let degrees = if max == 0.0 { 0.0 } else { rng.gen_range(-max..=max) };
    let theta = degrees.to_radians();
    let (w, h, d) = (image.width(), image.height(), image.depth());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();

    let mut pixels = vec![0.0; w * h * d];
    for y in 0..h {
        for x in 0..w {
            // Inverse-rotate the target location to find its source, then
            // clamp to the edges so corners replicate border pixels.
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = (cx + dx * cos + dy * sin).round().clamp(0.0, w as f64 - 1.0) as usize;
            let sy = (cy - dx * sin + dy * cos).round().clamp(0.0, h as f64 - 1.0) as usize;
            for c in 0..d {
                pixels[(y * w + x) * d + c] = image.at(sx, sy, c);
            }
        }
    }
    image.with_pixels(pixels)
}

fn brightness(image: &VehicleImage, params: &AugmentParams, rng: &mut impl Rng) -> VehicleImage {
    let (lo, hi) = params.brightness;
    let factor = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let pixels = image
        .pixels()
        .iter()
        .map(|&p| (p * factor).clamp(0.0, 1.0))
        .collect();
    image.with_pixels(pixels)
}
