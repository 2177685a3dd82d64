//! Synthetic vehicle data: each identity is a smooth random pattern, each
//! camera viewpoint a fixed geometric-plus-photometric transform of it, so
//! identities are cleanly separable at zero noise and degrade gracefully as
//! noise grows.

use super::{DataError, FeatureRecord, VehicleImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::collections::BTreeMap;
use std::f64::consts::TAU;

/// Width of generated images.
pub const SYNTH_WIDTH: usize = 16;
/// Height of generated images.
pub const SYNTH_HEIGHT: usize = 16;

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Number of distinct identities; at least 2 so a classifier is trainable.
    pub num_identities: usize,
    /// Images generated per identity per viewpoint.
    pub images_per_identity: usize,
    /// Number of camera viewpoints; each gets a fixed transform and a
    /// `cam<k>` tag.
    pub viewpoint_count: usize,
    /// Standard deviation of per-pixel Gaussian noise (clamped to `[0, 1]`
    /// after adding). Zero produces identical images per (identity, camera).
    pub noise_scale: f64,
    /// Seed for the whole generation process.
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: String| Err(DataError::InvalidSpec { reason });
        if self.num_identities < 2 {
            return invalid(format!(
                "num_identities must be at least 2, got {}",
                self.num_identities
            ));
        }
        if self.images_per_identity == 0 {
            return invalid("images_per_identity must be at least 1".into());
        }
        if self.viewpoint_count == 0 {
            return invalid("viewpoint_count must be at least 1".into());
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return invalid(format!(
                "noise_scale must be finite and >= 0, got {}",
                self.noise_scale
            ));
        }
        Ok(())
    }
}

/// Generates `num_identities * viewpoint_count * images_per_identity` images
/// in a fixed order (identity-major, then viewpoint, then instance).
///
/// Identity patterns are sums of low-frequency sinusoids with seeded random
/// frequencies and phases; a camera's transform is a circular pixel shift
/// plus a fixed brightness factor. The same seed reproduces the dataset
/// exactly.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<VehicleImage>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_scale > 0.0 {
        Some(Normal::new(0.0, spec.noise_scale).expect("validated finite nonnegative scale"))
    } else {
        None
    };

    let mut images = Vec::with_capacity(
        spec.num_identities * spec.viewpoint_count * spec.images_per_identity,
    );
    for identity in 0..spec.num_identities {
        let pattern = identity_pattern(&mut rng);
        for viewpoint in 0..spec.viewpoint_count {
            let viewed = apply_viewpoint(&pattern, viewpoint);
            for _ in 0..spec.images_per_identity {
                let mut pixels = viewed.clone();
                if let Some(n) = &noise {
                    for p in &mut pixels {
                        *p = (*p + n.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                }
                images.push(
                    VehicleImage::new(
                        format!("id{identity:03}"),
                        Some(format!("cam{viewpoint}")),
                        SYNTH_WIDTH,
                        SYNTH_HEIGHT,
                        1,
                        pixels,
                    )
                    .expect("generated pixels are clamped into range"),
                );
            }
        }
    }
    Ok(images)
}

/// A smooth per-identity base pattern: two random low-frequency sinusoids
/// around mid-gray, kept inside (0, 1).
fn identity_pattern(rng: &mut impl Rng) -> Vec<f64> {
    let freq = |rng: &mut dyn rand::RngCore| rng.gen_range(1..=3) as f64;
    let (u1, v1, u2, v2) = (freq(rng), freq(rng), freq(rng), freq(rng));
    let phase1 = rng.gen_range(0.0..TAU);
    let phase2 = rng.gen_range(0.0..TAU);
    let mut pixels = Vec::with_capacity(SYNTH_WIDTH * SYNTH_HEIGHT);
    for y in 0..SYNTH_HEIGHT {
        for x in 0..SYNTH_WIDTH {
            let fx = x as f64 / SYNTH_WIDTH as f64;
            let fy = y as f64 / SYNTH_HEIGHT as f64;
            let a = (TAU * (u1 * fx + v1 * fy) + phase1).sin();
            let b = (TAU * (u2 * fx - v2 * fy) + phase2).sin();
            pixels.push((0.5 + 0.18 * a + 0.18 * b).clamp(0.02, 0.98));
        }
    }
    pixels
}

/// The fixed transform of camera `viewpoint`: a mild circular shift of one
/// pixel per camera index on both axes and a brightness factor stepping down
/// 4% per camera. Mild on purpose: viewpoint changes must stay smaller than
/// the distance between identity patterns.
fn apply_viewpoint(pattern: &[f64], viewpoint: usize) -> Vec<f64> {
    let dx = viewpoint % SYNTH_WIDTH;
    let dy = viewpoint % SYNTH_HEIGHT;
    let factor = (1.0 - 0.04 * viewpoint as f64).max(0.6);
    let mut out = vec![0.0; pattern.len()];
    for y in 0..SYNTH_HEIGHT {
        for x in 0..SYNTH_WIDTH {
            let sx = (x + dx) % SYNTH_WIDTH;
            let sy = (y + dy) % SYNTH_HEIGHT;
            out[y * SYNTH_WIDTH + x] = (pattern[sy * SYNTH_WIDTH + sx] * factor).clamp(0.0, 1.0);
        }
    }
    out
}

/// Flattens images into feature records carrying the same tags.
pub fn to_feature_records(images: &[VehicleImage]) -> Vec<FeatureRecord> {
    images
        .iter()
        .map(|img| FeatureRecord::new(img.id(), img.camera().map(String::from), img.flatten()))
        .collect()
}

/// A retrieval evaluation split over one image set.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    /// Everything not held out; what the pipeline trains on.
    pub train: Vec<VehicleImage>,
    /// One held-out image per identity from the first camera.
    pub queries: Vec<VehicleImage>,
    /// Held-out images from the remaining cameras.
    pub gallery: Vec<VehicleImage>,
}

/// Holds out the last image of every (identity, camera) group. Holdouts from
/// the lexicographically first camera become queries; holdouts from every
/// other camera form the gallery, so each query has only cross-camera
/// relevants and the same-camera exclusion rule never empties its candidate
/// set. Groups with a single image are left in the training set.
pub fn holdout_split(images: &[VehicleImage]) -> EvalSplit {
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        let camera = img.camera().unwrap_or("-").to_owned();
        groups.entry((img.id().to_owned(), camera)).or_default().push(i);
    }
    let first_camera = groups
        .keys()
        .map(|(_, cam)| cam.clone())
        .min()
        .unwrap_or_default();

    let mut held = vec![false; images.len()];
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for ((_, camera), indices) in &groups {
        if indices.len() < 2 {
            continue;
        }
        let &last = indices.last().expect("group is nonempty");
        held[last] = true;
        if *camera == first_camera {
            queries.push(images[last].clone());
        } else {
            gallery.push(images[last].clone());
        }
    }
    let train = images
        .iter()
        .enumerate()
        .filter(|(i, _)| !held[*i])
        .map(|(_, img)| img.clone())
        .collect();
    EvalSplit {
        train,
        queries,
        gallery,
    }
}
