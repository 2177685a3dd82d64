//! Datasets and input handling: vehicle images, precomputed feature records,
//! augmentation, sequence building, synthetic data, and the feature file
//! format.

mod augment;
mod features;
mod sequence;
mod synthetic;

pub use augment::{augment, AugmentOp, AugmentParams, ALL_OPS};
pub use features::{
    load_feature_records, parse_feature_records, save_feature_records, write_feature_records,
};
pub use sequence::{build_query_sequence, build_train_sequence};
pub use synthetic::{
    generate_synthetic, holdout_split, to_feature_records, EvalSplit, SyntheticSpec,
    SYNTH_HEIGHT, SYNTH_WIDTH,
};

use crate::tensor::Tensor;
use thiserror::Error;

/// Errors from data validation, generation, and file handling.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("image must be at least 8x8 pixels, got {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("image depth must be 1 (grayscale) or 3 (rgb), got {depth}")]
    BadDepth { depth: usize },
    #[error("pixel buffer holds {got} values but the dimensions require {expected}")]
    PixelCount { expected: usize, got: usize },
    #[error("pixel {index} is {value}, outside the [0, 1] range")]
    PixelRange { index: usize, value: f64 },
    #[error("sequence length must be at least 1")]
    ZeroSequenceLength,
    #[error("cannot build a sequence from an empty record set")]
    EmptyRecords,
    #[error("sequence records mix identities '{first}' and '{second}'")]
    MixedIdentities { first: String, second: String },
    #[error("invalid synthetic spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("invalid augmentation parameters: {reason}")]
    InvalidAugment { reason: String },
    #[error("feature file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("feature file line {line}: vector has {got} values, earlier lines had {expected}")]
    WidthMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("batch shapes disagree: {reason}")]
    BadBatch { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A vehicle image: float pixels in `[0, 1]`, row-major `[height][width][depth]`
/// layout, tagged with an identity and optionally the camera that took it.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleImage {
    id: String,
    camera: Option<String>,
    width: usize,
    height: usize,
    depth: usize,
    pixels: Vec<f64>,
}

impl VehicleImage {
    /// Validates dimensions (at least 8x8, depth 1 or 3), the pixel count,
    /// and that every value lies in `[0, 1]`.
    pub fn new(
        id: impl Into<String>,
        camera: Option<String>,
        width: usize,
        height: usize,
        depth: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, DataError> {
        if width < 8 || height < 8 {
            return Err(DataError::ImageTooSmall { width, height });
        }
        if depth != 1 && depth != 3 {
            return Err(DataError::BadDepth { depth });
        }
        let expected = width * height * depth;
        if pixels.len() != expected {
            return Err(DataError::PixelCount {
                expected,
                got: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, &v)| !(0.0..=1.0).contains(&v) || v.is_nan())
        {
            return Err(DataError::PixelRange { index, value });
        }
        Ok(Self {
            id: id.into(),
            camera,
            width,
            height,
            depth,
            pixels,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn camera(&self) -> Option<&str> {
        self.camera.as_deref()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Pixel at `(x, y, channel)`; no bounds checking beyond the slice's own.
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.depth + c]
    }

    /// The flattened pixel vector, the raw-feature view used by the
    /// passthrough backbone.
    pub fn flatten(&self) -> Vec<f64> {
        self.pixels.clone()
    }

    pub(crate) fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Self {
            id: self.id.clone(),
            camera: self.camera.clone(),
            width: self.width,
            height: self.height,
            depth: self.depth,
            pixels,
        }
    }
}

/// A precomputed embedding or backbone feature vector for one image,
/// tagged like the image it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub camera: Option<String>,
    pub vector: Vec<f64>,
}

impl FeatureRecord {
    pub fn new(id: impl Into<String>, camera: Option<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            camera,
            vector,
        }
    }
}

/// A tensorized minibatch of sequences: `inputs` is `[B, T, F]` and `labels`
/// holds one-hot identity rows `[B, C]`. The invariant that all T instances
/// of a row share one identity is established by the sequence builders.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    inputs: Tensor,
    labels: Tensor,
}

impl SequenceBatch {
    pub fn new(inputs: Tensor, labels: Tensor) -> Result<Self, DataError> {
        if inputs.rank() != 3 {
            return Err(DataError::BadBatch {
                reason: format!("inputs must be [B, T, F], got shape {:?}", inputs.shape()),
            });
        }
        if labels.rank() != 2 {
            return Err(DataError::BadBatch {
                reason: format!("labels must be [B, C], got shape {:?}", labels.shape()),
            });
        }
        if inputs.shape()[0] != labels.shape()[0] {
            return Err(DataError::BadBatch {
                reason: format!(
                    "inputs carry {} sequences but labels carry {} rows",
                    inputs.shape()[0],
                    labels.shape()[0]
                ),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn feature_width(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn class_count(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixels(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i % 10) as f64 / 10.0).collect()
    }

    #[test]
    fn image_validation_catches_each_contract_violation() {
        assert!(matches!(
            VehicleImage::new("a", None, 7, 8, 1, pixels(56)),
            Err(DataError::ImageTooSmall { width: 7, height: 8 })
        ));
        assert!(matches!(
            VehicleImage::new("a", None, 8, 8, 2, pixels(128)),
            Err(DataError::BadDepth { depth: 2 })
        ));
        assert!(matches!(
            VehicleImage::new("a", None, 8, 8, 1, pixels(63)),
            Err(DataError::PixelCount { expected: 64, got: 63 })
        ));
        let mut bad = pixels(64);
        bad[10] = 1.5;
        assert!(matches!(
            VehicleImage::new("a", None, 8, 8, 1, bad),
            Err(DataError::PixelRange { index: 10, .. })
        ));
    }

    #[test]
    fn image_accessors_follow_row_major_layout() {
        let mut px = vec![0.0; 8 * 8 * 1];
        px[(2 * 8 + 5) * 1] = 0.75;
        let img = VehicleImage::new("v1", Some("cam0".into()), 8, 8, 1, px).unwrap();
        assert_eq!(img.at(5, 2, 0), 0.75);
        assert_eq!(img.id(), "v1");
        assert_eq!(img.camera(), Some("cam0"));
        assert_eq!(img.flatten().len(), 64);
    }

    #[test]
    fn rgb_depth_is_accepted() {
        let img = VehicleImage::new("a", None, 8, 8, 3, vec![0.5; 192]).unwrap();
        assert_eq!(img.depth(), 3);
    }

    #[test]
    fn batch_shape_contracts() {
        let inputs = Tensor::zeros(vec![2, 3, 4]).unwrap();
        let labels = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = SequenceBatch::new(inputs.clone(), labels.clone()).unwrap();
        assert_eq!(batch.batch_size(), 2);
        assert_eq!(batch.steps(), 3);
        assert_eq!(batch.feature_width(), 4);
        assert_eq!(batch.class_count(), 2);

        let bad_labels = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            SequenceBatch::new(inputs, bad_labels),
            Err(DataError::BadBatch { .. })
        ));
        let flat = Tensor::zeros(vec![2, 4]).unwrap();
        assert!(matches!(
            SequenceBatch::new(flat, labels),
            Err(DataError::BadBatch { .. })
        ));
    }
}
