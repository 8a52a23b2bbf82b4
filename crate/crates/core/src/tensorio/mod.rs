//! Volumes, datasets, the on-disk manifest format and the synthetic data
//! generator.
//!
//! Every volume is stored densely as `f32` with shape `(C, H, W)` or
//! `(C, D, H, W)`. Label maps keep their integer classes as exact `f32`
//! values so they can flow through the same mixing code as images.

pub(crate) mod crop;
mod dataset;
mod manifest;
mod synth;

pub use crop::{crop, random_crop};
pub use dataset::{split_labeled, Dataset, Sample};
pub use manifest::{
    load_dataset, read_index, save_dataset, BlobRecord, Dtype, Intensity, ManifestIndex,
    ManifestWriter, SampleRecord, INDEX_FILE,
};
pub use synth::{generate_synthetic, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on the class-axis sum of probability volumes.
pub const PROBABILITY_SUM_TOL: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Label,
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Vec<usize>,
    kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume {
    /// Builds a volume and checks the invariants of its kind.
    pub fn new(shape: Vec<usize>, kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        if shape.len() != 3 && shape.len() != 4 {
            return Err(Error::Shape(format!(
                "volume shape must be (C, H, W) or (C, D, H, W), got {shape:?}"
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape:?} ({expected} elements)",
                data.len()
            )));
        }
        let v = Volume { shape, kind, data };
        match kind {
            VolumeKind::Image => {
                if let Some(x) = v.data.iter().find(|x| !x.is_finite()) {
                    return Err(Error::Validation(format!("non-finite image value {x}")));
                }
            }
            VolumeKind::Label => {
                if v.channels() != 1 {
                    return Err(Error::Validation(format!(
                        "label volumes have one channel, got {}",
                        v.channels()
                    )));
                }
                if let Some(x) = v.data.iter().find(|x| **x < 0.0 || x.fract() != 0.0) {
                    return Err(Error::Validation(format!(
                        "label value {x} is not a non-negative integer"
                    )));
                }
            }
            VolumeKind::Probability => v.check_probability()?,
        }
        Ok(v)
    }

    pub fn zeros(shape: Vec<usize>, kind: VolumeKind) -> Result<Self> {
        let n = shape.iter().product();
        Volume::new(shape, kind, vec![0.0; n])
    }

    /// Label map from integer classes over the given spatial shape.
    pub fn from_labels(spatial: &[usize], labels: &[u8]) -> Result<Self> {
        let mut shape = vec![1];
        shape.extend_from_slice(spatial);
        Volume::new(
            shape,
            VolumeKind::Label,
            labels.iter().map(|&l| l as f32).collect(),
        )
    }

    fn check_probability(&self) -> Result<()> {
        let c = self.channels();
        let v = self.voxels();
        for i in 0..v {
            let mut sum = 0.0f64;
            for k in 0..c {
                let p = self.data[k * v + i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Validation(format!(
                        "probability {p} outside [0, 1] at voxel {i}"
                    )));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > PROBABILITY_SUM_TOL as f64 {
                return Err(Error::Validation(format!(
                    "probabilities sum to {sum} at voxel {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn spatial_rank(&self) -> usize {
        self.shape.len() - 1
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Number of voxels per channel.
    pub fn voxels(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    /// Largest label value, or `None` for non-label volumes.
    pub fn max_label(&self) -> Option<usize> {
        (self.kind == VolumeKind::Label)
            .then(|| self.data.iter().fold(0.0f32, |m, &x| m.max(x)) as usize)
    }

    /// Label values as integer classes.
    pub fn labels(&self) -> Result<Vec<u8>> {
        if self.kind != VolumeKind::Label {
            return Err(Error::Validation(format!(
                "expected a label volume, got {:?}",
                self.kind
            )));
        }
        self.data
            .iter()
            .map(|&x| {
                if x <= u8::MAX as f32 {
                    Ok(x as u8)
                } else {
                    Err(Error::Validation(format!("label {x} exceeds 255")))
                }
            })
            .collect()
    }

    pub fn check_labels_below(&self, num_classes: usize) -> Result<()> {
        match self.max_label() {
            Some(m) if m >= num_classes => Err(Error::Validation(format!(
                "label value {m} is not below num_classes {num_classes}"
            ))),
            _ => Ok(()),
        }
    }

    /// Per-volume min-max scaling into `[0, 1]`; constant volumes become 0.
    pub fn min_max_normalized(&self) -> Volume {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&x| (x - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            shape: self.shape.clone(),
            kind: self.kind,
            data,
        }
    }

    /// Applies `f` element-wise, keeping shape. The result is re-validated.
    pub fn map_data(&self, kind: VolumeKind, f: impl Fn(f32) -> f32) -> Result<Volume> {
        Volume::new(
            self.shape.clone(),
            kind,
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }
}
