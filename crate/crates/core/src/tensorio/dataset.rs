use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Volume, VolumeKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Volume,
    pub label: Option<Volume>,
}

/// Ordered samples split into labeled and unlabeled index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    /// Validates the samples and derives the labeled/unlabeled partition from
    /// label presence.
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let rank = samples.first().map(|s| s.image.spatial_rank());
        for (i, s) in samples.iter().enumerate() {
            if s.image.kind() != VolumeKind::Image {
                return Err(Error::Validation(format!(
                    "sample `{}`: image volume has kind {:?}",
                    s.id,
                    s.image.kind()
                )));
            }
            if Some(s.image.spatial_rank()) != rank {
                return Err(Error::Validation(format!(
                    "sample `{}`: spatial rank differs from the first sample",
                    s.id
                )));
            }
            match &s.label {
                Some(label) => {
                    if label.kind() != VolumeKind::Label {
                        return Err(Error::Validation(format!(
                            "sample `{}`: label volume has kind {:?}",
                            s.id,
                            label.kind()
                        )));
                    }
                    if label.spatial() != s.image.spatial() {
                        return Err(Error::Shape(format!(
                            "sample `{}`: label shape {:?} differs from image shape {:?}",
                            s.id,
                            label.spatial(),
                            s.image.spatial()
                        )));
                    }
                    label.check_labels_below(num_classes).map_err(|e| {
                        Error::Validation(format!("sample `{}`: {e}", s.id))
                    })?;
                    labeled.push(i);
                }
                None => unlabeled.push(i),
            }
        }
        Ok(Dataset {
            samples,
            labeled,
            unlabeled,
            num_classes,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labeled_indices(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled_indices(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spatial_rank(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.spatial_rank())
    }

    /// Dataset restricted to the labeled samples.
    pub fn labeled_only(&self) -> Dataset {
        let samples = self
            .labeled
            .iter()
            .map(|&i| self.samples[i].clone())
            .collect::<Vec<_>>();
        let labeled = (0..samples.len()).collect();
        Dataset {
            samples,
            labeled,
            unlabeled: Vec::new(),
            num_classes: self.num_classes,
        }
    }

    /// Splits off the samples at `indices` into a second dataset, keeping the
    /// remaining ones in order. Used to carve validation sets.
    pub fn partition(&self, indices: &[usize]) -> Result<(Dataset, Dataset)> {
        let mut take = vec![false; self.len()];
        for &i in indices {
            *take.get_mut(i).ok_or_else(|| {
                Error::Config(format!("index {i} out of range for {} samples", self.len()))
            })? = true;
        }
        let (a, b): (Vec<_>, Vec<_>) = self
            .samples
            .iter()
            .cloned()
            .zip(take)
            .partition(|(_, t)| !*t);
        Ok((
            Dataset::new(a.into_iter().map(|(s, _)| s).collect(), self.num_classes)?,
            Dataset::new(b.into_iter().map(|(s, _)| s).collect(), self.num_classes)?,
        ))
    }
}

/// Number of samples kept labeled: round half up with a floor of one.
pub(crate) fn labeled_count(count: usize, fraction: f64) -> usize {
    ((count as f64 * fraction + 0.5).floor() as usize).clamp(1, count.max(1))
}

/// Marks a seeded random subset of `round(count * fraction)` samples (at
/// least one) as labeled and strips the labels of all others.
pub fn split_labeled(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = dataset.len();
    let keep = labeled_count(n, fraction);
    let candidates: Vec<usize> = dataset.labeled_indices().to_vec();
    if candidates.len() < keep {
        return Err(Error::Config(format!(
            "need {keep} labeled samples but only {} carry labels",
            candidates.len()
        )));
    }
    let mut order = candidates;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = vec![false; n];
    for &i in &order[..keep] {
        chosen[i] = true;
    }
    let samples = dataset
        .samples
        .iter()
        .zip(chosen)
        .map(|(s, keep_label)| Sample {
            id: s.id.clone(),
            image: s.image.clone(),
            label: if keep_label { s.label.clone() } else { None },
        })
        .collect();
    Dataset::new(samples, dataset.num_classes)
}
