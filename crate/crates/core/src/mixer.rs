//! Copy-paste masks and bidirectional mixing of images and label maps.
//!
//! A mask holds 1 where the foreground volume is kept and 0 inside a single
//! axis-aligned block where the background volume shows through. Mixing is a
//! per-voxel selection, so it is exact for both intensities and integer
//! labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensorio::{Volume, VolumeKind};
use crate::{Error, Result};

/// Default crop ratio of the pasted block along each axis.
pub const DEFAULT_RATIO: f64 = 2.0 / 3.0;

/// Which way a mixed sample was built.
///
/// `Inward` pastes an unlabeled crop into a labeled image, `Outward` pastes a
/// labeled crop into an unlabeled image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Inward,
    Outward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixMask {
    shape: Vec<usize>,
    mask: Vec<f32>,
    ratio: f64,
    crop_offset: Vec<usize>,
    crop_size: Vec<usize>,
}

/// `floor(ratio * extent)`, tolerant of the rounding in `ratio` itself
/// (`2/3 * 6` must give 4).
pub fn block_extent(ratio: f64, extent: usize) -> usize {
    (ratio * extent as f64 + 1e-9).floor() as usize
}

impl MixMask {
    /// Mask whose zero block is `crop_size` at `crop_offset`.
    pub fn with_block(
        shape: &[usize],
        ratio: f64,
        crop_offset: Vec<usize>,
        crop_size: Vec<usize>,
    ) -> Result<Self> {
        if crop_offset.len() != shape.len() || crop_size.len() != shape.len() {
            return Err(Error::Shape(format!(
                "block rank mismatch for mask shape {shape:?}"
            )));
        }
        if (0..shape.len()).any(|d| crop_offset[d] + crop_size[d] > shape[d]) {
            return Err(Error::Shape(format!(
                "block {crop_size:?} at {crop_offset:?} exceeds mask {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut mask = vec![1.0f32; n];
        if crop_size.iter().all(|&s| s > 0) {
            for (flat, m) in mask.iter_mut().enumerate() {
                let mut rem = flat;
                let mut inside = true;
                for d in (0..shape.len()).rev() {
                    let c = rem % shape[d];
                    rem /= shape[d];
                    inside &= c >= crop_offset[d] && c < crop_offset[d] + crop_size[d];
                }
                if inside {
                    *m = 0.0;
                }
            }
        }
        Ok(MixMask {
            shape: shape.to_vec(),
            mask,
            ratio,
            crop_offset,
            crop_size,
        })
    }

    /// All ones: the foreground is kept everywhere.
    pub fn ones(shape: &[usize]) -> Self {
        Self::with_block(shape, 0.0, vec![0; shape.len()], vec![0; shape.len()])
            .expect("empty block fits")
    }

    /// All zeros: the background is taken everywhere.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::with_block(shape, 1.0, vec![0; shape.len()], shape.to_vec())
            .expect("full block fits")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.mask
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn crop_offset(&self) -> &[usize] {
        &self.crop_offset
    }

    pub fn crop_size(&self) -> &[usize] {
        &self.crop_size
    }

    pub fn zero_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 0.0).count()
    }

    /// `1 - M`, keeping the block description of the original.
    pub fn complement(&self) -> MixMask {
        MixMask {
            mask: self.mask.iter().map(|m| 1.0 - m).collect(),
            ..self.clone()
        }
    }

    /// The mask as a one-channel image volume, for inspection.
    pub fn to_volume(&self) -> Volume {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        Volume::new(shape, VolumeKind::Image, self.mask.clone()).expect("mask is finite")
    }
}

/// Draws a mask with a zero block of `floor(ratio * extent)` per axis at a
/// uniformly random offset.
pub fn generate_mask<R: Rng + ?Sized>(shape: &[usize], ratio: f64, rng: &mut R) -> Result<MixMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "mask ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let size: Vec<usize> = shape.iter().map(|&d| block_extent(ratio, d)).collect();
    if size.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!(
            "mask ratio {ratio} gives an empty block for shape {shape:?}"
        )));
    }
    let offset: Vec<usize> = shape
        .iter()
        .zip(&size)
        .map(|(&d, &s)| rng.gen_range(0..=d - s))
        .collect();
    MixMask::with_block(shape, ratio, offset, size)
}

/// `foreground * M + background * (1 - M)`, channel by channel.
pub fn mix(foreground: &Volume, background: &Volume, mask: &MixMask) -> Result<Volume> {
    if foreground.shape() != background.shape() {
        return Err(Error::Shape(format!(
            "cannot mix {:?} with {:?}",
            foreground.shape(),
            background.shape()
        )));
    }
    if foreground.spatial() != mask.shape() {
        return Err(Error::Shape(format!(
            "mask shape {:?} differs from volume shape {:?}",
            mask.shape(),
            foreground.spatial()
        )));
    }
    let v = foreground.voxels();
    let data = foreground
        .data()
        .iter()
        .zip(background.data())
        .enumerate()
        .map(|(i, (&f, &b))| if mask.mask[i % v] == 1.0 { f } else { b })
        .collect();
    Volume::new(foreground.shape().to_vec(), foreground.kind(), data)
}

/// A volume tagged with the index of the sample it came from.
pub type Tagged<'a> = (usize, &'a Volume);

/// Builds the inward and outward mixed images from two labeled and two
/// unlabeled samples sharing one mask:
///
/// * `X_in  = X_l[j] * M + X_u[p] * (1 - M)`
/// * `X_out = X_u[q] * M + X_l[i] * (1 - M)`
pub fn mix_pair(
    labeled: (Tagged, Tagged),
    unlabeled: (Tagged, Tagged),
    mask: &MixMask,
) -> Result<(Volume, Volume)> {
    let ((i, xi), (j, xj)) = labeled;
    let ((p, xp), (q, xq)) = unlabeled;
    if i == j {
        return Err(Error::Sampling(format!("labeled pair repeats sample {i}")));
    }
    if p == q {
        return Err(Error::Sampling(format!("unlabeled pair repeats sample {p}")));
    }
    Ok((mix(xj, xp, mask)?, mix(xq, xi, mask)?))
}

/// Mixes a ground-truth label map with a hardened pseudo-label map.
///
/// `Inward`: `Y_l * M + P * (1 - M)`; `Outward`: `P * M + Y_l * (1 - M)`.
pub fn mix_labels(
    label: &Volume,
    pseudo: &Volume,
    mask: &MixMask,
    direction: Direction,
) -> Result<Volume> {
    for (name, v) in [("ground truth", label), ("pseudo-label", pseudo)] {
        if v.kind() != VolumeKind::Label {
            return Err(Error::Validation(format!(
                "{name} must be a hard label map, got {:?}",
                v.kind()
            )));
        }
    }
    match direction {
        Direction::Inward => mix(label, pseudo, mask),
        Direction::Outward => mix(pseudo, label, mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(shape: &[usize], f: impl Fn(usize) -> f32) -> Volume {
        let mut s = vec![1];
        s.extend_from_slice(shape);
        let n = shape.iter().product();
        Volume::new(s, VolumeKind::Image, (0..n).map(f).collect()).unwrap()
    }

    /// Counts mask entries one by one.
    fn enumerate_zeros(m: &MixMask) -> usize {
        let mut zeros = 0;
        for &v in m.values() {
            assert!(v == 0.0 || v == 1.0);
            if v == 0.0 {
                zeros += 1;
            }
        }
        zeros
    }

    #[test]
    fn six_by_six_at_two_thirds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = generate_mask(&[6, 6], DEFAULT_RATIO, &mut rng).unwrap();
        assert_eq!(m.crop_size(), &[4, 4]);
        assert_eq!(enumerate_zeros(&m), 16);
        assert_eq!(m.values().len() - enumerate_zeros(&m), 20);
    }

    #[test]
    fn paper_crop_block() {
        let sizes: Vec<usize> = [112, 112, 80]
            .iter()
            .map(|&d| block_extent(DEFAULT_RATIO, d))
            .collect();
        assert_eq!(sizes, vec![74, 74, 53]);
        // enumerate the integer floor independently
        for (&d, &s) in [112usize, 112, 80].iter().zip(&sizes) {
            let largest = (0..=d).filter(|k| 3 * k <= 2 * d).max().unwrap();
            assert_eq!(largest, s);
        }
    }

    #[test]
    fn full_ratio_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = generate_mask(&[5, 7], 1.0, &mut rng).unwrap();
        assert_eq!(m.crop_offset(), &[0, 0]);
        assert_eq!(m.zero_count(), 35);
    }

    #[test]
    fn bad_ratio_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                generate_mask(&[8, 8], r, &mut rng),
                Err(Error::Config(_))
            ));
        }
        assert!(matches!(
            generate_mask(&[8, 1], 0.5, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mix_boundary_cases() {
        let a = image(&[4, 5], |i| i as f32);
        let b = image(&[4, 5], |i| 100.0 + i as f32);
        assert_eq!(mix(&a, &b, &MixMask::ones(&[4, 5])).unwrap(), a);
        assert_eq!(mix(&a, &b, &MixMask::zeros(&[4, 5])).unwrap(), b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = generate_mask(&[4, 5], 0.5, &mut rng).unwrap();
        assert_eq!(mix(&a, &a, &m).unwrap(), a);
    }

    #[test]
    fn mix_selects_by_block() {
        let a = image(&[6, 6], |_| 1.0);
        let b = image(&[6, 6], |_| 2.0);
        let m = MixMask::with_block(&[6, 6], 0.5, vec![1, 2], vec![3, 3]).unwrap();
        let out = mix(&a, &b, &m).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let inside = (1..4).contains(&y) && (2..5).contains(&x);
                assert_eq!(out.data()[y * 6 + x], if inside { 2.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn mix_shape_mismatch() {
        let a = image(&[4, 4], |_| 1.0);
        let b = image(&[4, 5], |_| 1.0);
        assert!(matches!(
            mix(&a, &b, &MixMask::ones(&[4, 4])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            mix(&a, &a, &MixMask::ones(&[4, 5])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pair_boundary_cases() {
        let s = [4, 4];
        let xi = image(&s, |_| 1.0);
        let xj = image(&s, |_| 2.0);
        let xp = image(&s, |_| 3.0);
        let xq = image(&s, |_| 4.0);
        let (xin, xout) =
            mix_pair(((0, &xi), (1, &xj)), ((2, &xp), (3, &xq)), &MixMask::ones(&s)).unwrap();
        assert_eq!((xin, xout), (xj.clone(), xq.clone()));
        let (xin, xout) =
            mix_pair(((0, &xi), (1, &xj)), ((2, &xp), (3, &xq)), &MixMask::zeros(&s)).unwrap();
        assert_eq!((xin, xout), (xp.clone(), xi.clone()));
        assert!(matches!(
            mix_pair(((0, &xi), (0, &xj)), ((2, &xp), (3, &xq)), &MixMask::ones(&s)),
            Err(Error::Sampling(_))
        ));
        assert!(matches!(
            mix_pair(((0, &xi), (1, &xj)), ((2, &xp), (2, &xq)), &MixMask::ones(&s)),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn pair_voxel_accounting() {
        let s = [9, 12];
        let xl = image(&s, |_| 1.0);
        let xu = image(&s, |_| -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let m = generate_mask(&s, DEFAULT_RATIO, &mut rng).unwrap();
            let (xin, _) = mix_pair(((0, &xl), (1, &xl)), ((2, &xu), (3, &xu)), &m).unwrap();
            let from_unlabeled = xin.data().iter().filter(|&&v| v == -1.0).count();
            assert_eq!(from_unlabeled, enumerate_zeros(&m));
            assert_eq!(from_unlabeled, 6 * 8);
        }
    }

    #[test]
    fn label_mixing() {
        let s = [4, 4];
        let y = Volume::from_labels(&s, &[1; 16]).unwrap();
        let p = Volume::from_labels(&s, &[2; 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = generate_mask(&s, 0.5, &mut rng).unwrap();
        assert_eq!(mix_labels(&y, &y, &m, Direction::Inward).unwrap(), y);
        assert_eq!(
            mix_labels(&y, &p, &MixMask::ones(&s), Direction::Inward).unwrap(),
            y
        );
        assert_eq!(
            mix_labels(&y, &p, &MixMask::ones(&s), Direction::Outward).unwrap(),
            p
        );
        let out = mix_labels(&y, &p, &m, Direction::Outward).unwrap();
        assert!(out.data().iter().all(|v| *v == 1.0 || *v == 2.0));
        assert_eq!(out.data().iter().filter(|v| **v == 1.0).count(), 4);

        let probs = Volume::new(vec![2, 4, 4], VolumeKind::Probability, vec![0.5; 32]).unwrap();
        assert!(matches!(
            mix_labels(&y, &probs, &m, Direction::Inward),
            Err(Error::Validation(_))
        ));
    }

    proptest! {
        #[test]
        fn zero_block_matches_floor(
            shape in prop::collection::vec(1usize..20, 2..=3),
            ratio in 0.05f64..=1.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match generate_mask(&shape, ratio, &mut rng) {
                Ok(m) => {
                    let expected: usize = shape.iter().map(|&d| block_extent(ratio, d)).product();
                    prop_assert_eq!(enumerate_zeros(&m), expected);
                    for d in 0..shape.len() {
                        prop_assert!(m.crop_offset()[d] + m.crop_size()[d] <= shape[d]);
                    }
                }
                Err(e) => {
                    prop_assert!(matches!(e, Error::Config(_)));
                    prop_assert!(shape.iter().any(|&d| block_extent(ratio, d) == 0));
                }
            }
        }

        #[test]
        fn swapped_mixes_sum_to_inputs(
            data in prop::collection::vec(-5.0f32..5.0, 2 * 48),
            seed in any::<u64>(),
        ) {
            let s = [6, 8];
            let a = Volume::new(vec![2, 6, 8], VolumeKind::Image, data[..96].to_vec()).unwrap();
            let b = image(&s, |i| data[i] * 0.5);
            let b = Volume::new(vec![2, 6, 8], VolumeKind::Image,
                b.data().iter().chain(b.data()).copied().collect()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = generate_mask(&s, 0.6, &mut rng).unwrap();
            let ab = mix(&a, &b, &m).unwrap();
            let ba = mix(&b, &a, &m).unwrap();
            for i in 0..96 {
                prop_assert_eq!(ab.data()[i] + ba.data()[i], a.data()[i] + b.data()[i]);
            }
            prop_assert_eq!(mix(&ab, &b, &m).unwrap(), ab);
        }
    }
}
