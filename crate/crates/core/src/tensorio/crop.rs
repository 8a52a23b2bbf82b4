use rand::Rng;

use super::Volume;
use crate::{Error, Result};

/// Extracts the block at `offset` of spatial size `size` from every channel.
pub fn crop(volume: &Volume, offset: &[usize], size: &[usize]) -> Result<Volume> {
    let spatial = volume.spatial();
    if offset.len() != spatial.len() || size.len() != spatial.len() {
        return Err(Error::Shape(format!(
            "crop rank mismatch: volume {spatial:?}, offset {offset:?}, size {size:?}"
        )));
    }
    for d in 0..spatial.len() {
        if size[d] == 0 || offset[d] + size[d] > spatial[d] {
            return Err(Error::Shape(format!(
                "crop {size:?} at {offset:?} exceeds volume {spatial:?}"
            )));
        }
    }
    // Treat rank 2 as depth-1 rank 3.
    let (_, sh, sw) = dims3(spatial);
    let (od, oh, ow) = match *offset {
        [h, w] => (0, h, w),
        [d, h, w] => (d, h, w),
        _ => unreachable!(),
    };
    let (cd, ch, cw) = dims3(size);
    let channels = volume.channels();
    let mut data = Vec::with_capacity(channels * cd * ch * cw);
    for c in 0..channels {
        let src = volume.channel(c);
        for z in 0..cd {
            for y in 0..ch {
                let start = ((od + z) * sh + oh + y) * sw + ow;
                data.extend_from_slice(&src[start..start + cw]);
            }
        }
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(size);
    Volume::new(shape, volume.kind(), data)
}

pub(crate) fn dims3(s: &[usize]) -> (usize, usize, usize) {
    match *s {
        [h, w] => (1, h, w),
        [d, h, w] => (d, h, w),
        _ => panic!("spatial rank must be 2 or 3"),
    }
}

/// Aligned crop of an image and optional label at a uniformly random valid
/// offset.
pub fn random_crop<R: Rng + ?Sized>(
    image: &Volume,
    label: Option<&Volume>,
    patch: &[usize],
    rng: &mut R,
) -> Result<(Volume, Option<Volume>)> {
    let spatial = image.spatial();
    if patch.len() != spatial.len() {
        return Err(Error::Shape(format!(
            "patch {patch:?} has a different rank than volume {spatial:?}"
        )));
    }
    if let Some(l) = label {
        if l.spatial() != spatial {
            return Err(Error::Shape(format!(
                "label shape {:?} differs from image shape {spatial:?}",
                l.spatial()
            )));
        }
    }
    if patch.iter().zip(spatial).any(|(p, s)| p > s || *p == 0) {
        return Err(Error::Shape(format!(
            "patch {patch:?} exceeds volume {spatial:?}"
        )));
    }
    let offset: Vec<usize> = patch
        .iter()
        .zip(spatial)
        .map(|(p, s)| rng.gen_range(0..=s - p))
        .collect();
    let img = crop(image, &offset, patch)?;
    let lab = label.map(|l| crop(l, &offset, patch)).transpose()?;
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::VolumeKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: Vec<usize>) -> Volume {
        let n = shape.iter().product();
        Volume::new(shape, VolumeKind::Image, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn full_patch_is_identity() {
        let v = ramp(vec![1, 256, 256]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, _) = random_crop(&v, None, &[256, 256], &mut rng).unwrap();
        assert_eq!(c.shape(), &[1, 256, 256]);
        assert_eq!(c, v);
    }

    #[test]
    fn crop_aligns_image_and_label() {
        let img = ramp(vec![1, 6, 8]);
        let lab = Volume::from_labels(&[6, 8], &(0..48).map(|i| (i % 5) as u8).collect::<Vec<_>>())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (ci, cl) = random_crop(&img, Some(&lab), &[3, 4], &mut rng).unwrap();
            let cl = cl.unwrap();
            // image values encode the flat index, so they recover the offset
            for (x, l) in ci.data().iter().zip(cl.data()) {
                assert_eq!((*x as usize % 5) as f32, *l);
            }
            assert!(cl.data().iter().all(|l| lab.data().contains(l)));
        }
    }

    #[test]
    fn oversized_patch_rejected() {
        let v = ramp(vec![1, 4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            random_crop(&v, None, &[5, 4, 4], &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn crop_3d_multichannel() {
        let v = ramp(vec![2, 3, 4, 5]);
        let c = crop(&v, &[1, 2, 3], &[2, 2, 2]).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2, 2]);
        // channel 1, z=1+1, y=2+1, x=3+1
        assert_eq!(c.data()[15], (60 + (2 * 4 + 3) * 5 + 4) as f32);
    }
}
