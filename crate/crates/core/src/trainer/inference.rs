use crate::metrics::{score_labels, MetricReport};
use crate::nn::{ParamStore, Tape};
use crate::tensorio::crop::dims3;
use crate::tensorio::{crop, Dataset, Volume, VolumeKind};
use crate::wavelet::{frequency_triple, Family};
use crate::xnetplus::{TripleBatch, XNetPlus};
use crate::{Error, Result};

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Window starts covering `[0, extent)` with `window`-sized tiles at half
/// overlap; the last tile is flush with the end.
fn window_starts(extent: usize, window: usize) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let stride = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + window < extent).collect();
    starts.push(extent - window);
    starts
}

/// Grows every spatial axis to `size` by repeating the last slice.
fn pad_edge(volume: &Volume, size: &[usize]) -> Result<Volume> {
    let spatial = volume.spatial();
    if spatial == size {
        return Ok(volume.clone());
    }
    let (sd, sh, sw) = dims3(spatial);
    let (td, th, tw) = dims3(size);
    let mut data = Vec::with_capacity(volume.channels() * td * th * tw);
    for c in 0..volume.channels() {
        let src = volume.channel(c);
        for z in 0..td {
            for y in 0..th {
                let row = (z.min(sd - 1) * sh + y.min(sh - 1)) * sw;
                data.extend((0..tw).map(|x| src[row + x.min(sw - 1)]));
            }
        }
    }
    let mut shape = vec![volume.channels()];
    shape.extend_from_slice(size);
    Volume::new(shape, volume.kind(), data)
}

/// Main-branch class probabilities for a whole image.
///
/// Each axis is padded to a multiple of the network's divisor. Images larger
/// than `patch` are tiled with half-overlapping windows whose probabilities
/// are averaged. An empty `patch` means a single full-image window.
pub fn predict_probabilities(
    arch: &XNetPlus,
    params: &ParamStore<f32>,
    image: &Volume,
    patch: &[usize],
    family: Family,
) -> Result<Volume> {
    let cfg = arch.config();
    if image.spatial_rank() != cfg.spatial_rank {
        return Err(Error::Config(format!(
            "image has spatial rank {}, model expects {}",
            image.spatial_rank(),
            cfg.spatial_rank
        )));
    }
    if image.channels() != cfg.in_channels {
        return Err(Error::Config(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            cfg.in_channels
        )));
    }
    if !patch.is_empty() && patch.len() != cfg.spatial_rank {
        return Err(Error::Config(format!("patch {patch:?} does not match the model rank")));
    }
    let div = cfg.divisor();
    let spatial = image.spatial().to_vec();
    let window: Vec<usize> = spatial
        .iter()
        .enumerate()
        .map(|(a, &s)| round_up(patch.get(a).copied().unwrap_or(s), div))
        .collect();
    let padded_size: Vec<usize> = spatial
        .iter()
        .zip(&window)
        .map(|(&s, &w)| round_up(s, div).max(w))
        .collect();
    let padded = pad_edge(image, &padded_size)?;

    let k = cfg.num_classes;
    let (pd, ph, pw) = dims3(&padded_size);
    let (wd, wh, ww) = dims3(&window);
    let mut sum = vec![0.0f64; k * pd * ph * pw];
    let mut hits = vec![0u32; pd * ph * pw];
    let axes: Vec<Vec<usize>> = padded_size
        .iter()
        .zip(&window)
        .map(|(&e, &w)| window_starts(e, w))
        .collect();
    let depth_starts = if cfg.spatial_rank == 3 { axes[0].clone() } else { vec![0] };
    let (hs, ws) = (&axes[axes.len() - 2], &axes[axes.len() - 1]);
    for &z0 in &depth_starts {
        for &y0 in hs {
            for &x0 in ws {
                let offset: Vec<usize> = if cfg.spatial_rank == 3 { vec![z0, y0, x0] } else { vec![y0, x0] };
                let tile = crop(&padded, &offset, &window)?;
                let triple = frequency_triple(&tile, family)?;
                let batch = TripleBatch::<f32>::from_triples(&[&triple])?;
                let mut tape = Tape::new(params, false);
                let out = arch.forward(&mut tape, &batch)?;
                let probs = &tape.value(out.main).data;
                let tv = wd * wh * ww;
                for z in 0..wd {
                    for y in 0..wh {
                        for x in 0..ww {
                            let t = (z * wh + y) * ww + x;
                            let g = ((z0 + z) * ph + y0 + y) * pw + x0 + x;
                            hits[g] += 1;
                            for c in 0..k {
                                sum[c * pd * ph * pw + g] += probs[c * tv + t] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let pv = pd * ph * pw;
    let averaged: Vec<f32> = sum
        .iter()
        .enumerate()
        .map(|(i, s)| (s / hits[i % pv] as f64) as f32)
        .collect();
    let mut shape = vec![k];
    shape.extend_from_slice(&padded_size);
    let full = Volume::new(shape, VolumeKind::Probability, averaged)?;
    crop(&full, &vec![0; spatial.len()], &spatial)
}

/// Per-voxel argmax over channels; ties go to the lowest class.
pub fn argmax_labels(probs: &Volume) -> Vec<u8> {
    let v = probs.voxels();
    (0..v)
        .map(|i| {
            let mut best = 0;
            for c in 1..probs.channels() {
                if probs.data()[c * v + i] > probs.data()[best * v + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Hard label map for a whole image.
pub fn predict_labels(
    arch: &XNetPlus,
    params: &ParamStore<f32>,
    image: &Volume,
    patch: &[usize],
    family: Family,
) -> Result<Volume> {
    let probs = predict_probabilities(arch, params, image, patch, family)?;
    Volume::from_labels(image.spatial(), &argmax_labels(&probs))
}

/// Foreground metrics of `params` over every labeled sample.
pub fn evaluate_params(
    arch: &XNetPlus,
    params: &ParamStore<f32>,
    dataset: &Dataset,
    patch: &[usize],
    family: Family,
) -> Result<MetricReport> {
    if dataset.labeled_indices().is_empty() {
        return Err(Error::Validation("evaluation needs labeled samples".into()));
    }
    let mut rows = Vec::new();
    for &i in dataset.labeled_indices() {
        let sample = dataset.sample(i);
        let gt = sample.label.as_ref().expect("labeled index has a label").labels()?;
        let probs = predict_probabilities(arch, params, &sample.image, patch, family)?;
        let pred = argmax_labels(&probs);
        rows.push(score_labels(sample.image.spatial(), &pred, &gt, dataset.num_classes())?);
    }
    MetricReport::aggregate(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_extent() {
        assert_eq!(window_starts(64, 64), vec![0]);
        assert_eq!(window_starts(96, 64), vec![0, 32]);
        assert_eq!(window_starts(100, 64), vec![0, 32, 36]);
        assert_eq!(window_starts(128, 32), vec![0, 16, 32, 48, 64, 80, 96]);
    }

    #[test]
    fn edge_padding_repeats_last_slice() {
        let v = Volume::new(vec![1, 2, 2], VolumeKind::Image, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pad_edge(&v, &[3, 4]).unwrap();
        assert_eq!(
            p.data(),
            &[1.0, 2.0, 2.0, 2.0, 3.0, 4.0, 4.0, 4.0, 3.0, 4.0, 4.0, 4.0]
        );
    }
}
