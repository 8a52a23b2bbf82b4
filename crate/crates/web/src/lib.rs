//! Browser demo: wavelet frequency split, copy-paste mixing, and region
//! metrics on synthetic images.
//!
//! The rendering functions are plain Rust returning RGBA buffers; the
//! `wasm_bindgen` exports at the bottom wrap them for JavaScript.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use wavecp::metrics::{boundary, BinaryRegionPair, ClassScores};
use wavecp::mixer::{generate_mask, mix, mix_labels, Direction, MixMask};
use wavecp::tensorio::{generate_synthetic, SynthConfig};
use wavecp::wavelet::{frequency_triple, Family};
use wavecp::{Result, Volume};

/// RGBA pixels, row-major.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Picture {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Copies the pixels out as a `Uint8Array`.
    pub fn pixels(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Picture {
    fn blank(width: usize, height: usize) -> Self {
        Picture {
            width,
            height,
            rgba: vec![255; width * height * 4],
        }
    }

    pub fn rgba(&self) -> &[u8] {
        &self.rgba
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 4;
        self.rgba[i..i + 3].copy_from_slice(&c);
        self.rgba[i + 3] = 255;
    }

    /// Copies `tile` (`size`×`size` colors) to panel `(col, row)` with a
    /// 2-pixel gutter.
    fn blit(&mut self, col: usize, row: usize, size: usize, tile: &[[u8; 3]]) {
        let (ox, oy) = (col * (size + GUTTER), row * (size + GUTTER));
        for y in 0..size {
            for x in 0..size {
                self.put(ox + x, oy + y, tile[y * size + x]);
            }
        }
    }
}

const GUTTER: usize = 2;

const PALETTE: [[u8; 3]; 6] = [
    [0, 0, 0],
    [230, 75, 53],
    [77, 187, 213],
    [0, 160, 135],
    [243, 155, 127],
    [145, 104, 190],
];

fn grid(cols: usize, rows: usize, size: usize) -> Picture {
    Picture::blank(cols * size + (cols - 1) * GUTTER, rows * size + (rows - 1) * GUTTER)
}

fn gray(data: &[f32], lo: f32, hi: f32) -> Vec<[u8; 3]> {
    let span = (hi - lo).max(1e-12);
    data.iter()
        .map(|&v| {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        })
        .collect()
}

/// Symmetric scale around zero: negative dark, positive bright.
fn signed(data: &[f32]) -> Vec<[u8; 3]> {
    let m = data.iter().fold(0.0f32, |a, v| a.max(v.abs()));
    gray(data, -m, m)
}

fn labels_tile(labels: &[u8], under: &[[u8; 3]]) -> Vec<[u8; 3]> {
    labels
        .iter()
        .zip(under)
        .map(|(&l, &g)| {
            if l == 0 {
                g
            } else {
                let c = PALETTE[l as usize % PALETTE.len()];
                [0, 1, 2].map(|k| ((c[k] as u16 * 3 + g[k] as u16) / 4) as u8)
            }
        })
        .collect()
}

fn sample(size: usize, classes: usize, seed: u64) -> Result<(Volume, Volume)> {
    let ds = generate_synthetic(&SynthConfig::new(1, vec![size, size], classes, seed))?;
    let s = &ds.samples()[0];
    Ok((s.image.clone(), s.label.clone().expect("synthetic samples are labeled")))
}

/// Panels: image, low-frequency part, high-frequency part.
pub fn render_decomposition(size: usize, seed: u64, family: Family) -> Result<Picture> {
    let (image, _) = sample(size, 4, seed)?;
    let t = frequency_triple(&image, family)?;
    let mut pic = grid(3, 1, size);
    pic.blit(0, 0, size, &gray(t.raw.data(), 0.0, 1.0));
    pic.blit(1, 0, size, &gray(t.low.data(), 0.0, 1.0));
    pic.blit(2, 0, size, &signed(t.high.data()));
    Ok(pic)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixSummary {
    pub zero_count: usize,
    pub voxels: usize,
    pub crop_offset: Vec<usize>,
    pub crop_size: Vec<usize>,
}

/// Top row: labeled image, unlabeled image, mask. Bottom row: inward and
/// outward mixtures with their mixed labels, and the mask complement.
///
/// The unlabeled image's ground truth stands in for the teacher's
/// pseudo-label.
pub fn render_mix(size: usize, seed: u64, ratio: f64, mask_seed: u64) -> Result<(Picture, MixSummary)> {
    let (xl, yl) = sample(size, 4, seed)?;
    let (xu, yu) = sample(size, 4, seed.wrapping_add(1))?;
    let mask = if ratio >= 1.0 {
        MixMask::ones(&[size, size])
    } else {
        generate_mask(&[size, size], ratio, &mut ChaCha8Rng::seed_from_u64(mask_seed))?
    };
    // Same image pair in both directions keeps the picture readable.
    let x_in = mix(&xl, &xu, &mask)?;
    let x_out = mix(&xu, &xl, &mask)?;
    let y_in = mix_labels(&yl, &yu, &mask, Direction::Inward)?.labels()?;
    let y_out = mix_labels(&yl, &yu, &mask, Direction::Outward)?.labels()?;
    let mut pic = grid(3, 2, size);
    let gl = gray(xl.data(), 0.0, 1.0);
    let gu = gray(xu.data(), 0.0, 1.0);
    pic.blit(0, 0, size, &labels_tile(&yl.labels()?, &gl));
    pic.blit(1, 0, size, &gu);
    pic.blit(2, 0, size, &gray(mask.values(), 0.0, 1.0));
    pic.blit(0, 1, size, &labels_tile(&y_in, &gray(x_in.data(), 0.0, 1.0)));
    pic.blit(1, 1, size, &labels_tile(&y_out, &gray(x_out.data(), 0.0, 1.0)));
    pic.blit(2, 1, size, &gray(mask.complement().values(), 0.0, 1.0));
    let summary = MixSummary {
        zero_count: mask.zero_count(),
        voxels: size * size,
        crop_offset: mask.crop_offset().to_vec(),
        crop_size: mask.crop_size().to_vec(),
    };
    Ok((pic, summary))
}

fn disc(size: usize, cx: f64, cy: f64, r: f64) -> Vec<bool> {
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        })
        .collect()
}

/// Ground-truth disc in the centre, predicted disc shifted by `(dx, dy)` and
/// scaled by `scale`. Overlap is drawn in green, misses in red, false
/// positives in blue and boundaries in white.
pub fn render_metrics(size: usize, dx: f64, dy: f64, scale: f64) -> Result<(Picture, ClassScores)> {
    let c = size as f64 / 2.0;
    let r = size as f64 / 4.0;
    let gt = disc(size, c, c, r);
    let pred = disc(size, c + dx, c + dy, r * scale);
    let pair = BinaryRegionPair::new(&[size, size], pred.clone(), gt.clone())?;
    let scores = ClassScores::compute(&pair)?;
    let (bp, bg) = (boundary(&[size, size], &pred), boundary(&[size, size], &gt));
    let tile: Vec<[u8; 3]> = (0..size * size)
        .map(|i| match (pred[i], gt[i], bp[i] || bg[i]) {
            (_, _, true) => [255, 255, 255],
            (true, true, _) => [0, 160, 135],
            (false, true, _) => [230, 75, 53],
            (true, false, _) => [77, 130, 213],
            _ => [24, 24, 24],
        })
        .collect();
    let mut pic = grid(1, 1, size);
    pic.blit(0, 0, size, &tile);
    Ok((pic, scores))
}

fn js_err(e: wavecp::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn decompose(size: usize, seed: u32, family: &str) -> Result<Picture, JsError> {
    let family: Family = family.parse().map_err(js_err)?;
    render_decomposition(size, seed as u64, family).map_err(js_err)
}

/// Returned to JavaScript as a picture plus a JSON summary string.
#[wasm_bindgen]
pub struct Rendered {
    picture: Picture,
    summary: String,
}

#[wasm_bindgen]
impl Rendered {
    #[wasm_bindgen(getter)]
    pub fn picture(&self) -> Picture {
        self.picture.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn summary(&self) -> String {
        self.summary.clone()
    }
}

#[wasm_bindgen]
pub fn copy_paste(size: usize, seed: u32, ratio: f64, mask_seed: u32) -> Result<Rendered, JsError> {
    let (picture, s) = render_mix(size, seed as u64, ratio, mask_seed as u64).map_err(js_err)?;
    Ok(Rendered {
        picture,
        summary: serde_json::to_string(&s).expect("summary serializes"),
    })
}

#[wasm_bindgen]
pub fn region_metrics(size: usize, dx: f64, dy: f64, scale: f64) -> Result<Rendered, JsError> {
    let (picture, s) = render_metrics(size, dx, dy, scale).map_err(js_err)?;
    Ok(Rendered {
        picture,
        summary: serde_json::to_string(&s).expect("scores serialize"),
    })
}
