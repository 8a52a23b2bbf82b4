//! Single-level separable discrete wavelet transform and the low/high
//! frequency companion images.
//!
//! Each spatial axis is filtered and subsampled in turn. Odd extents are first
//! padded to even length by repeating the edge sample (symmetric extension);
//! the inverse crops back to the recorded extent. Filters longer than two taps
//! wrap periodically on the padded signal, which keeps the transform
//! orthonormal for every supported family.

use serde::{Deserialize, Serialize};

use crate::tensorio::{Volume, VolumeKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Haar,
    Db2,
}

impl Family {
    /// Orthonormal analysis low-pass filter.
    pub fn lowpass(self) -> &'static [f64] {
        const S: f64 = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Family::Haar => &[S, S],
            // (1 + √3, 3 + √3, 3 − √3, 1 − √3) / (4√2)
            Family::Db2 => &[
                0.482_962_913_144_534_1,
                0.836_516_303_737_807_9,
                0.224_143_868_042_013_4,
                -0.129_409_522_551_260_37,
            ],
        }
    }

    /// Quadrature-mirror high-pass filter `g[k] = (-1)^k h[L-1-k]`.
    pub fn highpass(self) -> Vec<f64> {
        let h = self.lowpass();
        let n = h.len();
        (0..n)
            .map(|k| if k % 2 == 0 { h[n - 1 - k] } else { -h[n - 1 - k] })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Haar => "haar",
            Family::Db2 => "db2",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Family::Haar),
            "db2" => Ok(Family::Db2),
            other => Err(Error::Config(format!("unsupported wavelet family `{other}`"))),
        }
    }
}

/// Single-level subbands of every channel.
///
/// Bands are indexed by a bitmask over the spatial axes, axis 0 in the most
/// significant bit: bit set means high-pass along that axis. Index 0 is the
/// all-low band (LL / LLL).
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub family: Family,
    /// Shape of the transformed volume, channels first.
    pub original_shape: Vec<usize>,
    /// Shape of each band, channels first.
    pub band_shape: Vec<usize>,
    pub bands: Vec<Vec<f64>>,
}

impl Subbands {
    pub fn spatial_rank(&self) -> usize {
        self.original_shape.len() - 1
    }

    /// `L`/`H` per spatial axis, e.g. `"LH"` is low along H, high along W.
    pub fn band_name(&self, index: usize) -> String {
        let rank = self.spatial_rank();
        (0..rank)
            .map(|a| {
                if index >> (rank - 1 - a) & 1 == 1 {
                    'H'
                } else {
                    'L'
                }
            })
            .collect()
    }

    pub fn low(&self) -> &[f64] {
        &self.bands[0]
    }

    /// Sum of squared coefficients over every band.
    pub fn energy(&self) -> f64 {
        self.bands.iter().flatten().map(|x| x * x).sum()
    }

    /// Copy with every band except those selected by `keep` set to zero.
    pub fn masked(&self, keep: impl Fn(usize) -> bool) -> Subbands {
        let mut out = self.clone();
        for (i, band) in out.bands.iter_mut().enumerate() {
            if !keep(i) {
                band.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        out
    }

    /// `a * self + b * other`, for bands of identical layout.
    pub fn axpby(&self, a: f64, other: &Subbands, b: f64) -> Result<Subbands> {
        if self.band_shape != other.band_shape || self.original_shape != other.original_shape {
            return Err(Error::Shape("subband layouts differ".into()));
        }
        let mut out = self.clone();
        for (o, s) in out.bands.iter_mut().zip(&other.bands) {
            for (x, y) in o.iter_mut().zip(s) {
                *x = a * *x + b * y;
            }
        }
        Ok(out)
    }
}

/// Dense array used while filtering, row-major over `shape`.
struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    fn split(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }
}

fn analyze_axis(x: &Array, axis: usize, lo: &[f64], hi: &[f64]) -> (Array, Array) {
    let (outer, n, inner) = x.split(axis);
    let padded = n + n % 2;
    let half = padded / 2;
    let mut shape = x.shape.clone();
    shape[axis] = half;
    let size = outer * half * inner;
    let mut low = vec![0.0; size];
    let mut high = vec![0.0; size];
    let mut line = vec![0.0; padded];
    for o in 0..outer {
        for i in 0..inner {
            for (t, v) in line.iter_mut().enumerate().take(n) {
                *v = x.data[(o * n + t) * inner + i];
            }
            if padded > n {
                line[n] = line[n - 1];
            }
            for k in 0..half {
                let (mut a, mut d) = (0.0, 0.0);
                for (tap, (&hl, &hh)) in lo.iter().zip(hi).enumerate() {
                    let s = line[(2 * k + tap) % padded];
                    a += hl * s;
                    d += hh * s;
                }
                let idx = (o * half + k) * inner + i;
                low[idx] = a;
                high[idx] = d;
            }
        }
    }
    (
        Array {
            shape: shape.clone(),
            data: low,
        },
        Array { shape, data: high },
    )
}

fn synthesize_axis(
    low: &Array,
    high: &Array,
    axis: usize,
    extent: usize,
    lo: &[f64],
    hi: &[f64],
) -> Array {
    let (outer, half, inner) = low.split(axis);
    let padded = 2 * half;
    let mut shape = low.shape.clone();
    shape[axis] = extent;
    let mut out = vec![0.0; outer * extent * inner];
    let mut line = vec![0.0; padded];
    for o in 0..outer {
        for i in 0..inner {
            line.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..half {
                let idx = (o * half + k) * inner + i;
                let (a, d) = (low.data[idx], high.data[idx]);
                for (tap, (&hl, &hh)) in lo.iter().zip(hi).enumerate() {
                    line[(2 * k + tap) % padded] += hl * a + hh * d;
                }
            }
            for (t, &v) in line.iter().enumerate().take(extent) {
                out[(o * extent + t) * inner + i] = v;
            }
        }
    }
    Array { shape, data: out }
}

/// Single-level separable DWT applied to each channel independently.
pub fn dwt(image: &Volume, family: Family) -> Result<Subbands> {
    if let Some(&d) = image.spatial().iter().find(|&&d| d < 2) {
        return Err(Error::Shape(format!(
            "wavelet transform needs spatial extents of at least 2, got {d} in {:?}",
            image.spatial()
        )));
    }
    let lo = family.lowpass();
    let hi = family.highpass();
    let rank = image.spatial_rank();
    let mut parts = vec![Array {
        shape: image.shape().to_vec(),
        data: image.data().iter().map(|&x| x as f64).collect(),
    }];
    for axis in 1..=rank {
        parts = parts
            .iter()
            .flat_map(|p| {
                let (l, h) = analyze_axis(p, axis, lo, &hi);
                [l, h]
            })
            .collect();
    }
    let band_shape = parts[0].shape.clone();
    Ok(Subbands {
        family,
        original_shape: image.shape().to_vec(),
        band_shape,
        bands: parts.into_iter().map(|p| p.data).collect(),
    })
}

/// Inverse of [`dwt`], cropped to the recorded original shape.
pub fn idwt(subbands: &Subbands) -> Result<Volume> {
    let rank = subbands.spatial_rank();
    if rank != 2 && rank != 3 {
        return Err(Error::Shape(format!(
            "subbands must be 2D or 3D, got rank {rank}"
        )));
    }
    if subbands.bands.len() != 1 << rank {
        return Err(Error::Shape(format!(
            "expected {} bands, got {}",
            1 << rank,
            subbands.bands.len()
        )));
    }
    let expected_band: Vec<usize> = subbands
        .original_shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if i == 0 { d } else { d.div_ceil(2) })
        .collect();
    let band_len: usize = expected_band.iter().product();
    if subbands.band_shape != expected_band
        || subbands.bands.iter().any(|b| b.len() != band_len)
    {
        return Err(Error::Shape(format!(
            "inconsistent band shapes: expected {expected_band:?} for original {:?}",
            subbands.original_shape
        )));
    }
    let lo = subbands.family.lowpass();
    let hi = subbands.family.highpass();
    let mut parts: Vec<Array> = subbands
        .bands
        .iter()
        .map(|b| Array {
            shape: subbands.band_shape.clone(),
            data: b.clone(),
        })
        .collect();
    for axis in (1..=rank).rev() {
        let extent = subbands.original_shape[axis];
        parts = parts
            .chunks(2)
            .map(|pair| synthesize_axis(&pair[0], &pair[1], axis, extent, lo, &hi))
            .collect();
    }
    let out = parts.pop().expect("one array remains");
    Volume::new(
        out.shape,
        VolumeKind::Image,
        out.data.into_iter().map(|x| x as f32).collect(),
    )
}

/// Full-resolution low-frequency, raw and high-frequency images.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTriple {
    pub low: Volume,
    pub raw: Volume,
    pub high: Volume,
}

/// Reconstructs the all-low band alone (`low`) and every detail band without
/// it (`high`); `raw` is the input. By linearity `low + high` equals the input
/// up to rounding.
pub fn frequency_triple(image: &Volume, family: Family) -> Result<FrequencyTriple> {
    let bands = dwt(image, family)?;
    let low = idwt(&bands.masked(|i| i == 0))?;
    let high = idwt(&bands.masked(|i| i != 0))?;
    Ok(FrequencyTriple {
        low,
        raw: image.clone(),
        high,
    })
}
