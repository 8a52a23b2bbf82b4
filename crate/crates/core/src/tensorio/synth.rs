use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::crop::dims3;
use super::{Dataset, Sample, Volume, VolumeKind};
use crate::{Error, Result};

/// Smallest spatial extent that can host an ellipse of the minimum radius.
const MIN_EXTENT: usize = 8;
const PLACEMENT_ATTEMPTS: usize = 200;
/// Fraction of each shape that must stay visible after later shapes are
/// painted over it.
const MIN_VISIBLE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    /// Spatial shape, `(H, W)` or `(D, H, W)`.
    pub shape: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise as a fraction of the
    /// clean image's intensity range.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_noise() -> f64 {
    0.05
}

impl SynthConfig {
    pub fn new(count: usize, shape: Vec<usize>, num_classes: usize, seed: u64) -> Self {
        SynthConfig {
            count,
            shape,
            num_classes,
            seed,
            noise_sigma: default_noise(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rotation in the (H, W) plane.
    angle: f64,
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dz = z - self.center[0];
        let dy = y - self.center[1];
        let dx = x - self.center[2];
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (dz / self.radii[0]).powi(2) + (u / self.radii[1]).powi(2) + (v / self.radii[2]).powi(2)
            <= 1.0
    }
}

/// Generates `count` labeled samples of smooth background noise with
/// `num_classes - 1` randomly placed ellipses (ellipsoids in 3D), one per
/// foreground class, each in its own intensity band.
///
/// Output images are min-max scaled into `[0, 1]`. The result depends only on
/// the config.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    let rank = config.shape.len();
    if rank != 2 && rank != 3 {
        return Err(Error::Config(format!(
            "synthetic shape must have rank 2 or 3, got {:?}",
            config.shape
        )));
    }
    if config.num_classes < 2 || config.num_classes > 255 {
        return Err(Error::Config(format!(
            "num_classes must lie in [2, 255], got {}",
            config.num_classes
        )));
    }
    if config.shape.iter().any(|&d| d < MIN_EXTENT) {
        return Err(Error::Config(format!(
            "shape {:?} too small to fit an ellipse (minimum extent {MIN_EXTENT})",
            config.shape
        )));
    }
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise_sigma must be finite and non-negative, got {}",
            config.noise_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.count.max(1).to_string().len().max(4);
    let samples = (0..config.count)
        .map(|i| {
            let (image, label) = generate_one(config, &mut rng)?;
            Ok(Sample {
                id: format!("s{i:0width$}"),
                image,
                label: Some(label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, config.num_classes)
}

fn generate_one(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(Volume, Volume)> {
    let rank = config.shape.len();
    let (d, h, w) = dims3(&config.shape);
    let n = d * h * w;
    let k = config.num_classes;

    let mut image = smooth_background(d, h, w, rng);

    let mut labels = vec![0u8; n];
    for _ in 0..PLACEMENT_ATTEMPTS {
        labels.iter_mut().for_each(|l| *l = 0);
        let mut painted = vec![0usize; k];
        for class in 1..k {
            let e = random_ellipsoid(rank, (d, h, w), rng);
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        if e.contains(z as f64, y as f64, x as f64) {
                            labels[(z * h + y) * w + x] = class as u8;
                            painted[class] += 1;
                        }
                    }
                }
            }
        }
        let mut visible = vec![0usize; k];
        for &l in &labels {
            visible[l as usize] += 1;
        }
        let ok = (1..k)
            .all(|c| visible[c] > 0 && visible[c] as f64 >= MIN_VISIBLE * painted[c] as f64);
        if ok {
            break;
        }
    }

    // Foreground bands sit above the background range and are evenly spaced.
    let bands: Vec<f64> = (0..k)
        .map(|c| {
            if c == 0 {
                0.0
            } else {
                0.4 + 0.6 * c as f64 / (k - 1) as f64 + rng.gen_range(-0.04..0.04)
            }
        })
        .collect();
    for (v, &l) in image.iter_mut().zip(&labels) {
        if l > 0 {
            *v = bands[l as usize] + 0.25 * (*v - 0.175);
        }
    }

    let (lo, hi) = minmax(&image);
    let sigma = config.noise_sigma * (hi - lo).max(f64::EPSILON);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in image.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    let (lo, hi) = minmax(&image);
    let range = (hi - lo).max(f64::EPSILON);
    let data: Vec<f32> = image.iter().map(|&v| ((v - lo) / range) as f32).collect();

    let mut shape = vec![1];
    shape.extend_from_slice(&config.shape);
    let image = Volume::new(shape, VolumeKind::Image, data)?.min_max_normalized();
    let label = Volume::from_labels(&config.shape, &labels)?;
    Ok((image, label))
}

fn minmax(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

fn random_ellipsoid(rank: usize, (d, h, w): (usize, usize, usize), rng: &mut ChaCha8Rng) -> Ellipsoid {
    let mut radius = |extent: usize| {
        let lo = (0.12 * extent as f64).max(1.5);
        let hi = (0.28 * extent as f64).max(lo + 0.5);
        rng.gen_range(lo..hi)
    };
    let rz = if rank == 3 { radius(d) } else { 0.5 };
    let ry = radius(h);
    let rx = radius(w);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    // keep the rotated footprint inside the image
    let reach = ry.max(rx);
    let mut center = |extent: usize, r: f64| {
        let lo = r.min(extent as f64 / 2.0);
        let hi = (extent as f64 - 1.0 - r).max(lo);
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    };
    let cz = if rank == 3 { center(d, rz) } else { 0.0 };
    let cy = center(h, reach);
    let cx = center(w, reach);
    Ellipsoid {
        center: [cz, cy, cx],
        radii: [rz, ry, rx],
        angle,
    }
}

/// Low-frequency noise in `[0, 0.35]` made by multilinear interpolation of
/// a coarse random grid.
fn smooth_background(d: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells = |n: usize| if n == 1 { 1 } else { (n / 8).clamp(2, 8) };
    let (gd, gh, gw) = (cells(d), cells(h), cells(w));
    let grid: Vec<f64> = (0..(gd + 1) * (gh + 1) * (gw + 1))
        .map(|_| rng.gen_range(0.0..0.35))
        .collect();
    let at = |z: usize, y: usize, x: usize| grid[(z * (gh + 1) + y) * (gw + 1) + x];
    let coord = |i: usize, n: usize, g: usize| -> (usize, f64) {
        if n == 1 {
            return (0, 0.0);
        }
        let t = i as f64 / (n - 1) as f64 * g as f64;
        let i0 = (t.floor() as usize).min(g - 1);
        (i0, t - i0 as f64)
    };
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let (z0, fz) = coord(z, d, gd);
        let z1 = if gd == 1 && d == 1 { z0 } else { z0 + 1 };
        for y in 0..h {
            let (y0, fy) = coord(y, h, gh);
            for x in 0..w {
                let (x0, fx) = coord(x, w, gw);
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let plane = |zz: usize| {
                    lerp(
                        lerp(at(zz, y0, x0), at(zz, y0, x0 + 1), fx),
                        lerp(at(zz, y0 + 1, x0), at(zz, y0 + 1, x0 + 1), fx),
                        fy,
                    )
                };
                out.push(lerp(plane(z0), plane(z1), fz));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig::new(10, vec![64, 64], 4, 7);
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn labels_cover_all_classes() {
        let cfg = SynthConfig::new(10, vec![64, 64], 4, 7);
        let ds = generate_synthetic(&cfg).unwrap();
        for s in ds.samples() {
            let labels = s.label.as_ref().unwrap().labels().unwrap();
            let mut seen = [false; 4];
            for l in labels {
                seen[l as usize] = true;
            }
            assert_eq!(seen, [true; 4], "sample {}", s.id);
            let img = s.image.data();
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn three_dimensional_generation() {
        let cfg = SynthConfig::new(2, vec![16, 24, 24], 3, 1);
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.sample(0).image.shape(), &[1, 16, 24, 24]);
        let labels = ds.sample(1).label.as_ref().unwrap().labels().unwrap();
        assert!(labels.contains(&1) && labels.contains(&2));
    }

    #[test]
    fn too_small_is_config_error() {
        let cfg = SynthConfig::new(1, vec![4, 64], 3, 1);
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig::new(1, vec![64], 3, 1);
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig::new(1, vec![64, 64], 1, 1);
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }
}
