//! Overlap and boundary-distance metrics for binary regions.
//!
//! Dice and Jaccard are percentages. Surface distances are in voxels scaled
//! by a per-axis spacing (1 by default). A boundary voxel is a region voxel
//! with at least one face-adjacent voxel outside the region; voxels past the
//! array edge count as outside. The symmetric surface-distance multiset pools
//! the nearest-boundary distance of every boundary voxel of each region to the
//! boundary of the other. `hd95` is its 95th percentile with linear
//! interpolation between order statistics and `asd` is its mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Two binary regions over the same 2D or 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryRegionPair {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    pred: Vec<bool>,
    gt: Vec<bool>,
}

impl BinaryRegionPair {
    pub fn new(shape: &[usize], pred: Vec<bool>, gt: Vec<bool>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 || shape.contains(&0) {
            return Err(Error::Shape(format!("unsupported region shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if pred.len() != n || gt.len() != n {
            return Err(Error::Shape(format!(
                "region sizes {} and {} do not match shape {shape:?}",
                pred.len(),
                gt.len()
            )));
        }
        Ok(BinaryRegionPair {
            shape: shape.to_vec(),
            spacing: vec![1.0; shape.len()],
            pred,
            gt,
        })
    }

    /// Regions `pred == class` and `gt == class` of two label maps.
    pub fn from_labels(shape: &[usize], pred: &[u8], gt: &[u8], class: u8) -> Result<Self> {
        Self::new(
            shape,
            pred.iter().map(|&v| v == class).collect(),
            gt.iter().map(|&v| v == class).collect(),
        )
    }

    pub fn with_spacing(mut self, spacing: &[f64]) -> Result<Self> {
        if spacing.len() != self.shape.len() || spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("invalid spacing {spacing:?}")));
        }
        self.spacing = spacing.to_vec();
        Ok(self)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn pred(&self) -> &[bool] {
        &self.pred
    }

    pub fn gt(&self) -> &[bool] {
        &self.gt
    }

    fn counts(&self) -> (usize, usize, usize) {
        let mut a = 0;
        let mut b = 0;
        let mut both = 0;
        for (&p, &g) in self.pred.iter().zip(&self.gt) {
            a += p as usize;
            b += g as usize;
            both += (p && g) as usize;
        }
        (a, b, both)
    }
}

/// `100·2|A∩B| / (|A|+|B|)`, 100 when both regions are empty.
pub fn dice(pair: &BinaryRegionPair) -> f64 {
    let (a, b, both) = pair.counts();
    if a + b == 0 {
        return 100.0;
    }
    100.0 * 2.0 * both as f64 / (a + b) as f64
}

/// `100·|A∩B| / |A∪B|`, 100 when both regions are empty.
pub fn jaccard(pair: &BinaryRegionPair) -> f64 {
    let (a, b, both) = pair.counts();
    let union = a + b - both;
    if union == 0 {
        return 100.0;
    }
    100.0 * both as f64 / union as f64
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Region voxels with a face-adjacent voxel outside the region.
pub fn boundary(shape: &[usize], region: &[bool]) -> Vec<bool> {
    let st = strides(shape);
    let mut out = vec![false; region.len()];
    for (idx, &inside) in region.iter().enumerate() {
        if !inside {
            continue;
        }
        out[idx] = (0..shape.len()).any(|ax| {
            let c = (idx / st[ax]) % shape[ax];
            c == 0 || c + 1 == shape[ax] || !region[idx - st[ax]] || !region[idx + st[ax]]
        });
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line.
/// `f` holds squared distances (`INFINITY` for no site); `w` is the squared
/// spacing along the line.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let s = ((fq + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        // Guard against rounding in the breakpoints: take the better neighbour.
        let eval = |p: usize| {
            let d = qf - p as f64;
            w * d * d + f[p]
        };
        let mut best = eval(v[k]);
        if k + 1 < v.len() {
            best = best.min(eval(v[k + 1]));
        }
        *o = best;
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest `site`.
pub fn squared_distance_transform(shape: &[usize], spacing: &[f64], sites: &[bool]) -> Vec<f64> {
    let mut d: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let st = strides(shape);
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for ax in 0..shape.len() {
        let len = shape[ax];
        let w = spacing[ax] * spacing[ax];
        let mut line = vec![0.0; len];
        let mut res = vec![0.0; len];
        for start in 0..d.len() {
            if (start / st[ax]) % len != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = d[start + i * st[ax]];
            }
            edt_line(&line, w, &mut res, &mut v, &mut z);
            for (i, r) in res.iter().enumerate() {
                d[start + i * st[ax]] = *r;
            }
        }
    }
    d
}

/// Pooled nearest-boundary distances in both directions.
pub fn surface_distances(pair: &BinaryRegionPair) -> Result<Vec<f64>> {
    let (a, b, _) = pair.counts();
    if a == 0 || b == 0 {
        return Err(Error::UndefinedMetric(format!(
            "surface distance needs two non-empty regions (|pred| = {a}, |gt| = {b})"
        )));
    }
    let ba = boundary(&pair.shape, &pair.pred);
    let bb = boundary(&pair.shape, &pair.gt);
    let da = squared_distance_transform(&pair.shape, &pair.spacing, &ba);
    let db = squared_distance_transform(&pair.shape, &pair.spacing, &bb);
    let mut out = Vec::new();
    out.extend(ba.iter().zip(&db).filter(|(&s, _)| s).map(|(_, d)| d.sqrt()));
    out.extend(bb.iter().zip(&da).filter(|(&s, _)| s).map(|(_, d)| d.sqrt()));
    Ok(out)
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order
/// statistics at rank `q/100 · (n − 1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

pub fn hd95(pair: &BinaryRegionPair) -> Result<f64> {
    Ok(percentile(&surface_distances(pair)?, 95.0))
}

pub fn asd(pair: &BinaryRegionPair) -> Result<f64> {
    let d = surface_distances(pair)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// All four metrics for one class of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl ClassScores {
    pub fn compute(pair: &BinaryRegionPair) -> Result<Self> {
        let distances = match surface_distances(pair) {
            Ok(d) => Some(d),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(ClassScores {
            dice: dice(pair),
            jaccard: jaccard(pair),
            hd95: distances.as_ref().map(|d| percentile(d, 95.0)),
            asd: distances.map(|d| d.iter().sum::<f64>() / d.len() as f64),
        })
    }
}

/// Scores for every foreground class `1..K` of one label map pair.
pub fn score_labels(
    spatial: &[usize],
    pred: &[u8],
    gt: &[u8],
    num_classes: usize,
) -> Result<Vec<ClassScores>> {
    (1..num_classes)
        .map(|c| ClassScores::compute(&BinaryRegionPair::from_labels(spatial, pred, gt, c as u8)?))
        .collect()
}

/// Mean of a metric over samples; distance means skip undefined entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Samples whose distances were undefined (an empty region).
    pub undefined_distances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_samples: usize,
    /// Keyed by foreground class index.
    pub per_class: BTreeMap<usize, MetricSummary>,
    /// Arithmetic mean over the per-class values.
    pub mean: MetricSummary,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    /// `samples[s][c - 1]` holds the scores of class `c` on sample `s`.
    pub fn aggregate(samples: &[Vec<ClassScores>]) -> Result<Self> {
        let classes = samples
            .first()
            .map(|s| s.len())
            .ok_or_else(|| Error::Validation("no samples to aggregate".into()))?;
        if samples.iter().any(|s| s.len() != classes) {
            return Err(Error::Validation("samples disagree on class count".into()));
        }
        let mut per_class = BTreeMap::new();
        for c in 0..classes {
            let col = || samples.iter().map(move |s| s[c]);
            per_class.insert(
                c + 1,
                MetricSummary {
                    dice: mean_of(col().map(|s| s.dice)).unwrap(),
                    jaccard: mean_of(col().map(|s| s.jaccard)).unwrap(),
                    hd95: mean_of(col().filter_map(|s| s.hd95)),
                    asd: mean_of(col().filter_map(|s| s.asd)),
                    undefined_distances: col().filter(|s| s.hd95.is_none()).count(),
                },
            );
        }
        let rows = || per_class.values();
        let mean = MetricSummary {
            dice: mean_of(rows().map(|m| m.dice)).unwrap_or(100.0),
            jaccard: mean_of(rows().map(|m| m.jaccard)).unwrap_or(100.0),
            hd95: mean_of(rows().filter_map(|m| m.hd95)),
            asd: mean_of(rows().filter_map(|m| m.asd)),
            undefined_distances: rows().map(|m| m.undefined_distances).sum(),
        };
        Ok(MetricReport {
            num_samples: samples.len(),
            per_class,
            mean,
        })
    }
}
