//! Segmentation losses with analytic gradients with respect to the predicted
//! class probabilities.
//!
//! Predictions are per-sample slices laid out `[K, V]` (class-major), targets
//! are integer class maps of length `V`. Every function returns the loss value
//! together with `∂loss/∂pred` in the same layout, which the trainer
//! back-propagates through the network's softmax.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::mixer::{Direction, MixMask};
use crate::nn::Real;
use crate::xnetplus::{Branch, Branches};
use crate::{Error, Result};

/// Smoothing term in Dice numerators and denominators.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clamped from below before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-10;
/// Default weight of unlabeled-origin voxels in the mixed losses.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Default weight of the consistency term.
pub const DEFAULT_BETA_CON: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: DEFAULT_ALPHA,
            beta_con: DEFAULT_BETA_CON,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta_con >= 0.0 && self.beta_con.is_finite()) {
            return Err(Error::Config(format!(
                "beta_con must be >= 0, got {}",
                self.beta_con
            )));
        }
        Ok(())
    }
}

fn check_layout<T>(pred: &[T], num_classes: usize, voxels: usize) -> Result<()> {
    if num_classes < 2 || pred.len() != num_classes * voxels {
        return Err(Error::Shape(format!(
            "prediction of length {} does not hold {num_classes} classes over {voxels} voxels",
            pred.len()
        )));
    }
    Ok(())
}

/// Weighted soft Dice loss, class-averaged:
/// `1 - (2 Σ w p y + ε) / (Σ w p² + Σ w y² + ε)` per class.
fn weighted_dice<T: Real>(pred: &[T], target: &[u8], w: &[f64], k: usize) -> (f64, Vec<T>) {
    let v = target.len();
    let mut grad = vec![T::zero(); pred.len()];
    let mut total = 0.0;
    for c in 0..k {
        let p = &pred[c * v..(c + 1) * v];
        let (mut inter, mut zsum, mut ysum) = (0.0, 0.0, 0.0);
        for i in 0..v {
            let pi = p[i].f64();
            let yi = if target[i] as usize == c { 1.0 } else { 0.0 };
            inter += w[i] * pi * yi;
            zsum += w[i] * pi * pi;
            ysum += w[i] * yi;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = zsum + ysum + DICE_EPS;
        total += 1.0 - num / den;
        for i in 0..v {
            let yi = if target[i] as usize == c { 1.0 } else { 0.0 };
            let d = -2.0 * w[i] * yi / den + num * 2.0 * w[i] * p[i].f64() / (den * den);
            grad[c * v + i] = T::of(d / k as f64);
        }
    }
    (total / k as f64, grad)
}

/// `0.5 · Dice + 0.5 · CE`, both reduced with the voxel weights.
///
/// Weights are rescaled to mean one before use, so multiplying every weight by
/// the same factor leaves the loss unchanged. Cross-entropy is
/// `Σ w · (-ln p_target) / Σ w`.
pub fn seg_loss<T: Real>(
    pred: &[T],
    num_classes: usize,
    target: &[u8],
    voxel_weights: &[f64],
) -> Result<(f64, Vec<T>)> {
    let v = target.len();
    check_layout(pred, num_classes, v)?;
    if voxel_weights.len() != v {
        return Err(Error::Shape(format!(
            "{} voxel weights for {v} voxels",
            voxel_weights.len()
        )));
    }
    if voxel_weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::Validation("voxel weights must be finite and non-negative".into()));
    }
    let wsum: f64 = voxel_weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Degenerate("all voxel weights are zero".into()));
    }
    if let Some(&t) = target.iter().find(|&&t| t as usize >= num_classes) {
        return Err(Error::Validation(format!(
            "target class {t} outside {num_classes} classes"
        )));
    }
    let scale = v as f64 / wsum;
    let w: Vec<f64> = voxel_weights.iter().map(|x| x * scale).collect();
    let norm = v as f64;

    let (dice, mut grad) = weighted_dice(pred, target, &w, num_classes);
    let mut ce = 0.0;
    for i in 0..v {
        let c = target[i] as usize;
        let p = pred[c * v + i].f64().max(PROB_FLOOR);
        ce += w[i] * -p.ln();
    }
    ce /= norm;
    for g in grad.iter_mut() {
        *g = *g * T::of(0.5);
    }
    for i in 0..v {
        let c = target[i] as usize;
        let p = pred[c * v + i].f64().max(PROB_FLOOR);
        grad[c * v + i] += T::of(-0.5 * w[i] / (norm * p));
    }
    Ok((0.5 * dice + 0.5 * ce, grad))
}

/// Voxel weights of the direction-masked losses:
/// inward `M + α(1 − M)`, outward `(1 − M) + αM`.
pub fn direction_weights(mask: &MixMask, alpha: f64, direction: Direction) -> Vec<f64> {
    mask.values()
        .iter()
        .map(|&m| {
            let m = m as f64;
            match direction {
                Direction::Inward => m + alpha * (1.0 - m),
                Direction::Outward => (1.0 - m) + alpha * m,
            }
        })
        .collect()
}

/// Mixed-sample loss: [`seg_loss`] with [`direction_weights`].
pub fn bcp_loss<T: Real>(
    pred: &[T],
    num_classes: usize,
    mixed_label: &[u8],
    mask: &MixMask,
    alpha: f64,
    direction: Direction,
) -> Result<(f64, Vec<T>)> {
    if mask.values().len() != mixed_label.len() {
        return Err(Error::Shape(format!(
            "mask has {} voxels, label has {}",
            mask.values().len(),
            mixed_label.len()
        )));
    }
    seg_loss(
        pred,
        num_classes,
        mixed_label,
        &direction_weights(mask, alpha, direction),
    )
}

/// Soft Dice loss between two probability maps, class-averaged:
/// `1 - (2 Σ p q + ε) / (Σ p² + Σ q² + ε)`. Returns gradients for both.
pub fn soft_dice<T: Real>(p: &[T], q: &[T], num_classes: usize) -> Result<(f64, Vec<T>, Vec<T>)> {
    if p.len() != q.len() || num_classes == 0 || p.len() % num_classes != 0 {
        return Err(Error::Shape(format!(
            "soft Dice inputs of lengths {} and {} over {num_classes} classes",
            p.len(),
            q.len()
        )));
    }
    let v = p.len() / num_classes;
    let k = num_classes as f64;
    let mut gp = vec![T::zero(); p.len()];
    let mut gq = vec![T::zero(); q.len()];
    let mut total = 0.0;
    for c in 0..num_classes {
        let r = c * v..(c + 1) * v;
        let (mut inter, mut pp, mut qq) = (0.0, 0.0, 0.0);
        for i in r.clone() {
            let (a, b) = (p[i].f64(), q[i].f64());
            inter += a * b;
            pp += a * a;
            qq += b * b;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = pp + qq + DICE_EPS;
        total += 1.0 - num / den;
        for i in r {
            let (a, b) = (p[i].f64(), q[i].f64());
            gp[i] = T::of((-2.0 * b / den + num * 2.0 * a / (den * den)) / k);
            gq[i] = T::of((-2.0 * a / den + num * 2.0 * b / (den * den)) / k);
        }
    }
    Ok((total / k, gp, gq))
}

/// Consistency between the main branch and each present frequency branch:
/// `Dice(P_M, P_L) + Dice(P_M, P_H)`. Absent branches contribute nothing.
///
/// Returns the per-pair values (`low` is `Dice(P_M, P_L)`) and gradients for
/// every present branch.
pub fn consistency_loss<T: Real>(
    preds: &Branches<&[T]>,
    num_classes: usize,
) -> Result<(Branches<Option<f64>>, Branches<Vec<T>>)> {
    let mut grads = Branches {
        main: vec![T::zero(); preds.main.len()],
        low: None,
        high: None,
    };
    let mut values = Branches {
        main: None,
        low: None,
        high: None,
    };
    for branch in [Branch::Low, Branch::High] {
        if let Some(aux) = preds.get(branch) {
            let (value, gm, ga) = soft_dice(preds.main, aux, num_classes)?;
            for (g, d) in grads.main.iter_mut().zip(gm) {
                *g += d;
            }
            grads.set(branch, ga);
            values.set(branch, Some(value));
        }
    }
    Ok((values, grads))
}

/// Loss values of one group of branch predictions against one label map.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupTerms {
    /// Supervised term per enabled branch, keyed `"M"`, `"L"`, `"H"`.
    pub seg: BTreeMap<String, f64>,
    /// Consistency pairs keyed `"ML"`, `"MH"`.
    pub con: BTreeMap<String, f64>,
}

impl GroupTerms {
    pub fn seg_sum(&self) -> f64 {
        self.seg.values().sum()
    }

    pub fn con_sum(&self) -> f64 {
        self.con.values().sum()
    }

    fn accumulate(&mut self, other: &GroupTerms, scale: f64) {
        for (k, v) in &other.seg {
            *self.seg.entry(k.clone()).or_default() += v * scale;
        }
        for (k, v) in &other.con {
            *self.con.entry(k.clone()).or_default() += v * scale;
        }
    }
}

/// Per-term loss record written to the training log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    #[serde(rename = "in")]
    pub inward: GroupTerms,
    #[serde(rename = "out", default, skip_serializing_if = "Option::is_none")]
    pub outward: Option<GroupTerms>,
}

impl LossBreakdown {
    /// Adds `other * scale` term by term, for batch averaging.
    pub fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.total += other.total * scale;
        self.inward.accumulate(&other.inward, scale);
        if let Some(o) = &other.outward {
            self.outward
                .get_or_insert_with(GroupTerms::default)
                .accumulate(o, scale);
        }
    }

    pub fn is_finite(&self) -> bool {
        let group_ok = |g: &GroupTerms| g.seg.values().chain(g.con.values()).all(|x| x.is_finite());
        self.total.is_finite()
            && group_ok(&self.inward)
            && self.outward.as_ref().map_or(true, group_ok)
    }
}

/// `L_all = Σ_k L_in_k + Σ_k L_out_k + β_con · (L_con(in) + L_con(out))`.
pub fn total_loss(
    inward: &GroupTerms,
    outward: Option<&GroupTerms>,
    weights: &LossWeights,
) -> Result<f64> {
    let groups = std::iter::once(inward).chain(outward);
    let mut total = 0.0;
    for g in groups {
        for (name, v) in g.seg.iter().chain(&g.con) {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss term `{name}` is {v}")));
            }
        }
        total += g.seg_sum() + weights.beta_con * g.con_sum();
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("total loss is {total}")));
    }
    Ok(total)
}

/// Supervised terms of every branch against one label plus the weighted
/// consistency term; gradients include the `β_con` factor.
pub fn group_objective<T: Real>(
    preds: &Branches<&[T]>,
    num_classes: usize,
    target: &[u8],
    voxel_weights: &[f64],
    weights: &LossWeights,
) -> Result<(GroupTerms, Branches<Vec<T>>)> {
    let mut terms = GroupTerms::default();
    let mut grads: Branches<Vec<T>> = Branches {
        main: Vec::new(),
        low: None,
        high: None,
    };
    for (branch, pred) in preds.iter() {
        let (value, g) = seg_loss(pred, num_classes, target, voxel_weights)?;
        terms.seg.insert(branch.tag().to_string(), value);
        grads.set(branch, g);
    }
    if preds.low.is_some() || preds.high.is_some() {
        let (values, con_grads) = consistency_loss(preds, num_classes)?;
        for branch in [Branch::Low, Branch::High] {
            if let Some(Some(v)) = values.get(branch) {
                terms.con.insert(format!("M{}", branch.tag()), *v);
            }
        }
        let beta = T::of(weights.beta_con);
        for (branch, g) in con_grads.iter() {
            let target = grads.get_mut(branch).expect("branch has a seg gradient");
            for (t, &d) in target.iter_mut().zip(g) {
                *t += beta * d;
            }
        }
    } else if weights.beta_con > 0.0 {
        log::warn!("consistency weight is set but only the main branch is enabled");
    }
    Ok((terms, grads))
}

/// Labeled-only objective: every branch against the ground truth with
/// uniform weights plus consistency.
pub fn supervised_objective<T: Real>(
    preds: &Branches<&[T]>,
    num_classes: usize,
    target: &[u8],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Branches<Vec<T>>)> {
    let uniform = vec![1.0; target.len()];
    let (terms, grads) = group_objective(preds, num_classes, target, &uniform, weights)?;
    let total = total_loss(&terms, None, weights)?;
    Ok((
        LossBreakdown {
            total,
            inward: terms,
            outward: None,
        },
        grads,
    ))
}

/// Full mixed objective over the inward and outward groups sharing `mask`.
#[allow(clippy::too_many_arguments)]
pub fn bcp_objective<T: Real>(
    inward: &Branches<&[T]>,
    label_in: &[u8],
    outward: &Branches<&[T]>,
    label_out: &[u8],
    mask: &MixMask,
    num_classes: usize,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Branches<Vec<T>>, Branches<Vec<T>>)> {
    let w_in = direction_weights(mask, weights.alpha, Direction::Inward);
    let w_out = direction_weights(mask, weights.alpha, Direction::Outward);
    let (t_in, g_in) = group_objective(inward, num_classes, label_in, &w_in, weights)?;
    let (t_out, g_out) = group_objective(outward, num_classes, label_out, &w_out, weights)?;
    let total = total_loss(&t_in, Some(&t_out), weights)?;
    Ok((
        LossBreakdown {
            total,
            inward: t_in,
            outward: Some(t_out),
        },
        g_in,
        g_out,
    ))
}
