//! Teacher pretraining, the bidirectional copy-paste SSL loop, EMA teacher
//! updates, and inference.
//!
//! Every step draws its randomness from a generator keyed by
//! `(seed, phase, iteration)`, so a run resumed from a checkpoint replays the
//! same crops and masks as an uninterrupted one.

mod checkpoint;
mod config;
mod inference;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use inference::{argmax_labels, evaluate_params, predict_labels, predict_probabilities};

use crate::losses::{bcp_objective, supervised_objective, LossBreakdown};
use crate::metrics::MetricReport;
use crate::mixer::{generate_mask, mix_labels, mix_pair, Direction};
use crate::nn::{BnUpdate, ParamStore, Real, Role, Tape, Tensor};
use crate::tensorio::{random_crop, Dataset, Volume};
use crate::wavelet::{frequency_triple, FrequencyTriple};
use crate::xnetplus::{Branch, Branches, TripleBatch, XNetPlus};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Ssl,
}

impl Phase {
    fn stream(self) -> u64 {
        match self {
            Phase::Pretrain => 0x5052_4554,
            Phase::Ssl => 0x5353_4c00,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    /// 1-based index of the completed step.
    pub iteration: usize,
    pub lr: f64,
    /// Present in the SSL phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_lambda: Option<f64>,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: Phase,
    pub iteration: usize,
    pub report: MetricReport,
}

/// Receives progress from the training loops.
pub trait Observer {
    fn step(&mut self, _record: &StepRecord) {}
    fn eval(&mut self, _record: &MetricRecord) {}
}

impl Observer for () {}

/// Collects every step record; handy for tests and small runs.
impl Observer for Vec<StepRecord> {
    fn step(&mut self, record: &StepRecord) {
        self.push(record.clone());
    }
}

/// `θ_t ← λ θ_t + (1 − λ) θ_s` over every tensor, buffers included.
pub fn ema_update(teacher: &mut ParamStore<f32>, student: &ParamStore<f32>, lambda: f64) -> Result<()> {
    teacher.check_same_layout(student)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("EMA lambda must lie in [0, 1], got {lambda}")));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        if lambda == 0.0 {
            t.data.copy_from_slice(&s.data);
            continue;
        }
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = (lambda * *a as f64 + (1.0 - lambda) * b as f64) as f32;
        }
    }
    Ok(())
}

/// One SGD step with momentum and L2 weight decay:
/// `v ← μ v + (g + wd θ)`, `θ ← θ − lr v`.
pub fn sgd_step(
    params: &mut ParamStore<f32>,
    grads: &[Vec<f32>],
    velocity: &mut [Vec<f32>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.role != Role::Trainable {
            continue;
        }
        for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
            let step = momentum * *vi as f64 + gi as f64 + weight_decay * *w as f64;
            *vi = step as f32;
            *w = (*w as f64 - lr * step) as f32;
        }
    }
}

fn apply_bn_updates(params: &mut ParamStore<f32>, updates: &[BnUpdate<f32>], momentum: f64) {
    let blend = |dst: &mut [f32], src: &[f32]| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((1.0 - momentum) * *d as f64 + momentum * s as f64) as f32;
        }
    };
    for u in updates {
        blend(&mut params.get_mut(u.running_mean).data, &u.mean);
        blend(&mut params.get_mut(u.running_var).data, &u.var);
    }
}

fn step_rng(seed: u64, phase: Phase, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ phase.stream());
    rng.set_stream(iteration as u64);
    rng
}

fn resolve_patch(config: &TrainConfig, dataset: &Dataset, arch: &XNetPlus) -> Result<Vec<usize>> {
    let spatial = dataset
        .samples()
        .first()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?
        .image
        .spatial()
        .to_vec();
    let patch = if config.patch.is_empty() { spatial } else { config.patch.clone() };
    arch.check_input_shape(&patch)
        .map_err(|e| Error::Config(format!("training patch {patch:?}: {e}")))?;
    Ok(patch)
}

fn triples(images: &[Volume], config: &TrainConfig) -> Result<Vec<FrequencyTriple>> {
    images.iter().map(|v| frequency_triple(v, config.wavelet)).collect()
}

/// Forward a batch on the student, score each item with `objective`, average
/// over items, and backpropagate. Returns the averaged breakdown, parameter
/// gradients and batch-norm updates.
fn student_pass(
    arch: &XNetPlus,
    student: &ParamStore<f32>,
    inputs: &[FrequencyTriple],
    mut objective: impl FnMut(usize, &Branches<&[f32]>) -> Result<(LossBreakdown, Branches<Vec<f32>>)>,
) -> Result<(LossBreakdown, Vec<Vec<f32>>, Vec<BnUpdate<f32>>)> {
    let refs: Vec<&FrequencyTriple> = inputs.iter().collect();
    let batch = TripleBatch::<f32>::from_triples(&refs)?;
    let mut tape = Tape::new(student, true);
    let out = arch.forward(&mut tape, &batch)?;
    let n = inputs.len();
    let scale = 1.0 / n as f64;
    let mut seeds: Branches<Tensor<f32>> = out.map(|_, v| Tensor::zeros(tape.value(*v).shape));
    let mut total = LossBreakdown::default();
    for item in 0..n {
        let preds = out.map(|_, v| tape.value(*v).item(item));
        let (bd, grads) = objective(item, &preds)?;
        total.accumulate(&bd, scale);
        for branch in Branch::ALL {
            if let (Some(seed), Some(g)) = (seeds.get_mut(branch), grads.get(branch)) {
                for (s, &gi) in seed.item_mut(item).iter_mut().zip(g) {
                    *s += (gi.f64() * scale) as f32;
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: {}",
            serde_json::to_string(&total).unwrap_or_default()
        )));
    }
    let seed_list = Branch::ALL
        .into_iter()
        .filter_map(|b| Some((*out.get(b)?, seeds.get(b)?.clone())))
        .collect();
    let grads = tape.backward(seed_list);
    Ok((total, grads, tape.bn_updates().to_vec()))
}

fn labels_of(v: &Volume) -> Result<Vec<u8>> {
    v.labels()
}

/// Supervised teacher pretraining on the labeled part of `dataset`.
///
/// Continues from `checkpoint.iteration` when the checkpoint is already in
/// the pretraining phase. At the end the student is copied into the teacher.
pub fn pretrain(
    arch: &XNetPlus,
    checkpoint: &mut Checkpoint,
    dataset: &Dataset,
    observer: &mut dyn Observer,
) -> Result<()> {
    let config = checkpoint.train.clone();
    config.validate()?;
    if checkpoint.phase != Phase::Pretrain {
        return Err(Error::Config("checkpoint is past the pretraining phase".into()));
    }
    let labeled = dataset.labeled_indices().to_vec();
    if labeled.is_empty() {
        return Err(Error::Config("pretraining needs at least one labeled sample".into()));
    }
    let patch = resolve_patch(&config, dataset, arch)?;
    let batch = config.pretrain_batch_for(arch.config().spatial_rank);
    let total = config.pretrain_iterations;
    let k = dataset.num_classes();
    while checkpoint.iteration < total {
        let it = checkpoint.iteration;
        let mut rng = step_rng(config.seed, Phase::Pretrain, it);
        let mut images = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for _ in 0..batch {
            let s = dataset.sample(labeled[rng.gen_range(0..labeled.len())]);
            let (img, lab) = random_crop(&s.image, s.label.as_ref(), &patch, &mut rng)?;
            images.push(img);
            targets.push(labels_of(&lab.expect("labeled sample"))?);
        }
        let inputs = triples(&images, &config)?;
        let (loss, grads, bn) = student_pass(arch, &checkpoint.student, &inputs, |item, preds| {
            supervised_objective(preds, k, &targets[item], &config.loss)
        })?;
        let lr = config.lr_at(it, total);
        sgd_step(
            &mut checkpoint.student,
            &grads,
            &mut checkpoint.velocity,
            lr,
            config.momentum,
            config.weight_decay,
        );
        apply_bn_updates(&mut checkpoint.student, &bn, config.bn_momentum);
        checkpoint.iteration += 1;
        observer.step(&StepRecord {
            phase: Phase::Pretrain,
            iteration: checkpoint.iteration,
            lr,
            ema_lambda: None,
            loss,
        });
    }
    checkpoint.teacher = checkpoint.student.clone();
    Ok(())
}

/// Switches a pretrained checkpoint to the SSL phase with a fresh optimizer.
pub fn begin_ssl(checkpoint: &mut Checkpoint) {
    if checkpoint.phase == Phase::Pretrain {
        checkpoint.teacher = checkpoint.student.clone();
        checkpoint.velocity = checkpoint::zero_velocity(&checkpoint.student);
        checkpoint.phase = Phase::Ssl;
        checkpoint.iteration = 0;
    }
}

/// Samples of one SSL step: labeled `(i, j)` and unlabeled `(p, q)` indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quad {
    pub i: usize,
    pub j: usize,
    pub p: usize,
    pub q: usize,
}

fn distinct_pair<R: Rng>(pool: &[usize], rng: &mut R) -> (usize, usize) {
    let picked: Vec<usize> = pool.choose_multiple(rng, 2).copied().collect();
    (picked[0], picked[1])
}

/// Teacher pseudo-labels: argmax of the main-branch probabilities.
pub fn pseudo_labels(arch: &XNetPlus, teacher: &ParamStore<f32>, inputs: &[FrequencyTriple]) -> Result<Vec<Volume>> {
    let refs: Vec<&FrequencyTriple> = inputs.iter().collect();
    let batch = TripleBatch::<f32>::from_triples(&refs)?;
    let mut tape = Tape::new(teacher, false);
    let out = arch.forward(&mut tape, &batch)?;
    let probs = tape.value(out.main);
    let k = probs.channels();
    let v = probs.voxels();
    inputs
        .iter()
        .enumerate()
        .map(|(n, t)| {
            let item = probs.item(n);
            let labels: Vec<u8> = (0..v)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..k {
                        if item[c * v + i] > item[best * v + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            Volume::from_labels(t.raw.spatial(), &labels)
        })
        .collect()
}

/// One SSL update: pseudo-label, mix, student SGD step, teacher EMA.
pub fn ssl_step(
    arch: &XNetPlus,
    checkpoint: &mut Checkpoint,
    dataset: &Dataset,
    observer: &mut dyn Observer,
) -> Result<StepRecord> {
    checkpoint.student.check_same_layout(&checkpoint.teacher)?;
    let config = checkpoint.train.clone();
    let labeled = dataset.labeled_indices();
    let unlabeled = dataset.unlabeled_indices();
    if labeled.len() < 2 || unlabeled.len() < 2 {
        return Err(Error::Config(format!(
            "SSL needs at least two labeled and two unlabeled samples, got {} and {}",
            labeled.len(),
            unlabeled.len()
        )));
    }
    let patch = resolve_patch(&config, dataset, arch)?;
    let pairs = config.pairs_for(arch.config().spatial_rank);
    let k = dataset.num_classes();
    let it = checkpoint.iteration;
    let mut rng = step_rng(config.seed, Phase::Ssl, it);

    let mut quads = Vec::with_capacity(pairs);
    let mut lab_crops = Vec::with_capacity(pairs);
    let mut unl_crops = Vec::with_capacity(2 * pairs);
    let mut masks = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let (i, j) = distinct_pair(labeled, &mut rng);
        let (p, q) = distinct_pair(unlabeled, &mut rng);
        let mut take = |idx: usize| -> Result<(Volume, Option<Volume>)> {
            let s = dataset.sample(idx);
            random_crop(&s.image, s.label.as_ref(), &patch, &mut rng)
        };
        let ci = take(i)?;
        let cj = take(j)?;
        let cp = take(p)?.0;
        let cq = take(q)?.0;
        quads.push(Quad { i, j, p, q });
        lab_crops.push((ci, cj));
        unl_crops.push(cp);
        unl_crops.push(cq);
        // One mask per pair, shared by its inward and outward mixtures.
        masks.push(generate_mask(&patch, config.mask_ratio, &mut rng)?);
    }

    let pseudo = pseudo_labels(arch, &checkpoint.teacher, &triples(&unl_crops, &config)?)?;
    let mut mixed = Vec::with_capacity(2 * pairs);
    let mut targets = Vec::with_capacity(2 * pairs);
    let mut outward = Vec::with_capacity(pairs);
    let mut outward_targets = Vec::with_capacity(pairs);
    for (n, quad) in quads.iter().enumerate() {
        let ((xi, yi), (xj, yj)) = &lab_crops[n];
        let (yi, yj) = (yi.as_ref().expect("labeled"), yj.as_ref().expect("labeled"));
        let (xp, xq) = (&unl_crops[2 * n], &unl_crops[2 * n + 1]);
        let (pp, pq) = (&pseudo[2 * n], &pseudo[2 * n + 1]);
        let mask = &masks[n];
        let (x_in, x_out) = mix_pair(((quad.i, xi), (quad.j, xj)), ((quad.p, xp), (quad.q, xq)), mask)?;
        mixed.push(x_in);
        targets.push(labels_of(&mix_labels(yj, pp, mask, Direction::Inward)?)?);
        outward.push(x_out);
        outward_targets.push(labels_of(&mix_labels(yi, pq, mask, Direction::Outward)?)?);
    }
    // Batch layout: all inward images, then all outward images.
    mixed.extend(outward);
    targets.extend(outward_targets);
    let inputs = triples(&mixed, &config)?;

    // Pair item n (inward) with item n + pairs (outward) in one objective.
    let refs: Vec<&FrequencyTriple> = inputs.iter().collect();
    let batch = TripleBatch::<f32>::from_triples(&refs)?;
    let mut tape = Tape::new(&checkpoint.student, true);
    let out = arch.forward(&mut tape, &batch)?;
    let mut seeds: Branches<Tensor<f32>> = out.map(|_, v| Tensor::zeros(tape.value(*v).shape));
    let mut loss = LossBreakdown::default();
    let scale = 1.0 / pairs as f64;
    for n in 0..pairs {
        let p_in = out.map(|_, v| tape.value(*v).item(n));
        let p_out = out.map(|_, v| tape.value(*v).item(n + pairs));
        let (bd, g_in, g_out) = bcp_objective(&p_in, &targets[n], &p_out, &targets[n + pairs], &masks[n], k, &config.loss)?;
        loss.accumulate(&bd, scale);
        for branch in Branch::ALL {
            let Some(seed) = seeds.get_mut(branch) else { continue };
            for (item, g) in [(n, g_in.get(branch)), (n + pairs, g_out.get(branch))] {
                if let Some(g) = g {
                    for (s, &gi) in seed.item_mut(item).iter_mut().zip(g) {
                        *s += (gi as f64 * scale) as f32;
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at SSL iteration {}: {}",
            it + 1,
            serde_json::to_string(&loss).unwrap_or_default()
        )));
    }
    let seed_list = Branch::ALL
        .into_iter()
        .filter_map(|b| Some((*out.get(b)?, seeds.get(b)?.clone())))
        .collect();
    let grads = tape.backward(seed_list);
    let bn = tape.bn_updates().to_vec();
    drop(tape);

    let lr = config.lr_at(it, config.ssl_iterations);
    sgd_step(
        &mut checkpoint.student,
        &grads,
        &mut checkpoint.velocity,
        lr,
        config.momentum,
        config.weight_decay,
    );
    apply_bn_updates(&mut checkpoint.student, &bn, config.bn_momentum);
    ema_update(&mut checkpoint.teacher, &checkpoint.student, config.ema_lambda)?;
    checkpoint.iteration += 1;
    let record = StepRecord {
        phase: Phase::Ssl,
        iteration: checkpoint.iteration,
        lr,
        ema_lambda: Some(config.ema_lambda),
        loss,
    };
    observer.step(&record);
    Ok(record)
}

/// Runs SSL steps up to `train.ssl_iterations`, evaluating the student on
/// `validation` every `eval_interval` steps and after the last one.
pub fn train_ssl(
    arch: &XNetPlus,
    checkpoint: &mut Checkpoint,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    observer: &mut dyn Observer,
) -> Result<()> {
    checkpoint.train.validate()?;
    begin_ssl(checkpoint);
    let total = checkpoint.train.ssl_iterations;
    let interval = checkpoint.train.eval_interval;
    while checkpoint.iteration < total {
        ssl_step(arch, checkpoint, dataset, observer)?;
        let it = checkpoint.iteration;
        let due = (interval > 0 && it % interval == 0) || it == total;
        if let (true, Some(val)) = (due, validation) {
            let report = evaluate(arch, checkpoint, val)?;
            let record = MetricRecord {
                phase: Phase::Ssl,
                iteration: it,
                report,
            };
            observer.eval(&record);
            checkpoint.history.push(record);
        }
    }
    Ok(())
}

/// Student metrics on every labeled sample of `dataset`.
pub fn evaluate(arch: &XNetPlus, checkpoint: &Checkpoint, dataset: &Dataset) -> Result<MetricReport> {
    evaluate_params(arch, &checkpoint.student, dataset, &checkpoint.train.patch, checkpoint.train.wavelet)
}

/// Student label map for a whole image.
pub fn predict(arch: &XNetPlus, checkpoint: &Checkpoint, image: &Volume) -> Result<Volume> {
    predict_labels(arch, &checkpoint.student, image, &checkpoint.train.patch, checkpoint.train.wavelet)
}
