//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=1,3` runs a subset.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavecp::losses::{bcp_loss, bcp_objective, consistency_loss, seg_loss, LossWeights};
use wavecp::metrics::{asd, dice, hd95, jaccard, BinaryRegionPair};
use wavecp::mixer::{generate_mask, mix, Direction, MixMask};
use wavecp::nn::ParamStore;
use wavecp::tensorio::{generate_synthetic, split_labeled, SynthConfig};
use wavecp::trainer::{self, ema_update, Checkpoint, StepRecord, TrainConfig};
use wavecp::wavelet::{dwt, frequency_triple, idwt, Family};
use wavecp::xnetplus::{Branch, Branches, ModelConfig, XNetPlus};
use wavecp::{Dataset, Volume, VolumeKind};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

fn random_image(shape: &[usize], rng: &mut ChaCha8Rng) -> Volume {
    let n = shape.iter().product();
    Volume::new(shape.to_vec(), VolumeKind::Image, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1 wavelet

fn criterion_wavelet() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shapes: [&[usize]; 6] = [&[1, 8, 8], &[1, 7, 10], &[2, 16, 5], &[1, 4, 6, 8], &[1, 5, 3, 7], &[3, 32, 32]];
    let (mut pr, mut comp, mut energy) = (0.0f64, 0.0f64, 0.0f64);
    for family in [Family::Haar, Family::Db2] {
        for shape in shapes {
            let x = random_image(shape, &mut rng);
            let bands = dwt(&x, family).map_err(|e| e.to_string())?;
            let back = idwt(&bands).map_err(|e| e.to_string())?;
            pr = pr.max(max_abs_diff(back.data(), x.data()));
            let t = frequency_triple(&x, family).map_err(|e| e.to_string())?;
            let sum: Vec<f32> = t.low.data().iter().zip(t.high.data()).map(|(a, b)| a + b).collect();
            comp = comp.max(max_abs_diff(&sum, t.raw.data()));
            if shape[1..].iter().all(|d| d % 2 == 0) {
                let e_img: f64 = x.data().iter().map(|v| (*v as f64).powi(2)).sum();
                energy = energy.max((bands.energy() - e_img).abs() / e_img);
            }
        }
        let c = Volume::new(vec![1, 9, 12], VolumeKind::Image, vec![0.625; 108]).unwrap();
        let t = frequency_triple(&c, family).map_err(|e| e.to_string())?;
        let hf = t.high.data().iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        ensure(hf <= 1e-6, || format!("{family:?} constant image has high-frequency magnitude {hf}"))?;
    }
    ensure(pr <= 1e-5, || format!("reconstruction error {pr:e}"))?;
    ensure(comp <= 1e-5, || format!("X_L + X_H deviates from X_M by {comp:e}"))?;
    ensure(energy <= 1e-4, || format!("relative energy error {energy:e}"))?;

    // Haar on [[a, b], [c, d]]: LL = (a+b+c+d)/2, LH = (a-b+c-d)/2,
    // HL = (a+b-c-d)/2, HH = (a-b-c+d)/2 (first letter: rows).
    let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
    let x = Volume::new(vec![1, 2, 2], VolumeKind::Image, vec![a, b, c, d]).unwrap();
    let bands = dwt(&x, Family::Haar).map_err(|e| e.to_string())?;
    let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
    let expect = [(a + b + c + d) / 2.0, (a - b + c - d) / 2.0, (a + b - c - d) / 2.0, (a - b - c + d) / 2.0];
    for (i, e) in expect.iter().enumerate() {
        let got = bands.bands[i][0];
        ensure((got - e).abs() <= 1e-12, || format!("Haar band {} = {got}, expected {e}", bands.band_name(i)))?;
    }
    within_time(start, Duration::from_secs(10))?;
    Ok(format!("PR {pr:.1e}, X_L+X_H {comp:.1e}, energy {energy:.1e}, Haar 2x2 exact"))
}

// ------------------------------------------------------------------ 2 mixer

fn criterion_mixer() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..20 {
        let rank = if case % 2 == 0 { 2 } else { 3 };
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(2..=24)).collect();
        let den = rng.gen_range(2u64..=9);
        let num = rng.gen_range(1..=den);
        let ratio = num as f64 / den as f64;
        let expected: usize = shape.iter().map(|&d| (num as usize * d) / den as usize).product();
        match generate_mask(&shape, ratio, &mut rng) {
            Ok(mask) => {
                let zeros = mask.values().iter().filter(|&&m| m == 0.0).count();
                let ones = mask.values().iter().filter(|&&m| m == 1.0).count();
                ensure(zeros == expected && zeros + ones == mask.values().len(), || {
                    format!("shape {shape:?} ratio {num}/{den}: {zeros} zeros, expected {expected}")
                })?;
            }
            Err(_) => ensure(expected == 0, || format!("shape {shape:?} ratio {num}/{den} rejected"))?,
        }
    }
    let shape = [6usize, 7];
    let a = random_image(&[2, 6, 7], &mut rng);
    let b = random_image(&[2, 6, 7], &mut rng);
    let err = |e: wavecp::Error| e.to_string();
    ensure(mix(&a, &b, &MixMask::ones(&shape)).map_err(err)? == a, || "M = 1 does not return the foreground".into())?;
    ensure(mix(&a, &b, &MixMask::zeros(&shape)).map_err(err)? == b, || "M = 0 does not return the background".into())?;
    for _ in 0..10 {
        let m = generate_mask(&shape, 2.0 / 3.0, &mut rng).map_err(err)?;
        let ab = mix(&a, &b, &m).map_err(err)?;
        let ba = mix(&b, &a, &m).map_err(err)?;
        for i in 0..a.data().len() {
            ensure(ab.data()[i] + ba.data()[i] == a.data()[i] + b.data()[i], || format!("swap identity fails at {i}"))?;
        }
    }
    within_time(start, Duration::from_secs(10))?;
    Ok("20 random floor counts, M=1/M=0 boundaries, swap identity exact".into())
}

// ----------------------------------------------------------------- 3 losses

fn random_probs(k: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = vec![0.0; k * v];
    for i in 0..v {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for c in 0..k {
            p[c * v + i] = raw[c] / s;
        }
    }
    p
}

fn criterion_losses() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, shape) = (3usize, [8usize, 8]);
    let v = 64;
    let err = |e: wavecp::Error| e.to_string();
    let mut worst_alpha1 = 0.0f64;
    for _ in 0..10 {
        let pred = random_probs(k, v, &mut rng);
        let y: Vec<u8> = (0..v).map(|_| rng.gen_range(0..k as u8)).collect();
        let mask = generate_mask(&shape, 2.0 / 3.0, &mut rng).map_err(err)?;
        let (plain, _) = seg_loss(&pred, k, &y, &[1.0; 64]).map_err(err)?;
        for dir in [Direction::Inward, Direction::Outward] {
            let (w1, _) = bcp_loss(&pred, k, &y, &mask, 1.0, dir).map_err(err)?;
            worst_alpha1 = worst_alpha1.max((w1 - plain).abs());

            // alpha = 0: voxels with zero weight cannot matter.
            let (l0, _) = bcp_loss(&pred, k, &y, &mask, 0.0, dir).map_err(err)?;
            let mut perturbed = pred.clone();
            for i in 0..v {
                let m = mask.values()[i];
                let zero_weight = match dir {
                    Direction::Inward => m == 0.0,
                    Direction::Outward => m == 1.0,
                };
                if zero_weight {
                    for c in 0..k {
                        perturbed[c * v + i] = rng.gen_range(0.0..1.0);
                    }
                }
            }
            let (l0p, _) = bcp_loss(&perturbed, k, &y, &mask, 0.0, dir).map_err(err)?;
            ensure(l0 == l0p, || format!("alpha = 0 loss moved from {l0} to {l0p} ({dir:?})"))?;
        }
        // Inward with M equals outward with 1 - M.
        let alpha = rng.gen_range(0.0..1.0);
        let (li, gi) = bcp_loss(&pred, k, &y, &mask, alpha, Direction::Inward).map_err(err)?;
        let (lo, go) = bcp_loss(&pred, k, &y, &mask.complement(), alpha, Direction::Outward).map_err(err)?;
        ensure(li == lo && gi == go, || format!("directional symmetry broken: {li} vs {lo}"))?;

        let same = Branches { main: pred.as_slice(), low: Some(pred.as_slice()), high: Some(pred.as_slice()) };
        let (con, _) = consistency_loss(&same, k).map_err(err)?;
        let c = con.low.flatten().unwrap_or(f64::NAN) + con.high.flatten().unwrap_or(f64::NAN);
        ensure(c.abs() <= 1e-12, || format!("consistency on identical triple = {c}"))?;
    }
    ensure(worst_alpha1 <= 1e-6, || format!("alpha = 1 differs from unweighted loss by {worst_alpha1:e}"))?;

    // Full mixed objective against central differences.
    let weights = LossWeights { alpha: 0.5, beta_con: 1.0 };
    let mask = generate_mask(&shape, 2.0 / 3.0, &mut rng).map_err(err)?;
    let preds: Vec<Vec<f64>> = (0..6).map(|_| random_probs(k, v, &mut rng)).collect();
    let y_in: Vec<u8> = (0..v).map(|_| rng.gen_range(0..k as u8)).collect();
    let y_out: Vec<u8> = (0..v).map(|_| rng.gen_range(0..k as u8)).collect();
    let objective = |p: &[Vec<f64>]| {
        let bi = Branches { main: p[0].as_slice(), low: Some(p[1].as_slice()), high: Some(p[2].as_slice()) };
        let bo = Branches { main: p[3].as_slice(), low: Some(p[4].as_slice()), high: Some(p[5].as_slice()) };
        bcp_objective(&bi, &y_in, &bo, &y_out, &mask, k, &weights).unwrap()
    };
    let (_, g_in, g_out) = objective(&preds);
    let analytic = [&g_in.main, g_in.low.as_ref().unwrap(), g_in.high.as_ref().unwrap(), &g_out.main, g_out.low.as_ref().unwrap(), g_out.high.as_ref().unwrap()];
    let h = 1e-6;
    let mut worst = 0.0f64;
    for t in 0..6 {
        for e in 0..k * v {
            let mut p = preds.clone();
            p[t][e] += h;
            let fp = objective(&p).0.total;
            p[t][e] -= 2.0 * h;
            let fm = objective(&p).0.total;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[t][e];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-3, || format!("gradient relative error {worst:e}"))?;
    within_time(start, Duration::from_secs(60))?;
    Ok(format!("alpha=1 {worst_alpha1:.1e}, alpha=0 exact, symmetry exact, consistency 0, grad rel err {worst:.1e}"))
}

// -------------------------------------------------------------------- 4 EMA

fn criterion_ema() -> Outcome {
    let cfg = ModelConfig { base_width: 4, depth: 2, ..ModelConfig::new(2, 1, 3) };
    let (_, template) = XNetPlus::build(&cfg, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let randomize = |p: &mut ParamStore<f32>, rng: &mut ChaCha8Rng| {
        for t in p.iter_mut() {
            t.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
    };
    let mut student = template.clone();
    let mut teacher = template;
    randomize(&mut student, &mut rng);
    randomize(&mut teacher, &mut rng);

    let mut t0 = teacher.clone();
    ema_update(&mut t0, &student, 0.0).map_err(|e| e.to_string())?;
    ensure(t0 == student, || "lambda = 0 does not copy the student".into())?;
    let mut t1 = teacher.clone();
    ema_update(&mut t1, &student, 1.0).map_err(|e| e.to_string())?;
    ensure(t1 == teacher, || "lambda = 1 changed the teacher".into())?;

    let lambda = 0.99;
    let mut worst = 0.0f64;
    let mut t = teacher.clone();
    for _ in 0..100 {
        let before: Vec<f64> = gaps(&t, &student);
        ema_update(&mut t, &student, lambda).map_err(|e| e.to_string())?;
        let after = gaps(&t, &student);
        for (b, a) in before.iter().zip(&after) {
            worst = worst.max((a - lambda * b).abs());
        }
    }
    ensure(worst <= 1e-7, || format!("contraction deviates by {worst:e}"))?;
    Ok(format!("lambda 0/1 exact, per-step contraction within {worst:.1e} over 100 steps"))
}

fn gaps(t: &ParamStore<f32>, s: &ParamStore<f32>) -> Vec<f64> {
    t.iter()
        .zip(s.iter())
        .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).abs()).collect::<Vec<_>>())
        .collect()
}

// ------------------------------------------------------------------ 5 model

fn reference_unet_params(rank: usize, cin: usize, k: usize, width: usize, depth: usize) -> usize {
    let taps = if rank == 3 { 27 } else { 9 };
    let conv = |i: usize, o: usize, t: usize| o * i * t + o;
    let block = |i: usize, o: usize| conv(i, o, taps) + 2 * o;
    let w = |s: usize| width << s;
    let enc: usize = (0..depth).map(|s| block(if s == 0 { cin } else { w(s - 1) }, w(s)) + block(w(s), w(s))).sum();
    let dec: usize = (0..depth - 1).map(|s| block(w(s + 1), w(s)) + block(2 * w(s), w(s)) + block(w(s), w(s))).sum();
    enc + dec + conv(w(0), k, 1)
}

fn criterion_model() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sum = 0.0f64;
    for (rank, spatial) in [(2usize, vec![16usize, 24]), (3, vec![8, 8, 16])] {
        let cfg = ModelConfig { base_width: 4, depth: 3, ..ModelConfig::new(rank, 1, 4) };
        let (model, params) = XNetPlus::build(&cfg, 9).map_err(|e| e.to_string())?;
        let mut shape = vec![1];
        shape.extend(&spatial);
        let x = random_image(&shape, &mut rng);
        let triple = frequency_triple(&x, Family::Haar).map_err(|e| e.to_string())?;
        let out = model.predict_triple(&params, &triple).map_err(|e| e.to_string())?;
        ensure(out.iter().count() == 3, || "missing branch output".into())?;
        for (branch, p) in out.iter() {
            ensure(p.shape()[0] == 4 && p.spatial() == spatial.as_slice(), || {
                format!("{} output shape {:?} for input {spatial:?}", branch.tag(), p.shape())
            })?;
            let v = p.voxels();
            for i in 0..v {
                let s: f64 = (0..4).map(|c| p.data()[c * v + i] as f64).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }
        for width in [4, 8, 16] {
            for depth in [2, 3, 4] {
                let cfg = ModelConfig { base_width: width, depth, ..ModelConfig::new(rank, 2, 5) }.with_branches(&[Branch::Main]);
                let (_, p) = XNetPlus::build(&cfg, 0).map_err(|e| e.to_string())?;
                let expect = reference_unet_params(rank, 2, 5, width, depth);
                ensure(p.trainable_count() == expect, || {
                    format!("rank {rank} width {width} depth {depth}: {} params, UNet has {expect}", p.trainable_count())
                })?;
            }
        }
    }
    ensure(worst_sum <= 1e-5, || format!("softmax sums deviate by {worst_sum:e}"))?;
    let cfg = ModelConfig::new(2, 1, 4);
    let a = XNetPlus::build(&cfg, 17).map_err(|e| e.to_string())?.1;
    let b = XNetPlus::build(&cfg, 17).map_err(|e| e.to_string())?.1;
    ensure(a == b, || "two builds with one seed differ".into())?;
    Ok(format!("shapes kept in 2D/3D, softmax within {worst_sum:.1e}, UNet counts equal, builds identical"))
}

// ---------------------------------------------------------------- 6 metrics

fn brute_force(shape: [usize; 2], a: &[bool], b: &[bool]) -> (f64, f64, Option<(f64, f64)>) {
    let (h, w) = (shape[0], shape[1]);
    let at = |r: &[bool], y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && r[y as usize * w + x as usize];
    let edge = |r: &[bool]| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if at(r, y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !at(r, y + dy, x + dx)) {
                    out.push((y as f64, x as f64));
                }
            }
        }
        out
    };
    let na = a.iter().filter(|&&x| x).count() as f64;
    let nb = b.iter().filter(|&&x| x).count() as f64;
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let d = if na + nb == 0.0 { 100.0 } else { 200.0 * both / (na + nb) };
    let j = if na + nb - both == 0.0 { 100.0 } else { 100.0 * both / (na + nb - both) };
    if na == 0.0 || nb == 0.0 {
        return (d, j, None);
    }
    let (ea, eb) = (edge(a), edge(b));
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| set.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = ea.iter().map(|p| nearest(p, &eb)).chain(eb.iter().map(|p| nearest(p, &ea))).collect();
    all.sort_by(f64::total_cmp);
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let p95 = all[lo] + (all[hi] - all[lo]) * (rank - lo as f64);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    (d, j, Some((p95, mean)))
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut defined = 0;
    for _ in 0..200 {
        let shape = [rng.gen_range(1..=8), rng.gen_range(1..=8)];
        let n = shape[0] * shape[1];
        let (da, db) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
        let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(da)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(db)).collect();
        let pair = BinaryRegionPair::new(&shape, a.clone(), b.clone()).map_err(|e| e.to_string())?;
        let (d, j, dist) = brute_force(shape, &a, &b);
        ensure(dice(&pair) == d && jaccard(&pair) == j, || format!("overlap mismatch on {shape:?}: {} vs {d}", dice(&pair)))?;
        match dist {
            Some((p95, mean)) => {
                defined += 1;
                let (h, s) = (hd95(&pair).map_err(|e| e.to_string())?, asd(&pair).map_err(|e| e.to_string())?);
                worst = worst.max((h - p95).abs()).max((s - mean).abs());
            }
            None => ensure(hd95(&pair).is_err() && asd(&pair).is_err(), || "empty region gave a distance".into())?,
        }
    }
    ensure(worst <= 1e-9, || format!("distance mismatch {worst:e}"))?;
    Ok(format!("200 pairs ({defined} with distances), overlaps exact, distances within {worst:.1e}"))
}

// -------------------------------------------------------- 7/9 overfit runs

struct OverfitRun {
    final_loss: f64,
    mean_dice: f64,
    elapsed: Duration,
}

fn overfit_run() -> Result<OverfitRun, String> {
    let start = Instant::now();
    let ds = generate_synthetic(&SynthConfig::new(1, vec![64, 64], 4, 2024)).map_err(|e| e.to_string())?;
    let model = ModelConfig::new(2, 1, 4);
    let train = TrainConfig {
        pretrain_iterations: 500,
        pretrain_batch: Some(1),
        learning_rate: 0.05,
        seed: 7,
        ..TrainConfig::default()
    };
    let (arch, mut ckpt) = Checkpoint::init(&model, &train).map_err(|e| e.to_string())?;
    let mut log: Vec<StepRecord> = Vec::new();
    trainer::pretrain(&arch, &mut ckpt, &ds, &mut log).map_err(|e| e.to_string())?;
    let report = trainer::evaluate(&arch, &ckpt, &ds).map_err(|e| e.to_string())?;
    Ok(OverfitRun {
        final_loss: log.last().map(|r| r.loss.total).unwrap_or(f64::NAN),
        mean_dice: report.mean.dice,
        elapsed: start.elapsed(),
    })
}

fn criterion_overfit(run: &Result<OverfitRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    ensure(run.mean_dice >= 95.0, || format!("mean foreground Dice {:.2} < 95", run.mean_dice))?;
    ensure(run.elapsed < Duration::from_secs(600), || format!("took {:.1?}", run.elapsed))?;
    Ok(format!("mean foreground Dice {:.2} after 500 iterations in {:.1?}", run.mean_dice, run.elapsed))
}

fn criterion_determinism(first: &Result<OverfitRun, String>) -> Outcome {
    let a = first.as_ref().map_err(Clone::clone)?;
    let b = overfit_run()?;
    ensure(a.final_loss.to_bits() == b.final_loss.to_bits(), || {
        format!("final losses differ: {:e} vs {:e}", a.final_loss, b.final_loss)
    })?;
    Ok(format!("final loss {} in both runs", a.final_loss))
}

// -------------------------------------------------------------- 8 SSL trend

struct TrendSetup {
    train: Dataset,
    val: Dataset,
}

fn trend_setup() -> Result<TrendSetup, String> {
    let mut synth = SynthConfig::new(50, vec![32, 32], 4, 808);
    synth.noise_sigma = 0.1;
    let all = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let val_idx: Vec<usize> = (40..50).collect();
    let (train, val) = all.partition(&val_idx).map_err(|e| e.to_string())?;
    let train = split_labeled(&train, 0.1, 808).map_err(|e| e.to_string())?;
    Ok(TrendSetup { train, val })
}

fn trend_config() -> TrainConfig {
    TrainConfig {
        pretrain_iterations: 500,
        ssl_iterations: 1000,
        pairs: Some(4),
        learning_rate: 0.03,
        eval_interval: 0,
        seed: 99,
        ..TrainConfig::default()
    }
}

fn trend_model(branches: &[Branch]) -> ModelConfig {
    ModelConfig { base_width: 8, depth: 3, ..ModelConfig::new(2, 1, 4) }.with_branches(branches)
}

/// Returns (pretrain-only val Dice, after-SSL val Dice).
fn trend_run(setup: &TrendSetup, branches: &[Branch]) -> Result<(f64, f64), String> {
    let e = |e: wavecp::Error| e.to_string();
    let (arch, mut ckpt) = Checkpoint::init(&trend_model(branches), &trend_config()).map_err(e)?;
    trainer::pretrain(&arch, &mut ckpt, &setup.train, &mut ()).map_err(e)?;
    let base = trainer::evaluate(&arch, &ckpt, &setup.val).map_err(e)?.mean.dice;
    trainer::train_ssl(&arch, &mut ckpt, &setup.train, None, &mut ()).map_err(e)?;
    let ssl = trainer::evaluate(&arch, &ckpt, &setup.val).map_err(e)?.mean.dice;
    Ok((base, ssl))
}

fn criterion_trend() -> Outcome {
    let start = Instant::now();
    let setup = trend_setup()?;
    let (base, full) = trend_run(&setup, &[Branch::Main, Branch::Low, Branch::High])?;
    let (_, main_only) = trend_run(&setup, &[Branch::Main])?;
    let summary = format!("baseline {base:.2}, M+L+H {full:.2}, M-only {main_only:.2}, {:.0?}", start.elapsed());
    ensure(full - base >= 2.0, || format!("SSL gain {:.2} < 2 ({summary})", full - base))?;
    ensure(full >= main_only - 0.5, || format!("M+L+H trails M-only ({summary})"))?;
    within_time(start, Duration::from_secs(3600))?;
    Ok(summary)
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut failures = 0;
    let mut report = |n: u32, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} ({name}): FAIL - {detail}");
            }
        }
    };
    if wanted(1) {
        report(1, "wavelet", criterion_wavelet());
    }
    if wanted(2) {
        report(2, "mixer", criterion_mixer());
    }
    if wanted(3) {
        report(3, "losses", criterion_losses());
    }
    if wanted(4) {
        report(4, "ema", criterion_ema());
    }
    if wanted(5) {
        report(5, "model", criterion_model());
    }
    if wanted(6) {
        report(6, "metrics", criterion_metrics());
    }
    let overfit = (wanted(7) || wanted(9)).then(overfit_run);
    if let (true, Some(run)) = (wanted(7), &overfit) {
        report(7, "overfit", criterion_overfit(run));
    }
    if wanted(8) {
        report(8, "ssl trend", criterion_trend());
    }
    if let (true, Some(run)) = (wanted(9), &overfit) {
        report(9, "determinism", criterion_determinism(run));
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
