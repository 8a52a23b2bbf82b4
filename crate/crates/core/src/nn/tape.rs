//! Reverse-mode tape over whole-tensor operations.
//!
//! Each call appends a node holding its output. [`Tape::backward`] walks the
//! nodes in reverse and returns gradients for every parameter of the store
//! the tape was recorded against.

use super::params::{ParamId, ParamStore};
use super::real::{gemm, Mat};
use super::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into the running buffers by the caller.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Input,
    Conv {
        x: Var,
        weight: ParamId,
        bias: ParamId,
        kernel: [usize; 3],
    },
    BatchNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    Concat {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'a, T> {
    params: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    training: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Tape<'a, T> {
    /// `training` selects batch statistics in batch norm.
    pub fn new(params: &'a ParamStore<T>, training: bool) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Stride-1 convolution with zero "same" padding. The weight has shape
    /// `(C_out, C_in, kd, kh, kw)`.
    pub fn conv(&mut self, x: Var, weight: ParamId, bias: ParamId, kernel: [usize; 3]) -> Var {
        let xv = &self.nodes[x.0].value;
        let w = self.params.get(weight);
        let cout = w.shape[0];
        let cin = xv.channels();
        assert_eq!(w.shape[1], cin, "conv `{}` input channels", w.name);
        let k: usize = kernel.iter().product();
        let sp = xv.spatial();
        let v = xv.voxels();
        let n = xv.batch();
        let mut out = Tensor::zeros([n, cout, sp[0], sp[1], sp[2]]);
        let b = self.params.data(bias);
        let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); cin * k * v] };
        for item in 0..n {
            let xi = xv.item(item);
            let src: &[T] = if k == 1 {
                xi
            } else {
                im2col(xi, cin, sp, kernel, &mut cols);
                &cols
            };
            let oi = out.item_mut(item);
            for (co, row) in oi.chunks_mut(v).enumerate() {
                row.iter_mut().for_each(|o| *o = b[co]);
            }
            gemm(
                Mat::new(&w.data, cout, cin * k),
                Mat::new(src, cin * k, v),
                oi,
                true,
            );
        }
        self.push(
            out,
            Op::Conv {
                x,
                weight,
                bias,
                kernel,
            },
            true,
        )
    }

    /// Per-channel batch normalization. In training mode the batch mean and
    /// biased variance normalize the input and are recorded for the running
    /// buffers; otherwise the running buffers are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, v) = (xv.batch(), xv.channels(), xv.voxels());
        let g = self.params.data(gamma);
        let bt = self.params.data(beta);
        let eps = T::of(BN_EPS);
        let m = n * v;
        let (mean, var) = if self.training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for item in 0..n {
                    s += xv.item(item)[ch * v..(ch + 1) * v]
                        .iter()
                        .map(|x| x.f64())
                        .sum::<f64>();
                }
                let mu = s / m as f64;
                let mut ss = 0.0f64;
                for item in 0..n {
                    ss += xv.item(item)[ch * v..(ch + 1) * v]
                        .iter()
                        .map(|x| (x.f64() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = T::of(mu);
                var[ch] = T::of(ss / m as f64);
            }
            (mean, var)
        } else {
            (
                self.params.data(running_mean).to_vec(),
                self.params.data(running_var).to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.data.len()];
        let mut out = Tensor::zeros(xv.shape);
        for item in 0..n {
            let xi = xv.item(item);
            let base = item * c * v;
            for ch in 0..c {
                for i in ch * v..(ch + 1) * v {
                    let h = (xi[i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = h;
                    out.data[base + i] = g[ch] * h + bt[ch];
                }
            }
        }
        if self.training {
            let correction = if m > 1 {
                T::of(m as f64 / (m - 1) as f64)
            } else {
                T::one()
            };
            self.bn_updates.push(BnUpdate {
                running_mean,
                running_var,
                mean,
                var: var.iter().map(|&s| s * correction).collect(),
            });
        }
        let training = self.training;
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
            },
            true,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_vec(
            xv.shape,
            xv.data.iter().map(|&a| a.max(T::zero())).collect(),
        );
        let ng = self.nodes[x.0].needs_grad;
        self.push(out, Op::Relu { x }, ng)
    }

    /// Non-overlapping max pooling; spatial extents must be divisible by the
    /// window.
    pub fn max_pool(&mut self, x: Var, window: [usize; 3]) -> Var {
        let xv = &self.nodes[x.0].value;
        let [d, h, w] = xv.spatial();
        assert!(
            d % window[0] == 0 && h % window[1] == 0 && w % window[2] == 0,
            "pool window {window:?} does not divide {:?}",
            xv.spatial()
        );
        let (od, oh, ow) = (d / window[0], h / window[1], w / window[2]);
        let planes = xv.batch() * xv.channels();
        let mut out = Tensor::zeros([xv.batch(), xv.channels(), od, oh, ow]);
        let mut argmax = vec![0usize; out.data.len()];
        let mut o = 0;
        for p in 0..planes {
            let base = p * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut arg = 0;
                        for dz in 0..window[0] {
                            for dy in 0..window[1] {
                                let row = base
                                    + ((z * window[0] + dz) * h + y * window[1] + dy) * w
                                    + xx * window[2];
                                for dx in 0..window[2] {
                                    let val = xv.data[row + dx];
                                    if val > best {
                                        best = val;
                                        arg = row + dx;
                                    }
                                }
                            }
                        }
                        out.data[o] = best;
                        argmax[o] = arg;
                        o += 1;
                    }
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(out, Op::MaxPool { x, argmax }, ng)
    }

    /// Nearest-neighbour upsampling by an integer factor per axis.
    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Var {
        let xv = &self.nodes[x.0].value;
        let [d, h, w] = xv.spatial();
        let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
        let planes = xv.batch() * xv.channels();
        let mut out = Tensor::zeros([xv.batch(), xv.channels(), od, oh, ow]);
        let mut o = 0;
        for p in 0..planes {
            let base = p * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    let row = base + ((z / factor[0]) * h + y / factor[1]) * w;
                    for xx in 0..ow {
                        out.data[o] = xv.data[row + xx / factor[2]];
                        o += 1;
                    }
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(out, Op::Upsample { x, factor }, ng)
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.batch(), bv.batch(), "concat batch");
        assert_eq!(av.spatial(), bv.spatial(), "concat spatial shape");
        let s = av.spatial();
        let mut out = Tensor::zeros([av.batch(), av.channels() + bv.channels(), s[0], s[1], s[2]]);
        for item in 0..av.batch() {
            let (ai, bi) = (av.item(item), bv.item(item));
            let oi = out.item_mut(item);
            oi[..ai.len()].copy_from_slice(ai);
            oi[ai.len()..].copy_from_slice(bi);
        }
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(out, Op::Concat { a, b }, ng)
    }

    /// Softmax over the channel axis at every voxel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, v) = (xv.channels(), xv.voxels());
        let mut out = Tensor::zeros(xv.shape);
        for item in 0..xv.batch() {
            let xi = xv.item(item);
            let oi = out.item_mut(item);
            for i in 0..v {
                let mx = (0..c).map(|k| xi[k * v + i]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for k in 0..c {
                    let e = (xi[k * v + i] - mx).exp();
                    oi[k * v + i] = e;
                    sum += e;
                }
                for k in 0..c {
                    oi[k * v + i] = oi[k * v + i] / sum;
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(out, Op::Softmax { x }, ng)
    }

    /// Back-propagates the given output gradients. Returns one gradient buffer
    /// per parameter of the store (zero for parameters the tape never used).
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Vec<Vec<T>> {
        let mut pgrads = self.params.zeros_like();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape, self.nodes[v.0].value.shape, "seed gradient shape");
            accumulate(&mut grads[v.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    x,
                    weight,
                    bias,
                    kernel,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let w = self.params.get(*weight);
                    let (cout, cin) = (w.shape[0], xv.channels());
                    let k: usize = kernel.iter().product();
                    let sp = xv.spatial();
                    let v = xv.voxels();
                    let want_dx = self.nodes[x.0].needs_grad;
                    let mut dx = want_dx.then(|| Tensor::zeros(xv.shape));
                    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); cin * k * v] };
                    let mut dcols = vec![T::zero(); if want_dx { cin * k * v } else { 0 }];
                    for item in 0..xv.batch() {
                        let gi = g.item(item);
                        {
                            let db = &mut pgrads[bias.0];
                            for (co, row) in gi.chunks(v).enumerate() {
                                db[co] += row.iter().copied().sum::<T>();
                            }
                        }
                        let xi = xv.item(item);
                        let src: &[T] = if k == 1 {
                            xi
                        } else {
                            im2col(xi, cin, sp, *kernel, &mut cols);
                            &cols
                        };
                        gemm(
                            Mat::new(gi, cout, v),
                            Mat::new(src, cin * k, v).t(),
                            &mut pgrads[weight.0],
                            true,
                        );
                        if let Some(dx) = dx.as_mut() {
                            let target: &mut [T] = if k == 1 { dx.item_mut(item) } else { &mut dcols };
                            gemm(
                                Mat::new(&w.data, cout, cin * k).t(),
                                Mat::new(gi, cout, v),
                                target,
                                k == 1,
                            );
                            if k > 1 {
                                col2im(&dcols, cin, sp, *kernel, dx.item_mut(item));
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, v) = (g.batch(), g.channels(), g.voxels());
                    let gam = self.params.data(*gamma);
                    let mut sum_dy = vec![0.0f64; c];
                    let mut sum_dy_xhat = vec![0.0f64; c];
                    for item in 0..n {
                        let base = item * c * v;
                        for ch in 0..c {
                            for i in base + ch * v..base + (ch + 1) * v {
                                sum_dy[ch] += g.data[i].f64();
                                sum_dy_xhat[ch] += (g.data[i] * xhat[i]).f64();
                            }
                        }
                    }
                    for ch in 0..c {
                        pgrads[gamma.0][ch] += T::of(sum_dy_xhat[ch]);
                        pgrads[beta.0][ch] += T::of(sum_dy[ch]);
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Tensor::zeros(g.shape);
                        let m = T::of((n * v) as f64);
                        for item in 0..n {
                            let base = item * c * v;
                            for ch in 0..c {
                                let scale = gam[ch] * inv_std[ch];
                                let (sd, sdx) = (T::of(sum_dy[ch]), T::of(sum_dy_xhat[ch]));
                                for i in base + ch * v..base + (ch + 1) * v {
                                    dx.data[i] = if *batch_stats {
                                        scale * (g.data[i] - sd / m - xhat[i] * sdx / m)
                                    } else {
                                        scale * g.data[i]
                                    };
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = Tensor::from_vec(
                        g.shape,
                        g.data
                            .iter()
                            .zip(&xv.data)
                            .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                            .collect(),
                    );
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.nodes[x.0].value.shape);
                    for (&gi, &a) in g.data.iter().zip(argmax) {
                        dx.data[a] += gi;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Upsample { x, factor } => {
                    let xs = self.nodes[x.0].value.shape;
                    let (d, h, w) = (xs[2], xs[3], xs[4]);
                    let [od, oh, ow] = g.spatial();
                    let mut dx = Tensor::zeros(xs);
                    let mut o = 0;
                    for p in 0..xs[0] * xs[1] {
                        let base = p * d * h * w;
                        for z in 0..od {
                            for y in 0..oh {
                                let row = base + ((z / factor[0]) * h + y / factor[1]) * w;
                                for xx in 0..ow {
                                    dx.data[row + xx / factor[2]] += g.data[o];
                                    o += 1;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Concat { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (la, lb) = (av.item_len(), bv.item_len());
                    let mut da = self.nodes[a.0].needs_grad.then(|| Tensor::zeros(av.shape));
                    let mut db = self.nodes[b.0].needs_grad.then(|| Tensor::zeros(bv.shape));
                    for item in 0..av.batch() {
                        let gi = g.item(item);
                        if let Some(da) = da.as_mut() {
                            da.item_mut(item).copy_from_slice(&gi[..la]);
                        }
                        if let Some(db) = db.as_mut() {
                            db.item_mut(item).copy_from_slice(&gi[la..la + lb]);
                        }
                    }
                    if let Some(da) = da {
                        accumulate(&mut grads[a.0], da);
                    }
                    if let Some(db) = db {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Softmax { x } => {
                    let p = &node.value;
                    let (c, v) = (p.channels(), p.voxels());
                    let mut dx = Tensor::zeros(p.shape);
                    for item in 0..p.batch() {
                        let (pi, gi) = (p.item(item), g.item(item));
                        let di = dx.item_mut(item);
                        for i in 0..v {
                            let dot: T = (0..c).map(|k| pi[k * v + i] * gi[k * v + i]).sum();
                            for k in 0..c {
                                di[k * v + i] = pi[k * v + i] * (gi[k * v + i] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }
        pgrads
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Unfolds `x` (`C × D × H × W`) into a `(C·kd·kh·kw) × (D·H·W)` matrix with
/// zero padding of `k / 2` per side.
fn im2col<T: Real>(x: &[T], c: usize, [d, h, w]: [usize; 3], kernel: [usize; 3], cols: &mut [T]) {
    let v = d * h * w;
    let [kd, kh, kw] = kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * v..(ci + 1) * v];
        for kz in 0..kd {
            let oz = kz as isize - pd;
            for ky in 0..kh {
                let oy = ky as isize - ph;
                for kx in 0..kw {
                    let ox = kx as isize - pw;
                    let dst_row = &mut cols[row * v..(row + 1) * v];
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    for z in 0..d {
                        let sz = z as isize + oz;
                        for y in 0..h {
                            let sy = y as isize + oy;
                            let dst = &mut dst_row[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || x0 >= x1 {
                                dst.iter_mut().for_each(|e| *e = T::zero());
                                continue;
                            }
                            let src_row = (sz as usize * h + sy as usize) * w;
                            dst[..x0].iter_mut().for_each(|e| *e = T::zero());
                            let sx0 = (x0 as isize + ox) as usize;
                            dst[x0..x1].copy_from_slice(&plane[src_row + sx0..src_row + sx0 + (x1 - x0)]);
                            dst[x1..].iter_mut().for_each(|e| *e = T::zero());
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `dx`.
fn col2im<T: Real>(cols: &[T], c: usize, [d, h, w]: [usize; 3], kernel: [usize; 3], dx: &mut [T]) {
    let v = d * h * w;
    let [kd, kh, kw] = kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * v..(ci + 1) * v];
        for kz in 0..kd {
            let oz = kz as isize - pd;
            for ky in 0..kh {
                let oy = ky as isize - ph;
                for kx in 0..kw {
                    let ox = kx as isize - pw;
                    let src_row = &cols[row * v..(row + 1) * v];
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x0 < x1 {
                        for z in 0..d {
                            let sz = z as isize + oz;
                            if sz < 0 || sz >= d as isize {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y as isize + oy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let src = &src_row[(z * h + y) * w..(z * h + y + 1) * w];
                                let base = (sz as usize * h + sy as usize) * w;
                                let sx0 = (x0 as isize + ox) as usize;
                                for (t, &s) in plane[base + sx0..base + sx0 + (x1 - x0)]
                                    .iter_mut()
                                    .zip(&src[x0..x1])
                                {
                                    *t += s;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
