//! Tri-encoder, tri-branch-decoder UNet.
//!
//! Three encoders read the raw image (`M`), its low-frequency companion (`L`)
//! and its high-frequency companion (`H`). At the bottleneck the `L` and `H`
//! features are each concatenated with the raw features and reduced by a
//! conv-norm-act block. The `L` decoder decodes the low fusion with skips from
//! the `L` encoder, the `H` decoder decodes the high fusion with skips from
//! the `H` encoder, and the `M` decoder decodes a reduction of both fusions
//! with skips from the raw encoder. Every decoder ends in a 1×1 projection and
//! a softmax over classes.
//!
//! Disabling `L` and/or `H` removes its encoder, fusion and decoder. With only
//! `M` left the network is a plain UNet.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{kaiming, ParamId, ParamStore, Real, Role, Tape, Tensor, Var};
use crate::tensorio::{Volume, VolumeKind};
use crate::wavelet::FrequencyTriple;
use crate::{Error, Result};

/// Decoder branch of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "L")]
    Low,
    #[serde(rename = "M")]
    Main,
    #[serde(rename = "H")]
    High,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Main, Branch::Low, Branch::High];

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Low => "L",
            Branch::Main => "M",
            Branch::High => "H",
        }
    }
}

/// One value per decoder branch; the main branch is always present.
#[derive(Debug, Clone, PartialEq)]
pub struct Branches<X> {
    pub main: X,
    pub low: Option<X>,
    pub high: Option<X>,
}

impl<X> Branches<X> {
    pub fn get(&self, branch: Branch) -> Option<&X> {
        match branch {
            Branch::Main => Some(&self.main),
            Branch::Low => self.low.as_ref(),
            Branch::High => self.high.as_ref(),
        }
    }

    pub fn get_mut(&mut self, branch: Branch) -> Option<&mut X> {
        match branch {
            Branch::Main => Some(&mut self.main),
            Branch::Low => self.low.as_mut(),
            Branch::High => self.high.as_mut(),
        }
    }

    pub fn set(&mut self, branch: Branch, value: X) {
        match branch {
            Branch::Main => self.main = value,
            Branch::Low => self.low = Some(value),
            Branch::High => self.high = Some(value),
        }
    }

    /// Present branches in `M`, `L`, `H` order.
    pub fn iter(&self) -> impl Iterator<Item = (Branch, &X)> {
        Branch::ALL
            .into_iter()
            .filter_map(move |b| self.get(b).map(|x| (b, x)))
    }

    pub fn map<Y>(&self, mut f: impl FnMut(Branch, &X) -> Y) -> Branches<Y> {
        Branches {
            main: f(Branch::Main, &self.main),
            low: self.low.as_ref().map(|x| f(Branch::Low, x)),
            high: self.high.as_ref().map(|x| f(Branch::High, x)),
        }
    }
}

/// Per-class probability maps of every enabled branch.
pub type PredictionTriple = Branches<Volume>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of the first encoder stage; stage `s` has `base_width · 2^s`.
    pub base_width: usize,
    /// Encoder stages, including the bottleneck.
    pub depth: usize,
    pub branches: Vec<Branch>,
}

impl ModelConfig {
    /// Defaults: depth 4, base width 16 in 2D and 8 in 3D, all branches.
    pub fn new(spatial_rank: usize, in_channels: usize, num_classes: usize) -> Self {
        ModelConfig {
            spatial_rank,
            in_channels,
            num_classes,
            base_width: if spatial_rank == 3 { 8 } else { 16 },
            depth: 4,
            branches: vec![Branch::Main, Branch::Low, Branch::High],
        }
    }

    pub fn with_branches(mut self, branches: &[Branch]) -> Self {
        self.branches = branches.to_vec();
        self
    }

    pub fn has(&self, branch: Branch) -> bool {
        self.branches.contains(&branch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_rank != 2 && self.spatial_rank != 3 {
            return Err(Error::Config(format!(
                "spatial_rank must be 2 or 3, got {}",
                self.spatial_rank
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_width < 4 {
            return Err(Error::Config(format!(
                "base_width must be >= 4, got {}",
                self.base_width
            )));
        }
        if !self.has(Branch::Main) {
            return Err(Error::Config("the main branch M must be enabled".into()));
        }
        let mut sorted = self.branches.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.branches.len() {
            return Err(Error::Config("duplicate branch in config".into()));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn kernel(&self) -> [usize; 3] {
        if self.spatial_rank == 3 {
            [3, 3, 3]
        } else {
            [1, 3, 3]
        }
    }

    pub fn pool_window(&self) -> [usize; 3] {
        if self.spatial_rank == 3 {
            [2, 2, 2]
        } else {
            [1, 2, 2]
        }
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    kernel: [usize; 3],
}

#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct DoubleConv(ConvBnRelu, ConvBnRelu);

#[derive(Debug, Clone)]
struct Encoder {
    stages: Vec<DoubleConv>,
}

#[derive(Debug, Clone)]
struct Decoder {
    /// `ups[s]` maps stage `s + 1` width to stage `s` width after upsampling.
    ups: Vec<ConvBnRelu>,
    blocks: Vec<DoubleConv>,
    head: Conv,
}

struct Builder {
    params: ParamStore<f32>,
    rng: ChaCha8Rng,
    kernel: [usize; 3],
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: [usize; 3]) -> Conv {
        let k: usize = kernel.iter().product();
        let w = kaiming(cin * k, cout * cin * k, &mut self.rng);
        let weight = self.params.add(
            format!("{name}.weight"),
            vec![cout, cin, kernel[0], kernel[1], kernel[2]],
            Role::Trainable,
            w,
        );
        let bias = self
            .params
            .add(format!("{name}.bias"), vec![cout], Role::Trainable, vec![0.0; cout]);
        Conv {
            weight,
            bias,
            kernel,
        }
    }

    fn cbr(&mut self, name: &str, cin: usize, cout: usize) -> ConvBnRelu {
        let kernel = self.kernel;
        let conv = self.conv(&format!("{name}.conv"), cin, cout, kernel);
        let mut add = |suffix: &str, role, value: f32| {
            self.params.add(
                format!("{name}.bn.{suffix}"),
                vec![cout],
                role,
                vec![value; cout],
            )
        };
        let gamma = add("weight", Role::Trainable, 1.0);
        let beta = add("bias", Role::Trainable, 0.0);
        let mean = add("running_mean", Role::Buffer, 0.0);
        let var = add("running_var", Role::Buffer, 1.0);
        ConvBnRelu {
            conv,
            gamma,
            beta,
            mean,
            var,
        }
    }

    fn double(&mut self, name: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv(
            self.cbr(&format!("{name}.0"), cin, cout),
            self.cbr(&format!("{name}.1"), cout, cout),
        )
    }

    fn encoder(&mut self, name: &str, cfg: &ModelConfig) -> Encoder {
        let stages = (0..cfg.depth)
            .map(|s| {
                let cin = if s == 0 { cfg.in_channels } else { cfg.width(s - 1) };
                self.double(&format!("{name}.stage{s}"), cin, cfg.width(s))
            })
            .collect();
        Encoder { stages }
    }

    fn decoder(&mut self, name: &str, cfg: &ModelConfig) -> Decoder {
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for s in 0..cfg.depth - 1 {
            ups.push(self.cbr(&format!("{name}.up{s}"), cfg.width(s + 1), cfg.width(s)));
            blocks.push(self.double(&format!("{name}.block{s}"), 2 * cfg.width(s), cfg.width(s)));
        }
        let head = self.conv(
            &format!("{name}.head"),
            cfg.width(0),
            cfg.num_classes,
            [1, 1, 1],
        );
        Decoder { ups, blocks, head }
    }
}

/// Network architecture: parameter handles into a [`ParamStore`].
///
/// The same architecture evaluates any parameter store produced by
/// [`XNetPlus::build`] for the same config, which is how student and teacher
/// share one model description.
#[derive(Debug, Clone)]
pub struct XNetPlus {
    config: ModelConfig,
    encoders: Branches<Encoder>,
    fuse_low: Option<ConvBnRelu>,
    fuse_high: Option<ConvBnRelu>,
    fuse_main: Option<ConvBnRelu>,
    decoders: Branches<Decoder>,
}

/// Input batch: low, raw and high companion images, each `(N, C, D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleBatch<T> {
    pub low: Tensor<T>,
    pub raw: Tensor<T>,
    pub high: Tensor<T>,
}

fn volume_tensor<T: Real>(volumes: &[&Volume]) -> Result<Tensor<T>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let shape = first.shape();
    let dims: [usize; 4] = match *shape {
        [c, h, w] => [c, 1, h, w],
        [c, d, h, w] => [c, d, h, w],
        _ => return Err(Error::Shape(format!("unsupported volume shape {shape:?}"))),
    };
    let mut data = Vec::with_capacity(volumes.len() * first.data().len());
    for v in volumes {
        if v.shape() != shape {
            return Err(Error::Shape(format!(
                "batch mixes shapes {shape:?} and {:?}",
                v.shape()
            )));
        }
        data.extend(v.data().iter().map(|&x| T::of(x as f64)));
    }
    Ok(Tensor::from_vec(
        [volumes.len(), dims[0], dims[1], dims[2], dims[3]],
        data,
    ))
}

impl<T: Real> TripleBatch<T> {
    pub fn from_triples(triples: &[&FrequencyTriple]) -> Result<Self> {
        Ok(TripleBatch {
            low: volume_tensor(&triples.iter().map(|t| &t.low).collect::<Vec<_>>())?,
            raw: volume_tensor(&triples.iter().map(|t| &t.raw).collect::<Vec<_>>())?,
            high: volume_tensor(&triples.iter().map(|t| &t.high).collect::<Vec<_>>())?,
        })
    }
}

impl XNetPlus {
    /// Builds the architecture and a freshly initialized parameter store:
    /// Kaiming-normal convolution weights, zero biases, unit batch-norm
    /// scales. Identical `(config, seed)` give identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(XNetPlus, ParamStore<f32>)> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            kernel: config.kernel(),
        };
        let bottleneck = config.width(config.depth - 1);
        let has_low = config.has(Branch::Low);
        let has_high = config.has(Branch::High);

        let encoders = Branches {
            main: b.encoder("enc_m", config),
            low: has_low.then(|| b.encoder("enc_l", config)),
            high: has_high.then(|| b.encoder("enc_h", config)),
        };
        let fuse_low = has_low.then(|| b.cbr("fuse_lm", 2 * bottleneck, bottleneck));
        let fuse_high = has_high.then(|| b.cbr("fuse_hm", 2 * bottleneck, bottleneck));
        let fuse_main = (has_low && has_high).then(|| b.cbr("fuse_m", 2 * bottleneck, bottleneck));
        let decoders = Branches {
            main: b.decoder("dec_m", config),
            low: has_low.then(|| b.decoder("dec_l", config)),
            high: has_high.then(|| b.decoder("dec_h", config)),
        };
        Ok((
            XNetPlus {
                config: config.clone(),
                encoders,
                fuse_low,
                fuse_high,
                fuse_main,
                decoders,
            },
            b.params,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Checks that every spatial extent is divisible by `2^(depth-1)`.
    pub fn check_input_shape(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.config.spatial_rank {
            return Err(Error::Config(format!(
                "input has spatial rank {}, model expects {}",
                spatial.len(),
                self.config.spatial_rank
            )));
        }
        let div = self.config.divisor();
        let names: &[&str] = if spatial.len() == 3 { &["D", "H", "W"] } else { &["H", "W"] };
        for (name, &extent) in names.iter().zip(spatial) {
            if extent % div != 0 {
                return Err(Error::Shape(format!(
                    "spatial dim {name} = {extent} is not divisible by {div}"
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the probability outputs.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, input: &TripleBatch<T>) -> Result<Branches<Var>> {
        let s = input.raw.spatial();
        let spatial: Vec<usize> = if self.config.spatial_rank == 3 {
            s.to_vec()
        } else {
            s[1..].to_vec()
        };
        self.check_input_shape(&spatial)?;
        if input.raw.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                input.raw.channels(),
                self.config.in_channels
            )));
        }
        for t in [&input.low, &input.high] {
            if t.shape != input.raw.shape {
                return Err(Error::Shape("triple members differ in shape".into()));
            }
        }

        let raw = tape.input(input.raw.clone());
        let (skips_m, f_m) = self.encode(tape, &self.encoders.main, raw);
        let low = self.encoders.low.as_ref().map(|enc| {
            let x = tape.input(input.low.clone());
            self.encode(tape, enc, x)
        });
        let high = self.encoders.high.as_ref().map(|enc| {
            let x = tape.input(input.high.clone());
            self.encode(tape, enc, x)
        });

        let f_lm = match (&low, &self.fuse_low) {
            (Some((_, f_l)), Some(fuse)) => {
                let cat = tape.concat(*f_l, f_m);
                Some(cbr(tape, fuse, cat))
            }
            _ => None,
        };
        let f_hm = match (&high, &self.fuse_high) {
            (Some((_, f_h)), Some(fuse)) => {
                let cat = tape.concat(*f_h, f_m);
                Some(cbr(tape, fuse, cat))
            }
            _ => None,
        };
        let main_in = match (f_lm, f_hm, &self.fuse_main) {
            (Some(a), Some(b), Some(fuse)) => {
                let cat = tape.concat(a, b);
                cbr(tape, fuse, cat)
            }
            (Some(a), None, _) => a,
            (None, Some(b), _) => b,
            _ => f_m,
        };

        let main = self.decode(tape, &self.decoders.main, main_in, &skips_m);
        let low_out = match (&self.decoders.low, &low, f_lm) {
            (Some(dec), Some((skips, _)), Some(f)) => Some(self.decode(tape, dec, f, skips)),
            _ => None,
        };
        let high_out = match (&self.decoders.high, &high, f_hm) {
            (Some(dec), Some((skips, _)), Some(f)) => Some(self.decode(tape, dec, f, skips)),
            _ => None,
        };
        Ok(Branches {
            main,
            low: low_out,
            high: high_out,
        })
    }

    fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, enc: &Encoder, x: Var) -> (Vec<Var>, Var) {
        let mut skips = Vec::with_capacity(enc.stages.len() - 1);
        let mut h = x;
        for (s, stage) in enc.stages.iter().enumerate() {
            if s > 0 {
                h = tape.max_pool(h, self.config.pool_window());
            }
            h = double(tape, stage, h);
            if s + 1 < enc.stages.len() {
                skips.push(h);
            }
        }
        (skips, h)
    }

    fn decode<T: Real>(&self, tape: &mut Tape<'_, T>, dec: &Decoder, bottom: Var, skips: &[Var]) -> Var {
        let mut h = bottom;
        for s in (0..self.config.depth - 1).rev() {
            let up = tape.upsample(h, self.config.pool_window());
            let up = cbr(tape, &dec.ups[s], up);
            let cat = tape.concat(skips[s], up);
            h = double(tape, &dec.blocks[s], cat);
        }
        let logits = tape.conv(h, dec.head.weight, dec.head.bias, dec.head.kernel);
        tape.softmax(logits)
    }

    /// Inference on one triple with running batch-norm statistics.
    pub fn predict_triple(&self, params: &ParamStore<f32>, triple: &FrequencyTriple) -> Result<PredictionTriple> {
        let batch = TripleBatch::<f32>::from_triples(&[triple])?;
        let mut tape = Tape::new(params, false);
        let out = self.forward(&mut tape, &batch)?;
        let spatial = triple.raw.spatial().to_vec();
        let to_volume = |v: &Var| {
            let t = tape.value(*v);
            let mut shape = vec![self.config.num_classes];
            shape.extend_from_slice(&spatial);
            Volume::new(shape, VolumeKind::Probability, t.data.clone())
        };
        Ok(Branches {
            main: to_volume(&out.main)?,
            low: out.low.as_ref().map(to_volume).transpose()?,
            high: out.high.as_ref().map(to_volume).transpose()?,
        })
    }
}

fn cbr<T: Real>(tape: &mut Tape<'_, T>, layer: &ConvBnRelu, x: Var) -> Var {
    let y = tape.conv(x, layer.conv.weight, layer.conv.bias, layer.conv.kernel);
    let y = tape.batch_norm(y, layer.gamma, layer.beta, layer.mean, layer.var);
    tape.relu(y)
}

fn double<T: Real>(tape: &mut Tape<'_, T>, block: &DoubleConv, x: Var) -> Var {
    let y = cbr(tape, &block.0, x);
    cbr(tape, &block.1, y)
}
