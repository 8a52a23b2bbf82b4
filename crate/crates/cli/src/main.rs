use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use wavecp::metrics::{score_labels, MetricReport};
use wavecp::mixer::{generate_mask, mix_labels, mix_pair, Direction, MixMask, DEFAULT_RATIO};
use wavecp::tensorio::{
    generate_synthetic, load_dataset, save_dataset, split_labeled, Intensity, ManifestWriter, SynthConfig,
};
use wavecp::trainer::{self, Checkpoint, MetricRecord, Observer, Phase, StepRecord};
use wavecp::wavelet::{frequency_triple, Family};
use wavecp::{Dataset, Error, Result};

mod config;

use config::{resolve, ModelOptions, RunConfig};

#[derive(Parser)]
#[command(name = "wavecp", version, about = "Wavelet-guided bidirectional copy-paste segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled/unlabeled dataset manifest.
    Synth(SynthArgs),
    /// Supervised pretraining on the labeled samples.
    Pretrain(PretrainArgs),
    /// Semi-supervised training from a pretrained or SSL checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or saved predictions) against labels.
    Eval(EvalArgs),
    /// Write the low/high frequency companions of every image.
    Decompose(DecomposeArgs),
    /// Write one inward/outward mixed pair and its mask.
    MixDemo(MixDemoArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    count: usize,
    /// Spatial shape, e.g. `64,64` or `32,32,32`.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    shape: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Fraction of samples that keep their labels.
    #[arg(long, default_value_t = 0.1)]
    labeled: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise level relative to the intensity range.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file with `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.ema_lambda=0.95`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write a log line every N iterations (the last one is always logged).
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args)]
struct PretrainArgs {
    /// Training manifest directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to start from; SSL checkpoints resume at their iteration.
    #[arg(long)]
    init: PathBuf,
    /// Validation manifest; defaults to the labeled training samples.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest with ground-truth labels.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Manifest whose `label` volumes are predictions, matched by sample id.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Wavelet family: haar or db2.
    #[arg(long, default_value = "haar")]
    family: Family,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MixDemoArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-axis size ratio of the pasted block.
    #[arg(long, default_value_t = DEFAULT_RATIO)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use an all-ones mask, so nothing is pasted.
    #[arg(long)]
    full_mask: bool,
    /// Teacher checkpoint for pseudo-labels; without it only images are mixed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Validation(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    ensure_empty_dir(&a.out, a.force)?;
    if !(a.labeled > 0.0 && a.labeled < 1.0) {
        return Err(Error::Config(format!("--labeled must lie in (0, 1), got {}", a.labeled)));
    }
    let mut cfg = SynthConfig::new(a.count, a.shape.clone(), a.classes, a.seed);
    cfg.noise_sigma = a.noise;
    let full = generate_synthetic(&cfg)?;
    let ds = split_labeled(&full, a.labeled, a.seed)?;
    save_dataset(&ds, &a.out, Intensity::MinMax)?;
    // Record provenance in the manifest itself.
    let index_path = a.out.join(wavecp::tensorio::INDEX_FILE);
    let mut index = wavecp::tensorio::read_index(&a.out)?;
    index.metadata.insert(
        "synth".into(),
        json!({"count": a.count, "shape": a.shape, "classes": a.classes,
               "labeled": a.labeled, "seed": a.seed, "noise": a.noise}),
    );
    write_json(&index_path, &index)?;
    log::info!(
        "wrote {} samples ({} labeled) to {}",
        ds.len(),
        ds.labeled_indices().len(),
        a.out.display()
    );
    Ok(())
}

/// Writes step records as JSON lines and remembers evaluations.
struct JsonLog {
    file: fs::File,
    path: PathBuf,
    every: usize,
    last: usize,
    error: Option<Error>,
}

impl JsonLog {
    fn create(path: PathBuf, every: usize, last: usize, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(JsonLog {
            file,
            path,
            every: every.max(1),
            last,
            error: None,
        })
    }

    fn finish(self) -> Result<()> {
        self.error.map_or(Ok(()), Err)
    }
}

impl Observer for JsonLog {
    fn step(&mut self, r: &StepRecord) {
        if r.iteration % self.every != 0 && r.iteration != self.last {
            return;
        }
        log::info!("{:?} {} loss {:.5} lr {:.5}", r.phase, r.iteration, r.loss.total, r.lr);
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(self.file, "{line}") {
            self.error.get_or_insert(Error::Io {
                path: self.path.clone(),
                source: e,
            });
        }
    }

    fn eval(&mut self, r: &MetricRecord) {
        log::info!("eval at {}: mean Dice {:.2}", r.iteration, r.report.mean.dice);
    }
}

fn echo_config(out: &Path, ckpt: &Checkpoint) -> Result<()> {
    let run = RunConfig {
        model: ModelOptions::of(&ckpt.model),
        train: ckpt.train.clone(),
    };
    write_json(&out.join("config.json"), &run)
}

fn dataset_rank(ds: &Dataset) -> Result<(usize, usize)> {
    let first = ds
        .samples()
        .first()
        .ok_or_else(|| Error::Validation("dataset has no samples".into()))?;
    Ok((first.image.spatial_rank(), first.image.channels()))
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let run = resolve(&RunConfig::default(), a.cfg.config.as_deref(), &a.cfg.overrides)?;
    let (rank, channels) = dataset_rank(&ds)?;
    let model = run.model.resolve(rank, channels, ds.num_classes());
    let (arch, mut ckpt) = Checkpoint::init(&model, &run.train)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    echo_config(&a.out, &ckpt)?;
    let mut log = JsonLog::create(
        a.out.join("train_log.jsonl"),
        a.cfg.log_every,
        run.train.pretrain_iterations,
        false,
    )?;
    trainer::pretrain(&arch, &mut ckpt, &ds, &mut log)?;
    log.finish()?;
    ckpt.save(&a.out.join("checkpoint.safetensors"))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let val = a.val.as_deref().map(load_dataset).transpose()?;
    let mut ckpt = Checkpoint::load(&a.init)?;
    let base = RunConfig {
        model: ModelOptions::of(&ckpt.model),
        train: ckpt.train.clone(),
    };
    let run = resolve(&base, a.cfg.config.as_deref(), &a.cfg.overrides)?;
    let (rank, channels) = dataset_rank(&ds)?;
    let wanted = run.model.resolve(rank, channels, ds.num_classes());
    if wanted != ckpt.model {
        return Err(Error::Config(format!(
            "checkpoint model {} does not match the requested model {}",
            serde_json::to_string(&ckpt.model).unwrap_or_default(),
            serde_json::to_string(&wanted).unwrap_or_default()
        )));
    }
    let arch = ckpt.architecture()?;
    let resuming = ckpt.phase == Phase::Ssl;
    ckpt.train = run.train.clone();
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    echo_config(&a.out, &ckpt)?;
    let log_path = a.out.join("train_log.jsonl");
    let append = resuming && log_path.exists();
    let mut log = JsonLog::create(log_path, a.cfg.log_every, run.train.ssl_iterations, append)?;
    let labeled_only;
    let val_ref = match &val {
        Some(v) => v,
        None => {
            labeled_only = ds.labeled_only();
            &labeled_only
        }
    };
    trainer::train_ssl(&arch, &mut ckpt, &ds, Some(val_ref), &mut log)?;
    log.finish()?;
    write_json(&a.out.join("metrics_history.json"), &ckpt.history)?;
    ckpt.save(&a.out.join("checkpoint.safetensors"))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    if ds.labeled_indices().is_empty() {
        return Err(Error::Validation(format!("{} has no labeled samples", a.data.display())));
    }
    let report: MetricReport = if let Some(path) = &a.checkpoint {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.model.num_classes != ds.num_classes() {
            return Err(Error::Config(format!(
                "checkpoint predicts {} classes, dataset has {}",
                ckpt.model.num_classes,
                ds.num_classes()
            )));
        }
        trainer::evaluate(&ckpt.architecture()?, &ckpt, &ds)?
    } else {
        let preds = load_dataset(a.predictions.as_deref().expect("clap requires one source"))?;
        let mut rows = Vec::new();
        for &i in ds.labeled_indices() {
            let s = ds.sample(i);
            let p = preds
                .samples()
                .iter()
                .find(|p| p.id == s.id)
                .and_then(|p| p.label.as_ref())
                .ok_or_else(|| Error::Validation(format!("no prediction for sample `{}`", s.id)))?;
            if p.spatial() != s.image.spatial() {
                return Err(Error::Shape(format!("prediction for `{}` has the wrong shape", s.id)));
            }
            let gt = s.label.as_ref().expect("labeled").labels()?;
            rows.push(score_labels(s.image.spatial(), &p.labels()?, &gt, ds.num_classes())?);
        }
        MetricReport::aggregate(&rows)?
    };
    match &a.out {
        Some(path) => write_json(path, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
    }
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    ensure_empty_dir(&a.out, a.force)?;
    let (rank, _) = dataset_rank(&ds)?;
    let mut w = ManifestWriter::create(&a.out, ds.num_classes(), rank, Intensity::Raw)?;
    w.set_metadata("family", json!(a.family.name()));
    for s in ds.samples() {
        let t = frequency_triple(&s.image, a.family)?;
        let mut vols = vec![("image", &t.raw), ("low", &t.low), ("high", &t.high)];
        if let Some(l) = &s.label {
            vols.push(("label", l));
        }
        w.add_sample(&s.id, &vols)?;
    }
    w.finish()?;
    Ok(())
}

fn cmd_mixdemo(a: MixDemoArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    ensure_empty_dir(&a.out, a.force)?;
    let (labeled, unlabeled) = (ds.labeled_indices(), ds.unlabeled_indices());
    if labeled.len() < 2 || unlabeled.len() < 2 {
        return Err(Error::Config(format!(
            "mix-demo needs two labeled and two unlabeled samples, got {} and {}",
            labeled.len(),
            unlabeled.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let pick = |pool: &[usize], rng: &mut ChaCha8Rng| {
        let v: Vec<usize> = pool.choose_multiple(rng, 2).copied().collect();
        (v[0], v[1])
    };
    let (i, j) = pick(labeled, &mut rng);
    let (p, q) = pick(unlabeled, &mut rng);
    let spatial = ds.sample(i).image.spatial().to_vec();
    let mask = if a.full_mask {
        MixMask::ones(&spatial)
    } else {
        generate_mask(&spatial, a.ratio, &mut rng)?
    };
    let img = |k: usize| &ds.sample(k).image;
    let (x_in, x_out) = mix_pair(((i, img(i)), (j, img(j))), ((p, img(p)), (q, img(q))), &mask)?;

    let labels = match &a.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let arch = ckpt.architecture()?;
            let pseudo = |k: usize| {
                trainer::predict_labels(&arch, &ckpt.teacher, img(k), &ckpt.train.patch, ckpt.train.wavelet)
            };
            let label = |k: usize| ds.sample(k).label.clone().expect("labeled");
            Some((
                mix_labels(&label(j), &pseudo(p)?, &mask, Direction::Inward)?,
                mix_labels(&label(i), &pseudo(q)?, &mask, Direction::Outward)?,
            ))
        }
        None => None,
    };
    let (rank, _) = dataset_rank(&ds)?;
    let mut w = ManifestWriter::create(&a.out, ds.num_classes(), rank, Intensity::Raw)?;
    let id = |k: usize| ds.sample(k).id.clone();
    w.set_metadata("ratio", json!(a.ratio));
    w.set_metadata("seed", json!(a.seed));
    w.set_metadata("full_mask", json!(a.full_mask));
    w.set_metadata("zero_count", json!(mask.zero_count()));
    w.set_metadata("crop_offset", json!(mask.crop_offset()));
    w.set_metadata("crop_size", json!(mask.crop_size()));
    w.set_metadata("sources", json!({"i": id(i), "j": id(j), "p": id(p), "q": id(q)}));
    let mask_volume = mask.to_volume();
    let mut inward = vec![("image", &x_in), ("mask", &mask_volume)];
    let mut outward = vec![("image", &x_out), ("mask", &mask_volume)];
    if let Some((y_in, y_out)) = &labels {
        inward.push(("label", y_in));
        outward.push(("label", y_out));
    }
    w.add_sample("inward", &inward)?;
    w.add_sample("outward", &outward)?;
    w.finish()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::MixDemo(a) => cmd_mixdemo(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
