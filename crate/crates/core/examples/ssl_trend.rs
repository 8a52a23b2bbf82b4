//! Scaled semi-supervised experiment on synthetic 2D data.
//!
//! Pretrains on the labeled 10%, then runs the copy-paste SSL phase, for the
//! full three-branch model and the main-branch-only model, and prints
//! validation Dice at each stage.
//!
//! ```text
//! cargo run --release --example ssl_trend -- size=32 noise=0.1 pretrain=500 ssl=1000 lr=0.03
//! ```

use std::time::Instant;

use wavecp::tensorio::{generate_synthetic, split_labeled, SynthConfig};
use wavecp::trainer::{self, Checkpoint, TrainConfig};
use wavecp::xnetplus::{Branch, ModelConfig};

fn arg(name: &str, default: f64) -> f64 {
    std::env::args()
        .skip(1)
        .find_map(|a| a.strip_prefix(&format!("{name}=")).map(|v| v.parse().expect("numeric argument")))
        .unwrap_or(default)
}

fn main() -> wavecp::Result<()> {
    let size = arg("size", 32.0) as usize;
    let mut synth = SynthConfig::new(50, vec![size, size], 4, arg("data_seed", 808.0) as u64);
    synth.noise_sigma = arg("noise", 0.1);
    let all = generate_synthetic(&synth)?;
    let (train, val) = all.partition(&(40..50).collect::<Vec<_>>())?;
    let train = split_labeled(&train, 0.1, 808)?;
    let config = TrainConfig {
        pretrain_iterations: arg("pretrain", 500.0) as usize,
        ssl_iterations: arg("ssl", 1000.0) as usize,
        pairs: Some(arg("pairs", 4.0) as usize),
        learning_rate: arg("lr", 0.03),
        eval_interval: 0,
        seed: arg("seed", 99.0) as u64,
        ..TrainConfig::default()
    };
    for branches in [&[Branch::Main, Branch::Low, Branch::High][..], &[Branch::Main]] {
        let start = Instant::now();
        let model = ModelConfig {
            base_width: arg("width", 8.0) as usize,
            depth: arg("depth", 3.0) as usize,
            ..ModelConfig::new(2, 1, 4)
        }
        .with_branches(branches);
        let (arch, mut ckpt) = Checkpoint::init(&model, &config)?;
        trainer::pretrain(&arch, &mut ckpt, &train, &mut ())?;
        let base = trainer::evaluate(&arch, &ckpt, &val)?.mean.dice;
        trainer::train_ssl(&arch, &mut ckpt, &train, None, &mut ())?;
        let ssl = trainer::evaluate(&arch, &ckpt, &val)?.mean.dice;
        let tags: String = branches.iter().map(|b| b.tag()).collect();
        println!("{tags}: pretrain {base:.2} -> ssl {ssl:.2} ({:.0?})", start.elapsed());
    }
    Ok(())
}
