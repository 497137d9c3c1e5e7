//! Trains PART, DCT and OURS on the synthetic benchmark and prints the
//! ensemble Dice per seed.
//!
//! ```text
//! cargo run --release --example ordering -- [epochs] [seeds|s1,s2,..] [methods] [config]
//! ```
//!
//! The optional config file uses the CLI key format and overrides training
//! settings; data settings are fixed.

use std::time::Instant;

use uaseg::cli::RunConfig;
use uaseg::data::{DatasetBundle, SplitSpec, SyntheticSpec};
use uaseg::trainer::{train, Method, TrainConfig};

fn main() -> uaseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(40, |s| s.parse().expect("epochs"));
    // A bare number N means seeds 0..N; a comma list names seeds directly.
    let seeds: Vec<u64> = match args.get(2) {
        None => (0..3).collect(),
        Some(s) if s.contains(',') => s.split(',').map(|v| v.parse().expect("seed")).collect(),
        Some(s) => (0..s.parse().expect("seeds")).collect(),
    };
    let methods: Vec<Method> = args
        .get(3)
        .map_or("part,dct,ours", String::as_str)
        .split(',')
        .map(|m| m.parse())
        .collect::<uaseg::Result<_>>()?;
    let base = match args.get(4) {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?.train_config(4),
        None => TrainConfig::default(),
    };
    for seed in seeds {
        let bundle = DatasetBundle::synthesize(
            &SyntheticSpec { seed, ..Default::default() },
            50,
            &SplitSpec { label_ratio: 0.1, split_seed: seed },
        )?;
        for &method in &methods {
            let start = Instant::now();
            let cfg = TrainConfig { epochs, method, global_seed: seed, ..base.clone() };
            let r = train(cfg, &bundle)?;
            let first = r.epochs.first().and_then(|e| e.test_uncertainty);
            let last = r.epochs.last().and_then(|e| e.test_uncertainty);
            println!(
                "seed {seed} {method:<6} vot {:6.2} avg {:6.2} hd {:5.2} u {:?} -> {:?} sup {:.3} ({:.1}s)",
                r.vot.mean_dsc,
                r.avg.mean_dsc,
                r.vot.mean_hd,
                first,
                last,
                r.epochs.last().unwrap().models[0].sup,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
