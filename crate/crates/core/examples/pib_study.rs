//! Train the gap and lazystrike heads side by side on the synthetic
//! foreground dataset and print held-out accuracy and Point-in-Box per epoch.
//!
//! Usage: `cargo run --release --example pib_study -- [seeds] [epochs] [noise]`

use std::time::Instant;

use lazystrike::vit::{gen_synthetic, train_from, HeadType, SynthConfig, ToyViTConfig, ToyViTParams, TrainOptions};
use lazystrike::Execution;

fn main() -> lazystrike::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let noise: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    for seed in 0..seeds {
        let data = gen_synthetic(1200, &SynthConfig { noise_level: noise, seed, ..Default::default() })?;
        let (train_set, heldout) = data.split_at(1000);
        for head in [HeadType::Gap, HeadType::LazyStrike] {
            let cfg = ToyViTConfig { head, seed, ..Default::default() };
            let opts = TrainOptions { epochs, lr, seed, ..Default::default() };
            let start = Instant::now();
            let r = train_from(ToyViTParams::init(&cfg)?, &cfg, train_set, heldout, &opts, Execution::default(), |e| {
                println!("seed {seed} {head:>10} epoch {:>2} loss {:.4} top1 {:.3} pib {:.3}", e.epoch, e.loss, e.top1, e.pib)
            })?;
            let last = r.log.last().unwrap();
            println!("seed {seed} {head:>10} final top1 {:.3} pib {:.3} ({:.1?})", last.top1, last.pib, start.elapsed());
        }
    }
    Ok(())
}
