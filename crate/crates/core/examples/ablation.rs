//! Runs a small ablation grid on corrupted synthetic data and prints the CSV.
//!
//! `cargo run --release --example ablation -- "loss=mse,tukey" epochs=4 seeds=0 samples=400`
//!
//! The first argument is the grid; `seeds=`, `samples=` and `corruption=`
//! set the experiment, anything else is a config override.

use std::time::Instant;

use emoattn::train::{ablate, parse_grid, write_ablation_csv, AblationSpec};

fn main() -> emoattn::Result<()> {
    let mut args = std::env::args().skip(1);
    let grid = args.next().unwrap_or_else(|| "loss=mse,tukey".into());
    let mut spec = AblationSpec {
        axes: parse_grid(&grid)?,
        ..AblationSpec::default()
    };
    for arg in args {
        match arg.split_once('=') {
            Some(("seeds", v)) => {
                spec.seeds = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| emoattn::Error::Config(format!("bad seed `{s}`"))))
                    .collect::<emoattn::Result<_>>()?
            }
            Some(("samples", v)) => spec.samples = v.parse().map_err(|_| emoattn::Error::Config(arg.clone()))?,
            Some(("corruption", v)) => spec.corruption = v.parse().map_err(|_| emoattn::Error::Config(arg.clone()))?,
            _ => spec.base.apply_text(&arg)?,
        }
    }
    let start = Instant::now();
    let rows = ablate(&spec, &mut |row, seed, mode, r| {
        let ccc = r.val.and_then(|v| v.ccc_mean()).unwrap_or(f64::NAN);
        eprintln!(
            "row {row} seed {seed} {mode} epoch {} loss {:.4} val ccc {ccc:.4} ({:.0?})",
            r.epoch,
            r.train_loss,
            start.elapsed()
        );
    })?;
    write_ablation_csv(std::io::stdout().lock(), &spec.axes, &rows)?;
    Ok(())
}
