//! Overfits the default model to 64 synthetic faces and reports training-set
//! CCC, RMSE and expression accuracy.
//!
//! `cargo run --release --example train_memorize -- [key=value ...]`

use std::time::Instant;

use emoattn::data::synth_dataset;
use emoattn::train::{classify_eval, evaluate, train, TrainConfig};

fn main() -> emoattn::Result<()> {
    let data = synth_dataset(64, 42);
    let mut config = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    for arg in std::env::args().skip(1) {
        config.apply_text(&arg)?;
    }
    let start = Instant::now();
    let outcome = train(&config, &data, None, &mut |r| {
        if r.epoch % 10 == 0 || r.epoch == 1 {
            println!(
                "epoch {:>3}  lr {:.0e}  loss {:.5}  ({:.0?})",
                r.epoch,
                r.lr,
                r.train_loss,
                start.elapsed()
            );
        }
    })?;
    let net = &outcome.last.network;
    let report = evaluate(net, &data)?;
    let (acc, _) = classify_eval(net, &data)?;
    println!(
        "train CCC valence {:.4} arousal {:.4}, RMSE {:.4}, expression accuracy {:.3}, {:.0?}",
        report.ccc_valence.unwrap(),
        report.ccc_arousal.unwrap(),
        report.rmse_mean().unwrap(),
        acc,
        start.elapsed()
    );
    Ok(())
}
