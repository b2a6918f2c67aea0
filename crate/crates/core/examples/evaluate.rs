//! Trains briefly, saves a checkpoint, reloads it and evaluates: flip-averaged
//! CCC/RMSE, expression accuracy and the metrics CSV.
//!
//! `cargo run --release --example evaluate -- [key=value ...]`

use emoattn::data::synth_dataset;
use emoattn::train::{classify_eval, evaluate, train, write_metrics_csv, Checkpoint, MetricRow, TrainConfig};

fn main() -> emoattn::Result<()> {
    let mut config = TrainConfig::from_text("epochs = 3\nbatch_size = 8\nlr = 3e-4")?;
    for arg in std::env::args().skip(1) {
        config.apply_text(&arg)?;
    }
    let (train_set, val_set) = synth_dataset(160, 9).split_at(128);
    let outcome = train(&config, &train_set, Some(&val_set), &mut |r| {
        eprintln!("epoch {} loss {:.4}", r.epoch, r.train_loss);
    })?;

    let dir = std::env::temp_dir().join("emoattn_evaluate_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("best.ckpt");
    outcome.best.save(&path)?;
    let ck = Checkpoint::load(&path)?;
    println!("reloaded {} (epoch {}), identical: {}", path.display(), ck.epoch, ck == outcome.best);

    let report = evaluate(&ck.network, &val_set)?;
    let (acc, labeled) = classify_eval(&ck.network, &val_set)?;
    println!("accuracy {acc:.3} on {labeled} samples");
    let row = MetricRow {
        split: "val".into(),
        epoch: ck.epoch,
        report,
    };
    write_metrics_csv(std::io::stdout().lock(), ck.config.head_mode, &[row])?;
    Ok(())
}
