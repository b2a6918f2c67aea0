//! Second-level attention on an untrained network: per-level weights from
//! the Bi-RNN self-attention pooling for a few synthetic faces.
//!
//! `cargo run --example level_fusion`

use emoattn::attention::MaskMode;
use emoattn::data::{make_batch, synth_dataset, CropSpec, Sample};
use emoattn::diffcore::Graph;
use emoattn::model::Network;
use emoattn::train::TrainConfig;

fn main() -> emoattn::Result<()> {
    let mut config = TrainConfig::default();
    if let Some(blocks) = std::env::args().nth(1) {
        config.set("blocks", &blocks)?;
    }
    let net = Network::new(config.model_config(), 3)?;
    let data = synth_dataset(4, 5);
    let refs: Vec<&Sample> = data.samples.iter().collect();
    let batch = make_batch(&refs, &[CropSpec::CENTER; 4])?;

    let mut g = Graph::new();
    let x = g.constant(batch.images);
    let out = net.forward(&mut g, x, MaskMode::Learned)?;
    let w = out.level_weights.expect("level2 attention has level weights");
    let levels = g.value(w).shape()[1];
    println!("{} blocks, {levels} levels", config.blocks);
    for (i, row) in g.value(w).data().chunks(levels).enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("sample {i}: weights [{}] sum {:.6}", cells.join(", "), row.iter().sum::<f64>());
    }
    Ok(())
}
