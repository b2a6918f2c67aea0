//! The two-stage heads on a hand-made fused vector, and the weighted
//! objective for each head mode.
//!
//! `cargo run --example multitask_heads`

use emoattn::diffcore::{Graph, Tensor};
use emoattn::heads::{total_loss, HeadMode, HeadParams, Labels, LossWeights};
use emoattn::objective::{RegressionLoss, TukeyConfig};

fn main() -> emoattn::Result<()> {
    let fused = Tensor::new(&[2, 6], (0..12).map(|i| ((i as f64) * 0.9).cos()).collect())?;
    let labels = Labels {
        valence: Some(vec![0.5, -0.4]),
        arousal: Some(vec![0.1, 0.7]),
        expression: Some(vec![Some(1), Some(4)]),
    };
    let weights = LossWeights::default();
    println!("alpha {} beta {}", weights.alpha, weights.beta);
    for mode in HeadMode::ALL {
        let heads = HeadParams::new(mode, 6, 8, 4, 1)?;
        let mut g = Graph::new();
        let x = g.constant(fused.clone());
        let out = heads.forward(&mut g, x)?;
        let loss = total_loss(&mut g, &out, &labels, weights, mode, RegressionLoss::Tukey(TukeyConfig::default()))?;
        let get = |v: Option<emoattn::diffcore::Var>| {
            v.map(|v| format!("{:.4}", g.value(v).item())).unwrap_or_else(|| "-".into())
        };
        let (wc, wa, wv) = weights.term_weights(mode);
        println!(
            "{:<8} weights ({wc:.2}, {wa:.2}, {wv:.2})  clf {}  arousal {}  valence {}  total {:.4}",
            mode.as_str(),
            get(loss.clf),
            get(loss.arousal),
            get(loss.valence),
            g.value(loss.total).item()
        );
    }
    println!("combine(1, 2, 4) = {}", weights.combine(1.0, 2.0, 4.0));
    Ok(())
}
