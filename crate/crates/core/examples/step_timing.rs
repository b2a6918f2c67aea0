//! Times forward+backward of the default model on a 16-image batch.

use std::time::Instant;

use emoattn::attention::MaskMode;
use emoattn::diffcore::{Graph, Tensor};
use emoattn::heads::{total_loss, Labels, LossWeights};
use emoattn::model::{ModelConfig, Network};
use emoattn::objective::RegressionLoss;

fn main() -> emoattn::Result<()> {
    let cfg = ModelConfig::default();
    let net = Network::new(cfg.clone(), 0)?;
    let n = 16;
    let s = cfg.input_size;
    let images = Tensor::new(&[n, 1, s, s], (0..n * s * s).map(|i| ((i % 97) as f64) / 97.0).collect())?;
    let labels = Labels {
        valence: Some(vec![0.1; n]),
        arousal: Some(vec![-0.2; n]),
        expression: Some(vec![Some(1); n]),
    };
    for _ in 0..3 {
        let t = Instant::now();
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = net.forward(&mut g, x, MaskMode::Learned)?;
        let t_fwd = t.elapsed();
        let loss = total_loss(&mut g, &out.heads, &labels, LossWeights::default(), cfg.head_mode, RegressionLoss::Tukey(Default::default()))?;
        g.backward(loss.total)?;
        println!("forward {:?}, forward+backward {:?}, loss {:.4}", t_fwd, t.elapsed(), g.value(loss.total).item());
    }
    Ok(())
}
