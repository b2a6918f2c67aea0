//! Runs one residual attention block on a random feature map and shows how the
//! mask rescales the trunk: `H = (1 + M) * T`.
//!
//! `cargo run --example attention_block`

use emoattn::attention::{AttentionBlockParams, MaskMode};
use emoattn::diffcore::{Graph, Tensor};

fn stats(name: &str, v: &[f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    println!("{name:<8} mean {mean:+.4}  min {lo:+.4}  max {hi:+.4}");
}

fn main() -> emoattn::Result<()> {
    let block = AttentionBlockParams::new("demo", 8, (24, 24), 2, 11)?;
    let mut g = Graph::new();
    let data = (0..8 * 24 * 24).map(|i| ((i as f64) * 0.173).sin()).collect();
    let x = g.constant(Tensor::new(&[1, 8, 24, 24], data)?);

    let out = block.forward(&mut g, x, MaskMode::Learned)?;
    stats("trunk", g.value(out.trunk).data());
    stats("mask", g.value(out.mask).data());
    stats("output", g.value(out.output).data());

    let gain: Vec<f64> = g
        .value(out.output)
        .data()
        .iter()
        .zip(g.value(out.trunk).data())
        .filter(|(_, t)| t.abs() > 1e-9)
        .map(|(h, t)| h / t)
        .collect();
    stats("H / T", &gain);

    // the test seam: a zero mask leaves the trunk untouched
    let off = block.forward(&mut g, x, MaskMode::Constant(0.0))?;
    println!("M = 0 reproduces T: {}", g.value(off.output).data() == g.value(off.trunk).data());
    Ok(())
}
