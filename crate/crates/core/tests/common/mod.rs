//! Helpers shared by the integration tests.

#![allow(dead_code)]

use emoattn::attention::MaskMode;
use emoattn::data::{make_batch, CropSpec, Dataset, Sample};
use emoattn::diffcore::{grad_check, Activation, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use emoattn::heads::{total_loss, HeadMode, Labels, LossWeights};
use emoattn::model::{AttentionMode, ModelConfig, Network};
use emoattn::objective::{RegressionLoss, TukeyConfig};
use emoattn::Result;

pub const GRAD_TOL: f64 = 1e-3;

pub fn wave(shape: &[usize], phase: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|i| ((i as f64) * 0.7137 + phase).sin() * 0.9).collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces any tensor to a scalar with position-dependent weights, so every
/// output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let w = wave(g.value(v).shape(), 0.3);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check(params: Vec<(&str, Tensor)>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> GradCheckReport {
    let params: Vec<(String, Tensor)> = params.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    grad_check(f, &params, &GradCheckOptions::default()).unwrap()
}

/// One finite-difference check per operation (several for ops with modes).
pub fn op_checks(op: &str) -> Vec<GradCheckReport> {
    match op {
        "conv2d" => [(1, 1), (2, 0), (1, 0)]
            .into_iter()
            .map(|(stride, padding)| {
                check(
                    vec![("x", wave(&[2, 2, 5, 5], 0.0)), ("k", wave(&[3, 2, 3, 3], 1.0)), ("b", wave(&[3], 2.0))],
                    |g, p| {
                        let y = g.conv2d(p[0], p[1], p[2], stride, padding)?;
                        weighted_sum(g, y)
                    },
                )
            })
            .collect(),
        "maxpool2d" => {
            // distinct values, so no ties within a window
            let x = Tensor::new(&[1, 2, 4, 6], (0..48).map(|i| ((i * 37 % 48) as f64) * 0.1).collect()).unwrap();
            vec![check(vec![("x", x)], |g, p| {
                let y = g.maxpool2d(p[0], 2, 2)?;
                weighted_sum(g, y)
            })]
        }
        "upsample_bilinear" => vec![check(vec![("x", wave(&[1, 2, 3, 3], 0.0))], |g, p| {
            let y = g.upsample_bilinear(p[0], 6, 5)?;
            weighted_sum(g, y)
        })],
        "global_avg_pool+dense" => vec![check(
            vec![("x", wave(&[2, 3, 4, 4], 0.0)), ("w", wave(&[3, 4], 1.0)), ("b", wave(&[4], 2.0))],
            |g, p| {
                let z = g.global_avg_pool(p[0])?;
                let y = g.dense(z, p[1], p[2])?;
                weighted_sum(g, y)
            },
        )],
        "matmul" => vec![check(vec![("a", wave(&[3, 4], 0.0)), ("b", wave(&[4, 2], 1.0))], |g, p| {
            let y = g.matmul(p[0], p[1])?;
            weighted_sum(g, y)
        })],
        "activations" => [Activation::Relu, Activation::Sigmoid, Activation::Tanh]
            .into_iter()
            .map(|kind| {
                check(vec![("x", wave(&[3, 5], 0.1))], move |g, p| {
                    let y = g.activation(p[0], kind);
                    weighted_sum(g, y)
                })
            })
            .collect(),
        "softmax" => vec![check(vec![("x", wave(&[3, 4], 0.0))], |g, p| {
            let y = g.softmax(p[0]);
            weighted_sum(g, y)
        })],
        "elementwise" => vec![check(vec![("a", wave(&[2, 3], 0.0)), ("b", wave(&[2, 3], 1.0))], |g, p| {
            let s = g.add(p[0], p[1])?;
            let m = g.mul(s, p[1])?;
            let t = g.add_scalar(m, 0.25);
            let u = g.scale(t, -1.5);
            weighted_sum(g, u)
        })],
        "columns" => vec![check(
            vec![("a", wave(&[3, 2], 0.0)), ("b", wave(&[3, 4], 1.0)), ("c", wave(&[3, 6], 2.0))],
            |g, p| {
                let cat = g.concat_cols(&[p[0], p[1]])?;
                let mid = g.slice_cols(cat, 1, 3)?;
                let d = g.row_dot(cat, p[2])?;
                let scaled = g.scale_rows(mid, d)?;
                weighted_sum(g, scaled)
            },
        )],
        "normalize_rows" => vec![check(vec![("x", wave(&[3, 5], 0.4))], |g, p| {
            let y = g.normalize_rows(p[0], 1e-5)?;
            weighted_sum(g, y)
        })],
        "cross_entropy" => vec![check(vec![("x", wave(&[4, 7], 0.0))], |g, p| {
            g.cross_entropy(p[0], &[Some(1), None, Some(6), Some(0)])
        })],
        // with c = 0.8 some residuals fall beyond the cutoff
        "residual_loss" => [RegressionLoss::Mse, RegressionLoss::Tukey(TukeyConfig::new(0.8).unwrap())]
            .into_iter()
            .map(|loss| {
                check(vec![("x", wave(&[5, 1], 0.0))], move |g, p| {
                    g.residual_loss(p[0], &[0.5, -0.9, 0.1, 0.9, -0.2], loss.penalty())
                })
            })
            .collect(),
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: [&str; 12] = [
    "conv2d",
    "maxpool2d",
    "upsample_bilinear",
    "global_avg_pool+dense",
    "matmul",
    "activations",
    "softmax",
    "elementwise",
    "columns",
    "normalize_rows",
    "cross_entropy",
    "residual_loss",
];

pub fn tiny_config(attention_mode: AttentionMode, blocks: usize, head_mode: HeadMode) -> ModelConfig {
    ModelConfig {
        blocks,
        attention_mode,
        head_mode,
        n_dim: 5,
        n_cat: 4,
        embed_d: 3,
        rnn_u: 3,
        channels: [2, 3, 4],
        input_size: 16,
    }
}

/// Checks the complete weighted objective of a small network on every parameter tensor.
pub fn full_model_check(cfg: ModelConfig, loss: RegressionLoss) -> GradCheckReport {
    let net = Network::new(cfg.clone(), 5).unwrap();
    let images = wave(&[2, 1, 16, 16], 0.5);
    let labels = Labels {
        valence: Some(vec![0.4, -0.6]),
        arousal: Some(vec![-0.3, 0.8]),
        expression: Some(vec![Some(3), Some(0)]),
    };
    let params: Vec<(String, Tensor)> = net.named_params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    grad_check(
        |g, _| {
            let x = g.constant(images.clone());
            let out = net.forward(g, x, MaskMode::Learned)?;
            Ok(total_loss(g, &out.heads, &labels, LossWeights::default(), cfg.head_mode, loss)?.total)
        },
        &params,
        &GradCheckOptions {
            max_elements: Some(12),
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn default_full_model_check() -> GradCheckReport {
    full_model_check(
        tiny_config(AttentionMode::Level2, 2, HeadMode::TwoStage),
        RegressionLoss::Tukey(TukeyConfig::default()),
    )
}

pub fn describe_failures(r: &GradCheckReport) -> String {
    format!(
        "max relative error {:.3e}: {:?}",
        r.max_rel_error(),
        r.params.iter().filter(|p| p.max_rel_error > GRAD_TOL).map(|p| &p.name).collect::<Vec<_>>()
    )
}

pub fn center_batch(data: &Dataset) -> emoattn::data::Batch {
    let refs: Vec<&Sample> = data.samples.iter().collect();
    make_batch(&refs, &vec![CropSpec::CENTER; refs.len()]).unwrap()
}
