//! Finite-difference check of the complete training objective for a config.

use super::config::TrainConfig;
use crate::attention::MaskMode;
use crate::data::Batch;
use crate::diffcore::{grad_check, GradCheckOptions, GradCheckReport};
use crate::error::Result;
use crate::heads::total_loss;
use crate::model::Network;
use crate::nn::Module;

/// Checks the gradient of the combined loss on `batch` with respect to every
/// parameter of a freshly initialized network for `config`. Batch images must
/// match `config`'s input size.
///
/// Biases start at zero, so a unit whose inputs are all zero (a dead region
/// after relu and pooling) sits exactly on the relu kink, where central
/// differences see half a slope at any step size. Every bias is moved by a
/// small deterministic offset first to check at a generic point.
pub fn objective_gradcheck(config: &TrainConfig, batch: &Batch, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut net = Network::new(config.model_config(), config.seed)?;
    net.visit_mut(&mut |p| {
        if p.name.ends_with(".bias") {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += BIAS_OFFSET * (1.0 + (i % 7) as f64 / 7.0);
            }
        }
    });
    objective_gradcheck_for(&net, config, batch, opts)
}

const BIAS_OFFSET: f64 = 0.05;

/// [`objective_gradcheck`] at the current parameters of `net`.
pub fn objective_gradcheck_for(
    net: &Network,
    config: &TrainConfig,
    batch: &Batch,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut params = Vec::new();
    net.visit(&mut |p| params.push((p.name.clone(), p.value.clone())));
    let loss = config.regression_loss()?;
    grad_check(
        |g, _| {
            let x = g.constant(batch.images.clone());
            let out = net.forward(g, x, MaskMode::Learned)?;
            Ok(total_loss(g, &out.heads, &batch.labels, config.loss_weights(), config.head_mode, loss.clone())?.total)
        },
        &params,
        opts,
    )
}
