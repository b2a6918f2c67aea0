//! The full network: a three-stage conv backbone with residual attention
//! blocks, layer-level fusion over the block outputs, and the multi-task heads.

use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionBlockParams, MaskMode};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::heads::{HeadMode, HeadOutput, HeadParams, NUM_CLASSES};
use crate::nn::{ConvParams, Module, Param};

/// Which attention levels are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Plain backbone, global average pooled.
    None,
    /// Residual attention blocks only.
    Level1,
    /// Attention blocks plus the layer-level fusion.
    Level2,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Level1 => "level1",
            AttentionMode::Level2 => "level2",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "level1" => Ok(AttentionMode::Level1),
            "level2" => Ok(AttentionMode::Level2),
            other => Err(Error::Unknown {
                what: "attention_mode",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub attention_mode: AttentionMode,
    pub head_mode: HeadMode,
    pub n_dim: usize,
    pub n_cat: usize,
    pub embed_d: usize,
    pub rnn_u: usize,
    /// Output channels of the three backbone stages.
    pub channels: [usize; 3],
    /// Side length of the square grayscale input.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 2,
            attention_mode: AttentionMode::Level2,
            head_mode: HeadMode::TwoStage,
            n_dim: 256,
            n_cat: 128,
            embed_d: 64,
            rnn_u: 64,
            channels: [16, 32, 64],
            input_size: 48,
        }
    }
}

/// Deepest mask hourglass used by any block.
const MAX_POOL_STAGES: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.attention_mode != AttentionMode::None && !(1..=3).contains(&self.blocks) {
            return bad(format!("blocks must be 1, 2 or 3, got {}", self.blocks));
        }
        if self.input_size % 8 != 0 || self.input_size < 16 {
            return bad(format!(
                "input_size must be a multiple of 8 and at least 16, got {}",
                self.input_size
            ));
        }
        if [self.n_dim, self.n_cat, self.embed_d, self.rnn_u].contains(&0) || self.channels.contains(&0) {
            return bad("widths must be positive".into());
        }
        Ok(())
    }

    pub fn active_blocks(&self) -> usize {
        match self.attention_mode {
            AttentionMode::None => 0,
            _ => self.blocks,
        }
    }

    /// Spatial side after backbone stage `k` (1-based).
    pub fn stage_size(&self, k: usize) -> usize {
        self.input_size >> k
    }
}

/// Number of 2x2 poolings a `size x size` map supports, capped at the
/// hourglass depth.
fn pool_stages_for(size: usize) -> usize {
    (size.trailing_zeros() as usize).min(MAX_POOL_STAGES)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub stages: Vec<ConvParams>,
    pub blocks: Vec<AttentionBlockParams>,
    pub fusion: Option<FusionParams>,
    pub heads: HeadParams,
}

#[derive(Clone, Copy, Debug)]
pub struct NetworkOutput {
    pub heads: HeadOutput,
    pub level_weights: Option<Var>,
}

/// Plain per-sample predictions, for evaluation code.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub valence: Option<Vec<f64>>,
    pub arousal: Option<Vec<f64>>,
    /// Row-major `[N, 7]`.
    pub logits: Option<Vec<f64>>,
}

impl Predictions {
    pub fn predicted_classes(&self) -> Option<Vec<usize>> {
        self.logits.as_ref().map(|l| {
            l.chunks(NUM_CLASSES)
                .map(|row| {
                    // first maximum wins
                    let mut best = 0;
                    for (j, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect()
        })
    }
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut in_c = 1;
        let stages = config
            .channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let conv = ConvParams::he(&format!("backbone.stage{}", k + 1), in_c, c, 3, seed);
                in_c = c;
                conv
            })
            .collect();
        let blocks = (0..config.active_blocks())
            .map(|k| {
                let size = config.stage_size(k + 1);
                AttentionBlockParams::new(
                    &format!("block{}", k + 1),
                    config.channels[k],
                    (size, size),
                    pool_stages_for(size),
                    seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let fusion = (config.attention_mode == AttentionMode::Level2)
            .then(|| FusionParams::new(&tap_channels(&config), config.embed_d, config.rnn_u, seed));
        let fused = fusion
            .as_ref()
            .map_or(config.channels[2], FusionParams::output_width);
        let heads = HeadParams::new(config.head_mode, fused, config.n_dim, config.n_cat, seed)?;
        Ok(Network {
            config,
            stages,
            blocks,
            fusion,
            heads,
        })
    }

    /// Runs the network on `[N, 1, S, S]` images.
    pub fn forward(&self, g: &mut Graph, images: Var, mask: MaskMode) -> Result<NetworkOutput> {
        let shape = g.value(images).shape().to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::invalid(
                "network",
                format!("expected [N,1,{s},{s}] images, got {shape:?}"),
            ));
        }
        let mut taps = Vec::new();
        let mut h = images;
        for (k, stage) in self.stages.iter().enumerate() {
            let z = stage.forward(g, h)?;
            let a = g.relu(z);
            h = g.maxpool2d(a, 2, 2)?;
            if let Some(block) = self.blocks.get(k) {
                h = block.forward(g, h, mask)?.output;
                taps.push(h);
            }
        }
        if self.blocks.len() < self.stages.len() {
            taps.push(h);
        }
        let (fused, level_weights) = match &self.fusion {
            Some(f) => {
                let out = f.forward(g, &taps)?;
                (out.pooled, Some(out.weights))
            }
            None => (g.global_avg_pool(h)?, None),
        };
        let heads = self.heads.forward(g, fused)?;
        Ok(NetworkOutput { heads, level_weights })
    }

    /// Inference without gradients.
    pub fn predict(&self, images: &Tensor) -> Result<Predictions> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x, MaskMode::Learned)?;
        let take = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
        Ok(Predictions {
            valence: take(out.heads.valence),
            arousal: take(out.heads.arousal),
            logits: take(out.heads.stage1.clf_logits),
        })
    }

    pub fn named_params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }
}

fn tap_channels(config: &ModelConfig) -> Vec<usize> {
    let mut taps: Vec<usize> = config.channels[..config.active_blocks()].to_vec();
    if config.active_blocks() < 3 {
        taps.push(config.channels[2]);
    }
    taps
}

impl Module for Network {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.stages.visit(f);
        self.blocks.visit(f);
        self.fusion.visit(f);
        self.heads.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stages.visit_mut(f);
        self.blocks.visit_mut(f);
        self.fusion.visit_mut(f);
        self.heads.visit_mut(f);
    }
}
