//! Position-level attention: the residual attention block.
//!
//! A trunk of ordinary conv+relu layers produces `T(x)`. A mask branch pools
//! down, upsamples back with bilinear interpolation and ends in a sigmoid gate,
//! producing `M(x)` in (0,1) with the trunk's shape. The block emits
//! `H(x) = (1 + M(x)) * T(x)` elementwise.

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvParams, Module, Param};

/// How the mask branch participates in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Normal operation: the mask is computed and differentiated.
    Learned,
    /// The mask is computed but treated as a constant during backprop.
    Frozen,
    /// Test seam: the mask is replaced by this constant everywhere.
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockParams {
    pub trunk: Vec<ConvParams>,
    pub mask_down: Vec<ConvParams>,
    pub mask_up: Vec<ConvParams>,
    pub mask_gate: ConvParams,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub output: Var,
    pub trunk: Var,
    pub mask: Var,
}

impl AttentionBlockParams {
    /// Two 3x3 trunk layers and a `pool_stages`-deep hourglass mask, all
    /// `channels` wide. Fails if `height x width` cannot be halved `pool_stages` times.
    pub fn new(
        prefix: &str,
        channels: usize,
        (height, width): (usize, usize),
        pool_stages: usize,
        seed: u64,
    ) -> Result<Self> {
        check_divisible(height, width, pool_stages)?;
        let conv = |name: String, size| ConvParams::he(&name, channels, channels, size, seed);
        Ok(AttentionBlockParams {
            trunk: (0..2).map(|i| conv(format!("{prefix}.trunk.{i}"), 3)).collect(),
            mask_down: (0..pool_stages)
                .map(|i| conv(format!("{prefix}.mask.down.{i}"), 3))
                .collect(),
            mask_up: (0..pool_stages)
                .map(|i| conv(format!("{prefix}.mask.up.{i}"), 3))
                .collect(),
            mask_gate: conv(format!("{prefix}.mask.gate"), 1),
        })
    }

    pub fn pool_stages(&self) -> usize {
        self.mask_down.len()
    }

    /// `T(x)`: conv + relu for every trunk layer, spatial size preserved.
    pub fn trunk_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.trunk {
            let z = layer.forward(g, h)?;
            h = g.relu(z);
        }
        Ok(h)
    }

    /// `M(x)`: max-pool descents, bilinear ascents back to the input size, then
    /// a 1x1 conv and a sigmoid gate.
    pub fn mask_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.mask_down.len() != self.mask_up.len() {
            return Err(Error::invalid(
                "mask_forward",
                format!(
                    "hourglass has {} descents but {} ascents",
                    self.mask_down.len(),
                    self.mask_up.len()
                ),
            ));
        }
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("mask_forward", "rank", 4, shape.len()));
        }
        check_divisible(shape[2], shape[3], self.pool_stages())?;

        let mut sizes = Vec::with_capacity(self.pool_stages());
        let mut h = x;
        for layer in &self.mask_down {
            let s = g.value(h).shape();
            sizes.push((s[2], s[3]));
            let pooled = g.maxpool2d(h, 2, 2)?;
            let z = layer.forward(g, pooled)?;
            h = g.relu(z);
        }
        for (layer, &(oh, ow)) in self.mask_up.iter().zip(sizes.iter().rev()) {
            let up = g.upsample_bilinear(h, oh, ow)?;
            let z = layer.forward(g, up)?;
            h = g.relu(z);
        }
        let z = self.mask_gate.forward(g, h)?;
        Ok(g.sigmoid(z))
    }

    /// `H(x) = (1 + M(x)) * T(x)`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: MaskMode) -> Result<BlockOutput> {
        let trunk = self.trunk_forward(g, x)?;
        let mask = match mode {
            MaskMode::Learned => self.mask_forward(g, x)?,
            MaskMode::Frozen => {
                let m = self.mask_forward(g, x)?;
                g.detach(m)
            }
            MaskMode::Constant(v) => {
                let shape = g.value(trunk).shape().to_vec();
                g.constant(Tensor::full(&shape, v))
            }
        };
        let output = combine(g, trunk, mask)?;
        Ok(BlockOutput { output, trunk, mask })
    }
}

/// Residual gating `(1 + mask) * trunk`.
pub fn combine(g: &mut Graph, trunk: Var, mask: Var) -> Result<Var> {
    let gate = g.add_scalar(mask, 1.0);
    g.mul(gate, trunk).map_err(|e| match e {
        Error::Shape { dim, expected, actual, .. } => Error::Shape {
            op: "attention_block",
            dim: format!("mask vs trunk {dim}"),
            expected,
            actual,
        },
        other => other,
    })
}

fn check_divisible(height: usize, width: usize, pool_stages: usize) -> Result<()> {
    let factor = 1usize << pool_stages;
    if height % factor != 0 || width % factor != 0 {
        return Err(Error::invalid(
            "attention_block",
            format!("spatial size {height}x{width} is not divisible by 2^{pool_stages}"),
        ));
    }
    Ok(())
}

impl Module for AttentionBlockParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.trunk.visit(f);
        self.mask_down.visit(f);
        self.mask_up.visit(f);
        self.mask_gate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.trunk.visit_mut(f);
        self.mask_down.visit_mut(f);
        self.mask_up.visit_mut(f);
        self.mask_gate.visit_mut(f);
    }
}
