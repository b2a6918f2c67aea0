//! Layer-level attention over backbone taps.
//!
//! Each tapped feature map is projected by a 1x1 convolution to a common width
//! `d` and globally average pooled. The resulting level sequence (shallow to
//! deep) runs through a bidirectional tanh RNN, and the outputs are pooled
//! with softmax weights over the dot-product scores `<h_i, y_i>`.

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvParams, DenseParams, Module, Param};

/// Embeddings `x_1..x_l`, each `[N, d]`, ordered shallowest first.
#[derive(Clone, Debug)]
pub struct LevelSequence {
    levels: Vec<Var>,
    width: usize,
}

impl LevelSequence {
    pub fn new(g: &Graph, levels: Vec<Var>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::invalid("level_sequence", "empty sequence"))?;
        let shape = g.value(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("level_sequence", "rank", 2, shape.len()));
        }
        for v in &levels[1..] {
            let s = g.value(*v).shape();
            if s != shape.as_slice() {
                return Err(Error::shape("level_sequence", "embedding width", shape[1], s[1]));
            }
        }
        Ok(LevelSequence {
            levels,
            width: shape[1],
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn levels(&self) -> &[Var] {
        &self.levels
    }

    pub fn reversed(&self) -> Self {
        LevelSequence {
            levels: self.levels.iter().rev().copied().collect(),
            width: self.width,
        }
    }
}

/// Hidden states `h_i = [h_fwd,i ; h_bwd,i]` and outputs `y_i`, both `[N, 2u]`.
#[derive(Clone, Debug)]
pub struct BiRnnState {
    pub hidden: Vec<Var>,
    pub outputs: Vec<Var>,
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
}

/// Vanilla cell `h_i = tanh(x_i·W_x + b + h_{i-1}·W_h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnCell {
    pub input: DenseParams,
    pub recurrent: Param,
}

impl RnnCell {
    pub fn xavier(prefix: &str, d: usize, u: usize, seed: u64) -> Self {
        let name = format!("{prefix}.recurrent");
        let recurrent = crate::nn::xavier_uniform(&name, &[u, u], u, u, seed);
        RnnCell {
            input: DenseParams::xavier(&format!("{prefix}.input"), d, u, seed),
            recurrent: Param::new(name, recurrent),
        }
    }

    pub fn units(&self) -> usize {
        self.input.d_out()
    }

    fn run(&self, g: &mut Graph, seq: &[Var]) -> Result<Vec<Var>> {
        let mut states: Vec<Var> = Vec::with_capacity(seq.len());
        for &x in seq {
            let mut pre = self.input.forward(g, x)?;
            if let Some(&prev) = states.last() {
                let wh = self.recurrent.bind(g);
                let rec = g.matmul(prev, wh)?;
                pre = g.add(pre, rec)?;
            }
            states.push(g.tanh(pre));
        }
        Ok(states)
    }
}

impl Module for RnnCell {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.input.visit(f);
        f(&self.recurrent);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.input.visit_mut(f);
        f(&mut self.recurrent);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiRnnParams {
    pub forward: RnnCell,
    pub backward: RnnCell,
    /// `y_i = tanh(h_i·W_o + b_o)`, width `2u -> 2u`.
    pub output: DenseParams,
}

impl BiRnnParams {
    pub fn xavier(d: usize, u: usize, seed: u64) -> Self {
        BiRnnParams {
            forward: RnnCell::xavier("fusion.rnn.fwd", d, u, seed),
            backward: RnnCell::xavier("fusion.rnn.bwd", d, u, seed),
            output: DenseParams::xavier("fusion.attn.proj", 2 * u, 2 * u, seed),
        }
    }
}

impl Module for BiRnnParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.forward.visit(f);
        self.backward.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.forward.visit_mut(f);
        self.backward.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// `GAP(conv1x1(feature_map))`: one `d`-vector per sample.
pub fn level_embed(g: &mut Graph, feature_map: Var, proj: &ConvParams) -> Result<Var> {
    let channels = g.value(feature_map).dim("level_embed", 1)?;
    if channels != proj.in_channels() {
        return Err(Error::shape("level_embed", "channels", proj.in_channels(), channels));
    }
    let z = proj.forward(g, feature_map)?;
    g.global_avg_pool(z)
}

/// Keeps the recurrent cell out of saturation as backbone activations grow.
pub const EMBED_NORM_EPS: f64 = 1e-5;

pub fn birnn_forward(g: &mut Graph, seq: &LevelSequence, params: &BiRnnParams) -> Result<BiRnnState> {
    if seq.is_empty() {
        return Err(Error::invalid("birnn_forward", "empty sequence"));
    }
    if seq.width() != params.forward.input.d_in() {
        return Err(Error::shape(
            "birnn_forward",
            "embedding width",
            params.forward.input.d_in(),
            seq.width(),
        ));
    }
    let forward = params.forward.run(g, seq.levels())?;
    let reversed: Vec<Var> = seq.levels().iter().rev().copied().collect();
    let mut backward = params.backward.run(g, &reversed)?;
    backward.reverse();

    let mut hidden = Vec::with_capacity(seq.len());
    let mut outputs = Vec::with_capacity(seq.len());
    for (f, b) in forward.iter().zip(&backward) {
        let h = g.concat_cols(&[*f, *b])?;
        let z = params.output.forward(g, h)?;
        hidden.push(h);
        outputs.push(g.tanh(z));
    }
    Ok(BiRnnState {
        hidden,
        outputs,
        forward,
        backward,
    })
}

/// Pooled vector `sum_i softmax(score)_i * y_i` with `score_i = <h_i, y_i>`.
/// Returns the pooled `[N, 2u]` tensor and the `[N, l]` weights.
pub fn self_attention_pool(g: &mut Graph, state: &BiRnnState) -> Result<(Var, Var)> {
    scaled_attention_pool(g, state, 1.0)
}

/// [`self_attention_pool`] with every score multiplied by `scale` before the softmax.
pub fn scaled_attention_pool(g: &mut Graph, state: &BiRnnState, scale: f64) -> Result<(Var, Var)> {
    const OP: &str = "self_attention_pool";
    if state.hidden.is_empty() || state.hidden.len() != state.outputs.len() {
        return Err(Error::shape(OP, "level count", state.hidden.len(), state.outputs.len()));
    }
    let mut scores = Vec::with_capacity(state.hidden.len());
    for (h, y) in state.hidden.iter().zip(&state.outputs) {
        let (hw, yw) = (g.value(*h).dim(OP, 1)?, g.value(*y).dim(OP, 1)?);
        if hw != yw {
            return Err(Error::shape(OP, "hidden vs output width", hw, yw));
        }
        scores.push(g.row_dot(*h, *y)?);
    }
    let mut scores = g.concat_cols(&scores)?;
    if scale != 1.0 {
        scores = g.scale(scores, scale);
    }
    let weights = g.softmax(scores);
    let mut pooled = None;
    for (i, y) in state.outputs.iter().enumerate() {
        let w = g.slice_cols(weights, i, 1)?;
        let term = g.scale_rows(*y, w)?;
        pooled = Some(match pooled {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((pooled.expect("non-empty"), weights))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub embed: Vec<ConvParams>,
    pub rnn: BiRnnParams,
}

impl FusionParams {
    /// One 1x1 projection per tap, taking `tap_channels[k]` channels to `d`.
    pub fn new(tap_channels: &[usize], d: usize, u: usize, seed: u64) -> Self {
        FusionParams {
            embed: tap_channels
                .iter()
                .enumerate()
                .map(|(k, &c)| ConvParams::he(&format!("fusion.embed.{k}"), c, d, 1, seed))
                .collect(),
            rnn: BiRnnParams::xavier(d, u, seed),
        }
    }

    pub fn output_width(&self) -> usize {
        self.rnn.output.d_out()
    }

    /// Embeds every tap, encodes the sequence and pools it to `[N, 2u]`.
    pub fn forward(&self, g: &mut Graph, taps: &[Var]) -> Result<FusionOutput> {
        if taps.len() != self.embed.len() {
            return Err(Error::shape("fusion", "tap count", self.embed.len(), taps.len()));
        }
        let levels = taps
            .iter()
            .zip(&self.embed)
            .map(|(t, p)| {
                let e = level_embed(g, *t, p)?;
                g.normalize_rows(e, EMBED_NORM_EPS)
            })
            .collect::<Result<Vec<_>>>()?;
        let seq = LevelSequence::new(g, levels)?;
        let state = birnn_forward(g, &seq, &self.rnn)?;
        // Raw dot products of 2u near-saturated units differ by tens, which
        // pins the softmax to one level for good. Scale them like a unit-variance sum.
        let scale = 1.0 / (self.output_width() as f64).sqrt();
        let (pooled, weights) = scaled_attention_pool(g, &state, scale)?;
        Ok(FusionOutput { pooled, weights })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub pooled: Var,
    pub weights: Var,
}

impl Module for FusionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.embed.visit(f);
        self.rnn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.embed.visit_mut(f);
        self.rnn.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::nn::zero_all;

    fn vectors(g: &mut Graph, n: usize, d: usize, count: usize) -> Vec<Var> {
        (0..count)
            .map(|k| {
                let data = (0..n * d).map(|i| ((i * 7 + k * 13) as f64 * 0.37).sin()).collect();
                g.constant(Tensor::new(&[n, d], data).unwrap())
            })
            .collect()
    }

    #[test]
    fn level_embed_of_constant_map_with_identity_projection() {
        let mut proj = ConvParams::he("e", 2, 2, 1, 0);
        proj.kernel.value = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 5, 3], 0.7));
        let e = level_embed(&mut g, x, &proj).unwrap();
        assert_eq!(g.value(e).shape(), &[1, 2]);
        for v in g.value(e).data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn level_embed_rejects_channel_mismatch() {
        let proj = ConvParams::he("e", 3, 4, 1, 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(level_embed(&mut g, x, &proj).is_err());
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let g = Graph::new();
        assert!(LevelSequence::new(&g, vec![]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_hidden_states() {
        let mut p = BiRnnParams::xavier(4, 3, 1);
        zero_all(&mut p);
        let mut g = Graph::new();
        let xs = vectors(&mut g, 2, 4, 3);
        let seq = LevelSequence::new(&g, xs).unwrap();
        let state = birnn_forward(&mut g, &seq, &p).unwrap();
        for h in &state.hidden {
            assert!(g.value(*h).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_level_pools_to_its_output() {
        let p = BiRnnParams::xavier(4, 3, 2);
        let mut g = Graph::new();
        let xs = vectors(&mut g, 2, 4, 1);
        let seq = LevelSequence::new(&g, xs).unwrap();
        let state = birnn_forward(&mut g, &seq, &p).unwrap();
        let (pooled, w) = self_attention_pool(&mut g, &state).unwrap();
        assert_eq!(g.value(pooled).data(), g.value(state.outputs[0]).data());
        assert!(g.value(w).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn reversal_swaps_directions() {
        let p = BiRnnParams::xavier(4, 3, 3);
        let swapped = BiRnnParams {
            forward: p.backward.clone(),
            backward: p.forward.clone(),
            output: p.output.clone(),
        };
        let mut g = Graph::new();
        let xs = vectors(&mut g, 2, 4, 3);
        let seq = LevelSequence::new(&g, xs).unwrap();
        let a = birnn_forward(&mut g, &seq, &p).unwrap();
        let b = birnn_forward(&mut g, &seq.reversed(), &swapped).unwrap();
        let l = seq.len();
        for i in 0..l {
            assert_eq!(g.value(b.forward[i]).data(), g.value(a.backward[l - 1 - i]).data());
            assert_eq!(g.value(b.backward[i]).data(), g.value(a.forward[l - 1 - i]).data());
        }
    }

    #[test]
    fn scaled_scores_match_a_direct_evaluation() {
        let p = BiRnnParams::xavier(4, 3, 5);
        let mut g = Graph::new();
        let xs = vectors(&mut g, 1, 4, 3);
        let seq = LevelSequence::new(&g, xs).unwrap();
        let state = birnn_forward(&mut g, &seq, &p).unwrap();
        let (_, w) = scaled_attention_pool(&mut g, &state, 0.5).unwrap();
        let scores: Vec<f64> = (0..3)
            .map(|i| {
                let h = g.value(state.hidden[i]).data();
                let y = g.value(state.outputs[i]).data();
                0.5 * h.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for (i, s) in scores.iter().enumerate() {
            assert!((g.value(w).data()[i] - s.exp() / z).abs() < 1e-12);
        }
    }
}
