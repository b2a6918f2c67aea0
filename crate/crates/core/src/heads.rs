//! Two-stage multi-task heads.
//!
//! Stage one maps the fused feature vector to a dimensional representation
//! and a categorical representation (which also feeds a 7-way classifier).
//! Stage two regresses valence and arousal from the concatenation of both.

use std::fmt;
use std::str::FromStr;

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{DenseParams, Module, Param};
use crate::objective::RegressionLoss;

pub const NUM_CLASSES: usize = 7;

/// Which targets the heads carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// Valence only, from the dimensional representation.
    SingleValence,
    /// Arousal only, from the dimensional representation.
    SingleArousal,
    /// Valence and arousal from the dimensional representation; no categorical branch.
    MultiTask,
    /// Full two-stage structure with the categorical branch and classifier.
    TwoStage,
}

impl HeadMode {
    pub const ALL: [HeadMode; 4] = [
        HeadMode::SingleValence,
        HeadMode::SingleArousal,
        HeadMode::MultiTask,
        HeadMode::TwoStage,
    ];

    pub fn has_valence(self) -> bool {
        self != HeadMode::SingleArousal
    }

    pub fn has_arousal(self) -> bool {
        self != HeadMode::SingleValence
    }

    pub fn has_classifier(self) -> bool {
        self == HeadMode::TwoStage
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::SingleValence => "single_v",
            HeadMode::SingleArousal => "single_a",
            HeadMode::MultiTask => "mt",
            HeadMode::TwoStage => "2mt",
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "head_mode",
                value: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub mode: HeadMode,
    pub dim_fc: DenseParams,
    pub cat_fc: Option<DenseParams>,
    pub clf_out: Option<DenseParams>,
    pub valence_out: Option<DenseParams>,
    pub arousal_out: Option<DenseParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Output {
    pub dim_rep: Var,
    pub cat_rep: Option<Var>,
    pub clf_logits: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub stage1: Stage1Output,
    pub valence: Option<Var>,
    pub arousal: Option<Var>,
}

impl HeadParams {
    pub fn new(mode: HeadMode, fused: usize, n_dim: usize, n_cat: usize, seed: u64) -> Result<Self> {
        if n_dim == 0 || n_cat == 0 || fused == 0 {
            return Err(Error::invalid("heads", "hidden widths must be at least 1"));
        }
        let categorical = mode.has_classifier();
        let regress_in = if categorical { n_dim + n_cat } else { n_dim };
        Ok(HeadParams {
            mode,
            dim_fc: DenseParams::xavier("heads.dim_fc", fused, n_dim, seed),
            cat_fc: categorical.then(|| DenseParams::xavier("heads.cat_fc", fused, n_cat, seed)),
            clf_out: categorical.then(|| DenseParams::xavier("heads.clf_out", n_cat, NUM_CLASSES, seed)),
            valence_out: mode
                .has_valence()
                .then(|| DenseParams::xavier("heads.valence_out", regress_in, 1, seed)),
            arousal_out: mode
                .has_arousal()
                .then(|| DenseParams::xavier("heads.arousal_out", regress_in, 1, seed)),
        })
    }

    pub fn fused_width(&self) -> usize {
        self.dim_fc.d_in()
    }

    /// `dim_rep = relu(dense(fused))`, `cat_rep = relu(dense(fused))`,
    /// `clf_logits = dense(cat_rep)`.
    pub fn stage1_forward(&self, g: &mut Graph, fused: Var) -> Result<Stage1Output> {
        let width = g.value(fused).dim("stage1", 1)?;
        if width != self.fused_width() {
            return Err(Error::shape("stage1", "fused width", self.fused_width(), width));
        }
        let z = self.dim_fc.forward(g, fused)?;
        let dim_rep = g.relu(z);
        let (cat_rep, clf_logits) = match (&self.cat_fc, &self.clf_out) {
            (Some(cat_fc), Some(clf_out)) => {
                let z = cat_fc.forward(g, fused)?;
                let cat_rep = g.relu(z);
                let logits = clf_out.forward(g, cat_rep)?;
                (Some(cat_rep), Some(logits))
            }
            _ => (None, None),
        };
        Ok(Stage1Output {
            dim_rep,
            cat_rep,
            clf_logits,
        })
    }

    /// `tanh(dense([dim_rep ; cat_rep]))` for each carried target.
    pub fn stage2_forward(&self, g: &mut Graph, dim_rep: Var, cat_rep: Option<Var>) -> Result<(Option<Var>, Option<Var>)> {
        let joint = match cat_rep {
            Some(c) => g.concat_cols(&[dim_rep, c])?,
            None => dim_rep,
        };
        let width = g.value(joint).dim("stage2", 1)?;
        let mut head = |p: &Option<DenseParams>| -> Result<Option<Var>> {
            match p {
                None => Ok(None),
                Some(p) => {
                    if p.d_in() != width {
                        return Err(Error::shape("stage2", "representation width", p.d_in(), width));
                    }
                    let z = p.forward(g, joint)?;
                    Ok(Some(g.tanh(z)))
                }
            }
        };
        let valence = head(&self.valence_out)?;
        let arousal = head(&self.arousal_out)?;
        Ok((valence, arousal))
    }

    pub fn forward(&self, g: &mut Graph, fused: Var) -> Result<HeadOutput> {
        let stage1 = self.stage1_forward(g, fused)?;
        let (valence, arousal) = self.stage2_forward(g, stage1.dim_rep, stage1.cat_rep)?;
        Ok(HeadOutput {
            stage1,
            valence,
            arousal,
        })
    }
}

impl Module for HeadParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.dim_fc.visit(f);
        self.cat_fc.visit(f);
        self.clf_out.visit(f);
        self.valence_out.visit(f);
        self.arousal_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.dim_fc.visit_mut(f);
        self.cat_fc.visit_mut(f);
        self.clf_out.visit_mut(f);
        self.valence_out.visit_mut(f);
        self.arousal_out.visit_mut(f);
    }
}

/// `alpha` balances classification against regression, `beta` arousal against valence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid("loss_weights", format!("{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// `(w_clf, w_arousal, w_valence)` for a head mode. Modes without a
    /// classifier behave as `alpha = 0`; single-task modes put all weight on
    /// their one target.
    pub fn term_weights(&self, mode: HeadMode) -> (f64, f64, f64) {
        match mode {
            HeadMode::TwoStage => (
                self.alpha,
                (1.0 - self.alpha) * self.beta,
                (1.0 - self.alpha) * (1.0 - self.beta),
            ),
            HeadMode::MultiTask => (0.0, self.beta, 1.0 - self.beta),
            HeadMode::SingleValence => (0.0, 0.0, 1.0),
            HeadMode::SingleArousal => (0.0, 1.0, 0.0),
        }
    }

    /// `alpha·L_clf + (1 − alpha)·(beta·L_arousal + (1 − beta)·L_valence)`.
    pub fn combine(&self, l_clf: f64, l_arousal: f64, l_valence: f64) -> f64 {
        self.alpha * l_clf + (1.0 - self.alpha) * (self.beta * l_arousal + (1.0 - self.beta) * l_valence)
    }
}

/// Per-sample supervision for one batch.
#[derive(Clone, Debug, Default)]
pub struct Labels {
    pub valence: Option<Vec<f64>>,
    pub arousal: Option<Vec<f64>>,
    pub expression: Option<Vec<Option<usize>>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub clf: Option<Var>,
    pub valence: Option<Var>,
    pub arousal: Option<Var>,
}

/// Builds the weighted training objective on the graph.
pub fn total_loss(
    g: &mut Graph,
    out: &HeadOutput,
    labels: &Labels,
    weights: LossWeights,
    mode: HeadMode,
    regression: RegressionLoss,
) -> Result<LossTerms> {
    weights.validate()?;
    let (w_clf, w_a, w_v) = weights.term_weights(mode);
    let penalty = regression.penalty();

    let clf = match out.stage1.clf_logits {
        Some(logits) => {
            let exp = labels.expression.as_ref().ok_or(Error::MissingLabels("expression"))?;
            Some(g.cross_entropy(logits, exp)?)
        }
        None => None,
    };
    let valence = match out.valence {
        Some(v) => {
            let y = labels.valence.as_ref().ok_or(Error::MissingLabels("valence"))?;
            Some(g.residual_loss(v, y, penalty.clone())?)
        }
        None => None,
    };
    let arousal = match out.arousal {
        Some(a) => {
            let y = labels.arousal.as_ref().ok_or(Error::MissingLabels("arousal"))?;
            Some(g.residual_loss(a, y, penalty)?)
        }
        None => None,
    };

    let mut total: Option<Var> = None;
    for (term, w) in [(clf, w_clf), (arousal, w_a), (valence, w_v)] {
        if let Some(t) = term {
            let scaled = g.scale(t, w);
            total = Some(match total {
                None => scaled,
                Some(acc) => g.add(acc, scaled)?,
            });
        }
    }
    let total = total.ok_or_else(|| Error::invalid("total_loss", "no enabled task"))?;
    Ok(LossTerms {
        total,
        clf,
        valence,
        arousal,
    })
}
