//! Regression losses (squared error, Tukey's biweight) and the evaluation
//! metrics (RMSE, concordance correlation coefficient).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::diffcore::Penalty;
use crate::error::{Error, Result};

/// Ground truth `y` and prediction `ŷ` of equal, non-zero length.
#[derive(Clone, Copy, Debug)]
pub struct PredictionPair<'a> {
    truth: &'a [f64],
    pred: &'a [f64],
}

impl<'a> PredictionPair<'a> {
    pub fn new(truth: &'a [f64], pred: &'a [f64]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("prediction_pair", "length", truth.len(), pred.len()));
        }
        if truth.is_empty() {
            return Err(Error::invalid("prediction_pair", "needs at least one element"));
        }
        if !truth.iter().chain(pred).all(|v| v.is_finite()) {
            return Err(Error::invalid("prediction_pair", "non-finite value"));
        }
        Ok(PredictionPair { truth, pred })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn truth(&self) -> &'a [f64] {
        self.truth
    }

    pub fn pred(&self) -> &'a [f64] {
        self.pred
    }

    fn residuals(&self) -> impl Iterator<Item = f64> + 'a {
        self.truth.iter().zip(self.pred).map(|(y, yh)| y - yh)
    }
}

/// Tukey cutoff `c`; 4.685 gives 95% efficiency under Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TukeyConfig {
    c: f64,
}

impl TukeyConfig {
    pub const DEFAULT_C: f64 = 4.685;

    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid("tukey", format!("cutoff must be positive, got {c}")));
        }
        Ok(TukeyConfig { c })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// `ρ(r) = c²/6 · [1 − (1 − (r/c)²)³]` inside the cutoff, `c²/6` beyond it.
    pub fn rho(&self, r: f64) -> f64 {
        let cap = self.c * self.c / 6.0;
        if r.abs() <= self.c {
            let u = 1.0 - (r / self.c).powi(2);
            cap * (1.0 - u * u * u)
        } else {
            cap
        }
    }

    /// `ψ(r) = dρ/dr = r · (1 − (r/c)²)²` inside the cutoff, 0 beyond it.
    pub fn psi(&self, r: f64) -> f64 {
        if r.abs() <= self.c {
            let u = 1.0 - (r / self.c).powi(2);
            r * u * u
        } else {
            0.0
        }
    }
}

impl Default for TukeyConfig {
    fn default() -> Self {
        TukeyConfig { c: Self::DEFAULT_C }
    }
}

pub fn mse(pair: PredictionPair<'_>) -> f64 {
    pair.residuals().map(|r| r * r).sum::<f64>() / pair.len() as f64
}

pub fn tukey_loss(pair: PredictionPair<'_>, cfg: TukeyConfig) -> f64 {
    pair.residuals().map(|r| cfg.rho(r)).sum::<f64>() / pair.len() as f64
}

pub fn tukey_grad(residual: f64, cfg: TukeyConfig) -> f64 {
    cfg.psi(residual)
}

pub fn rmse(pair: PredictionPair<'_>) -> f64 {
    mse(pair).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ccc {
    pub value: f64,
    /// Set when either sequence is constant; `value` is then 0.
    pub degenerate: bool,
}

/// Concordance correlation coefficient with population (1/n) moments:
/// `2·s_xy / (s_x² + s_y² + (x̄ − ȳ)²)`.
pub fn ccc(pair: PredictionPair<'_>) -> Result<Ccc> {
    let n = pair.len();
    if n < 2 {
        return Err(Error::invalid("ccc", "needs at least two samples"));
    }
    // Constant sequences are detected exactly; their computed variance can
    // be a rounding residue instead of zero.
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(pair.truth) || constant(pair.pred) {
        return Ok(Ccc {
            value: 0.0,
            degenerate: true,
        });
    }
    let nf = n as f64;
    let mean_y = pair.truth.iter().sum::<f64>() / nf;
    let mean_p = pair.pred.iter().sum::<f64>() / nf;
    let (mut var_y, mut var_p, mut cov) = (0.0, 0.0, 0.0);
    for (y, p) in pair.truth.iter().zip(pair.pred) {
        let (dy, dp) = (y - mean_y, p - mean_p);
        var_y += dy * dy;
        var_p += dp * dp;
        cov += dy * dp;
    }
    let (var_y, var_p, cov) = (var_y / nf, var_p / nf, cov / nf);
    let denom = var_y + var_p + (mean_y - mean_p).powi(2);
    if denom <= 0.0 {
        // spreads below f64 resolution
        return Ok(Ccc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Ccc {
        value: (2.0 * cov / denom).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Which per-residual penalty the regression heads train with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegressionLoss {
    Mse,
    Tukey(TukeyConfig),
}

impl RegressionLoss {
    pub fn penalty(&self) -> Arc<dyn Penalty> {
        match *self {
            RegressionLoss::Mse => Arc::new(SquaredPenalty),
            RegressionLoss::Tukey(cfg) => Arc::new(TukeyPenalty(cfg)),
        }
    }

    pub fn evaluate(&self, pair: PredictionPair<'_>) -> f64 {
        match *self {
            RegressionLoss::Mse => mse(pair),
            RegressionLoss::Tukey(cfg) => tukey_loss(pair, cfg),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegressionLoss::Mse => "mse",
            RegressionLoss::Tukey(_) => "tukey",
        }
    }
}

impl fmt::Display for RegressionLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegressionLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(RegressionLoss::Mse),
            "tukey" => Ok(RegressionLoss::Tukey(TukeyConfig::default())),
            other => Err(Error::Unknown {
                what: "loss",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug)]
struct SquaredPenalty;

impl Penalty for SquaredPenalty {
    fn value(&self, r: f64) -> f64 {
        r * r
    }

    fn derivative(&self, r: f64) -> f64 {
        2.0 * r
    }
}

#[derive(Debug)]
struct TukeyPenalty(TukeyConfig);

impl Penalty for TukeyPenalty {
    fn value(&self, r: f64) -> f64 {
        self.0.rho(r)
    }

    fn derivative(&self, r: f64) -> f64 {
        self.0.psi(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair<'a>(y: &'a [f64], p: &'a [f64]) -> PredictionPair<'a> {
        PredictionPair::new(y, p).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(pair(&[0.3, 0.1], &[0.3, 0.1])), 0.0);
        assert_eq!(mse(pair(&[0.0, 0.0], &[1.0, 1.0])), 1.0);
        assert!((mse(pair(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0])) - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(PredictionPair::new(&[1.0, 2.0], &[1.0]).is_err());
        assert!(PredictionPair::new(&[], &[]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(pair(&[0.5], &[0.5])), 0.0);
        assert_eq!(rmse(pair(&[0.0], &[2.0])), 2.0);
        let r = rmse(pair(&[0.0; 4], &[1.0, 1.0, 1.0, 3.0]));
        assert!((r - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tukey_examples() {
        let cfg = TukeyConfig::default();
        let c = cfg.c();
        assert_eq!(tukey_loss(pair(&[0.4], &[0.4]), cfg), 0.0);
        assert!((cfg.rho(c) - c * c / 6.0).abs() < 1e-12);
        assert!((cfg.rho(-c) - c * c / 6.0).abs() < 1e-12);
        // Scalar evaluation for r = 2: (c^2/6) * (1 - (1 - 4/c^2)^3).
        let u: f64 = 1.0 - 4.0 / (4.685 * 4.685);
        let expected = 4.685 * 4.685 / 6.0 * (1.0 - u * u * u);
        assert!((tukey_loss(pair(&[2.0], &[0.0]), cfg) - expected).abs() < 1e-14);
        assert!((expected - 1.6577).abs() < 1e-4, "{expected}");
    }

    #[test]
    fn tukey_grad_examples() {
        let cfg = TukeyConfig::default();
        assert_eq!(tukey_grad(0.0, cfg), 0.0);
        assert_eq!(tukey_grad(5.0, cfg), 0.0);
        assert_eq!(tukey_grad(-100.0, cfg), 0.0);
        let h = 1e-5;
        let fd = (cfg.rho(1.0 + h) - cfg.rho(1.0 - h)) / (2.0 * h);
        let g = tukey_grad(1.0, cfg);
        assert!((g - fd).abs() / g.abs() <= 1e-6, "{g} vs {fd}");
    }

    #[test]
    fn tukey_rejects_bad_cutoff() {
        assert!(TukeyConfig::new(0.0).is_err());
        assert!(TukeyConfig::new(-1.0).is_err());
    }

    #[test]
    fn ccc_examples() {
        let y = [-1.0, -0.2, 0.3, 1.0];
        assert!((ccc(pair(&y, &y)).unwrap().value - 1.0).abs() < 1e-15);
        let z = [-1.0, 0.0, 1.0];
        let neg = [1.0, 0.0, -1.0];
        assert!((ccc(pair(&z, &neg)).unwrap().value + 1.0).abs() < 1e-15);
        // y = [-1,0,1], ŷ = [-0.5,0,0.5]: means 0, s_y² = 2/3, s_ŷ² = 1/6, s_yŷ = 1/3.
        // CCC = (2/3) / (2/3 + 1/6) = 0.8.
        let c = ccc(pair(&z, &[-0.5, 0.0, 0.5])).unwrap();
        assert!((c.value - 0.8).abs() < 1e-15);
        assert!(!c.degenerate);
    }

    #[test]
    fn ccc_degenerate_inputs() {
        let c = ccc(pair(&[0.2, 0.2, 0.2], &[0.2, 0.2, 0.2])).unwrap();
        assert_eq!(c, Ccc { value: 0.0, degenerate: true });
        let c = ccc(pair(&[-0.5, 0.5], &[0.1, 0.1])).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
        assert!(ccc(pair(&[1.0], &[1.0])).is_err());
    }

    proptest! {
        #[test]
        fn tukey_is_even_bounded_and_monotone(r in -20.0f64..20.0, s in 0.0f64..20.0) {
            let cfg = TukeyConfig::default();
            let cap = cfg.c() * cfg.c() / 6.0;
            prop_assert_eq!(cfg.rho(r), cfg.rho(-r));
            prop_assert!(cfg.rho(r) <= cap + 1e-12);
            let (a, b) = if r.abs() <= s { (r.abs(), s) } else { (s, r.abs()) };
            prop_assert!(cfg.rho(a) <= cfg.rho(b) + 1e-12);
        }

        #[test]
        fn tukey_grad_matches_finite_differences(r in -10.0f64..10.0) {
            let cfg = TukeyConfig::default();
            let h = 1e-6;
            let fd = (cfg.rho(r + h) - cfg.rho(r - h)) / (2.0 * h);
            prop_assert!((cfg.psi(r) - fd).abs() < 1e-6);
        }

        #[test]
        fn ccc_properties(
            y in prop::collection::vec(-1.0f64..1.0, 2..30),
            noise in prop::collection::vec(-1.0f64..1.0, 30),
            shift in -5.0f64..5.0,
        ) {
            let p: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| 0.7 * a + 0.3 * b).collect();
            let c = ccc(pair(&y, &p)).unwrap().value;
            prop_assert!((-1.0..=1.0).contains(&c));
            let swapped = ccc(pair(&p, &y)).unwrap().value;
            prop_assert!((c - swapped).abs() < 1e-12);
            let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let ps: Vec<f64> = p.iter().map(|v| v + shift).collect();
            let shifted = ccc(pair(&ys, &ps)).unwrap().value;
            prop_assert!((c - shifted).abs() < 1e-9);
            let m = mse(pair(&y, &p));
            prop_assert!((rmse(pair(&y, &p)).powi(2) - m).abs() < 1e-12);
        }
    }
}
