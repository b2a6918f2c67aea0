//! Central finite-difference validation of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Denominator floor for the relative error, so that near-zero gradients
    /// are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            floor: 1e-6,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Elements where the step-`h` and step-`h/2` differences disagree, i.e.
    /// the perturbation crossed a relu kink or a maxpool argmax switch.
    pub skipped_nonsmooth: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped_nonsmooth).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Relative error with a denominator floor.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the scalar computation `f` with central
/// differences, for every named parameter in `params`.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(name, t)| g.param(name, t)).collect();
    let loss = f(&mut g, &vars)?;
    g.check_finite()?;
    g.backward(loss)?;
    let base = g.value(loss).item();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .zip(values)
            .map(|((name, _), t)| g.param(name, t))
            .collect();
        let loss = f(&mut g, &vars)?;
        g.check_finite()?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        loss: base,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, (name, _)) in params.iter().enumerate() {
        let len = values[pi].len();
        let stride = opts.max_elements.map_or(1, |m| len.div_ceil(m.max(1)));
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped_nonsmooth: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for idx in (0..len).step_by(stride) {
            let mut central = |h: f64| -> Result<f64> {
                let orig = values[pi].data()[idx];
                values[pi].data_mut()[idx] = orig + h;
                let plus = eval(&values);
                values[pi].data_mut()[idx] = orig - h;
                let minus = eval(&values);
                values[pi].data_mut()[idx] = orig;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let numeric = central(opts.step)?;
            let half = central(opts.step / 2.0)?;
            let a = analytic[pi][idx];
            let scale = numeric.abs().max(half.abs()).max(a.abs());
            if (numeric - half).abs() > 1e-7 + 1e-4 * scale {
                check.skipped_nonsmooth += 1;
                continue;
            }
            check.checked += 1;
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric, opts.floor));
        }
        report.params.push(check);
    }
    Ok(report)
}
